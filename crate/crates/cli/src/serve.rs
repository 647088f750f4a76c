// SPDX-License-Identifier: Apache-2.0

//! Session transports: NDJSON over stdio and a JSON HTTP API.

use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use melody::stream::{serve_ndjson, Reply, Response, SessionInit, StepInput};
use melody::{MelodyError, Scalar, SessionRegistry};

pub fn stdio<F: Scalar>(registry: &SessionRegistry<F>) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_ndjson(registry, stdin.lock(), stdout.lock())?;
    Ok(())
}

type Shared<F> = Arc<SessionRegistry<F>>;

fn status(e: &MelodyError) -> StatusCode {
    match e {
        MelodyError::UnknownSession(_) => StatusCode::NOT_FOUND,
        MelodyError::DuplicateEntity(_) | MelodyError::OutOfOrder { .. } => StatusCode::CONFLICT,
        MelodyError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

fn reply(result: melody::Result<Reply>) -> HttpResponse {
    match result {
        Ok(r) => (StatusCode::OK, Json(Response::ok(r))).into_response(),
        Err(e) => (status(&e), Json(Response::error(&e))).into_response(),
    }
}

async fn open<F: Scalar>(State(reg): State<Shared<F>>, Json(init): Json<SessionInit>) -> HttpResponse {
    reply(reg.open(&init).map(Reply::Open))
}

async fn step<F: Scalar>(State(reg): State<Shared<F>>, Path(id): Path<String>, Json(input): Json<StepInput>) -> HttpResponse {
    reply(reg.step(&id, &input).map(Reply::Step))
}

async fn scores<F: Scalar>(State(reg): State<Shared<F>>, Path(id): Path<String>) -> HttpResponse {
    reply(reg.scores(&id).map(|scores| Reply::Scores { id, scores }))
}

async fn close<F: Scalar>(State(reg): State<Shared<F>>, Path(id): Path<String>) -> HttpResponse {
    reply(reg.close(&id).map(Reply::Close))
}

async fn health<F: Scalar>(State(reg): State<Shared<F>>) -> Json<serde_json::Value> {
    let model = reg.model();
    Json(serde_json::json!({
        "ok": true,
        "sessions": reg.len(),
        "schema": model.schema.hash_hex(),
        "mode": model.mode,
    }))
}

pub fn router<F: Scalar>(registry: Shared<F>) -> Router {
    Router::new()
        .route("/health", get(health::<F>))
        .route("/sessions", post(open::<F>))
        .route("/sessions/{id}", axum::routing::delete(close::<F>))
        .route("/sessions/{id}/steps", post(step::<F>))
        .route("/sessions/{id}/scores", get(scores::<F>))
        .with_state(registry)
}

pub fn http<F: Scalar>(registry: SessionRegistry<F>, addr: SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let local = listener.local_addr()?;
        log::info!("listening on http://{local}");
        // tests and scripts read the bound address from this line
        eprintln!("listening on http://{local}");
        axum::serve(listener, router(Arc::new(registry)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
