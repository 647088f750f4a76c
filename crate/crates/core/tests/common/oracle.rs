// SPDX-License-Identifier: Apache-2.0

//! From-scratch recomputations used as test oracles. Each function looks at
//! the full prefix of observations and recomputes a score without any
//! carried state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use melody::featurizers::{FeaturizerParams, SIGMA_FLOOR};

pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

pub fn stats(history: &[Option<f64>]) -> Stats {
    let present: Vec<f64> = history.iter().flatten().copied().collect();
    let n = present.len() as f64;
    let mut sum = 0.0;
    for v in &present {
        sum += v;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for v in &present {
        ss += (v - mean) * (v - mean);
    }
    Stats {
        mean,
        std: (ss / n).sqrt(),
    }
}

fn z(s: &Stats, x: f64) -> f64 {
    (x - s.mean) / s.std.max(SIGMA_FLOOR)
}

fn trailing_run(prefix: &[Option<f64>], hit: impl Fn(Option<f64>) -> bool) -> usize {
    prefix.iter().rev().take_while(|v| hit(**v)).count()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Nearest-neighbor distance of the last `w` values of `history ++ prefix`
/// to every length-`w` window of the history, by exhaustive scan.
pub fn subnn(history: &[Option<f64>], prefix: &[Option<f64>], w: usize) -> f64 {
    let s = stats(history);
    let mut reference = Vec::with_capacity(history.len());
    let mut last = 0.0;
    for v in history {
        if let Some(v) = v {
            last = z(&s, *v);
        }
        reference.push(last);
    }
    let all: Vec<Option<f64>> = history.iter().chain(prefix).copied().collect();
    let tail = &all[all.len() - w..];
    let Some(first) = tail.iter().flatten().next() else {
        return 0.0;
    };
    let mut fill = z(&s, *first);
    let query: Vec<f64> = tail
        .iter()
        .map(|v| {
            if let Some(v) = v {
                fill = z(&s, *v);
            }
            fill
        })
        .collect();
    let mut best = f64::INFINITY;
    for start in 0..=reference.len() - w {
        let mut d2 = 0.0;
        for k in 0..w {
            let d = query[k] - reference[start + k];
            d2 += d * d;
        }
        best = best.min(d2);
    }
    best.sqrt()
}

/// Median-forecast deviation of the last value of `prefix`.
pub fn md(history: &[Option<f64>], prefix: &[Option<f64>], w: usize) -> f64 {
    let s = stats(history);
    let (current, before) = prefix.split_last().expect("non-empty prefix");
    let Some(x) = current else { return 0.0 };
    let mut buffer = Vec::new();
    let mut last: Option<f64> = None;
    for v in history.iter().chain(before) {
        let v = v.map(|v| z(&s, v)).or(last);
        if let Some(v) = v {
            buffer.push(v);
            last = Some(v);
        }
    }
    if buffer.len() < w {
        return 0.0;
    }
    let window = &buffer[buffer.len() - w..];
    let diffs: Vec<f64> = window.windows(2).map(|p| p[1] - p[0]).collect();
    let m_dif = if diffs.is_empty() { 0.0 } else { median(&diffs) };
    let forecast = median(window) + (w as f64 / 2.0) * m_dif;
    (z(&s, *x) - forecast).abs()
}

/// Score of any featurizer kind at the last step of `prefix`.
pub fn score(params: &FeaturizerParams, history: &[Option<f64>], prefix: &[Option<f64>]) -> f64 {
    let fired = |run: usize, w: usize| if run >= w { 1.0 } else { 0.0 };
    match *params {
        FeaturizerParams::Sbf { alpha, window } => {
            let s = stats(history);
            let tau = s.mean + alpha * s.std;
            fired(trailing_run(prefix, |v| v.is_some_and(|v| v > tau)), window)
        }
        FeaturizerParams::Tbf { threshold, window } => {
            fired(trailing_run(prefix, |v| v.is_some_and(|v| v > threshold)), window)
        }
        FeaturizerParams::Cbf { window } => fired(trailing_run(prefix, |v| v.is_none()), window),
        FeaturizerParams::SubNn { window } => subnn(history, prefix, window),
        FeaturizerParams::Md { window } => md(history, prefix, window),
    }
}

/// Random series with gaps, level changes and occasional spikes.
pub fn random_series(rng: &mut ChaCha8Rng, len: usize, missing: f64) -> Vec<Option<f64>> {
    let mut level = rng.random_range(-5.0..5.0);
    let scale = rng.random_range(0.1..3.0);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.03) {
                level += rng.random_range(-4.0..4.0) * scale;
            }
            if rng.random_bool(missing) {
                return None;
            }
            let spike = if rng.random_bool(0.05) { rng.random_range(3.0..8.0) * scale } else { 0.0 };
            Some(level + spike + scale * rng.random_range(-1.0..1.0))
        })
        .collect()
}

/// Random parameters of each kind, with windows short enough for fast oracles.
pub fn random_params(rng: &mut ChaCha8Rng, max_window: usize) -> Vec<FeaturizerParams> {
    vec![
        FeaturizerParams::Sbf {
            alpha: rng.random_range(0.5..4.0),
            window: rng.random_range(1..=5),
        },
        FeaturizerParams::Tbf {
            threshold: rng.random_range(-3.0..6.0),
            window: rng.random_range(1..=5),
        },
        FeaturizerParams::Cbf {
            window: rng.random_range(1..=4),
        },
        FeaturizerParams::SubNn {
            window: rng.random_range(1..=max_window),
        },
        FeaturizerParams::Md {
            window: rng.random_range(1..=max_window),
        },
    ]
}
