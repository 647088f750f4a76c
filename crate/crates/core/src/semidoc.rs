// SPDX-License-Identifier: Apache-2.0

//! Semi-supervised deep one-class model.
//!
//! A two-layer encoder maps features into `(0, 1)^e`. Training pulls normal
//! queries towards a fixed center `c` and, in semi-supervised mode, pushes
//! each query at least a margin `delta` away from a sampled labeled anomaly:
//!
//! ```text
//! loss = 1/B * sum_i [ D(phi(q_i), c) + max(delta - D(phi(q_i), phi(n_i)), 0) ] + lambda * |theta|^2
//! ```
//!
//! `D` is the soft Hamming distance `sum_k |a_k - b_k|`. The anomaly score
//! is `clip(D(phi(z), c) / R, 0, 1)` with `R` the largest normal distance
//! seen in training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MelodyError, Result};
use crate::metrics::select_threshold;
use crate::pipeline::FeatureVector;
use crate::scalar::{sigmoid, Scalar};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const CENTER_CLIP: (f64, f64) = (0.05, 0.95);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OneClassMode {
    /// Center loss plus negative-sampling hinge.
    SemiDoc,
    /// Center loss only; anomalies are ignored.
    DeepSvdd,
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Layout {
    // w1 is stored input-major: w1[i * hidden + j] links input i to hidden j.
    pub fn w1(&self) -> std::ops::Range<usize> {
        0..self.input * self.hidden
    }
    pub fn b1(&self) -> std::ops::Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden
    }
    pub fn g1(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.hidden
    }
    pub fn beta1(&self) -> std::ops::Range<usize> {
        let s = self.g1().end;
        s..s + self.hidden
    }
    // w2[j * embed + k] links hidden j to output k.
    pub fn w2(&self) -> std::ops::Range<usize> {
        let s = self.beta1().end;
        s..s + self.hidden * self.embed
    }
    pub fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.embed
    }
    pub fn g2(&self) -> std::ops::Range<usize> {
        let s = self.b2().end;
        s..s + self.embed
    }
    pub fn beta2(&self) -> std::ops::Range<usize> {
        let s = self.g2().end;
        s..s + self.embed
    }
    pub fn len(&self) -> usize {
        self.beta2().end
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether parameter `i` is subject to weight decay (affine weights and
    /// biases; layer-norm gains and shifts are not).
    pub fn decayed(&self, i: usize) -> bool {
        self.w1().contains(&i) || self.b1().contains(&i) || self.w2().contains(&i) || self.b2().contains(&i)
    }
}

/// Encoder `input -> hidden -> embed`: affine, layer norm, leaky ReLU, then
/// affine, layer norm, sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder<F> {
    pub layout: Layout,
    pub params: Vec<F>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct Forward<F> {
    pub xhat1: Vec<F>,
    pub rstd1: F,
    /// Hidden pre-activation (after layer norm).
    pub hidden_pre: Vec<F>,
    pub hidden: Vec<F>,
    pub xhat2: Vec<F>,
    pub rstd2: F,
    pub output: Vec<F>,
}

impl<F: Scalar> Forward<F> {
    fn new(layout: &Layout) -> Self {
        Self {
            xhat1: vec![F::zero(); layout.hidden],
            rstd1: F::zero(),
            hidden_pre: vec![F::zero(); layout.hidden],
            hidden: vec![F::zero(); layout.hidden],
            xhat2: vec![F::zero(); layout.embed],
            rstd2: F::zero(),
            output: vec![F::zero(); layout.embed],
        }
    }
}

#[inline]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().copied().sum::<F>();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Normalizes `pre` in place to zero mean and unit variance; returns 1/std.
fn layer_norm<F: Scalar>(pre: &mut [F]) -> F {
    let n = F::lit(pre.len() as f64);
    let mean = pre.iter().copied().sum::<F>() / n;
    let var = pre.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let rstd = F::one() / (var + F::lit(LAYER_NORM_EPS)).sqrt();
    for v in pre.iter_mut() {
        *v = (*v - mean) * rstd;
    }
    rstd
}

/// Gradient through a layer norm: `dx = rstd * (dy - mean(dy) - xhat * mean(dy * xhat))`.
fn layer_norm_backward<F: Scalar>(dxhat: &mut [F], xhat: &[F], rstd: F) {
    let n = F::lit(dxhat.len() as f64);
    let m1 = dxhat.iter().copied().sum::<F>() / n;
    let m2 = dxhat.iter().zip(xhat).map(|(&d, &x)| d * x).sum::<F>() / n;
    for (d, &x) in dxhat.iter_mut().zip(xhat) {
        *d = rstd * (*d - m1 - x * m2);
    }
}

impl<F: Scalar> Encoder<F> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases, unit
    /// layer-norm gains, zero shifts.
    pub fn init(input: usize, hidden: usize, embed: usize, rng: &mut impl Rng) -> Self {
        let layout = Layout { input, hidden, embed };
        let mut params = vec![F::zero(); layout.len()];
        let b1 = 1.0 / (input as f64).sqrt();
        for i in layout.w1().chain(layout.b1()) {
            params[i] = F::lit(rng.random_range(-b1..b1));
        }
        let b2 = 1.0 / (hidden as f64).sqrt();
        for i in layout.w2().chain(layout.b2()) {
            params[i] = F::lit(rng.random_range(-b2..b2));
        }
        for i in layout.g1().chain(layout.g2()) {
            params[i] = F::one();
        }
        Self { layout, params }
    }

    /// All affine weights and biases zero; outputs are exactly 0.5.
    pub fn zeros(input: usize, hidden: usize, embed: usize) -> Self {
        let layout = Layout { input, hidden, embed };
        let mut params = vec![F::zero(); layout.len()];
        for i in layout.g1().chain(layout.g2()) {
            params[i] = F::one();
        }
        Self { layout, params }
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input
    }

    pub fn embed_dim(&self) -> usize {
        self.layout.embed
    }

    pub fn forward_into(&self, z: &[F], fw: &mut Forward<F>) {
        let l = &self.layout;
        let p = &self.params;
        let pre1 = &mut fw.xhat1;
        pre1.copy_from_slice(&p[l.b1()]);
        let w1 = &p[l.w1()];
        for (i, &zi) in z.iter().enumerate() {
            if zi != F::zero() {
                axpy(zi, &w1[i * l.hidden..(i + 1) * l.hidden], pre1);
            }
        }
        fw.rstd1 = layer_norm(pre1);
        let (g1, be1) = (&p[l.g1()], &p[l.beta1()]);
        let slope = F::lit(LEAKY_SLOPE);
        for j in 0..l.hidden {
            let n = g1[j] * fw.xhat1[j] + be1[j];
            fw.hidden_pre[j] = n;
            fw.hidden[j] = if n > F::zero() { n } else { slope * n };
        }
        let pre2 = &mut fw.xhat2;
        pre2.copy_from_slice(&p[l.b2()]);
        let w2 = &p[l.w2()];
        for (j, &hj) in fw.hidden.iter().enumerate() {
            axpy(hj, &w2[j * l.embed..(j + 1) * l.embed], pre2);
        }
        fw.rstd2 = layer_norm(pre2);
        let (g2, be2) = (&p[l.g2()], &p[l.beta2()]);
        for k in 0..l.embed {
            fw.output[k] = sigmoid(g2[k] * fw.xhat2[k] + be2[k]);
        }
    }

    pub fn forward(&self, z: &[F]) -> Forward<F> {
        let mut fw = Forward::new(&self.layout);
        self.forward_into(z, &mut fw);
        fw
    }

    /// Embedding of `z`, each coordinate in `(0, 1)`.
    pub fn encode(&self, z: &[F]) -> Result<Vec<F>> {
        if z.len() != self.layout.input {
            return Err(MelodyError::Dimension {
                expected: self.layout.input,
                got: z.len(),
            });
        }
        Ok(self.forward(z).output)
    }

    /// Accumulates into `grad` the parameter gradient given `d loss / d output`.
    /// `scratch` must hold at least `hidden + embed` values.
    fn backward(&self, z: &[F], fw: &Forward<F>, d_out: &[F], grad: &mut [F], scratch: &mut Vec<F>) {
        let l = &self.layout;
        let p = &self.params;
        scratch.clear();
        scratch.resize(l.embed + l.hidden, F::zero());
        let (da2, dh) = scratch.split_at_mut(l.embed);

        let g2 = &p[l.g2()];
        for k in 0..l.embed {
            let o = fw.output[k];
            let dn = d_out[k] * o * (F::one() - o);
            grad[l.g2().start + k] += dn * fw.xhat2[k];
            grad[l.beta2().start + k] += dn;
            da2[k] = dn * g2[k];
        }
        layer_norm_backward(da2, &fw.xhat2, fw.rstd2);
        axpy(F::one(), da2, &mut grad[l.b2()]);
        let w2 = &p[l.w2()];
        let w2_off = l.w2().start;
        for (j, (dhj, &hj)) in dh.iter_mut().zip(&fw.hidden).enumerate() {
            let row = j * l.embed..(j + 1) * l.embed;
            axpy(hj, da2, &mut grad[w2_off + row.start..w2_off + row.end]);
            *dhj = dot(&w2[row], da2);
        }
        let g1 = &p[l.g1()];
        let slope = F::lit(LEAKY_SLOPE);
        for j in 0..l.hidden {
            let dn = if fw.hidden_pre[j] > F::zero() { dh[j] } else { slope * dh[j] };
            grad[l.g1().start + j] += dn * fw.xhat1[j];
            grad[l.beta1().start + j] += dn;
            dh[j] = dn * g1[j];
        }
        layer_norm_backward(dh, &fw.xhat1, fw.rstd1);
        axpy(F::one(), dh, &mut grad[l.b1()]);
        let w1_off = l.w1().start;
        for (i, &zi) in z.iter().enumerate() {
            if zi != F::zero() {
                let s = w1_off + i * l.hidden;
                axpy(zi, dh, &mut grad[s..s + l.hidden]);
            }
        }
    }

    /// `sum(theta^2)` over the decayed parameters.
    pub fn decay_norm(&self) -> F {
        let l = &self.layout;
        [l.w1(), l.b1(), l.w2(), l.b2()]
            .into_iter()
            .map(|r| self.params[r].iter().map(|&v| v * v).sum::<F>())
            .sum()
    }
}

/// `sum_k |a_k - b_k|`: Hamming distance relaxed to `(0, 1)`-valued codes.
pub fn soft_hamming<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(MelodyError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(l1(a, b))
}

#[inline]
fn l1<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum()
}

#[inline]
fn sign<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Coordinate-wise mean embedding of `sample`, clipped into `[0.05, 0.95]`.
pub fn init_center<F: Scalar>(encoder: &Encoder<F>, sample: &[&[F]]) -> Result<Vec<F>> {
    if sample.is_empty() {
        return Err(MelodyError::Data("center initialization needs at least one normal sample".into()));
    }
    let mut c = vec![F::zero(); encoder.embed_dim()];
    let mut fw = Forward::new(&encoder.layout);
    for z in sample {
        if z.len() != encoder.input_dim() {
            return Err(MelodyError::Dimension {
                expected: encoder.input_dim(),
                got: z.len(),
            });
        }
        encoder.forward_into(z, &mut fw);
        axpy(F::one(), &fw.output, &mut c);
    }
    let n = F::lit(sample.len() as f64);
    let (lo, hi) = (F::lit(CENTER_CLIP.0), F::lit(CENTER_CLIP.1));
    for v in &mut c {
        *v = (*v / n).max(lo).min(hi);
    }
    Ok(c)
}

/// Loss hyperparameters shared by [`batch_loss`] and training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams<F> {
    pub mode: OneClassMode,
    pub margin: F,
    pub weight_decay: F,
}

/// One training tuple: a normal query and (semi-supervised mode) its negative.
pub type Tuple<'a, F> = (&'a [F], Option<&'a [F]>);

/// Batch objective and its gradient with respect to the flat parameters.
pub fn batch_loss_grad<F: Scalar>(
    encoder: &Encoder<F>,
    batch: &[Tuple<'_, F>],
    center: &[F],
    lp: &LossParams<F>,
    grad: &mut Vec<F>,
) -> F {
    let mut ws = Workspace::new(&encoder.layout);
    loss_grad_with(encoder, batch, center, lp, Some(grad), &mut ws)
}

/// Batch objective only.
pub fn batch_loss<F: Scalar>(encoder: &Encoder<F>, batch: &[Tuple<'_, F>], center: &[F], lp: &LossParams<F>) -> F {
    let mut ws = Workspace::new(&encoder.layout);
    loss_grad_with(encoder, batch, center, lp, None, &mut ws)
}

struct Workspace<F> {
    fq: Forward<F>,
    fnv: Forward<F>,
    dq: Vec<F>,
    dn: Vec<F>,
    scratch: Vec<F>,
}

impl<F: Scalar> Workspace<F> {
    fn new(layout: &Layout) -> Self {
        Self {
            fq: Forward::new(layout),
            fnv: Forward::new(layout),
            dq: vec![F::zero(); layout.embed],
            dn: vec![F::zero(); layout.embed],
            scratch: Vec::with_capacity(layout.hidden + layout.embed),
        }
    }
}

fn loss_grad_with<F: Scalar>(
    encoder: &Encoder<F>,
    batch: &[Tuple<'_, F>],
    center: &[F],
    lp: &LossParams<F>,
    mut grad: Option<&mut Vec<F>>,
    ws: &mut Workspace<F>,
) -> F {
    if let Some(g) = grad.as_deref_mut() {
        g.clear();
        g.resize(encoder.layout.len(), F::zero());
    }
    let inv_b = F::one() / F::lit(batch.len().max(1) as f64);
    let mut total = F::zero();
    for &(q, neg) in batch {
        encoder.forward_into(q, &mut ws.fq);
        total += l1(&ws.fq.output, center);
        let mut hinge_active = false;
        if let (OneClassMode::SemiDoc, Some(n)) = (lp.mode, neg) {
            encoder.forward_into(n, &mut ws.fnv);
            let d = l1(&ws.fq.output, &ws.fnv.output);
            let h = lp.margin - d;
            if h > F::zero() {
                total += h;
                hinge_active = true;
            }
        }
        let Some(g) = grad.as_deref_mut() else { continue };
        for ((d, &o), &c) in ws.dq.iter_mut().zip(&ws.fq.output).zip(center) {
            *d = inv_b * sign(o - c);
        }
        if hinge_active {
            for k in 0..ws.dq.len() {
                let s = inv_b * sign(ws.fq.output[k] - ws.fnv.output[k]);
                ws.dq[k] -= s;
                ws.dn[k] = s;
            }
            encoder.backward(neg.expect("hinge implies negative"), &ws.fnv, &ws.dn, g, &mut ws.scratch);
        }
        encoder.backward(q, &ws.fq, &ws.dq, g, &mut ws.scratch);
    }
    let mut loss = total * inv_b;
    if lp.weight_decay > F::zero() {
        loss += lp.weight_decay * encoder.decay_norm();
        if let Some(g) = grad {
            let l = &encoder.layout;
            let two_l = F::lit(2.0) * lp.weight_decay;
            for r in [l.w1(), l.b1(), l.w2(), l.b2()] {
                for i in r {
                    g[i] += two_l * encoder.params[i];
                }
            }
        }
    }
    loss
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n: usize, lr: F) -> Self {
        Self {
            lr,
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F]) {
        self.t += 1;
        let c1 = F::one() - self.beta1.powi(self.t);
        let c2 = F::one() - self.beta2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (F::one() - self.beta1) * g;
            *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
            *p -= step * *m / (v.sqrt() + self.eps);
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: OneClassMode,
    /// Hinge margin `delta`.
    pub margin: f64,
    /// `lambda` in `lambda * |theta|^2`.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation F1 improvement before stopping.
    pub patience: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Probability that a query comes from the unlabeled pool. `None`
    /// samples uniformly over labeled normals and unlabeled together.
    pub unlabeled_share: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: OneClassMode::SemiDoc,
            margin: 100.0,
            weight_decay: 1e-4,
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 500,
            patience: 20,
            hidden: 128,
            embed: 128,
            unlabeled_share: None,
            seed: 0,
        }
    }
}

/// Training inputs, as standardized feature rows.
#[derive(Clone, Copy, Debug)]
pub struct OneClassData<'a, F> {
    pub labeled_normals: &'a [FeatureVector<F>],
    pub unlabeled: &'a [FeatureVector<F>],
    pub anomalies: &'a [FeatureVector<F>],
}

/// Labeled rows used for early stopping.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a, F> {
    pub features: &'a [FeatureVector<F>],
    pub labels: &'a [bool],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean `D(phi(z), c)` over the training normals after the epoch.
    pub mean_normal_distance: f64,
    pub validation_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_validation_f1: Option<f64>,
}

/// A trained one-class model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiDocModel<F> {
    pub encoder: Encoder<F>,
    pub center: Vec<F>,
    pub radius: F,
    pub mode: OneClassMode,
    pub margin: f64,
    pub weight_decay: f64,
    pub schema: u64,
}

impl<F: Scalar> SemiDocModel<F> {
    /// `D(phi(z), c)`.
    pub fn distance(&self, z: &FeatureVector<F>) -> Result<F> {
        self.check(z)?;
        Ok(l1(&self.encoder.forward(&z.values).output, &self.center))
    }

    /// `clip(D(phi(z), c) / R, 0, 1)`.
    pub fn score(&self, z: &FeatureVector<F>) -> Result<F> {
        if self.radius.is_nan() || self.radius <= F::zero() {
            return Err(MelodyError::Artifact(format!("one-class radius must be positive, got {}", self.radius)));
        }
        let d = self.distance(z)?;
        Ok((d / self.radius).max(F::zero()).min(F::one()))
    }

    fn check(&self, z: &FeatureVector<F>) -> Result<()> {
        if z.schema != self.schema {
            return Err(MelodyError::SchemaMismatch {
                expected: format!("{:016x}", self.schema),
                got: format!("{:016x}", z.schema),
            });
        }
        if z.len() != self.encoder.input_dim() {
            return Err(MelodyError::Dimension {
                expected: self.encoder.input_dim(),
                got: z.len(),
            });
        }
        Ok(())
    }
}

fn distances<F: Scalar>(encoder: &Encoder<F>, center: &[F], rows: &[&[F]]) -> Vec<F> {
    let mut fw = Forward::new(&encoder.layout);
    rows.iter()
        .map(|z| {
            encoder.forward_into(z, &mut fw);
            l1(&fw.output, center)
        })
        .collect()
}

fn max_of<F: Scalar>(xs: &[F]) -> F {
    xs.iter().copied().fold(F::zero(), F::max)
}

/// Trains a one-class model.
///
/// Queries are drawn from labeled normals and unlabeled entities; each is
/// paired with an anomaly drawn uniformly with replacement. When a
/// validation split with both classes is supplied, the parameters with the
/// best swept validation F1 are kept and training stops after `patience`
/// epochs without improvement.
pub fn train<F: Scalar>(
    data: OneClassData<'_, F>,
    validation: Option<Validation<'_, F>>,
    cfg: &TrainConfig,
) -> Result<(SemiDocModel<F>, TrainReport)> {
    let normals: Vec<&FeatureVector<F>> = data.labeled_normals.iter().chain(data.unlabeled).collect();
    let Some(first) = normals.first() else {
        return Err(MelodyError::Data("one-class training needs at least one normal entity".into()));
    };
    if cfg.mode == OneClassMode::SemiDoc && data.anomalies.is_empty() {
        return Err(MelodyError::Config(
            "semi-supervised one-class training needs labeled anomalies; use the deep-svdd mode instead".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 || cfg.embed == 0 {
        return Err(MelodyError::Config("batch size and layer widths must be positive".into()));
    }
    if let Some(r) = cfg.unlabeled_share {
        if !(0.0..=1.0).contains(&r) {
            return Err(MelodyError::Config(format!("unlabeled share {r} outside [0, 1]")));
        }
    }
    let schema = first.schema;
    let dim = first.len();
    for z in normals.iter().copied().chain(data.anomalies) {
        if z.schema != schema || z.len() != dim {
            return Err(MelodyError::SchemaMismatch {
                expected: format!("{schema:016x}/{dim}"),
                got: format!("{:016x}/{}", z.schema, z.len()),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Encoder::<F>::init(dim, cfg.hidden, cfg.embed, &mut rng);
    let normal_rows: Vec<&[F]> = normals.iter().map(|z| z.values.as_slice()).collect();
    let center = init_center(&encoder, &normal_rows)?;
    let lp = LossParams {
        mode: cfg.mode,
        margin: F::lit(cfg.margin),
        weight_decay: F::lit(cfg.weight_decay),
    };

    let val = validation.filter(|v| {
        let pos = v.labels.iter().filter(|&&y| y).count();
        pos > 0 && pos < v.labels.len()
    });
    let val_rows: Vec<&[F]> = val.map_or_else(Vec::new, |v| v.features.iter().map(|z| z.values.as_slice()).collect());

    let mut adam = Adam::new(encoder.layout.len(), F::lit(cfg.learning_rate));
    let mut ws = Workspace::new(&encoder.layout);
    let mut grad = Vec::new();
    let mut order: Vec<usize> = (0..normals.len()).collect();
    let n_labeled = data.labeled_normals.len();
    let mut report = TrainReport::default();
    let mut best_params = encoder.params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let queries: Vec<usize> = match cfg.unlabeled_share {
            None => {
                order.shuffle(&mut rng);
                order.clone()
            }
            Some(share) => (0..normals.len())
                .map(|_| {
                    let from_unlabeled = !data.unlabeled.is_empty() && (n_labeled == 0 || rng.random_bool(share));
                    if from_unlabeled {
                        n_labeled + rng.random_range(0..data.unlabeled.len())
                    } else {
                        rng.random_range(0..n_labeled)
                    }
                })
                .collect(),
        };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in queries.chunks(cfg.batch_size) {
            let batch: Vec<Tuple<'_, F>> = chunk
                .iter()
                .map(|&i| {
                    let neg = match cfg.mode {
                        OneClassMode::SemiDoc => {
                            Some(data.anomalies[rng.random_range(0..data.anomalies.len())].values.as_slice())
                        }
                        OneClassMode::DeepSvdd => None,
                    };
                    (normal_rows[i], neg)
                })
                .collect();
            let loss = loss_grad_with(&encoder, &batch, &center, &lp, Some(&mut grad), &mut ws);
            adam.step(&mut encoder.params, &grad);
            loss_sum += loss.as_f64();
            batches += 1;
        }

        let normal_d = distances(&encoder, &center, &normal_rows);
        let radius = max_of(&normal_d);
        let mean_d = normal_d.iter().map(|d| d.as_f64()).sum::<f64>() / normal_d.len() as f64;
        let validation_f1 = val.map(|v| {
            let scores: Vec<F> = distances(&encoder, &center, &val_rows)
                .into_iter()
                .map(|d| if radius > F::zero() { (d / radius).min(F::one()) } else { F::zero() })
                .collect();
            select_threshold(&scores, v.labels).map_or(0.0, |c| c.f1())
        });
        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            mean_normal_distance: mean_d,
            validation_f1,
        });
        if let Some(f1) = validation_f1 {
            if f1 > best_f1 {
                best_f1 = f1;
                best_params.clone_from(&encoder.params);
                report.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    log::debug!("early stop at epoch {epoch}, best epoch {}", report.best_epoch);
                    break;
                }
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if val.is_some() && report.best_epoch > 0 {
        encoder.params = best_params;
        report.best_validation_f1 = Some(best_f1);
    }

    let radius = max_of(&distances(&encoder, &center, &normal_rows));
    let model = SemiDocModel {
        encoder,
        center,
        radius,
        mode: cfg.mode,
        margin: cfg.margin,
        weight_decay: cfg.weight_decay,
        schema,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: Vec<f64>) -> FeatureVector<f64> {
        FeatureVector::new(values, 7)
    }

    #[test]
    fn zero_encoder_outputs_half() {
        let enc = Encoder::<f64>::zeros(5, 4, 3);
        assert_eq!(enc.encode(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), vec![0.5; 3]);
        assert!(enc.encode(&[1.0]).is_err());
        let c = init_center(&enc, &[&[0.0; 5][..], &[1.0; 5][..]]).unwrap();
        assert_eq!(c, vec![0.5; 3]);
    }

    #[test]
    fn encode_is_bounded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::<f64>::init(10, 8, 6, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(enc, Encoder::<f64>::init(10, 8, 6, &mut rng2));
        let out = enc.encode(&[100.0; 10]).unwrap();
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out, enc.encode(&[100.0; 10]).unwrap());
    }

    #[test]
    fn soft_hamming_bounds() {
        assert_eq!(soft_hamming(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
        assert_eq!(soft_hamming(&vec![0.0f64; 128], &vec![1.0; 128]).unwrap(), 128.0);
        assert!(soft_hamming(&[0.0f64], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn center_clipping() {
        let mut enc = Encoder::<f64>::zeros(1, 2, 2);
        // drive output 0 towards sigmoid(-5) ~ 0.0067 via the layer-norm shift
        let be2 = enc.layout.beta2();
        enc.params[be2.start] = -5.0;
        enc.params[be2.start + 1] = 5.0;
        let c = init_center(&enc, &[&[0.0][..]]).unwrap();
        assert_eq!(c, vec![0.05, 0.95]);
        assert!(init_center::<f64>(&enc, &[]).is_err());
    }

    #[test]
    fn hinge_and_center_terms() {
        let enc = Encoder::<f64>::zeros(2, 3, 4);
        let z = [1.0, 2.0];
        let center = vec![0.5; 4];
        let lp = |margin| LossParams {
            mode: OneClassMode::SemiDoc,
            margin,
            weight_decay: 0.0,
        };
        // both embeddings are 0.5s: D(q, c) = 0, D(q, n) = 0 -> hinge = margin
        assert_eq!(batch_loss(&enc, &[(&z, Some(&z))], &center, &lp(3.0)), 3.0);
        // margin 0: hinge inactive and phi(q) = c -> 0
        assert_eq!(batch_loss(&enc, &[(&z, Some(&z))], &center, &lp(0.0)), 0.0);
        let off = vec![0.25; 4];
        assert_eq!(batch_loss(&enc, &[(&z, None)], &off, &lp(0.0)), 1.0);
    }

    #[test]
    fn deep_svdd_equals_semidoc_without_hinge() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = Encoder::<f64>::init(4, 5, 3, &mut rng);
        let q = [0.3, -1.0, 2.0, 0.1];
        let n = [1.3, 1.0, -2.0, 0.4];
        let c = vec![0.4, 0.5, 0.6];
        let mut g1 = Vec::new();
        let mut g2 = Vec::new();
        let semi = LossParams {
            mode: OneClassMode::SemiDoc,
            margin: 0.0,
            weight_decay: 1e-3,
        };
        let svdd = LossParams {
            mode: OneClassMode::DeepSvdd,
            ..semi
        };
        let a = batch_loss_grad(&enc, &[(&q, Some(&n))], &c, &semi, &mut g1);
        let b = batch_loss_grad(&enc, &[(&q, None)], &c, &svdd, &mut g2);
        assert_eq!(a, b);
        assert_eq!(g1, g2);
    }

    #[test]
    fn semidoc_requires_anomalies() {
        let normals = vec![fv(vec![0.0, 1.0])];
        let data = OneClassData {
            labeled_normals: &normals,
            unlabeled: &[],
            anomalies: &[],
        };
        let cfg = TrainConfig {
            max_epochs: 1,
            hidden: 4,
            embed: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(train(data, None, &cfg), Err(MelodyError::Config(_))));
        let cfg = TrainConfig {
            mode: OneClassMode::DeepSvdd,
            ..cfg
        };
        let (model, report) = train(data, None, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert!(model.score(&normals[0]).unwrap() <= 1.0);
    }

    #[test]
    fn score_clips_and_checks_schema() {
        let enc = Encoder::<f64>::zeros(2, 2, 2);
        let mut model = SemiDocModel {
            encoder: enc,
            center: vec![0.5, 0.5],
            radius: 1.0,
            mode: OneClassMode::SemiDoc,
            margin: 1.0,
            weight_decay: 0.0,
            schema: 7,
        };
        assert_eq!(model.score(&fv(vec![1.0, 2.0])).unwrap(), 0.0);
        model.center = vec![0.0, 0.25];
        // D = 0.5 + 0.25 = 0.75
        model.radius = 1.5;
        assert_eq!(model.score(&fv(vec![1.0, 2.0])).unwrap(), 0.5);
        model.radius = 0.5;
        assert_eq!(model.score(&fv(vec![1.0, 2.0])).unwrap(), 1.0);
        assert!(matches!(
            model.score(&FeatureVector::new(vec![1.0, 2.0], 8)),
            Err(MelodyError::SchemaMismatch { .. })
        ));
        model.radius = 0.0;
        assert!(matches!(model.score(&fv(vec![1.0, 2.0])), Err(MelodyError::Artifact(_))));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normals: Vec<_> = (0..40).map(|_| fv((0..6).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let anomalies: Vec<_> = (0..8).map(|_| fv((0..6).map(|_| rng.random_range(2.0..3.0)).collect())).collect();
        let data = OneClassData {
            labeled_normals: &normals,
            unlabeled: &[],
            anomalies: &anomalies,
        };
        let cfg = TrainConfig {
            max_epochs: 3,
            hidden: 8,
            embed: 8,
            batch_size: 16,
            margin: 4.0,
            seed: 99,
            ..TrainConfig::default()
        };
        let (a, _) = train(data, None, &cfg).unwrap();
        let (b, _) = train(data, None, &cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = train(data, None, &TrainConfig { seed: 100, ..cfg.clone() }).unwrap();
        assert_ne!(a.encoder, c.encoder);
    }
}
