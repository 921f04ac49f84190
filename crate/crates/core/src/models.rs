//! Loss functions, exact gradients and analytic constants.
//!
//! All losses are sample means plus `(λ/2)·‖w‖²`:
//!
//! * `Quadratic`: `½‖W x − t‖²` against one-hot labels (or explicit
//!   targets), `W` is `C × d`, no bias.
//! * `MultinomialLogistic`: softmax cross-entropy, `W` is `C × (d+1)` with the
//!   bias in the last column.
//! * `Mlp1`: one `tanh` hidden layer of width `H` followed by softmax
//!   cross-entropy. Non-convex; every bound-related routine refuses it.
//!
//! Reductions run over samples in index order so results do not depend on
//! how callers schedule work.

use nalgebra::{DMatrix, SVD};
use rayon::prelude::*;

use crate::datasets::{second_moment, LabeledDataset, Shard};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{stream, SplitMix64};

pub const POWER_ITERATION_TOL: f64 = 1e-8;
pub const POWER_ITERATION_MAX: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Quadratic,
    MultinomialLogistic,
    Mlp1,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Quadratic => "quadratic",
            Family::MultinomialLogistic => "multinomial_logistic",
            Family::Mlp1 => "mlp1",
        }
    }

    pub fn is_convex(self) -> bool {
        !matches!(self, Family::Mlp1)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Family::Quadratic),
            "multinomial_logistic" => Ok(Family::MultinomialLogistic),
            "mlp1" => Ok(Family::Mlp1),
            other => Err(Error::InvalidParameter(format!("unknown model family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub dim: usize,
    pub class_count: usize,
    pub l2_reg: f64,
    /// Hidden units; only read by `Mlp1`.
    pub hidden_width: usize,
}

impl ModelSpec {
    pub fn param_len(&self) -> usize {
        let (d, c, h) = (self.dim, self.class_count, self.hidden_width);
        match self.family {
            Family::Quadratic => c * d,
            Family::MultinomialLogistic => c * (d + 1),
            Family::Mlp1 => h * d + h + c * h + c,
        }
    }

    fn require_convex(&self) -> Result<()> {
        if self.family.is_convex() {
            Ok(())
        } else {
            Err(Error::Unsupported(self.family.as_str()))
        }
    }

    fn check(&self, w: &ParamVector, data: &LabeledDataset) -> Result<()> {
        if w.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                expected: self.param_len(),
                actual: w.len(),
            });
        }
        if data.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: data.dim(),
            });
        }
        if data.class_count() > self.class_count {
            return Err(Error::DimensionMismatch {
                expected: self.class_count,
                actual: data.class_count(),
            });
        }
        if self.family == Family::Mlp1 && self.hidden_width == 0 {
            return Err(Error::InvalidParameter("mlp1 needs hidden_width > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMethod {
    Analytic,
    PowerIteration,
    TrajectorySup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessEstimate {
    pub beta: f64,
    pub rho: f64,
    pub method: EstimateMethod,
}

/// Mean loss over the whole dataset plus the L2 term.
pub fn loss(spec: &ModelSpec, w: &ParamVector, data: &LabeledDataset) -> Result<f64> {
    spec.check(w, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(evaluate(spec, w, data, &idx, None))
}

/// Exact gradient of [`loss`] on the whole dataset.
pub fn gradient(spec: &ModelSpec, w: &ParamVector, data: &LabeledDataset) -> Result<ParamVector> {
    spec.check(w, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; w.len()];
    evaluate(spec, w, data, &idx, Some(&mut grad));
    Ok(ParamVector::new(grad))
}

/// Gradient of the mean loss over the rows `batch` of `data`.
pub fn gradient_on(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<ParamVector> {
    spec.check(w, data)?;
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::InvalidParameter(format!(
            "batch index {bad} outside dataset of {}",
            data.len()
        )));
    }
    let mut grad = vec![0.0; w.len()];
    evaluate(spec, w, data, batch, Some(&mut grad));
    Ok(ParamVector::new(grad))
}

/// Returns the mean loss over `batch`, accumulating the mean gradient into
/// `grad` when given.
fn evaluate(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &LabeledDataset,
    batch: &[usize],
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let w = w.as_slice();
    let (d, c) = (spec.dim, spec.class_count);
    let mut total = 0.0;
    let mut out = vec![0.0; c];
    let mut hidden = vec![0.0; spec.hidden_width];
    let mut back = vec![0.0; spec.hidden_width];
    for &i in batch {
        let x = data.row(i);
        let y = data.label(i);
        match spec.family {
            Family::Quadratic => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = dot(&w[k * d..(k + 1) * d], x);
                }
                let target = data.target_row(i);
                for (k, o) in out.iter_mut().enumerate() {
                    let t = match target {
                        Some(t) => t[k],
                        None => f64::from(u8::from(k == y)),
                    };
                    *o -= t;
                    total += 0.5 * *o * *o;
                }
                if let Some(g) = grad.as_deref_mut() {
                    for (k, &r) in out.iter().enumerate() {
                        axpy(&mut g[k * d..(k + 1) * d], r, x);
                    }
                }
            }
            Family::MultinomialLogistic => {
                let stride = d + 1;
                for (k, o) in out.iter_mut().enumerate() {
                    let row = &w[k * stride..(k + 1) * stride];
                    *o = dot(&row[..d], x) + row[d];
                }
                total += softmax_in_place(&mut out, y);
                if let Some(g) = grad.as_deref_mut() {
                    for (k, &r) in out.iter().enumerate() {
                        let row = &mut g[k * stride..(k + 1) * stride];
                        axpy(&mut row[..d], r, x);
                        row[d] += r;
                    }
                }
            }
            Family::Mlp1 => {
                let h = spec.hidden_width;
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for (j, a) in hidden.iter_mut().enumerate() {
                    *a = (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh();
                }
                for (k, o) in out.iter_mut().enumerate() {
                    *o = dot(&w2[k * h..(k + 1) * h], &hidden) + b2[k];
                }
                total += softmax_in_place(&mut out, y);
                if let Some(g) = grad.as_deref_mut() {
                    let (g1, rest) = g.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (g2, gb2) = rest.split_at_mut(c * h);
                    back.iter_mut().for_each(|v| *v = 0.0);
                    for (k, &r) in out.iter().enumerate() {
                        axpy(&mut g2[k * h..(k + 1) * h], r, &hidden);
                        gb2[k] += r;
                        axpy(&mut back, r, &w2[k * h..(k + 1) * h]);
                    }
                    for j in 0..h {
                        let local = back[j] * (1.0 - hidden[j] * hidden[j]);
                        axpy(&mut g1[j * d..(j + 1) * d], local, x);
                        gb1[j] += local;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut reg = 0.0;
    if let Some(g) = grad {
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi = *gi / n + spec.l2_reg * wi;
        }
    }
    if spec.l2_reg != 0.0 {
        reg = 0.5 * spec.l2_reg * w.iter().map(|v| v * v).sum::<f64>();
    }
    total / n + reg
}

/// Turns logits into `softmax − onehot(y)` and returns the cross-entropy.
fn softmax_in_place(logits: &mut [f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[y];
    for (k, z) in logits.iter_mut().enumerate() {
        *z = (*z - lse).exp() - f64::from(u8::from(k == y));
    }
    loss
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Class scores for one sample.
fn scores(spec: &ModelSpec, w: &[f64], x: &[f64], out: &mut [f64], hidden: &mut [f64]) {
    let (d, c, h) = (spec.dim, spec.class_count, spec.hidden_width);
    match spec.family {
        Family::Quadratic => {
            for (k, o) in out.iter_mut().enumerate() {
                *o = dot(&w[k * d..(k + 1) * d], x);
            }
        }
        Family::MultinomialLogistic => {
            for (k, o) in out.iter_mut().enumerate() {
                let row = &w[k * (d + 1)..(k + 1) * (d + 1)];
                *o = dot(&row[..d], x) + row[d];
            }
        }
        Family::Mlp1 => {
            let (w1, rest) = w.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            for (j, a) in hidden.iter_mut().enumerate() {
                *a = (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh();
            }
            for (k, o) in out.iter_mut().enumerate() {
                *o = dot(&w2[k * h..(k + 1) * h], hidden) + b2[k];
            }
        }
    }
}

/// Fraction of samples whose highest score (lowest index on ties) matches
/// the label.
pub fn accuracy(spec: &ModelSpec, w: &ParamVector, data: &LabeledDataset) -> Result<f64> {
    spec.check(w, data)?;
    let mut out = vec![0.0; spec.class_count];
    let mut hidden = vec![0.0; spec.hidden_width];
    let mut correct = 0usize;
    for i in 0..data.len() {
        scores(spec, w.as_slice(), data.row(i), &mut out, &mut hidden);
        let mut best = 0;
        for k in 1..out.len() {
            if out[k] > out[best] {
                best = k;
            }
        }
        correct += usize::from(best == data.label(i));
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Initial global model: zeros for the convex families, scaled Gaussian
/// weights (zero biases) for the MLP so hidden units are not symmetric.
pub fn initial_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut w = ParamVector::zeros(spec.param_len());
    if spec.family == Family::Mlp1 {
        let (d, c, h) = (spec.dim, spec.class_count, spec.hidden_width);
        let mut rng = SplitMix64::derive(seed, &[stream::MODEL_INIT]);
        let v = w.as_mut_slice();
        let s1 = 1.0 / (d as f64).sqrt();
        for x in &mut v[..h * d] {
            *x = s1 * rng.next_normal();
        }
        let s2 = 1.0 / (h as f64).sqrt();
        let start = h * d + h;
        for x in &mut v[start..start + c * h] {
            *x = s2 * rng.next_normal();
        }
    }
    w
}

/// Largest eigenvalue of a symmetric positive semi-definite `p × p` matrix.
///
/// Stops when successive Rayleigh quotients agree to
/// [`POWER_ITERATION_TOL`] relative; gives up with an error after
/// [`POWER_ITERATION_MAX`] iterations.
pub fn power_iteration(matrix: &[f64], p: usize, seed: u64) -> Result<f64> {
    assert_eq!(matrix.len(), p * p);
    let mut rng = SplitMix64::derive(seed, &[stream::POWER_ITERATION]);
    let mut x: Vec<f64> = (0..p).map(|_| 1.0 + 0.1 * rng.next_f64()).collect();
    let norm = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
    let mut y = vec![0.0; p];
    let mut previous = f64::NAN;
    for _ in 0..POWER_ITERATION_MAX {
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = dot(&matrix[r * p..(r + 1) * p], &x);
        }
        let rayleigh = dot(&x, &y);
        let norm = dot(&y, &y).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if (rayleigh - previous).abs() <= POWER_ITERATION_TOL * rayleigh.abs() {
            return Ok(rayleigh);
        }
        previous = rayleigh;
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
    }
    Err(Error::NotConverged {
        what: "power iteration",
        iterations: POWER_ITERATION_MAX,
    })
}

/// β from the data's second moment and ρ as the largest full-data gradient
/// norm over `probes` (the origin when `probes` is empty).
///
/// Quadratic: the Hessian is exactly `I ⊗ XᵀX/n + λI`. Logistic: the
/// softmax Hessian is bounded by `½ I`, so `β ≤ ½ λ_max(X̃ᵀX̃/n) + λ`.
pub fn estimate_constants(
    spec: &ModelSpec,
    data: &LabeledDataset,
    probes: &[ParamVector],
) -> Result<SmoothnessEstimate> {
    spec.require_convex()?;
    let (beta, method) = match spec.family {
        Family::Quadratic => {
            let m = second_moment(data.features(), data.dim(), false);
            (power_iteration(&m, data.dim(), 0)? + spec.l2_reg, EstimateMethod::Analytic)
        }
        Family::MultinomialLogistic => {
            let m = second_moment(data.features(), data.dim(), true);
            (
                0.5 * power_iteration(&m, data.dim() + 1, 0)? + spec.l2_reg,
                EstimateMethod::PowerIteration,
            )
        }
        Family::Mlp1 => unreachable!("rejected above"),
    };
    let origin = [ParamVector::zeros(spec.param_len())];
    let probes = if probes.is_empty() { &origin[..] } else { probes };
    let mut rho = 0.0f64;
    for w in probes {
        rho = rho.max(gradient(spec, w, data)?.norm());
    }
    Ok(SmoothnessEstimate { beta, rho, method })
}

/// Empirical smoothness: the largest `‖∇F(a) − ∇F(b)‖ / ‖a − b‖` over all
/// distinct probe pairs.
pub fn estimate_beta_trajectory(
    spec: &ModelSpec,
    data: &LabeledDataset,
    probes: &[ParamVector],
) -> Result<SmoothnessEstimate> {
    spec.require_convex()?;
    if probes.len() < 2 {
        return Err(Error::InvalidParameter(
            "trajectory estimate needs at least two probes".into(),
        ));
    }
    let grads = probes
        .iter()
        .map(|w| gradient(spec, w, data))
        .collect::<Result<Vec<_>>>()?;
    let mut beta = 0.0f64;
    for a in 0..probes.len() {
        for b in a + 1..probes.len() {
            let dist = probes[a].distance(&probes[b]);
            if dist > 0.0 {
                beta = beta.max(grads[a].distance(&grads[b]) / dist);
            }
        }
    }
    let rho = grads.iter().map(ParamVector::norm).fold(0.0, f64::max);
    Ok(SmoothnessEstimate {
        beta,
        rho,
        method: EstimateMethod::TrajectorySup,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub params: ParamVector,
    pub value: f64,
    /// Set when the quadratic normal equations were singular and the
    /// minimum-norm solution was returned.
    pub min_norm: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub gradient_tol: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-8,
            max_iterations: 1_000_000,
        }
    }
}

pub fn solve_optimum(spec: &ModelSpec, data: &LabeledDataset) -> Result<Optimum> {
    solve_optimum_with(spec, data, SolveOptions::default())
}

/// Minimizer of the full-data loss: regularized normal equations for the
/// quadratic model, gradient descent with step `1/β` for the logistic one.
pub fn solve_optimum_with(
    spec: &ModelSpec,
    data: &LabeledDataset,
    options: SolveOptions,
) -> Result<Optimum> {
    spec.require_convex()?;
    spec.check(&ParamVector::zeros(spec.param_len()), data)?;
    match spec.family {
        Family::Quadratic => solve_quadratic(spec, data),
        Family::MultinomialLogistic => {
            let beta = estimate_constants(spec, data, &[])?.beta;
            let step = 1.0 / beta;
            let mut w = ParamVector::zeros(spec.param_len());
            for it in 0..options.max_iterations {
                let g = gradient(spec, &w, data)?;
                if g.norm() <= options.gradient_tol {
                    return Ok(Optimum {
                        value: loss(spec, &w, data)?,
                        params: w,
                        min_norm: false,
                        iterations: it,
                    });
                }
                w.axpy(-step, &g);
            }
            Err(Error::NotConverged {
                what: "logistic gradient descent",
                iterations: options.max_iterations,
            })
        }
        Family::Mlp1 => unreachable!("rejected above"),
    }
}

fn solve_quadratic(spec: &ModelSpec, data: &LabeledDataset) -> Result<Optimum> {
    let (n, d, c) = (data.len(), spec.dim, spec.class_count);
    let moment = second_moment(data.features(), d, false);
    let mut a = DMatrix::from_row_slice(d, d, &moment);
    for k in 0..d {
        a[(k, k)] += spec.l2_reg;
    }
    let mut b = DMatrix::<f64>::zeros(d, c);
    for i in 0..n {
        let x = data.row(i);
        for k in 0..c {
            let t = match data.target_row(i) {
                Some(t) => t[k],
                None => f64::from(u8::from(k == data.label(i))),
            };
            if t != 0.0 {
                for j in 0..d {
                    b[(j, k)] += x[j] * t;
                }
            }
        }
    }
    b /= n as f64;

    let svd = SVD::new(a.clone(), true, true);
    let sigma_max = svd.singular_values.max();
    let eps = sigma_max * 1e-12 * d as f64;
    let min_norm = svd.singular_values.iter().any(|&s| s <= eps);
    let mut sol = svd
        .solve(&b, eps)
        .map_err(|e| Error::Invariant(format!("normal equations: {e}")))?;
    // One step of iterative refinement.
    let residual = &b - &a * &sol;
    sol += svd
        .solve(&residual, eps)
        .map_err(|e| Error::Invariant(format!("normal equations: {e}")))?;

    let mut w = vec![0.0; c * d];
    for k in 0..c {
        for j in 0..d {
            w[k * d + j] = sol[(j, k)];
        }
    }
    let params = ParamVector::new(w);
    Ok(Optimum {
        value: loss(spec, &params, data)?,
        params,
        min_norm,
        iterations: 0,
    })
}

/// `F(w) = Σ_m α_m f_m(w)` over vehicle shards, with `α_m = |D_m| / |D|`.
#[derive(Debug, Clone)]
pub struct FederatedObjective<'a> {
    spec: &'a ModelSpec,
    shards: &'a [Shard],
    weights: Vec<f64>,
}

impl<'a> FederatedObjective<'a> {
    pub fn new(spec: &'a ModelSpec, shards: &'a [Shard]) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::InvalidParameter("no shards".into()));
        }
        let total: usize = shards.iter().map(Shard::size).sum();
        let weights = shards
            .iter()
            .map(|s| s.size() as f64 / total as f64)
            .collect();
        Ok(Self {
            spec,
            shards,
            weights,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn shards(&self) -> &[Shard] {
        self.shards
    }

    /// `α_m` in vehicle order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn value(&self, w: &ParamVector) -> Result<f64> {
        let parts = self
            .shards
            .par_iter()
            .map(|s| loss(self.spec, w, &s.data))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.iter().zip(&self.weights).map(|(f, a)| a * f).sum())
    }

    /// `∇f_m(w)` for every vehicle.
    pub fn shard_gradients(&self, w: &ParamVector) -> Result<Vec<ParamVector>> {
        self.shards
            .par_iter()
            .map(|s| gradient(self.spec, w, &s.data))
            .collect()
    }

    pub fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        let grads = self.shard_gradients(w)?;
        Ok(ParamVector::weighted_sum(self.weights.iter().copied().zip(&grads))
            .expect("at least one shard"))
    }
}
