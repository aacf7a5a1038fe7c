//! Stability-based generalization score for comparing initializations.
//!
//! For an initialization `w` and `m` target samples:
//!
//! * `R` = mean combined loss at `w` (no training),
//! * `H` = mean over samples of the Hessian spectral norm of the per-sample loss,
//! * `g = H + sqrt(R)`, `g+ = g + m^(-1/4)`, `g- = g - m^(-1/4)`,
//! * score = `(1 + 1/(c g-)) * R^(c g+ / (1 + c g+)) * sqrt(ln K) / m^(1 / (1 + c g+))`.
//!
//! The score drops the unknown constant of the underlying bound, so it is only
//! meaningful for ranking candidates evaluated on the same data. It assumes,
//! without checking, a Lipschitz Hessian, a smooth loss, SGD step sizes `c/t`
//! small enough for the total number of steps, and uniform sample selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig};
use crate::nnet::{ParamSet, Segmenter};
use crate::training::TrainItem;

/// Value substituted for a non-positive `g-`.
pub const GAMMA_MINUS_FLOOR: f64 = 1e-6;

pub const ASSUMPTIONS: [&str; 4] = [
    "loss Hessian is Lipschitz in the weights (constant not estimated)",
    "loss is smooth and c <= min(1/beta, 1/(4(2 beta ln T)^2)) for T SGD steps (not checked)",
    "SGD visits samples uniformly at random",
    "hidden constant of the bound is dropped; scores rank candidates only",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Step scale of the `c/t` SGD schedule.
    pub c: f64,
    /// Number of candidate initializations.
    pub k: usize,
    pub power_iters: usize,
    /// Relative change between successive estimates that ends power iteration.
    pub power_tol: f64,
    /// Relative finite-difference step for Hessian-vector products.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            c: 0.01,
            k: 4,
            power_iters: 20,
            power_tol: 1e-3,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::Range(format!("c must be > 0, got {}", self.c)));
        }
        if self.k < 1 {
            return Err(Error::Range("K must be >= 1".into()));
        }
        if self.power_iters < 1 || !(self.fd_step > 0.0) || !(self.power_tol >= 0.0) {
            return Err(Error::Range(format!("invalid power-iteration settings {self:?}")));
        }
        Ok(())
    }
}

/// Order-independent sum: sorts, then Kahan-sums.
fn stable_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0, 0.0);
    for x in v {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean combined loss of `params` over `items`.
pub fn empirical_risk(net: &Segmenter, params: &ParamSet, items: &[TrainItem], loss: &LossConfig) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Data("empirical risk of an empty dataset".into()));
    }
    let mut values = Vec::with_capacity(items.len());
    for it in items {
        values.push(combined_loss(&net.forward(params, &it.image)?, &it.target, loss)?.value);
    }
    Ok(stable_sum(&values) / items.len() as f64)
}

/// Gradient of one sample's combined loss at flat weights `w`.
pub fn sample_gradient(
    net: &Segmenter,
    template: &ParamSet,
    item: &TrainItem,
    loss: &LossConfig,
    w: &[f64],
) -> Result<Vec<f64>> {
    let mut p = template.clone();
    p.set_flat_values(w)?;
    p.zero_grad();
    let trace = net.forward_trace(&p, &item.image)?;
    let l = combined_loss(trace.output(), &item.target, loss)?;
    net.backward(&mut p, &trace, &l.grad)?;
    Ok(p.flat_grads())
}

/// Hessian-vector product by central differences of gradients:
/// `(grad(w + h v) - grad(w - h v)) / 2h` with `h = fd_step (1 + |w|) / |v|`.
pub fn hessian_vec(
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    w: &[f64],
    v: &[f64],
    fd_step: f64,
) -> Result<Vec<f64>> {
    if w.len() != v.len() {
        return Err(Error::Dimension(format!("{} weights, {} direction entries", w.len(), v.len())));
    }
    let vn = norm(v);
    if !(vn > 0.0) {
        return Err(Error::Range("Hessian-vector product needs a nonzero direction".into()));
    }
    let h = fd_step * (1.0 + norm(w)) / vn;
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Largest eigenvalue magnitude of a symmetric operator by power iteration.
///
/// Each step normalizes `v` and estimates `|lambda|` as `|A v|`, which is the
/// square root of the Rayleigh quotient of `A^2`; this converges for
/// indefinite operators whose extreme eigenvalues have opposite signs. Stops
/// when successive estimates differ by less than `tol` relative, or after
/// `iters` applications.
pub fn spectral_norm(
    mut matvec: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<f64> {
    if dim == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut estimate = f64::NAN;
    for _ in 0..iters.max(1) {
        let av = matvec(&v)?;
        if av.len() != dim {
            return Err(Error::Dimension(format!("operator returned {} entries, expected {dim}", av.len())));
        }
        let next = norm(&av);
        if !next.is_finite() {
            return Err(Error::Numerics(format!("power iteration produced {next}")));
        }
        if next == 0.0 {
            return Ok(0.0);
        }
        let converged = (next - estimate).abs() <= tol * next;
        estimate = next;
        if converged {
            break;
        }
        v = av.into_iter().map(|x| x / next).collect();
    }
    Ok(estimate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub empirical_risk: f64,
    pub mean_hessian_norm: f64,
    pub gamma_hat: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    /// `gamma_minus` was non-positive and replaced by [`GAMMA_MINUS_FLOOR`].
    pub clamped: bool,
}

impl GammaStats {
    /// Combines per-sample Hessian norms and the empirical risk over `m` samples.
    pub fn from_parts(hessian_norms: &[f64], empirical_risk: f64) -> Result<Self> {
        if hessian_norms.is_empty() {
            return Err(Error::Data("no samples".into()));
        }
        let m = hessian_norms.len() as f64;
        let mean_hessian_norm = stable_sum(hessian_norms) / m;
        let gamma_hat = mean_hessian_norm + empirical_risk.max(0.0).sqrt();
        let spread = m.powf(-0.25);
        let raw_minus = gamma_hat - spread;
        let clamped = raw_minus <= 0.0;
        Ok(Self {
            empirical_risk,
            mean_hessian_norm,
            gamma_hat,
            gamma_plus: gamma_hat + spread,
            gamma_minus: if clamped { GAMMA_MINUS_FLOOR } else { raw_minus },
            clamped,
        })
    }
}

/// Per-sample Hessian norms, empirical risk and the derived statistics.
pub fn gamma_hat(
    net: &Segmenter,
    params: &ParamSet,
    items: &[TrainItem],
    loss: &LossConfig,
    inputs: &BoundInputs,
) -> Result<GammaStats> {
    inputs.validate()?;
    let risk = empirical_risk(net, params, items, loss)?;
    let w = params.flat_values();
    let mut norms = Vec::with_capacity(items.len());
    for it in items {
        // same start vector for every sample keeps the result order-independent
        let op = |v: &[f64]| hessian_vec(|x| sample_gradient(net, params, it, loss, x), &w, v, inputs.fd_step);
        norms.push(spectral_norm(op, w.len(), inputs.power_iters, inputs.power_tol, inputs.seed)?);
    }
    GammaStats::from_parts(&norms, risk)
}

/// The bracketed bound expression; `ln` is natural. `K < 2` makes the
/// `sqrt(ln K)` factor zero.
pub fn bound_score(gamma_plus: f64, gamma_minus: f64, risk: f64, m: usize, k: usize, c: f64) -> Result<f64> {
    if !(gamma_minus > 0.0) {
        return Err(Error::Range(format!("gamma_minus must be > 0, got {gamma_minus}")));
    }
    if !(risk >= 0.0) || m == 0 {
        return Err(Error::Range(format!("need risk >= 0 and m >= 1, got {risk}, {m}")));
    }
    let cg = c * gamma_plus;
    let exponent = cg / (1.0 + cg);
    let risk_term = if risk == 0.0 { 0.0 } else { risk.powf(exponent) };
    let log_k = (k as f64).ln().max(0.0);
    Ok((1.0 + 1.0 / (c * gamma_minus)) * risk_term * log_k.sqrt() / (m as f64).powf(1.0 / (1.0 + cg)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub candidate: String,
    pub empirical_risk: f64,
    pub mean_hessian_norm: f64,
    pub gamma_hat: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub clamped: bool,
    pub bound_score: f64,
    pub m: usize,
    pub c: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub entries: Vec<BoundEntry>,
    pub argmin: String,
    pub assumptions: Vec<String>,
    pub warnings: Vec<String>,
}

impl BoundReport {
    pub fn entry(&self, candidate: &str) -> Option<&BoundEntry> {
        self.entries.iter().find(|e| e.candidate == candidate)
    }
}

/// Scores every candidate on the same samples; the lowest score wins, ties
/// going to the lexicographically smaller name.
pub fn compare_inits(
    net: &Segmenter,
    candidates: &[(String, ParamSet)],
    items: &[TrainItem],
    loss: &LossConfig,
    inputs: &BoundInputs,
) -> Result<BoundReport> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidate initializations".into()));
    }
    let mut warnings = Vec::new();
    if inputs.k < 2 {
        warnings.push(format!("K = {} gives ln K <= 0; scores are reported as 0", inputs.k));
    }
    let mut entries = Vec::with_capacity(candidates.len());
    for (name, params) in candidates {
        let g = gamma_hat(net, params, items, loss, inputs)?;
        if g.clamped {
            warnings.push(format!("{name}: gamma_minus clamped to {GAMMA_MINUS_FLOOR} (m = {})", items.len()));
        }
        entries.push(BoundEntry {
            candidate: name.clone(),
            empirical_risk: g.empirical_risk,
            mean_hessian_norm: g.mean_hessian_norm,
            gamma_hat: g.gamma_hat,
            gamma_plus: g.gamma_plus,
            gamma_minus: g.gamma_minus,
            clamped: g.clamped,
            bound_score: bound_score(g.gamma_plus, g.gamma_minus, g.empirical_risk, items.len(), inputs.k, inputs.c)?,
            m: items.len(),
            c: inputs.c,
            k: inputs.k,
            seed: inputs.seed,
        });
    }
    let argmin = entries
        .iter()
        .min_by(|a, b| a.bound_score.total_cmp(&b.bound_score).then_with(|| a.candidate.cmp(&b.candidate)))
        .map(|e| e.candidate.clone())
        .expect("at least one candidate");
    Ok(BoundReport {
        entries,
        argmin,
        assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        warnings,
    })
}
