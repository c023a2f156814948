//! Numeric checks of the drift-propagation bounds, evaluated with constants
//! measured from the data they are applied to.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::{confidence_select, random_prompt, DecodePolicy, DecodeState};
use crate::error::{Error, Result};
use crate::linalg::{
    cosine_sim, cosine_sim_f64, dot_f64, norm, norm_f64, singular_values, svd_f64, topk_lowest,
    Matrix,
};
use crate::model::{
    ffn_apply, init_weights, ForwardOutput, LayerWeights, ModelConfig, ModelWeights,
};
use crate::proxy::{identifier_vectors, random_identifiers, IdentifierKind, SingularProxy};

/// Absolute slack granted to `f64` evaluation of an inequality, scaled by
/// `max(1, |bound|)`.
pub const ROUNDING_ALLOWANCE: f64 = 1e-12;

/// SiLU derivative bound (`sup |σ'| ≈ 1.0998`).
pub const SILU_LIPSCHITZ: f64 = 1.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// `bound − quantity` minimized over trials; `None` before any trial.
    pub max_slack: Option<f64>,
    pub constants: BTreeMap<String, f64>,
}

impl BoundReport {
    pub fn new(name: impl Into<String>) -> Self {
        BoundReport {
            name: name.into(),
            trials: 0,
            violations: 0,
            max_slack: None,
            constants: BTreeMap::new(),
        }
    }

    /// Records one evaluation of `quantity ≤ bound` with the rounding allowance.
    pub fn record(&mut self, quantity: f64, bound: f64) {
        self.record_with(quantity, bound, ROUNDING_ALLOWANCE * bound.abs().max(1.0));
    }

    /// Records `quantity ≤ bound` with no allowance.
    pub fn record_exact(&mut self, quantity: f64, bound: f64) {
        self.record_with(quantity, bound, 0.0);
    }

    fn record_with(&mut self, quantity: f64, bound: f64, allowance: f64) {
        let slack = bound + allowance - quantity;
        self.trials += 1;
        if slack.is_nan() || slack < 0.0 {
            self.violations += 1;
        }
        self.max_slack = Some(match self.max_slack {
            Some(s) if s <= slack => s,
            _ => slack,
        });
    }

    pub fn constant(&mut self, name: &str, value: f64) {
        self.constants.insert(name.to_string(), value);
    }

    /// Keeps the larger of the stored and the new value.
    fn constant_max(&mut self, name: &str, value: f64) {
        let e = self.constants.entry(name.to_string()).or_insert(value);
        *e = e.max(value);
    }

    fn constant_min(&mut self, name: &str, value: f64) {
        let e = self.constants.entry(name.to_string()).or_insert(value);
        *e = e.min(value);
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn merge(&mut self, other: &BoundReport) {
        self.trials += other.trials;
        self.violations += other.violations;
        if let Some(s) = other.max_slack {
            self.max_slack = Some(self.max_slack.map_or(s, |m| m.min(s)));
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Attention-output drift bound for one layer between two consecutive dense
/// steps. Each head is checked separately on its own value slice, with
/// `h_i = Σ_j α_ij v_j` recomputed in `f64` from the stored weights.
pub fn check_thm_attention_bound(
    prev: &crate::model::LayerActivations,
    next: &crate::model::LayerActivations,
) -> Result<BoundReport> {
    let heads = prev.attn_weights.len();
    if heads == 0 || next.attn_weights.len() != heads {
        return Err(Error::State(
            "attention weights missing from activations".into(),
        ));
    }
    let n = prev.v.rows();
    if next.v.rows() != n || prev.v.cols() != next.v.cols() {
        return Err(Error::Shape("activations of different shapes".into()));
    }
    let hd = prev.v.cols() / heads;
    let mut report = BoundReport::new("attention");
    for head in 0..heads {
        let span = head * hd..(head + 1) * hd;
        let v0: Vec<Vec<f64>> = (0..n)
            .map(|j| to_f64(&prev.v.row(j)[span.clone()]))
            .collect();
        let v1: Vec<Vec<f64>> = (0..n)
            .map(|j| to_f64(&next.v.row(j)[span.clone()]))
            .collect();
        let (a0, a1) = (&prev.attn_weights[head], &next.attn_weights[head]);
        let mix = |a: &Matrix, v: &[Vec<f64>], i: usize| {
            let mut h = vec![0.0f64; hd];
            for (j, vj) in v.iter().enumerate() {
                let w = a.get(i, j) as f64;
                h.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
            }
            h
        };
        let h0: Vec<Vec<f64>> = (0..n).map(|i| mix(a0, &v0, i)).collect();
        let h1: Vec<Vec<f64>> = (0..n).map(|i| mix(a1, &v1, i)).collect();

        let delta_a = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (a1.get(i, j) as f64 - a0.get(i, j) as f64).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        let vnorms: Vec<f64> = v0.iter().chain(&v1).map(|v| norm_f64(v)).collect();
        let hnorms: Vec<f64> = h0.iter().chain(&h1).map(|h| norm_f64(h)).collect();
        let v_max = vnorms.iter().copied().fold(0.0, f64::max);
        let v_min = vnorms.iter().copied().fold(f64::INFINITY, f64::min);
        let h_max = hnorms.iter().copied().fold(0.0, f64::max);
        let h_min = hnorms.iter().copied().fold(f64::INFINITY, f64::min);
        if h_min < 1e-9 {
            return Err(Error::Degenerate(format!(
                "attention output norm {h_min:e} too small for the bound"
            )));
        }
        let delta_v = v_max - v_min;
        let drift: Vec<f64> = (0..n).map(|j| norm_f64(&sub(&v1[j], &v0[j]))).collect();
        let mut lambda = 1.0f64;
        for i in 0..n {
            if drift[i] <= 1e-6 * v_max {
                continue;
            }
            let weighted: f64 = (0..n).map(|j| a1.get(i, j) as f64 * drift[j]).sum();
            lambda = lambda.max(weighted / drift[i]);
        }
        let c = (lambda * v_max / h_min).powi(2);
        let y = lambda * delta_v + delta_a * v_max;
        let mut eps_max = 0.0f64;
        for i in 0..n {
            let s_h = cosine_sim_f64(&h0[i], &h1[i])?;
            let s_v = cosine_sim_f64(&v0[i], &v1[i])?;
            let x = lambda * v_max * (2.0 * (1.0 - s_v)).sqrt();
            let eps = (2.0 * x * y + y * y) / (2.0 * h_min * h_min);
            eps_max = eps_max.max(eps);
            report.record(1.0 - s_h, c * (1.0 - s_v) + eps);
        }
        report.constant_max("C", c);
        report.constant_max("epsilon", eps_max);
        report.constant_max("lambda", lambda);
        report.constant_max("delta_A", delta_a);
        report.constant_min("V_min", v_min);
        report.constant_max("V_max", v_max);
        report.constant_min("H_min", h_min);
        report.constant_max("H_max", h_max);
        report.constant_max("Delta_V", delta_v);
    }
    Ok(report)
}

/// Lipschitz bound of `x ↦ ffn(x)` (norm included, residual excluded) over
/// inputs with `‖x‖ ≥ 0.1 √d`.
///
/// `‖W_down‖ · (1.1 ‖W_gate‖ B + S ‖W_up‖) · R` where `R` bounds the RMSNorm
/// Jacobian on the domain, and `B`, `S` bound `|up|` and `|silu(gate)|` using
/// `‖rms(x)‖ ≤ √d max|g|`.
pub fn lipschitz_bound(layer: &LayerWeights, eps: f32) -> f64 {
    let d = layer.ffn_norm.len() as f64;
    let g_max = layer
        .ffn_norm
        .iter()
        .fold(0.0f64, |m, &g| m.max((g as f64).abs()));
    let n_min = 0.1 * d.sqrt();
    let c = d * eps as f64;
    let rms_factor = d.sqrt() * g_max / (n_min * n_min + c).sqrt();
    let n_bound = d.sqrt() * g_max;
    let max_col = |w: &Matrix| {
        (0..w.cols())
            .map(|k| {
                (0..w.rows())
                    .map(|i| (w.get(i, k) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    };
    let top = |w: &Matrix| singular_values(w).first().copied().unwrap_or(0.0);
    let up_sup = n_bound * max_col(&layer.w_up);
    let gate_sup = n_bound * max_col(&layer.w_gate);
    top(&layer.w_down)
        * (SILU_LIPSCHITZ * top(&layer.w_gate) * up_sup + gate_sup * top(&layer.w_up))
        * rms_factor
}

/// Lipschitz constant of a chain of maps with the given constants.
pub fn composed_lipschitz(factors: &[f64]) -> f64 {
    factors.iter().product()
}

/// Random FFN input pairs with norms in `[0.5 √d, 1.5 √d]` and angles below
/// `atan(1.5)`.
pub fn ffn_sample_pairs(d: usize, pairs: usize, seed: u64) -> Vec<(Vec<f32>, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (d as f64).sqrt();
    let unit = |rng: &mut ChaCha8Rng| {
        let v = gaussian_vec(rng, d);
        let n = norm_f64(&v);
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    (0..pairs)
        .map(|_| {
            let u = unit(&mut rng);
            let w = unit(&mut rng);
            let t: f64 = match rng.random_range(0..3) {
                0 => 0.0,
                1 => rng.random_range(0.0..0.05),
                _ => rng.random_range(0.0..1.5),
            };
            let dir2: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + t * b).collect();
            let n2 = norm_f64(&dir2);
            let r1 = rng.random_range(0.5..1.5) * sd;
            let r2 = if rng.random_bool(0.3) {
                r1
            } else {
                rng.random_range(0.5..1.5) * sd
            };
            let h1 = u.iter().map(|x| (x * r1) as f32).collect();
            let h2 = dir2.iter().map(|x| (x / n2 * r2) as f32).collect();
            (h1, h2)
        })
        .collect()
}

/// FFN output divergence bound `L̂ √2 H_max √(1−S) + L̂ (H_max − H_min)`.
pub fn check_thm_ffn_bound(
    layer: &LayerWeights,
    eps: f32,
    samples: &[(Vec<f32>, Vec<f32>)],
) -> Result<BoundReport> {
    let mut report = BoundReport::new("ffn");
    if samples.is_empty() {
        return Ok(report);
    }
    let d = layer.ffn_norm.len();
    let l_hat = lipschitz_bound(layer, eps);
    let norms: Vec<f64> = samples
        .iter()
        .flat_map(|(a, b)| [norm(a), norm(b)])
        .collect();
    let h_max = norms.iter().copied().fold(0.0, f64::max);
    let h_min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let n_min = 0.1 * (d as f64).sqrt();
    if h_min < n_min {
        return Err(Error::Argument(format!(
            "sample norm {h_min} below the domain floor {n_min}"
        )));
    }
    let x1 = Matrix::from_rows(&samples.iter().map(|p| p.0.clone()).collect::<Vec<_>>())?;
    let x2 = Matrix::from_rows(&samples.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?;
    let f1 = ffn_apply(&x1, layer, eps);
    let f2 = ffn_apply(&x2, layer, eps);
    for (i, (a, b)) in samples.iter().enumerate() {
        let s = cosine_sim(a, b)?;
        let lhs = norm_f64(&sub(&to_f64(f1.row(i)), &to_f64(f2.row(i))));
        let rhs = l_hat * 2f64.sqrt() * h_max * (1.0 - s).max(0.0).sqrt() + l_hat * (h_max - h_min);
        report.record(lhs, rhs);
    }
    report.constant("L_hat", l_hat);
    report.constant("H_min", h_min);
    report.constant("H_max", h_max);
    report.constant("Delta", h_max - h_min);
    report.constant("C", l_hat * 2f64.sqrt() * h_max);
    report.constant("epsilon", l_hat * (h_max - h_min));
    Ok(report)
}

/// Reports for the in-span truncation bound and the general-input lemma.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdBoundReports {
    pub theorem: BoundReport,
    pub lemma: BoundReport,
}

fn matvec(w: &[f64], d: usize, h: &[f64]) -> Vec<f64> {
    (0..d).map(|i| dot_f64(&w[i * d..(i + 1) * d], h)).collect()
}

struct Truncation {
    d: usize,
    r: usize,
    w: Vec<f64>,
    s: Vec<f64>,
    v: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl Truncation {
    fn new(w: &Matrix, r: usize) -> Result<Self> {
        let d = w.rows();
        if !w.is_square() {
            return Err(Error::Shape(format!(
                "expected a square matrix, got {:?}",
                w.shape()
            )));
        }
        if r == 0 || r >= d {
            return Err(Error::Argument(format!("rank {r} outside [1, {})", d)));
        }
        let f = svd_f64(w)?;
        if f.s[r - 1] < 1e-9 {
            return Err(Error::Degenerate(format!(
                "λ_{r} = {:e} below 1e-9",
                f.s[r - 1]
            )));
        }
        Ok(Truncation {
            d,
            r,
            w: w.to_f64(),
            s: f.s,
            v: f.v,
            u: f.u,
        })
    }

    fn ratio(&self) -> f64 {
        self.s[self.r] / self.s[self.r - 1]
    }

    fn full(&self, h: &[f64]) -> Vec<f64> {
        matvec(&self.w, self.d, h)
    }

    /// `V_rᵀ h`.
    fn coords(&self, h: &[f64]) -> Vec<f64> {
        self.v[..self.r].iter().map(|v| dot_f64(v, h)).collect()
    }

    /// `Λ_r V_rᵀ h`.
    fn reduced(&self, h: &[f64]) -> Vec<f64> {
        self.coords(h)
            .iter()
            .zip(&self.s)
            .map(|(c, s)| c * s)
            .collect()
    }

    /// `U_r Λ_r V_rᵀ h`.
    fn lifted(&self, h: &[f64]) -> Vec<f64> {
        let red = self.reduced(h);
        let mut out = vec![0.0; self.d];
        for (k, c) in red.iter().enumerate() {
            out.iter_mut()
                .zip(&self.u[k])
                .for_each(|(o, u)| *o += c * u);
        }
        out
    }

    fn in_span(&self, z: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.d];
        for (k, c) in z.iter().enumerate() {
            h.iter_mut().zip(&self.v[k]).for_each(|(o, v)| *o += c * v);
        }
        h
    }

    /// `|S(W h1, W h2) − S(W_r h1, W_r h2)|`, `None` when a projection vanishes.
    fn divergence(&self, h1: &[f64], h2: &[f64]) -> Option<f64> {
        let full = cosine_sim_f64(&self.full(h1), &self.full(h2)).ok()?;
        let red = cosine_sim_f64(&self.reduced(h1), &self.reduced(h2)).ok()?;
        Some((full - red).abs())
    }

    /// Right-hand side of the general-input lemma, `None` when `‖V_rᵀ h‖` is tiny.
    fn lemma_bound(&self, h1: &[f64], h2: &[f64]) -> Option<f64> {
        let q = |h: &[f64]| {
            let c = norm_f64(&self.coords(h));
            (c > 1e-9).then(|| norm_f64(h) / c)
        };
        let (q1, q2) = (q(h1)?, q(h2)?);
        Some(0.5 * self.ratio().powi(2) * (q1 + q2).powi(2))
    }
}

/// Similarity preservation of the rank-`r` truncation of `w` (column
/// convention) on `trials` random pairs inside `span(V_r)`, plus the
/// general-input lemma on as many unconstrained pairs.
pub fn check_thm_svd_bound(
    w: &Matrix,
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<SvdBoundReports> {
    let t = Truncation::new(w, r)?;
    let coefficient = 2.0 * t.ratio().powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theorem = BoundReport::new(format!("svd_r{r}"));
    let mut lemma = BoundReport::new(format!("svd_lemma_r{r}"));
    for _ in 0..trials {
        let h1 = t.in_span(&gaussian_vec(&mut rng, r));
        let h2 = t.in_span(&gaussian_vec(&mut rng, r));
        if let Some(div) = t.divergence(&h1, &h2) {
            theorem.record(div, coefficient);
        }
        let g1 = gaussian_vec(&mut rng, t.d);
        let g2 = gaussian_vec(&mut rng, t.d);
        if let (Some(div), Some(b)) = (t.divergence(&g1, &g2), t.lemma_bound(&g1, &g2)) {
            lemma.record(div, b);
        }
    }
    for rep in [&mut theorem, &mut lemma] {
        rep.constant("lambda_r", t.s[r - 1]);
        rep.constant("lambda_r1", t.s[r]);
        rep.constant("coefficient", coefficient);
    }
    Ok(SvdBoundReports { theorem, lemma })
}

/// `1/√(1+x) ≥ 1 − x/2` on a fixed grid over `[0, 1e4]` plus random points,
/// evaluated without allowance.
pub fn check_bernoulli(random_points: usize, seed: u64) -> BoundReport {
    let mut rep = BoundReport::new("bernoulli");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = (0..=10_000)
        .map(|k| k as f64 * 1e-3)
        .chain((0..=70).map(|e| 10f64.powf(-3.0 + e as f64 * 0.1)));
    let random = (0..random_points).map(|_| rng.random_range(0.0..=1e4));
    for x in grid.chain(random.collect::<Vec<_>>()) {
        rep.record_exact(1.0 - x / 2.0, 1.0 / (1.0 + x).sqrt());
    }
    rep
}

/// Projection-norm inequality and the general-input lemma over random
/// `(W, h, r)` triples with `d ∈ [2, 24]` and varied spectral decay.
pub fn check_projection_props(triples: usize, seed: u64) -> Result<(BoundReport, BoundReport)> {
    let mut proj = BoundReport::new("projection_norm");
    let mut lemma = BoundReport::new("lemma_general");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..triples {
        let d = rng.random_range(2..=24usize);
        let r = rng.random_range(1..d);
        let decay: f64 = rng.random_range(0.5..1.0);
        let w = Matrix::from_fn(d, d, |_, j| {
            (<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                * decay.powi(j as i32)) as f32
        });
        let t = match Truncation::new(&w, r) {
            Ok(t) => t,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let sample_h = |rng: &mut ChaCha8Rng| {
            let g = gaussian_vec(rng, d);
            if rng.random_bool(0.3) {
                let z = gaussian_vec(rng, r);
                let s = t.in_span(&z);
                let eta: f64 = rng.random_range(0.0..0.2);
                s.iter().zip(&g).map(|(a, b)| a + eta * b).collect()
            } else {
                g
            }
        };
        let h1 = sample_h(&mut rng);
        let h2 = sample_h(&mut rng);
        for h in [&h1, &h2] {
            let coords = norm_f64(&t.coords(h));
            let red = norm_f64(&t.reduced(h));
            if coords <= 1e-9 || red <= 1e-9 {
                continue;
            }
            let lhs = norm_f64(&sub(&t.full(h), &t.lifted(h))) / red;
            let rhs = t.ratio() * norm_f64(h) / coords;
            proj.record(lhs, rhs);
        }
        if let (Some(div), Some(b)) = (t.divergence(&h1, &h2), t.lemma_bound(&h1, &h2)) {
            lemma.record(div, b);
        }
    }
    Ok((proj, lemma))
}

/// Inputs and outcome of the common-direction aggregation demo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyReport {
    pub mean_pairwise_cos_values: f64,
    pub mean_pairwise_cos_outputs: f64,
    pub common_norm: f64,
    pub mean_signal_norm: f64,
    /// Minimum attention-row entropy (nats).
    pub min_row_entropy: f64,
    /// Whether the preconditions for the comparison hold.
    pub applicable: bool,
    /// `outputs > values`, when applicable.
    pub holds: Option<bool>,
}

/// Row entropy floor (nats) below which aggregation counts as degenerate.
pub const ENTROPY_FLOOR: f64 = std::f64::consts::LN_2;

fn mean_pairwise_cos(rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine_sim_f64(&rows[i], &rows[j])?;
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Uniform `n x n` attention rows.
pub fn uniform_attention(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |_, _| 1.0 / n as f32)
}

/// Values `v_i = c + s_i` with `‖c‖ = common_scale` and Gaussian `s_i` of
/// expected norm `signal_norm`, aggregated as `h_i = Σ_j α_ij v_j`.
pub fn anisotropy_demo(
    d: usize,
    common_scale: f64,
    signal_norm: f64,
    attn_rows: &Matrix,
    seed: u64,
) -> Result<AnisotropyReport> {
    let n = attn_rows.rows();
    if attn_rows.cols() != n || n == 0 || d == 0 {
        return Err(Error::Shape(
            "attention rows must be a non-empty square matrix".into(),
        ));
    }
    if common_scale < 0.0 || signal_norm < 0.0 {
        return Err(Error::Argument("norms must be non-negative".into()));
    }
    for i in 0..n {
        let row = attn_rows.row(i);
        let s: f64 = row.iter().map(|&a| a as f64).sum();
        if row.iter().any(|&a| a < 0.0) || (s - 1.0).abs() > 1e-5 {
            return Err(Error::Argument(format!(
                "attention row {i} is not stochastic"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = gaussian_vec(&mut rng, d);
    let dn = norm_f64(&dir);
    let c: Vec<f64> = dir.iter().map(|x| x / dn * common_scale).collect();
    let sd = signal_norm / (d as f64).sqrt();
    let signals: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            gaussian_vec(&mut rng, d)
                .into_iter()
                .map(|x| x * sd)
                .collect()
        })
        .collect();
    let values: Vec<Vec<f64>> = signals
        .iter()
        .map(|s| s.iter().zip(&c).map(|(a, b)| a + b).collect())
        .collect();
    let outputs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut h = vec![0.0; d];
            for (j, v) in values.iter().enumerate() {
                let a = attn_rows.get(i, j) as f64;
                h.iter_mut().zip(v).for_each(|(o, x)| *o += a * x);
            }
            h
        })
        .collect();
    let min_row_entropy = (0..n)
        .map(|i| {
            -attn_rows
                .row(i)
                .iter()
                .filter(|&&a| a > 0.0)
                .map(|&a| a as f64 * (a as f64).ln())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    let cos_v = mean_pairwise_cos(&values)?;
    let cos_h = mean_pairwise_cos(&outputs)?;
    let applicable = common_scale > 0.0 && min_row_entropy > ENTROPY_FLOOR;
    Ok(AnisotropyReport {
        mean_pairwise_cos_values: cos_v,
        mean_pairwise_cos_outputs: cos_h,
        common_norm: norm_f64(&c),
        mean_signal_norm: signals.iter().map(|s| norm_f64(s)).sum::<f64>() / n as f64,
        min_row_entropy,
        applicable,
        holds: applicable.then_some(cos_h > cos_v),
    })
}

/// Runs a dense greedy decode and hands each consecutive pair of forward
/// passes to `f(step, prev, next)`; at most `max_steps` passes are made.
pub fn for_each_dense_step(
    model: &ModelWeights,
    prompt: &[usize],
    gen_len: usize,
    policy: &DecodePolicy,
    max_steps: usize,
    mut f: impl FnMut(usize, &ForwardOutput, &ForwardOutput) -> Result<()>,
) -> Result<usize> {
    let mut state = DecodeState::new(prompt, gen_len, model.config())?;
    let mut prev: Option<ForwardOutput> = None;
    let mut passes = 0;
    while passes < max_steps {
        let out = model.forward_full(state.tokens())?;
        passes += 1;
        if let Some(p) = &prev {
            f(passes - 1, p, &out)?;
        }
        if state.is_done() {
            break;
        }
        let picks = confidence_select(&out.logits, &state, policy, passes as u64);
        state.commit(&picks)?;
        prev = Some(out);
    }
    Ok(passes)
}

/// Mean recall@k of one identifier kind against the output-drift oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub identifier: String,
    pub recall: f64,
    pub samples: usize,
}

/// Top-`k` rows by drift norm `‖b_i − a_i‖`, ties to the lower index.
fn top_drift(a: &Matrix, b: &Matrix, k: usize) -> Result<Vec<usize>> {
    let neg: Vec<f64> = (0..a.rows())
        .map(|i| -norm_f64(&sub(&to_f64(b.row(i)), &to_f64(a.row(i)))))
        .collect();
    topk_lowest(&neg, k)
}

/// Recall of each identifier kind over consecutive pairs of dense passes.
/// `proxies[l]` must hold the layer-`l` proxy when a singular kind is asked for.
pub fn identifier_recall(
    passes: &[(ForwardOutput, ForwardOutput)],
    kinds: &[IdentifierKind],
    k: usize,
    proxies: Option<&[SingularProxy]>,
) -> Result<Vec<RecallRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        let mut total = 0.0;
        let mut samples = 0;
        for (step, (prev, next)) in passes.iter().enumerate() {
            if prev.layers.is_empty() || prev.layers.len() != next.layers.len() {
                return Err(Error::State("dense trace lacks layer activations".into()));
            }
            for (l, (a, b)) in prev.layers.iter().zip(&next.layers).enumerate() {
                let n = a.output.rows();
                if n == 0 || b.output.rows() != n {
                    return Err(Error::State("dense trace lacks layer outputs".into()));
                }
                let k = k.min(n);
                let oracle = top_drift(&a.output, &b.output, k)?;
                let chosen = match kind {
                    IdentifierKind::Oracle => oracle.clone(),
                    IdentifierKind::Random(seed) => {
                        let s = seed ^ ((step as u64) << 32) ^ l as u64;
                        let x = random_identifiers(n, 1, s);
                        topk_lowest(&x.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), k)?
                    }
                    _ => {
                        let proxy = match kind {
                            IdentifierKind::Singular(_) => Some(
                                proxies
                                    .and_then(|p| p.get(l))
                                    .ok_or_else(|| Error::Argument("missing proxy".into()))?,
                            ),
                            _ => None,
                        };
                        let pa = identifier_vectors(kind, a, proxy)?;
                        let pb = identifier_vectors(kind, b, proxy)?;
                        let scores = (0..n)
                            .map(|i| cosine_sim(pb.row(i), pa.row(i)))
                            .collect::<Result<Vec<_>>>()?;
                        topk_lowest(&scores, k)?
                    }
                };
                let hit = chosen
                    .iter()
                    .filter(|i| oracle.binary_search(i).is_ok())
                    .count();
                total += hit as f64 / k as f64;
                samples += 1;
            }
        }
        rows.push(RecallRow {
            identifier: kind.to_string(),
            recall: if samples > 0 {
                total / samples as f64
            } else {
                0.0
            },
            samples,
        });
    }
    Ok(rows)
}

/// Settings for measuring identifier recall on a seeded dense decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallSpec {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub per_step: usize,
    pub steps: usize,
    /// Fraction of tokens selected per layer.
    pub ratio: f64,
}

impl Default for RecallSpec {
    fn default() -> Self {
        RecallSpec {
            prompt_len: 32,
            gen_len: 32,
            per_step: 2,
            steps: 12,
            ratio: 0.25,
        }
    }
}

/// Collects consecutive dense-pass pairs of a seeded decode.
pub fn dense_pairs(
    model: &ModelWeights,
    spec: &RecallSpec,
    seed: u64,
) -> Result<Vec<(ForwardOutput, ForwardOutput)>> {
    let prompt = random_prompt(model.config(), spec.prompt_len, seed);
    let mut pairs = Vec::new();
    for_each_dense_step(
        model,
        &prompt,
        spec.gen_len,
        &DecodePolicy::fixed(spec.per_step),
        spec.steps,
        |_, a, b| {
            pairs.push((a.clone(), b.clone()));
            Ok(())
        },
    )?;
    Ok(pairs)
}

/// Which checks a suite run covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Svd,
    Ffn,
    Attn,
    Props,
    Anisotropy,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "svd" => Suite::Svd,
            "ffn" => Suite::Ffn,
            "attn" => Suite::Attn,
            "props" => Suite::Props,
            "anisotropy" => Suite::Anisotropy,
            _ => return Err(Error::Argument(format!("unknown suite `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub bounds: Vec<BoundReport>,
    pub anisotropy: Vec<AnisotropyReport>,
    pub passed: bool,
}

/// Seeded `d x d` Gaussian matrix with entries of std `1/√d`.
pub fn seeded_square(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (d as f64).sqrt();
    Matrix::from_fn(d, d, |_, _| {
        (<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * s) as f32
    })
}

pub fn svd_suite(seeds: u64, pairs: usize) -> Result<Vec<BoundReport>> {
    let mut out = Vec::new();
    for r in [16, 32, 48] {
        let mut theorem = BoundReport::new(format!("svd_r{r}"));
        let mut lemma = BoundReport::new(format!("svd_lemma_r{r}"));
        for seed in 0..seeds {
            let w = seeded_square(64, 1000 + seed);
            let rep = check_thm_svd_bound(&w, r, pairs, seed)?;
            theorem.merge(&rep.theorem);
            lemma.merge(&rep.lemma);
            theorem.constant_max("coefficient_max", rep.theorem.constants["coefficient"]);
            lemma.constant_max("coefficient_max", rep.lemma.constants["coefficient"]);
        }
        out.push(theorem);
        out.push(lemma);
    }
    Ok(out)
}

/// Bernoulli inequality and the projection-norm ratio, merged into one report.
pub fn check_propositions(triples: usize, seed: u64) -> Result<BoundReport> {
    let mut total = BoundReport::new("propositions");
    total.merge(&check_bernoulli(triples, seed));
    total.merge(&check_projection_props(triples, seed ^ 0x5eed)?.0);
    Ok(total)
}

pub fn props_suite(triples: usize) -> Result<Vec<BoundReport>> {
    let bern = check_bernoulli(10_000, 7);
    let (proj, lemma) = check_projection_props(triples, 11)?;
    Ok(vec![bern, proj, lemma])
}

/// Attention bound over every layer and every consecutive step pair of a
/// 16-step greedy decode.
pub fn attention_suite(model: &ModelWeights, seed: u64) -> Result<BoundReport> {
    let mut total = BoundReport::new("attention");
    let prompt = random_prompt(model.config(), 16, seed);
    for_each_dense_step(
        model,
        &prompt,
        32,
        &DecodePolicy::fixed(2),
        16,
        |_, a, b| {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                let rep = check_thm_attention_bound(la, lb)?;
                total.merge(&rep);
                for (k, v) in &rep.constants {
                    if k.ends_with("min") {
                        total.constant_min(k, *v);
                    } else {
                        total.constant_max(k, *v);
                    }
                }
            }
            Ok(())
        },
    )?;
    Ok(total)
}

/// FFN bound on `pairs` sampled input pairs per layer.
pub fn ffn_suite(model: &ModelWeights, pairs: usize) -> Result<BoundReport> {
    let cfg = model.config();
    let mut total = BoundReport::new("ffn");
    for (l, layer) in model.layers.iter().enumerate() {
        let samples = ffn_sample_pairs(cfg.d, pairs, 500 + l as u64);
        let rep = check_thm_ffn_bound(layer, cfg.rms_eps, &samples)?;
        total.merge(&rep);
        total.constant_max("L_hat_max", rep.constants["L_hat"]);
    }
    Ok(total)
}

pub fn anisotropy_suite(seeds: u64) -> Result<Vec<AnisotropyReport>> {
    let attn = uniform_attention(64);
    (0..seeds)
        .map(|s| anisotropy_demo(64, 1.0, 2.0, &attn, s))
        .collect()
}

/// Runs the chosen checks; `model` defaults to the seeded default configuration.
pub fn run_suite(suite: Suite, model: Option<&ModelWeights>) -> Result<SuiteReport> {
    let owned;
    let model = match model {
        Some(m) => m,
        None => {
            owned = init_weights(&ModelConfig::default())?;
            &owned
        }
    };
    let want = |s: Suite| suite == Suite::All || suite == s;
    let mut bounds = Vec::new();
    let mut anisotropy = Vec::new();
    if want(Suite::Svd) {
        bounds.extend(svd_suite(10, 100)?);
    }
    if want(Suite::Props) {
        bounds.extend(props_suite(10_000)?);
    }
    if want(Suite::Attn) {
        bounds.push(attention_suite(model, 0)?);
    }
    if want(Suite::Ffn) {
        bounds.push(ffn_suite(model, 1000)?);
    }
    if want(Suite::Anisotropy) {
        anisotropy = anisotropy_suite(20)?;
    }
    let passed =
        bounds.iter().all(BoundReport::passed) && anisotropy.iter().all(|a| a.holds != Some(false));
    Ok(SuiteReport {
        bounds,
        anisotropy,
        passed,
    })
}

/// Plain-text summary, one line per report.
pub fn render_table(report: &SuiteReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:>8} {:>10} {:>14}",
        "check", "trials", "violations", "min slack"
    );
    for b in &report.bounds {
        let slack = b.max_slack.map_or("-".to_string(), |x| format!("{x:.3e}"));
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>10} {:>14}",
            b.name, b.trials, b.violations, slack
        );
    }
    if !report.anisotropy.is_empty() {
        let held = report
            .anisotropy
            .iter()
            .filter(|a| a.holds == Some(true))
            .count();
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>10} {:>14}",
            "anisotropy",
            report.anisotropy.len(),
            report.anisotropy.len() - held,
            "-"
        );
    }
    let _ = writeln!(s, "{}", if report.passed { "PASS" } else { "FAIL" });
    s
}
