//! Layer-wise update budget: the piecewise-Gaussian ratio schedule, the
//! drift profiler that motivates it, and a fitter from profiles to schedules.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::decoder::{confidence_select, DecodePolicy, DecodeState};
use crate::error::{Error, Result};
use crate::linalg::cosine_sim;
use crate::model::ModelWeights;

/// Serialized form of a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "l_p")]
    pub peak_layer: usize,
    pub rho_1: f64,
    pub rho_p: f64,
    #[serde(rename = "rho_L")]
    pub rho_last: f64,
}

/// Update ratio of layer `l` (1-based).
///
/// Left of the peak the ratio decays from `rho_p` towards `rho_1` as a
/// Gaussian in `(l - l_p) / (l_p - 1)`; right of it towards `rho_L` in
/// `(l - l_p) / (L - l_p)`.
pub fn rho_of_layer(p: &ScheduleParams, l: usize) -> f64 {
    if l == p.peak_layer {
        return p.rho_p;
    }
    let (boundary, span) = if l < p.peak_layer {
        (p.rho_1, (p.peak_layer - 1) as f64)
    } else {
        (p.rho_last, (p.layers - p.peak_layer) as f64)
    };
    let x = (l as f64 - p.peak_layer as f64) / span;
    p.rho_p * ((boundary / p.rho_p).ln() * x * x).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetSchedule {
    params: ScheduleParams,
    evaluated: Vec<f64>,
}

impl BudgetSchedule {
    pub fn new(
        layers: usize,
        peak_layer: usize,
        rho_1: f64,
        rho_p: f64,
        rho_last: f64,
    ) -> Result<Self> {
        Self::from_params(ScheduleParams {
            layers,
            peak_layer,
            rho_1,
            rho_p,
            rho_last,
        })
    }

    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        if p.layers == 0 {
            return Err(Error::Argument("schedule needs at least one layer".into()));
        }
        if p.peak_layer == 0 || p.peak_layer > p.layers {
            return Err(Error::Argument(format!(
                "peak layer {} outside [1, {}]",
                p.peak_layer, p.layers
            )));
        }
        for (name, r) in [
            ("rho_1", p.rho_1),
            ("rho_p", p.rho_p),
            ("rho_L", p.rho_last),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Argument(format!("{name} = {r} outside (0, 1]")));
            }
        }
        if p.rho_p < p.rho_1.max(p.rho_last) {
            return Err(Error::Argument(
                "rho_p must be at least max(rho_1, rho_L)".into(),
            ));
        }
        // A peak on a boundary zeroes that branch's denominator; it is only
        // well defined when the branch is flat.
        if p.peak_layer == 1 && p.rho_1 != p.rho_p {
            return Err(Error::Argument("l_p = 1 requires rho_1 = rho_p".into()));
        }
        if p.peak_layer == p.layers && p.rho_last != p.rho_p {
            return Err(Error::Argument("l_p = L requires rho_L = rho_p".into()));
        }
        let evaluated = (1..=p.layers).map(|l| rho_of_layer(&p, l)).collect();
        Ok(Self {
            params: p,
            evaluated,
        })
    }

    /// Same ratio on every layer.
    pub fn uniform(layers: usize, rho: f64) -> Result<Self> {
        Self::new(layers, 1, rho, rho, rho)
    }

    /// Bell schedule peaking at `rho_p = 0.25` about 40% of the way down the
    /// stack, boundaries at 0.08; for 8 layers the mean ratio is ~0.167.
    pub fn default_adaptive(layers: usize) -> Result<Self> {
        if layers < 3 {
            return Self::uniform(layers, 0.25);
        }
        let peak = ((layers as f64 * 0.4).ceil() as usize).clamp(2, layers - 1);
        Self::new(layers, peak, 0.08, 0.25, 0.08)
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn layers(&self) -> usize {
        self.params.layers
    }

    /// `ρ(l)` for a 1-based layer index.
    pub fn rho(&self, l: usize) -> f64 {
        self.evaluated[l - 1]
    }

    pub fn evaluated(&self) -> &[f64] {
        &self.evaluated
    }

    pub fn mean_ratio(&self) -> f64 {
        self.evaluated.iter().sum::<f64>() / self.evaluated.len() as f64
    }

    /// Tokens to refresh at layer `l` out of `n`: `clamp(ceil(ρ(l)·n), 1, n)`.
    pub fn tokens_for_layer(&self, l: usize, n: usize) -> usize {
        ((self.rho(l) * n as f64).ceil() as usize).clamp(1, n.max(1))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.params)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_params(serde_json::from_str(s)?)
    }
}

/// Where drift is measured inside a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftTap {
    #[default]
    LayerInput,
    AttnOutput,
    LayerOutput,
}

/// Per-layer, per-step fraction of tokens whose cosine similarity with the
/// previous step fell below `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    pub tau: f64,
    /// `fractions[layer][step - 1]`, step counted from 1.
    pub fractions: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub n_tokens: usize,
    pub steps: usize,
    pub tap: DriftTap,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ProfileSidecar {
    tau: f64,
    seeds: Vec<u64>,
    n_tokens: usize,
    steps: usize,
    tap: DriftTap,
    config_hash: String,
}

impl DriftProfile {
    pub fn layers(&self) -> usize {
        self.fractions.len()
    }

    /// Mean fraction per layer over all recorded steps.
    pub fn layer_means(&self) -> Vec<f64> {
        self.fractions
            .iter()
            .map(|s| {
                if s.is_empty() {
                    0.0
                } else {
                    s.iter().sum::<f64>() / s.len() as f64
                }
            })
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "layer,step,fraction")?;
        for (l, steps) in self.fractions.iter().enumerate() {
            for (s, f) in steps.iter().enumerate() {
                writeln!(w, "{},{},{}", l + 1, s + 1, f)?;
            }
        }
        Ok(())
    }

    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProfileSidecar {
            tau: self.tau,
            seeds: self.seeds.clone(),
            n_tokens: self.n_tokens,
            steps: self.steps,
            tap: self.tap,
            config_hash: self.config_hash.clone(),
        })?)
    }

    /// Rebuilds a profile from its CSV body and JSON sidecar.
    pub fn read(csv: impl BufRead, sidecar: &str) -> Result<Self> {
        let meta: ProfileSidecar = serde_json::from_str(sidecar)?;
        let mut fractions: Vec<Vec<f64>> = Vec::new();
        let mut lines = csv.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "layer,step,fraction" {
            return Err(Error::Input(format!(
                "unexpected profile header `{header}`"
            )));
        }
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Input(format!("bad profile row `{line}`"));
            if cols.len() != 3 {
                return Err(bad());
            }
            let layer: usize = cols[0].trim().parse().map_err(|_| bad())?;
            let step: usize = cols[1].trim().parse().map_err(|_| bad())?;
            let frac: f64 = cols[2].trim().parse().map_err(|_| bad())?;
            if layer == 0 || step == 0 || !(0.0..=1.0).contains(&frac) {
                return Err(bad());
            }
            if fractions.len() < layer {
                fractions.resize(layer, Vec::new());
            }
            let row = &mut fractions[layer - 1];
            if row.len() < step {
                row.resize(step, 0.0);
            }
            row[step - 1] = frac;
        }
        Ok(Self {
            tau: meta.tau,
            fractions,
            seeds: meta.seeds,
            n_tokens: meta.n_tokens,
            steps: meta.steps,
            tap: meta.tap,
            config_hash: meta.config_hash,
        })
    }
}

/// What [`profile_drift`] decodes.
#[derive(Clone, Debug)]
pub struct ProfileSpec {
    pub seeds: Vec<u64>,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub steps: usize,
    pub tau: f64,
    pub tap: DriftTap,
}

/// Fraction of rows whose cosine similarity between `prev` and `cur` is below `tau`.
pub fn drifting_fraction(
    prev: &crate::linalg::Matrix,
    cur: &crate::linalg::Matrix,
    tau: f64,
) -> Result<f64> {
    let n = cur.rows();
    let mut below = 0usize;
    for i in 0..n {
        if cosine_sim(prev.row(i), cur.row(i))? < tau {
            below += 1;
        }
    }
    Ok(below as f64 / n as f64)
}

/// Runs dense (uncached) decodes and measures per-layer drift between
/// consecutive steps, averaged over the sample seeds.
pub fn profile_drift(model: &ModelWeights, spec: &ProfileSpec) -> Result<DriftProfile> {
    if spec.steps < 2 {
        return Err(Error::Argument(
            "drift profiling needs at least 2 steps".into(),
        ));
    }
    if !(spec.tau > 0.0 && spec.tau < 1.0) {
        return Err(Error::Argument(format!(
            "tau = {} outside (0, 1)",
            spec.tau
        )));
    }
    if spec.seeds.is_empty() || spec.gen_len == 0 {
        return Err(Error::Argument(
            "drift profiling needs seeds and gen_len >= 1".into(),
        ));
    }
    let layers = model.config().layers;
    let per_step = spec.gen_len.div_ceil(spec.steps - 1).max(1);
    let policy = DecodePolicy::fixed(per_step);
    let mut sums = vec![vec![0.0f64; spec.steps - 1]; layers];
    let mut counts = vec![0usize; spec.steps - 1];
    for &seed in &spec.seeds {
        let prompt = crate::decoder::random_prompt(model.config(), spec.prompt_len, seed);
        let mut state = DecodeState::new(&prompt, spec.gen_len, model.config())?;
        let mut prev: Option<Vec<crate::linalg::Matrix>> = None;
        for t in 0..spec.steps {
            let out = model.forward_full(state.tokens())?;
            let taps: Vec<_> = out
                .layers
                .into_iter()
                .map(|a| match spec.tap {
                    DriftTap::LayerInput => a.attn_input,
                    DriftTap::AttnOutput => a.attn_output,
                    DriftTap::LayerOutput => a.output,
                })
                .collect();
            if let Some(prev) = &prev {
                for l in 0..layers {
                    sums[l][t - 1] += drifting_fraction(&prev[l], &taps[l], spec.tau)?;
                }
                counts[t - 1] += 1;
            }
            prev = Some(taps);
            if state.is_done() {
                break;
            }
            let picks = confidence_select(&out.logits, &state, &policy, seed ^ t as u64);
            state.commit(&picks)?;
        }
    }
    let recorded = counts.iter().take_while(|&&c| c > 0).count();
    let fractions = sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&counts)
                .take(recorded)
                .map(|(s, &c)| s / c as f64)
                .collect()
        })
        .collect();
    Ok(DriftProfile {
        tau: spec.tau,
        fractions,
        seeds: spec.seeds.clone(),
        n_tokens: spec.prompt_len + spec.gen_len,
        steps: recorded + 1,
        tap: spec.tap,
        config_hash: crate::io::config_hash(model.config()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub schedule: BudgetSchedule,
    /// Set when the profile carried no drift and a flat floor schedule was returned.
    pub flat_warning: bool,
}

pub const DEFAULT_FLOOR: f64 = 0.02;

/// Least-squares fit of the schedule to the per-layer drift means: every
/// interior peak layer is tried, with anchors refined by coordinate search
/// from the profile's endpoint and peak values.
pub fn fit_schedule(profile: &DriftProfile, floor: f64) -> Result<FitResult> {
    let means = validated_means(profile, floor)?;
    let layers = means.len();
    if means.iter().all(|&m| m == 0.0) {
        log::warn!("drift profile is all zero; falling back to a flat floor schedule");
        return Ok(FitResult {
            schedule: BudgetSchedule::uniform(layers, floor)?,
            flat_warning: true,
        });
    }
    let clamp = |x: f64| x.clamp(floor, 1.0);
    if layers < 3 {
        return Ok(FitResult {
            schedule: BudgetSchedule::uniform(layers, clamp(means[argmax(&means)]))?,
            flat_warning: false,
        });
    }
    let mut best: Option<(f64, ScheduleParams)> = None;
    for peak in 1..layers - 1 {
        let p = refine(&means, peak, floor);
        let err = sse(&p, &means);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, p));
        }
    }
    let (_, p) = best.expect("at least one interior layer");
    Ok(FitResult {
        schedule: BudgetSchedule::from_params(p)?,
        flat_warning: false,
    })
}

/// How [`fit_schedule_with`] places the curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    #[default]
    LeastSquares,
    /// Endpoints and the interior maximum taken directly from the layer means.
    Anchor,
}

impl std::str::FromStr for FitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least-squares" | "lsq" => Ok(FitMethod::LeastSquares),
            "anchor" => Ok(FitMethod::Anchor),
            _ => Err(Error::Argument(format!("unknown fit method `{s}`"))),
        }
    }
}

pub fn fit_schedule_with(
    profile: &DriftProfile,
    floor: f64,
    method: FitMethod,
) -> Result<FitResult> {
    match method {
        FitMethod::LeastSquares => fit_schedule(profile, floor),
        FitMethod::Anchor => {
            let means = validated_means(profile, floor)?;
            let layers = means.len();
            if means.iter().all(|&m| m == 0.0) || layers < 3 {
                return fit_schedule(profile, floor);
            }
            let clamp = |x: f64| x.clamp(floor, 1.0);
            let peak = 1 + argmax(&means[1..layers - 1]);
            let (rho_1, rho_last) = (clamp(means[0]), clamp(means[layers - 1]));
            Ok(FitResult {
                schedule: BudgetSchedule::from_params(ScheduleParams {
                    layers,
                    peak_layer: peak + 1,
                    rho_1,
                    rho_p: clamp(means[peak]).max(rho_1).max(rho_last),
                    rho_last,
                })?,
                flat_warning: false,
            })
        }
    }
}

fn validated_means(profile: &DriftProfile, floor: f64) -> Result<Vec<f64>> {
    if profile.fractions.is_empty() {
        return Err(Error::Argument("empty drift profile".into()));
    }
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::Argument(format!("floor {floor} outside (0, 1]")));
    }
    Ok(profile.layer_means())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn refine(means: &[f64], peak: usize, floor: f64) -> ScheduleParams {
    let layers = means.len();
    let clamp = |x: f64| x.clamp(floor, 1.0);
    let rho_1 = clamp(means[0]);
    let rho_last = clamp(means[layers - 1]);
    let mut p = ScheduleParams {
        layers,
        peak_layer: peak + 1,
        rho_1,
        rho_p: clamp(means[peak]).max(rho_1).max(rho_last),
        rho_last,
    };
    let mut err = sse(&p, means);
    let mut step = 0.05;
    while step > 1e-7 {
        let mut improved = false;
        for coord in 0..3 {
            for sign in [1.0, -1.0] {
                let mut q = p;
                let x = match coord {
                    0 => &mut q.rho_1,
                    1 => &mut q.rho_p,
                    _ => &mut q.rho_last,
                };
                *x = clamp(*x + sign * step);
                if q.rho_p < q.rho_1 || q.rho_p < q.rho_last {
                    continue;
                }
                let e = sse(&q, means);
                if e < err {
                    p = q;
                    err = e;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    p
}

fn sse(p: &ScheduleParams, means: &[f64]) -> f64 {
    means
        .iter()
        .enumerate()
        .map(|(i, m)| (rho_of_layer(p, i + 1) - m).powi(2))
        .sum()
}
