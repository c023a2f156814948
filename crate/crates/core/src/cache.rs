//! Per-layer K/V/output caches with selective row refresh.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::budget::BudgetSchedule;
use crate::error::{Error, Result};
use crate::flops::{self, FlopCounts};
use crate::linalg::{cosine_sim, topk_lowest, Matrix};
use crate::model::{attend, ffn_apply, rmsnorm_rows, ModelWeights};
use crate::proxy::{build_singular_proxy, project_identifier, IdentifierKind, SingularProxy};

/// Cached state of one layer, all `N x ·`.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub proxy_cache: Matrix,
    pub key_cache: Matrix,
    pub value_cache: Matrix,
    pub output_cache: Matrix,
    pub initialized: bool,
}

impl LayerCache {
    pub fn empty() -> Self {
        LayerCache {
            proxy_cache: Matrix::zeros(0, 0),
            key_cache: Matrix::zeros(0, 0),
            value_cache: Matrix::zeros(0, 0),
            output_cache: Matrix::zeros(0, 0),
            initialized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.output_cache.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows of one layer chosen for recomputation at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdatePlan {
    pub step: usize,
    pub layer: usize,
    /// Ascending, unique.
    pub indices: Vec<usize>,
    pub k: usize,
    /// Cosine similarity of every row against its cached identifier.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CacheMode {
    Vanilla,
    Cached {
        identifier: IdentifierKind,
        schedule: BudgetSchedule,
    },
}

/// When cached identifiers are overwritten.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyRefresh {
    /// Only at recomputed rows.
    #[default]
    Lazy,
    /// Every row, every step.
    Eager,
}

/// One `(step, layer)` entry of a decode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub layer: usize,
    pub n: usize,
    pub k: usize,
    pub rho: f64,
    pub identifier: Option<IdentifierKind>,
    /// Dense pass that filled the cache.
    pub warmup: bool,
    pub indices: Vec<usize>,
    pub min_score: Option<f64>,
    pub mean_score: Option<f64>,
    pub flops_attn: u64,
    pub flops_ffn: u64,
    pub flops_identify: u64,
    pub flops_other: u64,
}

impl TraceRecord {
    pub fn counts(&self, cfg: &crate::model::ModelConfig) -> FlopCounts {
        flops::record_counts(cfg, self)
    }
}

fn check_layer(model: &ModelWeights, layer: usize) -> Result<()> {
    if layer >= model.layers.len() {
        return Err(Error::Argument(format!(
            "layer {layer} out of range ({} layers)",
            model.layers.len()
        )));
    }
    Ok(())
}

/// Dense pass of `layer` that fills every cache row. Returns the layer output
/// and the executed counts.
pub fn warmup_forward(
    model: &ModelWeights,
    layer: usize,
    h: &Matrix,
    cache: &mut LayerCache,
    identifier: IdentifierKind,
    proxy: Option<&SingularProxy>,
) -> Result<(Matrix, FlopCounts)> {
    check_layer(model, layer)?;
    let cfg = model.config();
    let acts = model.layer_forward(h, layer)?;
    let (ids, macs) = project_identifier(identifier, h, model, layer, proxy)?;
    let n = h.rows();
    let mut counts = executed_compute(cfg, n, n);
    counts.identify = macs;
    cache.proxy_cache = ids;
    cache.key_cache = acts.k;
    cache.value_cache = acts.v;
    cache.output_cache = acts.output.clone();
    cache.initialized = true;
    Ok((acts.output, counts))
}

/// Scores every row against the cached identifiers and picks the `k` lowest,
/// with `forced` rows always included. Refreshes the cached identifiers.
#[allow(clippy::too_many_arguments)]
pub fn identify_updates(
    model: &ModelWeights,
    layer: usize,
    step: usize,
    h: &Matrix,
    cache: &mut LayerCache,
    identifier: IdentifierKind,
    proxy: Option<&SingularProxy>,
    k: usize,
    forced: &[usize],
    refresh: ProxyRefresh,
) -> Result<(UpdatePlan, u64)> {
    check_layer(model, layer)?;
    if !cache.initialized {
        return Err(Error::State(format!(
            "layer {layer} cache used before warmup"
        )));
    }
    let n = h.rows();
    if n != cache.len() {
        return Err(Error::State(format!(
            "sequence length changed from {} to {n}",
            cache.len()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} outside [1, {n}]")));
    }
    let (ids, macs) = project_identifier(identifier, h, model, layer, proxy)?;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        scores.push(cosine_sim(ids.row(i), cache.proxy_cache.row(i))?);
    }
    let mut ranked = scores.clone();
    let mut n_forced = 0;
    for &f in forced {
        if f >= n {
            return Err(Error::Argument(format!("forced row {f} out of range")));
        }
        if ranked[f] > f64::NEG_INFINITY {
            ranked[f] = f64::NEG_INFINITY;
            n_forced += 1;
        }
    }
    let k_eff = k.max(n_forced);
    let indices = topk_lowest(&ranked, k_eff)?;
    match refresh {
        ProxyRefresh::Lazy => {
            let fresh = ids.gather_rows(&indices);
            cache.proxy_cache.scatter_rows(&indices, &fresh)?;
        }
        ProxyRefresh::Eager => cache.proxy_cache = ids,
    }
    let cost = macs + (n * identifier.width(model.config().d)) as u64;
    Ok((
        UpdatePlan {
            step,
            layer,
            indices,
            k: k_eff,
            scores,
        },
        cost,
    ))
}

fn executed_compute(cfg: &crate::model::ModelConfig, n: usize, k: usize) -> FlopCounts {
    flops::layer_compute(cfg, n, k)
}

/// Recomputes the planned rows of `layer`: sparse Q/K/V, cache overwrite,
/// planned queries against all cached keys, FFN, output cache overwrite.
/// Returns the full cached layer output.
pub fn cached_layer_forward(
    model: &ModelWeights,
    layer: usize,
    h: &Matrix,
    cache: &mut LayerCache,
    plan: &UpdatePlan,
) -> Result<(Matrix, FlopCounts)> {
    check_layer(model, layer)?;
    if !cache.initialized {
        return Err(Error::State(format!(
            "layer {layer} cache used before warmup"
        )));
    }
    if plan.layer != layer {
        return Err(Error::Argument(format!(
            "plan for layer {} applied to layer {layer}",
            plan.layer
        )));
    }
    let n = h.rows();
    if n != cache.len() {
        return Err(Error::State(format!(
            "sequence length changed from {} to {n}",
            cache.len()
        )));
    }
    if plan.indices.windows(2).any(|w| w[0] >= w[1]) || plan.indices.iter().any(|&i| i >= n) {
        return Err(Error::Argument(
            "plan indices must be ascending, unique and in range".into(),
        ));
    }
    let cfg = model.config();
    let lw = &model.layers[layer];
    let rows = &plan.indices;
    let h_i = h.gather_rows(rows);
    let x_i = rmsnorm_rows(&h_i, &lw.attn_norm, cfg.rms_eps);
    let q_i = x_i.matmul(&lw.wq)?;
    let k_i = x_i.matmul(&lw.wk)?;
    let v_i = x_i.matmul(&lw.wv)?;
    cache.key_cache.scatter_rows(rows, &k_i)?;
    cache.value_cache.scatter_rows(rows, &v_i)?;
    let (mix, _) = attend(&q_i, &cache.key_cache, &cache.value_cache, cfg.heads);
    let x1 = h_i.add(&mix.matmul(&lw.wo)?)?;
    let out = x1.add(&ffn_apply(&x1, lw, cfg.rms_eps))?;
    cache.output_cache.scatter_rows(rows, &out)?;
    Ok((
        cache.output_cache.clone(),
        executed_compute(cfg, n, rows.len()),
    ))
}

/// Rank-`r` proxies for every layer of `model`.
pub fn build_proxy_bank(model: &ModelWeights, r: usize) -> Result<Vec<SingularProxy>> {
    model
        .layers
        .iter()
        .map(|lw| build_singular_proxy(&lw.value_projection(), r))
        .collect()
}

fn step_seed(seed: u64, step: usize, layer: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (layer as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Decoding-time cache state across denoising steps of one sequence.
pub struct Session<'m> {
    model: &'m ModelWeights,
    mode: CacheMode,
    proxies: Option<Arc<Vec<SingularProxy>>>,
    caches: Vec<LayerCache>,
    refresh: ProxyRefresh,
    forced: Vec<usize>,
    step: usize,
    n: Option<usize>,
    trace: Vec<TraceRecord>,
}

impl<'m> Session<'m> {
    /// Builds the per-layer proxies up front when the identifier needs them.
    pub fn new(model: &'m ModelWeights, mode: CacheMode) -> Result<Self> {
        let proxies = match &mode {
            CacheMode::Cached {
                identifier: IdentifierKind::Singular(r),
                ..
            } => Some(Arc::new(build_proxy_bank(model, *r)?)),
            _ => None,
        };
        Self::with_proxies(model, mode, proxies)
    }

    /// Reuses a prebuilt proxy bank.
    pub fn with_proxies(
        model: &'m ModelWeights,
        mode: CacheMode,
        proxies: Option<Arc<Vec<SingularProxy>>>,
    ) -> Result<Self> {
        let cfg = model.config();
        if let CacheMode::Cached {
            identifier,
            schedule,
        } = &mode
        {
            identifier.validate(cfg.d)?;
            if *identifier == IdentifierKind::Oracle {
                return Err(Error::Argument(
                    "the oracle identifier is for evaluation only".into(),
                ));
            }
            if schedule.layers() != cfg.layers {
                return Err(Error::Argument(format!(
                    "schedule covers {} layers, model has {}",
                    schedule.layers(),
                    cfg.layers
                )));
            }
            match (identifier, &proxies) {
                (IdentifierKind::Singular(r), Some(p)) => {
                    if p.len() != cfg.layers || p.iter().any(|p| p.rank() != *r) {
                        return Err(Error::Argument(
                            "proxy bank does not match the identifier".into(),
                        ));
                    }
                }
                (IdentifierKind::Singular(_), None) => {
                    return Err(Error::Argument(
                        "singular identifier needs a proxy bank".into(),
                    ))
                }
                _ => {}
            }
        }
        let proxies = match &mode {
            CacheMode::Cached {
                identifier: IdentifierKind::Singular(_),
                ..
            } => proxies,
            _ => None,
        };
        Ok(Session {
            model,
            mode,
            proxies,
            caches: (0..cfg.layers).map(|_| LayerCache::empty()).collect(),
            refresh: ProxyRefresh::Lazy,
            forced: Vec::new(),
            step: 0,
            n: None,
            trace: Vec::new(),
        })
    }

    pub fn with_refresh(mut self, refresh: ProxyRefresh) -> Self {
        self.refresh = refresh;
        self
    }

    pub fn mode(&self) -> &CacheMode {
        &self.mode
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn caches(&self) -> &[LayerCache] {
        &self.caches
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceRecord> {
        self.trace
    }

    /// Rows to recompute at every layer on the next step, on top of the budget.
    pub fn mark_changed(&mut self, rows: &[usize]) {
        self.forced.extend_from_slice(rows);
        self.forced.sort_unstable();
        self.forced.dedup();
    }

    /// One denoising step over `tokens`; returns the logits.
    pub fn forward(&mut self, tokens: &[usize]) -> Result<Matrix> {
        let model = self.model;
        let cfg = model.config();
        let n = tokens.len();
        match self.n {
            Some(prev) if prev != n => {
                return Err(Error::State(format!(
                    "sequence length changed from {prev} to {n} mid-decode"
                )))
            }
            _ => self.n = Some(n),
        }
        let mut h = model.embed(tokens)?;
        let step = self.step;
        let forced = std::mem::take(&mut self.forced);
        for l in 0..cfg.layers {
            let (out, rec) = match &self.mode {
                CacheMode::Vanilla => {
                    let out = model.layer_forward(&h, l)?.output;
                    let c = executed_compute(cfg, n, n);
                    let rec = record(step, l, n, n, 1.0, None, true, (0..n).collect(), None, c);
                    (out, rec)
                }
                CacheMode::Cached {
                    identifier,
                    schedule,
                } => {
                    let ident = match *identifier {
                        IdentifierKind::Random(s) => IdentifierKind::Random(step_seed(s, step, l)),
                        other => other,
                    };
                    let proxy = self.proxies.as_ref().map(|p| &p[l]);
                    let cache = &mut self.caches[l];
                    if !cache.initialized {
                        let (out, c) = warmup_forward(model, l, &h, cache, ident, proxy)?;
                        let rec = record(
                            step,
                            l,
                            n,
                            n,
                            1.0,
                            Some(*identifier),
                            true,
                            (0..n).collect(),
                            None,
                            c,
                        );
                        (out, rec)
                    } else {
                        let rho = schedule.rho(l + 1);
                        let k = schedule.tokens_for_layer(l + 1, n);
                        let (plan, id_cost) = identify_updates(
                            model,
                            l,
                            step,
                            &h,
                            cache,
                            ident,
                            proxy,
                            k,
                            &forced,
                            self.refresh,
                        )?;
                        let (out, mut c) = cached_layer_forward(model, l, &h, cache, &plan)?;
                        c.identify = id_cost;
                        let rec = record(
                            step,
                            l,
                            n,
                            plan.k,
                            rho,
                            Some(*identifier),
                            false,
                            plan.indices,
                            Some(&plan.scores),
                            c,
                        );
                        (out, rec)
                    }
                }
            };
            self.trace.push(rec);
            h = out;
        }
        self.step += 1;
        model.logits(&h)
    }
}

#[allow(clippy::too_many_arguments)]
fn record(
    step: usize,
    layer: usize,
    n: usize,
    k: usize,
    rho: f64,
    identifier: Option<IdentifierKind>,
    warmup: bool,
    indices: Vec<usize>,
    scores: Option<&[f64]>,
    c: FlopCounts,
) -> TraceRecord {
    let (min_score, mean_score) = match scores {
        Some(s) if !s.is_empty() => (
            Some(s.iter().copied().fold(f64::INFINITY, f64::min)),
            Some(s.iter().sum::<f64>() / s.len() as f64),
        ),
        _ => (None, None),
    };
    TraceRecord {
        step,
        layer,
        n,
        k,
        rho,
        identifier,
        warmup,
        indices,
        min_score,
        mean_score,
        flops_attn: c.attention(),
        flops_ffn: c.ffn,
        flops_identify: c.identify,
        flops_other: c.other,
    }
}
