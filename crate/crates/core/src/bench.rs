//! Decode benchmarks across cache modes: FLOP ledgers, timing, and logit
//! divergence against dense decoding on the same inputs.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::budget::{BudgetSchedule, ScheduleParams};
use crate::cache::{build_proxy_bank, CacheMode, ProxyRefresh, TraceRecord};
use crate::decoder::{decode_with, random_prompt, DecodeOptions, DecodePolicy};
use crate::error::{Error, Result};
use crate::flops::{flop_count, FlopCounts};
use crate::io::config_hash;
use crate::linalg::{norm, Matrix};
use crate::model::{ModelConfig, ModelWeights};
use crate::proxy::{IdentifierKind, SingularProxy};
use crate::verify::{dense_pairs, identifier_recall, RecallRow, RecallSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleSpec {
    Uniform(f64),
    /// The default adaptive schedule for the model depth.
    Adaptive,
    Params(ScheduleParams),
}

impl ScheduleSpec {
    pub fn build(&self, layers: usize) -> Result<BudgetSchedule> {
        match self {
            ScheduleSpec::Uniform(rho) => BudgetSchedule::uniform(layers, *rho),
            ScheduleSpec::Adaptive => BudgetSchedule::default_adaptive(layers),
            ScheduleSpec::Params(p) => {
                if p.layers != layers {
                    return Err(Error::Argument(format!(
                        "schedule has {} layers, model {layers}",
                        p.layers
                    )));
                }
                BudgetSchedule::from_params(*p)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModeKind {
    Vanilla,
    Cached {
        /// Text form, e.g. `value`, `singular:8`, `random:3`.
        identifier: String,
        schedule: ScheduleSpec,
        #[serde(default)]
        refresh: ProxyRefresh,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ModeKind,
}

impl ModeSpec {
    pub fn vanilla(name: &str) -> Self {
        ModeSpec {
            name: name.into(),
            kind: ModeKind::Vanilla,
        }
    }

    pub fn cached(name: &str, identifier: IdentifierKind, schedule: ScheduleSpec) -> Self {
        ModeSpec {
            name: name.into(),
            kind: ModeKind::Cached {
                identifier: identifier.to_string(),
                schedule,
                refresh: ProxyRefresh::Lazy,
            },
        }
    }

    fn resolve(&self, cfg: &ModelConfig) -> Result<(CacheMode, ProxyRefresh)> {
        Ok(match &self.kind {
            ModeKind::Vanilla => (CacheMode::Vanilla, ProxyRefresh::Lazy),
            ModeKind::Cached {
                identifier,
                schedule,
                refresh,
            } => {
                let identifier: IdentifierKind = identifier.parse()?;
                identifier.validate(cfg.d)?;
                (
                    CacheMode::Cached {
                        identifier,
                        schedule: schedule.build(cfg.layers)?,
                    },
                    *refresh,
                )
            }
        })
    }
}

fn default_policy() -> String {
    "fixed:2".into()
}

fn default_true() -> bool {
    true
}

/// A benchmark description, as read from `bench --matrix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMatrix {
    /// Seeded configuration to initialize when no weights file is given.
    #[serde(default)]
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub weights: Option<String>,
    pub seeds: Vec<u64>,
    pub prompt_len: usize,
    pub gen_len: usize,
    #[serde(default = "default_policy")]
    pub policy: String,
    pub modes: Vec<ModeSpec>,
    /// Measure logit divergence against dense passes on the same inputs.
    #[serde(default = "default_true")]
    pub divergence: bool,
    /// Run modes on separate threads.
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Attach identifier recall against the output-drift oracle to cached modes.
    #[serde(default)]
    pub recall: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDivergence {
    pub step: usize,
    /// Max over seeds and rows of `‖a_i − b_i‖ / ‖b_i‖`.
    pub max_rel: f64,
    /// Mean over seeds and rows.
    pub mean_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub name: String,
    pub mode: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub total_tokens: usize,
    pub wall_seconds: f64,
    pub tokens_per_second: f64,
    /// Mean warmup (first) step wall time.
    pub ttft_ms: f64,
    /// Mean wall time per step index over seeds.
    pub step_ms: Vec<f64>,
    pub mean_subsequent_step_ms: f64,
    pub flops: FlopCounts,
    /// Mean attention+FFN multiply-adds of a post-warmup step.
    pub post_warmup_attn_ffn_per_step: f64,
    pub dense_attn_ffn_per_step: f64,
    pub divergence: Vec<StepDivergence>,
    /// Generated tokens per seed.
    pub generated: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<RecallRow>,
    #[serde(skip)]
    pub traces: Vec<Vec<TraceRecord>>,
}

/// Relative row-wise logit error `‖a_i − b_i‖ / ‖b_i‖`: (max, mean).
pub fn relative_logit_error(a: &Matrix, b: &Matrix) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::Shape("logit shapes differ".into()));
    }
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for i in 0..a.rows() {
        let diff: Vec<f32> = a.row(i).iter().zip(b.row(i)).map(|(x, y)| x - y).collect();
        let e = norm(&diff) / norm(b.row(i)).max(f64::MIN_POSITIVE);
        max = max.max(e);
        sum += e;
    }
    Ok((
        max,
        if a.rows() > 0 {
            sum / a.rows() as f64
        } else {
            0.0
        },
    ))
}

type Bank = Arc<Vec<SingularProxy>>;

fn run_mode(
    model: &ModelWeights,
    matrix: &BenchMatrix,
    spec: &ModeSpec,
    policy: &DecodePolicy,
    bank: Option<Bank>,
) -> Result<BenchReport> {
    let cfg = model.config();
    let (mode, refresh) = spec.resolve(cfg)?;
    let opts = DecodeOptions {
        proxies: bank,
        refresh,
    };
    let mut step_sums: Vec<f64> = Vec::new();
    let mut step_counts: Vec<usize> = Vec::new();
    let mut div: Vec<StepDivergence> = Vec::new();
    let mut div_rows: Vec<usize> = Vec::new();
    let mut wall = 0.0;
    let mut total_tokens = 0;
    let mut generated = Vec::new();
    let mut traces = Vec::new();
    let mut flops = FlopCounts::default();
    let mut steps = 0;
    for &seed in &matrix.seeds {
        let prompt = random_prompt(cfg, matrix.prompt_len, seed);
        let start = Instant::now();
        let mut inner = 0.0f64;
        let out = decode_with(
            model,
            &prompt,
            matrix.gen_len,
            policy,
            mode.clone(),
            &opts,
            |ev| {
                let ms = ev.elapsed.as_secs_f64() * 1e3;
                if step_sums.len() <= ev.step {
                    step_sums.resize(ev.step + 1, 0.0);
                    step_counts.resize(ev.step + 1, 0);
                    div.resize(ev.step + 1, StepDivergence::default());
                    div_rows.resize(ev.step + 1, 0);
                }
                step_sums[ev.step] += ms;
                step_counts[ev.step] += 1;
                if matrix.divergence {
                    let t = Instant::now();
                    let dense = model.forward_full(ev.tokens)?.logits;
                    let (max, mean) = relative_logit_error(ev.logits, &dense)?;
                    let d = &mut div[ev.step];
                    d.step = ev.step;
                    d.max_rel = d.max_rel.max(max);
                    d.mean_rel += mean;
                    div_rows[ev.step] += 1;
                    inner += t.elapsed().as_secs_f64();
                }
                Ok(())
            },
        )?;
        wall += start.elapsed().as_secs_f64() - inner;
        total_tokens += matrix.gen_len;
        steps = steps.max(out.steps.len());
        let ledger = flop_count(cfg, &out.trace);
        flops += ledger.total();
        generated.push(out.tokens[matrix.prompt_len..].to_vec());
        traces.push(out.trace);
    }
    for (d, &n) in div.iter_mut().zip(&div_rows) {
        if n > 0 {
            d.mean_rel /= n as f64;
        }
    }
    let step_ms: Vec<f64> = step_sums
        .iter()
        .zip(&step_counts)
        .map(|(s, &c)| s / c.max(1) as f64)
        .collect();
    let (post_sum, post_n) = traces.iter().fold((0u64, 0usize), |(s, n), tr| {
        let ledger = flop_count(cfg, tr);
        let steps = ledger.steps();
        let post: u64 = (1..steps)
            .map(|t| ledger.step_total(t).attention_ffn())
            .sum();
        (s + post, n + steps.saturating_sub(1))
    });
    let n = matrix.prompt_len + matrix.gen_len;
    let dense = (0..cfg.layers)
        .map(|_| crate::flops::layer_compute(cfg, n, n).attention_ffn())
        .sum::<u64>() as f64;
    let later: Vec<f64> = step_ms.iter().skip(1).copied().collect();
    Ok(BenchReport {
        name: spec.name.clone(),
        mode: describe(&spec.kind),
        config_hash: config_hash(cfg),
        seeds: matrix.seeds.clone(),
        steps,
        total_tokens,
        wall_seconds: wall,
        tokens_per_second: if wall > 0.0 {
            total_tokens as f64 / wall
        } else {
            0.0
        },
        ttft_ms: step_ms.first().copied().unwrap_or(0.0),
        mean_subsequent_step_ms: if later.is_empty() {
            0.0
        } else {
            later.iter().sum::<f64>() / later.len() as f64
        },
        step_ms,
        flops,
        post_warmup_attn_ffn_per_step: if post_n > 0 {
            post_sum as f64 / post_n as f64
        } else {
            0.0
        },
        dense_attn_ffn_per_step: dense,
        divergence: if matrix.divergence { div } else { Vec::new() },
        generated,
        recall: None,
        traces,
    })
}

fn describe(kind: &ModeKind) -> String {
    match kind {
        ModeKind::Vanilla => "vanilla".into(),
        ModeKind::Cached {
            identifier,
            schedule,
            refresh,
        } => {
            let s = match schedule {
                ScheduleSpec::Uniform(r) => format!("uniform:{r}"),
                ScheduleSpec::Adaptive => "adaptive".into(),
                ScheduleSpec::Params(p) => format!(
                    "params:{}:{}:{}:{}:{}",
                    p.layers, p.peak_layer, p.rho_1, p.rho_p, p.rho_last
                ),
            };
            let r = match refresh {
                ProxyRefresh::Lazy => "",
                ProxyRefresh::Eager => ",eager",
            };
            format!("cached({identifier},{s}{r})")
        }
    }
}

/// One row of the cross-mode comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub total_flops: u64,
    pub attn_ffn_flops: u64,
    pub identify_flops: u64,
    pub attn_ffn_ratio_vs_vanilla: Option<f64>,
    pub tokens_per_second: f64,
    pub ttft_ms: f64,
    pub max_rel_logit_error: Option<f64>,
    pub tokens_match_vanilla: Option<bool>,
}

/// Mean overlap of the recomputed sets of two cached modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetOverlap {
    pub a: String,
    pub b: String,
    pub overlap: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Ascending total FLOPs.
    pub rows: Vec<ComparisonRow>,
    pub overlaps: Vec<SetOverlap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOutcome {
    pub reports: Vec<BenchReport>,
    pub comparison: Comparison,
}

/// `|I_a ∩ I_b| / max(|I_a|, |I_b|)` averaged over post-warmup records.
pub fn set_overlap(a: &[Vec<TraceRecord>], b: &[Vec<TraceRecord>]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (ta, tb) in a.iter().zip(b) {
        let index: HashMap<(usize, usize), &TraceRecord> =
            tb.iter().map(|r| ((r.step, r.layer), r)).collect();
        for ra in ta.iter().filter(|r| !r.warmup) {
            if let Some(rb) = index.get(&(ra.step, ra.layer)).filter(|r| !r.warmup) {
                let common = ra
                    .indices
                    .iter()
                    .filter(|i| rb.indices.binary_search(i).is_ok())
                    .count();
                sum += common as f64 / ra.indices.len().max(rb.indices.len()).max(1) as f64;
                n += 1;
            }
        }
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, n)
}

fn compare(reports: &[BenchReport], matrix: &BenchMatrix) -> Comparison {
    let vanilla = matrix
        .modes
        .iter()
        .zip(reports)
        .find(|(m, _)| m.kind == ModeKind::Vanilla)
        .map(|(_, r)| r);
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            name: r.name.clone(),
            total_flops: r.flops.total(),
            attn_ffn_flops: r.flops.attention_ffn(),
            identify_flops: r.flops.identify,
            attn_ffn_ratio_vs_vanilla: vanilla
                .map(|v| r.flops.attention_ffn() as f64 / v.flops.attention_ffn().max(1) as f64),
            tokens_per_second: r.tokens_per_second,
            ttft_ms: r.ttft_ms,
            max_rel_logit_error: (!r.divergence.is_empty())
                .then(|| r.divergence.iter().map(|d| d.max_rel).fold(0.0, f64::max)),
            tokens_match_vanilla: vanilla.map(|v| v.generated == r.generated),
        })
        .collect();
    rows.sort_by(|a, b| a.total_flops.cmp(&b.total_flops).then(a.name.cmp(&b.name)));
    let mut overlaps = Vec::new();
    for (i, (ma, ra)) in matrix.modes.iter().zip(reports).enumerate() {
        for (mb, rb) in matrix.modes.iter().zip(reports).skip(i + 1) {
            if let (ModeKind::Cached { schedule: sa, .. }, ModeKind::Cached { schedule: sb, .. }) =
                (&ma.kind, &mb.kind)
            {
                if sa == sb {
                    let (overlap, samples) = set_overlap(&ra.traces, &rb.traces);
                    overlaps.push(SetOverlap {
                        a: ra.name.clone(),
                        b: rb.name.clone(),
                        overlap,
                        samples,
                    });
                }
            }
        }
    }
    Comparison { rows, overlaps }
}

/// Runs every mode of `matrix` on identical prompts.
pub fn run_bench(model: &ModelWeights, matrix: &BenchMatrix) -> Result<BenchOutcome> {
    if matrix.modes.is_empty() || matrix.seeds.is_empty() {
        return Err(Error::Argument("bench matrix needs modes and seeds".into()));
    }
    let policy: DecodePolicy = matrix.policy.parse()?;
    let cfg = model.config();
    let mut banks: HashMap<usize, Bank> = HashMap::new();
    let mut mode_banks = Vec::new();
    for m in &matrix.modes {
        let bank = match m.resolve(cfg)?.0 {
            CacheMode::Cached {
                identifier: IdentifierKind::Singular(r),
                ..
            } => Some(match banks.get(&r) {
                Some(b) => b.clone(),
                None => {
                    let b = Arc::new(build_proxy_bank(model, r)?);
                    banks.insert(r, b.clone());
                    b
                }
            }),
            _ => None,
        };
        mode_banks.push(bank);
    }
    let reports: Vec<BenchReport> = if matrix.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = matrix
                .modes
                .iter()
                .zip(&mode_banks)
                .map(|(m, b)| {
                    let policy = &policy;
                    s.spawn(move || run_mode(model, matrix, m, policy, b.clone()))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .map_err(|_| Error::State("bench worker panicked".into()))?
                })
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        matrix
            .modes
            .iter()
            .zip(&mode_banks)
            .map(|(m, b)| run_mode(model, matrix, m, &policy, b.clone()))
            .collect::<Result<_>>()?
    };
    let mut reports = reports;
    if matrix.recall {
        attach_recall(model, matrix, &mut reports, &mode_banks)?;
    }
    let comparison = compare(&reports, matrix);
    Ok(BenchOutcome {
        reports,
        comparison,
    })
}

fn attach_recall(
    model: &ModelWeights,
    matrix: &BenchMatrix,
    reports: &mut [BenchReport],
    banks: &[Option<Bank>],
) -> Result<()> {
    let spec = RecallSpec::default();
    let mut pairs = Vec::new();
    for &seed in &matrix.seeds {
        pairs.extend(dense_pairs(model, &spec, seed)?);
    }
    let k = ((spec.ratio * (spec.prompt_len + spec.gen_len) as f64).ceil() as usize).max(1);
    for ((m, r), bank) in matrix.modes.iter().zip(reports.iter_mut()).zip(banks) {
        if let ModeKind::Cached { identifier, .. } = &m.kind {
            let kind: IdentifierKind = identifier.parse()?;
            let rows =
                identifier_recall(&pairs, &[kind], k, bank.as_deref().map(|b| b.as_slice()))?;
            r.recall = rows.into_iter().next();
        }
    }
    Ok(())
}

/// Which knob an ablation sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Rank,
    Rho,
    Identifier,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rank" => AblationAxis::Rank,
            "rho" => AblationAxis::Rho,
            "identifier" => AblationAxis::Identifier,
            _ => return Err(Error::Argument(format!("unknown ablation axis `{s}`"))),
        })
    }
}

/// Modes swept by an ablation on a model of width `d`, vanilla first.
pub fn ablation_modes(axis: AblationAxis, d: usize) -> Vec<ModeSpec> {
    let mut modes = vec![ModeSpec::vanilla("vanilla")];
    match axis {
        AblationAxis::Rank => {
            let ranks: Vec<usize> = [2, 4, 8, 16, 32]
                .iter()
                .map(|f| d / f)
                .filter(|&r| r >= 1)
                .collect();
            for r in ranks {
                modes.push(ModeSpec::cached(
                    &format!("singular:{r}"),
                    IdentifierKind::Singular(r),
                    ScheduleSpec::Adaptive,
                ));
            }
        }
        AblationAxis::Rho => {
            for rho in [0.1, 0.25, 0.5] {
                modes.push(ModeSpec::cached(
                    &format!("uniform:{rho}"),
                    IdentifierKind::Singular((d / 32).max(1)),
                    ScheduleSpec::Uniform(rho),
                ));
            }
            modes.push(ModeSpec::cached(
                "adaptive",
                IdentifierKind::Singular((d / 32).max(1)),
                ScheduleSpec::Adaptive,
            ));
        }
        AblationAxis::Identifier => {
            for kind in [
                IdentifierKind::ValueFull,
                IdentifierKind::Singular((d / 32).max(1)),
                IdentifierKind::Query,
                IdentifierKind::Key,
                IdentifierKind::AttnInput,
                IdentifierKind::AttnOutput,
                IdentifierKind::Random(0),
            ] {
                modes.push(ModeSpec::cached(
                    &kind.to_string(),
                    kind,
                    ScheduleSpec::Adaptive,
                ));
            }
        }
    }
    modes
}

/// Copy of a report with every wall-clock field zeroed.
pub fn without_timing(r: &BenchReport) -> BenchReport {
    let mut r = r.clone();
    r.wall_seconds = 0.0;
    r.tokens_per_second = 0.0;
    r.ttft_ms = 0.0;
    r.mean_subsequent_step_ms = 0.0;
    r.step_ms.iter_mut().for_each(|x| *x = 0.0);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn matrix(modes: Vec<ModeSpec>) -> BenchMatrix {
        BenchMatrix {
            config: None,
            weights: None,
            seeds: vec![1, 2],
            prompt_len: 8,
            gen_len: 8,
            policy: "fixed:2".into(),
            modes,
            divergence: true,
            parallel: true,
            recall: false,
        }
    }

    #[test]
    fn full_budget_exceeds_vanilla_by_identify_only() {
        let m = init_weights(&ModelConfig::tiny()).unwrap();
        let mx = matrix(vec![
            ModeSpec::vanilla("v"),
            ModeSpec::cached("c", IdentifierKind::Singular(4), ScheduleSpec::Uniform(1.0)),
        ]);
        let out = run_bench(&m, &mx).unwrap();
        let (v, c) = (&out.reports[0], &out.reports[1]);
        assert_eq!(v.generated, c.generated);
        assert_eq!(c.flops.total() - v.flops.total(), c.flops.identify);
        assert_eq!(v.flops.identify, 0);
        assert!(c.divergence.iter().all(|d| d.max_rel == 0.0));
    }

    #[test]
    fn adaptive_and_matching_uniform_spend_alike() {
        let cfg = ModelConfig {
            layers: 4,
            ..ModelConfig::tiny()
        };
        let m = init_weights(&cfg).unwrap();
        let n = 16;
        let adaptive = BudgetSchedule::default_adaptive(4).unwrap();
        let ks: usize = (1..=4).map(|l| adaptive.tokens_for_layer(l, n)).sum();
        let uniform = BudgetSchedule::uniform(4, ks as f64 / (4 * n) as f64).unwrap();
        let ku: usize = (1..=4).map(|l| uniform.tokens_for_layer(l, n)).sum();
        assert_eq!(ks, ku);
        let mx = matrix(vec![
            ModeSpec::cached("a", IdentifierKind::ValueFull, ScheduleSpec::Adaptive),
            ModeSpec::cached(
                "u",
                IdentifierKind::ValueFull,
                ScheduleSpec::Uniform(ks as f64 / (4 * n) as f64),
            ),
        ]);
        let out = run_bench(&m, &mx).unwrap();
        let (a, u) = (&out.reports[0], &out.reports[1]);
        let per_layer = |r: &BenchReport, l: usize| {
            r.traces[0]
                .iter()
                .find(|t| !t.warmup && t.layer == l)
                .unwrap()
                .k
        };
        assert_ne!(per_layer(a, 0), per_layer(u, 0));
        assert_eq!(a.flops.attention_ffn(), u.flops.attention_ffn());
    }

    #[test]
    fn comparison_orders_by_flops() {
        let m = init_weights(&ModelConfig::tiny()).unwrap();
        let mx = matrix(vec![
            ModeSpec::vanilla("v"),
            ModeSpec::cached(
                "s",
                IdentifierKind::Singular(1),
                ScheduleSpec::Uniform(0.25),
            ),
            ModeSpec::cached("f", IdentifierKind::ValueFull, ScheduleSpec::Uniform(0.25)),
        ]);
        let out = run_bench(&m, &mx).unwrap();
        assert_eq!(out.reports.len(), 3);
        let flops: Vec<u64> = out.comparison.rows.iter().map(|r| r.total_flops).collect();
        assert!(flops.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(out.comparison.overlaps.len(), 1);
    }

    #[test]
    fn matrix_json_round_trip() {
        let text = r#"{"seeds":[0],"prompt_len":4,"gen_len":4,
            "modes":[{"name":"v","mode":"vanilla"},
                     {"name":"c","mode":"cached","identifier":"singular:2","schedule":{"uniform":0.5}},
                     {"name":"a","mode":"cached","identifier":"value","schedule":"adaptive","refresh":"eager"}]}"#;
        let mx: BenchMatrix = serde_json::from_str(text).unwrap();
        assert_eq!(mx.policy, "fixed:2");
        assert!(mx.parallel);
        assert_eq!(mx.modes.len(), 3);
        let back: BenchMatrix = serde_json::from_str(&serde_json::to_string(&mx).unwrap()).unwrap();
        assert_eq!(back, mx);
    }
}
