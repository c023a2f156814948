//! `dlmcache` command-line driver.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dlmcache::bench::{ablation_modes, run_bench, AblationAxis, BenchMatrix, BenchOutcome};
use dlmcache::budget::{
    fit_schedule_with, profile_drift, BudgetSchedule, DriftProfile, DriftTap, ProfileSpec,
    DEFAULT_FLOOR,
};
use dlmcache::cache::{build_proxy_bank, CacheMode, ProxyRefresh};
use dlmcache::decoder::{decode_with, DecodeOptions, DecodePolicy};
use dlmcache::flops::flop_count;
use dlmcache::io::{load_weights, parse_tokens, save_weights, write_trace};
use dlmcache::model::{init_weights, ModelConfig, ModelWeights};
use dlmcache::proxy::IdentifierKind;
use dlmcache::verify::{render_table, run_suite, Suite};

#[derive(Parser)]
#[command(
    name = "dlmcache",
    version,
    about = "Proxy-guided partial layer caching for masked-diffusion decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize seeded weights and write a weight container.
    GenWeights {
        /// `default`, `tiny`, or a JSON config file.
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode from a prompt and print the final token sequence.
    Decode {
        #[arg(long)]
        weights: PathBuf,
        /// Whitespace-separated token ids, or `@path` to read them from a file.
        #[arg(long, allow_hyphen_values = true)]
        prompt_tokens: String,
        #[arg(long)]
        gen_len: usize,
        #[arg(long, default_value = "vanilla", value_parser = ["vanilla", "cached"])]
        mode: String,
        /// value, singular[:R], query, key, attn-input, attn-output or random[:S].
        #[arg(long, default_value = "singular")]
        identifier: String,
        /// Rank for a bare `singular` identifier; defaults to d/32.
        #[arg(long)]
        rank: Option<usize>,
        /// `adaptive`, `uniform:RHO`, or a schedule JSON file.
        #[arg(long, default_value = "adaptive")]
        schedule: String,
        /// `fixed:C` or `threshold:T[:B]`.
        #[arg(long, default_value = "fixed:2", conflicts_with = "steps")]
        policy: String,
        /// Decode in T steps, committing ceil(gen_len / T) positions per step.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eager_refresh: bool,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Measure per-layer token drift on dense decodes.
    ProfileDrift {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        tau: f64,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        /// Number of seeded prompts.
        #[arg(long, default_value_t = 4)]
        samples: u64,
        #[arg(long, default_value_t = 32)]
        prompt_len: usize,
        #[arg(long, default_value_t = 64)]
        gen_len: usize,
        #[arg(long, default_value = "layer-input", value_parser = ["layer-input", "attn-output", "layer-output"])]
        tap: String,
        /// CSV output; metadata goes to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a layer budget schedule to a drift profile.
    FitBudget {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FLOOR)]
        floor: f64,
        #[arg(long, default_value = "least-squares", value_parser = ["least-squares", "anchor"])]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the bound checks.
    Verify {
        #[arg(long, default_value = "all", value_parser = ["all", "svd", "ffn", "attn", "props", "anisotropy"])]
        suite: String,
        /// Weights for the model-dependent suites; the seeded default model otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Run a benchmark matrix.
    Bench {
        #[arg(long)]
        matrix: PathBuf,
        /// Overrides the matrix's weights or config.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// JSON output; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis against vanilla decoding.
    Ablate {
        #[arg(long, value_parser = ["rank", "rho", "identifier"])]
        axis: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        seeds: u64,
        #[arg(long, default_value_t = 32)]
        prompt_len: usize,
        #[arg(long, default_value_t = 32)]
        gen_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Raised when a check ran and failed.
#[derive(Debug)]
struct VerificationFailed;

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> ExitCode {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return ExitCode::from(1);
    }
    match e.downcast_ref::<dlmcache::Error>() {
        Some(dlmcache::Error::Argument(_) | dlmcache::Error::Input(_)) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenWeights { config, seed, out } => gen_weights(&config, seed, &out),
        Command::Decode {
            weights,
            prompt_tokens,
            gen_len,
            mode,
            identifier,
            rank,
            schedule,
            policy,
            steps,
            eager_refresh,
            trace_out,
        } => {
            let model = load(&weights)?;
            let prompt = read_prompt(&prompt_tokens)?;
            let policy = match steps {
                Some(0) => bail!(dlmcache::Error::Argument(
                    "--steps must be at least 1".into()
                )),
                Some(t) => DecodePolicy::fixed(gen_len.div_ceil(t).max(1)),
                None => policy.parse()?,
            };
            let mode = match mode.as_str() {
                "vanilla" => CacheMode::Vanilla,
                _ => CacheMode::Cached {
                    identifier: parse_identifier(&identifier, rank, model.config())?,
                    schedule: parse_schedule(&schedule, model.config().layers)?,
                },
            };
            let refresh = if eager_refresh {
                ProxyRefresh::Eager
            } else {
                ProxyRefresh::Lazy
            };
            decode_cmd(
                &model,
                &prompt,
                gen_len,
                &policy,
                mode,
                refresh,
                trace_out.as_deref(),
            )
        }
        Command::ProfileDrift {
            weights,
            tau,
            steps,
            samples,
            prompt_len,
            gen_len,
            tap,
            out,
        } => {
            let model = load(&weights)?;
            let tap = match tap.as_str() {
                "attn-output" => DriftTap::AttnOutput,
                "layer-output" => DriftTap::LayerOutput,
                _ => DriftTap::LayerInput,
            };
            let spec = ProfileSpec {
                seeds: (0..samples).collect(),
                prompt_len,
                gen_len,
                steps,
                tau,
                tap,
            };
            let profile = profile_drift(&model, &spec)?;
            let mut csv =
                fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            profile.write_csv(&mut csv)?;
            fs::write(sidecar_path(&out), profile.sidecar_json()?)?;
            for (l, m) in profile.layer_means().iter().enumerate() {
                eprintln!("layer {:>2}: mean drifting fraction {m:.4}", l + 1);
            }
            Ok(())
        }
        Command::FitBudget {
            profile,
            floor,
            method,
            out,
        } => {
            let csv = fs::File::open(&profile)
                .with_context(|| format!("opening {}", profile.display()))?;
            let side = sidecar_path(&profile);
            let meta =
                fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
            let p = DriftProfile::read(BufReader::new(csv), &meta)?;
            let fit = fit_schedule_with(&p, floor, method.parse()?)?;
            if fit.flat_warning {
                eprintln!("warning: profile shows no drift; wrote a flat floor schedule");
            }
            fs::write(&out, fit.schedule.to_json()?)?;
            let rho: Vec<String> = fit
                .schedule
                .evaluated()
                .iter()
                .map(|r| format!("{r:.4}"))
                .collect();
            eprintln!("rho per layer: {}", rho.join(" "));
            Ok(())
        }
        Command::Verify {
            suite,
            weights,
            json_out,
        } => {
            let suite: Suite = suite.parse()?;
            let model = weights.as_deref().map(load).transpose()?;
            let report = run_suite(suite, model.as_ref())?;
            print!("{}", render_table(&report));
            if let Some(p) = json_out {
                fs::write(p, serde_json::to_string_pretty(&report)?)?;
            }
            if !report.passed {
                return Err(VerificationFailed.into());
            }
            Ok(())
        }
        Command::Bench {
            matrix,
            weights,
            out,
        } => {
            let text = fs::read_to_string(&matrix)
                .with_context(|| format!("reading {}", matrix.display()))?;
            let mx: BenchMatrix = serde_json::from_str(&text)
                .map_err(|e| dlmcache::Error::Input(format!("bench matrix: {e}")))?;
            let model = match (&weights, &mx.weights, &mx.config) {
                (Some(w), _, _) => load(w)?,
                (None, Some(w), _) => load(Path::new(w))?,
                (None, None, Some(c)) => init_weights(c)?,
                (None, None, None) => init_weights(&ModelConfig::default())?,
            };
            let outcome = run_bench(&model, &mx)?;
            eprint!("{}", comparison_table(&outcome));
            emit_json(&outcome, out.as_deref())
        }
        Command::Ablate {
            axis,
            weights,
            seeds,
            prompt_len,
            gen_len,
            out,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let model = match &weights {
                Some(w) => load(w)?,
                None => init_weights(&ModelConfig::default())?,
            };
            let mx = BenchMatrix {
                config: None,
                weights: None,
                seeds: (0..seeds).collect(),
                prompt_len,
                gen_len,
                policy: "fixed:2".into(),
                modes: ablation_modes(axis, model.config().d),
                divergence: true,
                parallel: true,
                recall: axis != AblationAxis::Rho,
            };
            let outcome = run_bench(&model, &mx)?;
            print!("{}", comparison_table(&outcome));
            if let Some(p) = out {
                emit_json(&outcome, Some(&p))?;
            }
            Ok(())
        }
    }
}

fn gen_weights(config: &str, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        "default" => ModelConfig::default(),
        "tiny" => ModelConfig::tiny(),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            serde_json::from_str(&text)
                .map_err(|e| dlmcache::Error::Input(format!("config: {e}")))?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = init_weights(&cfg)?;
    save_weights(out, &model)?;
    eprintln!(
        "wrote {} ({})",
        out.display(),
        dlmcache::io::config_hash(&cfg)
    );
    Ok(())
}

fn load(path: &Path) -> Result<ModelWeights> {
    load_weights(path).with_context(|| format!("loading weights from {}", path.display()))
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_prompt(arg: &str) -> Result<Vec<usize>> {
    let text = match arg.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
        None => arg.to_string(),
    };
    Ok(parse_tokens(&text)?)
}

fn parse_identifier(text: &str, rank: Option<usize>, cfg: &ModelConfig) -> Result<IdentifierKind> {
    let kind = match text {
        "singular" => IdentifierKind::Singular(rank.unwrap_or((cfg.d / 32).max(1))),
        "oracle" => bail!(dlmcache::Error::Argument(
            "the oracle identifier is evaluation-only".into()
        )),
        t => {
            if rank.is_some() {
                bail!(dlmcache::Error::Argument(
                    "--rank applies to a bare `singular` identifier".into()
                ));
            }
            t.parse()?
        }
    };
    kind.validate(cfg.d)?;
    Ok(kind)
}

fn parse_schedule(text: &str, layers: usize) -> Result<BudgetSchedule> {
    if text == "adaptive" {
        return Ok(BudgetSchedule::default_adaptive(layers)?);
    }
    if let Some(r) = text.strip_prefix("uniform:") {
        let rho: f64 = r
            .parse()
            .map_err(|_| dlmcache::Error::Argument(format!("bad ratio `{r}`")))?;
        return Ok(BudgetSchedule::uniform(layers, rho)?);
    }
    let json = fs::read_to_string(text).with_context(|| format!("reading schedule {text}"))?;
    let s = BudgetSchedule::from_json(&json)?;
    if s.layers() != layers {
        bail!(dlmcache::Error::Argument(format!(
            "schedule has {} layers, model {layers}",
            s.layers()
        )));
    }
    Ok(s)
}

fn decode_cmd(
    model: &ModelWeights,
    prompt: &[usize],
    gen_len: usize,
    policy: &DecodePolicy,
    mode: CacheMode,
    refresh: ProxyRefresh,
    trace_out: Option<&Path>,
) -> Result<()> {
    let proxies = match &mode {
        CacheMode::Cached {
            identifier: IdentifierKind::Singular(r),
            ..
        } => Some(std::sync::Arc::new(build_proxy_bank(model, *r)?)),
        _ => None,
    };
    let opts = DecodeOptions { proxies, refresh };
    let out = decode_with(model, prompt, gen_len, policy, mode, &opts, |ev| {
        log::info!(
            "step {} committed {} in {:?}",
            ev.step,
            ev.commits.len(),
            ev.elapsed
        );
        Ok(())
    })?;
    let text: Vec<String> = out.tokens.iter().map(|t| t.to_string()).collect();
    println!("{}", text.join(" "));
    let ledger = flop_count(model.config(), &out.trace);
    let total = ledger.total();
    let micros: u64 = out.steps.iter().map(|s| s.micros).sum();
    eprintln!(
        "steps {}  time {:.1} ms  attn+ffn {}  identify {}  total {}",
        out.steps.len(),
        micros as f64 / 1e3,
        total.attention_ffn(),
        total.identify,
        total.total()
    );
    if let Some(p) = trace_out {
        let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_trace(&mut f, &out.trace)?;
        f.flush()?;
    }
    Ok(())
}

fn emit_json(outcome: &BenchOutcome, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(outcome)?;
    match out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn comparison_table(outcome: &BenchOutcome) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>14} {:>9} {:>12} {:>9} {:>10} {:>8}",
        "mode", "total flops", "vs dense", "max rel err", "tok/s", "ttft ms", "recall"
    );
    for row in &outcome.comparison.rows {
        let recall = outcome
            .reports
            .iter()
            .find(|r| r.name == row.name)
            .and_then(|r| r.recall.as_ref())
            .map_or("-".to_string(), |r| format!("{:.3}", r.recall));
        let _ = writeln!(
            s,
            "{:<28} {:>14} {:>9} {:>12} {:>9.1} {:>10.2} {:>8}",
            row.name,
            row.total_flops,
            row.attn_ffn_ratio_vs_vanilla
                .map_or("-".into(), |r| format!("{r:.3}")),
            row.max_rel_logit_error
                .map_or("-".into(), |e| format!("{e:.2e}")),
            row.tokens_per_second,
            row.ttft_ms,
            recall
        );
    }
    for o in &outcome.comparison.overlaps {
        let _ = writeln!(
            s,
            "overlap {} / {}: {:.3} over {} records",
            o.a, o.b, o.overlap, o.samples
        );
    }
    s
}
