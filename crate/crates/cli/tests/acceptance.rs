//! Acceptance criteria. Runs without the libtest harness so each criterion
//! prints one `criterion N: PASS|FAIL` line; criteria run one after another
//! so every runtime limit is measured alone.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use dlmcache::bench::relative_logit_error;
use dlmcache::budget::{
    fit_schedule, rho_of_layer, BudgetSchedule, DriftProfile, DriftTap, ScheduleParams,
};
use dlmcache::cache::{build_proxy_bank, CacheMode, LayerCache, Session};
use dlmcache::decoder::{
    confidence_select, decode, decode_with, random_prompt, DecodeOptions, DecodePolicy, DecodeState,
};
use dlmcache::flops::{flop_count, identifier_projection, identify_cost, layer_compute};
use dlmcache::model::{init_weights, ModelConfig, ModelWeights};
use dlmcache::proxy::IdentifierKind;
use dlmcache::verify::{
    anisotropy_suite, attention_suite, dense_pairs, ffn_suite, identifier_recall, props_suite,
    svd_suite, RecallSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn default_model() -> &'static ModelWeights {
    static M: OnceLock<ModelWeights> = OnceLock::new();
    M.get_or_init(|| init_weights(&ModelConfig::default()).unwrap())
}

fn criterion_01_low_rank_divergence_bound() -> (bool, String) {
    let start = Instant::now();
    let reports = svd_suite(10, 100).unwrap();
    let elapsed = start.elapsed();
    let theorem: Vec<_> = reports
        .iter()
        .filter(|r| !r.name.contains("lemma"))
        .collect();
    assert_eq!(theorem.len(), 3);
    let trials: usize = theorem.iter().map(|r| r.trials).sum();
    let violations: usize = theorem.iter().map(|r| r.violations).sum();
    let ok = trials == 3 * 10 * 100 && violations == 0 && elapsed < Duration::from_secs(30);
    (
        ok,
        format!("{trials} trials, {violations} violations, {elapsed:.2?}"),
    )
}

fn criterion_02_projection_lemma_and_bernoulli() -> (bool, String) {
    let start = Instant::now();
    let reports = props_suite(10_000).unwrap();
    let elapsed = start.elapsed();
    let by = |name: &str| reports.iter().find(|r| r.name == name).unwrap();
    let (bern, proj, lemma) = (by("bernoulli"), by("projection_norm"), by("lemma_general"));
    let ok = bern.violations == 0
        && proj.violations == 0
        && lemma.violations == 0
        && proj.trials >= 10_000
        && lemma.trials >= 10_000
        && elapsed < Duration::from_secs(60);
    (
        ok,
        format!(
            "bernoulli {}/{}, projection {}/{}, lemma {}/{} violations/trials, {elapsed:.2?}",
            bern.violations,
            bern.trials,
            proj.violations,
            proj.trials,
            lemma.violations,
            lemma.trials
        ),
    )
}

fn criterion_03_attention_and_ffn_bounds() -> (bool, String) {
    let model = default_model();
    let start = Instant::now();
    let attn = attention_suite(model, 0).unwrap();
    let ffn = ffn_suite(model, 1000).unwrap();
    let elapsed = start.elapsed();
    let layers = model.config().layers;
    let ok = attn.violations == 0
        && ffn.violations == 0
        && attn.trials > 0
        && ffn.trials == 1000 * layers
        && elapsed < Duration::from_secs(120);
    (
        ok,
        format!(
            "attention {}/{} and ffn {}/{} violations/trials, {elapsed:.2?}",
            attn.violations, attn.trials, ffn.violations, ffn.trials
        ),
    )
}

fn criterion_04_full_budget_matches_vanilla() -> (bool, String) {
    let model = default_model();
    let cfg = model.config();
    let start = Instant::now();
    let prompt = random_prompt(cfg, 16, 4);
    let policy = DecodePolicy::fixed(1);
    let mode = CacheMode::Cached {
        identifier: IdentifierKind::Singular(cfg.d / 32),
        schedule: BudgetSchedule::uniform(cfg.layers, 1.0).unwrap(),
    };
    let mut worst = 0.0f64;
    let cached = decode_with(
        model,
        &prompt,
        32,
        &policy,
        mode,
        &DecodeOptions::default(),
        |ev| {
            let dense = model.forward_full(ev.tokens)?.logits;
            worst = worst.max(relative_logit_error(ev.logits, &dense)?.0);
            Ok(())
        },
    )
    .unwrap();
    let vanilla = decode(model, &prompt, 32, &policy, CacheMode::Vanilla).unwrap();
    let elapsed = start.elapsed();
    let ok = cached.steps.len() == 32
        && worst <= 1e-4
        && cached.tokens == vanilla.tokens
        && elapsed < Duration::from_secs(60);
    (
        ok,
        format!(
            "{} steps, max relative logit error {worst:.3e}, tokens identical {}, {elapsed:.2?}",
            cached.steps.len(),
            cached.tokens == vanilla.tokens
        ),
    )
}

fn criterion_05_sparsity_contract() -> (bool, String) {
    let model = default_model();
    let cfg = model.config();
    let mut checked = 0usize;
    let mut broken = Vec::new();
    let kinds = [
        IdentifierKind::Singular(cfg.d / 32),
        IdentifierKind::ValueFull,
    ];
    for kind in kinds {
        let mode = CacheMode::Cached {
            identifier: kind,
            schedule: BudgetSchedule::default_adaptive(cfg.layers).unwrap(),
        };
        let mut session = Session::new(model, mode).unwrap();
        let policy = DecodePolicy::fixed(2);
        let mut state = DecodeState::new(&random_prompt(cfg, 16, 9), 32, cfg).unwrap();
        while !state.is_done() {
            let t = state.step();
            let before: Vec<LayerCache> = session.caches().to_vec();
            let logits = session.forward(state.tokens()).unwrap();
            if t > 0 {
                for (l, (b, a)) in before.iter().zip(session.caches()).enumerate() {
                    let rec = session
                        .trace()
                        .iter()
                        .find(|r| r.step == t && r.layer == l)
                        .unwrap();
                    for i in 0..a.len() {
                        if rec.indices.binary_search(&i).is_ok() {
                            continue;
                        }
                        checked += 1;
                        let same = a.key_cache.row(i) == b.key_cache.row(i)
                            && a.value_cache.row(i) == b.value_cache.row(i)
                            && a.output_cache.row(i) == b.output_cache.row(i)
                            && a.proxy_cache.row(i) == b.proxy_cache.row(i);
                        if !same {
                            broken.push((kind, t, l, i));
                        }
                    }
                }
            }
            let picks = confidence_select(&logits, &state, &policy, t as u64);
            state.commit(&picks).unwrap();
            session.mark_changed(&picks.iter().map(|p| p.0).collect::<Vec<_>>());
        }
    }
    let ok = broken.is_empty() && checked > 0;
    (
        ok,
        format!("{checked} untouched rows checked, {} changed", broken.len()),
    )
}

fn criterion_06_flop_scaling() -> (bool, String) {
    let model = default_model();
    let cfg = model.config();
    let (d, n) = (cfg.d, 64);
    let r = d / 32;
    let schedule = BudgetSchedule::default_adaptive(cfg.layers).unwrap();
    assert_eq!(schedule.params().rho_p, 0.25);
    let prompt = random_prompt(cfg, 32, 3);
    let policy = DecodePolicy::fixed(2);
    let mode = CacheMode::Cached {
        identifier: IdentifierKind::Singular(r),
        schedule,
    };
    let cached = decode(model, &prompt, 32, &policy, mode).unwrap();
    let vanilla = decode(model, &prompt, 32, &policy, CacheMode::Vanilla).unwrap();
    let cl = flop_count(cfg, &cached.trace);
    let vl = flop_count(cfg, &vanilla.trace);
    let dense_step: u64 = (0..cfg.layers)
        .map(|_| layer_compute(cfg, n, n).attention_ffn())
        .sum();
    let mut worst = 0.0f64;
    for t in 1..cl.steps() {
        assert_eq!(vl.step_total(t).attention_ffn(), dense_step);
        worst = worst.max(cl.step_total(t).attention_ffn() as f64 / dense_step as f64);
    }
    let singular = identify_cost(cfg, IdentifierKind::Singular(r), n) as f64;
    let value = identify_cost(cfg, IdentifierKind::ValueFull, n) as f64;
    let ledger_identify = cl.step_total(1).identify as f64 / cfg.layers as f64;
    let ratio = singular / value;
    let ok = cl.steps() > 1
        && worst <= 0.30
        && ledger_identify == singular
        && identifier_projection(cfg, IdentifierKind::Singular(r), n) * (d / r) as u64
            == identifier_projection(cfg, IdentifierKind::ValueFull, n)
        && ratio <= r as f64 / d as f64 + 0.01;
    (
        ok,
        format!(
            "worst post-warmup attn+ffn ratio {worst:.4}, identify ratio {ratio:.5} (r/d = {:.5})",
            r as f64 / d as f64
        ),
    )
}

fn criterion_07_identifier_recall_ordering() -> (bool, String) {
    let model = default_model();
    let cfg = model.config();
    let spec = RecallSpec::default();
    let r = cfg.d / 2;
    let bank = Arc::new(build_proxy_bank(model, r).unwrap());
    let k = (spec.ratio * (spec.prompt_len + spec.gen_len) as f64).ceil() as usize;
    let kinds = [
        IdentifierKind::ValueFull,
        IdentifierKind::Singular(r),
        IdentifierKind::Random(5),
    ];
    let mut sums = [0.0f64; 3];
    let seeds = 5;
    for seed in 0..seeds {
        let pairs = dense_pairs(model, &spec, 100 + seed).unwrap();
        let rows = identifier_recall(&pairs, &kinds, k, Some(bank.as_slice())).unwrap();
        for (s, row) in sums.iter_mut().zip(&rows) {
            *s += row.recall;
        }
    }
    let [value, singular, random] = sums.map(|s| s / seeds as f64);
    let ok = value - random >= 0.15 && singular - random >= 0.15 && singular >= 0.8 * value;
    (
        ok,
        format!("recall@{k}: value {value:.3}, singular:{r} {singular:.3}, random {random:.3}"),
    )
}

fn criterion_08_budget_schedule_exactness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_anchor = 0.0f64;
    let mut worst_fit = (0usize, 0.0f64);
    for _ in 0..100 {
        let layers = rng.random_range(3..64usize);
        let rho_p = rng.random_range(0.05..=1.0);
        let p = ScheduleParams {
            layers,
            peak_layer: rng.random_range(2..layers),
            rho_1: rho_p * rng.random_range(0.01..=1.0),
            rho_p,
            rho_last: rho_p * rng.random_range(0.01..=1.0),
        };
        let s = BudgetSchedule::from_params(p).unwrap();
        for (l, want) in [(1, p.rho_1), (p.peak_layer, p.rho_p), (layers, p.rho_last)] {
            worst_anchor = worst_anchor.max((s.rho(l) - want).abs());
        }
    }
    for _ in 0..100 {
        let layers = rng.random_range(5..40usize);
        let rho_p = rng.random_range(0.15..0.9);
        let p = ScheduleParams {
            layers,
            peak_layer: rng.random_range(2..layers),
            rho_1: rng.random_range(0.03..rho_p),
            rho_p,
            rho_last: rng.random_range(0.03..rho_p),
        };
        let steps = 4;
        let fractions = (1..=layers)
            .map(|l| {
                (0..steps)
                    .map(|_| {
                        (rho_of_layer(&p, l) + rng.random_range(-0.005..0.005)).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        let profile = DriftProfile {
            tau: 0.9,
            fractions,
            seeds: vec![0],
            n_tokens: 64,
            steps,
            tap: DriftTap::LayerInput,
            config_hash: String::new(),
        };
        let got = *fit_schedule(&profile, 0.02).unwrap().schedule.params();
        let layer_err = got.peak_layer.abs_diff(p.peak_layer);
        let rho_err = [
            (got.rho_1 - p.rho_1).abs(),
            (got.rho_p - p.rho_p).abs(),
            (got.rho_last - p.rho_last).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        worst_fit = (worst_fit.0.max(layer_err), worst_fit.1.max(rho_err));
    }
    let ok = worst_anchor <= 1e-6 && worst_fit.0 <= 1 && worst_fit.1 <= 0.02;
    (
        ok,
        format!(
            "anchor error {worst_anchor:.2e}, fit peak error {} layer(s), ratio error {:.4}",
            worst_fit.0, worst_fit.1
        ),
    )
}

fn criterion_09_anisotropy_construction() -> (bool, String) {
    let reports = anisotropy_suite(20).unwrap();
    let held = reports.iter().filter(|r| r.holds == Some(true)).count();
    let norms_ok = reports
        .iter()
        .all(|r| (r.common_norm - 1.0).abs() < 1e-6 && (r.mean_signal_norm - 2.0).abs() < 0.25);
    let ok = reports.len() == 20 && held == 20 && norms_ok;
    (
        ok,
        format!(
            "{held}/{} seeds with output cosine above value cosine",
            reports.len()
        ),
    )
}

fn cli(args: &[&str], dir: &Path) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dlmcache"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn dlmcache");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        eprintln!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    (out.status.code() == Some(0), stdout)
}

fn criterion_10_cli_smoke() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut steps = Vec::new();
    steps.push((
        "gen-weights",
        cli(
            &[
                "gen-weights",
                "--config",
                "default",
                "--seed",
                "0",
                "--out",
                "w.bin",
            ],
            dir.path(),
        ),
    ));
    let prompt = "5 17 42 99 3 8 120 64 7 7 200 13 1 2 3 4";
    for (mode, extra) in [
        ("vanilla", vec![]),
        (
            "cached",
            vec!["--identifier", "value", "--schedule", "uniform:0.25"],
        ),
        (
            "cached",
            vec![
                "--identifier",
                "singular",
                "--rank",
                "8",
                "--trace-out",
                "trace.jsonl",
            ],
        ),
    ] {
        let mut args = vec![
            "decode",
            "--weights",
            "w.bin",
            "--prompt-tokens",
            prompt,
            "--gen-len",
            "16",
            "--mode",
            mode,
        ];
        args.extend(extra);
        steps.push(("decode", cli(&args, dir.path())));
    }
    std::fs::write(
        dir.path().join("matrix.json"),
        r#"{"weights":"w.bin","seeds":[0],"prompt_len":16,"gen_len":16,
            "modes":[{"name":"vanilla","mode":"vanilla"},
                     {"name":"value","mode":"cached","identifier":"value","schedule":"adaptive"},
                     {"name":"singular","mode":"cached","identifier":"singular:8","schedule":"adaptive"}]}"#,
    )
    .unwrap();
    steps.push((
        "bench",
        cli(
            &["bench", "--matrix", "matrix.json", "--out", "bench.json"],
            dir.path(),
        ),
    ));
    steps.push(("verify", cli(&["verify", "--weights", "w.bin"], dir.path())));
    let elapsed = start.elapsed();
    let bench: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("bench.json")).unwrap_or_default(),
    )
    .unwrap_or_default();
    let reports = bench["reports"].as_array().map_or(0, |a| a.len());
    let decoded = steps
        .iter()
        .filter(|(n, _)| *n == "decode")
        .all(|(_, (_, out))| out.split_whitespace().count() == 32);
    let failed: Vec<&str> = steps
        .iter()
        .filter(|(_, (ok, _))| !ok)
        .map(|(n, _)| *n)
        .collect();
    let ok = failed.is_empty() && decoded && reports == 3 && elapsed < Duration::from_secs(300);
    (
        ok,
        format!("failed steps {failed:?}, {reports} bench reports, {elapsed:.2?}"),
    )
}

type Criterion = fn() -> (bool, String);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        criterion_01_low_rank_divergence_bound,
        criterion_02_projection_lemma_and_bernoulli,
        criterion_03_attention_and_ffn_bounds,
        criterion_04_full_budget_matches_vanilla,
        criterion_05_sparsity_contract,
        criterion_06_flop_scaling,
        criterion_07_identifier_recall_ordering,
        criterion_08_budget_schedule_exactness,
        criterion_09_anisotropy_construction,
        criterion_10_cli_smoke,
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let (ok, detail) = catch_unwind(AssertUnwindSafe(c)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {}: {} ({detail})",
            i + 1,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed += 1;
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
