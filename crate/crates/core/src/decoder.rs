//! Confidence-based iterative unmasking.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheMode, Session, TraceRecord};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ModelConfig, ModelWeights};
use crate::proxy::SingularProxy;

/// Token sequence being denoised: prompt followed by the generation region.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    tokens: Vec<usize>,
    committed: Vec<bool>,
    prompt_len: usize,
    mask: usize,
    step: usize,
}

impl DecodeState {
    pub fn new(prompt: &[usize], gen_len: usize, cfg: &ModelConfig) -> Result<Self> {
        let n = prompt.len() + gen_len;
        if n > cfg.max_seq {
            return Err(Error::Input(format!(
                "prompt + generation = {n} exceeds max_seq {}",
                cfg.max_seq
            )));
        }
        if let Some(&t) = prompt.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!("prompt token {t} outside vocabulary")));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(n, cfg.mask_token_id);
        let mut committed = vec![true; prompt.len()];
        committed.resize(n, false);
        Ok(DecodeState {
            tokens,
            committed,
            prompt_len: prompt.len(),
            mask: cfg.mask_token_id,
            step: 0,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn committed(&self) -> &[bool] {
        &self.committed
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn gen_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn masked(&self) -> usize {
        self.committed.iter().filter(|c| !**c).count()
    }

    pub fn is_done(&self) -> bool {
        self.committed.iter().all(|&c| c)
    }

    /// Writes `(position, token)` picks; positions must be uncommitted.
    pub fn commit(&mut self, picks: &[(usize, usize)]) -> Result<()> {
        for &(pos, _) in picks {
            if pos >= self.tokens.len() || self.committed[pos] {
                return Err(Error::State(format!("position {pos} is not open")));
            }
        }
        for &(pos, tok) in picks {
            self.tokens[pos] = tok;
            self.committed[pos] = true;
        }
        self.step += 1;
        Ok(())
    }

    fn open(&self) -> impl Iterator<Item = usize> + '_ {
        (self.prompt_len..self.tokens.len()).filter(|&i| !self.committed[i])
    }

    /// Uncommitted positions of the first block that still has any.
    fn open_in_block(&self, block: usize) -> Vec<usize> {
        let block = block.max(1);
        let first = match self.open().next() {
            Some(p) => p,
            None => return Vec::new(),
        };
        let b = (first - self.prompt_len) / block;
        let end = (self.prompt_len + (b + 1) * block).min(self.tokens.len());
        (first..end).filter(|&i| !self.committed[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UnmaskRule {
    /// Commit the `count` most confident positions per step.
    FixedPerStep { count: usize },
    /// Commit every position of the current block above `threshold`, at
    /// least one per step.
    ConfidenceThreshold { threshold: f64, block_size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub rule: UnmaskRule,
    /// Zero means greedy.
    pub temperature: f64,
    pub seed: u64,
}

impl DecodePolicy {
    pub fn fixed(count: usize) -> Self {
        DecodePolicy {
            rule: UnmaskRule::FixedPerStep { count },
            temperature: 0.0,
            seed: 0,
        }
    }

    pub fn threshold(threshold: f64, block_size: usize) -> Self {
        DecodePolicy {
            rule: UnmaskRule::ConfidenceThreshold {
                threshold,
                block_size,
            },
            temperature: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument(
                "temperature must be finite and >= 0".into(),
            ));
        }
        match self.rule {
            UnmaskRule::FixedPerStep { count: 0 } => {
                Err(Error::Argument("tokens per step must be >= 1".into()))
            }
            UnmaskRule::ConfidenceThreshold {
                threshold,
                block_size,
            } if !(0.0..=1.0).contains(&threshold) || block_size == 0 => Err(Error::Argument(
                "threshold in [0, 1] and block_size >= 1 required".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for DecodePolicy {
    type Err = Error;

    /// `fixed:C` or `threshold:T[:BLOCK]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("bad policy `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let p = match parts.as_slice() {
            ["fixed", c] => DecodePolicy::fixed(c.parse().map_err(|_| bad())?),
            ["threshold", t] => DecodePolicy::threshold(t.parse().map_err(|_| bad())?, 32),
            ["threshold", t, b] => DecodePolicy::threshold(
                t.parse().map_err(|_| bad())?,
                b.parse().map_err(|_| bad())?,
            ),
            _ => return Err(bad()),
        };
        p.validate()?;
        Ok(p)
    }
}

/// Softmax of one logit row with the mask token excluded.
fn probs(row: &[f32], mask: usize, temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != mask)
        .map(|(_, &x)| x as f64 / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if i == mask {
                0.0
            } else {
                (x as f64 / t - max).exp()
            }
        })
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Chooses which open positions to commit from `confidence` (one entry per
/// candidate position). Ties break towards the lower position.
pub fn select_positions(candidates: &[usize], confidence: &[f64], rule: UnmaskRule) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        confidence[b]
            .partial_cmp(&confidence[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(candidates[a].cmp(&candidates[b]))
    });
    let mut chosen: Vec<usize> = match rule {
        UnmaskRule::FixedPerStep { count } => {
            order.iter().take(count).map(|&i| candidates[i]).collect()
        }
        UnmaskRule::ConfidenceThreshold { threshold, .. } => {
            let above: Vec<usize> = order
                .iter()
                .filter(|&&i| confidence[i] > threshold)
                .map(|&i| candidates[i])
                .collect();
            if above.is_empty() {
                order.first().map(|&i| candidates[i]).into_iter().collect()
            } else {
                above
            }
        }
    };
    chosen.sort_unstable();
    chosen
}

/// Positions and tokens to commit this step. Confidence is the top
/// probability at temperature one; the committed token is the argmax, or a
/// sample at the policy temperature.
pub fn confidence_select(
    logits: &Matrix,
    state: &DecodeState,
    policy: &DecodePolicy,
    seed: u64,
) -> Vec<(usize, usize)> {
    let candidates: Vec<usize> = match policy.rule {
        UnmaskRule::FixedPerStep { .. } => state.open().collect(),
        UnmaskRule::ConfidenceThreshold { block_size, .. } => state.open_in_block(block_size),
    };
    let dists: Vec<Vec<f64>> = candidates
        .iter()
        .map(|&p| probs(logits.row(p), state.mask, 1.0))
        .collect();
    let conf: Vec<f64> = dists.iter().map(|d| d[argmax(d)]).collect();
    let chosen = select_positions(&candidates, &conf, policy.rule);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ policy.seed.rotate_left(17));
    chosen
        .into_iter()
        .map(|pos| {
            let idx = candidates
                .binary_search(&pos)
                .expect("chosen from candidates");
            let tok = if policy.temperature > 0.0 {
                let p = probs(logits.row(pos), state.mask, policy.temperature);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = argmax(&p);
                for (i, &x) in p.iter().enumerate() {
                    acc += x;
                    if u < acc && x > 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                argmax(&dists[idx])
            };
            (pos, tok)
        })
        .collect()
}

/// Uniform random prompt that avoids the mask token.
pub fn random_prompt(cfg: &ModelConfig, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| loop {
            let t = rng.random_range(0..cfg.vocab_size);
            if t != cfg.mask_token_id {
                break t;
            }
        })
        .collect()
}

/// What one denoising step saw and did.
#[derive(Clone, Debug)]
pub struct StepEvent<'a> {
    pub step: usize,
    /// Input tokens of the step.
    pub tokens: &'a [usize],
    pub logits: &'a Matrix,
    pub commits: &'a [(usize, usize)],
    pub elapsed: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub commits: Vec<(usize, usize)>,
    pub micros: u64,
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub steps: Vec<StepSummary>,
    pub trace: Vec<TraceRecord>,
}

impl DecodeOutput {
    pub fn generated(&self, prompt_len: usize) -> &[usize] {
        &self.tokens[prompt_len..]
    }
}

/// Options beyond the policy and cache mode.
#[derive(Clone, Default)]
pub struct DecodeOptions {
    pub proxies: Option<std::sync::Arc<Vec<SingularProxy>>>,
    pub refresh: crate::cache::ProxyRefresh,
}

pub fn decode(
    model: &ModelWeights,
    prompt: &[usize],
    gen_len: usize,
    policy: &DecodePolicy,
    mode: CacheMode,
) -> Result<DecodeOutput> {
    decode_with(
        model,
        prompt,
        gen_len,
        policy,
        mode,
        &DecodeOptions::default(),
        |_| Ok(()),
    )
}

/// Decodes until every position is committed, calling `observe` after each step.
pub fn decode_with(
    model: &ModelWeights,
    prompt: &[usize],
    gen_len: usize,
    policy: &DecodePolicy,
    mode: CacheMode,
    opts: &DecodeOptions,
    mut observe: impl FnMut(&StepEvent<'_>) -> Result<()>,
) -> Result<DecodeOutput> {
    policy.validate()?;
    let mut state = DecodeState::new(prompt, gen_len, model.config())?;
    let mut session = match opts.proxies.clone() {
        Some(p) => Session::with_proxies(model, mode, Some(p))?,
        None => Session::new(model, mode)?,
    }
    .with_refresh(opts.refresh);
    let mut steps = Vec::new();
    while !state.is_done() {
        let t = state.step();
        let start = Instant::now();
        let logits = session.forward(state.tokens())?;
        let picks = confidence_select(&logits, &state, policy, t as u64);
        let elapsed = start.elapsed();
        observe(&StepEvent {
            step: t,
            tokens: state.tokens(),
            logits: &logits,
            commits: &picks,
            elapsed,
        })?;
        state.commit(&picks)?;
        let rows: Vec<usize> = picks.iter().map(|p| p.0).collect();
        session.mark_changed(&rows);
        steps.push(StepSummary {
            step: t,
            commits: picks,
            micros: elapsed.as_micros() as u64,
        });
    }
    Ok(DecodeOutput {
        tokens: state.tokens().to_vec(),
        steps,
        trace: session.into_trace(),
    })
}
