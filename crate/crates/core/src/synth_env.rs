//! Seeded synthetic "NumberChain" rollout generator with exactly computable
//! state values.
//!
//! The generative process is a hidden Markov chain: at each step the current
//! latent state emits one token from its categorical emission row, the hidden
//! vector for that token is the latent's fixed embedding plus isotropic
//! Gaussian noise, and the latent then transitions. Emitting the EOS token
//! ends the episode with reward 1 exactly when the last number token emitted
//! so far equals the configured target (filler tokens in between are
//! transparent); exhausting `max_len` emissions without EOS truncates the
//! episode with reward 0.
//!
//! Because the process is a finite MDP over (latent, steps remaining, last
//! emitted number), true state values are computed exactly by dynamic
//! programming, which is what makes the environment useful as ground truth
//! for estimator evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation, Error, Result};
use crate::rng::{stream, tags};
use crate::trace_model::{F32Matrix, Group, Rollout};

/// End-of-sequence token; its emission terminates an episode.
pub const EOS_TOKEN: &str = "<eos>";

/// Complete description of a NumberChain environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of latent states K, at least 2.
    pub n_latent: usize,
    /// Hidden-state dimensionality d, at least 1.
    pub dim: usize,
    /// Standard deviation of the isotropic Gaussian added to each latent
    /// embedding, at least 0.
    pub noise_sigma: f64,
    /// Emission vocabulary; must contain [`EOS_TOKEN`] and no duplicates.
    pub vocab: Vec<String>,
    /// Per-latent categorical emission distributions, K rows over `vocab`.
    pub emit_table: Vec<Vec<f64>>,
    /// Latent transition matrix, K row-stochastic rows of length K.
    pub transition: Vec<Vec<f64>>,
    /// Token whose whitespace-trimmed form must be the last number emitted
    /// before EOS for the episode to earn reward 1.
    pub target_number: String,
    /// Maximum number of emissions per episode, at least 2.
    pub max_len: usize,
    /// Base RNG seed; `None` defers to the run-level seed resolution.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl EnvConfig {
    /// Seed used by generation once run-level resolution has happened.
    pub fn resolved_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Validates all structural invariants, naming the offending row.
    pub fn validate(&self) -> Result<()> {
        if self.n_latent < 2 {
            return Err(config_err!("n_latent {} must be >= 2", self.n_latent));
        }
        if self.dim < 1 {
            return Err(config_err!("dim {} must be >= 1", self.dim));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(config_err!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        if self.max_len < 2 {
            return Err(config_err!("max_len {} must be >= 2", self.max_len));
        }
        if self.vocab.is_empty() {
            return Err(config_err!("vocab must not be empty"));
        }
        if !self.vocab.iter().any(|t| t == EOS_TOKEN) {
            return Err(config_err!(
                "vocab must contain the EOS token {EOS_TOKEN:?}"
            ));
        }
        for (i, tok) in self.vocab.iter().enumerate() {
            if self.vocab[..i].contains(tok) {
                return Err(config_err!("vocab entry {i} duplicates token {tok:?}"));
            }
        }
        check_stochastic(&self.transition, self.n_latent, self.n_latent, "transition")?;
        check_stochastic(
            &self.emit_table,
            self.n_latent,
            self.vocab.len(),
            "emit_table",
        )?;
        Ok(())
    }
}

fn check_stochastic(rows: &[Vec<f64>], n_rows: usize, n_cols: usize, name: &str) -> Result<()> {
    if rows.len() != n_rows {
        return Err(config_err!(
            "{name} has {} rows, expected {n_rows}",
            rows.len()
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n_cols {
            return Err(config_err!(
                "{name} row {i} has {} entries, expected {n_cols}",
                row.len()
            ));
        }
        if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(config_err!(
                "{name} row {i} contains a negative or non-finite probability"
            ));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(config_err!("{name} row {i} sums to {sum}, expected 1"));
        }
    }
    Ok(())
}

/// Latent-state indices aligned one-to-one with a rollout's generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrace {
    /// `latent_states[t]` emitted generated token `t`.
    pub latent_states: Vec<usize>,
}

/// Trimmed form of `token` when it is a number token: after stripping ASCII
/// whitespace the remainder is one or more ASCII digits with at most one
/// decimal point. Returns `None` otherwise.
pub fn number_form(token: &str) -> Option<&str> {
    let trimmed = token.trim();
    if trimmed.is_empty() {
        return None;
    }
    let mut dots = 0usize;
    let mut digits = 0usize;
    for c in trimmed.chars() {
        match c {
            '0'..='9' => digits += 1,
            '.' => dots += 1,
            _ => return None,
        }
    }
    if digits >= 1 && dots <= 1 {
        Some(trimmed)
    } else {
        None
    }
}

/// Trimmed form of the last number token in `tokens`, if any.
pub fn last_number_in(tokens: &[String]) -> Option<&str> {
    tokens.iter().rev().find_map(|t| number_form(t))
}

/// Fixed per-latent embeddings, K rows of length d, flattened row-major.
///
/// With K <= d the rows are orthonormal (Gram-Schmidt over seeded Gaussian
/// draws); with K > d they are seeded unit vectors, and when `noise_sigma`
/// is 0 a pairwise-distinctness check rejects colliding embeddings.
pub(crate) fn build_embeddings(config: &EnvConfig) -> Result<Vec<f64>> {
    let k = config.n_latent;
    let d = config.dim;
    let mut rng = stream(config.resolved_seed(), &[tags::EMBED]);
    let draw = |rng: &mut ChaCha12Rng| -> Vec<f64> {
        (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut v = draw(&mut rng);
            if k <= d {
                // Orthogonalize against the accepted rows.
                for prev in &rows {
                    let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (x, p) in v.iter_mut().zip(prev) {
                        *x -= dot * p;
                    }
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for x in &mut v {
                    *x /= norm;
                }
                rows.push(v);
                break;
            }
            if attempts > 100 {
                return Err(validation!(
                    "embedding draw for latent {i} degenerated repeatedly"
                ));
            }
        }
    }
    if k > d && config.noise_sigma == 0.0 {
        for i in 0..k {
            for j in (i + 1)..k {
                let dist: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist < 1e-9 {
                    return Err(config_err!(
                        "latent embeddings {i} and {j} collide with noise_sigma = 0; \
                         raise dim or noise_sigma"
                    ));
                }
            }
        }
    }
    Ok(rows.into_iter().flatten().collect())
}

fn sample_categorical(rng: &mut ChaCha12Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generates `prompts` groups of `rollouts_per_prompt` rollouts each, plus
/// the latent trace of every rollout keyed by rollout id.
///
/// Each prompt draws its shared initial latent from a stream keyed by
/// `(seed, prompt_id)`, and each rollout consumes its own stream keyed by
/// `(seed, prompt_id, rollout_id)`, so parallel and serial runs agree and
/// repeated calls are bit-identical. Rollout ids are assigned as
/// `prompt_id * rollouts_per_prompt + slot`.
pub fn generate(
    config: &EnvConfig,
    prompts: usize,
    rollouts_per_prompt: usize,
) -> Result<(Vec<Group>, BTreeMap<u64, LatentTrace>)> {
    config.validate()?;
    if prompts < 1 || rollouts_per_prompt < 1 {
        return Err(validation!(
            "generate requires at least 1 prompt and 1 rollout per prompt"
        ));
    }
    let embeddings = build_embeddings(config)?;
    let seed = config.resolved_seed();
    let eos_index = config
        .vocab
        .iter()
        .position(|t| t == EOS_TOKEN)
        .expect("validated vocab");

    let per_prompt: Vec<(Group, Vec<(u64, LatentTrace)>)> = (0..prompts as u64)
        .into_par_iter()
        .map(|prompt_id| {
            let mut init_rng = stream(seed, &[tags::PROMPT_INIT, prompt_id]);
            let initial_latent = init_rng.gen_range(0..config.n_latent);
            let mut rollouts = Vec::with_capacity(rollouts_per_prompt);
            let mut latents = Vec::with_capacity(rollouts_per_prompt);
            for slot in 0..rollouts_per_prompt as u64 {
                let rollout_id = prompt_id * rollouts_per_prompt as u64 + slot;
                let mut rng = stream(seed, &[tags::ROLLOUT, prompt_id, rollout_id]);
                let (rollout, trace) = run_episode(
                    config,
                    &embeddings,
                    eos_index,
                    prompt_id,
                    rollout_id,
                    initial_latent,
                    &mut rng,
                );
                rollouts.push(rollout);
                latents.push((rollout_id, trace));
            }
            (
                Group {
                    prompt_id,
                    rollouts,
                },
                latents,
            )
        })
        .collect();

    let mut groups = Vec::with_capacity(prompts);
    let mut latent_map = BTreeMap::new();
    for (group, latents) in per_prompt {
        groups.push(group);
        latent_map.extend(latents);
    }
    Ok((groups, latent_map))
}

/// Runs one episode: emit token, append noisy embedding row, transition.
fn run_episode(
    config: &EnvConfig,
    embeddings: &[f64],
    eos_index: usize,
    prompt_id: u64,
    rollout_id: u64,
    initial_latent: usize,
    rng: &mut ChaCha12Rng,
) -> (Rollout, LatentTrace) {
    let d = config.dim;
    let mut tokens = vec![format!("<prompt:{prompt_id}>")];
    let mut hidden = Vec::new();
    let mut latent_states = Vec::new();
    let mut latent = initial_latent;
    let mut terminal = false;
    for _ in 0..config.max_len {
        let tok = sample_categorical(rng, &config.emit_table[latent]);
        tokens.push(config.vocab[tok].clone());
        latent_states.push(latent);
        let base = &embeddings[latent * d..(latent + 1) * d];
        if config.noise_sigma > 0.0 {
            for &b in base {
                let noise: f64 = rng.sample(StandardNormal);
                hidden.push((b + config.noise_sigma * noise) as f32);
            }
        } else {
            hidden.extend(base.iter().map(|&b| b as f32));
        }
        if tok == eos_index {
            terminal = true;
            break;
        }
        latent = sample_categorical(rng, &config.transition[latent]);
    }
    let generated = &tokens[1..];
    let reward = if terminal {
        let matches = last_number_in(generated)
            .map(|n| n == config.target_number.trim())
            .unwrap_or(false);
        if matches {
            1.0
        } else {
            0.0
        }
    } else {
        0.0
    };
    let eta = latent_states.len();
    let rollout = Rollout {
        rollout_id,
        prompt_id,
        tokens,
        prompt_len: 1,
        reward,
        hidden: F32Matrix::from_vec(hidden, eta, d).expect("episode row accounting"),
        terminal,
    };
    (rollout, LatentTrace { latent_states })
}

/// Exact state-value table for one environment, indexed by
/// (latent, steps remaining, last emitted number).
pub struct ExactValues {
    /// Flattened `[steps][latent][m]`, m in `0..=numbers.len()` with 0 = none.
    table: Vec<f64>,
    n_latent: usize,
    n_m: usize,
    max_len: usize,
    /// Trimmed number forms appearing in the vocabulary, in vocab order.
    numbers: Vec<String>,
}

impl ExactValues {
    /// Builds the full dynamic-programming table for `config`.
    pub fn new(config: &EnvConfig) -> Result<Self> {
        config.validate()?;
        let k = config.n_latent;
        let mut numbers: Vec<String> = Vec::new();
        // vocab index -> m index (0 = no number yet).
        let tok_m: Vec<Option<usize>> = config
            .vocab
            .iter()
            .map(|t| {
                number_form(t).map(|form| {
                    if let Some(pos) = numbers.iter().position(|n| n == form) {
                        pos + 1
                    } else {
                        numbers.push(form.to_string());
                        numbers.len()
                    }
                })
            })
            .collect();
        let n_m = numbers.len() + 1;
        let target_form = config.target_number.trim();
        let target_m: Option<usize> = numbers.iter().position(|n| n == target_form).map(|p| p + 1);
        let eos_index = config.vocab.iter().position(|t| t == EOS_TOKEN).unwrap();

        let mut table = vec![0.0f64; (config.max_len + 1) * k * n_m];
        let idx = |s: usize, z: usize, m: usize| (s * k + z) * n_m + m;
        for s in 1..=config.max_len {
            for z in 0..k {
                for m in 0..n_m {
                    let mut value = 0.0;
                    for (tok, &p) in config.emit_table[z].iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        if tok == eos_index {
                            if Some(m) == target_m {
                                value += p;
                            }
                        } else {
                            let m_next = tok_m[tok].unwrap_or(m);
                            let mut next = 0.0;
                            for (z_next, &q) in config.transition[z].iter().enumerate() {
                                next += q * table[idx(s - 1, z_next, m_next)];
                            }
                            value += p * next;
                        }
                    }
                    table[idx(s, z, m)] = value;
                }
            }
        }
        Ok(Self {
            table,
            n_latent: k,
            n_m,
            max_len: config.max_len,
            numbers,
        })
    }

    fn m_index(&self, last_number: Option<&str>) -> Result<usize> {
        match last_number {
            None => Ok(0),
            Some(tok) => {
                let form = number_form(tok)
                    .ok_or_else(|| validation!("token {tok:?} is not a number token"))?;
                self.numbers
                    .iter()
                    .position(|n| n == form)
                    .map(|p| p + 1)
                    .ok_or_else(|| validation!("number {form:?} never occurs in the vocabulary"))
            }
        }
    }

    /// Exact per-token values for one rollout, reusing this table; entry `t`
    /// is the success probability of the configuration reached immediately
    /// after emitting generated token `t`, and the final entry is the
    /// realized outcome (the reward when terminal, 0 when truncated).
    pub fn token_values(&self, rollout: &Rollout, latent: &LatentTrace) -> Result<Vec<f64>> {
        let eta = rollout.eta();
        if latent.latent_states.len() != eta {
            return Err(validation!(
                "rollout {}: latent trace length {} does not match {} generated tokens",
                rollout.rollout_id,
                latent.latent_states.len(),
                eta
            ));
        }
        let generated = rollout.generated_tokens();
        let mut values = Vec::with_capacity(eta);
        let mut last_number: Option<&str> = None;
        for (t, token) in generated.iter().enumerate() {
            if let Some(form) = number_form(token) {
                last_number = Some(form);
            }
            if t + 1 < eta {
                values.push(self.value(
                    latent.latent_states[t + 1],
                    self.max_len - (t + 1),
                    last_number,
                )?);
            } else if rollout.terminal {
                values.push(rollout.reward);
            } else {
                values.push(0.0);
            }
        }
        Ok(values)
    }

    /// Exact success probability from the given configuration.
    pub fn value(
        &self,
        latent_state: usize,
        steps_remaining: usize,
        last_number: Option<&str>,
    ) -> Result<f64> {
        if latent_state >= self.n_latent {
            return Err(validation!(
                "latent index {latent_state} out of range {}",
                self.n_latent
            ));
        }
        if steps_remaining > self.max_len {
            return Err(validation!(
                "steps_remaining {steps_remaining} exceeds max_len {}",
                self.max_len
            ));
        }
        let m = self.m_index(last_number)?;
        Ok(self.table[(steps_remaining * self.n_latent + latent_state) * self.n_m + m])
    }
}

/// One-shot [`ExactValues::value`] for callers that do not reuse the table.
pub fn exact_value(
    config: &EnvConfig,
    latent_state: usize,
    steps_remaining: usize,
    last_number: Option<&str>,
) -> Result<f64> {
    ExactValues::new(config)?.value(latent_state, steps_remaining, last_number)
}

/// Exact per-token values for one rollout: entry `t` is the success
/// probability of the configuration reached immediately after emitting
/// generated token `t`. The final entry is the realized outcome (the
/// episode's reward when terminal, 0 when truncated).
pub fn exact_token_values(
    rollout: &Rollout,
    latent: &LatentTrace,
    config: &EnvConfig,
) -> Result<Vec<f64>> {
    ExactValues::new(config)?.token_values(rollout, latent)
}

/// The configuration reached immediately after a given generated token, for
/// Monte-Carlo continuation sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum PostState {
    /// The episode is already decided (EOS emitted, or budget exhausted).
    Finished {
        /// Realized terminal reward.
        reward: f64,
    },
    /// The episode continues from this configuration.
    Live {
        /// Latent state that will emit the next token.
        latent: usize,
        /// Remaining emission budget.
        steps_remaining: usize,
        /// Trimmed form of the last number emitted so far.
        last_number: Option<String>,
    },
}

/// Post-token configuration of generated token `t` in `rollout`.
pub fn post_token_state(
    rollout: &Rollout,
    latent: &LatentTrace,
    config: &EnvConfig,
    t: usize,
) -> Result<PostState> {
    let eta = rollout.eta();
    if latent.latent_states.len() != eta {
        return Err(validation!(
            "rollout {}: latent trace length {} does not match {} generated tokens",
            rollout.rollout_id,
            latent.latent_states.len(),
            eta
        ));
    }
    if t >= eta {
        return Err(validation!(
            "rollout {}: token index {t} outside generated range {eta}",
            rollout.rollout_id
        ));
    }
    if t + 1 == eta {
        if rollout.terminal {
            return Ok(PostState::Finished {
                reward: rollout.reward,
            });
        }
        if eta != config.max_len {
            return Err(validation!(
                "rollout {}: non-terminal but only {eta} of {} tokens emitted",
                rollout.rollout_id,
                config.max_len
            ));
        }
        return Ok(PostState::Finished { reward: 0.0 });
    }
    let generated = rollout.generated_tokens();
    Ok(PostState::Live {
        latent: latent.latent_states[t + 1],
        steps_remaining: config.max_len - (t + 1),
        last_number: last_number_in(&generated[..=t]).map(str::to_string),
    })
}

/// Samples one continuation from a live configuration and returns its
/// terminal reward (0 when the budget runs out before EOS).
pub fn simulate_continuation_reward(
    config: &EnvConfig,
    latent: usize,
    steps_remaining: usize,
    last_number: Option<&str>,
    rng: &mut ChaCha12Rng,
) -> f64 {
    let eos_index = config
        .vocab
        .iter()
        .position(|t| t == EOS_TOKEN)
        .expect("vocab contains EOS");
    let target = config.target_number.trim();
    let mut z = latent;
    let mut last: Option<String> = last_number.map(str::to_string);
    for _ in 0..steps_remaining {
        let tok = sample_categorical(rng, &config.emit_table[z]);
        if tok == eos_index {
            return if last.as_deref() == Some(target) {
                1.0
            } else {
                0.0
            };
        }
        if let Some(form) = number_form(&config.vocab[tok]) {
            last = Some(form.to_string());
        }
        z = sample_categorical(rng, &config.transition[z]);
    }
    0.0
}

/// File name of the latent sidecar inside a bundle directory.
pub const LATENTS_FILE: &str = "latents.jsonl";

#[derive(Serialize, Deserialize)]
struct LatentRecord {
    rollout_id: u64,
    latents: Vec<usize>,
}

/// Writes the latent sidecar [`LATENTS_FILE`] into the bundle directory,
/// one record per rollout in ascending rollout-id order.
pub fn store_latents(dir: &Path, latents: &BTreeMap<u64, LatentTrace>) -> Result<()> {
    let mut out = BufWriter::new(File::create(dir.join(LATENTS_FILE))?);
    for (&rollout_id, trace) in latents {
        let record = LatentRecord {
            rollout_id,
            latents: trace.latent_states.clone(),
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| Error::Format {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the latent sidecar written by [`store_latents`].
pub fn load_latents(dir: &Path) -> Result<BTreeMap<u64, LatentTrace>> {
    let file = BufReader::new(File::open(dir.join(LATENTS_FILE))?);
    let mut latents = BTreeMap::new();
    for (line_no, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LatentRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: line_no + 1,
            message: e.to_string(),
        })?;
        latents.insert(
            record.rollout_id,
            LatentTrace {
                latent_states: record.latents,
            },
        );
    }
    Ok(latents)
}
