//! State-value estimation benchmark: sampled-state collection, reference
//! values, MAE scoring, difficulty filtering, and difference histograms.
//!
//! A benchmark run samples intermediate states uniformly from each rollout,
//! attaches a reference value to every sampled state (exact values from the
//! synthetic environment, fresh Monte-Carlo continuations, or offline
//! continuation rewards), computes each method's estimate at those states,
//! and reduces to per-method mean absolute error plus a histogram of each
//! method's difference against the group-average baseline.

use std::collections::{btree_map, BTreeMap};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation, Error, Result};
use crate::hista::{hista_state_values, HistaParams};
use crate::numca::{numca_values, MilestonePatterns};
use crate::rng::{stream, tags};
use crate::synth_env::{
    post_token_state, simulate_continuation_reward, EnvConfig, ExactValues, LatentTrace, PostState,
};
use crate::trace_model::{Group, Method, ValueAssignment};

/// Histogram range lower edge; symmetric about zero so that zero difference
/// falls in the exact middle of an odd bin count.
pub const HIST_LO: f64 = -1.0125;
/// Histogram range upper edge.
pub const HIST_HI: f64 = 1.0125;
/// Default bin count: width 0.025 over the full range.
pub const DEFAULT_BINS: usize = 81;
/// Default number of sampled states per rollout.
pub const DEFAULT_PER_ROLLOUT: usize = 5;

/// An estimation method to benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    /// Group-average baseline.
    Grpo,
    /// Numerical-milestone credit assignment.
    Numca,
    /// Hidden-state nearest-neighbor estimation.
    Hista,
    /// Monte-Carlo continuation mean over `n` fresh samples.
    Mcs(usize),
}

impl MethodSpec {
    /// Stable name used in reports and output file names.
    pub fn name(&self) -> String {
        match self {
            MethodSpec::Grpo => "grpo".to_string(),
            MethodSpec::Numca => "numca".to_string(),
            MethodSpec::Hista => "hista".to_string(),
            MethodSpec::Mcs(n) => format!("mcs@{n}"),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(MethodSpec::Grpo),
            "numca" => Ok(MethodSpec::Numca),
            "hista" => Ok(MethodSpec::Hista),
            other => {
                if let Some(n) = other.strip_prefix("mcs@") {
                    let n: usize = n
                        .parse()
                        .map_err(|_| config_err!("invalid continuation count in {other:?}"))?;
                    if n == 0 {
                        return Err(config_err!("mcs@n requires n >= 1"));
                    }
                    Ok(MethodSpec::Mcs(n))
                } else {
                    Err(config_err!(
                        "unknown method {other:?}; expected grpo, numca, hista, or mcs@N"
                    ))
                }
            }
        }
    }
}

/// One sampled state with its reference value and per-method estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvebRecord {
    /// Prompt of the group the state came from.
    pub prompt_id: u64,
    /// Rollout the state came from.
    pub rollout_id: u64,
    /// Zero-based generated-token index of the state.
    pub token_index: usize,
    /// Reference value in `[0, 1]`.
    pub reference_value: f64,
    /// Method name to estimate, each in `[0, 1]`.
    pub estimates: BTreeMap<String, f64>,
}

/// Histogram with fixed uniform bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin edges, length `bins + 1`.
    pub edges: Vec<f64>,
    /// Per-bin counts, length `bins`.
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Total count across bins.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Aggregated benchmark result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvebReport {
    /// Reference mode actually used (`"exact"` or `"mcs@n"`).
    pub reference_mode: String,
    /// True when a continuation count was supplied but the exact reference
    /// mode made it irrelevant.
    pub n_ignored: bool,
    /// Number of scored records.
    pub n_records: usize,
    /// Per-method mean absolute error against the reference.
    pub mae: BTreeMap<String, f64>,
    /// Per-method histogram of `estimate_method - estimate_grpo`.
    pub histograms: BTreeMap<String, Histogram>,
}

/// Reference-value source for [`reference_values`].
pub enum ReferenceMode<'a> {
    /// Exact dynamic-programming values from the synthetic environment.
    Exact,
    /// Mean of `n` fresh seeded continuations per state.
    Mcs {
        /// Continuations per state, `>= 1`.
        n: usize,
    },
    /// Pre-computed continuation rewards keyed by `(rollout_id, token_index)`.
    Offline {
        /// Every sampled state must be present with at least one reward.
        continuations: &'a BTreeMap<(u64, usize), Vec<f64>>,
    },
}

/// Reference choice for a full benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvebReference {
    /// Exact values; any configured continuation count is ignored (and
    /// flagged in the report).
    Exact {
        /// Continuation count that was supplied but is irrelevant here.
        requested_n: Option<usize>,
    },
    /// Monte-Carlo reference with `n` continuations per state.
    Mcs {
        /// Continuations per state, `>= 1`.
        n: usize,
    },
}

/// Options for [`run_sveb`].
pub struct SvebOptions {
    /// Sampled states per rollout, `>= 1`.
    pub per_rollout: usize,
    /// Methods to score; the group-average baseline is added automatically
    /// when absent because histograms difference against it.
    pub methods: Vec<MethodSpec>,
    /// Reference-value source.
    pub reference: SvebReference,
    /// Base seed for state sampling and continuation streams.
    pub seed: u64,
    /// Parameters for the hidden-state estimator.
    pub hista: HistaParams,
    /// Milestone patterns for the numerical estimator.
    pub patterns: MilestonePatterns,
    /// Histogram bin count.
    pub bins: usize,
}

impl Default for SvebOptions {
    fn default() -> Self {
        Self {
            per_rollout: DEFAULT_PER_ROLLOUT,
            methods: vec![MethodSpec::Grpo, MethodSpec::Numca, MethodSpec::Hista],
            reference: SvebReference::Exact { requested_n: None },
            seed: 0,
            hista: HistaParams::default(),
            patterns: MilestonePatterns::default(),
            bins: DEFAULT_BINS,
        }
    }
}

/// Uniformly samples `per_rollout` generated-token positions without
/// replacement from every rollout, clamping to the rollout length when it is
/// shorter. Returns `(prompt_id, rollout_id, token_index)` triples sorted by
/// that key; each rollout draws from its own `(seed, prompt, rollout)`
/// stream so the sample is reproducible and order-independent.
pub fn collect_states(
    groups: &[Group],
    per_rollout: usize,
    seed: u64,
) -> Result<Vec<(u64, u64, usize)>> {
    if per_rollout < 1 {
        return Err(validation!("per_rollout must be >= 1"));
    }
    let mut states = Vec::new();
    for group in groups {
        for rollout in &group.rollouts {
            let eta = rollout.eta();
            let take = per_rollout.min(eta);
            let mut rng = stream(seed, &[tags::COLLECT, group.prompt_id, rollout.rollout_id]);
            let mut picks = rand::seq::index::sample(&mut rng, eta, take).into_vec();
            picks.sort_unstable();
            states.extend(
                picks
                    .into_iter()
                    .map(|t| (group.prompt_id, rollout.rollout_id, t)),
            );
        }
    }
    states.sort_unstable();
    Ok(states)
}

fn rollout_lookup(groups: &[Group]) -> BTreeMap<u64, (&Group, usize)> {
    let mut map = BTreeMap::new();
    for group in groups {
        for (i, rollout) in group.rollouts.iter().enumerate() {
            map.insert(rollout.rollout_id, (group, i));
        }
    }
    map
}

/// Reference value of every sampled state.
///
/// `env` supplies the synthetic environment and its latent sidecar; it is
/// required for the exact and Monte-Carlo modes and unused by the offline
/// mode. Monte-Carlo draws per-state streams keyed by
/// `(seed, rollout, token, trial)`, and a state whose episode is already
/// decided (EOS emitted or budget exhausted) scores its realized outcome.
pub fn reference_values(
    states: &[(u64, u64, usize)],
    groups: &[Group],
    env: Option<(&EnvConfig, &BTreeMap<u64, LatentTrace>)>,
    mode: &ReferenceMode<'_>,
    seed: u64,
) -> Result<Vec<f64>> {
    let lookup = rollout_lookup(groups);
    let resolve = |rollout_id: u64| -> Result<(&Group, usize)> {
        lookup
            .get(&rollout_id)
            .copied()
            .ok_or_else(|| validation!("rollout {rollout_id} not present in any group"))
    };
    match mode {
        ReferenceMode::Exact => {
            let (config, latents) =
                env.ok_or_else(|| config_err!("exact reference mode requires the latent sidecar"))?;
            let table = ExactValues::new(config)?;
            // Cache per-rollout exact values; states are sorted by rollout.
            let mut cache: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            states
                .iter()
                .map(|&(_, rollout_id, t)| {
                    if let btree_map::Entry::Vacant(entry) = cache.entry(rollout_id) {
                        let (group, idx) = resolve(rollout_id)?;
                        let rollout = &group.rollouts[idx];
                        let trace = latents.get(&rollout_id).ok_or_else(|| {
                            config_err!("latent sidecar has no entry for rollout {rollout_id}")
                        })?;
                        entry.insert(table.token_values(rollout, trace)?);
                    }
                    let values = &cache[&rollout_id];
                    values
                        .get(t)
                        .copied()
                        .ok_or_else(|| validation!("token index {t} outside rollout {rollout_id}"))
                })
                .collect()
        }
        ReferenceMode::Mcs { n } => {
            if *n < 1 {
                return Err(validation!("mcs reference requires n >= 1"));
            }
            let (config, latents) =
                env.ok_or_else(|| config_err!("mcs reference mode requires the latent sidecar"))?;
            states
                .par_iter()
                .map(|&(_, rollout_id, t)| {
                    let (group, idx) = resolve(rollout_id)?;
                    let rollout = &group.rollouts[idx];
                    let trace = latents.get(&rollout_id).ok_or_else(|| {
                        config_err!("latent sidecar has no entry for rollout {rollout_id}")
                    })?;
                    continuation_mean(config, rollout, trace, t, *n, seed, PURPOSE_REFERENCE)
                })
                .collect()
        }
        ReferenceMode::Offline { continuations } => states
            .iter()
            .map(|&(_, rollout_id, t)| {
                let rewards = continuations.get(&(rollout_id, t)).ok_or_else(|| {
                    config_err!(
                        "offline continuations missing state (rollout {rollout_id}, token {t})"
                    )
                })?;
                if rewards.is_empty() {
                    return Err(config_err!(
                        "offline continuations empty for state (rollout {rollout_id}, token {t})"
                    ));
                }
                Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
            })
            .collect(),
    }
}

/// Continuation-stream discriminant for reference values.
const PURPOSE_REFERENCE: u64 = 0;
/// Continuation-stream discriminant for estimator values.
const PURPOSE_ESTIMATOR: u64 = 1;

/// Mean terminal reward of `n` seeded continuations from the post-token
/// state; `purpose` separates reference streams from estimator streams.
fn continuation_mean(
    config: &EnvConfig,
    rollout: &crate::trace_model::Rollout,
    trace: &LatentTrace,
    t: usize,
    n: usize,
    seed: u64,
    purpose: u64,
) -> Result<f64> {
    match post_token_state(rollout, trace, config, t)? {
        PostState::Finished { reward } => Ok(reward),
        PostState::Live {
            latent,
            steps_remaining,
            last_number,
        } => {
            let mut total = 0.0;
            for trial in 0..n as u64 {
                let mut rng = stream(
                    seed,
                    &[
                        tags::CONTINUATION,
                        purpose,
                        rollout.rollout_id,
                        t as u64,
                        trial,
                    ],
                );
                total += simulate_continuation_reward(
                    config,
                    latent,
                    steps_remaining,
                    last_number.as_deref(),
                    &mut rng,
                );
            }
            Ok(total / n as f64)
        }
    }
}

/// Monte-Carlo state values for every generated token of every rollout in
/// `group`: `n` seeded continuations per live post-token state, the realized
/// outcome for finished states. Uses the estimator continuation stream, so
/// values are independent of any Monte-Carlo reference drawn from the same
/// seed.
pub fn mcs_token_values(
    group: &Group,
    config: &EnvConfig,
    latents: &BTreeMap<u64, LatentTrace>,
    n: usize,
    seed: u64,
) -> Result<Vec<ValueAssignment>> {
    if n == 0 {
        return Err(validation!("mcs estimator needs at least 1 continuation"));
    }
    group
        .rollouts
        .par_iter()
        .map(|rollout| {
            let trace = latents.get(&rollout.rollout_id).ok_or_else(|| {
                config_err!("latent sidecar lacks rollout {}", rollout.rollout_id)
            })?;
            let values = (0..rollout.eta())
                .map(|t| continuation_mean(config, rollout, trace, t, n, seed, PURPOSE_ESTIMATOR))
                .collect::<Result<Vec<f64>>>()?;
            let advantages = values.iter().map(|v| rollout.reward - v).collect();
            Ok(ValueAssignment {
                rollout_id: rollout.rollout_id,
                method: Method::Mcs,
                values,
                advantages,
            })
        })
        .collect()
}

/// Mean absolute error of `method` against the reference values.
pub fn mae(records: &[SvebRecord], method: &str) -> Result<f64> {
    if records.is_empty() {
        return Err(validation!("mae over zero records is undefined"));
    }
    let mut total = 0.0;
    for record in records {
        let estimate = record.estimates.get(method).ok_or_else(|| {
            validation!(
                "record (rollout {}, token {}) lacks estimate for method {method:?}",
                record.rollout_id,
                record.token_index
            )
        })?;
        total += (estimate - record.reference_value).abs();
    }
    Ok(total / records.len() as f64)
}

/// Keeps groups whose mean reward lies in `[lo, hi]` (inclusive).
pub fn difficulty_filter(groups: Vec<Group>, lo: f64, hi: f64) -> Vec<Group> {
    groups
        .into_iter()
        .filter(|g| {
            let accuracy = g.mean_reward();
            accuracy >= lo && accuracy <= hi
        })
        .collect()
}

/// Histogram of `estimate_method - estimate_grpo` over `bins` uniform bins
/// spanning `[HIST_LO, HIST_HI]`; differences outside the range (impossible
/// for estimates in `[0, 1]`) clamp to the end bins, so counts always sum to
/// the record count.
pub fn diff_histogram(records: &[SvebRecord], method: &str, bins: usize) -> Result<Histogram> {
    if bins < 1 {
        return Err(validation!("histogram needs at least one bin"));
    }
    let width = (HIST_HI - HIST_LO) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| HIST_LO + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for record in records {
        let get = |name: &str| {
            record.estimates.get(name).ok_or_else(|| {
                validation!(
                    "record (rollout {}, token {}) lacks estimate for method {name:?}",
                    record.rollout_id,
                    record.token_index
                )
            })
        };
        let diff = get(method)? - get("grpo")?;
        let bin = ((diff - HIST_LO) / width).floor();
        let bin = (bin.max(0.0) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Estimates of `method` at the given states of one group, aligned with
/// `group_states` (pairs of rollout id and token index).
fn group_estimates(
    group: &Group,
    env: Option<(&EnvConfig, &BTreeMap<u64, LatentTrace>)>,
    method: MethodSpec,
    group_states: &[(u64, usize)],
    options: &SvebOptions,
) -> Result<Vec<f64>> {
    match method {
        MethodSpec::Grpo => Ok(vec![group.mean_reward(); group_states.len()]),
        MethodSpec::Numca => {
            let assignments = numca_values(group, &options.patterns)?;
            let by_rollout: BTreeMap<u64, &Vec<f64>> = group
                .rollouts
                .iter()
                .zip(&assignments)
                .map(|(r, a)| (r.rollout_id, &a.values))
                .collect();
            group_states
                .iter()
                .map(|&(rollout_id, t)| {
                    by_rollout
                        .get(&rollout_id)
                        .and_then(|v| v.get(t))
                        .copied()
                        .ok_or_else(|| {
                            validation!("state (rollout {rollout_id}, token {t}) not in group")
                        })
                })
                .collect()
        }
        MethodSpec::Hista => hista_state_values(group, &options.hista, group_states),
        MethodSpec::Mcs(n) => {
            let (config, latents) = env.ok_or_else(|| {
                config_err!("mcs estimates require the synthetic environment and latent sidecar")
            })?;
            group_states
                .iter()
                .map(|&(rollout_id, t)| {
                    let rollout = group
                        .rollouts
                        .iter()
                        .find(|r| r.rollout_id == rollout_id)
                        .ok_or_else(|| validation!("rollout {rollout_id} not in group"))?;
                    let trace = latents.get(&rollout_id).ok_or_else(|| {
                        config_err!("latent sidecar has no entry for rollout {rollout_id}")
                    })?;
                    continuation_mean(
                        config,
                        rollout,
                        trace,
                        t,
                        n,
                        options.seed,
                        PURPOSE_ESTIMATOR,
                    )
                })
                .collect()
        }
    }
}

/// Runs the full benchmark: sample states, attach references, score every
/// method, and reduce to a report. Returns the scored records alongside the
/// report so callers can persist or re-analyze them.
pub fn run_sveb(
    groups: &[Group],
    env: Option<(&EnvConfig, &BTreeMap<u64, LatentTrace>)>,
    options: &SvebOptions,
) -> Result<(Vec<SvebRecord>, SvebReport)> {
    options.hista.validate()?;
    let mut methods = options.methods.clone();
    if !methods.contains(&MethodSpec::Grpo) {
        methods.insert(0, MethodSpec::Grpo);
    }
    let states = collect_states(groups, options.per_rollout, options.seed)?;
    if states.is_empty() {
        return Err(validation!("benchmark sampled zero states"));
    }
    let (mode, reference_mode, n_ignored) = match options.reference {
        SvebReference::Exact { requested_n } => (
            ReferenceMode::Exact,
            "exact".to_string(),
            requested_n.is_some(),
        ),
        SvebReference::Mcs { n } => (ReferenceMode::Mcs { n }, format!("mcs@{n}"), false),
    };
    let references = reference_values(&states, groups, env, &mode, options.seed)?;

    // Per-prompt contiguous ranges of the sorted state list, matched to
    // groups by prompt id so the caller's group order does not matter.
    let mut prompt_ranges: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    let mut start = 0;
    while start < states.len() {
        let prompt_id = states[start].0;
        let end = start
            + states[start..]
                .iter()
                .take_while(|(p, _, _)| *p == prompt_id)
                .count();
        prompt_ranges.insert(prompt_id, (start, end));
        start = end;
    }
    let mut ranges: Vec<(usize, usize, &Group)> = Vec::new();
    for group in groups {
        if let Some(&(lo, hi)) = prompt_ranges.get(&group.prompt_id) {
            ranges.push((lo, hi, group));
        }
    }
    let covered: usize = ranges.iter().map(|&(lo, hi, _)| hi - lo).sum();
    if covered != states.len() {
        return Err(validation!(
            "sampled states reference prompts missing from the group list"
        ));
    }

    let mut estimates: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &method in &methods {
        let per_group: Vec<(usize, Vec<f64>)> = ranges
            .par_iter()
            .map(|&(lo, hi, group)| {
                let group_states: Vec<(u64, usize)> =
                    states[lo..hi].iter().map(|&(_, r, t)| (r, t)).collect();
                Ok((
                    lo,
                    group_estimates(group, env, method, &group_states, options)?,
                ))
            })
            .collect::<Result<_>>()?;
        let mut values = vec![0.0f64; states.len()];
        for (lo, group_values) in per_group {
            values[lo..lo + group_values.len()].copy_from_slice(&group_values);
        }
        estimates.insert(method.name(), values);
    }

    let records: Vec<SvebRecord> = states
        .iter()
        .enumerate()
        .map(|(i, &(prompt_id, rollout_id, token_index))| {
            let per_method: BTreeMap<String, f64> = estimates
                .iter()
                .map(|(name, values)| (name.clone(), values[i]))
                .collect();
            let reference_value = references[i];
            for (name, value) in &per_method {
                if !(0.0..=1.0).contains(value) {
                    return Err(validation!(
                        "estimate {name} = {value} outside [0, 1] at (rollout {rollout_id}, \
                         token {token_index})"
                    ));
                }
            }
            if !(0.0..=1.0).contains(&reference_value) {
                return Err(validation!(
                    "reference {reference_value} outside [0, 1] at (rollout {rollout_id}, \
                     token {token_index})"
                ));
            }
            Ok(SvebRecord {
                prompt_id,
                rollout_id,
                token_index,
                reference_value,
                estimates: per_method,
            })
        })
        .collect::<Result<_>>()?;

    let mut report = SvebReport {
        reference_mode,
        n_ignored,
        n_records: records.len(),
        mae: BTreeMap::new(),
        histograms: BTreeMap::new(),
    };
    for &method in &methods {
        let name = method.name();
        report.mae.insert(name.clone(), mae(&records, &name)?);
        report
            .histograms
            .insert(name.clone(), diff_histogram(&records, &name, options.bins)?);
    }
    Ok((records, report))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Validation(format!("csv output failed: {e}"))
}

/// Writes `report.csv` (`method,mae,n_records`) and one
/// `hist_<method>.csv` (`bin_lo,bin_hi,count`) per method into `dir`.
pub fn write_report_csv(dir: &Path, report: &SvebReport) -> Result<()> {
    let mut writer = csv::Writer::from_path(dir.join("report.csv")).map_err(csv_error)?;
    writer
        .write_record(["method", "mae", "n_records"])
        .map_err(csv_error)?;
    for (method, mae) in &report.mae {
        writer
            .write_record([
                method.as_str(),
                &mae.to_string(),
                &report.n_records.to_string(),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    for (method, histogram) in &report.histograms {
        let mut writer =
            csv::Writer::from_path(dir.join(format!("hist_{method}.csv"))).map_err(csv_error)?;
        writer
            .write_record(["bin_lo", "bin_hi", "count"])
            .map_err(csv_error)?;
        for (i, count) in histogram.counts.iter().enumerate() {
            writer
                .write_record([
                    &histogram.edges[i].to_string(),
                    &histogram.edges[i + 1].to_string(),
                    &count.to_string(),
                ])
                .map_err(csv_error)?;
        }
        writer.flush()?;
    }
    Ok(())
}

/// Writes the scored records as `records.jsonl` into `dir`.
pub fn write_records_jsonl(dir: &Path, records: &[SvebRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("records.jsonl"))?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| Error::Format {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_env::{exact_token_values, generate};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn test_env(seed: u64) -> (EnvConfig, Vec<Group>, BTreeMap<u64, LatentTrace>) {
        let config = crate::synth_env::tests::chain_config(3, 4, 0.15, seed);
        let (groups, latents) = generate(&config, 6, 4).unwrap();
        (config, groups, latents)
    }

    #[test]
    fn test_method_spec_parsing() {
        assert_eq!("grpo".parse::<MethodSpec>().unwrap(), MethodSpec::Grpo);
        assert_eq!("numca".parse::<MethodSpec>().unwrap(), MethodSpec::Numca);
        assert_eq!("hista".parse::<MethodSpec>().unwrap(), MethodSpec::Hista);
        assert_eq!("mcs@7".parse::<MethodSpec>().unwrap(), MethodSpec::Mcs(7));
        assert_eq!(MethodSpec::Mcs(20).name(), "mcs@20");
        for bad in ["mcs@0", "mcs@", "mcs@x", "ppo", "GRPO"] {
            assert!(bad.parse::<MethodSpec>().is_err(), "{bad} should fail");
        }
    }

    #[test]
    fn test_collect_states_full_coverage_sorted() {
        let (_, groups, _) = test_env(1);
        let states = collect_states(&groups, usize::MAX, 9).unwrap();
        let mut expected = Vec::new();
        for group in &groups {
            for rollout in &group.rollouts {
                for t in 0..rollout.eta() {
                    expected.push((group.prompt_id, rollout.rollout_id, t));
                }
            }
        }
        expected.sort_unstable();
        assert_eq!(states, expected);
    }

    #[test]
    fn test_collect_states_deterministic_and_validated() {
        let (_, groups, _) = test_env(2);
        let a = collect_states(&groups, 3, 7).unwrap();
        let b = collect_states(&groups, 3, 7).unwrap();
        assert_eq!(a, b);
        let c = collect_states(&groups, 3, 8).unwrap();
        assert_ne!(a, c, "different seeds should differ");
        assert!(collect_states(&groups, 0, 7).is_err());
        // Without replacement: no duplicate states.
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(a, dedup);
    }

    #[test]
    fn test_collect_states_uniform_marginals() {
        // One rollout of length 10, per_rollout = 2, 10^4 seeds: each
        // position appears with frequency 0.2 +- 0.02.
        let eta = 10usize;
        let mut tokens = vec!["<p>".to_string()];
        tokens.extend((0..eta).map(|i| format!(" t{i}")));
        let rollout = crate::trace_model::Rollout {
            rollout_id: 0,
            prompt_id: 0,
            tokens,
            prompt_len: 1,
            reward: 0.0,
            hidden: crate::trace_model::F32Matrix::from_vec(vec![0.0; eta * 2], eta, 2).unwrap(),
            terminal: true,
        };
        let groups = vec![Group {
            prompt_id: 0,
            rollouts: vec![rollout],
        }];
        let per = 2usize;
        let draws = 10_000;
        let mut counts = vec![0usize; eta];
        for s in 0..draws {
            for &(_, _, t) in &collect_states(&groups, per, s as u64).unwrap() {
                counts[t] += 1;
            }
        }
        let expected = per as f64 / eta as f64;
        for (t, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - expected).abs() <= 0.02,
                "position {t}: frequency {freq} vs {expected}"
            );
        }
    }

    #[test]
    fn test_reference_exact_matches_token_values() {
        let (config, groups, latents) = test_env(4);
        let states = collect_states(&groups, 3, 5).unwrap();
        let refs = reference_values(
            &states,
            &groups,
            Some((&config, &latents)),
            &ReferenceMode::Exact,
            5,
        )
        .unwrap();
        for (&(_, rollout_id, t), &value) in states.iter().zip(&refs) {
            let (group, idx) = rollout_lookup(&groups)[&rollout_id];
            let expect =
                exact_token_values(&group.rollouts[idx], &latents[&rollout_id], &config).unwrap();
            assert_eq!(value, expect[t]);
        }
    }

    #[test]
    fn test_reference_mcs_terminal_state_is_realized_outcome() {
        let (config, groups, latents) = test_env(5);
        // Last token of a terminal rollout: reference equals its reward.
        let mut states = Vec::new();
        for group in &groups {
            for rollout in &group.rollouts {
                if rollout.terminal {
                    states.push((group.prompt_id, rollout.rollout_id, rollout.eta() - 1));
                }
            }
        }
        assert!(!states.is_empty());
        let refs = reference_values(
            &states,
            &groups,
            Some((&config, &latents)),
            &ReferenceMode::Mcs { n: 1 },
            11,
        )
        .unwrap();
        let lookup = rollout_lookup(&groups);
        for (&(_, rollout_id, _), &value) in states.iter().zip(&refs) {
            let (group, idx) = lookup[&rollout_id];
            assert_eq!(value, group.rollouts[idx].reward);
        }
    }

    #[test]
    fn test_mcs_token_values_cover_every_token() {
        let (config, groups, latents) = test_env(21);
        let group = &groups[0];
        let assignments = mcs_token_values(group, &config, &latents, 3, 17).unwrap();
        assert_eq!(assignments.len(), group.size());
        for (assignment, rollout) in assignments.iter().zip(&group.rollouts) {
            assert_eq!(assignment.rollout_id, rollout.rollout_id);
            assert_eq!(assignment.method, Method::Mcs);
            assert_eq!(assignment.values.len(), rollout.eta());
            assert!(assignment.values.iter().all(|v| (0.0..=1.0).contains(v)));
            // Post-final state is resolved, so the last value is realized.
            let last = *assignment.values.last().unwrap();
            if rollout.terminal {
                assert_eq!(last, rollout.reward);
            } else {
                assert_eq!(last, 0.0);
            }
            for (advantage, value) in assignment.advantages.iter().zip(&assignment.values) {
                assert!((advantage - (rollout.reward - value)).abs() < 1e-15);
            }
        }
        // Deterministic across calls, rejects a zero continuation budget.
        let again = mcs_token_values(group, &config, &latents, 3, 17).unwrap();
        assert_eq!(assignments, again);
        assert!(mcs_token_values(group, &config, &latents, 0, 17).is_err());
    }

    /// Exact expected absolute error of a Binomial(n, v)/n estimate of v.
    fn binomial_expected_abs_error(n: usize, v: f64) -> f64 {
        let mut pmf = vec![0.0f64; n + 1];
        pmf[0] = (1.0 - v).powi(n as i32);
        for k in 1..=n {
            // pmf[k] = pmf[k-1] * (n-k+1)/k * v/(1-v), guarded for v = 1.
            if v == 1.0 {
                pmf[k] = if k == n { 1.0 } else { 0.0 };
            } else {
                pmf[k] = pmf[k - 1] * ((n - k + 1) as f64 / k as f64) * (v / (1.0 - v));
            }
        }
        pmf.iter()
            .enumerate()
            .map(|(k, p)| p * (k as f64 / n as f64 - v).abs())
            .sum()
    }

    #[test]
    fn test_reference_mcs_matches_binomial_error_profile() {
        let config = crate::synth_env::tests::chain_config(3, 4, 0.15, 6);
        let (groups, latents) = generate(&config, 60, 4).unwrap();
        let states = collect_states(&groups, 2, 13).unwrap();
        let env = Some((&config, &latents));
        let exact = reference_values(&states, &groups, env, &ReferenceMode::Exact, 13).unwrap();
        let n = 20;
        let mcs = reference_values(&states, &groups, env, &ReferenceMode::Mcs { n }, 13).unwrap();
        let empirical: f64 = exact
            .iter()
            .zip(&mcs)
            .map(|(e, m)| (e - m).abs())
            .sum::<f64>()
            / states.len() as f64;
        let expected: f64 = exact
            .iter()
            .map(|&v| binomial_expected_abs_error(n, v))
            .sum::<f64>()
            / states.len() as f64;
        // Mean absolute error concentrates: allow 3 standard errors with the
        // conservative per-state variance bound v(1-v)/n <= 1/(4n).
        let se = (0.25 / n as f64 / states.len() as f64).sqrt();
        assert!(
            (empirical - expected).abs() <= 3.0 * se + 1e-9,
            "empirical {empirical} vs binomial {expected} (se {se})"
        );
    }

    #[test]
    fn test_reference_offline_and_missing_state() {
        let (_, groups, _) = test_env(7);
        let states = vec![(0u64, 0u64, 0usize), (0, 0, 1)];
        let mut continuations = BTreeMap::new();
        continuations.insert((0u64, 0usize), vec![1.0, 0.0, 1.0]);
        continuations.insert((0u64, 1usize), vec![0.0]);
        let refs = reference_values(
            &states,
            &groups,
            None,
            &ReferenceMode::Offline {
                continuations: &continuations,
            },
            0,
        )
        .unwrap();
        assert!((refs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(refs[1], 0.0);
        let missing = vec![(0u64, 0u64, 5usize)];
        match reference_values(
            &missing,
            &groups,
            None,
            &ReferenceMode::Offline {
                continuations: &continuations,
            },
            0,
        ) {
            Err(Error::Config(msg)) => assert!(msg.contains("missing state")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    fn record(reference: f64, pairs: &[(&str, f64)]) -> SvebRecord {
        SvebRecord {
            prompt_id: 0,
            rollout_id: 0,
            token_index: 0,
            reference_value: reference,
            estimates: pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }

    #[test]
    fn test_mae_hand_examples() {
        let records = vec![record(0.0, &[("m", 0.5)]), record(1.0, &[("m", 0.5)])];
        assert_eq!(mae(&records, "m").unwrap(), 0.5);
        let exact = vec![record(0.3, &[("m", 0.3)]), record(0.9, &[("m", 0.9)])];
        assert_eq!(mae(&exact, "m").unwrap(), 0.0);
        assert!(mae(&records, "absent").is_err());
        assert!(mae(&[], "m").is_err());
    }

    #[test]
    fn test_mae_matches_naive_recomputation() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        let records: Vec<SvebRecord> = (0..100)
            .map(|_| record(rng.gen_range(0.0..=1.0), &[("m", rng.gen_range(0.0..=1.0))]))
            .collect();
        let got = mae(&records, "m").unwrap();
        let mut naive = 0.0;
        for r in &records {
            naive += (r.estimates["m"] - r.reference_value).abs();
        }
        naive /= records.len() as f64;
        assert!((got - naive).abs() < 1e-15);
    }

    fn group_with_rewards(prompt_id: u64, rewards: &[f64]) -> Group {
        let (_, groups, _) = test_env(prompt_id + 40);
        let mut group = groups.into_iter().next().unwrap();
        group.prompt_id = prompt_id;
        group.rollouts.truncate(rewards.len());
        for (rollout, &reward) in group.rollouts.iter_mut().zip(rewards) {
            rollout.reward = reward;
            rollout.prompt_id = prompt_id;
        }
        group
    }

    #[test]
    fn test_difficulty_filter_boundaries_inclusive() {
        let groups = vec![
            group_with_rewards(0, &[0.0, 0.1]), // accuracy 0.05 -> drop
            group_with_rewards(1, &[0.1, 0.1]), // 0.1 -> keep
            group_with_rewards(2, &[0.5, 0.5]), // 0.5 -> keep
            group_with_rewards(3, &[0.8, 0.8]), // 0.8 -> keep
            group_with_rewards(4, &[0.9, 0.8]), // 0.85 -> drop
        ];
        let kept = difficulty_filter(groups, 0.1, 0.8);
        let ids: Vec<u64> = kept.iter().map(|g| g.prompt_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        let again = difficulty_filter(kept.clone(), 0.1, 0.8);
        assert_eq!(kept, again);
    }

    #[test]
    fn test_diff_histogram_grpo_spike_and_placement() {
        let records = vec![
            record(0.5, &[("grpo", 0.5), ("m", 0.5)]),
            record(0.5, &[("grpo", 0.25), ("m", 0.25)]),
        ];
        let hist = diff_histogram(&records, "grpo", DEFAULT_BINS).unwrap();
        assert_eq!(hist.total(), 2);
        assert_eq!(hist.counts[DEFAULT_BINS / 2], 2, "all mass in the zero bin");
        assert!(hist.edges[DEFAULT_BINS / 2] < 0.0 && hist.edges[DEFAULT_BINS / 2 + 1] > 0.0);

        let spread = vec![
            record(0.5, &[("grpo", 0.0), ("m", 1.0)]), // diff +1 -> last bin
            record(0.5, &[("grpo", 1.0), ("m", 0.0)]), // diff -1 -> first bin
        ];
        let hist = diff_histogram(&spread, "m", DEFAULT_BINS).unwrap();
        assert_eq!(hist.counts[DEFAULT_BINS - 1], 1);
        assert_eq!(hist.counts[0], 1);
        assert_eq!(hist.total(), 2);
    }

    #[test]
    fn test_run_sveb_end_to_end_exact_reference() {
        let (config, groups, latents) = test_env(8);
        let options = SvebOptions {
            per_rollout: 3,
            methods: vec![MethodSpec::Numca, MethodSpec::Hista, MethodSpec::Mcs(2)],
            reference: SvebReference::Exact { requested_n: None },
            seed: 17,
            hista: HistaParams {
                phi: 1,
                delta: 2,
                k: 8,
                alpha: 0.5,
                ..HistaParams::default()
            },
            ..SvebOptions::default()
        };
        let (records, report) = run_sveb(&groups, Some((&config, &latents)), &options).unwrap();
        assert_eq!(report.n_records, records.len());
        assert!(!report.n_ignored);
        assert_eq!(report.reference_mode, "exact");
        // grpo is added implicitly; every method is scored.
        for name in ["grpo", "numca", "hista", "mcs@2"] {
            assert!(report.mae.contains_key(name), "missing {name}");
            assert_eq!(report.histograms[name].total(), records.len() as u64);
        }
        for record in &records {
            assert!((0.0..=1.0).contains(&record.reference_value));
            for value in record.estimates.values() {
                assert!((0.0..=1.0).contains(value));
            }
        }
        // Determinism.
        let (records_b, report_b) = run_sveb(&groups, Some((&config, &latents)), &options).unwrap();
        assert_eq!(records, records_b);
        assert_eq!(report, report_b);
    }

    #[test]
    fn test_run_sveb_flags_ignored_n() {
        let (config, groups, latents) = test_env(9);
        let options = SvebOptions {
            per_rollout: 2,
            methods: vec![MethodSpec::Grpo],
            reference: SvebReference::Exact {
                requested_n: Some(20),
            },
            seed: 3,
            ..SvebOptions::default()
        };
        let (_, report) = run_sveb(&groups, Some((&config, &latents)), &options).unwrap();
        assert!(report.n_ignored);
    }

    #[test]
    fn test_run_sveb_mcs_reference_mode() {
        let (config, groups, latents) = test_env(10);
        let options = SvebOptions {
            per_rollout: 2,
            methods: vec![MethodSpec::Grpo],
            reference: SvebReference::Mcs { n: 4 },
            seed: 29,
            ..SvebOptions::default()
        };
        let (records, report) = run_sveb(&groups, Some((&config, &latents)), &options).unwrap();
        assert_eq!(report.reference_mode, "mcs@4");
        assert!(!report.n_ignored);
        // Every reference is a mean of 4 zero/one outcomes.
        for record in &records {
            let scaled = record.reference_value * 4.0;
            assert!((scaled - scaled.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn test_mcs_reference_error_shrinks_with_n_on_average() {
        let mut mae_by_n = [0.0f64; 3];
        let runs = 12;
        for seed in 0..runs {
            let config = crate::synth_env::tests::chain_config(3, 4, 0.15, 100 + seed);
            let (groups, latents) = generate(&config, 12, 4).unwrap();
            let states = collect_states(&groups, 3, seed).unwrap();
            let env = Some((&config, &latents));
            let exact =
                reference_values(&states, &groups, env, &ReferenceMode::Exact, seed).unwrap();
            for (slot, n) in [(0usize, 1usize), (1, 2), (2, 3)] {
                let mcs = reference_values(&states, &groups, env, &ReferenceMode::Mcs { n }, seed)
                    .unwrap();
                mae_by_n[slot] += exact
                    .iter()
                    .zip(&mcs)
                    .map(|(e, m)| (e - m).abs())
                    .sum::<f64>()
                    / states.len() as f64;
            }
        }
        assert!(
            mae_by_n[0] > mae_by_n[1] && mae_by_n[1] > mae_by_n[2],
            "averaged reference error should shrink with n: {mae_by_n:?}"
        );
    }

    #[test]
    fn test_csv_outputs_round_trip() {
        let (config, groups, latents) = test_env(11);
        let options = SvebOptions {
            per_rollout: 2,
            methods: vec![MethodSpec::Numca],
            reference: SvebReference::Exact { requested_n: None },
            seed: 5,
            ..SvebOptions::default()
        };
        let (records, report) = run_sveb(&groups, Some((&config, &latents)), &options).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report_csv(dir.path(), &report).unwrap();
        write_records_jsonl(dir.path(), &records).unwrap();
        let report_text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let mut lines = report_text.lines();
        assert_eq!(lines.next().unwrap(), "method,mae,n_records");
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), report.mae.len());
        for method in report.mae.keys() {
            let hist_text =
                std::fs::read_to_string(dir.path().join(format!("hist_{method}.csv"))).unwrap();
            let mut total = 0u64;
            for line in hist_text.lines().skip(1) {
                total += line.rsplit(',').next().unwrap().parse::<u64>().unwrap();
            }
            assert_eq!(total, report.n_records as u64);
        }
        let recorded = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
        assert_eq!(recorded.lines().count(), records.len());
    }

    proptest! {
        #[test]
        fn prop_histogram_conserves_count(diffs in proptest::collection::vec(-1.0f64..=1.0, 1..200)) {
            let records: Vec<SvebRecord> = diffs
                .iter()
                .map(|&d| {
                    // Any pair with estimate - grpo = d; center both at 0.5.
                    let half = d / 2.0;
                    record(0.5, &[("grpo", 0.5 - half), ("m", 0.5 + half)])
                })
                .collect();
            let hist = diff_histogram(&records, "m", DEFAULT_BINS).unwrap();
            prop_assert_eq!(hist.total(), records.len() as u64);
        }

        #[test]
        fn prop_filter_idempotent(seed in 0u64..50) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let groups: Vec<Group> = (0..6)
                .map(|i| {
                    let rewards: Vec<f64> =
                        (0..3).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
                    group_with_rewards(i, &rewards)
                })
                .collect();
            let once = difficulty_filter(groups, 0.1, 0.8);
            let twice = difficulty_filter(once.clone(), 0.1, 0.8);
            prop_assert_eq!(once, twice);
        }
    }
}
