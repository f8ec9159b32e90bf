//! Numerical-milestone credit assignment.
//!
//! Numbers appearing in the decoded generated text are treated as verifiable
//! subgoals ("milestones"). The set of milestones achieved so far forms an
//! abstract state; each abstract state is valued at the mean terminal reward
//! of the rollouts that reached it, and every token inherits the value of the
//! abstract state active at it. With no milestones anywhere the method
//! degenerates exactly to the group-average baseline.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::ops::Range;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation, Result};
use crate::trace_model::{Group, Method, Rollout, ValueAssignment};

/// A built-in milestone pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    /// `\frac{a}{b}` with signed integer numerator, normalized to `a/b`.
    LatexFraction,
    /// `a/b` with signed integer numerator and unsigned denominator.
    SlashFraction,
    /// Signed decimal such as `-0.25`.
    Decimal,
    /// Signed integer such as `+042`.
    SignedInteger,
}

impl PatternKind {
    fn name(&self) -> &'static str {
        match self {
            PatternKind::LatexFraction => "latex_fraction",
            PatternKind::SlashFraction => "slash_fraction",
            PatternKind::Decimal => "decimal",
            PatternKind::SignedInteger => "signed_integer",
        }
    }

    fn regex_fragment(&self) -> &'static str {
        match self {
            PatternKind::LatexFraction => r"\\frac\{[-+]?[0-9]+\}\{[-+]?[0-9]+\}",
            PatternKind::SlashFraction => r"[-+]?[0-9]+/[0-9]+",
            PatternKind::Decimal => r"[-+]?[0-9]+\.[0-9]+",
            PatternKind::SignedInteger => r"[-+]?[0-9]+",
        }
    }
}

/// Ordered milestone pattern set.
///
/// Order is the alternation order of the combined matcher; the default places
/// composite forms before their prefixes (fractions, then decimals, then
/// integers) so the longest form wins at any given start position.
#[derive(Debug, Clone)]
pub struct MilestonePatterns {
    kinds: Vec<PatternKind>,
    regex: Regex,
}

impl PartialEq for MilestonePatterns {
    fn eq(&self, other: &Self) -> bool {
        // The regex is a pure function of the kind list.
        self.kinds == other.kinds
    }
}

impl Default for MilestonePatterns {
    fn default() -> Self {
        Self::new(vec![
            PatternKind::LatexFraction,
            PatternKind::SlashFraction,
            PatternKind::Decimal,
            PatternKind::SignedInteger,
        ])
        .expect("built-in pattern set compiles")
    }
}

impl MilestonePatterns {
    /// Builds a matcher from an ordered, non-empty list of pattern kinds.
    pub fn new(kinds: Vec<PatternKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(config_err!("milestone pattern list is empty"));
        }
        let alternation = kinds
            .iter()
            .map(|k| format!("(?P<{}>{})", k.name(), k.regex_fragment()))
            .collect::<Vec<_>>()
            .join("|");
        let regex = Regex::new(&alternation)
            .map_err(|e| config_err!("milestone pattern set failed to compile: {e}"))?;
        Ok(Self { kinds, regex })
    }

    /// Builds a matcher from built-in pattern names (config entry point).
    pub fn from_names(names: &[String]) -> Result<Self> {
        let kinds = names
            .iter()
            .map(|name| match name.as_str() {
                "latex_fraction" => Ok(PatternKind::LatexFraction),
                "slash_fraction" => Ok(PatternKind::SlashFraction),
                "decimal" => Ok(PatternKind::Decimal),
                "signed_integer" => Ok(PatternKind::SignedInteger),
                other => Err(config_err!("unknown milestone pattern '{other}'")),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(kinds)
    }

    /// Names of the configured kinds, in order.
    pub fn names(&self) -> Vec<String> {
        self.kinds.iter().map(|k| k.name().to_string()).collect()
    }
}

/// Strips a leading `+` and redundant leading zeros from a signed integer
/// literal, keeping at least one digit ("042" -> "42", "+7" -> "7").
fn normalize_integer(text: &str) -> String {
    let (sign, digits) = match text.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", text.strip_prefix('+').unwrap_or(text)),
    };
    let stripped = digits.trim_start_matches('0');
    let digits = if stripped.is_empty() { "0" } else { stripped };
    format!("{sign}{digits}")
}

/// Canonical milestone string for a raw match of the given kind.
fn normalize_match(kind: PatternKind, raw: &str) -> String {
    match kind {
        PatternKind::SignedInteger => normalize_integer(raw),
        PatternKind::Decimal => {
            let (int_part, frac_part) = raw.split_once('.').expect("decimal contains a dot");
            format!("{}.{}", normalize_integer(int_part), frac_part)
        }
        PatternKind::SlashFraction => {
            let (num, den) = raw.split_once('/').expect("fraction contains a slash");
            format!("{}/{}", normalize_integer(num), normalize_integer(den))
        }
        PatternKind::LatexFraction => {
            // \frac{a}{b} -> a/b with both parts normalized as integers.
            let inner = raw.strip_prefix(r"\frac{").expect("latex fraction prefix");
            let (num, rest) = inner.split_once('}').expect("numerator brace");
            let den = rest
                .strip_prefix('{')
                .and_then(|r| r.strip_suffix('}'))
                .expect("denominator braces");
            format!("{}/{}", normalize_integer(num), normalize_integer(den))
        }
    }
}

/// One milestone match: the normalized string plus its byte span in the
/// scanned text.
#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneMatch {
    /// Canonical milestone string.
    pub milestone: String,
    /// Byte range of the raw match.
    pub span: Range<usize>,
}

/// Scans `text` left to right for non-overlapping milestone matches,
/// returning normalized milestones with their byte spans.
pub fn extract_with_spans(text: &str, patterns: &MilestonePatterns) -> Vec<MilestoneMatch> {
    let mut matches = Vec::new();
    let mut start = 0;
    while start <= text.len() {
        let Some(captures) = patterns.regex.captures_at(text, start) else {
            break;
        };
        let kind = patterns
            .kinds
            .iter()
            .copied()
            .find(|k| captures.name(k.name()).is_some())
            .expect("one alternation branch participates");
        let matched = captures.name(kind.name()).expect("participating branch");
        matches.push(MilestoneMatch {
            milestone: normalize_match(kind, matched.as_str()),
            span: matched.range(),
        });
        // Continue after the match; empty matches are impossible (every
        // pattern requires at least one digit).
        start = matched.end();
    }
    matches
}

/// Ordered list of normalized milestone strings found in `text`.
pub fn extract_milestones(text: &str, patterns: &MilestonePatterns) -> Vec<String> {
    extract_with_spans(text, patterns)
        .into_iter()
        .map(|m| m.milestone)
        .collect()
}

/// An abstract state: the canonical set of milestones achieved so far.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct AbstractState {
    milestones: BTreeSet<String>,
}

impl AbstractState {
    /// The empty state (no milestones yet).
    pub fn empty() -> Self {
        Self::default()
    }

    /// Milestones in canonical (sorted) order.
    pub fn milestones(&self) -> impl Iterator<Item = &str> {
        self.milestones.iter().map(|s| s.as_str())
    }

    /// Number of milestones in the set.
    pub fn len(&self) -> usize {
        self.milestones.len()
    }

    /// True for the empty state.
    pub fn is_empty(&self) -> bool {
        self.milestones.is_empty()
    }
}

/// Count and reward sum accumulated for one abstract state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TableEntry {
    /// Number of rollouts that visited the state.
    pub count: u64,
    /// Sum of those rollouts' terminal rewards.
    pub reward_sum: f64,
}

impl TableEntry {
    /// Estimated state value: mean terminal reward of visiting rollouts.
    pub fn value(&self) -> f64 {
        self.reward_sum / self.count as f64
    }
}

/// Map from abstract state to `(count, reward_sum)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MilestoneTable {
    entries: BTreeMap<AbstractState, TableEntry>,
}

impl MilestoneTable {
    /// Entry for `state`, if any rollout visited it.
    pub fn get(&self, state: &AbstractState) -> Option<&TableEntry> {
        self.entries.get(state)
    }

    /// Iterates entries in canonical state order.
    pub fn iter(&self) -> impl Iterator<Item = (&AbstractState, &TableEntry)> {
        self.entries.iter()
    }

    /// Number of distinct abstract states.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// True when no states were recorded.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Abstract-state walk of one rollout's generated tokens.
struct RolloutWalk {
    /// Index into `states` of the abstract state active at each token.
    state_at_token: Vec<usize>,
    /// Distinct states in first-visit order; `states[0]` is the empty state.
    states: Vec<AbstractState>,
}

/// Walks a rollout's generated tokens, tracking the abstract state per token.
///
/// Matching runs on the concatenated generated text (prompt excluded); each
/// match is attributed to the token containing its final byte, so the
/// abstract state changes exactly at that token.
fn walk_rollout(rollout: &Rollout, patterns: &MilestonePatterns) -> RolloutWalk {
    let generated = rollout.generated_tokens();
    let text: String = generated.concat();
    let matches = extract_with_spans(&text, patterns);

    // Cumulative byte end of each generated token within `text`.
    let mut token_ends = Vec::with_capacity(generated.len());
    let mut end = 0;
    for token in generated {
        end += token.len();
        token_ends.push(end);
    }
    // Milestones bucketed by the token covering their last byte.
    let mut per_token: Vec<Vec<&str>> = vec![Vec::new(); generated.len()];
    for m in &matches {
        let last_byte = m.span.end - 1;
        let token_idx = token_ends.partition_point(|&e| e <= last_byte);
        per_token[token_idx].push(&m.milestone);
    }

    let mut current = BTreeSet::new();
    let mut states = vec![AbstractState::empty()];
    let mut current_idx = 0;
    let mut state_at_token = Vec::with_capacity(generated.len());
    for milestones in &per_token {
        let mut changed = false;
        for &milestone in milestones {
            changed |= current.insert(milestone.to_string());
        }
        if changed {
            states.push(AbstractState {
                milestones: current.clone(),
            });
            current_idx = states.len() - 1;
        }
        state_at_token.push(current_idx);
    }
    RolloutWalk {
        state_at_token,
        states,
    }
}

fn table_from_walks(group: &Group, walks: &[RolloutWalk]) -> MilestoneTable {
    let mut table = MilestoneTable::default();
    for (rollout, walk) in group.rollouts.iter().zip(walks) {
        for state in &walk.states {
            let entry = table.entries.entry(state.clone()).or_default();
            entry.count += 1;
            entry.reward_sum += rollout.reward;
        }
    }
    table
}

/// Builds the abstract-state table for a group: every distinct abstract state
/// a rollout visits contributes `(1, terminal reward)` once, and the empty
/// state is recorded once per rollout.
pub fn build_table(group: &Group, patterns: &MilestonePatterns) -> Result<MilestoneTable> {
    if group.rollouts.is_empty() {
        return Err(validation!("group {}: empty group", group.prompt_id));
    }
    let walks: Vec<RolloutWalk> = group
        .rollouts
        .iter()
        .map(|r| walk_rollout(r, patterns))
        .collect();
    Ok(table_from_walks(group, &walks))
}

/// Milestone-based values: each generated token is valued at the mean reward
/// of the rollouts that visited the abstract state active at it; advantage is
/// `reward - value`.
pub fn numca_values(group: &Group, patterns: &MilestonePatterns) -> Result<Vec<ValueAssignment>> {
    if group.rollouts.is_empty() {
        return Err(validation!("group {}: empty group", group.prompt_id));
    }
    let walks: Vec<RolloutWalk> = group
        .rollouts
        .iter()
        .map(|r| walk_rollout(r, patterns))
        .collect();
    let table = table_from_walks(group, &walks);
    Ok(group
        .rollouts
        .iter()
        .zip(&walks)
        .map(|(rollout, walk)| {
            let values: Vec<f64> = walk
                .state_at_token
                .iter()
                .map(|&idx| {
                    table
                        .get(&walk.states[idx])
                        .expect("visited state is in table")
                        .value()
                })
                .collect();
            let advantages = values.iter().map(|v| rollout.reward - v).collect();
            ValueAssignment {
                rollout_id: rollout.rollout_id,
                method: Method::Numca,
                values,
                advantages,
            }
        })
        .collect())
}
