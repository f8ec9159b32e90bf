//! Hidden-state based state-value estimation.
//!
//! Pipeline per group: (1) compress each rollout's hidden states with an EMA
//! subsampled every `phi` tokens, (2) sample prefix states every `delta`
//! embeddings, (3) measure distances between sampled prefixes of different
//! rollouts with the MinDistance operation, (4) value each sampled state as
//! the inverse-distance weighted mean of its k nearest neighbors' terminal
//! rewards. Token-level values are piecewise constant from the most recent
//! sampled state; tokens before the first sampled state (and rollouts too
//! short to sample any state) fall back to the group-average reward.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::trace_model::{F32Matrix, Group, Method, Rollout, ValueAssignment};

/// Dense row-major `f64` matrix used for embeddings and distance grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
}

impl Matrix {
    /// Builds a matrix from row-major data; `data.len()` must be `rows * dim`.
    pub fn from_vec(data: Vec<f64>, rows: usize, dim: usize) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(validation!(
                "matrix data length {} does not match {} rows x {} dim",
                data.len(),
                rows,
                dim
            ));
        }
        Ok(Self { data, rows, dim })
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row `i` as a slice of length `dim`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Entry at `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Matrix with the first `rows` rows of `self`.
    pub fn prefix(&self, rows: usize) -> Matrix {
        Matrix {
            data: self.data[..rows * self.dim].to_vec(),
            rows,
            dim: self.dim,
        }
    }
}

/// Distance between two embedding rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Euclidean (L2) distance — the standard choice.
    #[default]
    Euclidean,
    /// `1 - cosine similarity`; experimental ablation variant only.
    Cosine,
}

impl Metric {
    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

/// Hista hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistaParams {
    /// EMA smoothing factor, in `[0, 1)`; 0 means no smoothing.
    pub alpha: f64,
    /// Compression interval: tokens per embedding, `>= 1`.
    pub phi: usize,
    /// State sampling interval: embeddings per sampled state, `>= 1`.
    pub delta: usize,
    /// Neighbor count, `>= 1`.
    pub k: usize,
    /// Distance floor applied before inversion, `> 0`.
    pub eps_dist: f64,
    /// Embedding-row distance; Euclidean unless running the cosine ablation.
    pub metric: Metric,
}

impl Default for HistaParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            phi: 5,
            delta: 50,
            k: 66,
            eps_dist: 1e-6,
            metric: Metric::Euclidean,
        }
    }
}

impl HistaParams {
    /// Validates every parameter range.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(validation!("hista alpha {} must lie in [0, 1)", self.alpha));
        }
        if self.phi < 1 || self.delta < 1 || self.k < 1 {
            return Err(validation!(
                "hista phi/delta/k must all be >= 1 (got {}, {}, {})",
                self.phi,
                self.delta,
                self.k
            ));
        }
        if self.eps_dist <= 0.0 {
            return Err(validation!(
                "hista eps_dist {} must be positive",
                self.eps_dist
            ));
        }
        Ok(())
    }

    /// Tokens spanned by one sampled state (`phi * delta`).
    fn tokens_per_state(&self) -> usize {
        self.phi * self.delta
    }
}

/// EMA-compressed embedding sequence plus sampled state positions for one
/// rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTrace {
    /// Source rollout.
    pub rollout_id: u64,
    /// Embeddings, one per `phi` tokens, shape `floor(eta/phi) x dim`.
    pub embeddings: Matrix,
    /// Sampled state positions in embedding units: `delta, 2*delta, ...`.
    pub state_positions: Vec<usize>,
    /// Terminal reward copied from the rollout.
    pub reward: f64,
}

impl CompressedTrace {
    /// Number of sampled states.
    pub fn n_states(&self) -> usize {
        self.state_positions.len()
    }
}

/// EMA compression of a hidden-state matrix: `m_1 = x_1`,
/// `m_t = alpha * m_{t-1} + (1 - alpha) * x_t`, keeping `m_{i*phi}` for
/// `i = 1..floor(eta/phi)`.
///
/// Errors when `eta < phi` (no embedding fits); use [`compress_trace`] for
/// the tolerant whole-pipeline variant.
pub fn compress(hidden: &F32Matrix, alpha: f64, phi: usize) -> Result<Matrix> {
    if hidden.rows() < phi {
        return Err(validation!(
            "cannot compress {} hidden rows with interval {}",
            hidden.rows(),
            phi
        ));
    }
    Ok(compress_lenient(hidden, alpha, phi))
}

/// As [`compress`] but returns an empty matrix when `eta < phi`.
fn compress_lenient(hidden: &F32Matrix, alpha: f64, phi: usize) -> Matrix {
    let dim = hidden.dim();
    let n_embeddings = hidden.rows() / phi;
    let mut data = Vec::with_capacity(n_embeddings * dim);
    let mut ema = vec![0.0f64; dim];
    for t in 0..hidden.rows() {
        let row = hidden.row(t);
        if t == 0 {
            for (m, &x) in ema.iter_mut().zip(row) {
                *m = x as f64;
            }
        } else {
            for (m, &x) in ema.iter_mut().zip(row) {
                *m = alpha * *m + (1.0 - alpha) * x as f64;
            }
        }
        if (t + 1) % phi == 0 {
            data.extend_from_slice(&ema);
        }
        if data.len() == n_embeddings * dim {
            break;
        }
    }
    Matrix::from_vec(data, n_embeddings, dim).expect("embedding count accounting")
}

/// Compresses a rollout and samples its state positions.
pub fn compress_trace(rollout: &Rollout, params: &HistaParams) -> CompressedTrace {
    let embeddings = compress_lenient(&rollout.hidden, params.alpha, params.phi);
    let n_states = embeddings.rows() / params.delta;
    CompressedTrace {
        rollout_id: rollout.rollout_id,
        embeddings,
        state_positions: (1..=n_states).map(|i| i * params.delta).collect(),
        reward: rollout.reward,
    }
}

fn directed_sum(from: &Matrix, to: &Matrix, metric: Metric) -> f64 {
    (0..from.rows())
        .map(|i| {
            (0..to.rows())
                .map(|j| metric.distance(from.row(i), to.row(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// MinDistance between two hidden-state sequences: the sum, over the longer
/// sequence, of each row's distance to its nearest row in the other sequence.
///
/// Equal-length sequences take the larger of the two directed sums so the
/// operation stays symmetric.
pub fn min_distance(x1: &Matrix, x2: &Matrix) -> Result<f64> {
    min_distance_metric(x1, x2, Metric::Euclidean)
}

/// [`min_distance`] under an explicit row metric.
pub fn min_distance_metric(x1: &Matrix, x2: &Matrix, metric: Metric) -> Result<f64> {
    if x1.dim() != x2.dim() {
        return Err(validation!(
            "min_distance dimension mismatch: {} vs {}",
            x1.dim(),
            x2.dim()
        ));
    }
    if x1.rows() == 0 || x2.rows() == 0 {
        return Err(validation!("min_distance requires non-empty sequences"));
    }
    Ok(match x1.rows().cmp(&x2.rows()) {
        std::cmp::Ordering::Greater => directed_sum(x1, x2, metric),
        std::cmp::Ordering::Less => directed_sum(x2, x1, metric),
        std::cmp::Ordering::Equal => directed_sum(x1, x2, metric).max(directed_sum(x2, x1, metric)),
    })
}

/// All sampled-prefix MinDistances between two compressed traces.
///
/// Entry `(i, j)` equals `min_distance` between A's first `(i+1)*delta`
/// embeddings and B's first `(j+1)*delta` embeddings, computed for all pairs
/// at once: one pass maintains running row minima (as the B prefix grows) and
/// prefix sums (as the A prefix grows), and a symmetric pass covers the case
/// where B's prefix is the longer one. Cost is `O(nA*nB*d + nA*nB)` against
/// the naive `O(nA*nB*(nA+nB)*d / delta^2)` recomputation.
pub fn prefix_distance_grid(
    a: &CompressedTrace,
    b: &CompressedTrace,
    params: &HistaParams,
) -> Result<Matrix> {
    let delta = params.delta;
    let metric = params.metric;
    if a.embeddings.dim() != b.embeddings.dim() {
        return Err(validation!(
            "prefix grid dimension mismatch: {} vs {}",
            a.embeddings.dim(),
            b.embeddings.dim()
        ));
    }
    let n_a = a.n_states();
    let n_b = b.n_states();
    if n_a == 0 || n_b == 0 {
        return Matrix::from_vec(Vec::new(), n_a, n_b);
    }
    let rows_a = n_a * delta;
    let rows_b = n_b * delta;

    // Pairwise embedding distances, row-major over (A row, B row).
    let mut dist = vec![0.0f64; rows_a * rows_b];
    for i in 0..rows_a {
        let ra = a.embeddings.row(i);
        for j in 0..rows_b {
            dist[i * rows_b + j] = metric.distance(ra, b.embeddings.row(j));
        }
    }

    // sum_a[i_state][j_state]: sum over A-prefix rows of min over B-prefix rows.
    // sum_b[i_state][j_state]: sum over B-prefix rows of min over A-prefix rows.
    let mut sum_a = vec![0.0f64; n_a * n_b];
    let mut sum_b = vec![0.0f64; n_a * n_b];
    let mut acc_row_min = vec![0.0f64; rows_b]; // running sum over i of (prefix-min over j)
    let mut col_min = vec![f64::INFINITY; rows_b]; // min over i' <= i of dist[i'][j]
    for i in 0..rows_a {
        let row = &dist[i * rows_b..(i + 1) * rows_b];
        let mut prefix_min = f64::INFINITY;
        for j in 0..rows_b {
            prefix_min = prefix_min.min(row[j]);
            acc_row_min[j] += prefix_min;
            col_min[j] = col_min[j].min(row[j]);
        }
        if (i + 1) % delta == 0 {
            let i_state = (i + 1) / delta - 1;
            // Record both directed sums for every B prefix.
            let mut col_min_running = 0.0f64;
            for j in 0..rows_b {
                col_min_running += col_min[j];
                if (j + 1) % delta == 0 {
                    let j_state = (j + 1) / delta - 1;
                    sum_a[i_state * n_b + j_state] = acc_row_min[j];
                    sum_b[i_state * n_b + j_state] = col_min_running;
                }
            }
        }
    }

    let mut grid = vec![0.0f64; n_a * n_b];
    for i_state in 0..n_a {
        for j_state in 0..n_b {
            let idx = i_state * n_b + j_state;
            grid[idx] = match i_state.cmp(&j_state) {
                std::cmp::Ordering::Greater => sum_a[idx],
                std::cmp::Ordering::Less => sum_b[idx],
                std::cmp::Ordering::Equal => sum_a[idx].max(sum_b[idx]),
            };
        }
    }
    Matrix::from_vec(grid, n_a, n_b)
}

/// One neighbor of a query state.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    /// Rollout the neighbor state belongs to (never the query's own).
    pub rollout_id: u64,
    /// Zero-based sampled-state index within that rollout.
    pub state_index: usize,
    /// MinDistance to the query prefix, floored at `eps_dist`.
    pub distance: f64,
    /// Terminal reward of the neighbor's rollout.
    pub reward: f64,
}

/// The k nearest neighbors of one sampled query state, ascending by
/// `(distance, rollout_id, state_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    /// Query rollout.
    pub rollout_id: u64,
    /// Zero-based sampled-state index of the query.
    pub state_index: usize,
    /// Neighbors, at most `k`.
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    /// Inverse-distance weighted mean of the neighbors' rewards.
    pub fn value(&self) -> f64 {
        let mut weight_sum = 0.0;
        let mut weighted_reward = 0.0;
        for n in &self.neighbors {
            let w = 1.0 / n.distance;
            weight_sum += w;
            weighted_reward += w * n.reward;
        }
        weighted_reward / weight_sum
    }
}

/// Per-rollout sampled-state values for a group, plus the group-average
/// fallback used wherever no sampled state is available.
struct GroupStateValues {
    group_average: f64,
    /// `per_rollout[r][s]` = value of rollout r's sampled state s.
    per_rollout: Vec<Vec<f64>>,
}

/// Computes the k-nearest-neighbor sets of every sampled state in the group.
///
/// Candidates for a query exclude every state of the query's own rollout.
/// Requires at least two rollouts.
pub fn neighbor_sets(group: &Group, params: &HistaParams) -> Result<Vec<Vec<NeighborSet>>> {
    params.validate()?;
    if group.rollouts.len() < 2 {
        return Err(validation!(
            "group {}: hista requires at least 2 rollouts, got {}",
            group.prompt_id,
            group.rollouts.len()
        ));
    }
    let traces: Vec<CompressedTrace> = group
        .rollouts
        .iter()
        .map(|r| compress_trace(r, params))
        .collect();

    // Pairwise prefix-distance grids; grids[p][q] holds the grid between
    // traces p and q for p < q. MinDistance symmetry makes the transposed
    // lookup valid for the reverse direction.
    let n = traces.len();
    let mut grids: Vec<Vec<Option<Matrix>>> = vec![vec![None; n]; n];
    for p in 0..n {
        for q in (p + 1)..n {
            if traces[p].n_states() > 0 && traces[q].n_states() > 0 {
                grids[p][q] = Some(prefix_distance_grid(&traces[p], &traces[q], params)?);
            }
        }
    }

    let mut result = Vec::with_capacity(n);
    for (qi, query) in traces.iter().enumerate() {
        let mut sets = Vec::with_capacity(query.n_states());
        for si in 0..query.n_states() {
            let mut candidates: Vec<Neighbor> = Vec::new();
            for (ci, candidate) in traces.iter().enumerate() {
                if ci == qi {
                    continue;
                }
                let distance_to = |sj: usize| -> f64 {
                    if qi < ci {
                        grids[qi][ci].as_ref().expect("grid computed").get(si, sj)
                    } else {
                        grids[ci][qi].as_ref().expect("grid computed").get(sj, si)
                    }
                };
                for sj in 0..candidate.n_states() {
                    candidates.push(Neighbor {
                        rollout_id: candidate.rollout_id,
                        state_index: sj,
                        distance: distance_to(sj).max(params.eps_dist),
                        reward: candidate.reward,
                    });
                }
            }
            candidates.sort_unstable_by(|a, b| {
                a.distance
                    .total_cmp(&b.distance)
                    .then(a.rollout_id.cmp(&b.rollout_id))
                    .then(a.state_index.cmp(&b.state_index))
            });
            candidates.truncate(params.k);
            sets.push(NeighborSet {
                rollout_id: query.rollout_id,
                state_index: si,
                neighbors: candidates,
            });
        }
        result.push(sets);
    }
    Ok(result)
}

fn group_state_values(group: &Group, params: &HistaParams) -> Result<GroupStateValues> {
    let sets = neighbor_sets(group, params)?;
    let group_average = group.mean_reward();
    let per_rollout = sets
        .into_iter()
        .map(|rollout_sets| {
            rollout_sets
                .into_iter()
                .map(|set| {
                    if set.neighbors.is_empty() {
                        group_average
                    } else {
                        set.value()
                    }
                })
                .collect()
        })
        .collect();
    Ok(GroupStateValues {
        group_average,
        per_rollout,
    })
}

/// Value of generated token `t` given per-state values: the most recent
/// sampled state at or before `t`, else the group average.
fn token_value(state_values: &[f64], group_average: f64, tokens_per_state: usize, t: usize) -> f64 {
    let state_number = ((t + 1) / tokens_per_state).min(state_values.len());
    if state_number == 0 {
        group_average
    } else {
        state_values[state_number - 1]
    }
}

/// Hidden-state k-NN values for every token of every rollout in the group;
/// advantage is `reward - value` per token.
pub fn hista_values(group: &Group, params: &HistaParams) -> Result<Vec<ValueAssignment>> {
    let state_values = group_state_values(group, params)?;
    let tokens_per_state = params.tokens_per_state();
    Ok(group
        .rollouts
        .iter()
        .zip(&state_values.per_rollout)
        .map(|(rollout, values_here)| {
            let values: Vec<f64> = (0..rollout.eta())
                .map(|t| token_value(values_here, state_values.group_average, tokens_per_state, t))
                .collect();
            let advantages = values.iter().map(|v| rollout.reward - v).collect();
            ValueAssignment {
                rollout_id: rollout.rollout_id,
                method: Method::Hista,
                values,
                advantages,
            }
        })
        .collect())
}

/// Values of explicitly probed states `(rollout_id, token_index)`, using the
/// same sampled-state machinery as [`hista_values`].
pub fn hista_state_values(
    group: &Group,
    params: &HistaParams,
    states: &[(u64, usize)],
) -> Result<Vec<f64>> {
    let state_values = group_state_values(group, params)?;
    let tokens_per_state = params.tokens_per_state();
    let index_of: std::collections::BTreeMap<u64, usize> = group
        .rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| (r.rollout_id, i))
        .collect();
    states
        .iter()
        .map(|&(rollout_id, token_index)| {
            let &ri = index_of
                .get(&rollout_id)
                .ok_or_else(|| validation!("rollout {rollout_id} not in group"))?;
            if token_index >= group.rollouts[ri].eta() {
                return Err(validation!(
                    "rollout {rollout_id}: token index {token_index} outside generated range {}",
                    group.rollouts[ri].eta()
                ));
            }
            Ok(token_value(
                &state_values.per_rollout[ri],
                state_values.group_average,
                tokens_per_state,
                token_index,
            ))
        })
        .collect()
}
