//! Numeric verification of the analytical results that underpin the
//! estimators: RMSNorm Lipschitz/magnitude bounds, softmax stability, the
//! structured-softmax aggregation identity, the probability-weighted bias
//! decomposition, and the bias-improvement theorem.
//!
//! Identities are checked exactly (both sides computed through independent
//! arithmetic routes); inequalities are checked by randomized falsification
//! with per-trial derived seeds so runs are reproducible and parallelizable.
//! A deliberately broken softmax fixture is provided so the harness itself
//! can be shown to catch violations.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{validation, Result};
use crate::rng::{stream, tags};

/// RMSNorm: `g .* x / sqrt(mean(x^2) + eps)`.
///
/// `eps` must be non-negative; with `eps = 0` and `x = 0` the output is the
/// zero vector (the normalizing denominator vanishes together with `x`).
pub fn rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(x.len(), g.len(), "rmsnorm gain length must match input");
    assert!(eps >= 0.0, "rmsnorm eps must be non-negative");
    let d = x.len() as f64;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / d;
    let denom = (mean_sq + eps).sqrt();
    if denom == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().zip(g).map(|(v, gi)| gi * v / denom).collect()
}

/// Numerically stable softmax: exponentials are taken after subtracting the
/// maximum entry, then normalized to sum to 1.
pub fn softmax(p: &[f64]) -> Vec<f64> {
    assert!(!p.is_empty(), "softmax of an empty vector is undefined");
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = p.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Deliberately broken softmax that doubles its logits before normalizing.
/// Its Lipschitz constant exceeds 1/2, so the softmax stability suite (and
/// anything composed on top of it) must flag violations when run with this
/// fixture in place of [`softmax`].
pub fn sabotaged_softmax(p: &[f64]) -> Vec<f64> {
    let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
    softmax(&doubled)
}

/// Softmax implementation under test in the randomized suites.
pub type SoftmaxFn = fn(&[f64]) -> Vec<f64>;

/// Replicated-and-shifted softmax construction: the first block of `p1`
/// entries is replicated per `replications`, the remaining entries are
/// shifted by `deltas`, and the replicated mass is aggregated back.
///
/// Returns `(a1, aggregated, closed_form)` where `a1 = softmax(p1)`,
/// `aggregated` sums the replicated coordinates of the softmax over the
/// expanded vector, and `closed_form` is `a1_i * kappa_i / kappa_bar` with
/// `kappa_i` the replication count (first block) or `exp(delta_i)` (second
/// block) and `kappa_bar = sum_i a1_i * kappa_i`. The two outputs agree up
/// to floating-point rounding; tests enforce 1e-12.
pub fn structured_softmax_aggregate(
    p1: &[f64],
    replications: &[usize],
    deltas: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n_rep = replications.len();
    if n_rep + deltas.len() != p1.len() {
        return Err(validation!(
            "replications ({}) plus deltas ({}) must cover p1 ({})",
            n_rep,
            deltas.len(),
            p1.len()
        ));
    }
    let expanded_len: usize = replications.iter().sum::<usize>() + deltas.len();
    if expanded_len == 0 {
        return Err(validation!(
            "construction is empty: zero total replication and no shifted entries"
        ));
    }

    // Direct route: build the expanded vector, softmax, re-aggregate.
    let mut p2 = Vec::with_capacity(expanded_len);
    for (i, &r) in replications.iter().enumerate() {
        p2.extend(std::iter::repeat_n(p1[i], r));
    }
    for (j, &delta) in deltas.iter().enumerate() {
        p2.push(p1[n_rep + j] + delta);
    }
    let a2 = softmax(&p2);
    let mut aggregated = Vec::with_capacity(p1.len());
    let mut cursor = 0;
    for &r in replications {
        aggregated.push(a2[cursor..cursor + r].iter().sum());
        cursor += r;
    }
    aggregated.extend_from_slice(&a2[cursor..]);

    // Closed form: a1_i * kappa_i / kappa_bar.
    let a1 = softmax(p1);
    let kappa: Vec<f64> = replications
        .iter()
        .map(|&r| r as f64)
        .chain(deltas.iter().map(|&d| d.exp()))
        .collect();
    let kappa_bar: f64 = a1.iter().zip(&kappa).map(|(a, k)| a * k).sum();
    let closed_form: Vec<f64> = a1
        .iter()
        .zip(&kappa)
        .map(|(a, k)| a * k / kappa_bar)
        .collect();
    Ok((a1, aggregated, closed_form))
}

/// A probability-weighted estimation instance: candidate values, the target
/// state's value, and non-negative selection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PwInstance {
    /// Candidate state values `V(s_i)`.
    pub values: Vec<f64>,
    /// Target state value `V(s_t)`.
    pub target: f64,
    /// Non-negative weights `P_{t,i}` with positive mean.
    pub weights: Vec<f64>,
}

impl PwInstance {
    /// Validates lengths, weight signs, and positive mean weight.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.len() != self.weights.len() {
            return Err(validation!(
                "instance needs equal-length non-empty values ({}) and weights ({})",
                self.values.len(),
                self.weights.len()
            ));
        }
        if self.weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(validation!("weights must be finite and non-negative"));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(validation!("weights must have positive mean"));
        }
        Ok(())
    }
}

/// Both sides of the bias decomposition for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwBias {
    /// Bias of the plain average estimate: `mean(values) - target`.
    pub bias_avg: f64,
    /// Bias of the weighted estimate: `sum(w*v)/sum(w) - target`.
    pub bias_pw: f64,
    /// `E[X]` with `X_i = values_i - target` under the uniform index.
    pub ex: f64,
    /// `Cov(W, X)` under the uniform index.
    pub cov_wx: f64,
    /// `E[W]` under the uniform index.
    pub ew: f64,
}

/// Computes the weighted and unweighted biases directly, together with the
/// moment quantities of the decomposition identity
/// `bias_pw = E[X] + Cov(W, X) / E[W]`. The two routes are kept separate so
/// the identity can be verified rather than assumed.
pub fn pw_bias_decomposition(inst: &PwInstance) -> Result<PwBias> {
    inst.validate()?;
    let n = inst.values.len() as f64;
    let bias_avg = inst.values.iter().sum::<f64>() / n - inst.target;
    let weight_sum: f64 = inst.weights.iter().sum();
    let weighted_value: f64 = inst
        .weights
        .iter()
        .zip(&inst.values)
        .map(|(w, v)| w * v)
        .sum();
    let bias_pw = weighted_value / weight_sum - inst.target;

    let ex = inst.values.iter().map(|v| v - inst.target).sum::<f64>() / n;
    let ew = weight_sum / n;
    let ewx = inst
        .weights
        .iter()
        .zip(&inst.values)
        .map(|(w, v)| w * (v - inst.target))
        .sum::<f64>()
        / n;
    let cov_wx = ewx - ew * ex;
    Ok(PwBias {
        bias_avg,
        bias_pw,
        ex,
        cov_wx,
        ew,
    })
}

/// Evaluates the two admissibility conditions on the weight/value coupling:
/// `sign_ok`: `E[X] * Cov(W,X) <= 0`; `magnitude_ok`:
/// `|Cov(W,X)| <= 2 * E[W] * |E[X]|`.
pub fn check_assumption_b3(inst: &PwInstance) -> Result<(bool, bool)> {
    let bias = pw_bias_decomposition(inst)?;
    let sign_ok = bias.ex * bias.cov_wx <= 0.0;
    let magnitude_ok = bias.cov_wx.abs() <= 2.0 * bias.ew * bias.ex.abs();
    Ok((sign_ok, magnitude_ok))
}

/// Outcome of the randomized bias-improvement oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct B2Oracle {
    /// Total instances sampled.
    pub sampled: usize,
    /// Instances satisfying both admissibility conditions.
    pub satisfying: usize,
    /// Satisfying instances where `|bias_pw| > |bias_avg| + 1e-12`.
    pub violations: usize,
    /// Instances failing the magnitude condition.
    pub magnitude_failures: usize,
    /// Magnitude-failing instances that violate the inequality — evidence
    /// that the admissibility conditions are doing real work.
    pub rejected_witnesses: usize,
}

fn random_pw_instance(rng: &mut ChaCha12Rng) -> PwInstance {
    let n = rng.gen_range(1..=6);
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let target = rng.gen_range(0.0..=1.0);
    loop {
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        if weights.iter().sum::<f64>() > 0.0 {
            return PwInstance {
                values,
                target,
                weights,
            };
        }
    }
}

/// Samples `n_instances` random instances; on those satisfying both
/// admissibility conditions, asserts `|bias_pw| <= |bias_avg| + 1e-12` and
/// counts violations (the theorem guarantees zero). Among instances failing
/// the magnitude condition it counts inequality violators, which must exist
/// for the oracle to be informative.
pub fn theorem_b2_oracle(n_instances: usize, seed: u64) -> B2Oracle {
    let reduce = |a: B2Oracle, b: B2Oracle| B2Oracle {
        sampled: a.sampled + b.sampled,
        satisfying: a.satisfying + b.satisfying,
        violations: a.violations + b.violations,
        magnitude_failures: a.magnitude_failures + b.magnitude_failures,
        rejected_witnesses: a.rejected_witnesses + b.rejected_witnesses,
    };
    let zero = B2Oracle {
        sampled: 0,
        satisfying: 0,
        violations: 0,
        magnitude_failures: 0,
        rejected_witnesses: 0,
    };
    (0..n_instances as u64)
        .into_par_iter()
        .map(|case| {
            let mut rng = stream(seed, &[tags::THEORY, SUITE_B2 as u64, case]);
            let inst = random_pw_instance(&mut rng);
            let bias = pw_bias_decomposition(&inst).expect("sampled instances are valid");
            let (sign_ok, magnitude_ok) = check_assumption_b3(&inst).expect("validated above");
            let violates = bias.bias_pw.abs() > bias.bias_avg.abs() + 1e-12;
            B2Oracle {
                sampled: 1,
                satisfying: (sign_ok && magnitude_ok) as usize,
                violations: (sign_ok && magnitude_ok && violates) as usize,
                magnitude_failures: (!magnitude_ok) as usize,
                rejected_witnesses: (!magnitude_ok && violates) as usize,
            }
        })
        .reduce(|| zero, reduce)
}

/// Result of one randomized verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    /// Registered suite name.
    pub name: &'static str,
    /// Number of randomized trials run.
    pub trials: usize,
    /// Trials that violated the suite's bound or identity.
    pub violations: usize,
    /// Worst observed slack: bound suites report the largest ratio of
    /// achieved-to-allowed deviation, identity suites the largest residual.
    pub worst: f64,
    /// Extra human-readable context (e.g. witness counts).
    pub detail: String,
    /// Whether the suite's full contract held.
    pub passed: bool,
}

const SUITE_RMS_LIPSCHITZ: usize = 0;
const SUITE_RMS_MAGNITUDE: usize = 1;
const SUITE_SOFTMAX_LIPSCHITZ: usize = 2;
const SUITE_STRUCTURED_IDENTITY: usize = 3;
const SUITE_PW_IDENTITY: usize = 4;
const SUITE_B2: usize = 5;
const SUITE_PRELN_BLOCK: usize = 6;

/// Registered suite names in execution order.
pub const SUITE_NAMES: [&str; 7] = [
    "rmsnorm_lipschitz",
    "rmsnorm_magnitude",
    "softmax_lipschitz",
    "structured_softmax_identity",
    "pw_bias_identity",
    "theorem_b2_oracle",
    "preln_block_composed_bound",
];

/// Default trial counts per suite, aligned with [`SUITE_NAMES`].
pub const SUITE_DEFAULT_TRIALS: [usize; 7] =
    [100_000, 100_000, 100_000, 10_000, 10_000, 100_000, 2_000];

/// Relative slack granted to proven inequalities to absorb floating-point
/// rounding in the bound evaluation itself.
const REL_SLACK: f64 = 1e-9;
const ABS_SLACK: f64 = 1e-12;

fn uniform_vec(rng: &mut ChaCha12Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(lo..hi)).collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, &x| m.max(x.abs()))
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One trial returning (violated, slack-ratio-or-residual).
type TrialFn = dyn Fn(&mut ChaCha12Rng) -> (bool, f64) + Sync;

fn run_trials(suite: usize, trials: usize, seed: u64, trial: &TrialFn) -> (usize, f64) {
    (0..trials as u64)
        .into_par_iter()
        .map(|case| {
            let mut rng = stream(seed, &[tags::THEORY, suite as u64, case]);
            let (violated, worst) = trial(&mut rng);
            (violated as usize, worst)
        })
        .reduce(|| (0, 0.0), |a, b| (a.0 + b.0, a.1.max(b.1)))
}

fn rms_lipschitz_trial(rng: &mut ChaCha12Rng) -> (bool, f64) {
    let d = rng.gen_range(1..=8);
    let x1 = uniform_vec(rng, d, -5.0, 5.0);
    let x2 = uniform_vec(rng, d, -5.0, 5.0);
    let g = uniform_vec(rng, d, -2.0, 2.0);
    let eps = rng.gen_range(0.01..1.0);
    let lhs = diff_norm(&rmsnorm(&x1, &g, eps), &rmsnorm(&x2, &g, eps));
    let bound = norm_inf(&g) / eps.sqrt() * diff_norm(&x1, &x2);
    let allowed = bound * (1.0 + REL_SLACK) + ABS_SLACK;
    (lhs > allowed, if bound > 0.0 { lhs / bound } else { 0.0 })
}

fn rms_magnitude_trial(rng: &mut ChaCha12Rng) -> (bool, f64) {
    let d = rng.gen_range(1..=8);
    let x = uniform_vec(rng, d, -5.0, 5.0);
    let g = uniform_vec(rng, d, -2.0, 2.0);
    // Include the boundary eps = 0 where the bound is tight.
    let eps = if rng.gen_bool(0.2) {
        0.0
    } else {
        rng.gen_range(0.0..1.0)
    };
    let lhs = norm2(&rmsnorm(&x, &g, eps));
    let bound = (d as f64).sqrt() * norm_inf(&g);
    let allowed = bound * (1.0 + REL_SLACK) + ABS_SLACK;
    (lhs > allowed, if bound > 0.0 { lhs / bound } else { 0.0 })
}

fn softmax_lipschitz_trial(rng: &mut ChaCha12Rng, softmax_fn: SoftmaxFn) -> (bool, f64) {
    let d = rng.gen_range(2..=8);
    let p1 = uniform_vec(rng, d, -6.0, 6.0);
    // Half the pairs are local perturbations across several length scales;
    // distant pairs alone never stress the bound because outputs live in
    // the bounded simplex.
    let p2 = if rng.gen_bool(0.5) {
        let scale = 10f64.powf(rng.gen_range(-4.0..0.5));
        p1.iter()
            .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        uniform_vec(rng, d, -6.0, 6.0)
    };
    let lhs = diff_norm(&softmax_fn(&p1), &softmax_fn(&p2));
    let bound = 0.5 * diff_norm(&p1, &p2);
    let allowed = bound * (1.0 + REL_SLACK) + ABS_SLACK;
    (lhs > allowed, if bound > 0.0 { lhs / bound } else { 0.0 })
}

fn structured_identity_trial(rng: &mut ChaCha12Rng) -> (bool, f64) {
    let len = rng.gen_range(1..=6);
    let n_rep = rng.gen_range(1..=len);
    let p1 = uniform_vec(rng, len, -3.0, 3.0);
    let deltas = uniform_vec(rng, len - n_rep, -2.0, 2.0);
    let mut replications: Vec<usize> = (0..n_rep).map(|_| rng.gen_range(0..=4)).collect();
    if replications.iter().sum::<usize>() == 0 && deltas.is_empty() {
        replications[0] = 1;
    }
    let (_, aggregated, closed_form) =
        structured_softmax_aggregate(&p1, &replications, &deltas).expect("valid construction");
    let mut worst = 0.0f64;
    let mut violated = false;
    for (a, c) in aggregated.iter().zip(&closed_form) {
        let residual = (a - c).abs();
        worst = worst.max(residual);
        if residual > 1e-12 * (1.0 + c.abs()) {
            violated = true;
        }
    }
    (violated, worst)
}

fn pw_identity_trial(rng: &mut ChaCha12Rng) -> (bool, f64) {
    let inst = random_pw_instance(rng);
    let bias = pw_bias_decomposition(&inst).expect("sampled instances are valid");
    let residual_pw = (bias.bias_pw - (bias.ex + bias.cov_wx / bias.ew)).abs();
    let n = inst.values.len() as f64;
    let ex_direct = inst.values.iter().map(|v| v - inst.target).sum::<f64>() / n;
    let residual_avg = (bias.bias_avg - ex_direct).abs();
    let worst = residual_pw.max(residual_avg);
    (worst > 1e-12, worst)
}

/// Tiny pre-LN transformer block acting on `eta` token vectors: normalized
/// self-attention with a residual connection, then a normalized two-layer
/// ReLU feed-forward with a residual connection.
struct PreLnBlock {
    dim: usize,
    eps: f64,
    g_attn: Vec<f64>,
    g_ffn: Vec<f64>,
    w_out: Vec<f64>, // dim x dim
    w_ff1: Vec<f64>, // hidden x dim
    w_ff2: Vec<f64>, // dim x hidden
    hidden: usize,
}

impl PreLnBlock {
    fn sample(rng: &mut ChaCha12Rng, dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            eps: rng.gen_range(0.05..0.5),
            g_attn: uniform_vec(rng, dim, -1.5, 1.5),
            g_ffn: uniform_vec(rng, dim, -1.5, 1.5),
            w_out: uniform_vec(rng, dim * dim, -0.7, 0.7),
            w_ff1: uniform_vec(rng, hidden * dim, -0.7, 0.7),
            w_ff2: uniform_vec(rng, dim * hidden, -0.7, 0.7),
            hidden,
        }
    }

    fn matvec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
        (0..rows)
            .map(|i| {
                w[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn forward(&self, tokens: &[Vec<f64>], softmax_fn: SoftmaxFn) -> Vec<Vec<f64>> {
        let eta = tokens.len();
        let scale = (self.dim as f64).sqrt();
        let normed: Vec<Vec<f64>> = tokens
            .iter()
            .map(|x| rmsnorm(x, &self.g_attn, self.eps))
            .collect();
        let mut after_attn = Vec::with_capacity(eta);
        for i in 0..eta {
            let scores: Vec<f64> = (0..eta)
                .map(|j| {
                    normed[i]
                        .iter()
                        .zip(&normed[j])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / scale
                })
                .collect();
            let attn = softmax_fn(&scores);
            let mut ctx = vec![0.0; self.dim];
            for (j, &a) in attn.iter().enumerate() {
                for (c, &v) in ctx.iter_mut().zip(&normed[j]) {
                    *c += a * v;
                }
            }
            let projected = Self::matvec(&self.w_out, self.dim, self.dim, &ctx);
            after_attn.push(
                tokens[i]
                    .iter()
                    .zip(&projected)
                    .map(|(x, p)| x + p)
                    .collect::<Vec<f64>>(),
            );
        }
        after_attn
            .iter()
            .map(|x| {
                let normed = rmsnorm(x, &self.g_ffn, self.eps);
                let mut h = Self::matvec(&self.w_ff1, self.hidden, self.dim, &normed);
                for v in &mut h {
                    *v = v.max(0.0);
                }
                let f = Self::matvec(&self.w_ff2, self.dim, self.hidden, &h);
                x.iter().zip(&f).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    /// End-to-end Lipschitz bound assembled from the per-primitive bounds:
    /// RMSNorm gain/eps ratio, the sqrt(d)*max|g| magnitude bound feeding
    /// the bilinear score stability, the softmax 1/2 factor, Frobenius
    /// bounds for the linear maps, and ReLU's 1-Lipschitz property.
    fn lipschitz_bound(&self, eta: usize) -> f64 {
        let frob = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let l_rms = norm_inf(&self.g_attn) / self.eps.sqrt();
        let l_rms_ffn = norm_inf(&self.g_ffn) / self.eps.sqrt();
        let b = (self.dim as f64).sqrt() * norm_inf(&self.g_attn);
        let eta_f = eta as f64;
        let d_f = self.dim as f64;
        // scores: ||ds||_F <= 2 B sqrt(eta/d) ||dx~||_F; softmax: 1/2;
        // context: sqrt(2) (B sqrt(eta) ||da||_F + sqrt(eta) ||dx~||_F).
        let l_ctx = (2.0f64).sqrt()
            * (b * eta_f.sqrt() * 0.5 * 2.0 * b * (eta_f / d_f).sqrt() + eta_f.sqrt());
        let l_attn = 1.0 + frob(&self.w_out) * l_ctx * l_rms;
        let l_ffn = 1.0 + frob(&self.w_ff1) * frob(&self.w_ff2) * l_rms_ffn;
        l_attn * l_ffn
    }
}

fn preln_block_trial(rng: &mut ChaCha12Rng, softmax_fn: SoftmaxFn) -> (bool, f64) {
    let dim = rng.gen_range(2..=6);
    let hidden = rng.gen_range(2..=8);
    let eta = 3;
    let block = PreLnBlock::sample(rng, dim, hidden);
    let xs: Vec<Vec<f64>> = (0..eta).map(|_| uniform_vec(rng, dim, -3.0, 3.0)).collect();
    let ys: Vec<Vec<f64>> = (0..eta).map(|_| uniform_vec(rng, dim, -3.0, 3.0)).collect();
    let out_x = block.forward(&xs, softmax_fn);
    let out_y = block.forward(&ys, softmax_fn);
    let frob_diff = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(r, s)| diff_norm(r, s).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let lhs = frob_diff(&out_x, &out_y);
    let bound = block.lipschitz_bound(eta) * frob_diff(&xs, &ys);
    let allowed = bound * (1.0 + REL_SLACK) + ABS_SLACK;
    (lhs > allowed, if bound > 0.0 { lhs / bound } else { 0.0 })
}

/// Runs one registered suite by name with the given trial count and softmax
/// implementation (injected so a broken softmax is detectable).
pub fn run_named_suite(
    name: &str,
    trials: usize,
    seed: u64,
    softmax_fn: SoftmaxFn,
) -> Result<SuiteOutcome> {
    let index = SUITE_NAMES
        .iter()
        .position(|&n| n == name)
        .ok_or_else(|| validation!("unknown suite {name:?}; see the registered suite list"))?;
    let outcome = match index {
        SUITE_RMS_LIPSCHITZ => {
            let (violations, worst) = run_trials(index, trials, seed, &rms_lipschitz_trial);
            SuiteOutcome {
                name: SUITE_NAMES[index],
                trials,
                violations,
                worst,
                detail: format!("worst ratio to bound {worst:.6}"),
                passed: violations == 0,
            }
        }
        SUITE_RMS_MAGNITUDE => {
            let (violations, worst) = run_trials(index, trials, seed, &rms_magnitude_trial);
            SuiteOutcome {
                name: SUITE_NAMES[index],
                trials,
                violations,
                worst,
                detail: format!("worst ratio to bound {worst:.6}"),
                passed: violations == 0,
            }
        }
        SUITE_SOFTMAX_LIPSCHITZ => {
            let trial = move |rng: &mut ChaCha12Rng| softmax_lipschitz_trial(rng, softmax_fn);
            let (violations, worst) = run_trials(index, trials, seed, &trial);
            SuiteOutcome {
                name: SUITE_NAMES[index],
                trials,
                violations,
                worst,
                detail: format!("worst ratio to bound {worst:.6}"),
                passed: violations == 0,
            }
        }
        SUITE_STRUCTURED_IDENTITY => {
            let (violations, worst) = run_trials(index, trials, seed, &structured_identity_trial);
            SuiteOutcome {
                name: SUITE_NAMES[index],
                trials,
                violations,
                worst,
                detail: format!("worst residual {worst:.3e}"),
                passed: violations == 0,
            }
        }
        SUITE_PW_IDENTITY => {
            let (violations, worst) = run_trials(index, trials, seed, &pw_identity_trial);
            SuiteOutcome {
                name: SUITE_NAMES[index],
                trials,
                violations,
                worst,
                detail: format!("worst residual {worst:.3e}"),
                passed: violations == 0,
            }
        }
        SUITE_B2 => {
            let oracle = theorem_b2_oracle(trials, seed);
            SuiteOutcome {
                name: SUITE_NAMES[index],
                trials,
                violations: oracle.violations,
                worst: oracle.violations as f64,
                detail: format!(
                    "{} satisfying, {} magnitude failures, {} rejected witnesses",
                    oracle.satisfying, oracle.magnitude_failures, oracle.rejected_witnesses
                ),
                passed: oracle.violations == 0 && oracle.rejected_witnesses >= 1,
            }
        }
        SUITE_PRELN_BLOCK => {
            let trial = move |rng: &mut ChaCha12Rng| preln_block_trial(rng, softmax_fn);
            let (violations, worst) = run_trials(index, trials, seed, &trial);
            SuiteOutcome {
                name: SUITE_NAMES[index],
                trials,
                violations,
                worst,
                detail: format!("worst ratio to bound {worst:.6}"),
                passed: violations == 0,
            }
        }
        _ => unreachable!("suite index derives from SUITE_NAMES"),
    };
    Ok(outcome)
}

/// Runs every registered suite with its default trial count.
pub fn run_all_suites(seed: u64, softmax_fn: SoftmaxFn) -> Result<Vec<SuiteOutcome>> {
    SUITE_NAMES
        .iter()
        .zip(SUITE_DEFAULT_TRIALS)
        .map(|(&name, trials)| run_named_suite(name, trials, seed, softmax_fn))
        .collect()
}
