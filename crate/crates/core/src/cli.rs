//! Command-line front end wiring the library into reproducible workflows:
//! `simulate` a trace bundle, `estimate` per-token values, run the `sveb`
//! evaluation, `bench` the prefix-distance grid, and `check` the analytical
//! verification suites.
//!
//! Every command is deterministic given its configuration and seed, and
//! every command that produces artifacts echoes the fully resolved
//! configuration next to them.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::{config_err, validation, Error, Result};
use crate::estimators::grpo_values;
use crate::hista::{hista_values, prefix_distance_grid, CompressedTrace, HistaParams, Matrix};
use crate::numca::numca_values;
use crate::rng::{stream, tags};
use crate::sveb::{
    difficulty_filter, mcs_token_values, run_sveb, write_records_jsonl, write_report_csv,
    MethodSpec, SvebOptions, SvebReference, DEFAULT_BINS,
};
use crate::synth_env::{generate, load_latents, store_latents, LATENTS_FILE};
use crate::theory::{
    run_named_suite, sabotaged_softmax, softmax, SoftmaxFn, SUITE_DEFAULT_TRIALS, SUITE_NAMES,
};
use crate::trace_model::{load_bundle, store_bundle, Group, ValueAssignment};

/// Continuation count used when a sampled reference is requested as plain
/// `mcs` with no explicit `@N` and no `sveb.n_reference` key.
const DEFAULT_N_REFERENCE: usize = 20;

/// Token-level state-value estimation toolkit.
#[derive(Debug, Parser)]
#[command(name = "seqval", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a trace bundle from a synthetic-environment config.
    Simulate(SimulateArgs),
    /// Compute per-token values and advantages for a bundle.
    Estimate(EstimateArgs),
    /// Score estimators against reference state values on a bundle.
    Sveb(SvebArgs),
    /// Time the prefix-distance grid over growing state counts.
    Bench(BenchArgs),
    /// Run the analytical verification suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Configuration file with an `[env]` section.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the bundle (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of prompts to simulate.
    #[arg(long, default_value_t = 8)]
    prompts: usize,
    /// Rollouts per prompt.
    #[arg(long, default_value_t = 8)]
    rollouts_per_prompt: usize,
    /// Worker threads (0 = automatic).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Bundle directory produced by `simulate`.
    bundle: PathBuf,
    /// Configuration file; defaults to the bundle's resolved config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated methods: grpo, numca, hista, mcs@N.
    #[arg(long, default_value = "grpo,numca,hista")]
    methods: String,
    /// Output directory; defaults to the bundle directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = automatic).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct SvebArgs {
    /// Bundle directory produced by `simulate`.
    bundle: PathBuf,
    /// Configuration file; defaults to the bundle's resolved config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated methods: grpo, numca, hista, mcs@N.
    #[arg(long, default_value = "grpo,numca,hista")]
    methods: String,
    /// Reference values: `exact` or `mcs@N`.
    #[arg(long, default_value = "exact")]
    reference: String,
    /// Output directory; defaults to the bundle directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = automatic).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated state counts to time.
    #[arg(long, default_value = "64,128,256")]
    sizes: String,
    /// Embedding dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Embeddings per sampled state.
    #[arg(long, default_value_t = 4)]
    delta: usize,
    /// Timing repetitions per size (fastest is reported).
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Output directory for `bench.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the synthetic embeddings.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = automatic).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Print the registered suite names and exit.
    #[arg(long)]
    list: bool,
    /// Run a single suite instead of all of them.
    #[arg(long)]
    suite: Option<String>,
    /// Trial-count override.
    #[arg(long)]
    trials: Option<usize>,
    /// Substitute the deliberately broken softmax to demonstrate that the
    /// suites catch violations.
    #[arg(long)]
    sabotage: bool,
    /// Seed for the randomized trials.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = automatic).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

/// Executes a parsed invocation; returns the process exit code for
/// successful runs (`check` reports suite failures through it).
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate(args) => {
            configure_threads(args.threads)?;
            cmd_simulate(args)
        }
        Command::Estimate(args) => {
            configure_threads(args.threads)?;
            cmd_estimate(args)
        }
        Command::Sveb(args) => {
            configure_threads(args.threads)?;
            cmd_sveb(args)
        }
        Command::Bench(args) => {
            configure_threads(args.threads)?;
            cmd_bench(args)
        }
        Command::Check(args) => {
            configure_threads(args.threads)?;
            cmd_check(args)
        }
    }
}

fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Validation(format!("cannot configure {threads} threads: {e}")))
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let config = RunConfig::load(&args.config)?.resolved(args.seed, args.out.as_deref());
    let out = config
        .out
        .clone()
        .ok_or_else(|| config_err!("no output directory: pass --out or set `out`"))?;
    let env = config.require_env()?;
    let (groups, latents) = generate(env, args.prompts, args.rollouts_per_prompt)?;
    fs::create_dir_all(&out)?;
    store_bundle(&groups, &out)?;
    store_latents(&out, &latents)?;
    config.write_resolved(&out)?;
    let rollouts: usize = groups.iter().map(Group::size).sum();
    println!(
        "simulated {} prompts ({rollouts} rollouts) into {}",
        groups.len(),
        out.display()
    );
    Ok(0)
}

/// Loads the explicit config if given, else the bundle's echoed resolved
/// config, else defaults.
fn load_config_for_bundle(explicit: Option<&Path>, bundle: &Path) -> Result<RunConfig> {
    if let Some(path) = explicit {
        return RunConfig::load(path);
    }
    let echoed = bundle.join(RESOLVED_CONFIG_FILE);
    if echoed.exists() {
        RunConfig::load(&echoed)
    } else {
        Ok(RunConfig::default())
    }
}

fn parse_methods(csv: &str) -> Result<Vec<MethodSpec>> {
    let methods: Vec<MethodSpec> = csv
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(config_err!("--methods selected nothing"));
    }
    Ok(methods)
}

fn parse_reference(spec: &str, config: &RunConfig) -> Result<SvebReference> {
    match spec {
        "exact" => Ok(SvebReference::Exact {
            requested_n: config.sveb.n_reference,
        }),
        "mcs" => Ok(SvebReference::Mcs {
            n: config.sveb.n_reference.unwrap_or(DEFAULT_N_REFERENCE),
        }),
        other => {
            let n = other
                .strip_prefix("mcs@")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    config_err!("--reference must be `exact` or `mcs@N`, got {other:?}")
                })?;
            Ok(SvebReference::Mcs { n })
        }
    }
}

/// Loads the latent sidecar, turning its absence into a configuration error
/// rather than a bare file-not-found.
fn load_required_latents(
    bundle: &Path,
) -> Result<std::collections::BTreeMap<u64, crate::synth_env::LatentTrace>> {
    if !bundle.join(LATENTS_FILE).exists() {
        return Err(config_err!(
            "{} has no {LATENTS_FILE}; simulate writes it alongside the bundle",
            bundle.display()
        ));
    }
    load_latents(bundle)
}

fn estimate_method(
    groups: &[Group],
    method: MethodSpec,
    config: &RunConfig,
    bundle: &Path,
    seed: u64,
) -> Result<Vec<ValueAssignment>> {
    let mut assignments = Vec::new();
    match method {
        MethodSpec::Grpo => {
            for group in groups {
                assignments.extend(grpo_values(group)?);
            }
        }
        MethodSpec::Numca => {
            let patterns = config.milestone_patterns()?;
            for group in groups {
                assignments.extend(numca_values(group, &patterns)?);
            }
        }
        MethodSpec::Hista => {
            config.hista.validate()?;
            for group in groups {
                assignments.extend(hista_values(group, &config.hista)?);
            }
        }
        MethodSpec::Mcs(n) => {
            let env = config.require_env()?;
            let latents = load_required_latents(bundle)?;
            for group in groups {
                assignments.extend(mcs_token_values(group, env, &latents, n, seed)?);
            }
        }
    }
    Ok(assignments)
}

fn write_assignments(out: &Path, method: &str, assignments: &[ValueAssignment]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(out.join(format!("values_{method}.jsonl")))?);
    for assignment in assignments {
        serde_json::to_writer(&mut writer, assignment).map_err(|e| Error::Format {
            line: 0,
            message: e.to_string(),
        })?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> Result<i32> {
    let config = load_config_for_bundle(args.config.as_deref(), &args.bundle)?
        .resolved(args.seed, args.out.as_deref());
    let seed = config.resolve_seed(None);
    let out = config.out.clone().unwrap_or_else(|| args.bundle.clone());
    let methods = parse_methods(&args.methods)?;
    let groups = load_bundle(&args.bundle)?;
    fs::create_dir_all(&out)?;
    for &method in &methods {
        let assignments = estimate_method(&groups, method, &config, &args.bundle, seed)?;
        write_assignments(&out, &method.name(), &assignments)?;
        println!(
            "wrote values_{}.jsonl ({} rollouts)",
            method.name(),
            assignments.len()
        );
    }
    config.write_resolved(&out)?;
    Ok(0)
}

fn cmd_sveb(args: SvebArgs) -> Result<i32> {
    let config = load_config_for_bundle(args.config.as_deref(), &args.bundle)?
        .resolved(args.seed, args.out.as_deref());
    let seed = config.resolve_seed(None);
    let out = config.out.clone().unwrap_or_else(|| args.bundle.clone());
    let methods = parse_methods(&args.methods)?;
    let reference = parse_reference(&args.reference, &config)?;
    let env = config.require_env()?;
    let latents = load_required_latents(&args.bundle)?;

    let groups = load_bundle(&args.bundle)?;
    let groups = difficulty_filter(groups, config.sveb.filter_lo, config.sveb.filter_hi);
    if groups.is_empty() {
        return Err(validation!(
            "difficulty filter [{}, {}] removed every group",
            config.sveb.filter_lo,
            config.sveb.filter_hi
        ));
    }

    let options = SvebOptions {
        per_rollout: config.sveb.per_rollout,
        methods,
        reference,
        seed,
        hista: config.hista,
        patterns: config.milestone_patterns()?,
        bins: DEFAULT_BINS,
    };
    let (records, report) = run_sveb(&groups, Some((env, &latents)), &options)?;
    fs::create_dir_all(&out)?;
    write_report_csv(&out, &report)?;
    write_records_jsonl(&out, &records)?;
    config.write_resolved(&out)?;
    for (method, mae) in &report.mae {
        println!("mae {method} = {mae:.6} ({} records)", report.n_records);
    }
    Ok(0)
}

fn parse_sizes(csv: &str) -> Result<Vec<usize>> {
    let sizes: Vec<usize> =
        csv.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
                    config_err!("--sizes entries must be positive integers, got {s:?}")
                })
            })
            .collect::<Result<_>>()?;
    if sizes.is_empty() {
        return Err(config_err!("--sizes selected nothing"));
    }
    Ok(sizes)
}

/// Synthetic compressed trace with `n_states * delta` random embedding rows.
fn bench_trace(
    n_states: usize,
    delta: usize,
    dim: usize,
    seed: u64,
    which: u64,
) -> CompressedTrace {
    let rows = n_states * delta;
    let mut rng = stream(seed, &[tags::BENCH, which]);
    let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    CompressedTrace {
        rollout_id: which,
        embeddings: Matrix::from_vec(data, rows, dim).expect("row accounting"),
        state_positions: (1..=n_states).map(|i| i * delta).collect(),
        reward: 0.0,
    }
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    let sizes = parse_sizes(&args.sizes)?;
    if args.dim == 0 || args.delta == 0 || args.repetitions == 0 {
        return Err(config_err!(
            "--dim, --delta, and --repetitions must be positive"
        ));
    }
    let params = HistaParams {
        delta: args.delta,
        phi: 1,
        ..HistaParams::default()
    };
    fs::create_dir_all(&args.out)?;
    let mut writer = BufWriter::new(File::create(args.out.join("bench.csv"))?);
    writeln!(writer, "n,total_seconds,seconds_per_cell")?;
    for &n in &sizes {
        let a = bench_trace(n, args.delta, args.dim, args.seed, 2 * n as u64);
        let b = bench_trace(n, args.delta, args.dim, args.seed, 2 * n as u64 + 1);
        let mut best = f64::INFINITY;
        let mut checksum = 0.0;
        for _ in 0..args.repetitions {
            let start = Instant::now();
            let grid = prefix_distance_grid(&a, &b, &params)?;
            best = best.min(start.elapsed().as_secs_f64());
            checksum = grid.row(n - 1)[n - 1];
        }
        let per_cell = best / (n * n) as f64;
        writeln!(writer, "{n},{best},{per_cell}")?;
        println!("n={n}: {best:.6}s total, {per_cell:.3e}s/cell (corner {checksum:.3})");
    }
    writer.flush()?;
    Ok(0)
}

fn suite_default_trials(name: &str) -> usize {
    SUITE_NAMES
        .iter()
        .position(|&n| n == name)
        .map(|i| SUITE_DEFAULT_TRIALS[i])
        .unwrap_or(0)
}

fn cmd_check(args: CheckArgs) -> Result<i32> {
    if args.list {
        for name in SUITE_NAMES {
            println!("{name}");
        }
        return Ok(0);
    }
    let softmax_fn: SoftmaxFn = if args.sabotage {
        sabotaged_softmax
    } else {
        softmax
    };
    let selected: Vec<&str> = match &args.suite {
        Some(name) => {
            if !SUITE_NAMES.contains(&name.as_str()) {
                return Err(config_err!(
                    "unknown suite {name:?}; `check --list` prints the registered names"
                ));
            }
            vec![name.as_str()]
        }
        None => SUITE_NAMES.to_vec(),
    };
    let mut all_passed = true;
    for name in selected {
        let trials = args.trials.unwrap_or_else(|| suite_default_trials(name));
        let outcome = run_named_suite(name, trials, args.seed, softmax_fn)?;
        all_passed &= outcome.passed;
        println!(
            "{} {}: {} trials, {} violations; {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.name,
            outcome.trials,
            outcome.violations,
            outcome.detail
        );
    }
    Ok(if all_passed { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_env::tests::chain_config;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    fn write_env_config(dir: &Path, seed: u64) -> PathBuf {
        let config = RunConfig {
            env: Some(chain_config(3, 4, 0.15, seed)),
            ..RunConfig::default()
        };
        let path = dir.join("run.toml");
        fs::write(&path, toml::to_string_pretty(&config).unwrap()).unwrap();
        path
    }

    fn simulate_into(dir: &Path, seed: u64) -> PathBuf {
        let config_path = write_env_config(dir, seed);
        let bundle = dir.join("bundle");
        let Cli { command } = parse(&[
            "seqval",
            "simulate",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            bundle.to_str().unwrap(),
            "--prompts",
            "5",
            "--rollouts-per-prompt",
            "4",
        ]);
        let Command::Simulate(args) = command else {
            panic!("expected simulate");
        };
        assert_eq!(cmd_simulate(args).unwrap(), 0);
        bundle
    }

    #[test]
    fn test_parse_methods() {
        let methods = parse_methods("grpo, numca,hista,mcs@7").unwrap();
        assert_eq!(
            methods,
            vec![
                MethodSpec::Grpo,
                MethodSpec::Numca,
                MethodSpec::Hista,
                MethodSpec::Mcs(7)
            ]
        );
        assert!(parse_methods("").is_err());
        assert!(parse_methods("ppo").is_err());
        assert_eq!(parse_methods("ppo").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn test_parse_reference() {
        let config = RunConfig::default();
        assert_eq!(
            parse_reference("exact", &config).unwrap(),
            SvebReference::Exact { requested_n: None }
        );
        assert_eq!(
            parse_reference("mcs", &config).unwrap(),
            SvebReference::Mcs {
                n: DEFAULT_N_REFERENCE
            }
        );
        assert_eq!(
            parse_reference("mcs@3", &config).unwrap(),
            SvebReference::Mcs { n: 3 }
        );
        assert!(parse_reference("mcs@0", &config).is_err());
        assert!(parse_reference("approx", &config).is_err());
        let with_n = RunConfig {
            sveb: crate::config::SvebSection {
                n_reference: Some(12),
                ..Default::default()
            },
            ..RunConfig::default()
        };
        assert_eq!(
            parse_reference("mcs", &with_n).unwrap(),
            SvebReference::Mcs { n: 12 }
        );
        assert_eq!(
            parse_reference("exact", &with_n).unwrap(),
            SvebReference::Exact {
                requested_n: Some(12)
            }
        );
    }

    #[test]
    fn test_parse_sizes() {
        assert_eq!(parse_sizes("4, 8,16").unwrap(), vec![4, 8, 16]);
        assert!(parse_sizes("4,0").is_err());
        assert!(parse_sizes("x").is_err());
    }

    #[test]
    fn test_simulate_writes_bundle_and_echo() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = simulate_into(dir.path(), 3);
        for file in [
            "index.jsonl",
            "hidden.f32",
            LATENTS_FILE,
            RESOLVED_CONFIG_FILE,
        ] {
            assert!(bundle.join(file).exists(), "{file} missing");
        }
        let groups = load_bundle(&bundle).unwrap();
        assert_eq!(groups.len(), 5);
        assert!(groups.iter().all(|g| g.size() == 4));
        // The echoed config carries the resolved seed for re-use.
        let echoed = RunConfig::load(&bundle.join(RESOLVED_CONFIG_FILE)).unwrap();
        assert_eq!(echoed.seed, Some(3));
        assert_eq!(echoed.env.unwrap().seed, Some(3));
    }

    #[test]
    fn test_estimate_writes_method_files() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = simulate_into(dir.path(), 4);
        let Cli { command } = parse(&[
            "seqval",
            "estimate",
            bundle.to_str().unwrap(),
            "--methods",
            "grpo,numca,hista,mcs@2",
        ]);
        let Command::Estimate(args) = command else {
            panic!("expected estimate");
        };
        assert_eq!(cmd_estimate(args).unwrap(), 0);
        let groups = load_bundle(&bundle).unwrap();
        let rollouts: usize = groups.iter().map(Group::size).sum();
        for method in ["grpo", "numca", "hista", "mcs@2"] {
            let text = fs::read_to_string(bundle.join(format!("values_{method}.jsonl"))).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), rollouts, "{method} line count");
            for line in lines {
                let assignment: ValueAssignment = serde_json::from_str(line).unwrap();
                assert!(!assignment.values.is_empty());
                assert!(assignment.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn test_estimate_unknown_method_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = simulate_into(dir.path(), 5);
        let Cli { command } = parse(&[
            "seqval",
            "estimate",
            bundle.to_str().unwrap(),
            "--methods",
            "ppo",
        ]);
        let Command::Estimate(args) = command else {
            panic!("expected estimate");
        };
        assert_eq!(cmd_estimate(args).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn test_sveb_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = simulate_into(dir.path(), 6);
        let out = dir.path().join("eval");
        let Cli { command } = parse(&[
            "seqval",
            "sveb",
            bundle.to_str().unwrap(),
            "--methods",
            "grpo,numca",
            "--reference",
            "exact",
            "--out",
            out.to_str().unwrap(),
        ]);
        let Command::Sveb(args) = command else {
            panic!("expected sveb");
        };
        assert_eq!(cmd_sveb(args).unwrap(), 0);
        let report = fs::read_to_string(out.join("report.csv")).unwrap();
        assert!(report.starts_with("method,mae,n_records\n"));
        assert!(report.contains("grpo,"));
        assert!(report.contains("numca,"));
        assert!(out.join("hist_grpo.csv").exists());
        assert!(out.join("records.jsonl").exists());
        assert!(out.join(RESOLVED_CONFIG_FILE).exists());
    }

    #[test]
    fn test_sveb_without_latents_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = simulate_into(dir.path(), 7);
        fs::remove_file(bundle.join(LATENTS_FILE)).unwrap();
        let Cli { command } = parse(&["seqval", "sveb", bundle.to_str().unwrap()]);
        let Command::Sveb(args) = command else {
            panic!("expected sveb");
        };
        assert_eq!(cmd_sveb(args).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn test_bench_emits_rows() {
        let dir = tempfile::tempdir().unwrap();
        let Cli { command } = parse(&[
            "seqval",
            "bench",
            "--sizes",
            "2,4",
            "--dim",
            "3",
            "--delta",
            "2",
            "--repetitions",
            "1",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        let Command::Bench(args) = command else {
            panic!("expected bench");
        };
        assert_eq!(cmd_bench(args).unwrap(), 0);
        let text = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n,total_seconds,seconds_per_cell");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("2,"));
        assert!(lines[2].starts_with("4,"));
    }

    #[test]
    fn test_check_single_suite_and_sabotage() {
        let Cli { command } = parse(&[
            "seqval",
            "check",
            "--suite",
            "softmax_lipschitz",
            "--trials",
            "500",
        ]);
        let Command::Check(args) = command else {
            panic!("expected check");
        };
        assert_eq!(cmd_check(args).unwrap(), 0);
        let Cli { command } = parse(&[
            "seqval",
            "check",
            "--suite",
            "softmax_lipschitz",
            "--trials",
            "500",
            "--sabotage",
        ]);
        let Command::Check(args) = command else {
            panic!("expected check");
        };
        assert_eq!(cmd_check(args).unwrap(), 1);
    }

    #[test]
    fn test_check_unknown_suite_rejected() {
        let Cli { command } =
            parse(&["seqval", "check", "--suite", "nonexistent", "--trials", "1"]);
        let Command::Check(args) = command else {
            panic!("expected check");
        };
        assert!(cmd_check(args).is_err());
    }

    #[test]
    fn test_load_config_for_bundle_fallbacks() {
        let dir = tempfile::tempdir().unwrap();
        // No explicit config and no echo: defaults.
        let config = load_config_for_bundle(None, dir.path()).unwrap();
        assert_eq!(config, RunConfig::default());
        // Echoed config is picked up.
        let echoed = RunConfig {
            seed: Some(42),
            ..RunConfig::default()
        };
        echoed.write_resolved(dir.path()).unwrap();
        let config = load_config_for_bundle(None, dir.path()).unwrap();
        assert_eq!(config.seed, Some(42));
    }
}
