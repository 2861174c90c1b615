//! Command-line front end.
//!
//! Subcommands: `check | simulate | solve | evaluate | verify | mdp`.
//! Human-readable logs go to standard error; machine artifacts go only to
//! the declared output files, each embedding the canonical problem hash and
//! the tool version. With a fixed seed, outputs are byte-identical under any
//! `--threads` value.
//!
//! Exit codes: 0 success, 1 check failure, 2 input error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pdp_core::mdp::{bridge_from_pdp, DiscreteDecisionModel, HistoryPolicy};
use pdp_core::model::ProblemData;
use pdp_core::path::CadlagPath;
use pdp_core::rng::Stream;
use pdp_core::sim::{estimate_cost, simulate_trajectory, JumpFeedbackPolicy, SimOptions};
use pdp_core::solver::{extract_policy, solve_value, QuadratureSpec, ValueFunction};
use pdp_core::verify;
use pdp_core::{CoreError, Real, TOOL_VERSION};

#[derive(Parser)]
#[command(name = "pdp", version, about = "Controlled path-dependent piecewise deterministic processes: simulation, value iteration, verification")]
struct Cli {
    /// Problem document: a JSON file path or builtin:<name>
    #[arg(long, global = true, default_value = "builtin:two_control_markov")]
    problem: String,

    /// Master seed (falls back to $PDP_SEED, then 0)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = library default)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate the standing assumptions and echo the canonical problem form
    Check {
        /// Validator sample count
        #[arg(long, default_value_t = 300)]
        samples: usize,
    },
    /// Simulate controlled trajectories under a policy
    Simulate {
        /// Start time s ∈ (0, T)
        #[arg(long, default_value_t = 0.25)]
        s: f64,
        /// Initial path value at s (comma-separated components)
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[arg(long, default_value_t = 1000)]
        n_rep: usize,
        /// Flow and quadrature step
        #[arg(long, default_value_t = 0.015625)]
        dt: f64,
        /// Policy: const:<label>, optimal, or a value.bin path
        #[arg(long)]
        policy: Option<String>,
        /// First-replication trajectory CSV
        #[arg(long)]
        out: Option<PathBuf>,
        /// Monte Carlo statistics JSON
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Solve the value function by backward fixed-point iteration
    Solve {
        #[command(flatten)]
        solver: SolverFlags,
        /// Re-solve at half the time resolution (and one fewer switch) and
        /// report the sup-differences as an empirical convergence gauge
        #[arg(long, default_value_t = false)]
        refine: bool,
        /// Value table output (little-endian binary)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Solver report JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Monte Carlo evaluation of a policy, with optional value comparison
    Evaluate {
        #[arg(long, default_value_t = 0.25)]
        s: f64,
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[arg(long, default_value_t = 10000)]
        n_rep: usize,
        #[arg(long, default_value_t = 0.015625)]
        dt: f64,
        /// Policy: const:<label>, optimal, or a value.bin path
        #[arg(long)]
        policy: Option<String>,
        /// Previously solved value file (for `optimal` and the comparison)
        #[arg(long)]
        value: Option<PathBuf>,
        /// Common random numbers: share replication streams across policies
        /// evaluated with the same seed (default off: streams are offset by
        /// a hash of the policy description)
        #[arg(long, default_value_t = false)]
        crn: bool,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Run verification checks against the solved value function
    Verify {
        /// dpp | fixedpoint | contraction | lipschitz | bracket | minimax |
        /// regularity | stability | all
        #[arg(long, default_value = "all")]
        check: String,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Report JSON
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.015625)]
        dt: f64,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Discrete decision model checks (table file, builtin, or PDP bridge)
    Mdp {
        /// Model: a JSON file path or builtin:two_stage; omit to bridge the
        /// continuous problem
        #[arg(long)]
        model: Option<String>,
        /// marginal | cost | optimal | nonrandomized | bridge | all
        #[arg(long, default_value = "all")]
        run: String,
        #[arg(long, default_value_t = 200)]
        n_random: usize,
        /// Start state for the checks
        #[arg(long)]
        state: Option<String>,
        /// Bridge: number of jump-time cells
        #[arg(long, default_value_t = 4)]
        bridge_cells: usize,
        /// Bridge: stage cap
        #[arg(long, default_value_t = 6)]
        bridge_stages: usize,
        #[arg(long, default_value_t = 0.25)]
        s: f64,
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[arg(long, default_value_t = 0.015625)]
        dt: f64,
        /// Report JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct SolverFlags {
    /// Contraction target per partition interval
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    /// Fixed-point tolerance (true-error bound via the contraction factor)
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Quadrature sub-steps per partition interval
    #[arg(long, default_value_t = 64)]
    nt: usize,
    /// Control switch points per schedule
    #[arg(long, default_value_t = 0)]
    switches: usize,
}

impl SolverFlags {
    fn quad(&self) -> QuadratureSpec {
        QuadratureSpec { n_t: self.nt, switches: self.switches }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}

fn exit_code_of(e: &CoreError) -> u8 {
    match e {
        CoreError::Parse { .. }
        | CoreError::Schema(_)
        | CoreError::UnknownControl(_)
        | CoreError::Json(_)
        | CoreError::Io(_)
        | CoreError::Horizon { .. }
        | CoreError::DimensionMismatch { .. } => 2,
        CoreError::Divergence { .. }
        | CoreError::Runaway { .. }
        | CoreError::NonContraction { .. }
        | CoreError::DegenerateKernel { .. }
        | CoreError::AssumptionViolation(_)
        | CoreError::Eval(_)
        | CoreError::Budget(_) => 3,
    }
}

fn load_problem(spec: &str) -> Result<ProblemData<Real>, CoreError> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        pdp_core::problems::builtin(name)
    } else {
        let text = std::fs::read_to_string(spec)?;
        ProblemData::from_json(&text)
    }
}

fn parse_x0(data: &ProblemData<Real>, spec: &Option<String>) -> Result<CadlagPath<Real>, CoreError> {
    let values: Vec<Real> = match spec {
        None => vec![0.0; data.dim],
        Some(s) => {
            let parsed: Result<Vec<Real>, _> = s.split(',').map(str::trim).map(str::parse).collect();
            parsed.map_err(|_| CoreError::Schema(format!("bad --x0 value `{s}`")))?
        }
    };
    if values.len() != data.dim {
        return Err(CoreError::DimensionMismatch { left: values.len(), right: data.dim });
    }
    Ok(CadlagPath::constant(&values))
}

fn resolve_policy(
    spec: &Option<String>,
    data: &ProblemData<Real>,
    value: Option<&ValueFunction<Real>>,
    flags: &SolverFlags,
) -> Result<(JumpFeedbackPolicy<Real>, Option<ValueFunction<Real>>), CoreError> {
    let spec = spec
        .clone()
        .unwrap_or_else(|| format!("const:{}", data.controls[data.default_control].name));
    if let Some(label) = spec.strip_prefix("const:") {
        return Ok((JumpFeedbackPolicy::Constant(data.control_index(label)?), None));
    }
    if spec == "optimal" {
        let vf = match value {
            Some(v) => v.clone(),
            None => {
                eprintln!("solving value function for the optimal policy ...");
                solve_value(data, &flags.quad(), flags.kappa, flags.tol)?
            }
        };
        let table = extract_policy(data, &vf, &flags.quad())?;
        return Ok((JumpFeedbackPolicy::Table(table), Some(vf)));
    }
    // Otherwise: a value.bin path to extract from.
    let bytes = std::fs::read(&spec)?;
    let vf: ValueFunction<Real> = ValueFunction::from_bytes(&bytes)?;
    if vf.meta.problem_hash != data.hash() {
        return Err(CoreError::Schema(format!(
            "value file was solved for problem {} but the active problem is {}",
            &vf.meta.problem_hash[..12.min(vf.meta.problem_hash.len())],
            &data.hash()[..12]
        )));
    }
    let table = extract_policy(data, &vf, &flags.quad())?;
    Ok((JumpFeedbackPolicy::Table(table), Some(vf)))
}

fn write_json<S: serde::Serialize>(path: &PathBuf, value: &S) -> Result<(), CoreError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Jump-feedback policies read only the lifted features; when the lift has
/// running features, distinct histories can share a feature vector, so the
/// policy class is strictly inside full-history feedback. Surface that.
fn info_note(data: &ProblemData<Real>, policy: &JumpFeedbackPolicy<Real>) {
    let lifted_only = matches!(policy, JumpFeedbackPolicy::Table(_));
    let history_gap = data
        .lift
        .iter()
        .any(|f| !matches!(f.kind, pdp_core::model::FeatureKind::TerminalValue));
    if lifted_only && history_gap {
        eprintln!(
            "note: the policy conditions on lifted features only; histories sharing a feature \
             vector are not distinguished"
        );
    }
}

/// Sup-difference of two value tables at the rows of the coarser time grid
/// (the lifted grids agree; coarse rows are a subset of fine rows).
fn sup_gap_on_shared_rows(fine: &ValueFunction<Real>, coarse: &ValueFunction<Real>) -> f64 {
    let g = coarse.grid.len();
    let mut gap = 0.0f64;
    for (i, &t) in coarse.times.iter().enumerate() {
        for j in 0..g {
            let a = coarse.table[i * g + j];
            let b = fine.query_feats(t, &coarse.grid.node(j));
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

fn run(cli: Cli) -> Result<ExitCode, CoreError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CoreError::Schema(format!("thread pool: {e}")))?;
    }
    let seed = cli
        .seed
        .or_else(|| std::env::var("PDP_SEED").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);

    match cli.cmd {
        Cmd::Check { samples } => {
            let data = load_problem(&cli.problem)?;
            let report = data.validate_assumptions(samples, seed);
            eprintln!(
                "problem {} ({}): {} checks, pass = {}",
                data.name,
                &data.hash()[..12],
                report.checks.len(),
                report.pass
            );
            for c in &report.checks {
                eprintln!(
                    "  [{}] {:<22} worst {:>12.6e}  bound {:>12.6e}  {}",
                    if c.pass { "ok" } else { "FAIL" },
                    c.name,
                    c.worst,
                    c.bound,
                    c.note
                );
            }
            println!("{}", data.canonical_json());
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }

        Cmd::Simulate { s, x0, n_rep, dt, policy, out, stats, solver } => {
            let data = load_problem(&cli.problem)?;
            let x = parse_x0(&data, &x0)?;
            let (pol, _) = resolve_policy(&policy, &data, None, &solver)?;
            info_note(&data, &pol);
            let opts = SimOptions::new(dt);
            // First replication gets the trajectory artifact.
            let mut stream = Stream::new(seed, 0);
            let traj = simulate_trajectory(&data, s, &x, &pol, &mut stream, &opts)?;
            if let Some(path) = &out {
                let csv = format!(
                    "# problem={} version={}\n{}",
                    data.hash(),
                    TOOL_VERSION,
                    traj.to_csv(&data)
                );
                std::fs::write(path, csv)?;
            }
            let cost_stats = estimate_cost(&data, s, &x, &pol, n_rep.max(2), seed, &opts)?;
            eprintln!(
                "simulate: {} replications, mean cost {:.6} ± {:.6}, mean jumps {:.3}",
                cost_stats.n_rep, cost_stats.mean, cost_stats.half_width_95, cost_stats.mean_jumps
            );
            if let Some(path) = &stats {
                #[derive(serde::Serialize)]
                struct StatsOut<'a> {
                    problem: &'a str,
                    version: &'a str,
                    s: f64,
                    #[serde(flatten)]
                    stats: &'a pdp_core::sim::CostStats,
                }
                write_json(
                    path,
                    &StatsOut { problem: data.hash(), version: TOOL_VERSION, s, stats: &cost_stats },
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Solve { solver, refine, out, report } => {
            let data = load_problem(&cli.problem)?;
            let vf = solve_value(&data, &solver.quad(), solver.kappa, solver.tol)?;
            eprintln!(
                "solve: {} intervals, {} time nodes × {} lifted nodes, ‖V̄‖∞ = {:.6}",
                vf.knots.len() - 1,
                vf.times.len(),
                vf.grid.len(),
                vf.sup_norm()
            );
            for m in &vf.meta.intervals {
                eprintln!(
                    "  interval {} [{:.4}, {:.4}]: κ ≤ {:.4}, {} iterations, residual {:.3e}, ratio {:.4}",
                    m.index, m.lo, m.hi, m.kappa_bound, m.iterations, m.final_residual, m.empirical_ratio
                );
            }
            // Empirical convergence gauge: coarsen the time grid (and the
            // switch count when present) and report the sup-differences at
            // shared (time, lifted-node) points. No rate is claimed.
            let mut refinement = serde_json::Map::new();
            if refine {
                let coarse_quad =
                    QuadratureSpec { n_t: (solver.nt / 2).max(2), switches: solver.switches };
                let coarse = solve_value(&data, &coarse_quad, solver.kappa, solver.tol)?;
                let gap = sup_gap_on_shared_rows(&vf, &coarse);
                eprintln!("refine: sup gap vs n_t = {} solve: {gap:.3e}", coarse_quad.n_t);
                refinement.insert("n_t_half_gap".into(), gap.into());
                if solver.switches > 0 {
                    let fewer = QuadratureSpec {
                        n_t: solver.nt,
                        switches: solver.switches - 1,
                    };
                    let less = solve_value(&data, &fewer, solver.kappa, solver.tol)?;
                    let gap = sup_gap_on_shared_rows(&vf, &less);
                    eprintln!(
                        "refine: sup gap vs switches = {} solve: {gap:.3e}",
                        fewer.switches
                    );
                    refinement.insert("switch_minus_one_gap".into(), gap.into());
                }
            }
            if let Some(path) = &out {
                std::fs::write(path, vf.to_bytes())?;
            }
            if let Some(path) = &report {
                let mut doc = serde_json::to_value(&vf.meta)?;
                if !refinement.is_empty() {
                    doc.as_object_mut()
                        .unwrap()
                        .insert("refinement".into(), serde_json::Value::Object(refinement));
                }
                write_json(path, &doc)?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Evaluate { s, x0, n_rep, dt, policy, value, crn, stats, solver } => {
            let data = load_problem(&cli.problem)?;
            let x = parse_x0(&data, &x0)?;
            let vf_loaded = match &value {
                Some(path) => {
                    let bytes = std::fs::read(path)?;
                    let vf: ValueFunction<Real> = ValueFunction::from_bytes(&bytes)?;
                    if vf.meta.problem_hash != data.hash() {
                        return Err(CoreError::Schema("value file does not match problem".into()));
                    }
                    Some(vf)
                }
                None => None,
            };
            let (pol, vf_used) = resolve_policy(&policy, &data, vf_loaded.as_ref(), &solver)?;
            let mut opts = SimOptions::new(dt);
            if !crn {
                // Independent streams per policy description unless common
                // random numbers are requested.
                let label = policy.clone().unwrap_or_default();
                let mut offset: u64 = 0xcbf2_9ce4_8422_2325;
                for b in label.bytes() {
                    offset = (offset ^ b as u64).wrapping_mul(0x1000_0000_01b3);
                }
                opts.stream_offset = (offset % (u32::MAX as u64)) << 20;
            }
            info_note(&data, &pol);
            let cost_stats = estimate_cost(&data, s, &x, &pol, n_rep.max(2), seed, &opts)?;
            let vf = vf_used.or(vf_loaded);
            let value_at = match &vf {
                Some(v) => Some(v.query(&data, s, &x)?),
                None => None,
            };
            eprintln!(
                "evaluate: mean cost {:.6} ± {:.6}{}",
                cost_stats.mean,
                cost_stats.half_width_95,
                match value_at {
                    Some(v) => format!(", V̄(s,x) = {v:.6}, gap {:+.6}", cost_stats.mean - v),
                    None => String::new(),
                }
            );
            if let Some(path) = &stats {
                #[derive(serde::Serialize)]
                struct EvalOut<'a> {
                    problem: &'a str,
                    version: &'a str,
                    s: f64,
                    value_at_start: Option<f64>,
                    #[serde(flatten)]
                    stats: &'a pdp_core::sim::CostStats,
                }
                write_json(
                    path,
                    &EvalOut {
                        problem: data.hash(),
                        version: TOOL_VERSION,
                        s,
                        value_at_start: value_at,
                        stats: &cost_stats,
                    },
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Verify { check, samples, out, dt, solver } => {
            let data = load_problem(&cli.problem)?;
            let quad = solver.quad();
            let want = |name: &str| check == "all" || check == name;
            let mut reports: Vec<verify::CheckReport> = Vec::new();
            let needs_value = ["dpp", "fixedpoint", "contraction", "lipschitz", "bracket", "minimax", "stability"]
                .iter()
                .any(|n| want(n));
            let vf = if needs_value {
                eprintln!("solving value function ...");
                Some(solve_value(&data, &quad, solver.kappa, solver.tol)?)
            } else {
                None
            };
            if want("regularity") {
                reports.push(verify::regularity_counterexample::<Real>());
            }
            if let Some(vf) = &vf {
                if want("dpp") {
                    reports.push(verify::check_dpp(&data, vf, samples, 5e-3, seed, &quad, dt)?);
                }
                if want("fixedpoint") {
                    // Definitionally the DPP residual at s₁ = T; at sampled
                    // off-grid paths both are dominated by the same
                    // interpolation slack, so they share the tolerance.
                    reports.push(verify::check_fixed_point(
                        &data,
                        vf,
                        samples,
                        (10.0 * solver.tol).max(5e-3),
                        seed,
                        &quad,
                        dt,
                    )?);
                }
                if want("contraction") {
                    for k in 0..vf.knots.len() - 1 {
                        reports.push(verify::estimate_contraction(&data, vf, k, 100, seed)?);
                    }
                    reports.push(verify::contraction_constant_shift(&data, vf, 0, 0.5)?);
                }
                if want("lipschitz") {
                    let cap = 2.0
                        * data.constants.l_f.max(1.0)
                        * (data.constants.l_f * data.horizon).exp();
                    reports.push(verify::estimate_lipschitz(&data, vf, samples, cap, seed, dt)?);
                }
                if want("bracket") {
                    reports.push(verify::check_monotone_bracket(
                        &data,
                        vf,
                        30,
                        (10.0 * solver.tol).max(1e-6),
                    )?);
                }
                if want("stability") {
                    reports.push(verify::check_interval_stability(&data, vf, 1.0, 1.0)?);
                }
                if want("minimax") {
                    let x0 = parse_x0(&data, &None)?;
                    let zs: Vec<Vec<Real>> = [-1.0, -0.5, 0.0, 0.5, 1.0]
                        .iter()
                        .map(|&z| vec![z; data.dim])
                        .collect();
                    reports.push(verify::check_minimax(
                        &data,
                        vf,
                        0.25 * data.horizon,
                        &x0,
                        &zs,
                        1e-2,
                        dt,
                    )?);
                }
            }
            let all_pass = reports.iter().all(|r| r.pass);
            for r in &reports {
                eprintln!(
                    "  [{}] {:<20} worst {:>12.6e}  tol {:>12.6e}  ({} samples)",
                    if r.pass { "ok" } else { "FAIL" },
                    r.name,
                    r.worst,
                    r.tolerance,
                    r.samples
                );
            }
            if let Some(path) = &out {
                #[derive(serde::Serialize)]
                struct VerifyOut<'a> {
                    problem: &'a str,
                    version: &'a str,
                    seed: u64,
                    pass: bool,
                    checks: &'a [verify::CheckReport],
                }
                write_json(
                    path,
                    &VerifyOut {
                        problem: data.hash(),
                        version: TOOL_VERSION,
                        seed,
                        pass: all_pass,
                        checks: &reports,
                    },
                )?;
            }
            Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }

        Cmd::Mdp {
            model,
            run,
            n_random,
            state,
            bridge_cells,
            bridge_stages,
            s,
            x0,
            dt,
            out,
        } => {
            let want = |name: &str| run == "all" || run == name;
            let mut out_doc = serde_json::Map::new();
            out_doc.insert("version".into(), TOOL_VERSION.into());
            let mut pass = true;

            let (dm, bridged): (DiscreteDecisionModel<Real>, bool) = match &model {
                Some(spec) => {
                    let text = if spec == "builtin:two_stage" {
                        pdp_core::problems::TWO_STAGE_MDP.to_string()
                    } else {
                        std::fs::read_to_string(spec)?
                    };
                    (DiscreteDecisionModel::from_json(&text)?, false)
                }
                None => {
                    let data = load_problem(&cli.problem)?;
                    let x = parse_x0(&data, &x0)?;
                    let (dm, info) =
                        bridge_from_pdp(&data, s, &x, bridge_stages, bridge_cells, dt, 500_000)?;
                    eprintln!(
                        "bridge: {} states, {} controls, stage cap {}, truncation ≤ {:.3e}",
                        dm.states.len(),
                        dm.controls.len(),
                        info.stage_cap,
                        info.truncation_bound
                    );
                    out_doc.insert("problem".into(), data.hash().into());
                    out_doc.insert("bridge".into(), serde_json::to_value(&info)?);
                    (dm, true)
                }
            };
            let x_start = match &state {
                Some(name) => dm.state_index(name)?,
                None => 0,
            };

            if want("optimal") || want("all") || want("bridge") {
                let j = dm.optimal_cost(x_start)?;
                eprintln!("optimal cost J*({}) = {:.9}", dm.states[x_start as usize], j.as_f64());
                out_doc.insert("j_star".into(), j.as_f64().into());
                if bridged {
                    // Compare against the continuous solve and log the gap.
                    let data = load_problem(&cli.problem)?;
                    let x_path = parse_x0(&data, &x0)?;
                    let vf = solve_value(&data, &QuadratureSpec::default(), 0.5, 1e-6)?;
                    let v = vf.query(&data, s, &x_path)?;
                    eprintln!(
                        "continuous V̄(s, x) = {v:.6}; bridge discretization gap {:+.6}",
                        j.as_f64() - v
                    );
                    out_doc.insert("value_continuous".into(), v.into());
                    out_doc.insert("bridge_gap".into(), (j.as_f64() - v).into());
                }
            }
            if want("marginal") && !bridged {
                let mut p0 = vec![0.0; dm.states.len()];
                p0[x_start as usize] = 1.0;
                let r2 = dm.rollout_marginal(&HistoryPolicy::Uniform, &p0, 2, 1_000_000)?;
                let mass = r2.total_mass();
                eprintln!("uniform-policy order-2 marginal: {} histories, mass {mass:.12}", r2.entries.len());
                pass &= (mass - 1.0).abs() <= 1e-10;
                out_doc.insert("marginal_mass".into(), mass.into());
            }
            if want("cost") {
                let c = dm.policy_cost(&HistoryPolicy::Uniform, x_start, 4_000_000)?;
                eprintln!(
                    "uniform-policy cost from {}: {:.9}",
                    dm.states[x_start as usize],
                    c.as_f64()
                );
                out_doc.insert("uniform_policy_cost".into(), c.as_f64().into());
            }
            if want("nonrandomized") {
                let budget = if bridged { 4_000_000 } else { 1_000_000 };
                match dm.check_nonrandomized_sufficiency(x_start, n_random, seed, budget) {
                    Ok(rep) => {
                        eprintln!(
                            "nonrandomized: J* = {:.9}, enumerated deterministic min = {:.9} over {} policies, worst random margin {:+.3e}, pass = {}",
                            rep.j_star, rep.enumerated_min, rep.n_deterministic, rep.worst_random_margin, rep.pass
                        );
                        pass &= rep.pass;
                        out_doc.insert("nonrandomized".into(), serde_json::to_value(&rep)?);
                    }
                    Err(CoreError::Budget(msg)) => {
                        eprintln!("nonrandomized: skipped ({msg})");
                        out_doc.insert("nonrandomized".into(), format!("skipped: {msg}").into());
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(path) = &out {
                write_json(path, &serde_json::Value::Object(out_doc))?;
            }
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}
