//! Command-line front end: one subcommand per experiment, CSV for tables and
//! JSON for scalar summaries. Every output file is written to a temporary
//! name and renamed into place.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::exactdp::relaxation_gap;
use crate::kernel::{compute_kernel, TransitionKernel};
use crate::lp::{build_lp, normalized_metrics, solve_exact, KktReport, LpSolution, OccupationMeasure};
use crate::model::{integer_budgets, tol, CostModel, SystemParams};
use crate::policy::extract_policy;
use crate::saddle::{gda, sgda, write_trace_csv, SaddleConfig, SaddleRun};
use crate::simulator::{compare_to_lp, simulate};

#[derive(Debug, Parser)]
#[command(name = "wcmdp", version, about = "Load balancing and auto scaling for parallel finite queues")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the analytic transition kernel to kernel.csv.
    Kernel,
    /// Solve the relaxed LP (plus Gamma ||y||^2) exactly.
    SolveLp,
    /// Deterministic gradient descent-ascent with the exact kernel.
    Gda,
    /// Stochastic gradient descent-ascent with sampled kernels.
    Sgda,
    /// Brute-force DP for a few queues and its gap to the LP; prints JSON.
    DpExact {
        /// Number of queues; defaults to the config's N.
        #[arg(long)]
        queues: Option<usize>,
    },
    /// Simulate N queues under the policy extracted from the LP solution.
    Simulate {
        /// Number of queues; defaults to the config's N.
        #[arg(long)]
        queues: Option<usize>,
        /// Number of seeds, starting at the base seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Solve one parameter sweep and write sweep.csv.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Solver::Lp)]
        solver: Solver,
    },
    /// Compare GDA and SGDA against the exact regularized solution.
    Convergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "p")]
    P,
    #[value(name = "alpha")]
    Alpha,
    #[value(name = "beta")]
    Beta,
    #[value(name = "gamma")]
    Gamma,
    /// Regularization weight.
    #[value(name = "Gamma")]
    Regularization,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::P => "p",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Gamma => "gamma",
            SweepParam::Regularization => "Gamma",
        }
    }

    fn apply(self, cfg: &mut Config, value: f64) {
        match self {
            SweepParam::P => cfg.p = value,
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Beta => cfg.beta = value,
            SweepParam::Gamma => cfg.gamma = value,
            SweepParam::Regularization => cfg.gamma_reg = value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    Lp,
    Gda,
    Sgda,
}

impl Solver {
    fn name(self) -> &'static str {
        match self {
            Solver::Lp => "lp",
            Solver::Gda => "gda",
            Solver::Sgda => "sgda",
        }
    }
}

/// Parses the process arguments, runs, and maps the outcome to an exit code.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Everything a subcommand needs from the config file.
struct Loaded {
    cfg: Config,
    params: SystemParams,
    costs: CostModel,
}

fn load(cli: &Cli) -> Result<Loaded> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = Config::from_path(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let params = cfg.params()?;
    let costs = cfg.costs(&params)?;
    Ok(Loaded { cfg, params, costs })
}

pub fn run(cli: &Cli) -> Result<()> {
    let loaded = load(cli)?;
    match &cli.command {
        Command::DpExact { queues } => return dp_exact(&loaded, *queues),
        _ => fs::create_dir_all(&cli.out)?,
    }
    let out = cli.out.as_path();
    match &cli.command {
        Command::Kernel => kernel_cmd(&loaded, out),
        Command::SolveLp => solve_lp_cmd(&loaded, out),
        Command::Gda => saddle_cmd(&loaded, out, Solver::Gda),
        Command::Sgda => saddle_cmd(&loaded, out, Solver::Sgda),
        Command::DpExact { .. } => unreachable!("handled above"),
        Command::Simulate { queues, seeds } => simulate_cmd(&loaded, out, queues.unwrap_or(loaded.cfg.n), *seeds),
        Command::Sweep { param, values, solver } => sweep_cmd(&loaded.cfg, out, *param, values, *solver),
        Command::Convergence => convergence_cmd(&loaded, out),
    }
}

/// Writes through a buffered temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, |w| writeln!(w, "{text}"))
}

fn kernel_for(loaded: &Loaded) -> Result<TransitionKernel> {
    let kernel = compute_kernel(&loaded.params, loaded.cfg.tail_eps)?;
    let defect = kernel.max_row_defect();
    if defect > tol::ROW_SUM {
        return Err(Error::Numerical(format!("kernel row sums off by {defect:e}")));
    }
    Ok(kernel)
}

fn kernel_cmd(loaded: &Loaded, out: &Path) -> Result<()> {
    let kernel = kernel_for(loaded)?;
    write_atomic(&out.join("kernel.csv"), |w| kernel.write_csv(w))?;
    println!("kernel: {} states, max row defect {:e}", kernel.states(), kernel.max_row_defect());
    Ok(())
}

#[derive(Debug, Serialize)]
struct LpMetrics {
    #[serde(rename = "Gamma")]
    gamma_reg: f64,
    objective: f64,
    regularized_objective: f64,
    pi_a_hat: f64,
    pi_h_hat: f64,
    iterations: usize,
    kkt: KktReport,
}

fn lp_metrics(sol: &LpSolution, params: &SystemParams, gamma_reg: f64) -> LpMetrics {
    let (pi_a_hat, pi_h_hat) = normalized_metrics(&sol.y, params);
    LpMetrics {
        gamma_reg,
        objective: sol.objective,
        regularized_objective: sol.regularized_objective,
        pi_a_hat,
        pi_h_hat,
        iterations: sol.iterations,
        kkt: sol.kkt,
    }
}

fn solve_lp_cmd(loaded: &Loaded, out: &Path) -> Result<()> {
    let kernel = kernel_for(loaded)?;
    let sol = solve_exact(&build_lp(&loaded.params, &kernel, &loaded.costs), loaded.cfg.gamma_reg, tol::KKT)?;
    write_atomic(&out.join("solution.csv"), |w| sol.y.write_csv(w, "y"))?;
    let metrics = lp_metrics(&sol, &loaded.params, loaded.cfg.gamma_reg);
    write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "objective {} pi_A_hat {} pi_H_hat {} ({})",
        metrics.objective, metrics.pi_a_hat, metrics.pi_h_hat, metrics.kkt
    );
    Ok(())
}

fn run_saddle(loaded: &Loaded, kernel: &TransitionKernel, cfg: &SaddleConfig, solver: Solver) -> Result<SaddleRun> {
    match solver {
        Solver::Gda => gda(&loaded.params, kernel, &loaded.costs, cfg),
        Solver::Sgda => sgda(&loaded.params, &loaded.costs, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
        Solver::Lp => unreachable!("not a saddle solver"),
    }
}

/// Exact regularized solution used as the distance reference.
fn reference(loaded: &Loaded, kernel: &TransitionKernel, cfg: &SaddleConfig) -> Result<LpSolution> {
    cfg.validate()?;
    solve_exact(&build_lp(&loaded.params, kernel, &loaded.costs), cfg.gamma_reg, tol::KKT)
}

fn saddle_cmd(loaded: &Loaded, out: &Path, solver: Solver) -> Result<()> {
    let kernel = kernel_for(loaded)?;
    let mut cfg = loaded.cfg.saddle();
    let reference = reference(loaded, &kernel, &cfg)?;
    cfg.reference = Some(reference.y);
    let run = run_saddle(loaded, &kernel, &cfg, solver)?;
    let name = solver.name();
    write_atomic(&out.join(format!("{name}_trace.csv")), |w| write_trace_csv(&run.traces, w))?;
    write_atomic(&out.join(format!("{name}_solution.csv")), |w| run.y.write_csv(w, "y"))?;
    if let Some(last) = run.traces.last() {
        println!(
            "{name}: {} iterations, distance to reference {}",
            last.iteration,
            last.dist_to_ref.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn dp_exact(loaded: &Loaded, queues: Option<usize>) -> Result<()> {
    let kernel = kernel_for(loaded)?;
    let gap = relaxation_gap(&loaded.params, &kernel, &loaded.costs, queues.unwrap_or(loaded.cfg.n))?;
    println!("{}", serde_json::to_string_pretty(&gap)?);
    if gap.gap < -1e-8 {
        return Err(Error::Numerical(format!("LP objective exceeds DP value per queue by {:e}", -gap.gap)));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    pi_a_hat: f64,
    pi_h_hat: f64,
    per_queue_cost: f64,
    max_tv: f64,
    pa_gap: f64,
    ph_gap: f64,
}

#[derive(Debug, Serialize)]
struct SimSummary {
    #[serde(rename = "N")]
    queues: usize,
    lp_pi_a_hat: f64,
    lp_pi_h_hat: f64,
    lp_objective: f64,
    mean_pi_a_hat: f64,
    mean_pi_h_hat: f64,
    mean_max_tv: f64,
    mean_per_queue_cost: f64,
    seeds: Vec<SeedSummary>,
}

fn simulate_cmd(loaded: &Loaded, out: &Path, queues: usize, seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(Error::invalid("seeds", "need at least one seed"));
    }
    let (admit_budget, rate_budget) = integer_budgets(&loaded.params, queues)?;
    let kernel = kernel_for(loaded)?;
    let sol = solve_exact(&build_lp(&loaded.params, &kernel, &loaded.costs), loaded.cfg.gamma_reg, tol::KKT)?;
    let policy = extract_policy(&sol.y, &loaded.params)?;
    write_atomic(&out.join("policy.csv"), |w| policy.write_csv(w))?;
    write_atomic(&out.join("lp_solution.csv"), |w| sol.y.write_csv(w, "y"))?;

    let seed_list: Vec<u64> = (0..seeds).map(|k| loaded.cfg.seed.wrapping_add(k)).collect();
    let reports = simulate(&policy, &loaded.params, &loaded.costs, queues, &seed_list)?;
    let mut rows = Vec::with_capacity(reports.len());
    for r in &reports {
        let feasible = r.admitted.iter().all(|&a| a <= admit_budget) && r.high_rate.iter().all(|&h| h <= rate_budget);
        if !feasible {
            return Err(Error::Numerical(format!("seed {} broke a hard budget", r.seed)));
        }
        write_atomic(&out.join(format!("sim_seed{}_measure.csv", r.seed)), |w| r.write_measure_csv(w))?;
        write_atomic(&out.join(format!("sim_seed{}_epochs.csv", r.seed)), |w| r.write_epochs_csv(w))?;
        let (pi_a_hat, pi_h_hat) = r.normalized_metrics(&loaded.params);
        let cmp = compare_to_lp(r, &sol.y, &loaded.params)?;
        rows.push(SeedSummary {
            seed: r.seed,
            pi_a_hat,
            pi_h_hat,
            per_queue_cost: r.per_queue_cost(),
            max_tv: cmp.max_tv,
            pa_gap: cmp.pa_gap,
            ph_gap: cmp.ph_gap,
        });
    }
    let mean = |f: fn(&SeedSummary) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (lp_pi_a_hat, lp_pi_h_hat) = normalized_metrics(&sol.y, &loaded.params);
    let summary = SimSummary {
        queues,
        lp_pi_a_hat,
        lp_pi_h_hat,
        lp_objective: sol.objective,
        mean_pi_a_hat: mean(|r| r.pi_a_hat),
        mean_pi_h_hat: mean(|r| r.pi_h_hat),
        mean_max_tv: mean(|r| r.max_tv),
        mean_per_queue_cost: mean(|r| r.per_queue_cost),
        seeds: rows,
    };
    write_json(&out.join("sim_summary.json"), &summary)?;
    println!(
        "simulated {} seeds: pi_A_hat {} (LP {}), mean max TV {}",
        seeds, summary.mean_pi_a_hat, summary.lp_pi_a_hat, summary.mean_max_tv
    );
    Ok(())
}

/// One row of sweep.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub gamma_reg: f64,
    pub objective: f64,
    pub pi_a_hat: f64,
    pub pi_h_hat: f64,
    pub iters: usize,
    pub seed: Option<u64>,
    /// `ok` or the failure message.
    pub status: String,
}

/// Solves every point of a sweep in parallel; rows keep the input order.
/// Failed points carry their error in `status`.
pub fn run_sweep(base: &Config, param: SweepParam, values: &[f64], solver: Solver) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("values", "sweep needs at least one value"));
    }
    Ok(values
        .par_iter()
        .map(|&value| {
            let mut cfg = base.clone();
            param.apply(&mut cfg, value);
            let seed = (solver == Solver::Sgda).then_some(cfg.seed);
            let failed = |e: Error| SweepRow {
                value,
                gamma_reg: cfg.gamma_reg,
                objective: f64::NAN,
                pi_a_hat: f64::NAN,
                pi_h_hat: f64::NAN,
                iters: 0,
                seed,
                status: e.to_string().replace([',', '\n'], ";"),
            };
            sweep_point(&cfg, value, solver).unwrap_or_else(failed)
        })
        .collect())
}

fn sweep_point(cfg: &Config, value: f64, solver: Solver) -> Result<SweepRow> {
    let params = cfg.params()?;
    let costs = cfg.costs(&params)?;
    let loaded = Loaded { cfg: cfg.clone(), params, costs };
    let kernel = kernel_for(&loaded)?;
    let lp = build_lp(&loaded.params, &kernel, &loaded.costs);
    let (y, objective, iters): (OccupationMeasure, f64, usize) = match solver {
        Solver::Lp => {
            let sol = solve_exact(&lp, cfg.gamma_reg, tol::KKT)?;
            (sol.y, sol.objective, sol.iterations)
        }
        Solver::Gda | Solver::Sgda => {
            let run = run_saddle(&loaded, &kernel, &cfg.saddle(), solver)?;
            let objective = lp.objective_value(&run.y);
            (run.y, objective, cfg.iters)
        }
    };
    let (pi_a_hat, pi_h_hat) = normalized_metrics(&y, &loaded.params);
    Ok(SweepRow {
        value,
        gamma_reg: cfg.gamma_reg,
        objective,
        pi_a_hat,
        pi_h_hat,
        iters,
        seed: (solver == Solver::Sgda).then_some(cfg.seed),
        status: "ok".into(),
    })
}

pub fn write_sweep_csv<W: Write + ?Sized>(
    rows: &[SweepRow],
    param: SweepParam,
    solver: Solver,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "param,value,Gamma,objective,pi_A_hat,pi_H_hat,solver,iters,seed,status")?;
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            param.name(),
            r.value,
            r.gamma_reg,
            r.objective,
            r.pi_a_hat,
            r.pi_h_hat,
            solver.name(),
            r.iters,
            seed,
            r.status
        )?;
    }
    Ok(())
}

fn sweep_cmd(base: &Config, out: &Path, param: SweepParam, values: &[f64], solver: Solver) -> Result<()> {
    let rows = run_sweep(base, param, values, solver)?;
    write_atomic(&out.join("sweep.csv"), |w| write_sweep_csv(&rows, param, solver, w))?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("sweep over {}: {} points, {} failed", param.name(), rows.len(), failed);
    if failed > 0 {
        return Err(Error::Precondition(format!("{failed} of {} sweep points failed", rows.len())));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ConvergenceSummary {
    #[serde(rename = "K")]
    buffer: usize,
    scenario: String,
    #[serde(rename = "Gamma")]
    gamma_reg: f64,
    iters: usize,
    reference_kkt: KktReport,
    final_dist_gda: f64,
    final_dist_sgda: f64,
    dist_sgda_gda: f64,
    /// First recorded iteration after which the GDA distance stays at or below 0.05.
    gda_settled_at: Option<usize>,
    sgda_settled_at: Option<usize>,
}

/// First recorded iteration from which every later distance is within `threshold`.
pub fn settled_at(run: &SaddleRun, threshold: f64) -> Option<usize> {
    let mut settled = None;
    for tr in run.traces.iter().rev() {
        match tr.dist_to_ref {
            Some(d) if d <= threshold => settled = Some(tr.iteration),
            _ => break,
        }
    }
    settled
}

fn convergence_cmd(loaded: &Loaded, out: &Path) -> Result<()> {
    let kernel = kernel_for(loaded)?;
    let mut cfg = loaded.cfg.saddle();
    let reference = reference(loaded, &kernel, &cfg)?;
    cfg.reference = Some(reference.y.clone());
    let (g, s) = rayon::join(
        || run_saddle(loaded, &kernel, &cfg, Solver::Gda),
        || run_saddle(loaded, &kernel, &cfg, Solver::Sgda),
    );
    let (g, s) = (g?, s?);
    write_atomic(&out.join("reference_solution.csv"), |w| reference.y.write_csv(w, "y"))?;
    write_atomic(&out.join("gda_trace.csv"), |w| write_trace_csv(&g.traces, w))?;
    write_atomic(&out.join("sgda_trace.csv"), |w| write_trace_csv(&s.traces, w))?;
    write_atomic(&out.join("gda_solution.csv"), |w| g.y.write_csv(w, "y"))?;
    write_atomic(&out.join("sgda_solution.csv"), |w| s.y.write_csv(w, "y"))?;
    let summary = ConvergenceSummary {
        buffer: loaded.params.buffer,
        scenario: loaded.params.scenario.to_string(),
        gamma_reg: cfg.gamma_reg,
        iters: cfg.iters,
        reference_kkt: reference.kkt,
        final_dist_gda: g.y.frobenius_distance(&reference.y),
        final_dist_sgda: s.y.frobenius_distance(&reference.y),
        dist_sgda_gda: s.y.frobenius_distance(&g.y),
        gda_settled_at: settled_at(&g, 0.05),
        sgda_settled_at: settled_at(&s, 0.05),
    };
    write_json(&out.join("convergence.json"), &summary)?;
    println!(
        "GDA distance {}, SGDA distance {}, SGDA-GDA {}",
        summary.final_dist_gda, summary.final_dist_sgda, summary.dist_sgda_gda
    );
    Ok(())
}
