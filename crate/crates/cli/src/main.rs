use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use structadmm::bench::{bench_cascade, reference_solution, run_study, CascadeConfig, RhoPolicy, StudyConfig};
use structadmm::cost::{complexity_order, count_iteration, measured_row, thread_partition, Mode, TableRow, Threads, CONVENTIONS};
use structadmm::gen::{gen_category, gen_ring_chain, regulation, scenario, Category, GenSpec, ScenarioSpec};
use structadmm::problem::{decompose, validate_admissibility, MpcProblem, Partition, PartitionedProblem, ProblemFile, Trajectory, DEFAULT_RANK_TOL};
use structadmm::solver::{dist, solve_conventional, solve_structured, structured_cache, AdmmConfig, Solution};
use structadmm::structure::analyze;
use structadmm::tuning::{contraction_norm, null_space_basis, penalty_report};

#[derive(Parser)]
#[command(name = "structadmm", version, about = "Structure-exploiting ADMM for linear MPC")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a system and wrap it into an MPC problem file.
    Gen(GenArgs),
    /// Solve a problem file.
    Solve(SolveArgs),
    /// Optimal penalties of the subsystem QPs.
    Tune(TuneArgs),
    /// Separation tendency and structural checks.
    Analyze(ProblemArg),
    /// High-accuracy reference solution.
    Reference(ReferenceArgs),
    /// Cost model and cascade convergence benchmark.
    Bench(BenchArgs),
    /// Separation tendency versus iteration increase over random systems.
    Study(StudyArgs),
}

#[derive(Args)]
struct ProblemArg {
    problem: PathBuf,
    /// Partition as `x1,x2,..:u1,u2,..`; overrides the one in the file.
    #[arg(long)]
    partition: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "cascade")]
    category: String,
    /// Total number of states (random categories).
    #[arg(long, default_value_t = 10)]
    nx: usize,
    /// Number of subsystems (random categories and the chain).
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 20)]
    stages: usize,
    #[arg(long, default_value_t = 6)]
    xi: usize,
    #[arg(long, default_value_t = 1)]
    ui: usize,
    #[arg(long, default_value_t = 1)]
    coupling_rank: usize,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Regulation to the origin without constraints.
    #[arg(long)]
    unbounded: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Conventional,
    Structured,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArg,
    #[arg(long, value_enum, default_value = "structured")]
    algo: Algo,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// `unit`, `optimal` or `scale=<r>` (optimal times r).
    #[arg(long, default_value = "optimal")]
    rho: String,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Reference solution file; adds `dist` to the trace.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    parallel: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    problem: ProblemArg,
    /// Also sweep the contraction norm over this many log-spaced penalties.
    #[arg(long)]
    sweep: Option<usize>,
}

#[derive(Args)]
struct ReferenceArgs {
    problem: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThreadsModel {
    #[value(name = "1")]
    One,
    #[value(name = "2MN")]
    TwoMN,
}

#[derive(Args)]
struct BenchArgs {
    /// Per-iteration cost report only.
    #[arg(long)]
    cost: bool,
    /// Measured and symbolic cost over the chain family.
    #[arg(long)]
    growth: bool,
    /// Problem file for `--cost` (defaults to a cascade scenario).
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "2MN")]
    threads_model: ThreadsModel,
    #[arg(long, default_value_t = 200)]
    scenarios: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 90.0)]
    penalty_scale: f64,
    #[arg(long, default_value_t = 15)]
    max_chain: usize,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    /// Comma-separated categories (default: the six random ones).
    #[arg(long)]
    categories: Option<String>,
    #[arg(long, default_value = "5,10")]
    dims: String,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 5)]
    initial_conditions: usize,
    #[arg(long, default_value_t = 1e-4)]
    dist_target: f64,
    #[arg(long, default_value = "unit")]
    rho: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Solve(a) => cmd_solve(a),
        Cmd::Tune(a) => cmd_tune(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Reference(a) => cmd_reference(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Study(a) => cmd_study(a),
    }
}

fn parse_rho(s: &str) -> Result<RhoPolicy> {
    Ok(match s {
        "unit" => RhoPolicy::Unit,
        "optimal" => RhoPolicy::Optimal,
        _ => match s.strip_prefix("scale=") {
            Some(v) => RhoPolicy::OptimalScaled(v.parse().with_context(|| format!("bad penalty scale '{v}'"))?),
            None => bail!("--rho must be unit, optimal or scale=<r>, got '{s}'"),
        },
    })
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(',').filter(|t| !t.is_empty()).map(|t| t.trim().parse().with_context(|| format!("bad number '{t}'"))).collect()
}

fn parse_partition(s: &str) -> Result<Partition> {
    let (x, u) = s.split_once(':').context("partition must look like x1,x2:u1,u2")?;
    Ok(Partition::new(parse_dims(x)?, parse_dims(u)?)?)
}

fn load(arg: &ProblemArg) -> Result<(MpcProblem, Partition, ProblemFile)> {
    let file = ProblemFile::load(&arg.problem).with_context(|| format!("reading {}", arg.problem.display()))?;
    let (problem, part) = file.to_problem()?;
    let part = match &arg.partition {
        Some(s) => {
            let p = parse_partition(s)?;
            p.check_system(&problem.system)?;
            p
        }
        None => part.unwrap_or_else(|| Partition::trivial(problem.nx(), problem.nu())),
    };
    Ok((problem, part, file))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// CSV file whose first line is a `# key=value ...` comment.
fn csv_writer(path: &Path, meta: &[(&str, String)]) -> Result<csv::Writer<File>> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let line: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(f, "# {}", line.join(" "))?;
    Ok(csv::Writer::from_writer(f))
}

#[derive(Serialize)]
struct TrajectoryFile {
    states: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
}

impl TrajectoryFile {
    fn from(t: &Trajectory) -> Self {
        let v = |x: &[nalgebra::DVector<f64>]| x.iter().map(|c| c.iter().copied().collect()).collect();
        TrajectoryFile { states: v(&t.states), inputs: v(&t.inputs) }
    }
}

fn load_trajectory(path: &Path) -> Result<Trajectory> {
    #[derive(serde::Deserialize)]
    struct F {
        states: Vec<Vec<f64>>,
        inputs: Vec<Vec<f64>>,
    }
    let f: F = serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
    let v = |x: Vec<Vec<f64>>| x.into_iter().map(nalgebra::DVector::from_vec).collect();
    Ok(Trajectory { states: v(f.states), inputs: v(f.inputs) })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let category: Category = a.category.parse()?;
    let (sys, partition, spec) = match category {
        Category::Cascade => {
            let mut spec = GenSpec::new(category, vec![a.xi; a.stages], vec![a.ui; a.stages], a.seed);
            spec.coupling_rank = a.coupling_rank;
            let (s, p) = gen_category(&spec)?;
            (s, p, spec)
        }
        Category::RingChain => {
            let (s, p, _) = gen_ring_chain(a.blocks)?;
            let spec = GenSpec::new(category, p.xdims.clone(), p.udims.clone(), a.seed);
            (s, p, spec)
        }
        _ => {
            let spec = GenSpec::even(category, a.nx, a.blocks.min(a.nx), a.seed);
            let (s, p) = gen_category(&spec)?;
            (s, p, spec)
        }
    };
    let sspec = ScenarioSpec { horizon: a.horizon, ..Default::default() };
    let problem = if a.unbounded { regulation(&sys, a.horizon, a.seed)? } else { scenario(&sys, &sspec, a.seed)? };
    let mut file = ProblemFile::from_problem(&problem, Some(&partition))?;
    file.metadata.insert("generator".into(), serde_json::to_value(&spec)?);
    if !a.unbounded {
        file.metadata.insert("scenario".into(), serde_json::to_value(sspec)?);
    }
    file.metadata.insert("seed".into(), a.seed.into());
    file.save(&a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn solver_config(a: &SolveArgs, pp: &PartitionedProblem, reference: Option<Trajectory>) -> Result<AdmmConfig> {
    let (rho, scale) = parse_rho(&a.rho)?.config(pp)?;
    Ok(AdmmConfig {
        rho,
        beta: a.beta,
        penalty_scale: scale,
        max_iters: a.max_iters,
        tol_primal: a.tol,
        tol_dual: a.tol,
        parallel: a.parallel,
        record_trace: true,
        reference,
        ..Default::default()
    })
}

#[derive(Serialize)]
struct SolveSummary {
    algorithm: &'static str,
    status: String,
    iterations: usize,
    objective: f64,
    ops_per_iteration: u64,
    warnings: Vec<String>,
    final_dist: Option<f64>,
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let (problem, partition, _) = load(&a.problem)?;
    let reference = a.reference.as_deref().map(load_trajectory).transpose()?;
    let (name, sol): (&str, Solution) = match a.algo {
        Algo::Conventional => {
            let pp = PartitionedProblem::conventional(&problem)?;
            let cfg = solver_config(&a, &pp, reference.clone())?;
            ("conventional", solve_conventional(&pp, &cfg, None)?)
        }
        Algo::Structured => {
            let pp = PartitionedProblem::new(&problem, &partition)?;
            let cfg = solver_config(&a, &pp, reference.clone())?;
            ("structured", solve_structured(&pp, &cfg, None)?)
        }
    };
    let summary = SolveSummary {
        algorithm: name,
        status: format!("{:?}", sol.status),
        iterations: sol.iterations,
        objective: problem.objective(&sol.trajectory),
        ops_per_iteration: sol.ops_per_iteration.total(),
        warnings: sol.warnings.iter().map(|w| format!("{w:?}")).collect(),
        final_dist: reference.as_ref().map(|r| dist(&sol.trajectory, r)).transpose()?,
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("solution.json"), serde_json::to_string_pretty(&TrajectoryFile::from(&sol.trajectory))?)?;
        let meta = [
            ("algorithm", name.to_string()),
            ("beta", a.beta.to_string()),
            ("rho", a.rho.clone()),
            ("status", summary.status.clone()),
            ("ops_per_iteration", summary.ops_per_iteration.to_string()),
        ];
        let mut w = csv_writer(&dir.join("trace.csv"), &meta)?;
        w.write_record(["iter", "r_zeta", "r_eps", "r_dual", "objective", "dist", "cum_ops"])?;
        for t in &sol.trace {
            w.write_record([
                t.iter.to_string(),
                t.r_zeta.to_string(),
                t.r_eps.to_string(),
                t.r_dual.to_string(),
                t.objective.to_string(),
                t.dist.map(|d| d.to_string()).unwrap_or_default(),
                t.cum_ops.to_string(),
            ])?;
        }
        w.flush()?;
    }
    print_json(&summary)
}

fn cmd_tune(a: TuneArgs) -> Result<()> {
    let (problem, partition, _) = load(&a.problem)?;
    let pp = PartitionedProblem::new(&problem, &partition)?;
    let report = penalty_report(&pp)?;
    print_json(&report)?;
    if let Some(points) = a.sweep {
        println!("subsystem,rho,contraction_norm");
        for (i, (s, p)) in pp.subsystems.iter().zip(&report.subsystems).enumerate() {
            let Some(star) = p.rho_star else { continue };
            let z = null_space_basis(&s.c_mat.to_dense())?.z;
            let h = s.hessian();
            for k in 0..points {
                let rho = star * 10f64.powf(-2.0 + 4.0 * k as f64 / (points.max(2) - 1) as f64);
                println!("{},{},{}", i + 1, rho, contraction_norm(rho, &h, &z)?);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeOutput {
    structure: structadmm::structure::StructureReport,
    admissible: Result<(), String>,
    out1: bool,
    virtual_inputs: Vec<usize>,
}

fn cmd_analyze(a: ProblemArg) -> Result<()> {
    let (problem, partition, _) = load(&a)?;
    let structure = analyze(&problem.system, &partition)?;
    let dec = decompose(&problem.system, &partition, DEFAULT_RANK_TOL)?;
    let admissible = validate_admissibility(&problem, &partition).map(|_| ()).map_err(|e| e.to_string());
    print_json(&AnalyzeOutput { structure, admissible, out1: dec.out1, virtual_inputs: dec.wdims })
}

#[derive(Serialize)]
struct ReferenceOutput {
    #[serde(flatten)]
    trajectory: TrajectoryFile,
    kkt_residual: f64,
    iterations: usize,
    polished: bool,
}

fn cmd_reference(a: ReferenceArgs) -> Result<()> {
    let file = ProblemFile::load(&a.problem).with_context(|| format!("reading {}", a.problem.display()))?;
    let (problem, _) = file.to_problem()?;
    let r = reference_solution(&problem)?;
    let out = ReferenceOutput { trajectory: TrajectoryFile::from(&r.trajectory), kkt_residual: r.kkt, iterations: r.iterations, polished: r.polished };
    fs::write(&a.out, serde_json::to_string_pretty(&out)?)?;
    println!("kkt_residual={:e} iterations={} polished={}", r.kkt, r.iterations, r.polished);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let cfg = CascadeConfig { scenarios: a.scenarios, seed: a.seed, beta: a.beta, penalty_scale: a.penalty_scale, ..Default::default() };
    if a.growth {
        return bench_growth(&a);
    }
    if a.cost {
        return bench_cost(&a, &cfg);
    }
    let res = bench_cascade(&cfg)?;
    let c = res.costs();
    let meta = [
        ("system", "cascade".to_string()),
        ("stages", cfg.stages.to_string()),
        ("horizon", cfg.horizon.to_string()),
        ("scenarios", res.runs.len().to_string()),
        ("excluded", res.excluded.len().to_string()),
        ("seed", cfg.seed.to_string()),
        ("penalty_scale", cfg.penalty_scale.to_string()),
        ("beta", cfg.beta.to_string()),
        ("s", res.separation_tendency.map(|s| s.to_string()).unwrap_or_default()),
        ("cost", format!("{}/{}/{}", c[0], c[1], c[2])),
        ("conventions", CONVENTIONS.to_string()),
    ];
    write_cost_csv(&a.out.join("cost.csv"), &meta, &res.cost)?;
    let grid = res.budget_grid(1, cfg.dist_floor, 60);
    let mut w = csv_writer(&a.out.join("convergence.csv"), &meta)?;
    let mut header = vec!["budget".to_string()];
    for cfg_name in ["conventional", "single", "parallel"] {
        for stat in ["geo_mean", "median", "p10", "p90"] {
            header.push(format!("{cfg_name}_{stat}"));
        }
    }
    w.write_record(&header)?;
    for p in res.at_budgets(&grid) {
        let mut row = vec![p.budget.to_string()];
        for k in 0..3 {
            row.extend([p.geo_mean[k], p.median[k], p.p10[k], p.p90[k]].iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    println!("cost {} / {} / {} ; ratios {:.4} {:.4}", c[0], c[1], c[2], res.cost.ratio_single, res.cost.ratio_parallel);
    Ok(())
}

fn write_cost_csv(path: &Path, meta: &[(&str, String)], r: &structadmm::cost::CostReport) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record(["configuration", "admm", "threads", "cost", "ratio"])?;
    w.write_record(["i", "conventional", "1", &r.conventional.to_string(), "1"])?;
    w.write_record(["ii", "structured", "1", &r.structured_single.to_string(), &r.ratio_single.to_string()])?;
    w.write_record(["iii", "structured", "2MN", &r.structured_parallel.to_string(), &r.ratio_parallel.to_string()])?;
    w.flush()?;
    Ok(())
}

fn bench_cost(a: &BenchArgs, cfg: &CascadeConfig) -> Result<()> {
    let (problem, partition) = match &a.problem {
        Some(p) => {
            let (pr, part, _) = load(&ProblemArg { problem: p.clone(), partition: None })?;
            (pr, part)
        }
        None => {
            let spec = {
                let mut s = GenSpec::new(Category::Cascade, vec![cfg.xi; cfg.stages], vec![cfg.ui; cfg.stages], cfg.seed);
                s.coupling_rank = cfg.coupling_rank;
                s
            };
            let (sys, part) = gen_category(&spec)?;
            (scenario(&sys, &ScenarioSpec { horizon: cfg.horizon, ..Default::default() }, cfg.seed)?, part)
        }
    };
    let report = structadmm::cost::cost_report(&problem, &partition, a.beta, None)?;
    let meta = [("use_case", format!("{:?}", report.use_case)), ("conventions", CONVENTIONS.to_string())];
    write_cost_csv(&a.out.join("cost.csv"), &meta, &report)?;

    let pp = PartitionedProblem::new(&problem, &partition)?;
    let cache = structured_cache(&pp, &AdmmConfig { beta: a.beta, ..Default::default() })?;
    let counter = count_iteration(&pp, &cache, Mode::Structured)?;
    let threads = match a.threads_model {
        ThreadsModel::One => Threads::One,
        ThreadsModel::TwoMN => Threads::TwoMN,
    };
    let plan = thread_partition(&counter, &pp, report.use_case, threads)?;
    let mut w = csv_writer(&a.out.join("plan.csv"), &[("threads", plan.thread_count.to_string()), ("longest", plan.longest.to_string())])?;
    w.write_record(["phase", "unit", "cost"])?;
    for ph in &plan.phases {
        for (u, c) in ph.unit_costs.iter().enumerate() {
            w.write_record([ph.steps.clone(), u.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    print_json(&report)
}

fn bench_growth(a: &BenchArgs) -> Result<()> {
    let horizon = 10;
    let meta = [("family", "ring_chain".to_string()), ("horizon", horizon.to_string()), ("conventions", CONVENTIONS.to_string())];
    let mut w = csv_writer(&a.out.join("growth.csv"), &meta)?;
    w.write_record(["m", "row", "measured", "order", "ratio"])?;
    for m in 1..=a.max_chain {
        let (sys, part, wdims) = gen_ring_chain(m)?;
        let problem = scenario(&sys, &ScenarioSpec { horizon, ..Default::default() }, a.seed)?;
        for row in TableRow::ALL {
            let beta = if m == 1 { 1.0 } else { a.beta };
            let measured = measured_row(&problem, &part, beta, row)?;
            let order = complexity_order(&part.xdims, &wdims, horizon, row);
            w.write_record([m.to_string(), (row as u8).to_string(), measured.to_string(), order.to_string(), (measured as f64 / order).to_string()])?;
        }
    }
    w.flush()?;
    println!("wrote {}", a.out.join("growth.csv").display());
    Ok(())
}

fn cmd_study(a: StudyArgs) -> Result<()> {
    let categories = match &a.categories {
        Some(s) => s.split(',').map(|c| c.trim().parse()).collect::<structadmm::Result<Vec<Category>>>()?,
        None => Category::STUDY.to_vec(),
    };
    let cfg = StudyConfig {
        categories,
        dims: parse_dims(&a.dims)?,
        seeds: a.seeds,
        initial_conditions: a.initial_conditions,
        dist_target: a.dist_target,
        rho: parse_rho(&a.rho)?,
        base_seed: a.seed,
        ..Default::default()
    };
    let res = run_study(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let meta = [
        ("systems", res.systems.len().to_string()),
        ("spearman", res.spearman.map(|v| v.to_string()).unwrap_or_default()),
        ("dist_target", cfg.dist_target.to_string()),
        ("initial_conditions", cfg.initial_conditions.to_string()),
        ("horizon", cfg.horizon.to_string()),
        ("base_seed", cfg.base_seed.to_string()),
    ];
    let mut w = csv_writer(&a.out.join("study.csv"), &meta)?;
    w.write_record(["category", "nx", "blocks", "seed", "s", "increase_factor", "mean_iters_conventional", "mean_iters_structured", "skipped"])?;
    let mean = |v: &[usize]| if v.is_empty() { String::new() } else { (v.iter().sum::<usize>() as f64 / v.len() as f64).to_string() };
    for s in &res.systems {
        w.write_record([
            s.spec.category.name().to_string(),
            s.spec.xdims.iter().sum::<usize>().to_string(),
            s.spec.xdims.len().to_string(),
            s.spec.seed.to_string(),
            s.s.map(|v| v.to_string()).unwrap_or_default(),
            s.increase_factor.map(|v| v.to_string()).unwrap_or_default(),
            mean(&s.iters_conventional),
            mean(&s.iters_structured),
            s.skipped.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    match res.spearman {
        Some(r) => println!("spearman(s, increase) = {r:.4} over {} systems", res.pairs().0.len()),
        None => println!("spearman undefined"),
    }
    Ok(())
}
