//! Command-line front end.
//!
//! Exit codes: 0 success, 1 parse or io error, 2 assumption failure or
//! invalid parameters, 3 solver error, 4 verdict failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{LqError, Result};
use crate::feedback::{solve, Backward, LawBundle, Solution, SolveOptions};
use crate::io;
use crate::linalg::Mat;
use crate::mckv_sim::{martingale_diagnostic, SimConfig, DEFAULT_EPS};
use crate::model::{canonicalize, parse_problem, validate_assumptions, ProblemSpec, DEFAULT_TOL};
use crate::resource_case::{
    closed_form_constants, default_market_config, extraction_rule, sensitivity_table,
    simulate_market, stationary_reserve, PriceModel, ResourceParams, LIMIT_REL_TOL,
};
use crate::riccati::InfiniteOptions;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERDICT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "lqmkv", version, about = "Linear-quadratic McKean-Vlasov solver and verifier")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Backward-solver steps on [0, T].
    #[arg(long, global = true, default_value_t = 1000)]
    pub grid_steps: usize,
    /// Particles per world.
    #[arg(long, global = true)]
    pub particles: Option<usize>,
    /// Euler time step.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// Proceed when the existence conditions cannot be verified.
    #[arg(long, global = true)]
    pub allow_unverified: bool,
    /// Common-noise worlds.
    #[arg(long, global = true)]
    pub worlds: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the backward system and write the feedback law and value.
    Solve { spec: PathBuf },
    /// Run the martingale diagnostic on a solved problem.
    Verify {
        spec: PathBuf,
        /// Law bundle written by `solve`; solved in-process when absent.
        #[arg(long)]
        law: Option<PathBuf>,
        #[arg(long)]
        no_perturbations: bool,
        /// Simulation horizon (infinite-horizon problems).
        #[arg(long)]
        t_sim: Option<f64>,
    },
    /// Closed forms, sensitivities and market simulation of the resource model.
    Resource(ResourceArgs),
    /// Check the assumptions of a problem without solving it.
    Validate { spec: PathBuf },
}

#[derive(Debug, Args)]
pub struct ResourceArgs {
    /// JSON file with any subset of the parameters; flags override it.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub pbar: Option<f64>,
    #[arg(long)]
    pub price_vol: Option<f64>,
    #[arg(long)]
    pub p0: Option<f64>,
    /// Also run the common-noise market simulation.
    #[arg(long)]
    pub simulate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverSettings {
    pub grid_steps: usize,
    pub allow_unverified: bool,
    pub assumption_tol: f64,
    pub infinite: InfiniteOptions,
    pub law_dt: f64,
    pub law_horizon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Tolerances {
    pub se_band: f64,
    pub exponent_range: [f64; 2],
    pub limit_rel_tol: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub input_sha256: Option<String>,
    pub seed: u64,
    pub solver: SolverSettings,
    pub sim: Option<SimConfig>,
    pub tolerances: Tolerances,
    pub version: String,
    /// Hash of every field above; equal ids mean reproducible runs.
    pub run_id: String,
    pub outputs: Vec<OutputFile>,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Artifacts {
    fn new(dir: &Path) -> Artifacts {
        Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn put(&mut self, name: &str, content: &str) -> Result<()> {
        io::write(&self.dir.join(name), content)?;
        self.files.push(OutputFile {
            name: name.into(),
            sha256: io::sha256_hex(content.as_bytes()),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        self.put(name, &io::to_json(v)?)
    }

    fn finish(mut self, mut manifest: RunManifest) -> Result<()> {
        manifest.run_id.clear();
        manifest.outputs.clear();
        manifest.run_id = io::sha256_hex(io::to_json(&manifest)?.as_bytes());
        manifest.outputs = std::mem::take(&mut self.files);
        io::write(&self.dir.join("manifest.json"), &io::to_json(&manifest)?)
    }
}

fn solver_settings(g: &Global) -> SolverSettings {
    let o = solve_options(g);
    SolverSettings {
        grid_steps: o.grid_steps,
        allow_unverified: o.allow_unverified,
        assumption_tol: DEFAULT_TOL,
        infinite: o.infinite,
        law_dt: o.law_dt,
        law_horizon: o.law_horizon,
    }
}

fn tolerances() -> Tolerances {
    Tolerances {
        se_band: 3.0,
        exponent_range: [1.7, 2.3],
        limit_rel_tol: LIMIT_REL_TOL,
    }
}

fn manifest(command: &str, g: &Global, input: Option<&str>, sim: Option<SimConfig>) -> RunManifest {
    RunManifest {
        command: command.into(),
        input_sha256: input.map(String::from),
        seed: g.seed,
        solver: solver_settings(g),
        sim,
        tolerances: tolerances(),
        version: env!("CARGO_PKG_VERSION").into(),
        run_id: String::new(),
        outputs: Vec::new(),
    }
}

fn solve_options(g: &Global) -> SolveOptions {
    SolveOptions {
        grid_steps: g.grid_steps,
        allow_unverified: g.allow_unverified,
        ..Default::default()
    }
}

fn read_spec(path: &Path) -> Result<(ProblemSpec, String)> {
    let text = io::read(path)?;
    let spec = parse_problem(&text, &path.display().to_string())?;
    Ok((spec, io::sha256_hex(text.as_bytes())))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn mat_header(prefix: &str, r: usize, c: usize) -> Vec<String> {
    (0..r)
        .flat_map(|i| (0..c).map(move |j| format!("{prefix}_{i}_{j}")))
        .collect()
}

fn flat(m: &Mat) -> impl Iterator<Item = f64> + '_ {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>())
}

#[derive(Serialize)]
struct ValueDoc {
    spec_hash: String,
    horizon: &'static str,
    value: f64,
    k0: Vec<Vec<f64>>,
    lambda0: Vec<Vec<f64>>,
    y0: Vec<Vec<f64>>,
    r0: f64,
    r_tail_bound: f64,
    mean_state_steady_at: Option<f64>,
    riccati_residuals: Option<(f64, f64)>,
}

fn write_solution(art: &mut Artifacts, sol: &Solution, hash: &str) -> Result<()> {
    let w = &sol.w;
    let d = sol.prob.d();
    let k = sol.prob.spec.k();

    let mut header = vec!["t".to_string()];
    header.extend(mat_header("K", d, d));
    header.extend(mat_header("Lambda", d, d));
    let data: Vec<Vec<f64>> = (0..w.grid.len())
        .map(|j| {
            std::iter::once(w.grid[j])
                .chain(flat(&w.k[j]))
                .chain(flat(&w.lambda[j]))
                .collect()
        })
        .collect();
    art.put("riccati.csv", &io::csv(&header, &data))?;

    let mut header = vec!["t".to_string()];
    for i in 0..d {
        header.push(format!("y0_{i}"));
        for f in &sol.prob.spec.factors.0 {
            header.push(format!("y{}_{i}", f.name));
        }
    }
    let data: Vec<Vec<f64>> = (0..w.grid.len())
        .map(|j| {
            let y = &w.y[j];
            let mut r = vec![w.grid[j]];
            for i in 0..d {
                r.push(y.c[i]);
                r.extend((0..k).map(|kk| y.load[(i, kk)]));
            }
            r
        })
        .collect();
    art.put("y.csv", &io::csv(&header, &data))?;

    let data: Vec<Vec<f64>> = w.grid.iter().zip(&w.r).map(|(t, r)| vec![*t, *r]).collect();
    art.put("r.csv", &io::csv(&["t".into(), "R".into()], &data))?;
    art.put("feedback_law.csv", &sol.law.to_csv())?;
    art.json("law_bundle.json", &sol.bundle(hash))?;
    art.json("assumptions.json", &sol.report)?;

    let (horizon, residuals) = match &sol.backward {
        Backward::Finite(_) => ("finite", None),
        Backward::Infinite(p) => ("infinite", Some(p.residual_norms)),
    };
    if let Backward::Infinite(p) = &sol.backward {
        #[derive(Serialize)]
        struct Ladders<'a> {
            k: &'a crate::riccati::LadderReport,
            lambda: &'a crate::riccati::LadderReport,
        }
        art.json(
            "riccati_ladder.json",
            &Ladders {
                k: &p.k_ladder,
                lambda: &p.lambda_ladder,
            },
        )?;
    }
    let y0 = sol.y.at(0.0);
    art.json(
        "value.json",
        &ValueDoc {
            spec_hash: hash.into(),
            horizon,
            value: sol.value,
            k0: rows(&w.k[0]),
            lambda0: rows(&w.lambda[0]),
            y0: rows(&y0),
            r0: w.r[0],
            r_tail_bound: sol.r.tail_bound,
            mean_state_steady_at: sol.mean_path.steady_at,
            riccati_residuals: residuals,
        },
    )
}

pub fn cmd_solve(g: &Global, spec_path: &Path) -> Result<i32> {
    let (spec, hash) = read_spec(spec_path)?;
    let sol = solve(&spec, &solve_options(g))?;
    let mut art = Artifacts::new(&g.out);
    write_solution(&mut art, &sol, &hash)?;
    art.finish(manifest("solve", g, Some(&hash), None))?;
    println!("value {}", io::num(sol.value));
    Ok(EXIT_OK)
}

/// Reference resolution: N = 10⁵ and dt = 10⁻³ on a finite horizon; 64
/// worlds of 1024 with dt = 10⁻² for common noise. Infinite horizons are
/// simulated up to 20/ρ unless `t_sim` is given.
pub fn verify_config(g: &Global, spec: &ProblemSpec, t_sim: Option<f64>) -> SimConfig {
    let (n, dt, worlds) = if spec.common_noise {
        (1024, 1e-2, 64)
    } else {
        (100_000, 1e-3, 1)
    };
    SimConfig {
        particles: g.particles.unwrap_or(n),
        dt: g.dt.unwrap_or(dt),
        worlds: g.worlds.unwrap_or(worlds),
        seed: g.seed,
        t_sim: t_sim.or_else(|| spec.horizon.is_infinite().then(|| 20.0 / spec.rho())),
        ..Default::default()
    }
}

pub fn cmd_verify(
    g: &Global,
    spec_path: &Path,
    law: Option<&Path>,
    perturb: bool,
    t_sim: Option<f64>,
) -> Result<i32> {
    let (spec, hash) = read_spec(spec_path)?;
    let bundle: LawBundle = match law {
        Some(p) => {
            let text = io::read(p)?;
            let b: LawBundle = serde_json::from_str(&text).map_err(|e| LqError::Parse {
                file: p.display().to_string(),
                line: e.line(),
                column: e.column(),
                msg: e.to_string(),
            })?;
            if b.spec_hash != hash {
                return Err(LqError::Invalid(format!(
                    "law bundle {} was computed for a different problem",
                    p.display()
                )));
            }
            b
        }
        None => solve(&spec, &solve_options(g))?.bundle(&hash),
    };
    let prob = canonicalize(&spec)?;
    let cfg = verify_config(g, &spec, t_sim);
    let eps: &[f64] = if perturb { &DEFAULT_EPS } else { &[] };
    let report = martingale_diagnostic(&prob, Some(&bundle), &cfg, eps)?;
    let mut art = Artifacts::new(&g.out);
    art.json("diagnostics.json", &report)?;
    art.put("martingale_trace.csv", &report.trace_csv())?;
    art.finish(manifest("verify", g, Some(&hash), Some(cfg)))?;
    println!(
        "value {} mc {} se {} verdict {}",
        io::num(report.value),
        io::num(report.j_mc),
        io::num(report.j_se),
        if report.pass { "pass" } else { "fail" }
    );
    Ok(if report.pass { EXIT_OK } else { EXIT_VERDICT })
}

pub fn cmd_validate(g: &Global, spec_path: &Path) -> Result<i32> {
    let (spec, hash) = read_spec(spec_path)?;
    let report = validate_assumptions(&spec)?;
    let mut art = Artifacts::new(&g.out);
    art.json("assumptions.json", &report)?;
    art.finish(manifest("validate", g, Some(&hash), None))?;
    println!("{}", report.route);
    if report.requires_allow_unverified && !g.allow_unverified {
        return Err(LqError::AssumptionFailure(format!(
            "{}; failed: {}",
            report.route,
            report.failed().join(", ")
        )));
    }
    Ok(EXIT_OK)
}

pub fn resource_params(a: &ResourceArgs) -> Result<ResourceParams> {
    let mut p = match &a.params {
        Some(path) => {
            let text = io::read(path)?;
            serde_json::from_str::<ResourceParams>(&text).map_err(|e| LqError::Parse {
                file: path.display().to_string(),
                line: e.line(),
                column: e.column(),
                msg: e.to_string(),
            })?
        }
        None => ResourceParams::default(),
    };
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut p.x0, a.x0);
    set(&mut p.sigma, a.sigma);
    set(&mut p.delta, a.delta);
    set(&mut p.epsilon, a.epsilon);
    set(&mut p.eta, a.eta);
    set(&mut p.c, a.c);
    set(&mut p.rho, a.rho);
    let PriceModel { kappa, pbar, vol, p0 } = &mut p.price;
    set(kappa, a.kappa);
    set(pbar, a.pbar);
    set(vol, a.price_vol);
    set(p0, a.p0);
    p.check()?;
    Ok(p)
}

pub const ETA_GRID: [f64; 9] = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0];
pub const EPS_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

#[derive(Serialize)]
struct ResourceDoc {
    params: ResourceParams,
    constants: crate::resource_case::ResourceSolution,
    reserve: crate::resource_case::StationaryReserve,
    rule: crate::resource_case::ExtractionRule,
    hotelling_rent: f64,
}

pub fn cmd_resource(g: &Global, a: &ResourceArgs) -> Result<i32> {
    let p = resource_params(a)?;
    let mut art = Artifacts::new(&g.out);
    art.json(
        "resource_constants.json",
        &ResourceDoc {
            params: p,
            constants: closed_form_constants(&p)?,
            reserve: stationary_reserve(&p)?,
            rule: extraction_rule(&p)?,
            hotelling_rent: p.hotelling_rent(),
        },
    )?;
    let table = sensitivity_table(&p, &ETA_GRID, &EPS_GRID)?;
    art.put("sensitivity.csv", &table.to_csv())?;
    art.json("sensitivity.json", &table)?;
    let mut pass = table.pass;
    let mut sim = None;
    if a.simulate {
        let mut cfg = default_market_config(&p, g.seed);
        cfg.particles = g.particles.unwrap_or(cfg.particles);
        cfg.worlds = g.worlds.unwrap_or(cfg.worlds);
        cfg.dt = g.dt.unwrap_or(cfg.dt);
        let (report, path) = simulate_market(&p, &cfg, &solve_options(g))?;
        art.json("market.json", &report)?;
        art.put("reserve_path.csv", &path.to_csv())?;
        pass &= report.pass;
        sim = Some(cfg);
    }
    let hash = io::sha256_hex(io::to_json(&p)?.as_bytes());
    art.finish(manifest("resource", g, Some(&hash), sim))?;
    let s = stationary_reserve(&p)?;
    println!(
        "xbar_infty {} verdict {}",
        io::num(s.xbar_infty),
        if pass { "pass" } else { "fail" }
    );
    Ok(if pass { EXIT_OK } else { EXIT_VERDICT })
}

pub fn run(cli: &Cli) -> Result<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::Solve { spec } => cmd_solve(g, spec),
        Command::Verify {
            spec,
            law,
            no_perturbations,
            t_sim,
        } => cmd_verify(g, spec, law.as_deref(), !no_perturbations, *t_sim),
        Command::Resource(a) => cmd_resource(g, a),
        Command::Validate { spec } => cmd_validate(g, spec),
    }
}

/// Parses `args`, runs the command and maps errors to exit codes.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
