//! Exhaustible-resource production with a common random price.
//!
//! A representative producer extracts α from a reserve
//! dX = −α dt + σX dW and sells at P = P⁰ − δα − ε(x₀ − E[X|W⁰]), with an
//! extraction cost cα(x₀ − X)/x₀ and a penalty η·Var(α|W⁰). The gain is
//! maximised; the solver sees the equivalent minimisation of the negated
//! integrand, whose coefficients are
//!
//! C = −1, D = σ, N = δ+η, Ñ = −η, I = −c/(2x₀), Ĩ = −ε/2,
//! H = (c + εx₀ − P⁰)/2.
//!
//! P⁰ is an Ornstein-Uhlenbeck price reverting to p̄, driven by the common
//! noise, so every conditional expectation below is closed form.

use serde::{Deserialize, Serialize};

use crate::error::{LqError, Result};
use crate::feedback::{solve, Solution, SolveOptions};
use crate::linalg::{Mat, Vector};
use crate::mckv_sim::{batch_stats, simulate, Policy, SimConfig};
use crate::model::{
    AffineProc, Binding, Factor, Factors, Horizon, InitialLaw, ProblemSpec, TimeMat,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceModel {
    pub kappa: f64,
    pub pbar: f64,
    pub vol: f64,
    pub p0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceParams {
    pub x0: f64,
    pub sigma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub c: f64,
    pub rho: f64,
    pub price: PriceModel,
}

impl Default for PriceModel {
    fn default() -> Self {
        ResourceParams::default().price
    }
}

impl Default for ResourceParams {
    fn default() -> Self {
        let pbar = 0.5;
        ResourceParams {
            x0: 1.0,
            sigma: 0.3,
            delta: 1.0,
            epsilon: 0.2,
            eta: 0.5,
            c: 1.0,
            rho: 0.5,
            price: PriceModel {
                kappa: 1.0,
                pbar,
                vol: 0.5 * pbar,
                p0: pbar,
            },
        }
    }
}

impl ResourceParams {
    /// ∫e^{−ρt}E[|P⁰_t|²]dt is finite for any OU price, so only the
    /// listed sign conditions and ρ > σ² are checked.
    pub fn check(&self) -> Result<()> {
        let p = self;
        let positive = [
            ("x0", p.x0),
            ("sigma", p.sigma),
            ("delta", p.delta),
            ("epsilon", p.epsilon),
            ("c", p.c),
            ("rho", p.rho),
            ("price.kappa", p.price.kappa),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LqError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("eta", p.eta), ("price.vol", p.price.vol)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LqError::InvalidParams(format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [("price.pbar", p.price.pbar), ("price.p0", p.price.p0)] {
            if !v.is_finite() {
                return Err(LqError::InvalidParams(format!("{name} must be finite")));
            }
        }
        if p.rho <= p.sigma * p.sigma {
            return Err(LqError::InvalidParams(format!(
                "need rho > sigma^2, got rho = {} and sigma^2 = {}",
                p.rho,
                p.sigma * p.sigma
            )));
        }
        Ok(())
    }

    /// p̄ − c − εx₀
    pub fn hotelling_rent(&self) -> f64 {
        self.price.pbar - self.c - self.epsilon * self.x0
    }

    fn with(&self, eta: f64, epsilon: f64) -> ResourceParams {
        ResourceParams {
            eta,
            epsilon,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceSolution {
    pub k_eta: f64,
    pub lambda_eps: f64,
    /// Roots of the Riccati pair: K = (δ+η)K_η − c/(2x₀),
    /// Λ = δΛ_ε − (c+εx₀)/(2x₀).
    pub k: f64,
    pub lambda: f64,
    /// Y_t = y_const + y_price·P⁰_t.
    pub y_const: f64,
    pub y_price: f64,
    pub xbar_infty: f64,
    pub lambda_eta: f64,
}

/// Optimal extraction α* = gain·(x − x̄) + gain_bar·x̄ + offset_const +
/// offset_price·P⁰.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtractionRule {
    pub gain: f64,
    pub gain_bar: f64,
    pub offset_const: f64,
    pub offset_price: f64,
}

pub fn closed_form_constants(p: &ResourceParams) -> Result<ResourceSolution> {
    p.check()?;
    let a = p.rho - p.sigma * p.sigma;
    let ce = p.c + p.epsilon * p.x0;
    let k_eta = 0.5 * (-a + (a * a + 2.0 * p.c * a / (p.x0 * (p.delta + p.eta))).sqrt());
    let k = (p.delta + p.eta) * k_eta - p.c / (2.0 * p.x0);
    let disc = p.rho * p.rho
        + 2.0 * (p.rho * ce + 2.0 * p.sigma * p.sigma * k * p.x0) / (p.delta * p.x0);
    let lambda_eps = 0.5 * (-p.rho + disc.sqrt());
    let lambda = p.delta * lambda_eps - ce / (2.0 * p.x0);
    let (xbar_infty, lambda_eta) = reserve_forms(p, k_eta, lambda_eps).0;
    let (kap, pbar) = (p.price.kappa, p.price.pbar);
    let y_price = -lambda_eps / (2.0 * (p.rho + lambda_eps + kap));
    let y_const = -0.5 * lambda_eps * ((pbar - ce) / (p.rho + lambda_eps) - pbar / (p.rho + lambda_eps + kap));
    Ok(ResourceSolution {
        k_eta,
        lambda_eps,
        k,
        lambda,
        y_const,
        y_price,
        xbar_infty,
        lambda_eta,
    })
}

/// ((x̄_∞ via λ_η, λ_η), x̄_∞ via the direct form).
fn reserve_forms(p: &ResourceParams, k_eta: f64, lambda_eps: f64) -> ((f64, f64), f64) {
    let a = p.rho - p.sigma * p.sigma;
    let ce = p.c + p.epsilon * p.x0;
    let lambda_eta = a * (k_eta + p.rho) / (p.rho * (k_eta + a));
    let via_lambda =
        (1.0 - p.price.pbar / ce) * p.x0 / (p.epsilon * p.x0 / ce + p.c / ce * lambda_eta);
    let direct = p.rho * (ce - p.price.pbar) / (2.0 * p.delta * lambda_eps * (p.rho + lambda_eps));
    ((via_lambda, lambda_eta), direct)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationaryReserve {
    pub xbar_infty: f64,
    pub xbar_infty_direct: f64,
    pub lambda_eta: f64,
}

/// Long-run mean reserve computed two ways, through λ_η and directly
/// from Λ_ε; their agreement checks the algebraic identity
/// 2δΛ_ε(ρ+Λ_ε) = ρε + (ρ−σ²)(c/x₀)(K_η+ρ)/(K_η+ρ−σ²).
pub fn stationary_reserve(p: &ResourceParams) -> Result<StationaryReserve> {
    let s = closed_form_constants(p)?;
    let ((xbar_infty, lambda_eta), xbar_infty_direct) = reserve_forms(p, s.k_eta, s.lambda_eps);
    Ok(StationaryReserve {
        xbar_infty,
        xbar_infty_direct,
        lambda_eta,
    })
}

pub fn extraction_rule(p: &ResourceParams) -> Result<ExtractionRule> {
    let s = closed_form_constants(p)?;
    let (l, r, kap, pbar) = (s.lambda_eps, p.rho, p.price.kappa, p.price.pbar);
    let ce = p.c + p.epsilon * p.x0;
    Ok(ExtractionRule {
        gain: s.k_eta,
        gain_bar: l,
        offset_const: (pbar * l * (1.0 / (r + l + kap) - 1.0 / (r + l)) - ce * r / (r + l))
            / (2.0 * p.delta),
        offset_price: (1.0 - l / (r + l + kap)) / (2.0 * p.delta),
    })
}

/// x₀(1 − p̄/(c+εx₀)), the η → ∞ limit.
pub fn eta_limit(p: &ResourceParams) -> f64 {
    p.x0 * (1.0 - p.price.pbar / (p.c + p.epsilon * p.x0))
}

/// (ε → 0 limit (1/λ_η)x₀(1 − p̄/c), ε → ∞ limit x₀).
pub fn eps_limits(p: &ResourceParams) -> Result<(f64, f64)> {
    let lam = stationary_reserve(p)?.lambda_eta;
    Ok((p.x0 * (1.0 - p.price.pbar / p.c) / lam, p.x0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub eta: f64,
    pub epsilon: f64,
    pub xbar_infty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitCheck {
    pub at: f64,
    pub value: f64,
    pub limit: f64,
    pub rel_err: f64,
    pub ok: bool,
}

impl LimitCheck {
    fn new(at: f64, value: f64, limit: f64) -> LimitCheck {
        let rel_err = (value - limit).abs() / limit.abs().max(f64::MIN_POSITIVE);
        LimitCheck {
            at,
            value,
            limit,
            rel_err,
            ok: rel_err <= LIMIT_REL_TOL,
        }
    }
}

pub const LIMIT_REL_TOL: f64 = 0.01;
pub const ETA_LARGE: f64 = 1e6;
pub const EPS_SMALL: f64 = 1e-6;
pub const EPS_LARGE: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityTable {
    pub rows: Vec<SensitivityRow>,
    pub negative_rent: bool,
    /// Strictly decreasing in η for every ε on the grid (only meaningful
    /// under a negative Hotelling rent).
    pub decreasing_in_eta: bool,
    /// One check per ε on the grid, at η = 10⁶.
    pub eta_limit: Vec<LimitCheck>,
    /// One pair per η on the grid, at ε = 10⁻⁶ and ε = 10³.
    pub eps_small_limit: Vec<LimitCheck>,
    pub eps_large_limit: Vec<LimitCheck>,
    pub pass: bool,
}

impl SensitivityTable {
    pub fn to_csv(&self) -> String {
        let header = ["eta", "epsilon", "xbar_infty"].map(String::from);
        let rows: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| vec![r.eta, r.epsilon, r.xbar_infty])
            .collect();
        crate::io::csv(&header, &rows)
    }
}

pub fn sensitivity_table(
    p: &ResourceParams,
    eta_grid: &[f64],
    eps_grid: &[f64],
) -> Result<SensitivityTable> {
    p.check()?;
    let xb = |eta: f64, eps: f64| stationary_reserve(&p.with(eta, eps)).map(|s| s.xbar_infty);
    let mut rows = Vec::new();
    let mut decreasing = true;
    let mut negative_rent = true;
    for &eps in eps_grid {
        negative_rent &= p.with(p.eta, eps).hotelling_rent() < 0.0;
        let mut prev = f64::INFINITY;
        for &eta in eta_grid {
            let v = xb(eta, eps)?;
            decreasing &= v < prev;
            prev = v;
            rows.push(SensitivityRow {
                eta,
                epsilon: eps,
                xbar_infty: v,
            });
        }
    }
    let eta_limit = eps_grid
        .iter()
        .map(|&eps| Ok(LimitCheck::new(ETA_LARGE, xb(ETA_LARGE, eps)?, eta_limit(&p.with(p.eta, eps)))))
        .collect::<Result<Vec<_>>>()?;
    let mut eps_small_limit = Vec::new();
    let mut eps_large_limit = Vec::new();
    for &eta in eta_grid {
        let (lo, hi) = eps_limits(&p.with(eta, p.epsilon))?;
        eps_small_limit.push(LimitCheck::new(EPS_SMALL, xb(eta, EPS_SMALL)?, lo));
        eps_large_limit.push(LimitCheck::new(EPS_LARGE, xb(eta, EPS_LARGE)?, hi));
    }
    let pass = (!negative_rent || decreasing)
        && eta_limit.iter().all(|c| c.ok)
        && eps_small_limit.iter().all(|c| c.ok)
        && eps_large_limit.iter().all(|c| c.ok);
    Ok(SensitivityTable {
        rows,
        negative_rent,
        decreasing_in_eta: decreasing,
        eta_limit,
        eps_small_limit,
        eps_large_limit,
        pass,
    })
}

/// The resource model as a generic infinite-horizon common-noise problem.
pub fn problem_spec(p: &ResourceParams) -> Result<ProblemSpec> {
    p.check()?;
    let mut s = ProblemSpec::zeros(1, 1, Horizon::infinite(p.rho));
    s.factors = Factors(vec![Factor {
        name: "price".into(),
        kappa: p.price.kappa,
        level: p.price.pbar,
        vol: p.price.vol,
        initial: p.price.p0,
        binding: Binding::Common,
    }]);
    s.common_noise = true;
    s.beta = AffineProc::zeros(1, 1);
    s.drivers[0].gamma = AffineProc::zeros(1, 1);
    s.mc = AffineProc::zeros(1, 1);
    s.l = AffineProc::zeros(1, 1);
    s.c = TimeMat::scalar(-1.0);
    s.drivers[0].d = TimeMat::scalar(p.sigma);
    s.n = TimeMat::scalar(p.delta + p.eta);
    s.nt = TimeMat::scalar(-p.eta);
    s.i = TimeMat::scalar(-p.c / (2.0 * p.x0));
    s.it = TimeMat::scalar(-p.epsilon / 2.0);
    s.h = AffineProc {
        base: TimeMat::scalar((p.c + p.epsilon * p.x0) / 2.0),
        load: Mat::from_element(1, 1, -0.5),
    };
    s.x0 = InitialLaw::Point(Vector::from_element(1, p.x0));
    Ok(s)
}

/// Generic pipeline run on the resource problem.
pub fn solve_generic(p: &ResourceParams, opts: &SolveOptions) -> Result<Solution> {
    solve(&problem_spec(p)?, opts)
}

/// E[X*_t | W⁰] along one price path sampled at spacing `dt`, with the
/// price held at its left-endpoint value on each step and the linear ODE
/// dX̄ = −(Λ_ε X̄ + offset(P⁰))dt integrated exactly.
pub fn conditional_mean_reserve(p: &ResourceParams, prices: &[f64], dt: f64) -> Result<Vec<f64>> {
    let rule = extraction_rule(p)?;
    let l = rule.gain_bar;
    let decay = (-l * dt).exp();
    let gain = (1.0 - decay) / l;
    let mut out = Vec::with_capacity(prices.len());
    let mut xb = p.x0;
    for (j, pr) in prices.iter().enumerate() {
        out.push(xb);
        if j + 1 < prices.len() {
            xb = xb * decay - (rule.offset_const + rule.offset_price * pr) * gain;
        }
    }
    Ok(out)
}

/// Simulated vs closed-form conditional mean reserve, per world.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReservePath {
    pub t: Vec<f64>,
    pub simulated: Vec<Vec<f64>>,
    pub closed_form: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
}

impl ReservePath {
    /// One row per time: t, then simulated and closed form for each world.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["t".to_string()];
        for w in 0..self.simulated.len() {
            header.push(format!("sim_w{w}"));
            header.push(format!("closed_w{w}"));
        }
        let rows: Vec<Vec<f64>> = (0..self.t.len())
            .map(|j| {
                let mut r = vec![self.t[j]];
                for w in 0..self.simulated.len() {
                    r.push(self.simulated[w][j]);
                    r.push(self.closed_form[w][j]);
                }
                r
            })
            .collect();
        crate::io::csv(&header, &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketReport {
    pub worlds: usize,
    pub particles: usize,
    pub dt: f64,
    pub t_sim: f64,
    pub xbar_infty: f64,
    pub long_run_mean: f64,
    pub long_run_se: f64,
    pub long_run_ok: bool,
    pub terminal_control: f64,
    pub terminal_control_se: f64,
    pub control_ok: bool,
    /// Tracking window [0, 10/ρ].
    pub tracking_horizon: f64,
    pub tracking_max_err: f64,
    /// Largest err / (3·SE + 5·dt) over the window and worlds.
    pub tracking_max_ratio: f64,
    pub tracking_ok: bool,
    pub value: f64,
    pub gain_value: f64,
    pub j_mc: f64,
    pub j_se: f64,
    pub tail_bound: f64,
    pub value_ok: bool,
    pub pass: bool,
}

/// Simulates M worlds of N producers under the optimal extraction rule
/// and checks the conditional mean reserve against its closed form, the
/// long-run mean against x̄_∞, the long-run mean extraction against 0 and
/// the simulated cost against the value.
pub fn simulate_market(
    p: &ResourceParams,
    cfg: &SimConfig,
    opts: &SolveOptions,
) -> Result<(MarketReport, ReservePath)> {
    let consts = closed_form_constants(p)?;
    let sol = solve_generic(p, opts)?;
    let cfg = SimConfig {
        track_worlds: true,
        ..cfg.clone()
    };
    let ens = simulate(&sol.prob, Policy::Law(&sol.law), &cfg, None)?;
    let tr = ens
        .world_track
        .as_ref()
        .expect("world tracking was requested");
    let n = ens.particles_per_world as f64;
    let horizon = 10.0 / p.rho;
    let mut path = ReservePath {
        t: tr.t.clone(),
        simulated: tr.mean.clone(),
        closed_form: Vec::new(),
        se: tr.sd.iter().map(|w| w.iter().map(|s| s / n.sqrt()).collect()).collect(),
    };
    let mut max_err: f64 = 0.0;
    let mut max_ratio: f64 = 0.0;
    for w in 0..ens.worlds {
        let cf = conditional_mean_reserve(p, &tr.factors[w], ens.dt)?;
        for (j, &t) in tr.t.iter().enumerate() {
            if t > horizon + 1e-9 {
                break;
            }
            let err = (tr.mean[w][j] - cf[j]).abs();
            max_err = max_err.max(err);
            max_ratio = max_ratio.max(err / (3.0 * path.se[w][j] + 5.0 * ens.dt));
        }
        path.closed_form.push(cf);
    }
    let last = ens.records.last().expect("at least one record");
    let (j_mc, j_se) = batch_stats(&ens.j_batches);
    let long_run_ok = (last.mean[0] - consts.xbar_infty).abs() <= 3.0 * last.mean_se[0];
    let control_ok = last.mean_control[0].abs() <= 3.0 * last.mean_control_se[0];
    let value_ok = (j_mc - sol.value).abs() <= 3.0 * j_se + ens.tail_bound;
    let tracking_ok = max_ratio <= 1.0;
    let report = MarketReport {
        worlds: ens.worlds,
        particles: ens.particles_per_world,
        dt: ens.dt,
        t_sim: ens.t_end,
        xbar_infty: consts.xbar_infty,
        long_run_mean: last.mean[0],
        long_run_se: last.mean_se[0],
        long_run_ok,
        terminal_control: last.mean_control[0],
        terminal_control_se: last.mean_control_se[0],
        control_ok,
        tracking_horizon: horizon,
        tracking_max_err: max_err,
        tracking_max_ratio: max_ratio,
        tracking_ok,
        value: sol.value,
        gain_value: -sol.value,
        j_mc,
        j_se,
        tail_bound: ens.tail_bound,
        value_ok,
        pass: long_run_ok && control_ok && tracking_ok && value_ok,
    };
    Ok((report, path))
}

/// Default market simulation: 64 worlds of 2048 producers up to 40/ρ.
pub fn default_market_config(p: &ResourceParams, seed: u64) -> SimConfig {
    SimConfig {
        particles: 2048,
        worlds: 64,
        dt: 1e-2,
        t_sim: Some(40.0 / p.rho),
        seed,
        ..Default::default()
    }
}
