//! Backward Riccati equations for (K, Λ): finite horizon by fixed-step RK4,
//! infinite horizon by a horizon ladder polished with Newton's method.

use serde::Serialize;

use crate::error::{LqError, Result};
use crate::linalg::{kron, max_abs, op_norm, pd_inverse, symmetrize, Mat, Which};
use crate::model::{CanonicalProblem, Coeffs};

/// Node norm above which an integration is declared to have blown up.
pub const BLOWUP: f64 = 1e12;

/// S = N + Σ FᵢᵀKFᵢ and U = I + Σ FᵢᵀKDᵢ + CᵀK.
pub fn s_u(k: &Mat, c: &Coeffs) -> (Mat, Mat) {
    let mut s = c.n.clone();
    let mut u = &c.i + c.c.transpose() * k;
    for (f, d) in c.f.iter().zip(&c.d) {
        let fk = f.transpose() * k;
        s += &fk * f;
        u += &fk * d;
    }
    (symmetrize(&s), u)
}

/// Ŝ = N̂ + Σ F̂ᵢᵀKF̂ᵢ and V = Î + Σ F̂ᵢᵀKD̂ᵢ + ĈᵀΛ.
pub fn sh_v(k: &Mat, lam: &Mat, c: &Coeffs) -> (Mat, Mat) {
    let mut s = c.nh.clone();
    let mut v = &c.ih + c.ch.transpose() * lam;
    for (f, d) in c.fh.iter().zip(&c.dh) {
        let fk = f.transpose() * k;
        s += &fk * f;
        v += &fk * d;
    }
    (symmetrize(&s), v)
}

/// S, Ŝ, their inverses, U and V at one time.
#[derive(Debug, Clone)]
pub struct Gains {
    pub s: Mat,
    pub s_inv: Mat,
    pub u: Mat,
    pub sh: Mat,
    pub sh_inv: Mat,
    pub v: Mat,
}

pub fn gains(k: &Mat, lam: &Mat, c: &Coeffs) -> Result<Gains> {
    let (s, u) = s_u(k, c);
    let (sh, v) = sh_v(k, lam, c);
    Ok(Gains {
        s_inv: pd_inverse(&s, c.t, Which::S)?,
        sh_inv: pd_inverse(&sh, c.t, Which::Shat)?,
        s,
        u,
        sh,
        v,
    })
}

pub fn phi0_at(k: &Mat, c: &Coeffs) -> Result<Mat> {
    let (s, u) = s_u(k, c);
    let s_inv = pd_inverse(&s, c.t, Which::S)?;
    let mut out = k * &c.b + c.b.transpose() * k - k * c.rho + &c.q;
    for d in &c.d {
        out += d.transpose() * k * d;
    }
    out -= u.transpose() * s_inv * &u;
    Ok(symmetrize(&out))
}

pub fn psi0_at(k: &Mat, lam: &Mat, c: &Coeffs) -> Result<Mat> {
    let (s, v) = sh_v(k, lam, c);
    let s_inv = pd_inverse(&s, c.t, Which::Shat)?;
    let mut out = lam * &c.bh + c.bh.transpose() * lam - lam * c.rho + &c.qh;
    for d in &c.dh {
        out += d.transpose() * k * d;
    }
    out -= v.transpose() * s_inv * &v;
    Ok(symmetrize(&out))
}

pub fn phi0(k: &Mat, t: f64, prob: &CanonicalProblem) -> Result<Mat> {
    phi0_at(k, &prob.coeffs_at(t))
}

pub fn psi0(k: &Mat, lam: &Mat, t: f64, prob: &CanonicalProblem) -> Result<Mat> {
    psi0_at(k, lam, &prob.coeffs_at(t))
}

pub fn uniform_grid(t_end: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|j| if j == steps { t_end } else { t_end * j as f64 / steps as f64 })
        .collect()
}

/// Coefficients at the three RK4 evaluation times of every backward step.
pub(crate) struct StepCoeffs {
    /// `[t_{j+1}, midpoint, t_j]` for step j.
    pub steps: Vec<[Coeffs; 3]>,
}

impl StepCoeffs {
    pub fn new(prob: &CanonicalProblem, grid: &[f64]) -> Self {
        let steps = grid
            .windows(2)
            .map(|w| {
                [
                    prob.coeffs_at(w[1]),
                    prob.coeffs_at(0.5 * (w[0] + w[1])),
                    prob.coeffs_at(w[0]),
                ]
            })
            .collect();
        StepCoeffs { steps }
    }

    /// Coefficients for stage `s` (0..4) of step j.
    pub fn stage(&self, j: usize, s: usize) -> &Coeffs {
        &self.steps[j][[0, 1, 1, 2][s]]
    }
}

/// Stage states of one RK4 step: `[X2, X3, X4]`.
pub(crate) type Stages = [Mat; 3];

/// Classical RK4 for dX/dτ = f(X) with τ = T − t, from the last grid node back
/// to the first. `f(j, s, x)` evaluates stage `s` of step j (from node j+1 to
/// node j). Returns nodal states in ascending time order and per-step stages.
pub(crate) fn rk4_backward<F>(
    grid: &[f64],
    terminal: Mat,
    sym: bool,
    mut f: F,
) -> Result<(Vec<Mat>, Vec<Stages>)>
where
    F: FnMut(usize, usize, &Mat) -> Result<Mat>,
{
    let n = grid.len() - 1;
    let mut nodes = vec![Mat::zeros(0, 0); n + 1];
    let mut stages: Vec<Stages> = Vec::with_capacity(n);
    let fix = |m: Mat| if sym { symmetrize(&m) } else { m };
    nodes[n] = fix(terminal);
    for j in (0..n).rev() {
        let h = grid[j + 1] - grid[j];
        let x = &nodes[j + 1];
        let k1 = f(j, 0, x)?;
        let x2 = fix(x + &k1 * (0.5 * h));
        let k2 = f(j, 1, &x2)?;
        let x3 = fix(x + &k2 * (0.5 * h));
        let k3 = f(j, 2, &x3)?;
        let x4 = fix(x + &k3 * h);
        let k4 = f(j, 3, &x4)?;
        let next = fix(x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0));
        if !next.iter().all(|v| v.is_finite()) || max_abs(&next) > BLOWUP {
            return Err(LqError::BlowUp { t: grid[j] });
        }
        nodes[j] = next;
        stages.push([x2, x3, x4]);
    }
    stages.reverse();
    Ok((nodes, stages))
}

/// Finite-horizon solution on a uniform grid.
#[derive(Debug, Clone)]
pub struct RiccatiPath {
    pub grid: Vec<f64>,
    pub k: Vec<Mat>,
    pub lambda: Vec<Mat>,
    pub(crate) k_stages: Vec<Stages>,
    pub(crate) l_stages: Vec<Stages>,
}

impl RiccatiPath {
    /// K at stage `s` of step j (stage 0 is node j+1).
    pub(crate) fn k_stage(&self, j: usize, s: usize) -> &Mat {
        if s == 0 {
            &self.k[j + 1]
        } else {
            &self.k_stages[j][s - 1]
        }
    }

    pub(crate) fn l_stage(&self, j: usize, s: usize) -> &Mat {
        if s == 0 {
            &self.lambda[j + 1]
        } else {
            &self.l_stages[j][s - 1]
        }
    }
}

pub fn solve_finite(prob: &CanonicalProblem, grid_steps: usize) -> Result<RiccatiPath> {
    let t_end = prob
        .spec
        .horizon
        .terminal()
        .ok_or_else(|| LqError::Invalid("solve_finite needs a finite horizon".into()))?;
    if grid_steps < 2 {
        return Err(LqError::Invalid("grid_steps must be at least 2".into()));
    }
    let grid = uniform_grid(t_end, grid_steps);
    let sc = StepCoeffs::new(prob, &grid);
    let (k, k_stages) =
        rk4_backward(&grid, prob.spec.p.clone(), true, |j, s, x| phi0_at(x, sc.stage(j, s)))?;
    let kst = |j: usize, s: usize| if s == 0 { &k[j + 1] } else { &k_stages[j][s - 1] };
    let (lambda, l_stages) = rk4_backward(&grid, prob.ph.clone(), true, |j, s, x| {
        psi0_at(kst(j, s), x, sc.stage(j, s))
    })?;
    let path = RiccatiPath {
        grid,
        k,
        lambda,
        k_stages,
        l_stages,
    };
    // Positivity of S and Ŝ at every accepted node.
    let c0 = &sc.steps[0][2];
    pd_inverse(&s_u(&path.k[0], c0).0, 0.0, Which::S)?;
    pd_inverse(&sh_v(&path.k[0], &path.lambda[0], c0).0, 0.0, Which::Shat)?;
    Ok(path)
}

/// Settings for the infinite-horizon solve.
#[derive(Debug, Clone, Serialize)]
pub struct InfiniteOptions {
    /// Ladder horizons in units of 1/ρ.
    pub ladder: Vec<f64>,
    pub tol: f64,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for InfiniteOptions {
    fn default() -> Self {
        InfiniteOptions {
            ladder: vec![5.0, 10.0, 20.0, 40.0, 80.0],
            tol: 1e-9,
            newton_tol: 1e-12,
            max_newton: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderReport {
    pub horizons: Vec<f64>,
    /// Row-major K₀^T (or Λ₀^T) per rung.
    pub values: Vec<Vec<f64>>,
    /// Frobenius distance between consecutive rungs.
    pub increments: Vec<f64>,
    pub converged: bool,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct AlgebraicRiccatiPair {
    pub k: Mat,
    pub lambda: Mat,
    pub residual_norms: (f64, f64),
    pub k_ladder: LadderReport,
    pub lambda_ladder: LadderReport,
}

/// Frechet derivative of Φ⁰ at K in Kronecker form (column-major vec).
fn phi0_jacobian(k: &Mat, c: &Coeffs) -> Result<Mat> {
    let (s, u) = s_u(k, c);
    let gain = pd_inverse(&s, c.t, Which::S)? * u;
    let a = &c.b - &c.c * &gain;
    let d = k.nrows();
    let id = Mat::identity(d, d);
    let at = a.transpose();
    let mut j = kron(&id, &at) + kron(&at, &id) - Mat::identity(d * d, d * d) * c.rho;
    for (dd, f) in c.d.iter().zip(&c.f) {
        let m = (dd - f * &gain).transpose();
        j += kron(&m, &m);
    }
    Ok(j)
}

/// Frechet derivative of Ψ⁰ in Λ at fixed K.
fn psi0_jacobian(k: &Mat, lam: &Mat, c: &Coeffs) -> Result<Mat> {
    let (s, v) = sh_v(k, lam, c);
    let gain = pd_inverse(&s, c.t, Which::Shat)? * v;
    let a = &c.bh - &c.ch * &gain;
    let d = k.nrows();
    let id = Mat::identity(d, d);
    let at = a.transpose();
    Ok(kron(&id, &at) + kron(&at, &id) - Mat::identity(d * d, d * d) * c.rho)
}

fn vec_of(m: &Mat) -> Mat {
    Mat::from_column_slice(m.len(), 1, m.as_slice())
}

fn unvec(v: &Mat, d: usize) -> Mat {
    Mat::from_column_slice(d, d, v.as_slice())
}

/// Integrates the autonomous equation dX/dτ = f(X) from X(0) = 0 through the
/// ladder horizons, continuing each rung from the previous one.
fn ladder<F, J>(
    d: usize,
    horizons: &[f64],
    tol: f64,
    f: F,
    jac: J,
) -> Result<(Mat, LadderReport)>
where
    F: Fn(&Mat) -> Result<Mat>,
    J: Fn(&Mat) -> Result<Mat>,
{
    let mut x = Mat::zeros(d, d);
    let mut tau = 0.0;
    let mut values = Vec::new();
    let mut increments = Vec::new();
    let mut prev: Option<Mat> = None;
    let mut converged = false;
    for &t_target in horizons {
        let span = t_target - tau;
        let lip = op_norm(&jac(&x)?);
        let steps = (span * (1.0 + lip) * 20.0).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for _ in 0..steps {
            let k1 = f(&x)?;
            let k2 = f(&symmetrize(&(&x + &k1 * (0.5 * h))))?;
            let k3 = f(&symmetrize(&(&x + &k2 * (0.5 * h))))?;
            let k4 = f(&symmetrize(&(&x + &k3 * h)))?;
            x = symmetrize(&(&x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)));
            if !x.iter().all(|v| v.is_finite()) || max_abs(&x) > BLOWUP {
                return Err(LqError::BlowUp { t: -t_target });
            }
        }
        tau = t_target;
        values.push(crate::linalg::flatten_rows(&x));
        if let Some(p) = &prev {
            let inc = (&x - p).norm();
            increments.push(inc);
            if inc < tol {
                converged = true;
                break;
            }
        }
        prev = Some(x.clone());
    }
    let report = LadderReport {
        horizons: horizons[..values.len()].to_vec(),
        values,
        increments,
        converged,
        newton_iterations: 0,
    };
    Ok((x, report))
}

/// Damped Newton on F(X) = 0 with step halving on the residual norm.
fn newton<F, J>(x0: Mat, tol: f64, max_iter: usize, f: F, jac: J) -> Result<(Mat, f64, usize)>
where
    F: Fn(&Mat) -> Result<Mat>,
    J: Fn(&Mat) -> Result<Mat>,
{
    let d = x0.nrows();
    let mut x = x0;
    let mut r = f(&x)?;
    let mut rn = r.norm();
    let scale = |x: &Mat| tol * (1.0 + x.norm());
    for it in 0..max_iter {
        if rn <= scale(&x) {
            return Ok((x, rn, it));
        }
        let j = jac(&x)?;
        let step = j
            .lu()
            .solve(&(-vec_of(&r)))
            .ok_or_else(|| LqError::NewtonDiverged("singular linearisation".into()))?;
        let e = symmetrize(&unvec(&step, d));
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = symmetrize(&(&x + &e * alpha));
            if let Ok(rc) = f(&cand) {
                let rcn = rc.norm();
                if rcn < rn || rcn <= scale(&cand) {
                    x = cand;
                    r = rc;
                    rn = rcn;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            if rn <= 1e3 * scale(&x) {
                return Ok((x, rn, it));
            }
            return Err(LqError::NewtonDiverged(format!(
                "no descent step, residual {rn:e}"
            )));
        }
    }
    if rn <= 1e3 * scale(&x) {
        Ok((x, rn, max_iter))
    } else {
        Err(LqError::NewtonDiverged(format!(
            "iteration limit reached, residual {rn:e}"
        )))
    }
}

pub fn solve_infinite(prob: &CanonicalProblem, opts: &InfiniteOptions) -> Result<AlgebraicRiccatiPair> {
    if !prob.spec.horizon.is_infinite() {
        return Err(LqError::Invalid("solve_infinite needs an infinite horizon".into()));
    }
    let rho = prob.spec.rho();
    let c = prob.coeffs_at(0.0);
    let d = prob.d();
    let horizons: Vec<f64> = opts.ladder.iter().map(|m| m / rho).collect();

    let fk = |k: &Mat| phi0_at(k, &c);
    let jk = |k: &Mat| phi0_jacobian(k, &c);
    let (k_lad, mut k_report) = ladder(d, &horizons, opts.tol, fk, jk)?;
    let fail = |ok: bool, e: LqError, what: &str| {
        if ok {
            e
        } else {
            LqError::NoConvergence(format!("{what} ladder did not settle and Newton failed: {e}"))
        }
    };
    let (k, rk, itk) = newton(k_lad, opts.newton_tol, opts.max_newton, fk, jk)
        .map_err(|e| fail(k_report.converged, e, "K"))?;
    k_report.newton_iterations = itk;

    let fl = |l: &Mat| psi0_at(&k, l, &c);
    let jl = |l: &Mat| psi0_jacobian(&k, l, &c);
    let (l_lad, mut l_report) = ladder(d, &horizons, opts.tol, fl, jl)?;
    let (lambda, rl, itl) = newton(l_lad, opts.newton_tol, opts.max_newton, fl, jl)
        .map_err(|e| fail(l_report.converged, e, "Lambda"))?;
    l_report.newton_iterations = itl;

    pd_inverse(&s_u(&k, &c).0, 0.0, Which::S)?;
    pd_inverse(&sh_v(&k, &lambda, &c).0, 0.0, Which::Shat)?;
    Ok(AlgebraicRiccatiPair {
        k,
        lambda,
        residual_norms: (rk, rl),
        k_ladder: k_report,
        lambda_ladder: l_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{asymmetry, min_eig};
    use crate::model::{canonicalize, Horizon, ProblemSpec, TimeMat};
    use proptest::prelude::*;

    fn m1(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    fn scalar(h: Horizon) -> ProblemSpec {
        let mut s = ProblemSpec::zeros(1, 1, h);
        s.n = TimeMat::scalar(1.0);
        s
    }

    struct Res {
        rho: f64,
        sigma: f64,
        c: f64,
        x0: f64,
        delta: f64,
        eps: f64,
        eta: f64,
    }

    const RES: Res = Res {
        rho: 0.5,
        sigma: 0.3,
        c: 1.0,
        x0: 1.0,
        delta: 1.0,
        eps: 0.2,
        eta: 0.5,
    };

    fn resource_spec() -> ProblemSpec {
        let r = RES;
        let mut s = scalar(Horizon::infinite(r.rho));
        s.c = TimeMat::scalar(-1.0);
        s.drivers[0].d = TimeMat::scalar(r.sigma);
        s.n = TimeMat::scalar(r.delta + r.eta);
        s.nt = TimeMat::scalar(-r.eta);
        s.i = TimeMat::scalar(-r.c / (2.0 * r.x0));
        s.it = TimeMat::scalar(-r.eps / 2.0);
        s
    }

    // Independent closed forms for the resource Riccati pair.
    fn resource_oracle() -> (f64, f64) {
        let r = RES;
        let a = r.rho - r.sigma * r.sigma;
        let k_eta =
            0.5 * (-a + (a * a + 2.0 * r.c * a / (r.x0 * (r.delta + r.eta))).sqrt());
        let k = (r.delta + r.eta) * k_eta - r.c / (2.0 * r.x0);
        let disc = r.rho * r.rho
            + 2.0 * (r.rho * (r.c + r.eps * r.x0) + 2.0 * r.sigma * r.sigma * k * r.x0)
                / (r.delta * r.x0);
        let l_eps = 0.5 * (-r.rho + disc.sqrt());
        let lam = r.delta * l_eps - (r.c + r.eps * r.x0) / (2.0 * r.x0);
        (k, lam)
    }

    #[test]
    fn phi0_trivial_cases() {
        let p = canonicalize(&scalar(Horizon::finite(1.0, 0.0))).unwrap();
        assert_eq!(phi0(&m1(0.0), 0.0, &p).unwrap()[(0, 0)], 0.0);
        let mut s = scalar(Horizon::finite(1.0, 0.0));
        s.c = TimeMat::scalar(1.0);
        let p = canonicalize(&s).unwrap();
        assert_eq!(phi0(&m1(1.0), 0.0, &p).unwrap()[(0, 0)], -1.0);
        assert_eq!(psi0(&m1(0.0), &m1(0.0), 0.0, &p).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn phi0_singular_s() {
        let mut s = scalar(Horizon::finite(1.0, 0.0));
        s.n = TimeMat::scalar(0.0);
        s.nt = TimeMat::scalar(1.0);
        let p = canonicalize(&s).unwrap();
        assert_eq!(phi0(&m1(1.0), 0.25, &p), Err(LqError::SingularS { t: 0.25 }));
    }

    #[test]
    fn resource_maps_vanish_at_closed_form() {
        let p = canonicalize(&resource_spec()).unwrap();
        let (k, lam) = resource_oracle();
        assert!(phi0(&m1(k), 0.0, &p).unwrap()[(0, 0)].abs() < 1e-14);
        assert!(psi0(&m1(k), &m1(lam), 0.0, &p).unwrap()[(0, 0)].abs() < 1e-14);
        // Frozen reference values.
        assert!((k - -0.17342094341478198).abs() < 1e-12);
        assert!((lam - -0.2610245208052634).abs() < 1e-12);
    }

    #[test]
    fn psi0_equals_phi0_without_mean_field() {
        let mut s = scalar(Horizon::finite(1.0, 0.2));
        s.b = TimeMat::scalar(0.3);
        s.c = TimeMat::scalar(0.7);
        s.drivers[0].d = TimeMat::scalar(0.4);
        s.drivers[0].f = TimeMat::scalar(0.2);
        s.q = TimeMat::scalar(1.5);
        s.i = TimeMat::scalar(0.1);
        let p = canonicalize(&s).unwrap();
        let k = m1(0.8);
        let a = phi0(&k, 0.5, &p).unwrap();
        let b = psi0(&k, &k, 0.5, &p).unwrap();
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn zero_data_gives_zero_path() {
        let mut s = scalar(Horizon::finite(1.0, 0.3));
        s.b = TimeMat::scalar(0.5);
        s.drivers[0].d = TimeMat::scalar(0.2);
        let p = canonicalize(&s).unwrap();
        let path = solve_finite(&p, 50).unwrap();
        assert!(path.k.iter().all(|k| k[(0, 0)] == 0.0));
    }

    #[test]
    fn linear_case_is_exact() {
        let mut s = scalar(Horizon::finite(1.0, 0.0));
        s.q = TimeMat::scalar(1.0);
        s.p = m1(2.0);
        let p = canonicalize(&s).unwrap();
        let path = solve_finite(&p, 10).unwrap();
        for (t, k) in path.grid.iter().zip(&path.k) {
            assert!((k[(0, 0)] - (2.0 + 1.0 - t)).abs() < 1e-13);
        }
        assert_eq!(path.k[10][(0, 0)], 2.0);
    }

    fn generic_scalar() -> ProblemSpec {
        let mut s = scalar(Horizon::finite(1.0, 0.1));
        s.b = TimeMat::scalar(0.2);
        s.drivers[0].d = TimeMat::scalar(0.3);
        s.c = TimeMat::scalar(1.0);
        s.drivers[0].f = TimeMat::scalar(0.5);
        s.i = TimeMat::scalar(0.1);
        s.q = TimeMat::scalar(1.0);
        s.p = m1(1.0);
        s
    }

    // Explicit Euler on the scalar ODE written out by hand, with Richardson
    // extrapolation of two fine grids.
    fn euler_k0(steps: usize) -> f64 {
        let (rho, b, d, c, f, n, i, q) = (0.1, 0.2, 0.3, 1.0, 0.5, 1.0, 0.1, 1.0);
        let h = 1.0 / steps as f64;
        let mut k: f64 = 1.0;
        for _ in 0..steps {
            let s = n + f * f * k;
            let u = i + f * k * d + c * k;
            let rhs = -rho * k + 2.0 * b * k + d * d * k + q - u * u / s;
            k += h * rhs;
        }
        k
    }

    #[test]
    fn finite_matches_euler_oracle() {
        let oracle = 2.0 * euler_k0(1_000_000) - euler_k0(500_000);
        assert!((oracle - 1.0674055874336852).abs() < 1e-9);
        let p = canonicalize(&generic_scalar()).unwrap();
        let path = solve_finite(&p, 1000).unwrap();
        assert!((path.k[0][(0, 0)] - oracle).abs() < 1e-6);
    }

    #[test]
    fn resource_algebraic_pair() {
        let p = canonicalize(&resource_spec()).unwrap();
        let pair = solve_infinite(&p, &InfiniteOptions::default()).unwrap();
        let (k, lam) = resource_oracle();
        assert!((pair.k[(0, 0)] - k).abs() < 1e-10);
        assert!((pair.lambda[(0, 0)] - lam).abs() < 1e-10);
        assert!(pair.residual_norms.0 < 1e-11 && pair.residual_norms.1 < 1e-11);
    }

    #[test]
    fn classical_are_matches_quadratic_formula() {
        let (rho, b, c, n, q) = (0.3, 0.4, 0.8, 2.0, 1.5);
        let mut s = scalar(Horizon::infinite(rho));
        s.b = TimeMat::scalar(b);
        s.c = TimeMat::scalar(c);
        s.n = TimeMat::scalar(n);
        s.q = TimeMat::scalar(q);
        let p = canonicalize(&s).unwrap();
        let pair = solve_infinite(&p, &InfiniteOptions::default()).unwrap();
        // (C²/N)K² + (ρ − 2B)K − Q = 0, positive root.
        let a2 = c * c / n;
        let a1 = rho - 2.0 * b;
        let oracle = (-a1 + (a1 * a1 + 4.0 * a2 * q).sqrt()) / (2.0 * a2);
        assert!((pair.k[(0, 0)] - oracle).abs() < 1e-10);
        assert!((pair.lambda[(0, 0)] - oracle).abs() < 1e-10);
    }

    #[test]
    fn zero_cost_infinite_is_zero() {
        let mut s = scalar(Horizon::infinite(1.0));
        s.b = TimeMat::scalar(0.1);
        let p = canonicalize(&s).unwrap();
        let pair = solve_infinite(&p, &InfiniteOptions::default()).unwrap();
        assert_eq!(pair.k[(0, 0)], 0.0);
        assert_eq!(pair.residual_norms.0, 0.0);
    }

    fn two_dim(b01: f64, q11: f64, btilde: f64, f: f64) -> ProblemSpec {
        let mut s = ProblemSpec::zeros(2, 1, Horizon::finite(1.5, 0.2));
        s.b = TimeMat::Const(Mat::from_row_slice(2, 2, &[0.1, b01, -0.2, 0.3]));
        s.bt = TimeMat::Const(Mat::from_row_slice(2, 2, &[btilde, 0.0, 0.0, btilde]));
        s.c = TimeMat::Const(Mat::from_row_slice(2, 1, &[1.0, 0.5]));
        s.drivers[0].d = TimeMat::Const(Mat::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.3]));
        s.drivers[0].f = TimeMat::Const(Mat::from_row_slice(2, 1, &[f, 0.0]));
        s.q = TimeMat::Const(Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, q11]));
        s.qt = TimeMat::Const(Mat::identity(2, 2) * 0.5);
        s.n = TimeMat::Const(Mat::from_element(1, 1, 1.0));
        s.p = Mat::identity(2, 2);
        s
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn path_invariants(b01 in -0.5f64..0.5, q11 in 0.5f64..2.0, bt in -0.3f64..0.3, f in 0.0f64..0.5) {
            let p = canonicalize(&two_dim(b01, q11, bt, f)).unwrap();
            let path = solve_finite(&p, 200).unwrap();
            let h = path.grid[1] - path.grid[0];
            let kmax = path.k.iter().map(max_abs).fold(0.0, f64::max);
            for j in 1..path.grid.len() - 1 {
                let fd = (&path.k[j + 1] - &path.k[j - 1]) / (2.0 * h);
                let rhs = phi0(&path.k[j], path.grid[j], &p).unwrap();
                prop_assert!(max_abs(&(fd + rhs)) <= 10.0 * h * h * kmax.max(1.0));
            }
            for (k, l) in path.k.iter().zip(&path.lambda) {
                prop_assert!(asymmetry(k) <= 1e-12 && asymmetry(l) <= 1e-12);
                prop_assert!(min_eig(k) >= -1e-10 && min_eig(l) >= -1e-10);
            }
        }

        #[test]
        fn reduction_without_tildes(b01 in -0.5f64..0.5, q11 in 0.5f64..2.0, f in 0.0f64..0.5) {
            let mut s = two_dim(b01, q11, 0.0, f);
            s.qt = TimeMat::zeros(2, 2);
            let p = canonicalize(&s).unwrap();
            let path = solve_finite(&p, 100).unwrap();
            for (k, l) in path.k.iter().zip(&path.lambda) {
                prop_assert!((k - l).norm() <= 1e-8);
            }
        }

        #[test]
        fn ladder_is_monotone(b in -0.5f64..0.5, q in 0.1f64..3.0, d in 0.0f64..0.4) {
            let mut s = scalar(Horizon::infinite(1.0 + 2.0 * (b.abs() + d * d)));
            s.b = TimeMat::scalar(b);
            s.c = TimeMat::scalar(1.0);
            s.drivers[0].d = TimeMat::scalar(d);
            s.q = TimeMat::scalar(q);
            let p = canonicalize(&s).unwrap();
            let pair = solve_infinite(&p, &InfiniteOptions::default()).unwrap();
            let vals = &pair.k_ladder.values;
            for w in vals.windows(2) {
                prop_assert!(w[1][0] >= w[0][0] - 1e-12);
            }
            prop_assert!(pair.residual_norms.0 < 1e-10);
        }
    }
}
