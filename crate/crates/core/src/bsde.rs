//! Mean-field linear BSDE for Y in the explicitly solvable regimes, and the
//! scalar remainder R.
//!
//! Every supported input is affine in independent scalar factors z_k, so
//! Y = y⁰(t) + Σ_k y^k(t) z_k with Z^Y = 0 on the state drivers. The columns
//! of a d×(1+k) matrix hold (y⁰, y¹, …, y^k).

use serde::Serialize;

use crate::error::{LqError, Result};
use crate::linalg::{min_real_part, Mat, Vector};
use crate::model::{Affine, Binding, CanonicalProblem, Coeffs, Factors};
use crate::riccati::{gains, rk4_backward, AlgebraicRiccatiPair, RiccatiPath, StepCoeffs};

/// Coefficients of the BSDE at one time.
#[derive(Debug, Clone)]
pub struct BsdeCoeffs {
    pub t: f64,
    pub g: Mat,
    pub gh: Mat,
    pub j: Vec<Mat>,
    pub jh: Vec<Mat>,
    pub theta: Affine,
}

#[derive(Debug, Clone, Copy)]
pub enum RiccatiRef<'a> {
    Path(&'a RiccatiPath),
    Pair(&'a AlgebraicRiccatiPair),
}

/// Population mean with idiosyncratic factors frozen at `m`.
fn bar_m(fs: &Factors, a: &Affine, m: &Vector) -> Affine {
    let mut out = a.clone();
    for (k, f) in fs.0.iter().enumerate() {
        if f.is_idiosyncratic() {
            let col = out.load.column(k).clone_owned();
            out.c += col * m[k];
            out.load.column_mut(k).fill(0.0);
        }
    }
    out
}

fn center_m(fs: &Factors, a: &Affine, m: &Vector) -> Affine {
    a.sub(&bar_m(fs, a, m))
}

/// Assembles G, Ĝ, J, Ĵ, ϑ with factor means `m` (the inputs' deterministic
/// bases are read at `c.t`).
pub(crate) fn assemble_with_m(
    prob: &CanonicalProblem,
    c: &Coeffs,
    k: &Mat,
    lam: &Mat,
    m: &Vector,
) -> Result<BsdeCoeffs> {
    let s = &prob.spec;
    let fs = &s.factors;
    let t = c.t;
    let gn = gains(k, lam, c)?;
    let d = s.d;
    let id = Mat::identity(d, d) * c.rho;
    let gam_s = &gn.s_inv * &gn.u;
    let gam_h = &gn.sh_inv * &gn.v;
    let g = &id - &c.b + &c.c * &gam_s;
    let gh = &id - &c.bh + &c.ch * &gam_h;
    let j = c.d.iter().zip(&c.f).map(|(dd, f)| -dd + f * &gam_s).collect();
    let jh = c.dh.iter().zip(&c.fh).map(|(dd, f)| -dd + f * &gam_h).collect();

    let beta = s.beta.at(t);
    let h = s.h.at(t);
    let mut theta = s.mc.at(t).scale(-1.0);
    theta = theta.sub(&center_m(fs, &beta, m).premul(k));
    theta = theta.sub(&bar_m(fs, &beta, m).premul(lam));
    let mut xi_c = center_m(fs, &h, m);
    let mut o_c = bar_m(fs, &h, m);
    for (idx, blk) in s.drivers.iter().enumerate() {
        let gamma = blk.gamma.at(t);
        let gc = center_m(fs, &gamma, m);
        let gb = bar_m(fs, &gamma, m);
        theta = theta.sub(&gc.premul(&(c.d[idx].transpose() * k)));
        theta = theta.sub(&gb.premul(&(c.dh[idx].transpose() * k)));
        xi_c = xi_c.add(&gc.premul(&(c.f[idx].transpose() * k)));
        o_c = o_c.add(&gb.premul(&(c.fh[idx].transpose() * k)));
    }
    theta = theta.add(&xi_c.premul(&(gn.u.transpose() * &gn.s_inv)));
    theta = theta.add(&o_c.premul(&(gn.v.transpose() * &gn.sh_inv)));
    Ok(BsdeCoeffs {
        t,
        g,
        gh,
        j,
        jh,
        theta,
    })
}

pub fn assemble_at(
    prob: &CanonicalProblem,
    c: &Coeffs,
    k: &Mat,
    lam: &Mat,
) -> Result<BsdeCoeffs> {
    let m = prob.factors().means(c.t);
    assemble_with_m(prob, c, k, lam, &m)
}

/// BSDE coefficients on the Riccati grid (finite horizon) or at t = 0
/// (infinite horizon).
pub fn assemble_bsde(prob: &CanonicalProblem, r: RiccatiRef) -> Result<Vec<BsdeCoeffs>> {
    match r {
        RiccatiRef::Path(p) => p
            .grid
            .iter()
            .enumerate()
            .map(|(j, &t)| assemble_at(prob, &prob.coeffs_at(t), &p.k[j], &p.lambda[j]))
            .collect(),
        RiccatiRef::Pair(p) => Ok(vec![assemble_at(prob, &prob.coeffs_at(0.0), &p.k, &p.lambda)?]),
    }
}

/// Time derivative of the packed (y⁰, y^k) matrix.
fn y_rhs(fs: &Factors, bc: &BsdeCoeffs, m: &Vector, y: &Mat) -> Mat {
    let kf = fs.len();
    let mut out = Mat::zeros(y.nrows(), 1 + kf);
    let gt = bc.g.transpose();
    let ght = bc.gh.transpose();
    let diff = &ght - &gt;
    let mut c0 = &ght * y.column(0) + &bc.theta.c;
    for (k, f) in fs.0.iter().enumerate() {
        let yk = y.column(k + 1);
        if f.is_idiosyncratic() {
            c0 += &diff * yk * m[k];
        }
        c0 -= yk * (f.kappa * f.level);
        let a = if f.is_idiosyncratic() { &gt } else { &ght };
        let col = a * yk + yk * f.kappa + bc.theta.load.column(k);
        out.set_column(k + 1, &col);
    }
    out.set_column(0, &c0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum YRegime {
    /// β = γ = M = H = L = 0, so Y = 0.
    Zero,
    Deterministic,
    AffineInFactor,
}

pub fn classify(prob: &CanonicalProblem) -> Result<YRegime> {
    let s = &prob.spec;
    let inputs = s.affine_inputs();
    for (k, f) in s.factors.0.iter().enumerate() {
        if let Binding::StateDriver(i) = f.binding {
            if inputs.iter().any(|a| a.load.column(k).iter().any(|x| *x != 0.0)) {
                return Err(LqError::UnsupportedRegime(format!(
                    "factor '{}' is driven by state Brownian motion {i}; Z^Y would not vanish",
                    f.name
                )));
            }
        }
    }
    if inputs.iter().all(|a| a.is_zero()) {
        Ok(YRegime::Zero)
    } else if inputs.iter().all(|a| a.is_deterministic()) {
        Ok(YRegime::Deterministic)
    } else {
        Ok(YRegime::AffineInFactor)
    }
}

/// Closed-form infinite-horizon y⁰ beyond `t_star`:
/// y⁰(t) = c_inf + Σ_k e^{−κ_k t} v_k, with constant loadings.
#[derive(Debug, Clone)]
pub struct YTail {
    pub t_star: f64,
    pub loads: Mat,
    pub c_inf: Vector,
    pub modes: Vec<(f64, Vector)>,
}

impl YTail {
    pub fn at(&self, t: f64) -> Mat {
        let d = self.c_inf.len();
        let mut y0 = self.c_inf.clone();
        for (kappa, v) in &self.modes {
            y0 += v * (-kappa * t).exp();
        }
        let mut out = Mat::zeros(d, 1 + self.loads.ncols());
        out.set_column(0, &y0);
        out.view_mut((0, 1), (d, self.loads.ncols())).copy_from(&self.loads);
        out
    }
}

#[derive(Debug, Clone)]
pub struct YSolution {
    pub regime: YRegime,
    pub grid: Vec<f64>,
    /// Packed (y⁰, y^k) per grid node.
    pub nodes: Vec<Mat>,
    pub tail: Option<YTail>,
}

impl YSolution {
    /// Packed coefficients at t: the closed-form tail beyond its start,
    /// linear interpolation between nodes, flat outside the grid.
    pub fn at(&self, t: f64) -> Mat {
        if let Some(tail) = &self.tail {
            if t >= tail.t_star {
                return tail.at(t);
            }
        }
        interp(&self.grid, &self.nodes, t)
    }

    pub fn affine_at(&self, t: f64) -> Affine {
        let y = self.at(t);
        Affine {
            c: y.column(0).clone_owned(),
            load: y.columns(1, y.ncols() - 1).clone_owned(),
        }
    }

    pub fn node_affine(&self, j: usize) -> Affine {
        let y = &self.nodes[j];
        Affine {
            c: y.column(0).clone_owned(),
            load: y.columns(1, y.ncols() - 1).clone_owned(),
        }
    }
}

pub(crate) fn interp(grid: &[f64], vals: &[Mat], t: f64) -> Mat {
    let n = grid.len();
    if n == 1 || t <= grid[0] {
        return vals[0].clone();
    }
    if t >= grid[n - 1] {
        return vals[n - 1].clone();
    }
    let j = grid.partition_point(|&g| g <= t) - 1;
    let w = (t - grid[j]) / (grid[j + 1] - grid[j]);
    &vals[j] * (1.0 - w) + &vals[j + 1] * w
}

fn packed(a: &Affine) -> Mat {
    let d = a.c.len();
    let mut out = Mat::zeros(d, 1 + a.load.ncols());
    out.set_column(0, &a.c);
    out.view_mut((0, 1), (d, a.load.ncols())).copy_from(&a.load);
    out
}

/// Stage time of step j for RK4 stage s.
fn stage_time(grid: &[f64], j: usize, s: usize) -> f64 {
    match s {
        0 => grid[j + 1],
        3 => grid[j],
        _ => 0.5 * (grid[j] + grid[j + 1]),
    }
}

pub fn solve_y_finite(prob: &CanonicalProblem, path: &RiccatiPath) -> Result<YSolution> {
    let regime = classify(prob)?;
    let s = &prob.spec;
    let t_end = path.grid[path.grid.len() - 1];
    let kf = s.k();
    if regime == YRegime::Zero {
        return Ok(YSolution {
            regime,
            grid: path.grid.clone(),
            nodes: vec![Mat::zeros(s.d, 1 + kf); path.grid.len()],
            tail: None,
        });
    }
    let fs = &s.factors;
    let sc = StepCoeffs::new(prob, &path.grid);
    let terminal = packed(&s.l.at(t_end));
    let (nodes, _) = rk4_backward(&path.grid, terminal, false, |j, st, y| {
        let c = sc.stage(j, st);
        let m = fs.means(c.t);
        let bc = assemble_with_m(prob, c, path.k_stage(j, st), path.l_stage(j, st), &m)?;
        Ok(-y_rhs(fs, &bc, &m, y))
    })?;
    Ok(YSolution {
        regime,
        grid: path.grid.clone(),
        nodes,
        tail: None,
    })
}

/// Infinite horizon. Loadings solve the stationary equations, y⁰ is closed
/// form beyond the last breakpoint and integrated backward before it.
pub fn solve_y_infinite(
    prob: &CanonicalProblem,
    pair: &AlgebraicRiccatiPair,
    grid_steps: usize,
) -> Result<YSolution> {
    let regime = classify(prob)?;
    let s = &prob.spec;
    let d = s.d;
    let kf = s.k();
    let fs = &s.factors;
    let t_star = s.last_breakpoint();
    if regime == YRegime::Zero {
        let tail = YTail {
            t_star: 0.0,
            loads: Mat::zeros(d, kf),
            c_inf: Vector::zeros(d),
            modes: vec![],
        };
        return Ok(YSolution {
            regime,
            grid: vec![0.0],
            nodes: vec![tail.at(0.0)],
            tail: Some(tail),
        });
    }
    let rho = s.rho();
    let c_star = prob.coeffs_at(t_star);
    let m_inf = Vector::from_iterator(
        kf,
        fs.0.iter().map(|f| if f.kappa > 0.0 { f.level } else { f.initial }),
    );
    let bc = assemble_with_m(prob, &c_star, &pair.k, &pair.lambda, &m_inf)?;
    let (g, gh) = (&bc.g, &bc.gh);
    let id = Mat::identity(d, d);

    let constant_theta = kf == 0 && t_star == 0.0;
    if constant_theta {
        if gh.clone().try_inverse().is_none() {
            return Err(LqError::IntegrabilityViolation("G-hat is singular".into()));
        }
    } else {
        let a = min_real_part(&(gh - &id * rho));
        if a <= 0.0 {
            return Err(LqError::IntegrabilityViolation(format!(
                "min Re eig(G-hat - rho) = {a:e} <= 0"
            )));
        }
        if fs.0.iter().any(|f| f.is_idiosyncratic()) {
            let a = min_real_part(&(g - &id * rho));
            if a <= 0.0 {
                return Err(LqError::IntegrabilityViolation(format!(
                    "min Re eig(G - rho) = {a:e} <= 0"
                )));
            }
        }
    }

    let solve = |a: Mat, rhs: Vector| -> Result<Vector> {
        a.lu().solve(&rhs).ok_or_else(|| {
            LqError::IntegrabilityViolation("singular stationary system for Y".into())
        })
    };
    let mut loads = Mat::zeros(d, kf);
    for (k, f) in fs.0.iter().enumerate() {
        let base = if f.is_idiosyncratic() { g } else { gh };
        let a = base.transpose() + &id * f.kappa;
        let y = solve(a, -bc.theta.load.column(k).clone_owned())?;
        loads.set_column(k, &y);
    }
    // Constant-term forcing as an affine function of the factor means.
    let forcing = |m: &Vector| -> Result<Vector> {
        let b = assemble_with_m(prob, &c_star, &pair.k, &pair.lambda, m)?;
        let mut y = Mat::zeros(d, 1 + kf);
        y.view_mut((0, 1), (d, kf)).copy_from(&loads);
        Ok(y_rhs(fs, &b, m, &y).column(0).clone_owned())
    };
    let f_inf = forcing(&m_inf)?;
    let ght = gh.transpose();
    let c_inf = -solve(ght.clone(), f_inf.clone())?;
    let mut modes = Vec::new();
    for (k, f) in fs.0.iter().enumerate() {
        if f.kappa > 0.0 && f.initial != f.level {
            let mut m1 = m_inf.clone();
            m1[k] += 1.0;
            let amp = (forcing(&m1)? - &f_inf) * (f.initial - f.level);
            if amp.iter().any(|x| *x != 0.0) {
                let v = -solve(&ght + &id * f.kappa, amp)?;
                modes.push((f.kappa, v));
            }
        }
    }
    let tail = YTail {
        t_star,
        loads,
        c_inf,
        modes,
    };
    if t_star <= 0.0 {
        return Ok(YSolution {
            regime,
            grid: vec![0.0],
            nodes: vec![tail.at(0.0)],
            tail: Some(tail),
        });
    }
    let grid = crate::riccati::uniform_grid(t_star, grid_steps.max(2));
    let (nodes, _) = rk4_backward(&grid, tail.at(t_star), false, |j, st, y| {
        let t = stage_time(&grid, j, st);
        let c = prob.coeffs_at(t);
        let m = fs.means(t);
        let b = assemble_with_m(prob, &c, &pair.k, &pair.lambda, &m)?;
        Ok(-y_rhs(fs, &b, &m, y))
    })?;
    Ok(YSolution {
        regime,
        grid,
        nodes,
        tail: Some(tail),
    })
}

/// Remainder integrand
/// h = E[Σγᵢᵀ K γᵢ] + 2E[βᵀY] − E[(ξ−ξ̄)ᵀS⁻¹(ξ−ξ̄)] − E[OᵀŜ⁻¹O].
pub fn h_at(prob: &CanonicalProblem, c: &Coeffs, k: &Mat, lam: &Mat, y: &Affine) -> Result<f64> {
    let s = &prob.spec;
    let fs = &s.factors;
    let t = c.t;
    let gn = gains(k, lam, c)?;
    let id = Mat::identity(s.d, s.d);
    let beta = s.beta.at(t);
    let h = s.h.at(t);
    let mut total = 2.0 * fs.expect_bilinear(&beta, &id, y, t);
    let mut xi = h.add(&y.premul(&c.c.transpose()));
    let mut o = fs.bar(&h, t).add(&fs.bar(y, t).premul(&c.ch.transpose()));
    for (idx, blk) in s.drivers.iter().enumerate() {
        let gamma = blk.gamma.at(t);
        total += fs.expect_bilinear(&gamma, k, &gamma, t);
        xi = xi.add(&gamma.premul(&(c.f[idx].transpose() * k)));
        o = o.add(&fs.bar(&gamma, t).premul(&(c.fh[idx].transpose() * k)));
    }
    let xc = fs.center(&xi, t);
    total -= fs.expect_bilinear(&xc, &gn.s_inv, &xc, t);
    total -= fs.expect_bilinear(&o, &gn.sh_inv, &o, t);
    Ok(total)
}

/// R at every node of a uniform grid, R_t = ∫_t^{t_n} e^{−ρ(s−t)} h_s ds + e^{−ρ(t_n−t)} r_end.
/// Simpson over pairs of intervals; the last interval alone uses the
/// quadratic through its two nodes and the one before.
pub(crate) fn backward_discounted(grid: &[f64], h: &[f64], rho: f64, r_end: f64) -> Vec<f64> {
    let n = grid.len() - 1;
    let mut r = vec![0.0; n + 1];
    r[n] = r_end;
    if n == 0 {
        return r;
    }
    let step = grid[1] - grid[0];
    if n == 1 {
        r[0] = 0.5 * step * (h[0] + (-rho * step).exp() * h[1]) + (-rho * step).exp() * r_end;
        return r;
    }
    let w = |j: usize, i: usize| (-rho * (grid[i] - grid[j])).exp() * h[i];
    for j in (0..n).rev() {
        r[j] = if n - j >= 2 {
            step / 3.0 * (w(j, j) + 4.0 * w(j, j + 1) + w(j, j + 2))
                + (-rho * (grid[j + 2] - grid[j])).exp() * r[j + 2]
        } else {
            step / 12.0 * (-w(j, j - 1) + 8.0 * w(j, j) + 5.0 * w(j, j + 1))
                + (-rho * (grid[j + 1] - grid[j])).exp() * r[j + 1]
        };
    }
    r
}

#[derive(Debug, Clone, Serialize)]
pub struct RPath {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub h: Vec<f64>,
    /// Bound on the neglected infinite-horizon tail at the last reported time.
    pub tail_bound: f64,
}

impl RPath {
    pub fn at(&self, t: f64) -> f64 {
        let n = self.grid.len();
        if n == 1 || t <= self.grid[0] {
            return self.values[0];
        }
        if t >= self.grid[n - 1] {
            return self.values[n - 1];
        }
        let j = self.grid.partition_point(|&g| g <= t) - 1;
        let w = (t - self.grid[j]) / (self.grid[j + 1] - self.grid[j]);
        self.values[j] * (1.0 - w) + self.values[j + 1] * w
    }
}

pub fn solve_r_finite(prob: &CanonicalProblem, path: &RiccatiPath, y: &YSolution) -> Result<RPath> {
    let h = path
        .grid
        .iter()
        .enumerate()
        .map(|(j, &t)| h_at(prob, &prob.coeffs_at(t), &path.k[j], &path.lambda[j], &y.node_affine(j)))
        .collect::<Result<Vec<_>>>()?;
    let values = backward_discounted(&path.grid, &h, prob.spec.rho(), 0.0);
    Ok(RPath {
        grid: path.grid.clone(),
        values,
        h,
        tail_bound: 0.0,
    })
}

/// Infinite horizon: R on [0, t_need] (extended to cover the Y grid), with
/// the integral truncated where the exponential envelope of the tail is
/// below 1e−12 relative to R.
pub fn solve_r_infinite(
    prob: &CanonicalProblem,
    pair: &AlgebraicRiccatiPair,
    y: &YSolution,
    t_need: f64,
) -> Result<RPath> {
    let s = &prob.spec;
    let rho = s.rho();
    let kmax = s.factors.0.iter().map(|f| f.kappa).fold(0.0, f64::max);
    let hstep = 0.02 / rho.max(kmax).max(1.0);
    let t_star = y.grid[y.grid.len() - 1];
    let t_keep = t_need.max(t_star);
    let h_of = |t: f64| h_at(prob, &prob.coeffs_at(t), &pair.k, &pair.lambda, &y.affine_at(t));

    let head_h = y
        .grid
        .iter()
        .map(|&t| h_of(t))
        .collect::<Result<Vec<_>>>()?;
    let mut span = 40.0 / rho;
    for _ in 0..8 {
        let t_end = t_keep + span;
        let n = ((t_end - t_star) / hstep).ceil().max(2.0) as usize;
        let grid2 = crate::riccati::uniform_grid(t_end - t_star, n)
            .into_iter()
            .map(|t| t + t_star)
            .collect::<Vec<_>>();
        let h2 = grid2.iter().map(|&t| h_of(t)).collect::<Result<Vec<_>>>()?;
        let r2 = backward_discounted(&grid2, &h2, rho, 0.0);
        let dh = (h2[n] - h2[n - 1]) / (grid2[n] - grid2[n - 1]);
        let bound = (-rho * span).exp() * (h2[n].abs() / rho + dh.abs() / (rho * rho));
        let r1 = if y.grid.len() > 1 {
            backward_discounted(&y.grid, &head_h, rho, r2[0])
        } else {
            vec![r2[0]]
        };
        let scale = r1[0].abs().max(1.0);
        if bound < 1e-12 * scale {
            let mut grid: Vec<f64> = y.grid.clone();
            let mut values = r1;
            let mut h = head_h.clone();
            for i in 1..grid2.len() {
                if grid2[i] > t_keep + hstep {
                    break;
                }
                grid.push(grid2[i]);
                values.push(r2[i]);
                h.push(h2[i]);
            }
            return Ok(RPath {
                grid,
                values,
                h,
                tail_bound: bound,
            });
        }
        span *= 2.0;
    }
    Err(LqError::IntegrabilityViolation(
        "remainder integral does not converge".into(),
    ))
}
