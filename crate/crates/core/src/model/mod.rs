//! Problem data for linear-quadratic mean-field control.
//!
//! Coefficients are deterministic matrices that are either constant or
//! piecewise linear in time. The affine terms β, γ_i, M, H, L are affine maps
//! of a finite set of scalar exogenous factors (OU or Brownian), which is the
//! closed-form tractable family used throughout the solver.

mod assumptions;
mod json;

pub use assumptions::{
    h5_prime, validate_assumptions, validate_assumptions_with, AssumptionReport, Check, CheckStatus,
    DEFAULT_TOL,
};
pub use json::{parse_problem, problem_from_file};

use serde::{Deserialize, Serialize};

use crate::error::{LqError, Result};
use crate::linalg::{asymmetry, Mat, Vector};

const SYM_TOL: f64 = 1e-12;

/// A matrix-valued function of time: constant, or piecewise linear on a grid
/// with constant extrapolation outside it.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeMat {
    Const(Mat),
    Pwl { grid: Vec<f64>, values: Vec<Mat> },
}

impl TimeMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TimeMat::Const(Mat::zeros(rows, cols))
    }

    pub fn scalar(x: f64) -> Self {
        TimeMat::Const(Mat::from_element(1, 1, x))
    }

    pub fn pwl(grid: Vec<f64>, values: Vec<Mat>) -> Result<Self> {
        if grid.is_empty() || grid.len() != values.len() {
            return Err(LqError::Invalid(
                "piecewise-linear coefficient needs matching non-empty grid and values".into(),
            ));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LqError::Invalid("coefficient grid must be strictly increasing".into()));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(LqError::DimensionMismatch(
                "piecewise-linear coefficient values differ in shape".into(),
            ));
        }
        if grid.len() == 1 {
            return Ok(TimeMat::Const(values[0].clone()));
        }
        Ok(TimeMat::Pwl { grid, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TimeMat::Const(m) => m.shape(),
            TimeMat::Pwl { values, .. } => values[0].shape(),
        }
    }

    pub fn at(&self, t: f64) -> Mat {
        match self {
            TimeMat::Const(m) => m.clone(),
            TimeMat::Pwl { grid, values } => {
                let n = grid.len();
                if t <= grid[0] {
                    return values[0].clone();
                }
                if t >= grid[n - 1] {
                    return values[n - 1].clone();
                }
                let j = grid.partition_point(|&g| g <= t) - 1;
                let w = (t - grid[j]) / (grid[j + 1] - grid[j]);
                &values[j] * (1.0 - w) + &values[j + 1] * w
            }
        }
    }

    pub fn is_const(&self) -> bool {
        matches!(self, TimeMat::Const(_))
    }

    pub fn breakpoints(&self) -> &[f64] {
        match self {
            TimeMat::Const(_) => &[],
            TimeMat::Pwl { grid, .. } => grid,
        }
    }

    /// Time after which the function is constant.
    pub fn last_breakpoint(&self) -> f64 {
        self.breakpoints().last().copied().unwrap_or(0.0).max(0.0)
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TimeMat::Const(m) => m.iter().all(|x| *x == 0.0),
            TimeMat::Pwl { values, .. } => values.iter().all(|m| m.iter().all(|x| *x == 0.0)),
        }
    }

    pub fn values(&self) -> Vec<&Mat> {
        match self {
            TimeMat::Const(m) => vec![m],
            TimeMat::Pwl { values, .. } => values.iter().collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&Mat) -> Mat) -> TimeMat {
        match self {
            TimeMat::Const(m) => TimeMat::Const(f(m)),
            TimeMat::Pwl { grid, values } => TimeMat::Pwl {
                grid: grid.clone(),
                values: values.iter().map(f).collect(),
            },
        }
    }

    pub fn scale(&self, a: f64) -> TimeMat {
        self.map(|m| m * a)
    }

    /// Exact sum: piecewise-linear functions add on the union of their grids.
    pub fn add(&self, other: &TimeMat) -> TimeMat {
        match (self, other) {
            (TimeMat::Const(a), TimeMat::Const(b)) => TimeMat::Const(a + b),
            _ => {
                let mut grid: Vec<f64> = self
                    .breakpoints()
                    .iter()
                    .chain(other.breakpoints())
                    .copied()
                    .collect();
                grid.sort_by(|a, b| a.total_cmp(b));
                grid.dedup();
                let values = grid.iter().map(|&t| self.at(t) + other.at(t)).collect();
                TimeMat::Pwl { grid, values }
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.values().iter().all(|m| asymmetry(m) <= SYM_TOL * (1.0 + crate::linalg::max_abs(m)))
    }
}

/// Driver a factor is adapted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    /// Independent per-particle Brownian motion, not used by the state.
    Idiosyncratic,
    /// Shared Brownian motion (common noise), one path per world.
    Common,
    /// The i-th state driver.
    StateDriver(usize),
}

/// Scalar factor dZ = κ(z̄ − Z)dt + σ₀ dB, Z₀ = z₀. κ = 0 gives a scaled
/// Brownian motion (the affine-in-driver family).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub kappa: f64,
    pub level: f64,
    pub vol: f64,
    pub initial: f64,
    pub binding: Binding,
}

impl Factor {
    pub fn mean(&self, t: f64) -> f64 {
        if self.kappa == 0.0 {
            self.initial
        } else {
            self.level + (self.initial - self.level) * (-self.kappa * t).exp()
        }
    }

    pub fn var(&self, t: f64) -> f64 {
        if self.kappa == 0.0 {
            self.vol * self.vol * t
        } else {
            self.vol * self.vol * (1.0 - (-2.0 * self.kappa * t).exp()) / (2.0 * self.kappa)
        }
    }

    /// Exact transition over `dt`: Z' = a·Z + b + s·ξ.
    pub fn transition(&self, dt: f64) -> (f64, f64, f64) {
        if self.kappa == 0.0 {
            (1.0, 0.0, self.vol * dt.sqrt())
        } else {
            let a = (-self.kappa * dt).exp();
            let s = self.vol * ((1.0 - a * a) / (2.0 * self.kappa)).sqrt();
            (a, self.level * (1.0 - a), s)
        }
    }

    pub fn is_idiosyncratic(&self) -> bool {
        !matches!(self.binding, Binding::Common)
    }
}

/// The ordered factor set of a problem.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Factors(pub Vec<Factor>);

impl Factors {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn means(&self, t: f64) -> Vector {
        Vector::from_iterator(self.len(), self.0.iter().map(|f| f.mean(t)))
    }

    pub fn vars(&self, t: f64) -> Vector {
        Vector::from_iterator(self.len(), self.0.iter().map(|f| f.var(t)))
    }

    pub fn initial(&self) -> Vector {
        Vector::from_iterator(self.len(), self.0.iter().map(|f| f.initial))
    }

    /// Conditional mean over the population: idiosyncratic loadings are
    /// replaced by the factor mean, common loadings stay random.
    pub fn bar(&self, a: &Affine, t: f64) -> Affine {
        let mut out = a.clone();
        for (k, f) in self.0.iter().enumerate() {
            if f.is_idiosyncratic() {
                let m = f.mean(t);
                let col = out.load.column(k).clone_owned();
                out.c += col * m;
                out.load.column_mut(k).fill(0.0);
            }
        }
        out
    }

    pub fn center(&self, a: &Affine, t: f64) -> Affine {
        a.sub(&self.bar(a, t))
    }

    /// E[aᵀ W b] for factor-affine a, b with independent factors.
    pub fn expect_bilinear(&self, a: &Affine, w: &Mat, b: &Affine, t: f64) -> f64 {
        let m = self.means(t);
        let v = self.vars(t);
        let ma = &a.c + &a.load * &m;
        let mb = &b.c + &b.load * &m;
        let mut e = (ma.transpose() * w * mb)[(0, 0)];
        for k in 0..self.len() {
            if v[k] != 0.0 {
                let ca = a.load.column(k);
                let cb = b.load.column(k);
                e += v[k] * (ca.transpose() * w * cb)[(0, 0)];
            }
        }
        e
    }

    pub fn mean_of(&self, a: &Affine, t: f64) -> Vector {
        &a.c + &a.load * self.means(t)
    }

    /// Vector used in place of z for the population mean: factor means for
    /// idiosyncratic entries, the realised value for common ones.
    pub fn bar_values(&self, t: f64, z: &[f64], out: &mut [f64]) {
        for (k, f) in self.0.iter().enumerate() {
            out[k] = if f.is_idiosyncratic() { f.mean(t) } else { z[k] };
        }
    }
}

/// Value c + L·z of a vector affine in the factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub c: Vector,
    pub load: Mat,
}

impl Affine {
    pub fn zeros(rows: usize, k: usize) -> Self {
        Affine {
            c: Vector::zeros(rows),
            load: Mat::zeros(rows, k),
        }
    }

    pub fn constant(c: Vector, k: usize) -> Self {
        let rows = c.len();
        Affine {
            c,
            load: Mat::zeros(rows, k),
        }
    }

    pub fn eval(&self, z: &Vector) -> Vector {
        &self.c + &self.load * z
    }

    pub fn add(&self, o: &Affine) -> Affine {
        Affine {
            c: &self.c + &o.c,
            load: &self.load + &o.load,
        }
    }

    pub fn sub(&self, o: &Affine) -> Affine {
        Affine {
            c: &self.c - &o.c,
            load: &self.load - &o.load,
        }
    }

    pub fn scale(&self, a: f64) -> Affine {
        Affine {
            c: &self.c * a,
            load: &self.load * a,
        }
    }

    /// Left multiplication by a matrix.
    pub fn premul(&self, m: &Mat) -> Affine {
        Affine {
            c: m * &self.c,
            load: m * &self.load,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|x| *x == 0.0) && self.load.iter().all(|x| *x == 0.0)
    }
}

/// Time-dependent factor-affine vector process: base(t) + L·Z_t.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineProc {
    pub base: TimeMat,
    pub load: Mat,
}

impl AffineProc {
    pub fn zeros(rows: usize, k: usize) -> Self {
        AffineProc {
            base: TimeMat::zeros(rows, 1),
            load: Mat::zeros(rows, k),
        }
    }

    pub fn constant(c: Vector, k: usize) -> Self {
        let rows = c.len();
        AffineProc {
            base: TimeMat::Const(Mat::from_column_slice(rows, 1, c.as_slice())),
            load: Mat::zeros(rows, k),
        }
    }

    pub fn rows(&self) -> usize {
        self.base.shape().0
    }

    pub fn at(&self, t: f64) -> Affine {
        let b = self.base.at(t);
        Affine {
            c: Vector::from_column_slice(b.as_slice()),
            load: self.load.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.base.is_zero() && self.load.iter().all(|x| *x == 0.0)
    }

    pub fn is_deterministic(&self) -> bool {
        self.load.iter().all(|x| *x == 0.0)
    }

    pub fn scale(&self, a: f64) -> AffineProc {
        AffineProc {
            base: self.base.scale(a),
            load: &self.load * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonKind {
    Finite(f64),
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub kind: HorizonKind,
    pub rho: f64,
}

impl Horizon {
    pub fn finite(t: f64, rho: f64) -> Self {
        Horizon {
            kind: HorizonKind::Finite(t),
            rho,
        }
    }

    pub fn infinite(rho: f64) -> Self {
        Horizon {
            kind: HorizonKind::Infinite,
            rho,
        }
    }

    pub fn terminal(&self) -> Option<f64> {
        match self.kind {
            HorizonKind::Finite(t) => Some(t),
            HorizonKind::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self.kind, HorizonKind::Infinite)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(LqError::Invalid("discount rate must be finite and non-negative".into()));
        }
        match self.kind {
            HorizonKind::Finite(t) if !(t > 0.0 && t.is_finite()) => {
                Err(LqError::Invalid("finite horizon needs T > 0".into()))
            }
            HorizonKind::Infinite if self.rho <= 0.0 => {
                Err(LqError::Invalid("infinite horizon needs rho > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vector),
    Gaussian { mean: Vector, cov: Mat },
}

impl InitialLaw {
    pub fn mean(&self) -> &Vector {
        match self {
            InitialLaw::Point(m) => m,
            InitialLaw::Gaussian { mean, .. } => mean,
        }
    }

    pub fn cov(&self) -> Mat {
        match self {
            InitialLaw::Point(m) => Mat::zeros(m.len(), m.len()),
            InitialLaw::Gaussian { cov, .. } => cov.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Minimize,
    Maximize,
}

/// Diffusion block of one Brownian driver.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverBlock {
    pub gamma: AffineProc,
    pub d: TimeMat,
    pub dt: TimeMat,
    pub f: TimeMat,
    pub ft: TimeMat,
}

impl DriverBlock {
    pub fn zeros(d: usize, m: usize, k: usize) -> Self {
        DriverBlock {
            gamma: AffineProc::zeros(d, k),
            d: TimeMat::zeros(d, d),
            dt: TimeMat::zeros(d, d),
            f: TimeMat::zeros(d, m),
            ft: TimeMat::zeros(d, m),
        }
    }
}

/// Full coefficient set, always in minimisation form (a maximisation input
/// has its costs negated on ingestion and `objective` records that).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub d: usize,
    pub m: usize,
    pub horizon: Horizon,
    pub b: TimeMat,
    pub bt: TimeMat,
    pub c: TimeMat,
    pub ct: TimeMat,
    pub beta: AffineProc,
    pub drivers: Vec<DriverBlock>,
    pub q: TimeMat,
    pub qt: TimeMat,
    pub n: TimeMat,
    pub nt: TimeMat,
    pub i: TimeMat,
    pub it: TimeMat,
    pub mc: AffineProc,
    pub h: AffineProc,
    pub p: Mat,
    pub pt: Mat,
    pub l: AffineProc,
    pub factors: Factors,
    pub x0: InitialLaw,
    pub common_noise: bool,
    pub objective: Objective,
}

impl ProblemSpec {
    /// All-zero problem of the given shape with one driver.
    pub fn zeros(d: usize, m: usize, horizon: Horizon) -> Self {
        ProblemSpec {
            d,
            m,
            horizon,
            b: TimeMat::zeros(d, d),
            bt: TimeMat::zeros(d, d),
            c: TimeMat::zeros(d, m),
            ct: TimeMat::zeros(d, m),
            beta: AffineProc::zeros(d, 0),
            drivers: vec![DriverBlock::zeros(d, m, 0)],
            q: TimeMat::zeros(d, d),
            qt: TimeMat::zeros(d, d),
            n: TimeMat::zeros(m, m),
            nt: TimeMat::zeros(m, m),
            i: TimeMat::zeros(m, d),
            it: TimeMat::zeros(m, d),
            mc: AffineProc::zeros(d, 0),
            h: AffineProc::zeros(m, 0),
            p: Mat::zeros(d, d),
            pt: Mat::zeros(d, d),
            l: AffineProc::zeros(d, 0),
            factors: Factors::default(),
            x0: InitialLaw::Point(Vector::zeros(d)),
            common_noise: false,
            objective: Objective::Minimize,
        }
    }

    pub fn n_drivers(&self) -> usize {
        self.drivers.len()
    }

    pub fn k(&self) -> usize {
        self.factors.len()
    }

    pub fn rho(&self) -> f64 {
        self.horizon.rho
    }

    pub fn affine_inputs(&self) -> Vec<&AffineProc> {
        let mut v = vec![&self.beta, &self.mc, &self.h, &self.l];
        v.extend(self.drivers.iter().map(|b| &b.gamma));
        v
    }

    /// Time after which every coefficient is constant.
    pub fn last_breakpoint(&self) -> f64 {
        let mut tmax: f64 = 0.0;
        for tm in self.time_mats() {
            tmax = tmax.max(tm.last_breakpoint());
        }
        for a in self.affine_inputs() {
            tmax = tmax.max(a.base.last_breakpoint());
        }
        tmax
    }

    fn time_mats(&self) -> Vec<&TimeMat> {
        let mut v = vec![
            &self.b, &self.bt, &self.c, &self.ct, &self.q, &self.qt, &self.n, &self.nt, &self.i,
            &self.it,
        ];
        for blk in &self.drivers {
            v.extend([&blk.d, &blk.dt, &blk.f, &blk.ft]);
        }
        v
    }

    /// Dimension, symmetry and structural checks.
    pub fn check(&self) -> Result<()> {
        self.horizon.check()?;
        let (d, m, k) = (self.d, self.m, self.k());
        if d == 0 || m == 0 {
            return Err(LqError::DimensionMismatch("d and m must be positive".into()));
        }
        if self.drivers.is_empty() {
            return Err(LqError::DimensionMismatch("at least one Brownian driver required".into()));
        }
        let shape = |name: &str, tm: &TimeMat, r: usize, c: usize| -> Result<()> {
            if tm.shape() != (r, c) {
                let (a, b) = tm.shape();
                return Err(LqError::DimensionMismatch(format!(
                    "{name} is {a}x{b}, expected {r}x{c}"
                )));
            }
            Ok(())
        };
        let proc = |name: &str, a: &AffineProc, r: usize| -> Result<()> {
            if a.base.shape() != (r, 1) || a.load.shape() != (r, k) {
                return Err(LqError::DimensionMismatch(format!(
                    "{name} must be a {r}-vector with {k} factor loadings"
                )));
            }
            Ok(())
        };
        shape("B", &self.b, d, d)?;
        shape("Btilde", &self.bt, d, d)?;
        shape("C", &self.c, d, m)?;
        shape("Ctilde", &self.ct, d, m)?;
        proc("beta", &self.beta, d)?;
        for (idx, blk) in self.drivers.iter().enumerate() {
            proc(&format!("gamma[{idx}]"), &blk.gamma, d)?;
            shape(&format!("D[{idx}]"), &blk.d, d, d)?;
            shape(&format!("Dtilde[{idx}]"), &blk.dt, d, d)?;
            shape(&format!("F[{idx}]"), &blk.f, d, m)?;
            shape(&format!("Ftilde[{idx}]"), &blk.ft, d, m)?;
        }
        shape("Q", &self.q, d, d)?;
        shape("Qtilde", &self.qt, d, d)?;
        shape("N", &self.n, m, m)?;
        shape("Ntilde", &self.nt, m, m)?;
        shape("I", &self.i, m, d)?;
        shape("Itilde", &self.it, m, d)?;
        proc("M", &self.mc, d)?;
        proc("H", &self.h, m)?;
        proc("L", &self.l, d)?;
        if self.p.shape() != (d, d) || self.pt.shape() != (d, d) {
            return Err(LqError::DimensionMismatch(format!("P and Ptilde must be {d}x{d}")));
        }
        if !self.l.base.is_const() {
            return Err(LqError::Invalid("terminal datum L must have a constant base".into()));
        }
        for (name, tm) in [("Q", &self.q), ("Qtilde", &self.qt), ("N", &self.n), ("Ntilde", &self.nt)] {
            if !tm.is_symmetric() {
                return Err(LqError::NonSymmetricCostMatrix(name.into()));
            }
        }
        for (name, p) in [("P", &self.p), ("Ptilde", &self.pt)] {
            if asymmetry(p) > SYM_TOL * (1.0 + crate::linalg::max_abs(p)) {
                return Err(LqError::NonSymmetricCostMatrix(name.into()));
            }
        }
        for tm in self.time_mats() {
            if tm.values().iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(LqError::Invalid("non-finite coefficient".into()));
            }
        }
        if self.horizon.is_infinite() {
            if !self.time_mats().iter().all(|tm| tm.is_const()) {
                return Err(LqError::Invalid(
                    "infinite horizon requires constant matrix coefficients".into(),
                ));
            }
            if !(self.p.iter().all(|x| *x == 0.0) && self.pt.iter().all(|x| *x == 0.0))
                || !self.l.is_zero()
            {
                return Err(LqError::Invalid("infinite horizon takes no terminal cost".into()));
            }
        }
        for f in &self.factors.0 {
            if !(f.kappa >= 0.0 && f.vol >= 0.0 && f.kappa.is_finite() && f.vol.is_finite()) {
                return Err(LqError::Invalid(format!(
                    "factor '{}' needs kappa >= 0 and vol >= 0",
                    f.name
                )));
            }
            match f.binding {
                Binding::StateDriver(i) if i >= self.n_drivers() => {
                    return Err(LqError::Invalid(format!(
                        "factor '{}' bound to driver {i}, but the problem has {} drivers",
                        f.name,
                        self.n_drivers()
                    )))
                }
                Binding::Common if !self.common_noise => {
                    return Err(LqError::Invalid(format!(
                        "factor '{}' is bound to the common driver but common_noise is off",
                        f.name
                    )))
                }
                _ => {}
            }
        }
        match &self.x0 {
            InitialLaw::Point(x) if x.len() != d => {
                return Err(LqError::DimensionMismatch(format!("x0 must have length {d}")))
            }
            InitialLaw::Gaussian { mean, cov } => {
                if mean.len() != d || cov.shape() != (d, d) {
                    return Err(LqError::DimensionMismatch(format!(
                        "Gaussian x0 needs a {d}-vector mean and {d}x{d} covariance"
                    )));
                }
                if asymmetry(cov) > 1e-12 * (1.0 + crate::linalg::max_abs(cov))
                    || crate::linalg::min_eig(cov) < -1e-12
                {
                    return Err(LqError::UnsupportedInitialLaw(
                        "covariance must be symmetric positive semidefinite".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Problem with the hatted sums precomputed (B̂ = B + B̃ and so on).
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalProblem {
    pub spec: ProblemSpec,
    pub bh: TimeMat,
    pub ch: TimeMat,
    pub dh: Vec<TimeMat>,
    pub fh: Vec<TimeMat>,
    pub ih: TimeMat,
    pub nh: TimeMat,
    pub qh: TimeMat,
    pub ph: Mat,
}

pub fn canonicalize(spec: &ProblemSpec) -> Result<CanonicalProblem> {
    spec.check()?;
    Ok(CanonicalProblem {
        bh: spec.b.add(&spec.bt),
        ch: spec.c.add(&spec.ct),
        dh: spec.drivers.iter().map(|b| b.d.add(&b.dt)).collect(),
        fh: spec.drivers.iter().map(|b| b.f.add(&b.ft)).collect(),
        ih: spec.i.add(&spec.it),
        nh: spec.n.add(&spec.nt),
        qh: spec.q.add(&spec.qt),
        ph: &spec.p + &spec.pt,
        spec: spec.clone(),
    })
}

/// Matrix coefficients frozen at one time.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub t: f64,
    pub rho: f64,
    pub b: Mat,
    pub bt: Mat,
    pub bh: Mat,
    pub c: Mat,
    pub ct: Mat,
    pub ch: Mat,
    pub d: Vec<Mat>,
    pub dt: Vec<Mat>,
    pub dh: Vec<Mat>,
    pub f: Vec<Mat>,
    pub ft: Vec<Mat>,
    pub fh: Vec<Mat>,
    pub q: Mat,
    pub qh: Mat,
    pub n: Mat,
    pub nh: Mat,
    pub i: Mat,
    pub ih: Mat,
}

impl CanonicalProblem {
    pub fn coeffs_at(&self, t: f64) -> Coeffs {
        let s = &self.spec;
        Coeffs {
            t,
            rho: s.horizon.rho,
            b: s.b.at(t),
            bt: s.bt.at(t),
            bh: self.bh.at(t),
            c: s.c.at(t),
            ct: s.ct.at(t),
            ch: self.ch.at(t),
            d: s.drivers.iter().map(|b| b.d.at(t)).collect(),
            dt: s.drivers.iter().map(|b| b.dt.at(t)).collect(),
            dh: self.dh.iter().map(|m| m.at(t)).collect(),
            f: s.drivers.iter().map(|b| b.f.at(t)).collect(),
            ft: s.drivers.iter().map(|b| b.ft.at(t)).collect(),
            fh: self.fh.iter().map(|m| m.at(t)).collect(),
            q: s.q.at(t),
            qh: self.qh.at(t),
            n: s.n.at(t),
            nh: self.nh.at(t),
            i: s.i.at(t),
            ih: self.ih.at(t),
        }
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn factors(&self) -> &Factors {
        &self.spec.factors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::from_rows;

    fn scalar_spec() -> ProblemSpec {
        let mut s = ProblemSpec::zeros(1, 1, Horizon::finite(1.0, 0.1));
        s.n = TimeMat::scalar(1.0);
        s.q = TimeMat::scalar(1.0);
        s
    }

    #[test]
    fn pwl_interpolates_and_extrapolates_flat() {
        let tm = TimeMat::pwl(
            vec![0.0, 1.0],
            vec![Mat::from_element(1, 1, 1.0), Mat::from_element(1, 1, 3.0)],
        )
        .unwrap();
        assert_eq!(tm.at(0.25)[(0, 0)], 1.5);
        assert_eq!(tm.at(-1.0)[(0, 0)], 1.0);
        assert_eq!(tm.at(5.0)[(0, 0)], 3.0);
    }

    #[test]
    fn pwl_sum_is_exact_on_union_grid() {
        let a = TimeMat::pwl(
            vec![0.0, 1.0],
            vec![Mat::from_element(1, 1, 0.0), Mat::from_element(1, 1, 1.0)],
        )
        .unwrap();
        let b = TimeMat::pwl(
            vec![0.5, 2.0],
            vec![Mat::from_element(1, 1, 2.0), Mat::from_element(1, 1, -1.0)],
        )
        .unwrap();
        let s = a.add(&b);
        for t in [0.0, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0, 3.0] {
            assert!((s.at(t)[(0, 0)] - a.at(t)[(0, 0)] - b.at(t)[(0, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn hat_of_zero_tilde_is_identity() {
        let mut s = scalar_spec();
        s.b = TimeMat::scalar(0.7);
        let c = canonicalize(&s).unwrap();
        assert_eq!(c.bh.at(0.0)[(0, 0)], 0.7);
    }

    #[test]
    fn hat_adds_scalars() {
        let mut s = scalar_spec();
        s.b = TimeMat::scalar(1.0);
        s.bt = TimeMat::scalar(2.0);
        let c = canonicalize(&s).unwrap();
        assert_eq!(c.bh.at(0.3)[(0, 0)], 3.0);
    }

    #[test]
    fn resource_n_hat_is_delta() {
        let mut s = scalar_spec();
        s.n = TimeMat::scalar(1.0 + 0.5);
        s.nt = TimeMat::scalar(-0.5);
        let c = canonicalize(&s).unwrap();
        assert!((c.nh.at(0.0)[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn canonicalize_is_deterministic_and_keeps_spec() {
        let s = scalar_spec();
        let a = canonicalize(&s).unwrap();
        let b = canonicalize(&a.spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn asymmetric_q_is_rejected() {
        let mut s = ProblemSpec::zeros(2, 1, Horizon::finite(1.0, 0.0));
        s.q = TimeMat::Const(from_rows(2, 2, &[1.0, 0.5, 0.0, 1.0]));
        assert_eq!(s.check(), Err(LqError::NonSymmetricCostMatrix("Q".into())));
    }

    #[test]
    fn wrong_shape_is_dimension_mismatch() {
        let mut s = scalar_spec();
        s.c = TimeMat::zeros(2, 1);
        assert!(matches!(s.check(), Err(LqError::DimensionMismatch(_))));
    }

    #[test]
    fn factor_bound_to_missing_driver_is_rejected() {
        let mut s = scalar_spec();
        s.factors = Factors(vec![Factor {
            name: "z".into(),
            kappa: 1.0,
            level: 0.0,
            vol: 1.0,
            initial: 0.0,
            binding: Binding::StateDriver(3),
        }]);
        s.beta = AffineProc::zeros(1, 1);
        s.mc = AffineProc::zeros(1, 1);
        s.h = AffineProc::zeros(1, 1);
        s.l = AffineProc::zeros(1, 1);
        s.drivers[0].gamma = AffineProc::zeros(1, 1);
        assert!(matches!(s.check(), Err(LqError::Invalid(_))));
    }

    #[test]
    fn ou_moments() {
        let f = Factor {
            name: "p".into(),
            kappa: 2.0,
            level: 1.0,
            vol: 0.5,
            initial: 3.0,
            binding: Binding::Idiosyncratic,
        };
        assert!((f.mean(0.5) - (1.0 + 2.0 * (-1.0f64).exp())).abs() < 1e-15);
        assert!((f.var(0.5) - 0.25 * (1.0 - (-2.0f64).exp()) / 4.0).abs() < 1e-15);
        let (a, b, s) = f.transition(0.5);
        assert!((a * 3.0 + b - f.mean(0.5)).abs() < 1e-14);
        assert!((s * s - f.var(0.5)).abs() < 1e-14);
    }

    #[test]
    fn bar_and_center_split_idiosyncratic_part() {
        let fs = Factors(vec![
            Factor {
                name: "a".into(),
                kappa: 1.0,
                level: 2.0,
                vol: 1.0,
                initial: 2.0,
                binding: Binding::Idiosyncratic,
            },
            Factor {
                name: "b".into(),
                kappa: 1.0,
                level: 0.0,
                vol: 1.0,
                initial: 0.0,
                binding: Binding::Common,
            },
        ]);
        let a = Affine {
            c: Vector::from_vec(vec![1.0]),
            load: from_rows(1, 2, &[3.0, 5.0]),
        };
        let b = fs.bar(&a, 0.0);
        assert_eq!(b.c[0], 7.0);
        assert_eq!(b.load[(0, 0)], 0.0);
        assert_eq!(b.load[(0, 1)], 5.0);
        let c = fs.center(&a, 0.0);
        assert_eq!(c.c[0], -6.0);
        assert_eq!(c.load[(0, 1)], 0.0);
    }
}
