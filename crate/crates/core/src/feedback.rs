//! Optimal feedback law, mean-state path and value, plus the end-to-end
//! solve pipeline.

use serde::{Deserialize, Serialize};

use crate::bsde::{solve_r_finite, solve_r_infinite, solve_y_finite, solve_y_infinite, RPath, YSolution};
use crate::error::{LqError, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{
    canonicalize, h5_prime, validate_assumptions, Affine, AssumptionReport, CanonicalProblem,
    CheckStatus, Coeffs, InitialLaw, ProblemSpec,
};
use crate::riccati::{
    gains, solve_finite, solve_infinite, uniform_grid, AlgebraicRiccatiPair, InfiniteOptions,
    RiccatiPath,
};

/// S, Ŝ, U, V, O and ξ at one time. O and ξ are affine in the factors.
#[derive(Debug, Clone)]
pub struct DerivedCoefficients {
    pub t: f64,
    pub s: Mat,
    pub sh: Mat,
    pub u: Mat,
    pub v: Mat,
    pub o: Affine,
    pub xi: Affine,
    s_inv: Mat,
    sh_inv: Mat,
}

pub fn derive_coefficients(
    prob: &CanonicalProblem,
    c: &Coeffs,
    k: &Mat,
    lam: &Mat,
    y: &Affine,
) -> Result<DerivedCoefficients> {
    let s = &prob.spec;
    let fs = &s.factors;
    let t = c.t;
    let g = gains(k, lam, c)?;
    let h = s.h.at(t);
    let mut xi = h.add(&y.premul(&c.c.transpose()));
    let mut o = fs.bar(&h, t).add(&fs.bar(y, t).premul(&c.ch.transpose()));
    for (idx, blk) in s.drivers.iter().enumerate() {
        let gamma = blk.gamma.at(t);
        xi = xi.add(&gamma.premul(&(c.f[idx].transpose() * k)));
        o = o.add(&fs.bar(&gamma, t).premul(&(c.fh[idx].transpose() * k)));
    }
    Ok(DerivedCoefficients {
        t,
        s: g.s,
        sh: g.sh,
        u: g.u,
        v: g.v,
        o,
        xi,
        s_inv: g.s_inv,
        sh_inv: g.sh_inv,
    })
}

/// Control map at one time:
/// α = gain·(x − x̄) + gain_bar·x̄ + offset(z) + centered(z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawNode {
    pub t: f64,
    /// −S⁻¹U
    pub gain: Mat,
    /// −Ŝ⁻¹V
    pub gain_bar: Mat,
    /// −Ŝ⁻¹O
    pub offset: Affine,
    /// −S⁻¹ times the idiosyncratic loadings of ξ, applied to z − z̄, so
    /// the term is −S⁻¹(ξ − E[ξ]).
    pub centered: Mat,
}

impl LawNode {
    pub fn from_derived(dc: &DerivedCoefficients, prob: &CanonicalProblem) -> Self {
        let xc = prob.factors().center(&dc.xi, dc.t);
        LawNode {
            t: dc.t,
            gain: -(&dc.s_inv * &dc.u),
            gain_bar: -(&dc.sh_inv * &dc.v),
            offset: dc.o.premul(&dc.sh_inv).scale(-1.0),
            centered: -(&dc.s_inv * xc.load),
        }
    }

    /// `zbar` holds factor means for idiosyncratic entries and realised
    /// values for common ones.
    pub fn apply(&self, x: &Vector, xbar: &Vector, z: &Vector, zbar: &Vector) -> Vector {
        &self.gain * (x - xbar)
            + &self.gain_bar * xbar
            + self.offset.eval(z)
            + &self.centered * (z - zbar)
    }

    fn lerp(a: &LawNode, b: &LawNode, t: f64) -> LawNode {
        let w = (t - a.t) / (b.t - a.t);
        let mix = |p: &Mat, q: &Mat| p * (1.0 - w) + q * w;
        let mixa = |p: &Affine, q: &Affine| p.scale(1.0 - w).add(&q.scale(w));
        LawNode {
            t,
            gain: mix(&a.gain, &b.gain),
            gain_bar: mix(&a.gain_bar, &b.gain_bar),
            offset: mixa(&a.offset, &b.offset),
            centered: mix(&a.centered, &b.centered),
        }
    }
}

/// Optimal feedback law on a time grid, linearly interpolated between nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLaw {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub grid: Vec<f64>,
    pub nodes: Vec<LawNode>,
}

const GRID_SLACK: f64 = 1e-9;

impl FeedbackLaw {
    pub fn end(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    pub fn at(&self, t: f64) -> Result<LawNode> {
        let n = self.grid.len();
        let slack = GRID_SLACK * self.end().abs().max(1.0);
        if !(t >= self.grid[0] - slack && t <= self.grid[n - 1] + slack) {
            return Err(LqError::OutOfGrid { t });
        }
        if n == 1 || t <= self.grid[0] {
            return Ok(self.nodes[0].clone());
        }
        if t >= self.grid[n - 1] {
            return Ok(self.nodes[n - 1].clone());
        }
        let j = self.grid.partition_point(|&g| g <= t) - 1;
        if t == self.grid[j] {
            return Ok(self.nodes[j].clone());
        }
        Ok(LawNode::lerp(&self.nodes[j], &self.nodes[j + 1], t))
    }

    pub fn control(
        &self,
        t: f64,
        x: &Vector,
        xbar: &Vector,
        z: &Vector,
        zbar: &Vector,
    ) -> Result<Vector> {
        Ok(self.at(t)?.apply(x, xbar, z, zbar))
    }

    /// One row per node: t, gain, gain_bar (row-major), offset (constant then
    /// loadings column by column), centered loadings.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["t".to_string()];
        for name in ["gain", "gain_bar"] {
            for i in 0..self.m {
                for j in 0..self.d {
                    header.push(format!("{name}_{i}_{j}"));
                }
            }
        }
        for i in 0..self.m {
            header.push(format!("offset_{i}"));
        }
        for name in ["offset", "centered"] {
            for kk in 0..self.k {
                for i in 0..self.m {
                    header.push(format!("{name}_{i}_z{kk}"));
                }
            }
        }
        let rows: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| {
                let mut r = vec![n.t];
                for g in [&n.gain, &n.gain_bar] {
                    for i in 0..self.m {
                        for j in 0..self.d {
                            r.push(g[(i, j)]);
                        }
                    }
                }
                r.extend(n.offset.c.iter());
                r.extend(n.offset.load.iter());
                r.extend(n.centered.iter());
                r
            })
            .collect();
        crate::io::csv(&header, &rows)
    }
}

/// (K, Λ, Y, R) on the law grid: w(t, x, x̄) = (x−x̄)ᵀK(x−x̄) + x̄ᵀΛx̄ + 2Yᵀx + R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WField {
    pub grid: Vec<f64>,
    pub k: Vec<Mat>,
    pub lambda: Vec<Mat>,
    pub y: Vec<Affine>,
    pub r: Vec<f64>,
}

/// Interpolated w-field ingredients at one time.
#[derive(Debug, Clone)]
pub struct WNode {
    pub k: Mat,
    pub lambda: Mat,
    pub y: Affine,
    pub r: f64,
}

impl WNode {
    pub fn eval(&self, x: &Vector, xbar: &Vector, z: &Vector) -> f64 {
        let dx = x - xbar;
        (dx.transpose() * &self.k * &dx)[(0, 0)]
            + (xbar.transpose() * &self.lambda * xbar)[(0, 0)]
            + 2.0 * self.y.eval(z).dot(x)
            + self.r
    }
}

impl WField {
    pub fn at(&self, t: f64) -> Result<WNode> {
        let n = self.grid.len();
        let slack = GRID_SLACK * self.grid[n - 1].abs().max(1.0);
        if !(t >= self.grid[0] - slack && t <= self.grid[n - 1] + slack) {
            return Err(LqError::OutOfGrid { t });
        }
        let (j, w) = if n == 1 || t <= self.grid[0] {
            (0, 0.0)
        } else if t >= self.grid[n - 1] {
            (n - 2, 1.0)
        } else {
            let j = self.grid.partition_point(|&g| g <= t) - 1;
            (j, (t - self.grid[j]) / (self.grid[j + 1] - self.grid[j]))
        };
        if n == 1 {
            return Ok(WNode {
                k: self.k[0].clone(),
                lambda: self.lambda[0].clone(),
                y: self.y[0].clone(),
                r: self.r[0],
            });
        }
        Ok(WNode {
            k: &self.k[j] * (1.0 - w) + &self.k[j + 1] * w,
            lambda: &self.lambda[j] * (1.0 - w) + &self.lambda[j + 1] * w,
            y: self.y[j].scale(1.0 - w).add(&self.y[j + 1].scale(w)),
            r: self.r[j] * (1.0 - w) + self.r[j + 1] * w,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanPath {
    pub grid: Vec<f64>,
    pub values: Vec<Vector>,
    /// First time with ‖d/dt E[X]‖ < 1e−10, if any.
    pub steady_at: Option<f64>,
}

pub const STEADY_TOL: f64 = 1e-10;

/// E[X*] from d/dt E[X] = (B̂ + Ĉ·gain_bar)E[X] + E[β] + Ĉ·E[offset],
/// RK4 on the law grid.
pub fn mean_state_path(prob: &CanonicalProblem, law: &FeedbackLaw) -> Result<MeanPath> {
    let s = &prob.spec;
    let fs = &s.factors;
    let rhs = |t: f64, x: &Vector| -> Result<Vector> {
        let c = prob.coeffs_at(t);
        let n = law.at(t)?;
        let ea = &n.gain_bar * x + fs.mean_of(&n.offset, t);
        Ok(&c.bh * x + fs.mean_of(&s.beta.at(t), t) + &c.ch * ea)
    };
    let grid = law.grid.clone();
    let mut values = vec![s.x0.mean().clone()];
    let mut steady_at = None;
    for j in 0..grid.len().saturating_sub(1) {
        let (t, h) = (grid[j], grid[j + 1] - grid[j]);
        let x = &values[j];
        let k1 = rhs(t, x)?;
        if steady_at.is_none() && k1.amax() < STEADY_TOL {
            steady_at = Some(t);
        }
        let k2 = rhs(t + 0.5 * h, &(x + &k1 * (0.5 * h)))?;
        let k3 = rhs(t + 0.5 * h, &(x + &k2 * (0.5 * h)))?;
        let k4 = rhs(t + h, &(x + &k3 * h))?;
        let next = x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        values.push(next);
    }
    Ok(MeanPath {
        grid,
        values,
        steady_at,
    })
}

/// V₀ = tr(K₀Σ₀) + μᵀΛ₀μ + 2E[Y₀]ᵀμ + R₀.
pub fn value(
    prob: &CanonicalProblem,
    k0: &Mat,
    lam0: &Mat,
    y0: &Affine,
    r0: f64,
    x0: &InitialLaw,
) -> Result<f64> {
    let mu = x0.mean();
    let cov = x0.cov();
    let ey = prob.factors().mean_of(y0, 0.0);
    Ok((k0 * cov).trace() + (mu.transpose() * lam0 * mu)[(0, 0)] + 2.0 * ey.dot(mu) + r0)
}

/// Everything the verifier needs, serialized by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawBundle {
    pub spec_hash: String,
    pub value: f64,
    pub law: FeedbackLaw,
    pub w: WField,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub grid_steps: usize,
    pub allow_unverified: bool,
    pub infinite: InfiniteOptions,
    /// Infinite horizon: the law is tabulated on [0, law_horizon]
    /// (default 40/ρ) with spacing at most `law_dt`.
    pub law_horizon: Option<f64>,
    pub law_dt: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            grid_steps: 1000,
            allow_unverified: false,
            infinite: InfiniteOptions::default(),
            law_horizon: None,
            law_dt: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backward {
    Finite(RiccatiPath),
    Infinite(AlgebraicRiccatiPair),
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub prob: CanonicalProblem,
    pub report: AssumptionReport,
    pub backward: Backward,
    pub y: YSolution,
    pub r: RPath,
    pub law: FeedbackLaw,
    pub w: WField,
    pub mean_path: MeanPath,
    pub value: f64,
}

impl Solution {
    pub fn bundle(&self, spec_hash: &str) -> LawBundle {
        LawBundle {
            spec_hash: spec_hash.to_string(),
            value: self.value,
            law: self.law.clone(),
            w: self.w.clone(),
        }
    }
}

fn family_passes(report: &AssumptionReport, id: &str) -> bool {
    report
        .checks
        .iter()
        .any(|c| (c.id == id || c.id.starts_with(&format!("{id}("))) && c.status == CheckStatus::Pass)
}

/// Stationary checks at the algebraic solution.
pub fn h5_checks(prob: &CanonicalProblem, pair: &AlgebraicRiccatiPair) -> Result<Vec<crate::model::Check>> {
    let c = prob.coeffs_at(0.0);
    let g = gains(&pair.k, &pair.lambda, &c)?;
    let gs = &g.s_inv * &g.u;
    let bstar = &c.b - &c.c * &gs;
    let dstar: Vec<Mat> = c.d.iter().zip(&c.f).map(|(d, f)| d - f * &gs).collect();
    let bhstar = &c.bh - &c.ch * (&g.sh_inv * &g.v);
    Ok(h5_prime(&prob.spec, &bstar, &dstar, &bhstar))
}

/// Validates, solves the backward system and assembles law, mean path and value.
pub fn solve(spec: &ProblemSpec, opts: &SolveOptions) -> Result<Solution> {
    let mut report = validate_assumptions(spec)?;
    let gate = |report: &AssumptionReport, ok: bool| -> Result<()> {
        if !ok && !opts.allow_unverified {
            Err(LqError::AssumptionFailure(format!(
                "{}; failed: {}",
                report.route,
                report.failed().join(", ")
            )))
        } else {
            Ok(())
        }
    };
    gate(&report, !report.requires_allow_unverified)?;
    let prob = canonicalize(spec)?;
    let infinite = spec.horizon.is_infinite();
    if infinite {
        gate(&report, family_passes(&report, "H3'"))?;
    }

    let (backward, y, grid) = if !infinite {
        let path = solve_finite(&prob, opts.grid_steps)?;
        let y = solve_y_finite(&prob, &path)?;
        let grid = path.grid.clone();
        (Backward::Finite(path), y, grid)
    } else {
        let pair = solve_infinite(&prob, &opts.infinite)?;
        for c in h5_checks(&prob, &pair)? {
            report.set(c);
        }
        gate(&report, family_passes(&report, "H5'"))?;
        let y = solve_y_infinite(&prob, &pair, opts.grid_steps)?;
        let t_law = opts.law_horizon.unwrap_or(40.0 / spec.rho());
        let steps = ((t_law / opts.law_dt).ceil() as usize).max(1);
        (Backward::Infinite(pair), y, uniform_grid(t_law, steps))
    };
    let r = match &backward {
        Backward::Finite(p) => solve_r_finite(&prob, p, &y)?,
        Backward::Infinite(p) => solve_r_infinite(&prob, p, &y, grid[grid.len() - 1])?,
    };

    let mut nodes = Vec::with_capacity(grid.len());
    let mut w = WField {
        grid: grid.clone(),
        k: Vec::with_capacity(grid.len()),
        lambda: Vec::with_capacity(grid.len()),
        y: Vec::with_capacity(grid.len()),
        r: Vec::with_capacity(grid.len()),
    };
    for (j, &t) in grid.iter().enumerate() {
        let (k, lam, ya, rv) = match &backward {
            Backward::Finite(p) => (&p.k[j], &p.lambda[j], y.node_affine(j), r.values[j]),
            Backward::Infinite(p) => (&p.k, &p.lambda, y.affine_at(t), r.at(t)),
        };
        let dc = derive_coefficients(&prob, &prob.coeffs_at(t), k, lam, &ya)?;
        nodes.push(LawNode::from_derived(&dc, &prob));
        w.k.push(k.clone());
        w.lambda.push(lam.clone());
        w.y.push(ya);
        w.r.push(rv);
    }
    let law = FeedbackLaw {
        d: spec.d,
        m: spec.m,
        k: spec.k(),
        grid,
        nodes,
    };
    let mean_path = mean_state_path(&prob, &law)?;
    let value = value(&prob, &w.k[0], &w.lambda[0], &w.y[0], w.r[0], &spec.x0)?;
    Ok(Solution {
        prob,
        report,
        backward,
        y,
        r,
        law,
        w,
        mean_path,
        value,
    })
}
