//! Particle Monte Carlo for the controlled McKean-Vlasov SDE, cost
//! estimation and the weak martingale diagnostic.
//!
//! Euler-Maruyama on N particles per world. The law term x̄ (and ᾱ) is the
//! empirical mean over the particles of a world; worlds share nothing but
//! the seed, and each world carries its own common-driver path. Running
//! costs use the left-endpoint rule with e^{−ρt} discounting.
//!
//! Every particle (or antithetic pair) owns a ChaCha8 stream indexed by its
//! global position, and world paths use streams after the particle range,
//! so results do not depend on thread scheduling. Reductions over particles
//! run sequentially in index order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LqError, Result};
use crate::feedback::{FeedbackLaw, LawBundle, LawNode, WField};
use crate::linalg::{Mat, Vector};
use crate::model::{Affine, Binding, CanonicalProblem, TimeMat};

const UNSTABLE_NORM: f64 = 1e9;
const MIN_LEN: usize = 4096;
/// Units (particles or antithetic pairs) sharing one random stream.
const BLOCK: usize = 256;

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    /// Particles per world.
    pub particles: usize,
    pub dt: f64,
    /// Simulation horizon; defaults to T (finite) or 40/ρ (infinite).
    pub t_sim: Option<f64>,
    pub seed: u64,
    pub antithetic: bool,
    /// Number of independent common-noise worlds (1 without common noise).
    pub worlds: usize,
    /// Upper bound on the number of batches for standard errors.
    pub batches: usize,
    /// Approximate number of recorded times.
    pub records: usize,
    /// Keep per-world conditional means and common factor paths at every step.
    pub track_worlds: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            particles: 10_000,
            dt: 1e-2,
            t_sim: None,
            seed: 0,
            antithetic: true,
            worlds: 1,
            batches: 40,
            records: 100,
            track_worlds: false,
        }
    }
}

impl SimConfig {
    pub fn horizon(&self, prob: &CanonicalProblem) -> f64 {
        self.t_sim.unwrap_or_else(|| {
            prob.spec
                .horizon
                .terminal()
                .unwrap_or(40.0 / prob.spec.rho())
        })
    }

    pub fn check(&self, prob: &CanonicalProblem) -> Result<()> {
        let bad = |m: &str| Err(LqError::InvalidParams(m.into()));
        if self.particles < 2 {
            return bad("at least 2 particles per world are needed");
        }
        if self.antithetic && !self.particles.is_multiple_of(2) {
            return bad("antithetic sampling needs an even particle count");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.worlds == 0 {
            return bad("worlds must be at least 1");
        }
        if self.worlds > 1 && !prob.spec.common_noise {
            return bad("several worlds require a common-noise problem");
        }
        if self.batches < 2 {
            return bad("at least 2 batches are needed");
        }
        let t = self.horizon(prob);
        if !(t > 0.0 && t.is_finite()) {
            return bad("simulation horizon must be positive");
        }
        if let Some(tf) = prob.spec.horizon.terminal() {
            if t > tf * (1.0 + 1e-12) {
                return bad("simulation horizon exceeds the problem horizon");
            }
        }
        Ok(())
    }
}

/// Fixed perturbation directions η added to the optimal control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// η = 1
    ConstantShift,
    /// η = sin(2πt/T)
    Sinusoidal,
    /// η = mean of the coordinates of the optimally controlled state,
    /// simulated alongside with the same noise.
    StateProportional,
}

impl Perturbation {
    pub const ALL: [Perturbation; 3] = [
        Perturbation::ConstantShift,
        Perturbation::Sinusoidal,
        Perturbation::StateProportional,
    ];

    /// Deterministic η(t); the state-proportional shift is handled by the
    /// simulator.
    fn eta(self, t: f64, t_end: f64) -> f64 {
        match self {
            Perturbation::ConstantShift => 1.0,
            Perturbation::Sinusoidal => (2.0 * std::f64::consts::PI * t / t_end).sin(),
            Perturbation::StateProportional => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Law(&'a FeedbackLaw),
    Perturbed {
        law: &'a FeedbackLaw,
        kind: Perturbation,
        eps: f64,
    },
    /// Deterministic control path (m×1).
    OpenLoop(&'a TimeMat),
}

/// Row-major copy of a small matrix.
struct Flat {
    c: usize,
    a: Vec<f64>,
}

impl Flat {
    fn of(m: &Mat) -> Flat {
        Flat {
            c: m.ncols(),
            a: m.transpose().iter().copied().collect(),
        }
    }

    fn acc(&self, out: &mut [f64], v: &[f64]) {
        if self.c == 0 {
            return;
        }
        for (o, row) in out.iter_mut().zip(self.a.chunks_exact(self.c)) {
            *o += dot(row, v);
        }
    }

    /// uᵀAv
    fn quad(&self, u: &[f64], v: &[f64]) -> f64 {
        if self.c == 0 {
            return 0.0;
        }
        u.iter().zip(self.a.chunks_exact(self.c)).map(|(ui, row)| ui * dot(row, v)).sum()
    }
}

struct FlatAff {
    c: Vec<f64>,
    load: Flat,
}

impl FlatAff {
    fn of(a: &Affine) -> FlatAff {
        FlatAff {
            c: a.c.iter().copied().collect(),
            load: Flat::of(&a.load),
        }
    }

    /// (c + load·z)ᵀv
    fn dot(&self, z: &[f64], v: &[f64]) -> f64 {
        dot(&self.c, v) + self.load.quad(v, z)
    }
}

/// Control at one step as an affine map of (x, z), before the world part.
enum StepPolicy {
    Law {
        node: LawNode,
        /// Weight on the coordinate sum of the optimal state.
        px: f64,
        /// Perturbation constant.
        pc: f64,
    },
    Fixed(Vector),
}

impl StepPolicy {
    fn at(p: &Policy, t: f64, t_end: f64, d: usize) -> Result<StepPolicy> {
        Ok(match *p {
            Policy::Law(law) => StepPolicy::Law {
                node: law.at(t)?,
                px: 0.0,
                pc: 0.0,
            },
            Policy::Perturbed { law, kind, eps } => {
                let (px, pc) = match kind {
                    Perturbation::StateProportional => (eps / d as f64, 0.0),
                    k => (0.0, eps * k.eta(t, t_end)),
                };
                StepPolicy::Law {
                    node: law.at(t)?,
                    px,
                    pc,
                }
            }
            Policy::OpenLoop(a) => StepPolicy::Fixed(a.at(t).column(0).into_owned()),
        })
    }

    /// (Gx, Gz) with α = a0 + Gx·x + Gz·z.
    fn gains(&self, d: usize, m: usize, kf: usize) -> (Mat, Mat) {
        match self {
            StepPolicy::Law { node, .. } => (node.gain.clone(), node.centered.clone()),
            StepPolicy::Fixed(_) => (Mat::zeros(m, d), Mat::zeros(m, kf)),
        }
    }

    fn shadow_weight(&self) -> f64 {
        match self {
            StepPolicy::Law { px, .. } => *px,
            StepPolicy::Fixed(_) => 0.0,
        }
    }

    fn a0(&self, xbar: &Vector, zbar: &Vector) -> Vector {
        match self {
            StepPolicy::Law { node, pc, .. } => {
                (&node.gain_bar - &node.gain) * xbar
                    + &node.offset.c
                    + (&node.offset.load - &node.centered) * zbar
                    + Vector::from_element(node.gain.nrows(), *pc)
            }
            StepPolicy::Fixed(a) => a.clone(),
        }
    }
}

/// World-dependent part of a [`StepMap`].
struct WorldMap {
    a0: Vec<f64>,
    c: Vec<f64>,
    ci: Vec<Vec<f64>>,
    l: Vec<f64>,
    c0: f64,
}

/// One Euler step in affine form. With v = [x; z; α] and
/// α = a0 + ga·[x; z]: x' = x + c + dm·v + Σ_i ξ_i (c_i + gm_i·v), and the
/// running cost is f = vᵀ·wq·v + 2lᵀv + c0. Drift terms carry dt and
/// diffusion terms √dt.
struct StepMap {
    nxz: usize,
    n: usize,
    ga: Vec<f64>,
    dm: Vec<f64>,
    gm: Vec<Vec<f64>>,
    wq: Vec<f64>,
    worlds: Vec<WorldMap>,
}

fn flat(m: &Mat) -> Vec<f64> {
    Flat::of(m).a
}

impl StepMap {
    #[allow(clippy::too_many_arguments)]
    fn build(
        prob: &CanonicalProblem,
        t: f64,
        dt: f64,
        pol: &StepPolicy,
        xbar: &[Vector],
        zbar: &[Vector],
        zemp: &[Vector],
        shift: &[f64],
    ) -> StepMap {
        let s = &prob.spec;
        let (d, m, kf) = (s.d, s.m, s.k());
        let (nxz, n) = (d + kf, d + kf + m);
        let sq = dt.sqrt();
        let cf = prob.coeffs_at(t);
        let beta = s.beta.at(t);
        let gammas: Vec<Affine> = s.drivers.iter().map(|b| b.gamma.at(t)).collect();
        let mc = s.mc.at(t);
        let h = s.h.at(t);
        let (gx, gz) = pol.gains(d, m, kf);

        let mut ga = Mat::zeros(m, nxz);
        ga.view_mut((0, 0), (m, d)).copy_from(&gx);
        ga.view_mut((0, d), (m, kf)).copy_from(&gz);
        let row = |a: &Mat, l: &Mat, c: &Mat, scale: f64| {
            let mut o = Mat::zeros(d, n);
            o.view_mut((0, 0), (d, d)).copy_from(a);
            o.view_mut((0, d), (d, kf)).copy_from(l);
            o.view_mut((0, nxz), (d, m)).copy_from(c);
            flat(&(o * scale))
        };
        let dm = row(&cf.b, &beta.load, &cf.c, dt);
        let gm = (0..gammas.len())
            .map(|i| row(&cf.d[i], &gammas[i].load, &cf.f[i], sq))
            .collect();
        let mut wq = Mat::zeros(n, n);
        wq.view_mut((0, 0), (d, d)).copy_from(&cf.q);
        wq.view_mut((nxz, nxz), (m, m)).copy_from(&cf.n);
        wq.view_mut((nxz, 0), (m, d)).copy_from(&cf.i);
        wq.view_mut((0, nxz), (d, m)).copy_from(&cf.i.transpose());
        wq.view_mut((0, d), (d, kf)).copy_from(&mc.load);
        wq.view_mut((d, 0), (kf, d)).copy_from(&mc.load.transpose());
        wq.view_mut((nxz, d), (m, kf)).copy_from(&h.load);
        wq.view_mut((d, nxz), (kf, m)).copy_from(&h.load.transpose());

        let q2 = |a: &Mat, u: &Vector, v: &Vector| (u.transpose() * a * v)[(0, 0)];
        let worlds = (0..xbar.len())
            .map(|w| {
                let xb = &xbar[w];
                let a0 = pol.a0(xb, &zbar[w]);
                let ab = &a0 + &gx * xb + &gz * &zemp[w] + Vector::from_element(m, shift[w]);
                let c = (&beta.c + &cf.bt * xb + &cf.ct * &ab) * dt;
                let ci = (0..gammas.len())
                    .map(|i| {
                        ((&gammas[i].c + &cf.dt[i] * xb + &cf.ft[i] * &ab) * sq)
                            .iter()
                            .copied()
                            .collect()
                    })
                    .collect();
                let mut l = Vector::zeros(n);
                l.rows_mut(0, d).copy_from(&(&mc.c - &cf.q * xb));
                l.rows_mut(nxz, m).copy_from(&(&h.c - &cf.i * xb - &cf.n * &ab));
                let c0 = q2(&cf.q, xb, xb)
                    + q2(&cf.qh, xb, xb)
                    + 2.0 * q2(&cf.ih, &ab, xb)
                    + q2(&cf.nh, &ab, &ab)
                    + q2(&cf.n, &ab, &ab);
                WorldMap {
                    a0: a0.iter().copied().collect(),
                    c: c.iter().copied().collect(),
                    ci,
                    l: l.iter().copied().collect(),
                    c0,
                }
            })
            .collect();
        StepMap {
            nxz,
            n,
            ga: flat(&ga),
            dm,
            gm,
            wq: flat(&wq),
            worlds,
        }
    }

    /// Fills v = [x; z; α] and returns the running cost f.
    #[inline]
    fn load(&self, wm: &WorldMap, x: &[f64], z: &[f64], extra: f64, v: &mut [f64]) -> f64 {
        let (d, nxz, n) = (x.len(), self.nxz, self.n);
        v[..d].copy_from_slice(x);
        v[d..nxz].copy_from_slice(&z[..nxz - d]);
        let (xz, al) = v.split_at_mut(nxz);
        for ((a, a0), row) in al.iter_mut().zip(&wm.a0).zip(self.ga.chunks_exact(nxz)) {
            *a = a0 + extra + dot(row, xz);
        }
        let mut f = wm.c0;
        for ((vi, li), row) in v.iter().zip(&wm.l).zip(self.wq.chunks_exact(n)) {
            f += vi * (dot(row, v) + 2.0 * li);
        }
        f
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dimensions (d, n) of the Euler kernel; fixed sizes let the compiler
/// unroll the small products.
trait Dims: Copy + Send + Sync {
    fn d(self) -> usize;
    fn n(self) -> usize;
}

#[derive(Clone, Copy)]
struct Fix<const D: usize, const N: usize>;

impl<const D: usize, const N: usize> Dims for Fix<D, N> {
    #[inline(always)]
    fn d(self) -> usize {
        D
    }
    #[inline(always)]
    fn n(self) -> usize {
        N
    }
}

#[derive(Clone, Copy)]
struct Dyn(usize, usize);

impl Dims for Dyn {
    #[inline(always)]
    fn d(self) -> usize {
        self.0
    }
    #[inline(always)]
    fn n(self) -> usize {
        self.1
    }
}

type PassBufs<'a> = (
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [ChaCha8Rng],
);

/// Optimal-state copy driven by the same noise, used by the
/// state-proportional perturbation.
struct Shadow<'a> {
    map: &'a StepMap,
    px: f64,
}

struct EulerPass<'a> {
    map: &'a StepMap,
    shadow: Option<Shadow<'a>>,
    usz: usize,
    npw: usize,
    kz: usize,
    nd: usize,
    idio: &'a [usize],
    driven: &'a [(usize, usize)],
    trans: &'a [(f64, f64, f64)],
    cdt: f64,
    disc: f64,
    want_fabs: bool,
}

impl EulerPass<'_> {
    /// Advances every particle by one step; true if any state blew up.
    fn run<T: Dims>(&self, dims: T, (x, xs, z, cost, fabs, rngs): PassBufs) -> bool {
        let (d, n) = (dims.d(), dims.n());
        let (usz, kz) = (self.usz, self.kz);
        let n_norm = self.nd + self.idio.len();
        let sd = if self.shadow.is_some() { d } else { 0 };
        // Without a shadow the slice is empty; chunks of at least one
        // element keep the zip aligned.
        let schunk = (BLOCK * usz * sd).max(1);
        let mut empty = vec![0.0; rngs.len()];
        let xs = if sd == 0 { &mut empty[..] } else { xs };
        x.par_chunks_mut(BLOCK * usz * d)
            .zip(xs.par_chunks_mut(schunk))
            .zip(z.par_chunks_mut(BLOCK * usz * kz))
            .zip(cost.par_chunks_mut(BLOCK * usz))
            .zip(fabs.par_chunks_mut(BLOCK * usz))
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map_init(
                || (vec![0.0; n], vec![0.0; d], vec![0.0; n_norm]),
                |(v, xn, buf), (bi, (((((xblk, sblk), zblk), cblk), fblk), rng))| {
                    let mut bad = false;
                    for ul in 0..cblk.len() / usz {
                        for e in buf.iter_mut() {
                            *e = StandardNormal.sample(rng);
                        }
                        for a in 0..usz {
                            let q = ul * usz + a;
                            let p = bi * BLOCK * usz + q;
                            let wi = p / self.npw;
                            let sign = if a == 1 { -1.0 } else { 1.0 };
                            let mut extra = 0.0;
                            if let Some(sh) = &self.shadow {
                                let ss = &mut sblk[q * d..(q + 1) * d];
                                extra = sh.px * ss.iter().sum::<f64>();
                                let zs = &zblk[q * kz..(q + 1) * kz];
                                let (_, b) = self.advance(
                                    dims, sh.map, &sh.map.worlds[wi], ss, zs, 0.0, &mut v[..n], &mut xn[..d], buf, sign,
                                );
                                bad |= b;
                            }
                            let xq = &mut xblk[q * d..(q + 1) * d];
                            let zs = &mut zblk[q * kz..(q + 1) * kz];
                            let (f, b) = self.advance(
                                dims, self.map, &self.map.worlds[wi], xq, zs, extra, &mut v[..n], &mut xn[..d], buf,
                                sign,
                            );
                            bad |= b;
                            cblk[q] += self.cdt * f;
                            if self.want_fabs {
                                fblk[q] = self.disc * f.abs();
                            }
                            self.advance_factors(zs, buf, sign);
                        }
                    }
                    bad
                },
            )
            .reduce(|| false, |a, b| a || b)
    }

    /// Euler step of one state; returns the running cost at the start of
    /// the step and whether the state blew up.
    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn advance<T: Dims>(
        &self,
        dims: T,
        map: &StepMap,
        wm: &WorldMap,
        xs: &mut [f64],
        zs: &[f64],
        extra: f64,
        v: &mut [f64],
        xn: &mut [f64],
        buf: &[f64],
        sign: f64,
    ) -> (f64, bool) {
        let (d, n) = (dims.d(), dims.n());
        let nxz = map.nxz;
        v[..d].copy_from_slice(&xs[..d]);
        v[d..nxz].copy_from_slice(&zs[..nxz - d]);
        for r in nxz..n {
            let row = &map.ga[(r - nxz) * nxz..(r - nxz + 1) * nxz];
            v[r] = wm.a0[r - nxz] + extra + dot(row, &v[..nxz]);
        }
        let mut f = wm.c0;
        for r in 0..n {
            f += v[r] * (dot(&map.wq[r * n..(r + 1) * n], &v[..n]) + 2.0 * wm.l[r]);
        }
        for r in 0..d {
            xn[r] = xs[r] + wm.c[r] + dot(&map.dm[r * n..(r + 1) * n], &v[..n]);
        }
        for (i, g) in map.gm.iter().enumerate() {
            let e = sign * buf[i];
            for r in 0..d {
                xn[r] += e * (wm.ci[i][r] + dot(&g[r * n..(r + 1) * n], &v[..n]));
            }
        }
        let mut bad = false;
        for r in 0..d {
            bad |= !(xn[r].abs() < UNSTABLE_NORM);
            xs[r] = xn[r];
        }
        (f, bad)
    }

    #[inline(always)]
    fn advance_factors(&self, zs: &mut [f64], buf: &[f64], sign: f64) {
        for (slot, &k) in self.idio.iter().enumerate() {
            let (ta, tb, ts) = self.trans[k];
            zs[k] = ta * zs[k] + tb + ts * sign * buf[self.nd + slot];
        }
        for &(k, i) in self.driven {
            let (ta, tb, ts) = self.trans[k];
            zs[k] = ta * zs[k] + tb + ts * sign * buf[i];
        }
    }
}

/// Batch mean and its standard error.
pub fn batch_stats(b: &[f64]) -> (f64, f64) {
    let n = b.len() as f64;
    let mean = b.iter().sum::<f64>() / n;
    let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Largest divisor of `n` not exceeding `cap`.
fn divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|b| n.is_multiple_of(*b)).unwrap_or(1)
}

#[derive(Debug, Clone, Serialize)]
pub struct Record {
    pub t: f64,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub cov_trace: f64,
    pub mean_control: Vec<f64>,
    pub mean_control_se: Vec<f64>,
    /// E[S_t] and its standard error, when a w-field was supplied.
    pub s_mean: Option<f64>,
    pub s_se: Option<f64>,
    #[serde(skip)]
    pub s_batches: Vec<f64>,
}

/// Per-world conditional means and common factors at every step.
#[derive(Debug, Clone, Serialize)]
pub struct WorldTrack {
    pub t: Vec<f64>,
    /// `mean[w][j·d + i]`
    pub mean: Vec<Vec<f64>>,
    /// Within-world sample standard deviation, same layout.
    pub sd: Vec<Vec<f64>>,
    /// `factors[w][j·k + kk]`, realised common factors (idiosyncratic
    /// entries hold their means).
    pub factors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParticleEnsemble {
    pub particles_per_world: usize,
    pub worlds: usize,
    pub steps: usize,
    pub dt: f64,
    pub t_end: f64,
    pub batches: usize,
    pub records: Vec<Record>,
    /// Per-batch means of the particle cost J_i.
    pub j_batches: Vec<f64>,
    /// Bound on the discounted cost beyond `t_end` (infinite horizon).
    pub tail_bound: f64,
    #[serde(skip)]
    pub final_states: Vec<f64>,
    #[serde(skip)]
    pub world_track: Option<WorldTrack>,
}

impl ParticleEnsemble {
    /// Rows: t, mean state, covariance trace, mean control.
    pub fn summary_csv(&self) -> String {
        let d = self.records.first().map_or(0, |r| r.mean.len());
        let m = self.records.first().map_or(0, |r| r.mean_control.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|i| format!("mean_x{i}")));
        header.push("cov_trace".into());
        header.extend((0..m).map(|i| format!("mean_a{i}")));
        let rows: Vec<Vec<f64>> = self
            .records
            .iter()
            .map(|r| {
                let mut v = vec![r.t];
                v.extend(&r.mean);
                v.push(r.cov_trace);
                v.extend(&r.mean_control);
                v
            })
            .collect();
        crate::io::csv(&header, &rows)
    }
}

/// (J estimate, standard error) from the batch means.
pub fn estimate_cost(ens: &ParticleEnsemble) -> (f64, f64) {
    batch_stats(&ens.j_batches)
}

fn unit_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Square root of a PSD covariance through its eigen-decomposition.
fn cov_root(cov: &Mat) -> Flat {
    let e = nalgebra::SymmetricEigen::new(cov.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &e.eigenvectors * Mat::from_diagonal(&vals);
    Flat::of(&root)
}

/// Simulates the particle system under `policy`. With `w`, the weak
/// martingale process S_t = e^{−ρt} w(t, X_t, x̄_t) + ∫_0^t e^{−ρs} f_s ds is
/// recorded as well.
pub fn simulate(
    prob: &CanonicalProblem,
    policy: Policy,
    cfg: &SimConfig,
    w: Option<&WField>,
) -> Result<ParticleEnsemble> {
    cfg.check(prob)?;
    let s = &prob.spec;
    let (d, m, kf) = (s.d, s.m, s.k());
    let kz = kf.max(1);
    let nd = s.n_drivers();
    let fs = &s.factors;
    let rho = s.rho();
    let t_end = cfg.horizon(prob);
    let steps = ((t_end / cfg.dt).round() as usize).max(1);
    let dt = t_end / steps as f64;
    let finite = s.horizon.terminal().is_some_and(|tf| (tf - t_end).abs() <= 1e-12 * tf);

    let npw = cfg.particles;
    let worlds = cfg.worlds;
    let ntot = npw * worlds;
    let usz = if cfg.antithetic { 2 } else { 1 };
    let units = ntot / usz;
    let nb = if worlds > 1 {
        divisor_at_most(worlds, cfg.batches)
    } else {
        divisor_at_most(units, cfg.batches)
    };
    if nb < 2 {
        return Err(LqError::InvalidParams("cannot form at least 2 equal batches".into()));
    }
    let batch_of_particle = |p: usize| -> usize {
        if worlds > 1 {
            (p / npw) * nb / worlds
        } else {
            (p / usz) * nb / units
        }
    };
    let per_batch = (ntot / nb) as f64;

    let idio: Vec<usize> = (0..kf)
        .filter(|&k| fs.0[k].binding == Binding::Idiosyncratic)
        .collect();
    let common: Vec<usize> = (0..kf)
        .filter(|&k| fs.0[k].binding == Binding::Common)
        .collect();
    let driven: Vec<(usize, usize)> = (0..kf)
        .filter_map(|k| match fs.0[k].binding {
            Binding::StateDriver(i) => Some((k, i)),
            _ => None,
        })
        .collect();
    let trans: Vec<(f64, f64, f64)> = fs.0.iter().map(|f| f.transition(dt)).collect();

    // Initial state.
    let nblocks = units.div_ceil(BLOCK);
    let mut rngs: Vec<ChaCha8Rng> = (0..nblocks).map(|b| unit_rng(cfg.seed, b as u64)).collect();
    let mut world_rngs: Vec<ChaCha8Rng> = (0..worlds)
        .map(|wi| unit_rng(cfg.seed, (nblocks + wi) as u64))
        .collect();
    let mu: Vec<f64> = s.x0.mean().iter().copied().collect();
    let cov = s.x0.cov();
    let gaussian = cov.iter().any(|v| *v != 0.0);
    let root = cov_root(&cov);
    let mut x = vec![0.0; ntot * d];
    for u in 0..units {
        let mut xi = vec![0.0; d];
        if gaussian {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(&mut rngs[u / BLOCK]);
            }
        }
        for a in 0..usz {
            let p = u * usz + a;
            let sign = if a == 1 { -1.0 } else { 1.0 };
            let xs = &mut x[p * d..(p + 1) * d];
            xs.copy_from_slice(&mu);
            if gaussian {
                let sx: Vec<f64> = xi.iter().map(|v| v * sign).collect();
                root.acc(xs, &sx);
            }
        }
    }
    let z0: Vec<f64> = if kf == 0 { vec![0.0] } else { fs.initial().iter().copied().collect() };
    let mut z = vec![0.0; ntot * kz];
    for p in 0..ntot {
        z[p * kz..(p + 1) * kz].copy_from_slice(&z0);
    }
    let mut zw: Vec<Vec<f64>> = vec![z0.clone(); worlds];
    let shadow_on = matches!(
        policy,
        Policy::Perturbed {
            kind: Perturbation::StateProportional,
            ..
        }
    );
    let mut xstar = if shadow_on { x.clone() } else { Vec::new() };
    let mut cost = vec![0.0; ntot];
    let mut sval = vec![0.0; ntot];
    let mut fabs = vec![0.0; ntot];

    let rec_every = (steps / cfg.records.max(1)).max(1);
    let mut records = Vec::new();
    let mut track = cfg.track_worlds.then(|| WorldTrack {
        t: Vec::with_capacity(steps + 1),
        mean: vec![Vec::new(); worlds],
        sd: vec![Vec::new(); worlds],
        factors: vec![Vec::new(); worlds],
    });
    let mut last_fabs = 0.0;

    for j in 0..=steps {
        let t = j as f64 * dt;
        let disc = (-rho * t).exp();
        let last = j == steps;
        let is_record = j % rec_every == 0 || last;

        // Empirical (conditional) means per world.
        for p in 0..ntot {
            let wi = p / npw;
            for &k in &common {
                z[p * kz + k] = zw[wi][k];
            }
        }
        let means_t = fs.means(t);
        let mut xbar = vec![Vector::zeros(d); worlds];
        let mut zemp = vec![Vector::zeros(kf); worlds];
        let mut zbar = vec![Vector::zeros(kf); worlds];
        for wi in 0..worlds {
            for p in wi * npw..(wi + 1) * npw {
                for i in 0..d {
                    xbar[wi][i] += x[p * d + i];
                }
                for k in 0..kf {
                    zemp[wi][k] += z[p * kz + k];
                }
            }
            xbar[wi] /= npw as f64;
            zemp[wi] /= npw as f64;
            for k in 0..kf {
                zbar[wi][k] = if fs.0[k].is_idiosyncratic() { means_t[k] } else { zw[wi][k] };
            }
        }
        let pol = StepPolicy::at(&policy, t, t_end, d)?;
        let px = pol.shadow_weight();
        let shadow_map = if shadow_on {
            let mut sbar = vec![Vector::zeros(d); worlds];
            for (wi, sb) in sbar.iter_mut().enumerate() {
                for p in wi * npw..(wi + 1) * npw {
                    for i in 0..d {
                        sb[i] += xstar[p * d + i];
                    }
                }
                *sb /= npw as f64;
            }
            let Policy::Perturbed { law, .. } = policy else { unreachable!() };
            let opt = StepPolicy::at(&Policy::Law(law), t, t_end, d)?;
            let shift: Vec<f64> = sbar.iter().map(|v| px * v.sum()).collect();
            let zero = vec![0.0; worlds];
            Some((StepMap::build(prob, t, dt, &opt, &sbar, &zbar, &zemp, &zero), shift))
        } else {
            None
        };
        let shift = match &shadow_map {
            Some((_, sh)) => sh.clone(),
            None => vec![0.0; worlds],
        };
        let map = StepMap::build(prob, t, dt, &pol, &xbar, &zbar, &zemp, &shift);
        let n = map.n;

        if let Some(tr) = track.as_mut() {
            tr.t.push(t);
            for wi in 0..worlds {
                let mut var = vec![0.0; d];
                for p in wi * npw..(wi + 1) * npw {
                    for i in 0..d {
                        var[i] += (x[p * d + i] - xbar[wi][i]).powi(2);
                    }
                }
                tr.mean[wi].extend(xbar[wi].iter());
                tr.sd[wi].extend(var.iter().map(|v| (v / (npw as f64 - 1.0)).sqrt()));
                tr.factors[wi].extend(zbar[wi].iter());
            }
        }

        // S_t, or the terminal J_i, per particle.
        let wnode = match (is_record, w) {
            (true, Some(wf)) if !(last && finite) => Some(wf.at(t)?),
            _ => None,
        };
        let wflat = if last && finite {
            Some((Flat::of(&s.p), Flat::of(&prob.ph), FlatAff::of(&s.l.at(t)), 0.0))
        } else {
            wnode
                .as_ref()
                .map(|n| (Flat::of(&n.k), Flat::of(&n.lambda), FlatAff::of(&n.y), n.r))
        };
        if let Some((kk, ll, yy, rr)) = &wflat {
            let xb: Vec<Vec<f64>> = xbar.iter().map(|v| v.iter().copied().collect()).collect();
            let lq: Vec<f64> = xb.iter().map(|v| ll.quad(v, v)).collect();
            sval.par_iter_mut()
                .enumerate()
                .with_min_len(MIN_LEN)
                .for_each_init(
                    || vec![0.0; d],
                    |dx, (p, sv)| {
                        let wi = p / npw;
                        let xs = &x[p * d..(p + 1) * d];
                        for ((o, a), b) in dx.iter_mut().zip(xs).zip(&xb[wi]) {
                            *o = a - b;
                        }
                        let wv = kk.quad(dx, dx) + lq[wi] + 2.0 * yy.dot(&z[p * kz..(p + 1) * kz], xs) + rr;
                        *sv = cost[p] + disc * wv;
                    },
                );
        }

        if is_record {
            let mut mb = vec![vec![0.0; d]; nb];
            let mut ab = vec![vec![0.0; m]; nb];
            let mut sb = vec![0.0; nb];
            let mut mean = vec![0.0; d];
            let mut sq_sum = 0.0;
            let mut v = vec![0.0; n];
            for p in 0..ntot {
                let b = batch_of_particle(p);
                let xs = &x[p * d..(p + 1) * d];
                let extra = if shadow_on { px * xstar[p * d..(p + 1) * d].iter().sum::<f64>() } else { 0.0 };
                map.load(&map.worlds[p / npw], xs, &z[p * kz..(p + 1) * kz], extra, &mut v);
                for (i, xv) in xs.iter().enumerate() {
                    mb[b][i] += xv;
                    mean[i] += xv;
                    sq_sum += xv * xv;
                }
                for r in 0..m {
                    ab[b][r] += v[map.nxz + r];
                }
                sb[b] += sval[p];
            }
            let nt = ntot as f64;
            let mut cov_trace = sq_sum / nt;
            for v in mean.iter_mut() {
                *v /= nt;
                cov_trace -= *v * *v;
            }
            let col = |bm: &Vec<Vec<f64>>, i: usize| -> (f64, f64) {
                batch_stats(&bm.iter().map(|r| r[i] / per_batch).collect::<Vec<_>>())
            };
            let has_s = wflat.is_some();
            let s_batches: Vec<f64> = if has_s { sb.iter().map(|v| v / per_batch).collect() } else { vec![] };
            let (s_mean, s_se) = if has_s {
                let (a, b) = batch_stats(&s_batches);
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            records.push(Record {
                t,
                mean,
                mean_se: (0..d).map(|i| col(&mb, i).1).collect(),
                cov_trace,
                mean_control: (0..m).map(|r| col(&ab, r).0).collect(),
                mean_control_se: (0..m).map(|r| col(&ab, r).1).collect(),
                s_mean,
                s_se,
                s_batches,
            });
        }
        if last {
            break;
        }

        // Cost increment and Euler step.
        let want_fabs = j + 1 == steps;
        let pass = EulerPass {
            map: &map,
            shadow: shadow_map.as_ref().map(|(m, _)| Shadow { map: m, px }),
            usz,
            npw,
            kz,
            nd,
            idio: &idio,
            driven: &driven,
            trans: &trans,
            cdt: disc * dt,
            disc,
            want_fabs,
        };
        let bufs = (&mut x[..], &mut xstar[..], &mut z[..], &mut cost[..], &mut fabs[..], &mut rngs[..]);
        let unstable = match (d, n) {
            (1, 2) => pass.run(Fix::<1, 2>, bufs),
            (1, 3) => pass.run(Fix::<1, 3>, bufs),
            (1, 4) => pass.run(Fix::<1, 4>, bufs),
            (2, 4) => pass.run(Fix::<2, 4>, bufs),
            (2, 5) => pass.run(Fix::<2, 5>, bufs),
            (2, 6) => pass.run(Fix::<2, 6>, bufs),
            _ => pass.run(Dyn(d, n), bufs),
        };
        if unstable {
            return Err(LqError::Unstable { step: j + 1, t: t + dt });
        }
        for (wi, rng) in world_rngs.iter_mut().enumerate() {
            for &k in &common {
                let xi: f64 = StandardNormal.sample(rng);
                let (ta, tb, ts) = trans[k];
                zw[wi][k] = ta * zw[wi][k] + tb + ts * xi;
            }
        }
        if want_fabs {
            last_fabs = fabs.iter().sum::<f64>() / ntot as f64;
        }
    }
    let j_batches = match records.last() {
        Some(r) if finite => r.s_batches.clone(),
        _ => {
            let mut b = vec![0.0; nb];
            for (p, c) in cost.iter().enumerate() {
                b[batch_of_particle(p)] += c;
            }
            b.iter().map(|v| v / per_batch).collect()
        }
    };
    let tail_bound = if finite { 0.0 } else { last_fabs / rho.max(1e-300) };
    Ok(ParticleEnsemble {
        particles_per_world: npw,
        worlds,
        steps,
        dt,
        t_end,
        batches: nb,
        records,
        j_batches,
        tail_bound,
        final_states: x,
        world_track: track,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TracePoint {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationResult {
    pub kind: Perturbation,
    pub eps: f64,
    pub j: f64,
    pub gap: f64,
    pub gap_se: f64,
    pub gap_ok: bool,
    pub slope: f64,
    pub slope_se: f64,
    pub slope_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExponentFit {
    pub kind: Perturbation,
    pub exponent: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub value: f64,
    pub j_mc: f64,
    pub j_se: f64,
    pub tail_bound: f64,
    pub value_ok: bool,
    pub se_ok: bool,
    pub s_trace: Vec<TracePoint>,
    pub s_max_dev: f64,
    pub s_max_se: f64,
    pub trace_ok: bool,
    pub perturbations: Vec<PerturbationResult>,
    pub exponents: Vec<ExponentFit>,
    pub monotonicity_verdict: bool,
    pub pass: bool,
    #[serde(skip)]
    pub perturbation_traces: Vec<Vec<TracePoint>>,
}

impl DiagnosticsReport {
    /// Rows: t, then E[S_t] and SE for α* and every perturbed control.
    pub fn trace_csv(&self) -> String {
        let mut header = vec!["t".to_string(), "S_opt".into(), "se_opt".into()];
        for p in &self.perturbations {
            let tag = format!("{}_{}", serde_json::to_value(p.kind).unwrap().as_str().unwrap_or("p"), p.eps);
            header.push(format!("S_{tag}"));
            header.push(format!("se_{tag}"));
        }
        let rows: Vec<Vec<f64>> = self
            .s_trace
            .iter()
            .enumerate()
            .map(|(i, tp)| {
                let mut r = vec![tp.t, tp.mean, tp.se];
                for tr in &self.perturbation_traces {
                    r.push(tr[i].mean);
                    r.push(tr[i].se);
                }
                r
            })
            .collect();
        crate::io::csv(&header, &rows)
    }
}

fn trace_of(ens: &ParticleEnsemble) -> Vec<TracePoint> {
    ens.records
        .iter()
        .filter_map(|r| {
            Some(TracePoint {
                t: r.t,
                mean: r.s_mean?,
                se: r.s_se?,
            })
        })
        .collect()
}

/// OLS slope of y on t.
fn slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let num: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let den: f64 = t.iter().map(|a| (a - tm).powi(2)).sum();
    num / den
}

/// Slope of E[S_t] in t with a batch standard error.
fn trace_slope(ens: &ParticleEnsemble) -> (f64, f64) {
    let recs: Vec<&Record> = ens.records.iter().filter(|r| r.s_mean.is_some()).collect();
    let t: Vec<f64> = recs.iter().map(|r| r.t).collect();
    let y: Vec<f64> = recs.iter().map(|r| r.s_mean.unwrap()).collect();
    let per_batch: Vec<f64> = (0..ens.batches)
        .map(|b| slope(&t, &recs.iter().map(|r| r.s_batches[b]).collect::<Vec<_>>()))
        .collect();
    (slope(&t, &y), batch_stats(&per_batch).1)
}

pub const DEFAULT_EPS: [f64; 3] = [0.1, 0.2, 0.4];

/// Weak martingale check: E[S_t] flat under α*, nondecreasing and with a
/// nonnegative, quadratically growing cost gap under perturbed controls.
/// All runs share the seed, so gaps use common random numbers.
pub fn martingale_diagnostic(
    prob: &CanonicalProblem,
    bundle: Option<&LawBundle>,
    cfg: &SimConfig,
    eps: &[f64],
) -> Result<DiagnosticsReport> {
    let bundle = bundle.ok_or(LqError::BackwardSolutionMissing)?;
    let law = &bundle.law;
    let opt = simulate(prob, Policy::Law(law), cfg, Some(&bundle.w))?;
    let (j_mc, j_se) = estimate_cost(&opt);
    let s_trace = trace_of(&opt);
    let s0 = s_trace[0].mean;
    let s_max_dev = s_trace.iter().map(|p| (p.mean - s0).abs()).fold(0.0, f64::max);
    let s_max_se = s_trace.iter().map(|p| p.se).fold(0.0, f64::max);
    let trace_ok = s_max_dev <= 3.0 * s_max_se;
    let value = bundle.value;
    let value_ok = (j_mc - value).abs() <= 3.0 * j_se + opt.tail_bound;
    let se_ok = j_se <= 0.005 * (value.abs() + 1.0);

    let mut perturbations = Vec::new();
    let mut traces = Vec::new();
    let mut exponents = Vec::new();
    let kinds: &[Perturbation] = if eps.is_empty() { &[] } else { &Perturbation::ALL };
    for &kind in kinds {
        let mut gaps = Vec::new();
        for &e in eps {
            let ens = simulate(prob, Policy::Perturbed { law, kind, eps: e }, cfg, Some(&bundle.w))?;
            let diffs: Vec<f64> = ens.j_batches.iter().zip(&opt.j_batches).map(|(a, b)| a - b).collect();
            let (gap, gap_se) = batch_stats(&diffs);
            let (sl, sl_se) = trace_slope(&ens);
            gaps.push(gap);
            perturbations.push(PerturbationResult {
                kind,
                eps: e,
                j: estimate_cost(&ens).0,
                gap,
                gap_se,
                gap_ok: gap >= -3.0 * gap_se,
                slope: sl,
                slope_se: sl_se,
                slope_ok: sl >= -3.0 * sl_se,
            });
            traces.push(trace_of(&ens));
        }
        let exponent = if gaps.iter().all(|g| *g > 0.0) && eps.len() >= 2 {
            let le: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
            let lg: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
            slope(&le, &lg)
        } else {
            f64::NAN
        };
        exponents.push(ExponentFit {
            kind,
            exponent,
            ok: (1.7..=2.3).contains(&exponent),
        });
    }
    let monotonicity_verdict = perturbations.iter().all(|p| p.gap_ok && p.slope_ok);
    let pass = value_ok
        && se_ok
        && trace_ok
        && monotonicity_verdict
        && exponents.iter().all(|e| e.ok);
    Ok(DiagnosticsReport {
        value,
        j_mc,
        j_se,
        tail_bound: opt.tail_bound,
        value_ok,
        se_ok,
        s_trace,
        s_max_dev,
        s_max_se,
        trace_ok,
        perturbations,
        exponents,
        monotonicity_verdict,
        pass,
        perturbation_traces: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{solve, SolveOptions};
    use crate::linalg::Vector;
    use crate::model::{canonicalize, AffineProc, Horizon, InitialLaw, ProblemSpec};

    fn scalar(t: f64) -> ProblemSpec {
        let mut s = ProblemSpec::zeros(1, 1, Horizon::finite(t, 0.0));
        s.n = TimeMat::scalar(1.0);
        s
    }

    fn cfg(n: usize, dt: f64) -> SimConfig {
        SimConfig {
            particles: n,
            dt,
            seed: 11,
            ..Default::default()
        }
    }

    fn zero_control() -> TimeMat {
        TimeMat::zeros(1, 1)
    }

    #[test]
    fn zero_dynamics_keep_the_initial_point() {
        let mut s = scalar(1.0);
        s.x0 = InitialLaw::Point(Vector::from_element(1, 0.7));
        let p = canonicalize(&s).unwrap();
        let a = zero_control();
        let ens = simulate(&p, Policy::OpenLoop(&a), &cfg(100, 0.1), None).unwrap();
        assert!(ens.final_states.iter().all(|x| *x == 0.7));
        assert_eq!(estimate_cost(&ens), (0.0, 0.0));
    }

    #[test]
    fn noiseless_path_matches_ode() {
        let mut s = scalar(1.0);
        s.b = TimeMat::scalar(-0.5);
        s.beta = AffineProc::constant(Vector::from_element(1, 1.0), 0);
        s.x0 = InitialLaw::Point(Vector::from_element(1, 2.0));
        let p = canonicalize(&s).unwrap();
        let a = zero_control();
        let exact = 2.0;
        let ens = simulate(&p, Policy::OpenLoop(&a), &cfg(4, 0.01), None).unwrap();
        assert!((ens.final_states[0] - exact).abs() < 1e-12);
        s.x0 = InitialLaw::Point(Vector::from_element(1, 0.0));
        let p = canonicalize(&s).unwrap();
        let ens = simulate(&p, Policy::OpenLoop(&a), &cfg(4, 0.01), None).unwrap();
        let exact = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((ens.final_states[0] - exact).abs() < 0.01);
    }

    #[test]
    fn mean_field_drift_grows_like_exp() {
        let mut s = scalar(1.0);
        s.bt = TimeMat::scalar(1.0);
        s.x0 = InitialLaw::Point(Vector::from_element(1, 1.0));
        let p = canonicalize(&s).unwrap();
        let a = zero_control();
        let dt = 1e-3;
        let ens = simulate(&p, Policy::OpenLoop(&a), &cfg(10, dt), None).unwrap();
        let last = ens.records.last().unwrap();
        let e = 1f64.exp();
        assert!((last.mean[0] - e).abs() / e < 2.0 * dt);
    }

    #[test]
    fn constant_cost_integrates_exactly() {
        // f = 2Mx with x ≡ 1/2 and M = 1: f = 1, J = T.
        let mut s = scalar(1.0);
        s.mc = AffineProc::constant(Vector::from_element(1, 1.0), 0);
        s.x0 = InitialLaw::Point(Vector::from_element(1, 0.5));
        let p = canonicalize(&s).unwrap();
        let a = zero_control();
        let ens = simulate(&p, Policy::OpenLoop(&a), &cfg(10, 0.01), None).unwrap();
        let (j, se) = estimate_cost(&ens);
        assert!((j - 1.0).abs() < 1e-12);
        assert!(se < 1e-12);
    }

    #[test]
    fn euler_cost_error_is_first_order() {
        // Noiseless: dx = −x dt + a dt with a = 0, cost x², exact ∫e^{−2t} = (1 − e^{−2})/2.
        let mut s = scalar(1.0);
        s.b = TimeMat::scalar(-1.0);
        s.q = TimeMat::scalar(1.0);
        s.x0 = InitialLaw::Point(Vector::from_element(1, 1.0));
        let p = canonicalize(&s).unwrap();
        let a = zero_control();
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        let err = |dt: f64| {
            let ens = simulate(&p, Policy::OpenLoop(&a), &cfg(4, dt), None).unwrap();
            (estimate_cost(&ens).0 - exact).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn seed_determinism() {
        let mut s = scalar(1.0);
        s.drivers[0].d = TimeMat::scalar(0.3);
        s.drivers[0].gamma = AffineProc::constant(Vector::from_element(1, 0.2), 0);
        s.q = TimeMat::scalar(1.0);
        s.x0 = InitialLaw::Gaussian {
            mean: Vector::from_element(1, 1.0),
            cov: Mat::from_element(1, 1, 0.1),
        };
        let sol = solve(&s, &SolveOptions { grid_steps: 100, ..Default::default() }).unwrap();
        let p = &sol.prob;
        let c = cfg(200, 0.01);
        let b = sol.bundle("h");
        let r1 = martingale_diagnostic(p, Some(&b), &c, &DEFAULT_EPS).unwrap();
        let r2 = martingale_diagnostic(p, Some(&b), &c, &DEFAULT_EPS).unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert_eq!(r1.trace_csv(), r2.trace_csv());
        let c3 = SimConfig { seed: 12, ..c };
        let r3 = martingale_diagnostic(p, Some(&b), &c3, &DEFAULT_EPS).unwrap();
        assert_ne!(r1.j_mc, r3.j_mc);
    }

    #[test]
    fn perturbation_gaps_are_exactly_quadratic() {
        // Common random numbers make every gap an exact quadratic in ε.
        let mut s = scalar(1.0);
        s.b = TimeMat::scalar(0.2);
        s.bt = TimeMat::scalar(-0.4);
        s.c = TimeMat::scalar(1.0);
        s.drivers[0].d = TimeMat::scalar(0.3);
        s.q = TimeMat::scalar(1.0);
        s.qt = TimeMat::scalar(0.5);
        s.p = Mat::from_element(1, 1, 1.0);
        s.x0 = InitialLaw::Gaussian {
            mean: Vector::from_element(1, 1.0),
            cov: Mat::from_element(1, 1, 0.2),
        };
        let sol = solve(&s, &SolveOptions { grid_steps: 100, ..Default::default() }).unwrap();
        let c = cfg(64, 0.01);
        let j = |pol: Policy| estimate_cost(&simulate(&sol.prob, pol, &c, None).unwrap()).0;
        let j0 = j(Policy::Law(&sol.law));
        for kind in Perturbation::ALL {
            let g1 = j(Policy::Perturbed { law: &sol.law, kind, eps: 0.1 }) - j0;
            let g2 = j(Policy::Perturbed { law: &sol.law, kind, eps: 0.2 }) - j0;
            let g3 = j(Policy::Perturbed { law: &sol.law, kind, eps: -0.1 }) - j0;
            // g(ε) = aε + bε² with a ≈ 0 only up to discretization.
            let b = (g1 + g3) / (2.0 * 0.01);
            let a = (g1 - g3) / 0.2;
            assert!((g2 - (0.2 * a + 0.04 * b)).abs() < 1e-10 * (1.0 + g2.abs()), "{kind:?}");
            assert!(b > 0.0);
        }
    }

    #[test]
    fn missing_backward_solution() {
        let p = canonicalize(&scalar(1.0)).unwrap();
        assert_eq!(
            martingale_diagnostic(&p, None, &cfg(10, 0.1), &DEFAULT_EPS).unwrap_err(),
            LqError::BackwardSolutionMissing
        );
    }

    #[test]
    fn zero_problem_trace_is_zero() {
        let s = scalar(1.0);
        let sol = solve(&s, &SolveOptions { grid_steps: 20, ..Default::default() }).unwrap();
        let ens = simulate(&sol.prob, Policy::Law(&sol.law), &cfg(10, 0.05), Some(&sol.w)).unwrap();
        assert!(ens.records.iter().all(|r| r.s_mean == Some(0.0)));
    }

    #[test]
    fn unstable_system_is_reported() {
        let mut s = scalar(1.0);
        s.b = TimeMat::scalar(100.0);
        s.x0 = InitialLaw::Point(Vector::from_element(1, 1.0));
        let p = canonicalize(&s).unwrap();
        let a = zero_control();
        let err = simulate(&p, Policy::OpenLoop(&a), &cfg(4, 0.1), None).unwrap_err();
        assert!(matches!(err, LqError::Unstable { .. }));
    }

    #[test]
    fn config_validation() {
        let p = canonicalize(&scalar(1.0)).unwrap();
        let a = zero_control();
        for c in [
            SimConfig { particles: 1, antithetic: false, ..cfg(1, 0.1) },
            SimConfig { particles: 3, ..cfg(3, 0.1) },
            SimConfig { dt: 0.0, ..cfg(4, 0.1) },
            SimConfig { worlds: 2, ..cfg(4, 0.1) },
            SimConfig { t_sim: Some(2.0), ..cfg(4, 0.1) },
        ] {
            assert!(matches!(
                simulate(&p, Policy::OpenLoop(&a), &c, None),
                Err(LqError::InvalidParams(_))
            ));
        }
    }

    #[test]
    fn antithetic_pairs_mirror_noise() {
        let mut s = scalar(1.0);
        s.drivers[0].gamma = AffineProc::constant(Vector::from_element(1, 1.0), 0);
        let p = canonicalize(&s).unwrap();
        let a = zero_control();
        let ens = simulate(&p, Policy::OpenLoop(&a), &cfg(8, 0.1), None).unwrap();
        for pair in ens.final_states.chunks(2) {
            assert!((pair[0] + pair[1]).abs() < 1e-12);
        }
    }
}
