//! JSON ingestion. Schema reference: docs/spec-schema.md.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{
    AffineProc, Binding, DriverBlock, Factor, Factors, Horizon, InitialLaw, Objective,
    ProblemSpec, TimeMat,
};
use crate::error::{LqError, Result};
use crate::linalg::{Mat, Vector};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    dimensions: Dims,
    horizon: HorizonDoc,
    #[serde(default)]
    objective: Objective,
    #[serde(default)]
    common_noise: bool,
    #[serde(default)]
    factors: Vec<FactorDoc>,
    #[serde(default)]
    drift: DriftDoc,
    #[serde(default)]
    diffusion: Vec<DiffusionDoc>,
    #[serde(default)]
    cost: CostDoc,
    x0: X0Doc,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Dims {
    d: usize,
    m: usize,
    #[serde(default = "one")]
    n: usize,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum HorizonDoc {
    Finite {
        #[serde(rename = "T")]
        t: f64,
        #[serde(default)]
        rho: f64,
    },
    Infinite {
        rho: f64,
    },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum FactorKind {
    Ou {
        kappa: f64,
        level: f64,
        vol: f64,
        initial: f64,
    },
    Brownian {
        #[serde(default = "unit")]
        vol: f64,
        #[serde(default)]
        initial: f64,
    },
}

fn unit() -> f64 {
    1.0
}

#[derive(Deserialize)]
struct FactorDoc {
    name: String,
    #[serde(flatten)]
    kind: FactorKind,
    #[serde(default = "idio")]
    binding: Binding,
}

fn idio() -> Binding {
    Binding::Idiosyncratic
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StaticMat {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatDoc {
    Static(StaticMat),
    Pwl { grid: Vec<f64>, values: Vec<StaticMat> },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StaticVec {
    Scalar(f64),
    Flat(Vec<f64>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VecDoc {
    Static(StaticVec),
    Pwl { grid: Vec<f64>, values: Vec<StaticVec> },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProcDoc {
    Affine {
        #[serde(default)]
        base: Option<VecDoc>,
        loadings: BTreeMap<String, StaticVec>,
    },
    Plain(VecDoc),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DriftDoc {
    beta: Option<ProcDoc>,
    #[serde(rename = "B")]
    b: Option<MatDoc>,
    #[serde(rename = "Btilde")]
    bt: Option<MatDoc>,
    #[serde(rename = "C")]
    c: Option<MatDoc>,
    #[serde(rename = "Ctilde")]
    ct: Option<MatDoc>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DiffusionDoc {
    gamma: Option<ProcDoc>,
    #[serde(rename = "D")]
    d: Option<MatDoc>,
    #[serde(rename = "Dtilde")]
    dt: Option<MatDoc>,
    #[serde(rename = "F")]
    f: Option<MatDoc>,
    #[serde(rename = "Ftilde")]
    ft: Option<MatDoc>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CostDoc {
    #[serde(rename = "Q")]
    q: Option<MatDoc>,
    #[serde(rename = "Qtilde")]
    qt: Option<MatDoc>,
    #[serde(rename = "N")]
    n: Option<MatDoc>,
    #[serde(rename = "Ntilde")]
    nt: Option<MatDoc>,
    #[serde(rename = "I")]
    i: Option<MatDoc>,
    #[serde(rename = "Itilde")]
    it: Option<MatDoc>,
    #[serde(rename = "M")]
    mc: Option<ProcDoc>,
    #[serde(rename = "H")]
    h: Option<ProcDoc>,
    #[serde(rename = "P")]
    p: Option<StaticMat>,
    #[serde(rename = "Ptilde")]
    pt: Option<StaticMat>,
    #[serde(rename = "L")]
    l: Option<ProcDoc>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum X0Doc {
    Point { mean: StaticVec },
    Gaussian { mean: StaticVec, cov: StaticMat },
}

fn dim_err(name: &str, msg: String) -> LqError {
    LqError::DimensionMismatch(format!("{name}: {msg}"))
}

fn static_mat(name: &str, s: &StaticMat, r: usize, c: usize) -> Result<Mat> {
    match s {
        StaticMat::Scalar(x) => {
            if r == 1 && c == 1 {
                Ok(Mat::from_element(1, 1, *x))
            } else if *x == 0.0 {
                Ok(Mat::zeros(r, c))
            } else {
                Err(dim_err(name, format!("scalar given for a {r}x{c} matrix")))
            }
        }
        StaticMat::Rows(rows) => {
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                return Err(dim_err(name, format!("expected {r}x{c} rows")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Ok(Mat::from_row_slice(r, c, &flat))
        }
    }
}

fn mat(name: &str, doc: &Option<MatDoc>, r: usize, c: usize) -> Result<TimeMat> {
    match doc {
        None => Ok(TimeMat::zeros(r, c)),
        Some(MatDoc::Static(s)) => Ok(TimeMat::Const(static_mat(name, s, r, c)?)),
        Some(MatDoc::Pwl { grid, values }) => {
            let vals = values
                .iter()
                .map(|v| static_mat(name, v, r, c))
                .collect::<Result<Vec<_>>>()?;
            TimeMat::pwl(grid.clone(), vals).map_err(|e| LqError::Invalid(format!("{name}: {e}")))
        }
    }
}

fn static_vec(name: &str, s: &StaticVec, r: usize) -> Result<Vector> {
    match s {
        StaticVec::Scalar(x) => {
            if r == 1 || *x == 0.0 {
                Ok(Vector::from_element(r, *x))
            } else {
                Err(dim_err(name, format!("scalar given for a {r}-vector")))
            }
        }
        StaticVec::Flat(v) => {
            if v.len() != r {
                return Err(dim_err(name, format!("expected length {r}, got {}", v.len())));
            }
            Ok(Vector::from_column_slice(v))
        }
    }
}

fn col(v: Vector) -> Mat {
    let r = v.len();
    Mat::from_column_slice(r, 1, v.as_slice())
}

fn vec_tm(name: &str, doc: &VecDoc, r: usize) -> Result<TimeMat> {
    match doc {
        VecDoc::Static(s) => Ok(TimeMat::Const(col(static_vec(name, s, r)?))),
        VecDoc::Pwl { grid, values } => {
            let vals = values
                .iter()
                .map(|v| static_vec(name, v, r).map(col))
                .collect::<Result<Vec<_>>>()?;
            TimeMat::pwl(grid.clone(), vals).map_err(|e| LqError::Invalid(format!("{name}: {e}")))
        }
    }
}

fn proc(name: &str, doc: &Option<ProcDoc>, r: usize, factors: &[Factor]) -> Result<AffineProc> {
    let k = factors.len();
    match doc {
        None => Ok(AffineProc::zeros(r, k)),
        Some(ProcDoc::Plain(v)) => Ok(AffineProc {
            base: vec_tm(name, v, r)?,
            load: Mat::zeros(r, k),
        }),
        Some(ProcDoc::Affine { base, loadings }) => {
            let base = match base {
                Some(v) => vec_tm(name, v, r)?,
                None => TimeMat::zeros(r, 1),
            };
            let mut load = Mat::zeros(r, k);
            for (fname, v) in loadings {
                let j = factors.iter().position(|f| &f.name == fname).ok_or_else(|| {
                    LqError::Invalid(format!("{name}: loading on unknown factor '{fname}'"))
                })?;
                load.set_column(j, &static_vec(name, v, r)?);
            }
            Ok(AffineProc { base, load })
        }
    }
}

fn factor(doc: &FactorDoc) -> Result<Factor> {
    let (kappa, level, vol, initial) = match doc.kind {
        FactorKind::Ou {
            kappa,
            level,
            vol,
            initial,
        } => {
            if !(kappa > 0.0) {
                return Err(LqError::Invalid(format!(
                    "factor '{}': OU process requires kappa > 0",
                    doc.name
                )));
            }
            (kappa, level, vol, initial)
        }
        FactorKind::Brownian { vol, initial } => (0.0, 0.0, vol, initial),
    };
    Ok(Factor {
        name: doc.name.clone(),
        kappa,
        level,
        vol,
        initial,
        binding: doc.binding,
    })
}

fn build(doc: Doc) -> Result<ProblemSpec> {
    let Dims { d, m, n } = doc.dimensions;
    if d == 0 || m == 0 || n == 0 {
        return Err(LqError::DimensionMismatch("d, m and n must be positive".into()));
    }
    let horizon = match doc.horizon {
        HorizonDoc::Finite { t, rho } => Horizon::finite(t, rho),
        HorizonDoc::Infinite { rho } => Horizon::infinite(rho),
    };
    let mut names = std::collections::BTreeSet::new();
    for f in &doc.factors {
        if !names.insert(f.name.as_str()) {
            return Err(LqError::Invalid(format!("duplicate factor name '{}'", f.name)));
        }
    }
    let factors = doc.factors.iter().map(factor).collect::<Result<Vec<_>>>()?;
    let fs = &factors;

    let diffusion = if doc.diffusion.is_empty() {
        (0..n).map(|_| DiffusionDoc::default()).collect()
    } else {
        doc.diffusion
    };
    if diffusion.len() != n {
        return Err(LqError::DimensionMismatch(format!(
            "dimensions.n = {n} but {} diffusion blocks given",
            diffusion.len()
        )));
    }
    let drivers = diffusion
        .iter()
        .enumerate()
        .map(|(idx, blk)| {
            Ok(DriverBlock {
                gamma: proc(&format!("gamma[{idx}]"), &blk.gamma, d, fs)?,
                d: mat(&format!("D[{idx}]"), &blk.d, d, d)?,
                dt: mat(&format!("Dtilde[{idx}]"), &blk.dt, d, d)?,
                f: mat(&format!("F[{idx}]"), &blk.f, d, m)?,
                ft: mat(&format!("Ftilde[{idx}]"), &blk.ft, d, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dr = &doc.drift;
    let co = &doc.cost;
    let pmat = |name: &str, s: &Option<StaticMat>| match s {
        None => Ok(Mat::zeros(d, d)),
        Some(s) => static_mat(name, s, d, d),
    };
    let x0 = match &doc.x0 {
        X0Doc::Point { mean } => InitialLaw::Point(static_vec("x0.mean", mean, d)?),
        X0Doc::Gaussian { mean, cov } => InitialLaw::Gaussian {
            mean: static_vec("x0.mean", mean, d)?,
            cov: static_mat("x0.cov", cov, d, d)?,
        },
    };
    let mut spec = ProblemSpec {
        d,
        m,
        horizon,
        b: mat("B", &dr.b, d, d)?,
        bt: mat("Btilde", &dr.bt, d, d)?,
        c: mat("C", &dr.c, d, m)?,
        ct: mat("Ctilde", &dr.ct, d, m)?,
        beta: proc("beta", &dr.beta, d, fs)?,
        drivers,
        q: mat("Q", &co.q, d, d)?,
        qt: mat("Qtilde", &co.qt, d, d)?,
        n: mat("N", &co.n, m, m)?,
        nt: mat("Ntilde", &co.nt, m, m)?,
        i: mat("I", &co.i, m, d)?,
        it: mat("Itilde", &co.it, m, d)?,
        mc: proc("M", &co.mc, d, fs)?,
        h: proc("H", &co.h, m, fs)?,
        p: pmat("P", &co.p)?,
        pt: pmat("Ptilde", &co.pt)?,
        l: proc("L", &co.l, d, fs)?,
        factors: Factors(factors),
        x0,
        common_noise: doc.common_noise,
        objective: doc.objective,
    };
    if spec.objective == Objective::Maximize {
        negate_costs(&mut spec);
    }
    spec.check()?;
    Ok(spec)
}

/// Turns a maximisation problem into the equivalent minimisation.
fn negate_costs(s: &mut ProblemSpec) {
    for tm in [&mut s.q, &mut s.qt, &mut s.n, &mut s.nt, &mut s.i, &mut s.it] {
        *tm = tm.scale(-1.0);
    }
    for p in [&mut s.mc, &mut s.h, &mut s.l] {
        *p = p.scale(-1.0);
    }
    s.p = -&s.p;
    s.pt = -&s.pt;
}

/// Parses a problem document. `source` names the input in error messages.
pub fn parse_problem(text: &str, source: &str) -> Result<ProblemSpec> {
    let doc: Doc = serde_json::from_str(text).map_err(|e| LqError::Parse {
        file: source.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    build(doc)
}

pub fn problem_from_file(path: &Path) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LqError::Io(format!("{}: {e}", path.display())))?;
    parse_problem(&text, &path.display().to_string())
}
