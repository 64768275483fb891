//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{LqError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative eigenvalue floor below which S or S-hat counts as singular.
pub const PD_RELATIVE_FLOOR: f64 = 1e-12;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn sym_eigs(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut v: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub fn min_eig(m: &Mat) -> f64 {
    sym_eigs(m).first().copied().unwrap_or(f64::INFINITY)
}

pub fn max_eig(m: &Mat) -> f64 {
    sym_eigs(m).last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// True when the symmetric part of `m` has λ_min ≥ floor·λ_max and λ_max > 0.
pub fn is_pd(m: &Mat) -> bool {
    let e = sym_eigs(m);
    match (e.first(), e.last()) {
        (Some(&lo), Some(&hi)) => hi > 0.0 && lo >= PD_RELATIVE_FLOOR * hi && lo > 0.0,
        _ => true,
    }
}

pub enum Which {
    S,
    Shat,
}

pub fn pd_inverse(m: &Mat, t: f64, which: Which) -> Result<Mat> {
    let fail = || match which {
        Which::S => LqError::SingularS { t },
        Which::Shat => LqError::SingularShat { t },
    };
    if !m.iter().all(|x| x.is_finite()) || !is_pd(m) {
        return Err(fail());
    }
    let inv = symmetrize(m).try_inverse().ok_or_else(fail)?;
    Ok(symmetrize(&inv))
}

pub fn op_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest real part of the spectrum.
pub fn min_real_part(m: &Mat) -> f64 {
    -spectral_abscissa(&(-m))
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Mat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for p in 0..br {
                for q in 0..bc {
                    out[(i * br + p, j * bc + q)] = aij * b[(p, q)];
                }
            }
        }
    }
    out
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Row-major flattening, used for CSV and the C interface.
pub fn flatten_rows(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_matches_definition() {
        let a = from_rows(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = from_rows(1, 2, &[0.0, 1.0]);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (2, 4));
        assert_eq!(flatten_rows(&k), vec![0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0]);
    }

    #[test]
    fn pd_inverse_rejects_indefinite() {
        let m = from_rows(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(pd_inverse(&m, 0.5, Which::S).is_err());
        let m = from_rows(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let inv = pd_inverse(&m, 0.0, Which::S).unwrap();
        assert!((inv[(1, 1)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn spectral_abscissa_of_rotation_generator() {
        let m = from_rows(2, 2, &[-1.0, 3.0, -3.0, -1.0]);
        assert!((spectral_abscissa(&m) + 1.0).abs() < 1e-12);
        assert!((min_real_part(&m) + 1.0).abs() < 1e-12);
    }
}
