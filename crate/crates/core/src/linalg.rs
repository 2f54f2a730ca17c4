//! Dense least squares and small symmetric eigenproblems.
//!
//! The design matrices in this crate are tall and narrow (at most a few
//! hundred columns), so a hand-rolled Householder QR plus a one-sided Jacobi
//! SVD of the triangular factor covers every need without linking a LAPACK
//! backend: stable solves, singular values for collinearity detection, and a
//! minimum-norm solution when the design is rank deficient.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("design matrix is empty")]
    EmptyDesign,
    #[error("design has {rows} rows but {cols} columns; need rows >= cols")]
    Underdetermined { rows: usize, cols: usize },
    #[error("design has {rows} rows but response has {len}")]
    ShapeMismatch { rows: usize, len: usize },
}

/// Result of a least-squares solve.
#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub coefficients: Array1<f64>,
    pub residuals: Array1<f64>,
    /// Singular values of the design, descending.
    pub singular_values: Vec<f64>,
    /// Number of singular values above `rcond * max`.
    pub rank: usize,
    /// Upper-triangular factor of the design (k x k).
    r: Array2<f64>,
}

impl LeastSquaresFit {
    /// `(X'X)^{-1}`, valid when the fit is full rank.
    pub fn normal_matrix_inverse(&self) -> Array2<f64> {
        let rinv = invert_upper_triangular(&self.r);
        rinv.dot(&rinv.t())
    }

    /// Heteroskedasticity-robust (HC0) coefficient covariance.
    pub fn hc0_covariance(&self, design: ArrayView2<f64>) -> Array2<f64> {
        let k = design.ncols();
        let mut meat = Array2::<f64>::zeros((k, k));
        for (i, row) in design.outer_iter().enumerate() {
            let e2 = self.residuals[i] * self.residuals[i];
            for a in 0..k {
                for b in 0..k {
                    meat[(a, b)] += e2 * row[a] * row[b];
                }
            }
        }
        let bread = self.normal_matrix_inverse();
        bread.dot(&meat).dot(&bread)
    }
}

/// Least squares by Householder QR.
///
/// Singular values of the triangular factor decide rank: anything below
/// `rcond * sigma_max` counts as zero, and a rank-deficient design is solved
/// in the minimum-norm sense through the SVD pseudo-inverse.
pub fn least_squares(
    design: ArrayView2<f64>,
    response: ArrayView1<f64>,
    rcond: f64,
) -> Result<LeastSquaresFit, LinalgError> {
    let n = design.nrows();
    let k = design.ncols();
    if n == 0 || k == 0 {
        return Err(LinalgError::EmptyDesign);
    }
    if n < k {
        return Err(LinalgError::Underdetermined { rows: n, cols: k });
    }
    if response.len() != n {
        return Err(LinalgError::ShapeMismatch {
            rows: n,
            len: response.len(),
        });
    }

    let mut a = design.to_owned();
    let mut b = response.to_owned();

    // Householder triangularization, reflecting b alongside.
    for j in 0..k {
        let mut norm2 = 0.0;
        for i in j..n {
            norm2 += a[(i, j)] * a[(i, j)];
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue; // exactly zero column tail; R_jj stays 0
        }
        let alpha = if a[(j, j)] >= 0.0 { -norm } else { norm };
        let mut v = Array1::<f64>::zeros(n - j);
        for i in j..n {
            v[i - j] = a[(i, j)];
        }
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            let scale = 2.0 / vnorm2;
            for col in j..k {
                let mut dot = 0.0;
                for i in j..n {
                    dot += v[i - j] * a[(i, col)];
                }
                let f = scale * dot;
                for i in j..n {
                    a[(i, col)] -= f * v[i - j];
                }
            }
            let mut dot = 0.0;
            for i in j..n {
                dot += v[i - j] * b[i];
            }
            let f = scale * dot;
            for i in j..n {
                b[i] -= f * v[i - j];
            }
        }
        a[(j, j)] = alpha;
        for i in (j + 1)..n {
            a[(i, j)] = 0.0;
        }
    }

    let mut r = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            r[(i, j)] = a[(i, j)];
        }
    }
    let c = Array1::from_iter((0..k).map(|i| b[i]));

    let svd = jacobi_svd(&r);
    let sigma_max = svd.singular_values.first().copied().unwrap_or(0.0);
    let threshold = rcond * sigma_max;
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > threshold && s > 0.0)
        .count();

    let coefficients = if rank == k {
        solve_upper_triangular(&r, &c)
    } else {
        // Minimum-norm solution: V diag(1/sigma) U' c over the kept spectrum.
        let uc = svd.u.t().dot(&c);
        let mut scaled = Array1::<f64>::zeros(k);
        for j in 0..k {
            let s = svd.singular_values[j];
            if s > threshold && s > 0.0 {
                scaled[j] = uc[j] / s;
            }
        }
        svd.v.dot(&scaled)
    };

    let fitted = design.dot(&coefficients);
    let residuals = &response.to_owned() - &fitted;

    Ok(LeastSquaresFit {
        coefficients,
        residuals,
        singular_values: svd.singular_values,
        rank,
        r,
    })
}

struct SmallSvd {
    u: Array2<f64>,
    v: Array2<f64>,
    singular_values: Vec<f64>,
}

/// One-sided Jacobi SVD of a small square matrix.
fn jacobi_svd(m: &Array2<f64>) -> SmallSvd {
    let k = m.ncols();
    let mut b = m.clone();
    let mut v = Array2::<f64>::eye(k);
    let tol = 1e-14;

    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..k {
                    app += b[(i, p)] * b[(i, p)];
                    aqq += b[(i, q)] * b[(i, q)];
                    apq += b[(i, p)] * b[(i, q)];
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = t * cos;
                for i in 0..k {
                    let bp = b[(i, p)];
                    let bq = b[(i, q)];
                    b[(i, p)] = cos * bp - sin * bq;
                    b[(i, q)] = sin * bp + cos * bq;
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = cos * vp - sin * vq;
                    v[(i, q)] = sin * vp + cos * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| b[(i, j)] * b[(i, j)]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &bb| norms[bb].partial_cmp(&norms[a]).unwrap());

    let mut u = Array2::<f64>::zeros((k, k));
    let mut vv = Array2::<f64>::zeros((k, k));
    let mut singular_values = Vec::with_capacity(k);
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        singular_values.push(s);
        for i in 0..k {
            u[(i, slot)] = if s > 0.0 { b[(i, j)] / s } else { 0.0 };
            vv[(i, slot)] = v[(i, j)];
        }
    }
    SmallSvd {
        u,
        v: vv,
        singular_values,
    }
}

fn solve_upper_triangular(r: &Array2<f64>, c: &Array1<f64>) -> Array1<f64> {
    let k = r.ncols();
    let mut x = Array1::<f64>::zeros(k);
    for i in (0..k).rev() {
        let mut acc = c[i];
        for j in (i + 1)..k {
            acc -= r[(i, j)] * x[j];
        }
        x[i] = acc / r[(i, i)];
    }
    x
}

fn invert_upper_triangular(r: &Array2<f64>) -> Array2<f64> {
    let k = r.ncols();
    let mut inv = Array2::<f64>::zeros((k, k));
    for col in 0..k {
        let mut e = Array1::<f64>::zeros(k);
        e[col] = 1.0;
        let x = solve_upper_triangular(r, &e);
        for i in 0..k {
            inv[(i, col)] = x[i];
        }
    }
    inv
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method, descending.
pub fn symmetric_eigenvalues(m: ArrayView2<f64>) -> Vec<f64> {
    let k = m.ncols();
    assert_eq!(k, m.nrows(), "matrix must be square");
    let mut a = m.to_owned();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..k {
            for q in (p + 1)..k {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() < 1e-12 * (1.0 + frobenius(&a)) {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                if a[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = t * cos;
                for i in 0..k {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = cos * aip - sin * aiq;
                    a[(i, q)] = sin * aip + cos * aiq;
                }
                for i in 0..k {
                    let api = a[(p, i)];
                    let aqi = a[(q, i)];
                    a[(p, i)] = cos * api - sin * aqi;
                    a[(q, i)] = sin * api + cos * aqi;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..k).map(|i| a[(i, i)]).collect();
    eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eigs
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
