use serde::{Deserialize, Serialize};

use crate::error::{Result, VadeError};

/// Symmetric matrix stored as its packed upper triangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    fn idx(dim: usize, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * dim - i * (i + 1) / 2 + j
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds from a row-major square matrix, averaging `(a + aᵀ) / 2`.
    pub fn from_full_symmetrized(full: &[f64], dim: usize) -> Result<Self> {
        if full.len() != dim * dim {
            return Err(VadeError::Shape(format!(
                "expected {dim}x{dim} matrix, got {} values",
                full.len()
            )));
        }
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                m.set(i, j, 0.5 * (full[i * dim + j] + full[j * dim + i]));
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[Self::idx(self.dim, i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = Self::idx(self.dim, i, j);
        self.data[k] = v;
    }

    pub fn to_full(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.to_full().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_ridge(&mut self, eps: f64) {
        for i in 0..self.dim {
            let v = self.get(i, i);
            self.set(i, i, v + eps);
        }
    }

    /// Dense product `self * other`, returned row-major.
    pub fn matmul_full(&self, other: &[f64]) -> Vec<f64> {
        matmul(&self.to_full(), other, self.dim)
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues and a row-major matrix whose columns are the
/// corresponding unit eigenvectors.
pub fn eigh(m: &SymMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.dim();
    let mut a = m.to_full();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i * n + i]).collect();
    (vals, v)
}

/// Principal square root of a positive semi-definite matrix.
///
/// Eigenvalues in `[-1e-8 * max_eig, 0)` are treated as round-off and
/// clamped to zero; anything more negative is rejected.
pub fn psd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let n = m.dim();
    let (vals, vecs) = eigh(m);
    let max_eig = vals.iter().cloned().fold(0.0f64, f64::max);
    let min_eig = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = 1e-8 * max_eig;
    if n > 0 && min_eig < -tol {
        return Err(VadeError::NotPsd { min_eig, tol });
    }
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n)
                .map(|k| vecs[i * n + k] * roots[k] * vecs[j * n + k])
                .sum();
            out.set(i, j, s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn rel_frob(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let n: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / n.max(1e-300)
    }

    fn random_gram(n: usize, rows: usize, seed: u64) -> SymMatrix {
        let mut rng = SeededRng::new(seed);
        let a: Vec<f64> = (0..rows * n).map(|_| rng.normal()).collect();
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = (0..rows).map(|r| a[r * n + i] * a[r * n + j]).sum();
            }
        }
        SymMatrix::from_full_symmetrized(&g, n).unwrap()
    }

    #[test]
    fn eigh_reconstructs() {
        let m = random_gram(12, 20, 3);
        let (vals, v) = eigh(&m);
        let n = 12;
        let mut rec = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                rec[i * n + j] = (0..n).map(|k| v[i * n + k] * vals[k] * v[j * n + k]).sum();
            }
        }
        assert!(rel_frob(&rec, &m.to_full()) < 1e-9);
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        assert_eq!(
            psd_sqrt(&SymMatrix::identity(4)).unwrap(),
            SymMatrix::identity(4)
        );
        let s = psd_sqrt(&SymMatrix::from_diag(&[4.0, 9.0])).unwrap();
        assert!((s.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 3.0).abs() < 1e-15);
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn sqrt_squares_back() {
        for (n, rows, seed) in [(5, 8, 1), (16, 16, 2), (32, 10, 3)] {
            let m = random_gram(n, rows, seed);
            let s = psd_sqrt(&m).unwrap();
            let sq = s.matmul_full(&s.to_full());
            assert!(rel_frob(&sq, &m.to_full()) < 1e-8, "n={n}");
        }
    }

    #[test]
    fn sqrt_of_square_is_identity_map() {
        let s = psd_sqrt(&random_gram(8, 12, 9)).unwrap();
        let sq = SymMatrix::from_full_symmetrized(&s.matmul_full(&s.to_full()), 8).unwrap();
        let back = psd_sqrt(&sq).unwrap();
        assert!(rel_frob(&back.to_full(), &s.to_full()) < 1e-8);
    }

    #[test]
    fn rejects_indefinite() {
        let m = SymMatrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(psd_sqrt(&m), Err(VadeError::NotPsd { .. })));
        // Round-off sized negatives are clamped.
        let m = SymMatrix::from_diag(&[1.0, -1e-12]);
        assert_eq!(psd_sqrt(&m).unwrap().get(1, 1), 0.0);
    }
}
