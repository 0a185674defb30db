//! Gauss–Hermite quadrature for Gaussian expectations.
//!
//! Nodes and weights come from the Golub–Welsch eigenproblem of the
//! probabilists' Hermite recurrence, so `expect(f)` approximates `E[f(Z)]`
//! for `Z ~ N(0, 1)` and is exact for polynomials of degree `< 2n`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::stats::psd_factor;

#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("quadrature needs at least one node"));
        }
        let mut jacobi = DMatrix::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize to remove eigen-solver round-off.
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let j = n - 1 - i;
            nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
            weights[i] = 0.5 * (pairs[i].1 + pairs[j].1);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(GaussHermite { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(Z)]` for standard normal `Z`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(z, w)| w * f(*z)).sum()
    }

    /// `E[f(X)]` for `X ~ N(mean, cov)` by tensor-product quadrature.
    ///
    /// `f` writes `m` outputs into its second argument; the result has length `m`.
    /// Cost is `n^p` evaluations, so keep `p` small.
    pub fn expect_gaussian(
        &self,
        mean: &[f64],
        cov: &DMatrix<f64>,
        outputs: usize,
        mut f: impl FnMut(&[f64], &mut [f64]),
    ) -> Result<Vec<f64>> {
        let p = mean.len();
        check_dim(p, cov.nrows())?;
        check_dim(p, cov.ncols())?;
        let factor = psd_factor(cov)?;
        let n = self.nodes.len();
        let total = n.pow(p as u32);
        let mut acc = vec![0.0; outputs];
        let mut buf = vec![0.0; outputs];
        let mut z = vec![0.0; p];
        let mut x = vec![0.0; p];
        for idx in 0..total {
            let mut rest = idx;
            let mut w = 1.0;
            for zk in z.iter_mut() {
                let k = rest % n;
                rest /= n;
                *zk = self.nodes[k];
                w *= self.weights[k];
            }
            for i in 0..p {
                x[i] = mean[i] + (0..p).map(|j| factor[(i, j)] * z[j]).sum::<f64>();
            }
            f(&x, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += w * b;
            }
        }
        Ok(acc)
    }
}
