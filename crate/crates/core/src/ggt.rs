//! GGT full-matrix AdaGrad preconditioning through the `m × m` Gram matrix.
//!
//! With `S = G Gᵀ = W Σ² Wᵀ`, the columns `U_j = Gᵀ W_j / σ_j` are an
//! orthonormal basis of the gradient span and `(Σ g gᵀ)^{1/2} = U Σ Uᵀ`, so
//!
//! ```text
//! (εI + (Σ g gᵀ)^{1/2})⁻¹ x = x/ε + Σ_j [1/(σ_j + ε) − 1/ε] U_j (U_jᵀ x).
//! ```

use crate::compress::{Compressed, Densify};
use crate::error::{check_dim, EfcpError, Result};
use crate::linalg::{dot, sym_eig, DenseMatrix, EigenDecomposition};
use crate::window::GradientWindow;

/// Singular values below `τ · σ_max` are treated as zero.
pub const DEFAULT_SV_THRESHOLD: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct Ggt<W> {
    epsilon: f64,
    sv_threshold: f64,
    window: W,
    gram: DenseMatrix,
    eig: Option<EigenDecomposition>,
}

impl<W: GradientWindow> Ggt<W> {
    pub fn new(window: W, epsilon: f64) -> Result<Self> {
        Self::with_threshold(window, epsilon, DEFAULT_SV_THRESHOLD)
    }

    pub fn with_threshold(window: W, epsilon: f64, sv_threshold: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(EfcpError::Parameter {
                name: "eps",
                reason: format!("must be positive, got {epsilon}"),
            });
        }
        if !(0.0..1.0).contains(&sv_threshold) {
            return Err(EfcpError::Parameter {
                name: "sv_threshold",
                reason: format!("must be in [0, 1), got {sv_threshold}"),
            });
        }
        let m = window.capacity();
        Ok(Self {
            epsilon,
            sv_threshold,
            window,
            gram: DenseMatrix::zeros(m, m),
            eig: None,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn window(&self) -> &W {
        &self.window
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn eigen(&self) -> Option<&EigenDecomposition> {
        self.eig.as_ref()
    }

    pub fn update(&mut self, c: &Compressed) -> Result<()> {
        let insert = self.window.push(c)?;
        let delta = self.window.sp(&c.densify())?;
        let i = insert.row;
        for (j, &v) in delta.iter().enumerate() {
            self.gram[(i, j)] = v;
            self.gram[(j, i)] = v;
        }
        self.eig = Some(sym_eig(&self.gram)?);
        Ok(())
    }

    /// Retained `(σ_j, U_j)` pairs.
    pub fn spectrum(&self) -> Result<Vec<(f64, Vec<f64>)>> {
        let Some(eig) = &self.eig else {
            return Ok(Vec::new());
        };
        let sv: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
        let sv_max = sv.iter().copied().fold(0.0, f64::max);
        if sv_max == 0.0 {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (j, &s) in sv.iter().enumerate() {
            if s <= self.sv_threshold * sv_max {
                continue;
            }
            let w = eig.eigenvectors.column(j);
            let mut u = self.window.lcg(&w)?;
            u.iter_mut().for_each(|v| *v /= s);
            out.push((s, u));
        }
        Ok(out)
    }

    /// `(εI + (Σ g gᵀ)^{1/2})⁻¹ x` restricted to the retained spectrum.
    pub fn precondition(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("ggt precondition", self.window.dim(), x.len())?;
        let inv_eps = 1.0 / self.epsilon;
        let mut out: Vec<f64> = x.iter().map(|v| v * inv_eps).collect();
        for (s, u) in self.spectrum()? {
            let scale = (1.0 / (s + self.epsilon) - inv_eps) * dot(&u, x);
            for (o, ui) in out.iter_mut().zip(&u) {
                *o += scale * ui;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;
    use crate::window::DenseGradWindow;

    #[test]
    fn empty_window() {
        let g = Ggt::new(DenseGradWindow::new(3, 2).unwrap(), 0.5).unwrap();
        assert_eq!(g.precondition(&[1.0, -1.0]).unwrap(), vec![2.0, -2.0]);
    }

    #[test]
    fn single_gradient_query_itself() {
        let eps = 1e-3;
        let mut ggt = Ggt::new(DenseGradWindow::new(4, 3).unwrap(), eps).unwrap();
        let g = vec![1.0, 2.0, 2.0];
        ggt.update(&Compressed::Dense(g.clone())).unwrap();
        assert_eq!(ggt.gram()[(0, 0)], 9.0);
        assert_eq!(ggt.eigen().unwrap().eigenvalues[0], 9.0);
        let expected: Vec<f64> = g.iter().map(|v| v / (eps + 3.0)).collect();
        assert!(relative_error(&ggt.precondition(&g).unwrap(), &expected) <= 1e-12);
    }

    #[test]
    fn orthonormal_gradients_give_identity_gram() {
        let mut ggt = Ggt::new(DenseGradWindow::new(3, 3).unwrap(), 0.1).unwrap();
        for i in 0..3 {
            let mut e = vec![0.0; 3];
            e[i] = 1.0;
            ggt.update(&Compressed::Dense(e)).unwrap();
        }
        assert_eq!(ggt.gram(), &DenseMatrix::identity(3));
        assert!(ggt
            .eigen()
            .unwrap()
            .eigenvalues
            .iter()
            .all(|&l| (l - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_gradients_are_inert() {
        let mut ggt = Ggt::new(DenseGradWindow::new(2, 3).unwrap(), 0.25).unwrap();
        ggt.update(&Compressed::Dense(vec![0.0; 3])).unwrap();
        assert_eq!(
            ggt.precondition(&[1.0, 2.0, 3.0]).unwrap(),
            vec![4.0, 8.0, 12.0]
        );
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Ggt::new(DenseGradWindow::new(2, 3).unwrap(), 0.0).is_err());
        assert!(Ggt::with_threshold(DenseGradWindow::new(2, 3).unwrap(), 1.0, 1.5).is_err());
    }
}
