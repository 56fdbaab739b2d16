//! M-FAC inverse-Hessian-vector products under the empirical Fisher.
//!
//! With `F₀ = λI` and `F_t = F_{t−1} + (1/m) g_t g_tᵀ`, repeated
//! Sherman–Morrison updates give
//!
//! ```text
//! F_n⁻¹ x = x/λ − Σ_t p_t (p_tᵀ x) / σ_t,   p_t = F_{t−1}⁻¹ g_t,   σ_t = m + g_tᵀ p_t.
//! ```
//!
//! Every `p_t` lies in the span of `g_1..g_t`, so it is stored as a row of a
//! lower-triangular coefficient table `B` with `p_t = Σ_{j≤t} B[t,j] g_j`:
//!
//! ```text
//! p_t = g_t/λ − Σ_{s<t} (p_sᵀ g_t / σ_s) p_s,   p_sᵀ g_t = Σ_{j≤s} B[s,j] ⟨g_j, g_t⟩.
//! ```
//!
//! The table depends only on the Gram matrix `S = G Gᵀ`, and the final
//! product reduces to one `sp` and one `lcg` call on the window.

use crate::compress::{Compressed, Densify};
use crate::error::{check_dim, EfcpError, Result};
use crate::linalg::DenseMatrix;
use crate::window::GradientWindow;

/// Lower-triangular expansion table and Sherman–Morrison denominators,
/// both indexed by logical age (0 = oldest occupied row).
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub coeff: DenseMatrix,
    pub sigma: Vec<f64>,
}

impl Coefficients {
    pub fn empty() -> Self {
        Self {
            coeff: DenseMatrix::zeros(0, 0),
            sigma: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Linear-combination weights `c` with `F⁻¹x = x/λ − Σ_j c_j g_j`,
    /// given the products `g_jᵀx` in logical order.
    pub fn combination_weights(&self, products: &[f64]) -> Vec<f64> {
        let n = self.len();
        let b = &self.coeff;
        let mut scaled = vec![0.0; n];
        for t in 0..n {
            let mut px = 0.0;
            for j in 0..=t {
                px += b[(t, j)] * products[j];
            }
            scaled[t] = px / self.sigma[t];
        }
        (0..n)
            .map(|j| (j..n).map(|t| scaled[t] * b[(t, j)]).sum())
            .collect()
    }
}

/// Rebuilds the coefficient table from the physical Gram matrix.
///
/// `order` lists occupied physical rows from oldest to newest and
/// `window_size` is the fixed `m` of the Sherman–Morrison denominator.
pub fn recompute_coefficients(
    gram: &DenseMatrix,
    order: &[usize],
    damping: f64,
    window_size: usize,
) -> Result<Coefficients> {
    let n = order.len();
    let s = |a: usize, b: usize| gram[(order[a], order[b])];
    let inv_damping = 1.0 / damping;
    let mut coeff = DenseMatrix::zeros(n, n);
    let mut sigma = vec![0.0; n];
    let mut ratio = vec![0.0; n];
    for t in 0..n {
        // ratio[s] = (p_sᵀ g_t) / σ_s
        for sidx in 0..t {
            let mut q = 0.0;
            for j in 0..=sidx {
                q += coeff[(sidx, j)] * s(j, t);
            }
            ratio[sidx] = q / sigma[sidx];
        }
        coeff[(t, t)] = inv_damping;
        for j in 0..t {
            let mut acc = 0.0;
            for sidx in j..t {
                acc += ratio[sidx] * coeff[(sidx, j)];
            }
            coeff[(t, j)] = -acc;
        }
        let mut gp = 0.0;
        for j in 0..=t {
            gp += coeff[(t, j)] * s(j, t);
        }
        sigma[t] = window_size as f64 + gp;
        if !(sigma[t] > 0.0) || !sigma[t].is_finite() {
            return Err(EfcpError::Breakdown(format!(
                "Sherman-Morrison denominator σ_{t} = {} is not positive",
                sigma[t]
            )));
        }
    }
    Ok(Coefficients { coeff, sigma })
}

/// M-FAC state over any gradient window.
#[derive(Debug, Clone)]
pub struct Mfac<W> {
    damping: f64,
    window: W,
    gram: DenseMatrix,
    order: Vec<usize>,
    coeffs: Coefficients,
}

impl<W: GradientWindow> Mfac<W> {
    pub fn new(window: W, damping: f64) -> Result<Self> {
        if !(damping > 0.0) || !damping.is_finite() {
            return Err(EfcpError::Parameter {
                name: "lambda",
                reason: format!("damping must be positive, got {damping}"),
            });
        }
        let m = window.capacity();
        Ok(Self {
            damping,
            window,
            gram: DenseMatrix::zeros(m, m),
            order: Vec::new(),
            coeffs: Coefficients::empty(),
        })
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn window(&self) -> &W {
        &self.window
    }

    /// Gram matrix indexed by physical row.
    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    /// Occupied physical rows, oldest first.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Inserts a compressed gradient and refreshes `S`, `B` and `σ`.
    pub fn update(&mut self, c: &Compressed) -> Result<()> {
        let insert = self.window.push(c)?;
        let products = self.window.sp(&c.densify())?;
        let i = insert.row;
        for (j, &v) in products.iter().enumerate() {
            self.gram[(i, j)] = v;
            self.gram[(j, i)] = v;
        }
        self.order = self.window.age_order();
        self.coeffs = recompute_coefficients(
            &self.gram,
            &self.order,
            self.damping,
            self.window.capacity(),
        )?;
        Ok(())
    }

    /// `F̂⁻¹ x` with `F̂ = λI + (1/m) Σ g gᵀ` over the stored gradients.
    pub fn precondition(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("mfac precondition", self.window.dim(), x.len())?;
        let inv_damping = 1.0 / self.damping;
        if self.order.is_empty() {
            return Ok(x.iter().map(|v| v * inv_damping).collect());
        }
        let physical = self.window.sp(x)?;
        let products: Vec<f64> = self.order.iter().map(|&r| physical[r]).collect();
        let weights = self.coeffs.combination_weights(&products);
        let mut row_weights = vec![0.0; self.window.capacity()];
        for (&r, w) in self.order.iter().zip(weights) {
            row_weights[r] = w;
        }
        let combo = self.window.lcg(&row_weights)?;
        Ok(x.iter()
            .zip(combo)
            .map(|(xi, ci)| xi * inv_damping - ci)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, relative_error};
    use crate::window::DenseGradWindow;

    fn dense(v: &[f64]) -> Compressed {
        Compressed::Dense(v.to_vec())
    }

    #[test]
    fn empty_window_scales_by_inverse_damping() {
        let m = Mfac::new(DenseGradWindow::new(4, 3).unwrap(), 0.5).unwrap();
        assert_eq!(
            m.precondition(&[1.0, -2.0, 4.0]).unwrap(),
            vec![2.0, -4.0, 8.0]
        );
    }

    #[test]
    fn first_insert_coefficients() {
        let lambda = 0.1;
        let mut m = Mfac::new(DenseGradWindow::new(4, 3).unwrap(), lambda).unwrap();
        let g = [1.0, 2.0, 2.0];
        m.update(&dense(&g)).unwrap();
        assert_eq!(m.gram()[(0, 0)], 9.0);
        assert_eq!(m.coefficients().coeff[(0, 0)], 1.0 / lambda);
        assert_eq!(m.coefficients().sigma, vec![4.0 + 9.0 / lambda]);
    }

    #[test]
    fn single_gradient_matches_sherman_morrison() {
        let (lambda, window) = (0.3, 5usize);
        let mut m = Mfac::new(DenseGradWindow::new(window, 4).unwrap(), lambda).unwrap();
        let g = [0.5, -1.0, 2.0, 0.25];
        let x = [1.0, 1.0, -3.0, 0.5];
        m.update(&dense(&g)).unwrap();
        let gx = dot(&g, &x);
        let gg = dot(&g, &g);
        let scale = gx / (lambda * lambda * (window as f64 + gg / lambda));
        let expected: Vec<f64> = x
            .iter()
            .zip(&g)
            .map(|(xi, gi)| xi / lambda - scale * gi)
            .collect();
        assert!(relative_error(&m.precondition(&x).unwrap(), &expected) <= 1e-14);
    }

    #[test]
    fn orthogonal_gradients_decouple() {
        let lambda = 2.0;
        let mut m = Mfac::new(DenseGradWindow::new(3, 3).unwrap(), lambda).unwrap();
        m.update(&dense(&[1.0, 0.0, 0.0])).unwrap();
        m.update(&dense(&[0.0, 3.0, 0.0])).unwrap();
        let b = &m.coefficients().coeff;
        assert_eq!(b[(1, 0)], 0.0);
        assert_eq!(b[(0, 0)], 0.5);
        assert_eq!(b[(1, 1)], 0.5);
    }

    #[test]
    fn zero_gradient_is_inert() {
        let mut with = Mfac::new(DenseGradWindow::new(4, 3).unwrap(), 0.1).unwrap();
        let mut without = Mfac::new(DenseGradWindow::new(4, 3).unwrap(), 0.1).unwrap();
        for g in [[1.0, 2.0, 0.0], [0.0, 1.0, -1.0]] {
            with.update(&dense(&g)).unwrap();
            without.update(&dense(&g)).unwrap();
        }
        with.update(&dense(&[0.0; 3])).unwrap();
        let x = [0.3, -0.7, 1.1];
        assert!(
            relative_error(
                &with.precondition(&x).unwrap(),
                &without.precondition(&x).unwrap()
            ) <= 1e-15
        );
    }

    #[test]
    fn window_replay_gram() {
        let mut m = Mfac::new(DenseGradWindow::new(3, 2).unwrap(), 1.0).unwrap();
        let grads: Vec<[f64; 2]> = (0..5).map(|t| [t as f64, 1.0 - t as f64]).collect();
        for g in &grads {
            m.update(&dense(g)).unwrap();
        }
        let kept = &grads[2..];
        for (a, &ra) in m.order().iter().enumerate() {
            for (b, &rb) in m.order().iter().enumerate() {
                assert_eq!(m.gram()[(ra, rb)], dot(&kept[a], &kept[b]));
            }
        }
    }

    #[test]
    fn rejects_bad_damping_and_dims() {
        assert!(Mfac::new(DenseGradWindow::new(2, 2).unwrap(), 0.0).is_err());
        let m = Mfac::new(DenseGradWindow::new(2, 2).unwrap(), 1.0).unwrap();
        assert!(m.precondition(&[1.0]).is_err());
    }
}
