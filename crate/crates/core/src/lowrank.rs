//! Low-rank M-FAC: per-layer `(P, Q)` gradient rings sharing one global
//! Gram matrix.
//!
//! Inner products between stored gradients never touch `d`-dimensional
//! vectors: for `g̃_a = P_a Q_aᵀ` and `g̃_b = P_b Q_bᵀ`,
//! `⟨g̃_a, g̃_b⟩_F = Σ (P_bᵀP_a) ⊙ (Q_bᵀQ_a)`, summed over layers. The
//! M-FAC coefficients are computed once from that Gram matrix and shared
//! by every layer. The output sign convention is the linear-combination
//! form `u = x/λ − Σ c_τ g_τ` (the weights `w` of the per-layer sum are
//! `−c`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::compress::{power_compress, unfold_dims, ErrorFeedback, LowRankCompressed};
use crate::error::{check_dim, EfcpError, Result};
use crate::linalg::DenseMatrix;
use crate::mfac::{recompute_coefficients, Coefficients};
use crate::tasks::normal;
use crate::window::RingCursor;

/// Frobenius inner product of two factored matrices via the `ρ × ρ`
/// products `P_bᵀP_a` and `Q_bᵀQ_a`.
pub fn lr_inner_product(a: &LowRankCompressed, b: &LowRankCompressed) -> Result<f64> {
    check_dim("lr_inner_product (P rows)", a.p.rows(), b.p.rows())?;
    check_dim("lr_inner_product (Q rows)", a.q.rows(), b.q.rows())?;
    let pp = b.p.transpose_matmul(&a.p)?;
    let qq = b.q.transpose_matmul(&a.q)?;
    Ok(pp
        .as_slice()
        .iter()
        .zip(qq.as_slice())
        .map(|(x, y)| x * y)
        .sum())
}

#[derive(Debug, Clone)]
struct Layer {
    shape: Vec<usize>,
    size: usize,
    warm_q: DenseMatrix,
    feedback: ErrorFeedback,
    ring: Vec<Option<LowRankCompressed>>,
}

/// Construction parameters for [`LowRankMfac`].
#[derive(Debug, Clone)]
pub struct LowRankConfig {
    pub window_size: usize,
    pub rank: usize,
    pub damping: f64,
    pub error_feedback: bool,
    /// Seed for the Gaussian initialization of the warm-start `Q`s.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LowRankMfac {
    damping: f64,
    layers: Vec<Layer>,
    cursor: RingCursor,
    gram: DenseMatrix,
    order: Vec<usize>,
    coeffs: Coefficients,
}

impl LowRankMfac {
    pub fn new(shapes: &[Vec<usize>], config: &LowRankConfig) -> Result<Self> {
        if !(config.damping > 0.0) || !config.damping.is_finite() {
            return Err(EfcpError::Parameter {
                name: "lambda",
                reason: format!("damping must be positive, got {}", config.damping),
            });
        }
        if config.rank == 0 {
            return Err(EfcpError::Parameter {
                name: "rank",
                reason: "must be at least 1".into(),
            });
        }
        if shapes.is_empty() {
            return Err(EfcpError::Parameter {
                name: "shapes",
                reason: "at least one layer is required".into(),
            });
        }
        let cursor = RingCursor::new(config.window_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let (p1, p2) = unfold_dims(shape)?;
            let rank = config.rank.min(p1).min(p2);
            let warm_q = DenseMatrix::from_fn(p2, rank, |_, _| normal(&mut rng));
            let size = p1 * p2;
            let feedback = if config.error_feedback {
                ErrorFeedback::new(size)
            } else {
                ErrorFeedback::disabled(size)
            };
            layers.push(Layer {
                shape: shape.clone(),
                size,
                warm_q,
                feedback,
                ring: vec![None; config.window_size],
            });
        }
        let m = config.window_size;
        Ok(Self {
            damping: config.damping,
            layers,
            cursor,
            gram: DenseMatrix::zeros(m, m),
            order: Vec::new(),
            coeffs: Coefficients::empty(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn capacity(&self) -> usize {
        self.cursor.capacity()
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn layer_ranks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.warm_q.cols()).collect()
    }

    /// Stored factors of `layer` in physical row `row`.
    pub fn stored(&self, layer: usize, row: usize) -> Option<&LowRankCompressed> {
        self.layers[layer].ring[row].as_ref()
    }

    /// Combined error-feedback norm over all layers.
    pub fn error_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.feedback.error().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Values held by the factor rings when full: `m · Σ_ℓ (p₁ + p_{2:s}) ρ_ℓ`.
    pub fn stored_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.shape[0] + l.size / l.shape[0]) * l.warm_q.cols())
            .sum::<usize>()
            * self.capacity()
    }

    /// Compresses the per-layer gradients, inserts them, and returns the
    /// per-layer preconditioned update.
    pub fn step(&mut self, grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_dim("lrmfac layers", self.layers.len(), grads.len())?;
        for (layer, g) in self.layers.iter().zip(grads) {
            check_dim("lrmfac layer size", layer.size, g.len())?;
        }

        let current: Vec<LowRankCompressed> = self
            .layers
            .par_iter_mut()
            .zip(grads.par_iter())
            .map(|(layer, g)| {
                let Layer {
                    shape,
                    warm_q,
                    feedback,
                    ..
                } = layer;
                feedback.step(g, |a| power_compress(a, shape, warm_q))
            })
            .collect::<Result<_>>()?;

        let insert = self.cursor.advance();
        for (layer, c) in self.layers.iter_mut().zip(&current) {
            layer.ring[insert.row] = Some(c.clone());
        }

        let m = self.capacity();
        let mut delta = vec![0.0; m];
        for (r, slot) in delta.iter_mut().enumerate() {
            if !self.cursor.is_occupied(r) {
                continue;
            }
            let mut acc = 0.0;
            for (layer, c) in self.layers.iter().zip(&current) {
                let stored = layer.ring[r].as_ref().expect("occupied row");
                acc += lr_inner_product(stored, c)?;
            }
            *slot = acc;
        }
        let i = insert.row;
        for (j, &v) in delta.iter().enumerate() {
            self.gram[(i, j)] = v;
            self.gram[(j, i)] = v;
        }
        self.order = self.cursor.age_order();
        self.coeffs = recompute_coefficients(&self.gram, &self.order, self.damping, m)?;

        let products: Vec<f64> = self.order.iter().map(|&r| delta[r]).collect();
        let weights = self.coeffs.combination_weights(&products);
        let inv_damping = 1.0 / self.damping;
        let order = &self.order;
        Ok(self
            .layers
            .par_iter()
            .zip(current.par_iter())
            .map(|(layer, c)| {
                let mut u: Vec<f64> = c.reconstruct().iter().map(|v| v * inv_damping).collect();
                for (&r, &w) in order.iter().zip(&weights) {
                    let g = layer.ring[r].as_ref().expect("occupied row").reconstruct();
                    for (ui, gi) in u.iter_mut().zip(g) {
                        *ui -= w * gi;
                    }
                }
                u
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn factors(p: &[f64], q: &[f64], rank: usize) -> LowRankCompressed {
        LowRankCompressed {
            p: DenseMatrix::new(p.len() / rank, rank, p.to_vec()).unwrap(),
            q: DenseMatrix::new(q.len() / rank, rank, q.to_vec()).unwrap(),
            shape: vec![p.len() / rank, q.len() / rank],
        }
    }

    #[test]
    fn inner_product_self_is_squared_norm() {
        let a = factors(&[1.0, 0.5, -2.0, 1.0], &[0.3, 2.0, 1.0, -1.0, 0.0, 4.0], 2);
        let r = a.reconstruct();
        assert!((lr_inner_product(&a, &a).unwrap() - dot(&r, &r)).abs() <= 1e-12);
    }

    #[test]
    fn inner_product_separable() {
        let a = factors(&[1.0, 2.0], &[3.0, -1.0, 0.5], 1);
        let b = factors(&[-0.5, 4.0], &[1.0, 1.0, 2.0], 1);
        let expected = dot(&[1.0, 2.0], &[-0.5, 4.0]) * dot(&[3.0, -1.0, 0.5], &[1.0, 1.0, 2.0]);
        assert_eq!(lr_inner_product(&a, &b).unwrap(), expected);
    }

    #[test]
    fn inner_product_shape_mismatch() {
        let a = factors(&[1.0, 2.0], &[3.0, -1.0, 0.5], 1);
        let b = factors(&[1.0, 2.0, 3.0], &[3.0, -1.0, 0.5], 1);
        assert!(lr_inner_product(&a, &b).is_err());
    }

    #[test]
    fn zero_gradients_give_zero_update() {
        let cfg = LowRankConfig {
            window_size: 3,
            rank: 2,
            damping: 1e-2,
            error_feedback: true,
            seed: 0,
        };
        let mut lr = LowRankMfac::new(&[vec![4, 3], vec![4]], &cfg).unwrap();
        for _ in 0..5 {
            let u = lr.step(&[vec![0.0; 12], vec![0.0; 4]]).unwrap();
            assert!(u.iter().flatten().all(|&v| v == 0.0));
        }
        assert_eq!(lr.layer_ranks(), vec![2, 1]);
    }

    #[test]
    fn rejects_shape_drift() {
        let cfg = LowRankConfig {
            window_size: 2,
            rank: 1,
            damping: 1.0,
            error_feedback: false,
            seed: 0,
        };
        let mut lr = LowRankMfac::new(&[vec![2, 2]], &cfg).unwrap();
        assert!(lr.step(&[vec![0.0; 3]]).is_err());
        assert!(lr.step(&[vec![0.0; 4], vec![0.0; 4]]).is_err());
    }
}
