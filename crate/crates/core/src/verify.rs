//! Randomized equivalence checks against independent reference
//! computations.
//!
//! Kernel references are plain dense loops over a separately kept copy of
//! the pushed rows. Preconditioner references build the `d × d` matrix and
//! use `nalgebra` for the LU inverse and the symmetric eigendecomposition,
//! sharing no code with the `m × m` implementations under test.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compress::{
    power_compress, BlockLayout, Compressed, Compressor, Densify, ErrorFeedback, LowRankCompressed,
    Precision, TopK,
};
use crate::error::Result;
use crate::ggt::Ggt;
use crate::linalg::{relative_error, DenseMatrix};
use crate::lowrank::lr_inner_product;
use crate::mfac::Mfac;
use crate::tasks::normal;
use crate::window::{DenseGradWindow, GradientWindow, SparseGradWindow};

/// Independent RNG stream for instance `i` of a check.
pub fn instance_rng(seed: u64, check: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ check.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(i);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        0.0
    } else {
        relative_error(a, b)
    }
}

/// One randomized sparse-window instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCase {
    pub m: usize,
    pub d: usize,
    pub density: f64,
    pub block_size: usize,
    pub precision: Precision,
    /// Rows pushed; more than `m` exercises eviction.
    pub pushes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOutcome {
    /// `sp` against the dense matvec over the unrounded rows.
    pub sp_error: f64,
    /// `lcg` against the dense transpose-matvec over the unrounded rows.
    pub lcg_error: f64,
    /// Both kernels against the same loops over the stored (rounded) rows.
    pub stored_sp_error: f64,
    pub stored_lcg_error: f64,
}

/// Fills a sparse window with Top-k rows and compares both kernels with
/// dense loops in the same summation order.
pub fn kernel_case(case: &KernelCase) -> Result<KernelOutcome> {
    let mut rng = instance_rng(case.seed, 1, 0);
    let mut window = SparseGradWindow::new(
        case.m,
        case.d,
        case.block_size,
        case.density,
        case.precision,
    )?;
    // Physical row r holds push i with i % m == r.
    let mut exact: Vec<Vec<f64>> = vec![vec![0.0; case.d]; case.m];
    let mut stored: Vec<Vec<f64>> = vec![vec![0.0; case.d]; case.m];
    let mut ages: VecDeque<usize> = VecDeque::new();
    let compressor = TopK::new(case.d, case.density, case.block_size, Precision::F64)?;
    for i in 0..case.pushes {
        let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let g = gaussian(&mut rng, case.d, scale);
        let c = compressor.compress(&g)?;
        let r = i % case.m;
        exact[r] = c.densify();
        stored[r] = exact[r].iter().map(|&v| case.precision.round(v)).collect();
        window.push(&c)?;
        if ages.len() == case.m {
            ages.pop_front();
        }
        ages.push_back(r);
    }
    let x = gaussian(&mut rng, case.d, 1.0);
    let coeffs = gaussian(&mut rng, case.m, 1.0);

    let matvec = |rows: &[Vec<f64>]| -> Vec<f64> {
        (0..case.m)
            .map(|r| {
                if !ages.contains(&r) {
                    return 0.0;
                }
                let mut acc = 0.0;
                for j in 0..case.d {
                    acc += rows[r][j] * x[j];
                }
                acc
            })
            .collect()
    };
    let tmatvec = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut out = vec![0.0; case.d];
        for &r in &ages {
            for (o, v) in out.iter_mut().zip(&rows[r]) {
                *o += coeffs[r] * v;
            }
        }
        out
    };
    let sp = window.sp(&x)?;
    let lcg = window.lcg(&coeffs)?;
    Ok(KernelOutcome {
        sp_error: rel(&sp, &matvec(&exact)),
        lcg_error: rel(&lcg, &tmatvec(&exact)),
        stored_sp_error: rel(&sp, &matvec(&stored)),
        stored_lcg_error: rel(&lcg, &tmatvec(&stored)),
    })
}

/// One randomized M-FAC or GGT instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecondCase {
    pub d: usize,
    pub m: usize,
    /// Gradients pushed; more than `m` exercises eviction.
    pub pushes: usize,
    /// `λ` for M-FAC, `ε` for GGT.
    pub damping: f64,
    /// Top-k density applied to each gradient before it is stored, with
    /// 64-bit values; `None` stores dense gradients.
    pub density: Option<f64>,
    pub seed: u64,
}

fn case_gradients(case: &PrecondCase, rng: &mut ChaCha8Rng) -> Result<Vec<Compressed>> {
    let topk = match case.density {
        Some(k) => Some(TopK::new(case.d, k, case.d, Precision::F64)?),
        None => None,
    };
    (0..case.pushes)
        .map(|_| {
            let scale = [0.1, 1.0, 3.0][rng.random_range(0..3)];
            let g = gaussian(rng, case.d, scale);
            match &topk {
                Some(t) => t.compress(&g),
                None => Ok(Compressed::Dense(g)),
            }
        })
        .collect()
}

fn mfac_with(case: &PrecondCase, grads: &[Compressed], x: &[f64]) -> Result<Vec<f64>> {
    match case.density {
        Some(k) => {
            let mut mfac = Mfac::new(
                SparseGradWindow::new(case.m, case.d, case.d, k, Precision::F64)?,
                case.damping,
            )?;
            for g in grads {
                mfac.update(g)?;
            }
            mfac.precondition(x)
        }
        None => {
            let mut mfac = Mfac::new(DenseGradWindow::new(case.m, case.d)?, case.damping)?;
            for g in grads {
                mfac.update(g)?;
            }
            mfac.precondition(x)
        }
    }
}

/// `(λI + (1/m) Σ g gᵀ)⁻¹ x` over the last `m` gradients by LU.
pub fn mfac_reference(d: usize, m: usize, damping: f64, grads: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut f = DMatrix::<f64>::identity(d, d) * damping;
    let kept = &grads[grads.len().saturating_sub(m)..];
    for g in kept {
        let v = DVector::from_column_slice(g);
        f += (&v * v.transpose()) / m as f64;
    }
    let inv = f.try_inverse().expect("damped Fisher is positive definite");
    (inv * DVector::from_column_slice(x)).as_slice().to_vec()
}

/// Relative error of M-FAC against [`mfac_reference`].
pub fn mfac_case(case: &PrecondCase) -> Result<f64> {
    let mut rng = instance_rng(case.seed, 2, 0);
    let grads = case_gradients(case, &mut rng)?;
    let x = gaussian(&mut rng, case.d, 1.0);
    let ours = mfac_with(case, &grads, &x)?;
    let dense: Vec<Vec<f64>> = grads.iter().map(Densify::densify).collect();
    Ok(rel(
        &ours,
        &mfac_reference(case.d, case.m, case.damping, &dense, &x),
    ))
}

/// Relative change of the M-FAC output when the same gradients are
/// inserted in a shuffled order. Requires `pushes ≤ m`.
pub fn mfac_permutation_case(case: &PrecondCase) -> Result<f64> {
    assert!(case.pushes <= case.m, "permutation check needs pushes <= m");
    let mut rng = instance_rng(case.seed, 2, 0);
    let grads = case_gradients(case, &mut rng)?;
    let x = gaussian(&mut rng, case.d, 1.0);
    let ours = mfac_with(case, &grads, &x)?;
    let mut shuffled = grads.clone();
    let mut perm_rng = instance_rng(case.seed, 3, 0);
    shuffled.shuffle(&mut perm_rng);
    let permuted = mfac_with(case, &shuffled, &x)?;
    Ok(rel(&permuted, &ours))
}

/// `(εI + (Σ g gᵀ)^{1/2})⁻¹ x` over the last `m` gradients from the `d × d`
/// eigendecomposition. Eigenvalues below `1e-10 · λ_max` are set to zero:
/// the exact matrix has rank at most `m`, and the roundoff eigenvalues of
/// its null space would otherwise be square-rooted into spurious
/// `O(1e-8 · σ_max)` singular values.
pub fn ggt_reference(d: usize, m: usize, epsilon: f64, grads: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut s = DMatrix::<f64>::zeros(d, d);
    let kept = &grads[grads.len().saturating_sub(m)..];
    for g in kept {
        let v = DVector::from_column_slice(g);
        s += &v * v.transpose();
    }
    let eig = s.symmetric_eigen();
    let lmax = eig.eigenvalues.max().max(0.0);
    let xv = DVector::from_column_slice(x);
    let mut out = DVector::<f64>::zeros(d);
    for j in 0..d {
        let l = eig.eigenvalues[j];
        let sigma = if l > 1e-10 * lmax { l.sqrt() } else { 0.0 };
        let u = eig.eigenvectors.column(j);
        out += u * (u.dot(&xv) / (sigma + epsilon));
    }
    out.as_slice().to_vec()
}

/// Relative error of GGT against [`ggt_reference`].
pub fn ggt_case(case: &PrecondCase) -> Result<f64> {
    let mut rng = instance_rng(case.seed, 4, 0);
    let grads = case_gradients(case, &mut rng)?;
    let x = gaussian(&mut rng, case.d, 1.0);
    let ours = match case.density {
        Some(k) => {
            let mut ggt = Ggt::new(
                SparseGradWindow::new(case.m, case.d, case.d, k, Precision::F64)?,
                case.damping,
            )?;
            for g in &grads {
                ggt.update(g)?;
            }
            ggt.precondition(&x)?
        }
        None => {
            let mut ggt = Ggt::new(DenseGradWindow::new(case.m, case.d)?, case.damping)?;
            for g in &grads {
                ggt.update(g)?;
            }
            ggt.precondition(&x)?
        }
    };
    let dense: Vec<Vec<f64>> = grads.iter().map(Densify::densify).collect();
    Ok(rel(
        &ours,
        &ggt_reference(case.d, case.m, case.damping, &dense, &x),
    ))
}

fn random_factors(rng: &mut ChaCha8Rng, p1: usize, p2: usize, rank: usize) -> LowRankCompressed {
    let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    LowRankCompressed {
        p: DenseMatrix::from_fn(p1, rank, |_, _| scale * normal(rng)),
        q: DenseMatrix::from_fn(p2, rank, |_, _| normal(rng)),
        shape: vec![p1, p2],
    }
}

/// `lr_inner_product` against the Frobenius product of the reconstructed
/// matrices for one random pair of factorizations.
pub fn lr_inner_case(seed: u64, i: u64) -> Result<f64> {
    let mut rng = instance_rng(seed, 5, i);
    let p1 = rng.random_range(1..40);
    let p2 = rng.random_range(1..40);
    let rank = rng.random_range(1..=p1.min(p2).min(8));
    let a = random_factors(&mut rng, p1, p2, rank);
    let b = random_factors(&mut rng, p1, p2, rank);
    let ours = lr_inner_product(&a, &b)?;
    let da = DMatrix::from_row_slice(p1, p2, &a.reconstruct());
    let db = DMatrix::from_row_slice(p1, p2, &b.reconstruct());
    let reference = (da.transpose() * db).trace();
    let scale = reference.abs().max(f64::MIN_POSITIVE);
    Ok((ours - reference).abs() / scale)
}

/// Reconstruction error of one power-compression step on a matrix whose
/// rank equals the compression rank.
pub fn power_exact_case(seed: u64, i: u64) -> Result<f64> {
    let mut rng = instance_rng(seed, 6, i);
    let p1 = rng.random_range(2..40);
    let p2 = rng.random_range(2..40);
    let rank = rng.random_range(1..=p1.min(p2).min(6));
    let g = random_factors(&mut rng, p1, p2, rank).reconstruct();
    let mut q = DenseMatrix::from_fn(p2, rank, |_, _| normal(&mut rng));
    let c = power_compress(&g, &[p1, p2], &mut q)?;
    Ok(rel(&c.reconstruct(), &g))
}

/// Counts of error-feedback identity and block-quota violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConservationOutcome {
    pub steps: usize,
    pub identity_violations: usize,
    pub quota_violations: usize,
}

/// Runs `steps` random error-feedback steps with Top-k and checks
/// `ξ_t + c_t = ξ_{t−1} + g_t` bit for bit and the per-block quotas.
pub fn ef_conservation(
    d: usize,
    density: f64,
    block_size: usize,
    precision: Precision,
    steps: usize,
    seed: u64,
) -> Result<ConservationOutcome> {
    let mut rng = instance_rng(seed, 7, 0);
    let layout = BlockLayout::new(d, block_size, density)?;
    let topk = TopK::new(d, density, block_size, precision)?;
    let mut ef = ErrorFeedback::new(d);
    let mut out = ConservationOutcome {
        steps,
        ..Default::default()
    };
    for _ in 0..steps {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let g = gaussian(&mut rng, d, scale);
        let before: Vec<f64> = ef.error().iter().zip(&g).map(|(x, gi)| x + gi).collect();
        let c = ef.step_with(&g, &topk)?;
        let after: Vec<f64> = ef
            .error()
            .iter()
            .zip(c.densify())
            .map(|(x, ci)| x + ci)
            .collect();
        if after != before {
            out.identity_violations += 1;
        }
        let quota_ok = match &c {
            Compressed::Sparse(s) => layout.validate(s).is_ok(),
            Compressed::Dense(_) => false,
        };
        if !quota_ok {
            out.quota_violations += 1;
        }
    }
    Ok(out)
}

/// Problem sizes for [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuiteSize {
    /// `d ≤ 50`, `m ≤ 16` throughout.
    #[default]
    Default,
    /// Kernel and conservation checks at `d = 10⁴`; the rest as default.
    Large,
}

/// Outcome of one named check over its random instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let worst = errors.iter().copied().fold(0.0, f64::max);
        Self {
            name: name.to_string(),
            instances: errors.len(),
            worst,
            tolerance,
            passed: errors.iter().all(|e| *e <= tolerance),
        }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self {
            name: format!("{name} ({err})"),
            instances: 0,
            worst: f64::INFINITY,
            tolerance: 0.0,
            passed: false,
        }
    }
}

fn collect(name: &str, tolerance: f64, errors: Result<Vec<f64>>) -> CheckResult {
    match errors {
        Ok(e) => CheckResult::new(name, &e, tolerance),
        Err(e) => CheckResult::failed(name, e),
    }
}

/// Runs every check family and returns one row per check.
pub fn run_suite(size: SuiteSize, seed: u64) -> Vec<CheckResult> {
    let (kernel_d, ef_d) = match size {
        SuiteSize::Default => (50, 50),
        SuiteSize::Large => (10_000, 10_000),
    };
    let mut results = Vec::new();

    for (precision, tolerance, label) in [
        (Precision::F64, 0.0, "64-bit"),
        (Precision::F32, 1e-5, "32-bit"),
    ] {
        let errors: Result<Vec<f64>> = (0..12)
            .map(|i| {
                let case = KernelCase {
                    m: [4, 8, 16][i % 3],
                    d: kernel_d,
                    density: [0.05, 0.1, 0.5][i / 3 % 3],
                    block_size: [16, 64, kernel_d][i % 3],
                    precision,
                    pushes: [3, 16, 40][i % 3],
                    seed: seed.wrapping_add(i as u64),
                };
                let o = kernel_case(&case)?;
                Ok(o.sp_error.max(o.lcg_error))
            })
            .collect();
        results.push(collect(
            &format!("sp/lcg vs dense ({label})"),
            tolerance,
            errors,
        ));
    }

    let precond_cases = |damping: &[f64]| -> Vec<PrecondCase> {
        (0..12)
            .map(|i| {
                let m = [4, 8, 16][i % 3];
                PrecondCase {
                    d: [20, 35, 50][i / 3 % 3],
                    m,
                    pushes: if i % 4 == 3 { m + 5 } else { m.min(1 + i) },
                    damping: damping[i % damping.len()],
                    density: if i % 2 == 1 { Some(0.3) } else { None },
                    seed: seed.wrapping_add(i as u64),
                }
            })
            .collect()
    };
    let mfac_cases = precond_cases(&[1e-6, 1e-4, 1e-2]);
    results.push(collect(
        "m-fac vs explicit inverse",
        1e-8,
        mfac_cases.iter().map(mfac_case).collect(),
    ));
    results.push(collect(
        "m-fac insertion-order invariance",
        1e-8,
        mfac_cases
            .iter()
            .filter(|c| c.pushes <= c.m)
            .map(mfac_permutation_case)
            .collect(),
    ));
    let ggt_cases: Vec<PrecondCase> = precond_cases(&[1e-5, 1e-3])
        .into_iter()
        .map(|c| PrecondCase {
            d: c.d.min(30),
            m: c.m.min(10),
            pushes: c.pushes.min(c.m.min(10) + 3),
            ..c
        })
        .collect();
    results.push(collect(
        "ggt vs d×d spectral",
        1e-7,
        ggt_cases.iter().map(ggt_case).collect(),
    ));
    results.push(collect(
        "low-rank trace identity",
        1e-10,
        (0..100).map(|i| lr_inner_case(seed, i)).collect(),
    ));
    results.push(collect(
        "power compression at exact rank",
        1e-9,
        (0..20).map(|i| power_exact_case(seed, i)).collect(),
    ));
    for (precision, label) in [(Precision::F64, "64-bit"), (Precision::F32, "32-bit")] {
        let steps = 200;
        let outcome = ef_conservation(ef_d, 0.1, 16, precision, steps, seed).map(|o| {
            // One entry per step: 1 if that step broke an invariant.
            let bad = o.identity_violations.max(o.quota_violations);
            let mut flags = vec![0.0; steps];
            flags.iter_mut().take(bad).for_each(|f| *f = 1.0);
            flags
        });
        results.push(collect(&format!("ef conservation ({label})"), 0.0, outcome));
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        for seed in [0, 1] {
            for r in run_suite(SuiteSize::Default, seed) {
                assert!(r.passed, "seed {seed}: {r:?}");
                assert!(r.instances > 0);
            }
        }
    }

    #[test]
    fn references_agree_with_closed_forms() {
        let g = vec![vec![3.0, 4.0]];
        let x = [3.0, 4.0];
        // F = λI + g gᵀ with m = 1, so F x = (λ + 25) x.
        let u = mfac_reference(2, 1, 0.5, &g, &x);
        assert!((u[0] - 3.0 / 25.5).abs() < 1e-15 && (u[1] - 4.0 / 25.5).abs() < 1e-15);
        let u = ggt_reference(2, 1, 0.5, &g, &x);
        assert!((u[0] - 3.0 / 5.5).abs() < 1e-15 && (u[1] - 4.0 / 5.5).abs() < 1e-15);
    }
}
