//! Penalized least squares solves for `(c, b)`.
//!
//! Every route here works from a square root of the penalty (`LᵀL = Q`) and
//! factors an augmented least squares matrix by SVD instead of forming the
//! normal equations, which would square an already large condition number.
//!
//! * [`solve_fit`] is the production path for a single fit. The Moore–Penrose
//!   solution of the block normal equations equals `X⁺ (Y; 0; 0)` for
//!   `X = (R Z; √(nλ) L 0; 0 Σ^{1/2})`, and `A = U₁U₁ᵀ` where `U₁` is the top
//!   `n` rows of the left singular vectors of `X`.
//! * The dense operators ([`abar_dense`], [`smoothing_matrix_dense`],
//!   [`eta_matrix_dense`] and their Schur-complement twins) build the `n×n`
//!   smoothing matrices explicitly for verification and risk computations.
//! * [`Spectrum`] simultaneously diagonalizes `RᵀR` and `Q` once per design
//!   (a CS decomposition of `(R; √ρ L)`), after which a score for any `(λ, Σ)`
//!   costs `O(kp² + p³)`. The optimizer uses it.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::design::{sigma_diag, DesignMatrices};
use crate::dword::Dw;
use crate::error::{Error, Result};

/// Tunable parameters: `log10 λ`, `γ` (so that `Σ = diag(exp γ)`) and kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothParams {
    pub log10_lambda: f64,
    pub gamma: Vec<f64>,
    /// `[θ]` for the exponential spline, `[θ12/θ1]` for the ANOVA spline, else empty.
    /// Recorded for reporting; the design matrices already embed these values.
    pub kernel_theta: Vec<f64>,
}

impl SmoothParams {
    pub fn new(log10_lambda: f64, gamma: Vec<f64>) -> Self {
        Self {
            log10_lambda,
            gamma,
            kernel_theta: Vec::new(),
        }
    }

    pub fn lambda(&self) -> f64 {
        10f64.powf(self.log10_lambda)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub c_hat: DVector<f64>,
    pub b_hat: DVector<f64>,
    /// `η̂ = R ĉ`.
    pub eta_hat: DVector<f64>,
    /// `Ŷ = R ĉ + Z b̂`.
    pub y_hat: DVector<f64>,
    pub residuals: DVector<f64>,
    pub tr_a: f64,
    pub tr_a2: f64,
    pub rss: f64,
    /// Penalized objective at the solution.
    pub objective: f64,
    pub params: SmoothParams,
    pub n: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Singular values of the augmented matrix below `rank_rel_tol × max` are
    /// treated as zero.
    pub rank_rel_tol: f64,
    pub symmetry_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rank_rel_tol: 1e-12,
            symmetry_tol: 1e-10,
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Argument(format!("matrix is {}×{}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > tol * scale {
        return Err(Error::Argument(format!("matrix asymmetric by {asym:.3e}")));
    }
    Ok(())
}

/// Moore–Penrose inverse of a symmetric matrix by eigendecomposition.
///
/// Eigenvalues with magnitude below `rel_tol × max |eigenvalue|` are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    check_symmetric(m, SolverOptions::default().symmetry_tol)?;
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite eigenvalue".into()));
    }
    let max = eig.eigenvalues.amax();
    let inv = eig.eigenvalues.map(|v| {
        if v.abs() > rel_tol * max && v != 0.0 {
            1.0 / v
        } else {
            0.0
        }
    });
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&inv);
    Ok(scaled * eig.eigenvectors.transpose())
}

/// Inverse of a symmetric positive definite matrix, with pseudoinverse fallback.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    match Cholesky::new(m.clone()) {
        Some(ch) => Ok(ch.inverse()),
        None => pseudo_inverse(m, 1e-14),
    }
}

/// Symmetric square root and inverse square root of a symmetric PD matrix.
fn sym_sqrt_pair(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("matrix is not positive definite".into()));
    }
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
    let inv_root = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x.sqrt())) * v.transpose();
    Ok((root, inv_root))
}

/// Kept part of a thin SVD of a stacked matrix whose first `n_top` rows are the data block.
struct StackedSvd {
    /// First `n_top` rows of the kept left singular vectors.
    u_top: DMatrix<f64>,
    singular: DVector<f64>,
    /// Right singular vectors mapped back through the column scaling, so that
    /// the least squares solution is `v diag(1/singular) u_topᵀ y`.
    v: DMatrix<f64>,
}

/// SVD after scaling every column to unit norm. Kernel columns centred near the
/// origin are orders of magnitude smaller than the rest, and the scaling keeps
/// their coefficients accurate. The cutoff applies to the scaled singular values.
fn stacked_svd(mut x: DMatrix<f64>, n_top: usize, rel_tol: f64) -> Result<StackedSvd> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in design".into()));
    }
    let cols = x.ncols();
    let scale: Vec<f64> = x
        .column_iter()
        .map(|c| {
            let norm = c.norm();
            if norm > 0.0 {
                norm
            } else {
                1.0
            }
        })
        .collect();
    for (j, s) in scale.iter().enumerate() {
        x.column_mut(j).unscale_mut(*s);
    }
    let svd = x
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V");
    let max = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel_tol * max && svd.singular_values[i] > 0.0)
        .collect();
    Ok(StackedSvd {
        u_top: DMatrix::from_fn(n_top, keep.len(), |i, j| u[(i, keep[j])]),
        singular: DVector::from_iterator(keep.len(), keep.iter().map(|&i| svd.singular_values[i])),
        v: DMatrix::from_fn(cols, keep.len(), |i, j| vt[(keep[j], i)] / scale[i]),
    })
}

fn check_response(dm: &DesignMatrices, y: &[f64]) -> Result<DVector<f64>> {
    if y.len() != dm.n() {
        return Err(Error::Input(format!(
            "y has {} entries, design has {}",
            y.len(),
            dm.n()
        )));
    }
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite response {v}")));
    }
    Ok(DVector::from_column_slice(y))
}

/// Left-hand side `C` of the block normal equations, for reference computations.
pub fn normal_matrix(dm: &DesignMatrices, sp: &SmoothParams) -> Result<DMatrix<f64>> {
    let (n, q, p) = (dm.n(), dm.q_dim(), dm.p());
    let sigma = sigma_diag(&sp.gamma, dm)?;
    let mut w = DMatrix::zeros(n, q + p);
    w.columns_mut(0, q).copy_from(&dm.r);
    w.columns_mut(q, p).copy_from(&dm.z);
    let mut c = w.transpose() * &w;
    let mut block = c.view_mut((0, 0), (q, q));
    block += &dm.q * (n as f64 * sp.lambda());
    for (i, s) in sigma.iter().enumerate() {
        c[(q + i, q + i)] += s;
    }
    Ok(c)
}

/// `(R Z; √(nλ) L 0; 0 Σ^{1/2})`.
fn augmented_matrix(dm: &DesignMatrices, sp: &SmoothParams) -> Result<DMatrix<f64>> {
    let (n, q, p) = (dm.n(), dm.q_dim(), dm.p());
    let rl = dm.penalty_root.nrows();
    let sigma = sigma_diag(&sp.gamma, dm)?;
    let mut x = DMatrix::zeros(n + rl + p, q + p);
    x.view_mut((0, 0), (n, q)).copy_from(&dm.r);
    x.view_mut((0, q), (n, p)).copy_from(&dm.z);
    x.view_mut((n, 0), (rl, q))
        .copy_from(&(&dm.penalty_root * (n as f64 * sp.lambda()).sqrt()));
    for i in 0..p {
        x[(n + rl + i, q + i)] = sigma[i].sqrt();
    }
    Ok(x)
}

pub fn solve_fit(dm: &DesignMatrices, y: &[f64], sp: &SmoothParams) -> Result<FitResult> {
    solve_fit_with(dm, y, sp, &SolverOptions::default())
}

pub fn solve_fit_with(
    dm: &DesignMatrices,
    y: &[f64],
    sp: &SmoothParams,
    opts: &SolverOptions,
) -> Result<FitResult> {
    let yv = check_response(dm, y)?;
    let (n, q) = (dm.n(), dm.q_dim());
    let svd = stacked_svd(augmented_matrix(dm, sp)?, n, opts.rank_rel_tol)?;
    let proj = svd.u_top.transpose() * &yv;
    let mut coef = &svd.v * proj.component_div(&svd.singular);
    refine(dm, &yv, sp, &svd, &mut coef)?;
    let c_hat = coef.rows(0, q).clone_owned();
    let b_hat = coef.rows(q, dm.p()).clone_owned();
    let eta_hat = &dm.r * &c_hat;
    let y_hat = &eta_hat + &dm.z * &b_hat;
    let residuals = &yv - &y_hat;
    let rss = residuals.norm_squared();
    let tr_a = svd.u_top.norm_squared();
    let tr_a2 = (svd.u_top.transpose() * &svd.u_top).norm_squared();
    let objective = objective_value(dm, y, sp, &c_hat, &b_hat)?;
    Ok(FitResult {
        c_hat,
        b_hat,
        eta_hat,
        y_hat,
        residuals,
        tr_a,
        tr_a2,
        rss,
        objective,
        params: sp.clone(),
        n,
    })
}

/// Iterative refinement of the block normal equations. The residual is formed
/// in double-word arithmetic against `Q` itself, and the correction reuses the
/// factorization. Strongly regularized kernel problems reach condition numbers
/// near 1/ε, where the plain factorized solve keeps only a few digits of `ĉ`.
fn refine(
    dm: &DesignMatrices,
    y: &DVector<f64>,
    sp: &SmoothParams,
    svd: &StackedSvd,
    coef: &mut DVector<f64>,
) -> Result<()> {
    let (n, q, p) = (dm.n(), dm.q_dim(), dm.p());
    let sigma = sigma_diag(&sp.gamma, dm)?;
    let nl = Dw::prod(n as f64, sp.lambda());
    let mut last = f64::INFINITY;
    for _ in 0..4 {
        // u = y − Rc − Zb
        let u: Vec<Dw> = (0..n)
            .map(|i| {
                let mut a = Dw::from(y[i]);
                for j in 0..q {
                    a += Dw::prod(-dm.r[(i, j)], coef[j]);
                }
                for j in 0..p {
                    a += Dw::prod(-dm.z[(i, j)], coef[q + j]);
                }
                a
            })
            .collect();
        let pen: Vec<Dw> = (0..q).map(|j| nl * coef[j]).collect();
        let mut g = DVector::zeros(q + p);
        for k in 0..q + p {
            let mut a = Dw::ZERO;
            for (i, ui) in u.iter().enumerate() {
                let w = if k < q { dm.r[(i, k)] } else { dm.z[(i, k - q)] };
                a += *ui * w;
            }
            if k < q {
                for (j, pj) in pen.iter().enumerate() {
                    a += *pj * -dm.q[(k, j)];
                }
            } else {
                a += Dw::prod(-sigma[k - q], coef[k]);
            }
            g[k] = a.to_f64();
        }
        let t = svd.v.transpose() * g;
        let delta = &svd.v * t.component_div(&svd.singular.map(|s| s * s));
        let size = delta.norm();
        if !size.is_finite() || size >= last {
            break;
        }
        *coef += &delta;
        last = size;
        if size <= f64::EPSILON * coef.norm() {
            break;
        }
    }
    Ok(())
}

/// Value of the penalized objective at arbitrary `(c, b)`.
pub fn objective_value(
    dm: &DesignMatrices,
    y: &[f64],
    sp: &SmoothParams,
    c: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<f64> {
    let yv = check_response(dm, y)?;
    let sigma = sigma_diag(&sp.gamma, dm)?;
    let resid = yv - &dm.r * c - &dm.z * b;
    Ok(resid.norm_squared()
        + b.iter().zip(sigma.iter()).map(|(b, s)| s * b * b).sum::<f64>()
        + dm.n() as f64 * sp.lambda() * (&dm.penalty_root * c).norm_squared())
}

/// `Ã(λ) = R (RᵀR + nλQ)⁺ Rᵀ`, the smoother without random effects.
pub fn abar_dense(dm: &DesignMatrices, log10_lambda: f64) -> Result<DMatrix<f64>> {
    let (n, q) = (dm.n(), dm.q_dim());
    let rl = dm.penalty_root.nrows();
    let mut x = DMatrix::zeros(n + rl, q);
    x.rows_mut(0, n).copy_from(&dm.r);
    x.rows_mut(n, rl)
        .copy_from(&(&dm.penalty_root * (n as f64 * 10f64.powf(log10_lambda)).sqrt()));
    let svd = stacked_svd(x, n, SolverOptions::default().rank_rel_tol)?;
    Ok(&svd.u_top * svd.u_top.transpose())
}

/// `(Zᵀ(I − Ã)Z + Σ)⁻¹` together with `Ã`.
fn abar_and_inner(dm: &DesignMatrices, sp: &SmoothParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let abar = abar_dense(dm, sp.log10_lambda)?;
    let n = dm.n();
    let sigma = DMatrix::from_diagonal(&sigma_diag(&sp.gamma, dm)?);
    let i_minus = DMatrix::identity(n, n) - &abar;
    let inner = dm.z.transpose() * &i_minus * &dm.z + sigma;
    Ok((abar, spd_inverse(&inner)?))
}

/// `A = Ã + (I−Ã)Z(Zᵀ(I−Ã)Z + Σ)⁻¹Zᵀ(I−Ã)`.
pub fn smoothing_matrix_dense(dm: &DesignMatrices, sp: &SmoothParams) -> Result<DMatrix<f64>> {
    let (abar, inner) = abar_and_inner(dm, sp)?;
    let n = dm.n();
    let f = (DMatrix::identity(n, n) - &abar) * &dm.z;
    Ok(&abar + &f * inner * f.transpose())
}

/// `M = Ã − ÃZ(Zᵀ(I−Ã)Z + Σ)⁻¹Zᵀ(I−Ã)`, so that `η̂ = MY`.
pub fn eta_matrix_dense(dm: &DesignMatrices, sp: &SmoothParams) -> Result<DMatrix<f64>> {
    let (abar, inner) = abar_and_inner(dm, sp)?;
    let n = dm.n();
    let f = (DMatrix::identity(n, n) - &abar) * &dm.z;
    Ok(&abar - &abar * &dm.z * inner * f.transpose())
}

/// `Q_Z = Z (ZᵀZ + Σ)⁻¹ Zᵀ`.
pub fn qz_matrix(dm: &DesignMatrices, sp: &SmoothParams) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_diagonal(&sigma_diag(&sp.gamma, dm)?);
    let d_inv = spd_inverse(&(dm.z.transpose() * &dm.z + sigma))?;
    Ok(&dm.z * d_inv * dm.z.transpose())
}

/// Pieces of the Schur-complement route: `Q_Z`, `T = (I − Q_Z)^{1/2}`, `T⁻¹`
/// and `G = T R E⁺ Rᵀ T` with `E = Rᵀ(I − Q_Z)R + nλQ`.
struct SchurParts {
    qz: DMatrix<f64>,
    t: DMatrix<f64>,
    t_inv: DMatrix<f64>,
    g: DMatrix<f64>,
}

fn schur_parts(dm: &DesignMatrices, sp: &SmoothParams) -> Result<SchurParts> {
    let (n, q) = (dm.n(), dm.q_dim());
    let qz = qz_matrix(dm, sp)?;
    let (t, t_inv) = sym_sqrt_pair(&(DMatrix::identity(n, n) - &qz))?;
    let rl = dm.penalty_root.nrows();
    let mut x = DMatrix::zeros(n + rl, q);
    x.rows_mut(0, n).copy_from(&(&t * &dm.r));
    x.rows_mut(n, rl)
        .copy_from(&(&dm.penalty_root * (n as f64 * sp.lambda()).sqrt()));
    let svd = stacked_svd(x, n, SolverOptions::default().rank_rel_tol)?;
    let g = &svd.u_top * svd.u_top.transpose();
    Ok(SchurParts { qz, t, t_inv, g })
}

/// `A = (I − Q_Z) R E⁺ Rᵀ (I − Q_Z) + Q_Z`, the Schur-complement form of the smoother.
pub fn smoothing_matrix_schur(dm: &DesignMatrices, sp: &SmoothParams) -> Result<DMatrix<f64>> {
    let parts = schur_parts(dm, sp)?;
    Ok(&parts.t * &parts.g * &parts.t + parts.qz)
}

/// `M = R E⁺ Rᵀ (I − Q_Z)`.
pub fn eta_matrix_schur(dm: &DesignMatrices, sp: &SmoothParams) -> Result<DMatrix<f64>> {
    let parts = schur_parts(dm, sp)?;
    Ok(&parts.t_inv * &parts.g * &parts.t)
}

/// Simultaneous diagonalization of `RᵀR` and `Q`.
///
/// There is an `n×k` matrix `U` with orthonormal columns and weights
/// `κ_i, μ_i ≥ 0` with `κ_i + μ_i = 1` such that `Ã(λ) = U diag(s) Uᵀ`, where
/// `s_i = κ_i / (κ_i + (nλ/ρ) μ_i)` and `ρ` balances the scales of `R` and `L`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    n: usize,
    u: DMatrix<f64>,
    kappa: DVector<f64>,
    mu: DVector<f64>,
    rho: f64,
}

impl Spectrum {
    pub fn new(dm: &DesignMatrices) -> Result<Self> {
        let (n, q) = (dm.n(), dm.q_dim());
        let rl = dm.penalty_root.nrows();
        let l_norm = dm.penalty_root.norm_squared();
        let rho = if l_norm > 0.0 {
            dm.r.norm_squared() / l_norm
        } else {
            1.0
        };
        let mut x = DMatrix::zeros(n + rl, q);
        x.rows_mut(0, n).copy_from(&dm.r);
        x.rows_mut(n, rl).copy_from(&(&dm.penalty_root * rho.sqrt()));
        let x_rows = x.nrows();
        let svd = x
            .try_svd(true, false, f64::EPSILON, 0)
            .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
        let u_full = svd.u.expect("requested U");
        let max = svd.singular_values.max();
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > 1e-13 * max)
            .collect();
        let u_r = DMatrix::from_fn(n, keep.len(), |i, j| u_full[(i, keep[j])]);
        let u_l = DMatrix::from_fn(x_rows - n, keep.len(), |i, j| u_full[(n + i, keep[j])]);
        let cs = u_r
            .try_svd(true, true, f64::EPSILON, 0)
            .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
        let p = cs.u.expect("requested U");
        let w = cs.v_t.expect("requested V").transpose();
        let lw = &u_l * &w;
        let kappa = cs.singular_values.map(|c| c * c);
        let mu = DVector::from_iterator(kappa.len(), lw.column_iter().map(|c| c.norm_squared()));
        Ok(Self {
            n,
            u: p,
            kappa,
            mu,
            rho,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Eigenvalues `s_i` of `Ã(λ)` on the columns of `U`.
    pub fn shrinkage(&self, log10_lambda: f64) -> DVector<f64> {
        let t = self.n as f64 * 10f64.powf(log10_lambda) / self.rho;
        self.kappa.zip_map(&self.mu, |k, m| {
            let d = k + t * m;
            if d > 0.0 {
                k / d
            } else {
                0.0
            }
        })
    }

    /// Bind a response and random-effect design to this spectrum.
    pub fn bind(self, z: &DMatrix<f64>, y: &[f64]) -> Result<SpectralProblem> {
        if z.nrows() != self.n || y.len() != self.n {
            return Err(Error::Argument("dimension mismatch binding spectrum".into()));
        }
        let yv = DVector::from_column_slice(y);
        let ut = self.u.transpose();
        let zu = &ut * z;
        let yu = &ut * &yv;
        Ok(SpectralProblem {
            spectrum: self,
            zu,
            yu,
            ztz: z.transpose() * z,
            zty: z.transpose() * &yv,
            yty: yv.norm_squared(),
            z: z.clone(),
            y: yv,
        })
    }
}

/// A response bound to a [`Spectrum`]; scores any `(λ, Σ)` cheaply.
#[derive(Debug, Clone)]
pub struct SpectralProblem {
    spectrum: Spectrum,
    z: DMatrix<f64>,
    y: DVector<f64>,
    zu: DMatrix<f64>,
    yu: DVector<f64>,
    ztz: DMatrix<f64>,
    zty: DVector<f64>,
    yty: f64,
}

/// Scalar summaries of a fit from the spectral path.
#[derive(Debug, Clone)]
pub struct QuickFit {
    pub rss: f64,
    pub tr_a: f64,
    pub b_hat: DVector<f64>,
    shrink: DVector<f64>,
    d_inv: DMatrix<f64>,
}

impl SpectralProblem {
    pub fn n(&self) -> usize {
        self.spectrum.n
    }

    /// `Zᵀ(I − Ã)^j Z` given the shrinkage `s`.
    fn z_power(&self, s: &DVector<f64>, j: i32) -> DMatrix<f64> {
        let w = s.map(|si| 1.0 - (1.0 - si).powi(j));
        let weighted = DMatrix::from_fn(self.zu.nrows(), self.zu.ncols(), |i, c| w[i] * self.zu[(i, c)]);
        &self.ztz - self.zu.transpose() * weighted
    }

    pub fn evaluate(&self, log10_lambda: f64, sigma: &DVector<f64>) -> Result<QuickFit> {
        let s = self.spectrum.shrinkage(log10_lambda);
        let p = self.z.ncols();
        let (b_hat, d_inv, tr_corr) = if p == 0 {
            (DVector::zeros(0), DMatrix::zeros(0, 0), 0.0)
        } else {
            let mut inner = self.z_power(&s, 1);
            for i in 0..p {
                inner[(i, i)] += sigma[i];
            }
            let t = &self.zty - self.zu.transpose() * s.component_mul(&self.yu);
            let d_inv = spd_inverse(&inner)?;
            let b = &d_inv * t;
            let corr = d_inv.component_mul(&self.z_power(&s, 2)).sum();
            (b, d_inv, corr)
        };
        // (I − A)Y = (I − Ã)(Y − Z b̂)
        let eu = &self.yu - &self.zu * &b_hat;
        let e_norm = self.yty - 2.0 * b_hat.dot(&self.zty) + (b_hat.transpose() * &self.ztz * &b_hat)[0];
        let shrunk: f64 = s
            .iter()
            .zip(eu.iter())
            .map(|(si, e)| (2.0 * si - si * si) * e * e)
            .sum();
        let rss = (e_norm - shrunk).max(0.0);
        let tr_a = s.sum() + tr_corr;
        if !rss.is_finite() || !tr_a.is_finite() {
            return Err(Error::Numeric("non-finite spectral score".into()));
        }
        Ok(QuickFit {
            rss,
            tr_a,
            b_hat,
            shrink: s,
            d_inv,
        })
    }

    /// `tr A²` for a fit from [`SpectralProblem::evaluate`].
    pub fn tr_a2(&self, fit: &QuickFit) -> f64 {
        let n = self.n() as f64;
        let s = &fit.shrink;
        let k = s.len() as f64;
        let tr_t2 = (n - k) + s.iter().map(|si| (1.0 - si).powi(2)).sum::<f64>();
        let (tr_t, cross, quartic) = if self.z.ncols() == 0 {
            (n - s.sum(), 0.0, 0.0)
        } else {
            let z2 = self.z_power(s, 2);
            let z3 = self.z_power(s, 3);
            let dz2 = &fit.d_inv * &z2;
            (
                n - s.sum() - fit.d_inv.component_mul(&z2).sum(),
                fit.d_inv.component_mul(&z3).sum(),
                dz2.component_mul(&dz2.transpose()).sum(),
            )
        };
        let tr_i_minus_a2 = tr_t2 - 2.0 * cross + quartic;
        n - 2.0 * tr_t + tr_i_minus_a2
    }

    /// `(η̂, Ŷ)` for a fit from [`SpectralProblem::evaluate`].
    pub fn fitted(&self, fit: &QuickFit) -> (DVector<f64>, DVector<f64>) {
        let eu = &self.yu - &self.zu * &fit.b_hat;
        let eta = &self.spectrum.u * fit.shrink.component_mul(&eu);
        let y_hat = &eta + &self.z * &fit.b_hat;
        (eta, y_hat)
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.y
    }
}
