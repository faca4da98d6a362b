//! Selection criteria, losses against a known truth, and the parameter search.
//!
//! The search evaluates a fixed grid over `(log10 λ, γ)` through the spectral
//! fast path, picks the best grid point (largest λ among near-ties) and refines
//! it with a bounded downhill simplex. The returned fit is always recomputed by
//! [`solve_fit`], and the reported score is evaluated on that fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_design, sigma_diag, Dataset, DesignMatrices, ModelSpec};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::simplex::{self, SimplexOptions};
use crate::solver::{
    eta_matrix_dense, pseudo_inverse, smoothing_matrix_dense, solve_fit, FitResult, SmoothParams,
    SpectralProblem, Spectrum,
};

/// Dense risks build `n×n` matrices; refuse beyond this size.
pub const MAX_DENSE_N: usize = 2000;

/// Known generating values of a simulated response.
#[derive(Debug, Clone)]
pub struct Truth {
    pub eta: DVector<f64>,
    pub b: DVector<f64>,
    pub sigma2: f64,
    /// Diagonal of the random-effect covariance `B`.
    pub b_var: DVector<f64>,
    /// One flag per grouping factor: `true` for real effects, `false` for latent ones.
    pub real_mask: Vec<bool>,
}

impl Truth {
    pub fn check(&self, dm: &DesignMatrices) -> Result<()> {
        if self.eta.len() != dm.n() {
            return Err(Error::Argument(format!(
                "truth has {} η values, design has {} rows",
                self.eta.len(),
                dm.n()
            )));
        }
        if self.b.len() != dm.p() || self.b_var.len() != dm.p() {
            return Err(Error::Argument(format!(
                "truth has {} random effects, design has {}",
                self.b.len(),
                dm.p()
            )));
        }
        if self.real_mask.len() != dm.factor_columns.len() {
            return Err(Error::Argument(format!(
                "real_mask has {} flags for {} factors",
                self.real_mask.len(),
                dm.factor_columns.len()
            )));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Argument(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }

    /// Per-column flag of `Z`: whether the column belongs to a real factor.
    fn real_columns(&self, dm: &DesignMatrices) -> Vec<bool> {
        let mut cols = vec![false; dm.p()];
        for (range, &real) in dm.factor_columns.iter().zip(&self.real_mask) {
            for c in range.clone() {
                cols[c] = real;
            }
        }
        cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Criterion {
    Gcv,
    UnbiasedRisk { sigma2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub criterion: Criterion,
    pub alpha: f64,
}

impl ScoreConfig {
    pub fn gcv(alpha: f64) -> Self {
        Self {
            criterion: Criterion::Gcv,
            alpha,
        }
    }

    pub fn unbiased_risk(sigma2: f64, alpha: f64) -> Self {
        Self {
            criterion: Criterion::UnbiasedRisk { sigma2 },
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::Argument(format!("alpha must be ≥ 1, got {}", self.alpha)));
        }
        if let Criterion::UnbiasedRisk { sigma2 } = self.criterion {
            if !(sigma2 > 0.0) || !sigma2.is_finite() {
                return Err(Error::Argument(format!("sigma2 must be positive, got {sigma2}")));
            }
        }
        Ok(())
    }

    fn value(&self, rss: f64, tr_a: f64, n: usize) -> Result<f64> {
        match self.criterion {
            Criterion::Gcv => v_value(rss, tr_a, n, self.alpha),
            Criterion::UnbiasedRisk { sigma2 } => Ok(u_value(rss, tr_a, n, sigma2, self.alpha)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    L1,
    L2,
    L3,
}

fn v_value(rss: f64, tr_a: f64, n: usize, alpha: f64) -> Result<f64> {
    let n = n as f64;
    let denom = (n - alpha * tr_a) / n;
    if !(denom > 0.0) {
        return Err(Error::ScoreUndefined(format!("n − α·tr A = {:.3e}", n * denom)));
    }
    Ok(rss / n / (denom * denom))
}

fn u_value(rss: f64, tr_a: f64, n: usize, sigma2: f64, alpha: f64) -> f64 {
    let n = n as f64;
    rss / n + 2.0 * sigma2 * alpha * tr_a / n
}

/// `V_α = (rss/n) / ((n − α tr A)/n)²`.
pub fn score_v(fit: &FitResult, alpha: f64) -> Result<f64> {
    v_value(fit.rss, fit.tr_a, fit.n, alpha)
}

/// `U_α = rss/n + 2σ²α tr A/n`.
pub fn score_u(fit: &FitResult, sigma2: f64, alpha: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Argument(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(u_value(fit.rss, fit.tr_a, fit.n, sigma2, alpha))
}

pub fn score(fit: &FitResult, cfg: &ScoreConfig) -> Result<f64> {
    cfg.validate()?;
    cfg.value(fit.rss, fit.tr_a, fit.n)
}

/// Variance estimate `rss / tr(I − A)`.
pub fn sigma_hat(fit: &FitResult) -> Result<f64> {
    let dof = fit.n as f64 - fit.tr_a;
    if !(dof > 0.0) {
        return Err(Error::ScoreUndefined(format!("n − tr A = {dof:.3e}")));
    }
    Ok(fit.rss / dof)
}

/// Orthogonal projection onto the complement of the column space of a matrix.
#[derive(Debug, Clone)]
struct ComplementProjector {
    basis: DMatrix<f64>,
    gram_pinv: DMatrix<f64>,
}

impl ComplementProjector {
    fn new(basis: DMatrix<f64>) -> Result<Self> {
        let gram_pinv = pseudo_inverse(&(basis.transpose() * &basis), 1e-12)?;
        Ok(Self { basis, gram_pinv })
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.basis.ncols() == 0 {
            return v.clone();
        }
        v - &self.basis * (&self.gram_pinv * (self.basis.transpose() * v))
    }

    fn matrix(&self) -> DMatrix<f64> {
        let n = self.basis.nrows();
        DMatrix::identity(n, n) - &self.basis * &self.gram_pinv * self.basis.transpose()
    }
}

/// Precomputed pieces for evaluating one of the losses on many fits.
#[derive(Debug, Clone)]
pub struct LossEvaluator {
    kind: LossKind,
    target: DVector<f64>,
    z: DMatrix<f64>,
    /// Columns of `Z` whose fitted effects enter the error vector.
    real_cols: Vec<bool>,
    proj: ComplementProjector,
    n: usize,
}

impl LossEvaluator {
    pub fn new(dm: &DesignMatrices, truth: &Truth, kind: LossKind) -> Result<Self> {
        truth.check(dm)?;
        let n = dm.n();
        let real_cols = match kind {
            LossKind::L1 => vec![true; dm.p()],
            LossKind::L2 => vec![false; dm.p()],
            LossKind::L3 => truth.real_columns(dm),
        };
        let latent: Vec<usize> = (0..dm.p()).filter(|&c| !real_cols[c]).collect();
        let proj = ComplementProjector::new(dm.z.select_columns(&latent))?;
        let masked_b = DVector::from_iterator(
            dm.p(),
            truth
                .b
                .iter()
                .zip(&real_cols)
                .map(|(b, &r)| if r { *b } else { 0.0 }),
        );
        let target = &truth.eta + &dm.z * masked_b;
        Ok(Self {
            kind,
            target,
            z: dm.z.clone(),
            real_cols,
            proj,
            n,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    /// Loss for fitted `η̂` and `b̂`.
    pub fn eval(&self, eta_hat: &DVector<f64>, b_hat: &DVector<f64>) -> f64 {
        let masked = DVector::from_iterator(
            b_hat.len(),
            b_hat
                .iter()
                .zip(&self.real_cols)
                .map(|(b, &r)| if r { *b } else { 0.0 }),
        );
        let err = eta_hat + &self.z * masked - &self.target;
        let projected = self.proj.apply(&err);
        err.dot(&projected) / self.n as f64
    }

    pub fn eval_fit(&self, fit: &FitResult) -> f64 {
        if self.kind == LossKind::L1 {
            // Ŷ − η − Zb computed from the stored fitted values
            return (&fit.y_hat - &self.target).norm_squared() / self.n as f64;
        }
        self.eval(&fit.eta_hat, &fit.b_hat)
    }
}

/// `n⁻¹‖Ŷ − η − Zb‖²`.
pub fn loss_l1(fit: &FitResult, truth: &Truth, dm: &DesignMatrices) -> Result<f64> {
    Ok(LossEvaluator::new(dm, truth, LossKind::L1)?.eval_fit(fit))
}

/// `n⁻¹(η̂ − η)ᵀ P_Z^⊥ (η̂ − η)`.
pub fn loss_l2(fit: &FitResult, truth: &Truth, dm: &DesignMatrices) -> Result<f64> {
    Ok(LossEvaluator::new(dm, truth, LossKind::L2)?.eval_fit(fit))
}

/// `n⁻¹ eᵀ P_{Z2}^⊥ e` with `e = η̂ + Z1b̂1 − η − Z1b1`, where `Z1` holds the real factors.
pub fn loss_l3(fit: &FitResult, truth: &Truth, dm: &DesignMatrices) -> Result<f64> {
    Ok(LossEvaluator::new(dm, truth, LossKind::L3)?.eval_fit(fit))
}

fn check_dense_size(dm: &DesignMatrices) -> Result<()> {
    if dm.n() > MAX_DENSE_N {
        return Err(Error::Argument(format!(
            "dense risk limited to n ≤ {MAX_DENSE_N}, got {}",
            dm.n()
        )));
    }
    Ok(())
}

/// Expected `L1`: `n⁻¹{ηᵀ(I−A)²η + tr((I−A)²ZBZᵀ) + σ² tr A²}`.
pub fn risk_r1(dm: &DesignMatrices, sp: &SmoothParams, truth: &Truth) -> Result<f64> {
    truth.check(dm)?;
    check_dense_size(dm)?;
    let n = dm.n();
    let a = smoothing_matrix_dense(dm, sp)?;
    let i_minus = DMatrix::identity(n, n) - &a;
    let sq = &i_minus * &i_minus;
    let zbz = &dm.z * DMatrix::from_diagonal(&truth.b_var) * dm.z.transpose();
    let bias = truth.eta.dot(&(&sq * &truth.eta));
    let effects = sq.component_mul(&zbz).sum();
    let variance = truth.sigma2 * a.norm_squared();
    Ok((bias + effects + variance) / n as f64)
}

/// Expected `L2`: `n⁻¹{ηᵀ(I−M)ᵀP⊥(I−M)η + tr(MᵀP⊥M ZBZᵀ) + σ² tr(MᵀP⊥M)}`.
pub fn risk_r2(dm: &DesignMatrices, sp: &SmoothParams, truth: &Truth) -> Result<f64> {
    truth.check(dm)?;
    check_dense_size(dm)?;
    let n = dm.n();
    let m = eta_matrix_dense(dm, sp)?;
    let perp = ComplementProjector::new(dm.z.clone())?.matrix();
    let i_minus = DMatrix::identity(n, n) - &m;
    let bias_op = i_minus.transpose() * &perp * &i_minus;
    let var_op = m.transpose() * &perp * &m;
    let zbz = &dm.z * DMatrix::from_diagonal(&truth.b_var) * dm.z.transpose();
    let bias = truth.eta.dot(&(&bias_op * &truth.eta));
    let effects = var_op.component_mul(&zbz).sum();
    let variance = truth.sigma2 * var_op.trace();
    Ok((bias + effects + variance) / n as f64)
}

/// Bounds and grids for the parameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBox {
    pub log10_lambda: (f64, f64),
    pub lambda_step: f64,
    pub gamma: (f64, f64),
    pub gamma_grid: Vec<f64>,
    /// Exponential-spline rate, searched on `log10 θ`; `θ = 0` is tried separately.
    pub log10_theta: (f64, f64),
    /// ANOVA interaction weight `θ12/θ1`, searched on a log scale; `0` is tried separately.
    pub log10_theta_ratio: (f64, f64),
    pub kernel_step: f64,
    /// Above this many grid points the γ grid is restricted to its diagonal.
    pub max_grid_points: usize,
    pub tie_tol: f64,
    pub simplex: SimplexSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimplexSettings {
    pub rel_tol: f64,
    pub x_tol: f64,
    pub max_evals: usize,
}

impl Default for SimplexSettings {
    fn default() -> Self {
        let d = SimplexOptions::default();
        Self {
            rel_tol: d.rel_tol,
            x_tol: d.x_tol,
            max_evals: d.max_evals,
        }
    }
}

impl From<SimplexSettings> for SimplexOptions {
    fn from(s: SimplexSettings) -> Self {
        SimplexOptions {
            rel_tol: s.rel_tol,
            x_tol: s.x_tol,
            max_evals: s.max_evals,
        }
    }
}

impl Default for SearchBox {
    fn default() -> Self {
        Self {
            log10_lambda: (-8.0, 2.0),
            lambda_step: 0.5,
            gamma: (-20.0, 20.0),
            gamma_grid: vec![-6.0, -3.0, 0.0, 3.0, 6.0],
            log10_theta: (-4.0, 2.0),
            log10_theta_ratio: (-4.0, 4.0),
            kernel_step: 1.0,
            max_grid_points: 20_000,
            tie_tol: 1e-10,
            simplex: SimplexSettings::default(),
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Argument(format!(
            "{name} range ({lo}, {hi}) is empty or non-finite"
        )));
    }
    Ok(())
}

fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=count).map(|i| lo + i as f64 * step).collect()
}

impl SearchBox {
    pub fn validate(&self) -> Result<()> {
        check_range("log10_lambda", self.log10_lambda)?;
        check_range("gamma", self.gamma)?;
        check_range("log10_theta", self.log10_theta)?;
        check_range("log10_theta_ratio", self.log10_theta_ratio)?;
        if !(self.lambda_step > 0.0) || !(self.kernel_step > 0.0) {
            return Err(Error::Argument("grid steps must be positive".into()));
        }
        if self.gamma_grid.is_empty() {
            return Err(Error::Argument("gamma_grid is empty".into()));
        }
        Ok(())
    }

    pub fn lambda_axis(&self) -> Vec<f64> {
        axis(self.log10_lambda.0, self.log10_lambda.1, self.lambda_step)
    }

    fn gamma_axis(&self) -> Vec<f64> {
        let (lo, hi) = self.gamma;
        self.gamma_grid.iter().map(|g| g.clamp(lo, hi)).collect()
    }

    /// Grid points as `[log10 λ, γ_1, …, γ_g]`.
    pub fn grid(&self, n_gamma: usize) -> Vec<Vec<f64>> {
        let lambdas = self.lambda_axis();
        let gammas = self.gamma_axis();
        let full = (gammas.len() as f64).powi(n_gamma as i32) * lambdas.len() as f64;
        let combos: Vec<Vec<f64>> = if full <= self.max_grid_points as f64 {
            let mut combos = vec![Vec::new()];
            for _ in 0..n_gamma {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        gammas.iter().map(move |&g| {
                            let mut c = c.clone();
                            c.push(g);
                            c
                        })
                    })
                    .collect();
            }
            combos
        } else {
            gammas.iter().map(|&g| vec![g; n_gamma]).collect()
        };
        let mut points = Vec::with_capacity(lambdas.len() * combos.len());
        for &l in &lambdas {
            for c in &combos {
                let mut p = Vec::with_capacity(1 + n_gamma);
                p.push(l);
                p.extend_from_slice(c);
                points.push(p);
            }
        }
        points
    }

    fn bounds(&self, n_gamma: usize) -> Vec<(f64, f64)> {
        let mut b = vec![self.log10_lambda];
        b.extend(std::iter::repeat_n(self.gamma, n_gamma));
        b
    }

    fn steps(&self, n_gamma: usize) -> Vec<f64> {
        let mut s = vec![self.lambda_step];
        let spacing = self
            .gamma_grid
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(f64::INFINITY, f64::min);
        s.extend(std::iter::repeat_n(
            if spacing.is_finite() { spacing } else { 1.0 },
            n_gamma,
        ));
        s
    }
}

/// What the search minimizes.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'t> {
    Score(ScoreConfig),
    /// A loss against known truth (oracle selection).
    Loss(LossKind, &'t Truth),
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub params: SmoothParams,
    pub fit: FitResult,
    /// Objective re-evaluated on `fit`.
    pub score: f64,
    /// Number of objective evaluations, grid included.
    pub evals: usize,
    pub converged: bool,
}

/// Index of the best value, preferring the largest `log10 λ` among near-ties.
fn pick_best(points: &[Vec<f64>], values: &[f64], tie_tol: f64) -> Option<usize> {
    let min = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let tol = tie_tol * min.abs().max(1.0);
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v <= min + tol && best.is_none_or(|b| points[i][0] > points[b][0]) {
            best = Some(i);
        }
    }
    best
}

/// Parameter search over `(log10 λ, γ)` for one design and response.
pub struct Searcher<'d> {
    dm: &'d DesignMatrices,
    problem: SpectralProblem,
    y: Vec<f64>,
    bx: SearchBox,
    grid: Vec<Vec<f64>>,
    /// `(rss, tr A)` per grid point, `None` where the fast path failed.
    grid_stats: Vec<Option<(f64, f64)>>,
}

impl<'d> Searcher<'d> {
    pub fn new(dm: &'d DesignMatrices, y: &[f64], bx: &SearchBox) -> Result<Self> {
        bx.validate()?;
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
        let problem = Spectrum::new(dm)?.bind(&dm.z, y)?;
        let grid = bx.grid(dm.n_gamma);
        let grid_stats = grid
            .par_iter()
            .map(|x| {
                let sigma = sigma_diag(&x[1..], dm).ok()?;
                let q = problem.evaluate(x[0], &sigma).ok()?;
                Some((q.rss, q.tr_a))
            })
            .collect();
        Ok(Self {
            dm,
            problem,
            y: y.to_vec(),
            bx: bx.clone(),
            grid,
            grid_stats,
        })
    }

    pub fn design(&self) -> &DesignMatrices {
        self.dm
    }

    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }

    /// Objective values on the grid, `+∞` where undefined.
    pub fn grid_values(&self, objective: &Objective) -> Result<Vec<f64>> {
        let n = self.dm.n();
        Ok(match objective {
            Objective::Score(cfg) => {
                cfg.validate()?;
                self.grid_stats
                    .iter()
                    .map(|s| match s {
                        Some((rss, tr_a)) => cfg.value(*rss, *tr_a, n).unwrap_or(f64::INFINITY),
                        None => f64::INFINITY,
                    })
                    .collect()
            }
            Objective::Loss(kind, truth) => {
                let eval = LossEvaluator::new(self.dm, truth, *kind)?;
                self.grid.par_iter().map(|x| self.loss_at(&eval, x)).collect()
            }
        })
    }

    fn loss_at(&self, eval: &LossEvaluator, x: &[f64]) -> f64 {
        let Ok(sigma) = sigma_diag(&x[1..], self.dm) else {
            return f64::INFINITY;
        };
        match self.problem.evaluate(x[0], &sigma) {
            Ok(q) => {
                let (eta, _) = self.problem.fitted(&q);
                eval.eval(&eta, &q.b_hat)
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn score_at(&self, cfg: &ScoreConfig, x: &[f64]) -> f64 {
        let Ok(sigma) = sigma_diag(&x[1..], self.dm) else {
            return f64::INFINITY;
        };
        self.problem
            .evaluate(x[0], &sigma)
            .and_then(|q| cfg.value(q.rss, q.tr_a, self.dm.n()))
            .unwrap_or(f64::INFINITY)
    }

    /// Objective at an arbitrary point through the fast path.
    pub fn value_at(&self, objective: &Objective, params: &SmoothParams) -> Result<f64> {
        let x = to_point(params);
        Ok(match objective {
            Objective::Score(cfg) => self.score_at(cfg, &x),
            Objective::Loss(kind, truth) => self.loss_at(&LossEvaluator::new(self.dm, truth, *kind)?, &x),
        })
    }

    /// Best grid point under the tie rule, with its value.
    pub fn best_grid_point(&self, objective: &Objective) -> Result<(Vec<f64>, f64)> {
        let values = self.grid_values(objective)?;
        let i = pick_best(&self.grid, &values, self.bx.tie_tol)
            .ok_or_else(|| Error::Optimization("objective undefined at every grid point".into()))?;
        Ok((self.grid[i].clone(), values[i]))
    }

    pub fn select(&self, objective: &Objective) -> Result<Selection> {
        self.select_with_starts(objective, &[])
    }

    /// Grid search and simplex refinement; `extra_starts` are additional candidate
    /// points whose own refinements compete with the grid's.
    pub fn select_with_starts(
        &self,
        objective: &Objective,
        extra_starts: &[SmoothParams],
    ) -> Result<Selection> {
        let (start, start_value) = self.best_grid_point(objective)?;
        let loss_eval = match objective {
            Objective::Loss(kind, truth) => Some(LossEvaluator::new(self.dm, truth, *kind)?),
            Objective::Score(_) => None,
        };
        let f = |x: &[f64]| match (objective, &loss_eval) {
            (Objective::Score(cfg), _) => self.score_at(cfg, x),
            (Objective::Loss(..), Some(eval)) => self.loss_at(eval, x),
            (Objective::Loss(..), None) => f64::INFINITY,
        };
        let g = self.dm.n_gamma;
        let bounds = self.bx.bounds(g);
        let steps = self.bx.steps(g);
        let opts: SimplexOptions = self.bx.simplex.into();

        let mut evals = self.grid.len();
        let refine = |x0: &[f64], evals: &mut usize| {
            let r = simplex::minimize(f, x0, &steps, &bounds, &opts);
            *evals += r.evals;
            r
        };
        let mut best = refine(&start, &mut evals);
        if start_value < best.value {
            best.x = start;
            best.value = start_value;
        }
        for sp in extra_starts {
            let x0 = to_point(sp);
            if x0.len() != 1 + g {
                return Err(Error::Argument("extra start has wrong γ length".into()));
            }
            let r = refine(&x0, &mut evals);
            if r.value < best.value {
                best = r;
            }
        }

        let mut params = SmoothParams::new(best.x[0], best.x[1..].to_vec());
        params.kernel_theta = kernel_theta(&self.dm.kernel);
        let fit = solve_fit(self.dm, &self.y, &params)?;
        let score = match (objective, &loss_eval) {
            (Objective::Score(cfg), _) => cfg.value(fit.rss, fit.tr_a, fit.n)?,
            (_, Some(eval)) => eval.eval_fit(&fit),
            _ => unreachable!("loss objective always has an evaluator"),
        };
        Ok(Selection {
            params,
            fit,
            score,
            evals,
            converged: best.converged,
        })
    }
}

fn to_point(sp: &SmoothParams) -> Vec<f64> {
    let mut x = vec![sp.log10_lambda];
    x.extend_from_slice(&sp.gamma);
    x
}

fn kernel_theta(k: &KernelSpec) -> Vec<f64> {
    match k.family {
        KernelFamily::CubicSpline => Vec::new(),
        KernelFamily::ExponentialSpline => vec![k.theta],
        KernelFamily::AnovaSpline => vec![if k.theta1 > 0.0 { k.theta12 / k.theta1 } else { 0.0 }],
    }
}

/// Two-stage search of `(log10 λ, γ)` minimizing a GCV or unbiased-risk score.
pub fn optimize(dm: &DesignMatrices, y: &[f64], cfg: &ScoreConfig, bx: &SearchBox) -> Result<Selection> {
    cfg.validate()?;
    Searcher::new(dm, y, bx)?.select(&Objective::Score(*cfg))
}

/// Oracle search: minimizes the true loss instead of a score.
pub fn optimize_oracle(
    dm: &DesignMatrices,
    y: &[f64],
    truth: &Truth,
    kind: LossKind,
    bx: &SearchBox,
) -> Result<Selection> {
    Searcher::new(dm, y, bx)?.select(&Objective::Loss(kind, truth))
}

/// A selection that may also have chosen a kernel parameter.
#[derive(Debug, Clone)]
pub struct ModelSelection {
    pub spec: ModelSpec,
    pub design: DesignMatrices,
    pub selection: Selection,
}

/// The kernel parameter searched for a family, if any, with its log10 box.
fn kernel_axis(spec: &KernelSpec, bx: &SearchBox) -> Option<(f64, f64)> {
    match spec.family {
        KernelFamily::CubicSpline => None,
        KernelFamily::ExponentialSpline => Some(bx.log10_theta),
        KernelFamily::AnovaSpline if spec.additive => None,
        KernelFamily::AnovaSpline => Some(bx.log10_theta_ratio),
    }
}

/// Kernel with its searched parameter set; `None` selects the zero candidate.
fn kernel_at(spec: &KernelSpec, log10_value: Option<f64>) -> KernelSpec {
    let value = log10_value.map_or(0.0, |v| 10f64.powf(v));
    let mut k = spec.clone();
    match k.family {
        KernelFamily::ExponentialSpline => k.theta = value,
        KernelFamily::AnovaSpline => {
            k.theta1 = 1.0;
            k.theta12 = value;
        }
        KernelFamily::CubicSpline => {}
    }
    k
}

/// Like [`optimize`], and additionally searches the exponential rate `θ` or the
/// ANOVA ratio `θ12/θ1` (with `θ1 = 1`). The zero value of the kernel parameter is
/// fitted separately and wins ties.
pub fn optimize_model(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &ScoreConfig,
    bx: &SearchBox,
) -> Result<ModelSelection> {
    cfg.validate()?;
    bx.validate()?;
    let objective = Objective::Score(*cfg);
    let Some((lo, hi)) = kernel_axis(&spec.kernel, bx) else {
        let mut spec = spec.clone();
        if spec.kernel.family == KernelFamily::AnovaSpline {
            spec.kernel = kernel_at(&spec.kernel, None);
        }
        let design = build_design(&spec, data)?;
        let selection = Searcher::new(&design, &data.y, bx)?.select(&objective)?;
        return Ok(ModelSelection {
            spec,
            design,
            selection,
        });
    };
    let with_kernel = |v: Option<f64>| {
        let mut s = spec.clone();
        s.kernel = kernel_at(&spec.kernel, v);
        s
    };

    // stage 1: joint grid over the kernel axis and (λ, γ)
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evals = 0;
    for v in axis(lo, hi, bx.kernel_step) {
        let s = with_kernel(Some(v));
        let dm = build_design(&s, data)?;
        let searcher = Searcher::new(&dm, &data.y, bx)?;
        evals += searcher.grid().len();
        if let Ok((x, value)) = searcher.best_grid_point(&objective) {
            if best.as_ref().is_none_or(|(_, b)| value < *b) {
                let mut point = vec![v];
                point.extend(x);
                best = Some((point, value));
            }
        }
    }
    let (start, _) =
        best.ok_or_else(|| Error::Optimization("objective undefined at every grid point".into()))?;

    // stage 2: simplex over (kernel, log10 λ, γ), rebuilding the design per kernel value
    let g = spec.n_gamma();
    let f = |x: &[f64]| -> f64 {
        let s = with_kernel(Some(x[0]));
        let Ok(dm) = build_design(&s, data) else {
            return f64::INFINITY;
        };
        let Ok(fit) = solve_fit(&dm, &data.y, &SmoothParams::new(x[1], x[2..].to_vec())) else {
            return f64::INFINITY;
        };
        cfg.value(fit.rss, fit.tr_a, fit.n).unwrap_or(f64::INFINITY)
    };
    let mut bounds = vec![(lo, hi)];
    bounds.extend(bx.bounds(g));
    let mut steps = vec![bx.kernel_step];
    steps.extend(bx.steps(g));
    let r = simplex::minimize(f, &start, &steps, &bounds, &bx.simplex.into());
    evals += r.evals;
    let x = if r.value <= f(&start) { r.x } else { start };

    let positive_spec = with_kernel(Some(x[0]));
    let positive_dm = build_design(&positive_spec, data)?;
    let mut params = SmoothParams::new(x[1], x[2..].to_vec());
    params.kernel_theta = kernel_theta(&positive_spec.kernel);
    let fit = solve_fit(&positive_dm, &data.y, &params)?;
    let positive_sel = Selection {
        score: cfg.value(fit.rss, fit.tr_a, fit.n)?,
        params,
        fit,
        evals,
        converged: r.converged,
    };

    let zero_spec = with_kernel(None);
    let zero = build_design(&zero_spec, data).and_then(|dm| {
        Searcher::new(&dm, &data.y, bx)?
            .select(&objective)
            .map(|s| (dm, s))
    });
    match zero {
        Ok((dm, sel)) if sel.score <= positive_sel.score + bx.tie_tol * positive_sel.score.abs().max(1.0) => {
            let mut sel = sel;
            sel.evals += positive_sel.evals;
            Ok(ModelSelection {
                spec: zero_spec,
                design: dm,
                selection: sel,
            })
        }
        _ => Ok(ModelSelection {
            spec: positive_spec,
            design: positive_dm,
            selection: positive_sel,
        }),
    }
}
