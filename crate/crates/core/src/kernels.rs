//! Reproducing kernels and null-space bases for the supported spline families.
//!
//! Three families are available:
//!
//! * cubic smoothing spline on `[0, a]` with `J(η) = ∫ η''²`, null space `{1, x}`;
//! * exponential spline, fitted as a cubic spline in `x̃ = (1 - e^{-θx})/θ`;
//! * tensor-product ANOVA spline in `(x, τ)` with `t` treatment levels, built from
//!   the cubic kernel and the averaging contrast `I[τ1 = τ2] - 1/t`.
//!
//! Treatment levels `τ` are 1-based, matching the contrast basis
//! `I[τ = j] - 1/t, j = 1, …, t-1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    CubicSpline,
    ExponentialSpline,
    AnovaSpline,
}

/// Kernel family plus its parameters.
///
/// `theta` is only read by [`KernelFamily::ExponentialSpline`]; `theta1`,
/// `theta12`, `levels` and `additive` only by [`KernelFamily::AnovaSpline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub domain_upper: f64,
    pub theta: f64,
    pub theta1: f64,
    pub theta12: f64,
    pub levels: usize,
    pub additive: bool,
}

/// A covariate value, with a treatment level for ANOVA kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariatePoint {
    pub x: f64,
    pub tau: Option<usize>,
}

impl CovariatePoint {
    pub fn new(x: f64) -> Self {
        Self { x, tau: None }
    }

    pub fn with_level(x: f64, tau: usize) -> Self {
        Self { x, tau: Some(tau) }
    }
}

/// Role of a null-space basis function in the ANOVA decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisTerm {
    Constant,
    Linear,
    /// `I[τ = j] - 1/t` (treatment main effect), `j` 1-based.
    Treatment(usize),
    /// `(I[τ = j] - 1/t) x` (parametric interaction), `j` 1-based.
    Interaction(usize),
}

impl KernelSpec {
    pub fn cubic(domain_upper: f64) -> Self {
        Self {
            family: KernelFamily::CubicSpline,
            domain_upper,
            theta: 0.0,
            theta1: 1.0,
            theta12: 0.0,
            levels: 1,
            additive: false,
        }
    }

    pub fn exponential(domain_upper: f64, theta: f64) -> Self {
        Self {
            family: KernelFamily::ExponentialSpline,
            theta,
            ..Self::cubic(domain_upper)
        }
    }

    pub fn anova(domain_upper: f64, levels: usize, theta1: f64, theta12: f64) -> Self {
        Self {
            family: KernelFamily::AnovaSpline,
            domain_upper,
            theta: 0.0,
            theta1,
            theta12,
            levels,
            additive: false,
        }
    }

    /// Parallel-curves ANOVA model: no smooth interaction and no `(I[τ=j] - 1/t)x` terms.
    pub fn anova_additive(domain_upper: f64, levels: usize, theta1: f64) -> Self {
        Self {
            additive: true,
            ..Self::anova(domain_upper, levels, theta1, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.domain_upper.is_finite() && self.domain_upper > 0.0) {
            return Err(Error::Domain(format!(
                "domain upper bound must be positive, got {}",
                self.domain_upper
            )));
        }
        for (name, v) in [
            ("theta", self.theta),
            ("theta1", self.theta1),
            ("theta12", self.theta12),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.levels == 0 {
            return Err(Error::Domain("treatment level count must be >= 1".into()));
        }
        if self.additive && self.theta12 != 0.0 {
            return Err(Error::Domain("additive ANOVA kernel requires theta12 = 0".into()));
        }
        Ok(())
    }

    /// Dimension `m` of the null space of the penalty.
    pub fn null_dim(&self) -> usize {
        match self.family {
            KernelFamily::CubicSpline | KernelFamily::ExponentialSpline => 2,
            KernelFamily::AnovaSpline if self.additive => self.levels + 1,
            KernelFamily::AnovaSpline => 2 * self.levels,
        }
    }

    pub fn nullspace_terms(&self) -> Vec<BasisTerm> {
        let mut terms = vec![BasisTerm::Constant, BasisTerm::Linear];
        if self.family == KernelFamily::AnovaSpline {
            terms.extend((1..self.levels).map(BasisTerm::Treatment));
            if !self.additive {
                terms.extend((1..self.levels).map(BasisTerm::Interaction));
            }
        }
        terms
    }

    /// Upper end of the working coordinate (`ã` for the exponential spline).
    pub fn working_upper(&self) -> f64 {
        match self.family {
            KernelFamily::ExponentialSpline => exp_transform(self.domain_upper, self.theta),
            _ => self.domain_upper,
        }
    }

    pub fn check_point(&self, p: &CovariatePoint) -> Result<()> {
        if !(p.x.is_finite() && p.x >= 0.0 && p.x <= self.domain_upper) {
            return Err(Error::Domain(format!(
                "covariate {} outside [0, {}]",
                p.x, self.domain_upper
            )));
        }
        if self.family == KernelFamily::AnovaSpline {
            match p.tau {
                Some(tau) if (1..=self.levels).contains(&tau) => {}
                Some(tau) => {
                    return Err(Error::Domain(format!(
                        "treatment level {tau} outside 1..={}",
                        self.levels
                    )))
                }
                None => return Err(Error::Domain("ANOVA kernel needs a treatment level".into())),
            }
        }
        Ok(())
    }

    /// Evaluate `R_J(p1, p2)` for any family.
    pub fn rk(&self, p1: &CovariatePoint, p2: &CovariatePoint) -> Result<f64> {
        match self.family {
            KernelFamily::CubicSpline => {
                self.check_point(p1)?;
                self.check_point(p2)?;
                cubic_rk(p1.x, p2.x, self.domain_upper)
            }
            KernelFamily::ExponentialSpline => {
                self.check_point(p1)?;
                self.check_point(p2)?;
                cubic_rk(
                    exp_transform(p1.x, self.theta),
                    exp_transform(p2.x, self.theta),
                    self.working_upper(),
                )
            }
            KernelFamily::AnovaSpline => anova_rk(p1, p2, self),
        }
    }

    pub fn nullspace(&self, p: &CovariatePoint) -> Result<Vec<f64>> {
        nullspace_basis(p, self)
    }
}

/// `∫_0^a (x1 - u)_+ (x2 - u)_+ du` in closed form.
pub fn cubic_rk(x1: f64, x2: f64, a: f64) -> Result<f64> {
    for x in [x1, x2] {
        if !(x.is_finite() && x >= 0.0 && x <= a) {
            return Err(Error::Domain(format!("covariate {x} outside [0, {a}]")));
        }
    }
    let m = x1.min(x2);
    Ok(x1 * x2 * m - (x1 + x2) * m * m / 2.0 + m * m * m / 3.0)
}

/// `x̃ = (1 - e^{-θx})/θ`, and exactly `x` at `θ = 0`.
pub fn exp_transform(x: f64, theta: f64) -> f64 {
    if theta == 0.0 {
        x
    } else {
        -(-theta * x).exp_m1() / theta
    }
}

/// Main-effect and interaction parts of the ANOVA kernel, unweighted.
///
/// Returns `(rk, (I[τ1=τ2] - 1/t) rk)` with `rk` the cubic kernel.
pub fn anova_rk_parts(p1: &CovariatePoint, p2: &CovariatePoint, spec: &KernelSpec) -> Result<(f64, f64)> {
    if spec.family != KernelFamily::AnovaSpline {
        return Err(Error::Argument("anova_rk_parts needs an ANOVA kernel".into()));
    }
    spec.check_point(p1)?;
    spec.check_point(p2)?;
    let base = cubic_rk(p1.x, p2.x, spec.domain_upper)?;
    let contrast = if p1.tau == p2.tau { 1.0 } else { 0.0 } - 1.0 / spec.levels as f64;
    Ok((base, contrast * base))
}

pub fn anova_rk(p1: &CovariatePoint, p2: &CovariatePoint, spec: &KernelSpec) -> Result<f64> {
    let (main, inter) = anova_rk_parts(p1, p2, spec)?;
    Ok(spec.theta1 * main + spec.theta12 * inter)
}

/// Null-space basis `φ_ν(p)`, in the order reported by [`KernelSpec::nullspace_terms`].
pub fn nullspace_basis(p: &CovariatePoint, spec: &KernelSpec) -> Result<Vec<f64>> {
    spec.check_point(p)?;
    let x = match spec.family {
        KernelFamily::ExponentialSpline => exp_transform(p.x, spec.theta),
        _ => p.x,
    };
    let terms = spec.nullspace_terms();
    let t = spec.levels as f64;
    let contrast = |j: usize| if p.tau == Some(j) { 1.0 } else { 0.0 } - 1.0 / t;
    Ok(terms
        .iter()
        .map(|term| match *term {
            BasisTerm::Constant => 1.0,
            BasisTerm::Linear => x,
            BasisTerm::Treatment(j) => contrast(j),
            BasisTerm::Interaction(j) => contrast(j) * x,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Adaptive Simpson quadrature, independent of the closed form.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            let c = 0.5 * (a + b);
            (b - a) / 6.0 * (f(a) + 4.0 * f(c) + f(b))
        }
        fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let c = 0.5 * (a + b);
            let left = simpson(f, a, c);
            let right = simpson(f, c, b);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            recurse(f, a, c, left, tol / 2.0, depth - 1) + recurse(f, c, b, right, tol / 2.0, depth - 1)
        }
        recurse(f, a, b, simpson(f, a, b), tol, 50)
    }

    fn quad_rk(x1: f64, x2: f64, a: f64) -> f64 {
        let f = move |u: f64| (x1 - u).max(0.0) * (x2 - u).max(0.0);
        // split at the kink so the integrand is a polynomial on each piece
        let m = x1.min(x2);
        adaptive_simpson(&f, 0.0, m, 1e-13) + adaptive_simpson(&f, m, a, 1e-13)
    }

    #[test]
    fn cubic_rk_examples() {
        assert_eq!(cubic_rk(0.0, 0.7, 1.0).unwrap(), 0.0);
        // frozen from adaptive quadrature
        assert!((quad_rk(1.0, 1.0, 1.0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((quad_rk(0.5, 1.0, 1.0) - 0.104_166_666_666_666_7).abs() < 1e-12);
        assert!((cubic_rk(1.0, 1.0, 1.0).unwrap() - 0.333_333_333_333_333_3).abs() < 1e-15);
        assert!((cubic_rk(0.5, 1.0, 1.0).unwrap() - 0.104_166_666_666_666_7).abs() < 1e-15);
    }

    #[test]
    fn cubic_rk_matches_quadrature_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (x1, x2): (f64, f64) = (rng.random(), rng.random());
            let closed = cubic_rk(x1, x2, 1.0).unwrap();
            assert!((closed - quad_rk(x1, x2, 1.0)).abs() <= 1e-8);
        }
    }

    #[test]
    fn cubic_rk_rejects_out_of_domain() {
        assert!(matches!(cubic_rk(-0.1, 0.5, 1.0), Err(Error::Domain(_))));
        assert!(matches!(cubic_rk(0.1, 1.5, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn exp_transform_examples() {
        assert_eq!(exp_transform(0.4, 0.0), 0.4);
        assert!((exp_transform(1.0, 1.0) - 0.632_120_558_828_557_7).abs() < 1e-15);
        assert!((exp_transform(2.0, 0.5) - 1.264_241_117_657_115_4).abs() < 1e-15);
    }

    #[test]
    fn exp_transform_is_continuous_at_zero() {
        for i in 0..=100 {
            let x = i as f64 * 0.1;
            assert!((exp_transform(x, 1e-8) - x).abs() <= 1e-6);
        }
    }

    #[test]
    fn anova_rk_examples() {
        let p1 = CovariatePoint::with_level(1.0, 1);
        let p2 = CovariatePoint::with_level(1.0, 2);
        let zero = KernelSpec::anova(1.0, 2, 0.0, 0.0);
        assert_eq!(anova_rk(&p1, &p2, &zero).unwrap(), 0.0);
        let main = KernelSpec::anova(1.0, 2, 1.0, 0.0);
        assert!((anova_rk(&p1, &p1, &main).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let inter = KernelSpec::anova(1.0, 2, 0.0, 1.0);
        assert!((anova_rk(&p1, &p2, &inter).unwrap() + 1.0 / 6.0).abs() < 1e-15);
        let bad = CovariatePoint::with_level(0.5, 3);
        assert!(matches!(anova_rk(&p1, &bad, &inter), Err(Error::Domain(_))));
    }

    #[test]
    fn nullspace_examples() {
        let cubic = KernelSpec::cubic(1.0);
        assert_eq!(
            nullspace_basis(&CovariatePoint::new(0.3), &cubic).unwrap(),
            vec![1.0, 0.3]
        );
        let anova = KernelSpec::anova(1.0, 2, 1.0, 1.0);
        assert_eq!(
            nullspace_basis(&CovariatePoint::with_level(0.5, 1), &anova).unwrap(),
            vec![1.0, 0.5, 0.5, 0.25]
        );
        let additive = KernelSpec::anova_additive(1.0, 2, 1.0);
        assert_eq!(
            nullspace_basis(&CovariatePoint::with_level(0.5, 2), &additive).unwrap(),
            vec![1.0, 0.5, -0.5]
        );
        let expo = KernelSpec::exponential(2.0, 0.5);
        let b = nullspace_basis(&CovariatePoint::new(2.0), &expo).unwrap();
        assert!((b[1] - 1.264_241_117_657_115_4).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        let mut spec = KernelSpec::anova_additive(1.0, 3, 1.0);
        spec.theta12 = 0.5;
        assert!(spec.validate().is_err());
        assert!(KernelSpec::cubic(0.0).validate().is_err());
        assert!(KernelSpec::exponential(1.0, -1.0).validate().is_err());
        assert!(KernelSpec::anova(1.0, 0, 1.0, 1.0).validate().is_err());
        assert!(KernelSpec::anova(1.0, 3, 1.0, 0.2).validate().is_ok());
    }

    fn gram_is_psd(spec: &KernelSpec, pts: &[CovariatePoint]) -> bool {
        let n = pts.len();
        let g = DMatrix::from_fn(n, n, |i, j| spec.rk(&pts[i], &pts[j]).unwrap());
        let eig = SymmetricEigen::new(g).eigenvalues;
        let max = eig.max().max(0.0);
        eig.min() >= -1e-10 * max
    }

    proptest! {
        #[test]
        fn kernels_are_symmetric(x1 in 0.0f64..=1.0, x2 in 0.0f64..=1.0, t1 in 1usize..=3, t2 in 1usize..=3) {
            let cubic = KernelSpec::cubic(1.0);
            let a = CovariatePoint::new(x1);
            let b = CovariatePoint::new(x2);
            prop_assert_eq!(cubic.rk(&a, &b).unwrap(), cubic.rk(&b, &a).unwrap());
            let anova = KernelSpec::anova(1.0, 3, 0.7, 1.3);
            let a = CovariatePoint::with_level(x1, t1);
            let b = CovariatePoint::with_level(x2, t2);
            prop_assert_eq!(anova.rk(&a, &b).unwrap(), anova.rk(&b, &a).unwrap());
        }

        #[test]
        fn gram_matrices_are_psd(xs in proptest::collection::vec((0.0f64..=1.0, 1usize..=3), 2..25)) {
            let cubic = KernelSpec::cubic(1.0);
            let pts: Vec<_> = xs.iter().map(|&(x, _)| CovariatePoint::new(x)).collect();
            prop_assert!(gram_is_psd(&cubic, &pts));
            let anova = KernelSpec::anova(1.0, 3, 1.0, 2.0);
            let pts: Vec<_> = xs.iter().map(|&(x, t)| CovariatePoint::with_level(x, t)).collect();
            prop_assert!(gram_is_psd(&anova, &pts));
        }

        #[test]
        fn anova_side_conditions(
            coefs in proptest::collection::vec(-5.0f64..5.0, 12),
            knots in proptest::collection::vec((0.0f64..=1.0, 1usize..=3), 4),
            x in 0.0f64..=1.0,
        ) {
            let spec = KernelSpec::anova(1.0, 3, 1.0, 0.8);
            let terms = spec.nullspace_terms();
            let interaction = |p: &CovariatePoint| -> f64 {
                let basis = spec.nullspace(p).unwrap();
                let mut v = 0.0;
                for (k, term) in terms.iter().enumerate() {
                    if matches!(term, BasisTerm::Interaction(_)) {
                        v += coefs[k] * basis[k];
                    }
                }
                for (k, &(kx, kt)) in knots.iter().enumerate() {
                    let (_, inter) = anova_rk_parts(&CovariatePoint::with_level(kx, kt), p, &spec).unwrap();
                    v += coefs[6 + k] * spec.theta12 * inter;
                }
                v
            };
            let main = |p: &CovariatePoint| -> f64 {
                let basis = spec.nullspace(p).unwrap();
                let mut v = coefs[1] * basis[1];
                for (k, &(kx, kt)) in knots.iter().enumerate() {
                    let (m, _) = anova_rk_parts(&CovariatePoint::with_level(kx, kt), p, &spec).unwrap();
                    v += coefs[6 + k] * spec.theta1 * m;
                }
                v
            };
            let avg: f64 = (1..=3).map(|tau| interaction(&CovariatePoint::with_level(x, tau))).sum::<f64>() / 3.0;
            prop_assert!(avg.abs() < 1e-12);
            for tau in 1..=3 {
                let origin = CovariatePoint::with_level(0.0, tau);
                prop_assert!(interaction(&origin).abs() < 1e-12);
                prop_assert!(main(&origin).abs() < 1e-12);
            }
        }
    }
}
