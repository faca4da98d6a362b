//! Self-check suites behind `mixspline check`: agreement of the alternative
//! smoother formulas, agreement with an extended-precision dense solve, and the
//! Monte Carlo trend of score minus loss.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::design::sigma_diag;
use crate::design::{build_design, BasisChoice, Dataset, DesignMatrices, GroupingFactor, ModelSpec, Tying};
use crate::dword::{gauss_solve, Dw};
use crate::error::Result;
use crate::kernels::KernelSpec;
use crate::selection::SearchBox;
use crate::sim::{asymptotic_check, AsymptoticRow, StudyKind};
use crate::solver::{
    abar_dense, eta_matrix_dense, eta_matrix_schur, qz_matrix, smoothing_matrix_dense,
    smoothing_matrix_schur, solve_fit, SmoothParams,
};

/// One checked invariant: the largest deviation seen and the allowed bound.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckLine {
    fn at_most(name: &str, deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            deviation,
            tolerance,
            passed: deviation <= tolerance,
        }
    }
}

/// A random small problem: cubic spline, one or two grouping factors with at
/// most five effects in total, random `λ` and `γ`.
pub struct Instance {
    pub design: DesignMatrices,
    pub y: Vec<f64>,
    pub params: SmoothParams,
}

pub fn random_instance(rng: &mut ChaCha8Rng, n_range: (usize, usize)) -> Result<Instance> {
    let n = rng.random_range(n_range.0..=n_range.1);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&x| (2.0 * std::f64::consts::PI * x).sin() + rng.random_range(-0.5..0.5))
        .collect();
    let mut spec = ModelSpec::new(KernelSpec::cubic(1.0));
    let mut budget = rng.random_range(1..=5usize);
    let mut k = 0;
    while budget > 0 {
        let levels = rng.random_range(1..=budget);
        let tying = if rng.random_bool(0.5) {
            Tying::Shared
        } else {
            Tying::PerLevel
        };
        let assign = (0..n).map(|_| rng.random_range(0..levels)).collect::<Vec<_>>();
        // every level must be observed
        let assign = assign
            .iter()
            .enumerate()
            .map(|(i, &a)| if i < levels { i } else { a })
            .collect();
        spec = spec.with_factor(GroupingFactor::new(format!("f{k}"), assign, tying));
        budget -= levels;
        k += 1;
    }
    if rng.random_bool(0.3) {
        let size = rng.random_range(2..=n);
        spec = spec.with_basis(BasisChoice::Subset {
            size,
            seed: rng.random(),
        });
    }
    let design = build_design(&spec, &Dataset::new(y.clone(), x))?;
    let gamma = (0..design.n_gamma).map(|_| rng.random_range(-3.0..3.0)).collect();
    let params = SmoothParams::new(rng.random_range(-8.0..2.0), gamma);
    Ok(Instance { design, y, params })
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym).eigenvalues;
    (e.min(), e.max())
}

/// Alternative smoother formulas, eigenvalue ranges, contraction bounds of the
/// `η` map and trace inequalities.
pub fn identities_suite(instances: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut smoother = 0.0f64;
    let mut eta_map = 0.0f64;
    let mut eig_a = 0.0f64;
    let mut eig_abar = 0.0f64;
    let mut m_bound = 0.0f64;
    let mut im_bound = 0.0f64;
    let mut tr_gap = f64::NEG_INFINITY;
    let mut tr2_gap = f64::NEG_INFINITY;
    for _ in 0..instances {
        let Instance {
            design: dm,
            params: sp,
            ..
        } = random_instance(&mut rng, (8, 30))?;
        let n = dm.n();
        let a = smoothing_matrix_dense(&dm, &sp)?;
        smoother = smoother.max(max_abs_diff(&a, &smoothing_matrix_schur(&dm, &sp)?));
        let m = eta_matrix_dense(&dm, &sp)?;
        eta_map = eta_map.max(max_abs_diff(&m, &eta_matrix_schur(&dm, &sp)?));

        let abar = abar_dense(&dm, sp.log10_lambda)?;
        let outside = |(lo, hi): (f64, f64)| (-lo).max(hi - 1.0).max(0.0);
        eig_a = eig_a.max(outside(eig_range(&a)));
        eig_abar = eig_abar.max(outside(eig_range(&abar)));

        let i_qz = DMatrix::identity(n, n) - qz_matrix(&dm, &sp)?;
        let i_m = DMatrix::identity(n, n) - &m;
        m_bound = m_bound.max(eig_range(&(m.transpose() * &i_qz * &m)).1 - 1.0);
        im_bound = im_bound.max(eig_range(&(i_m.transpose() * &i_qz * &i_m)).1 - 4.0);

        tr_gap = tr_gap.max(a.trace() - abar.trace() - dm.p() as f64);
        tr2_gap = tr2_gap.max((&abar * &abar).trace() - (&a * &a).trace());
    }
    Ok(vec![
        CheckLine::at_most("smoother: block form vs smoother-update form", smoother, 1e-9),
        CheckLine::at_most("eta map: block form vs smoother-update form", eta_map, 1e-9),
        CheckLine::at_most("eigenvalues of A outside [0, 1]", eig_a, 1e-10),
        CheckLine::at_most("eigenvalues of A-tilde outside [0, 1]", eig_abar, 1e-10),
        CheckLine::at_most("max eig M'(I-Qz)M - 1", m_bound.max(0.0), 1e-10),
        CheckLine::at_most("max eig (I-M)'(I-Qz)(I-M) - 4", im_bound.max(0.0), 1e-10),
        CheckLine::at_most("tr A - tr A-tilde - p", tr_gap.max(0.0), 1e-10),
        CheckLine::at_most("tr A-tilde^2 - tr A^2", tr2_gap.max(0.0), 1e-10),
    ])
}

/// Relative errors of `(ĉ, b̂)` and `Ŷ` against the block normal equations
/// solved by Gaussian elimination in double-word arithmetic. With `Σ > 0` the
/// block matrix is nonsingular, so its pseudoinverse is its inverse.
pub fn oracle_errors(inst: &Instance) -> Result<(f64, f64)> {
    let dm = &inst.design;
    let (n, q, p) = (dm.n(), dm.q_dim(), dm.p());
    let k = q + p;
    let w = |i: usize, j: usize| if j < q { dm.r[(i, j)] } else { dm.z[(i, j - q)] };
    let sigma = sigma_diag(&inst.params.gamma, dm)?;
    let nl = Dw::prod(n as f64, inst.params.lambda());
    let mut c = vec![vec![Dw::ZERO; k]; k];
    for (a, row) in c.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let mut s = Dw::ZERO;
            for i in 0..n {
                s += Dw::prod(w(i, a), w(i, b));
            }
            if a < q && b < q {
                s += nl * dm.q[(a, b)];
            }
            if a == b && a >= q {
                s += Dw::from(sigma[a - q]);
            }
            *cell = s;
        }
    }
    let rhs: Vec<Dw> = (0..k)
        .map(|a| (0..n).fold(Dw::ZERO, |s, i| s + Dw::prod(w(i, a), inst.y[i])))
        .collect();
    let exact =
        gauss_solve(c, rhs).ok_or_else(|| crate::Error::Numeric("singular block system in oracle".into()))?;
    let fit = solve_fit(dm, &inst.y, &inst.params)?;
    let got: Vec<f64> = fit.c_hat.iter().chain(fit.b_hat.iter()).copied().collect();
    let coef_num: f64 = exact
        .iter()
        .zip(&got)
        .map(|(e, g)| (e.to_f64() - g).powi(2))
        .sum();
    let coef_den: f64 = exact.iter().map(|e| e.to_f64().powi(2)).sum();
    let mut y_num = 0.0;
    let mut y_den = 0.0;
    for i in 0..n {
        let yi = (0..k).fold(Dw::ZERO, |s, j| s + exact[j] * w(i, j)).to_f64();
        y_num += (yi - fit.y_hat[i]).powi(2);
        y_den += yi * yi;
    }
    let rel = |num: f64, den: f64| if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    Ok((rel(coef_num, coef_den), rel(y_num, y_den)))
}

pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coef = 0.0f64;
    let mut fitted = 0.0f64;
    for _ in 0..instances {
        let inst = random_instance(&mut rng, (3, 50))?;
        let (c, y) = oracle_errors(&inst)?;
        coef = coef.max(c);
        fitted = fitted.max(y);
    }
    Ok(vec![
        CheckLine::at_most("coefficients vs extended-precision solve (relative)", coef, 1e-8),
        CheckLine::at_most(
            "fitted values vs extended-precision solve (relative)",
            fitted,
            1e-8,
        ),
    ])
}

/// Largest step-to-step change of a sequence; negative iff strictly decreasing.
fn max_increase(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Median `|score − loss − εᵀε/n| / loss` must fall strictly as `n` grows.
pub fn asymptotic_suite(
    kind: StudyKind,
    n_list: &[usize],
    replicates: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<(Vec<AsymptoticRow>, Vec<CheckLine>)> {
    let rows = asymptotic_check(kind, n_list, replicates, seed, &SearchBox::default(), workers)?;
    let loss = format!("{:?}", kind.loss());
    let mut lines = Vec::new();
    let mut push = |selector: &str, values: Vec<f64>| {
        let d = max_increase(&values);
        lines.push(CheckLine {
            name: format!("median ratio {selector}/{loss} decreasing in n"),
            deviation: d,
            tolerance: 0.0,
            passed: d < 0.0,
        });
    };
    if kind == StudyKind::Real {
        push("U", rows.iter().map(|r| r.median_ratio_u).collect());
    }
    push("V", rows.iter().map(|r| r.median_ratio_v).collect());
    Ok((rows, lines))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_hold_on_a_few_instances() {
        for line in identities_suite(4, 3).unwrap() {
            assert!(line.passed, "{line:?}");
        }
    }

    #[test]
    fn oracle_agrees_on_a_few_instances() {
        for line in oracle_suite(5, 11).unwrap() {
            assert!(line.passed, "{line:?}");
        }
    }

    #[test]
    fn increase_detection() {
        assert!(max_increase(&[3.0, 2.0, 1.0]) < 0.0);
        assert!(max_increase(&[3.0, 3.0, 1.0]) >= 0.0);
    }
}
