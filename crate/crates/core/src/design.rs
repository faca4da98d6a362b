//! Assembly of the penalized least squares design: null-space block `S`,
//! basis matrix `R = (S, R̃)`, penalty `Q = diag(O, Q̃)`, random-effect
//! indicators `Z`, and the exp-parametrized diagonal `Σ(γ)`.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{CovariatePoint, KernelFamily, KernelSpec};

/// How the `Σ` diagonal entries of one grouping factor share parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    /// One parameter for all levels.
    Shared,
    /// One parameter per level.
    PerLevel,
    /// `blocks[level]` is the block index of each level; one parameter per block.
    PerBlock(Vec<usize>),
}

/// A random-effect grouping: each observation belongs to one level.
///
/// Levels are 0-based indices `0..levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingFactor {
    pub name: String,
    pub assignment: Vec<usize>,
    pub levels: usize,
    pub tying: Tying,
}

impl GroupingFactor {
    pub fn new(name: impl Into<String>, assignment: Vec<usize>, tying: Tying) -> Self {
        let levels = assignment.iter().max().map_or(0, |&m| m + 1);
        Self {
            name: name.into(),
            assignment,
            levels,
            tying,
        }
    }

    /// Map string labels to level indices in first-appearance order.
    ///
    /// Returns the factor and the label of each level.
    pub fn from_labels(name: impl Into<String>, labels: &[String], tying: Tying) -> (Self, Vec<String>) {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut order = Vec::new();
        let assignment = labels
            .iter()
            .map(|l| {
                *index.entry(l.as_str()).or_insert_with(|| {
                    order.push(l.clone());
                    order.len() - 1
                })
            })
            .collect();
        (Self::new(name, assignment, tying), order)
    }

    /// Number of `γ` parameters this factor contributes.
    pub fn n_params(&self) -> usize {
        match &self.tying {
            Tying::Shared => 1,
            Tying::PerLevel => self.levels,
            Tying::PerBlock(blocks) => blocks.iter().collect::<BTreeSet<_>>().len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisChoice {
    /// Kernel functions centred at every observation.
    Full,
    /// Kernel functions centred at a seeded random subset of `size` observations.
    Subset { size: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kernel: KernelSpec,
    pub random_effects: Vec<GroupingFactor>,
    pub basis: BasisChoice,
}

impl ModelSpec {
    pub fn new(kernel: KernelSpec) -> Self {
        Self {
            kernel,
            random_effects: Vec::new(),
            basis: BasisChoice::Full,
        }
    }

    pub fn with_factor(mut self, factor: GroupingFactor) -> Self {
        self.random_effects.push(factor);
        self
    }

    pub fn with_basis(mut self, basis: BasisChoice) -> Self {
        self.basis = basis;
        self
    }

    pub fn n_gamma(&self) -> usize {
        self.random_effects.iter().map(GroupingFactor::n_params).sum()
    }
}

/// Observations: responses, covariates and (for ANOVA kernels) 1-based treatment levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub tau: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: Vec<f64>) -> Self {
        Self { y, x, tau: None }
    }

    pub fn with_treatment(mut self, tau: Vec<usize>) -> Self {
        self.tau = Some(tau);
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn point(&self, i: usize) -> CovariatePoint {
        CovariatePoint {
            x: self.x[i],
            tau: self.tau.as_ref().map(|t| t[i]),
        }
    }
}

/// Matrices of the penalized least squares problem for one dataset and spec.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Square root `L` of the penalty, `LᵀL = Q`, with one row per positive eigenvalue of `Q̃`.
    pub penalty_root: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// `tying_map[i]` is the `γ` index of the `i`-th diagonal entry of `Σ`.
    pub tying_map: Vec<usize>,
    pub n_gamma: usize,
    /// Column range of `Z` owned by each grouping factor.
    pub factor_columns: Vec<Range<usize>>,
    pub factor_names: Vec<String>,
    /// Kernel centres (rows of `Q̃`).
    pub basis_points: Vec<CovariatePoint>,
    pub kernel: KernelSpec,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    pub fn m(&self) -> usize {
        self.s.ncols()
    }

    pub fn q_dim(&self) -> usize {
        self.r.ncols()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    /// Evaluate `η(x) = Σ d_ν φ_ν(x) + Σ c_j R_J(z_j, x)` for coefficients `c` of length `q`.
    pub fn eval_eta(&self, c: &DVector<f64>, points: &[CovariatePoint]) -> Result<Vec<f64>> {
        if c.len() != self.q_dim() {
            return Err(Error::Argument(format!(
                "coefficient length {} != basis dimension {}",
                c.len(),
                self.q_dim()
            )));
        }
        let m = self.m();
        points
            .iter()
            .map(|p| {
                let phi = self.kernel.nullspace(p)?;
                let mut v: f64 = phi.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                for (j, z) in self.basis_points.iter().enumerate() {
                    v += c[m + j] * self.kernel.rk(z, p)?;
                }
                Ok(v)
            })
            .collect()
    }

    /// Columns of `Z` belonging to the factors selected by `mask`.
    pub fn z_columns(&self, mask: &[bool]) -> DMatrix<f64> {
        let cols: Vec<usize> = self
            .factor_columns
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .flat_map(|(r, _)| r.clone())
            .collect();
        DMatrix::from_fn(self.n(), cols.len(), |i, j| self.z[(i, cols[j])])
    }
}

pub fn build_design(spec: &ModelSpec, data: &Dataset) -> Result<DesignMatrices> {
    let kernel = &spec.kernel;
    kernel.validate()?;
    let n = data.len();
    if data.x.len() != n {
        return Err(Error::Input(format!("x has {} entries, y has {n}", data.x.len())));
    }
    if let Some(tau) = &data.tau {
        if tau.len() != n {
            return Err(Error::Input(format!("tau has {} entries, y has {n}", tau.len())));
        }
    }
    if kernel.family == KernelFamily::AnovaSpline && data.tau.is_none() {
        return Err(Error::Input("ANOVA kernel requires treatment levels".into()));
    }
    let m = kernel.null_dim();
    if n < m + 1 {
        return Err(Error::Input(format!(
            "need at least {} observations, got {n}",
            m + 1
        )));
    }
    let points: Vec<CovariatePoint> = (0..n)
        .map(|i| {
            let mut p = data.point(i);
            if kernel.family != KernelFamily::AnovaSpline {
                p.tau = None;
            }
            p
        })
        .collect();
    for p in &points {
        kernel.check_point(p)?;
    }

    let centres: Vec<usize> = match spec.basis {
        BasisChoice::Full => (0..n).collect(),
        BasisChoice::Subset { size, seed } => {
            if size > n {
                return Err(Error::Argument(format!("subset size {size} exceeds n = {n}")));
            }
            if size < m {
                return Err(Error::Argument(format!(
                    "subset size {size} below null-space dimension {m}"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut chosen = idx[..size].to_vec();
            chosen.sort_unstable();
            chosen
        }
    };
    let basis_points: Vec<CovariatePoint> = centres.iter().map(|&i| points[i]).collect();
    let qt = basis_points.len();

    let mut s = DMatrix::zeros(n, m);
    for (i, p) in points.iter().enumerate() {
        for (k, v) in kernel.nullspace(p)?.into_iter().enumerate() {
            s[(i, k)] = v;
        }
    }
    let mut r = DMatrix::zeros(n, m + qt);
    r.columns_mut(0, m).copy_from(&s);
    for (i, p) in points.iter().enumerate() {
        for (j, c) in basis_points.iter().enumerate() {
            r[(i, m + j)] = kernel.rk(c, p)?;
        }
    }
    let mut q = DMatrix::zeros(m + qt, m + qt);
    match spec.basis {
        BasisChoice::Full => {
            let block = r.columns(m, qt).clone_owned();
            q.view_mut((m, m), (qt, qt)).copy_from(&block);
        }
        BasisChoice::Subset { .. } => {
            for j in 0..qt {
                for k in j..qt {
                    let v = kernel.rk(&basis_points[j], &basis_points[k])?;
                    q[(m + j, m + k)] = v;
                    q[(m + k, m + j)] = v;
                }
            }
        }
    }
    // exact symmetry; the full-basis block is symmetric up to rounding only
    let q = (&q + q.transpose()) * 0.5;
    let penalty_root = penalty_root(&q, m);

    let (z, tying_map, factor_columns, n_gamma) = assemble_z(spec, n)?;
    if kernel.family == KernelFamily::AnovaSpline {
        check_nested_identifiability(spec, data)?;
    }

    Ok(DesignMatrices {
        s,
        r,
        q,
        penalty_root,
        z,
        tying_map,
        n_gamma,
        factor_columns,
        factor_names: spec.random_effects.iter().map(|f| f.name.clone()).collect(),
        basis_points,
        kernel: kernel.clone(),
    })
}

fn penalty_root(q: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let qt = q.nrows() - m;
    let block = q.view((m, m), (qt, qt)).clone_owned();
    let eig = SymmetricEigen::new(block);
    // No relative cutoff: with repeated basis points the null-space eigenvalues
    // are rounding noise, and a cutoff through them makes L jump with θ.
    let keep: Vec<usize> = (0..qt).filter(|&i| eig.eigenvalues[i] > 0.0).collect();
    let mut root = DMatrix::zeros(keep.len(), q.ncols());
    for (row, &i) in keep.iter().enumerate() {
        let scale = eig.eigenvalues[i].sqrt();
        for j in 0..qt {
            root[(row, m + j)] = scale * eig.eigenvectors[(j, i)];
        }
    }
    root
}

type ZParts = (DMatrix<f64>, Vec<usize>, Vec<Range<usize>>, usize);

fn assemble_z(spec: &ModelSpec, n: usize) -> Result<ZParts> {
    let p: usize = spec.random_effects.iter().map(|f| f.levels).sum();
    let mut z = DMatrix::zeros(n, p);
    let mut tying_map = Vec::with_capacity(p);
    let mut ranges = Vec::new();
    let mut col = 0;
    let mut gamma = 0;
    for f in &spec.random_effects {
        if f.assignment.len() != n {
            return Err(Error::Input(format!(
                "factor `{}` has {} entries, expected {n}",
                f.name,
                f.assignment.len()
            )));
        }
        if f.levels == 0 {
            return Err(Error::Rank {
                factor: f.name.clone(),
                reason: "no levels".into(),
            });
        }
        let mut counts = vec![0usize; f.levels];
        for (i, &lvl) in f.assignment.iter().enumerate() {
            if lvl >= f.levels {
                return Err(Error::Input(format!(
                    "factor `{}` level {lvl} out of range 0..{}",
                    f.name, f.levels
                )));
            }
            z[(i, col + lvl)] = 1.0;
            counts[lvl] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Rank {
                factor: f.name.clone(),
                reason: format!("level {empty} has no observations"),
            });
        }
        match &f.tying {
            Tying::Shared => tying_map.extend(std::iter::repeat_n(gamma, f.levels)),
            Tying::PerLevel => tying_map.extend(gamma..gamma + f.levels),
            Tying::PerBlock(blocks) => {
                if blocks.len() != f.levels {
                    return Err(Error::Argument(format!(
                        "factor `{}` block map has {} entries for {} levels",
                        f.name,
                        blocks.len(),
                        f.levels
                    )));
                }
                // renumber blocks densely in first-appearance order
                let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
                let mut next = 0;
                for &b in blocks {
                    let id = *dense.entry(b).or_insert_with(|| {
                        next += 1;
                        next - 1
                    });
                    tying_map.push(gamma + id);
                }
            }
        }
        ranges.push(col..col + f.levels);
        col += f.levels;
        gamma += f.n_params();
    }
    Ok((z, tying_map, ranges, gamma))
}

/// Under the ANOVA kernel, a factor nested within treatment needs more than
/// one level per treatment, or its effects are confounded with `η2(τ)`.
fn check_nested_identifiability(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    let Some(tau) = &data.tau else { return Ok(()) };
    for f in &spec.random_effects {
        let mut level_tau: Vec<Option<usize>> = vec![None; f.levels];
        let mut nested = true;
        for (&lvl, &t) in f.assignment.iter().zip(tau) {
            match level_tau[lvl] {
                None => level_tau[lvl] = Some(t),
                Some(prev) if prev != t => nested = false,
                _ => {}
            }
        }
        if !nested {
            continue;
        }
        let mut per_tau: BTreeMap<usize, usize> = BTreeMap::new();
        for t in level_tau.into_iter().flatten() {
            *per_tau.entry(t).or_default() += 1;
        }
        if let Some((t, _)) = per_tau.iter().find(|(_, &c)| c < 2) {
            return Err(Error::Identifiability(format!(
                "treatment level {t} has a single level of factor `{}`",
                f.name
            )));
        }
    }
    Ok(())
}

/// Diagonal of `Σ(γ)`: entry `i` is `exp(γ[tying_map[i]])`.
pub fn sigma_diag(gamma: &[f64], dm: &DesignMatrices) -> Result<DVector<f64>> {
    if gamma.len() != dm.n_gamma {
        return Err(Error::Argument(format!(
            "gamma has {} entries, design has {} tying groups",
            gamma.len(),
            dm.n_gamma
        )));
    }
    Ok(DVector::from_iterator(
        dm.tying_map.len(),
        dm.tying_map.iter().map(|&g| gamma[g].exp()),
    ))
}

pub fn sigma_matrix(gamma: &[f64], dm: &DesignMatrices) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from_diagonal(&sigma_diag(gamma, dm)?))
}
