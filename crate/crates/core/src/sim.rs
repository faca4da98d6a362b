//! Monte Carlo studies with real, latent and mixed random effects.
//!
//! Every replicate draws `x ~ U(0,1)`, `η(x) = 3 sin(2πx)` and Gaussian noise, adds
//! random effects according to the design, and fits cubic smoothing splines with
//! the parameters chosen by `U_α`, `V_α` and the oracle that minimizes the true loss.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_design, BasisChoice, Dataset, DesignMatrices, GroupingFactor, ModelSpec, Tying};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, fmt_list, to_csv, to_json};
use crate::kernels::KernelSpec;
use crate::selection::{
    sigma_hat, LossEvaluator, LossKind, Objective, ScoreConfig, SearchBox, Searcher, Truth,
};
use crate::solver::SmoothParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    /// Subject effects that are part of the estimand.
    Real,
    /// Cluster effects that only model correlated errors.
    Latent,
    /// Real subject effects nested in latent clusters.
    Mixture,
}

impl StudyKind {
    pub fn loss(self) -> LossKind {
        match self {
            StudyKind::Real => LossKind::L1,
            StudyKind::Latent => LossKind::L2,
            StudyKind::Mixture => LossKind::L3,
        }
    }
}

impl std::str::FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(StudyKind::Real),
            "latent" => Ok(StudyKind::Latent),
            "mixture" => Ok(StudyKind::Mixture),
            other => Err(Error::Argument(format!(
                "unknown study kind '{other}' (real|latent|mixture)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub kind: StudyKind,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub n_subjects: usize,
    pub n_clusters: usize,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Subject effect standard deviation.
    pub sigma_s: f64,
    /// Standard deviations of the two cluster effects.
    pub sigma_1: f64,
    pub sigma_2: f64,
    /// Use a random basis subset of size `⌈10 n^{2/9}⌉` instead of the full basis.
    pub subset_basis: bool,
}

impl SimDesign {
    pub fn new(kind: StudyKind) -> Self {
        let (n_subjects, n_clusters) = match kind {
            StudyKind::Real => (10, 0),
            StudyKind::Latent => (0, 2),
            StudyKind::Mixture => (10, 2),
        };
        Self {
            kind,
            n: 100,
            replicates: 100,
            seed: 1,
            alphas: vec![1.0, 1.2, 1.4, 1.6, 1.8],
            n_subjects,
            n_clusters,
            sigma: 0.5,
            sigma_s: 0.5,
            sigma_1: 0.5,
            sigma_2: 0.3,
            subset_basis: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.replicates == 0 {
            return bad("replicates must be ≥ 1".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        for (name, v) in [
            ("sigma_s", self.sigma_s),
            ("sigma_1", self.sigma_1),
            ("sigma_2", self.sigma_2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a >= 1.0)) {
            return bad("alphas must be nonempty and ≥ 1".into());
        }
        let needs_subjects = matches!(self.kind, StudyKind::Real | StudyKind::Mixture);
        let needs_clusters = matches!(self.kind, StudyKind::Latent | StudyKind::Mixture);
        if needs_subjects && self.n_subjects < 2 {
            return bad("design needs at least 2 subjects".into());
        }
        if needs_clusters && self.n_clusters != 2 {
            return bad(format!(
                "cluster effects need exactly 2 clusters, got {}",
                self.n_clusters
            ));
        }
        if self.kind == StudyKind::Mixture && !self.n_subjects.is_multiple_of(self.n_clusters) {
            return bad("subjects must nest evenly in clusters".into());
        }
        let group = if needs_subjects {
            self.n_subjects
        } else {
            self.n_clusters
        };
        if self.n < 3 || !self.n.is_multiple_of(group) {
            return bad(format!(
                "n = {} must be a multiple of the group count {group}",
                self.n
            ));
        }
        Ok(())
    }

    pub fn basis_size(&self) -> usize {
        (10.0 * (self.n as f64).powf(2.0 / 9.0)).ceil() as usize
    }

    fn real_mask(&self) -> Vec<bool> {
        match self.kind {
            StudyKind::Real => vec![true],
            StudyKind::Latent => vec![false],
            StudyKind::Mixture => vec![true, false],
        }
    }
}

/// One simulated dataset with its generating values.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub data: Dataset,
    pub truth: Truth,
    pub design: DesignMatrices,
    pub eps: DVector<f64>,
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("validated standard deviation")
}

pub fn eta(x: f64) -> f64 {
    3.0 * (2.0 * std::f64::consts::PI * x).sin()
}

/// Draw replicate `r`; the same `(design, r)` always yields the same data.
pub fn gen_replicate(design: &SimDesign, r: usize) -> Result<Replicate> {
    design.validate()?;
    if r >= design.replicates {
        return Err(Error::Argument(format!(
            "replicate {r} out of range 0..{}",
            design.replicates
        )));
    }
    let n = design.n;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(r as u64);

    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let eta_v: Vec<f64> = x.iter().map(|&x| eta(x)).collect();
    let noise = normal(design.sigma);
    let eps: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();

    let mut spec = ModelSpec::new(KernelSpec::cubic(1.0));
    let mut b = Vec::new();
    let mut b_var = Vec::new();
    let mut offset = vec![0.0; n];
    if matches!(design.kind, StudyKind::Real | StudyKind::Mixture) {
        let subjects: Vec<usize> = (0..n).map(|i| i * design.n_subjects / n).collect();
        let sd = normal(design.sigma_s);
        let effects: Vec<f64> = (0..design.n_subjects).map(|_| sd.sample(&mut rng)).collect();
        for (o, &s) in offset.iter_mut().zip(&subjects) {
            *o += effects[s];
        }
        spec = spec.with_factor(GroupingFactor::new("subject", subjects, Tying::Shared));
        b.extend(effects);
        b_var.extend(std::iter::repeat_n(design.sigma_s.powi(2), design.n_subjects));
    }
    if matches!(design.kind, StudyKind::Latent | StudyKind::Mixture) {
        let clusters: Vec<usize> = (0..n).map(|i| i * design.n_clusters / n).collect();
        let sds = [design.sigma_1, design.sigma_2];
        let effects: Vec<f64> = sds.iter().map(|&s| normal(s).sample(&mut rng)).collect();
        for (o, &c) in offset.iter_mut().zip(&clusters) {
            *o += effects[c];
        }
        spec = spec.with_factor(GroupingFactor::new("cluster", clusters, Tying::PerLevel));
        b.extend(effects);
        b_var.extend(sds.iter().map(|s| s * s));
    }
    if design.subset_basis {
        spec = spec.with_basis(BasisChoice::Subset {
            size: design.basis_size().min(n),
            seed: rng.random::<u64>(),
        });
    }

    let y: Vec<f64> = (0..n).map(|i| eta_v[i] + offset[i] + eps[i]).collect();
    let data = Dataset::new(y, x);
    let dm = build_design(&spec, &data)?;
    Ok(Replicate {
        data,
        truth: Truth {
            eta: DVector::from_vec(eta_v),
            b: DVector::from_vec(b),
            sigma2: design.sigma.powi(2),
            b_var: DVector::from_vec(b_var),
            real_mask: design.real_mask(),
        },
        design: dm,
        eps: DVector::from_vec(eps),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    U,
    V,
    Oracle,
}

/// Outcome of one selector on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorRecord {
    pub selector: SelectorKind,
    /// `None` for the oracle.
    pub alpha: Option<f64>,
    pub loss: f64,
    /// `loss(oracle) / loss(selector)`.
    pub efficacy: f64,
    pub params: SmoothParams,
    /// Fitted `Σ` diagonal, one entry per `γ` parameter.
    pub variance_ratio: Vec<f64>,
    /// Variance estimate, recorded for `V` selectors.
    pub sigma_hat: Option<f64>,
    pub tr_a: f64,
}

impl SelectorRecord {
    pub fn label(&self) -> String {
        match (self.selector, self.alpha) {
            (SelectorKind::U, Some(a)) => format!("U_{a}"),
            (SelectorKind::V, Some(a)) => format!("V_{a}"),
            _ => "oracle".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub replicate: usize,
    pub loss_kind: LossKind,
    pub records: Vec<SelectorRecord>,
}

impl ReplicateSummary {
    pub fn record(&self, selector: SelectorKind, alpha: Option<f64>) -> Option<&SelectorRecord> {
        self.records
            .iter()
            .find(|r| r.selector == selector && r.alpha == alpha)
    }
}

fn efficacy(oracle: f64, selector: f64) -> f64 {
    if selector > 0.0 {
        oracle / selector
    } else {
        1.0
    }
}

/// Fit all selectors on one replicate.
pub fn run_replicate(design: &SimDesign, r: usize, bx: &SearchBox) -> Result<ReplicateSummary> {
    let rep = gen_replicate(design, r)?;
    let dm = &rep.design;
    let kind = design.kind.loss();
    let searcher = Searcher::new(dm, &rep.data.y, bx)?;
    let loss = LossEvaluator::new(dm, &rep.truth, kind)?;
    let sigma2 = rep.truth.sigma2;

    let mut records = Vec::new();
    for (selector, cfgs) in [
        (
            SelectorKind::U,
            design
                .alphas
                .iter()
                .map(|&a| ScoreConfig::unbiased_risk(sigma2, a))
                .collect::<Vec<_>>(),
        ),
        (
            SelectorKind::V,
            design.alphas.iter().map(|&a| ScoreConfig::gcv(a)).collect(),
        ),
    ] {
        for cfg in cfgs {
            let sel = searcher.select(&Objective::Score(cfg))?;
            records.push(SelectorRecord {
                selector,
                alpha: Some(cfg.alpha),
                loss: loss.eval_fit(&sel.fit),
                efficacy: f64::NAN,
                variance_ratio: sel.params.gamma.iter().map(|g| g.exp()).collect(),
                sigma_hat: match selector {
                    SelectorKind::V => Some(sigma_hat(&sel.fit)?),
                    _ => None,
                },
                tr_a: sel.fit.tr_a,
                params: sel.params,
            });
        }
    }
    let starts: Vec<SmoothParams> = records.iter().map(|r| r.params.clone()).collect();
    let oracle = searcher.select_with_starts(&Objective::Loss(kind, &rep.truth), &starts)?;
    let oracle_loss = loss.eval_fit(&oracle.fit);
    for rec in &mut records {
        rec.efficacy = efficacy(oracle_loss, rec.loss);
    }
    records.push(SelectorRecord {
        selector: SelectorKind::Oracle,
        alpha: None,
        loss: oracle_loss,
        efficacy: 1.0,
        variance_ratio: oracle.params.gamma.iter().map(|g| g.exp()).collect(),
        sigma_hat: None,
        tr_a: oracle.fit.tr_a,
        params: oracle.params,
    });
    Ok(ReplicateSummary {
        replicate: r,
        loss_kind: kind,
        records,
    })
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

/// Linearly interpolated sample quantile; `values` need not be sorted.
pub fn quantile(values: &[f64], level: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = level.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

fn quantiles(values: &[f64]) -> Vec<f64> {
    QUANTILE_LEVELS.iter().map(|&l| quantile(values, l)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorAggregate {
    pub selector: String,
    pub alpha: Option<f64>,
    /// Quantiles at [`QUANTILE_LEVELS`].
    pub efficacy: Vec<f64>,
    pub loss: Vec<f64>,
    pub log10_lambda: Vec<f64>,
    pub sigma_hat: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub design: SimDesign,
    pub loss_kind: LossKind,
    pub quantile_levels: Vec<f64>,
    pub replicates_ok: usize,
    pub failures: Vec<ReplicateFailure>,
    pub selectors: Vec<SelectorAggregate>,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub replicates: Vec<ReplicateSummary>,
    pub summary: StudySummary,
}

fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::Study(format!("cannot start worker pool: {e}"))),
    }
}

/// Run every replicate of a design. Failed replicates are recorded; more than
/// 10% failures is an error.
pub fn run_study(design: &SimDesign, bx: &SearchBox, workers: Option<usize>) -> Result<StudyResult> {
    design.validate()?;
    bx.validate()?;
    let outcomes: Vec<(usize, Result<ReplicateSummary>)> = in_pool(workers, || {
        (0..design.replicates)
            .into_par_iter()
            .map(|r| (r, run_replicate(design, r, bx)))
            .collect()
    })?;
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (r, out) in outcomes {
        match out {
            Ok(s) => replicates.push(s),
            Err(e) => failures.push(ReplicateFailure {
                replicate: r,
                error: e.to_string(),
            }),
        }
    }
    if failures.len() * 10 > design.replicates {
        return Err(Error::Study(format!(
            "{} of {} replicates failed; first: {}",
            failures.len(),
            design.replicates,
            failures[0].error
        )));
    }
    let selectors = aggregate(&replicates);
    Ok(StudyResult {
        summary: StudySummary {
            design: design.clone(),
            loss_kind: design.kind.loss(),
            quantile_levels: QUANTILE_LEVELS.to_vec(),
            replicates_ok: replicates.len(),
            failures,
            selectors,
        },
        replicates,
    })
}

fn aggregate(replicates: &[ReplicateSummary]) -> Vec<SelectorAggregate> {
    let Some(first) = replicates.first() else {
        return Vec::new();
    };
    first
        .records
        .iter()
        .map(|proto| {
            let recs: Vec<&SelectorRecord> = replicates
                .iter()
                .filter_map(|s| s.record(proto.selector, proto.alpha))
                .collect();
            let col = |f: &dyn Fn(&SelectorRecord) -> f64| {
                quantiles(&recs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            SelectorAggregate {
                selector: proto.label(),
                alpha: proto.alpha,
                efficacy: col(&|r| r.efficacy),
                loss: col(&|r| r.loss),
                log10_lambda: col(&|r| r.params.log10_lambda),
                sigma_hat: proto.sigma_hat.map(|_| col(&|r| r.sigma_hat.unwrap_or(f64::NAN))),
            }
        })
        .collect()
}

pub const REPLICATE_COLUMNS: [&str; 10] = [
    "replicate",
    "selector",
    "alpha",
    "loss",
    "efficacy",
    "log10_lambda",
    "gamma",
    "variance_ratio",
    "sigma_hat",
    "tr_a",
];

/// One row per replicate and selector.
pub fn replicates_csv(replicates: &[ReplicateSummary]) -> Result<String> {
    let rows: Vec<Vec<String>> = replicates
        .iter()
        .flat_map(|s| {
            s.records.iter().map(move |r| {
                vec![
                    s.replicate.to_string(),
                    r.label(),
                    r.alpha.map(fmt_f64).unwrap_or_default(),
                    fmt_f64(r.loss),
                    fmt_f64(r.efficacy),
                    fmt_f64(r.params.log10_lambda),
                    fmt_list(&r.params.gamma),
                    fmt_list(&r.variance_ratio),
                    r.sigma_hat.map(fmt_f64).unwrap_or_default(),
                    fmt_f64(r.tr_a),
                ]
            })
        })
        .collect();
    to_csv(&REPLICATE_COLUMNS, &rows)
}

pub fn summary_json(summary: &StudySummary) -> Result<String> {
    to_json(summary)
}

/// Median ratios `|score − loss − εᵀε/n| / loss` at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRow {
    pub n: usize,
    pub loss_kind: LossKind,
    pub median_ratio_u: f64,
    pub median_ratio_v: f64,
    pub median_loss: f64,
    pub replicates_ok: usize,
}

/// Per-replicate deviations at the `V`-selected parameters.
fn asymptotic_replicate(design: &SimDesign, r: usize, bx: &SearchBox) -> Result<(f64, f64, f64)> {
    let rep = gen_replicate(design, r)?;
    let dm = &rep.design;
    let sel = Searcher::new(dm, &rep.data.y, bx)?.select(&Objective::Score(ScoreConfig::gcv(1.0)))?;
    let loss = LossEvaluator::new(dm, &rep.truth, design.kind.loss())?.eval_fit(&sel.fit);
    if !(loss > 0.0) {
        return Err(Error::Study(format!("replicate {r} has zero loss")));
    }
    let n = dm.n() as f64;
    let noise = rep.eps.norm_squared() / n;
    let u = ScoreConfig::unbiased_risk(rep.truth.sigma2, 1.0);
    let u_score = crate::selection::score(&sel.fit, &u)?;
    let v_score = sel.score;
    Ok((
        (u_score - loss - noise).abs() / loss,
        (v_score - loss - noise).abs() / loss,
        loss,
    ))
}

/// Track how closely `U` and `V` follow `loss + εᵀε/n` as `n` grows, with
/// group counts held fixed. Each replicate uses a random basis subset.
pub fn asymptotic_check(
    kind: StudyKind,
    n_list: &[usize],
    replicates: usize,
    seed: u64,
    bx: &SearchBox,
    workers: Option<usize>,
) -> Result<Vec<AsymptoticRow>> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("n_list must be nonempty and increasing".into()));
    }
    n_list
        .iter()
        .map(|&n| {
            let design = SimDesign {
                n,
                replicates,
                seed,
                subset_basis: true,
                ..SimDesign::new(kind)
            };
            design.validate()?;
            let outcomes: Vec<Result<(f64, f64, f64)>> = in_pool(workers, || {
                (0..replicates)
                    .into_par_iter()
                    .map(|r| asymptotic_replicate(&design, r, bx))
                    .collect()
            })?;
            let ok: Vec<(f64, f64, f64)> = outcomes.iter().filter_map(|o| o.as_ref().ok().copied()).collect();
            let failed = replicates - ok.len();
            if failed * 10 > replicates {
                let first = outcomes
                    .into_iter()
                    .find_map(|o| o.err())
                    .expect("some replicate failed");
                return Err(Error::Study(format!(
                    "{failed} of {replicates} replicates failed at n = {n}; first: {first}"
                )));
            }
            let col = |f: fn(&(f64, f64, f64)) -> f64| median(&ok.iter().map(f).collect::<Vec<_>>());
            Ok(AsymptoticRow {
                n,
                loss_kind: kind.loss(),
                median_ratio_u: col(|t| t.0),
                median_ratio_v: col(|t| t.1),
                median_loss: col(|t| t.2),
                replicates_ok: ok.len(),
            })
        })
        .collect()
}
