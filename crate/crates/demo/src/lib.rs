//! WebAssembly entry points for the browser demo in `www/`.
//!
//! Every function simulates one replicate of a study design, fits it and
//! returns a JSON string; failures come back as `{"error": "..."}`.

use mixspline::kernels::CovariatePoint;
use mixspline::selection::{optimize, score_v, LossEvaluator, LossKind, ScoreConfig, SearchBox};
use mixspline::sim::{eta, gen_replicate, Replicate, SimDesign, StudyKind};
use mixspline::solver::{solve_fit, FitResult, SmoothParams};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CURVE_POINTS: usize = 101;

#[derive(Serialize)]
struct Curves {
    grid: Vec<f64>,
    truth: Vec<f64>,
    fitted: Vec<f64>,
}

#[derive(Serialize)]
struct FitView {
    x: Vec<f64>,
    y: Vec<f64>,
    curves: Curves,
    log10_lambda: f64,
    gamma: Vec<f64>,
    tr_a: f64,
    gcv: f64,
    loss: f64,
}

#[derive(Serialize)]
struct Profile {
    log10_lambda: Vec<f64>,
    gcv: Vec<f64>,
    loss: Vec<f64>,
}

fn replicate(kind: &str, n: usize, seed: u64) -> mixspline::Result<(Replicate, LossKind)> {
    let kind = kind.parse::<StudyKind>()?;
    let mut design = SimDesign::new(kind);
    design.n = n;
    design.replicates = 1;
    design.seed = seed;
    Ok((gen_replicate(&design, 0)?, kind.loss()))
}

fn view(rep: &Replicate, loss: LossKind, fit: &FitResult) -> mixspline::Result<FitView> {
    let grid: Vec<f64> = (0..CURVE_POINTS)
        .map(|i| i as f64 / (CURVE_POINTS - 1) as f64)
        .collect();
    let points: Vec<CovariatePoint> = grid.iter().map(|&x| CovariatePoint::new(x)).collect();
    let fitted = rep.design.eval_eta(&fit.c_hat, &points)?;
    let loss = LossEvaluator::new(&rep.design, &rep.truth, loss)?.eval_fit(fit);
    Ok(FitView {
        x: rep.data.x.clone(),
        y: rep.data.y.clone(),
        curves: Curves {
            truth: grid.iter().map(|&x| eta(x)).collect(),
            grid,
            fitted,
        },
        log10_lambda: fit.params.log10_lambda,
        gamma: fit.params.gamma.clone(),
        tr_a: fit.tr_a,
        gcv: score_v(fit, 1.0)?,
        loss,
    })
}

fn json<T: Serialize>(r: mixspline::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

/// Simulate a replicate and fit it with parameters chosen by GCV with trace
/// inflation `alpha`.
#[wasm_bindgen]
pub fn fit_replicate(kind: &str, n: usize, seed: u64, alpha: f64) -> String {
    json((|| {
        let (rep, loss) = replicate(kind, n, seed)?;
        let sel = optimize(
            &rep.design,
            &rep.data.y,
            &ScoreConfig::gcv(alpha),
            &SearchBox::default(),
        )?;
        view(&rep, loss, &sel.fit)
    })())
}

/// Fit at a fixed `log10 λ`, with every `γ` set to `gamma`.
#[wasm_bindgen]
pub fn fit_with_lambda(kind: &str, n: usize, seed: u64, log10_lambda: f64, gamma: f64) -> String {
    json((|| {
        let (rep, loss) = replicate(kind, n, seed)?;
        let sp = SmoothParams::new(log10_lambda, vec![gamma; rep.design.n_gamma]);
        view(&rep, loss, &solve_fit(&rep.design, &rep.data.y, &sp)?)
    })())
}

/// GCV score and true loss along the `log10 λ` axis, every `γ` set to `gamma`.
#[wasm_bindgen]
pub fn gcv_profile(kind: &str, n: usize, seed: u64, gamma: f64) -> String {
    json((|| {
        let (rep, loss) = replicate(kind, n, seed)?;
        let losses = LossEvaluator::new(&rep.design, &rep.truth, loss)?;
        let mut out = Profile {
            log10_lambda: Vec::new(),
            gcv: Vec::new(),
            loss: Vec::new(),
        };
        for k in 0..=60 {
            let l = -8.0 + k as f64 / 6.0;
            let fit = solve_fit(
                &rep.design,
                &rep.data.y,
                &SmoothParams::new(l, vec![gamma; rep.design.n_gamma]),
            )?;
            out.log10_lambda.push(l);
            out.gcv.push(score_v(&fit, 1.0)?);
            out.loss.push(losses.eval_fit(&fit));
        }
        Ok(out)
    })())
}
