//! Box-constrained downhill simplex (Nelder–Mead).
//!
//! Trial points outside the box are mirrored back across the violated bound;
//! clamping instead would flatten the simplex onto a face. Undefined
//! objective values are treated as `+∞`.

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Stop when `max f − min f < rel_tol · (1 + |min f|)` and every vertex is
    /// within `x_tol` of the best one in each coordinate.
    pub rel_tol: f64,
    pub x_tol: f64,
    pub max_evals: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            x_tol: 1e-4,
            max_evals: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn fold(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        if *v < lo {
            *v = 2.0 * lo - *v;
        } else if *v > hi {
            *v = 2.0 * hi - *v;
        }
        *v = v.clamp(lo, hi);
    }
}

/// Minimize `f` from `x0` within `bounds`; `steps[i]` sizes the initial simplex edge.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    steps: &[f64],
    bounds: &[(f64, f64)],
    opts: &SimplexOptions,
) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    for (v, &(lo, hi)) in start.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
    if dim == 0 {
        let value = eval(&start, &mut evals);
        return SimplexResult {
            x: start,
            value,
            evals,
            converged: true,
        };
    }

    let (mut x, mut value, mut converged) = (start, f64::INFINITY, false);
    // A projected simplex can collapse onto a face of the box and stall there;
    // restart around the best point until a restart no longer helps.
    while evals < opts.max_evals {
        let (bx, bv, conv) = descend(&mut eval, &mut evals, &x, steps, bounds, opts);
        let stalled = value.is_finite() && bv >= value - opts.rel_tol * (1.0 + value.abs());
        if bv <= value {
            x = bx;
            value = bv;
        }
        converged = conv;
        if !conv || stalled {
            break;
        }
    }
    SimplexResult {
        x,
        value,
        evals,
        converged,
    }
}

fn descend<E>(
    eval: &mut E,
    evals: &mut usize,
    start: &[f64],
    steps: &[f64],
    bounds: &[(f64, f64)],
    opts: &SimplexOptions,
) -> (Vec<f64>, f64, bool)
where
    E: FnMut(&[f64], &mut usize) -> f64,
{
    let dim = start.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    pts.push(start.to_vec());
    for i in 0..dim {
        let mut p = start.to_vec();
        let (lo, hi) = bounds[i];
        // step inward when the start sits on the upper bound
        p[i] = if p[i] + steps[i] <= hi {
            p[i] + steps[i]
        } else {
            (p[i] - steps[i]).max(lo)
        };
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, evals)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while *evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let (best, worst) = (vals[0], vals[dim]);
        let spread = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if best.is_finite() && worst - best < opts.rel_tol * (1.0 + best.abs()) && spread < opts.x_tol {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|j| pts[..dim].iter().map(|p| p[j]).sum::<f64>() / dim as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + t * (pts[dim][j] - centroid[j]))
                .collect();
            fold(&mut p, bounds);
            p
        };

        let xr = along(-alpha);
        let fr = eval(&xr, evals);
        if fr < vals[0] {
            let xe = along(-gamma);
            let fe = eval(&xe, evals);
            if fe < fr {
                pts[dim] = xe;
                vals[dim] = fe;
            } else {
                pts[dim] = xr;
                vals[dim] = fr;
            }
            continue;
        }
        if fr < vals[dim - 1] {
            pts[dim] = xr;
            vals[dim] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[dim] {
            let xc = along(-rho);
            let fc = eval(&xc, evals);
            (xc, fc)
        } else {
            let xc = along(rho);
            let fc = eval(&xc, evals);
            (xc, fc)
        };
        if fc < vals[dim].min(fr) {
            pts[dim] = xc;
            vals[dim] = fc;
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=dim {
            let p: Vec<f64> = (0..dim)
                .map(|j| pts[0][j] + sigma * (pts[i][j] - pts[0][j]))
                .collect();
            vals[i] = eval(&p, evals);
            pts[i] = p;
        }
    }

    let best = (0..=dim)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap_or(0);
    (pts[best].clone(), vals[best], converged)
}
