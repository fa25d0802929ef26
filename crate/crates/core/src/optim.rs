//! Nelder–Mead simplex minimizer.

#[derive(Debug, Clone)]
pub(crate) struct SimplexOptions {
    pub max_iter: usize,
    /// Stop when the spread of objective values across the simplex is below
    /// `rel_tol * (|f_best| + rel_tol)` and the simplex has collapsed to
    /// `x_tol` in every coordinate.
    pub rel_tol: f64,
    pub x_tol: f64,
    pub initial_step: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn nelder_mead<F>(f: F, x0: &[f64], opts: &SimplexOptions) -> SimplexResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return SimplexResult {
            x: Vec::new(),
            f: f(x0),
            iterations: 0,
            converged: true,
        };
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += opts.initial_step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let width = (0..n)
            .map(|k| {
                simplex
                    .iter()
                    .map(|v| (v[k] - simplex[0][k]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread.is_finite()
            && spread <= opts.rel_tol * (values[0].abs() + opts.rel_tol)
            && width <= opts.x_tol
        {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|k| centroid[k] + t * (simplex[n][k] - centroid[k]))
                .collect()
        };
        let xr = along(-alpha);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(-gamma);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(-rho);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(rho);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let v: Vec<f64> = (0..n)
                        .map(|k| simplex[0][k] + sigma * (simplex[i][k] - simplex[0][k]))
                        .collect();
                    values[i] = f(&v);
                    simplex[i] = v;
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    SimplexResult {
        x: simplex[best].clone(),
        f: values[best],
        iterations,
        converged,
    }
}
