//! Derivative-free minimization used as an independent check on gradient
//! based solvers. Standard Nelder-Mead with adaptive restarts from a grid of
//! perturbed starting points.

/// Outcome of a Nelder-Mead run. `x` minimizes `f` among visited points.
#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evaluations: usize,
}

/// Minimize `f` from `start` with a simplex of initial edge `scale`.
///
/// Runs until the simplex collapses below `ftol` in function spread and
/// `xtol` in coordinate spread, or `max_iter` iterations elapse. Uses the
/// classic coefficients (reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2). `f` may return infinity to encode constraints.
pub fn nelder_mead(
    f: impl Fn(&[f64]) -> f64,
    start: &[f64],
    scale: f64,
    ftol: f64,
    xtol: f64,
    max_iter: usize,
) -> NelderMeadResult {
    let n = start.len();
    assert!(n > 0, "empty start point");
    let mut evals = 0usize;
    let eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    // Vertex 0 is the start; vertex i+1 offsets coordinate i by `scale`.
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += if v[i].abs() > 1.0 { scale * v[i].abs() } else { scale };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        let f_spread = values[worst] - values[best];
        let x_spread = (0..n)
            .map(|d| {
                let lo = simplex.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
                let hi = simplex.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .fold(0.0f64, f64::max);
        if f_spread.abs() < ftol && x_spread < xtol {
            break;
        }

        // Centroid of all vertices except the worst.
        let centroid: Vec<f64> = (0..n)
            .map(|d| {
                order[..n].iter().map(|&i| simplex[i][d]).sum::<f64>() / n as f64
            })
            .collect();

        let reflect: Vec<f64> = (0..n)
            .map(|d| centroid[d] + (centroid[d] - simplex[worst][d]))
            .collect();
        let f_reflect = eval(&reflect, &mut evals);

        if f_reflect < values[best] {
            let expand: Vec<f64> = (0..n)
                .map(|d| centroid[d] + 2.0 * (centroid[d] - simplex[worst][d]))
                .collect();
            let f_expand = eval(&expand, &mut evals);
            if f_expand < f_reflect {
                simplex[worst] = expand;
                values[worst] = f_expand;
            } else {
                simplex[worst] = reflect;
                values[worst] = f_reflect;
            }
        } else if f_reflect < values[second_worst] {
            simplex[worst] = reflect;
            values[worst] = f_reflect;
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|d| centroid[d] + 0.5 * (simplex[worst][d] - centroid[d]))
                .collect();
            let f_contract = eval(&contract, &mut evals);
            if f_contract < values[worst] {
                simplex[worst] = contract;
                values[worst] = f_contract;
            } else {
                // Shrink all vertices toward the best.
                let best_point = simplex[best].clone();
                for i in 0..=n {
                    if i == best {
                        continue;
                    }
                    for d in 0..n {
                        simplex[i][d] = best_point[d] + 0.5 * (simplex[i][d] - best_point[d]);
                    }
                    values[i] = eval(&simplex[i].clone(), &mut evals);
                }
            }
        }
    }

    let best = (0..=n).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap();
    NelderMeadResult {
        x: simplex[best].clone(),
        fx: values[best],
        evaluations: evals,
    }
}

/// Minimize `f` from several starting points, then polish the winner with a
/// tighter restart. Starts are `center` plus the rows of `offsets`.
pub fn multi_start_nelder_mead(
    f: impl Fn(&[f64]) -> f64 + Copy,
    center: &[f64],
    offsets: &[Vec<f64>],
    max_iter: usize,
) -> NelderMeadResult {
    let mut best: Option<NelderMeadResult> = None;
    let mut starts: Vec<Vec<f64>> = vec![center.to_vec()];
    for off in offsets {
        assert_eq!(off.len(), center.len(), "offset dimension mismatch");
        starts.push(center.iter().zip(off).map(|(c, o)| c + o).collect());
    }
    for start in &starts {
        let r = nelder_mead(f, start, 0.25, 1e-13, 1e-9, max_iter);
        if best.as_ref().map_or(true, |b| r.fx < b.fx) {
            best = Some(r);
        }
    }
    // Polish: restart at the winner with a small simplex to escape any
    // premature collapse.
    let winner = best.unwrap();
    let polish = nelder_mead(f, &winner.x, 1e-3, 1e-14, 1e-10, max_iter);
    if polish.fx < winner.fx {
        NelderMeadResult {
            evaluations: winner.evaluations + polish.evaluations,
            ..polish
        }
    } else {
        winner
    }
}
