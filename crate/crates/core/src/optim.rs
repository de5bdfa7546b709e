//! Small unconstrained minimizers used by the per-cell fits.

/// Outcome of a minimization run.
#[derive(Debug, Clone)]
pub struct Minimum<const N: usize> {
    pub x: [f64; N],
    pub f: f64,
    pub grad: [f64; N],
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence when `max_j |g_j| < grad_tol`.
    pub grad_tol: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 1000, grad_tol: 1e-7, max_backtracks: 60 }
    }
}

fn inf_norm<const N: usize>(g: &[f64; N]) -> f64 {
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn dot<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quasi-Newton minimization with an Armijo backtracking line search.
/// `fg` returns the objective and its gradient; non-finite objective
/// values are treated as rejected trial points.
pub fn bfgs<const N: usize>(
    mut fg: impl FnMut(&[f64; N]) -> (f64, [f64; N]),
    x0: [f64; N],
    opts: &BfgsOptions,
) -> Minimum<N> {
    let mut x = x0;
    let (mut f, mut g) = fg(&x);
    let mut hinv = [[0.0; N]; N];
    for (i, row) in hinv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut scaled = false;
    let mut iterations = 0;
    if !f.is_finite() {
        return Minimum { x, f, grad: g, iterations, converged: false };
    }
    while iterations < opts.max_iter {
        if inf_norm(&g) < opts.grad_tol {
            return Minimum { x, f, grad: g, iterations, converged: true };
        }
        iterations += 1;
        let mut dir = [0.0; N];
        for i in 0..N {
            dir[i] = -(0..N).map(|j| hinv[i][j] * g[j]).sum::<f64>();
        }
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            // lost descent: reset to steepest descent
            for (i, row) in hinv.iter_mut().enumerate() {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[i] = 1.0;
            }
            dir = g.map(|v| -v);
            slope = dot(&dir, &g);
            scaled = false;
        }
        if !scaled {
            // keep the first trial step modest
            let n = inf_norm(&dir);
            if n > 1.0 {
                dir = dir.map(|v| v / n);
                slope /= n;
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xn: [f64; N] = std::array::from_fn(|i| x[i] + step * dir[i]);
            let (fn_, gn) = fg(&xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            let converged = inf_norm(&g) < opts.grad_tol * 100.0;
            return Minimum { x, f, grad: g, iterations, converged };
        };
        let s: [f64; N] = std::array::from_fn(|i| xn[i] - x[i]);
        let y: [f64; N] = std::array::from_fn(|i| gnew[i] - g[i]);
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if !scaled {
                let gamma = sy / dot(&y, &y);
                for (i, row) in hinv.iter_mut().enumerate() {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[i] = gamma;
                }
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy: [f64; N] = std::array::from_fn(|i| (0..N).map(|j| hinv[i][j] * y[j]).sum());
            let yhy = dot(&y, &hy);
            for i in 0..N {
                for j in 0..N {
                    hinv[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        let stalled = (f - fnew).abs() <= 1e-15 * f.abs().max(1.0) && inf_norm(&s) < 1e-14;
        x = xn;
        f = fnew;
        g = gnew;
        if stalled {
            break;
        }
    }
    let converged = inf_norm(&g) < opts.grad_tol;
    Minimum { x, f, grad: g, iterations, converged }
}

/// Derivative-free Nelder–Mead simplex search. Non-finite objective values
/// count as `+∞`. Returns the best vertex and its value.
pub fn nelder_mead<const N: usize>(
    mut f: impl FnMut(&[f64; N]) -> f64,
    x0: [f64; N],
    steps: [f64; N],
    max_iter: usize,
) -> ([f64; N], f64) {
    let eval = |f: &mut dyn FnMut(&[f64; N]) -> f64, x: &[f64; N]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, eval(&mut f, &x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] += steps[i];
        simplex.push((x, eval(&mut f, &x)));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let worst = simplex[N];
        let centroid: [f64; N] =
            std::array::from_fn(|i| simplex[..N].iter().map(|(x, _)| x[i]).sum::<f64>() / N as f64);
        let along = |t: f64| -> [f64; N] { std::array::from_fn(|i| centroid[i] + t * (worst.0[i] - centroid[i])) };
        let xr = along(-1.0);
        let fr = eval(&mut f, &xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&mut f, &xe);
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = along(-0.5);
                (xc, eval(&mut f, &xc))
            } else {
                let xc = along(0.5);
                (xc, eval(&mut f, &xc))
            };
            if fc < worst.1.min(fr) {
                simplex[N] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let x: [f64; N] = std::array::from_fn(|i| best[i] + 0.5 * (v.0[i] - best[i]));
                    *v = (x, eval(&mut f, &x));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}
