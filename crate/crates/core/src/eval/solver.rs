//! Accelerated full-batch gradient descent with backtracking line search
//! and function-value restarts, for smooth convex objectives.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimizes `f`, where `f(x, grad)` returns the value and writes the gradient.
pub fn minimize(mut f: impl FnMut(&[f64], &mut [f64]) -> f64, x0: Vec<f64>, opts: SolverOptions) -> SolverResult {
    let n = x0.len();
    let mut x = x0;
    let mut gx = vec![0.0; n];
    let mut fx = f(&x, &mut gx);
    let mut y = x.clone();
    let mut gy = gx.clone();
    let mut fy = fx;
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut trial = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut it = 0;
    while it < opts.max_iter {
        if norm(&gx) <= opts.grad_tol {
            break;
        }
        it += 1;
        let gn2: f64 = gy.iter().map(|g| g * g).sum();
        let ft = loop {
            for i in 0..n {
                trial[i] = y[i] - gy[i] / lip;
            }
            let ft = f(&trial, &mut gt);
            if ft <= fy - 0.5 * gn2 / lip || lip > 1e300 {
                break ft;
            }
            lip *= 2.0;
        };
        if ft > fx {
            // Momentum overshot: restart from x with a plain gradient step.
            t = 1.0;
            y.copy_from_slice(&x);
            gy.copy_from_slice(&gx);
            fy = fx;
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        for i in 0..n {
            y[i] = trial[i] + beta * (trial[i] - x[i]);
        }
        std::mem::swap(&mut x, &mut trial);
        gx.copy_from_slice(&gt);
        fx = ft;
        fy = f(&y, &mut gy);
        t = t_next;
        lip *= 0.9;
    }
    let grad_norm = norm(&gx);
    SolverResult {
        converged: grad_norm <= opts.grad_tol,
        x,
        value: fx,
        grad_norm,
        iterations: it,
    }
}
