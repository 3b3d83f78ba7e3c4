//! The L-BFGS solver on its own, first on an ill-conditioned quadratic, then
//! on the Rosenbrock valley. The line search only halves from its first
//! trial step, so in the curved valley it can run out of halvings before
//! the curvature condition holds; the solver then stops at its best point.

use gdr::optimize::{minimize, minimize_with_initial_step, LbfgsOptions, Vector};

fn main() -> gdr::Result<()> {
    let diag: Vec<f64> = (0..10).map(|i| 1000f64.powf(i as f64 / 9.0)).collect();
    let quad = |x: &Vec<f64>| {
        let g: Vec<f64> = x.iter().zip(&diag).map(|(x, d)| d * x - 1.0).collect();
        Ok((x.iter().zip(&diag).map(|(x, d)| 0.5 * d * x * x - x).sum(), g))
    };
    let exact =
        |_: &Vec<f64>, g: &Vec<f64>, z: &Vec<f64>| -g.dot(z) / z.iter().zip(&diag).map(|(z, d)| d * z * z).sum::<f64>();
    for m in [3, 10] {
        let r = minimize_with_initial_step(quad, vec![0.0; 10], &LbfgsOptions { m, ..LbfgsOptions::default() }, exact)?;
        println!("quadratic, m = {m:2}: {} iterations, |g| = {:.1e}", r.iterations, r.grad_norm);
    }

    let rosenbrock = |x: &Vec<f64>| {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Ok((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    };
    let r = minimize(rosenbrock, vec![-1.2, 1.0], &LbfgsOptions { max_iters: 500, ..LbfgsOptions::default() })?;
    println!(
        "rosenbrock: x = [{:.4}, {:.4}], f = {:.3e} after {} iterations, converged: {}",
        r.x[0], r.x[1], r.cost, r.iterations, r.converged
    );
    Ok(())
}
