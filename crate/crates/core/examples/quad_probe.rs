// scratch probe, removed before finishing
use ordnet::optim::{minimize, Solver, StopReason, TrainConfig};

fn run(n: usize, spread: f64) {
    let diag: Vec<f64> = (0..n).map(|i| 1.0 + spread * i as f64).collect();
    let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
    let f = {
        let diag = diag.clone();
        let b = b.clone();
        move |x: &[f64]| {
            0.5 * x.iter().zip(&diag).map(|(xi, d)| d * xi * xi).sum::<f64>()
                - b.iter().zip(x).map(|(bi, xi)| bi * xi).sum::<f64>()
        }
    };
    let g = {
        let diag = diag.clone();
        let b = b.clone();
        move |x: &[f64]| {
            x.iter()
                .zip(&diag)
                .zip(&b)
                .map(|((xi, d), bi)| d * xi - bi)
                .collect::<Vec<f64>>()
        }
    };
    let cfg = TrainConfig {
        grad_tol: 1e-10,
        max_iters: 500,
        solver: Solver::Bfgs,
        ..Default::default()
    };
    let out = minimize(f, g, vec![1.0; n], &cfg, |_, _, _| false);
    println!(
        "n={n} spread={spread}: iters={} stop={:?} gnorm={:.2e}",
        out.iterations, out.stop, out.grad_norm
    );
    assert_eq!(out.stop, StopReason::GradientTolerance);
}

fn main() {
    for spread in [1.0, 2.0, 5.0, 9.0] {
        run(10, spread);
    }
}
