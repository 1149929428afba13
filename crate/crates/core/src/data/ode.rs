//! Stiff-ODE trajectory generation.
//!
//! The surrogate-modeling experiments need families of stiff trajectories.
//! They come from the Robertson chemical-kinetics system
//!
//! ```text
//! y₁' = -0.04 y₁ + 1e4 y₂ y₃
//! y₂' =  0.04 y₁ - 1e4 y₂ y₃ - 3e7 y₂²
//! y₃' =  3e7 y₂²
//! ```
//!
//! integrated with a 2-stage L-stable SDIRK method (Alexander's method,
//! stage coefficient `γ = 1 - √2/2`) with Newton iterations on each stage
//! and step-doubling error control. The Robertson right-hand side sums to
//! zero, so `y₁ + y₂ + y₃` is conserved; Runge-Kutta steps preserve that
//! linear invariant up to Newton-solve tolerance, which the tests check.
//!
//! States are logged on a caller-supplied time grid; the experiments use a
//! log-spaced grid because the interesting dynamics span many decades.

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;
use crate::{Error, Result};

/// An autonomous-in-form ODE system `y' = f(t, y)` with an analytic
/// Jacobian.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], out: &mut [f64]);
    /// Writes `∂f_i/∂y_j` into `jac` (row i, column j).
    fn jacobian(&self, t: f64, y: &[f64], jac: &mut Matrix);
}

/// The Robertson kinetics benchmark.
pub struct Robertson;

impl OdeSystem for Robertson {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, y: &[f64], out: &mut [f64]) {
        out[0] = -0.04 * y[0] + 1.0e4 * y[1] * y[2];
        out[1] = 0.04 * y[0] - 1.0e4 * y[1] * y[2] - 3.0e7 * y[1] * y[1];
        out[2] = 3.0e7 * y[1] * y[1];
    }

    fn jacobian(&self, _t: f64, y: &[f64], jac: &mut Matrix) {
        jac[(0, 0)] = -0.04;
        jac[(0, 1)] = 1.0e4 * y[2];
        jac[(0, 2)] = 1.0e4 * y[1];
        jac[(1, 0)] = 0.04;
        jac[(1, 1)] = -1.0e4 * y[2] - 6.0e7 * y[1];
        jac[(1, 2)] = -1.0e4 * y[1];
        jac[(2, 0)] = 0.0;
        jac[(2, 1)] = 6.0e7 * y[1];
        jac[(2, 2)] = 0.0;
    }
}

/// Integrator tolerances and limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step size.
    pub h_init: f64,
    /// Hard cap on accepted + rejected steps per grid interval chain.
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rtol: 1e-8,
            atol: 1e-12,
            h_init: 1e-6,
            max_steps: 2_000_000,
        }
    }
}

const SDIRK_GAMMA: f64 = 0.292_893_218_813_452_5; // 1 - √2/2

/// Solves one implicit stage `k = f(ts, y_base + γh·k)` by Newton iteration.
/// Returns `None` when Newton fails to converge.
fn solve_stage(
    sys: &dyn OdeSystem,
    ts: f64,
    y_base: &[f64],
    gh: f64,
    k_init: &[f64],
    scale: &[f64],
) -> Option<Vec<f64>> {
    let n = sys.dim();
    let mut k = k_init.to_vec();
    let mut stage_y = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut jac = Matrix::zeros(n, n);

    for _ in 0..50 {
        for i in 0..n {
            stage_y[i] = y_base[i] + gh * k[i];
        }
        sys.rhs(ts, &stage_y, &mut f);
        for i in 0..n {
            resid[i] = k[i] - f[i];
        }
        sys.jacobian(ts, &stage_y, &mut jac);
        // Newton matrix I - γh·J
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = -gh * jac[(i, j)];
            }
            a[(i, i)] += 1.0;
        }
        let mut delta: Vec<f64> = resid.iter().map(|r| -r).collect();
        if !solve_linear(&mut a, &mut delta) {
            return None;
        }
        let mut norm2 = 0.0;
        for i in 0..n {
            k[i] += delta[i];
            let scaled = gh * delta[i] / scale[i];
            norm2 += scaled * scaled;
        }
        if !norm2.is_finite() {
            return None;
        }
        // converged when the implied state increment is far below the
        // local error tolerance
        if (norm2 / n as f64).sqrt() <= 1e-3 {
            // one more sanity pass on the residual
            for i in 0..n {
                stage_y[i] = y_base[i] + gh * k[i];
            }
            sys.rhs(ts, &stage_y, &mut f);
            let mut r2 = 0.0;
            for i in 0..n {
                let scaled = gh * (k[i] - f[i]) / scale[i];
                r2 += scaled * scaled;
            }
            if (r2 / n as f64).sqrt() <= 1e-2 {
                return Some(k);
            }
        }
    }
    None
}

/// One SDIRK2 step of size `h` from `(t, y)`.
fn sdirk_step(
    sys: &dyn OdeSystem,
    t: f64,
    y: &[f64],
    h: f64,
    scale: &[f64],
) -> Option<Vec<f64>> {
    let n = sys.dim();
    let g = SDIRK_GAMMA;
    let gh = g * h;

    let mut f0 = vec![0.0; n];
    sys.rhs(t, y, &mut f0);

    let k1 = solve_stage(sys, t + gh, y, gh, &f0, scale)?;

    let mut base2 = vec![0.0; n];
    for i in 0..n {
        base2[i] = y[i] + (1.0 - g) * h * k1[i];
    }
    let k2 = solve_stage(sys, t + h, &base2, gh, &k1, scale)?;

    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = y[i] + h * ((1.0 - g) * k1[i] + g * k2[i]);
        if !out[i].is_finite() {
            return None;
        }
    }
    Some(out)
}

/// Gaussian elimination with partial pivoting; `a` and `b` are destroyed,
/// the solution lands in `b`. Returns false on a (numerically) singular
/// matrix.
fn solve_linear(a: &mut Matrix, b: &mut [f64]) -> bool {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[(col, col)].abs();
        for r in col + 1..n {
            let v = a[(r, col)].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return false;
        }
        if pivot != col {
            for c in 0..n {
                let tmp = a[(col, c)];
                a[(col, c)] = a[(pivot, c)];
                a[(pivot, c)] = tmp;
            }
            b.swap(col, pivot);
        }
        let inv = 1.0 / a[(col, col)];
        for r in col + 1..n {
            let factor = a[(r, col)] * inv;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[(r, c)] -= factor * a[(col, c)];
            }
            b[r] -= factor * b[col];
        }
    }
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[(r, c)] * b[c];
        }
        b[r] = acc / a[(r, r)];
    }
    true
}

/// Integrates `sys` from `times[0]` through every grid time, returning one
/// state row per grid time. `times` must be strictly increasing and
/// `states[0]` is exactly `ic`.
pub fn integrate_to_grid(
    sys: &dyn OdeSystem,
    ic: &[f64],
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = sys.dim();
    let fail = |reason: String| Error::Integrator {
        ic: ic.to_vec(),
        reason,
    };
    if ic.len() != n {
        return Err(fail(format!("initial condition has length {}, need {}", ic.len(), n)));
    }
    if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(fail("time grid must be strictly increasing with >= 2 points".into()));
    }

    let mut out = Vec::with_capacity(times.len());
    out.push(ic.to_vec());
    let mut y = ic.to_vec();
    let mut t = times[0];
    let mut h = cfg.h_init;
    let mut steps = 0usize;

    for &target in &times[1..] {
        while t < target {
            steps += 1;
            if steps > cfg.max_steps {
                return Err(fail(format!("exceeded {} steps at t = {t:.6e}", cfg.max_steps)));
            }
            let h_try = h.min(target - t);
            if h_try < 1e-14 * t.abs().max(1.0) {
                return Err(fail(format!("step size underflow at t = {t:.6e}")));
            }
            let scale: Vec<f64> = y.iter().map(|yi| cfg.atol + cfg.rtol * yi.abs()).collect();

            let attempt = (|| {
                let y_big = sdirk_step(sys, t, &y, h_try, &scale)?;
                let y_half = sdirk_step(sys, t, &y, 0.5 * h_try, &scale)?;
                let y_fine = sdirk_step(sys, t + 0.5 * h_try, &y_half, 0.5 * h_try, &scale)?;
                Some((y_big, y_fine))
            })();

            match attempt {
                None => {
                    // Newton trouble: retreat hard
                    h = 0.25 * h_try;
                    continue;
                }
                Some((y_big, y_fine)) => {
                    let mut err2 = 0.0;
                    for i in 0..n {
                        let sc = cfg.atol + cfg.rtol * y[i].abs().max(y_fine[i].abs());
                        let e = (y_big[i] - y_fine[i]) / (3.0 * sc);
                        err2 += e * e;
                    }
                    let err = (err2 / n as f64).sqrt();
                    let factor = if err > 0.0 {
                        0.9 * err.powf(-1.0 / 3.0)
                    } else {
                        4.0
                    };
                    if err <= 1.0 {
                        t += h_try;
                        y = y_fine;
                        h = h_try * factor.clamp(0.25, 4.0);
                    } else {
                        h = h_try * factor.clamp(0.2, 0.9);
                    }
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// One named trajectory: a strictly increasing time grid and one state row
/// per grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub name: String,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// A family of trajectories over shared quantity names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub quantity_names: Vec<String>,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn validate(&self) -> Result<()> {
        let q = self.quantity_names.len();
        for traj in &self.trajectories {
            if traj.times.len() != traj.states.len() {
                return Err(Error::Config(format!(
                    "trajectory '{}' has {} times but {} state rows",
                    traj.name,
                    traj.times.len(),
                    traj.states.len()
                )));
            }
            if traj.times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!(
                    "trajectory '{}' times are not strictly increasing",
                    traj.name
                )));
            }
            for (i, row) in traj.states.iter().enumerate() {
                if row.len() != q {
                    return Err(Error::Config(format!(
                        "trajectory '{}' row {} has {} entries, need {}",
                        traj.name,
                        i,
                        row.len(),
                        q
                    )));
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config(format!(
                        "trajectory '{}' row {} contains a non-finite value",
                        traj.name, i
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn by_name(&self, name: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.name == name)
    }
}

/// Time-grid shape for generated trajectories: `t = 0` followed by
/// `points` log-spaced times from `t_first` to `t_last`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogGrid {
    pub t_first: f64,
    pub t_last: f64,
    pub points: usize,
}

impl Default for LogGrid {
    fn default() -> Self {
        LogGrid {
            t_first: 1e-4,
            t_last: 1e4,
            points: 80,
        }
    }
}

impl LogGrid {
    pub fn times(&self) -> Result<Vec<f64>> {
        if !(self.t_first > 0.0 && self.t_last > self.t_first) || self.points < 2 {
            return Err(Error::Config(format!(
                "log grid needs 0 < t_first < t_last and >= 2 points, got {:?}",
                self
            )));
        }
        let mut times = Vec::with_capacity(self.points + 1);
        times.push(0.0);
        let ratio = (self.t_last / self.t_first).ln() / (self.points - 1) as f64;
        for i in 0..self.points {
            times.push(self.t_first * (ratio * i as f64).exp());
        }
        Ok(times)
    }
}

/// Integrates the Robertson system from each initial condition onto the
/// log grid. Initial conditions are named `icN` in input order.
pub fn make_stiff_ode_set(
    ics: &[Vec<f64>],
    grid: &LogGrid,
    cfg: &IntegratorConfig,
) -> Result<TrajectorySet> {
    if ics.is_empty() {
        return Err(Error::EmptyData("make_stiff_ode_set needs at least one initial condition"));
    }
    let times = grid.times()?;
    let sys = Robertson;
    let mut trajectories = Vec::with_capacity(ics.len());
    for (i, ic) in ics.iter().enumerate() {
        let states = integrate_to_grid(&sys, ic, &times, cfg)?;
        trajectories.push(Trajectory {
            name: format!("ic{}", i),
            times: times.clone(),
            states,
        });
    }
    let set = TrajectorySet {
        quantity_names: vec!["y1".into(), "y2".into(), "y3".into()],
        trajectories,
    };
    set.validate()?;
    Ok(set)
}
