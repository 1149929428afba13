//! Datasets and experiment data plumbing.
//!
//! Two experiment families are supported directly:
//!
//! - the sin(x) regression set: evenly spaced points on an interval with a
//!   seeded random train/validation/test split,
//! - stiff-ODE surrogate data: Robertson trajectories (see [`ode`]) turned
//!   into next-step supervision pairs, one dataset per predicted quantity,
//!   with per-quantity affine normalization to [0, 1] and closed-loop
//!   [`rollout`] of the trained networks.
//!
//! External data enters through the CSV loader in [`io`].

pub mod io;
pub mod ode;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{forward, NetworkSpec, Params};
use crate::tensor::Vector;
use crate::{Error, Result};

use ode::TrajectorySet;

/// Index lists of the three splits. Disjoint, jointly covering the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Which split a batch draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

/// Input/target pairs with split bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
    pub split: SplitIndices,
    pub provenance: String,
    pub seed: u64,
}

/// Borrowed view over a subset of a dataset.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    inputs: Vec<&'a Vector>,
    targets: Vec<&'a Vector>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a Vector, &'a Vector)> + '_ {
        self.inputs.iter().copied().zip(self.targets.iter().copied())
    }
}

impl Dataset {
    /// A dataset with every sample in the training split.
    pub fn from_pairs(pairs: Vec<(Vector, Vector)>, provenance: &str, seed: u64) -> Self {
        let n = pairs.len();
        let (inputs, targets) = pairs.into_iter().unzip();
        Dataset {
            inputs,
            targets,
            split: SplitIndices {
                train: (0..n).collect(),
                validation: Vec::new(),
                test: Vec::new(),
            },
            provenance: provenance.to_string(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Checks that splits are disjoint and jointly cover all indices, and
    /// that inputs and targets have consistent lengths.
    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::Shape {
                op: "Dataset::validate",
                expected: format!("{} targets", self.inputs.len()),
                got: format!("{}", self.targets.len()),
            });
        }
        let mut seen = vec![false; self.len()];
        let all = self
            .split
            .train
            .iter()
            .chain(&self.split.validation)
            .chain(&self.split.test);
        let mut covered = 0usize;
        for &i in all {
            if i >= self.len() {
                return Err(Error::Config(format!(
                    "split index {} out of range for {} samples",
                    i,
                    self.len()
                )));
            }
            if seen[i] {
                return Err(Error::Config(format!("split index {} appears twice", i)));
            }
            seen[i] = true;
            covered += 1;
        }
        if covered != self.len() {
            return Err(Error::Config(format!(
                "splits cover {} of {} samples",
                covered,
                self.len()
            )));
        }
        Ok(())
    }

    pub fn batch(&self, kind: SplitKind) -> Batch<'_> {
        let idx = match kind {
            SplitKind::Train => &self.split.train,
            SplitKind::Validation => &self.split.validation,
            SplitKind::Test => &self.split.test,
        };
        Batch {
            inputs: idx.iter().map(|&i| &self.inputs[i]).collect(),
            targets: idx.iter().map(|&i| &self.targets[i]).collect(),
        }
    }

    /// Batch over every sample in index order.
    pub fn all(&self) -> Batch<'_> {
        Batch {
            inputs: self.inputs.iter().collect(),
            targets: self.targets.iter().collect(),
        }
    }
}

/// Sizes of the random split used by [`make_sin_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Evenly spaced points on `interval` with targets `sin(x)` and a seeded
/// random split. The endpoints are included: with `n_points = 1000` on
/// `[0, 2π]` the first input is exactly 0 and the last exactly 2π.
pub fn make_sin_dataset(
    n_points: usize,
    interval: (f64, f64),
    counts: SplitCounts,
    seed: u64,
) -> Result<Dataset> {
    if n_points < 2 {
        return Err(Error::Config(format!("need at least 2 points, got {n_points}")));
    }
    if counts.total() != n_points {
        return Err(Error::Config(format!(
            "split sizes {}+{}+{} != {} points",
            counts.train, counts.validation, counts.test, n_points
        )));
    }
    let (a, b) = interval;
    if !(b > a) {
        return Err(Error::Config(format!("interval must satisfy a < b, got [{a}, {b}]")));
    }
    let step = (b - a) / (n_points - 1) as f64;
    let mut inputs = Vec::with_capacity(n_points);
    let mut targets = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let x = if i == n_points - 1 { b } else { a + step * i as f64 };
        inputs.push(Vector::new(vec![x]));
        targets.push(Vector::new(vec![x.sin()]));
    }
    let split = random_split(n_points, counts, seed);
    let ds = Dataset {
        inputs,
        targets,
        split,
        provenance: format!("sin(x), {n_points} evenly spaced points on [{a}, {b}]"),
        seed,
    };
    ds.validate()?;
    Ok(ds)
}

/// Seeded shuffle of `0..n`, assigned train / validation / test in order.
/// Each index list is returned sorted, so batch iteration order is the
/// data order and survives serialization.
pub fn random_split(n: usize, counts: SplitCounts, seed: u64) -> SplitIndices {
    debug_assert_eq!(counts.total(), n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut test = idx.split_off(counts.train + counts.validation);
    let mut validation = idx.split_off(counts.train);
    let mut train = idx;
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    SplitIndices {
        train,
        validation,
        test,
    }
}

/// Affine map of one quantity onto [0, 1]: `x ↦ (x - min) / scale`.
/// Degenerate ranges fall back to `scale = 1` so the map stays invertible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantityScaler {
    pub min: f64,
    pub scale: f64,
}

impl QuantityScaler {
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() {
            min = 0.0;
            max = 0.0;
        }
        let scale = if max > min { max - min } else { 1.0 };
        QuantityScaler { min, scale }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / self.scale
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.scale + self.min
    }
}

/// Optional extra input feature carrying the (log) step duration; a
/// log-spaced grid has wildly varying steps, and the next-step map depends
/// on the step length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeFeature {
    None,
    /// `log10(t_{k+1} - t_k)`, normalized to [0, 1] over the grid.
    LogDt,
}

/// Per-quantity scalers plus the optional time-feature scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub quantities: Vec<QuantityScaler>,
    pub time_feature: TimeFeature,
    pub time_scaler: Option<QuantityScaler>,
}

impl Normalization {
    /// Input dimension of the supervised problem.
    pub fn input_dim(&self) -> usize {
        self.quantities.len()
            + match self.time_feature {
                TimeFeature::None => 0,
                TimeFeature::LogDt => 1,
            }
    }

    fn input_for(&self, state: &[f64], dt: f64) -> Vector {
        let mut v = Vec::with_capacity(self.input_dim());
        for (x, sc) in state.iter().zip(&self.quantities) {
            v.push(sc.normalize(*x));
        }
        if let TimeFeature::LogDt = self.time_feature {
            let sc = self.time_scaler.expect("LogDt feature requires a fitted time scaler");
            v.push(sc.normalize(dt.log10()));
        }
        Vector::new(v)
    }
}

/// Options for [`trajectory_to_pairs`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairsConfig {
    /// Fraction of pairs held out for validation (seeded shuffle).
    pub val_fraction: f64,
    pub seed: u64,
    pub time_feature: TimeFeature,
}

impl Default for PairsConfig {
    fn default() -> Self {
        PairsConfig {
            val_fraction: 0.2,
            seed: 0,
            time_feature: TimeFeature::LogDt,
        }
    }
}

/// Next-step supervision pairs: one dataset per quantity.
#[derive(Debug, Clone)]
pub struct SupervisedSet {
    /// `datasets[q]`: inputs are the normalized full state at `t_k` (plus
    /// any time feature), targets the normalized quantity `q` at `t_{k+1}`.
    pub datasets: Vec<Dataset>,
    pub normalization: Normalization,
}

/// Converts trajectories into per-quantity next-step datasets with shared
/// normalization fitted on `ts`.
pub fn trajectory_to_pairs(ts: &TrajectorySet, cfg: &PairsConfig) -> Result<SupervisedSet> {
    ts.validate()?;
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must be in [0, 1), got {}",
            cfg.val_fraction
        )));
    }
    let q_count = ts.quantity_names.len();
    if ts.trajectories.iter().all(|t| t.times.len() < 2) {
        return Err(Error::EmptyData("trajectory_to_pairs needs a trajectory with >= 2 steps"));
    }

    let quantities: Vec<QuantityScaler> = (0..q_count)
        .map(|q| {
            QuantityScaler::fit(
                ts.trajectories
                    .iter()
                    .flat_map(|t| t.states.iter().map(move |row| row[q])),
            )
        })
        .collect();
    let time_scaler = match cfg.time_feature {
        TimeFeature::None => None,
        TimeFeature::LogDt => Some(QuantityScaler::fit(
            ts.trajectories
                .iter()
                .flat_map(|t| t.times.windows(2).map(|w| (w[1] - w[0]).log10())),
        )),
    };
    let norm = Normalization {
        quantities,
        time_feature: cfg.time_feature,
        time_scaler,
    };

    let mut inputs = Vec::new();
    let mut next_states: Vec<Vec<f64>> = Vec::new();
    for traj in &ts.trajectories {
        for k in 0..traj.times.len() - 1 {
            let dt = traj.times[k + 1] - traj.times[k];
            inputs.push(norm.input_for(&traj.states[k], dt));
            next_states.push(traj.states[k + 1].clone());
        }
    }
    let n = inputs.len();
    let n_val = (cfg.val_fraction * n as f64).round() as usize;
    let split = random_split(
        n,
        SplitCounts {
            train: n - n_val,
            validation: n_val,
            test: 0,
        },
        cfg.seed,
    );

    let datasets = (0..q_count)
        .map(|q| {
            let targets = next_states
                .iter()
                .map(|row| Vector::new(vec![norm.quantities[q].normalize(row[q])]))
                .collect();
            let ds = Dataset {
                inputs: inputs.clone(),
                targets,
                split: split.clone(),
                provenance: format!("next-step pairs for quantity '{}'", ts.quantity_names[q]),
                seed: cfg.seed,
            };
            debug_assert!(ds.validate().is_ok());
            ds
        })
        .collect();

    Ok(SupervisedSet {
        datasets,
        normalization: norm,
    })
}

/// Closed-loop prediction of `n_steps` grid steps from a raw initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// Grid times covered, `times[0]` being the initial time.
    pub times: Vec<f64>,
    /// Raw (denormalized) states, one row per time.
    pub states: Vec<Vec<f64>>,
    /// Step index at which a non-finite prediction appeared, if any; the
    /// returned states stop just before it.
    pub truncated_at: Option<usize>,
}

/// Autoregressive rollout: the per-quantity network outputs at step k are
/// combined into the input state for step k+1. Only the initial condition
/// comes from data.
pub fn rollout(
    nets: &[(NetworkSpec, Params)],
    norm: &Normalization,
    time_grid: &[f64],
    ic: &[f64],
    n_steps: usize,
) -> Result<RolloutResult> {
    let q_count = norm.quantities.len();
    if nets.len() != q_count {
        return Err(Error::Config(format!(
            "{} networks for {} quantities",
            nets.len(),
            q_count
        )));
    }
    if ic.len() != q_count {
        return Err(Error::Config(format!(
            "initial state has {} entries for {} quantities",
            ic.len(),
            q_count
        )));
    }
    if time_grid.len() < n_steps + 1 {
        return Err(Error::Config(format!(
            "time grid has {} points; {} steps need {}",
            time_grid.len(),
            n_steps,
            n_steps + 1
        )));
    }
    for (spec, p) in nets {
        p.validate_for(spec)?;
        if spec.input_dim() != norm.input_dim() || spec.output_dim() != 1 {
            return Err(Error::Config(format!(
                "network must map {} inputs to 1 output, got {} -> {}",
                norm.input_dim(),
                spec.input_dim(),
                spec.output_dim()
            )));
        }
    }

    let mut states = vec![ic.to_vec()];
    let mut times = vec![time_grid[0]];
    let mut state = ic.to_vec();
    let mut truncated_at = None;

    for k in 0..n_steps {
        let dt = time_grid[k + 1] - time_grid[k];
        let input = norm.input_for(&state, dt);
        let mut next = vec![0.0; q_count];
        let mut finite = true;
        for (q, (spec, p)) in nets.iter().enumerate() {
            match forward(spec, p, &input) {
                Ok(trace) => {
                    next[q] = norm.quantities[q].denormalize(trace.output()[0]);
                    if !next[q].is_finite() {
                        finite = false;
                    }
                }
                Err(Error::NonFinite { .. }) => finite = false,
                Err(e) => return Err(e),
            }
        }
        if !finite {
            truncated_at = Some(k);
            break;
        }
        state = next;
        states.push(state.clone());
        times.push(time_grid[k + 1]);
    }

    Ok(RolloutResult {
        times,
        states,
        truncated_at,
    })
}

/// Relative error in the 2-norm, `‖pred - truth‖₂ / ‖truth‖₂`.
/// Falls back to the absolute norm when the truth is identically zero.
pub fn relative_l2_error(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "series lengths differ");
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}
