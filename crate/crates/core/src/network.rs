//! ResNet / feedforward architecture, forward evaluation and parameter
//! tooling.
//!
//! A network with widths `n₀..n_L` is the composition of `L` layer maps.
//! The forward map (all layer states are retained for the adjoint pass):
//!
//! ```text
//! y₀ = u
//! y₁ = τ·σ(W₀ y₀ + b₀)
//! y_j = skip(y_{j-1}) + τ·σ(W_{j-1} y_{j-1} + b_{j-1})    j = 2..L-1
//! y_L = W_{L-1} y_{L-1}
//! ```
//!
//! where `skip` is the identity (uniform hidden widths required) or zero.
//! With zero skips and τ = 1 this is a plain feedforward network; with
//! identity skips each hidden update is a forward-Euler step of an ODE.
//!
//! Weight orientation: `W_ℓ` is stored as `(n_{ℓ+1} × n_ℓ)` so the forward
//! pass is a plain matvec. The output-layer bias is never stored; it is
//! identically zero.
//!
//! Permuting the neurons of a hidden layer — its biases, the rows of the
//! incoming weight matrix, and the columns of the outgoing one — leaves the
//! network function unchanged. [`apply_permutation`] performs such a
//! relabeling and [`count_equivalent_parameterizations`] counts them.

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::tensor::{matvec, Matrix, Vector};
use crate::{Error, Result};

/// Elementwise activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`. For ReLU the derivative at 0 is taken to be 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Skip-connection policy for the hidden layers.
///
/// Skip matrices are never stored as data; identity and zero cover every
/// supported architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipPolicy {
    /// `P_ℓ = I`; requires a uniform hidden width.
    Identity,
    /// `P_ℓ = 0`; the network degenerates to a feedforward net when τ = 1.
    Zero,
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Widths `n₀..n_L` (input, hidden..., output).
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Skip scalar τ > 0.
    pub tau: f64,
    pub skip_policy: SkipPolicy,
    /// Whether training is meant to enforce the bias ordering
    /// `b_ℓ^j ≤ b_ℓ^{j+1}` (informational; the loss config decides).
    #[serde(default)]
    pub order_biases: bool,
}

impl NetworkSpec {
    pub fn new(
        widths: Vec<usize>,
        activation: Activation,
        tau: f64,
        skip_policy: SkipPolicy,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            widths,
            activation,
            tau,
            skip_policy,
            order_biases: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Config(format!(
                "network needs at least 2 layers (input, hidden, output widths), got widths {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "all widths must be >= 1, got {:?}",
                self.widths
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.skip_policy == SkipPolicy::Identity {
            let hidden = self.hidden_widths();
            if hidden.iter().any(|&w| w != hidden[0]) {
                return Err(Error::Config(format!(
                    "identity skips require a uniform hidden width, got {:?}",
                    hidden
                )));
            }
        }
        Ok(())
    }

    /// Number of layer maps `L`.
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Hidden widths `n₁..n_{L-1}`.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    /// Total number of stored parameters (the output-layer bias does not
    /// exist). For widths `[1, 50, 50, 1]` this is 2700.
    pub fn total_params(&self) -> usize {
        let l = self.num_layers();
        let mut n = 0;
        for ell in 0..l {
            n += self.widths[ell + 1] * self.widths[ell];
            if ell < l - 1 {
                n += self.widths[ell + 1];
            }
        }
        n
    }
}

/// The optimization variable θ: per-layer weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `W₀..W_{L-1}`, `W_ℓ` stored as `(n_{ℓ+1} × n_ℓ)`.
    pub weights: Vec<Matrix>,
    /// `b₀..b_{L-2}`; the output-layer bias is identically zero.
    pub biases: Vec<Vector>,
}

impl Params {
    /// All-zero parameters for `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let l = spec.num_layers();
        let weights = (0..l)
            .map(|ell| Matrix::zeros(spec.widths[ell + 1], spec.widths[ell]))
            .collect();
        let biases = (0..l - 1)
            .map(|ell| Vector::zeros(spec.widths[ell + 1]))
            .collect();
        Params { weights, biases }
    }

    /// Glorot-style initialization: weights uniform in
    /// `[-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out))]`, biases zero.
    pub fn glorot<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut p = Params::zeros(spec);
        for (ell, w) in p.weights.iter_mut().enumerate() {
            let fan_in = spec.widths[ell] as f64;
            let fan_out = spec.widths[ell + 1] as f64;
            let lim = (6.0 / (fan_in + fan_out)).sqrt();
            for x in w.as_mut_slice() {
                *x = rng.gen_range(-lim..=lim);
            }
        }
        p
    }

    /// Checks that shapes are consistent with `spec`.
    pub fn validate_for(&self, spec: &NetworkSpec) -> Result<()> {
        let l = spec.num_layers();
        if self.weights.len() != l || self.biases.len() != l - 1 {
            return Err(Error::Shape {
                op: "Params::validate_for",
                expected: format!("{} weight matrices and {} bias vectors", l, l - 1),
                got: format!("{} and {}", self.weights.len(), self.biases.len()),
            });
        }
        for ell in 0..l {
            let (r, c) = (spec.widths[ell + 1], spec.widths[ell]);
            if self.weights[ell].rows() != r || self.weights[ell].cols() != c {
                return Err(Error::Shape {
                    op: "Params::validate_for",
                    expected: format!("W_{} of shape {}x{}", ell, r, c),
                    got: format!("{}x{}", self.weights[ell].rows(), self.weights[ell].cols()),
                });
            }
            if ell < l - 1 && self.biases[ell].len() != r {
                return Err(Error::Shape {
                    op: "Params::validate_for",
                    expected: format!("b_{} of length {}", ell, r),
                    got: format!("length {}", self.biases[ell].len()),
                });
            }
        }
        Ok(())
    }

    /// Flattens to one vector. Ordering is layer-major and stable:
    /// `W₀` row-major, `b₀`, `W₁`, `b₁`, ..., `W_{L-1}` (no trailing bias).
    pub fn flatten(&self) -> Vector {
        let mut out = Vec::new();
        for ell in 0..self.weights.len() {
            out.extend_from_slice(self.weights[ell].as_slice());
            if ell < self.biases.len() {
                out.extend_from_slice(self.biases[ell].as_slice());
            }
        }
        Vector::new(out)
    }

    /// Inverse of [`Params::flatten`].
    pub fn unflatten(spec: &NetworkSpec, v: &Vector) -> Result<Params> {
        if v.len() != spec.total_params() {
            return Err(Error::Shape {
                op: "Params::unflatten",
                expected: format!("{} entries for widths {:?}", spec.total_params(), spec.widths),
                got: format!("{} entries", v.len()),
            });
        }
        let l = spec.num_layers();
        let src = v.as_slice();
        let mut pos = 0;
        let mut weights = Vec::with_capacity(l);
        let mut biases = Vec::with_capacity(l - 1);
        for ell in 0..l {
            let (r, c) = (spec.widths[ell + 1], spec.widths[ell]);
            weights.push(Matrix::from_rows(r, c, src[pos..pos + r * c].to_vec())?);
            pos += r * c;
            if ell < l - 1 {
                biases.push(Vector::new(src[pos..pos + r].to_vec()));
                pos += r;
            }
        }
        Ok(Params { weights, biases })
    }
}

/// Gradient with respect to θ, mirroring [`Params`] shapes and flattening
/// identically.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl GradientBundle {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let p = Params::zeros(spec);
        GradientBundle {
            weights: p.weights,
            biases: p.biases,
        }
    }

    pub fn flatten(&self) -> Vector {
        Params {
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        }
        .flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite) && self.biases.iter().all(Vector::is_finite)
    }

    /// `self ← self + alpha · other` (shapes must match).
    pub fn accumulate(&mut self, other: &GradientBundle, alpha: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += alpha * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for w in &mut self.weights {
            for x in w.as_mut_slice() {
                *x *= alpha;
            }
        }
        for b in &mut self.biases {
            for x in b.as_mut_slice() {
                *x *= alpha;
            }
        }
    }
}

/// All layer states and preactivations of one forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `y₀..y_L`.
    pub states: Vec<Vector>,
    /// `z_ℓ = W_ℓ y_ℓ + b_ℓ` for `ℓ = 0..L-2`.
    pub preactivations: Vec<Vector>,
}

impl LayerTrace {
    /// The network output `y_L`.
    pub fn output(&self) -> &Vector {
        self.states.last().unwrap()
    }
}

/// Evaluates the network, retaining every layer state.
pub fn forward(spec: &NetworkSpec, p: &Params, u: &Vector) -> Result<LayerTrace> {
    p.validate_for(spec)?;
    if u.len() != spec.input_dim() {
        return Err(Error::Shape {
            op: "forward",
            expected: format!("input of length {}", spec.input_dim()),
            got: format!("length {}", u.len()),
        });
    }
    let l = spec.num_layers();
    let tau = spec.tau;
    let act = spec.activation;

    let mut states = Vec::with_capacity(l + 1);
    let mut preactivations = Vec::with_capacity(l - 1);
    states.push(u.clone());

    for j in 1..l {
        let prev = &states[j - 1];
        let mut z = matvec(&p.weights[j - 1], prev)?;
        for (zi, bi) in z.as_mut_slice().iter_mut().zip(p.biases[j - 1].iter()) {
            *zi += bi;
        }
        let mut y = Vector::zeros(z.len());
        for i in 0..z.len() {
            y[i] = tau * act.apply(z[i]);
        }
        if j >= 2 && spec.skip_policy == SkipPolicy::Identity {
            for i in 0..y.len() {
                y[i] += prev[i];
            }
        }
        if !y.is_finite() {
            return Err(Error::NonFinite {
                context: "forward",
                layer: j,
            });
        }
        preactivations.push(z);
        states.push(y);
    }

    let out = matvec(&p.weights[l - 1], &states[l - 1])?;
    if !out.is_finite() {
        return Err(Error::NonFinite {
            context: "forward",
            layer: l,
        });
    }
    states.push(out);

    Ok(LayerTrace {
        states,
        preactivations,
    })
}

/// Per-hidden-layer neuron relabelings.
#[derive(Debug, Clone, PartialEq)]
pub struct Permutation {
    /// One permutation of `0..n_h` per hidden layer; `perm[i]` is the source
    /// index of the neuron that lands at position `i`.
    pub layer_perms: Vec<Vec<usize>>,
}

impl Permutation {
    pub fn identity(spec: &NetworkSpec) -> Self {
        Permutation {
            layer_perms: spec.hidden_widths().iter().map(|&w| (0..w).collect()).collect(),
        }
    }

    /// A uniformly random valid permutation. Under identity skips one shared
    /// permutation is drawn for all hidden layers.
    pub fn random<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let hidden = spec.hidden_widths();
        let layer_perms = match spec.skip_policy {
            SkipPolicy::Identity => {
                let mut shared: Vec<usize> = (0..hidden[0]).collect();
                shared.shuffle(rng);
                vec![shared; hidden.len()]
            }
            SkipPolicy::Zero => hidden
                .iter()
                .map(|&w| {
                    let mut p: Vec<usize> = (0..w).collect();
                    p.shuffle(rng);
                    p
                })
                .collect(),
        };
        Permutation { layer_perms }
    }

    fn validate_for(&self, spec: &NetworkSpec) -> Result<()> {
        let hidden = spec.hidden_widths();
        if self.layer_perms.len() != hidden.len() {
            return Err(Error::Shape {
                op: "Permutation::validate_for",
                expected: format!("{} hidden-layer permutations", hidden.len()),
                got: format!("{}", self.layer_perms.len()),
            });
        }
        for (perm, &w) in self.layer_perms.iter().zip(hidden) {
            if perm.len() != w {
                return Err(Error::Shape {
                    op: "Permutation::validate_for",
                    expected: format!("permutation of length {}", w),
                    got: format!("length {}", perm.len()),
                });
            }
            let mut seen = vec![false; w];
            for &i in perm {
                if i >= w || seen[i] {
                    return Err(Error::Config(format!(
                        "not a bijection of 0..{}: {:?}",
                        w, perm
                    )));
                }
                seen[i] = true;
            }
        }
        if spec.skip_policy == SkipPolicy::Identity
            && self.layer_perms.windows(2).any(|w| w[0] != w[1])
        {
            return Err(Error::Config(
                "identity skips require one shared permutation across hidden layers".into(),
            ));
        }
        Ok(())
    }
}

/// Relabels hidden neurons so the network function is unchanged: for hidden
/// layer `h`, rows of `W_{h-1}` and entries of `b_{h-1}` move together with
/// the columns of `W_h`.
///
/// `W_k` connects layer `k` to layer `k+1`, so its rows follow layer
/// `k+1`'s permutation and its columns layer `k`'s; input and output
/// layers are never permuted.
pub fn apply_permutation(spec: &NetworkSpec, p: &Params, perm: &Permutation) -> Result<Params> {
    p.validate_for(spec)?;
    perm.validate_for(spec)?;
    let l = spec.num_layers();
    // perm_of[k]: permutation of layer k's neurons, None for input/output.
    let perm_of = |k: usize| -> Option<&Vec<usize>> {
        if (1..l).contains(&k) {
            Some(&perm.layer_perms[k - 1])
        } else {
            None
        }
    };
    let mut out = Params::zeros(spec);
    for k in 0..l {
        let rows = p.weights[k].rows();
        let cols = p.weights[k].cols();
        let row_perm = perm_of(k + 1);
        let col_perm = perm_of(k);
        for i in 0..rows {
            let src_i = row_perm.map_or(i, |pi| pi[i]);
            for j in 0..cols {
                let src_j = col_perm.map_or(j, |pi| pi[j]);
                out.weights[k][(i, j)] = p.weights[k][(src_i, src_j)];
            }
        }
        if k < l - 1 {
            for i in 0..rows {
                let src_i = row_perm.map_or(i, |pi| pi[i]);
                out.biases[k][i] = p.biases[k][src_i];
            }
        }
    }
    Ok(out)
}

/// The number of parameter rearrangements that leave the network function
/// unchanged, counted as the sum of `n_h!` over hidden layers. For widths
/// `[1, 10, 10, 1]` this is 7,257,600.
pub fn count_equivalent_parameterizations(spec: &NetworkSpec) -> BigUint {
    spec.hidden_widths().iter().map(|&w| factorial(w)).sum()
}

/// Diagnostic companion count: the product `Π n_h!` over hidden layers
/// (independent per-layer relabelings).
pub fn count_equivalent_parameterizations_product(spec: &NetworkSpec) -> BigUint {
    spec.hidden_widths().iter().map(|&w| factorial(w)).product()
}

fn factorial(n: usize) -> BigUint {
    (1..=n as u64).map(BigUint::from).product()
}

/// One out-of-order adjacent bias pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Bias-vector index ℓ (0-based over `b₀..b_{L-2}`).
    pub layer: usize,
    /// Pair index j: the violation is between entries j and j+1.
    pub index: usize,
    /// The (negative) difference `b^{j+1} - b^j`.
    pub gap: f64,
}

/// Census of bias-order violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub tol: f64,
    /// Number of adjacent pairs inspected (Σ over layers of `len - 1`).
    pub total_pairs: usize,
    pub count: usize,
    /// Most negative difference, if any pair violates.
    pub worst_gap: Option<f64>,
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    /// Fraction of pairs that satisfy the ordering.
    pub fn ordered_fraction(&self) -> f64 {
        if self.total_pairs == 0 {
            1.0
        } else {
            (self.total_pairs - self.count) as f64 / self.total_pairs as f64
        }
    }
}

/// Counts adjacent bias pairs with `b^{j+1} - b^j < -tol`. Ties never
/// violate: the ordering constraint is non-strict.
pub fn order_violations(p: &Params, tol: f64) -> ViolationReport {
    assert!(tol >= 0.0, "tolerance must be nonnegative");
    let mut report = ViolationReport {
        tol,
        total_pairs: 0,
        count: 0,
        worst_gap: None,
        violations: Vec::new(),
    };
    for (layer, b) in p.biases.iter().enumerate() {
        for j in 0..b.len().saturating_sub(1) {
            report.total_pairs += 1;
            let gap = b[j + 1] - b[j];
            if gap < -tol {
                report.count += 1;
                report.violations.push(Violation { layer, index: j, gap });
                if report.worst_gap.map_or(true, |w| gap < w) {
                    report.worst_gap = Some(gap);
                }
            }
        }
    }
    report
}

/// On-disk network snapshot: architecture, parameters and the training
/// hyperparameters that produced them.
///
/// Weight matrices are stored row-major, one flat array per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub tau: f64,
    pub skip_policy: SkipPolicy,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Checkpoint {
    pub fn from_parts(spec: &NetworkSpec, p: &Params, seed: u64, gamma: f64, lambda: f64) -> Self {
        Checkpoint {
            widths: spec.widths.clone(),
            activation: spec.activation,
            tau: spec.tau,
            skip_policy: spec.skip_policy,
            weights: p.weights.iter().map(|w| w.as_slice().to_vec()).collect(),
            biases: p.biases.iter().map(|b| b.as_slice().to_vec()).collect(),
            seed,
            gamma,
            lambda,
        }
    }

    pub fn into_parts(self) -> Result<(NetworkSpec, Params)> {
        let mut spec = NetworkSpec::new(self.widths, self.activation, self.tau, self.skip_policy)?;
        spec.order_biases = self.gamma > 0.0;
        let l = spec.num_layers();
        if self.weights.len() != l || self.biases.len() != l - 1 {
            return Err(Error::Config(format!(
                "checkpoint has {} weight blocks and {} bias blocks; widths {:?} need {} and {}",
                self.weights.len(),
                self.biases.len(),
                spec.widths,
                l,
                l - 1
            )));
        }
        let mut weights = Vec::with_capacity(l);
        for (ell, data) in self.weights.into_iter().enumerate() {
            weights.push(Matrix::from_rows(spec.widths[ell + 1], spec.widths[ell], data)?);
        }
        let biases = self.biases.into_iter().map(Vector::new).collect();
        let p = Params { weights, biases };
        p.validate_for(&spec)?;
        Ok((spec, p))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SHA-256 checksum of a flattened parameter vector (little-endian f64
/// bytes). Used to certify that two experiment arms share an
/// initialization.
pub fn params_checksum(v: &Vector) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for x in v.iter() {
        hasher.update(x.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}
