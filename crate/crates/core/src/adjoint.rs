//! Reverse-mode gradients via the state/adjoint equations.
//!
//! For the forward map of [`crate::network::forward`], stationarity of the
//! Lagrangian in the layer states gives the adjoint recursion
//!
//! ```text
//! ψ_L     = -residual                         (residual = ∂misfit/∂y_L)
//! ψ_{L-1} =  W_{L-1}ᵀ ψ_L
//! ψ_j     =  Pᵀ ψ_{j+1} + τ·W_jᵀ (ψ_{j+1} ⊙ σ'(z_j))      j = L-2..1
//! ```
//!
//! and the per-sample misfit gradient blocks
//!
//! ```text
//! ∂W_{L-1} = -ψ_L y_{L-1}ᵀ
//! ∂W_j     = -τ·(ψ_{j+1} ⊙ σ'(z_j)) y_jᵀ                   j = 0..L-2
//! ∂b_j     = -τ·(ψ_{j+1} ⊙ σ'(z_j))                        j = 0..L-2
//! ```
//!
//! The sign of `ψ_{L-1}` and the σ' argument `z_j = W_j y_j + b_j` follow
//! from re-deriving the recursion, and [`fd_gradient`] — central differences
//! of the loss over the flattened parameters, touching none of the code
//! above — is the arbiter: the two routes must agree to tight tolerance.
//! Regularizer and ordering-penalty gradients enter once, per parameter,
//! in [`full_gradient`].

use crate::data::Batch;
use crate::loss::{order_penalty_grad, smoothed_abs_derivative, total_loss, LossConfig};
use crate::network::{forward, LayerTrace, NetworkSpec, Params, SkipPolicy};
use crate::tensor::{hadamard, transpose_matvec, Vector};
use crate::{Error, Result};

pub use crate::network::GradientBundle;

/// Adjoint states `ψ₁..ψ_L` of one backward pass.
#[derive(Debug, Clone)]
pub struct AdjointTrace {
    psis: Vec<Vector>,
}

impl AdjointTrace {
    /// `ψ_j` for `j = 1..L`.
    pub fn psi(&self, j: usize) -> &Vector {
        &self.psis[j - 1]
    }

    pub fn len(&self) -> usize {
        self.psis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psis.is_empty()
    }
}

/// One backward pass: per-sample misfit gradient only, no regularizers.
///
/// `trace` must come from `forward` on the same `(spec, p)`, and `residual`
/// is the derivative of the per-sample data misfit with respect to the
/// network output (for squared error: `y_L - s`).
pub fn backward(
    spec: &NetworkSpec,
    p: &Params,
    trace: &LayerTrace,
    residual: &Vector,
) -> Result<(AdjointTrace, GradientBundle)> {
    let l = spec.num_layers();
    if trace.states.len() != l + 1 || trace.preactivations.len() != l - 1 {
        return Err(Error::Shape {
            op: "backward",
            expected: format!("trace with {} states and {} preactivations", l + 1, l - 1),
            got: format!(
                "{} and {}",
                trace.states.len(),
                trace.preactivations.len()
            ),
        });
    }
    if residual.len() != spec.output_dim() {
        return Err(Error::Shape {
            op: "backward",
            expected: format!("residual of length {}", spec.output_dim()),
            got: format!("length {}", residual.len()),
        });
    }
    let tau = spec.tau;
    let act = spec.activation;

    // psis[j-1] holds ψ_j.
    let mut psis = vec![Vector::zeros(0); l];
    let mut psi_l = Vector::zeros(residual.len());
    for i in 0..residual.len() {
        psi_l[i] = -residual[i];
    }
    psis[l - 1] = psi_l;
    psis[l - 2] = transpose_matvec(&p.weights[l - 1], &psis[l - 1])?;

    for j in (1..=l.saturating_sub(2)).rev() {
        // ψ_j from ψ_{j+1}; z_j is preactivations[j].
        let sigma_prime = derivative_of(&trace.preactivations[j], act);
        let gated = hadamard(&psis[j], &sigma_prime)?;
        let mut psi = transpose_matvec(&p.weights[j], &gated)?;
        for x in psi.as_mut_slice() {
            *x *= tau;
        }
        if spec.skip_policy == SkipPolicy::Identity {
            for i in 0..psi.len() {
                psi[i] += psis[j][i];
            }
        }
        if !psi.is_finite() {
            return Err(Error::NonFinite {
                context: "backward",
                layer: j,
            });
        }
        psis[j - 1] = psi;
    }

    let mut grad = GradientBundle::zeros(spec);
    // Output layer: ∂W_{L-1} = -ψ_L y_{L-1}ᵀ.
    {
        let psi_l = &psis[l - 1];
        let y = &trace.states[l - 1];
        let w = &mut grad.weights[l - 1];
        for i in 0..psi_l.len() {
            for k in 0..y.len() {
                w[(i, k)] = -psi_l[i] * y[k];
            }
        }
    }
    for j in 0..l - 1 {
        let sigma_prime = derivative_of(&trace.preactivations[j], act);
        let gated = hadamard(&psis[j], &sigma_prime)?;
        let y = &trace.states[j];
        let w = &mut grad.weights[j];
        for i in 0..gated.len() {
            let gi = -tau * gated[i];
            for k in 0..y.len() {
                w[(i, k)] = gi * y[k];
            }
            grad.biases[j][i] = gi;
        }
    }

    Ok((AdjointTrace { psis }, grad))
}

fn derivative_of(z: &Vector, act: crate::network::Activation) -> Vector {
    let mut out = Vector::zeros(z.len());
    for i in 0..z.len() {
        out[i] = act.derivative(z[i]);
    }
    out
}

/// Gradient of the full objective over a batch: the (1/N)-scaled sum of
/// per-sample misfit gradients plus the enabled regularizer and ordering
/// contributions. Samples are accumulated in batch order.
pub fn full_gradient(
    spec: &NetworkSpec,
    p: &Params,
    batch: &Batch<'_>,
    cfg: &LossConfig,
) -> Result<GradientBundle> {
    if batch.is_empty() {
        return Err(Error::EmptyData("full_gradient needs a nonempty batch"));
    }
    let mut grad = GradientBundle::zeros(spec);

    if cfg.terms.mse {
        for (u, s) in batch.iter() {
            let trace = forward(spec, p, u)?;
            let y = trace.output();
            if y.len() != s.len() {
                return Err(Error::Shape {
                    op: "full_gradient",
                    expected: format!("target of length {}", y.len()),
                    got: format!("length {}", s.len()),
                });
            }
            let mut residual = Vector::zeros(y.len());
            for i in 0..y.len() {
                residual[i] = y[i] - s[i];
            }
            let (_, sample_grad) = backward(spec, p, &trace, &residual)?;
            grad.accumulate(&sample_grad, 1.0);
        }
        grad.scale(1.0 / batch.len() as f64);
    }

    if cfg.terms.l1 || cfg.terms.l2 {
        let half_lambda = 0.5 * cfg.lambda;
        let eps = cfg.l1_smoothing;
        let add_reg = |g: &mut [f64], xs: &[f64]| {
            for (gi, &x) in g.iter_mut().zip(xs) {
                if cfg.terms.l1 {
                    *gi += half_lambda * smoothed_abs_derivative(x, eps);
                }
                if cfg.terms.l2 {
                    *gi += cfg.lambda * x;
                }
            }
        };
        for (gw, w) in grad.weights.iter_mut().zip(&p.weights) {
            add_reg(gw.as_mut_slice(), w.as_slice());
        }
        for (gb, b) in grad.biases.iter_mut().zip(&p.biases) {
            add_reg(gb.as_mut_slice(), b.as_slice());
        }
    }

    if cfg.terms.order_penalty {
        let pen = order_penalty_grad(spec, p, cfg.gamma);
        grad.accumulate(&pen, 1.0);
    }

    if !grad.is_finite() {
        return Err(Error::NonFinite {
            context: "full_gradient",
            layer: 0,
        });
    }
    Ok(grad)
}

/// Central-difference gradient of the full objective over the flattened
/// parameters. Independent of [`backward`]; this is the oracle the adjoint
/// route is checked against.
pub fn fd_gradient(
    spec: &NetworkSpec,
    p: &Params,
    batch: &Batch<'_>,
    cfg: &LossConfig,
    h: f64,
) -> Result<GradientBundle> {
    assert!(h > 0.0, "step must be positive");
    let theta = p.flatten();
    let n = theta.len();
    let mut g = Vector::zeros(n);
    let mut probe = theta.clone();
    for k in 0..n {
        let orig = probe[k];
        probe[k] = orig + h;
        let plus = total_loss(spec, &Params::unflatten(spec, &probe)?, batch, cfg)?.total;
        probe[k] = orig - h;
        let minus = total_loss(spec, &Params::unflatten(spec, &probe)?, batch, cfg)?.total;
        probe[k] = orig;
        g[k] = (plus - minus) / (2.0 * h);
    }
    let params = Params::unflatten(spec, &g)?;
    Ok(GradientBundle {
        weights: params.weights,
        biases: params.biases,
    })
}

/// Largest componentwise error between two gradients, relative to
/// `1 + |reference|` per component.
pub fn max_relative_error(a: &GradientBundle, reference: &GradientBundle) -> f64 {
    let av = a.flatten();
    let rv = reference.flatten();
    let mut worst: f64 = 0.0;
    for i in 0..av.len() {
        let denom = 1.0 + rv[i].abs();
        worst = worst.max((av[i] - rv[i]).abs() / denom);
    }
    worst
}
