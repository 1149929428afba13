//! Loss terms and their configuration.
//!
//! The training objective is
//!
//! ```text
//! J(θ)   = 1/(2N) Σᵢ ‖y_L(uᵢ) - sᵢ‖² + (λ/2) Σ (‖W‖₁ + ‖b‖₁ + ‖W‖₂² + ‖b‖₂²)
//! J_γ(θ) = J(θ) + (γ/2) Σ_ℓ Σ_j min(b_ℓ^{j+1} - b_ℓ^j, 0)²
//! ```
//!
//! Norms on weight matrices are entrywise. The ordering penalty covers the
//! stored bias vectors `b₀..b_{L-2}` only (the output layer has no bias).
//!
//! BFGS assumes smoothness, so the L1 term uses a pseudo-Huber surrogate
//! `√(x² + ε²) - ε` with a configurable width ε; as ε → 0 it recovers the
//! exact absolute value. The ordering penalty is left as-is: the squared
//! negative part is C¹, which is enough in practice.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::network::{forward, GradientBundle, NetworkSpec, Params};
use crate::tensor::Vector;
use crate::{Error, Result};

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFlags {
    pub mse: bool,
    pub l1: bool,
    pub l2: bool,
    pub order_penalty: bool,
}

impl Default for TermFlags {
    fn default() -> Self {
        TermFlags {
            mse: true,
            l1: true,
            l2: true,
            order_penalty: true,
        }
    }
}

/// Loss configuration: λ, γ, L1 smoothing width and term flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Regularization weight λ ≥ 0 shared by the L1 and L2 terms.
    pub lambda: f64,
    /// Ordering-penalty weight γ ≥ 0.
    pub gamma: f64,
    /// Pseudo-Huber width ε for the smoothed L1 term.
    pub l1_smoothing: f64,
    #[serde(default)]
    pub terms: TermFlags,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1e-4,
            gamma: 0.0,
            l1_smoothing: 1e-8,
            terms: TermFlags::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.terms.l1 && !(self.l1_smoothing > 0.0) {
            return Err(Error::Config(format!(
                "l1_smoothing must be > 0 when the L1 term is enabled, got {}",
                self.l1_smoothing
            )));
        }
        Ok(())
    }

    /// Effective γ: zero when the ordering term is disabled.
    pub fn effective_gamma(&self) -> f64 {
        if self.terms.order_penalty {
            self.gamma
        } else {
            0.0
        }
    }
}

/// Per-term values of one loss evaluation. `total` sums the enabled terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub l1: f64,
    pub l2: f64,
    /// The `(γ/2)·g(θ)` term.
    pub order_penalty: f64,
    pub total: f64,
}

/// Mean squared error `1/(2N) Σ ‖yᵢ - sᵢ‖²`.
pub fn mse_term(outputs: &[Vector], targets: &[Vector]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptyData("mse_term needs at least one sample"));
    }
    if outputs.len() != targets.len() {
        return Err(Error::Shape {
            op: "mse_term",
            expected: format!("{} targets", outputs.len()),
            got: format!("{}", targets.len()),
        });
    }
    let mut acc = 0.0;
    for (y, s) in outputs.iter().zip(targets) {
        if y.len() != s.len() {
            return Err(Error::Shape {
                op: "mse_term",
                expected: format!("target of length {}", y.len()),
                got: format!("length {}", s.len()),
            });
        }
        for i in 0..y.len() {
            let d = y[i] - s[i];
            acc += d * d;
        }
    }
    Ok(acc / (2.0 * outputs.len() as f64))
}

/// Pseudo-Huber absolute value `√(x² + ε²) - ε`; exactly 0 at x = 0.
pub fn smoothed_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt() - eps
}

/// Derivative of [`smoothed_abs`]: `x / √(x² + ε²)`.
pub fn smoothed_abs_derivative(x: f64, eps: f64) -> f64 {
    x / (x * x + eps * eps).sqrt()
}

/// The two regularization terms, already scaled by λ/2:
/// `((λ/2)·Σ smoothed|x|, (λ/2)·Σ x²)` over all weights and biases.
pub fn reg_terms(p: &Params, cfg: &LossConfig) -> (f64, f64) {
    let half_lambda = 0.5 * cfg.lambda;
    let eps = cfg.l1_smoothing;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut visit = |x: f64| {
        l1 += smoothed_abs(x, eps);
        l2 += x * x;
    };
    for w in &p.weights {
        for &x in w.as_slice() {
            visit(x);
        }
    }
    for b in &p.biases {
        for &x in b.iter() {
            visit(x);
        }
    }
    (half_lambda * l1, half_lambda * l2)
}

/// The Moreau-Yosida ordering penalty
/// `(γ/2) Σ_ℓ Σ_j min(b_ℓ^{j+1} - b_ℓ^j, 0)²`.
///
/// Zero iff every stored bias vector is nondecreasing; ties incur no
/// penalty, and adding a constant to all biases of one layer changes
/// nothing.
pub fn order_penalty(p: &Params, gamma: f64) -> f64 {
    assert!(gamma >= 0.0, "gamma must be nonnegative");
    let mut acc = 0.0;
    for b in &p.biases {
        for j in 0..b.len().saturating_sub(1) {
            let d = b[j + 1] - b[j];
            if d < 0.0 {
                acc += d * d;
            }
        }
    }
    0.5 * gamma * acc
}

/// Gradient of [`order_penalty`]: for each negative difference
/// `d = b^{j+1} - b^j`, adds `γ·d` to `∂b^{j+1}` and `-γ·d` to `∂b^j`.
/// Weight blocks are zero.
pub fn order_penalty_grad(spec: &NetworkSpec, p: &Params, gamma: f64) -> GradientBundle {
    assert!(gamma >= 0.0, "gamma must be nonnegative");
    let mut g = GradientBundle::zeros(spec);
    for (ell, b) in p.biases.iter().enumerate() {
        for j in 0..b.len().saturating_sub(1) {
            let d = b[j + 1] - b[j];
            if d < 0.0 {
                g.biases[ell][j + 1] += gamma * d;
                g.biases[ell][j] -= gamma * d;
            }
        }
    }
    g
}

/// Evaluates the full objective over a batch, one forward pass per sample.
pub fn total_loss(
    spec: &NetworkSpec,
    p: &Params,
    batch: &Batch<'_>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyData("total_loss needs a nonempty batch"));
    }
    let mut mse = 0.0;
    if cfg.terms.mse {
        let mut acc = 0.0;
        for (u, s) in batch.iter() {
            let trace = forward(spec, p, u)?;
            let y = trace.output();
            if y.len() != s.len() {
                return Err(Error::Shape {
                    op: "total_loss",
                    expected: format!("target of length {}", y.len()),
                    got: format!("length {}", s.len()),
                });
            }
            for i in 0..y.len() {
                let d = y[i] - s[i];
                acc += d * d;
            }
        }
        mse = acc / (2.0 * batch.len() as f64);
    }
    let (l1, l2) = if cfg.terms.l1 || cfg.terms.l2 {
        reg_terms(p, cfg)
    } else {
        (0.0, 0.0)
    };
    let l1 = if cfg.terms.l1 { l1 } else { 0.0 };
    let l2 = if cfg.terms.l2 { l2 } else { 0.0 };
    let pen = if cfg.terms.order_penalty {
        order_penalty(p, cfg.gamma)
    } else {
        0.0
    };
    Ok(LossBreakdown {
        mse,
        l1,
        l2,
        order_penalty: pen,
        total: mse + l1 + l2 + pen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::network::{Activation, SkipPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec())
    }

    #[test]
    fn mse_zero_on_perfect_fit() {
        let out = vec![v(&[1.0, 2.0]), v(&[-0.5, 0.0])];
        assert_eq!(mse_term(&out, &out.clone()).unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_values() {
        assert_eq!(mse_term(&[v(&[1.0, 0.0])], &[v(&[0.0, 0.0])]).unwrap(), 0.5);
        // N = 2 scalars: (1/4)(1 + 9) = 2.5
        assert_eq!(
            mse_term(&[v(&[1.0]), v(&[3.0])], &[v(&[0.0]), v(&[0.0])]).unwrap(),
            2.5
        );
    }

    #[test]
    fn mse_rejects_empty_and_mismatch() {
        assert!(mse_term(&[], &[]).is_err());
        assert!(mse_term(&[v(&[1.0])], &[v(&[1.0, 2.0])]).is_err());
    }

    fn toy_spec() -> NetworkSpec {
        NetworkSpec::new(vec![1, 3, 1], Activation::Tanh, 1.0, SkipPolicy::Zero).unwrap()
    }

    #[test]
    fn reg_terms_zero_params() {
        let cfg = LossConfig {
            lambda: 2.0,
            ..Default::default()
        };
        let p = Params::zeros(&toy_spec());
        assert_eq!(reg_terms(&p, &cfg), (0.0, 0.0));
    }

    #[test]
    fn reg_terms_single_weight() {
        // one weight 3, λ = 2: l1 → |3| = 3 as ε → 0, l2 = 3² = 9
        let spec = toy_spec();
        let mut p = Params::zeros(&spec);
        p.weights[0].as_mut_slice()[0] = 3.0;
        let cfg = LossConfig {
            lambda: 2.0,
            l1_smoothing: 1e-12,
            ..Default::default()
        };
        let (l1, l2) = reg_terms(&p, &cfg);
        assert!((l1 - 3.0).abs() < 1e-9, "l1 {l1}");
        assert_eq!(l2, 9.0);
    }

    #[test]
    fn smoothed_abs_is_exact_at_zero() {
        for eps in [1e-12, 1e-8, 1e-2, 1.0] {
            assert_eq!(smoothed_abs(0.0, eps), 0.0);
        }
    }

    #[test]
    fn order_penalty_values() {
        let spec = toy_spec();
        let mut p = Params::zeros(&spec);

        p.biases[0] = v(&[-1.0, 0.0, 3.0]);
        assert_eq!(order_penalty(&p, 100.0), 0.0);

        p.biases[0] = v(&[0.0, 0.0, 0.0]);
        assert_eq!(order_penalty(&p, 100.0), 0.0);

        // b = (1, 0): (100/2)·(0-1)² = 50, third entry keeps order
        p.biases[0] = v(&[1.0, 0.0, 5.0]);
        assert_eq!(order_penalty(&p, 100.0), 50.0);
    }

    #[test]
    fn order_penalty_shift_invariant_per_layer() {
        let spec = NetworkSpec::new(vec![1, 4, 4, 1], Activation::Tanh, 1.0, SkipPolicy::Zero)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::zeros(&spec);
        for b in &mut p.biases {
            for x in b.as_mut_slice() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        let before = order_penalty(&p, 37.0);
        for x in p.biases[0].as_mut_slice() {
            *x += 5.5;
        }
        let after = order_penalty(&p, 37.0);
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn order_penalty_grad_hand_case() {
        // b = (1, 0): d = -1, so ∂b¹ = -γd = +100 and ∂b² = γd = -100
        let spec = NetworkSpec::new(vec![1, 2, 1], Activation::Tanh, 1.0, SkipPolicy::Zero)
            .unwrap();
        let mut p = Params::zeros(&spec);
        p.biases[0] = v(&[1.0, 0.0]);
        let g = order_penalty_grad(&spec, &p, 100.0);
        assert_eq!(g.biases[0].as_slice(), &[100.0, -100.0]);
        assert!(g.weights.iter().all(|w| w.as_slice().iter().all(|&x| x == 0.0)));

        p.biases[0] = v(&[0.0, 1.0]);
        let g = order_penalty_grad(&spec, &p, 100.0);
        assert_eq!(g.biases[0].as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn order_penalty_grad_matches_finite_differences() {
        let spec = NetworkSpec::new(vec![1, 6, 6, 1], Activation::Tanh, 1.0, SkipPolicy::Zero)
            .unwrap();
        let gamma = 42.0;
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        'outer: for _trial in 0..100 {
            let mut p = Params::zeros(&spec);
            for b in &mut p.biases {
                for x in b.as_mut_slice() {
                    *x = rng.gen_range(-1.0..1.0);
                }
            }
            // kink exclusion: skip instances with a near-zero difference
            for b in &p.biases {
                for j in 0..b.len() - 1 {
                    if (b[j + 1] - b[j]).abs() < 1e-4 {
                        continue 'outer;
                    }
                }
            }
            checked += 1;
            let g = order_penalty_grad(&spec, &p, gamma);
            for ell in 0..p.biases.len() {
                for j in 0..p.biases[ell].len() {
                    let mut plus = p.clone();
                    plus.biases[ell][j] += h;
                    let mut minus = p.clone();
                    minus.biases[ell][j] -= h;
                    let fd = (order_penalty(&plus, gamma) - order_penalty(&minus, gamma))
                        / (2.0 * h);
                    let a = g.biases[ell][j];
                    let denom = 1.0 + fd.abs();
                    assert!(
                        (a - fd).abs() / denom < 1e-6,
                        "layer {ell} entry {j}: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
        assert!(checked >= 50, "only {checked} instances checked");
    }

    #[test]
    fn total_loss_term_isolation() {
        let spec = toy_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::glorot(&spec, &mut rng);
        p.biases[0] = v(&[0.5, -0.5, 0.0]);
        let ds = Dataset::from_pairs(
            (0..4).map(|i| (v(&[i as f64 / 4.0]), v(&[0.3]))).collect(),
            "toy",
            0,
        );
        let batch = ds.all();

        // γ = 0 reduces exactly to J
        let with_gamma_zero = total_loss(&spec, &p, &batch, &LossConfig {
            gamma: 0.0,
            ..LossConfig::default()
        })
        .unwrap();
        let plain = total_loss(&spec, &p, &batch, &LossConfig {
            gamma: 100.0,
            terms: TermFlags {
                order_penalty: false,
                ..TermFlags::default()
            },
            ..LossConfig::default()
        })
        .unwrap();
        assert_eq!(with_gamma_zero.total, plain.total);
        assert_eq!(with_gamma_zero.order_penalty, 0.0);

        // ordered biases: J_γ equals J at the same θ
        p.biases[0] = v(&[-0.5, 0.0, 0.5]);
        let a = total_loss(&spec, &p, &batch, &LossConfig {
            gamma: 100.0,
            ..LossConfig::default()
        })
        .unwrap();
        let b = total_loss(&spec, &p, &batch, &LossConfig {
            gamma: 0.0,
            ..LossConfig::default()
        })
        .unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn total_loss_zero_at_perfect_fit_without_regularizers() {
        let spec = toy_spec();
        let p = Params::zeros(&spec);
        // all-zero params produce output 0; targets 0 → perfect fit
        let ds = Dataset::from_pairs(vec![(v(&[0.7]), v(&[0.0]))], "toy", 0);
        let cfg = LossConfig {
            lambda: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let b = total_loss(&spec, &p, &ds.all(), &cfg).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn total_loss_monotone_in_gamma() {
        let spec = toy_spec();
        let mut p = Params::zeros(&spec);
        p.biases[0] = v(&[1.0, 0.0, -1.0]);
        let ds = Dataset::from_pairs(vec![(v(&[0.5]), v(&[0.1]))], "toy", 0);
        let batch = ds.all();
        let mut last = f64::NEG_INFINITY;
        for gamma in [0.0, 1.0, 10.0, 100.0] {
            let b = total_loss(&spec, &p, &batch, &LossConfig {
                gamma,
                ..LossConfig::default()
            })
            .unwrap();
            assert!(b.total >= last);
            last = b.total;
        }
    }
}
