//! Forward and backward passes through an edited cascade.
//!
//! Each layer computes `y = K m + a ⊙ act((M ⊙ W) m)` where `m` is the
//! monomial vector of the suppressed layer input.

use nalgebra::{DMatrix, DVector};

use crate::editing::{PhnLayer, PhyTaylorModel};
use crate::error::{Error, Result};

/// Intermediate values of one layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: DVector<f64>,
    pub suppressed: DVector<f64>,
    pub monomials: DVector<f64>,
    pub pre: DVector<f64>,
    pub output: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DVector<f64> {
        &self.layers.last().expect("trace has at least one layer").output
    }
}

/// Loss gradients with respect to every weight matrix and to the raw input.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub weights: Vec<DMatrix<f64>>,
    pub input: DVector<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &PhyTaylorModel) -> Self {
        Self {
            weights: model
                .layers()
                .iter()
                .map(|l| DMatrix::zeros(l.out_dim(), l.basis().len()))
                .collect(),
            input: DVector::zeros(model.input_dim()),
        }
    }

    /// Adds the weight gradients of `other`; the input gradient is left alone.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.weights {
            *g *= factor;
        }
    }
}

/// A model with its masked weight matrices precomputed.
pub struct Evaluator<'a> {
    model: &'a PhyTaylorModel,
    u: Vec<DMatrix<f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a PhyTaylorModel) -> Self {
        let u = model.layers().iter().map(PhnLayer::uncertainty).collect();
        Self { model, u }
    }

    pub fn model(&self) -> &PhyTaylorModel {
        self.model
    }

    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.trace(x)?.layers.pop().expect("non-empty").output)
    }

    pub fn trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.input_dim(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "model input".into(),
            });
        }
        let mut layers = Vec::with_capacity(self.u.len());
        let mut input = DVector::from_column_slice(x);
        for (t, (layer, u)) in self.model.layers().iter().zip(&self.u).enumerate() {
            let trace = layer_forward(layer, u, input)?;
            if trace.output.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("output of layer {t}"),
                });
            }
            input = trace.output.clone();
            layers.push(trace);
        }
        Ok(ForwardTrace { layers })
    }

    /// Backpropagates `grad_out = dL/dy` through a recorded trace.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &DVector<f64>) -> GradientSet {
        let layers = self.model.layers();
        let mut weights = vec![DMatrix::zeros(0, 0); layers.len()];
        let mut g = grad_out.clone();
        let mut input_grad = DVector::zeros(0);
        for t in (0..layers.len()).rev() {
            let layer = &layers[t];
            let lt = &trace.layers[t];
            let dpre = DVector::from_fn(layer.out_dim(), |i, _| {
                if layer.a[i] {
                    g[i] * layer.activation.derivative(lt.pre[i])
                } else {
                    0.0
                }
            });
            let mut dw = &dpre * lt.monomials.transpose();
            dw.zip_apply(&layer.m, |w, m| {
                if !m {
                    *w = 0.0
                }
            });
            weights[t] = dw;
            let dm = layer.k.tr_mul(&g) + self.u[t].tr_mul(&dpre);
            let jb = layer
                .basis
                .jacobian(lt.suppressed.as_slice())
                .expect("trace width matches basis");
            let ds = jb.tr_mul(&dm);
            let chi = layer.suppressor.derivative(lt.input.as_slice());
            g = DVector::from_fn(ds.len(), |k, _| ds[k] * chi[k]);
            if t == 0 {
                input_grad = g.clone();
            }
        }
        GradientSet {
            weights,
            input: input_grad,
        }
    }

    /// Jacobian of the model output with respect to the first layer's
    /// monomial vector, treating each monomial as an independent coordinate.
    /// At every known position it equals the known coefficient.
    pub fn monomial_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let trace = self.trace(x)?;
        let layers = self.model.layers();
        let mut jac = layer_output_jacobian(&layers[0], &self.u[0], &trace.layers[0]);
        for t in 1..layers.len() {
            let layer = &layers[t];
            let lt = &trace.layers[t];
            let outer = layer_output_jacobian(layer, &self.u[t], lt);
            let mut jb = layer.basis.jacobian(lt.suppressed.as_slice())?;
            let chi = layer.suppressor.derivative(lt.input.as_slice());
            for (c, d) in chi.iter().enumerate() {
                if *d != 1.0 {
                    jb.column_mut(c).scale_mut(*d);
                }
            }
            jac = outer * (jb * jac);
        }
        Ok(jac)
    }

    /// Jacobian of the model output with respect to the raw input.
    pub fn state_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let jz = self.monomial_jacobian(x)?;
        Ok(jz * self.model.layer(0).basis().jacobian(x)?)
    }
}

fn layer_forward(layer: &PhnLayer, u: &DMatrix<f64>, input: DVector<f64>) -> Result<LayerTrace> {
    let suppressed = if layer.suppressor.is_active() {
        DVector::from_vec(layer.suppressor.apply(input.as_slice()))
    } else {
        input.clone()
    };
    let monomials = layer.basis.evaluate(suppressed.as_slice())?;
    let pre = u * &monomials;
    let mut output = &layer.k * &monomials;
    for i in 0..layer.out_dim() {
        if layer.a[i] {
            output[i] += layer.activation.apply(pre[i]);
        }
    }
    Ok(LayerTrace {
        input,
        suppressed,
        monomials,
        pre,
        output,
    })
}

/// `K + diag(a ⊙ act'(pre)) U`.
fn layer_output_jacobian(layer: &PhnLayer, u: &DMatrix<f64>, lt: &LayerTrace) -> DMatrix<f64> {
    let mut jac = layer.k.clone();
    for i in 0..layer.out_dim() {
        if !layer.a[i] {
            continue;
        }
        let d = layer.activation.derivative(lt.pre[i]);
        for j in 0..u.ncols() {
            jac[(i, j)] += d * u[(i, j)];
        }
    }
    jac
}

pub fn forward(model: &PhyTaylorModel, x: &[f64]) -> Result<DVector<f64>> {
    Evaluator::new(model).forward(x)
}

pub fn forward_trace(model: &PhyTaylorModel, x: &[f64]) -> Result<ForwardTrace> {
    Evaluator::new(model).trace(x)
}

pub fn backward(model: &PhyTaylorModel, trace: &ForwardTrace, grad_out: &DVector<f64>) -> GradientSet {
    Evaluator::new(model).backward(trace, grad_out)
}

pub fn input_jacobian(model: &PhyTaylorModel, x: &[f64]) -> Result<DMatrix<f64>> {
    Evaluator::new(model).monomial_jacobian(x)
}

pub fn state_jacobian(model: &PhyTaylorModel, x: &[f64]) -> Result<DMatrix<f64>> {
    Evaluator::new(model).state_jacobian(x)
}

/// Largest `|J[i, j] - A[i, j]|` over known positions of the model's
/// knowledge, with `J` the monomial Jacobian at each probe input.
pub fn knowledge_deviation(model: &PhyTaylorModel, probes: &[Vec<f64>]) -> Result<f64> {
    let ev = Evaluator::new(model);
    let known = model.knowledge().known_positions();
    let mut worst: f64 = 0.0;
    for x in probes {
        let jac = ev.monomial_jacobian(x)?;
        for &(i, j, v) in &known {
            let d = (jac[(i, j)] - v).abs();
            worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editing::{build_model, Activation, LayerSpec};
    use crate::knowledge::{Entry, KnowledgeSpec};
    use crate::monomial::MonomialBasis;
    use crate::suppressor::{NoiseSign, SuppressorChannel, SuppressorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixed_spec() -> KnowledgeSpec {
        // 2 inputs, order 2: [1, x1, x2, x1^2, x1x2, x2^2]
        KnowledgeSpec::from_fn(MonomialBasis::new(2, 2).unwrap(), 2, |i, j, _| match (i, j) {
            (0, 0) | (0, 4) | (0, 5) => Entry::Known(0.0),
            (0, 1) => Entry::Known(0.8),
            (0, 2) => Entry::Known(0.1),
            (1, 1) => Entry::Known(-0.3),
            _ => Entry::Unknown,
        })
        .unwrap()
    }

    fn model(plan: &[LayerSpec], seed: u64) -> PhyTaylorModel {
        let mut m = build_model(&mixed_spec(), plan).unwrap();
        m.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        m
    }

    #[test]
    fn single_layer_by_hand() {
        let spec = KnowledgeSpec::from_fn(MonomialBasis::new(1, 2).unwrap(), 1, |_, j, _| {
            if j == 1 {
                Entry::Known(2.0)
            } else {
                Entry::Unknown
            }
        })
        .unwrap();
        let mut m = build_model(&spec, &[LayerSpec::new(1, 2, Activation::Tanh)]).unwrap();
        m.layer_mut(0)
            .set_weights(DMatrix::from_row_slice(1, 3, &[0.1, 99.0, 0.5]))
            .unwrap();
        let y = forward(&m, &[0.4]).unwrap();
        let expected = 2.0 * 0.4 + (0.1 + 0.5 * 0.16f64).tanh();
        assert!((y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn known_positions_exact_in_jacobian() {
        let tanh = Activation::Tanh;
        let plan = [LayerSpec::new(4, 2, tanh), LayerSpec::new(3, 2, tanh), LayerSpec::new(2, 2, tanh)];
        let m = model(&plan, 3);
        let spec = mixed_spec();
        for x in [[0.3, -0.7], [1.2, 0.4], [-0.9, -0.2]] {
            let j = input_jacobian(&m, &x).unwrap();
            for (i, c, v) in spec.known_positions() {
                assert_eq!(j[(i, c)], v, "entry ({i}, {c}) at {x:?}");
            }
        }
    }

    #[test]
    fn weight_gradient_matches_finite_difference() {
        let plan = [
            LayerSpec::new(3, 2, Activation::Tanh),
            LayerSpec::new(2, 2, Activation::Tanh),
        ];
        let m = model(&plan, 11);
        let x = [0.35, -0.6];
        let target = DVector::from_vec(vec![0.2, -0.1]);
        let loss = |m: &PhyTaylorModel| {
            let y = forward(m, &x).unwrap();
            0.5 * (y - &target).norm_squared()
        };
        let ev = Evaluator::new(&m);
        let trace = ev.trace(&x).unwrap();
        let grads = ev.backward(&trace, &(trace.output() - &target));
        let h = 1e-6;
        for t in 0..2 {
            let layer = m.layer(t);
            for i in 0..layer.out_dim() {
                for j in 0..layer.basis().len() {
                    let mut plus = m.clone();
                    plus.layer_mut(t).weights_mut()[(i, j)] += h;
                    let mut minus = m.clone();
                    minus.layer_mut(t).weights_mut()[(i, j)] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let g = grads.weights[t][(i, j)];
                    assert!((fd - g).abs() < 1e-7, "layer {t} ({i},{j}): fd {fd} vs {g}");
                    if !layer.mask()[(i, j)] {
                        assert_eq!(g, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn input_gradient_and_state_jacobian_match_finite_difference() {
        let plan = [
            LayerSpec::new(3, 2, Activation::Tanh),
            LayerSpec::new(2, 1, Activation::Relu),
        ];
        let m = model(&plan, 5);
        let x = [0.25, 0.5];
        let ev = Evaluator::new(&m);
        let jac = ev.state_jacobian(&x).unwrap();
        let h = 1e-6;
        for c in 0..2 {
            let mut xp = x;
            xp[c] += h;
            let mut xm = x;
            xm[c] -= h;
            let d = (ev.forward(&xp).unwrap() - ev.forward(&xm).unwrap()) / (2.0 * h);
            for r in 0..2 {
                assert!((d[r] - jac[(r, c)]).abs() < 1e-7);
            }
        }
        let trace = ev.trace(&x).unwrap();
        let g = DVector::from_vec(vec![1.0, -2.0]);
        let grads = ev.backward(&trace, &g);
        let expected = jac.tr_mul(&g);
        assert!((grads.input - expected).norm() < 1e-12);
    }

    #[test]
    fn suppressed_latent_channel_gradient() {
        let spec = KnowledgeSpec::all_unknown(MonomialBasis::new(2, 1).unwrap(), 1).unwrap();
        let mut sup = SuppressorConfig::inactive(2);
        sup.set(1, SuppressorChannel::new(-0.5, 2.0, NoiseSign::Positive));
        let plan = [
            LayerSpec::new(2, 1, Activation::Identity),
            LayerSpec::new(1, 2, Activation::Tanh).with_suppressor(sup),
        ];
        let mut m = build_model(&spec, &plan).unwrap();
        m.initialize(&mut ChaCha8Rng::seed_from_u64(1));
        m.layer_mut(0)
            .set_weights(DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.3, 0.0, 1.0]))
            .unwrap();
        let ev = Evaluator::new(&m);
        let x = [0.2, 0.4];
        let jac = ev.state_jacobian(&x).unwrap();
        let h = 1e-6;
        for c in 0..2 {
            let mut xp = x;
            xp[c] += h;
            let mut xm = x;
            xm[c] -= h;
            let d = (ev.forward(&xp).unwrap()[0] - ev.forward(&xm).unwrap()[0]) / (2.0 * h);
            assert!((d - jac[(0, c)]).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let m = model(&[LayerSpec::new(2, 2, Activation::Tanh)], 0);
        assert!(matches!(forward(&m, &[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(forward(&m, &[1.0, f64::NAN]), Err(Error::NonFinite { .. })));
    }
}
