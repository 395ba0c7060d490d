//! Construction of an edited cascade of physics-compatible layers.
//!
//! Layer 1 takes its knowledge matrix, weight mask and activation mask
//! straight from the [`KnowledgeSpec`]. Every later layer carries the first
//! `terminal_out_dim` entries of its input through an identity block of the
//! knowledge matrix, and its weight mask cuts every monomial that depends
//! (through the cascade) on a first-layer input monomial whose coefficient is
//! known for that output row. Together these keep `d y_i / d m_j` equal to the
//! known coefficient for every known `(i, j)`, whatever the trainable weights.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{dependency_sets, EditedMasks, KnowledgeSpec};
use crate::monomial::MonomialBasis;
use crate::suppressor::SuppressorConfig;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One entry of a layer plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub out_dim: usize,
    pub order: u32,
    pub activation: Activation,
    /// Suppressor on this layer's input; `None` means inactive.
    pub suppressor: Option<SuppressorConfig>,
}

impl LayerSpec {
    pub fn new(out_dim: usize, order: u32, activation: Activation) -> Self {
        Self {
            out_dim,
            order,
            activation,
            suppressor: None,
        }
    }

    pub fn with_suppressor(mut self, suppressor: SuppressorConfig) -> Self {
        self.suppressor = Some(suppressor);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhnLayer {
    pub(crate) basis: MonomialBasis,
    pub(crate) out_dim: usize,
    pub(crate) k: DMatrix<f64>,
    pub(crate) m: DMatrix<bool>,
    pub(crate) w: DMatrix<f64>,
    pub(crate) a: Vec<bool>,
    pub(crate) activation: Activation,
    pub(crate) suppressor: SuppressorConfig,
}

impl PhnLayer {
    pub fn in_dim(&self) -> usize {
        self.basis.input_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn order(&self) -> u32 {
        self.basis.order()
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn knowledge(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.m
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn activation_mask(&self) -> &[bool] {
        &self.a
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn suppressor(&self) -> &SuppressorConfig {
        &self.suppressor
    }

    pub fn masks(&self) -> EditedMasks {
        EditedMasks {
            k: self.k.clone(),
            m: self.m.clone(),
            a: self.a.clone(),
        }
    }

    /// `M ⊙ W`, the only way the weights reach the output.
    pub fn uncertainty(&self) -> DMatrix<f64> {
        self.w.zip_map(&self.m, |w, m| if m { w } else { 0.0 })
    }

    /// Overwrites the stored weights. Masked positions are stored but never read.
    pub fn set_weights(&mut self, w: DMatrix<f64>) -> Result<()> {
        if w.shape() != self.w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} vs layer {:?}",
                w.shape(),
                self.w.shape()
            )));
        }
        self.w = w;
        Ok(())
    }

    /// Overwrites the knowledge matrix, e.g. when loading a deployed model.
    pub fn set_knowledge(&mut self, k: DMatrix<f64>) -> Result<()> {
        if k.shape() != self.k.shape() {
            return Err(Error::ShapeMismatch(format!(
                "knowledge {:?} vs layer {:?}",
                k.shape(),
                self.k.shape()
            )));
        }
        self.k = k;
        Ok(())
    }

    pub(crate) fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w
    }

    pub fn trainable_count(&self) -> usize {
        self.m.iter().filter(|&&t| t).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhyTaylorModel {
    layers: Vec<PhnLayer>,
    knowledge: KnowledgeSpec,
}

impl PhyTaylorModel {
    pub fn layers(&self) -> &[PhnLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [PhnLayer] {
        &mut self.layers
    }

    pub fn layer(&self, t: usize) -> &PhnLayer {
        &self.layers[t]
    }

    pub fn layer_mut(&mut self, t: usize) -> &mut PhnLayer {
        &mut self.layers[t]
    }

    pub fn knowledge(&self) -> &KnowledgeSpec {
        &self.knowledge
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn first_order(&self) -> u32 {
        self.layers[0].order()
    }

    pub fn terminal_out_dim(&self) -> usize {
        self.knowledge.out_dim()
    }

    /// Width of the first layer's monomial vector.
    pub fn first_basis_len(&self) -> usize {
        self.layers[0].basis.len()
    }

    pub fn weight_matrices(&self) -> Vec<DMatrix<f64>> {
        self.layers.iter().map(|l| l.w.clone()).collect()
    }

    /// Redraws every weight (masked positions included) from a truncated
    /// normal with mean 0 and standard deviation [`INIT_STD`].
    pub fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            for w in layer.w.iter_mut() {
                *w = truncated_normal(rng, INIT_STD);
            }
        }
    }

    /// `(trainable, frozen)` weight counts summed over layers.
    pub fn parameter_counts(&self) -> (usize, usize) {
        self.layers.iter().fold((0, 0), |(t, f), l| {
            let trainable = l.trainable_count();
            (t + trainable, f + l.m.len() - trainable)
        })
    }
}

/// Standard normal scaled by `std`, redrawn until within two deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Parameter count of a dense network with biases, `sum (d_in + 1) d_out`.
pub fn dense_parameter_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Per-monomial dependency sets of a layer basis, given the dependency set
/// of each of its input entries. The constant monomial depends on nothing.
pub fn monomial_dependencies(
    basis: &MonomialBasis,
    input_deps: &[BTreeSet<usize>],
) -> Vec<BTreeSet<usize>> {
    basis
        .terms()
        .iter()
        .map(|t| t.support().flat_map(|k| input_deps[k].iter().copied()).collect())
        .collect()
}

/// Dependency sets of a layer's outputs given its monomial dependency sets.
fn output_dependencies(layer: &PhnLayer, mono_deps: &[BTreeSet<usize>]) -> Vec<BTreeSet<usize>> {
    (0..layer.out_dim)
        .map(|e| {
            (0..layer.basis.len())
                .filter(|&j| layer.k[(e, j)] != 0.0 || (layer.a[e] && layer.m[(e, j)]))
                .flat_map(|j| mono_deps[j].iter().copied())
                .collect()
        })
        .collect()
}

/// Dependency sets (over first-layer monomial indices) of the outputs of
/// the last layer in `layers`.
pub fn cascade_output_dependencies(layers: &[PhnLayer]) -> Vec<BTreeSet<usize>> {
    let first = &layers[0];
    let mut deps = dependency_sets(&first.masks());
    for layer in &layers[1..] {
        let mono = monomial_dependencies(&layer.basis, &deps);
        deps = output_dependencies(layer, &mono);
    }
    deps
}

/// Dependence of a layer's monomials on first-layer input monomials, and
/// which (terminal row, monomial) pairs must be cut.
#[derive(Debug, Clone)]
pub struct DependencyClosure {
    pub monomial_deps: Vec<BTreeSet<usize>>,
    /// `conflicts[(i, j)]`: monomial `j` depends on an input monomial whose
    /// coefficient is known for terminal row `i`.
    pub conflicts: DMatrix<bool>,
}

/// Closure for a layer with basis `basis` appended after `built`.
pub fn dependency_closure(built: &[PhnLayer], basis: &MonomialBasis) -> DependencyClosure {
    let first = built[0].masks();
    let terminal = terminal_rows(built);
    let input_deps = cascade_output_dependencies(built);
    let monomial_deps = monomial_dependencies(basis, &input_deps);
    let conflicts = DMatrix::from_fn(terminal, basis.len(), |i, j| {
        monomial_deps[j].iter().any(|&v| !first.m[(i, v)])
    });
    DependencyClosure {
        monomial_deps,
        conflicts,
    }
}

fn terminal_rows(built: &[PhnLayer]) -> usize {
    // The first layer's knowledge rows are the terminal rows; any further
    // first-layer rows are free latent channels with an all-true mask.
    built[0]
        .a
        .len()
        .min(built.iter().map(|l| l.out_dim).min().unwrap_or(0))
}

/// Builds the edited cascade for `spec` according to `plan`.
pub fn build_model(spec: &KnowledgeSpec, plan: &[LayerSpec]) -> Result<PhyTaylorModel> {
    let terminal = spec.out_dim();
    let Some(first_spec) = plan.first() else {
        return Err(Error::PlanInconsistent("empty layer plan".into()));
    };
    if first_spec.order != spec.basis().order() {
        return Err(Error::KnowledgeUnrepresentable(format!(
            "knowledge is over order-{} monomials but the first layer has order {}",
            spec.basis().order(),
            first_spec.order
        )));
    }
    let last = plan.len() - 1;
    for (t, l) in plan.iter().enumerate() {
        if l.order == 0 || l.out_dim == 0 {
            return Err(Error::PlanInconsistent(format!("layer {t} has zero width or order")));
        }
        if t == last && l.out_dim != terminal {
            return Err(Error::PlanInconsistent(format!(
                "terminal layer width {} differs from knowledge outputs {terminal}",
                l.out_dim
            )));
        }
        if t < last && l.out_dim < terminal {
            return Err(Error::PlanInconsistent(format!(
                "layer {t} width {} is below the terminal width {terminal}",
                l.out_dim
            )));
        }
    }
    if first_spec.suppressor.as_ref().is_some_and(SuppressorConfig::is_active) {
        return Err(Error::PlanInconsistent("the first layer cannot use a suppressor".into()));
    }

    let first_masks = spec.first_layer_masks();
    let mut layers = Vec::with_capacity(plan.len());
    layers.push(first_layer(spec, first_spec, &first_masks));

    for (t, lspec) in plan.iter().enumerate().skip(1) {
        let in_dim = layers[t - 1].out_dim;
        let basis = MonomialBasis::new(in_dim, lspec.order)?;
        let suppressor = match &lspec.suppressor {
            Some(s) if s.width() != in_dim => {
                return Err(Error::PlanInconsistent(format!(
                    "layer {t} suppressor has {} channels for {in_dim} inputs",
                    s.width()
                )))
            }
            Some(s) => s.clone(),
            None => SuppressorConfig::inactive(in_dim),
        };
        for c in 0..terminal {
            let row_has_knowledge = (0..first_masks.m.ncols()).any(|v| !first_masks.m[(c, v)]);
            if suppressor.channel(c).active && row_has_knowledge {
                return Err(Error::PlanInconsistent(format!(
                    "layer {t} suppresses pass-through channel {c}, which carries known structure"
                )));
            }
        }

        let closure = dependency_closure(&layers, &basis);
        let out = lspec.out_dim;
        let mut k = DMatrix::zeros(out, basis.len());
        for i in 0..terminal {
            k[(i, basis.linear_index(i))] = 1.0;
        }
        let m = DMatrix::from_fn(out, basis.len(), |i, j| {
            if i >= terminal {
                true
            } else {
                first_masks.a[i] && !closure.conflicts[(i, j)]
            }
        });
        let a: Vec<bool> = (0..out)
            .map(|i| if i < terminal { first_masks.a[i] } else { true })
            .collect();
        let w = DMatrix::zeros(out, basis.len());
        layers.push(PhnLayer {
            basis,
            out_dim: out,
            k,
            m,
            w,
            a,
            activation: lspec.activation,
            suppressor,
        });
    }

    Ok(PhyTaylorModel {
        layers,
        knowledge: spec.clone(),
    })
}

fn first_layer(spec: &KnowledgeSpec, lspec: &LayerSpec, masks: &EditedMasks) -> PhnLayer {
    let basis = spec.basis().clone();
    let out = lspec.out_dim;
    let rows = spec.out_dim();
    // Rows past the knowledge rows are latent: no knowledge, fully trainable.
    let k = DMatrix::from_fn(out, basis.len(), |i, j| if i < rows { masks.k[(i, j)] } else { 0.0 });
    let m = DMatrix::from_fn(out, basis.len(), |i, j| i >= rows || masks.m[(i, j)]);
    let a = (0..out).map(|i| i >= rows || masks.a[i]).collect();
    let suppressor = SuppressorConfig::inactive(basis.input_dim());
    PhnLayer {
        w: DMatrix::zeros(out, basis.len()),
        basis,
        out_dim: out,
        k,
        m,
        a,
        activation: lspec.activation,
        suppressor,
    }
}
