//! Oracles shared by the integration tests. Nothing here calls into the
//! counting or differentiation code it is used to check.
#![allow(dead_code)]

use nalgebra::DVector;
use phytaylor::knowledge::{Entry, KnowledgeSpec};
use phytaylor::monomial::MonomialBasis;
use phytaylor::network::forward;
use phytaylor::PhyTaylorModel;

/// Number of exponent vectors of length `n` with total degree at most `r`,
/// by walking every vector in `[0, r]^n`.
pub fn brute_force_count(n: usize, r: u32) -> u64 {
    let mut e = vec![0u32; n];
    let mut count = 0;
    loop {
        if e.iter().sum::<u32>() <= r {
            count += 1;
        }
        let mut k = 0;
        loop {
            if k == n {
                return count;
            }
            e[k] += 1;
            if e[k] <= r {
                break;
            }
            e[k] = 0;
            k += 1;
        }
    }
}

/// Product of `x_k^e_k` written out with repeated multiplication.
pub fn monomial_value(exponents: &[u32], x: &[f64]) -> f64 {
    let mut v = 1.0;
    for (k, &e) in exponents.iter().enumerate() {
        for _ in 0..e {
            v *= x[k];
        }
    }
    v
}

/// The spec with three inputs at order 2 used for the single-layer example.
pub fn example_spec() -> KnowledgeSpec {
    let text = "* * * * * * * * * *\n* 0 * * 0 0 0 * * *\n* 0 * 0 0 0 0 * 0 0\n";
    KnowledgeSpec::parse(text, MonomialBasis::new(3, 2).unwrap(), 3).unwrap()
}

/// Central difference of `<c, y(model)>` with respect to weight `(i, j)` of layer `t`.
pub fn weight_fd(model: &PhyTaylorModel, x: &[f64], c: &DVector<f64>, t: usize, i: usize, j: usize, h: f64) -> f64 {
    let eval = |delta: f64| {
        let mut m = model.clone();
        let mut w = m.layer(t).weights().clone();
        w[(i, j)] += delta;
        m.layer_mut(t).set_weights(w).unwrap();
        forward(&m, x).unwrap().dot(c)
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

/// Central difference of `<c, y(x)>` with respect to input `k`.
pub fn input_fd(model: &PhyTaylorModel, x: &[f64], c: &DVector<f64>, k: usize, h: f64) -> f64 {
    let eval = |delta: f64| {
        let mut xp = x.to_vec();
        xp[k] += delta;
        forward(model, &xp).unwrap().dot(c)
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

/// `true` when entry `(i, j)` of the spec is known.
pub fn is_known(spec: &KnowledgeSpec, i: usize, j: usize) -> bool {
    matches!(spec.get(i, j), Entry::Known(_))
}
