//! Safety envelope for two-channel control commands.
//!
//! A safety relation is `s(u) = b + u'Pu` (sign plus) or `s(u) = b - u'Pu`
//! (sign minus) over a rectangular command box. When a command pushes a
//! metric above its bound, [`correct_commands`] solves both relations for
//! the assigned metrics in closed form and returns the nearest solution.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::editing::{Activation, PhyTaylorModel};
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const ROOT_TOL: f64 = 1e-12;
const CLAMP_TOL: f64 = 1e-6;
const DEGENERATE_TOL: f64 = 1e-14;
const REVISE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadSign {
    Plus,
    Minus,
}

impl QuadSign {
    pub fn factor(self) -> f64 {
        match self {
            QuadSign::Plus => 1.0,
            QuadSign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyQuadratic {
    pub sign: QuadSign,
    pub b: f64,
    pub p: Matrix2<f64>,
}

impl SafetyQuadratic {
    pub fn new(sign: QuadSign, b: f64, p: Matrix2<f64>) -> Result<Self> {
        if (p[(0, 1)] - p[(1, 0)]).abs() > SYMMETRY_TOL {
            return Err(Error::InvalidArgument(format!(
                "P must be symmetric, got off-diagonals {} and {}",
                p[(0, 1)],
                p[(1, 0)]
            )));
        }
        if !b.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "safety quadratic".into(),
            });
        }
        Ok(Self { sign, b, p })
    }

    /// From `[p11, p12, p21, p22]`.
    pub fn from_row_major(sign: QuadSign, b: f64, p: [f64; 4]) -> Result<Self> {
        Self::new(sign, b, Matrix2::new(p[0], p[1], p[2], p[3]))
    }

    pub fn form(&self, u: &Vector2<f64>) -> f64 {
        (u.transpose() * self.p * u)[(0, 0)]
    }

    pub fn eval(&self, u: &Vector2<f64>) -> f64 {
        self.b + self.sign.factor() * self.form(u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandBox {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl CommandBox {
    pub fn new(lower: [f64; 2], upper: [f64; 2]) -> Result<Self> {
        for c in 0..2 {
            if !(lower[c] <= upper[c]) || !lower[c].is_finite() || !upper[c].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "box channel {c}: [{}, {}] is not a finite interval",
                    lower[c], upper[c]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, u: &Vector2<f64>, tol: f64) -> bool {
        (0..2).all(|c| u[c] >= self.lower[c] - tol && u[c] <= self.upper[c] + tol)
    }

    pub fn clamp(&self, u: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(
            u[0].clamp(self.lower[0], self.upper[0]),
            u[1].clamp(self.lower[1], self.upper[1]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionProblem {
    pub quadratics: [SafetyQuadratic; 2],
    pub bounds: [f64; 2],
    pub command_box: CommandBox,
}

/// `P = Q diag(values) Q` with `Q` symmetric and orthogonal (a reflection),
/// eigenvalues ascending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigen2 {
    pub values: [f64; 2],
    pub q: Matrix2<f64>,
}

impl Eigen2 {
    pub fn reconstruct(&self) -> Matrix2<f64> {
        self.q * Matrix2::from_diagonal(&Vector2::new(self.values[0], self.values[1])) * self.q.transpose()
    }
}

/// Closed-form eigendecomposition of a symmetric 2x2 matrix.
pub fn eigen_symmetric_2x2(p: &Matrix2<f64>) -> Eigen2 {
    let (a, b, d) = (p[(0, 0)], 0.5 * (p[(0, 1)] + p[(1, 0)]), p[(1, 1)]);
    let mean = 0.5 * (a + d);
    let radius = (0.5 * (a - d)).hypot(b);
    let (lo, hi) = (mean - radius, mean + radius);
    let (c, s) = if b == 0.0 {
        if a <= d {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        }
    } else {
        // (P - lo I) v = 0; take the better conditioned of the two rows
        let r1 = Vector2::new(b, lo - a);
        let r2 = Vector2::new(lo - d, b);
        let v = if r1.norm() >= r2.norm() { r1 } else { r2 };
        let v = v / v.norm();
        (v[0], v[1])
    };
    Eigen2 {
        values: [lo, hi],
        q: Matrix2::new(c, s, s, -c),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verification {
    Ok { min: f64 },
    Violated { witness: [f64; 2], value: f64 },
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verification::Ok { .. })
    }
}

/// Points where a 2-D quadratic form attains its extrema over a box:
/// corners, stationary points along each edge, and the origin.
fn extremal_candidates(p: &Matrix2<f64>, bx: &CommandBox) -> Vec<Vector2<f64>> {
    let mut pts = Vec::with_capacity(9);
    for u0 in [bx.upper[0], bx.lower[0]] {
        for u1 in [bx.upper[1], bx.lower[1]] {
            pts.push(Vector2::new(u0, u1));
        }
    }
    for u0 in [bx.upper[0], bx.lower[0]] {
        if p[(1, 1)] != 0.0 {
            let u1 = -p[(0, 1)] * u0 / p[(1, 1)];
            if (bx.lower[1]..=bx.upper[1]).contains(&u1) {
                pts.push(Vector2::new(u0, u1));
            }
        }
    }
    for u1 in [bx.upper[1], bx.lower[1]] {
        if p[(0, 0)] != 0.0 {
            let u0 = -p[(0, 1)] * u1 / p[(0, 0)];
            if (bx.lower[0]..=bx.upper[0]).contains(&u0) {
                pts.push(Vector2::new(u0, u1));
            }
        }
    }
    let origin = Vector2::zeros();
    if bx.contains(&origin, 0.0) {
        pts.push(origin);
    }
    pts
}

/// Minimum of `q` over the box and where it is attained.
pub fn box_minimum(q: &SafetyQuadratic, bx: &CommandBox) -> (f64, Vector2<f64>) {
    let mut best = (f64::INFINITY, Vector2::zeros());
    for u in extremal_candidates(&q.p, bx) {
        let v = q.eval(&u);
        if v < best.0 {
            best = (v, u);
        }
    }
    best
}

pub fn verify_nonneg(q: &SafetyQuadratic, bx: &CommandBox) -> Verification {
    let (min, at) = box_minimum(q, bx);
    if min < 0.0 {
        Verification::Violated {
            witness: [at[0], at[1]],
            value: min,
        }
    } else {
        Verification::Ok { min }
    }
}

/// Adjusts `q` so that it is non-negative over the box. Quadratics that
/// already pass [`verify_nonneg`] come back unchanged.
///
/// Sign plus: negative eigenvalues of `P` are lifted to a small positive
/// floor and `b` is raised to zero if needed. Sign minus: `P` is scaled down
/// uniformly until `max u'Pu <= b` over the box.
pub fn revise(q: &SafetyQuadratic, bx: &CommandBox) -> Result<SafetyQuadratic> {
    if verify_nonneg(q, bx).is_ok() {
        return Ok(*q);
    }
    match q.sign {
        QuadSign::Plus => {
            let eig = eigen_symmetric_2x2(&q.p);
            let floor = (1e-4 * eig.values[1]).max(1e-8);
            let clipped = Eigen2 {
                values: eig.values.map(|l| if l < 0.0 { floor } else { l }),
                q: eig.q,
            };
            let mut p = clipped.reconstruct();
            let off = 0.5 * (p[(0, 1)] + p[(1, 0)]);
            p[(0, 1)] = off;
            p[(1, 0)] = off;
            SafetyQuadratic::new(QuadSign::Plus, q.b.max(0.0), p)
        }
        QuadSign::Minus => {
            if q.b < 0.0 {
                return Err(Error::Unrevisable(format!(
                    "offset {} is negative, so no scaling of P keeps b - u'Pu >= 0",
                    q.b
                )));
            }
            let scaled = |k: f64| SafetyQuadratic {
                p: q.p * k,
                ..*q
            };
            let (mut lo, mut hi) = (0.0, 1.0);
            while hi - lo > REVISE_TOL {
                let mid = 0.5 * (lo + hi);
                if verify_nonneg(&scaled(mid), bx).is_ok() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(scaled(lo))
        }
    }
}

/// Outcome of one correction call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub command: [f64; 2],
    /// Metrics the corrected command was solved for.
    pub targets: [f64; 2],
    /// `s_i(command) - targets_i`.
    pub residuals: [f64; 2],
    pub corrected: bool,
}

/// Quartic coefficients in `y = u_hat_2^2`, with the intermediate values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarticCoefficients {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub mu1: f64,
    pub lambda_ratio: f64,
    pub b_bar: f64,
}

struct Frame {
    eig: Eigen2,
    s: Matrix2<f64>,
}

fn frame(problem: &CorrectionProblem) -> Result<Frame> {
    let [q1, q2] = &problem.quadratics;
    let p1 = q1.p * q1.sign.factor();
    let eig = eigen_symmetric_2x2(&p1);
    if eig.values[0] <= 0.0 {
        return Err(Error::DegenerateQuadratic(format!(
            "first relation needs a positive definite form, smallest eigenvalue {}",
            eig.values[0]
        )));
    }
    // s2 = b2 + sign u'P2u = c2  <=>  u'(-sign P2)u = b2 - c2
    let s = eig.q * (q2.p * -q2.sign.factor()) * eig.q;
    Ok(Frame { eig, s })
}

fn coefficients(fr: &Frame, problem: &CorrectionProblem, targets: [f64; 2]) -> Result<QuarticCoefficients> {
    let [l1, l2] = fr.eig.values;
    let (s11, s12, s22) = (fr.s[(0, 0)], fr.s[(0, 1)], fr.s[(1, 1)]);
    let mu1 = (targets[0] - problem.quadratics[0].b) / l1;
    let lam = l2 / l1;
    let bb = problem.quadratics[1].b - targets[1];
    let w1 = s11 * s11 * lam * lam + s22 * s22 - 2.0 * s11 * s22 * lam + 4.0 * s12 * s12 * lam;
    let w2 = 2.0 * bb * s11 * lam - 2.0 * s11 * s11 * mu1 * lam - 2.0 * bb * s22 + 2.0 * s11 * s22 * mu1
        - 4.0 * s12 * s12 * mu1;
    let w3 = bb * bb + s11 * s11 * mu1 * mu1 - 2.0 * bb * s11 * mu1;
    if w1.abs() < DEGENERATE_TOL {
        return Err(Error::DegenerateQuadratic(format!("leading quartic coefficient {w1:e} vanishes")));
    }
    Ok(QuarticCoefficients {
        w1,
        w2,
        w3,
        mu1,
        lambda_ratio: lam,
        b_bar: bb,
    })
}

pub fn quartic_coefficients(problem: &CorrectionProblem, targets: [f64; 2]) -> Result<QuarticCoefficients> {
    coefficients(&frame(problem)?, problem, targets)
}

/// Every sign combination for both roots of the quartic, before any
/// validity or box filtering.
pub fn correction_candidates(problem: &CorrectionProblem, targets: [f64; 2]) -> Result<Vec<[f64; 2]>> {
    let fr = frame(problem)?;
    let co = coefficients(&fr, problem, targets)?;
    let disc = co.w2 * co.w2 - 4.0 * co.w1 * co.w3;
    if disc < -ROOT_TOL {
        return Err(Error::NoRealSolution(format!("discriminant {disc:e} is negative")));
    }
    let sq = disc.max(0.0).sqrt();
    // numerically stable pair of roots
    let t = -0.5 * (co.w2 + if co.w2 >= 0.0 { sq } else { -sq });
    let mut roots = vec![t / co.w1];
    if t != 0.0 {
        roots.push(co.w3 / t);
    }
    let mut out = Vec::new();
    let mut last_err = None;
    for y in roots {
        let x = co.mu1 - co.lambda_ratio * y;
        if y < -ROOT_TOL || x < -ROOT_TOL {
            last_err = Some(Error::NoRealSolution(format!(
                "radicands {x:e} and {y:e} must be non-negative"
            )));
            continue;
        }
        let (h1, h2) = (x.max(0.0).sqrt(), y.max(0.0).sqrt());
        for (a, b) in [(h1, h2), (h1, -h2), (-h1, h2), (-h1, -h2)] {
            let u = fr.eig.q * Vector2::new(a, b);
            out.push([u[0], u[1]]);
        }
    }
    match (out.is_empty(), last_err) {
        (true, Some(e)) => Err(e),
        _ => Ok(out),
    }
}

fn residuals(problem: &CorrectionProblem, targets: [f64; 2], u: &Vector2<f64>) -> [f64; 2] {
    [
        problem.quadratics[0].eval(u) - targets[0],
        problem.quadratics[1].eval(u) - targets[1],
    ]
}

/// A few Newton steps on the two equalities, kept only while they help.
fn polish(problem: &CorrectionProblem, targets: [f64; 2], mut u: Vector2<f64>) -> Vector2<f64> {
    let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());
    let mut r = residuals(problem, targets, &u);
    for _ in 0..3 {
        if norm(r) == 0.0 {
            break;
        }
        let rows: Vec<Vector2<f64>> = problem
            .quadratics
            .iter()
            .map(|q| q.p * u * (2.0 * q.sign.factor()))
            .collect();
        let jac = Matrix2::new(rows[0][0], rows[0][1], rows[1][0], rows[1][1]);
        let Some(inv) = jac.try_inverse() else { break };
        let next = u - inv * Vector2::new(r[0], r[1]);
        let rn = residuals(problem, targets, &next);
        if norm(rn) >= norm(r) {
            break;
        }
        u = next;
        r = rn;
    }
    u
}

/// Corrects `u` so both metrics sit at their assigned values.
///
/// Metrics already at or below their bounds keep their current value; the
/// rest are pinned to the bound. Among the closed-form candidates that
/// satisfy both equalities and lie in the box, the one nearest to `u` is
/// returned.
pub fn correct_commands(problem: &CorrectionProblem, u: &[f64]) -> Result<Correction> {
    if u.len() != 2 {
        return Err(Error::UnsupportedDimension(u.len()));
    }
    if problem.bounds.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            context: "safety bounds".into(),
        });
    }
    let uv = Vector2::new(u[0], u[1]);
    let s = [problem.quadratics[0].eval(&uv), problem.quadratics[1].eval(&uv)];
    if s[0] <= problem.bounds[0] && s[1] <= problem.bounds[1] {
        return Ok(Correction {
            command: [u[0], u[1]],
            targets: s,
            residuals: [0.0, 0.0],
            corrected: false,
        });
    }
    let targets = [s[0].min(problem.bounds[0]), s[1].min(problem.bounds[1])];
    let candidates = correction_candidates(problem, targets)?;
    let scale = 1.0 + targets[0].abs().max(targets[1].abs());
    let valid: Vec<Vector2<f64>> = candidates
        .iter()
        .map(|c| polish(problem, targets, Vector2::new(c[0], c[1])))
        .filter(|c| {
            let r = residuals(problem, targets, c);
            r[0].abs().max(r[1].abs()) <= 1e-9 * scale
        })
        .collect();
    if valid.is_empty() {
        return Err(Error::NoRealSolution(
            "no sign combination satisfies both relations".into(),
        ));
    }
    let nearest = |pts: &mut dyn Iterator<Item = &Vector2<f64>>| {
        pts.min_by(|a, b| (*a - uv).norm().total_cmp(&(*b - uv).norm())).copied()
    };
    let inside = nearest(&mut valid.iter().filter(|c| problem.command_box.contains(c, 1e-12)));
    let chosen = match inside {
        Some(c) => problem.command_box.clamp(&c),
        None => {
            let c = problem.command_box.clamp(&nearest(&mut valid.iter()).expect("non-empty"));
            let r = residuals(problem, targets, &c);
            if r[0].abs().max(r[1].abs()) > CLAMP_TOL {
                return Err(Error::NoRealSolution(
                    "every solution lies outside the command box".into(),
                ));
            }
            c
        }
    };
    Ok(Correction {
        command: [chosen[0], chosen[1]],
        targets,
        residuals: residuals(problem, targets, &chosen),
        corrected: true,
    })
}

/// A quadratic read off a model output, with its linear part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractedQuadratic {
    pub quadratic: SafetyQuadratic,
    pub linear: [f64; 2],
    /// Set when the linear part exceeds 1e-12 in magnitude.
    pub has_linear_terms: bool,
}

type Poly = BTreeMap<Vec<u32>, f64>;

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Poly::new();
    for (ea, ca) in a {
        for (eb, cb) in b {
            let e: Vec<u32> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
            *out.entry(e).or_insert(0.0) += ca * cb;
        }
    }
    out
}

/// Each model output as a polynomial in the raw input.
fn compose_polynomials(model: &PhyTaylorModel) -> Result<Vec<Poly>> {
    let n = model.input_dim();
    let mut polys: Vec<Poly> = (0..n)
        .map(|i| {
            let mut e = vec![0; n];
            e[i] = 1;
            Poly::from([(e, 1.0)])
        })
        .collect();
    for (t, layer) in model.layers().iter().enumerate() {
        if layer.suppressor().is_active() {
            return Err(Error::ModelNotPolynomial(format!("layer {t} has an active suppressor")));
        }
        let u = layer.uncertainty();
        let active = layer.activation_mask().iter().any(|&a| a);
        if active && layer.activation() != Activation::Identity {
            return Err(Error::ModelNotPolynomial(format!(
                "layer {t} applies a {:?} activation",
                layer.activation()
            )));
        }
        let monos: Vec<Poly> = layer
            .basis()
            .terms()
            .iter()
            .map(|term| {
                let mut acc = Poly::from([(vec![0; n], 1.0)]);
                for (k, &p) in term.exponents().iter().enumerate() {
                    for _ in 0..p {
                        acc = poly_mul(&acc, &polys[k]);
                    }
                }
                acc
            })
            .collect();
        polys = (0..layer.out_dim())
            .map(|i| {
                let mut out = Poly::new();
                for (j, mono) in monos.iter().enumerate() {
                    let mut coef = layer.knowledge()[(i, j)];
                    if layer.activation_mask()[i] {
                        coef += u[(i, j)];
                    }
                    if coef != 0.0 {
                        for (e, c) in mono {
                            *out.entry(e.clone()).or_insert(0.0) += coef * c;
                        }
                    }
                }
                out
            })
            .collect();
    }
    Ok(polys)
}

/// Safety quadratics of every output with the default signs: output 0 plus,
/// output 1 minus, any further outputs plus.
pub fn extract_quadratics(model: &PhyTaylorModel) -> Result<Vec<ExtractedQuadratic>> {
    let signs: Vec<QuadSign> = (0..model.terminal_out_dim())
        .map(|i| if i == 1 { QuadSign::Minus } else { QuadSign::Plus })
        .collect();
    extract_quadratics_with_signs(model, &signs)
}

pub fn extract_quadratics_with_signs(model: &PhyTaylorModel, signs: &[QuadSign]) -> Result<Vec<ExtractedQuadratic>> {
    if model.input_dim() != 2 {
        return Err(Error::UnsupportedDimension(model.input_dim()));
    }
    if signs.len() != model.terminal_out_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.terminal_out_dim(),
            actual: signs.len(),
        });
    }
    let polys = compose_polynomials(model)?;
    polys
        .iter()
        .zip(signs)
        .enumerate()
        .map(|(i, (poly, &sign))| {
            let coef = |a: u32, b: u32| poly.get(&vec![a, b]).copied().unwrap_or(0.0);
            for (e, c) in poly {
                if e.iter().sum::<u32>() > 2 && c.abs() > 1e-12 {
                    return Err(Error::ModelNotPolynomial(format!(
                        "output {i} has a degree-{} term {c:e}",
                        e.iter().sum::<u32>()
                    )));
                }
            }
            let f = sign.factor();
            let p = Matrix2::new(coef(2, 0), 0.5 * coef(1, 1), 0.5 * coef(1, 1), coef(0, 2)) * f;
            let linear = [coef(1, 0), coef(0, 1)];
            Ok(ExtractedQuadratic {
                quadratic: SafetyQuadratic::new(sign, coef(0, 0), p)?,
                linear,
                has_linear_terms: linear.iter().any(|l| l.abs() > 1e-12),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editing::{build_model, LayerSpec};
    use crate::knowledge::KnowledgeSpec;
    use crate::monomial::MonomialBasis;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn paper_box() -> CommandBox {
        CommandBox::new([-0.156, -0.6], [0.156, 0.6]).unwrap()
    }

    fn learned_first() -> SafetyQuadratic {
        SafetyQuadratic::from_row_major(QuadSign::Plus, 0.00111007, [-0.04581441, 0.00100625, 0.00100625, 0.00342825])
            .unwrap()
    }

    fn learned_second() -> SafetyQuadratic {
        SafetyQuadratic::from_row_major(QuadSign::Minus, 0.14376973, [6.06750536, 0.02701398, 0.02701398, 0.00601609])
            .unwrap()
    }

    fn revised_first() -> SafetyQuadratic {
        SafetyQuadratic::from_row_major(QuadSign::Plus, 0.00021007, [0.00181441, 0.00100625, 0.00100625, 0.00342825])
            .unwrap()
    }

    #[test]
    fn eigen_matches_reference_solver() {
        for p in [
            Matrix2::new(0.00181441, 0.00100625, 0.00100625, 0.00342825),
            Matrix2::new(2.0, 0.0, 0.0, 1.0),
            Matrix2::new(1.0, 0.0, 0.0, 1.0),
            Matrix2::new(-3.0, 1.5, 1.5, 0.2),
        ] {
            let e = eigen_symmetric_2x2(&p);
            let oracle = SymmetricEigen::new(p);
            let mut ov: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
            ov.sort_by(f64::total_cmp);
            assert!((e.values[0] - ov[0]).abs() < 1e-14 && (e.values[1] - ov[1]).abs() < 1e-14);
            assert!((e.reconstruct() - p).abs().max() < 1e-15);
            assert!((e.q - e.q.transpose()).abs().max() == 0.0);
            assert!((e.q * e.q - Matrix2::identity()).abs().max() < 1e-15);
        }
    }

    #[test]
    fn learned_first_relation_violated() {
        match verify_nonneg(&learned_first(), &paper_box()) {
            Verification::Violated { witness, value } => {
                assert!(value < 0.0);
                assert_eq!(witness[0], 0.156);
            }
            v => panic!("expected violation, got {v:?}"),
        }
        assert!(learned_first().eval(&Vector2::new(0.156, 0.0)) < 0.0);
        assert!(verify_nonneg(&revised_first(), &paper_box()).is_ok());
        let trivial = SafetyQuadratic::new(QuadSign::Plus, 1.0, Matrix2::zeros()).unwrap();
        assert!(verify_nonneg(&trivial, &paper_box()).is_ok());
    }

    #[test]
    fn verification_agrees_with_grid() {
        let q = learned_second();
        let bx = paper_box();
        let (min, _) = box_minimum(&q, &bx);
        let mut grid_min = f64::INFINITY;
        for i in 0..=200 {
            for j in 0..=200 {
                let u = Vector2::new(-0.156 + 0.312 * i as f64 / 200.0, -0.6 + 1.2 * j as f64 / 200.0);
                grid_min = grid_min.min(q.eval(&u));
            }
        }
        assert!(min <= grid_min + 1e-15);
        assert!(grid_min - min < 1e-4);
    }

    #[test]
    fn revision_plus_and_minus() {
        let bx = paper_box();
        let r1 = revise(&learned_first(), &bx).unwrap();
        assert!(verify_nonneg(&r1, &bx).is_ok());
        assert!(eigen_symmetric_2x2(&r1.p).values[0] > 0.0);
        assert_eq!(revise(&r1, &bx).unwrap(), r1);

        let r2 = revise(&learned_second(), &bx).unwrap();
        assert!(verify_nonneg(&r2, &bx).is_ok());
        let factor = r2.p[(0, 0)] / learned_second().p[(0, 0)];
        let max_form = -box_minimum(
            &SafetyQuadratic {
                b: 0.0,
                ..learned_second()
            },
            &bx,
        )
        .0;
        assert!((factor - 0.14376973 / max_form).abs() < 1e-9);
        assert_eq!(revise(&r2, &bx).unwrap(), r2);

        let negative = SafetyQuadratic { b: -0.1, ..learned_second() };
        assert!(matches!(revise(&negative, &bx), Err(Error::Unrevisable(_))));
        assert_eq!(revise(&revised_first(), &bx).unwrap(), revised_first());
    }

    fn example_problem(bounds: [f64; 2]) -> CorrectionProblem {
        let bx = paper_box();
        CorrectionProblem {
            quadratics: [revised_first(), revise(&learned_second(), &bx).unwrap()],
            bounds,
            command_box: bx,
        }
    }

    #[test]
    fn safe_command_unchanged() {
        let p = example_problem([1.0, 1.0]);
        let c = correct_commands(&p, &[0.1, -0.3]).unwrap();
        assert!(!c.corrected);
        assert_eq!(c.command, [0.1, -0.3]);
    }

    #[test]
    fn unsafe_command_corrected_exactly() {
        let target = Vector2::new(0.05, 0.2);
        let base = example_problem([0.0, 0.0]);
        let bounds = [base.quadratics[0].eval(&target), base.quadratics[1].eval(&target)];
        let p = CorrectionProblem { bounds, ..base };
        // larger in the first metric, smaller form in the second
        let u = [0.02, 0.55];
        let uv = Vector2::new(u[0], u[1]);
        assert!(p.quadratics[0].eval(&uv) > bounds[0]);
        let c = correct_commands(&p, &u).unwrap();
        assert!(c.corrected);
        let out = Vector2::new(c.command[0], c.command[1]);
        assert!((p.quadratics[0].eval(&out) - c.targets[0]).abs() < 1e-8);
        assert!((p.quadratics[1].eval(&out) - c.targets[1]).abs() < 1e-8);
        assert!(p.command_box.contains(&out, 0.0));
    }

    #[test]
    fn first_relation_holds_for_all_signs() {
        let target = Vector2::new(0.1, -0.3);
        let base = example_problem([0.0, 0.0]);
        let targets = [base.quadratics[0].eval(&target), base.quadratics[1].eval(&target)];
        let cands = correction_candidates(&base, targets).unwrap();
        assert!(cands.len() >= 4);
        let mut second_ok = 0;
        for c in &cands[..4] {
            let v = Vector2::new(c[0], c[1]);
            assert!((base.quadratics[0].eval(&v) - targets[0]).abs() < 1e-12);
            if (base.quadratics[1].eval(&v) - targets[1]).abs() < 1e-9 {
                second_ok += 1;
            }
        }
        assert!(second_ok >= 2);
    }

    #[test]
    fn correction_errors() {
        let p = example_problem([0.0, 0.0]);
        assert!(matches!(correct_commands(&p, &[0.1, 0.2, 0.3]), Err(Error::UnsupportedDimension(3))));
        let mut degenerate = p;
        degenerate.quadratics[0].p = Matrix2::zeros();
        assert!(matches!(
            correct_commands(&degenerate, &[0.1, 0.5]),
            Err(Error::DegenerateQuadratic(_))
        ));
        // the first metric can never drop below its offset
        let low = CorrectionProblem {
            bounds: [-1.0, 1.0],
            ..p
        };
        assert!(matches!(correct_commands(&low, &[0.1, 0.5]), Err(Error::NoRealSolution(_))));
    }

    fn quadratic_model(rows: [[f64; 6]; 2]) -> PhyTaylorModel {
        let spec = KnowledgeSpec::all_unknown(MonomialBasis::new(2, 2).unwrap(), 2).unwrap();
        let mut m = build_model(&spec, &[LayerSpec::new(2, 2, Activation::Identity)]).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        m.layer_mut(0).set_weights(DMatrix::from_row_slice(2, 6, &flat)).unwrap();
        m
    }

    #[test]
    fn extraction_reads_back_learned_values() {
        let m = quadratic_model([
            [0.00111007, 0.0, 0.0, -0.04581441, 2.0 * 0.00100625, 0.00342825],
            [0.14376973, 0.0, 0.0, -6.06750536, -2.0 * 0.02701398, -0.00601609],
        ]);
        let q = extract_quadratics(&m).unwrap();
        assert_eq!(q[0].quadratic.b, 0.00111007);
        assert_eq!(q[0].quadratic.p[(0, 0)], -0.04581441);
        assert_eq!(q[0].quadratic.p[(0, 1)], 0.00100625);
        assert_eq!(q[1].quadratic.sign, QuadSign::Minus);
        assert_eq!(q[1].quadratic.p[(0, 0)], 6.06750536);
        assert!(!q[0].has_linear_terms);

        let zero = quadratic_model([[0.0; 6]; 2]);
        let q = extract_quadratics(&zero).unwrap();
        assert_eq!(q[0].quadratic.b, 0.0);
        assert_eq!(q[0].quadratic.p, Matrix2::zeros());
    }

    #[test]
    fn extraction_flags_and_rejects() {
        let m = quadratic_model([[0.0, 0.3, 0.0, 1.0, 0.0, 1.0], [0.0; 6]]);
        assert!(extract_quadratics(&m).unwrap()[0].has_linear_terms);

        let spec = KnowledgeSpec::all_unknown(MonomialBasis::new(2, 2).unwrap(), 2).unwrap();
        let tanh = build_model(&spec, &[LayerSpec::new(2, 2, Activation::Tanh)]).unwrap();
        assert!(matches!(extract_quadratics(&tanh), Err(Error::ModelNotPolynomial(_))));

        let plan = [
            LayerSpec::new(2, 2, Activation::Identity),
            LayerSpec::new(2, 2, Activation::Identity),
        ];
        let mut deep = build_model(&spec, &plan).unwrap();
        let mut w1 = DMatrix::zeros(2, 6);
        w1[(0, 3)] = 1.0;
        deep.layer_mut(0).set_weights(w1).unwrap();
        let mut w2 = DMatrix::zeros(2, 6);
        w2[(0, 3)] = 1.0;
        deep.layer_mut(1).set_weights(w2).unwrap();
        assert!(matches!(extract_quadratics(&deep), Err(Error::ModelNotPolynomial(_))));
    }
}
