mod common;

use nalgebra::{DMatrix, Matrix2, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phytaylor::monomial::{basis_len, cascade_complexity_closed_form, cascade_complexity_difference, MonomialBasis};
use phytaylor::network::knowledge_deviation;
use phytaylor::selfcorrect::{
    correct_commands, eigen_symmetric_2x2, revise, verify_nonneg, CommandBox, CorrectionProblem, QuadSign,
    SafetyQuadratic,
};
use phytaylor::suppressor::{dnr_of_monomial, suppressed_decomposition};
use phytaylor::train::{train_model, Dataset, TrainConfig};
use phytaylor::{build_model, Activation, Entry, KnowledgeSpec, LayerSpec};

use common::{brute_force_count, monomial_value};

/// `(n, r, out, entries)` with entries row-major; `None` is unknown.
fn spec_parts() -> impl Strategy<Value = (usize, u32, usize, Vec<Option<f64>>)> {
    (1usize..=3, 1u32..=3, 1usize..=3).prop_flat_map(|(n, r, out)| {
        let len = brute_force_count(n, r) as usize;
        let entry = prop_oneof![
            2 => Just(None),
            1 => Just(Some(0.0)),
            1 => (-2.0f64..2.0).prop_map(Some),
        ];
        (Just(n), Just(r), Just(out), prop::collection::vec(entry, out * len))
    })
}

fn make_spec(n: usize, r: u32, out: usize, entries: &[Option<f64>]) -> KnowledgeSpec {
    let entries = entries
        .iter()
        .map(|e| e.map_or(Entry::Unknown, Entry::Known))
        .collect();
    KnowledgeSpec::new(MonomialBasis::new(n, r).unwrap(), out, entries).unwrap()
}

/// Widths never below the terminal width, last layer exactly at it.
fn plan_for(out: usize, r: u32, extra: &[(usize, u32, bool)]) -> Vec<LayerSpec> {
    let act = |relu: bool| if relu { Activation::Relu } else { Activation::Tanh };
    let mut plan = Vec::new();
    let mut first_order = r;
    for &(widen, order, relu) in extra {
        plan.push(LayerSpec::new(out + widen, first_order, act(relu)));
        first_order = order;
    }
    plan.push(LayerSpec::new(out, first_order, Activation::Tanh));
    plan
}

fn extra_layers() -> impl Strategy<Value = Vec<(usize, u32, bool)>> {
    prop::collection::vec((0usize..=2, 1u32..=2, any::<bool>()), 0..=2)
}

fn random_points(rng: &mut impl Rng, n: usize, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_matches_enumeration(n in 1usize..=5, r in 1u32..=4) {
        let basis = MonomialBasis::new(n, r).unwrap();
        prop_assert_eq!(basis.len() as u64, brute_force_count(n, r));
        prop_assert_eq!(basis_len(n, r).unwrap(), brute_force_count(n, r));
        prop_assert!(basis.terms()[0].is_constant());
        let degrees: Vec<u32> = basis.terms().iter().map(|t| t.degree()).collect();
        prop_assert!(degrees.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(degrees.iter().all(|&d| d <= r));
        let mut seen: Vec<&[u32]> = basis.terms().iter().map(|t| t.exponents()).collect();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), basis.len());
    }

    #[test]
    fn basis_values_match_products(n in 1usize..=4, r in 1u32..=3, seed in any::<u64>()) {
        let basis = MonomialBasis::new(n, r).unwrap();
        let x = random_points(&mut ChaCha8Rng::seed_from_u64(seed), n, 1).remove(0);
        let m = basis.evaluate(&x).unwrap();
        for (j, term) in basis.terms().iter().enumerate() {
            prop_assert!((m[j] - monomial_value(term.exponents(), &x)).abs() <= 1e-14);
        }
    }

    #[test]
    fn cascade_closed_form_matches_difference(
        n in 1usize..=4,
        orders in prop::collection::vec(1u32..=3, 2..=3),
        dims in prop::collection::vec(1usize..=4, 2),
    ) {
        let r: u32 = orders.iter().product();
        let dims = &dims[..orders.len() - 1];
        let mut direct = brute_force_count(n, r) as i64 - brute_force_count(n, orders[0]) as i64;
        for (d, &o) in dims.iter().zip(&orders[1..]) {
            direct -= brute_force_count(*d, o) as i64;
        }
        prop_assert_eq!(cascade_complexity_difference(n, r, dims, &orders).unwrap(), direct);
        prop_assert_eq!(cascade_complexity_closed_form(n, r, dims, &orders).unwrap(), direct);
    }

    #[test]
    fn first_layer_splits_into_knowledge_and_mask((n, r, out, entries) in spec_parts(), seed in any::<u64>()) {
        let spec = make_spec(n, r, out, &entries);
        let masks = spec.first_layer_masks();
        masks.check_invariants().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spec.realize(|_, _| rng.random_range(-3.0..3.0));
        let masked = a.zip_map(&masks.m, |v, m| if m { v } else { 0.0 });
        prop_assert_eq!(&masks.k + masked, a);
    }

    #[test]
    fn masks_consistent_in_every_layer((n, r, out, entries) in spec_parts(), extra in extra_layers()) {
        let spec = make_spec(n, r, out, &entries);
        let model = build_model(&spec, &plan_for(out, r, &extra)).unwrap();
        model.layer(0).masks().check_invariants().unwrap();
        for layer in model.layers() {
            for (i, &a) in layer.activation_mask().iter().enumerate() {
                prop_assert_eq!(a, layer.mask().row(i).iter().any(|&m| m));
            }
        }
    }

    #[test]
    fn known_coefficients_survive_any_weights(
        (n, r, out, entries) in spec_parts(),
        extra in extra_layers(),
        seed in any::<u64>(),
    ) {
        let spec = make_spec(n, r, out, &entries);
        let mut model = build_model(&spec, &plan_for(out, r, &extra)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 0..model.layers().len() {
            let (rows, cols) = model.layer(t).weights().shape();
            let w = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
            model.layer_mut(t).set_weights(w).unwrap();
        }
        let probes = random_points(&mut rng, n, 3);
        prop_assert!(knowledge_deviation(&model, &probes).unwrap() <= 1e-9);
    }

    #[test]
    fn training_leaves_frozen_weights_alone(
        (n, r, out, entries) in spec_parts(),
        extra in extra_layers(),
        seed in any::<u64>(),
    ) {
        let spec = make_spec(n, r, out, &entries);
        let mut model = build_model(&spec, &plan_for(out, r, &extra)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.initialize(&mut rng);
        let before = model.clone();
        let inputs = random_points(&mut rng, n, 12);
        let targets = random_points(&mut rng, out, 12);
        let data = Dataset::new(inputs, targets).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 4, epochs: 2, seed, ..TrainConfig::default() };
        train_model(&mut model, &data, &cfg).unwrap();
        for (a, b) in before.layers().iter().zip(model.layers()) {
            prop_assert_eq!(a.knowledge(), b.knowledge());
            for ((wa, wb), &m) in a.weights().iter().zip(b.weights().iter()).zip(a.mask().iter()) {
                if !m {
                    prop_assert_eq!(wa, wb);
                }
            }
        }
    }

    #[test]
    fn more_knowledge_never_adds_first_layer_weights(
        (n, r, out, entries) in spec_parts(),
        pick in any::<prop::sample::Index>(),
        value in prop_oneof![Just(0.0), -2.0f64..2.0],
        extra in extra_layers(),
    ) {
        let mut more = entries.clone();
        let i = pick.index(more.len());
        if more[i].is_none() {
            more[i] = Some(value);
        }
        let (base, richer) = (make_spec(n, r, out, &entries), make_spec(n, r, out, &more));
        prop_assert!(richer.first_layer_masks().trainable_count() <= base.first_layer_masks().trainable_count());
        let plan = plan_for(out, r, &extra);
        let (m0, m1) = (build_model(&base, &plan).unwrap(), build_model(&richer, &plan).unwrap());
        prop_assert!(m1.layer(0).trainable_count() <= m0.layer(0).trainable_count());
        if plan.len() == 1 {
            prop_assert!(m1.parameter_counts().0 <= m0.parameter_counts().0);
        }
    }

    #[test]
    fn suppressor_splits_output_and_caps_dnr(
        h in -20.0f64..20.0,
        w in -10.0f64..10.0,
        kappa in -4.0f64..-0.01,
        slack in 0.0f64..50.0,
    ) {
        prop_assume!(h != 0.0 && w != 0.0);
        let rho = (h + w).abs() * kappa.abs() + slack;
        let (t, noise) = suppressed_decomposition(h, w, kappa, rho).unwrap();
        let x = h + w;
        let expect = if x < 0.0 { 0.0 } else if w > 0.0 { x * kappa + rho } else { x };
        prop_assert!((t + noise - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        prop_assert!(noise != 0.0);
        prop_assert!(t / noise <= -1.0 + 1e-12);
    }

    #[test]
    fn monomial_dnr_grows_with_factor_dnr(
        region in 0usize..3,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        c in 0.0f64..1.0,
        p in 1u32..=4,
        q in 0u32..=4,
    ) {
        let map = |u: f64| match region {
            0 => -1.0 - 49.0 * u,
            1 => -0.5 + 0.49 * u,
            _ => 0.01 + 49.99 * u,
        };
        let (x, y, other) = (map(a), map(b), map(c));
        prop_assume!(x.abs() != y.abs());
        let (small, large) = if x.abs() < y.abs() { (x, y) } else { (y, x) };
        prop_assert!(dnr_of_monomial(small, other, p, q).unwrap() < dnr_of_monomial(large, other, p, q).unwrap());
    }

    #[test]
    fn eigen_round_trip(a in -5.0f64..5.0, b in -5.0f64..5.0, d in -5.0f64..5.0) {
        let p = Matrix2::new(a, b, b, d);
        let e = eigen_symmetric_2x2(&p);
        prop_assert!(e.values[0] <= e.values[1]);
        prop_assert!((e.reconstruct() - p).abs().max() <= 1e-12 * (1.0 + p.abs().max()));
        prop_assert!((e.q * e.q.transpose() - Matrix2::identity()).abs().max() <= 1e-14);
        // invariants of the matrix, computed without the decomposition
        prop_assert!((e.values[0] + e.values[1] - (a + d)).abs() <= 1e-12 * (1.0 + a.abs() + d.abs()));
        prop_assert!((e.values[0] * e.values[1] - (a * d - b * b)).abs() <= 1e-11 * (1.0 + p.abs().max().powi(2)));
    }

    #[test]
    fn revision_is_idempotent_and_verified(
        minus in any::<bool>(),
        b in -0.5f64..1.0,
        p in prop::array::uniform3(-1.0f64..1.0),
        half in prop::array::uniform2(0.1f64..1.0),
    ) {
        let sign = if minus { QuadSign::Minus } else { QuadSign::Plus };
        let q = SafetyQuadratic::from_row_major(sign, b, [p[0], p[1], p[1], p[2]]).unwrap();
        let bx = CommandBox::new([-half[0], -half[1]], half).unwrap();
        if let Ok(once) = revise(&q, &bx) {
            prop_assert!(verify_nonneg(&once, &bx).is_ok());
            prop_assert_eq!(revise(&once, &bx).unwrap(), once);
        } else {
            prop_assert!(minus && b < 0.0);
        }
    }

    #[test]
    fn corrected_commands_meet_both_targets(
        angles in prop::array::uniform2(0.0f64..std::f64::consts::PI),
        eig in prop::array::uniform4(0.2f64..3.0),
        offsets in prop::array::uniform2(-1.0f64..1.0),
        witness in prop::array::uniform2(-1.0f64..1.0),
        start in prop::array::uniform2(-1.0f64..1.0),
    ) {
        let spd = |theta: f64, l1: f64, l2: f64| {
            let (c, s) = (theta.cos(), theta.sin());
            let r = Matrix2::new(c, -s, s, c);
            r * Matrix2::new(l1, 0.0, 0.0, l2) * r.transpose()
        };
        let q1 = SafetyQuadratic::new(QuadSign::Plus, offsets[0], spd(angles[0], eig[0], eig[1])).unwrap();
        let q2 = SafetyQuadratic::new(QuadSign::Minus, offsets[1], spd(angles[1], eig[2], eig[3])).unwrap();
        let w = Vector2::new(witness[0], witness[1]);
        let u = Vector2::new(start[0], start[1]);
        let bounds = [q1.eval(&w), q2.eval(&w)];
        prop_assume!(q1.eval(&u) > bounds[0] && q2.eval(&u) > bounds[1]);
        let problem = CorrectionProblem {
            quadratics: [q1, q2],
            bounds,
            command_box: CommandBox::new([-1.0, -1.0], [1.0, 1.0]).unwrap(),
        };
        let c = correct_commands(&problem, &[u[0], u[1]]).unwrap();
        prop_assert!(c.corrected);
        let v = Vector2::new(c.command[0], c.command[1]);
        prop_assert!((q1.eval(&v) - bounds[0]).abs() <= 1e-8);
        prop_assert!((q2.eval(&v) - bounds[1]).abs() <= 1e-8);
        prop_assert!(problem.command_box.contains(&v, 1e-12));
    }
}

#[test]
fn deeper_layer_counts_can_rise_with_more_knowledge() {
    // rows [*, 0] / [*, *] against [*, 0] / [*, 0]: the extra zero shrinks the
    // second output's dependencies, so the next layer cuts fewer weights
    let basis = || MonomialBasis::new(1, 1).unwrap();
    let base = KnowledgeSpec::parse("* 0\n* *\n", basis(), 2).unwrap();
    let richer = KnowledgeSpec::parse("* 0\n* 0\n", basis(), 2).unwrap();
    let plan = [LayerSpec::new(2, 1, Activation::Tanh), LayerSpec::new(2, 1, Activation::Tanh)];
    let (m0, m1) = (build_model(&base, &plan).unwrap(), build_model(&richer, &plan).unwrap());
    assert_eq!(m0.layer(1).trainable_count(), 5);
    assert_eq!(m1.layer(1).trainable_count(), 6);
    assert_eq!(m0.layer(0).trainable_count(), 3);
    assert_eq!(m1.layer(0).trainable_count(), 2);
}
