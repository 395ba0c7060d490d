//! Synthetic trajectories: three coupled pendulums and a six-state
//! vehicle-like linear recursion, with the knowledge specs that go with them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{Entry, KnowledgeSpec};
use crate::monomial::MonomialBasis;
use crate::train::{Dataset, Split};

const BLOW_UP: f64 = 1e6;

/// `a_ij` for the chain 1 - 2 - 3.
pub const PENDULUM_ADJACENCY: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub masses: [f64; 3],
    pub lengths: [f64; 3],
    pub gravity: f64,
    pub spring: f64,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps per recorded sample.
    pub substeps: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            masses: [1.0; 3],
            lengths: [1.0; 3],
            gravity: 9.81,
            spring: 1.0,
            dt: 0.001,
            substeps: 10,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.masses.iter().chain(&self.lengths).chain([&self.gravity, &self.dt]);
        if positive.into_iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.spring >= 0.0) {
            return Err(Error::InvalidArgument(
                "pendulum masses, lengths, gravity and dt must be positive".into(),
            ));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be at least 1".into()));
        }
        Ok(())
    }

    /// Time between recorded samples.
    pub fn period(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    fn derivative(&self, x: &[f64; 6]) -> [f64; 6] {
        let mut d = [0.0; 6];
        for i in 0..3 {
            let (m, l) = (self.masses[i], self.lengths[i]);
            let coupling: f64 = (0..3).map(|j| PENDULUM_ADJACENCY[i][j] * (x[i] - x[j])).sum();
            d[i] = x[3 + i];
            d[3 + i] = -(self.gravity / l) * x[i].sin() - self.spring / (m * l * l) * coupling;
        }
        d
    }

    fn rk4(&self, x: &[f64; 6]) -> [f64; 6] {
        let h = self.dt;
        let add = |a: &[f64; 6], k: &[f64; 6], s: f64| std::array::from_fn(|i| a[i] + s * k[i]);
        let k1 = self.derivative(x);
        let k2 = self.derivative(&add(x, &k1, h / 2.0));
        let k3 = self.derivative(&add(x, &k2, h / 2.0));
        let k4 = self.derivative(&add(x, &k3, h));
        std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }

    /// Kinetic plus gravitational plus spring energy.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let mut e = 0.0;
        for i in 0..3 {
            let (m, l) = (self.masses[i], self.lengths[i]);
            e += 0.5 * m * l * l * x[3 + i] * x[3 + i] + m * self.gravity * l * (1.0 - x[i].cos());
            for j in (i + 1)..3 {
                e += 0.5 * self.spring * PENDULUM_ADJACENCY[i][j] * (x[i] - x[j]).powi(2);
            }
        }
        e
    }
}

/// States `[theta_1..3, omega_1..3]` at `steps + 1` sample times.
pub fn simulate_pendulums(params: &PendulumParams, x0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    if x0.len() != 6 {
        return Err(Error::DimensionMismatch {
            expected: 6,
            actual: x0.len(),
        });
    }
    let mut x: [f64; 6] = std::array::from_fn(|i| x0[i]);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x.to_vec());
    for step in 1..=steps {
        for _ in 0..params.substeps {
            x = params.rk4(&x);
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            return Err(Error::BlowUp { step });
        }
        out.push(x.to_vec());
    }
    Ok(out)
}

/// Trajectories starting at rest with every angle drawn from `[lo, hi)`.
pub fn pendulum_trajectories(
    params: &PendulumParams,
    count: usize,
    steps: usize,
    theta_range: (f64, f64),
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let (lo, hi) = theta_range;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("empty angle range [{lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut x0 = [0.0; 6];
            for v in &mut x0[..3] {
                *v = rng.random_range(lo..hi);
            }
            simulate_pendulums(params, &x0, steps)
        })
        .collect()
}

/// Split tag for trajectory `index`: four training, one validation and one
/// test trajectory out of every six.
pub fn split_for(index: usize) -> Split {
    match index % 6 {
        4 => Split::Val,
        5 => Split::Test,
        _ => Split::Train,
    }
}

/// One-step pairs `(x(k), x(k+1))` from every trajectory, tagged by
/// trajectory index and its split.
pub fn pairs_dataset(trajectories: &[Vec<Vec<f64>>], split: impl Fn(usize) -> Split) -> Result<Dataset> {
    let (mut inputs, mut targets, mut splits, mut ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (t, traj) in trajectories.iter().enumerate() {
        for w in traj.windows(2) {
            inputs.push(w[0].clone());
            targets.push(w[1].clone());
            splits.push(split(t));
            ids.push(t);
        }
    }
    Dataset::with_tags(inputs, targets, splits, ids)
}

/// How much of the pendulum physics a learner is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PendulumKnowledge {
    /// Kinematics with the sampling period, coupling topology and the form
    /// of each force.
    Full,
    /// Kinematic law and coupling topology, without the sampling period or
    /// which states drive each force.
    Partial,
    /// Nothing.
    None,
}

fn neighbours(i: usize) -> impl Iterator<Item = usize> {
    (0..3).filter(move |&j| j == i || PENDULUM_ADJACENCY[i][j] != 0.0)
}

/// Knowledge over the order-`order` monomials of the six pendulum states.
pub fn pendulum_knowledge(level: PendulumKnowledge, order: u32, period: f64) -> Result<KnowledgeSpec> {
    let basis = MonomialBasis::new(6, order)?;
    if level == PendulumKnowledge::None {
        return KnowledgeSpec::all_unknown(basis, 6);
    }
    KnowledgeSpec::from_fn(basis, 6, |row, col, term| {
        let i = row % 3;
        let angles: Vec<usize> = neighbours(i).collect();
        let within = |allowed: &[usize]| term.support().all(|k| allowed.contains(&k));
        let free = |allowed: &[usize]| if within(allowed) { Entry::Unknown } else { Entry::Known(0.0) };
        let mut own = angles.clone();
        own.push(3 + i);
        match (level, row < 3) {
            (PendulumKnowledge::Full, _) => {
                // gravity acts through the pendulum's own angle, springs
                // linearly through the neighbouring angles
                let force_term = match term.degree() {
                    1 => term.support().all(|k| angles.contains(&k)),
                    d => d > 1 && term.support().all(|k| k == i),
                };
                let linear_velocity = term.degree() == 1 && term.support().all(|k| k >= 3 && angles.contains(&(k - 3)));
                if row < 3 && col == 1 + 3 + i {
                    Entry::Known(period)
                } else if force_term || (row >= 3 && linear_velocity) {
                    Entry::Unknown
                } else {
                    Entry::Known(0.0)
                }
            }
            // each angle is driven by its own velocity
            (_, true) => free(&[i, 3 + i]),
            // the pendulums couple through their angles
            (_, false) => free(&own),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Sampling period `T`.
    pub period: f64,
    /// Row 4 coefficients on `x1` and `x4`.
    pub row4: [f64; 2],
    pub row5: [f64; 6],
    pub row6: [f64; 6],
    /// Coefficient of `x4 * x5` in row 5.
    pub cross: f64,
    pub noise_std: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        let t = 0.1;
        Self {
            period: t,
            row4: [-t, 1.0 - 0.6 * t],
            row5: [0.0, -1.2 * t, 0.0, 0.01, 1.0 - 0.5 * t, 0.0],
            row6: [0.0, 0.0, -0.8 * t, 0.0, 0.01, 1.0 - 0.4 * t],
            cross: 0.05,
            noise_std: 0.0,
        }
    }
}

impl VehicleParams {
    /// Linear part of the recursion.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let t = self.period;
        let mut a = DMatrix::zeros(6, 6);
        for i in 0..3 {
            a[(i, i)] = 1.0;
            a[(i, i + 3)] = t;
        }
        a[(3, 0)] = self.row4[0];
        a[(3, 3)] = self.row4[1];
        for j in 0..6 {
            a[(4, j)] = self.row5[j];
            a[(5, j)] = self.row6[j];
        }
        a
    }

    pub fn spectral_radius(&self) -> f64 {
        self.transition_matrix()
            .complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("period must be positive and noise non-negative".into()));
        }
        let rho = self.spectral_radius();
        if rho > 1.05 {
            return Err(Error::InvalidArgument(format!(
                "transition spectral radius {rho:.4} exceeds 1.05"
            )));
        }
        Ok(())
    }

    pub fn step(&self, x: &[f64]) -> Vec<f64> {
        let a = self.transition_matrix();
        let mut next = &a * DVector::from_column_slice(x);
        next[4] += self.cross * x[3] * x[4];
        next.as_slice().to_vec()
    }
}

/// Noise-free states and their noisy observations.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRun {
    pub truth: Vec<Vec<f64>>,
    pub observed: Vec<Vec<f64>>,
}

pub fn simulate_vehicle<R: Rng + ?Sized>(
    params: &VehicleParams,
    x0: &[f64],
    steps: usize,
    rng: &mut R,
) -> Result<VehicleRun> {
    params.validate()?;
    if x0.len() != 6 {
        return Err(Error::DimensionMismatch {
            expected: 6,
            actual: x0.len(),
        });
    }
    let noise = Normal::new(0.0, params.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut truth = vec![x0.to_vec()];
    for step in 1..=steps {
        let next = params.step(truth.last().expect("non-empty"));
        if next.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            return Err(Error::BlowUp { step });
        }
        truth.push(next);
    }
    let observed = truth
        .iter()
        .map(|x| {
            x.iter()
                .map(|v| if params.noise_std > 0.0 { v + noise.sample(rng) } else { *v })
                .collect()
        })
        .collect();
    Ok(VehicleRun { truth, observed })
}

/// `count` runs from initial states uniform in `[-1, 1]^6`.
pub fn vehicle_runs(params: &VehicleParams, count: usize, steps: usize, seed: u64) -> Result<Vec<VehicleRun>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            simulate_vehicle(params, &x0, steps, &mut rng)
        })
        .collect()
}

/// Rows 1-3 fully known; row 4 free only on the constant and on monomials
/// of `x1` and `x4`; rows 5-6 free.
pub fn vehicle_knowledge(params: &VehicleParams, order: u32) -> Result<KnowledgeSpec> {
    let basis = MonomialBasis::new(6, order)?;
    let t = params.period;
    KnowledgeSpec::from_fn(basis, 6, |row, col, term| match row {
        0..=2 => {
            if col == 1 + row {
                Entry::Known(1.0)
            } else if col == 1 + row + 3 {
                Entry::Known(t)
            } else {
                Entry::Known(0.0)
            }
        }
        3 => {
            if term.support().all(|k| k == 0 || k == 3) {
                Entry::Unknown
            } else {
                Entry::Known(0.0)
            }
        }
        _ => Entry::Unknown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rest_stays_at_rest() {
        let traj = simulate_pendulums(&PendulumParams::default(), &[0.0; 6], 50).unwrap();
        assert!(traj.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_is_conserved() {
        let params = PendulumParams {
            substeps: 1,
            ..PendulumParams::default()
        };
        let traj = simulate_pendulums(&params, &[0.5, -0.3, 0.8, 0.0, 0.2, -0.1], 10_000).unwrap();
        let e0 = params.energy(&traj[0]);
        let worst = traj.iter().map(|x| (params.energy(x) - e0).abs() / e0).fold(0.0, f64::max);
        assert!(worst < 1e-3, "relative drift {worst}");
    }

    /// Independent single-pendulum integrator.
    fn single(g_over_l: f64, theta: f64, dt: f64, steps: usize) -> Vec<f64> {
        let f = |th: f64, om: f64| (om, -g_over_l * th.sin());
        let (mut th, mut om) = (theta, 0.0);
        let mut out = vec![th];
        for _ in 0..steps {
            let (a1, b1) = f(th, om);
            let (a2, b2) = f(th + dt / 2.0 * a1, om + dt / 2.0 * b1);
            let (a3, b3) = f(th + dt / 2.0 * a2, om + dt / 2.0 * b2);
            let (a4, b4) = f(th + dt * a3, om + dt * b3);
            th += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            om += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
            out.push(th);
        }
        out
    }

    #[test]
    fn uncoupled_matches_single_pendulum() {
        let params = PendulumParams {
            spring: 0.0,
            lengths: [1.0, 2.0, 0.5],
            substeps: 1,
            ..PendulumParams::default()
        };
        let x0 = [0.4, -0.9, 1.2, 0.0, 0.0, 0.0];
        let traj = simulate_pendulums(&params, &x0, 2000).unwrap();
        for i in 0..3 {
            let oracle = single(9.81 / params.lengths[i], x0[i], params.dt, 2000);
            for (k, th) in oracle.iter().enumerate() {
                assert!((traj[k][i] - th).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pendulum_generation_is_seeded() {
        let p = PendulumParams::default();
        let a = pendulum_trajectories(&p, 3, 20, (-1.0, 1.0), 5).unwrap();
        let b = pendulum_trajectories(&p, 3, 20, (-1.0, 1.0), 5).unwrap();
        assert_eq!(a, b);
        let ood = pendulum_trajectories(&p, 4, 1, (-1.5, -1.0), 5).unwrap();
        assert!(ood.iter().all(|t| t[0][..3].iter().all(|&v| (-1.5..-1.0).contains(&v))));
        assert!(ood.iter().all(|t| t[0][3..].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn pairs_are_split_by_trajectory() {
        let p = PendulumParams::default();
        let trajs = pendulum_trajectories(&p, 6, 10, (-1.0, 1.0), 1).unwrap();
        let data = pairs_dataset(&trajs, split_for).unwrap();
        assert_eq!(data.len(), 60);
        assert_eq!(data.indices(Split::Train).len(), 40);
        assert_eq!(data.indices(Split::Val).len(), 10);
        assert_eq!(data.state_trajectories(), trajs);
    }

    #[test]
    fn pendulum_knowledge_levels_nest() {
        let t = PendulumParams::default().period();
        let full = pendulum_knowledge(PendulumKnowledge::Full, 2, t).unwrap();
        let partial = pendulum_knowledge(PendulumKnowledge::Partial, 2, t).unwrap();
        let none = pendulum_knowledge(PendulumKnowledge::None, 2, t).unwrap();
        assert!(full.known_count() > partial.known_count());
        assert!(partial.known_count() > none.known_count());
        assert_eq!(none.known_count(), 0);
        // theta_1 row: omega_1 coefficient is the sampling period
        assert_eq!(full.get(0, 4), Entry::Known(t));
        // angle rows only see their own angle and velocity
        assert_eq!(partial.get(0, 3), Entry::Known(0.0));
        assert_eq!(partial.get(1, 3), Entry::Known(0.0));
        assert_eq!(partial.get(1, 5), Entry::Unknown);
        // omega_2 is pulled by theta_3 through the spring
        assert_eq!(partial.get(4, 3), Entry::Unknown);
        assert_eq!(full.get(4, 3), Entry::Unknown);
    }

    #[test]
    fn vehicle_known_rows_and_stability() {
        let params = VehicleParams::default();
        assert!(params.spectral_radius() <= 1.05);
        let x = [0.3, -0.2, 0.5, 1.0, -1.0, 0.25];
        let next = params.step(&x);
        assert!((next[0] - (0.3 + 0.1 * 1.0)).abs() < 1e-15);
        assert!((next[1] - (-0.2 - 0.1)).abs() < 1e-15);
        let unstable = VehicleParams {
            row4: [0.0, 1.2],
            ..VehicleParams::default()
        };
        assert!(unstable.validate().is_err());
    }

    #[test]
    fn vehicle_noise_free_runs_repeat() {
        let p = VehicleParams::default();
        let a = vehicle_runs(&p, 2, 30, 3).unwrap();
        let b = vehicle_runs(&p, 2, 30, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].truth, a[0].observed);
        let noisy = VehicleParams {
            noise_std: 0.01,
            ..VehicleParams::default()
        };
        let r = vehicle_runs(&noisy, 1, 30, 3).unwrap();
        assert_ne!(r[0].truth, r[0].observed);
    }

    #[test]
    fn vehicle_spec_pattern() {
        let p = VehicleParams::default();
        let spec = vehicle_knowledge(&p, 1).unwrap();
        let expected = [
            "0 1 0 0 0.1 0 0",
            "0 0 1 0 0 0.1 0",
            "0 0 0 1 0 0 0.1",
            "* * 0 0 * 0 0",
            "* * * * * * *",
            "* * * * * * *",
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, tok) in row.split_whitespace().enumerate() {
                let e = if tok == "*" {
                    Entry::Unknown
                } else {
                    Entry::Known(tok.parse().unwrap())
                };
                assert_eq!(spec.get(i, j), e, "({i}, {j})");
            }
        }
    }
}
