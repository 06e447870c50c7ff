//! Observables and the analytic predictions they are checked against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::ModelParams;
use crate::ensemble::{EnsembleState, Point, ReferenceShape, VertexCloud};
use crate::matso::{orthogonality_drift, skew_drift, Matrix, Rotation};

/// Values at or below this are treated as having hit the floating-point floor.
pub const FIT_FLOOR: f64 = 1e2 * f64::EPSILON;

pub const MIN_FIT_SAMPLES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("matching residual needs a single-species ensemble, found {0} species")]
    SpeciesMismatch(usize),
    #[error("value {value:e} at t = {t} is not positive; shrink the window before the series reaches the floating-point floor")]
    NonPositive { t: f64, value: f64 },
    #[error("only {found} samples in the fit window, need at least {MIN_FIT_SAMPLES}")]
    TooFewSamples { found: usize },
    #[error("parameter {name} = {value} is out of range")]
    InvalidParameter { name: &'static str, value: f64 },
}

/// One row of the diagnostics file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    /// Centroid diameter (maximum over species).
    pub diam_centroid: f64,
    /// Frobenius rotation diameter (maximum over species).
    pub diam_rotation: f64,
    /// `max_{α,i,j} ‖x_α^i − x_α^j‖` within each species.
    pub residual: f64,
    pub energy: f64,
    pub ortho_drift: f64,
    pub skew_drift: f64,
    pub rigidity_error: f64,
}

impl DiagnosticsRow {
    pub const COLUMNS: [&'static str; 8] = [
        "t",
        "diam_centroid",
        "diam_rotation",
        "residual",
        "energy",
        "ortho_drift",
        "skew_drift",
        "rigidity_error",
    ];

    pub fn compute(t: f64, state: &EnsembleState, p: &ModelParams) -> Self {
        let mut row = DiagnosticsRow {
            t,
            diam_centroid: 0.0,
            diam_rotation: 0.0,
            residual: 0.0,
            energy: 0.0,
            ortho_drift: 0.0,
            skew_drift: 0.0,
            rigidity_error: rigidity_error(state),
        };
        for s in 0..state.species_count() {
            let members = state.members(s);
            let centroids: Vec<Point> = members.iter().map(|&i| state.agents()[i].centroid.clone()).collect();
            let rotations: Vec<&Matrix> = members.iter().map(|&i| state.agents()[i].rotation.as_matrix()).collect();
            row.diam_centroid = row.diam_centroid.max(diameter_points(&centroids));
            row.diam_rotation = row.diam_rotation.max(frobenius_diameter(&rotations));
            row.residual = row.residual.max(group_residual(state, &members));
            row.energy += group_energy(state, &members, p);
        }
        for a in state.agents() {
            row.ortho_drift = row.ortho_drift.max(orthogonality_drift(a.rotation.as_matrix()));
            row.skew_drift = row.skew_drift.max(skew_drift(a.angular.as_matrix()));
        }
        row
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.t,
            self.diam_centroid,
            self.diam_rotation,
            self.residual,
            self.energy,
            self.ortho_drift,
            self.skew_drift,
            self.rigidity_error,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            t: v[0],
            diam_centroid: v[1],
            diam_rotation: v[2],
            residual: v[3],
            energy: v[4],
            ortho_drift: v[5],
            skew_drift: v[6],
            rigidity_error: v[7],
        }
    }
}

/// `max_{i,j} ‖q^i − q^j‖`.
pub fn diameter_points(points: &[Point]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm());
        }
    }
    best
}

/// `max_{i,j} ‖O^i − O^j‖_F`.
pub fn diameter_rotations(rotations: &[Rotation]) -> f64 {
    let refs: Vec<&Matrix> = rotations.iter().map(Rotation::as_matrix).collect();
    frobenius_diameter(&refs)
}

pub(crate) fn frobenius_diameter(mats: &[&Matrix]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in mats.iter().enumerate() {
        for b in &mats[i + 1..] {
            best = best.max((*a - *b).norm());
        }
    }
    best
}

/// `max_{α,i,j} ‖x_α^i − x_α^j‖` over reconstructed vertices.
pub fn matching_residual(state: &EnsembleState) -> Result<f64, DiagnosticsError> {
    if state.species_count() != 1 {
        return Err(DiagnosticsError::SpeciesMismatch(state.species_count()));
    }
    Ok(group_residual(state, &state.members(0)))
}

fn group_residual(state: &EnsembleState, members: &[usize]) -> f64 {
    let clouds: Vec<_> = members.iter().map(|&i| state.vertices(i)).collect();
    let mut best: f64 = 0.0;
    for (i, a) in clouds.iter().enumerate() {
        for b in &clouds[i + 1..] {
            for (xa, xb) in a.vertices.iter().zip(&b.vertices) {
                best = best.max((xa - xb).norm());
            }
        }
    }
    best
}

/// `(m/N) Σ ‖W^i‖²_F + (κ/2N²) Σ_{i,k} ‖O^i − O^k‖²_F`, summed over species.
///
/// `‖Ȯ‖_F = ‖W O‖_F = ‖W‖_F` because O is orthogonal, so W stands in for Ȯ.
pub fn energy(state: &EnsembleState, p: &ModelParams) -> f64 {
    (0..state.species_count())
        .map(|s| group_energy(state, &state.members(s), p))
        .sum()
}

fn group_energy(state: &EnsembleState, members: &[usize], p: &ModelParams) -> f64 {
    let n = members.len() as f64;
    let agents = state.agents();
    let kinetic: f64 = members
        .iter()
        .map(|&i| agents[i].angular.as_matrix().norm_squared())
        .sum();
    let mut potential = 0.0;
    for &i in members {
        for &k in members {
            potential += (agents[i].rotation.as_matrix() - agents[k].rotation.as_matrix()).norm_squared();
        }
    }
    p.m / n * kinetic + p.kappa / (2.0 * n * n) * potential
}

/// `max_{i,α,β} | ‖x_α^i − x_β^i‖ − s^i ‖r_α − r_β‖ |`.
pub fn rigidity_error(state: &EnsembleState) -> f64 {
    state
        .agents()
        .iter()
        .enumerate()
        .map(|(i, a)| cloud_rigidity_error(&state.vertices(i), state.shape_of(i), a.scale))
        .fold(0.0, f64::max)
}

/// Largest deviation of a cloud's intra-vertex distances from `scale` times the reference ones.
pub fn cloud_rigidity_error(cloud: &VertexCloud, shape: &ReferenceShape, scale: f64) -> f64 {
    let r = shape.displacements();
    let x = &cloud.vertices;
    let mut worst: f64 = 0.0;
    for a in 0..r.len() {
        for b in (a + 1)..r.len() {
            let actual = (&x[a] - &x[b]).norm();
            let reference = scale * (&r[a] - &r[b]).norm();
            worst = worst.max((actual - reference).abs());
        }
    }
    worst
}

/// Least-squares slope of `ln(value)` against `t` over `window` (inclusive).
pub fn fit_decay_rate(series: &[(f64, f64)], window: (f64, f64)) -> Result<f64, DiagnosticsError> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|&(t, _)| t >= window.0 && t <= window.1)
        .collect();
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(DiagnosticsError::TooFewSamples { found: pts.len() });
    }
    if let Some(&(t, value)) = pts.iter().find(|&&(_, v)| !(v > FIT_FLOOR)) {
        return Err(DiagnosticsError::NonPositive { t, value });
    }
    let n = pts.len() as f64;
    let t_mean = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, v) in &pts {
        let dt = t - t_mean;
        sxy += dt * (v.ln() - y_mean);
        sxx += dt * dt;
    }
    Ok(sxy / sxx)
}

/// Default rate-fit window `[T/2, 0.9·T]`.
pub fn default_fit_window(t_final: f64) -> (f64, f64) {
    (0.5 * t_final, 0.9 * t_final)
}

/// Strict local maxima of a sampled series (interior points only).
pub fn local_maxima(series: &[(f64, f64)]) -> Vec<(f64, f64)> {
    series
        .windows(3)
        .filter(|w| w[1].1 > w[0].1 && w[1].1 >= w[2].1)
        .map(|w| w[1])
        .collect()
}

/// Slowest exponential rate of `m q̈ + γ q̇ + κ q = 0`.
pub fn predicted_rate_order2(p: &ModelParams) -> Result<f64, DiagnosticsError> {
    for (name, value) in [("m", p.m), ("gamma", p.gamma), ("kappa", p.kappa)] {
        if !(value > 0.0) {
            return Err(DiagnosticsError::InvalidParameter { name, value });
        }
    }
    let disc = p.gamma * p.gamma - 4.0 * p.m * p.kappa;
    Ok(if disc >= 0.0 {
        (-p.gamma + disc.sqrt()) / (2.0 * p.m)
    } else {
        -p.gamma / (2.0 * p.m)
    })
}

/// Rate `−κ/γ` of the zero-inertia consensus.
pub fn predicted_rate_order1(kappa: f64, gamma: f64) -> Result<f64, DiagnosticsError> {
    if !(kappa > 0.0) {
        return Err(DiagnosticsError::InvalidParameter { name: "kappa", value: kappa });
    }
    if !(gamma > 0.0) {
        return Err(DiagnosticsError::InvalidParameter { name: "gamma", value: gamma });
    }
    Ok(-kappa / gamma)
}

/// `D0 / ((1 − D0) e^{κt} + D0)`, the logistic bound on the first-order
/// Lohe rotation diameter; valid for `0 ≤ D0 < 1`.
pub fn lohe_diameter_bound(d0: f64, kappa: f64, t: f64) -> Result<f64, DiagnosticsError> {
    if !(0.0..1.0).contains(&d0) {
        return Err(DiagnosticsError::InvalidParameter { name: "D0", value: d0 });
    }
    Ok(d0 / ((1.0 - d0) * (kappa * t).exp() + d0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::AgentState;
    use crate::matso::{random_rotation, random_skew_with};
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape() -> ReferenceShape {
        ReferenceShape::from_vertices(&crate::ensemble::VertexCloud::new(vec![
            dvector![0.0, 0.0],
            dvector![2.0, 0.0],
            dvector![1.0, 3.0],
        ]))
        .unwrap()
    }

    #[test]
    fn point_diameter() {
        assert_eq!(diameter_points(&[dvector![1.0, 2.0]]), 0.0);
        assert_eq!(diameter_points(&[dvector![0.0, 0.0], dvector![2.0, 0.0]]), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..10)
            .map(|_| Point::from_fn(3, |_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let mut brute: f64 = 0.0;
        for a in &pts {
            for b in &pts {
                brute = brute.max((a - b).norm());
            }
        }
        assert_eq!(diameter_points(&pts), brute);
    }

    #[test]
    fn rotation_diameter() {
        let same = vec![random_rotation(1, 3); 3];
        assert_eq!(diameter_rotations(&same), 0.0);
        let phi: f64 = 0.9;
        let pair = [Rotation::planar(0.0), Rotation::planar(phi)];
        assert_abs_diff_eq!(diameter_rotations(&pair), 2.0 * (1.0 - phi.cos()).sqrt(), epsilon = 1e-15);
        let quarter = [Rotation::planar(0.0), Rotation::planar(std::f64::consts::FRAC_PI_2)];
        assert_abs_diff_eq!(diameter_rotations(&quarter), 2.0, epsilon = 1e-15);

        let rots: Vec<Rotation> = (0..7).map(|s| random_rotation(s, 3)).collect();
        let mut brute: f64 = 0.0;
        for a in &rots {
            for b in &rots {
                brute = brute.max(crate::matso::frobenius_distance(a.as_matrix(), b.as_matrix()).unwrap());
            }
        }
        assert_eq!(diameter_rotations(&rots), brute);
    }

    #[test]
    fn residual_examples() {
        let a = AgentState::at_rest(dvector![1.0, 1.0], Rotation::planar(0.4));
        let same = EnsembleState::new(vec![a.clone(), a.clone()], shape()).unwrap();
        assert_eq!(matching_residual(&same).unwrap(), 0.0);

        let mut b = a.clone();
        b.centroid += dvector![3.0, -4.0];
        let offset = EnsembleState::new(vec![a.clone(), b], shape()).unwrap();
        assert_abs_diff_eq!(matching_residual(&offset).unwrap(), 5.0, epsilon = 1e-14);

        let two = EnsembleState::with_species(vec![a.clone(), a], vec![0, 1], vec![shape(), shape()]).unwrap();
        assert_eq!(matching_residual(&two), Err(DiagnosticsError::SpeciesMismatch(2)));
    }

    #[test]
    fn residual_respects_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let agents: Vec<AgentState> = (0..4)
                .map(|i| {
                    AgentState::at_rest(
                        Point::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
                        random_rotation(trial * 10 + i, 2),
                    )
                })
                .collect();
            let s = EnsembleState::new(agents, shape()).unwrap();
            let row = DiagnosticsRow::compute(0.0, &s, &ModelParams::first_order(1.0));
            assert!(row.residual <= row.diam_centroid + shape().radius() * row.diam_rotation + 1e-12);
        }
    }

    #[test]
    fn energy_examples() {
        let p = ModelParams::second_order(1.5, 1.0, 2.0);
        let o = random_rotation(2, 3);
        let rest = EnsembleState::new(
            vec![AgentState::at_rest(Point::zeros(3), o.clone()); 3],
            ReferenceShape::new(vec![dvector![1.0, 0.0, 0.0], dvector![-1.0, 0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(energy(&rest, &p), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_skew_with(&mut rng, 3, 1.0);
        let spinning = AgentState {
            angular: w.clone(),
            ..AgentState::at_rest(Point::zeros(3), o)
        };
        let single = EnsembleState::new(vec![spinning], rest.shapes()[0].clone()).unwrap();
        assert_abs_diff_eq!(energy(&single, &p), 1.5 * w.as_matrix().norm_squared(), epsilon = 1e-14);
    }

    #[test]
    fn rigidity_examples() {
        let mut a = AgentState::at_rest(dvector![1.0, -1.0], Rotation::planar(1.1));
        let s = EnsembleState::new(vec![a.clone()], shape()).unwrap();
        assert!(rigidity_error(&s) <= 1e-12);
        a.scale = 2.0;
        let s = EnsembleState::new(vec![a], shape()).unwrap();
        assert!(rigidity_error(&s) <= 1e-12);

        // moving vertex 2 by δ along x_2 − x_0 changes d_02 by δ and d_12 by less
        let good = AgentState::at_rest(dvector![0.3, 0.2], Rotation::planar(0.5));
        let mut cloud = crate::ensemble::reconstruct(&good, &shape()).unwrap();
        let dir = (&cloud.vertices[2] - &cloud.vertices[0]).normalize();
        cloud.vertices[2] += dir * 0.01;
        assert_abs_diff_eq!(cloud_rigidity_error(&cloud, &shape(), 1.0), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn decay_fits() {
        let exp2: Vec<(f64, f64)> = (0..50).map(|k| {
            let t = k as f64 * 0.1;
            (t, (-2.0 * t).exp())
        }).collect();
        assert_abs_diff_eq!(fit_decay_rate(&exp2, (0.0, 5.0)).unwrap(), -2.0, epsilon = 1e-10);

        let flat: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 3.0)).collect();
        assert_abs_diff_eq!(fit_decay_rate(&flat, (0.0, 10.0)).unwrap(), 0.0, epsilon = 1e-15);

        let two_mode: Vec<(f64, f64)> = (0..200).map(|k| {
            let t = k as f64 * 0.1;
            (t, 2.0 * (-t).exp() + 5.0 * (-5.0 * t).exp())
        }).collect();
        let late = fit_decay_rate(&two_mode, (10.0, 19.9)).unwrap();
        assert!((late + 1.0).abs() < 1e-10, "late rate {late}");

        let with_zero = vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.0), (3.0, 0.1), (4.0, 0.1)];
        assert!(matches!(
            fit_decay_rate(&with_zero, (0.0, 4.0)),
            Err(DiagnosticsError::NonPositive { .. })
        ));
        assert!(matches!(
            fit_decay_rate(&exp2[..4], (0.0, 5.0)),
            Err(DiagnosticsError::TooFewSamples { found: 4 })
        ));
    }

    #[test]
    fn predicted_rates() {
        assert_abs_diff_eq!(
            predicted_rate_order2(&ModelParams::second_order(1.0, 3.0, 2.0)).unwrap(),
            -1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            predicted_rate_order2(&ModelParams::second_order(1.0, 2.0, 5.0)).unwrap(),
            -1.0,
            epsilon = 1e-15
        );
        assert!(predicted_rate_order2(&ModelParams::first_order(1.0)).is_err());
        assert_eq!(predicted_rate_order1(2.0, 1.0).unwrap(), -2.0);
        assert!(predicted_rate_order1(0.0, 1.0).is_err());
    }

    #[test]
    fn logistic_bound() {
        assert_eq!(lohe_diameter_bound(0.0, 1.0, 5.0).unwrap(), 0.0);
        assert_eq!(lohe_diameter_bound(0.7, 2.0, 0.0).unwrap(), 0.7);
        let b = lohe_diameter_bound(0.5, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(b, 0.268941421369995, epsilon = 1e-12);
        assert!(lohe_diameter_bound(1.0, 1.0, 1.0).is_err());

        // independent route: integrate Ḋ = −κ D (1 − D) with small Euler-midpoint steps
        let (mut dval, h) = (0.5f64, 1e-5);
        for _ in 0..100_000 {
            let mid = dval - 0.5 * h * dval * (1.0 - dval);
            dval -= h * mid * (1.0 - mid);
        }
        assert_abs_diff_eq!(dval, b, epsilon = 1e-9);
    }

    #[test]
    fn maxima_detection() {
        let s: Vec<(f64, f64)> = [0.0, 1.0, 0.5, 0.7, 0.2, 0.1].iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
        assert_eq!(local_maxima(&s), vec![(1.0, 1.0), (3.0, 0.7)]);
    }
}
