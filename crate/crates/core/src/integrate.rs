//! Fixed-step classical Runge–Kutta integration with per-step restoration of
//! the manifold structure (polar projection of each rotation onto SO(d),
//! antisymmetrisation of each W).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::DiagnosticsRow;
use crate::dynamics::{
    AgentDerivative, AgentPhase, DynamicsError, Model, ModelParams, Phase, StateDerivative, Variant, VectorField,
};
use crate::ensemble::{AgentState, EnsembleError, EnsembleState};
use crate::matso::{self, antisymmetrize, orthogonality_drift, Rotation, SkewMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("invalid integration settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("orthogonality drift {drift:e} exceeds tolerance {tolerance:e} at t = {t} (step size too large?)")]
    DriftExceeded { t: f64, drift: f64, tolerance: f64 },
    #[error("projection failed at t = {t}: {source}")]
    Projection { t: f64, source: matso::MatError },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationSettings {
    pub dt: f64,
    pub t_final: f64,
    pub sample_every: f64,
    pub project_every_step: bool,
    pub drift_tolerance: f64,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_final: 12.0,
            sample_every: 0.1,
            project_every_step: true,
            drift_tolerance: 1e-8,
        }
    }
}

impl IntegrationSettings {
    pub fn validate(&self) -> Result<(), IntegrateError> {
        let bad = |msg: String| Err(IntegrateError::InvalidSettings(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.dt <= self.sample_every && self.sample_every <= self.t_final) {
            return bad(format!(
                "need 0 < dt <= sample_every <= t_final, got dt={}, sample_every={}, t_final={}",
                self.dt, self.sample_every, self.t_final
            ));
        }
        if !(self.drift_tolerance > 0.0) {
            return bad(format!("drift_tolerance must be positive, got {}", self.drift_tolerance));
        }
        Ok(())
    }

    /// Number of whole steps covering `span`.
    fn steps_for(&self, span: f64, what: &str) -> Result<usize, IntegrateError> {
        let ratio = span / self.dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-6 * ratio.max(1.0) {
            return Err(IntegrateError::InvalidSettings(format!(
                "{what} = {span} is not a whole number of steps of dt = {}",
                self.dt
            )));
        }
        Ok(steps as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub state: EnsembleState,
    pub diagnostics: DiagnosticsRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub variant: Variant,
    pub params: ModelParams,
    pub samples: Vec<Sample>,
    /// Inter-species pair evaluations that hit coincident centroids.
    pub coincident_events: usize,
}

impl Trajectory {
    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least one sample")
    }

    /// Sample closest in time to `t`.
    pub fn at(&self, t: f64) -> &Sample {
        self.samples
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .expect("trajectory has at least one sample")
    }

    pub fn rows(&self) -> Vec<DiagnosticsRow> {
        self.samples.iter().map(|s| s.diagnostics).collect()
    }

    /// `(t, f(row))` for every sample.
    pub fn series(&self, f: impl Fn(&DiagnosticsRow) -> f64) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.t, f(&s.diagnostics))).collect()
    }
}

fn combine(phase: &Phase, k: [&StateDerivative; 4], dt: f64) -> Phase {
    let h6 = dt / 6.0;
    let agents = phase
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let [k1, k2, k3, k4]: [&AgentDerivative; 4] = k.map(|kk| &kk.agents[i]);
            AgentPhase {
                centroid: &a.centroid
                    + (&k1.centroid + &k2.centroid * 2.0 + &k3.centroid * 2.0 + &k4.centroid) * h6,
                velocity: &a.velocity
                    + (&k1.velocity + &k2.velocity * 2.0 + &k3.velocity * 2.0 + &k4.velocity) * h6,
                rotation: &a.rotation
                    + (&k1.rotation + &k2.rotation * 2.0 + &k3.rotation * 2.0 + &k4.rotation) * h6,
                angular: &a.angular
                    + (k1.angular.as_matrix()
                        + k2.angular.as_matrix() * 2.0
                        + k3.angular.as_matrix() * 2.0
                        + k4.angular.as_matrix())
                        * h6,
            }
        })
        .collect();
    Phase { agents }
}

fn rk4<F: VectorField + ?Sized>(phase: &Phase, field: &F, dt: f64) -> Result<(Phase, usize), DynamicsError> {
    let k1 = field.derivative(phase)?;
    let k2 = field.derivative(&phase.advanced(&k1, 0.5 * dt))?;
    let k3 = field.derivative(&phase.advanced(&k2, 0.5 * dt))?;
    let k4 = field.derivative(&phase.advanced(&k3, dt))?;
    let events = k1.coincident_pairs + k2.coincident_pairs + k3.coincident_pairs + k4.coincident_pairs;
    Ok((combine(phase, [&k1, &k2, &k3, &k4], dt), events))
}

/// Polar-projects each rotation and antisymmetrises each W in place.
pub fn restore_structure(phase: &mut Phase) -> Result<(), matso::MatError> {
    for a in &mut phase.agents {
        a.rotation = matso::project_to_rotation(&a.rotation)?.into_inner();
        a.angular = antisymmetrize(&a.angular);
    }
    Ok(())
}

/// One classical fourth-order step, optionally followed by structure restoration.
pub fn step<F: VectorField + ?Sized>(phase: &Phase, field: &F, dt: f64, project: bool) -> Result<Phase, IntegrateError> {
    step_counting(phase, field, dt, project, 0.0).map(|(p, _)| p)
}

fn step_counting<F: VectorField + ?Sized>(
    phase: &Phase,
    field: &F,
    dt: f64,
    project: bool,
    t: f64,
) -> Result<(Phase, usize), IntegrateError> {
    if !(dt > 0.0) {
        return Err(IntegrateError::InvalidSettings(format!("dt must be positive, got {dt}")));
    }
    let (mut next, events) = rk4(phase, field, dt)?;
    if !next.is_finite() {
        return Err(IntegrateError::NonFinite { t: t + dt });
    }
    if project {
        restore_structure(&mut next).map_err(|source| IntegrateError::Projection { t: t + dt, source })?;
    }
    Ok((next, events))
}

/// Rebuilds a validated ensemble from a raw phase, accepting rotations within `tolerance`.
pub fn state_from_phase(template: &EnsembleState, phase: &Phase, tolerance: f64) -> Result<EnsembleState, IntegrateError> {
    let agents = template
        .agents()
        .iter()
        .zip(&phase.agents)
        .enumerate()
        .map(|(index, (old, a))| {
            Ok(AgentState {
                centroid: a.centroid.clone(),
                velocity: a.velocity.clone(),
                rotation: Rotation::with_tolerance(a.rotation.clone(), tolerance)
                    .map_err(|source| EnsembleError::Agent { index, source })?,
                angular: SkewMatrix::new(a.angular.clone()).map_err(|source| EnsembleError::Agent { index, source })?,
                scale: old.scale,
            })
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    Ok(EnsembleState::with_species(
        agents,
        template.species().to_vec(),
        template.shapes().to_vec(),
    )?)
}

fn max_drift(phase: &Phase) -> f64 {
    phase
        .agents
        .iter()
        .map(|a| orthogonality_drift(&a.rotation))
        .fold(0.0, f64::max)
}

/// Runs `variant` from `initial` and samples the trajectory every `sample_every`.
pub fn integrate(
    initial: &EnsembleState,
    params: &ModelParams,
    variant: Variant,
    settings: &IntegrationSettings,
) -> Result<Trajectory, IntegrateError> {
    settings.validate()?;
    let model = Model::new(variant, *params, initial)?;
    integrate_field(initial, &model, params, variant, settings)
}

/// As [`integrate`], for any vector field over the ensemble's phase space.
pub fn integrate_field<F: VectorField + ?Sized>(
    initial: &EnsembleState,
    field: &F,
    params: &ModelParams,
    variant: Variant,
    settings: &IntegrationSettings,
) -> Result<Trajectory, IntegrateError> {
    settings.validate()?;
    let total = settings.steps_for(settings.t_final, "t_final")?;
    let stride = settings.steps_for(settings.sample_every, "sample_every")?.max(1);
    let tol = settings.drift_tolerance;

    // sampled states may drift as far as the abort threshold allows
    let accept = tol.max(matso::ORTHOGONALITY_TOLERANCE);
    let sample = |t: f64, phase: &Phase| -> Result<Sample, IntegrateError> {
        let state = state_from_phase(initial, phase, accept)?;
        let diagnostics = DiagnosticsRow::compute(t, &state, params);
        Ok(Sample { t, state, diagnostics })
    };

    let mut phase = Phase::from_state(initial);
    let mut samples = vec![sample(0.0, &phase)?];
    let mut coincident_events = 0;
    for k in 1..=total {
        let t_prev = (k - 1) as f64 * settings.dt;
        let (next, events) = step_counting(&phase, field, settings.dt, settings.project_every_step, t_prev)?;
        phase = next;
        coincident_events += events;
        let t = k as f64 * settings.dt;
        let drift = max_drift(&phase);
        if drift > tol {
            return Err(IntegrateError::DriftExceeded { t, drift, tolerance: tol });
        }
        if k % stride == 0 || k == total {
            samples.push(sample(t, &phase)?);
        }
    }
    Ok(Trajectory {
        variant,
        params: *params,
        samples,
        coincident_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{Point, ReferenceShape};
    use crate::matso::{random_rotation, random_skew_with, Matrix};
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `q̇ = −q` on every centroid coordinate, nothing else moves.
    struct Decay;

    impl VectorField for Decay {
        fn derivative(&self, phase: &Phase) -> Result<StateDerivative, DynamicsError> {
            Ok(StateDerivative {
                agents: phase
                    .agents
                    .iter()
                    .map(|a| {
                        let d = a.centroid.len();
                        AgentDerivative {
                            centroid: -&a.centroid,
                            velocity: Point::zeros(d),
                            rotation: Matrix::zeros(d, d),
                            angular: SkewMatrix::zeros(d),
                        }
                    })
                    .collect(),
                coincident_pairs: 0,
            })
        }
    }

    struct Still;

    impl VectorField for Still {
        fn derivative(&self, phase: &Phase) -> Result<StateDerivative, DynamicsError> {
            Decay.derivative(phase).map(|mut d| {
                for a in &mut d.agents {
                    a.centroid.fill(0.0);
                }
                d
            })
        }
    }

    fn segment() -> ReferenceShape {
        ReferenceShape::new(vec![dvector![1.0, 0.0], dvector![-1.0, 0.0]]).unwrap()
    }

    fn single(q: f64) -> EnsembleState {
        EnsembleState::new(
            vec![AgentState::at_rest(dvector![q, 0.0], Rotation::identity(2))],
            segment(),
        )
        .unwrap()
    }

    #[test]
    fn zero_field_leaves_state_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agent = AgentState {
            velocity: dvector![0.3, -0.1, 0.2],
            angular: random_skew_with(&mut rng, 3, 1.0),
            ..AgentState::at_rest(dvector![1.0, 2.0, 3.0], random_rotation(4, 3))
        };
        let shape = ReferenceShape::new(vec![dvector![1.0, 0.0, 0.0], dvector![-1.0, 0.0, 0.0]]).unwrap();
        let state = EnsembleState::new(vec![agent], shape).unwrap();
        let phase = Phase::from_state(&state);
        assert_eq!(step(&phase, &Still, 0.1, false).unwrap(), phase);
    }

    #[test]
    fn scalar_decay_one_step() {
        let next = step(&Phase::from_state(&single(1.0)), &Decay, 0.1, true).unwrap();
        let q = next.agents[0].centroid[0];
        assert_abs_diff_eq!(q, 0.9048375, epsilon = 1e-7);
        assert_abs_diff_eq!(q, (-0.1f64).exp(), epsilon = 1e-7);
        // RK4 applied to q̇ = −q multiplies by the degree-4 Taylor polynomial of e^{−h}
        let h: f64 = 0.1;
        assert_abs_diff_eq!(q, 1.0 - h + h * h / 2.0 - h * h * h / 6.0 + h.powi(4) / 24.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_rotations_at_rest_stay_put() {
        let o = random_rotation(8, 3);
        let shape = ReferenceShape::new(vec![dvector![1.0, 0.0, 0.0], dvector![-1.0, 0.0, 0.0]]).unwrap();
        let state = EnsembleState::new(vec![AgentState::at_rest(Point::zeros(3), o); 3], shape).unwrap();
        let model = Model::new(Variant::Order2, ModelParams::second_order(1.0, 1.0, 1.0), &state).unwrap();
        let phase = Phase::from_state(&state);
        let next = step(&phase, &model, 1e-2, true).unwrap();
        for (a, b) in next.agents.iter().zip(&phase.agents) {
            assert!((&a.rotation - &b.rotation).norm() < 1e-14);
            assert!(a.angular.norm() < 1e-15);
        }
    }

    #[test]
    fn settings_validation() {
        let mut s = IntegrationSettings::default();
        assert!(s.validate().is_ok());
        s.dt = 0.0;
        assert!(s.validate().is_err());
        let s = IntegrationSettings {
            sample_every: 20.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        let s = IntegrationSettings {
            dt: 0.3,
            t_final: 1.0,
            sample_every: 0.6,
            ..Default::default()
        };
        assert!(matches!(
            integrate(&single(0.0), &ModelParams::first_order(1.0), Variant::Order1, &s),
            Err(IntegrateError::InvalidSettings(_))
        ));
    }

    #[test]
    fn single_agent_first_order_is_constant() {
        let state = EnsembleState::new(
            vec![AgentState::at_rest(dvector![0.5, -0.5], Rotation::planar(0.3))],
            segment(),
        )
        .unwrap();
        let s = IntegrationSettings {
            t_final: 1.0,
            ..Default::default()
        };
        let traj = integrate(&state, &ModelParams::first_order(2.0), Variant::Order1, &s).unwrap();
        assert_eq!(traj.samples.len(), 11);
        for smp in &traj.samples {
            assert_eq!(smp.state.agents()[0].centroid, state.agents()[0].centroid);
            assert!((smp.state.agents()[0].rotation.as_matrix() - state.agents()[0].rotation.as_matrix()).norm() < 1e-15);
        }
    }

    #[test]
    fn sampling_grid() {
        let s = IntegrationSettings {
            dt: 0.01,
            t_final: 1.05,
            sample_every: 0.25,
            ..Default::default()
        };
        let traj = integrate(&single(1.0), &ModelParams::first_order(1.0), Variant::Order1, &s).unwrap();
        let times: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
        assert_eq!(times.len(), 6);
        assert_eq!(times[0], 0.0);
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        assert_abs_diff_eq!(*times.last().unwrap(), 1.05, epsilon = 1e-12);
    }

    #[test]
    fn blow_up_is_reported() {
        struct Explode;
        impl VectorField for Explode {
            fn derivative(&self, phase: &Phase) -> Result<StateDerivative, DynamicsError> {
                Decay.derivative(phase).map(|mut d| {
                    for a in &mut d.agents {
                        a.centroid.fill(f64::INFINITY);
                    }
                    d
                })
            }
        }
        let err = step(&Phase::from_state(&single(1.0)), &Explode, 0.1, true).unwrap_err();
        assert!(matches!(err, IntegrateError::NonFinite { .. }));
    }

    #[test]
    fn coarse_unprojected_run_trips_drift_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agents = (0..3)
            .map(|i| AgentState {
                angular: random_skew_with(&mut rng, 3, 3.0),
                ..AgentState::at_rest(Point::zeros(3), random_rotation(i, 3))
            })
            .collect();
        let shape = ReferenceShape::new(vec![dvector![1.0, 0.0, 0.0], dvector![-1.0, 0.0, 0.0]]).unwrap();
        let state = EnsembleState::new(agents, shape).unwrap();
        let s = IntegrationSettings {
            dt: 0.2,
            t_final: 2.0,
            sample_every: 0.2,
            project_every_step: false,
            drift_tolerance: 1e-8,
        };
        let err = integrate(&state, &ModelParams::second_order(1.0, 0.1, 1.0), Variant::Order2, &s).unwrap_err();
        assert!(matches!(err, IntegrateError::DriftExceeded { .. }));
    }
}
