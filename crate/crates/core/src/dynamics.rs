//! Right-hand sides of the centroid-consensus / Lohe-rotation systems.
//!
//! The second-order rotation equation
//! `m(ÖOᵀ + ȮȮᵀ) = −γȮOᵀ + C(O)` is evolved as the first-order pair
//! `Ȯ = W O`, `m Ẇ = −γ W + C(O)` with `W = ȮOᵀ` skew: differentiating
//! `W = ȮOᵀ` gives exactly the bracket on the left when `OOᵀ ≡ I`.
//!
//! All coupling is all-to-all within a species. The Lohe coupling seen by agent i is
//! `C_i = (κ/2N) Σ_k w_k (O^k O^iᵀ − O^i O^kᵀ)`, computed as the skew part of
//! `(Σ_k w_k O^k) O^iᵀ` so the result is skew to the last bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{EnsembleState, Point};
use crate::matso::{antisymmetrize, Matrix, SkewMatrix};

/// Separation below which the pair spring force is treated as undefined.
pub const COINCIDENCE_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{variant} dynamics requires inertia m > 0 (use the first-order model for m = 0)")]
    ZeroInertia { variant: Variant },
    #[error("first-order dynamics requires m = 0, got {m}")]
    NonzeroInertia { m: f64 },
    #[error("parameter {name} = {value} is out of range")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("{variant} dynamics expects {expected} species, found {found}")]
    SpeciesCount {
        variant: Variant,
        expected: usize,
        found: usize,
    },
    #[error("species {0} has no agents")]
    EmptySpecies(usize),
    #[error("phase has {found} agents, model expects {expected}")]
    AgentCount { expected: usize, found: usize },
    #[error("non-finite value in the derivative of agent {agent}")]
    NonFinite { agent: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Second-order centroids and rotations.
    Order2,
    /// Zero-inertia reduction (m = 0, γ = 1).
    Order1,
    /// Second-order system for similar shapes with scale ratios in the coupling.
    Similar,
    /// Two species coupled through a pair spring of rest length L.
    Hetero,
}

impl Variant {
    pub fn is_second_order(self) -> bool {
        !matches!(self, Variant::Order1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Order2 => "order2",
            Variant::Order1 => "order1",
            Variant::Similar => "similar",
            Variant::Hetero => "hetero",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Inertia.
    pub m: f64,
    /// Friction.
    pub gamma: f64,
    /// Coupling strength (within-species coupling for the two-species model).
    pub kappa: f64,
    /// Inter-species spring strength.
    pub kappa2: f64,
    /// Spring rest length.
    pub rest_length: f64,
}

impl ModelParams {
    pub fn second_order(m: f64, gamma: f64, kappa: f64) -> Self {
        Self {
            m,
            gamma,
            kappa,
            kappa2: 0.0,
            rest_length: 1.0,
        }
    }

    pub fn first_order(kappa: f64) -> Self {
        Self {
            m: 0.0,
            gamma: 1.0,
            kappa,
            kappa2: 0.0,
            rest_length: 1.0,
        }
    }

    pub fn hetero(m: f64, gamma: f64, kappa1: f64, kappa2: f64, rest_length: f64) -> Self {
        Self {
            m,
            gamma,
            kappa: kappa1,
            kappa2,
            rest_length,
        }
    }

    fn check(&self, variant: Variant) -> Result<(), DynamicsError> {
        let nonneg = |name, value: f64| {
            if value >= 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(DynamicsError::InvalidParameter { name, value })
            }
        };
        nonneg("m", self.m)?;
        nonneg("gamma", self.gamma)?;
        nonneg("kappa", self.kappa)?;
        if variant.is_second_order() {
            if self.m <= 0.0 {
                return Err(DynamicsError::ZeroInertia { variant });
            }
        } else if self.m != 0.0 {
            return Err(DynamicsError::NonzeroInertia { m: self.m });
        }
        if variant == Variant::Hetero {
            nonneg("kappa2", self.kappa2)?;
            if !(self.rest_length > 0.0 && self.rest_length.is_finite()) {
                return Err(DynamicsError::InvalidParameter {
                    name: "L",
                    value: self.rest_length,
                });
            }
        }
        Ok(())
    }
}

/// Raw phase-space point of one agent. Unlike [`crate::ensemble::AgentState`]
/// nothing is validated: Runge–Kutta stage values leave SO(d) slightly.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPhase {
    pub centroid: Point,
    pub velocity: Point,
    pub rotation: Matrix,
    pub angular: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub agents: Vec<AgentPhase>,
}

impl Phase {
    pub fn from_state(state: &EnsembleState) -> Self {
        Self {
            agents: state
                .agents()
                .iter()
                .map(|a| AgentPhase {
                    centroid: a.centroid.clone(),
                    velocity: a.velocity.clone(),
                    rotation: a.rotation.as_matrix().clone(),
                    angular: a.angular.as_matrix().clone(),
                })
                .collect(),
        }
    }

    /// `self + h·k`.
    pub fn advanced(&self, k: &StateDerivative, h: f64) -> Phase {
        Phase {
            agents: self
                .agents
                .iter()
                .zip(&k.agents)
                .map(|(a, da)| AgentPhase {
                    centroid: &a.centroid + &da.centroid * h,
                    velocity: &a.velocity + &da.velocity * h,
                    rotation: &a.rotation + &da.rotation * h,
                    angular: &a.angular + da.angular.as_matrix() * h,
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.agents.iter().all(|a| {
            a.centroid.iter().all(|x| x.is_finite())
                && a.velocity.iter().all(|x| x.is_finite())
                && a.rotation.iter().all(|x| x.is_finite())
                && a.angular.iter().all(|x| x.is_finite())
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentDerivative {
    pub centroid: Point,
    pub velocity: Point,
    pub rotation: Matrix,
    pub angular: SkewMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub agents: Vec<AgentDerivative>,
    /// Inter-species pairs found at (numerically) coincident centroids.
    pub coincident_pairs: usize,
}

impl StateDerivative {
    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.agents.iter().position(|a| {
            !(a.centroid.iter().all(|x| x.is_finite())
                && a.velocity.iter().all(|x| x.is_finite())
                && a.rotation.iter().all(|x| x.is_finite())
                && a.angular.as_matrix().iter().all(|x| x.is_finite()))
        })
    }
}

/// Anything the integrator can step.
pub trait VectorField {
    fn derivative(&self, phase: &Phase) -> Result<StateDerivative, DynamicsError>;
}

/// `(κ/2N) Σ_k w_k (O^k O^iᵀ − O^i O^kᵀ)` with `N = rotations.len()`.
pub fn coupling_term(i: usize, rotations: &[Matrix], weights: &[f64], kappa: f64) -> SkewMatrix {
    let d = rotations[i].nrows();
    let weighted = rotations
        .iter()
        .zip(weights)
        .fold(Matrix::zeros(d, d), |acc, (o, &w)| acc + o * w);
    coupling_from_sum(&weighted, &rotations[i], kappa, rotations.len())
}

fn coupling_from_sum(sum: &Matrix, oi: &Matrix, kappa: f64, n: usize) -> SkewMatrix {
    // (κ/2N)(A − Aᵀ) = (κ/N)·skew(A), A = (Σ w_k O^k) O^iᵀ
    let a = sum * oi.transpose();
    SkewMatrix::from_antisymmetrized(antisymmetrize(&a) * (kappa / n as f64))
}

/// `(κ/N) Σ_k (x^k − x^i)` for every member of `group`.
fn consensus_pull(phase: &Phase, group: &[usize], kappa: f64) -> Vec<Point> {
    let n = group.len() as f64;
    group
        .iter()
        .map(|&i| {
            let xi = &phase.agents[i].centroid;
            let sum = group
                .iter()
                .fold(Point::zeros(xi.len()), |acc, &k| acc + (&phase.agents[k].centroid - xi));
            sum * (kappa / n)
        })
        .collect()
}

/// Lohe couplings for every member of `group`; `scales` switches on the
/// `s^k/s^i` weights.
fn lohe_couplings(phase: &Phase, group: &[usize], kappa: f64, scales: Option<&[f64]>) -> Vec<SkewMatrix> {
    let n = group.len();
    let d = phase.agents[group[0]].rotation.nrows();
    match scales {
        None => {
            let sum = group
                .iter()
                .fold(Matrix::zeros(d, d), |acc, &k| acc + &phase.agents[k].rotation);
            group
                .iter()
                .map(|&i| coupling_from_sum(&sum, &phase.agents[i].rotation, kappa, n))
                .collect()
        }
        Some(s) => group
            .iter()
            .map(|&i| {
                let sum = group.iter().fold(Matrix::zeros(d, d), |acc, &k| {
                    acc + &phase.agents[k].rotation * (s[k] / s[i])
                });
                coupling_from_sum(&sum, &phase.agents[i].rotation, kappa, n)
            })
            .collect(),
    }
}

/// `Ȯ = W O`, `Ẇ = (−γ W + C)/m`.
fn lohe_second_order(a: &AgentPhase, coupling: &SkewMatrix, p: &ModelParams) -> (Matrix, SkewMatrix) {
    let d_rot = &a.angular * &a.rotation;
    let d_ang = (coupling.as_matrix() - &a.angular * p.gamma) / p.m;
    (d_rot, SkewMatrix::from_antisymmetrized(antisymmetrize(&d_ang)))
}

/// Spring force on `x` from `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairForce {
    pub force: Point,
    /// The centroids are closer than [`COINCIDENCE_EPS`]; force set to zero.
    pub coincident: bool,
}

/// `κ₂(‖y − x‖ − L)(y − x)/‖y − x‖`.
pub fn hetero_force(x: &Point, y: &Point, kappa2: f64, rest_length: f64) -> PairForce {
    let diff = y - x;
    let dist = diff.norm();
    if dist <= COINCIDENCE_EPS {
        return PairForce {
            force: Point::zeros(x.len()),
            coincident: true,
        };
    }
    PairForce {
        force: diff * (kappa2 * (dist - rest_length) / dist),
        coincident: false,
    }
}

/// A configured system: variant, parameters and the static species/scale
/// structure taken from an initial state.
#[derive(Debug, Clone)]
pub struct Model {
    variant: Variant,
    params: ModelParams,
    groups: Vec<Vec<usize>>,
    scales: Vec<f64>,
}

impl Model {
    pub fn new(variant: Variant, params: ModelParams, state: &EnsembleState) -> Result<Self, DynamicsError> {
        params.check(variant)?;
        let species = state.species_count();
        let expected = if variant == Variant::Hetero { 2 } else { 1 };
        if species != expected {
            return Err(DynamicsError::SpeciesCount {
                variant,
                expected,
                found: species,
            });
        }
        let groups: Vec<Vec<usize>> = (0..species).map(|s| state.members(s)).collect();
        if let Some(s) = groups.iter().position(|g| g.is_empty()) {
            return Err(DynamicsError::EmptySpecies(s));
        }
        Ok(Self {
            variant,
            params,
            groups,
            scales: state.agents().iter().map(|a| a.scale).collect(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    fn agent_count(&self) -> usize {
        self.scales.len()
    }
}

impl VectorField for Model {
    fn derivative(&self, phase: &Phase) -> Result<StateDerivative, DynamicsError> {
        if phase.agents.len() != self.agent_count() {
            return Err(DynamicsError::AgentCount {
                expected: self.agent_count(),
                found: phase.agents.len(),
            });
        }
        let p = &self.params;
        let d = phase.agents[0].centroid.len();
        let mut out: Vec<Option<AgentDerivative>> = vec![None; phase.agents.len()];
        let mut coincident_pairs = 0;
        let scales = (self.variant == Variant::Similar).then_some(self.scales.as_slice());

        for (g, group) in self.groups.iter().enumerate() {
            let pulls = consensus_pull(phase, group, p.kappa);
            let couplings = lohe_couplings(phase, group, p.kappa, scales);
            let other = (self.groups.len() == 2).then(|| &self.groups[1 - g]);
            for ((&i, pull), coupling) in group.iter().zip(pulls).zip(&couplings) {
                let a = &phase.agents[i];
                let deriv = match self.variant {
                    Variant::Order1 => AgentDerivative {
                        centroid: pull,
                        velocity: Point::zeros(d),
                        rotation: coupling.as_matrix() * &a.rotation,
                        angular: SkewMatrix::zeros(d),
                    },
                    Variant::Order2 | Variant::Similar | Variant::Hetero => {
                        let mut force = pull - &a.velocity * p.gamma;
                        if let (Some(other), true) = (other, p.kappa2 != 0.0) {
                            let n_other = other.len() as f64;
                            let mut spring = Point::zeros(d);
                            for &l in other {
                                let pf = hetero_force(&a.centroid, &phase.agents[l].centroid, p.kappa2, p.rest_length);
                                coincident_pairs += usize::from(pf.coincident);
                                spring += pf.force;
                            }
                            force += spring / n_other;
                        }
                        let (rotation, angular) = lohe_second_order(a, coupling, p);
                        AgentDerivative {
                            centroid: a.velocity.clone(),
                            velocity: force / p.m,
                            rotation,
                            angular,
                        }
                    }
                };
                out[i] = Some(deriv);
            }
        }
        let derivative = StateDerivative {
            agents: out.into_iter().map(|a| a.expect("every agent belongs to a group")).collect(),
            coincident_pairs,
        };
        if let Some(agent) = derivative.first_non_finite() {
            return Err(DynamicsError::NonFinite { agent });
        }
        Ok(derivative)
    }
}

/// Translational part of an agent's derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidRate {
    pub centroid: Point,
    pub velocity: Point,
}

/// Rotational part of an agent's derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationRate {
    pub rotation: Matrix,
    pub angular: SkewMatrix,
}

fn all_agents(state: &EnsembleState) -> Vec<usize> {
    (0..state.len()).collect()
}

/// `ẋ̄ = v`, `m v̇ = −γ v + (κ/N) Σ_k (x̄^k − x̄^i)`.
pub fn rhs_centroid_order2(state: &EnsembleState, p: &ModelParams) -> Result<Vec<CentroidRate>, DynamicsError> {
    if p.m <= 0.0 {
        return Err(DynamicsError::ZeroInertia {
            variant: Variant::Order2,
        });
    }
    let phase = Phase::from_state(state);
    let pulls = consensus_pull(&phase, &all_agents(state), p.kappa);
    Ok(phase
        .agents
        .iter()
        .zip(pulls)
        .map(|(a, pull)| CentroidRate {
            centroid: a.velocity.clone(),
            velocity: (pull - &a.velocity * p.gamma) / p.m,
        })
        .collect())
}

/// `ẋ̄ = (κ/N) Σ_k (x̄^k − x̄^i)`.
pub fn rhs_centroid_order1(state: &EnsembleState, p: &ModelParams) -> Vec<Point> {
    consensus_pull(&Phase::from_state(state), &all_agents(state), p.kappa)
}

/// Second-order Lohe flow in `(O, W)` form with unit weights.
pub fn rhs_lohe_order2(state: &EnsembleState, p: &ModelParams) -> Result<Vec<RotationRate>, DynamicsError> {
    lohe_order2_weighted(state, p, None)
}

fn lohe_order2_weighted(
    state: &EnsembleState,
    p: &ModelParams,
    scales: Option<&[f64]>,
) -> Result<Vec<RotationRate>, DynamicsError> {
    if p.m <= 0.0 {
        return Err(DynamicsError::ZeroInertia {
            variant: Variant::Order2,
        });
    }
    let phase = Phase::from_state(state);
    let couplings = lohe_couplings(&phase, &all_agents(state), p.kappa, scales);
    Ok(phase
        .agents
        .iter()
        .zip(&couplings)
        .map(|(a, c)| {
            let (rotation, angular) = lohe_second_order(a, c, p);
            RotationRate { rotation, angular }
        })
        .collect())
}

/// First-order Lohe flow `Ȯ^i = C_i O^i` with unit weights.
pub fn rhs_lohe_order1(state: &EnsembleState, p: &ModelParams) -> Vec<Matrix> {
    let phase = Phase::from_state(state);
    lohe_couplings(&phase, &all_agents(state), p.kappa, None)
        .iter()
        .zip(&phase.agents)
        .map(|(c, a)| c.as_matrix() * &a.rotation)
        .collect()
}

/// Full derivative of the similar-shape system (weights `s^k/s^i`).
pub fn rhs_similar(state: &EnsembleState, p: &ModelParams) -> Result<StateDerivative, DynamicsError> {
    Model::new(Variant::Similar, *p, state)?.derivative(&Phase::from_state(state))
}

/// Full derivative of the two-species system.
pub fn rhs_hetero(state: &EnsembleState, p: &ModelParams) -> Result<StateDerivative, DynamicsError> {
    Model::new(Variant::Hetero, *p, state)?.derivative(&Phase::from_state(state))
}

/// Rotation-rate angle `θ̇` of a planar agent from `Ȯ = θ̇ J O`.
pub fn planar_angular_rate(d_rotation: &Matrix, rotation: &Matrix) -> f64 {
    let w = d_rotation * rotation.transpose();
    0.5 * (w[(1, 0)] - w[(0, 1)])
}
