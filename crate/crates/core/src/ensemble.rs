//! Polytope ensembles as centroids plus rotations of one shared reference shape.
//!
//! Every agent's vertices are `x_α = x̄ + s·O·r_α`, so the state carries only
//! `(x̄, ẋ̄, O, W = ȮOᵀ, s)` per agent and the displacements `r_α` once per species.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::matso::{self, MatError, Matrix, Rotation, SkewMatrix};

pub type Point = DVector<f64>;

/// Default absolute tolerance on distance-matrix entries for congruence.
pub const CONGRUENCE_TOLERANCE: f64 = 1e-8;

/// Relative singular-value cutoff for the general-position rank test.
pub const GENERAL_POSITION_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("empty vertex cloud")]
    EmptyCloud,
    #[error("no clouds supplied")]
    NoClouds,
    #[error("cloud {index} has {found} vertices in dimension {dim}, expected {expected_n} in dimension {expected_dim}")]
    LabelMismatch {
        index: usize,
        found: usize,
        dim: usize,
        expected_n: usize,
        expected_dim: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cloud {index} is not congruent to the reference (fit residual {residual:e})")]
    NotCongruent { index: usize, residual: f64 },
    #[error("cloud {index} matches the reference only by a reflection, not reachable by rotation")]
    ReflectionOnly { index: usize },
    #[error("reference displacements do not sum to zero (|sum| = {norm:e})")]
    NotCentered { norm: f64 },
    #[error("scale of agent {index} must be positive, got {scale}")]
    NonPositiveScale { index: usize, scale: f64 },
    #[error("ensemble has no agents")]
    NoAgents,
    #[error("agent {index} refers to species {species} but only {count} shapes exist")]
    UnknownSpecies {
        index: usize,
        species: usize,
        count: usize,
    },
    #[error("agent {index}: {source}")]
    Agent { index: usize, source: MatError },
}

/// Labelled vertex set `{x_α}`; the label is the vector index.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexCloud {
    pub vertices: Vec<Point>,
}

impl VertexCloud {
    pub fn new(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vertices.first().map_or(0, |v| v.len())
    }
}

/// Zero-mean displacements `r_α` shared by all agents of one species.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceShape {
    displacements: Vec<Point>,
}

impl ReferenceShape {
    pub fn new(displacements: Vec<Point>) -> Result<Self, EnsembleError> {
        let first = displacements.first().ok_or(EnsembleError::EmptyCloud)?;
        let d = first.len();
        if let Some(bad) = displacements.iter().find(|r| r.len() != d) {
            return Err(EnsembleError::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        let sum = displacements
            .iter()
            .fold(Point::zeros(d), |acc, r| acc + r);
        let scale = displacements.iter().map(|r| r.norm()).fold(0.0, f64::max);
        if sum.norm() > 1e-12 * scale.max(f64::MIN_POSITIVE) && sum.norm() > 0.0 {
            return Err(EnsembleError::NotCentered { norm: sum.norm() });
        }
        Ok(Self { displacements })
    }

    /// Displacements of a vertex set from its own centroid.
    pub fn from_vertices(cloud: &VertexCloud) -> Result<Self, EnsembleError> {
        let c = centroid(cloud)?;
        let displacements: Vec<Point> = cloud.vertices.iter().map(|x| x - &c).collect();
        // Re-centre to absorb the rounding of the mean.
        let d = c.len();
        let n = displacements.len() as f64;
        let drift = displacements.iter().fold(Point::zeros(d), |acc, r| acc + r) / n;
        Self::new(displacements.into_iter().map(|r| r - &drift).collect())
    }

    pub fn displacements(&self) -> &[Point] {
        &self.displacements
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.displacements[0].len()
    }

    /// `max_α ‖r_α‖`.
    pub fn radius(&self) -> f64 {
        self.displacements.iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// The d×n matrix with columns `r_α`.
    pub fn as_columns(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.displacements)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub centroid: Point,
    pub velocity: Point,
    pub rotation: Rotation,
    /// `W = ȮOᵀ`.
    pub angular: SkewMatrix,
    pub scale: f64,
}

impl AgentState {
    /// Agent at rest with unit scale.
    pub fn at_rest(centroid: Point, rotation: Rotation) -> Self {
        let d = centroid.len();
        Self {
            velocity: Point::zeros(d),
            angular: SkewMatrix::zeros(rotation.dim()),
            centroid,
            rotation,
            scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }
}

/// N agents, each tagged with a species whose reference shape it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    agents: Vec<AgentState>,
    species: Vec<usize>,
    shapes: Vec<ReferenceShape>,
}

impl EnsembleState {
    /// Single-species ensemble.
    pub fn new(agents: Vec<AgentState>, shape: ReferenceShape) -> Result<Self, EnsembleError> {
        let species = vec![0; agents.len()];
        Self::with_species(agents, species, vec![shape])
    }

    pub fn with_species(
        agents: Vec<AgentState>,
        species: Vec<usize>,
        shapes: Vec<ReferenceShape>,
    ) -> Result<Self, EnsembleError> {
        if agents.is_empty() {
            return Err(EnsembleError::NoAgents);
        }
        if species.len() != agents.len() {
            return Err(EnsembleError::DimensionMismatch {
                expected: agents.len(),
                found: species.len(),
            });
        }
        let d = agents[0].dim();
        for (index, (agent, &sp)) in agents.iter().zip(&species).enumerate() {
            if sp >= shapes.len() {
                return Err(EnsembleError::UnknownSpecies {
                    index,
                    species: sp,
                    count: shapes.len(),
                });
            }
            for found in [
                agent.dim(),
                agent.velocity.len(),
                agent.rotation.dim(),
                agent.angular.dim(),
                shapes[sp].dim(),
            ] {
                if found != d {
                    return Err(EnsembleError::DimensionMismatch { expected: d, found });
                }
            }
            if !(agent.scale > 0.0 && agent.scale.is_finite()) {
                return Err(EnsembleError::NonPositiveScale {
                    index,
                    scale: agent.scale,
                });
            }
        }
        Ok(Self {
            agents,
            species,
            shapes,
        })
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.agents[0].dim()
    }

    pub fn species(&self) -> &[usize] {
        &self.species
    }

    pub fn species_count(&self) -> usize {
        self.shapes.len()
    }

    pub fn shapes(&self) -> &[ReferenceShape] {
        &self.shapes
    }

    pub fn shape_of(&self, agent: usize) -> &ReferenceShape {
        &self.shapes[self.species[agent]]
    }

    /// Agent indices belonging to species `s`, in ensemble order.
    pub fn members(&self, s: usize) -> Vec<usize> {
        (0..self.agents.len())
            .filter(|&i| self.species[i] == s)
            .collect()
    }

    /// The sub-ensemble of one species, with a single shape.
    pub fn species_subset(&self, s: usize) -> Result<EnsembleState, EnsembleError> {
        let agents = self
            .members(s)
            .into_iter()
            .map(|i| self.agents[i].clone())
            .collect();
        EnsembleState::new(agents, self.shapes[s].clone())
    }

    pub fn vertices(&self, agent: usize) -> VertexCloud {
        reconstruct_unchecked(&self.agents[agent], self.shape_of(agent))
    }
}

pub fn centroid(cloud: &VertexCloud) -> Result<Point, EnsembleError> {
    let first = cloud.vertices.first().ok_or(EnsembleError::EmptyCloud)?;
    let sum = cloud
        .vertices
        .iter()
        .skip(1)
        .fold(first.clone(), |acc, x| acc + x);
    Ok(sum / cloud.len() as f64)
}

fn check_labels(clouds: &[VertexCloud]) -> Result<(usize, usize), EnsembleError> {
    let first = clouds.first().ok_or(EnsembleError::NoClouds)?;
    let (n, d) = (first.len(), first.dim());
    if n == 0 {
        return Err(EnsembleError::EmptyCloud);
    }
    for (index, c) in clouds.iter().enumerate() {
        if c.len() != n || c.vertices.iter().any(|x| x.len() != d) {
            return Err(EnsembleError::LabelMismatch {
                index,
                found: c.len(),
                dim: c.dim(),
                expected_n: n,
                expected_dim: d,
            });
        }
    }
    Ok((n, d))
}

/// Result of [`extract_reference`].
#[derive(Debug, Clone)]
pub struct Extraction {
    pub shape: ReferenceShape,
    pub rotations: Vec<Rotation>,
    pub centroids: Vec<Point>,
    /// Largest per-vertex fit error over all clouds.
    pub residual: f64,
}

/// Recovers a common reference shape (cloud 0 about its centroid), and for
/// each cloud the rotation and centroid placing that shape onto it.
pub fn extract_reference(clouds: &[VertexCloud], tol: f64) -> Result<Extraction, EnsembleError> {
    let (_, d) = check_labels(clouds)?;
    let shape = ReferenceShape::from_vertices(&clouds[0])?;
    let mut rotations = Vec::with_capacity(clouds.len());
    let mut centroids = Vec::with_capacity(clouds.len());
    let mut worst: f64 = 0.0;
    for (index, cloud) in clouds.iter().enumerate() {
        let c = centroid(cloud)?;
        if index == 0 {
            rotations.push(Rotation::identity(d));
            centroids.push(c);
            continue;
        }
        let targets: Vec<Point> = cloud.vertices.iter().map(|x| x - &c).collect();
        // H = Σ y_α r_αᵀ; the best rotation maximises tr(Oᵀ H).
        let mut h = Matrix::zeros(d, d);
        for (y, r) in targets.iter().zip(shape.displacements()) {
            h += y * r.transpose();
        }
        let rot = matso::special_polar_factor(&h);
        let residual = fit_residual(rot.as_matrix(), &shape, &targets);
        if residual > tol {
            let mirror = matso::orthogonal_polar_factor(&h);
            if mirror.determinant() < 0.0 && fit_residual(&mirror, &shape, &targets) <= tol {
                return Err(EnsembleError::ReflectionOnly { index });
            }
            return Err(EnsembleError::NotCongruent { index, residual });
        }
        worst = worst.max(residual);
        rotations.push(rot);
        centroids.push(c);
    }
    Ok(Extraction {
        shape,
        rotations,
        centroids,
        residual: worst,
    })
}

fn fit_residual(o: &Matrix, shape: &ReferenceShape, targets: &[Point]) -> f64 {
    shape
        .displacements()
        .iter()
        .zip(targets)
        .map(|(r, y)| (o * r - y).norm())
        .fold(0.0, f64::max)
}

/// `x_α = x̄ + s·O·r_α`.
pub fn reconstruct(agent: &AgentState, shape: &ReferenceShape) -> Result<VertexCloud, EnsembleError> {
    if agent.dim() != shape.dim() || agent.rotation.dim() != shape.dim() {
        return Err(EnsembleError::DimensionMismatch {
            expected: agent.dim(),
            found: shape.dim(),
        });
    }
    Ok(reconstruct_unchecked(agent, shape))
}

fn reconstruct_unchecked(agent: &AgentState, shape: &ReferenceShape) -> VertexCloud {
    let o = agent.rotation.as_matrix();
    VertexCloud::new(
        shape
            .displacements()
            .iter()
            .map(|r| &agent.centroid + (o * r) * agent.scale)
            .collect(),
    )
}

fn distance_matrix(cloud: &VertexCloud) -> DMatrix<f64> {
    let n = cloud.len();
    DMatrix::from_fn(n, n, |a, b| (&cloud.vertices[a] - &cloud.vertices[b]).norm())
}

/// True iff all pairwise vertex-distance matrices agree entrywise within `tol`.
pub fn check_congruence(clouds: &[VertexCloud], tol: f64) -> Result<bool, EnsembleError> {
    check_labels(clouds)?;
    let reference = distance_matrix(&clouds[0]);
    Ok(clouds[1..].iter().all(|c| {
        distance_matrix(c)
            .iter()
            .zip(reference.iter())
            .all(|(a, b)| (a - b).abs() <= tol)
    }))
}

/// True iff the displacements span R^d.
pub fn general_position_check(shape: &ReferenceShape) -> bool {
    let d = shape.dim();
    if shape.len() < d {
        return false;
    }
    let sv = shape.as_columns().svd(false, false).singular_values;
    let largest = sv.max();
    largest > 0.0 && sv.len() >= d && sv.min() > GENERAL_POSITION_TOLERANCE * largest
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matso::{random_rotation, SkewMatrix};
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(points: &[&[f64]]) -> VertexCloud {
        VertexCloud::new(points.iter().map(|p| Point::from_column_slice(p)).collect())
    }

    fn triangle() -> VertexCloud {
        cloud(&[&[0.0, 0.0], &[2.0, 0.0], &[1.0, 3.0]])
    }

    fn moved(c: &VertexCloud, rot: &Rotation, shift: &Point) -> VertexCloud {
        let m = centroid(c).unwrap();
        VertexCloud::new(
            c.vertices
                .iter()
                .map(|x| &m + rot.apply(&(x - &m)) + shift)
                .collect(),
        )
    }

    #[test]
    fn centroid_examples() {
        let p = dvector![1.5, -2.0];
        assert_eq!(centroid(&VertexCloud::new(vec![p.clone()])).unwrap(), p);
        assert_abs_diff_eq!(centroid(&triangle()).unwrap(), dvector![1.0, 1.0], epsilon = 1e-15);
        let t = dvector![4.0, -7.0];
        let shifted = VertexCloud::new(triangle().vertices.iter().map(|x| x + &t).collect());
        assert_abs_diff_eq!(
            centroid(&shifted).unwrap(),
            dvector![5.0, -6.0],
            epsilon = 1e-14
        );
        assert_eq!(
            centroid(&VertexCloud::new(vec![])),
            Err(EnsembleError::EmptyCloud)
        );
    }

    #[test]
    fn extraction_of_identical_clouds() {
        let ex = extract_reference(&[triangle(), triangle(), triangle()], CONGRUENCE_TOLERANCE).unwrap();
        for r in &ex.rotations {
            assert_abs_diff_eq!(r.as_matrix(), &Matrix::identity(2, 2), epsilon = 1e-12);
        }
        for c in &ex.centroids {
            assert_abs_diff_eq!(c, &dvector![1.0, 1.0], epsilon = 1e-14);
        }
    }

    #[test]
    fn extraction_recovers_known_rotation() {
        let r = Rotation::planar(0.7);
        let other = moved(&triangle(), &r, &dvector![3.0, 1.0]);
        let ex = extract_reference(&[triangle(), other], CONGRUENCE_TOLERANCE).unwrap();
        assert!((ex.rotations[1].as_matrix() - r.as_matrix()).norm() < 1e-10);
        assert_abs_diff_eq!(ex.centroids[1], dvector![4.0, 2.0], epsilon = 1e-12);
    }

    #[test]
    fn extraction_rejects_scaled_cloud() {
        let big = VertexCloud::new(triangle().vertices.iter().map(|x| x * 2.0).collect());
        assert!(matches!(
            extract_reference(&[triangle(), big], CONGRUENCE_TOLERANCE),
            Err(EnsembleError::NotCongruent { index: 1, .. })
        ));
    }

    #[test]
    fn extraction_rejects_mirror_image() {
        let mirror = VertexCloud::new(
            triangle()
                .vertices
                .iter()
                .map(|x| dvector![-x[0], x[1]])
                .collect(),
        );
        assert_eq!(
            extract_reference(&[triangle(), mirror], CONGRUENCE_TOLERANCE).unwrap_err(),
            EnsembleError::ReflectionOnly { index: 1 }
        );
    }

    #[test]
    fn extraction_rejects_label_mismatch() {
        let two = cloud(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(
            extract_reference(&[triangle(), two], CONGRUENCE_TOLERANCE),
            Err(EnsembleError::LabelMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn extraction_round_trips_haar_clouds() {
        let base = cloud(&[&[0.0, 0.0, 0.0], &[1.0, 0.2, 0.0], &[0.3, 1.5, 0.1], &[0.2, 0.4, 2.0]]);
        let truths: Vec<Rotation> = (0..6).map(|s| random_rotation(s, 3)).collect();
        let clouds: Vec<VertexCloud> = truths
            .iter()
            .enumerate()
            .map(|(i, r)| moved(&base, &r.compose(&truths[0].transpose()), &dvector![i as f64, 0.0, -1.0]))
            .collect();
        // cloud 0 is base rotated by identity; others by R_i R_0ᵀ
        let ex = extract_reference(&clouds, CONGRUENCE_TOLERANCE).unwrap();
        assert!(general_position_check(&ex.shape));
        for (i, r) in truths.iter().enumerate() {
            let expect = r.compose(&truths[0].transpose());
            assert!((ex.rotations[i].as_matrix() - expect.as_matrix()).norm() <= 1e-8);
            let agent = AgentState::at_rest(ex.centroids[i].clone(), ex.rotations[i].clone());
            let back = reconstruct(&agent, &ex.shape).unwrap();
            for (a, b) in back.vertices.iter().zip(&clouds[i].vertices) {
                assert!((a - b).norm() <= 1e-9);
            }
        }
    }

    #[test]
    fn reconstruct_examples() {
        let shape = ReferenceShape::from_vertices(&triangle()).unwrap();
        let rest = AgentState::at_rest(Point::zeros(2), Rotation::identity(2));
        let out = reconstruct(&rest, &shape).unwrap();
        assert_eq!(out.vertices, shape.displacements().to_vec());

        let t = dvector![0.5, -1.0];
        let quarter = AgentState::at_rest(t.clone(), Rotation::planar(FRAC_PI_2));
        let out = reconstruct(&quarter, &shape).unwrap();
        for (x, r) in out.vertices.iter().zip(shape.displacements()) {
            assert_abs_diff_eq!(x, &(dvector![-r[1], r[0]] + &t), epsilon = 1e-14);
        }

        let wrong = AgentState::at_rest(Point::zeros(3), Rotation::identity(3));
        assert!(reconstruct(&wrong, &shape).is_err());
    }

    #[test]
    fn reconstruct_scales_distances() {
        let shape = ReferenceShape::from_vertices(&triangle()).unwrap();
        let mut agent = AgentState::at_rest(dvector![1.0, 1.0], Rotation::planar(0.3));
        agent.scale = 2.0;
        let out = reconstruct(&agent, &shape).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let got = (&out.vertices[a] - &out.vertices[b]).norm();
                let want = 2.0 * (&shape.displacements()[a] - &shape.displacements()[b]).norm();
                assert!((got - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }

    #[test]
    fn congruence_examples() {
        let t = triangle();
        assert!(check_congruence(&[t.clone(), t.clone()], CONGRUENCE_TOLERANCE).unwrap());
        let m = moved(&t, &Rotation::planar(2.0), &dvector![10.0, -3.0]);
        assert!(check_congruence(&[t.clone(), m], CONGRUENCE_TOLERANCE).unwrap());
        let mut bent = t.clone();
        bent.vertices[2][0] += 10.0 * CONGRUENCE_TOLERANCE;
        assert!(!check_congruence(&[t.clone(), bent], CONGRUENCE_TOLERANCE).unwrap());
        let two = cloud(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(check_congruence(&[t, two], CONGRUENCE_TOLERANCE).is_err());
    }

    #[test]
    fn general_position_examples() {
        let tri: Vec<Point> = (0..3)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                dvector![a.cos(), a.sin()]
            })
            .collect();
        assert!(general_position_check(&ReferenceShape::new(tri.clone()).unwrap()));
        let flat: Vec<Point> = tri.iter().map(|r| dvector![r[0], r[1], 0.0]).collect();
        assert!(!general_position_check(&ReferenceShape::new(flat).unwrap()));
        let rod = ReferenceShape::new(vec![dvector![1.0, 0.0], dvector![-1.0, 0.0]]).unwrap();
        assert!(!general_position_check(&rod));
    }

    #[test]
    fn reference_must_be_centered() {
        assert!(matches!(
            ReferenceShape::new(vec![dvector![1.0, 0.0], dvector![0.0, 0.0]]),
            Err(EnsembleError::NotCentered { .. })
        ));
    }

    #[test]
    fn ensemble_validation() {
        let shape = ReferenceShape::from_vertices(&triangle()).unwrap();
        assert_eq!(
            EnsembleState::new(vec![], shape.clone()).unwrap_err(),
            EnsembleError::NoAgents
        );
        let mut a = AgentState::at_rest(Point::zeros(2), Rotation::identity(2));
        a.scale = 0.0;
        assert!(matches!(
            EnsembleState::new(vec![a], shape.clone()),
            Err(EnsembleError::NonPositiveScale { .. })
        ));
        let b = AgentState {
            angular: SkewMatrix::zeros(2),
            ..AgentState::at_rest(Point::zeros(2), Rotation::identity(2))
        };
        let e = EnsembleState::with_species(vec![b], vec![1], vec![shape]);
        assert!(matches!(e, Err(EnsembleError::UnknownSpecies { .. })));
    }
}
