//! Observation energies and their exact gradients.
//!
//! Three forward models compare a candidate cloud x against what was
//! observed: 2D projections under a known rotation, a coarse 3D model, and
//! a 3D subunit. Each energy is a squared Frobenius residual minimized
//! over an unknown correspondence, solved exactly as a linear assignment
//! on squared distances. Gradients treat the optimal assignment as locally
//! constant, which is the true gradient wherever the optimum is unique.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{apply_upsampler, make_upsampler, solve_lap, Assignment, CostMatrix, Upsampler};
use crate::error::{Error, Result};
use crate::geom::{project, Cloud2, Cloud3, Rotation};
use crate::rng::RandomSource;

#[derive(Debug, Clone)]
pub enum ObservationKind {
    /// 2D points seen through a known orthogonal transform.
    Projection { points: Cloud2, rotation: Rotation },
    /// Low-resolution 3D stand-in for the whole object.
    Coarse { points: Cloud3 },
    /// A contiguous piece of the object, in model coordinates.
    Subunit { points: Cloud3 },
}

impl ObservationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObservationKind::Projection { .. } => "projection",
            ObservationKind::Coarse { .. } => "coarse",
            ObservationKind::Subunit { .. } => "subunit",
        }
    }
}

/// One observation plus its energy weight and (for projection/coarse) the
/// upsampler lifting it to model size. The upsampler is drawn once, at
/// construction, so the energy stays a fixed deterministic function across
/// every evaluation.
#[derive(Debug, Clone)]
pub struct Observation {
    kind: ObservationKind,
    weight: Option<f64>,
    upsample_seed: u64,
    upsampler: Option<Upsampler>,
}

impl Observation {
    pub fn projection(
        points: Cloud2,
        rotation: Rotation,
        weight: Option<f64>,
        upsample_seed: u64,
        n_model: usize,
    ) -> Result<Self> {
        check_weight(weight)?;
        if points.is_empty() {
            return Err(Error::InvalidInput("projection has no points".into()));
        }
        let upsampler = make_upsampler(
            points.len(),
            n_model,
            &mut RandomSource::new(upsample_seed),
        )?;
        Ok(Self {
            kind: ObservationKind::Projection { points, rotation },
            weight,
            upsample_seed,
            upsampler: Some(upsampler),
        })
    }

    pub fn coarse(
        points: Cloud3,
        weight: Option<f64>,
        upsample_seed: u64,
        n_model: usize,
    ) -> Result<Self> {
        check_weight(weight)?;
        if points.is_empty() {
            return Err(Error::InvalidInput("coarse observation has no points".into()));
        }
        let upsampler = make_upsampler(
            points.len(),
            n_model,
            &mut RandomSource::new(upsample_seed),
        )?;
        Ok(Self {
            kind: ObservationKind::Coarse { points },
            weight,
            upsample_seed,
            upsampler: Some(upsampler),
        })
    }

    pub fn subunit(points: Cloud3, weight: Option<f64>, n_model: usize) -> Result<Self> {
        check_weight(weight)?;
        if points.is_empty() {
            return Err(Error::InvalidInput("subunit has no points".into()));
        }
        if points.len() > n_model {
            return Err(Error::SizeMismatch(format!(
                "subunit has {} points but the model only has {n_model}",
                points.len()
            )));
        }
        Ok(Self {
            kind: ObservationKind::Subunit { points },
            weight,
            upsample_seed: 0,
            upsampler: None,
        })
    }

    pub fn kind(&self) -> &ObservationKind {
        &self.kind
    }

    pub fn weight(&self) -> Option<f64> {
        self.weight
    }

    pub fn upsample_seed(&self) -> u64 {
        self.upsample_seed
    }
}

fn check_weight(weight: Option<f64>) -> Result<()> {
    if let Some(w) = weight {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidInput(format!(
                "observation weight must be finite and nonnegative, got {w}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct ObservationSet {
    observations: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(observations: Vec<Observation>) -> Self {
        Self { observations }
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Energy value, the assignment that realized it, and the gradient with
/// respect to every model point.
#[derive(Debug, Clone)]
pub struct EnergyResult {
    pub energy: f64,
    pub assignment: Assignment,
    pub gradient: Vec<[f64; 3]>,
}

#[inline]
fn sq2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
fn sq3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// min over permutations of || P U y - (x R)_{:, 0..2} ||_F^2.
///
/// The gradient lands on matched model points only, pushed back through
/// the first two columns of R; a z-translation of x never changes it.
pub fn projection_energy(x: &Cloud3, obs: &Observation) -> Result<EnergyResult> {
    let (points, rotation) = match &obs.kind {
        ObservationKind::Projection { points, rotation } => (points, rotation),
        other => {
            return Err(Error::InvalidInput(format!(
                "expected projection observation, got {}",
                other.name()
            )))
        }
    };
    let up = upsampled2(obs, points, x.len())?;
    let proj = project(x, rotation);
    let n = x.len();
    let cost = CostMatrix::from_fn(n, n, |i, j| sq2(up.points()[i], proj.points()[j]));
    let assignment = solve_lap(&cost)?;
    let r = rotation.matrix();
    let mut gradient = vec![[0.0; 3]; n];
    for (i, &m) in assignment.mapping.iter().enumerate() {
        let d = [
            proj.points()[m][0] - up.points()[i][0],
            proj.points()[m][1] - up.points()[i][1],
        ];
        for c in 0..3 {
            gradient[m][c] += 2.0 * (d[0] * r[c][0] + d[1] * r[c][1]);
        }
    }
    Ok(EnergyResult {
        energy: assignment.cost,
        assignment,
        gradient,
    })
}

/// min over permutations of || P U y_cg - x ||_F^2.
pub fn coarse_energy(x: &Cloud3, obs: &Observation) -> Result<EnergyResult> {
    let points = match &obs.kind {
        ObservationKind::Coarse { points } => points,
        other => {
            return Err(Error::InvalidInput(format!(
                "expected coarse observation, got {}",
                other.name()
            )))
        }
    };
    let up = upsampled3(obs, points, x.len())?;
    let n = x.len();
    let cost = CostMatrix::from_fn(n, n, |i, j| sq3(up.points()[i], x.points()[j]));
    let assignment = solve_lap(&cost)?;
    let mut gradient = vec![[0.0; 3]; n];
    for (i, &m) in assignment.mapping.iter().enumerate() {
        for c in 0..3 {
            gradient[m][c] += 2.0 * (x.points()[m][c] - up.points()[i][c]);
        }
    }
    Ok(EnergyResult {
        energy: assignment.cost,
        assignment,
        gradient,
    })
}

/// min over partial permutations of || P x - y_su ||_F^2: each subunit
/// point claims a distinct model point; unmatched model points feel no
/// gradient.
pub fn subunit_energy(x: &Cloud3, obs: &Observation) -> Result<EnergyResult> {
    let points = match &obs.kind {
        ObservationKind::Subunit { points } => points,
        other => {
            return Err(Error::InvalidInput(format!(
                "expected subunit observation, got {}",
                other.name()
            )))
        }
    };
    let (l, n) = (points.len(), x.len());
    if l > n {
        return Err(Error::Infeasible(format!(
            "subunit has {l} points but the model only has {n}"
        )));
    }
    let cost = CostMatrix::from_fn(l, n, |i, j| sq3(points.points()[i], x.points()[j]));
    let assignment = solve_lap(&cost)?;
    let mut gradient = vec![[0.0; 3]; n];
    for (i, &m) in assignment.mapping.iter().enumerate() {
        for c in 0..3 {
            gradient[m][c] += 2.0 * (x.points()[m][c] - points.points()[i][c]);
        }
    }
    Ok(EnergyResult {
        energy: assignment.cost,
        assignment,
        gradient,
    })
}

/// Dispatch on the observation kind.
pub fn observation_energy(x: &Cloud3, obs: &Observation) -> Result<EnergyResult> {
    match &obs.kind {
        ObservationKind::Projection { .. } => projection_energy(x, obs),
        ObservationKind::Coarse { .. } => coarse_energy(x, obs),
        ObservationKind::Subunit { .. } => subunit_energy(x, obs),
    }
}

/// Weighted sum of all observation energies and gradients. Observations
/// missing an explicit weight get 1/|set|. Evaluation runs in parallel
/// across observations; the reduction is in observation order, so the
/// result does not depend on the thread count.
pub fn combined_energy(x: &Cloud3, set: &ObservationSet) -> Result<(f64, Vec<[f64; 3]>)> {
    let n = x.len();
    if set.is_empty() {
        return Ok((0.0, vec![[0.0; 3]; n]));
    }
    let default_w = 1.0 / set.len() as f64;
    let per_obs: Vec<Result<(f64, EnergyResult)>> = set
        .observations
        .par_iter()
        .map(|obs| {
            let r = observation_energy(x, obs)?;
            Ok((obs.weight.unwrap_or(default_w), r))
        })
        .collect();
    let mut energy = 0.0;
    let mut gradient = vec![[0.0; 3]; n];
    for item in per_obs {
        let (w, r) = item?;
        energy += w * r.energy;
        for (g, gr) in gradient.iter_mut().zip(&r.gradient) {
            for c in 0..3 {
                g[c] += w * gr[c];
            }
        }
    }
    Ok((energy, gradient))
}

fn upsampled2(obs: &Observation, points: &Cloud2, n: usize) -> Result<Cloud2> {
    let u = obs
        .upsampler
        .as_ref()
        .expect("projection/coarse observations always carry an upsampler");
    if u.target_len() != n {
        return Err(Error::SizeMismatch(format!(
            "observation was prepared for {} model points, got {n}",
            u.target_len()
        )));
    }
    apply_upsampler(u, points)
}

fn upsampled3(obs: &Observation, points: &Cloud3, n: usize) -> Result<Cloud3> {
    let u = obs
        .upsampler
        .as_ref()
        .expect("projection/coarse observations always carry an upsampler");
    if u.target_len() != n {
        return Err(Error::SizeMismatch(format!(
            "observation was prepared for {} model points, got {n}",
            u.target_len()
        )));
    }
    apply_upsampler(u, points)
}

// ---------------------------------------------------------------------------
// Observation file format.

#[derive(Serialize, Deserialize)]
struct ObsFile {
    observations: Vec<ObsEntry>,
}

#[derive(Serialize, Deserialize)]
struct ObsEntry {
    kind: String,
    points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[[f64; 3]; 3]>,
    weight: Option<f64>,
    upsample_seed: Option<u64>,
}

/// Serialize a set to the observation JSON schema.
pub fn observations_to_json(set: &ObservationSet) -> String {
    let entries = set
        .observations
        .iter()
        .map(|obs| {
            let (points, rotation): (Vec<Vec<f64>>, Option<[[f64; 3]; 3]>) = match &obs.kind {
                ObservationKind::Projection { points, rotation } => (
                    points.points().iter().map(|p| p.to_vec()).collect(),
                    Some(*rotation.matrix()),
                ),
                ObservationKind::Coarse { points } => {
                    (points.points().iter().map(|p| p.to_vec()).collect(), None)
                }
                ObservationKind::Subunit { points } => {
                    (points.points().iter().map(|p| p.to_vec()).collect(), None)
                }
            };
            ObsEntry {
                kind: obs.kind.name().to_string(),
                points,
                rotation,
                weight: obs.weight,
                upsample_seed: obs.upsampler.as_ref().map(|_| obs.upsample_seed),
            }
        })
        .collect();
    serde_json::to_string_pretty(&ObsFile {
        observations: entries,
    })
    .expect("observation serialization cannot fail")
}

/// Parse the observation JSON schema and build a set ready to evaluate
/// against clouds of `n_model` points. Missing upsample seeds default to 0.
pub fn observations_from_json(text: &str, n_model: usize) -> Result<ObservationSet> {
    let file: ObsFile =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("observation file: {e}")))?;
    let mut observations = Vec::with_capacity(file.observations.len());
    for (i, entry) in file.observations.into_iter().enumerate() {
        let seed = entry.upsample_seed.unwrap_or(0);
        let obs = match entry.kind.as_str() {
            "projection" => {
                let rotation = entry.rotation.ok_or_else(|| {
                    Error::Format(format!("observation {i}: projection needs a rotation"))
                })?;
                let rotation = Rotation::new(rotation)
                    .map_err(|e| Error::Format(format!("observation {i}: {e}")))?;
                let points = points_2d(&entry.points, i)?;
                Observation::projection(points, rotation, entry.weight, seed, n_model)?
            }
            "coarse" => {
                let points = points_3d(&entry.points, i)?;
                Observation::coarse(points, entry.weight, seed, n_model)?
            }
            "subunit" => {
                let points = points_3d(&entry.points, i)?;
                Observation::subunit(points, entry.weight, n_model)?
            }
            other => {
                return Err(Error::Format(format!(
                    "observation {i}: unknown kind {other:?}"
                )))
            }
        };
        observations.push(obs);
    }
    Ok(ObservationSet::new(observations))
}

fn points_2d(raw: &[Vec<f64>], obs_index: usize) -> Result<Cloud2> {
    let mut pts = Vec::with_capacity(raw.len());
    for p in raw {
        if p.len() != 2 {
            return Err(Error::Format(format!(
                "observation {obs_index}: projection points must have 2 coordinates, got {}",
                p.len()
            )));
        }
        pts.push([p[0], p[1]]);
    }
    Cloud2::new(pts)
}

fn points_3d(raw: &[Vec<f64>], obs_index: usize) -> Result<Cloud3> {
    let mut pts = Vec::with_capacity(raw.len());
    for p in raw {
        if p.len() != 3 {
            return Err(Error::Format(format!(
                "observation {obs_index}: points must have 3 coordinates, got {}",
                p.len()
            )));
        }
        pts.push([p[0], p[1], p[2]]);
    }
    Cloud3::new(pts)
}

pub fn save_observations(set: &ObservationSet, path: impl AsRef<std::path::Path>) -> Result<()> {
    crate::error::write_atomic(path, observations_to_json(set).as_bytes())
}

pub fn load_observations(
    path: impl AsRef<std::path::Path>,
    n_model: usize,
) -> Result<ObservationSet> {
    observations_from_json(&crate::error::read_file(path)?, n_model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_orthogonal;
    use rand::RngCore;

    fn random_cloud(n: usize, rng: &mut RandomSource) -> Cloud3 {
        Cloud3::from_raw((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect())
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        fn rec(n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if cur.len() == n {
                out.push(cur.clone());
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(n, cur, used, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(n, &mut Vec::new(), &mut vec![false; n], &mut out);
        out
    }

    #[test]
    fn projection_self_consistency_is_zero() {
        let mut rng = RandomSource::new(31);
        let x = random_cloud(8, &mut rng);
        let r = random_orthogonal(&mut rng, false);
        let y = project(&x, &r);
        let obs = Observation::projection(y, r, None, 77, x.len()).unwrap();
        let res = projection_energy(&x, &obs).unwrap();
        assert_eq!(res.energy, 0.0);
    }

    #[test]
    fn projection_matches_permutation_enumeration() {
        let mut rng = RandomSource::new(32);
        for _ in 0..10 {
            let x = random_cloud(3, &mut rng);
            let y = Cloud2::from_raw((0..3).map(|_| [rng.normal(), rng.normal()]).collect());
            let r = random_orthogonal(&mut rng, false);
            let obs = Observation::projection(y.clone(), r, None, rng.next_u64(), 3).unwrap();
            let res = projection_energy(&x, &obs).unwrap();

            let up = upsampled2(&obs, &y, 3).unwrap();
            let proj = project(&x, &r);
            let best = permutations(3)
                .iter()
                .map(|p| {
                    (0..3)
                        .map(|i| sq2(up.points()[i], proj.points()[p[i]]))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((res.energy - best).abs() < 1e-9, "{} vs {best}", res.energy);
        }
    }

    #[test]
    fn projection_ignores_z_translation() {
        let mut rng = RandomSource::new(33);
        let x = random_cloud(6, &mut rng);
        let y = Cloud2::from_raw((0..6).map(|_| [rng.normal(), rng.normal()]).collect());
        let obs = Observation::projection(y, Rotation::identity(), None, 5, 6).unwrap();
        let e0 = projection_energy(&x, &obs).unwrap().energy;
        let shifted = Cloud3::from_raw(
            x.points()
                .iter()
                .map(|p| [p[0], p[1], p[2] + 3.75])
                .collect(),
        );
        let e1 = projection_energy(&shifted, &obs).unwrap().energy;
        assert!((e0 - e1).abs() < 1e-12);
    }

    #[test]
    fn coarse_single_origin_point() {
        let x = Cloud3::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        let y = Cloud3::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let obs = Observation::coarse(y, None, 0, 2).unwrap();
        let res = coarse_energy(&x, &obs).unwrap();
        assert!((res.energy - 2.0).abs() < 1e-12);
        // Both model points are pulled straight toward the origin.
        assert!((res.gradient[0][0] - 2.0).abs() < 1e-12);
        assert!((res.gradient[1][0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn coarse_matches_enumeration() {
        let mut rng = RandomSource::new(34);
        for _ in 0..10 {
            let x = random_cloud(4, &mut rng);
            let y = random_cloud(2, &mut rng);
            let obs = Observation::coarse(y.clone(), None, rng.next_u64(), 4).unwrap();
            let res = coarse_energy(&x, &obs).unwrap();

            let up = upsampled3(&obs, &y, 4).unwrap();
            let best = permutations(4)
                .iter()
                .map(|p| {
                    (0..4)
                        .map(|i| sq3(up.points()[i], x.points()[p[i]]))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((res.energy - best).abs() < 1e-9);
        }
    }

    #[test]
    fn subunit_nearest_point_wins() {
        let x = Cloud3::new(vec![[3.0, 4.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let y = Cloud3::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let obs = Observation::subunit(y, None, 2).unwrap();
        let res = subunit_energy(&x, &obs).unwrap();
        assert!((res.energy - 1.0).abs() < 1e-12);
        assert_eq!(res.assignment.mapping, vec![1]);
        assert_eq!(res.gradient[0], [0.0, 0.0, 0.0]);
        assert!((res.gradient[1][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn subunit_exact_subset_is_zero() {
        let mut rng = RandomSource::new(35);
        let x = random_cloud(6, &mut rng);
        let y = Cloud3::new(vec![x.points()[4], x.points()[1], x.points()[5]]).unwrap();
        let obs = Observation::subunit(y, None, 6).unwrap();
        let res = subunit_energy(&x, &obs).unwrap();
        assert_eq!(res.energy, 0.0);
        assert_eq!(res.assignment.mapping, vec![4, 1, 5]);
    }

    #[test]
    fn subunit_matches_enumeration() {
        let mut rng = RandomSource::new(36);
        for _ in 0..10 {
            let x = random_cloud(4, &mut rng);
            let y = random_cloud(2, &mut rng);
            let obs = Observation::subunit(y.clone(), None, 4).unwrap();
            let res = subunit_energy(&x, &obs).unwrap();
            let mut best = f64::INFINITY;
            for a in 0..4 {
                for b in 0..4 {
                    if a == b {
                        continue;
                    }
                    let cost = sq3(y.points()[0], x.points()[a]) + sq3(y.points()[1], x.points()[b]);
                    best = best.min(cost);
                }
            }
            assert!((res.energy - best).abs() < 1e-9);
        }
    }

    #[test]
    fn energies_invariant_under_model_permutation() {
        let mut rng = RandomSource::new(37);
        let x = random_cloud(7, &mut rng);
        let r = random_orthogonal(&mut rng, true);
        let set = ObservationSet::new(vec![
            Observation::projection(
                Cloud2::from_raw((0..4).map(|_| [rng.normal(), rng.normal()]).collect()),
                r,
                None,
                rng.next_u64(),
                7,
            )
            .unwrap(),
            Observation::coarse(random_cloud(3, &mut rng), None, rng.next_u64(), 7).unwrap(),
            Observation::subunit(random_cloud(2, &mut rng), None, 7).unwrap(),
        ]);
        let (e0, _) = combined_energy(&x, &set).unwrap();
        let mut shuffled: Vec<[f64; 3]> = x.points().to_vec();
        rng.shuffle(&mut shuffled);
        let (e1, _) = combined_energy(&Cloud3::from_raw(shuffled), &set).unwrap();
        assert!((e0 - e1).abs() < 1e-9, "{e0} vs {e1}");
    }

    #[test]
    fn combined_empty_and_singleton() {
        let mut rng = RandomSource::new(38);
        let x = random_cloud(5, &mut rng);
        let (e, g) = combined_energy(&x, &ObservationSet::default()).unwrap();
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|row| row.iter().all(|&v| v == 0.0)));

        let obs = Observation::coarse(random_cloud(2, &mut rng), Some(1.0), 3, 5).unwrap();
        let single = observation_energy(&x, &obs).unwrap();
        let set = ObservationSet::new(vec![obs]);
        let (e, _) = combined_energy(&x, &set).unwrap();
        assert!((e - single.energy).abs() < 1e-12);
    }

    #[test]
    fn combined_defaults_to_uniform_weights() {
        let mut rng = RandomSource::new(39);
        let x = random_cloud(5, &mut rng);
        let a = Observation::coarse(random_cloud(2, &mut rng), None, 1, 5).unwrap();
        let b = Observation::subunit(random_cloud(3, &mut rng), None, 5).unwrap();
        let ea = observation_energy(&x, &a).unwrap().energy;
        let eb = observation_energy(&x, &b).unwrap().energy;
        let (e, _) = combined_energy(&x, &ObservationSet::new(vec![a, b])).unwrap();
        assert!((e - 0.5 * (ea + eb)).abs() < 1e-12);
    }

    #[test]
    fn multi_projection_energy_is_additive() {
        let mut rng = RandomSource::new(40);
        let x = random_cloud(6, &mut rng);
        let mut obs = Vec::new();
        for _ in 0..3 {
            let r = random_orthogonal(&mut rng, false);
            let y = Cloud2::from_raw((0..4).map(|_| [rng.normal(), rng.normal()]).collect());
            obs.push(Observation::projection(y, r, Some(1.0), rng.next_u64(), 6).unwrap());
        }
        let sum: f64 = obs
            .iter()
            .map(|o| observation_energy(&x, o).unwrap().energy)
            .sum();
        let (joint, _) = combined_energy(&x, &ObservationSet::new(obs)).unwrap();
        assert!((joint - sum).abs() < 1e-9);
    }

    #[test]
    fn energy_equals_residual_under_stored_assignment() {
        let mut rng = RandomSource::new(41);
        let x = random_cloud(5, &mut rng);
        let y = random_cloud(3, &mut rng);
        let obs = Observation::coarse(y.clone(), None, 9, 5).unwrap();
        let res = coarse_energy(&x, &obs).unwrap();
        let up = upsampled3(&obs, &y, 5).unwrap();
        let residual: f64 = res
            .assignment
            .mapping
            .iter()
            .enumerate()
            .map(|(i, &m)| sq3(up.points()[i], x.points()[m]))
            .sum();
        assert!((res.energy - residual).abs() < 1e-9);
    }

    fn fd_gradient(x: &Cloud3, set: &ObservationSet, h: f64) -> Vec<[f64; 3]> {
        let mut g = vec![[0.0; 3]; x.len()];
        for n in 0..x.len() {
            for c in 0..3 {
                let mut plus = x.points().to_vec();
                plus[n][c] += h;
                let mut minus = x.points().to_vec();
                minus[n][c] -= h;
                let (ep, _) = combined_energy(&Cloud3::from_raw(plus), set).unwrap();
                let (em, _) = combined_energy(&Cloud3::from_raw(minus), set).unwrap();
                g[n][c] = (ep - em) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = RandomSource::new(42);
        let x = random_cloud(8, &mut rng);
        let r = random_orthogonal(&mut rng, false);
        let set = ObservationSet::new(vec![
            Observation::projection(
                Cloud2::from_raw((0..5).map(|_| [rng.normal(), rng.normal()]).collect()),
                r,
                None,
                rng.next_u64(),
                8,
            )
            .unwrap(),
            Observation::coarse(random_cloud(4, &mut rng), None, rng.next_u64(), 8).unwrap(),
            Observation::subunit(random_cloud(3, &mut rng), Some(2.0), 8).unwrap(),
        ]);
        let (_, grad) = combined_energy(&x, &set).unwrap();
        let fd = fd_gradient(&x, &set, 1e-5);
        let num: f64 = grad
            .iter()
            .zip(&fd)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]) * (a[c] - b[c])))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd
            .iter()
            .flat_map(|b| b.iter().map(|v| v * v))
            .sum::<f64>()
            .sqrt();
        assert!(num / den < 1e-5, "relative gradient error {}", num / den);
    }

    #[test]
    fn json_round_trip_preserves_energies() {
        let mut rng = RandomSource::new(43);
        let x = random_cloud(6, &mut rng);
        let r = random_orthogonal(&mut rng, true);
        let set = ObservationSet::new(vec![
            Observation::projection(
                Cloud2::from_raw((0..4).map(|_| [rng.normal(), rng.normal()]).collect()),
                r,
                Some(0.7),
                123,
                6,
            )
            .unwrap(),
            Observation::coarse(random_cloud(2, &mut rng), None, 456, 6).unwrap(),
            Observation::subunit(random_cloud(3, &mut rng), None, 6).unwrap(),
        ]);
        let json = observations_to_json(&set);
        let back = observations_from_json(&json, 6).unwrap();
        let (e0, g0) = combined_energy(&x, &set).unwrap();
        let (e1, g1) = combined_energy(&x, &back).unwrap();
        assert_eq!(e0, e1);
        assert_eq!(g0, g1);

        // Schema spot checks.
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let obs = value["observations"].as_array().unwrap();
        assert_eq!(obs[0]["kind"], "projection");
        assert!(obs[0]["rotation"].is_array());
        assert!(obs[1]["rotation"].is_null());
        assert!(obs[1]["weight"].is_null());
        assert_eq!(obs[0]["upsample_seed"], 123);
        assert!(obs[2]["upsample_seed"].is_null());
    }

    #[test]
    fn json_rejects_malformed_entries() {
        let missing_rotation = r#"{"observations":[{"kind":"projection","points":[[0,0]],"weight":null,"upsample_seed":1}]}"#;
        assert!(observations_from_json(missing_rotation, 4).is_err());
        let bad_kind = r#"{"observations":[{"kind":"volume","points":[[0,0,0]],"weight":null,"upsample_seed":null}]}"#;
        assert!(observations_from_json(bad_kind, 4).is_err());
        let bad_dims = r#"{"observations":[{"kind":"coarse","points":[[0,0]],"weight":null,"upsample_seed":null}]}"#;
        assert!(observations_from_json(bad_dims, 4).is_err());
    }

    #[test]
    fn wrong_model_size_is_an_error() {
        let mut rng = RandomSource::new(44);
        let obs = Observation::coarse(random_cloud(3, &mut rng), None, 2, 8).unwrap();
        let x = random_cloud(5, &mut rng);
        assert!(matches!(
            coarse_energy(&x, &obs),
            Err(Error::SizeMismatch(_))
        ));
    }
}
