//! Data ingestion and simulation: PDB heavy-atom extraction, tied-covariance
//! mixture fitting, synthetic shape datasets, and observation simulation.

use crate::error::{Error, Result};
use crate::geom::{center_and_scale, project, random_orthogonal, Cloud3};
use crate::likelihood::{Observation, ObservationSet};
use crate::rng::RandomSource;
use rand::RngCore;
use rayon::prelude::*;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Atom,
    HetAtm,
}

/// One heavy atom read from a PDB file.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomRecord {
    pub element: String,
    pub position: [f64; 3],
    pub kind: RecordKind,
}

fn field(line: &str, lo: usize, hi: usize) -> &str {
    line.get(lo..hi.min(line.len())).unwrap_or("").trim()
}

/// Extract heavy atoms from PDB text using the fixed column layout: record
/// name in columns 1-6, coordinates in 31-38/39-46/47-54, element in 77-78
/// with the atom name (13-16) as fallback. Keeps ATOM records and non-water
/// HETATM records, drops hydrogen and deuterium, keeps only blank or 'A'
/// alternate locations, and reads the first model only.
pub fn parse_pdb(text: &str) -> Result<Vec<AtomRecord>> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches(['\r', ' ', '\t']);
        let name = field(line, 0, 6);
        if name == "ENDMDL" {
            break;
        }
        let kind = match name {
            "ATOM" => RecordKind::Atom,
            "HETATM" => RecordKind::HetAtm,
            _ => continue,
        };
        let altloc = line.as_bytes().get(16).copied().unwrap_or(b' ');
        if altloc != b' ' && altloc != b'A' {
            continue;
        }
        if field(line, 17, 20) == "HOH" {
            continue;
        }
        let coord = |lo: usize, hi: usize, axis: &str| -> Result<f64> {
            let s = field(line, lo, hi);
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: idx + 1,
                    msg: format!("bad {axis} coordinate {s:?}"),
                })
        };
        let position = [
            coord(30, 38, "x")?,
            coord(38, 46, "y")?,
            coord(46, 54, "z")?,
        ];
        let mut element = field(line, 76, 78).to_ascii_uppercase();
        if element.is_empty() {
            element = field(line, 12, 16)
                .chars()
                .find(|c| c.is_ascii_alphabetic())
                .map(|c| c.to_ascii_uppercase().to_string())
                .unwrap_or_default();
        }
        if element.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "cannot determine the element".into(),
            });
        }
        if element == "H" || element == "D" {
            continue;
        }
        records.push(AtomRecord { element, position, kind });
    }
    if records.is_empty() {
        return Err(Error::Format("no heavy atoms".into()));
    }
    Ok(records)
}

pub fn atoms_to_cloud(records: &[AtomRecord]) -> Result<Cloud3> {
    Cloud3::new(records.iter().map(|r| r.position).collect())
}

/// Gaussian mixture with one covariance matrix shared by every component.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub means: Cloud3,
    pub covariance: [[f64; 3]; 3],
    pub weights: Vec<f64>,
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let d = det3(m);
    if !(d.is_finite() && d > 0.0) {
        return None;
    }
    let inv_d = 1.0 / d;
    let cof = |a: usize, b: usize, c: usize, e: usize| m[a][b] * m[c][e] - m[a][e] * m[c][b];
    Some([
        [cof(1, 1, 2, 2) * inv_d, cof(0, 2, 2, 1) * inv_d, cof(0, 1, 1, 2) * inv_d],
        [cof(1, 2, 2, 0) * inv_d, cof(0, 0, 2, 2) * inv_d, cof(0, 2, 1, 0) * inv_d],
        [cof(1, 0, 2, 1) * inv_d, cof(0, 1, 2, 0) * inv_d, cof(0, 0, 1, 1) * inv_d],
    ])
}

fn quad_form(inv: &[[f64; 3]; 3], d: [f64; 3]) -> f64 {
    let mut q = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            q += d[i] * inv[i][j] * d[j];
        }
    }
    q
}

fn sample_covariance(points: &[[f64; 3]], mean: [f64; 3]) -> [[f64; 3]; 3] {
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let n = points.len() as f64;
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    cov
}

fn regularize(mut cov: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    // Relative boost keeps flat (coplanar) inputs invertible; the absolute
    // floor stops the collapse when every component sits on its own point
    // and the trace itself goes to zero.
    let reg = (1e-6 * (cov[0][0] + cov[1][1] + cov[2][2]) / 3.0).max(1e-12);
    for i in 0..3 {
        cov[i][i] += reg;
    }
    cov
}

/// k-means++ seeding: spread the initial centers out proportionally to
/// squared distance from the ones already chosen.
fn seed_centers(points: &[[f64; 3]], k: usize, rng: &mut RandomSource) -> Vec<[f64; 3]> {
    let mut centers = vec![points[rng.index(points.len())]];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|&p| dist2(p, centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            points[rng.index(points.len())]
        } else {
            let mut u = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            points[pick]
        };
        centers.push(next);
        for (i, &p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, next));
        }
    }
    centers
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn em_fit(points: &Cloud3, k: usize, rng: &mut RandomSource) -> Result<(GmmModel, Vec<f64>)> {
    let pts = points.points();
    let n = pts.len();
    let mut means = seed_centers(pts, k, rng);
    let mut weights = vec![1.0 / k as f64; k];
    let mut cov = regularize(sample_covariance(pts, points.centroid()));
    let mut logliks = Vec::new();
    let mut resp = vec![0.0; n * k];
    for _ in 0..200 {
        let inv = inv3(&cov).ok_or_else(|| {
            Error::InvalidInput("mixture covariance collapsed; the points are degenerate".into())
        })?;
        let log_norm = -0.5 * (3.0 * (std::f64::consts::TAU).ln() + det3(&cov).ln());
        let mut loglik = 0.0;
        for (i, &p) in pts.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for (j, c) in means.iter().enumerate() {
                let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                row[j] = weights[j].ln() + log_norm - 0.5 * quad_form(&inv, d);
                max = max.max(row[j]);
            }
            let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            loglik += max + sum.ln();
            for l in row.iter_mut() {
                *l = (*l - max).exp() / sum;
            }
        }
        let converged = logliks.last().map_or(false, |&prev| loglik - prev < 1e-6);
        logliks.push(loglik);
        if converged {
            break;
        }

        let mut nk = vec![0.0; k];
        let mut sums = vec![[0.0; 3]; k];
        for (i, &p) in pts.iter().enumerate() {
            for j in 0..k {
                let r = resp[i * k + j];
                nk[j] += r;
                for c in 0..3 {
                    sums[j][c] += r * p[c];
                }
            }
        }
        for j in 0..k {
            weights[j] = nk[j] / n as f64;
            if nk[j] > 0.0 {
                for c in 0..3 {
                    means[j][c] = sums[j][c] / nk[j];
                }
            }
        }
        let mut raw = [[0.0; 3]; 3];
        for (i, &p) in pts.iter().enumerate() {
            for (j, c) in means.iter().enumerate() {
                let r = resp[i * k + j];
                let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                for a in 0..3 {
                    for b in 0..3 {
                        raw[a][b] += r * d[a] * d[b];
                    }
                }
            }
        }
        for row in &mut raw {
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }
        cov = regularize(raw);
    }
    Ok((
        GmmModel {
            means: Cloud3::new(means)?,
            covariance: cov,
            weights,
        },
        logliks,
    ))
}

/// Fit a K-component mixture with a covariance shared across components:
/// k-means++ start, then EM until the log-likelihood gain drops below 1e-6
/// or 200 iterations. A small diagonal boost (1e-6 of the mean variance)
/// keeps the covariance invertible on flat inputs.
pub fn fit_gmm(points: &Cloud3, k: usize, rng: &mut RandomSource) -> Result<GmmModel> {
    if k == 0 {
        return Err(Error::InvalidInput("need at least one component".into()));
    }
    if k > points.len() {
        return Err(Error::SizeMismatch(format!(
            "cannot fit {k} components to {} points",
            points.len()
        )));
    }
    em_fit(points, k, rng).map(|(model, _)| model)
}

/// Hard k-means labels (k-means++ start, Lloyd iterations).
pub fn kmeans_labels(points: &Cloud3, k: usize, rng: &mut RandomSource) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidInput(format!(
            "k must be in 1..={}, got {k}",
            points.len()
        )));
    }
    let pts = points.points();
    let mut centers = seed_centers(pts, k, rng);
    let mut labels = vec![0usize; pts.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, &p) in pts.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (j, &c) in centers.iter().enumerate() {
                let d = dist2(p, c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![[0.0; 3]; k];
        for (i, &p) in pts.iter().enumerate() {
            counts[labels[i]] += 1;
            for c in 0..3 {
                sums[labels[i]][c] += p[c];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for c in 0..3 {
                    centers[j][c] = sums[j][c] / counts[j] as f64;
                }
            }
        }
    }
    Ok(labels)
}

/// Families of synthetic shapes for desk-scale training runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Blobs,
    Chairs,
    Helices,
    LShapes,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blobs" => Ok(Self::Blobs),
            "chairs" => Ok(Self::Chairs),
            "helices" => Ok(Self::Helices),
            "lshapes" => Ok(Self::LShapes),
            other => Err(Error::InvalidInput(format!(
                "unknown shape family {other:?}; expected blobs, chairs, helices, or lshapes"
            ))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Chairs => "chairs",
            SynthKind::Helices => "helices",
            SynthKind::LShapes => "lshapes",
        };
        f.write_str(name)
    }
}

fn box_point(rng: &mut RandomSource, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [
        rng.uniform_in(lo[0], hi[0]),
        rng.uniform_in(lo[1], hi[1]),
        rng.uniform_in(lo[2], hi[2]),
    ]
}

fn synth_one(kind: SynthKind, n_points: usize, rng: &mut RandomSource) -> Result<Cloud3> {
    let mut pts = Vec::with_capacity(n_points);
    match kind {
        SynthKind::Blobs => {
            // Four overlapping Gaussian lobes along a bent chain, jittered
            // per cloud, like a small molecule seen at low resolution. The
            // layout stays consistent across clouds so the family is
            // learnable as a prior rather than pure noise.
            let base = [
                [-0.9, -0.25, 0.15],
                [-0.3, 0.3, -0.1],
                [0.3, -0.3, -0.1],
                [0.9, 0.25, 0.15],
            ];
            let centers: Vec<[f64; 3]> = base
                .iter()
                .map(|c| {
                    [
                        c[0] + rng.uniform_in(-0.12, 0.12),
                        c[1] + rng.uniform_in(-0.12, 0.12),
                        c[2] + rng.uniform_in(-0.12, 0.12),
                    ]
                })
                .collect();
            let scales: Vec<f64> =
                (0..base.len()).map(|_| rng.uniform_in(0.16, 0.26)).collect();
            for i in 0..n_points {
                let l = i % base.len();
                pts.push([
                    centers[l][0] + scales[l] * rng.normal(),
                    centers[l][1] + scales[l] * rng.normal(),
                    centers[l][2] + scales[l] * rng.normal(),
                ]);
            }
        }
        SynthKind::Chairs => {
            let leg = rng.uniform_in(0.08, 0.16);
            let back_top = rng.uniform_in(1.9, 2.4);
            for _ in 0..n_points {
                let u = rng.uniform();
                let p = if u < 0.35 {
                    box_point(rng, [-1.0, -1.0, 0.9], [1.0, 1.0, 1.1])
                } else if u < 0.6 {
                    box_point(rng, [-1.0, 0.8, 1.1], [1.0, 1.0, back_top])
                } else {
                    let leg_idx = (((u - 0.6) / 0.4) * 4.0).min(3.0) as usize;
                    let cx = if leg_idx % 2 == 0 { -0.85 } else { 0.85 };
                    let cy = if leg_idx / 2 == 0 { -0.85 } else { 0.85 };
                    box_point(rng, [cx - leg, cy - leg, 0.0], [cx + leg, cy + leg, 0.9])
                };
                pts.push(p);
            }
        }
        SynthKind::Helices => {
            let strands = 1 + rng.index(2);
            let radius = rng.uniform_in(0.5, 0.9);
            let pitch = rng.uniform_in(0.25, 0.45);
            let turns = rng.uniform_in(2.0, 3.5);
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            for i in 0..n_points {
                let offset = if i % strands == 0 { 0.0 } else { std::f64::consts::PI };
                let theta = rng.uniform_in(0.0, turns * std::f64::consts::TAU);
                pts.push([
                    radius * (theta + phase + offset).cos() + 0.04 * rng.normal(),
                    radius * (theta + phase + offset).sin() + 0.04 * rng.normal(),
                    pitch * theta / std::f64::consts::TAU + 0.04 * rng.normal(),
                ]);
            }
        }
        SynthKind::LShapes => {
            let len_a = rng.uniform_in(1.2, 2.0);
            let len_b = rng.uniform_in(1.2, 2.0);
            let width = rng.uniform_in(0.3, 0.5);
            let p_a = len_a / (len_a + len_b);
            for _ in 0..n_points {
                let p = if rng.uniform() < p_a {
                    box_point(rng, [0.0, 0.0, 0.0], [len_a, width, width])
                } else {
                    box_point(rng, [0.0, 0.0, 0.0], [width, len_b, width])
                };
                pts.push(p);
            }
        }
    }
    center_and_scale(&Cloud3::new(pts)?)
}

/// Generate `count` clouds of `n_points` each, centered and scaled to the
/// [-1,1] cube. Instance k is built from its own RNG stream, so the dataset
/// is reproducible and generation parallelizes over instances.
pub fn synth_dataset(
    kind: SynthKind,
    count: usize,
    n_points: usize,
    rng: &mut RandomSource,
) -> Result<Vec<Cloud3>> {
    if n_points < 2 {
        return Err(Error::InvalidInput("shapes need at least two points".into()));
    }
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    seeds
        .into_par_iter()
        .map(|seed| synth_one(kind, n_points, &mut RandomSource::new(seed)))
        .collect()
}

/// What to simulate from a ground-truth cloud.
#[derive(Debug, Clone, Copy, Default)]
pub struct ObservationPlan {
    pub n_projections: usize,
    pub points_per_projection: usize,
    pub coarse_points: Option<usize>,
    pub subunit_size: Option<usize>,
}

/// Build synthetic observations of a cloud: projections are random
/// subsamples pushed through a random orthogonal transform with the
/// transform recorded; the coarse view is the means of a tied-covariance
/// mixture fit; the subunit is one k-means cluster chosen uniformly, with k
/// set so the mean cluster size is close to the requested size.
pub fn simulate_observations(
    cloud: &Cloud3,
    plan: &ObservationPlan,
    rng: &mut RandomSource,
) -> Result<ObservationSet> {
    let n = cloud.len();
    let mut observations = Vec::new();
    for _ in 0..plan.n_projections {
        let m = plan.points_per_projection;
        if m == 0 || m > n {
            return Err(Error::InvalidInput(format!(
                "projection wants {m} of {n} points"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let sub = Cloud3::new(idx[..m].iter().map(|&i| cloud.points()[i]).collect())?;
        let rot = random_orthogonal(rng, false);
        let pts = project(&sub, &rot);
        let seed = rng.next_u64();
        observations.push(Observation::projection(pts, rot, None, seed, n)?);
    }
    if let Some(k) = plan.coarse_points {
        let means = fit_gmm(cloud, k, rng)?.means;
        let seed = rng.next_u64();
        observations.push(Observation::coarse(means, None, seed, n)?);
    }
    if let Some(size) = plan.subunit_size {
        if size == 0 {
            return Err(Error::InvalidInput("subunit size must be positive".into()));
        }
        let k = ((n as f64 / size as f64).round() as usize).max(1);
        let labels = kmeans_labels(cloud, k, rng)?;
        let occupied: Vec<usize> = (0..k).filter(|j| labels.contains(j)).collect();
        let pick = occupied[rng.index(occupied.len())];
        let pts = Cloud3::new(
            cloud
                .points()
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == pick)
                .map(|(&p, _)| p)
                .collect(),
        )?;
        observations.push(Observation::subunit(pts, None, n)?);
    }
    Ok(ObservationSet::new(observations))
}
