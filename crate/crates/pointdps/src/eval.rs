//! Reconstruction and generation metrics, physical rescaling, and rigid
//! alignment by kernel correlation.
//!
//! Distances come in three flavors: Chamfer (nearest-neighbor both ways),
//! EMD (optimal bijection, via the assignment solver), and RMSD against a
//! reference structure, either per atom or under an optimal matching of
//! equally sized clouds.

use crate::assignment::{solve_lap, CostMatrix};
use crate::error::{Error, Result};
use crate::geom::{Cloud3, Rotation};
use rayon::prelude::*;

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// (1/N)(sum_n min_m ||x_n - y_m|| + sum_m min_n ||x_n - y_m||), unsquared.
pub fn chamfer(x: &Cloud3, y: &Cloud3) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::SizeMismatch(format!(
            "chamfer needs equally sized nonempty clouds, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let fwd: f64 = x
        .points()
        .iter()
        .map(|&p| {
            y.points()
                .iter()
                .map(|&q| dist2(p, q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    let bwd: f64 = y
        .points()
        .iter()
        .map(|&q| {
            x.points()
                .iter()
                .map(|&p| dist2(p, q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok((fwd + bwd) / x.len() as f64)
}

/// Minimum over bijections of the mean pointwise distance (unsquared).
pub fn emd(x: &Cloud3, y: &Cloud3) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::SizeMismatch(format!(
            "emd needs equally sized nonempty clouds, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let costs = CostMatrix::from_fn(x.len(), y.len(), |i, j| {
        dist2(x.points()[i], y.points()[j]).sqrt()
    });
    let a = solve_lap(&costs)?;
    Ok(a.cost / x.len() as f64)
}

/// Root-mean-square distance of the points from their centroid.
pub fn radius_of_gyration(cloud: &Cloud3) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let c = cloud.centroid();
    let ms: f64 = cloud.points().iter().map(|&p| dist2(p, c)).sum::<f64>() / cloud.len() as f64;
    ms.sqrt()
}

/// Center the cloud and scale it so its radius of gyration equals target_rg.
pub fn gyration_scale(model: &Cloud3, target_rg: f64) -> Result<Cloud3> {
    if !(target_rg.is_finite() && target_rg > 0.0) {
        return Err(Error::InvalidInput(format!("target Rg must be positive, got {target_rg}")));
    }
    let rg = radius_of_gyration(model);
    if rg < 1e-12 {
        return Err(Error::InvalidInput("cloud has zero radius of gyration".into()));
    }
    let c = model.centroid();
    let f = target_rg / rg;
    Ok(Cloud3::from_raw(
        model
            .points()
            .iter()
            .map(|p| [(p[0] - c[0]) * f, (p[1] - c[1]) * f, (p[2] - c[2]) * f])
            .collect(),
    ))
}

/// Proper rotation plus translation (and a uniform scale, kept at 1 by the
/// aligner; gyration scaling is a separate step).
#[derive(Debug, Clone)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: [f64; 3],
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            translation: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation.apply(p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }

    pub fn apply(&self, cloud: &Cloud3) -> Cloud3 {
        Cloud3::from_raw(cloud.points().iter().map(|&p| self.apply_point(p)).collect())
    }
}

/// Sum of Gaussian affinities between the two clouds.
pub fn kernel_correlation(a: &Cloud3, b: &Cloud3, bandwidth: f64) -> f64 {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    a.points()
        .iter()
        .map(|&p| {
            b.points()
                .iter()
                .map(|&q| (-dist2(p, q) * inv).exp())
                .sum::<f64>()
        })
        .sum()
}

// Column-vector helpers for the aligner; the public Rotation type acts on
// row vectors, so the matrix is transposed at the boundary.

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rodrigues formula for the rotation matrix of a rotation vector.
fn rodrigues(w: [f64; 3]) -> [[f64; 3]; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-8 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ];
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Orthonormalize the columns to scrub accumulated float drift.
fn reorthonormalize(m: &mut [[f64; 3]; 3]) {
    for j in 0..3 {
        let mut col = [m[0][j], m[1][j], m[2][j]];
        for k in 0..j {
            let dot = col[0] * m[0][k] + col[1] * m[1][k] + col[2] * m[2][k];
            for i in 0..3 {
                col[i] -= dot * m[i][k];
            }
        }
        let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
        for i in 0..3 {
            m[i][j] = col[i] / norm;
        }
    }
}

fn quaternion_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Deterministic covering of SO(3): the uniform quaternion map evaluated on
/// a centered lattice. 4 x 13 x 13 = 676 orientations.
fn orientation_grid() -> Vec<[[f64; 3]; 3]> {
    let tau = std::f64::consts::TAU;
    let mut grid = Vec::with_capacity(676);
    for i in 0..4 {
        let u1 = (2 * i + 1) as f64 / 8.0;
        for j in 0..13 {
            let u2 = tau * (2 * j + 1) as f64 / 26.0;
            for k in 0..13 {
                let u3 = tau * (2 * k + 1) as f64 / 26.0;
                let a = (1.0 - u1).sqrt();
                let b = u1.sqrt();
                grid.push(quaternion_to_matrix([
                    a * u2.sin(),
                    a * u2.cos(),
                    b * u3.sin(),
                    b * u3.cos(),
                ]));
            }
        }
    }
    grid
}

/// KC objective and its gradient with respect to a rotation-vector
/// perturbation (applied on the left of m) and the translation.
fn kc_objective_grad(
    model: &[[f64; 3]],
    target: &[[f64; 3]],
    m: &[[f64; 3]; 3],
    tau: [f64; 3],
    bandwidth: f64,
) -> (f64, [f64; 3], [f64; 3]) {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let inv_b2 = 1.0 / (bandwidth * bandwidth);
    let mut obj = 0.0;
    let mut g_w = [0.0; 3];
    let mut g_tau = [0.0; 3];
    for &p in model {
        let u = mat_vec(m, p);
        let r = [u[0] + tau[0], u[1] + tau[1], u[2] + tau[2]];
        let mut f = [0.0; 3];
        for &q in target {
            let d = [r[0] - q[0], r[1] - q[1], r[2] - q[2]];
            let k = (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) * inv).exp();
            obj += k;
            for c in 0..3 {
                f[c] += k * d[c];
            }
        }
        for c in 0..3 {
            g_tau[c] -= f[c] * inv_b2;
        }
        // d r / d w = [w]_x u, so the chain rule gives u x f.
        let c = cross(u, f);
        for i in 0..3 {
            g_w[i] -= c[i] * inv_b2;
        }
    }
    (obj, g_w, g_tau)
}

/// Gradient ascent with backtracking from one starting pose. Returns the
/// refined pose, its objective, and the objective after every accepted step
/// (non-decreasing by construction).
fn refine_pose(
    model: &[[f64; 3]],
    target: &[[f64; 3]],
    mut m: [[f64; 3]; 3],
    mut tau: [f64; 3],
    bandwidth: f64,
    max_iters: usize,
) -> ([[f64; 3]; 3], [f64; 3], f64, Vec<f64>) {
    let (mut obj, mut g_w, mut g_tau) = kc_objective_grad(model, target, &m, tau, bandwidth);
    let mut history = vec![obj];
    let mut step = 1.0;
    for _ in 0..max_iters {
        let g_norm2: f64 = g_w.iter().chain(g_tau.iter()).map(|v| v * v).sum();
        if g_norm2.sqrt() < 1e-12 {
            break;
        }
        // Scale so a unit step moves the pose a bounded amount.
        let scale = 1.0 / (1.0 + g_norm2.sqrt());
        let mut accepted = false;
        for _ in 0..30 {
            let s = step * scale;
            let w = [g_w[0] * s, g_w[1] * s, g_w[2] * s];
            let mut m_new = mat_mul(&rodrigues(w), &m);
            reorthonormalize(&mut m_new);
            let tau_new = [tau[0] + g_tau[0] * s, tau[1] + g_tau[1] * s, tau[2] + g_tau[2] * s];
            let (obj_new, gw_new, gt_new) =
                kc_objective_grad(model, target, &m_new, tau_new, bandwidth);
            if obj_new > obj {
                m = m_new;
                tau = tau_new;
                obj = obj_new;
                g_w = gw_new;
                g_tau = gt_new;
                history.push(obj);
                accepted = true;
                step = (step * 2.0).min(1e3);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (m, tau, obj, history)
}

fn centroid_of(points: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = points.len().max(1) as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Best proper-rigid alignment of `model` onto `target` by kernel
/// correlation: coarse search over a 676-orientation grid with
/// centroid-matched translation, then gradient refinement of the best few
/// candidates. Returns the transformed model and the transform itself.
pub fn kc_align(model: &Cloud3, target: &Cloud3, bandwidth: f64) -> Result<(Cloud3, RigidTransform)> {
    if model.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("cannot align empty clouds".into()));
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let mpts = model.points();
    let tpts = target.points();
    let t_cen = centroid_of(tpts);

    // Grid stage on a thinned model: the kernel sums only need to rank
    // orientations here, full precision comes from refinement.
    let stride = (mpts.len() / 48).max(1);
    let coarse: Vec<[f64; 3]> = mpts.iter().copied().step_by(stride).collect();
    let grid = orientation_grid();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut scored: Vec<(f64, usize)> = grid
        .par_iter()
        .enumerate()
        .map(|(gi, m)| {
            let rotated: Vec<[f64; 3]> = coarse.iter().map(|&p| mat_vec(m, p)).collect();
            let r_cen = centroid_of(&rotated);
            let tau = [t_cen[0] - r_cen[0], t_cen[1] - r_cen[1], t_cen[2] - r_cen[2]];
            let mut obj = 0.0;
            for r in &rotated {
                let s = [r[0] + tau[0], r[1] + tau[1], r[2] + tau[2]];
                for &q in tpts {
                    obj += (-dist2(s, q) * inv).exp();
                }
            }
            (obj, gi)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut best: Option<([[f64; 3]; 3], [f64; 3], f64)> = None;
    for &(_, gi) in scored.iter().take(5) {
        let m0 = grid[gi];
        let rotated: Vec<[f64; 3]> = mpts.iter().map(|&p| mat_vec(&m0, p)).collect();
        let r_cen = centroid_of(&rotated);
        let tau0 = [t_cen[0] - r_cen[0], t_cen[1] - r_cen[1], t_cen[2] - r_cen[2]];
        let (m, tau, obj, _) = refine_pose(mpts, tpts, m0, tau0, bandwidth, 200);
        if best.as_ref().map_or(true, |b| obj > b.2) {
            best = Some((m, tau, obj));
        }
    }
    let (mut m, tau, _) = best.unwrap();
    reorthonormalize(&mut m);

    // The internal matrix acts on column vectors; the public convention is
    // row vectors, so hand out the transpose.
    let row = [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ];
    let transform = RigidTransform {
        rotation: Rotation::new(row)?,
        translation: tau,
        scale: 1.0,
    };
    Ok((transform.apply(model), transform))
}

/// RMSD where every target atom is matched to its nearest model point.
pub fn rmsd_atomic(target_atoms: &Cloud3, model: &Cloud3) -> Result<f64> {
    if target_atoms.is_empty() || model.is_empty() {
        return Err(Error::InvalidInput("need nonempty clouds for RMSD".into()));
    }
    let ms: f64 = target_atoms
        .points()
        .iter()
        .map(|&a| {
            model
                .points()
                .iter()
                .map(|&p| dist2(a, p))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / target_atoms.len() as f64;
    Ok(ms.sqrt())
}

/// RMSD under the cost-optimal bijection between equally sized clouds.
pub fn rmsd_subsampled(target: &Cloud3, model: &Cloud3) -> Result<f64> {
    if target.len() != model.len() || target.is_empty() {
        return Err(Error::SizeMismatch(format!(
            "matched RMSD needs equal sizes, got {} and {}",
            target.len(),
            model.len()
        )));
    }
    let costs = CostMatrix::from_fn(target.len(), model.len(), |i, j| {
        dist2(target.points()[i], model.points()[j])
    });
    let a = solve_lap(&costs)?;
    Ok((a.cost / target.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GenerationReport {
    /// Leave-one-out nearest-neighbor accuracy in percent; 50 means the two
    /// sets are indistinguishable.
    pub one_nna: f64,
    /// Percentage of references that are the nearest reference of at least
    /// one sample.
    pub cov: f64,
    /// Mean over references of the Chamfer distance to the closest sample.
    pub mmd: f64,
}

/// 1-NNA, COV and MMD under the Chamfer distance.
pub fn generation_metrics(samples: &[Cloud3], refs: &[Cloud3]) -> Result<GenerationReport> {
    if samples.is_empty() || refs.is_empty() {
        return Err(Error::InvalidInput("need nonempty sample and reference sets".into()));
    }
    let union: Vec<&Cloud3> = samples.iter().chain(refs.iter()).collect();
    let n = union.len();
    let n_samples = samples.len();
    // Symmetric pairwise Chamfer matrix, rows computed in parallel.
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            for j in 0..n {
                if j > i {
                    row[j] = chamfer(union[i], union[j]).unwrap_or(f64::INFINITY);
                }
            }
            row
        })
        .collect();
    let cd = |i: usize, j: usize| if i <= j { rows[i][j] } else { rows[j][i] };

    let mut correct = 0usize;
    for i in 0..n {
        let mut best = f64::INFINITY;
        let mut arg = usize::MAX;
        for j in 0..n {
            if j != i && cd(i, j) < best {
                best = cd(i, j);
                arg = j;
            }
        }
        if (i < n_samples) == (arg < n_samples) {
            correct += 1;
        }
    }
    let one_nna = 100.0 * correct as f64 / n as f64;

    let mut covered = vec![false; refs.len()];
    for si in 0..n_samples {
        let mut best = f64::INFINITY;
        let mut arg = 0usize;
        for (ri, flag) in covered.iter().enumerate().take(refs.len()) {
            let _ = flag;
            let d = cd(si, n_samples + ri);
            if d < best {
                best = d;
                arg = ri;
            }
        }
        covered[arg] = true;
    }
    let cov = 100.0 * covered.iter().filter(|&&c| c).count() as f64 / refs.len() as f64;

    let mmd = (0..refs.len())
        .map(|ri| {
            (0..n_samples)
                .map(|si| cd(si, n_samples + ri))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / refs.len() as f64;

    Ok(GenerationReport { one_nna, cov, mmd })
}

#[derive(Debug, Clone)]
pub struct ModelEval {
    pub cd: f64,
    pub emd: f64,
    pub rmsd_atomic: f64,
    pub rmsd_subsampled: f64,
    pub transform: RigidTransform,
    pub aligned: Cloud3,
}

/// Full physical-space evaluation: scale the model to the target's radius of
/// gyration, align by kernel correlation against the subsampled target, then
/// measure. The subsampled target must match the model's size.
pub fn evaluate_model(
    model: &Cloud3,
    pdb_atoms: &Cloud3,
    subsampled_target: &Cloud3,
) -> Result<ModelEval> {
    let target_rg = radius_of_gyration(pdb_atoms);
    if target_rg < 1e-12 {
        return Err(Error::InvalidInput("target structure has zero extent".into()));
    }
    let scaled = gyration_scale(model, target_rg)?;
    let (aligned, transform) = kc_align(&scaled, subsampled_target, 0.1 * target_rg)?;
    Ok(ModelEval {
        cd: chamfer(&aligned, subsampled_target)?,
        emd: emd(&aligned, subsampled_target)?,
        rmsd_atomic: rmsd_atomic(pdb_atoms, &aligned)?,
        rmsd_subsampled: rmsd_subsampled(subsampled_target, &aligned)?,
        transform,
        aligned,
    })
}
