//! Point cloud and rotation primitives.
//!
//! Convention used across the whole crate: points are row vectors and a
//! rotation acts on the right, `moved = p * R`. Projection keeps the first
//! two coordinates of the rotated point. Model space is unitless; clouds
//! live in the [-1, 1] cube until physical scaling happens in `eval`.

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Dense cloud of D-dimensional points (D is 2 or 3 in practice).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<const D: usize> {
    points: Vec<[f64; D]>,
}

pub type Cloud2 = PointCloud<2>;
pub type Cloud3 = PointCloud<3>;

impl<const D: usize> PointCloud<D> {
    /// Build a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<[f64; D]>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "point {i} has a non-finite coordinate"
                )));
            }
        }
        Ok(Self { points })
    }

    /// Internal constructor for values that are finite by construction.
    pub(crate) fn from_raw(points: Vec<[f64; D]>) -> Self {
        debug_assert!(points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; D]] {
        &self.points
    }

    pub fn into_points(self) -> Vec<[f64; D]> {
        self.points
    }

    pub fn centroid(&self) -> [f64; D] {
        let mut c = [0.0; D];
        for p in &self.points {
            for (acc, v) in c.iter_mut().zip(p) {
                *acc += v;
            }
        }
        let n = self.points.len().max(1) as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }

    pub fn max_abs_coord(&self) -> f64 {
        self.points
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0_f64, |m, &c| m.max(c.abs()))
    }
}

/// 3x3 orthogonal matrix, row-major. Covers proper rotations (det +1) and
/// improper ones (det -1, a rotation composed with a reflection).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validate orthogonality (R^T R = I within 1e-9 per entry) and build.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        for row in &m {
            if row.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput("rotation entry not finite".into()));
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                // (R^T R)_{ij} = column_i . column_j
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > Self::ORTHO_TOL {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not orthogonal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_proper(&self) -> bool {
        self.det() > 0.0
    }

    /// Apply to a row vector: p * R.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            p[0] * m[0][0] + p[1] * m[1][0] + p[2] * m[2][0],
            p[0] * m[0][1] + p[1] * m[1][1] + p[2] * m[2][1],
            p[0] * m[0][2] + p[1] * m[1][2] + p[2] * m[2][2],
        ]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// Compose: applying the result equals applying `self` then `other`
    /// (p * self * other).
    pub fn then(&self, other: &Rotation) -> Self {
        let a = &self.m;
        let b = &other.m;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self { m: out }
    }
}

/// Haar-distributed orthogonal matrix via QR of an i.i.d. standard-normal
/// matrix. Gram-Schmidt with positive diagonal gives the Haar measure on
/// O(3); `proper` flips the last column when needed to land in SO(3).
pub fn random_orthogonal(rng: &mut RandomSource, proper: bool) -> Rotation {
    loop {
        let mut a = [[0.0; 3]; 3];
        for row in &mut a {
            for v in row.iter_mut() {
                *v = rng.normal();
            }
        }
        // Orthonormalize the columns of `a`.
        let mut q = [[0.0; 3]; 3];
        let mut ok = true;
        for j in 0..3 {
            let mut col = [a[0][j], a[1][j], a[2][j]];
            for k in 0..j {
                let dot = col[0] * q[0][k] + col[1] * q[1][k] + col[2] * q[2][k];
                for i in 0..3 {
                    col[i] -= dot * q[i][k];
                }
            }
            let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
            if norm < 1e-12 {
                ok = false;
                break;
            }
            for i in 0..3 {
                q[i][j] = col[i] / norm;
            }
        }
        if !ok {
            continue; // numerically degenerate draw, essentially impossible
        }
        let mut r = Rotation { m: q };
        if proper && r.det() < 0.0 {
            for row in &mut r.m {
                row[2] = -row[2];
            }
        }
        return r;
    }
}

/// Subtract the centroid, then divide all coordinates by the largest
/// absolute value so the cloud fills the [-1, 1] cube.
pub fn center_and_scale(cloud: &Cloud3) -> Result<Cloud3> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("empty cloud".into()));
    }
    let c = cloud.centroid();
    let mut pts: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let extent = pts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0_f64, |m, &v| m.max(v.abs()));
    if extent < 1e-12 {
        return Err(Error::InvalidInput("zero extent".into()));
    }
    for p in &mut pts {
        for v in p.iter_mut() {
            *v /= extent;
        }
    }
    Ok(Cloud3::from_raw(pts))
}

/// Rotate and keep the first two coordinates: output_i = (cloud_i * R)_{0,1}.
pub fn project(cloud: &Cloud3, r: &Rotation) -> Cloud2 {
    let pts = cloud
        .points()
        .iter()
        .map(|&p| {
            let q = r.apply(p);
            [q[0], q[1]]
        })
        .collect();
    Cloud2::from_raw(pts)
}

// ---------------------------------------------------------------------------
// xyz text format: one point per line, 2 or 3 whitespace-separated floats,
// '#' starts a comment line.

#[derive(Debug)]
pub enum XyzCloud {
    D2(Cloud2),
    D3(Cloud3),
}

pub fn parse_xyz(text: &str) -> Result<XyzCloud> {
    let mut dims: Option<usize> = None;
    let mut p2: Vec<[f64; 2]> = Vec::new();
    let mut p3: Vec<[f64; 3]> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut vals = [0.0_f64; 3];
        let mut count = 0;
        for tok in line.split_whitespace() {
            if count == 3 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "more than 3 columns".into(),
                });
            }
            vals[count] = tok.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad float {tok:?}"),
            })?;
            if !vals[count].is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite value {tok:?}"),
                });
            }
            count += 1;
        }
        if count < 2 {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected 2 or 3 columns".into(),
            });
        }
        match dims {
            None => dims = Some(count),
            Some(d) if d != count => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {d} columns, found {count}"),
                });
            }
            _ => {}
        }
        if count == 2 {
            p2.push([vals[0], vals[1]]);
        } else {
            p3.push(vals);
        }
    }
    match dims {
        Some(2) => Ok(XyzCloud::D2(Cloud2::from_raw(p2))),
        Some(3) => Ok(XyzCloud::D3(Cloud3::from_raw(p3))),
        _ => Err(Error::InvalidInput("no points in xyz input".into())),
    }
}

/// Parse and require a 3D cloud.
pub fn parse_xyz3(text: &str) -> Result<Cloud3> {
    match parse_xyz(text)? {
        XyzCloud::D3(c) => Ok(c),
        XyzCloud::D2(_) => Err(Error::InvalidInput("expected 3 columns, found 2".into())),
    }
}

pub fn format_xyz<const D: usize>(cloud: &PointCloud<D>) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        for (i, v) in p.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            // `{}` prints the shortest representation that round-trips.
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn load_xyz3(path: impl AsRef<std::path::Path>) -> Result<Cloud3> {
    parse_xyz3(&crate::error::read_file(path)?)
}

pub fn save_xyz<const D: usize>(
    cloud: &PointCloud<D>,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    crate::error::write_atomic(path, format_xyz(cloud).as_bytes())
}
