//! Exact linear assignment on dense float costs, plus the upsampling
//! operator that lifts an M-point observation to N model points.
//!
//! The solver is a shortest-augmenting-path method in the Jonker-Volgenant
//! family (the same scheme scipy uses for `linear_sum_assignment`). It
//! handles rectangular L x N problems with L <= N natively, runs in
//! O(L N^2), and returns the exact optimum for any finite costs.

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::rng::RandomSource;

/// Dense L x N cost matrix, row-major.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::SizeMismatch(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("cost entry not finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        debug_assert!(data.iter().all(|c| c.is_finite()));
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Result of `solve_lap`: `mapping[i]` is the column matched to row i, and
/// `cost` is the sum of the matched entries in row order.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub mapping: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost injective assignment of all L rows to distinct columns.
///
/// Ties between equal-cost augmenting paths resolve to the lowest column
/// index, so the result is deterministic.
pub fn solve_lap(c: &CostMatrix) -> Result<Assignment> {
    let (l, n) = (c.rows, c.cols);
    if l > n {
        return Err(Error::Infeasible(format!(
            "{l} rows cannot be injectively assigned to {n} columns"
        )));
    }

    let mut u = vec![0.0_f64; l]; // row duals
    let mut v = vec![0.0_f64; n]; // column duals
    let mut col_of_row = vec![usize::MAX; l];
    let mut row_of_col = vec![usize::MAX; n];

    let mut shortest = vec![f64::INFINITY; n];
    let mut path_row = vec![usize::MAX; n]; // row that last relaxed column j
    let mut done = vec![false; n];
    let mut visited_rows: Vec<usize> = Vec::with_capacity(l);

    for cur_row in 0..l {
        shortest.fill(f64::INFINITY);
        path_row.fill(usize::MAX);
        done.fill(false);
        visited_rows.clear();

        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink;
        loop {
            visited_rows.push(i);
            let mut lowest = f64::INFINITY;
            let mut j_low = usize::MAX;
            for j in 0..n {
                if done[j] {
                    continue;
                }
                let r = min_val + c.at(i, j) - u[i] - v[j];
                if r < shortest[j] {
                    shortest[j] = r;
                    path_row[j] = i;
                }
                // Strict < with the ascending scan keeps the lowest column
                // among ties.
                if shortest[j] < lowest {
                    lowest = shortest[j];
                    j_low = j;
                }
            }
            debug_assert!(j_low != usize::MAX, "finite costs guarantee progress");
            min_val = lowest;
            done[j_low] = true;
            match row_of_col[j_low] {
                usize::MAX => {
                    sink = j_low;
                    break;
                }
                owner => i = owner,
            }
        }

        u[cur_row] += min_val;
        for &r in &visited_rows {
            if r != cur_row {
                u[r] += min_val - shortest[col_of_row[r]];
            }
        }
        for j in 0..n {
            if done[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let r = path_row[j];
            row_of_col[j] = r;
            let freed = col_of_row[r];
            col_of_row[r] = j;
            if r == cur_row {
                break;
            }
            j = freed;
        }
    }

    let cost = (0..l).map(|i| c.at(i, col_of_row[i])).sum();
    Ok(Assignment {
        mapping: col_of_row,
        cost,
    })
}

/// Index map lifting an M-point cloud to N points.
#[derive(Debug, Clone, PartialEq)]
pub struct Upsampler {
    indices: Vec<usize>,
    source_len: usize,
}

impl Upsampler {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn target_len(&self) -> usize {
        self.indices.len()
    }
}

/// Draw an upsampler from M source points to N targets.
///
/// For N >= M a random permutation of all M indices fills the first M
/// slots and the rest are drawn uniformly with replacement, so every
/// observed point is used at least once. For N < M (downsampling) the N
/// indices are distinct, drawn uniformly without replacement.
pub fn make_upsampler(m: usize, n: usize, rng: &mut RandomSource) -> Result<Upsampler> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput(
            "upsampler needs at least one source and one target point".into(),
        ));
    }
    let indices = if n >= m {
        let mut idx: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut idx);
        idx.reserve(n - m);
        for _ in m..n {
            idx.push(rng.index(m));
        }
        idx
    } else {
        // Partial Fisher-Yates: the first n slots end up as a uniform
        // without-replacement draw from 0..m.
        let mut pool: Vec<usize> = (0..m).collect();
        for i in 0..n {
            let j = i + rng.index(m - i);
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    };
    Ok(Upsampler {
        indices,
        source_len: m,
    })
}

/// Materialize `output_i = y[indices[i]]`.
pub fn apply_upsampler<const D: usize>(
    u: &Upsampler,
    y: &PointCloud<D>,
) -> Result<PointCloud<D>> {
    if y.len() != u.source_len {
        return Err(Error::SizeMismatch(format!(
            "upsampler was built for {} source points, got {}",
            u.source_len,
            y.len()
        )));
    }
    let pts = u.indices.iter().map(|&i| y.points()[i]).collect();
    Ok(PointCloud::from_raw(pts))
}
