//! Pairing digits between two datasets: jittered distances, minimum-cost
//! assignment, and the match-quality report.
//!
//! A jittered distance is the minimum L2 distance over the nine shifts of
//! the second image by -1/0/+1 pixel per axis, with out-of-frame pixels
//! treated as background. Matching runs independently per class label:
//! a jittered-L2 cost matrix between same-label digits is solved with the
//! shortest-augmenting-path Hungarian algorithm (O(n^3); the textbook
//! O(n^4) version does not survive 6000x6000 class blocks).

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::DatasetBundle;
use crate::preprocess::Digit28;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cost matrix contains NaN at ({0}, {1})")]
    NanCost(usize, usize),
    #[error("cost matrix dimensions {rows}x{cols} do not match {len} entries")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// L2/Linf distance at the best of the nine single-pixel shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitteredDistance {
    pub l2: f64,
    pub linf: u8,
    /// (dx, dy) applied to the second image, each in {-1, 0, 1}.
    pub best_shift: (i8, i8),
}

fn shifted_ssd(a: &Digit28, b: &Digit28, dx: i32, dy: i32) -> (i64, u8) {
    let mut ssd = 0i64;
    let mut linf = 0i32;
    for r in 0..28i32 {
        let br = r - dy;
        for c in 0..28i32 {
            let bc = c - dx;
            let av = a.get(r as usize, c as usize) as i32;
            let bv = if (0..28).contains(&br) && (0..28).contains(&bc) {
                b.get(br as usize, bc as usize) as i32
            } else {
                0
            };
            let d = av - bv;
            ssd += (d * d) as i64;
            linf = linf.max(d.abs());
        }
    }
    (ssd, linf as u8)
}

/// Shift order: (0,0) first, then lexicographic (dy, dx). Strict
/// improvement only, so ties resolve to the earliest shift in this order.
const SHIFT_ORDER: [(i32, i32); 9] = [
    (0, 0),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Minimum L2 over the nine shifts of `b`; Linf reported at the same
/// shift.
pub fn jittered_distance(a: &Digit28, b: &Digit28) -> JitteredDistance {
    let mut best_ssd = i64::MAX;
    let mut best_linf = 0u8;
    let mut best = (0i32, 0i32);
    for (dy, dx) in SHIFT_ORDER {
        let (ssd, linf) = shifted_ssd(a, b, dx, dy);
        if ssd < best_ssd {
            best_ssd = ssd;
            best_linf = linf;
            best = (dx, dy);
        }
    }
    JitteredDistance {
        l2: (best_ssd as f64).sqrt(),
        linf: best_linf,
        best_shift: (best.0 as i8, best.1 as i8),
    }
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchError> {
        if rows * cols != data.len() {
            return Err(MatchError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| v.is_nan()) {
            return Err(MatchError::NanCost(pos / cols.max(1), pos % cols.max(1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn transposed(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Minimum-cost injective assignment of rows to columns. When rows exceed
/// columns, the surplus rows stay unassigned.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Shortest-augmenting-path Hungarian method with row/column potentials;
/// one Dijkstra-like scan per row gives O(rows * cols * min(rows, cols)).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MatchError> {
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Assignment {
            row_to_col: vec![None; cost.rows],
            total_cost: 0.0,
        });
    }
    if cost.rows > cost.cols {
        let t = cost.transposed();
        let flipped = hungarian(&t)?;
        let mut row_to_col = vec![None; cost.rows];
        for (c, assigned) in flipped.row_to_col.iter().enumerate() {
            if let Some(r) = assigned {
                row_to_col[*r] = Some(c);
            }
        }
        return Ok(Assignment {
            row_to_col,
            total_cost: flipped.total_cost,
        });
    }

    let n = cost.rows;
    let m = cost.cols;
    // 1-indexed arrays; index 0 is the virtual unassigned slot.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j]: row (1-based) assigned to column j
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // augment along the found path
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }

    let mut row_to_col = vec![None; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = Some(j - 1);
            total += cost.get(p[j] - 1, j - 1);
        }
    }
    Ok(Assignment {
        row_to_col,
        total_cost: total,
    })
}

/// Five-number summary using linear interpolation between order
/// statistics (the convention most statistics packages default to).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Compute quartiles of a non-empty sample.
pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("distances are never NaN"));
    let at = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if frac == 0.0 || lo + 1 >= sorted.len() {
            sorted[lo]
        } else {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        }
    };
    Some(Quartiles {
        min: sorted[0],
        q25: at(0.25),
        median: at(0.5),
        q75: at(0.75),
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: JitteredDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct JitterHistogram {
    pub zero_shift: usize,
    pub one_pixel_shift: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub pairs: Vec<MatchedPair>,
    pub l2_quartiles: Option<Quartiles>,
    pub linf_quartiles: Option<Quartiles>,
    pub jitter_histogram: JitterHistogram,
    /// Indices left over when class counts differ.
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

fn class_blocks(bundle: &DatasetBundle) -> BTreeMap<u8, Vec<usize>> {
    let mut blocks: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &label) in bundle.labels().iter().enumerate() {
        blocks.entry(label).or_default().push(i);
    }
    blocks
}

/// Match two datasets class by class and aggregate the pair statistics.
/// Digits of different labels are never paired.
pub fn match_datasets(a: &DatasetBundle, b: &DatasetBundle) -> Result<MatchReport, MatchError> {
    let blocks_a = class_blocks(a);
    let mut blocks_b = class_blocks(b);

    let mut pairs = Vec::new();
    let mut unmatched_a = Vec::new();
    let mut unmatched_b = Vec::new();

    for (label, idx_a) in &blocks_a {
        let idx_b = match blocks_b.remove(label) {
            Some(v) => v,
            None => {
                unmatched_a.extend_from_slice(idx_a);
                continue;
            }
        };
        let n = idx_a.len();
        let m = idx_b.len();
        let mut data = vec![0.0f64; n * m];
        data.par_chunks_mut(m).enumerate().for_each(|(r, row)| {
            let da = &a.images()[idx_a[r]];
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = jittered_distance(da, &b.images()[idx_b[c]]).l2;
            }
        });
        let assignment = hungarian(&CostMatrix::new(n, m, data)?)?;
        let mut used_b = vec![false; m];
        for (r, assigned) in assignment.row_to_col.iter().enumerate() {
            match assigned {
                Some(c) => {
                    used_b[*c] = true;
                    let distance =
                        jittered_distance(&a.images()[idx_a[r]], &b.images()[idx_b[*c]]);
                    pairs.push(MatchedPair {
                        index_a: idx_a[r],
                        index_b: idx_b[*c],
                        distance,
                    });
                }
                None => unmatched_a.push(idx_a[r]),
            }
        }
        for (c, used) in used_b.iter().enumerate() {
            if !used {
                unmatched_b.push(idx_b[c]);
            }
        }
    }
    for (_, idx_b) in blocks_b {
        unmatched_b.extend(idx_b);
    }

    let l2s: Vec<f64> = pairs.iter().map(|p| p.distance.l2).collect();
    let linfs: Vec<f64> = pairs.iter().map(|p| p.distance.linf as f64).collect();
    let mut histogram = JitterHistogram::default();
    for p in &pairs {
        if p.distance.best_shift == (0, 0) {
            histogram.zero_shift += 1;
        } else {
            histogram.one_pixel_shift += 1;
        }
    }
    Ok(MatchReport {
        pairs,
        l2_quartiles: quartiles(&l2s),
        linf_quartiles: quartiles(&linfs),
        jitter_histogram: histogram,
        unmatched_a,
        unmatched_b,
    })
}

/// One CSV row per matched pair: index_a, index_b, l2, linf, dx, dy.
pub fn write_pairs_csv(report: &MatchReport, w: &mut impl Write) -> Result<(), MatchError> {
    writeln!(w, "index_a,index_b,l2,linf,dx,dy")?;
    for p in &report.pairs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.index_a,
            p.index_b,
            p.distance.l2,
            p.distance.linf,
            p.distance.best_shift.0,
            p.distance.best_shift.1
        )?;
    }
    Ok(())
}
