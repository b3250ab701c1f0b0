//! 2D temporal score maps: construction from ground-truth moments,
//! multi-scale extraction, aggregation, and ranking.
//!
//! A cell (i, j) of an N x N map denotes the candidate moment starting at
//! i*tau and lasting (j+1)*tau. Cells with i + j + 1 > N run past the end of
//! the video and are invalid.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

const RANGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentInterval {
    pub start: f64,
    pub end: f64,
}

impl MomentInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start >= 0.0 && start < end) || !start.is_finite() || !end.is_finite() {
            return Err(Error::DegenerateMoment(start, end));
        }
        Ok(MomentInterval { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Interval intersection-over-union, with the union measured as the
    /// combined span minus the overlap.
    pub fn iou(&self, other: &MomentInterval) -> f64 {
        let inter = (self.end.min(other.end) - self.start.max(other.start)).max(0.0);
        let union = self.length() + other.length() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoGrid {
    pub n_segments: usize,
    pub unit: f64,
}

impl VideoGrid {
    pub fn new(n_segments: usize, unit: f64) -> Result<Self> {
        if n_segments < 1 || !(unit > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grid needs N >= 1 and tau > 0, got N={n_segments}, tau={unit}"
            )));
        }
        Ok(VideoGrid { n_segments, unit })
    }

    pub fn duration(&self) -> f64 {
        self.n_segments as f64 * self.unit
    }

    pub fn is_valid_cell(&self, i: usize, j: usize) -> bool {
        i + j + 1 <= self.n_segments
    }

    /// The moment denoted by cell (i, j): start i*tau, duration (j+1)*tau.
    pub fn moment_at(&self, i: usize, j: usize) -> MomentInterval {
        MomentInterval {
            start: i as f64 * self.unit,
            end: (i + j + 1) as f64 * self.unit,
        }
    }
}

/// Index rule shared by score maps and feature maps at scale k.
#[derive(Debug, Clone, Copy)]
pub struct ScaleGeometry {
    pub n: usize,
    pub k: usize,
    pub rows: usize,
    pub anchors: usize,
}

impl ScaleGeometry {
    pub fn new(n: usize, k: usize, anchors: usize) -> Self {
        let stride = 1usize << k;
        ScaleGeometry {
            n,
            k,
            rows: n.div_ceil(stride),
            anchors,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.k
    }

    /// Scale cell (a, b) is valid when its moment ends inside the video.
    pub fn is_valid(&self, a: usize, b: usize) -> bool {
        (a + b + 1) * self.stride() <= self.n
    }

    /// Row of the single-scale map holding this cell's start index.
    pub fn full_row(&self, a: usize) -> usize {
        a * self.stride()
    }

    /// Column of the single-scale map holding this cell's duration index.
    pub fn full_col(&self, b: usize) -> usize {
        (b + 1) * self.stride() - 1
    }

    pub fn cells(&self) -> usize {
        self.rows * self.anchors
    }

    /// Validity mask in row-major scale order.
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.cells()];
        for a in 0..self.rows {
            for b in 0..self.anchors {
                mask[a * self.anchors + b] = self.is_valid(a, b);
            }
        }
        mask
    }

    /// Flat indices into the N*N single-scale map for every scale cell
    /// (invalid cells map to index 0; pair with `valid_mask`).
    pub fn full_indices(&self) -> Vec<usize> {
        let mut idx = vec![0usize; self.cells()];
        for a in 0..self.rows {
            for b in 0..self.anchors {
                if self.is_valid(a, b) {
                    idx[a * self.anchors + b] = self.full_row(a) * self.n + self.full_col(b);
                }
            }
        }
        idx
    }
}

/// Geometries for scales 0..K with the coverage precondition checked.
pub fn scale_geometries(n: usize, k_scales: usize, anchors: usize) -> Result<Vec<ScaleGeometry>> {
    if k_scales < 1 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    if anchors * (1 << (k_scales - 1)) < n {
        return Err(Error::CoverageViolation {
            anchors,
            k_max: k_scales - 1,
            n,
        });
    }
    Ok((0..k_scales)
        .map(|k| ScaleGeometry::new(n, k, anchors))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap2D {
    pub grid: VideoGrid,
    /// N*N row-major scores; cells that are invalid or carry no prediction
    /// hold 0 and are excluded from ranking.
    pub values: Vec<f64>,
    /// Cell holds a usable score (valid and predicted by at least one scale).
    pub covered: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct ScoreMapJson {
    n: usize,
    tau: f64,
    values: Vec<f64>,
    covered: Vec<bool>,
}

impl ScoreMap2D {
    pub fn zeros(grid: VideoGrid) -> Self {
        let n = grid.n_segments;
        ScoreMap2D {
            grid,
            values: vec![0.0; n * n],
            covered: vec![false; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.grid.n_segments
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    pub fn is_covered(&self, i: usize, j: usize) -> bool {
        self.covered[i * self.n() + j]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ScoreMapJson {
            n: self.n(),
            tau: self.grid.unit,
            values: self.values.clone(),
            covered: self.covered.clone(),
        })
        .expect("score map serialization")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: ScoreMapJson = serde_json::from_value(v.clone())
            .map_err(|e| Error::Malformed(format!("score map JSON: {e}")))?;
        if j.values.len() != j.n * j.n || j.covered.len() != j.n * j.n {
            return Err(Error::Malformed(format!(
                "score map JSON: expected {} entries",
                j.n * j.n
            )));
        }
        Ok(ScoreMap2D {
            grid: VideoGrid::new(j.n, j.tau)?,
            values: j.values,
            covered: j.covered,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMap {
    pub k: usize,
    pub rows: usize,
    pub anchors: usize,
    /// rows x anchors, row-major; invalid cells hold 0.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleMaps {
    pub grid: VideoGrid,
    pub anchors: usize,
    pub maps: Vec<ScaleMap>,
}

/// Fill an N x N map with the interval IoU between each valid candidate
/// moment and the ground truth.
pub fn build_iou_map(grid: VideoGrid, gt: &MomentInterval) -> Result<ScoreMap2D> {
    if gt.start >= gt.end {
        return Err(Error::DegenerateMoment(gt.start, gt.end));
    }
    let duration = grid.duration();
    if gt.start < 0.0 || gt.end > duration + RANGE_TOL {
        return Err(Error::MomentOutOfRange {
            start: gt.start,
            end: gt.end,
            duration,
        });
    }
    let n = grid.n_segments;
    let mut map = ScoreMap2D::zeros(grid);
    for i in 0..n {
        for j in 0..n {
            if grid.is_valid_cell(i, j) {
                map.values[i * n + j] = grid.moment_at(i, j).iou(gt);
                map.covered[i * n + j] = true;
            }
        }
    }
    Ok(map)
}

/// Sample K sparse maps from a single-scale map at stride 2^k.
pub fn extract_multiscale(map: &ScoreMap2D, k_scales: usize, anchors: usize) -> Result<MultiScaleMaps> {
    let n = map.n();
    let geoms = scale_geometries(n, k_scales, anchors)?;
    let maps = geoms
        .iter()
        .map(|geo| {
            let mut values = vec![0.0; geo.cells()];
            let valid = geo.valid_mask();
            for a in 0..geo.rows {
                for b in 0..geo.anchors {
                    let idx = a * geo.anchors + b;
                    if valid[idx] {
                        values[idx] = map.values[geo.full_row(a) * n + geo.full_col(b)];
                    }
                }
            }
            ScaleMap {
                k: geo.k,
                rows: geo.rows,
                anchors: geo.anchors,
                values,
                valid,
            }
        })
        .collect();
    Ok(MultiScaleMaps {
        grid: map.grid,
        anchors,
        maps,
    })
}

/// Recover a single-scale map, taking the max over scales that predict the
/// same moment. Valid cells predicted by no scale stay uncovered.
pub fn aggregate_multiscale(ms: &MultiScaleMaps) -> ScoreMap2D {
    let n = ms.grid.n_segments;
    let mut out = ScoreMap2D::zeros(ms.grid);
    for sm in &ms.maps {
        let geo = ScaleGeometry::new(n, sm.k, sm.anchors);
        for a in 0..sm.rows {
            for b in 0..sm.anchors {
                let idx = a * sm.anchors + b;
                if !sm.valid[idx] {
                    continue;
                }
                let full = geo.full_row(a) * n + geo.full_col(b);
                let v = sm.values[idx];
                if out.covered[full] {
                    out.values[full] = out.values[full].max(v);
                } else {
                    out.values[full] = v;
                    out.covered[full] = true;
                }
            }
        }
    }
    out
}

/// Covered cells sorted by descending score; ties break toward the earlier
/// start, then the shorter duration.
pub fn top_n_moments(map: &ScoreMap2D, n_top: usize) -> Vec<(MomentInterval, f64)> {
    let n = map.n();
    let mut cells: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| map.is_covered(i, j))
        .map(|(i, j)| (i, j, map.get(i, j)))
        .collect();
    cells.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("scores must be comparable")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    cells
        .into_iter()
        .take(n_top)
        .map(|(i, j, s)| (map.grid.moment_at(i, j), s))
        .collect()
}
