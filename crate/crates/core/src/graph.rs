//! Spatial, temporal and merged spatio-temporal adjacency over per-frame
//! object detections.
//!
//! Objects are indexed frame-major: object `j` of frame `t` is node
//! `t * n_max + j`. Valid detections occupy the first `valid_count` slots of
//! every frame; the remaining slots are zero padding and never carry edge
//! weight.

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::params::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub is_padding: bool,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max, "inverted box");
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            is_padding: false,
        }
    }

    pub fn padding() -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 0.0,
            y_max: 0.0,
            is_padding: true,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        if self.is_padding {
            0.0
        } else {
            self.width() * self.height()
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union; zero whenever either box has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Detections of one sampled frame, padded to `n_max` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetections {
    pub t: usize,
    pub boxes: Vec<BoundingBox>,
    /// `n_max × d_obj`; rows at or beyond `valid_count` are zero.
    pub features: Mat,
    pub valid_count: usize,
}

impl FrameDetections {
    /// Pads (or truncates to the first `n_max`) the given detections.
    pub fn new(t: usize, boxes: &[BoundingBox], features: &Mat, n_max: usize) -> Result<Self> {
        if boxes.len() != features.nrows() {
            return Err(structural(format!(
                "frame {t}: {} boxes but {} feature rows",
                boxes.len(),
                features.nrows()
            )));
        }
        let valid_count = boxes.len().min(n_max);
        let mut padded_boxes: Vec<BoundingBox> = boxes[..valid_count].to_vec();
        padded_boxes.resize(n_max, BoundingBox::padding());
        let mut padded = Mat::zeros((n_max, features.ncols()));
        padded
            .slice_mut(s![..valid_count, ..])
            .assign(&features.slice(s![..valid_count, ..]));
        Ok(Self {
            t,
            boxes: padded_boxes,
            features: padded,
            valid_count,
        })
    }

    pub fn n_max(&self) -> usize {
        self.boxes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.boxes.len() {
            return Err(structural(format!(
                "frame {}: {} boxes vs {} feature rows",
                self.t,
                self.boxes.len(),
                self.features.nrows()
            )));
        }
        if self.valid_count > self.boxes.len() {
            return Err(structural(format!(
                "frame {}: valid_count {} exceeds n_max {}",
                self.t,
                self.valid_count,
                self.boxes.len()
            )));
        }
        for (j, b) in self.boxes.iter().enumerate() {
            if j < self.valid_count && !b.is_padding && (b.x_min > b.x_max || b.y_min > b.y_max) {
                return Err(structural(format!("frame {}: box {j} is inverted", self.t)));
            }
        }
        let padded_nonzero = self
            .features
            .slice(s![self.valid_count.., ..])
            .iter()
            .any(|&x| x != 0.0);
        if padded_nonzero {
            return Err(structural(format!(
                "frame {}: padded feature rows must be zero",
                self.t
            )));
        }
        Ok(())
    }
}

/// One adjacency block; `is_empty` marks blocks with no valid rows or
/// columns, which callers may skip.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyBlock {
    pub weights: Mat,
    pub is_empty: bool,
}

/// Softmax over `scores[i, ..valid_cols]` for `i < valid_rows`; everything
/// else stays zero.
fn masked_row_softmax(scores: &Mat, valid_rows: usize, valid_cols: usize) -> Mat {
    let mut out = Mat::zeros(scores.dim());
    if valid_cols == 0 {
        return out;
    }
    for i in 0..valid_rows {
        let row = scores.slice(s![i, ..valid_cols]);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out[[i, j]] = e / sum;
        }
    }
    out
}

/// Pre-softmax IoU matrix of one frame: unit diagonal on valid objects,
/// zero on padding.
pub fn iou_matrix(frame: &FrameDetections) -> Mat {
    let n = frame.n_max();
    let v = frame.valid_count;
    let mut sigma = Mat::zeros((n, n));
    for i in 0..v {
        sigma[[i, i]] = 1.0;
        for j in (i + 1)..v {
            let x = iou(&frame.boxes[i], &frame.boxes[j]);
            sigma[[i, j]] = x;
            sigma[[j, i]] = x;
        }
    }
    sigma
}

/// Row-softmax of pairwise IoU among the valid objects of one frame.
pub fn spatial_adjacency(frame: &FrameDetections) -> AdjacencyBlock {
    let v = frame.valid_count;
    AdjacencyBlock {
        weights: masked_row_softmax(&iou_matrix(frame), v, v),
        is_empty: v == 0,
    }
}

/// Row-softmax of cosine feature similarity from objects of `src` (frame t)
/// to objects of `dst` (frame t + 1). Directed: only `src → dst` entries.
pub fn temporal_adjacency(src: &FrameDetections, dst: &FrameDetections) -> AdjacencyBlock {
    let (n_src, n_dst) = (src.n_max(), dst.n_max());
    let mut scores = Mat::zeros((n_src, n_dst));
    for i in 0..src.valid_count {
        for j in 0..dst.valid_count {
            scores[[i, j]] = cosine(src.features.row(i), dst.features.row(j));
        }
    }
    AdjacencyBlock {
        weights: masked_row_softmax(&scores, src.valid_count, dst.valid_count),
        is_empty: src.valid_count == 0 || dst.valid_count == 0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StGraph {
    pub t_len: usize,
    pub n_max: usize,
    pub valid_counts: Vec<usize>,
    pub blocks_spatial: Vec<Mat>,
    pub blocks_temporal: Vec<Mat>,
    /// `N × N` with `N = t_len * n_max`.
    pub merged: Mat,
    /// Row sums of `merged`.
    pub degree: Array1<f64>,
    pub normalized: Mat,
}

impl StGraph {
    pub fn num_nodes(&self) -> usize {
        self.t_len * self.n_max
    }
}

/// Places spatial blocks on the block diagonal and temporal blocks on the
/// first block superdiagonal.
pub fn assemble_st_graph(spatial: Vec<Mat>, temporal: Vec<Mat>) -> Result<StGraph> {
    let t_len = spatial.len();
    if t_len == 0 {
        return Err(structural("spatio-temporal graph needs at least one frame"));
    }
    if temporal.len() != t_len - 1 {
        return Err(structural(format!(
            "{t_len} spatial blocks need {} temporal blocks, got {}",
            t_len - 1,
            temporal.len()
        )));
    }
    let n_max = spatial[0].nrows();
    for (t, b) in spatial.iter().enumerate() {
        if b.dim() != (n_max, n_max) {
            return Err(structural(format!(
                "spatial block {t} has shape {:?}, expected ({n_max}, {n_max})",
                b.dim()
            )));
        }
    }
    for (t, b) in temporal.iter().enumerate() {
        if b.dim() != (n_max, n_max) {
            return Err(structural(format!(
                "temporal block {t} has shape {:?}, expected ({n_max}, {n_max})",
                b.dim()
            )));
        }
    }
    let n = t_len * n_max;
    let mut merged = Mat::zeros((n, n));
    for (t, b) in spatial.iter().enumerate() {
        let r = t * n_max;
        merged.slice_mut(s![r..r + n_max, r..r + n_max]).assign(b);
    }
    for (t, b) in temporal.iter().enumerate() {
        let r = t * n_max;
        merged
            .slice_mut(s![r..r + n_max, r + n_max..r + 2 * n_max])
            .assign(b);
    }
    let valid_counts = spatial
        .iter()
        .map(|b| b.rows().into_iter().filter(|r| r.iter().any(|&x| x != 0.0)).count())
        .collect();
    Ok(finish(t_len, n_max, valid_counts, spatial, temporal, merged))
}

fn finish(
    t_len: usize,
    n_max: usize,
    valid_counts: Vec<usize>,
    blocks_spatial: Vec<Mat>,
    blocks_temporal: Vec<Mat>,
    merged: Mat,
) -> StGraph {
    let degree = merged.sum_axis(ndarray::Axis(1));
    let mut g = StGraph {
        t_len,
        n_max,
        valid_counts,
        blocks_spatial,
        blocks_temporal,
        normalized: Mat::zeros(merged.dim()),
        merged,
        degree,
    };
    g.normalized = normalize_st_graph(&g);
    g
}

/// `Λ^{-1/2} G Λ^{-1/2}` with `Λ` the row-sum degrees; zero-degree rows and
/// columns map to zero.
pub fn normalize_st_graph(g: &StGraph) -> Mat {
    let inv_sqrt: Vec<f64> = g
        .degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut out = g.merged.clone();
    for ((i, j), x) in out.indexed_iter_mut() {
        *x *= inv_sqrt[i] * inv_sqrt[j];
    }
    out
}

/// Every valid object connected to every valid object (all frames) with
/// weight 1.
pub fn dense_graph(t_len: usize, n_max: usize, valid_counts: &[usize]) -> Result<StGraph> {
    if valid_counts.len() != t_len {
        return Err(structural(format!(
            "{} valid counts for {t_len} frames",
            valid_counts.len()
        )));
    }
    if let Some(&c) = valid_counts.iter().find(|&&c| c > n_max) {
        return Err(structural(format!("valid count {c} exceeds n_max {n_max}")));
    }
    let n = t_len * n_max;
    let valid: Vec<bool> = (0..n)
        .map(|i| i % n_max < valid_counts[i / n_max])
        .collect();
    let merged = Mat::from_shape_fn((n, n), |(i, j)| {
        if valid[i] && valid[j] {
            1.0
        } else {
            0.0
        }
    });
    let spatial = (0..t_len)
        .map(|t| {
            let r = t * n_max;
            merged.slice(s![r..r + n_max, r..r + n_max]).to_owned()
        })
        .collect();
    let temporal = (0..t_len.saturating_sub(1))
        .map(|t| {
            let r = t * n_max;
            merged
                .slice(s![r..r + n_max, r + n_max..r + 2 * n_max])
                .to_owned()
        })
        .collect();
    Ok(finish(
        t_len,
        n_max,
        valid_counts.to_vec(),
        spatial,
        temporal,
        merged,
    ))
}

/// Graph variants used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    SpatioTemporal,
    SpatialOnly,
    TemporalOnly,
    Dense,
}

/// Builds the adjacency of one video for the requested variant.
pub fn build_graph(frames: &[FrameDetections], kind: GraphKind) -> Result<StGraph> {
    let t_len = frames.len();
    if t_len == 0 {
        return Err(structural("video has no frames"));
    }
    let n_max = frames[0].n_max();
    if let Some(f) = frames.iter().find(|f| f.n_max() != n_max) {
        return Err(structural(format!(
            "frame {} has {} slots, expected {n_max}",
            f.t,
            f.n_max()
        )));
    }
    let valid_counts: Vec<usize> = frames.iter().map(|f| f.valid_count).collect();
    if kind == GraphKind::Dense {
        return dense_graph(t_len, n_max, &valid_counts);
    }
    let spatial: Vec<Mat> = frames
        .iter()
        .map(|f| match kind {
            GraphKind::TemporalOnly => Mat::zeros((n_max, n_max)),
            _ => spatial_adjacency(f).weights,
        })
        .collect();
    let temporal: Vec<Mat> = frames
        .windows(2)
        .map(|w| match kind {
            GraphKind::SpatialOnly => Mat::zeros((n_max, n_max)),
            _ => temporal_adjacency(&w[0], &w[1]).weights,
        })
        .collect();
    let mut g = assemble_st_graph(spatial, temporal)?;
    g.valid_counts = valid_counts;
    Ok(g)
}

/// JSON dump used by `inspect-graph`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GraphDump {
    #[serde(rename = "T")]
    pub t_len: usize,
    pub n_max: usize,
    pub valid_counts: Vec<usize>,
    pub spatial: Vec<Vec<Vec<f64>>>,
    pub temporal: Vec<Vec<Vec<f64>>>,
    pub merged_nnz: Vec<NonZero>,
    pub degree: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NonZero {
    pub i: usize,
    pub j: usize,
    pub v: f64,
}

pub(crate) fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl From<&StGraph> for GraphDump {
    fn from(g: &StGraph) -> Self {
        GraphDump {
            t_len: g.t_len,
            n_max: g.n_max,
            valid_counts: g.valid_counts.clone(),
            spatial: g.blocks_spatial.iter().map(mat_to_rows).collect(),
            temporal: g.blocks_temporal.iter().map(mat_to_rows).collect(),
            merged_nnz: g
                .merged
                .indexed_iter()
                .filter(|(_, &v)| v != 0.0)
                .map(|((i, j), &v)| NonZero { i, j, v })
                .collect(),
            degree: g.degree.to_vec(),
        }
    }
}
