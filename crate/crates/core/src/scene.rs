//! Scene branch: temporal alignment of clip-level 3D features with sampled
//! 2D frame features, and their linear fusion into `F_s`.

use rand::Rng;

use crate::error::{structural, Result};
use crate::params::{Mat, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Source frames covered by one 3D clip feature.
pub const CLIP_LEN: usize = 16;

#[derive(Clone, Debug)]
pub struct FusionParameters {
    pub w_2d: ParamId,
    pub w_3d: ParamId,
    pub w_fuse: ParamId,
}

impl FusionParameters {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_2d: usize,
        d_3d: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_2d: store.insert_uniform(format!("{prefix}.w_2d"), d_2d, d_model, rng),
            w_3d: store.insert_uniform(format!("{prefix}.w_3d"), d_3d, d_model, rng),
            w_fuse: store.insert_uniform(format!("{prefix}.w_fuse"), 2 * d_model, d_model, rng),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.w_2d, self.w_3d, self.w_fuse]
    }
}

/// Source-frame indices of `t` frames sampled uniformly (segment centres)
/// from a video of `total_frames` frames.
pub fn uniform_sample_indices(total_frames: usize, t: usize) -> Vec<usize> {
    (0..t)
        .map(|i| {
            let idx = ((i as f64 + 0.5) * total_frames as f64 / t as f64).floor() as usize;
            idx.min(total_frames.saturating_sub(1))
        })
        .collect()
}

/// Replicates each clip feature over the `CLIP_LEN` source frames it covers
/// and picks the rows of the sampled frames. Indices past the last clip use
/// the last clip.
pub fn expand_3d(f3d_clips: &Mat, sample_indices: &[usize]) -> Result<Mat> {
    let clips = f3d_clips.nrows();
    if clips == 0 {
        return Err(structural("no 3D clip features"));
    }
    let mut out = Mat::zeros((sample_indices.len(), f3d_clips.ncols()));
    for (r, &idx) in sample_indices.iter().enumerate() {
        let clip = (idx / CLIP_LEN).min(clips - 1);
        out.row_mut(r).assign(&f3d_clips.row(clip));
    }
    Ok(out)
}

/// `[F_2D·W_2D ; F_3D'·W_3D]·W_fuse`, concatenating along channels.
pub fn fuse_scene_on(tape: &mut Tape, f2d: Var, f3d: Var, params: &FusionParameters) -> Var {
    let w2 = tape.param(params.w_2d);
    let w3 = tape.param(params.w_3d);
    let wf = tape.param(params.w_fuse);
    let a = tape.matmul(f2d, w2);
    let b = tape.matmul(f3d, w3);
    let cat = tape.concat_cols(a, b);
    tape.matmul(cat, wf)
}

pub fn fuse_scene(f2d: &Mat, f3d_expanded: &Mat, store: &ParamStore, params: &FusionParameters) -> Result<Mat> {
    let (w2, w3, wf) = (store.get(params.w_2d), store.get(params.w_3d), store.get(params.w_fuse));
    if f2d.nrows() != f3d_expanded.nrows() {
        return Err(structural(format!(
            "2D features have {} rows, 3D features {}",
            f2d.nrows(),
            f3d_expanded.nrows()
        )));
    }
    if f2d.ncols() != w2.nrows() || f3d_expanded.ncols() != w3.nrows() {
        return Err(structural(format!(
            "feature widths ({}, {}) do not match projections ({}, {})",
            f2d.ncols(),
            f3d_expanded.ncols(),
            w2.nrows(),
            w3.nrows()
        )));
    }
    if wf.nrows() != w2.ncols() + w3.ncols() {
        return Err(structural("fusion matrix must take both projected streams"));
    }
    let mut tape = Tape::new(store);
    let (a, b) = (tape.constant_ref(f2d), tape.constant_ref(f3d_expanded));
    let out = fuse_scene_on(&mut tape, a, b, params);
    Ok(tape.value(out).clone())
}
