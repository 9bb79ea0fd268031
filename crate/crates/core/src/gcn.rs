//! Object branch encoder: projection, residual graph convolutions over the
//! normalized spatio-temporal graph, and per-frame average pooling.

use rand::Rng;

use crate::error::{structural, Error, Result};
use crate::graph::{FrameDetections, StGraph};
use crate::params::{Mat, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Handles to `W_o` (`d_obj × d_model`) and the per-layer `d_model × d_model`
/// weights. No biases.
#[derive(Clone, Debug)]
pub struct GcnParameters {
    pub w_in: ParamId,
    pub layers: Vec<ParamId>,
}

impl GcnParameters {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_obj: usize,
        d_model: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let w_in = store.insert_uniform(format!("{prefix}.w_in"), d_obj, d_model, rng);
        let layers = (0..n_layers)
            .map(|l| store.insert_uniform(format!("{prefix}.layer{l}"), d_model, d_model, rng))
            .collect();
        Self { w_in, layers }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.w_in).chain(self.layers.iter().copied())
    }
}

/// Pooled object features `F_o'` (`T × d_model`) and which frames had objects.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSequence {
    pub values: Mat,
    pub mask: Vec<bool>,
}

/// Frame-major stack of every slot's features (`T·n_max × d_obj`).
pub fn stack_features(frames: &[FrameDetections]) -> Result<Mat> {
    let first = frames
        .first()
        .ok_or_else(|| structural("video has no frames"))?;
    let d = first.features.ncols();
    if let Some(f) = frames.iter().find(|f| f.features.ncols() != d) {
        return Err(structural(format!(
            "frame {} has feature width {}, expected {d}",
            f.t,
            f.features.ncols()
        )));
    }
    let views: Vec<_> = frames.iter().map(|f| f.features.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| structural(e.to_string()))
}

/// `T × (T·n_max)` averaging operator over the valid slots of each frame.
pub fn pooling_matrix(valid_counts: &[usize], n_max: usize) -> Mat {
    let t_len = valid_counts.len();
    let mut p = Mat::zeros((t_len, t_len * n_max));
    for (t, &c) in valid_counts.iter().enumerate() {
        for j in 0..c.min(n_max) {
            p[[t, t * n_max + j]] = 1.0 / c as f64;
        }
    }
    p
}

pub fn project_objects_on(tape: &mut Tape, stacked: Var, w_in: Var) -> Var {
    tape.matmul(stacked, w_in)
}

/// `ReLU(H + G·H·W)`.
pub fn gcn_layer_on(tape: &mut Tape, h: Var, g_norm: Var, w: Var) -> Var {
    let hw = tape.matmul(h, w);
    let agg = tape.matmul(g_norm, hw);
    let sum = tape.add(h, agg);
    tape.relu(sum)
}

/// Full object-branch pipeline on a tape. `stacked`, `g_norm` and `pool` are
/// the per-video constants produced by [`stack_features`],
/// [`StGraph::normalized`] and [`pooling_matrix`].
pub fn encode_objects_on(tape: &mut Tape, stacked: Var, g_norm: Var, pool: Var, params: &GcnParameters) -> Var {
    let w_in = tape.param(params.w_in);
    let mut h = project_objects_on(tape, stacked, w_in);
    for &layer in &params.layers {
        let w = tape.param(layer);
        h = gcn_layer_on(tape, h, g_norm, w);
    }
    tape.matmul(pool, h)
}

fn ensure_finite(name: &str, m: &Mat) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} contains non-finite values")))
    }
}

pub fn project_objects(stacked: &Mat, w_in: &Mat) -> Result<Mat> {
    if stacked.ncols() != w_in.nrows() {
        return Err(structural(format!(
            "object features have width {} but W_o expects {}",
            stacked.ncols(),
            w_in.nrows()
        )));
    }
    Ok(stacked.dot(w_in))
}

pub fn gcn_layer(h: &Mat, g_norm: &Mat, w: &Mat) -> Result<Mat> {
    ensure_finite("H", h)?;
    ensure_finite("normalized graph", g_norm)?;
    ensure_finite("W", w)?;
    let n = h.nrows();
    let d = h.ncols();
    if g_norm.dim() != (n, n) || w.dim() != (d, d) {
        return Err(structural(format!(
            "gcn_layer shapes: H {:?}, G {:?}, W {:?}",
            h.dim(),
            g_norm.dim(),
            w.dim()
        )));
    }
    let empty = ParamStore::new();
    let mut tape = Tape::new(&empty);
    let (hv, gv, wv) = (tape.constant_ref(h), tape.constant_ref(g_norm), tape.constant_ref(w));
    let out = gcn_layer_on(&mut tape, hv, gv, wv);
    Ok(tape.value(out).clone())
}

/// Runs the object branch for one video against an already built graph.
pub fn encode_objects(
    frames: &[FrameDetections],
    graph: &StGraph,
    store: &ParamStore,
    params: &GcnParameters,
) -> Result<ObjectSequence> {
    let stacked = stack_features(frames)?;
    if graph.num_nodes() != stacked.nrows() {
        return Err(structural(format!(
            "graph has {} nodes, video has {} object slots",
            graph.num_nodes(),
            stacked.nrows()
        )));
    }
    let w_in = store.get(params.w_in);
    if stacked.ncols() != w_in.nrows() {
        return Err(structural(format!(
            "object features have width {} but W_o expects {}",
            stacked.ncols(),
            w_in.nrows()
        )));
    }
    ensure_finite("object features", &stacked)?;
    for &l in &params.layers {
        ensure_finite(store.name(l), store.get(l))?;
    }
    let valid_counts: Vec<usize> = frames.iter().map(|f| f.valid_count).collect();
    let pool = pooling_matrix(&valid_counts, graph.n_max);
    let mut tape = Tape::new(store);
    let (s, g, p) = (
        tape.constant_ref(&stacked),
        tape.constant_ref(&graph.normalized),
        tape.constant_ref(&pool),
    );
    let out = encode_objects_on(&mut tape, s, g, p, params);
    Ok(ObjectSequence {
        values: tape.value(out).clone(),
        mask: valid_counts.iter().map(|&c| c > 0).collect(),
    })
}
