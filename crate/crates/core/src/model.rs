//! The two-branch captioner and its ablation variants.
//!
//! The object branch runs the graph encoder over detections and feeds its
//! own transformer; the scene branch fuses 2D/3D frame features into a
//! second transformer. Training couples them through the distillation term;
//! evaluation normally decodes from the scene branch alone.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{argmax, generate_greedy, CaptionTransformer, DecoderConfig, Dropout};
use crate::error::{structural, Error, Result};
use crate::gcn::{pooling_matrix, stack_features, GcnParameters};
use crate::graph::{build_graph, GraphKind};
use crate::params::{Grads, Mat, ParamId, ParamStore};
use crate::scene::{expand_3d, FusionParameters};
use crate::synth::VideoSample;
use crate::tape::{Tape, Var};
use crate::vocab::{tokenize, Vocabulary, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SceneOnly,
    Concat,
    L2,
    SpatialOnly,
    TemporalOnly,
    Dense,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::SceneOnly,
        Variant::Concat,
        Variant::L2,
        Variant::SpatialOnly,
        Variant::TemporalOnly,
        Variant::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SceneOnly => "scene_only",
            Variant::Concat => "concat",
            Variant::L2 => "l2",
            Variant::SpatialOnly => "spatial_only",
            Variant::TemporalOnly => "temporal_only",
            Variant::Dense => "dense",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {name:?}; expected one of {}", known.join(", ")))
            })
    }

    /// Graph used by the object encoder, if the variant has one.
    pub fn graph_kind(self) -> Option<GraphKind> {
        match self {
            Variant::SceneOnly => None,
            Variant::SpatialOnly => Some(GraphKind::SpatialOnly),
            Variant::TemporalOnly => Some(GraphKind::TemporalOnly),
            Variant::Dense => Some(GraphKind::Dense),
            Variant::Full | Variant::Concat | Variant::L2 => Some(GraphKind::SpatioTemporal),
        }
    }

    /// Whether the object branch has its own caption transformer.
    pub fn has_object_decoder(self) -> bool {
        !matches!(self, Variant::SceneOnly | Variant::Concat)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Scene,
    Object,
}

impl Branch {
    pub fn parse(name: &str) -> Result<Branch> {
        match name {
            "scene" => Ok(Branch::Scene),
            "object" => Ok(Branch::Object),
            _ => Err(Error::Config(format!("unknown branch {name:?}; expected scene or object"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Scene => "scene",
            Branch::Object => "object",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub gcn_layers: usize,
    pub d_obj: usize,
    pub d_2d: usize,
    pub d_3d: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            layers: 2,
            ff_dim: 1024,
            dropout: 0.3,
            gcn_layers: 3,
            d_obj: 64,
            d_2d: 64,
            d_3d: 32,
        }
    }
}

/// Loss weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_sl: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sl: 1.0,
            lambda_d: 4.0,
        }
    }
}

/// Per-component losses and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_o_lang: f64,
    pub l_s_lang: f64,
    pub l_distill: f64,
    pub total: f64,
    pub lambda_sl: f64,
    pub lambda_d: f64,
}

/// `l_o + λ_sl·l_s + λ_d·l_d`.
pub fn total_loss(l_o: f64, l_s: f64, l_d: f64, lambda_sl: f64, lambda_d: f64) -> Result<LossBreakdown> {
    if !(lambda_sl >= 0.0 && lambda_d >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got lambda_sl={lambda_sl}, lambda_d={lambda_d}"
        )));
    }
    Ok(LossBreakdown {
        l_o_lang: l_o,
        l_s_lang: l_s,
        l_distill: l_d,
        total: l_o + lambda_sl * l_s + lambda_d * l_d,
        lambda_sl,
        lambda_d,
    })
}

/// Everything a forward pass needs from one video, computed once.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub id: String,
    pub stacked: Mat,
    pub g_norm: Mat,
    pub pool: Mat,
    /// Frames with at least one detection.
    pub frame_mask: Vec<bool>,
    pub f2d: Mat,
    pub f3d: Mat,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub refs: Vec<Vec<String>>,
}

impl PreparedVideo {
    /// Training targets come from the first reference.
    pub fn new(sample: &VideoSample, vocab: &Vocabulary, graph: Option<GraphKind>) -> Result<Self> {
        let first = sample
            .refs
            .first()
            .ok_or_else(|| structural(format!("video {} has no reference caption", sample.id)))?;
        let (input_ids, target_ids) = vocab.teacher_forcing_pair(first);
        let (stacked, g_norm, pool) = match graph {
            Some(kind) => {
                let g = build_graph(&sample.frames, kind)?;
                let n_max = sample.frames[0].n_max();
                (
                    stack_features(&sample.frames)?,
                    g.normalized.clone(),
                    pooling_matrix(&g.valid_counts, n_max),
                )
            }
            None => (Mat::zeros((0, 0)), Mat::zeros((0, 0)), Mat::zeros((0, 0))),
        };
        let f3d = expand_3d(&sample.f3d, &sample.sample_indices())?;
        if f3d.nrows() != sample.f2d.nrows() {
            return Err(structural(format!(
                "video {}: {} frames of 2D features for {} sampled frames",
                sample.id,
                sample.f2d.nrows(),
                f3d.nrows()
            )));
        }
        Ok(Self {
            id: sample.id.clone(),
            stacked,
            g_norm,
            pool,
            frame_mask: sample.frames.iter().map(|f| f.valid_count > 0).collect(),
            f2d: sample.f2d.clone(),
            f3d,
            input_ids,
            target_ids,
            refs: sample.refs.iter().map(|r| tokenize(r)).collect(),
        })
    }

    pub fn has_objects(&self) -> bool {
        self.frame_mask.iter().any(|&m| m)
    }
}

pub fn prepare_all(samples: &[VideoSample], vocab: &Vocabulary, variant: Variant) -> Result<Vec<PreparedVideo>> {
    samples
        .iter()
        .map(|s| PreparedVideo::new(s, vocab, variant.graph_kind()))
        .collect()
}

/// Parameters and structure of one variant.
#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub variant: Variant,
    pub dims: ModelDims,
    pub vocab_size: usize,
    pub store: ParamStore,
    gcn: Option<GcnParameters>,
    fusion: FusionParameters,
    scene_tf: CaptionTransformer,
    object_tf: Option<CaptionTransformer>,
}

fn component_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

impl CaptionModel {
    /// Each component draws from its own RNG stream, so shared components
    /// start identical across variants built with the same seed.
    pub fn new(variant: Variant, dims: ModelDims, vocab_size: usize, seed: u64) -> Result<Self> {
        if dims.d_model == 0 || dims.layers == 0 {
            return Err(Error::Config("d_model and layers must be positive".into()));
        }
        if !(0.0..1.0).contains(&dims.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", dims.dropout)));
        }
        let mut store = ParamStore::new();
        let d = dims.d_model;
        let fusion = FusionParameters::init(&mut store, "scene", dims.d_2d, dims.d_3d, d, &mut component_rng(seed, 1));
        let tf_config = |input_dim| DecoderConfig {
            d_model: d,
            heads: dims.heads,
            layers: dims.layers,
            ff_dim: dims.ff_dim,
            dropout: dims.dropout,
            vocab_size,
            input_dim,
        };
        let scene_input = if variant == Variant::Concat { 2 * d } else { d };
        let scene_tf = CaptionTransformer::init(&mut store, "scene_tf", tf_config(scene_input), &mut component_rng(seed, 2))?;
        let gcn = variant.graph_kind().map(|_| {
            GcnParameters::init(&mut store, "gcn", dims.d_obj, d, dims.gcn_layers, &mut component_rng(seed, 3))
        });
        let object_tf = if variant.has_object_decoder() {
            Some(CaptionTransformer::init(&mut store, "object_tf", tf_config(d), &mut component_rng(seed, 4))?)
        } else {
            None
        };
        Ok(Self {
            variant,
            dims,
            vocab_size,
            store,
            gcn,
            fusion,
            scene_tf,
            object_tf,
        })
    }

    /// Parameters the object branch owns (graph encoder and its decoder).
    /// Replaces every parameter value with the one of the same name in
    /// `values`, which must hold exactly this model's names and shapes.
    pub fn load_params(&mut self, values: &ParamStore) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(structural(format!(
                "parameter count {} does not match the model's {}",
                values.len(),
                self.store.len()
            )));
        }
        for (_, name, value) in values.iter() {
            let own = self
                .store
                .id(name)
                .ok_or_else(|| structural(format!("unexpected parameter {name}")))?;
            if self.store.get(own).dim() != value.dim() {
                return Err(structural(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    self.store.get(own).dim()
                )));
            }
            *self.store.get_mut(own) = value.clone();
        }
        Ok(())
    }

    pub fn object_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = match (&self.gcn, self.variant) {
            (Some(g), v) if v != Variant::Concat => g.param_ids().collect(),
            _ => Vec::new(),
        };
        if let Some(tf) = &self.object_tf {
            ids.extend(tf.param_ids(&self.store));
        }
        ids
    }

    pub fn scene_transformer(&self) -> &CaptionTransformer {
        &self.scene_tf
    }

    pub fn object_transformer(&self) -> Option<&CaptionTransformer> {
        self.object_tf.as_ref()
    }

    fn scene_input_on(&self, tape: &mut Tape, v: &PreparedVideo) -> Result<(Var, Vec<bool>)> {
        let f2d = tape.constant(v.f2d.clone());
        let f3d = tape.constant(v.f3d.clone());
        let fs = crate::scene::fuse_scene_on(tape, f2d, f3d, &self.fusion);
        if self.variant == Variant::Concat {
            let fo = self.object_features_on(tape, v)?;
            return Ok((tape.concat_cols(fs, fo), vec![true; v.f2d.nrows()]));
        }
        Ok((fs, vec![true; v.f2d.nrows()]))
    }

    fn object_features_on(&self, tape: &mut Tape, v: &PreparedVideo) -> Result<Var> {
        let gcn = self
            .gcn
            .as_ref()
            .ok_or_else(|| structural(format!("variant {} has no object encoder", self.variant)))?;
        if v.stacked.nrows() == 0 {
            return Err(structural(format!("video {} was prepared without a graph", v.id)));
        }
        let stacked = tape.constant(v.stacked.clone());
        let g = tape.constant(v.g_norm.clone());
        let pool = tape.constant(v.pool.clone());
        Ok(crate::gcn::encode_objects_on(tape, stacked, g, pool, gcn))
    }

    /// Builds the joint objective for one video on `tape`. Object-side terms
    /// are skipped for videos without any detection.
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        v: &PreparedVideo,
        weights: LossWeights,
        drop_scene: &mut Dropout,
        drop_object: &mut Dropout,
    ) -> Result<(Var, LossBreakdown)> {
        let targets: Vec<Option<usize>> = v.target_ids.iter().map(|&i| (i != PAD).then_some(i)).collect();
        let (fs, scene_mask) = self.scene_input_on(tape, v)?;
        let mem_s = self.scene_tf.encode_on(tape, fs, &scene_mask, drop_scene)?;
        let logits_s = self.scene_tf.decode_on(tape, mem_s, &scene_mask, &v.input_ids, drop_scene)?;
        let l_s = tape.cross_entropy(logits_s, &targets);

        let object = match &self.object_tf {
            Some(tf) if v.has_objects() => {
                let fo = self.object_features_on(tape, v)?;
                let mem_o = tf.encode_on(tape, fo, &v.frame_mask, drop_object)?;
                let logits_o = tf.decode_on(tape, mem_o, &v.frame_mask, &v.input_ids, drop_object)?;
                let l_o = tape.cross_entropy(logits_o, &targets);
                let l_d = if self.variant == Variant::L2 {
                    tape.mean_square(fs, fo)
                } else {
                    let rows: Vec<bool> = targets.iter().map(Option::is_some).collect();
                    tape.kl_div(logits_s, logits_o, &rows)
                };
                Some((l_o, l_d))
            }
            _ => None,
        };
        let ws = tape.scale(l_s, weights.lambda_sl);
        let (total, lo, ld) = match object {
            Some((l_o, l_d)) => {
                let wd = tape.scale(l_d, weights.lambda_d);
                let a = tape.add(l_o, ws);
                (tape.add(a, wd), tape.scalar(l_o), tape.scalar(l_d))
            }
            None => (ws, 0.0, 0.0),
        };
        let breakdown = total_loss(lo, tape.scalar(l_s), ld, weights.lambda_sl, weights.lambda_d)?;
        Ok((total, breakdown))
    }

    /// Evaluation-mode loss of one video.
    pub fn loss(&self, v: &PreparedVideo, weights: LossWeights) -> Result<LossBreakdown> {
        let mut tape = Tape::new(&self.store);
        let (_, b) = self.loss_on(&mut tape, v, weights, &mut Dropout::eval(), &mut Dropout::eval())?;
        Ok(b)
    }

    /// Evaluation-mode loss and parameter gradients of one video.
    pub fn loss_and_grads(&self, v: &PreparedVideo, weights: LossWeights) -> Result<(LossBreakdown, Grads)> {
        let mut tape = Tape::new(&self.store);
        let (root, b) = self.loss_on(&mut tape, v, weights, &mut Dropout::eval(), &mut Dropout::eval())?;
        Ok((b, tape.backward(root)))
    }

    fn check_branch(&self, branch: Branch) -> Result<()> {
        if branch == Branch::Object && self.object_tf.is_none() {
            return Err(Error::Contract(format!(
                "variant {} has no object branch to decode from",
                self.variant
            )));
        }
        Ok(())
    }

    /// Encoder memory and mask for the chosen branch.
    pub fn memory(&self, v: &PreparedVideo, branch: Branch) -> Result<(Mat, Vec<bool>)> {
        self.check_branch(branch)?;
        let mut tape = Tape::new(&self.store);
        let mut drop = Dropout::eval();
        match branch {
            Branch::Scene => {
                let (fs, mask) = self.scene_input_on(&mut tape, v)?;
                let m = self.scene_tf.encode_on(&mut tape, fs, &mask, &mut drop)?;
                Ok((tape.value(m).clone(), mask))
            }
            Branch::Object => {
                let tf = self.object_tf.as_ref().expect("checked above");
                let fo = self.object_features_on(&mut tape, v)?;
                let m = tf.encode_on(&mut tape, fo, &v.frame_mask, &mut drop)?;
                Ok((tape.value(m).clone(), v.frame_mask.clone()))
            }
        }
    }

    fn transformer(&self, branch: Branch) -> &CaptionTransformer {
        match branch {
            Branch::Scene => &self.scene_tf,
            Branch::Object => self.object_tf.as_ref().expect("branch checked"),
        }
    }

    /// Teacher-forced logits of the chosen branch.
    pub fn teacher_forced_logits(&self, v: &PreparedVideo, branch: Branch) -> Result<Mat> {
        let (memory, mask) = self.memory(v, branch)?;
        crate::decoder::teacher_forced_logits(&self.store, self.transformer(branch), &memory, &mask, &v.input_ids)
    }

    /// Greedy caption ids (without BOS/EOS).
    pub fn greedy_ids(&self, v: &PreparedVideo, branch: Branch, max_len: usize) -> Result<Vec<usize>> {
        let (memory, mask) = self.memory(v, branch)?;
        Ok(generate_greedy(&self.store, self.transformer(branch), &memory, &mask, max_len))
    }

    /// `(correct, counted)` argmax matches over non-PAD targets.
    pub fn token_matches(&self, v: &PreparedVideo, branch: Branch) -> Result<(usize, usize)> {
        let logits = self.teacher_forced_logits(v, branch)?;
        let mut hit = 0;
        let mut n = 0;
        for (row, &t) in logits.rows().into_iter().zip(&v.target_ids) {
            if t == PAD {
                continue;
            }
            n += 1;
            if argmax(row) == t {
                hit += 1;
            }
        }
        Ok((hit, n))
    }
}
