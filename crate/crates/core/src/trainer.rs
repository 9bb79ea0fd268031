//! Joint training of both branches with early stopping on validation BLEU@4.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Dropout;
use crate::error::{structural, Error, Result};
use crate::metrics::evaluate_prepared;
use crate::model::{prepare_all, total_loss, Branch, CaptionModel, LossBreakdown, LossWeights, ModelDims, Variant};
use crate::optim::Adam;
use crate::params::{Grads, Mat, ParamStore};
use crate::synth::{mix_seed, VideoSample};
use crate::tape::Tape;
use crate::vocab::Vocabulary;

/// Training hyper-parameters. Defaults are the full-scale values; see
/// [`TrainConfig::desk_scale`] for the small CPU setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without a better validation score;
    /// 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
    pub lambda_sl: f64,
    pub lambda_d: f64,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub gcn_layers: usize,
    pub min_freq: usize,
    pub max_caption_len: usize,
    /// Exclude object-branch parameters from the optimizer.
    pub freeze_object_branch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            variant: Variant::Full,
            batch_size: 64,
            epochs: 50,
            learning_rate: 1e-4,
            patience: 10,
            seed: 0,
            lambda_sl: 1.0,
            lambda_d: 4.0,
            d_model: dims.d_model,
            heads: dims.heads,
            layers: dims.layers,
            ff_dim: dims.ff_dim,
            dropout: dims.dropout,
            gcn_layers: dims.gcn_layers,
            min_freq: 1,
            max_caption_len: 20,
            freeze_object_branch: false,
        }
    }
}

impl TrainConfig {
    /// Small model and batch for CPU runs.
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 16,
            d_model: 64,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_sl: self.lambda_sl,
            lambda_d: self.lambda_d,
        }
    }

    pub fn dims(&self, d_obj: usize, d_2d: usize, d_3d: usize) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
            gcn_layers: self.gcn_layers,
            d_obj,
            d_2d,
            d_3d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda_sl >= 0.0 && self.lambda_d >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("heads must divide d_model");
        }
        if self.max_caption_len == 0 {
            return bad("max_caption_len must be positive");
        }
        Ok(())
    }
}

/// Mean KL(P_s ‖ P_o) over rows, with `P = softmax(logits)`.
pub fn distill_loss(logits_s: &Mat, logits_o: &Mat) -> Result<f64> {
    if logits_s.dim() != logits_o.dim() {
        return Err(structural(format!(
            "logit shapes {:?} and {:?} differ",
            logits_s.dim(),
            logits_o.dim()
        )));
    }
    if logits_s.nrows() == 0 {
        return Err(structural("no positions to compare"));
    }
    let empty = ParamStore::new();
    let mut tape = Tape::new(&empty);
    let s = tape.constant_ref(logits_s);
    let o = tape.constant_ref(logits_o);
    let kl = tape.kl_div(s, o, &vec![true; logits_s.nrows()]);
    Ok(tape.scalar(kl))
}

/// Mean squared elementwise difference.
pub fn l2_feature_loss(f_s: &Mat, f_o: &Mat) -> Result<f64> {
    if f_s.dim() != f_o.dim() {
        return Err(structural(format!(
            "feature shapes {:?} and {:?} differ",
            f_s.dim(),
            f_o.dim()
        )));
    }
    if f_s.is_empty() {
        return Err(structural("no features to compare"));
    }
    Ok((f_s - f_o).mapv(|x| x * x).mean().expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_bleu4: f64,
    pub val_token_accuracy: f64,
}

/// Everything needed to continue training after an interruption.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: CaptionModel,
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParamStore>,
}

impl TrainState {
    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    fn best_record(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.history[e - 1])
    }

    /// Whether early stopping has triggered.
    pub fn should_stop(&self) -> bool {
        let Some(best) = self.best_epoch else {
            return false;
        };
        self.config.patience > 0 && self.epochs_done() - best >= self.config.patience
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    /// Parameters of the best validation epoch.
    pub model: CaptionModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn better(candidate: &EpochRecord, best: Option<&EpochRecord>) -> bool {
    // BLEU first; token accuracy only breaks exact ties (common while BLEU
    // is still 0 early on).
    match best {
        None => true,
        Some(b) => (candidate.val_bleu4, candidate.val_token_accuracy) > (b.val_bleu4, b.val_token_accuracy),
    }
}

/// Vocabulary over every reference of the training split.
pub fn build_vocab(train: &[VideoSample], min_freq: usize) -> Vocabulary {
    Vocabulary::build(train.iter().flat_map(|s| s.refs.iter().map(String::as_str)), min_freq)
}

/// Fresh state: vocabulary from `train`, parameters from `config.seed`.
pub fn init_state(config: &TrainConfig, train: &[VideoSample]) -> Result<TrainState> {
    config.validate()?;
    let first = train.first().ok_or_else(|| structural("training set is empty"))?;
    let vocab = build_vocab(train, config.min_freq);
    let d_obj = first.frames.first().map_or(0, |f| f.features.ncols());
    let dims = config.dims(d_obj, first.f2d.ncols(), first.f3d.ncols());
    let model = CaptionModel::new(config.variant, dims, vocab.len(), config.seed)?;
    Ok(TrainState {
        config: config.clone(),
        vocab,
        adam: Adam::new(config.learning_rate),
        model,
        history: Vec::new(),
        best_epoch: None,
        best_params: None,
    })
}

pub fn train(config: &TrainConfig, train: &[VideoSample], val: &[VideoSample]) -> Result<TrainRun> {
    train_from(init_state(config, train)?, train, val, |_| Ok(()))
}

/// Runs epochs until `config.epochs` or early stopping, calling `on_epoch`
/// after each one. Starting from a resumed state continues the epoch
/// numbering and reproduces the uninterrupted run exactly.
pub fn train_from(
    mut state: TrainState,
    train: &[VideoSample],
    val: &[VideoSample],
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(structural("training set is empty"));
    }
    if val.is_empty() {
        return Err(structural("validation set is empty"));
    }
    let config = state.config.clone();
    let variant = config.variant;
    let train_v = prepare_all(train, &state.vocab, variant)?;
    let val_v = prepare_all(val, &state.vocab, variant)?;
    let weights = config.weights();
    let frozen = if config.freeze_object_branch {
        state.model.object_param_ids()
    } else {
        Vec::new()
    };

    while state.epochs_done() < config.epochs && !state.should_stop() {
        let epoch = state.epochs_done() + 1;
        let mut order: Vec<usize> = (0..train_v.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64])));

        let mut sum = LossBreakdown::default();
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let step_seed = mix_seed(&[config.seed, epoch as u64, step as u64]);
            let mut rng_s = ChaCha8Rng::seed_from_u64(step_seed);
            rng_s.set_stream(1);
            let mut rng_o = ChaCha8Rng::seed_from_u64(step_seed);
            rng_o.set_stream(2);
            let mut grads = Grads::new(state.model.store.len());
            for &i in batch {
                let v = &train_v[i];
                let mut tape = Tape::new(&state.model.store);
                for &id in &frozen {
                    tape.freeze(id);
                }
                let mut ds = Dropout::train(config.dropout, &mut rng_s);
                let mut dobj = Dropout::train(config.dropout, &mut rng_o);
                let (root, b) = state.model.loss_on(&mut tape, v, weights, &mut ds, &mut dobj)?;
                if !b.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, step {step}, video {}: {b:?}",
                        v.id
                    )));
                }
                grads.merge(&tape.backward(root));
                sum.l_o_lang += b.l_o_lang;
                sum.l_s_lang += b.l_s_lang;
                sum.l_distill += b.l_distill;
            }
            grads.scale(1.0 / batch.len() as f64);
            for &id in &frozen {
                grads.clear(id);
            }
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, step {step}")));
            }
            state.adam.step(&mut state.model.store, &grads);
        }
        let n = train_v.len() as f64;
        let loss = total_loss(
            sum.l_o_lang / n,
            sum.l_s_lang / n,
            sum.l_distill / n,
            weights.lambda_sl,
            weights.lambda_d,
        )?;
        let report = evaluate_prepared(&state.model, &val_v, &state.vocab, Branch::Scene, config.max_caption_len)?;
        let record = EpochRecord {
            epoch,
            loss,
            val_bleu4: report.metric.bleu4,
            val_token_accuracy: report.metric.token_accuracy,
        };
        log::info!(
            "{variant} epoch {epoch}: total {:.4} (l_o {:.4}, l_s {:.4}, l_d {:.4}) val bleu4 {:.4} tok {:.4}",
            loss.total,
            loss.l_o_lang,
            loss.l_s_lang,
            loss.l_distill,
            record.val_bleu4,
            record.val_token_accuracy
        );
        if better(&record, state.best_record()) {
            state.best_epoch = Some(epoch);
            state.best_params = Some(state.model.store.clone());
        }
        state.history.push(record);
        on_epoch(&state)?;
    }

    let best_epoch = state.best_epoch.ok_or_else(|| structural("no epoch was run"))?;
    let mut model = state.model;
    if let Some(best) = state.best_params {
        model.store = best;
    }
    Ok(TrainRun {
        config,
        vocab: state.vocab,
        model,
        history: state.history,
        best_epoch,
    })
}
