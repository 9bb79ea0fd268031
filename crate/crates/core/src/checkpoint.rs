//! On-disk checkpoints and checkpoint-based evaluation.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! params.bin      parameter blob
//! metadata.json   {config, epoch, val_metric, vocab_hash, seed, dims, vocab_size}
//! vocab.json      token → id
//! history.json    per-epoch records up to `epoch`
//! optimizer.bin   Adam moments (training checkpoints only)
//! ```
//!
//! A training run keeps two of them under its output directory, `last/`
//! (for resuming) and `best/` (for evaluation). Directories are written next
//! to their final location and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, structural, Error, Result};
use crate::metrics::{evaluate_prepared, MetricReport};
use crate::model::{prepare_all, Branch, CaptionModel, ModelDims};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::synth::{split_corpus, VideoSample};
use crate::trainer::{build_vocab, EpochRecord, TrainConfig, TrainState};
use crate::vocab::Vocabulary;

pub const PARAMS_FILE: &str = "params.bin";
pub const METADATA_FILE: &str = "metadata.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const HISTORY_FILE: &str = "history.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    /// Epoch whose parameters are stored (1-based).
    pub epoch: usize,
    /// Validation BLEU@4 of that epoch.
    pub val_metric: f64,
    pub vocab_hash: String,
    pub seed: u64,
    pub dims: ModelDims,
    pub vocab_size: usize,
    /// Best epoch so far; lets a resumed run keep its early-stopping state.
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
    pub optimizer: Option<ParamStore>,
}

impl Checkpoint {
    /// Rebuilds the model and loads the stored parameters into it.
    pub fn model(&self) -> Result<CaptionModel> {
        let mut model = CaptionModel::new(
            self.meta.config.variant,
            self.meta.dims.clone(),
            self.meta.vocab_size,
            self.meta.seed,
        )?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn staging_path(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map_or_else(|| "ckpt".into(), |n| n.to_string_lossy().into_owned());
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Writes `ckpt` to `dir`, replacing any previous checkpoint there. A reader
/// sees either the old directory or the new one, never a partial write.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = staging_path(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;
    write_file(&tmp.join(PARAMS_FILE), &ckpt.params.to_bytes())?;
    write_file(&tmp.join(METADATA_FILE), serde_json::to_string_pretty(&ckpt.meta)?.as_bytes())?;
    write_file(&tmp.join(VOCAB_FILE), ckpt.vocab.to_json().as_bytes())?;
    write_file(&tmp.join(HISTORY_FILE), serde_json::to_string_pretty(&ckpt.history)?.as_bytes())?;
    if let Some(opt) = &ckpt.optimizer {
        write_file(&tmp.join(OPTIMIZER_FILE), &opt.to_bytes())?;
    }

    let old = staging_path(dir, "old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        }
        fs::rename(dir, &old).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta = serde_json::from_slice(&read_file(&dir.join(METADATA_FILE))?)?;
    let vocab_text = String::from_utf8(read_file(&dir.join(VOCAB_FILE))?)
        .map_err(|e| structural(format!("{}: {e}", dir.join(VOCAB_FILE).display())))?;
    let vocab = Vocabulary::from_json(&vocab_text)?;
    if vocab.hash() != meta.vocab_hash {
        return Err(Error::VocabMismatch {
            checkpoint: meta.vocab_hash.clone(),
            dataset: vocab.hash(),
        });
    }
    let params = ParamStore::from_bytes(&read_file(&dir.join(PARAMS_FILE))?)?;
    let history: Vec<EpochRecord> = serde_json::from_slice(&read_file(&dir.join(HISTORY_FILE))?)?;
    let opt_path = dir.join(OPTIMIZER_FILE);
    let optimizer = if opt_path.exists() {
        Some(ParamStore::from_bytes(&read_file(&opt_path)?)?)
    } else {
        None
    };
    Ok(Checkpoint {
        meta,
        vocab,
        params,
        history,
        optimizer,
    })
}

fn meta_for(state: &TrainState, epoch: usize) -> CheckpointMeta {
    CheckpointMeta {
        config: state.config.clone(),
        epoch,
        val_metric: state.history[epoch - 1].val_bleu4,
        vocab_hash: state.vocab.hash(),
        seed: state.config.seed,
        dims: state.model.dims.clone(),
        vocab_size: state.model.vocab_size,
        best_epoch: state.best_epoch,
    }
}

/// Persists the state after an epoch: always `last/`, and `best/` when the
/// epoch just finished is the best so far.
pub fn save_train_state(out_dir: &Path, state: &TrainState) -> Result<()> {
    let epoch = state.epochs_done();
    if epoch == 0 {
        return Err(structural("no completed epoch to save"));
    }
    if state.best_epoch == Some(epoch) {
        let best = Checkpoint {
            meta: meta_for(state, epoch),
            vocab: state.vocab.clone(),
            params: state.model.store.clone(),
            history: state.history.clone(),
            optimizer: None,
        };
        save_checkpoint(&out_dir.join(BEST_DIR), &best)?;
    }
    let last = Checkpoint {
        meta: meta_for(state, epoch),
        vocab: state.vocab.clone(),
        params: state.model.store.clone(),
        history: state.history.clone(),
        optimizer: Some(state.adam.state_store(&state.model.store)),
    };
    save_checkpoint(&out_dir.join(LAST_DIR), &last)
}

/// Restores the state saved by [`save_train_state`]. `config` replaces the
/// stored one, so a resumed run may extend `epochs`; everything that shapes
/// the model or the data order must match.
pub fn load_train_state(out_dir: &Path, config: &TrainConfig) -> Result<TrainState> {
    let last = load_checkpoint(&out_dir.join(LAST_DIR))?;
    let stored = &last.meta.config;
    let same = TrainConfig {
        epochs: stored.epochs,
        patience: stored.patience,
        ..config.clone()
    };
    if &same != stored {
        return Err(Error::Config(
            "resume configuration differs from the checkpoint in more than epochs/patience".into(),
        ));
    }
    let model = last.model()?;
    let opt_state = last
        .optimizer
        .as_ref()
        .ok_or_else(|| structural("last checkpoint has no optimizer state"))?;
    let adam = Adam::from_state_store(config.learning_rate, &model.store, opt_state)?;
    let best_params = match last.meta.best_epoch {
        Some(e) if e == last.meta.epoch => Some(model.store.clone()),
        Some(e) => {
            let best = load_checkpoint(&out_dir.join(BEST_DIR))?;
            if best.meta.epoch != e {
                return Err(structural(format!(
                    "best checkpoint holds epoch {}, expected {e}",
                    best.meta.epoch
                )));
            }
            Some(best.params)
        }
        None => None,
    };
    if last.history.len() != last.meta.epoch {
        return Err(structural("history length does not match the checkpoint epoch"));
    }
    Ok(TrainState {
        config: config.clone(),
        vocab: last.vocab,
        model,
        adam,
        history: last.history,
        best_epoch: last.meta.best_epoch,
        best_params,
    })
}

/// Train / validation / test partition of a corpus (80/10/10 by index).
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Splits {
    pub fn new(corpus: &[VideoSample]) -> Self {
        let (train, val, test) = split_corpus(corpus);
        Self { train, val, test }
    }
}

/// Evaluates the checkpoint in `dir` on `samples` through `branch`.
/// `vocab_source` is the split the checkpoint's vocabulary was built from;
/// its vocabulary must hash to the stored one.
pub fn evaluate_model(
    dir: &Path,
    vocab_source: &[VideoSample],
    samples: &[VideoSample],
    branch: Branch,
) -> Result<MetricReport> {
    let ckpt = load_checkpoint(dir)?;
    let dataset_vocab = build_vocab(vocab_source, ckpt.meta.config.min_freq);
    if dataset_vocab.hash() != ckpt.meta.vocab_hash {
        return Err(Error::VocabMismatch {
            checkpoint: ckpt.meta.vocab_hash.clone(),
            dataset: dataset_vocab.hash(),
        });
    }
    let variant = ckpt.meta.config.variant;
    if branch == Branch::Object && !variant.has_object_decoder() {
        return Err(Error::Contract(format!("variant {variant} has no object branch to evaluate")));
    }
    let model = ckpt.model()?;
    let videos = prepare_all(samples, &ckpt.vocab, variant)?;
    let mut report = evaluate_prepared(&model, &videos, &ckpt.vocab, branch, ckpt.meta.config.max_caption_len)?;
    report.checkpoint = Some(dir.display().to_string());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_dims, tiny_world};
    use crate::model::Variant;
    use crate::synth::generate_corpus;
    use crate::trainer::{init_state, train_from};

    fn tiny_config(variant: Variant, epochs: usize) -> TrainConfig {
        let d = tiny_dims();
        TrainConfig {
            variant,
            batch_size: 4,
            epochs,
            learning_rate: 1e-2,
            patience: 0,
            seed: 3,
            d_model: d.d_model,
            heads: d.heads,
            layers: d.layers,
            ff_dim: d.ff_dim,
            dropout: 0.1,
            gcn_layers: d.gcn_layers,
            max_caption_len: 8,
            ..TrainConfig::default()
        }
    }

    fn corpus() -> Splits {
        Splits::new(&generate_corpus(&tiny_world(), 20).unwrap())
    }

    #[test]
    fn roundtrip_restores_model_exactly() {
        let data = corpus();
        let config = tiny_config(Variant::Full, 1);
        let dir = tempfile::tempdir().unwrap();
        let run = train_from(init_state(&config, &data.train).unwrap(), &data.train, &data.val, |s| {
            save_train_state(dir.path(), s)
        })
        .unwrap();
        let ckpt = load_checkpoint(&dir.path().join(BEST_DIR)).unwrap();
        assert_eq!(ckpt.meta.epoch, 1);
        assert_eq!(ckpt.meta.vocab_hash, run.vocab.hash());
        assert_eq!(ckpt.history, run.history);
        assert!(ckpt.optimizer.is_none());
        assert_eq!(ckpt.model().unwrap().store, run.model.store);
        assert!(load_checkpoint(&dir.path().join(LAST_DIR)).unwrap().optimizer.is_some());
    }

    #[test]
    fn interrupted_run_resumes_from_last() {
        let data = corpus();
        let full = tiny_config(Variant::Full, 3);
        let straight = crate::trainer::train(&full, &data.train, &data.val).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let first = tiny_config(Variant::Full, 2);
        train_from(init_state(&first, &data.train).unwrap(), &data.train, &data.val, |s| {
            save_train_state(dir.path(), s)
        })
        .unwrap();
        let state = load_train_state(dir.path(), &full).unwrap();
        assert_eq!(state.epochs_done(), 2);
        let resumed = train_from(state, &data.train, &data.val, |_| Ok(())).unwrap();
        assert_eq!(resumed.history, straight.history);
        assert_eq!(resumed.model.store, straight.model.store);
    }

    #[test]
    fn resume_rejects_changed_model() {
        let data = corpus();
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(Variant::Full, 1);
        train_from(init_state(&config, &data.train).unwrap(), &data.train, &data.val, |s| {
            save_train_state(dir.path(), s)
        })
        .unwrap();
        let other = TrainConfig {
            variant: Variant::Dense,
            ..config
        };
        assert!(matches!(load_train_state(dir.path(), &other), Err(Error::Config(_))));
    }

    #[test]
    fn rewrite_replaces_previous_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ck");
        let data = corpus();
        let config = tiny_config(Variant::SceneOnly, 1);
        let state = init_state(&config, &data.train).unwrap();
        let mut ckpt = Checkpoint {
            meta: CheckpointMeta {
                config: config.clone(),
                epoch: 1,
                val_metric: 0.5,
                vocab_hash: state.vocab.hash(),
                seed: config.seed,
                dims: state.model.dims.clone(),
                vocab_size: state.model.vocab_size,
                best_epoch: Some(1),
            },
            vocab: state.vocab.clone(),
            params: state.model.store.clone(),
            history: Vec::new(),
            optimizer: Some(ParamStore::new()),
        };
        save_checkpoint(&target, &ckpt).unwrap();
        ckpt.meta.epoch = 2;
        ckpt.optimizer = None;
        save_checkpoint(&target, &ckpt).unwrap();
        let back = load_checkpoint(&target).unwrap();
        assert_eq!(back.meta.epoch, 2);
        assert!(back.optimizer.is_none());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn evaluation_contracts() {
        let data = corpus();
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(Variant::SceneOnly, 1);
        train_from(init_state(&config, &data.train).unwrap(), &data.train, &data.val, |s| {
            save_train_state(dir.path(), s)
        })
        .unwrap();
        let best = dir.path().join(BEST_DIR);
        let report = evaluate_model(&best, &data.train, &data.test, Branch::Scene).unwrap();
        assert_eq!(report.per_video.len(), data.test.len());
        assert_eq!(report.branch, Branch::Scene);
        assert!(matches!(
            evaluate_model(&best, &data.train, &data.test, Branch::Object),
            Err(Error::Contract(_))
        ));
        // A vocabulary built from different captions does not match.
        let mut other = data.train.clone();
        other[0].refs = vec!["a zebra eats a sandwich".into()];
        assert!(matches!(
            evaluate_model(&best, &other, &data.test, Branch::Scene),
            Err(Error::VocabMismatch { .. })
        ));
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        assert_eq!(MetricReport::load(&path).unwrap(), report);
    }
}
