//! Trains a list of variants over several seeds and tabulates the scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Splits;
use crate::error::{structural, Result};
use crate::metrics::{evaluate_prepared, Scores};
use crate::model::{prepare_all, Branch, Variant};
use crate::trainer::{train, TrainConfig, TrainRun};

/// Mean and sample standard deviation (n − 1; zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val: Scores,
    pub test: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: Vec<SeedResult>,
    pub val_token_accuracy: Stat,
    pub test_bleu4: Stat,
    pub test_rouge_l: Stat,
    pub test_token_accuracy: Stat,
}

impl AblationRow {
    fn from_runs(variant: Variant, runs: Vec<SeedResult>) -> Self {
        let stat = |f: fn(&SeedResult) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            variant,
            val_token_accuracy: stat(|r| r.val.token_accuracy),
            test_bleu4: stat(|r| r.test.bleu4),
            test_rouge_l: stat(|r| r.test.rouge_l),
            test_token_accuracy: stat(|r| r.test.token_accuracy),
            runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned-column text, one line per variant, scores as `mean ± std`.
    pub fn to_text(&self) -> String {
        let header = ["variant", "BLEU@4", "ROUGE-L", "tok acc (test)", "tok acc (val)"];
        let cell = |s: Stat| format!("{:.4} ± {:.4}", s.mean, s.std);
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.name().to_string(),
                    cell(r.test_bleu4),
                    cell(r.test_rouge_l),
                    cell(r.test_token_accuracy),
                    cell(r.val_token_accuracy),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: Vec<&str>| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, header.to_vec());
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, rule.iter().map(String::as_str).collect());
        for row in &body {
            line(&mut out, row.iter().map(String::as_str).collect());
        }
        out
    }
}

/// Scene-branch scores of a finished run on `samples`.
pub fn score_run(run: &TrainRun, samples: &[crate::synth::VideoSample]) -> Result<Scores> {
    let videos = prepare_all(samples, &run.vocab, run.config.variant)?;
    Ok(evaluate_prepared(&run.model, &videos, &run.vocab, Branch::Scene, run.config.max_caption_len)?.metric)
}

/// Trains every variant once per seed on the same splits. `config.variant`
/// and `config.seed` are overridden per run; `on_run` sees each finished run.
pub fn run_ablation_suite(
    config: &TrainConfig,
    splits: &Splits,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&TrainRun, &SeedResult) -> Result<()>,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(structural("ablation needs at least one variant and one seed"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..config.clone()
            };
            let run = train(&cfg, &splits.train, &splits.val)?;
            let result = SeedResult {
                seed,
                best_epoch: run.best_epoch,
                epochs_run: run.history.len(),
                val: score_run(&run, &splits.val)?,
                test: score_run(&run, &splits.test)?,
            };
            log::info!(
                "{variant} seed {seed}: best epoch {} test bleu4 {:.4} val tok {:.4}",
                result.best_epoch,
                result.test.bleu4,
                result.val.token_accuracy
            );
            on_run(&run, &result)?;
            runs.push(result);
        }
        rows.push(AblationRow::from_runs(variant, runs));
    }
    Ok(AblationTable {
        rows,
        seeds: seeds.to_vec(),
    })
}
