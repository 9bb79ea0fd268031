//! Caption metrics (corpus BLEU@4, ROUGE-L, token accuracy) and reports.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::argmax;
use crate::error::{io_err, structural, Result};
use crate::model::{Branch, CaptionModel, PreparedVideo};
use crate::params::Mat;
use crate::vocab::{Vocabulary, PAD};

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    out
}

/// Clipped n-gram matches and candidate n-gram total for one sentence.
fn clipped<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in refs {
        for (g, k) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(k);
        }
    }
    let hits = c
        .iter()
        .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (hits, cand.len().saturating_sub(n - 1))
}

/// Corpus-level BLEU@4 with uniform weights, clipped counts and the brevity
/// penalty; no smoothing. The effective reference length per sentence is the
/// reference length closest to the candidate's (shorter wins ties).
pub fn bleu4<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(structural("BLEU of an empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(structural(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(structural("candidate without references"));
        }
        for n in 1..=4 {
            let (h, t) = clipped(c, refs, n);
            hits[n - 1] += h;
            totals[n - 1] += t;
        }
        cand_len += c.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty references");
    }
    if hits.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (h as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (β = 1), maximized over references.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> Result<f64> {
    if candidate.is_empty() || references.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(structural("ROUGE-L needs a non-empty candidate and references"));
    }
    Ok(references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            2.0 * p * rec / (p + rec)
        })
        .fold(0.0, f64::max))
}

/// Fraction of non-PAD targets whose row argmax equals the target. Zero,
/// with a warning, when there is nothing to count.
pub fn token_accuracy(logits: &[Mat], targets: &[Vec<usize>]) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for (l, t) in logits.iter().zip(targets) {
        for (row, &id) in l.rows().into_iter().zip(t) {
            if id == PAD {
                continue;
            }
            n += 1;
            hit += usize::from(argmax(row) == id);
        }
    }
    if n == 0 {
        log::warn!("token accuracy over zero positions");
        return 0.0;
    }
    hit as f64 / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub candidate: String,
    pub refs: Vec<String>,
    pub bleu4: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Scores,
    pub per_video: Vec<VideoRecord>,
    pub checkpoint: Option<String>,
    pub branch: Branch,
    pub corpus_size: usize,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Greedy-decodes every video through `branch` and scores the result.
/// Empty candidates score 0 on ROUGE-L.
pub fn evaluate_prepared(
    model: &CaptionModel,
    videos: &[PreparedVideo],
    vocab: &Vocabulary,
    branch: Branch,
    max_len: usize,
) -> Result<MetricReport> {
    if videos.is_empty() {
        return Err(structural("evaluation set is empty"));
    }
    let mut cands: Vec<Vec<String>> = Vec::with_capacity(videos.len());
    let mut per_video = Vec::with_capacity(videos.len());
    let mut rouge = 0.0;
    let (mut hit, mut n) = (0usize, 0usize);
    for v in videos {
        let ids = model.greedy_ids(v, branch, max_len)?;
        let text = vocab.decode(&ids);
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        rouge += if tokens.is_empty() { 0.0 } else { rouge_l(&tokens, &v.refs)? };
        per_video.push(VideoRecord {
            id: v.id.clone(),
            candidate: text,
            refs: v.refs.iter().map(|r| r.join(" ")).collect(),
            bleu4: bleu4(std::slice::from_ref(&tokens), std::slice::from_ref(&v.refs))?,
        });
        cands.push(tokens);
        let (h, c) = model.token_matches(v, branch)?;
        hit += h;
        n += c;
    }
    let refs: Vec<Vec<Vec<String>>> = videos.iter().map(|v| v.refs.clone()).collect();
    let token_accuracy = if n == 0 {
        log::warn!("token accuracy over zero positions");
        0.0
    } else {
        hit as f64 / n as f64
    };
    Ok(MetricReport {
        metric: Scores {
            bleu4: bleu4(&cands, &refs)?,
            rouge_l: rouge / videos.len() as f64,
            token_accuracy,
        },
        per_video,
        checkpoint: None,
        branch,
        corpus_size: videos.len(),
    })
}
