//! Recall@k evaluation for text-to-audio and audio-to-text retrieval.
//!
//! Pair `i` of the score matrix is the ground truth for both directions; every
//! query is ranked against the whole candidate pool.

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::alignment::FusionConfig;
use crate::contrastive::{batch_scores, ScoreMatrix};
use crate::error::{Error, Result};
use crate::framing::{unfold, KernelParams, DEFAULT_REF_WINDOW};
use crate::store::{resolve_pairs, EmbeddingStore, PairManifest, Split};

pub const DEFAULT_KS: [usize; 3] = [5, 20, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    T2A,
    A2T,
}

/// Recall values keyed by `k`, serialized as an object in `k` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Recalls(pub Vec<(usize, f64)>);

impl Recalls {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.0.iter().find(|(kk, _)| *kk == k).map(|&(_, r)| r)
    }
}

impl Serialize for Recalls {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, r) in &self.0 {
            map.serialize_entry(&k.to_string(), r)?;
        }
        map.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub n: usize,
    pub recalls: Recalls,
    /// Queries whose true target shared its score with another candidate.
    pub ties_broken: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.get(k)
    }
}

/// 1-based rank of `true_index`; equal scores are ordered by candidate index.
pub fn rank_targets(scores_row: &[f64], true_index: usize) -> Result<usize> {
    rank_with_ties(scores_row, true_index).map(|(rank, _)| rank)
}

fn rank_with_ties(scores_row: &[f64], true_index: usize) -> Result<(usize, bool)> {
    if true_index >= scores_row.len() {
        return Err(Error::Index {
            index: true_index,
            len: scores_row.len(),
        });
    }
    if scores_row.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite retrieval score".into()));
    }
    let target = scores_row[true_index];
    let mut ahead = 0;
    let mut tied = false;
    for (c, &s) in scores_row.iter().enumerate() {
        if s > target {
            ahead += 1;
        } else if s == target && c != true_index {
            tied = true;
            if c < true_index {
                ahead += 1;
            }
        }
    }
    Ok((ahead + 1, tied))
}

fn report(direction: Direction, ranks: &[(usize, bool)], ks: &[usize]) -> RetrievalReport {
    let n = ranks.len();
    let recalls = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|(r, _)| *r <= k).count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    RetrievalReport {
        direction,
        n,
        recalls: Recalls(recalls),
        ties_broken: ranks.iter().filter(|(_, t)| *t).count(),
    }
}

/// Per-query ranks of the true target: `(t2a, a2t)`.
pub fn query_ranks(scores: &ScoreMatrix) -> Result<(Vec<usize>, Vec<usize>)> {
    let (t2a, a2t) = ranks_both(scores)?;
    Ok((
        t2a.into_iter().map(|(r, _)| r).collect(),
        a2t.into_iter().map(|(r, _)| r).collect(),
    ))
}

type RankList = Vec<(usize, bool)>;

fn ranks_both(scores: &ScoreMatrix) -> Result<(RankList, RankList)> {
    let m = scores.matrix();
    let n = scores.n();
    let t2a = (0..n)
        .map(|j| {
            let column: Vec<f64> = (0..n).map(|i| m.get(i, j)).collect();
            rank_with_ties(&column, j)
        })
        .collect::<Result<Vec<_>>>()?;
    let a2t = (0..n)
        .map(|i| rank_with_ties(m.row(i), i))
        .collect::<Result<Vec<_>>>()?;
    Ok((t2a, a2t))
}

/// `(t2a, a2t)` reports. Texts query columns, audios query rows.
pub fn recall_at_k(
    scores: &ScoreMatrix,
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    if let Some(&k) = ks.iter().find(|&&k| k < 1) {
        return Err(Error::InvalidK(k));
    }
    let (t2a, a2t) = ranks_both(scores)?;
    Ok((
        report(Direction::T2A, &t2a, ks),
        report(Direction::A2T, &a2t, ks),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub fusion: FusionConfig,
    pub eta_kernel: f64,
    pub eta_stride: f64,
    pub ref_window: f64,
    pub ks: Vec<usize>,
    pub workers: usize,
    pub model: String,
    pub dataset: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            eta_kernel: 3.0,
            eta_stride: 3.0,
            ref_window: DEFAULT_REF_WINDOW,
            ks: DEFAULT_KS.to_vec(),
            workers: 1,
            model: "tempalign".into(),
            dataset: "eval".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    #[serde(rename = "T2A")]
    pub t2a: f64,
    #[serde(rename = "A2T")]
    pub a2t: f64,
}

/// Table-shaped summary: one row per recall rank, one column per direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub n: usize,
    pub rows: Vec<MetricRow>,
    pub reports: [RetrievalReport; 2],
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn t2a(&self) -> &RetrievalReport {
        &self.reports[0]
    }

    pub fn a2t(&self) -> &RetrievalReport {
        &self.reports[1]
    }

    pub fn from_scores(scores: &ScoreMatrix, cfg: &EvalConfig) -> Result<Self> {
        let (t2a, a2t) = recall_at_k(scores, &cfg.ks)?;
        let rows = cfg
            .ks
            .iter()
            .map(|&k| MetricRow {
                metric: format!("R@{k}"),
                t2a: t2a.recall(k).unwrap_or(0.0),
                a2t: a2t.recall(k).unwrap_or(0.0),
            })
            .collect();
        Ok(Self {
            model: cfg.model.clone(),
            dataset: cfg.dataset.clone(),
            n: scores.n(),
            rows,
            reports: [t2a, a2t],
            config: cfg.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Score every eval-split pair of the manifest and report recall in both directions.
///
/// Audio records are taken as fused sequences in the text embedding space.
pub fn eval_report(
    audio_store: &EmbeddingStore,
    text_store: &EmbeddingStore,
    manifest: &PairManifest,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if audio_store.dim() != text_store.dim() {
        return Err(Error::DimensionMismatch {
            expected: text_store.dim(),
            found: audio_store.dim(),
        });
    }
    let pairs = resolve_pairs(manifest, text_store, audio_store, Split::Eval)?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut frames = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for (text, audio) in &pairs {
        let params = KernelParams::with_ref_window(
            audio.steps(),
            cfg.eta_kernel,
            cfg.eta_stride,
            cfg.ref_window,
        )?;
        frames.push(unfold(audio.data(), audio.dim(), &params)?);
        texts.push(text.data());
    }
    let scores = batch_scores(&frames, &texts, &cfg.fusion, cfg.workers)?;
    EvalReport::from_scores(&scores, cfg)
}
