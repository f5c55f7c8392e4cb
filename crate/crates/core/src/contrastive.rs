//! In-batch contrastive objective over fused alignment scores, with exact
//! reverse-mode gradients through attention, similarity and framing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::alignment::{align, score_grad_similarity, AlignmentResult, FusionConfig};
use crate::error::{Error, Result};
use crate::framing::{unfold, FrameTensor, KernelParams};
use crate::matrix::{norm, Matrix};
use crate::parallel::par_map;

/// `N x N` fused scores, `r[i][j]` = audio `i` against text `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ScoreMatrix(Matrix);

impl ScoreMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch {
                expected: m.rows(),
                found: m.cols(),
            });
        }
        if m.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if !m.is_finite() {
            return Err(Error::Data("score matrix has non-finite entries".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, audio: usize, text: usize) -> f64 {
        self.0.get(audio, text)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

fn check_batch<T: AsRef<[f64]>>(audios: &[FrameTensor], texts: &[T]) -> Result<usize> {
    if audios.is_empty() || texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if audios.len() != texts.len() {
        return Err(Error::DimensionMismatch {
            expected: audios.len(),
            found: texts.len(),
        });
    }
    let dim = audios[0].dim();
    for t in texts {
        if t.as_ref().len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: t.as_ref().len(),
            });
        }
    }
    for a in audios {
        if a.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: a.dim(),
            });
        }
    }
    Ok(audios.len())
}

fn align_rows<T: AsRef<[f64]> + Sync>(
    audios: &[FrameTensor],
    texts: &[T],
    cfg: &FusionConfig,
    workers: usize,
) -> Result<Vec<Vec<AlignmentResult>>> {
    cfg.validate()?;
    check_batch(audios, texts)?;
    par_map(audios.len(), workers, |i| {
        texts
            .iter()
            .map(|t| align(&audios[i], t.as_ref(), cfg))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect()
}

fn scores_of(rows: &[Vec<AlignmentResult>]) -> Result<ScoreMatrix> {
    let n = rows.len();
    ScoreMatrix::new(Matrix::from_fn(n, n, |i, j| rows[i][j].score))
}

/// Fused score of every audio against every text. Output does not depend on `workers`.
pub fn batch_scores<T: AsRef<[f64]> + Sync>(
    audios: &[FrameTensor],
    texts: &[T],
    cfg: &FusionConfig,
    workers: usize,
) -> Result<ScoreMatrix> {
    scores_of(&align_rows(audios, texts, cfg, workers)?)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn row_loss(m: &Matrix) -> f64 {
    let n = m.rows();
    (0..n)
        .map(|i| log_sum_exp((0..n).map(|j| m.get(i, j))) - m.get(i, i))
        .sum()
}

fn col_loss(m: &Matrix) -> f64 {
    let n = m.rows();
    (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| m.get(i, j))) - m.get(j, j))
        .sum()
}

/// Cross-entropy of each audio row against its matched text, summed over the batch.
///
/// With `symmetric`, the mean of the row-wise and column-wise losses.
pub fn nce_loss(scores: &ScoreMatrix, symmetric: bool) -> Result<f64> {
    let m = scores.matrix();
    if !m.is_finite() {
        return Err(Error::Data("non-finite scores".into()));
    }
    let rows = row_loss(m);
    Ok(if symmetric {
        0.5 * (rows + col_loss(m))
    } else {
        rows
    })
}

/// `dL/dr[i][j]`: softmax minus one-hot, per direction.
pub fn loss_grad_scores(scores: &ScoreMatrix, symmetric: bool) -> Result<Matrix> {
    let m = scores.matrix();
    if !m.is_finite() {
        return Err(Error::Data("non-finite scores".into()));
    }
    let n = m.rows();
    let mut g = Matrix::zeros(n, n);
    let weight = if symmetric { 0.5 } else { 1.0 };
    for i in 0..n {
        let lse = log_sum_exp((0..n).map(|j| m.get(i, j)));
        for j in 0..n {
            let p = (m.get(i, j) - lse).exp();
            let target = if i == j { 1.0 } else { 0.0 };
            g.set(i, j, weight * (p - target));
        }
    }
    if symmetric {
        for j in 0..n {
            let lse = log_sum_exp((0..n).map(|i| m.get(i, j)));
            for i in 0..n {
                let p = (m.get(i, j) - lse).exp();
                let target = if i == j { 1.0 } else { 0.0 };
                g.set(i, j, g.get(i, j) + 0.5 * (p - target));
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientBundle {
    pub loss: f64,
    pub scores: ScoreMatrix,
    /// One `D` vector per text.
    pub d_text: Vec<Vec<f64>>,
    /// One `T x D` sequence per audio, overlapping frame slots summed.
    pub d_audio: Vec<Vec<f64>>,
    pub d_gamma_kernel: f64,
    pub d_gamma_temporal: f64,
}

struct AudioPartial {
    d_audio: Vec<f64>,
    d_text: Vec<Vec<f64>>,
    d_gamma_kernel: f64,
    d_gamma_temporal: f64,
}

/// Accumulate `weight * dM[v][h]` onto frame slots and the text vector.
fn pair_backward(
    frames: &FrameTensor,
    text: &[f64],
    res: &AlignmentResult,
    cfg: &FusionConfig,
    weight: f64,
    d_slots: &mut [f64],
    d_text: &mut [f64],
) {
    let dm = score_grad_similarity(res, cfg);
    let d = frames.dim();
    let tn = norm(text);
    for v in 0..frames.frames() {
        for h in 0..frames.kernel() {
            let g = weight * dm.get(v, h);
            let x = frames.vector(v, h);
            let slot = &mut d_slots[(v * frames.kernel() + h) * d..][..d];
            if cfg.normalize {
                let xn = norm(x);
                if xn == 0.0 {
                    continue;
                }
                let s = res.similarity.get(v, h);
                let inv = 1.0 / (xn * tn);
                let sx = s / (xn * xn);
                let st = s / (tn * tn);
                for k in 0..d {
                    slot[k] += g * (text[k] * inv - sx * x[k]);
                    d_text[k] += g * (x[k] * inv - st * text[k]);
                }
            } else {
                for k in 0..d {
                    slot[k] += g * text[k];
                    d_text[k] += g * x[k];
                }
            }
        }
    }
}

/// Loss and exact gradients for a batch. Output does not depend on `workers`:
/// per-audio partials are computed independently and reduced in index order.
pub fn backprop<T: AsRef<[f64]> + Sync>(
    audios: &[FrameTensor],
    texts: &[T],
    cfg: &FusionConfig,
    symmetric: bool,
    workers: usize,
) -> Result<GradientBundle> {
    let rows = align_rows(audios, texts, cfg, workers)?;
    let scores = scores_of(&rows)?;
    let loss = nce_loss(&scores, symmetric)?;
    let grad = loss_grad_scores(&scores, symmetric)?;
    let n = audios.len();
    let dim = audios[0].dim();

    let partials = par_map(n, workers, |i| {
        let frames = &audios[i];
        let mut d_slots = vec![0.0; frames.data().len()];
        let mut d_text = vec![vec![0.0; dim]; n];
        let mut dgk = 0.0;
        let mut dgt = 0.0;
        for j in 0..n {
            let g = grad.get(i, j);
            let res = &rows[i][j];
            dgk += g * res.kernel_score / cfg.temperature;
            dgt += g * res.temporal_score / cfg.temperature;
            pair_backward(
                frames,
                texts[j].as_ref(),
                res,
                cfg,
                g,
                &mut d_slots,
                &mut d_text[j],
            );
        }
        AudioPartial {
            d_audio: frames.fold_back(&d_slots).expect("slot gradient shape"),
            d_text,
            d_gamma_kernel: dgk,
            d_gamma_temporal: dgt,
        }
    });

    let mut d_text = vec![vec![0.0; dim]; n];
    let mut d_audio = Vec::with_capacity(n);
    let mut d_gamma_kernel = 0.0;
    let mut d_gamma_temporal = 0.0;
    for p in partials {
        for (acc, contrib) in d_text.iter_mut().zip(&p.d_text) {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        d_gamma_kernel += p.d_gamma_kernel;
        d_gamma_temporal += p.d_gamma_temporal;
        d_audio.push(p.d_audio);
    }
    Ok(GradientBundle {
        loss,
        scores,
        d_text,
        d_audio,
        d_gamma_kernel,
        d_gamma_temporal,
    })
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Central difference `(f(x + eps) - f(x - eps)) / 2 eps`.
pub fn central_difference(eps: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn new(seed: u64, epsilon: f64, tolerance: f64, groups: Vec<GroupError>) -> Self {
        let passed = groups.iter().all(|g| g.max_relative_error <= tolerance);
        Self {
            seed,
            epsilon,
            tolerance,
            groups,
            passed,
        }
    }

    pub fn max_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.group == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckSizes {
    pub batch: usize,
    pub dim: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub eta_kernel: f64,
    pub eta_stride: f64,
}

impl Default for GradCheckSizes {
    fn default() -> Self {
        Self {
            batch: 4,
            dim: 8,
            min_steps: 20,
            max_steps: 40,
            eta_kernel: 6.0,
            eta_stride: 3.0,
        }
    }
}

/// A random batch of raw sequences and text vectors for gradient checking.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub seed: u64,
    pub sequences: Vec<Vec<f64>>,
    pub params: Vec<KernelParams>,
    pub texts: Vec<Vec<f64>>,
    pub dim: usize,
    pub cfg: FusionConfig,
    pub symmetric: bool,
}

impl GradCheckInstance {
    pub fn random(
        seed: u64,
        sizes: &GradCheckSizes,
        cfg: FusionConfig,
        symmetric: bool,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sequences = Vec::with_capacity(sizes.batch);
        let mut params = Vec::with_capacity(sizes.batch);
        for _ in 0..sizes.batch {
            let t = rng.random_range(sizes.min_steps..=sizes.max_steps);
            params.push(KernelParams::new(t, sizes.eta_kernel, sizes.eta_stride)?);
            sequences.push(
                (0..t * sizes.dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect(),
            );
        }
        let texts = (0..sizes.batch)
            .map(|_| (0..sizes.dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(Self {
            seed,
            sequences,
            params,
            texts,
            dim: sizes.dim,
            cfg,
            symmetric,
        })
    }

    fn frames_of(&self, sequences: &[Vec<f64>]) -> Vec<FrameTensor> {
        sequences
            .iter()
            .zip(&self.params)
            .map(|(s, p)| unfold(s, self.dim, p).expect("instance framing"))
            .collect()
    }

    fn loss_with(&self, sequences: &[Vec<f64>], texts: &[Vec<f64>], cfg: &FusionConfig) -> f64 {
        let frames = self.frames_of(sequences);
        let scores = batch_scores(&frames, texts, cfg, 1).expect("instance scores");
        nce_loss(&scores, self.symmetric).expect("instance loss")
    }

    pub fn loss(&self) -> f64 {
        self.loss_with(&self.sequences, &self.texts, &self.cfg)
    }

    pub fn analytic(&self) -> Result<GradientBundle> {
        backprop(
            &self.frames_of(&self.sequences),
            &self.texts,
            &self.cfg,
            self.symmetric,
            1,
        )
    }

    /// Compare `bundle` coordinate by coordinate against central differences.
    pub fn compare(
        &self,
        bundle: &GradientBundle,
        epsilon: f64,
        tolerance: f64,
    ) -> GradCheckReport {
        let mut texts = self.texts.clone();
        let mut text_err = 0.0f64;
        let mut text_coords = 0;
        for j in 0..texts.len() {
            for k in 0..self.dim {
                let base = texts[j][k];
                let fd = central_difference(epsilon, |e| {
                    texts[j][k] = base + e;
                    self.loss_with(&self.sequences, &texts, &self.cfg)
                });
                texts[j][k] = base;
                text_err = text_err.max(relative_error(bundle.d_text[j][k], fd));
                text_coords += 1;
            }
        }

        let mut seqs = self.sequences.clone();
        let mut audio_err = 0.0f64;
        let mut audio_coords = 0;
        for i in 0..seqs.len() {
            for k in 0..seqs[i].len() {
                let base = seqs[i][k];
                let fd = central_difference(epsilon, |e| {
                    seqs[i][k] = base + e;
                    self.loss_with(&seqs, &self.texts, &self.cfg)
                });
                seqs[i][k] = base;
                audio_err = audio_err.max(relative_error(bundle.d_audio[i][k], fd));
                audio_coords += 1;
            }
        }

        let fd_gk = central_difference(epsilon, |e| {
            let cfg = FusionConfig {
                gamma_kernel: self.cfg.gamma_kernel + e,
                ..self.cfg
            };
            self.loss_with(&self.sequences, &self.texts, &cfg)
        });
        let fd_gt = central_difference(epsilon, |e| {
            let cfg = FusionConfig {
                gamma_temporal: self.cfg.gamma_temporal + e,
                ..self.cfg
            };
            self.loss_with(&self.sequences, &self.texts, &cfg)
        });
        let gamma_err = relative_error(bundle.d_gamma_kernel, fd_gk)
            .max(relative_error(bundle.d_gamma_temporal, fd_gt));

        GradCheckReport::new(
            self.seed,
            epsilon,
            tolerance,
            vec![
                GroupError {
                    group: "text".into(),
                    coordinates: text_coords,
                    max_relative_error: text_err,
                },
                GroupError {
                    group: "audio".into(),
                    coordinates: audio_coords,
                    max_relative_error: audio_err,
                },
                GroupError {
                    group: "gamma".into(),
                    coordinates: 2,
                    max_relative_error: gamma_err,
                },
            ],
        )
    }
}

/// Finite-difference check of [`backprop`] on a seeded random batch.
pub fn grad_check(
    seed: u64,
    sizes: &GradCheckSizes,
    cfg: FusionConfig,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let inst = GradCheckInstance::random(seed, sizes, cfg, false)?;
    let bundle = inst.analytic()?;
    Ok(inst.compare(&bundle, epsilon, tolerance))
}
