//! Pairwise audio/text alignment: similarity grid, the two attention maps,
//! attention-pooled scores and their weighted fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing::FrameTensor;
use crate::matrix::{dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Weight of the kernel-pooled score.
    pub gamma_kernel: f64,
    /// Weight of the temporally pooled score.
    pub gamma_temporal: f64,
    /// Cosine similarity when true, raw dot product otherwise.
    pub normalize: bool,
    /// Fused scores are divided by this before the loss.
    pub temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gamma_kernel: 0.5,
            gamma_temporal: 0.5,
            normalize: true,
            temperature: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.gamma_kernel.is_finite() && self.gamma_temporal.is_finite()) {
            return Err(Error::Config("fusion weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentResult {
    /// `W x H` similarities.
    pub similarity: Matrix,
    /// Softmax over kernel positions within each frame (rows sum to one).
    pub kernel_attention: Matrix,
    /// Softmax over frames at each kernel position (columns sum to one).
    pub temporal_attention: Matrix,
    pub kernel_score: f64,
    pub temporal_score: f64,
    /// Fused score, already divided by the temperature.
    pub score: f64,
}

pub fn similarity_matrix(frames: &FrameTensor, text: &[f64], normalize: bool) -> Result<Matrix> {
    if frames.dim() != text.len() {
        return Err(Error::DimensionMismatch {
            expected: frames.dim(),
            found: text.len(),
        });
    }
    let text_norm = norm(text);
    if normalize && text_norm == 0.0 {
        return Err(Error::DegenerateInput(
            "zero text vector under normalization".into(),
        ));
    }
    Ok(Matrix::from_fn(frames.frames(), frames.kernel(), |v, h| {
        let x = frames.vector(v, h);
        let raw = dot(x, text);
        if normalize {
            let xn = norm(x);
            if xn == 0.0 {
                0.0
            } else {
                raw / (xn * text_norm)
            }
        } else {
            raw
        }
    }))
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Data(
            "similarity matrix has non-finite entries".into(),
        ))
    }
}

/// Softmax across each row: `A[v][h] = exp(M[v][h]) / sum_k exp(M[v][k])`.
pub fn kernel_attention(m: &Matrix) -> Result<Matrix> {
    check_finite(m)?;
    let (rows, cols) = m.shape();
    let mut out = Matrix::zeros(rows, cols);
    for v in 0..rows {
        let max = (0..cols)
            .map(|h| m.get(v, h))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for h in 0..cols {
            let e = (m.get(v, h) - max).exp();
            out.set(v, h, e);
            sum += e;
        }
        for h in 0..cols {
            out.set(v, h, out.get(v, h) / sum);
        }
    }
    Ok(out)
}

/// Softmax down each column: `A[v][h] = exp(M[v][h]) / sum_l exp(M[l][h])`.
pub fn temporal_attention(m: &Matrix) -> Result<Matrix> {
    check_finite(m)?;
    let (rows, cols) = m.shape();
    let mut out = Matrix::zeros(rows, cols);
    for h in 0..cols {
        let max = (0..rows)
            .map(|v| m.get(v, h))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in 0..rows {
            let e = (m.get(v, h) - max).exp();
            out.set(v, h, e);
            sum += e;
        }
        for v in 0..rows {
            out.set(v, h, out.get(v, h) / sum);
        }
    }
    Ok(out)
}

/// `(r_K, r_T)` with `r_K = sum(M * A_K) / H` and `r_T = sum(M * A_T) / W`.
pub fn pooled_scores(
    m: &Matrix,
    kernel_att: &Matrix,
    temporal_att: &Matrix,
    kernel: usize,
    frames: usize,
) -> Result<(f64, f64)> {
    let shape = (frames, kernel);
    for other in [m.shape(), kernel_att.shape(), temporal_att.shape()] {
        if other != shape {
            return Err(Error::DimensionMismatch {
                expected: frames * kernel,
                found: other.0 * other.1,
            });
        }
    }
    let mut rk = 0.0;
    let mut rt = 0.0;
    for v in 0..frames {
        for h in 0..kernel {
            let s = m.get(v, h);
            rk += s * kernel_att.get(v, h);
            rt += s * temporal_att.get(v, h);
        }
    }
    Ok((rk / kernel as f64, rt / frames as f64))
}

pub fn fused_score(kernel_score: f64, temporal_score: f64, cfg: &FusionConfig) -> f64 {
    (cfg.gamma_kernel * kernel_score + cfg.gamma_temporal * temporal_score) / cfg.temperature
}

pub fn align(frames: &FrameTensor, text: &[f64], cfg: &FusionConfig) -> Result<AlignmentResult> {
    cfg.validate()?;
    let similarity = similarity_matrix(frames, text, cfg.normalize)?;
    align_similarity(similarity, cfg)
}

/// Everything after the similarity grid, for callers that computed it themselves.
pub fn align_similarity(similarity: Matrix, cfg: &FusionConfig) -> Result<AlignmentResult> {
    let kernel_attention = kernel_attention(&similarity)?;
    let temporal_attention = temporal_attention(&similarity)?;
    let (frames, kernel) = similarity.shape();
    let (kernel_score, temporal_score) = pooled_scores(
        &similarity,
        &kernel_attention,
        &temporal_attention,
        kernel,
        frames,
    )?;
    Ok(AlignmentResult {
        score: fused_score(kernel_score, temporal_score, cfg),
        similarity,
        kernel_attention,
        temporal_attention,
        kernel_score,
        temporal_score,
    })
}

/// Derivative of the fused score with respect to every similarity entry.
///
/// For a softmax-weighted mean `f = sum_k m_k p_k` the derivative is
/// `p_k (1 + m_k - f)`; attentions are differentiated, not held fixed.
pub fn score_grad_similarity(res: &AlignmentResult, cfg: &FusionConfig) -> Matrix {
    let m = &res.similarity;
    let (frames, kernel) = m.shape();
    let row_means: Vec<f64> = (0..frames)
        .map(|v| {
            (0..kernel)
                .map(|h| m.get(v, h) * res.kernel_attention.get(v, h))
                .sum()
        })
        .collect();
    let col_means: Vec<f64> = (0..kernel)
        .map(|h| {
            (0..frames)
                .map(|v| m.get(v, h) * res.temporal_attention.get(v, h))
                .sum()
        })
        .collect();
    let wk = cfg.gamma_kernel / (kernel as f64 * cfg.temperature);
    let wt = cfg.gamma_temporal / (frames as f64 * cfg.temperature);
    Matrix::from_fn(frames, kernel, |v, h| {
        let s = m.get(v, h);
        let gk = res.kernel_attention.get(v, h) * (1.0 + s - row_means[v]);
        let gt = res.temporal_attention.get(v, h) * (1.0 + s - col_means[h]);
        wk * gk + wt * gt
    })
}
