//! Length-dependent framing of a fused audio sequence.
//!
//! A sequence of `T` timesteps is cut into `W` overlapping frames of `H`
//! timesteps, advancing `S` timesteps between frames, where
//! `H = floor(T * eta_kernel / ref_window)` and `S = floor(T * eta_stride / ref_window)`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Default divisor applied to `T * eta` when sizing kernels and strides.
pub const DEFAULT_REF_WINDOW: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelParams {
    pub eta_kernel: f64,
    pub eta_stride: f64,
    pub ref_window: f64,
    /// Source length `T`.
    pub steps: usize,
    /// Kernel size `H`.
    pub kernel: usize,
    /// Stride `S`.
    pub stride: usize,
    /// Frame count `W`.
    pub frames: usize,
}

impl KernelParams {
    pub fn new(steps: usize, eta_kernel: f64, eta_stride: f64) -> Result<Self> {
        Self::with_ref_window(steps, eta_kernel, eta_stride, DEFAULT_REF_WINDOW)
    }

    pub fn with_ref_window(
        steps: usize,
        eta_kernel: f64,
        eta_stride: f64,
        ref_window: f64,
    ) -> Result<Self> {
        if !(eta_kernel.is_finite() && eta_stride.is_finite() && ref_window.is_finite())
            || eta_stride <= 0.0
            || eta_kernel <= 0.0
            || ref_window <= 0.0
        {
            return Err(Error::Config(format!(
                "eta_kernel={eta_kernel}, eta_stride={eta_stride}, ref_window={ref_window} must be positive"
            )));
        }
        if eta_stride > eta_kernel {
            return Err(Error::Config(format!(
                "eta_stride ({eta_stride}) must not exceed eta_kernel ({eta_kernel})"
            )));
        }
        let size = |eta: f64| (steps as f64 * eta / ref_window).floor() as usize;
        let kernel = size(eta_kernel);
        let stride = size(eta_stride);
        if kernel < 1 || stride < 1 {
            return Err(Error::SequenceTooShort {
                t: steps,
                kernel,
                stride,
            });
        }
        if kernel > steps {
            return Err(Error::KernelExceedsLength { t: steps, kernel });
        }
        Ok(Self {
            eta_kernel,
            eta_stride,
            ref_window,
            steps,
            kernel,
            stride,
            frames: (steps - kernel) / stride + 1,
        })
    }

    /// Framing with explicit kernel and stride sizes; the eta fields are left at zero.
    pub fn from_sizes(steps: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel < 1 || stride < 1 {
            return Err(Error::SequenceTooShort {
                t: steps,
                kernel,
                stride,
            });
        }
        if kernel > steps {
            return Err(Error::KernelExceedsLength { t: steps, kernel });
        }
        Ok(Self {
            eta_kernel: 0.0,
            eta_stride: 0.0,
            ref_window: DEFAULT_REF_WINDOW,
            steps,
            kernel,
            stride,
            frames: (steps - kernel) / stride + 1,
        })
    }

    /// Timesteps actually read by the frames; later ones are dropped.
    pub fn covered_steps(&self) -> usize {
        (self.frames - 1) * self.stride + self.kernel
    }
}

/// Materialized frames, indexed `[frame v][kernel position h][dim d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    frames: usize,
    kernel: usize,
    dim: usize,
    stride: usize,
    source_steps: usize,
    data: Vec<f64>,
}

impl FrameTensor {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn source_steps(&self) -> usize {
        self.source_steps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn vector(&self, v: usize, h: usize) -> &[f64] {
        let start = (v * self.kernel + h) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Source timestep read by slot `(v, h)`.
    pub fn source_index(&self, v: usize, h: usize) -> usize {
        v * self.stride + h
    }

    /// Sum slot gradients (`W x H x D`) back onto source timesteps (`T x D`).
    ///
    /// Slots are accumulated in increasing `(v, h)` order.
    pub fn fold_back(&self, slot_grads: &[f64]) -> Result<Vec<f64>> {
        if slot_grads.len() != self.data.len() {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                found: slot_grads.len(),
            });
        }
        let d = self.dim;
        let mut out = vec![0.0; self.source_steps * d];
        for v in 0..self.frames {
            for h in 0..self.kernel {
                let src = self.source_index(v, h) * d;
                let slot = (v * self.kernel + h) * d;
                for k in 0..d {
                    out[src + k] += slot_grads[slot + k];
                }
            }
        }
        Ok(out)
    }
}

/// Cut a `T x D` row-major sequence into frames.
pub fn unfold(sequence: &[f64], dim: usize, params: &KernelParams) -> Result<FrameTensor> {
    if dim == 0 || sequence.len() != params.steps * dim {
        return Err(Error::ParamMismatch(format!(
            "sequence holds {} values, params expect T={} with D={dim}",
            sequence.len(),
            params.steps
        )));
    }
    if params.kernel == 0
        || params.stride == 0
        || params.frames == 0
        || params.covered_steps() > params.steps
    {
        return Err(Error::ParamMismatch(format!(
            "inconsistent framing H={} S={} W={} for T={}",
            params.kernel, params.stride, params.frames, params.steps
        )));
    }
    let mut data = Vec::with_capacity(params.frames * params.kernel * dim);
    for v in 0..params.frames {
        let start = v * params.stride * dim;
        data.extend_from_slice(&sequence[start..start + params.kernel * dim]);
    }
    Ok(FrameTensor {
        frames: params.frames,
        kernel: params.kernel,
        dim,
        stride: params.stride,
        source_steps: params.steps,
        data,
    })
}
