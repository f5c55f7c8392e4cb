use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Affine map applied row by row: `y = W^T x + b`, with `W` stored `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn random(in_dim: usize, out_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let weight = (0..in_dim * out_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let w = &self.weight[k * self.out_dim..(k + 1) * self.out_dim];
            for (o, &wkd) in out.iter_mut().zip(w) {
                *o += xk * wkd;
            }
        }
    }

    /// Rows of `x` (`rows x in_dim`) mapped to `rows x out_dim`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !x.len().is_multiple_of(self.in_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                found: x.len(),
            });
        }
        let rows = x.len() / self.in_dim;
        let mut out = vec![0.0; rows * self.out_dim];
        for r in 0..rows {
            self.forward_row(
                &x[r * self.in_dim..(r + 1) * self.in_dim],
                &mut out[r * self.out_dim..(r + 1) * self.out_dim],
            );
        }
        Ok(out)
    }

    /// Accumulate weight and bias gradients for upstream `d_out` at inputs `x`.
    pub fn accumulate_grad(
        &self,
        x: &[f64],
        d_out: &[f64],
        d_weight: &mut [f64],
        d_bias: &mut [f64],
    ) {
        let rows = x.len() / self.in_dim;
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            let dr = &d_out[r * self.out_dim..(r + 1) * self.out_dim];
            for (b, &g) in d_bias.iter_mut().zip(dr) {
                *b += g;
            }
            for (k, &xk) in xr.iter().enumerate() {
                let dw = &mut d_weight[k * self.out_dim..(k + 1) * self.out_dim];
                for (w, &g) in dw.iter_mut().zip(dr) {
                    *w += xk * g;
                }
            }
        }
    }
}

/// Per-timestep concatenation `[music[t], speech[t]]`.
pub fn concat_streams(
    music: &[f64],
    dim_music: usize,
    speech: &[f64],
    dim_speech: usize,
) -> Result<Vec<f64>> {
    if dim_music == 0 || !music.len().is_multiple_of(dim_music) {
        return Err(Error::DimensionMismatch {
            expected: dim_music,
            found: music.len(),
        });
    }
    let steps = music.len() / dim_music;
    if speech.len() != steps * dim_speech {
        return Err(Error::DimensionMismatch {
            expected: steps * dim_speech,
            found: speech.len(),
        });
    }
    let mut out = Vec::with_capacity(steps * (dim_music + dim_speech));
    for t in 0..steps {
        out.extend_from_slice(&music[t * dim_music..(t + 1) * dim_music]);
        out.extend_from_slice(&speech[t * dim_speech..(t + 1) * dim_speech]);
    }
    Ok(out)
}

/// Fuse music and speech streams of equal length through the adapter into `T x D`.
pub fn adapter_forward(
    music: &[f64],
    dim_music: usize,
    speech: &[f64],
    dim_speech: usize,
    adapter: &Linear,
) -> Result<Vec<f64>> {
    if adapter.in_dim != dim_music + dim_speech {
        return Err(Error::DimensionMismatch {
            expected: adapter.in_dim,
            found: dim_music + dim_speech,
        });
    }
    adapter.forward(&concat_streams(music, dim_music, speech, dim_speech)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelDims {
    pub music: usize,
    pub speech: usize,
    pub text: usize,
    pub dim: usize,
}

/// Parameters of the desk-scale model and their optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: ModelDims,
    /// `None` feeds the concatenated streams straight into alignment.
    pub adapter: Option<Linear>,
    pub text: Linear,
    pub gamma_kernel: f64,
    pub gamma_temporal: f64,
    /// Adam first/second moments, one pair per tensor in [`ToyModel::tensors`]
    /// order followed by one for `[gamma_kernel, gamma_temporal]`.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
    /// Completed optimizer steps.
    pub step: u64,
}

pub const ADAPTER_WEIGHT: &str = "adapter.weight";
pub const ADAPTER_BIAS: &str = "adapter.bias";
pub const TEXT_WEIGHT: &str = "text.weight";
pub const TEXT_BIAS: &str = "text.bias";
pub const GAMMA: &str = "gamma";

/// A named parameter tensor in row-major form.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorView<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub values: &'a [f64],
}

impl ToyModel {
    pub fn new(
        dims: ModelDims,
        use_adapter: bool,
        init_std: f64,
        gammas: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if !use_adapter && dims.dim != dims.music + dims.speech {
            return Err(Error::Config(format!(
                "without an adapter the fused width must be {} (music + speech), got {}",
                dims.music + dims.speech,
                dims.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapter = use_adapter
            .then(|| Linear::random(dims.music + dims.speech, dims.dim, init_std, &mut rng));
        let text = Linear::random(dims.text, dims.dim, init_std, &mut rng);
        let mut model = Self {
            dims,
            adapter,
            text,
            gamma_kernel: gammas.0,
            gamma_temporal: gammas.1,
            moments: Vec::new(),
            step: 0,
        };
        model.moments = model
            .tensors()
            .iter()
            .map(|t| (vec![0.0; t.values.len()], vec![0.0; t.values.len()]))
            .collect();
        model.moments.push((vec![0.0; 2], vec![0.0; 2]));
        Ok(model)
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::with_capacity(5);
        if let Some(a) = &self.adapter {
            out.push(TensorView {
                name: ADAPTER_WEIGHT,
                rows: a.in_dim,
                cols: a.out_dim,
                values: &a.weight,
            });
            out.push(TensorView {
                name: ADAPTER_BIAS,
                rows: 1,
                cols: a.out_dim,
                values: &a.bias,
            });
        }
        out.push(TensorView {
            name: TEXT_WEIGHT,
            rows: self.text.in_dim,
            cols: self.text.out_dim,
            values: &self.text.weight,
        });
        out.push(TensorView {
            name: TEXT_BIAS,
            rows: 1,
            cols: self.text.out_dim,
            values: &self.text.bias,
        });
        out
    }

    /// Mutable parameter slices in [`ToyModel::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::with_capacity(4);
        if let Some(a) = &mut self.adapter {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        out.push(&mut self.text.weight);
        out.push(&mut self.text.bias);
        out
    }

    /// Fused `T x D` audio sequence.
    pub fn encode_audio(&self, music: &[f64], speech: &[f64]) -> Result<Vec<f64>> {
        match &self.adapter {
            Some(a) => adapter_forward(music, self.dims.music, speech, self.dims.speech, a),
            None => concat_streams(music, self.dims.music, speech, self.dims.speech),
        }
    }

    pub fn encode_text(&self, text: &[f64]) -> Result<Vec<f64>> {
        if text.len() != self.text.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.text.in_dim,
                found: text.len(),
            });
        }
        self.text.forward(text)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.values.iter().all(|x| x.is_finite()))
            && self.gamma_kernel.is_finite()
            && self.gamma_temporal.is_finite()
    }
}
