//! Seeded synthetic audio/text pairs.
//!
//! Every pair belongs to one of `classes` classes and carries a private
//! instance code `z`. Each source space (music, speech, text) has its own
//! unit-vector class prototypes and its own fixed linear embedding of `z`, so
//! matched audio and text agree on both the class and the instance while
//! living in unrelated coordinate systems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{EmbeddingRecord, PairEntry, PairManifest, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim_music: usize,
    pub dim_speech: usize,
    pub dim_text: usize,
    /// Fused embedding width used by the model.
    pub dim: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Per-timestep (audio) and per-vector (text) Gaussian noise.
    pub noise_sigma: f64,
    pub instance_dim: usize,
    /// Magnitude of the shared instance offset relative to the unit prototypes.
    pub instance_scale: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            dim_music: 16,
            dim_speech: 8,
            dim_text: 16,
            dim: 512,
            min_steps: 30,
            max_steps: 30,
            noise_sigma: 0.05,
            instance_dim: 8,
            instance_scale: 1.0,
            n_train: 256,
            n_eval: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("dim_music", self.dim_music),
            ("dim_text", self.dim_text),
            ("dim", self.dim),
            ("min_steps", self.min_steps),
            ("n_train", self.n_train),
            ("n_eval", self.n_eval),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.max_steps < self.min_steps {
            return Err(Error::Config("max_steps must be >= min_steps".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(
                "noise_sigma must be finite and non-negative".into(),
            ));
        }
        if !(self.instance_scale >= 0.0 && self.instance_scale.is_finite()) {
            return Err(Error::Config(
                "instance_scale must be finite and non-negative".into(),
            ));
        }
        if self.instance_scale > 0.0 && self.instance_dim == 0 {
            return Err(Error::Config(
                "instance_dim must be positive when instance_scale > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One audio/text pair before any learned transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPair {
    pub id: String,
    pub class: usize,
    pub steps: usize,
    /// `T x D_O`.
    pub music: Vec<f64>,
    /// `T x D_S`; empty when there is no speech stream.
    pub speech: Vec<f64>,
    /// `D_T`.
    pub text: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<RawPair>,
    pub eval: Vec<RawPair>,
    pub prototypes_music: Vec<Vec<f64>>,
    pub prototypes_speech: Vec<Vec<f64>>,
    pub prototypes_text: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        let n = crate::matrix::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `dim x instance_dim` matrix with `N(0, 1/dim)` entries.
fn embedding_matrix(rng: &mut ChaCha8Rng, dim: usize, instance_dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    gaussian(rng, dim * instance_dim)
        .into_iter()
        .map(|x| x * scale)
        .collect()
}

fn embed(matrix: &[f64], dim: usize, code: &[f64], scale: f64) -> Vec<f64> {
    let k = code.len();
    (0..dim)
        .map(|r| scale * crate::matrix::dot(&matrix[r * k..(r + 1) * k], code))
        .collect()
}

struct Space {
    dim: usize,
    prototypes: Vec<Vec<f64>>,
    embedding: Vec<f64>,
}

impl Space {
    fn new(rng: &mut ChaCha8Rng, cfg: &SynthConfig, dim: usize) -> Self {
        let prototypes = (0..cfg.classes).map(|_| unit_vector(rng, dim)).collect();
        let embedding = embedding_matrix(rng, dim, cfg.instance_dim);
        Self {
            dim,
            prototypes,
            embedding,
        }
    }

    fn centre(&self, class: usize, code: &[f64], scale: f64) -> Vec<f64> {
        let offset = embed(&self.embedding, self.dim, code, scale);
        self.prototypes[class]
            .iter()
            .zip(offset)
            .map(|(p, o)| p + o)
            .collect()
    }
}

fn noisy_steps(rng: &mut ChaCha8Rng, centre: &[f64], steps: usize, sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps * centre.len());
    for _ in 0..steps {
        for &c in centre {
            let e: f64 = rng.sample(StandardNormal);
            out.push(c + sigma * e);
        }
    }
    out
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let music = Space::new(&mut rng, cfg, cfg.dim_music);
    let speech = Space::new(&mut rng, cfg, cfg.dim_speech);
    let text = Space::new(&mut rng, cfg, cfg.dim_text);
    let code_scale = 1.0 / (cfg.instance_dim.max(1) as f64).sqrt();

    let mut make = |prefix: &str, n: usize| -> Vec<RawPair> {
        (0..n)
            .map(|i| {
                let class = rng.random_range(0..cfg.classes);
                let steps = rng.random_range(cfg.min_steps..=cfg.max_steps);
                let code: Vec<f64> = gaussian(&mut rng, cfg.instance_dim)
                    .into_iter()
                    .map(|x| x * code_scale)
                    .collect();
                let s = cfg.instance_scale;
                let music_seq = noisy_steps(
                    &mut rng,
                    &music.centre(class, &code, s),
                    steps,
                    cfg.noise_sigma,
                );
                let speech_seq = noisy_steps(
                    &mut rng,
                    &speech.centre(class, &code, s),
                    steps,
                    cfg.noise_sigma,
                );
                let text_vec =
                    noisy_steps(&mut rng, &text.centre(class, &code, s), 1, cfg.noise_sigma);
                RawPair {
                    id: format!("{prefix}{i:05}"),
                    class,
                    steps,
                    music: music_seq,
                    speech: speech_seq,
                    text: text_vec,
                }
            })
            .collect()
    };
    let train = make("train", cfg.n_train);
    let eval = make("eval", cfg.n_eval);
    Ok(SynthDataset {
        train,
        eval,
        prototypes_music: music.prototypes,
        prototypes_speech: speech.prototypes,
        prototypes_text: text.prototypes,
    })
}

/// Text, music and speech records plus the manifest.
pub type StoreSet = (
    Vec<EmbeddingRecord>,
    Vec<EmbeddingRecord>,
    Vec<EmbeddingRecord>,
    PairManifest,
);

/// Stores and manifest for a dataset: `(text, music, speech, manifest)`.
///
/// Text ids are `t-<pair id>`, audio ids `a-<pair id>` in both audio stores.
pub fn to_stores(data: &SynthDataset) -> Result<StoreSet> {
    let mut texts = Vec::new();
    let mut music = Vec::new();
    let mut speech = Vec::new();
    let mut entries = Vec::new();
    for (split, pairs) in [(Split::Train, &data.train), (Split::Eval, &data.eval)] {
        for p in pairs {
            let tid = format!("t-{}", p.id);
            let aid = format!("a-{}", p.id);
            texts.push(EmbeddingRecord::text(tid.clone(), p.text.clone())?);
            let dm = p.music.len() / p.steps;
            music.push(EmbeddingRecord::audio(
                aid.clone(),
                p.steps,
                dm,
                p.music.clone(),
            )?);
            if !p.speech.is_empty() {
                let ds = p.speech.len() / p.steps;
                speech.push(EmbeddingRecord::audio(
                    aid.clone(),
                    p.steps,
                    ds,
                    p.speech.clone(),
                )?);
            }
            entries.push(PairEntry {
                text_id: tid,
                audio_id: aid,
                split,
            });
        }
    }
    Ok((texts, music, speech, PairManifest::new(entries)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{dot, norm};

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 20,
            n_eval: 6,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_dataset(&small()).unwrap(),
            synth_dataset(&small()).unwrap()
        );
        let other = SynthConfig {
            seed: 12,
            ..small()
        };
        assert_ne!(
            synth_dataset(&small()).unwrap(),
            synth_dataset(&other).unwrap()
        );
    }

    #[test]
    fn noiseless_tracks_are_constant() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let data = synth_dataset(&cfg).unwrap();
        for p in &data.train {
            let d = cfg.dim_music;
            for t in 1..p.steps {
                assert_eq!(&p.music[t * d..(t + 1) * d], &p.music[..d]);
            }
        }
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            instance_scale: 0.0,
            ..small()
        };
        let data = synth_dataset(&cfg).unwrap();
        for p in data.train.iter().chain(&data.eval) {
            let d = cfg.dim_music;
            for t in 0..p.steps {
                assert_eq!(
                    &p.music[t * d..(t + 1) * d],
                    &data.prototypes_music[p.class][..]
                );
            }
            assert_eq!(p.text, data.prototypes_text[p.class]);
        }
    }

    #[test]
    fn shapes() {
        let cfg = small();
        let data = synth_dataset(&cfg).unwrap();
        assert_eq!(data.train.len(), 20);
        assert_eq!(data.eval.len(), 6);
        for p in &data.train {
            assert!((cfg.min_steps..=cfg.max_steps).contains(&p.steps));
            assert_eq!(p.music.len(), p.steps * cfg.dim_music);
            assert_eq!(p.speech.len(), p.steps * cfg.dim_speech);
            assert_eq!(p.text.len(), cfg.dim_text);
        }
        for proto in &data.prototypes_text {
            assert!((norm(proto) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_closer_to_own_prototype() {
        let cfg = SynthConfig {
            n_train: 400,
            noise_sigma: 0.1,
            ..small()
        };
        let data = synth_dataset(&cfg).unwrap();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for p in &data.train {
            for (c, proto) in data.prototypes_text.iter().enumerate() {
                let cos = dot(&p.text, proto) / norm(&p.text);
                if c == p.class {
                    within += cos;
                    nw += 1;
                } else {
                    across += cos;
                    na += 1;
                }
            }
        }
        assert!(within / nw as f64 > across / na as f64 + 0.3);
    }

    #[test]
    fn store_export() {
        let data = synth_dataset(&small()).unwrap();
        let (t, m, s, manifest) = to_stores(&data).unwrap();
        assert_eq!(t.len(), 26);
        assert_eq!(m.len(), 26);
        assert_eq!(s.len(), 26);
        assert_eq!(manifest.len(), 26);
        assert_eq!(manifest.entries()[20].split, Split::Eval);
    }

    #[test]
    fn invalid_config() {
        assert!(synth_dataset(&SynthConfig {
            classes: 0,
            ..small()
        })
        .is_err());
        assert!(synth_dataset(&SynthConfig {
            max_steps: 3,
            ..small()
        })
        .is_err());
    }
}
