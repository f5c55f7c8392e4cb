//! Desk-scale end-to-end training: synthetic pairs, a linear audio adapter and
//! text projection, AdamW with a linear learning-rate decay, and per-epoch
//! retrieval evaluation.

pub mod adamw;
pub mod checkpoint;
pub mod model;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::FusionConfig;
use crate::contrastive::{
    backprop, batch_scores, central_difference, nce_loss, relative_error, GradCheckInstance,
    GradCheckReport, GradientBundle, GroupError,
};
use crate::error::{Error, Result};
use crate::framing::{unfold, FrameTensor, KernelParams, DEFAULT_REF_WINDOW};
use crate::retrieval::{recall_at_k, Recalls, RetrievalReport};
use crate::store::{resolve_pairs, EmbeddingStore, PairManifest, Split};

pub use adamw::{linear_lr, AdamW};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{adapter_forward, concat_streams, Linear, ModelDims, ToyModel};
pub use synth::{synth_dataset, RawPair, SynthConfig, SynthDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; the schedule decays to zero here.
    pub max_steps: Option<usize>,
    pub eta_kernel: f64,
    pub eta_stride: f64,
    pub ref_window: f64,
    pub fusion: FusionConfig,
    pub symmetric_loss: bool,
    pub train_gamma: bool,
    pub use_adapter: bool,
    pub init_std: f64,
    pub eval_ks: Vec<usize>,
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 50,
            epochs: 20,
            max_steps: None,
            eta_kernel: 6.0,
            eta_stride: 3.0,
            ref_window: DEFAULT_REF_WINDOW,
            fusion: FusionConfig {
                temperature: 0.05,
                ..FusionConfig::default()
            },
            symmetric_loss: false,
            train_gamma: false,
            use_adapter: true,
            init_std: 5e-4,
            eval_ks: vec![1, 5, 20, 100],
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if let Some(&k) = self.eval_ks.iter().find(|&&k| k == 0) {
            return Err(Error::InvalidK(k));
        }
        self.fusion.validate()
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 1 {
            out.push(
                "batch_size=1 gives a constant contrastive loss; nothing will be learned".into(),
            );
        }
        out
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn kernel_params(&self, steps: usize) -> Result<KernelParams> {
        KernelParams::with_ref_window(steps, self.eta_kernel, self.eta_stride, self.ref_window)
    }

    /// Fusion settings with the model's current gamma weights.
    pub fn fusion_for(&self, model: &ToyModel) -> FusionConfig {
        FusionConfig {
            gamma_kernel: model.gamma_kernel,
            gamma_temporal: model.gamma_temporal,
            ..self.fusion
        }
    }
}

/// Raw pairs for training and evaluation plus their source widths.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Vec<RawPair>,
    pub eval: Vec<RawPair>,
    pub dim_music: usize,
    pub dim_speech: usize,
    pub dim_text: usize,
}

impl TrainData {
    pub fn from_synth(data: SynthDataset, cfg: &SynthConfig) -> Self {
        Self {
            train: data.train,
            eval: data.eval,
            dim_music: cfg.dim_music,
            dim_speech: cfg.dim_speech,
            dim_text: cfg.dim_text,
        }
    }

    /// Pairs from stores; the speech store is optional. Audio ids index both audio stores.
    pub fn from_stores(
        text: &EmbeddingStore,
        music: &EmbeddingStore,
        speech: Option<&EmbeddingStore>,
        manifest: &PairManifest,
    ) -> Result<Self> {
        let collect = |split| -> Result<Vec<RawPair>> {
            resolve_pairs(manifest, text, music, split)?
                .into_iter()
                .map(|(t, m)| {
                    let speech_data = match speech {
                        Some(s) => {
                            let rec = s
                                .get(m.id())
                                .ok_or_else(|| Error::MissingRecord(m.id().to_owned()))?;
                            if rec.steps() != m.steps() {
                                return Err(Error::DimensionMismatch {
                                    expected: m.steps(),
                                    found: rec.steps(),
                                });
                            }
                            rec.data().to_vec()
                        }
                        None => Vec::new(),
                    };
                    Ok(RawPair {
                        id: m.id().to_owned(),
                        class: 0,
                        steps: m.steps(),
                        music: m.data().to_vec(),
                        speech: speech_data,
                        text: t.data().to_vec(),
                    })
                })
                .collect()
        };
        Ok(Self {
            train: collect(Split::Train)?,
            eval: collect(Split::Eval)?,
            dim_music: music.dim(),
            dim_speech: speech.map_or(0, |s| s.dim()),
            dim_text: text.dim(),
        })
    }
}

/// Model inputs and outputs for one set of pairs.
pub struct EncodedBatch {
    pub audio_inputs: Vec<Vec<f64>>,
    pub sequences: Vec<Vec<f64>>,
    pub params: Vec<KernelParams>,
    pub frames: Vec<FrameTensor>,
    pub texts: Vec<Vec<f64>>,
}

pub fn encode_pairs(
    model: &ToyModel,
    pairs: &[&RawPair],
    cfg: &TrainConfig,
) -> Result<EncodedBatch> {
    let mut out = EncodedBatch {
        audio_inputs: Vec::with_capacity(pairs.len()),
        sequences: Vec::with_capacity(pairs.len()),
        params: Vec::with_capacity(pairs.len()),
        frames: Vec::with_capacity(pairs.len()),
        texts: Vec::with_capacity(pairs.len()),
    };
    for p in pairs {
        let x = concat_streams(&p.music, model.dims.music, &p.speech, model.dims.speech)?;
        let u = match &model.adapter {
            Some(a) => a.forward(&x)?,
            None => x.clone(),
        };
        let params = cfg.kernel_params(p.steps)?;
        out.frames.push(unfold(&u, model.dims.dim, &params)?);
        out.params.push(params);
        out.sequences.push(u);
        out.audio_inputs.push(x);
        out.texts.push(model.encode_text(&p.text)?);
    }
    Ok(out)
}

/// Gradients for every model tensor in [`ToyModel::tensors`] order, then gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tensors: Vec<Vec<f64>>,
    pub gamma: [f64; 2],
}

/// Loss, contrastive gradients and model gradients for one batch.
pub fn pipeline_gradients(
    model: &ToyModel,
    pairs: &[&RawPair],
    cfg: &TrainConfig,
) -> Result<(GradientBundle, ModelGrads, EncodedBatch)> {
    let enc = encode_pairs(model, pairs, cfg)?;
    let fusion = cfg.fusion_for(model);
    let bundle = backprop(
        &enc.frames,
        &enc.texts,
        &fusion,
        cfg.symmetric_loss,
        cfg.workers,
    )?;

    let mut tensors = Vec::with_capacity(4);
    if let Some(a) = &model.adapter {
        let mut dw = vec![0.0; a.weight.len()];
        let mut db = vec![0.0; a.bias.len()];
        for (x, du) in enc.audio_inputs.iter().zip(&bundle.d_audio) {
            a.accumulate_grad(x, du, &mut dw, &mut db);
        }
        tensors.push(dw);
        tensors.push(db);
    }
    let mut dw = vec![0.0; model.text.weight.len()];
    let mut db = vec![0.0; model.text.bias.len()];
    for (p, dt) in pairs.iter().zip(&bundle.d_text) {
        model.text.accumulate_grad(&p.text, dt, &mut dw, &mut db);
    }
    tensors.push(dw);
    tensors.push(db);
    let grads = ModelGrads {
        tensors,
        gamma: [bundle.d_gamma_kernel, bundle.d_gamma_temporal],
    };
    Ok((bundle, grads, enc))
}

/// Contrastive loss of the model on `pairs`, no gradients.
pub fn pipeline_loss(model: &ToyModel, pairs: &[&RawPair], cfg: &TrainConfig) -> Result<f64> {
    let enc = encode_pairs(model, pairs, cfg)?;
    let scores = batch_scores(&enc.frames, &enc.texts, &cfg.fusion_for(model), cfg.workers)?;
    nce_loss(&scores, cfg.symmetric_loss)
}

/// Non-finite values inside a run come from the parameters, not the inputs.
fn as_divergence(e: Error, step: usize) -> Error {
    match e {
        Error::Data(message) => Error::Divergence { step, message },
        e => e,
    }
}

/// One AdamW step at scheduled learning rate `lr(step_index)`. Returns the pre-update loss.
///
/// On divergence the model is left untouched.
pub fn train_step(
    model: &mut ToyModel,
    batch: &[&RawPair],
    cfg: &TrainConfig,
    step_index: usize,
    total_steps: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let diverged = |message: String| Error::Divergence {
        step: step_index,
        message,
    };
    let (bundle, grads, _) =
        pipeline_gradients(model, batch, cfg).map_err(|e| as_divergence(e, step_index))?;
    if !bundle.loss.is_finite() {
        return Err(diverged(format!("loss is {}", bundle.loss)));
    }
    if grads
        .tensors
        .iter()
        .flatten()
        .chain(&grads.gamma)
        .any(|g| !g.is_finite())
    {
        return Err(diverged("non-finite gradient".into()));
    }

    let lr = linear_lr(cfg.lr, step_index, total_steps);
    let opt = cfg.optimizer();
    let mut next = model.clone();
    next.step += 1;
    let t = next.step;
    let mut moments = std::mem::take(&mut next.moments);
    for ((param, grad), (m, v)) in next
        .tensors_mut()
        .into_iter()
        .zip(&grads.tensors)
        .zip(&mut moments)
    {
        opt.update(param, grad, m, v, t, lr);
    }
    if cfg.train_gamma {
        let mut gamma = [next.gamma_kernel, next.gamma_temporal];
        let (m, v) = moments.last_mut().expect("gamma moments");
        opt.update(&mut gamma, &grads.gamma, m, v, t, lr);
        next.gamma_kernel = gamma[0];
        next.gamma_temporal = gamma[1];
    }
    next.moments = moments;
    if !next.is_finite() {
        return Err(diverged("non-finite parameters after update".into()));
    }
    *model = next;
    Ok(bundle.loss)
}

/// Retrieval over `pairs` with the current model: `(t2a, a2t)`.
pub fn evaluate(
    model: &ToyModel,
    pairs: &[RawPair],
    cfg: &TrainConfig,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let refs: Vec<&RawPair> = pairs.iter().collect();
    let enc = encode_pairs(model, &refs, cfg)?;
    let scores = batch_scores(&enc.frames, &enc.texts, &cfg.fusion_for(model), cfg.workers)?;
    recall_at_k(&scores, &cfg.eval_ks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalRecalls {
    pub t2a: Recalls,
    pub a2t: Recalls,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any training.
    pub epoch: usize,
    pub mean_loss: Option<f64>,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    /// Optimizer steps completed so far.
    pub steps: usize,
    pub recalls: DirectionalRecalls,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainingReport {
    /// One JSON object per line: a `{"config": ...}` header, then one per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&serde_json::json!({ "config": self.config }))
            .expect("config serializes");
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch serializes"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs
            .last()
            .expect("report always has the initial evaluation")
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: ToyModel,
    data: TrainData,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: TrainData, dim: usize) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() || data.eval.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dims = ModelDims {
            music: data.dim_music,
            speech: data.dim_speech,
            text: data.dim_text,
            dim,
        };
        let model = ToyModel::new(
            dims,
            cfg.use_adapter,
            cfg.init_std,
            (cfg.fusion.gamma_kernel, cfg.fusion.gamma_temporal),
            cfg.seed,
        )?;
        Self::with_model(cfg, data, model)
    }

    pub fn with_model(cfg: TrainConfig, data: TrainData, model: ToyModel) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fb_a7c4);
        Ok(Self {
            cfg,
            model,
            data,
            rng,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn into_model(self) -> ToyModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.data.train.len();
        if n < self.cfg.batch_size {
            1
        } else {
            n / self.cfg.batch_size
        }
    }

    pub fn total_steps(&self) -> usize {
        let planned = self.cfg.epochs * self.steps_per_epoch();
        self.cfg.max_steps.map_or(planned, |m| m.min(planned))
    }

    fn record(
        &self,
        epoch: usize,
        mean_loss: Option<f64>,
        lr: f64,
        steps: usize,
    ) -> Result<EpochRecord> {
        let (t2a, a2t) = evaluate(&self.model, &self.data.eval, &self.cfg)?;
        Ok(EpochRecord {
            epoch,
            mean_loss,
            lr,
            steps,
            recalls: DirectionalRecalls {
                t2a: t2a.recalls,
                a2t: a2t.recalls,
            },
        })
    }

    /// Train for the configured epochs. On error the model holds the last good parameters.
    pub fn run(&mut self) -> Result<TrainingReport> {
        let total = self.total_steps();
        let per_epoch = self.steps_per_epoch();
        let batch = self.cfg.batch_size.min(self.data.train.len());
        let mut epochs = vec![self.record(0, None, self.cfg.lr, 0)?];
        let mut step_losses = Vec::with_capacity(total);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        let mut step = 0;
        for epoch in 1..=self.cfg.epochs {
            if step >= total {
                break;
            }
            order.shuffle(&mut self.rng);
            let lr0 = linear_lr(self.cfg.lr, step, total);
            let mut sum = 0.0;
            let mut count = 0;
            for b in 0..per_epoch {
                if step >= total {
                    break;
                }
                let pairs: Vec<&RawPair> = order[b * batch..(b + 1) * batch]
                    .iter()
                    .map(|&i| &self.data.train[i])
                    .collect();
                let loss = train_step(&mut self.model, &pairs, &self.cfg, step, total)?;
                step_losses.push(loss);
                sum += loss;
                count += 1;
                step += 1;
            }
            let rec = self
                .record(epoch, Some(sum / count as f64), lr0, step)
                .map_err(|e| as_divergence(e, step))?;
            epochs.push(rec);
        }
        Ok(TrainingReport {
            config: self.cfg.clone(),
            epochs,
            step_losses,
        })
    }
}

pub fn train(cfg: &TrainConfig, data: TrainData, dim: usize) -> Result<(TrainingReport, ToyModel)> {
    let mut trainer = Trainer::new(cfg.clone(), data, dim)?;
    let report = trainer.run()?;
    Ok((report, trainer.into_model()))
}

/// Shapes for the full-pipeline gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineCheckSizes {
    pub batch: usize,
    pub dim: usize,
    pub dim_music: usize,
    pub dim_speech: usize,
    pub dim_text: usize,
    pub min_steps: usize,
    pub max_steps: usize,
}

impl Default for PipelineCheckSizes {
    fn default() -> Self {
        Self {
            batch: 4,
            dim: 8,
            dim_music: 5,
            dim_speech: 3,
            dim_text: 6,
            min_steps: 20,
            max_steps: 40,
        }
    }
}

/// Central-difference check through adapter, projection, alignment and loss.
///
/// Groups: `text` and `audio` (the projected text vectors and fused sequences),
/// `adapter`, `projection` and `gamma`.
pub fn pipeline_grad_check(
    seed: u64,
    sizes: &PipelineCheckSizes,
    fusion: FusionConfig,
    symmetric: bool,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let synth = SynthConfig {
        classes: 3,
        dim_music: sizes.dim_music,
        dim_speech: sizes.dim_speech,
        dim_text: sizes.dim_text,
        dim: sizes.dim,
        min_steps: sizes.min_steps,
        max_steps: sizes.max_steps,
        noise_sigma: 0.5,
        n_train: sizes.batch,
        n_eval: 1,
        seed,
        ..SynthConfig::default()
    };
    let data = synth_dataset(&synth)?;
    let cfg = TrainConfig {
        fusion,
        symmetric_loss: symmetric,
        init_std: 0.5,
        seed,
        ..TrainConfig::default()
    };
    let dims = ModelDims {
        music: sizes.dim_music,
        speech: sizes.dim_speech,
        text: sizes.dim_text,
        dim: sizes.dim,
    };
    let mut model = ToyModel::new(
        dims,
        true,
        cfg.init_std,
        (fusion.gamma_kernel, fusion.gamma_temporal),
        seed,
    )?;
    {
        // nonzero biases so their gradients are exercised away from the origin
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        for b in [
            &mut model.adapter.as_mut().unwrap().bias,
            &mut model.text.bias,
        ] {
            for x in b.iter_mut() {
                *x = 0.3 * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
            }
        }
    }
    let pairs: Vec<&RawPair> = data.train.iter().collect();
    let (bundle, grads, enc) = pipeline_gradients(&model, &pairs, &cfg)?;

    let inner = GradCheckInstance {
        seed,
        sequences: enc.sequences.clone(),
        params: enc.params.clone(),
        texts: enc.texts.clone(),
        dim: sizes.dim,
        cfg: cfg.fusion_for(&model),
        symmetric,
    };
    let inner_report = inner.compare(&bundle, epsilon, tolerance);

    let mut groups: Vec<GroupError> = inner_report
        .groups
        .into_iter()
        .filter(|g| g.group != "gamma")
        .collect();

    let loss_of = |m: &ToyModel| pipeline_loss(m, &pairs, &cfg).expect("pipeline loss");
    let mut tensor_errors = Vec::new();
    for (idx, grad) in grads.tensors.iter().enumerate() {
        let mut probe = model.clone();
        let mut err = 0.0f64;
        #[allow(clippy::needless_range_loop)]
        for k in 0..grad.len() {
            let base = probe.tensors_mut()[idx][k];
            let fd = central_difference(epsilon, |e| {
                probe.tensors_mut()[idx][k] = base + e;
                loss_of(&probe)
            });
            probe.tensors_mut()[idx][k] = base;
            err = err.max(relative_error(grad[k], fd));
        }
        tensor_errors.push((err, grad.len()));
    }
    let (adapter, projection) = tensor_errors.split_at(2);
    let fold = |errs: &[(f64, usize)]| {
        errs.iter()
            .fold((0.0f64, 0), |(e, n), &(e2, n2)| (e.max(e2), n + n2))
    };
    let (adapter_err, adapter_n) = fold(adapter);
    let (proj_err, proj_n) = fold(projection);
    groups.push(GroupError {
        group: "adapter".into(),
        coordinates: adapter_n,
        max_relative_error: adapter_err,
    });
    groups.push(GroupError {
        group: "projection".into(),
        coordinates: proj_n,
        max_relative_error: proj_err,
    });

    let mut probe = model.clone();
    let fd_gk = central_difference(epsilon, |e| {
        probe.gamma_kernel = model.gamma_kernel + e;
        loss_of(&probe)
    });
    probe.gamma_kernel = model.gamma_kernel;
    let fd_gt = central_difference(epsilon, |e| {
        probe.gamma_temporal = model.gamma_temporal + e;
        loss_of(&probe)
    });
    groups.push(GroupError {
        group: "gamma".into(),
        coordinates: 2,
        max_relative_error: relative_error(grads.gamma[0], fd_gk)
            .max(relative_error(grads.gamma[1], fd_gt)),
    });
    Ok(GradCheckReport::new(seed, epsilon, tolerance, groups))
}
