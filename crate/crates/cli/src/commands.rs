use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use tempalign_core::alignment::align;
use tempalign_core::contrastive::{batch_scores, grad_check, GradCheckReport, GradCheckSizes};
use tempalign_core::framing::{unfold, KernelParams};
use tempalign_core::retrieval::{eval_report, EvalConfig, EvalReport};
use tempalign_core::store::{
    load_manifest, read_header, read_store, resolve_pairs, write_store, EmbeddingStore, Split,
};
use tempalign_core::toy::pipeline_grad_check;
use tempalign_core::toy::synth::to_stores;
use tempalign_core::toy::{
    encode_pairs, load_checkpoint, save_checkpoint, synth_dataset, PipelineCheckSizes, RawPair,
    TrainConfig, TrainData, Trainer,
};
use tempalign_core::Error;

use crate::config::{require_path, set, RunConfig};
use crate::fmt::{emit_json, sig};
use crate::{
    BatchScoreArgs, Cli, Command, EvalArgs, Failure, FrameInfoArgs, GradcheckArgs, InspectArgs,
    ScoreArgs, SynthArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.workers, cli.workers);
    set(&mut cfg.train.workers, cli.workers);
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::FrameInfo(a) => frame_info(cfg, a),
        Command::Score(a) => score(cfg, a),
        Command::BatchScore(a) => batch_score(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::TrainToy(a) => train_toy(cfg, a),
        Command::Gradcheck(a) => gradcheck(cfg, a),
        Command::Inspect(a) => inspect(a),
    }
}

fn store(path: &Path) -> Result<EmbeddingStore, Failure> {
    read_store(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<(), Failure> {
    let s = &mut cfg.synth;
    set(&mut s.seed, a.seed);
    set(&mut s.classes, a.classes);
    set(&mut s.n_train, a.n_train);
    set(&mut s.n_eval, a.n_eval);
    set(&mut s.dim_music, a.dim_music);
    set(&mut s.dim_speech, a.dim_speech);
    set(&mut s.dim_text, a.dim_text);
    set(&mut s.min_steps, a.min_steps);
    set(&mut s.max_steps, a.max_steps);
    set(&mut s.noise_sigma, a.noise_sigma);
    let out = require_path(&a.out, &cfg.paths.output, "out")?;

    let data = synth_dataset(&cfg.synth)?;
    let (texts, music, speech, manifest) = to_stores(&data)?;
    create_dir(&out)?;
    write_store(&texts, out.join("text.cesf"))?;
    write_store(&music, out.join("music.cesf"))?;
    write_store(&speech, out.join("speech.cesf"))?;
    fs::write(out.join("manifest.jsonl"), manifest.to_jsonl()).map_err(Error::from)?;
    emit_json(
        &json!({ "config": cfg.synth }),
        Some(&out.join("synth.json")),
    )?;
    println!(
        "wrote {} pairs ({} train, {} eval) to {}",
        manifest.len(),
        data.train.len(),
        data.eval.len(),
        out.display()
    );
    Ok(())
}

fn frame_info(mut cfg: RunConfig, a: FrameInfoArgs) -> Result<(), Failure> {
    a.fusion.apply(&mut cfg);
    let p = KernelParams::with_ref_window(a.steps, cfg.eta_kernel, cfg.eta_stride, cfg.ref_window)?;
    println!(
        "T={} H={} S={} W={} covered={}",
        p.steps,
        p.kernel,
        p.stride,
        p.frames,
        p.covered_steps()
    );
    Ok(())
}

fn params_for(cfg: &RunConfig, steps: usize) -> Result<KernelParams, Failure> {
    Ok(KernelParams::with_ref_window(
        steps,
        cfg.eta_kernel,
        cfg.eta_stride,
        cfg.ref_window,
    )?)
}

fn score(mut cfg: RunConfig, a: ScoreArgs) -> Result<(), Failure> {
    a.fusion.apply(&mut cfg);
    let audio = store(&require_path(&a.stores.audio, &cfg.paths.audio, "audio")?)?;
    let text = store(&require_path(&a.stores.text, &cfg.paths.text, "text")?)?;
    let rec = audio
        .get(&a.audio_id)
        .ok_or_else(|| Error::MissingRecord(a.audio_id.clone()))?;
    let t = text
        .get(&a.text_id)
        .ok_or_else(|| Error::MissingRecord(a.text_id.clone()))?;
    if rec.dim() != t.dim() {
        return Err(Error::DimensionMismatch {
            expected: t.dim(),
            found: rec.dim(),
        }
        .into());
    }
    let params = params_for(&cfg, rec.steps())?;
    let frames = unfold(rec.data(), rec.dim(), &params)?;
    let fusion = cfg.fusion();
    let res = align(&frames, t.data(), &fusion)?;
    println!(
        "H={} S={} W={} r_K={} r_T={} r={}",
        params.kernel,
        params.stride,
        params.frames,
        sig(res.kernel_score),
        sig(res.temporal_score),
        sig(res.score)
    );
    if let Some(path) = &a.dump {
        let dump = json!({
            "config": cfg.eval_config(),
            "audio_id": a.audio_id,
            "text_id": a.text_id,
            "params": params,
            "kernel_score": res.kernel_score,
            "temporal_score": res.temporal_score,
            "score": res.score,
            "similarity": res.similarity.to_rows(),
            "kernel_attention": res.kernel_attention.to_rows(),
            "temporal_attention": res.temporal_attention.to_rows(),
        });
        emit_json(&dump, Some(path))?;
    }
    Ok(())
}

fn split_of(name: &str) -> Split {
    if name == "train" {
        Split::Train
    } else {
        Split::Eval
    }
}

fn batch_score(mut cfg: RunConfig, a: BatchScoreArgs) -> Result<(), Failure> {
    a.fusion.apply(&mut cfg);
    let audio = store(&require_path(&a.stores.audio, &cfg.paths.audio, "audio")?)?;
    let text = store(&require_path(&a.stores.text, &cfg.paths.text, "text")?)?;
    let manifest = load_manifest(require_path(&a.manifest, &cfg.paths.manifest, "manifest")?)?;
    let pairs = resolve_pairs(&manifest, &text, &audio, split_of(&a.split))?;
    if pairs.is_empty() {
        return Err(Failure::Data(format!("manifest has no {} pairs", a.split)));
    }
    let mut frames = Vec::with_capacity(pairs.len());
    for (_, rec) in &pairs {
        frames.push(unfold(
            rec.data(),
            rec.dim(),
            &params_for(&cfg, rec.steps())?,
        )?);
    }
    let texts: Vec<&[f64]> = pairs.iter().map(|(t, _)| t.data()).collect();
    let scores = batch_scores(&frames, &texts, &cfg.fusion(), cfg.workers)?;
    let out = json!({
        "config": cfg.eval_config(),
        "split": a.split,
        "audio_ids": pairs.iter().map(|(_, r)| r.id()).collect::<Vec<_>>(),
        "text_ids": pairs.iter().map(|(t, _)| t.id()).collect::<Vec<_>>(),
        "scores": scores.matrix().to_rows(),
    });
    emit_json(&out, a.out.as_deref().or(cfg.paths.output.as_deref()))
}

fn print_table(report: &EvalReport) {
    println!("{:<8}{:<12}A2T", "metric", "T2A");
    for row in &report.rows {
        println!("{:<8}{:<12}{}", row.metric, sig(row.t2a), sig(row.a2t));
    }
    for r in &report.reports {
        if r.ties_broken > 0 {
            println!(
                "{:?}: {} queries had tied scores",
                r.direction, r.ties_broken
            );
        }
    }
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<(), Failure> {
    a.fusion.apply(&mut cfg);
    set(&mut cfg.ks, a.ks.clone());
    let audio_path = require_path(&a.audio, &cfg.paths.audio, "audio")?;
    let text = store(&require_path(&a.text, &cfg.paths.text, "text")?)?;
    let manifest = load_manifest(require_path(&a.manifest, &cfg.paths.manifest, "manifest")?)?;
    let audio = store(&audio_path)?;

    let report = match a.checkpoint.clone().or(cfg.paths.checkpoint.clone()) {
        None => eval_report(&audio, &text, &manifest, &cfg.eval_config())?,
        Some(ckpt) => {
            let model = load_checkpoint(&ckpt)
                .map_err(|e| Failure::Data(format!("{}: {e}", ckpt.display())))?;
            let speech = match a.speech.clone().or(cfg.paths.speech.clone()) {
                Some(p) => Some(store(&p)?),
                None => None,
            };
            let mut train_cfg = cfg.train.clone();
            a.fusion.apply_train(&mut train_cfg);
            let data = TrainData::from_stores(&text, &audio, speech.as_ref(), &manifest)?;
            if data.eval.is_empty() {
                return Err(Error::EmptyBatch.into());
            }
            let refs: Vec<&RawPair> = data.eval.iter().collect();
            let enc = encode_pairs(&model, &refs, &train_cfg)?;
            let scores = batch_scores(
                &enc.frames,
                &enc.texts,
                &train_cfg.fusion_for(&model),
                cfg.workers,
            )?;
            let eval_cfg = EvalConfig {
                fusion: train_cfg.fusion_for(&model),
                eta_kernel: train_cfg.eta_kernel,
                eta_stride: train_cfg.eta_stride,
                ref_window: train_cfg.ref_window,
                ks: cfg.ks.clone(),
                workers: cfg.workers,
                model: format!("toy:{}", ckpt.display()),
                ..EvalConfig::default()
            };
            EvalReport::from_scores(&scores, &eval_cfg)?
        }
    };
    print_table(&report);
    if let Some(path) = a.out.as_deref().or(cfg.paths.output.as_deref()) {
        emit_json(&report, Some(path))?;
    }
    Ok(())
}

fn load_data_dir(dir: &Path) -> Result<TrainData, Failure> {
    let text = store(&dir.join("text.cesf"))?;
    let music = store(&dir.join("music.cesf"))?;
    let speech_path = dir.join("speech.cesf");
    let speech = if speech_path.exists() {
        Some(store(&speech_path)?)
    } else {
        None
    };
    let manifest = load_manifest(dir.join("manifest.jsonl"))?;
    Ok(TrainData::from_stores(
        &text,
        &music,
        speech.as_ref(),
        &manifest,
    )?)
}

fn train_toy(mut cfg: RunConfig, a: TrainArgs) -> Result<(), Failure> {
    let t = &mut cfg.train;
    set(&mut t.seed, a.seed);
    set(&mut t.lr, a.lr);
    set(&mut t.weight_decay, a.weight_decay);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.epochs, a.epochs);
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    set(&mut t.init_std, a.init_std);
    set(&mut t.use_adapter, a.adapter);
    set(&mut t.train_gamma, a.train_gamma);
    a.fusion.apply_train(t);
    set(&mut cfg.synth.seed, a.seed);
    set(&mut cfg.synth.dim, a.dim);
    let train_cfg: TrainConfig = cfg.train.clone();
    let out = require_path(&a.out, &cfg.paths.output, "out")?;

    let data = match &a.data {
        Some(dir) => load_data_dir(dir)?,
        None => TrainData::from_synth(synth_dataset(&cfg.synth)?, &cfg.synth),
    };
    for w in train_cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let mut trainer = Trainer::new(train_cfg, data, cfg.synth.dim)?;
    create_dir(&out)?;
    let ckpt = out.join("model.ckpt");
    let report = match trainer.run() {
        Ok(r) => r,
        Err(e) => {
            save_checkpoint(trainer.model(), &ckpt)?;
            eprintln!("last good checkpoint written to {}", ckpt.display());
            return Err(e.into());
        }
    };
    save_checkpoint(trainer.model(), &ckpt)?;
    let report_path = out.join("report.jsonl");
    fs::write(&report_path, report.to_jsonl()).map_err(Error::from)?;
    for e in &report.epochs {
        let r1 = |r: &tempalign_core::retrieval::Recalls| {
            r.0.first().map(|&(k, v)| format!("R@{k} {}", sig(v)))
        };
        println!(
            "epoch {:<3} steps {:<5} loss {:<10} lr {:<10} T2A {}  A2T {}",
            e.epoch,
            e.steps,
            e.mean_loss.map_or("-".into(), sig),
            sig(e.lr),
            r1(&e.recalls.t2a).unwrap_or_default(),
            r1(&e.recalls.a2t).unwrap_or_default()
        );
    }
    println!("wrote {} and {}", ckpt.display(), report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput {
    pipeline: bool,
    symmetric_loss: bool,
    fusion: tempalign_core::FusionConfig,
    reports: Vec<GradCheckReport>,
}

fn gradcheck(mut cfg: RunConfig, a: GradcheckArgs) -> Result<(), Failure> {
    a.fusion.apply(&mut cfg);
    let fusion = cfg.fusion();
    let mut reports = Vec::new();
    for seed in a.seed..a.seed + a.seeds.max(1) {
        let rep = if a.pipeline {
            pipeline_grad_check(
                seed,
                &PipelineCheckSizes::default(),
                fusion,
                cfg.symmetric_loss,
                a.epsilon,
                a.tolerance,
            )?
        } else if cfg.symmetric_loss {
            let inst = tempalign_core::contrastive::GradCheckInstance::random(
                seed,
                &GradCheckSizes::default(),
                fusion,
                true,
            )?;
            inst.compare(&inst.analytic()?, a.epsilon, a.tolerance)
        } else {
            grad_check(
                seed,
                &GradCheckSizes::default(),
                fusion,
                a.epsilon,
                a.tolerance,
            )?
        };
        let groups: Vec<String> = rep
            .groups
            .iter()
            .map(|g| format!("{} {}", g.group, sig(g.max_relative_error)))
            .collect();
        println!(
            "seed {seed}: {}  max {}  {}",
            groups.join("  "),
            sig(rep.max_error()),
            if rep.passed { "PASS" } else { "FAIL" }
        );
        reports.push(rep);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if let Some(path) = &a.out {
        let out = GradcheckOutput {
            pipeline: a.pipeline,
            symmetric_loss: cfg.symmetric_loss,
            fusion,
            reports,
        };
        emit_json(&out, Some(path))?;
    }
    if failed > 0 {
        return Err(Failure::Numeric(format!(
            "{failed} seed(s) exceeded relative error {}",
            sig(a.tolerance)
        )));
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), Failure> {
    let path: PathBuf = a.path;
    let header =
        read_header(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let s = store(&path)?;
    println!(
        "CESF v{} dtype f32 D={} records={}",
        header.version, header.dim, header.record_count
    );
    let (texts, audios): (Vec<_>, Vec<_>) = s
        .records()
        .iter()
        .partition(|r| r.modality() == tempalign_core::Modality::Text);
    if !audios.is_empty() {
        let steps: Vec<usize> = audios.iter().map(|r| r.steps()).collect();
        println!(
            "text={} audio={} T min={} max={}",
            texts.len(),
            audios.len(),
            steps.iter().min().unwrap(),
            steps.iter().max().unwrap()
        );
    } else {
        println!("text={} audio=0", texts.len());
    }
    for r in s.records().iter().take(a.records) {
        println!("{}\t{}\tT={}", r.id(), r.modality().name(), r.steps());
    }
    Ok(())
}
