//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tempalign_core::alignment::{align, align_similarity, kernel_attention, temporal_attention};
use tempalign_core::contrastive::{
    backprop, batch_scores, loss_grad_scores, nce_loss, ScoreMatrix,
};
use tempalign_core::error::Error;
use tempalign_core::framing::{unfold, KernelParams};
use tempalign_core::retrieval::{query_ranks, recall_at_k};
use tempalign_core::store::{decode_store, encode_store, EmbeddingRecord, Modality};
use tempalign_core::toy::{
    pipeline_grad_check, synth_dataset, train, PipelineCheckSizes, SynthConfig, TrainConfig,
    TrainData,
};
use tempalign_core::{FusionConfig, Matrix};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Written as a negation so that NaN comparisons fail.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    let s = elapsed.as_secs_f64();
    ensure!(s < limit_s, "{what} took {s:.2} s, limit {limit_s} s");
    Ok(())
}

/// Index-based reference framing with independently computed sizes.
fn naive_frames(
    seq: &[f64],
    t: usize,
    d: usize,
    eta_k: f64,
    eta_s: f64,
) -> Option<(usize, usize, usize, Vec<f64>)> {
    let h = (t as f64 * eta_k / 30.0).floor() as usize;
    let s = (t as f64 * eta_s / 30.0).floor() as usize;
    if h == 0 || s == 0 || h > t {
        return None;
    }
    let w = (t - h) / s + 1;
    let mut out = Vec::with_capacity(w * h * d);
    for v in 0..w {
        for k in 0..h {
            for c in 0..d {
                out.push(seq[(v * s + k) * d + c]);
            }
        }
    }
    Some((h, s, w, out))
}

fn framing_oracle() -> Outcome {
    let p = KernelParams::new(300, 3.0, 3.0).map_err(|e| e.to_string())?;
    ensure!(
        (p.kernel, p.stride, p.frames) == (30, 30, 10),
        "T=300 eta 3/3 gave H={} S={} W={}",
        p.kernel,
        p.stride,
        p.frames
    );
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut framed = 0;
    for i in 0..1000 {
        let t = rng.random_range(1..=400);
        let d = rng.random_range(1..=8);
        let eta_k = rng.random_range(0.2..10.0);
        let eta_s = rng.random_range(0.1..=eta_k);
        let seq: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got =
            KernelParams::new(t, eta_k, eta_s).and_then(|p| unfold(&seq, d, &p).map(|f| (p, f)));
        match (naive_frames(&seq, t, d, eta_k, eta_s), got) {
            (Some((h, s, w, data)), Ok((p, f))) => {
                ensure!(
                    (p.kernel, p.stride, p.frames) == (h, s, w),
                    "instance {i}: sizes differ (T={t}, eta={eta_k}/{eta_s})"
                );
                ensure!(
                    f.data() == data.as_slice(),
                    "instance {i}: frame contents differ"
                );
                framed += 1;
            }
            (None, Err(Error::SequenceTooShort { .. } | Error::KernelExceedsLength { .. })) => {}
            (want, got) => {
                return Err(format!(
                    "instance {i}: reference framed={} but unfold returned {:?}",
                    want.is_some(),
                    got.map(|_| ())
                ))
            }
        }
    }
    within(start.elapsed(), 5.0, "1000 instances")?;
    Ok(format!(
        "1000 instances ({framed} framed) exact, H/S/W = 30/30/10, {:.2?}",
        start.elapsed()
    ))
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let w = rng.random_range(1..=64);
        let h = rng.random_range(1..=64);
        let scale = if i % 2 == 0 { 1.0 } else { 30.0 };
        let m = Matrix::from_fn(w, h, |_, _| scale * rng.random_range(-1.0..1.0));
        let ak = kernel_attention(&m).map_err(|e| e.to_string())?;
        let at = temporal_attention(&m).map_err(|e| e.to_string())?;
        for v in 0..w {
            worst = worst.max(((0..h).map(|k| ak.get(v, k)).sum::<f64>() - 1.0).abs());
        }
        for k in 0..h {
            worst = worst.max(((0..w).map(|v| at.get(v, k)).sum::<f64>() - 1.0).abs());
        }
        let dual = kernel_attention(&m.transpose())
            .map_err(|e| e.to_string())?
            .transpose();
        ensure!(dual == at, "matrix {i} ({w}x{h}): transpose duality broken");
    }
    ensure!(worst <= 1e-12, "max |sum - 1| = {worst:e}");
    Ok(format!(
        "1000 matrices, max |sum - 1| = {worst:.1e}, duality exact"
    ))
}

fn hand_values() -> Outcome {
    let cfg = FusionConfig::default();
    let res = align_similarity(Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]), &cfg)
        .map_err(|e| e.to_string())?;
    let want = 0.865529;
    for (name, got) in [
        ("r_K", res.kernel_score),
        ("r_T", res.temporal_score),
        ("r", res.score),
    ] {
        ensure!((got - want).abs() <= 1e-6, "{name} = {got}, want {want}");
    }
    let mut worst: f64 = 0.0;
    for n in 1..=12 {
        let r =
            align_similarity(Matrix::from_fn(n, n, |_, _| 1.0), &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((r.score - 1.0).abs());
    }
    // through real frames: T=25, eta 6/6 gives H=S=W=5, every timestep along the text
    let p = KernelParams::new(25, 6.0, 6.0).map_err(|e| e.to_string())?;
    ensure!(
        p.kernel == p.frames,
        "expected W = H, got W={} H={}",
        p.frames,
        p.kernel
    );
    let text = [0.6, -0.8, 0.0];
    let seq: Vec<f64> = (0..25)
        .flat_map(|t| text.map(|x| x * (1.0 + t as f64)))
        .collect();
    let r = align(
        &unfold(&seq, 3, &p).map_err(|e| e.to_string())?,
        &text,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    worst = worst.max((r.score - 1.0).abs());
    ensure!(worst <= 1e-12, "all-aligned W=H score off by {worst:e}");
    Ok(format!(
        "r_K={:.6} r_T={:.6} r={:.6}, all-aligned |r-1| = {worst:.1e}",
        res.kernel_score, res.temporal_score, res.score
    ))
}

fn loss_values() -> Outcome {
    let single = ScoreMatrix::from_rows(&[[0.37]]).map_err(|e| e.to_string())?;
    for sym in [false, true] {
        let l = nce_loss(&single, sym).map_err(|e| e.to_string())?;
        ensure!(l == 0.0, "N=1 loss (symmetric={sym}) = {l}");
    }
    let eye = ScoreMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).map_err(|e| e.to_string())?;
    let l = nce_loss(&eye, false).map_err(|e| e.to_string())?;
    ensure!((l - 0.626523).abs() <= 1e-6, "identity loss = {l}");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=20);
        let s =
            ScoreMatrix::new(Matrix::from_fn(n, n, |_, _| rng.random_range(-20.0..20.0))).unwrap();
        let g = loss_grad_scores(&s, false).map_err(|e| e.to_string())?;
        for i in 0..n {
            worst = worst.max(g.row(i).iter().sum::<f64>().abs());
        }
        // the column term of the symmetric loss only balances columns
        let g = loss_grad_scores(&s, true).map_err(|e| e.to_string())?;
        worst = worst.max(g.data().iter().sum::<f64>().abs());
    }
    ensure!(worst <= 1e-12, "gradient row sum reaches {worst:e}");
    Ok(format!(
        "N=1 loss 0, identity loss {l:.6}, max |row sum| = {worst:.1e}"
    ))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let sizes = PipelineCheckSizes::default();
    ensure!(
        sizes.batch == 4 && sizes.dim == 8 && sizes.max_steps <= 40,
        "unexpected check sizes {sizes:?}"
    );
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let rep = pipeline_grad_check(seed, &sizes, FusionConfig::default(), false, 1e-5, 1e-6)
            .map_err(|e| e.to_string())?;
        for want in ["text", "audio", "adapter", "projection", "gamma"] {
            ensure!(
                rep.group(want).is_some_and(|g| g.coordinates > 0),
                "seed {seed}: group {want} missing"
            );
        }
        ensure!(rep.passed, "seed {seed}: {:?}", rep.groups);
        worst = worst.max(rep.max_error());
    }
    within(start.elapsed(), 60.0, "10 gradient checks")?;
    Ok(format!(
        "10 seeds, 5 groups, max rel err {worst:.2e}, {:.2?}",
        start.elapsed()
    ))
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|x| x.to_bits()).collect()
}

fn determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 6;
    let mut frames = Vec::new();
    let mut texts = Vec::new();
    for _ in 0..12 {
        let t = rng.random_range(20..=60);
        let seq: Vec<f64> = (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        frames.push(unfold(&seq, dim, &KernelParams::new(t, 6.0, 3.0).unwrap()).unwrap());
        texts.push(
            (0..dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        );
    }
    let cfg = FusionConfig {
        temperature: 0.1,
        ..FusionConfig::default()
    };
    let base_scores = batch_scores(&frames, &texts, &cfg, 1).map_err(|e| e.to_string())?;
    let base_grad = backprop(&frames, &texts, &cfg, true, 1).map_err(|e| e.to_string())?;
    for workers in [2, 8] {
        let s = batch_scores(&frames, &texts, &cfg, workers).map_err(|e| e.to_string())?;
        ensure!(
            bits(s.matrix()) == bits(base_scores.matrix()),
            "batch_scores differ at {workers} workers"
        );
        let g = backprop(&frames, &texts, &cfg, true, workers).map_err(|e| e.to_string())?;
        let flat = |b: &tempalign_core::GradientBundle| -> Vec<u64> {
            std::iter::once(b.loss)
                .chain(b.d_text.iter().flatten().copied())
                .chain(b.d_audio.iter().flatten().copied())
                .chain([b.d_gamma_kernel, b.d_gamma_temporal])
                .map(f64::to_bits)
                .collect()
        };
        ensure!(
            flat(&g) == flat(&base_grad),
            "backprop differs at {workers} workers"
        );
    }

    let synth = SynthConfig {
        dim: 16,
        n_train: 100,
        n_eval: 20,
        seed: 3,
        ..SynthConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = |workers| {
        let data = TrainData::from_synth(synth_dataset(&synth).unwrap(), &synth);
        let (rep, model) = train(
            &TrainConfig {
                workers,
                ..cfg.clone()
            },
            data,
            16,
        )
        .unwrap();
        (
            rep.to_jsonl(),
            tempalign_core::toy::encode_checkpoint(&model).unwrap(),
        )
    };
    let (a, ca) = run(1);
    let (b, cb) = run(1);
    ensure!(a == b && ca == cb, "same-seed training runs differ");
    let (c, cc) = run(4);
    let strip = |s: &str| s.lines().skip(1).collect::<Vec<_>>().join("\n");
    ensure!(
        strip(&a) == strip(&c) && ca == cc,
        "training differs between 1 and 4 workers"
    );
    Ok(format!(
        "workers 1/2/8 bit-identical, training report {} bytes identical",
        a.len()
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let mut r1 = Vec::new();
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let synth = SynthConfig {
            dim: 16,
            seed,
            ..SynthConfig::default()
        };
        ensure!(
            (synth.classes, synth.n_train, synth.n_eval) == (8, 256, 64),
            "synthetic defaults changed"
        );
        let data = TrainData::from_synth(synth_dataset(&synth).map_err(|e| e.to_string())?, &synth);
        let cfg = TrainConfig {
            epochs: 40,
            max_steps: Some(200),
            seed,
            workers: 1,
            ..TrainConfig::default()
        };
        ensure!(
            cfg.batch_size == 50 && cfg.lr == 1e-4 && cfg.weight_decay == 1e-5,
            "training defaults changed"
        );
        let (rep, _) = train(&cfg, data, 16).map_err(|e| e.to_string())?;
        let losses = &rep.step_losses;
        ensure!(
            losses.len() == 200,
            "seed {seed}: ran {} steps",
            losses.len()
        );
        ratios.push(losses[199] / losses[0]);
        r1.push(rep.last().recalls.t2a.get(1).ok_or("R@1 missing")?);
    }
    let elapsed = start.elapsed();
    let med = median(r1.clone());
    let worst_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let detail = format!(
        "T2A R@1 per seed {:?} median {med:.3}; loss ratio max {worst_ratio:.4}; {elapsed:.2?}",
        r1.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()
    );
    ensure!(med >= 0.9, "{detail}");
    ensure!(worst_ratio < 0.25, "{detail}");
    within(elapsed, 60.0, "5 training runs")?;
    Ok(detail)
}

/// Rank of `target` after a full sort by (score desc, index asc).
fn sort_rank(scores: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.iter().position(|&c| c == target).unwrap() + 1
}

fn retrieval_oracle() -> Outcome {
    let n = 200;
    let ks = [1, 5, 10, 20, 100, 200];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let levels = [0, 3, 10, 1000][trial % 4];
        let m = Matrix::from_fn(n, n, |_, _| {
            if levels == 0 {
                rng.random_range(-1.0..1.0)
            } else {
                rng.random_range(0..levels) as f64
            }
        });
        let s = ScoreMatrix::new(m.clone()).unwrap();
        let (t2a, a2t) = query_ranks(&s).map_err(|e| e.to_string())?;
        let (rt, ra) = recall_at_k(&s, &ks).map_err(|e| e.to_string())?;
        for q in 0..n {
            let column: Vec<f64> = (0..n).map(|i| m.get(i, q)).collect();
            ensure!(
                t2a[q] == sort_rank(&column, q),
                "trial {trial}: T2A rank of query {q}"
            );
            ensure!(
                a2t[q] == sort_rank(m.row(q), q),
                "trial {trial}: A2T rank of query {q}"
            );
        }
        for &k in &ks {
            let oracle =
                |ranks: Vec<usize>| ranks.into_iter().filter(|&r| r <= k).count() as f64 / n as f64;
            let ot = oracle(
                (0..n)
                    .map(|q| sort_rank(&(0..n).map(|i| m.get(i, q)).collect::<Vec<_>>(), q))
                    .collect(),
            );
            let oa = oracle((0..n).map(|q| sort_rank(m.row(q), q)).collect());
            ensure!(
                rt.recall(k) == Some(ot) && ra.recall(k) == Some(oa),
                "trial {trial}: recall@{k}"
            );
        }
    }
    let dominant = ScoreMatrix::new(Matrix::from_fn(n, n, |i, j| {
        if i == j {
            5.0
        } else {
            rng.random_range(-1.0..1.0)
        }
    }))
    .unwrap();
    let (rt, ra) = recall_at_k(&dominant, &ks).map_err(|e| e.to_string())?;
    for &k in &ks {
        ensure!(
            rt.recall(k) == Some(1.0) && ra.recall(k) == Some(1.0),
            "identity-dominant recall@{k} below 1"
        );
    }
    Ok(
        "20 matrices 200x200 (continuous and tied) match sort oracle; identity-dominant recall 1.0"
            .into(),
    )
}

fn format_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 7;
    let mut records = Vec::new();
    for i in 0..40 {
        let rec = if i % 3 == 0 {
            EmbeddingRecord::text(
                format!("t{i}"),
                (0..dim).map(|_| rng.random_range(-1e3..1e3)).collect(),
            )
        } else {
            let t = rng.random_range(1..30);
            EmbeddingRecord::audio(
                format!("a{i}"),
                t,
                dim,
                (0..t * dim).map(|_| rng.random_range(-1e3..1e3)).collect(),
            )
        };
        records.push(rec.map_err(|e| e.to_string())?);
    }
    let bytes = encode_store(&records).map_err(|e| e.to_string())?;
    let back = decode_store(&bytes).map_err(|e| e.to_string())?;
    ensure!(back.len() == records.len(), "record count changed");
    for (a, b) in records.iter().zip(back.records()) {
        ensure!(
            a.id() == b.id() && a.modality() == b.modality() && a.steps() == b.steps(),
            "record {} header changed",
            a.id()
        );
        let rounded: Vec<f64> = a.data().iter().map(|&x| x as f32 as f64).collect();
        ensure!(
            b.data() == rounded.as_slice(),
            "record {} values not f32-exact",
            a.id()
        );
    }
    ensure!(
        encode_store(back.records()).map_err(|e| e.to_string())? == bytes,
        "second round trip changed bytes"
    );

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    ensure!(
        matches!(decode_store(&bad), Err(Error::Format(_))),
        "bad magic accepted"
    );
    let cuts: Vec<usize> = (0..bytes.len())
        .step_by(7)
        .chain([bytes.len() - 1])
        .collect();
    for &cut in &cuts {
        ensure!(
            matches!(decode_store(&bytes[..cut]), Err(Error::Format(_))),
            "truncation at {cut} accepted"
        );
    }

    // written by an independent little-endian writer
    let golden = include_bytes!("data/golden.cesf");
    let expected = [
        EmbeddingRecord::new("t0", Modality::Text, 1, 3, vec![1.0, -0.5, 0.25]),
        EmbeddingRecord::new(
            "a0",
            Modality::Audio,
            2,
            3,
            vec![0.1, 2.0, -3.0, 1e-3, 65504.0, -0.0],
        ),
        EmbeddingRecord::new("ä1", Modality::Audio, 1, 3, vec![3.5, -1e-7, 7.0]),
    ]
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(|e| e.to_string())?;
    ensure!(
        encode_store(&expected)
            .map_err(|e| e.to_string())?
            .as_slice()
            == golden,
        "encoder output differs from golden file"
    );
    let decoded = decode_store(golden).map_err(|e| e.to_string())?;
    ensure!(
        decoded.records()[1].data()[0] == 0.1f32 as f64,
        "golden decode differs"
    );
    ensure!(
        decoded.records()[1].data()[5].is_sign_negative(),
        "negative zero lost"
    );
    Ok(format!("40-record round trip f32-exact, bad magic and {} truncations rejected, golden {} bytes match", cuts.len(), golden.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("framing oracle", framing_oracle),
        ("attention normalization", attention_normalization),
        ("hand-computed pipeline value", hand_values),
        ("loss values", loss_values),
        ("gradient correctness", gradient_correctness),
        ("determinism", determinism),
        ("desk-scale convergence", convergence),
        ("retrieval oracle", retrieval_oracle),
        ("format conformance", format_conformance),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
