//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! print.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ia2u_core::classifier::Classifier;
use ia2u_core::fen::FenModel;
use ia2u_core::gradcheck::check_gradients;
use ia2u_core::graph::Graph;
use ia2u_core::msfa::{sample_align, MsfaBlock, PriorAttention, SCALE_FACTORS};
use ia2u_core::params::ParamStore;
use ia2u_core::priorgen::PriorGenerator;
use ia2u_core::tasks::det::{detection_loss, encode_targets, DET_OUTPUTS};
use ia2u_core::tasks::uie::{ssim, uie_loss, uie_total};
use ia2u_core::tasks::{TaskKind, TaskModel};
use ia2u_core::train::{classifier_accuracy, evaluate_det, evaluate_uie, train_classifier, train_task};
use ia2u_core::watersim::{generate_in_memory, GtBox, SceneSample};
use ia2u_core::{ImageTensor, RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

/// Desk-scale settings shared by the directional criteria.
mod desk {
    pub const IMAGE: usize = 64;
    pub const CHANNELS: usize = 16;
    pub const UIE_TRAIN: usize = 180;
    pub const UIE_EPOCHS: usize = 15;
    /// Peak rate for both enhancement arms; the 2e-4 default is tuned for
    /// hundreds of epochs, not fifteen.
    pub const UIE_MAX_LR: f64 = 3e-3;
    pub const DET_TRAIN: usize = 180;
    pub const DET_EPOCHS: usize = 30;
    pub const VAL: usize = 18;
    pub const TEST: usize = 90;
    pub const SEEDS: [u64; 3] = [0, 1, 2];
}

fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()).unwrap()
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageTensor<f32> {
    let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(Tensor::from_vec(&[1, 3, h, w], data).unwrap()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn identity_at_init() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let classifier = Classifier::new(&mut rng);
    let fen = FenModel::new(&mut store, "fen.", &RunConfig::default(), classifier, &mut rng).map_err(|e| e.to_string())?;
    let sizes = [(32, 32), (64, 64), (32, 64), (64, 32), (96, 64)];
    let mut worst = 0.0f32;
    for i in 0..20 {
        let (h, w) = sizes[i % sizes.len()];
        let x = random_image(h, w, &mut rng);
        let y = fen.enhance(&store, &x).map_err(|e| e.to_string())?;
        worst = worst.max(x.tensor().max_abs_diff(y.tensor()).map_err(|e| e.to_string())?);
    }
    Ok((worst == 0.0, format!("max |enhance(x) - x| = {worst:e} over 20 images")))
}

fn gradient_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = RunConfig {
        channels: 4,
        ..RunConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let block = MsfaBlock::new(&mut store, "block", &cfg, &mut rng);
    let f = random_tensor(&[1, 4, 8, 8], &mut rng, -1.0, 1.0);
    let p = random_tensor(&[1, 4, 8, 8], &mut rng, -1.0, 1.0);
    let target = random_tensor(&[1, 4, 8, 8], &mut rng, -1.0, 1.0);
    let block_report = check_gradients(&mut store, &[f, p], 1e-4, |g, s, v| {
        let y = block.forward(g, s, v[0], v[1])?;
        let t = g.constant(target.clone());
        let d = g.sub(y, t)?;
        let sq = g.mul(d, d)?;
        Ok(g.mean(sq))
    })
    .map_err(|e| e.to_string())?;

    // SSIM's 11x11 window needs at least 16x16 (the smallest valid image)
    let reference = random_tensor(&[1, 3, 16, 16], &mut rng, 0.0, 1.0);
    let pred = reference.map(|r| if r > 0.5 { r - 0.2 } else { r + 0.2 });
    let ucfg = RunConfig::default();
    let uie_report = check_gradients(&mut ParamStore::new(), &[pred], 1e-4, |g, _, v| {
        let r = g.constant(reference.clone());
        uie_loss(g, v[0], r, &ucfg)
    })
    .map_err(|e| e.to_string())?;

    let gt = |c, x0, y0, x1, y1| GtBox {
        class_id: c,
        x0,
        y0,
        x1,
        y1,
    };
    let boxes = vec![vec![gt(0, 4.0, 6.0, 20.0, 18.0), gt(2, 30.0, 33.0, 45.0, 50.0), gt(1, 50.0, 2.0, 62.0, 13.0)]];
    let targets = encode_targets::<f64>(&boxes, 8, 8);
    let mut preds = random_tensor(&[1, DET_OUTPUTS, 8, 8], &mut rng, -1.0, 1.0);
    for k in 0..4 * 64 {
        preds.data_mut()[4 * 64 + k] = targets.boxes.data()[k] + if k % 2 == 0 { 0.3 } else { -0.3 };
    }
    let det_report = check_gradients(&mut ParamStore::new(), &[preds], 1e-4, |g, _, v| detection_loss(g, v[0], &boxes))
        .map_err(|e| e.to_string())?;

    let worst = block_report
        .max_rel_error
        .max(uie_report.max_rel_error)
        .max(det_report.max_rel_error);
    Ok((
        worst < 1e-3,
        format!(
            "max rel err msfa_block {:.2e} ({} entries), uie_loss {:.2e}, detection_loss {:.2e}",
            block_report.max_rel_error, block_report.checked, uie_report.max_rel_error, det_report.max_rel_error
        ),
    ))
}

fn alignment() -> Check {
    let mut worst = 0.0f64;
    for from in SCALE_FACTORS {
        for to in SCALE_FACTORS {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_vec(&[1, 2, 16 / from, 16 / from], vec![0.3; 2 * 256 / (from * from)]).unwrap());
            let y = sample_align(&mut g, x, from, to).map_err(|e| e.to_string())?;
            let v = g.value(y);
            if v.shape()[2] != 16 / to {
                return Ok((false, format!("{from}->{to} gave side {}", v.shape()[2])));
            }
            worst = v.data().iter().fold(worst, |m, &e| m.max((e - 0.3).abs()));
        }
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let pooled = sample_align(&mut g, x, 1, 2).map_err(|e| e.to_string())?;
    let p = g.value(pooled).data()[0];
    Ok((
        worst < 1e-6 && p == 4.0,
        format!("constant drift {worst:e} over 9 pairs; pool [[1,3],[5,7]] = {p}"),
    ))
}

fn fused_prior_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = RunConfig::default();
    let classifier = Classifier::<f32>::new(&mut rng);
    let mut store = ParamStore::new();
    let priors = PriorGenerator::new(&mut store, "prior", &cfg, &mut rng);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = random_image(32, 32, &mut rng);
        let pred = classifier.classify(&x).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let feats = pred.features.clone().map(|f| g.constant(f.into_tensor()));
        let shared = priors.shared(&mut g, &store, &pred.prob, &feats, (32, 32)).map_err(|e| e.to_string())?;
        let f_j = g.constant(random_tensor(&[1, cfg.channels, 32, 32], &mut rng, -1.0, 1.0).cast());
        let bundle = priors.bundle(&mut g, &shared, f_j).map_err(|e| e.to_string())?;
        for plane in g.value(bundle.fused).data().chunks(32 * 32) {
            let n = plane.len() as f64;
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }
    Ok((
        worst_mean < 1e-4 && worst_var < 1e-3,
        format!("worst |mean| {worst_mean:.2e}, worst |var - 1| {worst_var:.2e} over 100 inputs"),
    ))
}

fn attention_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = RunConfig::default();
    let mut store = ParamStore::<f64>::new();
    let attn = PriorAttention::new(&mut store, "attn", &cfg, &mut rng);
    let (mut lo, mut hi, mut violations) = (1.0f64, 0.0f64, 0usize);
    for _ in 0..100 {
        let mut g = Graph::new();
        let f1 = g.constant(random_tensor(&[1, cfg.channels, 16, 16], &mut rng, -3.0, 3.0));
        let p = g.constant(random_tensor(&[1, cfg.channels, 16, 16], &mut rng, -3.0, 3.0));
        let parts = attn.forward_parts(&mut g, &store, f1, p).map_err(|e| e.to_string())?;
        for &m in g.value(parts.gate).data() {
            lo = lo.min(m);
            hi = hi.max(m);
        }
        violations += g
            .value(parts.out)
            .data()
            .iter()
            .zip(g.value(parts.value).data())
            .filter(|(o, v)| o.abs() > v.abs())
            .count();
    }
    Ok((
        lo > 0.0 && hi < 1.0 && violations == 0,
        format!("M in [{lo:.3e}, {hi:.6}], |out| > |V| at {violations} entries"),
    ))
}

fn classifier_target() -> Check {
    let [train, val, _] = generate_in_memory(900, 180, 9, desk::IMAGE, false, 0).map_err(|e| e.to_string())?;
    let cfg = RunConfig::classifier();
    let (model, history) = train_classifier(&train, &val, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    let acc = classifier_accuracy(&model, &val, 32).map_err(|e| e.to_string())?;
    let curve: Vec<String> = history.iter().map(|e| format!("{:.3}", e.val[0])).collect();
    Ok((
        acc >= 0.9 && cfg.epochs <= 20,
        format!("val top-1 {acc:.4} after {} epochs (per epoch: {})", cfg.epochs, curve.join(" ")),
    ))
}

fn train_desk_classifier(train: &[SceneSample], val: &[SceneSample]) -> Result<Classifier<f32>, String> {
    let cfg = RunConfig {
        epochs: 10,
        ..RunConfig::classifier()
    };
    Ok(train_classifier(train, val, &cfg, &mut |_| {}).map_err(|e| e.to_string())?.0)
}

fn desk_task_config(kind: TaskKind, seed: u64, epochs: usize, plugin: bool) -> RunConfig {
    let base = match kind {
        TaskKind::Uie => RunConfig {
            max_lr: desk::UIE_MAX_LR,
            ..RunConfig::default()
        },
        TaskKind::Det => RunConfig::detection(),
    };
    RunConfig {
        seed,
        epochs,
        channels: desk::CHANNELS,
        use_plugin: plugin,
        ..base
    }
}

fn uie_gain() -> Check {
    let [train, val, test] =
        generate_in_memory(desk::UIE_TRAIN, desk::VAL, desk::TEST, desk::IMAGE, false, 0).map_err(|e| e.to_string())?;
    let classifier = train_desk_classifier(&train, &val)?;
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in desk::SEEDS {
        for plugin in [false, true] {
            let cfg = desk_task_config(TaskKind::Uie, seed, desk::UIE_EPOCHS, plugin);
            let (model, _) =
                train_task(TaskKind::Uie, Some(classifier.clone()), &train, &val, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
            let psnr = evaluate_uie(&model, &test).map_err(|e| e.to_string())?.mean()[0];
            if plugin { &mut with } else { &mut without }.push(psnr);
        }
    }
    let (mw, mo) = (median(with.clone()), median(without.clone()));
    Ok((
        mw >= mo + 0.5,
        format!("median test PSNR {mw:.3} dB with plugin vs {mo:.3} dB without (per seed {with:.2?} / {without:.2?})"),
    ))
}

fn det_gain() -> Check {
    let [train, val, test] =
        generate_in_memory(desk::DET_TRAIN, desk::VAL, desk::TEST, desk::IMAGE, true, 0).map_err(|e| e.to_string())?;
    let classifier = train_desk_classifier(&train, &val)?;
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in desk::SEEDS {
        for plugin in [false, true] {
            let cfg = desk_task_config(TaskKind::Det, seed, desk::DET_EPOCHS, plugin);
            let (model, _) =
                train_task(TaskKind::Det, Some(classifier.clone()), &train, &val, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
            let map = evaluate_det(&model, &test).map_err(|e| e.to_string())?.0.mean()[0];
            if plugin { &mut with } else { &mut without }.push(map);
        }
    }
    let (mw, mo) = (median(with.clone()), median(without.clone()));
    Ok((
        mw >= mo,
        format!("median test mAP50 {mw:.4} with plugin vs {mo:.4} without (per seed {with:.3?} / {without:.3?})"),
    ))
}

fn ablation() -> Check {
    let base = RunConfig {
        channels: 8,
        fen_blocks: 2,
        ..RunConfig::default()
    };
    let variants = [
        ("full", base.clone()),
        (
            "-W",
            RunConfig {
                enable_water_prior: false,
                ..base.clone()
            },
        ),
        (
            "-D",
            RunConfig {
                enable_degrad_prior: false,
                ..base.clone()
            },
        ),
        (
            "-S",
            RunConfig {
                enable_sample_prior: false,
                ..base.clone()
            },
        ),
        (
            "-FS",
            RunConfig {
                enable_full_scale: false,
                ..base.clone()
            },
        ),
    ];
    let x = random_image(32, 32, &mut ChaCha8Rng::seed_from_u64(5));
    let classifier = Classifier::<f32>::new(&mut ChaCha8Rng::seed_from_u64(6));
    let mut outputs = Vec::new();
    for (_, cfg) in &variants {
        let mut store = ParamStore::new();
        let fen = FenModel::new(&mut store, "fen.", cfg, classifier.clone(), &mut ChaCha8Rng::seed_from_u64(7))
            .map_err(|e| e.to_string())?;
        outputs.push(fen.enhance_features(&store, &x).map_err(|e| e.to_string())?.into_tensor());
    }
    let mut min_diff = f32::INFINITY;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            min_diff = min_diff.min(outputs[i].max_abs_diff(&outputs[j]).map_err(|e| e.to_string())?);
        }
    }

    // every prior subset with at least one prior, with and without full scale
    let [train, val, _] = generate_in_memory(2, 1, 1, 32, false, 0).map_err(|e| e.to_string())?;
    let mut trained = 0;
    for mask in 1..8u32 {
        for full_scale in [true, false] {
            let cfg = RunConfig {
                enable_water_prior: mask & 1 != 0,
                enable_degrad_prior: mask & 2 != 0,
                enable_sample_prior: mask & 4 != 0,
                enable_full_scale: full_scale,
                epochs: 1,
                batch_size: 2,
                ..base.clone()
            };
            train_task(TaskKind::Uie, Some(classifier.clone()), &train, &val, &cfg, &mut |_| {})
                .map_err(|e| format!("mask {mask:03b} full_scale {full_scale}: {e}"))?;
            trained += 1;
        }
    }
    let none = RunConfig {
        enable_water_prior: false,
        enable_degrad_prior: false,
        enable_sample_prior: false,
        ..base
    };
    let rejected = TaskModel::new(TaskKind::Uie, &none, Some(classifier), &mut ChaCha8Rng::seed_from_u64(0)).is_err();
    Ok((
        min_diff > 0.0 && rejected,
        format!("smallest pairwise max-abs difference {min_diff:.3e}; {trained} toggle combinations trained; no-prior config rejected: {rejected}"),
    ))
}

fn loss_exactness() -> Check {
    let cfg = RunConfig::default();
    let total = uie_total(0.5, 0.8, &cfg);
    // the graph loss is the same combination of its measured parts
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_image(32, 32, &mut rng);
    let b = random_image(32, 32, &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.tensor().clone()), g.constant(b.tensor().clone()));
    let loss = uie_loss(&mut g, va, vb, &cfg).map_err(|e| e.to_string())?;
    let l1 = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.tensor().data().len() as f64;
    let expected = uie_total(l1, ssim(&a, &b).map_err(|e| e.to_string())?, &cfg);
    let graph = g.value(loss).data()[0] as f64;
    Ok((
        (total - 0.52).abs() <= 1e-9 && (graph - expected).abs() < 1e-5,
        format!("uie_loss(L1=0.5, SSIM=0.8) = {total:.12}; graph loss {graph:.6} vs parts {expected:.6}"),
    ))
}

fn ia2u(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ia2u"))
        .args(args)
        .env("IA2U_NUM_WORKERS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("ia2u {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let (corpus, cls) = (p("corpus"), p("cls"));
    ia2u(&["gen-data", "--out", &corpus, "--n-train", "32", "--n-val", "9", "--n-test", "9", "--seed", "0"])?;
    ia2u(&["train-classifier", "--corpus", &corpus, "--out", &cls, "--epochs", "2", "--seed", "0"])?;
    let ckpt = Path::new(&cls).join("model.ckpt").to_string_lossy().into_owned();
    let mut csvs = Vec::new();
    for run in ["run_a", "run_b"] {
        let out = p(run);
        ia2u(&["train-uie", "--corpus", &corpus, "--classifier", &ckpt, "--out", &out, "--epochs", "2", "--seed", "0"])?;
        csvs.push(std::fs::read(Path::new(&out).join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    Ok((
        csvs[0] == csvs[1],
        format!("metrics.csv of two seeded runs: {} and {} bytes, identical: {}", csvs[0].len(), csvs[1].len(), csvs[0] == csvs[1]),
    ))
}

fn main() {
    // `cargo test -- --list` and filters from the other targets end up here too
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, u64, fn() -> Check); 11] = [
        ("identity at init", 10, identity_at_init),
        ("gradient oracle", 120, gradient_oracle),
        ("full-scale alignment", 5, alignment),
        ("prior fusion statistics", 10, fused_prior_statistics),
        ("attention bounds", 10, attention_bounds),
        ("classifier desk target", 600, classifier_target),
        ("uie directional gain", 1800, uie_gain),
        ("detection directional gain", 2400, det_gain),
        ("ablation distinctness", 120, ablation),
        ("loss formula exactness", 1, loss_exactness),
        ("determinism", 600, determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        let in_time = took <= Duration::from_secs(budget);
        let pass = ok && in_time;
        failed += usize::from(!pass);
        println!(
            "{} {:>2} {name}: {detail} [{:.1} s of {budget} s{}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
