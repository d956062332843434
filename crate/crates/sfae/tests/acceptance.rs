//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and to `target/acceptance/summary.txt`; the test fails
//! if any criterion fails.
//!
//! The phantom benchmark trains 15 models of 2000 steps and takes hours on a
//! single CPU core. Its run directory is kept under `target/acceptance` and
//! resumed on later runs: cells whose stored result matches the config hash
//! and its own digest are not retrained. Set `SFAE_ACCEPTANCE_DIR` to use
//! another directory.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfae::config::{BackboneConfig, DatasetConfig, ExperimentConfig, TrainSettings};
use sfae::runner::{cells, run_experiment, verify, RunReport, CONSTANT_METHOD};
use sfae_core::data::SliceBatch;
use sfae_core::evaluation::{metrics_from_maps, EvalReport, Metric};
use sfae_core::features::LayerSelection;
use sfae_core::metrics::{dice_at_fpr, image_auroc, pixel_ap};
use sfae_core::models::{build_feature_ae, FeatureAeSpec, ModelKind};
use sfae_core::nn::Layer;
use sfae_core::phantom::{make_phantom, PhantomConfig};
use sfae_core::scoring::{AnomalyMap, Reducer, ScoringConfig};
use sfae_core::ssim::{ssim_loss, ssim_map, SsimConfig, WindowKind};
use sfae_core::Tensor;

type Outcome = (bool, String);

fn out_dir() -> PathBuf {
    std::env::var_os("SFAE_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_tensor(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random::<f32>()).collect()).unwrap()
}

/// Closed-form SSIM of two patches under window weights `w`.
fn patch_ssim(p: &[f64], q: &[f64], w: &[f64], l: f64) -> f64 {
    let mp: f64 = p.iter().zip(w).map(|(a, w)| a * w).sum();
    let mq: f64 = q.iter().zip(w).map(|(a, w)| a * w).sum();
    let vp: f64 = p.iter().zip(w).map(|(a, w)| w * (a - mp).powi(2)).sum();
    let vq: f64 = q.iter().zip(w).map(|(a, w)| w * (a - mq).powi(2)).sum();
    let cov: f64 = p.iter().zip(q).zip(w).map(|((a, b), w)| w * (a - mp) * (b - mq)).sum();
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    (2.0 * mp * mq + c1) * (2.0 * cov + c2) / ((mp * mp + mq * mq + c1) * (vp + vq + c2))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter().flat_map(|a| g.iter().map(move |b| a * b / (s * s))).collect()
}

fn ssim_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut identity: f64 = 0.0;
    let cases = 200;
    for i in 0..cases {
        // Half the cases use the uniform window, half the default Gaussian.
        let cfg = if i % 2 == 0 {
            SsimConfig {
                window: WindowKind::Uniform,
                ..SsimConfig::default()
            }
        } else {
            SsimConfig::default()
        };
        let w = match cfg.window {
            WindowKind::Uniform => vec![1.0 / 121.0; 121],
            WindowKind::Gaussian { sigma } => gaussian_window(11, sigma),
        };
        let x = uniform_tensor([1, 1, 11, 11], &mut r);
        let y = uniform_tensor([1, 1, 11, 11], &mut r);
        let p: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let q: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        let got = ssim_map(&x, &y, &cfg).unwrap().values[60];
        worst = worst.max((got - patch_ssim(&p, &q, &w, 1.0)).abs());
        for v in ssim_map(&x, &x, &cfg).unwrap().values {
            identity = identity.max((v - 1.0).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (
        worst <= 1e-6 && identity <= 1e-6 && secs < 10.0,
        format!("{cases} patches, max |diff| {worst:.2e}, max |ssim(x,x) - 1| {identity:.2e}, {secs:.2}s"),
    )
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let cfg = SsimConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        // Dyadic values keep y ± h exact in f32.
        let mut dyadic = || Tensor::from_vec([1, 2, 8, 8], (0..128).map(|_| r.random_range(64..960) as f32 / 1024.0).collect()).unwrap();
        let (x, y) = (dyadic(), dyadic());
        let grad = ssim_loss(&x, &y, &cfg, false, true).unwrap().grad_y.unwrap();
        let h = 1.0 / 1024.0;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for i in 0..y.len() {
            let loss_at = |d: f32| {
                let mut b = y.clone();
                b.data_mut()[i] += d;
                ssim_loss(&x, &b, &cfg, false, false).unwrap().loss
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h as f64);
            let analytic = grad.data()[i] as f64;
            diff += (analytic - numeric).powi(2);
            norm += numeric.powi(2);
        }
        worst = worst.max(diff.sqrt() / norm.sqrt());
    }
    let secs = t.elapsed().as_secs_f64();
    (worst <= 1e-3 && secs < 30.0, format!("10 inputs 1x2x8x8, max relative error {worst:.2e}, {secs:.2}s"))
}

fn brute_metrics(scores: &[f64], labels: &[u8]) -> (f64, f64, f64) {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    let counts = |t: f64| {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count();
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count();
        (tp, fp)
    };
    let (mut ap, mut prev) = (0.0, 0.0);
    for &t in &thresholds {
        let (tp, fp) = counts(t);
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev) * (tp as f64 / (tp + fp) as f64);
        prev = recall;
    }
    let mut dice = 0.0;
    for &t in thresholds.iter().rev() {
        let (tp, fp) = counts(t);
        if fp as f64 <= 0.05 * neg as f64 {
            dice = 2.0 * tp as f64 / (2 * tp + fp + (pos - tp)) as f64;
            break;
        }
    }
    let mut twice_u = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                twice_u += if si > sj { 2 } else { usize::from(si == sj) };
            }
        }
    }
    (ap, dice, twice_u as f64 / (2 * pos * neg) as f64)
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut mismatches = 0;
    for case in 0..500u64 {
        let mut r = rng(case);
        let n = r.random_range(2..=12);
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        labels.shuffle(&mut r);
        let scores: Vec<f64> = (0..n).map(|_| if case % 2 == 0 { r.random_range(0..4) as f64 / 4.0 } else { r.random() }).collect();
        let (ap, dice, auroc) = brute_metrics(&scores, &labels);
        let got = (
            pixel_ap(&scores, &labels).unwrap(),
            dice_at_fpr(&scores, &labels, 0.05).unwrap(),
            image_auroc(&scores, &labels).unwrap(),
        );
        if got != (ap, dice, auroc) {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (mismatches == 0 && secs < 60.0, format!("500 cases of length <= 12, {mismatches} mismatches, {secs:.2}s"))
}

fn constant_maps(test: &SliceBatch) -> Vec<AnomalyMap> {
    (0..test.len())
        .map(|i| AnomalyMap {
            id: test.ids[i].clone(),
            size: test.size(),
            pixel_scores: vec![0.5; test.size() * test.size()],
            image_score: 0.5,
        })
        .collect()
}

fn random_floors() -> Outcome {
    let test = make_phantom(6, 3, &common::tiny_generator()).unwrap().split.test;
    let masks = test.masks.as_ref().unwrap();
    let p = masks.iter().filter(|&&m| m == 1).count() as f64 / masks.len() as f64;
    let mut r = rng(4);
    let (mut exact, mut worst) = (true, 0.0f64);
    for _ in 0..20 {
        let mut order: Vec<usize> = (0..test.len()).collect();
        order.shuffle(&mut r);
        let shuffled = test.select(&order);
        let m = metrics_from_maps(&constant_maps(&shuffled), &shuffled).unwrap();
        exact &= m.pixel_ap == p;
        worst = worst.max((m.image_auroc - 0.5).abs());
    }
    (
        exact && worst <= 0.02,
        format!("prevalence {p:.5}, pixel_ap exact over 20 shuffles: {exact}, max |auroc - 0.5| {worst}"),
    )
}

fn architecture() -> Outcome {
    let t = Instant::now();
    let m = build_feature_ae(&FeatureAeSpec::new(256), 0).unwrap();
    let stages = m.encoder_stage_shapes(32, 32).unwrap();
    let out = m.infer(&Tensor::zeros([1, 256, 32, 32])).unwrap();
    let bias_free = m.encoder_layers().iter().all(|l| !matches!(l, Layer::Conv(c) if c.bias.is_some()));
    // enc c·100·25 + 100·150·25 + 150·200·25 + 200·300·25, bottleneck 300·300·25,
    // dec 300·200·25 + 200·150·25 + 150·100·25 + 100·100·25, 2·(100+150+200+300)
    // + 2·(200+150+100+100) norm parameters, head 100·c + c.
    let c = 256;
    let hand = c * 2500 + 375_000 + 750_000 + 1_500_000 + 2_250_000 + 1_500_000 + 750_000 + 375_000 + 250_000 + 2 * 750 + 2 * 550 + 100 * c + c;
    let count = m.parameter_count();
    let secs = t.elapsed().as_secs_f64();
    let ok = stages == vec![[100, 16, 16], [150, 8, 8], [200, 4, 4], [300, 2, 2]]
        && out.shape() == [1, 256, 32, 32]
        && bias_free
        && count == hand
        && secs < 5.0;
    (ok, format!("stages {stages:?}, output {:?}, encoder bias-free {bias_free}, {count} parameters (hand count {hand}), {secs:.2}s", out.shape()))
}

/// The desk-scale phantom benchmark shared by criteria 6 and 7.
fn benchmark_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig::Phantom {
            n_volumes: 50,
            seed: 0,
            generator: PhantomConfig::default(),
        },
        kinds: vec![ModelKind::FeatureAe, ModelKind::DfrStyleSsim, ModelKind::DfrStyle],
        selections: vec![LayerSelection::standard()],
        seeds: (0..5).collect(),
        train: TrainSettings {
            steps: 2000,
            batch_size: Some(4),
            ..TrainSettings::default()
        },
        scoring: ScoringConfig {
            reducer: Reducer::Max,
            ..ScoringConfig::default()
        },
        backbone: BackboneConfig {
            allow_random: true,
            ..BackboneConfig::default()
        },
        overlays: 4,
        output_dir: out_dir().join("phantom"),
        ..ExperimentConfig::default()
    }
}

fn p_against(r: &EvalReport, metric: Metric) -> f64 {
    r.significance
        .iter()
        .find(|s| s.against == CONSTANT_METHOD && s.metric == metric)
        .map_or(f64::NAN, |s| s.p)
}

fn end_to_end(report: &RunReport, cfg: &ExperimentConfig, train_secs: f64) -> Outcome {
    let (Some(ours), Some(constant)) = (report.report(ModelKind::FeatureAe.name()), report.report(CONSTANT_METHOD)) else {
        return (false, "feature_ae or constant row missing".into());
    };
    let floor = constant.pixel_ap.mean;
    let (ap, auroc) = (ours.pixel_ap, ours.image_auroc);
    let (p_ap, p_auroc) = (p_against(ours, Metric::PixelAp), p_against(ours, Metric::ImageAuroc));
    let ok = ours.n_seeds == cfg.seeds.len() && ap.mean >= 3.0 * floor && auroc.mean >= 0.65 && p_ap <= 0.05 && p_auroc <= 0.05;
    (
        ok,
        format!(
            "{} seeds: pixel_ap {:.4}±{:.4} ({:.1}x prevalence {floor:.4}, p {p_ap:.2e}), image_auroc {:.4}±{:.4} (p {p_auroc:.2e}), dice {:.4}; feature_ae training and evaluation {:.0} min",
            ours.n_seeds,
            ap.mean,
            ap.std,
            ap.mean / floor,
            auroc.mean,
            auroc.std,
            ours.dice_at_5fpr.mean,
            train_secs / 60.0
        ),
    )
}

fn ordering(report: &RunReport, dir: &std::path::Path) -> Outcome {
    let names = [ModelKind::FeatureAe, ModelKind::DfrStyleSsim, ModelKind::DfrStyle].map(|k| k.name());
    let rows: Vec<Option<&EvalReport>> = names.iter().map(|n| report.report(n)).collect();
    let written = dir.join("report.json").is_file() && dir.join("table.csv").is_file();
    if !written || rows.iter().any(Option::is_none) {
        return (false, "report or one of its rows is missing".into());
    }
    let means: Vec<f64> = rows.iter().map(|r| r.unwrap().pixel_ap.mean).collect();
    let holds = means[0] >= means[1] && means[1] >= means[2];
    // The ordering itself is a soft check: it is logged, not required.
    (
        true,
        format!(
            "report written; pixel_ap means feature_ae {:.4}, dfr_style_ssim {:.4}, dfr_style {:.4}; ordering {}",
            means[0],
            means[1],
            means[2],
            if holds { "holds" } else { "does not hold" }
        ),
    )
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let root = out_dir().join("determinism");
    let _ = std::fs::remove_dir_all(&root);
    let kinds = [ModelKind::FeatureAe, ModelKind::DfrStyleSsim, ModelKind::ImageAeMse];
    let a = common::tiny_config(&kinds, &[0, 1], &root.join("a"));
    let b = ExperimentConfig {
        output_dir: root.join("b"),
        ..a.clone()
    };
    let (ra, rb) = (run_experiment(&a).unwrap(), run_experiment(&b).unwrap());
    let mut identical = ra.report == rb.report;
    for cell in cells(&a) {
        let read = |cfg: &ExperimentConfig| std::fs::read(cfg.output_dir.join("cells").join(cell.key()).join("checkpoint.sfta")).unwrap();
        identical &= read(&a) == read(&b);
    }
    // Results differ only in their recorded timings.
    for (x, y) in ra.results.iter().zip(&rb.results) {
        identical &= x.digest == y.digest && x.checkpoint_sha256 == y.checkpoint_sha256 && x.maps_sha256 == y.maps_sha256;
    }
    let v = verify(&a.output_dir, usize::MAX).unwrap();
    let secs = t.elapsed().as_secs_f64();
    (
        identical && v.ok() && v.rerun_cells == cells(&a).len() && secs < 300.0,
        format!(
            "two fresh runs bit-identical: {identical}; verify reran {} cells, {} hash errors, {} mismatches; {secs:.0}s",
            v.rerun_cells,
            v.hash_errors.len(),
            v.mismatches.len()
        ),
    )
}

fn record(log: &mut Vec<String>, n: usize, name: &str, (ok, detail): Outcome) -> bool {
    let line = format!("{} {n}. {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    log.push(line);
    ok
}

#[test]
fn acceptance() {
    std::fs::create_dir_all(out_dir()).unwrap();
    let mut log = Vec::new();
    let mut ok = true;
    ok &= record(&mut log, 1, "SSIM oracle", ssim_oracle());
    ok &= record(&mut log, 2, "SSIM gradient", gradient_check());
    ok &= record(&mut log, 3, "metric oracle", metric_oracle());
    ok &= record(&mut log, 4, "constant-score floors", random_floors());
    ok &= record(&mut log, 5, "architecture contract", architecture());

    let cfg = benchmark_config();
    let outcome = run_experiment(&cfg).unwrap();
    let train_secs: f64 = outcome.results.iter().filter(|r| r.cell.kind == ModelKind::FeatureAe).map(|r| r.seconds).sum();
    ok &= record(&mut log, 6, "phantom end-to-end", end_to_end(&outcome.report, &cfg, train_secs));
    ok &= record(&mut log, 7, "contribution ordering", ordering(&outcome.report, &outcome.dir));
    ok &= record(&mut log, 8, "determinism", determinism());

    std::fs::write(out_dir().join("summary.txt"), log.join("\n") + "\n").unwrap();
    assert!(ok, "acceptance criteria failed:\n{}", log.join("\n"));
}
