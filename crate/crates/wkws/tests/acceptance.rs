//! End-to-end acceptance gate. Each test checks one release criterion and
//! prints a single PASS/FAIL line (visible with `--nocapture`; on failure
//! the line appears in the captured output).

use std::path::{Path, PathBuf};

use ndarray::Array3;
use wkws::audio_io::{load_wav, resample, rms_power_of, AudioClip};
use wkws::eval::{average_precision, roc_points, score_clips};
use wkws::features::{log_mel, pad_batch};
use wkws::manifest::{DatasetManifest, Split, SynthConfig, Variant};
use wkws::model::{
    backward, checkpoint, init_model, train_loss, update_running_stats, ModelArch, ModelParams,
};
use wkws::rng::{derive_seed, SplitMix64};
use wkws::smoke::{end_to_end_smoke, write_micro_corpus, write_noise_corpus, SmokeConfig};
use wkws::synth::{
    build_dataset, fit_noise, list_noise_files, sample_offset, scan_keyword_corpus,
};
use wkws::train::{adam_step, average_checkpoints, random_crop, AdamState};

fn verdict(n: usize, name: &str, pass: bool) {
    println!("criterion {n} ({name}): {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed");
}

/// Build a dataset over a generated micro-corpus; returns the manifest and
/// its path (the manifest lives inside the dataset directory).
fn build_test_dataset(
    root: &Path,
    variant: Variant,
    snr_db: Option<f64>,
    clips_per_class: usize,
    seed: u64,
) -> (DatasetManifest, PathBuf) {
    let corpus = root.join("corpus");
    let noise = root.join("noise");
    let data = root.join("data");
    write_micro_corpus(&corpus, seed, clips_per_class).unwrap();
    write_noise_corpus(&noise, derive_seed(seed, 1 << 40)).unwrap();
    let config = SynthConfig {
        variant,
        target_seconds: 1.0,
        snr_db,
        sample_rate: 16_000,
        seed,
        keyword_dir: corpus.clone(),
        noise_dir: Some(noise.clone()),
        out_dir: data.clone(),
    };
    let keywords = scan_keyword_corpus(&corpus).unwrap();
    let noise_paths = list_noise_files(&noise).unwrap();
    let manifest = build_dataset(&config, &keywords, &noise_paths, true).unwrap();
    let path = data.join("manifest.jsonl");
    manifest.save(&path).unwrap();
    (manifest, path)
}

/// Criterion 1: for SNR-mixed datasets at 0/5/10 dB, the SNR re-derived
/// from the source clips and the stored mixing gain matches the request
/// within 0.1 dB on every record (>= 1000 records per SNR).
#[test]
fn c1_snr_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let clips_per_class = 91; // 11 classes -> 1001 records per dataset
    let mut worst: f64 = 0.0;
    for (i, snr) in [0.0, 5.0, 10.0].iter().enumerate() {
        let root = dir.path().join(format!("snr{i}"));
        let (manifest, mpath) =
            build_test_dataset(&root, Variant::WeakSnr, Some(*snr), clips_per_class, 60 + i as u64);
        assert!(manifest.records.len() >= 1000);
        let noise_paths = list_noise_files(&root.join("noise")).unwrap();
        for rec in &manifest.records {
            let kw_path = DatasetManifest::resolve_path(&mpath, &rec.source_keyword);
            let kw = resample(&load_wav(&kw_path).unwrap(), 16_000).unwrap();
            // Replay the record's draw sequence to rebuild the noise bed.
            let mut rng = SplitMix64::new(rec.seed);
            let noise_path = &noise_paths[rng.gen_index(noise_paths.len())];
            assert_eq!(
                DatasetManifest::resolve_path(&mpath, rec.source_noise.as_ref().unwrap())
                    .canonicalize()
                    .unwrap(),
                noise_path.canonicalize().unwrap()
            );
            let noise = resample(&load_wav(noise_path).unwrap(), 16_000).unwrap();
            let bed = fit_noise(&noise, 16_000, &mut rng);
            let offset = sample_offset(&mut rng, 16_000, kw.samples.len()).unwrap();
            assert_eq!(offset, rec.offset_samples);
            let g = rec.noise_gain.unwrap();
            let p_kw = rms_power_of(&kw.samples).unwrap();
            let p_noise = rms_power_of(&bed[offset..offset + kw.samples.len()]).unwrap();
            let realized = 10.0 * (p_kw / (g * g * p_noise)).log10();
            worst = worst.max((realized - snr).abs());
        }
    }
    println!("  worst SNR deviation: {worst:.2e} dB");
    verdict(1, "snr within 0.1 dB of request", worst <= 0.1);
}

/// Criterion 2: in spliced (non-SNR) datasets the keyword samples appear
/// verbatim at the recorded offset in the output clip (>= 1000 records).
#[test]
fn c2_splice_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, mpath) = build_test_dataset(dir.path(), Variant::Weak, None, 91, 77);
    assert!(manifest.records.len() >= 1000);
    let mut ok = true;
    for rec in &manifest.records {
        let kw_path = DatasetManifest::resolve_path(&mpath, &rec.source_keyword);
        let kw = resample(&load_wav(&kw_path).unwrap(), 16_000).unwrap();
        let out = load_wav(&DatasetManifest::resolve(&mpath, rec)).unwrap();
        let seg = &out.samples[rec.offset_samples..rec.offset_samples + kw.samples.len()];
        if seg != kw.samples.as_slice() {
            ok = false;
            break;
        }
    }
    verdict(2, "keyword spliced verbatim", ok);
}

fn ks_uniform(counts: &[usize], n: usize) -> f64 {
    let bins = counts.len();
    let mut cum = 0.0;
    let mut d: f64 = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        cum += c as f64 / n as f64;
        d = d.max((cum - (k + 1) as f64 / bins as f64).abs());
    }
    d
}

/// Criterion 3: keyword offsets and training crops are uniform over their
/// valid range (KS test, n = 1e5, D below the 1% critical value).
#[test]
fn c3_offset_and_crop_uniformity() {
    let n = 100_000;
    let crit = 1.628 / (n as f64).sqrt();

    let (t, l) = (16_000usize, 7_000usize);
    let mut rng = SplitMix64::new(31);
    let mut counts = vec![0usize; t - l + 1];
    for _ in 0..n {
        counts[sample_offset(&mut rng, t, l).unwrap()] += 1;
    }
    let d_offset = ks_uniform(&counts, n);

    let clip = AudioClip {
        samples: (0..1000).map(|i| i as f32).collect(),
        sample_rate: 16_000,
    };
    let crop = 400;
    let mut counts = vec![0usize; clip.samples.len() - crop + 1];
    let mut rng = SplitMix64::new(32);
    for _ in 0..n {
        let c = random_crop(&clip, crop, &mut rng);
        counts[c.samples[0] as usize] += 1;
    }
    let d_crop = ks_uniform(&counts, n);

    println!("  KS offset {d_offset:.4}, crop {d_crop:.4}, critical {crit:.4}");
    verdict(3, "offset and crop uniform", d_offset < crit && d_crop < crit);
}

/// Criterion 4: analytic gradients agree with central finite differences —
/// exhaustively on a reduced model in f64, and on spot-checked parameters
/// of the full-size model (f32 analytic vs f64 finite differences).
#[test]
fn c4_gradient_check() {
    // Reduced model, full sweep in f64.
    let arch = ModelArch::tiny();
    let mut params: ModelParams<f64> = init_model(&arch, 24);
    let mut rng = SplitMix64::new(56);
    let x = Array3::<f64>::from_shape_fn((4, 16, arch.n_mels), |_| 2.0 * rng.next_f64() - 1.0);
    // This test point is pinned to keep every ReLU away from the stencil.
    let labels = vec![1, 4, 9, 10];
    let (_, grads, _) = backward(&params, &x.view(), &labels).unwrap();
    let eps = 1e-3;
    let mut worst_tiny: f64 = 0.0;
    for ti in 0..grads.tensors.len() {
        let n = grads.tensors[ti].len();
        for i in 0..n {
            let g = grads.tensors[ti].as_slice().unwrap()[i];
            let probe = |params: &mut ModelParams<f64>, delta: f64| {
                {
                    let mut views = params.trainable_views_mut();
                    views[ti].as_slice_mut().unwrap()[i] += delta;
                }
                let loss = train_loss(params, &x.view(), &labels).unwrap();
                {
                    let mut views = params.trainable_views_mut();
                    views[ti].as_slice_mut().unwrap()[i] -= delta;
                }
                loss
            };
            let fd = (probe(&mut params, eps) - probe(&mut params, -eps)) / (2.0 * eps);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst_tiny = worst_tiny.max(rel);
        }
    }

    // Full-size model, sampled indices, f32 analytic vs f64 finite diffs.
    let arch = ModelArch::full();
    let params32: ModelParams<f32> = init_model(&arch, 24);
    let params64: ModelParams<f64> = params32.cast();
    let mut rng = SplitMix64::new(56);
    let x32 = Array3::<f32>::from_shape_fn((2, 33, arch.n_mels), |_| {
        (2.0 * rng.next_f64() - 1.0) as f32
    });
    let x64 = x32.mapv(|v| v as f64);
    let labels = vec![3usize, 8];
    let (_, grads32, _) = backward(&params32, &x32.view(), &labels).unwrap();
    let mut params64 = params64;
    let mut rng = SplitMix64::new(4242);
    let mut worst_full: f64 = 0.0;
    let mut checked = 0;
    while checked < 25 {
        let ti = rng.gen_index(grads32.tensors.len());
        let i = rng.gen_index(grads32.tensors[ti].len());
        let g = grads32.tensors[ti].as_slice().unwrap()[i] as f64;
        // Spot-check parameters with a well-scaled gradient: for tiny ones
        // the f32 forward noise swamps any relative comparison.
        if g.abs() < 1e-3 {
            continue;
        }
        checked += 1;
        let probe = |params: &mut ModelParams<f64>, delta: f64| {
            {
                let mut views = params.trainable_views_mut();
                views[ti].as_slice_mut().unwrap()[i] += delta;
            }
            let loss = train_loss(params, &x64.view(), &labels).unwrap();
            {
                let mut views = params.trainable_views_mut();
                views[ti].as_slice_mut().unwrap()[i] -= delta;
            }
            loss
        };
        let eps = 1e-4;
        let fd = (probe(&mut params64, eps) - probe(&mut params64, -eps)) / (2.0 * eps);
        let rel = (g - fd).abs() / g.abs().max(fd.abs());
        worst_full = worst_full.max(rel);
    }

    println!("  worst rel error: reduced {worst_tiny:.2e}, full {worst_full:.2e}");
    verdict(4, "gradients match finite differences", worst_tiny < 1e-4 && worst_full < 1e-3);
}

/// Criterion 5: the full model's trainable parameter count sits within
/// +-10% of 66k.
#[test]
fn c5_parameter_count() {
    let params: ModelParams<f32> = init_model(&ModelArch::full(), 0);
    let n = params.param_count();
    println!("  parameter count: {n}");
    verdict(5, "param count within 10% of 66k", (59_400..=72_600).contains(&n));
}

/// Criterion 6: the untrained full model starts at chance-level loss
/// (ln 11 +- 0.3) and overfits a 64-clip subset to >= 99% training
/// accuracy within 200 epochs.
#[test]
fn c6_overfit_small_subset() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, mpath) = build_test_dataset(dir.path(), Variant::Weak, None, 10, 90);
    let train: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .take(64)
        .collect();
    assert_eq!(train.len(), 64);
    let specs: Vec<_> = train
        .iter()
        .map(|r| {
            let clip = load_wav(&DatasetManifest::resolve(&mpath, r)).unwrap();
            (log_mel(&clip).unwrap(), r.label)
        })
        .collect();
    let batch = pad_batch(&specs).unwrap();
    let labels = batch.labels.clone();

    let arch = ModelArch::full();
    let mut params: ModelParams<f32> = init_model(&arch, 90);
    let loss0 = train_loss(&params.cast::<f64>(), &batch.data.mapv(|v| v as f64).view(), &labels)
        .unwrap();
    let chance = (11.0f64).ln();
    println!("  initial loss {loss0:.4} (chance {chance:.4})");
    let chance_ok = (loss0 - chance).abs() <= 0.3;

    let mut adam = AdamState::new(&params);
    let mut best_acc = 0.0f64;
    for epoch in 0..200 {
        let (_, grads, stats) = backward(&params, &batch.data.view(), &labels).unwrap();
        update_running_stats(&mut params, &stats);
        adam_step(&mut params, &grads, &mut adam, 0.001, epoch).unwrap();
        let only_specs: Vec<_> = specs.iter().map(|(s, _)| s.clone()).collect();
        let scores = score_clips(&params, &only_specs, 64).unwrap();
        let hits = scores
            .iter()
            .zip(&labels)
            .filter(|(s, &l)| wkws::eval::argmax_lowest_tie(s) == l)
            .count();
        best_acc = best_acc.max(hits as f64 / labels.len() as f64);
        if best_acc >= 0.99 {
            println!("  reached {best_acc:.3} training accuracy at epoch {epoch}");
            break;
        }
    }
    verdict(6, "chance-level start and 64-clip overfit", chance_ok && best_acc >= 0.99);
}

/// Criterion 7: ranking metrics agree with independent oracles over >= 1000
/// randomized cases each (AP vs brute-force rank enumeration, AUC vs
/// Mann-Whitney pair counting).
#[test]
fn c7_metric_oracles() {
    fn ap_oracle(scores: &[f64], positives: &[bool]) -> f64 {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut precs = Vec::new();
        for r in 1..=n {
            if positives[order[r - 1]] {
                let hits = order[..r].iter().filter(|&&i| positives[i]).count();
                precs.push(hits as f64 / r as f64);
            }
        }
        precs.iter().sum::<f64>() / precs.len() as f64
    }
    fn auc_oracle(scores: &[f64], positives: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &pi) in positives.iter().enumerate() {
            if !pi {
                continue;
            }
            for (j, &pj) in positives.iter().enumerate() {
                if pj {
                    continue;
                }
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    let mut rng = SplitMix64::new(1234);
    let mut worst: f64 = 0.0;
    for case in 0..1500 {
        let n = 2 + rng.gen_index(60);
        // mix continuous and heavily tied score distributions
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    rng.next_f64()
                } else {
                    (rng.gen_index(7) as f64) / 6.0
                }
            })
            .collect();
        let mut positives: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.4).collect();
        if !positives.iter().any(|&p| p) {
            positives[0] = true;
        }
        let ap = average_precision(&scores, &positives).unwrap();
        worst = worst.max((ap - ap_oracle(&scores, &positives)).abs());
        if positives.iter().any(|&p| !p) {
            let (_, auc) = roc_points(&scores, &positives).unwrap();
            worst = worst.max((auc - auc_oracle(&scores, &positives)).abs());
        }
    }
    println!("  worst metric deviation from oracle: {worst:.2e}");
    verdict(7, "metrics match oracles", worst < 1e-12);
}

/// Criterion 8: two full pipeline runs with the same seed produce
/// byte-identical manifests, checkpoints, evaluation reports, and metrics
/// (wall-time column excluded).
#[test]
fn c8_pipeline_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut cfg = SmokeConfig::new(dir.path().join(name), 99);
        cfg.clips_per_class = 6;
        cfg.epochs = 2;
        end_to_end_smoke(&cfg, |_| {}).unwrap()
    };
    let a = run("a");
    let b = run("b");
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    let mut ok = bytes(&a.manifest_path) == bytes(&b.manifest_path)
        && bytes(&a.averaged_model_path) == bytes(&b.averaged_model_path)
        && bytes(&a.report_path) == bytes(&b.report_path)
        && bytes(&a.roc_csv_path) == bytes(&b.roc_csv_path);
    // per-epoch checkpoints
    for epoch in 0..2 {
        let name = format!("run/checkpoints/epoch_{epoch:03}.wkws");
        ok &= bytes(&dir.path().join("a").join(&name)) == bytes(&dir.path().join("b").join(&name));
    }
    // metrics minus the wall-clock column
    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplitn(2, ',').nth(1).unwrap_or(l).to_string())
            .collect()
    };
    ok &= strip(&a.metrics_path) == strip(&b.metrics_path);
    verdict(8, "pipeline byte-identical across runs", ok);
}

/// Criterion 9: checkpoint averaging is exact — identity for a single
/// checkpoint, elementwise mean (including BN running statistics) for
/// several.
#[test]
fn c9_checkpoint_averaging() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ModelArch::tiny();
    let mut saved: Vec<ModelParams<f32>> = Vec::new();
    let paths: Vec<PathBuf> = (0..4)
        .map(|i| {
            let p: ModelParams<f32> = init_model(&arch, 1000 + i);
            let path = dir.path().join(format!("{i}.wkws"));
            checkpoint::save_checkpoint_file(&p, &path).unwrap();
            saved.push(p);
            path
        })
        .collect();

    let single = average_checkpoints(&paths[..1]).unwrap();
    let identity_ok =
        checkpoint::save_checkpoint(&single) == checkpoint::save_checkpoint(&saved[0]);

    let mut avg = average_checkpoints(&paths).unwrap();
    let mut worst: f64 = 0.0;
    let avg_views = avg.all_slices_mut();
    let mut views: Vec<Vec<Vec<f32>>> = saved
        .iter_mut()
        .map(|p| p.all_slices_mut().iter().map(|s| s.to_vec()).collect())
        .collect();
    for (ti, a) in avg_views.iter().enumerate() {
        for (i, &x) in a.iter().enumerate() {
            let mean =
                views.iter_mut().map(|v| v[ti][i] as f64).sum::<f64>() / saved.len() as f64;
            worst = worst.max((x as f64 - mean).abs());
        }
    }
    println!("  worst averaging deviation: {worst:.2e}");
    verdict(9, "checkpoint averaging exact", identity_ok && worst < 1e-7);
}
