//! Clip-level evaluation: accuracy, one-vs-rest average precision and
//! macro mAP, ROC curves with trapezoid AUC, and the full test-set report.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{log_mel_with, mel_filterbank, LogMelSpectrogram, N_FFT, N_MELS};
use crate::manifest::{DatasetManifest, Split};
use crate::model::{forward, softmax_scores, Mode, ModelParams};
use crate::par::par_map;
use crate::synth::NUM_CLASSES;

/// Fraction of exact argmax matches; ties break to the lowest class index.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::domain("accuracy needs equal-length non-empty inputs"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn argmax_lowest_tie(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Rank-based average precision: sort by score descending (ties keep the
/// original index order), AP = mean over positive ranks r of
/// (positives at rank <= r) / r.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::domain("scores/positives length mismatch"));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::domain("average precision undefined with no positives"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut seen_pos = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if positives[idx] {
            seen_pos += 1;
            sum += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Unweighted mean of per-class one-vs-rest APs. Classes with no positive
/// example are skipped and reported back.
pub fn macro_map(score_matrix: &[Vec<f32>], labels: &[usize]) -> Result<(f64, Vec<usize>)> {
    if score_matrix.is_empty() {
        return Err(Error::domain("empty score matrix"));
    }
    let n_classes = score_matrix[0].len();
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for class in 0..n_classes {
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if !positives.iter().any(|&p| p) {
            skipped.push(class);
            continue;
        }
        let scores: Vec<f64> = score_matrix.iter().map(|row| row[class] as f64).collect();
        aps.push(average_precision(&scores, &positives)?);
    }
    if aps.is_empty() {
        return Err(Error::domain("no class has a positive example"));
    }
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, skipped))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPoint {
    /// Decision threshold; the (0,0) anchor uses +inf, stored as JSON null.
    #[serde(with = "json_threshold")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

mod json_threshold {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Threshold sweep over the distinct scores, from (0,0) to (1,1), plus the
/// trapezoid-rule AUC.
pub fn roc_points(scores: &[f64], positives: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain("ROC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        // consume every item tied at this threshold
        while i < order.len() && scores[order[i]] == thr {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().unwrap();
        let (fpr, tpr) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        auc += (fpr - prev.fpr) * (tpr + prev.tpr) / 2.0;
        points.push(RocPoint {
            threshold: thr,
            fpr,
            tpr,
        });
    }
    Ok((points, auc))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipResult {
    pub record_id: String,
    pub label: usize,
    pub scores: Vec<f32>,
    pub prediction: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class: usize,
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipResult>,
    pub accuracy: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub macro_map: f64,
    pub roc: Vec<ClassRoc>,
    pub macro_auc: f64,
}

/// Score a set of spectrograms in eval mode. Clips are grouped by frame
/// count so no batch needs padding; output order matches input order.
pub fn score_clips(
    params: &ModelParams<f32>,
    specs: &[LogMelSpectrogram],
    max_batch: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        by_len.entry(s.num_frames()).or_default().push(i);
    }
    let n_mels = params.arch.n_mels;
    let mut out = vec![Vec::new(); specs.len()];
    for (t, indices) in by_len {
        for chunk in indices.chunks(max_batch.max(1)) {
            let mut data = Array3::<f32>::zeros((chunk.len(), t, n_mels));
            for (bi, &si) in chunk.iter().enumerate() {
                data.slice_mut(ndarray::s![bi, .., ..]).assign(&specs[si].frames);
            }
            let logits = forward(params, &data.view(), Mode::Eval)?;
            let scores = softmax_scores(&logits);
            for (bi, &si) in chunk.iter().enumerate() {
                out[si] = scores.row(bi).to_vec();
            }
        }
    }
    Ok(out)
}

/// Evaluate a model on the test split of a manifest: eval-mode scoring of
/// every clip, then accuracy, per-class AP / macro mAP, and per-class ROC.
pub fn evaluate(
    params: &ModelParams<f32>,
    manifest: &DatasetManifest,
    manifest_path: &Path,
) -> Result<EvalReport> {
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .collect();
    if records.is_empty() {
        return Err(Error::domain("manifest has no test records"));
    }
    let fb = mel_filterbank(N_MELS, manifest.config.sample_rate, N_FFT);
    let specs: Vec<Result<LogMelSpectrogram>> = par_map(&records, |r| {
        let path = DatasetManifest::resolve(manifest_path, r);
        let clip = crate::audio_io::load_wav(&path)?;
        log_mel_with(&clip, &fb)
    });
    let mut loaded = Vec::with_capacity(specs.len());
    for (r, s) in records.iter().zip(specs) {
        match s {
            Ok(spec) => loaded.push(spec),
            Err(e) => {
                return Err(Error::Record {
                    index: 0,
                    path: r.out_path.clone(),
                    source: Box::new(e),
                })
            }
        }
    }
    let scores = score_clips(params, &loaded, 64)?;
    report_from_scores(
        records
            .iter()
            .map(|r| r.out_path.display().to_string())
            .collect(),
        records.iter().map(|r| r.label).collect(),
        scores,
    )
}

/// Aggregate pre-computed per-clip scores into a full report.
pub fn report_from_scores(
    record_ids: Vec<String>,
    labels: Vec<usize>,
    scores: Vec<Vec<f32>>,
) -> Result<EvalReport> {
    let preds: Vec<usize> = scores.iter().map(|s| argmax_lowest_tie(s)).collect();
    let acc = accuracy(&preds, &labels)?;

    let mut per_class_ap: Vec<Option<f64>> = Vec::with_capacity(NUM_CLASSES);
    let mut aps = Vec::new();
    for class in 0..NUM_CLASSES {
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if positives.iter().any(|&p| p) {
            let s: Vec<f64> = scores.iter().map(|row| row[class] as f64).collect();
            let ap = average_precision(&s, &positives)?;
            per_class_ap.push(Some(ap));
            aps.push(ap);
        } else {
            per_class_ap.push(None);
        }
    }
    if aps.is_empty() {
        return Err(Error::domain("no class has a positive example"));
    }
    let mmap = aps.iter().sum::<f64>() / aps.len() as f64;

    let mut roc = Vec::new();
    let mut aucs = Vec::new();
    for class in 0..NUM_CLASSES {
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let n_pos = positives.iter().filter(|&&p| p).count();
        if n_pos == 0 || n_pos == positives.len() {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|row| row[class] as f64).collect();
        let (points, auc) = roc_points(&s, &positives)?;
        aucs.push(auc);
        roc.push(ClassRoc {
            class,
            points,
            auc,
        });
    }
    let macro_auc = if aucs.is_empty() {
        0.0
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };

    let clips = record_ids
        .into_iter()
        .zip(labels)
        .zip(scores.iter().zip(&preds))
        .map(|((record_id, label), (s, &prediction))| ClipResult {
            record_id,
            label,
            scores: s.clone(),
            prediction,
        })
        .collect();

    Ok(EvalReport {
        clips,
        accuracy: acc,
        per_class_ap,
        macro_map: mmap,
        roc,
        macro_auc,
    })
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }

    /// ROC points as CSV (class, threshold, fpr, tpr) for external plotting.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("class,threshold,fpr,tpr\n");
        for cr in &self.roc {
            for p in &cr.points {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    cr.class, p.threshold, p.fpr, p.tpr
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    // Brute-force AP oracle: same definition computed by explicit rank
    // enumeration, kept independent of the implementation above.
    pub fn ap_bruteforce(scores: &[f64], positives: &[bool]) -> f64 {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut precisions = Vec::new();
        for r in 1..=n {
            if positives[order[r - 1]] {
                let hits = order[..r].iter().filter(|&&i| positives[i]).count();
                precisions.push(hits as f64 / r as f64);
            }
        }
        precisions.iter().sum::<f64>() / precisions.len() as f64
    }

    // Mann-Whitney pair-counting AUC oracle (ties count 0.5).
    pub fn auc_pair_counting(scores: &[f64], positives: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &pi) in positives.iter().enumerate() {
            if !pi {
                continue;
            }
            for (j, &pj) in positives.iter().enumerate() {
                if pj {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_counting() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        let a = accuracy(&[0, 1, 10], &[0, 1, 2]).unwrap();
        assert!((a - 2.0 / 3.0).abs() < 1e-12);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ap_hand_enumeration() {
        // scores [0.9, 0.8, 0.1], positives [T, F, T]
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // perfect ranking
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert_eq!(ap, 1.0);
        assert!(average_precision(&[0.5], &[false]).is_err());
    }

    #[test]
    fn ap_matches_bruteforce_fuzz() {
        let mut rng = SplitMix64::new(404);
        for _ in 0..1000 {
            let n = 2 + rng.gen_index(11);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_index(6) as f64) / 5.0).collect();
            let mut positives: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
            if !positives.iter().any(|&p| p) {
                positives[0] = true;
            }
            let fast = average_precision(&scores, &positives).unwrap();
            let brute = ap_bruteforce(&scores, &positives);
            assert!((fast - brute).abs() < 1e-12, "{scores:?} {positives:?}");
        }
    }

    #[test]
    fn auc_matches_pair_counting_fuzz() {
        let mut rng = SplitMix64::new(505);
        for _ in 0..1000 {
            let n = 2 + rng.gen_index(199);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_index(20) as f64) / 19.0).collect();
            let mut positives: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.4).collect();
            if !positives.iter().any(|&p| p) {
                positives[0] = true;
            }
            if positives.iter().all(|&p| p) {
                positives[0] = false;
            }
            let (_, auc) = roc_points(&scores, &positives).unwrap();
            let oracle = auc_pair_counting(&scores, &positives);
            assert!((auc - oracle).abs() < 1e-12, "auc {auc} oracle {oracle}");
        }
    }

    #[test]
    fn roc_perfect_and_degenerate() {
        let (points, auc) =
            roc_points(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        // identical scores -> AUC 0.5
        let (_, auc) = roc_points(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
        // single-class input is an error
        assert!(roc_points(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn roc_monotone_axes() {
        let mut rng = SplitMix64::new(99);
        let scores: Vec<f64> = (0..100).map(|_| rng.next_f64()).collect();
        let positives: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let (points, _) = roc_points(&scores, &positives).unwrap();
        for w in points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr);
            assert!(w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn score_monotone_invariance() {
        let mut rng = SplitMix64::new(777);
        let scores: Vec<f64> = (0..50).map(|_| rng.next_f64()).collect();
        let positives: Vec<bool> = (0..50).map(|_| rng.next_f64() < 0.3).collect();
        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).exp()).collect();
        let ap1 = average_precision(&scores, &positives).unwrap();
        let ap2 = average_precision(&transformed, &positives).unwrap();
        assert!((ap1 - ap2).abs() < 1e-12);
        let (_, auc1) = roc_points(&scores, &positives).unwrap();
        let (_, auc2) = roc_points(&transformed, &positives).unwrap();
        assert!((auc1 - auc2).abs() < 1e-12);
    }

    #[test]
    fn macro_map_class_order_invariant() {
        let mut rng = SplitMix64::new(11);
        let n = 60;
        let scores: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..NUM_CLASSES).map(|_| rng.next_f64() as f32).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
        let (m1, skipped) = macro_map(&scores, &labels).unwrap();
        assert!(skipped.is_empty());
        // permute class columns and labels consistently
        let perm: Vec<usize> = (0..NUM_CLASSES).rev().collect();
        let scores_p: Vec<Vec<f32>> = scores
            .iter()
            .map(|row| perm.iter().map(|&c| row[c]).collect())
            .collect();
        let labels_p: Vec<usize> = labels
            .iter()
            .map(|&l| perm.iter().position(|&c| c == l).unwrap())
            .collect();
        let (m2, _) = macro_map(&scores_p, &labels_p).unwrap();
        assert!((m1 - m2).abs() < 1e-12);
    }

    proptest::proptest! {
        // Arbitrary inputs (proptest's own RNG, independent of SplitMix64):
        // AP matches the brute-force oracle and AUC matches pair counting.
        #[test]
        fn metrics_match_oracles_on_arbitrary_inputs(
            scores in proptest::collection::vec(0..=10u8, 2..40),
            flags in proptest::collection::vec(proptest::bool::ANY, 40),
        ) {
            let scores: Vec<f64> = scores.iter().map(|&s| s as f64 / 10.0).collect();
            let mut positives: Vec<bool> = flags[..scores.len()].to_vec();
            if !positives.iter().any(|&p| p) {
                positives[0] = true;
            }
            let ap = average_precision(&scores, &positives).unwrap();
            let brute = ap_bruteforce(&scores, &positives);
            proptest::prop_assert!((ap - brute).abs() < 1e-12);
            if positives.iter().any(|&p| !p) {
                let (_, auc) = roc_points(&scores, &positives).unwrap();
                let oracle = auc_pair_counting(&scores, &positives);
                proptest::prop_assert!((auc - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn macro_map_perfect_classifier() {
        let labels: Vec<usize> = (0..22).map(|i| i % NUM_CLASSES).collect();
        let scores: Vec<Vec<f32>> = labels
            .iter()
            .map(|&l| {
                (0..NUM_CLASSES)
                    .map(|c| if c == l { 0.9 } else { 0.01 })
                    .collect()
            })
            .collect();
        let (m, _) = macro_map(&scores, &labels).unwrap();
        assert_eq!(m, 1.0);
    }
}
