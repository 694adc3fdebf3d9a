//! Evaluation protocol: image-level AUROC (Mann-Whitney rank form with
//! midrank ties), pooled pixel-level AUROC, classification accuracy with a
//! validation-chosen threshold, and the one-class split protocol.

use crate::data::{BinaryDataset, DataSplit, LabeledDataset};
use crate::error::{DataError, MetricError};
use crate::scalar::Scalar;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Per-sample score with label and optional per-pixel maps.
/// `label`: 0 = normal, 1 = anomaly. Pixel labels use the same convention
/// (1 = anomalous pixel); pixel scores are higher-is-more-anomalous.
#[derive(Clone, Debug)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub label: u8,
    pub score: f64,
    pub pixel_scores: Option<Array2<f64>>,
    pub pixel_labels: Option<Array2<u8>>,
    /// Original multiclass id, for per-class breakdowns.
    pub class_id: Option<u32>,
}

impl ScoreRecord {
    pub fn simple(id: impl Into<String>, label: u8, score: f64) -> Self {
        Self {
            sample_id: id.into(),
            label,
            score,
            pixel_scores: None,
            pixel_labels: None,
            class_id: None,
        }
    }

    fn validate_pixels(&self) -> Result<(), MetricError> {
        match (&self.pixel_scores, &self.pixel_labels) {
            (Some(s), Some(l)) if s.dim() != l.dim() => Err(MetricError::DegenerateSplit(
                format!("{}: pixel maps shape-mismatched", self.sample_id),
            )),
            (Some(_), None) | (None, Some(_)) => Err(MetricError::DegenerateSplit(format!(
                "{}: pixel scores and labels must come together",
                self.sample_id
            ))),
            _ => Ok(()),
        }
    }
}

/// Rank-based AUROC over (score, label) pairs; ties count one half.
pub fn auroc_from_pairs(pairs: &mut Vec<(f64, u8)>) -> Result<f64, MetricError> {
    let n_pos = pairs.iter().filter(|(_, l)| *l == 1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // midrank of the tie group, 1-based
        let midrank = (i + 1 + j) as f64 / 2.0;
        for p in &pairs[i..j] {
            if p.1 == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Image-level AUROC; errors when only one class is present.
pub fn auroc(records: &[ScoreRecord]) -> Result<f64, MetricError> {
    let mut pairs: Vec<(f64, u8)> = records.iter().map(|r| (r.score, r.label)).collect();
    auroc_from_pairs(&mut pairs)
}

/// Pixel-level AUROC over the pooled pixel population of every record that
/// carries pixel maps.
pub fn pixel_auroc(records: &[ScoreRecord]) -> Result<f64, MetricError> {
    let mut pairs: Vec<(f64, u8)> = Vec::new();
    for r in records {
        r.validate_pixels()?;
        if let (Some(s), Some(l)) = (&r.pixel_scores, &r.pixel_labels) {
            pairs.extend(s.iter().zip(l.iter()).map(|(&sv, &lv)| (sv, lv)));
        }
    }
    if pairs.is_empty() {
        return Err(MetricError::UndefinedPixelMetric);
    }
    auroc_from_pairs(&mut pairs).map_err(|_| MetricError::UndefinedPixelMetric)
}

/// How the classification threshold is chosen.
#[derive(Clone, Debug)]
pub enum ThresholdPolicy {
    /// Maximize balanced accuracy on a validation record set.
    MaxBalancedAccuracy { validation: Vec<ScoreRecord> },
    Fixed(f64),
}

fn accuracy_at(records: &[ScoreRecord], threshold: f64) -> f64 {
    let correct = records
        .iter()
        .filter(|r| (r.score >= threshold) == (r.label == 1))
        .count();
    correct as f64 / records.len() as f64
}

fn balanced_accuracy_at(records: &[ScoreRecord], threshold: f64) -> f64 {
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        let pred = r.score >= threshold;
        match (r.label == 1, pred) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let tpr = tp as f64 / (tp + fn_).max(1) as f64;
    let tnr = tn as f64 / (tn + fp).max(1) as f64;
    (tpr + tnr) / 2.0
}

/// Candidate thresholds: below the minimum, midpoints of adjacent distinct
/// scores, above the maximum.
fn candidate_thresholds(records: &[ScoreRecord]) -> Vec<f64> {
    let mut scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut out = Vec::with_capacity(scores.len() + 1);
    out.push(scores[0] - 1.0);
    for w in scores.windows(2) {
        out.push((w[0] + w[1]) / 2.0);
    }
    out.push(scores[scores.len() - 1] + 1.0);
    out
}

/// Choose a threshold by policy, then report plain accuracy of
/// `score >= threshold -> anomaly` on the evaluation records.
pub fn classification_accuracy(
    records: &[ScoreRecord],
    policy: &ThresholdPolicy,
) -> Result<(f64, f64), MetricError> {
    if records.is_empty() {
        return Err(MetricError::DegenerateSplit("empty evaluation split".into()));
    }
    let both = |rs: &[ScoreRecord]| {
        rs.iter().any(|r| r.label == 0) && rs.iter().any(|r| r.label == 1)
    };
    if !both(records) {
        return Err(MetricError::DegenerateSplit(
            "evaluation split has a single class".into(),
        ));
    }
    let threshold = match policy {
        ThresholdPolicy::Fixed(t) => *t,
        ThresholdPolicy::MaxBalancedAccuracy { validation } => {
            if validation.is_empty() || !both(validation) {
                return Err(MetricError::DegenerateSplit(
                    "validation split needs both classes".into(),
                ));
            }
            let mut best = (f64::NEG_INFINITY, f64::NAN);
            for t in candidate_thresholds(validation) {
                let ba = balanced_accuracy_at(validation, t);
                if ba > best.0 {
                    best = (ba, t);
                }
            }
            best.1
        }
    };
    Ok((accuracy_at(records, threshold), threshold))
}

/// One-class protocol: train on the normal class only; test on everything
/// with binary relabeling.
pub fn one_class_protocol<S: Scalar>(
    dataset: &LabeledDataset<S>,
    normal_class: u32,
) -> Result<BinaryDataset<S>, DataError> {
    if normal_class as usize >= dataset.class_names.len() {
        return Err(DataError::UnknownClass(normal_class));
    }
    let train_idx: Vec<usize> = dataset
        .train
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == normal_class).then_some(i))
        .collect();
    if train_idx.is_empty() {
        return Err(DataError::Layout(format!(
            "no training samples for class {normal_class}"
        )));
    }
    let train_images = dataset.train.images.select(&train_idx);
    let test_orig_class = dataset.test.labels.clone();
    let test = DataSplit {
        ids: dataset.test.ids.clone(),
        images: dataset.test.images.clone(),
        labels: dataset
            .test
            .labels
            .iter()
            .map(|&l| u32::from(l != normal_class))
            .collect(),
        masks: dataset.test.masks.clone(),
    };
    Ok(BinaryDataset {
        name: dataset.name.clone(),
        normal_class,
        class_names: dataset.class_names.clone(),
        train_images,
        test,
        test_orig_class,
    })
}

/// Per-original-class score summary in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class_id: u32,
    pub class_name: String,
    pub n: usize,
    pub mean_score: f64,
    /// AUROC of this anomaly class against the normal test samples
    /// (absent for the normal class itself).
    pub auroc_vs_normal: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_source: String,
    pub auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub accuracy_at_threshold: f64,
    pub threshold: f64,
    pub threshold_policy: String,
    pub per_class: Vec<ClassBreakdown>,
    pub n_samples: usize,
    pub n_validation: usize,
    pub n_evaluation: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// ROC points (fpr, tpr) sorted by threshold descending; used for CSV export
/// and curve rendering.
pub fn roc_points(records: &[ScoreRecord]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, u8)> = records.iter().map(|r| (r.score, r.label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = sorted.iter().filter(|(_, l)| *l == 1).count().max(1);
    let n_neg = (sorted.len() - n_pos.min(sorted.len())).max(1);
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        out.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    /// O(n^2) pairwise oracle: P(score_anomaly > score_normal) + 0.5 ties.
    fn auroc_bruteforce(records: &[ScoreRecord]) -> f64 {
        let pos: Vec<f64> = records.iter().filter(|r| r.label == 1).map(|r| r.score).collect();
        let neg: Vec<f64> = records.iter().filter(|r| r.label == 0).map(|r| r.score).collect();
        let mut acc = 0.0;
        for &p in &pos {
            for &n in &neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn perfect_separation_gives_one() {
        let recs = vec![
            ScoreRecord::simple("a1", 1, 0.9),
            ScoreRecord::simple("a2", 1, 0.8),
            ScoreRecord::simple("n1", 0, 0.1),
            ScoreRecord::simple("n2", 0, 0.2),
        ];
        assert_eq!(auroc(&recs).unwrap(), 1.0);
    }

    #[test]
    fn all_equal_scores_give_half() {
        let recs: Vec<ScoreRecord> = (0..10)
            .map(|i| ScoreRecord::simple(format!("{i}"), (i % 2) as u8, 0.7))
            .collect();
        assert_eq!(auroc(&recs).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        let recs = vec![ScoreRecord::simple("x", 0, 0.5)];
        assert!(matches!(auroc(&recs), Err(MetricError::SingleClass)));
    }

    #[test]
    fn matches_bruteforce_oracle_with_ties() {
        let mut r = stream(123, &[9]);
        for case in 0..30 {
            let n = r.gen_range(5..60);
            let recs: Vec<ScoreRecord> = (0..n)
                .map(|i| {
                    // coarse grid forces plenty of ties
                    let score = r.gen_range(0..12) as f64 / 11.0;
                    ScoreRecord::simple(format!("{i}"), u8::from(r.gen_bool(0.4)), score)
                })
                .collect();
            let has_both = recs.iter().any(|x| x.label == 0) && recs.iter().any(|x| x.label == 1);
            if !has_both {
                continue;
            }
            let fast = auroc(&recs).unwrap();
            let slow = auroc_bruteforce(&recs);
            assert!((fast - slow).abs() < 1e-9, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn invariant_under_strictly_increasing_transforms() {
        let mut r = stream(5, &[11]);
        let recs: Vec<ScoreRecord> = (0..50)
            .map(|i| ScoreRecord::simple(format!("{i}"), u8::from(r.gen_bool(0.5)), r.gen_range(-2.0..2.0)))
            .collect();
        let base = auroc(&recs).unwrap();
        let exp: Vec<ScoreRecord> = recs
            .iter()
            .map(|x| ScoreRecord::simple(x.sample_id.clone(), x.label, x.score.exp()))
            .collect();
        let affine: Vec<ScoreRecord> = recs
            .iter()
            .map(|x| ScoreRecord::simple(x.sample_id.clone(), x.label, 3.5 * x.score + 11.0))
            .collect();
        assert!((auroc(&exp).unwrap() - base).abs() < 1e-12);
        assert!((auroc(&affine).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn label_flip_score_negation_symmetry() {
        let mut r = stream(6, &[11]);
        let recs: Vec<ScoreRecord> = (0..40)
            .map(|i| ScoreRecord::simple(format!("{i}"), u8::from(r.gen_bool(0.3)), r.gen_range(0..7) as f64))
            .collect();
        let flipped: Vec<ScoreRecord> = recs
            .iter()
            .map(|x| ScoreRecord::simple(x.sample_id.clone(), 1 - x.label, -x.score))
            .collect();
        assert!((auroc(&recs).unwrap() - auroc(&flipped).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pixel_auroc_pools_and_matches_flattened() {
        let mut r = stream(7, &[11]);
        let mk = |r: &mut rand_chacha::ChaCha8Rng, id: usize| {
            let scores = Array2::from_shape_fn((4, 4), |_| r.gen_range(0..5) as f64 / 4.0);
            let labels = Array2::from_shape_fn((4, 4), |_| u8::from(r.gen_bool(0.3)));
            ScoreRecord {
                sample_id: format!("{id}"),
                label: 1,
                score: 0.0,
                pixel_scores: Some(scores),
                pixel_labels: Some(labels),
                class_id: None,
            }
        };
        let recs: Vec<ScoreRecord> = (0..6).map(|i| mk(&mut r, i)).collect();
        let pooled = pixel_auroc(&recs).unwrap();
        // flatten into per-pixel records and reuse image-level auroc
        let flat: Vec<ScoreRecord> = recs
            .iter()
            .flat_map(|rec| {
                let s = rec.pixel_scores.as_ref().unwrap();
                let l = rec.pixel_labels.as_ref().unwrap();
                s.iter()
                    .zip(l.iter())
                    .enumerate()
                    .map(|(k, (&sv, &lv))| ScoreRecord::simple(format!("{}_{k}", rec.sample_id), lv, sv))
                    .collect::<Vec<_>>()
            })
            .collect();
        assert!((pooled - auroc(&flat).unwrap()).abs() < 1e-12);

        // perfect complement: scores equal labels -> 1.0
        let perfect: Vec<ScoreRecord> = recs
            .iter()
            .map(|rec| {
                let l = rec.pixel_labels.as_ref().unwrap().clone();
                ScoreRecord {
                    pixel_scores: Some(l.mapv(|v| v as f64)),
                    pixel_labels: Some(l),
                    ..rec.clone()
                }
            })
            .collect();
        assert_eq!(pixel_auroc(&perfect).unwrap(), 1.0);

        // constant maps -> exactly 0.5
        let constant: Vec<ScoreRecord> = recs
            .iter()
            .map(|rec| ScoreRecord {
                pixel_scores: Some(Array2::from_elem((4, 4), 0.3)),
                ..rec.clone()
            })
            .collect();
        assert_eq!(pixel_auroc(&constant).unwrap(), 0.5);
    }

    #[test]
    fn pixel_auroc_all_normal_is_undefined() {
        let recs = vec![ScoreRecord {
            sample_id: "x".into(),
            label: 0,
            score: 0.0,
            pixel_scores: Some(Array2::zeros((2, 2))),
            pixel_labels: Some(Array2::zeros((2, 2))),
            class_id: None,
        }];
        assert!(matches!(
            pixel_auroc(&recs),
            Err(MetricError::UndefinedPixelMetric)
        ));
    }

    #[test]
    fn accuracy_perfect_separation_and_sweep_oracle() {
        let val = vec![
            ScoreRecord::simple("v1", 0, 0.1),
            ScoreRecord::simple("v2", 0, 0.2),
            ScoreRecord::simple("v3", 1, 0.8),
            ScoreRecord::simple("v4", 1, 0.9),
        ];
        let eval = vec![
            ScoreRecord::simple("e1", 0, 0.15),
            ScoreRecord::simple("e2", 1, 0.85),
        ];
        let (acc, thr) = classification_accuracy(
            &eval,
            &ThresholdPolicy::MaxBalancedAccuracy { validation: val },
        )
        .unwrap();
        assert_eq!(acc, 1.0);
        assert!(thr > 0.2 && thr < 0.8);

        // handcrafted 6-record fixture against an exhaustive sweep
        let fixture = vec![
            ScoreRecord::simple("a", 0, 0.1),
            ScoreRecord::simple("b", 0, 0.4),
            ScoreRecord::simple("c", 0, 0.45),
            ScoreRecord::simple("d", 1, 0.42),
            ScoreRecord::simple("e", 1, 0.7),
            ScoreRecord::simple("f", 1, 0.9),
        ];
        let (_, thr) = classification_accuracy(
            &fixture,
            &ThresholdPolicy::MaxBalancedAccuracy {
                validation: fixture.clone(),
            },
        )
        .unwrap();
        // oracle: sweep every midpoint, keep best balanced accuracy
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for t in candidate_thresholds(&fixture) {
            let ba = balanced_accuracy_at(&fixture, t);
            if ba > best.0 {
                best = (ba, t);
            }
        }
        assert_eq!(thr, best.1);
        assert_eq!(
            balanced_accuracy_at(&fixture, thr),
            balanced_accuracy_at(&fixture, best.1)
        );
    }

    #[test]
    fn chance_level_accuracy_on_random_scores() {
        let mut r = stream(8, &[11]);
        let recs: Vec<ScoreRecord> = (0..2000)
            .map(|i| ScoreRecord::simple(format!("{i}"), (i % 2) as u8, r.gen_range(0.0..1.0)))
            .collect();
        let (acc, _) = classification_accuracy(
            &recs,
            &ThresholdPolicy::Fixed(0.5),
        )
        .unwrap();
        assert!((acc - 0.5).abs() < 0.05, "acc {acc}");
    }

    #[test]
    fn degenerate_splits_error() {
        let one_class = vec![ScoreRecord::simple("a", 0, 0.1)];
        assert!(classification_accuracy(&one_class, &ThresholdPolicy::Fixed(0.5)).is_err());
        let eval = vec![
            ScoreRecord::simple("a", 0, 0.1),
            ScoreRecord::simple("b", 1, 0.9),
        ];
        assert!(classification_accuracy(
            &eval,
            &ThresholdPolicy::MaxBalancedAccuracy {
                validation: one_class
            }
        )
        .is_err());
    }

    #[test]
    fn one_class_protocol_splits_correctly() {
        use crate::data::{generate_shapes_dataset, SyntheticShapesConfig};
        let cfg = SyntheticShapesConfig {
            canvas: 32,
            train_normal: 5,
            test_normal: 3,
            test_anomaly: 4,
            seed: 2,
            ..Default::default()
        };
        let ds = generate_shapes_dataset::<f32>(&cfg);
        let bin = one_class_protocol(&ds, 0).unwrap();
        assert_eq!(bin.train_images.batch_size(), 5);
        assert!(bin.test.labels.iter().filter(|&&l| l == 1).count() == 4);
        assert!(bin.test.labels.iter().filter(|&&l| l == 0).count() == 3);
        assert_eq!(bin.test_orig_class.len(), 7);
        // unknown class id
        assert!(one_class_protocol(&ds, 9).is_err());
    }

    #[test]
    fn ten_class_toy_anomaly_fraction() {
        // 10-class relabeling arithmetic on a synthetic labeled dataset
        use crate::data::{DataSplit, LabeledDataset};
        use ndarray::Array4;
        let n = 40;
        let images = crate::types::ImageTensor::<f32>::new(Array4::zeros((n, 3, 16, 16))).unwrap();
        let labels: Vec<u32> = (0..n as u32).map(|i| i % 10).collect();
        let ds = LabeledDataset {
            name: "toy".into(),
            class_names: (0..10).map(|i| format!("c{i}")).collect(),
            train: DataSplit {
                ids: (0..n).map(|i| format!("tr{i}")).collect(),
                images: images.clone(),
                labels: labels.clone(),
                masks: None,
            },
            test: DataSplit {
                ids: (0..n).map(|i| format!("te{i}")).collect(),
                images,
                labels,
                masks: None,
            },
        };
        let bin = one_class_protocol(&ds, 0).unwrap();
        let anomalies = bin.test.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(anomalies, n * 9 / 10);
        // train split contains zero anomaly-labeled samples by construction
        assert_eq!(bin.train_images.batch_size(), n / 10);
    }
}
