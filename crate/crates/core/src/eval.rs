//! Dataset splitting (10% fine-tuning holdout plus stratified 4-fold cross
//! validation at a 3:1 train:test ratio), classification metrics, and
//! deadline-based early-detection curves.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Event, Label};
use crate::model::{predict, DrrdModel, EventEmbedder, ModelError, Prediction};
use crate::util::fork_seed;

pub const N_FOLDS: usize = 4;
pub const HOLDOUT_FRACTION: f64 = 0.10;

/// Deadlines (hours) evaluated by default in the early-detection setting.
pub const DEFAULT_DEADLINES: [f64; 8] = [12.0, 24.0, 36.0, 48.0, 60.0, 72.0, 84.0, 96.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {need} events to split, got {got}")]
    TooFewEvents { need: usize, got: usize },
    #[error("event ids and labels differ in length: {ids} vs {labels}")]
    LengthMismatch { ids: usize, labels: usize },
    #[error("prediction and label lists differ in length: {predictions} vs {labels}")]
    PredictionLengthMismatch { predictions: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("deadline list is empty")]
    EmptyDeadlines,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One train/test division of the non-holdout events.
#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// The full splitting of a corpus: the fine-tuning holdout plus four folds
/// whose test sets partition the remaining events.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub holdout: Vec<String>,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

/// Stratified holdout: shuffles ids per class (deterministically from the
/// seed) and takes floor(N * fraction) of them, apportioned across classes
/// by largest remainder. Returns (holdout, per-class remainders).
pub fn stratified_holdout(
    event_ids: &[String],
    labels: &[Label],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, [Vec<String>; 2]), EvalError> {
    if event_ids.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            ids: event_ids.len(),
            labels: labels.len(),
        });
    }
    if event_ids.is_empty() {
        return Err(EvalError::EmptyInput);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(fork_seed(seed, "holdout"));
    let mut per_class: [Vec<&String>; 2] = [Vec::new(), Vec::new()];
    for (id, &label) in event_ids.iter().zip(labels) {
        per_class[label.index()].push(id);
    }
    for ids in &mut per_class {
        ids.shuffle(&mut rng);
    }

    let total_holdout = (event_ids.len() as f64 * fraction).floor() as usize;
    let exact: Vec<f64> = per_class
        .iter()
        .map(|ids| ids.len() as f64 * fraction)
        .collect();
    let mut take: Vec<usize> = exact.iter().map(|&x| x.floor() as usize).collect();
    let mut remaining = total_holdout - take.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..per_class.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .partial_cmp(&(exact[a] - exact[a].floor()))
            .unwrap()
    });
    for &class in &order {
        if remaining == 0 {
            break;
        }
        take[class] += 1;
        remaining -= 1;
    }

    let mut holdout = Vec::with_capacity(total_holdout);
    let mut rest: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (class, ids) in per_class.iter().enumerate() {
        holdout.extend(ids[..take[class]].iter().map(|s| s.to_string()));
        rest[class] = ids[take[class]..].iter().map(|s| s.to_string()).collect();
    }
    Ok((holdout, rest))
}

/// Splits event ids into the 10% holdout and 4 stratified folds. The holdout
/// size is floor(N/10), apportioned per class by largest remainder; each
/// class's remaining ids are chunked into 4 near-equal test sets, keeping
/// every fold's class balance within one event of the corpus balance.
pub fn split_folds(
    event_ids: &[String],
    labels: &[Label],
    seed: u64,
) -> Result<FoldSplit, EvalError> {
    if event_ids.len() < 20 {
        return Err(EvalError::TooFewEvents {
            need: 20,
            got: event_ids.len(),
        });
    }
    let (holdout, rest) = stratified_holdout(event_ids, labels, HOLDOUT_FRACTION, seed)?;

    // Per class, chunk into N_FOLDS near-equal test sets.
    let mut test_sets: Vec<Vec<String>> = vec![Vec::new(); N_FOLDS];
    for ids in &rest {
        let base = ids.len() / N_FOLDS;
        let extra = ids.len() % N_FOLDS;
        let mut cursor = 0;
        for (fold, set) in test_sets.iter_mut().enumerate() {
            let size = base + usize::from(fold < extra);
            set.extend(ids[cursor..cursor + size].iter().map(|s| s.to_string()));
            cursor += size;
        }
    }

    let folds = test_sets
        .iter()
        .enumerate()
        .map(|(fold, test)| {
            let train = test_sets
                .iter()
                .enumerate()
                .filter(|&(other, _)| other != fold)
                .flat_map(|(_, ids)| ids.iter().cloned())
                .collect();
            Fold {
                train,
                test: test.clone(),
            }
        })
        .collect();

    Ok(FoldSplit {
        holdout,
        folds,
        seed,
    })
}

/// Per-class precision/recall/F1. A metric whose denominator is zero is
/// reported as 0.0 with its `*_defined` flag cleared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

/// Event-level accuracy plus per-class metrics and the raw confusion counts
/// (indexed confusion[actual][predicted]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub rumour: ClassMetrics,
    pub non_rumour: ClassMetrics,
    pub confusion: [[usize; 2]; 2],
    pub total: usize,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, false)
    } else {
        (num as f64 / den as f64, true)
    }
}

fn class_metrics(confusion: &[[usize; 2]; 2], class: usize) -> ClassMetrics {
    let other = 1 - class;
    let tp = confusion[class][class];
    let fp = confusion[other][class];
    let fn_ = confusion[class][other];
    let (precision, precision_defined) = ratio(tp, tp + fp);
    let (recall, recall_defined) = ratio(tp, tp + fn_);
    let (f1, f1_defined) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), true)
    } else {
        (0.0, false)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        precision_defined,
        recall_defined,
        f1_defined,
    }
}

pub fn compute_metrics(predictions: &[Label], labels: &[Label]) -> Result<Metrics, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::PredictionLengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&pred, &actual) in predictions.iter().zip(labels) {
        confusion[actual.index()][pred.index()] += 1;
    }
    let correct = confusion[0][0] + confusion[1][1];
    Ok(Metrics {
        accuracy: correct as f64 / predictions.len() as f64,
        rumour: class_metrics(&confusion, Label::Rumour.index()),
        non_rumour: class_metrics(&confusion, Label::NonRumour.index()),
        confusion,
        total: predictions.len(),
    })
}

/// Accuracy at one deadline, with the number of events that had no
/// pre-deadline engagement (those count as incorrect).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeadlinePoint {
    pub deadline_hours: f64,
    pub accuracy: f64,
    pub n_no_evidence: usize,
}

/// Accuracy of deadline-restricted prediction over the events, per deadline.
/// Events without pre-deadline posts are counted as incorrect and reported
/// separately, so abstention can never inflate the curve.
pub fn early_detection_curve(
    model: &DrrdModel,
    embedder: &EventEmbedder,
    events: &[Event],
    deadlines: &[f64],
) -> Result<Vec<DeadlinePoint>, EvalError> {
    if deadlines.is_empty() {
        return Err(EvalError::EmptyDeadlines);
    }
    if events.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut points = Vec::with_capacity(deadlines.len());
    for &deadline in deadlines {
        let mut correct = 0usize;
        let mut no_evidence = 0usize;
        for event in events {
            match predict(event, model, embedder, Some(deadline))? {
                Prediction::Classified { label, .. } => {
                    if label == event.label {
                        correct += 1;
                    }
                }
                Prediction::InsufficientEvidence => no_evidence += 1,
            }
        }
        points.push(DeadlinePoint {
            deadline_hours: deadline,
            accuracy: correct as f64 / events.len() as f64,
            n_no_evidence: no_evidence,
        });
    }
    Ok(points)
}

/// One row of the metrics report CSV.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub setting: String,
    /// Fold index as a string so the mean row can be labelled "mean".
    pub fold: String,
    pub class: Label,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn metrics_rows(setting: &str, fold: &str, metrics: &Metrics) -> Vec<MetricsRow> {
    [
        (Label::Rumour, metrics.rumour),
        (Label::NonRumour, metrics.non_rumour),
    ]
    .into_iter()
    .map(|(class, m)| MetricsRow {
        setting: setting.to_string(),
        fold: fold.to_string(),
        class,
        accuracy: metrics.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
    })
    .collect()
}

/// Writes the metrics report with columns
/// (setting, fold, class, accuracy, precision, recall, f1).
pub fn write_metrics_csv(rows: &[MetricsRow], mut w: impl Write) -> Result<(), EvalError> {
    writeln!(w, "setting,fold,class,accuracy,precision,recall,f1")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.setting,
            r.fold,
            r.class.as_str(),
            r.accuracy,
            r.precision,
            r.recall,
            r.f1
        )?;
    }
    Ok(())
}

/// Writes the early-detection curve with columns
/// (deadline_hours, accuracy, n_no_evidence).
pub fn write_curve_csv(points: &[DeadlinePoint], mut w: impl Write) -> Result<(), EvalError> {
    writeln!(w, "deadline_hours,accuracy,n_no_evidence")?;
    for p in points {
        writeln!(
            w,
            "{},{:.6},{}",
            p.deadline_hours, p.accuracy, p.n_no_evidence
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ids_and_labels(n_rumour: usize, n_non: usize) -> (Vec<String>, Vec<Label>) {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_rumour {
            ids.push(format!("r{i}"));
            labels.push(Label::Rumour);
        }
        for i in 0..n_non {
            ids.push(format!("n{i}"));
            labels.push(Label::NonRumour);
        }
        (ids, labels)
    }

    #[test]
    fn table_sized_corpus_splits_as_expected() {
        // 991 events -> holdout 99; each fold about 669 train / 223 test.
        let (ids, labels) = ids_and_labels(498, 493);
        let split = split_folds(&ids, &labels, 1).unwrap();
        assert_eq!(split.holdout.len(), 99);
        assert_eq!(split.folds.len(), 4);
        for fold in &split.folds {
            assert_eq!(fold.test.len(), 223);
            assert_eq!(fold.train.len(), 669);
        }
    }

    #[test]
    fn splitting_is_deterministic_per_seed() {
        let (ids, labels) = ids_and_labels(30, 34);
        assert_eq!(
            split_folds(&ids, &labels, 5).unwrap(),
            split_folds(&ids, &labels, 5).unwrap()
        );
        assert_ne!(
            split_folds(&ids, &labels, 5).unwrap(),
            split_folds(&ids, &labels, 6).unwrap()
        );
    }

    #[test]
    fn test_sets_partition_the_non_holdout_events() {
        let (ids, labels) = ids_and_labels(41, 39);
        let split = split_folds(&ids, &labels, 3).unwrap();
        let holdout: HashSet<&String> = split.holdout.iter().collect();
        let mut seen: HashSet<&String> = HashSet::new();
        for fold in &split.folds {
            for id in &fold.test {
                assert!(!holdout.contains(id), "test id in holdout");
                assert!(seen.insert(id), "test sets overlap on {id}");
            }
            let train: HashSet<&String> = fold.train.iter().collect();
            for id in &fold.test {
                assert!(!train.contains(id), "{id} in both train and test");
            }
            assert_eq!(fold.train.len() + fold.test.len() + holdout.len(), ids.len());
        }
        assert_eq!(seen.len(), ids.len() - holdout.len());
    }

    #[test]
    fn folds_are_stratified_within_one_event() {
        let (ids, labels) = ids_and_labels(50, 46);
        let by_id: std::collections::HashMap<&String, Label> =
            ids.iter().zip(labels.iter().copied()).collect();
        let split = split_folds(&ids, &labels, 9).unwrap();

        let rumours_rest = split
            .folds
            .iter()
            .flat_map(|f| &f.test)
            .filter(|id| by_id[id] == Label::Rumour)
            .count();
        let per_fold_expected = rumours_rest as f64 / 4.0;
        for fold in &split.folds {
            let rumours = fold
                .test
                .iter()
                .filter(|id| by_id[id] == Label::Rumour)
                .count();
            assert!(
                (rumours as f64 - per_fold_expected).abs() <= 1.0,
                "fold rumour count {rumours} vs expected {per_fold_expected}"
            );
        }
    }

    #[test]
    fn too_few_events_are_rejected() {
        let (ids, labels) = ids_and_labels(5, 5);
        assert!(matches!(
            split_folds(&ids, &labels, 0),
            Err(EvalError::TooFewEvents { .. })
        ));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![Label::Rumour, Label::NonRumour, Label::Rumour];
        let m = compute_metrics(&labels, &labels).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for c in [m.rumour, m.non_rumour] {
            assert_eq!(c.precision, 1.0);
            assert_eq!(c.recall, 1.0);
            assert_eq!(c.f1, 1.0);
        }
    }

    #[test]
    fn balanced_confusion_matrix_scores_point_eight() {
        // TP=8, FP=2, FN=2, TN=8 for the rumour class.
        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..8 {
            predictions.push(Label::Rumour);
            labels.push(Label::Rumour);
        }
        for _ in 0..2 {
            predictions.push(Label::Rumour);
            labels.push(Label::NonRumour);
        }
        for _ in 0..2 {
            predictions.push(Label::NonRumour);
            labels.push(Label::Rumour);
        }
        for _ in 0..8 {
            predictions.push(Label::NonRumour);
            labels.push(Label::NonRumour);
        }
        let m = compute_metrics(&predictions, &labels).unwrap();
        assert!((m.accuracy - 0.8).abs() < 1e-12);
        assert!((m.rumour.precision - 0.8).abs() < 1e-12);
        assert!((m.rumour.recall - 0.8).abs() < 1e-12);
        assert!((m.rumour.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn no_predicted_positives_flags_undefined_precision() {
        let predictions = vec![Label::NonRumour, Label::NonRumour];
        let labels = vec![Label::Rumour, Label::NonRumour];
        let m = compute_metrics(&predictions, &labels).unwrap();
        assert_eq!(m.rumour.precision, 0.0);
        assert!(!m.rumour.precision_defined);
    }

    #[test]
    fn accuracy_matches_the_rumour_confusion_matrix() {
        let predictions = vec![
            Label::Rumour,
            Label::NonRumour,
            Label::Rumour,
            Label::NonRumour,
            Label::Rumour,
        ];
        let labels = vec![
            Label::Rumour,
            Label::Rumour,
            Label::NonRumour,
            Label::NonRumour,
            Label::Rumour,
        ];
        let m = compute_metrics(&predictions, &labels).unwrap();
        let c = m.confusion;
        let tp = c[1][1];
        let tn = c[0][0];
        assert!((m.accuracy - (tp + tn) as f64 / m.total as f64).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            compute_metrics(&[Label::Rumour], &[Label::Rumour, Label::NonRumour]),
            Err(EvalError::PredictionLengthMismatch { .. })
        ));
    }

    #[test]
    fn csv_columns_match_the_report_format() {
        let m = compute_metrics(
            &[Label::Rumour, Label::NonRumour],
            &[Label::Rumour, Label::NonRumour],
        )
        .unwrap();
        let rows = metrics_rows("extended", "0", &m);
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "setting,fold,class,accuracy,precision,recall,f1"
        );
        assert!(lines.next().unwrap().starts_with("extended,0,rumour,"));
        assert!(lines.next().unwrap().starts_with("extended,0,non_rumour,"));
    }
}
