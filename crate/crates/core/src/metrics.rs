//! Frame-level average precision per criterion and its mean.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{split_view, Dataset, FeatureRecord, Split, NUM_CRITERIA};
use crate::error::{Error, Result};
use crate::inference::{Strategy, StrategyScores};
use crate::io;

/// Non-interpolated average precision.
///
/// Items are ranked by descending score; equal scores keep their original
/// order. AP is the mean, over positive items, of the precision at each
/// positive's rank.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "average_precision",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            context: "average_precision scores".into(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision with no positive labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: ties stay in index order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("NaN excluded above"));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Report criteria without positives as `null` and leave them out of
    /// mAP instead of failing.
    pub skip_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub split: Split,
    /// AP for C1..C3; `None` only when undefined criteria were skipped.
    pub ap: [Option<f64>; NUM_CRITERIA],
    pub map: f64,
    pub positives: [usize; NUM_CRITERIA],
    pub negatives: [usize; NUM_CRITERIA],
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
}

/// Scores each criterion column against the split's labels.
pub fn evaluate_records(
    scores: &StrategyScores,
    records: &[&FeatureRecord],
    split: Split,
    options: EvalOptions,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &[f64; NUM_CRITERIA]> =
        scores.records.iter().map(|r| (r.id.as_str(), &r.scores)).collect();
    let mut columns = (0..NUM_CRITERIA).map(|_| Vec::with_capacity(records.len())).collect::<Vec<_>>();
    for r in records {
        let s = by_id.get(r.id.as_str()).ok_or_else(|| Error::Coverage(r.id.clone()))?;
        for (c, col) in columns.iter_mut().enumerate() {
            col.push(s[c]);
        }
    }
    let mut ap = [None; NUM_CRITERIA];
    let mut positives = [0; NUM_CRITERIA];
    let mut negatives = [0; NUM_CRITERIA];
    for c in 0..NUM_CRITERIA {
        let labels: Vec<bool> = records.iter().map(|r| r.labels[c]).collect();
        positives[c] = labels.iter().filter(|&&l| l).count();
        negatives[c] = labels.len() - positives[c];
        ap[c] = match average_precision(&columns[c], &labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) if options.skip_undefined => None,
            Err(Error::UndefinedMetric(_)) => {
                return Err(Error::UndefinedMetric(format!(
                    "criterion C{} has no positive labels in the {split} split",
                    c + 1
                )))
            }
            Err(e) => return Err(e),
        };
    }
    let defined: Vec<f64> = ap.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no criterion has positive labels".into()));
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(EvalReport {
        strategy: scores.strategy,
        split,
        ap,
        map,
        positives,
        negatives,
        seed: None,
        config_digest: None,
    })
}

pub fn evaluate(scores: &StrategyScores, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    evaluate_records(scores, &split_view(dataset, split), split, EvalOptions::default())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    /// Plain-text table with columns mAP, C1, C2, C3 (AP × 100).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>8}", "strategy", "mAP", "C1", "C2", "C3");
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            self.strategy.as_str(),
            pct(Some(self.map)),
            pct(self.ap[0]),
            pct(self.ap[1]),
            pct(self.ap[2])
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn save_report(report: &EvalReport, json_path: &Path, table_path: &Path) -> Result<()> {
    io::write_text(json_path, &report.to_json())?;
    io::write_text(table_path, &report.to_table())
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }

    fn cell(self) -> String {
        match self.std {
            Some(s) => format!("{:.1}±{:.1}", 100.0 * self.mean, 100.0 * s),
            None => format!("{:.1}", 100.0 * self.mean),
        }
    }
}

/// Mean ± std over repeated runs of the same strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub strategy: Strategy,
    pub runs: usize,
    pub map: MeanStd,
    pub ap: [Option<MeanStd>; NUM_CRITERIA],
}

pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("aggregation needs at least one report".into()))?;
    if let Some(other) = reports.iter().find(|r| r.strategy != first.strategy) {
        return Err(Error::Config(format!(
            "cannot aggregate `{}` with `{}` reports",
            first.strategy, other.strategy
        )));
    }
    let maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
    let ap = std::array::from_fn(|c| {
        let v: Vec<f64> = reports.iter().filter_map(|r| r.ap[c]).collect();
        MeanStd::of(&v)
    });
    Ok(AggregateReport {
        strategy: first.strategy,
        runs: reports.len(),
        map: MeanStd::of(&maps).expect("non-empty"),
        ap,
    })
}

impl AggregateReport {
    pub fn to_table(&self) -> String {
        let cell = |m: Option<MeanStd>| m.map_or_else(|| "-".to_string(), MeanStd::cell);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>11} {:>11} {:>11} {:>11}",
            "strategy", "runs", "mAP", "C1", "C2", "C3"
        );
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>11} {:>11} {:>11} {:>11}",
            self.strategy.as_str(),
            self.runs,
            self.map.cell(),
            cell(self.ap[0]),
            cell(self.ap[1]),
            cell(self.ap[2])
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::RecordScores;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_ranking_is_one() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn hand_enumerated_case() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn single_positive_last() {
        for n in 1..20 {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let mut labels = vec![false; n];
            labels[n - 1] = true;
            let ap = average_precision(&scores, &labels).unwrap();
            assert!((ap - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_keep_index_order() {
        // all tied: ranking is index order
        let ap = average_precision(&[0.5, 0.5, 0.5], &[false, true, true]).unwrap();
        assert!((ap - 0.5 * (0.5 + 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn no_positives_is_undefined() {
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn random_scores_near_prevalence() {
        let mut means = Vec::new();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<bool> = (0..1000).map(|_| rng.random_bool(0.5)).collect();
            let scores: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
            means.push(average_precision(&scores, &labels).unwrap());
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    fn record(id: &str, labels: [bool; 3]) -> FeatureRecord {
        FeatureRecord {
            id: id.into(),
            split: Split::Test,
            embedding: vec![1.0],
            labels,
            confidence: None,
        }
    }

    #[test]
    fn identical_columns_give_map_equal_to_ap() {
        let recs = [record("a", [true; 3]), record("b", [false; 3]), record("c", [true; 3])];
        let refs: Vec<&FeatureRecord> = recs.iter().collect();
        let scores = StrategyScores {
            strategy: Strategy::Standard,
            records: [("a", 0.2), ("b", 0.9), ("c", 0.4)]
                .iter()
                .map(|&(id, s)| RecordScores {
                    id: id.into(),
                    scores: [s; 3],
                    subset_probs: None,
                })
                .collect(),
        };
        let report = evaluate_records(&scores, &refs, Split::Test, EvalOptions::default()).unwrap();
        let single = average_precision(&[0.2, 0.9, 0.4], &[true, false, true]).unwrap();
        assert_eq!(report.map, single);
        assert_eq!(report.positives, [2; 3]);
        assert_eq!(report.negatives, [1; 3]);
        assert!(report.to_table().contains("mAP"));
    }

    #[test]
    fn missing_score_is_coverage_error() {
        let recs = [record("a", [true; 3]), record("missing", [false; 3])];
        let refs: Vec<&FeatureRecord> = recs.iter().collect();
        let scores = StrategyScores {
            strategy: Strategy::PosNeg,
            records: vec![RecordScores {
                id: "a".into(),
                scores: [0.5; 3],
                subset_probs: None,
            }],
        };
        match evaluate_records(&scores, &refs, Split::Test, EvalOptions::default()) {
            Err(Error::Coverage(id)) => assert_eq!(id, "missing"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn skipping_undefined_criteria() {
        let recs = [record("a", [true, false, true]), record("b", [false, false, true])];
        let refs: Vec<&FeatureRecord> = recs.iter().collect();
        let scores = StrategyScores {
            strategy: Strategy::Standard,
            records: vec![
                RecordScores { id: "a".into(), scores: [0.9, 0.1, 0.2], subset_probs: None },
                RecordScores { id: "b".into(), scores: [0.1, 0.1, 0.8], subset_probs: None },
            ],
        };
        assert!(evaluate_records(&scores, &refs, Split::Test, EvalOptions::default()).is_err());
        let r = evaluate_records(&scores, &refs, Split::Test, EvalOptions { skip_undefined: true }).unwrap();
        assert_eq!(r.ap[1], None);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let base = EvalReport {
            strategy: Strategy::Standard,
            split: Split::Test,
            ap: [Some(0.5); 3],
            map: 0.5,
            positives: [1; 3],
            negatives: [1; 3],
            seed: None,
            config_digest: None,
        };
        let runs: Vec<EvalReport> = [0.4, 0.5, 0.6]
            .iter()
            .map(|&m| EvalReport { map: m, ..base.clone() })
            .collect();
        let agg = aggregate(&runs).unwrap();
        assert!((agg.map.mean - 0.5).abs() < 1e-15);
        assert!((agg.map.std.unwrap() - 0.1).abs() < 1e-12);
        assert!(agg.to_table().contains("50.0±10.0"));
        let single = aggregate(&runs[..1]).unwrap();
        assert_eq!(single.map.std, None);
    }
}
