//! Per-class ROC-AUC (Mann-Whitney with midrank tie handling) and
//! aggregation across seeded runs.

use std::io::Write;

use crate::error::{Error, Result};

/// AUC for one class; undefined when the labels are single-class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Auc {
    Defined(f64),
    /// No positives or no negatives; excluded from mean AUC.
    Undefined,
}

impl Auc {
    pub fn value(&self) -> Option<f64> {
        match self {
            Auc::Defined(v) => Some(*v),
            Auc::Undefined => None,
        }
    }
}

/// ROC-AUC as the Mann-Whitney statistic:
/// (#concordant pairs + 0.5 * #tied pairs) / (n_pos * n_neg),
/// computed in O(N log N) via midranks.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<Auc> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "roc_auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Input("roc_auc: labels must be 0 or 1".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(Auc::Undefined);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks: tied scores share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(Auc::Defined(u / (np * n_neg as f64)))
}

/// Per-class evaluation counts and AUC.
#[derive(Debug, Clone)]
pub struct ClassAuc {
    pub name: String,
    pub auc: Auc,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Evaluation of one model on one split for one seed.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub seed: u64,
    pub per_class: Vec<ClassAuc>,
    /// Mean over classes with defined AUC.
    pub mean_auc: Option<f64>,
    /// Number of classes excluded from the mean.
    pub undefined_classes: usize,
}

impl EvalReport {
    /// Assemble from per-class scores; `scores[k]` ranks split items for
    /// class k against `labels[k]`.
    pub fn from_scores(
        seed: u64,
        class_names: &[String],
        scores: &[Vec<f64>],
        labels: &[Vec<f64>],
    ) -> Result<Self> {
        if scores.len() != class_names.len() || labels.len() != class_names.len() {
            return Err(Error::Dimension(
                "eval: class count mismatch between names, scores and labels".into(),
            ));
        }
        let mut per_class = Vec::with_capacity(class_names.len());
        for ((name, s), y) in class_names.iter().zip(scores).zip(labels) {
            let auc = roc_auc(s, y)?;
            let n_pos = y.iter().filter(|&&v| v == 1.0).count();
            per_class.push(ClassAuc {
                name: name.clone(),
                auc,
                n_pos,
                n_neg: y.len() - n_pos,
            });
        }
        Ok(Self::from_class_aucs(seed, per_class))
    }

    pub fn from_class_aucs(seed: u64, per_class: Vec<ClassAuc>) -> Self {
        let defined: Vec<f64> = per_class.iter().filter_map(|c| c.auc.value()).collect();
        let undefined_classes = per_class.len() - defined.len();
        let mean_auc = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        EvalReport {
            seed,
            per_class,
            mean_auc,
            undefined_classes,
        }
    }

    /// CSV rows: class_name, auc, n_pos, n_neg. Undefined AUCs print "NA".
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "class_name,auc,n_pos,n_neg")?;
        for c in &self.per_class {
            let auc = match c.auc {
                Auc::Defined(v) => format!("{:.6}", v),
                Auc::Undefined => "NA".to_string(),
            };
            writeln!(w, "{},{},{},{}", c.name, auc, c.n_pos, c.n_neg)?;
        }
        if let Some(mean) = self.mean_auc {
            writeln!(w, "MEAN,{:.6},,", mean)?;
        }
        Ok(())
    }
}

/// Cross-run statistics for one class (or for the mean-AUC row).
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub name: String,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Half of (max - min): the "+/-" the summary tables print.
    pub half_spread: Option<f64>,
    /// Sample standard deviation, emitted for reference.
    pub std: Option<f64>,
    pub runs: usize,
}

fn aggregate_values(name: &str, values: &[f64], runs: usize) -> AggregateRow {
    if values.is_empty() {
        return AggregateRow {
            name: name.to_string(),
            mean: None,
            min: None,
            max: None,
            half_spread: None,
            std: None,
            runs,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    AggregateRow {
        name: name.to_string(),
        mean: Some(mean),
        min: Some(min),
        max: Some(max),
        half_spread: Some((max - min) / 2.0),
        std: Some(std),
        runs,
    }
}

/// Combine per-seed reports into per-class mean / min / max / half-spread,
/// plus one row for the mean AUC. All reports must share the class list.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<Vec<AggregateRow>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Usage("aggregate_runs: need at least one report".into()))?;
    let k = first.per_class.len();
    for r in reports {
        if r.per_class.len() != k {
            return Err(Error::Usage(format!(
                "aggregate_runs: class count mismatch ({} vs {})",
                r.per_class.len(),
                k
            )));
        }
        for (a, b) in r.per_class.iter().zip(&first.per_class) {
            if a.name != b.name {
                return Err(Error::Usage(format!(
                    "aggregate_runs: class name mismatch ({} vs {})",
                    a.name, b.name
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(k + 1);
    for c in 0..k {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.per_class[c].auc.value())
            .collect();
        rows.push(aggregate_values(
            &first.per_class[c].name,
            &values,
            reports.len(),
        ));
    }
    let means: Vec<f64> = reports.iter().filter_map(|r| r.mean_auc).collect();
    rows.push(aggregate_values("MEAN", &means, reports.len()));
    Ok(rows)
}

/// CSV mirroring the per-class summary layout: one row per class plus MEAN.
pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], w: &mut W) -> Result<()> {
    writeln!(w, "class_name,mean_auc,half_spread,min,max,std,runs")?;
    for r in rows {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{:.6}", v),
            None => "NA".to_string(),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.name,
            fmt(r.mean),
            fmt(r.half_spread),
            fmt(r.min),
            fmt(r.max),
            fmt(r.std),
            r.runs
        )?;
    }
    Ok(())
}

/// ROC curve points (fpr, tpr) at every distinct threshold; for plotting.
pub fn roc_points(scores: &[f64], labels: &[f64]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("roc_points: length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Usage("roc_points: need both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j + 1;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// O(N^2) all-pairs oracle: concordant + half ties over pos*neg pairs.
    fn pairwise_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 1.0)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 0.0)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut credit = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    credit += 1.0;
                } else if p == n {
                    credit += 0.5;
                }
            }
        }
        Some(credit / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfect_ranking_is_one() {
        let auc = roc_auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap();
        assert_eq!(auc, Auc::Defined(1.0));
    }

    #[test]
    fn all_ties_is_half() {
        let auc = roc_auc(&[0.4; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(auc, Auc::Defined(0.5));
    }

    #[test]
    fn single_class_is_undefined() {
        assert_eq!(roc_auc(&[0.1, 0.2], &[1.0, 1.0]).unwrap(), Auc::Undefined);
        assert_eq!(roc_auc(&[0.1, 0.2], &[0.0, 0.0]).unwrap(), Auc::Undefined);
    }

    #[test]
    fn matches_pairwise_oracle_with_ties() {
        let mut rng = crate::rng::stream_rng(31, crate::rng::Stream::Aux);
        for case in 0..50 {
            let n = 200;
            // quantized scores to force heavy ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0.0f64..1.0) * 10.0).round() / 10.0)
                .collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.3))).collect();
            let fast = roc_auc(&scores, &labels).unwrap();
            match (fast, pairwise_auc(&scores, &labels)) {
                (Auc::Defined(a), Some(b)) => {
                    assert!((a - b).abs() <= 1e-12, "case {}: {} vs {}", case, a, b)
                }
                (Auc::Undefined, None) => {}
                other => panic!("case {}: mismatch {:?}", case, other),
            }
        }
    }

    #[test]
    fn aggregate_two_reports() {
        let mk = |auc: f64, seed| {
            EvalReport::from_class_aucs(
                seed,
                vec![ClassAuc {
                    name: "c0".into(),
                    auc: Auc::Defined(auc),
                    n_pos: 5,
                    n_neg: 5,
                }],
            )
        };
        let rows = aggregate_runs(&[mk(0.86, 0), mk(0.88, 1)]).unwrap();
        assert_abs_diff_eq!(rows[0].mean.unwrap(), 0.87, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].half_spread.unwrap(), 0.01, epsilon = 1e-12);
        // single report -> zero spread
        let rows = aggregate_runs(&[mk(0.8, 0)]).unwrap();
        assert_eq!(rows[0].half_spread.unwrap(), 0.0);
    }

    #[test]
    fn aggregate_three_reports_hand_check() {
        let mk = |auc: f64, seed| {
            EvalReport::from_class_aucs(
                seed,
                vec![ClassAuc {
                    name: "c0".into(),
                    auc: Auc::Defined(auc),
                    n_pos: 5,
                    n_neg: 5,
                }],
            )
        };
        let rows = aggregate_runs(&[mk(0.84, 0), mk(0.90, 1), mk(0.87, 2)]).unwrap();
        assert_abs_diff_eq!(rows[0].mean.unwrap(), 0.87, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].half_spread.unwrap(), 0.03, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].min.unwrap(), 0.84, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].max.unwrap(), 0.90, epsilon = 1e-12);
        // hand: sample std of {0.84, 0.90, 0.87} = 0.03
        assert_abs_diff_eq!(rows[0].std.unwrap(), 0.03, epsilon = 1e-12);
    }

    #[test]
    fn aggregate_rejects_mismatched_classes() {
        let a = EvalReport::from_class_aucs(
            0,
            vec![ClassAuc {
                name: "c0".into(),
                auc: Auc::Defined(0.8),
                n_pos: 1,
                n_neg: 1,
            }],
        );
        let b = EvalReport::from_class_aucs(1, vec![]);
        assert!(matches!(aggregate_runs(&[a, b]), Err(Error::Usage(_))));
    }

    #[test]
    fn complement_scores_flip_auc_without_ties() {
        let mut rng = crate::rng::stream_rng(32, crate::rng::Stream::Aux);
        let n = 101;
        // distinct scores
        let scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen_range(0.0..0.5)).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        if let (Auc::Defined(a), Auc::Defined(b)) = (
            roc_auc(&scores, &labels).unwrap(),
            roc_auc(&flipped, &labels).unwrap(),
        ) {
            assert_abs_diff_eq!(a + b, 1.0, epsilon = 1e-12);
        } else {
            panic!("expected defined AUCs");
        }
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(seed in 0u64..500) {
            let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Aux);
            let n = 60;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let base = roc_auc(&scores, &labels).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 2.5 * s + 7.0).collect();
            prop_assert_eq!(roc_auc(&exp, &labels).unwrap(), base);
            prop_assert_eq!(roc_auc(&affine, &labels).unwrap(), base);
        }

        #[test]
        fn permutation_invariance(seed in 0u64..500) {
            let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Aux);
            let n = 40;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let base = roc_auc(&scores, &labels).unwrap();
            // deterministic shuffle of the pair list
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y2: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(roc_auc(&s2, &y2).unwrap(), base);
        }
    }
}
