//! Task scorers (accuracy, word error rate, slot-type F1) and
//! continual-learning aggregates (forgetting, average forgetting, mean rank)
//! over the lower-triangular evaluation matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::MetricId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot score an empty evaluation")]
    EmptyEval,
    #[error("{predictions} predictions against {references} references")]
    LengthMismatch { predictions: usize, references: usize },
    #[error("word error rate is undefined against an empty reference")]
    EmptyReference,
    #[error("forgetting f_j^k needs j < k, got j={j}, k={k}")]
    UndefinedForgetting { j: usize, k: usize },
    #[error("average forgetting at step {0} is undefined (no past tasks)")]
    UndefinedAverageForgetting(usize),
    #[error("cell ({k},{j}) lies above the diagonal (task {j} unseen at step {k})")]
    CellOutOfTriangle { k: usize, j: usize },
    #[error("cell ({k},{j}) was already written")]
    CellAlreadyWritten { k: usize, j: usize },
    #[error("cell ({k},{j}) has not been evaluated")]
    CellUndefined { k: usize, j: usize },
    #[error("step {k} outside the {steps}-step matrix")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("score {score} outside the range of {metric:?}")]
    ScoreOutOfRange { score: f64, metric: MetricId },
    #[error("method '{method}' has no score for task '{task}'")]
    IncompleteTable { method: String, task: String },
    #[error("rank table needs at least one method and one task")]
    EmptyTable,
    #[error("malformed evaluation CSV: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Classification accuracy in percent. A `None` prediction is a parse
/// failure and counts as a mismatch.
pub fn accuracy(
    predictions: &[Option<Vec<String>>],
    references: &[Vec<String>],
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(MetricsError::EmptyEval);
    }
    if predictions.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    let matches = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p.as_ref() == Some(r))
        .count();
    Ok(100.0 * matches as f64 / references.len() as f64)
}

/// Token-level Levenshtein distance with unit substitution, insertion, and
/// deletion costs (two-row dynamic program).
pub fn edit_distance(hypothesis: &[String], reference: &[String]) -> usize {
    let cols = reference.len() + 1;
    let mut prev: Vec<usize> = (0..cols).collect();
    let mut next = vec![0usize; cols];
    for (i, h) in hypothesis.iter().enumerate() {
        next[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            next[j + 1] = sub.min(prev[j + 1] + 1).min(next[j] + 1);
        }
        std::mem::swap(&mut prev, &mut next);
    }
    prev[cols - 1]
}

/// Word error rate of one utterance as a fraction of the reference length.
pub fn wer(hypothesis: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Corpus word error rate: summed edit distance over summed reference
/// length, as a fraction. Multiply by 100 for the percent scale used in the
/// evaluation matrix.
pub fn corpus_wer(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyEval);
    }
    let mut distance = 0usize;
    let mut length = 0usize;
    for (hypothesis, reference) in pairs {
        if reference.is_empty() {
            return Err(MetricsError::EmptyReference);
        }
        distance += edit_distance(hypothesis, reference);
        length += reference.len();
    }
    Ok(distance as f64 / length as f64)
}

/// The multiset of slot types whose `B-x … E-x` spans are complete, sorted.
/// The boolean is false when the transcript has unbalanced markers
/// (dangling `B-x`, stray `E-x`, or a mismatched close); complete spans are
/// still returned so a malformed hypothesis keeps its valid predictions.
pub fn slot_types(transcript: &[String]) -> (Vec<String>, bool) {
    let mut types = Vec::new();
    let mut open: Option<&str> = None;
    let mut balanced = true;
    for token in transcript {
        if let Some(ty) = token.strip_prefix("B-") {
            if open.is_some() {
                balanced = false; // previous span never closed
            }
            open = Some(ty);
        } else if let Some(ty) = token.strip_prefix("E-") {
            match open.take() {
                Some(o) if o == ty => types.push(ty.to_string()),
                _ => balanced = false, // stray or mismatched close
            }
        }
    }
    if open.is_some() {
        balanced = false;
    }
    types.sort();
    (types, balanced)
}

fn multiset_counts(types: &[String]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for t in types {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Micro counts (true positives, false positives, false negatives) of slot
/// TYPES between one hypothesis and one reference transcript; values are
/// ignored, duplicated types count per occurrence.
pub fn slot_type_counts(
    hypothesis: &[String],
    reference: &[String],
) -> (usize, usize, usize) {
    let (hyp_types, _) = slot_types(hypothesis);
    let (ref_types, _) = slot_types(reference);
    let hyp = multiset_counts(&hyp_types);
    let mut refc = multiset_counts(&ref_types);
    let mut tp = 0;
    let mut fp = 0;
    for (ty, &n) in &hyp {
        let matched = refc.get_mut(ty).map_or(0, |r| {
            let m = n.min(*r);
            *r -= m;
            m
        });
        tp += matched;
        fp += n - matched;
    }
    let fn_ = refc.values().sum::<usize>();
    (tp, fp, fn_)
}

fn f1_percent(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        // Equal (empty) type multisets: nothing missed, nothing invented.
        return 100.0;
    }
    100.0 * 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Slot-type F1 of one sample in percent; 0 when precision and recall are
/// both 0, 100 iff the type multisets are equal.
pub fn slot_type_f1(hypothesis: &[String], reference: &[String]) -> f64 {
    let (tp, fp, fn_) = slot_type_counts(hypothesis, reference);
    f1_percent(tp, fp, fn_)
}

/// Corpus slot-type F1 in percent: micro-aggregated TP/FP/FN over samples.
pub fn corpus_slot_type_f1(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyEval);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (hypothesis, reference) in pairs {
        let (t, f, n) = slot_type_counts(hypothesis, reference);
        tp += t;
        fp += f;
        fn_ += n;
    }
    Ok(f1_percent(tp, fp, fn_))
}

/// One column of the evaluation matrix: a task and its metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub task_id: String,
    pub metric: MetricId,
}

/// Evaluation matrix: `a[k][j]` is task j's test score after training
/// step k. Sequential runs ([`EvalMatrix::new`]) are lower-triangular
/// (task j is only seen from step j on); joint runs ([`EvalMatrix::joint`])
/// have a single full-width row. Cells are write-once. Accuracy and
/// slot-type F1 are stored in [0, 100]; word error rate is stored in
/// percent (≥ 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    columns: Vec<ColumnSpec>,
    cells: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    /// Sequential shape: one row per task boundary, row k holding k+1 cells.
    pub fn new(columns: Vec<ColumnSpec>) -> Self {
        let cells = (0..columns.len()).map(|k| vec![None; k + 1]).collect();
        EvalMatrix { columns, cells }
    }

    /// Joint shape: a single row covering every task (multi-task training
    /// sees all tasks in its one step).
    pub fn joint(columns: Vec<ColumnSpec>) -> Self {
        let cells = vec![vec![None; columns.len()]];
        EvalMatrix { columns, cells }
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    /// Number of recorded training steps (matrix rows).
    pub fn steps(&self) -> usize {
        self.cells.len()
    }

    fn check_triangle(&self, k: usize, j: usize) -> Result<()> {
        if k >= self.cells.len() {
            return Err(MetricsError::StepOutOfRange { k, steps: self.cells.len() });
        }
        if j >= self.cells[k].len() {
            return Err(MetricsError::CellOutOfTriangle { k, j });
        }
        Ok(())
    }

    /// Write-once recording of `a[k][j]`.
    pub fn record(&mut self, k: usize, j: usize, score: f64) -> Result<()> {
        self.check_triangle(k, j)?;
        let metric = self.columns[j].metric;
        let in_range = match metric {
            MetricId::Accuracy | MetricId::SlotTypeF1 => (0.0..=100.0).contains(&score),
            MetricId::Wer => score >= 0.0 && score.is_finite(),
        };
        if !in_range {
            return Err(MetricsError::ScoreOutOfRange { score, metric });
        }
        let cell = &mut self.cells[k][j];
        if cell.is_some() {
            return Err(MetricsError::CellAlreadyWritten { k, j });
        }
        *cell = Some(score);
        Ok(())
    }

    pub fn get(&self, k: usize, j: usize) -> Result<f64> {
        self.check_triangle(k, j)?;
        self.cells[k][j].ok_or(MetricsError::CellUndefined { k, j })
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|row| row.iter().all(Option::is_some))
    }

    /// Score oriented so that larger is always better (lower-better metrics
    /// are sign-flipped).
    fn oriented(&self, k: usize, j: usize) -> Result<f64> {
        let score = self.get(k, j)?;
        Ok(if self.columns[j].metric.higher_is_better() { score } else { -score })
    }

    /// Forgetting of task `j` at step `k`: the best past oriented score
    /// minus the current one. Negative values mean the task improved after
    /// its own stage (positive transfer); values are not clipped.
    pub fn forgetting(&self, j: usize, k: usize) -> Result<f64> {
        if j >= k {
            return Err(MetricsError::UndefinedForgetting { j, k });
        }
        self.check_triangle(k, j)?;
        let mut best_past = f64::NEG_INFINITY;
        for l in j..k {
            best_past = best_past.max(self.oriented(l, j)?);
        }
        Ok(best_past - self.oriented(k, j)?)
    }

    /// Average forgetting at step `k`: mean of `forgetting(j, k)` over all
    /// previously trained tasks `j < k`.
    pub fn average_forgetting(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(MetricsError::UndefinedAverageForgetting(k));
        }
        let mut sum = 0.0;
        for j in 0..k {
            sum += self.forgetting(j, k)?;
        }
        Ok(sum / k as f64)
    }

    /// Final-row scores keyed by task id (requires the last row complete).
    pub fn final_scores(&self) -> Result<BTreeMap<String, f64>> {
        let k = self.steps().checked_sub(1).ok_or(MetricsError::EmptyTable)?;
        (0..self.columns.len())
            .map(|j| Ok((self.columns[j].task_id.clone(), self.get(k, j)?)))
            .collect()
    }

    /// CSV with a `step` column and one column per task id. Undefined upper
    /// cells are empty; floats use the shortest round-trip form, so equal
    /// matrices serialize to byte-identical text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for column in &self.columns {
            out.push(',');
            out.push_str(&column.task_id);
        }
        out.push('\n');
        for (k, row) in self.cells.iter().enumerate() {
            out.push_str(&k.to_string());
            for j in 0..self.columns.len() {
                out.push(',');
                if let Some(score) = row.get(j).copied().flatten() {
                    out.push_str(&score.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parse a CSV produced by [`Self::to_csv`]; `metric_of` supplies each
    /// task's metric (the CSV stores ids only).
    pub fn from_csv(
        text: &str,
        metric_of: impl Fn(&str) -> Option<MetricId>,
    ) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| MetricsError::Csv("empty".into()))?;
        let mut fields = header.split(',');
        if fields.next() != Some("step") {
            return Err(MetricsError::Csv("header must start with 'step'".into()));
        }
        let columns = fields
            .map(|id| {
                let metric = metric_of(id).ok_or_else(|| {
                    MetricsError::Csv(format!("unknown task id '{id}'"))
                })?;
                Ok(ColumnSpec { task_id: id.to_string(), metric })
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<&str> = lines.collect();
        let mut matrix = if rows.len() == columns.len() {
            EvalMatrix::new(columns)
        } else if rows.len() == 1 {
            EvalMatrix::joint(columns)
        } else {
            return Err(MetricsError::Csv(format!(
                "{} rows fit neither the sequential nor the joint shape for {} tasks",
                rows.len(),
                columns.len()
            )));
        };
        for (k, line) in rows.into_iter().enumerate() {
            let mut fields = line.split(',');
            let step = fields.next().unwrap_or_default();
            if step.parse::<usize>() != Ok(k) {
                return Err(MetricsError::Csv(format!(
                    "row {k} starts with '{step}'"
                )));
            }
            for (j, field) in fields.enumerate() {
                if field.is_empty() {
                    continue;
                }
                let score: f64 = field
                    .parse()
                    .map_err(|_| MetricsError::Csv(format!("bad score '{field}'")))?;
                matrix.record(k, j, score)?;
            }
        }
        Ok(matrix)
    }
}

/// Final scores of one method across all tasks, for rank aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub by_task: BTreeMap<String, f64>,
}

/// Mean rank per method: per task, methods are ranked best-first respecting
/// the metric orientation, with ties assigned the MAXIMUM rank of the tied
/// group; the mean over tasks is returned in the input method order.
pub fn mean_rank(
    rows: &[MethodScores],
    tasks: &[ColumnSpec],
) -> Result<Vec<(String, f64)>> {
    if rows.is_empty() || tasks.is_empty() {
        return Err(MetricsError::EmptyTable);
    }
    let mut oriented = vec![vec![0.0; tasks.len()]; rows.len()];
    for (m, row) in rows.iter().enumerate() {
        for (t, task) in tasks.iter().enumerate() {
            let score = *row.by_task.get(&task.task_id).ok_or_else(|| {
                MetricsError::IncompleteTable {
                    method: row.method.clone(),
                    task: task.task_id.clone(),
                }
            })?;
            oriented[m][t] = if task.metric.higher_is_better() { score } else { -score };
        }
    }
    Ok(rows
        .iter()
        .enumerate()
        .map(|(m, row)| {
            let mut rank_sum = 0usize;
            for t in 0..tasks.len() {
                let mine = oriented[m][t];
                let better = oriented.iter().filter(|o| o[t] > mine).count();
                let tied = oriented.iter().filter(|o| o[t] == mine).count();
                rank_sum += better + tied; // maximum rank within the tied group
            }
            (row.method.clone(), rank_sum as f64 / tasks.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn accuracy_counts_matches_and_parse_failures() {
        let refs = vec![toks(&["a"]), toks(&["b"]), toks(&["c"]), toks(&["d"])];
        let all: Vec<_> = refs.iter().cloned().map(Some).collect();
        assert_eq!(accuracy(&all, &refs).unwrap(), 100.0);

        let one = vec![Some(toks(&["a"])), Some(toks(&["x"])), None, Some(toks(&["q"]))];
        assert_eq!(accuracy(&one, &refs).unwrap(), 25.0);

        let mixed = vec![Some(toks(&["a"])), Some(toks(&["b"])), Some(toks(&["c"])), None];
        assert_eq!(accuracy(&mixed, &refs).unwrap(), 75.0);

        assert!(matches!(accuracy(&[], &[]), Err(MetricsError::EmptyEval)));
        assert!(matches!(
            accuracy(&mixed[..2], &refs),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn wer_matches_hand_cases() {
        let r = toks(&["a", "b", "c"]);
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert_eq!(wer(&toks(&["a", "x", "c"]), &r).unwrap(), 1.0 / 3.0);
        // delete b, insert e
        assert_eq!(
            wer(&toks(&["a", "c", "d", "e"]), &toks(&["a", "b", "c", "d"])).unwrap(),
            2.0 / 4.0
        );
        assert_eq!(wer(&toks(&[]), &r).unwrap(), 1.0); // three deletions
        assert!(matches!(wer(&r, &[]), Err(MetricsError::EmptyReference)));
    }

    #[test]
    fn corpus_wer_pools_distance_over_reference_length() {
        let pairs = vec![
            (toks(&["a", "x", "c"]), toks(&["a", "b", "c"])), // distance 1 / 3
            (toks(&["q"]), toks(&["q", "r", "s", "t", "u"])), // distance 4 / 5
        ];
        assert_eq!(corpus_wer(&pairs).unwrap(), 5.0 / 8.0);
        assert!(matches!(corpus_wer(&[]), Err(MetricsError::EmptyEval)));
    }

    /// Independent full-matrix dynamic program used as the oracle.
    fn dp_oracle(hyp: &[String], reference: &[String]) -> usize {
        let (n, m) = (hyp.len(), reference.len());
        let mut d = vec![vec![0usize; m + 1]; n + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=m {
            d[0][j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[n][m]
    }

    #[test]
    fn edit_distance_agrees_with_full_matrix_oracle_on_random_pairs() {
        let mut rng = rng_for(0xd157, &[1]);
        let alphabet = ["a", "b", "c", "d", "e"];
        for _ in 0..100 {
            let draw = |rng: &mut _, len: usize| -> Vec<String> {
                (0..len)
                    .map(|_| alphabet[rand::Rng::gen_range(rng, 0..alphabet.len())].to_string())
                    .collect()
            };
            let hyp = {
                let len = rng.gen_range(0..=10);
                draw(&mut rng, len)
            };
            let reference = {
                let len = rng.gen_range(0..=10);
                draw(&mut rng, len)
            };
            assert_eq!(
                edit_distance(&hyp, &reference),
                dp_oracle(&hyp, &reference),
                "hyp {hyp:?} vs ref {reference:?}"
            );
            // Cost-structure symmetry.
            assert_eq!(
                edit_distance(&hyp, &reference),
                edit_distance(&reference, &hyp)
            );
        }
    }

    #[test]
    fn slot_type_extraction_keeps_complete_spans_only() {
        let t = toks(&["please", "B-city", "paris", "E-city", "now", "B-time",
            "dawn", "E-time"]);
        assert_eq!(slot_types(&t), (vec!["city".to_string(), "time".to_string()], true));

        let dangling = toks(&["B-city", "paris", "E-city", "B-time", "dawn"]);
        assert_eq!(slot_types(&dangling), (vec!["city".to_string()], false));

        let stray = toks(&["paris", "E-city"]);
        assert_eq!(slot_types(&stray), (vec![], false));

        let mismatched = toks(&["B-city", "paris", "E-time"]);
        assert_eq!(slot_types(&mismatched), (vec![], false));
    }

    #[test]
    fn slot_type_f1_matches_hand_cases() {
        let city = toks(&["B-city", "paris", "E-city"]);
        let city_time = toks(&["B-city", "oslo", "E-city", "B-time", "dusk", "E-time"]);
        // Identical multisets (values differ, types match) → 100.
        let city_other = toks(&["B-city", "tokyo", "E-city"]);
        assert_eq!(slot_type_f1(&city_other, &city), 100.0);
        // Predicted {city,time} vs reference {city}: P=1/2, R=1 → 66.67.
        let f1 = slot_type_f1(&city_time, &city);
        assert!((f1 - 200.0 / 3.0).abs() < 1e-12);
        // Nothing predicted vs non-empty reference → 0.
        assert_eq!(slot_type_f1(&toks(&["please"]), &city), 0.0);
        // Duplicates count per occurrence.
        let two_cities = toks(&["B-city", "lima", "E-city", "B-city", "cairo", "E-city"]);
        let f1 = slot_type_f1(&two_cities, &city);
        assert!((f1 - 200.0 / 3.0).abs() < 1e-12);
        // Incomplete spans in a malformed hypothesis do not predict.
        let malformed = toks(&["B-city", "lima", "E-city", "B-time", "dawn"]);
        assert_eq!(slot_type_f1(&malformed, &city), 100.0);
        // Empty on both sides is a perfect (vacuous) match.
        assert_eq!(slot_type_f1(&toks(&["hi"]), &toks(&["yo"])), 100.0);
    }

    #[test]
    fn corpus_f1_micro_aggregates_counts() {
        let city = toks(&["B-city", "paris", "E-city"]);
        let time = toks(&["B-time", "dawn", "E-time"]);
        let pairs = vec![
            (city.clone(), city.clone()), // TP 1
            (time.clone(), city.clone()), // FP 1, FN 1
        ];
        // micro: 2·1 / (2·1 + 1 + 1) = 0.5
        assert_eq!(corpus_slot_type_f1(&pairs).unwrap(), 50.0);
    }

    fn acc_columns(n: usize) -> Vec<ColumnSpec> {
        (0..n)
            .map(|i| ColumnSpec { task_id: format!("T{i}"), metric: MetricId::Accuracy })
            .collect()
    }

    #[test]
    fn eval_matrix_is_write_once_lower_triangular() {
        let mut m = EvalMatrix::new(acc_columns(3));
        assert!(matches!(
            m.record(0, 1, 50.0),
            Err(MetricsError::CellOutOfTriangle { k: 0, j: 1 })
        ));
        m.record(0, 0, 80.0).unwrap();
        assert!(matches!(
            m.record(0, 0, 90.0),
            Err(MetricsError::CellAlreadyWritten { .. })
        ));
        assert_eq!(m.get(0, 0).unwrap(), 80.0);
        assert!(matches!(m.get(1, 0), Err(MetricsError::CellUndefined { .. })));
        assert!(matches!(
            m.record(1, 0, 123.0),
            Err(MetricsError::ScoreOutOfRange { .. })
        ));
        // Fill the triangle: N(N+1)/2 cells for N=3.
        let mut written = 1;
        for k in 0..3 {
            for j in 0..=k {
                if (k, j) != (0, 0) {
                    m.record(k, j, 10.0 * (k + j) as f64).unwrap();
                    written += 1;
                }
            }
        }
        assert_eq!(written, 6);
        assert!(m.is_complete());
    }

    #[test]
    fn forgetting_matches_the_definition_including_negative_values() {
        // Column 0 scores over steps: 90, 70, 95 (accuracy, higher better).
        let mut m = EvalMatrix::new(acc_columns(3));
        m.record(0, 0, 90.0).unwrap();
        m.record(1, 0, 70.0).unwrap();
        m.record(2, 0, 95.0).unwrap();
        assert!((m.forgetting(0, 1).unwrap() - 20.0).abs() < 1e-12);
        // max(90, 70) − 95 = −5: improvement after the task's own stage.
        assert!((m.forgetting(0, 2).unwrap() + 5.0).abs() < 1e-12);
        assert!(matches!(
            m.forgetting(1, 1),
            Err(MetricsError::UndefinedForgetting { .. })
        ));
        // Constant column forgets nothing.
        let mut c = EvalMatrix::new(acc_columns(2));
        c.record(0, 0, 55.5).unwrap();
        c.record(1, 0, 55.5).unwrap();
        assert_eq!(c.forgetting(0, 1).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_is_translation_invariant_and_sign_flips_for_wer() {
        let mut m = EvalMatrix::new(acc_columns(3));
        let mut shifted = EvalMatrix::new(acc_columns(3));
        let scores = [38.0, 31.0, 44.0];
        for (k, s) in scores.iter().enumerate() {
            m.record(k, 0, *s).unwrap();
            shifted.record(k, 0, *s + 13.25).unwrap();
            for j in 1..=k {
                m.record(k, j, 50.0).unwrap();
                shifted.record(k, j, 50.0).unwrap();
            }
        }
        assert_eq!(m.forgetting(0, 2).unwrap(), shifted.forgetting(0, 2).unwrap());

        // WER column: rising error is forgetting with a positive sign.
        let mut w = EvalMatrix::new(vec![
            ColumnSpec { task_id: "ASR".into(), metric: MetricId::Wer },
            ColumnSpec { task_id: "T1".into(), metric: MetricId::Accuracy },
        ]);
        w.record(0, 0, 7.0).unwrap();
        w.record(1, 0, 9.5).unwrap();
        w.record(1, 1, 50.0).unwrap();
        assert!((w.forgetting(0, 1).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn average_forgetting_means_per_task_values() {
        // Two columns with f values −5 and 20 at the final step.
        let mut m = EvalMatrix::new(acc_columns(3));
        m.record(0, 0, 90.0).unwrap();
        m.record(1, 0, 70.0).unwrap();
        m.record(1, 1, 80.0).unwrap();
        m.record(2, 0, 95.0).unwrap(); // f_0^2 = −5
        m.record(2, 1, 60.0).unwrap(); // f_1^2 = 20
        m.record(2, 2, 42.0).unwrap();
        assert!((m.average_forgetting(2).unwrap() - 7.5).abs() < 1e-12);
        assert!((m.average_forgetting(1).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(
            m.average_forgetting(0),
            Err(MetricsError::UndefinedAverageForgetting(0))
        ));
    }

    #[test]
    fn non_decreasing_columns_never_have_positive_average_forgetting() {
        let mut m = EvalMatrix::new(acc_columns(3));
        for k in 0..3 {
            for j in 0..=k {
                m.record(k, j, 40.0 + 10.0 * (k - j) as f64).unwrap();
            }
        }
        for k in 1..3 {
            assert!(m.average_forgetting(k).unwrap() <= 0.0);
        }
    }

    #[test]
    fn eval_matrix_csv_round_trips_bitwise() {
        let mut m = EvalMatrix::new(vec![
            ColumnSpec { task_id: "KS".into(), metric: MetricId::Accuracy },
            ColumnSpec { task_id: "SF".into(), metric: MetricId::SlotTypeF1 },
            ColumnSpec { task_id: "ASR".into(), metric: MetricId::Wer },
        ]);
        m.record(0, 0, 100.0 / 3.0).unwrap();
        m.record(1, 0, 90.25).unwrap();
        m.record(1, 1, 200.0 / 7.0).unwrap();
        m.record(2, 0, 88.0).unwrap();
        m.record(2, 1, 12.125).unwrap();
        m.record(2, 2, 5.78).unwrap();
        let csv = m.to_csv();
        let metric_of = |id: &str| match id {
            "KS" => Some(MetricId::Accuracy),
            "SF" => Some(MetricId::SlotTypeF1),
            "ASR" => Some(MetricId::Wer),
            _ => None,
        };
        let back = EvalMatrix::from_csv(&csv, metric_of).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_csv(), csv);
        assert!(csv.starts_with("step,KS,SF,ASR\n0,"));
    }

    #[test]
    fn joint_matrix_has_one_full_width_row_and_round_trips() {
        let mut m = EvalMatrix::joint(vec![
            ColumnSpec { task_id: "KS".into(), metric: MetricId::Accuracy },
            ColumnSpec { task_id: "ASR".into(), metric: MetricId::Wer },
        ]);
        assert_eq!(m.steps(), 1);
        m.record(0, 0, 91.5).unwrap();
        m.record(0, 1, 7.25).unwrap();
        assert!(matches!(
            m.record(1, 0, 50.0),
            Err(MetricsError::StepOutOfRange { k: 1, steps: 1 })
        ));
        assert!(m.is_complete());
        assert_eq!(m.final_scores().unwrap().len(), 2);
        let csv = m.to_csv();
        assert_eq!(csv, "step,KS,ASR\n0,91.5,7.25\n");
        let metric_of = |id: &str| match id {
            "KS" => Some(MetricId::Accuracy),
            "ASR" => Some(MetricId::Wer),
            _ => None,
        };
        let back = EvalMatrix::from_csv(&csv, metric_of).unwrap();
        assert_eq!(back, m);
        // Forgetting needs a past step; the joint shape has none.
        assert!(m.average_forgetting(0).is_err());
    }

    fn method(name: &str, scores: &[(&str, f64)]) -> MethodScores {
        MethodScores {
            method: name.to_string(),
            by_task: scores.iter().map(|(t, s)| (t.to_string(), *s)).collect(),
        }
    }

    /// The published seven-method, six-task table.
    fn published_table() -> (Vec<MethodScores>, Vec<ColumnSpec>) {
        let tasks: Vec<ColumnSpec> = [
            ("KS", MetricId::Accuracy),
            ("SID", MetricId::Accuracy),
            ("ER", MetricId::Accuracy),
            ("IC", MetricId::Accuracy),
            ("SF", MetricId::SlotTypeF1),
            ("ASR", MetricId::Wer),
        ]
        .into_iter()
        .map(|(id, metric)| ColumnSpec { task_id: id.to_string(), metric })
        .collect();
        let rows = vec![
            method("MTL", &[("KS", 89.42), ("SID", 58.93), ("ER", 63.32),
                ("IC", 99.55), ("SF", 78.39), ("ASR", 5.78)]),
            method("FT", &[("KS", 81.79), ("SID", 16.07), ("ER", 52.35),
                ("IC", 33.72), ("SF", 0.00), ("ASR", 7.60)]),
            method("Replay", &[("KS", 96.79), ("SID", 67.86), ("ER", 66.73),
                ("IC", 90.98), ("SF", 81.65), ("ASR", 6.94)]),
            method("LwF", &[("KS", 60.18), ("SID", 35.71), ("ER", 49.31),
                ("IC", 32.38), ("SF", 0.00), ("ASR", 8.49)]),
            method("DERPP", &[("KS", 95.75), ("SID", 73.21), ("ER", 68.29),
                ("IC", 98.44), ("SF", 82.66), ("ASR", 10.30)]),
            method("GFL_S", &[("KS", 82.38), ("SID", 82.14), ("ER", 66.45),
                ("IC", 95.44), ("SF", 79.59), ("ASR", 7.72)]),
            method("GFL_D", &[("KS", 95.26), ("SID", 83.93), ("ER", 68.39),
                ("IC", 98.68), ("SF", 73.88), ("ASR", 7.34)]),
        ];
        (rows, tasks)
    }

    #[test]
    fn mean_rank_reproduces_the_published_overall_column() {
        let (rows, tasks) = published_table();
        let mr: BTreeMap<String, f64> =
            mean_rank(&rows, &tasks).unwrap().into_iter().collect();
        // Exact fractions under max-rank ties (FT and LwF both rank 7 on SF).
        let exact = [
            ("MTL", 20.0 / 6.0),
            ("FT", 36.0 / 6.0),
            ("Replay", 17.0 / 6.0),
            ("LwF", 40.0 / 6.0),
            ("DERPP", 18.0 / 6.0),
            ("GFL_S", 23.0 / 6.0),
            ("GFL_D", 15.0 / 6.0),
        ];
        for (name, value) in exact {
            assert!((mr[name] - value).abs() < 1e-12, "{name}: {}", mr[name]);
        }
        // Published (rounded) values within ±0.01.
        let published = [
            ("MTL", 3.34),
            ("FT", 6.00),
            ("Replay", 2.83),
            ("LwF", 6.67),
            ("DERPP", 3.00),
            ("GFL_S", 3.83),
            ("GFL_D", 2.50),
        ];
        for (name, value) in published {
            assert!((mr[name] - value).abs() <= 0.01, "{name}: {}", mr[name]);
        }
    }

    #[test]
    fn mean_rank_handles_dominance_ties_and_missing_cells() {
        let tasks = vec![
            ColumnSpec { task_id: "A".into(), metric: MetricId::Accuracy },
            ColumnSpec { task_id: "B".into(), metric: MetricId::Accuracy },
        ];
        let rows = vec![
            method("first", &[("A", 90.0), ("B", 80.0)]),
            method("second", &[("A", 70.0), ("B", 60.0)]),
        ];
        let mr = mean_rank(&rows, &tasks).unwrap();
        assert_eq!(mr, vec![("first".to_string(), 1.0), ("second".to_string(), 2.0)]);

        let flat = vec![
            method("x", &[("A", 50.0), ("B", 50.0)]),
            method("y", &[("A", 50.0), ("B", 50.0)]),
            method("z", &[("A", 50.0), ("B", 50.0)]),
        ];
        for (_, r) in mean_rank(&flat, &tasks).unwrap() {
            assert_eq!(r, 3.0);
        }

        let gap = vec![method("only", &[("A", 1.0)])];
        assert!(matches!(
            mean_rank(&gap, &tasks),
            Err(MetricsError::IncompleteTable { .. })
        ));
    }

    #[test]
    fn mean_rank_is_invariant_under_monotone_rescaling() {
        let (rows, tasks) = published_table();
        let rescaled: Vec<MethodScores> = rows
            .iter()
            .map(|row| MethodScores {
                method: row.method.clone(),
                by_task: row
                    .by_task
                    .iter()
                    .map(|(t, &s)| (t.clone(), (s / 20.0).exp()))
                    .collect(),
            })
            .collect();
        assert_eq!(
            mean_rank(&rows, &tasks).unwrap(),
            mean_rank(&rescaled, &tasks).unwrap()
        );
    }
}
