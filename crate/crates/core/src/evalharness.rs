//! RMSE scoring, uniform random hyperparameter search, cross-model
//! comparison reporting, and competition-format submission output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::TestRow;
use crate::panel::{clip_target, ItemId, ShopId, CLIP_HI, CLIP_LO};

/// Root mean square error.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Validation(format!(
            "rmse needs equal non-empty lengths, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    let n = predictions.len() as f64;
    let sq: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    if !sq.is_finite() {
        return Err(Error::Numeric("non-finite residuals in rmse".into()));
    }
    Ok((sq / n).sqrt())
}

/// One hyperparameter's sampling rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRange {
    /// Uniform draw from an explicit finite grid.
    Grid(Vec<f64>),
    /// Continuous uniform on [lo, hi].
    Uniform { lo: f64, hi: f64 },
    /// Integer uniform on [lo, hi] inclusive.
    UniformInt { lo: i64, hi: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: BTreeMap<String, ParamRange>,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    /// Neighborhoods around the tuned GBT defaults.
    fn default() -> Self {
        let mut params = BTreeMap::new();
        params.insert("eta".into(), ParamRange::Uniform { lo: 0.01, hi: 0.3 });
        params.insert("max_depth".into(), ParamRange::UniformInt { lo: 3, hi: 10 });
        params.insert("min_child_weight".into(), ParamRange::Uniform { lo: 1.0, hi: 50.0 });
        params.insert("lambda".into(), ParamRange::Uniform { lo: 0.0, hi: 1.0 });
        params.insert("alpha".into(), ParamRange::Uniform { lo: 0.0, hi: 1.0 });
        SearchSpace { params, n_samples: 60, seed: 0 }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        for (name, range) in &self.params {
            let ok = match range {
                ParamRange::Grid(g) => !g.is_empty(),
                ParamRange::Uniform { lo, hi } => lo <= hi && lo.is_finite() && hi.is_finite(),
                ParamRange::UniformInt { lo, hi } => lo <= hi,
            };
            if !ok {
                return Err(Error::Config(format!("empty or inverted range for `{name}`")));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> BTreeMap<String, f64> {
        self.params
            .iter()
            .map(|(name, range)| {
                let v = match range {
                    ParamRange::Grid(g) => g[rng.gen_range(0..g.len())],
                    ParamRange::Uniform { lo, hi } => {
                        if lo == hi {
                            *lo
                        } else {
                            rng.gen_range(*lo..*hi)
                        }
                    }
                    ParamRange::UniformInt { lo, hi } => rng.gen_range(*lo..=*hi) as f64,
                };
                (name.clone(), v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub params: BTreeMap<String, f64>,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    /// Index into `trials` of the winner (lowest val RMSE, earliest on
    /// ties).
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Draws `n_samples` parameter points from the seeded space and scores
/// each with `eval`, which returns `(train_rmse, val_rmse)`. Failed
/// trials are logged and skipped; if every trial fails the last error
/// is returned.
pub fn random_search<F>(space: &SearchSpace, mut eval: F) -> Result<SearchOutcome>
where
    F: FnMut(&BTreeMap<String, f64>) -> Result<(f64, f64)>,
{
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let mut trials = Vec::with_capacity(space.n_samples);
    let mut best: Option<usize> = None;
    let mut last_err = None;
    for index in 0..space.n_samples {
        let params = space.draw(&mut rng);
        let started = std::time::Instant::now();
        match eval(&params) {
            Ok((train_rmse, val_rmse)) => {
                let seconds = started.elapsed().as_secs_f64();
                trials.push(Trial { index, params, train_rmse, val_rmse, seconds, error: None });
                let pos = trials.len() - 1;
                if best.map_or(true, |b| val_rmse < trials[b].val_rmse) {
                    best = Some(pos);
                }
            }
            Err(e) => {
                let seconds = started.elapsed().as_secs_f64();
                trials.push(Trial {
                    index,
                    params,
                    train_rmse: f64::NAN,
                    val_rmse: f64::NAN,
                    seconds,
                    error: Some(e.to_string()),
                });
                last_err = Some(e);
            }
        }
    }
    match best {
        Some(best) => Ok(SearchOutcome { trials, best }),
        None => Err(last_err.unwrap_or_else(|| Error::Validation("no trials ran".into()))),
    }
}

/// Trial log CSV: `trial,<param names>,train_rmse,val_rmse,seconds`.
/// Failed trials are written with empty RMSE fields.
pub fn write_trial_log(outcome: &SearchOutcome, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let names: Vec<&String> =
        outcome.trials.first().map_or_else(Vec::new, |t| t.params.keys().collect());
    let mut out = String::from("trial");
    for n in &names {
        let _ = write!(out, ",{n}");
    }
    out.push_str(",train_rmse,val_rmse,seconds\n");
    for t in &outcome.trials {
        let _ = write!(out, "{}", t.index);
        for n in &names {
            let _ = write!(out, ",{}", t.params[*n]);
        }
        let fmt = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
        let _ = writeln!(out, ",{},{},{:.3}", fmt(t.train_rmse), fmt(t.val_rmse), t.seconds);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One comparison row. `error` marks a model whose pipeline failed;
/// its RMSE fields are then NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub model: String,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub test_rmse: Option<f64>,
    pub error: Option<String>,
}

impl RunReport {
    pub fn new(model: impl Into<String>, train_rmse: f64, val_rmse: f64, test_rmse: Option<f64>) -> Self {
        RunReport { model: model.into(), train_rmse, val_rmse, test_rmse, error: None }
    }

    pub fn failed(model: impl Into<String>, error: impl Into<String>) -> Self {
        RunReport {
            model: model.into(),
            train_rmse: f64::NAN,
            val_rmse: f64::NAN,
            test_rmse: None,
            error: Some(error.into()),
        }
    }
}

/// Canonical comparison roster.
pub const MODEL_NAMES: [&str; 3] = ["XGBoost-style GBT", "LSTM", "ARIMA"];

fn fmt_rmse(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "-".into()
    }
}

/// Renders the aligned comparison table, rows sorted by validation
/// RMSE ascending (failures last).
pub fn render_comparison(reports: &[RunReport]) -> String {
    let mut rows: Vec<&RunReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        let (av, bv) = (a.val_rmse, b.val_rmse);
        match (av.is_finite(), bv.is_finite()) {
            (true, true) => av.partial_cmp(&bv).unwrap(),
            (true, false) => std::cmp::Ordering::Less,
            (false, true) => std::cmp::Ordering::Greater,
            (false, false) => a.model.cmp(&b.model),
        }
    });
    let name_w = rows
        .iter()
        .map(|r| r.model.len())
        .chain(std::iter::once("model".len()))
        .max()
        .unwrap_or(5);
    let mut out = format!(
        "{:<name_w$}  {:>10}  {:>10}  {:>10}\n",
        "model", "train_rmse", "val_rmse", "test_rmse"
    );
    for r in rows {
        let test = r.test_rmse.map_or("-".into(), fmt_rmse);
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>10}  {:>10}  {:>10}{}",
            r.model,
            fmt_rmse(r.train_rmse),
            fmt_rmse(r.val_rmse),
            test,
            r.error.as_deref().map_or(String::new(), |e| format!("  [failed: {e}]")),
        );
    }
    out
}

/// Report CSV: `model,train_rmse,val_rmse,test_rmse` in roster order.
pub fn write_comparison_csv(reports: &[RunReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("model,train_rmse,val_rmse,test_rmse\n");
    for r in reports {
        let fmt = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
        let test = r.test_rmse.map_or(String::new(), fmt);
        let _ = writeln!(out, "{},{},{},{}", r.model, fmt(r.train_rmse), fmt(r.val_rmse), test);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `ID,item_cnt_month` in test-file row order, clipping every
/// prediction to [0, 20]. Pairs without a prediction abort with the
/// offending IDs.
pub fn write_submission(
    predictions: &HashMap<(ShopId, ItemId), f64>,
    test_rows: &[TestRow],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let missing: Vec<u64> = test_rows
        .iter()
        .filter(|r| !predictions.contains_key(&(r.shop_id, r.item_id)))
        .map(|r| r.id)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut out = String::from("ID,item_cnt_month\n");
    for r in test_rows {
        let p = clip_target(predictions[&(r.shop_id, r.item_id)], CLIP_LO, CLIP_HI);
        let _ = writeln!(out, "{},{}", r.id, p);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a submission file back into ID order predictions.
pub fn read_submission(path: impl AsRef<Path>) -> Result<Vec<(u64, f64)>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    {
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?;
        if headers.iter().collect::<Vec<_>>() != ["ID", "item_cnt_month"] {
            return Err(Error::Schema { path: path.into(), column: "ID,item_cnt_month".into() });
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let id: u64 = record
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Schema { path: path.into(), column: "ID".into() })?;
        let value: f64 = record
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Schema { path: path.into(), column: "item_cnt_month".into() })?;
        rows.push((id, value));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rmse_perfect_is_zero() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn rmse_hand_value() {
        assert_relative_eq!(rmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn rmse_rejects_mismatch_and_empty() {
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn constant_mean_prediction_minimizes_rmse() {
        let targets = [0.5, 1.5, 4.0, -2.0, 3.25];
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let score = |c: f64| rmse(&vec![c; targets.len()], &targets).unwrap();
        let best_grid = (-400..400)
            .map(|i| i as f64 * 0.01)
            .map(score)
            .fold(f64::INFINITY, f64::min);
        assert!(score(mean) <= best_grid + 1e-12);
    }

    fn trivial_space(n_samples: usize, seed: u64) -> SearchSpace {
        let mut params = BTreeMap::new();
        params.insert("x".into(), ParamRange::Uniform { lo: -1.0, hi: 1.0 });
        params.insert("k".into(), ParamRange::UniformInt { lo: 1, hi: 5 });
        SearchSpace { params, n_samples, seed }
    }

    #[test]
    fn singleton_space_returns_that_point() {
        let mut params = BTreeMap::new();
        params.insert("eta".into(), ParamRange::Grid(vec![0.5]));
        let space = SearchSpace { params, n_samples: 3, seed: 1 };
        let out = random_search(&space, |p| Ok((p["eta"], p["eta"]))).unwrap();
        assert_eq!(out.best_trial().params["eta"], 0.5);
        assert_eq!(out.trials.len(), 3);
    }

    #[test]
    fn same_seed_same_sequence_and_winner() {
        let space = trivial_space(10, 99);
        let f = |p: &BTreeMap<String, f64>| Ok((0.0, (p["x"] - 0.3).abs()));
        let a = random_search(&space, f).unwrap();
        let b = random_search(&space, f).unwrap();
        // seconds is wall-clock; everything else must repeat exactly
        assert_eq!(a.best, b.best);
        let strip = |o: &SearchOutcome| {
            o.trials
                .iter()
                .map(|t| (t.index, t.params.clone(), t.val_rmse))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn winner_beats_or_ties_every_trial_and_ties_go_earliest() {
        let space = trivial_space(25, 7);
        // Constant objective: every trial ties, winner must be trial 0.
        let out = random_search(&space, |_| Ok((0.0, 1.0))).unwrap();
        assert_eq!(out.best_trial().index, 0);
        let out = random_search(&space, |p| Ok((0.0, p["x"].abs()))).unwrap();
        let best = out.best_trial().val_rmse;
        assert!(out.trials.iter().all(|t| best <= t.val_rmse));
    }

    #[test]
    fn failed_trials_skipped_but_all_failing_errors() {
        let space = trivial_space(6, 3);
        let mut calls = 0;
        let out = random_search(&space, |p| {
            calls += 1;
            if calls % 2 == 0 {
                Err(Error::Numeric("boom".into()))
            } else {
                Ok((0.0, p["x"].abs()))
            }
        })
        .unwrap();
        assert_eq!(out.trials.len(), 6);
        assert_eq!(out.trials.iter().filter(|t| t.error.is_some()).count(), 3);
        assert!(out.best_trial().error.is_none());

        let all_fail = random_search(&space, |_| Err::<(f64, f64), _>(Error::Numeric("x".into())));
        assert!(all_fail.is_err());
    }

    #[test]
    fn trial_log_has_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        let space = trivial_space(4, 11);
        let out = random_search(&space, |p| Ok((p["x"], p["x"].abs()))).unwrap();
        write_trial_log(&out, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "trial,k,x,train_rmse,val_rmse,seconds");
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn comparison_roster_and_sorting() {
        let reports = vec![
            RunReport::new(MODEL_NAMES[0], 0.5, 0.8, Some(0.81)),
            RunReport::new(MODEL_NAMES[1], 0.6, 0.89, None),
            RunReport::new(MODEL_NAMES[2], 0.9, 0.98, Some(0.99)),
        ];
        let table = render_comparison(&reports);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("model"));
        assert!(lines[1].starts_with("XGBoost-style GBT"));
        assert!(lines[2].starts_with("LSTM"));
        assert!(lines[3].starts_with("ARIMA"));
        for name in MODEL_NAMES {
            assert!(table.contains(name));
        }
    }

    #[test]
    fn comparison_failure_marked_and_sorted_last() {
        let reports = vec![
            RunReport::failed(MODEL_NAMES[1], "no converge"),
            RunReport::new(MODEL_NAMES[2], 0.9, 0.98, None),
        ];
        let table = render_comparison(&reports);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[1].starts_with("ARIMA"));
        assert!(lines[2].contains("[failed: no converge]"));
    }

    #[test]
    fn comparison_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let reports = vec![RunReport::new("ARIMA", 0.9, 0.98, Some(1.0))];
        write_comparison_csv(&reports, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "model,train_rmse,val_rmse,test_rmse\nARIMA,0.9,0.98,1\n");
    }

    fn test_rows() -> Vec<TestRow> {
        vec![
            TestRow { id: 0, shop_id: 5, item_id: 100 },
            TestRow { id: 1, shop_id: 5, item_id: 101 },
            TestRow { id: 2, shop_id: 6, item_id: 100 },
        ]
    }

    #[test]
    fn submission_clips_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("submission.csv");
        let mut preds = HashMap::new();
        preds.insert((5u32, 100u32), 31.2);
        preds.insert((5u32, 101u32), -0.4);
        preds.insert((6u32, 100u32), 2.5);
        write_submission(&preds, &test_rows(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "ID,item_cnt_month\n0,20\n1,0\n2,2.5\n");
        let back = read_submission(&path).unwrap();
        assert_eq!(back, vec![(0, 20.0), (1, 0.0), (2, 2.5)]);
    }

    #[test]
    fn submission_missing_pair_lists_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("submission.csv");
        let mut preds = HashMap::new();
        preds.insert((5u32, 100u32), 1.0);
        match write_submission(&preds, &test_rows(), &path) {
            Err(Error::MissingPredictions(ids)) => assert_eq!(ids, vec![1, 2]),
            other => panic!("expected missing-prediction error, got {other:?}"),
        }
        assert!(!path.exists());
    }

    #[test]
    fn submission_reader_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,count\n0,1\n").unwrap();
        assert!(read_submission(&path).is_err());
    }

    proptest! {
        #[test]
        fn rmse_symmetry(v in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assert!((rmse(&p, &t).unwrap() - rmse(&t, &p).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn rmse_translation_invariance(
            v in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..40),
            c in -100.0..100.0f64,
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let ps: Vec<f64> = p.iter().map(|x| x + c).collect();
            let ts: Vec<f64> = t.iter().map(|x| x + c).collect();
            prop_assert!((rmse(&p, &t).unwrap() - rmse(&ps, &ts).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn search_winner_is_min(seed in 0u64..1000) {
            let space = trivial_space(12, seed);
            let out = random_search(&space, |p| Ok((0.0, (p["x"] + 0.5).abs()))).unwrap();
            let best = out.best_trial().val_rmse;
            prop_assert!(out.trials.iter().all(|t| best <= t.val_rmse));
        }
    }
}
