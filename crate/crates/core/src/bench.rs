//! Leave-one-subject-out adaptation benchmark: calibrating a new subject
//! against a frozen backbone versus training a fresh model on the same
//! budget.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split, stack, stratified_subset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{nway_topk, retrieval_accuracy, Classifier, CentroidClassifier};
use crate::model::{MindCrossModel, ModelConfig};
use crate::pipeline::{self, DaVariant, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Freeze the backbone and fit only the new subject's branch.
    Calib,
    /// Train a fresh single-subject model on the budget alone.
    Scratch,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Calib => "calib",
            Strategy::Scratch => "scratch",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calib" => Ok(Strategy::Calib),
            "scratch" => Ok(Strategy::Scratch),
            _ => Err(Error::validation("strategies", format!("unknown strategy `{s}` (calib|scratch)"))),
        }
    }
}

/// A calibration budget: an absolute trial count or a percentage of the
/// held-out subject's trials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Trials(usize),
    Percent(f64),
}

impl Budget {
    pub fn resolve(self, subject_trials: usize) -> usize {
        match self {
            Budget::Trials(n) => n,
            Budget::Percent(p) => (p / 100.0 * subject_trials as f64).round() as usize,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Trials(n) => write!(f, "{n}"),
            Budget::Percent(p) => write!(f, "{p}%"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::validation("budgets", format!("`{s}` is neither a trial count nor a percentage"));
        if let Some(p) = s.strip_suffix('%') {
            let p: f64 = p.trim().parse().map_err(|_| bad())?;
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::validation("budgets", format!("percentage {p} must be in (0, 100]")));
            }
            return Ok(Budget::Percent(p));
        }
        match s.parse::<usize>() {
            Ok(0) => Err(Error::validation("budgets", "a budget must be at least 1 trial")),
            Ok(n) => Ok(Budget::Trials(n)),
            Err(_) => Err(bad()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub budgets: Vec<Budget>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub hidden: usize,
    pub dropout_p: f64,
    pub grl_scale: f64,
    /// Used for backbone training (`run.seed`) and, reseeded per row, for
    /// calibration and scratch training.
    pub run: RunConfig,
    /// Fraction of the held-out subject's trials reserved for testing.
    pub test_fraction: f64,
    /// Distractor draws per prediction in the N-way metric.
    pub eval_trials: usize,
    /// Subjects to hold out in turn; every subject when empty.
    pub held_out: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub held_out: String,
    pub budget: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub train_trials: usize,
    pub test_trials: usize,
    pub two_way: f64,
    /// `min(40, C)`-way top-1.
    pub c_way: f64,
    pub retrieval: f64,
    pub wall_time_s: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

fn validate(ds: &Dataset, cfg: &BenchConfig) -> Result<()> {
    if ds.subjects.len() < 3 {
        return Err(Error::validation(
            "data",
            format!("leave-one-subject-out needs at least 3 subjects, found {}", ds.subjects.len()),
        ));
    }
    for (field, empty) in [
        ("budgets", cfg.budgets.is_empty()),
        ("strategies", cfg.strategies.is_empty()),
        ("seeds", cfg.seeds.is_empty()),
    ] {
        if empty {
            return Err(Error::validation(field, "must list at least one value"));
        }
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::validation("test_fraction", "must be in (0, 1)"));
    }
    if let Some(s) = cfg.held_out.iter().find(|s| !ds.subjects.contains(s)) {
        return Err(Error::validation("held_out", format!("unknown subject `{s}`")));
    }
    cfg.run.validate()
}

fn model_config(cfg: &BenchConfig, ds: &Dataset, subjects: Vec<String>) -> ModelConfig {
    let mut m = ModelConfig::new(ds.in_dim, cfg.hidden, ds.embed_dim, subjects);
    m.dropout_p = cfg.dropout_p;
    m.grl_scale = cfg.grl_scale;
    m
}

/// Runs every (held-out subject, budget, strategy, seed) cell, in that
/// nesting order. One backbone is trained per held-out subject.
pub fn run_bench(ds: &Dataset, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    validate(ds, cfg)?;
    let classifier = CentroidClassifier::from_dataset(ds)?;
    let c_way = classifier.n_classes().min(40);
    let mut rows = Vec::new();
    for held in ds.subjects.iter().filter(|s| cfg.held_out.is_empty() || cfg.held_out.contains(s)) {
        let others: Vec<String> = ds.subjects.iter().filter(|s| *s != held).cloned().collect();
        let mut backbone = pipeline::init_model(model_config(cfg, ds, others), cfg.run.seed)?;
        pipeline::train(&mut backbone, &ds.by_subject()?, &cfg.run)?;

        let records = ds.subject_records(held);
        let (pool, test) = split(&records, 1.0 - cfg.test_fraction, cfg.run.seed)?;
        let test = stack(&test, ds.in_dim, ds.embed_dim)?;
        for &budget in &cfg.budgets {
            let n = budget.resolve(records.len());
            if n == 0 || n > pool.len() {
                return Err(Error::validation(
                    "budgets",
                    format!("budget {budget} = {n} trials; subject `{held}` has {} outside its test split", pool.len()),
                ));
            }
            for &strategy in &cfg.strategies {
                for &seed in &cfg.seeds {
                    let subset = stack(&stratified_subset(&pool, n, seed)?, ds.in_dim, ds.embed_dim)?;
                    let run = RunConfig {
                        seed,
                        ..cfg.run.clone()
                    };
                    let started = Instant::now();
                    let (model, elapsed, pred) = match strategy {
                        Strategy::Calib => {
                            let mut m = backbone.clone();
                            pipeline::add_subject_for(&mut m, held, &subset, &run)?;
                            pipeline::calibrate(&mut m, held, &subset, &run)?;
                            let elapsed = started.elapsed();
                            let pred = pipeline::predict(&m, held, &test.x, &run)?;
                            (m, elapsed, pred)
                        }
                        Strategy::Scratch => {
                            // A single subject has nothing to align against.
                            let run = RunConfig {
                                da_variant: DaVariant::Grl,
                                ..run.clone()
                            };
                            let mut m = pipeline::init_model(model_config(cfg, ds, vec![held.clone()]), seed)?;
                            let data = [(held.clone(), subset.clone())].into_iter().collect();
                            pipeline::train(&mut m, &data, &run)?;
                            let elapsed = started.elapsed();
                            let pred = pipeline::semantic(&m, held, &test.x)?;
                            (m, elapsed, pred)
                        }
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let two_way = nway_topk(&classifier, &pred, &test.classes, 2, 1, cfg.eval_trials, &mut rng)?;
                    let c_acc = nway_topk(&classifier, &pred, &test.classes, c_way, 1, cfg.eval_trials, &mut rng)?;
                    rows.push(BenchRow {
                        held_out: held.clone(),
                        budget: budget.to_string(),
                        strategy,
                        seed,
                        train_trials: n,
                        test_trials: test.len(),
                        two_way,
                        c_way: c_acc,
                        retrieval: retrieval_accuracy(&classifier, &pred, &test.classes),
                        wall_time_s: elapsed.as_secs_f64(),
                        trainable_params: trainable(&model, held, strategy),
                        total_params: model.param_count(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn trainable(model: &MindCrossModel, subject: &str, strategy: Strategy) -> usize {
    match strategy {
        Strategy::Calib => MindCrossModel::subject_prefixes(subject)
            .iter()
            .map(|p| model.params().elements_with_prefix(p))
            .sum(),
        Strategy::Scratch => model.trainable_param_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn budget_parsing() {
        assert_eq!("40".parse::<Budget>().unwrap(), Budget::Trials(40));
        assert_eq!(" 10% ".parse::<Budget>().unwrap(), Budget::Percent(10.0));
        assert_eq!(Budget::Percent(10.0).resolve(1000), 100);
        for bad in ["0", "-3", "x", "0%", "150%"] {
            assert!(bad.parse::<Budget>().is_err(), "{bad}");
        }
    }

    fn tiny(n_subjects: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_subjects,
            n_classes: 3,
            trials_per_class: 6,
            in_dim: 8,
            embed_dim: 4,
            latent_dim: 3,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn cfg() -> BenchConfig {
        BenchConfig {
            budgets: vec![Budget::Trials(3), Budget::Trials(6)],
            strategies: vec![Strategy::Calib, Strategy::Scratch],
            seeds: vec![0, 1, 2],
            hidden: 8,
            dropout_p: 0.0,
            grl_scale: 1.0,
            run: RunConfig {
                epochs_train: 2,
                epochs_calib: 2,
                batch_size: 8,
                ..RunConfig::default()
            },
            test_fraction: 0.3,
            eval_trials: 5,
            held_out: Vec::new(),
        }
    }

    #[test]
    fn row_cardinality_and_order() {
        let rows = run_bench(&tiny(4), &cfg()).unwrap();
        assert_eq!(rows.len(), 4 * 2 * 2 * 3);
        assert_eq!(rows[0].held_out, "s0");
        assert_eq!((rows[0].strategy, rows[0].seed), (Strategy::Calib, 0));
        assert_eq!((rows[3].strategy, rows[3].seed), (Strategy::Scratch, 0));
        for r in &rows {
            assert!(r.trainable_params < r.total_params || r.strategy == Strategy::Scratch);
            assert!((0.0..=1.0).contains(&r.two_way));
        }
    }

    #[test]
    fn held_out_filter() {
        let cfg = BenchConfig {
            held_out: vec!["s2".into()],
            ..cfg()
        };
        let rows = run_bench(&tiny(4), &cfg).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        assert!(rows.iter().all(|r| r.held_out == "s2"));
        let bad = BenchConfig {
            held_out: vec!["s9".into()],
            ..cfg
        };
        assert!(matches!(run_bench(&tiny(4), &bad), Err(Error::Validation { .. })));
    }

    #[test]
    fn rejects_too_few_subjects_and_oversized_budgets() {
        assert!(matches!(run_bench(&tiny(2), &cfg()), Err(Error::Validation { .. })));
        let mut c = cfg();
        c.budgets = vec![Budget::Trials(1000)];
        assert!(matches!(run_bench(&tiny(3), &c), Err(Error::Validation { .. })));
    }
}
