//! Scripted experiment harness: train a list of named config variants over
//! shared data across several seeds and tabulate validation AUC. One failed
//! run never aborts the matrix; it is recorded and the sweep continues.

use crate::config::TrainConfig;
use crate::data::synthetic::{self, SyntheticSpec};
use crate::data::{
    assemble_samples, behavior_sequences, intern_samples, split, DataError, Vocabs,
};
use crate::graph::{CoocGraph, GraphError};
use crate::metrics::mean_std;
use crate::model::Sample;
use crate::trainer::train;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Shared inputs every variant trains on.
pub struct BenchData {
    pub vocabs: Vocabs,
    pub graph: CoocGraph,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Generates a synthetic log and runs it through the standard pipeline:
/// assemble, chronological split, train-only vocabulary, training-period
/// co-occurrence graph.
pub fn prepare_synthetic(spec: &SyntheticSpec, cfg: &TrainConfig) -> Result<BenchData, BenchError> {
    let generated = synthetic::generate(spec)?;
    let assembled = assemble_samples(&generated.events, cfg)?;
    let (train_raw, val_raw, _test) = split(assembled.samples)?;
    let vocabs = Vocabs::build(&train_raw);
    let boundary = val_raw.first().map(|s| s.ts).unwrap_or(i64::MAX);
    let sequences = behavior_sequences(&generated.events, &vocabs, boundary);
    let graph = CoocGraph::build(&sequences, cfg.graph_window)?;
    Ok(BenchData {
        train: intern_samples(&vocabs, &train_raw),
        val: intern_samples(&vocabs, &val_raw),
        vocabs,
        graph,
    })
}

pub struct ExperimentMatrix {
    /// Unique names paired with full configs; the reference variant first.
    pub variants: Vec<(String, TrainConfig)>,
    pub seeds: Vec<u64>,
}

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(BenchError::Invalid("empty experiment matrix".into()));
        }
        for (i, (name, _)) in self.variants.iter().enumerate() {
            if self.variants[..i].iter().any(|(n, _)| n == name) {
                return Err(BenchError::Invalid(format!("duplicate variant `{name}`")));
            }
        }
        Ok(())
    }
}

/// The six standard rows: the full model followed by one-module removals
/// and the static-gate variant.
pub fn ablation_matrix(base: &TrainConfig, seeds: Vec<u64>) -> ExperimentMatrix {
    let variant = |name: &str, tweak: fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        cfg.ablation = Default::default();
        tweak(&mut cfg);
        (name.to_string(), cfg)
    };
    ExperimentMatrix {
        variants: vec![
            variant("full", |_| {}),
            variant("no_eiem", |c| c.ablation.no_eiem = true),
            variant("no_liem", |c| c.ablation.no_liem = true),
            variant("no_iumm", |c| c.ablation.no_iumm = true),
            variant("no_ssl", |c| c.ablation.no_ssl = true),
            variant("sii", |c| c.ablation.sii = true),
        ],
        seeds,
    }
}

#[derive(Debug)]
pub struct VariantResult {
    pub name: String,
    /// (seed, best validation AUC) per successful run, in seed order.
    pub runs: Vec<(u64, f64)>,
    pub failures: Vec<(u64, String)>,
}

impl VariantResult {
    pub fn aucs(&self) -> Vec<f64> {
        self.runs.iter().map(|&(_, auc)| auc).collect()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.runs.is_empty()).then(|| mean_std(&self.aucs()).0)
    }
}

pub struct MatrixOutcome {
    pub results: Vec<VariantResult>,
}

impl MatrixOutcome {
    pub fn result(&self, name: &str) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

/// Runs every variant over every seed, first variant first so the reference
/// numbers are available even if a later variant fails.
pub fn run_matrix(matrix: &ExperimentMatrix, data: &BenchData) -> Result<MatrixOutcome, BenchError> {
    matrix.validate()?;
    let mut results = Vec::with_capacity(matrix.variants.len());
    for (name, cfg) in &matrix.variants {
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for &seed in &matrix.seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            match train(&cfg, &data.vocabs, &data.graph, &data.train, &data.val, None) {
                Ok(out) => match out.best_val_auc {
                    Some(auc) => runs.push((seed, auc)),
                    None => failures.push((seed, "no validation samples".to_string())),
                },
                Err(e) => failures.push((seed, e.to_string())),
            }
        }
        results.push(VariantResult {
            name: name.clone(),
            runs,
            failures,
        });
    }
    Ok(MatrixOutcome { results })
}

/// One variant per value of a single config key, named `key=value`.
pub fn sweep_matrix(
    base: &TrainConfig,
    key: &str,
    values: &[String],
    seeds: Vec<u64>,
) -> Result<ExperimentMatrix, BenchError> {
    let mut variants = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        cfg.set(key, value)
            .map_err(|e| BenchError::Invalid(e.to_string()))?;
        variants.push((format!("{key}={value}"), cfg));
    }
    Ok(ExperimentMatrix { variants, seeds })
}

/// CSV table: the std column stays empty when only one seed ran, and failed
/// seeds are listed rather than silently dropped.
pub fn to_csv(outcome: &MatrixOutcome) -> String {
    let mut out = String::from("variant,n_seeds,mean_auc,std_auc,failed_seeds\n");
    for r in &outcome.results {
        let (mean, std) = if r.runs.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, s) = mean_std(&r.aucs());
            (
                format!("{m:.4}"),
                s.map(|s| format!("{s:.4}")).unwrap_or_default(),
            )
        };
        let failed = r
            .failures
            .iter()
            .map(|(seed, _)| seed.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{mean},{std},{failed}\n",
            r.name,
            r.runs.len()
        ));
    }
    out
}

/// Long-form CSV with one row per successful run, for significance tests
/// and replotting.
pub fn runs_csv(outcome: &MatrixOutcome) -> String {
    let mut out = String::from("variant,seed,auc\n");
    for r in &outcome.results {
        for (seed, auc) in &r.runs {
            out.push_str(&format!("{},{seed},{auc:.6}\n", r.name));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> (TrainConfig, BenchData) {
        let mut cfg = TrainConfig::default();
        cfg.d = 4;
        cfg.n_heads = 2;
        cfg.t_max = 6;
        cfg.l_max = 4;
        cfg.batch_size = 16;
        cfg.epochs = 1;
        let spec = SyntheticSpec {
            n_users: 24,
            n_items: 80,
            n_attributes: 4,
            n_sessions: 50,
            seed: 21,
            ..SyntheticSpec::default()
        };
        let data = prepare_synthetic(&spec, &cfg).unwrap();
        (cfg, data)
    }

    #[test]
    fn duplicate_variant_names_are_rejected() {
        let cfg = TrainConfig::default();
        let matrix = ExperimentMatrix {
            variants: vec![("a".into(), cfg.clone()), ("a".into(), cfg)],
            seeds: vec![1],
        };
        assert!(matrix.validate().is_err());
    }

    #[test]
    fn standard_ablation_matrix_has_six_unique_rows() {
        let matrix = ablation_matrix(&TrainConfig::default(), vec![1, 2, 3]);
        matrix.validate().unwrap();
        let names: Vec<&str> = matrix.variants.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["full", "no_eiem", "no_liem", "no_iumm", "no_ssl", "sii"]);
        assert!(matrix.variants[0].1.ablation == Default::default());
        assert!(matrix.variants[2].1.ablation.no_liem);
    }

    #[test]
    fn matrix_runs_and_tabulates() {
        let (cfg, data) = tiny_base();
        let mut no_liem = cfg.clone();
        no_liem.ablation.no_liem = true;
        let matrix = ExperimentMatrix {
            variants: vec![("full".into(), cfg), ("no_liem".into(), no_liem)],
            seeds: vec![1, 2],
        };
        let outcome = run_matrix(&matrix, &data).unwrap();
        assert_eq!(outcome.results.len(), 2);
        for r in &outcome.results {
            assert_eq!(r.runs.len(), 2, "{}: {:?}", r.name, r.failures);
            assert!(r.aucs().iter().all(|a| (0.0..=1.0).contains(a)));
        }
        let csv = to_csv(&outcome);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variant,n_seeds,mean_auc,std_auc,failed_seeds");
        assert!(lines[1].starts_with("full,2,0."));
        let std_field = lines[1].split(',').nth(3).unwrap();
        assert!(!std_field.is_empty(), "two seeds produce a std");
    }

    #[test]
    fn single_seed_leaves_std_empty() {
        let (cfg, data) = tiny_base();
        let matrix = ExperimentMatrix {
            variants: vec![("full".into(), cfg)],
            seeds: vec![4],
        };
        let outcome = run_matrix(&matrix, &data).unwrap();
        let csv = to_csv(&outcome);
        let row = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[1], "1");
        assert!(fields[3].is_empty(), "std must be empty for one seed");
    }

    #[test]
    fn failed_variants_are_marked_and_do_not_halt_the_matrix() {
        let (cfg, data) = tiny_base();
        let mut broken = cfg.clone();
        broken.lr = -1.0;
        let matrix = ExperimentMatrix {
            variants: vec![("broken".into(), broken), ("full".into(), cfg)],
            seeds: vec![1],
        };
        let outcome = run_matrix(&matrix, &data).unwrap();
        assert!(outcome.result("broken").unwrap().runs.is_empty());
        assert_eq!(outcome.result("broken").unwrap().failures.len(), 1);
        assert_eq!(outcome.result("full").unwrap().runs.len(), 1);
        let csv = to_csv(&outcome);
        assert!(csv.lines().nth(1).unwrap().starts_with("broken,0,,,1"));
    }

    #[test]
    fn sweeps_name_variants_by_key_and_value() {
        let matrix = sweep_matrix(
            &TrainConfig::default(),
            "tau",
            &["0.05".into(), "0.1".into(), "0.2".into()],
            vec![1],
        )
        .unwrap();
        let names: Vec<&str> = matrix.variants.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["tau=0.05", "tau=0.1", "tau=0.2"]);
        assert!((matrix.variants[0].1.tau - 0.05).abs() < 1e-9);
        assert!(sweep_matrix(&TrainConfig::default(), "bogus", &["1".into()], vec![1]).is_err());
    }
}
