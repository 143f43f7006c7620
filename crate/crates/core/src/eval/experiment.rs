//! Contaminated splits and multi-seed experiment grids.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{outlier_count, Dataset, SyntheticFamily};
use super::metrics::{auc, average_precision, mean_std};
use crate::error::{Error, Result};
use crate::model::{score_points, train, Hyperparams, Variant};

/// Where the points of an experiment come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataFamily {
    /// Fresh synthetic family per seed.
    Synthetic { dim: usize, rank: usize, noise: f64 },
    /// Fixed labelled pool (e.g. a CSV) sampled without replacement.
    Pool(Dataset),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    /// One test set per test contamination ratio.
    pub tests: Vec<(f64, Dataset)>,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Train split with `n_train` inliers and `round(n_train·c)` outliers, and for
/// each `c_test` a test split with `n_test` inliers and `round(n_test·c_test)`
/// outliers. Test splits do not depend on `c`.
pub fn make_splits(family: &DataFamily, n_train: usize, c: f64, n_test: usize, c_test: &[f64], seed: u64) -> Result<Splits> {
    for &r in std::iter::once(&c).chain(c_test) {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::Domain(format!("contamination ratio must be non-negative, got {r}")));
        }
    }
    match family {
        DataFamily::Synthetic { dim, rank, noise } => {
            let fam = SyntheticFamily::new(*dim, *rank, *noise, &mut stream(seed, 0))?;
            let train = fam.sample(n_train, outlier_count(n_train, c), &mut stream(seed, 1));
            let tests = c_test
                .iter()
                .enumerate()
                .map(|(k, &ct)| (ct, fam.sample(n_test, outlier_count(n_test, ct), &mut stream(seed, 2 + k as u64))))
                .collect();
            Ok(Splits { train, tests })
        }
        DataFamily::Pool(ds) => {
            let mut rng = stream(seed, 0);
            let mut inliers: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 0).collect();
            let mut outliers: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 1).collect();
            inliers.shuffle(&mut rng);
            outliers.shuffle(&mut rng);
            let n_out = outlier_count(n_train, c);
            let max_test_out = c_test.iter().map(|&ct| outlier_count(n_test, ct)).max().unwrap_or(0);
            if inliers.len() < n_train + n_test || outliers.len() < n_out + max_test_out {
                return Err(Error::Format(format!(
                    "pool has {} inliers and {} outliers; split needs {} and {}",
                    inliers.len(),
                    outliers.len(),
                    n_train + n_test,
                    n_out + max_test_out
                )));
            }
            let mut train_idx = inliers[..n_train].to_vec();
            train_idx.extend_from_slice(&outliers[..n_out]);
            let test_in = &inliers[n_train..n_train + n_test];
            let tests = c_test
                .iter()
                .map(|&ct| {
                    let mut idx = test_in.to_vec();
                    idx.extend_from_slice(&outliers[n_out..n_out + outlier_count(n_test, ct)]);
                    (ct, ds.subset(&idx))
                })
                .collect();
            Ok(Splits { train: ds.subset(&train_idx), tests })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetric {
    pub seed: u64,
    pub c_test: f64,
    pub auc: f64,
    pub ap: f64,
}

/// Metrics of one (variant, c) cell, optionally tagged with a swept parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub c: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub param: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<f64>,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub per_seed: Vec<SeedMetric>,
}

impl MetricReport {
    fn from_entries(variant: Variant, c: f64, per_seed: Vec<SeedMetric>) -> Self {
        let aucs: Vec<f64> = per_seed.iter().map(|m| m.auc).collect();
        let aps: Vec<f64> = per_seed.iter().map(|m| m.ap).collect();
        let (auc_mean, auc_std) = mean_std(&aucs);
        let (ap_mean, ap_std) = mean_std(&aps);
        Self { variant, c, param: None, value: None, auc_mean, auc_std, ap_mean, ap_std, per_seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub family: DataFamily,
    pub n_train: usize,
    pub c_values: Vec<f64>,
    pub n_test: usize,
    pub c_test: Vec<f64>,
    pub variants: Vec<Variant>,
    pub hp: Hyperparams,
    pub seeds: Vec<u64>,
}

/// Trains on the train split and evaluates every test split. Rows are put
/// in canonical order first, so the result does not depend on row order.
pub fn evaluate_splits(splits: &Splits, hp: &Hyperparams, seed: u64) -> Result<Vec<SeedMetric>> {
    let train_set = splits.train.canonical();
    let (model, _) = train(&train_set.features, hp, seed)?;
    splits
        .tests
        .iter()
        .map(|(ct, test)| {
            let test = test.canonical();
            let scores = score_points(&model, &test.features, hp.t, seed)?;
            let outlierness: Vec<f64> = scores.iter().map(|s| -s).collect();
            Ok(SeedMetric {
                seed,
                c_test: *ct,
                auc: auc(&outlierness, &test.labels)?,
                ap: average_precision(&outlierness, &test.labels)?,
            })
        })
        .collect()
}

pub fn run_cell(spec: &ExperimentSpec, variant: Variant, c: f64, seed: u64) -> Result<Vec<SeedMetric>> {
    let splits = make_splits(&spec.family, spec.n_train, c, spec.n_test, &spec.c_test, seed)?;
    evaluate_splits(&splits, &Hyperparams { variant, ..spec.hp.clone() }, seed)
}

/// Every (variant, c, seed) cell, in parallel; rows come back ordered by
/// variant then c, per-seed entries by seed then c_test.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<MetricReport>> {
    if spec.seeds.is_empty() || spec.variants.is_empty() || spec.c_values.is_empty() || spec.c_test.is_empty() {
        return Err(Error::Domain("experiment grid is empty".into()));
    }
    spec.hp.validate()?;
    let cells: Vec<(Variant, f64, u64)> = spec
        .variants
        .iter()
        .flat_map(|&v| spec.c_values.iter().flat_map(move |&c| spec.seeds.iter().map(move |&s| (v, c, s))))
        .collect();
    let results: Vec<Result<Vec<SeedMetric>>> = cells
        .par_iter()
        .map(|&(v, c, s)| {
            run_cell(spec, v, c, s).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("variant {v}, c {c}, seed {s}: {msg}")),
                other => other,
            })
        })
        .collect();
    let mut reports = Vec::new();
    let mut iter = cells.iter().zip(results);
    for &v in &spec.variants {
        for &c in &spec.c_values {
            let mut entries = Vec::new();
            for _ in &spec.seeds {
                let (_, r) = iter.next().expect("cell count");
                entries.extend(r?);
            }
            reports.push(MetricReport::from_entries(v, c, entries));
        }
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Latent dimension.
    D,
    /// Mixture weight η.
    Eta,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" => Ok(SweepParam::D),
            "eta" => Ok(SweepParam::Eta),
            _ => Err(Error::Config { path: "sweep.param".into(), msg: format!("unknown sweep parameter `{s}` (expected d or eta)") }),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::D => "d",
            SweepParam::Eta => "eta",
        }
    }
}

/// One experiment per value of the swept hyperparameter.
pub fn sweep(spec: &ExperimentSpec, param: SweepParam, values: &[f64]) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for &value in values {
        let mut s = spec.clone();
        match param {
            SweepParam::D => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Domain(format!("latent dimension must be an integer, got {value}")));
                }
                s.hp.d = value as usize;
            }
            SweepParam::Eta => s.hp.eta = value,
        }
        for mut r in run_experiment(&s)? {
            r.param = Some(param.name().to_string());
            r.value = Some(value);
            out.push(r);
        }
    }
    Ok(out)
}

/// Flat CSV of the reports: one line per per-seed entry, repeating the cell's
/// summary columns.
pub fn reports_to_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "c", "param", "value", "auc_mean", "auc_std", "ap_mean", "ap_std", "seed", "c_test", "auc", "ap"])
        .map_err(csv_err)?;
    for r in reports {
        for m in &r.per_seed {
            w.write_record([
                r.variant.name().to_string(),
                r.c.to_string(),
                r.param.clone().unwrap_or_default(),
                r.value.map(|v| v.to_string()).unwrap_or_default(),
                r.auc_mean.to_string(),
                r.auc_std.to_string(),
                r.ap_mean.to_string(),
                r.ap_std.to_string(),
                m.seed.to_string(),
                m.c_test.to_string(),
                m.auc.to_string(),
                m.ap.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seeds: Vec<u64>) -> ExperimentSpec {
        ExperimentSpec {
            family: DataFamily::Synthetic { dim: 6, rank: 1, noise: 0.05 },
            n_train: 12,
            c_values: vec![0.25],
            n_test: 8,
            c_test: vec![0.5],
            variants: vec![Variant::Maw],
            hp: Hyperparams { d_prime: 4, epochs: 2, batch_size: 8, ..Hyperparams::default() },
            seeds,
        }
    }

    #[test]
    fn split_counts() {
        let fam = DataFamily::Synthetic { dim: 5, rank: 1, noise: 0.1 };
        let s = make_splits(&fam, 50, 0.2, 30, &[0.1, 0.5], 1).unwrap();
        assert_eq!((s.train.count(0), s.train.count(1)), (50, 10));
        assert_eq!((s.tests[0].1.count(0), s.tests[0].1.count(1)), (30, 3));
        assert_eq!((s.tests[1].1.count(0), s.tests[1].1.count(1)), (30, 15));
        let other_c = make_splits(&fam, 50, 0.4, 30, &[0.1, 0.5], 1).unwrap();
        assert_eq!(other_c.tests, s.tests);
    }

    #[test]
    fn pool_splits_are_disjoint() {
        let pool = super::super::data::gen_synthetic(4, 1, 40, 0.5, 0.1, 2).unwrap();
        let s = make_splits(&DataFamily::Pool(pool.clone()), 20, 0.25, 10, &[0.5], 3).unwrap();
        assert_eq!(s.train.len(), 25);
        assert_eq!(s.tests[0].1.len(), 15);
        for r in 0..s.tests[0].1.len() {
            let row = s.tests[0].1.features.row(r);
            assert!((0..s.train.len()).all(|k| s.train.features.row(k) != row));
        }
        assert!(matches!(make_splits(&DataFamily::Pool(pool), 40, 0.5, 10, &[0.5], 3), Err(Error::Format(_))));
    }

    #[test]
    fn single_cell_single_seed() {
        let r = run_experiment(&tiny_spec(vec![4])).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].auc_std, 0.0);
        assert_eq!(r[0].per_seed.len(), 1);
        assert_eq!(r[0].auc_mean, r[0].per_seed[0].auc);
    }

    #[test]
    fn std_over_seeds_is_population_std() {
        let r = run_experiment(&tiny_spec(vec![1, 2, 3])).unwrap();
        let aucs: Vec<f64> = r[0].per_seed.iter().map(|m| m.auc).collect();
        let mean = aucs.iter().sum::<f64>() / 3.0;
        let std = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((r[0].auc_std - std).abs() < 1e-15);
        let (lo, hi) = aucs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| (l.min(a), h.max(a)));
        assert!(lo <= r[0].auc_mean && r[0].auc_mean <= hi);
    }

    #[test]
    fn sweep_emits_one_row_per_value() {
        let rows = sweep(&tiny_spec(vec![1]), SweepParam::D, &[2.0, 4.0, 8.0]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().map(|r| r.value.unwrap()).collect::<Vec<_>>(), vec![2.0, 4.0, 8.0]);
        let csv = reports_to_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn row_order_does_not_matter_for_fixed_splits() {
        let spec = tiny_spec(vec![5]);
        let s = make_splits(&spec.family, 12, 0.25, 8, &[0.5], 5).unwrap();
        let rev = |d: &Dataset| d.subset(&(0..d.len()).rev().collect::<Vec<_>>());
        let permuted = Splits { train: rev(&s.train), tests: s.tests.iter().map(|(c, t)| (*c, rev(t))).collect() };
        assert_eq!(evaluate_splits(&s, &spec.hp, 5).unwrap(), evaluate_splits(&permuted, &spec.hp, 5).unwrap());
    }
}
