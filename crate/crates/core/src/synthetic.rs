//! Synthetic data with known ground-truth risk.
//!
//! [`SyntheticDgp`] samples a two-feature dataset where group `s = 1` is
//! always labelled positive and group `s = 0` is positive with probability
//! `1 - (x1 + x2) / 2`, so the true risk is `(x1 + x2) / 2`. [`GridDgp`] is the
//! exact discrete counterpart used by the theorem checks in
//! [`crate::fairness`].

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{self, BoostParams};
use crate::cart::TreeParams;
use crate::dataset::{Dataset, FeatureSpec, FeatureVector, SchemaConfig};
use crate::error::{Error, Result};
use crate::foresee::{self, ForestParams};
use crate::rng::{derive_seed, stream_rng};

pub const BIAS_BINS: usize = 20;
/// Bins with fewer pooled samples than this are left out of bias checks.
pub const MIN_BIN_COUNT: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseLaw {
    /// `s = 1` always positive, `s = 0` positive w.p. `1 - (x1 + x2) / 2`.
    Standard,
    /// Both groups positive w.p. `p`, independent of `x` and `s`.
    Independent { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDgp {
    pub p_protected: f64,
    pub law: ResponseLaw,
}

impl Default for SyntheticDgp {
    fn default() -> Self {
        SyntheticDgp {
            p_protected: 0.5,
            law: ResponseLaw::Standard,
        }
    }
}

/// A generated dataset plus its ground-truth risk, kept outside the
/// feature matrix.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub data: Dataset,
    pub true_risk: Vec<f64>,
}

impl SyntheticDgp {
    pub fn independent(p: f64) -> Self {
        SyntheticDgp {
            law: ResponseLaw::Independent { p },
            ..Self::default()
        }
    }

    /// `P(Y = 1 | S = group, X = x)`.
    pub fn eta(&self, group: u8, x: [f64; 2]) -> f64 {
        match self.law {
            ResponseLaw::Standard if group == 1 => 1.0,
            ResponseLaw::Standard => 1.0 - (x[0] + x[1]) / 2.0,
            ResponseLaw::Independent { p } => p,
        }
    }

    pub fn true_risk(&self, x: [f64; 2]) -> f64 {
        (self.eta(1, x) - self.eta(0, x)).abs()
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<SyntheticSample> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        let mut rng = stream_rng(seed, 0);
        let mut rows = Vec::with_capacity(n);
        let mut sensitive = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut true_risk = Vec::with_capacity(n);
        for _ in 0..n {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let s = u8::from(rng.random::<f64>() < self.p_protected);
            let y = u8::from(rng.random::<f64>() < self.eta(s, x));
            rows.push(FeatureVector::numeric(&x));
            sensitive.push(s);
            labels.push(y);
            true_risk.push(self.true_risk(x));
        }
        let data = Dataset::new(
            "synthetic",
            vec![FeatureSpec::numeric("x1"), FeatureSpec::numeric("x2")],
            rows,
            sensitive,
            labels,
            "s",
        )?;
        Ok(SyntheticSample { data, true_risk })
    }
}

/// Sample from the standard synthetic law.
pub fn generate(n: usize, seed: u64) -> Result<SyntheticSample> {
    SyntheticDgp::default().generate(n, seed)
}

/// Schema matching [`write_csv`].
pub fn schema() -> SchemaConfig {
    SchemaConfig::from_toml_str(
        "name = \"synthetic\"\n\
         sensitive_column = \"s\"\n\
         sensitive_protected_value = \"1\"\n\
         label_column = \"y\"\n\
         label_positive_value = \"1\"\n",
    )
    .expect("static schema")
}

/// Write the features as `x1,x2,s,y`; the truth goes to `truth` as
/// `row_id,true_risk` when given.
pub fn write_csv<W: Write, T: Write>(
    sample: &SyntheticSample,
    data: W,
    truth: Option<T>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(data);
    w.write_record(["x1", "x2", "s", "y"])?;
    for i in 0..sample.data.len() {
        let x = sample.data.encode(&sample.data.rows[i], None);
        w.write_record([
            x[0].to_string(),
            x[1].to_string(),
            sample.data.sensitive[i].to_string(),
            sample.data.labels[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<synthetic csv>", e))?;
    if let Some(t) = truth {
        let mut w = csv::Writer::from_writer(t);
        w.write_record(["row_id", "true_risk"])?;
        for (i, r) in sample.true_risk.iter().enumerate() {
            w.write_record([i.to_string(), r.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<synthetic truth>", e))?;
    }
    Ok(())
}

/// FORESEE settings for the synthetic bench. The sensitive attribute is not
/// a split candidate, so leaves mix both groups; leaves are larger and trees
/// deeper than the general defaults.
pub fn default_foresee_params() -> ForestParams {
    let defaults = ForestParams::default();
    ForestParams {
        include_sensitive_feature: false,
        tree: TreeParams {
            max_depth: 8,
            min_leaf: 20,
            ..defaults.tree
        },
        ..defaults
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub seeds: usize,
    pub n: usize,
    pub base_seed: u64,
    pub dgp: SyntheticDgp,
    pub foresee: ForestParams,
    /// `None` skips the baseline estimator.
    pub baseline: Option<BoostParams>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            seeds: 20,
            n: 5000,
            base_seed: 0,
            dgp: SyntheticDgp::default(),
            foresee: default_foresee_params(),
            baseline: Some(BoostParams::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin_low: f64,
    pub bin_high: f64,
    pub estimator: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

impl BinSummary {
    pub fn center(&self) -> f64 {
        (self.bin_low + self.bin_high) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedBins {
    pub seed: u64,
    pub estimator: String,
    /// Per-bin mean estimate for this seed alone.
    pub means: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub seeds: usize,
    pub n: usize,
    pub bins: Vec<BinSummary>,
    pub per_seed: Vec<SeedBins>,
}

pub fn bin_of(risk: f64, bins: usize) -> usize {
    ((risk * bins as f64).floor() as usize).min(bins - 1)
}

#[derive(Clone, Copy, Default)]
struct Acc {
    count: usize,
    sum: f64,
    sum_sq: f64,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn merge(&mut self, o: &Acc) {
        self.count += o.count;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    fn std(&self) -> Option<f64> {
        if self.count < 2 {
            return None;
        }
        let n = self.count as f64;
        let var = (self.sum_sq - self.sum * self.sum / n) / (n - 1.0);
        Some(var.max(0.0).sqrt())
    }
}

fn accumulate(truth: &[f64], estimates: &[f64]) -> Vec<Acc> {
    let mut acc = vec![Acc::default(); BIAS_BINS];
    for (&t, &e) in truth.iter().zip(estimates) {
        acc[bin_of(t, BIAS_BINS)].push(e);
    }
    acc
}

struct SeedOutcome {
    seed: u64,
    per_estimator: Vec<(&'static str, Vec<Acc>)>,
}

fn run_seed(config: &BiasConfig, index: usize) -> Result<SeedOutcome> {
    let seed = derive_seed(config.base_seed, index as u64);
    let sample = config.dgp.generate(config.n, seed)?;
    let data = &sample.data;
    let all = data.all_indices();

    let mut fp = config.foresee.clone();
    fp.seed = derive_seed(seed, 1);
    let forest = foresee::build_forest(data, &all, &fp)?;
    let x = forest.design_for(data);
    let risks = foresee::score_design(&forest, &x, &all, 0.5)?.risks();
    let mut per_estimator = vec![("foresee", accumulate(&sample.true_risk, &risks))];

    if let Some(bp) = &config.baseline {
        let mut bp = bp.clone();
        bp.seed = derive_seed(seed, 2);
        let model = baseline::fit_additive(data, &all, &bp)?;
        let xs = data.design(true);
        let risks: Vec<f64> = all
            .iter()
            .map(|&i| baseline::baseline_risk(&model, xs.row(i)))
            .collect();
        per_estimator.push(("baseline", accumulate(&sample.true_risk, &risks)));
    }
    Ok(SeedOutcome {
        seed,
        per_estimator,
    })
}

/// Monte-Carlo bias comparison: per seed, draw a fresh sample, fit each
/// estimator on all of it, and bin every instance's estimate by its true
/// risk. Pooled means and standard deviations are over all instances from
/// all seeds that fall in a bin.
pub fn run_bias_experiment(config: &BiasConfig) -> Result<BiasReport> {
    if config.seeds < 2 {
        return Err(Error::InvalidParameter("seeds must be at least 2".into()));
    }
    config.foresee.validate()?;
    let outcomes: Vec<SeedOutcome> = (0..config.seeds)
        .into_par_iter()
        .map(|k| {
            run_seed(config, k).map_err(|e| Error::Seed {
                seed: derive_seed(config.base_seed, k as u64),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut bins = Vec::new();
    let mut per_seed = Vec::new();
    let names: Vec<&str> = outcomes[0].per_estimator.iter().map(|(n, _)| *n).collect();
    for (e, name) in names.iter().enumerate() {
        let mut pooled = vec![Acc::default(); BIAS_BINS];
        for o in &outcomes {
            let accs = &o.per_estimator[e].1;
            for (p, a) in pooled.iter_mut().zip(accs) {
                p.merge(a);
            }
            per_seed.push(SeedBins {
                seed: o.seed,
                estimator: name.to_string(),
                means: accs.iter().map(Acc::mean).collect(),
                counts: accs.iter().map(|a| a.count).collect(),
            });
        }
        for (b, acc) in pooled.iter().enumerate() {
            bins.push(BinSummary {
                bin_low: b as f64 / BIAS_BINS as f64,
                bin_high: (b + 1) as f64 / BIAS_BINS as f64,
                estimator: name.to_string(),
                mean: acc.mean(),
                std: acc.std(),
                count: acc.count,
            });
        }
    }
    Ok(BiasReport {
        seeds: config.seeds,
        n: config.n,
        bins,
        per_seed,
    })
}

impl BiasReport {
    pub fn estimator_bins<'a>(
        &'a self,
        estimator: &'a str,
    ) -> impl Iterator<Item = &'a BinSummary> + 'a {
        self.bins.iter().filter(move |b| b.estimator == estimator)
    }

    /// `bin_low,bin_high,estimator,mean,std,count`; empty bins leave mean
    /// and std blank.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_low", "bin_high", "estimator", "mean", "std", "count"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for b in &self.bins {
            w.write_record([
                b.bin_low.to_string(),
                b.bin_high.to_string(),
                b.estimator.clone(),
                opt(b.mean),
                opt(b.std),
                b.count.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<bias csv>", e))?;
        Ok(())
    }
}

/// A finite feature space with exact group-conditional masses and response
/// tables. Index 0 of each pair is the unprotected group, index 1 the
/// protected group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDgp {
    /// `P(X = cell | S = group)`; each sums to 1.
    pub mass: [Vec<f64>; 2],
    /// `P(Y = 1 | X = cell, S = group)`.
    pub eta: [Vec<f64>; 2],
}

impl GridDgp {
    pub fn new(mass: [Vec<f64>; 2], eta: [Vec<f64>; 2]) -> Result<Self> {
        let n = mass[0].len();
        if n == 0 || mass.iter().chain(eta.iter()).any(|v| v.len() != n) {
            return Err(Error::InvalidParameter(
                "grid tables must share a non-empty grid".into(),
            ));
        }
        for (g, m) in mass.iter().enumerate() {
            let total: f64 = m.iter().sum();
            if m.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "group {g} masses must be a distribution"
                )));
            }
        }
        if eta.iter().flatten().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidParameter(
                "responses must lie in [0, 1]".into(),
            ));
        }
        Ok(GridDgp { mass, eta })
    }

    pub fn cells(&self) -> usize {
        self.mass[0].len()
    }

    pub fn risk(&self, cell: usize) -> f64 {
        (self.eta[1][cell] - self.eta[0][cell]).abs()
    }

    /// The standard law on a `k x k` grid of cell centres with uniform
    /// masses for both groups.
    pub fn standard(k: usize) -> Self {
        let dgp = SyntheticDgp::default();
        let cells = k * k;
        let mut eta = [Vec::with_capacity(cells), Vec::with_capacity(cells)];
        for i in 0..k {
            for j in 0..k {
                let x = [(i as f64 + 0.5) / k as f64, (j as f64 + 0.5) / k as f64];
                eta[0].push(dgp.eta(0, x));
                eta[1].push(dgp.eta(1, x));
            }
        }
        let m = vec![1.0 / cells as f64; cells];
        GridDgp {
            mass: [m.clone(), m],
            eta,
        }
    }

    /// Random masses and responses; with `shared_mass` both groups get the
    /// same feature distribution.
    pub fn random<R: Rng>(rng: &mut R, cells: usize, shared_mass: bool) -> Self {
        let draw_mass = |rng: &mut R| {
            let w: Vec<f64> = (0..cells).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let m0 = draw_mass(rng);
        let m1 = if shared_mass {
            m0.clone()
        } else {
            draw_mass(rng)
        };
        let e0 = (0..cells).map(|_| rng.random::<f64>()).collect();
        let e1 = (0..cells).map(|_| rng.random::<f64>()).collect();
        GridDgp {
            mass: [m0, m1],
            eta: [e0, e1],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_risks() {
        let dgp = SyntheticDgp::default();
        assert_eq!(dgp.true_risk([0.0, 0.0]), 0.0);
        assert_eq!(dgp.true_risk([1.0, 1.0]), 1.0);
        assert_eq!(dgp.true_risk([0.2, 0.4]), (0.2 + 0.4) / 2.0);
    }

    #[test]
    fn truth_matches_definition() {
        let s = generate(500, 3).unwrap();
        for i in 0..s.data.len() {
            let x = s.data.encode(&s.data.rows[i], None);
            let analytic = (1.0 - (1.0 - (x[0] + x[1]) / 2.0)).abs();
            assert!((s.true_risk[i] - analytic).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&s.true_risk[i]));
            if s.data.sensitive[i] == 1 {
                assert_eq!(s.data.labels[i], 1);
            }
        }
    }

    #[test]
    fn group_balance_within_three_sigma() {
        let s = generate(5000, 11).unwrap();
        let ones = s.data.sensitive.iter().filter(|&&v| v == 1).count() as f64;
        assert!(
            (ones - 2500.0).abs() <= 3.0 * (5000.0f64 * 0.25).sqrt(),
            "{ones}"
        );
    }

    #[test]
    fn reproducible_bytes() {
        let bytes = |seed| {
            let s = generate(200, seed).unwrap();
            let mut a = Vec::new();
            let mut b = Vec::new();
            write_csv(&s, &mut a, Some(&mut b)).unwrap();
            (a, b)
        };
        assert_eq!(bytes(5), bytes(5));
        assert_ne!(bytes(5).0, bytes(6).0);
    }

    #[test]
    fn csv_round_trip_through_schema() {
        let s = generate(100, 2).unwrap();
        let mut buf = Vec::new();
        write_csv(&s, &mut buf, None::<Vec<u8>>).unwrap();
        let (back, _) =
            crate::dataset::read_csv(buf.as_slice(), &schema(), "synthetic".to_string()).unwrap();
        assert_eq!(back.labels, s.data.labels);
        assert_eq!(back.sensitive, s.data.sensitive);
        assert_eq!(back.rows, s.data.rows);
    }

    #[test]
    fn bins_cover_unit_interval() {
        assert_eq!(bin_of(0.0, 20), 0);
        assert_eq!(bin_of(0.049, 20), 0);
        assert_eq!(bin_of(0.05, 20), 1);
        assert_eq!(bin_of(1.0, 20), 19);
    }

    #[test]
    fn independent_law_gives_near_zero_foresee_risk() {
        let config = BiasConfig {
            seeds: 2,
            n: 2000,
            dgp: SyntheticDgp::independent(0.5),
            foresee: ForestParams {
                trees: 20,
                beta: 0.01,
                ..default_foresee_params()
            },
            baseline: None,
            ..BiasConfig::default()
        };
        let report = run_bias_experiment(&config).unwrap();
        let bins: Vec<_> = report.estimator_bins("foresee").collect();
        // Zero true risk everywhere puts every instance in the first bin.
        assert_eq!(bins[0].count, 4000);
        assert!(bins[1..].iter().all(|b| b.count == 0 && b.mean.is_none()));
        let m = bins[0].mean.unwrap();
        assert!(m < 0.15, "mean estimate {m}");
    }

    #[test]
    fn bias_report_shape_and_csv() {
        let config = BiasConfig {
            seeds: 2,
            n: 400,
            foresee: ForestParams {
                trees: 5,
                ..default_foresee_params()
            },
            baseline: Some(BoostParams {
                rounds: 10,
                ..BoostParams::default()
            }),
            ..BiasConfig::default()
        };
        let report = run_bias_experiment(&config).unwrap();
        assert_eq!(report.bins.len(), 2 * BIAS_BINS);
        assert_eq!(report.per_seed.len(), 4);
        let pooled: usize = report.estimator_bins("foresee").map(|b| b.count).sum();
        assert_eq!(pooled, 800);
        for b in &report.bins {
            if let Some(m) = b.mean {
                assert!((0.0..=1.0).contains(&m));
            }
        }
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_low,bin_high,estimator,mean,std,count\n"));
        assert_eq!(text.lines().count(), 1 + 2 * BIAS_BINS);
    }

    #[test]
    fn single_seed_rejected() {
        let config = BiasConfig {
            seeds: 1,
            ..BiasConfig::default()
        };
        assert!(run_bias_experiment(&config).is_err());
    }

    #[test]
    fn standard_grid_risk_is_mean_coordinate() {
        let g = GridDgp::standard(4);
        assert_eq!(g.cells(), 16);
        assert!((g.risk(0) - 0.125).abs() < 1e-15);
        assert!((g.risk(15) - 0.875).abs() < 1e-15);
        assert!(GridDgp::new(g.mass.clone(), g.eta.clone()).is_ok());
    }
}
