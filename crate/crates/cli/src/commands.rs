use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use foresee::baseline::{fit_additive, score_baseline};
use foresee::classifiers::{fit_classifier, ClassifierKind};
use foresee::dataset::{load_csv_with_report, split, Dataset, SchemaConfig};
use foresee::fairness::{FairnessMetrics, FairnessReport, SubpopSpec};
use foresee::foresee::{build_forest, score_dataset, Partition, RiskReport};
use foresee::mitigation::{mitigate, MitigationPlan, Strategy};
use foresee::profile::profile;
use foresee::synthetic::{self, BiasConfig, SyntheticDgp};
use foresee::{Error, Result};
use log::{info, warn};
use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::manifest::{io, RunManifest};

pub struct Context {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
}

impl Context {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out_dir.join(name);
        let file = File::create(&path).map_err(|e| io(&path, e))?;
        self.manifest.outputs.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)
            .and_then(|_| w.flush())
            .map_err(|e| io(&self.out_dir.join(name), e))
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| io(&self.out_dir.join(name), e))
    }

    fn load_data(&mut self, data: &Path, schema: Option<&Path>) -> Result<Dataset> {
        let schema_path = schema
            .map(Path::to_path_buf)
            .unwrap_or_else(|| data.with_extension("toml"));
        self.manifest.add_input(data)?;
        let schema = SchemaConfig::from_file(&schema_path)?;
        self.manifest.add_input(&schema_path)?;
        let (ds, report) = load_csv_with_report(data, &schema)?;
        self.manifest.note("load", report);
        info!("loaded {} rows from {}", ds.len(), data.display());
        Ok(ds)
    }
}

fn write_risks(ctx: &mut Context, report: &RiskReport) -> Result<()> {
    match ctx.cfg.format {
        Format::Csv => report.write_csv(ctx.create("risk.csv")?),
        Format::Json => ctx.write_json("risk.json", &report.entries),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Foresee,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitRows {
    /// Fit on every row.
    All,
    /// Fit on the training split only.
    Train,
}

pub fn audit(
    ctx: &mut Context,
    data: &Path,
    schema: Option<&Path>,
    estimator: EstimatorChoice,
    fit: FitRows,
    save_model: bool,
) -> Result<()> {
    let ds = ctx.load_data(data, schema)?;
    let all = ds.all_indices();
    let fit_rows = match fit {
        FitRows::All => all.clone(),
        FitRows::Train => split(&ds, ctx.cfg.split_ratio, ctx.cfg.seed)?.train,
    };
    let lambda = ctx.cfg.lambda;
    let report = match estimator {
        EstimatorChoice::Foresee => {
            let forest = build_forest(&ds, &fit_rows, &ctx.cfg.forest)?;
            ctx.manifest.note(
                "forest",
                serde_json::json!({
                    "retained": forest.len(),
                    "attempts": forest.attempts,
                    "rejected": forest.rejected_count,
                }),
            );
            if save_model {
                ctx.write_text("forest.json", &forest.to_json()?)?;
            }
            score_dataset(&forest, &ds, &all, lambda)?
        }
        EstimatorChoice::Baseline => {
            let model = fit_additive(&ds, &fit_rows, &ctx.cfg.baseline)?;
            if save_model {
                ctx.write_json("baseline.json", &model)?;
            }
            score_baseline(&model, &ds, &all, lambda)?
        }
    };
    write_risks(ctx, &report)?;
    let summary = report.summary();
    ctx.manifest.note(
        "partition",
        serde_json::json!({ "high": summary.high, "low": summary.low }),
    );
    ctx.write_json("risk_summary.json", &summary)?;
    println!(
        "{}: {} instances, {} high / {} low at lambda={lambda}, mean risk {:.4}",
        ds.name, summary.n, summary.high, summary.low, summary.mean_risk
    );
    Ok(())
}

pub fn simulate(ctx: &mut Context, export_sample: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let bias = BiasConfig {
        seeds: cfg.simulate.seeds,
        n: cfg.simulate.n,
        base_seed: cfg.seed,
        dgp: SyntheticDgp::default(),
        foresee: cfg.forest.clone(),
        baseline: cfg.simulate.baseline.then(|| cfg.baseline.clone()),
    };
    if let Some(n) = export_sample {
        let sample = synthetic::generate(n, cfg.seed)?;
        let data = ctx.create("synthetic.csv")?;
        let truth = ctx.create("synthetic_truth.csv")?;
        synthetic::write_csv(&sample, data, Some(truth))?;
        let schema =
            toml::to_string(&synthetic::schema()).map_err(|e| Error::Schema(e.to_string()))?;
        ctx.write_text("synthetic.toml", &schema)?;
    }
    let report = synthetic::run_bias_experiment(&bias)?;
    match ctx.cfg.format {
        Format::Csv => report.write_csv(ctx.create("bias.csv")?)?,
        Format::Json => ctx.write_json("bias.json", &report)?,
    }
    for est in ["foresee", "baseline"] {
        let bins: Vec<_> = report.estimator_bins(est).collect();
        if bins.is_empty() {
            continue;
        }
        let worst = bins
            .iter()
            .filter_map(|b| b.mean.map(|m| (m - b.center()).abs()))
            .fold(0.0_f64, f64::max);
        println!("{est}: largest |bin mean - bin centre| = {worst:.4}");
    }
    Ok(())
}

fn subset_metrics(
    preds: &[u8],
    labels: &[u8],
    groups: &[u8],
    positions: &[usize],
    cfg: &RunConfig,
) -> Result<FairnessMetrics> {
    let pick = |v: &[u8]| positions.iter().map(|&p| v[p]).collect::<Vec<u8>>();
    FairnessMetrics::compute(
        &pick(preds),
        &pick(labels),
        &pick(groups),
        cfg.metric,
        cfg.odds,
    )
}

pub fn evaluate(ctx: &mut Context, data: &Path, schema: Option<&Path>) -> Result<()> {
    let ds = ctx.load_data(data, schema)?;
    let cfg = ctx.cfg.clone();
    let sp = split(&ds, cfg.split_ratio, cfg.seed)?;
    let forest = build_forest(&ds, &sp.train, &cfg.forest)?;
    let risk = score_dataset(&forest, &ds, &sp.test, cfg.lambda)?;
    let positions_in = |part: Partition| -> Vec<usize> {
        (0..risk.entries.len())
            .filter(|&p| risk.entries[p].partition == part)
            .collect()
    };
    let mut subsets = vec![
        ("all", (0..sp.test.len()).collect::<Vec<_>>()),
        ("high", positions_in(Partition::High)),
        ("low", positions_in(Partition::Low)),
    ];
    if let Some(g) = cfg.gamma {
        subsets.push(("top_gamma", SubpopSpec::new(g)?.select(&risk.risks())));
    }
    for (name, pos) in &subsets {
        if pos.is_empty() {
            warn!("the {name} subset is empty; its metrics are reported as absent");
        }
    }

    let labels: Vec<u8> = sp.test.iter().map(|&r| ds.labels[r]).collect();
    let groups: Vec<u8> = sp.test.iter().map(|&r| ds.sensitive[r]).collect();
    let mut report = FairnessReport::new(&ds.name, cfg.metric, cfg.odds);
    report.lambda = Some(cfg.lambda);
    report.gamma = cfg.gamma;
    for &kind in &cfg.models {
        let model = fit_classifier(&ds, &sp.train, kind, &cfg.classifiers)?;
        if !model.converged {
            warn!("{} did not converge within the iteration cap", kind.tag());
        }
        let preds = model.predictions(&ds, &sp.test);
        for (name, pos) in &subsets {
            let m = subset_metrics(&preds, &labels, &groups, pos, &cfg)?;
            report.push(kind.short(), Strategy::Original.tag(), name, m);
        }
        report
            .classifiers
            .insert(kind.short().to_string(), model.metadata());
        info!("evaluated {}", kind.tag());
    }
    let summary = risk.summary();
    report.extra = serde_json::json!({
        "train_rows": sp.train.len(),
        "test_rows": sp.test.len(),
        "risk": { "high": summary.high, "low": summary.low, "mean": summary.mean_risk },
    });
    match cfg.format {
        Format::Csv => report.write_csv(ctx.create("fairness.csv")?)?,
        Format::Json => ctx.write_text("fairness.json", &(report.to_json()? + "\n"))?,
    }
    ctx.write_json("risk_summary.json", &summary)?;
    for e in report.entries.iter().filter(|e| e.subset != "all") {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:4} {:9} n={:6} perf {} opp {} odd {} demP {}",
            e.classifier,
            e.subset,
            e.metrics.n,
            f(e.metrics.performance),
            f(e.metrics.equal_opportunity),
            f(e.metrics.equalized_odds),
            f(e.metrics.demographic_parity)
        );
    }
    Ok(())
}

fn read_risks(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column '{name}'", path.display())))
    };
    let (id_col, risk_col) = (col("row_id")?, col("risk")?);
    let mut rows = Vec::new();
    let mut risks = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |m: String| Error::Row {
            row: i + 1,
            message: m,
        };
        rows.push(
            rec[id_col]
                .parse()
                .map_err(|e| parse_err(format!("row_id: {e}")))?,
        );
        risks.push(
            rec[risk_col]
                .parse()
                .map_err(|e| parse_err(format!("risk: {e}")))?,
        );
    }
    Ok((rows, risks))
}

pub fn profile_cmd(
    ctx: &mut Context,
    data: &Path,
    schema: Option<&Path>,
    risks: Option<&Path>,
) -> Result<()> {
    let ds = ctx.load_data(data, schema)?;
    let (rows, scores) = match risks {
        Some(path) => {
            ctx.manifest.add_input(path)?;
            let (rows, scores) = read_risks(path)?;
            if let Some(&bad) = rows.iter().find(|&&r| r >= ds.len()) {
                return Err(Error::Validation(format!(
                    "row_id {bad} is outside the dataset"
                )));
            }
            (rows, scores)
        }
        None => {
            let all = ds.all_indices();
            let forest = build_forest(&ds, &all, &ctx.cfg.forest)?;
            let scores = score_dataset(&forest, &ds, &all, ctx.cfg.lambda)?.risks();
            (all, scores)
        }
    };
    let prof = profile(&ds, &rows, &scores, ctx.cfg.profile_fraction)?;
    match ctx.cfg.format {
        Format::Csv => prof.write_csv(ctx.create("profile.csv")?)?,
        Format::Json => ctx.write_json("profile.json", &prof)?,
    }
    println!(
        "{}: profiles of {} instances per group at fraction {}",
        ds.name, prof.per_group, prof.fraction
    );
    Ok(())
}

pub fn mitigate_cmd(
    ctx: &mut Context,
    data: &Path,
    schema: Option<&Path>,
    kind: ClassifierKind,
    strategies: &[Strategy],
) -> Result<()> {
    let ds = ctx.load_data(data, schema)?;
    let cfg = ctx.cfg.clone();
    let sp = split(&ds, cfg.split_ratio, cfg.seed)?;
    let forest = build_forest(&ds, &sp.train, &cfg.forest)?;
    let train_risks = score_dataset(&forest, &ds, &sp.train, cfg.lambda)?.risks();
    let test_risks = score_dataset(&forest, &ds, &sp.test, cfg.lambda)?.risks();

    let mut report = FairnessReport::new(&ds.name, cfg.metric, cfg.odds);
    report.lambda = Some(cfg.lambda);
    let mut details = serde_json::Map::new();
    for &strategy in strategies {
        let plan = MitigationPlan {
            epsilon: cfg.mitigation.epsilon,
            grid_step: cfg.mitigation.grid_step,
            validation_fraction: cfg.mitigation.validation_fraction,
            odds: cfg.odds,
            seed: cfg.seed,
            ..MitigationPlan::new(strategy, cfg.lambda)
        };
        let result = mitigate(
            &ds,
            &sp,
            &train_risks,
            &test_risks,
            kind,
            &cfg.classifiers,
            &plan,
            cfg.metric,
        )?;
        if let Some(t) = result.thresholds.as_ref().filter(|t| !t.feasible) {
            warn!(
                "{}: no threshold pair meets epsilon={}; reporting the least-violating pair",
                strategy.tag(),
                plan.epsilon
            );
            ctx.manifest.note(
                &format!("infeasible_{}", strategy.tag()),
                t.constraint_value,
            );
        }
        let subset = if strategy.filter_mode().is_some() {
            "low"
        } else {
            "all"
        };
        details.insert(
            strategy.label().to_string(),
            serde_json::json!({
                "training_rows": result.training_rows,
                "validation_rows": result.validation_rows,
                "evaluation_rows": result.evaluation_rows,
                "removed_train": result.removed_train,
                "removed_test": result.removed_test,
                "thresholds": result.thresholds,
            }),
        );
        let m = &result.metrics;
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:28} perf {} opp {} odd {} demP {}",
            strategy.label(),
            f(m.performance),
            f(m.equal_opportunity),
            f(m.equalized_odds),
            f(m.demographic_parity)
        );
        report.push(kind.short(), strategy.label(), subset, result.metrics);
    }
    ctx.manifest.note(
        "split",
        serde_json::json!({ "train": sp.train.len(), "test": sp.test.len() }),
    );
    ctx.manifest.note("strategies", &details);
    report.extra = serde_json::Value::Object(details);
    match cfg.format {
        Format::Csv => report.write_csv(ctx.create("mitigation.csv")?)?,
        Format::Json => ctx.write_text("mitigation.json", &(report.to_json()? + "\n"))?,
    }
    Ok(())
}
