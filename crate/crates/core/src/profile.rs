//! Profiles of the highest- and lowest-risk instances.
//!
//! Each profile takes the same number of instances from both sensitive
//! groups. Within a group, instances are ranked by risk; equal risks are
//! ordered by row index, lower first, for both the top and the bottom
//! selection.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind, Value};
use crate::error::{Error, Result};

pub const DEFAULT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSummary {
    Numeric {
        high_mean: f64,
        low_mean: f64,
    },
    /// Modes break ties toward the category listed first.
    Categorical {
        high_mode: String,
        low_mode: String,
        high_shares: BTreeMap<String, f64>,
        low_shares: BTreeMap<String, f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub feature: String,
    #[serde(flatten)]
    pub summary: FeatureSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub fraction: f64,
    /// Instances taken from each sensitive group for each profile.
    pub per_group: usize,
    pub high_rows: Vec<usize>,
    pub low_rows: Vec<usize>,
    pub features: Vec<FeatureProfile>,
}

/// Top and bottom `fraction` of `rows` by risk, half from each group.
/// `risks` is aligned with `rows`.
pub fn select_extremes(
    data: &Dataset,
    rows: &[usize],
    risks: &[f64],
    fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::InvalidParameter(format!(
            "profile fraction must lie in (0, 0.5], got {fraction}"
        )));
    }
    if rows.len() != risks.len() {
        return Err(Error::InvalidParameter("risks must align with rows".into()));
    }
    let mut by_group: [Vec<(f64, usize)>; 2] = Default::default();
    for (&r, &risk) in rows.iter().zip(risks) {
        by_group[data.sensitive[r] as usize].push((risk, r));
    }
    if by_group.iter().any(Vec::is_empty) {
        return Err(Error::Validation(
            "profiling needs both sensitive groups".into(),
        ));
    }
    let wanted = ((fraction * rows.len() as f64).round() as usize / 2).max(1);
    let smallest = by_group.iter().map(Vec::len).min().unwrap_or(0);
    let per_group = wanted.min(smallest);
    if per_group < wanted {
        warn!("smaller sensitive group limits each profile to {per_group} instances per group");
    }
    let mut high = Vec::new();
    let mut low = Vec::new();
    for group in by_group.iter_mut() {
        group.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        high.extend(group[..per_group].iter().map(|e| e.1));
        group.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        low.extend(group[..per_group].iter().map(|e| e.1));
    }
    high.sort_unstable();
    low.sort_unstable();
    Ok((high, low, per_group))
}

fn numeric_mean(data: &Dataset, f: usize, rows: &[usize]) -> f64 {
    let sum: f64 = rows
        .iter()
        .map(|&r| match data.rows[r].values[f] {
            Value::Numeric(v) => v,
            Value::Category(c) => c as f64,
        })
        .sum();
    sum / rows.len() as f64
}

fn category_shares(
    data: &Dataset,
    f: usize,
    categories: &[String],
    rows: &[usize],
) -> (String, BTreeMap<String, f64>) {
    let mut counts = vec![0usize; categories.len()];
    for &r in rows {
        if let Value::Category(c) = data.rows[r].values[f] {
            if let Some(slot) = counts.get_mut(c as usize) {
                *slot += 1;
            }
        }
    }
    let mut mode = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[mode] {
            mode = c;
        }
    }
    let shares = categories
        .iter()
        .zip(&counts)
        .map(|(name, &n)| (name.clone(), n as f64 / rows.len() as f64))
        .collect();
    (categories.get(mode).cloned().unwrap_or_default(), shares)
}

/// Per-feature comparison of the high- and low-risk profiles.
pub fn profile(
    data: &Dataset,
    rows: &[usize],
    risks: &[f64],
    fraction: f64,
) -> Result<RiskProfile> {
    let (high_rows, low_rows, per_group) = select_extremes(data, rows, risks, fraction)?;
    let features = data
        .features
        .iter()
        .enumerate()
        .map(|(f, spec)| {
            let summary = match &spec.kind {
                FeatureKind::Numeric => FeatureSummary::Numeric {
                    high_mean: numeric_mean(data, f, &high_rows),
                    low_mean: numeric_mean(data, f, &low_rows),
                },
                FeatureKind::Categorical { categories } => {
                    let (high_mode, high_shares) = category_shares(data, f, categories, &high_rows);
                    let (low_mode, low_shares) = category_shares(data, f, categories, &low_rows);
                    FeatureSummary::Categorical {
                        high_mode,
                        low_mode,
                        high_shares,
                        low_shares,
                    }
                }
            };
            FeatureProfile {
                feature: spec.name.clone(),
                summary,
            }
        })
        .collect();
    Ok(RiskProfile {
        fraction,
        per_group,
        high_rows,
        low_rows,
        features,
    })
}

impl RiskProfile {
    /// `feature,kind,high,low,difference`; categorical rows report the mode
    /// and the difference in its share between the profiles.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature", "kind", "high", "low", "difference"])?;
        for f in &self.features {
            match &f.summary {
                FeatureSummary::Numeric {
                    high_mean,
                    low_mean,
                } => w.write_record([
                    f.feature.clone(),
                    "numeric".into(),
                    high_mean.to_string(),
                    low_mean.to_string(),
                    (high_mean - low_mean).to_string(),
                ])?,
                FeatureSummary::Categorical {
                    high_mode,
                    low_mode,
                    high_shares,
                    low_shares,
                } => w.write_record([
                    f.feature.clone(),
                    "categorical".into(),
                    high_mode.clone(),
                    low_mode.clone(),
                    (high_shares[high_mode] - low_shares[high_mode]).to_string(),
                ])?,
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}
