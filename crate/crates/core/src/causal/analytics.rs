//! Slant, totals, differentials and grouped averages of estimated impacts.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ImpactEstimate;
use crate::corpus::Outlet;
use crate::error::{Error, Result};

/// Posterior-mean impact per ordered pair; the diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactMatrix {
    pub outlets: Vec<String>,
    pub values: DMatrix<f64>,
}

impl ImpactMatrix {
    pub fn from_estimates(outlets: &[String], rows: &[ImpactEstimate]) -> Result<Self> {
        let pos: BTreeMap<&str, usize> = outlets.iter().enumerate().map(|(i, o)| (o.as_str(), i)).collect();
        let n = outlets.len();
        let mut values = DMatrix::zeros(n, n);
        for r in rows {
            let i = *pos.get(r.source.as_str()).ok_or_else(|| Error::UnknownOutlet(r.source.clone()))?;
            let j = *pos.get(r.target.as_str()).ok_or_else(|| Error::UnknownOutlet(r.target.clone()))?;
            if i != j {
                values[(i, j)] = r.mean;
            }
        }
        Ok(Self {
            outlets: outlets.to_vec(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactAnalytics {
    pub outlets: Vec<String>,
    /// `pro_a - pro_b`; positive leans towards channel `pro_a`.
    pub slant: DMatrix<f64>,
    pub total: DMatrix<f64>,
    /// `total - total'`.
    pub differential: DMatrix<f64>,
    pub outlet_slant: Vec<f64>,
    pub outlet_total: Vec<f64>,
}

pub fn slant_and_totals(pro_a: &ImpactMatrix, pro_b: &ImpactMatrix) -> Result<ImpactAnalytics> {
    if pro_a.outlets != pro_b.outlets {
        return Err(Error::DimensionMismatch("channels were estimated on different outlet sets".into()));
    }
    let n = pro_a.outlets.len();
    if pro_a.values.shape() != (n, n) || pro_b.values.shape() != (n, n) {
        return Err(Error::DimensionMismatch("impact matrices do not match the outlet list".into()));
    }
    let slant = &pro_a.values - &pro_b.values;
    let total = &pro_a.values + &pro_b.values;
    let differential = &total - total.transpose();
    Ok(ImpactAnalytics {
        outlets: pro_a.outlets.clone(),
        outlet_slant: (0..n).map(|i| slant.row(i).sum()).collect(),
        outlet_total: (0..n).map(|i| total.row(i).sum()).collect(),
        slant,
        total,
        differential,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Source orientation to target orientation.
    OrientationToOrientation,
    /// Source outlet to target country.
    OutletToCountry,
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::OrientationToOrientation => "orientation_to_orientation",
            Self::OutletToCountry => "outlet_to_country",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub channel: String,
    pub source_group: String,
    pub target_group: String,
    pub pairs: usize,
    pub mean_normalized: f64,
}

/// Unweighted average normalized impact per group pair, over the pairs that
/// have a normalized value.
pub fn group_report(rows: &[ImpactEstimate], outlets: &[Outlet], grouping: Grouping) -> Result<Vec<GroupRow>> {
    let meta: BTreeMap<&str, &Outlet> = outlets.iter().map(|o| (o.outlet_id.as_str(), o)).collect();
    let lookup = |id: &str| meta.get(id).copied().ok_or_else(|| Error::UnknownOutlet(id.to_string()));
    let mut acc: BTreeMap<(String, String, String), (usize, f64)> = BTreeMap::new();
    for r in rows {
        let (s, t) = (lookup(&r.source)?, lookup(&r.target)?);
        let key = match grouping {
            Grouping::OrientationToOrientation => (s.orientation.to_string(), t.orientation.to_string()),
            Grouping::OutletToCountry => {
                if t.country.is_empty() {
                    return Err(Error::InvalidArgument(format!("outlet `{}` has no country", t.outlet_id)));
                }
                (s.outlet_id.clone(), t.country.clone())
            }
        };
        if let Some(n) = r.normalized {
            let e = acc.entry((r.channel.clone(), key.0, key.1)).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += n.mean;
        }
    }
    Ok(acc
        .into_iter()
        .map(|((channel, source_group, target_group), (pairs, sum))| GroupRow {
            channel,
            source_group,
            target_group,
            pairs,
            mean_normalized: sum / pairs as f64,
        })
        .collect())
}

pub fn write_group_csv(rows: &[GroupRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["channel", "source_group", "target_group", "pairs", "mean_normalized"])?;
    for r in rows {
        w.write_record([
            r.channel.clone(),
            r.source_group.clone(),
            r.target_group.clone(),
            r.pairs.to_string(),
            format!("{:.6}", r.mean_normalized),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Average normalized impact of one source (or of all sources, `source == "*"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSummary {
    pub channel: String,
    pub source: String,
    pub pairs: usize,
    pub unweighted_mean: f64,
    pub kappa_weighted_mean: f64,
    pub out_of_range: usize,
}

/// Count, sum, kappa-weighted sum, kappa total, out-of-range count.
type SummaryAcc = (usize, f64, f64, f64, usize);

/// Per-source and overall averages, both unweighted and weighted by `kappa`.
pub fn normalized_summary(rows: &[ImpactEstimate]) -> Vec<NormalizedSummary> {
    let mut acc: BTreeMap<(String, String), SummaryAcc> = BTreeMap::new();
    for r in rows {
        let Some(n) = r.normalized else { continue };
        for source in [r.source.as_str(), "*"] {
            let e = acc.entry((r.channel.clone(), source.to_string())).or_default();
            e.0 += 1;
            e.1 += n.mean;
            e.2 += n.mean * r.kappa;
            e.3 += r.kappa;
            e.4 += usize::from(n.out_of_range);
        }
    }
    acc.into_iter()
        .map(|((channel, source), (pairs, sum, wsum, wt, oor))| NormalizedSummary {
            channel,
            source,
            pairs,
            unweighted_mean: sum / pairs as f64,
            kappa_weighted_mean: if wt > 0.0 { wsum / wt } else { 0.0 },
            out_of_range: oor,
        })
        .collect()
}
