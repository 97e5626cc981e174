//! Counterfactual imputation of outcomes without the source.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::diagnostics::Summary;
use super::{compute_exposures, linear_predictor, CausalData, ExposureTensor, FittedModel, TreatmentVector, OUTCOME_SCALE};
use crate::error::{Error, Result};

/// Impact divided by the maximum potential impact `10 * kappa_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedImpact {
    /// Posterior mean clipped to [0, 1].
    pub mean: f64,
    pub raw_mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    /// The 95% interval lies entirely outside [0, 1].
    pub out_of_range: bool,
}

/// Posterior of `zeta_ij` in units of 0.1 saliency-weighted quote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactEstimate {
    pub source: String,
    pub target: String,
    pub channel: String,
    pub mean: f64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub kappa: f64,
    pub normalized: Option<NormalizedImpact>,
}

fn poisson(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    if rate <= 0.0 || !rate.is_finite() {
        return 0.0;
    }
    Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0)
}

/// Draws each target's outcome under treatment `z_cf` once per retained
/// posterior draw, with exposures recomputed on that draw's network.
/// Returns `draws[d][j]`.
pub fn impute_counterfactual(
    model: &FittedModel,
    data: &CausalData,
    z_cf: &TreatmentVector,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let n = data.n();
    if model.outlets != data.outlets {
        return Err(Error::DimensionMismatch("fitted model and data list different outlets".into()));
    }
    if z_cf.len() != n {
        return Err(Error::DimensionMismatch(format!("treatment has {} entries for {n} outlets", z_cf.len())));
    }
    if model.draws.is_empty() {
        return Err(Error::InvalidArgument("fitted model has no posterior draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .draws
        .iter()
        .map(|draw| {
            let exposures = if z_cf.is_zero() {
                ExposureTensor::zeros(n, model.n_hop)
            } else {
                compute_exposures(&model.adjacency(draw), z_cf.as_slice(), model.n_hop)?
            };
            let eta = linear_predictor(z_cf, &exposures, &draw.params, &data.design)?;
            Ok(eta.iter().map(|e| poisson(e.exp(), &mut rng)).collect())
        })
        .collect()
}

/// Impact of `source` on every other outlet: observed outcome minus the
/// outcome imputed with the source indicator zeroed.
pub fn estimate_impact(model: &FittedModel, data: &CausalData, source: usize, seed: u64) -> Result<Vec<ImpactEstimate>> {
    let n = data.n();
    let z = TreatmentVector::source(n, source)?;
    let cf = impute_counterfactual(model, data, &z.without(source), seed)?;
    Ok(contrast(data, source, &cf))
}

pub(crate) fn contrast(data: &CausalData, source: usize, cf: &[Vec<f64>]) -> Vec<ImpactEstimate> {
    let n = data.n();
    (0..n)
        .filter(|&j| j != source)
        .map(|j| {
            let y = data.observed(source, j);
            let zeta: Vec<f64> = cf.iter().map(|d| y - d[j]).collect();
            let s = Summary::of(&zeta);
            let kappa = data.kappa[(source, j)];
            let normalized = (kappa > 0.0).then(|| {
                let scale = OUTCOME_SCALE * kappa;
                let norm: Vec<f64> = zeta.iter().map(|z| z / scale).collect();
                let ns = Summary::of(&norm);
                NormalizedImpact {
                    mean: ns.mean.clamp(0.0, 1.0),
                    raw_mean: ns.mean,
                    lo95: ns.lo95,
                    hi95: ns.hi95,
                    out_of_range: ns.hi95 < 0.0 || ns.lo95 > 1.0,
                }
            });
            ImpactEstimate {
                source: data.outlets[source].clone(),
                target: data.outlets[j].clone(),
                channel: data.channel.clone(),
                mean: s.mean,
                median: s.median,
                lo95: s.lo95,
                hi95: s.hi95,
                kappa,
                normalized,
            }
        })
        .collect()
}

/// Impact rows for every ordered pair, sources in outlet order.
pub fn estimate_all(model: &FittedModel, data: &CausalData, seed: u64) -> Result<Vec<ImpactEstimate>> {
    let mut rows = Vec::new();
    for i in 0..data.n() {
        rows.extend(estimate_impact(model, data, i, crate::split_seed(seed, i as u64))?);
    }
    let flagged = rows
        .iter()
        .filter(|r| r.normalized.is_some_and(|n| n.out_of_range))
        .count();
    if flagged > 0 {
        log::warn!(
            "channel {}: {flagged} normalized impacts with 95% interval outside [0, 1]",
            data.channel
        );
    }
    Ok(rows)
}

const HEADER: [&str; 13] = [
    "source",
    "target",
    "channel",
    "mean",
    "median",
    "lo95",
    "hi95",
    "kappa",
    "normalized_mean",
    "normalized_raw_mean",
    "normalized_lo95",
    "normalized_hi95",
    "out_of_range",
];

pub fn write_impacts_csv(rows: &[ImpactEstimate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    let f = |x: f64| format!("{x:.6}");
    for r in rows {
        let (nm, nr, nl, nh, oor) = match r.normalized {
            Some(n) => (f(n.mean), f(n.raw_mean), f(n.lo95), f(n.hi95), n.out_of_range.to_string()),
            None => Default::default(),
        };
        w.write_record([
            r.source.clone(),
            r.target.clone(),
            r.channel.clone(),
            f(r.mean),
            f(r.median),
            f(r.lo95),
            f(r.hi95),
            format!("{:.12}", r.kappa),
            nm,
            nr,
            nl,
            nh,
            oor,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_impacts_csv(path: &Path) -> Result<Vec<ImpactEstimate>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    line: line + 2,
                    message: format!("column {}: {e}", HEADER[k]),
                })
        };
        let normalized = if rec.get(8).unwrap_or("").is_empty() {
            None
        } else {
            Some(NormalizedImpact {
                mean: num(8)?,
                raw_mean: num(9)?,
                lo95: num(10)?,
                hi95: num(11)?,
                out_of_range: rec.get(12) == Some("true"),
            })
        };
        out.push(ImpactEstimate {
            source: rec[0].to_string(),
            target: rec[1].to_string(),
            channel: rec[2].to_string(),
            mean: num(3)?,
            median: num(4)?,
            lo95: num(5)?,
            hi95: num(6)?,
            kappa: num(7)?,
            normalized,
        });
    }
    Ok(out)
}
