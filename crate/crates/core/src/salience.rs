//! Saliency-weighted potential quote influence between outlets.
//!
//! For a quote `q`, source `i` and follower `j`, three published forms are
//! supported (see [`FormulaVariant`]); all of them credit `i` only with the
//! uses by `j` at or after `i`'s first use, and discount quotes used by many
//! outlets.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cluster::QuoteCluster;
use crate::corpus::SentimentChannel;
use crate::error::{Error, Result};

/// Monotone concave discount function on [1, inf).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Discount {
    Identity,
    Sqrt,
    Log1p,
}

impl Discount {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Discount::Identity => x,
            Discount::Sqrt => x.sqrt(),
            Discount::Log1p => x.ln_1p(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FormulaVariant {
    /// `1/g1(S_q) * g2(n_j) * n_after / n_j`
    MainText,
    /// `1/g1(S_q) * g2(n_j) * n_after / sqrt(n_j)`
    Supplement,
    /// `n_after / S_q` (both discounts are the identity)
    Figure2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SalienceConfig {
    pub variant: FormulaVariant,
    pub g1: Discount,
    pub g2: Discount,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        Self {
            variant: FormulaVariant::MainText,
            g1: Discount::Sqrt,
            g2: Discount::Sqrt,
        }
    }
}

/// Salience from the per-quote counts: `s_q` outlets used the quote, the
/// follower used it `n_j` times, `n_after` of them at or after exposure.
pub fn salience_from_counts(s_q: usize, n_j: usize, n_after: usize, cfg: &SalienceConfig) -> f64 {
    if s_q == 0 || n_j == 0 || n_after == 0 {
        return 0.0;
    }
    let (s, n, after) = (s_q as f64, n_j as f64, n_after as f64);
    match cfg.variant {
        FormulaVariant::MainText => cfg.g2.apply(n) * (after / n) / cfg.g1.apply(s),
        FormulaVariant::Supplement => cfg.g2.apply(n) * (after / n.sqrt()) / cfg.g1.apply(s),
        FormulaVariant::Figure2 => after / s,
    }
}

/// Potential influence of outlet `i` on outlet `j` through one quote.
///
/// A use by `j` on the same timestamp as `i`'s first use counts as exposed.
/// Returns 0 when either outlet never used the quote. With `i == j` every use
/// counts, which gives the outlet's own saliency-weighted volume.
pub fn per_quote_salience(cluster: &QuoteCluster, i: &str, j: &str, cfg: &SalienceConfig) -> f64 {
    let (Some(first_i), uses_j) = (cluster.uses(i).first(), cluster.uses(j)) else {
        return 0.0;
    };
    if uses_j.is_empty() {
        return 0.0;
    }
    let n_after = uses_j.iter().filter(|t| *t >= first_i).count();
    salience_from_counts(cluster.s_q(), uses_j.len(), n_after, cfg)
}

/// Which clusters enter a salience matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelFilter {
    All,
    Only(SentimentChannel),
}

impl ChannelFilter {
    pub fn admits(self, c: SentimentChannel) -> bool {
        match self {
            ChannelFilter::All => true,
            ChannelFilter::Only(x) => x == c,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelFilter::All => "all",
            ChannelFilter::Only(c) => c.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(ChannelFilter::All)
        } else {
            Ok(ChannelFilter::Only(s.parse()?))
        }
    }
}

/// Outlet x outlet influence matrix for one channel; `kappa[(i, j)]` is the
/// potential influence of `i` on `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceMatrix {
    pub outlets: Vec<String>,
    pub channel: ChannelFilter,
    pub kappa: DMatrix<f64>,
    /// Each outlet's own saliency-weighted quote volume (the `i == j` sum).
    pub self_salience: Vec<f64>,
}

impl SalienceMatrix {
    pub fn zeros(outlets: Vec<String>, channel: ChannelFilter) -> Self {
        let n = outlets.len();
        Self {
            outlets,
            channel,
            kappa: DMatrix::zeros(n, n),
            self_salience: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.outlets.len()
    }
}

pub fn build_salience(
    clusters: &[QuoteCluster],
    outlets: &[String],
    cfg: &SalienceConfig,
    channel: ChannelFilter,
) -> Result<SalienceMatrix> {
    let pos: BTreeMap<&str, usize> = outlets
        .iter()
        .enumerate()
        .map(|(i, o)| (o.as_str(), i))
        .collect();
    let mut m = SalienceMatrix::zeros(outlets.to_vec(), channel);
    for q in clusters.iter().filter(|q| channel.admits(q.channel)) {
        let users: Vec<(&str, usize)> = q
            .usage
            .keys()
            .map(|o| {
                pos.get(o.as_str())
                    .map(|&p| (o.as_str(), p))
                    .ok_or_else(|| Error::UnknownOutlet(o.clone()))
            })
            .collect::<Result<_>>()?;
        for &(a, pa) in &users {
            m.self_salience[pa] += per_quote_salience(q, a, a, cfg);
            for &(b, pb) in &users {
                if pa != pb {
                    m.kappa[(pa, pb)] += per_quote_salience(q, a, b, cfg);
                }
            }
        }
    }
    Ok(m)
}

/// Rows `source_outlet,target_outlet,channel,kappa` for every nonzero entry.
pub fn write_salience_csv(matrices: &[SalienceMatrix], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source_outlet", "target_outlet", "channel", "kappa"])?;
    for m in matrices {
        for i in 0..m.n() {
            for j in 0..m.n() {
                let k = m.kappa[(i, j)];
                if i != j && k != 0.0 {
                    w.write_record([
                        m.outlets[i].as_str(),
                        m.outlets[j].as_str(),
                        m.channel.as_str(),
                        &format!("{k:.12}"),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows `outlet_id,channel,self_salience`.
pub fn write_self_salience_csv(matrices: &[SalienceMatrix], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["outlet_id", "channel", "self_salience"])?;
    for m in matrices {
        for (o, v) in m.outlets.iter().zip(&m.self_salience) {
            w.write_record([o.as_str(), m.channel.as_str(), &format!("{v:.12}")])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads both salience tables back, one matrix per channel found.
pub fn read_salience_csv(
    kappa_path: &Path,
    self_path: &Path,
    outlets: &[String],
) -> Result<BTreeMap<ChannelFilter, SalienceMatrix>> {
    let pos: BTreeMap<&str, usize> = outlets
        .iter()
        .enumerate()
        .map(|(i, o)| (o.as_str(), i))
        .collect();
    let lookup = |s: &str| {
        pos.get(s)
            .copied()
            .ok_or_else(|| Error::UnknownOutlet(s.to_string()))
    };
    let mut out: BTreeMap<ChannelFilter, SalienceMatrix> = BTreeMap::new();
    let mut r = csv::Reader::from_path(self_path)?;
    for row in r.records() {
        let row = row?;
        let ch = ChannelFilter::parse(&row[1])?;
        let v: f64 = row[2].parse().map_err(|_| Error::Parse {
            line: row.position().map_or(0, |p| p.line() as usize),
            message: "bad self_salience".into(),
        })?;
        out.entry(ch)
            .or_insert_with(|| SalienceMatrix::zeros(outlets.to_vec(), ch))
            .self_salience[lookup(&row[0])?] = v;
    }
    let mut r = csv::Reader::from_path(kappa_path)?;
    for row in r.records() {
        let row = row?;
        let ch = ChannelFilter::parse(&row[2])?;
        let v: f64 = row[3].parse().map_err(|_| Error::Parse {
            line: row.position().map_or(0, |p| p.line() as usize),
            message: "bad kappa".into(),
        })?;
        let (i, j) = (lookup(&row[0])?, lookup(&row[1])?);
        out.entry(ch)
            .or_insert_with(|| SalienceMatrix::zeros(outlets.to_vec(), ch))
            .kappa[(i, j)] = v;
    }
    Ok(out)
}
