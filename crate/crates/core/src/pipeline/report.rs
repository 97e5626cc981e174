//! Report tables built from the impact estimates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::ReportSettings;
use crate::causal::{group_report, normalized_summary, slant_and_totals, write_group_csv, ImpactEstimate, ImpactMatrix};
use crate::cluster::QuoteCluster;
use crate::corpus::{Corpus, QuoteRecord, SentimentChannel};
use crate::error::{Error, Result};
use crate::netbuild::{export_graph, EdgeImpacts, InfluenceNetwork};
use crate::salience::{per_quote_salience, ChannelFilter, SalienceConfig, SalienceMatrix};

pub(super) struct ReportInputs<'a> {
    pub corpus: &'a Corpus,
    /// Records admitted by the report filter.
    pub filtered: &'a Corpus,
    pub outlets: &'a [String],
    /// Quote clusters of the filtered records.
    pub clusters: &'a [QuoteCluster],
    pub salience: &'a BTreeMap<ChannelFilter, SalienceMatrix>,
    pub salience_cfg: &'a SalienceConfig,
    pub network: &'a InfluenceNetwork,
    pub impacts: &'a [(ChannelFilter, Vec<ImpactEstimate>)],
    pub settings: &'a ReportSettings,
}

fn f(x: f64) -> String {
    format!("{x:.6}")
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn write_pairs(path: &Path, outlets: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "target", "value"])?;
    for (i, s) in outlets.iter().enumerate() {
        for (j, t) in outlets.iter().enumerate() {
            if i != j {
                w.write_record([s.as_str(), t.as_str(), &f(m[(i, j)])])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(super) fn write_report(r: &ReportInputs<'_>, dir: &Path) -> Result<()> {
    let n = r.outlets.len();
    let matrices: Vec<(ChannelFilter, ImpactMatrix)> = r
        .impacts
        .iter()
        .map(|(ch, rows)| Ok((*ch, ImpactMatrix::from_estimates(r.outlets, rows)?)))
        .collect::<Result<_>>()?;
    let find = |c: SentimentChannel| matrices.iter().find(|(ch, _)| *ch == ChannelFilter::Only(c)).map(|(_, m)| m);
    let analytics = match (find(SentimentChannel::ProA), find(SentimentChannel::ProB)) {
        (Some(a), Some(b)) => Some(slant_and_totals(a, b)?),
        _ => {
            log::info!("report: slant tables need both pro_a and pro_b; skipped");
            None
        }
    };

    let mut w = csv::Writer::from_path(dir.join("outlet_summary.csv"))?;
    let mut header = vec!["outlet_id".to_string(), "name".into(), "country".into(), "orientation".into()];
    header.extend(matrices.iter().map(|(ch, _)| format!("impact_{}", ch.as_str())));
    if analytics.is_some() {
        header.extend(["slant".to_string(), "total".to_string()]);
    }
    w.write_record(&header)?;
    for (i, o) in r.corpus.outlets().iter().enumerate() {
        let mut row = vec![o.outlet_id.clone(), o.name.clone(), o.country.clone(), o.orientation.to_string()];
        row.extend(matrices.iter().map(|(_, m)| f(m.values.row(i).sum())));
        if let Some(a) = &analytics {
            row.extend([f(a.outlet_slant[i]), f(a.outlet_total[i])]);
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    if let Some(a) = &analytics {
        write_pairs(&dir.join("pair_slant.csv"), r.outlets, &a.slant)?;
        write_pairs(&dir.join("pair_total.csv"), r.outlets, &a.total)?;
        write_pairs(&dir.join("differential.csv"), r.outlets, &a.differential)?;
    }

    // quotes used vs impact exerted
    let mut w = csv::Writer::from_path(dir.join("quotes_vs_impact.csv"))?;
    w.write_record(["channel", "outlet_id", "quotes", "kappa_out", "impact_out"])?;
    let mut cw = csv::Writer::from_path(dir.join("quotes_vs_impact_correlation.csv"))?;
    cw.write_record(["channel", "outlets", "pearson_quotes_impact", "pearson_kappa_impact"])?;
    for (ch, m) in &matrices {
        let sal = &r.salience[ch];
        let (mut quotes, mut kappa, mut impact) = (Vec::new(), Vec::new(), Vec::new());
        for (i, o) in r.outlets.iter().enumerate() {
            let q = r.filtered.records_of(o).filter(|rec| ch.admits(rec.sentiment_channel)).count() as f64;
            let k: f64 = (0..n).filter(|&j| j != i).map(|j| sal.kappa[(i, j)]).sum();
            let z = m.values.row(i).sum();
            w.write_record([ch.as_str(), o.as_str(), &q.to_string(), &f(k), &f(z)])?;
            quotes.push(q);
            kappa.push(k);
            impact.push(z);
        }
        let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
        cw.write_record([
            ch.as_str().to_string(),
            n.to_string(),
            opt(pearson(&quotes, &impact)),
            opt(pearson(&kappa, &impact)),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    cw.flush().map_err(|e| Error::io(dir, e))?;

    // impact network
    let mut total = DMatrix::zeros(n, n);
    for (_, m) in &matrices {
        total += &m.values;
    }
    let slant = analytics.as_ref().map_or_else(|| DMatrix::zeros(n, n), |a| a.slant.clone());
    let total = analytics.as_ref().map_or(total, |a| a.total.clone());
    let names: Vec<String> = r.corpus.outlets().iter().map(|o| o.name.clone()).collect();
    let dot = export_graph(r.network, Some(&names), Some(&EdgeImpacts { total, slant }));
    let path = dir.join("impact_network.dot");
    fs::write(&path, dot).map_err(|e| Error::io(&path, e))?;

    write_top_quotes(r, &matrices, &dir.join("top_quotes.csv"))?;

    let all_rows: Vec<ImpactEstimate> = r.impacts.iter().flat_map(|(_, rows)| rows.iter().cloned()).collect();
    for g in &r.settings.groupings {
        let rows = group_report(&all_rows, r.corpus.outlets(), *g)?;
        write_group_csv(&rows, &dir.join(format!("groups_{}.csv", g.as_str())))?;
    }

    let mut w = csv::Writer::from_path(dir.join("normalized_summary.csv"))?;
    w.write_record(["channel", "source", "pairs", "unweighted_mean", "kappa_weighted_mean", "out_of_range"])?;
    for s in normalized_summary(&all_rows) {
        w.write_record([
            s.channel,
            s.source,
            s.pairs.to_string(),
            f(s.unweighted_mean),
            f(s.kappa_weighted_mean),
            s.out_of_range.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))
}

/// Clusters ranked by their share of each outlet's positive impact. A
/// cluster's share of pair `(i, j)` is its fraction of `kappa_ij`.
pub(super) fn top_quotes(
    i: usize,
    outlets: &[String],
    impact: &DMatrix<f64>,
    kappa: &DMatrix<f64>,
    clusters: &[&QuoteCluster],
    cfg: &SalienceConfig,
    limit: usize,
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = clusters
        .iter()
        .enumerate()
        .filter(|(_, q)| !q.uses(&outlets[i]).is_empty())
        .map(|(k, q)| {
            let c: f64 = (0..outlets.len())
                .filter(|&j| j != i && kappa[(i, j)] > 0.0 && impact[(i, j)] > 0.0)
                .map(|j| impact[(i, j)] * per_quote_salience(q, &outlets[i], &outlets[j], cfg) / kappa[(i, j)])
                .sum();
            (k, c)
        })
        .filter(|&(_, c)| c > 0.0)
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(clusters[a.0].cluster_id.cmp(&clusters[b.0].cluster_id)));
    scored.truncate(limit);
    scored
}

fn write_top_quotes(r: &ReportInputs<'_>, matrices: &[(ChannelFilter, ImpactMatrix)], path: &Path) -> Result<()> {
    let by_id: BTreeMap<&str, &QuoteRecord> = r.filtered.records().iter().map(|q| (q.quote_id.as_str(), q)).collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["channel", "outlet_id", "rank", "cluster_id", "contribution", "quote_id", "text"])?;
    for (ch, m) in matrices {
        let admitted: Vec<&QuoteCluster> = r.clusters.iter().filter(|q| ch.admits(q.channel)).collect();
        let kappa = &r.salience[ch].kappa;
        for (i, o) in r.outlets.iter().enumerate() {
            let ranked = top_quotes(i, r.outlets, &m.values, kappa, &admitted, r.salience_cfg, r.settings.top_quotes);
            for (rank, (k, c)) in ranked.into_iter().enumerate() {
                let q = admitted[k];
                // the outlet's earliest record of this quote
                let rep = q
                    .members
                    .iter()
                    .filter_map(|id| by_id.get(id.as_str()))
                    .filter(|rec| rec.outlet_id == *o)
                    .min_by(|a, b| a.published_at.cmp(&b.published_at).then(a.quote_id.cmp(&b.quote_id)));
                let (qid, text) = rep.map_or((String::new(), String::new()), |rec| (rec.quote_id.clone(), rec.text.clone()));
                w.write_record([
                    ch.as_str().to_string(),
                    o.clone(),
                    (rank + 1).to_string(),
                    q.cluster_id.to_string(),
                    f(c),
                    qid,
                    text,
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
