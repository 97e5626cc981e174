//! Influence network prior, node covariates and graph export.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::salience::SalienceMatrix;

/// Directed weighted network; `adjacency[(i, j)]` is the edge `i -> j`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceNetwork {
    pub outlets: Vec<String>,
    pub adjacency: DMatrix<f64>,
    /// Poisson prior rate per edge; a zero rate pins the edge to zero.
    pub prior_rate: DMatrix<f64>,
}

impl InfluenceNetwork {
    pub fn n(&self) -> usize {
        self.outlets.len()
    }

    /// Edges with positive prior rate, row-major.
    pub fn free_edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.prior_rate[(i, j)] > 0.0)
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&w| w > 0.0).count()
    }
}

pub fn build_network(kappa: &SalienceMatrix) -> Result<InfluenceNetwork> {
    network_from_matrix(kappa.outlets.clone(), kappa.kappa.clone())
}

pub fn network_from_matrix(outlets: Vec<String>, kappa: DMatrix<f64>) -> Result<InfluenceNetwork> {
    let n = outlets.len();
    if kappa.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix for {n} outlets",
            kappa.nrows(),
            kappa.ncols()
        )));
    }
    if kappa.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("salience matrix".into()));
    }
    if kappa.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument("negative salience entry".into()));
    }
    if (0..n).any(|i| kappa[(i, i)] != 0.0) {
        return Err(Error::InvalidArgument("nonzero self-influence".into()));
    }
    Ok(InfluenceNetwork {
        outlets,
        adjacency: kappa.clone(),
        prior_rate: kappa,
    })
}

/// Per-outlet confounders: weighted degrees and blockmodel community.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCovariates {
    pub outlets: Vec<String>,
    pub in_degree: Vec<f64>,
    pub out_degree: Vec<f64>,
    pub community: Vec<usize>,
    pub n_communities: usize,
}

impl NodeCovariates {
    pub fn from_partition(
        net: &InfluenceNetwork,
        community: Vec<usize>,
        n_communities: usize,
    ) -> Result<Self> {
        let n = net.n();
        if community.len() != n || community.iter().any(|&c| c >= n_communities) {
            return Err(Error::InvalidArgument("community labels do not fit the network".into()));
        }
        let a = &net.adjacency;
        Ok(Self {
            outlets: net.outlets.clone(),
            in_degree: (0..n).map(|j| a.column(j).sum()).collect(),
            out_degree: (0..n).map(|i| a.row(i).sum()).collect(),
            community,
            n_communities,
        })
    }

    pub fn one_hot(&self, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_communities];
        v[self.community[j]] = 1.0;
        v
    }

    /// Regression design: standardized `log1p` degrees, then one indicator per
    /// occupied community except the lowest-numbered one. Constant columns are
    /// dropped.
    pub fn design_matrix(&self) -> (DMatrix<f64>, Vec<String>) {
        let n = self.outlets.len();
        let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, deg) in [("log_in_degree", &self.in_degree), ("log_out_degree", &self.out_degree)] {
            let x: Vec<f64> = deg.iter().map(|d| d.ln_1p()).collect();
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-12 {
                let sd = var.sqrt();
                cols.push((name.to_string(), x.iter().map(|v| (v - mean) / sd).collect()));
            }
        }
        let mut occupied: Vec<usize> = self.community.clone();
        occupied.sort_unstable();
        occupied.dedup();
        for &c in occupied.iter().skip(1) {
            cols.push((
                format!("community_{c}"),
                self.community.iter().map(|&k| f64::from(u8::from(k == c))).collect(),
            ));
        }
        let mut m = DMatrix::zeros(n, cols.len());
        for (k, (_, v)) in cols.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                m[(j, k)] = *x;
            }
        }
        (m, cols.into_iter().map(|(n, _)| n).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["outlet_id", "in_degree", "out_degree", "community"])?;
        for j in 0..self.outlets.len() {
            w.write_record([
                self.outlets[j].clone(),
                format!("{:.12}", self.in_degree[j]),
                format!("{:.12}", self.out_degree[j]),
                self.community[j].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, n_communities: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut cov = NodeCovariates {
            outlets: vec![],
            in_degree: vec![],
            out_degree: vec![],
            community: vec![],
            n_communities,
        };
        for row in r.records() {
            let row = row?;
            let bad = || Error::Parse {
                line: row.position().map_or(0, |p| p.line() as usize),
                message: "bad covariate row".into(),
            };
            cov.outlets.push(row[0].to_string());
            cov.in_degree.push(row[1].parse().map_err(|_| bad())?);
            cov.out_degree.push(row[2].parse().map_err(|_| bad())?);
            let c: usize = row[3].parse().map_err(|_| bad())?;
            cov.community.push(c);
            cov.n_communities = cov.n_communities.max(c + 1);
        }
        Ok(cov)
    }
}

/// Degree-corrected Poisson blockmodel profile log-likelihood
/// `sum_rs m_rs ln(m_rs / (k_r k_s))` of a partition of symmetric weights.
pub fn dcsbm_log_likelihood(weights: &DMatrix<f64>, community: &[usize], c: usize) -> f64 {
    let m = block_totals(weights, community, c);
    likelihood_from_blocks(&m)
}

fn block_totals(w: &DMatrix<f64>, community: &[usize], c: usize) -> DMatrix<f64> {
    let n = community.len();
    let mut m = DMatrix::zeros(c, c);
    for i in 0..n {
        for j in 0..n {
            let x = w[(i, j)];
            if x != 0.0 {
                m[(community[i], community[j])] += x;
            }
        }
    }
    m
}

fn likelihood_from_blocks(m: &DMatrix<f64>) -> f64 {
    let c = m.nrows();
    let k: Vec<f64> = (0..c).map(|r| m.row(r).sum()).collect();
    let mut l = 0.0;
    for r in 0..c {
        for s in 0..c {
            let x = m[(r, s)];
            if x > 0.0 {
                l += x * (x / (k[r] * k[s])).ln();
            }
        }
    }
    l
}

#[derive(Debug, Clone)]
pub struct CommunityFit {
    pub covariates: NodeCovariates,
    pub log_likelihood: f64,
    /// Log-likelihood after each refinement pass of the winning restart.
    pub trace: Vec<f64>,
}

/// Fits a degree-corrected blockmodel with `c` communities to the symmetrized
/// network. Restart 0 starts from a spectral embedding, the rest from random
/// partitions; the best likelihood wins, earlier restarts on ties.
pub fn detect_communities(
    net: &InfluenceNetwork,
    c: usize,
    seed: u64,
    restarts: usize,
) -> Result<CommunityFit> {
    let n = net.n();
    if c == 0 || c > n {
        return Err(Error::InvalidArgument(format!(
            "{c} communities for {n} nodes"
        )));
    }
    let w = &net.adjacency + net.adjacency.transpose();
    let restarts = restarts.max(1);
    let runs: Vec<(Vec<usize>, f64, Vec<f64>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..restarts)
            .map(|r| {
                let w = &w;
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(crate::split_seed(seed, r as u64));
                    let init = if r == 0 {
                        spectral_init(w, c, &mut rng)
                    } else {
                        (0..n).map(|_| rng.gen_range(0..c)).collect()
                    };
                    refine(w, init, c)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("restart thread panicked"))
            .collect()
    });
    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.1 > runs[best].1 + 1e-9 {
            best = r;
        }
    }
    let (community, log_likelihood, trace) = runs.into_iter().nth(best).expect("at least one run");
    let community = canonical_labels(&community);
    Ok(CommunityFit {
        covariates: NodeCovariates::from_partition(net, community, c)?,
        log_likelihood,
        trace,
    })
}

/// Relabels so that communities are numbered by first appearance.
pub fn canonical_labels(community: &[usize]) -> Vec<usize> {
    let mut map = std::collections::BTreeMap::new();
    community
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Greedy single-node moves until no move improves the likelihood.
fn refine(w: &DMatrix<f64>, mut community: Vec<usize>, c: usize) -> (Vec<usize>, f64, Vec<f64>) {
    let n = community.len();
    let mut m = block_totals(w, &community, c);
    let mut current = likelihood_from_blocks(&m);
    let mut trace = vec![current];
    for _pass in 0..200 {
        let mut improved = false;
        for v in 0..n {
            let mut to_group = vec![0.0; c];
            for j in 0..n {
                to_group[community[j]] += w[(v, j)];
            }
            let a = community[v];
            let mut removed = m.clone();
            for s in 0..c {
                removed[(a, s)] -= to_group[s];
                removed[(s, a)] -= to_group[s];
            }
            let mut best = (a, current);
            for b in 0..c {
                if b == a {
                    continue;
                }
                let mut cand = removed.clone();
                for s in 0..c {
                    cand[(b, s)] += to_group[s];
                    cand[(s, b)] += to_group[s];
                }
                let l = likelihood_from_blocks(&cand);
                if l > best.1 + 1e-10 * (1.0 + best.1.abs()) {
                    best = (b, l);
                }
            }
            if best.0 != a {
                community[v] = best.0;
                // rebuild exactly to keep block totals free of drift
                m = block_totals(w, &community, c);
                current = likelihood_from_blocks(&m);
                improved = true;
            }
        }
        trace.push(current);
        if !improved {
            break;
        }
    }
    (community, current, trace)
}

fn spectral_init(w: &DMatrix<f64>, c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = w.nrows();
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let norm = DMatrix::from_fn(n, n, |i, j| {
        if deg[i] > 0.0 && deg[j] > 0.0 {
            w[(i, j)] / (deg[i] * deg[j]).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(norm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = order.iter().take(c).map(|&k| eig.eigenvectors[(i, k)]).collect();
            let len = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len > 0.0 {
                row.iter_mut().for_each(|x| *x /= len);
            }
            row
        })
        .collect();
    kmeans(&pts, c, rng)
}

fn kmeans(pts: &[Vec<f64>], c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = pts.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![pts[rng.gen_range(0..n)].clone()];
    while centers.len() < c {
        let d: Vec<f64> = pts
            .iter()
            .map(|p| centers.iter().map(|ctr| dist(p, ctr)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &x) in d.iter().enumerate() {
                if u < x {
                    idx = i;
                    break;
                }
                u -= x;
            }
            idx
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx[0]
        };
        centers.push(pts[pick].clone());
    }
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let mut best = 0;
            for k in 1..c {
                if dist(p, &centers[k]) < dist(p, &centers[best]) {
                    best = k;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..center.len() {
                center[d] = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Edge annotations for the impact network export.
#[derive(Debug, Clone)]
pub struct EdgeImpacts {
    pub total: DMatrix<f64>,
    pub slant: DMatrix<f64>,
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT export. Without impacts, one edge per positive adjacency entry. With
/// impacts, edges with nonzero total impact are added and every edge carries
/// `total_impact` and `slant`.
pub fn export_graph(net: &InfluenceNetwork, labels: Option<&[String]>, impacts: Option<&EdgeImpacts>) -> String {
    let n = net.n();
    let mut out = String::from("digraph influence {\n");
    for (i, id) in net.outlets.iter().enumerate() {
        let label = labels.map_or(id.as_str(), |l| l[i].as_str());
        let _ = writeln!(out, "  {} [label={}];", quote(id), quote(label));
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = net.adjacency[(i, j)];
            let total = impacts.map_or(0.0, |m| m.total[(i, j)]);
            if w <= 0.0 && total == 0.0 {
                continue;
            }
            let mut attrs = format!("weight={w:.6}");
            if let Some(m) = impacts {
                let _ = write!(attrs, ", total_impact={:.6}, slant={:.6}", total, m.slant[(i, j)]);
            }
            let _ = writeln!(
                out,
                "  {} -> {} [{attrs}];",
                quote(&net.outlets[i]),
                quote(&net.outlets[j])
            );
        }
    }
    out.push_str("}\n");
    out
}
