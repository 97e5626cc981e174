//! HDBSCAN* clustering of reduced embeddings into matched-quote clusters,
//! and pairwise evaluation against labeled truth groups.
//!
//! Merges at exactly equal mutual-reachability distance are processed as one
//! multi-way merge, so the cluster hierarchy depends only on the connected
//! components at each distance level and not on input order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SentimentChannel};
use crate::embed::ReducedMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    ExcessOfMass,
    Leaf,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::ExcessOfMass => "excess_of_mass",
            Selection::Leaf => "leaf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub selection: Selection,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 2,
            min_samples: 1,
            metric: Metric::Euclidean,
            selection: Selection::ExcessOfMass,
        }
    }
}

impl ClusterParams {
    pub fn new(min_cluster_size: usize, min_samples: usize, selection: Selection) -> Self {
        Self {
            min_cluster_size,
            min_samples,
            metric: Metric::Euclidean,
            selection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 {
            return Err(Error::InvalidArgument("min_cluster_size must be >= 2".into()));
        }
        if self.min_samples < 1 || self.min_samples > self.min_cluster_size {
            return Err(Error::InvalidArgument(
                "min_samples must be in 1..=min_cluster_size".into(),
            ));
        }
        Ok(())
    }
}

/// Flat labeling produced by [`hdbscan`].
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster per input row; `None` is noise.
    pub labels: Vec<Option<usize>>,
    /// Membership strength in [0, 1]; 0 for noise.
    pub probabilities: Vec<f64>,
    pub n_clusters: usize,
}

impl Clustering {
    /// Clusters as sorted member index lists, sorted by first member.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                groups[*c].push(i);
            }
        }
        groups.sort();
        groups
    }

    pub fn noise(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i].is_none())
            .collect()
    }

    pub fn write_csv(&self, quote_ids: &[String], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["quote_id", "cluster_id", "probability"])?;
        for (i, id) in quote_ids.iter().enumerate() {
            let label = self.labels[i].map_or(-1, |c| c as i64);
            w.write_record([
                id.clone(),
                label.to_string(),
                format!("{:.6}", self.probabilities[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<(Vec<String>, Clustering)> {
        let mut r = csv::Reader::from_path(path)?;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut probabilities = Vec::new();
        for row in r.records() {
            let row = row?;
            let bad = |m: &str| Error::Parse {
                line: row.position().map_or(0, |p| p.line() as usize),
                message: m.to_string(),
            };
            ids.push(row.get(0).ok_or_else(|| bad("missing quote_id"))?.to_string());
            let label: i64 = row
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad cluster_id"))?;
            labels.push(usize::try_from(label).ok());
            probabilities.push(row.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0));
        }
        let n_clusters = labels.iter().flatten().map(|&c| c + 1).max().unwrap_or(0);
        Ok((
            ids,
            Clustering {
                labels,
                probabilities,
                n_clusters,
            },
        ))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Node {
    children: Vec<usize>,
    weight: f64,
    size: usize,
}

struct CondensedCluster {
    parent: Option<usize>,
    birth: f64,
    children: Vec<usize>,
    /// (point, lambda at which it left this cluster)
    fallen: Vec<(usize, f64)>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Runs HDBSCAN* on the rows of `points`.
///
/// Core distance is the distance to the `min_samples`-th nearest neighbour,
/// counting the point itself. When the hierarchy never splits into two
/// clusters of at least `min_cluster_size`, all points form one cluster.
pub fn hdbscan(points: &ReducedMatrix, params: &ClusterParams) -> Result<Clustering> {
    params.validate()?;
    let n = points.vectors.nrows();
    if n < params.min_cluster_size {
        return Err(Error::InvalidArgument(format!(
            "{n} points but min_cluster_size = {}",
            params.min_cluster_size
        )));
    }
    if points.vectors.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cluster input".into()));
    }
    if points.quote_ids.len() != n {
        return Err(Error::DimensionMismatch("quote_ids vs rows".into()));
    }
    let rows: Vec<Vec<f64>> = points
        .vectors
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();

    // rank of each point by quote id, used for every tie-break
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by(|&a, &b| points.quote_ids[a].cmp(&points.quote_ids[b]));
    let mut rank = vec![0usize; n];
    for (r, &i) in by_id.iter().enumerate() {
        rank[i] = r;
    }

    let core = core_distances(&rows, params.min_samples);
    let (mst, min_positive) = prim_mst(&rows, &core, &rank);
    let lambda_cap = min_positive.map_or(1.0, |w| 2.0 / w);
    let lambda_of = |w: f64| if w > 0.0 { 1.0 / w } else { lambda_cap };

    let nodes = build_hierarchy(n, mst, &rank);
    let clusters = condense(&nodes, n, params.min_cluster_size, lambda_of);
    let selected = select_clusters(&clusters, params.selection);
    Ok(label_points(&clusters, &selected, n, &rank))
}

fn core_distances(rows: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = rows.len();
    let mut buf = Vec::with_capacity(n);
    rows.iter()
        .enumerate()
        .map(|(i, a)| {
            if min_samples <= 1 {
                return 0.0;
            }
            buf.clear();
            buf.extend(
                rows.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, b)| sq_dist(a, b)),
            );
            let k = (min_samples - 2).min(buf.len() - 1);
            let (_, kth, _) = buf.select_nth_unstable_by(k, f64::total_cmp);
            kth.sqrt()
        })
        .collect()
}

/// Dense Prim on mutual reachability. Returns edges and the smallest positive
/// pairwise mutual reachability seen.
fn prim_mst(rows: &[Vec<f64>], core: &[f64], rank: &[usize]) -> (Vec<(usize, usize, f64)>, Option<f64>) {
    let n = rows.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![usize::MAX; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut min_positive: Option<f64> = None;
    // start at the point with the smallest id rank
    let mut current = (0..n).min_by_key(|&i| rank[i]).expect("n >= 2");
    in_tree[current] = true;
    for _ in 1..n {
        let a = &rows[current];
        let mut next = usize::MAX;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let mr = sq_dist(a, &rows[j]).sqrt().max(core[current]).max(core[j]);
            if mr > 0.0 && min_positive.is_none_or(|m| mr < m) {
                min_positive = Some(mr);
            }
            if mr < best[j] || (mr == best[j] && rank[current] < rank[from[j]]) {
                best[j] = mr;
                from[j] = current;
            }
            if next == usize::MAX
                || best[j] < best[next]
                || (best[j] == best[next] && rank[j] < rank[next])
            {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, best[next]));
        current = next;
    }
    (edges, min_positive)
}

/// Single-linkage hierarchy with equal-weight merges fused into one node.
fn build_hierarchy(n: usize, mut mst: Vec<(usize, usize, f64)>, rank: &[usize]) -> Vec<Node> {
    let key = |e: &(usize, usize, f64)| {
        let (a, b) = (rank[e.0], rank[e.1]);
        (a.min(b), a.max(b))
    };
    mst.sort_by(|x, y| x.2.total_cmp(&y.2).then_with(|| key(x).cmp(&key(y))));

    let mut nodes: Vec<Node> = (0..n)
        .map(|_| Node {
            children: Vec::new(),
            weight: 0.0,
            size: 1,
        })
        .collect();
    let mut uf = UnionFind::new(n);
    // union-find root -> hierarchy node currently representing that component
    let mut node_of: Vec<usize> = (0..n).collect();

    let mut start = 0;
    while start < mst.len() {
        let w = mst[start].2;
        let mut end = start;
        while end < mst.len() && mst[end].2 == w {
            end += 1;
        }
        let group = &mst[start..end];
        // components touched by this weight level, before merging
        let mut touched: Vec<usize> = Vec::new();
        for &(a, b, _) in group {
            touched.push(uf.find(a));
            touched.push(uf.find(b));
        }
        touched.sort_unstable();
        touched.dedup();
        let old_node: BTreeMap<usize, usize> =
            touched.iter().map(|&r| (r, node_of[r])).collect();
        for &(a, b, _) in group {
            let ra = uf.find(a);
            let rb = uf.find(b);
            if ra != rb {
                uf.parent[rb] = ra;
            }
        }
        let mut merged: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &r in &touched {
            merged.entry(uf.find(r)).or_default().push(old_node[&r]);
        }
        for (root, children) in merged {
            let size = children.iter().map(|&c| nodes[c].size).sum();
            nodes.push(Node {
                children,
                weight: w,
                size,
            });
            node_of[root] = nodes.len() - 1;
        }
        start = end;
    }
    nodes
}

fn leaves_under(nodes: &[Node], node: usize, n: usize, out: &mut Vec<usize>) {
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            stack.extend(nodes[x].children.iter().copied());
        }
    }
}

fn condense(
    nodes: &[Node],
    n: usize,
    min_cluster_size: usize,
    lambda_of: impl Fn(f64) -> f64,
) -> Vec<CondensedCluster> {
    let root = nodes.len() - 1;
    let mut clusters = vec![CondensedCluster {
        parent: None,
        birth: 0.0,
        children: Vec::new(),
        fallen: Vec::new(),
    }];
    let mut stack = vec![(root, 0usize)];
    let mut pts = Vec::new();
    while let Some((mut node, cid)) = stack.pop() {
        loop {
            if node < n {
                // only reachable when a cluster is a single point
                clusters[cid].fallen.push((node, lambda_of(0.0)));
                break;
            }
            let lambda = lambda_of(nodes[node].weight);
            let children = &nodes[node].children;
            let big: Vec<usize> = children
                .iter()
                .copied()
                .filter(|&c| nodes[c].size >= min_cluster_size)
                .collect();
            for &c in children {
                if nodes[c].size < min_cluster_size {
                    pts.clear();
                    leaves_under(nodes, c, n, &mut pts);
                    clusters[cid].fallen.extend(pts.iter().map(|&p| (p, lambda)));
                }
            }
            match big.len() {
                0 => break,
                1 => node = big[0],
                _ => {
                    for &c in &big {
                        clusters.push(CondensedCluster {
                            parent: Some(cid),
                            birth: lambda,
                            children: Vec::new(),
                            fallen: Vec::new(),
                        });
                        let new_id = clusters.len() - 1;
                        clusters[cid].children.push(new_id);
                        stack.push((c, new_id));
                    }
                    break;
                }
            }
        }
    }
    clusters
}

fn subtree_size(clusters: &[CondensedCluster], c: usize) -> usize {
    clusters[c].fallen.len()
        + clusters[c]
            .children
            .iter()
            .map(|&k| subtree_size(clusters, k))
            .sum::<usize>()
}

fn stability(clusters: &[CondensedCluster], c: usize) -> f64 {
    let birth = clusters[c].birth;
    let own: f64 = clusters[c].fallen.iter().map(|&(_, l)| l - birth).sum();
    let via_children: f64 = clusters[c]
        .children
        .iter()
        .map(|&k| subtree_size(clusters, k) as f64 * (clusters[k].birth - birth))
        .sum();
    own + via_children
}

fn select_clusters(clusters: &[CondensedCluster], selection: Selection) -> Vec<bool> {
    let m = clusters.len();
    let mut selected = vec![false; m];
    if clusters[0].children.is_empty() {
        selected[0] = true;
        return selected;
    }
    match selection {
        Selection::Leaf => {
            for c in 1..m {
                selected[c] = clusters[c].children.is_empty();
            }
        }
        Selection::ExcessOfMass => {
            let mut value = vec![0.0; m];
            // children always have larger ids than their parent
            for c in (1..m).rev() {
                let own = stability(clusters, c);
                if clusters[c].children.is_empty() {
                    value[c] = own;
                    selected[c] = true;
                    continue;
                }
                let below: f64 = clusters[c].children.iter().map(|&k| value[k]).sum();
                if below > own {
                    value[c] = below;
                } else {
                    value[c] = own;
                    selected[c] = true;
                    let mut stack = clusters[c].children.clone();
                    while let Some(k) = stack.pop() {
                        selected[k] = false;
                        stack.extend(clusters[k].children.iter().copied());
                    }
                }
            }
        }
    }
    selected
}

fn label_points(
    clusters: &[CondensedCluster],
    selected: &[bool],
    n: usize,
    rank: &[usize],
) -> Clustering {
    let mut owner = vec![usize::MAX; n];
    let mut point_lambda = vec![0.0; n];
    for (c, cl) in clusters.iter().enumerate() {
        for &(p, l) in &cl.fallen {
            point_lambda[p] = l;
            let mut cur = Some(c);
            while let Some(x) = cur {
                if selected[x] {
                    owner[p] = x;
                    break;
                }
                cur = clusters[x].parent;
            }
        }
    }
    // relabel selected clusters by their smallest member id rank
    let mut first_rank: BTreeMap<usize, usize> = BTreeMap::new();
    for p in 0..n {
        if owner[p] != usize::MAX {
            let e = first_rank.entry(owner[p]).or_insert(usize::MAX);
            *e = (*e).min(rank[p]);
        }
    }
    let mut order: Vec<(usize, usize)> = first_rank.iter().map(|(&c, &r)| (r, c)).collect();
    order.sort_unstable();
    let relabel: BTreeMap<usize, usize> = order
        .iter()
        .enumerate()
        .map(|(new, &(_, c))| (c, new))
        .collect();
    let mut max_lambda: BTreeMap<usize, f64> = BTreeMap::new();
    for p in 0..n {
        if owner[p] != usize::MAX {
            let e = max_lambda.entry(owner[p]).or_insert(0.0);
            *e = f64::max(*e, point_lambda[p]);
        }
    }
    let labels: Vec<Option<usize>> = owner
        .iter()
        .map(|&o| (o != usize::MAX).then(|| relabel[&o]))
        .collect();
    let probabilities = (0..n)
        .map(|p| {
            if owner[p] == usize::MAX {
                return 0.0;
            }
            let max = max_lambda[&owner[p]];
            if max > 0.0 {
                (point_lambda[p] / max).min(1.0)
            } else {
                1.0
            }
        })
        .collect();
    Clustering {
        labels,
        probabilities,
        n_clusters: relabel.len(),
    }
}

/// A set of records judged to be the same quotation.
#[derive(Debug, Clone, PartialEq)]
pub struct QuoteCluster {
    pub cluster_id: usize,
    pub members: Vec<String>,
    /// Usage times per outlet, ascending.
    pub usage: BTreeMap<String, Vec<DateTime<Utc>>>,
    /// Majority sentiment of the members; ties resolve to neutral.
    pub channel: SentimentChannel,
}

impl QuoteCluster {
    /// Number of distinct outlets that used the quote.
    pub fn s_q(&self) -> usize {
        self.usage.len()
    }

    pub fn uses(&self, outlet: &str) -> &[DateTime<Utc>] {
        self.usage.get(outlet).map_or(&[], Vec::as_slice)
    }
}

/// Groups corpus records by cluster label. Noise records are not clusters.
pub fn quote_clusters(
    corpus: &Corpus,
    quote_ids: &[String],
    clustering: &Clustering,
) -> Result<Vec<QuoteCluster>> {
    let by_id: BTreeMap<&str, usize> = corpus
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.quote_id.as_str(), i))
        .collect();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, id) in quote_ids.iter().enumerate() {
        let rec = *by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("quote `{id}` not in corpus")))?;
        if let Some(c) = clustering.labels.get(row).copied().flatten() {
            groups.entry(c).or_default().push(rec);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(cluster_id, recs)| {
            let mut usage: BTreeMap<String, Vec<DateTime<Utc>>> = BTreeMap::new();
            let mut votes: BTreeMap<SentimentChannel, usize> = BTreeMap::new();
            let mut members = Vec::with_capacity(recs.len());
            for &i in &recs {
                let r = &corpus.records()[i];
                usage.entry(r.outlet_id.clone()).or_default().push(r.published_at);
                *votes.entry(r.sentiment_channel).or_default() += 1;
                members.push(r.quote_id.clone());
            }
            usage.values_mut().for_each(|v| v.sort());
            members.sort();
            let top = votes.values().copied().max().unwrap_or(0);
            let winners: Vec<SentimentChannel> = votes
                .iter()
                .filter(|&(_, &v)| v == top)
                .map(|(&c, _)| c)
                .collect();
            let channel = if winners.len() == 1 {
                winners[0]
            } else {
                SentimentChannel::Neutral
            };
            QuoteCluster {
                cluster_id,
                members,
                usage,
                channel,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchEvaluation {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// Set when TP + FP = 0; precision is then reported as 1.
    pub no_positive_pairs: bool,
    /// Set when TP + FN = 0; recall is then reported as 1.
    pub no_truth_pairs: bool,
}

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Pairwise precision/recall of `predicted` over the quotes in `truth`.
///
/// Noise (`None`) predictions are singletons.
pub fn evaluate_matching(
    predicted: &BTreeMap<String, Option<usize>>,
    truth: &[Vec<String>],
) -> Result<MatchEvaluation> {
    if truth.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("empty truth set".into()));
    }
    let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut pred_sizes: BTreeMap<usize, u64> = BTreeMap::new();
    let mut truth_pairs = 0;
    let mut n = 0u64;
    // noise points get fresh ids past every real cluster id
    let mut next_singleton = predicted.values().flatten().max().map_or(0, |m| m + 1);
    let mut seen = BTreeSet::new();
    for (g, group) in truth.iter().enumerate() {
        truth_pairs += pairs(group.len() as u64);
        for q in group {
            if !seen.insert(q.as_str()) {
                return Err(Error::DuplicateId(q.clone()));
            }
            let label = predicted
                .get(q)
                .ok_or_else(|| Error::InvalidArgument(format!("truth quote `{q}` has no prediction")))?;
            let p = label.unwrap_or_else(|| {
                next_singleton += 1;
                next_singleton - 1
            });
            *cells.entry((p, g)).or_default() += 1;
            *pred_sizes.entry(p).or_default() += 1;
            n += 1;
        }
    }
    let tp: u64 = cells.values().map(|&c| pairs(c)).sum();
    let pred_pairs: u64 = pred_sizes.values().map(|&c| pairs(c)).sum();
    let fp = pred_pairs - tp;
    let fn_ = truth_pairs - tp;
    let all = pairs(n);
    let tn = all - tp - fp - fn_;
    let no_positive_pairs = tp + fp == 0;
    let no_truth_pairs = tp + fn_ == 0;
    Ok(MatchEvaluation {
        tp,
        fp,
        fn_,
        tn,
        precision: if no_positive_pairs { 1.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: if no_truth_pairs { 1.0 } else { tp as f64 / (tp + fn_) as f64 },
        accuracy: if all == 0 { 1.0 } else { (tp + tn) as f64 / all as f64 },
        no_positive_pairs,
        no_truth_pairs,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub params: ClusterParams,
    pub outcome: std::result::Result<MatchEvaluation, String>,
}

/// Evaluates every parameter setting; failures are recorded per row.
/// Rows are sorted by recall, failed rows last.
pub fn sweep(
    points: &ReducedMatrix,
    grid: &[ClusterParams],
    truth: &[Vec<String>],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty parameter grid".into()));
    }
    if truth.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("empty truth set".into()));
    }
    let mut rows: Vec<SweepRow> = grid
        .iter()
        .map(|params| {
            let outcome = hdbscan(points, params)
                .and_then(|c| {
                    let predicted = points
                        .quote_ids
                        .iter()
                        .cloned()
                        .zip(c.labels.iter().copied())
                        .collect();
                    evaluate_matching(&predicted, truth)
                })
                .map_err(|e| e.to_string());
            SweepRow {
                params: *params,
                outcome,
            }
        })
        .collect();
    rows.sort_by(|a, b| match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => x.recall.total_cmp(&y.recall),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => std::cmp::Ordering::Equal,
    });
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "min_cluster_size",
        "min_samples",
        "selection",
        "tp",
        "fp",
        "fn",
        "tn",
        "precision",
        "recall",
        "accuracy",
        "error",
    ])?;
    for row in rows {
        let p = &row.params;
        let mut rec = vec![
            p.min_cluster_size.to_string(),
            p.min_samples.to_string(),
            p.selection.as_str().to_string(),
        ];
        match &row.outcome {
            Ok(m) => {
                rec.extend([
                    m.tp.to_string(),
                    m.fp.to_string(),
                    m.fn_.to_string(),
                    m.tn.to_string(),
                    format!("{:.6}", m.precision),
                    format!("{:.6}", m.recall),
                    format!("{:.6}", m.accuracy),
                    String::new(),
                ]);
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()
        .map_err(|e| Error::Internal(format!("writing sweep table: {e}")))
}

/// Reads `quote_id,group` rows into truth groups.
pub fn read_truth_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        match (row.get(0), row.get(1)) {
            (Some(q), Some(g)) => groups.entry(g.to_string()).or_default().push(q.to_string()),
            _ => {
                return Err(Error::Parse {
                    line: row.position().map_or(0, |p| p.line() as usize),
                    message: "expected quote_id,group".into(),
                })
            }
        }
    }
    Ok(groups.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn pts(rows: &[Vec<f64>]) -> ReducedMatrix {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        ReducedMatrix::from_points(
            (0..rows.len()).map(|i| format!("q{i:03}")).collect(),
            DMatrix::from_row_slice(rows.len(), d, &flat),
        )
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let rows = vec![vec![1.0, 2.0]; 10];
        let c = hdbscan(&pts(&rows), &ClusterParams::new(5, 5, Selection::ExcessOfMass)).unwrap();
        assert_eq!(c.n_clusters, 1);
        assert!(c.noise().is_empty());
    }

    #[test]
    fn too_few_points() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.0]).collect();
        assert!(hdbscan(&pts(&rows), &ClusterParams::new(7, 1, Selection::ExcessOfMass)).is_err());
    }

    #[test]
    fn param_validation() {
        assert!(ClusterParams::new(1, 1, Selection::Leaf).validate().is_err());
        assert!(ClusterParams::new(3, 4, Selection::Leaf).validate().is_err());
        assert!(ClusterParams::new(3, 0, Selection::Leaf).validate().is_err());
        assert!(ClusterParams::new(3, 3, Selection::Leaf).validate().is_ok());
    }

    #[test]
    fn non_finite_rejected() {
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.0]).collect();
        rows[2][1] = f64::INFINITY;
        assert!(matches!(
            hdbscan(&pts(&rows), &ClusterParams::default()),
            Err(Error::NonFinite(_))
        ));
    }

    fn predicted(groups: &[&[&str]]) -> BTreeMap<String, Option<usize>> {
        groups
            .iter()
            .enumerate()
            .flat_map(|(c, g)| g.iter().map(move |q| (q.to_string(), Some(c))))
            .collect()
    }

    fn truth(groups: &[&[&str]]) -> Vec<Vec<String>> {
        groups
            .iter()
            .map(|g| g.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn perfect_prediction() {
        let t = truth(&[&["a", "b"], &["c", "d", "e"]]);
        let m = evaluate_matching(&predicted(&[&["a", "b"], &["c", "d", "e"]]), &t).unwrap();
        assert_eq!((m.precision, m.recall, m.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn merged_prediction_counts() {
        // pairs ab (TP), ac (FP), bc (FP)
        let t = truth(&[&["a", "b"], &["c"]]);
        let m = evaluate_matching(&predicted(&[&["a", "b", "c"]]), &t).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 2, 0, 0));
        assert!((m.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 1.0);
    }

    #[test]
    fn empty_positive_convention() {
        let t = truth(&[&["a", "b"], &["c", "d"]]);
        let m = evaluate_matching(&predicted(&[&["a"], &["b"], &["c"], &["d"]]), &t).unwrap();
        assert!(m.no_positive_pairs);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 0.0);
        let mut noise = predicted(&[]);
        for q in ["a", "b", "c", "d"] {
            noise.insert(q.into(), None);
        }
        let m2 = evaluate_matching(&noise, &t).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn missing_and_empty_truth() {
        let t = truth(&[&["a", "z"]]);
        assert!(evaluate_matching(&predicted(&[&["a"]]), &t).is_err());
        assert!(evaluate_matching(&predicted(&[&["a"]]), &[]).is_err());
    }

    #[test]
    fn merging_truth_clusters_never_lowers_recall() {
        let t = truth(&[&["a", "b", "c"], &["d", "e"], &["f"]]);
        let split = evaluate_matching(&predicted(&[&["a", "b"], &["c"], &["d"], &["e", "f"]]), &t).unwrap();
        let merged = evaluate_matching(&predicted(&[&["a", "b", "c"], &["d"], &["e", "f"]]), &t).unwrap();
        assert!(merged.recall >= split.recall);
    }

    #[test]
    fn sweep_single_row_and_errors() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![(i / 4) as f64 * 10.0 + (i % 4) as f64 * 0.1]).collect();
        let p = pts(&rows);
        let t: Vec<Vec<String>> = vec![
            (0..4).map(|i| format!("q{i:03}")).collect(),
            (4..8).map(|i| format!("q{i:03}")).collect(),
        ];
        let one = sweep(&p, &[ClusterParams::new(3, 2, Selection::ExcessOfMass)], &t).unwrap();
        assert_eq!(one.len(), 1);
        let m = one[0].outcome.as_ref().unwrap();
        assert_eq!((m.precision, m.recall), (1.0, 1.0));
        let two = sweep(
            &p,
            &[
                ClusterParams::new(20, 2, Selection::ExcessOfMass),
                ClusterParams::new(3, 2, Selection::Leaf),
            ],
            &t,
        )
        .unwrap();
        assert!(two[0].outcome.is_ok());
        assert!(two[1].outcome.is_err());
        assert!(sweep(&p, &[], &t).is_err());
        assert!(sweep(&p, &[ClusterParams::default()], &[]).is_err());
        let mut buf = Vec::new();
        write_sweep_csv(&two, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
