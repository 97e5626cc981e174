//! Synthetic media ecosystems with known ground truth.
//!
//! Outlets sit in planted communities. A latent network is drawn from
//! community-dependent intensities, outcomes follow the causal module's
//! Poisson GLMM, and a quotation corpus is generated from cascades whose
//! follower choice tracks the same rates.

use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::causal::{
    compute_exposures, linear_predictor, CausalData, ExposureTensor, GlmmParams, TreatmentVector, EPS_VARIANCE,
    OUTCOME_SCALE,
};
use crate::corpus::{Corpus, Orientation, Outlet, QuoteRecord, SentimentChannel};
use crate::error::{Error, Result};
use crate::netbuild::{network_from_matrix, InfluenceNetwork, NodeCovariates};

/// Quote texts of one family and the (outlet, time) of each mention.
type Family = (Vec<String>, Vec<(usize, DateTime<Utc>)>);

/// Monte-Carlo replicates used by [`oracle_impact`].
pub const ORACLE_REPLICATES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CommunitySpec {
    pub sizes: Vec<usize>,
    /// Probability of an edge between two outlets of the same community.
    pub p_in: f64,
    pub p_out: f64,
    /// Present edges get an intensity uniform in `[weight_min, weight_max)`.
    pub weight_min: f64,
    pub weight_max: f64,
}

impl Default for CommunitySpec {
    fn default() -> Self {
        Self {
            sizes: vec![15, 15],
            p_in: 0.3,
            p_out: 0.0,
            weight_min: 1.0,
            weight_max: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrueParams {
    pub tau: f64,
    pub gamma: Vec<f64>,
    pub mu: f64,
    /// Additive log-rate offset per community.
    pub community_effects: Vec<f64>,
}

impl Default for TrueParams {
    fn default() -> Self {
        Self {
            tau: 1.5,
            gamma: vec![0.5, 0.5],
            mu: 0.2,
            community_effects: vec![0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelMix {
    pub pro_a: f64,
    pub pro_b: f64,
}

impl Default for ChannelMix {
    fn default() -> Self {
        Self { pro_a: 0.4, pro_b: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_outlets: usize,
    /// Total quotation records in the generated corpus.
    pub n_quotes: usize,
    /// Number of paraphrase families (distinct underlying quotations).
    pub n_families: usize,
    pub truth: TrueParams,
    pub communities: CommunitySpec,
    pub channel_mix: ChannelMix,
    /// Success probability of the truncated geometric cascade-size law.
    pub cascade_p: f64,
    /// Relative weight of baseline-only following in cascades.
    pub background: f64,
    /// Prior intensity given to pairs without a true edge.
    pub prior_leak: f64,
    /// Independent outcome replicates per source analysis.
    pub replicates: usize,
    pub topics: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_outlets: 30,
            n_quotes: 2000,
            n_families: 300,
            truth: TrueParams::default(),
            communities: CommunitySpec::default(),
            channel_mix: ChannelMix::default(),
            cascade_p: 0.2,
            background: 0.01,
            prior_leak: 0.0,
            replicates: 1,
            topics: 3,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_outlets == 0 {
            p.push("n_outlets must be positive".to_string());
        }
        if self.communities.sizes.iter().sum::<usize>() != self.n_outlets {
            p.push(format!(
                "community sizes sum to {}, not n_outlets = {}",
                self.communities.sizes.iter().sum::<usize>(),
                self.n_outlets
            ));
        }
        if self.communities.sizes.contains(&0) {
            p.push("community sizes must be positive".into());
        }
        if self.truth.community_effects.len() != self.communities.sizes.len() {
            p.push(format!(
                "{} community effects for {} communities",
                self.truth.community_effects.len(),
                self.communities.sizes.len()
            ));
        }
        if !prob(self.communities.p_in) || !prob(self.communities.p_out) {
            p.push("edge probabilities must lie in [0, 1]".into());
        }
        if !(self.communities.weight_min > 0.0 && self.communities.weight_max >= self.communities.weight_min) {
            p.push("edge weight range must be positive and ordered".into());
        }
        let mix = &self.channel_mix;
        if !prob(mix.pro_a) || !prob(mix.pro_b) || mix.pro_a + mix.pro_b > 1.0 {
            p.push("channel proportions must lie in [0, 1] and sum to at most 1".into());
        }
        if !(self.cascade_p > 0.0 && self.cascade_p <= 1.0) {
            p.push("cascade_p must lie in (0, 1]".into());
        }
        if self.truth.gamma.is_empty() || self.truth.gamma.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            p.push("gamma must be nonempty with entries in (0, 1)".into());
        }
        if self.background < 0.0 || self.prior_leak < 0.0 {
            p.push("background and prior_leak must be nonnegative".into());
        }
        if self.n_families == 0 || self.n_quotes < self.n_families {
            p.push(format!(
                "need 1 <= n_families <= n_quotes (got {} families, {} quotes)",
                self.n_families, self.n_quotes
            ));
        }
        if self.replicates == 0 || self.topics == 0 {
            p.push("replicates and topics must be positive".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Generated ecosystem together with everything used to generate it.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub outlets: Vec<Outlet>,
    pub community: Vec<usize>,
    /// Generative edge intensities.
    pub intensity: DMatrix<f64>,
    /// Realized network `A*`.
    pub network: DMatrix<f64>,
    /// Network prior handed to the estimator.
    pub prior_rate: DMatrix<f64>,
    /// True parameters; `beta` holds the community effects for `design`.
    pub params: GlmmParams,
    /// Full community one-hot matrix.
    pub design: DMatrix<f64>,
    /// `outcomes[r][(i, j)]`: outcome of `j` with `i` as source, replicate `r`.
    pub outcomes: Vec<DMatrix<f64>>,
    pub corpus: Corpus,
    /// Quote ids of each paraphrase family.
    pub families: Vec<Vec<String>>,
    pub family_sources: Vec<usize>,
}

impl SimTruth {
    pub fn n(&self) -> usize {
        self.outlets.len()
    }

    pub fn outlet_ids(&self) -> Vec<String> {
        self.outlets.iter().map(|o| o.outlet_id.clone()).collect()
    }

    pub fn n_hop(&self) -> usize {
        self.params.gamma.len()
    }

    /// Log-rates of every outlet under treatment `z` on the true network.
    pub fn log_rates(&self, z: &TreatmentVector) -> Result<Vec<f64>> {
        let exposures = if z.is_zero() {
            ExposureTensor::zeros(self.n(), self.n_hop())
        } else {
            compute_exposures(&self.network, z.as_slice(), self.n_hop())?
        };
        linear_predictor(z, &exposures, &self.params, &self.design)
    }

    /// Outcome rates `lambda[(i, j)]` with `i` as source.
    pub fn rate_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let eta = self.log_rates(&TreatmentVector::source(n, i)?)?;
            for j in 0..n {
                m[(i, j)] = eta[j].exp();
            }
        }
        Ok(m)
    }

    /// The estimator's view of the network: prior rate per pair.
    pub fn influence_network(&self) -> Result<InfluenceNetwork> {
        network_from_matrix(self.outlet_ids(), self.prior_rate.clone())
    }

    /// Observed saliency analogue: mean outcome divided by the outcome scale.
    pub fn observed_kappa(&self) -> DMatrix<f64> {
        let n = self.n();
        let r = self.outcomes.len() as f64;
        let mut k = DMatrix::zeros(n, n);
        for y in &self.outcomes {
            k += y;
        }
        k /= r * OUTCOME_SCALE;
        k.fill_diagonal(0.0);
        k
    }

    /// Estimator input built from the simulated outcomes and the given covariates.
    pub fn causal_data(&self, covariates: &NodeCovariates) -> Result<CausalData> {
        CausalData::new(
            "all",
            &self.outcomes,
            &self.influence_network()?,
            covariates,
            self.observed_kappa(),
        )
    }

    /// Writes `families.csv`, `edges.csv`, `impacts.csv` and `params.json`.
    pub fn write_sidecar(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ids = self.outlet_ids();
        let mut w = csv::Writer::from_path(dir.join("families.csv"))?;
        w.write_record(["quote_id", "group"])?;
        for (g, fam) in self.families.iter().enumerate() {
            for q in fam {
                w.write_record([q.as_str(), &g.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("edges.csv"))?;
        w.write_record(["source", "target", "intensity", "weight"])?;
        for i in 0..self.n() {
            for j in 0..self.n() {
                if self.intensity[(i, j)] > 0.0 || self.network[(i, j)] > 0.0 {
                    w.write_record([
                        ids[i].clone(),
                        ids[j].clone(),
                        format!("{:.6}", self.intensity[(i, j)]),
                        self.network[(i, j)].to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("impacts.csv"))?;
        w.write_record(["source", "target", "expected_impact"])?;
        for i in 0..self.n() {
            for j in 0..self.n() {
                if let Some(z) = oracle_impact(self, i, j, crate::split_seed(seed, (i * self.n() + j) as u64)) {
                    w.write_record([ids[i].clone(), ids[j].clone(), format!("{z:.6}")])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let doc = serde_json::json!({
            "params": self.params,
            "community": self.outlets.iter().zip(&self.community)
                .map(|(o, c)| (o.outlet_id.clone(), *c))
                .collect::<std::collections::BTreeMap<_, _>>(),
        });
        let path = dir.join("params.json");
        fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))
    }
}

fn poisson(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0)
}

const ORIENTATIONS: [Orientation; 3] = [Orientation::StateControlled, Orientation::Independent, Orientation::StateAgenda];

fn make_outlets(community: &[usize]) -> Vec<Outlet> {
    community
        .iter()
        .enumerate()
        .map(|(i, &c)| Outlet {
            outlet_id: format!("m{i:03}"),
            name: format!("Outlet {i}"),
            country: format!("C{c}"),
            orientation: ORIENTATIONS[c % ORIENTATIONS.len()],
        })
        .collect()
}

const ONSETS: [&str; 18] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr", "kl", "st"];
const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
const FILLERS: [&str; 8] = ["indeed", "also", "really", "now", "clearly", "reportedly", "then", "very"];

fn vocabulary(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let syllables = rng.gen_range(2..=4);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).expect("nonempty"), VOWELS.choose(rng).expect("nonempty")))
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn paraphrase(base: &[String], vocab: &[String], rng: &mut ChaCha8Rng) -> String {
    let mut out: Vec<String> = Vec::with_capacity(base.len() + 2);
    for w in base {
        let u: f64 = rng.gen();
        if u < 0.06 {
            continue;
        } else if u < 0.14 {
            out.push(vocab.choose(rng).expect("nonempty").clone());
        } else {
            out.push(w.clone());
        }
    }
    for _ in 0..rng.gen_range(0..=2) {
        let at = rng.gen_range(0..=out.len());
        out.insert(at, FILLERS.choose(rng).expect("nonempty").to_string());
    }
    if out.is_empty() {
        out.push(base[0].clone());
    }
    out.join(" ")
}

/// Cascade sizes: truncated geometric, then trimmed or padded with repeat
/// uses so that the records add up to `n_quotes`. Returns `(outlets, records)`.
fn family_sizes(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let n = cfg.n_outlets;
    let weights: Vec<f64> = (0..n).map(|s| (1.0 - cfg.cascade_p).powi(s as i32)).collect();
    let dist = rand::distributions::WeightedIndex::new(&weights).expect("positive weights");
    let mut sizes: Vec<usize> = (0..cfg.n_families).map(|_| dist.sample(rng) + 1).collect();
    let mut total: usize = sizes.iter().sum();
    while total > cfg.n_quotes {
        let (k, _) = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("nonempty");
        sizes[k] -= 1;
        total -= 1;
    }
    let mut records = sizes.clone();
    for _ in total..cfg.n_quotes {
        records[rng.gen_range(0..cfg.n_families)] += 1;
    }
    sizes.into_iter().zip(records).collect()
}

struct Follow {
    excess: Vec<Vec<f64>>,
    background: Vec<f64>,
}

struct FamilyPlan {
    source: usize,
    outlets: usize,
    records: usize,
    channel: SentimentChannel,
    topic: usize,
    start: DateTime<Utc>,
}

/// `(outlet, time)` uses of one family; the source's first use comes first.
///
/// Each new follower is drawn with weight equal to the rate increase the
/// current members cause on it plus a small baseline share. The cascade stops
/// early once no remaining outlet is exposed.
fn cascade(plan: &FamilyPlan, follow: &Follow, rng: &mut ChaCha8Rng) -> Vec<(usize, DateTime<Utc>)> {
    let n = follow.background.len();
    let mut members = vec![plan.source];
    let mut chosen = vec![false; n];
    chosen[plan.source] = true;
    let mut exposure = follow.excess[plan.source].clone();
    while members.len() < plan.outlets {
        let weights: Vec<f64> = (0..n)
            .map(|j| if chosen[j] { 0.0 } else { exposure[j] + follow.background[j] })
            .collect();
        let exposed: f64 = (0..n).filter(|&j| !chosen[j]).map(|j| exposure[j]).sum();
        if exposed <= 0.0 {
            break;
        }
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = None;
        for (j, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                pick = Some(j);
                if u < *w {
                    break;
                }
                u -= w;
            }
        }
        let Some(j) = pick else { break };
        members.push(j);
        chosen[j] = true;
        for (e, x) in exposure.iter_mut().zip(&follow.excess[j]) {
            *e += x;
        }
    }
    let mut uses: Vec<(usize, DateTime<Utc>)> = vec![(plan.source, plan.start)];
    let mut firsts = vec![plan.start];
    for &m in &members[1..] {
        let t = plan.start + Duration::minutes(rng.gen_range(1..=72 * 60));
        uses.push((m, t));
        firsts.push(t);
    }
    for _ in members.len()..plan.records {
        let k = rng.gen_range(0..members.len());
        uses.push((members[k], firsts[k] + Duration::minutes(rng.gen_range(0..=48 * 60))));
    }
    uses.sort_by_key(|&(o, t)| (t, o));
    uses
}

pub fn generate(cfg: &SimConfig) -> Result<SimTruth> {
    cfg.validate()?;
    let n = cfg.n_outlets;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::split_seed(cfg.seed, 0));

    let community: Vec<usize> = cfg
        .communities
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
        .collect();
    let spec = &cfg.communities;
    let mut intensity = DMatrix::zeros(n, n);
    let mut network = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = if community[i] == community[j] { spec.p_in } else { spec.p_out };
            if rng.gen::<f64>() < p {
                let w = if spec.weight_max > spec.weight_min {
                    rng.gen_range(spec.weight_min..spec.weight_max)
                } else {
                    spec.weight_min
                };
                intensity[(i, j)] = w;
                network[(i, j)] = poisson(w, &mut rng);
            }
        }
    }
    let mut prior_rate = intensity.clone();
    for i in 0..n {
        for j in 0..n {
            if i != j && prior_rate[(i, j)] == 0.0 {
                prior_rate[(i, j)] = cfg.prior_leak;
            }
        }
    }
    let eps_dist = Normal::new(0.0, EPS_VARIANCE.sqrt()).expect("valid normal");
    let c = cfg.communities.sizes.len();
    let design = DMatrix::from_fn(n, c, |j, k| f64::from(u8::from(community[j] == k)));
    let params = GlmmParams {
        tau: cfg.truth.tau,
        gamma: cfg.truth.gamma.clone(),
        beta: cfg.truth.community_effects.clone(),
        mu: cfg.truth.mu,
        eps: (0..n).map(|_| eps_dist.sample(&mut rng)).collect(),
    };
    params.validate()?;
    let outlets = make_outlets(&community);

    let mut truth = SimTruth {
        outlets,
        community,
        intensity,
        network,
        prior_rate,
        params,
        design,
        outcomes: Vec::new(),
        corpus: Corpus::new(Vec::new(), Vec::new())?,
        families: Vec::new(),
        family_sources: Vec::new(),
    };
    let rates = truth.rate_matrix()?;
    let base = truth.log_rates(&TreatmentVector::zeros(n))?;

    let mut out_rng = ChaCha8Rng::seed_from_u64(crate::split_seed(cfg.seed, 1));
    truth.outcomes = (0..cfg.replicates)
        .map(|_| DMatrix::from_fn(n, n, |i, j| poisson(rates[(i, j)], &mut out_rng)))
        .collect();

    let follow = Follow {
        excess: (0..n)
            .map(|i| (0..n).map(|j| (rates[(i, j)] - base[j].exp()).max(0.0)).collect())
            .collect(),
        background: base.iter().map(|b| cfg.background * b.exp()).collect(),
    };

    let mut plan_rng = ChaCha8Rng::seed_from_u64(crate::split_seed(cfg.seed, 2));
    let sizes = family_sizes(cfg, &mut plan_rng);
    let vocab = vocabulary(&mut plan_rng, 4000);
    let epoch = Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).single().expect("valid date");
    let plans: Vec<FamilyPlan> = sizes
        .iter()
        .map(|&(outlets, records)| {
            let u: f64 = plan_rng.gen();
            let channel = if u < cfg.channel_mix.pro_a {
                SentimentChannel::ProA
            } else if u < cfg.channel_mix.pro_a + cfg.channel_mix.pro_b {
                SentimentChannel::ProB
            } else {
                SentimentChannel::Neutral
            };
            FamilyPlan {
                source: plan_rng.gen_range(0..n),
                outlets,
                records,
                channel,
                topic: plan_rng.gen_range(0..cfg.topics),
                start: epoch + Duration::minutes(plan_rng.gen_range(0..365 * 24 * 60)),
            }
        })
        .collect();

    let family_seed = crate::split_seed(cfg.seed, 3);
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(plans.len().max(1));
    let chunk = plans.len().div_ceil(workers).max(1);
    let generated: Vec<Family> = std::thread::scope(|scope| {
        let handles: Vec<_> = plans
            .chunks(chunk)
            .enumerate()
            .map(|(w, part)| {
                let (follow, vocab) = (&follow, &vocab);
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, plan)| {
                            let f = (w * chunk + k) as u64;
                            let mut rng = ChaCha8Rng::seed_from_u64(crate::split_seed(family_seed, f));
                            let len = rng.gen_range(10..=16);
                            let sentence: Vec<String> =
                                (0..len).map(|_| vocab.choose(&mut rng).expect("nonempty").clone()).collect();
                            let uses = cascade(plan, follow, &mut rng);
                            let texts = uses.iter().map(|_| paraphrase(&sentence, vocab, &mut rng)).collect();
                            (texts, uses)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generator thread panicked"))
            .collect()
    });

    let mut records = Vec::with_capacity(cfg.n_quotes);
    for (f, ((texts, uses), plan)) in generated.into_iter().zip(&plans).enumerate() {
        let mut ids = Vec::with_capacity(uses.len());
        for (text, (o, t)) in texts.into_iter().zip(uses) {
            let id = format!("q{:06}", records.len());
            let outlet = &truth.outlets[o];
            records.push(QuoteRecord {
                quote_id: id.clone(),
                outlet_id: outlet.outlet_id.clone(),
                article_id: format!("a{:06}", records.len()),
                text,
                published_at: t,
                speaker: format!("speaker_{}", f % 40),
                topic: format!("topic_{}", plan.topic),
                sentiment_channel: plan.channel,
                country: outlet.country.clone(),
                language: "xx".into(),
            });
            ids.push(id);
        }
        truth.families.push(ids);
        truth.family_sources.push(plan.source);
    }
    truth.corpus = Corpus::new(records, truth.outlets.clone())?;
    Ok(truth)
}

/// Monte-Carlo estimate of `E[Y_j(z_{i+})] - E[Y_j(z_{i-})]` on the true
/// network with [`ORACLE_REPLICATES`] replicates. `None` on the diagonal or
/// for out-of-range indices.
pub fn oracle_impact(truth: &SimTruth, i: usize, j: usize, seed: u64) -> Option<f64> {
    oracle_impact_with(truth, i, j, ORACLE_REPLICATES, seed)
}

pub fn oracle_impact_with(truth: &SimTruth, i: usize, j: usize, replicates: usize, seed: u64) -> Option<f64> {
    let n = truth.n();
    if i == j || i >= n || j >= n || replicates == 0 {
        return None;
    }
    let z = TreatmentVector::source(n, i).ok()?;
    let with = truth.log_rates(&z).ok()?[j].exp();
    let without = truth.log_rates(&z.without(i)).ok()?[j].exp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..replicates {
        sum += poisson(with, &mut rng) - poisson(without, &mut rng);
    }
    Some(sum / replicates as f64)
}
