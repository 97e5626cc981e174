//! Pipeline configuration: one JSON document, checked against a published
//! schema and then semantically.

use std::fs;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::causal::{Grouping, McmcConfig};
use crate::cluster::ClusterParams;
use crate::corpus::{IngestOptions, RecordFilter};
use crate::embed::{CommandProvider, EmbeddingProvider, HashingEmbedder};
use crate::error::{Error, Result};
use crate::salience::{ChannelFilter, SalienceConfig};
use crate::simgen::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub ingest: IngestOptions,
    #[serde(default)]
    pub embed: EmbedSettings,
    #[serde(default)]
    pub cluster: ClusterSettings,
    #[serde(default)]
    pub salience: SalienceConfig,
    pub network: NetworkSettings,
    pub causal: CausalSettings,
    #[serde(default)]
    pub report: ReportSettings,
    /// Synthetic ecosystem written by the `simulate` stage.
    #[serde(default)]
    pub simulate: Option<SimConfig>,
}

/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Quote records, one JSON object per line.
    pub corpus: PathBuf,
    /// Outlet table, one JSON object per line.
    pub outlets: PathBuf,
    /// Embedding cache shared between runs.
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ProviderSettings {
    /// Character n-gram feature hashing.
    Builtin,
    Command(CommandProvider),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EmbedSettings {
    #[serde(default = "builtin")]
    pub provider: ProviderSettings,
    /// Principal components kept; defaults to min(70, n, d).
    #[serde(default)]
    pub components: Option<usize>,
}

fn builtin() -> ProviderSettings {
    ProviderSettings::Builtin
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self {
            provider: builtin(),
            components: None,
        }
    }
}

impl EmbedSettings {
    pub fn provider(&self) -> Box<dyn EmbeddingProvider> {
        match &self.provider {
            ProviderSettings::Builtin => Box::new(HashingEmbedder),
            ProviderSettings::Command(c) => Box::new(c.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ClusterSettings {
    #[serde(default)]
    pub params: ClusterParams,
    /// Optional `quote_id,group` table; when given the clustering is scored against it.
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NetworkSettings {
    /// Number of blockmodel communities.
    pub communities: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    pub seed: u64,
}

fn default_restarts() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CausalSettings {
    #[serde(default = "default_hop")]
    pub n_hop: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_burn")]
    pub burn_in_fraction: f64,
    #[serde(default = "default_max_draws")]
    pub max_draws: usize,
    /// Seeds the sampler chains.
    pub seed: u64,
    /// Seeds the counterfactual imputation.
    pub impact_seed: u64,
}

fn default_hop() -> usize {
    McmcConfig::default().n_hop
}
fn default_chains() -> usize {
    McmcConfig::default().chains
}
fn default_iterations() -> usize {
    McmcConfig::default().iterations
}
fn default_burn() -> f64 {
    McmcConfig::default().burn_in_fraction
}
fn default_max_draws() -> usize {
    McmcConfig::default().max_draws
}

impl CausalSettings {
    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig {
            chains: self.chains,
            iterations: self.iterations,
            burn_in_fraction: self.burn_in_fraction,
            n_hop: self.n_hop,
            seed: self.seed,
            max_draws: self.max_draws,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ReportSettings {
    /// Channels to estimate and report: `pro_a`, `pro_b`, `neutral` or `all`.
    #[serde(default = "default_channels")]
    pub channels: Vec<String>,
    #[serde(default = "default_groupings")]
    pub groupings: Vec<Grouping>,
    /// Restricts the outcome salience to matching records (e.g. one topic).
    /// The network prior always uses the whole corpus.
    #[serde(default)]
    pub filter: RecordFilter,
    /// Clusters listed per outlet in the top-quotes table.
    #[serde(default = "default_top")]
    pub top_quotes: usize,
}

fn default_channels() -> Vec<String> {
    vec!["pro_a".into(), "pro_b".into()]
}
fn default_groupings() -> Vec<Grouping> {
    vec![Grouping::OrientationToOrientation, Grouping::OutletToCountry]
}
fn default_top() -> usize {
    10
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self {
            channels: default_channels(),
            groupings: default_groupings(),
            filter: RecordFilter::default(),
            top_quotes: default_top(),
        }
    }
}

impl ReportSettings {
    pub fn channel_filters(&self) -> Result<Vec<ChannelFilter>> {
        self.channels.iter().map(|c| ChannelFilter::parse(c)).collect()
    }
}

/// JSON schema of the configuration document.
pub fn schema() -> Value {
    serde_json::to_value(schemars::schema_for!(PipelineConfig)).expect("schema serializes")
}

impl PipelineConfig {
    /// Parses and validates a config document. Every schema violation and
    /// semantic problem is reported together.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        let schema = schema();
        let validator = jsonschema::validator_for(&schema).map_err(|e| Error::Internal(format!("bad schema: {e}")))?;
        let mut problems: Vec<String> = validator
            .iter_errors(&raw)
            .map(|e| {
                let at = e.instance_path().to_string();
                if at.is_empty() {
                    e.to_string()
                } else {
                    format!("{at}: {e}")
                }
            })
            .collect();
        if !problems.is_empty() {
            problems.sort();
            return Err(Error::Config(problems));
        }
        let cfg: PipelineConfig = serde_json::from_value(raw.clone()).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if raw.pointer("/simulate").is_some_and(|s| !s.is_null()) && raw.pointer("/simulate/seed").is_none() {
            problems.push("/simulate: seed must be given explicitly".into());
        }
        cfg.collect_problems(&mut problems);
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Reads a config file; relative paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.outlets);
        fix(&mut self.paths.cache_dir);
        fix(&mut self.paths.output_dir);
        if let Some(t) = &mut self.cluster.truth {
            fix(t);
        }
    }

    fn collect_problems(&self, out: &mut Vec<String>) {
        let mut absorb = |section: &str, r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(list)) => out.extend(list.into_iter().map(|p| format!("/{section}: {p}"))),
            Err(e) => out.push(format!("/{section}: {e}")),
        };
        absorb("cluster/params", self.cluster.params.validate());
        absorb("causal", self.causal.mcmc().validate());
        if let Some(sim) = &self.simulate {
            absorb("simulate", sim.validate());
        }
        if self.embed.components == Some(0) {
            out.push("/embed/components: must be positive".into());
        }
        if self.network.communities == 0 {
            out.push("/network/communities: must be positive".into());
        }
        if self.network.restarts == 0 {
            out.push("/network/restarts: must be positive".into());
        }
        if self.report.channels.is_empty() {
            out.push("/report/channels: at least one channel required".into());
        }
        let mut seen = Vec::new();
        for c in &self.report.channels {
            match ChannelFilter::parse(c) {
                Ok(f) if seen.contains(&f) => out.push(format!("/report/channels: `{c}` listed twice")),
                Ok(f) => seen.push(f),
                Err(_) => out.push(format!("/report/channels: unknown channel `{c}`")),
            }
        }
        if self.report.top_quotes == 0 {
            out.push("/report/top_quotes: must be positive".into());
        }
        if let (Some(from), Some(to)) = (self.report.filter.from, self.report.filter.to) {
            if from > to {
                out.push("/report/filter: `from` is after `to`".into());
            }
        }
    }
}
