//! End-to-end orchestration. Each stage reads its inputs from the output
//! directory, writes its artifacts under `<output_dir>/<stage>/`, and is
//! skipped when the manifest shows identical inputs and parameters.

mod config;
mod manifest;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

pub use config::{
    schema, CausalSettings, ClusterSettings, EmbedSettings, NetworkSettings, Paths, PipelineConfig, ProviderSettings,
    ReportSettings,
};
pub use manifest::{file_hash, list_files, Manifest, StageRecord, MANIFEST_FILE};

use crate::causal::{estimate_all, fit, read_impacts_csv, write_impacts_csv, CausalData, FittedModel, ImpactEstimate};
use crate::cluster::{evaluate_matching, hdbscan, quote_clusters, read_truth_csv, Clustering, QuoteCluster};
use crate::corpus::{ingest, Corpus, IngestOptions};
use crate::embed::{default_components, read_matrix, reduce, write_matrix, EmbeddingCache, EmbeddingMatrix, ReducedMatrix};
use crate::error::{Error, Result};
use crate::netbuild::{build_network, detect_communities, export_graph, InfluenceNetwork, NodeCovariates};
use crate::salience::{
    build_salience, read_salience_csv, write_salience_csv, write_self_salience_csv, ChannelFilter, SalienceMatrix,
};
use crate::simgen::generate;
use crate::split_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Stage {
    Ingest,
    Embed,
    Reduce,
    Cluster,
    Salience,
    Network,
    Fit,
    Impact,
    Report,
    Simulate,
    All,
}

impl Stage {
    /// Analysis stages in execution order.
    pub const SEQUENCE: [Stage; 9] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Reduce,
        Stage::Cluster,
        Stage::Salience,
        Stage::Network,
        Stage::Fit,
        Stage::Impact,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Reduce => "reduce",
            Stage::Cluster => "cluster",
            Stage::Salience => "salience",
            Stage::Network => "network",
            Stage::Fit => "fit",
            Stage::Impact => "impact",
            Stage::Report => "report",
            Stage::Simulate => "simulate",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: Vec<Stage>,
    pub cached: Vec<Stage>,
}

/// Runs `stage` (or every stage for [`Stage::All`]; `simulate` first when the
/// config has a `simulate` section).
pub fn run(stage: Stage, cfg: &PipelineConfig, force: bool) -> Result<RunSummary> {
    let out = cfg.paths.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut runner = Runner {
        cfg,
        manifest: Manifest::load(&out)?,
        out,
        force,
        summary: RunSummary::default(),
    };
    match stage {
        Stage::All => {
            if cfg.simulate.is_some() {
                runner.execute(Stage::Simulate)?;
            }
            for s in Stage::SEQUENCE {
                runner.execute(s)?;
            }
        }
        s => runner.execute(s)?,
    }
    Ok(runner.summary)
}

pub fn run_from_path(stage: Stage, config_path: &Path, force: bool) -> Result<RunSummary> {
    run(stage, &PipelineConfig::load(config_path)?, force)
}

const RECORDS: &str = "ingest/records.jsonl";
const OUTLETS: &str = "ingest/outlets.jsonl";
const EMBEDDINGS: &str = "embed/embeddings.bin";
const REDUCED: &str = "reduce/reduced.bin";
const LABELS: &str = "cluster/labels.csv";
const PRIOR_KAPPA: &str = "salience/prior_kappa.csv";
const PRIOR_SELF: &str = "salience/prior_self_salience.csv";
const KAPPA: &str = "salience/kappa.csv";
const SELF_SALIENCE: &str = "salience/self_salience.csv";
const COVARIATES: &str = "network/covariates.csv";

fn model_artifact(ch: ChannelFilter) -> String {
    format!("fit/{}/model.json", ch.as_str())
}

fn impact_artifact(ch: ChannelFilter) -> String {
    format!("impact/{}.csv", ch.as_str())
}

/// One input of a stage: the manifest name, where it lives, and which stage
/// produces it (`None` for external files).
struct Input {
    name: String,
    path: PathBuf,
    producer: Option<Stage>,
}

struct Plan {
    params: Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<Input>,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    manifest: Manifest,
    force: bool,
    summary: RunSummary,
}

impl Runner<'_> {
    fn artifact(&self, producer: Stage, rel: &str) -> Input {
        Input {
            name: rel.to_string(),
            path: self.out.join(rel),
            producer: Some(producer),
        }
    }

    fn external(&self, configured: &Path) -> Input {
        let name = if configured.starts_with(&self.out) {
            manifest::relative(&self.out, configured)
        } else {
            configured.display().to_string()
        };
        let producer = configured.starts_with(self.out.join("simulate")).then_some(Stage::Simulate);
        Input {
            name,
            path: configured.to_path_buf(),
            producer,
        }
    }

    fn channels(&self) -> Result<Vec<ChannelFilter>> {
        self.cfg.report.channel_filters()
    }

    fn plan(&self, stage: Stage) -> Result<Plan> {
        let cfg = self.cfg;
        let mut seeds = BTreeMap::new();
        let mut inputs = Vec::new();
        let params = match stage {
            Stage::Simulate => {
                let sim = cfg
                    .simulate
                    .as_ref()
                    .ok_or_else(|| Error::Config(vec!["/simulate: section required by the simulate stage".into()]))?;
                seeds.insert("simulate".into(), sim.seed);
                serde_json::to_value(sim)?
            }
            Stage::Ingest => {
                inputs.push(self.external(&cfg.paths.corpus));
                inputs.push(self.external(&cfg.paths.outlets));
                serde_json::to_value(&cfg.ingest)?
            }
            Stage::Embed => {
                inputs.push(self.artifact(Stage::Ingest, RECORDS));
                inputs.push(self.artifact(Stage::Ingest, OUTLETS));
                json!({ "provider": cfg.embed.provider().tag() })
            }
            Stage::Reduce => {
                inputs.push(self.artifact(Stage::Embed, EMBEDDINGS));
                inputs.push(self.artifact(Stage::Ingest, RECORDS));
                json!({ "components": cfg.embed.components })
            }
            Stage::Cluster => {
                inputs.push(self.artifact(Stage::Reduce, REDUCED));
                inputs.push(self.artifact(Stage::Ingest, RECORDS));
                if let Some(t) = &cfg.cluster.truth {
                    inputs.push(self.external(t));
                }
                serde_json::to_value(cfg.cluster.params)?
            }
            Stage::Salience => {
                inputs.push(self.artifact(Stage::Cluster, LABELS));
                inputs.push(self.artifact(Stage::Ingest, RECORDS));
                inputs.push(self.artifact(Stage::Ingest, OUTLETS));
                json!({
                    "salience": cfg.salience,
                    "channels": cfg.report.channels,
                    "filter": cfg.report.filter,
                })
            }
            Stage::Network => {
                inputs.push(self.artifact(Stage::Salience, PRIOR_KAPPA));
                inputs.push(self.artifact(Stage::Salience, PRIOR_SELF));
                inputs.push(self.artifact(Stage::Ingest, OUTLETS));
                seeds.insert("network".into(), cfg.network.seed);
                serde_json::to_value(&cfg.network)?
            }
            Stage::Fit => {
                for rel in [KAPPA, SELF_SALIENCE, PRIOR_KAPPA, PRIOR_SELF] {
                    inputs.push(self.artifact(Stage::Salience, rel));
                }
                inputs.push(self.artifact(Stage::Network, COVARIATES));
                inputs.push(self.artifact(Stage::Ingest, OUTLETS));
                seeds.insert("fit".into(), cfg.causal.seed);
                json!({ "mcmc": cfg.causal.mcmc(), "channels": cfg.report.channels, "communities": cfg.network.communities })
            }
            Stage::Impact => {
                for ch in self.channels()? {
                    inputs.push(self.artifact(Stage::Fit, &model_artifact(ch)));
                }
                for rel in [KAPPA, SELF_SALIENCE, PRIOR_KAPPA, PRIOR_SELF] {
                    inputs.push(self.artifact(Stage::Salience, rel));
                }
                inputs.push(self.artifact(Stage::Network, COVARIATES));
                inputs.push(self.artifact(Stage::Ingest, OUTLETS));
                seeds.insert("impact".into(), cfg.causal.impact_seed);
                json!({ "channels": cfg.report.channels, "communities": cfg.network.communities })
            }
            Stage::Report => {
                for ch in self.channels()? {
                    inputs.push(self.artifact(Stage::Impact, &impact_artifact(ch)));
                }
                for rel in [KAPPA, PRIOR_KAPPA, PRIOR_SELF] {
                    inputs.push(self.artifact(Stage::Salience, rel));
                }
                inputs.push(self.artifact(Stage::Cluster, LABELS));
                inputs.push(self.artifact(Stage::Ingest, RECORDS));
                inputs.push(self.artifact(Stage::Ingest, OUTLETS));
                serde_json::to_value(&cfg.report)?
            }
            Stage::All => unreachable!("expanded by run"),
        };
        Ok(Plan { params, seeds, inputs })
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        let name = stage.as_str();
        let plan = self.plan(stage)?;
        let mut hashes = BTreeMap::new();
        for input in &plan.inputs {
            if !input.path.is_file() {
                return Err(match input.producer {
                    Some(Stage::Impact) => Error::MissingArtifact {
                        stage: "impact".into(),
                        artifact: format!("{} (requested channel not estimated)", input.name),
                    },
                    Some(p) => Error::MissingArtifact {
                        stage: p.as_str().into(),
                        artifact: input.name.clone(),
                    },
                    None => Error::InvalidArgument(format!("input file {} does not exist", input.path.display())),
                });
            }
            hashes.insert(input.name.clone(), file_hash(&input.path)?);
        }
        let key = manifest::stage_key(name, &plan.params, &hashes);
        if !self.force && self.manifest.is_fresh(name, &key, &self.out) {
            log::info!("{name}: inputs unchanged, reusing cached artifacts");
            self.summary.cached.push(stage);
            return Ok(());
        }
        let dir = self.out.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let started = Instant::now();
        log::info!("{name}: running");
        self.body(stage, &dir)?;
        let outputs = manifest::list_files(&self.out, &dir)?
            .into_iter()
            .map(|rel| {
                let h = file_hash(&self.out.join(&rel))?;
                Ok((rel, h))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                key,
                params: plan.params,
                seeds: plan.seeds,
                inputs: hashes,
                outputs,
            },
        );
        self.manifest.save(&self.out)?;
        log::info!("{name}: done in {:.1} s", started.elapsed().as_secs_f64());
        self.summary.executed.push(stage);
        Ok(())
    }

    fn body(&self, stage: Stage, dir: &Path) -> Result<()> {
        match stage {
            Stage::Simulate => self.simulate(dir),
            Stage::Ingest => self.ingest(dir),
            Stage::Embed => self.embed(),
            Stage::Reduce => self.reduce(dir),
            Stage::Cluster => self.cluster(dir),
            Stage::Salience => self.salience(dir),
            Stage::Network => self.network(dir),
            Stage::Fit => self.fit(dir),
            Stage::Impact => self.impact(),
            Stage::Report => self.report(dir),
            Stage::All => unreachable!("expanded by run"),
        }
    }

    fn simulate(&self, dir: &Path) -> Result<()> {
        let sim = self.cfg.simulate.as_ref().expect("checked by plan");
        let truth = generate(sim)?;
        truth.corpus.export(&dir.join("records.jsonl"), &dir.join("outlets.jsonl"))?;
        truth.write_sidecar(&dir.join("truth"), split_seed(sim.seed, 7))
    }

    fn ingest(&self, dir: &Path) -> Result<()> {
        let (corpus, report) = ingest(&self.cfg.paths.corpus, &self.cfg.paths.outlets, &self.cfg.ingest)?;
        for w in &report.warnings {
            log::warn!("ingest: {w}");
        }
        corpus.export(&dir.join("records.jsonl"), &dir.join("outlets.jsonl"))?;
        let doc = json!({
            "records": corpus.len(),
            "outlets": corpus.outlets().len(),
            "skipped": report.skipped,
            "warnings": report.warnings,
            "content_hash": corpus.content_hash(),
        });
        write_json(&dir.join("report.json"), &doc)
    }

    fn corpus(&self) -> Result<Corpus> {
        let opts = IngestOptions {
            strict: true,
            ..IngestOptions::default()
        };
        Ok(ingest(&self.out.join(RECORDS), &self.out.join(OUTLETS), &opts)?.0)
    }

    fn embed(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let provider = self.cfg.embed.provider();
        let emb = EmbeddingCache::new(&self.cfg.paths.cache_dir).get_or_compute(&corpus, provider.as_ref())?;
        write_matrix(&self.out.join(EMBEDDINGS), &emb.vectors)
    }

    fn reduce(&self, dir: &Path) -> Result<()> {
        let corpus = self.corpus()?;
        let vectors = read_matrix(&self.out.join(EMBEDDINGS))?;
        if vectors.nrows() != corpus.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} embeddings for {} records; rerun stage `embed`",
                vectors.nrows(),
                corpus.len()
            )));
        }
        let (n, d) = vectors.shape();
        let k = self.cfg.embed.components.unwrap_or_else(|| default_components(n, d));
        let emb = EmbeddingMatrix {
            quote_ids: corpus.quote_ids(),
            vectors,
            provider_tag: self.cfg.embed.provider().tag(),
        };
        let reduced = reduce(&emb, k)?;
        write_matrix(&self.out.join(REDUCED), &reduced.vectors)?;
        let mut w = csv::Writer::from_path(dir.join("explained_variance.csv"))?;
        w.write_record(["component", "variance", "ratio"])?;
        for (c, v) in reduced.explained_variance.iter().enumerate() {
            let ratio = if reduced.total_variance > 0.0 { v / reduced.total_variance } else { 0.0 };
            w.write_record([(c + 1).to_string(), format!("{v:.12}"), format!("{ratio:.12}")])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))
    }

    fn cluster(&self, dir: &Path) -> Result<()> {
        let corpus = self.corpus()?;
        let ids = corpus.quote_ids();
        let vectors = read_matrix(&self.out.join(REDUCED))?;
        if vectors.nrows() != ids.len() {
            return Err(Error::DimensionMismatch("reduced matrix does not match the corpus; rerun stage `reduce`".into()));
        }
        let points = ReducedMatrix::from_points(ids.clone(), vectors);
        let clustering = hdbscan(&points, &self.cfg.cluster.params)?;
        log::info!(
            "cluster: {} clusters, {} noise records",
            clustering.n_clusters,
            clustering.noise().len()
        );
        clustering.write_csv(&ids, &self.out.join(LABELS))?;
        if let Some(truth) = &self.cfg.cluster.truth {
            let truth = read_truth_csv(truth)?;
            let predicted = ids.iter().cloned().zip(clustering.labels.iter().copied()).collect();
            let eval = evaluate_matching(&predicted, &truth)?;
            log::info!("cluster: precision {:.3}, recall {:.3}", eval.precision, eval.recall);
            write_json(&dir.join("evaluation.json"), &serde_json::to_value(eval)?)?;
        }
        Ok(())
    }

    /// Quote clusters restricted to the records of `corpus`.
    fn clusters_of(&self, corpus: &Corpus) -> Result<Vec<QuoteCluster>> {
        let (ids, clustering) = Clustering::read_csv(&self.out.join(LABELS))?;
        let present: BTreeSet<&str> = corpus.records().iter().map(|r| r.quote_id.as_str()).collect();
        let keep: Vec<usize> = (0..ids.len()).filter(|&i| present.contains(ids[i].as_str())).collect();
        if keep.len() == ids.len() {
            return quote_clusters(corpus, &ids, &clustering);
        }
        let sub = Clustering {
            labels: keep.iter().map(|&i| clustering.labels[i]).collect(),
            probabilities: keep.iter().map(|&i| clustering.probabilities[i]).collect(),
            n_clusters: clustering.n_clusters,
        };
        let sub_ids: Vec<String> = keep.iter().map(|&i| ids[i].clone()).collect();
        quote_clusters(corpus, &sub_ids, &sub)
    }

    fn salience(&self, dir: &Path) -> Result<()> {
        let corpus = self.corpus()?;
        let outlets = outlet_ids(&corpus);
        let all = self.clusters_of(&corpus)?;
        let prior = build_salience(&all, &outlets, &self.cfg.salience, ChannelFilter::All)?;
        write_salience_csv(std::slice::from_ref(&prior), &self.out.join(PRIOR_KAPPA))?;
        write_self_salience_csv(std::slice::from_ref(&prior), &self.out.join(PRIOR_SELF))?;

        let filtered = corpus.filter(&self.cfg.report.filter)?;
        if filtered.is_empty() {
            return Err(Error::InvalidArgument("the report filter matches no records".into()));
        }
        let clusters = if self.cfg.report.filter.is_identity() {
            all.clone()
        } else {
            self.clusters_of(&filtered)?
        };
        let matrices = self
            .channels()?
            .into_iter()
            .map(|ch| build_salience(&clusters, &outlets, &self.cfg.salience, ch))
            .collect::<Result<Vec<_>>>()?;
        write_salience_csv(&matrices, &self.out.join(KAPPA))?;
        write_self_salience_csv(&matrices, &self.out.join(SELF_SALIENCE))?;

        let mut w = csv::Writer::from_path(dir.join("clusters.csv"))?;
        w.write_record(["cluster_id", "channel", "outlets", "records"])?;
        for q in &all {
            w.write_record([
                q.cluster_id.to_string(),
                q.channel.as_str().to_string(),
                q.s_q().to_string(),
                q.members.len().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))
    }

    fn outlets(&self) -> Result<Vec<String>> {
        Ok(crate::corpus::read_outlets(&self.out.join(OUTLETS))?
            .into_iter()
            .map(|o| o.outlet_id)
            .collect())
    }

    fn prior_network(&self, outlets: &[String]) -> Result<InfluenceNetwork> {
        let prior = read_salience_csv(&self.out.join(PRIOR_KAPPA), &self.out.join(PRIOR_SELF), outlets)?;
        let m = prior
            .get(&ChannelFilter::All)
            .cloned()
            .unwrap_or_else(|| SalienceMatrix::zeros(outlets.to_vec(), ChannelFilter::All));
        build_network(&m)
    }

    fn channel_salience(&self, outlets: &[String]) -> Result<BTreeMap<ChannelFilter, SalienceMatrix>> {
        let mut m = read_salience_csv(&self.out.join(KAPPA), &self.out.join(SELF_SALIENCE), outlets)?;
        for ch in self.channels()? {
            m.entry(ch).or_insert_with(|| SalienceMatrix::zeros(outlets.to_vec(), ch));
        }
        Ok(m)
    }

    fn network(&self, dir: &Path) -> Result<()> {
        let outlets = self.outlets()?;
        let net = self.prior_network(&outlets)?;
        let s = &self.cfg.network;
        let fit = detect_communities(&net, s.communities, s.seed, s.restarts)?;
        fit.covariates.write_csv(&self.out.join(COVARIATES))?;
        write_json(
            &dir.join("communities.json"),
            &json!({
                "log_likelihood": fit.log_likelihood,
                "trace": fit.trace,
                "community": outlets.iter().cloned().zip(fit.covariates.community.iter().copied()).collect::<BTreeMap<_, _>>(),
            }),
        )?;
        let path = dir.join("network.dot");
        fs::write(&path, export_graph(&net, None, None)).map_err(|e| Error::io(&path, e))
    }

    /// Outcome data for every configured channel, in config order.
    fn causal_data(&self) -> Result<Vec<(ChannelFilter, CausalData)>> {
        let outlets = self.outlets()?;
        let net = self.prior_network(&outlets)?;
        let cov = NodeCovariates::read_csv(&self.out.join(COVARIATES), self.cfg.network.communities)?;
        if cov.outlets != outlets {
            return Err(Error::DimensionMismatch("covariates do not match the outlets; rerun stage `network`".into()));
        }
        let sal = self.channel_salience(&outlets)?;
        self.channels()?
            .into_iter()
            .map(|ch| Ok((ch, CausalData::from_salience(&sal[&ch], &net, &cov)?)))
            .collect()
    }

    fn fit(&self, dir: &Path) -> Result<()> {
        for (k, (ch, data)) in self.causal_data()?.into_iter().enumerate() {
            let mcmc = crate::causal::McmcConfig {
                seed: split_seed(self.cfg.causal.seed, k as u64),
                ..self.cfg.causal.mcmc()
            };
            let post = fit(&data, &mcmc)?;
            post.write_dir(&dir.join(ch.as_str()), &data.prior_rate)?;
        }
        Ok(())
    }

    fn impact(&self) -> Result<()> {
        for (k, (ch, data)) in self.causal_data()?.into_iter().enumerate() {
            let model = FittedModel::read_json(&self.out.join(model_artifact(ch)))?;
            let rows = estimate_all(&model, &data, split_seed(self.cfg.causal.impact_seed, k as u64))?;
            write_impacts_csv(&rows, &self.out.join(impact_artifact(ch)))?;
        }
        Ok(())
    }

    fn report(&self, dir: &Path) -> Result<()> {
        let corpus = self.corpus()?;
        let filtered = corpus.filter(&self.cfg.report.filter)?;
        let outlets = outlet_ids(&corpus);
        let channels = self.channels()?;
        let impacts: Vec<(ChannelFilter, Vec<ImpactEstimate>)> = channels
            .iter()
            .map(|&ch| Ok((ch, read_impacts_csv(&self.out.join(impact_artifact(ch)))?)))
            .collect::<Result<_>>()?;
        let inputs = report::ReportInputs {
            corpus: &corpus,
            filtered: &filtered,
            outlets: &outlets,
            clusters: &self.clusters_of(&filtered)?,
            salience: &self.channel_salience(&outlets)?,
            salience_cfg: &self.cfg.salience,
            network: &self.prior_network(&outlets)?,
            impacts: &impacts,
            settings: &self.cfg.report,
        };
        report::write_report(&inputs, dir)
    }
}

fn outlet_ids(corpus: &Corpus) -> Vec<String> {
    corpus.outlets().iter().map(|o| o.outlet_id.clone()).collect()
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}
