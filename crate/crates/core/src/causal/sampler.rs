//! Metropolis-within-Gibbs sampler for the outcome model and latent network.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::diagnostics::{effective_sample_size, split_rhat, ParamDiagnostic, Summary};
use super::{CausalData, GlmmParams, EPS_VARIANCE};
use crate::error::{Error, Result};

const PRIOR_VAR: f64 = 100.0;
const SINGLE_TARGET: f64 = 0.44;
const BLOCK_TARGET: f64 = 0.234;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in_fraction: f64,
    pub n_hop: usize,
    pub seed: u64,
    /// Cap on thinned draws kept for counterfactual imputation.
    pub max_draws: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 5000,
            burn_in_fraction: 0.5,
            n_hop: 2,
            seed: 0,
            max_draws: 1000,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.chains < 2 {
            problems.push(format!("chains = {}; at least 2 required", self.chains));
        }
        if !(1..=4).contains(&self.n_hop) {
            problems.push(format!("n_hop = {}; must be in 1..=4", self.n_hop));
        }
        if !(self.burn_in_fraction > 0.0 && self.burn_in_fraction < 1.0) {
            problems.push(format!("burn_in_fraction = {}; must be in (0, 1)", self.burn_in_fraction));
        }
        if self.iterations < 20 || self.kept() < 8 {
            problems.push(format!("iterations = {}; too few to keep draws", self.iterations));
        }
        if self.max_draws == 0 {
            problems.push("max_draws must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn burn_in(&self) -> usize {
        (self.iterations as f64 * self.burn_in_fraction).round() as usize
    }

    pub fn kept(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in())
    }
}

/// One retained joint draw of parameters and latent edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub chain: usize,
    pub iteration: usize,
    pub params: GlmmParams,
    /// Weights of the free edges, aligned with [`FittedModel::edges`].
    pub edge_values: Vec<u32>,
}

/// What counterfactual imputation needs from a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub outlets: Vec<String>,
    pub channel: String,
    pub n_hop: usize,
    pub design_names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub draws: Vec<PosteriorDraw>,
}

impl FittedModel {
    pub fn adjacency(&self, draw: &PosteriorDraw) -> DMatrix<f64> {
        let n = self.outlets.len();
        let mut a = DMatrix::zeros(n, n);
        for (&(u, v), &w) in self.edges.iter().zip(&draw.edge_values) {
            a[(u, v)] = f64::from(w);
        }
        a
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub model: FittedModel,
    /// Scalar parameters in trace order: `tau`, `gamma_k`, `beta_<name>`, `mu`, `eps_<outlet>`.
    pub param_names: Vec<String>,
    /// `traces[chain][param][t]` over the post-burn-in iterations.
    pub traces: Vec<Vec<Vec<f64>>>,
    pub burn_in: usize,
    pub diagnostics: Vec<ParamDiagnostic>,
    pub acceptance: Vec<(String, f64)>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl Posterior {
    fn index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|p| p == name)
    }

    /// All retained values of a scalar parameter, chains concatenated.
    pub fn samples(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.index(name)?;
        Some(self.traces.iter().flat_map(|c| c[k].iter().copied()).collect())
    }

    pub fn summary(&self, name: &str) -> Option<Summary> {
        self.samples(name).map(|s| Summary::of(&s))
    }

    pub fn diagnostic(&self, name: &str) -> Option<&ParamDiagnostic> {
        self.diagnostics.iter().find(|d| d.parameter == name)
    }

    /// Posterior mean weight of each free edge over the retained draws.
    pub fn edge_means(&self) -> Vec<f64> {
        let m = &self.model;
        let n = m.draws.len().max(1) as f64;
        (0..m.edges.len())
            .map(|e| m.draws.iter().map(|d| f64::from(d.edge_values[e])).sum::<f64>() / n)
            .collect()
    }

    /// Writes `<param>.csv` traces, `diagnostics.csv`, `edges.csv`,
    /// `summary.json` and the retained draws as `model.json`.
    pub fn write_dir(&self, dir: &Path, prior_rate: &DMatrix<f64>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, name) in self.param_names.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", file_stem(name))))?;
            w.write_record(["chain", "iteration", "value"])?;
            for (c, chain) in self.traces.iter().enumerate() {
                for (t, v) in chain[k].iter().enumerate() {
                    w.write_record([c.to_string(), (self.burn_in + t).to_string(), v.to_string()])?;
                }
            }
            w.flush().map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
        w.write_record(["parameter", "rhat", "ess"])?;
        for d in &self.diagnostics {
            w.write_record([d.parameter.clone(), format!("{:.6}", d.rhat), format!("{:.1}", d.ess)])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("edges.csv"))?;
        w.write_record(["source", "target", "prior_rate", "posterior_mean"])?;
        for (&(u, v), mean) in self.model.edges.iter().zip(self.edge_means()) {
            w.write_record([
                self.model.outlets[u].clone(),
                self.model.outlets[v].clone(),
                format!("{:.6}", prior_rate[(u, v)]),
                format!("{mean:.6}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let summaries: std::collections::BTreeMap<&str, Summary> = self
            .param_names
            .iter()
            .map(|p| (p.as_str(), self.summary(p).expect("known parameter")))
            .collect();
        let doc = serde_json::json!({
            "channel": self.model.channel,
            "converged": self.converged,
            "warnings": self.warnings,
            "acceptance": self.acceptance.iter().cloned().collect::<std::collections::BTreeMap<_, _>>(),
            "parameters": summaries,
        });
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))?;
        self.model.write_json(&dir.join("model.json"))
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Data laid out for the sampler.
struct Prepared {
    n: usize,
    h: usize,
    p: usize,
    /// Outcome sums, row-major `i * n + j`.
    y: Vec<f64>,
    ycol: Vec<f64>,
    reps: f64,
    /// Design matrix, row-major `j * p + k`.
    x: Vec<f64>,
    edges: Vec<(usize, usize)>,
    rates: Vec<f64>,
    steps: Vec<u32>,
    /// Joint shift moves: `None` shifts `mu`, `Some(k)` shifts `beta_k`,
    /// compensated on the listed outlets' random effects.
    shifts: Vec<(Option<usize>, Vec<usize>)>,
}

impl Prepared {
    fn new(data: &CausalData, h: usize) -> Self {
        let n = data.n();
        let p = data.design.ncols();
        let mut y = vec![0.0; n * n];
        let mut ycol = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                y[i * n + j] = data.outcome_sum[(i, j)];
                ycol[j] += data.outcome_sum[(i, j)];
            }
        }
        let mut x = vec![0.0; n * p];
        for j in 0..n {
            for k in 0..p {
                x[j * p + k] = data.design[(j, k)];
            }
        }
        let mut edges = Vec::new();
        let mut rates = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let r = data.prior_rate[(i, j)];
                if i != j && r > 0.0 {
                    edges.push((i, j));
                    rates.push(r);
                }
            }
        }
        let steps = rates.iter().map(|r| (r.sqrt() / 2.0).round().max(1.0) as u32).collect();
        let mut shifts = vec![(None, (0..n).collect())];
        for k in 0..p {
            let col: Vec<f64> = (0..n).map(|j| x[j * p + k]).collect();
            let binary = col.iter().all(|&v| v == 0.0 || v == 1.0);
            let members: Vec<usize> = (0..n).filter(|&j| col[j] == 1.0).collect();
            if binary && !members.is_empty() && members.len() < n {
                shifts.push((Some(k), members));
            }
        }
        Self {
            n,
            h,
            p,
            y,
            ycol,
            reps: data.replicates as f64,
            x,
            edges,
            rates,
            steps,
            shifts,
        }
    }

    fn dim(&self) -> usize {
        2 + self.h + self.p
    }
}

fn ln_sigmoid(t: f64) -> f64 {
    -softplus(-t)
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Log density of a uniform(0, 1) variable expressed on the logit scale.
fn logit_prior(t: f64) -> f64 {
    ln_sigmoid(t) + ln_sigmoid(-t)
}

fn normal_prior(x: f64, var: f64) -> f64 {
    -0.5 * x * x / var
}

/// Log of `a! / b!` for nonnegative integers.
fn ln_factorial_ratio(a: u32, b: u32) -> f64 {
    if a >= b {
        (b + 1..=a).map(|t| f64::from(t).ln()).sum()
    } else {
        -(a + 1..=b).map(|t| f64::from(t).ln()).sum::<f64>()
    }
}

/// Robbins-Monro adaptation of a log step size during burn-in.
#[derive(Clone)]
struct Step {
    log_scale: f64,
    tries: u64,
    accepts: u64,
}

impl Step {
    fn new(scale: f64) -> Self {
        Self {
            log_scale: scale.ln(),
            tries: 0,
            accepts: 0,
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool, adapt: Option<(usize, f64)>) {
        self.tries += 1;
        self.accepts += u64::from(accepted);
        if let Some((t, target)) = adapt {
            let rate = (1.0 + t as f64).powf(-0.6).min(0.5);
            self.log_scale += rate * (f64::from(u8::from(accepted)) - target);
            self.log_scale = self.log_scale.clamp(-12.0, 4.0);
        }
    }
}

#[derive(Clone, Copy)]
enum Move {
    Tau,
    Theta(usize),
    Beta(usize),
    Mu,
}

struct Chain<'a> {
    d: &'a Prepared,
    rng: ChaCha8Rng,
    tau: f64,
    theta: Vec<f64>,
    beta: Vec<f64>,
    mu: f64,
    eps: Vec<f64>,
    a: Vec<f64>,
    avals: Vec<u32>,
    powers: Vec<Vec<f64>>,
    logs: Vec<Vec<f64>>,
    base: Vec<f64>,
    ebase: Vec<f64>,
    colsum: Vec<f64>,
    tbase: f64,
    xb: Vec<f64>,
    scratch_base: Vec<f64>,
    scratch_ebase: Vec<f64>,
    scratch_colsum: Vec<f64>,
    mark: Vec<u32>,
    stamp: u32,
    singles: Vec<Step>,
    eps_steps: Vec<Step>,
    block: Step,
    block_chol: Option<DMatrix<f64>>,
    edge_tries: u64,
    edge_accepts: u64,
    shift_tries: u64,
    shift_accepts: u64,
}

impl<'a> Chain<'a> {
    fn new(d: &'a Prepared, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d.n;
        let normal = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        };
        let mean_y = d.y.iter().sum::<f64>() / (d.reps * (n * n) as f64);
        let tau = normal(&mut rng, 1.0);
        let theta = (0..d.h).map(|_| normal(&mut rng, 1.0)).collect();
        let beta = (0..d.p).map(|_| normal(&mut rng, 0.5)).collect();
        let mu = (mean_y + 0.5).ln() + normal(&mut rng, 0.5);
        let eps = (0..n).map(|_| normal(&mut rng, EPS_VARIANCE.sqrt())).collect();
        let mut a = vec![0.0; n * n];
        let mut avals = Vec::with_capacity(d.edges.len());
        for (&(u, v), &r) in d.edges.iter().zip(&d.rates) {
            let w = Poisson::new(r).map(|p| p.sample(&mut rng)).unwrap_or(0.0) as u32;
            a[u * n + v] = f64::from(w);
            avals.push(w);
        }
        let dim = d.dim();
        let mut c = Self {
            d,
            rng,
            tau,
            theta,
            beta,
            mu,
            eps,
            a,
            avals,
            powers: Vec::new(),
            logs: Vec::new(),
            base: vec![0.0; n * n],
            ebase: vec![0.0; n * n],
            colsum: vec![0.0; n],
            tbase: 0.0,
            xb: vec![0.0; n],
            scratch_base: vec![0.0; n * n],
            scratch_ebase: vec![0.0; n * n],
            scratch_colsum: vec![0.0; n],
            mark: vec![0; n * n],
            stamp: 0,
            singles: vec![Step::new(0.1); dim],
            eps_steps: vec![Step::new(0.3); n],
            block: Step::new(1.0),
            block_chol: None,
            edge_tries: 0,
            edge_accepts: 0,
            shift_tries: 0,
            shift_accepts: 0,
        };
        c.rebuild_powers();
        c.xb = c.compute_xb(&c.beta.clone());
        c.refresh();
        c
    }

    fn rebuild_powers(&mut self) {
        let n = self.d.n;
        let mut powers = vec![self.a.clone()];
        for _ in 1..self.d.h {
            let prev = powers.last().expect("nonempty");
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    let p = prev[i * n + k];
                    if p != 0.0 {
                        for j in 0..n {
                            next[i * n + j] += p * self.a[k * n + j];
                        }
                    }
                }
            }
            powers.push(next);
        }
        self.logs = powers
            .iter()
            .map(|p| p.iter().map(|v| v.ln_1p()).collect())
            .collect();
        self.powers = powers;
    }

    fn coefficients(theta: &[f64]) -> Vec<f64> {
        let mut c = 1.0;
        theta
            .iter()
            .map(|t| {
                c *= sigmoid(*t);
                c
            })
            .collect()
    }

    fn compute_xb(&self, beta: &[f64]) -> Vec<f64> {
        let (n, p) = (self.d.n, self.d.p);
        (0..n)
            .map(|j| (0..p).map(|k| self.d.x[j * p + k] * beta[k]).sum())
            .collect()
    }

    /// Fills the scratch buffers with the source/exposure part of the
    /// log-rate for the given `tau` and decay logits; returns its `y`-weighted sum.
    fn fill_scratch(&mut self, tau: f64, theta: &[f64]) -> f64 {
        let n = self.d.n;
        let coef = Self::coefficients(theta);
        self.scratch_colsum.iter_mut().for_each(|v| *v = 0.0);
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                let mut s = if i == j { 1.0 } else { 0.0 };
                for (c, l) in coef.iter().zip(&self.logs) {
                    s += c * l[idx];
                }
                let b = tau * s;
                let e = b.exp();
                self.scratch_base[idx] = b;
                self.scratch_ebase[idx] = e;
                self.scratch_colsum[j] += e;
                t += self.d.y[idx] * b;
            }
        }
        t
    }

    fn install_scratch(&mut self, tbase: f64) {
        std::mem::swap(&mut self.base, &mut self.scratch_base);
        std::mem::swap(&mut self.ebase, &mut self.scratch_ebase);
        std::mem::swap(&mut self.colsum, &mut self.scratch_colsum);
        self.tbase = tbase;
    }

    fn refresh(&mut self) {
        let theta = self.theta.clone();
        let t = self.fill_scratch(self.tau, &theta);
        self.install_scratch(t);
    }

    fn offset_ll(&self, xb: &[f64], mu: f64, eps: &[f64], colsum: &[f64]) -> f64 {
        (0..self.d.n)
            .map(|j| {
                let off = xb[j] + mu + eps[j];
                self.d.ycol[j] * off - self.d.reps * off.exp() * colsum[j]
            })
            .sum()
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        log_ratio >= 0.0 || self.rng.gen::<f64>().ln() < log_ratio
    }

    fn global_prior(tau: f64, theta: &[f64], beta: &[f64], mu: f64) -> f64 {
        normal_prior(tau, PRIOR_VAR)
            + theta.iter().map(|t| logit_prior(*t)).sum::<f64>()
            + beta.iter().map(|b| normal_prior(*b, PRIOR_VAR)).sum::<f64>()
            + normal_prior(mu, PRIOR_VAR)
    }

    fn globals(&self) -> Vec<f64> {
        let mut g = vec![self.tau];
        g.extend(&self.theta);
        g.extend(&self.beta);
        g.push(self.mu);
        g
    }

    fn single_site(&mut self, which: Move, slot: usize, adapt: Option<usize>) {
        let step = self.singles[slot].scale() * self.normal();
        let accepted = match which {
            Move::Tau | Move::Theta(_) => {
                let mut tau = self.tau;
                let mut theta = self.theta.clone();
                match which {
                    Move::Tau => tau += step,
                    Move::Theta(k) => theta[k] += step,
                    _ => unreachable!(),
                }
                let old = self.tbase + self.offset_ll(&self.xb, self.mu, &self.eps, &self.colsum)
                    + normal_prior(self.tau, PRIOR_VAR)
                    + self.theta.iter().map(|t| logit_prior(*t)).sum::<f64>();
                let t = self.fill_scratch(tau, &theta);
                let new = t + self.offset_ll(&self.xb, self.mu, &self.eps, &self.scratch_colsum)
                    + normal_prior(tau, PRIOR_VAR)
                    + theta.iter().map(|t| logit_prior(*t)).sum::<f64>();
                let ok = self.accept(new - old);
                if ok {
                    self.tau = tau;
                    self.theta = theta;
                    self.install_scratch(t);
                }
                ok
            }
            Move::Beta(k) => {
                let p = self.d.p;
                let mut delta = 0.0;
                for j in 0..self.d.n {
                    let dx = step * self.d.x[j * p + k];
                    if dx != 0.0 {
                        let off = self.xb[j] + self.mu + self.eps[j];
                        delta += self.d.ycol[j] * dx - self.d.reps * off.exp() * self.colsum[j] * dx.exp_m1();
                    }
                }
                delta += normal_prior(self.beta[k] + step, PRIOR_VAR) - normal_prior(self.beta[k], PRIOR_VAR);
                let ok = self.accept(delta);
                if ok {
                    self.beta[k] += step;
                    for j in 0..self.d.n {
                        self.xb[j] += step * self.d.x[j * p + k];
                    }
                }
                ok
            }
            Move::Mu => {
                let mut delta = 0.0;
                for j in 0..self.d.n {
                    let off = self.xb[j] + self.mu + self.eps[j];
                    delta += self.d.ycol[j] * step - self.d.reps * off.exp() * self.colsum[j] * step.exp_m1();
                }
                delta += normal_prior(self.mu + step, PRIOR_VAR) - normal_prior(self.mu, PRIOR_VAR);
                let ok = self.accept(delta);
                if ok {
                    self.mu += step;
                }
                ok
            }
        };
        self.singles[slot].record(accepted, adapt.map(|t| (t, SINGLE_TARGET)));
    }

    fn block_update(&mut self, adapt: Option<usize>) {
        let Some(chol) = self.block_chol.clone() else {
            return;
        };
        let dim = self.d.dim();
        let z = DVector::from_iterator(dim, (0..dim).map(|_| self.normal()));
        let jump = chol * z * self.block.scale();
        let g: Vec<f64> = self.globals().iter().zip(jump.iter()).map(|(a, b)| a + b).collect();
        let h = self.d.h;
        let tau = g[0];
        let theta = g[1..1 + h].to_vec();
        let beta = g[1 + h..1 + h + self.d.p].to_vec();
        let mu = g[dim - 1];
        let old = self.tbase
            + self.offset_ll(&self.xb, self.mu, &self.eps, &self.colsum)
            + Self::global_prior(self.tau, &self.theta, &self.beta, self.mu);
        let xb = self.compute_xb(&beta);
        let t = self.fill_scratch(tau, &theta);
        let new = t + self.offset_ll(&xb, mu, &self.eps, &self.scratch_colsum)
            + Self::global_prior(tau, &theta, &beta, mu);
        let ok = self.accept(new - old);
        if ok {
            self.tau = tau;
            self.theta = theta;
            self.beta = beta;
            self.mu = mu;
            self.xb = xb;
            self.install_scratch(t);
        }
        self.block.record(ok, adapt.map(|t| (t, BLOCK_TARGET)));
    }

    fn set_block_covariance(&mut self, history: &[Vec<f64>]) {
        let dim = self.d.dim();
        if history.len() < 2 * dim + 10 {
            return;
        }
        let m = history.len() as f64;
        let mut mean = vec![0.0; dim];
        for g in history {
            for (a, b) in mean.iter_mut().zip(g) {
                *a += b / m;
            }
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for g in history {
            for r in 0..dim {
                for c in 0..dim {
                    cov[(r, c)] += (g[r] - mean[r]) * (g[c] - mean[c]) / (m - 1.0);
                }
            }
        }
        let scale = 2.38 * 2.38 / dim as f64;
        let mut prop = cov * scale;
        for k in 0..dim {
            prop[(k, k)] += 1e-8;
        }
        self.block_chol = prop.cholesky().map(|c| c.l());
    }

    fn eps_update(&mut self, j: usize, adapt: Option<usize>) {
        let step = self.eps_steps[j].scale() * self.normal();
        let off = self.xb[j] + self.mu + self.eps[j];
        let delta = self.d.ycol[j] * step - self.d.reps * off.exp() * self.colsum[j] * step.exp_m1()
            + normal_prior(self.eps[j] + step, EPS_VARIANCE)
            - normal_prior(self.eps[j], EPS_VARIANCE);
        let ok = self.accept(delta);
        if ok {
            self.eps[j] += step;
        }
        self.eps_steps[j].record(ok, adapt.map(|t| (t, SINGLE_TARGET)));
    }

    /// Moves an intercept-like coefficient and the matching random effects in
    /// opposite directions, leaving every log-rate unchanged.
    fn shift_update(&mut self, g: usize) {
        let d = self.d;
        let (target, members) = &d.shifts[g];
        let sd = 2.0 * (EPS_VARIANCE / members.len() as f64).sqrt();
        let c = sd * self.normal();
        let coef = match target {
            None => self.mu,
            Some(k) => self.beta[*k],
        };
        let mut delta = normal_prior(coef + c, PRIOR_VAR) - normal_prior(coef, PRIOR_VAR);
        for &j in members {
            delta += normal_prior(self.eps[j] - c, EPS_VARIANCE) - normal_prior(self.eps[j], EPS_VARIANCE);
        }
        self.shift_tries += 1;
        if self.accept(delta) {
            self.shift_accepts += 1;
            match target {
                None => self.mu += c,
                Some(k) => {
                    let k = *k;
                    self.beta[k] += c;
                    for j in 0..d.n {
                        self.xb[j] += c * d.x[j * d.p + k];
                    }
                }
            }
            for &j in members {
                self.eps[j] -= c;
            }
        }
    }

    fn edge_update(&mut self, e: usize) {
        let d = self.d;
        let n = d.n;
        let (u, v) = d.edges[e];
        let old = self.avals[e];
        let s = self.rng.gen_range(1..=d.steps[e]) as i64;
        let new = if self.rng.gen::<bool>() { i64::from(old) + s } else { i64::from(old) - s };
        self.edge_tries += 1;
        if new < 0 {
            return;
        }
        let new = new as u32;
        let delta = f64::from(new) - f64::from(old);
        let mut log_ratio = delta * d.rates[e].ln() - ln_factorial_ratio(new, old);

        // (A + dE)^h - A^h = d * sum_k (A + dE)^k e_u (e_v' A^(h-1-k))
        let h = d.h;
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(h);
        let mut col_supp: Vec<Vec<usize>> = Vec::with_capacity(h);
        let mut c0 = vec![0.0; n];
        c0[u] = 1.0;
        cols.push(c0);
        col_supp.push(vec![u]);
        for k in 1..h {
            let prev = &cols[k - 1];
            let mut next = vec![0.0; n];
            for &m in &col_supp[k - 1] {
                let x = prev[m];
                for (i, t) in next.iter_mut().enumerate() {
                    let mut w = self.a[i * n + m];
                    if i == u && m == v {
                        w += delta;
                    }
                    *t += w * x;
                }
            }
            col_supp.push((0..n).filter(|&i| next[i] != 0.0).collect());
            cols.push(next);
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(h);
        let mut row_supp: Vec<Vec<usize>> = Vec::with_capacity(h);
        let mut r0 = vec![0.0; n];
        r0[v] = 1.0;
        rows.push(r0);
        row_supp.push(vec![v]);
        for m in 1..h {
            let r: Vec<f64> = self.powers[m - 1][v * n..(v + 1) * n].to_vec();
            row_supp.push((0..n).filter(|&j| r[j] != 0.0).collect());
            rows.push(r);
        }

        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
        let mut touched = Vec::new();
        for (k, cols) in col_supp.iter().enumerate().take(h) {
            for rows_m in row_supp.iter().take(h - k) {
                for &i in cols {
                    for &j in rows_m {
                        let idx = i * n + j;
                        if self.mark[idx] != self.stamp {
                            self.mark[idx] = self.stamp;
                            touched.push(idx);
                        }
                    }
                }
            }
        }

        let coef = Self::coefficients(&self.theta);
        let mut new_p = vec![0.0; touched.len() * h];
        let mut new_base = vec![0.0; touched.len()];
        for (t, &idx) in touched.iter().enumerate() {
            let (i, j) = (idx / n, idx % n);
            let mut s = if i == j { 1.0 } else { 0.0 };
            for hh in 0..h {
                let mut dp = 0.0;
                for k in 0..=hh {
                    dp += cols[k][i] * rows[hh - k][j];
                }
                let p = (self.powers[hh][idx] + delta * dp).max(0.0);
                new_p[t * h + hh] = p;
                s += coef[hh] * p.ln_1p();
            }
            let b = self.tau * s;
            new_base[t] = b;
            let off = self.xb[j] + self.mu + self.eps[j];
            log_ratio += d.y[idx] * (b - self.base[idx]) - d.reps * off.exp() * (b.exp() - self.ebase[idx]);
        }
        if !self.accept(log_ratio) {
            return;
        }
        self.edge_accepts += 1;
        for (t, &idx) in touched.iter().enumerate() {
            let j = idx % n;
            for hh in 0..h {
                let p = new_p[t * h + hh];
                self.powers[hh][idx] = p;
                self.logs[hh][idx] = p.ln_1p();
            }
            let b = new_base[t];
            let e = b.exp();
            self.tbase += d.y[idx] * (b - self.base[idx]);
            self.colsum[j] += e - self.ebase[idx];
            self.base[idx] = b;
            self.ebase[idx] = e;
        }
        self.a[u * n + v] = f64::from(new);
        self.avals[e] = new;
    }

    fn params(&self) -> GlmmParams {
        GlmmParams {
            tau: self.tau,
            gamma: self.theta.iter().map(|t| sigmoid(*t)).collect(),
            beta: self.beta.clone(),
            mu: self.mu,
            eps: self.eps.clone(),
        }
    }

    fn scalars(&self) -> Vec<f64> {
        let mut s = vec![self.tau];
        s.extend(self.theta.iter().map(|t| sigmoid(*t)));
        s.extend(&self.beta);
        s.push(self.mu);
        s.extend(&self.eps);
        s
    }
}

struct ChainOutput {
    traces: Vec<Vec<f64>>,
    draws: Vec<PosteriorDraw>,
    acceptance: Vec<(String, u64, u64)>,
}

fn run_chain(d: &Prepared, cfg: &McmcConfig, chain: usize, seed: u64, thin: usize) -> ChainOutput {
    let mut c = Chain::new(d, seed);
    let burn = cfg.burn_in();
    let single_phase = burn / 4;
    let history_start = burn / 8;
    let n_scalars = 2 + d.h + d.p + d.n;
    let mut traces = vec![Vec::with_capacity(cfg.kept()); n_scalars];
    let mut draws = Vec::new();
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut edge_order: Vec<usize> = (0..d.edges.len()).collect();
    let moves: Vec<Move> = std::iter::once(Move::Tau)
        .chain((0..d.h).map(Move::Theta))
        .chain((0..d.p).map(Move::Beta))
        .chain(std::iter::once(Move::Mu))
        .collect();

    for it in 0..cfg.iterations {
        let adapt = (it < burn).then_some(it);
        edge_order.shuffle(&mut c.rng);
        for &e in &edge_order {
            c.edge_update(e);
        }
        c.refresh();
        if it >= single_phase {
            c.block_update(adapt);
        }
        for (slot, &m) in moves.iter().enumerate() {
            c.single_site(m, slot, adapt);
        }
        for j in 0..d.n {
            c.eps_update(j, adapt);
        }
        for g in 0..d.shifts.len() {
            c.shift_update(g);
        }
        if it < burn {
            if it >= history_start {
                history.push(c.globals());
            }
            let since = it + 1 - single_phase.min(it + 1);
            if it + 1 >= single_phase && since.is_multiple_of(200) {
                c.set_block_covariance(&history);
            }
        } else {
            for (k, v) in c.scalars().into_iter().enumerate() {
                traces[k].push(v);
            }
            let t = it - burn;
            if (t + 1).is_multiple_of(thin) {
                draws.push(PosteriorDraw {
                    chain,
                    iteration: it,
                    params: c.params(),
                    edge_values: c.avals.clone(),
                });
            }
        }
    }
    let sum = |steps: &[Step]| {
        steps
            .iter()
            .fold((0, 0), |(a, t), s| (a + s.accepts, t + s.tries))
    };
    let mut acceptance = vec![
        ("tau".to_string(), c.singles[0].accepts, c.singles[0].tries),
        ("block".to_string(), c.block.accepts, c.block.tries),
        ("edges".to_string(), c.edge_accepts, c.edge_tries),
        ("shift".to_string(), c.shift_accepts, c.shift_tries),
    ];
    let (a, t) = sum(&c.singles[1..1 + d.h]);
    acceptance.push(("gamma".into(), a, t));
    let (a, t) = sum(&c.singles[1 + d.h..]);
    acceptance.push(("beta_mu".into(), a, t));
    let (a, t) = sum(&c.eps_steps);
    acceptance.push(("eps".into(), a, t));
    ChainOutput {
        traces,
        draws,
        acceptance,
    }
}

/// Samples the joint posterior of the regression parameters and the latent
/// network. Chains run on separate threads with seeds derived from `cfg.seed`.
pub fn fit(data: &CausalData, cfg: &McmcConfig) -> Result<Posterior> {
    cfg.validate()?;
    let d = Prepared::new(data, cfg.n_hop);
    if data.n() < 2 {
        return Err(Error::InvalidArgument("at least 2 outlets required".into()));
    }
    let total = cfg.chains * cfg.kept();
    let thin = total.div_ceil(cfg.max_draws).max(1);
    let outputs: Vec<ChainOutput> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.chains)
            .map(|c| {
                let d = &d;
                scope.spawn(move || run_chain(d, cfg, c, crate::split_seed(cfg.seed, c as u64), thin))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });

    let mut param_names = vec!["tau".to_string()];
    param_names.extend((1..=cfg.n_hop).map(|k| format!("gamma_{k}")));
    param_names.extend(data.design_names.iter().map(|b| format!("beta_{b}")));
    param_names.push("mu".into());
    param_names.extend(data.outlets.iter().map(|o| format!("eps_{o}")));

    let mut acceptance: Vec<(String, f64)> = Vec::new();
    for (k, (name, _, _)) in outputs[0].acceptance.iter().enumerate() {
        let (a, t) = outputs
            .iter()
            .fold((0, 0), |(a, t), o| (a + o.acceptance[k].1, t + o.acceptance[k].2));
        acceptance.push((name.clone(), if t == 0 { 0.0 } else { a as f64 / t as f64 }));
    }

    let mut diagnostics = Vec::new();
    let mut warnings = Vec::new();
    for (k, name) in param_names.iter().enumerate() {
        let chains: Vec<&[f64]> = outputs.iter().map(|o| o.traces[k].as_slice()).collect();
        let rhat = split_rhat(&chains);
        let ess = effective_sample_size(&chains);
        if rhat.is_nan() || rhat > 1.1 {
            warnings.push(format!("{name}: split R-hat {rhat:.3} exceeds 1.1"));
        }
        diagnostics.push(ParamDiagnostic {
            parameter: name.clone(),
            rhat,
            ess,
        });
    }
    for w in &warnings {
        log::warn!("channel {}: {w}", data.channel);
    }

    let mut traces = Vec::with_capacity(outputs.len());
    let mut draws = Vec::new();
    for o in outputs {
        traces.push(o.traces);
        draws.extend(o.draws);
    }
    Ok(Posterior {
        model: FittedModel {
            outlets: data.outlets.clone(),
            channel: data.channel.clone(),
            n_hop: cfg.n_hop,
            design_names: data.design_names.clone(),
            edges: d.edges.clone(),
            draws,
        },
        param_names,
        traces,
        burn_in: cfg.burn_in(),
        diagnostics,
        acceptance,
        converged: warnings.is_empty(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuild::{network_from_matrix, NodeCovariates};

    fn constant_data(n: usize, c: f64, reps: usize) -> CausalData {
        let outlets: Vec<String> = (0..n).map(|i| format!("o{i}")).collect();
        let net = network_from_matrix(outlets, DMatrix::zeros(n, n)).unwrap();
        let cov = NodeCovariates::from_partition(&net, vec![0; n], 1).unwrap();
        let y = DMatrix::from_element(n, n, c);
        let mut data = CausalData::new("all", &vec![y; reps], &net, &cov, DMatrix::zeros(n, n)).unwrap();
        data.design = DMatrix::zeros(n, 0);
        data.design_names.clear();
        data
    }

    #[test]
    fn config_validation_lists_problems() {
        let cfg = McmcConfig {
            chains: 1,
            n_hop: 7,
            burn_in_fraction: 1.0,
            ..McmcConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 4, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn factorial_ratio() {
        assert!((ln_factorial_ratio(5, 3) - 20f64.ln()).abs() < 1e-12);
        assert!((ln_factorial_ratio(3, 5) + 20f64.ln()).abs() < 1e-12);
        assert_eq!(ln_factorial_ratio(4, 4), 0.0);
    }

    #[test]
    fn logit_prior_is_uniform_jacobian() {
        for t in [-3.0, 0.0, 1.7] {
            let s = sigmoid(t);
            assert!((logit_prior(t) - (s * (1.0 - s)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn incremental_edges_match_rebuild() {
        let n = 6;
        let outlets: Vec<String> = (0..n).map(|i| format!("o{i}")).collect();
        let mut rate = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && (i + 2 * j) % 3 != 0 {
                    rate[(i, j)] = 1.0 + ((i * 7 + j) % 4) as f64;
                }
            }
        }
        let net = network_from_matrix(outlets, rate).unwrap();
        let cov = NodeCovariates::from_partition(&net, vec![0; n], 1).unwrap();
        let y = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j * 5) % 7) as f64);
        let data = CausalData::new("all", &[y], &net, &cov, DMatrix::zeros(n, n)).unwrap();
        let d = Prepared::new(&data, 3);
        let mut c = Chain::new(&d, 5);
        for _ in 0..20 {
            for e in 0..d.edges.len() {
                c.edge_update(e);
            }
        }
        assert!(c.edge_accepts > 0);
        let (powers, base, colsum, tbase) = (c.powers.clone(), c.base.clone(), c.colsum.clone(), c.tbase);
        c.rebuild_powers();
        c.refresh();
        for (p, q) in powers.iter().zip(&c.powers) {
            assert_eq!(p, q);
        }
        for (x, y) in base.iter().zip(&c.base) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in colsum.iter().zip(&c.colsum) {
            assert!((x - y).abs() < 1e-8 * y.abs().max(1.0));
        }
        assert!((tbase - c.tbase).abs() < 1e-7 * tbase.abs().max(1.0));
    }

    #[test]
    fn constant_outcomes_pin_baseline() {
        let data = constant_data(4, 7.0, 5);
        let cfg = McmcConfig {
            chains: 2,
            iterations: 1500,
            n_hop: 1,
            seed: 3,
            ..McmcConfig::default()
        };
        let post = fit(&data, &cfg).unwrap();
        // Off-diagonal rates are exp(mu + eps_j); the random effects average out.
        let mu = post.summary("mu").unwrap();
        assert!((mu.mean - 7f64.ln()).abs() < 0.3, "{mu:?}");
        assert!(post.model.draws.len() <= cfg.max_draws);
        assert_eq!(post.traces.len(), 2);
        assert_eq!(post.traces[0][0].len(), cfg.kept());
    }

    #[test]
    fn fit_is_deterministic() {
        let data = constant_data(3, 2.0, 1);
        let cfg = McmcConfig {
            chains: 2,
            iterations: 200,
            n_hop: 2,
            seed: 9,
            ..McmcConfig::default()
        };
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn fit_rejects_single_chain() {
        let data = constant_data(3, 2.0, 1);
        let cfg = McmcConfig {
            chains: 1,
            ..McmcConfig::default()
        };
        assert!(matches!(fit(&data, &cfg), Err(Error::Config(_))));
    }
}
