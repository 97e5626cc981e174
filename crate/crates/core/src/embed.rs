//! Text embedding and principal-component reduction.
//!
//! The built-in provider hashes character 3- to 5-grams into a fixed
//! 256-dimensional signed feature vector. External models are reached through
//! [`CommandProvider`], which exchanges plain files with a subprocess.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const DEFAULT_COMPONENTS: usize = 70;
pub const HASHING_DIM: usize = 256;
const EXACT_PCA_MAX_ROWS: usize = 10_000;

pub trait EmbeddingProvider {
    /// Identifies the model; part of the embedding cache key.
    fn tag(&self) -> String;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

/// Signed feature hashing of character n-grams (n = 3..=5).
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashingEmbedder {
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let normalized: String = text
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        let chars: Vec<char> = format!(" {normalized} ").chars().collect();
        let mut v = vec![0.0; HASHING_DIM];
        let mut buf = String::new();
        for n in 3..=5 {
            if chars.len() < n {
                continue;
            }
            for w in chars.windows(n) {
                buf.clear();
                buf.extend(w);
                let h = fnv1a(buf.as_bytes());
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v[(h % HASHING_DIM as u64) as usize] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every n-gram cancelled out; fall back to a one-hot on the whole text
            v[(fnv1a(normalized.as_bytes()) % HASHING_DIM as u64) as usize] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn tag(&self) -> String {
        format!("builtin-ngram-hash-{HASHING_DIM}")
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    /// Comma-separated rows.
    Csv,
    /// Row-major little-endian f32 with no header.
    F32Le,
}

/// Runs an external embedding command.
///
/// `{input}` and `{output}` in `args` are replaced by the request file (one
/// text per line) and the response file. Row order must be preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CommandProvider {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub model_tag: String,
    pub format: MatrixFormat,
    /// Needed for `f32_le` responses.
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

fn default_retries() -> u32 {
    3
}

impl CommandProvider {
    fn run_once(&self, texts: &[&str], dir: &Path) -> Result<Vec<Vec<f64>>> {
        let input = dir.join("request.txt");
        let output = dir.join(match self.format {
            MatrixFormat::Csv => "response.csv",
            MatrixFormat::F32Le => "response.bin",
        });
        {
            let mut w = BufWriter::new(File::create(&input).map_err(|e| Error::io(&input, e))?);
            for t in texts {
                let flat = t.replace(['\n', '\r'], " ");
                writeln!(w, "{flat}").map_err(|e| Error::io(&input, e))?;
            }
            w.flush().map_err(|e| Error::io(&input, e))?;
        }
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
            })
            .collect();
        let status = Command::new(&self.program)
            .args(&args)
            .status()
            .map_err(|e| Error::Provider(format!("cannot start `{}`: {e}", self.program)))?;
        if !status.success() {
            return Err(Error::Provider(format!("`{}` exited with {status}", self.program)));
        }
        let rows = match self.format {
            MatrixFormat::Csv => read_csv_matrix(&output)?,
            MatrixFormat::F32Le => {
                let dim = self
                    .dim
                    .ok_or_else(|| Error::Provider("f32_le format needs `dim`".into()))?;
                read_f32_matrix(&output, dim)?
            }
        };
        if rows.len() != texts.len() {
            return Err(Error::Provider(format!(
                "expected {} rows, got {}",
                texts.len(),
                rows.len()
            )));
        }
        Ok(rows)
    }
}

impl EmbeddingProvider for CommandProvider {
    fn tag(&self) -> String {
        format!("command:{}", self.model_tag)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let base = self.work_dir.clone().unwrap_or_else(std::env::temp_dir);
        let dir = base.join(format!("quoteflow-embed-{}", std::process::id()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut last = None;
        for attempt in 0..=self.max_retries {
            match self.run_once(texts, &dir) {
                Ok(rows) => {
                    let _ = fs::remove_dir_all(&dir);
                    return Ok(rows);
                }
                Err(e) => {
                    log::warn!("embedding attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        let _ = fs::remove_dir_all(&dir);
        Err(last.unwrap_or_else(|| Error::Provider("no attempts made".into())))
    }
}

fn read_csv_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Provider(format!("response line {}: {e}", n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_f32_matrix(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if dim == 0 || bytes.len() % (4 * dim) != 0 {
        return Err(Error::Provider(format!(
            "response of {} bytes is not a multiple of {dim} f32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4 * dim)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect()
        })
        .collect())
}

/// One unit-norm row per quote, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub quote_ids: Vec<String>,
    pub vectors: DMatrix<f64>,
    pub provider_tag: String,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn rows(&self) -> usize {
        self.vectors.nrows()
    }
}

pub fn embed(corpus: &Corpus, provider: &dyn EmbeddingProvider) -> Result<EmbeddingMatrix> {
    embed_texts(&corpus.quote_ids(), &corpus.texts(), provider, 512)
}

pub fn embed_texts(
    quote_ids: &[String],
    texts: &[&str],
    provider: &dyn EmbeddingProvider,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    if quote_ids.len() != texts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for {} texts",
            quote_ids.len(),
            texts.len()
        )));
    }
    let mut dim = None;
    let mut data = Vec::with_capacity(texts.len() * HASHING_DIM);
    for chunk in texts.chunks(batch_size.max(1)) {
        let rows = provider.embed_batch(chunk)?;
        if rows.len() != chunk.len() {
            return Err(Error::Provider(format!(
                "provider returned {} rows for {} texts",
                rows.len(),
                chunk.len()
            )));
        }
        for mut row in rows {
            let d = *dim.get_or_insert(row.len());
            if row.len() != d || d == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "embedding of dimension {} after {d}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("embedding".into()));
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
            data.extend(row);
        }
    }
    let d = dim.unwrap_or(0);
    Ok(EmbeddingMatrix {
        quote_ids: quote_ids.to_vec(),
        vectors: DMatrix::from_row_slice(texts.len(), d, &data),
        provider_tag: provider.tag(),
    })
}

/// Projection onto the top principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedMatrix {
    pub quote_ids: Vec<String>,
    /// n x k projected coordinates.
    pub vectors: DMatrix<f64>,
    /// Eigenvalues of the sample covariance for the kept axes, nonincreasing.
    pub explained_variance: Vec<f64>,
    /// k x d, one unit axis per row.
    pub components: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl ReducedMatrix {
    pub fn k(&self) -> usize {
        self.vectors.ncols()
    }

    /// Maps reduced coordinates back into the original space.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut back = &self.vectors * &self.components;
        for mut row in back.row_iter_mut() {
            row += self.mean.transpose();
        }
        back
    }

    /// Wraps plain coordinates so they can be clustered directly.
    pub fn from_points(quote_ids: Vec<String>, vectors: DMatrix<f64>) -> Self {
        let k = vectors.ncols();
        Self {
            quote_ids,
            explained_variance: vec![0.0; k],
            components: DMatrix::identity(k, k),
            mean: DVector::zeros(k),
            total_variance: 0.0,
            vectors,
        }
    }
}

/// `min(70, n, d)`, warning when the default had to shrink.
pub fn default_components(n: usize, d: usize) -> usize {
    let k = DEFAULT_COMPONENTS.min(n).min(d);
    if k < DEFAULT_COMPONENTS {
        log::warn!("only {n} rows of dimension {d}; keeping {k} principal components");
    }
    k
}

pub fn reduce(emb: &EmbeddingMatrix, k: usize) -> Result<ReducedMatrix> {
    reduce_with_threshold(emb, k, EXACT_PCA_MAX_ROWS)
}

pub(crate) fn reduce_with_threshold(
    emb: &EmbeddingMatrix,
    k: usize,
    exact_max_rows: usize,
) -> Result<ReducedMatrix> {
    let (n, d) = emb.vectors.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            n.min(d)
        )));
    }
    if emb.vectors.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean = emb.vectors.row_mean().transpose();
    let mut centered = emb.vectors.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|x| x * x).sum::<f64>() / denom;

    let (mut axes, values) = if n <= exact_max_rows {
        covariance_eigen(&centered, k)
    } else {
        randomized_eigen(&centered, k)
    };
    for mut axis in axes.row_iter_mut() {
        let lead = axis
            .iter()
            .copied()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            axis.neg_mut();
        }
    }
    let vectors = &centered * axes.transpose();
    Ok(ReducedMatrix {
        quote_ids: emb.quote_ids.clone(),
        vectors,
        explained_variance: values,
        components: axes,
        mean,
        total_variance,
    })
}

/// Top-k eigenpairs of the sample covariance; rows of the first matrix are axes.
fn covariance_eigen(centered: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let n = centered.nrows();
    let cov = (centered.transpose() * centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let d = centered.ncols();
    let mut axes = DMatrix::zeros(k, d);
    let mut values = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        axes.row_mut(row)
            .copy_from(&eig.eigenvectors.column(idx).transpose());
        values.push(eig.eigenvalues[idx].max(0.0));
    }
    (axes, values)
}

/// Randomized subspace iteration for tall matrices.
fn randomized_eigen(centered: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = centered.shape();
    let width = (k + 10).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x0005_eed0_f9ca);
    let omega = DMatrix::from_fn(d, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = (centered * omega).qr().q();
    for _ in 0..6 {
        let z = (centered.transpose() * &q).qr().q();
        q = (centered * z).qr().q();
    }
    let b = q.transpose() * centered;
    let small = (&b * b.transpose()) / (n - 1) as f64;
    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = DMatrix::zeros(k, d);
    let mut values = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        // right singular vector of B: B^T u / sigma
        let u = eig.eigenvectors.column(idx);
        let mut axis = b.transpose() * u;
        let norm = axis.norm();
        if norm > 0.0 {
            axis /= norm;
        }
        axes.row_mut(row).copy_from(&axis.transpose());
        values.push(lambda);
    }
    (axes, values)
}

const MATRIX_MAGIC: &[u8; 8] = b"QFMX\x01\0\0\0";

/// Binary matrix file: magic, rows (u64 LE), cols (u64 LE), row-major f64 LE.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = Vec::with_capacity(24 + 8 * m.len());
    body.extend_from_slice(MATRIX_MAGIC);
    body.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    body.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for row in m.row_iter() {
        for x in row.iter() {
            body.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&body).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Parse {
        line: 0,
        message: format!("{} is not a matrix file", path.display()),
    };
    if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
        return Err(bad());
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != 24 + 8 * rows * cols {
        return Err(bad());
    }
    let data: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// On-disk embedding cache keyed by (provider tag, corpus hash).
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, provider_tag: &str, corpus_hash: &str) -> PathBuf {
        let mut h = Sha256::new();
        h.update(provider_tag.as_bytes());
        h.update(b"\0");
        h.update(corpus_hash.as_bytes());
        self.dir
            .join(format!("embeddings-{}.bin", &hex::encode(h.finalize())[..24]))
    }

    pub fn get_or_compute(
        &self,
        corpus: &Corpus,
        provider: &dyn EmbeddingProvider,
    ) -> Result<EmbeddingMatrix> {
        let tag = provider.tag();
        let path = self.path_for(&tag, &corpus.content_hash());
        if path.exists() {
            let vectors = read_matrix(&path)?;
            if vectors.nrows() == corpus.len() {
                log::info!("embedding cache hit {}", path.display());
                return Ok(EmbeddingMatrix {
                    quote_ids: corpus.quote_ids(),
                    vectors,
                    provider_tag: tag,
                });
            }
        }
        let emb = embed(corpus, provider)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_matrix(&path, &emb.vectors)?;
        Ok(emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn identical_text_identical_vector() {
        let e = HashingEmbedder;
        assert_eq!(e.embed_text("Moscow answered"), e.embed_text("Moscow answered"));
    }

    #[test]
    fn unit_norm() {
        let e = HashingEmbedder;
        for t in ["a", "ab", "Road-building machinery", "Ünïcödé текст 123", "x y z"] {
            let n = e.embed_text(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{t}: {n}");
        }
    }

    #[test]
    fn near_duplicate_closer_than_unrelated() {
        let e = HashingEmbedder;
        let a = e.embed_text("There is road-building machinery and a number of other items that Russia imports.");
        let b = e.embed_text("There is road-building equipment and a number of other items that Russia imports.");
        let c = e.embed_text("We must first clarify what we will negotiate at the informal conference.");
        let near = cosine(&a, &b);
        let far = cosine(&a, &c);
        // values computed with the embedder itself on this fixture
        assert!(near > 0.8, "near {near}");
        assert!(far < 0.3, "far {far}");
        assert!(near > far);
    }

    fn emb(m: DMatrix<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix {
            quote_ids: (0..m.nrows()).map(|i| format!("q{i}")).collect(),
            vectors: m,
            provider_tag: "test".into(),
        }
    }

    #[test]
    fn rank_deficient_data() {
        // points on the plane z = 1 + x - y
        let m = dmatrix![
            0.0, 0.0, 1.0;
            1.0, 0.0, 2.0;
            0.0, 1.0, 0.0;
            2.0, 3.0, 0.0;
            -1.0, 2.0, -2.0;
            0.5, -1.0, 2.5
        ];
        let r = reduce(&emb(m), 3).unwrap();
        assert!(r.explained_variance[2].abs() < 1e-10);
        assert!(r.explained_variance[0] >= r.explained_variance[1]);
    }

    #[test]
    fn full_rank_completeness() {
        let m = dmatrix![
            2.0, 0.1, 0.0;
            -1.0, 0.4, 1.0;
            0.3, -2.0, 0.5;
            1.5, 1.5, -1.0;
            -0.7, 0.2, 2.0
        ];
        let r = reduce(&emb(m), 3).unwrap();
        let sum: f64 = r.explained_variance.iter().sum();
        assert!((sum - r.total_variance).abs() < 1e-10 * r.total_variance);
    }

    /// Cyclic Jacobi rotations on a dense symmetric matrix; eigenvalues on
    /// the diagonal, eigenvectors in the columns of the second matrix.
    #[allow(clippy::needless_range_loop)]
    fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        for _sweep in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i][i]).collect(), v)
    }

    #[test]
    fn five_by_three_matches_jacobi_oracle() {
        let rows = [
            [2.0, 0.1, 0.0],
            [-1.0, 0.4, 1.0],
            [0.3, -2.0, 0.5],
            [1.5, 1.5, -1.0],
            [-0.7, 0.2, 2.0],
        ];
        let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
        let cov: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..3)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / 4.0)
                    .collect()
            })
            .collect();
        let (values, vectors) = jacobi(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&x, &y| values[y].total_cmp(&values[x]));

        let m = DMatrix::from_fn(5, 3, |i, j| rows[i][j]);
        let r = reduce(&emb(m), 3).unwrap();
        for (row, &idx) in order.iter().enumerate() {
            assert!((r.explained_variance[row] - values[idx]).abs() < 1e-10);
            let oracle: Vec<f64> = (0..3).map(|k| vectors[k][idx]).collect();
            let dot: f64 = (0..3).map(|k| oracle[k] * r.components[(row, k)]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-10, "axis {row}: |dot| = {}", dot.abs());
            for (i, obs) in rows.iter().enumerate() {
                let proj: f64 = (0..3).map(|k| (obs[k] - mean[k]) * oracle[k]).sum::<f64>() * dot.signum();
                assert!((r.vectors[(i, row)] - proj).abs() < 1e-10);
            }
        }
    }

    fn spread_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * 3.0 / (1.0 + j as f64)
        })
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn translation_leaves_projection_unchanged(
            n in 6usize..30, d in 2usize..6, seed in proptest::prelude::any::<u64>(),
            shift in proptest::collection::vec(-50.0f64..50.0, 6),
        ) {
            let m = spread_matrix(n, d, seed);
            let k = d.min(3);
            let base = reduce(&emb(m.clone()), k).unwrap();
            let mut moved = m;
            for mut row in moved.row_iter_mut() {
                for j in 0..d {
                    row[j] += shift[j];
                }
            }
            let r = reduce(&emb(moved), k).unwrap();
            for c in 0..k {
                let sign = if base.components.row(c).dot(&r.components.row(c)) < 0.0 { -1.0 } else { 1.0 };
                for i in 0..n {
                    proptest::prop_assert!((base.vectors[(i, c)] - sign * r.vectors[(i, c)]).abs() < 1e-8);
                }
                proptest::prop_assert!((base.explained_variance[c] - r.explained_variance[c]).abs() < 1e-8 * (1.0 + base.explained_variance[c]));
            }
        }

        #[test]
        fn reducing_the_reconstruction_is_idempotent(
            n in 6usize..30, d in 2usize..6, seed in proptest::prelude::any::<u64>(),
        ) {
            let m = spread_matrix(n, d, seed);
            let k = (d - 1).max(1);
            let once = reduce(&emb(m.clone()), k).unwrap();
            let twice = reduce(&emb(once.reconstruct()), k).unwrap();
            for c in 0..k {
                let sign = if once.components.row(c).dot(&twice.components.row(c)) < 0.0 { -1.0 } else { 1.0 };
                for i in 0..n {
                    proptest::prop_assert!((once.vectors[(i, c)] - sign * twice.vectors[(i, c)]).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn reconstruction_error_is_discarded_variance(
            n in 6usize..30, d in 2usize..6, seed in proptest::prelude::any::<u64>(),
        ) {
            let m = spread_matrix(n, d, seed);
            let all = reduce(&emb(m.clone()), d.min(n)).unwrap();
            let k = 1.max(d / 2);
            let r = reduce(&emb(m.clone()), k).unwrap();
            let err = (&m - r.reconstruct()).iter().map(|x| x * x).sum::<f64>() / (n - 1) as f64;
            let discarded: f64 = all.explained_variance[k..].iter().sum();
            proptest::prop_assert!((err - discarded).abs() <= 1e-6 * discarded.max(1e-12) + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_k_and_nonfinite() {
        let m = dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 7.0];
        assert!(reduce(&emb(m.clone()), 3).is_err());
        assert!(reduce(&emb(m.clone()), 0).is_err());
        let mut bad = m;
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(reduce(&emb(bad), 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn randomized_matches_exact_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let d = 20;
        let scales: Vec<f64> = (0..d).map(|j| 1.0 / (1.0 + j as f64)).collect();
        let m = DMatrix::from_fn(n, d, |_, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scales[j]
        });
        let e = emb(m);
        let exact = reduce_with_threshold(&e, 5, usize::MAX).unwrap();
        let approx = reduce_with_threshold(&e, 5, 10).unwrap();
        for (a, b) in exact.explained_variance.iter().zip(&approx.explained_variance) {
            assert!((a - b).abs() < 1e-6 * a, "{a} vs {b}");
        }
        assert!((&exact.vectors - &approx.vectors).abs().max() < 1e-5);
    }

    #[test]
    fn matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = dmatrix![1.0, -2.5; 3.25, 1e-300];
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn command_provider_csv() {
        let dir = tempfile::tempdir().unwrap();
        let provider = CommandProvider {
            program: "sh".into(),
            args: vec![
                "-c".into(),
                "awk '{print length($0)\",1\"}' {input} > {output}".into(),
            ],
            model_tag: "len".into(),
            format: MatrixFormat::Csv,
            dim: None,
            max_retries: 0,
            work_dir: Some(dir.path().to_path_buf()),
        };
        let ids = vec!["a".to_string(), "b".to_string()];
        let m = embed_texts(&ids, &["abc", "abcd"], &provider, 10).unwrap();
        assert_eq!(m.dim(), 2);
        assert!((m.vectors[(0, 0)] - 3.0 / 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.provider_tag, "command:len");
    }

    #[test]
    fn command_provider_failure_is_reported() {
        let provider = CommandProvider {
            program: "false".into(),
            args: vec![],
            model_tag: "x".into(),
            format: MatrixFormat::Csv,
            dim: None,
            max_retries: 1,
            work_dir: None,
        };
        let ids = vec!["a".to_string()];
        assert!(matches!(
            embed_texts(&ids, &["abc"], &provider, 10),
            Err(Error::Provider(_))
        ));
    }
}
