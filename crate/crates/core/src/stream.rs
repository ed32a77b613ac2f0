//! Pseudo-online replay, synthetic streams with planted slice sparsity, and
//! the evaluation metrics (DotP, SparseIdx).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::Value;

use crate::error::{FormatError, StreamError, TensorError};
use crate::io::{self, Manifest};
use crate::parafac::AlsConfig;
use crate::pls::{LearnerConfig, PlsModel, RewNpls};
use crate::tensor::{l2_norm, outer_product, Tensor};
use crate::thresholding::{NormOrder, PenaltySpec};

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub x: Vec<Tensor>,
    pub y: Vec<Vec<f64>>,
    /// Position `u` of the batch in the stream.
    pub index: usize,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Per-sample cosines and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct DotProduct {
    pub samples: Vec<f64>,
    pub skipped: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear interpolation between order statistics at rank `q * (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Cosine similarity per sample; samples where either vector has zero norm
/// are skipped and counted.
pub fn dot_product_metric(
    targets: &[Vec<f64>],
    predictions: &[Vec<f64>],
) -> Result<DotProduct, StreamError> {
    if targets.len() != predictions.len() {
        return Err(StreamError::MetricLength(targets.len(), predictions.len()));
    }
    let mut samples = Vec::with_capacity(targets.len());
    let mut skipped = 0;
    for (y, p) in targets.iter().zip(predictions) {
        if y.len() != p.len() {
            return Err(StreamError::MetricLength(y.len(), p.len()));
        }
        let sy: f64 = y.iter().map(|a| a * a).sum();
        let sp: f64 = p.iter().map(|a| a * a).sum();
        if sy == 0.0 || sp == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = y.iter().zip(p).map(|(a, b)| a * b).sum();
        // sqrt(s * s) == s, so p = +-y gives exactly +-1
        samples.push((dot / (sy * sp).sqrt()).clamp(-1.0, 1.0));
    }
    if samples.is_empty() {
        return Err(StreamError::MetricUndefined);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(DotProduct {
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
        median: percentile(&sorted, 0.5),
        q1: percentile(&sorted, 0.25),
        q3: percentile(&sorted, 0.75),
        samples,
        skipped,
    })
}

/// Fraction of exactly-zero elements.
pub fn sparse_idx(w: &[f64]) -> Result<f64, TensorError> {
    if w.is_empty() {
        return Err(TensorError::EmptyInput);
    }
    Ok(w.iter().filter(|&&x| x == 0.0).count() as f64 / w.len() as f64)
}

/// Synthetic stream definition.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dims: Vec<usize>,
    pub outputs: usize,
    pub batch_size: usize,
    pub batches: usize,
    /// Per input mode, 0-based slice indices forced to zero in `B_true`.
    pub zero_slices: Vec<BTreeSet<usize>>,
    /// Noise standard deviation relative to the signal's (0 = noiseless).
    pub noise: f64,
    /// Angle (radians) per batch by which `B_true` rotates towards an
    /// independent coefficient tensor with the same zero slices.
    pub drift: f64,
    /// `X` lives in the span of this many orthogonal rank-1 patterns and
    /// `Y` is a linear function of the pattern scores.
    pub latent_rank: Option<usize>,
    /// `B_true` is a sum of this many rank-1 terms.
    pub coef_rank: Option<usize>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(dims: Vec<usize>, outputs: usize, batch_size: usize, batches: usize, seed: u64) -> Self {
        let modes = dims.len();
        Self {
            dims,
            outputs,
            batch_size,
            batches,
            zero_slices: vec![BTreeSet::new(); modes],
            noise: 0.0,
            drift: 0.0,
            latent_rank: None,
            coef_rank: None,
            seed,
        }
    }

    /// Noise level for a signal-to-noise power ratio.
    pub fn with_snr(mut self, snr: f64) -> Self {
        self.noise = 1.0 / snr.sqrt();
        self
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let bad = |field: &'static str, reason: String| Err(StreamError::InvalidConfig { field, reason });
        if self.dims.is_empty() {
            return bad("dims", "at least one input mode required".into());
        }
        if let Some(m) = self.dims.iter().position(|&d| d == 0) {
            return bad("dims", format!("mode {} has size 0", m + 1));
        }
        if self.outputs == 0 {
            return bad("outputs", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.batches == 0 {
            return bad("batches", "must be >= 1".into());
        }
        if self.zero_slices.len() != self.dims.len() {
            return bad("zero_slices", format!("{} modes given, dims has {}", self.zero_slices.len(), self.dims.len()));
        }
        for (m, (set, &d)) in self.zero_slices.iter().zip(&self.dims).enumerate() {
            if let Some(&j) = set.iter().next_back() {
                if j >= d {
                    return bad("zero_slices", format!("mode {} slice {} out of range 1..={d}", m + 1, j + 1));
                }
            }
            if set.len() == d {
                return bad("zero_slices", format!("mode {} has no active slice", m + 1));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", format!("must be finite and >= 0, got {}", self.noise));
        }
        if !self.drift.is_finite() {
            return bad("drift", "must be finite".into());
        }
        if self.latent_rank.is_some() && self.coef_rank.is_some() {
            return bad("latent_rank", "cannot be combined with coef_rank".into());
        }
        if let Some(k) = self.latent_rank {
            let room = self
                .dims
                .iter()
                .zip(&self.zero_slices)
                .map(|(d, z)| d - z.len())
                .min()
                .unwrap_or(0);
            if k == 0 || k > room {
                return bad("latent_rank", format!("must be in 1..={room}"));
            }
        }
        if self.coef_rank == Some(0) {
            return bad("coef_rank", "must be >= 1".into());
        }
        Ok(())
    }

    fn active(&self, mode: usize) -> Vec<usize> {
        (0..self.dims[mode])
            .filter(|j| !self.zero_slices[mode].contains(j))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Coefficients at batch 0, dims `I_1..I_M, Q`.
    pub beta: Tensor,
    pub zero_slices: Vec<BTreeSet<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthStream {
    pub batches: Vec<StreamBatch>,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian vector supported on `active`, unit norm.
fn sparse_unit(rng: &mut ChaCha8Rng, d: usize, active: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for &j in active {
        v[j] = gaussian(rng);
    }
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// `k` orthonormal vectors supported on `active` (Gram-Schmidt).
fn sparse_orthonormal(rng: &mut ChaCha8Rng, d: usize, active: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = sparse_unit(rng, d, active);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= proj * c);
        }
        let n = l2_norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn coefficient_draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let mut dims = cfg.dims.clone();
    dims.push(cfg.outputs);
    match cfg.coef_rank {
        Some(r) => {
            let mut acc = Tensor::zeros(dims.clone()).expect("validated dims");
            for _ in 0..r {
                let mut factors: Vec<Vec<f64>> = (0..cfg.dims.len())
                    .map(|m| sparse_unit(rng, cfg.dims[m], &cfg.active(m)))
                    .collect();
                factors.push((0..cfg.outputs).map(|_| gaussian(rng)).collect());
                let term = outer_product(1.0, &factors);
                acc = Tensor::new(dims.clone(), acc.data().iter().zip(term.data()).map(|(a, b)| a + b).collect())
                    .expect("same dims");
            }
            acc
        }
        None => {
            let zero = &cfg.zero_slices;
            Tensor::from_fn(dims, |idx| {
                if idx[..idx.len() - 1].iter().zip(zero).any(|(j, z)| z.contains(j)) {
                    0.0
                } else {
                    gaussian(rng)
                }
            })
            .expect("validated dims")
        }
    }
}

/// Draws a stream; `(cfg, cfg.seed)` fully determines the output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthStream, StreamError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p: usize = cfg.dims.iter().product();
    let q = cfg.outputs;
    let mut beta_dims = cfg.dims.clone();
    beta_dims.push(q);

    if let Some(k) = cfg.latent_rank {
        let bases: Vec<Vec<Vec<f64>>> = (0..cfg.dims.len())
            .map(|m| sparse_orthonormal(&mut rng, cfg.dims[m], &cfg.active(m), k))
            .collect();
        let patterns: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let fs: Vec<Vec<f64>> = bases.iter().map(|b| b[i].clone()).collect();
                outer_product(1.0, &fs).into_data()
            })
            .collect();
        let loadings: Vec<Vec<f64>> = (0..k).map(|_| (0..q).map(|_| gaussian(&mut rng)).collect()).collect();
        let signal_std = (loadings.iter().flatten().map(|c| c * c).sum::<f64>() / q as f64).sqrt();
        let sigma = cfg.noise * signal_std;
        let mut beta = vec![0.0; p * q];
        for (a, c) in patterns.iter().zip(&loadings) {
            for (i, ai) in a.iter().enumerate() {
                for (j, cj) in c.iter().enumerate() {
                    beta[i * q + j] += ai * cj;
                }
            }
        }
        let batches = (0..cfg.batches)
            .map(|u| {
                let mut x = Vec::with_capacity(cfg.batch_size);
                let mut y = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let t: Vec<f64> = (0..k).map(|_| gaussian(&mut rng)).collect();
                    let mut xv = vec![0.0; p];
                    for (ti, a) in t.iter().zip(&patterns) {
                        xv.iter_mut().zip(a).for_each(|(xv, av)| *xv += ti * av);
                    }
                    let mut yv = vec![0.0; q];
                    for (ti, c) in t.iter().zip(&loadings) {
                        yv.iter_mut().zip(c).for_each(|(yv, cv)| *yv += ti * cv);
                    }
                    for v in yv.iter_mut() {
                        *v += sigma * gaussian(&mut rng);
                    }
                    x.push(Tensor::new(cfg.dims.clone(), xv).expect("validated dims"));
                    y.push(yv);
                }
                StreamBatch { x, y, index: u }
            })
            .collect();
        return Ok(SynthStream {
            batches,
            truth: GroundTruth {
                beta: Tensor::new(beta_dims, beta)?,
                zero_slices: cfg.zero_slices.clone(),
            },
        });
    }

    let beta0 = coefficient_draw(cfg, &mut rng);
    let beta1 = if cfg.drift != 0.0 {
        let b = coefficient_draw(cfg, &mut rng);
        b.scaled(beta0.frobenius_norm() / b.frobenius_norm())
    } else {
        beta0.clone()
    };
    // X is i.i.d. standard normal, so the per-output signal variance is
    // |B|^2 / Q
    let signal_std = (beta0.data().iter().map(|b| b * b).sum::<f64>() / q as f64).sqrt();
    let sigma = cfg.noise * signal_std;

    let batches = (0..cfg.batches)
        .map(|u| {
            let angle = cfg.drift * u as f64;
            let (c, s) = (angle.cos(), angle.sin());
            let beta: Vec<f64> = if cfg.drift == 0.0 {
                beta0.data().to_vec()
            } else {
                beta0.data().iter().zip(beta1.data()).map(|(a, b)| c * a + s * b).collect()
            };
            let mut x = Vec::with_capacity(cfg.batch_size);
            let mut y = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let xv: Vec<f64> = (0..p).map(|_| gaussian(&mut rng)).collect();
                let mut yv = vec![0.0; q];
                for (xi, row) in xv.iter().zip(beta.chunks_exact(q)) {
                    yv.iter_mut().zip(row).for_each(|(yv, b)| *yv += xi * b);
                }
                for v in yv.iter_mut() {
                    *v += sigma * gaussian(&mut rng);
                }
                x.push(Tensor::new(cfg.dims.clone(), xv).expect("validated dims"));
                y.push(yv);
            }
            StreamBatch { x, y, index: u }
        })
        .collect();
    Ok(SynthStream {
        batches,
        truth: GroundTruth {
            beta: beta0,
            zero_slices: cfg.zero_slices.clone(),
        },
    })
}

/// `mode1:3-8;mode2:1,4` style text with 1-based modes and slices.
pub fn format_zero_slices(sets: &[BTreeSet<usize>]) -> String {
    let mut parts = Vec::new();
    for (m, set) in sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let mut ranges: Vec<String> = Vec::new();
        let items: Vec<usize> = set.iter().copied().collect();
        let mut i = 0;
        while i < items.len() {
            let start = items[i];
            let mut end = start;
            while i + 1 < items.len() && items[i + 1] == end + 1 {
                i += 1;
                end = items[i];
            }
            ranges.push(if start == end {
                format!("{}", start + 1)
            } else {
                format!("{}-{}", start + 1, end + 1)
            });
            i += 1;
        }
        parts.push(format!("mode{}:{}", m + 1, ranges.join(",")));
    }
    parts.join(";")
}

/// Inverse of [`format_zero_slices`].
pub fn parse_zero_slices(text: &str, modes: usize) -> Result<Vec<BTreeSet<usize>>, String> {
    let mut sets = vec![BTreeSet::new(); modes];
    for part in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (mode, list) = part
            .split_once(':')
            .ok_or_else(|| format!("{part:?}: expected modeN:LIST"))?;
        let m: usize = mode
            .trim()
            .strip_prefix("mode")
            .unwrap_or(mode.trim())
            .parse()
            .map_err(|_| format!("{part:?}: bad mode"))?;
        if m == 0 || m > modes {
            return Err(format!("{part:?}: mode must be in 1..={modes}"));
        }
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (a, b) = match item.split_once('-') {
                Some((a, b)) => (a, b),
                None => (item, item),
            };
            let a: usize = a.trim().parse().map_err(|_| format!("{item:?}: bad slice"))?;
            let b: usize = b.trim().parse().map_err(|_| format!("{item:?}: bad slice"))?;
            if a == 0 || b < a {
                return Err(format!("{item:?}: slices are 1-based ranges lo-hi"));
            }
            sets[m - 1].extend(a - 1..b);
        }
    }
    Ok(sets)
}

/// Writes `manifest.txt`, `batch_NNNNN.ntns` files and `truth.ntns`.
pub fn write_stream(dir: impl AsRef<Path>, cfg: &SynthConfig, stream: &SynthStream) -> Result<(), FormatError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| FormatError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut extra = BTreeMap::new();
    extra.insert("seed".to_string(), cfg.seed.to_string());
    extra.insert("noise".into(), cfg.noise.to_string());
    extra.insert("drift".into(), cfg.drift.to_string());
    extra.insert("zero_slices".into(), format_zero_slices(&cfg.zero_slices));
    if let Some(k) = cfg.latent_rank {
        extra.insert("latent_rank".into(), k.to_string());
    }
    if let Some(r) = cfg.coef_rank {
        extra.insert("coef_rank".into(), r.to_string());
    }
    let manifest = Manifest {
        dims: cfg.dims.clone(),
        outputs: cfg.outputs,
        batch_size: cfg.batch_size,
        count: stream.batches.len(),
        extra,
    };
    manifest.save(dir)?;
    for b in &stream.batches {
        io::save_batch(dir.join(io::batch_file_name(b.index)), &b.x, &b.y)?;
    }
    io::save_tensor(dir.join(io::TRUTH_FILE), &stream.truth.beta)
}

/// Loads every batch listed by the manifest, checking shapes against it.
pub fn read_stream(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<StreamBatch>), StreamError> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    if manifest.count == 0 {
        return Err(StreamError::Inconsistent("manifest lists no batches".into()));
    }
    let mut batches = Vec::with_capacity(manifest.count);
    for u in 0..manifest.count {
        let path = dir.join(io::batch_file_name(u));
        let (x, y) = io::load_batch(&path)?;
        let shape_ok = x.iter().all(|t| t.dims() == manifest.dims.as_slice())
            && y.iter().all(|v| v.len() == manifest.outputs);
        if !shape_ok {
            return Err(StreamError::Inconsistent(format!(
                "{}: shape does not match manifest dims {:?} / outputs {}",
                path.display(),
                manifest.dims,
                manifest.outputs
            )));
        }
        batches.push(StreamBatch { x, y, index: u });
    }
    Ok((manifest, batches))
}

/// One `(p, lambda)` model of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub order: NormOrder,
    pub lambda: f64,
}

impl GridPoint {
    pub fn penalty(&self) -> Result<PenaltySpec, StreamError> {
        Ok(PenaltySpec::new(self.order, self.lambda)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub grid: Vec<GridPoint>,
    pub f_max: usize,
    pub mu: f64,
    pub train_prefix: usize,
    /// 0-based input modes carrying the penalty.
    pub penalized_modes: Vec<usize>,
    pub als: AlsConfig,
    /// Batches per evaluation session; `None` = the whole tail.
    pub session_length: Option<usize>,
    /// Keep training on evaluation batches after predicting them.
    pub adapt: bool,
    /// Cap on worker threads across grid points.
    pub threads: Option<usize>,
}

impl ReplayConfig {
    pub fn new(grid: Vec<GridPoint>, f_max: usize, mu: f64, train_prefix: usize) -> Self {
        Self {
            grid,
            f_max,
            mu,
            train_prefix,
            penalized_modes: vec![0],
            als: AlsConfig::default(),
            session_length: None,
            adapt: false,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub p: f64,
    pub lambda: f64,
    pub session: usize,
    /// Inclusive 0-based batch range of the session.
    pub batch_first: usize,
    pub batch_last: usize,
    pub f_star: usize,
    pub components: usize,
    /// `None` when every sample had a zero-norm target or prediction.
    pub dotp: Option<DotProduct>,
    pub samples: usize,
    pub skipped: usize,
    /// Per input mode.
    pub sparse_idx: Vec<f64>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> Value {
        let mut map: BTreeMap<String, Value> = BTreeMap::new();
        map.insert("p".into(), self.p.into());
        map.insert("lambda".into(), self.lambda.into());
        map.insert("session".into(), self.session.into());
        map.insert("batch_first".into(), self.batch_first.into());
        map.insert("batch_last".into(), self.batch_last.into());
        map.insert("f_star".into(), self.f_star.into());
        map.insert("components".into(), self.components.into());
        map.insert("samples".into(), self.samples.into());
        map.insert("skipped".into(), self.skipped.into());
        let (mean, median, q1, q3, cos) = match &self.dotp {
            Some(d) => (
                Value::from(d.mean),
                Value::from(d.median),
                Value::from(d.q1),
                Value::from(d.q3),
                Value::from(d.samples.clone()),
            ),
            None => (Value::Null, Value::Null, Value::Null, Value::Null, Value::Array(vec![])),
        };
        map.insert("dotp_mean".into(), mean);
        map.insert("dotp_median".into(), median);
        map.insert("dotp_q1".into(), q1);
        map.insert("dotp_q3".into(), q3);
        map.insert("dotp_samples".into(), cos);
        for (m, s) in self.sparse_idx.iter().enumerate() {
            map.insert(format!("sparse_idx_mode_{}", m + 1), (*s).into());
        }
        serde_json::to_value(map).expect("string keys")
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("serializable")
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub point: GridPoint,
    pub records: Vec<MetricsRecord>,
    /// Model at the end of the run (after training, or after adaptation).
    pub model: Option<PlsModel>,
}

fn validate_stream(batches: &[StreamBatch]) -> Result<(Vec<usize>, usize), StreamError> {
    let first = batches
        .first()
        .ok_or_else(|| StreamError::Inconsistent("empty stream".into()))?;
    let x0 = first
        .x
        .first()
        .ok_or_else(|| StreamError::Inconsistent(format!("batch {} is empty", first.index)))?;
    let dims = x0.dims().to_vec();
    let q = first.y.first().map_or(0, Vec::len);
    for b in batches {
        if b.x.is_empty() || b.x.len() != b.y.len() {
            return Err(StreamError::Inconsistent(format!("batch {}: x/y counts differ or empty", b.index)));
        }
        if b.x.iter().any(|t| t.dims() != dims.as_slice()) || b.y.iter().any(|y| y.len() != q) {
            return Err(StreamError::Inconsistent(format!("batch {}: inconsistent dims", b.index)));
        }
    }
    Ok((dims, q))
}

/// Runs every grid point over the stream: validate-then-train on the
/// first `train_prefix` batches, then predict the rest with the frozen
/// model (or keep adapting when `cfg.adapt`).
pub fn replay(batches: &[StreamBatch], cfg: &ReplayConfig) -> Result<Vec<GridResult>, StreamError> {
    let (dims, q) = validate_stream(batches)?;
    let bad = |field: &'static str, reason: String| StreamError::InvalidConfig { field, reason };
    if cfg.train_prefix > batches.len() {
        return Err(StreamError::PrefixTooLong {
            prefix: cfg.train_prefix,
            total: batches.len(),
        });
    }
    if cfg.train_prefix == 0 {
        return Err(bad("train_prefix", "at least one training batch is required".into()));
    }
    if cfg.session_length == Some(0) {
        return Err(bad("session_length", "must be >= 1".into()));
    }
    if let Some(&m) = cfg.penalized_modes.iter().find(|&&m| m >= dims.len()) {
        return Err(bad("penalized_modes", format!("mode {} exceeds order {}", m + 1, dims.len())));
    }
    for g in &cfg.grid {
        g.penalty()?;
    }

    let run = || -> Vec<Result<GridResult, StreamError>> {
        cfg.grid
            .par_iter()
            .map(|point| {
                run_grid_point(batches, &dims, q, *point, cfg).map_err(|source| match source {
                    StreamError::Pls(source) => StreamError::GridPoint {
                        p: point.order.p(),
                        lambda: point.lambda,
                        source,
                    },
                    other => other,
                })
            })
            .collect()
    };
    let results = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| bad("threads", e.to_string()))?
            .install(run),
        None => run(),
    };
    results.into_iter().collect()
}

fn run_grid_point(
    batches: &[StreamBatch],
    dims: &[usize],
    q: usize,
    point: GridPoint,
    cfg: &ReplayConfig,
) -> Result<GridResult, StreamError> {
    let mut learner_cfg = LearnerConfig::penalized(dims, cfg.f_max, cfg.mu, point.penalty()?, &cfg.penalized_modes)?;
    learner_cfg.als = cfg.als.clone();
    let mut learner = RewNpls::new(dims.to_vec(), q, learner_cfg)?;
    for b in &batches[..cfg.train_prefix] {
        learner.step(&b.x, &b.y)?;
    }

    let tail = &batches[cfg.train_prefix..];
    let session_len = cfg.session_length.unwrap_or(tail.len().max(1));
    let mut records = Vec::new();
    for (session, chunk) in tail.chunks(session_len).enumerate() {
        let mut targets = Vec::new();
        let mut predictions = Vec::new();
        for b in chunk {
            let model = learner.model().expect("trained on the prefix");
            predictions.extend(model.predict_batch(&b.x, None)?);
            targets.extend(b.y.iter().cloned());
            if cfg.adapt {
                learner.step(&b.x, &b.y)?;
            }
        }
        let model = learner.model().expect("trained on the prefix");
        let (dotp, skipped) = match dot_product_metric(&targets, &predictions) {
            Ok(d) => {
                let s = d.skipped;
                (Some(d), s)
            }
            Err(StreamError::MetricUndefined) => (None, targets.len()),
            Err(e) => return Err(e),
        };
        let sparse_idx = (0..dims.len())
            .map(|m| model.sparse_idx(m))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(MetricsRecord {
            p: point.order.p(),
            lambda: point.lambda,
            session,
            batch_first: chunk[0].index,
            batch_last: chunk[chunk.len() - 1].index,
            f_star: model.f_star,
            components: model.n_components(),
            dotp,
            samples: targets.len(),
            skipped,
            sparse_idx,
        });
    }
    Ok(GridResult {
        point,
        records,
        model: learner.model().cloned(),
    })
}

/// JSON-lines metrics: a `{"header": ...}` provenance line, then one line
/// per (grid point, session) in grid order. Keys are sorted, so equal
/// inputs give byte-identical text.
pub fn metrics_jsonl(header: &BTreeMap<String, Value>, results: &[GridResult]) -> String {
    let mut out = String::new();
    let mut first: BTreeMap<String, Value> = BTreeMap::new();
    first.insert("header".into(), serde_json::to_value(header).expect("string keys"));
    out.push_str(&serde_json::to_string(&first).expect("serializable"));
    out.push('\n');
    for r in results.iter().flat_map(|g| &g.records) {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

/// Evenly spaced `lo, lo + step, ..., <= hi` (rounded to 12 decimals so
/// that `0..1:0.1` ends exactly at 1).
pub fn lambda_range(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if !(step > 0.0) || hi < lo {
        return out;
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    for i in 0..=n {
        let v = lo + step * i as f64;
        out.push((v * 1e12).round() / 1e12);
    }
    out
}

/// Random batch of i.i.d. uniform inputs, for tests and examples.
pub fn uniform_batch(rng: &mut ChaCha8Rng, dims: &[usize], q: usize, n: usize, index: usize) -> StreamBatch {
    let x = (0..n)
        .map(|_| Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0)).expect("valid dims"))
        .collect();
    let y = (0..n).map(|_| (0..q).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    StreamBatch { x, y, index }
}
