//! Synthetic sequence-recognition tasks with controllable domain shift.
//!
//! A task couples an order-1 Markov chain over plain symbols (the "text"
//! domain) with a per-symbol emission model (the "channel"): each token
//! renders a run of feature frames through a linear transform of its
//! prototype vector plus Gaussian noise. Shifted variants re-draw the text
//! statistics, the channel, or both, by a tunable magnitude.

use crate::autodiff::Array;
use crate::model::FIRST_SYMBOL;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("invalid task: {0}")]
    Config(String),
}

/// Standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 1e-12 {
            let v: f64 = rng.random();
            return (-2.0 * u.ln()).sqrt() * (TAU * v).cos();
        }
    }
}

/// Dirichlet(1) draw: normalized unit exponentials.
fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0);
            -u.ln()
        })
        .collect();
    let s: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= s;
    }
    row
}

fn sample_categorical(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Random matrix with orthonormal columns (Gram-Schmidt of a Gaussian draw).
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            cols.push(v);
        }
    }
    // cols hold columns; emit row-major
    (0..n)
        .map(|r| (0..n).map(|c| cols[c][r]).collect())
        .collect()
}

/// Knobs for drawing a fresh base task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskParams {
    pub n_symbols: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub frames_per_token: usize,
    /// Extra frames per token, drawn uniformly from 0..=frame_jitter.
    pub frame_jitter: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

/// Fully-specified generative task. Serializes into dataset headers so a
/// file records exactly how it was produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
    pub channel: Vec<Vec<f64>>,
    pub channel_bias: Vec<f64>,
    pub noise_sigma: f64,
    pub frames_per_token: usize,
    pub frame_jitter: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl TaskSpec {
    pub fn n_symbols(&self) -> usize {
        self.prototypes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.channel.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let s = self.n_symbols();
        let d = self.feature_dim();
        if s == 0 || d == 0 {
            return Err(DataError::Config("empty task".into()));
        }
        if self.initial.len() != s
            || self.transition.len() != s
            || self.transition.iter().any(|r| r.len() != s)
            || self.prototypes.iter().any(|p| p.len() != d)
            || self.channel.iter().any(|r| r.len() != d)
            || self.channel_bias.len() != d
        {
            return Err(DataError::Config("inconsistent dimensions".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(DataError::Config("bad token length range".into()));
        }
        if self.frames_per_token < 2 {
            return Err(DataError::Config(
                "frames_per_token must be at least 2 so every labeling stays alignable".into(),
            ));
        }
        Ok(())
    }
}

pub fn base_task(id: &str, p: &TaskParams, seed: u64) -> TaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = p.n_symbols;
    let d = p.feature_dim;
    TaskSpec {
        id: id.to_string(),
        initial: dirichlet_row(&mut rng, s),
        transition: (0..s).map(|_| dirichlet_row(&mut rng, s)).collect(),
        prototypes: (0..s)
            .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
            .collect(),
        channel: (0..d)
            .map(|r| (0..d).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect(),
        channel_bias: vec![0.0; d],
        noise_sigma: p.noise_sigma,
        frames_per_token: p.frames_per_token,
        frame_jitter: p.frame_jitter,
        min_tokens: p.min_tokens,
        max_tokens: p.max_tokens,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Text,
    Channel,
    Both,
}

/// Derive a shifted task. Magnitude 0 reproduces the base exactly; magnitude
/// 1 is a full re-draw of the text statistics and a fully rotated channel.
pub fn shifted_task(
    base: &TaskSpec,
    id: &str,
    kind: ShiftKind,
    magnitude: f64,
    seed: u64,
) -> TaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = base.clone();
    spec.id = id.to_string();
    let s = base.n_symbols();
    let d = base.feature_dim();

    if matches!(kind, ShiftKind::Text | ShiftKind::Both) {
        let fresh_init = dirichlet_row(&mut rng, s);
        for (v, f) in spec.initial.iter_mut().zip(&fresh_init) {
            *v = (1.0 - magnitude) * *v + magnitude * f;
        }
        for row in spec.transition.iter_mut() {
            let fresh = dirichlet_row(&mut rng, s);
            for (v, f) in row.iter_mut().zip(&fresh) {
                *v = (1.0 - magnitude) * *v + magnitude * f;
            }
        }
    }
    if matches!(kind, ShiftKind::Channel | ShiftKind::Both) {
        let q = random_orthogonal(&mut rng, d);
        for (row, (brow, qrow)) in spec.channel.iter_mut().zip(base.channel.iter().zip(&q)) {
            for (v, (bv, qv)) in row.iter_mut().zip(brow.iter().zip(qrow)) {
                *v = (1.0 - magnitude) * bv + magnitude * qv;
            }
        }
        for v in spec.channel_bias.iter_mut() {
            *v += magnitude * 0.3 * normal(&mut rng);
        }
    }
    spec
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub features: Array,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Stream,
    Test,
    Dev,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Stream => "stream",
            Split::Test => "test",
            Split::Dev => "dev",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Split::Pretrain => 1,
            Split::Stream => 2,
            Split::Test => 3,
            Split::Dev => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

/// Draw one utterance: a Markov symbol sequence rendered frame by frame
/// through the task's channel. Token ids are plain model symbols.
pub fn synth_utterance(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vec<usize>, Array) {
    let d = spec.feature_dim();
    let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let mut syms = Vec::with_capacity(len);
    let mut cur = sample_categorical(rng, &spec.initial);
    for _ in 0..len {
        syms.push(cur);
        cur = sample_categorical(rng, &spec.transition[cur]);
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut n_frames = 0;
    for &sym in &syms {
        let frames = spec.frames_per_token + rng.random_range(0..=spec.frame_jitter);
        for _ in 0..frames {
            for r in 0..d {
                let mut v = spec.channel_bias[r];
                for (c, &p) in spec.prototypes[sym].iter().enumerate() {
                    v += spec.channel[r][c] * p;
                }
                v += spec.noise_sigma * normal(rng);
                rows.push(v);
            }
            n_frames += 1;
        }
    }
    let features = Array::new(vec![n_frames, d], rows).unwrap();
    let tokens = syms.iter().map(|&s| s + FIRST_SYMBOL).collect();
    (tokens, features)
}

/// Generate a dataset split. Every utterance draws from its own stream of
/// the seeded generator, so count changes never disturb earlier utterances.
pub fn synth_dataset(spec: &TaskSpec, split: Split, count: usize, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.salt().wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(i as u64);
        let (tokens, features) = synth_utterance(spec, &mut rng);
        utterances.push(Utterance {
            id: format!("{}/{}/{}", spec.id, split.tag(), i),
            features,
            tokens,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        split,
        utterances,
    })
}

#[derive(Serialize, Deserialize)]
struct UttMeta {
    id: String,
    frames: usize,
    n_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct DsHeader {
    spec: TaskSpec,
    split: Split,
    feature_dim: usize,
    utterances: Vec<UttMeta>,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let header = DsHeader {
            spec: self.spec.clone(),
            split: self.split,
            feature_dim: self.spec.feature_dim(),
            utterances: self
                .utterances
                .iter()
                .map(|u| UttMeta {
                    id: u.id.clone(),
                    frames: u.features.shape()[0],
                    n_tokens: u.tokens.len(),
                })
                .collect(),
        };
        let hbuf = serde_json::to_vec(&header).map_err(|e| DataError::Format(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"OCLD")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(hbuf.len() as u64).to_le_bytes())?;
        w.write_all(&hbuf)?;
        for u in &self.utterances {
            for v in u.features.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            for &t in &u.tokens {
                w.write_all(&(t as u32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"OCLD" {
            return Err(DataError::Format("bad magic".into()));
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != 1 {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let mut l8 = [0u8; 8];
        r.read_exact(&mut l8)?;
        let hlen = u64::from_le_bytes(l8) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: DsHeader =
            serde_json::from_slice(&hbuf).map_err(|e| DataError::Format(e.to_string()))?;

        let d = header.feature_dim;
        let mut utterances = Vec::with_capacity(header.utterances.len());
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        for m in header.utterances {
            let mut rows = vec![0.0f64; m.frames * d];
            for v in &mut rows {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
            let mut tokens = vec![0usize; m.n_tokens];
            for t in &mut tokens {
                r.read_exact(&mut b4)?;
                *t = u32::from_le_bytes(b4) as usize;
            }
            utterances.push(Utterance {
                id: m.id,
                features: Array::new(vec![m.frames, d], rows)
                    .map_err(|e| DataError::Format(e.to_string()))?,
                tokens,
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(DataError::Format("trailing bytes".into()));
        }
        Ok(Dataset {
            spec: header.spec,
            split: header.split,
            utterances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn params() -> TaskParams {
        TaskParams {
            n_symbols: 5,
            feature_dim: 4,
            noise_sigma: 0.1,
            frames_per_token: 3,
            frame_jitter: 1,
            min_tokens: 2,
            max_tokens: 6,
        }
    }

    #[test]
    fn base_task_is_seed_deterministic() {
        let p = params();
        assert_eq!(base_task("t0", &p, 7), base_task("t0", &p, 7));
        assert!(base_task("t0", &p, 7) != base_task("t0", &p, 8));
    }

    #[test]
    fn transition_rows_are_distributions() {
        let spec = base_task("t0", &params(), 3);
        for row in std::iter::once(&spec.initial).chain(&spec.transition) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn zero_magnitude_shift_is_identity() {
        let base = base_task("t0", &params(), 5);
        let t = shifted_task(&base, "t1", ShiftKind::Both, 0.0, 99);
        assert_eq!(t.transition, base.transition);
        assert_eq!(t.channel, base.channel);
        assert_eq!(t.channel_bias, base.channel_bias);
        assert_eq!(t.id, "t1");
    }

    #[test]
    fn shift_divergence_grows_with_magnitude() {
        let base = base_task("t0", &params(), 5);
        let dist = |m: f64| {
            let t = shifted_task(&base, "t1", ShiftKind::Both, m, 99);
            let text: f64 = t
                .transition
                .iter()
                .flatten()
                .zip(base.transition.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .sum();
            let chan: f64 = t
                .channel
                .iter()
                .flatten()
                .zip(base.channel.iter().flatten())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (text, chan)
        };
        let (t1, c1) = dist(0.2);
        let (t2, c2) = dist(0.6);
        assert!(t2 > t1 && t1 > 0.0);
        assert!(c2 > c1 && c1 > 0.0);
    }

    #[test]
    fn orthogonal_draw_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = random_orthogonal(&mut rng, 6);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..6).map(|r| q[r][i] * q[r][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "col {i}.col {j} = {dot}");
            }
        }
    }

    #[test]
    fn utterances_have_consistent_shapes_and_symbols() {
        let spec = base_task("t0", &params(), 11);
        let ds = synth_dataset(&spec, Split::Stream, 20, 1).unwrap();
        for u in &ds.utterances {
            let n = u.tokens.len();
            assert!((spec.min_tokens..=spec.max_tokens).contains(&n));
            let frames = u.features.shape()[0];
            assert!(frames >= n * spec.frames_per_token);
            assert!(frames <= n * (spec.frames_per_token + spec.frame_jitter));
            assert_eq!(u.features.shape()[1], spec.feature_dim());
            assert!(u
                .tokens
                .iter()
                .all(|&t| (FIRST_SYMBOL..FIRST_SYMBOL + spec.n_symbols()).contains(&t)));
        }
    }

    #[test]
    fn dataset_is_seed_deterministic_and_prefix_stable() {
        let spec = base_task("t0", &params(), 11);
        let a = synth_dataset(&spec, Split::Test, 10, 4).unwrap();
        let b = synth_dataset(&spec, Split::Test, 10, 4).unwrap();
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.features.data(), y.features.data());
        }
        // growing the split leaves existing utterances untouched
        let c = synth_dataset(&spec, Split::Test, 15, 4).unwrap();
        for (x, y) in a.utterances.iter().zip(&c.utterances) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.features.data(), y.features.data());
        }
        // splits draw from distinct streams
        let d = synth_dataset(&spec, Split::Dev, 10, 4).unwrap();
        assert!(a.utterances[0].tokens != d.utterances[0].tokens
            || a.utterances[0].features.data() != d.utterances[0].features.data());
    }

    #[test]
    fn markov_statistics_follow_the_transition_matrix() {
        // transitions heavily favor staying on the same symbol
        let mut spec = base_task("t0", &params(), 2);
        let s = spec.n_symbols();
        for (i, row) in spec.transition.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 0.9 } else { 0.1 / (s - 1) as f64 };
            }
        }
        spec.min_tokens = 20;
        spec.max_tokens = 20;
        let ds = synth_dataset(&spec, Split::Stream, 50, 9).unwrap();
        let (mut same, mut total) = (0usize, 0usize);
        for u in &ds.utterances {
            for w in u.tokens.windows(2) {
                total += 1;
                if w[0] == w[1] {
                    same += 1;
                }
            }
        }
        let frac = same as f64 / total as f64;
        assert!((frac - 0.9).abs() < 0.05, "repeat fraction {frac}");
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let spec = base_task("t0", &params(), 21);
        let ds = synth_dataset(&spec, Split::Pretrain, 8, 3).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("t0.ds");
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.spec, ds.spec);
        assert_eq!(loaded.split, ds.split);
        assert_eq!(loaded.utterances.len(), ds.utterances.len());
        for (a, b) in ds.utterances.iter().zip(&loaded.utterances) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert!(a
                .features
                .data()
                .iter()
                .zip(b.features.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ds");
        std::fs::write(&path, b"OCLX____junk").unwrap();
        assert!(matches!(Dataset::load(&path), Err(DataError::Format(_))));
    }
}
