//! A small hybrid CTC/attention sequence recognizer.
//!
//! The encoder maps a feature matrix [frames, feature_dim] to hidden states
//! through an input projection, a stack of depthwise-convolution blocks, and
//! one self-attention layer. A linear CTC head scores every frame; a
//! single-layer cross-attention decoder scores output tokens. The decoder has
//! no self-attention, so its next-token distribution depends only on the most
//! recent token and the encoder states, and teacher-forced rows coincide with
//! step-by-step decoding.
//!
//! Vocabulary layout is fixed: blank, BOS, EOS, then plain symbols. Labels
//! may only contain plain symbols.

use crate::autodiff::{log_softmax_row, sgd_step_slice, AdError, Array, Tape, VarId};
use crate::ctc::{ctc_loss_node, greedy_ctc_decode, joint_beam_decode, CtcError, DecodeConfig, DecodeResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const BLANK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const FIRST_SYMBOL: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Label(#[from] CtcError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("token {token} at position {pos} is not a plain symbol (vocab size {vocab})")]
    BadToken {
        token: usize,
        pos: usize,
        vocab: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("feature dim {got} does not match model feature dim {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
}

/// Rectangular time/feature masking applied to input features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    pub max_time_mask: usize,
    pub max_feat_mask: usize,
    pub masks_per_utterance: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_time_mask: 3,
            max_feat_mask: 2,
            masks_per_utterance: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub enc_hidden: usize,
    pub enc_blocks: usize,
    pub dec_hidden: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    /// Weight c on the CTC branch; the decoder branch gets 1 - c.
    pub ctc_weight: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < FIRST_SYMBOL + 1 {
            return Err(ModelError::Config(format!(
                "vocab_size {} leaves no room for plain symbols",
                self.vocab_size
            )));
        }
        if self.feature_dim == 0 || self.enc_hidden == 0 || self.dec_hidden == 0 {
            return Err(ModelError::Config("zero-sized layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(ModelError::Config(format!("ctc_weight {}", self.ctc_weight)));
        }
        Ok(())
    }

    /// Plain symbol ids: everything past the reserved tokens.
    pub fn symbols(&self) -> Vec<usize> {
        (FIRST_SYMBOL..self.vocab_size).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    CtcHead,
    Decoder,
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Full parameter state of one model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub segments: Vec<Segment>,
}

fn segment_defs(cfg: &ModelConfig) -> Vec<(String, ParamGroup, Vec<usize>)> {
    use ParamGroup::*;
    let (d, h, hd, c) = (cfg.feature_dim, cfg.enc_hidden, cfg.dec_hidden, cfg.vocab_size);
    let mut defs = vec![
        ("enc.in_w".to_string(), Encoder, vec![d, h]),
        ("enc.in_b".to_string(), Encoder, vec![h]),
    ];
    for i in 0..cfg.enc_blocks {
        defs.push((format!("enc.block{i}.conv_prev"), Encoder, vec![h]));
        defs.push((format!("enc.block{i}.conv_self"), Encoder, vec![h]));
        defs.push((format!("enc.block{i}.conv_next"), Encoder, vec![h]));
        defs.push((format!("enc.block{i}.mlp_w"), Encoder, vec![h, h]));
        defs.push((format!("enc.block{i}.mlp_b"), Encoder, vec![h]));
    }
    for w in ["wq", "wk", "wv", "wo"] {
        defs.push((format!("enc.attn.{w}"), Encoder, vec![h, h]));
    }
    defs.push(("enc.attn.bo".to_string(), Encoder, vec![h]));
    defs.push(("ctc.w".to_string(), CtcHead, vec![h, c]));
    defs.push(("ctc.b".to_string(), CtcHead, vec![c]));
    defs.push(("dec.emb".to_string(), Decoder, vec![c, hd]));
    defs.push(("dec.wq".to_string(), Decoder, vec![hd, hd]));
    defs.push(("dec.wk".to_string(), Decoder, vec![h, hd]));
    defs.push(("dec.wv".to_string(), Decoder, vec![h, hd]));
    defs.push(("dec.mix_w".to_string(), Decoder, vec![2 * hd, hd]));
    defs.push(("dec.mix_b".to_string(), Decoder, vec![hd]));
    defs.push(("dec.out_w".to_string(), Decoder, vec![hd, c]));
    defs.push(("dec.out_b".to_string(), Decoder, vec![c]));
    defs
}

impl Checkpoint {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let segments = segment_defs(cfg)
            .into_iter()
            .map(|(name, group, shape)| {
                let n = shape.iter().product();
                Segment {
                    name,
                    group,
                    shape,
                    values: vec![0.0; n],
                }
            })
            .collect();
        Ok(Checkpoint { segments })
    }

    /// Xavier-uniform matrices, zero biases, identity depthwise kernels.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ckpt = Checkpoint::zeros(cfg)?;
        for seg in &mut ckpt.segments {
            if seg.shape.len() == 2 {
                let limit = (6.0 / (seg.shape[0] + seg.shape[1]) as f64).sqrt();
                for v in &mut seg.values {
                    *v = rng.random_range(-limit..limit);
                }
            } else if seg.name.ends_with("conv_self") {
                seg.values.fill(1.0);
            }
        }
        Ok(ckpt)
    }

    pub fn param_count(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn compatible(&self, other: &Checkpoint) -> Result<(), ModelError> {
        if self.segments.len() != other.segments.len() {
            return Err(ModelError::Incompatible(format!(
                "{} segments vs {}",
                self.segments.len(),
                other.segments.len()
            )));
        }
        for (a, b) in self.segments.iter().zip(&other.segments) {
            if a.name != b.name || a.shape != b.shape {
                return Err(ModelError::Incompatible(format!(
                    "segment {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        #[derive(Serialize)]
        struct Meta<'a> {
            name: &'a str,
            group: ParamGroup,
            shape: &'a [usize],
        }
        let metas: Vec<Meta> = self
            .segments
            .iter()
            .map(|s| Meta {
                name: &s.name,
                group: s.group,
                shape: &s.shape,
            })
            .collect();
        let header =
            serde_json::to_vec(&metas).map_err(|e| ModelError::Format(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"OCLC")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for seg in &self.segments {
            for v in &seg.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        #[derive(Deserialize)]
        struct Meta {
            name: String,
            group: ParamGroup,
            shape: Vec<usize>,
        }
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"OCLC" {
            return Err(ModelError::Format("bad magic".into()));
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != 1 {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let mut l8 = [0u8; 8];
        r.read_exact(&mut l8)?;
        let hlen = u64::from_le_bytes(l8) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let metas: Vec<Meta> =
            serde_json::from_slice(&hbuf).map_err(|e| ModelError::Format(e.to_string()))?;
        let mut segments = Vec::with_capacity(metas.len());
        for m in metas {
            let n: usize = m.shape.iter().product();
            let mut values = vec![0.0f64; n];
            let mut b8 = [0u8; 8];
            for v in &mut values {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
            segments.push(Segment {
                name: m.name,
                group: m.group,
                shape: m.shape,
                values,
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        Ok(Checkpoint { segments })
    }
}

/// Stochastic training effects: dropout masks and feature masking. Decoding
/// and evaluation always run with effects disabled.
pub struct RandomEffects {
    rng: ChaCha8Rng,
    pub dropout: bool,
    pub augment: bool,
}

impl RandomEffects {
    pub fn training(seed: u64) -> Self {
        RandomEffects {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout: true,
            augment: true,
        }
    }

    pub fn disabled() -> Self {
        RandomEffects {
            rng: ChaCha8Rng::seed_from_u64(0),
            dropout: false,
            augment: false,
        }
    }
}

/// Zero out random time rows and feature columns, inverted-dropout style
/// masking at the input. Returns the features untouched when masking is off.
pub fn augment(features: &Array, cfg: &AugmentConfig, fx: &mut RandomEffects) -> Array {
    if !fx.augment || cfg.masks_per_utterance == 0 {
        return features.clone();
    }
    let (frames, dim) = (features.shape()[0], features.shape()[1]);
    let mut out = features.clone();
    for _ in 0..cfg.masks_per_utterance {
        let t_len = fx.rng.random_range(0..=cfg.max_time_mask.min(frames));
        if t_len > 0 {
            let t0 = fx.rng.random_range(0..=frames - t_len);
            for t in t0..t0 + t_len {
                for j in 0..dim {
                    out.set(t, j, 0.0);
                }
            }
        }
        let f_len = fx.rng.random_range(0..=cfg.max_feat_mask.min(dim));
        if f_len > 0 {
            let f0 = fx.rng.random_range(0..=dim - f_len);
            for t in 0..frames {
                for j in f0..f0 + f_len {
                    out.set(t, j, 0.0);
                }
            }
        }
    }
    out
}

/// Checkpoint segments bound onto a tape, in segment order.
pub struct Bound {
    names: Vec<String>,
    ids: Vec<VarId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> VarId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown segment {name}"));
        self.ids[i]
    }
}

/// Bind every segment as a trainable parameter.
pub fn bind(tape: &mut Tape, ckpt: &Checkpoint) -> Bound {
    bind_inner(tape, ckpt, true)
}

/// Bind every segment as a constant (teacher models).
pub fn bind_const(tape: &mut Tape, ckpt: &Checkpoint) -> Bound {
    bind_inner(tape, ckpt, false)
}

fn bind_inner(tape: &mut Tape, ckpt: &Checkpoint, trainable: bool) -> Bound {
    let mut names = Vec::with_capacity(ckpt.segments.len());
    let mut ids = Vec::with_capacity(ckpt.segments.len());
    for seg in &ckpt.segments {
        let arr = Array::new(seg.shape.clone(), seg.values.clone())
            .expect("checkpoint segment shape matches its data");
        ids.push(if trainable {
            tape.param(arr)
        } else {
            tape.leaf(arr)
        });
        names.push(seg.name.clone());
    }
    Bound { names, ids }
}

/// Matrix that shifts rows by `delta` when left-multiplied (vacated rows
/// become zero).
fn shift_matrix(frames: usize, delta: isize) -> Array {
    let mut m = Array::zeros(vec![frames, frames]);
    for t in 0..frames {
        let s = t as isize + delta;
        if s >= 0 && (s as usize) < frames {
            m.set(t, s as usize, 1.0);
        }
    }
    m
}

fn dropout_on(tape: &mut Tape, x: VarId, rate: f64, fx: &mut RandomEffects) -> VarId {
    if !fx.dropout || rate == 0.0 {
        return x;
    }
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if fx.rng.random_bool(rate) { 0.0 } else { keep })
        .collect();
    let m = tape.leaf(Array::new(shape, mask).unwrap());
    tape.mul(x, m).expect("mask shape matches input")
}

/// Encoder forward pass on a tape. Returns (hidden states, CTC logits).
pub fn encode_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    b: &Bound,
    features: &Array,
    fx: &mut RandomEffects,
) -> Result<(VarId, VarId), ModelError> {
    if features.shape().len() != 2 || features.shape()[1] != cfg.feature_dim {
        return Err(ModelError::FeatureDim {
            expected: cfg.feature_dim,
            got: *features.shape().last().unwrap_or(&0),
        });
    }
    let frames = features.shape()[0];
    let x = tape.leaf(features.clone());
    let mut h = tape.matmul(x, b.id("enc.in_w"))?;
    h = tape.add_row(h, b.id("enc.in_b"))?;
    h = tape.tanh(h);
    h = dropout_on(tape, h, cfg.dropout, fx);

    let sm = tape.leaf(shift_matrix(frames, -1));
    let sp = tape.leaf(shift_matrix(frames, 1));
    for i in 0..cfg.enc_blocks {
        let prev = tape.matmul(sm, h)?;
        let next = tape.matmul(sp, h)?;
        let cp = tape.mul_row(prev, b.id(&format!("enc.block{i}.conv_prev")))?;
        let cs = tape.mul_row(h, b.id(&format!("enc.block{i}.conv_self")))?;
        let cn = tape.mul_row(next, b.id(&format!("enc.block{i}.conv_next")))?;
        let c01 = tape.add(cp, cs)?;
        let conv = tape.add(c01, cn)?;
        let mut m = tape.matmul(conv, b.id(&format!("enc.block{i}.mlp_w")))?;
        m = tape.add_row(m, b.id(&format!("enc.block{i}.mlp_b")))?;
        m = tape.tanh(m);
        let res = tape.add(h, m)?;
        h = tape.tanh(res);
        h = dropout_on(tape, h, cfg.dropout, fx);
    }

    let q = tape.matmul(h, b.id("enc.attn.wq"))?;
    let k = tape.matmul(h, b.id("enc.attn.wk"))?;
    let v = tape.matmul(h, b.id("enc.attn.wv"))?;
    let mut sc = tape.matmul_tb(q, k)?;
    sc = tape.scale(sc, 1.0 / (cfg.enc_hidden as f64).sqrt());
    let a = tape.softmax(sc);
    let ctx = tape.matmul(a, v)?;
    let mut o = tape.matmul(ctx, b.id("enc.attn.wo"))?;
    o = tape.add_row(o, b.id("enc.attn.bo"))?;
    let res = tape.add(h, o)?;
    h = tape.tanh(res);
    h = dropout_on(tape, h, cfg.dropout, fx);

    let mut logits = tape.matmul(h, b.id("ctc.w"))?;
    logits = tape.add_row(logits, b.id("ctc.b"))?;
    Ok((h, logits))
}

/// Decoder forward pass for a whole teacher-forced input row sequence.
/// Returns logits [len(input), vocab].
pub fn decode_rows_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    b: &Bound,
    enc: VarId,
    input: &[usize],
    fx: &mut RandomEffects,
) -> Result<VarId, ModelError> {
    let emb = tape.embed(b.id("dec.emb"), input)?;
    let q = tape.matmul(emb, b.id("dec.wq"))?;
    let k = tape.matmul(enc, b.id("dec.wk"))?;
    let v = tape.matmul(enc, b.id("dec.wv"))?;
    let mut sc = tape.matmul_tb(q, k)?;
    sc = tape.scale(sc, 1.0 / (cfg.dec_hidden as f64).sqrt());
    let a = tape.softmax(sc);
    let ctx = tape.matmul(a, v)?;
    let cat = tape.concat_cols(emb, ctx)?;
    let mut m = tape.matmul(cat, b.id("dec.mix_w"))?;
    m = tape.add_row(m, b.id("dec.mix_b"))?;
    m = tape.tanh(m);
    m = dropout_on(tape, m, cfg.dropout, fx);
    let mut logits = tape.matmul(m, b.id("dec.out_w"))?;
    logits = tape.add_row(logits, b.id("dec.out_b"))?;
    Ok(logits)
}

/// One training utterance. CTC and decoder targets are kept separate so
/// pseudo-labels from different decoders can feed each branch.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: Array,
    pub ctc_tokens: Vec<usize>,
    pub dec_tokens: Vec<usize>,
}

fn validate_tokens(tokens: &[usize], vocab: usize) -> Result<(), ModelError> {
    for (pos, &token) in tokens.iter().enumerate() {
        if !(FIRST_SYMBOL..vocab).contains(&token) {
            return Err(ModelError::BadToken { token, pos, vocab });
        }
    }
    Ok(())
}

struct ItemNodes {
    loss: VarId,
    ctc_logits: VarId,
    dec_logits: VarId,
    input: Vec<usize>,
}

fn item_loss_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    b: &Bound,
    item: &TrainItem,
    fx: &mut RandomEffects,
) -> Result<ItemNodes, ModelError> {
    validate_tokens(&item.ctc_tokens, cfg.vocab_size)?;
    validate_tokens(&item.dec_tokens, cfg.vocab_size)?;
    let (enc, ctc_logits) = encode_on(tape, cfg, b, &item.features, fx)?;
    let ctc_logp = tape.log_softmax(ctc_logits);
    let ctc = ctc_loss_node(tape, ctc_logp, &item.ctc_tokens, BLANK)?;

    let mut input = Vec::with_capacity(item.dec_tokens.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&item.dec_tokens);
    let mut targets = item.dec_tokens.clone();
    targets.push(EOS);
    let dec_logits = decode_rows_on(tape, cfg, b, enc, &input, fx)?;
    let dec_logp = tape.log_softmax(dec_logits);
    let ce = tape.nll_mean(dec_logp, &targets)?;

    let wc = tape.scale(ctc, cfg.ctc_weight);
    let we = tape.scale(ce, 1.0 - cfg.ctc_weight);
    let loss = tape.add(wc, we)?;
    Ok(ItemNodes {
        loss,
        ctc_logits,
        dec_logits,
        input,
    })
}

/// Batch loss: mean over utterances of
/// `ctc_weight * ctc_loss + (1 - ctc_weight) * per-token decoder CE`.
pub fn hybrid_loss_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    b: &Bound,
    items: &[TrainItem],
    fx: &mut RandomEffects,
) -> Result<VarId, ModelError> {
    if items.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total: Option<VarId> = None;
    for item in items {
        let nodes = item_loss_on(tape, cfg, b, item, fx)?;
        total = Some(match total {
            None => nodes.loss,
            Some(t) => tape.add(t, nodes.loss)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / items.len() as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KdConfig {
    pub weight: f64,
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            weight: 1.0,
            temperature: 1.0,
        }
    }
}

/// Batch loss plus a distillation penalty pulling the student's CTC-frame
/// and decoder distributions toward a frozen teacher evaluated on the same
/// features and teacher-forced inputs.
pub fn hybrid_loss_with_kd_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    b: &Bound,
    items: &[TrainItem],
    teacher: &Checkpoint,
    kd: &KdConfig,
    fx: &mut RandomEffects,
) -> Result<VarId, ModelError> {
    if items.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut task_total: Option<VarId> = None;
    let mut kd_total: Option<VarId> = None;
    for item in items {
        let nodes = item_loss_on(tape, cfg, b, item, fx)?;
        task_total = Some(match task_total {
            None => nodes.loss,
            Some(t) => tape.add(t, nodes.loss)?,
        });

        let (t_enc, t_ctc_logits) = encode(cfg, teacher, &item.features)?;
        let t_ctc = softmax_rows(&t_ctc_logits, kd.temperature);
        let t_dec_logits = decoder_logits(cfg, teacher, &t_enc, &nodes.input)?;
        let t_dec = softmax_rows(&t_dec_logits, kd.temperature);

        let pen = kd_penalty_on(
            tape,
            cfg,
            nodes.ctc_logits,
            nodes.dec_logits,
            &t_ctc,
            &t_dec,
            kd.temperature,
        )?;
        kd_total = Some(match kd_total {
            None => pen,
            Some(t) => tape.add(t, pen)?,
        });
    }
    let n = items.len() as f64;
    let task = tape.scale(task_total.unwrap(), 1.0 / n);
    let pen = tape.scale(kd_total.unwrap(), kd.weight / n);
    Ok(tape.add(task, pen)?)
}

/// Cross-entropy of the student's tempered CTC-frame and decoder
/// distributions against fixed teacher distributions, weighted like the task
/// loss. The logit nodes must already be on the tape.
pub fn kd_penalty_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    ctc_logits: VarId,
    dec_logits: VarId,
    teacher_ctc: &Array,
    teacher_dec: &Array,
    temperature: f64,
) -> Result<VarId, ModelError> {
    let frames = tape.value(ctc_logits).shape()[0];
    let rows = tape.value(dec_logits).shape()[0];

    let sc = tape.scale(ctc_logits, 1.0 / temperature);
    let slogp = tape.log_softmax(sc);
    let tleaf = tape.leaf(teacher_ctc.clone());
    let prod = tape.mul(tleaf, slogp)?;
    let s = tape.sum(prod);
    let ctc_kd = tape.scale(s, -1.0 / frames as f64);

    let sd = tape.scale(dec_logits, 1.0 / temperature);
    let dlogp = tape.log_softmax(sd);
    let dleaf = tape.leaf(teacher_dec.clone());
    let dprod = tape.mul(dleaf, dlogp)?;
    let ds = tape.sum(dprod);
    let dec_kd = tape.scale(ds, -1.0 / rows as f64);

    let wc = tape.scale(ctc_kd, cfg.ctc_weight);
    let wd = tape.scale(dec_kd, 1.0 - cfg.ctc_weight);
    Ok(tape.add(wc, wd)?)
}

/// Row-wise softmax with temperature, as plain data.
pub fn softmax_rows(logits: &Array, temperature: f64) -> Array {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = logits.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for v in row.iter_mut() {
            *v /= temperature;
        }
        crate::autodiff::softmax_row(row);
    }
    out
}

/// Row-wise log-softmax as plain data.
pub fn log_softmax_rows(logits: &Array) -> Array {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = logits.clone();
    for r in 0..rows {
        log_softmax_row(&mut out.data_mut()[r * cols..(r + 1) * cols]);
    }
    out
}

/// Deterministic encoder forward pass. Returns (hidden states, CTC logits).
pub fn encode(cfg: &ModelConfig, ckpt: &Checkpoint, features: &Array) -> Result<(Array, Array), ModelError> {
    let mut tape = Tape::new();
    let b = bind_const(&mut tape, ckpt);
    let mut fx = RandomEffects::disabled();
    let (enc, logits) = encode_on(&mut tape, cfg, &b, features, &mut fx)?;
    Ok((tape.value(enc).clone(), tape.value(logits).clone()))
}

/// Deterministic decoder logits for a teacher-forced input sequence.
pub fn decoder_logits(
    cfg: &ModelConfig,
    ckpt: &Checkpoint,
    enc: &Array,
    input: &[usize],
) -> Result<Array, ModelError> {
    let mut tape = Tape::new();
    let b = bind_const(&mut tape, ckpt);
    let mut fx = RandomEffects::disabled();
    let e = tape.leaf(enc.clone());
    let logits = decode_rows_on(&mut tape, cfg, &b, e, input, &mut fx)?;
    Ok(tape.value(logits).clone())
}

/// Next-token log-probs given a prefix of plain symbols.
pub fn decode_step(
    cfg: &ModelConfig,
    ckpt: &Checkpoint,
    enc: &Array,
    prefix: &[usize],
) -> Result<Vec<f64>, ModelError> {
    let mut input = Vec::with_capacity(prefix.len() + 1);
    input.push(BOS);
    input.extend_from_slice(prefix);
    let logits = decoder_logits(cfg, ckpt, enc, &input)?;
    let logp = log_softmax_rows(&logits);
    let cols = logp.cols();
    let last = logp.rows() - 1;
    Ok(logp.data()[last * cols..(last + 1) * cols].to_vec())
}

/// Greedy CTC decoding: per-frame argmax over blank and plain symbols.
pub fn greedy_decode(cfg: &ModelConfig, ckpt: &Checkpoint, features: &Array) -> Result<Vec<usize>, ModelError> {
    let (_, logits) = encode(cfg, ckpt, features)?;
    let logp = log_softmax_rows(&logits);
    let mut candidates = vec![BLANK];
    candidates.extend(cfg.symbols());
    Ok(greedy_ctc_decode(&logp, BLANK, &candidates))
}

/// Joint CTC/decoder beam search weighted by the model's ctc_weight.
pub fn hybrid_decode(
    cfg: &ModelConfig,
    ckpt: &Checkpoint,
    features: &Array,
    beam: usize,
    max_len: usize,
) -> Result<DecodeResult, ModelError> {
    let (enc, logits) = encode(cfg, ckpt, features)?;
    let ctc_logp = log_softmax_rows(&logits);
    let dcfg = DecodeConfig {
        beam,
        ctc_weight: cfg.ctc_weight,
        aux_weight: 1.0 - cfg.ctc_weight,
        max_len,
    };
    let symbols = cfg.symbols();
    Ok(joint_beam_decode(&ctc_logp, BLANK, &symbols, EOS, &dcfg, |prefix| {
        decode_step(cfg, ckpt, &enc, prefix).expect("prefix tokens are valid symbols")
    }))
}

/// Apply the tape's gradients to the checkpoint. Consumes the tape so a
/// gradient can only be applied once.
pub fn sgd_step(ckpt: &mut Checkpoint, tape: Tape, bound: &Bound, lr: f64) -> Result<(), ModelError> {
    for (seg, &id) in ckpt.segments.iter_mut().zip(&bound.ids) {
        let grad = tape.grad(id).ok_or(AdError::MissingGrad {
            what: seg.name.clone(),
        })?;
        sgd_step_slice(&mut seg.values, grad.data(), lr);
    }
    Ok(())
}
