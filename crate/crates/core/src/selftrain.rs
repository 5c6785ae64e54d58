//! Self-training support: pseudo-label generation and a count-based n-gram
//! language model for shallow fusion over CTC decoding.
//!
//! Pseudo-labels are always produced with stochastic effects disabled; every
//! decoding route below is a deterministic function of the checkpoint and
//! the features.

use crate::autodiff::Array;
use crate::ctc::{joint_beam_decode, DecodeConfig, DecodeResult, LOG_ZERO};
use crate::model::{
    encode, greedy_decode, hybrid_decode, log_softmax_rows, Checkpoint, ModelConfig, ModelError,
    TrainItem, BLANK, BOS, EOS,
};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelfTrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("language-model fusion requested but no language model was supplied")]
    MissingLm,
    #[error("language model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("language model format: {0}")]
    Format(String),
    #[error("invalid language model: {0}")]
    Config(String),
}

/// Which decoder produces the pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlRoute {
    /// Greedy CTC transcript for both branches.
    Ctc,
    /// Joint CTC/decoder beam transcript for both branches.
    Hybrid,
    /// Greedy CTC transcript for the CTC branch, joint beam transcript for
    /// the decoder branch.
    Split,
    /// CTC beam decoding with n-gram shallow fusion for both branches.
    LmFusion,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlFilter {
    /// Bounds on tokens per frame.
    pub min_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlConfig {
    pub route: PlRoute,
    pub beam: usize,
    pub max_len: usize,
    /// Language-model weight, used only by the fusion route.
    pub lm_lambda: f64,
    pub filter: Option<PlFilter>,
}

/// One pseudo-labeled utterance.
#[derive(Debug, Clone)]
pub struct PlUtterance {
    pub id: String,
    pub features: Array,
    pub ctc_tokens: Vec<usize>,
    pub dec_tokens: Vec<usize>,
    pub truncated: bool,
    /// Decoder-branch tokens per feature frame.
    pub len_ratio: f64,
}

impl PlUtterance {
    pub fn to_train_item(&self) -> TrainItem {
        TrainItem {
            features: self.features.clone(),
            ctc_tokens: self.ctc_tokens.clone(),
            dec_tokens: self.dec_tokens.clone(),
        }
    }
}

/// Decode one utterance into pseudo-labels along the configured route.
pub fn pseudo_label(
    mcfg: &ModelConfig,
    ckpt: &Checkpoint,
    id: &str,
    features: &Array,
    plcfg: &PlConfig,
    lm: Option<&NgramLm>,
) -> Result<PlUtterance, SelfTrainError> {
    let frames = features.shape()[0];
    let (ctc_tokens, dec_tokens, truncated) = match plcfg.route {
        PlRoute::Ctc => {
            let t = greedy_decode(mcfg, ckpt, features)?;
            (t.clone(), t, false)
        }
        PlRoute::Hybrid => {
            let r = hybrid_decode(mcfg, ckpt, features, plcfg.beam, plcfg.max_len)?;
            (r.tokens.clone(), r.tokens, r.truncated)
        }
        PlRoute::Split => {
            let c = greedy_decode(mcfg, ckpt, features)?;
            let r = hybrid_decode(mcfg, ckpt, features, plcfg.beam, plcfg.max_len)?;
            (c, r.tokens, r.truncated)
        }
        PlRoute::LmFusion => {
            let lm = lm.ok_or(SelfTrainError::MissingLm)?;
            let r = lm_fused_ctc_decode(
                mcfg,
                ckpt,
                features,
                lm,
                plcfg.lm_lambda,
                plcfg.beam,
                plcfg.max_len,
            )?;
            (r.tokens.clone(), r.tokens, r.truncated)
        }
    };
    let len_ratio = dec_tokens.len() as f64 / frames as f64;
    Ok(PlUtterance {
        id: id.to_string(),
        features: features.clone(),
        ctc_tokens,
        dec_tokens,
        truncated,
        len_ratio,
    })
}

/// Drop truncated or length-degenerate pseudo-labels. Returns the kept
/// utterances and the number dropped.
pub fn apply_filter(pls: Vec<PlUtterance>, filter: Option<&PlFilter>) -> (Vec<PlUtterance>, usize) {
    let Some(f) = filter else {
        return (pls, 0);
    };
    let before = pls.len();
    let kept: Vec<PlUtterance> = pls
        .into_iter()
        .filter(|p| !p.truncated && p.len_ratio >= f.min_ratio && p.len_ratio <= f.max_ratio)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// CTC beam decoding with n-gram shallow fusion:
/// `log P_ctc(prefix) + lambda * log P_lm(prefix)`.
pub fn lm_fused_ctc_decode(
    mcfg: &ModelConfig,
    ckpt: &Checkpoint,
    features: &Array,
    lm: &NgramLm,
    lambda: f64,
    beam: usize,
    max_len: usize,
) -> Result<DecodeResult, SelfTrainError> {
    let (_, logits) = encode(mcfg, ckpt, features)?;
    let ctc_logp = log_softmax_rows(&logits);
    let symbols = mcfg.symbols();
    let cfg = DecodeConfig {
        beam,
        ctc_weight: 1.0,
        aux_weight: lambda,
        max_len,
    };
    Ok(joint_beam_decode(
        &ctc_logp,
        BLANK,
        &symbols,
        EOS,
        &cfg,
        |prefix| lm_row(lm, prefix, mcfg.vocab_size, &symbols),
    ))
}

fn lm_row(lm: &NgramLm, prefix: &[usize], vocab: usize, symbols: &[usize]) -> Vec<f64> {
    let mut row = vec![LOG_ZERO; vocab];
    for &s in symbols {
        row[s] = lm.log_prob(prefix, s);
    }
    row[EOS] = lm.log_prob(prefix, EOS);
    row
}

/// Add-k smoothed n-gram model over plain symbols plus EOS, with BOS
/// context padding. Counts live in ordered maps so iteration order, and the
/// saved file, are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    k: f64,
    vocab: Vec<usize>,
    counts: BTreeMap<Vec<usize>, ContextCounts>,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct ContextCounts {
    next: BTreeMap<usize, u64>,
    total: u64,
}

impl NgramLm {
    /// Train on whole symbol sequences; EOS events are added internally.
    pub fn train(
        order: usize,
        k: f64,
        symbols: &[usize],
        corpus: &[Vec<usize>],
    ) -> Result<Self, SelfTrainError> {
        if order == 0 {
            return Err(SelfTrainError::Config("order must be at least 1".into()));
        }
        if symbols.is_empty() {
            return Err(SelfTrainError::Config("empty symbol set".into()));
        }
        if k <= 0.0 {
            return Err(SelfTrainError::Config("smoothing k must be positive".into()));
        }
        let mut vocab = symbols.to_vec();
        vocab.push(EOS);
        vocab.sort_unstable();
        vocab.dedup();
        let mut lm = NgramLm {
            order,
            k,
            vocab,
            counts: BTreeMap::new(),
        };
        for seq in corpus {
            for i in 0..=seq.len() {
                let next = if i == seq.len() { EOS } else { seq[i] };
                let key = lm.context_key(&seq[..i]);
                let ctx = lm.counts.entry(key).or_default();
                *ctx.next.entry(next).or_default() += 1;
                ctx.total += 1;
            }
        }
        Ok(lm)
    }

    fn context_key(&self, prefix: &[usize]) -> Vec<usize> {
        let n = self.order - 1;
        let pad = n.saturating_sub(prefix.len());
        let mut key = vec![BOS; pad];
        key.extend_from_slice(&prefix[prefix.len() - (n - pad)..]);
        key
    }

    /// log P(next | last order-1 tokens of prefix), add-k smoothed.
    pub fn log_prob(&self, prefix: &[usize], next: usize) -> f64 {
        if !self.vocab.contains(&next) {
            return LOG_ZERO;
        }
        let key = self.context_key(prefix);
        let (count, total) = match self.counts.get(&key) {
            Some(ctx) => (ctx.next.get(&next).copied().unwrap_or(0), ctx.total),
            None => (0, 0),
        };
        let v = self.vocab.len() as f64;
        ((count as f64 + self.k) / (total as f64 + self.k * v)).ln()
    }

    /// log P of a whole sequence including its EOS event.
    pub fn sequence_log_prob(&self, seq: &[usize]) -> f64 {
        let mut lp = 0.0;
        for i in 0..=seq.len() {
            let next = if i == seq.len() { EOS } else { seq[i] };
            lp += self.log_prob(&seq[..i], next);
        }
        lp
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn save(&self, path: &Path) -> Result<(), SelfTrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "oclm 1")?;
        writeln!(w, "order {}", self.order)?;
        writeln!(w, "k {}", self.k)?;
        let vocab: Vec<String> = self.vocab.iter().map(|v| v.to_string()).collect();
        writeln!(w, "vocab {}", vocab.join(","))?;
        for (ctx, cc) in &self.counts {
            let key: Vec<String> = ctx.iter().map(|v| v.to_string()).collect();
            for (&next, &count) in &cc.next {
                writeln!(w, "{}|{}|{}", key.join(","), next, count)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SelfTrainError> {
        let r = BufReader::new(File::open(path)?);
        let mut lines = r.lines();
        let bad = |m: &str| SelfTrainError::Format(m.to_string());

        let magic = lines.next().ok_or_else(|| bad("empty file"))??;
        if magic != "oclm 1" {
            return Err(bad("bad magic"));
        }
        let parse_kv = |line: &str, key: &str| -> Result<String, SelfTrainError> {
            line.strip_prefix(key)
                .and_then(|s| s.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {key} line")))
        };
        let order: usize = parse_kv(&lines.next().ok_or_else(|| bad("truncated"))??, "order")?
            .parse()
            .map_err(|_| bad("order"))?;
        let k: f64 = parse_kv(&lines.next().ok_or_else(|| bad("truncated"))??, "k")?
            .parse()
            .map_err(|_| bad("k"))?;
        let vocab_line = parse_kv(&lines.next().ok_or_else(|| bad("truncated"))??, "vocab")?;
        let vocab: Vec<usize> = vocab_line
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("vocab")))
            .collect::<Result<_, _>>()?;

        let mut counts: BTreeMap<Vec<usize>, ContextCounts> = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('|');
            let (ctx_s, next_s, count_s) = (
                parts.next().ok_or_else(|| bad("row"))?,
                parts.next().ok_or_else(|| bad("row"))?,
                parts.next().ok_or_else(|| bad("row"))?,
            );
            let ctx: Vec<usize> = if ctx_s.is_empty() {
                Vec::new()
            } else {
                ctx_s
                    .split(',')
                    .map(|s| s.parse().map_err(|_| bad("context")))
                    .collect::<Result<_, _>>()?
            };
            let next: usize = next_s.parse().map_err(|_| bad("next"))?;
            let count: u64 = count_s.parse().map_err(|_| bad("count"))?;
            let cc = counts.entry(ctx).or_default();
            cc.next.insert(next, count);
            cc.total += count;
        }
        Ok(NgramLm {
            order,
            k,
            vocab,
            counts,
        })
    }
}
