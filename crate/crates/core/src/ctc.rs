//! Connectionist temporal classification: loss, gradient, and decoding.
//!
//! Everything runs in natural-log space. [`LOG_ZERO`] stands in for log(0);
//! true negative infinity is avoided so that adding two impossible states
//! never produces NaN.

use crate::autodiff::{AdError, Array, Tape, VarId};
use thiserror::Error;

/// Log-space floor. Any value at or below this is treated as log(0).
pub const LOG_ZERO: f64 = -1e30;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("label of length {label_len} needs at least {min_frames} frames, got {frames}")]
    LabelTooLong {
        label_len: usize,
        min_frames: usize,
        frames: usize,
    },
    #[error("label token {token} at position {pos} is invalid for vocab size {vocab}")]
    InvalidLabel {
        token: usize,
        pos: usize,
        vocab: usize,
    },
    #[error("log-prob matrix must be 2-d [frames, vocab], got {shape:?}")]
    BadShape { shape: Vec<usize> },
    #[error("every alignment underflowed the log-space floor")]
    Underflow,
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// log(exp(a) + exp(b)) with [`LOG_ZERO`] treated as log(0).
pub fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO {
        return b;
    }
    if b <= LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Fewest frames that can emit `labels`: one per token plus one separating
/// blank per adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn validate(logp: &Array, labels: &[usize], blank: usize) -> Result<(usize, usize), CtcError> {
    if logp.shape().len() != 2 {
        return Err(CtcError::BadShape {
            shape: logp.shape().to_vec(),
        });
    }
    let (frames, vocab) = (logp.shape()[0], logp.shape()[1]);
    for (pos, &token) in labels.iter().enumerate() {
        if token == blank || token >= vocab {
            return Err(CtcError::InvalidLabel { token, pos, vocab });
        }
    }
    let need = min_frames(labels);
    if frames < need {
        return Err(CtcError::LabelTooLong {
            label_len: labels.len(),
            min_frames: need,
            frames,
        });
    }
    Ok((frames, vocab))
}

/// Blank-interleaved extended label sequence: [b, l1, b, l2, ..., b].
fn extend_labels(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

fn forward_alphas(logp: &Array, ext: &[usize], frames: usize, blank: usize) -> Vec<Vec<f64>> {
    let s_len = ext.len();
    let mut alpha = vec![vec![LOG_ZERO; s_len]; frames];
    alpha[0][0] = logp.at(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = logp.at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc > LOG_ZERO {
                alpha[t][s] = logp.at(t, ext[s]) + acc;
            }
        }
    }
    alpha
}

/// Suffix probabilities excluding the emission at the current frame.
fn backward_betas(logp: &Array, ext: &[usize], frames: usize, blank: usize) -> Vec<Vec<f64>> {
    let s_len = ext.len();
    let mut beta = vec![vec![LOG_ZERO; s_len]; frames];
    beta[frames - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + logp.at(t + 1, ext[s]);
            if s + 1 < s_len {
                let step = beta[t + 1][s + 1] + logp.at(t + 1, ext[s + 1]);
                acc = log_add(acc, step);
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                let skip = beta[t + 1][s + 2] + logp.at(t + 1, ext[s + 2]);
                acc = log_add(acc, skip);
            }
            beta[t][s] = acc;
        }
    }
    beta
}

fn total_log_prob(alpha: &[Vec<f64>], s_len: usize) -> f64 {
    let last = &alpha[alpha.len() - 1];
    let mut p = last[s_len - 1];
    if s_len > 1 {
        p = log_add(p, last[s_len - 2]);
    }
    p
}

/// CTC loss -log P(labels | logp). `logp` is a [frames, vocab] matrix of
/// per-frame log scores; rows do not need to be normalized.
pub fn ctc_loss(logp: &Array, labels: &[usize], blank: usize) -> Result<f64, CtcError> {
    let (frames, _) = validate(logp, labels, blank)?;
    let ext = extend_labels(labels, blank);
    let alpha = forward_alphas(logp, &ext, frames, blank);
    let p = total_log_prob(&alpha, ext.len());
    if p <= LOG_ZERO {
        return Err(CtcError::Underflow);
    }
    Ok(-p)
}

/// CTC loss plus its gradient with respect to every entry of `logp`.
pub fn ctc_loss_with_grad(
    logp: &Array,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, Array), CtcError> {
    let (frames, vocab) = validate(logp, labels, blank)?;
    let ext = extend_labels(labels, blank);
    let s_len = ext.len();
    let alpha = forward_alphas(logp, &ext, frames, blank);
    let beta = backward_betas(logp, &ext, frames, blank);
    let p = total_log_prob(&alpha, s_len);
    if p <= LOG_ZERO {
        return Err(CtcError::Underflow);
    }

    // d(-log P)/d(logp[t,k]) = -exp(gamma_t(k) - log P), where gamma_t(k)
    // gathers alpha*beta over extended states labeled k.
    let mut grad = Array::zeros(vec![frames, vocab]);
    let mut row = vec![LOG_ZERO; vocab];
    for t in 0..frames {
        for v in row.iter_mut() {
            *v = LOG_ZERO;
        }
        for s in 0..s_len {
            let ab = alpha[t][s] + beta[t][s];
            if ab > LOG_ZERO {
                row[ext[s]] = log_add(row[ext[s]], ab);
            }
        }
        for (k, &v) in row.iter().enumerate() {
            if v > LOG_ZERO {
                grad.set(t, k, -((v - p).exp()));
            }
        }
    }
    Ok((-p, grad))
}

/// Push the CTC loss onto a tape as a scalar node whose backward pass routes
/// the precomputed gradient into the log-prob input.
pub fn ctc_loss_node(tape: &mut Tape, logp: VarId, labels: &[usize], blank: usize) -> Result<VarId, CtcError> {
    let (loss, grad) = ctc_loss_with_grad(tape.value(logp), labels, blank)?;
    Ok(tape.scalar_external(logp, loss, grad)?)
}

/// Enumeration oracle: sums every path whose collapse equals `labels`.
/// Exponential in `frames`; returns +inf when no path matches.
pub fn brute_force_ctc(logp: &Array, labels: &[usize], blank: usize) -> f64 {
    let (frames, vocab) = (logp.shape()[0], logp.shape()[1]);
    let mut total = LOG_ZERO;
    let mut path = vec![0usize; frames];
    loop {
        if collapse_path(&path, blank) == labels {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp.at(t, k)).sum();
            total = log_add(total, lp);
        }
        // odometer increment
        let mut pos = frames;
        loop {
            if pos == 0 {
                if total <= LOG_ZERO {
                    return f64::INFINITY;
                }
                return -total;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Per-frame argmax over `candidates` (which must include `blank`), then
/// collapse. Ties go to the candidate listed first.
pub fn greedy_ctc_decode(logp: &Array, blank: usize, candidates: &[usize]) -> Vec<usize> {
    let frames = logp.shape()[0];
    let mut path = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut best = candidates[0];
        let mut best_v = logp.at(t, candidates[0]);
        for &c in &candidates[1..] {
            let v = logp.at(t, c);
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        path.push(best);
    }
    collapse_path(&path, blank)
}

/// Incremental CTC prefix-probability scorer.
///
/// For a hypothesis prefix h, tracks per-frame probabilities of emitting
/// exactly h with the last path symbol non-blank (`log_n`) or blank
/// (`log_b`), and the prefix probability `log_psi` = log P(output starts
/// with h).
pub struct CtcPrefixScorer<'a> {
    logp: &'a Array,
    blank: usize,
}

#[derive(Debug, Clone)]
pub struct PrefixState {
    log_n: Vec<f64>,
    log_b: Vec<f64>,
    last: Option<usize>,
    pub log_psi: f64,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(logp: &'a Array, blank: usize) -> Self {
        CtcPrefixScorer { logp, blank }
    }

    pub fn frames(&self) -> usize {
        self.logp.shape()[0]
    }

    /// State for the empty prefix. Index t holds probabilities after t
    /// frames, so index 0 is the state before any frame.
    pub fn initial_state(&self) -> PrefixState {
        let frames = self.frames();
        let mut log_b = vec![LOG_ZERO; frames + 1];
        log_b[0] = 0.0;
        for t in 1..=frames {
            log_b[t] = log_b[t - 1] + self.logp.at(t - 1, self.blank);
        }
        PrefixState {
            log_n: vec![LOG_ZERO; frames + 1],
            log_b,
            last: None,
            log_psi: 0.0,
        }
    }

    /// Extend a prefix with one non-blank symbol.
    pub fn extend(&self, st: &PrefixState, c: usize) -> PrefixState {
        debug_assert_ne!(c, self.blank);
        let frames = self.frames();
        let mut log_n = vec![LOG_ZERO; frames + 1];
        let mut log_b = vec![LOG_ZERO; frames + 1];
        let mut psi = LOG_ZERO;
        for t in 1..=frames {
            // mass positioned to start emitting c after t-1 frames
            let mut phi = st.log_b[t - 1];
            if st.last != Some(c) {
                phi = log_add(phi, st.log_n[t - 1]);
            }
            let y_c = self.logp.at(t - 1, c);
            log_n[t] = y_c + log_add(log_n[t - 1], phi);
            log_b[t] = self.logp.at(t - 1, self.blank) + log_add(log_b[t - 1], log_n[t - 1]);
            psi = log_add(psi, y_c + phi);
        }
        PrefixState {
            log_n,
            log_b,
            last: Some(c),
            log_psi: psi,
        }
    }

    /// log P(output equals this prefix exactly).
    pub fn complete_log_prob(&self, st: &PrefixState) -> f64 {
        let frames = self.frames();
        log_add(st.log_n[frames], st.log_b[frames])
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    /// Weight on the auxiliary per-token scorer (decoder or language model).
    pub aux_weight: f64,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub score: f64,
    /// The winning hypothesis used the full token budget.
    pub truncated: bool,
}

struct Hyp {
    state: PrefixState,
    tokens: Vec<usize>,
    aux_sum: f64,
    score: f64,
}

/// Beam search over label prefixes scored by
/// `ctc_weight * log P_ctc(prefix...) + aux_weight * sum of aux log-probs`.
///
/// `aux_logp` maps a prefix to a log-prob row over the full vocab; `eos`
/// indexes the end-of-sequence entry of that row. Hypotheses only ever
/// expand with tokens from `symbols`. Both per-token score streams are
/// non-increasing, which justifies stopping once the best finished
/// hypothesis outscores every live prefix.
pub fn joint_beam_decode(
    logp_ctc: &Array,
    blank: usize,
    symbols: &[usize],
    eos: usize,
    cfg: &DecodeConfig,
    mut aux_logp: impl FnMut(&[usize]) -> Vec<f64>,
) -> DecodeResult {
    let scorer = CtcPrefixScorer::new(logp_ctc, blank);
    let mut beams = vec![Hyp {
        state: scorer.initial_state(),
        tokens: Vec::new(),
        aux_sum: 0.0,
        score: 0.0,
    }];
    let mut best: Option<(f64, Vec<usize>)> = None;

    for _ in 0..=cfg.max_len {
        // finishing option for every live prefix
        for h in &beams {
            let row = aux_logp(&h.tokens);
            let fin = cfg.ctc_weight * scorer.complete_log_prob(&h.state)
                + cfg.aux_weight * (h.aux_sum + row[eos]);
            if best.as_ref().is_none_or(|(s, _)| fin > *s) {
                best = Some((fin, h.tokens.clone()));
            }
        }
        if let Some((s, _)) = &best {
            if beams.iter().all(|h| h.score <= *s) {
                break;
            }
        }
        if beams[0].tokens.len() == cfg.max_len {
            break;
        }

        let mut cands: Vec<Hyp> = Vec::with_capacity(beams.len() * symbols.len());
        for h in &beams {
            let row = aux_logp(&h.tokens);
            for &c in symbols {
                let state = scorer.extend(&h.state, c);
                let aux_sum = h.aux_sum + row[c];
                let score = cfg.ctc_weight * state.log_psi + cfg.aux_weight * aux_sum;
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                cands.push(Hyp {
                    state,
                    tokens,
                    aux_sum,
                    score,
                });
            }
        }
        if cands.is_empty() {
            break;
        }
        // stable sort keeps earlier (lower-symbol) candidates on ties
        cands.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        cands.truncate(cfg.beam);
        beams = cands;
    }

    let (score, tokens) = best.expect("finishing option is scored before any pruning");
    let truncated = tokens.len() == cfg.max_len;
    DecodeResult {
        tokens,
        score,
        truncated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::log_softmax_row;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const BLANK: usize = 0;

    fn random_logp(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Array {
        let mut data: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        for r in 0..frames {
            log_softmax_row(&mut data[r * vocab..(r + 1) * vocab]);
        }
        Array::new(vec![frames, vocab], data).unwrap()
    }

    #[test]
    fn log_add_basics() {
        assert_eq!(log_add(LOG_ZERO, -1.5), -1.5);
        assert_eq!(log_add(-1.5, LOG_ZERO), -1.5);
        assert_eq!(log_add(LOG_ZERO, LOG_ZERO), LOG_ZERO);
        let half = 0.5f64.ln();
        assert!((log_add(half, half) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(min_frames(&[]), 0);
        assert_eq!(min_frames(&[3]), 1);
        assert_eq!(min_frames(&[3, 3]), 3);
        assert_eq!(min_frames(&[3, 4, 4, 3]), 5);
    }

    #[test]
    fn collapse_merges_then_drops_blanks() {
        assert_eq!(collapse_path(&[0, 1, 1, 0, 1, 2, 2], BLANK), vec![1, 1, 2]);
        assert_eq!(collapse_path(&[0, 0, 0], BLANK), Vec::<usize>::new());
    }

    #[test]
    fn empty_label_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logp = random_logp(&mut rng, 4, 3);
        let expected: f64 = -(0..4).map(|t| logp.at(t, BLANK)).sum::<f64>();
        let loss = ctc_loss(&logp, &[], BLANK).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn too_few_frames_is_rejected() {
        let logp = Array::zeros(vec![2, 3]);
        let err = ctc_loss(&logp, &[1, 1], BLANK).unwrap_err();
        match err {
            CtcError::LabelTooLong {
                label_len,
                min_frames,
                frames,
            } => {
                assert_eq!((label_len, min_frames, frames), (2, 3, 2));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn blank_and_oov_labels_are_rejected() {
        let logp = Array::zeros(vec![4, 3]);
        assert!(matches!(
            ctc_loss(&logp, &[1, 0], BLANK),
            Err(CtcError::InvalidLabel { token: 0, pos: 1, .. })
        ));
        assert!(matches!(
            ctc_loss(&logp, &[3], BLANK),
            Err(CtcError::InvalidLabel { token: 3, pos: 0, .. })
        ));
    }

    #[test]
    fn unreachable_label_in_oracle_is_infinite() {
        let logp = Array::zeros(vec![1, 3]);
        assert!(brute_force_ctc(&logp, &[1, 2], BLANK).is_infinite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn dp_loss_matches_enumeration(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = rng.random_range(1..=5usize);
            let vocab = rng.random_range(2..=4usize);
            let logp = random_logp(&mut rng, frames, vocab);
            let len = rng.random_range(0..=3usize.min(frames));
            let labels: Vec<usize> =
                (0..len).map(|_| rng.random_range(1..vocab)).collect();
            prop_assume!(min_frames(&labels) <= frames);

            let dp = ctc_loss(&logp, &labels, BLANK).unwrap();
            let bf = brute_force_ctc(&logp, &labels, BLANK);
            prop_assert!((dp - bf).abs() <= 1e-9 * (1.0 + dp.abs()),
                "dp {dp} vs brute force {bf}");
        }

        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = rng.random_range(2..=4usize);
            let vocab = rng.random_range(2..=4usize);
            let logp = random_logp(&mut rng, frames, vocab);
            let len = rng.random_range(1..=2usize);
            let labels: Vec<usize> =
                (0..len).map(|_| rng.random_range(1..vocab)).collect();
            prop_assume!(min_frames(&labels) <= frames);

            let (_, grad) = ctc_loss_with_grad(&logp, &labels, BLANK).unwrap();
            let h = 1e-5;
            for i in 0..frames * vocab {
                let mut plus = logp.clone();
                plus.data_mut()[i] += h;
                let mut minus = logp.clone();
                minus.data_mut()[i] -= h;
                let num = (ctc_loss(&plus, &labels, BLANK).unwrap()
                    - ctc_loss(&minus, &labels, BLANK).unwrap())
                    / (2.0 * h);
                let a = grad.data()[i];
                let tol = 1e-7 + 1e-4 * a.abs().max(num.abs());
                prop_assert!((a - num).abs() <= tol, "entry {i}: {a} vs {num}");
            }
        }

        #[test]
        fn gradient_rows_sum_to_minus_one(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = rng.random_range(2..=6usize);
            let vocab = rng.random_range(2..=5usize);
            let logp = random_logp(&mut rng, frames, vocab);
            let len = rng.random_range(0..=3usize);
            let labels: Vec<usize> =
                (0..len).map(|_| rng.random_range(1..vocab)).collect();
            prop_assume!(min_frames(&labels) <= frames);

            let (_, grad) = ctc_loss_with_grad(&logp, &labels, BLANK).unwrap();
            for t in 0..frames {
                let s: f64 = (0..vocab).map(|k| grad.at(t, k)).sum();
                prop_assert!((s + 1.0).abs() < 1e-9, "row {t} sums to {s}");
            }
        }

        #[test]
        fn label_distribution_is_normalized(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = rng.random_range(1..=4usize);
            let vocab = rng.random_range(2..=3usize);
            let logp = random_logp(&mut rng, frames, vocab);

            // sum P(l|x) over every admissible labeling = 1
            let mut total = 0.0;
            let mut stack = vec![Vec::<usize>::new()];
            while let Some(l) = stack.pop() {
                if min_frames(&l) > frames {
                    continue;
                }
                total += (-ctc_loss(&logp, &l, BLANK).unwrap()).exp();
                if l.len() < frames {
                    for c in 1..vocab {
                        let mut nl = l.clone();
                        nl.push(c);
                        stack.push(nl);
                    }
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-9, "total {total}");
        }
    }

    #[test]
    fn ctc_node_routes_gradient_through_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logp = random_logp(&mut rng, 4, 3);
        let labels = [1usize, 2];

        let mut tape = Tape::new();
        let x = tape.param(logp.clone());
        let loss = ctc_loss_node(&mut tape, x, &labels, BLANK).unwrap();
        tape.backward(loss).unwrap();

        let (direct_loss, direct_grad) = ctc_loss_with_grad(&logp, &labels, BLANK).unwrap();
        assert_eq!(tape.value(loss).item(), direct_loss);
        assert_eq!(tape.grad(x).unwrap().data(), direct_grad.data());
    }

    #[test]
    fn greedy_decode_collapses_argmax_path() {
        // frames argmax: blank, 1, 1, blank, 2
        let rows = [
            [0.0, -5.0, -5.0],
            [-5.0, 0.0, -4.0],
            [-5.0, 0.0, -4.0],
            [0.0, -5.0, -5.0],
            [-5.0, -4.0, 0.0],
        ];
        let data: Vec<f64> = rows.iter().flatten().cloned().collect();
        let logp = Array::new(vec![5, 3], data).unwrap();
        assert_eq!(greedy_ctc_decode(&logp, BLANK, &[0, 1, 2]), vec![1, 2]);
    }

    #[test]
    fn greedy_decode_tie_takes_first_candidate() {
        let logp = Array::new(vec![1, 3], vec![-3.0, -1.0, -1.0]).unwrap();
        assert_eq!(greedy_ctc_decode(&logp, BLANK, &[0, 1, 2]), vec![1]);
    }

    #[test]
    fn greedy_decode_skips_excluded_tokens() {
        // token 1 has the max but is not a candidate
        let logp = Array::new(vec![1, 3], vec![-3.0, 0.0, -1.0]).unwrap();
        assert_eq!(greedy_ctc_decode(&logp, BLANK, &[0, 2]), vec![2]);
    }

    /// Brute-force prefix probability: sum over all paths whose collapse
    /// starts with (or equals) `prefix`.
    fn brute_prefix_prob(logp: &Array, prefix: &[usize], exact: bool) -> f64 {
        let (frames, vocab) = (logp.shape()[0], logp.shape()[1]);
        let mut total = 0.0;
        let n_paths = vocab.pow(frames as u32);
        for code in 0..n_paths {
            let mut path = Vec::with_capacity(frames);
            let mut c = code;
            for _ in 0..frames {
                path.push(c % vocab);
                c /= vocab;
            }
            let out = collapse_path(&path, BLANK);
            let hit = if exact {
                out == prefix
            } else {
                out.len() >= prefix.len() && out[..prefix.len()] == *prefix
            };
            if hit {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| logp.at(t, k))
                    .sum::<f64>()
                    .exp();
            }
        }
        total
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]
        #[test]
        fn prefix_scorer_matches_enumeration(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = rng.random_range(1..=4usize);
            let vocab = rng.random_range(2..=4usize);
            let logp = random_logp(&mut rng, frames, vocab);
            let len = rng.random_range(1..=3usize);
            let prefix: Vec<usize> =
                (0..len).map(|_| rng.random_range(1..vocab)).collect();

            let scorer = CtcPrefixScorer::new(&logp, BLANK);
            let mut st = scorer.initial_state();
            for &c in &prefix {
                st = scorer.extend(&st, c);
            }

            let psi = st.log_psi.exp();
            let want_psi = brute_prefix_prob(&logp, &prefix, false);
            prop_assert!((psi - want_psi).abs() < 1e-9, "psi {psi} vs {want_psi}");

            let complete = scorer.complete_log_prob(&st).exp();
            let want_c = brute_prefix_prob(&logp, &prefix, true);
            prop_assert!((complete - want_c).abs() < 1e-9,
                "complete {complete} vs {want_c}");
        }

        #[test]
        fn prefix_probability_partitions(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = rng.random_range(1..=4usize);
            let vocab = rng.random_range(2..=4usize);
            let logp = random_logp(&mut rng, frames, vocab);

            // P(starts with g) = P(equals g) + sum_c P(starts with g.c)
            let scorer = CtcPrefixScorer::new(&logp, BLANK);
            let mut st = scorer.initial_state();
            if rng.random_bool(0.5) {
                st = scorer.extend(&st, rng.random_range(1..vocab));
            }
            let mut rhs = scorer.complete_log_prob(&st).exp();
            for c in 1..vocab {
                rhs += scorer.extend(&st, c).log_psi.exp();
            }
            let lhs = st.log_psi.exp();
            prop_assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn exhaustive_beam_finds_most_probable_labeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let frames = rng.random_range(2..=4usize);
            let logp = random_logp(&mut rng, frames, 4);
            let symbols = [1, 2, 3];

            // brute-force argmax over all labelings of length <= frames
            let mut best_l = Vec::new();
            let mut best_p = brute_prefix_prob(&logp, &[], true);
            let mut stack: Vec<Vec<usize>> = vec![vec![]];
            while let Some(l) = stack.pop() {
                if min_frames(&l) > frames {
                    continue;
                }
                if !l.is_empty() {
                    let p = brute_prefix_prob(&logp, &l, true);
                    if p > best_p {
                        best_p = p;
                        best_l = l.clone();
                    }
                }
                if l.len() < frames {
                    for &c in &symbols {
                        let mut nl = l.clone();
                        nl.push(c);
                        stack.push(nl);
                    }
                }
            }

            let cfg = DecodeConfig {
                beam: 200,
                ctc_weight: 1.0,
                aux_weight: 0.0,
                max_len: frames,
            };
            let res = joint_beam_decode(&logp, BLANK, &symbols, 0, &cfg, |_| vec![0.0; 4]);
            assert_eq!(res.tokens, best_l, "frames {frames}");
            assert!((res.score - best_p.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_decode_respects_aux_eos_preference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logp = random_logp(&mut rng, 6, 4);
        let eos = 0usize; // reuse blank slot in the aux row for this test
        let cfg = DecodeConfig {
            beam: 4,
            ctc_weight: 0.0,
            aux_weight: 1.0,
            max_len: 6,
        };
        // aux wants exactly [2, 3] then eos
        let res = joint_beam_decode(&logp, BLANK, &[1, 2, 3], eos, &cfg, |prefix| {
            let mut row = vec![-20.0; 4];
            match prefix {
                [] => row[2] = -0.1,
                [2] => row[3] = -0.1,
                [2, 3] => row[eos] = -0.1,
                _ => {}
            }
            row
        });
        assert_eq!(res.tokens, vec![2, 3]);
        assert!(!res.truncated);
    }

    #[test]
    fn beam_decode_flags_truncation() {
        // CTC strongly peaked on the path 1,_,1,_,1 (labeling [1,1,1]) but
        // the budget stops the search at two tokens.
        let mut data = vec![-6.0; 10];
        for (t, peak) in [1usize, 0, 1, 0, 1].iter().enumerate() {
            data[t * 2 + peak] = -0.01;
        }
        let logp = Array::new(vec![5, 2], data).unwrap();
        let cfg = DecodeConfig {
            beam: 4,
            ctc_weight: 1.0,
            aux_weight: 0.0,
            max_len: 2,
        };
        let res = joint_beam_decode(&logp, BLANK, &[1], 0, &cfg, |_| vec![0.0; 2]);
        assert_eq!(res.tokens, vec![1, 1]);
        assert!(res.truncated);

        // with an adequate budget the same input decodes fully
        let cfg = DecodeConfig { max_len: 5, ..cfg };
        let res = joint_beam_decode(&logp, BLANK, &[1], 0, &cfg, |_| vec![0.0; 2]);
        assert_eq!(res.tokens, vec![1, 1, 1]);
        assert!(!res.truncated);
    }

    #[test]
    fn alpha_beta_cross_sections_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let frames = rng.random_range(2..=6usize);
            let vocab = rng.random_range(2..=4usize);
            let logp = random_logp(&mut rng, frames, vocab);
            let labels: Vec<usize> = (0..rng.random_range(1..=2usize))
                .map(|_| rng.random_range(1..vocab))
                .collect();
            if min_frames(&labels) > frames {
                continue;
            }
            let ext = extend_labels(&labels, BLANK);
            let alpha = forward_alphas(&logp, &ext, frames, BLANK);
            let beta = backward_betas(&logp, &ext, frames, BLANK);
            let p = total_log_prob(&alpha, ext.len());
            for t in 0..frames {
                let mut cut = LOG_ZERO;
                for s in 0..ext.len() {
                    cut = log_add(cut, alpha[t][s] + beta[t][s]);
                }
                assert!((cut - p).abs() < 1e-9, "t={t}: {cut} vs {p}");
            }
        }
    }
}
