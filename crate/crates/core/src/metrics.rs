//! Evaluation: token error rates from edit alignments, per-task reports,
//! and paired Wilcoxon significance tests over seeds.

use crate::ctc::DecodeResult;
use crate::data::Dataset;
use crate::model::{hybrid_decode, Checkpoint, ModelConfig, ModelError};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("paired samples differ in length: {left} vs {right}")]
    Mismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub subs: usize,
    pub dels: usize,
    pub inss: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.subs + self.dels + self.inss
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.subs += other.subs;
        self.dels += other.dels;
        self.inss += other.inss;
    }
}

/// Minimum-cost alignment counts between a reference and a hypothesis.
/// At equal cost the backtrace prefers substitution, then deletion, then
/// insertion, so the split of errors is deterministic.
pub fn edit_counts(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, v) in cost[0].iter_mut().enumerate() {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[i - 1][j] + 1;
            let ins = cost[i][j - 1] + 1;
            cost[i][j] = sub.min(del).min(ins);
        }
    }

    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let hit = reference[i - 1] == hypothesis[j - 1];
            let sub = cost[i - 1][j - 1] + usize::from(!hit);
            if cost[i][j] == sub {
                if !hit {
                    counts.subs += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            counts.dels += 1;
            i -= 1;
            continue;
        }
        counts.inss += 1;
        j -= 1;
    }
    counts
}

/// Pooled token error rate in percent: all errors over all reference tokens.
pub fn pooled_error_rate(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let mut counts = EditCounts::default();
    let mut ref_tokens = 0usize;
    for (reference, hypothesis) in pairs {
        counts.add(&edit_counts(reference, hypothesis));
        ref_tokens += reference.len();
    }
    rate(counts.total(), ref_tokens)
}

fn rate(errors: usize, ref_tokens: usize) -> f64 {
    if ref_tokens == 0 {
        if errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        100.0 * errors as f64 / ref_tokens as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: String,
    pub utterances: usize,
    pub ref_tokens: usize,
    pub counts: EditCounts,
    pub wer: f64,
}

/// Per-task error rates plus their unweighted mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    pub avg_wer: f64,
}

impl EvalReport {
    pub fn from_tasks(tasks: Vec<TaskEval>) -> Self {
        let avg_wer = if tasks.is_empty() {
            0.0
        } else {
            tasks.iter().map(|t| t.wer).sum::<f64>() / tasks.len() as f64
        };
        EvalReport { tasks, avg_wer }
    }

    pub fn task_wer(&self, task: &str) -> Option<f64> {
        self.tasks.iter().find(|t| t.task == task).map(|t| t.wer)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,utterances,ref_tokens,subs,dels,inss,wer\n");
        for t in &self.tasks {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.4}\n",
                t.task, t.utterances, t.ref_tokens, t.counts.subs, t.counts.dels, t.counts.inss,
                t.wer
            ));
        }
        out.push_str(&format!("average,,,,,,{:.4}\n", self.avg_wer));
        out
    }
}

/// Decode every test set with the checkpoint and report per-task error
/// rates. Decoding runs with stochastic effects off.
pub fn evaluate_model(
    mcfg: &ModelConfig,
    ckpt: &Checkpoint,
    sets: &[(&str, &Dataset)],
    beam: usize,
    max_len: usize,
) -> Result<EvalReport, MetricsError> {
    let mut tasks = Vec::with_capacity(sets.len());
    for (name, dataset) in sets {
        let mut counts = EditCounts::default();
        let mut ref_tokens = 0usize;
        for utt in &dataset.utterances {
            let DecodeResult { tokens, .. } =
                hybrid_decode(mcfg, ckpt, &utt.features, beam, max_len)?;
            counts.add(&edit_counts(&utt.tokens, &tokens));
            ref_tokens += utt.tokens.len();
        }
        tasks.push(TaskEval {
            task: name.to_string(),
            utterances: dataset.utterances.len(),
            ref_tokens,
            counts,
            wer: rate(counts.total(), ref_tokens),
        });
    }
    Ok(EvalReport::from_tasks(tasks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PValueMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs remaining after zero differences are dropped.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub method: PValueMethod,
}

const EXACT_LIMIT: usize = 25;

/// Paired two-sided Wilcoxon signed-rank test. Zero differences are
/// dropped, tied magnitudes share their average rank. Up to 25 effective
/// pairs the p-value is exact (subset-sum distribution over the observed
/// ranks); beyond that a tie-corrected normal approximation with continuity
/// correction is used.
pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::Mismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let diffs: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            p: 1.0,
            method: PValueMethod::Exact,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut tie_groups: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        tie_groups.push(j - i + 1);
        i = j + 1;
    }

    let w_plus: f64 = (0..n).filter(|&k| diffs[k] > 0.0).map(|k| ranks[k]).sum();
    let w_minus: f64 = (0..n).filter(|&k| diffs[k] < 0.0).map(|k| ranks[k]).sum();
    let w_min = w_plus.min(w_minus);

    let (p, method) = if n <= EXACT_LIMIT {
        (exact_p(&ranks, w_min), PValueMethod::Exact)
    } else {
        (approx_p(n, &tie_groups, w_min), PValueMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        p: p.min(1.0),
        method,
    })
}

/// Exact two-sided p: the null assigns each rank an independent random
/// sign, so `2^n * P(W <= w)` is a subset-sum count over the rank multiset.
/// Ranks are doubled so average ranks stay integral.
fn exact_p(ranks: &[f64], w_min: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w_min).round() as usize;
    let below: u64 = counts[..=w2.min(total)].iter().sum();
    let all = 2f64.powi(ranks.len() as i32);
    2.0 * below as f64 / all
}

fn approx_p(n: usize, tie_groups: &[usize], w_min: f64) -> f64 {
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_groups
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_min - mu + 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    2.0 * normal.cdf(z)
}

/// Conventional significance marks for a two-sided p-value.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "ns"
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
