//! Classification and text-generation metrics, bootstrap intervals and
//! paired significance tests.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Thresholded classification metrics. A zero denominator yields 0 and
/// sets the matching flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn check_scored(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "scored_set",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("scored set".into()));
    }
    Ok(())
}

/// Predictions with `score >= threshold` count as positive.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_scored(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fne += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { (0.0, true) } else { (a as f64 / b as f64, false) };
    let (precision, pu) = ratio(tp, tp + fp);
    let (recall, ru) = ratio(tp, tp + fne);
    Ok(Confusion {
        precision,
        recall,
        f1: f1_score(precision, recall),
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        precision_undefined: pu,
        recall_undefined: ru,
    })
}

/// Cumulative (tp, fp) after each group of tied scores, highest first.
fn threshold_steps(scores: &[f64], labels: &[u8]) -> Result<(Vec<(usize, usize)>, usize, usize)> {
    check_scored(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ranking metric needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp, fp));
    }
    Ok((steps, pos, neg))
}

/// Trapezoid area under the ROC curve, tied scores forming one step.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (steps, pos, neg) = threshold_steps(scores, labels)?;
    let (mut area, mut px, mut py) = (0.0, 0.0, 0.0);
    for (tp, fp) in steps {
        let x = fp as f64 / neg as f64;
        let y = tp as f64 / pos as f64;
        area += (x - px) * (y + py) / 2.0;
        px = x;
        py = y;
    }
    Ok(area)
}

/// Trapezoid area under the precision-recall curve over recall, starting
/// from (recall 0, precision 1).
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (steps, pos, _) = threshold_steps(scores, labels)?;
    let (mut area, mut pr, mut pp) = (0.0, 0.0, 1.0);
    for (tp, fp) in steps {
        let r = tp as f64 / pos as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - pr) * (p + pp) / 2.0;
        pr = r;
        pp = p;
    }
    Ok(area)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples discarded for containing a single class.
    pub redrawn: usize,
    /// False when more than half of all draws were discarded.
    pub reliable: bool,
}

/// 95% percentile interval of `metric` over `n` resamples. Single-class
/// resamples are redrawn and counted.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: impl Fn(&[f64], &[u8]) -> Result<f64>,
    n: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    check_scored(scores, labels)?;
    if n == 0 {
        return Err(Error::config("eval.bootstrap", "needs at least one resample"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::UndefinedMetric("bootstrap over a single-class set".into()));
    }
    let mut rng = Rng::new(seed);
    let len = scores.len();
    let mut values = Vec::with_capacity(n);
    let mut redrawn = 0;
    let (mut s, mut y) = (vec![0.0; len], vec![0u8; len]);
    while values.len() < n {
        for i in 0..len {
            let j = rng.below(len);
            s[i] = scores[j];
            y[i] = labels[j];
        }
        let p = y.iter().filter(|&&v| v == 1).count();
        if p == 0 || p == len {
            redrawn += 1;
            continue;
        }
        values.push(metric(&s, &y)?);
    }
    values.sort_by(f64::total_cmp);
    let reliable = redrawn * 2 <= n + redrawn;
    if !reliable {
        log::warn!("bootstrap: {redrawn} of {} resamples were single-class", n + redrawn);
    }
    Ok(BootstrapCi {
        lo: percentile(&values, 0.025),
        hi: percentile(&values, 0.975),
        redrawn,
        reliable,
    })
}

/// One-sided paired bootstrap: share of resamples where
/// `mean(a) - mean(b) <= 0`, an exact zero counting one half.
pub fn paired_bootstrap_test(a: &[f64], b: &[f64], n: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "paired_bootstrap",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.is_empty() || n == 0 {
        return Err(Error::EmptyInput("paired bootstrap".into()));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut rng = Rng::new(seed);
    let mut count = 0.0;
    for _ in 0..n {
        let m: f64 = (0..diff.len()).map(|_| diff[rng.below(diff.len())]).sum::<f64>() / diff.len() as f64;
        if m < 0.0 {
            count += 1.0;
        } else if m == 0.0 {
            count += 0.5;
        }
    }
    Ok(count / n as f64)
}

// ---- text ----------------------------------------------------------------

/// Lowercased whitespace tokens with punctuation characters deleted.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c)).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && !c.is_ascii()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn clipped_overlap(gen: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    gen.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

fn require_reference(reference: &[String]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("text metric with an empty reference".into()));
    }
    Ok(())
}

/// ROUGE-N on metric tokens with clipped n-gram counts.
pub fn rouge_n(gen: &str, reference: &str, n: usize) -> Result<Prf> {
    rouge_n_tokens(&metric_tokens(gen), &metric_tokens(reference), n)
}

pub fn rouge_n_tokens(gen: &[String], reference: &[String], n: usize) -> Result<Prf> {
    require_reference(reference)?;
    let (g, r) = (ngram_counts(gen, n), ngram_counts(reference, n));
    let overlap = clipped_overlap(&g, &r) as f64;
    let gt: usize = g.values().sum();
    let rt: usize = r.values().sum();
    let p = if gt == 0 { 0.0 } else { overlap / gt as f64 };
    let rc = if rt == 0 { 0.0 } else { overlap / rt as f64 };
    Ok(Prf::new(p, rc))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the longest common subsequence of metric tokens.
pub fn rouge_l(gen: &str, reference: &str) -> Result<Prf> {
    rouge_l_tokens(&metric_tokens(gen), &metric_tokens(reference))
}

pub fn rouge_l_tokens(gen: &[String], reference: &[String]) -> Result<Prf> {
    require_reference(reference)?;
    if gen.is_empty() {
        return Ok(Prf::default());
    }
    let l = lcs_len(gen, reference) as f64;
    Ok(Prf::new(l / gen.len() as f64, l / reference.len() as f64))
}

/// Zero n-gram precisions are replaced by this before the log.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Cumulative BLEU-4 against one reference with brevity penalty.
pub fn bleu4(gen: &str, reference: &str) -> Result<f64> {
    bleu4_tokens(&metric_tokens(gen), &metric_tokens(reference))
}

pub fn bleu4_tokens(gen: &[String], reference: &[String]) -> Result<f64> {
    require_reference(reference)?;
    if gen.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (g, r) = (ngram_counts(gen, n), ngram_counts(reference, n));
        let total: usize = g.values().sum();
        let p = if total == 0 { 0.0 } else { clipped_overlap(&g, &r) as f64 / total as f64 };
        log_sum += 0.25 * if p == 0.0 { BLEU_EPSILON } else { p }.ln();
    }
    let (c, r) = (gen.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * log_sum.exp())
}

/// Maps metric tokens to vectors for [`embed_match_score`].
pub trait TokenVectors {
    fn vector(&self, token: &str) -> Vec<f32>;
}

/// Fixed table with an explicit vector for unknown tokens.
pub struct VectorTable {
    pub vectors: HashMap<String, Vec<f32>>,
    pub unknown: Vec<f32>,
}

impl TokenVectors for VectorTable {
    fn vector(&self, token: &str) -> Vec<f32> {
        self.vectors.get(token).cloned().unwrap_or_else(|| self.unknown.clone())
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy max-cosine matching: precision averages over generated tokens,
/// recall over reference tokens.
pub fn embed_match_score(gen: &str, reference: &str, provider: &dyn TokenVectors) -> Result<Prf> {
    let (g, r) = (metric_tokens(gen), metric_tokens(reference));
    require_reference(&r)?;
    if g.is_empty() {
        return Ok(Prf::default());
    }
    let gv: Vec<Vec<f32>> = g.iter().map(|t| provider.vector(t)).collect();
    let rv: Vec<Vec<f32>> = r.iter().map(|t| provider.vector(t)).collect();
    let sim: Vec<Vec<f64>> = gv.iter().map(|a| rv.iter().map(|b| cosine(a, b)).collect()).collect();
    let p = sim.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / g.len() as f64;
    let rc = (0..r.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / r.len() as f64;
    Ok(Prf::new(p, rc))
}

// ---- reports -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub positives: usize,
    pub auroc: f64,
    pub auprc: f64,
    /// Bootstrap interval of AUROC.
    pub ci95: [f64; 2],
    pub auprc_ci95: [f64; 2],
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl TaskMetrics {
    pub fn compute(scores: &[f64], labels: &[u8], n_boot: usize, seed: u64) -> Result<Self> {
        let c = confusion_metrics(scores, labels, 0.5)?;
        let roc = bootstrap_ci(scores, labels, auroc, n_boot, seed)?;
        let pr = bootstrap_ci(scores, labels, auprc, n_boot, seed ^ 0x9e37_79b9)?;
        Ok(Self {
            n: scores.len(),
            positives: labels.iter().filter(|&&y| y == 1).count(),
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            ci95: [roc.lo, roc.hi],
            auprc_ci95: [pr.lo, pr.hi],
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            accuracy: c.accuracy,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlgMetrics {
    pub n: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu4: f64,
    pub embed_match: f64,
}

/// Per-admission text scores (F1 for the ROUGE and embedding scores).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlgSample {
    pub admission_id: String,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu4: f64,
    pub embed_match: f64,
}

impl NlgSample {
    pub fn score(admission_id: &str, gen: &str, reference: &str, provider: &dyn TokenVectors) -> Result<Self> {
        let (g, r) = (metric_tokens(gen), metric_tokens(reference));
        Ok(Self {
            admission_id: admission_id.to_string(),
            rouge1: rouge_n_tokens(&g, &r, 1)?.f1,
            rouge2: rouge_n_tokens(&g, &r, 2)?.f1,
            rouge_l: rouge_l_tokens(&g, &r)?.f1,
            bleu4: bleu4_tokens(&g, &r)?,
            embed_match: embed_match_score(gen, reference, provider)?.f1,
        })
    }
}

impl NlgMetrics {
    pub fn mean_of(samples: &[NlgSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("no scored generations".into()));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&NlgSample) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            n: samples.len(),
            rouge1: mean(|s| s.rouge1),
            rouge2: mean(|s| s.rouge2),
            rouge_l: mean(|s| s.rouge_l),
            bleu4: mean(|s| s.bleu4),
            embed_match: mean(|s| s.embed_match),
        })
    }
}

/// Evaluation output: classification metrics per task and an optional
/// text-generation block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub tasks: BTreeMap<String, TaskMetrics>,
    pub nlg: Option<NlgMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Writes per-sample text scores as CSV.
pub fn write_nlg_csv(path: &Path, samples: &[NlgSample]) -> Result<()> {
    let mut s = String::from("admission_id,rouge1,rouge2,rougeL,bleu4,embed_match\n");
    for x in samples {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            x.admission_id, x.rouge1, x.rouge2, x.rouge_l, x.bleu4, x.embed_match
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
