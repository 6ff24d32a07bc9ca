//! Held-out evaluation: perplexity for plain and concept-augmented models,
//! sample-efficiency comparison between runs, per-topic concept association,
//! and the compression-weight norm analysis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{window_index, Corpus};
use crate::error::{Error, Result};
use crate::mixer::{cocomix_forward, ConceptMixer};
use crate::tensor::Tensor;
use crate::transformer::{nll_mean, TransformerModel};

/// What gets scored: a plain decoder, or a student whose next-token loss is
/// read at the inserted concept slots, matching how it was trained.
pub enum EvalModel<'a> {
    Plain(&'a TransformerModel),
    Mixed { student: &'a TransformerModel, mixer: &'a ConceptMixer },
}

impl<'a> EvalModel<'a> {
    fn context_len(&self) -> usize {
        match self {
            EvalModel::Plain(m) => m.config.context_len,
            EvalModel::Mixed { student, .. } => student.config.context_len,
        }
    }

    /// Summed next-token NLL over one window plus the number of scored
    /// positions.
    pub fn window_nll(&self, tokens: &[usize], targets: &[usize]) -> Result<(f64, usize)> {
        let t_len = tokens.len();
        let mean = match self {
            EvalModel::Plain(model) => {
                let logits = model.forward_full(tokens)?;
                let pairs: Vec<(usize, usize)> =
                    targets.iter().enumerate().map(|(t, &x)| (t, x)).collect();
                nll_mean(&logits, &pairs)?.item()
            }
            EvalModel::Mixed { student, mixer } => {
                let (_z, logits) = cocomix_forward(student, mixer, tokens)?;
                let pairs: Vec<(usize, usize)> =
                    targets.iter().enumerate().map(|(t, &x)| (2 * t + 1, x)).collect();
                nll_mean(&logits, &pairs)?.item()
            }
        };
        Ok((mean * t_len as f64, t_len))
    }
}

/// Rejects train/eval document splits that share a document.
pub fn check_disjoint_docs(
    train: std::ops::Range<usize>,
    eval: std::ops::Range<usize>,
) -> Result<()> {
    if train.start < eval.end && eval.start < train.end && !train.is_empty() && !eval.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "train docs {train:?} overlap eval docs {eval:?}"
        )));
    }
    Ok(())
}

/// exp(mean NLL per predicted token) over every canonical window of the
/// corpus. The token-level mean makes the value independent of how windows
/// are grouped into batches.
pub fn perplexity(model: &EvalModel, corpus: &Corpus) -> Result<f64> {
    let t = model.context_len();
    let windows = window_index(corpus, t);
    if windows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "eval corpus yields no windows of length {t}"
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for w in &windows {
        let doc = &corpus.docs[w.doc];
        let (nll, n) = model.window_nll(&doc[w.start..w.start + t], &doc[w.start + 1..w.start + t + 1])?;
        sum += nll;
        count += n;
    }
    let ppl = (sum / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numeric { kernel: "perplexity", detail: format!("ppl {ppl}") });
    }
    Ok(ppl)
}

/// Perplexity of one free-form token sequence, chunked into context-length
/// windows (trailing remainder shorter than 2 tokens is dropped).
pub fn sequence_perplexity(model: &EvalModel, tokens: &[usize]) -> Result<f64> {
    let t = model.context_len();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + t + 1).min(tokens.len());
        let (nll, n) = model.window_nll(&tokens[start..end - 1], &tokens[start + 1..end])?;
        sum += nll;
        count += n;
        start = end - 1;
    }
    if count == 0 {
        return Err(Error::InvalidConfig("sequence too short to score".into()));
    }
    Ok((sum / count as f64).exp())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub val_ppl: f64,
    pub tokens_scored: usize,
    /// Token frequency distribution per planted topic over the eval slice.
    pub per_topic_token_freq: Vec<Vec<f64>>,
    /// (target_ppl, tokens_seen) pairs filled in by run comparison; None
    /// when the run never reached the target.
    pub tokens_to_target: Vec<(f64, Option<f64>)>,
}

pub fn evaluate(model: &EvalModel, corpus: &Corpus) -> Result<EvalReport> {
    let val_ppl = perplexity(model, corpus)?;
    debug_assert!(val_ppl >= 1.0 - 1e-12);
    let t = model.context_len();
    let tokens_scored = window_index(corpus, t).len() * t;
    Ok(EvalReport {
        val_ppl,
        tokens_scored,
        per_topic_token_freq: topic_token_frequencies(corpus),
        tokens_to_target: Vec::new(),
    })
}

/// Empirical token distribution per topic. Rows sum to 1 for topics that
/// appear; absent topics stay all-zero.
pub fn topic_token_frequencies(corpus: &Corpus) -> Vec<Vec<f64>> {
    let v = corpus.spec.vocab_size;
    let k = corpus.spec.n_topics;
    let mut counts = vec![vec![0u64; v]; k];
    for (doc, &topic) in corpus.docs.iter().zip(&corpus.topics) {
        for &tok in doc {
            counts[topic][tok] += 1;
        }
    }
    counts
        .into_iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                vec![0.0; v]
            } else {
                row.into_iter().map(|c| c as f64 / total as f64).collect()
            }
        })
        .collect()
}

/// Measured (tokens_seen, val_ppl) points from a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct PplTrace {
    pub points: Vec<(f64, f64)>,
}

impl PplTrace {
    /// Reads the fixed-schema metrics CSV, keeping rows where val_ppl was
    /// measured.
    pub fn from_metrics_csv(path: &Path) -> Result<PplTrace> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingPrerequisite(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "step,tokens_seen,lr,ntp_loss,concept_loss,total_loss,val_ppl" {
            return Err(Error::BadFormat {
                path: path.to_path_buf(),
                detail: format!("unexpected metrics header {header:?}"),
            });
        }
        let mut points = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(Error::BadFormat {
                    path: path.to_path_buf(),
                    detail: format!("row {} has {} columns", lineno + 2, cols.len()),
                });
            }
            if cols[6].is_empty() {
                continue;
            }
            let tokens: f64 = cols[1].parse().map_err(|_| Error::BadFormat {
                path: path.to_path_buf(),
                detail: format!("bad tokens_seen at row {}", lineno + 2),
            })?;
            let ppl: f64 = cols[6].parse().map_err(|_| Error::BadFormat {
                path: path.to_path_buf(),
                detail: format!("bad val_ppl at row {}", lineno + 2),
            })?;
            points.push((tokens, ppl));
        }
        Ok(PplTrace { points })
    }
}

/// Tokens needed to first reach `target` perplexity, linearly interpolating
/// between measured points. None when the run never gets there.
pub fn tokens_to_target(trace: &PplTrace, target: f64) -> Option<f64> {
    let pts = &trace.points;
    let hit = pts.iter().position(|&(_, p)| p <= target)?;
    if hit == 0 {
        return Some(pts[0].0);
    }
    let (t0, p0) = pts[hit - 1];
    let (t1, p1) = pts[hit];
    // p0 > target >= p1, so the denominator is positive
    Some(t0 + (p0 - target) / (p0 - p1) * (t1 - t0))
}

/// Token counts for both runs plus the a/b ratio when both reach the target.
pub fn compare_tokens_to_target(
    a: &PplTrace,
    b: &PplTrace,
    target: f64,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let ta = tokens_to_target(a, target);
    let tb = tokens_to_target(b, target);
    let ratio = match (ta, tb) {
        (Some(x), Some(y)) if y > 0.0 => Some(x / y),
        _ => None,
    };
    (ta, tb, ratio)
}

/// Strongest concept per planted topic: mean score per topic minus the
/// global mean, ranked; margin is the gap to the runner-up.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicConcept {
    pub topic: usize,
    pub concept: usize,
    /// Topic mean minus global mean at the winning concept.
    pub delta: f64,
    /// Winning delta minus the second-best delta.
    pub margin: f64,
}

/// `scores_for` maps a window of tokens to a T x C score matrix (concept
/// logits z or SAE codes c). Scores are averaged per planted topic of the
/// window's document.
pub fn concept_topic_association<F>(
    corpus: &Corpus,
    context_len: usize,
    n_concepts: usize,
    mut scores_for: F,
) -> Result<Vec<TopicConcept>>
where
    F: FnMut(&[usize]) -> Result<Tensor>,
{
    let k = corpus.spec.n_topics;
    let mut topic_sum = vec![vec![0.0f64; n_concepts]; k];
    let mut topic_rows = vec![0usize; k];
    let mut global_sum = vec![0.0f64; n_concepts];
    let mut global_rows = 0usize;
    for w in window_index(corpus, context_len) {
        let doc = &corpus.docs[w.doc];
        let topic = corpus.topics[w.doc];
        let scores = scores_for(&doc[w.start..w.start + context_len])?;
        if scores.cols() != n_concepts {
            return Err(Error::ShapeMismatch {
                kernel: "concept_topic_association",
                detail: format!("{} score columns, expected {n_concepts}", scores.cols()),
            });
        }
        let vals = scores.values();
        for row in vals.chunks(n_concepts) {
            for (c, &s) in row.iter().enumerate() {
                topic_sum[topic][c] += s;
                global_sum[c] += s;
            }
            topic_rows[topic] += 1;
            global_rows += 1;
        }
    }
    if global_rows == 0 {
        return Err(Error::InvalidConfig("no windows to associate".into()));
    }
    let global_mean: Vec<f64> = global_sum.iter().map(|s| s / global_rows as f64).collect();
    let mut out = Vec::with_capacity(k);
    for topic in 0..k {
        if topic_rows[topic] == 0 {
            continue;
        }
        let mut deltas: Vec<(usize, f64)> = (0..n_concepts)
            .map(|c| (c, topic_sum[topic][c] / topic_rows[topic] as f64 - global_mean[c]))
            .collect();
        deltas.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let (concept, delta) = deltas[0];
        let margin = if deltas.len() > 1 { delta - deltas[1].1 } else { delta };
        out.push(TopicConcept { topic, concept, delta, margin });
    }
    Ok(out)
}

/// Association from the student's concept head (scores = z).
pub fn association_from_student(
    student: &TransformerModel,
    mixer: &ConceptMixer,
    corpus: &Corpus,
) -> Result<Vec<TopicConcept>> {
    concept_topic_association(corpus, student.config.context_len, mixer.n_concepts(), |tokens| {
        let h = student.forward_prefix(tokens)?;
        mixer.predict_concepts(&h)
    })
}

/// Association from the teacher's SAE codes (scores = c after TopK).
pub fn association_from_sae(
    teacher: &TransformerModel,
    sae: &crate::sae::SaeModel,
    corpus: &Corpus,
) -> Result<Vec<TopicConcept>> {
    let c = sae.encoder.rows();
    concept_topic_association(corpus, teacher.config.context_len, c, |tokens| {
        let h = teacher.forward_prefix(tokens)?;
        let (_pre, codes) = sae.encode_rows(&h)?;
        Ok(codes)
    })
}

/// Per-column l2 norms of the compression matrix W (d x C; one column per
/// concept). frobenius_sq is the ordered sum of the per-column squared
/// norms, so the Frobenius identity holds exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompressionNorms {
    pub norm_sq: Vec<f64>,
    pub norms: Vec<f64>,
    pub frobenius_sq: f64,
    pub tau: f64,
    pub fraction_below: f64,
}

pub fn compression_column_norms(mixer: &ConceptMixer, tau: f64) -> CompressionNorms {
    let w = mixer.comp_w.values();
    let d = mixer.comp_w.rows();
    let c = mixer.comp_w.cols();
    let mut norm_sq = vec![0.0f64; c];
    for col in 0..c {
        let mut s = 0.0;
        for row in 0..d {
            let x = w[row * c + col];
            s += x * x;
        }
        norm_sq[col] = s;
    }
    let frobenius_sq: f64 = norm_sq.iter().sum();
    let norms: Vec<f64> = norm_sq.iter().map(|s| s.sqrt()).collect();
    let below = norms.iter().filter(|&&n| n < tau).count();
    CompressionNorms {
        norm_sq,
        norms,
        frobenius_sq,
        tau,
        fraction_below: below as f64 / c as f64,
    }
}
