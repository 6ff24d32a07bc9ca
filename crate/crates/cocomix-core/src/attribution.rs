//! Attribution scores over a frozen teacher's concept space and selection of
//! per-position concept labels.
//!
//! For each position t the teacher's hidden state h_t is replaced by the
//! reconstruction decode(c_t), the NLL of the true next token is read at t,
//! and the gradient g of that NLL is taken with respect to the full C-dim
//! decoder input. The score is a_t = c_pre ⊙ g, so concepts the TopK mask
//! zeroed out still receive credit through the decoder's linear pathway.

use crate::error::{Error, Result};
use crate::persist::{LabelCache, LabelMode, LabelSource, SignRule};
use crate::sae::SaeModel;
use crate::tensor::{backward, concat_rows, cross_entropy, topk_indices, Tensor};
use crate::transformer::TransformerModel;

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionScores {
    /// a = c_pre ⊙ g, length C.
    pub a: Vec<f64>,
    /// Gradient of the substituted NLL w.r.t. the decoder input.
    pub g: Vec<f64>,
    /// Pre-TopK concept activations at this position.
    pub c_pre: Vec<f64>,
    /// Ground-truth x_{t+1} whose NLL was differentiated.
    pub next_token: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSelection {
    /// Sorted ascending, exactly k_attr distinct entries.
    pub indices: Vec<usize>,
    /// Score of each selected index, aligned with `indices`.
    pub scores: Vec<f64>,
}

/// Indices of the k largest entries by signed value, ties to lowest index.
pub fn topk_signed(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| {
        values[j].partial_cmp(&values[i]).expect("finite values").then(i.cmp(&j))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Top-k selection over an arbitrary score vector under the given rule.
pub fn select_topk(values: &[f64], k_attr: usize, rule: SignRule) -> Result<ConceptSelection> {
    if k_attr == 0 || k_attr > values.len() {
        return Err(Error::InvalidConfig(format!(
            "k_attr {k_attr} out of range 1..={}",
            values.len()
        )));
    }
    let indices = match rule {
        SignRule::Signed => topk_signed(values, k_attr),
        SignRule::Absolute => topk_indices(values, k_attr),
    };
    let scores = indices.iter().map(|&i| values[i]).collect();
    Ok(ConceptSelection { indices, scores })
}

/// Labels from attribution scores; signed ranking is the default.
pub fn select_topk_concepts(a: &AttributionScores, k_attr: usize) -> Result<ConceptSelection> {
    select_topk(&a.a, k_attr, SignRule::Signed)
}

/// Ablation arm: labels from the SAE activation c_t instead of a_t.
/// Warns when k_attr exceeds the SAE sparsity, since the extra slots can
/// only be filled from zero coordinates by the tie rule.
pub fn activation_select(
    c: &crate::sae::ConceptActivation,
    k_attr: usize,
) -> Result<ConceptSelection> {
    if k_attr > c.active_indices.len() {
        log::warn!(
            "k_attr {} exceeds SAE sparsity {}; extra labels are zero-activation ties",
            k_attr,
            c.active_indices.len()
        );
    }
    select_topk(&c.c, k_attr, SignRule::Signed)
}

/// Attribution scores for every position t in 0..len-1.
///
/// Freezes the teacher and SAE so gradients flow only into the substituted
/// concept leaf; both stay frozen afterwards.
pub fn attribution(
    teacher: &TransformerModel,
    sae: &SaeModel,
    tokens: &[usize],
) -> Result<Vec<AttributionScores>> {
    if tokens.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "attribution needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    if sae.d_con != teacher.config.d_model {
        return Err(Error::ShapeMismatch {
            kernel: "attribution",
            detail: format!("sae d_con {} vs teacher d_model {}", sae.d_con, teacher.config.d_model),
        });
    }
    teacher.set_trainable(false);
    sae.set_trainable(false);
    // The last token is only ever a prediction target; causality makes its
    // hidden row irrelevant, and dropping it lets a full training window
    // (context_len inputs plus one target) fit the forward pass.
    let hidden = teacher.forward_prefix(&tokens[..tokens.len() - 1])?;
    let hvals = hidden.values();
    let d = teacher.config.d_model;
    let mut out = Vec::with_capacity(tokens.len() - 1);
    for t in 0..tokens.len() - 1 {
        let act = sae.encode(&hvals[t * d..(t + 1) * d])?;
        let c_leaf = Tensor::leaf(&[1, sae.n_concepts()], act.c.clone(), true)?;
        let hhat = sae.decode_rows(&c_leaf)?;
        let h_sub = if t == 0 {
            hhat
        } else {
            let before = Tensor::constant(&[t, d], hvals[..t * d].to_vec())?;
            concat_rows(&[&before, &hhat])?
        };
        // causality makes rows past t irrelevant to the loss at t
        let pos: Vec<usize> = (0..=t).collect();
        let logits = teacher.forward_suffix(&h_sub, &pos)?;
        let nll = cross_entropy(&logits.slice_rows(t, t + 1)?, tokens[t + 1])?;
        backward(&nll)?;
        let g = c_leaf.take_grad().expect("concept leaf requires grad");
        let a: Vec<f64> = act.c_pre.iter().zip(&g).map(|(p, gi)| p * gi).collect();
        out.push(AttributionScores { a, g, c_pre: act.c_pre, next_token: tokens[t + 1] });
    }
    Ok(out)
}

/// Per-position labels for a batch of token sequences. Sequences shorter
/// than two tokens produce an empty label list.
pub fn label_batch(
    teacher: &TransformerModel,
    sae: &SaeModel,
    sequences: &[Vec<usize>],
    k_attr: usize,
    mode: LabelMode,
) -> Result<Vec<Vec<ConceptSelection>>> {
    if sequences.is_empty() {
        return Err(Error::InvalidConfig("label_batch given an empty batch".into()));
    }
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.len() < 2 {
            out.push(Vec::new());
            continue;
        }
        let labels = match mode.source {
            LabelSource::Attribution => attribution(teacher, sae, seq)?
                .iter()
                .map(|scores| select_topk(&scores.a, k_attr, mode.rule))
                .collect::<Result<Vec<_>>>()?,
            LabelSource::Activation => {
                teacher.set_trainable(false);
                sae.set_trainable(false);
                let hidden = teacher.forward_prefix(&seq[..seq.len() - 1])?;
                let hvals = hidden.values();
                let d = teacher.config.d_model;
                (0..seq.len() - 1)
                    .map(|t| {
                        let act = sae.encode(&hvals[t * d..(t + 1) * d])?;
                        select_topk(&act.c, k_attr, mode.rule)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        out.push(labels);
    }
    Ok(out)
}

/// Flattens batch labels (sequence-major) into the on-disk cache layout.
pub fn to_label_cache(
    labels: &[Vec<ConceptSelection>],
    n_concepts: usize,
    k_attr: usize,
    mode: LabelMode,
    teacher_hash: [u8; 32],
    sae_hash: [u8; 32],
) -> LabelCache {
    let mut indices = Vec::new();
    let mut scores = Vec::new();
    for seq in labels {
        for sel in seq {
            indices.extend(sel.indices.iter().map(|&i| i as u32));
            scores.extend_from_slice(&sel.scores);
        }
    }
    LabelCache { n_concepts, k_attr, mode, teacher_hash, sae_hash, indices, scores }
}

/// Per-position selections back out of a cache.
pub fn from_label_cache(cache: &LabelCache) -> Vec<ConceptSelection> {
    (0..cache.positions())
        .map(|p| ConceptSelection {
            indices: cache.labels_at(p).iter().map(|&i| i as usize).collect(),
            scores: cache.scores_at(p).to_vec(),
        })
        .collect()
}
