//! Concept prediction head and the compression/insertion mixer: predict the
//! teacher's concept labels from a hidden state, compress the predicted
//! logits into one continuous vector per position, and interleave those
//! vectors into the hidden sequence.

use crate::attribution::ConceptSelection;
use crate::error::{Error, Result};
use crate::optim::ParamDef;
use crate::rng::{subseed, DetRng};
use crate::tensor::{concat_rows, Tensor};
use crate::transformer::nll_mean;

const INIT_STD: f64 = 0.02;

pub struct ConceptMixer {
    /// Prediction head M: C x d.
    pub head_w: Tensor,
    /// C.
    pub head_b: Tensor,
    /// Compression W: d x C.
    pub comp_w: Tensor,
    /// d.
    pub comp_b: Tensor,
    /// TopK applied to z before compression.
    pub k_mix: usize,
}

impl ConceptMixer {
    pub fn init(d_model: usize, n_concepts: usize, k_mix: usize, seed: u64) -> Result<ConceptMixer> {
        if k_mix == 0 || k_mix > n_concepts {
            return Err(Error::InvalidConfig(format!(
                "k_mix {k_mix} out of range 1..={n_concepts}"
            )));
        }
        let mut rng = DetRng::seeded(subseed(seed, "mixer"));
        let mut head = vec![0.0; n_concepts * d_model];
        rng.fill_normal(&mut head, 0.0, INIT_STD);
        let mut comp = vec![0.0; d_model * n_concepts];
        rng.fill_normal(&mut comp, 0.0, INIT_STD);
        Ok(ConceptMixer {
            head_w: Tensor::leaf(&[n_concepts, d_model], head, true)?,
            head_b: Tensor::leaf(&[n_concepts], vec![0.0; n_concepts], true)?,
            comp_w: Tensor::leaf(&[d_model, n_concepts], comp, true)?,
            comp_b: Tensor::leaf(&[d_model], vec![0.0; d_model], true)?,
            k_mix,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.head_w.rows()
    }

    pub fn d_model(&self) -> usize {
        self.head_w.cols()
    }

    pub fn named_params(&self) -> Vec<ParamDef> {
        vec![
            ParamDef { name: "mixer.head_w".into(), tensor: self.head_w.clone(), decay: true },
            ParamDef { name: "mixer.head_b".into(), tensor: self.head_b.clone(), decay: false },
            ParamDef { name: "mixer.comp_w".into(), tensor: self.comp_w.clone(), decay: true },
            ParamDef { name: "mixer.comp_b".into(), tensor: self.comp_b.clone(), decay: false },
        ]
    }

    pub fn set_trainable(&self, on: bool) {
        for p in self.named_params() {
            p.tensor.set_requires_grad(on);
        }
    }

    /// z = M h + bias for every row of h_seq (T x d) -> T x C.
    pub fn predict_concepts(&self, h_seq: &Tensor) -> Result<Tensor> {
        h_seq.matmul_tb(&self.head_w)?.add(&self.head_b)
    }

    /// c_hat = W TopK(z) + b for every row (T x C) -> T x d. Gradient flows
    /// through kept coordinates only.
    pub fn compress(&self, z_seq: &Tensor) -> Result<Tensor> {
        z_seq.topk_mask(self.k_mix)?.matmul_tb(&self.comp_w)?.add(&self.comp_b)
    }
}

/// The full concept-augmented forward pass for one window: predict concept
/// logits from the first-stage hidden states, compress, interleave, and run
/// the remaining blocks. Returns (z: T x C, logits: 2T x V); the next-token
/// loss reads rows 2t + 1.
pub fn cocomix_forward(
    student: &crate::transformer::TransformerModel,
    mixer: &ConceptMixer,
    tokens: &[usize],
) -> Result<(Tensor, Tensor)> {
    let h = student.forward_prefix(tokens)?;
    let z = mixer.predict_concepts(&h)?;
    let c_hat = mixer.compress(&z)?;
    let (mixed, pos) = interleave(&h, &c_hat)?;
    let logits = student.forward_suffix(&mixed, &pos)?;
    Ok((z, logits))
}

/// Rows alternating h_t then c_hat_t, with sequential position ids 0..2T.
pub fn interleave(h_seq: &Tensor, c_seq: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let t = h_seq.rows();
    if c_seq.rows() != t || c_seq.cols() != h_seq.cols() {
        return Err(Error::ShapeMismatch {
            kernel: "interleave",
            detail: format!(
                "{}x{} hidden vs {}x{} concepts",
                t,
                h_seq.cols(),
                c_seq.rows(),
                c_seq.cols()
            ),
        });
    }
    let mut rows: Vec<Tensor> = Vec::with_capacity(2 * t);
    for i in 0..t {
        rows.push(h_seq.slice_rows(i, i + 1)?);
        rows.push(c_seq.slice_rows(i, i + 1)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok((concat_rows(&refs)?, (0..2 * t).collect()))
}

/// Mean cross entropy of z rows against each position's selected labels:
/// (1 / (T * K_attr)) sum over positions and labels of CE(z_t, i).
pub fn concept_loss(z_seq: &Tensor, labels: &[ConceptSelection]) -> Result<Tensor> {
    if labels.len() != z_seq.rows() {
        return Err(Error::ShapeMismatch {
            kernel: "concept_loss",
            detail: format!("{} label sets for {} rows", labels.len(), z_seq.rows()),
        });
    }
    let mut pairs = Vec::new();
    for (t, sel) in labels.iter().enumerate() {
        for &i in &sel.indices {
            pairs.push((t, i));
        }
    }
    nll_mean(z_seq, &pairs)
}

/// Single-position form: (1/K_attr) sum CE(z_t, i).
pub fn concept_loss_single(z_t: &Tensor, sel: &ConceptSelection) -> Result<Tensor> {
    let pairs: Vec<(usize, usize)> = sel.indices.iter().map(|&i| (0, i)).collect();
    nll_mean(z_t, &pairs)
}
