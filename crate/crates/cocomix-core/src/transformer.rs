//! Decoder-only transformer with split execution: a prefix stack that stops
//! at a designated layer and a suffix stack that accepts an arbitrary-length
//! hidden sequence. The split is what lets a concept vector be interleaved
//! between token positions before the remaining blocks run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamDef;
use crate::rng::DetRng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Additive mask for future positions; large enough that softmax underflows
/// the masked weights to exactly zero.
const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Prefix ends after this many blocks (1-based boundary); the teacher
    /// reads hidden states here, the student inserts concept vectors here.
    pub split_layer: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size must be positive".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig("d_model and n_heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.split_layer < 1 || self.split_layer >= self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "split_layer {} must satisfy 1 <= split < n_layers {}",
                self.split_layer, self.n_layers
            )));
        }
        if self.context_len < 2 {
            return Err(Error::InvalidConfig("context_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

pub struct LnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct HeadParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    /// Per-head output projection back to d_model; head outputs sum.
    pub w_o: Tensor,
}

pub struct Block {
    pub ln1: LnParams,
    pub heads: Vec<HeadParams>,
    pub b_o: Tensor,
    pub ln2: LnParams,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

pub struct TransformerModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    /// Length 2*context_len so interleaved sequences have valid positions.
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LnParams,
    pub unembed: Tensor,
}

fn normal_leaf(rng: &mut DetRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v, 0.0, std);
    Tensor::leaf(shape, v, true).expect("shape/len consistent")
}

fn zeros_leaf(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape, true).expect("shape/len consistent")
}

fn ones_leaf(n: usize) -> Tensor {
    Tensor::leaf(&[n], vec![1.0; n], true).expect("shape/len consistent")
}

fn ln_params(c: usize) -> LnParams {
    LnParams { gamma: ones_leaf(c), beta: zeros_leaf(&[c]) }
}

/// Seeded normal init (std 0.02), zero biases, unit norm gains.
pub fn init_params(config: &ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = DetRng::seeded(config.seed);
    let d = config.d_model;
    let dh = config.head_dim();
    let v = config.vocab_size;

    let tok_emb = normal_leaf(&mut rng, &[v, d], INIT_STD);
    let pos_emb = normal_leaf(&mut rng, &[2 * config.context_len, d], INIT_STD);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let heads = (0..config.n_heads)
            .map(|_| HeadParams {
                w_q: normal_leaf(&mut rng, &[d, dh], INIT_STD),
                b_q: zeros_leaf(&[dh]),
                w_k: normal_leaf(&mut rng, &[d, dh], INIT_STD),
                b_k: zeros_leaf(&[dh]),
                w_v: normal_leaf(&mut rng, &[d, dh], INIT_STD),
                b_v: zeros_leaf(&[dh]),
                w_o: normal_leaf(&mut rng, &[dh, d], INIT_STD),
            })
            .collect();
        blocks.push(Block {
            ln1: ln_params(d),
            heads,
            b_o: zeros_leaf(&[d]),
            ln2: ln_params(d),
            w_up: normal_leaf(&mut rng, &[d, 4 * d], INIT_STD),
            b_up: zeros_leaf(&[4 * d]),
            w_down: normal_leaf(&mut rng, &[4 * d, d], INIT_STD),
            b_down: zeros_leaf(&[d]),
        });
    }
    Ok(TransformerModel {
        config: config.clone(),
        tok_emb,
        pos_emb,
        blocks,
        ln_f: ln_params(d),
        unembed: normal_leaf(&mut rng, &[d, v], INIT_STD),
    })
}

impl TransformerModel {
    pub fn named_params(&self) -> Vec<ParamDef> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor: &Tensor, decay: bool| {
            out.push(ParamDef { name, tensor: tensor.clone(), decay });
        };
        push("tok_emb".into(), &self.tok_emb, true);
        push("pos_emb".into(), &self.pos_emb, true);
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("block{i}.ln1.g"), &b.ln1.gamma, false);
            push(format!("block{i}.ln1.b"), &b.ln1.beta, false);
            for (h, hp) in b.heads.iter().enumerate() {
                push(format!("block{i}.h{h}.wq"), &hp.w_q, true);
                push(format!("block{i}.h{h}.bq"), &hp.b_q, false);
                push(format!("block{i}.h{h}.wk"), &hp.w_k, true);
                push(format!("block{i}.h{h}.bk"), &hp.b_k, false);
                push(format!("block{i}.h{h}.wv"), &hp.w_v, true);
                push(format!("block{i}.h{h}.bv"), &hp.b_v, false);
                push(format!("block{i}.h{h}.wo"), &hp.w_o, true);
            }
            push(format!("block{i}.bo"), &b.b_o, false);
            push(format!("block{i}.ln2.g"), &b.ln2.gamma, false);
            push(format!("block{i}.ln2.b"), &b.ln2.beta, false);
            push(format!("block{i}.up.w"), &b.w_up, true);
            push(format!("block{i}.up.b"), &b.b_up, false);
            push(format!("block{i}.down.w"), &b.w_down, true);
            push(format!("block{i}.down.b"), &b.b_down, false);
        }
        push("ln_f.g".into(), &self.ln_f.gamma, false);
        push("ln_f.b".into(), &self.ln_f.beta, false);
        push("unembed".into(), &self.unembed, true);
        out
    }

    /// Freeze or unfreeze all parameters (teacher models are frozen while
    /// the student trains, so backward skips their branches).
    pub fn set_trainable(&self, trainable: bool) {
        for p in self.named_params() {
            p.tensor.set_requires_grad(trainable);
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::InvalidConfig(format!(
                "sequence length {} exceeds context_len {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(Error::IndexOutOfRange {
                    context: "token id",
                    index: t,
                    bound: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn block_forward(&self, block: &Block, x: &Tensor) -> Result<Tensor> {
        let s = x.rows();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = causal_mask(s);

        let xn = x.layer_norm(&block.ln1.gamma, &block.ln1.beta, LN_EPS)?;
        let mut attn_out: Option<Tensor> = None;
        for head in &block.heads {
            let q = xn.matmul(&head.w_q)?.add(&head.b_q)?;
            let k = xn.matmul(&head.w_k)?.add(&head.b_k)?;
            let v = xn.matmul(&head.w_v)?.add(&head.b_v)?;
            let scores = q.matmul_tb(&k)?.scale(scale)?.add(&mask)?;
            let probs = scores.softmax()?;
            let ctx = probs.matmul(&v)?;
            let proj = ctx.matmul(&head.w_o)?;
            attn_out = Some(match attn_out {
                Some(acc) => acc.add(&proj)?,
                None => proj,
            });
        }
        let attn = attn_out.expect("n_heads >= 1").add(&block.b_o)?;
        let x = x.add(&attn)?;

        let xn2 = x.layer_norm(&block.ln2.gamma, &block.ln2.beta, LN_EPS)?;
        let up = xn2.matmul(&block.w_up)?.add(&block.b_up)?.gelu()?;
        let down = up.matmul(&block.w_down)?.add(&block.b_down)?;
        x.add(&down)
    }

    /// Residual stream after the first `split_layer` blocks, one row per
    /// token, causal.
    pub fn forward_prefix(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let mut x = self.tok_emb.gather(tokens)?.add(&self.pos_emb.gather(&pos)?)?;
        for block in &self.blocks[..self.config.split_layer] {
            x = self.block_forward(block, &x)?;
        }
        Ok(x)
    }

    /// Remaining blocks, final norm and unembedding over an arbitrary hidden
    /// sequence. Positional embeddings for `position_ids` are injected here,
    /// which is what gives interleaved rows (h_t at 2t, concept at 2t+1)
    /// their positions.
    pub fn forward_suffix(&self, hidden: &Tensor, position_ids: &[usize]) -> Result<Tensor> {
        let s = hidden.rows();
        if hidden.cols() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                kernel: "forward_suffix",
                detail: format!("hidden width {} != d_model {}", hidden.cols(), self.config.d_model),
            });
        }
        if s == 0 || s > 2 * self.config.context_len {
            return Err(Error::InvalidConfig(format!(
                "suffix length {s} out of range 1..={}",
                2 * self.config.context_len
            )));
        }
        if position_ids.len() != s {
            return Err(Error::ShapeMismatch {
                kernel: "forward_suffix",
                detail: format!("{} position ids for {s} rows", position_ids.len()),
            });
        }
        if position_ids.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig("position_ids must be nondecreasing".into()));
        }
        for &p in position_ids {
            if p >= 2 * self.config.context_len {
                return Err(Error::IndexOutOfRange {
                    context: "position id",
                    index: p,
                    bound: 2 * self.config.context_len,
                });
            }
        }
        let mut x = hidden.add(&self.pos_emb.gather(position_ids)?)?;
        for block in &self.blocks[self.config.split_layer..] {
            x = self.block_forward(block, &x)?;
        }
        let xn = x.layer_norm(&self.ln_f.gamma, &self.ln_f.beta, LN_EPS)?;
        xn.matmul(&self.unembed)
    }

    /// Logits for every position; exactly prefix followed by suffix so the
    /// split is consistent by construction.
    pub fn forward_full(&self, tokens: &[usize]) -> Result<Tensor> {
        let hidden = self.forward_prefix(tokens)?;
        let pos: Vec<usize> = (0..tokens.len()).collect();
        self.forward_suffix(&hidden, &pos)
    }
}

/// [s, s] additive causal mask: 0 on and below the diagonal, a large
/// negative constant above it.
pub fn causal_mask(s: usize) -> Tensor {
    let mut m = vec![0.0; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            m[i * s + j] = MASK_NEG;
        }
    }
    Tensor::constant(&[s, s], m).expect("mask shape")
}

/// Mean NLL over (row, target) pairs of a logits matrix, as a graph node.
/// Built from softmax + floored log + a constant picking mask so the graph
/// stays small regardless of how many pairs there are.
pub fn nll_mean(logits: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let (r, c) = (logits.rows(), logits.cols());
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("nll_mean needs at least one target".into()));
    }
    let mut mask = vec![0.0; r * c];
    for &(row, tok) in pairs {
        if row >= r {
            return Err(Error::IndexOutOfRange { context: "nll row", index: row, bound: r });
        }
        if tok >= c {
            return Err(Error::IndexOutOfRange { context: "nll target", index: tok, bound: c });
        }
        mask[row * c + tok] += 1.0;
    }
    let mask = Tensor::constant(&[r, c], mask)?;
    let logp = logits.softmax()?.log_floored(1e-300)?;
    // mean over all r*c cells, rescaled to -sum/|pairs|
    logp.mul(&mask)?
        .reduce_mean()?
        .scale(-((r * c) as f64) / pairs.len() as f64)
}
