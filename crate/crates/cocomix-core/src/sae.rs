//! TopK sparse autoencoder over hidden states: encode to a C-dimensional
//! sparse concept space, decode back, train on activation dumps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamW, ParamDef};
use crate::persist::{content_hash, ActivationDump};
use crate::rng::{subseed, DetRng};
use crate::tensor::{topk_indices, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaeConfig {
    /// Concept dictionary size C.
    pub n_concepts: usize,
    /// Active concepts per position.
    pub k_sae: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 || self.k_sae == 0 {
            return Err(Error::InvalidConfig("n_concepts and k_sae must be positive".into()));
        }
        if self.k_sae > self.n_concepts {
            return Err(Error::InvalidConfig(format!(
                "k_sae {} exceeds n_concepts {}",
                self.k_sae, self.n_concepts
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive and finite".into()));
        }
        Ok(())
    }
}

/// One position's concept activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptActivation {
    pub c_pre: Vec<f64>,
    /// c_pre on active_indices, zero elsewhere.
    pub c: Vec<f64>,
    /// Sorted, exactly k_sae entries.
    pub active_indices: Vec<usize>,
}

pub struct SaeModel {
    pub d_con: usize,
    pub k_sae: usize,
    /// C x d_con.
    pub encoder: Tensor,
    /// C.
    pub enc_bias: Tensor,
    /// d_con x C, unit-norm columns after every training step.
    pub decoder: Tensor,
    /// d_con.
    pub dec_bias: Tensor,
    /// d_con centering statistic, fixed at init.
    pub input_mean: Tensor,
}

impl SaeModel {
    pub fn n_concepts(&self) -> usize {
        self.encoder.rows()
    }

    /// Fresh model: decoder columns random unit-norm, encoder the decoder
    /// transpose, biases zero.
    pub fn init(d_con: usize, input_mean: Vec<f64>, config: &SaeConfig) -> Result<SaeModel> {
        config.validate()?;
        if input_mean.len() != d_con {
            return Err(Error::ShapeMismatch {
                kernel: "sae_init",
                detail: format!("input_mean length {} vs d_con {}", input_mean.len(), d_con),
            });
        }
        let c = config.n_concepts;
        let mut rng = DetRng::seeded(subseed(config.seed, "sae-init"));
        let mut dec = vec![0.0; d_con * c];
        rng.fill_normal(&mut dec, 0.0, 1.0);
        for col in 0..c {
            let norm: f64 = (0..d_con).map(|r| dec[r * c + col].powi(2)).sum::<f64>().sqrt();
            for r in 0..d_con {
                dec[r * c + col] /= norm.max(1e-12);
            }
        }
        let mut enc = vec![0.0; c * d_con];
        for col in 0..c {
            for r in 0..d_con {
                enc[col * d_con + r] = dec[r * c + col];
            }
        }
        Ok(SaeModel {
            d_con,
            k_sae: config.k_sae,
            encoder: Tensor::leaf(&[c, d_con], enc, true)?,
            enc_bias: Tensor::leaf(&[c], vec![0.0; c], true)?,
            decoder: Tensor::leaf(&[d_con, c], dec, true)?,
            dec_bias: Tensor::leaf(&[d_con], vec![0.0; d_con], true)?,
            input_mean: Tensor::constant(&[d_con], input_mean)?,
        })
    }

    pub fn params(&self) -> Vec<ParamDef> {
        vec![
            ParamDef { name: "sae.encoder".into(), tensor: self.encoder.clone(), decay: false },
            ParamDef { name: "sae.enc_bias".into(), tensor: self.enc_bias.clone(), decay: false },
            ParamDef { name: "sae.decoder".into(), tensor: self.decoder.clone(), decay: false },
            ParamDef { name: "sae.dec_bias".into(), tensor: self.dec_bias.clone(), decay: false },
        ]
    }

    pub fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.tensor.set_requires_grad(on);
        }
    }

    /// Identity over architecture and exact parameter bits.
    pub fn content_hash(&self, config: &SaeConfig) -> [u8; 32] {
        let cfg = serde_json::to_string(config).expect("config serializes");
        let params: Vec<(String, Vec<f64>)> = self
            .params()
            .into_iter()
            .map(|p| (p.name, p.tensor.values()))
            .chain(std::iter::once(("sae.input_mean".into(), self.input_mean.values())))
            .collect();
        content_hash(&cfg, &params)
    }

    /// Graph-building encode over a batch of rows (B x d_con).
    /// Returns (c_pre, c), both B x C.
    pub fn encode_rows(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let centered = h.sub(&self.input_mean)?;
        let c_pre = centered.matmul_tb(&self.encoder)?.add(&self.enc_bias)?;
        let c = c_pre.topk_mask(self.k_sae)?;
        Ok((c_pre, c))
    }

    /// Graph-building decode over a batch of concept rows (B x C) -> B x d_con.
    /// Accepts dense c so gradients can flow through the full dictionary.
    pub fn decode_rows(&self, c: &Tensor) -> Result<Tensor> {
        c.matmul_tb(&self.decoder)?.add(&self.dec_bias)?.add(&self.input_mean)
    }

    pub fn encode(&self, h: &[f64]) -> Result<ConceptActivation> {
        let t = Tensor::constant(&[1, self.d_con], h.to_vec())?;
        let (c_pre_t, c_t) = self.encode_rows(&t)?;
        let c_pre = c_pre_t.values();
        let active_indices = topk_indices(&c_pre, self.k_sae);
        Ok(ConceptActivation { c_pre, c: c_t.values(), active_indices })
    }

    pub fn decode(&self, c: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::constant(&[1, self.n_concepts()], c.to_vec())?;
        Ok(self.decode_rows(&t)?.values())
    }

    /// Squared reconstruction error for a single vector.
    pub fn sae_loss(&self, h: &[f64]) -> Result<f64> {
        let rec = self.decode(&self.encode(h)?.c)?;
        Ok(h.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Per-element mean squared reconstruction error over a row batch.
    pub fn mse_on(&self, rows: &Tensor) -> Result<f64> {
        let (_, c) = self.encode_rows(rows)?;
        let rec = self.decode_rows(&c)?;
        let diff = rec.sub(rows)?;
        Ok(diff.mul(&diff)?.reduce_mean()?.item())
    }

    /// Rescales every decoder column to unit l2 norm in place.
    pub fn renormalize_decoder(&self) {
        let d_con = self.d_con;
        let c = self.n_concepts();
        self.decoder.apply(|d| {
            for col in 0..c {
                let norm: f64 = (0..d_con).map(|r| d[r * c + col].powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for r in 0..d_con {
                        d[r * c + col] /= norm;
                    }
                }
            }
        });
    }

    pub fn decoder_column_norms(&self) -> Vec<f64> {
        let d = self.decoder.values();
        let c = self.n_concepts();
        (0..c)
            .map(|col| (0..self.d_con).map(|r| d[r * c + col].powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

pub struct SaeTrainReport {
    /// (step, batch per-element MSE).
    pub log: Vec<(usize, f64)>,
    /// Concepts never selected during the final epoch-sized window.
    pub dead_concepts: Vec<usize>,
}

fn batch_tensor(dump: &ActivationDump, ids: &[usize]) -> Result<Tensor> {
    let mut v = Vec::with_capacity(ids.len() * dump.d_con);
    for &i in ids {
        v.extend_from_slice(dump.row(i));
    }
    Tensor::constant(&[ids.len(), dump.d_con], v)
}

pub fn column_means(dump: &ActivationDump) -> Vec<f64> {
    let rows = dump.rows();
    let mut mean = vec![0.0; dump.d_con];
    for i in 0..rows {
        for (m, &v) in mean.iter_mut().zip(dump.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.max(1) as f64;
    }
    mean
}

pub fn train_sae(dump: &ActivationDump, config: &SaeConfig) -> Result<(SaeModel, SaeTrainReport)> {
    config.validate()?;
    let rows = dump.rows();
    if rows == 0 {
        return Err(Error::InvalidConfig("empty activation dump".into()));
    }
    let model = SaeModel::init(dump.d_con, column_means(dump), config)?;
    let params = model.params();
    let mut opt = AdamW::new(&params, (0.9, 0.95), 0.0);
    let mut batch_rng = DetRng::seeded(subseed(config.seed, "sae-batches"));

    let epoch_steps = rows.div_ceil(config.batch).max(1);
    let mut log = Vec::with_capacity(config.steps);
    // step index -> concepts selected at that step, kept for one epoch window
    let mut recent_active: Vec<Vec<bool>> = Vec::new();

    for step in 0..config.steps {
        let ids: Vec<usize> = (0..config.batch).map(|_| batch_rng.below(rows)).collect();
        let h = batch_tensor(dump, &ids)?;
        let step_result = (|| -> Result<(f64, Vec<bool>)> {
            let (c_pre, c) = model.encode_rows(&h)?;
            let rec = model.decode_rows(&c)?;
            let diff = rec.sub(&h)?;
            let loss = diff.mul(&diff)?.reduce_mean()?;
            let mse = loss.item();
            let mut active = vec![false; config.n_concepts];
            let pre = c_pre.values();
            for r in 0..ids.len() {
                let row = &pre[r * config.n_concepts..(r + 1) * config.n_concepts];
                for k in topk_indices(row, config.k_sae) {
                    active[k] = true;
                }
            }
            crate::tensor::backward(&loss)?;
            Ok((mse, active))
        })();
        let (mse, active) = match step_result {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) | Err(Error::Numeric { .. }) => {
                return Err(Error::Divergence { step, loss: f64::NAN });
            }
            Err(e) => return Err(e),
        };
        if !mse.is_finite() {
            return Err(Error::Divergence { step, loss: mse });
        }
        match opt.step(&params, config.lr) {
            Ok(()) => {}
            Err(Error::Numeric { .. }) => return Err(Error::Divergence { step, loss: mse }),
            Err(e) => return Err(e),
        }
        model.renormalize_decoder();
        log.push((step, mse));
        recent_active.push(active);
        if recent_active.len() > epoch_steps {
            recent_active.remove(0);
        }
    }

    let mut dead = Vec::new();
    for concept in 0..config.n_concepts {
        if !recent_active.iter().any(|a| a[concept]) {
            dead.push(concept);
        }
    }
    Ok((model, SaeTrainReport { log, dead_concepts: dead }))
}
