//! Training arms: plain next-token prediction, the concept-augmented
//! objective with interleaved continuous concept vectors, and every baseline
//! and ablation arm it is compared against.
//!
//! Logged losses satisfy total = ntp + coeff * aux exactly, where the
//! auxiliary term is the arm's extra loss (concept cross entropy, KL to the
//! teacher, or hidden-state regression) and coeff is lambda or lambda_kd.
//! The metrics CSV reports the auxiliary term in the concept_loss column.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::ConceptSelection;
use crate::corpus::StreamState;
use crate::error::{Error, Result};
use crate::mixer::{cocomix_forward, concept_loss, interleave, ConceptMixer};
use crate::optim::{AdamW, LrSchedule, ParamDef};
use crate::persist::{CheckpointData, LabelCache, NamedTensor};
use crate::rng::{subseed, DetRng};
use crate::tensor::{backward, concat_rows, Tensor};
use crate::transformer::{nll_mean, TransformerModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ntp,
    Cocomix,
    Kd,
    Pause,
    DirectL1,
    DirectL2,
    DirectCos,
    CocomixIntervene,
    CocomixActivationSelect,
    CocomixPredOnly,
    CocomixInsertOnly,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Ntp,
        Method::Cocomix,
        Method::Kd,
        Method::Pause,
        Method::DirectL1,
        Method::DirectL2,
        Method::DirectCos,
        Method::CocomixIntervene,
        Method::CocomixActivationSelect,
        Method::CocomixPredOnly,
        Method::CocomixInsertOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ntp => "ntp",
            Method::Cocomix => "cocomix",
            Method::Kd => "kd",
            Method::Pause => "pause",
            Method::DirectL1 => "direct_l1",
            Method::DirectL2 => "direct_l2",
            Method::DirectCos => "direct_cos",
            Method::CocomixIntervene => "cocomix_intervene",
            Method::CocomixActivationSelect => "cocomix_activation_select",
            Method::CocomixPredOnly => "cocomix_pred_only",
            Method::CocomixInsertOnly => "cocomix_insert_only",
        }
    }

    pub fn needs_mixer(self) -> bool {
        matches!(
            self,
            Method::Cocomix
                | Method::CocomixIntervene
                | Method::CocomixActivationSelect
                | Method::CocomixPredOnly
                | Method::CocomixInsertOnly
        )
    }

    pub fn needs_labels(self) -> bool {
        matches!(
            self,
            Method::Cocomix
                | Method::CocomixIntervene
                | Method::CocomixActivationSelect
                | Method::CocomixPredOnly
        )
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::Kd | Method::DirectL1 | Method::DirectL2 | Method::DirectCos)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown training method {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Weight on the concept / auxiliary loss.
    pub lambda: f64,
    /// Weight on the KL term in the kd and pause arms.
    pub lambda_kd: f64,
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub steps: usize,
    /// Tokens per optimizer step; must be a multiple of the window length.
    pub batch_tokens: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn defaults(method: Method, lr_max: f64, steps: usize, batch_tokens: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            lambda: 0.1,
            lambda_kd: 0.1,
            lr_max,
            warmup_frac: 1.0 / 300.0,
            final_lr_frac: 0.1,
            weight_decay: 0.1,
            betas: (0.9, 0.95),
            steps,
            batch_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if self.lambda_kd < 0.0 || !self.lambda_kd.is_finite() {
            return Err(Error::InvalidConfig("lambda_kd must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidConfig("warmup_frac must be in [0, 1)".into()));
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return Err(Error::InvalidConfig("final_lr_frac must be in (0, 1]".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::InvalidConfig("lr_max must be positive".into()));
        }
        if self.steps == 0 || self.batch_tokens == 0 {
            return Err(Error::InvalidConfig("steps and batch_tokens must be positive".into()));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig("betas must be in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_max: self.lr_max,
            warmup_frac: self.warmup_frac,
            final_lr_frac: self.final_lr_frac,
            total_steps: self.steps,
        }
    }
}

/// Two-layer GELU MLP predicting the teacher's hidden state, plus the linear
/// map that carries the prediction into the student's width for insertion.
pub struct DirectPredictor {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// d x d_con insertion map.
    pub comp: Tensor,
}

impl DirectPredictor {
    pub fn init(d_model: usize, d_con: usize, seed: u64) -> Result<DirectPredictor> {
        let mut rng = DetRng::seeded(subseed(seed, "direct-predictor"));
        let mut w1 = vec![0.0; d_model * d_model];
        rng.fill_normal(&mut w1, 0.0, INIT_STD);
        let mut w2 = vec![0.0; d_model * d_con];
        rng.fill_normal(&mut w2, 0.0, INIT_STD);
        let mut comp = vec![0.0; d_model * d_con];
        rng.fill_normal(&mut comp, 0.0, INIT_STD);
        Ok(DirectPredictor {
            w1: Tensor::leaf(&[d_model, d_model], w1, true)?,
            b1: Tensor::leaf(&[d_model], vec![0.0; d_model], true)?,
            w2: Tensor::leaf(&[d_model, d_con], w2, true)?,
            b2: Tensor::leaf(&[d_con], vec![0.0; d_con], true)?,
            comp: Tensor::leaf(&[d_model, d_con], comp, true)?,
        })
    }

    pub fn named_params(&self) -> Vec<ParamDef> {
        vec![
            ParamDef { name: "direct.w1".into(), tensor: self.w1.clone(), decay: true },
            ParamDef { name: "direct.b1".into(), tensor: self.b1.clone(), decay: false },
            ParamDef { name: "direct.w2".into(), tensor: self.w2.clone(), decay: true },
            ParamDef { name: "direct.b2".into(), tensor: self.b2.clone(), decay: false },
            ParamDef { name: "direct.comp".into(), tensor: self.comp.clone(), decay: true },
        ]
    }

    /// g(h): T x d -> T x d_con.
    pub fn predict(&self, h_seq: &Tensor) -> Result<Tensor> {
        h_seq.matmul(&self.w1)?.add(&self.b1)?.gelu()?.matmul(&self.w2)?.add(&self.b2)
    }

    /// Insertion rows from a prediction: T x d_con -> T x d.
    pub fn to_insertion(&self, pred: &Tensor) -> Result<Tensor> {
        pred.matmul_tb(&self.comp)
    }
}

const INIT_STD: f64 = 0.02;

/// Per-window concept labels, indexed by canonical window id.
pub struct LabelStore {
    pub per_window: Vec<Vec<ConceptSelection>>,
    pub k_attr: usize,
    pub n_concepts: usize,
}

impl LabelStore {
    /// Splits a flat cache into fixed-length windows of `window_len` labeled
    /// positions each.
    pub fn from_cache(cache: &LabelCache, window_len: usize) -> Result<LabelStore> {
        let positions = cache.positions();
        if window_len == 0 || positions % window_len != 0 {
            return Err(Error::InvalidConfig(format!(
                "label cache holds {positions} positions, not divisible into windows of {window_len}"
            )));
        }
        let flat = crate::attribution::from_label_cache(cache);
        let per_window = flat.chunks(window_len).map(|c| c.to_vec()).collect();
        Ok(LabelStore { per_window, k_attr: cache.k_attr, n_concepts: cache.n_concepts })
    }

    pub fn window(&self, id: usize) -> Result<&[ConceptSelection]> {
        self.per_window.get(id).map(|v| v.as_slice()).ok_or(Error::IndexOutOfRange {
            context: "label window",
            index: id,
            bound: self.per_window.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based count of completed optimizer steps.
    pub step: usize,
    pub tokens_seen: u64,
    pub lr: f64,
    pub ntp_loss: f64,
    /// The arm's auxiliary loss term; zero when the arm has none.
    pub concept_loss: f64,
    pub total_loss: f64,
}

/// Loss graph for one batch before the optimizer runs.
pub struct BatchLoss {
    pub total: Tensor,
    pub ntp: f64,
    pub aux: f64,
}

/// One window's forward pass under a training method.
pub struct WindowForward {
    pub logits: Tensor,
    /// Whether the next-token loss reads rows 2t + 1 (inserted slots).
    pub at_slots: bool,
    /// Concept logits (concept-prediction arms).
    pub z: Option<Tensor>,
    /// Predicted teacher hidden states (direct regression arms).
    pub pred: Option<Tensor>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub student: TransformerModel,
    pub mixer: Option<ConceptMixer>,
    /// 1 x d learnable row inserted at every slot in the pause arm.
    pub pause_vec: Option<Tensor>,
    pub direct: Option<DirectPredictor>,
    pub teacher: Option<TransformerModel>,
    pub labels: Option<LabelStore>,
    schedule: LrSchedule,
    params: Vec<ParamDef>,
    opt: AdamW,
    steps_done: usize,
}

impl Trainer {
    pub fn new(
        student: TransformerModel,
        config: TrainConfig,
        mixer: Option<ConceptMixer>,
        teacher: Option<TransformerModel>,
        labels: Option<LabelStore>,
    ) -> Result<Trainer> {
        config.validate()?;
        let method = config.method;
        if config.batch_tokens % student.config.context_len != 0 {
            return Err(Error::InvalidConfig(format!(
                "batch_tokens {} not a multiple of window length {}",
                config.batch_tokens, student.config.context_len
            )));
        }
        if method.needs_mixer() && mixer.is_none() {
            return Err(Error::InvalidConfig(format!("{method} needs a concept mixer")));
        }
        if method.needs_labels() && labels.is_none() {
            return Err(Error::InvalidConfig(format!("{method} needs precomputed concept labels")));
        }
        if method.needs_teacher() && teacher.is_none() {
            return Err(Error::InvalidConfig(format!("{method} needs a frozen teacher")));
        }
        if let Some(t) = &teacher {
            t.set_trainable(false);
            if method == Method::Kd && t.config.vocab_size != student.config.vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "teacher vocab {} != student vocab {}",
                    t.config.vocab_size, student.config.vocab_size
                )));
            }
        }
        if let (Some(m), Some(l)) = (&mixer, &labels) {
            if method.needs_labels() && m.n_concepts() != l.n_concepts {
                return Err(Error::InvalidConfig(format!(
                    "mixer predicts {} concepts but labels cover {}",
                    m.n_concepts(),
                    l.n_concepts
                )));
            }
        }
        let d = student.config.d_model;
        let pause_vec = if method == Method::Pause {
            let mut rng = DetRng::seeded(subseed(config.seed, "pause-vector"));
            let mut v = vec![0.0; d];
            rng.fill_normal(&mut v, 0.0, INIT_STD);
            Some(Tensor::leaf(&[1, d], v, true)?)
        } else {
            None
        };
        let direct = if matches!(method, Method::DirectL1 | Method::DirectL2 | Method::DirectCos) {
            let d_con = teacher.as_ref().expect("checked above").config.d_model;
            Some(DirectPredictor::init(d, d_con, config.seed)?)
        } else {
            None
        };

        let mut params = student.named_params();
        if let Some(m) = &mixer {
            if method.needs_mixer() {
                params.extend(m.named_params());
            }
        }
        if let Some(p) = &pause_vec {
            params.push(ParamDef { name: "pause.vector".into(), tensor: p.clone(), decay: false });
        }
        if let Some(dp) = &direct {
            params.extend(dp.named_params());
        }

        let schedule = config.schedule();
        schedule.validate()?;
        let opt = AdamW::new(&params, config.betas, config.weight_decay);
        Ok(Trainer {
            config,
            student,
            mixer,
            pause_vec,
            direct,
            teacher,
            labels,
            schedule,
            params,
            opt,
            steps_done: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn params(&self) -> &[ParamDef] {
        &self.params
    }

    pub fn windows_per_batch(&self) -> usize {
        self.config.batch_tokens / self.student.config.context_len
    }

    fn mixer_ref(&self) -> &ConceptMixer {
        self.mixer.as_ref().expect("validated at construction")
    }

    fn teacher_ref(&self) -> &TransformerModel {
        self.teacher.as_ref().expect("validated at construction")
    }

    fn window_labels(&self, window_id: usize) -> Result<&[ConceptSelection]> {
        self.labels.as_ref().expect("validated at construction").window(window_id)
    }

    /// Mean KL(teacher row || student row) over aligned logit rows.
    fn kl_to_teacher(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<Tensor> {
        let v = teacher_logits.cols();
        let p = teacher_logits.softmax()?;
        let log_p = p.log_floored(1e-300)?;
        let log_q = student_logits.softmax()?.log_floored(1e-300)?;
        p.mul(&log_p.sub(&log_q)?)?.reduce_mean()?.scale(v as f64)
    }

    /// Every odd row (the inserted slots) of a 2T-row matrix.
    fn odd_rows(m: &Tensor) -> Result<Tensor> {
        let t = m.rows() / 2;
        let rows: Vec<Tensor> =
            (0..t).map(|i| m.slice_rows(2 * i + 1, 2 * i + 2)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        concat_rows(&refs)
    }

    /// The method's forward pass for one window: next-token logits, whether
    /// the loss reads them at the inserted slots 2t + 1, and any
    /// intermediate the auxiliary loss needs (concept logits z or the direct
    /// hidden-state prediction).
    pub fn window_forward(&self, tokens: &[usize]) -> Result<WindowForward> {
        let t_len = tokens.len();
        let plain_pos: Vec<usize> = (0..t_len).collect();
        match self.config.method {
            Method::Ntp | Method::Kd => Ok(WindowForward {
                logits: self.student.forward_full(tokens)?,
                at_slots: false,
                z: None,
                pred: None,
            }),
            Method::Cocomix | Method::CocomixActivationSelect | Method::CocomixInsertOnly => {
                let (z, logits) = cocomix_forward(&self.student, self.mixer_ref(), tokens)?;
                Ok(WindowForward { logits, at_slots: true, z: Some(z), pred: None })
            }
            Method::CocomixPredOnly => {
                let mixer = self.mixer_ref();
                let h = self.student.forward_prefix(tokens)?;
                let z = mixer.predict_concepts(&h)?;
                let logits = self.student.forward_suffix(&h, &plain_pos)?;
                Ok(WindowForward { logits, at_slots: false, z: Some(z), pred: None })
            }
            Method::CocomixIntervene => {
                let mixer = self.mixer_ref();
                let h = self.student.forward_prefix(tokens)?;
                let z = mixer.predict_concepts(&h)?;
                let c_hat = mixer.compress(&z)?;
                let conditioned = h.add(&c_hat)?;
                let logits = self.student.forward_suffix(&conditioned, &plain_pos)?;
                Ok(WindowForward { logits, at_slots: false, z: Some(z), pred: None })
            }
            Method::Pause => {
                let h = self.student.forward_prefix(tokens)?;
                let pause = self.pause_vec.as_ref().expect("pause arm");
                let ones = Tensor::constant(&[t_len, 1], vec![1.0; t_len])?;
                let tiled = ones.matmul(pause)?;
                let (mixed, pos) = interleave(&h, &tiled)?;
                let logits = self.student.forward_suffix(&mixed, &pos)?;
                Ok(WindowForward { logits, at_slots: true, z: None, pred: None })
            }
            Method::DirectL1 | Method::DirectL2 | Method::DirectCos => {
                let dp = self.direct.as_ref().expect("direct arm");
                let h = self.student.forward_prefix(tokens)?;
                let pred = dp.predict(&h)?;
                let insert = dp.to_insertion(&pred)?;
                let (mixed, pos) = interleave(&h, &insert)?;
                let logits = self.student.forward_suffix(&mixed, &pos)?;
                Ok(WindowForward { logits, at_slots: true, z: None, pred: Some(pred) })
            }
        }
    }

    /// NTP and auxiliary loss graphs for one window.
    fn window_losses(
        &self,
        tokens: &[usize],
        targets: &[usize],
        window_id: usize,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let fwd = self.window_forward(tokens)?;
        let pairs: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .map(|(t, &x)| (if fwd.at_slots { 2 * t + 1 } else { t }, x))
            .collect();
        let ntp = nll_mean(&fwd.logits, &pairs)?;
        let aux = match self.config.method {
            Method::Ntp | Method::CocomixInsertOnly => None,
            Method::Cocomix
            | Method::CocomixActivationSelect
            | Method::CocomixPredOnly
            | Method::CocomixIntervene => {
                let z = fwd.z.as_ref().expect("concept arm");
                Some(concept_loss(z, self.window_labels(window_id)?)?)
            }
            Method::Kd => {
                let teacher_logits = self.teacher_ref().forward_full(tokens)?;
                Some(Self::kl_to_teacher(&teacher_logits, &fwd.logits)?)
            }
            Method::Pause => match &self.teacher {
                Some(teacher) if self.config.lambda_kd > 0.0 => {
                    let teacher_logits = teacher.forward_full(tokens)?;
                    let at_slots = Self::odd_rows(&fwd.logits)?;
                    Some(Self::kl_to_teacher(&teacher_logits, &at_slots)?)
                }
                _ => None,
            },
            Method::DirectL1 | Method::DirectL2 | Method::DirectCos => {
                let teacher = self.teacher_ref();
                let h_con = teacher.forward_prefix(tokens)?;
                let pred = fwd.pred.as_ref().expect("direct arm");
                let d_con = h_con.cols();
                let t_len = tokens.len();
                let aux = match self.config.method {
                    Method::DirectL2 => {
                        let diff = pred.sub(&h_con)?;
                        // mean over positions of the squared l2 norm
                        diff.mul(&diff)?.reduce_mean()?.scale(d_con as f64)?
                    }
                    Method::DirectL1 => {
                        let diff = pred.sub(&h_con)?;
                        // |x| = x * sign(x); the sign mask is constant, so the
                        // gradient is the exact subgradient sign(x)
                        let signs: Vec<f64> =
                            diff.values().iter().map(|v| if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 }).collect();
                        let sign_mask = Tensor::constant(&[diff.rows(), d_con], signs)?;
                        diff.mul(&sign_mask)?.reduce_mean()?.scale(d_con as f64)?
                    }
                    Method::DirectCos => {
                        // mean over positions of 1 - cos(pred_t, h_con_t)
                        let ones_col = Tensor::constant(&[d_con, 1], vec![1.0; d_con])?;
                        let dot = pred.mul(&h_con)?.matmul(&ones_col)?;
                        let np = pred.mul(pred)?.matmul(&ones_col)?.rsqrt(1e-12)?;
                        let nh = h_con.mul(&h_con)?.matmul(&ones_col)?.rsqrt(1e-12)?;
                        let cos = dot.mul(&np)?.mul(&nh)?;
                        let ones_t = Tensor::constant(&[t_len, 1], vec![1.0; t_len])?;
                        ones_t.sub(&cos)?.reduce_mean()?
                    }
                    _ => unreachable!(),
                };
                Some(aux)
            }
        };
        Ok((ntp, aux))
    }

    /// Held-out perplexity under this arm's own loss structure: exp of the
    /// mean NLL per predicted token over every canonical window.
    pub fn val_perplexity(&self, corpus: &crate::corpus::Corpus) -> Result<f64> {
        let t = self.student.config.context_len;
        let windows = crate::corpus::window_index(corpus, t);
        if windows.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "eval corpus yields no windows of length {t}"
            )));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for w in &windows {
            let doc = &corpus.docs[w.doc];
            let tokens = &doc[w.start..w.start + t];
            let targets = &doc[w.start + 1..w.start + t + 1];
            let fwd = self.window_forward(tokens)?;
            let pairs: Vec<(usize, usize)> = targets
                .iter()
                .enumerate()
                .map(|(i, &x)| (if fwd.at_slots { 2 * i + 1 } else { i }, x))
                .collect();
            sum += nll_mean(&fwd.logits, &pairs)?.item() * t as f64;
            count += t;
        }
        Ok((sum / count as f64).exp())
    }

    /// Weight applied to the auxiliary loss for this arm.
    pub fn aux_coefficient(&self) -> f64 {
        match self.config.method {
            Method::Kd | Method::Pause => self.config.lambda_kd,
            Method::CocomixInsertOnly | Method::Ntp => 0.0,
            _ => self.config.lambda,
        }
    }

    /// Builds the full batch loss graph: total = ntp + coeff * aux, each term
    /// a mean over the batch windows.
    pub fn batch_loss(&self, batch: &crate::corpus::Batch) -> Result<BatchLoss> {
        let b = batch.inputs.len();
        if b == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let mut ntp_terms = Vec::with_capacity(b);
        let mut aux_terms = Vec::with_capacity(b);
        for i in 0..b {
            let (ntp, aux) = self.window_losses(&batch.inputs[i], &batch.targets[i], batch.window_ids[i])?;
            ntp_terms.push(ntp);
            if let Some(a) = aux {
                aux_terms.push(a);
            }
        }
        let ntp_mean = mean_of(&ntp_terms)?;
        let ntp_val = ntp_mean.item();
        let (total, aux_val) = if aux_terms.is_empty() {
            (ntp_mean, 0.0)
        } else {
            let aux_mean = mean_of(&aux_terms)?;
            let aux_val = aux_mean.item();
            let total = ntp_mean.add(&aux_mean.scale(self.aux_coefficient())?)?;
            (total, aux_val)
        };
        Ok(BatchLoss { total, ntp: ntp_val, aux: aux_val })
    }

    /// One optimizer step on a batch. Returns the logged metrics.
    pub fn step(&mut self, batch: &crate::corpus::Batch) -> Result<StepMetrics> {
        let step_now = self.steps_done;
        let loss = match self.batch_loss(batch) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) | Err(Error::Numeric { .. }) => {
                return Err(Error::Divergence { step: step_now, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        let total_val = loss.total.item();
        if !total_val.is_finite() {
            return Err(Error::Divergence { step: step_now, loss: total_val });
        }
        backward(&loss.total)?;
        let lr = self.schedule.lr_at(step_now);
        match self.opt.step(&self.params, lr) {
            Ok(()) => {}
            Err(Error::Numeric { .. }) => {
                return Err(Error::Divergence { step: step_now, loss: total_val })
            }
            Err(e) => return Err(e),
        }
        self.steps_done += 1;
        Ok(StepMetrics {
            step: self.steps_done,
            tokens_seen: self.steps_done as u64 * self.config.batch_tokens as u64,
            lr,
            ntp_loss: loss.ntp,
            concept_loss: loss.aux,
            total_loss: total_val,
        })
    }

    /// Full training state: parameters, optimizer moments, step count, and
    /// the data stream position.
    pub fn checkpoint(&self, stream: &StreamState) -> Result<CheckpointData> {
        let mut tensors = Vec::with_capacity(self.params.len() * 3);
        for p in &self.params {
            tensors.push(NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape(),
                values: p.tensor.values(),
            });
        }
        for (p, (m, v)) in self.params.iter().zip(self.opt.state()) {
            tensors.push(NamedTensor { name: format!("opt.m.{}", p.name), shape: p.tensor.shape(), values: m });
            tensors.push(NamedTensor { name: format!("opt.v.{}", p.name), shape: p.tensor.shape(), values: v });
        }
        let mut extra = std::collections::BTreeMap::new();
        extra.insert(
            "stream".to_string(),
            serde_json::to_value(stream).map_err(|e| Error::Other(format!("stream state: {e}")))?,
        );
        Ok(CheckpointData {
            config: serde_json::json!({
                "train": self.config,
                "model": self.student.config,
            }),
            step: self.steps_done,
            rng_states: Vec::new(),
            extra,
            tensors,
        })
    }

    /// Restores parameters, optimizer moments and step count saved by
    /// `checkpoint`. Returns the data stream position to resume from.
    pub fn restore(&mut self, data: &CheckpointData) -> Result<StreamState> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &NamedTensor> =
            data.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for p in &self.params {
            let t = by_name.get(p.name.as_str()).ok_or_else(|| {
                Error::InvalidConfig(format!("checkpoint is missing parameter {}", p.name))
            })?;
            if t.shape != p.tensor.shape() {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint shape {:?} for {} does not match model shape {:?}",
                    t.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor.set_values(&t.values)?;
        }
        let mut moments = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let m = by_name
                .get(format!("opt.m.{}", p.name).as_str())
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint missing moments for {}", p.name)))?;
            let v = by_name
                .get(format!("opt.v.{}", p.name).as_str())
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint missing moments for {}", p.name)))?;
            moments.push((m.values.clone(), v.values.clone()));
        }
        self.opt.restore(data.step, moments)?;
        self.steps_done = data.step;
        let stream = data
            .extra
            .get("stream")
            .ok_or_else(|| Error::InvalidConfig("checkpoint missing stream state".into()))?;
        serde_json::from_value(stream.clone())
            .map_err(|e| Error::InvalidConfig(format!("bad stream state in checkpoint: {e}")))
    }
}

/// Mean of scalar graph nodes as a graph node.
fn mean_of(terms: &[Tensor]) -> Result<Tensor> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    acc.scale(1.0 / terms.len() as f64)
}

/// Metrics CSV: fixed schema, one header row, one line per logged step.
pub struct MetricsWriter {
    file: std::fs::File,
}

pub const METRICS_HEADER: &str = "step,tokens_seen,lr,ntp_loss,concept_loss,total_loss,val_ppl";

impl MetricsWriter {
    pub fn create(path: &std::path::Path) -> Result<MetricsWriter> {
        use std::io::Write;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter { file })
    }

    /// Reopens an existing metrics file to continue a resumed run.
    pub fn append(path: &std::path::Path) -> Result<MetricsWriter> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingPrerequisite(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        if text.lines().next() != Some(METRICS_HEADER) {
            return Err(Error::BadFormat {
                path: path.to_path_buf(),
                detail: "existing metrics file has a different header".into(),
            });
        }
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter { file })
    }

    pub fn write(&mut self, m: &StepMetrics, val_ppl: Option<f64>) -> Result<()> {
        use std::io::Write;
        let val = val_ppl.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            self.file,
            "{},{},{},{},{},{},{}",
            m.step, m.tokens_seen, m.lr, m.ntp_loss, m.concept_loss, m.total_loss, val
        )
        .map_err(|e| Error::Other(format!("metrics write: {e}")))
    }
}
