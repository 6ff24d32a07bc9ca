//! Experiment pipeline: one config file drives corpus generation, teacher
//! training, activation dumping, SAE training, concept labeling, student
//! pretraining, evaluation, steering, and run comparison. Every stage writes
//! a manifest pinning the resolved config, derived seeds, and input/output
//! hashes, and any stage can be re-run from its manifest alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{label_batch, to_label_cache};
use crate::corpus::{gen_corpus, window_index, BatchStream, Corpus, CorpusSpec};
use crate::error::{Error, Result};
use crate::eval::{
    check_disjoint_docs, compare_tokens_to_target, compression_column_norms, sequence_perplexity,
    topic_token_frequencies, CompressionNorms, EvalModel, EvalReport, PplTrace,
};
use crate::mixer::ConceptMixer;
use crate::persist::{
    self, hex, read_activation_dump, read_corpus, read_label_cache, sha256_bytes,
    write_activation_dump, write_corpus, write_label_cache, ActivationDump, CheckpointData,
    LabelMode, LabelSource, NamedTensor, SignRule,
};
use crate::rng::subseed;
use crate::sae::{train_sae, SaeConfig, SaeModel};
use crate::steer::{
    block_frequency, steer_teacher, write_steer_report, SteerPoint, SteerSpec, SteerTarget,
};
use crate::train::{LabelStore, Method, MetricsWriter, TrainConfig, Trainer};
use crate::transformer::{init_params, ModelConfig, TransformerModel};

fn default_lambda() -> f64 {
    0.1
}
fn default_warmup() -> f64 {
    1.0 / 300.0
}
fn default_final_frac() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn default_holdout() -> f64 {
    0.2
}
fn default_eval_every() -> usize {
    250
}

/// Optimization settings for one training run (teacher or student). The
/// optional fields mirror the training defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr_max: f64,
    pub steps: usize,
    pub batch_tokens: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lambda")]
    pub lambda_kd: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_final_frac")]
    pub final_lr_frac: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
}

impl TrainSection {
    pub fn to_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            lambda: self.lambda,
            lambda_kd: self.lambda_kd,
            lr_max: self.lr_max,
            warmup_frac: self.warmup_frac,
            final_lr_frac: self.final_lr_frac,
            weight_decay: self.weight_decay,
            betas: self.betas,
            steps: self.steps,
            batch_tokens: self.batch_tokens,
            seed,
        }
    }
}

/// Everything one experiment needs, loadable from a TOML file. All runs under
/// one config share the corpus, the teacher, the SAE, and the label caches.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Trailing fraction of documents held out for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout_frac: f64,
    /// Validation perplexity cadence during pretraining, in steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Concepts kept per position when labeling.
    pub k_attr: usize,
    /// Concepts kept by the mixer's TopK; defaults to the SAE's own K.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_mix: Option<usize>,
    pub corpus: CorpusSpec,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub sae: SaeConfig,
    pub teacher_train: TrainSection,
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingPrerequisite(path.into())
            } else {
                Error::io(path, e)
            }
        })?;
        let config: ExperimentConfig = toml::from_str(&text).map_err(|e| {
            // TOML errors render a multi-line caret diagram; errors here
            // must stay single-line.
            let flat = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            Error::InvalidConfig(format!("{}: {flat}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.sae.validate()?;
        if self.teacher.vocab_size != self.corpus.vocab_size
            || self.student.vocab_size != self.corpus.vocab_size
        {
            return Err(Error::InvalidConfig(format!(
                "vocab sizes disagree: corpus {}, teacher {}, student {}",
                self.corpus.vocab_size, self.teacher.vocab_size, self.student.vocab_size
            )));
        }
        if self.teacher.context_len != self.student.context_len {
            return Err(Error::InvalidConfig(format!(
                "teacher and student must share context_len (labels are per window): {} vs {}",
                self.teacher.context_len, self.student.context_len
            )));
        }
        if self.k_attr == 0 || self.k_attr > self.sae.n_concepts {
            return Err(Error::InvalidConfig(format!(
                "k_attr {} outside 1..={}",
                self.k_attr, self.sae.n_concepts
            )));
        }
        if let Some(k) = self.k_mix {
            if k == 0 || k > self.sae.n_concepts {
                return Err(Error::InvalidConfig(format!(
                    "k_mix {} outside 1..={}",
                    k, self.sae.n_concepts
                )));
            }
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "holdout_frac {} outside (0, 1)",
                self.holdout_frac
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        if self.corpus.n_docs < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 documents to split off a holdout".into(),
            ));
        }
        if self.corpus.doc_len < self.teacher.context_len + 1 {
            return Err(Error::InvalidConfig(format!(
                "doc_len {} too short for even one window of {} inputs plus a target",
                self.corpus.doc_len, self.teacher.context_len
            )));
        }
        for (name, s) in [("teacher_train", &self.teacher_train), ("train", &self.train)] {
            // Full validation happens when a TrainConfig is built; catch the
            // batch shape here so a bad config file fails before any work.
            if s.batch_tokens == 0 || s.batch_tokens % self.student.context_len != 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name}.batch_tokens {} not a positive multiple of context_len {}",
                    s.batch_tokens, self.student.context_len
                )));
            }
            s.to_config(Method::Ntp, 0).validate()?;
        }
        Ok(())
    }

    /// Canonical JSON form; hashed into every stage manifest.
    pub fn resolved_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Other(format!("config json: {e}")))
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(hex(&sha256_bytes(self.resolved_json()?.as_bytes())))
    }

    /// A small but complete configuration: a planted-topic corpus and models
    /// big enough to show every effect while staying cheap to run.
    pub fn example(out_dir: PathBuf) -> ExperimentConfig {
        let seed = 17;
        // TOML integers are signed; keep derived seeds in range.
        let subseed = |label: &str| subseed(seed, label) & (i64::MAX as u64);
        ExperimentConfig {
            out_dir,
            seed,
            holdout_frac: 0.2,
            eval_every: 500,
            k_attr: 4,
            k_mix: None,
            corpus: CorpusSpec {
                vocab_size: 256,
                n_topics: 8,
                topic_token_bias: 0.8,
                doc_len: 129,
                n_docs: 300,
                markov_order: 1,
                seed: subseed("corpus"),
                shift_profile: None,
            },
            teacher: ModelConfig {
                vocab_size: 256,
                d_model: 64,
                n_heads: 4,
                n_layers: 4,
                split_layer: 2,
                context_len: 32,
                seed: subseed("teacher-init"),
            },
            student: ModelConfig {
                vocab_size: 256,
                d_model: 64,
                n_heads: 4,
                n_layers: 4,
                split_layer: 2,
                context_len: 32,
                seed: subseed("student-init"),
            },
            sae: SaeConfig {
                n_concepts: 128,
                k_sae: 8,
                lr: 1e-3,
                steps: 2000,
                batch: 128,
                seed: subseed("sae-train"),
            },
            teacher_train: TrainSection {
                lr_max: 3e-3,
                steps: 1500,
                batch_tokens: 128,
                lambda: default_lambda(),
                lambda_kd: default_lambda(),
                warmup_frac: default_warmup(),
                final_lr_frac: default_final_frac(),
                weight_decay: default_weight_decay(),
                betas: default_betas(),
            },
            train: TrainSection {
                lr_max: 3e-3,
                steps: 5000,
                batch_tokens: 128,
                lambda: default_lambda(),
                lambda_kd: default_lambda(),
                warmup_frac: default_warmup(),
                final_lr_frac: default_final_frac(),
                weight_decay: default_weight_decay(),
                betas: default_betas(),
            },
        }
    }
}

/// Where every artifact lives under the experiment's out_dir.
#[derive(Clone, Debug)]
pub struct StagePaths {
    pub root: PathBuf,
}

impl StagePaths {
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.bin")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config-resolved.json")
    }
    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{stage}.json"))
    }
    pub fn teacher_dir(&self) -> PathBuf {
        self.root.join("teacher")
    }
    pub fn teacher_metrics(&self) -> PathBuf {
        self.root.join("teacher-metrics.csv")
    }
    pub fn acts(&self) -> PathBuf {
        self.root.join("acts.bin")
    }
    pub fn sae_dir(&self) -> PathBuf {
        self.root.join("sae")
    }
    pub fn labels(&self, mode: LabelMode) -> PathBuf {
        self.root.join(format!("labels-{}.bin", label_tag(mode)))
    }
    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("{}-s{}", method.as_str(), seed))
    }
    pub fn run_metrics(&self, method: Method, seed: u64) -> PathBuf {
        self.run_dir(method, seed).join("metrics.csv")
    }
    pub fn run_checkpoint(&self, method: Method, seed: u64) -> PathBuf {
        self.run_dir(method, seed).join("checkpoint")
    }
    pub fn run_resolved(&self, method: Method, seed: u64) -> PathBuf {
        self.run_dir(method, seed).join("resolved.json")
    }
    pub fn eval_report(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join(format!("eval-{}-s{}.json", method.as_str(), seed))
    }
    pub fn steer_report(&self, tag: &str) -> PathBuf {
        self.root.join(format!("steer-{tag}.csv"))
    }
    pub fn compression_report(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join(format!("compression-{}-s{}.json", method.as_str(), seed))
    }
    pub fn compare_report(&self) -> PathBuf {
        self.root.join("compare.json")
    }
}

pub fn label_tag(mode: LabelMode) -> String {
    let source = match mode.source {
        LabelSource::Attribution => "attribution",
        LabelSource::Activation => "activation",
    };
    let rule = match mode.rule {
        SignRule::Signed => "signed",
        SignRule::Absolute => "absolute",
    };
    format!("{source}-{rule}")
}

/// Which labels a training method consumes.
pub fn label_mode_for(method: Method) -> LabelMode {
    let source = match method {
        Method::CocomixActivationSelect => LabelSource::Activation,
        _ => LabelSource::Attribution,
    };
    LabelMode { source, rule: SignRule::Signed }
}

/// A stage's reproducibility record: the full resolved config plus the
/// arguments, derived seeds, and content hashes of everything it read and
/// wrote. Re-running from this alone must reproduce the outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: u32,
    pub config_hash: String,
    pub experiment: ExperimentConfig,
    pub args: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// What a stage did, for display.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: String,
    pub manifest: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPrerequisite(path.into())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(hex(&sha256_bytes(&bytes)))
}

/// Identity of a model: its configuration plus every parameter value.
pub fn model_hash(model: &TransformerModel) -> Result<[u8; 32]> {
    let config = serde_json::to_string(&model.config)
        .map_err(|e| Error::Other(format!("model config json: {e}")))?;
    let params: Vec<(String, Vec<f64>)> =
        model.named_params().into_iter().map(|p| (p.name, p.tensor.values())).collect();
    Ok(persist::content_hash(&config, &params))
}

/// Loads a transformer from a checkpoint directory written by a trainer or
/// by `save_model`. Ignores optimizer moments and non-model tensors.
pub fn load_model(dir: &Path) -> Result<TransformerModel> {
    let data = persist::load_checkpoint(dir)?;
    let config_value = data
        .config
        .get("model")
        .ok_or_else(|| Error::BadFormat { path: dir.into(), detail: "no model config".into() })?;
    let config: ModelConfig = serde_json::from_value(config_value.clone())
        .map_err(|e| Error::BadFormat { path: dir.into(), detail: format!("model config: {e}") })?;
    let model = init_params(&config)?;
    let by_name: std::collections::HashMap<&str, &NamedTensor> =
        data.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for p in model.named_params() {
        let t = by_name.get(p.name.as_str()).ok_or_else(|| Error::BadFormat {
            path: dir.into(),
            detail: format!("checkpoint is missing {}", p.name),
        })?;
        if t.shape != p.tensor.shape() {
            return Err(Error::BadFormat {
                path: dir.into(),
                detail: format!("{} has shape {:?}, model wants {:?}", p.name, t.shape, p.tensor.shape()),
            });
        }
        p.tensor.set_values(&t.values)?;
    }
    Ok(model)
}

pub fn save_sae(dir: &Path, sae: &SaeModel, config: &SaeConfig) -> Result<()> {
    let tensors = sae
        .params()
        .into_iter()
        .map(|p| NamedTensor { name: p.name, shape: p.tensor.shape(), values: p.tensor.values() })
        .chain(std::iter::once(NamedTensor {
            name: "sae.input_mean".into(),
            shape: sae.input_mean.shape(),
            values: sae.input_mean.values(),
        }))
        .collect();
    let data = CheckpointData {
        config: serde_json::json!({ "sae": config, "d_con": sae.d_con }),
        step: config.steps,
        rng_states: Vec::new(),
        extra: BTreeMap::new(),
        tensors,
    };
    persist::save_checkpoint(dir, &data)
}

pub fn load_sae(dir: &Path) -> Result<(SaeModel, SaeConfig)> {
    let data = persist::load_checkpoint(dir)?;
    let config: SaeConfig = serde_json::from_value(
        data.config
            .get("sae")
            .ok_or_else(|| Error::BadFormat { path: dir.into(), detail: "no sae config".into() })?
            .clone(),
    )
    .map_err(|e| Error::BadFormat { path: dir.into(), detail: format!("sae config: {e}") })?;
    let d_con: usize = serde_json::from_value(
        data.config
            .get("d_con")
            .ok_or_else(|| Error::BadFormat { path: dir.into(), detail: "no d_con".into() })?
            .clone(),
    )
    .map_err(|e| Error::BadFormat { path: dir.into(), detail: format!("d_con: {e}") })?;
    let sae = SaeModel::init(d_con, vec![0.0; d_con], &config)?;
    let by_name: std::collections::HashMap<&str, &NamedTensor> =
        data.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let targets = [
        ("sae.encoder", &sae.encoder),
        ("sae.enc_bias", &sae.enc_bias),
        ("sae.decoder", &sae.decoder),
        ("sae.dec_bias", &sae.dec_bias),
        ("sae.input_mean", &sae.input_mean),
    ];
    for (name, tensor) in targets {
        let t = by_name.get(name).ok_or_else(|| Error::BadFormat {
            path: dir.into(),
            detail: format!("checkpoint is missing {name}"),
        })?;
        if t.shape != tensor.shape() {
            return Err(Error::BadFormat {
                path: dir.into(),
                detail: format!("{name} has shape {:?}, model wants {:?}", t.shape, tensor.shape()),
            });
        }
        tensor.set_values(&t.values)?;
    }
    Ok((sae, config))
}

/// Arguments to the steering stage.
#[derive(Clone, Debug)]
pub struct SteerArgs {
    /// Planted topic whose token block gets counted in samples.
    pub topic: usize,
    /// Concept to amplify; picked by topic association when absent.
    pub concept: Option<usize>,
    pub multipliers: Vec<f64>,
    pub n_tokens: usize,
    pub gen_seeds: Vec<u64>,
    pub after_topk: bool,
    /// Steer the teacher through its SAE code instead of the student.
    pub teacher_side: bool,
}

impl Default for SteerArgs {
    fn default() -> SteerArgs {
        SteerArgs {
            topic: 0,
            concept: None,
            multipliers: vec![0.0, 1.0, 2.0, 5.0, 10.0],
            n_tokens: 256,
            gen_seeds: vec![1, 2, 3, 4, 5],
            after_topk: false,
            teacher_side: false,
        }
    }
}

/// Evaluation stage output for one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunEval {
    pub method: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Comparison stage output: tokens each run needed to first reach the target
/// held-out perplexity, by linear interpolation on the logged trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunComparison {
    pub run_a: String,
    pub run_b: String,
    pub target_ppl: f64,
    pub tokens_a: Option<f64>,
    pub tokens_b: Option<f64>,
    /// tokens_a / tokens_b when both runs reach the target.
    pub ratio: Option<f64>,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub paths: StagePaths,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Pipeline> {
        config.validate()?;
        let paths = StagePaths { root: config.out_dir.clone() };
        Ok(Pipeline { config, paths })
    }

    /// Creates the output tree and records the resolved config beside it.
    fn prepare(&self) -> Result<()> {
        for dir in [self.paths.root.clone(), self.paths.root.join("manifests")] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_text(&self.paths.resolved_config(), &self.config.resolved_json()?)
    }

    fn manifest(&self, stage: &str) -> Result<StageManifest> {
        Ok(StageManifest {
            stage: stage.to_string(),
            version: 1,
            config_hash: self.config.config_hash()?,
            experiment: self.config.clone(),
            args: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.paths.root).unwrap_or(path).to_string_lossy().into_owned()
    }

    fn add_hash(&self, map: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
        map.insert(self.rel(path), file_hash(path)?);
        Ok(())
    }

    /// Checkpoint directories hold a manifest and a payload; hash both.
    fn add_checkpoint_hashes(
        &self,
        map: &mut BTreeMap<String, String>,
        dir: &Path,
    ) -> Result<()> {
        for name in ["manifest.json", "payload.bin"] {
            self.add_hash(map, &dir.join(name))?;
        }
        Ok(())
    }

    fn finish(&self, manifest: StageManifest, notes: Vec<String>) -> Result<StageReport> {
        let path = self.paths.manifest(&manifest.stage);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Other(format!("manifest json: {e}")))?;
        write_text(&path, &json)?;
        let outputs = manifest.outputs.keys().map(|k| self.paths.root.join(k)).collect();
        Ok(StageReport { stage: manifest.stage, manifest: path, outputs, notes })
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let corpus = read_corpus(&self.paths.corpus())?;
        let on_disk = serde_json::to_value(&corpus.spec)
            .map_err(|e| Error::Other(format!("spec json: {e}")))?;
        let expected = serde_json::to_value(&self.config.corpus)
            .map_err(|e| Error::Other(format!("spec json: {e}")))?;
        if on_disk != expected {
            return Err(Error::InvalidConfig(format!(
                "{} was generated from a different corpus spec; regenerate it",
                self.paths.corpus().display()
            )));
        }
        Ok(corpus)
    }

    /// Deterministic document split: the trailing fraction is held out.
    pub fn split(&self, corpus: &Corpus) -> Result<(Corpus, Corpus)> {
        let n = corpus.docs.len();
        let n_hold = ((n as f64) * self.config.holdout_frac).ceil() as usize;
        let n_hold = n_hold.clamp(1, n - 1);
        let n_train = n - n_hold;
        check_disjoint_docs(0..n_train, n_train..n)?;
        Ok((corpus.slice(0..n_train), corpus.slice(n_train..n)))
    }

    fn teacher_seed(&self) -> u64 {
        subseed(self.config.seed, "teacher-train")
    }

    pub fn run_seed(&self, method: Method, seed_override: Option<u64>) -> u64 {
        seed_override
            .unwrap_or_else(|| subseed(self.config.seed, &format!("student-{}", method.as_str())))
    }

    /// Directory name of a run under runs/, as compare expects it.
    pub fn run_name(&self, method: Method, seed_override: Option<u64>) -> String {
        format!("{}-s{}", method.as_str(), self.run_seed(method, seed_override))
    }

    pub fn gen_corpus(&self) -> Result<StageReport> {
        self.prepare()?;
        let corpus = gen_corpus(&self.config.corpus)?;
        write_corpus(&self.paths.corpus(), &corpus)?;
        let mut m = self.manifest("gen-corpus")?;
        m.seeds.insert("corpus".into(), self.config.corpus.seed);
        self.add_hash(&mut m.outputs, &self.paths.corpus())?;
        let notes = vec![format!(
            "{} docs, {} tokens",
            corpus.docs.len(),
            corpus.total_tokens()
        )];
        self.finish(m, notes)
    }

    pub fn train_teacher(&self) -> Result<StageReport> {
        self.prepare()?;
        let corpus = self.load_corpus()?;
        let (train, holdout) = self.split(&corpus)?;
        let seed = self.teacher_seed();
        let config = self.config.teacher_train.to_config(Method::Ntp, seed);
        let steps = config.steps;
        let model = init_params(&self.config.teacher)?;
        let mut trainer = Trainer::new(model, config, None, None, None)?;
        let stream_seed = subseed(seed, "batches");
        let mut stream = BatchStream::new(
            &train,
            self.config.teacher.context_len,
            self.config.teacher_train.batch_tokens,
            stream_seed,
        )?;
        let mut metrics = MetricsWriter::create(&self.paths.teacher_metrics())?;
        let mut final_ppl = f64::NAN;
        for _ in 0..steps {
            let batch = stream.next_batch();
            let sm = trainer.step(&batch)?;
            let val = if sm.step % self.config.eval_every == 0 || sm.step == steps {
                let ppl = trainer.val_perplexity(&holdout)?;
                final_ppl = ppl;
                Some(ppl)
            } else {
                None
            };
            metrics.write(&sm, val)?;
        }
        let data = trainer.checkpoint(&stream.state())?;
        persist::save_checkpoint(&self.paths.teacher_dir(), &data)?;
        let mut m = self.manifest("train-teacher")?;
        m.seeds.insert("teacher-train".into(), seed);
        m.seeds.insert("batches".into(), stream_seed);
        self.add_hash(&mut m.inputs, &self.paths.corpus())?;
        self.add_checkpoint_hashes(&mut m.outputs, &self.paths.teacher_dir())?;
        self.add_hash(&mut m.outputs, &self.paths.teacher_metrics())?;
        self.finish(m, vec![format!("final holdout perplexity {final_ppl:.3}")])
    }

    pub fn load_teacher(&self) -> Result<TransformerModel> {
        let teacher = load_model(&self.paths.teacher_dir())?;
        let expected = serde_json::to_value(&self.config.teacher)
            .map_err(|e| Error::Other(format!("config json: {e}")))?;
        let found = serde_json::to_value(&teacher.config)
            .map_err(|e| Error::Other(format!("config json: {e}")))?;
        if expected != found {
            return Err(Error::InvalidConfig(format!(
                "{} holds a different teacher architecture; retrain it",
                self.paths.teacher_dir().display()
            )));
        }
        Ok(teacher)
    }

    /// Concept-stream hidden states for every training window, row-major
    /// (window-major, position-minor).
    pub fn dump_acts(&self) -> Result<StageReport> {
        self.prepare()?;
        let corpus = self.load_corpus()?;
        let (train, _) = self.split(&corpus)?;
        let teacher = self.load_teacher()?;
        teacher.set_trainable(false);
        let t = self.config.teacher.context_len;
        let windows = window_index(&train, t);
        if windows.is_empty() {
            return Err(Error::InvalidConfig("training split has no full windows".into()));
        }
        let d = self.config.teacher.d_model;
        let mut data = Vec::with_capacity(windows.len() * t * d);
        for w in &windows {
            let tokens = &train.docs[w.doc][w.start..w.start + t];
            let hidden = teacher.forward_prefix(tokens)?;
            data.extend_from_slice(&hidden.values());
        }
        let dump = ActivationDump {
            d_con: d,
            teacher_hash: model_hash(&teacher)?,
            layer: self.config.teacher.split_layer as u32,
            data,
        };
        write_activation_dump(&self.paths.acts(), &dump)?;
        let mut m = self.manifest("dump-acts")?;
        self.add_hash(&mut m.inputs, &self.paths.corpus())?;
        self.add_checkpoint_hashes(&mut m.inputs, &self.paths.teacher_dir())?;
        self.add_hash(&mut m.outputs, &self.paths.acts())?;
        self.finish(m, vec![format!("{} rows of width {d}", dump.rows())])
    }

    pub fn train_sae(&self) -> Result<StageReport> {
        self.prepare()?;
        let teacher = self.load_teacher()?;
        let dump = read_activation_dump(&self.paths.acts(), Some(&model_hash(&teacher)?))?;
        let (sae, report) = train_sae(&dump, &self.config.sae)?;
        save_sae(&self.paths.sae_dir(), &sae, &self.config.sae)?;
        let mut m = self.manifest("train-sae")?;
        m.seeds.insert("sae-train".into(), self.config.sae.seed);
        self.add_hash(&mut m.inputs, &self.paths.acts())?;
        self.add_checkpoint_hashes(&mut m.outputs, &self.paths.sae_dir())?;
        let final_loss = report.log.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
        self.finish(
            m,
            vec![format!(
                "final loss {final_loss:.5}, {} dead concepts",
                report.dead_concepts.len()
            )],
        )
    }

    pub fn make_labels(&self, mode: LabelMode) -> Result<StageReport> {
        self.prepare()?;
        let corpus = self.load_corpus()?;
        let (train, _) = self.split(&corpus)?;
        let teacher = self.load_teacher()?;
        let (sae, sae_config) = load_sae(&self.paths.sae_dir())?;
        let t = self.config.teacher.context_len;
        let windows = window_index(&train, t);
        let sequences: Vec<Vec<usize>> = windows
            .iter()
            .map(|w| train.docs[w.doc][w.start..w.start + t + 1].to_vec())
            .collect();
        let labels = label_batch(&teacher, &sae, &sequences, self.config.k_attr, mode)?;
        let cache = to_label_cache(
            &labels,
            sae.n_concepts(),
            self.config.k_attr,
            mode,
            model_hash(&teacher)?,
            sae.content_hash(&sae_config),
        );
        let path = self.paths.labels(mode);
        write_label_cache(&path, &cache)?;
        let mut m = self.manifest(&format!("make-labels-{}", label_tag(mode)))?;
        m.args.insert("mode".into(), label_tag(mode));
        self.add_hash(&mut m.inputs, &self.paths.corpus())?;
        self.add_checkpoint_hashes(&mut m.inputs, &self.paths.teacher_dir())?;
        self.add_checkpoint_hashes(&mut m.inputs, &self.paths.sae_dir())?;
        self.add_hash(&mut m.outputs, &path)?;
        self.finish(m, vec![format!("{} labeled positions", cache.positions())])
    }

    /// Builds the trainer for a method exactly as pretraining does, loading
    /// whatever artifacts the arm needs.
    fn build_trainer(&self, method: Method, run_seed: u64) -> Result<Trainer> {
        let student = init_params(&self.config.student)?;
        let config = self.config.train.to_config(method, run_seed);
        let mixer = if method.needs_mixer() {
            let k_mix = self.config.k_mix.unwrap_or(self.config.sae.k_sae);
            Some(ConceptMixer::init(
                self.config.student.d_model,
                self.config.sae.n_concepts,
                k_mix,
                run_seed,
            )?)
        } else {
            None
        };
        let labels = if method.needs_labels() {
            let teacher = self.load_teacher()?;
            let (sae, sae_config) = load_sae(&self.paths.sae_dir())?;
            let mode = label_mode_for(method);
            let cache = read_label_cache(
                &self.paths.labels(mode),
                Some(&model_hash(&teacher)?),
                Some(&sae.content_hash(&sae_config)),
            )?;
            Some(LabelStore::from_cache(&cache, self.config.student.context_len)?)
        } else {
            None
        };
        let teacher = if method.needs_teacher()
            || (method == Method::Pause && self.config.train.lambda_kd > 0.0)
        {
            Some(self.load_teacher()?)
        } else {
            None
        };
        Trainer::new(student, config, mixer, teacher, labels)
    }

    /// Pretrains one arm. `stop_after` checkpoints early for resumption
    /// tests; `resume` continues a stopped run, appending to its metrics so
    /// the finished artifacts match an uninterrupted run byte for byte.
    pub fn pretrain(
        &self,
        method: Method,
        seed_override: Option<u64>,
        stop_after: Option<usize>,
        resume: bool,
    ) -> Result<StageReport> {
        self.prepare()?;
        let corpus = self.load_corpus()?;
        let (train, holdout) = self.split(&corpus)?;
        let run_seed = self.run_seed(method, seed_override);
        let stream_seed = subseed(run_seed, "batches");
        let t = self.config.student.context_len;
        let batch_tokens = self.config.train.batch_tokens;
        let total_steps = self.config.train.steps;
        let mut trainer = self.build_trainer(method, run_seed)?;

        let run_dir = self.paths.run_dir(method, run_seed);
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let metrics_path = self.paths.run_metrics(method, run_seed);
        let checkpoint_dir = self.paths.run_checkpoint(method, run_seed);

        let (mut stream, mut metrics) = if resume {
            let data = persist::load_checkpoint(&checkpoint_dir)?;
            let state = trainer.restore(&data)?;
            let stream = BatchStream::restore(&train, t, batch_tokens, stream_seed, &state)?;
            (stream, MetricsWriter::append(&metrics_path)?)
        } else {
            let stream = BatchStream::new(&train, t, batch_tokens, stream_seed)?;
            (stream, MetricsWriter::create(&metrics_path)?)
        };
        let resolved = serde_json::json!({
            "method": method.as_str(),
            "seed": run_seed,
            "train": trainer.config,
            "student": self.config.student,
        });
        write_text(
            &self.paths.run_resolved(method, run_seed),
            &serde_json::to_string_pretty(&resolved)
                .map_err(|e| Error::Other(format!("resolved json: {e}")))?,
        )?;

        let end_step = stop_after.map(|s| s.min(total_steps)).unwrap_or(total_steps);
        let mut last_ppl = None;
        while trainer.steps_done() < end_step {
            let batch = stream.next_batch();
            let sm = trainer.step(&batch)?;
            let val = if sm.step % self.config.eval_every == 0 || sm.step == total_steps {
                let ppl = trainer.val_perplexity(&holdout)?;
                last_ppl = Some(ppl);
                Some(ppl)
            } else {
                None
            };
            metrics.write(&sm, val)?;
        }
        let data = trainer.checkpoint(&stream.state())?;
        persist::save_checkpoint(&checkpoint_dir, &data)?;

        let mut m = self.manifest(&format!("pretrain-{}-s{}", method.as_str(), run_seed))?;
        m.args.insert("method".into(), method.as_str().into());
        m.args.insert("seed".into(), run_seed.to_string());
        if let Some(s) = stop_after {
            m.args.insert("stop_after".into(), s.to_string());
        }
        m.args.insert("resume".into(), resume.to_string());
        m.seeds.insert("run".into(), run_seed);
        m.seeds.insert("batches".into(), stream_seed);
        self.add_hash(&mut m.inputs, &self.paths.corpus())?;
        if trainer.teacher.is_some() {
            self.add_checkpoint_hashes(&mut m.inputs, &self.paths.teacher_dir())?;
        }
        if method.needs_labels() {
            self.add_checkpoint_hashes(&mut m.inputs, &self.paths.sae_dir())?;
            self.add_hash(&mut m.inputs, &self.paths.labels(label_mode_for(method)))?;
        }
        self.add_hash(&mut m.outputs, &metrics_path)?;
        self.add_checkpoint_hashes(&mut m.outputs, &checkpoint_dir)?;
        self.add_hash(&mut m.outputs, &self.paths.run_resolved(method, run_seed))?;
        let note = match last_ppl {
            Some(p) => format!("{} steps, holdout perplexity {p:.3}", trainer.steps_done()),
            None => format!("{} steps", trainer.steps_done()),
        };
        self.finish(m, vec![note])
    }

    /// Rebuilds a trained run from its checkpoint.
    pub fn load_run(&self, method: Method, seed_override: Option<u64>) -> Result<Trainer> {
        let run_seed = self.run_seed(method, seed_override);
        let mut trainer = self.build_trainer(method, run_seed)?;
        let data = persist::load_checkpoint(&self.paths.run_checkpoint(method, run_seed))?;
        trainer.restore(&data)?;
        Ok(trainer)
    }

    pub fn eval_run(
        &self,
        method: Method,
        seed_override: Option<u64>,
    ) -> Result<(RunEval, StageReport)> {
        self.prepare()?;
        let corpus = self.load_corpus()?;
        let (_, holdout) = self.split(&corpus)?;
        let run_seed = self.run_seed(method, seed_override);
        let trainer = self.load_run(method, Some(run_seed))?;
        let val_ppl = trainer.val_perplexity(&holdout)?;
        let t = self.config.student.context_len;
        let report = EvalReport {
            val_ppl,
            tokens_scored: window_index(&holdout, t).len() * t,
            per_topic_token_freq: topic_token_frequencies(&holdout),
            tokens_to_target: Vec::new(),
        };
        let out = RunEval { method: method.as_str().into(), seed: run_seed, report };
        let path = self.paths.eval_report(method, run_seed);
        write_text(
            &path,
            &serde_json::to_string_pretty(&out)
                .map_err(|e| Error::Other(format!("eval json: {e}")))?,
        )?;
        let mut m = self.manifest(&format!("eval-{}-s{}", method.as_str(), run_seed))?;
        m.args.insert("method".into(), method.as_str().into());
        m.args.insert("seed".into(), run_seed.to_string());
        self.add_hash(&mut m.inputs, &self.paths.corpus())?;
        self.add_checkpoint_hashes(&mut m.inputs, &self.paths.run_checkpoint(method, run_seed))?;
        self.add_hash(&mut m.outputs, &path)?;
        let report = self.finish(m, vec![format!("holdout perplexity {val_ppl:.3}")])?;
        Ok((out, report))
    }

    /// Sweeps steering multipliers for one concept, sampling under each and
    /// reporting the planted-topic token frequency and sample perplexity
    /// (medians over generation seeds).
    pub fn steer_run(
        &self,
        method: Method,
        seed_override: Option<u64>,
        args: &SteerArgs,
    ) -> Result<StageReport> {
        self.prepare()?;
        if args.topic >= self.config.corpus.n_topics {
            return Err(Error::IndexOutOfRange {
                context: "steering topic",
                index: args.topic,
                bound: self.config.corpus.n_topics,
            });
        }
        if args.multipliers.is_empty() || args.gen_seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "steering needs at least one multiplier and one generation seed".into(),
            ));
        }
        let corpus = self.load_corpus()?;
        let (_, holdout) = self.split(&corpus)?;
        let block = self.config.corpus.topic_block(args.topic);
        let prompt: Vec<usize> = holdout.docs[0][..4.min(holdout.docs[0].len())].to_vec();

        let run_seed = self.run_seed(method, seed_override);
        let (points, concept, tag) = if args.teacher_side {
            let teacher = self.load_teacher()?;
            let (sae, _) = load_sae(&self.paths.sae_dir())?;
            let concept = match args.concept {
                Some(c) => c,
                None => pick_concept(
                    &crate::eval::association_from_sae(&teacher, &sae, &holdout)?,
                    args.topic,
                )?,
            };
            let mut points = Vec::new();
            for &mult in &args.multipliers {
                let spec = SteerSpec {
                    concept_index: concept,
                    multiplier: mult,
                    target: SteerTarget::TeacherSaeSpace,
                    after_topk: args.after_topk,
                };
                spec.validate(sae.n_concepts())?;
                let mut freqs = Vec::new();
                let mut ppls = Vec::new();
                for &gseed in &args.gen_seeds {
                    let sample =
                        steer_teacher(&teacher, &sae, &prompt, args.n_tokens, 1.0, &spec, gseed)?;
                    freqs.push(block_frequency(&sample, block.clone()));
                    let mut scored = prompt.clone();
                    scored.extend_from_slice(&sample);
                    ppls.push(sequence_perplexity(&EvalModel::Plain(&teacher), &scored)?);
                }
                points.push(SteerPoint {
                    multiplier: mult,
                    topic_k_frequency: median(&mut freqs),
                    ppl_of_sample: median(&mut ppls),
                });
            }
            (points, concept, format!("teacher-t{}", args.topic))
        } else {
            let trainer = self.load_run(method, Some(run_seed))?;
            let student = &trainer.student;
            let mixer = trainer
                .mixer
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("{method} has no concept mixer")))?;
            let concept = match args.concept {
                Some(c) => c,
                None => pick_concept(
                    &crate::eval::association_from_student(student, mixer, &holdout)?,
                    args.topic,
                )?,
            };
            let mut points = Vec::new();
            for &mult in &args.multipliers {
                let spec = SteerSpec {
                    concept_index: concept,
                    multiplier: mult,
                    target: SteerTarget::StudentLogits,
                    after_topk: args.after_topk,
                };
                spec.validate(mixer.n_concepts())?;
                let mut freqs = Vec::new();
                let mut ppls = Vec::new();
                for &gseed in &args.gen_seeds {
                    let p = crate::steer::steer_point(
                        student,
                        mixer,
                        &prompt,
                        args.n_tokens,
                        &spec,
                        block.clone(),
                        gseed,
                    )?;
                    freqs.push(p.topic_k_frequency);
                    ppls.push(p.ppl_of_sample);
                }
                points.push(SteerPoint {
                    multiplier: mult,
                    topic_k_frequency: median(&mut freqs),
                    ppl_of_sample: median(&mut ppls),
                });
            }
            (points, concept, format!("{}-s{}-t{}", method.as_str(), run_seed, args.topic))
        };

        let path = self.paths.steer_report(&tag);
        write_steer_report(&path, &points)?;
        let mut m = self.manifest(&format!("steer-{tag}"))?;
        m.args.insert("method".into(), method.as_str().into());
        m.args.insert("seed".into(), run_seed.to_string());
        m.args.insert("topic".into(), args.topic.to_string());
        m.args.insert("concept".into(), concept.to_string());
        m.args.insert("multipliers".into(), join_f64(&args.multipliers));
        m.args.insert("n_tokens".into(), args.n_tokens.to_string());
        m.args
            .insert("gen_seeds".into(), args.gen_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        m.args.insert("after_topk".into(), args.after_topk.to_string());
        m.args.insert("teacher_side".into(), args.teacher_side.to_string());
        self.add_hash(&mut m.inputs, &self.paths.corpus())?;
        if args.teacher_side {
            self.add_checkpoint_hashes(&mut m.inputs, &self.paths.teacher_dir())?;
            self.add_checkpoint_hashes(&mut m.inputs, &self.paths.sae_dir())?;
        } else {
            self.add_checkpoint_hashes(
                &mut m.inputs,
                &self.paths.run_checkpoint(method, run_seed),
            )?;
        }
        self.add_hash(&mut m.outputs, &path)?;
        self.finish(m, vec![format!("steered concept {concept} for topic {}", args.topic)])
    }

    /// Column norms of a trained run's compression matrix, with the fraction
    /// of concepts whose column has collapsed below the threshold.
    pub fn analyze_compression(
        &self,
        method: Method,
        seed_override: Option<u64>,
        tau: f64,
    ) -> Result<(CompressionNorms, StageReport)> {
        self.prepare()?;
        let run_seed = self.run_seed(method, seed_override);
        let trainer = self.load_run(method, Some(run_seed))?;
        let mixer = trainer
            .mixer
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("{method} has no concept mixer")))?;
        let norms = compression_column_norms(mixer, tau);
        let path = self.paths.compression_report(method, run_seed);
        write_text(
            &path,
            &serde_json::to_string_pretty(&norms)
                .map_err(|e| Error::Other(format!("norms json: {e}")))?,
        )?;
        let mut m = self.manifest(&format!("analyze-compression-{}-s{}", method.as_str(), run_seed))?;
        m.args.insert("method".into(), method.as_str().into());
        m.args.insert("seed".into(), run_seed.to_string());
        m.args.insert("tau".into(), format!("{tau}"));
        self.add_checkpoint_hashes(&mut m.inputs, &self.paths.run_checkpoint(method, run_seed))?;
        self.add_hash(&mut m.outputs, &path)?;
        let report = self.finish(
            m,
            vec![format!(
                "{:.1}% of columns below {tau}",
                norms.fraction_below * 100.0
            )],
        )?;
        Ok((norms, report))
    }

    /// Sample-efficiency comparison of two finished runs by run directory
    /// name (`<method>-s<seed>`).
    pub fn compare(
        &self,
        run_a: &str,
        run_b: &str,
        target_ppl: f64,
    ) -> Result<(RunComparison, StageReport)> {
        self.prepare()?;
        if !(target_ppl.is_finite() && target_ppl >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target perplexity {target_ppl} must be finite and at least 1"
            )));
        }
        let path_a = self.paths.root.join("runs").join(run_a).join("metrics.csv");
        let path_b = self.paths.root.join("runs").join(run_b).join("metrics.csv");
        let trace_a = PplTrace::from_metrics_csv(&path_a)?;
        let trace_b = PplTrace::from_metrics_csv(&path_b)?;
        let (tokens_a, tokens_b, ratio) = compare_tokens_to_target(&trace_a, &trace_b, target_ppl);
        let out = RunComparison {
            run_a: run_a.to_string(),
            run_b: run_b.to_string(),
            target_ppl,
            tokens_a,
            tokens_b,
            ratio,
        };
        let path = self.paths.compare_report();
        write_text(
            &path,
            &serde_json::to_string_pretty(&out)
                .map_err(|e| Error::Other(format!("compare json: {e}")))?,
        )?;
        let mut m = self.manifest("compare")?;
        m.args.insert("run_a".into(), run_a.to_string());
        m.args.insert("run_b".into(), run_b.to_string());
        m.args.insert("target_ppl".into(), format!("{target_ppl}"));
        self.add_hash(&mut m.inputs, &path_a)?;
        self.add_hash(&mut m.inputs, &path_b)?;
        self.add_hash(&mut m.outputs, &path)?;
        let note = match ratio {
            Some(r) => format!("token ratio {r:.3} at perplexity {target_ppl}"),
            None => "at least one run never reached the target".to_string(),
        };
        let report = self.finish(m, vec![note])?;
        Ok((out, report))
    }
}

fn pick_concept(assoc: &[crate::eval::TopicConcept], topic: usize) -> Result<usize> {
    assoc
        .iter()
        .find(|tc| tc.topic == topic)
        .map(|tc| tc.concept)
        .ok_or_else(|| Error::InvalidConfig(format!("no concept association for topic {topic}")))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_manifest(path: &Path) -> Result<StageManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPrerequisite(path.into())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::BadFormat { path: path.into(), detail: format!("manifest: {e}") })
}

fn arg<'a>(m: &'a StageManifest, key: &str) -> Result<&'a str> {
    m.args
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::InvalidConfig(format!("manifest for {} lacks arg {key}", m.stage)))
}

fn parse_arg<T: std::str::FromStr>(m: &StageManifest, key: &str) -> Result<T> {
    arg(m, key)?
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("manifest arg {key} is malformed")))
}

fn label_mode_from_tag(tag: &str) -> Result<LabelMode> {
    let (source, rule) = tag
        .rsplit_once('-')
        .ok_or_else(|| Error::InvalidConfig(format!("bad label mode tag {tag}")))?;
    let source = match source {
        "attribution" => LabelSource::Attribution,
        "activation" => LabelSource::Activation,
        other => return Err(Error::InvalidConfig(format!("bad label source {other}"))),
    };
    let rule = match rule {
        "signed" => SignRule::Signed,
        "absolute" => SignRule::Absolute,
        other => return Err(Error::InvalidConfig(format!("bad sign rule {other}"))),
    };
    Ok(LabelMode { source, rule })
}

/// Re-executes the stage a manifest records, under the exact configuration
/// and arguments it captured. Deterministic stages reproduce their outputs
/// byte for byte.
pub fn rerun_from_manifest(path: &Path) -> Result<StageReport> {
    let m = read_manifest(path)?;
    let pipeline = Pipeline::new(m.experiment.clone())?;
    let stage = m.stage.as_str();
    if stage == "gen-corpus" {
        return pipeline.gen_corpus();
    }
    if stage == "train-teacher" {
        return pipeline.train_teacher();
    }
    if stage == "dump-acts" {
        return pipeline.dump_acts();
    }
    if stage == "train-sae" {
        return pipeline.train_sae();
    }
    if stage.starts_with("make-labels") {
        return pipeline.make_labels(label_mode_from_tag(arg(&m, "mode")?)?);
    }
    if stage.starts_with("pretrain") {
        if parse_arg::<bool>(&m, "resume")? {
            return Err(Error::InvalidConfig(
                "a resumed run is reproduced by re-running its base run, then resuming".into(),
            ));
        }
        let method: Method = arg(&m, "method")?.parse()?;
        let seed: u64 = parse_arg(&m, "seed")?;
        let stop_after = match m.args.get("stop_after") {
            Some(_) => Some(parse_arg::<usize>(&m, "stop_after")?),
            None => None,
        };
        return pipeline.pretrain(method, Some(seed), stop_after, false);
    }
    if stage.starts_with("eval") {
        let method: Method = arg(&m, "method")?.parse()?;
        let seed: u64 = parse_arg(&m, "seed")?;
        return Ok(pipeline.eval_run(method, Some(seed))?.1);
    }
    if stage.starts_with("steer") {
        let method: Method = arg(&m, "method")?.parse()?;
        let seed: u64 = parse_arg(&m, "seed")?;
        let args = SteerArgs {
            topic: parse_arg(&m, "topic")?,
            concept: Some(parse_arg(&m, "concept")?),
            multipliers: parse_f64_list(arg(&m, "multipliers")?)?,
            n_tokens: parse_arg(&m, "n_tokens")?,
            gen_seeds: parse_u64_list(arg(&m, "gen_seeds")?)?,
            after_topk: parse_arg(&m, "after_topk")?,
            teacher_side: parse_arg(&m, "teacher_side")?,
        };
        return pipeline.steer_run(method, Some(seed), &args);
    }
    if stage.starts_with("analyze-compression") {
        let method: Method = arg(&m, "method")?.parse()?;
        let seed: u64 = parse_arg(&m, "seed")?;
        let tau: f64 = parse_arg(&m, "tau")?;
        return Ok(pipeline.analyze_compression(method, Some(seed), tau)?.1);
    }
    if stage == "compare" {
        let target: f64 = parse_arg(&m, "target_ppl")?;
        return Ok(pipeline.compare(arg(&m, "run_a")?, arg(&m, "run_b")?, target)?.1);
    }
    Err(Error::InvalidConfig(format!("unknown stage {stage} in {}", path.display())))
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad number {s}"))))
        .collect()
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad seed {s}"))))
        .collect()
}
