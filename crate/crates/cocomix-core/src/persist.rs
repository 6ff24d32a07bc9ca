//! On-disk formats. Everything is versioned, little-endian, and free of
//! timestamps so identical inputs produce byte-identical files.
//!
//! - corpus:       magic "CORP", spec JSON, docs with topic labels
//! - activations:  magic "ACTD", f32 rows (f64 in memory, f32 on disk for space)
//! - label cache:  magic "CLBL", per-position concept indices and scores
//! - checkpoint:   manifest.json + payload.bin (concatenated f64 LE blobs)

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, CorpusSpec};
use crate::error::{Error, Result};

const CORPUS_MAGIC: &[u8; 4] = b"CORP";
const ACT_MAGIC: &[u8; 4] = b"ACTD";
const LABEL_MAGIC: &[u8; 4] = b"CLBL";
pub const CORPUS_VERSION: u32 = 1;
pub const ACT_VERSION: u32 = 1;
pub const LABEL_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::BadFormat { path: path.into(), detail: detail.into() }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}

/// Content identity of a model: config JSON plus every named parameter's
/// exact bit pattern.
pub fn content_hash(config_json: &str, params: &[(String, Vec<f64>)]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    for (name, values) in params {
        h.update(name.as_bytes());
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

// ---------------------------------------------------------------------------
// little-endian primitives

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Reader<'a> {
        Reader { buf, pos: 0, path }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPrerequisite(path.into())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(io_err(path))?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// corpus

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(CORPUS_MAGIC);
    w.u32(CORPUS_VERSION);
    let spec_json = serde_json::to_string(&corpus.spec)
        .map_err(|e| Error::Other(format!("spec serialization: {e}")))?;
    w.u64(spec_json.len() as u64);
    w.bytes(spec_json.as_bytes());
    w.u64(corpus.docs.len() as u64);
    for (doc, &topic) in corpus.docs.iter().zip(&corpus.topics) {
        w.u32(topic as u32);
        w.u32(doc.len() as u32);
        for &t in doc {
            w.u32(t as u32);
        }
    }
    write_file(path, &w.buf)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    if r.take(4)? != CORPUS_MAGIC {
        return Err(bad(path, "bad magic, expected CORP"));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(bad(path, format!("unsupported corpus version {version}")));
    }
    let spec_len = r.u64()? as usize;
    let spec: CorpusSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| bad(path, format!("spec json: {e}")))?;
    let n_docs = r.u64()? as usize;
    let mut docs = Vec::with_capacity(n_docs);
    let mut topics = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        topics.push(r.u32()? as usize);
        let len = r.u32()? as usize;
        let mut doc = Vec::with_capacity(len);
        for _ in 0..len {
            doc.push(r.u32()? as usize);
        }
        docs.push(doc);
    }
    if !r.done() {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(Corpus { spec, docs, topics })
}

// ---------------------------------------------------------------------------
// activation dump

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub d_con: usize,
    pub teacher_hash: [u8; 32],
    pub layer: u32,
    /// Row-major, rows * d_con. f64 in memory; stored as f32.
    pub data: Vec<f64>,
}

impl ActivationDump {
    pub fn rows(&self) -> usize {
        self.data.len() / self.d_con
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_con..(i + 1) * self.d_con]
    }
}

pub fn write_activation_dump(path: &Path, dump: &ActivationDump) -> Result<()> {
    let rows = dump.rows();
    if rows * dump.d_con != dump.data.len() {
        return Err(Error::ShapeMismatch {
            kernel: "activation_dump",
            detail: format!("{} values not a multiple of d_con {}", dump.data.len(), dump.d_con),
        });
    }
    let mut w = Writer::new();
    w.bytes(ACT_MAGIC);
    w.u32(ACT_VERSION);
    w.u64(rows as u64);
    w.u32(dump.d_con as u32);
    w.bytes(&dump.teacher_hash);
    w.u32(dump.layer);
    for &v in &dump.data {
        w.f32(v as f32);
    }
    write_file(path, &w.buf)
}

/// Reads a dump, optionally insisting it was produced by a specific teacher.
pub fn read_activation_dump(path: &Path, expect_teacher: Option<&[u8; 32]>) -> Result<ActivationDump> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    if r.take(4)? != ACT_MAGIC {
        return Err(bad(path, "bad magic, expected ACTD"));
    }
    let version = r.u32()?;
    if version != ACT_VERSION {
        return Err(bad(path, format!("unsupported dump version {version}")));
    }
    let rows = r.u64()? as usize;
    let d_con = r.u32()? as usize;
    let teacher_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let layer = r.u32()?;
    if let Some(expect) = expect_teacher {
        if expect != &teacher_hash {
            return Err(Error::HashMismatch {
                path: path.into(),
                expected: hex(expect),
                found: hex(&teacher_hash),
            });
        }
    }
    let mut data = Vec::with_capacity(rows * d_con);
    for _ in 0..rows * d_con {
        data.push(r.f32()? as f64);
    }
    if !r.done() {
        return Err(bad(path, "payload longer than header claims"));
    }
    Ok(ActivationDump { d_con, teacher_hash, layer, data })
}

// ---------------------------------------------------------------------------
// concept label cache

/// Which per-position score vector drives label selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    Attribution,
    Activation,
}

/// How the top K entries of that vector are ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignRule {
    Signed,
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMode {
    pub source: LabelSource,
    pub rule: SignRule,
}

impl LabelMode {
    pub const ATTRIBUTION_SIGNED: LabelMode =
        LabelMode { source: LabelSource::Attribution, rule: SignRule::Signed };
    pub const ATTRIBUTION_ABSOLUTE: LabelMode =
        LabelMode { source: LabelSource::Attribution, rule: SignRule::Absolute };
    pub const ACTIVATION_SIGNED: LabelMode =
        LabelMode { source: LabelSource::Activation, rule: SignRule::Signed };

    fn tag(self) -> u32 {
        let s = match self.source {
            LabelSource::Attribution => 0,
            LabelSource::Activation => 2,
        };
        let r = match self.rule {
            SignRule::Signed => 0,
            SignRule::Absolute => 1,
        };
        s + r
    }
    fn from_tag(t: u32, path: &Path) -> Result<LabelMode> {
        let source = match t {
            0 | 1 => LabelSource::Attribution,
            2 | 3 => LabelSource::Activation,
            _ => return Err(bad(path, format!("unknown label mode {t}"))),
        };
        let rule = if t % 2 == 0 { SignRule::Signed } else { SignRule::Absolute };
        Ok(LabelMode { source, rule })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelCache {
    pub n_concepts: usize,
    pub k_attr: usize,
    pub mode: LabelMode,
    pub teacher_hash: [u8; 32],
    pub sae_hash: [u8; 32],
    /// Per position: k_attr concept indices (ascending) with their scores.
    pub indices: Vec<u32>,
    pub scores: Vec<f64>,
}

impl LabelCache {
    pub fn positions(&self) -> usize {
        self.indices.len() / self.k_attr
    }

    pub fn labels_at(&self, pos: usize) -> &[u32] {
        &self.indices[pos * self.k_attr..(pos + 1) * self.k_attr]
    }

    pub fn scores_at(&self, pos: usize) -> &[f64] {
        &self.scores[pos * self.k_attr..(pos + 1) * self.k_attr]
    }
}

pub fn write_label_cache(path: &Path, cache: &LabelCache) -> Result<()> {
    if cache.indices.len() != cache.scores.len() || cache.indices.len() % cache.k_attr != 0 {
        return Err(Error::ShapeMismatch {
            kernel: "label_cache",
            detail: format!(
                "{} indices / {} scores not aligned to k_attr {}",
                cache.indices.len(),
                cache.scores.len(),
                cache.k_attr
            ),
        });
    }
    let mut w = Writer::new();
    w.bytes(LABEL_MAGIC);
    w.u32(LABEL_VERSION);
    w.u32(cache.n_concepts as u32);
    w.u32(cache.k_attr as u32);
    w.u32(cache.mode.tag());
    w.bytes(&cache.teacher_hash);
    w.bytes(&cache.sae_hash);
    w.u64(cache.positions() as u64);
    for pos in 0..cache.positions() {
        for &i in cache.labels_at(pos) {
            w.u32(i);
        }
        for &s in cache.scores_at(pos) {
            w.f64(s);
        }
    }
    write_file(path, &w.buf)
}

pub fn read_label_cache(
    path: &Path,
    expect_teacher: Option<&[u8; 32]>,
    expect_sae: Option<&[u8; 32]>,
) -> Result<LabelCache> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    if r.take(4)? != LABEL_MAGIC {
        return Err(bad(path, "bad magic, expected CLBL"));
    }
    let version = r.u32()?;
    if version != LABEL_VERSION {
        return Err(bad(path, format!("unsupported label cache version {version}")));
    }
    let n_concepts = r.u32()? as usize;
    let k_attr = r.u32()? as usize;
    let mode = LabelMode::from_tag(r.u32()?, path)?;
    let teacher_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let sae_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    if let Some(expect) = expect_teacher {
        if expect != &teacher_hash {
            return Err(Error::HashMismatch {
                path: path.into(),
                expected: hex(expect),
                found: hex(&teacher_hash),
            });
        }
    }
    if let Some(expect) = expect_sae {
        if expect != &sae_hash {
            return Err(Error::HashMismatch {
                path: path.into(),
                expected: hex(expect),
                found: hex(&sae_hash),
            });
        }
    }
    let positions = r.u64()? as usize;
    let mut indices = Vec::with_capacity(positions * k_attr);
    let mut scores = Vec::with_capacity(positions * k_attr);
    for _ in 0..positions {
        for _ in 0..k_attr {
            let idx = r.u32()?;
            if idx as usize >= n_concepts {
                return Err(bad(path, format!("concept index {idx} >= C {n_concepts}")));
            }
            indices.push(idx);
        }
        for _ in 0..k_attr {
            scores.push(r.f64()?);
        }
    }
    if !r.done() {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(LabelCache { n_concepts, k_attr, mode, teacher_hash, sae_hash, indices, scores })
}

// ---------------------------------------------------------------------------
// checkpoint

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub name: String,
    pub seed_hex: String,
    /// u128 split for JSON-safe integers.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(name: &str, rng: &crate::rng::DetRng) -> RngState {
        let pos = rng.word_pos();
        RngState {
            name: name.into(),
            seed_hex: hex(&rng.seed_bytes()),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Result<crate::rng::DetRng> {
        let seed: [u8; 32] = unhex(&self.seed_hex)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Other(format!("bad rng seed hex for {}", self.name)))?;
        let pos = ((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128;
        Ok(crate::rng::DetRng::restore(seed, pos))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub config: serde_json::Value,
    pub step: usize,
    pub rng_states: Vec<RngState>,
    /// Small structured state (stream position, schedule totals, ...).
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset and length in f64 elements within the payload.
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: serde_json::Value,
    step: usize,
    rng_states: Vec<RngState>,
    extra: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn payload_path(dir: &Path) -> PathBuf {
    dir.join("payload.bin")
}

pub fn save_checkpoint(dir: &Path, data: &CheckpointData) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(data.tensors.len());
    let mut offset = 0u64;
    for t in &data.tensors {
        let expect: usize = t.shape.iter().product::<usize>().max(1);
        if expect != t.values.len() {
            return Err(Error::ShapeMismatch {
                kernel: "checkpoint",
                detail: format!("tensor {} shape {:?} vs {} values", t.name, t.shape, t.values.len()),
            });
        }
        let mut bytes = Vec::with_capacity(t.values.len() * 8);
        for v in &t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.values.len() as u64,
            sha256: hex(&sha256_bytes(&bytes)),
        });
        payload.extend_from_slice(&bytes);
        offset += t.values.len() as u64;
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: data.config.clone(),
        step: data.step,
        rng_states: data.rng_states.clone(),
        extra: data.extra.clone(),
        tensors: entries,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Other(format!("manifest serialization: {e}")))?;
    write_file(&manifest_path(dir), manifest_json.as_bytes())?;
    write_file(&payload_path(dir), &payload)
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointData> {
    let mpath = manifest_path(dir);
    let manifest: Manifest = serde_json::from_slice(&read_file(&mpath)?)
        .map_err(|e| bad(&mpath, format!("manifest json: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(bad(&mpath, format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    let ppath = payload_path(dir);
    let payload = read_file(&ppath)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let start = (e.offset * 8) as usize;
        let end = start + (e.len * 8) as usize;
        if end > payload.len() {
            return Err(bad(&ppath, format!("tensor {} extends past payload", e.name)));
        }
        let bytes = &payload[start..end];
        let found = hex(&sha256_bytes(bytes));
        if found != e.sha256 {
            return Err(Error::HashMismatch {
                path: ppath.clone(),
                expected: e.sha256.clone(),
                found,
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), values });
    }
    Ok(CheckpointData {
        config: manifest.config,
        step: manifest.step,
        rng_states: manifest.rng_states,
        extra: manifest.extra,
        tensors,
    })
}
