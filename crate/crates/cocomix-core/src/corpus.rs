//! Synthetic planted-topic corpus and deterministic batching.
//!
//! Each document samples a topic, then draws tokens from a first-order
//! Markov chain whose transitions are a mixture of a shared base chain and a
//! topic-preferred token distribution. The planted structure is what later
//! stages (concept labels, steering, per-topic evaluation) measure against;
//! the models never see topic labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{subseed, DetRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub n_topics: usize,
    /// Mixing weight of the topic-preferred distribution. 0 removes the
    /// planted signal entirely (used as a null case in tests).
    pub topic_token_bias: f64,
    pub doc_len: usize,
    pub n_docs: usize,
    /// Only first-order chains are supported; the field is explicit so the
    /// corpus format is honest about what it encodes.
    pub markov_order: usize,
    pub seed: u64,
    /// Optional non-uniform topic sampling distribution (distribution-shift
    /// arm). Length n_topics; normalized internally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_profile: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub docs: Vec<Vec<usize>>,
    /// Per-document topic, for evaluation only.
    pub topics: Vec<usize>,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.n_topics == 0 {
            return Err(Error::InvalidConfig("vocab_size and n_topics must be positive".into()));
        }
        if self.n_topics > self.vocab_size / 4 {
            return Err(Error::InvalidConfig(format!(
                "n_topics {} exceeds vocab_size/4 = {}",
                self.n_topics,
                self.vocab_size / 4
            )));
        }
        if !(0.0..=1.0).contains(&self.topic_token_bias) {
            return Err(Error::InvalidConfig(format!(
                "topic_token_bias {} outside [0, 1]",
                self.topic_token_bias
            )));
        }
        if self.doc_len < 2 {
            return Err(Error::InvalidConfig("doc_len must be at least 2".into()));
        }
        if self.n_docs == 0 {
            return Err(Error::InvalidConfig("n_docs must be positive".into()));
        }
        if self.markov_order != 1 {
            return Err(Error::InvalidConfig("only markov_order = 1 is supported".into()));
        }
        if let Some(p) = &self.shift_profile {
            if p.len() != self.n_topics {
                return Err(Error::InvalidConfig(format!(
                    "shift_profile length {} != n_topics {}",
                    p.len(),
                    self.n_topics
                )));
            }
            if p.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || p.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidConfig(
                    "shift_profile must be non-negative with positive mass".into(),
                ));
            }
        }
        Ok(())
    }

    /// Tokens per topic's preferred block. Blocks are disjoint and occupy
    /// the low quarter of the vocabulary.
    pub fn block_size(&self) -> usize {
        (self.vocab_size / 4 / self.n_topics).max(1)
    }

    /// The preferred token ids for a topic.
    pub fn topic_block(&self, topic: usize) -> std::ops::Range<usize> {
        let s = self.block_size();
        topic * s..(topic + 1) * s
    }
}

/// Shared base Markov chain: one random transition row per current token,
/// derived from the corpus seed independently of document sampling.
fn base_chain(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let v = spec.vocab_size;
    let mut rng = DetRng::seeded(subseed(spec.seed, "base-chain"));
    (0..v)
        .map(|_| {
            let mut row: Vec<f64> = (0..v).map(|_| 0.05 + rng.uniform()).collect();
            let total: f64 = row.iter().sum();
            for w in row.iter_mut() {
                *w /= total;
            }
            row
        })
        .collect()
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let v = spec.vocab_size;
    let beta = spec.topic_token_bias;
    let base = base_chain(spec);
    let s = spec.block_size();
    let pref_mass = 1.0 / s as f64;

    let topic_weights: Vec<f64> = match &spec.shift_profile {
        Some(p) => p.clone(),
        None => vec![1.0; spec.n_topics],
    };

    let mut rng = DetRng::seeded(spec.seed);
    let mut docs = Vec::with_capacity(spec.n_docs);
    let mut topics = Vec::with_capacity(spec.n_docs);
    let uniform = 1.0 / v as f64;
    let mut mixed = vec![0.0; v];
    for _ in 0..spec.n_docs {
        let topic = rng.categorical(&topic_weights);
        let block = spec.topic_block(topic);
        let mut doc: Vec<usize> = Vec::with_capacity(spec.doc_len);
        for pos in 0..spec.doc_len {
            for (tok, m) in mixed.iter_mut().enumerate() {
                let base_p = if pos == 0 { uniform } else { base[doc[pos - 1]][tok] };
                let pref_p = if block.contains(&tok) { pref_mass } else { 0.0 };
                *m = (1.0 - beta) * base_p + beta * pref_p;
            }
            doc.push(rng.categorical(&mixed));
        }
        docs.push(doc);
        topics.push(topic);
    }
    Ok(Corpus { spec: spec.clone(), docs, topics })
}

impl Corpus {
    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.len()).sum()
    }

    /// Contiguous document range as a shallow-copied sub-corpus (train/val
    /// splits).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Corpus {
        Corpus {
            spec: self.spec.clone(),
            docs: self.docs[range.clone()].to_vec(),
            topics: self.topics[range].to_vec(),
        }
    }
}

/// One training window: `context_len` input tokens plus the shifted targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub doc: usize,
    pub start: usize,
}

/// Canonical window list: per document, non-overlapping strides of
/// context_len needing context_len + 1 tokens each. The trailing remainder
/// of each document is boundary waste.
pub fn window_index(corpus: &Corpus, context_len: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (doc, tokens) in corpus.docs.iter().enumerate() {
        if tokens.len() < context_len + 1 {
            continue;
        }
        let n = (tokens.len() - 1) / context_len;
        for i in 0..n {
            out.push(Window { doc, start: i * context_len });
        }
    }
    out
}

/// Supervised target tokens in one pass over the corpus: per document,
/// (len − 1) minus the remainder that does not fill a whole window.
pub fn tokens_per_epoch(corpus: &Corpus, context_len: usize) -> usize {
    corpus
        .docs
        .iter()
        .map(|d| {
            if d.len() < context_len + 1 {
                0
            } else {
                ((d.len() - 1) / context_len) * context_len
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub epoch: usize,
    pub cursor: usize,
}

pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// Window indices into the canonical window list, for label lookup.
    pub window_ids: Vec<usize>,
}

/// Deterministic shuffled stream of windows. Batches never span an epoch
/// boundary; when fewer than a full batch of windows remains, the epoch ends
/// and a fresh shuffle begins.
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    windows: Vec<Window>,
    order: Vec<usize>,
    context_len: usize,
    batch_windows: usize,
    rng: DetRng,
    epoch: usize,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        corpus: &'a Corpus,
        context_len: usize,
        batch_tokens: usize,
        seed: u64,
    ) -> Result<BatchStream<'a>> {
        if context_len < 1 {
            return Err(Error::InvalidConfig("context_len must be positive".into()));
        }
        let batch_windows = batch_tokens / context_len;
        if batch_windows == 0 {
            return Err(Error::InvalidConfig(format!(
                "batch_tokens {batch_tokens} smaller than context_len {context_len}"
            )));
        }
        let windows = window_index(corpus, context_len);
        if windows.len() < batch_windows {
            return Err(Error::InvalidConfig(format!(
                "corpus yields {} windows, batch needs {batch_windows}",
                windows.len()
            )));
        }
        let mut rng = DetRng::seeded(seed);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        rng.shuffle(&mut order);
        Ok(BatchStream {
            corpus,
            windows,
            order,
            context_len,
            batch_windows,
            rng,
            epoch: 0,
            cursor: 0,
        })
    }

    /// Rebuilds a stream at a saved (epoch, cursor) by replaying the
    /// per-epoch shuffles, so resumed training sees the identical order.
    pub fn restore(
        corpus: &'a Corpus,
        context_len: usize,
        batch_tokens: usize,
        seed: u64,
        state: &StreamState,
    ) -> Result<BatchStream<'a>> {
        let mut s = BatchStream::new(corpus, context_len, batch_tokens, seed)?;
        for _ in 0..state.epoch {
            s.advance_epoch();
        }
        if state.cursor > s.order.len() {
            return Err(Error::InvalidConfig("stream cursor out of range".into()));
        }
        s.cursor = state.cursor;
        Ok(s)
    }

    fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.cursor = 0;
        self.rng.shuffle(&mut self.order);
    }

    pub fn state(&self) -> StreamState {
        StreamState { epoch: self.epoch, cursor: self.cursor }
    }

    pub fn tokens_per_batch(&self) -> usize {
        self.batch_windows * self.context_len
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor + self.batch_windows > self.order.len() {
            self.advance_epoch();
        }
        let t = self.context_len;
        let mut batch = Batch {
            inputs: Vec::with_capacity(self.batch_windows),
            targets: Vec::with_capacity(self.batch_windows),
            window_ids: Vec::with_capacity(self.batch_windows),
        };
        for i in 0..self.batch_windows {
            let wid = self.order[self.cursor + i];
            let w = &self.windows[wid];
            let doc = &self.corpus.docs[w.doc];
            batch.inputs.push(doc[w.start..w.start + t].to_vec());
            batch.targets.push(doc[w.start + 1..w.start + t + 1].to_vec());
            batch.window_ids.push(wid);
        }
        self.cursor += self.batch_windows;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            vocab_size: 64,
            n_topics: 4,
            topic_token_bias: 0.8,
            doc_len: 17,
            n_docs: 40,
            markov_order: 1,
            seed: 100,
            shift_profile: None,
        }
    }

    #[test]
    fn same_seed_identical_corpus() {
        let spec = small_spec();
        let a = gen_corpus(&spec).unwrap();
        let b = gen_corpus(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs() {
        let mut spec = small_spec();
        let a = gen_corpus(&spec).unwrap();
        spec.seed = 101;
        let b = gen_corpus(&spec).unwrap();
        assert_ne!(a.docs, b.docs);
    }

    #[test]
    fn too_many_topics_rejected() {
        let mut spec = small_spec();
        spec.n_topics = 17; // > 64/4
        assert!(gen_corpus(&spec).is_err());
    }

    #[test]
    fn bias_outside_unit_interval_rejected() {
        let mut spec = small_spec();
        spec.topic_token_bias = 1.2;
        assert!(gen_corpus(&spec).is_err());
        spec.topic_token_bias = -0.1;
        assert!(gen_corpus(&spec).is_err());
    }

    #[test]
    fn tokens_stay_in_vocab_and_topics_in_range() {
        let c = gen_corpus(&small_spec()).unwrap();
        assert_eq!(c.docs.len(), 40);
        for d in &c.docs {
            assert_eq!(d.len(), 17);
            assert!(d.iter().all(|&t| t < 64));
        }
        assert!(c.topics.iter().all(|&k| k < 4));
    }

    #[test]
    fn shift_profile_reweights_topics() {
        let mut spec = small_spec();
        spec.n_docs = 400;
        spec.shift_profile = Some(vec![1.0, 0.0, 0.0, 0.0]);
        let c = gen_corpus(&spec).unwrap();
        assert!(c.topics.iter().all(|&k| k == 0));
    }

    #[test]
    fn window_arithmetic_exact() {
        // doc_len 17, context 8: (17-1)/8 = 2 windows per doc, 16 targets, 0 waste
        let c = gen_corpus(&small_spec()).unwrap();
        let wins = window_index(&c, 8);
        assert_eq!(wins.len(), 40 * 2);
        assert_eq!(tokens_per_epoch(&c, 8), 40 * 16);

        // context 6: (17-1)/6 = 2 windows, 12 targets, 4 wasted per doc
        let wins6 = window_index(&c, 6);
        assert_eq!(wins6.len(), 40 * 2);
        assert_eq!(tokens_per_epoch(&c, 6), 40 * 12);
        let supervised: usize = 40 * 12;
        let waste: usize = 40 * 4 + 40; // tail remainder + first token of each doc
        assert_eq!(supervised + waste, c.total_tokens());
    }

    #[test]
    fn targets_are_inputs_shifted_by_one() {
        let c = gen_corpus(&small_spec()).unwrap();
        let mut stream = BatchStream::new(&c, 8, 16, 7).unwrap();
        let b = stream.next_batch();
        assert_eq!(b.inputs.len(), 2);
        for (inp, tgt) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(inp[1..], tgt[..7]);
        }
    }

    #[test]
    fn fixed_seed_fixed_batch_order() {
        let c = gen_corpus(&small_spec()).unwrap();
        let mut a = BatchStream::new(&c, 8, 16, 7).unwrap();
        let mut b = BatchStream::new(&c, 8, 16, 7).unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_batch().inputs, b.next_batch().inputs);
        }
    }

    #[test]
    fn epoch_reshuffles_but_covers_every_window_once() {
        let c = gen_corpus(&small_spec()).unwrap();
        let mut s = BatchStream::new(&c, 8, 16, 7).unwrap();
        let per_epoch = 80 / 2; // 80 windows, 2 per batch
        let mut seen = vec![0usize; 80];
        for _ in 0..per_epoch {
            for wid in s.next_batch().window_ids {
                seen[wid] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n == 1), "each window exactly once per epoch");
        assert_eq!(s.state(), StreamState { epoch: 0, cursor: 80 });
        s.next_batch();
        assert_eq!(s.state().epoch, 1);
    }

    #[test]
    fn restore_resumes_identical_order() {
        let c = gen_corpus(&small_spec()).unwrap();
        let mut a = BatchStream::new(&c, 8, 16, 7).unwrap();
        for _ in 0..55 {
            a.next_batch();
        }
        let state = a.state();
        let mut b = BatchStream::restore(&c, 8, 16, 7, &state).unwrap();
        for _ in 0..90 {
            assert_eq!(a.next_batch().window_ids, b.next_batch().window_ids);
        }
    }
}
