//! Concept steering during generation: scale one concept's predicted logit
//! (student side) or SAE pre-activation (teacher side) while sampling, and
//! measure how the output drifts toward the planted topic that concept
//! tracks.
//!
//! With full-window recomputation each step, scaling the concept column at
//! every position is the same as having steered each position's prediction
//! when it was generated, so the multiplier applies to the whole column.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{sequence_perplexity, EvalModel};
use crate::mixer::{interleave, ConceptMixer};
use crate::rng::DetRng;
use crate::sae::SaeModel;
use crate::tensor::Tensor;
use crate::transformer::TransformerModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerTarget {
    /// Scale entry `concept_index` of the student's concept logits z_t.
    StudentLogits,
    /// Scale entry `concept_index` of the teacher's SAE code c_t and run the
    /// teacher on the reconstruction.
    TeacherSaeSpace,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SteerSpec {
    pub concept_index: usize,
    pub multiplier: f64,
    pub target: SteerTarget,
    /// Scale after the TopK mask instead of before it. Before-TopK is the
    /// default: a strong multiplier can then pull the concept into the kept
    /// set, which is the point of amplification.
    pub after_topk: bool,
}

impl SteerSpec {
    pub fn validate(&self, n_concepts: usize) -> Result<()> {
        if self.concept_index >= n_concepts {
            return Err(Error::IndexOutOfRange {
                context: "steering concept",
                index: self.concept_index,
                bound: n_concepts,
            });
        }
        if !self.multiplier.is_finite() {
            return Err(Error::InvalidConfig("steering multiplier must be finite".into()));
        }
        if !(-10.0..=10.0).contains(&self.multiplier) {
            log::warn!(
                "steering multiplier {} outside the documented range [-10, 10]",
                self.multiplier
            );
        }
        Ok(())
    }

    /// 1 x C row that is 1 everywhere and `multiplier` at the steered
    /// concept; multiplying by it scales exactly that column.
    fn column_mask(&self, n_concepts: usize) -> Result<Tensor> {
        let mut m = vec![1.0; n_concepts];
        m[self.concept_index] = self.multiplier;
        Tensor::constant(&[1, n_concepts], m)
    }
}

/// Greedy at temperature 0 (ties to the lowest token id), otherwise a seeded
/// draw from softmax(logits / temperature).
fn sample_from_logits(row: &[f64], temperature: f64, rng: &mut DetRng) -> Result<usize> {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric { kernel: "sample", detail: "non-finite logits".into() });
    }
    let weights: Vec<f64> = row.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    Ok(rng.categorical(&weights))
}

/// Autoregressive sampling from the concept-augmented student, recomputing
/// the trailing context window each step. Returns the generated tokens
/// (prompt excluded).
pub fn generate(
    student: &TransformerModel,
    mixer: &ConceptMixer,
    prompt: &[usize],
    n_tokens: usize,
    temperature: f64,
    steer: Option<&SteerSpec>,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("prompt must be nonempty".into()));
    }
    if let Some(s) = steer {
        s.validate(mixer.n_concepts())?;
        if s.target != SteerTarget::StudentLogits {
            return Err(Error::InvalidConfig(
                "generate steers student logits; use steer_teacher for the SAE space".into(),
            ));
        }
    }
    let context = student.config.context_len;
    let mut seq = prompt.to_vec();
    let mut rng = DetRng::seeded(seed);
    for _ in 0..n_tokens {
        let start = seq.len().saturating_sub(context);
        let window = &seq[start..];
        let h = student.forward_prefix(window)?;
        let z = mixer.predict_concepts(&h)?;
        let c_hat = match steer {
            None => mixer.compress(&z)?,
            Some(s) if !s.after_topk => {
                let steered = z.mul(&s.column_mask(mixer.n_concepts())?)?;
                mixer.compress(&steered)?
            }
            Some(s) => {
                let kept = z.topk_mask(mixer.k_mix)?;
                let steered = kept.mul(&s.column_mask(mixer.n_concepts())?)?;
                steered.matmul_tb(&mixer.comp_w)?.add(&mixer.comp_b)?
            }
        };
        let (mixed, pos) = interleave(&h, &c_hat)?;
        let logits = self_logits_last_row(student, &mixed, &pos)?;
        seq.push(sample_from_logits(&logits, temperature, &mut rng)?);
    }
    Ok(seq[prompt.len()..].to_vec())
}

fn self_logits_last_row(
    model: &TransformerModel,
    hidden: &Tensor,
    pos: &[usize],
) -> Result<Vec<f64>> {
    let logits = model.forward_suffix(hidden, pos)?;
    let v = logits.cols();
    let last = logits.rows() - 1;
    Ok(logits.values()[last * v..(last + 1) * v].to_vec())
}

/// Teacher-side steering: each step, the hidden state at the concept layer
/// is replaced by the SAE reconstruction of its steered code at every
/// position, and generation continues through the remaining blocks.
pub fn steer_teacher(
    teacher: &TransformerModel,
    sae: &SaeModel,
    prompt: &[usize],
    n_tokens: usize,
    temperature: f64,
    spec: &SteerSpec,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("prompt must be nonempty".into()));
    }
    let n_concepts = sae.encoder.rows();
    spec.validate(n_concepts)?;
    if spec.target != SteerTarget::TeacherSaeSpace {
        return Err(Error::InvalidConfig(
            "steer_teacher needs target = teacher_sae_space".into(),
        ));
    }
    let context = teacher.config.context_len;
    let mut seq = prompt.to_vec();
    let mut rng = DetRng::seeded(seed);
    for _ in 0..n_tokens {
        let start = seq.len().saturating_sub(context);
        let window = &seq[start..];
        let h = teacher.forward_prefix(window)?;
        let (c_pre, c) = sae.encode_rows(&h)?;
        let code = if spec.after_topk {
            c.mul(&spec.column_mask(n_concepts)?)?
        } else {
            let steered_pre = c_pre.mul(&spec.column_mask(n_concepts)?)?;
            steered_pre.topk_mask(sae.k_sae)?
        };
        let h_hat = sae.decode_rows(&code)?;
        let pos: Vec<usize> = (0..window.len()).collect();
        let logits = self_logits_last_row(teacher, &h_hat, &pos)?;
        seq.push(sample_from_logits(&logits, temperature, &mut rng)?);
    }
    Ok(seq[prompt.len()..].to_vec())
}

/// Fraction of tokens falling in a token id range (a planted topic block).
pub fn block_frequency(tokens: &[usize], block: std::ops::Range<usize>) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    tokens.iter().filter(|t| block.contains(t)).count() as f64 / tokens.len() as f64
}

/// One steering sweep measurement.
#[derive(Clone, Copy, Debug)]
pub struct SteerPoint {
    pub multiplier: f64,
    pub topic_k_frequency: f64,
    pub ppl_of_sample: f64,
}

/// Report CSV: multiplier, topic_k_frequency, ppl_of_sample.
pub fn write_steer_report(path: &Path, points: &[SteerPoint]) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "multiplier,topic_k_frequency,ppl_of_sample").map_err(|e| Error::io(path, e))?;
    for p in points {
        writeln!(f, "{},{},{}", p.multiplier, p.topic_k_frequency, p.ppl_of_sample)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Generates under one steering setting and scores the sample: planted-topic
/// frequency plus the unsteered model's perplexity on the steered text.
pub fn steer_point(
    student: &TransformerModel,
    mixer: &ConceptMixer,
    prompt: &[usize],
    n_tokens: usize,
    spec: &SteerSpec,
    topic_block: std::ops::Range<usize>,
    seed: u64,
) -> Result<SteerPoint> {
    let sample = generate(student, mixer, prompt, n_tokens, 1.0, Some(spec), seed)?;
    let freq = block_frequency(&sample, topic_block);
    let mut scored = prompt.to_vec();
    scored.extend_from_slice(&sample);
    let ppl = sequence_perplexity(&EvalModel::Mixed { student, mixer }, &scored)?;
    Ok(SteerPoint { multiplier: spec.multiplier, topic_k_frequency: freq, ppl_of_sample: ppl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::SaeConfig;
    use crate::transformer::{init_params, ModelConfig};

    fn model(vocab: usize, d: usize, t: usize, seed: u64) -> TransformerModel {
        init_params(&ModelConfig {
            vocab_size: vocab,
            d_model: d,
            n_heads: 2,
            n_layers: 2,
            split_layer: 1,
            context_len: t,
            seed,
        })
        .unwrap()
    }

    fn spec(concept: usize, multiplier: f64, after_topk: bool) -> SteerSpec {
        SteerSpec {
            concept_index: concept,
            multiplier,
            target: SteerTarget::StudentLogits,
            after_topk,
        }
    }

    #[test]
    fn multiplier_one_is_a_bit_exact_noop() {
        let m = model(31, 8, 8, 1);
        let mixer = ConceptMixer::init(8, 12, 4, 1).unwrap();
        let prompt = [3usize, 7, 11];
        let plain = generate(&m, &mixer, &prompt, 24, 1.0, None, 9).unwrap();
        for after_topk in [false, true] {
            let steered =
                generate(&m, &mixer, &prompt, 24, 1.0, Some(&spec(5, 1.0, after_topk)), 9).unwrap();
            assert_eq!(plain, steered, "after_topk = {after_topk}");
        }
    }

    #[test]
    fn zero_multiplier_on_a_never_selected_concept_is_a_noop() {
        let m = model(31, 8, 8, 2);
        let mixer = ConceptMixer::init(8, 12, 4, 2).unwrap();
        // concept 9 always has z = 0: zero head row and bias entry; with
        // random nonzero logits elsewhere it never enters the kept set
        mixer.head_w.apply(|v| {
            for col in 0..8 {
                v[9 * 8 + col] = 0.0;
            }
        });
        mixer.head_b.apply(|v| v[9] = 0.0);
        let prompt = [1usize, 4];
        let plain = generate(&m, &mixer, &prompt, 20, 1.0, None, 17).unwrap();
        for after_topk in [false, true] {
            let steered =
                generate(&m, &mixer, &prompt, 20, 1.0, Some(&spec(9, 0.0, after_topk)), 17).unwrap();
            assert_eq!(plain, steered, "after_topk = {after_topk}");
        }
    }

    #[test]
    fn same_seed_reproduces_samples_and_greedy_ignores_seed() {
        let m = model(31, 8, 8, 3);
        let mixer = ConceptMixer::init(8, 12, 4, 3).unwrap();
        let prompt = [2usize, 9, 5];
        let a = generate(&m, &mixer, &prompt, 16, 1.0, None, 40).unwrap();
        let b = generate(&m, &mixer, &prompt, 16, 1.0, None, 40).unwrap();
        assert_eq!(a, b);
        let g1 = generate(&m, &mixer, &prompt, 16, 0.0, None, 1).unwrap();
        let g2 = generate(&m, &mixer, &prompt, 16, 0.0, None, 2).unwrap();
        assert_eq!(g1, g2, "greedy sampling must not consume randomness");
    }

    #[test]
    fn strong_steering_changes_the_sample() {
        let m = model(31, 8, 8, 4);
        let mixer = ConceptMixer::init(8, 12, 4, 4).unwrap();
        // an untrained mixer inserts near-zero vectors; scale the compression
        // up so the steered concept visibly moves the logits
        mixer.comp_w.apply(|v| v.iter_mut().for_each(|x| *x *= 100.0));
        let prompt = [6usize, 1];
        let plain = generate(&m, &mixer, &prompt, 32, 1.0, None, 8).unwrap();
        let steered = generate(&m, &mixer, &prompt, 32, 1.0, Some(&spec(0, 10.0, false)), 8).unwrap();
        assert_ne!(plain, steered);
    }

    #[test]
    fn bad_steering_inputs_are_rejected() {
        let m = model(31, 8, 8, 5);
        let mixer = ConceptMixer::init(8, 12, 4, 5).unwrap();
        assert!(matches!(
            generate(&m, &mixer, &[], 4, 1.0, None, 1),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            generate(&m, &mixer, &[1], 4, 1.0, Some(&spec(12, 2.0, false)), 1),
            Err(Error::IndexOutOfRange { .. })
        ));
        let wrong_target = SteerSpec {
            concept_index: 0,
            multiplier: 2.0,
            target: SteerTarget::TeacherSaeSpace,
            after_topk: false,
        };
        assert!(matches!(
            generate(&m, &mixer, &[1], 4, 1.0, Some(&wrong_target), 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn teacher_steering_runs_and_multiplier_validation_applies() {
        let teacher = model(31, 8, 8, 6);
        let sae = SaeModel::init(
            8,
            vec![0.0; 8],
            &SaeConfig { n_concepts: 16, k_sae: 4, lr: 1e-3, steps: 1, batch: 4, seed: 6 },
        )
        .unwrap();
        let s = SteerSpec {
            concept_index: 3,
            multiplier: 5.0,
            target: SteerTarget::TeacherSaeSpace,
            after_topk: false,
        };
        let out = steer_teacher(&teacher, &sae, &[2, 8, 4], 12, 1.0, &s, 21).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|&t| t < 31));
        let wrong = SteerSpec { target: SteerTarget::StudentLogits, ..s };
        assert!(steer_teacher(&teacher, &sae, &[2], 4, 1.0, &wrong, 21).is_err());
        let oob = SteerSpec { concept_index: 16, ..s };
        assert!(steer_teacher(&teacher, &sae, &[2], 4, 1.0, &oob, 21).is_err());
    }

    #[test]
    fn teacher_substitution_with_multiplier_one_tracks_reconstruction() {
        // with an identity-quality SAE (k = C and perfect dictionary), the
        // reconstruction is near-exact, so steered generation at multiplier 1
        // matches plain greedy generation
        let teacher = model(31, 8, 8, 7);
        let sae = SaeModel::init(
            8,
            vec![0.0; 8],
            &SaeConfig { n_concepts: 8, k_sae: 8, lr: 1e-3, steps: 1, batch: 4, seed: 7 },
        )
        .unwrap();
        // encoder = I, decoder = I, biases 0, mean 0: c = h, decode(c) = h
        sae.encoder.apply(|v| {
            v.fill(0.0);
            for i in 0..8 {
                v[i * 8 + i] = 1.0;
            }
        });
        sae.decoder.apply(|v| {
            v.fill(0.0);
            for i in 0..8 {
                v[i * 8 + i] = 1.0;
            }
        });
        sae.enc_bias.apply(|v| v.fill(0.0));
        sae.dec_bias.apply(|v| v.fill(0.0));
        sae.input_mean.apply(|v| v.fill(0.0));
        let s = SteerSpec {
            concept_index: 2,
            multiplier: 1.0,
            target: SteerTarget::TeacherSaeSpace,
            after_topk: false,
        };
        let prompt = [3usize, 12, 7];
        let steered = steer_teacher(&teacher, &sae, &prompt, 16, 0.0, &s, 5).unwrap();
        // plain greedy teacher generation for comparison
        let mut seq = prompt.to_vec();
        for _ in 0..16 {
            let start = seq.len().saturating_sub(8);
            let logits = teacher.forward_full(&seq[start..]).unwrap();
            let v = logits.cols();
            let vals = logits.values();
            let last = logits.rows() - 1;
            let row = &vals[last * v..(last + 1) * v];
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            seq.push(best);
        }
        assert_eq!(steered, seq[prompt.len()..].to_vec());
    }

    #[test]
    fn block_frequency_counts_exactly() {
        assert_eq!(block_frequency(&[0, 1, 4, 5], 0..4), 0.5);
        assert_eq!(block_frequency(&[], 0..4), 0.0);
        assert_eq!(block_frequency(&[7, 7, 7], 0..4), 0.0);
    }

    #[test]
    fn steer_report_csv_roundtrips() {
        let dir = std::env::temp_dir().join(format!("cocomix-steer-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("steer.csv");
        let points = [
            SteerPoint { multiplier: 0.0, topic_k_frequency: 0.125, ppl_of_sample: 21.5 },
            SteerPoint { multiplier: 10.0, topic_k_frequency: 0.5, ppl_of_sample: 30.0 },
        ];
        write_steer_report(&path, &points).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "multiplier,topic_k_frequency,ppl_of_sample\n0,0.125,21.5\n10,0.5,30\n"
        );
    }

    #[test]
    fn steer_point_measures_frequency_and_sample_ppl() {
        let m = model(32, 8, 8, 8);
        let mixer = ConceptMixer::init(8, 12, 4, 8).unwrap();
        let p = steer_point(&m, &mixer, &[1, 2], 24, &spec(0, 2.0, false), 0..4, 31).unwrap();
        assert!((0.0..=1.0).contains(&p.topic_k_frequency));
        assert!(p.ppl_of_sample >= 1.0);
        assert_eq!(p.multiplier, 2.0);
    }
}
