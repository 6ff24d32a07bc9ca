//! Acceptance suite: ten gated criteria covering gradient correctness,
//! attribution, sparse-dictionary recovery, structural invariants, the
//! directional training benefit at desk scale, component analysis, baseline
//! behavior, steering, compression norms, and byte-level reproducibility.
//!
//! Each test prints one "criterion N: PASS/FAIL - detail" line and mirrors it
//! under target/acceptance/report/. Tests run in name order; the heavy shared
//! experiment (criteria 5, 6, 8, 9) is built once under target/acceptance/desk
//! and reused if a completed, current artifact is already present.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use cocomix_core::attribution::{attribution, ConceptSelection};
use cocomix_core::corpus::Batch;
use cocomix_core::eval::{
    association_from_sae, association_from_student, compression_column_norms, PplTrace,
};
use cocomix_core::mixer::{cocomix_forward, interleave, ConceptMixer};
use cocomix_core::persist::{ActivationDump, LabelMode, LabelSource, SignRule};
use cocomix_core::pipeline::{
    load_sae, rerun_from_manifest, ExperimentConfig, Pipeline, RunEval, StageReport, SteerArgs,
};
use cocomix_core::rng::DetRng;
use cocomix_core::sae::{train_sae, SaeConfig, SaeModel};
use cocomix_core::steer::{block_frequency, generate, steer_point, steer_teacher, SteerSpec, SteerTarget};
use cocomix_core::tensor::{concat_rows, cross_entropy, finite_diff_check, Tensor};
use cocomix_core::train::{LabelStore, Method, TrainConfig, Trainer};
use cocomix_core::transformer::{init_params, ModelConfig, TransformerModel};
use cocomix_core::Result;

const GRAD_TOL: f64 = 1e-4;
const SAE_FVU_MAX: f64 = 0.1;
const DECODER_NORM_TOL: f64 = 1e-9;
const COS_ZERO_TOL: f64 = 1e-9;
const C1_BUDGET_SECS: f64 = 120.0;
const C3_BUDGET_SECS: f64 = 300.0;
const C5_BUDGET_SECS: f64 = 3600.0;
const DESK_SEEDS: [u64; 3] = [1, 2, 3];

fn acceptance_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance")
}

/// Prints the criterion verdict, mirrors it to a report file, and fails the
/// test when the gate does not hold.
fn verdict(criterion: usize, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion}: {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    let dir = acceptance_root().join("report");
    let _ = fs::create_dir_all(&dir);
    let _ = fs::write(dir.join(format!("criterion-{criterion:02}.txt")), format!("{line}\n"));
    assert!(pass, "{line}");
}

fn progress(msg: &str) {
    let root = acceptance_root();
    let _ = fs::create_dir_all(&root);
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let line = format!("{secs} {msg}\n");
    use std::io::Write;
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(root.join("progress.txt")) {
        let _ = f.write_all(line.as_bytes());
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rand_leaf(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = DetRng::seeded(seed);
    let mut v = vec![0.0; shape.iter().product()];
    rng.fill_normal(&mut v, 0.0, 1.0);
    Tensor::leaf(shape, v, true).unwrap()
}

fn rand_pos_leaf(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = DetRng::seeded(seed);
    let v: Vec<f64> = (0..shape.iter().product()).map(|_| 0.5 + 2.0 * rng.uniform()).collect();
    Tensor::leaf(shape, v, true).unwrap()
}

/// Fixed random projection onto a scalar; a plain mean would null out
/// direction-dependent errors (softmax rows all sum to one, for example).
fn weighted_sum(x: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = DetRng::seeded(seed);
    let mut w = vec![0.0; x.len()];
    rng.fill_normal(&mut w, 0.0, 1.0);
    x.mul(&Tensor::constant(&x.shape(), w)?)?.reduce_sum()
}

// ---------------------------------------------------------------------------
// Criterion 1: autodiff gradients match central finite differences on every
// kernel, on the sparse-autoencoder loss, and on the full combined training
// loss of a 2-layer, d=16, C=16, T=8 model.
// ---------------------------------------------------------------------------

fn kernel_gradchecks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, params: Vec<Tensor>, f: &mut dyn FnMut(&[Tensor]) -> Result<Tensor>| {
        let report = finite_diff_check(|ps| f(ps), &params, 1e-5, 12, 7).unwrap();
        out.push((name, report.max_rel_err));
    };

    push("matmul", vec![rand_leaf(&[3, 4], 1), rand_leaf(&[4, 5], 2)], &mut |ps| {
        weighted_sum(&ps[0].matmul(&ps[1])?, 100)
    });
    push("matmul_tb", vec![rand_leaf(&[3, 4], 3), rand_leaf(&[5, 4], 4)], &mut |ps| {
        weighted_sum(&ps[0].matmul_tb(&ps[1])?, 101)
    });
    push("matmul_ta", vec![rand_leaf(&[4, 3], 5), rand_leaf(&[4, 5], 6)], &mut |ps| {
        weighted_sum(&ps[0].matmul_ta(&ps[1])?, 102)
    });
    push("add", vec![rand_leaf(&[2, 6], 7), rand_leaf(&[2, 6], 8)], &mut |ps| {
        weighted_sum(&ps[0].add(&ps[1])?, 103)
    });
    push("sub", vec![rand_leaf(&[2, 6], 9), rand_leaf(&[2, 6], 10)], &mut |ps| {
        weighted_sum(&ps[0].sub(&ps[1])?, 104)
    });
    push("mul", vec![rand_leaf(&[2, 6], 11), rand_leaf(&[2, 6], 12)], &mut |ps| {
        weighted_sum(&ps[0].mul(&ps[1])?, 105)
    });
    push("scale", vec![rand_leaf(&[2, 6], 13)], &mut |ps| {
        weighted_sum(&ps[0].scale(-1.7)?, 106)
    });
    push("gelu", vec![rand_leaf(&[2, 6], 14)], &mut |ps| weighted_sum(&ps[0].gelu()?, 107));
    push(
        "layer_norm",
        vec![rand_leaf(&[2, 6], 15), rand_pos_leaf(&[6], 16), rand_leaf(&[6], 17)],
        &mut |ps| weighted_sum(&ps[0].layer_norm(&ps[1], &ps[2], 1e-5)?, 108),
    );
    push("softmax", vec![rand_leaf(&[3, 5], 18)], &mut |ps| {
        weighted_sum(&ps[0].softmax()?, 109)
    });
    push("gather", vec![rand_leaf(&[7, 4], 19)], &mut |ps| {
        weighted_sum(&ps[0].gather(&[0, 3, 3, 6, 1])?, 110)
    });
    // magnitudes spaced so the eps probe cannot flip the kept set
    let spaced = Tensor::leaf(
        &[2, 8],
        vec![3.0, -7.0, 0.5, 9.0, -2.0, 1.5, -4.0, 6.0, -8.0, 2.5, 5.0, -0.75, 7.5, -3.5, 1.25, -6.0],
        true,
    )
    .unwrap();
    push("topk_mask", vec![spaced], &mut |ps| weighted_sum(&ps[0].topk_mask(3)?, 111));
    push("slice_rows", vec![rand_leaf(&[5, 3], 20)], &mut |ps| {
        weighted_sum(&ps[0].slice_rows(1, 4)?, 112)
    });
    push("concat_rows", vec![rand_leaf(&[2, 3], 21), rand_leaf(&[3, 3], 22)], &mut |ps| {
        weighted_sum(&concat_rows(&[&ps[0], &ps[1]])?, 113)
    });
    push("reduce_mean", vec![rand_leaf(&[3, 4], 23)], &mut |ps| ps[0].reduce_mean());
    push("reduce_sum", vec![rand_leaf(&[3, 4], 24)], &mut |ps| ps[0].reduce_sum()?.scale(0.5));
    push("log", vec![rand_pos_leaf(&[2, 5], 25)], &mut |ps| weighted_sum(&ps[0].log()?, 114));
    push("log_floored", vec![rand_pos_leaf(&[2, 5], 26)], &mut |ps| {
        weighted_sum(&ps[0].log_floored(1e-6)?, 115)
    });
    push("rsqrt", vec![rand_pos_leaf(&[2, 5], 27)], &mut |ps| {
        weighted_sum(&ps[0].rsqrt(1e-9)?, 116)
    });
    push("cross_entropy", vec![rand_leaf(&[6], 28)], &mut |ps| cross_entropy(&ps[0], 2));
    out
}

fn sae_loss_gradcheck() -> f64 {
    let cfg = SaeConfig { n_concepts: 16, k_sae: 4, lr: 1e-3, steps: 1, batch: 4, seed: 31 };
    let sae = SaeModel::init(8, vec![0.0; 8], &cfg).unwrap();
    let x = {
        let mut rng = DetRng::seeded(32);
        let mut v = vec![0.0; 6 * 8];
        rng.fill_normal(&mut v, 0.0, 1.0);
        Tensor::constant(&[6, 8], v).unwrap()
    };
    let params: Vec<Tensor> = sae.params().into_iter().map(|p| p.tensor).collect();
    let report = finite_diff_check(
        |_| {
            let (_, c) = sae.encode_rows(&x)?;
            let diff = sae.decode_rows(&c)?.sub(&x)?;
            diff.mul(&diff)?.reduce_mean()
        },
        &params,
        1e-5,
        16,
        33,
    )
    .unwrap();
    report.max_rel_err
}

fn toy_selection(rng: &mut DetRng, n_concepts: usize, k: usize) -> ConceptSelection {
    let mut indices = Vec::new();
    while indices.len() < k {
        let c = rng.below(n_concepts);
        if !indices.contains(&c) {
            indices.push(c);
        }
    }
    indices.sort_unstable();
    let scores = indices.iter().map(|_| rng.normal()).collect();
    ConceptSelection { indices, scores }
}

fn full_loss_gradcheck() -> f64 {
    let t = 8;
    let n_concepts = 16;
    let student = init_params(&ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        context_len: t,
        split_layer: 1,
        seed: 41,
    })
    .unwrap();
    let mixer = ConceptMixer::init(16, n_concepts, 4, 42).unwrap();
    let mut rng = DetRng::seeded(43);
    let windows = 2;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut per_window = Vec::new();
    for _ in 0..windows {
        inputs.push((0..t).map(|_| rng.below(32)).collect::<Vec<_>>());
        targets.push((0..t).map(|_| rng.below(32)).collect::<Vec<_>>());
        per_window.push((0..t).map(|_| toy_selection(&mut rng, n_concepts, 3)).collect());
    }
    let labels = LabelStore { per_window, k_attr: 3, n_concepts };
    let mut config = TrainConfig::defaults(Method::Cocomix, 1e-3, 10, windows * t, 44);
    config.lambda = 0.1;
    let trainer = Trainer::new(student, config, Some(mixer), None, Some(labels)).unwrap();
    let batch = Batch { inputs, targets, window_ids: vec![0, 1] };
    let params: Vec<Tensor> = trainer.params().iter().map(|p| p.tensor.clone()).collect();
    let report = finite_diff_check(
        |_| trainer.batch_loss(&batch).map(|l| l.total),
        &params,
        1e-5,
        4,
        45,
    )
    .unwrap();
    report.max_rel_err
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let kernels = kernel_gradchecks();
    let worst_kernel = kernels
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .copied()
        .unwrap();
    let sae_err = sae_loss_gradcheck();
    let full_err = full_loss_gradcheck();
    let elapsed = t0.elapsed().as_secs_f64();
    let all_ok = kernels.iter().all(|(_, e)| *e < GRAD_TOL)
        && sae_err < GRAD_TOL
        && full_err < GRAD_TOL
        && elapsed < C1_BUDGET_SECS;
    verdict(
        1,
        all_ok,
        &format!(
            "{} kernels worst {:.2e} ({}), sae loss {:.2e}, full combined loss {:.2e}, all under {GRAD_TOL:.0e}, {elapsed:.1}s",
            kernels.len(),
            worst_kernel.1,
            worst_kernel.0,
            sae_err,
            full_err
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: the attribution gradient factor matches central finite
// differences of the substituted next-token loss coordinate-wise, and the
// score is exactly the elementwise product of code and gradient.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_attribution_matches_finite_differences() {
    let teacher = init_params(&ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        context_len: 8,
        split_layer: 1,
        seed: 51,
    })
    .unwrap();
    let cfg = SaeConfig { n_concepts: 16, k_sae: 4, lr: 1e-3, steps: 1, batch: 4, seed: 52 };
    let sae = SaeModel::init(16, vec![0.0; 16], &cfg).unwrap();
    let mut rng = DetRng::seeded(53);
    let tokens: Vec<usize> = (0..7).map(|_| rng.below(24)).collect();

    let scores = attribution(&teacher, &sae, &tokens).unwrap();
    assert_eq!(scores.len(), tokens.len() - 1);

    let hidden = teacher.forward_prefix(&tokens[..tokens.len() - 1]).unwrap();
    let hvals = hidden.values();
    let d = 16;
    let eps = 1e-5;
    let mut max_rel = 0.0f64;
    let mut product_exact = true;
    for (t, s) in scores.iter().enumerate() {
        // substituted loss at position t as a function of the decoder input
        let loss_at = |c_vals: &[f64]| -> f64 {
            let c = Tensor::constant(&[1, sae.n_concepts()], c_vals.to_vec()).unwrap();
            let hhat = sae.decode_rows(&c).unwrap();
            let h_sub = if t == 0 {
                hhat
            } else {
                let before = Tensor::constant(&[t, d], hvals[..t * d].to_vec()).unwrap();
                concat_rows(&[&before, &hhat]).unwrap()
            };
            let pos: Vec<usize> = (0..=t).collect();
            let logits = teacher.forward_suffix(&h_sub, &pos).unwrap();
            cross_entropy(&logits.slice_rows(t, t + 1).unwrap(), tokens[t + 1]).unwrap().item()
        };
        let base = sae.encode(&hvals[t * d..(t + 1) * d]).unwrap().c;
        for i in 0..sae.n_concepts() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let rel = (s.g[i] - fd).abs() / fd.abs().max(1e-8);
            max_rel = max_rel.max(rel);
            if s.a[i].to_bits() != (s.c_pre[i] * s.g[i]).to_bits() {
                product_exact = false;
            }
        }
    }
    verdict(
        2,
        max_rel < GRAD_TOL && product_exact,
        &format!(
            "gradient factor max rel err {:.2e} over {} positions x {} concepts, score identity exact: {}",
            max_rel,
            scores.len(),
            sae.n_concepts(),
            product_exact
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: a TopK autoencoder trained on activations synthesized from a
// planted sparse dictionary recovers it: low fraction of variance
// unexplained, exact per-row sparsity, unit decoder columns.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_sae_recovers_planted_dictionary() {
    let t0 = Instant::now();
    let d = 32;
    let n_true = 16;
    let k = 4;
    let rows = 4096;
    let mut rng = DetRng::seeded(61);
    let mut directions = Vec::with_capacity(n_true);
    for _ in 0..n_true {
        let mut v = vec![0.0; d];
        rng.fill_normal(&mut v, 0.0, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        directions.push(v);
    }
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let mut row = vec![0.0; d];
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < k {
            let j = rng.below(n_true);
            if !picked.contains(&j) {
                picked.push(j);
            }
        }
        for j in picked {
            let coeff = 0.5 + rng.uniform();
            for (ri, di) in row.iter_mut().zip(&directions[j]) {
                *ri += coeff * di;
            }
        }
        data.extend_from_slice(&row);
    }
    let dump = ActivationDump { d_con: d, teacher_hash: [0; 32], layer: 1, data };

    let cfg = SaeConfig { n_concepts: 64, k_sae: k, lr: 1e-3, steps: 2000, batch: 128, seed: 62 };
    let (sae, _) = train_sae(&dump, &cfg).unwrap();

    let mut mean = vec![0.0; d];
    for row in dump.data.chunks(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / rows as f64;
        }
    }
    let mut resid = 0.0;
    let mut var = 0.0;
    let mut sparsity_exact = true;
    for row in dump.data.chunks(d) {
        let act = sae.encode(row).unwrap();
        if act.c.iter().filter(|v| **v != 0.0).count() != k {
            sparsity_exact = false;
        }
        let rec = sae.decode(&act.c).unwrap();
        for i in 0..d {
            resid += (row[i] - rec[i]).powi(2);
            var += (row[i] - mean[i]).powi(2);
        }
    }
    let fvu = resid / var;
    let worst_norm_dev = sae
        .decoder_column_norms()
        .iter()
        .map(|n| (n - 1.0).abs())
        .fold(0.0f64, f64::max);
    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        3,
        fvu < SAE_FVU_MAX && sparsity_exact && worst_norm_dev <= DECODER_NORM_TOL && elapsed < C3_BUDGET_SECS,
        &format!(
            "fvu {fvu:.4} (< {SAE_FVU_MAX}), exactly {k} active per row: {sparsity_exact}, decoder norm dev {worst_norm_dev:.1e}, {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: split consistency, interleaving round trip, causality for
// plain and interleaved sequences.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_structural_invariants_hold() {
    let model = init_params(&ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        context_len: 12,
        split_layer: 1,
        seed: 71,
    })
    .unwrap();
    let mut rng = DetRng::seeded(72);
    let tokens: Vec<usize> = (0..12).map(|_| rng.below(24)).collect();

    // split consistency, bit for bit
    let full = model.forward_full(&tokens).unwrap();
    let prefix = model.forward_prefix(&tokens).unwrap();
    let pos: Vec<usize> = (0..tokens.len()).collect();
    let composed = model.forward_suffix(&prefix, &pos).unwrap();
    let split_ok = full
        .values()
        .iter()
        .zip(composed.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // interleave doubles the length and de-interleaves back exactly
    let h = rand_leaf(&[6, 16], 73);
    let c = rand_leaf(&[6, 16], 74);
    let (mixed, mixed_pos) = interleave(&h, &c).unwrap();
    let mut round_trip = mixed.rows() == 12 && mixed_pos == (0..12).collect::<Vec<_>>();
    let mv = mixed.values();
    let hv = h.values();
    let cv = c.values();
    for t in 0..6 {
        for i in 0..16 {
            round_trip &= mv[(2 * t) * 16 + i].to_bits() == hv[t * 16 + i].to_bits();
            round_trip &= mv[(2 * t + 1) * 16 + i].to_bits() == cv[t * 16 + i].to_bits();
        }
    }

    // causality: perturbing token t leaves earlier output rows untouched
    let mixer = ConceptMixer::init(16, 8, 3, 75).unwrap();
    let base_plain = model.forward_full(&tokens).unwrap().values();
    let (_, base_mixed) = cocomix_forward(&model, &mixer, &tokens).unwrap();
    let base_mixed = base_mixed.values();
    let v = 24;
    let mut causal_ok = true;
    for t in 0..tokens.len() {
        let mut perturbed = tokens.clone();
        perturbed[t] = (perturbed[t] + 1) % v;

        let plain = model.forward_full(&perturbed).unwrap().values();
        causal_ok &= plain[..t * v]
            .iter()
            .zip(&base_plain[..t * v])
            .all(|(a, b)| a.to_bits() == b.to_bits());
        // row t itself must react, otherwise the check proves nothing
        causal_ok &= plain[t * v..(t + 1) * v] != base_plain[t * v..(t + 1) * v];

        let (_, mixed) = cocomix_forward(&model, &mixer, &perturbed).unwrap();
        let mixed = mixed.values();
        causal_ok &= mixed[..2 * t * v]
            .iter()
            .zip(&base_mixed[..2 * t * v])
            .all(|(a, b)| a.to_bits() == b.to_bits());
        causal_ok &= mixed[2 * t * v..(2 * t + 1) * v] != base_mixed[2 * t * v..(2 * t + 1) * v];
    }

    verdict(
        4,
        split_ok && round_trip && causal_ok,
        &format!(
            "split bit-identical: {split_ok}, interleave 2T round trip: {round_trip}, causality at every position (plain and mixed): {causal_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared desk-scale experiment for criteria 5, 6, 8, 9.
// ---------------------------------------------------------------------------

struct DeskFixture {
    pipeline: Pipeline,
    /// (method name, seed) -> final held-out perplexity.
    ppl: BTreeMap<(String, u64), f64>,
    c5_secs: f64,
}

impl DeskFixture {
    fn med(&self, method: Method) -> f64 {
        let vals: Vec<f64> = DESK_SEEDS
            .iter()
            .map(|s| self.ppl[&(method.as_str().to_string(), *s)])
            .collect();
        median(&vals)
    }
}

fn last_logged_step(metrics: &Path) -> Option<usize> {
    let text = fs::read_to_string(metrics).ok()?;
    let last = text.lines().filter(|l| !l.trim().is_empty()).last()?;
    last.split(',').next()?.parse().ok()
}

fn run_complete(p: &Pipeline, method: Method, seed: u64) -> bool {
    let done = last_logged_step(&p.paths.run_metrics(method, seed));
    done == Some(p.config.train.steps)
        && p.paths.run_checkpoint(method, seed).join("manifest.json").is_file()
}

fn ensure_run(p: &Pipeline, method: Method, seed: u64) -> f64 {
    if !run_complete(p, method, seed) {
        let dir = p.paths.run_dir(method, seed);
        if dir.exists() {
            fs::remove_dir_all(&dir).expect("clear stale run");
        }
        progress(&format!("pretrain {} seed {seed}", method.as_str()));
        p.pretrain(method, Some(seed), None, false).expect("pretrain");
    }
    let (eval, _) = p.eval_run(method, Some(seed)).expect("eval");
    progress(&format!("eval {} seed {seed}: ppl {:.4}", method.as_str(), eval.report.val_ppl));
    eval.report.val_ppl
}

fn build_desk_fixture() -> DeskFixture {
    let root = acceptance_root().join("desk");
    let config = ExperimentConfig::example(root);
    let pipeline = Pipeline::new(config).expect("desk config");
    let p = &pipeline;
    let t0 = Instant::now();

    if !p.paths.corpus().is_file() {
        progress("gen corpus");
        p.gen_corpus().expect("gen corpus");
    }
    if !p.paths.teacher_dir().join("manifest.json").is_file() {
        progress("train teacher");
        p.train_teacher().expect("train teacher");
    }
    if !p.paths.acts().is_file() {
        progress("dump activations");
        p.dump_acts().expect("dump acts");
    }
    if !p.paths.sae_dir().join("manifest.json").is_file() {
        progress("train sae");
        p.train_sae().expect("train sae");
    }
    for source in [LabelSource::Attribution, LabelSource::Activation] {
        let mode = LabelMode { source, rule: SignRule::Signed };
        if !p.paths.labels(mode).is_file() {
            progress("make labels");
            p.make_labels(mode).expect("make labels");
        }
    }

    let mut ppl = BTreeMap::new();
    for method in [Method::Ntp, Method::Cocomix, Method::CocomixActivationSelect] {
        for seed in DESK_SEEDS {
            ppl.insert((method.as_str().to_string(), seed), ensure_run(p, method, seed));
        }
    }
    let c5_secs = t0.elapsed().as_secs_f64();
    progress(&format!("directional arms done in {c5_secs:.0}s"));

    for method in [Method::CocomixPredOnly, Method::CocomixInsertOnly] {
        for seed in DESK_SEEDS {
            ppl.insert((method.as_str().to_string(), seed), ensure_run(p, method, seed));
        }
    }
    progress("desk fixture complete");
    DeskFixture { pipeline, ppl, c5_secs }
}

fn fixture() -> &'static DeskFixture {
    static FIXTURE: OnceLock<DeskFixture> = OnceLock::new();
    FIXTURE.get_or_init(build_desk_fixture)
}

// ---------------------------------------------------------------------------
// Criterion 5: at desk scale, concept-conditioned pretraining matches or
// beats the plain objective on held-out perplexity, and attribution-based
// concept selection matches or beats activation-based selection.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_directional_benefit_holds() {
    let f = fixture();
    let ntp = f.med(Method::Ntp);
    let mix = f.med(Method::Cocomix);
    let act = f.med(Method::CocomixActivationSelect);
    let ok = mix <= ntp && mix <= act && f.c5_secs < C5_BUDGET_SECS;
    verdict(
        5,
        ok,
        &format!(
            "median over {} seeds: cocomix {mix:.3} vs ntp {ntp:.3} (ratio {:.4}), attribution {mix:.3} vs activation {act:.3} (ratio {:.4}), built in {:.0}s",
            DESK_SEEDS.len(),
            mix / ntp,
            mix / act,
            f.c5_secs
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: prediction-only and insertion-only arms run to completion on
// identical seeds and data and emit comparable metrics; the combined method's
// median final perplexity is reported against each (directional, not gated).
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_component_arms_complete_and_compare() {
    let f = fixture();
    let p = &f.pipeline;
    let mut comparable = true;
    let mut batch_tokens: Vec<u64> = Vec::new();
    for method in [Method::Cocomix, Method::CocomixPredOnly, Method::CocomixInsertOnly] {
        for seed in DESK_SEEDS {
            comparable &= run_complete(p, method, seed);
            let trace = PplTrace::from_metrics_csv(&p.paths.run_metrics(method, seed)).expect("trace");
            batch_tokens.push(trace.points.last().map(|pt| pt.0 as u64).unwrap_or(0));
        }
    }
    // same token budget everywhere means the traces are directly comparable
    comparable &= batch_tokens.iter().all(|t| *t == batch_tokens[0] && *t > 0);

    let full = f.med(Method::Cocomix);
    let pred = f.med(Method::CocomixPredOnly);
    let insert = f.med(Method::CocomixInsertOnly);
    verdict(
        6,
        comparable,
        &format!(
            "all arms completed on shared seeds/data: {comparable}; median final ppl full {full:.3}, pred-only {pred:.3}, insert-only {insert:.3}; full <= pred-only: {}, full <= insert-only: {} (reported, not gated)",
            full <= pred,
            full <= insert
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: baseline arms behave correctly: the distillation KL is zero
// when the student copies the teacher and never negative, the pause arm
// interleaves to length 2T, and the direct hidden-state arms reach zero
// auxiliary loss when the predictor is forced to emit the teacher state.
// ---------------------------------------------------------------------------

fn toy_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        context_len: 8,
        split_layer: 1,
        seed,
    }
}

fn toy_batch(seed: u64, windows: usize, t: usize, vocab: usize) -> Batch {
    let mut rng = DetRng::seeded(seed);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..windows {
        inputs.push((0..t).map(|_| rng.below(vocab)).collect::<Vec<_>>());
        targets.push((0..t).map(|_| rng.below(vocab)).collect::<Vec<_>>());
    }
    Batch { inputs, targets, window_ids: (0..windows).collect() }
}

/// Teacher whose hidden rows are position-independent: tied token rows and a
/// zero positional table keep every row of the prefix output identical.
fn constant_row_teacher(seed: u64) -> TransformerModel {
    let teacher = init_params(&toy_model_config(seed)).unwrap();
    let mut rng = DetRng::seeded(seed + 1);
    let mut row = vec![0.0; 16];
    rng.fill_normal(&mut row, 0.0, 0.5);
    for p in teacher.named_params() {
        if p.name == "tok_emb" {
            let tiled: Vec<f64> = (0..24).flat_map(|_| row.clone()).collect();
            p.tensor.set_values(&tiled).unwrap();
        } else if p.name == "pos_emb" {
            p.tensor.apply(|v| v.fill(0.0));
        }
    }
    teacher
}

#[test]
fn criterion_07_baseline_arms_behave_correctly() {
    let t = 8;
    let batch = toy_batch(81, 2, t, 24);

    // distillation: identical models give exactly zero KL; random pairs never
    // go negative
    let mut kd_cfg = TrainConfig::defaults(Method::Kd, 1e-3, 10, 2 * t, 82);
    kd_cfg.lambda_kd = 1.0;
    let copy_trainer = Trainer::new(
        init_params(&toy_model_config(90)).unwrap(),
        kd_cfg.clone(),
        None,
        Some(init_params(&toy_model_config(90)).unwrap()),
        None,
    )
    .unwrap();
    let copy_kl = copy_trainer.batch_loss(&batch).unwrap().aux;
    let mut min_random_kl = f64::INFINITY;
    for (s_student, s_teacher) in [(91, 92), (93, 94), (95, 96)] {
        let trainer = Trainer::new(
            init_params(&toy_model_config(s_student)).unwrap(),
            kd_cfg.clone(),
            None,
            Some(init_params(&toy_model_config(s_teacher)).unwrap()),
            None,
        )
        .unwrap();
        min_random_kl = min_random_kl.min(trainer.batch_loss(&batch).unwrap().aux);
    }
    let kd_ok = copy_kl == 0.0 && min_random_kl >= 0.0;

    // pause arm: inserted slots double the sequence
    let mut pause_cfg = TrainConfig::defaults(Method::Pause, 1e-3, 10, 2 * t, 83);
    pause_cfg.lambda_kd = 0.0;
    let pause_trainer =
        Trainer::new(init_params(&toy_model_config(97)).unwrap(), pause_cfg, None, None, None).unwrap();
    let fwd = pause_trainer.window_forward(&batch.inputs[0]).unwrap();
    let pause_ok = fwd.logits.rows() == 2 * t && fwd.at_slots;

    // direct arms: force the predictor output to equal the teacher hidden
    // state and the auxiliary loss must vanish
    let mut direct_ok = true;
    let mut worst_direct = 0.0f64;
    for method in [Method::DirectL1, Method::DirectL2, Method::DirectCos] {
        let teacher = constant_row_teacher(98);
        let h_con = teacher.forward_prefix(&batch.inputs[0]).unwrap();
        let hv = h_con.values();
        let row0 = &hv[..16];
        assert!(
            hv.chunks(16).all(|r| r.iter().zip(row0).all(|(a, b)| a.to_bits() == b.to_bits())),
            "teacher rows must be identical for this construction"
        );
        let cfg = TrainConfig::defaults(method, 1e-3, 10, 2 * t, 84);
        let trainer = Trainer::new(
            init_params(&toy_model_config(99)).unwrap(),
            cfg,
            None,
            Some(teacher),
            None,
        )
        .unwrap();
        let dp = trainer.direct.as_ref().expect("direct arm");
        dp.w2.apply(|v| v.fill(0.0));
        dp.b2.set_values(row0).unwrap();
        let aux = trainer.batch_loss(&batch).unwrap().aux;
        worst_direct = worst_direct.max(aux.abs());
        direct_ok &= match method {
            Method::DirectCos => aux.abs() < COS_ZERO_TOL,
            _ => aux == 0.0,
        };
    }

    verdict(
        7,
        kd_ok && pause_ok && direct_ok,
        &format!(
            "copy-teacher kl {copy_kl:.1e}, min random kl {min_random_kl:.3} (>= 0), pause length 2T at slots: {pause_ok}, forced direct aux worst {worst_direct:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: amplifying the top concept of a planted topic raises that
// topic's token frequency monotonically in the median, multiplier 1 is a
// bit-exact no-op, and teacher-side steering moves the same topic the same
// way.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_steering_shifts_topic_frequency_monotonically() {
    let f = fixture();
    let p = &f.pipeline;
    let corpus = p.load_corpus().expect("corpus");
    let (_, holdout) = p.split(&corpus).expect("split");
    let trainer = p.load_run(Method::Cocomix, Some(1)).expect("trained run");
    let student = &trainer.student;
    let mixer = trainer.mixer.as_ref().expect("mixer");
    let prompt = holdout.docs[0][..4].to_vec();

    let assoc = association_from_student(student, mixer, &corpus).expect("association");
    let best = assoc
        .iter()
        .max_by(|a, b| a.margin.partial_cmp(&b.margin).unwrap())
        .expect("nonempty");
    let topic = best.topic;
    let concept = best.concept;
    let block = p.config.corpus.topic_block(topic);

    let gen_seeds = [1u64, 2, 3, 4, 5];
    let multipliers = [0.0, 2.0, 5.0, 10.0];
    let mut medians = Vec::new();
    for m in multipliers {
        let spec = SteerSpec {
            concept_index: concept,
            multiplier: m,
            target: SteerTarget::StudentLogits,
            after_topk: false,
        };
        let freqs: Vec<f64> = gen_seeds
            .iter()
            .map(|s| {
                steer_point(student, mixer, &prompt, 256, &spec, block.clone(), *s)
                    .expect("steer point")
                    .topic_k_frequency
            })
            .collect();
        medians.push(median(&freqs));
    }
    let monotone = medians.windows(2).all(|w| w[0] <= w[1]);

    let unit = SteerSpec {
        concept_index: concept,
        multiplier: 1.0,
        target: SteerTarget::StudentLogits,
        after_topk: false,
    };
    let mut noop_exact = true;
    for seed in [11u64, 12] {
        let plain = generate(student, mixer, &prompt, 128, 1.0, None, seed).expect("generate");
        let steered = generate(student, mixer, &prompt, 128, 1.0, Some(&unit), seed).expect("generate");
        noop_exact &= plain == steered;
    }

    let teacher = p.load_teacher().expect("teacher");
    let (sae, _) = load_sae(&p.paths.sae_dir()).expect("sae");
    let sae_assoc = association_from_sae(&teacher, &sae, &corpus).expect("sae association");
    let sae_concept = sae_assoc
        .iter()
        .find(|tc| tc.topic == topic)
        .expect("topic associated")
        .concept;
    let teacher_freq = |mult: f64| -> f64 {
        let spec = SteerSpec {
            concept_index: sae_concept,
            multiplier: mult,
            target: SteerTarget::TeacherSaeSpace,
            after_topk: false,
        };
        let freqs: Vec<f64> = gen_seeds
            .iter()
            .map(|s| {
                let sample = steer_teacher(&teacher, &sae, &prompt, 256, 1.0, &spec, *s).expect("teacher sample");
                block_frequency(&sample, block.clone())
            })
            .collect();
        median(&freqs)
    };
    let teacher_low = teacher_freq(0.0);
    let teacher_high = teacher_freq(10.0);
    let teacher_same_direction = teacher_high >= teacher_low;

    verdict(
        8,
        monotone && noop_exact && teacher_same_direction,
        &format!(
            "topic {topic} concept {concept}: median frequency {:.3} -> {:.3} -> {:.3} -> {:.3} over x{{0,2,5,10}} (monotone: {monotone}), multiplier 1 bit-exact no-op: {noop_exact}, teacher-side {:.3} -> {:.3} (same direction: {teacher_same_direction})",
            medians[0], medians[1], medians[2], medians[3], teacher_low, teacher_high
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: the compression column-norm analysis satisfies the Frobenius
// identity exactly and reports the fraction of near-dead columns.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_compression_norms_satisfy_frobenius_identity() {
    let f = fixture();
    let trainer = f.pipeline.load_run(Method::Cocomix, Some(1)).expect("trained run");
    let mixer = trainer.mixer.as_ref().expect("mixer");
    let norms = compression_column_norms(mixer, 1e-2);
    let ordered_sum: f64 = norms.norm_sq.iter().sum();
    let identity_exact = ordered_sum.to_bits() == norms.frobenius_sq.to_bits();
    verdict(
        9,
        identity_exact,
        &format!(
            "frobenius identity exact: {identity_exact}; fraction of columns below norm {:.0e}: {:.4} (large-scale reference value 0.058, not gated)",
            norms.tau, norms.fraction_below
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: every stage re-runs byte-identically from its manifest alone,
// and an interrupted run resumed from its checkpoint matches the
// uninterrupted run bit for bit over the final ten steps.
// ---------------------------------------------------------------------------

fn snapshot(paths: &[PathBuf]) -> Vec<(PathBuf, Vec<u8>)> {
    paths
        .iter()
        .map(|p| (p.clone(), fs::read(p).unwrap_or_else(|e| panic!("read {}: {e}", p.display()))))
        .collect()
}

fn rerun_matches(report: &StageReport) -> bool {
    let before = snapshot(&report.outputs);
    rerun_from_manifest(&report.manifest).expect("rerun");
    before.iter().all(|(p, bytes)| fs::read(p).map(|b| &b == bytes).unwrap_or(false))
}

#[test]
fn criterion_10_stages_rerun_byte_identically() {
    let root = acceptance_root().join("tiny");
    if root.exists() {
        fs::remove_dir_all(&root).expect("clear tiny dir");
    }
    let mut config = ExperimentConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml").as_path())
        .expect("tiny config");
    config.out_dir = root;
    let p = Pipeline::new(config).expect("tiny pipeline");

    let mut reports = vec![
        ("gen-corpus", p.gen_corpus().expect("gen")),
        ("train-teacher", p.train_teacher().expect("teacher")),
        ("dump-acts", p.dump_acts().expect("acts")),
        ("train-sae", p.train_sae().expect("sae")),
        (
            "make-labels",
            p.make_labels(LabelMode { source: LabelSource::Attribution, rule: SignRule::Signed })
                .expect("labels"),
        ),
    ];
    reports.push(("pretrain", p.pretrain(Method::Cocomix, None, None, false).expect("pretrain")));
    reports.push(("pretrain-baseline", p.pretrain(Method::Ntp, None, None, false).expect("pretrain")));
    reports.push(("eval", p.eval_run(Method::Cocomix, None).expect("eval").1));
    let steer_args = SteerArgs {
        topic: 0,
        concept: None,
        multipliers: vec![0.0, 2.0],
        n_tokens: 24,
        gen_seeds: vec![1, 2],
        after_topk: false,
        teacher_side: false,
    };
    reports.push(("steer", p.steer_run(Method::Cocomix, None, &steer_args).expect("steer")));
    reports.push((
        "analyze-compression",
        p.analyze_compression(Method::Cocomix, None, 1e-2).expect("compression").1,
    ));
    let run_a = p.run_name(Method::Ntp, None);
    let run_b = p.run_name(Method::Cocomix, None);
    reports.push(("compare", p.compare(&run_a, &run_b, 200.0).expect("compare").1));

    let mut all_match = true;
    let mut failed = Vec::new();
    for (name, report) in &reports {
        if !rerun_matches(report) {
            all_match = false;
            failed.push(*name);
        }
    }

    // interrupted plus resumed equals uninterrupted, bit for bit, with the
    // resume covering the final 10 steps
    let steps = p.config.train.steps;
    let stop = steps - 10;
    let seed = 7;
    let interrupted_dir = p.paths.run_dir(Method::Ntp, seed);
    p.pretrain(Method::Ntp, Some(seed), Some(stop), false).expect("partial");
    p.pretrain(Method::Ntp, Some(seed), None, true).expect("resume");
    let artifacts = [
        p.paths.run_metrics(Method::Ntp, seed),
        p.paths.run_checkpoint(Method::Ntp, seed).join("manifest.json"),
        p.paths.run_checkpoint(Method::Ntp, seed).join("payload.bin"),
    ];
    let resumed = snapshot(&artifacts.to_vec());
    fs::remove_dir_all(&interrupted_dir).expect("clear resumed run");
    p.pretrain(Method::Ntp, Some(seed), None, false).expect("uninterrupted");
    let resume_ok = resumed
        .iter()
        .all(|(path, bytes)| fs::read(path).map(|b| &b == bytes).unwrap_or(false));

    verdict(
        10,
        all_match && resume_ok,
        &format!(
            "{} stages reproduced byte-identically from manifests{}; checkpoint resume bit-identical over final 10 steps: {resume_ok}",
            reports.len(),
            if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
        ),
    );
}
