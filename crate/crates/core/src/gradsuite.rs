//! Finite-difference suite over every differentiable operation and the
//! composite training losses, run in 64-bit mode.

use crate::config::RunConfig;
use crate::data::{generate_synthetic_cohort, SynthConfig};
use crate::error::Result;
use crate::model::{Net, NoteFusion, Pass};
use crate::pipeline::Artifacts;
use crate::tensor::{grad_check, grad_check_params, BinaryLossKind, Rng, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-6;
/// Step for the whole-model checks, whose losses sum many terms.
pub const FD_EPS_COMPOSITE: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Noise added to the initial parameters before the whole-model checks;
/// at the 0.02 init scale attention gradients sit near the rounding floor.
pub const CONDITION_STD: f64 = 0.1;

/// Worst relative error of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries bounded away from zero so kinks stay out of reach of the probe.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for x in t.data_mut() {
        *x = x.signum() * (x.abs() + 0.1);
    }
    t
}

fn weighted_sum(t: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = t.input(Tensor::randn(&shape, 1.0, &mut Rng::new(seed)));
    let p = t.mul(y, w)?;
    t.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>;

fn op_checks(rng: &mut Rng) -> Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> {
    let (b, t, d) = (2, 3, 4);
    let x = randn(&[b, t, d], rng);
    let y = randn(&[b, t, d], rng);
    let row = randn(&[b, d], rng);
    let suffix = randn(&[t, d], rng);
    let w = randn(&[d, 3], rng);
    let bias = randn(&[3], rng);
    let conv_w = randn(&[5, d, 3], rng);
    let conv_b = randn(&[5], rng);
    let gain = randn(&[d], rng);
    let shift = randn(&[d], rng);
    let mask = vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
    let valid = vec![true, true, false, true, true, true];
    let running_mean: Vec<f64> = randn(&[d], rng).data().to_vec();
    let running_var: Vec<f64> = randn(&[d], rng).data().iter().map(|v| v.abs() + 0.5).collect();
    let q = randn(&[b, t, d], rng);
    let k = randn(&[b, 4, d], rng);
    let v = randn(&[b, 4, d], rng);
    let sentinel = randn(&[d], rng);
    let key_valid = vec![true, false, true, false, false, false, false, false];
    let table = randn(&[7, d], rng);
    let logits = randn(&[b * t, 6], rng);
    let probs = Tensor::new(vec![5], vec![0.2, 0.7, 0.45, 0.9, 0.05]).unwrap();
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0];
    let present = [true, true, false, true, true];
    let kind_focal = BinaryLossKind::Focal { gamma: 2.0, alpha: 0.25 };
    let src = randn(&[1], rng);
    vec![
        ("add", Box::new(|tp, v| { let o = tp.add(v[0], v[1])?; weighted_sum(tp, o, 1) }), vec![x.clone(), y.clone()]),
        ("sub", Box::new(|tp, v| { let o = tp.sub(v[0], v[1])?; weighted_sum(tp, o, 2) }), vec![x.clone(), y.clone()]),
        ("mul", Box::new(|tp, v| { let o = tp.mul(v[0], v[1])?; weighted_sum(tp, o, 3) }), vec![x.clone(), y.clone()]),
        ("scale", Box::new(|tp, v| { let o = tp.scale(v[0], -1.7)?; weighted_sum(tp, o, 4) }), vec![x.clone()]),
        ("add_suffix", Box::new(|tp, v| { let o = tp.add_suffix(v[0], v[1])?; weighted_sum(tp, o, 5) }), vec![x.clone(), suffix]),
        ("add_expand_mid", Box::new(|tp, v| { let o = tp.add_expand_mid(v[0], v[1])?; weighted_sum(tp, o, 6) }), vec![x.clone(), row.clone()]),
        ("concat_mid", Box::new(|tp, v| { let o = tp.concat_mid(v[0], v[1])?; weighted_sum(tp, o, 7) }), vec![x.clone(), row.clone()]),
        ("mask_rows", Box::new(move |tp, v| { let o = tp.mask_rows(v[0], &mask)?; weighted_sum(tp, o, 8) }), vec![x.clone()]),
        ("matmul", Box::new(|tp, v| { let o = tp.matmul(v[0], v[1])?; weighted_sum(tp, o, 9) }), vec![randn(&[3, d], rng), w.clone()]),
        ("linear", Box::new(|tp, v| { let o = tp.linear(v[0], v[1], Some(v[2]))?; weighted_sum(tp, o, 10) }), vec![x.clone(), w.clone(), bias]),
        ("linear_no_bias", Box::new(|tp, v| { let o = tp.linear(v[0], v[1], None)?; weighted_sum(tp, o, 11) }), vec![x.clone(), w]),
        ("conv1d", Box::new(|tp, v| { let o = tp.conv1d(v[0], v[1], v[2])?; weighted_sum(tp, o, 12) }), vec![x.clone(), conv_w, conv_b]),
        ("layer_norm", Box::new(|tp, v| { let o = tp.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(tp, o, 13) }), vec![x.clone(), gain.clone(), shift.clone()]),
        ("batch_norm_train", {
            let valid = valid.clone();
            Box::new(move |tp, v| { let (o, _) = tp.batch_norm(v[0], v[1], v[2], &valid, None, 1e-5)?; weighted_sum(tp, o, 14) })
        }, vec![x.clone(), gain.clone(), shift.clone()]),
        ("batch_norm_eval", Box::new(move |tp, v| {
            let (o, _) = tp.batch_norm(v[0], v[1], v[2], &valid, Some((&running_mean, &running_var)), 1e-5)?;
            weighted_sum(tp, o, 15)
        }), vec![x.clone(), gain, shift]),
        ("relu", Box::new(|tp, v| { let o = tp.relu(v[0])?; weighted_sum(tp, o, 16) }), vec![off_zero(&[b, t, d], rng)]),
        ("gelu", Box::new(|tp, v| { let o = tp.gelu(v[0])?; weighted_sum(tp, o, 17) }), vec![x.clone()]),
        ("sigmoid", Box::new(|tp, v| { let o = tp.sigmoid(v[0])?; weighted_sum(tp, o, 18) }), vec![x.clone()]),
        ("softmax", Box::new(|tp, v| { let o = tp.softmax(v[0])?; weighted_sum(tp, o, 19) }), vec![x.clone()]),
        ("dropout", Box::new(|tp, v| { let o = tp.dropout(v[0], 0.3, &mut Rng::new(5))?; weighted_sum(tp, o, 20) }), vec![x.clone()]),
        ("attention_causal", Box::new(|tp, v| { let o = tp.attention(v[0], v[0], v[0], None, true, 2, None)?; weighted_sum(tp, o, 21) }), vec![q.clone()]),
        ("attention_masked_sentinel", Box::new(move |tp, v| {
            let o = tp.attention(v[0], v[1], v[2], Some(&key_valid), false, 2, Some(v[3]))?;
            weighted_sum(tp, o, 22)
        }), vec![q, k, v, sentinel]),
        ("gather_rows", Box::new(|tp, v| { let o = tp.gather_rows(v[0], &[0, 2, 2, 5, 1])?; weighted_sum(tp, o, 23) }), vec![x.clone()]),
        ("embedding", Box::new(|tp, v| { let o = tp.embedding(v[0], &[3, 0, 3, 6])?; weighted_sum(tp, o, 24) }), vec![table]),
        ("set_block", Box::new(move |tp, v| { let o = tp.set_block(v[0], v[1], &[0, 2, 4], d - 1)?; weighted_sum(tp, o, 25) }), vec![x.clone(), src]),
        ("reshape", Box::new(move |tp, v| { let o = tp.reshape(v[0], &[b * t, d])?; weighted_sum(tp, o, 26) }), vec![x.clone()]),
        ("mean", Box::new(|tp, v| { let o = tp.scale(v[0], 1.0)?; tp.mean(o) }), vec![x.clone()]),
        ("sum_squares", Box::new(|tp, v| tp.sum_squares(v[0])), vec![x.clone()]),
        ("mse", Box::new(|tp, v| tp.mse(v[0], v[1])), vec![x, y]),
        ("cross_entropy", Box::new(|tp, v| tp.cross_entropy(v[0], &[0, 5, 2, 2, 1, 4], Some(&[true, true, false, true, true, true]))), vec![logits]),
        ("bce", Box::new(move |tp, v| tp.binary_loss(v[0], &targets, &present, BinaryLossKind::Bce)), vec![probs.clone()]),
        ("focal", Box::new(move |tp, v| tp.binary_loss(v[0], &targets, &present, kind_focal)), vec![probs]),
    ]
}

/// Run configuration of the tiny model used for the composite checks.
pub fn suite_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    let m = &mut c.model;
    m.seq_len = 6;
    m.conv1_channels = 6;
    m.d_model = 8;
    m.enc_layers = 1;
    m.enc_heads = 2;
    m.enc_ffn = 12;
    m.note_dim = 10;
    m.note_max_tokens = 16;
    m.dec_layers = 2;
    m.self_heads = 2;
    m.cross_heads = 2;
    m.dec_ffn = 12;
    m.vocab = 270;
    m.max_len = 10;
    m.dropout = 0.1;
    c.data.synth_admissions = 8;
    c
}

/// Composite pretraining loss (all three objectives, dropout on, batch
/// statistics) and fine-tuning loss on a 2-admission micro-batch, checked
/// over up to `per_tensor` entries of every parameter.
pub fn composite_checks(seed: u64, per_tensor: usize, fusion: NoteFusion) -> Result<Vec<SuiteEntry>> {
    let mut cfg = suite_config(seed);
    cfg.model.note_fusion = fusion;
    let records = generate_synthetic_cohort(cfg.data.synth_admissions, seed, &SynthConfig::default());
    let art = Artifacts::fit(&records, &cfg)?;
    let notes = art.note_provider(&cfg)?;
    let data = art.dataset(&records[..2], &cfg, &notes)?;
    let batch = data.batch(&[0, 1])?;
    let mut store = crate::model::init_params(&cfg.model, seed)?.cast::<f64>();
    let mut jitter = Rng::new(seed ^ 6);
    for p in store.iter_mut().filter(|p| p.trainable()) {
        for x in p.tensor.data_mut() {
            *x += jitter.normal() * CONDITION_STD;
        }
    }
    let weights = cfg.loss_weights();
    let model = cfg.model.clone();
    let mut out = Vec::new();
    let pre = grad_check_params(
        &store,
        |tape, s| {
            let net = Net::new(&model, s);
            let mut drop = Rng::new(seed ^ 1);
            let mut mask = Rng::new(seed ^ 2);
            let mut pass = Pass::train(&mut drop);
            let terms = net.pretrain_loss(tape, &batch.timeline, &batch.notes, &batch.tokens, 1, &weights, &mut mask, &mut pass)?;
            Ok(terms.total)
        },
        FD_EPS_COMPOSITE,
        per_tensor,
        &mut Rng::new(seed ^ 3),
    )?;
    let worst = pre.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    out.push(SuiteEntry {
        name: format!("pretrain_loss[{}]", fusion.as_str()),
        max_rel_error: worst,
    });
    let mut labels = batch.labels.clone();
    labels[0].hf = Some(1);
    labels[1].hf = Some(0);
    let ft = grad_check_params(
        &store,
        |tape, s| {
            let net = Net::new(&model, s);
            let mut drop = Rng::new(seed ^ 4);
            let mut pass = Pass::train(&mut drop);
            let (mem, _) = net.encode_batch(tape, &batch.timeline, &batch.notes, &mut pass)?;
            let probs = net.classify(tape, &mem, &mut pass)?;
            Ok(net.finetune_loss(tape, probs, &labels, &weights)?.total)
        },
        FD_EPS_COMPOSITE,
        per_tensor,
        &mut Rng::new(seed ^ 5),
    )?;
    out.push(SuiteEntry {
        name: format!("finetune_loss[{}]", fusion.as_str()),
        max_rel_error: ft.iter().map(|p| p.max_rel_error).fold(0.0, f64::max),
    });
    Ok(out)
}

/// Every operation check followed by the composite checks.
pub fn run_suite(seed: u64, per_tensor: usize) -> Result<Vec<SuiteEntry>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (name, f, inputs) in op_checks(&mut rng) {
        out.push(SuiteEntry {
            name: name.to_string(),
            max_rel_error: grad_check(f, &inputs, FD_EPS)?,
        });
    }
    for fusion in [NoteFusion::Add, NoteFusion::Token] {
        out.extend(composite_checks(seed, per_tensor, fusion)?);
    }
    Ok(out)
}
