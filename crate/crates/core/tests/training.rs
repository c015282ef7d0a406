mod common;

use std::collections::BTreeMap;

use common::{tiny_config, tiny_data};
use gdp::config::RunConfig;
use gdp::model::{apply_bn_updates, init_params, Net, Pass};
use gdp::objectives::finetune_loss;
use gdp::tensor::{ParamGroup, ParamStore, Rng, Tape, Tensor};
use gdp::training::*;
use gdp::Error;

fn single(name: &str, value: f32, group: ParamGroup, decay: bool) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert(name, Tensor::full(&[2], value), group, decay);
    s
}

const LR: GroupLr = GroupLr {
    backbone: 0.1,
    scratch: 0.3,
};

#[test]
fn adamw_first_step_is_decay_plus_unit_sign_step() {
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
    let mut s = single("w", 1.0, ParamGroup::Backbone, true);
    let id = s.id("w").unwrap();
    opt.step(&mut s, &[(id, vec![0.5, -2.0])], LR).unwrap();
    let w = s.get("w").unwrap().tensor.data();
    let decayed = 1.0 * (1.0 - 0.1 * 0.01);
    assert!((w[0] as f64 - (decayed - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-6);
    assert!((w[1] as f64 - (decayed + 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-6);
    assert_eq!(opt.state["w"].t, 1);
    assert_eq!(opt.steps, 1);
}

#[test]
fn adamw_uses_the_group_rate_and_respects_decay_flag() {
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
    let mut s = ParamStore::new();
    let a = s.insert("a", Tensor::full(&[1], 1.0), ParamGroup::Backbone, false);
    let b = s.insert("b", Tensor::full(&[1], 1.0), ParamGroup::Scratch, true);
    let c = s.insert("c", Tensor::full(&[1], 1.0), ParamGroup::Scratch, false);
    opt.step(&mut s, &[(a, vec![1.0]), (b, vec![0.0]), (c, vec![0.0])], LR).unwrap();
    assert!((s.by_id(a).tensor.data()[0] - 0.9).abs() < 1e-6);
    // A zero gradient leaves only decoupled decay.
    assert!((s.by_id(b).tensor.data()[0] as f64 - (1.0 - 0.3 * 0.01)).abs() < 1e-7);
    assert_eq!(s.by_id(c).tensor.data()[0], 1.0);
}

#[test]
fn adamw_skips_frozen_and_rejects_non_finite_gradients() {
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
    let mut s = single("w", 1.0, ParamGroup::Scratch, true);
    s.insert("v", Tensor::full(&[2], 1.0), ParamGroup::Scratch, true);
    s.set_trainable(|n| n != "w");
    let (w, v) = (s.id("w").unwrap(), s.id("v").unwrap());
    opt.step(&mut s, &[(w, vec![1.0, 1.0]), (v, vec![1.0, 1.0])], LR).unwrap();
    assert_eq!(s.get("w").unwrap().tensor.data(), &[1.0, 1.0]);
    assert!(!opt.state.contains_key("w"));
    let before = s.clone();
    let err = opt.step(&mut s, &[(v, vec![0.1, 0.2]), (w, vec![f32::NAN, 0.0])], LR).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
    assert_eq!(s.get("v").unwrap().tensor.data(), before.get("v").unwrap().tensor.data());
}

#[test]
fn schedule_warms_up_then_decays_to_zero() {
    assert_eq!(lr_at(0, 1e-3, 1000, 50_000).unwrap(), 0.0);
    assert_eq!(lr_at(500, 1e-3, 1000, 50_000).unwrap(), 5e-4);
    assert_eq!(lr_at(1000, 1e-3, 1000, 50_000).unwrap(), 1e-3);
    assert!((lr_at(25_500, 1e-3, 1000, 50_000).unwrap() - 5e-4).abs() < 1e-15);
    assert!(lr_at(50_000, 1e-3, 1000, 50_000).unwrap().abs() < 1e-18);
    let mut prev = f64::INFINITY;
    for s in (1000..=50_000).step_by(500) {
        let lr = lr_at(s, 1e-3, 1000, 50_000).unwrap();
        assert!(lr <= prev);
        prev = lr;
    }
    assert!(matches!(lr_at(0, 1e-3, 10, 10), Err(Error::Config { .. })));
}

/// Learnable entries in one decoder layer at model width `d` and FFN `f`.
fn decoder_layer_size(d: usize, f: usize) -> usize {
    let attention = 4 * (d * d + d);
    3 * 2 * d + 2 * attention + d + (d * f + f) + (f * d + d)
}

#[test]
fn unfreezing_schedule_counts_at_paper_scale() {
    let cfg = RunConfig::paper_scale();
    let m = &cfg.model;
    let store = init_params(m, 0).unwrap();
    let plan = FreezePlan::from_config(&cfg.train);
    let count = |epoch| {
        let mut s = store.clone();
        plan.apply(&mut s, epoch, m.dec_layers);
        s.num_trainable()
    };
    let size = |prefix: &str| store.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.tensor.numel()).sum::<usize>();
    let d = m.d_model;
    let decoder = (2 * m.vocab + m.max_len) * d + m.dec_layers * decoder_layer_size(d, m.dec_ffn) + 2 * d;
    assert_eq!(size("decoder."), decoder);
    let heads_aux = size("mfp.") + size("ntp.");
    let note_table = m.vocab * m.note_dim;
    let learnable = store.num_learnable();

    let e1 = learnable - decoder - heads_aux - note_table;
    let e3 = e1 + note_table + 6 * decoder_layer_size(d, m.dec_ffn) + 2 * d;
    let e6 = learnable - heads_aux;
    assert_eq!([count(1), count(2), count(3), count(5), count(6)], [e1, e1, e3, e3, e6]);
}

#[test]
fn early_stop_tracks_best_and_patience() {
    let mut s = EarlyStop::new(2, true);
    assert_eq!(s.update(1, 0.6), (true, false));
    assert_eq!(s.update(2, 0.5), (false, false));
    assert_eq!(s.update(3, 0.7), (true, false));
    assert_eq!(s.update(4, 0.7), (false, false));
    assert_eq!(s.update(5, 0.1), (false, true));
    assert_eq!(s.best_epoch, 3);
}

fn warmed(cfg: &RunConfig, data: &Dataset) -> ParamStore<f32> {
    let mut store = init_params(&cfg.model, cfg.seed).unwrap();
    let b = data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap();
    let updates = {
        let net = Net::new(&cfg.model, &store);
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let mut pass = Pass::train(&mut rng);
        net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut pass).unwrap();
        pass.bn_updates
    };
    apply_bn_updates(&mut store, &updates).unwrap();
    store
}

#[test]
fn accumulated_micro_batches_equal_the_full_batch_gradient() {
    let mut cfg = tiny_config(21);
    cfg.model.dropout = 0.0;
    let (_, data) = tiny_data(&cfg, 24);
    let store = warmed(&cfg, &data);
    let idx: Vec<usize> = (0..data.len())
        .filter(|&i| data.labels[i].hf.is_some() && data.labels[i].t2dm.is_some() && data.labels[i].readmit_30d.is_some())
        .take(4)
        .collect();
    assert_eq!(idx.len(), 4);
    let weights = cfg.loss_weights();
    let grads_of = |rows: &[usize]| {
        let b = data.batch(rows).unwrap();
        let net = Net::new(&cfg.model, &store);
        let mut tape = Tape::new();
        let mut rng = Rng::new(1);
        let mut pass = Pass::train(&mut rng);
        pass.bn_batch_stats = false;
        let (mem, _) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut pass).unwrap();
        let probs = net.classify(&mut tape, &mem, &mut pass).unwrap();
        let loss = finetune_loss(&mut tape, probs, &b.labels, &weights).unwrap();
        tape.backward(loss.total).unwrap()
    };
    let full = grads_of(&idx);
    let mut acc = GradAccumulator::default();
    for &i in &idx {
        acc.add(&grads_of(&[i]));
    }
    let mean: BTreeMap<_, _> = acc.take_mean().into_iter().collect();
    let mut max_err = 0.0f32;
    for (id, g) in full.params() {
        for (a, b) in g.iter().zip(&mean[&id]) {
            max_err = max_err.max((a - b).abs());
        }
    }
    assert!(max_err < 1e-6, "max abs difference {max_err:e}");
}

#[test]
fn frozen_parameters_are_untouched_by_fine_tuning() {
    let mut cfg = tiny_config(22);
    cfg.train.finetune_epochs = 1;
    cfg.train.finetune_batch = 8;
    let (_, data) = tiny_data(&cfg, 24);
    let mut store = init_params(&cfg.model, 22).unwrap();
    let before = store.clone();
    finetune(&cfg, &mut store, &data, None, None).unwrap();
    let plan = FreezePlan::from_config(&cfg.train);
    let mut moved = 0;
    for p in before.iter() {
        let after = store.get(&p.name).unwrap().tensor.data();
        if p.group == ParamGroup::Buffer {
            continue;
        }
        if plan.trainable(&p.name, 1, cfg.model.dec_layers) {
            moved += usize::from(after != p.tensor.data());
        } else {
            assert_eq!(after, p.tensor.data(), "{} changed while frozen", p.name);
        }
    }
    assert!(moved > 10);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = tiny_config(23);
    let mut store = init_params(&cfg.model, 23).unwrap();
    let mut opt = AdamW::from_config(&cfg.train);
    let grads: Vec<_> = store.iter().filter(|p| p.group != ParamGroup::Buffer).map(|p| p.tensor.data().iter().map(|x| x.sin()).collect::<Vec<_>>()).collect();
    let ids: Vec<_> = store.iter().filter(|p| p.group != ParamGroup::Buffer).map(|p| store.id(&p.name).unwrap()).collect();
    let g: Vec<_> = ids.into_iter().zip(grads).collect();
    opt.step(&mut store, &g, LR).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = BTreeMap::from([("stage".to_string(), "test".to_string())]);
    save_checkpoint(&path, &store, Some(&opt), &meta).unwrap();

    let mut fresh = init_params(&cfg.model, 99).unwrap();
    let opts = LoadOptions { init_heads_fresh: false, seed: 0 };
    let loaded = load_checkpoint(&path, &mut fresh, opts, &cfg.train).unwrap().unwrap();
    for p in store.iter() {
        let q = fresh.get(&p.name).unwrap();
        assert_eq!(p.tensor.shape(), q.tensor.shape());
        let same = p.tensor.data().iter().zip(q.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{} differs", p.name);
    }
    assert_eq!(loaded.state, opt.state);
    assert_eq!(loaded.steps, opt.steps);
}

#[test]
fn checkpoint_loading_reports_missing_and_mismatched_tensors() {
    let cfg = tiny_config(24);
    let store = init_params(&cfg.model, 24).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = LoadOptions { init_heads_fresh: false, seed: 0 };

    let mut no_heads = ParamStore::new();
    for p in store.iter().filter(|p| !p.name.starts_with("heads.")) {
        no_heads.insert(&p.name, p.tensor.clone(), p.group, p.decay);
    }
    let path = dir.path().join("pre.ckpt");
    save_checkpoint(&path, &no_heads, None, &BTreeMap::new()).unwrap();
    let mut target = init_params(&cfg.model, 5).unwrap();
    let err = load_checkpoint(&path, &mut target, opts, &cfg.train).unwrap_err();
    assert!(matches!(&err, Error::Load(m) if m.contains("heads.")), "{err}");
    let fresh = LoadOptions { init_heads_fresh: true, seed: 7 };
    assert!(load_checkpoint(&path, &mut target, fresh, &cfg.train).unwrap().is_none());
    let enc = "fusion.ln.gain";
    assert_eq!(target.get(enc).unwrap().tensor.data(), store.get(enc).unwrap().tensor.data());
    let heads: Vec<_> = target.iter().filter(|p| p.name.starts_with("heads.")).collect();
    assert!(!heads.is_empty() && heads.iter().all(|p| p.tensor.all_finite()));

    let mut wide = cfg.clone();
    wide.model.dec_ffn = 48;
    let mut target = init_params(&wide.model, 5).unwrap();
    let full = dir.path().join("full.ckpt");
    save_checkpoint(&full, &store, None, &BTreeMap::new()).unwrap();
    let err = load_checkpoint(&full, &mut target, opts, &cfg.train).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[16, 32]") && msg.contains("[16, 48]"), "{msg}");
}

#[test]
fn pretraining_needs_one_full_micro_batch() {
    let mut cfg = tiny_config(25);
    cfg.train.micro_batch = 8;
    let (_, data) = tiny_data(&cfg, 24);
    let small = data.subset(&[0, 1, 2]).unwrap();
    let mut store = init_params(&cfg.model, 25).unwrap();
    assert!(matches!(pretrain(&cfg, &mut store, &small, None, None), Err(Error::Sizing(_))));
}

#[test]
fn one_optimizer_step_per_accumulation_window() {
    let mut cfg = tiny_config(26);
    cfg.train.pretrain_epochs = 2;
    cfg.train.total_steps = 100;
    cfg.train.warmup_steps = 2;
    let (_, data) = tiny_data(&cfg, 24);
    let data = data.subset(&(0..22).collect::<Vec<_>>()).unwrap();
    let mut store = init_params(&cfg.model, 26).unwrap();
    let out = pretrain(&cfg, &mut store, &data, None, None).unwrap();
    // 11 micro-batches of 2 per epoch, windows of 4.
    assert_eq!(out.optimizer_steps, 2 * 3);
    assert_eq!(out.step_losses.len(), 6);
    assert!(out.step_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn step_budget_ends_pretraining() {
    let mut cfg = tiny_config(27);
    cfg.train.pretrain_epochs = 10;
    cfg.train.total_steps = 4;
    cfg.train.warmup_steps = 1;
    let (_, data) = tiny_data(&cfg, 24);
    let mut store = init_params(&cfg.model, 27).unwrap();
    let out = pretrain(&cfg, &mut store, &data, None, None).unwrap();
    assert_eq!(out.optimizer_steps, 4);
    assert_eq!(out.epochs_run, 2);
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let mut cfg = tiny_config(28);
    cfg.train.pretrain_epochs = 2;
    cfg.train.finetune_epochs = 2;
    cfg.train.finetune_batch = 8;
    let (_, data) = tiny_data(&cfg, 24);
    let run = || {
        let mut store = init_params(&cfg.model, 28).unwrap();
        let p = pretrain(&cfg, &mut store, &data, None, None).unwrap();
        let f = finetune(&cfg, &mut store, &data, None, None).unwrap();
        (p.step_losses, f.step_losses, store)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    for p in a.2.iter() {
        assert_eq!(p.tensor.data(), b.2.get(&p.name).unwrap().tensor.data(), "{}", p.name);
    }
}
