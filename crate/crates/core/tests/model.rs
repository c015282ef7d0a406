mod common;

use common::{tiny_config, tiny_data};
use gdp::decoder::{Decoding, TokenBatch};
use gdp::encoders::{FusedMemory, MissingNote, NoteBatch, NoteProvider};
use gdp::model::{apply_bn_updates, init_params, Net, NoteFusion, Pass};
use gdp::tensor::{ParamGroup, Rng, Tape, Tensor};
use gdp::Error;

fn warm_bn(cfg: &gdp::config::RunConfig, store: &mut gdp::tensor::ParamStore<f32>, data: &gdp::training::Dataset) {
    let b = data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap();
    let updates = {
        let net = Net::new(&cfg.model, store);
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let mut pass = Pass::train(&mut rng);
        net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut pass).unwrap();
        pass.bn_updates
    };
    apply_bn_updates(store, &updates).unwrap();
}

#[test]
fn forward_shapes_at_desk_scale() {
    let mut cfg = tiny_config(1);
    cfg.model = gdp::model::ModelConfig::desk();
    let (_, data) = tiny_data(&cfg, 6);
    let store = init_params(&cfg.model, 1).unwrap();
    let b = data.batch(&[0, 1, 2]).unwrap();
    let net = Net::new(&cfg.model, &store);
    let mut tape = Tape::new();
    let mut rng = Rng::new(2);
    let mut pass = Pass::train(&mut rng);
    let (mem, h) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut pass).unwrap();
    assert_eq!(tape.shape(h), &[3, 32, 256]);
    assert_eq!(tape.shape(mem.memory), &[3, 32, 256]);
    let logits = net.forward_teacher_forced(&mut tape, &mem, &b.tokens, &mut pass).unwrap();
    assert_eq!(tape.shape(logits), &[3, b.tokens.len, 512]);
    let probs = net.classify(&mut tape, &mem, &mut pass).unwrap();
    for p in probs {
        assert_eq!(tape.shape(p), &[3, 1]);
        assert!(tape.value(p).iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn eval_batch_norm_requires_running_statistics() {
    let cfg = tiny_config(2);
    let (_, data) = tiny_data(&cfg, 4);
    let store = init_params(&cfg.model, 2).unwrap();
    let b = data.batch(&[0]).unwrap();
    let net = Net::new(&cfg.model, &store);
    let mut tape = Tape::new();
    let err = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut Pass::eval()).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
}

#[test]
fn causal_mask_blocks_future_tokens() {
    let cfg = tiny_config(3);
    let (_, data) = tiny_data(&cfg, 4);
    let mut store = init_params(&cfg.model, 3).unwrap();
    warm_bn(&cfg, &mut store, &data);
    let b = data.batch(&[0]).unwrap();
    let net = Net::new(&cfg.model, &store);
    let len = 10;
    let base: Vec<usize> = (0..len).map(|i| 4 + (i * 31) % 250).collect();
    let hidden = |tokens: &[usize]| {
        let mut tape = Tape::new();
        let (mem, _) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut Pass::eval()).unwrap();
        let h = net.decode_hidden(&mut tape, &mem, tokens, len, &mut Pass::eval()).unwrap();
        tape.value(h).to_vec()
    };
    let d = cfg.model.d_model;
    let h0 = hidden(&base);
    for j in [1, 5, 9] {
        let mut t = base.clone();
        t[j] = 200;
        let h1 = hidden(&t);
        assert_eq!(&h0[..j * d], &h1[..j * d], "positions before {j} changed");
        assert_ne!(&h0[j * d..(j + 1) * d], &h1[j * d..(j + 1) * d]);
    }
}

#[test]
fn masked_memory_rows_receive_no_attention() {
    let cfg = tiny_config(4);
    let store = init_params(&cfg.model, 4).unwrap();
    let net = Net::new(&cfg.model, &store);
    let (m, d) = (6, cfg.model.d_model);
    let mut rng = Rng::new(5);
    let base = Tensor::randn(&[1, m, d], 1.0, &mut rng);
    let valid = vec![true, false, true, false, false, true];
    let run = |mem: &Tensor<f32>, valid: &[bool]| {
        let mut tape = Tape::new();
        let memory = FusedMemory {
            memory: tape.input(mem.clone()),
            valid: valid.to_vec(),
            batch: 1,
            len: m,
        };
        let h = net.decode_hidden(&mut tape, &memory, &[0, 7, 9], 3, &mut Pass::eval()).unwrap();
        tape.value(h).to_vec()
    };
    let h0 = run(&base, &valid);
    let mut noisy = base.clone();
    for (r, &v) in valid.iter().enumerate() {
        if !v {
            for x in &mut noisy.data_mut()[r * d..(r + 1) * d] {
                *x = 1e3 * rng.normal() as f32;
            }
        }
    }
    assert_eq!(h0, run(&noisy, &valid));
    // With nothing valid the learned sentinel is read, so memory is ignored.
    let none = vec![false; m];
    assert_eq!(run(&base, &none), run(&noisy, &none));
}

#[test]
fn classification_ignores_padding_and_batch_company() {
    let mut cfg = tiny_config(5);
    cfg.model.seq_len = 64;
    let (_, data) = tiny_data(&cfg, 8);
    let mut store = init_params(&cfg.model, 5).unwrap();
    warm_bn(&cfg, &mut store, &data);
    let net = Net::new(&cfg.model, &store);
    let probs = |b: &gdp::training::Batch| {
        let mut tape = Tape::new();
        let (mem, _) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut Pass::eval()).unwrap();
        let p = net.classify(&mut tape, &mem, &mut Pass::eval()).unwrap();
        p.map(|v| tape.value(v).to_vec())
    };
    let short = (0..data.len()).find(|&i| data.timelines[i].n_valid() < cfg.model.seq_len).expect("a padded timeline");
    let alone = probs(&data.batch(&[short]).unwrap());
    let mut garbage = data.batch(&[short]).unwrap();
    let t = cfg.model.seq_len;
    let mut rng = Rng::new(1);
    for s in 0..t {
        if !garbage.timeline.valid_mask[s] {
            for x in &mut garbage.timeline.embeddings.data_mut()[s * 128..(s + 1) * 128] {
                *x = 50.0 * rng.normal() as f32;
            }
        }
    }
    let noisy = probs(&garbage);
    let others: Vec<usize> = (0..data.len()).filter(|&i| i != short).take(3).chain([short]).collect();
    let crowd = probs(&data.batch(&others).unwrap());
    for k in 0..3 {
        assert!((alone[k][0] - noisy[k][0]).abs() < 1e-6);
        assert!((alone[k][0] - crowd[k][3]).abs() < 1e-6);
    }
}

#[test]
fn note_token_fusion_appends_one_memory_step() {
    let mut cfg = tiny_config(6);
    cfg.model.note_fusion = NoteFusion::Token;
    let (_, data) = tiny_data(&cfg, 4);
    let store = init_params(&cfg.model, 6).unwrap();
    let net = Net::new(&cfg.model, &store);
    let b = data.batch(&[0, 1]).unwrap();
    let mut tape = Tape::new();
    let mut rng = Rng::new(0);
    let (mem, _) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut Pass::train(&mut rng)).unwrap();
    let t = cfg.model.seq_len;
    assert_eq!(tape.shape(mem.memory), &[2, t + 1, cfg.model.d_model]);
    assert!(mem.valid[t] && mem.valid[2 * t + 1]);
}

#[test]
fn built_in_note_is_the_mean_token_embedding() {
    let cfg = tiny_config(7);
    let store = init_params(&cfg.model, 7).unwrap();
    let net = Net::new(&cfg.model, &store);
    let mut tape = Tape::new();
    let notes = NoteBatch::Tokens(vec![vec![42, 42, 42], vec![], vec![5, 9]]);
    let v = net.encode_note(&mut tape, &notes).unwrap();
    let dim = cfg.model.note_dim;
    let table = store.get("note.token_embedding").unwrap().tensor.data();
    let out = tape.value(v);
    for j in 0..dim {
        assert!((out[j] - table[42 * dim + j]).abs() < 1e-7);
        assert_eq!(out[dim + j], 0.0);
        let mean = 0.5 * (table[5 * dim + j] + table[9 * dim + j]);
        assert!((out[2 * dim + j] - mean).abs() < 1e-7);
    }
}

#[test]
fn file_note_provider_handles_missing_admissions() {
    let records = gdp::data::generate_synthetic_cohort(3, 8, &Default::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("notes.blob");
    NoteProvider::save_vectors(&path, &[(records[0].admission_id.clone(), vec![0.5; 12])]).unwrap();
    let refs: Vec<_> = records.iter().collect();
    let zero = NoteProvider::from_file(&path, MissingNote::Zero).unwrap();
    match zero.prepare(&refs).unwrap() {
        NoteBatch::Vectors(v) => {
            assert_eq!(v.shape(), &[3, 12]);
            assert_eq!(&v.data()[..12], &[0.5; 12]);
            assert!(v.data()[12..].iter().all(|&x| x == 0.0));
        }
        other => panic!("unexpected {other:?}"),
    }
    let strict = NoteProvider::from_file(&path, MissingNote::Error).unwrap();
    assert!(matches!(strict.prepare(&refs), Err(Error::Validation { .. })));
}

#[test]
fn parameter_groups_follow_names_and_rank() {
    let cfg = tiny_config(9);
    let store = init_params(&cfg.model, 9).unwrap();
    for p in store.iter() {
        if p.name.ends_with("running_mean") || p.name.ends_with("running_var") || p.name.ends_with("num_batches") {
            assert_eq!(p.group, ParamGroup::Buffer, "{}", p.name);
            continue;
        }
        let expected = if p.name.starts_with("decoder.") { ParamGroup::Backbone } else { ParamGroup::Scratch };
        assert_eq!(p.group, expected, "{}", p.name);
        assert_eq!(p.decay, p.tensor.shape().len() >= 2, "{}", p.name);
    }
    assert_eq!(store.num_learnable(), cfg.model.param_count());
}

#[test]
fn greedy_generation_agrees_with_teacher_forcing() {
    let cfg = tiny_config(10);
    let (_, data) = tiny_data(&cfg, 4);
    let mut store = init_params(&cfg.model, 10).unwrap();
    let mut rng = Rng::new(3);
    for p in store.iter_mut().filter(|p| p.name.starts_with("decoder.")) {
        for x in p.tensor.data_mut() {
            *x += 0.3 * rng.normal() as f32;
        }
    }
    warm_bn(&cfg, &mut store, &data);
    let b = data.batch(&[0, 1]).unwrap();
    let (memory, valid) = gdp::training::encode_for_generation(&cfg, &store, &b).unwrap();
    let net = Net::new(&cfg.model, &store);
    let gens = net.generate(&memory, &valid, 12, Decoding::Greedy, &mut Rng::new(0)).unwrap();
    for (row, g) in gens.iter().enumerate() {
        let mut seq = g.clone();
        seq.push(gdp::decoder::EOS);
        let tb = TokenBatch::from_sequences(&[seq.clone()]).unwrap();
        let one = data.batch(&[row]).unwrap();
        let mut tape = Tape::new();
        let (mem, _) = net.encode_batch(&mut tape, &one.timeline, &one.notes, &mut Pass::eval()).unwrap();
        let logits = net.forward_teacher_forced(&mut tape, &mem, &tb, &mut Pass::eval()).unwrap();
        let v = cfg.model.vocab;
        let lv = tape.value(logits);
        let steps = g.len() + usize::from(g.len() < 12);
        for s in 0..steps {
            let row_l = &lv[s * v..(s + 1) * v];
            let best = (0..v).fold(0, |bi, i| if row_l[i] > row_l[bi] { i } else { bi });
            assert_eq!(best, seq[s], "step {s}");
        }
    }
    let again = net.generate(&memory, &valid, 12, Decoding::Greedy, &mut Rng::new(99)).unwrap();
    assert_eq!(gens, again);
    let k1 = net.generate(&memory, &valid, 12, Decoding::TopK(1), &mut Rng::new(5)).unwrap();
    assert_eq!(gens, k1);
}
