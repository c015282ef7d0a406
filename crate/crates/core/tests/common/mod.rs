#![allow(dead_code)]

use gdp::config::RunConfig;
use gdp::data::{generate_synthetic_cohort, SynthConfig};
use gdp::pipeline::Artifacts;
use gdp::training::Dataset;

/// Small model and cohort that keep integration tests fast.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    let m = &mut c.model;
    m.seq_len = 8;
    m.conv1_channels = 8;
    m.d_model = 16;
    m.enc_layers = 1;
    m.enc_heads = 2;
    m.enc_ffn = 32;
    m.note_dim = 12;
    m.note_max_tokens = 32;
    m.dec_layers = 2;
    m.self_heads = 2;
    m.cross_heads = 2;
    m.dec_ffn = 32;
    m.vocab = 280;
    m.max_len = 24;
    c.data.synth_admissions = 24;
    c.eval.bootstrap = 20;
    c.eval.max_gen_len = 8;
    c
}

/// Artifacts fitted on `n` synthetic admissions and the encoded dataset.
pub fn tiny_data(cfg: &RunConfig, n: usize) -> (Artifacts, Dataset) {
    let records = generate_synthetic_cohort(n, cfg.seed, &SynthConfig::default());
    let art = Artifacts::fit(&records, cfg).unwrap();
    let notes = art.note_provider(cfg).unwrap();
    let data = art.dataset(&records, cfg, &notes).unwrap();
    (art, data)
}
