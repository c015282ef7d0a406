//! Model dimensions, parameter registry and shared forward-pass plumbing.

use crate::data::layout::{D_CODE, D_DEMO, D_EVENT};
use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamStore, Rng, Scalar, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const TASK_HEADS: [&str; 3] = ["hf", "t2dm", "readmit"];

/// How the projected note embedding enters the fused memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoteFusion {
    /// Broadcast-added to every time step.
    Add,
    /// Appended as one extra memory step.
    Token,
}

impl NoteFusion {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "add" => Some(Self::Add),
            "token" => Some(Self::Token),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Token => "token",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Timeline length T and size of the structured positional table.
    pub seq_len: usize,
    pub d_event: usize,
    /// Output channels of the first convolution.
    pub conv1_channels: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_ffn: usize,
    pub d_demo: usize,
    pub note_dim: usize,
    pub note_max_tokens: usize,
    pub note_fusion: NoteFusion,
    pub dec_layers: usize,
    pub self_heads: usize,
    pub cross_heads: usize,
    pub dec_ffn: usize,
    /// Decoder vocabulary V (shared with the built-in note encoder).
    pub vocab: usize,
    /// Maximum target length L.
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            seq_len: 32,
            d_event: D_EVENT,
            conv1_channels: 128,
            d_model: 256,
            enc_layers: 4,
            enc_heads: 8,
            enc_ffn: 512,
            d_demo: D_DEMO,
            note_dim: 768,
            note_max_tokens: 512,
            note_fusion: NoteFusion::Add,
            dec_layers: 4,
            self_heads: 16,
            cross_heads: 8,
            dec_ffn: 1024,
            vocab: 512,
            max_len: 128,
            dropout: 0.1,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            seq_len: 100,
            dec_layers: 24,
            vocab: 32000,
            max_len: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 8] = [
            ("model.seq_len", self.seq_len >= 1, "must be at least 1"),
            ("model.d_event", self.d_event == D_EVENT, "must equal the event layout width 128"),
            ("model.enc_heads", self.enc_heads > 0 && self.d_model % self.enc_heads == 0, "must divide d_model"),
            ("model.self_heads", self.self_heads > 0 && self.d_model % self.self_heads == 0, "must divide d_model"),
            ("model.cross_heads", self.cross_heads > 0 && self.d_model % self.cross_heads == 0, "must divide d_model"),
            ("model.vocab", self.vocab >= 4 + 256, "must cover the reserved and byte tokens (>= 260)"),
            ("model.max_len", self.max_len >= 2, "must be at least 2"),
            ("model.dropout", (0.0..1.0).contains(&self.dropout), "must lie in [0, 1)"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        Ok(())
    }

    /// Number of learnable scalars, from closed-form per-block counts.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let lin = |i: usize, o: usize| i * o + o;
        let ln = 2 * d;
        let attn = 4 * lin(d, d);
        let enc_layer = ln + attn + d + ln + lin(d, self.enc_ffn) + lin(self.enc_ffn, d);
        let c1 = self.conv1_channels;
        let encoder = (c1 * self.d_event * 3 + c1 + 2 * c1)
            + (d * c1 * 3 + d + 2 * d)
            + (d * d * 3 + d + ln)
            + self.seq_len * d
            + self.enc_layers * enc_layer;
        let features = lin(self.d_demo, d) + lin(d, d);
        let note = self.vocab * self.note_dim + lin(self.note_dim, d) + ln;
        let aux = D_CODE + lin(d, d) + lin(d, self.d_event) + lin(d, self.d_event);
        let heads = 3 * lin(d, 1);
        encoder + features + note + aux + heads + self.decoder_param_count()
    }

    /// Learnable scalars of the decoder backbone alone.
    pub fn decoder_param_count(&self) -> usize {
        let d = self.d_model;
        let lin = |i: usize, o: usize| i * o + o;
        let layer = 3 * 2 * d + 8 * lin(d, d) + d + lin(d, self.dec_ffn) + lin(self.dec_ffn, d);
        self.vocab * d + self.max_len * d + self.dec_layers * layer + 2 * d + d * self.vocab
    }
}

/// Builds every named parameter with the standard initialisation:
/// matrices and embeddings N(0, 0.02), biases 0, norm gains 1 and shifts 0.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut b = Builder {
        store: ParamStore::new(),
        rng: Rng::new(seed),
    };
    let d = cfg.d_model;
    let c1 = cfg.conv1_channels;
    use ParamGroup::{Backbone as BB, Scratch as SC};

    b.conv("encoder.conv1", c1, cfg.d_event);
    b.batch_norm("encoder.bn1", c1);
    b.conv("encoder.conv2", d, c1);
    b.batch_norm("encoder.bn2", d);
    b.conv("encoder.conv3", d, d);
    b.norm("encoder.ln3", d, SC);
    b.normal("encoder.pos_embedding", &[cfg.seq_len, d], SC);
    for i in 0..cfg.enc_layers {
        let p = format!("encoder.layers.{i}");
        b.norm(&format!("{p}.ln1"), d, SC);
        b.attention(&format!("{p}.attn"), d, SC);
        b.normal(&format!("{p}.attn.sentinel"), &[d], SC);
        b.norm(&format!("{p}.ln2"), d, SC);
        b.linear(&format!("{p}.ffn.fc1"), d, cfg.enc_ffn, SC);
        b.linear(&format!("{p}.ffn.fc2"), cfg.enc_ffn, d, SC);
    }
    b.linear("features.fc1", cfg.d_demo, d, SC);
    b.linear("features.fc2", d, d, SC);
    b.normal("note.token_embedding", &[cfg.vocab, cfg.note_dim], SC);
    b.linear("fusion.note_proj", cfg.note_dim, d, SC);
    b.norm("fusion.ln", d, SC);
    b.normal("mfp.mask_vector", &[D_CODE], SC);
    b.linear("mfp.fc1", d, d, SC);
    b.linear("mfp.fc2", d, cfg.d_event, SC);
    b.linear("ntp.proj", d, cfg.d_event, SC);
    init_heads(&mut b.store, d, &mut b.rng);

    b.normal("decoder.token_embedding", &[cfg.vocab, d], BB);
    b.normal("decoder.pos_embedding", &[cfg.max_len, d], BB);
    for i in 0..cfg.dec_layers {
        let p = format!("decoder.layers.{i}");
        b.norm(&format!("{p}.ln1"), d, BB);
        b.attention(&format!("{p}.self_attn"), d, BB);
        b.norm(&format!("{p}.ln2"), d, BB);
        b.attention(&format!("{p}.cross_attn"), d, BB);
        b.normal(&format!("{p}.cross_attn.sentinel"), &[d], BB);
        b.norm(&format!("{p}.ln3"), d, BB);
        b.linear(&format!("{p}.ffn.fc1"), d, cfg.dec_ffn, BB);
        b.linear(&format!("{p}.ffn.fc2"), cfg.dec_ffn, d, BB);
    }
    b.norm("decoder.final_ln", d, BB);
    b.normal("decoder.lm_head", &[d, cfg.vocab], BB);
    Ok(b.store)
}

/// (Re)creates the three classification heads in `store`.
pub fn init_heads(store: &mut ParamStore<f32>, d_model: usize, rng: &mut Rng) {
    for task in TASK_HEADS {
        let w = format!("heads.{task}.weight");
        let bias = format!("heads.{task}.bias");
        let wt = Tensor::randn(&[d_model, 1], INIT_STD, rng);
        if store.contains(&w) {
            store.get_mut(&w).expect("present").tensor = trainable(wt);
            store.get_mut(&bias).expect("present").tensor = trainable(Tensor::zeros(&[1]));
        } else {
            store.insert(&w, wt, ParamGroup::Scratch, true);
            store.insert(&bias, Tensor::zeros(&[1]), ParamGroup::Scratch, false);
        }
    }
}

fn trainable(mut t: Tensor<f32>) -> Tensor<f32> {
    t.requires_grad = true;
    t
}

struct Builder {
    store: ParamStore<f32>,
    rng: Rng,
}

impl Builder {
    fn normal(&mut self, name: &str, shape: &[usize], group: ParamGroup) {
        let t = Tensor::randn(shape, INIT_STD, &mut self.rng);
        self.store.insert(name, t, group, shape.len() >= 2);
    }

    fn zeros(&mut self, name: &str, shape: &[usize], group: ParamGroup) {
        self.store.insert(name, Tensor::zeros(shape), group, false);
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize, group: ParamGroup) {
        self.normal(&format!("{prefix}.weight"), &[din, dout], group);
        self.zeros(&format!("{prefix}.bias"), &[dout], group);
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize) {
        self.normal(&format!("{prefix}.weight"), &[cout, cin, 3], ParamGroup::Scratch);
        self.zeros(&format!("{prefix}.bias"), &[cout], ParamGroup::Scratch);
    }

    fn norm(&mut self, prefix: &str, d: usize, group: ParamGroup) {
        self.store.insert(&format!("{prefix}.gain"), Tensor::full(&[d], 1.0), group, false);
        self.zeros(&format!("{prefix}.shift"), &[d], group);
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.norm(prefix, c, ParamGroup::Scratch);
        let buf = ParamGroup::Buffer;
        self.zeros(&format!("{prefix}.running_mean"), &[c], buf);
        self.store.insert(&format!("{prefix}.running_var"), Tensor::full(&[c], 1.0), buf, false);
        self.zeros(&format!("{prefix}.num_batches"), &[1], buf);
    }

    fn attention(&mut self, prefix: &str, d: usize, group: ParamGroup) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{part}"), d, d, group);
        }
    }
}

/// Batch statistics from one train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Biased variance over the valid rows.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Mode of one forward pass.
pub struct Pass<'r> {
    rng: Option<&'r mut Rng>,
    /// Batch norm normalises with batch statistics (and reports them).
    pub bn_batch_stats: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'r> Pass<'r> {
    /// Inference: no dropout, batch norm on running statistics.
    pub fn eval() -> Self {
        Self {
            rng: None,
            bn_batch_stats: false,
            bn_updates: Vec::new(),
        }
    }

    /// Training: dropout drawn from `rng`, batch norm on batch statistics.
    pub fn train(rng: &'r mut Rng) -> Self {
        Self {
            rng: Some(rng),
            bn_batch_stats: true,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout<S: Scalar>(&mut self, tape: &mut Tape<'_, S>, x: Var, p: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => tape.dropout(x, p, rng),
            _ => Ok(x),
        }
    }
}

/// Folds train-mode batch statistics into the running buffers with
/// momentum 0.1. The running variance uses the unbiased estimate.
pub fn apply_bn_updates(store: &mut ParamStore<f32>, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        let unbias = if u.count > 1 { u.count as f64 / (u.count as f64 - 1.0) } else { 1.0 };
        let m = BN_MOMENTUM;
        let rm = store.get_mut(&format!("{}.running_mean", u.prefix))?.tensor.data_mut();
        for (r, &x) in rm.iter_mut().zip(&u.mean) {
            *r = ((1.0 - m) * *r as f64 + m * x) as f32;
        }
        let rv = store.get_mut(&format!("{}.running_var", u.prefix))?.tensor.data_mut();
        for (r, &x) in rv.iter_mut().zip(&u.var) {
            *r = ((1.0 - m) * *r as f64 + m * x * unbias) as f32;
        }
        store.get_mut(&format!("{}.num_batches", u.prefix))?.tensor.data_mut()[0] += 1.0;
    }
    Ok(())
}

/// Read-only view of a parameter store with building blocks for the
/// forward passes.
pub struct Net<'a, S: Scalar> {
    pub cfg: ModelConfig,
    pub store: &'a ParamStore<S>,
}

impl<'a, S: Scalar> Net<'a, S> {
    pub fn new(cfg: &ModelConfig, store: &'a ParamStore<S>) -> Self {
        Self { cfg: cfg.clone(), store }
    }

    pub fn p(&self, tape: &mut Tape<'a, S>, name: &str) -> Result<Var> {
        tape.param(self.store, name)
    }

    pub fn linear(&self, tape: &mut Tape<'a, S>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{prefix}.weight"))?;
        let b = self.p(tape, &format!("{prefix}.bias"))?;
        tape.linear(x, w, Some(b))
    }

    pub fn layer_norm(&self, tape: &mut Tape<'a, S>, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.gain"))?;
        let s = self.p(tape, &format!("{prefix}.shift"))?;
        tape.layer_norm(x, g, s, LN_EPS)
    }

    pub fn batch_norm(&self, tape: &mut Tape<'a, S>, x: Var, prefix: &str, valid: &[bool], pass: &mut Pass<'_>) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.gain"))?;
        let s = self.p(tape, &format!("{prefix}.shift"))?;
        if pass.bn_batch_stats {
            let (y, stats) = tape.batch_norm(x, g, s, valid, None, BN_EPS)?;
            if let Some((mean, var)) = stats {
                let count = valid.iter().filter(|&&v| v).count();
                if count > 0 {
                    pass.bn_updates.push(BnUpdate {
                        prefix: prefix.to_string(),
                        mean,
                        var,
                        count,
                    });
                }
            }
            Ok(y)
        } else {
            let seen = self.store.get(&format!("{prefix}.num_batches"))?.tensor.data()[0];
            if seen.as_f64() <= 0.0 {
                return Err(Error::State(format!(
                    "{prefix}: eval-mode batch norm before any running statistics were collected"
                )));
            }
            let rm = self.store.get(&format!("{prefix}.running_mean"))?.tensor.data();
            let rv = self.store.get(&format!("{prefix}.running_var"))?.tensor.data();
            Ok(tape.batch_norm(x, g, s, valid, Some((rm, rv)), BN_EPS)?.0)
        }
    }

    /// Multi-head attention block with q/k/v/o projections.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &self,
        tape: &mut Tape<'a, S>,
        xq: Var,
        xkv: Var,
        prefix: &str,
        key_valid: Option<&[bool]>,
        causal: bool,
        heads: usize,
        sentinel: bool,
    ) -> Result<Var> {
        let q = self.linear(tape, xq, &format!("{prefix}.q"))?;
        let k = self.linear(tape, xkv, &format!("{prefix}.k"))?;
        let v = self.linear(tape, xkv, &format!("{prefix}.v"))?;
        let s = if sentinel { Some(self.p(tape, &format!("{prefix}.sentinel"))?) } else { None };
        let a = tape.attention(q, k, v, key_valid, causal, heads, s)?;
        self.linear(tape, a, &format!("{prefix}.o"))
    }

    /// Two-layer GELU feed-forward block.
    pub fn ffn(&self, tape: &mut Tape<'a, S>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{prefix}.fc1"))?;
        let h = tape.gelu(h)?;
        self.linear(tape, h, &format!("{prefix}.fc2"))
    }

    /// Rows `0..n` of a positional table.
    pub fn positions(&self, tape: &mut Tape<'a, S>, name: &str, n: usize) -> Result<Var> {
        let table = self.p(tape, name)?;
        let idx: Vec<usize> = (0..n).collect();
        tape.gather_rows(table, &idx)
    }
}
