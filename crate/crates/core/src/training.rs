//! Optimiser, schedules, progressive unfreezing, checkpoints and the two
//! training loops.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, TrainConfig};
use crate::data::{Labels, Task, Timeline, TimelineBatch};
use crate::decoder::TokenBatch;
use crate::encoders::NoteBatch;
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::model::{apply_bn_updates, init_heads, Net, Pass, TASK_HEADS};
use crate::objectives::lm_loss;
use crate::tensor::{read_blob_file, write_blob_file, BlobFile, Gradients, ParamGroup, ParamId, ParamStore, Rng, Tape, Tensor};

// ---- optimiser -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

/// AdamW with decoupled weight decay and per-parameter step counts, so a
/// parameter unfrozen late starts with fresh bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<String, AdamMoments>,
    pub steps: u64,
}

/// Learning rate per optimiser group for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupLr {
    pub backbone: f64,
    pub scratch: f64,
}

impl GroupLr {
    pub fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Scratch => self.scratch,
            ParamGroup::Buffer => 0.0,
        }
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn from_config(t: &TrainConfig) -> Self {
        Self::new(t.beta1, t.beta2, t.adam_eps, t.weight_decay)
    }

    /// One update. Frozen parameters are skipped entirely (no moment
    /// update, no decay). A non-finite gradient aborts before any change.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)], lr: GroupLr) -> Result<()> {
        for (id, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    op: format!("gradient of `{}`", store.by_id(*id).name),
                });
            }
        }
        for (id, g) in grads {
            let p = store.by_id_mut(*id);
            if !p.trainable() {
                continue;
            }
            let rate = lr.of(p.group);
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let n = g.len();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| AdamMoments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let w = p.tensor.data_mut();
            for i in 0..n {
                let gi = g[i] as f64;
                let m = self.beta1 * st.m[i] as f64 + (1.0 - self.beta1) * gi;
                let v = self.beta2 * st.v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let mut wi = w[i] as f64 * (1.0 - rate * decay);
                wi -= rate * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                w[i] = wi as f32;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Sums micro-batch gradients; the mean over micro-batches matches the
/// gradient of the mean loss.
#[derive(Default)]
pub struct GradAccumulator {
    sums: BTreeMap<ParamId, Vec<f64>>,
    count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: &Gradients<f32>) {
        for (id, g) in grads.params() {
            let s = self.sums.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (a, &b) in s.iter_mut().zip(g) {
                *a += b as f64;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn take_mean(&mut self) -> Vec<(ParamId, Vec<f32>)> {
        let n = self.count.max(1) as f64;
        self.count = 0;
        std::mem::take(&mut self.sums)
            .into_iter()
            .map(|(id, s)| (id, s.into_iter().map(|x| (x / n) as f32).collect()))
            .collect()
    }
}

// ---- schedules -----------------------------------------------------------

/// Linear warmup to `peak`, cosine decay to 0 at `total`, 0 afterwards.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> Result<f64> {
    if total <= warmup {
        return Err(Error::config("train.total_steps", "must exceed the warmup steps"));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if step >= total {
        return Ok(0.0);
    }
    let frac = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Epoch-dependent trainable set during fine-tuning (epochs are 1-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreezePlan {
    /// Epochs `1..=frozen_epochs` keep the whole decoder frozen.
    pub frozen_epochs: usize,
    /// Decoder layers unfrozen (from the top) after the frozen epochs.
    pub top_layers: usize,
    /// First epoch with every parameter trainable.
    pub all_epoch: usize,
    /// First epoch the note token table trains.
    pub text_epoch: usize,
}

impl FreezePlan {
    pub fn from_config(t: &TrainConfig) -> Self {
        Self {
            frozen_epochs: t.freeze_decoder_epochs,
            top_layers: t.unfreeze_top_layers,
            all_epoch: t.unfreeze_all_epoch,
            text_epoch: t.text_encoder_unfreeze_epoch,
        }
    }

    /// Whether `name` trains in `epoch`. The pretraining-only heads
    /// (`mfp.*`, `ntp.*`) never train here.
    pub fn trainable(&self, name: &str, epoch: usize, dec_layers: usize) -> bool {
        if name.starts_with("mfp.") || name.starts_with("ntp.") {
            return false;
        }
        if name.starts_with("note.token_embedding") {
            return epoch >= self.text_epoch || epoch >= self.all_epoch;
        }
        if !name.starts_with("decoder.") {
            return true;
        }
        if epoch >= self.all_epoch {
            return true;
        }
        if epoch <= self.frozen_epochs {
            return false;
        }
        if name.starts_with("decoder.final_ln") {
            return true;
        }
        let first_open = dec_layers.saturating_sub(self.top_layers);
        name.strip_prefix("decoder.layers.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
            .is_some_and(|i| i >= first_open)
    }

    pub fn apply(&self, store: &mut ParamStore<f32>, epoch: usize, dec_layers: usize) {
        store.set_trainable(|n| self.trainable(n, epoch, dec_layers));
    }
}

/// Early-stopping tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub maximize: bool,
    pub best: Option<f64>,
    pub best_epoch: usize,
    bad: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, maximize: bool) -> Self {
        Self {
            patience,
            maximize,
            best: None,
            best_epoch: 0,
            bad: 0,
        }
    }

    /// Records one evaluation; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let better = match self.best {
            None => true,
            Some(b) if self.maximize => metric > b,
            Some(b) => metric < b,
        };
        if better {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        (better, self.bad >= self.patience)
    }
}

// ---- checkpoints ---------------------------------------------------------

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_T: &str = "adam.t/";

/// Writes every parameter and buffer, plus optimiser moments when given.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, opt: Option<&AdamW>, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut blob = BlobFile {
        meta: meta.clone(),
        ..BlobFile::default()
    };
    for p in store.iter() {
        blob.push(p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data().to_vec());
    }
    if let Some(opt) = opt {
        for (name, st) in &opt.state {
            blob.push(format!("{ADAM_M}{name}"), vec![st.m.len()], st.m.clone());
            blob.push(format!("{ADAM_V}{name}"), vec![st.v.len()], st.v.clone());
            blob.push(format!("{ADAM_T}{name}"), vec![1], vec![st.t as f32]);
        }
        blob.meta.insert("adam.steps".into(), opt.steps.to_string());
    }
    write_blob_file(path, &blob)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Missing classification heads are reinitialised instead of failing.
    pub init_heads_fresh: bool,
    pub seed: u64,
}

/// Restores every parameter of `store` from `path`. Returns the optimiser
/// moments when the file holds any.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore<f32>, opts: LoadOptions, adam: &TrainConfig) -> Result<Option<AdamW>> {
    let blob = read_blob_file(path)?;
    let mut missing = Vec::new();
    let mut heads_missing = false;
    for name in store.names() {
        match blob.get(&name) {
            Some(e) => {
                let p = store.get_mut(&name)?;
                if e.shape != p.tensor.shape() {
                    return Err(Error::Load(format!(
                        "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                        e.shape,
                        p.tensor.shape()
                    )));
                }
                p.tensor.data_mut().copy_from_slice(&e.data);
            }
            None if opts.init_heads_fresh && name.starts_with("heads.") => heads_missing = true,
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Load(format!("checkpoint lacks parameters: {}", missing.join(", "))));
    }
    if heads_missing {
        let d = store.get(&format!("heads.{}.weight", TASK_HEADS[0]))?.tensor.shape()[0];
        init_heads(store, d, &mut Rng::new(opts.seed));
    }
    let mut state = BTreeMap::new();
    for e in &blob.entries {
        if let Some(name) = e.name.strip_prefix(ADAM_M) {
            let v = blob.get(&format!("{ADAM_V}{name}")).ok_or_else(|| Error::Load(format!("missing second moment for `{name}`")))?;
            let t = blob.get(&format!("{ADAM_T}{name}")).map_or(0, |t| t.data[0] as u64);
            state.insert(
                name.to_string(),
                AdamMoments {
                    m: e.data.clone(),
                    v: v.data.clone(),
                    t,
                },
            );
        }
    }
    if state.is_empty() {
        return Ok(None);
    }
    let mut opt = AdamW::from_config(adam);
    opt.state = state;
    opt.steps = blob.meta.get("adam.steps").and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok(Some(opt))
}

// ---- datasets ------------------------------------------------------------

/// Encoded admissions ready for batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub timelines: Vec<Timeline>,
    pub notes: NoteBatch,
    /// Target token sequences (ending in EOS).
    pub targets: Vec<Vec<usize>>,
    pub references: Vec<String>,
    pub labels: Vec<Labels>,
}

/// One batch of model inputs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub timeline: TimelineBatch,
    pub notes: NoteBatch,
    pub tokens: TokenBatch,
    pub labels: Vec<Labels>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let rows: Vec<&Timeline> = idx.iter().map(|&i| &self.timelines[i]).collect();
        let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| self.targets[i].clone()).collect();
        Ok(Batch {
            timeline: TimelineBatch::from_timelines(&rows)?,
            notes: self.notes.select(idx)?,
            tokens: TokenBatch::from_sequences(&seqs)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Subset in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            timelines: idx.iter().map(|&i| self.timelines[i].clone()).collect(),
            notes: self.notes.select(idx)?,
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            references: idx.iter().map(|&i| self.references[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    fn chunks(&self, size: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect()
    }
}

/// Eval-mode probabilities `[hf, t2dm, readmit]` per admission.
pub fn predict(cfg: &RunConfig, store: &ParamStore<f32>, data: &Dataset) -> Result<Vec<[f64; 3]>> {
    let net = Net::new(&cfg.model, store);
    let mut out = Vec::with_capacity(data.len());
    for idx in data.chunks(cfg.train.finetune_batch) {
        let b = data.batch(&idx)?;
        let mut tape = Tape::new();
        let mut pass = Pass::eval();
        let (mem, _) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut pass)?;
        let probs = net.classify(&mut tape, &mem, &mut pass)?;
        for r in 0..idx.len() {
            out.push([0, 1, 2].map(|k| tape.value(probs[k])[r] as f64));
        }
    }
    Ok(out)
}

/// `exp` of the token-weighted mean LM loss over `data` in eval mode.
pub fn validation_perplexity(cfg: &RunConfig, store: &ParamStore<f32>, data: &Dataset) -> Result<f64> {
    let net = Net::new(&cfg.model, store);
    let (mut nll, mut tokens) = (0.0, 0usize);
    for idx in data.chunks(cfg.train.finetune_batch) {
        let b = data.batch(&idx)?;
        let mut tape = Tape::new();
        let mut pass = Pass::eval();
        let (mem, _) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut pass)?;
        let logits = net.forward_teacher_forced(&mut tape, &mem, &b.tokens, &mut pass)?;
        let l = lm_loss(&mut tape, logits, &b.tokens)?;
        let n = b.tokens.include().iter().filter(|&&x| x).count();
        nll += tape.scalar(l) as f64 * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::UndefinedMetric("perplexity over zero tokens".into()));
    }
    Ok((nll / tokens as f64).exp())
}

/// Mean AUROC over tasks whose labels in `data` contain both classes;
/// 0.5 when none do.
pub fn mean_auroc(probs: &[[f64; 3]], labels: &[Labels]) -> f64 {
    let mut vals = Vec::new();
    for (k, task) in Task::ALL.into_iter().enumerate() {
        let (s, y): (Vec<f64>, Vec<u8>) = probs
            .iter()
            .zip(labels)
            .filter_map(|(p, l)| l.get(task).map(|y| (p[k], y)))
            .unzip();
        if let Ok(a) = auroc(&s, &y) {
            vals.push(a);
        }
    }
    if vals.is_empty() {
        0.5
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

// ---- run logs ------------------------------------------------------------

/// Output location of a training run: CSV logs and checkpoints.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Per-step and per-epoch records of one loop.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub step_header: String,
    pub steps: Vec<String>,
    pub epoch_header: String,
    pub epochs: Vec<String>,
}

impl History {
    fn csv(header: &str, rows: &[String]) -> String {
        let mut s = String::from(header);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        Self::csv(&self.step_header, &self.steps)
    }

    pub fn epochs_csv(&self) -> String {
        Self::csv(&self.epoch_header, &self.epochs)
    }
}

/// Summary of a finished training loop.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub epochs_run: usize,
    pub optimizer_steps: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Mean total loss per optimiser step.
    pub step_losses: Vec<f64>,
    pub history: History,
}

fn meta(stage: &str, epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([("stage".to_string(), stage.to_string()), ("epoch".to_string(), epoch.to_string())])
}

// ---- pretraining -----------------------------------------------------------

/// Generative pretraining with MFP and NTP: micro-batches accumulated
/// into optimiser steps, per-epoch validation perplexity, early stopping,
/// and restoration of the best parameters at the end.
pub fn pretrain(cfg: &RunConfig, store: &mut ParamStore<f32>, train: &Dataset, val: Option<&Dataset>, run: Option<&RunDir>) -> Result<Outcome> {
    let t = &cfg.train;
    if train.len() < t.micro_batch {
        return Err(Error::Sizing(format!(
            "{} training admissions cannot fill one micro-batch of {}",
            train.len(),
            t.micro_batch
        )));
    }
    store.set_trainable(|_| true);
    let mut opt = AdamW::from_config(t);
    let mut stop = EarlyStop::new(t.pretrain_patience, false);
    let mut hist = History {
        step_header: "step,epoch,l_lm,l_mfp,l_ntp,lambda,total,lr_backbone,lr_scratch".into(),
        epoch_header: "epoch,train_loss,val_perplexity,improved".into(),
        ..History::default()
    };
    let mut step_losses = Vec::new();
    let mut best: Option<ParamStore<f32>> = None;
    let mut epochs_run = 0;
    let weights = cfg.loss_weights();
    'epochs: for epoch in 1..=t.pretrain_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::child(cfg.seed, 1000 + epoch as u64).shuffle(&mut order);
        let mut drop_rng = Rng::child(cfg.seed, 2000 + epoch as u64);
        let mut mask_rng = Rng::child(cfg.seed, 3000 + epoch as u64);
        let micro: Vec<&[usize]> = order.chunks(t.micro_batch).filter(|c| c.len() == t.micro_batch).collect();
        let mut acc = GradAccumulator::default();
        let mut parts = [0.0f64; 4];
        let mut epoch_loss = (0.0, 0usize);
        for (i, idx) in micro.iter().enumerate() {
            let b = train.batch(idx)?;
            let (grads, terms, bn) = {
                let net = Net::new(&cfg.model, store);
                let mut tape = Tape::new();
                let mut pass = Pass::train(&mut drop_rng);
                pass.bn_batch_stats = t.bn_batch_stats;
                let terms = net.pretrain_loss(&mut tape, &b.timeline, &b.notes, &b.tokens, epoch, &weights, &mut mask_rng, &mut pass)?;
                let total = tape.scalar(terms.total) as f64;
                let bn = std::mem::take(&mut pass.bn_updates);
                (tape.backward(terms.total)?, (terms, total), bn)
            };
            apply_bn_updates(store, &bn)?;
            acc.add(&grads);
            let (terms, total) = terms;
            parts[0] += terms.lm;
            parts[1] += terms.mfp;
            parts[2] += terms.ntp;
            parts[3] += total;
            epoch_loss.0 += total;
            epoch_loss.1 += 1;
            if acc.count() == t.accum_steps || i + 1 == micro.len() {
                let n = acc.count() as f64;
                let step = opt.steps as usize;
                let lr = GroupLr {
                    backbone: lr_at(step, t.lr_backbone, t.warmup_steps, t.total_steps)?,
                    scratch: lr_at(step, t.lr_scratch, t.warmup_steps, t.total_steps)?,
                };
                let g = acc.take_mean();
                opt.step(store, &g, lr)?;
                let mean = parts.map(|x| x / n);
                step_losses.push(mean[3]);
                hist.steps.push(format!(
                    "{},{},{:.6},{:.6},{:.6},{},{:.6},{:.3e},{:.3e}",
                    opt.steps, epoch, mean[0], mean[1], mean[2], terms.lambda, mean[3], lr.backbone, lr.scratch
                ));
                parts = [0.0; 4];
                if opt.steps as usize >= t.total_steps {
                    log::info!("pretrain: step budget {} reached", t.total_steps);
                    finish_pretrain_epoch(cfg, store, val, epoch, epoch_loss, &mut stop, &mut best, &mut hist, run, &opt)?;
                    break 'epochs;
                }
            }
        }
        let halt = finish_pretrain_epoch(cfg, store, val, epoch, epoch_loss, &mut stop, &mut best, &mut hist, run, &opt)?;
        if halt {
            log::info!("pretrain: early stop after epoch {epoch}");
            break;
        }
    }
    if let Some(run) = run {
        save_checkpoint(&run.path("last.ckpt"), store, Some(&opt), &meta("pretrain", epochs_run))?;
        run.write("pretrain_steps.csv", &hist.steps_csv())?;
        run.write("pretrain_epochs.csv", &hist.epochs_csv())?;
    }
    if let Some(b) = best {
        *store = b;
    }
    Ok(Outcome {
        epochs_run,
        optimizer_steps: opt.steps as usize,
        best_epoch: stop.best_epoch,
        best_metric: stop.best.unwrap_or(f64::NAN),
        step_losses,
        history: hist,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_pretrain_epoch(
    cfg: &RunConfig,
    store: &ParamStore<f32>,
    val: Option<&Dataset>,
    epoch: usize,
    epoch_loss: (f64, usize),
    stop: &mut EarlyStop,
    best: &mut Option<ParamStore<f32>>,
    hist: &mut History,
    run: Option<&RunDir>,
    opt: &AdamW,
) -> Result<bool> {
    let train_loss = epoch_loss.0 / epoch_loss.1.max(1) as f64;
    let metric = match val {
        Some(v) if !v.is_empty() => validation_perplexity(cfg, store, v)?,
        _ => train_loss.exp(),
    };
    let (improved, halt) = stop.update(epoch, metric);
    if improved {
        *best = Some(store.clone());
        if let Some(run) = run {
            save_checkpoint(&run.path("best.ckpt"), store, Some(opt), &meta("pretrain", epoch))?;
        }
    }
    hist.epochs.push(format!("{epoch},{train_loss:.6},{metric:.6},{improved}"));
    log::info!("pretrain epoch {epoch}: loss {train_loss:.4}, val perplexity {metric:.4}");
    Ok(halt)
}

// ---- fine-tuning -----------------------------------------------------------

/// Multi-task fine-tuning with progressive unfreezing, per-epoch mean
/// validation AUROC and early stopping; the best parameters are restored.
pub fn finetune(cfg: &RunConfig, store: &mut ParamStore<f32>, train: &Dataset, val: Option<&Dataset>, run: Option<&RunDir>) -> Result<Outcome> {
    let t = &cfg.train;
    if train.is_empty() {
        return Err(Error::Sizing("no training admissions for fine-tuning".into()));
    }
    let plan = FreezePlan::from_config(t);
    let mut opt = AdamW::from_config(t);
    let mut stop = EarlyStop::new(t.finetune_patience, true);
    let batches_per_epoch = train.len().div_ceil(t.finetune_batch);
    let sched_total = (t.finetune_epochs * batches_per_epoch).max(t.finetune_warmup_steps + 1);
    let mut hist = History {
        step_header: "step,epoch,l_hf,l_t2dm,l_readmit,total,lr_backbone,lr_scratch".into(),
        epoch_header: "epoch,train_loss,val_mean_auroc,trainable_params,improved".into(),
        ..History::default()
    };
    let mut best: Option<ParamStore<f32>> = None;
    let mut step_losses = Vec::new();
    let mut epochs_run = 0;
    let weights = cfg.loss_weights();
    for epoch in 1..=t.finetune_epochs {
        epochs_run = epoch;
        plan.apply(store, epoch, cfg.model.dec_layers);
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::child(cfg.seed, 5000 + epoch as u64).shuffle(&mut order);
        let mut drop_rng = Rng::child(cfg.seed, 6000 + epoch as u64);
        let mut epoch_loss = (0.0, 0usize);
        for idx in order.chunks(t.finetune_batch) {
            let b = train.batch(idx)?;
            if !b.labels.iter().any(|l| l.any_present()) {
                continue;
            }
            let (grads, terms, total, bn) = {
                let net = Net::new(&cfg.model, store);
                let mut tape = Tape::new();
                let mut pass = Pass::train(&mut drop_rng);
                pass.bn_batch_stats = t.bn_batch_stats;
                let (mem, _) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut pass)?;
                let probs = net.classify(&mut tape, &mem, &mut pass)?;
                let terms = net.finetune_loss(&mut tape, probs, &b.labels, &weights)?;
                let total = tape.scalar(terms.total) as f64;
                let bn = std::mem::take(&mut pass.bn_updates);
                (tape.backward(terms.total)?, terms.task, total, bn)
            };
            apply_bn_updates(store, &bn)?;
            let g: Vec<(ParamId, Vec<f32>)> = grads.params().map(|(id, g)| (id, g.to_vec())).collect();
            let step = opt.steps as usize;
            let lr = GroupLr {
                backbone: lr_at(step, t.ft_lr_backbone, t.finetune_warmup_steps, sched_total)?,
                scratch: lr_at(step, t.ft_lr_scratch, t.finetune_warmup_steps, sched_total)?,
            };
            opt.step(store, &g, lr)?;
            step_losses.push(total);
            epoch_loss.0 += total;
            epoch_loss.1 += 1;
            let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
            let mut row = String::new();
            let _ = write!(
                row,
                "{},{},{},{},{},{:.6},{:.3e},{:.3e}",
                opt.steps,
                epoch,
                f(terms[0]),
                f(terms[1]),
                f(terms[2]),
                total,
                lr.backbone,
                lr.scratch
            );
            hist.steps.push(row);
        }
        let train_loss = epoch_loss.0 / epoch_loss.1.max(1) as f64;
        let metric = match val {
            Some(v) if !v.is_empty() => mean_auroc(&predict(cfg, store, v)?, &v.labels),
            _ => -train_loss,
        };
        let (improved, halt) = stop.update(epoch, metric);
        if improved {
            best = Some(store.clone());
            if let Some(run) = run {
                save_checkpoint(&run.path("best.ckpt"), store, Some(&opt), &meta("finetune", epoch))?;
            }
        }
        hist.epochs.push(format!("{epoch},{train_loss:.6},{metric:.6},{},{improved}", store.num_trainable()));
        log::info!("finetune epoch {epoch}: loss {train_loss:.4}, val mean AUROC {metric:.4}");
        if halt {
            log::info!("finetune: early stop after epoch {epoch}");
            break;
        }
    }
    if let Some(run) = run {
        save_checkpoint(&run.path("last.ckpt"), store, Some(&opt), &meta("finetune", epochs_run))?;
        run.write("finetune_steps.csv", &hist.steps_csv())?;
        run.write("finetune_epochs.csv", &hist.epochs_csv())?;
    }
    if let Some(b) = best {
        *store = b;
    }
    store.set_trainable(|_| true);
    Ok(Outcome {
        epochs_run,
        optimizer_steps: opt.steps as usize,
        best_epoch: stop.best_epoch,
        best_metric: stop.best.unwrap_or(f64::NAN),
        step_losses,
        history: hist,
    })
}

/// Parameter names grouped by whether they train in `epoch`.
pub fn trainable_names(store: &ParamStore<f32>, plan: &FreezePlan, epoch: usize, dec_layers: usize) -> HashMap<bool, Vec<String>> {
    let mut out: HashMap<bool, Vec<String>> = HashMap::new();
    for p in store.iter().filter(|p| p.group != ParamGroup::Buffer) {
        out.entry(plan.trainable(&p.name, epoch, dec_layers)).or_default().push(p.name.clone());
    }
    out
}

/// Eval-mode memory tensor and validity for generation.
pub fn encode_for_generation(cfg: &RunConfig, store: &ParamStore<f32>, b: &Batch) -> Result<(Tensor<f32>, Vec<bool>)> {
    let net = Net::new(&cfg.model, store);
    let mut tape = Tape::new();
    let mut pass = Pass::eval();
    let (mem, _) = net.encode_batch(&mut tape, &b.timeline, &b.notes, &mut pass)?;
    Ok((tape.tensor(mem.memory), mem.valid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_counts_consecutive_failures() {
        let mut s = EarlyStop::new(2, false);
        assert_eq!(s.update(1, 5.0), (true, false));
        assert_eq!(s.update(2, 6.0), (false, false));
        assert_eq!(s.update(3, 4.0), (true, false));
        assert_eq!(s.update(4, 4.0), (false, false));
        assert_eq!(s.update(5, 4.5), (false, true));
        assert_eq!(s.best_epoch, 3);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 2e-4, 1000, 50_000).unwrap(), 0.0);
        assert_eq!(lr_at(1000, 2e-4, 1000, 50_000).unwrap(), 2e-4);
        assert_eq!(lr_at(50_000, 2e-4, 1000, 50_000).unwrap(), 0.0);
        assert!(lr_at(5, 1.0, 10, 10).is_err());
    }
}
