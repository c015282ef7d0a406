//! Cross-attention decoder: teacher-forced logits, BOS classification and
//! autoregressive generation.

mod tokenizer;

pub use tokenizer::{Tokenizer, BOS, EOS, N_RESERVED, PAD, UNK};

use crate::encoders::FusedMemory;
use crate::error::{Error, Result};
use crate::model::{Net, Pass, TASK_HEADS};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

/// Teacher-forcing inputs and targets for a batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    /// `[B * L]`: BOS followed by the target shifted right, PAD-filled.
    pub inputs: Vec<usize>,
    /// `[B * L]`: target tokens (ending in EOS), PAD-filled.
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// `seqs` are tokenizer outputs, each nonempty and ending in EOS.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::EmptyInput("token batch with no tokens".into()));
        }
        let mut inputs = Vec::with_capacity(seqs.len() * len);
        let mut targets = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            inputs.push(BOS);
            inputs.extend(s.iter().take(s.len().saturating_sub(1)));
            inputs.extend(std::iter::repeat_n(PAD, len - s.len().max(1)));
            targets.extend(s);
            targets.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(Self {
            inputs,
            targets,
            batch: seqs.len(),
            len,
        })
    }

    /// Target positions that count towards the loss.
    pub fn include(&self) -> Vec<bool> {
        self.targets.iter().map(|&t| t != PAD).collect()
    }
}

/// Decoding rule for [`Net::generate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    TopK(usize),
}

impl<'a, S: Scalar> Net<'a, S> {
    /// Final-norm hidden states `[B, L, d_model]` for input tokens `[B * L]`.
    pub fn decode_hidden(&self, tape: &mut Tape<'a, S>, memory: &FusedMemory, inputs: &[usize], len: usize, pass: &mut Pass<'_>) -> Result<Var> {
        let b = memory.batch;
        if inputs.len() != b * len || len == 0 {
            return Err(Error::Dimension {
                op: "decode",
                lhs: vec![b, len],
                rhs: vec![inputs.len()],
            });
        }
        if len > self.cfg.max_len {
            return Err(Error::config("model.max_len", format!("decoder input of length {len} exceeds {}", self.cfg.max_len)));
        }
        let d = self.cfg.d_model;
        let table = self.p(tape, "decoder.token_embedding")?;
        let x = tape.embedding(table, inputs)?;
        let x = tape.reshape(x, &[b, len, d])?;
        let pos = self.positions(tape, "decoder.pos_embedding", len)?;
        let mut h = tape.add_suffix(x, pos)?;
        let p = self.cfg.dropout;
        for i in 0..self.cfg.dec_layers {
            let pre = format!("decoder.layers.{i}");
            let a = self.layer_norm(tape, h, &format!("{pre}.ln1"))?;
            let a = self.attention(tape, a, a, &format!("{pre}.self_attn"), None, true, self.cfg.self_heads, false)?;
            let a = pass.dropout(tape, a, p)?;
            h = tape.add(h, a)?;
            let c = self.layer_norm(tape, h, &format!("{pre}.ln2"))?;
            let c = self.cross_attention(tape, c, memory.memory, &memory.valid, &format!("{pre}.cross_attn"))?;
            let c = pass.dropout(tape, c, p)?;
            h = tape.add(h, c)?;
            let f = self.layer_norm(tape, h, &format!("{pre}.ln3"))?;
            let f = self.ffn(tape, f, &format!("{pre}.ffn"))?;
            let f = pass.dropout(tape, f, p)?;
            h = tape.add(h, f)?;
        }
        self.layer_norm(tape, h, "decoder.final_ln")
    }

    fn cross_attention(&self, tape: &mut Tape<'a, S>, q_in: Var, memory: Var, valid: &[bool], prefix: &str) -> Result<Var> {
        self.attention(tape, q_in, memory, prefix, Some(valid), false, self.cfg.cross_heads, true)
    }

    /// Logits `[B, L, V]` under teacher forcing.
    pub fn forward_teacher_forced(&self, tape: &mut Tape<'a, S>, memory: &FusedMemory, tokens: &TokenBatch, pass: &mut Pass<'_>) -> Result<Var> {
        let h = self.decode_hidden(tape, memory, &tokens.inputs, tokens.len, pass)?;
        let w = self.p(tape, "decoder.lm_head")?;
        tape.linear(h, w, None)
    }

    /// Per-task probabilities `[B, 1]` (hf, t2dm, readmit) read from the
    /// BOS hidden state of a length-1 decoder pass.
    pub fn classify(&self, tape: &mut Tape<'a, S>, memory: &FusedMemory, pass: &mut Pass<'_>) -> Result<[Var; 3]> {
        let b = memory.batch;
        let h = self.decode_hidden(tape, memory, &vec![BOS; b], 1, pass)?;
        let h = tape.reshape(h, &[b, self.cfg.d_model])?;
        let mut out = [h; 3];
        for (slot, task) in out.iter_mut().zip(TASK_HEADS) {
            let z = self.linear(tape, h, &format!("heads.{task}"))?;
            *slot = tape.sigmoid(z)?;
        }
        Ok(out)
    }
}

impl<'a> Net<'a, f32> {
    /// Autoregressive decoding from BOS with cached self-attention keys
    /// and values. Stops at EOS or after `max_len` tokens; the returned
    /// sequences exclude EOS.
    pub fn generate(&self, memory: &Tensor<f32>, valid: &[bool], max_len: usize, mode: Decoding, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        let shape = memory.shape().to_vec();
        let (b, m, d) = (shape[0], shape[1], shape[2]);
        if valid.len() != b * m || d != self.cfg.d_model {
            return Err(Error::Dimension {
                op: "generate",
                lhs: shape,
                rhs: vec![valid.len()],
            });
        }
        let steps = max_len.min(self.cfg.max_len);
        let layers = self.cfg.dec_layers;
        let mut cross = Vec::with_capacity(layers);
        {
            let mut tape: Tape<'a, f32> = Tape::new();
            let mem = tape.input(memory.clone());
            for i in 0..layers {
                let pre = format!("decoder.layers.{i}.cross_attn");
                let k = self.linear(&mut tape, mem, &format!("{pre}.k"))?;
                let v = self.linear(&mut tape, mem, &format!("{pre}.v"))?;
                cross.push((tape.tensor(k), tape.tensor(v)));
            }
        }
        let mut self_cache: Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>)> = vec![(vec![Vec::new(); b], vec![Vec::new(); b]); layers];
        let mut current = vec![BOS; b];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for s in 0..steps {
            let mut tape: Tape<'a, f32> = Tape::new();
            let table = self.p(&mut tape, "decoder.token_embedding")?;
            let x = tape.embedding(table, &current)?;
            let x = tape.reshape(x, &[b, 1, d])?;
            let pos_table = self.p(&mut tape, "decoder.pos_embedding")?;
            let pos = tape.gather_rows(pos_table, &[s])?;
            let mut h = tape.add_suffix(x, pos)?;
            for (i, (ck, cv)) in cross.iter().enumerate() {
                let pre = format!("decoder.layers.{i}");
                let a = self.layer_norm(&mut tape, h, &format!("{pre}.ln1"))?;
                let q = self.linear(&mut tape, a, &format!("{pre}.self_attn.q"))?;
                let k = self.linear(&mut tape, a, &format!("{pre}.self_attn.k"))?;
                let v = self.linear(&mut tape, a, &format!("{pre}.self_attn.v"))?;
                let (kc, vc) = &mut self_cache[i];
                for r in 0..b {
                    kc[r].extend_from_slice(&tape.value(k)[r * d..(r + 1) * d]);
                    vc[r].extend_from_slice(&tape.value(v)[r * d..(r + 1) * d]);
                }
                let kt = tape.input(Tensor::new(vec![b, s + 1, d], kc.concat())?);
                let vt = tape.input(Tensor::new(vec![b, s + 1, d], vc.concat())?);
                let a = tape.attention(q, kt, vt, None, false, self.cfg.self_heads, None)?;
                let a = self.linear(&mut tape, a, &format!("{pre}.self_attn.o"))?;
                h = tape.add(h, a)?;
                let c = self.layer_norm(&mut tape, h, &format!("{pre}.ln2"))?;
                let q = self.linear(&mut tape, c, &format!("{pre}.cross_attn.q"))?;
                let kt = tape.input(ck.clone());
                let vt = tape.input(cv.clone());
                let sent = self.p(&mut tape, &format!("{pre}.cross_attn.sentinel"))?;
                let c = tape.attention(q, kt, vt, Some(valid), false, self.cfg.cross_heads, Some(sent))?;
                let c = self.linear(&mut tape, c, &format!("{pre}.cross_attn.o"))?;
                h = tape.add(h, c)?;
                let f = self.layer_norm(&mut tape, h, &format!("{pre}.ln3"))?;
                let f = self.ffn(&mut tape, f, &format!("{pre}.ffn"))?;
                h = tape.add(h, f)?;
            }
            let h = self.layer_norm(&mut tape, h, "decoder.final_ln")?;
            let w = self.p(&mut tape, "decoder.lm_head")?;
            let logits = tape.linear(h, w, None)?;
            let vocab = self.cfg.vocab;
            for r in 0..b {
                if done[r] {
                    continue;
                }
                let row = &tape.value(logits)[r * vocab..(r + 1) * vocab];
                let next = pick(row, mode, rng);
                if next == EOS {
                    done[r] = true;
                } else {
                    out[r].push(next);
                }
                current[r] = next;
            }
            if done.iter().all(|&x| x) {
                break;
            }
        }
        Ok(out)
    }
}

/// Greedy takes the first maximum; top-k samples from the softmax over the
/// k largest logits.
fn pick(logits: &[f32], mode: Decoding, rng: &mut Rng) -> usize {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0
    };
    match mode {
        Decoding::Greedy => argmax(),
        Decoding::TopK(k) if k <= 1 => argmax(),
        Decoding::TopK(k) => {
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            idx.truncate(k);
            let max = logits[idx[0]] as f64;
            let w: Vec<f64> = idx.iter().map(|&i| (logits[i] as f64 - max).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.uniform() * total;
            for (&i, &wi) in idx.iter().zip(&w) {
                if u < wi {
                    return i;
                }
                u -= wi;
            }
            idx[idx.len() - 1]
        }
    }
}
