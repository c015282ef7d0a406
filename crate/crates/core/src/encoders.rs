//! Structured-timeline encoder, demographic encoder, note embeddings and
//! fusion into the decoder's cross-attention memory.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{note_text, AdmissionRecord, TimelineBatch};
use crate::decoder::Tokenizer;
use crate::error::{Error, Result};
use crate::model::{Net, NoteFusion, Pass};
use crate::tensor::{read_blob_file, write_blob_file, BlobFile, Scalar, Tape, Tensor, Var};

/// Fused sequence the decoder cross-attends to.
#[derive(Clone, Debug)]
pub struct FusedMemory {
    /// `[B, M, d_model]`, where M is T or T + 1 with a note token.
    pub memory: Var,
    /// `[B * M]` key validity.
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Note input for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum NoteBatch {
    /// Token ids per admission for the built-in bag-of-tokens encoder.
    Tokens(Vec<Vec<usize>>),
    /// Precomputed 768-dim vectors, `[B, 768]`.
    Vectors(Tensor<f32>),
}

impl NoteBatch {
    pub fn batch_size(&self) -> usize {
        match self {
            NoteBatch::Tokens(t) => t.len(),
            NoteBatch::Vectors(v) => v.shape()[0],
        }
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        match self {
            NoteBatch::Tokens(t) => Ok(NoteBatch::Tokens(idx.iter().map(|&i| t[i].clone()).collect())),
            NoteBatch::Vectors(v) => {
                let d = v.shape()[1];
                let data = idx.iter().flat_map(|&i| v.data()[i * d..(i + 1) * d].iter().copied()).collect();
                Ok(NoteBatch::Vectors(Tensor::new(vec![idx.len(), d], data)?))
            }
        }
    }

    /// The same notes with every admission's note removed.
    pub fn blank(&self) -> Self {
        match self {
            NoteBatch::Tokens(t) => NoteBatch::Tokens(vec![Vec::new(); t.len()]),
            NoteBatch::Vectors(v) => NoteBatch::Vectors(Tensor::zeros(v.shape())),
        }
    }
}

/// Behaviour of the file-backed provider for an unknown admission.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissingNote {
    Error,
    Zero,
}

/// Source of the 768-dim note embedding.
#[derive(Clone, Debug)]
pub enum NoteProvider {
    /// Trainable bag-of-tokens encoder over the note text (discharge text
    /// with the BHC section removed), truncated to `max_tokens`.
    BuiltIn { tokenizer: Tokenizer, max_tokens: usize },
    /// Precomputed vectors keyed by admission id.
    File {
        vectors: HashMap<String, Vec<f32>>,
        dim: usize,
        missing: MissingNote,
    },
}

impl NoteProvider {
    /// Loads a manifest-plus-blob file with one `[dim]` entry per admission.
    pub fn from_file(path: &Path, missing: MissingNote) -> Result<Self> {
        let blob = read_blob_file(path)?;
        let mut dim = None;
        let mut vectors = HashMap::new();
        for e in blob.entries {
            if e.shape.len() != 1 || dim.is_some_and(|d| d != e.shape[0]) {
                return Err(Error::Load(format!("note vector `{}` has shape {:?}", e.name, e.shape)));
            }
            dim = Some(e.shape[0]);
            vectors.insert(e.name, e.data);
        }
        Ok(NoteProvider::File {
            vectors,
            dim: dim.unwrap_or(768),
            missing,
        })
    }

    pub fn save_vectors(path: &Path, vectors: &[(String, Vec<f32>)]) -> Result<()> {
        let mut blob = BlobFile::default();
        for (id, v) in vectors {
            blob.push(id.clone(), vec![v.len()], v.clone());
        }
        write_blob_file(path, &blob)
    }

    pub fn prepare(&self, records: &[&AdmissionRecord]) -> Result<NoteBatch> {
        match self {
            NoteProvider::BuiltIn { tokenizer, max_tokens } => Ok(NoteBatch::Tokens(
                records
                    .iter()
                    .map(|r| {
                        let mut ids = tokenizer.encode(&note_text(&r.discharge_text));
                        ids.truncate(*max_tokens);
                        ids
                    })
                    .collect(),
            )),
            NoteProvider::File { vectors, dim, missing } => {
                let mut data = Vec::with_capacity(records.len() * dim);
                for r in records {
                    match (vectors.get(&r.admission_id), missing) {
                        (Some(v), _) => data.extend_from_slice(v),
                        (None, MissingNote::Zero) => data.extend(std::iter::repeat_n(0.0, *dim)),
                        (None, MissingNote::Error) => {
                            return Err(Error::Validation {
                                field: "admission_id".into(),
                                msg: format!("no precomputed note vector for `{}`", r.admission_id),
                            })
                        }
                    }
                }
                Tensor::new(vec![records.len(), *dim], data).map(NoteBatch::Vectors)
            }
        }
    }
}

impl<'a, S: Scalar> Net<'a, S> {
    /// CNN stack, positional embeddings and masked Transformer layers:
    /// `[B, T, 128] -> [B, T, d_model]`. Invalid rows are zeroed before and
    /// after every convolution block so padding never leaks into valid
    /// positions.
    pub fn encode_structured(&self, tape: &mut Tape<'a, S>, x: Var, valid: &[bool], pass: &mut Pass<'_>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.d_event || valid.len() != shape[0] * shape[1] {
            return Err(Error::Dimension {
                op: "encode_structured",
                lhs: shape,
                rhs: vec![valid.len()],
            });
        }
        let t = shape[1];
        if t > self.cfg.seq_len {
            return Err(Error::config(
                "model.seq_len",
                format!("timeline length {t} exceeds the positional table ({})", self.cfg.seq_len),
            ));
        }
        let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let mut h = tape.mask_rows(x, &mask)?;
        for (conv, bn) in [("encoder.conv1", "encoder.bn1"), ("encoder.conv2", "encoder.bn2")] {
            let w = self.p(tape, &format!("{conv}.weight"))?;
            let b = self.p(tape, &format!("{conv}.bias"))?;
            h = tape.conv1d(h, w, b)?;
            h = self.batch_norm(tape, h, bn, valid, pass)?;
            h = tape.relu(h)?;
            h = tape.mask_rows(h, &mask)?;
        }
        let w = self.p(tape, "encoder.conv3.weight")?;
        let b = self.p(tape, "encoder.conv3.bias")?;
        h = tape.conv1d(h, w, b)?;
        h = self.layer_norm(tape, h, "encoder.ln3")?;
        h = tape.gelu(h)?;
        h = tape.mask_rows(h, &mask)?;
        let pos = self.positions(tape, "encoder.pos_embedding", t)?;
        h = tape.add_suffix(h, pos)?;
        let p = self.cfg.dropout;
        for i in 0..self.cfg.enc_layers {
            let pre = format!("encoder.layers.{i}");
            let a = self.layer_norm(tape, h, &format!("{pre}.ln1"))?;
            let a = self.attention(tape, a, a, &format!("{pre}.attn"), Some(valid), false, self.cfg.enc_heads, true)?;
            let a = pass.dropout(tape, a, p)?;
            h = tape.add(h, a)?;
            let f = self.layer_norm(tape, h, &format!("{pre}.ln2"))?;
            let f = self.ffn(tape, f, &format!("{pre}.ffn"))?;
            let f = pass.dropout(tape, f, p)?;
            h = tape.add(h, f)?;
        }
        Ok(h)
    }

    /// Demographic vector `[B, d_demo]` to `[B, d_model]`.
    pub fn encode_features(&self, tape: &mut Tape<'a, S>, demo: Var) -> Result<Var> {
        let h = self.linear(tape, demo, "features.fc1")?;
        let h = tape.gelu(h)?;
        self.linear(tape, h, "features.fc2")
    }

    /// Note embeddings `[B, note_dim]`. Built-in notes are the mean of
    /// their token embeddings; an empty note is the zero vector.
    pub fn encode_note(&self, tape: &mut Tape<'a, S>, notes: &NoteBatch) -> Result<Var> {
        match notes {
            NoteBatch::Vectors(v) => {
                if v.shape().len() != 2 || v.shape()[1] != self.cfg.note_dim {
                    return Err(Error::Dimension {
                        op: "encode_note",
                        lhs: v.shape().to_vec(),
                        rhs: vec![self.cfg.note_dim],
                    });
                }
                Ok(tape.input(v.cast()))
            }
            NoteBatch::Tokens(ids) => {
                let b = ids.len();
                let flat: Vec<usize> = ids
                    .iter()
                    .flat_map(|t| t.iter().take(self.cfg.note_max_tokens).copied())
                    .collect();
                if flat.is_empty() {
                    return Ok(tape.input(Tensor::zeros(&[b, self.cfg.note_dim])));
                }
                let table = self.p(tape, "note.token_embedding")?;
                let rows = tape.embedding(table, &flat)?;
                let mut pool = vec![S::zero(); b * flat.len()];
                let mut col = 0;
                for (r, t) in ids.iter().enumerate() {
                    let n = t.len().min(self.cfg.note_max_tokens);
                    for c in col..col + n {
                        pool[r * flat.len() + c] = S::of(1.0 / n as f64);
                    }
                    col += n;
                }
                let pool = tape.input(Tensor::new(vec![b, flat.len()], pool)?);
                tape.matmul(pool, rows)
            }
        }
    }

    /// `LayerNorm(structured + demo + proj(note))`, with the two
    /// admission-level terms broadcast over time. With token fusion the
    /// projected note is instead appended as one extra valid step.
    pub fn fuse(&self, tape: &mut Tape<'a, S>, structured: Var, demo: Var, note: Var, valid: &[bool]) -> Result<FusedMemory> {
        let shape = tape.shape(structured).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let proj = self.linear(tape, note, "fusion.note_proj")?;
        let mut h = tape.add_expand_mid(structured, demo)?;
        let mut valid = valid.to_vec();
        let mut len = t;
        match self.cfg.note_fusion {
            NoteFusion::Add => h = tape.add_expand_mid(h, proj)?,
            NoteFusion::Token => {
                h = tape.concat_mid(h, proj)?;
                len = t + 1;
                valid = (0..b)
                    .flat_map(|i| valid[i * t..(i + 1) * t].iter().copied().chain([true]))
                    .collect();
            }
        }
        let memory = self.layer_norm(tape, h, "fusion.ln")?;
        Ok(FusedMemory {
            memory,
            valid,
            batch: b,
            len,
        })
    }

    /// Timeline, demographics and note to fused memory in one call.
    pub fn encode_batch(&self, tape: &mut Tape<'a, S>, batch: &TimelineBatch, notes: &NoteBatch, pass: &mut Pass<'_>) -> Result<(FusedMemory, Var)> {
        let x = tape.input(batch.embeddings.cast());
        let h = self.encode_structured(tape, x, &batch.valid_mask, pass)?;
        let memory = self.fuse_inputs(tape, h, batch, notes, &batch.valid_mask)?;
        Ok((memory, h))
    }

    /// Fuses encoder output `h` with the batch's demographics and notes.
    pub fn fuse_inputs(&self, tape: &mut Tape<'a, S>, h: Var, batch: &TimelineBatch, notes: &NoteBatch, valid: &[bool]) -> Result<FusedMemory> {
        let demo_in = tape.input(batch.demographics.cast());
        let demo = self.encode_features(tape, demo_in)?;
        let note = self.encode_note(tape, notes)?;
        self.fuse(tape, h, demo, note, valid)
    }
}
