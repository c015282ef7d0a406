use std::collections::BTreeMap;
use std::path::Path;

use super::layout::*;
use super::{AdmissionRecord, EventKind, NormStats, Sex, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{read_blob_file, write_blob_file, BlobFile, Rng, Tensor};

/// Vitals are carried forward into later groups within this many hours.
pub const VITAL_FILL_HOURS: f64 = 6.0;

/// Fixed, seeded code-embedding table `[K+1, D_CODE]` (row 0 is UNKNOWN).
#[derive(Clone, Debug, PartialEq)]
pub struct CodeEmbeddings {
    table: Vec<f32>,
    rows: usize,
}

impl CodeEmbeddings {
    /// Rows drawn from N(0, 1/D_CODE) so each row has roughly unit norm.
    pub fn seeded(rows: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let std = 1.0 / (D_CODE as f64).sqrt();
        let table = (0..rows * D_CODE).map(|_| (rng.normal() * std) as f32).collect();
        Self { table, rows }
    }

    pub fn from_table(rows: usize, table: Vec<f32>) -> Result<Self> {
        if table.len() != rows * D_CODE {
            return Err(Error::Dimension {
                op: "code_embeddings",
                lhs: vec![rows, D_CODE],
                rhs: vec![table.len()],
            });
        }
        Ok(Self { table, rows })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let i = if i < self.rows { i } else { 0 };
        &self.table[i * D_CODE..(i + 1) * D_CODE]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BlobFile::default();
        f.push("code_embeddings", vec![self.rows, D_CODE], self.table.clone());
        write_blob_file(path, &f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = read_blob_file(path)?;
        let e = f
            .get("code_embeddings")
            .ok_or_else(|| Error::Load("missing tensor `code_embeddings`".into()))?;
        Self::from_table(e.shape[0], e.data.clone())
    }
}

/// One encoded admission: `T` event-group vectors with mask and time features.
#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    pub admission_id: String,
    /// `[T, D_EVENT]`
    pub embeddings: Vec<f32>,
    pub valid: Vec<bool>,
    /// `[T, D_TIME]`
    pub time: Vec<f32>,
    pub demographics: [f32; D_DEMO],
    /// Set when the record had no events (the row is all padding).
    pub empty: bool,
    /// Event groups before truncation to `T`.
    pub n_groups: usize,
}

impl Timeline {
    pub fn seq_len(&self) -> usize {
        self.valid.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn step(&self, t: usize) -> &[f32] {
        &self.embeddings[t * D_EVENT..(t + 1) * D_EVENT]
    }
}

pub fn demographics_vector(record: &AdmissionRecord, stats: &NormStats) -> [f32; D_DEMO] {
    let (f, m) = match record.demographics.sex {
        Sex::F => (1.0, 0.0),
        Sex::M => (0.0, 1.0),
    };
    [stats.age_z(record.demographics.age_years) as f32, f, m]
}

/// Encode a record into `seq_len` event-group vectors.
///
/// Events sharing a rounded hour form one group. The most recent
/// `seq_len` groups are kept; shorter timelines are padded at the end
/// with zero rows and `valid = false`.
pub fn build_timeline(
    record: &AdmissionRecord,
    vocab: &Vocabulary,
    stats: &NormStats,
    codes: &CodeEmbeddings,
    seq_len: usize,
) -> Result<Timeline> {
    if seq_len == 0 {
        return Err(Error::config("data.seq_len", "must be >= 1"));
    }
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for (i, e) in record.events.iter().enumerate() {
        let h = e.t.round();
        match groups.last_mut() {
            Some((gh, members)) if *gh == h => members.push(i),
            _ => groups.push((h, vec![i])),
        }
    }
    let n_groups = groups.len();
    let mut rows: Vec<[f32; D_EVENT]> = Vec::with_capacity(n_groups);
    let mut last_vital: BTreeMap<&str, (f64, usize, f64)> = BTreeMap::new();
    let mut prev_hour = None;
    for (hour, members) in &groups {
        let mut v = [0.0f32; D_EVENT];
        let mut code_sum = [0.0f64; D_CODE];
        let mut slot_sum = [0.0f64; D_EVENT];
        let mut slot_n = [0usize; D_EVENT];
        let mut present_vitals: Vec<&str> = Vec::new();
        for &i in members {
            let e = &record.events[i];
            for (acc, &x) in code_sum.iter_mut().zip(codes.row(vocab.index_of(&e.code))) {
                *acc += x as f64;
            }
            if let Some((slot, x)) = stats.encode_event(e) {
                slot_sum[slot] += x;
                slot_n[slot] += 1;
                if e.kind == EventKind::Vital {
                    last_vital.insert(&e.code, (*hour, slot, x));
                    present_vitals.push(&e.code);
                }
            }
            v[FLAG_START + flag_index(e.kind)] = 1.0;
        }
        for (code, &(h, slot, x)) in &last_vital {
            if !present_vitals.contains(code) && hour - h <= VITAL_FILL_HOURS && slot_n[slot] == 0 {
                slot_sum[slot] = x;
                slot_n[slot] = 1;
            }
        }
        let n = members.len() as f64;
        for d in 0..D_CODE {
            v[d] = (code_sum[d] / n) as f32;
        }
        for d in NUMERIC {
            if slot_n[d] > 0 {
                v[d] = (slot_sum[d] / slot_n[d] as f64) as f32;
            }
        }
        v[TIME_DIM] = (hour / TIME_SCALE_HOURS) as f32;
        v[GAP_DIM] = (prev_hour.map_or(0.0, |p| hour - p) / TIME_SCALE_HOURS) as f32;
        prev_hour = Some(*hour);
        rows.push(v);
    }
    let keep = &rows[rows.len().saturating_sub(seq_len)..];
    let mut embeddings = vec![0.0f32; seq_len * D_EVENT];
    let mut time = vec![0.0f32; seq_len * D_TIME];
    let mut valid = vec![false; seq_len];
    for (t, row) in keep.iter().enumerate() {
        embeddings[t * D_EVENT..(t + 1) * D_EVENT].copy_from_slice(row);
        time[t * D_TIME] = row[TIME_DIM];
        time[t * D_TIME + 1] = row[GAP_DIM];
        valid[t] = true;
    }
    let empty = n_groups == 0;
    if empty {
        log::warn!("admission {} has no events; encoded as padding only", record.admission_id);
    }
    Ok(Timeline {
        admission_id: record.admission_id.clone(),
        embeddings,
        valid,
        time,
        demographics: demographics_vector(record, stats),
        empty,
        n_groups,
    })
}

/// Batched timelines: `embeddings [B, T, 128]`, `valid_mask [B*T]`,
/// `time_features [B, T, 2]`, `demographics [B, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimelineBatch {
    pub embeddings: Tensor<f32>,
    pub valid_mask: Vec<bool>,
    pub time_features: Tensor<f32>,
    pub demographics: Tensor<f32>,
}

impl TimelineBatch {
    pub fn from_timelines(rows: &[&Timeline]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::EmptyInput("batch with no timelines".into()))?;
        let t = first.seq_len();
        let b = rows.len();
        let mut emb = Vec::with_capacity(b * t * D_EVENT);
        let mut valid = Vec::with_capacity(b * t);
        let mut time = Vec::with_capacity(b * t * D_TIME);
        let mut demo = Vec::with_capacity(b * D_DEMO);
        for r in rows {
            if r.seq_len() != t {
                return Err(Error::Dimension {
                    op: "timeline_batch",
                    lhs: vec![t],
                    rhs: vec![r.seq_len()],
                });
            }
            emb.extend_from_slice(&r.embeddings);
            valid.extend_from_slice(&r.valid);
            time.extend_from_slice(&r.time);
            demo.extend_from_slice(&r.demographics);
        }
        Ok(Self {
            embeddings: Tensor::new(vec![b, t, D_EVENT], emb)?,
            valid_mask: valid,
            time_features: Tensor::new(vec![b, t, D_TIME], time)?,
            demographics: Tensor::new(vec![b, D_DEMO], demo)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn valid_count(&self, b: usize) -> usize {
        let t = self.seq_len();
        self.valid_mask[b * t..(b + 1) * t].iter().filter(|&&v| v).count()
    }

    pub fn valid_mask_tensor(&self) -> Tensor<f32> {
        let data = self.valid_mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.batch_size(), self.seq_len()], data).expect("mask matches batch")
    }
}

/// Save encoded timelines in the blob format.
pub fn save_timelines(path: &Path, rows: &[Timeline]) -> Result<()> {
    let first = rows.first().ok_or_else(|| Error::EmptyInput("no timelines to save".into()))?;
    let (n, t) = (rows.len(), first.seq_len());
    let mut f = BlobFile::default();
    f.push("embeddings", vec![n, t, D_EVENT], rows.iter().flat_map(|r| r.embeddings.iter().copied()).collect());
    f.push(
        "valid",
        vec![n, t],
        rows.iter().flat_map(|r| r.valid.iter().map(|&v| if v { 1.0 } else { 0.0 })).collect(),
    );
    f.push("time", vec![n, t, D_TIME], rows.iter().flat_map(|r| r.time.iter().copied()).collect());
    f.push("demographics", vec![n, D_DEMO], rows.iter().flat_map(|r| r.demographics).collect());
    f.push("n_groups", vec![n], rows.iter().map(|r| r.n_groups as f32).collect());
    let ids: Vec<&str> = rows.iter().map(|r| r.admission_id.as_str()).collect();
    f.meta.insert("admission_ids".into(), serde_json::to_string(&ids)?);
    write_blob_file(path, &f)
}

pub fn load_timelines(path: &Path) -> Result<Vec<Timeline>> {
    let f = read_blob_file(path)?;
    let get = |name: &str| f.get(name).ok_or_else(|| Error::Load(format!("missing tensor `{name}`")));
    let emb = get("embeddings")?;
    let (n, t) = (emb.shape[0], emb.shape[1]);
    let valid = get("valid")?;
    let time = get("time")?;
    let demo = get("demographics")?;
    let groups = get("n_groups")?;
    let ids: Vec<String> = serde_json::from_str(
        f.meta
            .get("admission_ids")
            .ok_or_else(|| Error::Load("missing admission_ids".into()))?,
    )?;
    if ids.len() != n {
        return Err(Error::Load(format!("{} ids for {n} timelines", ids.len())));
    }
    Ok((0..n)
        .map(|i| {
            let valid: Vec<bool> = valid.data[i * t..(i + 1) * t].iter().map(|&v| v != 0.0).collect();
            Timeline {
                admission_id: ids[i].clone(),
                embeddings: emb.data[i * t * D_EVENT..(i + 1) * t * D_EVENT].to_vec(),
                empty: groups.data[i] == 0.0,
                valid,
                time: time.data[i * t * D_TIME..(i + 1) * t * D_TIME].to_vec(),
                demographics: [demo.data[i * 3], demo.data[i * 3 + 1], demo.data[i * 3 + 2]],
                n_groups: groups.data[i] as usize,
            }
        })
        .collect())
}
