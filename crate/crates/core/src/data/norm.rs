use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layout::slot_range;
use super::{AdmissionRecord, Event, EventKind, Vocabulary};
use crate::error::{Error, Result};

/// Mean and standard deviation; `std` is clamped to 1 when degenerate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Default for Moments {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl Moments {
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn z(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// `k * n / n_buckets`-th order statistics for `k = 1..n_buckets`.
pub fn quantile_boundaries(values: &[f64], n_buckets: usize) -> Vec<f64> {
    if values.is_empty() || n_buckets < 2 {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (1..n_buckets).map(|k| sorted[k * n / n_buckets]).collect()
}

/// Number of boundaries at or below `v`.
pub fn bucket_of(boundaries: &[f64], v: f64) -> usize {
    boundaries.iter().filter(|&&b| b <= v).count()
}

/// Normalised form of one event value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormValue {
    Z(f64),
    Bucket { index: usize, n_buckets: usize },
    /// `index` 0 is an unseen category; seen ones are `1..=n`.
    Category { index: usize, n: usize },
}

impl NormValue {
    /// Value written into the event vector.
    pub fn scaled(&self) -> f64 {
        match *self {
            NormValue::Z(z) => z,
            NormValue::Bucket { index, n_buckets } => {
                if n_buckets < 2 {
                    0.0
                } else {
                    index as f64 / (n_buckets - 1) as f64
                }
            }
            NormValue::Category { index, n } => {
                if n == 0 {
                    0.0
                } else {
                    index as f64 / n as f64
                }
            }
        }
    }
}

fn is_z_scored(kind: EventKind) -> bool {
    matches!(kind, EventKind::Lab | EventKind::Vital)
}

fn is_bucketed(kind: EventKind) -> bool {
    matches!(kind, EventKind::Io | EventKind::Device | EventKind::MedIv)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Training-split statistics for every numeric feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub n_buckets: usize,
    pub moments: BTreeMap<String, Moments>,
    pub boundaries: BTreeMap<String, Vec<f64>>,
    pub categories: BTreeMap<String, Vec<String>>,
    /// Fallbacks for codes unseen in training, pooled per kind.
    pub kind_moments: BTreeMap<EventKind, Moments>,
    pub kind_boundaries: BTreeMap<EventKind, Vec<f64>>,
    /// Absolute dimension of each code's numeric slot, per kind.
    pub slots: BTreeMap<EventKind, BTreeMap<String, usize>>,
    pub age: Moments,
}

impl NormStats {
    pub fn apply(&self, kind: EventKind, code: &str, value: f64) -> NormValue {
        if is_z_scored(kind) {
            let m = self
                .moments
                .get(code)
                .or_else(|| self.kind_moments.get(&kind))
                .copied()
                .unwrap_or_default();
            NormValue::Z(m.z(value))
        } else if is_bucketed(kind) {
            let b = self
                .boundaries
                .get(code)
                .or_else(|| self.kind_boundaries.get(&kind))
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            NormValue::Bucket {
                index: bucket_of(b, value),
                n_buckets: self.n_buckets,
            }
        } else {
            NormValue::Z(value)
        }
    }

    pub fn apply_category(&self, code: &str, category: &str) -> NormValue {
        let cats = self.categories.get(code).map(Vec::as_slice).unwrap_or(&[]);
        let index = cats.iter().position(|c| c == category).map_or(0, |i| i + 1);
        NormValue::Category { index, n: cats.len() }
    }

    /// Scaled value of an event, or `None` for kinds without a numeric slot
    /// or events without a value.
    pub fn encode_event(&self, e: &Event) -> Option<(usize, f64)> {
        let slot = self.slot_of(e.kind, &e.code)?;
        let v = match (e.value, &e.value_category) {
            (Some(v), _) => self.apply(e.kind, &e.code, v),
            (None, Some(c)) => self.apply_category(&e.code, c),
            (None, None) => return None,
        };
        Some((slot, v.scaled()))
    }

    pub fn slot_of(&self, kind: EventKind, code: &str) -> Option<usize> {
        let range = slot_range(kind)?;
        if let Some(&s) = self.slots.get(&kind).and_then(|m| m.get(code)) {
            return Some(s);
        }
        Some(range.start + (fnv1a(code) % range.len() as u64) as usize)
    }

    pub fn age_z(&self, age: f64) -> f64 {
        self.age.z(age)
    }
}

/// Fit per-code statistics on training records. Slots are assigned in
/// descending code frequency within each kind, wrapping when a kind has
/// more codes than slots.
pub fn fit_norm_stats(records: &[AdmissionRecord], vocab: &Vocabulary, n_buckets: usize) -> Result<NormStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to fit normalisation on".into()));
    }
    if n_buckets < 2 {
        return Err(Error::config("data.n_buckets", "must be >= 2"));
    }
    let mut per_code: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut per_kind: BTreeMap<EventKind, Vec<f64>> = BTreeMap::new();
    let mut code_kind: BTreeMap<String, EventKind> = BTreeMap::new();
    let mut cats: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut kind_codes: BTreeMap<EventKind, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records {
        for e in &r.events {
            code_kind.entry(e.code.clone()).or_insert(e.kind);
            if slot_range(e.kind).is_some() {
                *kind_codes.entry(e.kind).or_default().entry(e.code.clone()).or_default() += 1;
            }
            if let Some(v) = e.value {
                per_code.entry(e.code.clone()).or_default().push(v);
                per_kind.entry(e.kind).or_default().push(v);
            }
            if let Some(c) = &e.value_category {
                let list = cats.entry(e.code.clone()).or_default();
                if !list.contains(c) {
                    list.push(c.clone());
                }
            }
        }
    }
    for list in cats.values_mut() {
        list.sort();
    }
    let mut moments = BTreeMap::new();
    let mut boundaries = BTreeMap::new();
    for (code, values) in &per_code {
        let kind = code_kind[code];
        if is_z_scored(kind) {
            moments.insert(code.clone(), Moments::fit(values));
        } else if is_bucketed(kind) {
            boundaries.insert(code.clone(), quantile_boundaries(values, n_buckets));
        }
    }
    let mut kind_moments = BTreeMap::new();
    let mut kind_boundaries = BTreeMap::new();
    for (&kind, values) in &per_kind {
        if is_z_scored(kind) {
            kind_moments.insert(kind, Moments::fit(values));
        } else if is_bucketed(kind) {
            kind_boundaries.insert(kind, quantile_boundaries(values, n_buckets));
        }
    }
    let mut slots = BTreeMap::new();
    for (kind, codes) in kind_codes {
        let range = slot_range(kind).expect("filtered above");
        let mut ranked: Vec<(String, usize)> = codes
            .into_iter()
            .map(|(c, n)| {
                let total = vocab.count(&c).max(n);
                (c, total)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let m: BTreeMap<String, usize> = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (c, _))| (c, range.start + i % range.len()))
            .collect();
        slots.insert(kind, m);
    }
    let ages: Vec<f64> = records.iter().map(|r| r.demographics.age_years).collect();
    Ok(NormStats {
        n_buckets,
        moments,
        boundaries,
        categories: cats,
        kind_moments,
        kind_boundaries,
        slots,
        age: Moments::fit(&ages),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_score_fixtures() {
        let m = Moments::fit(&[1.0, 2.0, 3.0]);
        assert_eq!(m.z(2.0), 0.0);
        let c = Moments::fit(&[4.0, 4.0]);
        assert_eq!(c.std, 1.0);
        assert_eq!(c.z(6.5), 2.5);
    }

    #[test]
    fn quartile_buckets_by_order_statistics() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = quantile_boundaries(&values, 4);
        // oracle: bucket = number of quartile cut points at or below v
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let cuts = [sorted[25], sorted[50], sorted[75]];
        assert_eq!(b, cuts);
        assert_eq!(bucket_of(&b, 99.0), 3);
        assert_eq!(bucket_of(&b, 1.0), 0);
        assert_eq!(bucket_of(&b, 51.0), 2);
    }

    #[test]
    fn scaled_forms() {
        assert_eq!(NormValue::Bucket { index: 7, n_buckets: 8 }.scaled(), 1.0);
        assert_eq!(NormValue::Category { index: 0, n: 2 }.scaled(), 0.0);
        assert_eq!(NormValue::Category { index: 2, n: 2 }.scaled(), 1.0);
    }
}
