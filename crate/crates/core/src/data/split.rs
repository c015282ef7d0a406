use std::collections::{BTreeSet, HashMap};

use super::AdmissionRecord;
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<AdmissionRecord>,
    pub val: Vec<AdmissionRecord>,
    pub test: Vec<AdmissionRecord>,
}

/// Patient-level split: every admission of a patient lands in the same
/// part. Patients are shuffled under `seed`, then cut by rounded
/// fractions; records keep their input order within each part.
pub fn split_patients(records: &[AdmissionRecord], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::config("data.split", format!("fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let patients: Vec<&str> = records
        .iter()
        .map(|r| r.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let parts = fractions.iter().filter(|&&f| f > 0.0).count();
    if patients.len() < parts {
        return Err(Error::Sizing(format!("{} patients cannot fill {parts} splits", patients.len())));
    }
    let mut order = patients.clone();
    Rng::new(seed).shuffle(&mut order);
    let n = order.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let part_of: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (p, part)
        })
        .collect();
    let mut split = Split::default();
    for r in records {
        match part_of[r.patient_id.as_str()] {
            0 => split.train.push(r.clone()),
            1 => split.val.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    Ok(split)
}
