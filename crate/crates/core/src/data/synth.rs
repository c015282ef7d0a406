//! Deterministic synthetic cohort with planted label rules.
//!
//! * `hf = 1` iff `DX_HF_RISK` is present and the admission's mean BNP
//!   z-score (reference mean 400, sd 250) is positive.
//! * `t2dm = 1` iff `RX_METFORMIN` is present or at least two glucose
//!   results exceed 200.
//! * `readmit_30d` is a Bernoulli draw from a logistic function of age and
//!   event count, so it carries irreducible noise.
//!
//! In [`SynthMode::FinalEvent`] the hf label instead depends only on the
//! BNP value in the final event group, whose level follows a trend that
//! is visible in the earlier groups. The summary text does not mention it.

use super::{AdmissionRecord, Demographics, Event, EventKind, Labels, Sex};
use crate::tensor::Rng;

pub const BNP_REF_MEAN: f64 = 400.0;
pub const BNP_REF_STD: f64 = 250.0;
pub const GLUCOSE_THRESHOLD: f64 = 200.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SynthMode {
    #[default]
    Standard,
    FinalEvent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthConfig {
    pub mode: SynthMode,
}

const DIAGNOSES: [&str; 7] = ["DX_HTN", "DX_CKD", "DX_COPD", "DX_AFIB", "DX_PNA", "DX_UTI", "DX_SEPSIS"];
const PROCEDURES: [&str; 4] = ["PROC_ECHO", "PROC_CXR", "PROC_CENTRAL_LINE", "PROC_DIALYSIS"];
const ORAL_MEDS: [&str; 4] = ["RX_LISINOPRIL", "RX_ASPIRIN", "RX_ATORVASTATIN", "RX_FUROSEMIDE"];
const COMPLAINTS: [&str; 6] = [
    "shortness of breath",
    "chest pain",
    "fever",
    "weakness",
    "abdominal pain",
    "confusion",
];
/// (code, mean, sd)
const LABS: [(&str, f64, f64); 6] = [
    ("LAB_CREAT", 1.2, 0.5),
    ("LAB_NA", 138.0, 4.0),
    ("LAB_K", 4.1, 0.5),
    ("LAB_HGB", 12.0, 1.8),
    ("LAB_WBC", 9.0, 3.0),
    ("LAB_LACTATE", 1.6, 0.7),
];
const VITALS: [(&str, f64, f64); 5] = [
    ("VITAL_HR", 85.0, 15.0),
    ("VITAL_SBP", 125.0, 20.0),
    ("VITAL_RR", 18.0, 4.0),
    ("VITAL_SPO2", 95.0, 3.0),
    ("VITAL_TEMP", 37.0, 0.6),
];

fn sentence_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

struct Builder<'r> {
    rng: &'r mut Rng,
    events: Vec<Event>,
}

impl Builder<'_> {
    fn push(&mut self, t: f64, code: &str, kind: EventKind, value: Option<f64>, category: Option<&str>) {
        self.events.push(Event {
            t,
            code: code.to_string(),
            value: value.map(|v| (v * 100.0).round() / 100.0),
            value_category: category.map(str::to_string),
            kind,
        });
    }

    fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.rng.normal()
    }
}

struct PatientTraits {
    age: f64,
    sex: Sex,
    hf_risk: bool,
    high_bnp: bool,
    diabetic: bool,
    stress_hyperglycemia: bool,
}

fn draw_traits(rng: &mut Rng) -> PatientTraits {
    let hf_risk = rng.bernoulli(0.22);
    PatientTraits {
        age: (64.0 + 14.0 * rng.normal()).clamp(18.0, 95.0).round(),
        sex: if rng.bernoulli(0.5) { Sex::F } else { Sex::M },
        hf_risk,
        high_bnp: rng.bernoulli(if hf_risk { 0.5 } else { 0.15 }),
        diabetic: rng.bernoulli(0.10),
        stress_hyperglycemia: rng.bernoulli(0.05),
    }
}

/// Distinct sorted hours for `n` event groups.
fn group_hours(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut hours: Vec<usize> = rng.sample_indices(n * 3, n);
    hours.sort_unstable();
    hours.into_iter().map(|h| h as f64).collect()
}

fn admission(rng: &mut Rng, traits: &PatientTraits, pid: &str, aid: &str, mode: SynthMode) -> AdmissionRecord {
    let n_groups = 6 + rng.below(22);
    let hours = group_hours(rng, n_groups);
    let mut b = Builder { rng, events: Vec::new() };

    // admission diagnoses at the first group
    let t0 = hours[0];
    let hf_dx = traits.hf_risk && b.rng.bernoulli(0.95);
    if hf_dx {
        b.push(t0, "DX_HF_RISK", EventKind::Diagnosis, None, None);
    }
    let n_dx = 1 + b.rng.below(3);
    let mut dx: Vec<&str> = b.rng.sample_indices(DIAGNOSES.len(), n_dx).into_iter().map(|i| DIAGNOSES[i]).collect();
    dx.sort_unstable();
    for d in &dx {
        b.push(t0, d, EventKind::Diagnosis, None, None);
    }
    let on_metformin = traits.diabetic && b.rng.bernoulli(0.8);
    if on_metformin {
        b.push(t0, "RX_METFORMIN", EventKind::MedOral, None, None);
    }
    let oral: Vec<&str> = ORAL_MEDS.iter().copied().filter(|_| b.rng.bernoulli(0.35)).collect();
    let iv_vanc = dx.iter().any(|d| matches!(*d, "DX_PNA" | "DX_SEPSIS")) && b.rng.bernoulli(0.8);

    // BNP schedule
    let bnp_groups: Vec<usize> = match mode {
        SynthMode::FinalEvent => (0..n_groups).collect(),
        SynthMode::Standard => {
            let k = if traits.hf_risk {
                2 + b.rng.below(3)
            } else if b.rng.bernoulli(0.3) {
                1 + b.rng.below(2)
            } else {
                0
            };
            let mut g = b.rng.sample_indices(n_groups, k.min(n_groups));
            g.sort_unstable();
            g
        }
    };
    let slope = b.normal(0.0, 1.0);
    let bnp_level = if traits.high_bnp { 700.0 } else { 220.0 };

    // glucose schedule
    let high_glucose = (traits.diabetic && !on_metformin) || traits.stress_hyperglycemia;
    let n_glucose = 1 + b.rng.below(3) + if high_glucose { 1 } else { 0 };
    let glucose_groups = b.rng.sample_indices(n_groups, n_glucose.min(n_groups));

    for (g, &h) in hours.iter().enumerate() {
        if g > 0 && b.rng.bernoulli(0.15) {
            let p = PROCEDURES[b.rng.below(PROCEDURES.len())];
            b.push(h, p, EventKind::Procedure, None, None);
        }
        if let Some(pos) = bnp_groups.iter().position(|&x| x == g) {
            let v = match mode {
                SynthMode::Standard => b.normal(bnp_level, if traits.high_bnp { 120.0 } else { 90.0 }),
                SynthMode::FinalEvent => {
                    let frac = if n_groups > 1 { pos as f64 / (n_groups - 1) as f64 } else { 1.0 };
                    BNP_REF_MEAN + BNP_REF_STD * (1.5 * slope * (2.0 * frac - 1.0) + b.normal(0.0, 0.25))
                }
            };
            b.push(h, "LAB_BNP", EventKind::Lab, Some(v.max(5.0)), None);
        }
        if glucose_groups.contains(&g) {
            let v = if high_glucose { b.normal(265.0, 35.0) } else { b.normal(120.0, 22.0) };
            b.push(h, "LAB_GLUCOSE", EventKind::Lab, Some(v.max(40.0)), None);
        }
        if b.rng.bernoulli(0.35) {
            let (code, m, s) = LABS[b.rng.below(LABS.len())];
            let v = b.normal(m, s);
            b.push(h, code, EventKind::Lab, Some(v.max(0.0)), None);
        }
        if b.rng.bernoulli(0.1) {
            let c = if b.rng.bernoulli(0.2) { "positive" } else { "negative" };
            b.push(h, "LABC_UA_NITRITE", EventKind::LabCategorical, None, Some(c));
        }
        if b.rng.bernoulli(0.6) {
            let k = 1 + b.rng.below(3);
            for i in b.rng.sample_indices(VITALS.len(), k) {
                let (code, m, s) = VITALS[i];
                let v = b.normal(m, s);
                b.push(h, code, EventKind::Vital, Some(v), None);
            }
        }
        if g == 0 {
            for m in &oral {
                b.push(h, m, EventKind::MedOral, None, None);
            }
        }
        if iv_vanc && g == 1.min(n_groups - 1) {
            let dur = b.normal(72.0, 24.0).max(12.0);
            b.push(h, "IV_VANCOMYCIN", EventKind::MedIv, Some(dur), None);
        }
        if b.rng.bernoulli(0.2) {
            let v = b.normal(1500.0, 400.0).max(0.0);
            b.push(h, "IO_URINE_OUT", EventKind::Io, Some(v), None);
        }
        if b.rng.bernoulli(0.1) {
            let v = (0.21 + 0.5 * b.rng.uniform()).min(1.0);
            b.push(h, "DEV_FIO2", EventKind::Device, Some(v), None);
        }
        if b.rng.bernoulli(0.05) {
            let modes = ["nasal_cannula", "room_air", "ventilator"];
            let m = *b.rng.choose(&modes);
            b.push(h, "DEV_O2_MODE", EventKind::Device, None, Some(m));
        }
    }
    let rng = b.rng;
    let events = b.events;

    // planted labels
    let bnp: Vec<f64> = events.iter().filter(|e| e.code == "LAB_BNP").filter_map(|e| e.value).collect();
    let hf = match mode {
        SynthMode::Standard => {
            let mean_z = if bnp.is_empty() {
                f64::NEG_INFINITY
            } else {
                bnp.iter().map(|v| (v - BNP_REF_MEAN) / BNP_REF_STD).sum::<f64>() / bnp.len() as f64
            };
            hf_dx && mean_z > 0.0
        }
        SynthMode::FinalEvent => bnp.last().is_some_and(|&v| v > BNP_REF_MEAN),
    };
    let has_metformin = events.iter().any(|e| e.code == "RX_METFORMIN");
    let n_high_glucose = events
        .iter()
        .filter(|e| e.code == "LAB_GLUCOSE" && e.value.is_some_and(|v| v > GLUCOSE_THRESHOLD))
        .count();
    let t2dm = has_metformin || n_high_glucose >= 2;
    let age_z = (traits.age - 64.0) / 14.0;
    let count_z = (events.len() as f64 - 42.0) / 18.0;
    let logit = -2.6 + 1.5 * age_z + 0.8 * count_z;
    let readmit = rng.bernoulli(1.0 / (1.0 + (-logit).exp()));

    // text
    let complaint = if hf_dx && rng.bernoulli(0.5) {
        COMPLAINTS[0]
    } else {
        COMPLAINTS[rng.below(COMPLAINTS.len())]
    };
    let who = match traits.sex {
        Sex::F => "woman",
        Sex::M => "man",
    };
    let mut bhc = vec![format!("{}-year-old {who} admitted with {complaint}.", traits.age)];
    if hf_dx {
        bhc.push("History notable for heart failure risk.".into());
    }
    // In final-event mode the label lives only in the structured timeline.
    if hf && mode == SynthMode::Standard {
        bhc.push("BNP was elevated and she was diuresed with furosemide.".replace(
            "she",
            if traits.sex == Sex::F { "she" } else { "he" },
        ));
    }
    if has_metformin {
        bhc.push("Home metformin was continued for diabetes.".into());
    }
    if n_high_glucose >= 2 {
        bhc.push("Hyperglycemia was managed with insulin.".into());
    }
    if dx.contains(&"DX_PNA") {
        bhc.push("Chest imaging showed pneumonia.".into());
    }
    if dx.contains(&"DX_SEPSIS") {
        bhc.push("Sepsis criteria were met on arrival.".into());
    }
    if events.iter().any(|e| e.code == "IV_VANCOMYCIN") {
        bhc.push("Treated with IV vancomycin.".into());
    }
    if events.iter().any(|e| e.code == "PROC_DIALYSIS") {
        bhc.push("Dialysis was performed.".into());
    }
    let dest = if traits.age > 80.0 { "to rehab" } else { "home" };
    bhc.push(format!("Discharged {dest} in stable condition."));
    let bhc_text = bhc.join(" ");
    let mut meds: Vec<&str> = oral.iter().map(|m| m.trim_start_matches("RX_")).collect();
    if has_metformin {
        meds.push("METFORMIN");
    }
    let meds = if meds.is_empty() {
        "none".to_string()
    } else {
        meds.iter().map(|m| m.to_lowercase()).collect::<Vec<_>>().join(", ")
    };
    let discharge_text = format!(
        "Chief Complaint:\n{}\n\nHistory of Present Illness:\n{}-year-old {who} presenting with {complaint}.\n\nBrief Hospital Course:\n{bhc_text}\n\nDischarge Medications:\n{meds}\n\nDISCHARGE CONDITION\nStable.",
        sentence_case(complaint),
        traits.age
    );

    AdmissionRecord {
        patient_id: pid.to_string(),
        admission_id: aid.to_string(),
        demographics: Demographics {
            age_years: traits.age,
            sex: traits.sex,
        },
        events,
        discharge_text,
        bhc_text,
        labels: Labels {
            hf: Some(hf as u8),
            t2dm: Some(t2dm as u8),
            readmit_30d: Some(readmit as u8),
        },
    }
}

/// `n` admissions from patients with one to three admissions each.
pub fn generate_synthetic_cohort(n: usize, seed: u64, config: &SynthConfig) -> Vec<AdmissionRecord> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    let mut patient = 0usize;
    while out.len() < n {
        let traits = draw_traits(&mut rng);
        let u = rng.uniform();
        let k = if u < 0.6 {
            1
        } else if u < 0.9 {
            2
        } else {
            3
        };
        let pid = format!("P{patient:05}");
        for _ in 0..k.min(n - out.len()) {
            let aid = format!("A{:06}", out.len());
            out.push(admission(&mut rng, &traits, &pid, &aid, config.mode));
        }
        patient += 1;
    }
    out
}
