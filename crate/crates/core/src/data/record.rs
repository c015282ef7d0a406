use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Structured event categories, one per row of the encoding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Diagnosis,
    Procedure,
    Lab,
    LabCategorical,
    MedOral,
    MedIv,
    Vital,
    Io,
    Device,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::Diagnosis,
        EventKind::Procedure,
        EventKind::Lab,
        EventKind::LabCategorical,
        EventKind::MedOral,
        EventKind::MedIv,
        EventKind::Vital,
        EventKind::Io,
        EventKind::Device,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Diagnosis => "diagnosis",
            EventKind::Procedure => "procedure",
            EventKind::Lab => "lab",
            EventKind::LabCategorical => "lab_categorical",
            EventKind::MedOral => "med_oral",
            EventKind::MedIv => "med_iv",
            EventKind::Vital => "vital",
            EventKind::Io => "io",
            EventKind::Device => "device",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_years: f64,
    pub sex: Sex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Hours since admission.
    pub t: f64,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_category: Option<String>,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hf: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2dm: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readmit_30d: Option<u8>,
}

/// Classification tasks in head order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Hf,
    T2dm,
    Readmit,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Hf, Task::T2dm, Task::Readmit];

    pub fn name(self) -> &'static str {
        match self {
            Task::Hf => "hf",
            Task::T2dm => "t2dm",
            Task::Readmit => "readmit",
        }
    }
}

impl Labels {
    pub fn get(&self, task: Task) -> Option<u8> {
        match task {
            Task::Hf => self.hf,
            Task::T2dm => self.t2dm,
            Task::Readmit => self.readmit_30d,
        }
    }

    pub fn any_present(&self) -> bool {
        Task::ALL.iter().any(|&t| self.get(t).is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub patient_id: String,
    pub admission_id: String,
    pub demographics: Demographics,
    pub events: Vec<Event>,
    #[serde(default)]
    pub discharge_text: String,
    #[serde(default)]
    pub bhc_text: String,
    #[serde(default)]
    pub labels: Labels,
}

const TOP_LEVEL_KEYS: [&str; 7] = [
    "patient_id",
    "admission_id",
    "demographics",
    "events",
    "discharge_text",
    "bhc_text",
    "labels",
];

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Validation {
        field: field.into(),
        msg: msg.into(),
    }
}

fn req_str(obj: &Map<String, Value>, key: &str, field: &str) -> Result<String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(invalid(field, "must be nonempty")),
        Some(_) => Err(invalid(field, "must be a string")),
        None => Err(invalid(field, "missing")),
    }
}

fn opt_str(obj: &Map<String, Value>, key: &str, field: &str) -> Result<Option<String>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(invalid(field, "must be a string")),
    }
}

fn finite_num(v: &Value, field: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| invalid(field, "must be a finite number"))
}

fn parse_event(v: &Value, i: usize) -> Result<Event> {
    let f = |k: &str| format!("events[{i}].{k}");
    let obj = v.as_object().ok_or_else(|| invalid(format!("events[{i}]"), "must be an object"))?;
    let t = finite_num(obj.get("t").ok_or_else(|| invalid(f("t"), "missing"))?, &f("t"))?;
    if t < 0.0 {
        return Err(invalid(f("t"), "must be >= 0"));
    }
    let code = req_str(obj, "code", &f("code"))?;
    let value = match obj.get("value") {
        None | Some(Value::Null) => None,
        Some(x) => Some(finite_num(x, &f("value"))?),
    };
    let value_category = opt_str(obj, "value_category", &f("value_category"))?;
    if value.is_some() && value_category.is_some() {
        return Err(invalid(f("value"), "value and value_category are mutually exclusive"));
    }
    let kind_s = req_str(obj, "kind", &f("kind"))?;
    let kind = EventKind::parse(&kind_s).ok_or_else(|| invalid(f("kind"), format!("unknown kind `{kind_s}`")))?;
    Ok(Event {
        t,
        code,
        value,
        value_category,
        kind,
    })
}

fn parse_label(obj: &Map<String, Value>, key: &str) -> Result<Option<u8>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_u64() {
            Some(0) => Ok(Some(0)),
            Some(1) => Ok(Some(1)),
            _ => Err(invalid(format!("labels.{key}"), "must be 0 or 1")),
        },
    }
}

/// Validate one JSON value as an admission record. Events are sorted by
/// time (stable, so same-time events keep their order).
pub fn record_from_value(v: &Value) -> Result<AdmissionRecord> {
    let obj = v.as_object().ok_or_else(|| invalid("<record>", "must be a JSON object"))?;
    for k in obj.keys() {
        if !TOP_LEVEL_KEYS.contains(&k.as_str()) {
            log::warn!("ignoring unknown top-level key `{k}`");
        }
    }
    let patient_id = req_str(obj, "patient_id", "patient_id")?;
    let admission_id = req_str(obj, "admission_id", "admission_id")?;
    let demo = obj
        .get("demographics")
        .and_then(Value::as_object)
        .ok_or_else(|| invalid("demographics", "missing or not an object"))?;
    let age_years = finite_num(
        demo.get("age_years").ok_or_else(|| invalid("demographics.age_years", "missing"))?,
        "demographics.age_years",
    )?;
    if age_years < 0.0 {
        return Err(invalid("demographics.age_years", "must be >= 0"));
    }
    let sex = match demo.get("sex").and_then(Value::as_str) {
        Some("F") => Sex::F,
        Some("M") => Sex::M,
        _ => return Err(invalid("demographics.sex", "must be \"F\" or \"M\"")),
    };
    let events_v = obj
        .get("events")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("events", "missing or not an array"))?;
    let mut events = events_v
        .iter()
        .enumerate()
        .map(|(i, e)| parse_event(e, i))
        .collect::<Result<Vec<_>>>()?;
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let labels = match obj.get("labels") {
        None | Some(Value::Null) => Labels::default(),
        Some(Value::Object(l)) => Labels {
            hf: parse_label(l, "hf")?,
            t2dm: parse_label(l, "t2dm")?,
            readmit_30d: parse_label(l, "readmit_30d")?,
        },
        Some(_) => return Err(invalid("labels", "must be an object")),
    };
    Ok(AdmissionRecord {
        patient_id,
        admission_id,
        demographics: Demographics { age_years, sex },
        events,
        discharge_text: opt_str(obj, "discharge_text", "discharge_text")?.unwrap_or_default(),
        bhc_text: opt_str(obj, "bhc_text", "bhc_text")?.unwrap_or_default(),
        labels,
    })
}

/// Parse newline-delimited admission records. Blank lines are skipped.
pub fn parse_meds_str(text: &str) -> Result<Vec<AdmissionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let rec = record_from_value(&v).map_err(|e| match e {
            Error::Validation { field, msg } => Error::Validation {
                field,
                msg: format!("{msg} (line {})", i + 1),
            },
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_meds_jsonl(path: &Path) -> Result<Vec<AdmissionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_meds_str(&text)
}

pub fn to_jsonl(records: &[AdmissionRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl(path: &Path, records: &[AdmissionRecord]) -> Result<()> {
    let text = to_jsonl(records)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
