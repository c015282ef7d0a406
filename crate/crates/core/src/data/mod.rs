//! Admission records, event encoding, timelines, splits and the synthetic
//! cohort generator.

mod bhc;
pub mod layout;
mod norm;
mod record;
mod split;
mod synth;
mod timeline;
mod vocab;

pub use bhc::{bhc_target, extract_bhc, note_text};
pub use norm::{bucket_of, fit_norm_stats, quantile_boundaries, Moments, NormStats, NormValue};
pub use record::{
    parse_meds_jsonl, parse_meds_str, record_from_value, to_jsonl, write_jsonl, AdmissionRecord, Demographics, Event,
    EventKind, Labels, Sex, Task,
};
pub use split::{split_patients, Split};
pub use synth::{generate_synthetic_cohort, SynthConfig, SynthMode, BNP_REF_MEAN, BNP_REF_STD, GLUCOSE_THRESHOLD};
pub use timeline::{
    build_timeline, demographics_vector, load_timelines, save_timelines, CodeEmbeddings, Timeline, TimelineBatch,
    VITAL_FILL_HOURS,
};
pub use vocab::{build_vocab, Vocabulary, UNKNOWN};
