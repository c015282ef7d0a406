//! Fixed layout of the 128-dim event-group vector.
//!
//! | dims     | content                                   |
//! |----------|-------------------------------------------|
//! | 0..96    | mean of the group's code embeddings       |
//! | 96..120  | scaled numeric values, slots per kind     |
//! | 120      | hours since admission / 24                |
//! | 121      | hours since previous group / 24           |
//! | 122..128 | kind-group presence flags                 |

use std::ops::Range;

use super::EventKind;

pub const D_EVENT: usize = 128;
pub const D_CODE: usize = 96;
pub const NUMERIC: Range<usize> = 96..120;
pub const TIME_DIM: usize = 120;
pub const GAP_DIM: usize = 121;
pub const FLAG_START: usize = 122;
pub const N_FLAGS: usize = 6;
/// Time features per step: hours since admission and gap, both / 24.
pub const D_TIME: usize = 2;
/// Demographic vector: standardised age, is-female, is-male.
pub const D_DEMO: usize = 3;
/// Hours per unit of the scaled time features.
pub const TIME_SCALE_HOURS: f64 = 24.0;

/// Numeric slot range for kinds that carry a value.
pub fn slot_range(kind: EventKind) -> Option<Range<usize>> {
    match kind {
        EventKind::Lab => Some(96..108),
        EventKind::Vital => Some(108..114),
        EventKind::Io => Some(114..116),
        EventKind::Device => Some(116..118),
        EventKind::MedIv => Some(118..119),
        EventKind::LabCategorical => Some(119..120),
        EventKind::Diagnosis | EventKind::Procedure | EventKind::MedOral => None,
    }
}

/// Presence-flag offset (0..6) of a kind: diagnosis, procedure, labs,
/// medications, vitals, other (io and device).
pub fn flag_index(kind: EventKind) -> usize {
    match kind {
        EventKind::Diagnosis => 0,
        EventKind::Procedure => 1,
        EventKind::Lab | EventKind::LabCategorical => 2,
        EventKind::MedOral | EventKind::MedIv => 3,
        EventKind::Vital => 4,
        EventKind::Io | EventKind::Device => 5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_ranges_tile_the_numeric_block() {
        let mut covered = vec![0; D_EVENT];
        for k in EventKind::ALL {
            if let Some(r) = slot_range(k) {
                for d in r {
                    covered[d] += 1;
                }
            }
        }
        assert!(NUMERIC.clone().all(|d| covered[d] == 1));
        assert_eq!(FLAG_START + N_FLAGS, D_EVENT);
    }
}
