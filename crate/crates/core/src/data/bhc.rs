use super::AdmissionRecord;

const HEADER: &str = "brief hospital course";

fn is_bhc_header(line: &str) -> bool {
    line.trim().to_lowercase().starts_with(HEADER)
}

/// A line that opens a new section: colon-terminated, or all capitals
/// with at least two words or six letters (so short acronyms such as
/// "CHF" on a line of their own stay content).
fn is_section_header(line: &str) -> bool {
    let t = line.trim();
    if t.is_empty() {
        return false;
    }
    if t.ends_with(':') {
        return true;
    }
    let letters: Vec<char> = t.chars().filter(|c| c.is_alphabetic()).collect();
    let words = t.split_whitespace().count();
    !letters.is_empty() && letters.iter().all(|c| c.is_uppercase()) && (words >= 2 || letters.len() >= 6)
}

/// Line span `(header, end)` of the section, `end` exclusive.
fn bhc_span(lines: &[&str]) -> Option<(usize, usize)> {
    let start = lines.iter().position(|l| is_bhc_header(l))?;
    let end = lines[start + 1..]
        .iter()
        .position(|l| is_section_header(l))
        .map_or(lines.len(), |p| start + 1 + p);
    Some((start, end))
}

/// Text of the "Brief Hospital Course" section, up to the next section
/// header; empty when the header is absent.
pub fn extract_bhc(discharge_text: &str) -> String {
    let lines: Vec<&str> = discharge_text.lines().collect();
    let Some((start, end)) = bhc_span(&lines) else {
        return String::new();
    };
    let mut parts: Vec<&str> = Vec::new();
    let header = lines[start].trim();
    let inline = header.get(HEADER.len()..).unwrap_or("").trim_start_matches(':').trim();
    if !inline.is_empty() {
        parts.push(inline);
    }
    parts.extend(lines[start + 1..end].iter().map(|l| l.trim()));
    parts.join("\n").trim().to_string()
}

/// Discharge text with the BHC section removed, so that the note input
/// never contains the generation target.
pub fn note_text(discharge_text: &str) -> String {
    let lines: Vec<&str> = discharge_text.lines().collect();
    match bhc_span(&lines) {
        None => discharge_text.to_string(),
        Some((start, end)) => lines[..start]
            .iter()
            .chain(&lines[end..])
            .copied()
            .collect::<Vec<_>>()
            .join("\n"),
    }
}

/// Generation target: the explicit field, else the extracted section.
pub fn bhc_target(record: &AdmissionRecord) -> String {
    if record.bhc_text.is_empty() {
        extract_bhc(&record.discharge_text)
    } else {
        record.bhc_text.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_between_headers() {
        let t = "Chief Complaint:\ndyspnea\nBrief Hospital Course:\nX\nDischarge Medications:\naspirin";
        assert_eq!(extract_bhc(t), "X");
        assert_eq!(note_text(t), "Chief Complaint:\ndyspnea\nDischarge Medications:\naspirin");
    }

    #[test]
    fn absent_header_is_empty() {
        assert_eq!(extract_bhc("Plan: rest\nfollow up"), "");
    }

    #[test]
    fn header_at_end_takes_remainder() {
        let t = "HPI:\nfoo\nbrief hospital course\nline one\nline two: details";
        assert_eq!(extract_bhc(t), "line one\nline two: details");
    }

    #[test]
    fn all_caps_header_ends_section() {
        let t = "BRIEF HOSPITAL COURSE: inline start\nmore\nDISCHARGE CONDITION\nstable";
        assert_eq!(extract_bhc(t), "inline start\nmore");
    }
}
