use gdp::decoder::{Tokenizer, TokenBatch, BOS, EOS, N_RESERVED, PAD, UNK};
use gdp::Error;
use proptest::prelude::*;

const CORPUS: [&str; 4] = [
    "Patient admitted with shortness of breath.",
    "BNP was elevated and she was diuresed with furosemide.",
    "Discharged home in stable condition.",
    "Sepsis criteria were met on arrival. Treated with IV vancomycin.",
];

fn trained() -> Tokenizer {
    Tokenizer::train(&CORPUS, 400).unwrap()
}

#[test]
fn reserved_ids_and_byte_coverage() {
    assert_eq!((BOS, EOS, PAD, UNK, N_RESERVED), (0, 1, 2, 3, 4));
    let t = Tokenizer::bytes_only();
    assert_eq!(t.vocab_size(), N_RESERVED + 256);
    let ids = t.encode("Az");
    assert_eq!(ids, vec![N_RESERVED + b'A' as usize, N_RESERVED + b'z' as usize]);
    let tr = trained();
    assert!(tr.vocab_size() > N_RESERVED + 256 && tr.vocab_size() <= 400);
    for text in CORPUS {
        let ids = tr.encode(text);
        assert!(ids.iter().all(|&i| i >= N_RESERVED));
        assert!(ids.len() < text.len(), "merges should compress `{text}`");
    }
}

#[test]
fn vocabulary_must_hold_reserved_and_bytes() {
    assert!(matches!(Tokenizer::train(&CORPUS, 100), Err(Error::Config { .. })));
}

#[test]
fn truncation_keeps_eos_and_reports_it() {
    let t = trained();
    let (ids, cut) = t.tokenize(CORPUS[1], 5);
    assert!(cut);
    assert_eq!(ids.len(), 5);
    assert_eq!(ids[4], EOS);
    let (ids, cut) = t.tokenize("ok", 50);
    assert!(!cut);
    assert_eq!(ids.last(), Some(&EOS));
    assert_eq!(t.detokenize(&ids), "ok");
}

#[test]
fn detokenize_stops_at_eos_and_skips_reserved() {
    let t = trained();
    let mut ids = vec![BOS, PAD];
    ids.extend(t.encode("stable"));
    ids.push(UNK);
    ids.push(EOS);
    ids.extend(t.encode(" ignored"));
    assert_eq!(t.detokenize(&ids), "stable");
}

#[test]
fn save_and_load_preserve_encoding() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.txt");
    t.save(&path).unwrap();
    let back = Tokenizer::load(&path).unwrap();
    assert_eq!(back.vocab_size(), t.vocab_size());
    for text in CORPUS {
        assert_eq!(back.encode(text), t.encode(text));
    }
    std::fs::write(&path, "not a tokenizer").unwrap();
    assert!(Tokenizer::load(&path).is_err());
}

#[test]
fn token_batch_shifts_and_pads() {
    let b = TokenBatch::from_sequences(&[vec![10, 11, EOS], vec![12, EOS]]).unwrap();
    assert_eq!(b.len, 3);
    assert_eq!(&b.inputs[..3], &[BOS, 10, 11]);
    assert_eq!(&b.targets[..3], &[10, 11, EOS]);
    assert_eq!(&b.inputs[3..], &[BOS, 12, PAD]);
    assert_eq!(&b.targets[3..], &[12, EOS, PAD]);
    assert_eq!(b.include(), vec![true, true, true, true, true, false]);
    assert!(TokenBatch::from_sequences(&[]).is_err());
}

proptest! {
    #[test]
    fn round_trip_on_arbitrary_text(text in "\\PC{0,60}") {
        let t = trained();
        prop_assert_eq!(t.detokenize(&t.encode(&text)), text.clone());
        prop_assert_eq!(Tokenizer::bytes_only().detokenize(&Tokenizer::bytes_only().encode(&text)), text);
    }

    #[test]
    fn encoding_ids_are_in_range(text in "[a-zA-Z .,]{0,80}") {
        let t = trained();
        prop_assert!(t.encode(&text).iter().all(|&i| (N_RESERVED..t.vocab_size()).contains(&i)));
    }
}
