//! Replays the checked-in fuzz seeds through the same round trips the fuzz
//! targets assert.

use std::fs;
use std::path::PathBuf;

use skinseg::checkpoint;
use skinseg::codec::{decode_binary_mask, decode_part_mask, decode_rgb, encode_binary_mask, encode_part_mask};
use skinseg::config::TrainConfig;
use skinseg::relabel::parse_journal;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn mask_seeds_round_trip() {
    for (name, bytes) in seeds("decode_part_mask") {
        let m = decode_part_mask(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(decode_part_mask(&encode_part_mask(&m)).unwrap(), m);
    }
    for (name, bytes) in seeds("decode_binary_mask") {
        let m = decode_binary_mask(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(decode_binary_mask(&encode_binary_mask(&m)).unwrap(), m);
    }
    for (name, bytes) in seeds("decode_image") {
        decode_rgb(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn checkpoint_seeds() {
    let mut decoded = 0;
    for (_, bytes) in seeds("parse_checkpoint") {
        if let Ok(p) = checkpoint::decode(&bytes) {
            assert_eq!(checkpoint::decode(&checkpoint::encode(&p)).unwrap(), p);
            decoded += 1;
        }
    }
    assert!(decoded >= 1);
}

#[test]
fn text_seeds_parse() {
    for (name, bytes) in seeds("parse_train_config") {
        let cfg =
            TrainConfig::from_toml_str(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
    for (name, bytes) in seeds("parse_relabel_journal") {
        let entries = parse_journal(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        let rendered: String = entries.iter().map(|e| format!("{e}\n")).collect();
        assert_eq!(parse_journal(&rendered).unwrap(), entries);
    }
}

#[test]
fn truncated_and_corrupt_inputs_are_errors() {
    for (_, bytes) in seeds("parse_checkpoint") {
        for cut in [0, 1, bytes.len() / 2, bytes.len().saturating_sub(1)] {
            if cut < bytes.len() {
                assert!(checkpoint::decode(&bytes[..cut]).is_err());
            }
        }
    }
    for (_, bytes) in seeds("decode_part_mask") {
        let mut b = bytes.clone();
        let mid = b.len() / 2;
        b[mid] ^= 0xff;
        let _ = decode_part_mask(&b);
        assert!(decode_part_mask(&bytes[..bytes.len() / 2]).is_err());
    }
    assert!(parse_journal("round=x phase=warmup generation=0 metric=0.5\n").is_err());
    assert!(TrainConfig::from_toml_str("seed = [").is_err());
}
