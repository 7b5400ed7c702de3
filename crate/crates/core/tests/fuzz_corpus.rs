//! Replays the checked-in fuzz seeds through the fuzzed entry points.

use std::path::PathBuf;

use fedadapt::bench::checkpoint::{decode_checkpoint, encode_tensors};
use fedadapt::bench::config::ExperimentConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn checkpoint_seeds() {
    let seeds = seeds("decode_checkpoint");
    assert!(seeds.len() >= 5);
    let mut decoded = 0;
    for (name, bytes) in &seeds {
        if let Ok(tensors) = decode_checkpoint(bytes) {
            let refs: Vec<_> = tensors.iter().collect();
            assert_eq!(&encode_tensors(&refs).unwrap(), bytes, "{name}");
            decoded += 1;
        }
    }
    // valid seeds: empty, one_tensor, two_tensors, toy_adapters
    assert_eq!(decoded, 4);
}

#[test]
fn config_seeds() {
    let seeds = seeds("parse_config");
    let mut parsed = 0;
    for (name, bytes) in &seeds {
        let text = std::str::from_utf8(bytes).unwrap();
        let result = ExperimentConfig::from_toml_str(text);
        assert_eq!(result.is_ok(), !name.starts_with("invalid"), "{name}: {result:?}");
        parsed += usize::from(result.is_ok());
    }
    assert_eq!(parsed, seeds.len() - 1);
}
