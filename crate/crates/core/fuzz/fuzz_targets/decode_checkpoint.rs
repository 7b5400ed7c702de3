#![no_main]

use fedadapt::bench::checkpoint::{decode_checkpoint, encode_tensors, inspect};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode_checkpoint(data) {
        // anything that decodes re-encodes to the same bytes
        let refs: Vec<_> = tensors.iter().collect();
        assert_eq!(encode_tensors(&refs).unwrap(), data);
        assert!(inspect(data).is_ok());
    }
});
