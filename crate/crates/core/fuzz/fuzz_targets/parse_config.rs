#![no_main]

use fedadapt::bench::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        assert!(cfg.validate().is_ok());
        let _ = cfg.checksum();
        let _ = cfg.cells();
    }
});
