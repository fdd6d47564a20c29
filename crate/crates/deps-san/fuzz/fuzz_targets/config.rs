//! Fuzz the key=value config parser; accepted overrides must apply
//! cleanly to the default training config.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(overrides) = deps_san::cli::config::Overrides::parse(text) else {
        return;
    };
    let mut cfg = deps_san::TrainConfig::default();
    overrides.apply(&mut cfg);
    // validation may reject the combination, but must never panic
    let _ = cfg.validate();
});
