//! Fuzz the checkpoint loader: arbitrary bytes must either load into a
//! usable model or fail with an error, never abort or overallocate.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((cfg, params)) = deps_san::load_checkpoint(text) {
        // a loaded checkpoint must round-trip exactly
        let again = deps_san::save_checkpoint(&cfg, &params);
        let (cfg2, params2) = deps_san::load_checkpoint(&again).expect("saved checkpoint reloads");
        assert_eq!(cfg, cfg2);
        let flat = |p: &deps_san::EncoderParams| -> Vec<u64> {
            p.tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(flat(&params), flat(&params2), "weights changed in round trip");
    }
});
