//! Fuzz the attention-trace JSON decoder (the `analyze-entropy` input
//! path) and the entropy computation over whatever deserializes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(file) = serde_json::from_str::<deps_san::cli::TraceFile>(text) else {
        return;
    };
    for sentence in &file.sentences {
        for layer in &sentence.layers {
            for entropy in deps_san::attention_entropy(&layer.attn) {
                assert!(!entropy.is_nan(), "entropy of parsed trace is NaN");
            }
        }
    }
});
