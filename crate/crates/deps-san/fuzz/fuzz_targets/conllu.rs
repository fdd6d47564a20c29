//! Fuzz the CoNLL-U parser and, on successfully parsed sentences, the
//! invariants of everything downstream of it: distance computation,
//! Gaussian scaling, and the serialization round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(trees) = deps_san::parse_conllu(text) else {
        return;
    };
    // cap the quadratic work per sentence; the parser itself already ran
    // on everything
    for tree in trees.iter().filter(|t| t.len() <= 128) {
        let dist = deps_san::tree_distance_matrix(tree);
        let n = tree.len();
        for i in 0..n {
            assert_eq!(dist.get(i, i), 0, "nonzero self distance");
            for j in 0..n {
                assert_eq!(dist.get(i, j), dist.get(j, i), "asymmetric distance");
                assert!((dist.get(i, j) as usize) < n.max(1), "distance out of range");
            }
        }
        let scaled = deps_san::scale_matrix(&dist, 1.0).expect("sigma 1 is valid");
        assert!(scaled.values().iter().all(|v| v.is_finite() && *v > 0.0));

        let round = deps_san::parse_conllu(&tree.to_conllu()).expect("serialized tree reparses");
        assert_eq!(round.len(), 1);
        assert_eq!(
            deps_san::tree_distance_matrix(&round[0]).entries(),
            dist.entries(),
            "round trip changed distances"
        );
    }
});
