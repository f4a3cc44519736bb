//! Quick cross-engine agreement check over all four case families.

use dfc_core::testkit::{assert_equivalent, generate_case, FAMILIES};

#[test]
fn oracle_rewrite_capture_agree_on_sampled_cases() {
    let mut fallbacks = 0usize;
    let mut kills = 0usize;
    let mut checked = 0usize;
    for family in FAMILIES {
        for seed in 0..60u64 {
            let case = generate_case(family, seed);
            match assert_equivalent(&case) {
                Ok(report) => {
                    checked += 1;
                    if report.fell_back {
                        fallbacks += 1;
                    }
                    if report.killed {
                        kills += 1;
                    }
                }
                Err(msg) => panic!("{msg}"),
            }
        }
    }
    println!("checked {checked} cases, {kills} kills, {fallbacks} rewrite fallbacks");
    assert_eq!(checked, 240);
    // The families are built to be rewritable; fallbacks indicate a bug.
    assert_eq!(fallbacks, 0);
}
