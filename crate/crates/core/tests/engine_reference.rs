mod common;

use proptest::prelude::*;

#[test]
fn engine_matches_the_reference_stack_machine() {
    let bad: Vec<String> = (0..64).filter_map(common::engine_disagreement).collect();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn generated_trees_exercise_decomposition() {
    let trees: Vec<_> = (0..64).map(common::random_goal_tree).collect();
    assert!(trees.iter().any(|t| t.len() > 5));
    assert!(trees.iter().any(|t| t.iter().any(|g| g.can_do && !g.complete)));
    assert!(trees.iter().any(|t| t.iter().any(|g| !g.can_do)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn agreement_for_any_seed(seed in any::<u64>()) {
        let d = common::engine_disagreement(seed);
        prop_assert!(d.is_none(), "{:?}", d);
    }
}
