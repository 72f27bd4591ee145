mod common;

use common::criteria::{self, Check};

fn require(c: Check) {
    eprintln!("{}", c.detail);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn threshold_matches_oracle_on_random_scores() {
    require(criteria::threshold_random(1000));
}

#[test]
fn threshold_worked_example_selects_the_top_proposal() {
    require(criteria::threshold_worked_example());
}

#[test]
fn attention_heads_match_explicit_loops() {
    require(criteria::attention_heads(20));
}

#[test]
fn relation_loss_ignores_rotation_and_scale() {
    require(criteria::relation_invariance(100));
}

#[test]
fn iou_matches_monte_carlo() {
    require(criteria::iou_monte_carlo(100, 200_000));
}

#[test]
fn average_precision_matches_threshold_sweep() {
    require(criteria::ap_exhaustive(200));
}

#[test]
fn published_aggregates_are_reproduced() {
    require(criteria::published_arithmetic());
}
