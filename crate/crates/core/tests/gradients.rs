//! Analytic gradients of every training and editing objective against
//! central finite differences, on small random networks.

mod common;

use common::objectives::{worst_error, SUITES, TOL};

fn suite(name: &str) {
    let (_, case) = SUITES.iter().find(|(n, _)| *n == name).expect("suite");
    let worst = worst_error(*case);
    println!("{name}: worst relative error {worst:.3e}");
    assert!(worst <= TOL, "{name}: relative error {worst:.3e}");
}

#[test]
fn encoder_objective_wrt_encoder_weights() {
    suite("encoder");
}

#[test]
fn critic_objective_with_gradient_penalty_wrt_critic_weights() {
    suite("critic");
}

#[test]
fn critic_penalty_alone_wrt_critic_weights() {
    suite("penalty");
}

#[test]
fn alignment_and_ranking_wrt_text_codes() {
    suite("alignment");
}

#[test]
fn instance_objective_wrt_code() {
    suite("instance");
}

#[test]
fn anchored_guided_objective_wrt_code() {
    suite("anchored");
}

#[test]
fn stable_guided_objective_wrt_code() {
    suite("stable");
}

#[test]
fn masked_encoder_objective_wrt_encoder_weights() {
    suite("masked");
}

#[test]
fn region_objective_wrt_code() {
    suite("region");
}
