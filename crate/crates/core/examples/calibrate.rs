// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prints baseline, AdaIAT and PAI rows for a world spec over a few alphas.
//!
//! `cargo run --release -p attn-steer --example calibrate -- fixtures/world_calibrated.json`

use attn_steer::harness::{build_profile_for_world, run_comparison, synthesize_world, Method, WorldSpec};
use attn_steer::{InterventionConfig, ThresholdSpec};

fn main() -> attn_steer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let spec = match args.first() {
        Some(p) => WorldSpec::load(p)?,
        None => WorldSpec::default(),
    };
    let world = synthesize_world(&spec)?;
    let dcfg = world.greedy_config();
    let profile = build_profile_for_world(&world, &dcfg, ThresholdSpec::default())?;
    println!("n_r={} n_h={} t={:?}", profile.n_r, profile.n_h, profile.t);
    println!("sums_r={:?}\nsums_h={:?}", profile.layer_sums_r, profile.layer_sums_h);
    let l = spec.n_layers - 1;
    let mut methods = vec![Method::new("none", InterventionConfig::none())];
    for a in [2.0, 4.0, 6.0, 10.0] {
        methods.push(Method::new(format!("adaiat a={a}"), InterventionConfig::adaiat(a)));
        methods.push(Method::new(format!("adaiat-all a={a}"), InterventionConfig::adaiat(a).layers(0, l)));
    }
    for a in [0.5, 1.0, 2.0, 4.0] {
        methods.push(Method::new(format!("pai a={a}"), InterventionConfig::pai(a).layers(0, l)));
        methods.push(Method::new(format!("pai-frac a={a}"), InterventionConfig::pai(a)));
    }
    let rep = run_comparison(&world, Some(&profile), &methods, &dcfg, &Default::default())?;
    println!("{:<22} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "method", "C_S", "C_I", "F1", "D_1", "len", "trig");
    for r in &rep.rows {
        println!(
            "{:<22} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.2} {:>6}",
            r.name, r.report.c_s, r.report.c_i, r.report.f1, r.report.d_1, r.mean_tokens, r.trigger_events
        );
    }
    Ok(())
}
