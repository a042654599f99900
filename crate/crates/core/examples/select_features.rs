//! Ranks candidate fixed variables by how much they tell us about a nominal
//! outcome, then picks a small non-redundant subset for the distance.
//!
//! `region` drives the outcome, `region_copy` is a near duplicate of it and
//! `tenure` adds extra signal of its own. The duplicate is relevant but
//! redundant, so the selection stops before taking it.

use cmm_mix::data::{MixedDataset, Role, Schema, VariableSpec};
use cmm_mix::infosel::{select_features, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 4000;
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n); 4];
    for _ in 0..n {
        let region = rng.random_range(1..=4u32);
        let copy = if rng.random::<f64>() < 0.95 { region } else { rng.random_range(1..=4) };
        let tenure = rng.random_range(1..=3u32);
        let p_yes = 0.1 + 0.15 * f64::from(region - 1) + 0.15 * f64::from(tenure - 1);
        let outcome = if rng.random::<f64>() < p_yes.min(0.95) { 2 } else { 1 };
        for (c, v) in cols.iter_mut().zip([region, copy, tenure, outcome].map(f64::from)) {
            c.push(Some(v));
        }
    }
    let schema = Schema::new(vec![
        VariableSpec::nominal("region", Role::Fixed, 4),
        VariableSpec::nominal("region_copy", Role::Fixed, 4),
        VariableSpec::ordinal("tenure", Role::Fixed, 3),
        VariableSpec::nominal("bought", Role::Random, 2),
    ])
    .expect("valid schema");
    let data = MixedDataset::from_raw(schema.clone(), cols).expect("valid data");

    let cfg = SelectionConfig { t1: 0.02, t2: 0.5, bins: 8 };
    let report = select_features(&data, &cfg);

    println!("{:<12} {:>8} {:>10}", "candidate", "I_max", "normalized");
    for (l, v) in schema.variables.iter().filter(|v| v.role == Role::Fixed).enumerate() {
        println!("{:<12} {:>8.4} {:>10.4}", v.name, report.i_max[l], report.i_max_normalized[l]);
    }
    println!();
    for (step, s) in report.trace.iter().enumerate() {
        println!("step {}: {} (score {:.4})", step + 1, schema.variables[s.index].name, s.score);
    }
    println!("stopped: {:?}", report.stop);
    println!("distance weights: {:?}", report.weights);
}
