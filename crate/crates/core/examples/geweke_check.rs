//! Joint-distribution check of the Gibbs sampler: moments from independent
//! prior/data draws are compared with moments along a chain that alternates
//! a sweep with fresh data. Large |z| values point at a broken update.
//!
//! Pass the number of draws as the first argument (default 20000).

use cmm_mix::data::{DesignConfig, DesignTerm, MixedDataset, Role, Schema, VariableSpec};
use cmm_mix::gower::DistanceSpec;
use cmm_mix::model::{default_hyperpriors_with, Model};
use cmm_mix::sampler::geweke::{geweke_test, TEST_FUNCTIONS};

fn main() {
    let draws = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20_000);
    let schema = Schema::new(vec![
        VariableSpec::ordinal("y", Role::Random, 3),
        VariableSpec::continuous("z", Role::Random),
        VariableSpec::nominal("x", Role::Random, 2),
        VariableSpec::ordinal("f1", Role::Fixed, 3),
        VariableSpec::continuous("f2", Role::Fixed),
    ])
    .expect("valid schema");
    // Four rows; the missing cells stay missing in every simulated dataset.
    let cols = vec![
        vec![Some(1.0), Some(2.0), None, Some(3.0)],
        vec![Some(-0.5), None, Some(0.7), Some(1.1)],
        vec![Some(1.0), Some(2.0), Some(2.0), None],
        vec![Some(1.0), Some(2.0), Some(3.0), Some(2.0)],
        vec![Some(0.0), Some(0.4), Some(1.0), Some(0.8)],
    ];
    let data = MixedDataset::from_standardized(schema, cols, None).expect("valid data");
    let design = DesignConfig {
        terms: vec![DesignTerm::Intercept, DesignTerm::dummy("x", 2)],
    };
    let mut hyper = default_hyperpriors_with(&data, DistanceSpec::equal_weights(&data, 0.5));
    hyper.n_components = 3;
    let model = Model::new(data, &design, hyper).expect("model");

    let started = std::time::Instant::now();
    let report = geweke_test(&model, draws, 11).expect("geweke");
    println!("{draws} draws per side, {:.1?}\n", started.elapsed());
    println!("{:<10} {:>12} {:>12} {:>7}", "function", "prior-data", "chain", "z");
    for (i, name) in TEST_FUNCTIONS.iter().enumerate() {
        println!("{:<10} {:>12.4} {:>12.4} {:>7.2}", name, report.marginal[i].0, report.successive[i].0, report.z[i]);
    }
    println!("\nall |z| < 3: {}", report.passes(3.0));
}
