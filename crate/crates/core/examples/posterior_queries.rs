//! Posterior functionals: conditional category probabilities, ordinal
//! probabilities and densities, each summarized over parameter draws with
//! a credible interval.

use cmm_mix::data::{DesignConfig, MixedDataset, Role, Schema, VariableSpec};
use cmm_mix::model::{default_hyperpriors, Model};
use cmm_mix::query::{summarize_over_draws, Functional, McOptions, QueryPoint};
use cmm_mix::sampler::{run_chain, ChainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `site` (fixed, 2 categories) shifts both the ordinal `grade` and the
/// nominal `choice`.
fn synthetic(n: usize) -> MixedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut site, mut grade, mut choice) = (vec![], vec![], vec![]);
    for _ in 0..n {
        let s = rng.random_range(1..=2u32);
        let u: f64 = rng.random();
        let g = if s == 1 { if u < 0.6 { 1 } else if u < 0.9 { 2 } else { 3 } } else if u < 0.2 { 1 } else if u < 0.5 { 2 } else { 3 };
        let c = if rng.random::<f64>() < if s == 1 { 0.25 } else { 0.7 } { 2 } else { 1 };
        site.push(Some(f64::from(s)));
        grade.push(Some(f64::from(g)));
        choice.push((rng.random::<f64>() > 0.1).then_some(f64::from(c)));
    }
    let schema = Schema::new(vec![
        VariableSpec::nominal("site", Role::Fixed, 2),
        VariableSpec::ordinal("grade", Role::Random, 3),
        VariableSpec::nominal("choice", Role::Random, 2),
    ])
    .expect("valid schema");
    MixedDataset::from_raw(schema, vec![site, grade, choice]).expect("valid data")
}

fn main() {
    let data = synthetic(500);
    let mut hyper = default_hyperpriors(&data);
    hyper.n_components = 15;
    let design = DesignConfig::intercept_only();
    let model = Model::new(data, &design, hyper).expect("model");
    let cfg = ChainConfig {
        iterations: 1200,
        burn_in: 400,
        thin: 8,
        seed: 4,
        n_completed: 1,
        ..ChainConfig::default()
    };
    let draws = run_chain(&model, &cfg).expect("chain");
    let params: Vec<_> = draws.params().cloned().collect();
    println!("{} posterior draws", params.len());

    let mc = McOptions::default();
    for site in [1.0, 2.0] {
        let point = QueryPoint::new(vec![site]);
        let s = summarize_over_draws(&model, &params, &point.clone().with_x(vec![Some(2)]), &Functional::PrX, 0.95, &mc).unwrap();
        println!("site {site}: Pr(choice = 2) = {:.3} [{:.3}, {:.3}]", s.mean, s.lower, s.upper);
        for level in 1..=3u32 {
            let f = Functional::PrY { levels: vec![level] };
            let s = summarize_over_draws(&model, &params, &point, &f, 0.95, &mc).unwrap();
            println!("         Pr(grade = {level}) = {:.3} [{:.3}, {:.3}]", s.mean, s.lower, s.upper);
        }
        let f = Functional::Density { coords: vec![0] };
        let s = summarize_over_draws(&model, &params, &point.clone().with_target(vec![0.0]), &f, 0.95, &mc).unwrap();
        println!("         latent grade density at 0 = {:.4} [{:.4}, {:.4}]", s.mean, s.lower, s.upper);
    }
}
