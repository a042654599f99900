//! Mixed-type distances over fixed variables and the neighborhood radius.
//!
//! Prints how the share of observations inside each other's neighborhood
//! grows with `d*`, then solves for the radius that gives a target share.

use cmm_mix::data::{MixedDataset, Role, Schema, VariableSpec};
use cmm_mix::gower::{avg_neighbor_fraction, gower_distance, solve_dstar, DistanceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 500;
    let schema = Schema::new(vec![
        VariableSpec::ordinal("education", Role::Fixed, 5),
        VariableSpec::nominal("sector", Role::Fixed, 3),
        VariableSpec::continuous("income", Role::Fixed),
        VariableSpec::continuous("score", Role::Random),
    ])
    .expect("valid schema");
    let cols = vec![
        (0..n).map(|_| Some(rng.random_range(1..=5) as f64)).collect(),
        (0..n).map(|_| Some(rng.random_range(1..=3) as f64)).collect(),
        (0..n).map(|_| Some(rng.random_range(20.0..120.0))).collect(),
        (0..n).map(|_| Some(rng.random::<f64>())).collect(),
    ];
    let data = MixedDataset::from_raw(schema, cols).expect("valid data");

    let spec = DistanceSpec::equal_weights(&data, 1.0);
    let (a, b) = (data.fixed_vector(0), data.fixed_vector(1));
    println!("distance between rows 0 and 1: {:.4}", gower_distance(&a, &b, &spec).unwrap());

    println!("\n{:>6} {:>10}", "d*", "share");
    for dstar in [0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0] {
        let s = DistanceSpec { dstar, ..spec.clone() };
        println!("{:>6.2} {:>10.3}", dstar, avg_neighbor_fraction(&data, &s));
    }

    println!();
    for target in [0.1, 0.2, 0.5] {
        let dstar = solve_dstar(&data, &spec, target);
        let s = DistanceSpec { dstar, ..spec.clone() };
        println!("target {target:.2}: d* = {dstar:.4}, achieved {:.3}", avg_neighbor_fraction(&data, &s));
    }

    // Putting all the weight on one variable turns the distance into a
    // match/mismatch indicator for it.
    let sector_only = DistanceSpec::with_weights(&data, vec![0.0, 1.0, 0.0], 0.0);
    println!("\nsector-only, d* = 0: share {:.3}", avg_neighbor_fraction(&data, &sector_only));
}
