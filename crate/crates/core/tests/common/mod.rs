//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use cmm_mix::data::{DesignConfig, DesignTerm, MixedDataset, Role, Schema, VariableSpec};
use cmm_mix::gower::DistanceSpec;
use cmm_mix::model::{default_hyperpriors_with, Model};

/// Four rows with one ordinal, one continuous and one binary nominal
/// random variable and two fixed variables. Row 2 misses the ordinal, row 1
/// the continuous and row 3 the nominal value.
pub fn tiny_data() -> MixedDataset {
    let schema = Schema::new(vec![
        VariableSpec::ordinal("y", Role::Random, 3),
        VariableSpec::continuous("z", Role::Random),
        VariableSpec::nominal("x", Role::Random, 2),
        VariableSpec::ordinal("f1", Role::Fixed, 3),
        VariableSpec::continuous("f2", Role::Fixed),
    ])
    .unwrap();
    let mut cols = random_columns();
    cols.push(vec![Some(1.0), Some(2.0), Some(3.0), Some(2.0)]);
    cols.push(vec![Some(0.0), Some(0.4), Some(1.0), Some(0.8)]);
    MixedDataset::from_standardized(schema, cols, None).unwrap()
}

pub fn tiny_model(n_components: usize, dstar: f64) -> Model {
    let data = tiny_data();
    let design = DesignConfig {
        terms: vec![DesignTerm::Intercept, DesignTerm::dummy("x", 2)],
    };
    let mut hyper = default_hyperpriors_with(&data, DistanceSpec::equal_weights(&data, dstar));
    hyper.n_components = n_components;
    Model::new(data, &design, hyper).unwrap()
}

/// The tiny instance without fixed variables.
pub fn tiny_model_without_fixed(n_components: usize) -> Model {
    let schema = Schema::new(vec![
        VariableSpec::ordinal("y", Role::Random, 3),
        VariableSpec::continuous("z", Role::Random),
        VariableSpec::nominal("x", Role::Random, 2),
    ])
    .unwrap();
    let data = MixedDataset::from_standardized(schema, random_columns(), None).unwrap();
    let design = DesignConfig {
        terms: vec![DesignTerm::Intercept, DesignTerm::dummy("x", 2)],
    };
    let mut hyper = default_hyperpriors_with(&data, DistanceSpec::equal_weights(&data, 1.0));
    hyper.n_components = n_components;
    Model::new(data, &design, hyper).unwrap()
}

fn random_columns() -> Vec<Vec<Option<f64>>> {
    vec![
        vec![Some(1.0), Some(2.0), None, Some(3.0)],
        vec![Some(-0.5), None, Some(0.7), Some(1.1)],
        vec![Some(1.0), Some(2.0), Some(2.0), None],
    ]
}
