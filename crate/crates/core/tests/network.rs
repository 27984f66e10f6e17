mod common;

use common::*;
use localtrans::data::{generate_range, GenConfig};
use localtrans::homography::Homography;
use localtrans::network::{Model, ModelConfig, Trainer};

fn small_pairs(n: usize) -> Vec<localtrans::data::SamplePair> {
    let gen = GenConfig {
        patch: 32,
        rho: 6.0,
        augment: None,
        ..GenConfig::default()
    };
    generate_range(&gen, 3, 0, n).unwrap()
}

#[test]
fn default_model_follows_the_level_ladder() {
    let ladder = shape_ladder();
    assert_eq!(
        ladder,
        vec![((16, 16), 5, 8), ((32, 32), 7, 8), ((64, 64), 9, 8)]
    );
}

#[test]
fn zero_init_predicts_identity_for_every_input() {
    let model = Model::new(ModelConfig::new(2, 4, 32, 32)).unwrap();
    let pairs = small_pairs(4);
    let t: Vec<_> = pairs.iter().map(|p| p.target.clone()).collect();
    let u: Vec<_> = pairs.iter().map(|p| p.unaligned.clone()).collect();
    for out in model.predict(&t, &u).unwrap() {
        assert_eq!(out.h, Homography::IDENTITY);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let pairs = small_pairs(4);
    let run = || {
        let mut trainer = Trainer::new(
            Model::new(ModelConfig::new(2, 4, 32, 32)).unwrap(),
            1e-3,
            2,
            17,
        );
        let losses: Vec<f64> = (0..3)
            .map(|_| {
                let batch = trainer.next_batch(pairs.len());
                let refs: Vec<_> = batch.iter().map(|&i| &pairs[i]).collect();
                trainer.step(&refs).unwrap().loss
            })
            .collect();
        let params: Vec<f64> = trainer
            .model
            .store
            .ids()
            .flat_map(|id| trainer.model.store.value(id).data().to_vec())
            .collect();
        (losses, params)
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_loss_on_a_tiny_set() {
    let pairs = small_pairs(2);
    let refs: Vec<_> = pairs.iter().collect();
    let mut trainer = Trainer::new(
        Model::new(ModelConfig::new(1, 4, 32, 32)).unwrap(),
        3e-3,
        2,
        1,
    );
    let first = trainer.step(&refs).unwrap().loss;
    let mut last = first;
    for _ in 0..30 {
        last = trainer.step(&refs).unwrap().loss;
    }
    assert!(last < 0.7 * first, "loss {first} -> {last}");
}
