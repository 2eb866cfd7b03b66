#![allow(dead_code)]

use geowgan::config::RunConfig;
use geowgan::dataset::{generate_dataset, Dataset};
use geowgan::losses::{BatchBundle, LabeledBatch};
use geowgan::models::{build_discriminator, build_generator, random_images, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use geowgan::seed;

/// Small enough to train a few epochs in about a second.
pub fn tiny_config(seed_value: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed_value;
    c.grid_size = 32;
    c.tiles = 240;
    c.tile_size = 16;
    c.bands = 3;
    c.labeled_fraction = 0.25;
    c.bins_nightlights = 4;
    c.bins_population = 4;
    c.bins_road_distance = 4;
    c.bins_land_cover = 3;
    c.bins_awi = 5;
    c.disc_widths = vec![8, 16];
    c.gen_channels = 16;
    c.noise_dim = 8;
    c.batch_size = 24;
    c.critic_steps = 2;
    c.steps_per_epoch = 4;
    c.epochs = 2;
    c.lr0 = 1e-3;
    c
}

pub fn tiny_dataset(seed_value: u64) -> (RunConfig, Dataset) {
    let cfg = tiny_config(seed_value);
    let data = generate_dataset(&cfg).expect("tiny dataset");
    (cfg, data)
}

/// 392 parameters on 8x8x2 inputs, one task with two classes.
pub fn tiny_discriminator() -> Discriminator<f64> {
    let spec = DiscriminatorSpec {
        in_channels: 2,
        widths: vec![4],
        leaky_slope: 0.2,
        heads: vec![("a".into(), 2)],
    };
    build_discriminator(&spec, 7).unwrap()
}

/// 394 parameters producing 8x8x2 images.
pub fn tiny_generator() -> Generator<f64> {
    let spec = GeneratorSpec {
        noise_dim: 3,
        base_channels: 4,
        tile_size: 8,
        channels: 2,
    };
    build_generator(&spec, 11).unwrap()
}

pub fn tiny_bundle() -> BatchBundle<f64> {
    let mut rng = seed::stream(5, "test-bundle", &[]);
    BatchBundle {
        labeled: vec![LabeledBatch {
            task: 0,
            images: random_images(&[3, 2, 8, 8], &mut rng),
            labels: vec![0, 1, 1],
            weights: vec![1.0, 0.5, 2.0],
        }],
        unlabeled: random_images(&[3, 2, 8, 8], &mut rng),
        fake: random_images(&[3, 2, 8, 8], &mut rng),
        interp_eps: vec![0.3, 0.6, 0.9],
    }
}
