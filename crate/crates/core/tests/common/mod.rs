#![allow(dead_code)]

pub mod gradcheck;
pub mod suites;

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array4, ArrayD};
use patchcycle::nn::{Module, ParamSet};
use patchcycle::tape::{Tape, Var};
use patchcycle::{ImageBatch, Scalar, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest useful experiment: 8x8 images, a few hundred parameters per
/// network, one "k3s2,k3s1" discriminator per direction.
pub fn tiny_config(root: &Path) -> TrainConfig {
    let mut c = TrainConfig::new(root.join("x"), root.join("y"), root.join("out"), 10);
    c.image_size = 8;
    c.checkpoint_interval = 5;
    c.generator.base_channels = 2;
    c.generator.downsampling = 1;
    c.generator.residual_blocks = 1;
    c.generator.outer_kernel = 3;
    c.discriminators.base_channels = 2;
    c.discriminators.max_channels = 4;
    c.discriminators.x = vec!["k3s2,k3s1".into()];
    c.discriminators.y = vec!["k3s2,k3s1".into()];
    c
}

pub fn random_batch<T: Scalar>(seed: u64, n: usize, side: usize) -> ImageBatch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::new(Array4::from_shape_fn((n, 3, side, side), |_| T::lit(rng.random_range(-1.0..1.0)))).unwrap()
}

/// White disc or square on black at a random position.
pub fn shape_frame(side: u32, circle: bool, rng: &mut impl Rng) -> RgbImage {
    let s = side as f32;
    let r = rng.random_range(0.15 * s..0.3 * s);
    let cx = rng.random_range(r..s - r);
    let cy = rng.random_range(r..s - r);
    RgbImage::from_fn(side, side, |x, y| {
        let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
        let inside = if circle {
            dx * dx + dy * dy <= r * r
        } else {
            dx.abs() <= r && dy.abs() <= r
        };
        if inside {
            Rgb([255, 255, 255])
        } else {
            Rgb([0, 0, 0])
        }
    })
}

/// Writes `n` shape frames named `f0000.png…` into `dir`.
pub fn write_shapes(dir: &Path, n: usize, circle: bool, side: u32, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        shape_frame(side, circle, &mut rng).save(dir.join(format!("f{i:04}.png"))).unwrap();
    }
}

/// Writes `n` noise frames of size `w`x`h`.
pub fn write_noise(dir: &Path, n: usize, w: u32, h: u32, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
            .save(dir.join(format!("f{i:04}.png")))
            .unwrap();
    }
}

/// Parameter-free module applying a fixed tape function.
pub struct FnModule<T: Scalar> {
    pub params: ParamSet<T>,
    pub f: fn(&mut Tape<T>, Var) -> Var,
}

impl<T: Scalar> FnModule<T> {
    pub fn new(f: fn(&mut Tape<T>, Var) -> Var) -> Self {
        Self { params: ParamSet::new(), f }
    }
}

impl<T: Scalar> Module<T> for FnModule<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn forward(&self, tape: &mut Tape<T>, _params: &[Var], x: Var) -> Var {
        (self.f)(tape, x)
    }
}

pub fn max_abs_diff<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs().as_f64()).fold(0.0, f64::max)
}

pub fn sha256_file(path: &Path) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}
