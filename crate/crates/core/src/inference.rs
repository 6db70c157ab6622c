//! Frame-by-frame translation with a trained generator, and round-trip
//! diagnostics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GenericImage, RgbImage};
use ndarray::{Array4, Axis, Ix4};

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::imaging::{
    crop_and_scale, frame_name, from_normalized, resolve_crop, to_normalized, CropRect, Domain, FrameStore, ImageBatch, MANIFEST_NAME,
};
use crate::netspec::{infer, Generator};
use crate::scalar::Scalar;
use crate::training::TrainState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Apply G.
    XtoY,
    /// Apply F.
    YtoX,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::XtoY => Domain::X,
            Direction::YtoX => Domain::Y,
        }
    }

    /// `(forward, backward)` generators for this direction.
    pub fn generators<T>(self, state: &TrainState<T>) -> (&Generator<T>, &Generator<T>) {
        match self {
            Direction::XtoY => (&state.g, &state.f),
            Direction::YtoX => (&state.f, &state.g),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::XtoY => "XtoY",
            Direction::YtoX => "YtoX",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "XtoY" => Ok(Direction::XtoY),
            "YtoX" => Ok(Direction::YtoX),
            other => Err(Error::Config(format!("unknown direction {other:?}, expected XtoY or YtoX"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TranslationJob {
    pub checkpoint: PathBuf,
    pub direction: Direction,
    pub input: FrameStore,
    pub output_dir: PathBuf,
    /// Falls back to the training crop of the source domain.
    pub crop: Option<CropRect>,
}

/// Translates every input frame in store order, writing
/// `frame_000001.png…` and the `frames.txt` manifest. Returns the number
/// of frames written.
pub fn translate_frames<T: Scalar>(job: &TranslationJob) -> Result<usize> {
    let state = load_checkpoint::<T>(&job.checkpoint)?;
    translate_with(&state, job)
}

/// [`translate_frames`] with an already loaded state.
pub fn translate_with<T: Scalar>(state: &TrainState<T>, job: &TranslationJob) -> Result<usize> {
    if job.input.is_empty() {
        return Err(Error::NoFrames(job.input.root.clone()));
    }
    let cfg = &state.config;
    let crop = job.crop.or(match job.direction.source() {
        Domain::X => cfg.crop_x,
        Domain::Y => cfg.crop_y,
    });
    let side = cfg.image_size as u32;
    let (gen, _) = job.direction.generators(state);
    let first = job.input.decode(0)?;
    crop_and_scale(&first, &resolve_crop(crop, &first, side))?;

    fs::create_dir_all(&job.output_dir)?;
    let mut names = Vec::with_capacity(job.input.len());
    for i in 0..job.input.len() {
        let img = job.input.decode(i)?;
        let scaled = crop_and_scale(&img, &resolve_crop(crop, &img, side))?;
        let x = to_normalized::<T>(&scaled).insert_axis(Axis(0)).into_dyn();
        let y = infer(gen, &x).into_dimensionality::<Ix4>().map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let name = frame_name(i + 1);
        let path = job.output_dir.join(&name);
        from_normalized(y.index_axis(Axis(0), 0)).save(&path).map_err(|source| Error::Image { path, source })?;
        names.push(name);
    }
    let mut manifest = fs::File::create(job.output_dir.join(MANIFEST_NAME))?;
    for n in &names {
        writeln!(manifest, "{n}")?;
    }
    Ok(names.len())
}

/// A batch pushed through both generators.
#[derive(Clone, Debug)]
pub struct RoundTrip<T> {
    /// mean |back(fwd(x)) − x| over every element.
    pub l1: f64,
    pub input: Array4<T>,
    pub translated: Array4<T>,
    pub reconstructed: Array4<T>,
}

impl<T: Scalar> RoundTrip<T> {
    pub fn compute(state: &TrainState<T>, sample: &ImageBatch<T>, direction: Direction) -> Result<Self> {
        let (fwd, back) = direction.generators(state);
        let to4 = |a: ndarray::ArrayD<T>| a.into_dimensionality::<Ix4>().map_err(|e| Error::ShapeMismatch(e.to_string()));
        let translated = to4(infer(fwd, &sample.to_dyn()))?;
        let reconstructed = to4(infer(back, &translated.clone().into_dyn()))?;
        let input = sample.data().clone();
        let sum: f64 = input.iter().zip(&reconstructed).map(|(&a, &b)| (b - a).abs().as_f64()).sum();
        Ok(Self {
            l1: sum / input.len() as f64,
            input,
            translated,
            reconstructed,
        })
    }

    /// One row per batch element: input, translation and reconstruction
    /// side by side, so the grid is three frames wide.
    pub fn grid(&self) -> RgbImage {
        let (n, _, h, w) = self.input.dim();
        let (w, h) = (w as u32, h as u32);
        let mut out = RgbImage::new(3 * w, h * n as u32);
        for i in 0..n {
            for (col, t) in [&self.input, &self.translated, &self.reconstructed].into_iter().enumerate() {
                let tile = from_normalized(t.index_axis(Axis(0), i));
                out.copy_from(&tile, col as u32 * w, i as u32 * h).expect("tile fits grid");
            }
        }
        out
    }
}

/// Loads `checkpoint`, computes the round trip of `sample` and writes the
/// triplet grid to `grid_path`.
pub fn round_trip_report<T: Scalar>(checkpoint: &Path, sample: &ImageBatch<T>, direction: Direction, grid_path: &Path) -> Result<RoundTrip<T>> {
    let state = load_checkpoint::<T>(checkpoint)?;
    let rt = RoundTrip::compute(&state, sample, direction)?;
    if let Some(parent) = grid_path.parent() {
        fs::create_dir_all(parent)?;
    }
    rt.grid().save(grid_path).map_err(|source| Error::Image {
        path: grid_path.to_path_buf(),
        source,
    })?;
    Ok(rt)
}
