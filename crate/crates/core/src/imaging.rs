//! Frame directories, cropping and scaling, normalization, and unpaired
//! batch sampling.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use ndarray::{s, Array3, Array4, ArrayD, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_NAME: &str = "frames.txt";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::X => "X",
            Domain::Y => "Y",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" | "x" => Ok(Domain::X),
            "Y" | "y" => Ok(Domain::Y),
            other => Err(Error::Config(format!("unknown domain tag {other:?}, expected X or Y"))),
        }
    }
}

/// Frames of one domain, ordered by file name.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStore {
    pub root: PathBuf,
    pub frames: Vec<PathBuf>,
    pub domain: Domain,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Lists and verifies every PNG/JPEG file in `path`.
///
/// Files with other extensions are ignored. Every listed frame is decoded
/// once so that a corrupt file is reported by name up front.
pub fn load_frame_store(path: &Path, domain: Domain) -> Result<FrameStore> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(path)? {
        let p = entry?.path();
        if p.is_file() && is_image(&p) {
            frames.push(p);
        }
    }
    frames.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    if frames.is_empty() {
        return Err(Error::NoFrames(path.to_path_buf()));
    }
    for f in &frames {
        image::open(f).map_err(|_| Error::CorruptFrame(file_name(f)))?;
    }
    Ok(FrameStore {
        root: path.to_path_buf(),
        frames,
        domain,
    })
}

impl FrameStore {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn decode(&self, index: usize) -> Result<RgbImage> {
        let path = &self.frames[index];
        let img = image::open(path).map_err(|_| Error::CorruptFrame(file_name(path)))?;
        Ok(img.to_rgb8())
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRect {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

impl FromStr for CropRect {
    type Err = Error;

    /// Parses `left,top,width,height`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("crop {s:?} must be four non-negative integers l,t,w,h")))?;
        match parts[..] {
            [left, top, width, height] => Ok(CropRect { left, top, width, height }),
            _ => Err(Error::Config(format!("crop {s:?} must be four integers l,t,w,h"))),
        }
    }
}

impl CropRect {
    /// Largest centred square inside a `width × height` frame.
    pub fn centered_square(width: u32, height: u32) -> Self {
        let side = width.min(height);
        CropRect {
            left: (width - side) / 2,
            top: (height - side) / 2,
            width: side,
            height: side,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub rect: CropRect,
    pub output_side: u32,
}

impl CropSpec {
    pub fn new(left: u32, top: u32, width: u32, height: u32, output_side: u32) -> Self {
        Self {
            rect: CropRect { left, top, width, height },
            output_side,
        }
    }
}

/// Crops `spec.rect` out of `frame` and resamples it bilinearly to a
/// square of side `spec.output_side`.
pub fn crop_and_scale(frame: &RgbImage, spec: &CropSpec) -> Result<RgbImage> {
    let CropRect { left, top, width, height } = spec.rect;
    if spec.output_side == 0 {
        return Err(Error::CropOutOfBounds("output side must be positive".into()));
    }
    if width == 0
        || height == 0
        || left as u64 + width as u64 > frame.width() as u64
        || top as u64 + height as u64 > frame.height() as u64
    {
        return Err(Error::CropOutOfBounds(format!(
            "rect ({left},{top},{width},{height}) in a {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let side = spec.output_side;
    let (sx, sy) = (width as f64 / side as f64, height as f64 / side as f64);
    let sample_axis = |d: u32, scale: f64, origin: u32, extent: u32| {
        let p = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let p0 = p.floor();
        let i0 = p0 as u32;
        let i1 = (i0 + 1).min(extent - 1);
        (origin + i0, origin + i1, p - p0)
    };
    let cols: Vec<_> = (0..side).map(|dx| sample_axis(dx, sx, left, width)).collect();
    let mut out = RgbImage::new(side, side);
    for dy in 0..side {
        let (y0, y1, fy) = sample_axis(dy, sy, top, height);
        for (dx, &(x0, x1, fx)) in cols.iter().enumerate() {
            let (p00, p01) = (frame.get_pixel(x0, y0), frame.get_pixel(x1, y0));
            let (p10, p11) = (frame.get_pixel(x0, y1), frame.get_pixel(x1, y1));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top_row = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom_row = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top_row * (1.0 - fy) + bottom_row * fy;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(dx as u32, dy, image::Rgb(px));
        }
    }
    Ok(out)
}

/// 8-bit RGB to a (3, H, W) tensor via `v / 127.5 − 1`.
pub fn to_normalized<T: Scalar>(img: &RgbImage) -> Array3<T> {
    let (w, h) = img.dimensions();
    let scale = T::lit(127.5);
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        T::lit(img.get_pixel(x as u32, y as u32)[c] as f64) / scale - T::one()
    })
}

/// (3, H, W) tensor to 8-bit RGB: clamp to [-1, 1], then
/// `round((v + 1) · 127.5)` with halves rounded away from zero.
pub fn from_normalized<T: Scalar>(chw: ArrayView3<T>) -> RgbImage {
    let (c, h, w) = chw.dim();
    assert_eq!(c, 3, "expected three channels, got {c}");
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = chw[[ch, y as usize, x as usize]].as_f64().clamp(-1.0, 1.0);
            px[ch] = ((v + 1.0) * 127.5).round() as u8;
        }
    }
    out
}

/// (N, 3, H, W) tensor with every element in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    data: Array4<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        if data.shape()[1] != 3 {
            return Err(Error::ShapeMismatch(format!("image batch needs 3 channels, got shape {:?}", data.shape())));
        }
        if let Some(v) = data.iter().find(|v| !(v.abs() <= T::one())) {
            return Err(Error::ShapeMismatch(format!("image batch value {v} outside [-1, 1]")));
        }
        Ok(Self { data })
    }

    pub fn from_frames(frames: &[&Array3<T>]) -> Result<Self> {
        let (c, h, w) = frames.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?.dim();
        let mut data = Array4::zeros((frames.len(), c, h, w));
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != (c, h, w) {
                return Err(Error::ShapeMismatch(format!("frame {i} has shape {:?}, expected {:?}", f.dim(), (c, h, w))));
            }
            data.slice_mut(s![i, .., .., ..]).assign(f);
        }
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn to_dyn(&self) -> ArrayD<T> {
        self.data.clone().into_dyn()
    }

    pub fn into_inner(self) -> Array4<T> {
        self.data
    }
}

/// Decoded, cropped and normalized frames of one domain.
#[derive(Clone, Debug)]
pub struct PreparedFrames<T> {
    pub domain: Domain,
    pub names: Vec<String>,
    pub frames: Vec<Array3<T>>,
}

impl<T: Scalar> PreparedFrames<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// All frames as one batch, in store order.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Result<ImageBatch<T>> {
        let refs: Vec<_> = self.frames[range].iter().collect();
        ImageBatch::from_frames(&refs)
    }
}

/// Crop for one frame: `rect` when given, otherwise the centred square.
pub fn resolve_crop(rect: Option<CropRect>, frame: &RgbImage, side: u32) -> CropSpec {
    CropSpec {
        rect: rect.unwrap_or_else(|| CropRect::centered_square(frame.width(), frame.height())),
        output_side: side,
    }
}

/// Decodes, crops, scales and normalizes every frame of `store`.
pub fn prepare_frames<T: Scalar>(store: &FrameStore, crop: Option<CropRect>, side: u32) -> Result<PreparedFrames<T>> {
    let mut frames = Vec::with_capacity(store.len());
    let mut names = Vec::with_capacity(store.len());
    for i in 0..store.len() {
        let img = store.decode(i)?;
        let scaled = crop_and_scale(&img, &resolve_crop(crop, &img, side))?;
        frames.push(to_normalized(&scaled));
        names.push(file_name(&store.frames[i]));
    }
    Ok(PreparedFrames {
        domain: store.domain,
        names,
        frames,
    })
}

/// Draws `n` frames uniformly with replacement from each domain: first
/// the `n` indices for `x`, then the `n` for `y`.
pub fn sample_unpaired_batch<T: Scalar, R: Rng + ?Sized>(
    x: &PreparedFrames<T>,
    y: &PreparedFrames<T>,
    n: usize,
    rng: &mut R,
) -> Result<(ImageBatch<T>, ImageBatch<T>)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Config("cannot sample from an empty frame store".into()));
    }
    let xi: Vec<usize> = (0..n).map(|_| rng.random_range(0..x.len())).collect();
    let yi: Vec<usize> = (0..n).map(|_| rng.random_range(0..y.len())).collect();
    let xb = ImageBatch::from_frames(&xi.iter().map(|&i| &x.frames[i]).collect::<Vec<_>>())?;
    let yb = ImageBatch::from_frames(&yi.iter().map(|&i| &y.frames[i]).collect::<Vec<_>>())?;
    Ok((xb, yb))
}

/// 1-based output frame name.
pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

/// Writes frames as `frame_000001.png…` plus the `frames.txt` manifest.
pub fn write_frame_sequence(dir: &Path, frames: &[RgbImage]) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = frame_name(i + 1);
        let path = dir.join(&name);
        f.save(&path).map_err(|source| Error::Image { path, source })?;
        names.push(name);
    }
    let mut manifest = fs::File::create(dir.join(MANIFEST_NAME))?;
    for n in &names {
        writeln!(manifest, "{n}")?;
    }
    Ok(names)
}
