//! Samples, the CSV manifest, grayscale image I/O, resizing, and the
//! synthetic phantom generator.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::labels::{rescale_landmarks, LandmarkSet};

/// Pixel spacing assigned to every phantom.
pub const PHANTOM_SPACING_MM: f64 = 0.5;

pub const MANIFEST_HEADER: [&str; 12] = [
    "id", "image_path", "h1", "w1", "h2", "w2", "h3", "w3", "h4", "w4", "spacing_mm", "split",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => domain(format!("unknown split {other:?} (train|val|test)")),
        }
    }
}

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} pixels for {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// Decodes an 8- or 16-bit grayscale raster, normalized by the maximum
    /// representable value.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match img {
            DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            other => {
                return domain(format!(
                    "{}: expected 8/16-bit grayscale, got {:?}",
                    path.display(),
                    other.color()
                ))
            }
        };
        Self::new(h, w, data)
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Bilinear resampling.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("buffer size");
        let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        Self {
            height,
            width,
            data: out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EchoSample {
    pub id: String,
    pub image: GrayImage,
    pub landmarks: LandmarkSet,
    pub split: Split,
}

impl EchoSample {
    pub fn new(id: impl Into<String>, image: GrayImage, landmarks: LandmarkSet, split: Split) -> Result<Self> {
        let id = id.into();
        if (landmarks.height, landmarks.width) != (image.height, image.width) {
            return Err(Error::Record {
                id,
                msg: format!(
                    "landmark frame {}x{} differs from image {}x{}",
                    landmarks.height, landmarks.width, image.height, image.width
                ),
            });
        }
        landmarks.validate().map_err(|e| Error::Record {
            id: id.clone(),
            msg: e.to_string(),
        })?;
        Ok(Self {
            id,
            image,
            landmarks,
            split,
        })
    }
}

/// One manifest row, coordinates in the original image frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub h1: f64,
    pub w1: f64,
    pub h2: f64,
    pub w2: f64,
    pub h3: f64,
    pub w3: f64,
    pub h4: f64,
    pub w4: f64,
    pub spacing_mm: f64,
    pub split: Split,
}

impl ManifestRecord {
    pub fn points(&self) -> [[f64; 2]; 4] {
        [
            [self.h1, self.w1],
            [self.h2, self.w2],
            [self.h3, self.w3],
            [self.h4, self.w4],
        ]
    }

    pub fn from_sample(s: &EchoSample, image_path: String) -> Self {
        let p = s.landmarks.points;
        Self {
            id: s.id.clone(),
            image_path,
            h1: p[0][0],
            w1: p[0][1],
            h2: p[1][0],
            w2: p[1][1],
            h3: p[2][0],
            w3: p[2][1],
            h4: p[3][0],
            w4: p[3][1],
            spacing_mm: s.landmarks.spacing_mm,
            split: s.split,
        }
    }
}

/// Parses the manifest rows without touching image files.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| {
        Error::ManifestParse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        }
    })?;
    let header_err = |line, msg: String| Error::ManifestParse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| header_err(1, e.to_string()))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(header_err(1, format!("header must be {}", MANIFEST_HEADER.join(","))));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.deserialize::<ManifestRecord>() {
        let rec = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            header_err(line, e.to_string())
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Record {
                id: rec.id,
                msg: "duplicate id".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    if records.is_empty() {
        w.write_record(MANIFEST_HEADER).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every record: decodes images, validates landmarks against the
/// decoded frame. Image paths are relative to the manifest directory.
pub fn load_manifest(path: &Path) -> Result<Vec<EchoSample>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(path)?
        .into_iter()
        .map(|rec| {
            let img_path = resolve(&base, &rec.image_path);
            if !img_path.exists() {
                return Err(Error::Record {
                    id: rec.id.clone(),
                    msg: format!("missing image file {}", img_path.display()),
                });
            }
            let image = GrayImage::load(&img_path).map_err(|e| Error::Record {
                id: rec.id.clone(),
                msg: e.to_string(),
            })?;
            let landmarks = LandmarkSet {
                points: rec.points(),
                spacing_mm: rec.spacing_mm,
                height: image.height,
                width: image.width,
            };
            EchoSample::new(rec.id, image, landmarks, rec.split)
        })
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Resamples image and landmarks to `target = (height, width)`.
pub fn resize_sample(sample: &EchoSample, target: (usize, usize)) -> Result<EchoSample> {
    let from = (sample.image.height, sample.image.width);
    let landmarks = rescale_landmarks(&sample.landmarks, from, target)?;
    Ok(EchoSample {
        id: sample.id.clone(),
        image: sample.image.resize(target.0, target.1),
        landmarks,
        split: sample.split,
    })
}

/// Parameters of one phantom, in pixels along the measurement line.
#[derive(Clone, Copy, Debug)]
struct PhantomGeometry {
    angle: f64,
    boundaries: [f64; 4],
}

fn sample_geometry<R: Rng>(rng: &mut R, size: usize) -> PhantomGeometry {
    let s = size as f64;
    let angle = rng.random_range(-12f64..12.0).to_radians();
    let top = rng.random_range(-0.36..-0.22) * s;
    let ivs = rng.random_range(0.08..0.14) * s;
    let lvid = rng.random_range(0.24..0.38) * s;
    let lvpw = rng.random_range(0.08..0.14) * s;
    PhantomGeometry {
        angle,
        boundaries: [top, top + ivs, top + ivs + lvid, top + ivs + lvid + lvpw],
    }
}

/// Synthetic PLAX-like frame: a bright septum and posterior wall on either
/// side of a dark cavity, tilted by a random angle, with multiplicative
/// speckle. The measurement line is the normal to the bands through the frame
/// centre; the landmarks are its four crossings with the band boundaries.
pub fn generate_phantom(seed: u64, size: usize) -> Result<EchoSample> {
    if size < 8 {
        return domain(format!("phantom size must be at least 8, got {size}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let centre = (s - 1.0) / 2.0;
    let margin = 1.0;
    let (geo, points) = loop {
        let geo = sample_geometry(&mut rng, size);
        let normal = [-geo.angle.sin(), geo.angle.cos()];
        let pts = geo.boundaries.map(|u| [centre + u * normal[1], centre + u * normal[0]]);
        let inside = pts
            .iter()
            .flatten()
            .all(|&v| v >= margin && v <= s - 1.0 - margin);
        if inside {
            break (geo, pts);
        }
    };

    let levels = [
        rng.random_range(0.12..0.25),
        rng.random_range(0.65..0.9),
        rng.random_range(0.03..0.1),
        rng.random_range(0.6..0.85),
        rng.random_range(0.3..0.45),
    ];
    let edge = 0.6;
    let speckle = Gamma::new(6.0, 1.0 / 6.0).expect("valid gamma");
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    let normal = [-geo.angle.sin(), geo.angle.cos()];
    let mut data = Vec::with_capacity(size * size);
    for h in 0..size {
        for w in 0..size {
            let u = (w as f64 - centre) * normal[0] + (h as f64 - centre) * normal[1];
            let mut v = levels[0];
            for (i, &b) in geo.boundaries.iter().enumerate() {
                let t = 1.0 / (1.0 + (-(u - b) / edge).exp());
                v += (levels[i + 1] - levels[i]) * t;
            }
            let g: f64 = speckle.sample(&mut rng);
            let n: f64 = noise.sample(&mut rng);
            data.push((v * g + n).clamp(0.0, 1.0) as f32);
        }
    }
    let landmarks = LandmarkSet::new(points, PHANTOM_SPACING_MM, size, size)?;
    EchoSample::new(
        format!("phantom_{seed:06}"),
        GrayImage::new(size, size, data)?,
        landmarks,
        Split::Train,
    )
}

/// Split for index `i` of `n` generated samples: 80/10/10 in order, with
/// val and test sizes rounded to nearest.
pub fn synthetic_split(i: usize, n: usize) -> Split {
    let tenth = (n + 5) / 10;
    let train = n - 2 * tenth;
    if i < train {
        Split::Train
    } else if i < train + tenth {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes `images/<id>.png` plus `manifest.csv` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[EchoSample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{}.png", s.id);
        s.image.save_png16(&dir.join(&rel))?;
        records.push(ManifestRecord::from_sample(s, rel));
    }
    write_manifest(&dir.join("manifest.csv"), &records)
}
