//! Synthetic image domain: single Gaussian blobs on a 16x16 grayscale grid.
//!
//! Every image is fully described by four generative factors (center, radius,
//! peak intensity), which gives the rest of the lab analytic ground truth:
//! attribute labels come from factor thresholds, and attribute *scores* can
//! be recovered from pixels alone via moment statistics. That closes the loop
//! for verifying inversion and semantic editing without any learned
//! attribute predictor.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::numerics::{Rng, Tensor};

pub const IMG_SIDE: usize = 16;
pub const IMG_PIXELS: usize = IMG_SIDE * IMG_SIDE;

pub const CX_RANGE: (f64, f64) = (4.0, 12.0);
pub const CY_RANGE: (f64, f64) = (4.0, 12.0);
pub const S_RANGE: (f64, f64) = (1.5, 3.0);
pub const A_RANGE: (f64, f64) = (0.6, 1.0);

/// Class thresholds sit at the midpoint of each factor range so the labels
/// are balanced.
pub const CX_THRESHOLD: f64 = 8.0;
pub const S_THRESHOLD: f64 = 2.25;
pub const A_THRESHOLD: f64 = 0.8;

pub const DATASET_MAGIC: &[u8; 8] = b"FIDG-DS1";

#[derive(Debug)]
pub enum SynthError {
    OutOfRange {
        field: &'static str,
        value: f64,
    },
    UnknownAttribute(String),
    InvalidCount(usize),
    BadFile {
        path: PathBuf,
        why: String,
    },
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::OutOfRange { field, value } => {
                write!(f, "factor '{field}' = {value} outside its valid range")
            }
            SynthError::UnknownAttribute(name) => write!(f, "unknown attribute '{name}'"),
            SynthError::InvalidCount(n) => write!(f, "dataset size must be >= 1, got {n}"),
            SynthError::BadFile { path, why } => {
                write!(f, "bad dataset file {}: {why}", path.display())
            }
            SynthError::Io { path, source } => {
                write!(f, "io error on {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for SynthError {}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Generative factors of one blob image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorVector {
    /// Blob center, in pixel coordinates (x = column, y = row).
    pub cx: f64,
    pub cy: f64,
    /// Blob radius (the Gaussian sigma).
    pub s: f64,
    /// Peak intensity.
    pub a: f64,
}

impl FactorVector {
    pub fn validate(&self) -> Result<(), SynthError> {
        let checks = [
            ("cx", self.cx, CX_RANGE),
            ("cy", self.cy, CY_RANGE),
            ("s", self.s, S_RANGE),
            ("A", self.a, A_RANGE),
        ];
        for (field, value, (lo, hi)) in checks {
            if !(value >= lo && value <= hi) {
                return Err(SynthError::OutOfRange { field, value });
            }
        }
        Ok(())
    }
}

/// Uniform draw over the factor box. Draw order (cx, cy, s, A) is fixed and
/// part of the reproducibility contract.
pub fn sample_factors(rng: &mut Rng) -> FactorVector {
    FactorVector {
        cx: rng.uniform(CX_RANGE.0, CX_RANGE.1),
        cy: rng.uniform(CY_RANGE.0, CY_RANGE.1),
        s: rng.uniform(S_RANGE.0, S_RANGE.1),
        a: rng.uniform(A_RANGE.0, A_RANGE.1),
    }
}

/// A batch of images, stored `[n, 16, 16]` row-major with values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn from_tensor(data: Tensor) -> Result<ImageBatch, SynthError> {
        let ok_shape = data.shape().len() == 3
            && data.shape()[1] == IMG_SIDE
            && data.shape()[2] == IMG_SIDE;
        if !ok_shape {
            return Err(SynthError::BadFile {
                path: PathBuf::new(),
                why: format!("image tensor has shape {:?}, expected [n, 16, 16]", data.shape()),
            });
        }
        Ok(ImageBatch { data })
    }

    /// Reinterpret a `[n, 256]` matrix (e.g. generator output) as images.
    pub fn from_matrix(m: &Tensor) -> Result<ImageBatch, SynthError> {
        if m.shape().len() != 2 || m.shape()[1] != IMG_PIXELS {
            return Err(SynthError::BadFile {
                path: PathBuf::new(),
                why: format!("matrix has shape {:?}, expected [n, 256]", m.shape()),
            });
        }
        let n = m.shape()[0];
        let data = m
            .reshaped(&[n, IMG_SIDE, IMG_SIDE])
            .expect("256 = 16 * 16");
        Ok(ImageBatch { data })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Flattened `[n, 256]` view for the networks.
    pub fn as_matrix(&self) -> Tensor {
        self.data
            .reshaped(&[self.len(), IMG_PIXELS])
            .expect("16 * 16 = 256")
    }

    /// Pixels of image `i` (256 values, row-major).
    pub fn image(&self, i: usize) -> &[f64] {
        &self.data.data()[i * IMG_PIXELS..(i + 1) * IMG_PIXELS]
    }
}

/// Render one blob: pixel(x, y) = A exp(-((x-cx)^2 + (y-cy)^2) / (2 s^2)),
/// sampled at integer pixel centers and clamped to [0, 1].
pub fn render(f: &FactorVector) -> Result<ImageBatch, SynthError> {
    f.validate()?;
    let mut data = Vec::with_capacity(IMG_PIXELS);
    let inv = 1.0 / (2.0 * f.s * f.s);
    for y in 0..IMG_SIDE {
        let dy = y as f64 - f.cy;
        for x in 0..IMG_SIDE {
            let dx = x as f64 - f.cx;
            let v = f.a * (-(dx * dx + dy * dy) * inv).exp();
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let t = Tensor::from_vec(&[1, IMG_SIDE, IMG_SIDE], data).expect("render shape");
    Ok(ImageBatch { data: t })
}

/// Render a list of factor vectors into one batch.
pub fn render_batch(factors: &[FactorVector]) -> Result<ImageBatch, SynthError> {
    let mut data = Vec::with_capacity(factors.len() * IMG_PIXELS);
    for f in factors {
        let one = render(f)?;
        data.extend_from_slice(one.data.data());
    }
    let t = Tensor::from_vec(&[factors.len(), IMG_SIDE, IMG_SIDE], data).expect("batch shape");
    Ok(ImageBatch { data: t })
}

/// The three binary attributes, thresholded at factor-range midpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    RightOfCenter,
    Large,
    Bright,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::RightOfCenter, Attribute::Large, Attribute::Bright];

    pub fn name(&self) -> &'static str {
        match self {
            Attribute::RightOfCenter => "right_of_center",
            Attribute::Large => "large",
            Attribute::Bright => "bright",
        }
    }

    pub fn from_name(name: &str) -> Result<Attribute, SynthError> {
        match name {
            "right_of_center" => Ok(Attribute::RightOfCenter),
            "large" => Ok(Attribute::Large),
            "bright" => Ok(Attribute::Bright),
            other => Err(SynthError::UnknownAttribute(other.to_string())),
        }
    }

    /// Ground-truth label (+1/-1) from the generative factors.
    pub fn label_of(&self, f: &FactorVector) -> i8 {
        let positive = match self {
            Attribute::RightOfCenter => f.cx > CX_THRESHOLD,
            Attribute::Large => f.s > S_THRESHOLD,
            Attribute::Bright => f.a > A_THRESHOLD,
        };
        if positive {
            1
        } else {
            -1
        }
    }
}

/// Analytic attribute score for one image; `degenerate` marks images with no
/// mass (all-zero), where the moment statistics are undefined and the score
/// is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScore {
    pub score: f64,
    pub degenerate: bool,
}

/// Score images directly from pixels:
///
/// * `right_of_center` — intensity-centroid x minus 8
/// * `large`           — second-moment radius sqrt(m2 / 2) minus 2.25, where
///   m2 is the intensity-weighted mean squared distance from the centroid
///   (for an untruncated Gaussian blob, sqrt(m2 / 2) equals s)
/// * `bright`          — max pixel minus 0.8
pub fn attribute_oracle(images: &ImageBatch, attr: Attribute) -> Vec<OracleScore> {
    (0..images.len())
        .map(|i| oracle_one(images.image(i), attr))
        .collect()
}

fn oracle_one(pixels: &[f64], attr: Attribute) -> OracleScore {
    let total: f64 = pixels.iter().sum();
    if total <= 0.0 {
        return OracleScore {
            score: 0.0,
            degenerate: true,
        };
    }
    match attr {
        Attribute::RightOfCenter => {
            let mut mx = 0.0;
            for (idx, &v) in pixels.iter().enumerate() {
                let x = (idx % IMG_SIDE) as f64;
                mx += v * x;
            }
            OracleScore {
                score: mx / total - CX_THRESHOLD,
                degenerate: false,
            }
        }
        Attribute::Large => {
            let mut mx = 0.0;
            let mut my = 0.0;
            for (idx, &v) in pixels.iter().enumerate() {
                mx += v * (idx % IMG_SIDE) as f64;
                my += v * (idx / IMG_SIDE) as f64;
            }
            let cx = mx / total;
            let cy = my / total;
            let mut m2 = 0.0;
            for (idx, &v) in pixels.iter().enumerate() {
                let dx = (idx % IMG_SIDE) as f64 - cx;
                let dy = (idx / IMG_SIDE) as f64 - cy;
                m2 += v * (dx * dx + dy * dy);
            }
            OracleScore {
                score: (m2 / total / 2.0).sqrt() - S_THRESHOLD,
                degenerate: false,
            }
        }
        Attribute::Bright => {
            let max = pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            OracleScore {
                score: max - A_THRESHOLD,
                degenerate: false,
            }
        }
    }
}

/// A generated dataset: images, their factors, and per-attribute labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: ImageBatch,
    pub factors: Vec<FactorVector>,
    /// labels[k][i] is the label of image i under Attribute::ALL[k].
    pub labels: Vec<Vec<i8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn labels_for(&self, attr: Attribute) -> &[i8] {
        let k = Attribute::ALL.iter().position(|a| *a == attr).unwrap();
        &self.labels[k]
    }
}

/// Draw n factor vectors, render them, label them.
pub fn generate_dataset(rng: &mut Rng, n: usize) -> Result<Dataset, SynthError> {
    if n == 0 {
        return Err(SynthError::InvalidCount(0));
    }
    let factors: Vec<FactorVector> = (0..n).map(|_| sample_factors(rng)).collect();
    let images = render_batch(&factors)?;
    let labels = Attribute::ALL
        .iter()
        .map(|attr| factors.iter().map(|f| attr.label_of(f)).collect())
        .collect();
    Ok(Dataset {
        images,
        factors,
        labels,
    })
}

/// Packed dataset file:
///
/// ```text
/// magic "FIDG-DS1"            8 bytes
/// n     u32 little-endian
/// pixels  n * 256 f64 LE      row-major images
/// factors n * 4   f64 LE      (cx, cy, s, A) per image
/// labels  n * 3   u8          one byte per (image, attribute) in
///                             Attribute::ALL order; 0x01 = +1, 0x00 = -1
/// ```
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), SynthError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(ds.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(ds.len() * IMG_PIXELS * 8);
        for v in ds.images.tensor().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        for f in &ds.factors {
            for v in [f.cx, f.cy, f.s, f.a] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for i in 0..ds.len() {
            for labels in &ds.labels {
                w.write_all(&[if labels[i] > 0 { 1u8 } else { 0u8 }])?;
            }
        }
        w.flush()
    };
    run().map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SynthError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let bad = |why: &str| SynthError::BadFile {
        path: path.to_path_buf(),
        why: why.to_string(),
    };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut nb = [0u8; 4];
    r.read_exact(&mut nb).map_err(io_err(path))?;
    let n = u32::from_le_bytes(nb) as usize;
    if n == 0 {
        return Err(bad("empty dataset"));
    }

    let mut pixel_bytes = vec![0u8; n * IMG_PIXELS * 8];
    r.read_exact(&mut pixel_bytes).map_err(io_err(path))?;
    let pixels: Vec<f64> = pixel_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let images = ImageBatch {
        data: Tensor::from_vec(&[n, IMG_SIDE, IMG_SIDE], pixels)
            .map_err(|e| bad(&format!("pixel payload: {e}")))?,
    };

    let mut factor_bytes = vec![0u8; n * 4 * 8];
    r.read_exact(&mut factor_bytes).map_err(io_err(path))?;
    let raw: Vec<f64> = factor_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let factors: Vec<FactorVector> = raw
        .chunks_exact(4)
        .map(|c| FactorVector {
            cx: c[0],
            cy: c[1],
            s: c[2],
            a: c[3],
        })
        .collect();

    let mut label_bytes = vec![0u8; n * 3];
    r.read_exact(&mut label_bytes).map_err(io_err(path))?;
    let mut labels = vec![Vec::with_capacity(n); 3];
    for chunk in label_bytes.chunks_exact(3) {
        for (k, &b) in chunk.iter().enumerate() {
            labels[k].push(if b == 1 { 1i8 } else { -1i8 });
        }
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err(path))? != 0 {
        return Err(bad("trailing bytes"));
    }

    Ok(Dataset {
        images,
        factors,
        labels,
    })
}

/// Write one image as a binary PGM (P5, maxval 255) for human inspection.
pub fn write_pgm(pixels: &[f64], path: &Path) -> Result<(), SynthError> {
    if pixels.len() != IMG_PIXELS {
        return Err(SynthError::BadFile {
            path: path.to_path_buf(),
            why: format!("expected {IMG_PIXELS} pixels, got {}", pixels.len()),
        });
    }
    let mut bytes = Vec::with_capacity(32 + IMG_PIXELS);
    bytes.extend_from_slice(format!("P5\n{IMG_SIDE} {IMG_SIDE}\n255\n").as_bytes());
    for &v in pixels {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}


#[cfg(test)]
mod survey {
    use super::*;

    #[test]
    #[ignore]
    fn survey_oracle_agreement_and_centroid() {
        let mut rng = Rng::from_seed(123);
        let ds = generate_dataset(&mut rng, 10_000).unwrap();
        for attr in Attribute::ALL {
            let scores = attribute_oracle(&ds.images, attr);
            let agree = scores
                .iter()
                .zip(ds.labels_for(attr).iter())
                .filter(|(s, l)| (s.score > 0.0) == (**l > 0))
                .count() as f64
                / ds.len() as f64;
            println!("{}: agreement {agree:.4}", attr.name());
        }
        // Centroid recovery envelope over a dense factor grid.
        let mut worst: (f64, f64, f64) = (0.0, 0.0, 0.0); // err, cx, s
        let mut worst_inner = 0.0; // cx,cy in [5,11], any s
        let mut worst_tight = 0.0; // s <= 2.0, full center range
        for i in 0..=40 {
            let cx = 4.0 + 8.0 * i as f64 / 40.0;
            for j in 0..=40 {
                let cy = 4.0 + 8.0 * j as f64 / 40.0;
                for k in 0..=15 {
                    let s = 1.5 + 1.5 * k as f64 / 15.0;
                    let f = FactorVector { cx, cy, s, a: 0.8 };
                    let img = render(&f).unwrap();
                    let px = img.image(0);
                    let tot: f64 = px.iter().sum();
                    let mx: f64 = px.iter().enumerate().map(|(idx, v)| v * (idx % IMG_SIDE) as f64).sum();
                    let my: f64 = px.iter().enumerate().map(|(idx, v)| v * (idx / IMG_SIDE) as f64).sum();
                    let err = ((mx / tot - cx).powi(2) + (my / tot - cy).powi(2)).sqrt();
                    if err > worst.0 { worst = (err, cx, s); }
                    if (5.0..=11.0).contains(&cx) && (5.0..=11.0).contains(&cy) && err > worst_inner { worst_inner = err; }
                    if s <= 2.0 && err > worst_tight { worst_tight = err; }
                }
            }
        }
        println!("worst centroid err {:.4} at cx={} s={}", worst.0, worst.1, worst.2);
        println!("worst inner-[5,11] err {worst_inner:.4}");
        println!("worst s<=2 err {worst_tight:.4}");
        // 'large' oracle bias: compare sqrt(m2/2) to s over the grid.
        for s in [1.5, 2.0, 2.25, 2.5, 3.0] {
            let f = FactorVector { cx: 8.0, cy: 8.0, s, a: 0.8 };
            let img = render(&f).unwrap();
            let sc = attribute_oracle(&img, Attribute::Large)[0].score;
            println!("s={s}: radius estimate {:.4} (bias {:+.4})", sc + S_THRESHOLD, sc + S_THRESHOLD - s);
        }
    }
}
