//! Latent-code editing on a trained bundle: inversion, interpolation,
//! semantic diffusion, and linear-boundary manipulation sweeps.
//!
//! Every operation here is a pure function of the bundle snapshot and its
//! arguments; nothing draws randomness or touches global state, so edits are
//! reproducible byte-for-byte.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::models::ModelBundle;
use crate::numerics::{splitmix64, NumericsError, Tensor};
use crate::synthdata::{write_pgm, ImageBatch, SynthError, IMG_PIXELS, IMG_SIDE};

/// Default sweep half-range for `manipulate`: alphas span [-3, +3].
pub const DEFAULT_ALPHA: f64 = 3.0;
/// Default number of frames in a manipulation sweep.
pub const DEFAULT_SWEEP_STEPS: usize = 7;
/// Unit-norm tolerance enforced on boundary normals.
pub const UNIT_NORM_TOL: f64 = 1e-10;
/// Minimum number of labeled codes `train_boundary` accepts.
pub const MIN_BOUNDARY_SAMPLES: usize = 20;

const SVM_LR: f64 = 0.1;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum EditError {
    /// Malformed argument (shape, range, or count).
    BadInput(String),
    /// Boundary training needs both labels present.
    SingleClass,
    /// Boundary training needs a minimum sample count.
    TooFewSamples { needed: usize, got: usize },
    /// The SVM collapsed (zero or non-finite normal).
    Degenerate(String),
    /// A boundary normal was not unit length; carries the actual norm.
    NotUnit(f64),
    Numerics(NumericsError),
    Synth(SynthError),
    Json(serde_json::Error),
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for EditError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditError::BadInput(why) => write!(f, "bad edit input: {why}"),
            EditError::SingleClass => {
                write!(f, "boundary training needs both classes present")
            }
            EditError::TooFewSamples { needed, got } => {
                write!(f, "boundary training needs >= {needed} samples, got {got}")
            }
            EditError::Degenerate(why) => write!(f, "degenerate boundary: {why}"),
            EditError::NotUnit(norm) => {
                write!(f, "boundary normal is not unit length (|n| = {norm})")
            }
            EditError::Numerics(e) => write!(f, "{e}"),
            EditError::Synth(e) => write!(f, "{e}"),
            EditError::Json(e) => write!(f, "boundary JSON: {e}"),
            EditError::Io { path, source } => {
                write!(f, "I/O on {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for EditError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            EditError::Numerics(e) => Some(e),
            EditError::Synth(e) => Some(e),
            EditError::Json(e) => Some(e),
            EditError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<NumericsError> for EditError {
    fn from(e: NumericsError) -> Self {
        EditError::Numerics(e)
    }
}

impl From<SynthError> for EditError {
    fn from(e: SynthError) -> Self {
        EditError::Synth(e)
    }
}

impl From<serde_json::Error> for EditError {
    fn from(e: serde_json::Error) -> Self {
        EditError::Json(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EditError + '_ {
    move |source| EditError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Boundary
// ---------------------------------------------------------------------------

/// A linear semantic boundary in code space: the decision function is
/// `n . w + b`, with `n` unit length. `accuracy` is the held-out accuracy
/// recorded when the boundary was trained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Boundary {
    pub attribute: String,
    pub n: Vec<f64>,
    pub b: f64,
    pub accuracy: f64,
    pub d_w: usize,
    pub created_from_run: String,
}

impl Boundary {
    /// Checks the structural invariants: dimensions agree, everything is
    /// finite, and the normal is unit length within `UNIT_NORM_TOL`.
    pub fn validate(&self) -> Result<(), EditError> {
        if self.n.is_empty() || self.n.len() != self.d_w {
            return Err(EditError::BadInput(format!(
                "boundary normal has {} entries but d_w = {}",
                self.n.len(),
                self.d_w
            )));
        }
        if !self.n.iter().all(|v| v.is_finite())
            || !self.b.is_finite()
            || !self.accuracy.is_finite()
        {
            return Err(EditError::BadInput(
                "boundary contains non-finite values".into(),
            ));
        }
        let norm = self.n.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(EditError::NotUnit(norm));
        }
        Ok(())
    }

    /// Decision function `n . w + b` for a single code row.
    pub fn score(&self, w: &[f64]) -> Result<f64, EditError> {
        if w.len() != self.n.len() {
            return Err(EditError::BadInput(format!(
                "code has {} entries, boundary expects {}",
                w.len(),
                self.n.len()
            )));
        }
        Ok(self.n.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + self.b)
    }

    pub fn to_json(&self) -> Result<String, EditError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Boundary, EditError> {
        let b: Boundary = serde_json::from_str(text)?;
        b.validate()?;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<(), EditError> {
        self.validate()?;
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Boundary, EditError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Boundary::from_json(&text)
    }
}

/// One manipulation request: sweep `steps` frames around the inverted code
/// `w` along the boundary normal, with signed half-range `alpha`.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub w: Tensor,
    pub boundary: Boundary,
    pub alpha: f64,
    pub steps: usize,
}

// ---------------------------------------------------------------------------
// Inversion and interpolation
// ---------------------------------------------------------------------------

/// Inverts a batch of images into code space: `w = E(x)`, shape
/// `[n, d_w]`. Deterministic; requires only a forward pass.
pub fn invert(bundle: &ModelBundle, x: &ImageBatch) -> Result<Tensor, EditError> {
    if x.is_empty() {
        return Err(EditError::BadInput("cannot invert an empty batch".into()));
    }
    Ok(bundle.encode(&x.as_matrix())?)
}

/// Accepts a single code as either `[d]` or `[1, d]` and returns its flat
/// slice, checking the dimension against the bundle.
fn single_code<'t>(
    bundle: &ModelBundle,
    w: &'t Tensor,
    name: &str,
) -> Result<&'t [f64], EditError> {
    let d = bundle.latent_dim();
    let ok = w.numel() == d
        && (w.shape().len() == 1 || (w.shape().len() == 2 && w.shape()[0] == 1));
    if !ok {
        return Err(EditError::BadInput(format!(
            "{name} must be a single {d}-dim code, got shape {:?}",
            w.shape()
        )));
    }
    Ok(w.data())
}

/// Interpolates two codes over `k >= 2` frames: frame `i` is
/// `G((1 - t) w1 + t w2)` at `t = i / (k - 1)`. The endpoint frames use
/// `w1` and `w2` directly, so they are bitwise-exact generator outputs, and
/// the convex combination is evaluated as `w1 + t (w2 - w1)` so that equal
/// inputs give bitwise-identical frames at every `t`.
pub fn interpolate(
    bundle: &ModelBundle,
    w1: &Tensor,
    w2: &Tensor,
    k: usize,
) -> Result<ImageBatch, EditError> {
    if k < 2 {
        return Err(EditError::BadInput(format!(
            "interpolation needs at least 2 frames, got {k}"
        )));
    }
    let a = single_code(bundle, w1, "w1")?;
    let b = single_code(bundle, w2, "w2")?;
    let d = bundle.latent_dim();
    let mut codes = Vec::with_capacity(k * d);
    for i in 0..k {
        if i == 0 {
            codes.extend_from_slice(a);
        } else if i == k - 1 {
            codes.extend_from_slice(b);
        } else {
            let t = i as f64 / (k - 1) as f64;
            codes.extend(a.iter().zip(b).map(|(x, y)| x + t * (y - x)));
        }
    }
    let codes = Tensor::from_vec(&[k, d], codes)?;
    let frames = bundle.generate(&codes)?;
    Ok(ImageBatch::from_matrix(&frames)?)
}

// ---------------------------------------------------------------------------
// Semantic diffusion
// ---------------------------------------------------------------------------

/// The default diffusion mask: a centered 8x8 block of ones on the 16x16
/// grid (rows and columns 4..12), flattened to `[256]`.
pub fn default_mask() -> Tensor {
    let mut m = vec![0.0; IMG_PIXELS];
    for r in 4..12 {
        for c in 4..12 {
            m[r * IMG_SIDE + c] = 1.0;
        }
    }
    Tensor::from_vec(&[IMG_PIXELS], m).expect("fixed shape")
}

/// Pastes the masked region of `target` onto `context` and re-encodes the
/// composite: returns `(x_mix, G(E(x_mix)))` where
/// `x_mix = mask * target + (1 - mask) * context`. Because the mask is
/// validated to hold exactly 0.0 or 1.0, the mix is an exact per-pixel
/// select, so complementary masks swap the two roles bitwise.
pub fn diffuse(
    bundle: &ModelBundle,
    target: &ImageBatch,
    context: &ImageBatch,
    mask: &Tensor,
) -> Result<(ImageBatch, ImageBatch), EditError> {
    if target.len() != 1 || context.len() != 1 {
        return Err(EditError::BadInput(format!(
            "diffuse takes one target and one context image, got {} and {}",
            target.len(),
            context.len()
        )));
    }
    if mask.numel() != IMG_PIXELS {
        return Err(EditError::BadInput(format!(
            "mask must have {IMG_PIXELS} entries, got {}",
            mask.numel()
        )));
    }
    if let Some(bad) = mask.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(EditError::BadInput(format!(
            "mask values must be exactly 0 or 1, found {bad}"
        )));
    }
    let t = target.image(0);
    let c = context.image(0);
    let mixed: Vec<f64> = mask
        .data()
        .iter()
        .zip(t.iter().zip(c))
        .map(|(m, (tp, cp))| if *m == 1.0 { *tp } else { *cp })
        .collect();
    let x_mix = ImageBatch::from_matrix(&Tensor::from_vec(&[1, IMG_PIXELS], mixed)?)?;
    let w = invert(bundle, &x_mix)?;
    let rec = ImageBatch::from_matrix(&bundle.generate(&w)?)?;
    Ok((x_mix, rec))
}

// ---------------------------------------------------------------------------
// Boundary training
// ---------------------------------------------------------------------------

/// Deterministic 20% held-out split: row `i` is held out when the hash of
/// its index lands in one of five buckets.
fn is_held_out(i: usize) -> bool {
    splitmix64(i as u64) % 5 == 0
}

/// Fits a linear SVM on labeled codes by full-batch subgradient descent on
/// the hinge loss plus `(lambda_svm / 2) |v|^2`, then rescales so the
/// returned normal is unit length. Rows are split 80/20 into train and
/// held-out sets by a fixed index hash; `accuracy` is measured on the
/// held-out rows.
pub fn train_boundary(
    codes: &Tensor,
    labels: &[i8],
    lambda_svm: f64,
    epochs: usize,
    attribute: &str,
    created_from_run: &str,
) -> Result<Boundary, EditError> {
    if codes.shape().len() != 2 {
        return Err(EditError::BadInput(format!(
            "codes must be [n, d], got shape {:?}",
            codes.shape()
        )));
    }
    let (n, d) = (codes.shape()[0], codes.shape()[1]);
    if labels.len() != n {
        return Err(EditError::BadInput(format!(
            "{n} code rows but {} labels",
            labels.len()
        )));
    }
    if n < MIN_BOUNDARY_SAMPLES {
        return Err(EditError::TooFewSamples { needed: MIN_BOUNDARY_SAMPLES, got: n });
    }
    if let Some(bad) = labels.iter().find(|l| **l != 1 && **l != -1) {
        return Err(EditError::BadInput(format!(
            "labels must be +1 or -1, found {bad}"
        )));
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(EditError::SingleClass);
    }
    if !(lambda_svm.is_finite() && lambda_svm >= 0.0) {
        return Err(EditError::BadInput(format!(
            "lambda_svm must be finite and >= 0, got {lambda_svm}"
        )));
    }
    if epochs == 0 {
        return Err(EditError::BadInput("epochs must be >= 1".into()));
    }
    if !codes.all_finite() {
        return Err(EditError::BadInput("codes contain non-finite values".into()));
    }

    let rows = codes.data();
    let train: Vec<usize> = (0..n).filter(|i| !is_held_out(*i)).collect();
    let held: Vec<usize> = (0..n).filter(|i| is_held_out(*i)).collect();
    if train.is_empty() || held.is_empty() {
        return Err(EditError::Degenerate(
            "index-hash split left an empty train or held-out set".into(),
        ));
    }

    // Full-batch subgradient descent from the origin. Starting at v = 0,
    // b = 0 makes the whole trajectory odd in the labels: flipping every
    // label negates v and b bitwise, so the decision function is exactly
    // negated.
    let mut v = vec![0.0_f64; d];
    let mut b = 0.0_f64;
    let m = train.len() as f64;
    for _ in 0..epochs {
        let mut gv = vec![0.0_f64; d];
        let mut gb = 0.0_f64;
        for &i in &train {
            let x = &rows[i * d..(i + 1) * d];
            let y = labels[i] as f64;
            let margin = y * (v.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b);
            if margin < 1.0 {
                for (g, xv) in gv.iter_mut().zip(x) {
                    *g -= y * xv;
                }
                gb -= y;
            }
        }
        for (vj, gj) in v.iter_mut().zip(&gv) {
            *vj -= SVM_LR * (lambda_svm * *vj + *gj / m);
        }
        b -= SVM_LR * (gb / m);
    }

    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() || !b.is_finite() {
        return Err(EditError::Degenerate(format!(
            "SVM produced |v| = {norm}, b = {b}"
        )));
    }
    let n_out: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let b_out = b / norm;

    let mut correct = 0usize;
    for &i in &held {
        let x = &rows[i * d..(i + 1) * d];
        let s = n_out.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b_out;
        let pred: i8 = if s > 0.0 { 1 } else { -1 };
        if pred == labels[i] {
            correct += 1;
        }
    }
    let boundary = Boundary {
        attribute: attribute.to_string(),
        n: n_out,
        b: b_out,
        accuracy: correct as f64 / held.len() as f64,
        d_w: d,
        created_from_run: created_from_run.to_string(),
    };
    boundary.validate()?;
    Ok(boundary)
}

// ---------------------------------------------------------------------------
// Manipulation sweeps
// ---------------------------------------------------------------------------

/// Evenly spaced signed offsets covering `[-alpha, +alpha]` in `steps`
/// frames. The spacing is symmetric under negation bitwise: entry
/// `steps-1-i` is exactly `-entry(i)`. A single step yields `[0.0]`.
pub fn sweep_alphas(alpha: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    let den = (steps - 1) as f64;
    (0..steps)
        .map(|i| alpha * ((2 * i) as f64 - den) / den)
        .collect()
}

/// A manipulation sweep: the offsets used and the generated frames, in
/// matching order.
#[derive(Debug)]
pub struct Sweep {
    pub alphas: Vec<f64>,
    pub frames: ImageBatch,
}

/// Walks the code along the boundary normal and decodes each step:
/// frame `i` is `G(w + alpha_i * n)` with `alpha_i` from `sweep_alphas`.
/// An offset of exactly zero reuses `w` untouched, so the center frame is
/// the plain reconstruction bitwise.
pub fn manipulate(bundle: &ModelBundle, req: &EditRequest) -> Result<Sweep, EditError> {
    req.boundary.validate()?;
    if !req.alpha.is_finite() {
        return Err(EditError::BadInput(format!(
            "alpha must be finite, got {}",
            req.alpha
        )));
    }
    if req.steps == 0 {
        return Err(EditError::BadInput("sweep needs at least one step".into()));
    }
    let w = single_code(bundle, &req.w, "w")?;
    if req.boundary.d_w != bundle.latent_dim() {
        return Err(EditError::BadInput(format!(
            "boundary is {}-dim but the bundle's code space is {}-dim",
            req.boundary.d_w,
            bundle.latent_dim()
        )));
    }
    let alphas = sweep_alphas(req.alpha, req.steps);
    let d = bundle.latent_dim();
    let mut codes = Vec::with_capacity(alphas.len() * d);
    for &a in &alphas {
        if a == 0.0 {
            codes.extend_from_slice(w);
        } else {
            codes.extend(w.iter().zip(&req.boundary.n).map(|(wj, nj)| wj + a * nj));
        }
    }
    let codes = Tensor::from_vec(&[alphas.len(), d], codes)?;
    let frames = ImageBatch::from_matrix(&bundle.generate(&codes)?)?;
    Ok(Sweep { alphas, frames })
}

// ---------------------------------------------------------------------------
// Frame output
// ---------------------------------------------------------------------------

/// Writes every frame of a batch to `dir` as `frame_{i:03}.pgm` and returns
/// the paths in frame order.
pub fn write_frames(dir: &Path, frames: &ImageBatch) -> Result<Vec<PathBuf>, EditError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut paths = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        let path = dir.join(format!("frame_{i:03}.pgm"));
        write_pgm(frames.image(i), &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes the per-frame sweep table `frame,alpha,score` next to the frames.
pub fn write_sweep_csv(
    path: &Path,
    alphas: &[f64],
    scores: &[f64],
) -> Result<(), EditError> {
    if alphas.len() != scores.len() {
        return Err(EditError::BadInput(format!(
            "{} alphas but {} scores",
            alphas.len(),
            scores.len()
        )));
    }
    let mut out = String::from("frame,alpha,score\n");
    for (i, (a, s)) in alphas.iter().zip(scores).enumerate() {
        out.push_str(&format!("{i},{a},{s}\n"));
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
