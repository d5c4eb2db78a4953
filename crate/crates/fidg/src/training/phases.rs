//! The two training phases and their artifact plumbing: the metrics CSV,
//! the checkpoint schedule, and deterministic resume.
//!
//! Determinism contract: every run consumes randomness from named streams
//! of the run seed. The training loops each chain one RNG whose state is
//! checkpointed; per step, the draws happen in a fixed order (batch
//! indices, then latent samples) *before* any parameter update. In-loop
//! evaluations use stateless per-step streams so they can never shift the
//! training sequence.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::metrics::{
    alignment_report, fit_gaussian, frechet_distance_sq, mse, ReportOptions,
};
use crate::models::checkpoint::CHECKPOINT_VERSION;
use crate::models::{save_checkpoint, Checkpoint, Mlp, ModelBundle};
use crate::numerics::{Adam, Gradients, Rng, Tape, Tensor};

use super::{
    critic_loss_d, critic_loss_dw, encoder_loss, EncoderLossValues, FeatureExtractor,
    LossWeights, TrainMode, TrainingError,
};

/// RNG stream tags. Each consumer of randomness owns a stream of the run
/// seed, so adding or removing draws in one consumer never shifts another.
pub const STREAM_MODEL_INIT: u64 = 0;
pub const STREAM_PRETRAIN_LOOP: u64 = 1;
pub const STREAM_DW_INIT: u64 = 2;
pub const STREAM_REPORT: u64 = 3;
pub const STREAM_INVERT_LOOP: u64 = 4;

/// Stream tag for the in-loop evaluation after `step` completed steps;
/// spaced so the tags never collide with the fixed streams above.
pub fn eval_stream(step: u64) -> u64 {
    5 + 16 * step
}

/// Cadence of metrics-CSV rows (interval means of the step losses).
pub const LOG_INTERVAL: u64 = 100;
/// Cadence of held-out evaluation and checkpoints.
pub const EVAL_INTERVAL: u64 = 1000;
/// Phase tag of checkpoints written by [`pretrain_gan`].
pub const PHASE_PRETRAIN: &str = "pretrain";

/// Rows of the held-out split used for in-loop metrics.
const EVAL_ROW_CAP: usize = 512;
/// Codes drawn for the in-loop fd_latent estimate.
const EVAL_REPORT_SAMPLES: usize = 1024;

fn io_err(path: &Path, source: std::io::Error) -> TrainingError {
    TrainingError::Io { path: path.to_path_buf(), source }
}

/// One metrics-CSV row. `None` renders as an empty cell — a metric that
/// does not exist at that step (e.g. fd_latent during pretraining) is
/// missing, not zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_cyc: Option<f64>,
    pub loss_adv_d: Option<f64>,
    pub loss_adv_dw: Option<f64>,
    pub loss_perc: Option<f64>,
    pub loss_total: Option<f64>,
    pub fd_latent: Option<f64>,
    pub fd_feature: Option<f64>,
    pub mse_eval: Option<f64>,
}

impl MetricsRow {
    pub fn empty(step: u64) -> MetricsRow {
        MetricsRow { step, ..MetricsRow::default() }
    }

    pub fn to_line(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            cell(self.loss_cyc),
            cell(self.loss_adv_d),
            cell(self.loss_adv_dw),
            cell(self.loss_perc),
            cell(self.loss_total),
            cell(self.fd_latent),
            cell(self.fd_feature),
            cell(self.mse_eval),
        )
    }

    fn parse(line: &str) -> Result<MetricsRow, TrainingError> {
        let bad = || TrainingError::BadConfig(format!("malformed metrics row {line:?}"));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(bad());
        }
        let step = parts[0].parse::<u64>().map_err(|_| bad())?;
        let mut cells = [None; 8];
        for (slot, raw) in cells.iter_mut().zip(&parts[1..]) {
            if !raw.is_empty() {
                *slot = Some(raw.parse::<f64>().map_err(|_| bad())?);
            }
        }
        Ok(MetricsRow {
            step,
            loss_cyc: cells[0],
            loss_adv_d: cells[1],
            loss_adv_dw: cells[2],
            loss_perc: cells[3],
            loss_total: cells[4],
            fd_latent: cells[5],
            fd_feature: cells[6],
            mse_eval: cells[7],
        })
    }
}

/// Append-only metrics log with the fixed nine-column header.
pub struct MetricsCsv {
    path: PathBuf,
    file: File,
}

impl MetricsCsv {
    pub const HEADER: &'static str =
        "step,loss_cyc,loss_adv_d,loss_adv_dw,loss_perc,loss_total,fd_latent,fd_feature,mse_eval";

    pub fn create(path: &Path) -> Result<MetricsCsv, TrainingError> {
        let mut file = File::create(path).map_err(|e| io_err(path, e))?;
        writeln!(file, "{}", Self::HEADER).map_err(|e| io_err(path, e))?;
        Ok(MetricsCsv { path: path.to_path_buf(), file })
    }

    /// Reopen an existing log for a resumed run: rows after the resume
    /// step are dropped so the rewritten tail matches an uninterrupted
    /// run byte for byte.
    pub fn resume(path: &Path, keep_up_to: u64) -> Result<MetricsCsv, TrainingError> {
        let rows = Self::read_rows(path)?;
        let mut csv = Self::create(path)?;
        for row in rows.iter().filter(|r| r.step <= keep_up_to) {
            csv.append(row)?;
        }
        Ok(csv)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), TrainingError> {
        writeln!(self.file, "{}", row.to_line()).map_err(|e| io_err(&self.path, e))
    }

    pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>, TrainingError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut lines = BufReader::new(file).lines();
        match lines.next() {
            Some(Ok(header)) if header == Self::HEADER => {}
            _ => {
                return Err(TrainingError::BadConfig(format!(
                    "{} does not start with the metrics header",
                    path.display()
                )))
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line.map_err(|e| io_err(path, e))?;
            if !line.is_empty() {
                rows.push(MetricsRow::parse(&line)?);
            }
        }
        Ok(rows)
    }
}

/// Where a training phase writes its artifacts: `metrics.csv` plus a
/// `checkpoints/` directory under one run directory. Callers create this
/// with [`TrainSink::create`] for a fresh run or [`TrainSink::resume`]
/// (passing the checkpoint's step) when resuming.
pub struct TrainSink {
    dir: PathBuf,
    csv: MetricsCsv,
}

impl TrainSink {
    pub fn create(dir: &Path) -> Result<TrainSink, TrainingError> {
        let ck_dir = dir.join("checkpoints");
        fs::create_dir_all(&ck_dir).map_err(|e| io_err(&ck_dir, e))?;
        let csv = MetricsCsv::create(&dir.join("metrics.csv"))?;
        Ok(TrainSink { dir: dir.to_path_buf(), csv })
    }

    pub fn resume(dir: &Path, keep_up_to: u64) -> Result<TrainSink, TrainingError> {
        let ck_dir = dir.join("checkpoints");
        fs::create_dir_all(&ck_dir).map_err(|e| io_err(&ck_dir, e))?;
        let csv = MetricsCsv::resume(&dir.join("metrics.csv"), keep_up_to)?;
        Ok(TrainSink { dir: dir.to_path_buf(), csv })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    fn write_checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<(), TrainingError> {
        Ok(save_checkpoint(ck, &self.checkpoint_path(name))?)
    }
}

/// Interval accumulator behind the periodic CSV rows.
#[derive(Default)]
struct LossWindow {
    n: u64,
    d_sum: f64,
    g_sum: f64,
    cyc_sum: f64,
    total_sum: f64,
    adv_d_sum: f64,
    adv_d_n: u64,
    adv_dw_sum: f64,
    adv_dw_n: u64,
    perc_sum: f64,
    perc_n: u64,
}

fn window_mean(sum: f64, n: u64) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

impl LossWindow {
    fn add_pretrain(&mut self, loss_d: f64, loss_g: f64) {
        self.n += 1;
        self.d_sum += loss_d;
        self.g_sum += loss_g;
    }

    fn add_invert(&mut self, v: &EncoderLossValues) {
        self.n += 1;
        self.cyc_sum += v.cyc;
        self.total_sum += v.total;
        if let Some(x) = v.adv_d {
            self.adv_d_sum += x;
            self.adv_d_n += 1;
        }
        if let Some(x) = v.adv_dw {
            self.adv_dw_sum += x;
            self.adv_dw_n += 1;
        }
        if let Some(x) = v.perc {
            self.perc_sum += x;
            self.perc_n += 1;
        }
    }

    fn pretrain_row(&self, step: u64) -> MetricsRow {
        MetricsRow {
            step,
            loss_adv_d: window_mean(self.d_sum, self.n),
            loss_total: window_mean(self.g_sum, self.n),
            ..MetricsRow::default()
        }
    }

    fn invert_row(&self, step: u64) -> MetricsRow {
        MetricsRow {
            step,
            loss_cyc: window_mean(self.cyc_sum, self.n),
            loss_adv_d: window_mean(self.adv_d_sum, self.adv_d_n),
            loss_adv_dw: window_mean(self.adv_dw_sum, self.adv_dw_n),
            loss_perc: window_mean(self.perc_sum, self.perc_n),
            loss_total: window_mean(self.total_sum, self.n),
            ..MetricsRow::default()
        }
    }

    fn reset(&mut self) {
        *self = LossWindow::default();
    }
}

fn detached_params(net: &Mlp) -> Vec<Tensor> {
    net.weights
        .iter()
        .zip(net.biases.iter())
        .flat_map(|(w, b)| [w.detach(), b.detach()])
        .collect()
}

fn grad_vec(grads: &Gradients, params: &[Tensor]) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| grads.wrt(p).map(|g| g.detach()).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn write_back(net: &mut Mlp, params: &[Tensor]) {
    for (l, pair) in params.chunks_exact(2).enumerate() {
        net.weights[l] = pair[0].detach();
        net.biases[l] = pair[1].detach();
    }
}

/// Fréchet distance between the feature-space Gaussians of two image sets.
fn fd_feature(
    features: &FeatureExtractor,
    x_a: &Tensor,
    x_b: &Tensor,
) -> Result<f64, TrainingError> {
    let fa = features.forward(x_a)?;
    let fb = features.forward(x_b)?;
    Ok(frechet_distance_sq(&fit_gaussian(&fa)?, &fit_gaussian(&fb)?)?)
}

/// Train/eval split: the last tenth of the dataset is held out; in-loop
/// metrics see at most [`EVAL_ROW_CAP`] of its rows.
fn split_images(images: &Tensor) -> Result<(usize, Tensor), TrainingError> {
    if images.shape().len() != 2 {
        return Err(TrainingError::BadConfig(format!(
            "training images must be [n, pixels], got shape {:?}",
            images.shape()
        )));
    }
    let n = images.shape()[0];
    if n < 20 {
        return Err(TrainingError::BadConfig(format!(
            "need at least 20 images for a usable held-out split, got {n}"
        )));
    }
    let eval_len = n / 10;
    let train_len = n - eval_len;
    let x_eval = images.slice_rows(train_len, train_len + eval_len.min(EVAL_ROW_CAP))?;
    Ok((train_len, x_eval))
}

fn draw_batch(
    rng: &mut Rng,
    images: &Tensor,
    train_len: usize,
    batch: usize,
) -> Result<Tensor, TrainingError> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.index(train_len)).collect();
    Ok(images.gather_rows(&idx)?)
}

fn draw_codes(rng: &mut Rng, batch: usize, latent_dim: usize) -> Result<Tensor, TrainingError> {
    Ok(Tensor::from_vec(&[batch, latent_dim], rng.gaussian_vec(batch * latent_dim))?)
}

fn ensure_finite(
    value: f64,
    phase: &'static str,
    step: u64,
    what: &str,
) -> Result<(), TrainingError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainingError::NonFinite { phase, step, breakdown: format!("{what} = {value}") })
    }
}

/// Result of GAN pretraining: the bundle with FC and G frozen, plus the
/// perceptual feature extractor cloned from the trained image critic.
pub struct PretrainOutput {
    pub bundle: ModelBundle,
    pub features: FeatureExtractor,
}

fn pretrain_checkpoint(
    bundle: &ModelBundle,
    opt_d: &Adam,
    opt_g: &Adam,
    rng: &Rng,
    step: u64,
) -> Checkpoint {
    let mut arrays = bundle.named_arrays();
    arrays.extend(opt_d.export_state("opt.d", &detached_params(&bundle.critic_d)));
    let mut gen_params = detached_params(&bundle.fc);
    gen_params.extend(detached_params(&bundle.generator));
    arrays.extend(opt_g.export_state("opt.g", &gen_params));
    Checkpoint {
        version: CHECKPOINT_VERSION,
        arrays,
        phase: PHASE_PRETRAIN.to_string(),
        rng_state: rng.state(),
        step,
    }
}

/// Phase 1: adversarially train FC, G, and D on the image set, then
/// freeze FC and G. Alternates one critic step (R1-regularized logistic
/// loss on real images vs. G(FC(z)) samples) with one generator step
/// (non-saturating fooling loss through the freshly updated critic).
///
/// `resume` continues from a `pretrain` checkpoint; pass a sink opened
/// with [`TrainSink::resume`] in that case so the CSV tail is rewritten.
pub fn pretrain_gan(
    images: &Tensor,
    weights: &LossWeights,
    latent_dim: usize,
    seed: u64,
    resume: Option<&Checkpoint>,
    mut sink: Option<&mut TrainSink>,
) -> Result<PretrainOutput, TrainingError> {
    weights.validate()?;
    if latent_dim == 0 {
        return Err(TrainingError::BadConfig("latent_dim must be >= 1".to_string()));
    }
    let (train_len, x_eval) = split_images(images)?;
    let image_dim = images.shape()[1];
    let total_steps = weights.steps_pretrain as u64;
    let batch = weights.batch_size;

    let (mut bundle, mut train_rng, mut opt_d, mut opt_g, start) = match resume {
        Some(ck) => {
            if ck.phase != PHASE_PRETRAIN {
                return Err(TrainingError::BadConfig(format!(
                    "cannot resume pretraining from a {:?} checkpoint",
                    ck.phase
                )));
            }
            if ck.step > total_steps {
                return Err(TrainingError::BadConfig(format!(
                    "checkpoint is at step {} but the budget is {total_steps}",
                    ck.step
                )));
            }
            let mut bundle = ModelBundle::init(&mut Rng::from_seed(0), latent_dim, image_dim);
            bundle.load_named_arrays(&ck.arrays)?;
            let mut opt_d = Adam::new(weights.lr_pretrain, &detached_params(&bundle.critic_d));
            opt_d.import_state("opt.d", &ck.arrays)?;
            let mut gen_params = detached_params(&bundle.fc);
            gen_params.extend(detached_params(&bundle.generator));
            let mut opt_g = Adam::new(weights.lr_pretrain, &gen_params);
            opt_g.import_state("opt.g", &ck.arrays)?;
            (bundle, Rng::from_state(ck.rng_state), opt_d, opt_g, ck.step)
        }
        None => {
            let mut init_rng = Rng::with_stream(seed, STREAM_MODEL_INIT);
            let bundle = ModelBundle::init(&mut init_rng, latent_dim, image_dim);
            let opt_d = Adam::new(weights.lr_pretrain, &detached_params(&bundle.critic_d));
            let mut gen_params = detached_params(&bundle.fc);
            gen_params.extend(detached_params(&bundle.generator));
            let opt_g = Adam::new(weights.lr_pretrain, &gen_params);
            (bundle, Rng::with_stream(seed, STREAM_PRETRAIN_LOOP), opt_d, opt_g, 0)
        }
    };

    if resume.is_none() {
        if let Some(sink) = sink.as_deref_mut() {
            sink.write_checkpoint(
                "checkpoint-init.bin",
                &pretrain_checkpoint(&bundle, &opt_d, &opt_g, &train_rng, 0),
            )?;
            let features = FeatureExtractor::from_critic(&bundle.critic_d)?;
            let mut row = MetricsRow::empty(0);
            row.fd_feature = Some(pretrain_eval(&bundle, &features, &x_eval, seed, 0)?);
            sink.csv.append(&row)?;
        }
    }

    let mut win = LossWindow::default();
    for step in start..total_steps {
        // Per-step draws, in the documented order.
        let x_batch = draw_batch(&mut train_rng, images, train_len, batch)?;
        let z_d = draw_codes(&mut train_rng, batch, latent_dim)?;
        let z_g = draw_codes(&mut train_rng, batch, latent_dim)?;

        // Critic step. The fake batch is built value-level, so no
        // gradient flows back into FC or G here.
        let x_fake = bundle.generate(&bundle.map_latent(&z_d)?)?;
        let (d_params, loss_d_val) = {
            let mut tape = Tape::new();
            let taped = bundle.critic_d.attach(&mut tape, true);
            let loss = critic_loss_d(&mut tape, &taped, &x_batch, &x_fake, weights.gamma)?;
            let v = loss.item()?;
            ensure_finite(v, PHASE_PRETRAIN, step, "critic loss")?;
            let grads = tape.backward(&loss)?;
            let mut params = taped.params();
            let gv = grad_vec(&grads, &params);
            opt_d.step(&mut params, &gv)?;
            (params, v)
        };
        write_back(&mut bundle.critic_d, &d_params);

        // Generator step through the updated critic.
        let (g_params, loss_g_val) = {
            let mut tape = Tape::new();
            let fc_t = bundle.fc.attach(&mut tape, true);
            let gen_t = bundle.generator.attach(&mut tape, true);
            let d_t = bundle.critic_d.attach(&mut tape, false);
            let z = tape.constant(&z_g);
            let w = fc_t.forward(&mut tape, &z)?;
            let x_gen = gen_t.forward(&mut tape, &w)?;
            let logits = d_t.forward(&mut tape, &x_gen)?;
            let neg = tape.neg(&logits)?;
            let sp = tape.softplus(&neg)?;
            let loss = tape.mean_all(&sp)?;
            let v = loss.item()?;
            ensure_finite(v, PHASE_PRETRAIN, step, "generator loss")?;
            let grads = tape.backward(&loss)?;
            let mut params = fc_t.params();
            params.extend(gen_t.params());
            let gv = grad_vec(&grads, &params);
            opt_g.step(&mut params, &gv)?;
            (params, v)
        };
        let split = 2 * bundle.fc.spec.layer_count();
        write_back(&mut bundle.fc, &g_params[..split]);
        write_back(&mut bundle.generator, &g_params[split..]);

        win.add_pretrain(loss_d_val, loss_g_val);
        let done = step + 1;
        if let Some(sink) = sink.as_deref_mut() {
            if done % weights.log_interval == 0 || done == total_steps {
                let mut row = win.pretrain_row(done);
                win.reset();
                // Evaluation cells appear only on the fixed cadence (never
                // "at whatever step the budget ends"), so extending a
                // finished run's budget resumes byte-identically.
                if done % weights.eval_interval == 0 {
                    let features = FeatureExtractor::from_critic(&bundle.critic_d)?;
                    row.fd_feature =
                        Some(pretrain_eval(&bundle, &features, &x_eval, seed, done)?);
                }
                sink.csv.append(&row)?;
            }
            if done % weights.eval_interval == 0 {
                sink.write_checkpoint(
                    &format!("checkpoint-{done:06}.bin"),
                    &pretrain_checkpoint(&bundle, &opt_d, &opt_g, &train_rng, done),
                )?;
            }
        }
    }

    bundle.frozen.fc = true;
    bundle.frozen.generator = true;
    if let Some(sink) = sink.as_deref_mut() {
        sink.write_checkpoint(
            "checkpoint-final.bin",
            &pretrain_checkpoint(&bundle, &opt_d, &opt_g, &train_rng, total_steps),
        )?;
    }
    let features = FeatureExtractor::from_critic(&bundle.critic_d)?;
    Ok(PretrainOutput { bundle, features })
}

/// Pretraining's held-out metric: Fréchet distance between critic-feature
/// Gaussians of real held-out images and fresh G(FC(z)) samples. Uses the
/// critic as it stands at `step`.
fn pretrain_eval(
    bundle: &ModelBundle,
    features: &FeatureExtractor,
    x_eval: &Tensor,
    seed: u64,
    step: u64,
) -> Result<f64, TrainingError> {
    let rows = x_eval.shape()[0];
    let mut rng = Rng::with_stream(seed, eval_stream(step));
    let z = draw_codes(&mut rng, rows, bundle.latent_dim())?;
    let x_gen = bundle.generate(&bundle.map_latent(&z)?)?;
    fd_feature(features, x_eval, &x_gen)
}

fn invert_checkpoint(
    bundle: &ModelBundle,
    opt_e: &Adam,
    opt_d: &Adam,
    opt_dw: Option<&Adam>,
    mode: TrainMode,
    rng: &Rng,
    step: u64,
) -> Checkpoint {
    let mut arrays = bundle.named_arrays();
    arrays.extend(opt_e.export_state("opt.e", &detached_params(&bundle.encoder)));
    arrays.extend(opt_d.export_state("opt.d", &detached_params(&bundle.critic_d)));
    if let Some(opt_dw) = opt_dw {
        arrays.extend(opt_dw.export_state("opt.dw", &detached_params(&bundle.critic_dw)));
    }
    Checkpoint {
        version: CHECKPOINT_VERSION,
        arrays,
        phase: mode.phase_tag().to_string(),
        rng_state: rng.state(),
        step,
    }
}

/// Phase 2: train the encoder against the frozen FC and G. Per step, in
/// order: one image-critic update (real batch vs. value-level
/// reconstructions), one latent-critic update in force_in_domain mode
/// (prior codes FC(z) vs. value-level encoder outputs), then one encoder
/// update on [`encoder_loss`].
///
/// Both modes draw the latent batch z every step, whether or not the
/// latent critic consumes it, so the two modes read identical random
/// sequences; with `lambda_adv_dw = 0` the force_in_domain encoder and
/// image critic reproduce the in_domain run bit for bit.
///
/// The feature extractor must come from the *pretrained* critic (the
/// in-loop critic keeps training); on resume, pass the same extractor and
/// a sink opened with [`TrainSink::resume`].
#[allow(clippy::too_many_arguments)]
pub fn train_encoder(
    pretrained: &ModelBundle,
    features: &FeatureExtractor,
    images: &Tensor,
    weights: &LossWeights,
    mode: TrainMode,
    seed: u64,
    resume: Option<&Checkpoint>,
    mut sink: Option<&mut TrainSink>,
) -> Result<ModelBundle, TrainingError> {
    weights.validate()?;
    if !(pretrained.frozen.fc && pretrained.frozen.generator) {
        return Err(TrainingError::BadConfig(
            "train_encoder requires a pretrained bundle with FC and G frozen".to_string(),
        ));
    }
    let (train_len, x_eval) = split_images(images)?;
    if images.shape()[1] != pretrained.image_dim() {
        return Err(TrainingError::BadConfig(format!(
            "bundle expects {}-pixel images, dataset has {}",
            pretrained.image_dim(),
            images.shape()[1]
        )));
    }
    let latent_dim = pretrained.latent_dim();
    let total_steps = weights.steps_invert as u64;
    let batch = weights.batch_size;

    let mut bundle = pretrained.clone();
    let (mut train_rng, mut opt_e, mut opt_d, mut opt_dw, start) = match resume {
        Some(ck) => {
            if ck.phase != mode.phase_tag() {
                return Err(TrainingError::BadConfig(format!(
                    "cannot resume {} from a {:?} checkpoint",
                    mode.phase_tag(),
                    ck.phase
                )));
            }
            if ck.step > total_steps {
                return Err(TrainingError::BadConfig(format!(
                    "checkpoint is at step {} but the budget is {total_steps}",
                    ck.step
                )));
            }
            bundle.load_named_arrays(&ck.arrays)?;
            let mut opt_e = Adam::new(weights.lr_encoder, &detached_params(&bundle.encoder));
            opt_e.import_state("opt.e", &ck.arrays)?;
            let mut opt_d = Adam::new(weights.lr_critic, &detached_params(&bundle.critic_d));
            opt_d.import_state("opt.d", &ck.arrays)?;
            let opt_dw = if mode == TrainMode::ForceInDomain {
                let mut o = Adam::new(weights.lr_critic, &detached_params(&bundle.critic_dw));
                o.import_state("opt.dw", &ck.arrays)?;
                Some(o)
            } else {
                None
            };
            (Rng::from_state(ck.rng_state), opt_e, opt_d, opt_dw, ck.step)
        }
        None => {
            // Fresh latent critic in both modes (same stream), so the
            // in_domain bundle carries the identical untrained D^w.
            let mut dw_rng = Rng::with_stream(seed, STREAM_DW_INIT);
            bundle.critic_dw = Mlp::init(bundle.critic_dw.spec.clone(), &mut dw_rng);
            let opt_e = Adam::new(weights.lr_encoder, &detached_params(&bundle.encoder));
            let opt_d = Adam::new(weights.lr_critic, &detached_params(&bundle.critic_d));
            let opt_dw = (mode == TrainMode::ForceInDomain)
                .then(|| Adam::new(weights.lr_critic, &detached_params(&bundle.critic_dw)));
            (Rng::with_stream(seed, STREAM_INVERT_LOOP), opt_e, opt_d, opt_dw, 0)
        }
    };

    if resume.is_none() {
        if let Some(sink) = sink.as_deref_mut() {
            sink.write_checkpoint(
                "checkpoint-init.bin",
                &invert_checkpoint(
                    &bundle,
                    &opt_e,
                    &opt_d,
                    opt_dw.as_ref(),
                    mode,
                    &train_rng,
                    0,
                ),
            )?;
            let row = invert_eval(&bundle, features, &x_eval, seed, 0, MetricsRow::empty(0))?;
            sink.csv.append(&row)?;
        }
    }

    let mut win = LossWindow::default();
    for step in start..total_steps {
        // Per-step draws, in the documented order. z is drawn in both
        // modes to keep the random sequences aligned.
        let x_batch = draw_batch(&mut train_rng, images, train_len, batch)?;
        let z = draw_codes(&mut train_rng, batch, latent_dim)?;

        // Image-critic update against value-level reconstructions of the
        // *current* encoder.
        let x_rec = bundle.generate(&bundle.encode(&x_batch)?)?;
        let (d_params, _) = {
            let mut tape = Tape::new();
            let taped = bundle.critic_d.attach(&mut tape, true);
            let loss = critic_loss_d(&mut tape, &taped, &x_batch, &x_rec, weights.gamma)?;
            let v = loss.item()?;
            ensure_finite(v, mode.phase_tag(), step, "critic_d loss")?;
            let grads = tape.backward(&loss)?;
            let mut params = taped.params();
            let gv = grad_vec(&grads, &params);
            opt_d.step(&mut params, &gv)?;
            (params, v)
        };
        write_back(&mut bundle.critic_d, &d_params);

        // Latent-critic update, force_in_domain only.
        if let Some(opt_dw) = opt_dw.as_mut() {
            let w_prior = bundle.map_latent(&z)?;
            let w_enc = bundle.encode(&x_batch)?;
            let dw_params = {
                let mut tape = Tape::new();
                let taped = bundle.critic_dw.attach(&mut tape, true);
                let loss =
                    critic_loss_dw(&mut tape, &taped, &w_prior, &w_enc, weights.gamma)?;
                let v = loss.item()?;
                ensure_finite(v, mode.phase_tag(), step, "critic_dw loss")?;
                let grads = tape.backward(&loss)?;
                let mut params = taped.params();
                let gv = grad_vec(&grads, &params);
                opt_dw.step(&mut params, &gv)?;
                params
            };
            write_back(&mut bundle.critic_dw, &dw_params);
        }

        // Encoder update through the frozen generator and both critics.
        let (e_params, values) = {
            let mut tape = Tape::new();
            let enc_t = bundle.encoder.attach(&mut tape, true);
            let gen_t = bundle.generator.attach(&mut tape, false);
            let d_t = bundle.critic_d.attach(&mut tape, false);
            let dw_t = bundle.critic_dw.attach(&mut tape, false);
            let feat_t = features.attach(&mut tape);
            let terms = encoder_loss(
                &mut tape,
                &enc_t,
                &gen_t,
                Some(&d_t),
                Some(&dw_t),
                Some(&feat_t),
                &x_batch,
                weights,
                mode,
            )?;
            if !terms.values.total.is_finite() {
                return Err(TrainingError::NonFinite {
                    phase: mode.phase_tag(),
                    step,
                    breakdown: format!("{:?}", terms.values),
                });
            }
            let grads = tape.backward(&terms.node)?;
            let mut params = enc_t.params();
            let gv = grad_vec(&grads, &params);
            opt_e.step(&mut params, &gv)?;
            (params, terms.values)
        };
        write_back(&mut bundle.encoder, &e_params);

        win.add_invert(&values);
        let done = step + 1;
        if let Some(sink) = sink.as_deref_mut() {
            if done % weights.log_interval == 0 || done == total_steps {
                let mut row = win.invert_row(done);
                win.reset();
                // Same cadence rule as pretraining: see the note there.
                if done % weights.eval_interval == 0 {
                    row = invert_eval(&bundle, features, &x_eval, seed, done, row)?;
                }
                sink.csv.append(&row)?;
            }
            if done % weights.eval_interval == 0 {
                sink.write_checkpoint(
                    &format!("checkpoint-{done:06}.bin"),
                    &invert_checkpoint(
                        &bundle,
                        &opt_e,
                        &opt_d,
                        opt_dw.as_ref(),
                        mode,
                        &train_rng,
                        done,
                    ),
                )?;
            }
        }
    }

    if let Some(sink) = sink.as_deref_mut() {
        sink.write_checkpoint(
            "checkpoint-final.bin",
            &invert_checkpoint(
                &bundle,
                &opt_e,
                &opt_d,
                opt_dw.as_ref(),
                mode,
                &train_rng,
                total_steps,
            ),
        )?;
    }
    Ok(bundle)
}

/// Held-out metrics for the encoder phase: latent-space Fréchet distance
/// (via a small alignment report), feature-space Fréchet distance of the
/// reconstructions, and plain reconstruction MSE.
fn invert_eval(
    bundle: &ModelBundle,
    features: &FeatureExtractor,
    x_eval: &Tensor,
    seed: u64,
    step: u64,
    mut row: MetricsRow,
) -> Result<MetricsRow, TrainingError> {
    let mut rng = Rng::with_stream(seed, eval_stream(step));
    let opts = ReportOptions {
        n_samples: EVAL_REPORT_SAMPLES,
        chunk: 512,
        threads: 1,
        mmd_subsample: 256,
    };
    let (report, _) = alignment_report(bundle, &mut rng, &opts)?;
    row.fd_latent = Some(report.fd_latent);
    let x_rec = bundle.generate(&bundle.encode(x_eval)?)?;
    row.fd_feature = Some(fd_feature(features, x_eval, &x_rec)?);
    row.mse_eval = Some(mse(x_eval, &x_rec)?);
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::load_checkpoint;
    use crate::synthdata::generate_dataset;
    use std::sync::atomic::{AtomicU64, Ordering};

    static TEST_DIR_SEQ: AtomicU64 = AtomicU64::new(0);

    fn test_dir(tag: &str) -> PathBuf {
        let seq = TEST_DIR_SEQ.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!(
            "fidg-phases-{}-{tag}-{seq}",
            std::process::id()
        ));
        if dir.exists() {
            fs::remove_dir_all(&dir).unwrap();
        }
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn blob_images(seed: u64, n: usize) -> Tensor {
        let mut rng = Rng::from_seed(seed);
        generate_dataset(&mut rng, n).unwrap().images.as_matrix()
    }

    fn tiny_weights() -> LossWeights {
        LossWeights {
            batch_size: 16,
            steps_pretrain: 60,
            steps_invert: 60,
            ..LossWeights::default()
        }
    }

    fn arrays_equal(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data().iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn net_arrays<'a>(
        arrays: &'a [(String, Tensor)],
        prefix: &str,
    ) -> Vec<&'a (String, Tensor)> {
        arrays.iter().filter(|(n, _)| n.starts_with(prefix)).collect()
    }

    #[test]
    fn metrics_csv_round_trips_and_resumes() {
        let dir = test_dir("csv");
        let path = dir.join("metrics.csv");
        let rows = vec![
            MetricsRow { fd_feature: Some(12.5), ..MetricsRow::empty(0) },
            MetricsRow {
                step: 100,
                loss_cyc: Some(1.25e-3),
                loss_total: Some(0.5),
                ..MetricsRow::default()
            },
            MetricsRow { step: 200, loss_cyc: Some(0.9), ..MetricsRow::default() },
        ];
        let mut csv = MetricsCsv::create(&path).unwrap();
        for r in &rows {
            csv.append(r).unwrap();
        }
        drop(csv);
        assert_eq!(MetricsCsv::read_rows(&path).unwrap(), rows);

        // Resume at step 100 drops the 200 row, then appends continue.
        let mut csv = MetricsCsv::resume(&path, 100).unwrap();
        let replacement = MetricsRow { step: 200, loss_cyc: Some(0.7), ..MetricsRow::default() };
        csv.append(&replacement).unwrap();
        drop(csv);
        let got = MetricsCsv::read_rows(&path).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[2], replacement);

        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(MetricsCsv::HEADER));
        // Missing metrics are empty cells, never zeros.
        assert!(text.lines().nth(1).unwrap().ends_with(",12.5,"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn csv_with_foreign_header_is_rejected() {
        let dir = test_dir("csv-bad");
        let path = dir.join("metrics.csv");
        fs::write(&path, "step,loss\n1,2\n").unwrap();
        assert!(MetricsCsv::read_rows(&path).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn eval_streams_never_collide_with_fixed_streams() {
        let fixed = [
            STREAM_MODEL_INIT,
            STREAM_PRETRAIN_LOOP,
            STREAM_DW_INIT,
            STREAM_REPORT,
            STREAM_INVERT_LOOP,
        ];
        for step in 0..1000 {
            assert!(!fixed.contains(&eval_stream(step)));
        }
        assert_ne!(eval_stream(0), eval_stream(1));
    }

    #[test]
    fn pretrain_is_deterministic_and_freezes_the_right_nets() {
        let images = blob_images(100, 64);
        let weights = tiny_weights();
        let run = |_: u64| pretrain_gan(&images, &weights, 8, 7, None, None).unwrap();
        let a = run(0);
        let b = run(1);
        assert!(arrays_equal(&a.bundle.named_arrays(), &b.bundle.named_arrays()));
        assert!(a.bundle.frozen.fc && a.bundle.frozen.generator);
        assert!(!a.bundle.frozen.encoder);
        assert_eq!(a.features.dim(), 64);

        // Generator outputs stay strictly inside (0, 1): sigmoid pixels.
        let mut rng = Rng::from_seed(9);
        let z = Tensor::from_vec(&[8, 8], rng.gaussian_vec(64)).unwrap();
        let x = a.bundle.generate(&a.bundle.map_latent(&z).unwrap()).unwrap();
        assert!(x.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn pretrain_resume_from_checkpoint_matches_uninterrupted_run() {
        let images = blob_images(101, 64);
        let mut weights = tiny_weights();
        weights.steps_pretrain = 100;

        // Short run ending exactly on a log boundary.
        let dir_a = test_dir("pre-short");
        let mut sink_a = TrainSink::create(&dir_a).unwrap();
        pretrain_gan(&images, &weights, 8, 13, None, Some(&mut sink_a)).unwrap();

        // Uninterrupted long run.
        weights.steps_pretrain = 200;
        let dir_b = test_dir("pre-full");
        let mut sink_b = TrainSink::create(&dir_b).unwrap();
        let full = pretrain_gan(&images, &weights, 8, 13, None, Some(&mut sink_b)).unwrap();

        // Resume the short run's final checkpoint up to 200 steps.
        let ck = load_checkpoint(&dir_a.join("checkpoints/checkpoint-final.bin")).unwrap();
        assert_eq!(ck.step, 100);
        let mut sink_c = TrainSink::resume(&dir_a, ck.step).unwrap();
        let resumed =
            pretrain_gan(&images, &weights, 8, 13, Some(&ck), Some(&mut sink_c)).unwrap();

        assert!(arrays_equal(&full.bundle.named_arrays(), &resumed.bundle.named_arrays()));
        let csv_full = fs::read(dir_b.join("metrics.csv")).unwrap();
        let csv_resumed = fs::read(dir_a.join("metrics.csv")).unwrap();
        assert_eq!(csv_full, csv_resumed);
        let ck_full = fs::read(dir_b.join("checkpoints/checkpoint-final.bin")).unwrap();
        let ck_resumed = fs::read(dir_a.join("checkpoints/checkpoint-final.bin")).unwrap();
        assert_eq!(ck_full, ck_resumed);
        fs::remove_dir_all(&dir_a).unwrap();
        fs::remove_dir_all(&dir_b).unwrap();
    }

    #[test]
    fn train_encoder_rejects_an_unfrozen_bundle() {
        let images = blob_images(102, 32);
        let mut rng = Rng::from_seed(3);
        let bundle = ModelBundle::init(&mut rng, 8, 256);
        let features = FeatureExtractor::from_critic(&bundle.critic_d).unwrap();
        let err = train_encoder(
            &bundle,
            &features,
            &images,
            &tiny_weights(),
            TrainMode::ForceInDomain,
            5,
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, TrainingError::BadConfig(_)));
    }

    #[test]
    fn force_mode_with_zero_latent_weight_reproduces_in_domain_bit_for_bit() {
        let images = blob_images(103, 64);
        let mut weights = tiny_weights();
        weights.steps_pretrain = 30;
        let pre = pretrain_gan(&images, &weights, 8, 17, None, None).unwrap();

        weights.steps_invert = 50;
        let mut force_weights = weights.clone();
        force_weights.lambda_adv_dw = 0.0;
        let force = train_encoder(
            &pre.bundle,
            &pre.features,
            &images,
            &force_weights,
            TrainMode::ForceInDomain,
            17,
            None,
            None,
        )
        .unwrap();
        let plain = train_encoder(
            &pre.bundle,
            &pre.features,
            &images,
            &weights,
            TrainMode::InDomain,
            17,
            None,
            None,
        )
        .unwrap();

        let fa = force.named_arrays();
        let pa = plain.named_arrays();
        for prefix in ["enc.", "d.", "fc.", "gen."] {
            let lhs = net_arrays(&fa, prefix);
            let rhs = net_arrays(&pa, prefix);
            assert!(!lhs.is_empty());
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                assert_eq!(l.0, r.0);
                assert!(
                    l.1.data()
                        .iter()
                        .zip(r.1.data().iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits()),
                    "{} diverged between modes",
                    l.0
                );
            }
        }
        // The latent critic *did* train in force mode, so it must differ.
        let dw_force = net_arrays(&fa, "dw.");
        let dw_plain = net_arrays(&pa, "dw.");
        assert!(dw_force
            .iter()
            .zip(dw_plain.iter())
            .any(|(l, r)| l.1.data() != r.1.data()));
    }

    #[test]
    fn encoder_phase_resume_matches_uninterrupted_run() {
        let images = blob_images(104, 64);
        let mut weights = tiny_weights();
        weights.steps_pretrain = 30;
        let pre = pretrain_gan(&images, &weights, 8, 23, None, None).unwrap();

        weights.steps_invert = 100;
        let dir_a = test_dir("inv-short");
        let mut sink_a = TrainSink::create(&dir_a).unwrap();
        train_encoder(
            &pre.bundle,
            &pre.features,
            &images,
            &weights,
            TrainMode::ForceInDomain,
            23,
            None,
            Some(&mut sink_a),
        )
        .unwrap();

        weights.steps_invert = 200;
        let dir_b = test_dir("inv-full");
        let mut sink_b = TrainSink::create(&dir_b).unwrap();
        let full = train_encoder(
            &pre.bundle,
            &pre.features,
            &images,
            &weights,
            TrainMode::ForceInDomain,
            23,
            None,
            Some(&mut sink_b),
        )
        .unwrap();

        let ck = load_checkpoint(&dir_a.join("checkpoints/checkpoint-final.bin")).unwrap();
        assert_eq!(ck.step, 100);
        assert_eq!(ck.phase, "invert-force-in-domain");
        let mut sink_c = TrainSink::resume(&dir_a, ck.step).unwrap();
        let resumed = train_encoder(
            &pre.bundle,
            &pre.features,
            &images,
            &weights,
            TrainMode::ForceInDomain,
            23,
            Some(&ck),
            Some(&mut sink_c),
        )
        .unwrap();

        assert!(arrays_equal(&full.named_arrays(), &resumed.named_arrays()));
        assert_eq!(
            fs::read(dir_b.join("metrics.csv")).unwrap(),
            fs::read(dir_a.join("metrics.csv")).unwrap()
        );
        assert_eq!(
            fs::read(dir_b.join("checkpoints/checkpoint-final.bin")).unwrap(),
            fs::read(dir_a.join("checkpoints/checkpoint-final.bin")).unwrap()
        );
        fs::remove_dir_all(&dir_a).unwrap();
        fs::remove_dir_all(&dir_b).unwrap();
    }

    #[test]
    fn encoder_phase_csv_has_the_contracted_shape() {
        let images = blob_images(105, 64);
        let mut weights = tiny_weights();
        weights.steps_pretrain = 20;
        let pre = pretrain_gan(&images, &weights, 8, 31, None, None).unwrap();

        weights.steps_invert = 100;
        let dir = test_dir("inv-csv");
        let mut sink = TrainSink::create(&dir).unwrap();
        train_encoder(
            &pre.bundle,
            &pre.features,
            &images,
            &weights,
            TrainMode::ForceInDomain,
            31,
            None,
            Some(&mut sink),
        )
        .unwrap();

        let rows = MetricsCsv::read_rows(&dir.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        // Step-0 row: evaluation only, loss cells empty.
        assert_eq!(rows[0].step, 0);
        assert!(rows[0].loss_cyc.is_none() && rows[0].loss_total.is_none());
        assert!(rows[0].fd_latent.is_some());
        assert!(rows[0].fd_feature.is_some());
        assert!(rows[0].mse_eval.is_some());
        // Final row: interval means, all loss components live in force
        // mode with the default weights. Evaluation cells stay on the
        // 1000-step cadence, so a 100-step run has none here.
        assert_eq!(rows[1].step, 100);
        for v in [
            rows[1].loss_cyc,
            rows[1].loss_adv_d,
            rows[1].loss_adv_dw,
            rows[1].loss_perc,
            rows[1].loss_total,
        ] {
            let v = v.expect("cell filled");
            assert!(v.is_finite());
        }
        assert!(rows[1].fd_latent.is_none());
        assert!(rows[1].fd_feature.is_none());
        assert!(rows[1].mse_eval.is_none());
        assert!(dir.join("checkpoints/checkpoint-init.bin").exists());
        assert!(dir.join("checkpoints/checkpoint-final.bin").exists());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn in_domain_csv_leaves_the_latent_column_empty() {
        let images = blob_images(106, 64);
        let mut weights = tiny_weights();
        weights.steps_pretrain = 20;
        let pre = pretrain_gan(&images, &weights, 8, 37, None, None).unwrap();

        weights.steps_invert = 100;
        let dir = test_dir("inv-indomain");
        let mut sink = TrainSink::create(&dir).unwrap();
        train_encoder(
            &pre.bundle,
            &pre.features,
            &images,
            &weights,
            TrainMode::InDomain,
            37,
            None,
            Some(&mut sink),
        )
        .unwrap();
        let rows = MetricsCsv::read_rows(&dir.join("metrics.csv")).unwrap();
        assert!(rows[1].loss_adv_dw.is_none());
        assert!(rows[1].loss_adv_d.is_some());
        let ck = load_checkpoint(&dir.join("checkpoints/checkpoint-final.bin")).unwrap();
        assert_eq!(ck.phase, "invert-in-domain");
        assert!(!ck.has_array("opt.dw.t"));
        assert!(ck.has_array("opt.e.t"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pure_cycle_training_shrinks_reconstruction_error_on_generated_data() {
        // Identity problem: data drawn from the generator itself, trained
        // with only the cycle term. The encoder must invert G well enough
        // to cut the cycle loss to under 10% of its starting value.
        let mut rng = Rng::from_seed(303);
        let mut bundle = ModelBundle::init(&mut rng, 8, 256);
        bundle.frozen.fc = true;
        bundle.frozen.generator = true;
        let z = Tensor::from_vec(&[320, 8], rng.gaussian_vec(320 * 8)).unwrap();
        let images = bundle.generate(&bundle.map_latent(&z).unwrap()).unwrap();
        let features = FeatureExtractor::from_critic(&bundle.critic_d).unwrap();

        let weights = LossWeights {
            lambda_adv: 0.0,
            lambda_adv_dw: 0.0,
            lambda_vgg: 0.0,
            lr_encoder: 1e-3,
            batch_size: 32,
            steps_invert: 1500,
            ..LossWeights::default()
        };
        let before = {
            let x_rec = bundle.generate(&bundle.encode(&images).unwrap()).unwrap();
            super::super::loss_cyc(&images, &x_rec).unwrap()
        };
        let trained = train_encoder(
            &bundle,
            &features,
            &images,
            &weights,
            TrainMode::InDomain,
            303,
            None,
            None,
        )
        .unwrap();
        let after = {
            let x_rec = trained.generate(&trained.encode(&images).unwrap()).unwrap();
            super::super::loss_cyc(&images, &x_rec).unwrap()
        };
        assert!(
            after < 0.1 * before,
            "cycle loss only went from {before} to {after}"
        );
    }
}
