//! Loss functions and the two-phase training procedure: pretrain the toy
//! GAN (FC, G, D), then train the encoder against the frozen generator in
//! either `in_domain` or `force_in_domain` mode.
//!
//! Sign conventions: critics minimize softplus-form logistic losses plus an
//! R1 gradient penalty on their real inputs; the encoder minimizes cycle,
//! perceptual, and non-saturating fooling terms. All losses here are
//! written to be *minimized*.

use std::error::Error;
use std::fmt;
use std::path::PathBuf;

use crate::metrics::MetricsError;
use crate::models::{CheckpointError, Mlp, MlpSpec, ModelBundle, TapedMlp};
use crate::numerics::{NumericsError, Tape, Tensor};

pub mod phases;

pub use phases::{
    eval_stream, pretrain_gan, train_encoder, MetricsCsv, MetricsRow, PretrainOutput, TrainSink,
    EVAL_INTERVAL, LOG_INTERVAL, PHASE_PRETRAIN, STREAM_DW_INIT, STREAM_INVERT_LOOP,
    STREAM_MODEL_INIT, STREAM_PRETRAIN_LOOP, STREAM_REPORT,
};

#[derive(Debug)]
pub enum TrainingError {
    /// Invalid weights/config or an inconsistent bundle for the phase.
    BadConfig(String),
    /// An operation that only exists in force_in_domain mode was invoked
    /// in in_domain mode.
    WrongMode { op: &'static str },
    /// A loss stopped being finite; carries the step and a component
    /// breakdown for the abort message.
    NonFinite { phase: &'static str, step: u64, breakdown: String },
    Numerics(NumericsError),
    Metrics(MetricsError),
    Checkpoint(CheckpointError),
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for TrainingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainingError::BadConfig(why) => write!(f, "bad training config: {why}"),
            TrainingError::WrongMode { op } => {
                write!(f, "{op} requires force_in_domain mode")
            }
            TrainingError::NonFinite { phase, step, breakdown } => {
                write!(f, "non-finite loss in {phase} at step {step}: {breakdown}")
            }
            TrainingError::Numerics(e) => write!(f, "numerics failure in training: {e}"),
            TrainingError::Metrics(e) => write!(f, "metrics failure in training: {e}"),
            TrainingError::Checkpoint(e) => write!(f, "checkpoint failure: {e}"),
            TrainingError::Io { path, source } => {
                write!(f, "io failure on {}: {source}", path.display())
            }
        }
    }
}

impl Error for TrainingError {}

impl From<NumericsError> for TrainingError {
    fn from(e: NumericsError) -> Self {
        TrainingError::Numerics(e)
    }
}

impl From<MetricsError> for TrainingError {
    fn from(e: MetricsError) -> Self {
        TrainingError::Metrics(e)
    }
}

impl From<CheckpointError> for TrainingError {
    fn from(e: CheckpointError) -> Self {
        TrainingError::Checkpoint(e)
    }
}

/// Which encoder objective a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Cycle + image-adversarial (+ perceptual) terms only; the latent
    /// critic is never updated and its weight is treated as zero.
    InDomain,
    /// Adds the latent critic D^w, pushing inverted codes toward the
    /// prior code distribution.
    ForceInDomain,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::InDomain => "in_domain",
            TrainMode::ForceInDomain => "force_in_domain",
        }
    }

    pub fn from_name(name: &str) -> Result<TrainMode, TrainingError> {
        match name {
            "in_domain" => Ok(TrainMode::InDomain),
            "force_in_domain" => Ok(TrainMode::ForceInDomain),
            other => Err(TrainingError::BadConfig(format!(
                "unknown mode {other:?}; expected in_domain or force_in_domain"
            ))),
        }
    }

    /// Tag stored in checkpoints written by this phase.
    pub fn phase_tag(&self) -> &'static str {
        match self {
            TrainMode::InDomain => "invert-in-domain",
            TrainMode::ForceInDomain => "invert-force-in-domain",
        }
    }
}

/// Loss weights, learning rates, and budgets for both phases.
#[derive(Debug, Clone)]
pub struct LossWeights {
    /// R1 gradient-penalty weight (applied as gamma/2).
    pub gamma: f64,
    /// Weight of the image-critic fooling term in the encoder loss.
    pub lambda_adv: f64,
    /// Weight of the latent-critic fooling term (force_in_domain only).
    pub lambda_adv_dw: f64,
    /// Weight of the perceptual (feature-space) term.
    pub lambda_vgg: f64,
    /// Learning rate for the GAN pretraining phase (FC, G, and D).
    pub lr_pretrain: f64,
    /// Learning rate for the encoder during inversion.
    pub lr_encoder: f64,
    /// Learning rate for the critics during inversion.
    pub lr_critic: f64,
    pub batch_size: usize,
    pub steps_pretrain: usize,
    pub steps_invert: usize,
    /// Steps between metrics-CSV rows (interval loss means).
    pub log_interval: u64,
    /// Steps between held-out evaluations and numbered checkpoints; must be
    /// a multiple of `log_interval` so evaluation cells land on logged rows.
    pub eval_interval: u64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            gamma: 10.0,
            lambda_adv: 0.1,
            lambda_adv_dw: 0.1,
            lambda_vgg: 5e-5,
            lr_pretrain: 1e-3,
            lr_encoder: 1.5e-3,
            lr_critic: 2e-3,
            batch_size: 64,
            steps_pretrain: 20_000,
            steps_invert: 10_000,
            log_interval: phases::LOG_INTERVAL,
            eval_interval: phases::EVAL_INTERVAL,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainingError> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda_adv", self.lambda_adv),
            ("lambda_adv_dw", self.lambda_adv_dw),
            ("lambda_vgg", self.lambda_vgg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainingError::BadConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_encoder", self.lr_encoder),
            ("lr_critic", self.lr_critic),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(TrainingError::BadConfig(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainingError::BadConfig("batch_size must be >= 1".to_string()));
        }
        if self.log_interval == 0 {
            return Err(TrainingError::BadConfig("log_interval must be >= 1".to_string()));
        }
        if self.eval_interval == 0 || self.eval_interval % self.log_interval != 0 {
            return Err(TrainingError::BadConfig(format!(
                "eval_interval must be a positive multiple of log_interval, got {} / {}",
                self.eval_interval, self.log_interval
            )));
        }
        Ok(())
    }
}

/// Frozen feature map for the perceptual loss: the pretrained image
/// critic's hidden layers (everything up to, not including, the final
/// logit layer), emitting the 64-dim leaky activations.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    net: Mlp,
}

impl FeatureExtractor {
    pub fn from_critic(critic: &Mlp) -> Result<FeatureExtractor, TrainingError> {
        let layers = critic.spec.layer_count();
        if layers < 2 {
            return Err(TrainingError::BadConfig(format!(
                "feature extractor needs a critic with >= 2 layers, got {layers}"
            )));
        }
        let widths = &critic.spec.widths[..critic.spec.widths.len() - 1];
        // Hidden activations *are* the features, so the truncated net's
        // output activation is the critic's hidden activation.
        let spec = MlpSpec::new(widths, critic.spec.hidden, critic.spec.hidden);
        Ok(FeatureExtractor {
            net: Mlp {
                spec,
                weights: critic.weights[..layers - 1].to_vec(),
                biases: critic.biases[..layers - 1].to_vec(),
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.net.spec.output_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.net.forward(x)
    }

    /// Register on a tape as constants (the extractor is always frozen).
    pub fn attach<'m>(&'m self, tape: &mut Tape) -> TapedMlp<'m> {
        self.net.attach(tape, false)
    }
}

/// Mean over rows of the per-row Euclidean norm — the value-level mirror
/// of `Tape::mean_row_norm`, with the same accumulation order.
fn mean_row_norm_plain(m: &Tensor) -> Result<f64, TrainingError> {
    if m.shape().len() != 2 {
        return Err(TrainingError::Numerics(NumericsError::InvalidShape {
            op: "mean_row_norm",
            shape: m.shape().to_vec(),
            reason: "expected [n, d]",
        }));
    }
    let n = m.shape()[0];
    let d = m.shape()[1];
    if n == 0 {
        return Err(TrainingError::BadConfig("mean over empty batch".to_string()));
    }
    let mut total = 0.0;
    for row in m.data().chunks_exact(d) {
        let mut s = 0.0;
        for &v in row {
            s += v * v;
        }
        total += s.sqrt();
    }
    Ok(total * (1.0 / n as f64))
}

/// Cycle-consistency loss: mean over the batch of the per-image Euclidean
/// norm ||x - x_rec|| over flattened pixels.
pub fn loss_cyc(x: &Tensor, x_rec: &Tensor) -> Result<f64, TrainingError> {
    if x.shape() != x_rec.shape() {
        return Err(TrainingError::Numerics(NumericsError::ShapeMismatch {
            op: "loss_cyc",
            left: x.shape().to_vec(),
            right: x_rec.shape().to_vec(),
        }));
    }
    let diff = x.sub(x_rec)?;
    mean_row_norm_plain(&diff)
}

/// Taped cycle loss; `x` and `x_rec` must already live on `tape`.
pub fn loss_cyc_taped(
    tape: &mut Tape,
    x: &Tensor,
    x_rec: &Tensor,
) -> Result<Tensor, NumericsError> {
    let diff = tape.sub(x, x_rec)?;
    tape.mean_row_norm(&diff)
}

/// Perceptual loss: mean per-sample Euclidean norm of F(x) - F(x_rec).
pub fn loss_perc(
    x: &Tensor,
    x_rec: &Tensor,
    features: &FeatureExtractor,
) -> Result<f64, TrainingError> {
    let fx = features.forward(x)?;
    let fr = features.forward(x_rec)?;
    let diff = fx.sub(&fr)?;
    mean_row_norm_plain(&diff)
}

/// Shared logistic-plus-R1 critic objective:
/// mean softplus(-C(real)) + mean softplus(C(fake))
///   + (gamma/2) * mean ||d C(real) / d real||^2.
///
/// The gradient penalty differentiates the critic w.r.t. its *input*, and
/// the emitted gradient graph stays on the tape, so a subsequent backward
/// pass produces the penalty's parameter gradients (double backward).
fn logistic_critic_loss(
    tape: &mut Tape,
    critic: &TapedMlp,
    real: &Tensor,
    fake: &Tensor,
    gamma: f64,
) -> Result<Tensor, TrainingError> {
    let real_var = tape.var(real);
    let logits_real = critic.forward(tape, &real_var)?;
    let neg_real = tape.neg(&logits_real)?;
    let sp_real = tape.softplus(&neg_real)?;
    let term_real = tape.mean_all(&sp_real)?;

    let fake_const = tape.constant(fake);
    let logits_fake = critic.forward(tape, &fake_const)?;
    let sp_fake = tape.softplus(&logits_fake)?;
    let term_fake = tape.mean_all(&sp_fake)?;

    let mut total = tape.add(&term_real, &term_fake)?;
    if gamma > 0.0 {
        let n = real.shape()[0];
        let logit_sum = tape.sum_all(&logits_real)?;
        let grads = tape.backward(&logit_sum)?;
        let grad_real = grads.wrt(&real_var).ok_or(TrainingError::BadConfig(
            "critic produced no input gradient for the R1 penalty".to_string(),
        ))?;
        let sq = tape.l2_norm_squared(&grad_real)?;
        let r1 = tape.scale(&sq, gamma / (2.0 * n as f64))?;
        total = tape.add(&total, &r1)?;
    }
    Ok(total)
}

/// Image-critic loss (trains D). `x_rec` must be a plain tensor — the
/// reconstruction graph is value-level, so no gradient reaches E or G.
pub fn critic_loss_d(
    tape: &mut Tape,
    critic: &TapedMlp,
    x_real: &Tensor,
    x_rec: &Tensor,
    gamma: f64,
) -> Result<Tensor, TrainingError> {
    logistic_critic_loss(tape, critic, x_real, x_rec, gamma)
}

/// Value-level wrapper over [`critic_loss_d`].
pub fn critic_loss_d_value(
    critic: &Mlp,
    x_real: &Tensor,
    x_rec: &Tensor,
    gamma: f64,
) -> Result<f64, TrainingError> {
    let mut tape = Tape::new();
    let taped = critic.attach(&mut tape, false);
    let loss = critic_loss_d(&mut tape, &taped, x_real, x_rec, gamma)?;
    Ok(loss.item()?)
}

/// Latent-critic loss (trains D^w): prior codes w = FC(z) are the "real"
/// class, encoder outputs the "fake" class; R1 lands on the prior codes.
/// Both inputs are plain tensors (the encoder is gradient-stopped).
pub fn critic_loss_dw(
    tape: &mut Tape,
    critic_w: &TapedMlp,
    w_prior: &Tensor,
    w_enc: &Tensor,
    gamma: f64,
) -> Result<Tensor, TrainingError> {
    logistic_critic_loss(tape, critic_w, w_prior, w_enc, gamma)
}

/// Value-level latent-critic loss with the mode gate: the latent critic
/// only exists in force_in_domain mode.
pub fn critic_loss_dw_value(
    bundle: &ModelBundle,
    z: &Tensor,
    x_real: &Tensor,
    weights: &LossWeights,
    mode: TrainMode,
) -> Result<f64, TrainingError> {
    if mode != TrainMode::ForceInDomain {
        return Err(TrainingError::WrongMode { op: "critic_loss_dw" });
    }
    let w_prior = bundle.map_latent(z)?;
    let w_enc = bundle.encode(x_real)?;
    let mut tape = Tape::new();
    let taped = bundle.critic_dw.attach(&mut tape, false);
    let loss = critic_loss_dw(&mut tape, &taped, &w_prior, &w_enc, weights.gamma)?;
    Ok(loss.item()?)
}

/// Scalar components of one encoder-loss evaluation. `None` means the term
/// was structurally skipped (zero weight, or mode excludes it) — skipped
/// terms contribute no tape nodes at all.
#[derive(Debug, Clone)]
pub struct EncoderLossValues {
    pub cyc: f64,
    pub adv_d: Option<f64>,
    pub adv_dw: Option<f64>,
    pub perc: Option<f64>,
    pub total: f64,
}

/// Encoder loss on a tape, plus the component values for logging.
pub struct EncoderTerms {
    /// The scalar loss node to backpropagate.
    pub node: Tensor,
    pub values: EncoderLossValues,
}

/// Build the encoder objective
/// L = loss_cyc + lambda_adv * softplus(-D(G(E(x))))
///       + lambda_adv_dw * softplus(-D^w(E(x))) + lambda_vgg * loss_perc
/// on `tape`. The D^w term only exists in force_in_domain mode, and any
/// zero-weight term is omitted from the graph entirely, so force mode with
/// lambda_adv_dw = 0 builds the identical graph to in_domain mode.
///
/// Gradient isolation relies on how the nets were attached: `encoder`
/// should be trainable, everything else frozen.
#[allow(clippy::too_many_arguments)]
pub fn encoder_loss(
    tape: &mut Tape,
    encoder: &TapedMlp,
    generator: &TapedMlp,
    critic_d: Option<&TapedMlp>,
    critic_dw: Option<&TapedMlp>,
    features: Option<&TapedMlp>,
    x_real: &Tensor,
    weights: &LossWeights,
    mode: TrainMode,
) -> Result<EncoderTerms, TrainingError> {
    let x = tape.constant(x_real);
    let w = encoder.forward(tape, &x)?;
    let x_rec = generator.forward(tape, &w)?;
    let cyc = loss_cyc_taped(tape, &x, &x_rec)?;
    let mut total = cyc.clone();

    let mut adv_d = None;
    if weights.lambda_adv > 0.0 {
        let critic = critic_d.ok_or(TrainingError::BadConfig(
            "lambda_adv > 0 requires the image critic".to_string(),
        ))?;
        let logits = critic.forward(tape, &x_rec)?;
        let neg = tape.neg(&logits)?;
        let sp = tape.softplus(&neg)?;
        let term = tape.mean_all(&sp)?;
        adv_d = Some(term.item()?);
        let weighted = tape.scale(&term, weights.lambda_adv)?;
        total = tape.add(&total, &weighted)?;
    }

    let mut adv_dw = None;
    if mode == TrainMode::ForceInDomain && weights.lambda_adv_dw > 0.0 {
        let critic = critic_dw.ok_or(TrainingError::BadConfig(
            "lambda_adv_dw > 0 in force mode requires the latent critic".to_string(),
        ))?;
        let logits = critic.forward(tape, &w)?;
        let neg = tape.neg(&logits)?;
        let sp = tape.softplus(&neg)?;
        let term = tape.mean_all(&sp)?;
        adv_dw = Some(term.item()?);
        let weighted = tape.scale(&term, weights.lambda_adv_dw)?;
        total = tape.add(&total, &weighted)?;
    }

    let mut perc = None;
    if weights.lambda_vgg > 0.0 {
        let feat = features.ok_or(TrainingError::BadConfig(
            "lambda_vgg > 0 requires a feature extractor".to_string(),
        ))?;
        let fx = feat.forward(tape, &x)?;
        let fr = feat.forward(tape, &x_rec)?;
        let diff = tape.sub(&fx, &fr)?;
        let term = tape.mean_row_norm(&diff)?;
        perc = Some(term.item()?);
        let weighted = tape.scale(&term, weights.lambda_vgg)?;
        total = tape.add(&total, &weighted)?;
    }

    let values = EncoderLossValues {
        cyc: cyc.item()?,
        adv_d,
        adv_dw,
        perc,
        total: total.item()?,
    };
    Ok(EncoderTerms { node: total, values })
}

/// Value-level encoder loss for a bundle (everything frozen).
pub fn encoder_loss_value(
    bundle: &ModelBundle,
    features: Option<&FeatureExtractor>,
    x_real: &Tensor,
    weights: &LossWeights,
    mode: TrainMode,
) -> Result<EncoderLossValues, TrainingError> {
    let mut tape = Tape::new();
    let enc = bundle.encoder.attach(&mut tape, false);
    let gen = bundle.generator.attach(&mut tape, false);
    let d = bundle.critic_d.attach(&mut tape, false);
    let dw = bundle.critic_dw.attach(&mut tape, false);
    let feat = features.map(|f| f.attach(&mut tape));
    let terms = encoder_loss(
        &mut tape,
        &enc,
        &gen,
        Some(&d),
        Some(&dw),
        feat.as_ref(),
        x_real,
        weights,
        mode,
    )?;
    Ok(terms.values)
}
