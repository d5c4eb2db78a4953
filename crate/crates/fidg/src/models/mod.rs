//! The five little networks of the laboratory and their checkpoint format.
//!
//! All of them are plain fully-connected nets over `f64`:
//!
//! * `fc`        — latent mapping z -> w (8 -> 32 -> 8, linear output)
//! * `generator` — w -> image (8 -> 128 -> 128 -> 256, sigmoid output)
//! * `encoder`   — image -> w (256 -> 128 -> 128 -> 8, linear output)
//! * `critic_d`  — image realism critic (256 -> 128 -> 64 -> 1, logit out)
//! * `critic_dw` — latent-code critic (8 -> 64 -> 64 -> 1, logit out)
//!
//! Hidden activations are leaky ReLU (slope 0.2) everywhere.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

use crate::numerics::{NumericsError, Rng, Tape, Tensor};

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply_plain(&self, x: &Tensor) -> Tensor {
        match *self {
            Activation::Identity => x.detach(),
            Activation::LeakyRelu(slope) => x.map(|v| if v > 0.0 { v } else { slope * v }),
            Activation::Sigmoid => x.map(|v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            }),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    fn apply_taped(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, NumericsError> {
        match *self {
            Activation::Identity => Ok(x.clone()),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Architecture description: layer widths (including input and output) plus
/// the hidden and output activations.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], hidden: Activation, output: Activation) -> MlpSpec {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        MlpSpec {
            widths: widths.to_vec(),
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }
}

/// A fully-connected network. Weights are stored `[in, out]` so the forward
/// pass is a plain row-major matmul; biases are `[out]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// He-style init: W ~ N(0, 2 / fan_in), biases zero. The scaling keeps
    /// activation variance stable under the leaky-ReLU hidden layers.
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Mlp {
        let mut weights = Vec::with_capacity(spec.layer_count());
        let mut biases = Vec::with_capacity(spec.layer_count());
        for l in 0..spec.layer_count() {
            let fan_in = spec.widths[l];
            let fan_out = spec.widths[l + 1];
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = rng.gaussian_vec(fan_in * fan_out).iter().map(|g| g * std).collect();
            weights.push(Tensor::from_vec(&[fan_in, fan_out], data).expect("init shape"));
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Mlp { spec, weights, biases }
    }

    /// All-zero parameters; handy for analytic fixtures in tests.
    pub fn zeros(spec: MlpSpec) -> Mlp {
        let weights = (0..spec.layer_count())
            .map(|l| Tensor::zeros(&[spec.widths[l], spec.widths[l + 1]]))
            .collect();
        let biases = (0..spec.layer_count())
            .map(|l| Tensor::zeros(&[spec.widths[l + 1]]))
            .collect();
        Mlp { spec, weights, biases }
    }

    /// Value-level forward pass for `[n, input_dim]` batches. No gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        if x.shape().len() != 2 || x.shape()[1] != self.spec.input_dim() {
            return Err(NumericsError::InvalidShape {
                op: "mlp_forward",
                shape: x.shape().to_vec(),
                reason: "expected [batch, input_dim]",
            });
        }
        let mut h = x.detach();
        let last = self.spec.layer_count() - 1;
        for l in 0..=last {
            h = h.matmul(&self.weights[l])?.add_bias(&self.biases[l])?;
            let act = if l == last { self.spec.output } else { self.spec.hidden };
            h = act.apply_plain(&h);
        }
        Ok(h)
    }

    /// Register the parameters on a tape, trainable or frozen.
    pub fn attach<'m>(&'m self, tape: &mut Tape, trainable: bool) -> TapedMlp<'m> {
        let reg = |tape: &mut Tape, t: &Tensor| if trainable { tape.var(t) } else { tape.constant(t) };
        TapedMlp {
            spec: &self.spec,
            weights: self.weights.iter().map(|w| reg(tape, w)).collect(),
            biases: self.biases.iter().map(|b| reg(tape, b)).collect(),
        }
    }

    /// Parameters in a fixed order (all weights and biases interleaved per
    /// layer), for optimizers and checkpoints.
    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(self.biases.iter()).map(Tensor::numel).sum()
    }
}

/// An `Mlp` whose parameters live on a tape; produced by [`Mlp::attach`].
pub struct TapedMlp<'m> {
    spec: &'m MlpSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl TapedMlp<'_> {
    /// Taped forward pass for `[n, input_dim]` batches.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, NumericsError> {
        if x.shape().len() != 2 || x.shape()[1] != self.spec.input_dim() {
            return Err(NumericsError::InvalidShape {
                op: "mlp_forward",
                shape: x.shape().to_vec(),
                reason: "expected [batch, input_dim]",
            });
        }
        let mut h = x.clone();
        let last = self.spec.layer_count() - 1;
        for l in 0..=last {
            let z = tape.matmul_nn(&h, &self.weights[l])?;
            let z = tape.add_bias(&z, &self.biases[l])?;
            let act = if l == last { self.spec.output } else { self.spec.hidden };
            h = act.apply_taped(tape, &z)?;
        }
        Ok(h)
    }

    /// Trainable parameter tensors in optimizer order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w.clone());
            out.push(b.clone());
        }
        out
    }
}

/// Which networks a phase treats as frozen (excluded from updates; entered on
/// tapes as constants).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrozenFlags {
    pub fc: bool,
    pub generator: bool,
    pub encoder: bool,
    pub critic_d: bool,
    pub critic_dw: bool,
}

/// The whole zoo, plus freeze bookkeeping.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub fc: Mlp,
    pub generator: Mlp,
    pub encoder: Mlp,
    pub critic_d: Mlp,
    pub critic_dw: Mlp,
    pub frozen: FrozenFlags,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl ModelBundle {
    /// Fresh bundle with the standard architecture. `latent_dim` is the code
    /// dimension (8 by default), `image_dim` the flattened image size (256).
    pub fn init(rng: &mut Rng, latent_dim: usize, image_dim: usize) -> ModelBundle {
        let lrelu = Activation::LeakyRelu(LEAKY_SLOPE);
        let fc = Mlp::init(
            MlpSpec::new(&[latent_dim, 32, latent_dim], lrelu, Activation::Identity),
            rng,
        );
        let generator = Mlp::init(
            MlpSpec::new(&[latent_dim, 128, 128, image_dim], lrelu, Activation::Sigmoid),
            rng,
        );
        let encoder = Mlp::init(
            MlpSpec::new(&[image_dim, 128, 128, latent_dim], lrelu, Activation::Identity),
            rng,
        );
        let critic_d = Mlp::init(
            MlpSpec::new(&[image_dim, 128, 64, 1], lrelu, Activation::Identity),
            rng,
        );
        let critic_dw = Mlp::init(
            MlpSpec::new(&[latent_dim, 64, 64, 1], lrelu, Activation::Identity),
            rng,
        );
        ModelBundle {
            fc,
            generator,
            encoder,
            critic_d,
            critic_dw,
            frozen: FrozenFlags::default(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.fc.spec.output_dim()
    }

    pub fn image_dim(&self) -> usize {
        self.generator.spec.output_dim()
    }

    /// z -> w.
    pub fn map_latent(&self, z: &Tensor) -> Result<Tensor, NumericsError> {
        self.fc.forward(z)
    }

    /// w -> image.
    pub fn generate(&self, w: &Tensor) -> Result<Tensor, NumericsError> {
        self.generator.forward(w)
    }

    /// image -> w.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.encoder.forward(x)
    }

    /// Sample a batch of prior codes w = fc(z), z ~ N(0, I).
    pub fn sample_prior_codes(&self, rng: &mut Rng, n: usize) -> Result<Tensor, NumericsError> {
        let z = Tensor::from_vec(&[n, self.latent_dim()], rng.gaussian_vec(n * self.latent_dim()))?;
        self.map_latent(&z)
    }

    fn nets(&self) -> [(&'static str, &Mlp); 5] {
        [
            ("fc", &self.fc),
            ("gen", &self.generator),
            ("enc", &self.encoder),
            ("d", &self.critic_d),
            ("dw", &self.critic_dw),
        ]
    }

    fn nets_mut(&mut self) -> [(&'static str, &mut Mlp); 5] {
        [
            ("fc", &mut self.fc),
            ("gen", &mut self.generator),
            ("enc", &mut self.encoder),
            ("d", &mut self.critic_d),
            ("dw", &mut self.critic_dw),
        ]
    }

    /// Named parameter arrays in a fixed, documented order:
    /// `fc.w0, fc.b0, fc.w1, ... , dw.b2`.
    pub fn named_arrays(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, net) in self.nets() {
            for l in 0..net.spec.layer_count() {
                out.push((format!("{name}.w{l}"), net.weights[l].detach()));
                out.push((format!("{name}.b{l}"), net.biases[l].detach()));
            }
        }
        out
    }

    /// Replace parameters from named arrays (shape-checked).
    pub fn load_named_arrays(&mut self, arrays: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        for (name, net) in self.nets_mut() {
            for l in 0..net.spec.layer_count() {
                for (kind, slot) in [("w", &mut net.weights[l]), ("b", &mut net.biases[l])] {
                    let key = format!("{name}.{kind}{l}");
                    let found = arrays
                        .iter()
                        .find(|(n, _)| *n == key)
                        .ok_or_else(|| CheckpointError::MissingArray(key.clone()))?;
                    if found.1.shape() != slot.shape() {
                        return Err(CheckpointError::ShapeMismatch {
                            name: key,
                            expected: slot.shape().to_vec(),
                            actual: found.1.shape().to_vec(),
                        });
                    }
                    *slot = found.1.detach();
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_match_architecture() {
        let mut rng = Rng::from_seed(0);
        let b = ModelBundle::init(&mut rng, 8, 256);
        assert_eq!(b.fc.spec.widths, vec![8, 32, 8]);
        assert_eq!(b.generator.spec.widths, vec![8, 128, 128, 256]);
        assert_eq!(b.encoder.spec.widths, vec![256, 128, 128, 8]);
        assert_eq!(b.critic_d.spec.widths, vec![256, 128, 64, 1]);
        assert_eq!(b.critic_dw.spec.widths, vec![8, 64, 64, 1]);
        assert_eq!(b.latent_dim(), 8);
        assert_eq!(b.image_dim(), 256);
    }

    #[test]
    fn init_statistics_follow_he_scaling() {
        let mut rng = Rng::from_seed(5);
        let spec = MlpSpec::new(&[256, 128], Activation::LeakyRelu(0.2), Activation::Identity);
        let mlp = Mlp::init(spec, &mut rng);
        let w = &mlp.weights[0];
        let mean = w.mean();
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.numel() as f64;
        let expected = 2.0 / 256.0;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - expected).abs() < 0.15 * expected, "var {var} vs {expected}");
        for b in &mlp.biases {
            assert!(b.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_weight_net_with_sigmoid_outputs_half() {
        let spec = MlpSpec::new(&[8, 16, 4], Activation::LeakyRelu(0.2), Activation::Sigmoid);
        let mlp = Mlp::zeros(spec);
        let x = Tensor::from_vec(&[2, 8], vec![0.3; 16]).unwrap();
        let y = mlp.forward(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn generator_output_is_strictly_inside_unit_interval() {
        let mut rng = Rng::from_seed(42);
        let b = ModelBundle::init(&mut rng, 8, 256);
        let w = Tensor::from_vec(&[4, 8], rng.gaussian_vec(32)).unwrap();
        let img = b.generate(&w).unwrap();
        assert!(img.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn taped_forward_equals_plain_forward() {
        let mut rng = Rng::from_seed(9);
        let spec = MlpSpec::new(&[6, 12, 3], Activation::LeakyRelu(0.2), Activation::Tanh);
        let mlp = Mlp::init(spec, &mut rng);
        let x = Tensor::from_vec(&[5, 6], rng.gaussian_vec(30)).unwrap();
        let plain = mlp.forward(&x).unwrap();
        let mut tape = Tape::new();
        let taped = mlp.attach(&mut tape, true);
        let xc = tape.constant(&x);
        let y = taped.forward(&mut tape, &xc).unwrap();
        assert_eq!(plain.data(), y.data());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let mlp = Mlp::zeros(MlpSpec::new(&[6, 3], Activation::Identity, Activation::Identity));
        let x = Tensor::zeros(&[2, 5]);
        assert!(mlp.forward(&x).is_err());
    }

    #[test]
    fn named_arrays_roundtrip() {
        let mut rng = Rng::from_seed(3);
        let b = ModelBundle::init(&mut rng, 8, 256);
        let arrays = b.named_arrays();
        // 5 nets x layers x (w, b): fc has 2 layers, others 3 => (2+3+3+3+3)*2
        assert_eq!(arrays.len(), 28);
        let mut b2 = ModelBundle::init(&mut rng, 8, 256);
        b2.load_named_arrays(&arrays).unwrap();
        for ((_, t1), (_, t2)) in b.named_arrays().iter().zip(b2.named_arrays().iter()) {
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn load_named_arrays_rejects_missing_and_misshapen() {
        let mut rng = Rng::from_seed(3);
        let b = ModelBundle::init(&mut rng, 8, 256);
        let mut arrays = b.named_arrays();
        arrays.retain(|(n, _)| n != "enc.w1");
        let mut b2 = b.clone();
        assert!(matches!(
            b2.load_named_arrays(&arrays).unwrap_err(),
            CheckpointError::MissingArray(_)
        ));
        let mut arrays = b.named_arrays();
        for entry in arrays.iter_mut() {
            if entry.0 == "enc.w1" {
                entry.1 = Tensor::zeros(&[2, 2]);
            }
        }
        assert!(matches!(
            b2.load_named_arrays(&arrays).unwrap_err(),
            CheckpointError::ShapeMismatch { .. }
        ));
    }
}
