//! fidg — a desk-scale, fully deterministic laboratory for *force-in-domain*
//! GAN inversion.
//!
//! The crate trains a small generator on synthetic 16x16 blob images, then
//! trains an encoder that inverts images back to latent codes under two
//! regimes: plain in-domain inversion (cycle + image-adversarial losses) and
//! force-in-domain inversion, which adds a discriminator on the latent codes
//! themselves so that inverted codes stay on the generator's code
//! distribution. Everything — tensor math, autodiff, optimizers, metrics,
//! editing — is implemented here on `f64` with explicit, reproducible
//! reduction orders: the same seed gives byte-identical artifacts.

pub mod cli;
pub mod editing;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod synthdata;
pub mod training;
