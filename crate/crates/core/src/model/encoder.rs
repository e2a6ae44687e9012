//! Frozen synthetic multi-layer encoder.
//!
//! The encoder stands in for a pretrained speech encoder whose layers store
//! distinct information: input features are split into per-layer bands, and
//! layer `i` injects band `i` at full strength while carrying earlier layers
//! forward through an attenuated, folded-sine mixing transform. The sine is
//! deliberately non-monotone: with a strong carry gain it wraps, so carried
//! class means fold toward zero while sample-to-sample jitter survives as a
//! fresh variance floor at every hop. Linear recoverability of a factor is
//! therefore strictly highest at its own injection layer and decays with
//! every layer above it, no matter how strong the injected pattern is.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, Result};
use crate::numerics::{kernels, Tensor};
use crate::rng::rng_for;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Layer count M; also the number of input bands.
    pub layers: usize,
    /// Hidden width d.
    pub width: usize,
    /// Width of each input band; input width = layers * band_width.
    pub band_width: usize,
    /// Scale applied to carried-forward states, in (0, 1).
    pub attenuation: f64,
    /// Scale applied to the freshly injected band.
    pub injection_strength: f64,
    /// Gain of the carry mixing matrix (entries N(0, (gain/sqrt(d))^2)).
    /// Larger gains drive the folded-sine nonlinearity through more wraps,
    /// so carried information washes out faster with depth.
    pub carry_gain: f64,
    /// Rank of the carry mixing matrix. A rank below the width makes every
    /// hop lossy by construction: each carried signal keeps only the part
    /// lying in a random rank-dimensional subspace, so linear recoverability
    /// decays strictly with distance from the injection layer.
    pub carry_rank: usize,
    /// Std of the random bias inside the nonlinearity; a nonzero bias breaks
    /// the symmetry of the mixing transform between layers.
    pub carry_bias_std: f64,
    /// Weight seed; the encoder is a pure function of this config.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 6,
            width: 64,
            band_width: 8,
            attenuation: 0.7,
            injection_strength: 1.0,
            carry_gain: 24.0,
            carry_rank: 16,
            carry_bias_std: 1.25,
            seed: 0x5eed_e4c0,
        }
    }
}

impl EncoderConfig {
    pub fn input_width(&self) -> usize {
        self.layers * self.band_width
    }
}

#[derive(Debug, Clone)]
struct LayerTransform {
    /// `[width, width]` mixing of the carried state.
    carry: Tensor,
    /// `[band_width, width]` injection of this layer's band.
    inject: Tensor,
    /// `[width]` bias inside the nonlinearity.
    bias: Tensor,
}

/// Immutable after construction; holds no gradients.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    config: EncoderConfig,
    transforms: Vec<LayerTransform>,
}

/// Per-layer hidden states of one sample: M sequences of T × d frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub layers: Vec<Tensor>,
    pub frames: usize,
    pub width: usize,
}

/// Parameter-free layer-normalized stack H^norm, shared read-only with the
/// autodiff tape (the encoder is frozen, so these are constants).
#[derive(Debug, Clone)]
pub struct NormalizedStack {
    layers: Vec<Arc<Vec<f64>>>,
    pub frames: usize,
    pub width: usize,
}

impl NormalizedStack {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, m: usize) -> &Arc<Vec<f64>> {
        &self.layers[m]
    }

    pub fn layers(&self) -> &[Arc<Vec<f64>>] {
        &self.layers
    }
}

impl SyntheticEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.layers == 0 || config.width < 2 || config.band_width == 0 {
            return Err(ModelError::BadEncoderConfig(format!(
                "layers {}, width {}, band_width {}",
                config.layers, config.width, config.band_width
            )));
        }
        // Injection strength 0 is allowed: it ablates the band signal for
        // control experiments while keeping the encoder well formed.
        if !(0.0..1.0).contains(&config.attenuation) || config.injection_strength < 0.0 {
            return Err(ModelError::BadEncoderConfig(format!(
                "attenuation {}, injection_strength {}",
                config.attenuation, config.injection_strength
            )));
        }
        if config.carry_gain <= 0.0 || config.carry_bias_std < 0.0 {
            return Err(ModelError::BadEncoderConfig(format!(
                "carry_gain {}, carry_bias_std {}",
                config.carry_gain, config.carry_bias_std
            )));
        }
        if config.carry_rank == 0 || config.carry_rank > config.width {
            return Err(ModelError::BadEncoderConfig(format!(
                "carry_rank {} for width {}",
                config.carry_rank, config.width
            )));
        }
        let d = config.width;
        let rank = config.carry_rank;
        // carry = scale * G1 G2 with G1 d x rank, G2 rank x d: a random
        // matrix of rank `rank` whose entries have std carry_gain / sqrt(d).
        let carry_scale =
            config.carry_gain / ((d as f64).sqrt() * (rank as f64).sqrt());
        let inject_std = 1.0 / (config.band_width as f64).sqrt();
        let transforms = (0..config.layers)
            .map(|layer| {
                let mut rng = rng_for(config.seed, &[0xca44, layer as u64]);
                let g1 = Tensor::randn(vec![d, rank], 1.0, &mut rng);
                let g2 = Tensor::randn(vec![rank, d], 1.0, &mut rng);
                let mut product = vec![0.0; d * d];
                kernels::matmul(g1.values(), g2.values(), d, rank, d, &mut product);
                for v in product.iter_mut() {
                    *v *= carry_scale;
                }
                let carry = Tensor::new(vec![d, d], product).expect("finite carry");
                let mut rng = rng_for(config.seed, &[0x1213, layer as u64]);
                let inject =
                    Tensor::randn(vec![config.band_width, d], inject_std, &mut rng);
                let mut rng = rng_for(config.seed, &[0xb1a5, layer as u64]);
                let bias =
                    Tensor::randn(vec![d], config.carry_bias_std, &mut rng);
                LayerTransform { carry, inject, bias }
            })
            .collect();
        Ok(SyntheticEncoder { config, transforms })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Run the frozen stack over `features` (T × input_width).
    pub fn encode(&self, features: &Tensor) -> Result<EncoderStates> {
        let expected = self.config.input_width();
        if features.shape().len() != 2 || features.cols() != expected {
            return Err(ModelError::FeatureWidthMismatch {
                expected,
                found: features.cols(),
            });
        }
        let t = features.rows();
        let d = self.config.width;
        let bw = self.config.band_width;
        let mut layers = Vec::with_capacity(self.config.layers);
        let mut state = vec![0.0; t * d];
        let mut carried = vec![0.0; t * d];
        let mut injected = vec![0.0; t * d];
        for (i, tf) in self.transforms.iter().enumerate() {
            kernels::matmul(&state, tf.carry.values(), t, d, d, &mut carried);
            let band: Vec<f64> = (0..t)
                .flat_map(|r| {
                    features.values()[r * expected + i * bw..r * expected + (i + 1) * bw]
                        .iter()
                        .copied()
                })
                .collect();
            kernels::matmul(&band, tf.inject.values(), t, bw, d, &mut injected);
            let bias = tf.bias.values();
            for j in 0..t * d {
                state[j] = self.config.attenuation * (carried[j] + bias[j % d]).sin()
                    + self.config.injection_strength * injected[j];
            }
            layers.push(Tensor::new(vec![t, d], state.clone())?);
        }
        Ok(EncoderStates {
            layers,
            frames: t,
            width: d,
        })
    }

    /// SHA-256 over the config and every weight bit; used to assert the
    /// encoder is untouched by training.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for tf in &self.transforms {
            for v in tf
                .carry
                .values()
                .iter()
                .chain(tf.inject.values())
                .chain(tf.bias.values())
            {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

/// Eq. (1)–(2): per-frame parameter-free layer normalization of every layer,
/// stacked along a new leading axis.
pub fn normalize_stack(states: &EncoderStates) -> NormalizedStack {
    let (t, d) = (states.frames, states.width);
    let layers = states
        .layers
        .iter()
        .map(|layer| {
            let mut out = vec![0.0; t * d];
            kernels::layer_norm_rows(layer.values(), t, d, LAYER_NORM_EPS, None, None, &mut out);
            Arc::new(out)
        })
        .collect();
    NormalizedStack {
        layers,
        frames: t,
        width: d,
    }
}
