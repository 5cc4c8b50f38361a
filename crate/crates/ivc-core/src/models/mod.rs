//! Scale-space-flow codec: three hyperprior autoencoders (I-frame, flow,
//! residual), the blur/warp machinery, GoP scheduling, and receiver-side
//! complexity accounting.

pub mod blur;
pub mod forward;
pub mod warp;

pub use blur::{blur_stack, gaussian_blur, BlurVolume, BLUR_SIGMAS};
pub use warp::scale_space_warp;

use crate::tensor::{conv2d, conv_transpose2d, ParamSet, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Channel plan for one codec size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub codec_channels: usize,
    pub hypercodec_channels: usize,
    pub latent_channels: usize,
    pub hyperlatent_channels: usize,
}

/// Codec path downsampling (four stride-2 stages).
pub const CODEC_DOWNSAMPLE: usize = 16;
/// Additional hyper path downsampling (two stride-2 stages).
pub const HYPER_DOWNSAMPLE: usize = 4;
/// Total spatial alignment requirement for inputs.
pub const TOTAL_DOWNSAMPLE: usize = CODEC_DOWNSAMPLE * HYPER_DOWNSAMPLE;

/// Scale clamp floor applied to every predicted Gaussian scale.
pub const SIGMA_FLOOR: f32 = 0.11;

impl ArchConfig {
    pub const fn new(codec: usize, hyper: usize, latent: usize, hyperlatent: usize) -> ArchConfig {
        ArchConfig {
            codec_channels: codec,
            hypercodec_channels: hyper,
            latent_channels: latent,
            hyperlatent_channels: hyperlatent,
        }
    }

    /// Named preset lookup. `ssf-lite` is the small test/runtime model; the
    /// numbered presets exist for parameter and MAC accounting.
    pub fn preset(name: &str) -> Option<ArchConfig> {
        Some(match name {
            "ssf-lite" => ArchConfig::new(32, 32, 48, 48),
            "ssf18" => ArchConfig::new(128, 192, 192, 192),
            "ssf8" => ArchConfig::new(96, 96, 192, 192),
            "ssf5" => ArchConfig::new(64, 64, 192, 192),
            "ssf3" => ArchConfig::new(48, 48, 128, 192),
            _ => return None,
        })
    }

    pub const PRESET_NAMES: [&'static str; 5] = ["ssf-lite", "ssf18", "ssf8", "ssf5", "ssf3"];

    /// Stable one-byte identifier for the bitstream header.
    pub fn preset_id(name: &str) -> Option<u8> {
        Self::PRESET_NAMES.iter().position(|&n| n == name).map(|i| i as u8)
    }

    pub fn preset_name(id: u8) -> Option<&'static str> {
        Self::PRESET_NAMES.get(id as usize).copied()
    }
}

/// One convolutional layer: weight, bias, geometry, and whether a ReLU
/// follows it inside the net.
#[derive(Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
    pub transposed: bool,
    pub relu: bool,
}

impl ConvLayer {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = if self.transposed {
            conv_transpose2d(x, &self.weight, Some(&self.bias), self.stride, self.pad, self.output_padding)?
        } else {
            conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)?
        };
        Ok(if self.relu { y.relu() } else { y })
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Sequential stack of conv layers.
pub type ConvNet = Vec<ConvLayer>;

pub fn run_net(net: &ConvNet, x: &Tensor) -> Result<Tensor, TensorError> {
    let mut h = x.clone();
    for layer in net {
        h = layer.apply(&h)?;
    }
    Ok(h)
}

/// One hyperprior autoencoder: analysis/synthesis codec pair, hyper pair with
/// separate mean and scale synthesis branches, and a factorized hyperlatent
/// prior (per-channel logistic location and log-scale).
pub struct AutoEncoder {
    pub g_a: ConvNet,
    pub g_s: ConvNet,
    pub h_a: ConvNet,
    pub h_mu: ConvNet,
    pub h_sigma: ConvNet,
    pub prior_loc: Tensor,
    pub prior_log_scale: Tensor,
}

pub struct SsfModel {
    pub config: ArchConfig,
    pub iframe: AutoEncoder,
    pub flow: AutoEncoder,
    pub residual: AutoEncoder,
}

struct LayerSpec {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    transposed: bool,
    relu: bool,
}

fn spec(c_in: usize, c_out: usize, k: usize, stride: usize, transposed: bool, relu: bool) -> LayerSpec {
    LayerSpec { c_in, c_out, k, stride, transposed, relu }
}

fn codec_analysis_specs(c_in: usize, cfg: &ArchConfig) -> Vec<LayerSpec> {
    let c = cfg.codec_channels;
    vec![
        spec(c_in, c, 5, 2, false, true),
        spec(c, c, 5, 2, false, true),
        spec(c, c, 5, 2, false, true),
        spec(c, cfg.latent_channels, 5, 2, false, false),
    ]
}

fn codec_synthesis_specs(c_out: usize, cfg: &ArchConfig) -> Vec<LayerSpec> {
    let c = cfg.codec_channels;
    vec![
        spec(cfg.latent_channels, c, 5, 2, true, true),
        spec(c, c, 5, 2, true, true),
        spec(c, c, 5, 2, true, true),
        spec(c, c_out, 5, 2, true, false),
    ]
}

fn hyper_analysis_specs(cfg: &ArchConfig) -> Vec<LayerSpec> {
    let c = cfg.hypercodec_channels;
    vec![
        spec(cfg.latent_channels, c, 3, 1, false, true),
        spec(c, c, 5, 2, false, true),
        spec(c, cfg.hyperlatent_channels, 5, 2, false, false),
    ]
}

fn hyper_synthesis_specs(cfg: &ArchConfig) -> Vec<LayerSpec> {
    let c = cfg.hypercodec_channels;
    vec![
        spec(cfg.hyperlatent_channels, c, 5, 2, true, true),
        spec(c, c, 5, 2, true, true),
        spec(c, cfg.latent_channels, 3, 1, true, false),
    ]
}

fn build_net(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> ConvNet {
    specs
        .iter()
        .map(|s| {
            let fan_in = s.c_in * s.k * s.k;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let wshape = if s.transposed {
                [s.c_in, s.c_out, s.k, s.k]
            } else {
                [s.c_out, s.c_in, s.k, s.k]
            };
            let wdata: Vec<f32> = (0..s.c_in * s.c_out * s.k * s.k)
                .map(|_| normal.sample(rng) as f32)
                .collect();
            ConvLayer {
                weight: Tensor::param(wshape, wdata),
                bias: Tensor::param([1, s.c_out, 1, 1], vec![0.0; s.c_out]),
                stride: s.stride,
                pad: s.k / 2,
                output_padding: if s.transposed && s.stride == 2 { 1 } else { 0 },
                transposed: s.transposed,
                relu: s.relu,
            }
        })
        .collect()
}

fn build_autoencoder(c_in: usize, c_out: usize, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> AutoEncoder {
    AutoEncoder {
        g_a: build_net(&codec_analysis_specs(c_in, cfg), rng),
        g_s: build_net(&codec_synthesis_specs(c_out, cfg), rng),
        h_a: build_net(&hyper_analysis_specs(cfg), rng),
        h_mu: build_net(&hyper_synthesis_specs(cfg), rng),
        h_sigma: build_net(&hyper_synthesis_specs(cfg), rng),
        prior_loc: Tensor::param([1, cfg.hyperlatent_channels, 1, 1], vec![0.0; cfg.hyperlatent_channels]),
        prior_log_scale: Tensor::param(
            [1, cfg.hyperlatent_channels, 1, 1],
            vec![0.0; cfg.hyperlatent_channels],
        ),
    }
}

/// Deterministic model construction from a seed.
pub fn build_model(config: ArchConfig, rng_seed: u64) -> SsfModel {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    SsfModel {
        config,
        iframe: build_autoencoder(3, 3, &config, &mut rng),
        // Flow input is (frame, previous reconstruction); output (dx, dy, s).
        flow: build_autoencoder(6, 3, &config, &mut rng),
        residual: build_autoencoder(3, 3, &config, &mut rng),
    }
}

fn push_net(set: &mut ParamSet, prefix: &str, net: &ConvNet) {
    for (i, layer) in net.iter().enumerate() {
        set.push(format!("{prefix}.w{i}"), layer.weight.clone());
        set.push(format!("{prefix}.b{i}"), layer.bias.clone());
    }
}

impl AutoEncoder {
    fn sender_params(&self, prefix: &str, set: &mut ParamSet) {
        push_net(set, &format!("{prefix}.g_a"), &self.g_a);
        push_net(set, &format!("{prefix}.h_a"), &self.h_a);
    }

    fn receiver_params(&self, prefix: &str, set: &mut ParamSet) {
        push_net(set, &format!("{prefix}.g_s"), &self.g_s);
        push_net(set, &format!("{prefix}.h_mu"), &self.h_mu);
        push_net(set, &format!("{prefix}.h_sigma"), &self.h_sigma);
        set.push(format!("{prefix}.prior.loc"), self.prior_loc.clone());
        set.push(format!("{prefix}.prior.log_scale"), self.prior_log_scale.clone());
    }
}

impl SsfModel {
    fn autoencoders(&self) -> [(&'static str, &AutoEncoder); 3] {
        [("iframe", &self.iframe), ("flow", &self.flow), ("residual", &self.residual)]
    }

    /// Everything the sender needs but the receiver never sees: all analysis
    /// and hyper-analysis nets.
    pub fn sender_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, ae) in self.autoencoders() {
            ae.sender_params(name, &mut set);
        }
        set
    }

    /// Everything the receiver runs: synthesis nets, hyper-synthesis mean and
    /// scale branches, and the hyperlatent priors. This is the set that
    /// instance adaptation updates and transmits.
    pub fn receiver_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, ae) in self.autoencoders() {
            ae.receiver_params(name, &mut set);
        }
        set
    }

    /// Full parameter set, sender first then receiver.
    pub fn all_params(&self) -> ParamSet {
        let mut set = self.sender_params();
        set.extend(self.receiver_params());
        set
    }

    /// Structural clone with every parameter tensor replaced by
    /// `f(name, tensor)`. Layer geometry is preserved; the replacement may be
    /// a derived graph node (e.g. base weights plus a quantized update).
    pub fn map_params(&self, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> SsfModel {
        let map_net = |net: &ConvNet, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor| {
            net.iter()
                .enumerate()
                .map(|(i, l)| ConvLayer {
                    weight: f(&format!("{prefix}.w{i}"), &l.weight),
                    bias: f(&format!("{prefix}.b{i}"), &l.bias),
                    ..l.clone()
                })
                .collect::<ConvNet>()
        };
        let map_ae = |ae: &AutoEncoder, name: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor| {
            AutoEncoder {
                g_a: map_net(&ae.g_a, &format!("{name}.g_a"), f),
                g_s: map_net(&ae.g_s, &format!("{name}.g_s"), f),
                h_a: map_net(&ae.h_a, &format!("{name}.h_a"), f),
                h_mu: map_net(&ae.h_mu, &format!("{name}.h_mu"), f),
                h_sigma: map_net(&ae.h_sigma, &format!("{name}.h_sigma"), f),
                prior_loc: f(&format!("{name}.prior.loc"), &ae.prior_loc),
                prior_log_scale: f(&format!("{name}.prior.log_scale"), &ae.prior_log_scale),
            }
        };
        SsfModel {
            config: self.config,
            iframe: map_ae(&self.iframe, "iframe", f),
            flow: map_ae(&self.flow, "flow", f),
            residual: map_ae(&self.residual, "residual", f),
        }
    }

    /// Independent copy with fresh parameter tensors; training the clone
    /// leaves `self` untouched.
    pub fn deep_clone(&self) -> SsfModel {
        self.map_params(&mut |_, t| Tensor::param(t.shape(), t.to_vec()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Intra,
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GopEntry {
    pub index: usize,
    pub kind: FrameKind,
    pub reference: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GopPlan {
    pub entries: Vec<GopEntry>,
}

/// Frame schedule for `num_frames` with intra period `gop_size`;
/// `gop_size = 0` means a single group for the whole clip.
pub fn gop_plan(num_frames: usize, gop_size: usize) -> GopPlan {
    assert!(num_frames >= 1);
    let entries = (0..num_frames)
        .map(|i| {
            let intra = if gop_size == 0 { i == 0 } else { i % gop_size == 0 };
            GopEntry {
                index: i,
                kind: if intra { FrameKind::Intra } else { FrameKind::Predicted },
                reference: if intra { None } else { Some(i - 1) },
            }
        })
        .collect();
    GopPlan { entries }
}

/// Per-layer multiply-accumulates at output resolution `oh x ow`:
/// `oh * ow * c_in * c_out * k^2`.
fn layer_macs(s: &LayerSpec, oh: usize, ow: usize) -> u64 {
    (oh * ow * s.c_in * s.c_out * s.k * s.k) as u64
}

fn decode_macs_one_ae(c_out: usize, cfg: &ArchConfig, width: usize, height: usize) -> u64 {
    let mut total = 0u64;
    // Synthesis: latent at 1/16 upsampled back to full resolution.
    let mut res = 16;
    for s in codec_synthesis_specs(c_out, cfg) {
        res /= 2;
        total += layer_macs(&s, height / res.max(1), width / res.max(1));
    }
    // Hyper synthesis (both branches): 1/64 up to 1/16, last layer stride 1.
    for branch in 0..2 {
        let _ = branch;
        let mut res = 64;
        for s in hyper_synthesis_specs(cfg) {
            if s.stride == 2 {
                res /= 2;
            }
            total += layer_macs(&s, height / res, width / res);
        }
    }
    total
}

/// Receiver-side kMACs per pixel: one P-frame (flow + residual decode) plus
/// an amortized I-frame share at GoP 12. Blur and warping are not counted.
pub fn count_decoder_macs(config: &ArchConfig, width: usize, height: usize) -> f64 {
    assert!(width % TOTAL_DOWNSAMPLE == 0 && height % TOTAL_DOWNSAMPLE == 0);
    let p_frame = decode_macs_one_ae(3, config, width, height)
        + decode_macs_one_ae(3, config, width, height);
    let i_frame = decode_macs_one_ae(3, config, width, height);
    let amortized = p_frame as f64 + i_frame as f64 / 12.0;
    amortized / (width as f64 * height as f64 * 1000.0)
}
