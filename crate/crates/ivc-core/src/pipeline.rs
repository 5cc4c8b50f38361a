//! End-to-end clip compression: strategy selection, receiver-update coding,
//! per-frame latent coding into the container, and the matching decoder.
//!
//! The contract throughout is bit-exactness: the reconstruction the encoder
//! reports is the one the decoder will produce from the bytes, because both
//! sides run the identical receiver computation on identical hard symbols and
//! identically materialized updated weights.

use crate::bitstream::{
    crop_frame, pad_to_multiple, read_bitstream, write_bitstream, Bitstream, BitstreamError,
    BitstreamHeader, FrameSection, LatentStream, UpdateSection,
};
use crate::entropy::{
    decode_latents_with_escape, encode_latents_with_escape, range_decode, range_encode,
    EntropyError,
};
use crate::insta::{apply_quantized_updates, find_strategy, FinetuneConfig, FinetuneReport};
use crate::models::forward::{
    center_y_symbols, center_z_symbols, decode_conditional, decode_iframe, decode_pframe,
    iframe_eval, pframe_eval, uncenter_y_symbols, uncenter_z_symbols, y_escape_tables,
    y_tail_bound, z_escape_tables, z_tail_bound, EvalAeOut, LatentCodes,
};
use crate::models::{gop_plan, ArchConfig, AutoEncoder, FrameKind, SsfModel, TOTAL_DOWNSAMPLE};
use crate::prior::{build_update_grid, spike_slab_bin_pmf, SpikeSlabPrior, UpdateQuantGrid};
use crate::tensor::{Tensor, TensorError};
use std::fmt;
use std::time::Instant;

#[derive(Debug)]
pub enum PipelineError {
    Tensor(TensorError),
    Entropy(EntropyError),
    Bitstream(BitstreamError),
    UnknownMode(String),
    ArchMismatch { stream: ArchConfig, model: ArchConfig },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Tensor(e) => write!(f, "tensor error: {e}"),
            PipelineError::Entropy(e) => write!(f, "entropy coding error: {e}"),
            PipelineError::Bitstream(e) => write!(f, "{e}"),
            PipelineError::UnknownMode(m) => write!(f, "unknown encode mode {m:?}"),
            PipelineError::ArchMismatch { stream, model } => write!(
                f,
                "stream was coded with architecture {stream:?} but the weights file holds {model:?}"
            ),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        PipelineError::Tensor(e)
    }
}

impl From<EntropyError> for PipelineError {
    fn from(e: EntropyError) -> Self {
        PipelineError::Entropy(e)
    }
}

impl From<BitstreamError> for PipelineError {
    fn from(e: BitstreamError) -> Self {
        PipelineError::Bitstream(e)
    }
}

/// Stream-level settings shared by encoder and decoder. The prior and grid
/// parameters are rounded through f32 on construction so both sides build
/// identical coding tables from the header fields.
#[derive(Clone, Copy, Debug)]
pub struct CodecSettings {
    pub preset_id: u8,
    /// Intra period; 0 codes a single I-frame followed by P-frames only.
    pub gop_size: usize,
    pub beta: f64,
    pub sigma: f64,
    pub s: f64,
    pub alpha: f64,
    pub t: f64,
    /// Update-grid tail mass is `2^-eps_exponent`.
    pub eps_exponent: u8,
}

impl Default for CodecSettings {
    fn default() -> CodecSettings {
        CodecSettings {
            preset_id: 0,
            gop_size: 4,
            beta: 0.0016,
            sigma: 0.05,
            s: 0.001 / 6.0,
            alpha: 100.0,
            t: 0.001,
            eps_exponent: 8,
        }
        .rounded_through_f32()
    }
}

impl CodecSettings {
    pub fn rounded_through_f32(mut self) -> CodecSettings {
        self.sigma = self.sigma as f32 as f64;
        self.s = self.s as f32 as f64;
        self.alpha = self.alpha as f32 as f64;
        self.t = self.t as f32 as f64;
        self
    }

    pub fn prior(&self) -> SpikeSlabPrior {
        SpikeSlabPrior::new(self.sigma, self.s, self.alpha)
    }

    pub fn grid(&self) -> UpdateQuantGrid {
        build_update_grid(&self.prior(), self.t, 2f64.powi(-(self.eps_exponent as i32)))
    }
}

#[derive(Debug)]
pub struct EncodeOutcome {
    pub bytes: Vec<u8>,
    /// Reconstructed frames at original dimensions, exactly what the decoder
    /// will emit.
    pub recon: Vec<Tensor>,
    pub report: Option<FinetuneReport>,
    /// Coded size of the update section payload in bits (0 without one).
    pub update_bits: usize,
}

fn dims_u16(shape: [usize; 4]) -> [u16; 4] {
    shape.map(|d| u16::try_from(d).expect("latent dimension fits u16"))
}

/// Codes one autoencoder's (y, z) pair into container streams.
fn encode_ae_streams(
    ae: &AutoEncoder,
    eval: &EvalAeOut,
) -> Result<(LatentStream, LatentStream), PipelineError> {
    let loc = ae.prior_loc.to_vec();
    let log_scale = ae.prior_log_scale.to_vec();
    let z_tb = z_tail_bound(&log_scale);
    let z_tables = z_escape_tables(&loc, &log_scale, eval.codes.z_shape, z_tb);
    let z_centered = center_z_symbols(&eval.codes.z, &loc, eval.codes.z_shape);
    let z_payload = encode_latents_with_escape(&z_centered, &z_tables, z_tb)?;

    let y_tb = y_tail_bound(&eval.sigma);
    let y_tables = y_escape_tables(&eval.mu, &eval.sigma, y_tb);
    let y_centered = center_y_symbols(&eval.codes.y, &eval.mu);
    let y_payload = encode_latents_with_escape(&y_centered, &y_tables, y_tb)?;

    Ok((
        LatentStream {
            dims: dims_u16(eval.codes.y_shape),
            tail_bound: u16::try_from(y_tb).expect("tail bound fits u16"),
            payload: y_payload,
        },
        LatentStream {
            dims: dims_u16(eval.codes.z_shape),
            tail_bound: u16::try_from(z_tb).expect("tail bound fits u16"),
            payload: z_payload,
        },
    ))
}

/// Inverse of [`encode_ae_streams`]: hard symbols from container streams.
fn decode_ae_streams(
    ae: &AutoEncoder,
    y_stream: &LatentStream,
    z_stream: &LatentStream,
) -> Result<LatentCodes, PipelineError> {
    let loc = ae.prior_loc.to_vec();
    let log_scale = ae.prior_log_scale.to_vec();
    let z_shape = z_stream.shape();
    let z_tb = z_stream.tail_bound as i64;
    let z_tables = z_escape_tables(&loc, &log_scale, z_shape, z_tb);
    let z_centered = decode_latents_with_escape(&z_stream.payload, &z_tables, z_tb)?;
    let z = uncenter_z_symbols(&z_centered, &loc, z_shape);

    let y_shape = y_stream.shape();
    let partial = LatentCodes { y: Vec::new(), y_shape, z, z_shape };
    let (mu, sigma) = decode_conditional(ae, &partial)?;
    let mu = mu.to_vec();
    let sigma = sigma.to_vec();
    let y_tb = y_stream.tail_bound as i64;
    let y_tables = y_escape_tables(&mu, &sigma, y_tb);
    let y_centered = decode_latents_with_escape(&y_stream.payload, &y_tables, y_tb)?;
    let y = uncenter_y_symbols(&y_centered, &mu);

    Ok(LatentCodes { y, y_shape, z: partial.z, z_shape })
}

/// Compresses `frames` with the named mode. Finetuning modes mutate the
/// model's sender parameters in place; the receiver side of `model` is left
/// untouched (updates travel as coded symbols).
pub fn encode_clip(
    model: &SsfModel,
    frames: &[Tensor],
    settings: &CodecSettings,
    mode: &str,
    finetune: &FinetuneConfig,
) -> Result<EncodeOutcome, PipelineError> {
    assert!(!frames.is_empty());
    let settings = settings.rounded_through_f32();
    let strategy =
        find_strategy(mode).ok_or_else(|| PipelineError::UnknownMode(mode.to_string()))?;
    let [_, _, height, width] = frames[0].shape();
    let padded: Vec<Tensor> =
        frames.iter().map(|f| pad_to_multiple(f, TOTAL_DOWNSAMPLE)).collect();

    let prior = settings.prior();
    let grid = settings.grid();
    let prepared = strategy.prepare(model, &padded, &prior, &grid, finetune)?;

    let (coding_model, update, update_bits) = match &prepared.update_symbols {
        Some(symbols) => {
            let table = spike_slab_bin_pmf(&grid, &prior);
            let k_max = grid.max_symbol();
            let shifted: Vec<usize> = symbols.iter().map(|&k| (k + k_max) as usize).collect();
            let payload = range_encode(&shifted, &table)?;
            let bits = payload.len() * 8;
            let section = UpdateSection {
                sigma: settings.sigma as f32,
                s: settings.s as f32,
                alpha: settings.alpha as f32,
                t: settings.t as f32,
                eps_exponent: settings.eps_exponent,
                param_count: symbols.len() as u32,
                payload,
            };
            (apply_quantized_updates(model, symbols, &grid), Some(section), bits)
        }
        None => (model.map_params(&mut |_, t| t.clone()), None, 0),
    };

    let plan = gop_plan(padded.len(), settings.gop_size);
    let mut sections = Vec::with_capacity(padded.len());
    let mut recon: Vec<Tensor> = Vec::with_capacity(padded.len());
    let mut prev: Option<Tensor> = None;
    for entry in &plan.entries {
        let frame = &padded[entry.index];
        match entry.kind {
            FrameKind::Intra => {
                let out = iframe_eval(&coding_model, frame)?;
                let (y, z) = encode_ae_streams(&coding_model.iframe, &out.ae)?;
                sections.push(FrameSection { is_pframe: false, streams: vec![y, z] });
                prev = Some(out.recon);
            }
            FrameKind::Predicted => {
                let out = pframe_eval(&coding_model, prev.as_ref().unwrap(), frame)?;
                let (fy, fz) = encode_ae_streams(&coding_model.flow, &out.flow)?;
                let (ry, rz) = encode_ae_streams(&coding_model.residual, &out.residual)?;
                sections.push(FrameSection { is_pframe: true, streams: vec![fy, fz, ry, rz] });
                prev = Some(out.recon);
            }
        }
        recon.push(crop_frame(prev.as_ref().unwrap(), width, height));
    }

    let cfg = &model.config;
    let header = BitstreamHeader {
        preset_id: settings.preset_id,
        channels: [
            cfg.codec_channels as u16,
            cfg.hypercodec_channels as u16,
            cfg.latent_channels as u16,
            cfg.hyperlatent_channels as u16,
        ],
        width: width as u16,
        height: height as u16,
        frame_count: padded.len() as u32,
        gop_size: settings.gop_size as u16,
        beta: settings.beta as f32,
        has_update: update.is_some(),
    };
    let bytes = write_bitstream(&header, update.as_ref(), &sections);
    Ok(EncodeOutcome { bytes, recon, report: prepared.report, update_bits })
}

/// Serializes every model parameter into the out-of-band weights format.
pub fn model_to_weights(model: &SsfModel, preset_id: u8) -> Vec<u8> {
    crate::bitstream::serialize_weights(preset_id, &model.all_params().flatten())
}

/// Rebuilds a model from a weights file; the preset byte selects the
/// architecture.
pub fn model_from_weights(bytes: &[u8]) -> Result<SsfModel, PipelineError> {
    let (preset_id, values) = crate::bitstream::deserialize_weights(bytes)?;
    let name = ArchConfig::preset_name(preset_id).ok_or_else(|| {
        PipelineError::Bitstream(BitstreamError::BadField(format!(
            "unknown architecture preset id {preset_id}"
        )))
    })?;
    let config = ArchConfig::preset(name).unwrap();
    let model = crate::models::build_model(config, 0);
    let params = model.all_params();
    if params.total_len() != values.len() {
        return Err(PipelineError::Bitstream(BitstreamError::BadField(format!(
            "weights file holds {} values but preset {name} needs {}",
            values.len(),
            params.total_len()
        ))));
    }
    let mut off = 0usize;
    for (_, t) in params.iter() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    }
    Ok(model)
}

pub struct DecodeOutcome {
    pub frames: Vec<Tensor>,
    pub header: BitstreamHeader,
    /// Wallclock spent decoding and applying the receiver update.
    pub update_seconds: f64,
    pub update_param_count: usize,
}

/// Decompresses a stream against the shared global model.
pub fn decode_clip(model: &SsfModel, bytes: &[u8]) -> Result<DecodeOutcome, PipelineError> {
    let stream = read_bitstream(bytes)?;
    decode_parsed(model, &stream)
}

pub fn decode_parsed(model: &SsfModel, stream: &Bitstream) -> Result<DecodeOutcome, PipelineError> {
    let header = &stream.header;
    if header.arch() != model.config {
        return Err(PipelineError::ArchMismatch {
            stream: header.arch(),
            model: model.config,
        });
    }
    let started = Instant::now();
    let (coding_model, update_param_count) = match &stream.update {
        Some(u) => {
            let prior = SpikeSlabPrior::new(u.sigma as f64, u.s as f64, u.alpha as f64);
            let grid = build_update_grid(&prior, u.t as f64, 2f64.powi(-(u.eps_exponent as i32)));
            let table = spike_slab_bin_pmf(&grid, &prior);
            let shifted = range_decode(&u.payload, u.param_count as usize, &table)?;
            let k_max = grid.max_symbol();
            let symbols: Vec<i64> = shifted.iter().map(|&s| s as i64 - k_max).collect();
            (apply_quantized_updates(model, &symbols, &grid), symbols.len())
        }
        None => (model.map_params(&mut |_, t| t.clone()), 0),
    };
    let update_seconds = started.elapsed().as_secs_f64();

    let mut frames = Vec::with_capacity(stream.frames.len());
    let mut prev: Option<Tensor> = None;
    for section in &stream.frames {
        let recon = if section.is_pframe {
            let flow = decode_ae_streams(&coding_model.flow, &section.streams[0], &section.streams[1])?;
            let residual =
                decode_ae_streams(&coding_model.residual, &section.streams[2], &section.streams[3])?;
            decode_pframe(&coding_model, prev.as_ref().unwrap(), &flow, &residual)?
        } else {
            let codes =
                decode_ae_streams(&coding_model.iframe, &section.streams[0], &section.streams[1])?;
            decode_iframe(&coding_model, &codes)?
        };
        frames.push(crop_frame(&recon, header.width as usize, header.height as usize));
        prev = Some(recon);
    }
    Ok(DecodeOutcome {
        frames,
        header: header.clone(),
        update_seconds,
        update_param_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_settings() -> CodecSettings {
        CodecSettings { gop_size: 3, ..Default::default() }
    }

    fn tiny_model(seed: u64) -> SsfModel {
        build_model(ArchConfig::new(8, 8, 12, 12), seed)
    }

    fn clip(frames: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(0.2..0.8)).collect();
        (0..frames)
            .map(|_| {
                for v in base.iter_mut() {
                    *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                }
                Tensor::new([1, 3, h, w], base.clone())
            })
            .collect()
    }

    #[test]
    fn global_roundtrip_is_bit_exact() {
        let model = tiny_model(10);
        let frames = clip(4, 64, 64, 90);
        let settings = tiny_settings();
        let out =
            encode_clip(&model, &frames, &settings, "global", &FinetuneConfig::default()).unwrap();
        assert!(out.report.is_none());
        assert_eq!(out.update_bits, 0);
        let dec = decode_clip(&model, &out.bytes).unwrap();
        assert_eq!(dec.frames.len(), 4);
        assert_eq!(dec.update_param_count, 0);
        for (a, b) in out.recon.iter().zip(dec.frames.iter()) {
            assert_eq!(a.to_vec(), b.to_vec(), "encoder and decoder recon diverge");
        }
        // Frame kinds follow the GoP plan: I P P I.
        let parsed = read_bitstream(&out.bytes).unwrap();
        let kinds: Vec<bool> = parsed.frames.iter().map(|f| f.is_pframe).collect();
        assert_eq!(kinds, vec![false, true, true, false]);
    }

    #[test]
    fn insta_roundtrip_carries_update_and_stays_bit_exact() {
        let model = tiny_model(11);
        let frames = clip(3, 64, 64, 91);
        let settings = tiny_settings();
        let ft = FinetuneConfig { max_steps: 3, checkpoint_every: 3, lr: 1e-4, ..Default::default() };
        let out = encode_clip(&model, &frames, &settings, "insta", &ft).unwrap();
        assert!(out.report.is_some());
        assert!(out.update_bits > 0);
        let parsed = read_bitstream(&out.bytes).unwrap();
        assert!(parsed.header.has_update);
        let dec = decode_clip(&model, &out.bytes).unwrap();
        assert_eq!(dec.update_param_count, model.receiver_params().total_len());
        for (a, b) in out.recon.iter().zip(dec.frames.iter()) {
            assert_eq!(a.to_vec(), b.to_vec(), "insta recon diverges after update transport");
        }
    }

    #[test]
    fn encoder_only_mode_sends_no_update() {
        let model = tiny_model(12);
        let frames = clip(3, 64, 64, 92);
        let ft = FinetuneConfig { max_steps: 2, checkpoint_every: 2, ..Default::default() };
        let out = encode_clip(&model, &frames, &tiny_settings(), "encoder-only", &ft).unwrap();
        assert!(out.report.is_some());
        let parsed = read_bitstream(&out.bytes).unwrap();
        assert!(!parsed.header.has_update);
        let dec = decode_clip(&model, &out.bytes).unwrap();
        for (a, b) in out.recon.iter().zip(dec.frames.iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn unaligned_frames_are_padded_and_cropped() {
        let model = tiny_model(13);
        let frames = clip(2, 60, 100, 93);
        let out =
            encode_clip(&model, &frames, &tiny_settings(), "global", &FinetuneConfig::default())
                .unwrap();
        let dec = decode_clip(&model, &out.bytes).unwrap();
        assert_eq!((dec.header.width, dec.header.height), (100, 60));
        for f in &dec.frames {
            assert_eq!(f.shape(), [1, 3, 60, 100]);
        }
        for (a, b) in out.recon.iter().zip(dec.frames.iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn unknown_mode_is_rejected() {
        let model = tiny_model(14);
        let frames = clip(1, 64, 64, 94);
        let err = encode_clip(&model, &frames, &tiny_settings(), "vqvae", &FinetuneConfig::default())
            .unwrap_err();
        assert!(matches!(err, PipelineError::UnknownMode(_)));
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let model = tiny_model(15);
        let frames = clip(1, 64, 64, 95);
        let out =
            encode_clip(&model, &frames, &tiny_settings(), "global", &FinetuneConfig::default())
                .unwrap();
        let other = build_model(ArchConfig::new(8, 8, 16, 12), 15);
        assert!(matches!(
            decode_clip(&other, &out.bytes),
            Err(PipelineError::ArchMismatch { .. })
        ));
    }

    #[test]
    fn weights_roundtrip_preserves_model() {
        let config = ArchConfig::preset("ssf-lite").unwrap();
        let model = build_model(config, 50);
        let bytes = model_to_weights(&model, ArchConfig::preset_id("ssf-lite").unwrap());
        let back = model_from_weights(&bytes).unwrap();
        assert_eq!(back.config, config);
        assert_eq!(back.all_params().flatten(), model.all_params().flatten());
        // Truncated values are rejected by length, garbage preset by id.
        let mut bad = bytes.clone();
        bad[5] = 99;
        assert!(model_from_weights(&bad).is_err());
    }

    #[test]
    fn infinite_gop_has_single_iframe() {
        let model = tiny_model(16);
        let frames = clip(5, 64, 64, 96);
        let settings = CodecSettings { gop_size: 0, ..Default::default() };
        let out =
            encode_clip(&model, &frames, &settings, "global", &FinetuneConfig::default()).unwrap();
        let parsed = read_bitstream(&out.bytes).unwrap();
        let intra = parsed.frames.iter().filter(|f| !f.is_pframe).count();
        assert_eq!(intra, 1);
        assert!(!parsed.frames[0].is_pframe);
        let dec = decode_clip(&model, &out.bytes).unwrap();
        for (a, b) in out.recon.iter().zip(dec.frames.iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }
}
