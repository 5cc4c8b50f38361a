//! `ivc`: train, encode, decode, and evaluate the instance-adaptive video
//! codec from the command line.
//!
//! Exit codes: 0 success, 2 input error, 3 stream corruption, 4
//! evaluation-domain error.

mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use ivc_core::bitstream::{
    ingest_video, read_bitstream, write_ppm, BitstreamError, VideoFormat,
};
use ivc_core::insta::train_global;
use ivc_core::metrics::{
    bd_rate, bpp, psnr_rgb, rate_report, rd_curve_from_csv, svg_rate_bars, svg_rd_chart,
    MetricsError, RDPoint,
};
use ivc_core::models::{build_model, ArchConfig};
use ivc_core::pipeline::{
    decode_clip, encode_clip, model_from_weights, model_to_weights, PipelineError,
};
use ivc_core::tensor::Tensor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_INPUT: u8 = 2;
const EXIT_CORRUPT: u8 = 3;
const EXIT_EVAL: u8 = 4;

struct CmdError {
    code: u8,
    msg: String,
}

impl CmdError {
    fn input(msg: impl Into<String>) -> CmdError {
        CmdError { code: EXIT_INPUT, msg: msg.into() }
    }
}

type CmdResult<T> = Result<T, CmdError>;

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CmdError {
    CmdError::input(format!("cannot {what} {}: {e}", path.display()))
}

fn stream_err(e: BitstreamError) -> CmdError {
    match e {
        BitstreamError::Io(_) => CmdError { code: EXIT_INPUT, msg: e.to_string() },
        _ => CmdError { code: EXIT_CORRUPT, msg: e.to_string() },
    }
}

fn pipeline_err(e: PipelineError) -> CmdError {
    match e {
        PipelineError::UnknownMode(_) | PipelineError::ArchMismatch { .. } => {
            CmdError { code: EXIT_INPUT, msg: e.to_string() }
        }
        PipelineError::Bitstream(b) => stream_err(b),
        _ => CmdError { code: EXIT_CORRUPT, msg: e.to_string() },
    }
}

fn metrics_err(e: MetricsError) -> CmdError {
    match e {
        MetricsError::BadCsv(_) => CmdError { code: EXIT_INPUT, msg: e.to_string() },
        _ => CmdError { code: EXIT_EVAL, msg: e.to_string() },
    }
}

#[derive(Parser)]
#[command(name = "ivc", about = "Instance-adaptive neural video codec", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a global model on a directory of clips and write a weights file.
    TrainGlobal {
        /// Directory holding .y4m files and/or PPM frame subdirectories.
        #[arg(long)]
        clips: PathBuf,
        /// Output .wts weights file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compress a clip to an .insa stream.
    Encode {
        #[arg(long)]
        weights: PathBuf,
        /// Input clip: .y4m file or PPM frame directory.
        #[arg(long)]
        input: PathBuf,
        /// Output .insa stream.
        #[arg(long)]
        output: PathBuf,
        /// Encode mode: insta, encoder-only, or global.
        #[arg(long, default_value = "insta")]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Decompress an .insa stream into PPM frames.
    Decode {
        #[arg(long)]
        weights: PathBuf,
        /// Input .insa stream.
        #[arg(long)]
        input: PathBuf,
        /// Directory for the decoded PPM frames.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Measure bpp and PSNR for a clip, optionally encoding it first.
    Eval {
        /// The pristine clip (.y4m or PPM directory).
        #[arg(long)]
        original: PathBuf,
        /// Existing .insa stream to decode and score. Without it the clip is
        /// encoded in-process (requires --weights).
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Score already-decoded PPM frames (requires --stream for the bit
        /// count).
        #[arg(long)]
        decoded_dir: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "global")]
        mode: String,
        /// Keep every k-th frame of the original before encoding/comparison.
        #[arg(long, default_value_t = 1)]
        subsample: usize,
        /// Intra period: a number, or "inf" for a single I-frame.
        #[arg(long)]
        gop: Option<String>,
        /// Where to store the stream produced by an in-process encode.
        #[arg(long)]
        stream_out: Option<PathBuf>,
        /// Append the measured point to this RD CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "ivc")]
        label: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// BD-rate of a test RD curve against a reference curve.
    Bdrate {
        /// Reference curve CSV (label,bpp,psnr rows).
        #[arg(long)]
        reference: PathBuf,
        /// Test curve CSV.
        #[arg(long)]
        test: PathBuf,
    },
    /// Emit SVG charts: RD curves and, optionally, rate-composition bars.
    Plot {
        /// RD curve CSVs, one curve per file.
        #[arg(long, num_args = 1..)]
        curves: Vec<PathBuf>,
        /// Output SVG for the RD chart.
        #[arg(long)]
        out: PathBuf,
        /// Also render this stream's rate composition.
        #[arg(long)]
        rate_bars: Option<PathBuf>,
        /// Output SVG for the rate bars (default: <out>.bars.svg).
        #[arg(long)]
        bars_out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> CmdResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err("read config", p, e))?;
            RunConfig::parse(&text)
                .map_err(|e| CmdError::input(format!("{}: {e}", p.display())))
        }
    }
}

fn load_clip(path: &Path) -> CmdResult<Vec<Tensor>> {
    let format = if path.is_dir() {
        VideoFormat::FrameDir
    } else if path.extension().map(|e| e == "y4m").unwrap_or(false) {
        VideoFormat::Y4m
    } else {
        return Err(CmdError::input(format!(
            "{}: expected a .y4m file or a directory of PPM frames",
            path.display()
        )));
    };
    let clip = ingest_video(path, format)
        .map_err(|e| CmdError::input(format!("{}: {e}", path.display())))?;
    Ok(clip.frames)
}

fn load_model(path: &Path) -> CmdResult<ivc_core::models::SsfModel> {
    let bytes = std::fs::read(path).map_err(|e| io_err("read weights", path, e))?;
    model_from_weights(&bytes).map_err(pipeline_err)
}

fn subsample_frames(frames: Vec<Tensor>, k: usize) -> Vec<Tensor> {
    frames.into_iter().step_by(k.max(1)).collect()
}

fn parse_gop(gop: &str) -> CmdResult<usize> {
    if gop == "inf" {
        Ok(0)
    } else {
        gop.parse().map_err(|_| CmdError::input(format!("bad --gop value {gop:?}")))
    }
}

fn print_rate_report(bytes: &[u8]) -> CmdResult<()> {
    let stream = read_bitstream(bytes).map_err(stream_err)?;
    let report = rate_report(&stream);
    let [upd, ifr, flow, res] = report.fractions();
    println!(
        "rate composition: model_updates {:.2}% | iframe {:.2}% | pframe_flow {:.2}% | pframe_residual {:.2}%",
        100.0 * upd,
        100.0 * ifr,
        100.0 * flow,
        100.0 * res
    );
    Ok(())
}

fn append_rd_point(csv: &Path, label: &str, point: RDPoint) -> CmdResult<()> {
    let mut text = match std::fs::read_to_string(csv) {
        Ok(t) => t,
        Err(_) => "label,bpp,psnr\n".to_string(),
    };
    text.push_str(&format!("{label},{},{}\n", point.bpp, point.psnr));
    std::fs::write(csv, text).map_err(|e| io_err("write", csv, e))
}

fn cmd_train_global(clips_dir: &Path, out: &Path, config: &Option<PathBuf>) -> CmdResult<()> {
    let cfg = load_config(config)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(clips_dir)
        .map_err(|e| io_err("read clip directory", clips_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() || p.extension().map(|e| e == "y4m").unwrap_or(false))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(CmdError::input(format!(
            "no clips found in {} (want .y4m files or PPM subdirectories)",
            clips_dir.display()
        )));
    }
    let mut clips = Vec::with_capacity(entries.len());
    for path in &entries {
        let frames = load_clip(path)?;
        let padded: Vec<Tensor> = frames
            .iter()
            .map(|f| ivc_core::bitstream::pad_to_multiple(f, ivc_core::models::TOTAL_DOWNSAMPLE))
            .collect();
        clips.push(padded);
    }
    let arch = ArchConfig::preset(&cfg.arch).unwrap();
    let model = build_model(arch, cfg.seed);
    let (initial, final_loss) =
        train_global(&model, &clips, &cfg.global_train()).map_err(|e| CmdError {
            code: EXIT_CORRUPT,
            msg: format!("training failed: {e}"),
        })?;
    let preset_id = ArchConfig::preset_id(&cfg.arch).unwrap();
    std::fs::write(out, model_to_weights(&model, preset_id))
        .map_err(|e| io_err("write", out, e))?;
    println!(
        "trained {} for {} steps on {} clips: rd_loss {initial:.6} -> {final_loss:.6}",
        cfg.arch,
        cfg.train_steps,
        clips.len()
    );
    println!("weights written to {}", out.display());
    Ok(())
}

fn cmd_encode(
    weights: &Path,
    input: &Path,
    output: &Path,
    mode: &str,
    config: &Option<PathBuf>,
) -> CmdResult<()> {
    let cfg = load_config(config)?;
    let model = load_model(weights)?;
    let frames = load_clip(input)?;
    let preset_id = ArchConfig::preset_id(&cfg.arch).unwrap();
    let settings = cfg.settings(preset_id);
    if mode != "global" && frames.len() < 2 {
        return Err(CmdError::input(format!(
            "mode {mode:?} finetunes over P-frames and needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let outcome = encode_clip(&model, &frames, &settings, mode, &cfg.finetune(frames.len()))
        .map_err(pipeline_err)?;
    std::fs::write(output, &outcome.bytes).map_err(|e| io_err("write", output, e))?;
    let [_, _, h, w] = frames[0].shape();
    let v = bpp(8.0 * outcome.bytes.len() as f64, frames.len(), w, h);
    println!("encoded {} frames at {v:.5} bpp ({} bytes)", frames.len(), outcome.bytes.len());
    print_rate_report(&outcome.bytes)?;
    if let Some(report) = &outcome.report {
        let csv_path = output.with_extension("finetune.csv");
        std::fs::write(&csv_path, report.to_csv()).map_err(|e| io_err("write", &csv_path, e))?;
        println!("finetune log written to {}", csv_path.display());
        if report.diverged {
            println!("warning: finetuning diverged; the best earlier checkpoint was used");
        }
    }
    Ok(())
}

fn cmd_decode(weights: &Path, input: &Path, out_dir: &Path) -> CmdResult<()> {
    let model = load_model(weights)?;
    let bytes = std::fs::read(input).map_err(|e| io_err("read stream", input, e))?;
    let outcome = decode_clip(&model, &bytes).map_err(pipeline_err)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err("create", out_dir, e))?;
    for (i, frame) in outcome.frames.iter().enumerate() {
        let path = out_dir.join(format!("frame_{i:04}.ppm"));
        std::fs::write(&path, write_ppm(frame)).map_err(|e| io_err("write", &path, e))?;
    }
    println!(
        "decoded {} frames ({} update parameters applied in {:.3} s)",
        outcome.frames.len(),
        outcome.update_param_count,
        outcome.update_seconds
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    original: &Path,
    stream: &Option<PathBuf>,
    decoded_dir: &Option<PathBuf>,
    weights: &Option<PathBuf>,
    mode: &str,
    subsample: usize,
    gop: &Option<String>,
    stream_out: &Option<PathBuf>,
    csv: &Option<PathBuf>,
    label: &str,
    config: &Option<PathBuf>,
) -> CmdResult<()> {
    let mut cfg = load_config(config)?;
    if subsample > 1 {
        cfg.temporal_subsample = subsample;
    }
    if let Some(g) = gop {
        cfg.gop_size = parse_gop(g)?;
    }
    let frames = subsample_frames(load_clip(original)?, cfg.temporal_subsample);
    if frames.is_empty() {
        return Err(CmdError::input("no frames left after subsampling".to_string()));
    }
    let [_, _, h, w] = frames[0].shape();

    let (recon, total_bits) = match (stream, decoded_dir) {
        (Some(stream_path), Some(dir)) => {
            let bytes = std::fs::read(stream_path).map_err(|e| io_err("read", stream_path, e))?;
            read_bitstream(&bytes).map_err(stream_err)?;
            (load_clip(dir)?, 8.0 * bytes.len() as f64)
        }
        (Some(stream_path), None) => {
            let weights = weights.as_ref().ok_or_else(|| {
                CmdError::input("--stream without --decoded-dir needs --weights to decode")
            })?;
            let model = load_model(weights)?;
            let bytes = std::fs::read(stream_path).map_err(|e| io_err("read", stream_path, e))?;
            let outcome = decode_clip(&model, &bytes).map_err(pipeline_err)?;
            (outcome.frames, 8.0 * bytes.len() as f64)
        }
        (None, Some(_)) => {
            return Err(CmdError::input(
                "--decoded-dir needs --stream for the bit count",
            ))
        }
        (None, None) => {
            let weights = weights
                .as_ref()
                .ok_or_else(|| CmdError::input("in-process eval encode needs --weights"))?;
            let model = load_model(weights)?;
            let preset_id = ArchConfig::preset_id(&cfg.arch).unwrap();
            let outcome = encode_clip(
                &model,
                &frames,
                &cfg.settings(preset_id),
                mode,
                &cfg.finetune(frames.len()),
            )
            .map_err(pipeline_err)?;
            if let Some(out) = stream_out {
                std::fs::write(out, &outcome.bytes).map_err(|e| io_err("write", out, e))?;
            }
            (outcome.recon, 8.0 * outcome.bytes.len() as f64)
        }
    };
    if recon.len() != frames.len() {
        return Err(CmdError {
            code: EXIT_EVAL,
            msg: format!(
                "reconstruction has {} frames but the (subsampled) original has {}",
                recon.len(),
                frames.len()
            ),
        });
    }
    let rate = bpp(total_bits, frames.len(), w, h);
    let quality = psnr_rgb(&frames, &recon);
    println!("frames={} bpp={rate:.6} psnr={quality:.4}", frames.len());
    if let Some(csv_path) = csv {
        if !quality.is_finite() {
            return Err(CmdError {
                code: EXIT_EVAL,
                msg: "cannot record an RD point with infinite PSNR".to_string(),
            });
        }
        append_rd_point(csv_path, label, RDPoint { bpp: rate, psnr: quality })?;
        println!("appended RD point to {}", csv_path.display());
    }
    Ok(())
}

fn cmd_bdrate(reference: &Path, test: &Path) -> CmdResult<()> {
    let load = |p: &Path| -> CmdResult<_> {
        let text = std::fs::read_to_string(p).map_err(|e| io_err("read", p, e))?;
        rd_curve_from_csv(&text).map_err(|e| CmdError::input(format!("{}: {e}", p.display())))
    };
    let ref_curve = load(reference)?;
    let test_curve = load(test)?;
    let bd = bd_rate(&ref_curve, &test_curve).map_err(metrics_err)?;
    println!("BD-rate of {:?} vs {:?}: {bd:.4}%", test_curve.label, ref_curve.label);
    Ok(())
}

fn cmd_plot(
    curves: &[PathBuf],
    out: &Path,
    rate_bars: &Option<PathBuf>,
    bars_out: &Option<PathBuf>,
) -> CmdResult<()> {
    if curves.is_empty() {
        return Err(CmdError::input("--curves needs at least one CSV"));
    }
    let mut parsed = Vec::with_capacity(curves.len());
    for p in curves {
        let text = std::fs::read_to_string(p).map_err(|e| io_err("read", p, e))?;
        parsed
            .push(rd_curve_from_csv(&text).map_err(|e| CmdError::input(format!("{}: {e}", p.display())))?);
    }
    std::fs::write(out, svg_rd_chart(&parsed)).map_err(|e| io_err("write", out, e))?;
    println!("RD chart written to {}", out.display());
    if let Some(stream_path) = rate_bars {
        let bytes = std::fs::read(stream_path).map_err(|e| io_err("read", stream_path, e))?;
        let stream = read_bitstream(&bytes).map_err(stream_err)?;
        let bars_path = bars_out
            .clone()
            .unwrap_or_else(|| out.with_extension("bars.svg"));
        std::fs::write(&bars_path, svg_rate_bars(&rate_report(&stream)))
            .map_err(|e| io_err("write", &bars_path, e))?;
        println!("rate bars written to {}", bars_path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult<()> {
    match &cli.cmd {
        Cmd::TrainGlobal { clips, out, config } => cmd_train_global(clips, out, config),
        Cmd::Encode { weights, input, output, mode, config } => {
            cmd_encode(weights, input, output, mode, config)
        }
        Cmd::Decode { weights, input, out_dir } => cmd_decode(weights, input, out_dir),
        Cmd::Eval {
            original,
            stream,
            decoded_dir,
            weights,
            mode,
            subsample,
            gop,
            stream_out,
            csv,
            label,
            config,
        } => cmd_eval(
            original, stream, decoded_dir, weights, mode, *subsample, gop, stream_out, csv,
            label, config,
        ),
        Cmd::Bdrate { reference, test } => cmd_bdrate(reference, test),
        Cmd::Plot { curves, out, rate_bars, bars_out } => {
            cmd_plot(curves, out, rate_bars, bars_out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
