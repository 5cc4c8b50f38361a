//! Bit-exact container format for coded clips, the out-of-band weights file,
//! raw video ingestion (Y4M and PPM frame directories), and frame padding.
//!
//! Stream layout (all integers little-endian):
//!
//! ```text
//! header:   "INSA" | version u8 | preset u8 | 4x channel u16 | width u16 |
//!           height u16 | frame_count u32 | gop_size u16 | beta f32 | flags u8
//! update?:  sigma f32 | s f32 | alpha f32 | t f32 | eps_exp u8 |
//!           param_count u32 | payload_len u32 | payload | payload crc32
//! frame*:   kind u8 | stream_count u8 | per stream:
//!           dims 4x u16 | tail_bound u16 | payload_len u32 | payload
//! trailer:  crc32 over every preceding byte
//! ```

use crate::models::ArchConfig;
use crate::tensor::Tensor;
use std::fmt;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"INSA";
pub const VERSION: u8 = 1;
pub const WEIGHTS_MAGIC: [u8; 4] = *b"INSW";
pub const WEIGHTS_VERSION: u8 = 1;
/// Fixed byte length of [`BitstreamHeader`] on disk.
pub const HEADER_LEN: usize = 29;

#[derive(Debug)]
pub enum BitstreamError {
    /// Magic bytes are wrong: not an INSA stream.
    NotInsa,
    UnsupportedVersion(u8),
    /// CRC over `what` failed.
    CrcMismatch { what: &'static str },
    /// Ran out of bytes at the given offset.
    Truncated(usize),
    BadField(String),
    Io(std::io::Error),
}

impl fmt::Display for BitstreamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitstreamError::NotInsa => write!(f, "not an INSA stream"),
            BitstreamError::UnsupportedVersion(v) => {
                write!(f, "unsupported stream version {v} (reader supports {VERSION})")
            }
            BitstreamError::CrcMismatch { what } => write!(f, "CRC mismatch over {what}"),
            BitstreamError::Truncated(pos) => write!(f, "stream truncated at byte {pos}"),
            BitstreamError::BadField(msg) => write!(f, "bad field: {msg}"),
            BitstreamError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for BitstreamError {}

impl From<std::io::Error> for BitstreamError {
    fn from(e: std::io::Error) -> Self {
        BitstreamError::Io(e)
    }
}

// ---------------------------------------------------------------------------
// CRC32 (IEEE 802.3 polynomial, reflected), table-driven.
// ---------------------------------------------------------------------------

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---------------------------------------------------------------------------
// Byte-level reader/writer helpers.
// ---------------------------------------------------------------------------

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> ByteReader<'a> {
        ByteReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], BitstreamError> {
        if self.pos + n > self.bytes.len() {
            return Err(BitstreamError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BitstreamError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BitstreamError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BitstreamError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, BitstreamError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// Container types.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BitstreamHeader {
    pub preset_id: u8,
    pub channels: [u16; 4],
    pub width: u16,
    pub height: u16,
    pub frame_count: u32,
    /// 0 means an infinite group of pictures (single leading I-frame).
    pub gop_size: u16,
    /// Informational: the rate-distortion tradeoff the stream was encoded at.
    pub beta: f32,
    pub has_update: bool,
}

impl BitstreamHeader {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig::new(
            self.channels[0] as usize,
            self.channels[1] as usize,
            self.channels[2] as usize,
            self.channels[3] as usize,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateSection {
    pub sigma: f32,
    pub s: f32,
    pub alpha: f32,
    pub t: f32,
    /// Tail mass is `2^-eps_exponent`.
    pub eps_exponent: u8,
    pub param_count: u32,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentStream {
    pub dims: [u16; 4],
    pub tail_bound: u16,
    pub payload: Vec<u8>,
}

impl LatentStream {
    pub fn shape(&self) -> [usize; 4] {
        [
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.dims[2] as usize,
            self.dims[3] as usize,
        ]
    }
}

/// Streams appear in a fixed order: I-frames carry (y, z); P-frames carry
/// (flow y, flow z, residual y, residual z).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSection {
    pub is_pframe: bool,
    pub streams: Vec<LatentStream>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub update: Option<UpdateSection>,
    pub frames: Vec<FrameSection>,
}

pub fn write_bitstream(
    header: &BitstreamHeader,
    update: Option<&UpdateSection>,
    frames: &[FrameSection],
) -> Vec<u8> {
    assert_eq!(header.has_update, update.is_some(), "header flag vs update section");
    assert_eq!(header.frame_count as usize, frames.len(), "header frame count");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(header.preset_id);
    for c in header.channels {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&header.width.to_le_bytes());
    out.extend_from_slice(&header.height.to_le_bytes());
    out.extend_from_slice(&header.frame_count.to_le_bytes());
    out.extend_from_slice(&header.gop_size.to_le_bytes());
    out.extend_from_slice(&header.beta.to_le_bytes());
    out.push(header.has_update as u8);
    debug_assert_eq!(out.len(), HEADER_LEN);
    if let Some(u) = update {
        out.extend_from_slice(&u.sigma.to_le_bytes());
        out.extend_from_slice(&u.s.to_le_bytes());
        out.extend_from_slice(&u.alpha.to_le_bytes());
        out.extend_from_slice(&u.t.to_le_bytes());
        out.push(u.eps_exponent);
        out.extend_from_slice(&u.param_count.to_le_bytes());
        out.extend_from_slice(&(u.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&u.payload);
        out.extend_from_slice(&crc32(&u.payload).to_le_bytes());
    }
    for frame in frames {
        out.push(frame.is_pframe as u8);
        out.push(frame.streams.len() as u8);
        for s in &frame.streams {
            for d in s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&s.tail_bound.to_le_bytes());
            out.extend_from_slice(&(s.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_bitstream(bytes: &[u8]) -> Result<Bitstream, BitstreamError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(BitstreamError::Truncated(bytes.len()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if bytes[..4] != MAGIC {
        return Err(BitstreamError::NotInsa);
    }
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32(body) != stored {
        return Err(BitstreamError::CrcMismatch { what: "stream" });
    }
    let mut r = ByteReader::new(body);
    r.take(4)?; // magic, already checked
    let version = r.u8()?;
    if version != VERSION {
        return Err(BitstreamError::UnsupportedVersion(version));
    }
    let preset_id = r.u8()?;
    let mut channels = [0u16; 4];
    for c in channels.iter_mut() {
        *c = r.u16()?;
    }
    let width = r.u16()?;
    let height = r.u16()?;
    let frame_count = r.u32()?;
    let gop_size = r.u16()?;
    let beta = r.f32()?;
    let flags = r.u8()?;
    if width == 0 || height == 0 {
        return Err(BitstreamError::BadField("zero frame dimensions".to_string()));
    }
    let header = BitstreamHeader {
        preset_id,
        channels,
        width,
        height,
        frame_count,
        gop_size,
        beta,
        has_update: flags & 1 != 0,
    };
    let update = if header.has_update {
        let sigma = r.f32()?;
        let s = r.f32()?;
        let alpha = r.f32()?;
        let t = r.f32()?;
        let eps_exponent = r.u8()?;
        let param_count = r.u32()?;
        let payload_len = r.u32()? as usize;
        let payload = r.take(payload_len)?.to_vec();
        let payload_crc = r.u32()?;
        if crc32(&payload) != payload_crc {
            return Err(BitstreamError::CrcMismatch { what: "update payload" });
        }
        Some(UpdateSection { sigma, s, alpha, t, eps_exponent, param_count, payload })
    } else {
        None
    };
    let mut frames = Vec::with_capacity(frame_count as usize);
    for _ in 0..frame_count {
        let kind = r.u8()?;
        if kind > 1 {
            return Err(BitstreamError::BadField(format!("unknown frame kind {kind}")));
        }
        let is_pframe = kind == 1;
        let stream_count = r.u8()? as usize;
        let expected = if is_pframe { 4 } else { 2 };
        if stream_count != expected {
            return Err(BitstreamError::BadField(format!(
                "frame kind {kind} must carry {expected} latent streams, found {stream_count}"
            )));
        }
        let mut streams = Vec::with_capacity(stream_count);
        for _ in 0..stream_count {
            let mut dims = [0u16; 4];
            for d in dims.iter_mut() {
                *d = r.u16()?;
            }
            let tail_bound = r.u16()?;
            let payload_len = r.u32()? as usize;
            let payload = r.take(payload_len)?.to_vec();
            streams.push(LatentStream { dims, tail_bound, payload });
        }
        frames.push(FrameSection { is_pframe, streams });
    }
    if r.pos != body.len() {
        return Err(BitstreamError::BadField(format!(
            "{} trailing bytes after the last section",
            body.len() - r.pos
        )));
    }
    Ok(Bitstream { header, update, frames })
}

// ---------------------------------------------------------------------------
// Weights file (.wts): global model parameters, distributed out-of-band.
// ---------------------------------------------------------------------------

/// `"INSW" | version u8 | preset u8 | value_count u32 | f32 values | crc32`.
/// Values are every model parameter flattened in declaration order.
pub fn serialize_weights(preset_id: u8, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * values.len() + 4);
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    out.push(preset_id);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn deserialize_weights(bytes: &[u8]) -> Result<(u8, Vec<f32>), BitstreamError> {
    if bytes.len() < 14 {
        return Err(BitstreamError::Truncated(bytes.len()));
    }
    if bytes[..4] != WEIGHTS_MAGIC {
        return Err(BitstreamError::NotInsa);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(BitstreamError::CrcMismatch { what: "weights file" });
    }
    let mut r = ByteReader::new(body);
    r.take(4)?;
    let version = r.u8()?;
    if version != WEIGHTS_VERSION {
        return Err(BitstreamError::UnsupportedVersion(version));
    }
    let preset_id = r.u8()?;
    let count = r.u32()? as usize;
    let raw = r.take(4 * count)?;
    if r.pos != body.len() {
        return Err(BitstreamError::BadField("trailing bytes in weights file".to_string()));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((preset_id, values))
}

// ---------------------------------------------------------------------------
// Video ingestion.
// ---------------------------------------------------------------------------

/// Frames as RGB float tensors in [0, 1], shape (1, 3, h, w) each.
#[derive(Debug)]
pub struct VideoClip {
    pub frames: Vec<Tensor>,
    pub width: usize,
    pub height: usize,
    /// Source framerate as a rational (num, den); (0, 0) when unknown.
    pub framerate: (u32, u32),
}

/// BT.709 full-range YCbCr to RGB, all channels in [0, 1] with chroma
/// centered at 128/255.
fn bt709_to_rgb(y: f32, cb: f32, cr: f32) -> (f32, f32, f32) {
    const KR: f32 = 0.2126;
    const KB: f32 = 0.0722;
    const KG: f32 = 1.0 - KR - KB;
    let pb = cb - 128.0 / 255.0;
    let pr = cr - 128.0 / 255.0;
    let r = y + 2.0 * (1.0 - KR) * pr;
    let b = y + 2.0 * (1.0 - KB) * pb;
    let g = (y - KR * r - KB * b) / KG;
    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, PartialEq)]
enum Chroma {
    C420,
    C444,
}

fn parse_y4m_header(line: &str) -> Result<(usize, usize, (u32, u32), Chroma), BitstreamError> {
    if !line.starts_with("YUV4MPEG2") {
        return Err(BitstreamError::BadField("missing YUV4MPEG2 signature".to_string()));
    }
    let mut width = 0usize;
    let mut height = 0usize;
    let mut rate = (0u32, 0u32);
    let mut chroma = Chroma::C420;
    for tok in line.split_whitespace().skip(1) {
        let (tag, rest) = tok.split_at(1);
        match tag {
            "W" => width = rest.parse().map_err(|_| bad_tok(tok))?,
            "H" => height = rest.parse().map_err(|_| bad_tok(tok))?,
            "F" => {
                let (n, d) = rest.split_once(':').ok_or_else(|| bad_tok(tok))?;
                rate = (
                    n.parse().map_err(|_| bad_tok(tok))?,
                    d.parse().map_err(|_| bad_tok(tok))?,
                );
            }
            "C" => {
                chroma = if rest.starts_with("420") {
                    Chroma::C420
                } else if rest.starts_with("444") {
                    Chroma::C444
                } else {
                    return Err(BitstreamError::BadField(format!(
                        "unsupported colorspace tag C{rest} (need C420 or C444)"
                    )));
                };
            }
            _ => {} // interlacing, aspect, extensions: ignored
        }
    }
    if width == 0 || height == 0 {
        return Err(BitstreamError::BadField("Y4M header missing W or H".to_string()));
    }
    Ok((width, height, rate, chroma))
}

fn bad_tok(tok: &str) -> BitstreamError {
    BitstreamError::BadField(format!("malformed Y4M header token {tok}"))
}

/// Parses a Y4M byte buffer into RGB frames.
pub fn parse_y4m(bytes: &[u8]) -> Result<VideoClip, BitstreamError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(BitstreamError::Truncated(bytes.len()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| BitstreamError::BadField("Y4M header is not UTF-8".to_string()))?;
    let (w, h, rate, chroma) = parse_y4m_header(header)?;
    let (cw, ch) = match chroma {
        Chroma::C420 => (w.div_ceil(2), h.div_ceil(2)),
        Chroma::C444 => (w, h),
    };
    let frame_bytes = w * h + 2 * cw * ch;
    let mut pos = nl + 1;
    let mut frames = Vec::new();
    while pos < bytes.len() {
        let fnl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(BitstreamError::Truncated(bytes.len()))?;
        let marker = &bytes[pos..pos + fnl];
        if !marker.starts_with(b"FRAME") {
            return Err(BitstreamError::BadField("expected FRAME marker".to_string()));
        }
        pos += fnl + 1;
        if pos + frame_bytes > bytes.len() {
            return Err(BitstreamError::Truncated(bytes.len()));
        }
        let yp = &bytes[pos..pos + w * h];
        let cbp = &bytes[pos + w * h..pos + w * h + cw * ch];
        let crp = &bytes[pos + w * h + cw * ch..pos + frame_bytes];
        pos += frame_bytes;
        let mut data = vec![0.0f32; 3 * w * h];
        for yy in 0..h {
            for xx in 0..w {
                let (cx, cy) = match chroma {
                    Chroma::C420 => (xx / 2, yy / 2),
                    Chroma::C444 => (xx, yy),
                };
                let (r, g, b) = bt709_to_rgb(
                    yp[yy * w + xx] as f32 / 255.0,
                    cbp[cy * cw + cx] as f32 / 255.0,
                    crp[cy * cw + cx] as f32 / 255.0,
                );
                data[yy * w + xx] = r;
                data[w * h + yy * w + xx] = g;
                data[2 * w * h + yy * w + xx] = b;
            }
        }
        frames.push(Tensor::new([1, 3, h, w], data));
    }
    Ok(VideoClip { frames, width: w, height: h, framerate: rate })
}

/// Parses one binary PPM (P6, maxval 255) image.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor, BitstreamError> {
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        // Skip whitespace and '#' comment lines between header fields.
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start {
            return Err(BitstreamError::Truncated(bytes.len()));
        }
        fields.push(&bytes[start..pos]);
    }
    pos += 1; // the single whitespace byte after maxval
    if fields[0] != b"P6" {
        return Err(BitstreamError::BadField("not a binary PPM (P6) image".to_string()));
    }
    let parse = |f: &[u8]| -> Result<usize, BitstreamError> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| BitstreamError::BadField("bad PPM header number".to_string()))
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if maxval != 255 {
        return Err(BitstreamError::BadField(format!("PPM maxval must be 255, got {maxval}")));
    }
    if pos + 3 * w * h > bytes.len() {
        return Err(BitstreamError::Truncated(bytes.len()));
    }
    let raw = &bytes[pos..pos + 3 * w * h];
    let mut data = vec![0.0f32; 3 * w * h];
    for p in 0..w * h {
        for c in 0..3 {
            data[c * w * h + p] = raw[3 * p + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([1, 3, h, w], data))
}

/// Serializes an RGB tensor in [0, 1] as binary PPM.
pub fn write_ppm(frame: &Tensor) -> Vec<u8> {
    let [_, c, h, w] = frame.shape();
    assert_eq!(c, 3, "PPM frames are RGB");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for p in 0..w * h {
        for ch in 0..3 {
            let v = (d[ch * w * h + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(v);
        }
    }
    out
}

pub enum VideoFormat {
    Y4m,
    FrameDir,
}

/// Loads a clip from a `.y4m` file or a directory of PPM frames in
/// lexicographic order.
pub fn ingest_video(path: &Path, format: VideoFormat) -> Result<VideoClip, BitstreamError> {
    match format {
        VideoFormat::Y4m => parse_y4m(&std::fs::read(path)?),
        VideoFormat::FrameDir => {
            let mut names: Vec<_> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(BitstreamError::BadField(format!(
                    "no frames found in {}",
                    path.display()
                )));
            }
            let mut frames = Vec::with_capacity(names.len());
            let mut dims = None;
            for name in &names {
                let frame = parse_ppm(&std::fs::read(name)?)?;
                let [_, _, h, w] = frame.shape();
                match dims {
                    None => dims = Some((w, h)),
                    Some(d) if d != (w, h) => {
                        return Err(BitstreamError::BadField(format!(
                            "mixed frame dimensions: {}x{} vs {}x{}",
                            d.0, d.1, w, h
                        )))
                    }
                    _ => {}
                }
            }
            for name in names {
                frames.push(parse_ppm(&std::fs::read(name)?)?);
            }
            let (width, height) = dims.unwrap();
            Ok(VideoClip { frames, width, height, framerate: (0, 0) })
        }
    }
}

// ---------------------------------------------------------------------------
// Padding to the model's downsampling multiple.
// ---------------------------------------------------------------------------

/// Folds an out-of-range index back into `[0, n)` by mirroring at the
/// borders with edge repetition: `n + k` maps to `n - 1 - k`.
fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Pads right/bottom with mirrored border rows/columns so both dimensions
/// become multiples of `m`. Returns the padded frame; the original dims are
/// the crop info.
pub fn pad_to_multiple(frame: &Tensor, m: usize) -> Tensor {
    let [n, c, h, w] = frame.shape();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return frame.clone();
    }
    let src = frame.data();
    let mut data = vec![0.0f32; n * c * ph * pw];
    for plane in 0..n * c {
        for y in 0..ph {
            let sy = mirror_index(y, h);
            for x in 0..pw {
                let sx = mirror_index(x, w);
                data[plane * ph * pw + y * pw + x] = src[plane * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new([n, c, ph, pw], data)
}

/// Crops a padded frame back to its original dimensions.
pub fn crop_frame(frame: &Tensor, width: usize, height: usize) -> Tensor {
    let [n, c, h, w] = frame.shape();
    assert!(height <= h && width <= w, "crop larger than frame");
    if h == height && w == width {
        return frame.clone();
    }
    let src = frame.data();
    let mut data = vec![0.0f32; n * c * height * width];
    for plane in 0..n * c {
        for y in 0..height {
            for x in 0..width {
                data[plane * height * width + y * width + x] = src[plane * h * w + y * w + x];
            }
        }
    }
    Tensor::new([n, c, height, width], data)
}
