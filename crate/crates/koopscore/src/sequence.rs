//! Cine-sequence containers, preprocessing, and the KSQ1 on-disk format.
//!
//! A [`FrameSequence`] is an ordered stack of same-shape grayscale frames
//! with pixels in [0, 1] and a uniform frame interval `dt`. A [`Study`]
//! groups the per-view sequences of one patient with their clinical record.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::ClinicalRecord;

/// Standard echocardiographic acquisition views, in onehot/index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewLabel {
    #[serde(rename = "PLAX")]
    Plax,
    #[serde(rename = "PSAX-MP")]
    PsaxMp,
    #[serde(rename = "PSAX-AV")]
    PsaxAv,
    #[serde(rename = "A4C")]
    A4c,
    #[serde(rename = "A2C")]
    A2c,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 5] = [
        ViewLabel::Plax,
        ViewLabel::PsaxMp,
        ViewLabel::PsaxAv,
        ViewLabel::A4c,
        ViewLabel::A2c,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ViewLabel::Plax => "PLAX",
            ViewLabel::PsaxMp => "PSAX-MP",
            ViewLabel::PsaxAv => "PSAX-AV",
            ViewLabel::A4c => "A4C",
            ViewLabel::A2c => "A2C",
        }
    }

    /// Position in [`ViewLabel::ALL`]; also the onehot slot in feature vectors.
    pub fn index(&self) -> usize {
        match self {
            ViewLabel::Plax => 0,
            ViewLabel::PsaxMp => 1,
            ViewLabel::PsaxAv => 2,
            ViewLabel::A4c => 3,
            ViewLabel::A2c => 4,
        }
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ViewLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewLabel::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown view label {s:?}")))
    }
}

/// A single patient's cine loop for one view: T frames of H x W pixels,
/// stored frame-major as f32 in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    view: ViewLabel,
    patient_id: String,
    height: usize,
    width: usize,
    dt: f64,
    data: Vec<f32>,
}

impl FrameSequence {
    /// Validates and wraps raw pixel data (frame-major, row-major within a frame).
    pub fn new(
        view: ViewLabel,
        patient_id: impl Into<String>,
        height: usize,
        width: usize,
        dt: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("frame dimensions must be positive"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::validation(format!("dt must be finite and > 0, got {dt}")));
        }
        let frame_len = height
            .checked_mul(width)
            .ok_or_else(|| Error::validation("frame size overflows"))?;
        if data.len() % frame_len != 0 {
            return Err(Error::validation(format!(
                "pixel buffer length {} is not a multiple of {}x{}",
                data.len(),
                height,
                width
            )));
        }
        let n_frames = data.len() / frame_len;
        if n_frames < 2 {
            return Err(Error::validation(format!(
                "a sequence needs at least 2 frames, got {n_frames}"
            )));
        }
        for (i, &p) in data.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!(
                    "pixel {i} out of range: {p} (expected [0, 1])"
                )));
            }
        }
        Ok(FrameSequence {
            view,
            patient_id: patient_id.into(),
            height,
            width,
            dt,
            data,
        })
    }

    pub fn view(&self) -> ViewLabel {
        self.view
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / (self.height * self.width)
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Row-major pixels of frame `t`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let p = self.n_pixels();
        &self.data[t * p..(t + 1) * p]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }
}

/// One patient: per-view sequences, clinical covariates, optional outcome label.
#[derive(Debug, Clone)]
pub struct Study {
    pub patient_id: String,
    pub sequences: BTreeMap<ViewLabel, FrameSequence>,
    pub clinical: ClinicalRecord,
    pub label: Option<u8>,
}

impl Study {
    pub fn new(
        patient_id: impl Into<String>,
        sequences: BTreeMap<ViewLabel, FrameSequence>,
        clinical: ClinicalRecord,
        label: Option<u8>,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if sequences.is_empty() {
            return Err(Error::validation("a study needs at least one sequence"));
        }
        for (view, seq) in &sequences {
            if seq.patient_id() != patient_id {
                return Err(Error::validation(format!(
                    "sequence for view {view} belongs to {:?}, not {patient_id:?}",
                    seq.patient_id()
                )));
            }
        }
        if let Some(l) = label {
            if l > 1 {
                return Err(Error::validation(format!("label must be 0 or 1, got {l}")));
            }
        }
        clinical.validate()?;
        Ok(Study {
            patient_id,
            sequences,
            clinical,
            label,
        })
    }
}

const KSQ_MAGIC: &[u8; 4] = b"KSQ1";
const MAX_HEADER_BYTES: usize = 1 << 16;

/// KSQ1 header; field order is the canonical serialization order.
#[derive(Serialize, Deserialize)]
struct SeqHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    dt: f64,
    view: ViewLabel,
    patient_id: String,
}

/// Serializes a sequence in the KSQ1 container layout:
/// 4-byte magic, compact JSON header, one newline, then T*H*W f32 LE pixels.
pub fn save_sequence(seq: &FrameSequence, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_sequence(seq, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_sequence<W: Write>(seq: &FrameSequence, out: &mut W) -> Result<()> {
    let header = SeqHeader {
        t: seq.n_frames(),
        h: seq.height(),
        w: seq.width(),
        dt: seq.dt(),
        view: seq.view(),
        patient_id: seq.patient_id().to_string(),
    };
    out.write_all(KSQ_MAGIC)?;
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(seq.pixels().len() * 4);
    for &p in seq.pixels() {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(())
}

/// Reads a KSQ1 container back into a validated [`FrameSequence`].
pub fn load_sequence(path: &Path) -> Result<FrameSequence> {
    let file = std::fs::File::open(path)?;
    let mut input = std::io::BufReader::new(file);
    read_sequence(&mut input)
}

pub fn read_sequence<R: Read>(input: &mut R) -> Result<FrameSequence> {
    let mut magic = [0u8; 4];
    read_exact_or(input, &mut magic, "magic")?;
    if &magic != KSQ_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected \"KSQ1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if input.read(&mut byte)? == 0 {
            return Err(Error::format("unterminated header (no newline)"));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > MAX_HEADER_BYTES {
            return Err(Error::format("header exceeds 64 KiB"));
        }
    }
    let header: SeqHeader = serde_json::from_slice(&header_bytes)?;
    let n_values = header
        .t
        .checked_mul(header.h)
        .and_then(|v| v.checked_mul(header.w))
        .ok_or_else(|| Error::format("declared dimensions overflow"))?;
    let expected = n_values
        .checked_mul(4)
        .ok_or_else(|| Error::format("declared payload size overflows"))?;
    let mut payload = vec![0u8; expected];
    let actual = read_up_to(input, &mut payload)?;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    let mut trail = [0u8; 1];
    if input.read(&mut trail)? != 0 {
        return Err(Error::format("trailing bytes after declared payload"));
    }
    let mut data = Vec::with_capacity(n_values);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    FrameSequence::new(header.view, header.patient_id, header.h, header.w, header.dt, data)
}

fn read_exact_or<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("file too short while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_up_to<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = input.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

/// Preprocessing knobs applied by [`enhance`], in application order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EnhanceConfig {
    pub target_height: usize,
    pub target_width: usize,
    /// Odd box side length; `None` disables denoising.
    pub blur_radius: Option<usize>,
    /// Temporal-variance floor below which a pixel is zeroed; `None` disables.
    pub static_floor: Option<f64>,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            target_height: 64,
            target_width: 64,
            blur_radius: None,
            static_floor: None,
        }
    }
}

/// Applies, in order: static-pixel suppression, box-blur denoising,
/// bilinear resampling to the target resolution, and min-max mapping of
/// the whole sequence into [0, 1].
pub fn enhance(seq: &FrameSequence, cfg: &EnhanceConfig) -> Result<FrameSequence> {
    if cfg.target_height < 2 || cfg.target_width < 2 {
        return Err(Error::validation(format!(
            "target resolution must be at least 2x2, got {}x{}",
            cfg.target_height, cfg.target_width
        )));
    }
    if let Some(r) = cfg.blur_radius {
        if r % 2 == 0 || r == 0 {
            return Err(Error::validation(format!("blur radius must be odd, got {r}")));
        }
    }
    if let Some(floor) = cfg.static_floor {
        if !floor.is_finite() || floor < 0.0 {
            return Err(Error::validation(format!(
                "static floor must be finite and >= 0, got {floor}"
            )));
        }
    }

    let (t_len, h, w) = (seq.n_frames(), seq.height(), seq.width());
    let p = h * w;
    let mut frames: Vec<f64> = seq.pixels().iter().map(|&v| v as f64).collect();

    if let Some(floor) = cfg.static_floor {
        for j in 0..p {
            let mut mean = 0.0;
            for t in 0..t_len {
                mean += frames[t * p + j];
            }
            mean /= t_len as f64;
            let mut var = 0.0;
            for t in 0..t_len {
                let d = frames[t * p + j] - mean;
                var += d * d;
            }
            var /= t_len as f64;
            if var < floor {
                for t in 0..t_len {
                    frames[t * p + j] = 0.0;
                }
            }
        }
    }

    if let Some(r) = cfg.blur_radius {
        let half = r / 2;
        let mut blurred = vec![0.0f64; frames.len()];
        for t in 0..t_len {
            let src = &frames[t * p..(t + 1) * p];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in 0..r {
                        let ii = (i + di).saturating_sub(half).min(h - 1);
                        for dj in 0..r {
                            let jj = (j + dj).saturating_sub(half).min(w - 1);
                            acc += src[ii * w + jj];
                        }
                    }
                    blurred[t * p + i * w + j] = acc / (r * r) as f64;
                }
            }
        }
        frames = blurred;
    }

    let (th, tw) = (cfg.target_height, cfg.target_width);
    let tp = th * tw;
    let mut resized = vec![0.0f64; t_len * tp];
    for t in 0..t_len {
        let src = &frames[t * p..(t + 1) * p];
        let dst = &mut resized[t * tp..(t + 1) * tp];
        bilinear_resize(src, h, w, dst, th, tw);
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &resized {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let data: Vec<f32> = if span > 0.0 {
        resized
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0)) as f32)
            .collect()
    } else {
        vec![0.0f32; resized.len()]
    };

    FrameSequence::new(seq.view(), seq.patient_id(), th, tw, seq.dt(), data)
}

/// Align-corners bilinear interpolation; `src` is h x w, `dst` is th x tw.
fn bilinear_resize(src: &[f64], h: usize, w: usize, dst: &mut [f64], th: usize, tw: usize) {
    for i in 0..th {
        let y = if th == 1 { 0.0 } else { i as f64 * (h - 1) as f64 / (th - 1) as f64 };
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for j in 0..tw {
            let x = if tw == 1 { 0.0 } else { j as f64 * (w - 1) as f64 / (tw - 1) as f64 };
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            dst[i * tw + j] = top * (1.0 - fy) + bot * fy;
        }
    }
}

/// Piecewise-linear temporal resampling to exactly `t_target` frames.
///
/// The first and last frames are preserved exactly and the frame interval
/// is rescaled to keep the covered time span: dt' = dt * (T-1) / (T'-1).
pub fn normalize_cycle(seq: &FrameSequence, t_target: usize) -> Result<FrameSequence> {
    if t_target < 2 {
        return Err(Error::validation(format!(
            "t_target must be at least 2, got {t_target}"
        )));
    }
    let t_len = seq.n_frames();
    let p = seq.n_pixels();
    let mut data = vec![0.0f32; t_target * p];
    for j in 0..t_target {
        let s = j as f64 * (t_len - 1) as f64 / (t_target - 1) as f64;
        let k = (s.floor() as usize).min(t_len - 2);
        let frac = s - k as f64;
        let dst = &mut data[j * p..(j + 1) * p];
        if frac <= 0.0 {
            dst.copy_from_slice(seq.frame(k));
        } else if frac >= 1.0 {
            dst.copy_from_slice(seq.frame(k + 1));
        } else {
            let a = seq.frame(k);
            let b = seq.frame(k + 1);
            for (i, d) in dst.iter_mut().enumerate() {
                let v = a[i] as f64 + frac * (b[i] as f64 - a[i] as f64);
                *d = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let dt_out = seq.dt() * (t_len - 1) as f64 / (t_target - 1) as f64;
    FrameSequence::new(seq.view(), seq.patient_id(), seq.height(), seq.width(), dt_out, data)
}
