//! Binary and text file formats.
//!
//! | magic  | contents                                                        |
//! |--------|-----------------------------------------------------------------|
//! | `SWIM` | u32 n, u32 reserved, f32 fov, n·n f64 image                     |
//! | `SWSN` | u32 views, u32 detectors, 5 f64 geometry, views·detectors f64   |
//! | `SWX1` | u32 planes (4), u32 rows, u32 cols, f64 planes                  |
//! | `SWX2` | same with 3 planes                                              |
//! | `SWSM` | score-network checkpoint                                        |
//!
//! All integers and reals are little-endian. Sinogram geometry is stored as
//! source distance, detector distance, detector width, detector spacing and
//! angular step; the last two are checked against the first three on load.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::diffusion::{NetConfig, Normalization, PatchScoreNet};
use crate::error::{Result, SwordError};
use crate::phantom::{GridSpec, Image};
use crate::projector::{FanBeamGeometry, Sinogram, ViewMask};
use crate::wavelet::{HighFreqStack, SubbandStack};

const IMAGE_MAGIC: &[u8; 4] = b"SWIM";
const SINO_MAGIC: &[u8; 4] = b"SWSN";
const FULL_STACK_MAGIC: &[u8; 4] = b"SWX1";
const HIGH_STACK_MAGIC: &[u8; 4] = b"SWX2";
const MODEL_MAGIC: &[u8; 4] = b"SWSM";

fn format_err(path: &Path, msg: impl std::fmt::Display) -> SwordError {
    SwordError::Format(format!("{}: {msg}", path.display()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(SwordError::MissingFile(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// Write through a sibling temp file so readers never see a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            let found = String::from_utf8_lossy(&buf[..buf.len().min(4)]).into_owned();
            return Err(format_err(
                path,
                format!("expected magic {:?}, found {found:?}", std::str::from_utf8(magic).unwrap()),
            ));
        }
        Ok(Self { path, buf, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format_err(self.path, "file is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(self.path, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| SwordError::Format(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let n = img.grid.n;
    let mut out = Vec::with_capacity(16 + 8 * n * n);
    out.extend_from_slice(IMAGE_MAGIC);
    put_u32(&mut out, n)?;
    put_u32(&mut out, 0)?;
    out.extend_from_slice(&(img.grid.fov as f32).to_le_bytes());
    put_f64s(&mut out, img.data.iter());
    Ok(out)
}

pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::new(path, bytes, IMAGE_MAGIC)?;
    let n = r.u32()?;
    let _reserved = r.u32()?;
    let fov = r.f32()? as f64;
    let data = r.f64s(n * n)?;
    r.finish()?;
    let grid = GridSpec::new(n, fov).map_err(|e| format_err(path, e))?;
    let data = Array2::from_shape_vec((n, n), data).map_err(|e| format_err(path, e))?;
    Image::from_array(grid, data).map_err(|e| format_err(path, e))
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_image(img)?)
}

/// The field of view is stored as `f32`, so it round-trips to single precision.
pub fn load_image(path: &Path) -> Result<Image> {
    decode_image(path, &read_bytes(path)?)
}

pub fn encode_sinogram(sino: &Sinogram) -> Result<Vec<u8>> {
    let g = &sino.geometry;
    let mut out = Vec::with_capacity(52 + 8 * sino.data.len());
    out.extend_from_slice(SINO_MAGIC);
    put_u32(&mut out, g.n_views)?;
    put_u32(&mut out, g.n_detectors)?;
    let geo = [
        g.source_to_center_cm,
        g.center_to_detector_cm,
        g.detector_width_cm,
        g.detector_spacing(),
        g.angular_step(),
    ];
    put_f64s(&mut out, geo.iter());
    put_f64s(&mut out, sino.data.iter());
    Ok(out)
}

pub fn decode_sinogram(path: &Path, bytes: &[u8]) -> Result<Sinogram> {
    let mut r = Reader::new(path, bytes, SINO_MAGIC)?;
    let n_views = r.u32()?;
    let n_detectors = r.u32()?;
    let vals = r.f64s(5)?;
    let data = r.f64s(n_views * n_detectors)?;
    r.finish()?;
    let geometry = FanBeamGeometry {
        source_to_center_cm: vals[0],
        center_to_detector_cm: vals[1],
        detector_width_cm: vals[2],
        n_detectors,
        n_views,
    };
    geometry.validate().map_err(|e| format_err(path, e))?;
    if geometry.detector_spacing() != vals[3] || geometry.angular_step() != vals[4] {
        return Err(format_err(path, "stored detector spacing or angular step is inconsistent"));
    }
    let data = Array2::from_shape_vec((n_views, n_detectors), data).map_err(|e| format_err(path, e))?;
    Sinogram::from_array(geometry, data).map_err(|e| format_err(path, e))
}

pub fn save_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    write_bytes(path, &encode_sinogram(sino)?)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(path, &read_bytes(path)?)
}

fn encode_planes(magic: &[u8; 4], planes: &Array3<f64>) -> Result<Vec<u8>> {
    let (p, r, c) = planes.dim();
    let mut out = Vec::with_capacity(16 + 8 * planes.len());
    out.extend_from_slice(magic);
    put_u32(&mut out, p)?;
    put_u32(&mut out, r)?;
    put_u32(&mut out, c)?;
    put_f64s(&mut out, planes.iter());
    Ok(out)
}

fn decode_planes(path: &Path, bytes: &[u8], magic: &[u8; 4], expected: usize) -> Result<Array3<f64>> {
    let mut r = Reader::new(path, bytes, magic)?;
    let (p, rows, cols) = (r.u32()?, r.u32()?, r.u32()?);
    if p != expected {
        return Err(format_err(path, format!("expected {expected} planes, found {p}")));
    }
    let data = r.f64s(p * rows * cols)?;
    r.finish()?;
    Array3::from_shape_vec((p, rows, cols), data).map_err(|e| format_err(path, e))
}

pub fn save_full_stack(path: &Path, stack: &SubbandStack) -> Result<()> {
    write_bytes(path, &encode_planes(FULL_STACK_MAGIC, &stack.planes)?)
}

/// Loaded stacks carry no scan geometry.
pub fn load_full_stack(path: &Path) -> Result<SubbandStack> {
    let planes = decode_planes(path, &read_bytes(path)?, FULL_STACK_MAGIC, 4)?;
    SubbandStack::new(planes, None).map_err(|e| format_err(path, e))
}

pub fn save_high_stack(path: &Path, stack: &HighFreqStack) -> Result<()> {
    write_bytes(path, &encode_planes(HIGH_STACK_MAGIC, &stack.planes)?)
}

pub fn load_high_stack(path: &Path) -> Result<HighFreqStack> {
    let planes = decode_planes(path, &read_bytes(path)?, HIGH_STACK_MAGIC, 3)?;
    HighFreqStack::new(planes).map_err(|e| format_err(path, e))
}

/// `SWSM`: u32 channels, patch rows, patch cols, hidden, blocks, fourier, row shifts;
/// u64 parameter count, f64 parameters; f64 data scale; one f64 data rms
/// per channel; f64 σ_min, σ_max; u32 schedule length.
pub fn encode_model(net: &PatchScoreNet) -> Result<Vec<u8>> {
    let c = net.config();
    let mut out = Vec::with_capacity(64 + 8 * net.params().len());
    out.extend_from_slice(MODEL_MAGIC);
    for d in [c.channels, c.patch_rows, c.patch_cols, c.hidden, c.blocks, c.fourier, c.row_shifts] {
        put_u32(&mut out, d)?;
    }
    out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    put_f64s(&mut out, net.params().iter());
    let n = net.normalization();
    put_f64s(&mut out, [n.data_scale].iter().chain(&n.sigma_data).chain([n.sigma_min, n.sigma_max].iter()));
    put_u32(&mut out, n.schedule_len)?;
    Ok(out)
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<PatchScoreNet> {
    let mut r = Reader::new(path, bytes, MODEL_MAGIC)?;
    let cfg = NetConfig {
        channels: r.u32()?,
        patch_rows: r.u32()?,
        patch_cols: r.u32()?,
        hidden: r.u32()?,
        blocks: r.u32()?,
        fourier: r.u32()?,
        row_shifts: r.u32()?,
    };
    let count = r.u64()?;
    let params = r.f64s(count)?;
    let norm = Normalization {
        data_scale: r.f64()?,
        sigma_data: r.f64s(cfg.channels)?,
        sigma_min: r.f64()?,
        sigma_max: r.f64()?,
        schedule_len: r.u32()?,
    };
    r.finish()?;
    PatchScoreNet::from_parts(cfg, params, norm).map_err(|e| format_err(path, e))
}

pub fn save_model(path: &Path, net: &PatchScoreNet) -> Result<()> {
    write_bytes(path, &encode_model(net)?)
}

/// A missing checkpoint is a configuration problem, not an I/O failure.
pub fn load_model(path: &Path) -> Result<PatchScoreNet> {
    decode_model(path, &read_bytes(path)?)
}

pub fn save_mask(path: &Path, mask: &ViewMask) -> Result<()> {
    write_bytes(path, mask.to_text().as_bytes())
}

pub fn load_mask(path: &Path) -> Result<ViewMask> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| format_err(path, "mask file is not UTF-8"))?;
    ViewMask::from_text(&text).map_err(|e| format_err(path, e))
}

/// Display window used for PNG export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub low: f64,
    pub high: f64,
}

impl Window {
    pub fn of(img: &Image) -> Self {
        let (low, high) = img
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self { low, high }
    }
}

fn sidecar_path(png_path: &Path) -> PathBuf {
    let mut s = png_path.as_os_str().to_owned();
    s.push(".window.txt");
    PathBuf::from(s)
}

/// 16-bit grayscale PNG, row 0 at the bottom (y grows upward). The window is
/// written to `<file>.window.txt` as `low high`.
pub fn save_png(path: &Path, img: &Image, window: Option<Window>) -> Result<Window> {
    let w = window.unwrap_or_else(|| Window::of(img));
    let span = if w.high > w.low { w.high - w.low } else { 1.0 };
    let n = img.grid.n;
    let mut pixels = Vec::with_capacity(2 * n * n);
    for row in (0..n).rev() {
        for col in 0..n {
            let t = ((img.data[[row, col]] - w.low) / span).clamp(0.0, 1.0);
            let v = (t * 65535.0).round() as u16;
            pixels.extend_from_slice(&v.to_be_bytes());
        }
    }
    let mut encoded = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut encoded, n as u32, n as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| SwordError::Format(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| SwordError::Format(e.to_string()))?;
    }
    write_bytes(path, &encoded)?;
    write_bytes(&sidecar_path(path), format!("{:e} {:e}\n", w.low, w.high).as_bytes())?;
    Ok(w)
}

pub fn load_window(png_path: &Path) -> Result<Window> {
    let side = sidecar_path(png_path);
    let text = String::from_utf8(read_bytes(&side)?).map_err(|_| format_err(&side, "not UTF-8"))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format_err(&side, format!("bad number '{t}'"))))
        .collect::<Result<_>>()?;
    match vals.as_slice() {
        [low, high] => Ok(Window { low: *low, high: *high }),
        _ => Err(format_err(&side, "expected 'low high'")),
    }
}
