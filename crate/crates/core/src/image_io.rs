//! Image containers and the file codecs around them.
//!
//! LDR inputs are read from 8/16-bit RGB PNG or binary PPM (`P6`), with the
//! exposure value supplied by the caller or by a JSON sidecar
//! (`shot.png` → `shot.json` holding `{"ev": -2.0}`). HDR images are written
//! and read as little-endian PFM with rows stored bottom-to-top.
//!
//! Samples are held as `f64` in memory. PFM stores `f32`, so an HDR image
//! round-trips bit-exactly whenever its samples are representable as `f32`,
//! which includes everything that was itself loaded from a PFM file.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted LDR side length.
pub const MIN_LDR_DIM: usize = 8;

/// Single-channel row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(
                format!("{} samples", width * height),
                format!("{} samples", data.len()),
            ));
        }
        Ok(Plane { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with replicate (clamp-to-edge) border handling.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn transpose(&self) -> Plane {
        Plane::from_fn(self.height, self.width, |x, y| self.at(y, x))
    }
}

/// Normalized RGB exposure with its exposure value.
///
/// The relative exposure time is always derived as `2^ev`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrImage {
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    data: Vec<f64>,
    ev: f64,
}

impl LdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>, ev: f64) -> Result<Self> {
        if width < MIN_LDR_DIM || height < MIN_LDR_DIM {
            return Err(Error::ImageTooSmall {
                width,
                height,
                min: MIN_LDR_DIM,
            });
        }
        if data.len() != width * height * 3 {
            return Err(Error::dims(
                format!("{} samples", width * height * 3),
                format!("{} samples", data.len()),
            ));
        }
        if !ev.is_finite() {
            return Err(Error::InvalidParameter(format!("exposure value {ev} is not finite")));
        }
        for (index, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteSample { index });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::SampleOutOfRange { index, value: v });
            }
        }
        Ok(LdrImage {
            width,
            height,
            data,
            ev,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn ev(&self) -> f64 {
        self.ev
    }

    /// Relative exposure time, `2^ev`.
    pub fn t(&self) -> f64 {
        self.ev.exp2()
    }

    pub fn with_ev(mut self, ev: f64) -> Self {
        self.ev = ev;
        self
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn channel(&self, c: usize) -> Plane {
        channel_plane(self.width, self.height, &self.data, c)
    }
}

/// Non-negative linear-radiance RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dims(
                format!("{} samples", width * height * 3),
                format!("{} samples", data.len()),
            ));
        }
        for (index, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteSample { index });
            }
            if v < 0.0 {
                return Err(Error::SampleOutOfRange { index, value: v });
            }
        }
        Ok(HdrImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        HdrImage::new(width, height, data)
    }

    /// Builds an image from channel-major (`3 × H × W`) samples.
    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Result<Self> {
        let n = width * height;
        if planar.len() != 3 * n {
            return Err(Error::dims(format!("{} samples", 3 * n), format!("{} samples", planar.len())));
        }
        let mut data = vec![0.0; 3 * n];
        for c in 0..3 {
            for i in 0..n {
                data[i * 3 + c] = planar[c * n + i];
            }
        }
        HdrImage::new(width, height, data)
    }

    pub fn to_planar(&self) -> Vec<f64> {
        interleaved_to_planar(&self.data, self.width * self.height)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn channel(&self, c: usize) -> Plane {
        channel_plane(self.width, self.height, &self.data, c)
    }

    /// Element-wise map; the result must still be a valid HDR image.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<HdrImage> {
        HdrImage::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }
}

pub(crate) fn interleaved_to_planar(data: &[f64], n: usize) -> Vec<f64> {
    let mut planar = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            planar[c * n + i] = data[i * 3 + c];
        }
    }
    planar
}

fn channel_plane(width: usize, height: usize, data: &[f64], c: usize) -> Plane {
    assert!(c < 3, "channel index {c} out of range");
    Plane {
        width,
        height,
        data: data.iter().skip(c).step_by(3).copied().collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    ev: f64,
}

/// `shot.png` → `shot.json`.
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("json")
}

/// Reads the exposure value from the JSON sidecar next to `image_path`, if one exists.
pub fn read_sidecar_ev(image_path: &Path) -> Result<Option<f64>> {
    let path = sidecar_path(image_path);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let car: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Sidecar {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if !car.ev.is_finite() {
        return Err(Error::Sidecar {
            path,
            message: "ev is not finite".into(),
        });
    }
    Ok(Some(car.ev))
}

pub fn write_sidecar_ev(image_path: &Path, ev: f64) -> Result<()> {
    let path = sidecar_path(image_path);
    let text = serde_json::to_string(&Sidecar { ev }).expect("sidecar serializes");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Loads an 8/16-bit RGB PNG or binary PPM and maps codes to `[0, 1]`.
pub fn load_ldr(path: impl AsRef<Path>, ev: f64) -> Result<LdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, data) = if bytes.starts_with(b"\x89PNG") {
        decode_png_rgb(&bytes)?
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)?
    } else {
        return Err(Error::CorruptHeader(format!(
            "{}: neither a PNG nor a binary PPM",
            path.display()
        )));
    };
    LdrImage::new(width, height, data, ev)
}

/// Like [`load_ldr`] but takes the exposure value from the JSON sidecar.
pub fn load_ldr_with_sidecar(path: impl AsRef<Path>) -> Result<LdrImage> {
    let path = path.as_ref();
    let ev = read_sidecar_ev(path)?.ok_or_else(|| Error::Sidecar {
        path: sidecar_path(path),
        message: "missing sidecar; pass the exposure value explicitly".into(),
    })?;
    load_ldr(path, ev)
}

fn decode_png_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::CorruptHeader(format!("png: {e}")))?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Rgb {
        return Err(Error::UnsupportedChannels(format!(
            "png color type {:?}, expected RGB",
            info.color_type
        )));
    }
    let bits = match info.bit_depth {
        png::BitDepth::Eight => 8u32,
        png::BitDepth::Sixteen => 16,
        other => return Err(Error::UnsupportedBitDepth(format!("png bit depth {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptHeader("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptHeader(format!("png: {e}")))?;
    let samples = width * height * 3;
    Ok((width, height, codes_to_unit(&buf, samples, bits)))
}

fn codes_to_unit(buf: &[u8], samples: usize, bits: u32) -> Vec<f64> {
    let max = ((1u32 << bits) - 1) as f64;
    if bits == 8 {
        buf[..samples].iter().map(|&b| b as f64 / max).collect()
    } else {
        buf[..samples * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / max)
            .collect()
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and `#` comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptHeader("ppm: expected an unsigned integer".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::CorruptHeader("ppm: missing separator before raster".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    let bits = match maxval {
        255 => 8,
        65535 => 16,
        other => return Err(Error::UnsupportedBitDepth(format!("ppm maxval {other}"))),
    };
    let samples = width * height * 3;
    let needed = samples * (bits as usize / 8);
    let raster = &bytes[pos..];
    if raster.len() < needed {
        return Err(Error::CorruptHeader(format!(
            "ppm: raster has {} bytes, header promises {needed}",
            raster.len()
        )));
    }
    Ok((width, height, codes_to_unit(raster, samples, bits)))
}

/// Writes a little-endian PFM, rows bottom-to-top.
pub fn save_hdr(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let header = format!("PF\n{} {}\n-1.0\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row = img.width * 3;
    for y in (0..img.height).rev() {
        for &v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_hdr(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<HdrImage> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    for _ in 0..4 {
        while bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::CorruptHeader("pfm: truncated header".into()));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::CorruptHeader("pfm: header is not ascii".into()))?,
        );
    }
    match tokens[0] {
        "PF" => {}
        "Pf" => return Err(Error::UnsupportedChannels("pfm: greyscale (Pf) not supported".into())),
        m => return Err(Error::CorruptHeader(format!("pfm: bad magic {m:?}"))),
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::CorruptHeader(format!("pfm: bad dimension {s:?}")))
    };
    let width = parse_dim(tokens[1])?;
    let height = parse_dim(tokens[2])?;
    let scale: f32 = tokens[3]
        .parse()
        .ok()
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::CorruptHeader(format!("pfm: bad scale {:?}", tokens[3])))?;
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::CorruptHeader("pfm: missing separator before raster".into()));
    }
    pos += 1;
    let little_endian = scale < 0.0;
    let row = width * 3;
    let raster = &bytes[pos..];
    if raster.len() < row * height * 4 {
        return Err(Error::CorruptHeader("pfm: truncated raster".into()));
    }
    let mut data = vec![0.0; row * height];
    for (i, chunk) in raster.chunks_exact(4).take(row * height).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (i / row, i % row);
        let y = height - 1 - file_row;
        data[y * row + col] = v as f64;
    }
    HdrImage::new(width, height, data)
}

fn quantize(v: f64, bits: u32) -> u16 {
    let max = ((1u32 << bits) - 1) as f64;
    (v.clamp(0.0, 1.0) * max).round() as u16
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, samples: &[f64], bits: u32) -> Result<()> {
    let depth = match bits {
        8 => png::BitDepth::Eight,
        16 => png::BitDepth::Sixteen,
        other => return Err(Error::UnsupportedBitDepth(format!("png output bit depth {other}"))),
    };
    let raw: Vec<u8> = if bits == 8 {
        samples.iter().map(|&v| quantize(v, 8) as u8).collect()
    } else {
        samples.iter().flat_map(|&v| quantize(v, 16).to_be_bytes()).collect()
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&raw).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Writes interleaved RGB samples in `[0, 1]` (clamped) as an 8- or 16-bit PNG.
pub fn save_rgb_png(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[f64], bits: u32) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::dims(width * height * 3, rgb.len()));
    }
    write_png(path.as_ref(), width, height, png::ColorType::Rgb, rgb, bits)
}

pub fn save_gray_png(path: impl AsRef<Path>, plane: &Plane, bits: u32) -> Result<()> {
    write_png(path.as_ref(), plane.width, plane.height, png::ColorType::Grayscale, &plane.data, bits)
}

/// Writes the exposure as a 16-bit PNG plus its JSON sidecar.
pub fn save_ldr(img: &LdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_rgb_png(path, img.width, img.height, &img.data, 16)?;
    write_sidecar_ev(path, img.ev)
}
