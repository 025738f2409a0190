//! Typed image containers and file I/O.
//!
//! Three pixel domains are kept as distinct types so the rest of the pipeline
//! cannot mix them up: linear radiance ([`RadianceImage`]), 8-bit tone-curved
//! codes ([`SdrImage`]), and thermal temperature maps ([`IrImage`]).
//!
//! On disk: radiance goes to PFM (lossless, little-endian, scale -1.0) or
//! Radiance RGBE (.hdr, lossy shared-exponent); SDR goes to PNG or binary PPM;
//! thermal frames go to 16-bit big-endian PGM with the code/temperature
//! calibration in a JSON sidecar. SDR exposure time is also carried in a JSON
//! sidecar next to the pixel file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Default thermal calibration range in degrees Celsius.
pub const DEFAULT_CALIB_MIN: f32 = -20.0;
/// See [`DEFAULT_CALIB_MIN`].
pub const DEFAULT_CALIB_MAX: f32 = 100.0;

/// Errors raised by image parsing and encoding.
#[derive(Debug, thiserror::Error)]
pub enum ImgError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("truncated payload at byte {offset}: expected {expected} more bytes")]
    Truncated { offset: usize, expected: usize },
    #[error("dimension overflow: {width}x{height} exceeds addressable pixels")]
    DimensionOverflow { width: u64, height: u64 },
    #[error("image kind incompatible with format {format:?}")]
    IncompatibleKind { format: ImageFormat },
    #[error("invalid image data: {0}")]
    InvalidData(String),
    #[error("png codec: {0}")]
    Png(String),
}

impl ImgError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ImgError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Linear relative radiance, 3 channels, row-major `[r,g,b, r,g,b, ...]`.
///
/// Invariants: every sample is finite and non-negative;
/// `data.len() == width * height * 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RadianceImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImgError> {
        if data.len() != width * height * 3 {
            return Err(ImgError::InvalidData(format!(
                "radiance buffer length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ImgError::InvalidData(format!(
                "radiance sample {bad} is not finite and non-negative"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// All-zero (black) frame.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Rec. 709 luminance map, one sample per pixel.
    ///
    /// Linear in the input: `luminance(a*I) == a*luminance(I)` for `a >= 0`.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
            .collect()
    }
}

/// 8-bit tone-curved frame with its exposure time in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    pub exposure_time: f64,
}

impl SdrImage {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<u8>,
        exposure_time: f64,
    ) -> Result<Self, ImgError> {
        if data.len() != width * height * 3 {
            return Err(ImgError::InvalidData(format!(
                "sdr buffer length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        if !(exposure_time > 0.0) {
            return Err(ImgError::InvalidData(format!(
                "exposure_time {exposure_time} must be positive"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            exposure_time,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Single-channel temperature map in degrees Celsius with its calibration
/// range (the span of the 16-bit code axis on disk).
#[derive(Debug, Clone, PartialEq)]
pub struct IrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub calib_min: f32,
    pub calib_max: f32,
}

impl IrImage {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<f32>,
        calib_min: f32,
        calib_max: f32,
    ) -> Result<Self, ImgError> {
        if data.len() != width * height {
            return Err(ImgError::InvalidData(format!(
                "ir buffer length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if !(calib_min < calib_max) {
            return Err(ImgError::InvalidData(format!(
                "calibration range [{calib_min}, {calib_max}] is empty"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(ImgError::InvalidData(format!(
                "temperature sample {bad} is not finite"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            calib_min,
            calib_max,
        })
    }

    /// Temperatures mapped to [0,1] by the calibration range, clamped.
    pub fn normalized(&self) -> Vec<f32> {
        let span = self.calib_max - self.calib_min;
        self.data
            .iter()
            .map(|t| ((t - self.calib_min) / span).clamp(0.0, 1.0))
            .collect()
    }
}

/// A decoded image of any pixel domain.
#[derive(Debug, Clone)]
pub enum Image {
    Radiance(RadianceImage),
    Sdr(SdrImage),
    Ir(IrImage),
}

/// On-disk formats understood by [`read_image`] / [`write_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// Radiance RGBE `.hdr` (shared exponent, lossy).
    Rgbe,
    /// Portable FloatMap, color `PF`, little-endian (scale -1.0), lossless.
    Pfm,
    /// 8-bit RGB PNG.
    Png,
    /// Binary PPM (`P6`, maxval 255).
    Ppm,
    /// 16-bit big-endian PGM (`P5`, maxval 65535), thermal codes.
    Pgm16,
}

impl ImageFormat {
    /// Guess from a file extension; `.json` sidecars are not image files.
    pub fn from_extension(path: &Path) -> Option<ImageFormat> {
        match path.extension()?.to_str()? {
            "hdr" => Some(ImageFormat::Rgbe),
            "pfm" => Some(ImageFormat::Pfm),
            "png" => Some(ImageFormat::Png),
            "ppm" => Some(ImageFormat::Ppm),
            "pgm" => Some(ImageFormat::Pgm16),
            _ => None,
        }
    }
}

/// JSON sidecar carried next to SDR and thermal pixel files.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Sidecar {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exposure_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calib_min: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calib_max: Option<f32>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn read_sidecar(path: &Path) -> Result<Sidecar, ImgError> {
    let sc = sidecar_path(path);
    if !sc.exists() {
        return Ok(Sidecar::default());
    }
    let text = std::fs::read_to_string(&sc).map_err(|e| ImgError::io(&sc, e))?;
    serde_json::from_str(&text)
        .map_err(|e| ImgError::InvalidData(format!("sidecar {}: {e}", sc.display())))
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<(), ImgError> {
    let sc = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(&sc, text).map_err(|e| ImgError::io(&sc, e))
}

/// Read an image file under the named format.
///
/// RGBE and PFM decode to [`RadianceImage`], PNG and PPM to [`SdrImage`]
/// (exposure time from the sidecar, default 1.0), PGM16 to [`IrImage`]
/// (codes mapped linearly onto the sidecar calibration range, default
/// [-20, 100] °C).
pub fn read_image(path: &Path, format: ImageFormat) -> Result<Image, ImgError> {
    let bytes = std::fs::read(path).map_err(|e| ImgError::io(path, e))?;
    match format {
        ImageFormat::Pfm => Ok(Image::Radiance(decode_pfm(&bytes)?)),
        ImageFormat::Rgbe => Ok(Image::Radiance(decode_rgbe(&bytes)?)),
        ImageFormat::Png => {
            let sc = read_sidecar(path)?;
            Ok(Image::Sdr(decode_png(&bytes, sc.exposure_time.unwrap_or(1.0))?))
        }
        ImageFormat::Ppm => {
            let sc = read_sidecar(path)?;
            Ok(Image::Sdr(decode_ppm(&bytes, sc.exposure_time.unwrap_or(1.0))?))
        }
        ImageFormat::Pgm16 => {
            let sc = read_sidecar(path)?;
            Ok(Image::Ir(decode_pgm16(
                &bytes,
                sc.calib_min.unwrap_or(DEFAULT_CALIB_MIN),
                sc.calib_max.unwrap_or(DEFAULT_CALIB_MAX),
            )?))
        }
    }
}

/// Convenience wrappers returning the expected kind or an error.
pub fn read_radiance(path: &Path, format: ImageFormat) -> Result<RadianceImage, ImgError> {
    match read_image(path, format)? {
        Image::Radiance(img) => Ok(img),
        _ => Err(ImgError::IncompatibleKind { format }),
    }
}

pub fn read_sdr(path: &Path, format: ImageFormat) -> Result<SdrImage, ImgError> {
    match read_image(path, format)? {
        Image::Sdr(img) => Ok(img),
        _ => Err(ImgError::IncompatibleKind { format }),
    }
}

pub fn read_ir(path: &Path, format: ImageFormat) -> Result<IrImage, ImgError> {
    match read_image(path, format)? {
        Image::Ir(img) => Ok(img),
        _ => Err(ImgError::IncompatibleKind { format }),
    }
}

/// Write an image under the named format; the file re-reads into an equal
/// image (exact for PFM/PNG/PPM/PGM16; RGBE is lossy, see [`decode_rgbe`]).
///
/// Errors if the image kind and format do not match. SDR and thermal writes
/// also emit the JSON sidecar.
pub fn write_image(image: &Image, path: &Path, format: ImageFormat) -> Result<(), ImgError> {
    match (image, format) {
        (Image::Radiance(img), ImageFormat::Pfm) => {
            write_bytes(path, &encode_pfm(img))
        }
        (Image::Radiance(img), ImageFormat::Rgbe) => {
            write_bytes(path, &encode_rgbe(img))
        }
        (Image::Sdr(img), ImageFormat::Png) => {
            encode_png(img, path)?;
            write_sidecar(
                path,
                &Sidecar {
                    exposure_time: Some(img.exposure_time),
                    ..Sidecar::default()
                },
            )
        }
        (Image::Sdr(img), ImageFormat::Ppm) => {
            write_bytes(path, &encode_ppm(img))?;
            write_sidecar(
                path,
                &Sidecar {
                    exposure_time: Some(img.exposure_time),
                    ..Sidecar::default()
                },
            )
        }
        (Image::Ir(img), ImageFormat::Pgm16) => {
            write_bytes(path, &encode_pgm16(img))?;
            write_sidecar(
                path,
                &Sidecar {
                    calib_min: Some(img.calib_min),
                    calib_max: Some(img.calib_max),
                    ..Sidecar::default()
                },
            )
        }
        _ => Err(ImgError::IncompatibleKind { format }),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ImgError> {
    std::fs::write(path, bytes).map_err(|e| ImgError::io(path, e))
}

// ---------------------------------------------------------------------------
// Netpbm-style header scanning
// ---------------------------------------------------------------------------

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Scanner { bytes, pos: 0 }
    }

    fn skip_ws_and_comments(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(&mut self) -> Result<(&'a str, usize), ImgError> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImgError::MalformedHeader {
                offset: start,
                reason: "unexpected end of header".into(),
            });
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| {
            ImgError::MalformedHeader {
                offset: start,
                reason: "non-ascii header token".into(),
            }
        })?;
        Ok((s, start))
    }

    fn usize_token(&mut self, what: &str) -> Result<usize, ImgError> {
        let (tok, offset) = self.token()?;
        tok.parse::<usize>().map_err(|_| ImgError::MalformedHeader {
            offset,
            reason: format!("expected {what}, found {tok:?}"),
        })
    }

    /// Consume exactly one whitespace byte after the last header token.
    fn end_header(&mut self) -> Result<usize, ImgError> {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            Ok(self.pos)
        } else {
            Err(ImgError::MalformedHeader {
                offset: self.pos,
                reason: "missing whitespace before payload".into(),
            })
        }
    }
}

fn check_dims(width: usize, height: usize, channels: usize) -> Result<usize, ImgError> {
    let px = (width as u64)
        .checked_mul(height as u64)
        .and_then(|n| n.checked_mul(channels as u64))
        .filter(|n| *n <= (1u64 << 33))
        .ok_or(ImgError::DimensionOverflow {
            width: width as u64,
            height: height as u64,
        })?;
    Ok(px as usize)
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Decode a color PFM. Only `PF` (3-channel) is accepted; scale sign selects
/// byte order. PFM scanlines are stored bottom-to-top.
pub fn decode_pfm(bytes: &[u8]) -> Result<RadianceImage, ImgError> {
    let mut sc = Scanner::new(bytes);
    let (magic, off) = sc.token()?;
    if magic != "PF" {
        return Err(ImgError::MalformedHeader {
            offset: off,
            reason: format!("expected PF magic, found {magic:?}"),
        });
    }
    let width = sc.usize_token("width")?;
    let height = sc.usize_token("height")?;
    let (scale_tok, scale_off) = sc.token()?;
    let scale: f32 = scale_tok.parse().map_err(|_| ImgError::MalformedHeader {
        offset: scale_off,
        reason: format!("bad scale {scale_tok:?}"),
    })?;
    if scale == 0.0 {
        return Err(ImgError::MalformedHeader {
            offset: scale_off,
            reason: "scale must be nonzero".into(),
        });
    }
    let payload = sc.end_header()?;
    let n = check_dims(width, height, 3)?;
    let need = n * 4;
    if bytes.len() - payload < need {
        return Err(ImgError::Truncated {
            offset: bytes.len(),
            expected: need - (bytes.len() - payload),
        });
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; n];
    // PFM rows run bottom-to-top on disk.
    for row in 0..height {
        let src_row = height - 1 - row;
        for i in 0..width * 3 {
            let at = payload + (src_row * width * 3 + i) * 4;
            let raw: [u8; 4] = bytes[at..at + 4].try_into().unwrap();
            let v = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[row * width * 3 + i] = v * scale.abs();
        }
    }
    RadianceImage::new(width, height, data)
}

/// Encode to color PFM, little-endian, scale -1.0 (one fixed convention).
pub fn encode_pfm(img: &RadianceImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + img.data.len() * 4);
    out.extend_from_slice(format!("PF\n{} {}\n-1.0\n", img.width, img.height).as_bytes());
    for row in (0..img.height).rev() {
        let start = row * img.width * 3;
        for v in &img.data[start..start + img.width * 3] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Radiance RGBE
// ---------------------------------------------------------------------------

/// Decode a Radiance `.hdr` file (flat or new-style RLE scanlines).
///
/// Mantissa convention: `value = (m + 0.5)/256 * 2^(e-128)`, `e == 0` decodes
/// to zero. Round trip through [`encode_rgbe`] is within 1% per channel for
/// samples above 1e-6 whose magnitude is within a factor ~2.5 of the pixel
/// maximum (shared-exponent quantization).
pub fn decode_rgbe(bytes: &[u8]) -> Result<RadianceImage, ImgError> {
    if !bytes.starts_with(b"#?") {
        return Err(ImgError::MalformedHeader {
            offset: 0,
            reason: "missing #? radiance signature".into(),
        });
    }
    // Header: lines until a blank line, then the resolution line.
    let mut pos = 0usize;
    let mut saw_blank = false;
    let mut resolution: Option<(usize, usize, usize)> = None;
    while pos < bytes.len() {
        let line_start = pos;
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .map(|i| pos + i)
            .ok_or(ImgError::Truncated {
                offset: bytes.len(),
                expected: 1,
            })?;
        let line = &bytes[line_start..end];
        pos = end + 1;
        if !saw_blank {
            if line.is_empty() {
                saw_blank = true;
            }
            continue;
        }
        // Resolution line, e.g. "-Y 480 +X 640".
        let text = std::str::from_utf8(line).map_err(|_| ImgError::MalformedHeader {
            offset: line_start,
            reason: "non-ascii resolution line".into(),
        })?;
        let parts: Vec<&str> = text.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "-Y" || parts[2] != "+X" {
            return Err(ImgError::MalformedHeader {
                offset: line_start,
                reason: format!("unsupported resolution line {text:?}"),
            });
        }
        let height = parts[1].parse::<usize>().map_err(|_| ImgError::MalformedHeader {
            offset: line_start,
            reason: "bad height".into(),
        })?;
        let width = parts[3].parse::<usize>().map_err(|_| ImgError::MalformedHeader {
            offset: line_start,
            reason: "bad width".into(),
        })?;
        resolution = Some((width, height, pos));
        break;
    }
    let (width, height, payload) = resolution.ok_or(ImgError::MalformedHeader {
        offset: pos,
        reason: "missing resolution line".into(),
    })?;
    check_dims(width, height, 4)?;

    let mut data = vec![0.0f32; width * height * 3];
    let mut pos = payload;
    let mut scan = vec![[0u8; 4]; width];
    for row in 0..height {
        pos = read_rgbe_scanline(bytes, pos, &mut scan, width)?;
        for (x, rgbe) in scan.iter().enumerate() {
            let px = rgbe_to_f32(*rgbe);
            let at = (row * width + x) * 3;
            data[at..at + 3].copy_from_slice(&px);
        }
    }
    RadianceImage::new(width, height, data)
}

fn rgbe_to_f32([r, g, b, e]: [u8; 4]) -> [f32; 3] {
    if e == 0 {
        return [0.0; 3];
    }
    let scale = (2.0f32).powi(e as i32 - 128) / 256.0;
    [
        (r as f32 + 0.5) * scale,
        (g as f32 + 0.5) * scale,
        (b as f32 + 0.5) * scale,
    ]
}

fn f32_to_rgbe(px: [f32; 3]) -> [u8; 4] {
    let v = px[0].max(px[1]).max(px[2]);
    if v < 1e-32 {
        return [0, 0, 0, 0];
    }
    // v = frac * 2^exp with frac in [0.5, 1)
    let exp = v.log2().floor() as i32 + 1;
    let scale = (2.0f32).powi(-exp) * 256.0;
    let quant = |c: f32| -> u8 { ((c * scale) as i32).clamp(0, 255) as u8 };
    [quant(px[0]), quant(px[1]), quant(px[2]), (exp + 128).clamp(0, 255) as u8]
}

fn read_rgbe_scanline(
    bytes: &[u8],
    mut pos: usize,
    scan: &mut [[u8; 4]],
    width: usize,
) -> Result<usize, ImgError> {
    let need = |pos: usize, n: usize| -> Result<(), ImgError> {
        if pos + n > bytes.len() {
            Err(ImgError::Truncated {
                offset: bytes.len(),
                expected: pos + n - bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(pos, 4)?;
    let head: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
    let is_rle = head[0] == 2
        && head[1] == 2
        && ((head[2] as usize) << 8 | head[3] as usize) == width
        && width >= 8
        && width < 32768;
    if !is_rle {
        // Flat scanline of width RGBE quadruples.
        need(pos, 4 * width)?;
        for px in scan.iter_mut() {
            px.copy_from_slice(&bytes[pos..pos + 4]);
            pos += 4;
        }
        return Ok(pos);
    }
    pos += 4;
    // New-style RLE: four planes, runs of (count, value) or literal spans.
    for ch in 0..4 {
        let mut x = 0usize;
        while x < width {
            need(pos, 1)?;
            let code = bytes[pos] as usize;
            pos += 1;
            if code > 128 {
                let run = code - 128;
                need(pos, 1)?;
                let value = bytes[pos];
                pos += 1;
                if x + run > width {
                    return Err(ImgError::InvalidData(format!(
                        "rle run overflows scanline at byte {pos}"
                    )));
                }
                for px in scan[x..x + run].iter_mut() {
                    px[ch] = value;
                }
                x += run;
            } else {
                need(pos, code)?;
                if x + code > width {
                    return Err(ImgError::InvalidData(format!(
                        "rle literal overflows scanline at byte {pos}"
                    )));
                }
                for (px, v) in scan[x..x + code].iter_mut().zip(&bytes[pos..pos + code]) {
                    px[ch] = *v;
                }
                pos += code;
                x += code;
            }
        }
    }
    Ok(pos)
}

/// Encode to Radiance `.hdr` with flat (uncompressed) scanlines.
pub fn encode_rgbe(img: &RadianceImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + img.width * img.height * 4);
    out.extend_from_slice(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n");
    out.extend_from_slice(format!("-Y {} +X {}\n", img.height, img.width).as_bytes());
    for px in img.data.chunks_exact(3) {
        out.extend_from_slice(&f32_to_rgbe([px[0], px[1], px[2]]));
    }
    out
}

// ---------------------------------------------------------------------------
// PNG / PPM / PGM16
// ---------------------------------------------------------------------------

fn decode_png(bytes: &[u8], exposure_time: f64) -> Result<SdrImage, ImgError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImgError::Png(e.to_string()))?
        .to_rgb8();
    SdrImage::new(
        img.width() as usize,
        img.height() as usize,
        img.into_raw(),
        exposure_time,
    )
}

fn encode_png(img: &SdrImage, path: &Path) -> Result<(), ImgError> {
    let file = File::create(path).map_err(|e| ImgError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let enc = image::codecs::png::PngEncoder::new(&mut w);
    image::ImageEncoder::write_image(
        enc,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| ImgError::Png(e.to_string()))?;
    w.flush().map_err(|e| ImgError::io(path, e))
}

fn decode_ppm(bytes: &[u8], exposure_time: f64) -> Result<SdrImage, ImgError> {
    let mut sc = Scanner::new(bytes);
    let (magic, off) = sc.token()?;
    if magic != "P6" {
        return Err(ImgError::MalformedHeader {
            offset: off,
            reason: format!("expected P6 magic, found {magic:?}"),
        });
    }
    let width = sc.usize_token("width")?;
    let height = sc.usize_token("height")?;
    let maxval = sc.usize_token("maxval")?;
    if maxval != 255 {
        return Err(ImgError::MalformedHeader {
            offset: sc.pos,
            reason: format!("only maxval 255 supported, found {maxval}"),
        });
    }
    let payload = sc.end_header()?;
    let n = check_dims(width, height, 3)?;
    if bytes.len() - payload < n {
        return Err(ImgError::Truncated {
            offset: bytes.len(),
            expected: n - (bytes.len() - payload),
        });
    }
    SdrImage::new(width, height, bytes[payload..payload + n].to_vec(), exposure_time)
}

fn encode_ppm(img: &SdrImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + img.data.len());
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend_from_slice(&img.data);
    out
}

/// 16-bit PGM, big-endian samples per Netpbm. Codes map linearly onto the
/// calibration range: `T = calib_min + code/65535 * (calib_max - calib_min)`.
fn decode_pgm16(bytes: &[u8], calib_min: f32, calib_max: f32) -> Result<IrImage, ImgError> {
    let mut sc = Scanner::new(bytes);
    let (magic, off) = sc.token()?;
    if magic != "P5" {
        return Err(ImgError::MalformedHeader {
            offset: off,
            reason: format!("expected P5 magic, found {magic:?}"),
        });
    }
    let width = sc.usize_token("width")?;
    let height = sc.usize_token("height")?;
    let maxval = sc.usize_token("maxval")?;
    if maxval != 65535 {
        return Err(ImgError::MalformedHeader {
            offset: sc.pos,
            reason: format!("only maxval 65535 supported, found {maxval}"),
        });
    }
    let payload = sc.end_header()?;
    let n = check_dims(width, height, 1)?;
    if bytes.len() - payload < n * 2 {
        return Err(ImgError::Truncated {
            offset: bytes.len(),
            expected: n * 2 - (bytes.len() - payload),
        });
    }
    let span = calib_max - calib_min;
    let data = bytes[payload..payload + n * 2]
        .chunks_exact(2)
        .map(|c| {
            let code = u16::from_be_bytes([c[0], c[1]]);
            calib_min + code as f32 / 65535.0 * span
        })
        .collect();
    IrImage::new(width, height, data, calib_min, calib_max)
}

fn encode_pgm16(img: &IrImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + img.data.len() * 2);
    out.extend_from_slice(format!("P5\n{} {}\n65535\n", img.width, img.height).as_bytes());
    let span = img.calib_max - img.calib_min;
    for t in &img.data {
        let code = (((t - img.calib_min) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&code.to_be_bytes());
    }
    out
}

/// Buffered reader open helper shared by CLI code.
pub fn open_buffered(path: &Path) -> Result<BufReader<File>, ImgError> {
    File::open(path).map(BufReader::new).map_err(|e| ImgError::io(path, e))
}

/// Read a whole file; error carries the path.
pub fn read_all(path: &Path) -> Result<Vec<u8>, ImgError> {
    let mut buf = Vec::new();
    open_buffered(path)?
        .read_to_end(&mut buf)
        .map_err(|e| ImgError::io(path, e))?;
    Ok(buf)
}
