//! Annotation files and image codecs.
//!
//! Annotations are JSON lines:
//! `{"image": path, "persons": [{"kp": [[x, y], ...], "visible": [...], "present": [...]}], "active": i, "head_len": h, "torso_len": t}`.
//! Images are binary PPM (`P6`) or PNG.

use std::fs;
use std::io::{BufRead, BufReader, Cursor};
use std::path::{Path, PathBuf};

use rpose_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervision::{Person, PoseAnnotation};
use crate::util::atomic_write;

/// One line of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub persons: Vec<Person>,
    pub active: usize,
    pub head_len: f64,
    pub torso_len: f64,
}

impl AnnotationRecord {
    pub fn new(image: impl Into<String>, ann: &PoseAnnotation) -> Self {
        Self {
            image: image.into(),
            persons: ann.persons.clone(),
            active: ann.active,
            head_len: ann.head_len,
            torso_len: ann.torso_len,
        }
    }

    pub fn annotation(&self) -> PoseAnnotation {
        PoseAnnotation {
            persons: self.persons.clone(),
            active: self.active,
            head_len: self.head_len,
            torso_len: self.torso_len,
        }
    }
}

/// Parses and validates an annotation file. All lines must agree on the
/// keypoint count; blank lines are skipped.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    let mut keypoints = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let k = rec.persons.first().map_or(0, Person::len);
        let expected = *keypoints.get_or_insert(k);
        rec.annotation()
            .validate(expected, None)
            .map_err(|e| Error::Validation(format!("{}:{lineno}: {e}", path.display())))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Resolves an image reference relative to the annotation file's directory.
pub fn resolve_image(annotations: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        annotations.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn to_bytes(image: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!("expected a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(d[c * plane + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((h, w, bytes))
}

fn from_interleaved(h: usize, w: usize, channels: usize, bytes: &[u8]) -> Result<Tensor<f32>> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            // Grey images repeat their single channel.
            let src = if channels < 3 { 0 } else { c };
            data[c * plane + i] = bytes[i * channels + src] as f32;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

/// Encodes a `3 × H × W` image with values in `[0, 255]` (rounded, clamped) as binary PPM.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, bytes) = to_bytes(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&bytes);
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    atomic_write(path, &encode_ppm(image)?)
}

/// Binary 8-bit greyscale PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Contract(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    atomic_write(path, &out)
}

fn pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!("expected {} image", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // Whitespace and `#` comments separate the header fields.
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
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
    }
    if fields[2] == 0 || fields[2] > 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {}", fields[2])));
    }
    // Exactly one whitespace byte precedes the raster.
    Ok((fields[0], fields[1], pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, start) = pnm_header(bytes, b"P6")?;
    let len = 3 * w * h;
    if w == 0 || h == 0 || bytes.len() < start + len {
        return Err(Error::Format("truncated PPM raster".into()));
    }
    from_interleaved(h, w, 3, &bytes[start..start + len])
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let fmt = |e: png::DecodingError| Error::Format(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("png: palette was not expanded".into())),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let rows: Vec<u8> = buf[..info.buffer_size()]
        .chunks(info.line_size)
        .flat_map(|row| row[..w * channels].iter().copied())
        .collect();
    from_interleaved(h, w, channels, &rows)
}

pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, bytes) = to_bytes(image)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| Error::Format(format!("png: {e}"));
        let mut writer = enc.write_header().map_err(fmt)?;
        writer.write_image_data(&bytes).map_err(fmt)?;
    }
    Ok(out)
}

/// Reads a PPM or PNG image as `3 × H × W` with values in `[0, 255]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else {
        Err(Error::Format(format!("{}: neither PPM (P6) nor PNG", path.display())))
    }
}
