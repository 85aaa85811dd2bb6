//! Ingestion and persistence of anomaly maps, masks, rasters and JSON artifacts.
//!
//! Anomaly maps come in two on-disk flavours:
//!
//! * `png16`: 16-bit grayscale PNG, values mapped to `[0, 1]` by `v / 65535`.
//! * `f32raw`: little-endian `f32`, row-major, with a JSON sidecar next to it
//!   (same stem, `.json` extension) holding `{"width", "height", "dtype": "f32le"}`.
//!
//! JSON artifacts (manifests, reports) are written pretty-printed with a
//! trailing newline. Struct field order is fixed and maps are ordered, so
//! repeated writes of equal values are byte-identical.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

/// Per-pixel anomaly scores, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    width: usize,
    height: usize,
    scores: Vec<f64>,
    normalized: bool,
    source_expert: String,
}

impl AnomalyMap {
    pub fn new(
        width: usize,
        height: usize,
        scores: Vec<f64>,
        normalized: bool,
        source_expert: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Integrity(format!(
                "anomaly map dimensions must be positive, got {width}x{height}"
            )));
        }
        if scores.len() != width * height {
            return Err(Error::Integrity(format!(
                "anomaly map has {} scores, expected {width}x{height} = {}",
                scores.len(),
                width * height
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Integrity(format!(
                "non-finite score {} at index {i}",
                scores[i]
            )));
        }
        if normalized {
            if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::Integrity(format!(
                    "normalized map has score {} outside [0, 1] at index {i}",
                    scores[i]
                )));
            }
        }
        Ok(Self {
            width,
            height,
            scores,
            normalized,
            source_expert: source_expert.into(),
        })
    }

    /// Raw (unnormalized) map.
    pub fn raw(width: usize, height: usize, scores: Vec<f64>) -> Result<Self> {
        Self::new(width, height, scores, false, "")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn source_expert(&self) -> &str {
        &self.source_expert
    }

    pub fn with_source_expert(mut self, expert: impl Into<String>) -> Self {
        self.source_expert = expert.into();
        self
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(s), hi.max(s))
            })
    }

    /// Nearest-neighbour resample to a new size.
    pub fn resample_nearest(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "cannot resample to {width}x{height}"
            )));
        }
        let mut scores = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = ((2 * y + 1) * self.height) / (2 * height);
            for x in 0..width {
                let sx = ((2 * x + 1) * self.width) / (2 * width);
                scores.push(self.get(sx, sy));
            }
        }
        Ok(Self {
            width,
            height,
            scores,
            normalized: self.normalized,
            source_expert: self.source_expert.clone(),
        })
    }

    pub(crate) fn from_parts_unchecked(
        width: usize,
        height: usize,
        scores: Vec<f64>,
        normalized: bool,
        source_expert: String,
    ) -> Self {
        debug_assert_eq!(scores.len(), width * height);
        Self {
            width,
            height,
            scores,
            normalized,
            source_expert,
        }
    }
}

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Integrity(format!(
                "mask has {} bits, expected {width}x{height} = {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Metadata for one image in a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: usize,
    pub height: usize,
    pub product_class: String,
    pub sample_id: String,
    pub label: Label,
}

/// Interleaved 8-bit raster (1 = gray, 3 = RGB, 4 = RGBA channels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::Argument(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Integrity(format!(
                "raster has {} bytes, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Copies a `w`x`h` window starting at `(x0, y0)`. Caller guarantees bounds.
    pub(crate) fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Raster {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }

    /// Writes `patch` back at `(x0, y0)`.
    pub fn embed(&mut self, patch: &Raster, x0: usize, y0: usize) -> Result<()> {
        if patch.channels != self.channels
            || x0 + patch.width > self.width
            || y0 + patch.height > self.height
        {
            return Err(Error::Argument(format!(
                "patch {}x{}x{} does not fit at ({x0}, {y0}) in {}x{}x{}",
                patch.width, patch.height, patch.channels, self.width, self.height, self.channels
            )));
        }
        let c = self.channels;
        for row in 0..patch.height {
            let dst = ((y0 + row) * self.width + x0) * c;
            let src = row * patch.width * c;
            self.data[dst..dst + patch.width * c]
                .copy_from_slice(&patch.data[src..src + patch.width * c]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFormat {
    Png16,
    F32raw,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    width: usize,
    height: usize,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expert: Option<String>,
}

const F32_DTYPE: &str = "f32le";

/// Sidecar location for an `f32raw` map.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn decode_png(path: &Path) -> Result<DynamicImage> {
    let bytes = read_bytes(path)?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_anomaly_map(path: &Path, format: MapFormat) -> Result<AnomalyMap> {
    let expert = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        MapFormat::Png16 => {
            let img = match decode_png(path)? {
                DynamicImage::ImageLuma16(img) => img,
                other => {
                    return Err(Error::format(
                        path,
                        format!("expected 16-bit grayscale PNG, found {:?}", other.color()),
                    ))
                }
            };
            let (w, h) = img.dimensions();
            let scores = img
                .into_raw()
                .into_iter()
                .map(|v| f64::from(v) / 65535.0)
                .collect();
            AnomalyMap::new(w as usize, h as usize, scores, true, expert)
        }
        MapFormat::F32raw => {
            let side = sidecar_path(path);
            let sidecar: Sidecar = read_json(&side)?;
            if sidecar.dtype != F32_DTYPE {
                return Err(Error::format(
                    &side,
                    format!("unsupported dtype `{}`, expected `{F32_DTYPE}`", sidecar.dtype),
                ));
            }
            let bytes = read_bytes(path)?;
            if bytes.len() % 4 != 0 {
                return Err(Error::format(
                    path,
                    format!("payload length {} is not a multiple of 4", bytes.len()),
                ));
            }
            let n = bytes.len() / 4;
            if n != sidecar.width * sidecar.height {
                return Err(Error::Integrity(format!(
                    "{}: sidecar declares {}x{} = {} values but payload holds {n}",
                    path.display(),
                    sidecar.width,
                    sidecar.height,
                    sidecar.width * sidecar.height
                )));
            }
            let scores = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            AnomalyMap::new(
                sidecar.width,
                sidecar.height,
                scores,
                false,
                sidecar.expert.unwrap_or(expert),
            )
        }
    }
}

/// Writes a map in the given format. `png16` requires a normalized map and
/// quantizes to `round(v * 65535)`; `f32raw` narrows scores to `f32`.
pub fn write_anomaly_map(map: &AnomalyMap, path: &Path, format: MapFormat) -> Result<()> {
    ensure_parent(path)?;
    match format {
        MapFormat::Png16 => {
            if !map.normalized {
                return Err(Error::Argument(
                    "png16 output requires a normalized map".into(),
                ));
            }
            let raw: Vec<u16> = map
                .scores
                .iter()
                .map(|&s| (s * 65535.0).round() as u16)
                .collect();
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(map.width as u32, map.height as u32, raw)
                    .expect("buffer length matches dimensions");
            buf.save_with_format(path, ImageFormat::Png)
                .map_err(|e| Error::format(path, e.to_string()))
        }
        MapFormat::F32raw => {
            let mut bytes = Vec::with_capacity(map.scores.len() * 4);
            for &s in &map.scores {
                bytes.extend_from_slice(&(s as f32).to_le_bytes());
            }
            fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
            let sidecar = Sidecar {
                width: map.width,
                height: map.height,
                dtype: F32_DTYPE.into(),
                expert: (!map.source_expert.is_empty()).then(|| map.source_expert.clone()),
            };
            write_json(&sidecar, &sidecar_path(path))
        }
    }
}

/// Loads an 8-bit grayscale PNG mask; any nonzero pixel is `true`.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    match decode_png(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let bits = img.into_raw().into_iter().map(|v| v != 0).collect();
            BinaryMask::new(w as usize, h as usize, bits)
        }
        other => Err(Error::format(
            path,
            format!("expected 8-bit grayscale PNG mask, found {:?}", other.color()),
        )),
    }
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let raw: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, raw)
            .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Loads an 8-bit gray, RGB or RGBA PNG as a raster.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let img = decode_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => Raster::new(w, h, 1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => Raster::new(w, h, 3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => Raster::new(w, h, 4, b.into_raw()),
        other => Err(Error::format(
            path,
            format!("unsupported raster color type {:?}", other.color()),
        )),
    }
}

pub fn write_raster(raster: &Raster, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let color = match raster.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => image::ExtendedColorType::Rgba8,
    };
    image::save_buffer_with_format(
        path,
        &raster.data,
        raster.width as u32,
        raster.height as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("directory {} does not exist", dir.display()),
            ),
        )),
        _ => Ok(()),
    }
}

/// Canonical JSON encoding used for every persisted artifact.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact types serialize");
    s.push('\n');
    s
}

/// Writes a manifest or report as canonical JSON.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, to_canonical_json(value)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// One compact JSON value per line, UTF-8, `\n` terminated.
pub fn write_jsonl<'a, T, I>(items: I, path: &Path) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record types serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSONL, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_png16(path: &Path, w: u32, h: u32, px: Vec<u16>) {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, px).unwrap();
        buf.save_with_format(path, ImageFormat::Png).unwrap();
    }

    #[test]
    fn png16_linear_mapping() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_png16(&p, 2, 2, vec![0, 65535, 32768, 0]);
        let map = load_anomaly_map(&p, MapFormat::Png16).unwrap();
        assert!(map.is_normalized());
        assert_eq!((map.width(), map.height()), (2, 2));
        assert_eq!(map.scores()[0], 0.0);
        assert_eq!(map.scores()[1], 1.0);
        assert!((map.scores()[2] - 32768.0 / 65535.0).abs() < 1e-15);
        assert!(map.scores()[2] > 0.500_007 && map.scores()[2] < 0.500_008);
    }

    #[test]
    fn png8_rejected_as_map() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_mask(&BinaryMask::empty(2, 2), &p).unwrap();
        assert!(matches!(
            load_anomaly_map(&p, MapFormat::Png16),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn f32raw_identity_load() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.f32");
        fs::write(&p, 3.5f32.to_le_bytes()).unwrap();
        fs::write(
            sidecar_path(&p),
            r#"{"width":1,"height":1,"dtype":"f32le"}"#,
        )
        .unwrap();
        let map = load_anomaly_map(&p, MapFormat::F32raw).unwrap();
        assert_eq!(map.scores(), &[3.5]);
        assert!(!map.is_normalized());
    }

    #[test]
    fn f32raw_dimension_mismatch_is_integrity_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.f32");
        fs::write(&p, [0u8; 12]).unwrap();
        fs::write(
            sidecar_path(&p),
            r#"{"width":2,"height":2,"dtype":"f32le"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_anomaly_map(&p, MapFormat::F32raw),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn f32raw_nan_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let mut bytes = 1.0f32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        fs::write(
            sidecar_path(&p),
            r#"{"width":2,"height":1,"dtype":"f32le"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_anomaly_map(&p, MapFormat::F32raw),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn f32raw_truncated_payload_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.f32");
        fs::write(&p, [0u8; 5]).unwrap();
        fs::write(
            sidecar_path(&p),
            r#"{"width":1,"height":1,"dtype":"f32le"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_anomaly_map(&p, MapFormat::F32raw),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn mask_nonzero_is_true() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("mask.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(2, 1, vec![0, 255]).unwrap();
        buf.save(&p).unwrap();
        assert_eq!(load_mask(&p).unwrap().bits(), &[false, true]);

        let zeros: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(3, 2, vec![0; 6]).unwrap();
        zeros.save(&p).unwrap();
        assert_eq!(load_mask(&p).unwrap().count_true(), 0);
    }

    #[test]
    fn rgb_mask_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("mask.png");
        let r = Raster::new(2, 1, 3, vec![0, 0, 0, 255, 255, 255]).unwrap();
        write_raster(&r, &p).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_writes_are_byte_identical_and_round_trip() {
        let dir = tempdir().unwrap();
        let meta = ImageMeta {
            width: 4,
            height: 3,
            product_class: "cable".into(),
            sample_id: "s1".into(),
            label: Label::Abnormal,
        };
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        write_json(&meta, &a).unwrap();
        write_json(&meta, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back: ImageMeta = read_json(&a).unwrap();
        assert_eq!(back, meta);
    }

    #[test]
    fn write_to_missing_directory_names_it() {
        let dir = tempdir().unwrap();
        let missing = dir.path().join("nope");
        let err = write_json(&1u8, &missing.join("x.json")).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn resample_nearest_upsamples_blockwise() {
        let m = AnomalyMap::raw(2, 1, vec![1.0, 2.0]).unwrap();
        let r = m.resample_nearest(4, 2).unwrap();
        assert_eq!(r.scores(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn crop_embed_helpers() {
        let data: Vec<u8> = (0..48).collect();
        let r = Raster::new(4, 4, 3, data).unwrap();
        let w = r.window(1, 1, 2, 2);
        let mut blank = Raster::new(4, 4, 3, vec![0; 48]).unwrap();
        blank.embed(&w, 1, 1).unwrap();
        assert_eq!(blank.window(1, 1, 2, 2), w);
        assert!(blank.embed(&w, 3, 3).is_err());
    }
}
