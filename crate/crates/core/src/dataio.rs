//! On-disk formats and in-memory containers.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! "PMFT" | u16 version=1 | u16 flags | u32 C | u32 H | u32 W
//! C*H*W f32, channel-major, row-major within a channel
//! u32 byte length | UTF-8 source id
//! ```
//!
//! Label files are 8-bit single-channel PNG (255 = ignore). Manifests are
//! tab-separated text preceded by a `K=<int>` header line.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage as ImgRgb};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"PMFT";
pub const FEATURE_VERSION: u16 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 2 + 2 + 4 * 3;

/// Reserved label id for pixels that carry no class.
pub const IGNORE: u8 = 255;

/// Training batch size used when none is configured.
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Dense `C x H x W` feature tensor for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    source_id: String,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = checked_volume(channels, height, width)?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "expected {expected} values for {channels}x{height}x{width}, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            source_id: source_id.into(),
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        let len = checked_volume(channels, height, width)?;
        Self::new(channels, height, width, vec![0.0; len], "")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions, `H * W`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    /// Values of channel `c` over all positions.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.positions();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, position: usize) -> f32 {
        self.data[c * self.positions() + position]
    }

    /// Channel vector at a flat row-major position.
    pub fn vector(&self, position: usize) -> Vec<f64> {
        let n = self.positions();
        (0..self.channels)
            .map(|c| f64::from(self.data[c * n + position]))
            .collect()
    }

    pub(crate) fn from_parts_unchecked(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        source_id: String,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
            source_id,
        }
    }
}

fn checked_volume(c: usize, h: usize, w: usize) -> Result<usize> {
    c.checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::DimensionOverflow(format!("{c}x{h}x{w} exceeds addressable size")))
}

/// Writes `map` in the PMFT format.
pub fn write_feature_file(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    if let Some(index) = map.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { index });
    }
    let mut out = BufWriter::new(fs::File::create(path.as_ref())?);
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes())?;
    out.write_all(&0u16.to_le_bytes())?;
    for dim in [map.channels, map.height, map.width] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::DimensionOverflow(format!("dimension {dim} exceeds u32")))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    for v in &map.data {
        out.write_all(&v.to_le_bytes())?;
    }
    let id = map.source_id.as_bytes();
    out.write_all(&(id.len() as u32).to_le_bytes())?;
    out.write_all(id)?;
    out.flush()?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let bytes = read_existing(path.as_ref())?;
    decode_feature_bytes(&bytes)
}

/// Parses a PMFT byte buffer.
pub fn decode_feature_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, header needs {FEATURE_HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(8), dim(12), dim(16));
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {c}x{h}x{w}")));
    }
    let count = checked_volume(c, h, w)?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::DimensionOverflow(format!("{c}x{h}x{w} payload overflows")))?;
    let payload_end = FEATURE_HEADER_LEN
        .checked_add(payload_len)
        .ok_or_else(|| Error::DimensionOverflow(format!("{c}x{h}x{w} payload overflows")))?;
    if bytes.len() < payload_end + 4 {
        return Err(Error::MalformedHeader(format!(
            "truncated payload: {c}x{h}x{w} needs {} bytes, file has {}",
            payload_end + 4,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for (index, chunk) in bytes[FEATURE_HEADER_LEN..payload_end]
        .chunks_exact(4)
        .enumerate()
    {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { index });
        }
        data.push(v);
    }
    let id_len = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap()) as usize;
    let id_bytes = bytes
        .get(payload_end + 4..payload_end + 4 + id_len)
        .ok_or_else(|| Error::MalformedHeader("truncated source id".into()))?;
    let source_id = String::from_utf8(id_bytes.to_vec())
        .map_err(|_| Error::MalformedHeader("source id is not UTF-8".into()))?;
    Ok(FeatureMap::from_parts_unchecked(c, h, w, data, source_id))
}

fn read_existing(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::IoFailure(e),
    })
}

/// RGB image with channel-major values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch("image dimensions must be positive".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(format!(
                "image value at {index} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `(r, g, b)` at a flat pixel index, in `[0, 1]`.
    pub fn pixel(&self, index: usize) -> [f32; 3] {
        let n = self.height * self.width;
        [self.data[index], self.data[n + index], self.data[2 * n + index]]
    }
}

/// Reads an 8-bit PNG or PPM image.
pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * n + i] = f32::from(px[ch]) / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

pub fn write_image_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let n = img.height * img.width;
    let buf: ImgRgb = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let i = y as usize * img.width + x as usize;
        let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([q(img.data[i]), q(img.data[n + i]), q(img.data[2 * n + i])])
    });
    buf.save(path.as_ref())?;
    Ok(())
}

/// Per-pixel class ids with [`IGNORE`] for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "label map {height}x{width} with {} ids",
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Result<Self> {
        Self::new(height, width, vec![id; height * width])
    }

    /// Rejects ids that are neither below `k` nor [`IGNORE`].
    pub fn validate(&self, k: usize) -> Result<()> {
        match self
            .ids
            .iter()
            .position(|&id| id != IGNORE && usize::from(id) >= k)
        {
            Some(i) => Err(Error::InvalidLabel(format!(
                "id {} at pixel {i} is not below K={k}",
                self.ids[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Reads an 8-bit single-channel PNG label map and checks ids against `k`.
pub fn read_label_png(path: impl AsRef<Path>, k: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::InvalidLabel(format!(
                "{} is {:?}, expected 8-bit single channel",
                path.display(),
                other.color()
            )))
        }
    };
    let labels = LabelMap::new(gray.height() as usize, gray.width() as usize, gray.into_raw())?;
    labels.validate(k)?;
    Ok(labels)
}

pub fn write_label_png(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(
        labels.width as u32,
        labels.height as u32,
        labels.ids.clone(),
    )
    .expect("label buffer matches its dimensions");
    img.save(path.as_ref())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub feature_path: PathBuf,
    pub aug_feature_path: Option<PathBuf>,
    pub image_path: Option<PathBuf>,
    pub label_path: Option<PathBuf>,
}

impl ManifestRecord {
    pub fn load_features(&self) -> Result<FeatureMap> {
        read_feature_file(&self.feature_path)
    }

    pub fn load_aug_features(&self) -> Result<Option<FeatureMap>> {
        self.aug_feature_path.as_ref().map(read_feature_file).transpose()
    }

    pub fn load_image(&self) -> Result<Option<RgbImage>> {
        self.image_path.as_ref().map(read_image).transpose()
    }

    pub fn load_label(&self, k: usize) -> Result<Option<LabelMap>> {
        self.label_path
            .as_ref()
            .map(|p| read_label_png(p, k))
            .transpose()
    }

    /// File stem of the feature path, used to name per-image outputs.
    pub fn stem(&self) -> String {
        self.feature_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "record".into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub num_classes: usize,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidManifest(format!("K must be at least 2, got {num_classes}")));
        }
        if num_classes > usize::from(IGNORE) {
            return Err(Error::InvalidManifest(format!(
                "K={num_classes} does not fit 8-bit labels"
            )));
        }
        Ok(Self { records, num_classes })
    }

    /// Parses manifest text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::InvalidManifest("missing K=<int> header".into()))?;
        let k = header
            .trim()
            .strip_prefix("K=")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::InvalidManifest(format!("bad header line {header:?}")))?;
        let mut records = Vec::new();
        for (lineno, line) in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::InvalidManifest(format!(
                    "line {}: expected 4 tab-separated columns, got {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let col = |s: &str| -> Option<PathBuf> {
                let s = s.trim();
                (s != "-" && !s.is_empty()).then(|| base.join(s))
            };
            let feature_path = col(cols[0]).ok_or_else(|| {
                Error::InvalidManifest(format!("line {}: feature column is required", lineno + 1))
            })?;
            records.push(ManifestRecord {
                feature_path,
                aug_feature_path: col(cols[1]),
                image_path: col(cols[2]),
                label_path: col(cols[3]),
            });
        }
        Self::new(records, k)
    }

    /// Reads a manifest file and checks that every referenced path exists.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = String::from_utf8(read_existing(path)?)
            .map_err(|_| Error::InvalidManifest("manifest is not UTF-8".into()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let manifest = Self::parse(&text, base)?;
        for rec in &manifest.records {
            let paths = std::iter::once(&rec.feature_path)
                .chain(rec.aug_feature_path.iter())
                .chain(rec.image_path.iter())
                .chain(rec.label_path.iter());
            for p in paths {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        Ok(manifest)
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Option<PathBuf>| match p {
            Some(p) => p.strip_prefix(base).unwrap_or(p).display().to_string(),
            None => "-".into(),
        };
        let mut out = format!("K={}\n", self.num_classes);
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                rel(&Some(r.feature_path.clone())),
                rel(&r.aug_feature_path),
                rel(&r.image_path),
                rel(&r.label_path)
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        fs::write(path, self.to_text(base))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One epoch over a manifest in fixed-size batches.
///
/// Without a seed records come in insertion order; with a seed the order is
/// a ChaCha8 shuffle keyed by it. The last batch may be short.
pub struct ManifestBatches<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    batch: usize,
    cursor: usize,
}

impl Iterator for ManifestBatches<'_> {
    type Item = Vec<ManifestRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let batch = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.manifest.records[i].clone())
            .collect();
        self.cursor = end;
        Some(batch)
    }
}

pub fn iterate_manifest(
    manifest: &DatasetManifest,
    batch: usize,
    shuffle_seed: Option<u64>,
) -> Result<ManifestBatches<'_>> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(ManifestBatches {
        manifest,
        order,
        batch,
        cursor: 0,
    })
}
