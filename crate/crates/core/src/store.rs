//! On-disk formats: tensor containers for model and autoencoder weights,
//! image datasets, and the content-addressed analysis cache.
//!
//! Tensor container layout:
//!
//! ```text
//! magic "VLTENSOR" | u64 LE manifest length | JSON manifest | f32 LE blob
//! ```
//!
//! The manifest records the format version, a `kind` ("vit" or
//! "autoencoder"), the kind's config and one `{name, shape, offset}`
//! descriptor per tensor, with byte offsets into the blob.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AeShape, AutoencoderWeights};
use crate::error::{Error, LoadError, Result};
use crate::synth::{shape_image, SHAPE_CLASSES};
use crate::vit::{Image, ModelConfig, ModelWeights};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VLTENSOR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes named tensors into a container.
pub fn encode_container(kind: &str, config: serde_json::Value, tensors: &[(String, Vec<usize>, &[f32])]) -> Vec<u8> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: blob.len(),
        });
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = ContainerManifest {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        tensors: entries,
    };
    let text = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + text.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&blob);
    out
}

/// Container config plus each descriptor with its values.
pub type DecodedContainer = (serde_json::Value, Vec<(TensorEntry, Vec<f32>)>);

/// Parses a container, checking the header, version, kind and that the
/// descriptors tile the blob exactly.
pub fn decode_container(
    bytes: &[u8],
    kind: &str,
) -> std::result::Result<DecodedContainer, LoadError> {
    if bytes.len() < 16 {
        return Err(LoadError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(LoadError::Manifest("not a tensor container (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let text = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or(LoadError::Truncated)?;
    let manifest: ContainerManifest =
        serde_json::from_slice(text).map_err(|e| LoadError::Manifest(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(LoadError::Version {
            found: manifest.version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.kind != kind {
        return Err(LoadError::Manifest(format!(
            "container holds `{}`, expected `{kind}`",
            manifest.kind
        )));
    }
    let blob = &bytes[16 + len..];
    let mut expected_offset = 0usize;
    for t in &manifest.tensors {
        if t.offset != expected_offset {
            return Err(LoadError::Offset {
                name: t.name.clone(),
                expected: expected_offset,
                found: t.offset,
            });
        }
        expected_offset += 4 * t.shape.iter().product::<usize>();
    }
    if blob.len() != expected_offset {
        return Err(LoadError::BlobSize {
            expected: expected_offset,
            found: blob.len(),
        });
    }
    let tensors = manifest
        .tensors
        .into_iter()
        .map(|t| {
            let n = t.shape.iter().product::<usize>();
            let data = blob[t.offset..t.offset + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            (t, data)
        })
        .collect();
    Ok((manifest.config, tensors))
}

/// Matches decoded tensors against the required layout by name and shape,
/// returning them in layout order.
fn arrange(
    layout: Vec<(String, Vec<usize>)>,
    tensors: Vec<(TensorEntry, Vec<f32>)>,
) -> std::result::Result<Vec<Vec<f32>>, LoadError> {
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(tensors.len());
    for (entry, data) in tensors {
        if by_name.contains_key(&entry.name) {
            return Err(LoadError::DuplicateTensor(entry.name));
        }
        by_name.insert(entry.name, (entry.shape, data));
    }
    let mut out = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let (found, data) = by_name
            .remove(&name)
            .ok_or_else(|| LoadError::MissingTensor(name.clone()))?;
        if found != shape {
            return Err(LoadError::TensorShape {
                name,
                expected: shape,
                found,
            });
        }
        out.push(data);
    }
    if let Some(name) = by_name.into_keys().min() {
        return Err(LoadError::UnexpectedTensor(name));
    }
    Ok(out)
}

pub fn model_to_bytes(weights: &ModelWeights) -> Vec<u8> {
    let layout = ModelWeights::tensor_layout(&weights.config);
    let tensors: Vec<(String, Vec<usize>, &[f32])> = layout
        .into_iter()
        .zip(weights.tensors())
        .map(|((name, shape), data)| (name, shape, data))
        .collect();
    encode_container(
        "vit",
        serde_json::to_value(weights.config).expect("config serializes"),
        &tensors,
    )
}

pub fn model_from_bytes(bytes: &[u8]) -> std::result::Result<ModelWeights, LoadError> {
    let (config, tensors) = decode_container(bytes, "vit")?;
    let config: ModelConfig = serde_json::from_value(config).map_err(|e| LoadError::Config(e.to_string()))?;
    config.validate().map_err(LoadError::Config)?;
    let ordered = arrange(ModelWeights::tensor_layout(&config), tensors)?;
    ModelWeights::from_tensors(config, ordered)
}

pub fn save_model(path: &Path, weights: &ModelWeights) -> Result<()> {
    write_atomic(path, &model_to_bytes(weights))
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(model_from_bytes(&bytes)?)
}

/// Seeded, training-free weights for a configuration.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ModelWeights> {
    ModelWeights::init(config, seed)
}

/// Hex SHA-256 of the model's container encoding.
pub fn model_digest(weights: &ModelWeights) -> String {
    hex::encode(Sha256::digest(model_to_bytes(weights)))
}

pub fn autoencoder_to_bytes(weights: &AutoencoderWeights) -> Vec<u8> {
    let tensors: Vec<(String, Vec<usize>, &[f32])> = weights
        .tensor_layout()
        .into_iter()
        .zip(weights.params())
        .map(|((name, shape), data)| (name, shape, data))
        .collect();
    encode_container(
        "autoencoder",
        serde_json::to_value(weights.shape()).expect("shape serializes"),
        &tensors,
    )
}

pub fn autoencoder_from_bytes(bytes: &[u8]) -> std::result::Result<AutoencoderWeights, LoadError> {
    let (config, tensors) = decode_container(bytes, "autoencoder")?;
    let shape: AeShape = serde_json::from_value(config).map_err(|e| LoadError::Config(e.to_string()))?;
    let layout = AutoencoderWeights::<f32>::zeros(shape.side, shape.latent)
        .map_err(|e| LoadError::Config(e.to_string()))?
        .tensor_layout();
    AutoencoderWeights::from_tensors(shape, arrange(layout, tensors)?)
}

/// Writes through a temporary sibling and renames it into place after an
/// fsync, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Images and datasets

/// Decodes a square RGB image from PNG or binary PPM (P6) bytes, returning
/// its side length and RGB8 pixels.
pub fn decode_image(bytes: &[u8]) -> Result<(usize, Vec<u8>)> {
    let (w, h, rgb) = if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)?
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)?
    } else {
        return Err(Error::Dataset("unsupported image format (expected PNG or P6 PPM)".into()));
    };
    if w != h {
        return Err(Error::Dataset(format!("image is {w}x{h}, expected a square")));
    }
    Ok((w, rgb))
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |e: png::DecodingError| Error::Dataset(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Dataset("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Dataset("png: unexpanded palette".into())),
    };
    let rgb = buf
        .chunks_exact(channels)
        .flat_map(|px| match channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        })
        .collect();
    Ok((info.width as usize, info.height as usize, rgb))
}

fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Dataset(format!("ppm: {msg}"));
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    let data = &bytes[pos + 1..];
    if data.len() < w * h * 3 {
        return Err(bad("truncated pixel data"));
    }
    let rgb = data[..w * h * 3]
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Ok((w, h, rgb))
}

pub fn encode_png(side: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, side as u32, side as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bad = |e: png::EncodingError| Error::Dataset(format!("png: {e}"));
        let mut writer = enc.write_header().map_err(bad)?;
        writer.write_image_data(rgb).map_err(bad)?;
        writer.finish().map_err(bad)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image_id: String,
    /// Relative to the dataset root.
    pub path: String,
    pub class_index: usize,
    pub class_name: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

pub const DATASET_MANIFEST: &str = "manifest.csv";

impl Dataset {
    /// Reads `manifest.csv` (header `image_id,path,class_index,class_name`).
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(DATASET_MANIFEST);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries: Vec<DatasetEntry> = Vec::new();
        for (i, row) in csv::Reader::from_reader(file).deserialize().enumerate() {
            let entry: DatasetEntry =
                row.map_err(|e| Error::Dataset(format!("{}: row {}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate image id `{}`", e.image_id)));
            }
        }
        if entries.is_empty() {
            return Err(Error::Dataset(format!("{} lists no images", path.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn write_manifest(&self) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Dataset(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        write_atomic(&self.root.join(DATASET_MANIFEST), &bytes)
    }

    /// Class names indexed by class; classes never seen are named by index.
    pub fn class_names(&self, num_classes: usize) -> Vec<String> {
        let mut names: Vec<String> = (0..num_classes).map(|i| format!("class_{i}")).collect();
        for e in &self.entries {
            if let Some(slot) = names.get_mut(e.class_index) {
                slot.clone_from(&e.class_name);
            }
        }
        names
    }

    pub fn read_rgb(&self, entry: &DatasetEntry) -> Result<(usize, Vec<u8>)> {
        let path = self.root.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_image(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    /// Loads and standardizes one image, checking it against the model.
    pub fn load_image(&self, entry: &DatasetEntry, config: &ModelConfig) -> Result<Image> {
        if entry.class_index >= config.num_classes {
            return Err(Error::Dataset(format!(
                "image `{}` has class {} but the model has {} classes",
                entry.image_id, entry.class_index, config.num_classes
            )));
        }
        let (side, rgb) = self.read_rgb(entry)?;
        if side != config.image_size {
            return Err(Error::Dataset(format!(
                "image `{}` is {side}px, model expects {}px",
                entry.image_id, config.image_size
            )));
        }
        Image::from_rgb8(side, &rgb)
    }
}

/// Writes `count` labelled shape images (class = `i mod 4`) as PNGs plus a
/// manifest.
pub fn generate_synthetic(root: &Path, count: usize, side: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || side < 8 {
        return Err(Error::arg("need at least one image of side >= 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % SHAPE_CLASSES.len();
        let rgb = shape_image(class, side, &mut rng);
        let rel = format!("images/img_{i:04}.png");
        write_atomic(&root.join(&rel), &encode_png(side, &rgb)?)?;
        entries.push(DatasetEntry {
            image_id: format!("img_{i:04}"),
            path: rel,
            class_index: class,
            class_name: SHAPE_CLASSES[class].to_string(),
        });
    }
    let ds = Dataset {
        root: root.to_path_buf(),
        entries,
    };
    ds.write_manifest()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Analysis cache
//
// <root>/meta.json       model config, digest, images, precompute settings
// <root>/index.jsonl     one {kind, image_id, layer, head, object} per key
// <root>/objects/<sha>   content-addressed JSON-lines (or .bin) payloads

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Per image: unpruned prediction.
    Baseline,
    /// Per (image, head): one record per prune mode.
    Importance,
    /// Per image.
    ImportanceVector,
    /// Per (image, head).
    Strength,
    /// Per (image, head): attention, split and binarized views, tags.
    Pattern,
    /// Per head.
    EntropyHistogram,
    Autoencoder,
    AeReport,
    Latents,
    LayoutImages,
    LayoutPatch,
    LayoutCls,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Baseline => "baseline",
            Kind::Importance => "importance",
            Kind::ImportanceVector => "importance_vector",
            Kind::Strength => "strength",
            Kind::Pattern => "pattern",
            Kind::EntropyHistogram => "entropy_histogram",
            Kind::Autoencoder => "autoencoder",
            Kind::AeReport => "ae_report",
            Kind::Latents => "latents",
            Kind::LayoutImages => "layout_images",
            Kind::LayoutPatch => "layout_patch",
            Kind::LayoutCls => "layout_cls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Key {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
}

impl Key {
    pub fn global(kind: Kind) -> Self {
        Self {
            kind,
            image_id: None,
            layer: None,
            head: None,
        }
    }

    pub fn image(kind: Kind, image_id: &str) -> Self {
        Self {
            image_id: Some(image_id.to_string()),
            ..Self::global(kind)
        }
    }

    pub fn head(kind: Kind, layer: usize, head: usize) -> Self {
        Self {
            layer: Some(layer),
            head: Some(head),
            ..Self::global(kind)
        }
    }

    pub fn image_head(kind: Kind, image_id: &str, layer: usize, head: usize) -> Self {
        Self {
            image_id: Some(image_id.to_string()),
            layer: Some(layer),
            head: Some(head),
            kind,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.as_str())?;
        if let Some(id) = &self.image_id {
            write!(f, "/{id}")?;
        }
        if let (Some(l), Some(h)) = (self.layer, self.head) {
            write!(f, "/{l}.{h}")?;
        }
        Ok(())
    }
}

/// Serializes records as newline-terminated JSON lines.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    Ok(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    #[serde(flatten)]
    key: Key,
    object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedImage {
    pub image_id: String,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub model_sha256: String,
    pub class_names: Vec<String>,
    pub images: Vec<CachedImage>,
    /// Precompute settings the cache was built with.
    pub settings: serde_json::Value,
}

/// Read handle over a cache directory.
#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
    meta: CacheMeta,
    index: HashMap<Key, String>,
}

fn read_index(path: &Path) -> Result<HashMap<Key, String>> {
    let mut index = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(index),
        Err(e) => return Err(Error::io(path, e)),
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from an interrupted writer is ignored
        let Ok(entry) = serde_json::from_str::<IndexEntry>(&line) else {
            tracing::warn!(path = %path.display(), "skipping unreadable index line");
            continue;
        };
        index.entry(entry.key).or_insert(entry.object);
    }
    Ok(index)
}

impl Cache {
    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join("meta.json");
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CacheMeta = serde_json::from_slice(&bytes)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Cache(format!(
                "cache format {} unsupported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let index = read_index(&root.join("index.jsonl"))?;
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&self) -> &CacheMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, key: &Key) -> bool {
        self.index.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &Key> {
        self.index.keys()
    }

    /// Every key a complete cache holds for its meta.
    pub fn expected_keys(&self) -> Vec<Key> {
        let cfg = &self.meta.config;
        let mut keys = Vec::new();
        for img in &self.meta.images {
            let id = img.image_id.as_str();
            keys.push(Key::image(Kind::Baseline, id));
            keys.push(Key::image(Kind::ImportanceVector, id));
            for l in 0..cfg.layers {
                for h in 0..cfg.heads {
                    for kind in [Kind::Importance, Kind::Strength, Kind::Pattern] {
                        keys.push(Key::image_head(kind, id, l, h));
                    }
                }
            }
        }
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                keys.push(Key::head(Kind::EntropyHistogram, l, h));
            }
        }
        for kind in [
            Kind::Autoencoder,
            Kind::AeReport,
            Kind::Latents,
            Kind::LayoutImages,
            Kind::LayoutPatch,
            Kind::LayoutCls,
        ] {
            keys.push(Key::global(kind));
        }
        keys
    }

    pub fn missing_keys(&self) -> Vec<Key> {
        self.expected_keys().into_iter().filter(|k| !self.contains(k)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.expected_keys().iter().all(|k| self.contains(k))
    }

    pub fn read_bytes(&self, key: &Key) -> Result<Option<Vec<u8>>> {
        let Some(object) = self.index.get(key) else {
            return Ok(None);
        };
        let path = self.root.join("objects").join(object);
        fs::read(&path).map(Some).map_err(|e| Error::io(&path, e))
    }

    /// All records stored under a JSON-lines key.
    pub fn read_lines<T: DeserializeOwned>(&self, key: &Key) -> Result<Option<Vec<T>>> {
        let Some(bytes) = self.read_bytes(key)? else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for line in bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            out.push(serde_json::from_slice(line)?);
        }
        Ok(Some(out))
    }

    /// The single record stored under a key.
    pub fn read_one<T: DeserializeOwned>(&self, key: &Key) -> Result<Option<T>> {
        match self.read_lines(key)? {
            None => Ok(None),
            Some(mut v) if v.len() == 1 => Ok(v.pop()),
            Some(v) => Err(Error::Cache(format!("{key}: expected one record, found {}", v.len()))),
        }
    }
}

/// Single writer over a cache directory. Each key is written at most once;
/// objects are fsynced before their index line is appended.
pub struct CacheWriter {
    cache: Cache,
    index_file: File,
    written: usize,
}

impl CacheWriter {
    /// Opens an existing cache (whose meta must match) or creates one.
    pub fn create(root: &Path, meta: CacheMeta) -> Result<Self> {
        let objects = root.join("objects");
        fs::create_dir_all(&objects).map_err(|e| Error::io(&objects, e))?;
        let meta_path = root.join("meta.json");
        if meta_path.exists() {
            let existing = Cache::open(root)?;
            if existing.meta != meta {
                return Err(Error::Cache(format!(
                    "{} was built for a different model, dataset or settings",
                    root.display()
                )));
            }
        } else {
            let mut bytes = serde_json::to_vec_pretty(&meta)?;
            bytes.push(b'\n');
            write_atomic(&meta_path, &bytes)?;
        }
        let index_path = root.join("index.jsonl");
        let mut index_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index_path)
            .map_err(|e| Error::io(&index_path, e))?;
        // terminate a torn final line so the next entry starts cleanly
        let existing = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        if existing.last().is_some_and(|&b| b != b'\n') {
            index_file.write_all(b"\n").map_err(|e| Error::io(&index_path, e))?;
        }
        Ok(Self {
            cache: Cache::open(root)?,
            index_file,
            written: 0,
        })
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn contains(&self, key: &Key) -> bool {
        self.cache.contains(key)
    }

    /// Keys written through this handle.
    pub fn written(&self) -> usize {
        self.written
    }

    /// Stores raw bytes under `key`; returns false if the key already exists.
    pub fn put_bytes(&mut self, key: &Key, bytes: &[u8], ext: &str) -> Result<bool> {
        if self.contains(key) {
            return Ok(false);
        }
        let object = format!("{}.{ext}", hex::encode(Sha256::digest(bytes)));
        let path = self.cache.root.join("objects").join(&object);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        let mut line = serde_json::to_vec(&IndexEntry {
            key: key.clone(),
            object: object.clone(),
        })?;
        line.push(b'\n');
        let index_path = self.cache.root.join("index.jsonl");
        self.index_file.write_all(&line).map_err(|e| Error::io(&index_path, e))?;
        self.index_file.sync_data().map_err(|e| Error::io(&index_path, e))?;
        self.cache.index.insert(key.clone(), object);
        self.written += 1;
        Ok(true)
    }

    /// Stores records as JSON lines under `key`.
    pub fn put_lines<T: Serialize>(&mut self, key: &Key, records: &[T]) -> Result<bool> {
        self.put_bytes(key, &to_jsonl(records)?, "jsonl")
    }

    pub fn put_one<T: Serialize>(&mut self, key: &Key, record: &T) -> Result<bool> {
        self.put_lines(key, std::slice::from_ref(record))
    }
}
