//! Feature packs: the `FPK1` container, synthetic episodes and domain shifts.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! 0..4      b"FPK1"
//! 4..8      version: u32 = 1
//! 8..16     manifest length L: u64
//! 16..16+L  UTF-8 JSON manifest
//! 16+L..    blobs, contiguous, in manifest order
//! ```
//!
//! Float blobs are `f32`, label and split blobs are `u32`. Feature maps are
//! stored as `[count, H, W, C]` row-major, so each map is an `HW × C`
//! matrix with locations in row-major `(h, w)` order.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{ClassifierError, TextFeatureBank};
use crate::projection::{build_pool, ClassPrototypePool, FeatureMap, ProjectionError};
use crate::tensorcore::{self, Matrix, TensorError};

pub const MAGIC: &[u8; 4] = b"FPK1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"FPK1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported pack version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: need {needed} bytes, have {actual}")]
    TruncatedFile { needed: u64, actual: u64 },
    #[error("manifest does not match blobs: {0}")]
    ManifestMismatch(String),
    #[error("manifest is not valid JSON: {0}")]
    InvalidManifest(String),
    #[error("invalid pack: {0}")]
    InvalidPack(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "C_t")]
    pub text_channels: usize,
}

impl Dims {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

/// A labelled query image: its feature map and its global image feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub map: FeatureMap,
    pub global: Vec<f64>,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub class_names: Vec<String>,
    pub prompt_template: String,
    pub tau: f64,
    pub dims: Dims,
    pub normalize_locations: bool,
    /// `D × C_t`
    pub text_features: Matrix,
    pub support: Vec<Vec<FeatureMap>>,
    pub queries: Vec<Query>,
    /// Free text describing how the features were produced.
    pub provenance: Option<String>,
}

/// Model-ready view of a pack: location-normalised maps (when the pack asks
/// for it), class pools and the text bank.
#[derive(Debug, Clone)]
pub struct Episode {
    pub bank: TextFeatureBank,
    pub support: Vec<Vec<FeatureMap>>,
    pub pools: Vec<ClassPrototypePool>,
    pub queries: Vec<Query>,
}

impl FeaturePack {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Shots per class, if every class has the same number.
    pub fn shots(&self) -> Option<usize> {
        let n = self.support.first()?.len();
        self.support.iter().all(|s| s.len() == n).then_some(n)
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.queries.iter().filter(|q| q.split == split).count()
    }

    pub fn validate(&self) -> Result<(), PackError> {
        let d = self.classes();
        let dims = self.dims;
        if dims.height == 0 || dims.width == 0 || dims.channels == 0 || dims.text_channels == 0 {
            return Err(PackError::InvalidPack(format!("dims must be positive: {dims:?}")));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(PackError::InvalidPack(format!("tau must be positive, got {}", self.tau)));
        }
        if self.text_features.shape() != (d, dims.text_channels) {
            return Err(PackError::InvalidPack(format!(
                "text features are {:?}, expected ({d}, {})",
                self.text_features.shape(),
                dims.text_channels
            )));
        }
        if self.support.len() != d {
            return Err(PackError::InvalidPack(format!("{} support lists for {d} classes", self.support.len())));
        }
        let map_dims = (dims.height, dims.width, dims.channels);
        for (c, maps) in self.support.iter().enumerate() {
            if maps.is_empty() {
                return Err(PackError::InvalidPack(format!("class {c} has no support maps")));
            }
            if maps.iter().any(|m| m.dims() != map_dims) {
                return Err(PackError::InvalidPack(format!("class {c} has a support map with wrong dims")));
            }
        }
        for (i, q) in self.queries.iter().enumerate() {
            if q.map.dims() != map_dims || q.global.len() != dims.text_channels {
                return Err(PackError::InvalidPack(format!("query {i} has wrong dims")));
            }
            if q.label >= d {
                return Err(PackError::InvalidPack(format!("query {i} label {} >= {d}", q.label)));
            }
        }
        Ok(())
    }

    pub fn text_bank(&self) -> Result<TextFeatureBank, PackError> {
        Ok(TextFeatureBank::new(
            self.class_names.clone(),
            self.prompt_template.clone(),
            self.text_features.clone(),
            self.tau,
        )?)
    }

    /// Builds the model inputs. Zero location vectors are rejected when
    /// normalisation is on.
    pub fn episode(&self) -> Result<Episode, PackError> {
        self.validate()?;
        let prep = |m: &FeatureMap, what: &str| -> Result<FeatureMap, PackError> {
            let mut m = m.clone();
            if self.normalize_locations {
                m.normalize_locations()
                    .map_err(|_| PackError::InvalidPack(format!("{what} has an all-zero location vector")))?;
            }
            Ok(m)
        };
        let support = self
            .support
            .iter()
            .enumerate()
            .map(|(c, maps)| maps.iter().map(|m| prep(m, &format!("class {c} support"))).collect())
            .collect::<Result<Vec<Vec<_>>, _>>()?;
        let pools = support
            .iter()
            .enumerate()
            .map(|(c, maps)| build_pool(c, maps))
            .collect::<Result<Vec<_>, _>>()?;
        let queries = self
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| Ok(Query { map: prep(&q.map, &format!("query {i}"))?, ..q.clone() }))
            .collect::<Result<Vec<_>, PackError>>()?;
        Ok(Episode { bank: self.text_bank()?, support, pools, queries })
    }

    /// SHA-256 of the encoded pack, hex.
    pub fn content_hash(&self) -> Result<String, PackError> {
        Ok(content_hash(&encode_pack(self)?))
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    Text,
    Support,
    QueryMap,
    QueryGlobal,
    Labels,
    Splits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub kind: BlobKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub prompt_template: String,
    pub tau: f64,
    pub dims: Dims,
    pub normalize_locations: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    pub blobs: Vec<BlobEntry>,
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn push_u32(out: &mut Vec<u8>, values: impl Iterator<Item = u32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a pack to `FPK1` bytes.
pub fn encode_pack(pack: &FeaturePack) -> Result<Vec<u8>, PackError> {
    pack.validate()?;
    let dims = pack.dims;
    let d = pack.classes();
    let q = pack.queries.len();
    let (h, w, c, ct) = (dims.height, dims.width, dims.channels, dims.text_channels);

    let mut payload = Vec::new();
    let mut entries = Vec::new();
    let mut add = |payload: &mut Vec<u8>, name: String, kind, class_id, shape: Vec<usize>, start: usize| {
        entries.push(BlobEntry {
            name,
            kind,
            class_id,
            shape,
            offset: start as u64,
            byte_len: (payload.len() - start) as u64,
        });
    };

    let start = payload.len();
    push_f32(&mut payload, pack.text_features.as_slice());
    add(&mut payload, "text".into(), BlobKind::Text, None, vec![d, ct], start);
    for (class, maps) in pack.support.iter().enumerate() {
        let start = payload.len();
        for m in maps {
            push_f32(&mut payload, m.values().as_slice());
        }
        add(&mut payload, format!("support/{class}"), BlobKind::Support, Some(class), vec![maps.len(), h, w, c], start);
    }
    let start = payload.len();
    for query in &pack.queries {
        push_f32(&mut payload, query.map.values().as_slice());
    }
    add(&mut payload, "query_map".into(), BlobKind::QueryMap, None, vec![q, h, w, c], start);
    let start = payload.len();
    for query in &pack.queries {
        push_f32(&mut payload, &query.global);
    }
    add(&mut payload, "query_global".into(), BlobKind::QueryGlobal, None, vec![q, ct], start);
    let start = payload.len();
    push_u32(&mut payload, pack.queries.iter().map(|x| x.label as u32));
    add(&mut payload, "labels".into(), BlobKind::Labels, None, vec![q], start);
    let start = payload.len();
    push_u32(&mut payload, pack.queries.iter().map(|x| x.split.code()));
    add(&mut payload, "splits".into(), BlobKind::Splits, None, vec![q], start);

    // Offsets above are relative to the payload; the manifest length feeds
    // back into absolute offsets, so iterate until the width settles.
    let mut manifest = Manifest {
        class_names: pack.class_names.clone(),
        prompt_template: pack.prompt_template.clone(),
        tau: pack.tau,
        dims,
        normalize_locations: pack.normalize_locations,
        provenance: pack.provenance.clone(),
        blobs: entries.clone(),
    };
    let mut json_len = 0usize;
    let json = loop {
        let base = (HEADER_LEN + json_len) as u64;
        for (m, e) in manifest.blobs.iter_mut().zip(&entries) {
            m.offset = base + e.offset;
        }
        let json = serde_json::to_vec(&manifest).map_err(|e| PackError::InvalidManifest(e.to_string()))?;
        if json.len() == json_len {
            break json;
        }
        json_len = json.len();
    };

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_pack(pack: &FeaturePack, path: impl AsRef<Path>) -> Result<(), PackError> {
    let bytes = encode_pack(pack)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pack(path: impl AsRef<Path>) -> Result<FeaturePack, PackError> {
    decode_pack(&fs::read(path)?)
}

/// Parses the header and manifest only.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest, PackError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(PackError::TruncatedFile { needed: HEADER_LEN as u64, actual });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(PackError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(PackError::TruncatedFile { needed: HEADER_LEN as u64, actual });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(PackError::UnsupportedVersion(version));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = (HEADER_LEN as u64).saturating_add(len);
    if end > actual {
        return Err(PackError::TruncatedFile { needed: end, actual });
    }
    serde_json::from_slice(&bytes[HEADER_LEN..end as usize]).map_err(|e| PackError::InvalidManifest(e.to_string()))
}

fn blob<'a>(bytes: &'a [u8], e: &BlobEntry) -> &'a [u8] {
    &bytes[e.offset as usize..(e.offset + e.byte_len) as usize]
}

fn f32_values(raw: &[u8]) -> Result<Vec<f64>, PackError> {
    raw.chunks_exact(4)
        .map(|b| {
            let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(PackError::InvalidPack("non-finite float in blob".into()))
            }
        })
        .collect()
}

fn u32_values(raw: &[u8]) -> Vec<u32> {
    raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()
}

fn maps_from(values: Vec<f64>, count: usize, dims: &Dims) -> Result<Vec<FeatureMap>, PackError> {
    let per = dims.locations() * dims.channels;
    values
        .chunks_exact(per.max(1))
        .take(count)
        .map(|chunk| {
            let m = Matrix::from_vec(dims.locations(), dims.channels, chunk.to_vec())?;
            Ok(FeatureMap::new(dims.height, dims.width, m)?)
        })
        .collect()
}

pub fn decode_pack(bytes: &[u8]) -> Result<FeaturePack, PackError> {
    let manifest = read_manifest(bytes)?;
    let actual = bytes.len() as u64;
    let dims = manifest.dims;
    let d = manifest.class_names.len();
    let mismatch = |msg: String| PackError::ManifestMismatch(msg);

    // layout: contiguous from the end of the manifest to the end of the file
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let mut cursor = HEADER_LEN as u64 + manifest_len;
    for e in &manifest.blobs {
        if e.offset != cursor {
            return Err(mismatch(format!("blob {} at offset {}, expected {cursor}", e.name, e.offset)));
        }
        let elems: usize = e.shape.iter().product();
        if e.byte_len != 4 * elems as u64 {
            return Err(mismatch(format!("blob {} has {} bytes for shape {:?}", e.name, e.byte_len, e.shape)));
        }
        cursor = e.offset + e.byte_len;
        if cursor > actual {
            return Err(PackError::TruncatedFile { needed: cursor, actual });
        }
    }
    if cursor != actual {
        return Err(mismatch(format!("{} trailing bytes after the last blob", actual - cursor)));
    }

    let single = |kind: BlobKind| -> Result<&BlobEntry, PackError> {
        let mut found = manifest.blobs.iter().filter(|e| e.kind == kind);
        match (found.next(), found.next()) {
            (Some(e), None) => Ok(e),
            (None, _) => Err(mismatch(format!("missing {kind:?} blob"))),
            _ => Err(mismatch(format!("duplicate {kind:?} blob"))),
        }
    };

    let text = single(BlobKind::Text)?;
    if text.shape != [d, dims.text_channels] {
        return Err(mismatch(format!("text blob shape {:?}, expected [{d}, {}]", text.shape, dims.text_channels)));
    }
    let text_features = Matrix::from_vec(d, dims.text_channels, f32_values(blob(bytes, text))?)?;

    let supports: Vec<&BlobEntry> = manifest.blobs.iter().filter(|e| e.kind == BlobKind::Support).collect();
    if supports.len() != d {
        return Err(mismatch(format!("{d} classes but {} support blobs", supports.len())));
    }
    let mut support = vec![Vec::new(); d];
    let mut seen = vec![false; d];
    for e in supports {
        let class = e.class_id.ok_or_else(|| mismatch(format!("support blob {} has no class_id", e.name)))?;
        if class >= d || seen[class] {
            return Err(mismatch(format!("support blob {} has bad or repeated class_id {class}", e.name)));
        }
        seen[class] = true;
        let n = check_map_shape(&e.shape, &dims).ok_or_else(|| mismatch(format!("support blob {} shape {:?}", e.name, e.shape)))?;
        support[class] = maps_from(f32_values(blob(bytes, e))?, n, &dims)?;
    }

    let qmap = single(BlobKind::QueryMap)?;
    let q = check_map_shape(&qmap.shape, &dims).ok_or_else(|| mismatch(format!("query_map shape {:?}", qmap.shape)))?;
    let qglobal = single(BlobKind::QueryGlobal)?;
    if qglobal.shape != [q, dims.text_channels] {
        return Err(mismatch(format!("query_global shape {:?}", qglobal.shape)));
    }
    let labels = single(BlobKind::Labels)?;
    let splits = single(BlobKind::Splits)?;
    if labels.shape != [q] || splits.shape != [q] {
        return Err(mismatch(format!("labels {:?} / splits {:?} for {q} queries", labels.shape, splits.shape)));
    }

    let maps = maps_from(f32_values(blob(bytes, qmap))?, q, &dims)?;
    let globals = f32_values(blob(bytes, qglobal))?;
    let labels = u32_values(blob(bytes, labels));
    let splits = u32_values(blob(bytes, splits));
    let queries = maps
        .into_iter()
        .enumerate()
        .map(|(i, map)| {
            let label = labels[i] as usize;
            let split = Split::from_code(splits[i])
                .ok_or_else(|| PackError::InvalidPack(format!("query {i} has split code {}", splits[i])))?;
            let ct = dims.text_channels;
            Ok(Query { map, global: globals[i * ct..(i + 1) * ct].to_vec(), label, split })
        })
        .collect::<Result<Vec<_>, PackError>>()?;

    let pack = FeaturePack {
        class_names: manifest.class_names,
        prompt_template: manifest.prompt_template,
        tau: manifest.tau,
        dims,
        normalize_locations: manifest.normalize_locations,
        text_features,
        support,
        queries,
        provenance: manifest.provenance,
    };
    pack.validate()?;
    Ok(pack)
}

/// Returns the leading count of a `[count, H, W, C]` shape.
fn check_map_shape(shape: &[usize], dims: &Dims) -> Option<usize> {
    match shape {
        [n, h, w, c] if (*h, *w, *c) == (dims.height, dims.width, dims.channels) => Some(*n),
        _ => None,
    }
}

/// Parameters of a synthetic episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub shots: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub text_channels: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub queries_per_class: usize,
    pub seed: u64,
    pub tau: f64,
    pub normalize_locations: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 5,
            shots: 4,
            height: 1,
            width: 1,
            channels: 8,
            text_channels: 16,
            class_separation: 1.0,
            noise_sigma: 0.3,
            queries_per_class: 20,
            seed: 0,
            tau: 1.0,
            normalize_locations: true,
        }
    }
}

/// Cosine between a class's text feature and its embedded center.
pub const SYNTH_TEXT_ALIGNMENT: f64 = 0.5;

/// Global-feature noise as a fraction of `noise_sigma`.
pub const GLOBAL_NOISE_RATIO: f64 = 1.0 / 3.0;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), PackError> {
        let counts = [
            ("classes", self.classes),
            ("shots", self.shots),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("text_channels", self.text_channels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(PackError::InvalidSpec(format!("{name} must be at least 1")));
        }
        if self.text_channels < 2 {
            return Err(PackError::InvalidSpec("text_channels must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(PackError::InvalidSpec(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !self.class_separation.is_finite() {
            return Err(PackError::InvalidSpec("class_separation must be finite".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(PackError::InvalidSpec(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Gram-Schmidt over `vectors`, dropping near-dependent ones.
fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut r = v.clone();
        for b in &basis {
            let proj = tensorcore::dot(&r, b);
            r.iter_mut().zip(b).for_each(|(x, a)| *x -= proj * a);
        }
        if tensorcore::norm(&r) > 1e-8 {
            tensorcore::normalize_in_place(&mut r).expect("nonzero");
            basis.push(r);
        }
    }
    basis
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, n);
        if tensorcore::normalize_in_place(&mut v).is_ok() {
            return v;
        }
    }
}

/// Rounds through `f32` so the in-memory pack equals its decoded file.
fn quantize(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| tensorcore::dot(m.row(r), v)).collect()
}

/// Deterministic synthetic episode.
///
/// Each class has a random unit center `c_d`; every location vector is
/// `separation · c_d` plus i.i.d. Gaussian noise, then optionally
/// normalised. A global image feature is an independent noisy view of the
/// class, `separation · E c_d` plus noise of scale
/// `GLOBAL_NOISE_RATIO · noise_sigma`, for a fixed random embedding `E`.
/// Text features have cosine [`SYNTH_TEXT_ALIGNMENT`] with the embedded
/// class center, so zero-shot scores are informative but imperfect.
///
/// Every support image is also written as a `train` query (its global
/// feature lives only there); `queries_per_class` fresh images per class
/// are tagged `test`.
///
/// The defaults (1×1 maps, `τ = 1`) keep both signals on comparable
/// probability scales at `ε = 1`. With larger maps, mean pooling averages
/// the isotropic location noise away and nearest-class-mean becomes
/// near-perfect.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<FeaturePack, PackError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, ct) = (spec.channels, spec.text_channels);
    let locations = spec.height * spec.width;

    let centers: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit_vec(&mut rng, c)).collect();
    // near-isometric for ct >= c
    let scale = 1.0 / (ct as f64).sqrt();
    let embed = Matrix::from_vec(ct, c, gaussian_vec(&mut rng, ct * c).into_iter().map(|x| x * scale).collect())?;

    let mut text = Matrix::zeros(spec.classes, ct);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for center in &centers {
        let mut anchor = mat_vec(&embed, center);
        if tensorcore::normalize_in_place(&mut anchor).is_err() {
            anchor = unit_vec(&mut rng, ct);
        }
        anchors.push(anchor);
    }
    for (d, anchor) in anchors.iter().enumerate() {
        // Random direction orthogonal to every anchor when there is room,
        // else to this class's anchor only. In the first case a noiseless
        // image is always closest to its own text feature.
        let basis = if ct > anchors.len() { orthonormal_basis(&anchors) } else { vec![anchor.clone()] };
        let ortho = loop {
            let mut r = unit_vec(&mut rng, ct);
            for b in &basis {
                let proj = tensorcore::dot(&r, b);
                r.iter_mut().zip(b).for_each(|(x, a)| *x -= proj * a);
            }
            if tensorcore::normalize_in_place(&mut r).is_ok() {
                break r;
            }
        };
        let a = SYNTH_TEXT_ALIGNMENT;
        let b = (1.0 - a * a).sqrt();
        let row = text.row_mut(d);
        for k in 0..ct {
            row[k] = a * anchor[k] + b * ortho[k];
        }
        tensorcore::normalize_in_place(row)?;
        quantize(row);
    }

    let sample_map = |rng: &mut ChaCha8Rng, class: usize| -> Result<(FeatureMap, Vec<f64>), PackError> {
        let mut values = Matrix::zeros(locations, c);
        for l in 0..locations {
            let row = values.row_mut(l);
            for (k, x) in row.iter_mut().enumerate() {
                *x = spec.class_separation * centers[class][k] + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let raw = FeatureMap::new(spec.height, spec.width, values)?;
        // an independent noisy view of the class, not derived from the map
        let mut global = mat_vec(&embed, &centers[class]);
        for x in global.iter_mut() {
            *x = spec.class_separation * *x + GLOBAL_NOISE_RATIO * spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        if tensorcore::normalize_in_place(&mut global).is_err() {
            global = unit_vec(rng, ct);
        }
        quantize(&mut global);
        let mut values = raw.into_values();
        if spec.normalize_locations {
            for l in 0..locations {
                if tensorcore::normalize_in_place(values.row_mut(l)).is_err() {
                    // measure-zero event; replace by a random direction
                    values.row_mut(l).copy_from_slice(&unit_vec(rng, c));
                }
            }
        }
        quantize(values.as_mut_slice());
        Ok((FeatureMap::new(spec.height, spec.width, values)?, global))
    };

    let mut support = Vec::with_capacity(spec.classes);
    let mut queries = Vec::with_capacity(spec.classes * (spec.shots + spec.queries_per_class));
    for class in 0..spec.classes {
        let mut maps = Vec::with_capacity(spec.shots);
        for _ in 0..spec.shots {
            let (map, global) = sample_map(&mut rng, class)?;
            queries.push(Query { map: map.clone(), global, label: class, split: Split::Train });
            maps.push(map);
        }
        support.push(maps);
    }
    for class in 0..spec.classes {
        for _ in 0..spec.queries_per_class {
            let (map, global) = sample_map(&mut rng, class)?;
            queries.push(Query { map, global, label: class, split: Split::Test });
        }
    }

    Ok(FeaturePack {
        class_names: (0..spec.classes).map(|d| format!("class_{d}")).collect(),
        prompt_template: "a photo of a {}.".into(),
        tau: spec.tau,
        dims: Dims { height: spec.height, width: spec.width, channels: c, text_channels: ct },
        normalize_locations: spec.normalize_locations,
        text_features: text,
        support,
        queries,
        provenance: Some(format!("synthetic: {}", serde_json::to_string(spec).unwrap_or_default())),
    })
}

/// A simulated distribution shift applied to query features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotation_strength: f64,
    pub noise_add: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec { rotation_strength: 0.0, noise_add: 0.0, seed: 0 }
    }
}

/// Orthonormalises the columns of `I + strength · G` (modified Gram-Schmidt),
/// giving the identity at strength 0.
fn near_identity_rotation(rng: &mut ChaCha8Rng, n: usize, strength: f64) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col: Vec<f64> = gaussian_vec(rng, n).into_iter().map(|g| strength * g).collect();
            col[j] += 1.0;
            col
        })
        .collect();
    for j in 0..n {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let proj = tensorcore::dot(&done[k], &rest[0]);
            rest[0].iter_mut().zip(&done[k]).for_each(|(x, q)| *x -= proj * q);
        }
        if tensorcore::normalize_in_place(&mut cols[j]).is_err() {
            // rank-deficient draw: fall back to the basis vector, re-orthogonalised
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for k in 0..j {
                let proj = tensorcore::dot(&cols[k], &e);
                e.iter_mut().zip(&cols[k]).for_each(|(x, q)| *x -= proj * q);
            }
            let _ = tensorcore::normalize_in_place(&mut e);
            cols[j] = e;
        }
    }
    // rows of the returned matrix are the orthonormal columns
    let data = cols.into_iter().flatten().collect();
    Matrix::from_vec(n, n, data).expect("finite")
}

/// Mixes every query feature (maps and global features) by a random
/// near-identity orthogonal matrix and adds Gaussian noise. Support and
/// text features are left untouched.
pub fn domain_shift(pack: &FeaturePack, shift: &ShiftSpec) -> Result<FeaturePack, PackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    let (c, ct) = (pack.dims.channels, pack.dims.text_channels);
    let rotate = shift.rotation_strength != 0.0;
    let map_rot = rotate.then(|| near_identity_rotation(&mut rng, c, shift.rotation_strength));
    let global_rot = rotate.then(|| near_identity_rotation(&mut rng, ct, shift.rotation_strength));
    let mut out = pack.clone();
    for q in &mut out.queries {
        let (h, w) = (q.map.height(), q.map.width());
        let mut values = q.map.values().clone();
        if let Some(r) = &map_rot {
            // row vectors: x ← R x
            values = values.matmul_t(r)?;
        }
        if let Some(r) = &global_rot {
            q.global = mat_vec(r, &q.global);
        }
        if shift.noise_add != 0.0 {
            for x in values.as_mut_slice().iter_mut().chain(q.global.iter_mut()) {
                *x += shift.noise_add * rng.sample::<f64, _>(StandardNormal);
            }
        }
        quantize(values.as_mut_slice());
        quantize(&mut q.global);
        q.map = FeatureMap::new(h, w, values)?;
    }
    Ok(out)
}
