//! Framework-neutral network snapshot: data model, on-disk format and a
//! synthetic generator with planted filter importance.
//!
//! A snapshot directory holds `manifest.json` plus `tensors.bin`. Every
//! payload in the blob is little-endian binary32, row-major, starting at an
//! 8-byte aligned offset declared in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HISTOGRAM_BINS: usize = 32;

const ALIGN: usize = 8;
/// Largest integer every binary32 can hold exactly; histogram counts live in f32 payloads.
const MAX_EXACT_COUNT: f32 = 16_777_216.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of elements per leading-dimension slice (one filter).
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Post-activation summary statistics over a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    /// Fraction of non-positive activations per channel.
    pub zero_fraction: Vec<f32>,
    pub bins: usize,
    /// `num_filters × bins` counts, channel-major.
    pub histograms: Vec<u32>,
    /// Per-channel `[hist_min, hist_max]`.
    pub ranges: Vec<[f32; 2]>,
    /// Count total of every channel's histogram (samples × spatial positions).
    pub sample_total: u64,
}

impl ActivationStats {
    pub fn histogram(&self, channel: usize) -> &[u32] {
        &self.histograms[channel * self.bins..(channel + 1) * self.bins]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub num_filters: usize,
    pub weights: Tensor,
    pub bn_gamma: Option<Vec<f32>>,
    pub bn_beta: Option<Vec<f32>>,
    pub weight_grad: Option<Tensor>,
    pub bn_gamma_grad: Option<Vec<f32>>,
    pub bn_beta_grad: Option<Vec<f32>>,
    pub activation_stats: Option<ActivationStats>,
}

impl LayerRecord {
    /// Layer carrying weights only.
    pub fn from_weights(name: impl Into<String>, weights: Tensor) -> Self {
        let num_filters = weights.shape.first().copied().unwrap_or(0);
        Self {
            name: name.into(),
            num_filters,
            weights,
            bn_gamma: None,
            bn_beta: None,
            weight_grad: None,
            bn_gamma_grad: None,
            bn_beta_grad: None,
            activation_stats: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let name = &self.name;
        let mismatch = |tensor: &str, detail: String| Error::ShapeMismatch {
            layer: name.clone(),
            tensor: tensor.to_string(),
            detail,
        };
        let n = self.num_filters;
        if n == 0 {
            return Err(Error::InvalidSnapshot(format!("layer `{name}` has zero filters")));
        }
        check_tensor(name, "weights", &self.weights)?;
        if self.weights.shape.len() < 2 {
            return Err(mismatch(
                "weights",
                format!("expected shape (filters, fan_in...), got {:?}", self.weights.shape),
            ));
        }
        if self.weights.shape[0] != n {
            return Err(mismatch(
                "weights",
                format!("leading dimension {} != num_filters {n}", self.weights.shape[0]),
            ));
        }
        if let Some(g) = &self.weight_grad {
            check_tensor(name, "weight_grad", g)?;
            if g.shape != self.weights.shape {
                return Err(mismatch(
                    "weight_grad",
                    format!("shape {:?} != weights shape {:?}", g.shape, self.weights.shape),
                ));
            }
        }
        for (role, v) in [
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
            ("bn_gamma_grad", &self.bn_gamma_grad),
            ("bn_beta_grad", &self.bn_beta_grad),
        ] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(mismatch(role, format!("length {} != num_filters {n}", v.len())));
                }
                check_finite(name, role, v)?;
            }
        }
        if let Some(stats) = &self.activation_stats {
            stats.validate(name, n)?;
        }
        Ok(())
    }
}

impl ActivationStats {
    fn validate(&self, layer: &str, n: usize) -> Result<()> {
        let bad = |detail: String| Error::InvalidSnapshot(format!("layer `{layer}` activation_stats: {detail}"));
        if self.bins == 0 {
            return Err(bad("zero histogram bins".into()));
        }
        if self.sample_total == 0 {
            return Err(bad("sample_total must be positive".into()));
        }
        if self.zero_fraction.len() != n || self.ranges.len() != n || self.histograms.len() != n * self.bins {
            return Err(Error::ShapeMismatch {
                layer: layer.to_string(),
                tensor: "activation_stats".into(),
                detail: format!("per-channel payloads do not match {n} filters × {} bins", self.bins),
            });
        }
        check_finite(layer, "zero_fraction", &self.zero_fraction)?;
        if let Some(i) = self.zero_fraction.iter().position(|z| !(0.0..=1.0).contains(z)) {
            return Err(bad(format!("zero_fraction[{i}] outside [0, 1]")));
        }
        for (c, r) in self.ranges.iter().enumerate() {
            check_finite(layer, "hist_range", r)?;
            if r[0] > r[1] {
                return Err(bad(format!("channel {c} hist_min > hist_max")));
            }
        }
        for c in 0..n {
            let total: u64 = self.histogram(c).iter().map(|&x| x as u64).sum();
            if total != self.sample_total {
                return Err(bad(format!(
                    "channel {c} histogram sums to {total}, expected {}",
                    self.sample_total
                )));
            }
        }
        Ok(())
    }
}

fn check_tensor(layer: &str, role: &str, t: &Tensor) -> Result<()> {
    if t.numel() != t.data.len() {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            tensor: role.to_string(),
            detail: format!("shape {:?} holds {} elements, payload has {}", t.shape, t.numel(), t.data.len()),
        });
    }
    check_finite(layer, role, &t.data)
}

fn check_finite(layer: &str, role: &str, v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            layer: layer.to_string(),
            tensor: role.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSnapshot {
    pub name: String,
    pub layers: Vec<LayerRecord>,
    pub meta: BTreeMap<String, String>,
}

impl NetworkSnapshot {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSnapshot("snapshot has no layers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::InvalidSnapshot(format!("duplicate layer name `{}`", layer.name)));
            }
            layer.validate()?;
        }
        Ok(())
    }

    pub fn filter_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.num_filters).collect()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// Serializes to `(manifest.json bytes, tensors.bin bytes)`.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        self.validate()?;
        let mut blob = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut tensors = BTreeMap::new();
            let n = layer.num_filters;
            tensors.insert("weights".to_string(), push_payload(&mut blob, &layer.weights.shape, &layer.weights.data));
            let vectors = [
                ("bn_gamma", &layer.bn_gamma),
                ("bn_beta", &layer.bn_beta),
            ];
            for (role, v) in vectors {
                if let Some(v) = v {
                    tensors.insert(role.to_string(), push_payload(&mut blob, &[n], v));
                }
            }
            if let Some(g) = &layer.weight_grad {
                tensors.insert("weight_grad".to_string(), push_payload(&mut blob, &g.shape, &g.data));
            }
            let grads = [
                ("bn_gamma_grad", &layer.bn_gamma_grad),
                ("bn_beta_grad", &layer.bn_beta_grad),
            ];
            for (role, v) in grads {
                if let Some(v) = v {
                    tensors.insert(role.to_string(), push_payload(&mut blob, &[n], v));
                }
            }
            let activation_stats = layer.activation_stats.as_ref().map(|s| {
                let zero_fraction_offset = push_payload(&mut blob, &[n], &s.zero_fraction).offset;
                let counts: Vec<f32> = s.histograms.iter().map(|&c| c as f32).collect();
                let hist_offset = push_payload(&mut blob, &[n, s.bins], &counts).offset;
                let flat: Vec<f32> = s.ranges.iter().flatten().copied().collect();
                let range_offset = push_payload(&mut blob, &[n, 2], &flat).offset;
                ManifestStats {
                    bins: s.bins,
                    sample_total: s.sample_total,
                    zero_fraction_offset,
                    hist_offset,
                    range_offset,
                }
            });
            layers.push(ManifestLayer {
                name: layer.name.clone(),
                num_filters: n,
                tensors,
                activation_stats,
            });
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            name: self.name.clone(),
            meta: self.meta.clone(),
            layers,
        };
        let mut manifest_bytes =
            serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest_bytes.push(b'\n');
        Ok((manifest_bytes, blob))
    }

    /// Parses and fully validates a snapshot from its two encoded parts.
    pub fn decode(manifest_bytes: &[u8], blob: &[u8]) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", manifest.version)));
        }
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for ml in &manifest.layers {
            for role in ml.tensors.keys() {
                if !TENSOR_ROLES.contains(&role.as_str()) {
                    return Err(Error::Manifest(format!("layer `{}`: unknown tensor role `{role}`", ml.name)));
                }
            }
            let tensor = |role: &str| -> Result<Option<Tensor>> {
                ml.tensors
                    .get(role)
                    .map(|e| read_tensor(blob, &ml.name, role, e))
                    .transpose()
            };
            let vector = |role: &str| -> Result<Option<Vec<f32>>> {
                match tensor(role)? {
                    None => Ok(None),
                    Some(t) if t.shape.len() == 1 => Ok(Some(t.data)),
                    Some(t) => Err(Error::ShapeMismatch {
                        layer: ml.name.clone(),
                        tensor: role.to_string(),
                        detail: format!("expected a vector, got shape {:?}", t.shape),
                    }),
                }
            };
            let weights = tensor("weights")?
                .ok_or_else(|| Error::Manifest(format!("layer `{}` has no weights", ml.name)))?;
            let activation_stats = ml
                .activation_stats
                .as_ref()
                .map(|ms| read_stats(blob, &ml.name, ml.num_filters, ms))
                .transpose()?;
            layers.push(LayerRecord {
                name: ml.name.clone(),
                num_filters: ml.num_filters,
                weights,
                bn_gamma: vector("bn_gamma")?,
                bn_beta: vector("bn_beta")?,
                weight_grad: tensor("weight_grad")?,
                bn_gamma_grad: vector("bn_gamma_grad")?,
                bn_beta_grad: vector("bn_beta_grad")?,
                activation_stats,
            });
        }
        let snapshot = NetworkSnapshot {
            name: manifest.name,
            layers,
            meta: manifest.meta,
        };
        snapshot.validate()?;
        Ok(snapshot)
    }

    /// SHA-256 over the manifest bytes followed by the blob bytes.
    pub fn digest(&self) -> Result<String> {
        let (manifest, blob) = self.encode()?;
        Ok(digest_parts(&manifest, &blob))
    }
}

pub fn digest_parts(manifest: &[u8], blob: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(manifest);
    hasher.update(blob);
    hex::encode(hasher.finalize())
}

const TENSOR_ROLES: [&str; 6] = [
    "weights",
    "bn_gamma",
    "bn_beta",
    "weight_grad",
    "bn_gamma_grad",
    "bn_beta_grad",
];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    name: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    num_filters: usize,
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    activation_stats: Option<ManifestStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
    len_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestStats {
    bins: usize,
    sample_total: u64,
    zero_fraction_offset: usize,
    hist_offset: usize,
    range_offset: usize,
}

fn push_payload(blob: &mut Vec<u8>, shape: &[usize], data: &[f32]) -> TensorEntry {
    while blob.len() % ALIGN != 0 {
        blob.push(0);
    }
    let offset = blob.len();
    for x in data {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    TensorEntry {
        shape: shape.to_vec(),
        offset,
        len_bytes: data.len() * 4,
    }
}

fn read_f32s(blob: &[u8], layer: &str, role: &str, offset: usize, len_bytes: usize) -> Result<Vec<f32>> {
    let err = |detail: String| Error::ShapeMismatch {
        layer: layer.to_string(),
        tensor: role.to_string(),
        detail,
    };
    if offset % ALIGN != 0 {
        return Err(err(format!("offset {offset} is not {ALIGN}-byte aligned")));
    }
    let end = offset
        .checked_add(len_bytes)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| err(format!("payload [{offset}, +{len_bytes}) exceeds blob of {} bytes", blob.len())))?;
    let data: Vec<f32> = blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(layer, role, &data)?;
    Ok(data)
}

fn read_tensor(blob: &[u8], layer: &str, role: &str, entry: &TensorEntry) -> Result<Tensor> {
    let numel: usize = entry.shape.iter().product();
    if entry.len_bytes % 4 != 0 || entry.len_bytes / 4 != numel {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            tensor: role.to_string(),
            detail: format!(
                "shape {:?} needs {numel} floats, payload declares {} bytes ({} floats)",
                entry.shape,
                entry.len_bytes,
                entry.len_bytes as f64 / 4.0
            ),
        });
    }
    let data = read_f32s(blob, layer, role, entry.offset, entry.len_bytes)?;
    Ok(Tensor::new(entry.shape.clone(), data))
}

fn read_stats(blob: &[u8], layer: &str, n: usize, ms: &ManifestStats) -> Result<ActivationStats> {
    let zero_fraction = read_f32s(blob, layer, "zero_fraction", ms.zero_fraction_offset, n * 4)?;
    let counts = read_f32s(blob, layer, "histograms", ms.hist_offset, n * ms.bins * 4)?;
    let histograms = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c >= 0.0 && c.fract() == 0.0 && c <= MAX_EXACT_COUNT {
                Ok(c as u32)
            } else {
                Err(Error::InvalidSnapshot(format!(
                    "layer `{layer}` histogram entry {i} is not a non-negative integer count: {c}"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let flat = read_f32s(blob, layer, "hist_range", ms.range_offset, n * 8)?;
    let ranges = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok(ActivationStats {
        zero_fraction,
        bins: ms.bins,
        histograms,
        ranges,
        sample_total: ms.sample_total,
    })
}

pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<NetworkSnapshot> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(BLOB_FILE);
    let manifest = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    NetworkSnapshot::decode(&manifest, &blob)
}

pub fn save_snapshot(snapshot: &NetworkSnapshot, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let (manifest, blob) = snapshot.encode()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Digest of a saved snapshot directory, identical to [`NetworkSnapshot::digest`].
pub fn snapshot_dir_digest(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(BLOB_FILE);
    let manifest = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    Ok(digest_parts(&manifest, &blob))
}

// ---------------------------------------------------------------------------
// Pruning configuration and masks
// ---------------------------------------------------------------------------

/// Per-layer keep ratios: a uniform default plus named overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub keep_ratio: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl PruneConfig {
    pub fn uniform(keep_ratio: f64) -> Self {
        Self {
            keep_ratio,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, layer: impl Into<String>, keep_ratio: f64) -> Self {
        self.overrides.insert(layer.into(), keep_ratio);
        self
    }

    pub fn ratio_for(&self, layer: &str) -> f64 {
        self.overrides.get(layer).copied().unwrap_or(self.keep_ratio)
    }

    pub fn validate(&self, snapshot: &NetworkSnapshot) -> Result<()> {
        let ok = |r: f64| r > 0.0 && r <= 1.0;
        if !ok(self.keep_ratio) {
            return Err(Error::InvalidArgument(format!("keep ratio {} outside (0, 1]", self.keep_ratio)));
        }
        for (name, &r) in &self.overrides {
            if !ok(r) {
                return Err(Error::InvalidArgument(format!("keep ratio {r} for `{name}` outside (0, 1]")));
            }
            if !snapshot.layers.iter().any(|l| &l.name == name) {
                return Err(Error::InvalidArgument(format!("keep-ratio override for unknown layer `{name}`")));
            }
        }
        Ok(())
    }
}

/// `⌈keep_ratio · n⌉`, clamped to `[1, n]`. A 1e-9 guard absorbs products
/// such as `0.3 · 10 = 3.0000000000000004`.
pub fn keep_count(keep_ratio: f64, n: usize) -> usize {
    let raw = (keep_ratio * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub layer: String,
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn popcount(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Per-layer keep (true) / prune (false) vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub layers: Vec<LayerMask>,
}

impl Mask {
    pub fn all_ones(snapshot: &NetworkSnapshot) -> Self {
        Mask {
            layers: snapshot
                .layers
                .iter()
                .map(|l| LayerMask {
                    layer: l.name.clone(),
                    keep: vec![true; l.num_filters],
                })
                .collect(),
        }
    }

    /// One byte (0 or 1) per filter, layers concatenated in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.layers
            .iter()
            .flat_map(|l| l.keep.iter().map(|&k| k as u8))
            .collect()
    }

    /// `{layer: [0/1, ...]}` in layer order.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for l in &self.layers {
            let bits: Vec<u8> = l.keep.iter().map(|&k| k as u8).collect();
            map.insert(l.layer.clone(), serde_json::json!(bits));
        }
        serde_json::Value::Object(map)
    }

    /// Compact identity used for fitness caching.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&(l.keep.len() as u32).to_le_bytes());
            for chunk in l.keep.chunks(8) {
                out.push(chunk.iter().enumerate().fold(0u8, |acc, (i, &k)| acc | ((k as u8) << i)));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Synthetic snapshots
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Filter count per layer; the length is the layer count.
    pub filters: Vec<usize>,
    pub fan_in: usize,
    pub seed: u64,
}

/// Standard deviation of the independent noise added to each evidence channel.
const SYNTH_NOISE: f64 = 0.25;
const SYNTH_SPATIAL: u64 = 16;
const SYNTH_SAMPLES: u64 = 16;

/// Builds a snapshot whose every criterion is a noisy monotone function of a
/// planted per-filter importance. Returns the snapshot and the planted vectors.
pub fn synth_generate(spec: &SynthSpec) -> Result<(NetworkSnapshot, Vec<Vec<f64>>)> {
    if spec.filters.is_empty() {
        return Err(Error::InvalidArgument("synthetic snapshot needs at least one layer".into()));
    }
    if let Some(&n) = spec.filters.iter().find(|&&n| n < 2) {
        return Err(Error::InvalidArgument(format!("synthetic layer needs at least 2 filters, got {n}")));
    }
    if spec.fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::with_capacity(spec.filters.len());
    let mut planted = Vec::with_capacity(spec.filters.len());
    for (li, &n) in spec.filters.iter().enumerate() {
        let (layer, importance) = synth_layer(&mut rng, format!("layer{li}"), n, spec.fan_in);
        layers.push(layer);
        planted.push(importance);
    }
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synthetic".into());
    meta.insert("seed".into(), spec.seed.to_string());
    meta.insert("calibration_samples".into(), SYNTH_SAMPLES.to_string());
    let snapshot = NetworkSnapshot {
        name: format!("synthetic-{}", spec.seed),
        layers,
        meta,
    };
    snapshot.validate()?;
    Ok((snapshot, planted))
}

fn synth_layer(rng: &mut ChaCha8Rng, name: String, n: usize, fan_in: usize) -> (LayerRecord, Vec<f64>) {
    // Distinct, evenly spaced importances in a random order.
    let mut importance: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        importance.swap(i, j);
    }
    let noisy = |rng: &mut ChaCha8Rng, base: f64, t: f64, floor: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (base + t + SYNTH_NOISE * z).max(floor)
    };
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.85) { 1.0 } else { -1.0 };

    let scale = 1.0 / (fan_in as f64).sqrt();
    let mut weights = Vec::with_capacity(n * fan_in);
    let mut grads = Vec::with_capacity(n * fan_in);
    let mut gamma = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    let mut gamma_grad = Vec::with_capacity(n);
    let mut beta_grad = Vec::with_capacity(n);
    let mut zero_fraction = Vec::with_capacity(n);
    let bins = DEFAULT_HISTOGRAM_BINS;
    let total = SYNTH_SAMPLES * SYNTH_SPATIAL;
    let mut histograms = Vec::with_capacity(n * bins);
    let mut ranges = Vec::with_capacity(n);

    for &t in &importance {
        // Random direction with L2 norm equal to the noisy magnitude.
        let magnitude = noisy(rng, 0.25, t, 0.05);
        let dir: Vec<f64> = (0..fan_in).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|z| z * z).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        weights.extend(dir.iter().map(|z| (magnitude * z / norm) as f32));
        let grad_mag = noisy(rng, 0.1, t, 0.02);
        for _ in 0..fan_in {
            let z: f64 = rng.sample(StandardNormal);
            grads.push((grad_mag * z * scale) as f32);
        }
        gamma.push((sign(rng) * noisy(rng, 0.1, t, 0.02)) as f32);
        beta.push((sign(rng) * noisy(rng, 0.05, t, 0.01)) as f32);
        gamma_grad.push((sign(rng) * noisy(rng, 0.1, t, 0.02)) as f32);
        beta_grad.push((sign(rng) * noisy(rng, 0.1, t, 0.02)) as f32);

        let alive = noisy(rng, 0.05, 0.9 * t, 0.0).min(1.0);
        zero_fraction.push((1.0 - alive) as f32);

        // Activation spread: livelier channels occupy more histogram bins.
        let spread = noisy(rng, 0.0, t, 0.0).min(1.0);
        let occupied = 1 + (spread * (bins - 1) as f64).round() as usize;
        let base = total / occupied as u64;
        let extra = (total % occupied as u64) as usize;
        for b in 0..bins {
            let count = if b < occupied { base + u64::from(b < extra) } else { 0 };
            histograms.push(count as u32);
        }
        ranges.push([0.0, (3.0 * magnitude) as f32]);
    }

    let layer = LayerRecord {
        name,
        num_filters: n,
        weights: Tensor::new(vec![n, fan_in], weights),
        bn_gamma: Some(gamma),
        bn_beta: Some(beta),
        weight_grad: Some(Tensor::new(vec![n, fan_in], grads)),
        bn_gamma_grad: Some(gamma_grad),
        bn_beta_grad: Some(beta_grad),
        activation_stats: Some(ActivationStats {
            zero_fraction,
            bins,
            histograms,
            ranges,
            sample_total: total,
        }),
    };
    (layer, importance)
}
