//! Image sources, manifests, preprocessing, duplicate detection and
//! membership splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mint_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{Error, IoContext, Result};

pub type SampleId = u64;

pub const RECORD_MAGIC: &[u8; 8] = b"MINTIMG1";
pub const RECORD_VERSION: u32 = 1;
/// Smallest side accepted by [`resize`].
pub const MIN_RESOLUTION: usize = 8;

/// SHA-256 of an image's dimensions and pixel bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(height: usize, width: usize, pixels: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update((height as u32).to_le_bytes());
        h.update((width as u32).to_le_bytes());
        h.update(pixels);
        ContentHash(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(ContentHash(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Data the audited model was trained on (D).
    AuditedTraining,
    /// Data provably absent from D (E).
    External,
}

/// Which side of the membership question a sample sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Membership {
    /// Non-member (external data).
    E,
    /// Member of the audited model's training data.
    D,
}

impl Membership {
    pub fn label(self) -> f32 {
        match self {
            Membership::D => 1.0,
            Membership::E => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    /// Byte offset of the record inside a record file.
    Offset(u64),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: SampleId,
    pub location: Location,
    pub class_label: Option<u32>,
    pub hash: ContentHash,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceManifest {
    pub source_id: String,
    pub role: Role,
    /// Sorted by `sample_id`.
    pub entries: Vec<ManifestEntry>,
}

impl SourceManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.entries.iter().map(|e| e.sample_id)
    }

    /// Sidecar text: one `sample_id<TAB>hash_hex<TAB>class` line per sample, `-1` for no class.
    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let class = e.class_label.map_or(-1, |c| c as i64);
            out.push_str(&format!("{}\t{}\t{}\n", e.sample_id, e.hash.to_hex(), class));
        }
        out
    }

    /// Parse sidecar lines into `(sample_id, hash, class)` triples.
    pub fn parse_sidecar(text: &str) -> Result<Vec<(SampleId, ContentHash, Option<u32>)>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let bad = |d: &str| Error::format("manifest sidecar", format!("line {}", i + 1), d);
                let mut parts = line.split('\t');
                let id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("sample id"))?;
                let hash = parts
                    .next()
                    .and_then(ContentHash::from_hex)
                    .ok_or_else(|| bad("hash"))?;
                let class: i64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("class"))?;
                if parts.next().is_some() {
                    return Err(bad("extra fields"));
                }
                let class = if class < 0 { None } else { Some(class as u32) };
                Ok((id, hash, class))
            })
            .collect()
    }
}

/// Raw `H×W×3` u8 pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn hash(&self) -> ContentHash {
        ContentHash::of(self.height, self.width, &self.pixels)
    }

    /// Pixels scaled to [0, 1] as an `H×W×3` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[self.height, self.width, 3],
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
        .expect("pixel buffer matches dimensions")
    }
}

/// One record `d`: pixels in [0,1] plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub sample_id: SampleId,
    pub source_id: String,
    pub class_label: Option<u32>,
    pub pixels: Tensor<f32>,
}

/// A manifest together with its decoded pixels (index-aligned with `manifest.entries`).
#[derive(Debug, Clone)]
pub struct Source {
    pub manifest: SourceManifest,
    pub images: Vec<RawImage>,
}

impl Source {
    pub fn with_role(mut self, role: Role) -> Self {
        self.manifest.role = role;
        self
    }

    pub fn id(&self) -> &str {
        &self.manifest.source_id
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn sample(&self, index: usize) -> ImageSample {
        let e = &self.manifest.entries[index];
        ImageSample {
            sample_id: e.sample_id,
            source_id: self.manifest.source_id.clone(),
            class_label: e.class_label,
            pixels: self.images[index].to_tensor(),
        }
    }

    /// Build from in-memory images; entries are sorted by id and hashed.
    pub fn from_images(
        source_id: impl Into<String>,
        role: Role,
        items: Vec<(SampleId, Option<u32>, RawImage)>,
    ) -> Result<Self> {
        let mut items = items;
        items.sort_by_key(|(id, _, _)| *id);
        if let Some(w) = items.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(format!("duplicate sample id {} in source", w[0].0)));
        }
        let mut entries = Vec::with_capacity(items.len());
        let mut images = Vec::with_capacity(items.len());
        for (i, (id, class, img)) in items.into_iter().enumerate() {
            entries.push(ManifestEntry {
                sample_id: id,
                location: Location::Offset(i as u64),
                class_label: class,
                hash: img.hash(),
            });
            images.push(img);
        }
        Ok(Source {
            manifest: SourceManifest {
                source_id: source_id.into(),
                role,
                entries,
            },
            images,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    RawRecords,
    ImageDirectory,
}

/// Load a source. The source id is the file or directory stem; the role
/// defaults to [`Role::External`] (use [`Source::with_role`]).
pub fn load_source(path: &Path, format: SourceFormat) -> Result<Source> {
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "source".into());
    match format {
        SourceFormat::RawRecords => {
            let bytes = fs::read(path).at(path)?;
            let (items, offsets) = decode_records(&bytes)?;
            let mut src = Source::from_images(source_id, Role::External, items)?;
            // from_images sorted by id; restore true byte offsets.
            for e in &mut src.manifest.entries {
                e.location = Location::Offset(offsets[&e.sample_id]);
            }
            Ok(src)
        }
        SourceFormat::ImageDirectory => load_image_directory(path, source_id),
    }
}

type DecodedRecords = (Vec<(SampleId, Option<u32>, RawImage)>, HashMap<SampleId, u64>);

fn decode_records(bytes: &[u8]) -> Result<DecodedRecords> {
    let mut r = Reader::new("record file", bytes);
    r.magic(RECORD_MAGIC)?;
    let version = r.u32()?;
    if version != RECORD_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    if h == 0 || w == 0 {
        return Err(r.error("zero image dimension"));
    }
    let mut items = Vec::with_capacity(count);
    let mut offsets = HashMap::with_capacity(count);
    for index in 0..count {
        let offset = r.pos() as u64;
        let record = |r: &mut Reader| -> Result<(SampleId, i32, Vec<u8>)> {
            Ok((r.u64()?, r.i32()?, r.take(h * w * 3)?.to_vec()))
        };
        let (id, class, pixels) = record(&mut r).map_err(|e| match e {
            Error::Format { what, location, detail } => Error::Format {
                what,
                location: format!("record {index} ({location})"),
                detail,
            },
            e => e,
        })?;
        if class < -1 {
            return Err(Error::format("record file", format!("record {index}"), format!("class label {class}")));
        }
        if offsets.insert(id, offset).is_some() {
            return Err(Error::format("record file", format!("record {index}"), format!("duplicate sample id {id}")));
        }
        let class = (class >= 0).then_some(class as u32);
        items.push((id, class, RawImage { height: h, width: w, pixels }));
    }
    r.finish()?;
    Ok((items, offsets))
}

/// Write a record file. All images must share one size.
pub fn write_records(path: &Path, items: &[(SampleId, Option<u32>, &RawImage)]) -> Result<()> {
    let (h, w) = items.first().map_or((1, 1), |(_, _, img)| (img.height, img.width));
    let mut out = Writer::new();
    out.bytes(RECORD_MAGIC);
    out.u32(RECORD_VERSION);
    out.u32(items.len() as u32);
    out.u32(h as u32);
    out.u32(w as u32);
    for (id, class, img) in items {
        if img.height != h || img.width != w || img.pixels.len() != h * w * 3 {
            return Err(Error::Parameter(format!(
                "record {id}: image {}×{} does not match file size {h}×{w}",
                img.height, img.width
            )));
        }
        out.u64(*id);
        out.i32(class.map_or(-1, |c| c as i32));
        out.bytes(&img.pixels);
    }
    fs::write(path, out.buf).at(path)
}

/// Stable id for a file inside an image directory.
fn path_id(rel: &str) -> SampleId {
    let digest = Sha256::digest(rel.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png"
    )
}

/// PNG files directly inside `dir` are unlabeled; files inside a numeric
/// subdirectory take that number as class label.
fn load_image_directory(dir: &Path, source_id: String) -> Result<Source> {
    let mut files: Vec<(String, PathBuf, Option<u32>)> = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir).at(dir)?.collect::<std::io::Result<_>>().at(dir)?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let p = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if p.is_dir() {
            let Ok(class) = name.parse::<u32>() else { continue };
            let mut inner: Vec<_> = fs::read_dir(&p).at(&p)?.collect::<std::io::Result<_>>().at(&p)?;
            inner.sort_by_key(|e| e.file_name());
            for f in inner {
                let fp = f.path();
                if is_image(&fp) {
                    let rel = format!("{name}/{}", f.file_name().to_string_lossy());
                    files.push((rel, fp, Some(class)));
                }
            }
        } else if is_image(&p) {
            files.push((name, p, None));
        }
    }
    let mut items = Vec::with_capacity(files.len());
    let mut paths = HashMap::new();
    for (index, (rel, path, class)) in files.into_iter().enumerate() {
        let img = image::open(&path)
            .map_err(|e| Error::format("image directory", format!("file {index} ({})", path.display()), e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let id = path_id(&rel);
        paths.insert(id, path);
        items.push((
            id,
            class,
            RawImage {
                height: h as usize,
                width: w as usize,
                pixels: img.into_raw(),
            },
        ));
    }
    let mut src = Source::from_images(source_id, Role::External, items)?;
    for e in &mut src.manifest.entries {
        e.location = Location::Path(paths.remove(&e.sample_id).unwrap());
    }
    Ok(src)
}

/// Bilinear resampling with pixel-centre alignment, any output size.
pub(crate) fn bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out).unwrap()
}

/// Resize an `H×W×3` image to `R×R` by bilinear interpolation.
pub fn resize(image: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    if target < MIN_RESOLUTION {
        return Err(Error::Parameter(format!(
            "resize target {target} below minimum {MIN_RESOLUTION}"
        )));
    }
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::Parameter(format!("expected H×W×3 image, got {:?}", image.shape())));
    }
    if image.shape()[0] == target && image.shape()[1] == target {
        return Ok(image.clone());
    }
    Ok(bilinear(image, target, target))
}

/// Resize each image to `R×R` and stack into an `N×R×R×3` batch.
pub fn preprocess_batch(images: &[&RawImage], resolution: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * resolution * resolution * 3);
    for img in images {
        data.extend_from_slice(resize(&img.to_tensor(), resolution)?.data());
    }
    Ok(Tensor::new(&[images.len(), resolution, resolution, 3], data)?)
}

/// All cross-source exact-content collisions, as sorted `(id, id)` pairs
/// (lower manifest index first within a pair).
pub fn dedup_check(manifests: &[&SourceManifest]) -> Vec<(SampleId, SampleId)> {
    let mut by_hash: BTreeMap<ContentHash, Vec<(usize, SampleId)>> = BTreeMap::new();
    for (m, manifest) in manifests.iter().enumerate() {
        for e in &manifest.entries {
            by_hash.entry(e.hash).or_default().push((m, e.sample_id));
        }
    }
    let mut pairs = Vec::new();
    for group in by_hash.values().filter(|g| g.len() > 1) {
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                if a.0 != b.0 {
                    pairs.push(if a.0 < b.0 { (a.1, b.1) } else { (b.1, a.1) });
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Requested sizes of a membership split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_d: usize,
    pub train_e: usize,
    /// Per side: |D-eval| = |E-eval| = `eval`.
    pub eval: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Exclude eval-side external samples whose class occurs among the
    /// training-side external samples.
    pub class_disjoint_eval: bool,
}

/// Sample ids of a MINT train/eval partition, plus the content hash of each id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_d: Vec<SampleId>,
    pub train_e: Vec<SampleId>,
    pub eval_d: Vec<SampleId>,
    pub eval_e: Vec<SampleId>,
    pub hashes: BTreeMap<SampleId, ContentHash>,
}

impl SplitSpec {
    pub fn train(&self) -> impl Iterator<Item = (SampleId, Membership)> + '_ {
        self.train_d
            .iter()
            .map(|&i| (i, Membership::D))
            .chain(self.train_e.iter().map(|&i| (i, Membership::E)))
    }

    pub fn eval(&self) -> impl Iterator<Item = (SampleId, Membership)> + '_ {
        self.eval_d
            .iter()
            .map(|&i| (i, Membership::D))
            .chain(self.eval_e.iter().map(|&i| (i, Membership::E)))
    }

    pub fn all_ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.train().chain(self.eval()).map(|(i, _)| i)
    }

    /// Check id- and hash-disjointness of train vs eval and eval balance.
    pub fn validate(&self) -> Result<()> {
        if self.eval_d.len() != self.eval_e.len() {
            return Err(Error::Protocol(format!(
                "unbalanced eval split: {} D vs {} E",
                self.eval_d.len(),
                self.eval_e.len()
            )));
        }
        let train_ids: BTreeSet<SampleId> = self.train().map(|(i, _)| i).collect();
        if train_ids.len() != self.train_d.len() + self.train_e.len() {
            return Err(Error::Protocol("duplicate id inside MINT-train".into()));
        }
        let eval_ids: BTreeSet<SampleId> = self.eval().map(|(i, _)| i).collect();
        if eval_ids.len() != self.eval_d.len() + self.eval_e.len() {
            return Err(Error::Protocol("duplicate id inside MINT-eval".into()));
        }
        if let Some(id) = train_ids.intersection(&eval_ids).next() {
            return Err(Error::Protocol(format!("sample {id} in both MINT-train and MINT-eval")));
        }
        let hash = |id: &SampleId| {
            self.hashes
                .get(id)
                .copied()
                .ok_or_else(|| Error::Protocol(format!("no content hash for sample {id}")))
        };
        let train_hashes: BTreeSet<ContentHash> = train_ids.iter().map(hash).collect::<Result<_>>()?;
        for id in &eval_ids {
            if train_hashes.contains(&hash(id)?) {
                return Err(Error::Protocol(format!(
                    "eval sample {id} duplicates MINT-train content"
                )));
            }
        }
        Ok(())
    }
}

fn shuffled(ids: impl Iterator<Item = SampleId>, rng: &mut ChaCha8Rng) -> Vec<SampleId> {
    let mut v: Vec<SampleId> = ids.collect();
    v.shuffle(rng);
    v
}

/// Draw a deterministic membership split.
///
/// D-eval and D-train both come from `d` (every D sample is a member);
/// E-train is pooled from `e_train`; E-eval comes only from `e_eval`.
pub fn make_membership_split(
    d: &SourceManifest,
    e_train: &[&SourceManifest],
    e_eval: &SourceManifest,
    counts: SplitCounts,
    options: SplitOptions,
    seed: u64,
) -> Result<SplitSpec> {
    if e_train.iter().any(|m| m.source_id == e_eval.source_id) {
        return Err(Error::Config(format!(
            "eval source `{}` is also listed as a MINT-training source",
            e_eval.source_id
        )));
    }
    if e_train.is_empty() {
        return Err(Error::Config("no external training sources".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hashes: BTreeMap<SampleId, ContentHash> = BTreeMap::new();
    let mut classes: HashMap<SampleId, Option<u32>> = HashMap::new();
    for m in std::iter::once(d).chain(e_train.iter().copied()).chain(std::iter::once(e_eval)) {
        for e in &m.entries {
            hashes.insert(e.sample_id, e.hash);
            classes.insert(e.sample_id, e.class_label);
        }
    }

    let d_order = shuffled(d.ids(), &mut rng);
    let e_order = shuffled(e_train.iter().flat_map(|m| m.ids()), &mut rng);
    let mut eval_order = shuffled(e_eval.ids(), &mut rng);

    // Pick E-train first so a class-disjoint eval can exclude its classes.
    let mut train_e = Vec::with_capacity(counts.train_e);
    let mut seen_e: BTreeSet<ContentHash> = BTreeSet::new();
    for id in e_order {
        if train_e.len() == counts.train_e {
            break;
        }
        if seen_e.insert(hashes[&id]) {
            train_e.push(id);
        }
    }
    if train_e.len() < counts.train_e {
        return Err(Error::Capacity(format!(
            "E-train side: {} distinct samples available, {} requested",
            train_e.len(),
            counts.train_e
        )));
    }
    if options.class_disjoint_eval {
        let train_classes: BTreeSet<u32> = train_e.iter().filter_map(|id| classes[id]).collect();
        eval_order.retain(|id| classes[id].map_or(true, |c| !train_classes.contains(&c)));
    }

    let mut eval_hashes: BTreeSet<ContentHash> = BTreeSet::new();
    let mut eval_e = Vec::with_capacity(counts.eval);
    for id in eval_order {
        if eval_e.len() == counts.eval {
            break;
        }
        let h = hashes[&id];
        if !seen_e.contains(&h) && eval_hashes.insert(h) {
            eval_e.push(id);
        }
    }
    if eval_e.len() < counts.eval {
        return Err(Error::Capacity(format!(
            "E-eval side (`{}`): {} usable samples, {} requested",
            e_eval.source_id,
            eval_e.len(),
            counts.eval
        )));
    }

    let mut eval_d = Vec::with_capacity(counts.eval);
    let mut train_d = Vec::with_capacity(counts.train_d);
    let mut train_hashes: BTreeSet<ContentHash> = seen_e;
    for id in d_order {
        let h = hashes[&id];
        if eval_d.len() < counts.eval {
            if !train_hashes.contains(&h) && eval_hashes.insert(h) {
                eval_d.push(id);
            }
        } else if train_d.len() < counts.train_d {
            if !eval_hashes.contains(&h) && train_hashes.insert(h) {
                train_d.push(id);
            }
        } else {
            break;
        }
    }
    if eval_d.len() < counts.eval || train_d.len() < counts.train_d {
        return Err(Error::Capacity(format!(
            "D side (`{}`): {} samples, needs {} eval + {} train",
            d.source_id,
            d.len(),
            counts.eval,
            counts.train_d
        )));
    }

    let keep: BTreeSet<SampleId> = train_d
        .iter()
        .chain(&train_e)
        .chain(&eval_d)
        .chain(&eval_e)
        .copied()
        .collect();
    hashes.retain(|id, _| keep.contains(id));
    let split = SplitSpec {
        seed,
        train_d,
        train_e,
        eval_d,
        eval_e,
        hashes,
    };
    split.validate()?;
    Ok(split)
}

/// Epoch-wise balanced mini-batches over the training side of a split.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    d: Vec<SampleId>,
    e: Vec<SampleId>,
    half: usize,
    seed: u64,
}

impl BalancedBatches {
    pub fn new(split: &SplitSpec, batch_size: usize, seed: u64) -> Result<Self> {
        Self::from_ids(split.train_d.clone(), split.train_e.clone(), batch_size, seed)
    }

    pub fn from_ids(d: Vec<SampleId>, e: Vec<SampleId>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::Parameter(format!("batch size must be even and positive, got {batch_size}")));
        }
        Ok(BalancedBatches {
            d,
            e,
            half: batch_size / 2,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.d.len().min(self.e.len()) / self.half
    }

    /// Batches for one epoch: each holds `batch_size/2` D then `batch_size/2` E
    /// samples; the remainder that does not fill a batch is dropped.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<(SampleId, Membership)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut d = self.d.clone();
        let mut e = self.e.clone();
        d.shuffle(&mut rng);
        e.shuffle(&mut rng);
        (0..self.batches_per_epoch())
            .map(|b| {
                let r = b * self.half..(b + 1) * self.half;
                d[r.clone()]
                    .iter()
                    .map(|&i| (i, Membership::D))
                    .chain(e[r].iter().map(|&i| (i, Membership::E)))
                    .collect()
            })
            .collect()
    }
}

/// Index over several sources for id → image lookups. Ids must be unique
/// across all sources.
#[derive(Debug, Clone, Default)]
pub struct SourceSet {
    pub sources: Vec<Source>,
    index: HashMap<SampleId, (usize, usize)>,
}

impl SourceSet {
    pub fn new(sources: Vec<Source>) -> Result<Self> {
        let mut index = HashMap::new();
        for (s, src) in sources.iter().enumerate() {
            for (i, e) in src.manifest.entries.iter().enumerate() {
                if let Some((other, _)) = index.insert(e.sample_id, (s, i)) {
                    return Err(Error::Config(format!(
                        "sample id {} appears in both `{}` and `{}`",
                        e.sample_id,
                        sources[other].id(),
                        src.id()
                    )));
                }
            }
        }
        Ok(SourceSet { sources, index })
    }

    pub fn get(&self, id: SampleId) -> Option<(&Source, usize)> {
        self.index.get(&id).map(|&(s, i)| (&self.sources[s], i))
    }

    pub fn image(&self, id: SampleId) -> Option<&RawImage> {
        self.get(id).map(|(s, i)| &s.images[i])
    }

    pub fn by_id(&self, source_id: &str) -> Option<&Source> {
        self.sources.iter().find(|s| s.id() == source_id)
    }

    pub fn manifests(&self) -> Vec<&SourceManifest> {
        self.sources.iter().map(|s| &s.manifest).collect()
    }
}
