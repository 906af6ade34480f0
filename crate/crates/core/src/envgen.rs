//! Synthetic multi-client environments with a ground-truth manifest.
//!
//! Every dataset starts as clean canonical images sorted into fine-class
//! folders; corruptions are then applied on disk and recorded in the
//! per-dataset ledger of the manifest.

use crate::fedcore::Registry;
use crate::image::{CanonicalProfile, GrayImage, ImageFormat, CANONICAL_SIDE};
use crate::protocol::{GuidanceMode, TaskSpec};
use crate::vocab::{class_pattern, Modality, TaskKind, PATTERN_GRID};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Intensity stddev of every clean image.
pub const IMAGE_STD: f64 = 10.0;
/// Amplitude of the class pattern before standardization.
pub const PATTERN_AMPLITUDE: f64 = 12.0;
pub const PIXEL_NOISE: f64 = 3.0;
pub const JUNK_EXTENSIONS: [&str; 7] = ["txt", "csv", "pdf", "xls", "log", "xml", "ini"];
pub const CONTRAST_GAINS: [f64; 3] = [0.5, 0.7, 1.4];
pub const FL_PREFERENCES: [&str; 6] = [
    "baseline aggregation",
    "personalization desired",
    "non-IID robustness",
    "client drift correction",
    "convergence stability",
    "",
];
/// Separator between class name and file name in flattened datasets.
pub const FLAT_SEPARATOR: &str = "__";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("destination {0} is not empty")]
    DestinationNotEmpty(PathBuf),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("generator bug: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub seed: u64,
    pub modality: Modality,
    pub num_clients: usize,
    pub datasets_per_client: (usize, usize),
    pub classes_per_dataset: (usize, usize),
    pub samples_per_class: (usize, usize),
    pub eligible_fraction: f64,
    /// Apply corruptions and perturbations; `false` yields clean datasets.
    pub corrupt: bool,
    /// Probability that a dataset is stored flat instead of in class folders.
    pub flat_fraction: f64,
    pub format_fraction: f64,
    pub resolution_fraction: f64,
    pub intensity_fraction: f64,
    pub heldout_per_class: usize,
    /// Fixed preference text; drawn from [`FL_PREFERENCES`] when absent.
    pub fl_preferences: Option<String>,
    pub guidance_mode: GuidanceMode,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            modality: Modality::Dermatoscopy,
            num_clients: 4,
            datasets_per_client: (1, 2),
            classes_per_dataset: (2, 4),
            samples_per_class: (10, 16),
            eligible_fraction: 0.5,
            corrupt: true,
            flat_fraction: 0.25,
            format_fraction: 0.2,
            resolution_fraction: 0.15,
            intensity_fraction: 0.15,
            heldout_per_class: 30,
            fl_preferences: None,
            guidance_mode: GuidanceMode::FineGrained,
        }
    }
}

impl EnvironmentConfig {
    pub fn new(seed: u64, modality: Modality) -> Self {
        Self {
            seed,
            modality,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.num_clients < 2 {
            return bad(format!("num_clients must be at least 2, got {}", self.num_clients));
        }
        if self.num_clients > 99 {
            return bad("num_clients must be at most 99".into());
        }
        for (name, (lo, hi)) in [
            ("datasets_per_client", self.datasets_per_client),
            ("classes_per_dataset", self.classes_per_dataset),
            ("samples_per_class", self.samples_per_class),
        ] {
            if lo > hi {
                return bad(format!("{name} range is inverted ({lo} > {hi})"));
            }
            if lo == 0 {
                return bad(format!("{name} lower bound must be positive"));
            }
        }
        if self.datasets_per_client.1 > 9 {
            return bad("datasets_per_client upper bound must be at most 9".into());
        }
        let vocab = self.modality.vocabulary();
        let max_classes = Modality::ALL.iter().map(|m| m.vocabulary().fine.len()).min().unwrap();
        if self.classes_per_dataset.1 > max_classes {
            return bad(format!("classes_per_dataset upper bound must be at most {max_classes}"));
        }
        if self.classes_per_dataset.1 < vocab.coarse.len() {
            return bad(format!(
                "classes_per_dataset upper bound must cover the {} coarse classes",
                vocab.coarse.len()
            ));
        }
        if self.corrupt && self.samples_per_class.0 < 10 {
            return bad("samples_per_class lower bound must be at least 10 when corrupting".into());
        }
        if self.samples_per_class.1 > 500 {
            return bad("samples_per_class upper bound must be at most 500".into());
        }
        if !(self.eligible_fraction > 0.0 && self.eligible_fraction <= 1.0) {
            return bad("eligible_fraction must lie in (0, 1]".into());
        }
        for (name, f) in [
            ("flat_fraction", self.flat_fraction),
            ("format_fraction", self.format_fraction),
            ("resolution_fraction", self.resolution_fraction),
            ("intensity_fraction", self.intensity_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.heldout_per_class == 0 {
            return bad("heldout_per_class must be positive".into());
        }
        Ok(())
    }

    /// Number of eligible clients implied by the config.
    pub fn eligible_count(&self) -> usize {
        let n = self.num_clients;
        let e = ((self.eligible_fraction * n as f64).round() as usize).clamp(1, n);
        if self.eligible_fraction < 1.0 {
            e.min(n - 1)
        } else {
            e
        }
    }
}

/// The target profile of an environment: canonical container and size with
/// the modality's intensity band.
pub fn modality_profile(modality: Modality) -> CanonicalProfile {
    CanonicalProfile {
        format: ImageFormat::Pgm,
        width: CANONICAL_SIDE,
        height: CANONICAL_SIDE,
        mean: modality.band().0,
        std: IMAGE_STD,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCard {
    pub client_id: String,
    pub dataset_name: String,
    pub modality: Modality,
    pub task_kind: TaskKind,
    pub label_set: Vec<String>,
    pub sample_counts: BTreeMap<String, usize>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDatacards {
    pub client_id: String,
    pub datasets: Vec<DataCard>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Nested,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanFile {
    pub class: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateEntry {
    pub path: String,
    pub original: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffModalityEntry {
    pub path: String,
    pub source_modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MislabelEntry {
    pub path: String,
    pub true_class: String,
    pub placed_class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationEntry {
    pub stem: String,
    pub path: String,
    pub original_format: ImageFormat,
    pub current_format: ImageFormat,
    pub original_resolution: (u32, u32),
    pub current_resolution: (u32, u32),
    pub contrast_gain: Option<f64>,
}

/// Ground truth for one dataset. Paths are workspace-relative with `/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLedger {
    pub client: String,
    pub dataset: String,
    pub modality: Modality,
    pub task_kind: TaskKind,
    /// Eligible client, task modality and task kind.
    pub in_scope: bool,
    pub layout: Layout,
    pub classes: Vec<String>,
    /// Uncorrupted samples by stem.
    pub clean: BTreeMap<String, CleanFile>,
    pub duplicates: Vec<DuplicateEntry>,
    pub off_modality: Vec<OffModalityEntry>,
    pub mislabeled: Vec<MislabelEntry>,
    pub junk: Vec<String>,
    pub perturbations: Vec<PerturbationEntry>,
}

impl DatasetLedger {
    pub fn dir(&self) -> String {
        format!("clients/{}/{}", self.client, self.dataset)
    }

    /// Every path the ledger accounts for.
    pub fn all_paths(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.clean.values().map(|c| c.path.as_str()).collect();
        out.extend(self.duplicates.iter().map(|d| d.path.as_str()));
        out.extend(self.off_modality.iter().map(|d| d.path.as_str()));
        out.extend(self.mislabeled.iter().map(|d| d.path.as_str()));
        out.extend(self.junk.iter().map(String::as_str));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSchema {
    pub profile: CanonicalProfile,
    pub classes: Vec<String>,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthManifest {
    pub schema_version: u32,
    pub config: EnvironmentConfig,
    pub task: TaskSpec,
    pub clients: Vec<String>,
    pub eligible_clients: BTreeSet<String>,
    pub datasets: Vec<DatasetLedger>,
    pub canonical_label_map: BTreeMap<String, String>,
    pub suitable_algorithms: BTreeSet<String>,
    pub canonical_schema: CanonicalSchema,
    pub heldout_dir: String,
}

impl GroundTruthManifest {
    pub fn load(root: &Path) -> Result<Self, EnvError> {
        let text = fs::read_to_string(root.join("manifest.json"))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| EnvError::InvalidConfig(format!("manifest: {e}")))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(EnvError::InvalidConfig(format!(
                "manifest schema {} is not {MANIFEST_SCHEMA_VERSION}",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn dataset(&self, client: &str, dataset: &str) -> Option<&DatasetLedger> {
        self.datasets.iter().find(|d| d.client == client && d.dataset == dataset)
    }

    pub fn in_scope(&self) -> impl Iterator<Item = &DatasetLedger> {
        self.datasets.iter().filter(|d| d.in_scope)
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// A clean 32×32 sample of `fine` drawn in `modality`'s band.
pub fn synth_image(modality: Modality, pattern_modality: Modality, fine: &str, rng: &mut ChaCha8Rng) -> GrayImage {
    let pattern = class_pattern(pattern_modality, fine).expect("class in vocabulary");
    let profile = modality_profile(modality);
    let noise = Normal::new(0.0, PIXEL_NOISE).unwrap();
    let cell = CANONICAL_SIDE / PATTERN_GRID;
    let mut px = Vec::with_capacity((CANONICAL_SIDE * CANONICAL_SIDE) as usize);
    for y in 0..CANONICAL_SIDE {
        for x in 0..CANONICAL_SIDE {
            let p = pattern[((y / cell) * PATTERN_GRID + x / cell) as usize];
            let v = profile.mean + PATTERN_AMPLITUDE * p + noise.sample(rng);
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(CANONICAL_SIDE, CANONICAL_SIDE, px).standardize(profile.mean, profile.std)
}

fn rel(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

struct DatasetBuilder<'a> {
    root: &'a Path,
    ledger: DatasetLedger,
    next_index: usize,
}

impl DatasetBuilder<'_> {
    fn next_stem(&mut self) -> String {
        self.next_index += 1;
        format!("img_{:04}", self.next_index)
    }

    fn class_dir(&self, class: &str) -> String {
        format!("{}/{}", self.ledger.dir(), class)
    }

    fn write(&self, rel_path: &str, bytes: &[u8]) -> Result<(), EnvError> {
        let p = self.root.join(rel_path);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)?;
        Ok(())
    }
}

/// Re-encodes, downsamples and contrast-scales random subsets of the clean
/// files of a dataset, returning one ledger entry per touched file.
pub fn inject_format_perturbations(
    root: &Path,
    ledger: &mut DatasetLedger,
    fractions: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PerturbationEntry>, EnvError> {
    let stems: Vec<String> = ledger.clean.keys().cloned().collect();
    let pick = |frac: f64, rng: &mut ChaCha8Rng| -> BTreeSet<String> {
        let k = (frac * stems.len() as f64).round() as usize;
        stems.choose_multiple(rng, k).cloned().collect()
    };
    let fmt_set = pick(fractions.0, rng);
    let res_set = pick(fractions.1, rng);
    let gain_set = pick(fractions.2, rng);
    let mut entries = Vec::new();
    for stem in &stems {
        let (f, r, g) = (fmt_set.contains(stem), res_set.contains(stem), gain_set.contains(stem));
        if !(f || r || g) {
            continue;
        }
        let clean = ledger.clean.get_mut(stem).unwrap();
        let bytes = fs::read(root.join(&clean.path))?;
        let (mut img, orig_fmt) =
            GrayImage::decode(&bytes).map_err(|e| EnvError::Internal(format!("{}: {e}", clean.path)))?;
        let orig_res = (img.width, img.height);
        let gain = g.then(|| *CONTRAST_GAINS.choose(rng).unwrap());
        if let Some(gain) = gain {
            img = img.scale_contrast(gain);
        }
        if r {
            img = img.downsample(*[2, 4].choose(rng).unwrap());
        }
        let fmt = if f {
            *[ImageFormat::Bmp, ImageFormat::Tiff, ImageFormat::Jpeg].choose(rng).unwrap()
        } else {
            orig_fmt
        };
        let new_path = format!("{}.{}", clean.path.rsplit_once('.').unwrap().0, fmt.extension());
        if new_path != clean.path {
            fs::remove_file(root.join(&clean.path))?;
        }
        fs::write(root.join(&new_path), img.encode(fmt))?;
        clean.path = new_path.clone();
        entries.push(PerturbationEntry {
            stem: stem.clone(),
            path: new_path,
            original_format: orig_fmt,
            current_format: fmt,
            original_resolution: orig_res,
            current_resolution: (img.width, img.height),
            contrast_gain: gain,
        });
    }
    Ok(entries)
}

const JUNK_WORDS: [&str; 8] = ["notes", "readme", "summary", "export", "report", "session", "config", "metadata"];

fn junk_content(ext: &str, name: &str) -> Vec<u8> {
    match ext {
        "csv" => format!("patient_ref,site,comment\nanon,{name},n/a\n").into_bytes(),
        "pdf" => format!("%PDF-1.4\n% {name}\n1 0 obj << /Type /Catalog >> endobj\n%%EOF\n").into_bytes(),
        "xls" => format!("sheet\t{name}\nrow\tvalue\n").into_bytes(),
        "xml" => format!("<?xml version=\"1.0\"?>\n<note id=\"{name}\"/>\n").into_bytes(),
        "ini" => format!("[export]\nname={name}\n").into_bytes(),
        "log" => format!("INFO copied {name}\n").into_bytes(),
        _ => format!("Scanner notes for {name}. Not part of the dataset.\n").into_bytes(),
    }
}

/// Places 2–8 non-image files inside random class folders.
pub fn inject_junk_files(
    root: &Path,
    ledger: &DatasetLedger,
    count: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, EnvError> {
    let n = count.unwrap_or_else(|| rng.random_range(2..=8));
    let mut out = Vec::with_capacity(n);
    let mut used = BTreeSet::new();
    while out.len() < n {
        let class = ledger.classes.choose(rng).unwrap();
        let ext = *JUNK_EXTENSIONS.choose(rng).unwrap();
        let word = *JUNK_WORDS.choose(rng).unwrap();
        let name = format!("{word}_{:02}.{ext}", rng.random_range(0..100));
        if !used.insert(name.clone()) {
            continue;
        }
        let path = format!("{}/{}/{}", ledger.dir(), class, name);
        let p = root.join(&path);
        fs::write(&p, junk_content(ext, &name))?;
        out.push(path);
    }
    Ok(out)
}

fn mislabel(b: &mut DatasetBuilder<'_>, count: usize, rng: &mut ChaCha8Rng) -> Result<(), EnvError> {
    let classes = b.ledger.classes.clone();
    let sizes: BTreeMap<String, usize> = classes
        .iter()
        .map(|c| (c.clone(), b.ledger.clean.values().filter(|f| &f.class == c).count()))
        .collect();
    let stems: Vec<String> = b.ledger.clean.keys().cloned().collect();
    for _attempt in 0..200 {
        let mut lost: BTreeMap<&str, usize> = BTreeMap::new();
        let mut incoming: BTreeMap<&str, usize> = BTreeMap::new();
        let mut picks: Vec<(String, String)> = Vec::new();
        let mut order = stems.clone();
        order.shuffle(rng);
        for stem in order {
            if picks.len() == count {
                break;
            }
            let src = b.ledger.clean[&stem].class.clone();
            if lost.get(src.as_str()).copied().unwrap_or(0) + 1 > sizes[&src] / 3 {
                continue;
            }
            let mut targets: Vec<&String> = classes.iter().filter(|c| **c != src).collect();
            targets.shuffle(rng);
            for t in targets {
                let remaining = sizes[t] - lost.get(t.as_str()).copied().unwrap_or(0);
                let inc = incoming.get(t.as_str()).copied().unwrap_or(0);
                if 2 * (inc + 1) < remaining {
                    *lost.entry(classes.iter().find(|c| **c == src).unwrap()).or_default() += 1;
                    *incoming.entry(t).or_default() += 1;
                    picks.push((stem.clone(), t.clone()));
                    break;
                }
            }
        }
        if picks.len() == count {
            // Targets keep a majority of true members after every move.
            if picks.iter().any(|(_, t)| 2 * incoming[t.as_str()] >= sizes[t] - lost.get(t.as_str()).copied().unwrap_or(0)) {
                continue;
            }
            for (stem, target) in picks {
                let file = b.ledger.clean.remove(&stem).unwrap();
                let name = file.path.rsplit('/').next().unwrap().to_string();
                let dst = format!("{}/{}", b.class_dir(&target), name);
                fs::rename(b.root.join(&file.path), b.root.join(&dst))?;
                b.ledger.mislabeled.push(MislabelEntry {
                    path: dst,
                    true_class: file.class,
                    placed_class: target,
                });
            }
            return Ok(());
        }
    }
    Err(EnvError::Internal(format!("could not place {count} mislabels in {}", b.ledger.dataset)))
}

fn inject_off_modality(b: &mut DatasetBuilder<'_>, count: usize, rng: &mut ChaCha8Rng) -> Result<(), EnvError> {
    let others: Vec<Modality> = Modality::ALL.into_iter().filter(|m| *m != b.ledger.modality).collect();
    for _ in 0..count {
        let source = *others.choose(rng).unwrap();
        let class = b.ledger.classes.choose(rng).unwrap().clone();
        let img = synth_image(source, b.ledger.modality, &class, rng);
        let stem = b.next_stem();
        let path = format!("{}/{}.pgm", b.class_dir(&class), stem);
        b.write(&path, &img.encode(ImageFormat::Pgm))?;
        b.ledger.off_modality.push(OffModalityEntry {
            path,
            source_modality: source,
        });
    }
    Ok(())
}

fn inject_duplicates(b: &mut DatasetBuilder<'_>, count: usize, rng: &mut ChaCha8Rng) -> Result<(), EnvError> {
    let stems: Vec<String> = b.ledger.clean.keys().cloned().collect();
    let originals: Vec<String> = stems.choose_multiple(rng, count).cloned().collect();
    for orig in originals {
        let src = b.ledger.clean[&orig].path.clone();
        let ext = src.rsplit_once('.').unwrap().1.to_string();
        let stem = b.next_stem();
        let dir = src.rsplit_once('/').unwrap().0.to_string();
        let path = format!("{dir}/{stem}.{ext}");
        fs::copy(b.root.join(&src), b.root.join(&path))?;
        b.ledger.duplicates.push(DuplicateEntry { path, original: src });
    }
    Ok(())
}

/// Moves every `<dataset>/<class>/<name>` to `<dataset>/<class>__<name>`.
fn flatten(b: &mut DatasetBuilder<'_>) -> Result<(), EnvError> {
    let dir = b.ledger.dir();
    let root = b.root;
    let flat_name = |p: &str| -> String {
        let tail = p.strip_prefix(&format!("{dir}/")).unwrap();
        let (class, name) = tail.split_once('/').unwrap();
        format!("{dir}/{class}{FLAT_SEPARATOR}{name}")
    };
    let flat = |p: &mut String| -> Result<(), EnvError> {
        let np = flat_name(p);
        fs::rename(root.join(&*p), root.join(&np))?;
        *p = np;
        Ok(())
    };
    for f in b.ledger.clean.values_mut() {
        flat(&mut f.path)?;
    }
    for d in &mut b.ledger.duplicates {
        flat(&mut d.path)?;
        d.original = flat_name(&d.original);
    }
    for o in &mut b.ledger.off_modality {
        flat(&mut o.path)?;
    }
    for m in &mut b.ledger.mislabeled {
        flat(&mut m.path)?;
    }
    for j in &mut b.ledger.junk {
        flat(j)?;
    }
    let stem_paths: BTreeMap<String, String> =
        b.ledger.clean.iter().map(|(s, c)| (s.clone(), c.path.clone())).collect();
    for p in &mut b.ledger.perturbations {
        p.path = stem_paths[&p.stem].clone();
    }
    for class in &b.ledger.classes {
        fs::remove_dir(root.join(b.class_dir(class)))?;
    }
    b.ledger.layout = Layout::Flat;
    Ok(())
}

fn describe(card: &DataCard) -> String {
    let kind = match card.task_kind {
        TaskKind::Classification => "image-level class labels",
        TaskKind::Segmentation => "pixel masks for lesion segmentation",
        TaskKind::Detection => "bounding boxes for lesion detection",
        TaskKind::Regression => "continuous severity scores",
    };
    let total: usize = card.sample_counts.values().sum();
    format!(
        "{} images collected at site {} ({} samples) annotated with {} over classes: {}.",
        card.modality,
        card.client_id,
        total,
        kind,
        card.label_set.join(", ")
    )
}

struct DatasetPlan {
    modality: Modality,
    task_kind: TaskKind,
}

fn plan_client(
    env: Modality,
    eligible: bool,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DatasetPlan> {
    let others: Vec<Modality> = Modality::ALL.into_iter().filter(|m| *m != env).collect();
    let non_cls = [TaskKind::Segmentation, TaskKind::Detection, TaskKind::Regression];
    (0..n)
        .map(|i| {
            if eligible {
                let task_kind = if i == 0 || rng.random_bool(0.6) {
                    TaskKind::Classification
                } else {
                    *non_cls.choose(rng).unwrap()
                };
                DatasetPlan { modality: env, task_kind }
            } else {
                match rng.random_range(0..3) {
                    0 => DatasetPlan {
                        modality: env,
                        task_kind: *non_cls.choose(rng).unwrap(),
                    },
                    1 => DatasetPlan {
                        modality: *others.choose(rng).unwrap(),
                        task_kind: TaskKind::Classification,
                    },
                    _ => DatasetPlan {
                        modality: *others.choose(rng).unwrap(),
                        task_kind: *TaskKind::ALL.choose(rng).unwrap(),
                    },
                }
            }
        })
        .collect()
}

fn pick_classes(modality: Modality, range: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<String> {
    let vocab = modality.vocabulary();
    let k = draw(rng, range).clamp(vocab.coarse.len(), vocab.fine.len());
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    for coarse in vocab.coarse {
        let members: Vec<usize> = (0..vocab.fine.len()).filter(|&i| vocab.fine[i].1 == *coarse).collect();
        chosen.insert(*members.choose(rng).unwrap());
    }
    let rest: Vec<usize> = (0..vocab.fine.len()).filter(|i| !chosen.contains(i)).collect();
    chosen.extend(rest.choose_multiple(rng, k - chosen.len()));
    chosen.into_iter().map(|i| vocab.fine[i].0.to_string()).collect()
}

fn is_empty_dir(p: &Path) -> Result<bool, EnvError> {
    if !p.exists() {
        return Ok(true);
    }
    Ok(fs::read_dir(p)?.next().is_none())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EnvError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")?;
    Ok(())
}

pub fn task_for(config: &EnvironmentConfig, fl_preferences: String) -> TaskSpec {
    let vocab = config.modality.vocabulary();
    let schema: Vec<String> = vocab.coarse.iter().map(|s| s.to_string()).collect();
    TaskSpec {
        modality: config.modality,
        task_kind: TaskKind::Classification,
        objective: format!(
            "Train a federated {} classifier for {} with target classes {}.",
            config.modality,
            config.modality.application(),
            schema.join(", ")
        ),
        target_schema: schema,
        guidance_mode: config.guidance_mode,
        fl_preferences,
        canonical_profile: modality_profile(config.modality),
    }
}

/// Writes the environment for `config` under `dest` and returns its manifest.
pub fn generate_environment(config: &EnvironmentConfig, dest: &Path) -> Result<(PathBuf, GroundTruthManifest), EnvError> {
    config.validate()?;
    if !is_empty_dir(dest)? {
        return Err(EnvError::DestinationNotEmpty(dest.to_path_buf()));
    }
    fs::create_dir_all(dest)?;
    let root = dest;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(Modality::ALL.iter().position(|m| *m == config.modality).unwrap() as u64);

    let clients: Vec<String> = (1..=config.num_clients).map(|i| format!("c{i:02}")).collect();
    let mut eligible_idx: Vec<usize> = (0..clients.len()).collect();
    eligible_idx.shuffle(&mut rng);
    eligible_idx.truncate(config.eligible_count());
    let eligible: BTreeSet<String> = eligible_idx.iter().map(|&i| clients[i].clone()).collect();

    let fl_preferences = config
        .fl_preferences
        .clone()
        .unwrap_or_else(|| FL_PREFERENCES.choose(&mut rng).unwrap().to_string());
    let task = task_for(config, fl_preferences);

    let mut ledgers = Vec::new();
    let mut dataset_counter = 0usize;
    for client in &clients {
        let is_eligible = eligible.contains(client);
        let n = draw(&mut rng, config.datasets_per_client);
        let plans = plan_client(config.modality, is_eligible, n, &mut rng);
        let mut cards = Vec::new();
        for plan in plans {
            dataset_counter += 1;
            let name = format!("{}{:02}", plan.modality.prefix(), dataset_counter);
            let classes = pick_classes(plan.modality, config.classes_per_dataset, &mut rng);
            let mut b = DatasetBuilder {
                root,
                ledger: DatasetLedger {
                    client: client.clone(),
                    dataset: name.clone(),
                    modality: plan.modality,
                    task_kind: plan.task_kind,
                    in_scope: is_eligible
                        && plan.modality == config.modality
                        && plan.task_kind == TaskKind::Classification,
                    layout: Layout::Nested,
                    classes: classes.clone(),
                    clean: BTreeMap::new(),
                    duplicates: vec![],
                    off_modality: vec![],
                    mislabeled: vec![],
                    junk: vec![],
                    perturbations: vec![],
                },
                next_index: 0,
            };
            let mut counts = BTreeMap::new();
            for class in &classes {
                let k = draw(&mut rng, config.samples_per_class);
                counts.insert(class.clone(), k);
                fs::create_dir_all(root.join(b.class_dir(class)))?;
                for _ in 0..k {
                    let img = synth_image(plan.modality, plan.modality, class, &mut rng);
                    let stem = b.next_stem();
                    let path = format!("{}/{}.pgm", b.class_dir(class), stem);
                    b.write(&path, &img.encode(ImageFormat::Pgm))?;
                    b.ledger.clean.insert(
                        stem,
                        CleanFile {
                            class: class.clone(),
                            path,
                        },
                    );
                }
            }
            if config.corrupt {
                let n_mis = rng.random_range(2..=5);
                mislabel(&mut b, n_mis, &mut rng)?;
                let n_off = rng.random_range(2..=5);
                inject_off_modality(&mut b, n_off, &mut rng)?;
                let fractions = (config.format_fraction, config.resolution_fraction, config.intensity_fraction);
                b.ledger.perturbations = inject_format_perturbations(root, &mut b.ledger, fractions, &mut rng)?;
                let n_dup = rng.random_range(2..=5);
                inject_duplicates(&mut b, n_dup, &mut rng)?;
                b.ledger.junk = inject_junk_files(root, &b.ledger, None, &mut rng)?;
                if rng.random_bool(config.flat_fraction) {
                    flatten(&mut b)?;
                }
            }
            let mut card = DataCard {
                client_id: client.clone(),
                dataset_name: name,
                modality: plan.modality,
                task_kind: plan.task_kind,
                label_set: classes,
                sample_counts: counts,
                description: String::new(),
            };
            card.description = describe(&card);
            cards.push(card);
            ledgers.push(b.ledger);
        }
        write_json(
            &root.join("clients").join(client).join("datacard.json"),
            &ClientDatacards {
                client_id: client.clone(),
                datasets: cards,
            },
        )?;
    }

    let vocab = config.modality.vocabulary();
    let canonical_label_map: BTreeMap<String, String> =
        vocab.fine.iter().map(|(f, c)| (f.to_string(), c.to_string())).collect();

    // Held-out split over the fine classes the eligible clients hold.
    let seen: BTreeSet<&str> = ledgers.iter().filter(|l| l.in_scope).flat_map(|l| l.classes.iter().map(String::as_str)).collect();
    let mut index = 0usize;
    for coarse in vocab.coarse {
        let members: Vec<&str> = vocab.fine.iter().filter(|(f, c)| c == coarse && seen.contains(f)).map(|(f, _)| *f).collect();
        let members = if members.is_empty() {
            vocab.fine.iter().filter(|(_, c)| c == coarse).map(|(f, _)| *f).collect()
        } else {
            members
        };
        let dir = root.join("heldout").join(coarse);
        fs::create_dir_all(&dir)?;
        for _ in 0..config.heldout_per_class {
            index += 1;
            let fine = *members.choose(&mut rng).unwrap();
            let img = synth_image(config.modality, config.modality, fine, &mut rng);
            fs::write(dir.join(format!("img_{index:04}.pgm")), img.encode(ImageFormat::Pgm))?;
        }
    }

    let registry = Registry::builtin();
    let manifest = GroundTruthManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: config.clone(),
        suitable_algorithms: registry.suitable_for(&task.fl_preferences),
        task: task.clone(),
        clients,
        eligible_clients: eligible,
        datasets: ledgers,
        canonical_label_map,
        canonical_schema: CanonicalSchema {
            profile: task.canonical_profile,
            classes: task.target_schema.clone(),
            layout: "clients/<client>/<dataset>/<class>/<stem>.pgm".into(),
        },
        heldout_dir: "heldout".into(),
    };
    write_json(&root.join("server").join("task.json"), &task)?;
    fs::write(root.join("server").join("registry.json"), registry.to_json() + "\n")?;
    fs::write(root.join("manifest.json"), manifest.to_json())?;
    Ok((root.to_path_buf(), manifest))
}

/// Recursively lists regular files under `dir` as `/`-joined paths relative
/// to `root`, sorted.
pub fn list_files(root: &Path, dir: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let ty = entry.file_type()?;
            if ty.is_dir() {
                stack.push(entry.path());
            } else if ty.is_file() {
                out.push(rel(entry.path().strip_prefix(root).unwrap()));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generate(config: &EnvironmentConfig) -> (tempfile::TempDir, GroundTruthManifest) {
        let dir = tempfile::tempdir().unwrap();
        let (_, m) = generate_environment(config, dir.path()).unwrap();
        (dir, m)
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = EnvironmentConfig::default();
        c.num_clients = 1;
        assert!(matches!(generate_environment(&c, dir.path()), Err(EnvError::InvalidConfig(_))));
        let mut c = EnvironmentConfig::default();
        c.samples_per_class = (12, 10);
        assert!(matches!(generate_environment(&c, dir.path()), Err(EnvError::InvalidConfig(_))));
        fs::write(dir.path().join("x"), b"1").unwrap();
        assert!(matches!(
            generate_environment(&EnvironmentConfig::default(), dir.path()),
            Err(EnvError::DestinationNotEmpty(_))
        ));
    }

    #[test]
    fn eligible_counts() {
        let mut c = EnvironmentConfig::default();
        c.eligible_fraction = 0.01;
        assert_eq!(c.eligible_count(), 1);
        c.eligible_fraction = 0.99;
        assert_eq!(c.eligible_count(), 3);
        c.eligible_fraction = 1.0;
        assert_eq!(c.eligible_count(), 4);
    }

    #[test]
    fn ledger_matches_disk() {
        for seed in 0..4 {
            let (dir, m) = generate(&EnvironmentConfig::new(seed, Modality::ALL[seed as usize]));
            for d in &m.datasets {
                let on_disk = list_files(dir.path(), &dir.path().join(d.dir())).unwrap();
                let mut ledger: Vec<String> = d.all_paths().iter().map(|s| s.to_string()).collect();
                ledger.sort();
                let n = ledger.len();
                ledger.dedup();
                assert_eq!(n, ledger.len(), "ledger categories overlap");
                assert_eq!(on_disk, ledger, "{}", d.dataset);
                for (len, name) in [
                    (d.duplicates.len(), "dup"),
                    (d.off_modality.len(), "off"),
                    (d.mislabeled.len(), "mis"),
                ] {
                    assert!((2..=5).contains(&len), "{name} {len}");
                }
                assert!((2..=8).contains(&d.junk.len()));
            }
            assert!(!m.eligible_clients.is_empty() && m.eligible_clients.len() < m.clients.len());
            assert!(m.in_scope().count() >= m.eligible_clients.len());
        }
    }

    #[test]
    fn clean_images_match_profile_and_perturbed_do_not() {
        let (dir, m) = generate(&EnvironmentConfig::new(5, Modality::Fundus));
        let profile = m.task.canonical_profile;
        for d in m.datasets.iter().filter(|d| d.modality == m.task.modality) {
            let perturbed: BTreeSet<&str> = d.perturbations.iter().map(|p| p.stem.as_str()).collect();
            for (stem, f) in &d.clean {
                let (img, fmt) = GrayImage::decode(&fs::read(dir.path().join(&f.path)).unwrap()).unwrap();
                assert_eq!(profile.matches(&img, fmt), !perturbed.contains(stem.as_str()), "{}", f.path);
            }
        }
    }

    #[test]
    fn zero_fractions_leave_files_untouched() {
        let mut c = EnvironmentConfig::new(3, Modality::Mri);
        c.format_fraction = 0.0;
        c.resolution_fraction = 0.0;
        c.intensity_fraction = 0.0;
        let (_, m) = generate(&c);
        assert!(m.datasets.iter().all(|d| d.perturbations.is_empty()));
    }

    #[test]
    fn perturbed_files_round_trip_with_their_container() {
        let (dir, m) = generate(&EnvironmentConfig::new(9, Modality::Xray));
        let mut seen = BTreeSet::new();
        for p in m.datasets.iter().flat_map(|d| &d.perturbations) {
            let bytes = fs::read(dir.path().join(&p.path)).unwrap();
            let (img, fmt) = GrayImage::decode(&bytes).unwrap();
            assert_eq!(fmt, p.current_format);
            assert_eq!((img.width, img.height), p.current_resolution);
            assert_eq!(img.encode(fmt), bytes);
            assert!(p.path.ends_with(fmt.extension()));
            seen.insert(fmt);
        }
        assert!(seen.len() >= 2);
    }

    #[test]
    fn removing_junk_leaves_only_images() {
        let (dir, m) = generate(&EnvironmentConfig::new(2, Modality::Dermatoscopy));
        for d in &m.datasets {
            for j in &d.junk {
                let ext = j.rsplit_once('.').unwrap().1;
                assert!(JUNK_EXTENSIONS.contains(&ext));
                fs::remove_file(dir.path().join(j)).unwrap();
            }
            for f in list_files(dir.path(), &dir.path().join(d.dir())).unwrap() {
                assert!(crate::image::is_image_name(&f), "{f}");
            }
        }
    }

    #[test]
    fn clean_config_has_empty_ledgers() {
        let mut c = EnvironmentConfig::new(1, Modality::Ultrasound);
        c.corrupt = false;
        let (_, m) = generate(&c);
        for d in &m.datasets {
            assert!(d.duplicates.is_empty() && d.junk.is_empty() && d.perturbations.is_empty());
            assert_eq!(d.layout, Layout::Nested);
        }
    }
}
