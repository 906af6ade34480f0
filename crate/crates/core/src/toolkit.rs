//! The sixteen agent tools, their argument schemas and the change-log.
//!
//! Every tool runs against the caller's [`WorkspaceView`]; failures come back
//! as `ok = false` results and never panic past [`execute`].

use crate::envgen::FLAT_SEPARATOR;
use crate::fedcore::Registry;
use crate::image::{is_image_name, CanonicalProfile, GrayImage, ImageFormat, IMAGE_MAGICS};
use crate::protocol::{client_root, Access, AccessMode, Role, RoleKind, TaskSpec, WorkspaceView};
use crate::trace::TraceSink;
use crate::vocab::OFF_MODALITY_THRESHOLD;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

const MANIFEST: &str = include_str!("../assets/tools.json");
pub const PAGE_SIZE: usize = 500;
pub const DEFAULT_READ_BYTES: usize = 4096;
pub const MAX_READ_BYTES: usize = 65536;
/// Grid of block means used by the label-centroid detector.
pub const FEATURE_GRID: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgKind {
    Str,
    Path,
    Int,
    Num,
    Bool,
    StrList,
    StrMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub kind: ArgKind,
    pub required: bool,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub roles: Vec<RoleKind>,
    pub args: Vec<ArgSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ToolManifest {
    schema_version: u32,
    tools: Vec<ToolSpec>,
}

/// The tool manifest shipped with the crate.
pub fn tool_specs() -> &'static [ToolSpec] {
    static SPECS: std::sync::OnceLock<Vec<ToolSpec>> = std::sync::OnceLock::new();
    SPECS.get_or_init(|| {
        serde_json::from_str::<ToolManifest>(MANIFEST)
            .expect("bundled tool manifest is valid")
            .tools
    })
}

pub fn tool_manifest_json() -> &'static str {
    MANIFEST
}

pub fn tool_spec(name: &str) -> Option<&'static ToolSpec> {
    tool_specs().iter().find(|t| t.name == name)
}

pub fn tools_for(kind: RoleKind) -> Vec<&'static ToolSpec> {
    tool_specs().iter().filter(|t| t.roles.contains(&kind)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default)]
    pub args: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolErrorKind {
    Schema,
    NotAssigned,
    AccessDenied,
    NotFound,
    Conflict,
    Invalid,
    Io,
}

impl ToolErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Schema => "schema",
            Self::NotAssigned => "not_assigned",
            Self::AccessDenied => "access_denied",
            Self::NotFound => "not_found",
            Self::Conflict => "conflict",
            Self::Invalid => "invalid",
            Self::Io => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub ok: bool,
    pub summary: String,
    pub data: Value,
    pub error_kind: Option<ToolErrorKind>,
}

impl ToolResult {
    pub fn success(summary: impl Into<String>, data: Value) -> Self {
        Self {
            ok: true,
            summary: summary.into(),
            data,
            error_kind: None,
        }
    }

    pub fn error(kind: ToolErrorKind, summary: impl Into<String>) -> Self {
        Self {
            ok: false,
            summary: summary.into(),
            data: Value::Null,
            error_kind: Some(kind),
        }
    }
}

type ToolOutcome = Result<ToolResult, ToolResult>;

fn err(kind: ToolErrorKind, msg: impl Into<String>) -> ToolResult {
    ToolResult::error(kind, msg)
}

/// One filesystem effect, in workspace-relative `/` paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Change {
    MakeDir { path: String },
    Remove { path: String },
    RemoveDir { path: String },
    Move { from: String, to: String },
    Rewrite { from: String, to: String, profile: CanonicalProfile, sha256: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub seq: usize,
    pub role: Role,
    #[serde(flatten)]
    pub change: Change,
}

/// Shared append-only change-log.
#[derive(Debug, Clone, Default)]
pub struct ChangeLog {
    records: Arc<Mutex<Vec<ChangeRecord>>>,
}

impl ChangeLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, role: &Role, change: Change) {
        let mut r = self.records.lock().unwrap();
        let seq = r.len() + 1;
        r.push(ChangeRecord {
            seq,
            role: role.clone(),
            change,
        });
    }

    pub fn records(&self) -> Vec<ChangeRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Re-encodes `image` for `profile`.
pub fn normalized_bytes(image: &GrayImage, profile: &CanonicalProfile) -> Vec<u8> {
    profile.apply(image).encode(profile.format)
}

/// Applies `records` in order to the workspace at `root`.
pub fn replay_changelog(root: &Path, records: &[ChangeRecord]) -> Result<(), String> {
    for r in records {
        let p = |s: &str| root.join(s);
        let res: Result<(), String> = (|| {
            match &r.change {
                Change::MakeDir { path } => fs::create_dir_all(p(path)).map_err(|e| e.to_string()),
                Change::Remove { path } => fs::remove_file(p(path)).map_err(|e| e.to_string()),
                Change::RemoveDir { path } => fs::remove_dir(p(path)).map_err(|e| e.to_string()),
                Change::Move { from, to } => fs::rename(p(from), p(to)).map_err(|e| e.to_string()),
                Change::Rewrite {
                    from,
                    to,
                    profile,
                    sha256,
                } => {
                    let bytes = fs::read(p(from)).map_err(|e| e.to_string())?;
                    let (img, _) = GrayImage::decode(&bytes).map_err(|e| e.to_string())?;
                    let out = normalized_bytes(&img, profile);
                    if &sha256_hex(&out) != sha256 {
                        return Err(format!("rewrite of {from} does not reproduce {sha256}"));
                    }
                    fs::write(p(to), out).map_err(|e| e.to_string())?;
                    if from != to {
                        fs::remove_file(p(from)).map_err(|e| e.to_string())?;
                    }
                    Ok(())
                }
            }
        })();
        res.map_err(|e| format!("change {}: {e}", r.seq))?;
    }
    Ok(())
}

/// Everything a tool needs besides its arguments.
pub struct ToolContext<'a> {
    pub root: &'a Path,
    pub role: Role,
    pub view: WorkspaceView,
    pub trace: TraceSink,
    pub changes: ChangeLog,
    pub registry: &'a Registry,
    pub task: &'a TaskSpec,
    /// Allocates training run ids.
    pub run_counter: Arc<Mutex<usize>>,
}

impl<'a> ToolContext<'a> {
    pub fn new(root: &'a Path, role: Role, trace: TraceSink, changes: ChangeLog, registry: &'a Registry, task: &'a TaskSpec) -> Self {
        Self {
            root,
            view: WorkspaceView::for_role(&role),
            role,
            trace,
            changes,
            registry,
            task,
            run_counter: Arc::new(Mutex::new(0)),
        }
    }

    fn check(&self, path: &str, mode: AccessMode) -> Result<PathBuf, ToolResult> {
        match self.view.check_access(self.root, path, mode, &self.trace) {
            Access::Allow(rel) => Ok(rel),
            Access::Deny(why) => Err(err(ToolErrorKind::AccessDenied, why)),
        }
    }

    fn abs(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&self, change: Change) {
        self.changes.push(&self.role, change);
    }

    /// Resolves a dataset name against the caller's client folder.
    fn dataset(&self, name: &str, mode: AccessMode) -> Result<PathBuf, ToolResult> {
        let path = if name.contains('/') {
            name.to_string()
        } else {
            match &self.role.client {
                Some(c) => format!("{}/{}", client_root(c).display(), name),
                None => name.to_string(),
            }
        };
        let rel = self.check(&path, mode)?;
        if !self.abs(&rel).is_dir() {
            return Err(err(ToolErrorKind::NotFound, format!("dataset {} not found", slash(&rel))));
        }
        Ok(rel)
    }
}

pub fn slash(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Checks `args` against the declared schema.
pub fn validate_args(spec: &ToolSpec, args: &Value) -> Result<Map<String, Value>, String> {
    let obj = match args {
        Value::Null => Map::new(),
        Value::Object(m) => m.clone(),
        _ => return Err("arguments must be an object".into()),
    };
    for key in obj.keys() {
        if !spec.args.iter().any(|a| &a.name == key) {
            return Err(format!("unknown argument `{key}`"));
        }
    }
    for a in &spec.args {
        match obj.get(&a.name) {
            None | Some(Value::Null) => {
                if a.required {
                    return Err(format!("missing argument `{}`", a.name));
                }
            }
            Some(v) => {
                let ok = match a.kind {
                    ArgKind::Str | ArgKind::Path => v.is_string(),
                    ArgKind::Int => v.as_i64().is_some() || v.as_u64().is_some(),
                    ArgKind::Num => v.is_number(),
                    ArgKind::Bool => v.is_boolean(),
                    ArgKind::StrList => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
                    ArgKind::StrMap => v.as_object().is_some_and(|m| m.values().all(Value::is_string)),
                };
                if !ok {
                    return Err(format!("argument `{}` must be {:?}", a.name, a.kind));
                }
            }
        }
    }
    Ok(obj)
}

/// Runs one tool call for the context's role.
pub fn execute(ctx: &ToolContext<'_>, call: &ToolCall) -> ToolResult {
    let Some(spec) = tool_spec(&call.tool) else {
        return err(ToolErrorKind::Schema, format!("unknown tool `{}`", call.tool));
    };
    if !spec.roles.contains(&ctx.role.kind) {
        return err(ToolErrorKind::NotAssigned, format!("{} is not assigned to {}", spec.name, ctx.role.kind.as_str()));
    }
    let args = match validate_args(spec, &call.args) {
        Ok(a) => a,
        Err(e) => return err(ToolErrorKind::Schema, e),
    };
    let s = |k: &str| args.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
    let out = match spec.name.as_str() {
        "list_dir" => list_dir(ctx, &s("path"), args.get("page").and_then(Value::as_i64).unwrap_or(1)),
        "read_datacard" => read_datacard(ctx, &s("client")),
        "read_text_file" => read_text_file(ctx, &s("path"), args.get("max_bytes").and_then(Value::as_i64)),
        "stat_dataset" => stat_dataset(ctx, &s("dataset")),
        "hash_files" => hash_files(ctx, &s("dataset")),
        "detect_duplicates" => detect_duplicates(ctx, &s("dataset")),
        "detect_outliers" => detect_outliers(ctx, &s("dataset")),
        "remove_files" => remove_files(ctx, &str_list(&args, "paths")),
        "move_file" => move_file(ctx, &s("src"), &s("dst")),
        "make_dir" => make_dir(ctx, &s("path")),
        "restructure_by_class" => restructure_by_class(ctx, &s("dataset"), &str_map(&args, "plan")),
        "normalize_images" => normalize_tool(ctx, &args),
        "enumerate_labels" => enumerate_labels(ctx, &s("dataset")),
        "apply_label_mapping" => apply_label_mapping(ctx, &s("dataset"), &str_map(&args, "mapping")),
        "query_algorithm_registry" => query_registry(ctx, &s("text"), &str_list(&args, "tags")),
        "launch_training" => launch_training(ctx, &args),
        other => Err(err(ToolErrorKind::Schema, format!("tool `{other}` has no implementation"))),
    };
    out.unwrap_or_else(|e| e)
}

fn str_list(args: &Map<String, Value>, key: &str) -> Vec<String> {
    args.get(key)
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

fn str_map(args: &Map<String, Value>, key: &str) -> BTreeMap<String, String> {
    args.get(key)
        .and_then(Value::as_object)
        .map(|m| m.iter().filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string()))).collect())
        .unwrap_or_default()
}

fn io_err(e: std::io::Error) -> ToolResult {
    let kind = if e.kind() == std::io::ErrorKind::NotFound {
        ToolErrorKind::NotFound
    } else {
        ToolErrorKind::Io
    };
    err(kind, e.to_string())
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, bool, u64)>, ToolResult> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(io_err)? {
        let e = e.map_err(io_err)?;
        let md = e.metadata().map_err(io_err)?;
        out.push((e.file_name().to_string_lossy().into_owned(), md.is_dir(), md.len()));
    }
    out.sort();
    Ok(out)
}

/// Regular files under `dir`, relative to the workspace, sorted.
fn walk_files(ctx: &ToolContext<'_>, dir: &Path) -> Result<Vec<String>, ToolResult> {
    crate::envgen::list_files(ctx.root, &ctx.abs(dir)).map_err(io_err)
}

fn list_dir(ctx: &ToolContext<'_>, path: &str, page: i64) -> ToolOutcome {
    let rel = ctx.check(path, AccessMode::Read)?;
    let abs = ctx.abs(&rel);
    if !abs.is_dir() {
        return Err(err(ToolErrorKind::NotFound, format!("{} is not a directory", slash(&rel))));
    }
    let entries = sorted_entries(&abs)?;
    let pages = entries.len().div_ceil(PAGE_SIZE).max(1);
    if page < 1 || page as usize > pages {
        return Err(err(ToolErrorKind::Invalid, format!("page must lie in 1..={pages}")));
    }
    let start = (page as usize - 1) * PAGE_SIZE;
    let items: Vec<Value> = entries
        .iter()
        .skip(start)
        .take(PAGE_SIZE)
        .map(|(n, d, s)| json!({"name": n, "kind": if *d { "dir" } else { "file" }, "size": s}))
        .collect();
    Ok(ToolResult::success(
        format!("{}: {} entries (page {page}/{pages})", slash(&rel), entries.len()),
        json!({"path": slash(&rel), "entries": items, "page": page, "pages": pages, "total": entries.len()}),
    ))
}

fn read_datacard(ctx: &ToolContext<'_>, client: &str) -> ToolOutcome {
    let rel = ctx.check(&format!("clients/{client}/datacard.json"), AccessMode::Read)?;
    let text = fs::read_to_string(ctx.abs(&rel)).map_err(io_err)?;
    let data: Value = serde_json::from_str(&text).map_err(|e| err(ToolErrorKind::Invalid, e.to_string()))?;
    let n = data["datasets"].as_array().map(Vec::len).unwrap_or(0);
    Ok(ToolResult::success(format!("datacard of {client}: {n} datasets"), data))
}

fn read_text_file(ctx: &ToolContext<'_>, path: &str, max_bytes: Option<i64>) -> ToolOutcome {
    let rel = ctx.check(path, AccessMode::Read)?;
    let limit = max_bytes.unwrap_or(DEFAULT_READ_BYTES as i64);
    if limit < 1 || limit as usize > MAX_READ_BYTES {
        return Err(err(ToolErrorKind::Invalid, format!("max_bytes must lie in 1..={MAX_READ_BYTES}")));
    }
    let bytes = fs::read(ctx.abs(&rel)).map_err(io_err)?;
    if ImageFormat::sniff(&bytes).is_some() || IMAGE_MAGICS.iter().any(|m| bytes.windows(m.len()).any(|w| w == *m)) {
        return Err(err(ToolErrorKind::Invalid, "file holds image data; use stat_dataset"));
    }
    let cut = &bytes[..bytes.len().min(limit as usize)];
    let text: String = String::from_utf8_lossy(cut)
        .chars()
        .filter(|c| !c.is_control() || matches!(c, '\n' | '\t' | '\r'))
        .collect();
    Ok(ToolResult::success(
        format!("{} ({} of {} bytes)", slash(&rel), cut.len(), bytes.len()),
        json!({"path": slash(&rel), "text": text, "truncated": cut.len() < bytes.len()}),
    ))
}

/// Class of a dataset file: its folder, or the flat prefix at the root.
pub fn class_of(dataset_rel: &str, file_rel: &str) -> Option<String> {
    let tail = file_rel.strip_prefix(dataset_rel)?.strip_prefix('/')?;
    match tail.split_once('/') {
        Some((class, rest)) if !rest.contains('/') => Some(class.to_string()),
        Some(_) => None,
        None => tail.split_once(FLAT_SEPARATOR).map(|(c, _)| c.to_string()),
    }
}

fn stat_dataset(ctx: &ToolContext<'_>, dataset: &str) -> ToolOutcome {
    let rel = ctx.dataset(dataset, AccessMode::Read)?;
    let ds = slash(&rel);
    let files = walk_files(ctx, &rel)?;
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    let mut flat: BTreeMap<String, usize> = BTreeMap::new();
    let mut exts: BTreeMap<String, usize> = BTreeMap::new();
    let mut res: BTreeMap<String, usize> = BTreeMap::new();
    let mut non_image = Vec::new();
    let mut unreadable = Vec::new();
    let mut images = 0;
    for f in &files {
        let name = f.rsplit('/').next().unwrap();
        let ext = name.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
        *exts.entry(ext).or_default() += 1;
        if !is_image_name(name) {
            non_image.push(f.clone());
            continue;
        }
        images += 1;
        let nested = f[ds.len() + 1..].contains('/');
        if let Some(c) = class_of(&ds, f) {
            *(if nested { &mut per_class } else { &mut flat }).entry(c).or_default() += 1;
        }
        match fs::read(ctx.root.join(f)).ok().and_then(|b| GrayImage::decode(&b).ok()) {
            Some((img, _)) => *res.entry(format!("{}x{}", img.width, img.height)).or_default() += 1,
            None => unreadable.push(f.clone()),
        }
    }
    let layout = if flat.is_empty() { "nested" } else if per_class.is_empty() { "flat" } else { "mixed" };
    Ok(ToolResult::success(
        format!(
            "{ds}: {images} images in {} class folders, {} flat-named, {} non-image files",
            per_class.len(),
            flat.values().sum::<usize>(),
            non_image.len()
        ),
        json!({
            "dataset": ds, "layout": layout, "images": images,
            "class_folders": per_class, "flat_prefixes": flat,
            "extensions": exts, "resolutions": res,
            "non_image_files": non_image, "unreadable": unreadable,
        }),
    ))
}

fn hashes(ctx: &ToolContext<'_>, rel: &Path) -> Result<BTreeMap<String, String>, ToolResult> {
    let mut out = BTreeMap::new();
    for f in walk_files(ctx, rel)? {
        let bytes = fs::read(ctx.root.join(&f)).map_err(io_err)?;
        out.insert(f, sha256_hex(&bytes));
    }
    Ok(out)
}

fn hash_files(ctx: &ToolContext<'_>, dataset: &str) -> ToolOutcome {
    let rel = ctx.dataset(dataset, AccessMode::Read)?;
    let h = hashes(ctx, &rel)?;
    Ok(ToolResult::success(format!("{}: hashed {} files", slash(&rel), h.len()), json!({"hashes": h})))
}

/// Identical-content groups; each sorted so the first path is kept.
pub fn duplicate_groups(hashes: &BTreeMap<String, String>) -> Vec<Vec<String>> {
    let mut by_hash: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (p, h) in hashes {
        by_hash.entry(h).or_default().push(p.clone());
    }
    let mut groups: Vec<Vec<String>> = by_hash
        .into_values()
        .filter(|g| g.len() > 1)
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    groups.sort();
    groups
}

fn detect_duplicates(ctx: &ToolContext<'_>, dataset: &str) -> ToolOutcome {
    let rel = ctx.dataset(dataset, AccessMode::Read)?;
    let groups = duplicate_groups(&hashes(ctx, &rel)?);
    let remove: Vec<&String> = groups.iter().flat_map(|g| g.iter().skip(1)).collect();
    let data: Vec<Value> = groups.iter().map(|g| json!({"keep": g[0], "remove": &g[1..]})).collect();
    Ok(ToolResult::success(
        format!("{}: {} duplicate groups, {} redundant files", slash(&rel), groups.len(), remove.len()),
        json!({"groups": data, "remove": remove}),
    ))
}

/// Per-image z-scored block means on an 8×8 grid.
pub fn block_features(img: &GrayImage) -> Vec<f64> {
    let g = FEATURE_GRID;
    let resized;
    let img = if img.width % g == 0 && img.height % g == 0 {
        img
    } else {
        resized = img.resize(4 * g, 4 * g);
        &resized
    };
    let (cw, ch) = (img.width / g, img.height / g);
    let mut f = vec![0.0; (g * g) as usize];
    for y in 0..img.height {
        for x in 0..img.width {
            f[((y / ch) * g + x / cw) as usize] += img.get(x, y) as f64;
        }
    }
    let m = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - m).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    f.iter().map(|v| if sd > 0.0 { (v - m) / sd } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierReport {
    pub median_mean: f64,
    pub off_modality: Vec<String>,
    pub suspect_labels: Vec<String>,
}

/// Off-modality test on per-image means, then a two-pass nearest-centroid
/// test on the remaining images grouped by class.
pub fn find_outliers(images: &[(String, Option<String>, GrayImage)]) -> OutlierReport {
    let means: Vec<f64> = images.iter().map(|(_, _, i)| i.stats().0).collect();
    let mut sorted = means.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    let off: BTreeSet<usize> = (0..images.len())
        .filter(|&i| (means[i] - median).abs() > OFF_MODALITY_THRESHOLD)
        .collect();
    let feats: Vec<Vec<f64>> = images.iter().map(|(_, _, i)| block_features(i)).collect();
    let candidates: Vec<usize> = (0..images.len()).filter(|i| !off.contains(i) && images[*i].1.is_some()).collect();
    let mut flagged: BTreeSet<usize> = BTreeSet::new();
    for _pass in 0..2 {
        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for &i in candidates.iter().filter(|i| !flagged.contains(i)) {
            let e = sums
                .entry(images[i].1.as_deref().unwrap())
                .or_insert_with(|| (vec![0.0; feats[i].len()], 0));
            for (a, b) in e.0.iter_mut().zip(&feats[i]) {
                *a += b;
            }
            e.1 += 1;
        }
        if sums.len() < 2 {
            break;
        }
        let centroids: Vec<(&str, Vec<f64>)> =
            sums.into_iter().map(|(c, (s, n))| (c, s.iter().map(|v| v / n as f64).collect())).collect();
        let mut next = BTreeSet::new();
        for &i in &candidates {
            let own = images[i].1.as_deref().unwrap();
            let dist = |c: &[f64]| feats[i].iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let own_d = centroids.iter().find(|(c, _)| *c == own).map(|(_, v)| dist(v));
            let best_other = centroids
                .iter()
                .filter(|(c, _)| *c != own)
                .map(|(_, v)| dist(v))
                .fold(f64::INFINITY, f64::min);
            if own_d.is_none_or(|d| best_other < d) {
                next.insert(i);
            }
        }
        flagged = next;
    }
    OutlierReport {
        median_mean: median,
        off_modality: off.iter().map(|&i| images[i].0.clone()).collect(),
        suspect_labels: flagged.iter().map(|&i| images[i].0.clone()).collect(),
    }
}

fn detect_outliers(ctx: &ToolContext<'_>, dataset: &str) -> ToolOutcome {
    let rel = ctx.dataset(dataset, AccessMode::Read)?;
    let ds = slash(&rel);
    let mut images = Vec::new();
    for f in walk_files(ctx, &rel)? {
        if !is_image_name(&f) {
            continue;
        }
        if let Some((img, _)) = fs::read(ctx.root.join(&f)).ok().and_then(|b| GrayImage::decode(&b).ok()) {
            let class = class_of(&ds, &f);
            images.push((f, class, img));
        }
    }
    let r = find_outliers(&images);
    Ok(ToolResult::success(
        format!(
            "{ds}: {} off-modality, {} suspect labels among {} images",
            r.off_modality.len(),
            r.suspect_labels.len(),
            images.len()
        ),
        json!({
            "off_modality": r.off_modality, "suspect_labels": r.suspect_labels,
            "median_mean": r.median_mean, "threshold": OFF_MODALITY_THRESHOLD,
        }),
    ))
}

fn remove_files(ctx: &ToolContext<'_>, paths: &[String]) -> ToolOutcome {
    if paths.is_empty() {
        return Ok(ToolResult::success("nothing to remove", json!({"removed": []})));
    }
    let mut checked = Vec::new();
    let mut seen = BTreeSet::new();
    for p in paths {
        let rel = ctx.check(p, AccessMode::Write)?;
        let abs = ctx.abs(&rel);
        let md = fs::symlink_metadata(&abs).map_err(|_| err(ToolErrorKind::NotFound, format!("{p} does not exist")))?;
        if md.is_dir() && fs::read_dir(&abs).map_err(io_err)?.next().is_some() {
            return Err(err(ToolErrorKind::Conflict, format!("{p} is a non-empty directory")));
        }
        if seen.insert(rel.clone()) {
            checked.push((rel, md.is_dir()));
        }
    }
    let mut removed = Vec::new();
    for (rel, is_dir) in checked {
        let s = slash(&rel);
        if is_dir {
            fs::remove_dir(ctx.abs(&rel)).map_err(io_err)?;
            ctx.record(Change::RemoveDir { path: s.clone() });
        } else {
            fs::remove_file(ctx.abs(&rel)).map_err(io_err)?;
            ctx.record(Change::Remove { path: s.clone() });
        }
        removed.push(s);
    }
    Ok(ToolResult::success(format!("removed {} paths", removed.len()), json!({"removed": removed})))
}

fn make_dirs(ctx: &ToolContext<'_>, rel: &Path) -> Result<(), ToolResult> {
    let mut missing = Vec::new();
    let mut cur = rel.to_path_buf();
    while !ctx.abs(&cur).exists() {
        missing.push(cur.clone());
        if !cur.pop() || cur.as_os_str().is_empty() {
            break;
        }
    }
    for d in missing.into_iter().rev() {
        fs::create_dir(ctx.abs(&d)).map_err(io_err)?;
        ctx.record(Change::MakeDir { path: slash(&d) });
    }
    Ok(())
}

fn move_checked(ctx: &ToolContext<'_>, src: &Path, dst: &Path) -> Result<(), ToolResult> {
    if ctx.abs(dst).exists() {
        return Err(err(ToolErrorKind::Conflict, format!("{} already exists", slash(dst))));
    }
    if let Some(parent) = dst.parent() {
        make_dirs(ctx, parent)?;
    }
    fs::rename(ctx.abs(src), ctx.abs(dst)).map_err(io_err)?;
    ctx.record(Change::Move {
        from: slash(src),
        to: slash(dst),
    });
    Ok(())
}

fn move_file(ctx: &ToolContext<'_>, src: &str, dst: &str) -> ToolOutcome {
    let s = ctx.check(src, AccessMode::Write)?;
    let d = ctx.check(dst, AccessMode::Write)?;
    if !ctx.abs(&s).is_file() {
        return Err(err(ToolErrorKind::NotFound, format!("{src} is not a file")));
    }
    move_checked(ctx, &s, &d)?;
    Ok(ToolResult::success(format!("moved {} to {}", slash(&s), slash(&d)), json!({"from": slash(&s), "to": slash(&d)})))
}

fn make_dir(ctx: &ToolContext<'_>, path: &str) -> ToolOutcome {
    let rel = ctx.check(path, AccessMode::Write)?;
    if ctx.abs(&rel).is_file() {
        return Err(err(ToolErrorKind::Conflict, format!("{path} is a file")));
    }
    make_dirs(ctx, &rel)?;
    Ok(ToolResult::success(format!("directory {} ready", slash(&rel)), json!({"path": slash(&rel)})))
}

fn valid_folder(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\\', '\0'])
}

fn restructure_by_class(ctx: &ToolContext<'_>, dataset: &str, plan: &BTreeMap<String, String>) -> ToolOutcome {
    let rel = ctx.dataset(dataset, AccessMode::Write)?;
    if let Some((k, v)) = plan.iter().find(|(k, v)| !valid_folder(k) || !valid_folder(v)) {
        return Err(err(ToolErrorKind::Invalid, format!("invalid plan entry {k} -> {v}")));
    }
    let mut moved = 0;
    for (name, is_dir, _) in sorted_entries(&ctx.abs(&rel))? {
        if is_dir {
            if let Some(target) = plan.get(&name).filter(|t| **t != name) {
                for (inner, inner_dir, _) in sorted_entries(&ctx.abs(&rel.join(&name)))? {
                    if !inner_dir {
                        move_checked(ctx, &rel.join(&name).join(&inner), &rel.join(target).join(&inner))?;
                        moved += 1;
                    }
                }
                remove_if_empty(ctx, &rel.join(&name))?;
            }
        } else if let Some((class, rest)) = name.split_once(FLAT_SEPARATOR) {
            if let Some(target) = plan.get(class) {
                if valid_folder(rest) {
                    move_checked(ctx, &rel.join(&name), &rel.join(target).join(rest))?;
                    moved += 1;
                }
            }
        }
    }
    Ok(ToolResult::success(format!("{}: moved {moved} files into class folders", slash(&rel)), json!({"moved": moved})))
}

fn remove_if_empty(ctx: &ToolContext<'_>, rel: &Path) -> Result<bool, ToolResult> {
    let abs = ctx.abs(rel);
    if abs.is_dir() && fs::read_dir(&abs).map_err(io_err)?.next().is_none() {
        fs::remove_dir(&abs).map_err(io_err)?;
        ctx.record(Change::RemoveDir { path: slash(rel) });
        return Ok(true);
    }
    Ok(false)
}

fn normalize_tool(ctx: &ToolContext<'_>, args: &Map<String, Value>) -> ToolOutcome {
    let format = args["format"]
        .as_str()
        .and_then(ImageFormat::from_extension)
        .ok_or_else(|| err(ToolErrorKind::Invalid, "unknown image format"))?;
    let dim = |k: &str| args[k].as_i64().filter(|v| (1..=1024).contains(v)).map(|v| v as u32);
    let (Some(width), Some(height)) = (dim("width"), dim("height")) else {
        return Err(err(ToolErrorKind::Invalid, "width and height must lie in 1..=1024"));
    };
    let mean = args["mean"].as_f64().unwrap_or(f64::NAN);
    let std = args["std"].as_f64().unwrap_or(f64::NAN);
    if !(0.0..=255.0).contains(&mean) || !(0.0..=128.0).contains(&std) {
        return Err(err(ToolErrorKind::Invalid, "mean must lie in [0,255] and std in [0,128]"));
    }
    let profile = CanonicalProfile {
        format,
        width,
        height,
        mean,
        std,
    };
    normalize_images(ctx, &args["dataset"].as_str().unwrap_or_default().to_string(), &profile)
}

fn normalize_images(ctx: &ToolContext<'_>, dataset: &str, profile: &CanonicalProfile) -> ToolOutcome {
    let rel = ctx.dataset(dataset, AccessMode::Write)?;
    let mut rewritten = Vec::new();
    let mut failed = Vec::new();
    let mut unchanged = 0;
    for f in walk_files(ctx, &rel)? {
        if !is_image_name(&f) {
            continue;
        }
        let bytes = fs::read(ctx.root.join(&f)).map_err(io_err)?;
        let Ok((img, fmt)) = GrayImage::decode(&bytes) else {
            failed.push(f);
            continue;
        };
        let target = format!("{}.{}", f.rsplit_once('.').unwrap().0, profile.format.extension());
        if profile.matches(&img, fmt) && target == f {
            unchanged += 1;
            continue;
        }
        if target != f && ctx.root.join(&target).exists() {
            failed.push(f);
            continue;
        }
        let out = normalized_bytes(&img, profile);
        fs::write(ctx.root.join(&target), &out).map_err(io_err)?;
        if target != f {
            fs::remove_file(ctx.root.join(&f)).map_err(io_err)?;
        }
        ctx.record(Change::Rewrite {
            from: f.clone(),
            to: target.clone(),
            profile: *profile,
            sha256: sha256_hex(&out),
        });
        rewritten.push(json!({"from": f, "to": target}));
    }
    let summary = format!(
        "{}: rewrote {} images, {} already matched, {} failed",
        slash(&rel),
        rewritten.len(),
        unchanged,
        failed.len()
    );
    let data = json!({"rewritten": rewritten, "unchanged": unchanged, "failed": failed});
    if failed.is_empty() {
        Ok(ToolResult::success(summary, data))
    } else {
        Err(ToolResult {
            ok: false,
            summary,
            data,
            error_kind: Some(ToolErrorKind::Invalid),
        })
    }
}

fn label_counts(ctx: &ToolContext<'_>, rel: &Path) -> Result<BTreeMap<String, usize>, ToolResult> {
    let ds = slash(rel);
    let mut counts = BTreeMap::new();
    for (name, is_dir, _) in sorted_entries(&ctx.abs(rel))? {
        if is_dir {
            counts.insert(name, 0);
        }
    }
    for f in walk_files(ctx, rel)? {
        if is_image_name(&f) {
            if let Some(c) = class_of(&ds, &f) {
                *counts.entry(c).or_default() += 1;
            }
        }
    }
    Ok(counts)
}

fn enumerate_labels(ctx: &ToolContext<'_>, dataset: &str) -> ToolOutcome {
    let rel = ctx.dataset(dataset, AccessMode::Read)?;
    let counts = label_counts(ctx, &rel)?;
    let labels: Vec<&String> = counts.keys().collect();
    Ok(ToolResult::success(
        format!("{}: {} labels", slash(&rel), labels.len()),
        json!({"labels": labels, "counts": counts}),
    ))
}

fn apply_label_mapping(ctx: &ToolContext<'_>, dataset: &str, mapping: &BTreeMap<String, String>) -> ToolOutcome {
    let rel = ctx.dataset(dataset, AccessMode::Write)?;
    if let Some((k, v)) = mapping.iter().find(|(k, v)| !valid_folder(k) || !valid_folder(v)) {
        return Err(err(ToolErrorKind::Invalid, format!("invalid mapping entry {k} -> {v}")));
    }
    let mut moved = 0;
    let mut missing = Vec::new();
    for (fine, coarse) in mapping {
        if fine == coarse {
            continue;
        }
        let src = rel.join(fine);
        if !ctx.abs(&src).is_dir() {
            missing.push(fine.clone());
            continue;
        }
        for (name, is_dir, _) in sorted_entries(&ctx.abs(&src))? {
            if !is_dir {
                move_checked(ctx, &src.join(&name), &rel.join(coarse).join(&name))?;
                moved += 1;
            }
        }
        remove_if_empty(ctx, &src)?;
    }
    Ok(ToolResult::success(
        format!("{}: moved {moved} files; {} classes not found", slash(&rel), missing.len()),
        json!({"moved": moved, "missing": missing, "labels": label_counts(ctx, &rel)?}),
    ))
}

fn query_registry(ctx: &ToolContext<'_>, text: &str, tags: &[String]) -> ToolOutcome {
    let hits = ctx.registry.query(text, tags);
    Ok(ToolResult::success(
        format!("{} registry entries", hits.len()),
        json!({"algorithms": hits}),
    ))
}

fn launch_training(ctx: &ToolContext<'_>, args: &Map<String, Value>) -> ToolOutcome {
    let run_id = {
        let mut n = ctx.run_counter.lock().unwrap();
        *n += 1;
        format!("train_{:04}", *n)
    };
    let receipt = crate::trainer::launch(ctx.root, args, ctx.task, ctx.registry, &ctx.trace, &run_id);
    let summary = format!(
        "config_valid={} initialized={} start_signal_logged={}{}",
        receipt.config_valid,
        receipt.initialized,
        receipt.start_signal_logged,
        if receipt.errors.is_empty() { String::new() } else { format!(" ({})", receipt.errors.join("; ")) }
    );
    let data = serde_json::to_value(&receipt).unwrap();
    if receipt.config_valid {
        Ok(ToolResult::success(summary, data))
    } else {
        Err(ToolResult {
            ok: false,
            summary,
            data,
            error_kind: Some(ToolErrorKind::Invalid),
        })
    }
}
