use fedbench::envgen::{generate_environment, list_files, EnvironmentConfig, GroundTruthManifest, Layout};
use fedbench::fedcore::Registry;
use fedbench::protocol::{Role, RoleKind};
use fedbench::toolkit::{
    execute, replay_changelog, tool_specs, ChangeLog, ToolCall, ToolContext, ToolErrorKind, ToolResult,
};
use fedbench::trace::TraceSink;
use fedbench::vocab::Modality;
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

fn env(seed: u64, modality: Modality, corrupt: bool) -> (tempfile::TempDir, GroundTruthManifest) {
    let dir = tempfile::tempdir().unwrap();
    let mut c = EnvironmentConfig::new(seed, modality);
    c.corrupt = corrupt;
    let (_, m) = generate_environment(&c, dir.path()).unwrap();
    (dir, m)
}

fn call(root: &Path, m: &GroundTruthManifest, role: Role, changes: &ChangeLog, tool: &str, args: Value) -> ToolResult {
    let reg = Registry::builtin();
    let ctx = ToolContext::new(root, role, TraceSink::memory(), changes.clone(), &reg, &m.task);
    execute(&ctx, &ToolCall { tool: tool.into(), args })
}

fn c2(client: &str) -> Role {
    Role::client(RoleKind::C2, client)
}

fn strings(v: &Value) -> BTreeSet<String> {
    v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect()
}

#[test]
fn manifest_has_sixteen_tools_with_roles() {
    let specs = tool_specs();
    assert_eq!(specs.len(), 16);
    let names: BTreeSet<_> = specs.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names.len(), 16);
    assert!(specs.iter().all(|t| !t.roles.is_empty()));
}

#[test]
fn detectors_are_silent_on_clean_data() {
    for seed in 0..50u64 {
        let modality = Modality::ALL[(seed % 6) as usize];
        let (dir, m) = env(seed, modality, false);
        let log = ChangeLog::new();
        for d in &m.datasets {
            let r = call(dir.path(), &m, c2(&d.client), &log, "detect_duplicates", json!({"dataset": d.dataset}));
            assert!(r.ok);
            assert_eq!(r.data["groups"].as_array().unwrap().len(), 0, "seed {seed} {}", d.dataset);
            let r = call(dir.path(), &m, c2(&d.client), &log, "detect_outliers", json!({"dataset": d.dataset}));
            assert!(r.data["off_modality"].as_array().unwrap().is_empty(), "seed {seed} {}", d.dataset);
            assert!(r.data["suspect_labels"].as_array().unwrap().is_empty(), "seed {seed} {}", d.dataset);
        }
    }
}

#[test]
fn detectors_find_injected_corruptions() {
    let (mut dup_hit, mut dup_total, mut off_hit, mut off_total, mut mis_hit, mut mis_total) = (0, 0, 0, 0, 0, 0);
    for seed in 0..30u64 {
        let modality = Modality::ALL[(seed % 6) as usize];
        let (dir, m) = env(seed, modality, true);
        let log = ChangeLog::new();
        for d in &m.datasets {
            let r = call(dir.path(), &m, c2(&d.client), &log, "detect_duplicates", json!({"dataset": d.dataset}));
            let flagged = strings(&r.data["remove"]);
            for dup in &d.duplicates {
                dup_total += 1;
                dup_hit += flagged.contains(&dup.path) as usize;
                assert!(!flagged.contains(&dup.original));
            }
            let r = call(dir.path(), &m, c2(&d.client), &log, "detect_outliers", json!({"dataset": d.dataset}));
            let off = strings(&r.data["off_modality"]);
            let sus = strings(&r.data["suspect_labels"]);
            for o in &d.off_modality {
                off_total += 1;
                off_hit += off.contains(&o.path) as usize;
            }
            for mm in &d.mislabeled {
                mis_total += 1;
                mis_hit += sus.contains(&mm.path) as usize;
            }
            for c in d.clean.values() {
                assert!(!off.contains(&c.path) && !sus.contains(&c.path), "false positive {}", c.path);
            }
        }
    }
    assert_eq!(dup_hit, dup_total);
    assert_eq!(off_hit, off_total);
    assert!(mis_hit as f64 >= 0.95 * mis_total as f64, "{mis_hit}/{mis_total}");
}

#[test]
fn duplicate_pair_forms_one_group() {
    let (dir, m) = env(4, Modality::Dermatoscopy, false);
    let d = &m.datasets[0];
    let src = &d.clean.values().next().unwrap().path;
    let copy = format!("{}_copy.pgm", src.trim_end_matches(".pgm"));
    fs::copy(dir.path().join(src), dir.path().join(&copy)).unwrap();
    let r = call(dir.path(), &m, c2(&d.client), &ChangeLog::new(), "detect_duplicates", json!({"dataset": d.dataset}));
    let groups = r.data["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0]["keep"], json!(src));
    assert_eq!(groups[0]["remove"], json!([copy]));
}

#[test]
fn normalization_is_idempotent_and_replayable() {
    let (dir, m) = env(11, Modality::Histopathology, true);
    let pristine = tempfile::tempdir().unwrap();
    copy_tree(dir.path(), pristine.path());
    let log = ChangeLog::new();
    let p = m.task.canonical_profile;
    let args = |ds: &str| {
        json!({"dataset": ds, "format": "pgm", "width": p.width, "height": p.height, "mean": p.mean, "std": p.std})
    };
    for d in m.datasets.iter().filter(|d| d.client == m.datasets[0].client) {
        if d.layout == Layout::Flat {
            let plan: BTreeMap<_, _> = d.classes.iter().map(|c| (c.clone(), c.clone())).collect();
            let r = call(dir.path(), &m, c2(&d.client), &log, "restructure_by_class", json!({"dataset": d.dataset, "plan": plan}));
            assert!(r.ok, "{}", r.summary);
        }
        let junk: Vec<String> = list_files(dir.path(), &dir.path().join(d.dir()))
            .unwrap()
            .into_iter()
            .filter(|f| !fedbench::image::is_image_name(f))
            .collect();
        let r = call(dir.path(), &m, c2(&d.client), &log, "remove_files", json!({"paths": junk}));
        assert!(r.ok, "{}", r.summary);
        let first = call(dir.path(), &m, c2(&d.client), &log, "normalize_images", args(&d.dataset));
        assert!(first.ok, "{}", first.summary);
        let second = call(dir.path(), &m, c2(&d.client), &log, "normalize_images", args(&d.dataset));
        assert_eq!(second.data["rewritten"].as_array().unwrap().len(), 0);
    }
    assert!(!log.is_empty());
    replay_changelog(pristine.path(), &log.records()).unwrap();
    assert_eq!(tree_bytes(&dir.path().join("clients")), tree_bytes(&pristine.path().join("clients")));
}

#[test]
fn label_mapping_moves_files_into_coarse_folders() {
    let (dir, m) = env(5, Modality::Dermatoscopy, false);
    let d = m.in_scope().next().unwrap();
    let c3 = Role::client(RoleKind::C3, &d.client);
    let log = ChangeLog::new();
    let r = call(dir.path(), &m, c3.clone(), &log, "enumerate_labels", json!({"dataset": d.dataset}));
    let labels = strings(&r.data["labels"]);
    assert_eq!(labels, d.classes.iter().cloned().collect());
    let mapping: BTreeMap<_, _> = labels.iter().map(|l| (l.clone(), m.canonical_label_map[l].clone())).collect();
    let r = call(dir.path(), &m, c3.clone(), &log, "apply_label_mapping", json!({"dataset": d.dataset, "mapping": mapping}));
    assert!(r.ok, "{}", r.summary);
    let r = call(dir.path(), &m, c3, &log, "enumerate_labels", json!({"dataset": d.dataset}));
    let after = strings(&r.data["labels"]);
    assert!(after.iter().all(|l| m.task.target_schema.contains(l)));
    assert_eq!(r.data["counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum::<u64>() as usize, d.clean.len());
}

#[test]
fn tools_reject_out_of_view_paths() {
    let (dir, m) = env(6, Modality::Mri, true);
    let log = ChangeLog::new();
    let a = &m.clients[0];
    let b = &m.clients[1];
    for path in [
        format!("clients/{b}/datacard.json"),
        "../outside".to_string(),
        format!("clients/{a}/../../manifest.json"),
        "manifest.json".into(),
        "/etc/passwd".into(),
        format!("clients/{a}/../{b}/x"),
    ] {
        let r = call(dir.path(), &m, c2(a), &log, "remove_files", json!({"paths": [path]}));
        assert_eq!(r.error_kind, Some(ToolErrorKind::AccessDenied), "{path}");
        let r = call(dir.path(), &m, c2(a), &log, "make_dir", json!({"path": path}));
        assert_eq!(r.error_kind, Some(ToolErrorKind::AccessDenied), "{path}");
    }
    let r = call(dir.path(), &m, Role::client(RoleKind::C1, a), &log, "read_datacard", json!({"client": b}));
    assert_eq!(r.error_kind, Some(ToolErrorKind::AccessDenied));
    let r = call(dir.path(), &m, Role::server(RoleKind::S2), &log, "read_text_file", json!({"path": format!("clients/{a}/datacard.json")}));
    assert_eq!(r.error_kind, Some(ToolErrorKind::AccessDenied));
    assert!(log.is_empty());
}

#[test]
fn schema_and_assignment_are_enforced() {
    let (dir, m) = env(7, Modality::Xray, false);
    let log = ChangeLog::new();
    let a = &m.clients[0];
    let r = call(dir.path(), &m, Role::client(RoleKind::C1, a), &log, "remove_files", json!({"paths": []}));
    assert_eq!(r.error_kind, Some(ToolErrorKind::NotAssigned));
    let r = call(dir.path(), &m, c2(a), &log, "remove_files", json!({"paths": "x"}));
    assert_eq!(r.error_kind, Some(ToolErrorKind::Schema));
    let r = call(dir.path(), &m, c2(a), &log, "remove_files", json!({"paths": [], "extra": 1}));
    assert_eq!(r.error_kind, Some(ToolErrorKind::Schema));
    let r = call(dir.path(), &m, c2(a), &log, "nonexistent", json!({}));
    assert_eq!(r.error_kind, Some(ToolErrorKind::Schema));
    let r = call(dir.path(), &m, c2(a), &log, "read_text_file", json!({"path": format!("clients/{a}/datacard.json")}));
    assert!(r.ok);
}

#[test]
fn launch_training_requires_every_field() {
    let (dir, m) = env(8, Modality::Dermatoscopy, false);
    let log = ChangeLog::new();
    let clients: Vec<_> = m.eligible_clients.iter().cloned().collect();
    let mut cfg = json!({
        "algorithm": "FedAvg", "rounds": 2, "local_epochs": 1, "batch_size": 16, "learning_rate": 0.1,
        "sample_fraction": 1.0, "mu": 0.01, "lambda": 1.0, "hidden_width": 0, "seed": 1, "clients": clients,
    });
    cfg.as_object_mut().unwrap().remove("algorithm");
    let r = call(dir.path(), &m, Role::server(RoleKind::S4), &log, "launch_training", cfg.clone());
    assert!(!r.ok);
    assert_eq!(r.data["config_valid"], json!(false));
    cfg["algorithm"] = json!("FedAvg");
    let r = call(dir.path(), &m, Role::server(RoleKind::S4), &log, "launch_training", cfg);
    assert!(r.ok, "{}", r.summary);
    assert_eq!(r.data["config_valid"], json!(true));
}

#[test]
fn list_dir_paginates() {
    let (dir, m) = env(9, Modality::Fundus, false);
    let a = &m.clients[0];
    let base = dir.path().join("clients").join(a).join("bulk");
    fs::create_dir_all(&base).unwrap();
    for i in 0..1203 {
        fs::write(base.join(format!("f{i:05}.txt")), b"x").unwrap();
    }
    let log = ChangeLog::new();
    let r = call(dir.path(), &m, c2(a), &log, "list_dir", json!({"path": format!("clients/{a}/bulk"), "page": 3}));
    assert_eq!(r.data["pages"], json!(3));
    assert_eq!(r.data["entries"].as_array().unwrap().len(), 203);
    let r = call(dir.path(), &m, c2(a), &log, "list_dir", json!({"path": format!("clients/{a}/bulk"), "page": 4}));
    assert!(!r.ok);
}

fn copy_tree(src: &Path, dst: &Path) {
    for f in list_files(src, src).unwrap() {
        let to = dst.join(&f);
        fs::create_dir_all(to.parent().unwrap()).unwrap();
        fs::copy(src.join(&f), to).unwrap();
    }
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    list_files(dir, dir).unwrap().into_iter().map(|f| (f.clone(), fs::read(dir.join(&f)).unwrap())).collect()
}
