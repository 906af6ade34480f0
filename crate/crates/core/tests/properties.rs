use fedbench::agent::{run_episode, CoreSet, EpisodeResult, EpisodeSettings, NoisyCore, OracleCore};
use fedbench::envgen::{generate_environment, list_files, synth_image, EnvironmentConfig, GroundTruthManifest};
use fedbench::evaluator::{score_client_selection, score_harmonization, score_run, ClassMapping, RunArtifacts, Thresholds};
use fedbench::fedcore::algorithms::{aggregate_fedavg, proximal_gradient, proximal_value, sample_weights};
use fedbench::fedcore::Registry;
use fedbench::image::IMAGE_MAGICS;
use fedbench::harness::{copy_workspace, tree_hash};
use fedbench::protocol::{AccessMode, Phase, Role, RoleKind, WorkspaceView};
use fedbench::trace::{TraceEvent, TraceSink};
use fedbench::vocab::Modality;
use proptest::prelude::*;
use serde_json::Value;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

fn modality() -> impl Strategy<Value = Modality> {
    (0usize..6).prop_map(|i| Modality::ALL[i])
}

fn gen(dir: &Path, seed: u64, m: Modality) -> GroundTruthManifest {
    generate_environment(&EnvironmentConfig::new(seed, m), dir).unwrap().1
}

struct Ran {
    _tmp: tempfile::TempDir,
    manifest: GroundTruthManifest,
    before: String,
    ws: std::path::PathBuf,
    env: std::path::PathBuf,
    result: EpisodeResult,
}

fn run(seed: u64, m: Modality, cores: &CoreSet) -> Ran {
    let tmp = tempfile::tempdir().unwrap();
    let env = tmp.path().join("env");
    let manifest = gen(&env, seed, m);
    let before = tree_hash(&env).unwrap();
    let ws = tmp.path().join("ws");
    copy_workspace(&env, &ws).unwrap();
    let result = run_episode(&ws, &manifest.task, &Registry::builtin(), cores, &EpisodeSettings::default());
    Ran {
        _tmp: tmp,
        manifest,
        before,
        ws,
        env,
        result,
    }
}

fn strings(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(a) => a.iter().for_each(|x| strings(x, out)),
        Value::Object(o) => o.iter().for_each(|(k, x)| {
            out.push(k.clone());
            strings(x, out)
        }),
        _ => {}
    }
}

fn client_file_counts(root: &Path) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for f in list_files(root, &root.join("clients")).unwrap() {
        let client = f.split('/').nth(1).unwrap().to_string();
        *out.entry(client).or_insert(0) += 1;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn generation_is_reproducible(seed in 0u64..10_000, m in modality()) {
        let tmp = tempfile::tempdir().unwrap();
        let a = gen(&tmp.path().join("a"), seed, m);
        let b = gen(&tmp.path().join("b"), seed, m);
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert_eq!(tree_hash(&tmp.path().join("a")).unwrap(), tree_hash(&tmp.path().join("b")).unwrap());
    }

    #[test]
    fn ledger_accounts_for_every_sample_file(seed in 0u64..10_000, m in modality()) {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = gen(tmp.path(), seed, m);
        for d in &manifest.datasets {
            let on_disk: BTreeSet<String> = list_files(tmp.path(), &tmp.path().join(d.dir()))
                .unwrap()
                .into_iter()
                .filter(|p| !p.ends_with(".json"))
                .collect();
            let paths = d.all_paths();
            let ledgered: BTreeSet<String> = paths.iter().map(|p| p.to_string()).collect();
            prop_assert_eq!(paths.len(), ledgered.len(), "ledger lists a path twice in {}", d.dir());
            prop_assert_eq!(&on_disk, &ledgered, "{}", d.dir());
        }
    }

    #[test]
    fn samples_fall_in_their_modality_band(seed in any::<u64>(), m in modality(), k in 0usize..64) {
        let vocab = m.vocabulary();
        let fine = vocab.fine[k % vocab.fine.len()].0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mean, _) = synth_image(m, m, fine, &mut rng).stats();
        let nearest = Modality::ALL
            .iter()
            .min_by(|a, b| (a.band().0 - mean).abs().total_cmp(&(b.band().0 - mean).abs()))
            .unwrap();
        prop_assert_eq!(*nearest, m);
        let (c, s) = m.band();
        prop_assert!((mean - c).abs() <= 3.0 * s, "mean {mean} outside band {c}±{}", 3.0 * s);
    }

    #[test]
    fn episodes_respect_topology_and_never_add_client_files(seed in 0u64..10_000, m in modality(), p in 0.0f64..0.6) {
        let cores = CoreSet::uniform(Arc::new(NoisyCore::new(p, seed)));
        let r = run(seed, m, &cores);
        let mut phase = None;
        let mut order = Vec::new();
        for e in &r.result.events {
            match e {
                TraceEvent::PhaseStart { phase: ph } => {
                    phase = Some(*ph);
                    order.push(*ph);
                }
                TraceEvent::Message(msg) => {
                    let ph = phase.expect("message before any phase");
                    let pair = (msg.sender.kind, msg.recipient.kind);
                    prop_assert!(ph.topology().contains(&pair), "{pair:?} in {ph}");
                    let mut texts = Vec::new();
                    strings(&msg.payload, &mut texts);
                    for t in texts {
                        for magic in IMAGE_MAGICS {
                            prop_assert!(!t.as_bytes().starts_with(magic), "image magic in payload");
                        }
                    }
                }
                _ => {}
            }
        }
        prop_assert!(order.windows(2).all(|w| w[0] < w[1]), "phase order {order:?}");
        prop_assert_eq!(&order[..], &Phase::ALL[..order.len()]);
        let before = client_file_counts(&r.env);
        let after = client_file_counts(&r.ws);
        for (c, n) in &after {
            prop_assert!(*n <= before[c], "client {c}: {n} > {}", before[c]);
        }
        prop_assert_eq!(tree_hash(&r.env).unwrap(), r.before);
    }

    #[test]
    fn scripted_episodes_are_deterministic_and_free(seed in 0u64..10_000, m in modality(), p in 0.0f64..0.6) {
        let cores = CoreSet::uniform(Arc::new(NoisyCore::new(p, seed)));
        let a = run(seed, m, &cores);
        let b = run(seed, m, &cores);
        prop_assert_eq!(&a.result.phases, &b.result.phases);
        prop_assert_eq!(&a.result.events, &b.result.events);
        prop_assert_eq!(tree_hash(&a.ws).unwrap(), tree_hash(&b.ws).unwrap());
        prop_assert_eq!(a.result.tokens, 0);
        let turns: u64 = a
            .result
            .events
            .iter()
            .map(|e| match e {
                TraceEvent::CoreTurn { prompt_tokens, completion_tokens, .. } => prompt_tokens + completion_tokens,
                _ => 0,
            })
            .sum();
        prop_assert_eq!(turns, a.result.tokens);
        prop_assert_eq!(a.result.phases.iter().map(|o| o.tokens).sum::<u64>(), a.result.tokens);
    }

    #[test]
    fn rescoring_is_stable(seed in 0u64..10_000, m in modality()) {
        let cores = CoreSet::uniform(Arc::new(NoisyCore::new(0.3, seed)));
        let r = run(seed, m, &cores);
        let art = RunArtifacts {
            run_index: 0,
            phases: r.result.phases.clone(),
            events: r.result.events.clone(),
            snapshot: r.result.snapshot.clone(),
        };
        let registry = Registry::builtin();
        let s1 = score_run(&r.manifest, &registry, &art, &r.ws, &Thresholds::default());
        let s2 = score_run(&r.manifest, &registry, &art, &r.ws, &Thresholds::default());
        prop_assert_eq!(serde_json::to_string(&s1).unwrap(), serde_json::to_string(&s2).unwrap());
        for rate in [
            s1.preprocessing.schema_compliance.value,
            s1.preprocessing.duplicate_removal.value,
            s1.preprocessing.format_normalization.value,
            s1.harmonization.exact.value,
            s1.harmonization.coverage.value,
            s1.harmonization.conflict.value,
            s1.selection.precision,
            s1.selection.recall,
            s1.selection.f1,
        ] {
            prop_assert!((0.0..=1.0).contains(&rate), "rate {rate}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_sum_to_one(counts in prop::collection::vec(0usize..10_000, 1..40)) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let w = sample_weights(&counts).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn fedavg_of_identical_models_is_identity(
        theta in prop::collection::vec(-10.0f64..10.0, 1..30),
        counts in prop::collection::vec(1usize..500, 1..8),
    ) {
        let params = vec![theta.clone(); counts.len()];
        let avg = aggregate_fedavg(&params, &counts).unwrap();
        for (a, t) in avg.iter().zip(&theta) {
            prop_assert!((a - t).abs() <= 1e-12 * t.abs().max(1.0));
        }
    }

    #[test]
    fn proximal_gradient_matches_finite_differences(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12),
        mu in 0.0f64..3.0,
    ) {
        let theta: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let anchor: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let g = proximal_gradient(&theta, &anchor, mu);
        let h = 1e-5;
        for i in 0..theta.len() {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (proximal_value(&up, &anchor, mu) - proximal_value(&dn, &anchor, mu)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "i={i} fd={fd} g={}", g[i]);
        }
    }

    #[test]
    fn selection_scores_are_bounded_and_consistent(
        sel in prop::collection::btree_set(0u8..12, 0..12),
        elig in prop::collection::btree_set(0u8..12, 0..12),
    ) {
        let name = |s: &BTreeSet<u8>| s.iter().map(|i| format!("client_{i:02}")).collect::<BTreeSet<_>>();
        let s = score_client_selection(&name(&sel), &name(&elig));
        for v in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let expect = if s.precision + s.recall == 0.0 { 0.0 } else { 2.0 * s.precision * s.recall / (s.precision + s.recall) };
        prop_assert_eq!(s.f1, expect);
        let hit = sel.intersection(&elig).count();
        if !elig.is_empty() {
            prop_assert_eq!(s.recall, hit as f64 / elig.len() as f64);
        }
    }

    #[test]
    fn harmonization_rates_are_bounded(
        rows in prop::collection::vec(
            (0usize..3, prop::collection::vec(0usize..3, 0..3), prop::collection::btree_set(0usize..3, 0..3)),
            0..10,
        ),
    ) {
        let names = ["a", "b", "c"];
        let classes: Vec<ClassMapping> = rows
            .iter()
            .enumerate()
            .map(|(i, (canon, targets, places))| ClassMapping {
                dataset: "d".into(),
                class: format!("k{i}"),
                canonical: names[*canon].into(),
                targets: targets.iter().map(|t| names[*t].to_string()).collect(),
                placements: places.iter().map(|p| names[*p].to_string()).collect(),
            })
            .collect();
        let h = score_harmonization(&classes);
        for r in [h.exact.value, h.coverage.value, h.conflict.value] {
            prop_assert!((0.0..=1.0).contains(&r));
        }
        prop_assert!(h.exact.value <= h.coverage.value);
        if classes.is_empty() {
            prop_assert_eq!(h.conflict.value, 0.0);
            prop_assert_eq!(h.exact.value, 1.0);
        }
    }

    #[test]
    fn allowed_paths_stay_inside_the_view(
        parts in prop::collection::vec(
            prop::sample::select(vec!["..", ".", "clients", "client_00", "client_01", "server", "data", "x.pgm", ""]),
            1..8,
        ),
        absolute in any::<bool>(),
        kind in prop::sample::select(vec![RoleKind::C1, RoleKind::C2, RoleKind::C3, RoleKind::S1, RoleKind::S3]),
        write in any::<bool>(),
    ) {
        let root = Path::new("/ws");
        let rel = parts.join("/");
        let path = if absolute { format!("/ws/{rel}") } else { rel };
        let role = if kind.is_client() { Role::client(kind, "client_00") } else { Role::server(kind) };
        let view = WorkspaceView::for_role(&role);
        let mode = if write { AccessMode::Write } else { AccessMode::Read };
        let roots = if write { &view.writable_roots } else { &view.readable_roots };
        match view.check_access(root, &path, mode, &TraceSink::default()) {
            fedbench::protocol::Access::Allow(p) => {
                prop_assert!(roots.iter().any(|r| p.starts_with(r)), "{path} -> {}", p.display());
                prop_assert!(p.components().all(|c| matches!(c, std::path::Component::Normal(_))));
            }
            fedbench::protocol::Access::Deny(_) => {}
        }
    }
}

#[test]
fn oracle_episode_leaves_source_untouched() {
    let r = run(7, Modality::ALL[2], &CoreSet::uniform(Arc::new(OracleCore::new())));
    assert_eq!(tree_hash(&r.env).unwrap(), r.before);
    assert_ne!(tree_hash(&r.ws).unwrap(), r.before);
}
