use fedbench::agent::{run_episode, AgentCore, CoreError, CoreKind, CoreReply, CoreSet, Conversation, EpisodeSettings, OracleCore, Usage};
use fedbench::envgen::{generate_environment, EnvironmentConfig};
use fedbench::evaluator::{aggregate, score_run, RunArtifacts, Thresholds};
use fedbench::fedcore::Registry;
use fedbench::harness::{copy_workspace, evaluate_dir, run_all, tree_hash, CoreSpec, RunConfig};
use fedbench::toolkit::replay_changelog;
use fedbench::vocab::Modality;
use std::collections::BTreeMap;
use std::sync::Arc;

struct MuteCore;

impl AgentCore for MuteCore {
    fn name(&self) -> &str {
        "mute"
    }

    fn kind(&self) -> CoreKind {
        CoreKind::ScriptedNoisy
    }

    fn respond(&self, _: &Conversation) -> Result<CoreReply, CoreError> {
        Ok(CoreReply {
            text: String::new(),
            usage: Usage::default(),
        })
    }
}

#[test]
fn mixed_runs_aggregate_to_three_of_five() {
    let tmp = tempfile::tempdir().unwrap();
    let env = tmp.path().join("env");
    let (_, manifest) = generate_environment(&EnvironmentConfig::new(11, Modality::ALL[1]), &env).unwrap();
    let registry = Registry::builtin();
    let oracle = CoreSet::uniform(Arc::new(OracleCore::new()));
    let mute = CoreSet::uniform(Arc::new(MuteCore));
    let mut per_run = Vec::new();
    for i in 0..5 {
        let ws = tmp.path().join(format!("ws{i}"));
        copy_workspace(&env, &ws).unwrap();
        let cores = if i < 3 { &oracle } else { &mute };
        let settings = EpisodeSettings {
            run_index: i,
            ..EpisodeSettings::default()
        };
        let res = run_episode(&ws, &manifest.task, &registry, cores, &settings);
        let run = RunArtifacts {
            run_index: i,
            phases: res.phases,
            events: res.events,
            snapshot: res.snapshot,
        };
        per_run.push(score_run(&manifest, &registry, &run, &ws, &Thresholds::default()));
    }
    let report = aggregate("mixed", &manifest, Thresholds::default(), per_run);
    for (phase, rate) in &report.phase_success_rate {
        assert!((rate - 0.6).abs() < 1e-12, "{phase}: {rate}");
    }
    assert!(report.cells.values().all(|&c| c == 3), "{:?}", report.cells);
    assert!((report.overall_score - 60.0).abs() < 1e-9);
    let md = report.to_markdown();
    assert_eq!(md.matches("3/5").count(), 7, "{md}");
}

#[test]
fn runs_start_from_the_pristine_workspace() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = RunConfig {
        environment: Some(EnvironmentConfig::new(3, Modality::ALL[4])),
        runs: 3,
        output: tmp.path().join("out"),
        ..RunConfig::default()
    };
    config.cores = BTreeMap::from([("default".to_string(), CoreSpec::oracle())]);
    let summary = run_all(&config, 2).unwrap();
    assert_eq!(summary.completed(), 3);
    for m in &summary.metas {
        assert_eq!(m.initial_tree_hash, summary.pristine_hash);
        let ws = summary.output.join(format!("run_{:02}", m.run_index + 1)).join("workspace");
        assert_ne!(tree_hash(&ws).unwrap(), summary.pristine_hash);
    }
    assert_eq!(tree_hash(&summary.output.join("environment")).unwrap(), summary.pristine_hash);
    let a = evaluate_dir(&summary.output, None).unwrap();
    let b = evaluate_dir(&summary.output, None).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.overall_score, 100.0);
}

#[test]
fn changelog_replay_reproduces_the_final_workspace() {
    let tmp = tempfile::tempdir().unwrap();
    let env = tmp.path().join("env");
    let (_, manifest) = generate_environment(&EnvironmentConfig::new(21, Modality::ALL[0]), &env).unwrap();
    let ws = tmp.path().join("ws");
    copy_workspace(&env, &ws).unwrap();
    let cores = CoreSet::uniform(Arc::new(OracleCore::new()));
    let res = run_episode(&ws, &manifest.task, &Registry::builtin(), &cores, &EpisodeSettings::default());
    assert!(!res.changes.is_empty());
    let replay = tmp.path().join("replay");
    copy_workspace(&env, &replay).unwrap();
    replay_changelog(&replay, &res.changes).unwrap();
    let clients = |root: &std::path::Path| tree_hash(&root.join("clients")).unwrap();
    assert_eq!(clients(&replay), clients(&ws));
}
