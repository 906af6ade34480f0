use fedbench::agent::{run_episode, CoreSet, EpisodeSettings, NoisyCore, OracleCore};
use fedbench::envgen::{generate_environment, EnvironmentConfig, GroundTruthManifest};
use fedbench::evaluator::{score_run, RunArtifacts, Thresholds};
use fedbench::fedcore::Registry;
use fedbench::harness::copy_workspace;
use fedbench::vocab::Modality;
use std::sync::Arc;

fn episode(seed: u64, modality: Modality, cores: &CoreSet, settings: &EpisodeSettings) -> fedbench::evaluator::RunScore {
    let tmp = tempfile::tempdir().unwrap();
    let env = tmp.path().join("env");
    let (_, manifest) = generate_environment(&EnvironmentConfig::new(seed, modality), &env).unwrap();
    let ws = tmp.path().join("ws");
    copy_workspace(&env, &ws).unwrap();
    let registry = Registry::builtin();
    let res = run_episode(&ws, &manifest.task, &registry, cores, settings);
    let run = RunArtifacts {
        run_index: 0,
        phases: res.phases,
        events: res.events,
        snapshot: res.snapshot,
    };
    let _: &GroundTruthManifest = &manifest;
    score_run(&manifest, &registry, &run, &ws, &Thresholds::default())
}

#[test]
fn oracle_episode_scores_perfectly() {
    let cores = CoreSet::uniform(Arc::new(OracleCore::new()));
    for seed in 0..6 {
        let s = episode(seed, Modality::ALL[seed as usize % 6], &cores, &EpisodeSettings::default());
        assert!(s.cells.values().all(|v| *v), "seed {seed}: {s:#?}");
        assert!(s.phases.iter().all(|p| p.success), "seed {seed}: {:#?}", s.phases);
        assert_eq!(s.harmonization.conflict.value, 0.0);
        assert_eq!(s.failures.total(), 0, "{:?}", s.failures);
        assert_eq!(s.tokens(), 0);
    }
}

#[test]
fn zero_budget_fails_every_phase() {
    let cores = CoreSet::uniform(Arc::new(OracleCore::new()));
    let settings = EpisodeSettings {
        turn_budget: 0,
        ..Default::default()
    };
    let s = episode(3, Modality::Fundus, &cores, &settings);
    for p in &s.phases {
        assert!(!p.success);
        assert_eq!(p.failure.as_deref(), Some("budget_exhausted"), "{p:?}");
    }
}

#[test]
fn fully_noisy_core_fails_phases() {
    let cores = CoreSet::uniform(Arc::new(NoisyCore::new(1.0, 5)));
    let s = episode(5, Modality::Xray, &cores, &EpisodeSettings::default());
    assert!(s.phases.iter().all(|p| !p.success), "{:#?}", s.phases);
}
