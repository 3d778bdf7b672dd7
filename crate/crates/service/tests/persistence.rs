mod common;

use common::{quick_train, small_spec};
use dash_core::dataset::Split;
use dash_core::diff::DEFAULT_GUTTER;
use dash_core::engine::train;
use dash_core::projection::TsneParams;
use dash_service::session::{JobState, SessionMeta, INTERRUPTED, SESSION_FILE};
use dash_service::state::{
    AugmentRequest, ClusterRequest, CreateSession, DiffQuery, TrainRequest, TranslateRequest, SESSIONS_DIR,
};
use dash_service::AppState;

/// Creates a session, trains, augments once and retrains.
fn worked_session(state: &AppState, id: &str) {
    let created = state
        .create_session(CreateSession {
            id: Some(id.into()),
            dataset_spec: Some(small_spec(2)),
            train: Some(quick_train(2)),
            ..Default::default()
        })
        .unwrap();
    let job = state.wait_for_job(&created.job.unwrap().id).unwrap();
    assert!(matches!(job.state, JobState::Done { .. }), "{job:?}");
    let clusters = state
        .cluster(
            id,
            ClusterRequest {
                k: 3,
                seed: 7,
                splits: None,
                checkpoint: None,
            },
        )
        .unwrap();
    let sources: Vec<String> = clusters.result.ids.iter().filter(|i| i.starts_with("train")).take(5).cloned().collect();
    let translated = state
        .translate(
            id,
            TranslateRequest {
                source_ids: sources,
                cluster: 2,
                count: 1,
                k: None,
            },
        )
        .unwrap();
    state
        .augment(
            id,
            AugmentRequest {
                ids: translated.items.iter().map(|i| i.id.clone()).collect(),
                label: None,
            },
        )
        .unwrap();
    let job = state
        .start_training(
            id,
            TrainRequest {
                config: quick_train(3),
                warm_start: true,
            },
        )
        .unwrap();
    let job = state.wait_for_job(&job.id).unwrap();
    assert!(matches!(job.state, JobState::Done { .. }), "{job:?}");
}

#[test]
fn restart_reloads_the_last_committed_state() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(dir.path()).unwrap();
    worked_session(&state, "r");
    let before = state.get_session("r").unwrap();
    let history = state.history("r").unwrap();
    let preds = state.predictions("r", Split::Test, None).unwrap();
    drop(state);

    let reopened = AppState::open(dir.path()).unwrap();
    let after = reopened.get_session("r").unwrap();
    assert_eq!(after.active, before.active);
    assert_eq!(after.checkpoints, before.checkpoints);
    assert_eq!(after.dataset, before.dataset);
    assert_eq!(after.dataset_versions, before.dataset_versions);
    assert_eq!(after.jobs, before.jobs);
    assert_eq!(reopened.history("r").unwrap(), history);
    assert_eq!(reopened.predictions("r", Split::Test, None).unwrap(), preds);
    for job in &after.jobs {
        assert_eq!(reopened.job(&job.id).unwrap(), *job);
    }
}

#[test]
fn in_flight_jobs_fail_on_restart() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(dir.path()).unwrap();
    worked_session(&state, "crash");
    let committed = state.get_session("crash").unwrap();
    drop(state);

    // Simulate a crash mid-training: the job is recorded as running and an
    // orphan checkpoint file exists that session.json never referenced.
    let session_dir = dir.path().join(SESSIONS_DIR).join("crash");
    let path = session_dir.join(SESSION_FILE);
    let mut meta: SessionMeta = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let mut job = meta.jobs[0].clone();
    job.id = "crash-job9".into();
    job.state = JobState::Running { epoch: 1, epochs: 2 };
    job.finished_at = None;
    meta.jobs.push(job);
    std::fs::write(&path, serde_json::to_vec(&meta).unwrap()).unwrap();
    std::fs::write(session_dir.join("checkpoints").join("orphan.ckpt"), b"partial").unwrap();

    let reopened = AppState::open(dir.path()).unwrap();
    let job = reopened.job("crash-job9").unwrap();
    assert_eq!(
        job.state,
        JobState::Failed {
            reason: INTERRUPTED.into()
        }
    );
    assert!(job.finished_at.is_some());
    let after = reopened.get_session("crash").unwrap();
    assert_eq!(after.checkpoints, committed.checkpoints);
    assert_eq!(after.active, committed.active);

    // The failure is itself committed, and a new job may start.
    drop(reopened);
    let again = AppState::open(dir.path()).unwrap();
    assert!(matches!(again.job("crash-job9").unwrap().state, JobState::Failed { .. }));
    let job = again
        .start_training(
            "crash",
            TrainRequest {
                config: quick_train(4),
                warm_start: true,
            },
        )
        .unwrap();
    assert!(matches!(again.wait_for_job(&job.id).unwrap().state, JobState::Done { .. }));
}

#[test]
fn cached_responses_match_fresh_computation() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(dir.path()).unwrap();
    worked_session(&state, "c");
    let session = state.get_session("c").unwrap();
    let parent = session.checkpoints[1].id.clone();

    let params = |seed, perplexity| TsneParams {
        perplexity,
        iterations: 120,
        seed,
    };
    let diff = |min_cell| DiffQuery {
        cid_a: Some(parent.clone()),
        min_cell: Some(min_cell),
        gutter: Some(DEFAULT_GUTTER),
        ..Default::default()
    };
    type Probe<'a> = Box<dyn Fn() -> Vec<u8> + 'a>;
    let probes: Vec<Probe> = vec![
        Box::new(|| state.predictions("c", Split::Test, None).unwrap().to_vec()),
        Box::new(|| state.predictions("c", Split::Train, Some(&parent)).unwrap().to_vec()),
        Box::new(|| state.projection("c", &params(1, None), None).unwrap().to_vec()),
        Box::new(|| state.projection("c", &params(2, Some(5.0)), Some(&parent)).unwrap().to_vec()),
        Box::new(|| state.density("c", &params(1, None), Some(0), Some(16), None).unwrap().to_vec()),
        Box::new(|| state.gradcam("c", "test-00003", None, None, None).unwrap().to_vec()),
        Box::new(|| state.gradcam("c", "train-00001", Some(1), Some(0.3), Some(&parent)).unwrap().to_vec()),
        Box::new(|| state.mosaic("c", &diff(0.01)).unwrap().to_vec()),
        Box::new(|| state.mosaic("c", &diff(0.05)).unwrap().to_vec()),
        Box::new(|| state.trace("c", &diff(0.01)).unwrap().to_vec()),
    ];
    let first: Vec<Vec<u8>> = probes.iter().map(|p| p()).collect();
    let cached: Vec<Vec<u8>> = probes.iter().map(|p| p()).collect();
    state.clear_caches("c").unwrap();
    let fresh: Vec<Vec<u8>> = probes.iter().map(|p| p()).collect();
    for (i, ((a, b), c)) in first.iter().zip(&cached).zip(&fresh).enumerate() {
        assert_eq!(a, b, "probe {i} changed between calls");
        assert_eq!(a, c, "probe {i} differs from a fresh computation");
    }
}

#[test]
fn lineage_reproduces_every_checkpoint_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(dir.path()).unwrap();
    worked_session(&state, "rep");
    let session = state.get_session("rep").unwrap();
    let trained: Vec<_> = session.checkpoints.iter().filter(|c| c.train_config.is_some()).collect();
    assert_eq!(trained.len(), 2);
    assert_ne!(trained[0].dataset_version, trained[1].dataset_version);
    for entry in trained {
        let parent = state.checkpoint("rep", entry.parent_id.as_deref().unwrap()).unwrap();
        let dataset = state.dataset_at("rep", entry.dataset_version.as_deref().unwrap()).unwrap();
        let replayed = train(&parent, &dataset, entry.train_config.as_ref().unwrap(), |_| {}).unwrap();
        let stored = state.checkpoint("rep", &entry.id).unwrap();
        assert_eq!(replayed.id, entry.id);
        assert_eq!(replayed.network().flat_weights(), stored.network().flat_weights());
        assert_eq!(replayed.epoch_losses, stored.epoch_losses);
    }
}

#[test]
fn registering_bumps_the_version_seen_by_queries() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(dir.path()).unwrap();
    state
        .create_session(CreateSession {
            id: Some("v".into()),
            dataset_spec: Some(small_spec(3)),
            ..Default::default()
        })
        .unwrap();
    let read = |bytes: std::sync::Arc<Vec<u8>>| -> serde_json::Value { serde_json::from_slice(&bytes).unwrap() };
    let before = read(state.predictions("v", Split::Train, None).unwrap());
    state
        .cluster(
            "v",
            ClusterRequest {
                k: 2,
                seed: 0,
                splits: Some(vec![Split::Train]),
                checkpoint: None,
            },
        )
        .unwrap();
    let t = state
        .translate(
            "v",
            TranslateRequest {
                source_ids: vec!["train-00000".into(), "train-00001".into()],
                cluster: 0,
                count: 3,
                k: Some(2),
            },
        )
        .unwrap();
    let ids: Vec<String> = t.items.iter().map(|i| i.id.clone()).collect();
    assert_eq!(ids.len(), 6);
    let mut unique = ids.clone();
    unique.dedup();
    assert_eq!(unique.len(), 6);
    let view = state.augment("v", AugmentRequest { ids, label: Some(2) }).unwrap();
    let after = read(state.predictions("v", Split::Train, None).unwrap());
    assert_ne!(before["dataset_version"], after["dataset_version"]);
    assert_eq!(after["dataset_version"], view.dataset_version.as_str());
    assert_eq!(
        after["records"].as_array().unwrap().len(),
        before["records"].as_array().unwrap().len() + 6
    );

    // Translating the same sources again picks fresh indices.
    let again = state
        .translate(
            "v",
            TranslateRequest {
                source_ids: vec!["train-00000".into()],
                cluster: 0,
                count: 1,
                k: Some(2),
            },
        )
        .unwrap();
    assert_eq!(again.items[0].id, "train-00000~c0~3");
    let past = state.dataset_at("v", &before["dataset_version"].as_str().unwrap()).unwrap();
    assert_eq!(past.version(), before["dataset_version"].as_str().unwrap());
}
