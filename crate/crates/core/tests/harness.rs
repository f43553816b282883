mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, Weak};

use lifelong_diffusion::concepts::FewShotDataset;
use lifelong_diffusion::config::{load_config, ExperimentConfig, Method, ResolvedSession};
use lifelong_diffusion::harness::{
    emit_report, evaluate_run, prepare_seed, read_metrics, run_experiment, run_matrix, run_with_feed, SessionFeed,
    SyntheticFeed,
};
use lifelong_diffusion::{Error, Latent};

fn smoke() -> ExperimentConfig {
    load_config(&common::workspace_file("configs/smoke.toml")).unwrap()
}

#[test]
fn a_run_writes_every_artifact() {
    let config = smoke();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&config, Method::Ours, 0, Some(dir.path())).unwrap();
    let m = &outcome.manifest;
    let n = config.world.sessions.len();
    assert!(m.completed && m.failure.is_none());
    assert_eq!(m.checkpoints.len(), n + 1);
    assert_eq!(m.loss_traces.len(), n);
    for p in m.checkpoints.iter().chain(&m.loss_traces).chain([&m.bank, &m.metrics_csv, &m.samples_csv, &m.config_path]) {
        assert!(p.is_file(), "{}", p.display());
    }
    assert!(m.run_dir.join("report").is_dir());
    assert_eq!(m.config_hash, config.hash());
    assert_eq!(outcome.bank.len(), n);

    // Every (session, token) the test prompts require has a row.
    let rows = read_metrics(&m.metrics_csv).unwrap();
    assert_eq!(rows, outcome.rows);
    let have: BTreeSet<(usize, String)> = rows.iter().map(|r| (r.session, r.token.clone())).collect();
    for s in config.sessions().unwrap() {
        for later in s.index..=n {
            assert!(have.contains(&(later, s.spec.token.to_string())), "session {later} token {}", s.spec.token);
        }
        assert!(have.contains(&(s.index, s.base_token.to_string())));
    }
    for t in config.base_tokens() {
        assert!(have.contains(&(0, t.to_string())) && have.contains(&(n, t.to_string())));
    }
    for s in 2..=n {
        assert!(have.contains(&(s, "all".to_string())));
    }
}

#[test]
fn reevaluation_reproduces_the_metrics() {
    let config = smoke();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&config, Method::OursNoIcgen, 1, Some(dir.path())).unwrap();
    assert_eq!(evaluate_run(&config, &outcome.manifest).unwrap(), outcome.rows);

    let mut other = config.clone();
    other.train.lr *= 2.0;
    assert!(matches!(evaluate_run(&other, &outcome.manifest), Err(Error::Protocol(_))));
}

#[test]
fn same_seed_gives_identical_metrics_bytes_across_runs_and_workers() {
    let config = smoke();
    let methods = [Method::PlainFt, Method::Ours];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_matrix(&config, &methods, &[3, 4], Some(a.path()), 1).unwrap();
    run_matrix(&config, &methods, &[3, 4], Some(b.path()), 4).unwrap();
    let c = tempfile::tempdir().unwrap();
    run_experiment(&config, Method::Ours, 4, Some(c.path())).unwrap();
    for id in ["plain_ft-seed3", "ours-seed3", "plain_ft-seed4", "ours-seed4"] {
        let x = std::fs::read(a.path().join("runs").join(id).join("metrics.csv")).unwrap();
        let y = std::fs::read(b.path().join("runs").join(id).join("metrics.csv")).unwrap();
        assert_eq!(x, y, "{id}");
    }
    let x = std::fs::read(a.path().join("runs/ours-seed4/metrics.csv")).unwrap();
    let z = std::fs::read(c.path().join("runs/ours-seed4/metrics.csv")).unwrap();
    assert_eq!(x, z);
}

#[test]
fn the_matrix_yields_a_manifest_per_method_and_seed_and_a_merged_report() {
    let config = smoke();
    let dir = tempfile::tempdir().unwrap();
    let seeds = [0, 1, 2, 3, 4];
    let outcomes = run_matrix(&config, &Method::MATRIX, &seeds, Some(dir.path()), 2).unwrap();
    assert_eq!(outcomes.len(), 20);
    let ids: BTreeSet<_> = outcomes.iter().map(|o| o.manifest.run_id.clone()).collect();
    assert_eq!(ids.len(), 20);

    let manifests: Vec<_> = outcomes.iter().map(|o| o.manifest.clone()).collect();
    let files = emit_report(&manifests, &dir.path().join("report")).unwrap();
    let merged = read_metrics(&files.merged).unwrap();
    let methods: BTreeSet<_> = merged.iter().map(|r| r.method.clone()).collect();
    assert_eq!(methods.len(), 4);

    let iad = std::fs::read_to_string(&files.iad_series).unwrap();
    let header = iad.lines().next().unwrap();
    let n = config.world.sessions.len();
    let want: Vec<String> = ["method".to_string(), "seed".to_string()]
        .into_iter()
        .chain((2..=n).map(|s| format!("iad_s{s}")))
        .collect();
    assert_eq!(header, want.join(","));
    assert_eq!(iad.lines().count(), 21);
    for f in [&files.summary, &files.loss_traces, &files.scatter] {
        assert!(std::fs::metadata(f).unwrap().len() > 0);
    }
    assert_eq!(files.svgs.len(), 20);

    // ICGen is evaluation-only: both variants share their training run.
    let pick = |m: Method, seed: u64| outcomes.iter().find(|o| o.manifest.method == m && o.manifest.seed == seed).unwrap();
    let (a, b) = (pick(Method::Ours, 2), pick(Method::OursNoIcgen, 2));
    assert_eq!(a.final_model.as_ref().unwrap().params(), b.final_model.as_ref().unwrap().params());
}

#[test]
fn reports_need_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_report(&[], dir.path()), Err(Error::Usage(_))));
}

#[test]
fn divergence_marks_the_run_failed() {
    let mut config = smoke();
    config.train.lr = 1e300;
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&config, Method::Ours, 0, Some(dir.path())).unwrap();
    assert!(!outcome.manifest.completed);
    assert!(outcome.manifest.failure.as_deref().unwrap().contains("diverged"));
    assert!(outcome.final_model.is_none());
    assert!(outcome.manifest.manifest_path().is_file());
}

/// Hands out each session's data and checks that every earlier session's
/// samples have been released by the time the next one is requested.
struct Watching {
    inner: SyntheticFeed,
    earlier: Vec<Weak<[Latent]>>,
    requests: usize,
}

impl SessionFeed for Watching {
    fn next_session(&mut self, session: &ResolvedSession) -> lifelong_diffusion::Result<FewShotDataset> {
        for (i, w) in self.earlier.iter().enumerate() {
            assert!(w.upgrade().is_none(), "session {} data still reachable at session {}", i + 1, session.index);
        }
        let data = self.inner.next_session(session)?;
        self.earlier.push(Arc::downgrade(data.shared_samples()));
        self.requests += 1;
        Ok(data)
    }
}

#[test]
fn earlier_session_data_is_released_before_the_next_session() {
    let config = smoke();
    let pre = prepare_seed(&config, 0).unwrap();
    let mut feed = Watching {
        inner: SyntheticFeed { seed: 0 },
        earlier: Vec::new(),
        requests: 0,
    };
    for method in [Method::Ours, Method::Lwf, Method::PlainFt] {
        feed.earlier.clear();
        run_with_feed(&config, &pre, method, None, &mut feed).unwrap();
        assert!(feed.earlier.iter().all(|w| w.upgrade().is_none()));
    }
    assert_eq!(feed.requests, 3 * config.world.sessions.len());
}
