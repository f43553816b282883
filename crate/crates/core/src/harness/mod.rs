//! Experiment orchestration: pretraining, the session loop, per-session
//! evaluation, run directories and the method matrix.

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_bank, load_denoiser, save_bank, save_denoiser};
use crate::concepts::{build_prompt_sets, make_fewshot, sample_concept, FewShotDataset};
use crate::config::{ExperimentConfig, Method, ResolvedSession};
use crate::error::{Error, Result};
use crate::eval::{image_alignment, run_pcf_protocol, text_alignment, AlignmentRecord, ProbeClassifier};
use crate::icgen::{icgen_generate, ContextBank};
use crate::latent::Latent;
use crate::nn::Denoiser;
use crate::rng::{indexed_stream, stream};
use crate::sampler::sample;
use crate::schedule::NoiseSchedule;
use crate::trainer::{pretrain_base, train_session, SessionReport, SessionState};

pub use report::{emit_report, ReportFiles};

/// Points per (session, token) kept for scatter plots.
const SCATTER_POINTS: usize = 200;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub session: usize,
    /// Token id, or `all` for the session's aggregate IAD row.
    pub token: String,
    pub method: String,
    #[serde(rename = "IA")]
    pub ia: Option<f64>,
    #[serde(rename = "TA")]
    pub ta: Option<f64>,
    #[serde(rename = "IAD")]
    pub iad: Option<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub pretrain_s: f64,
    pub sessions_s: Vec<f64>,
    pub eval_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub config_path: PathBuf,
    /// Index 0 holds the pretrained model.
    pub checkpoints: Vec<PathBuf>,
    pub bank: PathBuf,
    pub metrics_csv: PathBuf,
    pub loss_traces: Vec<PathBuf>,
    pub samples_csv: PathBuf,
    pub completed: bool,
    pub failure: Option<String>,
    pub timings: Timings,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest {}: {e}", path.display())))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }
}

/// Everything a run produces, kept in memory as well as on disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub rows: Vec<MetricRow>,
    pub reports: Vec<SessionReport>,
    /// `(session, token, point)` scatter samples.
    pub samples: Vec<(usize, usize, Latent)>,
    pub final_model: Option<Denoiser>,
    pub bank: ContextBank,
}

impl RunOutcome {
    /// Rows of one session with a numeric token.
    pub fn token_rows(&self, session: usize) -> impl Iterator<Item = (usize, &MetricRow)> {
        self.rows
            .iter()
            .filter(move |r| r.session == session)
            .filter_map(|r| r.token.parse::<usize>().ok().map(|t| (t, r)))
    }

    /// Aggregate IAD per session, from session 2 on.
    pub fn iad_series(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.token == "all")
            .filter_map(|r| r.iad.map(|v| (r.session, v)))
            .collect()
    }

    /// Mean base-token TA at `session`.
    pub fn mean_ta(&self, session: usize) -> Option<f64> {
        let tas: Vec<f64> = self.token_rows(session).filter_map(|(_, r)| r.ta).collect();
        (!tas.is_empty()).then(|| tas.iter().sum::<f64>() / tas.len() as f64)
    }

    pub fn ia(&self, session: usize, token: usize) -> Option<f64> {
        self.token_rows(session).find(|(t, _)| *t == token).and_then(|(_, r)| r.ia)
    }

    pub fn last_session(&self) -> usize {
        self.rows.iter().map(|r| r.session).max().unwrap_or(0)
    }
}

/// Supplies each session's K-shot set. The session loop asks for session
/// `i`'s data only after session `i − 1` has finished and its set has been
/// consumed, and nothing else reaches the trainer.
pub trait SessionFeed {
    fn next_session(&mut self, session: &ResolvedSession) -> Result<FewShotDataset>;
}

/// Draws each session's K-shot set from its concept with a per-session
/// stream, so every method sees the same data for a given seed.
pub struct SyntheticFeed {
    pub seed: u64,
}

impl SessionFeed for SyntheticFeed {
    fn next_session(&mut self, session: &ResolvedSession) -> Result<FewShotDataset> {
        make_fewshot(
            &session.spec,
            session.k,
            &mut indexed_stream(self.seed, "fewshot", session.index),
        )
    }
}

/// Per-seed state shared by every method: the pretrained model, the frozen
/// probe and the held-out reference sets.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub seed: u64,
    pub model: Denoiser,
    pub probe: ProbeClassifier,
    pub references: BTreeMap<usize, Vec<Latent>>,
    pub pretrain_s: f64,
}

pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<Pretrained> {
    let started = Instant::now();
    let sched = config.train_schedule()?;
    let model = pretrain_base(
        config.model.clone(),
        &config.pretrain,
        &config.world.base,
        &sched,
        &mut stream(seed, "pretrain"),
    )?;
    let pretrain_s = started.elapsed().as_secs_f64();
    let probe = ProbeClassifier::train(&config.world.base, &config.eval.probe, &mut stream(seed, "probe"))?;
    let mut references = BTreeMap::new();
    let specs = config
        .world
        .base
        .iter()
        .cloned()
        .chain(config.sessions()?.into_iter().map(|s| s.spec));
    for spec in specs {
        let refs = sample_concept(&spec, config.eval.n_reference, &mut indexed_stream(seed, "reference", spec.token))?;
        references.insert(spec.token, refs);
    }
    Ok(Pretrained {
        seed,
        model,
        probe,
        references,
        pretrain_s,
    })
}

pub fn run_id(method: Method, seed: u64) -> String {
    format!("{method}-seed{seed}")
}

struct Evaluator<'a> {
    config: &'a ExperimentConfig,
    pre: &'a Pretrained,
    sched: NoiseSchedule,
    sessions: Vec<ResolvedSession>,
}

/// Generated sets and alignment values of one token at one session.
struct TokenEval {
    token: usize,
    ia: f64,
    ta: Option<f64>,
    points: Vec<Latent>,
}

impl Evaluator<'_> {
    fn generate(&self, model: &Denoiser, bank: Option<&ContextBank>, session: usize, token: usize) -> Result<Vec<Latent>> {
        let mut rng = stream(self.pre.seed, &format!("eval/{session}/{token}"));
        let (n, g) = (self.config.eval.n_samples, self.config.icgen.guidance);
        match bank {
            Some(bank) => icgen_generate(model, bank, token, self.config.icgen.strength, &self.sched, g, &mut rng, n),
            None => sample(model, token, &self.sched, g, &mut rng, n),
        }
    }

    fn reference(&self, token: usize) -> Result<&[Latent]> {
        self.pre
            .references
            .get(&token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Protocol(format!("no reference set for token {token}")))
    }

    fn eval_token(&self, model: &Denoiser, bank: Option<&ContextBank>, session: usize, token: usize, base: bool) -> Result<TokenEval> {
        let points = self.generate(model, bank, session, token)?;
        let ia = image_alignment(&points, self.reference(token)?)?;
        let ta = if base {
            Some(text_alignment(&self.pre.probe, &points, token)?)
        } else {
            None
        };
        Ok(TokenEval { token, ia, ta, points })
    }

    /// Base tokens evaluated at `session`: the bases of the sessions seen so
    /// far, and every base token at session 0 and at the last session.
    fn base_tokens_at(&self, session: usize) -> Vec<usize> {
        if session == 0 || session == self.sessions.len() {
            return self.config.base_tokens();
        }
        let mut tokens: Vec<usize> = self.sessions[..session].iter().map(|s| s.base_token).collect();
        tokens.sort_unstable();
        tokens.dedup();
        tokens
    }

    fn base_evals(&self, model: &Denoiser, session: usize) -> Result<Vec<TokenEval>> {
        self.base_tokens_at(session)
            .into_iter()
            .map(|t| self.eval_token(model, None, session, t, true))
            .collect()
    }

    /// Session-token evaluations for one method at `session`.
    fn session_evals(&self, method: Method, model: &Denoiser, bank: &ContextBank, session: usize) -> Result<Vec<TokenEval>> {
        self.sessions[..session]
            .iter()
            .map(|s| {
                let use_bank = method.uses_icgen() && (s.index < session || self.config.icgen.current_session);
                self.eval_token(model, use_bank.then_some(bank), session, s.spec.token, false)
            })
            .collect()
    }
}

/// Accumulates one method's rows, history and scatter samples.
struct MethodLog {
    method: Method,
    run_id: String,
    seed: u64,
    rows: Vec<MetricRow>,
    history: Vec<AlignmentRecord>,
    samples: Vec<(usize, usize, Latent)>,
}

impl MethodLog {
    fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            run_id: run_id(method, seed),
            seed,
            rows: Vec::new(),
            history: Vec::new(),
            samples: Vec::new(),
        }
    }

    fn row(&self, session: usize, token: String, ia: Option<f64>, ta: Option<f64>, iad: Option<f64>, n: usize) -> MetricRow {
        MetricRow {
            run_id: self.run_id.clone(),
            seed: self.seed,
            session,
            token,
            method: self.method.name().into(),
            ia,
            ta,
            iad,
            n_samples: n,
        }
    }

    fn record(&mut self, session: usize, sessions: &[ResolvedSession], evals: &[&TokenEval], n: usize) -> Result<()> {
        let learned_at = |token: usize| sessions.iter().find(|s| s.spec.token == token).map(|s| s.index);
        for e in evals {
            self.history.push(AlignmentRecord {
                token: e.token,
                learned_at: learned_at(e.token),
                session,
                ia: Some(e.ia),
                ta: e.ta,
                n_samples: n,
            });
        }
        let pcf = if session >= 2 {
            Some(run_pcf_protocol(&self.history)?)
        } else {
            None
        };
        let mut evals: Vec<&&TokenEval> = evals.iter().collect();
        evals.sort_by_key(|e| e.token);
        for e in evals {
            let iad = pcf.as_ref().and_then(|p| {
                p.per_concept
                    .iter()
                    .find(|&&(t, s, _)| t == e.token && s == session)
                    .map(|c| c.2)
            });
            self.rows.push(self.row(session, e.token.to_string(), Some(e.ia), e.ta, iad, n));
            self.samples
                .extend(e.points.iter().take(SCATTER_POINTS).map(|p| (session, e.token, p.clone())));
        }
        if let Some(p) = pcf {
            let v = p.iad.iter().find(|(s, _)| *s == session).map(|x| x.1);
            self.rows.push(self.row(session, "all".into(), None, None, v, n));
        }
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceCsvRow {
    step: usize,
    #[serde(rename = "L_DM")]
    l_dm: f64,
    #[serde(rename = "L_KD")]
    l_kd: f64,
    #[serde(rename = "L_train")]
    l_train: f64,
}

#[derive(Serialize, Deserialize)]
struct SampleCsvRow {
    session: usize,
    token: usize,
    x: f64,
    y: f64,
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(out: &Path, run_id: &str) -> Result<Self> {
        let root = out.join("runs").join(run_id);
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("loss"))?;
        std::fs::create_dir_all(root.join("report"))?;
        Ok(Self { root })
    }

    fn checkpoint(&self, session: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("session_{session}.lfsd"))
    }

    fn trace(&self, session: usize) -> PathBuf {
        self.root.join("loss").join(format!("session_{session}.csv"))
    }
}

/// Trains one group of methods that share a training recipe and evaluates
/// each of them after every session.
fn run_group(
    config: &ExperimentConfig,
    pre: &Pretrained,
    methods: &[Method],
    out: Option<&Path>,
    feed: &mut dyn SessionFeed,
) -> Result<Vec<RunOutcome>> {
    let started = Instant::now();
    let seed = pre.seed;
    let key = methods[0].training_key();
    debug_assert!(methods.iter().all(|m| m.training_key() == key));
    let sched = config.train_schedule()?;
    let distill = config.distill_schedule()?;
    let sessions = config.sessions()?;
    let eval = Evaluator {
        config,
        pre,
        sched: sched.clone(),
        sessions: sessions.clone(),
    };
    let dirs = match out {
        Some(out) => Some(
            methods
                .iter()
                .map(|&m| RunDir::create(out, &run_id(m, seed)))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let mut logs: Vec<MethodLog> = methods.iter().map(|&m| MethodLog::new(m, seed)).collect();
    let mut timings = Timings {
        pretrain_s: pre.pretrain_s,
        ..Timings::default()
    };

    let eval_started = Instant::now();
    let base0 = eval.base_evals(&pre.model, 0)?;
    for log in &mut logs {
        log.record(0, &sessions, &base0.iter().collect::<Vec<_>>(), config.eval.n_samples)?;
    }
    timings.eval_s += eval_started.elapsed().as_secs_f64();
    if let Some(dirs) = &dirs {
        for d in dirs {
            save_denoiser(&pre.model, &d.checkpoint(0))?;
        }
    }

    let mut state = SessionState::new(pre.model.clone());
    let mut reports = Vec::new();
    let mut failure = None;
    let base_tokens = config.base_tokens();
    let pairs: Vec<(usize, usize)> = sessions.iter().map(|s| (s.spec.token, s.base_token)).collect();
    let train_config = config.train_config(key, seed);
    for session in &sessions {
        let session_started = Instant::now();
        let fewshot = feed.next_session(session)?;
        let prompts = build_prompt_sets(session.index, &base_tokens, &pairs)?;
        // The session token starts from its base concept's embedding, the
        // analog of prompting "V* <class>".
        state.model.copy_token_embedding(session.base_token, session.spec.token)?;
        let mut rng = indexed_stream(seed, "train", session.index);
        let trained = train_session(state.clone(), fewshot, &prompts, &train_config, &sched, &distill, &mut rng);
        let (next, report) = match trained {
            Ok(v) => v,
            Err(e @ Error::Training { .. }) => {
                log::warn!("{} seed {seed}: session {} failed: {e}", key, session.index);
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        state = next;
        timings.sessions_s.push(session_started.elapsed().as_secs_f64());

        let eval_started = Instant::now();
        let base = eval.base_evals(&state.model, session.index)?;
        for log in &mut logs {
            let own = eval.session_evals(log.method, &state.model, &state.context_bank, session.index)?;
            let all: Vec<&TokenEval> = own.iter().chain(&base).collect();
            log.record(session.index, &sessions, &all, config.eval.n_samples)?;
        }
        timings.eval_s += eval_started.elapsed().as_secs_f64();
        if let Some(dirs) = &dirs {
            for d in dirs {
                save_denoiser(&state.model, &d.checkpoint(session.index))?;
                let trace: Vec<TraceCsvRow> = report
                    .trace
                    .iter()
                    .map(|r| TraceCsvRow {
                        step: r.step,
                        l_dm: r.l_dm,
                        l_kd: r.l_kd,
                        l_train: r.l_train,
                    })
                    .collect();
                write_csv(&d.trace(session.index), &trace)?;
            }
        }
        reports.push(report);
    }
    timings.total_s = started.elapsed().as_secs_f64() + pre.pretrain_s;

    let completed_sessions = reports.len();
    let mut outcomes = Vec::new();
    for (i, log) in logs.into_iter().enumerate() {
        let dir = dirs.as_ref().map(|d| d[i].root.clone()).unwrap_or_default();
        let manifest = RunManifest {
            run_id: log.run_id.clone(),
            method: log.method,
            seed,
            config_hash: config.hash(),
            config_path: dir.join("config.toml"),
            checkpoints: (0..=completed_sessions)
                .map(|s| dir.join("checkpoints").join(format!("session_{s}.lfsd")))
                .collect(),
            bank: dir.join("bank.lfsd"),
            metrics_csv: dir.join("metrics.csv"),
            loss_traces: (1..=completed_sessions)
                .map(|s| dir.join("loss").join(format!("session_{s}.csv")))
                .collect(),
            samples_csv: dir.join("samples.csv"),
            completed: failure.is_none(),
            failure: failure.clone(),
            timings: timings.clone(),
            run_dir: dir,
        };
        if dirs.is_some() {
            std::fs::write(&manifest.config_path, config.to_toml())?;
            save_bank(&state.context_bank, &manifest.bank)?;
            write_csv(&manifest.metrics_csv, &log.rows)?;
            let samples: Vec<SampleCsvRow> = log
                .samples
                .iter()
                .map(|(session, token, p)| SampleCsvRow {
                    session: *session,
                    token: *token,
                    x: p[0],
                    y: p[1],
                })
                .collect();
            write_csv(&manifest.samples_csv, &samples)?;
            let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(manifest.manifest_path(), json)?;
        }
        outcomes.push(RunOutcome {
            manifest,
            rows: log.rows,
            reports: reports.clone(),
            samples: log.samples,
            final_model: failure.is_none().then(|| state.model.clone()),
            bank: state.context_bank.clone(),
        });
    }
    Ok(outcomes)
}

/// Pretrains, runs every session of `method` and evaluates after each one.
/// With `out` set, artifacts go to `out/runs/<run_id>/`.
pub fn run_experiment(config: &ExperimentConfig, method: Method, seed: u64, out: Option<&Path>) -> Result<RunOutcome> {
    let pre = prepare_seed(config, seed)?;
    run_with_feed(config, &pre, method, out, &mut SyntheticFeed { seed })
}

/// Runs one method over an already-prepared seed with a custom data feed.
pub fn run_with_feed(
    config: &ExperimentConfig,
    pre: &Pretrained,
    method: Method,
    out: Option<&Path>,
    feed: &mut dyn SessionFeed,
) -> Result<RunOutcome> {
    Ok(run_group(config, pre, &[method], out, feed)?.remove(0))
}

/// Runs `jobs` on `workers` threads and returns results in job order.
fn parallel_map<T: Sync, R: Send>(jobs: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.0);
    results.into_iter().map(|r| r.1).collect()
}

/// The method matrix: every method for every seed. Pretraining is shared per
/// seed and methods that train identically share one training run. Returns
/// outcomes ordered by seed, then by position in `methods`.
pub fn run_matrix(
    config: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    out: Option<&Path>,
    workers: usize,
) -> Result<Vec<RunOutcome>> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("the matrix needs at least one method and one seed".into()));
    }
    let pretrained = parallel_map(seeds, workers, |&seed| prepare_seed(config, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<Method, Vec<Method>> = BTreeMap::new();
    for &m in methods {
        let g = groups.entry(m.training_key()).or_default();
        if !g.contains(&m) {
            g.push(m);
        }
    }
    let jobs: Vec<(usize, Vec<Method>)> = (0..seeds.len())
        .flat_map(|i| groups.values().map(move |g| (i, g.clone())))
        .collect();
    let results = parallel_map(&jobs, workers, |(i, group)| {
        let pre = &pretrained[*i];
        run_group(config, pre, group, out, &mut SyntheticFeed { seed: pre.seed })
    });
    let mut outcomes = Vec::new();
    for r in results {
        outcomes.extend(r?);
    }
    let order = |o: &RunOutcome| {
        let s = seeds.iter().position(|&s| s == o.manifest.seed).unwrap_or(usize::MAX);
        let m = methods.iter().position(|&m| m == o.manifest.method).unwrap_or(usize::MAX);
        (s, m)
    };
    outcomes.sort_by_key(order);
    Ok(outcomes)
}

/// Re-evaluates a finished run from its checkpoints and bank.
pub fn evaluate_run(config: &ExperimentConfig, manifest: &RunManifest) -> Result<Vec<MetricRow>> {
    if manifest.config_hash != config.hash() {
        return Err(Error::Protocol(format!(
            "run {} was produced by a different configuration",
            manifest.run_id
        )));
    }
    let seed = manifest.seed;
    let sessions = config.sessions()?;
    let mut references = BTreeMap::new();
    let specs = config.world.base.iter().cloned().chain(sessions.iter().map(|s| s.spec.clone()));
    for spec in specs {
        let refs = sample_concept(&spec, config.eval.n_reference, &mut indexed_stream(seed, "reference", spec.token))?;
        references.insert(spec.token, refs);
    }
    let pre = Pretrained {
        seed,
        model: load_denoiser(&manifest.checkpoints[0])?,
        probe: ProbeClassifier::train(&config.world.base, &config.eval.probe, &mut stream(seed, "probe"))?,
        references,
        pretrain_s: 0.0,
    };
    let bank = load_bank(&manifest.bank)?;
    let eval = Evaluator {
        config,
        pre: &pre,
        sched: config.train_schedule()?,
        sessions: sessions.clone(),
    };
    let mut log = MethodLog::new(manifest.method, seed);
    for (session, path) in manifest.checkpoints.iter().enumerate() {
        let model = load_denoiser(path)?;
        let mut evals = if session == 0 {
            Vec::new()
        } else {
            eval.session_evals(manifest.method, &model, &bank, session)?
        };
        evals.extend(eval.base_evals(&model, session)?);
        log.record(session, &sessions, &evals.iter().collect::<Vec<_>>(), config.eval.n_samples)?;
    }
    Ok(log.rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_csv(path, rows)
}
