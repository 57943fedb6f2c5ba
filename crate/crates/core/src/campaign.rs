//! Test campaigns: the synchronous sim → augment → validate → agent loop,
//! its TOML configuration and nominal baseline handling.

use crate::agents::{AgentError, AgentSpec};
use crate::augment::domain::DomainSpec;
use crate::augment::remote::RemoteAugmenter;
use crate::augment::{AugmentError, AugmentParams, Augmenter, MockAugmenter, MockStrategy};
use crate::dataset::{sha256_hex, DatasetError, DatasetWriter, EntryLabels};
use crate::distill::{Checkpoint, DistillError, StudentAugmenter};
use crate::exec::Exec;
use crate::image::{ClassId, SemanticMask};
use crate::metrics::{RunLog, RunLogWriter, RunMeta, StepFlags, StepRecord, StepTimings};
use crate::metrics::{self, MetricsError, PenaltyCoefficients, RunReport};
use crate::palette::Palette;
use crate::protocol::ClientConfig;
use crate::rng;
use crate::sim::world::RESET_ADVANCE_M;
use crate::sim::{Frame, Scenario, SimError, TrackModel, World};
use crate::validator::{
    augment_validated, validate, DomainSegmenter, PaletteSegmenter, RoadCategory, ValidatorConfig, ValidatorError,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

pub const RUN_LOG: &str = "run.jsonl";
pub const REPORT: &str = "report.json";
pub const BASELINE_DIR: &str = "baselines";
/// Sidecar holding the sha256 of a cached baseline log.
pub const HASH_SUFFIX: &str = "sha256";

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}", path = .path.display())]
    Parse { path: PathBuf, message: String },
    #[error("stale baseline {path}: recorded hash {expected}, file hashes to {actual}", path = .path.display())]
    StaleBaseline {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<CampaignError>,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Validator(#[from] ValidatorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    None,
    Instruction,
    Inpaint,
    Refine,
    Student,
    Remote,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::None,
        StrategyKind::Instruction,
        StrategyKind::Inpaint,
        StrategyKind::Refine,
        StrategyKind::Student,
        StrategyKind::Remote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Instruction => "instruction",
            StrategyKind::Inpaint => "inpaint",
            StrategyKind::Refine => "refine",
            StrategyKind::Student => "student",
            StrategyKind::Remote => "remote",
        }
    }

    fn mock(self) -> Option<MockStrategy> {
        match self {
            StrategyKind::Instruction => Some(MockStrategy::Instruction),
            StrategyKind::Inpaint => Some(MockStrategy::Inpaint),
            StrategyKind::Refine => Some(MockStrategy::Refine),
            _ => None,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = CampaignError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CampaignError::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    /// Nearest segment between palette and domain target colours.
    #[default]
    Domain,
    Palette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidatorSettings {
    pub enabled: bool,
    pub threshold: f64,
    pub max_retries: u32,
    /// Empty means road, or the urban set on urban scenarios.
    pub checked_classes: Vec<ClassId>,
    pub segmenter: SegmenterKind,
}

impl Default for ValidatorSettings {
    fn default() -> Self {
        ValidatorSettings {
            enabled: true,
            threshold: 0.9,
            max_retries: 10,
            checked_classes: Vec::new(),
            segmenter: SegmenterKind::Domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// Preset name (`lane_keeping`, `urban`) or a scenario TOML path.
    pub scenario: String,
    pub agent: AgentSpec,
    pub strategy: StrategyKind,
    /// Builtin name or domain file path.
    pub domain: String,
    pub params: AugmentParams,
    pub validator: ValidatorSettings,
    pub n_steps: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub baseline: Option<PathBuf>,
    /// Record or reuse a cached nominal run under `output_dir/baselines`
    /// when `baseline` is not set.
    pub auto_baseline: bool,
    /// Student checkpoint JSON (strategy `student`).
    pub checkpoint: Option<PathBuf>,
    /// Augmentation server (strategy `remote`).
    pub endpoint: Option<String>,
    /// Strategy name sent to the server.
    pub remote_strategy: String,
    pub connect_timeout_ms: u64,
    pub io_timeout_ms: u64,
    pub preserved: Vec<ClassId>,
    /// Overrides the scenario's emulated per-step simulator cost.
    pub step_latency_ms: Option<f64>,
    pub parallel: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            scenario: "lane_keeping".into(),
            agent: AgentSpec::pure_pursuit(),
            strategy: StrategyKind::None,
            domain: "sunny".into(),
            params: AugmentParams::default(),
            validator: ValidatorSettings::default(),
            n_steps: 2000,
            seed: 0,
            output_dir: PathBuf::from("out"),
            baseline: None,
            auto_baseline: false,
            checkpoint: None,
            endpoint: None,
            remote_strategy: "instruction".into(),
            connect_timeout_ms: 5_000,
            io_timeout_ms: 120_000,
            preserved: vec![ClassId::ROAD],
            step_latency_ms: None,
            parallel: true,
        }
    }
}

fn resolve_against(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, CampaignError> {
        toml::from_str(text).map_err(|e| CampaignError::Config(e.to_string()))
    }

    /// Parse a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: CampaignConfig = toml::from_str(&text).map_err(|e| CampaignError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = resolve_against(base, &cfg.output_dir);
        for p in [&mut cfg.baseline, &mut cfg.checkpoint].into_iter().flatten() {
            *p = resolve_against(base, p);
        }
        if Scenario::preset(&cfg.scenario).is_none() {
            cfg.scenario = resolve_against(base, Path::new(&cfg.scenario)).display().to_string();
        }
        if DomainSpec::builtin(&cfg.domain).is_none() {
            cfg.domain = resolve_against(base, Path::new(&cfg.domain)).display().to_string();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// Scenario with this config's overrides applied.
    pub fn load_scenario(&self) -> Result<Scenario, CampaignError> {
        let mut sc = match Scenario::preset(&self.scenario) {
            Some(sc) => sc,
            None => {
                let path = Path::new(&self.scenario);
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                Scenario::from_toml(&text)?
            }
        };
        if let Some(ms) = self.step_latency_ms {
            sc.simulation.step_latency_ms = ms;
        }
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        self.agent.validate()?;
        self.params.validate()?;
        if self.n_steps == 0 {
            return Err(CampaignError::Config("n_steps must be positive".into()));
        }
        if let Some(ms) = self.step_latency_ms {
            if !(ms.is_finite() && ms >= 0.0) {
                return Err(CampaignError::Config("step_latency_ms must be non-negative".into()));
            }
        }
        match self.strategy {
            StrategyKind::Student => match &self.checkpoint {
                None => return Err(CampaignError::Config("strategy student needs a checkpoint".into())),
                Some(p) if !p.exists() => {
                    return Err(CampaignError::Config(format!("checkpoint {} not found", p.display())))
                }
                _ => {}
            },
            StrategyKind::Remote if self.endpoint.is_none() => {
                return Err(CampaignError::Config("strategy remote needs an endpoint".into()))
            }
            _ => {}
        }
        if let Some(p) = &self.baseline {
            if !p.exists() {
                return Err(CampaignError::Config(format!("baseline {} not found", p.display())));
            }
        }
        if Scenario::preset(&self.scenario).is_none() && !Path::new(&self.scenario).exists() {
            return Err(CampaignError::Config(format!("scenario {} not found", self.scenario)));
        }
        Ok(())
    }

    fn validator_config(&self, domain: &DomainSpec, urban: bool) -> ValidatorConfig {
        let v = &self.validator;
        let checked = if !v.checked_classes.is_empty() {
            v.checked_classes.clone()
        } else if urban {
            ClassId::URBAN_CHECKED.to_vec()
        } else {
            vec![ClassId::ROAD]
        };
        let seg: Arc<dyn crate::validator::Segmenter> = match v.segmenter {
            SegmenterKind::Domain => {
                Arc::new(DomainSegmenter::new(domain, &Palette::simulator()).with_exec(self.exec()))
            }
            SegmenterKind::Palette => Arc::new(PaletteSegmenter {
                palette: Palette::simulator(),
                exec: self.exec(),
            }),
        };
        ValidatorConfig {
            threshold: v.threshold,
            checked_classes: checked,
            max_retries: v.max_retries,
            segmenter: seg,
        }
    }

    fn build_augmenter(&self, domain: &DomainSpec) -> Result<Option<Box<dyn Augmenter>>, CampaignError> {
        let exec = self.exec();
        Ok(match self.strategy {
            StrategyKind::None => None,
            StrategyKind::Instruction | StrategyKind::Inpaint | StrategyKind::Refine => {
                let m = self.strategy.mock().expect("mock strategy");
                Some(Box::new(
                    MockAugmenter::new(m, domain.clone()).preserving(&self.preserved).with_exec(exec),
                ))
            }
            StrategyKind::Student => {
                let path = self.checkpoint.as_ref().expect("validated");
                let ck = Checkpoint::load(path)?;
                let mut s = StudentAugmenter::new(ck.student);
                s.exec = exec;
                Some(Box::new(s))
            }
            StrategyKind::Remote => {
                let cfg = ClientConfig {
                    connect_timeout: Duration::from_millis(self.connect_timeout_ms),
                    io_timeout: Duration::from_millis(self.io_timeout_ms),
                    ..ClientConfig::default()
                };
                let ep = self.endpoint.as_deref().expect("validated");
                let r = RemoteAugmenter::connect(ep, &self.remote_strategy, &domain.name, cfg)?
                    .preserving(&self.preserved);
                Some(Box::new(r))
            }
        })
    }

    /// The nominal counterpart of this config.
    pub fn nominal(&self) -> CampaignConfig {
        CampaignConfig {
            strategy: StrategyKind::None,
            baseline: None,
            auto_baseline: false,
            checkpoint: None,
            endpoint: None,
            ..self.clone()
        }
    }
}

/// Per-step trace kept in memory for callers that want it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub timings: StepTimings,
    pub valid: Option<bool>,
    pub score: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    #[serde(flatten)]
    pub report: RunReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_sha256: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub log_path: PathBuf,
    pub log: RunLog,
    pub report: CampaignReport,
    pub traces: Vec<StepTrace>,
}

fn meta_for(cfg: &CampaignConfig, sc: &Scenario, world: &World, domain: &DomainSpec) -> RunMeta {
    RunMeta {
        domain: if cfg.strategy == StrategyKind::None {
            "nominal".into()
        } else {
            domain.name.clone()
        },
        strategy: cfg.strategy.name().into(),
        agent: cfg.agent.name().into(),
        seed: cfg.seed,
        n_steps: cfg.n_steps,
        dt: world.dt(),
        scenario: sc.name.clone(),
        scenario_hash: sc.content_hash(),
        n_sectors: world.track().n_sectors(),
        route_length: world.track().total_length(),
        urban: world.settings().urban,
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Run the loop and write `run.jsonl` (plus timings) to `out`; no report.
pub fn run_loop(cfg: &CampaignConfig, out: &Path) -> Result<(RunLog, Vec<StepTrace>), CampaignError> {
    cfg.validate()?;
    let sc = cfg.load_scenario()?;
    let domain = DomainSpec::resolve(&cfg.domain)?;
    let exec = cfg.exec();
    let mut world = World::new(&sc)?.with_exec(exec);
    let mut agent = cfg.agent.build()?;
    let mut augmenter = cfg.build_augmenter(&domain)?;
    let vcfg = cfg.validator_config(&domain, world.settings().urban);
    let meta = meta_for(cfg, &sc, &world, &domain);
    let log_path = out.join(RUN_LOG);
    let mut writer = RunLogWriter::create(&log_path, &meta)?;
    let mut log = RunLog::new(meta);
    let mut traces = Vec::with_capacity(cfg.n_steps as usize);
    let mut progress = 0.0;
    log::info!(
        "campaign: {} / {} / {} for {} steps",
        cfg.strategy,
        domain.name,
        cfg.agent.name(),
        cfg.n_steps
    );

    for _ in 0..cfg.n_steps {
        let step = world.step_index();
        let wrap = |e: CampaignError| CampaignError::Step {
            step,
            source: Box::new(e),
        };
        let t_step = Instant::now();
        let t = Instant::now();
        let frame = world.render();
        let mut sim_ms = ms(t);

        let (mut aug_ms, mut val_ms) = (0.0, 0.0);
        let (mut retries, mut valid, mut score, mut fallback) = (0u32, None, None, false);
        let images = match augmenter.as_deref_mut() {
            None => frame.images(),
            Some(a) => {
                let p = cfg.params.with_seed(rng::derive(cfg.seed, step));
                if cfg.validator.enabled {
                    let v = augment_validated(&frame, a, &p, &vcfg).map_err(|e| wrap(e.into()))?;
                    aug_ms = v.augment_ms;
                    val_ms = v.validate_ms;
                    retries = v.retries;
                    valid = Some(!v.fallback);
                    score = Some(v.verdict.min_score());
                    fallback = v.fallback;
                    v.result.images
                } else {
                    let t = Instant::now();
                    let r = a.augment(&frame, &p).map_err(|e| wrap(e.into()))?;
                    aug_ms = ms(t);
                    r.images
                }
            }
        };

        let t = Instant::now();
        let cmd = agent.act(&images).map_err(|e| wrap(e.into()))?;
        let agent_ms = ms(t);

        let t = Instant::now();
        let before = world.state().s;
        let outcome = world.advance(&cmd).map_err(|e| wrap(e.into()))?;
        sim_ms += ms(t);
        let mut ds = world.track().delta_s(before, world.state().s);
        if !outcome.events.is_empty() {
            // The reset skip is not driven distance.
            ds -= RESET_ADVANCE_M;
        }
        progress += ds.max(0.0);

        let rec = StepRecord {
            step,
            s: frame.state.s,
            cte: frame.state.cte,
            steering: cmd.steering_target,
            speed: frame.state.speed,
            progress,
            retries,
            valid,
            score,
            flags: StepFlags {
                fallback,
                cooldown: outcome.cooldown,
            },
        };
        let timings = StepTimings {
            step,
            sim: sim_ms,
            augment: aug_ms,
            validate: val_ms,
            agent: agent_ms,
            total: ms(t_step),
        };
        writer.step(&rec, &outcome.events, &timings)?;
        log.steps.push(rec);
        log.events.extend(outcome.events);
        log.timings.push(timings);
        traces.push(StepTrace {
            step,
            timings,
            valid,
            score,
            fallback,
        });
    }
    writer.flush()?;
    Ok((log, traces))
}

/// Run a campaign, write `run.jsonl`, the timings sidecar and `report.json`
/// under `output_dir`.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignOutcome, CampaignError> {
    cfg.validate()?;
    let baseline = match (&cfg.baseline, cfg.auto_baseline && cfg.strategy != StrategyKind::None) {
        (Some(p), _) => Some(load_baseline(p)?),
        (None, true) => Some(ensure_baseline(cfg)?),
        (None, false) => None,
    };
    let out = cfg.output_dir.clone();
    let (log, traces) = run_loop(cfg, &out)?;
    let report = metrics::report(&log, baseline.as_ref().map(|b| &b.log), &PenaltyCoefficients::default())?;
    let report = CampaignReport {
        report,
        baseline: baseline.as_ref().map(|b| b.path.clone()),
        baseline_sha256: baseline.map(|b| b.sha256),
    };
    write_report(&out.join(REPORT), &report)?;
    Ok(CampaignOutcome {
        log_path: out.join(RUN_LOG),
        log,
        report,
        traces,
    })
}

pub fn write_report(path: &Path, report: &CampaignReport) -> Result<(), CampaignError> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct Baseline {
    pub path: PathBuf,
    pub sha256: String,
    pub log: RunLog,
}

pub fn hash_path(log: &Path) -> PathBuf {
    let mut name = log.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(HASH_SUFFIX);
    log.with_file_name(name)
}

/// Read a baseline log. When a hash sidecar exists the file must still
/// match it.
pub fn load_baseline(path: &Path) -> Result<Baseline, CampaignError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let actual = sha256_hex(&bytes);
    let hp = hash_path(path);
    if hp.exists() {
        let expected = std::fs::read_to_string(&hp).map_err(io_err(&hp))?.trim().to_string();
        if expected != actual {
            return Err(CampaignError::StaleBaseline {
                path: path.to_path_buf(),
                expected,
                actual,
            });
        }
    }
    let log = RunLog::read(path)?;
    if log.meta.strategy != StrategyKind::None.name() {
        return Err(CampaignError::Config(format!(
            "{} is a {} run, not a baseline",
            path.display(),
            log.meta.strategy
        )));
    }
    Ok(Baseline {
        path: path.to_path_buf(),
        sha256: actual,
        log,
    })
}

/// Cache directory name: one nominal per agent, scenario and seed.
pub fn baseline_key(cfg: &CampaignConfig) -> Result<String, CampaignError> {
    let sc = cfg.load_scenario()?;
    let hash = sc.content_hash();
    Ok(format!("{}-{}-{}-seed{}", cfg.agent.name(), sc.name, &hash[..12], cfg.seed))
}

pub fn baseline_cache_path(cfg: &CampaignConfig) -> Result<PathBuf, CampaignError> {
    Ok(cfg.output_dir.join(BASELINE_DIR).join(baseline_key(cfg)?).join(RUN_LOG))
}

/// Run the nominal counterpart of `cfg` into `dir` and record its hash.
pub fn record_baseline(cfg: &CampaignConfig, dir: &Path) -> Result<Baseline, CampaignError> {
    let nominal = cfg.nominal();
    let (log, _) = run_loop(&nominal, dir)?;
    let path = dir.join(RUN_LOG);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let sha256 = sha256_hex(&bytes);
    let hp = hash_path(&path);
    std::fs::write(&hp, format!("{sha256}\n")).map_err(io_err(&hp))?;
    Ok(Baseline { path, sha256, log })
}

/// Reuse the cached nominal for `cfg` or record it.
pub fn ensure_baseline(cfg: &CampaignConfig) -> Result<Baseline, CampaignError> {
    let path = baseline_cache_path(cfg)?;
    if path.exists() {
        let b = load_baseline(&path)?;
        if b.log.steps.len() as u64 == cfg.n_steps && !b.log.truncated {
            log::info!("reusing baseline {}", path.display());
            return Ok(b);
        }
    }
    let dir = path.parent().expect("cache path has a parent").to_path_buf();
    log::info!("recording baseline into {}", dir.display());
    record_baseline(cfg, &dir)
}

/// Drive `scenario` nominally with the reference agent and call `f` on every
/// `stride`-th frame until it has seen `n` of them.
pub fn for_each_nominal_frame(
    scenario: &Scenario,
    n: usize,
    stride: u64,
    mut f: impl FnMut(usize, &World, &Frame) -> Result<(), CampaignError>,
) -> Result<(), CampaignError> {
    let stride = stride.max(1);
    let mut world = World::new(scenario)?;
    let mut agent = AgentSpec::pure_pursuit().build()?;
    let mut seen = 0;
    while seen < n {
        let frame = world.render();
        if world.step_index() % stride == 0 {
            f(seen, &world, &frame)?;
            seen += 1;
        }
        let cmd = agent.act(&frame.images())?;
        world.advance(&cmd)?;
    }
    Ok(())
}

/// Heading change below which the road ahead counts as straight, rad.
const STRAIGHT_TURN: f64 = 0.15;
pub const CATEGORY_LOOKAHEAD_M: f64 = 12.0;

/// Category of the road over the next `CATEGORY_LOOKAHEAD_M` from `s`.
pub fn road_category(track: &TrackModel, s: f64) -> RoadCategory {
    let a = track.pose_at(s).heading;
    let b = track.pose_at(s + CATEGORY_LOOKAHEAD_M).heading;
    let d = (b - a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    if d.abs() < STRAIGHT_TURN {
        RoadCategory::Straight
    } else if d > 0.0 {
        RoadCategory::Left
    } else {
        RoadCategory::Right
    }
}

/// Ground-truth masks of view 0 labelled by road category, for threshold
/// calibration. Written to `out` when given.
pub fn calibration_set(
    scenario: &Scenario,
    n: usize,
    stride: u64,
    out: Option<&Path>,
) -> Result<Vec<(SemanticMask, RoadCategory)>, CampaignError> {
    let mut writer = out
        .map(|d| DatasetWriter::create(d, "nominal", "none", 0))
        .transpose()?;
    let mut set = Vec::with_capacity(n);
    for_each_nominal_frame(scenario, n, stride, |_, world, frame| {
        let v = &frame.views[0];
        let cat = road_category(world.track(), frame.state.s);
        if let Some(w) = writer.as_mut() {
            w.add(
                &v.image,
                Some(&v.mask),
                None,
                EntryLabels {
                    step: Some(frame.step),
                    view: Some(0),
                    category: Some(cat),
                    ..EntryLabels::default()
                },
            )?;
        }
        set.push((v.mask.clone(), cat));
        Ok(())
    })?;
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok(set)
}

/// One validator decision against mock ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledVerdict {
    pub step: u64,
    pub seed: u64,
    pub predicted_valid: bool,
    pub gt_valid: bool,
    pub score: f64,
}

/// Run a single (non-retried) validation on `n` nominal frames, one every
/// `stride` steps, augmented by a mock strategy. Augmented views are
/// written to `out` when given.
#[allow(clippy::too_many_arguments)]
pub fn confusion_samples(
    scenario: &Scenario,
    strategy: MockStrategy,
    domain: &DomainSpec,
    params: &AugmentParams,
    threshold: f64,
    n: usize,
    stride: u64,
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<LabeledVerdict>, CampaignError> {
    let mut aug = MockAugmenter::new(strategy, domain.clone());
    let cfg = ValidatorConfig {
        threshold,
        ..ValidatorConfig::default()
    }
    .with_segmenter(Arc::new(DomainSegmenter::new(domain, &Palette::simulator())));
    cfg.check()?;
    let mut writer = out
        .map(|d| DatasetWriter::create(d, &domain.name, strategy.name(), seed))
        .transpose()?;
    let mut out_v = Vec::with_capacity(n);
    for_each_nominal_frame(scenario, n, stride, |i, _, frame| {
        let p = params.with_seed(rng::derive(seed, i as u64));
        let r = aug.augment(frame, &p)?;
        let gt = r.gt_valid.expect("mocks know ground truth");
        let verdict = validate(frame, &r.images, &cfg)?;
        if let Some(w) = writer.as_mut() {
            let v = &frame.views[0];
            w.add(
                &v.image,
                Some(&v.mask),
                Some(&r.images[0]),
                EntryLabels {
                    step: Some(frame.step),
                    view: Some(0),
                    seed: Some(p.seed),
                    valid: Some(verdict.valid),
                    gt_valid: Some(gt),
                    category: None,
                },
            )?;
        }
        out_v.push(LabeledVerdict {
            step: frame.step,
            seed: p.seed,
            predicted_valid: verdict.valid,
            gt_valid: gt,
            score: verdict.min_score(),
        });
        Ok(())
    })?;
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok(out_v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path, strategy: StrategyKind, n: u64) -> CampaignConfig {
        CampaignConfig {
            strategy,
            domain: "night".into(),
            n_steps: n,
            seed: 4,
            output_dir: dir.to_path_buf(),
            ..CampaignConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_checks() {
        let c = CampaignConfig::default();
        assert_eq!(CampaignConfig::from_toml(&c.to_toml()).unwrap(), c);
        let bad = CampaignConfig {
            strategy: StrategyKind::Student,
            ..CampaignConfig::default()
        };
        assert!(matches!(bad.validate(), Err(CampaignError::Config(_))));
        assert!(CampaignConfig::from_toml("bogus = 1").is_err());
        let t = CampaignConfig::from_toml("strategy = \"refine\"\nn_steps = 5\n[params]\nnoise_level = 0.3").unwrap();
        assert_eq!(t.strategy, StrategyKind::Refine);
        assert_eq!(t.params.noise_level, 0.3);
    }

    #[test]
    fn baseline_cache_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), StrategyKind::Inpaint, 200);
        c.auto_baseline = true;
        let a = run_campaign(&c).unwrap();
        let cached = baseline_cache_path(&c).unwrap();
        assert!(cached.exists());
        assert_eq!(a.report.baseline.as_deref(), Some(cached.as_path()));
        assert_eq!(a.report.report.rcte.map(|_| ()), Some(()));
        let again = ensure_baseline(&c).unwrap();
        assert_eq!(Some(again.sha256.clone()), a.report.baseline_sha256);

        let mut text = std::fs::read_to_string(&cached).unwrap();
        text = text.replacen("\"cte\":", "\"cte\": ", 1);
        std::fs::write(&cached, text).unwrap();
        assert!(matches!(ensure_baseline(&c), Err(CampaignError::StaleBaseline { .. })));
    }

    #[test]
    fn nominal_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = run_campaign(&cfg(&dir.path().join("a"), StrategyKind::None, 50)).unwrap();
        let b = run_campaign(&cfg(&dir.path().join("b"), StrategyKind::None, 50)).unwrap();
        let ra = std::fs::read(&a.log_path).unwrap();
        let rb = std::fs::read(&b.log_path).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.log.steps.len(), 50);
        let reread = RunLog::read(&a.log_path).unwrap();
        let again = metrics::report(&reread, None, &PenaltyCoefficients::default()).unwrap();
        assert_eq!(again, a.report.report);
    }
}
