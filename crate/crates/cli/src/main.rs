use adstest::augment::domain::{DomainSpec, BUILTIN_NAMES};
use adstest::augment::remote::RemoteAugmenter;
use adstest::augment::server::{serve_augmenter, AugmentBackend, MockBackend};
use adstest::augment::{AugmentParams, Augmenter, MockAugmenter, MockStrategy};
use adstest::campaign::{self, CampaignConfig, RUN_LOG};
use adstest::dataset::Dataset;
use adstest::distill::{self, AffineTeacher, Checkpoint, FitConfig, PairDataset};
use adstest::domain_distance::{self, DomainScore};
use adstest::metrics::{self, PenaltyCoefficients, RunLog};
use adstest::protocol::ClientConfig;
use adstest::sim::Scenario;
use adstest::validator::{self, octss, DomainSegmenter, Segmenter, ValidatorConfig};
use adstest::{ClassId, Exec, Palette};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "adstest", version, about = "Closed-loop domain-augmentation testing for driving agents")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one campaign from a TOML config.
    Run(RunArgs),
    /// Collect teacher pairs, fit a student, select a checkpoint.
    #[command(subcommand)]
    Distill(DistillCmd),
    /// Score and categorize augmented domains.
    #[command(subcommand)]
    Domains(DomainsCmd),
    /// Threshold calibration and confusion matrices.
    #[command(subcommand)]
    Validator(ValidatorCmd),
    /// Build labelled datasets from nominal drives.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Serve augmentation (default), a student, an affine teacher or an agent.
    Serve(ServeArgs),
    /// Summarize run logs into a CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Record or reuse a cached nominal run.
    #[arg(long)]
    auto_baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args, Clone)]
struct ParamArgs {
    #[arg(long, default_value_t = 10.0)]
    text_guidance: f64,
    #[arg(long, default_value_t = 2.0)]
    image_guidance: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_level: f64,
    #[arg(long, default_value_t = 0.0)]
    corrupt: f64,
}

impl ParamArgs {
    fn params(&self) -> Result<AugmentParams> {
        let p = AugmentParams {
            text_guidance: self.text_guidance,
            image_guidance: self.image_guidance,
            noise_level: self.noise_level,
            corrupt_base_prob: self.corrupt,
            seed: 0,
        };
        p.validate().map_err(usage)?;
        Ok(p)
    }
}

#[derive(Subcommand)]
enum DistillCmd {
    Collect {
        #[arg(long, default_value = "lane_keeping")]
        scenario: String,
        #[arg(long, default_value = "night")]
        domain: String,
        /// instruction, inpaint, refine or teacher (synthetic affine).
        #[arg(long, default_value = "instruction")]
        strategy: String,
        /// Use a remote backend instead of the in-process one.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_validate: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for one checkpoint file per epoch.
        #[arg(long)]
        out: PathBuf,
    },
    Select {
        #[arg(long)]
        checkpoints: PathBuf,
        /// Pair dataset disjoint from the training pairs.
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DomainsCmd {
    Categorize {
        #[arg(long, default_value = "lane_keeping")]
        scenario: String,
        /// Comma-separated; defaults to every builtin domain.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "instruction")]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = domain_distance::DEFAULT_COMPONENTS)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ValidatorCmd {
    Calibrate {
        /// Dataset of masks with road categories.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Eval {
        /// Dataset of augmented frames with ground-truth validity.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Road-category labelled masks for calibration.
    Masks {
        #[arg(long, default_value = "lane_keeping")]
        scenario: String,
        #[arg(long, default_value_t = 150)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        stride: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mock-augmented frames with ground-truth validity.
    Confusion {
        #[arg(long, default_value = "lane_keeping")]
        scenario: String,
        #[arg(long, default_value = "instruction")]
        strategy: String,
        #[arg(long, default_value = "night")]
        domain: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        stride: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Check every entry against its recorded digest.
    Verify {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, default_value_t = 0.0)]
    latency_ms: f64,
    /// Serve a fitted student instead of the mock strategies.
    #[arg(long, conflicts_with_all = ["teacher", "agent"])]
    checkpoint: Option<PathBuf>,
    /// Serve the synthetic affine teacher for this domain.
    #[arg(long, conflicts_with = "agent")]
    teacher: Option<String>,
    /// Serve an agent (pure_pursuit_mask or brightness_fragile).
    #[arg(long)]
    agent: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    logs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Marks errors caused by the invocation rather than the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn scenario(name: &str) -> Result<Scenario> {
    if let Some(sc) = Scenario::preset(name) {
        return Ok(sc);
    }
    let text = std::fs::read_to_string(name).map_err(|e| usage(format!("scenario {name}: {e}")))?;
    Scenario::from_toml(&text).map_err(|e| usage(format!("scenario {name}: {e}")))
}

fn domain(name: &str) -> Result<DomainSpec> {
    DomainSpec::resolve(name).map_err(usage)
}

fn mock(name: &str) -> Result<MockStrategy> {
    name.parse().map_err(usage)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    if !a.config.exists() {
        return Err(usage(format!("config file {} not found", a.config.display())));
    }
    let mut cfg = CampaignConfig::load(&a.config).map_err(usage)?;
    if let Some(b) = a.baseline {
        cfg.baseline = Some(b);
    }
    cfg.auto_baseline |= a.auto_baseline;
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if let Some(n) = a.steps {
        cfg.n_steps = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.domain {
        cfg.domain = d;
    }
    if let Some(s) = a.strategy {
        cfg.strategy = s.parse().map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    let out = campaign::run_campaign(&cfg).context("campaign failed")?;
    println!("{}", metrics::reports_to_table(std::slice::from_ref(&out.report.report)));
    println!("log: {}", out.log_path.display());
    println!("report: {}", cfg.output_dir.join(campaign::REPORT).display());
    Ok(())
}

fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_distill(c: DistillCmd) -> Result<()> {
    match c {
        DistillCmd::Collect {
            scenario: sc,
            domain: d,
            strategy,
            endpoint,
            n,
            seed,
            no_validate,
            out,
            params,
        } => {
            let sc = scenario(&sc)?;
            let dom = domain(&d)?;
            let params = params.params()?;
            let mut aug: Box<dyn Augmenter> = match (&endpoint, strategy.as_str()) {
                (Some(ep), s) => Box::new(
                    RemoteAugmenter::connect(ep, s, &dom.name, ClientConfig::default())
                        .with_context(|| format!("connecting to {ep}"))?,
                ),
                (None, "teacher") => Box::new(AffineTeacher::from_domain(&dom, &Palette::simulator(), &[ClassId::ROAD])),
                (None, s) => Box::new(MockAugmenter::new(mock(s)?, dom.clone())),
            };
            let vcfg = ValidatorConfig::default()
                .with_segmenter(Arc::new(DomainSegmenter::new(&dom, &Palette::simulator())));
            let data = distill::collect_pairs(
                &sc,
                aug.as_mut(),
                &params,
                (!no_validate).then_some(&vcfg),
                &dom.name,
                &strategy,
                n,
                seed,
                &out,
            )?;
            println!("collected {} pairs into {}", data.len(), out.display());
        }
        DistillCmd::Fit {
            dataset,
            epochs,
            batch_size,
            learning_rate,
            seed,
            out,
        } => {
            let data = PairDataset::load(&dataset)?;
            let cfg = FitConfig {
                epochs,
                batch_size,
                learning_rate,
                seed,
                ..FitConfig::default()
            };
            cfg.validate().map_err(usage)?;
            let cks = distill::fit_student(&data, &Palette::simulator(), &cfg, Exec::default())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for ck in &cks {
                let p = out.join(format!("checkpoint-{:03}.json", ck.epoch));
                ck.save(&p)?;
                println!("epoch {:>3}  mse {:.3e}  {}", ck.epoch, ck.mse, p.display());
            }
        }
        DistillCmd::Select {
            checkpoints,
            holdout,
            out,
        } => {
            let files = checkpoint_files(&checkpoints)?;
            if files.is_empty() {
                return Err(usage(format!("no checkpoint-*.json in {}", checkpoints.display())));
            }
            let cks = files.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>, _>>()?;
            let hold = PairDataset::load(&holdout)?;
            let fds = distill::score_checkpoints(&cks, &hold.augmented(), &hold.originals())?;
            for (ck, fd) in cks.iter().zip(&fds) {
                println!("epoch {:>3}  mse {:.3e}  fd {:.6e}", ck.epoch, ck.mse, fd);
            }
            let best = distill::select_checkpoint(&cks, &hold.augmented(), &hold.originals())?;
            println!("selected epoch {}", best.epoch);
            if let Some(p) = out {
                best.save(&p)?;
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn cmd_domains(c: DomainsCmd) -> Result<()> {
    let DomainsCmd::Categorize {
        scenario: sc,
        domains,
        strategies,
        train,
        samples,
        k,
        seed,
        out,
        model_out,
    } = c;
    let sc = scenario(&sc)?;
    let names: Vec<String> = if domains.is_empty() {
        BUILTIN_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        domains
    };
    let specs = names.iter().map(|n| domain(n)).collect::<Result<Vec<_>>>()?;
    let strategies = strategies.iter().map(|s| mock(s)).collect::<Result<Vec<_>>>()?;
    if specs.len() < 3 {
        return Err(usage("need at least 3 domains"));
    }
    let mut training = Vec::with_capacity(train);
    let mut frames = Vec::with_capacity(samples);
    campaign::for_each_nominal_frame(&sc, train + samples, 1, |i, _, f| {
        if i % 2 == 0 && training.len() < train || frames.len() >= samples {
            training.push(f.views[0].image.clone());
        } else {
            frames.push(f.clone());
        }
        Ok(())
    })?;
    let model = domain_distance::fit_distance_model(&training, k)?;
    if let Some(p) = &model_out {
        model.save(p)?;
    }
    let mut per_strategy: BTreeMap<String, Vec<DomainScore>> = BTreeMap::new();
    for s in &strategies {
        let mut scores = Vec::new();
        for d in &specs {
            let mut aug = MockAugmenter::new(*s, d.clone());
            let mut imgs = Vec::with_capacity(frames.len());
            for (i, f) in frames.iter().enumerate() {
                let p = AugmentParams::default().with_seed(adstest::rng::derive(seed, i as u64));
                imgs.push(aug.augment(f, &p)?.images.swap_remove(0));
            }
            scores.push(domain_distance::score_domain(&model, &d.name, &imgs, Exec::default())?);
        }
        per_strategy.insert(s.name().to_string(), scores);
    }
    let text = if per_strategy.len() == 1 {
        domain_distance::scores_to_csv(per_strategy.values().next().expect("one strategy"))?
    } else {
        domain_distance::agreement_csv(&per_strategy)?
    };
    std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    print!("{text}");
    Ok(())
}

fn cmd_validator(c: ValidatorCmd) -> Result<()> {
    match c {
        ValidatorCmd::Calibrate { dataset, out } => {
            let ds = Dataset::open(&dataset)?;
            let mut labeled = Vec::new();
            for e in ds.entries() {
                if let Some(cat) = e.category {
                    labeled.push((ds.mask(e)?, cat));
                }
            }
            let rep = validator::calibrate_threshold(&labeled)?;
            print!("{}", rep.to_table());
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&rep)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        ValidatorCmd::Eval { dataset, threshold } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(usage(format!("threshold {threshold} outside [0, 1]")));
            }
            let ds = Dataset::open(&dataset)?;
            let dom = domain(&ds.manifest.domain)?;
            let seg = DomainSegmenter::new(&dom, &Palette::simulator());
            let mut samples = Vec::new();
            for e in ds.entries() {
                let Some(gt) = e.gt_valid else { continue };
                let mask = ds.mask(e)?;
                let pred = seg.segment(&ds.augmented(e)?)?;
                let score = octss(&mask, &pred, ClassId::ROAD)?;
                samples.push((score >= threshold, gt));
            }
            let cm = validator::evaluate_validator(&samples)?;
            println!("{:?}", cm.layout());
            print!("{}", cm.to_table());
        }
    }
    Ok(())
}

fn cmd_dataset(c: DatasetCmd) -> Result<()> {
    match c {
        DatasetCmd::Masks {
            scenario: sc,
            n,
            stride,
            out,
        } => {
            let set = campaign::calibration_set(&scenario(&sc)?, n, stride, Some(&out))?;
            let mut counts = BTreeMap::new();
            for (_, c) in &set {
                *counts.entry(format!("{c:?}")).or_insert(0usize) += 1;
            }
            println!("wrote {} masks to {}: {:?}", set.len(), out.display(), counts);
        }
        DatasetCmd::Confusion {
            scenario: sc,
            strategy,
            domain: d,
            n,
            stride,
            seed,
            threshold,
            out,
            params,
        } => {
            let v = campaign::confusion_samples(
                &scenario(&sc)?,
                mock(&strategy)?,
                &domain(&d)?,
                &params.params()?,
                threshold,
                n,
                stride,
                seed,
                Some(&out),
            )?;
            let cm = validator::evaluate_validator(
                &v.iter().map(|s| (s.predicted_valid, s.gt_valid)).collect::<Vec<_>>(),
            )?;
            println!("wrote {} samples to {}", v.len(), out.display());
            print!("{}", cm.to_table());
        }
        DatasetCmd::Verify { dir } => {
            let ds = Dataset::open(&dir)?;
            ds.verify()?;
            println!("{} entries ok", ds.entries().len());
        }
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    if !(a.latency_ms.is_finite() && a.latency_ms >= 0.0) {
        return Err(usage("latency must be non-negative"));
    }
    let handle = if let Some(kind) = a.agent {
        let spec = match kind.as_str() {
            "pure_pursuit_mask" => adstest::agents::AgentSpec::pure_pursuit(),
            "brightness_fragile" => adstest::agents::AgentSpec::brightness_fragile(),
            other => return Err(usage(format!("unknown agent '{other}'"))),
        };
        adstest::agents::serve_agent(&a.listen, spec)?
    } else {
        let backend: Arc<dyn AugmentBackend> = match (a.checkpoint, a.teacher) {
            (Some(p), _) => Arc::new(Checkpoint::load(&p)?.student),
            (None, Some(d)) => Arc::new(AffineTeacher::from_domain(&domain(&d)?, &Palette::simulator(), &[ClassId::ROAD])),
            (None, None) => Arc::new(MockBackend::default()),
        };
        serve_augmenter(&a.listen, backend, a.latency_ms)?
    };
    eprintln!("listening on {}", handle.addr());
    handle.join();
    Ok(())
}

fn find_logs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            find_logs(&p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()) == Some(RUN_LOG) {
            out.push(p);
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if !a.logs.is_dir() {
        return Err(usage(format!("{} is not a directory", a.logs.display())));
    }
    let mut paths = Vec::new();
    find_logs(&a.logs, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        bail!("no {RUN_LOG} under {}", a.logs.display());
    }
    let logs = paths
        .iter()
        .map(|p| RunLog::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let coef = PenaltyCoefficients::default();
    let mut reports = Vec::new();
    for log in &logs {
        let base = logs
            .iter()
            .find(|b| !std::ptr::eq(*b, log) && metrics::check_baseline(log, b).is_ok());
        reports.push(metrics::report(log, base, &coef)?);
    }
    std::fs::write(&a.out, metrics::reports_to_csv(&reports)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", metrics::reports_to_table(&reports));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADSTEST_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Distill(c) => cmd_distill(c),
        Cmd::Domains(c) => cmd_domains(c),
        Cmd::Validator(c) => cmd_validator(c),
        Cmd::Dataset(c) => cmd_dataset(c),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
