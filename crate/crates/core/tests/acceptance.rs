//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

mod common;

use adstest::augment::domain::{DomainSpec, BUILTIN_NAMES};
use adstest::augment::remote::remote_augment;
use adstest::augment::server::{serve_augmenter, MockBackend};
use adstest::augment::{AugmentParams, Augmenter, MockAugmenter, MockStrategy};
use adstest::campaign::{self, CampaignConfig, StrategyKind};
use adstest::distill::{self, AffineTeacher, FitConfig, FrechetStats, PairDataset};
use adstest::domain_distance::{self, DomainCategory};
use adstest::image::{ClassId, SemanticMask};
use adstest::metrics::{self, Infractions, PenaltyCoefficients, RunLog};
use adstest::protocol::ClientConfig;
use adstest::rng;
use adstest::sim::{EventKind, MisbehaviorEvent, Scenario};
use adstest::validator::{self, octss};
use adstest::{Exec, Palette};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oops(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn c1_octss_oracle() -> Outcome {
    let mut r = rng::rng(1);
    let t = Instant::now();
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..1000 {
        let mut mk = || {
            let k = r.gen_range(1..=6u8);
            let classes = (0..256).map(|_| r.gen_range(0..k)).collect();
            SemanticMask::new(16, 16, classes).unwrap()
        };
        let (a, b) = (mk(), mk());
        for c in ClassId::ALL {
            compared += 1;
            if octss(&a, &b, c).map_err(oops)? != common::brute_iou(&a, &b, c) {
                mismatches += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 1.0,
        format!("{mismatches} mismatches over {compared} class comparisons, {secs:.2} s"),
    )
}

fn c2_threshold_behavior() -> Outcome {
    let fixture = common::calibration_fixture(50);
    let (mut intra_min, mut inter_max) = (1.0f64, 0.0f64);
    for (i, (a, ca)) in fixture.iter().enumerate() {
        for (b, cb) in &fixture[i + 1..] {
            let s = octss(a, b, ClassId::ROAD).map_err(oops)?;
            if ca == cb {
                intra_min = intra_min.min(s);
            } else {
                inter_max = inter_max.max(s);
            }
        }
    }
    if !(intra_min > 0.95 && inter_max < 0.6) {
        return Err(format!("fixture out of spec: intra min {intra_min:.3}, inter max {inter_max:.3}"));
    }
    let rep = validator::calibrate_threshold(&fixture).map_err(oops)?;
    let row = rep.row(0.9).ok_or("no 0.90 row")?;
    check(
        row.inter_acceptance == 0.0 && row.intra_rejection == 0.0,
        format!(
            "{} masks, intra min {intra_min:.3}, inter max {inter_max:.3}; at 0.90 inter accepted {:.1}%, intra rejected {:.1}%",
            rep.n_masks,
            100.0 * row.inter_acceptance,
            100.0 * row.intra_rejection
        ),
    )
}

fn c3_confusion() -> Outcome {
    let sc = Scenario::lane_keeping();
    let params = AugmentParams {
        corrupt_base_prob: 0.5,
        ..AugmentParams::default()
    };
    let mut samples = Vec::new();
    let n = 500;
    for (i, name) in BUILTIN_NAMES.iter().enumerate() {
        let share = n / BUILTIN_NAMES.len() + usize::from(i < n % BUILTIN_NAMES.len());
        let d = DomainSpec::builtin(name).unwrap();
        let v = campaign::confusion_samples(
            &sc,
            MockStrategy::Instruction,
            &d,
            &params,
            0.9,
            share,
            3,
            rng::derive(7, i as u64),
            None,
        )
        .map_err(oops)?;
        samples.extend(v.into_iter().map(|s| (s.predicted_valid, s.gt_valid)));
    }
    let cm = validator::evaluate_validator(&samples).map_err(oops)?;
    // Independent tally.
    let tp = samples.iter().filter(|s| s.0 && s.1).count();
    let fn_ = samples.iter().filter(|s| !s.0 && s.1).count();
    let fp = samples.iter().filter(|s| s.0 && !s.1).count();
    let tn = samples.iter().filter(|s| !s.0 && !s.1).count();
    if cm.layout() != [[tp, fp], [fn_, tn]] {
        return Err(format!("layout {:?} disagrees with tally", cm.layout()));
    }
    let inv = tn as f64 / (tn + fp).max(1) as f64;
    let val = tp as f64 / (tp + fn_).max(1) as f64;
    check(
        samples.len() == n && inv >= 0.95 && val >= 0.95 && tn + fp > 0,
        format!(
            "[[TP,FP],[FN,TN]] = {:?}; invalid flagged {:.1}%, valid passed {:.1}%",
            cm.layout(),
            100.0 * inv,
            100.0 * val
        ),
    )
}

fn c4_inpaint_preservation() -> Outcome {
    let domains: Vec<DomainSpec> = DomainSpec::builtins();
    let mut augs: Vec<MockAugmenter> = domains
        .iter()
        .map(|d| MockAugmenter::new(MockStrategy::Inpaint, d.clone()).preserving(&[ClassId::ROAD]))
        .collect();
    let (mut frames, mut road_px, mut changed) = (0usize, 0usize, 0usize);
    campaign::for_each_nominal_frame(&Scenario::lane_keeping(), 1000, 1, |i, _, f| {
        let p = AugmentParams {
            noise_level: (i % 10) as f64 / 10.0,
            seed: i as u64,
            ..AugmentParams::default()
        };
        let n = augs.len();
        let out = augs[i % n].augment(f, &p)?;
        for (v, img) in f.views.iter().zip(&out.images) {
            for (k, &c) in v.mask.classes().iter().enumerate() {
                if c == ClassId::ROAD.0 {
                    road_px += 1;
                    changed += (v.image.at(k) != img.at(k)) as usize;
                }
            }
        }
        frames += 1;
        Ok(())
    })
    .map_err(oops)?;
    check(
        frames == 1000 && changed == 0 && road_px > 0,
        format!("{frames} frames, {road_px} road pixels, {changed} changed"),
    )
}

fn nominal_cfg(dir: &Path) -> CampaignConfig {
    CampaignConfig {
        strategy: StrategyKind::None,
        n_steps: 2000,
        seed: 11,
        output_dir: dir.to_path_buf(),
        ..CampaignConfig::default()
    }
}

fn c5_nominal(tmp: &Path) -> Outcome {
    let t = Instant::now();
    let a = campaign::run_campaign(&nominal_cfg(&tmp.join("c5a"))).map_err(oops)?;
    let secs = t.elapsed().as_secs_f64();
    let b = campaign::run_campaign(&nominal_cfg(&tmp.join("c5b"))).map_err(oops)?;
    let same = std::fs::read(&a.log_path).map_err(oops)? == std::fs::read(&b.log_path).map_err(oops)?;
    let oob = a.log.events.iter().filter(|e| e.kind.is_out_of_bounds()).count();
    let col = a.log.events.iter().filter(|e| e.kind.is_collision()).count();
    let max_cte = a.log.steps.iter().map(|s| s.cte.abs()).fold(0.0, f64::max);
    check(
        oob == 0 && col == 0 && same && a.log.steps.len() == 2000 && secs < 30.0,
        format!("{oob} OOB, {col} collisions, max |cte| {max_cte:.3} m, identical logs: {same}, {secs:.1} s"),
    )
}

fn c6_monotonic(tmp: &Path) -> Outcome {
    let mut totals = Vec::new();
    for nu in [0.0, 0.3, 0.6, 0.9] {
        let mut total = 0;
        for seed in 1..=3 {
            let cfg = CampaignConfig {
                agent: adstest::agents::AgentSpec::brightness_fragile(),
                strategy: StrategyKind::Refine,
                domain: "night".into(),
                params: AugmentParams {
                    noise_level: nu,
                    corrupt_base_prob: 0.12,
                    ..AugmentParams::default()
                },
                n_steps: 600,
                seed,
                output_dir: tmp.join(format!("c6-{nu}-{seed}")),
                ..CampaignConfig::default()
            };
            total += campaign::run_loop(&cfg, &cfg.output_dir).map_err(oops)?.0.events.len();
        }
        totals.push((nu, total));
    }
    let ok = totals.windows(2).all(|w| w[0].1 <= w[1].1);
    let text: Vec<String> = totals.iter().map(|(n, t)| format!("nu {n}: {t}")).collect();
    check(ok, format!("events per level: {}", text.join(", ")))
}

fn event(sector: usize) -> MisbehaviorEvent {
    MisbehaviorEvent {
        kind: EventKind::Oob,
        step: 0,
        sector,
        s: 0.0,
    }
}

fn c7_metric_units(tmp: &Path) -> Outcome {
    let mut fails = Vec::new();
    let f0 = metrics::ftc(&[], 40).map_err(oops)?;
    if f0 != 0.0 {
        fails.push(format!("ftc empty = {f0}"));
    }
    let f2 = metrics::ftc(&[event(3), event(17)], 40).map_err(oops)?;
    if f2 != 5.0 {
        fails.push(format!("ftc {{3,17}} = {f2}"));
    }
    let cfg = CampaignConfig {
        n_steps: 300,
        ..nominal_cfg(&tmp.join("c7"))
    };
    let log = campaign::run_loop(&cfg, &cfg.output_dir).map_err(oops)?.0;
    let again = RunLog::read(&cfg.output_dir.join(campaign::RUN_LOG)).map_err(oops)?;
    let rc = metrics::rcte(&log, &again).map_err(oops)?;
    let rs = metrics::rsj(&log, &again).map_err(oops)?;
    if rc != 1.0 || rs != 1.0 {
        fails.push(format!("rcte {rc}, rsj {rs}"));
    }
    let ds = metrics::driving_score(84.26, &Infractions::default(), &PenaltyCoefficients::default());
    if ds != 84.26 {
        fails.push(format!("driving score {ds}"));
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            format!("ftc 0 and 5.0, rcte {rc}, rsj {rs}, DS {ds}")
        } else {
            fails.join("; ")
        },
    )
}

fn c8_frechet() -> Outcome {
    let g = |mu: f64, var: f64| FrechetStats::new(vec![mu], vec![var]).unwrap();
    let closed = |m1: f64, v1: f64, m2: f64, v2: f64| (m1 - m2).powi(2) + (v1.sqrt() - v2.sqrt()).powi(2);
    let a = distill::frechet_distance(&g(0.0, 1.0), &g(1.0, 1.0)).map_err(oops)?;
    let b = distill::frechet_distance(&g(0.0, 1.0), &g(0.0, 4.0)).map_err(oops)?;
    let mut worst = (a - closed(0.0, 1.0, 1.0, 1.0)).abs().max((b - closed(0.0, 1.0, 0.0, 4.0)).abs());
    // Diagonal fixtures: the distance separates per dimension.
    let mut r = rng::rng(8);
    let mut asym = 0.0f64;
    let mut self_d = 0.0f64;
    for _ in 0..50 {
        let d = 5;
        let mu_a: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mu_b: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let va: Vec<f64> = (0..d).map(|_| r.gen_range(0.1..3.0)).collect();
        let vb: Vec<f64> = (0..d).map(|_| r.gen_range(0.1..3.0)).collect();
        let diag = |v: &[f64]| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = v[i];
            }
            m
        };
        let sa = FrechetStats::new(mu_a.clone(), diag(&va)).unwrap();
        let sb = FrechetStats::new(mu_b.clone(), diag(&vb)).unwrap();
        let want: f64 = (0..d).map(|i| closed(mu_a[i], va[i], mu_b[i], vb[i])).sum();
        let ab = distill::frechet_distance(&sa, &sb).map_err(oops)?;
        let ba = distill::frechet_distance(&sb, &sa).map_err(oops)?;
        worst = worst.max((ab - want).abs());
        asym = asym.max((ab - ba).abs());
        self_d = self_d.max(distill::frechet_distance(&sa, &sa).map_err(oops)?);
    }
    check(
        worst <= 1e-8 && asym <= 1e-8 && self_d <= 1e-9,
        format!("N(0,1)|N(1,1) {a:.12}, N(0,1)|N(0,4) {b:.12}, max formula error {worst:.1e}, asymmetry {asym:.1e}, self {self_d:.1e}"),
    )
}

fn c9_distillation(tmp: &Path) -> Outcome {
    let palette = Palette::simulator();
    // Fidelity and selection on textured frames.
    let teacher = common::mixing_teacher();
    let frames = common::spread_frames(130, 0.0);
    let imgs: Vec<_> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| common::textured(&f.views[0].image, &palette, 40, i as u64))
        .collect();
    let pairs = imgs[..100].iter().map(|i| (i.clone(), common::teach(&teacher, i))).collect();
    let data = PairDataset::new(pairs, "mixing", "teacher").map_err(oops)?;
    let cks = distill::fit_student(&data, &palette, &FitConfig::default(), Exec::default()).map_err(oops)?;
    let hold = &imgs[100..];
    let hold_t: Vec<_> = hold.iter().map(|i| common::teach(&teacher, i)).collect();
    let fds = distill::score_checkpoints(&cks, &hold_t, hold).map_err(oops)?;
    let mut argmin = 0;
    for i in 1..fds.len() {
        if fds[i] < fds[argmin] {
            argmin = i;
        }
    }
    let best = distill::select_checkpoint(&cks, &hold_t, hold).map_err(oops)?;
    let max_err = hold
        .iter()
        .zip(&hold_t)
        .map(|(h, t)| {
            let s = best.student.apply(h);
            s.pixels().iter().zip(t.pixels()).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0)
        })
        .max()
        .unwrap_or(0);

    // Closed loop against a slow remote teacher.
    let night = DomainSpec::builtin("night").unwrap();
    let domain_teacher = AffineTeacher::from_domain(&night, &palette, &[ClassId::ROAD]);
    let server = serve_augmenter("127.0.0.1:0", Arc::new(domain_teacher.clone()), 100.0).map_err(oops)?;
    let sc = Scenario::lane_keeping();
    let train = distill::collect_pairs(
        &sc,
        &mut domain_teacher.clone(),
        &AugmentParams::default(),
        None,
        "night",
        "teacher",
        48,
        21,
        &tmp.join("c9-train"),
    )
    .map_err(oops)?;
    let hold2 = distill::collect_pairs(
        &sc,
        &mut domain_teacher.clone(),
        &AugmentParams::default(),
        None,
        "night",
        "teacher",
        16,
        22,
        &tmp.join("c9-hold"),
    )
    .map_err(oops)?;
    let cks2 = distill::fit_student(&train, &palette, &FitConfig::default(), Exec::default()).map_err(oops)?;
    let student = distill::select_checkpoint(&cks2, &hold2.augmented(), &hold2.originals()).map_err(oops)?;
    let ck_path = tmp.join("c9-student.json");
    student.save(&ck_path).map_err(oops)?;

    let base = CampaignConfig {
        domain: "night".into(),
        n_steps: 60,
        seed: 5,
        step_latency_ms: Some(100.0),
        ..CampaignConfig::default()
    };
    let nominal = CampaignConfig {
        output_dir: tmp.join("c9-nominal"),
        ..base.clone()
    };
    campaign::run_campaign(&nominal).map_err(oops)?;
    let baseline = Some(nominal.output_dir.join(campaign::RUN_LOG));
    let remote = CampaignConfig {
        strategy: StrategyKind::Remote,
        endpoint: Some(server.addr().to_string()),
        remote_strategy: "teacher".into(),
        baseline: baseline.clone(),
        output_dir: tmp.join("c9-teacher"),
        ..base.clone()
    };
    let t_run = campaign::run_campaign(&remote).map_err(oops)?;
    let stud = CampaignConfig {
        strategy: StrategyKind::Student,
        checkpoint: Some(ck_path),
        baseline,
        output_dir: tmp.join("c9-student"),
        ..base
    };
    let s_run = campaign::run_campaign(&stud).map_err(oops)?;
    let aug_sum = |l: &RunLog| l.timings.iter().map(|t| t.augment).sum::<f64>();
    let (ta, sa) = (aug_sum(&t_run.log), aug_sum(&s_run.log));
    let speedup = ta / sa.max(1e-9);
    let overhead = s_run
        .report
        .report
        .overhead
        .as_ref()
        .and_then(|o| o.vs_baseline_percent)
        .ok_or("no baseline overhead")?;
    let fallbacks = t_run.report.report.fallbacks + s_run.report.report.fallbacks;
    check(
        max_err <= 1 && best.epoch == cks[argmin].epoch && speedup >= 50.0 && overhead <= 5.0,
        format!(
            "held-out max error {max_err}, selected epoch {} (min-FD epoch {}, FD {:.2e}), augmentation {:.0} ms teacher vs {:.1} ms student ({speedup:.0}x), student overhead {overhead:+.2}% vs baseline, {fallbacks} fallbacks",
            best.epoch, cks[argmin].epoch, fds[argmin], ta, sa
        ),
    )
}

fn c10_categorization() -> Outcome {
    let names = ["shift10", "shift40", "shift120"];
    let mut ok = 0;
    let mut worst = String::new();
    for seed in 0..10u64 {
        let offset = 3.7 * seed as f64;
        let train: Vec<_> = common::spread_frames(40, offset).into_iter().map(|f| f.views[0].image.clone()).collect();
        let model = domain_distance::fit_distance_model(&train, domain_distance::DEFAULT_COMPONENTS).map_err(oops)?;
        let test = common::spread_frames(20, offset + 1.9);
        let mut scores = Vec::new();
        for (name, m) in names.iter().zip([10.0, 40.0, 120.0]) {
            let mut aug = MockAugmenter::new(MockStrategy::Instruction, DomainSpec::palette_shift(name, m));
            let mut imgs = Vec::new();
            for (i, f) in test.iter().enumerate() {
                let p = AugmentParams::default().with_seed(rng::derive(seed, i as u64));
                imgs.push(aug.augment(f, &p).map_err(oops)?.images.swap_remove(0));
            }
            scores.push(domain_distance::score_domain(&model, name, &imgs, Exec::default()).map_err(oops)?);
        }
        let cats: BTreeMap<String, DomainCategory> =
            domain_distance::categorize_domains(&scores).map_err(oops)?.into_iter().collect();
        let good = cats["shift10"] == DomainCategory::InDistribution
            && cats["shift40"] == DomainCategory::InBetween
            && cats["shift120"] == DomainCategory::OutOfDistribution;
        if good {
            ok += 1;
        } else {
            worst = format!("seed {seed}: {:?}", scores.iter().map(|s| s.mean_error).collect::<Vec<_>>());
        }
    }
    check(ok == 10, format!("{ok}/10 seeds ordered {worst}"))
}

fn c11_protocol(tmp: &Path) -> Outcome {
    let server = serve_augmenter("127.0.0.1:0", Arc::new(MockBackend::default()), 0.0).map_err(oops)?;
    let ep = server.addr().to_string();
    let frames = common::spread_frames(6, 5.0);
    let mut compared = 0;
    let mut differing = 0;
    for strategy in MockStrategy::ALL {
        for (i, f) in frames.iter().enumerate() {
            let domain = BUILTIN_NAMES[(i + strategy as usize) % BUILTIN_NAMES.len()];
            let p = AugmentParams {
                corrupt_base_prob: 0.5,
                seed: rng::derive(3, i as u64),
                ..AugmentParams::default()
            };
            let local = MockAugmenter::new(strategy, DomainSpec::builtin(domain).unwrap())
                .augment(f, &p)
                .map_err(oops)?;
            let remote = remote_augment(&ep, f, domain, strategy.name(), &p, ClientConfig::default()).map_err(oops)?;
            compared += 1;
            differing += (local.images != remote.images) as usize;
        }
    }
    let cfg = CampaignConfig {
        strategy: StrategyKind::Remote,
        endpoint: Some(ep),
        remote_strategy: "refine".into(),
        domain: "autumn".into(),
        params: AugmentParams {
            corrupt_base_prob: 0.3,
            ..AugmentParams::default()
        },
        n_steps: 40,
        output_dir: tmp.join("c11"),
        ..CampaignConfig::default()
    };
    campaign::run_campaign(&cfg).map_err(oops)?;
    let tl = server.timeline();
    let mut by_conn: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for e in &tl {
        by_conn.entry(e.conn).or_default().push(*e);
    }
    let mut pairs = 0;
    let mut violations = 0;
    for v in by_conn.values_mut() {
        v.sort_by_key(|e| e.received);
        for w in v.windows(2) {
            pairs += 1;
            violations += (w[1].received <= w[0].replied) as usize;
        }
    }
    check(
        differing == 0 && violations == 0 && pairs >= 40,
        format!("{differing}/{compared} remote results differ; {violations} ordering violations over {pairs} consecutive exchanges"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let t = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 octss oracle equivalence", Box::new(c1_octss_oracle)),
        ("2 validator threshold behavior", Box::new(c2_threshold_behavior)),
        ("3 confusion-matrix harness", Box::new(c3_confusion)),
        ("4 inpaint preservation", Box::new(c4_inpaint_preservation)),
        ("5 nominal stability and determinism", Box::new(|| c5_nominal(t))),
        ("6 failure monotonicity", Box::new(|| c6_monotonic(t))),
        ("7 metric unit checks", Box::new(|| c7_metric_units(t))),
        ("8 frechet distance", Box::new(c8_frechet)),
        ("9 distillation fidelity and speedup", Box::new(|| c9_distillation(t))),
        ("10 domain categorization", Box::new(c10_categorization)),
        ("11 protocol correctness", Box::new(|| c11_protocol(t))),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
