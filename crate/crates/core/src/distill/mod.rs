//! Teacher/student distillation.
//!
//! Pairs are collected by driving the simulator with the reference agent and
//! pushing each frame through the (slow) teacher. A per-class affine student
//! is fitted by mini-batch gradient descent, one checkpoint per epoch, and
//! the checkpoint whose outputs sit closest to the teacher's in Fréchet
//! feature distance is kept.

mod frechet;
mod student;

pub use frechet::{feature_vector, frechet_distance, FrechetStats, EPSILON, FEATURE_DIM, NEGATIVE_TOLERANCE};
pub use student::{
    apply_student, fit_student, AffineTeacher, Checkpoint, ClassMap, FitConfig, StudentAugmenter,
    StudentTransform,
};

use crate::agents::{AgentError, AgentSpec};
use crate::augment::{AugmentError, AugmentParams, Augmenter};
use crate::dataset::{Dataset, DatasetError, DatasetWriter, EntryLabels, Manifest};
use crate::image::Image;
use crate::rng;
use crate::sim::{Scenario, SimError, World};
use crate::validator::{augment_validated, ValidatorConfig, ValidatorError};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error("invalid student: {0}")]
    InvalidStudent(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("frechet distance: {0}")]
    Frechet(String),
    #[error("pair {index}: original is {a:?}, augmented is {b:?}")]
    PairDims {
        index: usize,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("collected {got} of {wanted} pairs within {steps} steps")]
    Insufficient { got: usize, wanted: usize, steps: u64 },
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Validator(#[from] ValidatorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone)]
pub struct PairDataset {
    /// (original, augmented)
    pub pairs: Vec<(Image, Image)>,
    pub domain: String,
    pub strategy: String,
    pub manifest: Option<Manifest>,
}

impl PairDataset {
    pub fn new(pairs: Vec<(Image, Image)>, domain: &str, strategy: &str) -> Result<Self, DistillError> {
        if pairs.is_empty() {
            return Err(DistillError::Empty("pair dataset"));
        }
        for (index, (a, b)) in pairs.iter().enumerate() {
            if a.dims() != b.dims() {
                return Err(DistillError::PairDims {
                    index,
                    a: a.dims(),
                    b: b.dims(),
                });
            }
        }
        Ok(PairDataset {
            pairs,
            domain: domain.into(),
            strategy: strategy.into(),
            manifest: None,
        })
    }

    /// Every entry of an on-disk dataset that carries an augmented image.
    pub fn load(dir: &Path) -> Result<Self, DistillError> {
        let ds = Dataset::open(dir)?;
        let mut pairs = Vec::new();
        for e in ds.entries().iter().filter(|e| e.aug_sha256.is_some()) {
            pairs.push((ds.image(e)?, ds.augmented(e)?));
        }
        let mut out = PairDataset::new(pairs, &ds.manifest.domain, &ds.manifest.strategy)?;
        out.manifest = Some(ds.manifest);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn originals(&self) -> Vec<Image> {
        self.pairs.iter().map(|p| p.0.clone()).collect()
    }

    pub fn augmented(&self) -> Vec<Image> {
        self.pairs.iter().map(|p| p.1.clone()).collect()
    }
}

/// Step cap for collection: invalid attempts can make frames scarce.
pub fn collection_step_limit(n: usize) -> u64 {
    20 * n as u64 + 100
}

/// Drive `scenario` with the reference agent on original frames, augment
/// each step's views and keep the ones the validator accepts (all of them
/// when `validator` is `None`). Writes the pairs with their masks to `out`.
#[allow(clippy::too_many_arguments)]
pub fn collect_pairs(
    scenario: &Scenario,
    augmenter: &mut dyn Augmenter,
    params: &AugmentParams,
    validator: Option<&ValidatorConfig>,
    domain: &str,
    strategy: &str,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<PairDataset, DistillError> {
    if n == 0 {
        return Err(DistillError::Empty("collection target"));
    }
    let mut world = World::new(scenario)?;
    let mut agent = AgentSpec::pure_pursuit().build()?;
    let mut writer = DatasetWriter::create(out, domain, strategy, seed)?;
    let mut pairs = Vec::with_capacity(n);
    let limit = collection_step_limit(n);
    while pairs.len() < n && world.step_index() < limit {
        let step = world.step_index();
        let frame = world.render();
        let p = params.with_seed(rng::derive(seed, step));
        let (images, valid) = match validator {
            Some(cfg) => {
                let v = augment_validated(&frame, augmenter, &p, cfg)?;
                (v.result.images, !v.fallback)
            }
            None => (augmenter.augment(&frame, &p)?.images, true),
        };
        if valid {
            for (view, (v, aug)) in frame.views.iter().zip(&images).enumerate() {
                if pairs.len() == n {
                    break;
                }
                writer.add(
                    &v.image,
                    Some(&v.mask),
                    Some(aug),
                    EntryLabels {
                        step: Some(step),
                        view: Some(view),
                        seed: Some(p.seed),
                        valid: Some(true),
                        ..EntryLabels::default()
                    },
                )?;
                pairs.push((v.image.clone(), aug.clone()));
            }
        }
        let cmd = agent.act(&frame.images())?;
        world.advance(&cmd)?;
    }
    if pairs.len() < n {
        return Err(DistillError::Insufficient {
            got: pairs.len(),
            wanted: n,
            steps: limit,
        });
    }
    let ds = writer.finish()?;
    let mut data = PairDataset::new(pairs, domain, strategy)?;
    data.manifest = Some(ds.manifest);
    Ok(data)
}

/// FD between the student's outputs on `holdout_originals` and the teacher's
/// outputs, per checkpoint.
pub fn score_checkpoints(
    checkpoints: &[Checkpoint],
    teacher_outputs: &[Image],
    holdout_originals: &[Image],
) -> Result<Vec<f64>, DistillError> {
    if holdout_originals.is_empty() || teacher_outputs.is_empty() {
        return Err(DistillError::Empty("holdout set"));
    }
    let teacher = FrechetStats::of_images(teacher_outputs)?;
    checkpoints
        .iter()
        .map(|ck| {
            let outs: Vec<Image> = holdout_originals.iter().map(|i| ck.student.apply(i)).collect();
            frechet_distance(&FrechetStats::of_images(&outs)?, &teacher)
        })
        .collect()
}

/// Minimum-FD checkpoint, earliest epoch on ties, with `fd_to_teacher` set.
pub fn select_checkpoint(
    checkpoints: &[Checkpoint],
    teacher_outputs: &[Image],
    holdout_originals: &[Image],
) -> Result<Checkpoint, DistillError> {
    if checkpoints.is_empty() {
        return Err(DistillError::Empty("checkpoint list"));
    }
    let fds = score_checkpoints(checkpoints, teacher_outputs, holdout_originals)?;
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by_key(|&i| checkpoints[i].epoch);
    let mut best = order[0];
    for &i in &order[1..] {
        if fds[i] < fds[best] {
            best = i;
        }
    }
    let mut ck = checkpoints[best].clone();
    ck.fd_to_teacher = Some(fds[best]);
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::domain::DomainSpec;
    use crate::exec::Exec;
    use crate::image::ClassId;
    use crate::palette::Palette;

    struct PassThrough;

    impl Augmenter for PassThrough {
        fn augment(
            &mut self,
            frame: &crate::sim::render::Frame,
            params: &AugmentParams,
        ) -> Result<crate::augment::AugmentationResult, AugmentError> {
            Ok(crate::augment::AugmentationResult {
                images: frame.images(),
                elapsed_ms: 0.0,
                server_elapsed_ms: None,
                seed_used: params.seed,
                retries: 0,
                gt_valid: None,
            })
        }

        fn label(&self) -> String {
            "pass".into()
        }
    }

    fn teacher() -> AffineTeacher {
        AffineTeacher::from_domain(&DomainSpec::builtin("night").unwrap(), &Palette::simulator(), &[ClassId::ROAD])
    }

    #[test]
    fn collect_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let sc = Scenario::lane_keeping();
        let p = AugmentParams::default();
        let a = collect_pairs(&sc, &mut PassThrough, &p, None, "sunny", "pass", 10, 3, &dir.path().join("a")).unwrap();
        assert_eq!(a.len(), 10);
        assert!(a.pairs.iter().all(|(o, g)| o == g));
        let ds = Dataset::open(&dir.path().join("a")).unwrap();
        assert_eq!(ds.entries().len(), 10);
        let b = collect_pairs(&sc, &mut teacher(), &p, None, "night", "teacher", 5, 3, &dir.path().join("b")).unwrap();
        let c = collect_pairs(&sc, &mut teacher(), &p, None, "night", "teacher", 5, 3, &dir.path().join("c")).unwrap();
        for name in ["b", "c"] {
            assert!(dir.path().join(name).join(crate::dataset::MANIFEST).exists());
        }
        assert_eq!(b.pairs, c.pairs);
        let reloaded = PairDataset::load(&dir.path().join("b")).unwrap();
        assert_eq!(reloaded.pairs, b.pairs);
    }

    #[test]
    fn identity_teacher_stays_identity() {
        let dir = tempfile::tempdir().unwrap();
        let data = collect_pairs(
            &Scenario::lane_keeping(),
            &mut PassThrough,
            &AugmentParams::default(),
            None,
            "sunny",
            "pass",
            4,
            1,
            dir.path(),
        )
        .unwrap();
        let cks = fit_student(&data, &Palette::simulator(), &FitConfig { epochs: 2, ..FitConfig::default() }, Exec::default()).unwrap();
        let id = StudentTransform::identity(Palette::simulator());
        assert!(cks.last().unwrap().student.max_coefficient_diff(&id) < 1e-3);
    }

    #[test]
    fn fit_recovers_affine_teacher() {
        let palette = Palette::simulator();
        let sc = Scenario::lane_keeping();
        let mut world = World::new(&sc).unwrap();
        let t = teacher();
        let mut frames = Vec::new();
        for _ in 0..24 {
            let f = world.render();
            frames.push(f.views[0].clone());
            world.advance(&crate::sim::ControlCommand::new(0.0, 0.5, 0.5)).unwrap();
        }
        let pairs: Vec<_> = frames[..16].iter().map(|v| (v.image.clone(), t.apply(&v.image, &v.mask))).collect();
        let data = PairDataset::new(pairs, "night", "teacher").unwrap();
        let cks = fit_student(&data, &palette, &FitConfig::default(), Exec::default()).unwrap();
        assert_eq!(cks.len(), 10);
        for w in cks.windows(2) {
            assert!(w[1].mse <= w[0].mse + 1e-6);
        }
        let student = &cks.last().unwrap().student;
        for v in &frames[16..] {
            let want = t.apply(&v.image, &v.mask);
            let got = student.apply(&v.image);
            let err = want.pixels().iter().zip(got.pixels()).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
            assert!(err <= 1, "max error {err}");
        }

        let holdout: Vec<Image> = frames[16..].iter().map(|v| v.image.clone()).collect();
        let teacher_out: Vec<Image> = frames[16..].iter().map(|v| t.apply(&v.image, &v.mask)).collect();
        let best = select_checkpoint(&cks[..1], &teacher_out, &holdout).unwrap();
        assert_eq!(best.epoch, 1);
        let mut dup = vec![cks[3].clone(), cks[3].clone()];
        dup[1].epoch = 5;
        assert_eq!(select_checkpoint(&dup, &teacher_out, &holdout).unwrap().epoch, 4);

        let json = serde_json::to_string(&cks[9]).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert!(back.student.max_coefficient_diff(student) < 1e-12);
    }
}
