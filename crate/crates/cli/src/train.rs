//! The training loop: per-step loss rows, periodic checkpoints, multi-scale
//! resampling, and abort on non-finite values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seascn::dataio::{checkpoint_save, Checkpoint, Dataset};
use seascn::{Detector, JointLossReport, RunConfig, Sample, Scalar, Sgd};

use crate::prep;

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: JointLossReport,
}

pub const LOG_HEADER: &str = "step\tlr\tl_detection\tl_segmentation\tl_scmb\tl_total";

impl LogRow {
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, l.l_detection, l.l_segmentation, l.l_scmb, l.l_total
        )
    }
}

/// What the step callback wants next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

pub struct TrainOutcome<T> {
    pub detector: Detector<T>,
    pub optimizer: Sgd<T>,
    pub log: Vec<LogRow>,
    /// Steps actually taken.
    pub steps: usize,
}

/// Where checkpoints and the log go.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
}

impl TrainOutput<'_> {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("loss.tsv")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn last_good_path(&self) -> PathBuf {
        self.dir.join("last_good.ckpt")
    }
}

fn save<T: Scalar>(path: &Path, det: &Detector<T>, opt: &Sgd<T>, step: usize) -> Result<()> {
    let ckpt = Checkpoint {
        config: det.config().clone(),
        step: step as u64,
        params: det.params().clone(),
        velocity: Some(opt.velocity().clone()),
    };
    checkpoint_save(path, &ckpt).with_context(|| format!("writing checkpoint {}", path.display()))
}

/// Samples at every configured short side, built on first use.
struct SampleCache<'a, T> {
    data: &'a Dataset,
    native: Vec<Sample<T>>,
    scaled: HashMap<(usize, usize), Sample<T>>,
}

impl<'a, T: Scalar> SampleCache<'a, T> {
    fn new(data: &'a Dataset) -> Result<Self> {
        Ok(Self {
            data,
            native: prep::samples(data)?,
            scaled: HashMap::new(),
        })
    }

    fn get(&mut self, index: usize, short: Option<usize>) -> Result<&Sample<T>> {
        let Some(short) = short else {
            return Ok(&self.native[index]);
        };
        if !self.scaled.contains_key(&(index, short)) {
            let rec = &self.data.manifest.images[index];
            let anns = self.data.manifest.instances(rec.id)?;
            let (img, anns) = prep::rescale(&self.data.images[index], &anns, short);
            self.scaled.insert((index, short), prep::sample(&img, &anns)?);
        }
        Ok(&self.scaled[&(index, short)])
    }
}

/// Trains a fresh detector on `data` for `cfg.train.steps` steps, one image
/// per step in reshuffled epochs. With `out`, writes the loss log, periodic
/// and final checkpoints; on a non-finite loss or gradient the weights from
/// before the failing step are saved as `last_good.ckpt` and the error is
/// returned. `on_step` sees every row after the update and may stop early.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    data: &Dataset,
    out: Option<&TrainOutput>,
    mut on_step: impl FnMut(&Detector<T>, &LogRow) -> Result<Flow>,
) -> Result<TrainOutcome<T>> {
    anyhow::ensure!(!data.images.is_empty(), "training set has no images");
    let model = cfg.model(data.manifest.num_classes());
    let mut det = Detector::<T>::new(&model, cfg.seed)?;
    let mut opt = Sgd::new(det.params(), cfg.train.momentum, cfg.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut cache = SampleCache::<T>::new(data)?;
    let mut log_file = match out {
        Some(o) => {
            std::fs::create_dir_all(o.dir).with_context(|| format!("creating {}", o.dir.display()))?;
            let mut f = BufWriter::new(File::create(o.log_path())?);
            writeln!(f, "{LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.train.steps);
    let mut steps = 0;
    for step in 0..cfg.train.steps {
        if order.is_empty() {
            order = (0..data.images.len()).collect();
            order.shuffle(&mut rng);
        }
        let index = order.pop().expect("non-empty epoch");
        let short = (!cfg.train.multiscale.is_empty())
            .then(|| cfg.train.multiscale[rng.random_range(0..cfg.train.multiscale.len())]);
        let sample = cache.get(index, short)?;
        let report = match seascn::train_step(
            &mut det,
            &mut opt,
            std::slice::from_ref(sample),
            &cfg.proposals,
            &cfg.train,
            step,
            &mut rng,
        ) {
            Ok(r) => r,
            Err(e) => {
                if let Some(o) = out {
                    save(&o.last_good_path(), &det, &opt, step)?;
                }
                return Err(anyhow::Error::new(e).context(format!("training aborted at step {step}")));
            }
        };
        let row = LogRow {
            step,
            lr: cfg.train.lr_at(step),
            loss: report,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", row.line())?;
            f.flush()?;
        }
        log.push(row);
        steps = step + 1;
        if let Some(o) = out {
            let every = cfg.train.checkpoint_every;
            if every > 0 && steps % every == 0 {
                save(&o.checkpoint_path(steps), &det, &opt, steps)?;
            }
        }
        if on_step(&det, &row)? == Flow::Stop {
            break;
        }
    }
    if let Some(o) = out {
        save(&o.final_path(), &det, &opt, steps)?;
    }
    Ok(TrainOutcome {
        detector: det,
        optimizer: opt,
        log,
        steps,
    })
}
