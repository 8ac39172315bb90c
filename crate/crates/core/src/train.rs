//! Epoch loop over the initialized-label set and evaluation.

use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::config::HyperConfig;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::meta::{mlb_step, StepReport, Weighting};
use crate::metrics::{evaluate_pair, summarize, MetricsReport, MetricsSummary};
use crate::model::{model_forward, pseudo_label, ModelParams};
use crate::optim::Sgd;
use crate::teacher::TeacherState;

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub bootstrap_loss: f64,
    pub aug_loss: f64,
    pub st_loss: f64,
    pub total_loss: f64,
}

/// Student, optimizer state, and optional teacher of a bootstrapping run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub student: ModelParams,
    pub opt: Sgd,
    pub teacher: Option<TeacherState>,
    pub cfg: HyperConfig,
    pub weighting: Weighting,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Start from `init` (normally the baseline parameters). The teacher, if
    /// any, starts as a copy of the student.
    pub fn new(init: ModelParams, cfg: HyperConfig, weighting: Weighting, with_teacher: bool) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(&init, cfg.alpha, cfg.momentum, cfg.weight_decay);
        let teacher = if with_teacher {
            Some(TeacherState::new(init.clone(), cfg.ema_decay)?)
        } else {
            None
        };
        Ok(Self {
            student: init,
            opt,
            teacher,
            cfg,
            weighting,
            epoch: 0,
        })
    }

    /// One pass over `noisy` in shuffled batches of `batch_noisy`, each
    /// paired with a clean batch drawn from `meta`. `on_step` sees every
    /// step's index within the epoch, the indices into `noisy` of its
    /// batch, and its report.
    pub fn run_epoch<R: Rng + ?Sized>(
        &mut self,
        noisy: &Dataset,
        meta: &Dataset,
        rng: &mut R,
        mut on_step: impl FnMut(usize, &[usize], &StepReport),
    ) -> Result<EpochStats> {
        if noisy.is_empty() {
            return Err(Error::Empty("initialized-label set"));
        }
        if meta.is_empty() {
            return Err(Error::Empty("meta set"));
        }
        let mut order: Vec<usize> = (0..noisy.len()).collect();
        order.shuffle(rng);
        let mut stats = EpochStats {
            epoch: self.epoch,
            ..Default::default()
        };
        for (i, chunk) in order.chunks(self.cfg.batch_noisy).enumerate() {
            let s_n: Vec<Sample> = chunk.iter().map(|&k| noisy.samples[k].clone()).collect();
            let s_c = sample_clean_batch(meta, self.cfg.batch_clean, rng);
            let report = mlb_step(
                &mut self.student,
                &mut self.opt,
                self.teacher.as_mut(),
                &s_n,
                &s_c,
                &self.cfg,
                &self.weighting,
                rng,
            )?;
            stats.steps += 1;
            stats.bootstrap_loss += report.bootstrap_loss;
            stats.aug_loss += report.aug_loss;
            stats.st_loss += report.st_loss;
            stats.total_loss += report.total_loss;
            on_step(i, chunk, &report);
        }
        let n = stats.steps as f64;
        stats.bootstrap_loss /= n;
        stats.aug_loss /= n;
        stats.st_loss /= n;
        stats.total_loss /= n;
        self.epoch += 1;
        Ok(stats)
    }
}

/// `size` distinct samples drawn uniformly, or the whole set (in random
/// order) when it is smaller than `size`.
pub fn sample_clean_batch<R: Rng + ?Sized>(meta: &Dataset, size: usize, rng: &mut R) -> Vec<Sample> {
    let size = size.min(meta.len());
    index::sample(rng, meta.len(), size)
        .into_iter()
        .map(|i| meta.samples[i].clone())
        .collect()
}

/// Per-sample metrics of `params` on a labeled set, and their summary.
pub fn evaluate(params: &ModelParams, eval: &Dataset) -> Result<(MetricsSummary, Vec<MetricsReport>)> {
    let reports = eval
        .samples
        .iter()
        .map(|s| {
            let pred = pseudo_label(&model_forward(params, &s.image)?)?;
            evaluate_pair(&pred, s.label("evaluation set")?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((summarize(&reports), reports))
}
