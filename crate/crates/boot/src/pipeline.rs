//! Baseline training, label initialization and corruption, bootstrapping,
//! per-epoch evaluation, checkpoints, and the derived runs (ablation and
//! weight dumps).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mlb_seg_core::data::{corrupt_mask, generate, Dataset, Sample, Split};
use mlb_seg_core::meta::{baseline_epoch, init_labels, StepReport, Weighting};
use mlb_seg_core::optim::Sgd;
use mlb_seg_core::ple::Augmentation;
use mlb_seg_core::teacher::TeacherState;
use mlb_seg_core::train::{evaluate, Trainer};
use mlb_seg_core::{LabelMask, ModelParams, SegNet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, ExperimentConfig, Mode};
use crate::error::{io_err, BootError, Result};
use crate::manifest::Manifest;
use crate::report::{
    write_ablation, write_ablation_runs, write_final, write_report, AblationRow, EpochRow, FinalReport, Phase,
};
use crate::snapshot::{load_checkpoint, save_checkpoint, save_params, Checkpoint};
use crate::{mseg, pgm};

/// Random stream identifiers. Every random draw in a run comes from a
/// ChaCha stream keyed by the seed and one of these, so any epoch can be
/// replayed without the generator state of the epochs before it.
const STREAM_INIT: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_DATA: u64 = 0x10;
const STREAM_BASELINE_EPOCH: u64 = 1 << 32;
const STREAM_BOOTSTRAP_EPOCH: u64 = 2 << 32;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The four dataset files a run reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub clean: Dataset,
    pub meta: Dataset,
    pub unlabeled: Dataset,
    pub eval: Dataset,
}

impl Splits {
    fn iter(&self) -> [(Split, &Dataset); 4] {
        [
            (Split::Clean, &self.clean),
            (Split::Meta, &self.meta),
            (Split::Unlabeled, &self.unlabeled),
            (Split::Eval, &self.eval),
        ]
    }

    /// Clean and meta samples together: every labeled training image.
    pub fn labeled(&self) -> Dataset {
        Dataset {
            split: Split::Clean,
            samples: self.clean.samples.iter().chain(&self.meta.samples).cloned().collect(),
        }
    }
}

/// Generated splits plus the masks withheld from the unlabeled split.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub splits: Splits,
    pub unlabeled_truth: Vec<LabelMask>,
}

/// Generate all splits from independent streams of `cfg.seed`. Pixel values
/// are rounded to `f32` so the in-memory data equals what a file holds.
pub fn generate_data(cfg: &DataConfig) -> Result<Generated> {
    let make = |split: Split, k: u64| -> Result<Dataset> {
        let mut ds = generate(&cfg.gen_config(split), split, &mut stream(cfg.seed, STREAM_DATA + k))?;
        for s in &mut ds.samples {
            for v in s.image.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
        Ok(ds)
    };
    let mut unlabeled = make(Split::Unlabeled, 2)?;
    let unlabeled_truth = unlabeled
        .samples
        .iter_mut()
        .map(|s| s.mask.take().expect("generated samples are labeled"))
        .collect();
    Ok(Generated {
        splits: Splits {
            clean: make(Split::Clean, 0)?,
            meta: make(Split::Meta, 1)?,
            unlabeled,
            eval: make(Split::Eval, 3)?,
        },
        unlabeled_truth,
    })
}

/// Write one MSEG file per split and the manifest into `dir`.
pub fn write_data(dir: &Path, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Manifest::default();
    for (split, ds) in splits.iter() {
        let name = PathBuf::from(format!("{}.mseg", split.name()));
        mseg::save(&dir.join(&name), ds)?;
        manifest.entries.push((split, name));
    }
    manifest.write(dir)
}

/// Read the splits listed in `dir/manifest.txt`. Clean, meta, and eval
/// samples must carry masks; masks in the unlabeled file are dropped.
pub fn load_data(dir: &Path) -> Result<Splits> {
    let manifest = Manifest::read(dir)?;
    let read = |split: Split| -> Result<Dataset> {
        let rel = manifest.get(split).ok_or_else(|| {
            BootError::Invalid(format!(
                "{}: no `{split}` entry",
                dir.join(crate::manifest::FILE_NAME).display()
            ))
        })?;
        let path = dir.join(rel);
        let mut ds = mseg::load(&path, split)?;
        if ds.is_empty() {
            return Err(BootError::Invalid(format!("{}: no samples", path.display())));
        }
        if split == Split::Unlabeled {
            ds.samples.iter_mut().for_each(|s| s.mask = None);
        } else if let Some(i) = ds.samples.iter().position(|s| s.mask.is_none()) {
            return Err(BootError::Invalid(format!(
                "{}: sample {i} has no mask",
                path.display()
            )));
        }
        Ok(ds)
    };
    let splits = Splits {
        clean: read(Split::Clean)?,
        meta: read(Split::Meta)?,
        unlabeled: read(Split::Unlabeled)?,
        eval: read(Split::Eval)?,
    };
    let hw = splits.clean.hw()?;
    for (split, ds) in splits.iter() {
        if ds.hw()? != hw {
            return Err(BootError::Invalid(format!(
                "split `{split}` has {:?} images, clean has {hw:?}",
                ds.hw()?
            )));
        }
    }
    Ok(splits)
}

/// Initialized labels: the baseline's predictions on the unlabeled images,
/// then boundary corruption.
pub fn initialized_labels(cfg: &ExperimentConfig, theta_c: &ModelParams, unlabeled: &Dataset) -> Result<Dataset> {
    let mut ds = init_labels(theta_c, unlabeled)?;
    let mut rng = stream(cfg.hyper.seed, STREAM_LABELS);
    for s in &mut ds.samples {
        let m = s.mask.as_ref().expect("initialized labels are present");
        s.mask = Some(corrupt_mask(m, &cfg.corruption, &mut rng)?);
    }
    Ok(ds)
}

/// One training step as seen by a step hook.
pub struct StepEvent<'a> {
    /// Step index counted from the start of the bootstrapping phase.
    pub global_step: usize,
    /// Zero-based bootstrapping epoch.
    pub epoch: usize,
    /// Indices into `noisy` of the batch.
    pub batch: &'a [usize],
    pub noisy: &'a Dataset,
    pub report: &'a StepReport,
}

pub type StepHook<'a> = &'a mut dyn FnMut(&StepEvent) -> Result<()>;

/// The finished supervised phase, reusable by runs that share a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub params: ModelParams,
    pub history: Vec<EpochRow>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where to write reports, snapshots, and checkpoints. Nothing is
    /// written when absent.
    pub out_dir: Option<&'a Path>,
    /// Continue from `out_dir/checkpoint.bin`.
    pub resume: bool,
    /// Stop (as if interrupted) after this many epochs in this call.
    pub stop_after: Option<usize>,
    /// Skip the baseline phase and start from this one.
    pub baseline: Option<&'a BaselineResult>,
    pub on_step: Option<StepHook<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub history: Vec<EpochRow>,
    /// Present once the run has completed.
    pub final_report: Option<FinalReport>,
    pub student: ModelParams,
    /// Parameters at the end of the baseline phase, once reached.
    pub baseline: Option<ModelParams>,
}

impl RunOutcome {
    pub fn baseline_result(&self) -> Option<BaselineResult> {
        Some(BaselineResult {
            params: self.baseline.clone()?,
            history: self
                .history
                .iter()
                .filter(|r| r.phase == Phase::Baseline)
                .copied()
                .collect(),
        })
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

struct Output<'a> {
    dir: &'a Path,
}

impl Output<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn snapshot(&self, name: &str, p: &ModelParams) -> Result<()> {
        save_params(&self.dir.join("snapshots").join(name), p)
    }

    fn checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        write_report(&self.path("report.csv"), &ck.history)?;
        let next = match ck.phase {
            Phase::Baseline => STREAM_BASELINE_EPOCH,
            _ => STREAM_BOOTSTRAP_EPOCH,
        } + ck.epochs_done as u64;
        let state = format!(
            "generator = chacha8\nseed = {}\nphase = {}\nepochs_done = {}\nnext_stream = {next}\n",
            ck.seed, ck.phase, ck.epochs_done
        );
        let rng_path = self.path("rng_state.txt");
        fs::write(&rng_path, state).map_err(io_err(&rng_path))?;
        save_checkpoint(&self.path(CHECKPOINT_FILE), ck)
    }
}

fn eval_row(phase: Phase, epoch: usize, params: &ModelParams, eval: &Dataset, losses: [f64; 4]) -> Result<EpochRow> {
    let (summary, _) = evaluate(params, eval)?;
    Ok(EpochRow {
        phase,
        epoch,
        train_loss: losses[0],
        bootstrap_loss: losses[1],
        aug_loss: losses[2],
        st_loss: losses[3],
        eval: summary,
    })
}

/// First epoch with the highest eval Dice.
fn best_of(rows: &[EpochRow]) -> (usize, f64) {
    rows.iter().fold((0, f64::NEG_INFINITY), |best, r| {
        if r.eval.dice > best.1 {
            (r.epoch, r.eval.dice)
        } else {
            best
        }
    })
}

/// Record a finished epoch: best tracking, snapshots, checkpoint.
fn finish_epoch(ck: &mut Checkpoint, row: EpochRow, out: Option<&Output>) -> Result<()> {
    let improved = row.epoch == 0 || row.eval.dice > ck.best.1;
    if improved {
        ck.best = (row.epoch, row.eval.dice);
    }
    ck.history.push(row);
    if let Some(o) = out {
        if improved {
            o.snapshot("best.params", &ck.student)?;
        }
        o.checkpoint(ck)?;
    }
    Ok(())
}

/// Switch a checkpoint from the finished baseline to the bootstrapping phase.
fn enter_bootstrap(ck: &mut Checkpoint, cfg: &ExperimentConfig, phase: Phase) {
    let theta_c = ck.student.clone();
    ck.baseline = Some(theta_c.clone());
    ck.phase = phase;
    ck.epochs_done = 0;
    ck.velocity = theta_c.zeros_like();
    ck.teacher = cfg.mean_teacher.then(|| theta_c.clone());
    // The warm start is evaluated exactly like the last baseline epoch.
    let last = *ck.history.last().expect("baseline rows precede bootstrapping");
    ck.best = (0, last.eval.dice);
    ck.history.push(EpochRow {
        phase,
        epoch: 0,
        train_loss: 0.0,
        bootstrap_loss: 0.0,
        aug_loss: 0.0,
        st_loss: 0.0,
        eval: last.eval,
    });
}

/// Run (or resume) one experiment: baseline, then fixed-weight or
/// meta-learned bootstrapping as configured, evaluating after every epoch.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Splits, mut opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let h = &cfg.hyper;
    let mode = cfg.mode();
    let out = opts.out_dir.map(|dir| Output { dir });
    if let Some(o) = &out {
        let snaps = o.dir.join("snapshots");
        fs::create_dir_all(&snaps).map_err(io_err(&snaps))?;
        let cfg_path = o.path("config.txt");
        fs::write(&cfg_path, cfg.render()).map_err(io_err(&cfg_path))?;
    }
    let fingerprint = cfg.resume_fingerprint();
    let mut ck = if opts.resume {
        let o = out
            .as_ref()
            .ok_or_else(|| BootError::Invalid("resuming needs an output directory".into()))?;
        let ck = load_checkpoint(&o.path(CHECKPOINT_FILE))?;
        if ck.fingerprint != fingerprint {
            return Err(BootError::Invalid(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        ck
    } else if let Some(b) = opts.baseline {
        let mut ck = Checkpoint {
            fingerprint: fingerprint.clone(),
            seed: h.seed,
            phase: Phase::Baseline,
            epochs_done: h.epochs_baseline,
            student: b.params.clone(),
            velocity: b.params.zeros_like(),
            teacher: None,
            baseline: None,
            best: (0, 0.0),
            history: b.history.clone(),
        };
        if let Some(o) = &out {
            o.snapshot("baseline.params", &b.params)?;
        }
        match mode {
            Mode::Baseline => {
                ck.baseline = Some(b.params.clone());
                ck.best = best_of(&ck.history);
            }
            Mode::Fixed => enter_bootstrap(&mut ck, cfg, Phase::Fixed),
            Mode::Meta => enter_bootstrap(&mut ck, cfg, Phase::Mlb),
        }
        if let Some(o) = &out {
            if mode != Mode::Baseline {
                o.snapshot("best.params", &ck.student)?;
            }
            o.checkpoint(&ck)?;
        }
        ck
    } else {
        let init = SegNet::new(h.width).init(&mut stream(h.seed, STREAM_INIT));
        let mut ck = Checkpoint {
            fingerprint: fingerprint.clone(),
            seed: h.seed,
            phase: Phase::Baseline,
            epochs_done: 0,
            velocity: init.zeros_like(),
            student: init,
            teacher: None,
            baseline: None,
            best: (0, 0.0),
            history: Vec::new(),
        };
        let row = eval_row(Phase::Baseline, 0, &ck.student, &data.eval, [0.0; 4])?;
        finish_epoch(&mut ck, row, out.as_ref())?;
        ck
    };

    let mut budget = opts.stop_after;
    let mut spend = || match &mut budget {
        Some(0) => false,
        Some(n) => {
            *n -= 1;
            true
        }
        None => true,
    };
    let stopped = |ck: Checkpoint| RunOutcome {
        history: ck.history,
        final_report: None,
        student: ck.student,
        baseline: ck.baseline,
    };

    if ck.phase == Phase::Baseline {
        let labeled = data.labeled();
        let mut opt = Sgd::new(&ck.student, h.baseline_lr, h.momentum, h.weight_decay);
        opt.set_velocity(ck.velocity.clone())?;
        while ck.epochs_done < h.epochs_baseline {
            if !spend() {
                return Ok(stopped(ck));
            }
            let mut rng = stream(h.seed, STREAM_BASELINE_EPOCH + ck.epochs_done as u64);
            let loss = baseline_epoch(&mut ck.student, &mut opt, &labeled, h.batch_baseline, &mut rng)?;
            ck.velocity = opt.velocity().clone();
            ck.epochs_done += 1;
            let row = eval_row(
                Phase::Baseline,
                ck.epochs_done,
                &ck.student,
                &data.eval,
                [loss, 0.0, 0.0, 0.0],
            )?;
            finish_epoch(&mut ck, row, out.as_ref())?;
        }
        if let Some(o) = &out {
            o.snapshot("baseline.params", &ck.student)?;
        }
        match mode {
            Mode::Baseline => ck.baseline = Some(ck.student.clone()),
            Mode::Fixed => enter_bootstrap(&mut ck, cfg, Phase::Fixed),
            Mode::Meta => enter_bootstrap(&mut ck, cfg, Phase::Mlb),
        }
        if let Some(o) = &out {
            if ck.phase != Phase::Baseline {
                o.snapshot("best.params", &ck.student)?;
            }
            o.checkpoint(&ck)?;
        }
    }

    if ck.phase != Phase::Baseline {
        let theta_c = ck.baseline.clone().expect("bootstrapping starts from a baseline");
        let noisy = initialized_labels(cfg, &theta_c, &data.unlabeled)?;
        let weighting = if ck.phase == Phase::Mlb {
            Weighting::Meta
        } else {
            Weighting::Uniform
        };
        let mut trainer = Trainer::new(ck.student.clone(), h.clone(), weighting, false)?;
        trainer.opt.set_velocity(ck.velocity.clone())?;
        trainer.teacher = match &ck.teacher {
            Some(t) => Some(TeacherState::new(t.clone(), h.ema_decay)?),
            None => None,
        };
        trainer.epoch = ck.epochs_done;
        let steps_per_epoch = data.unlabeled.len().div_ceil(h.batch_noisy);
        while ck.epochs_done < h.epochs_mlb {
            if !spend() {
                return Ok(stopped(ck));
            }
            let epoch = ck.epochs_done;
            let mut rng = stream(h.seed, STREAM_BOOTSTRAP_EPOCH + epoch as u64);
            let mut hook_err = None;
            let stats = trainer.run_epoch(&noisy, &data.meta, &mut rng, |i, batch, report| {
                if let (Some(hook), None) = (opts.on_step.as_mut(), &hook_err) {
                    let ev = StepEvent {
                        global_step: epoch * steps_per_epoch + i,
                        epoch,
                        batch,
                        noisy: &noisy,
                        report,
                    };
                    if let Err(e) = hook(&ev) {
                        hook_err = Some(e);
                    }
                }
            })?;
            if let Some(e) = hook_err {
                return Err(e);
            }
            ck.student = trainer.student.clone();
            ck.velocity = trainer.opt.velocity().clone();
            ck.teacher = trainer.teacher.as_ref().map(|t| t.params.clone());
            ck.epochs_done += 1;
            let losses = [stats.total_loss, stats.bootstrap_loss, stats.aug_loss, stats.st_loss];
            let row = eval_row(ck.phase, ck.epochs_done, &ck.student, &data.eval, losses)?;
            finish_epoch(&mut ck, row, out.as_ref())?;
        }
    }

    let phase_rows: Vec<&EpochRow> = ck.history.iter().filter(|r| r.phase == ck.phase).collect();
    let last = **phase_rows.last().expect("every phase has an epoch-0 row");
    let best = **phase_rows
        .iter()
        .find(|r| r.epoch == ck.best.0)
        .expect("best epoch is in the history");
    let final_report = FinalReport {
        phase: ck.phase,
        final_epoch: last.epoch,
        final_eval: last.eval,
        best_epoch: best.epoch,
        best_eval: best.eval,
    };
    if let Some(o) = &out {
        o.snapshot("final.params", &ck.student)?;
        write_report(&o.path("report.csv"), &ck.history)?;
        write_final(&o.path("final.csv"), &final_report)?;
    }
    Ok(RunOutcome {
        history: ck.history,
        final_report: Some(final_report),
        student: ck.student,
        baseline: ck.baseline,
    })
}

/// Worker count: `MLB_BOOT_THREADS` if set, else the available cores.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("MLB_BOOT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(BootError::Invalid(format!(
                "MLB_BOOT_THREADS must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// `f(0), ..., f(n - 1)` on up to `threads` scoped workers, results in
/// index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = threads.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("no worker panicked")[i] = Some(v);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}

/// Augmentations used for ablation rows with label enhancement when the
/// config names none: one zoom in, two zoom outs, and a flip.
pub fn default_ple() -> Vec<Augmentation> {
    vec![
        Augmentation::ZoomIn(2),
        Augmentation::ZoomOut(2),
        Augmentation::ZoomOut(4),
        Augmentation::FlipH,
    ]
}

/// The five ablation configurations, in table order.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    let ple = if base.hyper.ple.is_empty() {
        default_ple()
    } else {
        base.hyper.ple.clone()
    };
    let row = |name, mlb: bool, teacher: bool, with_ple: bool| {
        let mut c = base.clone();
        c.mlb = mlb;
        c.bootstrap = !mlb;
        c.mean_teacher = teacher;
        c.hyper.ple = if with_ple { ple.clone() } else { Vec::new() };
        (name, c)
    };
    vec![
        row("fixed-weight bootstrapping", false, false, false),
        row("mlb", true, false, false),
        row("mlb+teacher", true, true, false),
        row("mlb+ple", true, false, true),
        row("mlb+ple+teacher", true, true, true),
    ]
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Train `configs` over `seeds`, sharing one baseline per seed, and return
/// one row per configuration with its final eval metrics per seed. Runs
/// write into `out_dir/<row>_<name>/seed_<seed>` when `out_dir` is given.
pub fn run_grid(
    configs: &[(&str, ExperimentConfig)],
    data: &Splits,
    seeds: &[u64],
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(BootError::Invalid("at least one seed is required".into()));
    }
    if configs.is_empty() {
        return Ok(Vec::new());
    }
    for (_, c) in configs {
        c.validate()?;
    }
    let baselines = parallel_map(seeds.len(), threads, |i| {
        let mut c = configs[0].1.clone();
        c.hyper.seed = seeds[i];
        c.mlb = false;
        c.bootstrap = false;
        c.mean_teacher = false;
        c.hyper.ple.clear();
        let outcome = run_experiment(&c, data, RunOptions::default())?;
        Ok(outcome.baseline_result().expect("baseline run completes"))
    })
    .into_iter()
    .collect::<Result<Vec<BaselineResult>>>()?;
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|r| (0..seeds.len()).map(move |s| (r, s)))
        .collect();
    let results = parallel_map(jobs.len(), threads, |j| {
        let (r, s) = jobs[j];
        let mut c = configs[r].1.clone();
        c.hyper.seed = seeds[s];
        let dir = out_dir.map(|d| {
            d.join(format!("{}_{}", r + 1, slug(configs[r].0)))
                .join(format!("seed_{}", seeds[s]))
        });
        let opts = RunOptions {
            out_dir: dir.as_deref(),
            baseline: Some(&baselines[s]),
            ..Default::default()
        };
        let outcome = run_experiment(&c, data, opts)?;
        Ok(outcome.final_report.expect("run completes").final_eval)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(configs
        .iter()
        .enumerate()
        .map(|(r, (name, _))| AblationRow {
            name: name.to_string(),
            seeds: seeds.to_vec(),
            finals: results[r * seeds.len()..(r + 1) * seeds.len()].to_vec(),
        })
        .collect())
}

/// The five-row ablation, written to `out_dir/ablation.csv` (mean and
/// standard deviation per row) and `out_dir/ablation_runs.csv` (per seed).
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &Splits,
    seeds: &[u64],
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let configs = ablation_configs(base);
    let runs = out_dir.join("runs");
    let rows = run_grid(&configs, data, seeds, Some(&runs), threads)?;
    write_ablation(&out_dir.join("ablation.csv"), &rows)?;
    write_ablation_runs(&out_dir.join("ablation_runs.csv"), &rows)?;
    Ok(rows)
}

/// Steps in the bootstrapping phase.
pub fn total_steps(cfg: &ExperimentConfig, data: &Splits) -> usize {
    cfg.hyper.epochs_mlb * data.unlabeled.len().div_ceil(cfg.hyper.batch_noisy)
}

/// Files written for one dumped step.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpedStep {
    pub step: usize,
    pub noisy: PathBuf,
    pub pseudo: PathBuf,
    pub noisy_pgm: PathBuf,
    pub pseudo_pgm: PathBuf,
}

/// Train with meta-learned weights and, at each listed bootstrapping step,
/// write the batch's normalized weight maps for both label families: one
/// MSEG file per family with one unlabeled `[H, W]` record per batch
/// sample, and a PGM strip scaled to the family's largest weight.
pub fn dump_weight_maps(
    cfg: &ExperimentConfig,
    data: &Splits,
    steps: &[usize],
    out_dir: &Path,
) -> Result<Vec<DumpedStep>> {
    cfg.validate()?;
    if cfg.mode() != Mode::Meta {
        return Err(BootError::Invalid("dump-weights requires mlb = true".into()));
    }
    let total = total_steps(cfg, data);
    if let Some(&s) = steps.iter().find(|&&s| s >= total) {
        return Err(BootError::Invalid(format!(
            "step {s} is out of range: the run has {total} steps (0..={})",
            total.saturating_sub(1)
        )));
    }
    let dir = out_dir.join("weights");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let (h, w) = data.unlabeled.hw()?;
    let last = steps.iter().copied().max();
    let mut written = Vec::new();
    let mut hook = |ev: &StepEvent| -> Result<()> {
        if !steps.contains(&ev.global_step) {
            return Ok(());
        }
        let base = format!("step_{:06}", ev.global_step);
        let family = |pick: fn(&mlb_seg_core::WeightMapPair) -> &Tensor| -> Vec<Vec<f64>> {
            ev.report.weights.iter().map(|m| pick(m).data().to_vec()).collect()
        };
        let mut paths = Vec::new();
        for (suffix, maps) in [("n", family(|m| &m.n)), ("p", family(|m| &m.p))] {
            let samples: Vec<Sample> = maps
                .iter()
                .map(|m| Sample {
                    image: Tensor::new(vec![1, h, w], m.clone()).expect("weight maps match the images"),
                    mask: None,
                })
                .collect();
            let mseg_path = dir.join(format!("{base}_{suffix}.mseg"));
            mseg::save_samples(&mseg_path, h, w, &samples)?;
            let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
            let (pw, ph, px) = pgm::render_row(&refs, h, w);
            let pgm_path = dir.join(format!("{base}_{suffix}.pgm"));
            pgm::save(&pgm_path, pw, ph, &px)?;
            paths.push((mseg_path, pgm_path));
        }
        let (p, n) = (paths.pop().unwrap(), paths.pop().unwrap());
        written.push(DumpedStep {
            step: ev.global_step,
            noisy: n.0,
            pseudo: p.0,
            noisy_pgm: n.1,
            pseudo_pgm: p.1,
        });
        Ok(())
    };
    // Only train as far as the last requested step.
    let mut c = cfg.clone();
    if let Some(last) = last {
        c.hyper.epochs_mlb = last / data.unlabeled.len().div_ceil(cfg.hyper.batch_noisy) + 1;
    }
    run_experiment(
        &c,
        data,
        RunOptions {
            on_step: Some(&mut hook),
            ..Default::default()
        },
    )?;
    written.sort_by_key(|d| d.step);
    Ok(written)
}
