//! Baseline training, label initialization, and the meta-reweighting step:
//! a virtual gradient step on weighted noisy pixels, the hypergradient of
//! the clean loss with respect to every pixel weight, clamping and batch
//! normalization, and the real update.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::HyperConfig;
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::model::{forward_on_tape, model_forward, pseudo_label, ModelParams, ParamVars, SegNet};
use crate::optim::Sgd;
use crate::ple::{aug_consistency_on_tape, ensemble_pseudo_label};
use crate::tape::{Tape, Var};
use crate::teacher::{perturb_input, st_consistency_on_tape, TeacherState};
use crate::tensor::Tensor;

/// Pixel weights for the initialized-label term (`n`) and the pseudo-label
/// term (`p`) of one sample, each `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMapPair {
    pub n: Tensor,
    pub p: Tensor,
}

impl WeightMapPair {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            n: Tensor::zeros(&[h, w]),
            p: Tensor::zeros(&[h, w]),
        }
    }
}

/// How the per-pixel weights of a training step are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// Meta-learned from the clean batch.
    Meta,
    /// Constant `1 / (b_n H W)` for both terms.
    Uniform,
    /// Caller-supplied final weights, one pair per noisy sample.
    Planted(Vec<WeightMapPair>),
}

fn image_hw(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (c, h, w) = x.chw(op)?;
    if c != 1 {
        return Err(Error::ShapeMismatch {
            op,
            got: x.shape().to_vec(),
            expected: alloc::vec![1, h, w],
        });
    }
    Ok((h, w))
}

/// Mean per-pixel cross-entropy of `samples` under the recorded parameters.
fn mean_ce_on_tape(tape: &mut Tape, params: &ParamVars, samples: &[Sample], what: &'static str) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::Empty(what));
    }
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let x = tape.constant(s.image.clone())?;
        let z = forward_on_tape(tape, params, x)?;
        let ce = tape.cross_entropy(z, s.label(what)?)?;
        terms.push(tape.mean(ce)?);
    }
    let total = tape.add_all(&terms)?.expect("nonempty batch");
    tape.scale(total, 1.0 / samples.len() as f64)
}

/// Value and gradient of the mean per-pixel cross-entropy over `samples`.
pub fn mean_ce_grad(params: &ModelParams, samples: &[Sample]) -> Result<(f64, ModelParams)> {
    let mut tape = Tape::new();
    let p = params.on_tape(&mut tape, true)?;
    let loss = mean_ce_on_tape(&mut tape, &p, samples, "clean batch")?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), p.gradient(params, &g, &tape)))
}

/// One baseline epoch: shuffled batches of `batch` samples, one SGD step per
/// batch. Returns the mean batch loss.
pub fn baseline_epoch<R: Rng + ?Sized>(
    params: &mut ModelParams,
    opt: &mut Sgd,
    clean: &Dataset,
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::Empty("baseline training set"));
    }
    if batch == 0 {
        return Err(Error::Config(String::from("batch size must be positive")));
    }
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(batch) {
        let samples: Vec<Sample> = chunk.iter().map(|&i| clean.samples[i].clone()).collect();
        let (loss, g) = mean_ce_grad(params, &samples)?;
        opt.step(params, &g)?;
        total += loss;
        steps += 1;
    }
    Ok(total / steps as f64)
}

/// Train from a fresh initialization on labeled data by minimizing the mean
/// cross-entropy with SGD (momentum and weight decay), `cfg.epochs_baseline`
/// passes over shuffled batches of `cfg.batch_baseline`.
pub fn baseline_train<R: Rng + ?Sized>(clean: &Dataset, cfg: &HyperConfig, rng: &mut R) -> Result<ModelParams> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(Error::Empty("baseline training set"));
    }
    clean.hw()?;
    let mut params = SegNet::new(cfg.width).init(rng);
    let mut opt = Sgd::new(&params, cfg.baseline_lr, cfg.momentum, cfg.weight_decay);
    for _ in 0..cfg.epochs_baseline {
        baseline_epoch(&mut params, &mut opt, clean, cfg.batch_baseline, rng)?;
    }
    Ok(params)
}

/// Label every unlabeled image with the argmax prediction of `theta_c`,
/// preserving order.
pub fn init_labels(theta_c: &ModelParams, unlabeled: &Dataset) -> Result<Dataset> {
    let samples = unlabeled
        .samples
        .iter()
        .map(|s| {
            let mask = pseudo_label(&model_forward(theta_c, &s.image)?)?;
            Ok(Sample {
                image: s.image.clone(),
                mask: Some(mask),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        split: Split::Initialized,
        samples,
    })
}

/// Pseudo label of one image: the plain argmax, or the augmentation
/// ensemble when `specs` is nonempty.
pub fn make_pseudo_label(params: &ModelParams, x: &Tensor, specs: &[crate::ple::Augmentation]) -> Result<LabelMask> {
    if specs.is_empty() {
        pseudo_label(&model_forward(params, x)?)
    } else {
        ensemble_pseudo_label(params, x, specs)
    }
}

/// The noisy batch recorded on one tape: logits and both per-pixel loss maps.
struct NoisyPass {
    tape: Tape,
    params: ParamVars,
    logits: Vec<Var>,
    ce_n: Vec<Var>,
    ce_p: Vec<Var>,
}

impl NoisyPass {
    /// Record the batch. Without `labels_p` the pseudo labels are the argmax
    /// of the recorded logits.
    fn record(theta: &ModelParams, s_n: &[Sample], labels_p: Option<&[LabelMask]>) -> Result<(Self, Vec<LabelMask>)> {
        if s_n.is_empty() {
            return Err(Error::Empty("noisy batch"));
        }
        if let Some(l) = labels_p {
            if l.len() != s_n.len() {
                return Err(Error::ShapeMismatch {
                    op: "meta_weight_maps",
                    got: alloc::vec![l.len()],
                    expected: alloc::vec![s_n.len()],
                });
            }
        }
        let mut tape = Tape::new();
        let params = theta.on_tape(&mut tape, true)?;
        let mut logits = Vec::with_capacity(s_n.len());
        let mut ce_n = Vec::with_capacity(s_n.len());
        let mut ce_p = Vec::with_capacity(s_n.len());
        let mut labels = Vec::with_capacity(s_n.len());
        for (j, s) in s_n.iter().enumerate() {
            image_hw(&s.image, "noisy batch")?;
            let x = tape.constant(s.image.clone())?;
            let z = forward_on_tape(&mut tape, &params, x)?;
            let yp = match labels_p {
                Some(l) => l[j].clone(),
                None => pseudo_label(tape.value(z))?,
            };
            ce_n.push(tape.cross_entropy(z, s.label("noisy batch")?)?);
            ce_p.push(tape.cross_entropy(z, &yp)?);
            logits.push(z);
            labels.push(yp);
        }
        let pass = Self {
            tape,
            params,
            logits,
            ce_n,
            ce_p,
        };
        Ok((pass, labels))
    }

    /// `alpha * beta * <g_meta, d loss_pixel / d theta>` for every pixel of
    /// both loss maps, from one tangent pass along `g_meta`.
    fn raw_weights(&self, g_meta: &ModelParams, cfg: &HyperConfig) -> Result<Vec<WeightMapPair>> {
        let tangents = self.tape.jvp(&self.params.seeds(g_meta)?)?;
        let k = cfg.alpha * cfg.beta;
        Ok(self
            .ce_n
            .iter()
            .zip(&self.ce_p)
            .map(|(&n, &p)| WeightMapPair {
                n: tangents.get_or_zeros(n, &self.tape).scale(k),
                p: tangents.get_or_zeros(p, &self.tape).scale(k),
            })
            .collect())
    }
}

/// Raw meta weights: the negative `beta`-scaled gradient, at zero weights,
/// of the clean-batch mean cross-entropy after one virtual step
/// `theta - alpha * grad(sum w^n L^n + w^p L^p)`.
///
/// Because the virtual step is the identity at zero weights, this is
/// `alpha * beta * <g_meta, grad loss_pixel(theta)>` with `g_meta` the clean
/// loss gradient, computed with one reverse pass and one tangent pass.
/// `s_n` carries the initialized labels; `labels_p` the pseudo labels.
pub fn meta_weight_maps(
    theta: &ModelParams,
    s_n: &[Sample],
    s_c: &[Sample],
    labels_p: &[LabelMask],
    cfg: &HyperConfig,
) -> Result<Vec<WeightMapPair>> {
    if s_c.is_empty() {
        return Err(Error::Empty("clean batch"));
    }
    let (_, g_meta) = mean_ce_grad(theta, s_c)?;
    NoisyPass::record(theta, s_n, Some(labels_p))?
        .0
        .raw_weights(&g_meta, cfg)
}

/// Clamp at zero, then divide each family by its batch-wide sum plus `eps`.
pub fn clamp_normalize(raw: &[WeightMapPair], eps: f64) -> Vec<WeightMapPair> {
    let clamped: Vec<WeightMapPair> = raw
        .iter()
        .map(|w| WeightMapPair {
            n: w.n.map(|v| v.max(0.0)),
            p: w.p.map(|v| v.max(0.0)),
        })
        .collect();
    let sum_n: f64 = clamped.iter().map(|w| w.n.sum()).sum();
    let sum_p: f64 = clamped.iter().map(|w| w.p.sum()).sum();
    clamped
        .into_iter()
        .map(|w| WeightMapPair {
            n: w.n.scale(1.0 / (sum_n + eps)),
            p: w.p.scale(1.0 / (sum_p + eps)),
        })
        .collect()
}

/// Fixed bootstrapping weights `1 / (b_n H W)` for both terms.
pub fn uniform_weights(batch: usize, h: usize, w: usize) -> Vec<WeightMapPair> {
    let v = 1.0 / (batch * h * w) as f64;
    (0..batch)
        .map(|_| WeightMapPair {
            n: Tensor::full(&[h, w], v),
            p: Tensor::full(&[h, w], v),
        })
        .collect()
}

/// What one training step computed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Final (clamped and normalized, uniform, or planted) weights.
    pub weights: Vec<WeightMapPair>,
    /// Raw meta weights, when meta-learned.
    pub raw: Option<Vec<WeightMapPair>>,
    pub labels_p: Vec<LabelMask>,
    pub bootstrap_loss: f64,
    pub aug_loss: f64,
    pub st_loss: f64,
    pub total_loss: f64,
}

/// One training step on a noisy batch `s_n` (initialized labels) and a clean
/// batch `s_c`:
///
/// 1. pseudo labels from the current student (augmentation ensemble when
///    `cfg.ple` is nonempty);
/// 2. weights per `weighting`;
/// 3. an SGD update on the weighted bootstrapping loss plus
///    `lambda_aug / b_n` times the augmentation consistency and
///    `lambda_st / b_n` times the teacher consistency summed over the batch,
///    followed by the teacher's moving-average update.
#[allow(clippy::too_many_arguments)]
pub fn mlb_step<R: Rng + ?Sized>(
    student: &mut ModelParams,
    opt: &mut Sgd,
    teacher: Option<&mut TeacherState>,
    s_n: &[Sample],
    s_c: &[Sample],
    cfg: &HyperConfig,
    weighting: &Weighting,
    rng: &mut R,
) -> Result<StepReport> {
    let ensembled = if cfg.ple.is_empty() {
        None
    } else {
        Some(
            s_n.iter()
                .map(|s| ensemble_pseudo_label(student, &s.image, &cfg.ple))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let (mut pass, labels_p) = NoisyPass::record(student, s_n, ensembled.as_deref())?;

    let (h, w) = image_hw(&s_n[0].image, "noisy batch")?;
    let (weights, raw) = match weighting {
        Weighting::Meta => {
            if s_c.is_empty() {
                return Err(Error::Empty("clean batch"));
            }
            let (_, g_meta) = mean_ce_grad(student, s_c)?;
            let raw = pass.raw_weights(&g_meta, cfg)?;
            (clamp_normalize(&raw, cfg.eps), Some(raw))
        }
        Weighting::Uniform => (uniform_weights(s_n.len(), h, w), None),
        Weighting::Planted(planted) => {
            if planted.len() != s_n.len() {
                return Err(Error::ShapeMismatch {
                    op: "mlb_step",
                    got: alloc::vec![planted.len()],
                    expected: alloc::vec![s_n.len()],
                });
            }
            (planted.clone(), None)
        }
    };

    let tape = &mut pass.tape;
    let mut boot_terms = Vec::with_capacity(2 * s_n.len());
    for ((&ln, &lp), wm) in pass.ce_n.iter().zip(&pass.ce_p).zip(&weights) {
        for (l, m) in [(ln, &wm.n), (lp, &wm.p)] {
            let weighted = tape.mul_const(l, m.clone())?;
            boot_terms.push(tape.sum(weighted)?);
        }
    }
    let boot = tape.add_all(&boot_terms)?.expect("nonempty batch");
    let mut total_terms = alloc::vec![boot];
    let per_sample = 1.0 / s_n.len() as f64;

    let mut aug = None;
    if !cfg.ple.is_empty() && cfg.lambda_aug > 0.0 {
        let mut terms = Vec::with_capacity(s_n.len());
        for (s, &z) in s_n.iter().zip(&pass.logits) {
            terms.push(aug_consistency_on_tape(
                tape,
                &pass.params,
                &s.image,
                &cfg.ple,
                Some(z),
            )?);
        }
        let sum = tape.add_all(&terms)?.expect("nonempty batch");
        let v = tape.scale(sum, per_sample)?;
        aug = Some(v);
        total_terms.push(tape.scale(v, cfg.lambda_aug)?);
    }

    let mut st = None;
    if let Some(t) = teacher.as_deref() {
        if cfg.lambda_st > 0.0 {
            let mut terms = Vec::with_capacity(s_n.len());
            for (s, &z) in s_n.iter().zip(&pass.logits) {
                let xt = perturb_input(&s.image, cfg.gamma, cfg.mu, cfg.sigma, rng)?;
                let target = t.probabilities(&xt)?;
                terms.push(st_consistency_on_tape(tape, z, &target)?);
            }
            let sum = tape.add_all(&terms)?.expect("nonempty batch");
            let v = tape.scale(sum, per_sample)?;
            st = Some(v);
            total_terms.push(tape.scale(v, cfg.lambda_st)?);
        }
    }

    let total = tape.add_all(&total_terms)?.expect("bootstrap term");
    let grads = tape.backward(total)?;
    let grad = pass.params.gradient(student, &grads, tape);
    let report = StepReport {
        bootstrap_loss: tape.value(boot).item(),
        aug_loss: aug.map_or(0.0, |v| tape.value(v).item()),
        st_loss: st.map_or(0.0, |v| tape.value(v).item()),
        total_loss: tape.value(total).item(),
        weights,
        raw,
        labels_p,
    };
    opt.step(student, &grad)?;
    if let Some(t) = teacher {
        t.ema_update(student)?;
    }
    if !report.total_loss.is_finite() {
        return Err(Error::NonFinite { op: "mlb_step" });
    }
    Ok(report)
}
