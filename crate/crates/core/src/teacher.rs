//! Mean teacher: Gaussian input perturbation, student/teacher probability
//! consistency, and exponential-moving-average parameter tracking.

use alloc::format;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::HyperConfig;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ModelParams, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// EMA copy of the student.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams,
    decay: f64,
}

impl TeacherState {
    pub fn new(params: ModelParams, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { params, decay })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// `theta_T <- decay * theta_T + (1 - decay) * theta_S`, evaluated as
    /// `theta_T + (1 - decay) * (theta_S - theta_T)` so that equal
    /// parameters stay bit-identical.
    pub fn ema_update(&mut self, student: &ModelParams) -> Result<()> {
        self.params.check_layout(student)?;
        let d = self.decay;
        for (t, s) in self.params.tensors_mut().iter_mut().zip(student.tensors()) {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a += (1.0 - d) * (b - *a);
            }
        }
        Ok(())
    }

    /// Teacher class probabilities on `x`, treated as a constant target.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.on_tape(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let z = forward_on_tape(&mut tape, &p, xv)?;
        let s = tape.softmax(z)?;
        Ok(tape.value(s).clone())
    }
}

/// `x + gamma * N(mu, sigma)`, drawn independently per pixel.
pub fn perturb_input<R: Rng + ?Sized>(x: &Tensor, gamma: f64, mu: f64, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(gamma >= 0.0 && sigma >= 0.0) {
        return Err(Error::Config(format!(
            "gamma and sigma must be non-negative, got {gamma} and {sigma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::Config(format!("{e}")))?;
    let data = x.data();
    Ok(Tensor::from_fn(x.shape(), |i| data[i] + gamma * normal.sample(rng)))
}

/// Record `1/(HW) * sum_{r,s} |softmax(student)_{r,s} - target_{r,s}|^2`
/// where `target` is the teacher's (constant) probability field.
pub fn st_consistency_on_tape(tape: &mut Tape, student_logits: Var, target: &Tensor) -> Result<Var> {
    let s = tape.softmax(student_logits)?;
    tape.value(s).expect_shape("st_consistency_loss", target.shape())?;
    let (_, h, w) = target.chw("st_consistency_loss")?;
    let t = tape.constant(target.clone())?;
    let diff = tape.sub(s, t)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (h * w) as f64)
}

fn st_loss_tape(
    tape: &mut Tape,
    student: &ParamVars,
    teacher: &TeacherState,
    x: &Tensor,
    cfg: &HyperConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Var> {
    let xt = perturb_input(x, cfg.gamma, cfg.mu, cfg.sigma, rng)?;
    let target = teacher.probabilities(&xt)?;
    let xs = tape.constant(x.clone())?;
    let z = forward_on_tape(tape, student, xs)?;
    st_consistency_on_tape(tape, z, &target)
}

/// Student/teacher consistency on one input; the teacher sees a perturbed
/// copy of `x`.
pub fn st_consistency_loss<R: Rng + ?Sized>(
    student: &ModelParams,
    teacher: &TeacherState,
    x: &Tensor,
    cfg: &HyperConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = student.on_tape(&mut tape, false)?;
    let l = st_loss_tape(&mut tape, &p, teacher, x, cfg, rng)?;
    Ok(tape.value(l).item())
}

/// Value and student gradient of the consistency loss. No gradient reaches
/// the teacher.
pub fn st_consistency_grad<R: Rng + ?Sized>(
    student: &ModelParams,
    teacher: &TeacherState,
    x: &Tensor,
    cfg: &HyperConfig,
    rng: &mut R,
) -> Result<(f64, ModelParams)> {
    let mut tape = Tape::new();
    let p = student.on_tape(&mut tape, true)?;
    let l = st_loss_tape(&mut tape, &p, teacher, x, cfg, rng)?;
    let g = tape.backward(l)?;
    Ok((tape.value(l).item(), p.gradient(student, &g, &tape)))
}
