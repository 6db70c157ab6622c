//! Least-squares adversarial losses, cycle-consistency losses and the
//! weighted generator objective.
//!
//! Gradient flow is part of each function's contract. Discriminators used
//! inside a generator loss are detached, and the second generator of a
//! per-generator cycle term is detached, so callers cannot accidentally
//! train a network on a term that must leave it untouched.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Module};
use crate::scalar::Scalar;
use crate::tape::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the X→Y adversarial term.
    pub alpha: f64,
    /// Weight of the Y→X adversarial term.
    pub beta: f64,
    /// Shared weight of both cycle terms.
    pub lambda: f64,
    /// Blend between the first and second discriminator of a direction.
    pub gamma: f64,
    pub real_label: f64,
    pub fake_label: f64,
    pub gen_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 10.0,
            gamma: 0.5,
            real_label: 1.0,
            fake_label: 0.0,
            gen_target: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("loss.gamma must lie in [0, 1], got {}", self.gamma)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and ≥ 0, got {v}")));
            }
        }
        for (name, v) in [("real_label", self.real_label), ("fake_label", self.fake_label), ("gen_target", self.gen_target)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Same weights with α, β and λ multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha: self.alpha * k,
            beta: self.beta * k,
            lambda: self.lambda * k,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleNorm {
    #[default]
    L1,
    L2,
}

/// Mean over every batch and spatial entry of a score map.
pub fn patch_average<T: Scalar>(tape: &mut Tape<T>, map: Var) -> Var {
    tape.mean(map)
}

/// Mean of a plain tensor.
pub fn patch_average_value<T: Scalar>(map: &Tensor<T>) -> T {
    assert!(!map.is_empty(), "patch_average of an empty map");
    T::lit(map.iter().map(|v| v.as_f64()).sum::<f64>() / map.len() as f64)
}

/// `patch_average((scores - target)²)`
pub fn squared_error_to<T: Scalar>(tape: &mut Tape<T>, scores: Var, target: f64) -> Var {
    let diff = tape.add_scalar(scores, T::lit(-target));
    let sq = tape.square(diff);
    patch_average(tape, sq)
}

/// Discriminator objective `E[(D(real) - a)²] + E[(D(fake) - fake_label)²]`.
///
/// `fake` enters as a plain tensor, so no gradient can reach the network
/// that produced it.
pub fn lsgan_d_loss<T: Scalar, M: Module<T>>(
    tape: &mut Tape<T>,
    d: &Bound<M>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    w: &LossWeights,
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let real = tape.constant(real.clone());
    let fake = tape.constant(fake.clone());
    let sr = d.forward(tape, real);
    let sf = d.forward(tape, fake);
    let lr = squared_error_to(tape, sr, w.real_label);
    let lf = squared_error_to(tape, sf, w.fake_label);
    Ok(tape.add(lr, lf))
}

/// Generator adversarial objective `E[(D(fake) - gen_target)²]`.
/// The discriminator is detached.
pub fn lsgan_g_loss<T: Scalar, M: Module<T>>(tape: &mut Tape<T>, d: &Bound<M>, fake: Var, w: &LossWeights) -> Var {
    let frozen = d.detached(tape);
    let scores = frozen.forward(tape, fake);
    squared_error_to(tape, scores, w.gen_target)
}

/// `γ · L(D1) + (1 − γ) · L(D2)` for one generator's fakes.
pub fn blended_adv_loss<T: Scalar, M: Module<T>>(
    tape: &mut Tape<T>,
    d1: &Bound<M>,
    d2: &Bound<M>,
    fake: Var,
    w: &LossWeights,
) -> Var {
    let l1 = lsgan_g_loss(tape, d1, fake, w);
    let l2 = lsgan_g_loss(tape, d2, fake, w);
    let a = tape.scale(l1, T::lit(w.gamma));
    let b = tape.scale(l2, T::lit(1.0 - w.gamma));
    tape.add(a, b)
}

/// Adversarial signal for one direction: the plain loss with one
/// discriminator, the γ-blend with two.
pub fn adversarial_loss<T: Scalar, M: Module<T>>(tape: &mut Tape<T>, ds: &[Bound<M>], fake: Var, w: &LossWeights) -> Var {
    match ds {
        [d] => lsgan_g_loss(tape, d, fake, w),
        [d1, d2] => blended_adv_loss(tape, d1, d2, fake, w),
        _ => panic!("one or two discriminators per direction, got {}", ds.len()),
    }
}

/// `mean |a − b|` (or mean squared difference under L2).
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, recon: Var, target: Var, norm: CycleNorm) -> Var {
    let diff = tape.sub(recon, target);
    let e = match norm {
        CycleNorm::L1 => tape.abs(diff),
        CycleNorm::L2 => tape.square(diff),
    };
    tape.mean(e)
}

pub struct CycleTerm {
    pub loss: Var,
    /// The first-hop translation, reusable by the adversarial term.
    pub translated: Var,
}

/// `mean |F(G(x)) − x|`; only `g` can receive gradient, `f` is detached.
pub fn cycle_loss_g<T: Scalar, MG: Module<T>, MF: Module<T>>(
    tape: &mut Tape<T>,
    g: &Bound<MG>,
    f: &Bound<MF>,
    x: Var,
    norm: CycleNorm,
) -> CycleTerm {
    let translated = g.forward(tape, x);
    let f = f.detached(tape);
    let recon = f.forward(tape, translated);
    CycleTerm {
        loss: reconstruction_loss(tape, recon, x, norm),
        translated,
    }
}

/// `mean |G(F(y)) − y|`; only `f` can receive gradient, `g` is detached.
pub fn cycle_loss_f<T: Scalar, MG: Module<T>, MF: Module<T>>(
    tape: &mut Tape<T>,
    g: &Bound<MG>,
    f: &Bound<MF>,
    y: Var,
    norm: CycleNorm,
) -> CycleTerm {
    let translated = f.forward(tape, y);
    let g = g.detached(tape);
    let recon = g.forward(tape, translated);
    CycleTerm {
        loss: reconstruction_loss(tape, recon, y, norm),
        translated,
    }
}

/// Joint cycle loss with gradient into both generators from both terms.
pub fn cycle_loss_joint<T: Scalar, MG: Module<T>, MF: Module<T>>(
    tape: &mut Tape<T>,
    g: &Bound<MG>,
    f: &Bound<MF>,
    x: Var,
    y: Var,
    norm: CycleNorm,
) -> Var {
    let gx = g.forward(tape, x);
    let fgx = f.forward(tape, gx);
    let a = reconstruction_loss(tape, fgx, x, norm);
    let fy = f.forward(tape, y);
    let gfy = g.forward(tape, fy);
    let b = reconstruction_loss(tape, gfy, y, norm);
    tape.add(a, b)
}

/// Weighted generator objective on the tape: `α·adv_G + β·adv_F + λ·cyc_G + λ·cyc_F`.
pub fn weighted_objective<T: Scalar>(tape: &mut Tape<T>, adv_g: Var, adv_f: Var, cyc_g: Var, cyc_f: Var, w: &LossWeights) -> Var {
    let terms = [(adv_g, w.alpha), (adv_f, w.beta), (cyc_g, w.lambda), (cyc_f, w.lambda)];
    let mut total: Option<Var> = None;
    for (v, k) in terms {
        let s = tape.scale(v, T::lit(k));
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    total.unwrap()
}

/// Scalar loss terms of one generator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub step: u64,
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc_g: f64,
    pub cyc_f: f64,
}

/// Splits the weighted objective into its G-side and F-side halves.
pub fn full_objective(c: &LossComponents, w: &LossWeights) -> Result<(f64, f64)> {
    if ![c.adv_g, c.adv_f, c.cyc_g, c.cyc_f].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss(c.step));
    }
    Ok((w.alpha * c.adv_g + w.lambda * c.cyc_g, w.beta * c.adv_f + w.lambda * c.cyc_f))
}

/// Per-step loss record.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub adv_g: f64,
    pub adv_f: f64,
    pub d_y: Vec<f64>,
    pub d_x: Vec<f64>,
    pub cyc_g: f64,
    pub cyc_f: f64,
    pub total_g: f64,
    pub total_f: f64,
}

impl LossReport {
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out = vec![("adv_G".to_string(), self.adv_g), ("adv_F".to_string(), self.adv_f)];
        for (i, v) in self.d_y.iter().enumerate() {
            out.push((format!("dY{}", i + 1), *v));
        }
        for (i, v) in self.d_x.iter().enumerate() {
            out.push((format!("dX{}", i + 1), *v));
        }
        out.extend([
            ("cyc_G".to_string(), self.cyc_g),
            ("cyc_F".to_string(), self.cyc_f),
            ("total_G".to_string(), self.total_g),
            ("total_F".to_string(), self.total_f),
        ]);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.scalars().iter().all(|(_, v)| v.is_finite())
    }

    /// Largest absolute per-scalar difference, or infinity if the two
    /// reports have different layouts.
    pub fn max_abs_diff(&self, other: &LossReport) -> f64 {
        let (a, b) = (self.scalars(), other.scalars());
        if self.step != other.step || a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter().zip(&b).map(|((_, x), (_, y))| (x - y).abs()).fold(0.0, f64::max)
    }
}

fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

fn opt(v: Option<&f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| sig6(*v))
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} adv_G={} adv_F={} dY1={} dY2={} dX1={} dX2={} cyc_G={} cyc_F={} total_G={} total_F={}",
            self.step,
            sig6(self.adv_g),
            sig6(self.adv_f),
            opt(self.d_y.first()),
            opt(self.d_y.get(1)),
            opt(self.d_x.first()),
            opt(self.d_x.get(1)),
            sig6(self.cyc_g),
            sig6(self.cyc_f),
            sig6(self.total_g),
            sig6(self.total_f),
        )
    }
}
