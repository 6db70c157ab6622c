//! Alternating discriminator / generator updates over unpaired batches.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{checkpoint_name, load_checkpoint_for, save_checkpoint};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::imaging::{load_frame_store, prepare_frames, sample_unpaired_batch, Domain, ImageBatch, PreparedFrames};
use crate::losses::{
    adversarial_loss, cycle_loss_f, cycle_loss_g, full_objective, lsgan_d_loss, weighted_objective, LossComponents, LossReport,
    LossWeights,
};
use crate::netspec::{build_discriminator, build_generator, infer, Discriminator, Generator};
use crate::nn::{Bound, ParamSet};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tape::{Tape, Tensor, Var};

pub const LOG_NAME: &str = "train.log";

/// Which generator-side terms enter the objective. Disabled terms are
/// still computed and reported but carry zero weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectiveTerms {
    pub adv_g: bool,
    pub adv_f: bool,
    pub cyc_g: bool,
    pub cyc_f: bool,
}

impl ObjectiveTerms {
    pub const ALL: Self = Self {
        adv_g: true,
        adv_f: true,
        cyc_g: true,
        cyc_f: true,
    };

    fn weights(&self, w: &LossWeights) -> [f64; 4] {
        let on = |b: bool, v: f64| if b { v } else { 0.0 };
        [on(self.adv_g, w.alpha), on(self.adv_f, w.beta), on(self.cyc_g, w.lambda), on(self.cyc_f, w.lambda)]
    }
}

/// Derives an independent generator for one named network from the run seed.
pub fn network_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(s)
}

/// Everything a run needs to continue: networks, optimizer moments, step
/// counter and the batch-sampling generator.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub config_hash: String,
    /// Translates X → Y.
    pub g: Generator<T>,
    /// Translates Y → X.
    pub f: Generator<T>,
    /// Discriminators on domain Y.
    pub d_y: Vec<Discriminator<T>>,
    /// Discriminators on domain X.
    pub d_x: Vec<Discriminator<T>>,
    pub opt_g: Adam<T>,
    pub opt_f: Adam<T>,
    pub opt_d_y: Vec<Adam<T>>,
    pub opt_d_x: Vec<Adam<T>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let gspec = config.generator_spec();
        let g = build_generator(&gspec, &mut network_rng(config.seed, "G"))?;
        let f = build_generator(&gspec, &mut network_rng(config.seed, "F"))?;
        let build = |specs: Vec<_>, prefix: &str| -> Result<Vec<Discriminator<T>>> {
            specs
                .iter()
                .enumerate()
                .map(|(i, s)| build_discriminator(s, &mut network_rng(config.seed, &format!("{prefix}{}", i + 1))))
                .collect()
        };
        let d_y = build(config.stacks_y()?, "DY")?;
        let d_x = build(config.stacks_x()?, "DX")?;
        Ok(Self {
            opt_g: Adam::new(&g.params),
            opt_f: Adam::new(&f.params),
            opt_d_y: d_y.iter().map(|d| Adam::new(&d.params)).collect(),
            opt_d_x: d_x.iter().map(|d| Adam::new(&d.params)).collect(),
            g,
            f,
            d_y,
            d_x,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config_hash: config.hash(),
            config: config.clone(),
        })
    }

    /// Named networks in a fixed order: G, F, DY1.., DX1...
    pub fn networks(&self) -> Vec<(String, &ParamSet<T>)> {
        let mut out = vec![("G".to_string(), &self.g.params), ("F".to_string(), &self.f.params)];
        out.extend(self.d_y.iter().enumerate().map(|(i, d)| (format!("DY{}", i + 1), &d.params)));
        out.extend(self.d_x.iter().enumerate().map(|(i, d)| (format!("DX{}", i + 1), &d.params)));
        out
    }

    pub fn networks_mut(&mut self) -> Vec<(String, &mut ParamSet<T>, &mut Adam<T>)> {
        let mut out = vec![
            ("G".to_string(), &mut self.g.params, &mut self.opt_g),
            ("F".to_string(), &mut self.f.params, &mut self.opt_f),
        ];
        for (i, (d, o)) in self.d_y.iter_mut().zip(&mut self.opt_d_y).enumerate() {
            out.push((format!("DY{}", i + 1), &mut d.params, o));
        }
        for (i, (d, o)) in self.d_x.iter_mut().zip(&mut self.opt_d_x).enumerate() {
            out.push((format!("DX{}", i + 1), &mut d.params, o));
        }
        out
    }

    fn check_batches(&self, x: &ImageBatch<T>, y: &ImageBatch<T>) -> Result<()> {
        let side = self.config.image_size;
        if x.side() != side || y.side() != side || x.data().shape()[3] != side || y.data().shape()[3] != side {
            return Err(Error::Config(format!(
                "batch sides {}/{} do not match image_size {side}",
                x.side(),
                y.side()
            )));
        }
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch(format!("batch sizes differ: {} vs {}", x.len(), y.len())));
        }
        Ok(())
    }

    /// `G(x)` and `F(y)` as plain tensors.
    pub fn translate(&self, x: &ImageBatch<T>, y: &ImageBatch<T>) -> (Tensor<T>, Tensor<T>) {
        (infer(&self.g, &x.to_dyn()), infer(&self.f, &y.to_dyn()))
    }

    /// Per-discriminator losses on the given real and fake batches.
    pub fn discriminator_losses(&self, x: &ImageBatch<T>, y: &ImageBatch<T>, fake_x: &Tensor<T>, fake_y: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let nets = self.record_d_losses(&mut tape, x, y, fake_x, fake_y, false)?;
        let values: Vec<f64> = nets.iter().map(|(_, l)| tape.scalar(*l).as_f64()).collect();
        let ny = self.d_y.len();
        Ok((values[..ny].to_vec(), values[ny..].to_vec()))
    }

    /// Records every discriminator's loss; returns `(bound params, loss)`
    /// per network, Y-side first.
    fn record_d_losses(
        &self,
        tape: &mut Tape<T>,
        x: &ImageBatch<T>,
        y: &ImageBatch<T>,
        fake_x: &Tensor<T>,
        fake_y: &Tensor<T>,
        track: bool,
    ) -> Result<Vec<(Vec<Var>, Var)>> {
        let w = &self.config.loss;
        let (real_x, real_y) = (x.to_dyn(), y.to_dyn());
        let mut out = Vec::with_capacity(self.d_y.len() + self.d_x.len());
        for (ds, real, fake) in [(&self.d_y, &real_y, fake_y), (&self.d_x, &real_x, fake_x)] {
            for d in ds {
                let b = Bound::new(tape, d, track);
                let l = lsgan_d_loss(tape, &b, real, fake, w)?;
                out.push((b.vars, l));
            }
        }
        Ok(out)
    }

    /// One optimizer step on every discriminator. Returns the losses
    /// measured before the update.
    fn update_discriminators(
        &mut self,
        x: &ImageBatch<T>,
        y: &ImageBatch<T>,
        fake_x: &Tensor<T>,
        fake_y: &Tensor<T>,
        lr: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let nets = self.record_d_losses(&mut tape, x, y, fake_x, fake_y, true)?;
        let ny = self.d_y.len();
        let nx = self.d_x.len();
        let mut objective: Option<Var> = None;
        for (i, (_, l)) in nets.iter().enumerate() {
            let term = if self.config.average_d_losses {
                let k = if i < ny { ny } else { nx };
                tape.scale(*l, T::lit(1.0 / k as f64))
            } else {
                *l
            };
            objective = Some(match objective {
                Some(o) => tape.add(o, term),
                None => term,
            });
        }
        let values: Vec<f64> = nets.iter().map(|(_, l)| tape.scalar(*l).as_f64()).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss(self.step + 1));
        }
        // each discriminator's loss depends only on its own parameters, so
        // one backward pass of the sum yields every network's gradient
        let grads = tape.backward(objective.expect("at least one discriminator"));
        let net_grads: Vec<Vec<Tensor<T>>> = nets.iter().map(|(vars, _)| grads.collect(vars, &tape)).collect();
        drop(tape);

        let opt_cfg = self.config.optimizer.clone();
        let pairs = self.d_y.iter_mut().zip(&mut self.opt_d_y).chain(self.d_x.iter_mut().zip(&mut self.opt_d_x));
        for ((d, o), g) in pairs.zip(net_grads) {
            o.step(&mut d.params, &g, lr, &opt_cfg);
        }
        Ok((values[..ny].to_vec(), values[ny..].to_vec()))
    }

    /// Gradients of the weighted generator objective with the current
    /// discriminators, without updating anything.
    pub fn generator_gradients(&self, x: &ImageBatch<T>, y: &ImageBatch<T>, terms: ObjectiveTerms) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>, LossComponents)> {
        self.check_batches(x, y)?;
        let mut tape = Tape::new();
        let pass = GeneratorPass::record(&mut tape, self, x, y);
        let (total, comps) = pass.finish(&mut tape, self, terms)?;
        let grads = tape.backward(total);
        Ok((grads.collect(&pass.g_vars, &tape), grads.collect(&pass.f_vars, &tape), comps))
    }

    /// One training step: every discriminator first, then G and F jointly.
    pub fn train_step(&mut self, x: &ImageBatch<T>, y: &ImageBatch<T>) -> Result<LossReport> {
        self.train_step_with(x, y, ObjectiveTerms::ALL)
    }

    pub fn train_step_with(&mut self, x: &ImageBatch<T>, y: &ImageBatch<T>, terms: ObjectiveTerms) -> Result<LossReport> {
        self.check_batches(x, y)?;
        let step = self.step + 1;
        let lr = self.config.optimizer.lr_at(step, self.config.total_steps);

        // The cycle half of the generator tape is recorded first; its
        // translations double as the discriminators' fakes. G and F only
        // change at the end of the step.
        let mut tape = Tape::new();
        let pass = GeneratorPass::record(&mut tape, self, x, y);
        let fake_y = tape.value(pass.fake_y).clone();
        let fake_x = tape.value(pass.fake_x).clone();

        let mut d_losses = None;
        for _ in 0..self.config.disc_updates_per_step {
            let l = self.update_discriminators(x, y, &fake_x, &fake_y, lr)?;
            d_losses.get_or_insert(l);
        }
        let (d_y, d_x) = d_losses.unwrap();

        let (total, comps) = pass.finish(&mut tape, self, terms).map_err(|e| match e {
            Error::NonFiniteLoss(_) => Error::NonFiniteLoss(step),
            other => other,
        })?;
        let grads = tape.backward(total);
        let gg = grads.collect(&pass.g_vars, &tape);
        let gf = grads.collect(&pass.f_vars, &tape);
        drop(tape);

        let opt_cfg = self.config.optimizer.clone();
        self.opt_g.step(&mut self.g.params, &gg, lr, &opt_cfg);
        self.opt_f.step(&mut self.f.params, &gf, lr, &opt_cfg);
        self.step = step;

        for (name, params) in self.networks() {
            if !params.all_finite() {
                return Err(Error::NonFiniteParameter { net: name, step });
            }
        }
        let (total_g, total_f) = full_objective(&comps, &self.config.loss)?;
        let report = LossReport {
            step,
            adv_g: comps.adv_g,
            adv_f: comps.adv_f,
            d_y,
            d_x,
            cyc_g: comps.cyc_g,
            cyc_f: comps.cyc_f,
            total_g,
            total_f,
        };
        if !report.all_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        Ok(report)
    }
}

/// Cycle half of a generator update, recorded before the discriminators
/// move; the adversarial half is added by [`GeneratorPass::finish`].
struct GeneratorPass {
    g_vars: Vec<Var>,
    f_vars: Vec<Var>,
    fake_y: Var,
    fake_x: Var,
    cyc_g: Var,
    cyc_f: Var,
}

impl GeneratorPass {
    fn record<T: Scalar>(tape: &mut Tape<T>, state: &TrainState<T>, x: &ImageBatch<T>, y: &ImageBatch<T>) -> Self {
        let (g, f, norm) = (&state.g, &state.f, state.config.cycle_norm);
        let xv = tape.constant(x.to_dyn());
        let yv = tape.constant(y.to_dyn());
        let gb = Bound::new(tape, g, true);
        let fb = Bound::new(tape, f, true);
        let cg = cycle_loss_g(tape, &gb, &fb, xv, norm);
        let cf = cycle_loss_f(tape, &gb, &fb, yv, norm);
        Self {
            g_vars: gb.vars,
            f_vars: fb.vars,
            fake_y: cg.translated,
            fake_x: cf.translated,
            cyc_g: cg.loss,
            cyc_f: cf.loss,
        }
    }

    fn finish<T: Scalar>(&self, tape: &mut Tape<T>, state: &TrainState<T>, terms: ObjectiveTerms) -> Result<(Var, LossComponents)> {
        let w = &state.config.loss;
        let dy: Vec<_> = state.d_y.iter().map(|d| Bound::new(tape, d, false)).collect();
        let dx: Vec<_> = state.d_x.iter().map(|d| Bound::new(tape, d, false)).collect();
        let adv_g = adversarial_loss(tape, &dy, self.fake_y, w);
        let adv_f = adversarial_loss(tape, &dx, self.fake_x, w);

        let total = if terms == ObjectiveTerms::ALL {
            weighted_objective(tape, adv_g, adv_f, self.cyc_g, self.cyc_f, w)
        } else {
            let ks = terms.weights(w);
            let mut acc: Option<Var> = None;
            for (v, k) in [adv_g, adv_f, self.cyc_g, self.cyc_f].into_iter().zip(ks) {
                let t = tape.scale(v, T::lit(k));
                acc = Some(match acc {
                    Some(a) => tape.add(a, t),
                    None => t,
                });
            }
            acc.unwrap()
        };
        let comps = LossComponents {
            step: state.step + 1,
            adv_g: tape.scalar(adv_g).as_f64(),
            adv_f: tape.scalar(adv_f).as_f64(),
            cyc_g: tape.scalar(self.cyc_g).as_f64(),
            cyc_f: tape.scalar(self.cyc_f).as_f64(),
        };
        full_objective(&comps, w)?;
        Ok((total, comps))
    }
}

/// Loads both domains at the configured crop and size.
pub fn prepare_domains<T: Scalar>(config: &TrainConfig) -> Result<(PreparedFrames<T>, PreparedFrames<T>)> {
    let side = config.image_size as u32;
    let sx = load_frame_store(&config.data_x, Domain::X)?;
    let sy = load_frame_store(&config.data_y, Domain::Y)?;
    Ok((prepare_frames(&sx, config.crop_x, side)?, prepare_frames(&sy, config.crop_y, side)?))
}

/// Runs (or resumes) a full training run, checkpointing every
/// `checkpoint_interval` steps and after the final step.
pub fn train_loop<T: Scalar>(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainState<T>> {
    train_loop_with(config, resume, |_| {})
}

/// [`train_loop`] with a callback receiving every step's report.
pub fn train_loop_with<T: Scalar>(config: &TrainConfig, resume: Option<&Path>, mut on_step: impl FnMut(&LossReport)) -> Result<TrainState<T>> {
    config.validate()?;
    let (px, py) = prepare_domains::<T>(config)?;
    let mut state = match resume {
        Some(path) => load_checkpoint_for::<T>(path, config)?.0,
        None => TrainState::new(config)?,
    };
    fs::create_dir_all(&config.output_dir)?;
    let log_path = config.output_dir.join(LOG_NAME);
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        fs::File::create(&log_path)?
    };
    let mut log = BufWriter::new(file);
    let mut last_saved: Option<PathBuf> = None;
    while state.step < config.total_steps {
        let (x, y) = sample_unpaired_batch(&px, &py, config.batch_size, &mut state.rng)?;
        let report = state.train_step(&x, &y)?;
        writeln!(log, "{report}")?;
        log.flush()?;
        on_step(&report);
        log::debug!("{report}");
        if state.step % config.checkpoint_interval == 0 {
            let path = config.output_dir.join(checkpoint_name(state.step));
            save_checkpoint(&state, &path)?;
            last_saved = Some(path);
        }
    }
    let final_path = config.output_dir.join(checkpoint_name(state.step));
    if last_saved.as_ref() != Some(&final_path) && !final_path.exists() {
        save_checkpoint(&state, &final_path)?;
    }
    Ok(state)
}
