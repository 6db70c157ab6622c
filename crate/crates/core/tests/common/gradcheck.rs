//! Central finite-difference checks of the trained objectives.

use patchcycle::losses::{cycle_loss_g, lsgan_d_loss, lsgan_g_loss, CycleNorm, LossWeights};
use patchcycle::netspec::{build_discriminator, build_generator, parse_stack, ConvStackSpec, Discriminator, Generator, GeneratorSpec, Norm};
use patchcycle::nn::{Bound, ParamSet};
use patchcycle::tape::{Tape, Tensor};
use patchcycle::{ImageBatch, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Weights are scaled by 25 after init. Instance norm makes the hidden
/// layers invariant to that scale, so a finite-difference step moves
/// pre-activations a small fraction of their spread and rarely crosses a
/// ReLU kink.
pub fn tiny_generator<T: Scalar>(seed: u64) -> Generator<T> {
    let spec = GeneratorSpec {
        image_size: 8,
        base_channels: 2,
        downsampling: 1,
        residual_blocks: 1,
        outer_kernel: 3,
        norm: Norm::Instance,
    };
    let mut g = build_generator::<T, _>(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    for t in g.params.tensors_mut() {
        t.mapv_inplace(|v| v * T::lit(25.0));
    }
    g
}

pub fn tiny_discriminator<T: Scalar>(seed: u64) -> Discriminator<T> {
    let spec = ConvStackSpec::patch_discriminator(&parse_stack("k3s2,k3s1,k3s1").unwrap(), 3, 2, 4);
    let mut d = build_discriminator::<T, _>(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // larger weights keep the score map away from zero
    for t in d.params.tensors_mut() {
        t.mapv_inplace(|v| v * T::lit(10.0));
    }
    d
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every scalar
/// of `params`. `eval` returns the loss and its analytic gradient.
pub fn relative_error<T: Scalar>(params: &ParamSet<T>, h: f64, eval: impl Fn(&ParamSet<T>) -> (f64, Vec<Tensor<T>>)) -> f64 {
    let (_, analytic) = eval(params);
    let mut work = params.clone();
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let orig = *work.tensors_mut().nth(ti).unwrap().iter().nth(ei).unwrap();
            let set = |w: &mut ParamSet<T>, v: T| *w.tensors_mut().nth(ti).unwrap().iter_mut().nth(ei).unwrap() = v;
            let (up, down) = (orig + T::lit(h), orig - T::lit(h));
            set(&mut work, up);
            let lp = eval(&work).0;
            set(&mut work, down);
            let lm = eval(&work).0;
            set(&mut work, orig);
            // divide by the step actually taken after rounding
            let numeric = (lp - lm) / (up - down).as_f64();
            let a = grad.iter().nth(ei).unwrap().as_f64();
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    assert!(a2 > 0.0, "gradient is identically zero; the check would be vacuous");
    diff2.sqrt() / a2.sqrt().max(n2.sqrt())
}

pub fn checks<T: Scalar>(h: f64) -> [(&'static str, f64); 3] {
    let w = LossWeights::default();
    let g = tiny_generator::<T>(1);
    let f = tiny_generator::<T>(2);
    let d = tiny_discriminator::<T>(3);
    assert!(g.params.numel() <= 1000 && d.params.numel() <= 1000);
    // |x| >= 0.8 keeps most cycle residuals away from the kink of |.|
    let x = ImageBatch::new(super::random_batch::<T>(10, 2, 8).into_inner().mapv(|v| v.signum() * (T::lit(0.8) + v.abs() * T::lit(0.2)))).unwrap();
    let y: ImageBatch<T> = super::random_batch(11, 2, 8);
    let fake = super::random_batch::<T>(12, 2, 8).to_dyn();

    let d_loss = relative_error(&d.params, h, |p| {
        let d = Discriminator { spec: d.spec.clone(), params: p.clone() };
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &d, true);
        let l = lsgan_d_loss(&mut tape, &b, &y.to_dyn(), &fake, &w).unwrap();
        let grads = tape.backward(l);
        (tape.scalar(l).as_f64(), grads.collect(&b.vars, &tape))
    });

    let g_loss = relative_error(&g.params, h, |p| {
        let g = Generator { spec: g.spec.clone(), params: p.clone() };
        let mut tape = Tape::new();
        let gb = Bound::new(&mut tape, &g, true);
        let db = Bound::new(&mut tape, &d, true);
        let xv = tape.constant(x.to_dyn());
        let fake = gb.forward(&mut tape, xv);
        let l = lsgan_g_loss(&mut tape, &db, fake, &w);
        let grads = tape.backward(l);
        (tape.scalar(l).as_f64(), grads.collect(&gb.vars, &tape))
    });

    let cyc = relative_error(&g.params, h, |p| {
        let g = Generator { spec: g.spec.clone(), params: p.clone() };
        let mut tape = Tape::new();
        let gb = Bound::new(&mut tape, &g, true);
        let fb = Bound::new(&mut tape, &f, true);
        let xv = tape.constant(x.to_dyn());
        let l = cycle_loss_g(&mut tape, &gb, &fb, xv, CycleNorm::L1).loss;
        let grads = tape.backward(l);
        (tape.scalar(l).as_f64(), grads.collect(&gb.vars, &tape))
    });
    [("lsgan_d_loss", d_loss), ("lsgan_g_loss", g_loss), ("cycle_loss_g", cyc)]
}

