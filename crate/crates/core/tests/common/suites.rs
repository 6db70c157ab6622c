//! Check bodies shared by the topic test files and the acceptance runner.
//! Every function panics on the first violated expectation.

use super::gradcheck::{tiny_discriminator, tiny_generator};
use super::{tiny_config, FnModule};
use ndarray::{arr2, Array4, ArrayD, IxDyn};
use patchcycle::losses::{
    adversarial_loss, cycle_loss_f, cycle_loss_g, cycle_loss_joint, full_objective, lsgan_d_loss, lsgan_g_loss, patch_average_value, weighted_objective,
    CycleNorm, LossComponents, LossWeights,
};
use patchcycle::netspec::{build_discriminator, parse_stack, ConvStackSpec, Discriminator};
use patchcycle::nn::Bound;
use patchcycle::tape::{Tape, Tensor, Var};
use patchcycle::training::ObjectiveTerms;
use patchcycle::TrainState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-6;

/// 1x1 conv critic: `D(img) = w · Σ_c img_c + b` at every pixel.
pub fn linear_critic(w: f64, b: f64) -> Discriminator<f64> {
    let spec = ConvStackSpec::patch_discriminator(&parse_stack("k1s1").unwrap(), 3, 1, 1);
    let mut d = build_discriminator::<f64, _>(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    d.params.get_mut("conv0.weight").unwrap().fill(w);
    d.params.get_mut("conv0.bias").unwrap().fill(b);
    d
}

pub fn constant_critic(c: f64) -> Discriminator<f64> {
    linear_critic(0.0, c)
}

pub fn filled(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), v)
}

pub fn d_loss(d: &Discriminator<f64>, real: &ArrayD<f64>, fake: &ArrayD<f64>, w: &LossWeights) -> f64 {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, d, false);
    let l = lsgan_d_loss(&mut tape, &b, real, fake, w).unwrap();
    tape.scalar(l)
}

pub fn g_loss(ds: &[&Discriminator<f64>], fake: &ArrayD<f64>, w: &LossWeights) -> f64 {
    let mut tape = Tape::new();
    let bs: Vec<_> = ds.iter().map(|d| Bound::new(&mut tape, *d, false)).collect();
    let f = tape.constant(fake.clone());
    let l = adversarial_loss(&mut tape, &bs, f, w);
    tape.scalar(l)
}

pub fn identity(_: &mut Tape<f64>, x: Var) -> Var {
    x
}

/// `v + 0.2·relu(v)`: shifts 0.5 to 0.6, leaves negatives alone.
pub fn bump_positive(t: &mut Tape<f64>, x: Var) -> Var {
    let r = t.relu(x);
    let s = t.scale(r, 0.2);
    t.add(x, s)
}

fn joint(g: &FnModule<f64>, f: &FnModule<f64>, x: ArrayD<f64>, y: ArrayD<f64>) -> f64 {
    let mut tape = Tape::new();
    let (gb, fb) = (Bound::new(&mut tape, g, true), Bound::new(&mut tape, f, true));
    let (xv, yv) = (tape.constant(x), tape.constant(y));
    let l = cycle_loss_joint(&mut tape, &gb, &fb, xv, yv, CycleNorm::L1);
    tape.scalar(l)
}

fn components() -> LossComponents {
    LossComponents {
        step: 7,
        adv_g: 0.5,
        adv_f: 0.5,
        cyc_g: 0.1,
        cyc_f: 0.2,
    }
}

pub fn max_diff(a: &[patchcycle::tape::Tensor<f64>], b: &[patchcycle::tape::Tensor<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| super::max_abs_diff(x, y)).fold(0.0, f64::max)
}

pub fn all_zero(grads: &[Tensor<f64>]) -> bool {
    grads.iter().all(|g| g.iter().all(|&v| v == 0.0))
}

pub fn any_nonzero(grads: &[Tensor<f64>]) -> bool {
    grads.iter().any(|g| g.iter().any(|&v| v != 0.0))
}

pub fn patch_average_examples() {
    assert!((patch_average_value(&filled(0.37)) - 0.37).abs() < 1e-15);
    let map = arr2(&[[0.0, 1.0], [1.0, 0.0]]).into_dyn();
    assert_eq!(patch_average_value(&map), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Array4::<f64>::from_shape_fn((2, 1, 5, 5), |_| rng.random_range(-2.0..2.0));
    let b = Array4::from_shape_fn((2, 1, 5, 5), |_| rng.random_range(-2.0..2.0));
    let both = ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).unwrap();
    let (ma, mb, mab) = (patch_average_value(&a.into_dyn()), patch_average_value(&b.into_dyn()), patch_average_value(&both.into_dyn()));
    assert!((mab - (ma + mb) / 2.0).abs() < TOL);
}

pub fn discriminator_loss_examples() {
    let w = LossWeights::default();
    // real images all +1 (channel sum 3), fakes all -1 (channel sum -3):
    // D = x/6 + 0.5 scores 1 on real and 0 on fake
    let perfect = linear_critic(1.0 / 6.0, 0.5);
    assert!(d_loss(&perfect, &filled(1.0), &filled(-1.0), &w).abs() < TOL);
    assert!((d_loss(&constant_critic(0.5), &filled(0.3), &filled(-0.2), &w) - 0.5).abs() < TOL);
    assert!((d_loss(&constant_critic(0.0), &filled(0.3), &filled(-0.2), &w) - 1.0).abs() < TOL);

    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, &perfect, false);
    let short = ArrayD::zeros(IxDyn(&[1, 3, 4, 4]));
    assert!(lsgan_d_loss(&mut tape, &b, &filled(0.0), &short, &w).is_err());
}

pub fn generator_loss_examples() {
    let w = LossWeights::default();
    assert!(g_loss(&[&constant_critic(1.0)], &filled(0.2), &w).abs() < TOL);
    assert!((g_loss(&[&constant_critic(0.0)], &filled(0.2), &w) - 1.0).abs() < TOL);
}

pub fn gamma_blend() {
    let mut w = LossWeights::default();
    let fake = filled(0.1);
    // (D - 1)² = 0.2 and 0.4
    let d1 = constant_critic(1.0 - 0.2f64.sqrt());
    let d2 = constant_critic(1.0 - 0.4f64.sqrt());
    let single1 = g_loss(&[&d1], &fake, &w);
    let single2 = g_loss(&[&d2], &fake, &w);
    assert!((single1 - 0.2).abs() < TOL && (single2 - 0.4).abs() < TOL);
    assert!((g_loss(&[&d1, &d2], &fake, &w) - 0.3).abs() < TOL);

    w.gamma = 0.0;
    assert!((g_loss(&[&d1, &d2], &fake, &w) - single2).abs() <= TOL);
    w.gamma = 1.0;
    assert!((g_loss(&[&d1, &d2], &fake, &w) - single1).abs() <= TOL);

    for gamma in [0.0, 0.1, 0.25, 0.5, 0.8, 1.0] {
        w.gamma = gamma;
        assert!((g_loss(&[&d1, &d1], &fake, &w) - single1).abs() < TOL);
    }
}

pub fn cycle_loss_examples() {
    let id = FnModule::new(identity);
    let bump = FnModule::new(bump_positive);
    let x = super::random_batch::<f64>(1, 2, 8).to_dyn();
    assert_eq!(joint(&id, &id, x.clone(), x.clone()), 0.0);
    // F(G(x)) = x + 0.1 on x = 0.5; G(F(y)) = y on y = -0.5
    assert!((joint(&bump, &id, filled(0.5), filled(-0.5)) - 0.1).abs() < TOL);

    let mut tape = Tape::new();
    let (gb, fb) = (Bound::new(&mut tape, &id, true), Bound::new(&mut tape, &id, true));
    let xv = tape.constant(x.clone());
    let (lg, lf) = (cycle_loss_g(&mut tape, &gb, &fb, xv, CycleNorm::L1).loss, cycle_loss_f(&mut tape, &gb, &fb, xv, CycleNorm::L1).loss);
    assert_eq!(tape.scalar(lg), 0.0);
    assert_eq!(tape.scalar(lf), 0.0);
}

pub fn weighted_objective_examples() {
    let w = LossWeights::default();
    let (tg, tf) = full_objective(&components(), &w).unwrap();
    assert!((tg + tf - 4.0).abs() < TOL);

    let no_cycle = LossWeights { lambda: 0.0, ..w };
    let (tg, tf) = full_objective(&components(), &no_cycle).unwrap();
    assert!((tg + tf - 1.0).abs() < TOL);

    let (tg, tf) = full_objective(&components(), &w).unwrap();
    let (dg, df) = full_objective(&components(), &w.scaled(2.0)).unwrap();
    assert!((dg - 2.0 * tg).abs() < TOL && (df - 2.0 * tf).abs() < TOL);

    let mut bad = components();
    bad.cyc_f = f64::NAN;
    assert_eq!(full_objective(&bad, &w).unwrap_err().to_string(), "non-finite loss at step 7");
}

pub fn tape_objective_matches_and_doubles() {
    let w = LossWeights::default();
    let eval = |w: &LossWeights| {
        let mut tape = Tape::<f64>::new();
        let c = components();
        let vars: Vec<Var> = [c.adv_g, c.adv_f, c.cyc_g, c.cyc_f]
            .iter()
            .map(|&v| tape.constant(ArrayD::from_elem(IxDyn(&[]), v)))
            .collect();
        let t = weighted_objective(&mut tape, vars[0], vars[1], vars[2], vars[3], w);
        tape.scalar(t)
    };
    assert!((eval(&w) - 4.0).abs() < TOL);
    assert!((eval(&w.scaled(2.0)) - 8.0).abs() < TOL);
}

pub fn identical_dual_discriminators_reproduce_single_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let single = tiny_config(dir.path());
    let mut dual = single.clone();
    dual.discriminators.y = vec!["k3s2,k3s1".into(), "k3s2,k3s1".into()];
    dual.discriminators.x = dual.discriminators.y.clone();
    dual.loss.gamma = 0.5;

    let s1 = TrainState::<f64>::new(&single).unwrap();
    let mut s2 = TrainState::<f64>::new(&dual).unwrap();
    s2.d_y[1] = s2.d_y[0].clone();
    s2.d_x[1] = s2.d_x[0].clone();
    assert_eq!(s1.g, s2.g);
    assert_eq!(s1.d_y[0], s2.d_y[0]);

    let (x, y) = (super::random_batch(1, 2, 8), super::random_batch(2, 2, 8));
    let all = patchcycle::training::ObjectiveTerms::ALL;
    let (g1, f1, c1) = s1.generator_gradients(&x, &y, all).unwrap();
    let (g2, f2, c2) = s2.generator_gradients(&x, &y, all).unwrap();
    assert!((c1.adv_g - c2.adv_g).abs() < TOL);
    assert!(max_diff(&g1, &g2) < TOL, "G gradient differs by {}", max_diff(&g1, &g2));
    assert!(max_diff(&f1, &f2) < TOL);
}

pub fn gamma_endpoints_select_one_discriminator() {
    let dir = tempfile::tempdir().unwrap();
    let mut dual = tiny_config(dir.path());
    dual.discriminators.y = vec!["k3s2,k3s1".into(), "k3s2,k3s2".into()];
    dual.discriminators.x = dual.discriminators.y.clone();
    let (x, y) = (super::random_batch(1, 1, 8), super::random_batch(2, 1, 8));
    let all = patchcycle::training::ObjectiveTerms::ALL;

    for (gamma, keep) in [(1.0, 0), (0.0, 1)] {
        dual.loss.gamma = gamma;
        let s2 = TrainState::<f64>::new(&dual).unwrap();
        let mut single = dual.clone();
        single.discriminators.y = vec![dual.discriminators.y[keep].clone()];
        single.discriminators.x = vec![dual.discriminators.x[keep].clone()];
        let mut s1 = TrainState::<f64>::new(&single).unwrap();
        s1.d_y[0] = s2.d_y[keep].clone();
        s1.d_x[0] = s2.d_x[keep].clone();
        let (g1, f1, c1) = s1.generator_gradients(&x, &y, all).unwrap();
        let (g2, f2, c2) = s2.generator_gradients(&x, &y, all).unwrap();
        assert!((c1.adv_g - c2.adv_g).abs() <= TOL && (c1.adv_f - c2.adv_f).abs() <= TOL);
        assert!(max_diff(&g1, &g2) <= TOL && max_diff(&f1, &f2) <= TOL);
    }
}

pub fn cycle_terms_only_reach_their_own_generator() {
    for seed in 0..4 {
        let g = tiny_generator::<f64>(seed);
        let f = tiny_generator::<f64>(seed + 100);
        let x = super::random_batch::<f64>(seed, 2, 8).to_dyn();

        let mut tape = Tape::new();
        let (gb, fb) = (Bound::new(&mut tape, &g, true), Bound::new(&mut tape, &f, true));
        let xv = tape.constant(x.clone());
        let l = cycle_loss_g(&mut tape, &gb, &fb, xv, CycleNorm::L1).loss;
        let grads = tape.backward(l);
        assert!(all_zero(&grads.collect(&fb.vars, &tape)), "cycle_loss_g reached F");
        assert!(any_nonzero(&grads.collect(&gb.vars, &tape)));

        let mut tape = Tape::new();
        let (gb, fb) = (Bound::new(&mut tape, &g, true), Bound::new(&mut tape, &f, true));
        let yv = tape.constant(x);
        let l = cycle_loss_f(&mut tape, &gb, &fb, yv, CycleNorm::L1).loss;
        let grads = tape.backward(l);
        assert!(all_zero(&grads.collect(&gb.vars, &tape)), "cycle_loss_f reached G");
        assert!(any_nonzero(&grads.collect(&fb.vars, &tape)));
    }
}

pub fn generator_adversarial_term_leaves_discriminator_alone() {
    let g = tiny_generator::<f64>(1);
    let d = tiny_discriminator::<f64>(2);
    let mut tape = Tape::new();
    let gb = Bound::new(&mut tape, &g, true);
    let db = Bound::new(&mut tape, &d, true);
    let xv = tape.constant(super::random_batch::<f64>(3, 1, 8).to_dyn());
    let fake = gb.forward(&mut tape, xv);
    let l = lsgan_g_loss(&mut tape, &db, fake, &LossWeights::default());
    let grads = tape.backward(l);
    assert!(all_zero(&grads.collect(&db.vars, &tape)));
    assert!(any_nonzero(&grads.collect(&gb.vars, &tape)));
}

pub fn cyc_g_only_step_moves_g_but_not_f() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    c.loss.alpha = 0.0;
    c.loss.beta = 0.0;
    c.loss.lambda = 1.0;
    let mut s = TrainState::<f64>::new(&c).unwrap();
    let (g0, f0) = (s.g.params.clone(), s.f.params.clone());
    let terms = ObjectiveTerms {
        adv_g: false,
        adv_f: false,
        cyc_g: true,
        cyc_f: false,
    };
    let report = s
        .train_step_with(&super::random_batch(1, 1, 8), &super::random_batch(2, 1, 8), terms)
        .unwrap();
    assert!(report.cyc_g > 0.0);
    assert_ne!(s.g.params, g0);
    assert_eq!(s.f.params, f0);
}
