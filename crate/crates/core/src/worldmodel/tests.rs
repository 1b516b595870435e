use candle_core::{DType, Tensor};

use super::*;
use crate::nn::{flat_f64, scalar_f64, tensor_from, Adam, HALF_LN_2PI};
use crate::replay::SequenceBatch;

fn tiny_bundle(seed: u64) -> ModelBundle {
    let d = ModelDims::tiny(8);
    ModelBundle::new(d, d, 0.1, DType::F64, seed).unwrap()
}

fn zero_cfg() -> LossConfig {
    LossConfig {
        free_nats: 0.0,
        ..LossConfig::default()
    }
}

fn rows(n: usize, d: usize, v: f64) -> Tensor {
    tensor_from(&vec![v; n * d], &[n, d], DType::F64).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn zero_noise_returns_posterior_mean() {
    let b = tiny_bundle(0);
    let obs = rows(2, 192, 0.3);
    let act = rows(2, 2, 0.5);
    let s0 = b.task.initial(2).unwrap();
    let s = b.task.posterior_step(&s0, &act, &obs, &rows(2, 4, 0.0)).unwrap();
    assert_eq!(flat_f64(&s.stoch).unwrap(), flat_f64(&s.belief.mean).unwrap());
    let again = b.task.posterior_step(&s0, &act, &obs, &rows(2, 4, 0.0)).unwrap();
    assert_eq!(flat_f64(&again.deter).unwrap(), flat_f64(&s.deter).unwrap());
}

#[test]
fn zeroed_parameters_give_softplus_zero_std() {
    let b = tiny_bundle(0);
    for (name, var) in b.params.iter() {
        b.params.assign(name, &vec![0.0; var.elem_count()]).unwrap();
    }
    let s0 = b.task.initial(1).unwrap();
    let s = b
        .task
        .posterior_step(&s0, &rows(1, 2, 0.0), &rows(1, 192, 0.7), &rows(1, 4, 0.0))
        .unwrap();
    let expect = std::f64::consts::LN_2 + 0.1;
    assert_close(&flat_f64(&s.belief.std).unwrap(), &[expect; 4], 1e-12);
}

#[test]
fn prior_and_posterior_share_the_recurrent_state() {
    let b = tiny_bundle(1);
    let s0 = b.task.initial(3).unwrap();
    let act = rows(3, 2, -0.2);
    let eps = rows(3, 4, 0.4);
    let post = b.task.posterior_step(&s0, &act, &rows(3, 192, 0.1), &eps).unwrap();
    let prior = b.task.prior_step(&s0, &act, &eps).unwrap();
    assert_eq!(flat_f64(&post.deter).unwrap(), flat_f64(&prior.deter).unwrap());
}

#[test]
fn wrong_branch_is_rejected() {
    let b = tiny_bundle(1);
    let s0 = b.distractor.initial(1).unwrap();
    let err = b.task.prior_step(&s0, &rows(1, 2, 0.0), &rows(1, 4, 0.0)).unwrap_err();
    assert!(err.to_string().contains("wrong branch"));
    let obs = rows(1, 48, 0.0);
    assert!(matches!(
        b.task.posterior_step(&b.task.initial(1).unwrap(), &rows(1, 2, 0.0), &obs, &rows(1, 4, 0.0)),
        Err(crate::error::Error::Shape(_))
    ));
}

#[test]
fn task_branch_ignores_distractor_perturbation() {
    let b = tiny_bundle(2);
    let act = rows(2, 2, 0.3);
    let eps = rows(2, 4, 0.1);
    let run = |b: &ModelBundle| {
        let s = b.task.prior_step(&b.task.initial(2).unwrap(), &act, &eps).unwrap();
        let r = b.task.reward(&s).unwrap();
        (flat_f64(&s.stoch).unwrap(), flat_f64(&r).unwrap())
    };
    let before = run(&b);
    for (name, var) in b.params.select(|n| n.starts_with(DISTRACTOR_PREFIX)) {
        b.params.assign(&name, &vec![0.77; var.elem_count()]).unwrap();
    }
    assert_eq!(run(&b), before);
}

#[test]
fn chained_prior_steps_reproduce() {
    let b = tiny_bundle(3);
    let roll = || {
        let mut noise = crate::seeding::NoiseSource::new(9);
        let mut s = b.task.initial(2).unwrap();
        for _ in 0..3 {
            let eps = b.task.noise(2, &mut noise).unwrap();
            s = b.task.prior_step(&s, &rows(2, 2, 0.1), &eps).unwrap();
        }
        flat_f64(&s.stoch).unwrap()
    };
    assert_eq!(roll(), roll());
}

#[test]
fn decoder_shapes_at_32_and_branch_distinctness() {
    let d = ModelDims::standard(32, 0.5);
    let b = ModelBundle::new(d, d, 0.1, DType::F32, 0).unwrap();
    let s = b.task.initial(2).unwrap();
    let out = b.task.decode_obs(&s).unwrap();
    assert_eq!(out.image_mean.dims(), &[2, 32 * 32 * 3]);
    assert_eq!(out.mask_features.unwrap().dims(), &[2, 32 * 32 * 3]);

    let tiny = tiny_bundle(5);
    let f = rows(1, 8, 0.5);
    let t = flat_f64(&tiny.task.decode_features(&f).unwrap().image_mean).unwrap();
    let dd = flat_f64(&tiny.distractor.decode_features(&f).unwrap().image_mean).unwrap();
    assert_ne!(t, dd);
    assert_eq!(t, flat_f64(&tiny.task.decode_features(&f).unwrap().image_mean).unwrap());
}

fn set_mixer_bias(b: &ModelBundle, bias: f64) {
    b.params.assign("mixer/w", &[0.0; 6]).unwrap();
    b.params.assign("mixer/b", &[bias]).unwrap();
}

#[test]
fn mixer_extremes_select_one_image() {
    let b = tiny_bundle(6);
    let f = tensor_from(&[0.1, -0.4, 0.3, 0.9, 0.2, -0.5, 0.05, 0.7], &[1, 8], DType::F64).unwrap();
    let t = b.task.decode_features(&f).unwrap();
    let d = b.distractor.decode_features(&f).unwrap();
    set_mixer_bias(&b, 50.0);
    let (mask, joint) = mix(&t, &d, &b.mixer).unwrap();
    assert_eq!(mask.dims(), &[1, 64]);
    assert_close(&flat_f64(&joint).unwrap(), &flat_f64(&t.image_mean).unwrap(), 1e-9);
    set_mixer_bias(&b, -50.0);
    let (_, joint) = mix(&t, &d, &b.mixer).unwrap();
    assert_close(&flat_f64(&joint).unwrap(), &flat_f64(&d.image_mean).unwrap(), 1e-9);

    // equal images blend to themselves under any mask
    set_mixer_bias(&b, 0.3);
    let same = DecodeOutput {
        image_mean: t.image_mean.clone(),
        mask_features: d.mask_features.clone(),
    };
    let (mask, joint) = mix(&t, &same, &b.mixer).unwrap();
    assert_close(&flat_f64(&joint).unwrap(), &flat_f64(&t.image_mean).unwrap(), 1e-12);
    assert!(flat_f64(&mask).unwrap().iter().all(|&m| m > 0.0 && m < 1.0));
}

#[test]
fn image_nll_floor_and_quadratic() {
    let one = rows(1, 1, 0.25);
    assert!((scalar_f64(&gaussian_image_nll(&one, &one).unwrap()).unwrap() - 0.918939).abs() < 1e-6);
    let target = rows(1, 3, 0.0);
    let pred = tensor_from(&[1.0, 0.0, 0.0], &[1, 3], DType::F64).unwrap();
    let v = scalar_f64(&gaussian_image_nll(&pred, &target).unwrap()).unwrap();
    assert!((v - (3.0 * HALF_LN_2PI + 0.5)).abs() < 1e-12);
    let img = rows(2, 3072, 0.5);
    let v = scalar_f64(&gaussian_image_nll(&img, &img).unwrap()).unwrap();
    assert!((v - 2822.98).abs() < 0.01);
    assert!(gaussian_image_nll(&img, &rows(2, 192, 0.5)).is_err());
}

#[test]
fn reward_nll_examples() {
    let r = |p: f64, t: f64| {
        scalar_f64(&reward_nll(&tensor_from(&[p], &[1], DType::F64).unwrap(), &tensor_from(&[t], &[1], DType::F64).unwrap()).unwrap())
            .unwrap()
    };
    assert!((r(1.5, 1.5) - 0.918939).abs() < 1e-6);
    assert!((r(0.0, 2.0) - 2.918939).abs() < 1e-6);
    assert!(r(0.0, 3.0) > r(0.0, 2.5));
}

fn belief(mean: &[f64], std: &[f64]) -> GaussianBelief {
    GaussianBelief {
        mean: tensor_from(mean, &[1, mean.len()], DType::F64).unwrap(),
        std: tensor_from(std, &[1, std.len()], DType::F64).unwrap(),
    }
}

#[test]
fn kl_examples() {
    let p = belief(&[0.3, -1.0], &[0.5, 2.0]);
    let (term, kl) = kl_regularizer(&p, &p, 1.0, 0.0).unwrap();
    assert_eq!(kl, 0.0);
    assert_eq!(scalar_f64(&term).unwrap(), 0.0);
    let (term, _) = kl_regularizer(&belief(&[1.0], &[1.0]), &belief(&[0.0], &[1.0]), 1.0, 0.0).unwrap();
    assert!((scalar_f64(&term).unwrap() + 0.5).abs() < 1e-12);
    // KL = 2 < free nats 3
    let (term, kl) = kl_regularizer(&belief(&[2.0], &[1.0]), &belief(&[0.0], &[1.0]), 1.0, 3.0).unwrap();
    assert!((kl - 2.0).abs() < 1e-12);
    assert_eq!(scalar_f64(&term).unwrap(), 0.0);
    assert!(matches!(
        kl_regularizer(&belief(&[0.0], &[0.0]), &p, 1.0, 0.0),
        Err(crate::error::Error::InvalidBelief(_))
    ));
}

#[test]
fn totals_are_the_stated_sums() {
    let b = tiny_bundle(7);
    let batch = SequenceBatch::synthetic(2, 3, 8, 1);
    let cfg = LossConfig {
        lambda_radv: 0.0,
        lambda_os: 0.0,
        ..zero_cfg()
    };
    let out = compute_losses(&b, &batch, &cfg, 4).unwrap();
    let l = out.breakdown;
    assert_eq!(l.total_distractor, l.J_Oj + l.J_Ds);
    assert_eq!(l.J_Os, 0.0);
    assert_eq!(l.J_Radv, 0.0);
    let full = compute_losses(&b, &batch, &zero_cfg(), 4).unwrap().breakdown;
    assert!((full.total_task - (full.J_Oj + full.J_R + full.J_D)).abs() < 1e-9);
    assert!((full.total_distractor - (full.J_Oj + full.J_Os + full.J_Radv + full.J_Ds)).abs() < 1e-9);
}

#[test]
fn solo_decoder_does_not_enter_the_task_total() {
    let b = tiny_bundle(8);
    let batch = SequenceBatch::synthetic(2, 3, 8, 2);
    let before = compute_losses(&b, &batch, &zero_cfg(), 1).unwrap().breakdown;
    for (name, var) in b.params.select(|n| n.starts_with("distractor/solo_decoder/")) {
        b.params.assign(&name, &vec![0.3; var.elem_count()]).unwrap();
    }
    let after = compute_losses(&b, &batch, &zero_cfg(), 1).unwrap().breakdown;
    assert_eq!(after.total_task, before.total_task);
    assert_ne!(after.J_Os, before.J_Os);
}

fn adv_setup() -> (ModelBundle, Tensor, Tensor) {
    let b = tiny_bundle(9);
    let batch = SequenceBatch::synthetic(2, 4, 8, 3);
    let out = compute_losses(&b, &batch, &zero_cfg(), 2).unwrap();
    let (_, _, rewards) = batch_tensors(&batch, DType::F64).unwrap();
    (b, out.distractor_features.unwrap().detach(), rewards)
}

#[test]
fn adversarial_update_with_zero_iterations_is_a_no_op() {
    let (b, f, r) = adv_setup();
    let before = b.params.values().unwrap();
    let mut opt = Adam::new(b.adversarial_group(), 1e-3, 1e-8, 100.0).unwrap();
    assert!(adversarial_head_update(&b, &f, &r, 0, &mut opt).unwrap().is_empty());
    assert_eq!(b.params.values().unwrap(), before);
}

#[test]
fn adversarial_update_descends_and_touches_only_the_head() {
    let (b, f, r) = adv_setup();
    let before = b.params.values().unwrap();
    let mut opt = Adam::new(b.adversarial_group(), 1e-4, 1e-8, 100.0).unwrap();
    let hist = adversarial_head_update(&b, &f, &r, 6, &mut opt).unwrap();
    assert_eq!(hist.len(), 7);
    for w in hist.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{hist:?}");
    }
    for ((name, old), (_, new)) in before.iter().zip(b.params.values().unwrap()) {
        if name.starts_with(ADV_HEAD_PREFIX) {
            continue;
        }
        assert_eq!(old, &new, "{name} changed");
    }
}

#[test]
fn dreamer_loss_reduces_from_the_paired_objective() {
    let b = tiny_bundle(10);
    set_mixer_bias(&b, 50.0);
    let batch = SequenceBatch::synthetic(2, 3, 8, 5);
    let cfg = LossConfig {
        lambda_radv: 0.0,
        lambda_os: 0.0,
        ..zero_cfg()
    };
    let paired = compute_losses(&b, &batch, &cfg, 6).unwrap().breakdown;
    let single = DreamerModel::from_task_branch(&b).unwrap();
    let base = dreamer_baseline_loss(&single, &batch, &cfg, 6).unwrap().breakdown;
    assert!((paired.J_Oj - base.J_Oj).abs() < 1e-9);
    assert_eq!(paired.J_R, base.J_R);
    assert_eq!(paired.J_D, base.J_D);
    assert!((paired.total_task - base.total_task).abs() < 1e-9);
}

#[test]
fn reconstruction_floor_for_8x8() {
    let floor = 192.0 * HALF_LN_2PI;
    let img = rows(4, 192, 0.4);
    let v = scalar_f64(&gaussian_image_nll(&img, &img).unwrap()).unwrap();
    assert!((v - floor).abs() < 1e-9);
}

#[test]
fn inverse_floor_and_no_decoder() {
    let a = rows(3, 2, 0.2);
    let v = scalar_f64(&crate::nn::gaussian_nll(&a, &a).unwrap()).unwrap();
    assert!((v - 2.0 * 0.918939).abs() < 1e-6);
    let m = InverseModel::new(ModelDims::tiny(8), 0.1, DType::F64, 0).unwrap();
    assert_eq!(m.params.count("task/decoder"), 0);
    let batch = SequenceBatch::synthetic(2, 3, 8, 7);
    let out = inverse_model_loss(&m, &batch, &zero_cfg(), 0).unwrap();
    assert!(out.stats.inverse_nll.unwrap() >= 2.0 * HALF_LN_2PI);
    assert_eq!(out.breakdown.J_Oj, 0.0);
}

#[test]
fn short_batches_are_rejected() {
    let b = tiny_bundle(11);
    assert!(compute_losses(&b, &SequenceBatch::synthetic(2, 1, 8, 0), &zero_cfg(), 0).is_err());
}

#[test]
fn matched_budget_is_close_to_the_baseline() {
    let s = matched_scale(32, 1.0).unwrap();
    let dims = ModelDims::standard(32, s);
    let paired = ModelBundle::new(dims, dims, 0.1, DType::F32, 0).unwrap().params.count("") as f64;
    let single = dreamer_param_count(32, 1.0).unwrap() as f64;
    assert!((paired / single - 1.0).abs() < 0.1, "{paired} vs {single}");
}
