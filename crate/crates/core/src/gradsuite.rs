//! Finite-difference gradient audit of every op family and of the
//! selector/head and critic paths, in f64 over many random draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{bce_with_logits, disc_loss, seg_ce};
use crate::nets::{Discriminator, DiscriminatorConfig, Head};
use crate::selectors::{select, Ddsm, Dusm, SelectorOutput};
use crate::tensor::{grad_check, Tensor};

/// Worst relative error of one family over all its draws.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResult {
    pub name: &'static str,
    pub draws: usize,
    pub max_rel_err: f64,
}

impl FamilyResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

type Family = fn(&mut ChaCha8Rng, usize, f64) -> Result<f64>;

const FAMILIES: &[(&str, Family)] = &[
    ("elementwise", elementwise),
    ("matmul", matmul),
    ("conv2d", conv2d),
    ("reduce+softmax", reduce_softmax),
    ("reshape/concat/slice/upsample", shape_ops),
    ("losses", losses),
    ("ddsm+head", gated),
    ("dusm+head", attended),
    ("ddsm+dusm+head", both_selectors),
    ("discriminator", discriminator),
];

/// Runs every family `draws` times with central differences of step `eps`.
pub fn run_suite(draws: usize, eps: f64) -> Result<Vec<FamilyResult>> {
    FAMILIES
        .iter()
        .enumerate()
        .map(|(k, &(name, f))| {
            let mut worst: f64 = 0.0;
            for i in 0..draws {
                let mut rng = ChaCha8Rng::seed_from_u64(((k as u64) << 32) | i as u64);
                worst = worst.max(f(&mut rng, i, eps)?);
            }
            Ok(FamilyResult {
                name,
                draws,
                max_rel_err: worst,
            })
        })
        .collect()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Values bounded away from zero, for divisors.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).expect("shape matches")
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect()
}

fn elementwise(rng: &mut ChaCha8Rng, _: usize, eps: f64) -> Result<f64> {
    let a = rand_t(rng, &[2, 3, 2]);
    let b = rand_away(rng, &[2, 3, 2]);
    let c = rand_away(rng, &[2, 1, 2]);
    let binary = grad_check(
        |x| {
            let s = x[0].add(&x[1])?.mul(&x[0])?.sub(&x[2])?.div(&x[1])?;
            Ok(s.mul(&x[2])?.sum_all())
        },
        &[a, b, c],
        eps,
    )?;
    let u = rand_away(rng, &[3, 4]);
    let unary = grad_check(
        |x| {
            let y = x[0]
                .mul(&x[0])?
                .scale(0.5)
                .exp()
                .log()
                .add(&x[0].sigmoid())?
                .add(&x[0].relu())?
                .add(&x[0].leaky_relu(0.2))?
                .add(&x[0].tanh())?
                .add(&x[0].softplus())?
                .add(&x[0].neg())?;
            Ok(y.mul(&y)?.sum_all())
        },
        &[u],
        eps,
    )?;
    Ok(binary.max_rel_err.max(unary.max_rel_err))
}

fn matmul(rng: &mut ChaCha8Rng, _: usize, eps: f64) -> Result<f64> {
    let (a, b, w) = (rand_t(rng, &[2, 3, 5]), rand_t(rng, &[2, 4, 5]), rand_t(rng, &[2, 3, 4]));
    Ok(grad_check(|x| Ok(x[0].matmul(&x[1].transpose()?)?.mul(&x[2])?.sum_all()), &[a, b, w], eps)?.max_rel_err)
}

fn conv2d(rng: &mut ChaCha8Rng, i: usize, eps: f64) -> Result<f64> {
    let k = [1, 3, 4][i % 3];
    let stride = 1 + (i / 3) % 2;
    let pad = (i / 6) % 2;
    let h = rng.gen_range(k.max(3)..7);
    let x = rand_t(rng, &[2, 2, h, h + 1]);
    let w = rand_t(rng, &[3, 2, k, k]);
    let b = rand_t(rng, &[3]);
    let out = x.conv2d(&w, Some(&b), stride, pad)?;
    let probe = rand_t(rng, out.shape());
    Ok(grad_check(|t| Ok(t[0].conv2d(&t[1], Some(&t[2]), stride, pad)?.mul(&probe)?.sum_all()), &[x, w, b], eps)?.max_rel_err)
}

fn reduce_softmax(rng: &mut ChaCha8Rng, _: usize, eps: f64) -> Result<f64> {
    let a = rand_t(rng, &[2, 3, 4]);
    let (p1, p2, p3) = (rand_t(rng, &[2]), rand_t(rng, &[3]), rand_t(rng, &[2, 3, 4]));
    Ok(grad_check(
        |x| {
            let s = x[0].sum(&[1, 2])?.mul(&p1)?.sum_all();
            let m = x[0].mean(&[0, 2])?.mul(&p2)?.sum_all();
            let sm = x[0].softmax(1)?.mul(&p3)?.sum_all();
            let ls = x[0].log_softmax(2)?.mul(&p3)?.sum_all();
            Ok(s.add(&m)?.add(&sm)?.add(&ls)?)
        },
        &[a],
        eps,
    )?
    .max_rel_err)
}

fn shape_ops(rng: &mut ChaCha8Rng, _: usize, eps: f64) -> Result<f64> {
    let (a, b) = (rand_t(rng, &[1, 2, 3, 3]), rand_t(rng, &[1, 1, 3, 3]));
    let p = rand_t(rng, &[1, 2, 6, 6]);
    Ok(grad_check(
        |x| {
            let cat = Tensor::concat(&[x[0].clone(), x[1].clone()], 1)?;
            let r = cat.slice(1, 1, 2)?.reshape(&[2, 9])?.reshape(&[1, 2, 3, 3])?;
            Ok(r.upsample_bilinear(2)?.mul(&p)?.sum_all())
        },
        &[a, b],
        eps,
    )?
    .max_rel_err)
}

fn losses(rng: &mut ChaCha8Rng, _: usize, eps: f64) -> Result<f64> {
    let logits = rand_t(rng, &[2, 2, 3, 3]);
    let y = labels(rng, 18);
    let d = rand_t(rng, &[2, 1, 2, 2]);
    Ok(grad_check(
        |x| {
            let bce = bce_with_logits(&x[1], true).add(&bce_with_logits(&x[1], false).scale(0.5))?;
            Ok(seg_ce(&x[0], &y)?.add(&bce)?)
        },
        &[logits, d],
        eps,
    )?
    .max_rel_err)
}

fn gated(rng: &mut ChaCha8Rng, i: usize, eps: f64) -> Result<f64> {
    selector_path(rng, i, eps, true, false)
}

fn attended(rng: &mut ChaCha8Rng, i: usize, eps: f64) -> Result<f64> {
    selector_path(rng, i, eps, false, true)
}

fn both_selectors(rng: &mut ChaCha8Rng, i: usize, eps: f64) -> Result<f64> {
    selector_path(rng, i, eps, true, true)
}

const KINK_MARGIN: f64 = 1e-3;

/// Cross-entropy of both styles' head outputs after the selectors, with
/// respect to the two features and one weight of every module involved.
fn selector_path(rng: &mut ChaCha8Rng, i: usize, eps: f64, gating: bool, attention: bool) -> Result<f64> {
    let (c, extra) = (4, 2);
    let seed = rng.gen();
    let ddsm = Ddsm::<f64>::new(seed, "ddsm", c, 1)?;
    let dusm = Dusm::<f64>::new(seed, "dusm", c, extra)?;
    let head = Head::<f64>::new(seed, "head", c + extra, 3, 2)?;
    // Central differences straddling the head's ReLU kink measure a jump,
    // not a derivative: redraw features until every hidden pre-activation
    // is clear of zero.
    let (f_s, f_t) = loop {
        let (f_s, f_t) = (rand_t(rng, &[2, c, 3, 3]), rand_t(rng, &[2, c, 3, 3]));
        let (s, t) = select(&f_s, &f_t, gating.then_some(&ddsm), attention.then_some(&dusm), extra)?;
        let clear = |o: &SelectorOutput<f64>| -> Result<bool> {
            let pre = head.hidden.forward(&o.ds2)?;
            Ok(pre.data().iter().all(|v| v.abs() > KINK_MARGIN))
        };
        if clear(&s)? && clear(&t)? {
            break (f_s, f_t);
        }
    };
    let y_s = labels(rng, 2 * 6 * 6);
    let y_t = labels(rng, 2 * 6 * 6);
    // Rotate which selector weight is probed so every one is covered.
    let probe_ddsm = [&ddsm.f.weight, &ddsm.g_s.weight, &ddsm.g_t.weight][i % 3].clone();
    let probe_dusm = [&dusm.f_c.weight, &dusm.f_cs.weight, &dusm.f_ct.weight][i % 3].clone();
    let inputs = [f_s, f_t, probe_ddsm.detach(), probe_dusm.detach(), head.hidden.weight.detach()];
    let report = grad_check(
        |x| {
            let mut d = ddsm.clone();
            *[&mut d.f.weight, &mut d.g_s.weight, &mut d.g_t.weight][i % 3] = x[2].clone();
            let mut u = dusm.clone();
            *[&mut u.f_c.weight, &mut u.f_cs.weight, &mut u.f_ct.weight][i % 3] = x[3].clone();
            let mut h = head.clone();
            h.hidden.weight = x[4].clone();
            let (s, t) = select(&x[0], &x[1], gating.then_some(&d), attention.then_some(&u), extra)?;
            seg_ce(&h.forward(&s.ds2)?, &y_s)?.add(&seg_ce(&h.forward(&t.ds2)?, &y_t)?)
        },
        &inputs,
        eps,
    )?;
    // Probes of disabled modules get zero gradients on both sides and
    // contribute nothing to the error.
    Ok(report.max_rel_err)
}

fn discriminator(rng: &mut ChaCha8Rng, _: usize, eps: f64) -> Result<f64> {
    let cfg = DiscriminatorConfig {
        channels: vec![3, 3, 2],
        ..DiscriminatorConfig::default()
    };
    let d = Discriminator::<f64>::new(rng.gen(), "disc", 2, &cfg)?;
    let side = cfg.min_feature_size();
    let real = rand_t(rng, &[1, 2, side, side]);
    let fake = rand_t(rng, &[1, 2, side, side]);
    let first = d.layers[0].weight.detach();
    Ok(grad_check(
        |x| {
            let mut dd = d.clone();
            dd.layers[0].weight = x[2].clone();
            disc_loss(&dd, &x[0], &x[1])
        },
        &[real, fake, first],
        eps,
    )?
    .max_rel_err)
}
