//! Alternating generator/critic optimization, evaluation and checkpointing.
//!
//! Every iteration's batches and augmentations are drawn from an RNG seeded
//! by `(data_seed, iteration)`, so a run resumed from a checkpoint replays
//! exactly the batches an uninterrupted run would see; no RNG state needs to
//! be stored.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Record};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{disc_loss, gen_adv_loss, seg_ce, total_loss, GeneratorTerms, LossReport};
use crate::metrics::{Confusion, MetricsRow};
use crate::model::{Ds2Net, Group};
use crate::nets::{derive_seed, Params};
use crate::optim::{poly_lr, Adam, Sgd};
use crate::synthdata::{augment, generate_split, load_split, Domain, GenSpec, SamplePair, Split, SplitCounts};
use crate::tensor::{locate_non_finite, Tensor};

/// Images stacked as `N x 3 x H x W` with labels `N x H x W`.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a SamplePair>) -> Result<Batch> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for s in samples {
            if *dims.get_or_insert((s.height, s.width)) != (s.height, s.width) {
                return Err(Error::InvalidShape(format!(
                    "batch mixes image sizes {:?} and {}x{}",
                    dims.expect("set"),
                    s.height,
                    s.width
                )));
            }
            images.extend_from_slice(&s.image);
            labels.extend_from_slice(&s.mask);
            n += 1;
        }
        let (h, w) = dims.ok_or_else(|| Error::InvalidShape("empty batch".into()))?;
        Ok(Batch {
            images: Tensor::from_vec(&[n, 3, h, w], images)?,
            labels,
        })
    }
}

/// Name of the source-domain test set in metrics rows.
pub const SOURCE_TEST: &str = "source-test";
/// Name of the target-domain test set in metrics rows.
pub const TARGET_TEST: &str = "target-test";

/// Training pools and evaluation sets for one run.
pub struct TrainData {
    pub source_train: Vec<SamplePair>,
    pub target_train: Vec<SamplePair>,
    /// Named sets scored at every evaluation, e.g. `("target-test", ..)`.
    pub eval: Vec<(String, Vec<SamplePair>)>,
}

impl TrainData {
    /// Source/target training pools and both test splits for `config`'s
    /// domain pair, read from a generated dataset directory.
    pub fn load(root: &Path, config: &RunConfig) -> Result<Self> {
        let (s, t) = (config.source_domain, config.target_domain);
        Ok(TrainData {
            source_train: load_split(root, s, Split::Train)?,
            target_train: load_split(root, t, Split::Train)?,
            eval: vec![
                (SOURCE_TEST.to_string(), load_split(root, s, Split::Test)?),
                (TARGET_TEST.to_string(), load_split(root, t, Split::Test)?),
            ],
        })
    }

    /// Same content as [`TrainData::load`] on a directory written by
    /// `make_split(spec, counts, master, ..)`, generated in memory.
    pub fn generate(spec: &GenSpec, counts: SplitCounts, master: u64, config: &RunConfig) -> Result<Self> {
        let n = |d: Domain, split: Split| match (d, split) {
            (Domain::A, Split::Train) => counts.train_a,
            (Domain::A, Split::Test) => counts.test_a,
            (Domain::B, Split::Train) => counts.train_b,
            (Domain::B, Split::Test) => counts.test_b,
        };
        let gen = |d: Domain, split: Split| generate_split(spec, master, d, split, n(d, split));
        let (s, t) = (config.source_domain, config.target_domain);
        Ok(TrainData {
            source_train: gen(s, Split::Train)?,
            target_train: gen(t, Split::Train)?,
            eval: vec![
                (SOURCE_TEST.to_string(), gen(s, Split::Test)?),
                (TARGET_TEST.to_string(), gen(t, Split::Test)?),
            ],
        })
    }

    fn image_size(&self) -> Result<(usize, usize)> {
        let s = self
            .source_train
            .first()
            .ok_or_else(|| Error::Config("source training split is empty".into()))?;
        Ok((s.height, s.width))
    }
}

/// Learning rates of the three parameter groups at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub encoder: f64,
    pub head: f64,
    pub disc: f64,
}

/// Everything needed to continue a run.
pub struct TrainState {
    pub config: RunConfig,
    pub model: Ds2Net<f32>,
    pub sgd_encoder: Sgd<f32>,
    pub sgd_head: Sgd<f32>,
    pub adam: Adam<f32>,
    /// Completed iterations.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        let model = Ds2Net::new(&config, config.init_seed)?;
        Ok(TrainState {
            sgd_encoder: Sgd::new(config.momentum, config.weight_decay),
            sgd_head: Sgd::new(config.momentum, config.weight_decay),
            adam: Adam::new(config.adam_beta1, config.adam_beta2),
            model,
            config,
            iteration: 0,
        })
    }

    pub fn rates(&self, t: usize) -> Rates {
        let c = &self.config;
        let lr = |base| poly_lr(base, t, c.iterations, c.poly_power, c.lr_floor);
        Rates {
            encoder: lr(c.encoder_lr),
            head: lr(c.head_lr),
            disc: lr(c.disc_lr),
        }
    }

    /// Digest of the parameter bits of one group.
    pub fn param_digest(&self, group: Group) -> [u8; 32] {
        let mut h = Sha256::new();
        self.model.visit("", &mut |name, t| {
            if Group::of(&name) == group {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        });
        h.finalize().into()
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out = vec![
            Record::counter("state.iteration", self.iteration as u64),
            Record::counter("state.adam_steps", self.adam.steps),
        ];
        self.model.visit("", &mut |name, t| out.push(Record::new(format!("param.{name}"), t.shape(), t.data())));
        let moments = |prefix: &str, map: &BTreeMap<String, Vec<f32>>, out: &mut Vec<Record>| {
            for (k, v) in map {
                out.push(Record::new(format!("{prefix}.{k}"), &[v.len()], v));
            }
        };
        moments("sgd_encoder", &self.sgd_encoder.velocity, &mut out);
        moments("sgd_head", &self.sgd_head.velocity, &mut out);
        moments("adam_m", &self.adam.m, &mut out);
        moments("adam_v", &self.adam.v, &mut out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.config.hash(), &self.records())
    }

    /// Restores a state saved under the same configuration.
    pub fn load(config: RunConfig, path: &Path) -> Result<Self> {
        let (hash, records) = checkpoint::load(path)?;
        if hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was written under config {hash:016x}, not {}",
                path.display(),
                config.hash_hex()
            )));
        }
        let mut state = TrainState::new(config)?;
        let mut by_name: BTreeMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut take = |name: &str| by_name.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing record {name}")));
        state.iteration = take("state.iteration")?.as_counter()? as usize;
        state.adam.steps = take("state.adam_steps")?.as_counter()?;
        let mut failure = None;
        state.model.visit_mut("", &mut |name, t| {
            let restored = take(&format!("param.{name}")).and_then(|r| {
                if r.shape != t.shape() {
                    return Err(Error::Checkpoint(format!("param {name}: shape {:?} vs {:?}", r.shape, t.shape())));
                }
                Tensor::param(&r.shape, r.to_vec()?)
            });
            match restored {
                Ok(p) => *t = p,
                Err(e) => failure = failure.take().or(Some(e)),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for r in records.iter() {
            let Some((prefix, key)) = r.name.split_once('.') else { continue };
            let map = match prefix {
                "sgd_encoder" => &mut state.sgd_encoder.velocity,
                "sgd_head" => &mut state.sgd_head.velocity,
                "adam_m" => &mut state.adam.m,
                "adam_v" => &mut state.adam.v,
                "param" | "state" => continue,
                other => return Err(Error::Checkpoint(format!("unknown record group {other}"))),
            };
            map.insert(key.to_string(), r.to_vec()?);
        }
        Ok(state)
    }
}

/// Detached features handed from the generator to the critic phase.
pub struct CriticInputs {
    pub f_ss: Tensor<f32>,
    pub f_st: Tensor<f32>,
    pub f_tt: Tensor<f32>,
    pub f_ts: Tensor<f32>,
}

fn check_finite(loss: &Tensor<f32>, context: &str) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let (op, node) = locate_non_finite(loss).map_or(("unknown".to_string(), 0), |t| (t.op_name().to_string(), t.id()));
    Err(Error::NonFinite {
        op,
        node,
        context: context.to_string(),
    })
}

/// Updates encoders, selectors and heads on the combined segmentation and
/// (if enabled) adversarial objective, with the critics held fixed.
pub fn generator_phase(state: &mut TrainState, batch_s: &Batch, batch_t: Option<&Batch>) -> Result<(LossReport, Option<CriticInputs>)> {
    let t = state.iteration;
    let model = &state.model;
    let fwd = model.forward_source(&batch_s.images)?;
    let seg_ss = seg_ce(&fwd.logits_ss, &batch_s.labels)?;
    let seg_st = fwd.logits_st.as_ref().map(|l| seg_ce(l, &batch_s.labels)).transpose()?;

    let mut critic = None;
    let (mut adv_s, mut adv_t) = (None, None);
    if let (Some(d_s), Some(d_t), Some(enc_t), Some(f_st)) = (&model.disc_s, &model.disc_t, &model.enc_t, &fwd.f_st) {
        let x_t = &batch_t
            .ok_or_else(|| Error::Config("feature alignment needs a target batch".into()))?
            .images;
        let f_ts = model.enc_s.encode(x_t)?;
        let f_tt = enc_t.encode(x_t)?;
        adv_s = Some(gen_adv_loss(d_s, &f_ts)?);
        adv_t = Some(gen_adv_loss(d_t, f_st)?);
        critic = Some(CriticInputs {
            f_ss: fwd.f_ss.detach(),
            f_st: f_st.detach(),
            f_tt: f_tt.detach(),
            f_ts: f_ts.detach(),
        });
    }
    let terms = GeneratorTerms {
        seg_ss,
        seg_st,
        adv_es_gen: adv_s,
        adv_et_gen: adv_t,
    };
    let (total, report) = total_loss(&terms, state.config.lambda_es, state.config.lambda_et)?;
    check_finite(&total, &format!("the generator loss at iteration {t}"))?;
    total.backward()?;

    let rates = state.rates(t);
    let (sgd_e, sgd_h) = (&mut state.sgd_encoder, &mut state.sgd_head);
    let mut failure = None;
    state.model.visit_mut("", &mut |name, p| {
        let next = match Group::of(&name) {
            Group::Encoder => sgd_e.step(&name, p, rates.encoder),
            Group::Head => sgd_h.step(&name, p, rates.head),
            Group::Discriminator => return,
        };
        match next {
            Ok(n) => *p = n,
            Err(e) => failure = failure.take().or(Some(e)),
        }
    });
    failure.map_or(Ok((report, critic)), Err)
}

/// One Adam step of both critics on detached features. Returns the two
/// critic losses measured before the step.
pub fn discriminator_phase(state: &mut TrainState, f: &CriticInputs) -> Result<(f64, f64)> {
    let t = state.iteration;
    let (Some(d_s), Some(d_t)) = (&state.model.disc_s, &state.model.disc_t) else {
        return Err(Error::Config("critic phase without discriminators".into()));
    };
    let l_s = disc_loss(d_s, &f.f_ss, &f.f_ts)?;
    let l_t = disc_loss(d_t, &f.f_tt, &f.f_st)?;
    let both = l_s.add(&l_t)?;
    check_finite(&both, &format!("the discriminator loss at iteration {t}"))?;
    both.backward()?;
    let lr = state.rates(t).disc;
    let adam = &mut state.adam;
    adam.begin_step();
    let mut failure = None;
    state.model.visit_mut("", &mut |name, p| {
        if Group::of(&name) == Group::Discriminator {
            match adam.step(&name, p, lr) {
                Ok(n) => *p = n,
                Err(e) => failure = failure.take().or(Some(e)),
            }
        }
    });
    failure.map_or(Ok((f64::from(l_s.item()), f64::from(l_t.item()))), Err)
}

/// Generator then critic update on one pair of batches; advances the
/// iteration counter.
pub fn train_step(state: &mut TrainState, batch_s: &Batch, batch_t: Option<&Batch>) -> Result<LossReport> {
    let (mut report, critic) = generator_phase(state, batch_s, batch_t)?;
    if let Some(f) = critic {
        let (a, b) = discriminator_phase(state, &f)?;
        report.adv_es_disc = a;
        report.adv_et_disc = b;
    }
    state.iteration += 1;
    Ok(report)
}

/// Draws `n` samples with replacement, augmenting each with its own seed.
pub fn sample_batch(pool: &[SamplePair], n: usize, augmented: bool, seed: u64) -> Result<Batch> {
    if pool.is_empty() {
        return Err(Error::Config("cannot draw a batch from an empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<SamplePair> = (0..n)
        .map(|_| {
            let s = &pool[rng.gen_range(0..pool.len())];
            let aug_seed: u64 = rng.gen();
            if augmented {
                augment(s, aug_seed)
            } else {
                s.clone()
            }
        })
        .collect();
    Batch::from_samples(&picked)
}

/// The batches of iteration `t`, a pure function of the config and `t`.
pub fn batches_at(config: &RunConfig, data: &TrainData, t: usize) -> Result<(Batch, Option<Batch>)> {
    let s = sample_batch(
        &data.source_train,
        config.batch_size,
        config.augment,
        derive_seed(config.data_seed, &format!("source-batch-{t}")),
    )?;
    let tb = if config.feature_align {
        Some(sample_batch(
            &data.target_train,
            config.batch_size,
            config.augment,
            derive_seed(config.data_seed, &format!("target-batch-{t}")),
        )?)
    } else {
        None
    };
    Ok((s, tb))
}

/// Confusion of the model's predictions over a whole split.
pub fn evaluate(model: &Ds2Net<f32>, samples: &[SamplePair]) -> Result<Confusion> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut c = Confusion::new();
    for chunk in samples.chunks(16) {
        let b = Batch::from_samples(chunk)?;
        c.accumulate(&model.predict(&b.images)?, &b.labels)?;
    }
    Ok(c)
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    Loss {
        iteration: usize,
        rates: Rates,
        report: &'a LossReport,
    },
    Metrics(&'a MetricsRow),
}

/// Scores every evaluation set of `data` at the state's iteration.
pub fn evaluate_all(state: &TrainState, data: &TrainData) -> Result<Vec<MetricsRow>> {
    data.eval
        .iter()
        .map(|(name, samples)| {
            let c = evaluate(&state.model, samples)?;
            MetricsRow::from_confusion(&state.config.run_id, &state.config.hash_hex(), state.iteration, name, &c)
        })
        .collect()
}

/// Trains until `until` iterations are complete (capped at the configured
/// total). Evaluates on the configured interval and always at the final
/// iteration.
pub fn train(state: &mut TrainState, data: &TrainData, until: usize, observer: &mut dyn FnMut(TrainEvent)) -> Result<()> {
    let (h, w) = data.image_size()?;
    state.config.validate_image(h, w)?;
    let cfg = state.config.clone();
    let until = until.min(cfg.iterations);
    while state.iteration < until {
        let t = state.iteration;
        let (bs, bt) = batches_at(&cfg, data, t)?;
        let report = train_step(state, &bs, bt.as_ref())?;
        if cfg.log_interval > 0 && (t % cfg.log_interval == 0 || state.iteration == cfg.iterations) {
            observer(TrainEvent::Loss {
                iteration: t,
                rates: state.rates(t),
                report: &report,
            });
        }
        let done = state.iteration;
        if done == cfg.iterations || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) {
            for row in evaluate_all(state, data)? {
                observer(TrainEvent::Metrics(&row));
            }
        }
    }
    Ok(())
}

/// CSV header matching [`loss_csv_line`].
pub const LOSS_HEADER: &str =
    "iteration,lr_encoder,lr_head,lr_disc,seg_ss,seg_st,adv_es_gen,adv_et_gen,adv_es_disc,adv_et_disc,total";

pub fn loss_csv_line(iteration: usize, r: &Rates, l: &LossReport) -> String {
    format!(
        "{iteration},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
        r.encoder, r.head, r.disc, l.seg_ss, l.seg_st, l.adv_es_gen, l.adv_et_gen, l.adv_es_disc, l.adv_et_disc, l.total
    )
}

/// Outcome of one complete run.
pub struct RunOutcome {
    pub metrics: Vec<MetricsRow>,
    pub losses: Vec<String>,
}

impl RunOutcome {
    /// Final row of the named evaluation set.
    pub fn final_metrics(&self, set: &str) -> Option<&MetricsRow> {
        self.metrics.iter().rev().find(|m| m.split == set)
    }
}

/// Fresh run from initialization to the configured iteration count.
pub fn run(config: RunConfig, data: &TrainData) -> Result<RunOutcome> {
    let mut state = TrainState::new(config)?;
    let mut out = RunOutcome {
        metrics: Vec::new(),
        losses: Vec::new(),
    };
    let total = state.config.iterations;
    train(&mut state, data, total, &mut |e| match e {
        TrainEvent::Loss { iteration, rates, report } => out.losses.push(loss_csv_line(iteration, &rates, report)),
        TrainEvent::Metrics(m) => out.metrics.push(m.clone()),
    })?;
    Ok(out)
}
