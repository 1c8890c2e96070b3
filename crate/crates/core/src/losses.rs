//! Segmentation cross-entropy, patch-level adversarial BCE and the combined
//! generator objective.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nets::Discriminator;
use crate::tensor::{Element, Tensor};

/// Pixel-mean cross-entropy of `N x 2 x H x W` logits against `{0,1}` labels
/// laid out `N x H x W`.
pub fn seg_ce<T: Element>(logits: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::InvalidShape(format!(
            "segmentation logits must be N x 2 x H x W, got {s:?}"
        )));
    }
    let (n, plane) = (s[0], s[2] * s[3]);
    if labels.len() != n * plane {
        return Err(Error::InvalidShape(format!(
            "expected {} labels for logits {s:?}, got {}",
            n * plane,
            labels.len()
        )));
    }
    let mut onehot = vec![T::zero(); 2 * n * plane];
    for (index, &value) in labels.iter().enumerate() {
        if value > 1 {
            return Err(Error::Label { index, value });
        }
        let (i, p) = (index / plane, index % plane);
        onehot[(i * 2 + usize::from(value)) * plane + p] = T::one();
    }
    let onehot = Tensor::from_vec(s, onehot)?;
    let picked = logits.log_softmax(1)?.mul(&onehot)?.sum_all();
    Ok(picked.scale(-1.0 / (n * plane) as f64))
}

/// Mean binary cross-entropy of raw logits against a constant label.
pub fn bce_with_logits<T: Element>(logits: &Tensor<T>, label: bool) -> Tensor<T> {
    // -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - y x
    let sp = logits.softplus();
    let per = if label { sp.sub(logits).expect("same shape") } else { sp };
    per.mean_all()
}

/// Critic objective: own-domain feature labelled real, the other domain's
/// feature labelled fake, averaged.
pub fn disc_loss<T: Element>(d: &Discriminator<T>, real: &Tensor<T>, fake: &Tensor<T>) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::shape("disc_loss", real.shape(), fake.shape()));
    }
    let r = bce_with_logits(&d.discriminate(real)?, true);
    let f = bce_with_logits(&d.discriminate(fake)?, false);
    Ok(r.add(&f)?.scale(0.5))
}

/// Non-saturating encoder objective: make the cross-domain feature look
/// native to a critic whose weights are held fixed.
pub fn gen_adv_loss<T: Element>(d: &Discriminator<T>, fake: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(bce_with_logits(&d.discriminate_frozen(fake)?, true))
}

/// Scalar summary of one training iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub seg_ss: f64,
    pub seg_st: f64,
    pub adv_es_gen: f64,
    pub adv_et_gen: f64,
    pub adv_es_disc: f64,
    pub adv_et_disc: f64,
    pub total: f64,
    pub lambda_es: f64,
    pub lambda_et: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.seg_ss,
            self.seg_st,
            self.adv_es_gen,
            self.adv_et_gen,
            self.adv_es_disc,
            self.adv_et_disc,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Generator-side loss terms; absent terms contribute nothing.
pub struct GeneratorTerms<T: Element> {
    pub seg_ss: Tensor<T>,
    pub seg_st: Option<Tensor<T>>,
    pub adv_es_gen: Option<Tensor<T>>,
    pub adv_et_gen: Option<Tensor<T>>,
}

/// `seg_ss + seg_st + l_es * adv_es + l_et * adv_et`, plus its report.
pub fn total_loss<T: Element>(
    terms: &GeneratorTerms<T>,
    lambda_es: f64,
    lambda_et: f64,
) -> Result<(Tensor<T>, LossReport)> {
    for (name, l) in [("lambda_es", lambda_es), ("lambda_et", lambda_et)] {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Config(format!("{name} must be a finite non-negative weight, got {l}")));
        }
    }
    let mut total = terms.seg_ss.clone();
    if let Some(t) = &terms.seg_st {
        total = total.add(t)?;
    }
    if let Some(t) = &terms.adv_es_gen {
        total = total.add(&t.scale(lambda_es))?;
    }
    if let Some(t) = &terms.adv_et_gen {
        total = total.add(&t.scale(lambda_et))?;
    }
    let val = |t: &Option<Tensor<T>>| t.as_ref().map_or(0.0, |t| t.item().as_f64());
    let report = LossReport {
        seg_ss: terms.seg_ss.item().as_f64(),
        seg_st: val(&terms.seg_st),
        adv_es_gen: val(&terms.adv_es_gen),
        adv_et_gen: val(&terms.adv_et_gen),
        total: total.item().as_f64(),
        lambda_es,
        lambda_et,
        ..LossReport::default()
    };
    Ok((total, report))
}
