//! The assembled network: two encoders, shared selectors, two heads and two
//! feature critics, any of which may be disabled by the ablation flags.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nets::{argmax_mask, Discriminator, Encoder, Head, Params};
use crate::selectors::{select, Ddsm, Dusm};
use crate::tensor::{Element, Tensor};

/// Optimizer group of a parameter, decided by its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Encoders and selectors.
    Encoder,
    Head,
    Discriminator,
}

impl Group {
    pub fn of(name: &str) -> Group {
        if name.starts_with("head") {
            Group::Head
        } else if name.starts_with("disc") {
            Group::Discriminator
        } else {
            Group::Encoder
        }
    }
}

#[derive(Clone)]
pub struct Ds2Net<T: Element> {
    pub enc_s: Encoder<T>,
    pub head_s: Head<T>,
    pub enc_t: Option<Encoder<T>>,
    pub head_t: Option<Head<T>>,
    pub ddsm: Option<Ddsm<T>>,
    pub dusm: Option<Dusm<T>>,
    pub disc_s: Option<Discriminator<T>>,
    pub disc_t: Option<Discriminator<T>>,
    /// Universal-feature channels C'' appended to every head input.
    pub extra: usize,
}

/// Logits of the source batch under each head, plus the features used.
pub struct SourceForward<T: Element> {
    pub logits_ss: Tensor<T>,
    pub logits_st: Option<Tensor<T>>,
    pub f_ss: Tensor<T>,
    pub f_st: Option<Tensor<T>>,
}

impl<T: Element> Ds2Net<T> {
    /// Builds every enabled block; each parameter's initial values depend
    /// only on `seed` and its name, so shared blocks start identical across
    /// ablation settings.
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.encoder();
        let (c, extra) = (cfg.channels(), cfg.universal_channels());
        let up = enc.downsample();
        let head = |name: &str| Head::new(seed, name, c + extra, cfg.head_width, up);
        let disc = |name: &str| Discriminator::new(seed, name, c, &cfg.discriminator());
        Ok(Ds2Net {
            enc_s: Encoder::new(seed, "enc_s", &enc)?,
            head_s: head("head_s")?,
            enc_t: cfg.symmetric.then(|| Encoder::new(seed, "enc_t", &enc)).transpose()?,
            head_t: cfg.symmetric.then(|| head("head_t")).transpose()?,
            ddsm: cfg.ddsm.then(|| Ddsm::new(seed, "ddsm", c, cfg.gate_channels())).transpose()?,
            dusm: cfg.dusm.then(|| Dusm::new(seed, "dusm", c, extra)).transpose()?,
            disc_s: cfg.feature_align.then(|| disc("disc_s")).transpose()?,
            disc_t: cfg.feature_align.then(|| disc("disc_t")).transpose()?,
            extra,
        })
    }

    pub fn symmetric(&self) -> bool {
        self.enc_t.is_some()
    }

    /// Selected head inputs for the two styles of one image batch.
    fn selected(&self, f_s: &Tensor<T>, f_t: Option<&Tensor<T>>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match f_t {
            Some(f_t) => {
                let (s, t) = select(f_s, f_t, self.ddsm.as_ref(), self.dusm.as_ref(), self.extra)?;
                Ok((s.ds2, Some(t.ds2)))
            }
            None => {
                let (s, _) = select(f_s, f_s, None, None, self.extra)?;
                Ok((s.ds2, None))
            }
        }
    }

    /// Source-image path through both styles and both heads.
    pub fn forward_source(&self, x_s: &Tensor<T>) -> Result<SourceForward<T>> {
        let f_ss = self.enc_s.encode(x_s)?;
        let f_st = self.enc_t.as_ref().map(|e| e.encode(x_s)).transpose()?;
        let (in_s, in_t) = self.selected(&f_ss, f_st.as_ref())?;
        let logits_ss = self.head_s.forward(&in_s)?;
        let logits_st = match (&self.head_t, in_t) {
            (Some(h), Some(i)) => Some(h.forward(&i)?),
            _ => None,
        };
        Ok(SourceForward {
            logits_ss,
            logits_st,
            f_ss,
            f_st,
        })
    }

    /// Per-head class probabilities for images `x`: the source-style
    /// prediction and, in the symmetric model, the target-style one.
    pub fn head_probabilities(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let f_s = self.enc_s.encode(x)?;
        let f_t = self.enc_t.as_ref().map(|e| e.encode(x)).transpose()?;
        let (in_s, in_t) = self.selected(&f_s, f_t.as_ref())?;
        let p_s = self.head_s.forward(&in_s)?.softmax(1)?;
        let p_t = match (&self.head_t, in_t) {
            (Some(h), Some(i)) => Some(h.forward(&i)?.softmax(1)?),
            _ => None,
        };
        Ok((p_s, p_t))
    }

    /// Predicted masks (`N x H x W`): the mean of both heads' probabilities
    /// in the symmetric model, the single head otherwise.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let (p_s, p_t) = self.head_probabilities(&x.detach())?;
        Ok(match p_t {
            Some(p_t) => ensemble_masks(&p_s, &p_t)?,
            None => argmax_mask(&p_s),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n));
        names
    }
}

/// Argmax of the mean of two probability maps.
pub fn ensemble_masks<T: Element>(p_a: &Tensor<T>, p_b: &Tensor<T>) -> Result<Vec<u8>> {
    if p_a.shape() != p_b.shape() {
        return Err(Error::shape("ensemble", p_a.shape(), p_b.shape()));
    }
    Ok(argmax_mask(&p_a.add(p_b)?.scale(0.5)))
}

impl<T: Element> Params<T> for Ds2Net<T> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.enc_s.visit("enc_s", f);
        if let Some(m) = &self.enc_t {
            m.visit("enc_t", f);
        }
        if let Some(m) = &self.ddsm {
            m.visit("ddsm", f);
        }
        if let Some(m) = &self.dusm {
            m.visit("dusm", f);
        }
        self.head_s.visit("head_s", f);
        if let Some(m) = &self.head_t {
            m.visit("head_t", f);
        }
        if let Some(m) = &self.disc_s {
            m.visit("disc_s", f);
        }
        if let Some(m) = &self.disc_t {
            m.visit("disc_t", f);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.enc_s.visit_mut("enc_s", f);
        if let Some(m) = &mut self.enc_t {
            m.visit_mut("enc_t", f);
        }
        if let Some(m) = &mut self.ddsm {
            m.visit_mut("ddsm", f);
        }
        if let Some(m) = &mut self.dusm {
            m.visit_mut("dusm", f);
        }
        self.head_s.visit_mut("head_s", f);
        if let Some(m) = &mut self.head_t {
            m.visit_mut("head_t", f);
        }
        if let Some(m) = &mut self.disc_s {
            m.visit_mut("disc_s", f);
        }
        if let Some(m) = &mut self.disc_t {
            m.visit_mut("disc_t", f);
        }
    }
}

/// Parameter count implied by a configuration, without building tensors.
pub fn param_count(cfg: &RunConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let lin = |i: usize, o: usize| o * i + o;
    let (c, extra) = (cfg.channels(), cfg.universal_channels());
    let mut enc = 0;
    let mut cin = 3;
    for &w in &cfg.encoder_widths {
        enc += conv(cin, w, 3) + cfg.encoder_refine_convs * conv(w, w, 3);
        cin = w;
    }
    let head = conv(c + extra, cfg.head_width, 3) + conv(cfg.head_width, 2, 1);
    let mut disc = 0;
    let mut cin = c;
    for &w in cfg.disc_channels.iter().chain(std::iter::once(&1)) {
        disc += conv(cin, w, 4);
        cin = w;
    }
    let copies = if cfg.symmetric { 2 } else { 1 };
    let mut total = copies * (enc + head);
    if cfg.ddsm {
        let r = cfg.gate_channels();
        total += lin(c, r) + 2 * lin(r, c);
    }
    if cfg.dusm {
        total += conv(c, c, 1) + 2 * conv(c, extra, 1);
    }
    if cfg.feature_align {
        total += 2 * disc;
    }
    total
}
