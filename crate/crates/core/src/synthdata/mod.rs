//! Procedural two-domain lesion dataset.
//!
//! Both domains draw lesion geometry (a union of one or two rotated ellipses)
//! from the same seeded stream; they differ only in appearance. Domain A is
//! grayscale with a darker lesion under multiplicative speckle; domain B is
//! color-tinted, smoothed and carries additive Gaussian noise.

pub mod pnm;
mod split;

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::derive_seed;

pub use split::{generate_split, load_split, make_split, read_manifest, sample_seed, ManifestEntry, Split, SplitCounts, MANIFEST};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "A" => Some(Domain::A),
            "B" => Some(Domain::B),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

/// Image, aligned mask and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// Planar `3 x H x W`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `H x W` labels in `{0, 1}`.
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
    pub seed: u64,
}

impl SamplePair {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.mask.len() as f64
    }
}

/// Rendering parameters of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    pub background: [f32; 3],
    pub lesion: [f32; 3],
    /// Std of per-pixel multiplicative noise `v * (1 + s * n)`.
    pub speckle: f64,
    /// Std of per-pixel, per-channel additive Gaussian noise.
    pub noise: f64,
    /// Box-blur radius applied before noise (0 = none).
    pub blur: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub height: usize,
    pub width: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Ellipse semi-axis range as a fraction of the shorter image side.
    pub axis_range: [f64; 2],
    pub min_foreground: f64,
    pub max_foreground: f64,
    pub max_retries: usize,
    pub domain_a: Appearance,
    pub domain_b: Appearance,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            height: 96,
            width: 96,
            min_blobs: 1,
            max_blobs: 2,
            axis_range: [0.14, 0.32],
            min_foreground: 0.10,
            max_foreground: 0.45,
            max_retries: 200,
            domain_a: Appearance {
                background: [0.55; 3],
                lesion: [0.25; 3],
                speckle: 0.3,
                noise: 0.0,
                blur: 0,
            },
            domain_b: Appearance {
                background: [0.35, 0.22, 0.55],
                lesion: [0.85, 0.55, 0.25],
                speckle: 0.0,
                noise: 0.08,
                blur: 1,
            },
        }
    }
}

impl GenSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GenSpec = serde_json::from_str(text).map_err(|e| Error::Config(format!("generator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn appearance(&self, d: Domain) -> &Appearance {
        match d {
            Domain::A => &self.domain_a,
            Domain::B => &self.domain_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty image size {}x{}", self.height, self.width));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return bad(format!("blob count range {}..={} is invalid", self.min_blobs, self.max_blobs));
        }
        let [lo, hi] = self.axis_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("axis range {:?} must satisfy 0 < lo <= hi <= 1", self.axis_range));
        }
        if !(0.0 <= self.min_foreground && self.min_foreground <= self.max_foreground && self.max_foreground <= 1.0) {
            return bad(format!(
                "foreground bounds [{}, {}] are invalid",
                self.min_foreground, self.max_foreground
            ));
        }
        for (name, a) in [("domain_a", &self.domain_a), ("domain_b", &self.domain_b)] {
            let levels = a.background.iter().chain(&a.lesion);
            if levels.clone().any(|v| !(0.0..=1.0).contains(v)) || a.speckle < 0.0 || a.noise < 0.0 {
                return bad(format!("{name}: levels must lie in [0,1] and noise must be non-negative"));
            }
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Rasterizes a random ellipse union, resampling until the foreground
/// fraction lies within the spec's bounds.
fn gen_mask(spec: &GenSpec, seed: u64) -> Result<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "geometry"));
    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;
    for _ in 0..spec.max_retries {
        let blobs = rng.gen_range(spec.min_blobs..=spec.max_blobs);
        let ellipses: Vec<Ellipse> = (0..blobs)
            .map(|_| Ellipse {
                cy: rng.gen_range(0.25..0.75) * h as f64,
                cx: rng.gen_range(0.25..0.75) * w as f64,
                a: rng.gen_range(spec.axis_range[0]..=spec.axis_range[1]) * side,
                b: rng.gen_range(spec.axis_range[0]..=spec.axis_range[1]) * side,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let mask: Vec<u8> = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
                u8::from(ellipses.iter().any(|e| e.contains(y, x)))
            })
            .collect();
        let frac = mask.iter().filter(|&&m| m == 1).count() as f64 / (h * w) as f64;
        if (spec.min_foreground..=spec.max_foreground).contains(&frac) {
            return Ok(mask);
        }
    }
    Err(Error::Config(format!(
        "no mask with foreground in [{}, {}] after {} attempts (seed {seed})",
        spec.min_foreground, spec.max_foreground, spec.max_retries
    )))
}

fn box_blur(plane: &mut [f32], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let src = plane.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut acc = 0.0;
            for yy in y0..=y1 {
                acc += src[yy * w + x0..=yy * w + x1].iter().sum::<f32>();
            }
            plane[y * w + x] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
        }
    }
}

/// Deterministic sample for `(spec, domain, seed)`; both domains share the
/// mask for a given seed.
pub fn gen_sample(spec: &GenSpec, domain: Domain, seed: u64) -> Result<SamplePair> {
    spec.validate()?;
    let mask = gen_mask(spec, seed)?;
    let look = spec.appearance(domain);
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("appearance-{domain}")));
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");

    // One speckle field shared by all channels keeps grayscale gray.
    let speckle: Vec<f64> = (0..plane).map(|_| 1.0 + look.speckle * normal.sample(&mut rng)).collect();
    let mut image = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        let ch = &mut image[c * plane..(c + 1) * plane];
        for (p, v) in ch.iter_mut().enumerate() {
            let base = if mask[p] == 1 { look.lesion[c] } else { look.background[c] };
            *v = (f64::from(base) * speckle[p]) as f32;
        }
        box_blur(ch, h, w, look.blur);
    }
    if look.noise > 0.0 {
        for v in image.iter_mut() {
            *v += (look.noise * normal.sample(&mut rng)) as f32;
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SamplePair {
        image,
        mask,
        height: h,
        width: w,
        domain,
        seed,
    })
}

/// Geometric augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    /// Offset of the output window within the resized image (crop when
    /// positive, pad when negative).
    pub offset_y: isize,
    pub offset_x: isize,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        scale: 1.0,
        offset_y: 0,
        offset_x: 0,
    };

    /// Random flip (p = 0.5), scale in `[0.75, 1.25]`, uniform window offset.
    pub fn sample(h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "augment"));
        let flip = rng.gen_bool(0.5);
        let scale = rng.gen_range(0.75..=1.25);
        let offset = |rng: &mut ChaCha8Rng, n: usize| {
            let diff = resized_len(n, scale) as isize - n as isize;
            if diff >= 0 {
                rng.gen_range(0..=diff)
            } else {
                -rng.gen_range(0..=-diff)
            }
        };
        let offset_y = offset(&mut rng, h);
        let offset_x = offset(&mut rng, w);
        AugmentParams {
            flip,
            scale,
            offset_y,
            offset_x,
        }
    }
}

fn resized_len(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Applies one geometric transform to image (bilinear) and mask (nearest).
pub fn augment_with(p: &SamplePair, a: AugmentParams) -> SamplePair {
    let (h, w) = (p.height, p.width);
    let (rh, rw) = (resized_len(h, a.scale), resized_len(w, a.scale));
    let (sy, sx) = (h as f64 / rh as f64, w as f64 / rw as f64);
    let plane = h * w;
    let mut image = vec![0.0f32; 3 * plane];
    let mut mask = vec![0u8; plane];
    for y in 0..h {
        let ry = y as isize + a.offset_y;
        if ry < 0 || ry >= rh as isize {
            continue;
        }
        // half-pixel centre mapping back to the source grid
        let fy = ((ry as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        let ny = (((ry as f64 + 0.5) * sy) as usize).min(h - 1);
        for x in 0..w {
            let rx = x as isize + a.offset_x;
            if rx < 0 || rx >= rw as isize {
                continue;
            }
            let fx = ((rx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let nx = (((rx as f64 + 0.5) * sx) as usize).min(w - 1);
            let src_x = |v: usize| if a.flip { w - 1 - v } else { v };
            let out = y * w + x;
            mask[out] = p.mask[ny * w + src_x(nx)];
            for c in 0..3 {
                let at = |yy: usize, xx: usize| f64::from(p.image[c * plane + yy * w + src_x(xx)]);
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                image[c * plane + out] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    SamplePair {
        image,
        mask,
        ..p.clone()
    }
}

/// Random flip + resize + crop/pad, identical for image and mask.
pub fn augment(p: &SamplePair, seed: u64) -> SamplePair {
    augment_with(p, AugmentParams::sample(p.height, p.width, seed))
}

/// Writes `<stem>.ppm` / `<stem>.pgm` under `dir` and reads them back.
pub fn write_read(p: &SamplePair, dir: &Path, stem: &str) -> Result<SamplePair> {
    let img = dir.join(format!("{stem}.ppm"));
    let msk = dir.join(format!("{stem}.pgm"));
    pnm::write_ppm(&img, &p.image, p.height, p.width)?;
    pnm::write_pgm_mask(&msk, &p.mask, p.height, p.width)?;
    read_pair(&img, p.domain, p.seed)
}

/// Reads an image and its sibling `.pgm` mask.
pub fn read_pair(image_path: &Path, domain: Domain, seed: u64) -> Result<SamplePair> {
    let (image, height, width) = pnm::read_ppm(image_path)?;
    let mask_path = image_path.with_extension("pgm");
    let (mask, mh, mw) = pnm::read_pgm_mask(&mask_path)?;
    if (mh, mw) != (height, width) {
        return Err(Error::InvalidShape(format!(
            "mask {} is {mh}x{mw} but image is {height}x{width}",
            mask_path.display()
        )));
    }
    Ok(SamplePair {
        image,
        mask,
        height,
        width,
        domain,
        seed,
    })
}
