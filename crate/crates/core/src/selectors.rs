//! Channel selectors that split each image's two-style features into a
//! domain-distinct part (complementary channel gates from a fused global
//! prototype) and a domain-universal part (a channel-impact attention mask
//! shared by both styles).

use crate::error::{Error, Result};
use crate::nets::{Conv, Linear, Params};
use crate::tensor::{Element, Tensor};

/// Gate generator: `f` reduces the pooled prototype `C -> C'`, `g_s` and
/// `g_t` expand it back to per-channel scores for each style.
#[derive(Clone)]
pub struct Ddsm<T: Element> {
    pub f: Linear<T>,
    pub g_s: Linear<T>,
    pub g_t: Linear<T>,
}

impl<T: Element> Ddsm<T> {
    pub fn new(seed: u64, name: &str, channels: usize, reduced: usize) -> Result<Self> {
        if reduced == 0 {
            return Err(Error::Config("distinct-selector bottleneck must be at least 1".into()));
        }
        Ok(Ddsm {
            f: Linear::new(seed, &format!("{name}.f"), channels, reduced)?,
            g_s: Linear::new(seed, &format!("{name}.g_s"), reduced, channels)?,
            g_t: Linear::new(seed, &format!("{name}.g_t"), reduced, channels)?,
        })
    }
}

impl<T: Element> Params<T> for Ddsm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.f.visit(&format!("{prefix}.f"), f);
        self.g_s.visit(&format!("{prefix}.g_s"), f);
        self.g_t.visit(&format!("{prefix}.g_t"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.f.visit_mut(&format!("{prefix}.f"), f);
        self.g_s.visit_mut(&format!("{prefix}.g_s"), f);
        self.g_t.visit_mut(&format!("{prefix}.g_t"), f);
    }
}

/// Universal-feature extractor: `f_c` fuses the two styles (1x1, `C -> C`);
/// `f_cs` / `f_ct` project the attended features to `C''` channels.
#[derive(Clone)]
pub struct Dusm<T: Element> {
    pub f_c: Conv<T>,
    pub f_cs: Conv<T>,
    pub f_ct: Conv<T>,
}

impl<T: Element> Dusm<T> {
    pub fn new(seed: u64, name: &str, channels: usize, projected: usize) -> Result<Self> {
        if projected == 0 {
            return Err(Error::Config("universal-selector width must be at least 1".into()));
        }
        Ok(Dusm {
            f_c: Conv::new(seed, &format!("{name}.f_c"), channels, channels, 1, 1, 0)?,
            f_cs: Conv::new(seed, &format!("{name}.f_cs"), channels, projected, 1, 1, 0)?,
            f_ct: Conv::new(seed, &format!("{name}.f_ct"), channels, projected, 1, 1, 0)?,
        })
    }

    pub fn projected(&self) -> usize {
        self.f_cs.out_channels()
    }
}

impl<T: Element> Params<T> for Dusm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.f_c.visit(&format!("{prefix}.f_c"), f);
        self.f_cs.visit(&format!("{prefix}.f_cs"), f);
        self.f_ct.visit(&format!("{prefix}.f_ct"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.f_c.visit_mut(&format!("{prefix}.f_c"), f);
        self.f_cs.visit_mut(&format!("{prefix}.f_cs"), f);
        self.f_ct.visit_mut(&format!("{prefix}.f_ct"), f);
    }
}

/// Selected features for one style.
#[derive(Clone)]
pub struct SelectorOutput<T: Element> {
    /// `N x C x h x w` distinct feature (the input itself when gating is off).
    pub dds: Tensor<T>,
    /// `N x C'' x h x w` universal feature (zeros when attention is off).
    pub dus: Tensor<T>,
    /// `cat(dds, dus)` along channels, the head input.
    pub ds2: Tensor<T>,
}

fn check_pair<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.rank() != 4 || a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `z = f(mean_hw(F_s + F_t))`, shape `N x C'`.
pub fn ddsm_prototype<T: Element>(f_s: &Tensor<T>, f_t: &Tensor<T>, p: &Ddsm<T>) -> Result<Tensor<T>> {
    check_pair("ddsm_prototype", f_s, f_t)?;
    let pooled = f_s.add(f_t)?.mean(&[2, 3])?;
    p.f.forward(&pooled)
}

/// Complementary gates: a two-way softmax over `(g_s(z), g_t(z))` per channel.
pub fn ddsm_gates<T: Element>(z: &Tensor<T>, p: &Ddsm<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let a = p.g_s.forward(z)?;
    let b = p.g_t.forward(z)?;
    let (n, c) = (a.shape()[0], a.shape()[1]);
    let stacked = Tensor::concat(&[a.reshape(&[n, 1, c])?, b.reshape(&[n, 1, c])?], 1)?;
    let w = stacked.softmax(1)?;
    Ok((
        w.slice(1, 0, 1)?.reshape(&[n, c])?,
        w.slice(1, 1, 1)?.reshape(&[n, c])?,
    ))
}

fn gate<T: Element>(f: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = (f.shape()[0], f.shape()[1]);
    if v.shape() != [n, c] {
        return Err(Error::shape("ddsm_apply", f.shape(), v.shape()));
    }
    f.mul(&v.reshape(&[n, c, 1, 1])?)
}

/// Channel-wise gating of each style by its own gate vector.
pub fn ddsm_apply<T: Element>(
    f_s: &Tensor<T>,
    f_t: &Tensor<T>,
    v_s: &Tensor<T>,
    v_t: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair("ddsm_apply", f_s, f_t)?;
    Ok((gate(f_s, v_s)?, gate(f_t, v_t)?))
}

/// `Z = f_c(F_s + F_t)`, spatial size preserved.
pub fn dusm_fuse<T: Element>(f_s: &Tensor<T>, f_t: &Tensor<T>, p: &Dusm<T>) -> Result<Tensor<T>> {
    check_pair("dusm_fuse", f_s, f_t)?;
    p.f_c.forward(&f_s.add(f_t)?)
}

fn flatten<T: Element>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    f.reshape(&[s[0], s[1], s[2] * s[3]])
}

/// `M[j, i] = softmax_i(<F_i, Z_j> / sqrt(HW))` over flattened spatial rows,
/// `N x C x C`. The scale keeps the logits' spread independent of the
/// feature resolution, so the softmax does not saturate as training grows
/// the activations.
pub fn dusm_impact_mask<T: Element>(f: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("dusm_impact_mask", f, z)?;
    let s = f.shape();
    let scale = 1.0 / ((s[2] * s[3]) as f64).sqrt();
    flatten(z)?.matmul(&flatten(f)?.transpose()?)?.scale(scale).softmax(2)
}

/// Elementwise mean of the two impact masks.
pub fn dusm_universal_mask<T: Element>(m_s: &Tensor<T>, m_t: &Tensor<T>) -> Result<Tensor<T>> {
    if m_s.shape() != m_t.shape() {
        return Err(Error::shape("dusm_universal_mask", m_s.shape(), m_t.shape()));
    }
    Ok(m_s.add(m_t)?.scale(0.5))
}

/// `proj(M_u * F)`: re-mixes channels by the universal mask, then projects.
pub fn dusm_apply<T: Element>(f: &Tensor<T>, m_u: &Tensor<T>, proj: &Conv<T>) -> Result<Tensor<T>> {
    let mixed = m_u.matmul(&flatten(f)?)?.reshape(f.shape())?;
    proj.forward(&mixed)
}

/// Runs whichever selectors are enabled on the two styles of one image batch.
///
/// The head input always has `C + extra` channels: gating off passes the
/// features through, attention off contributes `extra` zero channels.
pub fn select<T: Element>(
    f_s: &Tensor<T>,
    f_t: &Tensor<T>,
    ddsm: Option<&Ddsm<T>>,
    dusm: Option<&Dusm<T>>,
    extra: usize,
) -> Result<(SelectorOutput<T>, SelectorOutput<T>)> {
    check_pair("select", f_s, f_t)?;
    let (dds_s, dds_t) = match ddsm {
        Some(p) => {
            let z = ddsm_prototype(f_s, f_t, p)?;
            let (v_s, v_t) = ddsm_gates(&z, p)?;
            ddsm_apply(f_s, f_t, &v_s, &v_t)?
        }
        None => (f_s.clone(), f_t.clone()),
    };
    let (dus_s, dus_t) = match dusm {
        Some(p) => {
            if p.projected() != extra {
                return Err(Error::Config(format!(
                    "universal selector emits {} channels, head expects {extra}",
                    p.projected()
                )));
            }
            let z = dusm_fuse(f_s, f_t, p)?;
            let m_u = dusm_universal_mask(&dusm_impact_mask(f_s, &z)?, &dusm_impact_mask(f_t, &z)?)?;
            (dusm_apply(f_s, &m_u, &p.f_cs)?, dusm_apply(f_t, &m_u, &p.f_ct)?)
        }
        None => {
            let s = f_s.shape();
            let zeros = Tensor::zeros(&[s[0], extra, s[2], s[3]]);
            (zeros.clone(), zeros)
        }
    };
    let out = |dds: Tensor<T>, dus: Tensor<T>| -> Result<SelectorOutput<T>> {
        let ds2 = Tensor::concat(&[dds.clone(), dus.clone()], 1)?;
        Ok(SelectorOutput { dds, dus, ds2 })
    };
    Ok((out(dds_s, dus_s)?, out(dds_t, dus_t)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, v).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn prototype_zero_and_constant() {
        let p = Ddsm::<f64>::new(1, "d", 4, 2).unwrap();
        let z = ddsm_prototype(&Tensor::zeros(&[1, 4, 2, 2]), &Tensor::zeros(&[1, 4, 2, 2]), &p).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        // identity reduction exposes the pooled vector directly
        let mut id = Ddsm::<f64>::new(1, "d", 2, 2).unwrap();
        id.f.weight = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::full(&[1, 2, 3, 3], 0.25);
        let b = Tensor::full(&[1, 2, 3, 3], 0.5);
        close(ddsm_prototype(&a, &b, &id).unwrap().data(), &[0.75, 0.75], 1e-15);
        assert!(ddsm_prototype(&a, &Tensor::zeros(&[1, 2, 3, 2]), &id).is_err());
    }

    #[test]
    fn prototype_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Ddsm::<f64>::new(9, "d", 4, 3).unwrap();
        let mut p = p;
        p.f.bias = rand_t(&mut rng, &[3]);
        let (a, b) = (rand_t(&mut rng, &[1, 4, 2, 2]), rand_t(&mut rng, &[1, 4, 2, 2]));
        let mut pooled = [0.0; 4];
        for (c, v) in pooled.iter_mut().enumerate() {
            for k in 0..4 {
                *v += a.data()[c * 4 + k] + b.data()[c * 4 + k];
            }
            *v /= 4.0;
        }
        let w = p.f.weight.data();
        let expect: Vec<f64> = (0..3)
            .map(|r| p.f.bias.data()[r] + (0..4).map(|c| w[r * 4 + c] * pooled[c]).sum::<f64>())
            .collect();
        close(ddsm_prototype(&a, &b, &p).unwrap().data(), &expect, 1e-6);
    }

    #[test]
    fn gate_examples() {
        let mut p = Ddsm::<f64>::new(0, "d", 1, 1).unwrap();
        p.g_s.weight = t(&[1, 1], &[0.0]);
        p.g_t.weight = t(&[1, 1], &[0.0]);
        let z = t(&[1, 1], &[2.0]);
        let (vs, vt) = ddsm_gates(&z, &p).unwrap();
        assert_eq!((vs.data()[0], vt.data()[0]), (0.5, 0.5));

        p.g_s.bias = t(&[1], &[3f64.ln()]);
        let (vs, _) = ddsm_gates(&z, &p).unwrap();
        assert!((vs.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gate_is_sigmoid_of_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Ddsm::<f64>::new(4, "d", 6, 2).unwrap();
        let z = rand_t(&mut rng, &[3, 2]);
        let (vs, _) = ddsm_gates(&z, &p).unwrap();
        let diff = p.g_s.forward(&z).unwrap().sub(&p.g_t.forward(&z).unwrap()).unwrap();
        close(vs.data(), diff.sigmoid().data(), 1e-12);
    }

    #[test]
    fn apply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = rand_t(&mut rng, &[1, 3, 2, 2]);
        let ones = Tensor::ones(&[1, 3]);
        let half = Tensor::full(&[1, 3], 0.5);
        let (a, b) = ddsm_apply(&f, &f, &ones, &half).unwrap();
        assert_eq!(a.data(), f.data());
        close(b.data(), &f.data().iter().map(|v| v * 0.5).collect::<Vec<_>>(), 1e-15);

        let vs = t(&[1, 3], &[0.2, 0.9, 0.5]);
        let vt = Tensor::ones(&[1, 3]).sub(&vs).unwrap();
        let (a, b) = ddsm_apply(&f, &f, &vs, &vt).unwrap();
        close(a.add(&b).unwrap().data(), f.data(), 1e-15);

        assert!(ddsm_apply(&f, &f, &Tensor::ones(&[1, 2]), &ones).is_err());
    }

    #[test]
    fn apply_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, plane) = (5, 6);
        let f = rand_t(&mut rng, &[1, c, 2, 3]);
        let v = rand_t(&mut rng, &[1, c]);
        let perm = [3, 0, 4, 1, 2];
        let pf: Vec<f64> = perm.iter().flat_map(|&p| f.data()[p * plane..(p + 1) * plane].to_vec()).collect();
        let pv: Vec<f64> = perm.iter().map(|&p| v.data()[p]).collect();
        let (out, _) = ddsm_apply(&f, &f, &v, &v).unwrap();
        let (pout, _) = ddsm_apply(&t(&[1, c, 2, 3], &pf), &t(&[1, c, 2, 3], &pf), &t(&[1, c], &pv), &t(&[1, c], &pv)).unwrap();
        let expect: Vec<f64> = perm.iter().flat_map(|&p| out.data()[p * plane..(p + 1) * plane].to_vec()).collect();
        assert_eq!(pout.data(), expect.as_slice());
    }

    #[test]
    fn fuse_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Dusm::<f64>::new(1, "u", 3, 2).unwrap();
        p.f_c.weight = t(&[3, 3, 1, 1], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let f = rand_t(&mut rng, &[2, 3, 2, 2]);
        let z = dusm_fuse(&f, &Tensor::zeros(&[2, 3, 2, 2]), &p).unwrap();
        assert_eq!(z.data(), f.data());

        let p = Dusm::<f64>::new(7, "u", 3, 2).unwrap();
        let mut p = p;
        p.f_c.bias = rand_t(&mut rng, &[3]);
        let g = rand_t(&mut rng, &[2, 3, 2, 2]);
        let z = dusm_fuse(&f, &g, &p).unwrap();
        assert_eq!(z.shape(), f.shape());
        let (w, b) = (p.f_c.weight.data(), p.f_c.bias.data());
        let mut expect = vec![0.0; 24];
        for n in 0..2 {
            for o in 0..3 {
                for k in 0..4 {
                    let mut acc = b[o];
                    for c in 0..3 {
                        let idx = (n * 3 + c) * 4 + k;
                        acc += w[o * 3 + c] * (f.data()[idx] + g.data()[idx]);
                    }
                    expect[(n * 3 + o) * 4 + k] = acc;
                }
            }
        }
        close(z.data(), &expect, 1e-6);
    }

    #[test]
    fn impact_mask_examples() {
        let f = t(&[1, 3, 1, 2], &[0.4, -0.2, 0.4, -0.2, 0.4, -0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_t(&mut rng, &[1, 3, 1, 2]);
        let m = dusm_impact_mask(&f, &z).unwrap();
        close(m.data(), &[1.0 / 3.0; 9], 1e-12);

        let f = t(&[1, 2, 1, 1], &[1.0, 0.0]);
        let z = t(&[1, 2, 1, 1], &[1.0, 0.3]);
        let m = dusm_impact_mask(&f, &z).unwrap();
        let e = std::f64::consts::E;
        close(&m.data()[..2], &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12);
        assert!((m.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn universal_mask_examples() {
        let a = t(&[1, 1, 2], &[0.7, 0.3]);
        let b = t(&[1, 1, 2], &[0.5, 0.5]);
        close(dusm_universal_mask(&a, &b).unwrap().data(), &[0.6, 0.4], 1e-15);
        assert_eq!(dusm_universal_mask(&a, &a).unwrap().data(), a.data());
        assert!(dusm_universal_mask(&a, &t(&[1, 2, 1], &[0.5, 0.5])).is_err());
    }

    #[test]
    fn ds2_slices_reproduce_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (f_s, f_t) = (rand_t(&mut rng, &[2, 4, 3, 3]), rand_t(&mut rng, &[2, 4, 3, 3]));
        let d = Ddsm::new(1, "d", 4, 1).unwrap();
        let u = Dusm::new(1, "u", 4, 2).unwrap();
        for (dd, uu) in [(Some(&d), Some(&u)), (Some(&d), None), (None, Some(&u)), (None, None)] {
            let (s, tt) = select(&f_s, &f_t, dd, uu, 2).unwrap();
            for o in [s, tt] {
                assert_eq!(o.ds2.shape(), &[2, 6, 3, 3]);
                assert_eq!(o.ds2.slice(1, 0, 4).unwrap().data(), o.dds.data());
                assert_eq!(o.ds2.slice(1, 4, 2).unwrap().data(), o.dus.data());
            }
        }
        let (s, _) = select(&f_s, &f_t, None, None, 2).unwrap();
        assert_eq!(s.dds.data(), f_s.data());
        assert!(s.dus.data().iter().all(|&v| v == 0.0));
        assert!(select(&f_s, &f_t, None, Some(&u), 3).is_err());
    }

    proptest! {
        #[test]
        fn gates_complementary(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Ddsm::<f64>::new(seed, "d", 8, 2).unwrap();
            let (f_s, f_t) = (rand_t(&mut rng, &[2, 8, 3, 3]).scale(scale), rand_t(&mut rng, &[2, 8, 3, 3]));
            let z = ddsm_prototype(&f_s, &f_t, &p).unwrap();
            let (vs, vt) = ddsm_gates(&z, &p).unwrap();
            for (a, b) in vs.data().iter().zip(vt.data()) {
                prop_assert!((a + b - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn masks_row_stochastic(seed in 0u64..1000, scale in 0.1f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Dusm::<f64>::new(seed, "u", 6, 3).unwrap();
            let (f_s, f_t) = (rand_t(&mut rng, &[2, 6, 3, 4]).scale(scale), rand_t(&mut rng, &[2, 6, 3, 4]));
            let z = dusm_fuse(&f_s, &f_t, &p).unwrap();
            let m_s = dusm_impact_mask(&f_s, &z).unwrap();
            let m_t = dusm_impact_mask(&f_t, &z).unwrap();
            let m_u = dusm_universal_mask(&m_s, &m_t).unwrap();
            for m in [m_s, m_t, m_u] {
                for row in m.data().chunks(6) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
