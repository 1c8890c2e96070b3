//! The two synthetic domains differ in appearance only: a tiny classifier
//! separates them, while their masks are identical.

use ds2net::losses::bce_with_logits;
use ds2net::nets::Linear;
use ds2net::synthdata::{gen_sample, generate_split, Domain, GenSpec, SamplePair, Split};
use ds2net::Tensor;

/// Per-channel mean and standard deviation: six colour statistics.
fn stats(p: &SamplePair) -> Vec<f32> {
    let plane = p.height * p.width;
    let mut out = Vec::with_capacity(6);
    for c in 0..3 {
        let ch = &p.image[c * plane..(c + 1) * plane];
        let mean = ch.iter().sum::<f32>() / plane as f32;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / plane as f32;
        out.extend([mean, var.sqrt()]);
    }
    out
}

fn features(samples: &[SamplePair]) -> Tensor<f32> {
    let rows: Vec<f32> = samples.iter().flat_map(stats).collect();
    Tensor::from_vec(&[samples.len(), 6], rows).unwrap()
}

/// Logistic regression on colour statistics, trained by full-batch
/// gradient descent through the autodiff engine.
#[test]
fn small_domain_classifier_separates_the_domains() {
    let spec = GenSpec::default();
    let train_a = features(&generate_split(&spec, 11, Domain::A, Split::Train, 100).unwrap());
    let train_b = features(&generate_split(&spec, 11, Domain::B, Split::Train, 100).unwrap());
    let mut clf = Linear::<f32>::new(0, "domain", 6, 1).unwrap();
    for _ in 0..200 {
        let w = clf.weight.requires_grad_leaf();
        let b = clf.bias.requires_grad_leaf();
        let model = Linear { weight: w.clone(), bias: b.clone() };
        let loss = bce_with_logits(&model.forward(&train_a).unwrap(), false)
            .add(&bce_with_logits(&model.forward(&train_b).unwrap(), true))
            .unwrap();
        loss.backward().unwrap();
        let step = |t: &Tensor<f32>| {
            let g = t.grad().unwrap();
            let v = t.data().iter().zip(&g).map(|(x, g)| x - 0.5 * g).collect();
            Tensor::param(t.shape(), v).unwrap()
        };
        clf = Linear { weight: step(&w), bias: step(&b) };
    }

    let test_a = features(&generate_split(&spec, 11, Domain::A, Split::Test, 100).unwrap());
    let test_b = features(&generate_split(&spec, 11, Domain::B, Split::Test, 100).unwrap());
    let correct_a = clf.forward(&test_a).unwrap().data().iter().filter(|&&z| z < 0.0).count();
    let correct_b = clf.forward(&test_b).unwrap().data().iter().filter(|&&z| z > 0.0).count();
    let accuracy = (correct_a + correct_b) as f64 / 200.0;
    assert!(accuracy >= 0.95, "accuracy {accuracy}");
}

#[test]
fn masks_do_not_depend_on_the_domain() {
    let spec = GenSpec::default();
    for seed in 0..20 {
        let a = gen_sample(&spec, Domain::A, seed).unwrap();
        let b = gen_sample(&spec, Domain::B, seed).unwrap();
        assert_eq!(a.mask, b.mask, "seed {seed}");
        assert_ne!(a.image, b.image, "seed {seed}");
    }
}
