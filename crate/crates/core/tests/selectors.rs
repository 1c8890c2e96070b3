//! Selector paths end to end: gradient audit and the disabled-selector
//! passthrough.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ds2net::gradsuite::run_suite;
use ds2net::nets::{argmax_mask, Head};
use ds2net::selectors::select;
use ds2net::Tensor;

#[test]
fn every_family_passes_gradient_check_over_twenty_draws() {
    let results = run_suite(20, 1e-5).unwrap();
    assert!(results.iter().any(|r| r.name == "ddsm+dusm+head"));
    for r in &results {
        assert_eq!(r.draws, 20);
        assert!(r.passed(1e-4), "{} rel err {:e}", r.name, r.max_rel_err);
    }
}

/// Head on `cat(F, 0)` with zeroed weights on the padding channels equals a
/// head that never saw them: conv over F with the first C input channels.
#[test]
fn disabled_selectors_pass_features_through_to_the_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (c, extra) = (4, 2);
    let f: Vec<f32> = (0..2 * c * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = Tensor::from_vec(&[2, c, 5, 5], f).unwrap();

    let mut head = Head::<f32>::new(3, "head", c + extra, 6, 4).unwrap();
    let w = head.hidden.weight.to_vec();
    let (cout, cin, k) = (6, c + extra, 3);
    let mut zeroed = w.clone();
    let mut narrow = Vec::with_capacity(cout * c * k * k);
    for o in 0..cout {
        for i in 0..cin {
            let at = (o * cin + i) * k * k;
            if i < c {
                narrow.extend_from_slice(&w[at..at + k * k]);
            } else {
                zeroed[at..at + k * k].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    head.hidden.weight = Tensor::param(&[cout, cin, k, k], zeroed).unwrap();

    let (s, t) = select(&f, &f, None, None, extra).unwrap();
    assert_eq!(s.dds.data(), f.data());
    assert!(s.dus.data().iter().all(|&v| v == 0.0));
    let via_selectors = head.forward(&s.ds2).unwrap();
    assert_eq!(via_selectors.data(), head.forward(&t.ds2).unwrap().data());

    let narrow = Tensor::from_vec(&[cout, c, k, k], narrow).unwrap();
    let hidden = f.conv2d(&narrow, Some(&head.hidden.bias), 1, 1).unwrap().relu();
    let plain = hidden
        .conv2d(&head.classifier.weight, Some(&head.classifier.bias), 1, 0)
        .unwrap()
        .upsample_bilinear(4)
        .unwrap();
    assert_eq!(plain.shape(), via_selectors.shape());
    for (a, b) in plain.data().iter().zip(via_selectors.data()) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
    }
    assert_eq!(argmax_mask(&plain), argmax_mask(&via_selectors));
}
