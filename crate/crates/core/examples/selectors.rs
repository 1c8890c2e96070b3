//! The two feature selectors on random features: complementary channel
//! gates and the shared impact mask.
//!
//! cargo run --release --example selectors

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ds2net::selectors::{ddsm_gates, ddsm_prototype, dusm_fuse, dusm_impact_mask, select, Ddsm, Dusm};
use ds2net::Tensor;

fn main() -> ds2net::Result<()> {
    let (n, c, hw, extra) = (2, 8, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut features = || Tensor::<f64>::from_vec(&[n, c, hw, hw], (0..n * c * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (f_s, f_t) = (features()?, features()?);

    let ddsm = Ddsm::new(0, "ddsm", c, 2)?;
    let (v_s, v_t) = ddsm_gates(&ddsm_prototype(&f_s, &f_t, &ddsm)?, &ddsm)?;
    println!("gates of sample 0 (source style / target style):");
    for ch in 0..c {
        let (a, b) = (v_s.data()[ch], v_t.data()[ch]);
        println!("  channel {ch}: {a:.4} / {b:.4}  sum {:.12}", a + b);
    }

    let dusm = Dusm::new(0, "dusm", c, extra)?;
    let z = dusm_fuse(&f_s, &f_t, &dusm)?;
    let m = dusm_impact_mask(&f_s, &z)?;
    let worst = m.data().chunks(c).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    println!("impact mask {:?}: worst |row sum - 1| = {worst:.2e}", m.shape());

    let (s, t) = select(&f_s, &f_t, Some(&ddsm), Some(&dusm), extra)?;
    println!("head inputs: source style {:?}, target style {:?}", s.ds2.shape(), t.ds2.shape());
    let (off, _) = select(&f_s, &f_t, None, None, extra)?;
    println!("selectors off: distinct part equals the input: {}", off.dds.data() == f_s.data());
    Ok(())
}
