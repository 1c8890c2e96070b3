//! Renders one sample of each synthetic domain from the same geometry seed
//! and writes them as PPM/PGM files.
//!
//! cargo run --release --example synth_domains -- [out dir] [seed]

use std::path::PathBuf;

use ds2net::synthdata::{gen_sample, write_read, Domain, GenSpec, SamplePair};

fn channel_means(p: &SamplePair) -> [f32; 3] {
    let plane = p.height * p.width;
    [0, 1, 2].map(|c| p.image[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32)
}

fn main() -> ds2net::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map_or("synth_domains", String::as_str));
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    std::fs::create_dir_all(&out).map_err(|e| ds2net::Error::io(&out, e))?;

    let spec = GenSpec::default();
    for domain in [Domain::A, Domain::B] {
        let p = gen_sample(&spec, domain, seed)?;
        let back = write_read(&p, &out, &format!("{domain}-{seed}"))?;
        let [r, g, b] = channel_means(&p);
        println!(
            "domain {domain}: {}x{} lesion {:.1}%  mean rgb ({r:.3}, {g:.3}, {b:.3})  mask survives files: {}",
            p.height,
            p.width,
            100.0 * p.foreground_fraction(),
            back.mask == p.mask
        );
    }
    println!("images written to {}", out.display());
    Ok(())
}
