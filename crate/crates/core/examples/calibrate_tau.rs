//! Calibrates the mean-initialization convergence threshold used by the
//! acceptance suite: 2000 iterator steps from the mean latent on the first 20
//! held-out images of the default corpus.
//!
//! `cargo run --release -p styleinv-core --example calibrate_tau [-- --write]`

use std::time::Instant;

use styleinv_core::corpus::gen_corpus;
use styleinv_core::iterator::{optimize_latent, InitContext, IterConfig};
use styleinv_core::{metrics, parallel, Generator, GeneratorConfig, PerceptualNet};

const STEPS: usize = 2000;
const IMAGES: usize = 20;
/// Relative headroom over the measured value, for libm and FMA differences
/// between machines. The run itself is deterministic.
const MARGIN: f64 = 1.05;
const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tau_mean.txt");

fn main() -> styleinv_core::Result<()> {
    let g = Generator::build(1, GeneratorConfig::default())?;
    let phi = PerceptualNet::build(2, 3);
    let corpus = gen_corpus(&g, 512, 3)?;
    let samples = &corpus.test[..IMAGES];
    let mean = InitContext::new(&g, None)?.mean;
    let cfg = IterConfig { steps: STEPS, ..IterConfig::default() };
    let t = Instant::now();
    let mses = parallel::try_map(samples, |_, s| {
        let inv = optimize_latent(&g, &phi, &s.image, &mean, &cfg, None)?.map_err(styleinv_core::Error::from)?;
        metrics::mse(&g.synthesize(&inv.latent)?, &s.image)
    })?;
    for (s, m) in samples.iter().zip(&mses) {
        println!("sample {:4} mse {m:.6}", s.sample_id);
    }
    let measured = mses.iter().sum::<f64>() / mses.len() as f64;
    let tau = measured * MARGIN;
    println!("mean mse {measured:.6e}, tau {tau:.6e} ({:.0}s)", t.elapsed().as_secs_f64());
    if std::env::args().any(|a| a == "--write") {
        let text = format!(
            "# Mean-init iterator, {STEPS} steps, lr {}, first {IMAGES} held-out images of\n\
             # the default corpus (generator seed 1, phi seed 2, corpus seed 3, n = 512).\n\
             # Written by the calibrate_tau example; tau = measured x {MARGIN}.\n\
             measured_mean_mse={measured:.9e}\n\
             tau_mean={tau:.9e}\n",
            cfg.lr
        );
        std::fs::write(FIXTURE, text)?;
        println!("wrote {FIXTURE}");
    }
    Ok(())
}
