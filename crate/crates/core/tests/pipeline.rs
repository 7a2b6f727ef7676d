//! End-to-end on a tiny generator: corpus on disk, training with a
//! checkpoint and cache restart, then inversion from the trained encoder.

use styleinv_core::checkpoint::Checkpoint;
use styleinv_core::corpus::{gen_corpus, Corpus};
use styleinv_core::embed::EmbedNet;
use styleinv_core::iterator::{init_latent, optimize_latent, InitContext, InitScheme, IterConfig};
use styleinv_core::trainer::{self, NoObserver, SupervisionCache, TrainConfig, TrainState};
use styleinv_core::{rng, Generator, GeneratorConfig, PerceptualNet};

fn tiny() -> (Generator, PerceptualNet) {
    let cfg = GeneratorConfig { latent_dim: 8, resolutions: vec![4, 8], widths: vec![8, 8], ..GeneratorConfig::default() };
    (Generator::build(11, cfg).unwrap(), PerceptualNet::build(12, 3))
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 3, iterator: IterConfig { steps: 4, ..IterConfig::default() }, ..TrainConfig::default() }
}

#[test]
fn corpus_survives_disk() {
    let (g, _) = tiny();
    let corpus = gen_corpus(&g, 7, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write_dir(dir.path()).unwrap();
    let back = Corpus::read_dir(dir.path()).unwrap();
    assert_eq!(back.manifest_csv(), corpus.manifest_csv());
    assert_eq!(back.train.len(), 6);
    for (a, b) in back.train.iter().chain(&back.test).zip(corpus.train.iter().chain(&corpus.test)) {
        assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 127.5);
        assert_eq!(a.oracle_latent, b.oracle_latent);
    }
    // Quantized images are a fixed point of the disk round trip.
    let again = tempfile::tempdir().unwrap();
    back.write_dir(again.path()).unwrap();
    assert_eq!(Corpus::read_dir(again.path()).unwrap().manifest_hash(), back.manifest_hash());
}

#[test]
fn restart_from_checkpoint_matches_straight_run() {
    let (g, phi) = tiny();
    let corpus = gen_corpus(&g, 8, 5).unwrap();
    let net = || EmbedNet::for_generator(13, &g, false).unwrap();

    let mut whole = TrainState::new(net());
    trainer::train(&corpus.train, &[], &g, &phi, &mut whole, &config(2), &mut NoObserver).unwrap();

    let mut first = TrainState::new(net());
    trainer::train(&corpus.train, &[], &g, &phi, &mut first, &config(1), &mut NoObserver).unwrap();
    let ck = Checkpoint::read(&first.to_checkpoint().to_bytes()[..]).unwrap();
    let mut cache_bytes = Vec::new();
    first.cache.write(&mut cache_bytes).unwrap();
    let mut resumed = TrainState::from_checkpoint(&ck, &g).unwrap();
    resumed.cache = SupervisionCache::read(&cache_bytes[..]).unwrap();
    trainer::train(&corpus.train, &[], &g, &phi, &mut resumed, &config(2), &mut NoObserver).unwrap();

    assert_eq!(resumed.updates, whole.updates);
    assert_eq!(resumed.to_checkpoint().to_bytes(), whole.to_checkpoint().to_bytes());
}

#[test]
fn trained_encoder_seeds_the_iterator() {
    let (g, phi) = tiny();
    let corpus = gen_corpus(&g, 8, 6).unwrap();
    let mut st = TrainState::new(EmbedNet::for_generator(14, &g, false).unwrap());
    trainer::train(&corpus.train, &[], &g, &phi, &mut st, &config(2), &mut NoObserver).unwrap();
    assert_eq!(st.cache.len(), corpus.train.len());

    let x = &corpus.test[0].image;
    let ctx = InitContext::new(&g, Some(&st.net)).unwrap();
    let w0 = init_latent(InitScheme::Encoder, x, &ctx, &mut rng::stream(0, 0)).unwrap();
    let inv = optimize_latent(&g, &phi, x, &w0, &IterConfig { steps: 20, ..IterConfig::default() }, None)
        .unwrap()
        .unwrap();
    let recs = &inv.trace.records;
    assert_eq!(recs.len(), 21);
    assert!(recs[20].total < recs[0].total, "{} -> {}", recs[0].total, recs[20].total);
}
