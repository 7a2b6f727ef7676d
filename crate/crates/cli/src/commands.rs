use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use styleinv_core::checkpoint::{write_atomic, Checkpoint};
use styleinv_core::corpus::{gen_corpus, Corpus, CorpusSample};
use styleinv_core::editing::{self, MORPH_LAMBDAS};
use styleinv_core::embed::EmbedNet;
use styleinv_core::experiments::{self, AblationRow, BUDGETS};
use styleinv_core::iterator::{init_latent, optimize_latent, InitContext, InitScheme};
use styleinv_core::metrics::{MetricReport, METRIC_HEADER};
use styleinv_core::rng::{self, purpose};
use styleinv_core::trainer::{self, LossReport, SupervisionCache, TrainObserver, TrainState};
use styleinv_core::{Generator, GeneratorConfig, Image, PerceptualNet};

use crate::config::{ConfigError, RunConfig};

pub const VERSION: &str = concat!("styleinv ", env!("CARGO_PKG_VERSION"));

const GENERATOR_FILE: &str = "generator.ckpt";
const PHI_FILE: &str = "phi.ckpt";
const LATEST: &str = "latest.ckpt";

pub struct Ctx {
    pub workdir: PathBuf,
    pub cfg: RunConfig,
}

fn missing(path: &Path, hint: &str) -> anyhow::Error {
    anyhow::anyhow!("missing {}; {hint}", path.display())
}

impl Ctx {
    fn path(&self, key: &str) -> PathBuf {
        self.workdir.join(self.cfg.text(key))
    }

    fn required_path(&self, key: &str) -> Result<PathBuf> {
        if self.cfg.text(key).is_empty() {
            return Err(ConfigError(format!("{key}= must name an input file")).into());
        }
        Ok(self.path(key))
    }

    /// Creates the output directory and writes the resolved config and
    /// version into it.
    fn output_dir(&self, dir: PathBuf) -> Result<PathBuf> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("config.txt"), self.cfg.render())?;
        std::fs::write(dir.join("VERSION"), format!("{VERSION}\n"))?;
        Ok(dir)
    }

    fn command_dir(&self, command: &str) -> Result<PathBuf> {
        let name = match self.cfg.text("out_dir") {
            "" => command,
            d => d,
        };
        self.output_dir(self.workdir.join(name))
    }

    fn frozen(&self) -> Result<(Generator, PerceptualNet)> {
        let dir = self.path("corpus_dir");
        let load = |name: &str| -> Result<Checkpoint> {
            let p = dir.join(name);
            if !p.exists() {
                return Err(missing(&p, "run gen-corpus first"));
            }
            Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))
        };
        let g = Generator::from_checkpoint(&load(GENERATOR_FILE)?)?;
        let phi = PerceptualNet::from_checkpoint(&load(PHI_FILE)?)?;
        Ok((g, phi))
    }

    fn corpus(&self) -> Result<Corpus> {
        let dir = self.path("corpus_dir");
        if !dir.join("manifest.csv").exists() {
            return Err(missing(&dir.join("manifest.csv"), "run gen-corpus first"));
        }
        Corpus::read_dir(&dir).with_context(|| format!("reading corpus {}", dir.display()))
    }

    fn model_at(&self, path: &Path, g: &Generator) -> Result<TrainState> {
        if !path.exists() {
            return Err(missing(path, "run train first or point checkpoint= at a trained model"));
        }
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        Ok(TrainState::from_checkpoint(&ck, g)?)
    }

    fn model(&self, g: &Generator) -> Result<TrainState> {
        self.model_at(&self.path("checkpoint"), g)
    }

    fn heldout<'a>(&self, corpus: &'a Corpus, key: &str) -> Result<&'a [CorpusSample]> {
        let n = match self.cfg.usize(key) {
            0 => corpus.test.len(),
            n => n,
        };
        if n > corpus.test.len() {
            return Err(ConfigError(format!("{key}={n} exceeds the {} held-out samples", corpus.test.len())).into());
        }
        if n == 0 {
            bail!("the corpus has no held-out samples");
        }
        Ok(&corpus.test[..n])
    }
}

fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, |w| image.write_ppm(w))?;
    Ok(())
}

fn load_image(path: &Path, g: &Generator) -> Result<Image> {
    if !path.exists() {
        return Err(missing(path, "no such input image"));
    }
    let x = Image::load_ppm(path).with_context(|| format!("reading {}", path.display()))?;
    let want = g.image_shape();
    if [x.channels(), x.height(), x.width()] != want {
        bail!(
            "{} is {}x{}x{}, the generator produces {}x{}x{}",
            path.display(),
            x.channels(),
            x.height(),
            x.width(),
            want[0],
            want[1],
            want[2]
        );
    }
    Ok(x)
}

pub fn gen_corpus_cmd(ctx: &Ctx) -> Result<()> {
    let dir = ctx.output_dir(ctx.path("corpus_dir"))?;
    let g = Generator::build(ctx.cfg.uint("generator_seed"), GeneratorConfig::default())?;
    let phi = PerceptualNet::build(ctx.cfg.uint("phi_seed"), g.image_shape()[0]);
    let n = ctx.cfg.usize("corpus_size");
    if n == 0 {
        return Err(ConfigError("corpus_size must be >= 1".into()).into());
    }
    let corpus = gen_corpus(&g, n, ctx.cfg.uint("corpus_seed"))?;
    corpus.write_dir(&dir)?;
    let mut ck = Checkpoint::new();
    g.to_checkpoint(&mut ck);
    ck.save(dir.join(GENERATOR_FILE))?;
    let mut ck = Checkpoint::new();
    phi.to_checkpoint(&mut ck);
    ck.save(dir.join(PHI_FILE))?;
    let hash = corpus.manifest_hash();
    std::fs::write(dir.join("manifest.sha256"), format!("{hash}\n"))?;
    println!("corpus: {} samples ({} train / {} test), hash {hash}", n, corpus.train.len(), corpus.test.len());
    Ok(())
}

struct EpochWriter<'a> {
    dir: &'a Path,
}

impl EpochWriter<'_> {
    fn cache_path(&self, epochs_done: usize) -> PathBuf {
        self.dir.join(format!("cache_{epochs_done:03}.cache"))
    }

    fn write_reports(&self, report: &LossReport) -> std::io::Result<()> {
        std::fs::write(self.dir.join("batches.csv"), report.batch_csv())?;
        std::fs::write(self.dir.join("epochs.csv"), report.epoch_csv())
    }
}

impl TrainObserver for EpochWriter<'_> {
    fn on_epoch_end(&mut self, state: &TrainState) -> styleinv_core::Result<()> {
        let n = state.epochs_done;
        // The cache and reports go first; `latest.ckpt` is what resume trusts.
        state.cache.save(self.cache_path(n))?;
        self.write_reports(&state.report)?;
        let ck = state.to_checkpoint();
        ck.save(self.dir.join(format!("epoch_{n:03}.ckpt")))?;
        ck.save(self.dir.join(LATEST))?;
        match state.report.epochs.last() {
            Some(row) => info!(
                "epoch {} done: l_w {:.5} l_mse {:.5} l_per {:.5}{}",
                row.epoch,
                row.terms.l_w,
                row.terms.l_mse,
                row.terms.l_per,
                row.heldout
                    .map(|h| format!(" | held-out mse {:.5} phi {:.5} psnr {:.2}", h.mse, h.phi, h.psnr))
                    .unwrap_or_default()
            ),
            None => info!("epoch {n} done"),
        }
        Ok(())
    }
}

pub fn train_cmd(ctx: &Ctx) -> Result<()> {
    let config = ctx.cfg.train_config()?;
    let single = ctx.cfg.flag("single_encoder");
    let (g, phi) = ctx.frozen()?;
    let corpus = ctx.corpus()?;
    let dir = ctx.output_dir(ctx.path("train_dir"))?;
    let writer = EpochWriter { dir: &dir };

    let latest = dir.join(LATEST);
    let mut state = if ctx.cfg.flag("resume") && latest.exists() {
        let mut state = ctx.model_at(&latest, &g)?;
        if state.net.config().single_encoder != single {
            return Err(ConfigError(format!(
                "{} was trained with single_encoder={}, config says {single}",
                latest.display(),
                state.net.config().single_encoder
            ))
            .into());
        }
        let n = state.epochs_done;
        let cache_path = writer.cache_path(n);
        if !cache_path.exists() {
            return Err(missing(&cache_path, "cannot resume without the cache saved with the checkpoint"));
        }
        state.cache = SupervisionCache::load(&cache_path)?;
        let images: std::collections::HashMap<u64, &Image> =
            corpus.train.iter().map(|s| (s.sample_id, &s.image)).collect();
        state
            .cache
            .verify(&g, &phi, config.iterator.alpha, |id| images.get(&id).copied())
            .with_context(|| format!("verifying {}", cache_path.display()))?;
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).unwrap_or_default();
        let mut report = LossReport::from_csv(&read("batches.csv"), &read("epochs.csv"), corpus.test.len())?;
        report.truncate_to(n);
        state.report = report;
        info!("resuming from {} after {n} epochs", latest.display());
        state
    } else {
        TrainState::new(EmbedNet::for_generator(ctx.cfg.uint("embed_seed"), &g, single)?)
    };

    let mut writer = writer;
    trainer::train(&corpus.train, &corpus.test, &g, &phi, &mut state, &config, &mut writer)?;

    state.to_checkpoint().save(dir.join("model.ckpt"))?;
    state.cache.save(dir.join("final.cache"))?;
    writer.write_reports(&state.report)?;
    println!(
        "trained {} epochs ({} encoder updates, mode {}), cache {} entries -> {}",
        state.epochs_done,
        state.updates,
        config.mode,
        state.cache.len(),
        dir.join("model.ckpt").display()
    );
    Ok(())
}

pub fn invert_cmd(ctx: &Ctx) -> Result<()> {
    let image_path = ctx.required_path("image")?;
    let scheme = ctx.cfg.init_scheme();
    let iter = ctx.cfg.iter_config(ctx.cfg.usize("invert_steps"));
    iter.validate()?;
    let (g, phi) = ctx.frozen()?;
    let x = load_image(&image_path, &g)?;
    let state = match scheme {
        InitScheme::Encoder => Some(ctx.model(&g)?),
        _ => None,
    };
    let init = InitContext::new(&g, state.as_ref().map(|s| &s.net))?;
    let mut r = rng::stream(ctx.cfg.uint("seed"), purpose::RANDOM_INIT);
    let w0 = init_latent(scheme, &x, &init, &mut r)?;
    let dir = ctx.command_dir("invert")?;

    let (latent, trace, aborted) = match optimize_latent(&g, &phi, &x, &w0, &iter, None)? {
        Ok(inv) => (inv.latent, inv.trace, None),
        Err(a) => (a.best.clone(), a.trace.clone(), Some(a)),
    };
    latent.save(dir.join("latent.ten"))?;
    let rec = g.synthesize(&latent)?;
    write_ppm(&dir.join("reconstruction.ppm"), &rec)?;
    std::fs::write(dir.join("trace.csv"), trace.to_csv())?;
    let report = MetricReport::evaluate(&rec, &x, &phi)?;
    std::fs::write(dir.join("metrics.csv"), format!("{METRIC_HEADER}\n{}\n", report.csv_row()))?;
    if let Some(a) = aborted {
        return Err(anyhow::Error::from(styleinv_core::Error::from(a)).context("inversion aborted; best latent saved"));
    }
    println!(
        "inverted {} with {scheme} init, {} steps: psnr {:.2} dB, ssim {:.4}, phi {:.5} -> {}",
        image_path.display(),
        iter.steps,
        report.psnr_db,
        report.ssim,
        report.phi_dist,
        dir.display()
    );
    Ok(())
}

pub fn bench_cmd(ctx: &Ctx) -> Result<()> {
    let (g, phi) = ctx.frozen()?;
    let corpus = ctx.corpus()?;
    let full = ctx.model(&g)?;
    let samples = ctx.heldout(&corpus, "bench_samples")?;
    let long_steps = ctx.cfg.usize("bench_long_steps");
    let trials = ctx.cfg.usize("bench_trials");
    let seed = ctx.cfg.uint("seed");
    let iter = ctx.cfg.iter_config(*BUDGETS.last().expect("budgets"));
    iter.validate()?;
    if long_steps == 0 || trials == 0 {
        return Err(ConfigError("bench_long_steps and bench_trials must be >= 1".into()).into());
    }
    // Ablation inputs are checked before any long computation starts.
    let ablations: Vec<(&str, PathBuf)> = ["no_iterator", "single_encoder", "offline"]
        .into_iter()
        .filter_map(|name| {
            let key = format!("{name}_checkpoint");
            match ctx.cfg.text(&key) {
                "" => {
                    warn!("{key} is empty; the {name} row is omitted");
                    None
                }
                p => Some((name, ctx.workdir.join(p))),
            }
        })
        .collect();
    let models: Vec<(&str, TrainState)> = ablations
        .iter()
        .map(|(name, p)| Ok((*name, ctx.model_at(p, &g)?)))
        .collect::<Result<_>>()?;
    let dir = ctx.command_dir("bench")?;
    let mut summary = String::new();

    info!("(a) init schemes over budgets {BUDGETS:?} on {} images", samples.len());
    let budget = experiments::budget_table(&g, &phi, &full.net, samples, &BUDGETS, &iter, seed)?;
    std::fs::write(dir.join("a_init_budget.csv"), experiments::budget_csv(&budget))?;
    summary.push_str(&format!(
        "init_ordering_holds={}\n",
        experiments::encoder_init_dominates(&budget)
    ));

    info!("(b) encoder vs mean init at {long_steps} steps");
    let long_iter = ctx.cfg.iter_config(long_steps);
    let long = experiments::long_run_table(&g, &phi, &full.net, samples, &long_iter, seed)?;
    std::fs::write(dir.join("b_long_run.csv"), experiments::long_run_csv(&long))?;
    if let [enc, mean] = &long[..] {
        summary.push_str(&format!("long_run_encoder_better={}\n", enc.mean_loss < mean.mean_loss));
    }

    info!("(c) ablation metrics on {} held-out images", corpus.test.len());
    let row = |name: &str, st: &TrainState| -> Result<AblationRow> {
        let g_eval = st.generator.as_ref().map_or(&g, |(tg, _)| tg);
        Ok(AblationRow {
            model: name.to_string(),
            updates: st.updates,
            metrics: trainer::evaluate_reconstruction(&st.net, g_eval, &phi, &corpus.test)?,
        })
    };
    let mut rows = vec![row("full", &full)?];
    for (name, st) in models.iter().filter(|(n, _)| *n != "offline") {
        rows.push(row(name, st)?);
    }
    std::fs::write(dir.join("c_ablation.csv"), experiments::ablation_csv(&rows))?;
    for r in &rows[1..] {
        if r.updates != full.updates {
            warn!("{} has {} encoder updates, full has {}", r.model, r.updates, full.updates);
        }
        summary.push_str(&format!(
            "full_beats_{}_mse={}\nfull_beats_{}_phi={}\n",
            r.model,
            rows[0].metrics.mse < r.metrics.mse,
            r.model,
            rows[0].metrics.phi < r.metrics.phi
        ));
    }

    info!("(d) timing, {trials} trials");
    let timing = parallel_free(|| {
        experiments::timing_table(&g, &phi, &full.net, &samples[0], &[*BUDGETS.last().unwrap(), long_steps], &iter, trials)
    })?;
    std::fs::write(dir.join("d_timing.csv"), experiments::timing_csv(&timing))?;
    if let Some(ratio) = experiments::speed_ratio(&timing, *BUDGETS.last().unwrap()) {
        summary.push_str(&format!("speed_ratio_100={ratio:.1}\n"));
    }

    if let Some((_, offline)) = models.iter().find(|(n, _)| *n == "offline") {
        info!("(e) offline pipeline");
        let rows = vec![row("online", &full)?, row("offline", offline)?];
        let mut refined = String::from("model,steps,mean_loss,mean_mse,mean_psnr\n");
        for (name, st) in [("online", &full), ("offline", offline)] {
            let ctx_init = InitContext::new(&g, Some(&st.net))?;
            let s = experiments::scheme_summary(&g, &phi, &ctx_init, samples, InitScheme::Encoder, &iter, seed)?;
            refined.push_str(&format!("{name},{},{:.9e},{:.9e},{:.4}\n", s.steps, s.mean_loss, s.mean_mse, s.mean_psnr));
        }
        std::fs::write(dir.join("e_offline.csv"), experiments::ablation_csv(&rows))?;
        std::fs::write(dir.join("e_offline_refined.csv"), refined)?;
    }

    info!("montage");
    let montage = bench_montage(&g, &phi, &full.net, &samples[..samples.len().min(8)], &iter, seed)?;
    write_ppm(&dir.join("montage.ppm"), &montage)?;
    std::fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("bench tables -> {}", dir.display());
    Ok(())
}

/// Runs `f` on one worker so timings are not skewed by other samples.
fn parallel_free<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    styleinv_core::parallel::with_threads(1, f)
}

/// One row per sample: target, feed-forward embedding, encoder init refined,
/// mean init refined.
fn bench_montage(
    g: &Generator,
    phi: &PerceptualNet,
    net: &EmbedNet,
    samples: &[CorpusSample],
    iter: &styleinv_core::iterator::IterConfig,
    seed: u64,
) -> Result<Image> {
    let init = InitContext::new(g, Some(net))?;
    let rows = styleinv_core::parallel::try_map(samples, |_, s| -> Result<Image> {
        let mut panels = vec![s.image.clone()];
        let w_e = net.embed(&s.image)?;
        panels.push(g.synthesize(&w_e)?);
        for scheme in [InitScheme::Encoder, InitScheme::Mean] {
            let mut r = rng::stream(seed, purpose::RANDOM_INIT + s.sample_id);
            let w0 = init_latent(scheme, &s.image, &init, &mut r)?;
            let w = match optimize_latent(g, phi, &s.image, &w0, iter, None)? {
                Ok(inv) => inv.latent,
                Err(a) => a.best,
            };
            panels.push(g.synthesize(&w)?);
        }
        Ok(Image::hconcat(&panels)?)
    })?;
    Ok(Image::vconcat(&rows)?)
}

pub fn edit_cmd(ctx: &Ctx) -> Result<()> {
    let op = ctx.cfg.text("edit_op").to_string();
    let a_path = ctx.required_path("edit_a")?;
    let b_path = ctx.required_path("edit_b")?;
    let k = ctx.cfg.usize("mix_layers");
    let (g, _) = ctx.frozen()?;
    if k > g.num_layers() {
        return Err(ConfigError(format!("mix_layers={k} exceeds {} layers", g.num_layers())).into());
    }
    let state = ctx.model(&g)?;
    let net = &state.net;
    let (a, b) = (load_image(&a_path, &g)?, load_image(&b_path, &g)?);
    let dir = ctx.command_dir("edit")?;
    match op.as_str() {
        "morph" => {
            let (w1, w2) = (net.embed(&a)?, net.embed(&b)?);
            let strip = editing::morph_strip(&g, &w1, &w2, &MORPH_LAMBDAS)?;
            for (i, panel) in strip.iter().enumerate() {
                write_ppm(&dir.join(format!("morph_{i}.ppm")), panel)?;
            }
            write_ppm(&dir.join("morph_strip.ppm"), &Image::hconcat(&strip)?)?;
            write_ppm(&dir.join("recon_a.ppm"), &g.synthesize(&w1)?)?;
            write_ppm(&dir.join("recon_b.ppm"), &g.synthesize(&w2)?)?;
        }
        "mix" => {
            let codes = [net.embed(&a)?, net.embed(&b)?];
            let grid = editing::mix_grid(&g, &codes, &codes, k)?;
            let rows: Vec<Image> = grid.iter().map(|r| Image::hconcat(r)).collect::<Result<_, _>>()?;
            write_ppm(&dir.join("mix_grid.ppm"), &Image::vconcat(&rows)?)?;
        }
        "colorize" => {
            let gray = editing::grayscale(&a)?;
            let out = editing::colorize(&gray, &b, net, &g, k)?;
            write_ppm(&dir.join("gray.ppm"), &gray)?;
            write_ppm(&dir.join("colorized.ppm"), &out)?;
            write_ppm(&dir.join("colorize_pair.ppm"), &Image::hconcat(&[gray, b, out])?)?;
        }
        other => unreachable!("edit_op {other} passed the schema"),
    }
    println!("{op} -> {}", dir.display());
    Ok(())
}

pub fn eval_cmd(ctx: &Ctx) -> Result<()> {
    let (g, phi) = ctx.frozen()?;
    let corpus = ctx.corpus()?;
    let state = ctx.model(&g)?;
    let g_eval = state.generator.as_ref().map_or(&g, |(tg, _)| tg);
    let samples = ctx.heldout(&corpus, "eval_samples")?;
    let dir = ctx.command_dir("eval")?;
    let reports = styleinv_core::parallel::try_map(samples, |_, s| -> Result<MetricReport> {
        let rec = g_eval.synthesize(&state.net.embed(&s.image)?)?;
        Ok(MetricReport::evaluate(&rec, &s.image, &phi)?)
    })?;
    let mut csv = format!("sample_id,{METRIC_HEADER}\n");
    for (s, r) in samples.iter().zip(&reports) {
        csv.push_str(&format!("{},{}\n", s.sample_id, r.csv_row()));
    }
    std::fs::write(dir.join("eval.csv"), csv)?;
    let m = trainer::evaluate_reconstruction(&state.net, g_eval, &phi, samples)?;
    let summary = format!(
        "samples,mse,phi,psnr,ssim\n{},{:.9e},{:.9e},{:.4},{:.6}\n",
        m.samples, m.mse, m.phi, m.psnr, m.ssim
    );
    std::fs::write(dir.join("summary.csv"), &summary)?;
    println!(
        "{} held-out samples: mse {:.5} phi {:.5} psnr {:.2} dB ssim {:.4} -> {}",
        m.samples,
        m.mse,
        m.phi,
        m.psnr,
        m.ssim,
        dir.display()
    );
    Ok(())
}
