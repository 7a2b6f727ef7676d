//! Benchmark tables: initialization schemes across iteration budgets, the
//! long-run comparison, model ablations and wall-clock timings.

use std::time::Instant;

use crate::corpus::CorpusSample;
use crate::embed::EmbedNet;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::iterator::{init_latent, optimize_latent, InitContext, InitScheme, IterConfig};
use crate::metrics;
use crate::parallel;
use crate::perceptual::PerceptualNet;
use crate::rng::{self, purpose};
use crate::trainer::ReconstructionMetrics;

pub const BUDGETS: [usize; 4] = [10, 20, 50, 100];
pub const LONG_RUN_STEPS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetRow {
    pub scheme: InitScheme,
    pub budget: usize,
    /// Mean `L_opt` after `budget` updates.
    pub mean_loss: f64,
    pub mean_mse: f64,
}

/// Final-step statistics of one scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSummary {
    pub scheme: InitScheme,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_mse: f64,
    pub mean_psnr: f64,
}

struct Runs {
    /// `[sample][step] -> (total, mse)`
    traces: Vec<Vec<(f64, f64)>>,
    psnr: Vec<f64>,
}

fn run_scheme(
    g: &Generator,
    phi: &PerceptualNet,
    ctx: &InitContext<'_>,
    samples: &[CorpusSample],
    scheme: InitScheme,
    cfg: &IterConfig,
    seed: u64,
) -> Result<Runs> {
    let out = parallel::try_map(samples, |_, s| -> Result<(Vec<(f64, f64)>, f64)> {
        let mut r = rng::stream(seed, purpose::RANDOM_INIT + s.sample_id);
        let w0 = init_latent(scheme, &s.image, ctx, &mut r)?;
        let inv = optimize_latent(g, phi, &s.image, &w0, cfg, None)?.map_err(Error::from)?;
        let rec = g.synthesize(&inv.latent)?;
        let trace = inv.trace.records.iter().map(|r| (r.total, r.mse)).collect();
        Ok((trace, metrics::psnr(&rec, &s.image)?))
    })?;
    let (traces, psnr) = out.into_iter().unzip();
    Ok(Runs { traces, psnr })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn check_samples(samples: &[CorpusSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("benchmark needs at least one held-out sample".into()));
    }
    Ok(())
}

/// Table (a): mean `L_opt` per scheme at each budget. One run of
/// `max(budgets)` steps per sample serves every budget, since a shorter run
/// is a prefix of a longer one.
pub fn budget_table(
    g: &Generator,
    phi: &PerceptualNet,
    net: &EmbedNet,
    samples: &[CorpusSample],
    budgets: &[usize],
    iter: &IterConfig,
    seed: u64,
) -> Result<Vec<BudgetRow>> {
    check_samples(samples)?;
    let ctx = InitContext::new(g, Some(net))?;
    let steps = budgets.iter().copied().max().unwrap_or(0);
    let cfg = IterConfig { steps, ..*iter };
    let mut rows = Vec::new();
    for scheme in InitScheme::ALL_LEARNED {
        let runs = run_scheme(g, phi, &ctx, samples, scheme, &cfg, seed)?;
        for &b in budgets {
            rows.push(BudgetRow {
                scheme,
                budget: b,
                mean_loss: mean(runs.traces.iter().map(|t| t[b].0)),
                mean_mse: mean(runs.traces.iter().map(|t| t[b].1)),
            });
        }
    }
    Ok(rows)
}

/// Final-step statistics of `iter.steps` iterator updates from `scheme`.
pub fn scheme_summary(
    g: &Generator,
    phi: &PerceptualNet,
    ctx: &InitContext<'_>,
    samples: &[CorpusSample],
    scheme: InitScheme,
    iter: &IterConfig,
    seed: u64,
) -> Result<RunSummary> {
    check_samples(samples)?;
    let runs = run_scheme(g, phi, ctx, samples, scheme, iter, seed)?;
    Ok(RunSummary {
        scheme,
        steps: iter.steps,
        mean_loss: mean(runs.traces.iter().map(|t| t[iter.steps].0)),
        mean_mse: mean(runs.traces.iter().map(|t| t[iter.steps].1)),
        mean_psnr: mean(runs.psnr.iter().copied()),
    })
}

/// Table (b): encoder vs mean initialization after a long run.
pub fn long_run_table(
    g: &Generator,
    phi: &PerceptualNet,
    net: &EmbedNet,
    samples: &[CorpusSample],
    iter: &IterConfig,
    seed: u64,
) -> Result<Vec<RunSummary>> {
    let ctx = InitContext::new(g, Some(net))?;
    [InitScheme::Encoder, InitScheme::Mean]
        .into_iter()
        .map(|scheme| scheme_summary(g, phi, &ctx, samples, scheme, iter, seed))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: String,
    pub updates: u64,
    pub metrics: ReconstructionMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub what: String,
    pub trials: usize,
    pub median_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(trials: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    (0..trials)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

/// Table (d): median wall-clock of a feed-forward embedding and of iterator
/// runs at each of `iterator_steps`, all on the same image, sequentially.
pub fn timing_table(
    g: &Generator,
    phi: &PerceptualNet,
    net: &EmbedNet,
    sample: &CorpusSample,
    iterator_steps: &[usize],
    iter: &IterConfig,
    trials: usize,
) -> Result<Vec<TimingRow>> {
    if trials == 0 {
        return Err(Error::Config("timing needs at least one trial".into()));
    }
    let x = &sample.image;
    let mut rows = vec![TimingRow {
        what: "embed_forward".into(),
        trials,
        median_ms: median(time_ms(trials, || net.embed(x).map(|_| ()))?),
    }];
    let w0 = net.embed(x)?;
    for &steps in iterator_steps {
        let cfg = IterConfig { steps, ..*iter };
        let t = time_ms(trials, || {
            optimize_latent(g, phi, x, &w0, &cfg, None)?.map_err(Error::from)?;
            Ok(())
        })?;
        rows.push(TimingRow { what: format!("iterator_{steps}"), trials, median_ms: median(t) });
    }
    Ok(rows)
}

/// Median iterator time over median embedding time.
pub fn speed_ratio(rows: &[TimingRow], steps: usize) -> Option<f64> {
    let find = |w: &str| rows.iter().find(|r| r.what == w).map(|r| r.median_ms);
    Some(find(&format!("iterator_{steps}"))? / find("embed_forward")?)
}

pub fn budget_csv(rows: &[BudgetRow]) -> String {
    let mut s = String::from("scheme,budget,mean_loss,mean_mse\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.9e},{:.9e}\n", r.scheme, r.budget, r.mean_loss, r.mean_mse));
    }
    s
}

pub fn long_run_csv(rows: &[RunSummary]) -> String {
    let mut s = String::from("scheme,steps,mean_loss,mean_mse,mean_psnr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.4}\n",
            r.scheme, r.steps, r.mean_loss, r.mean_mse, r.mean_psnr
        ));
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("model,encoder_updates,samples,mse,phi,psnr,ssim\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{},{:.9e},{:.9e},{:.4},{:.6}\n",
            r.model, r.updates, m.samples, m.mse, m.phi, m.psnr, m.ssim
        ));
    }
    s
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("what,trials,median_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.4}\n", r.what, r.trials, r.median_ms));
    }
    s
}

/// Whether encoder initialization is no worse than mean and random
/// initialization at every budget of `rows`.
pub fn encoder_init_dominates(rows: &[BudgetRow]) -> bool {
    let at = |s: InitScheme, b: usize| rows.iter().find(|r| r.scheme == s && r.budget == b).map(|r| r.mean_loss);
    let budgets: Vec<usize> = rows.iter().filter(|r| r.scheme == InitScheme::Encoder).map(|r| r.budget).collect();
    !budgets.is_empty()
        && budgets.iter().all(|&b| match (at(InitScheme::Encoder, b), at(InitScheme::Mean, b), at(InitScheme::Random, b)) {
            (Some(e), Some(m), Some(r)) => e <= m && e <= r,
            _ => false,
        })
}
