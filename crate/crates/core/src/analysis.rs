//! End-to-end runs and the figure-style analyses: α sweep, negative-pair
//! distance histogram, and the registered gradient-check suites.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::config::{provenance_line, FinetuneMode, RunConfig};
use crate::data::{format_f64, gen_blobs, load_csv_dataset, Dataset, Split};
use crate::encoder::{Classifier, EncoderDims, EncoderVars, LinearVars, MlpEncoder};
use crate::error::{Error, Result};
use crate::losses::{a_infonce, batch_loss, infonce, LossConfig, LossKind, SimMode, ViewLayout, WeightMode};
use crate::rng::{stream, Stream};
use crate::tensor::{finite_diff_check, Matrix, DEFAULT_FD_EPS};
use crate::train::{collapse_metric, evaluate, finetune, pairwise_distances, pretrain, EpochMetrics, EvalReport};

/// Train and test splits named by the config: CSV files when given,
/// otherwise blobs drawn from the run seed.
pub fn load_datasets(cfg: &RunConfig, base: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let resolve = |p: &str| match base {
        Some(dir) => dir.join(p),
        None => Path::new(p).to_path_buf(),
    };
    let train = match &cfg.data.train_csv {
        Some(p) => load_csv_dataset(&resolve(p), Split::Train)?,
        None => gen_blobs(&cfg.data.blobs, cfg.seed, Split::Train)?,
    };
    let test = match &cfg.data.test_csv {
        Some(p) => load_csv_dataset(&resolve(p), Split::Test)?,
        None => gen_blobs(&cfg.data.blobs, cfg.seed, Split::Test)?,
    };
    if train.dim() != test.dim() {
        return Err(Error::config(format!(
            "train has {} features, test has {}",
            train.dim(),
            test.dim()
        )));
    }
    Ok((train, test))
}

/// Unit-norm projections of every row of `data`.
pub fn embed(encoder: &MlpEncoder, data: &Dataset) -> Result<Matrix> {
    Ok(encoder.encode(&data.x)?.1)
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub encoder: MlpEncoder,
    pub metrics: Vec<EpochMetrics>,
    pub model: Classifier,
    pub report: EvalReport,
    /// Collapse metric of the test-split projections.
    pub collapse: f64,
}

/// Pretrain, finetune with the configured mode, evaluate.
pub fn run_pipeline(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<PipelineResult> {
    let pre = pretrain(cfg, train, |_, _| Ok(()))?;
    let model = finetune(&pre.encoder, train, &cfg.finetune, &cfg.eval.attack, cfg.seed)?;
    let report = evaluate(&model, test, &cfg.eval.attack, cfg.seed)?;
    let collapse = collapse_metric(&embed(&pre.encoder, test)?)?;
    Ok(PipelineResult {
        encoder: pre.encoder,
        metrics: pre.metrics,
        model,
        report,
        collapse,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub sa: f64,
    pub ra: f64,
    pub collapse: f64,
}

/// One fixed-α pretrain + finetune + evaluate cycle per α, same seed
/// throughout. Rows come back sorted by α.
pub fn alpha_sweep(base: &RunConfig, alphas: &[f64], train: &Dataset, test: &Dataset) -> Result<Vec<SweepRow>> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::config(format!("alpha {a} outside [0, 1]")));
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(sorted.len());
    for alpha in sorted {
        let mut cfg = base.clone();
        cfg.anneal.enabled = false;
        cfg.loss.alpha = alpha;
        let r = run_pipeline(&cfg, train, test)?;
        log::info!("alpha {alpha}: SA {:.4} RA {:.4} collapse {:.4}", r.report.sa, r.report.ra, r.collapse);
        rows.push(SweepRow {
            alpha,
            sa: r.report.sa,
            ra: r.report.ra,
            collapse: r.collapse,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(cfg: &RunConfig, rows: &[SweepRow]) -> String {
    let mut out = provenance_line(cfg);
    out.push_str("\nalpha,sa,ra,collapse\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            format_f64(r.alpha),
            format_f64(r.sa),
            format_f64(r.ra),
            format_f64(r.collapse)
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` uniform edges over `[0, 2]`.
    pub edges: Vec<f64>,
    /// Fractions summing to 1.
    pub density: Vec<f64>,
    pub mean: f64,
    pub pairs: usize,
}

/// Normalized histogram of distances between the unit-norm projections of
/// every pair of distinct rows (negative pairs), binned uniformly on `[0, 2]`.
pub fn distance_histogram(z: &Matrix, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::config("dist-hist needs at least 2 bins"));
    }
    if z.rows() < 2 {
        return Err(Error::config("dist-hist needs at least two embedded rows"));
    }
    let d = pairwise_distances(z);
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in &d {
        let k = ((v / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = d.len() as f64;
    Ok(Histogram {
        edges: (0..=bins).map(|k| k as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / n).collect(),
        mean: d.iter().sum::<f64>() / n,
        pairs: d.len(),
    })
}

pub fn histogram_csv(cfg: &RunConfig, h: &Histogram) -> String {
    let mut out = provenance_line(cfg);
    writeln!(out, "\n# pairs={} mean_distance={}", h.pairs, format_f64(h.mean)).unwrap();
    out.push_str("bin_lo,bin_hi,count\n");
    for (k, p) in h.density.iter().enumerate() {
        writeln!(out, "{},{},{}", format_f64(h.edges[k]), format_f64(h.edges[k + 1]), format_f64(*p)).unwrap();
    }
    out
}

pub fn metrics_header(cfg: &RunConfig) -> String {
    format!("{}\nepoch,loss_total,loss_clean,loss_adv,alpha,d_mean\n", provenance_line(cfg))
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        m.epoch,
        format_f64(m.loss_total),
        format_f64(m.loss_clean),
        format_f64(m.loss_adv),
        format_f64(m.alpha),
        format_f64(m.d_mean)
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub cases: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

pub const GRAD_THRESHOLD: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 10;

fn normal_rows(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = stream(seed, Stream::Probe, &[rows as u64, cols as u64]);
    let data = (0..rows * cols)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n
        })
        .collect();
    Matrix::new(rows, cols, data).expect("sized")
}

fn suite<F>(name: &str, mut case: F) -> Result<SuiteResult>
where
    F: FnMut(u64) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        worst = worst.max(case(seed)?);
    }
    Ok(SuiteResult {
        name: name.into(),
        max_rel_err: worst,
        threshold: GRAD_THRESHOLD,
        cases: GRAD_SEEDS as usize,
    })
}

/// Central finite-difference checks of every objective on seeded toy
/// batches of three instances (raw rows are L2-normalized inside the
/// checked function), plus the encoder and classifier paths.
pub fn gradient_suites() -> Result<Vec<SuiteResult>> {
    let layout = ViewLayout::new(3)?;
    let mut out = Vec::new();
    out.push(suite("infonce", |seed| {
        let raw = normal_rows(seed, 6, 4);
        Ok(finite_diff_check(
            |g, p| {
                let z = g.l2_normalize_rows(p[0])?;
                infonce(g, z, 0, 1, &[2, 3, 4, 5], 0.5)
            },
            &[raw],
            DEFAULT_FD_EPS,
        )?
        .max_rel_err)
    })?);
    out.push(suite("a_infonce", |seed| {
        let raw = normal_rows(seed, 6, 4);
        Ok(finite_diff_check(
            |g, p| {
                let z = g.l2_normalize_rows(p[0])?;
                a_infonce(g, z, 0, 1, &[2, 3, 4, 5], 0.3, 1.0, &[0.5, 1.0, 1.5, 2.0], 0.5)
            },
            &[raw],
            DEFAULT_FD_EPS,
        )?
        .max_rel_err)
    })?);
    for kind in [LossKind::Infonce, LossKind::Ip, LossKind::Hn, LossKind::IpHn] {
        let cfg = LossConfig {
            kind,
            temperature: 0.5,
            alpha: 0.3,
            gamma: 0.8,
            tau: 0.1,
            weight_mode: WeightMode::Similarity,
        };
        let name = format!("{kind:?}").to_lowercase();
        out.push(suite(&format!("loss_{name}"), |seed| {
            let raw = normal_rows(100 + seed, layout.rows(), 4);
            Ok(finite_diff_check(
                |g, p| {
                    let z = g.l2_normalize_rows(p[0])?;
                    Ok(batch_loss(g, z, &layout, &cfg, cfg.alpha, SimMode::Asymmetric)?.total)
                },
                &[raw],
                DEFAULT_FD_EPS,
            )?
            .max_rel_err)
        })?);
    }
    out.push(suite("encoder_ip", |seed| {
        let enc = MlpEncoder::init(seed, EncoderDims::new(5, vec![16], 4))?;
        let x = normal_rows(200 + seed, layout.rows(), 5).map(|v| 0.5 + 0.2 * v);
        let cfg = LossConfig::default();
        let params: Vec<Matrix> = enc.params().into_iter().cloned().collect();
        Ok(finite_diff_check(
            |g, p| {
                let n = enc.backbone.len();
                let vars = EncoderVars {
                    backbone: (0..n)
                        .map(|i| LinearVars {
                            weight: p[2 * i],
                            bias: p[2 * i + 1],
                        })
                        .collect(),
                    projection: LinearVars {
                        weight: p[2 * n],
                        bias: p[2 * n + 1],
                    },
                };
                let input = g.constant(x.clone());
                let out = enc.forward(g, &vars, input)?;
                Ok(batch_loss(g, out.z, &layout, &cfg, 0.3, SimMode::Asymmetric)?.total)
            },
            &params,
            DEFAULT_FD_EPS,
        )?
        .max_rel_err)
    })?);
    Ok(out)
}

/// Finetune mode label for file names and reports.
pub fn mode_name(mode: FinetuneMode) -> &'static str {
    match mode {
        FinetuneMode::Lp => "lp",
        FinetuneMode::Alf => "alf",
        FinetuneMode::Aff => "aff",
    }
}
