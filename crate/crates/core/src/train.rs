//! Min-max pretraining, downstream finetuning and SA/RA evaluation.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_contrastive, pgd_supervised, AttackConfig};
use crate::config::{FinetuneConfig, FinetuneMode, OptimConfig, RunConfig};
use crate::data::{epoch_batches, make_batch, Dataset};
use crate::encoder::{argmax, Classifier, LinearClassifier, MlpEncoder};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, AnnealState, ViewKind, SimMode, ALPHA_MAX};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, Matrix, Tensor};

/// Keeps finetuning streams apart from pretraining ones.
const FINETUNE_TAG: u64 = 1 << 32;

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(opt: &OptimConfig, params: &[&Matrix]) -> Self {
        Self {
            lr: opt.lr,
            momentum: opt.momentum,
            velocity: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        assert_eq!(params.len(), self.velocity.len());
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), gv) in p.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Per-instance means over the epoch.
    pub loss_total: f64,
    pub loss_clean: f64,
    pub loss_adv: f64,
    /// Mean α over the epoch's batches.
    pub alpha: f64,
    /// Mean clean–adversarial embedding distance.
    pub d_mean: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: MlpEncoder,
    pub metrics: Vec<EpochMetrics>,
}

fn grads_of(g: &Graph, loss: Tensor, leaves: &[Tensor]) -> Result<Vec<Matrix>> {
    let grads = g.backward(loss)?;
    Ok(leaves.iter().map(|&t| grads.get(t)).collect())
}

/// Mean `‖z_a − z_adv(a)‖` over both clean views.
pub fn clean_adv_distance(z: &Matrix, instances: usize) -> f64 {
    let layout = crate::losses::ViewLayout::new(instances).expect("non-empty batch");
    let anchors = layout.anchors();
    let sum: f64 = anchors
        .iter()
        .map(|&a| {
            let v = layout.row(layout.instance_of(a), ViewKind::Adversarial);
            z.row(a)
                .iter()
                .zip(z.row(v))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    sum / anchors.len() as f64
}

struct StepOutcome {
    total: f64,
    clean: f64,
    adv: f64,
    alpha: f64,
    d: f64,
    grads: Vec<Matrix>,
}

fn pretrain_step(
    cfg: &RunConfig,
    data: &Dataset,
    idx: &[usize],
    tags: &[u64],
    enc: &MlpEncoder,
    anneal: &mut AnnealState,
    alpha_prev: f64,
) -> Result<StepOutcome> {
    let seed = cfg.seed;
    let batch = make_batch(data, idx, &mut stream(seed, Stream::Augment, tags), &cfg.augment)?;
    let x_adv = pgd_contrastive(
        enc,
        &batch,
        &cfg.loss,
        alpha_prev,
        &cfg.pretrain.attack,
        &mut stream(seed, Stream::Attack, tags),
    )?
    .x_adv;
    let input = batch.with_adversarial(&x_adv)?;

    let mut g = Graph::new();
    let vars = enc.bind(&mut g, true);
    let x = g.constant(input);
    let out = enc.forward(&mut g, &vars, x)?;
    let d = clean_adv_distance(g.value(out.z), batch.len());
    let alpha = anneal.observe(d)?;
    let parts = batch_loss(&mut g, out.z, &batch.layout, &cfg.loss, alpha, SimMode::Asymmetric)?;
    let loss = g.scale(parts.total, 1.0 / batch.len() as f64)?;
    let total = g.value(parts.total).item();
    let grads = if total.is_finite() {
        grads_of(&g, loss, &vars.leaves())?
    } else {
        Vec::new()
    };
    Ok(StepOutcome {
        total,
        clean: g.value(parts.clean).item(),
        adv: g.value(parts.adv).item(),
        alpha,
        d,
        grads,
    })
}

/// CoreACL pretraining: per batch, two augmented views, a PGD view of the
/// original input, the selected loss, and one SGD step. `on_epoch` runs
/// after every epoch with the metrics row and current encoder.
pub fn pretrain<F>(cfg: &RunConfig, data: &Dataset, mut on_epoch: F) -> Result<PretrainOutcome>
where
    F: FnMut(&EpochMetrics, &MlpEncoder) -> Result<()>,
{
    cfg.validate()?;
    let seed = cfg.seed;
    let mut enc = MlpEncoder::init(seed, cfg.encoder.dims(data.dim()))?;
    let mut sgd = Sgd::new(&cfg.pretrain.optim, &enc.params());
    let uses_alpha = cfg.loss.kind.uses_alpha();
    let mut anneal = AnnealState::new(&cfg.anneal, cfg.loss.alpha)?;
    if !uses_alpha {
        anneal.enabled = false;
        anneal.fixed_alpha = ALPHA_MAX;
    }
    let mut alpha = anneal.fixed_alpha;
    let mut metrics = Vec::new();

    for epoch in 0..cfg.pretrain.optim.epochs {
        let batches = epoch_batches(data.len(), cfg.pretrain.optim.batch_size, seed, &[epoch as u64]);
        let (mut tot, mut clean, mut adv, mut alpha_sum, mut d_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let tags = [epoch as u64, b as u64];
            let diverged = |enc: &MlpEncoder, msg: String| Error::Diverged {
                epoch: epoch + 1,
                batch: b,
                msg,
                last_good: Box::new(enc.clone()),
            };
            let step = pretrain_step(cfg, data, idx, &tags, &enc, &mut anneal, alpha);
            let step = match step {
                Ok(s) => s,
                Err(e @ (Error::NonFinite(_) | Error::Domain { .. })) => return Err(diverged(&enc, e.to_string())),
                Err(e) => return Err(e),
            };
            if !step.total.is_finite() || step.grads.iter().any(|m| !m.all_finite()) {
                return Err(diverged(&enc, format!("loss {}", step.total)));
            }
            let before = enc.clone();
            sgd.step(enc.params_mut(), &step.grads);
            if enc.params().iter().any(|m| !m.all_finite()) {
                return Err(diverged(&before, "parameters became non-finite".into()));
            }
            alpha = step.alpha;
            tot += step.total;
            clean += step.clean;
            adv += step.adv;
            alpha_sum += step.alpha;
            d_sum += step.d;
        }
        anneal.end_epoch(epoch + 1)?;
        let n = data.len() as f64;
        let row = EpochMetrics {
            epoch: epoch + 1,
            loss_total: tot / n,
            loss_clean: clean / n,
            loss_adv: adv / n,
            alpha: alpha_sum / batches.len() as f64,
            d_mean: d_sum / batches.len() as f64,
        };
        log::info!(
            "epoch {:>3}: loss {:.5} (clean {:.5}, adv {:.5}) alpha {:.4} d {:.4}",
            row.epoch,
            row.loss_total,
            row.loss_clean,
            row.loss_adv,
            row.alpha,
            row.d_mean
        );
        on_epoch(&row, &enc)?;
        metrics.push(row);
    }
    Ok(PretrainOutcome { encoder: enc, metrics })
}

/// Trains a classification head (and, for AFF, the encoder) on top of a
/// pretrained encoder. Adversarial modes attack with `attack` against the
/// current model at every step.
pub fn finetune(encoder: &MlpEncoder, data: &Dataset, ft: &FinetuneConfig, attack: &AttackConfig, seed: u64) -> Result<Classifier> {
    if encoder.dims.input != data.dim() {
        return Err(Error::config(format!(
            "checkpoint expects {} input features, dataset has {}",
            encoder.dims.input,
            data.dim()
        )));
    }
    attack.validate()?;
    let mut model = Classifier {
        encoder: encoder.clone(),
        head: LinearClassifier::zeros(encoder.dims.feature_dim(), data.classes),
    };
    let mut head_opt = Sgd::new(&ft.optim, &model.head.params());
    let mut enc_opt = Sgd::new(&ft.optim, &model.encoder.params());
    let features = match ft.mode {
        FinetuneMode::Lp => Some(encoder.encode(&data.x)?.0),
        _ => None,
    };

    for epoch in 0..ft.optim.epochs {
        let batches = epoch_batches(data.len(), ft.optim.batch_size, seed, &[FINETUNE_TAG, epoch as u64]);
        for (b, idx) in batches.iter().enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let mut g = Graph::new();
            let head = model.head.bind(&mut g, true);
            let (h, enc_vars) = match (&features, ft.mode) {
                (Some(f), _) => (g.constant(f.select_rows(idx)), None),
                (None, mode) => {
                    let x = data.x.select_rows(idx);
                    let mut rng = stream(seed, Stream::Attack, &[FINETUNE_TAG, epoch as u64, b as u64]);
                    let x_adv = pgd_supervised(&model, &x, &labels, attack, &mut rng)?;
                    let vars = model.encoder.bind(&mut g, mode == FinetuneMode::Aff);
                    let input = g.constant(x_adv);
                    let out = model.encoder.forward(&mut g, &vars, input)?;
                    (out.h, (mode == FinetuneMode::Aff).then_some(vars))
                }
            };
            let logits = head.forward(&mut g, h)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite(format!("finetune epoch {} batch {b}", epoch + 1)));
            }
            let grads = g.backward(loss)?;
            let head_grads = [grads.get(head.weight), grads.get(head.bias)];
            head_opt.step(model.head.params_mut(), &head_grads);
            if let Some(vars) = enc_vars {
                let enc_grads: Vec<Matrix> = vars.leaves().iter().map(|&t| grads.get(t)).collect();
                enc_opt.step(model.encoder.params_mut(), &enc_grads);
            }
        }
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy on clean inputs.
    pub sa: f64,
    /// Accuracy under the evaluation attack.
    pub ra: f64,
    pub n: usize,
    pub per_class_total: Vec<usize>,
    pub per_class_clean_correct: Vec<usize>,
    pub per_class_robust_correct: Vec<usize>,
    pub attack: AttackConfig,
    pub seed: u64,
}

const EVAL_CHUNK: usize = 250;

pub fn evaluate(model: &Classifier, test: &Dataset, attack: &AttackConfig, seed: u64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    let classes = model.head.classes();
    let mut report = EvalReport {
        sa: 0.0,
        ra: 0.0,
        n: test.len(),
        per_class_total: vec![0; classes],
        per_class_clean_correct: vec![0; classes],
        per_class_robust_correct: vec![0; classes],
        attack: attack.clone(),
        seed,
    };
    let idx: Vec<usize> = (0..test.len()).collect();
    for (c, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let x = test.x.select_rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| test.y[i]).collect();
        let mut rng = stream(seed, Stream::Eval, &[c as u64]);
        let x_adv = pgd_supervised(model, &x, &labels, attack, &mut rng)?;
        let clean = model.logits(&x)?;
        let robust = model.logits(&x_adv)?;
        for (r, &l) in labels.iter().enumerate() {
            report.per_class_total[l] += 1;
            report.per_class_clean_correct[l] += (argmax(clean.row(r)) == l) as usize;
            report.per_class_robust_correct[l] += (argmax(robust.row(r)) == l) as usize;
        }
    }
    let n = test.len() as f64;
    report.sa = report.per_class_clean_correct.iter().sum::<usize>() as f64 / n;
    report.ra = report.per_class_robust_correct.iter().sum::<usize>() as f64 / n;
    Ok(report)
}

/// Euclidean distances of all unordered row pairs, `(0,1), (0,2), …`.
pub fn pairwise_distances(z: &Matrix) -> Vec<f64> {
    let n = z.rows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(d2.sqrt());
        }
    }
    out
}

/// Mean pairwise distance of embeddings; 0 when every row coincides and
/// at most 2 for unit-norm rows.
pub fn collapse_metric(z: &Matrix) -> Result<f64> {
    if z.rows() < 2 {
        return Err(Error::config("collapse_metric needs at least two embeddings"));
    }
    let d = pairwise_distances(z);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, BlobsConfig, Split};
    use crate::losses::LossKind;
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.blobs = BlobsConfig {
            classes: 3,
            dim: 8,
            train_per_class: 20,
            test_per_class: 10,
            spread: 0.1,
        };
        cfg.encoder.hidden = vec![12];
        cfg.encoder.proj = 6;
        cfg.pretrain.optim.epochs = 2;
        cfg.pretrain.optim.batch_size = 16;
        cfg.finetune.optim.epochs = 3;
        cfg.finetune.optim.batch_size = 16;
        cfg.anneal.warmup_epochs = 1;
        cfg
    }

    fn data(cfg: &RunConfig, split: Split) -> Dataset {
        gen_blobs(&cfg.data.blobs, cfg.seed, split).unwrap()
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let opt = OptimConfig {
            epochs: 1,
            batch_size: 1,
            lr: 0.1,
            momentum: 0.9,
        };
        let mut p = Matrix::scalar(1.0);
        let mut sgd = Sgd::new(&opt, &[&p]);
        sgd.step(vec![&mut p], &[Matrix::scalar(2.0)]);
        assert!((p.item() - 0.8).abs() < 1e-15);
        sgd.step(vec![&mut p], &[Matrix::scalar(1.0)]);
        // v = 0.9·2 + 1 = 2.8
        assert!((p.item() - 0.52).abs() < 1e-15);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let cfg = small_cfg();
        let d = data(&cfg, Split::Train);
        let a = pretrain(&cfg, &d, |_, _| Ok(())).unwrap();
        let b = pretrain(&cfg, &d, |_, _| Ok(())).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 2);
        assert!(a.metrics.iter().all(|m| m.loss_total.is_finite() && m.d_mean > 0.0));
    }

    #[test]
    fn zero_radius_attack_copies_the_original() {
        let mut cfg = small_cfg();
        cfg.loss.kind = LossKind::Infonce;
        cfg.pretrain.attack.epsilon = 0.0;
        cfg.augment = crate::data::AugmentPolicy::identity();
        let d = data(&cfg, Split::Train);
        let out = pretrain(&cfg, &d, |_, _| Ok(())).unwrap();
        // Identity augmentation and no attack: all three views coincide.
        assert!(out.metrics.iter().all(|m| m.d_mean == 0.0 && m.alpha == 0.5));
    }

    #[test]
    fn on_epoch_errors_abort() {
        let cfg = small_cfg();
        let d = data(&cfg, Split::Train);
        let res = pretrain(&cfg, &d, |m, _| {
            if m.epoch == 1 {
                Err(Error::config("stop"))
            } else {
                Ok(())
            }
        });
        assert!(res.is_err());
    }

    #[test]
    fn divergence_returns_last_good_encoder() {
        let mut cfg = small_cfg();
        cfg.pretrain.optim.lr = 1e300;
        let d = data(&cfg, Split::Train);
        match pretrain(&cfg, &d, |_, _| Ok(())) {
            Err(Error::Diverged { last_good, .. }) => {
                assert!(last_good.params().iter().all(|m| m.all_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn linear_probe_keeps_encoder_and_alf_without_attack_matches_it() {
        let cfg = small_cfg();
        let train = data(&cfg, Split::Train);
        let enc = MlpEncoder::init(1, cfg.encoder.dims(train.dim())).unwrap();
        let before = enc.clone();
        let mut attack = cfg.eval.attack.clone();
        let lp = finetune(&enc, &train, &cfg.finetune, &attack, 4).unwrap();
        assert_eq!(lp.encoder, before);
        attack.epsilon = 0.0;
        let ft = FinetuneConfig {
            mode: FinetuneMode::Alf,
            ..cfg.finetune.clone()
        };
        let alf = finetune(&enc, &train, &ft, &attack, 4).unwrap();
        assert_eq!(alf, lp);
        let aff = finetune(&enc, &train, &FinetuneConfig { mode: FinetuneMode::Aff, ..ft }, &attack, 4).unwrap();
        assert_ne!(aff.encoder, before);
    }

    #[test]
    fn finetune_rejects_dim_mismatch() {
        let cfg = small_cfg();
        let train = data(&cfg, Split::Train);
        let enc = MlpEncoder::init(1, cfg.encoder.dims(train.dim() + 1)).unwrap();
        assert!(finetune(&enc, &train, &cfg.finetune, &cfg.eval.attack, 0).is_err());
    }

    #[test]
    fn evaluation_contracts() {
        let cfg = small_cfg();
        let test = data(&cfg, Split::Test);
        let enc = MlpEncoder::init(2, cfg.encoder.dims(test.dim())).unwrap();
        // Constant class-0 classifier.
        let mut head = LinearClassifier::zeros(enc.dims.feature_dim(), 3);
        head.layer.bias = Matrix::row_vector(vec![1.0, 0.0, 0.0]);
        let model = Classifier { encoder: enc, head };
        let r = evaluate(&model, &test, &cfg.eval.attack, 0).unwrap();
        let freq = test.y.iter().filter(|&&l| l == 0).count() as f64 / test.len() as f64;
        assert_eq!(r.sa, freq);
        assert_eq!(r.ra, freq);

        let train = data(&cfg, Split::Train);
        let trained = finetune(&model.encoder, &train, &cfg.finetune, &cfg.eval.attack, 0).unwrap();
        let mut zero = cfg.eval.attack.clone();
        zero.epsilon = 0.0;
        let r0 = evaluate(&trained, &test, &zero, 3).unwrap();
        assert_eq!(r0.sa, r0.ra);
        let r1 = evaluate(&trained, &test, &cfg.eval.attack, 3).unwrap();
        assert_eq!(r1, evaluate(&trained, &test, &cfg.eval.attack, 3).unwrap());
        assert!((0.0..=1.0).contains(&r1.ra));
    }

    #[test]
    fn collapse_examples() {
        let same = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        assert_eq!(collapse_metric(&same).unwrap(), 0.0);
        let anti = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(collapse_metric(&anti).unwrap(), 2.0);
        assert!(collapse_metric(&Matrix::row_vector(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn collapse_of_random_directions() {
        // Oracle: Monte-Carlo mean distance of independent uniform unit
        // vectors in 32 dimensions over 1e5 pairs.
        let mut rng = stream(42, Stream::Probe, &[]);
        let mut unit = || {
            let v: Vec<f64> = (0..32)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    n
                })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut mc = 0.0;
        for _ in 0..100_000 {
            let (a, b) = (unit(), unit());
            mc += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
        mc /= 100_000.0;
        assert!((1.30..=1.50).contains(&mc));
        let rows: Vec<Vec<f64>> = (0..100).map(|_| unit()).collect();
        let m = collapse_metric(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!((1.30..=1.50).contains(&m), "{m}");
        assert!((m - mc).abs() < 0.05);
    }
}
