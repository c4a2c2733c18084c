//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Criteria 7-9 train full-size models and take several minutes.

use std::time::Instant;

use ainfonce::analysis::{embed, gradient_suites, load_datasets, run_pipeline, PipelineResult};
use ainfonce::attack::{pgd, pgd_contrastive, AttackConfig, Probe};
use ainfonce::checkpoint::Checkpoint;
use ainfonce::config::{FinetuneMode, RunConfig};
use ainfonce::data::make_batch;
use ainfonce::encoder::{EncoderDims, MlpEncoder};
use ainfonce::losses::{
    a_infonce, anneal_alpha, batch_loss, debiased_negative_mass, infonce, loss_hn, loss_ip, loss_ip_hn, sim, sim_alpha,
    LossConfig, LossKind, SimMode, ViewLayout, WeightMode, ALPHA_MAX,
};
use ainfonce::rng::{stream, Stream};
use ainfonce::tensor::{Graph, Matrix, Tensor};
use ainfonce::train::{finetune, pretrain};
use rand::Rng as _;

const GRAD_TOL: f64 = 1e-5;
const GRAD_SUITE_SECONDS: f64 = 30.0;
const VALUE_TOL: f64 = 1e-12;
const GRADIENT_TOL: f64 = 1e-10;
const SPLIT_TOL: f64 = 1e-12;
const MASS_TOL: f64 = 1e-12;
const COLLAPSE_RATIO: f64 = 0.25;
const RA_GAP: f64 = 0.05;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn unit_rows(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = stream(seed, Stream::Probe, &[7, rows as u64, cols as u64]);
    let mut m = Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    for r in 0..rows {
        let n = m.row_norm(r);
        m.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn value_and_grad(z: &Matrix, f: impl FnOnce(&mut Graph, Tensor) -> Tensor) -> (f64, Matrix) {
    let mut g = Graph::new();
    let zt = g.param(z.clone());
    let out = f(&mut g, zt);
    let grads = g.backward(out).unwrap();
    (g.value(out).item(), grads.get(zt))
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn c1() -> Line {
    let t = Instant::now();
    let suites = gradient_suites().unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    let names: Vec<&str> = suites.iter().map(|s| s.name.as_str()).collect();
    Line {
        id: 1,
        name: "gradient suite vs central differences",
        pass: worst < GRAD_TOL && secs < GRAD_SUITE_SECONDS && suites.iter().all(|s| s.cases == 10),
        detail: format!("max rel err {worst:.2e} < {GRAD_TOL:e} over [{}], {secs:.1}s < {GRAD_SUITE_SECONDS}s", names.join(", ")),
    }
}

fn c2() -> Line {
    let layout = ViewLayout::new(3).unwrap();
    let negs = [2, 3, 4, 5];
    let (mut ainf_v, mut ainf_g, mut ainf_ratio) = (0.0f64, 0.0f64, 0.0f64);
    let (mut hn_v, mut hn_g, mut iphn_v, mut iphn_g) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..10 {
        let z = unit_rows(seed, 6, 4);
        let (v0, g0) = value_and_grad(&z, |g, zt| infonce(g, zt, 0, 1, &negs, 0.5).unwrap());
        let (v1, g1) = value_and_grad(&z, |g, zt| a_infonce(g, zt, 0, 1, &negs, 0.5, 1.0, &[1.0; 4], 0.5).unwrap());
        ainf_v = ainf_v.max((v0 - v1).abs());
        ainf_g = ainf_g.max(max_diff(&g0, &g1));
        ainf_ratio = ainf_ratio.max(max_diff(&g0.map(|x| 0.5 * x), &g1));

        let z = unit_rows(100 + seed, layout.rows(), 4);
        let (v0, g0) = value_and_grad(&z, |g, zt| {
            loss_hn(g, zt, &layout, 0.3, 0.0, 0.5, WeightMode::Uniform, SimMode::Asymmetric).unwrap().total
        });
        let (v1, g1) = value_and_grad(&z, |g, zt| {
            let mut terms = Vec::new();
            for a in layout.anchors() {
                let n = layout.negatives(a);
                for p in layout.positives(a) {
                    terms.push(a_infonce(g, zt, a, p, &n, 0.3, 1.0, &vec![1.0; n.len()], 0.5).unwrap());
                }
            }
            let all = g.concat_rows(&terms).unwrap();
            g.sum(all).unwrap()
        });
        hn_v = hn_v.max((v0 - v1).abs());
        hn_g = hn_g.max(max_diff(&g0, &g1));

        let (v0, g0) = value_and_grad(&z, |g, zt| {
            loss_ip_hn(g, zt, &layout, 0.3, 0.7, 0.0, 0.5, WeightMode::Uniform, SimMode::Asymmetric).unwrap().total
        });
        let (v1, g1) = value_and_grad(&z, |g, zt| loss_ip(g, zt, &layout, 0.3, 0.7, 0.5, SimMode::Asymmetric).unwrap().total);
        iphn_v = iphn_v.max((v0 - v1).abs());
        iphn_g = iphn_g.max(max_diff(&g0, &g1));
    }

    // ε = 0 attack returns the original inputs.
    let cfg = small_config();
    let (train, _) = load_datasets(&cfg, None).unwrap();
    let enc = MlpEncoder::init(3, cfg.encoder.dims(train.dim())).unwrap();
    let mut rng = stream(3, Stream::Augment, &[]);
    let batch = make_batch(&train, &(0..16).collect::<Vec<_>>(), &mut rng, &cfg.augment).unwrap();
    let zero = AttackConfig {
        epsilon: 0.0,
        ..AttackConfig::pretrain_default()
    };
    let mut rng = stream(3, Stream::Attack, &[]);
    let out = pgd_contrastive(&enc, &batch, &cfg.loss, 0.3, &zero, &mut rng).unwrap();
    let attack_identity = out.x_adv == batch.original;

    // ALF with ε = 0 follows the LP trajectory bit for bit.
    let mut ft = cfg.finetune.clone();
    ft.mode = FinetuneMode::Lp;
    let lp = finetune(&enc, &train, &ft, &zero, 5).unwrap();
    ft.mode = FinetuneMode::Alf;
    let alf = finetune(&enc, &train, &ft, &zero, 5).unwrap();
    let alf_lp = lp == alf;

    let pass = ainf_v <= VALUE_TOL
        && ainf_g <= GRADIENT_TOL
        && hn_v <= VALUE_TOL
        && hn_g <= GRADIENT_TOL
        && iphn_v <= VALUE_TOL
        && iphn_g <= GRADIENT_TOL
        && attack_identity
        && alf_lp;
    Line {
        id: 2,
        name: "degeneracy identities",
        pass,
        detail: format!(
            "a_infonce(0.5,1,1) vs infonce: value {ainf_v:.1e}, grad {ainf_g:.1e} (grad equals 0.5x infonce to {ainf_ratio:.1e}); \
             hn(tau=0) vs a_infonce: {hn_v:.1e}/{hn_g:.1e}; ip_hn(tau=0) vs ip: {iphn_v:.1e}/{iphn_g:.1e}; \
             eps=0 attack identity {attack_identity}; ALF(eps=0) == LP {alf_lp}"
        ),
    }
}

fn c3() -> Line {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let a = unit_rows(200 + seed, 3, 5);
        let b = unit_rows(300 + seed, 4, 5);
        for alpha in [0.0, 0.3, 0.5, 1.0] {
            let weights = unit_rows(400 + seed, 3, 4);
            let run = |asym: bool| {
                let mut g = Graph::new();
                let at = g.param(a.clone());
                let bt = g.param(b.clone());
                let s = if asym { sim_alpha(&mut g, at, bt, alpha) } else { sim(&mut g, at, bt) }.unwrap();
                let w = g.constant(weights.clone());
                let ws = g.mul(s, w).unwrap();
                let out = g.sum(ws).unwrap();
                let grads = g.backward(out).unwrap();
                (g.value(s).clone(), grads.get(at), grads.get(bt))
            };
            let (s0, ga0, gb0) = run(false);
            let (s1, ga1, gb1) = run(true);
            worst = worst
                .max(max_diff(&s0, &s1))
                .max(max_diff(&ga0.map(|x| alpha * x), &ga1))
                .max(max_diff(&gb0.map(|x| (1.0 - alpha) * x), &gb1));
        }
    }
    Line {
        id: 3,
        name: "asymmetric similarity gradient split",
        pass: worst <= SPLIT_TOL,
        detail: format!("max deviation {worst:.1e} <= {SPLIT_TOL:e} for alpha in {{0, 0.3, 0.5, 1}}"),
    }
}

fn c4() -> Line {
    let (amin, dmin, dmax) = (0.2, 0.1, 0.9);
    let mut ok = anneal_alpha(amin, ALPHA_MAX, dmin, dmax, dmax).unwrap() == amin
        && anneal_alpha(amin, ALPHA_MAX, dmin, dmax, dmin).unwrap() == ALPHA_MAX;
    let mut prev = f64::INFINITY;
    for k in 0..100 {
        let d = 1.2 * k as f64 / 99.0;
        let a = anneal_alpha(amin, ALPHA_MAX, dmin, dmax, d).unwrap();
        let raw = amin + (dmax - d) * (ALPHA_MAX - amin) / (dmax - dmin);
        ok &= a <= prev && (amin..=ALPHA_MAX).contains(&a) && (a - raw.clamp(amin, ALPHA_MAX)).abs() < 1e-15;
        prev = a;
    }
    Line {
        id: 4,
        name: "alpha annealing schedule",
        pass: ok,
        detail: "endpoints, monotone non-increasing in d, clamped to [alpha_min, 0.5] on a 100-point grid".into(),
    }
}

fn mass(neg: Vec<f64>, pos: Vec<f64>, tau: f64, t: f64) -> f64 {
    let mut g = Graph::new();
    let (n, m) = (neg.len(), pos.len());
    let ns = g.constant(Matrix::new(1, n, neg).unwrap());
    let ps = g.constant(Matrix::new(1, m, pos).unwrap());
    let out = debiased_negative_mass(&mut g, ns, ps, &Matrix::filled(1, n, 1.0), &Matrix::filled(1, m, 1.0), tau, t).unwrap();
    g.value(out).item()
}

fn c5() -> Line {
    let sims = [0.3, -0.2, 0.8];
    let plain = mass(sims.to_vec(), vec![0.5], 0.0, 0.5);
    let expected: f64 = sims.iter().map(|s: &f64| (s / 0.5).exp()).sum();
    let four = mass(vec![0.0; 4], vec![0.0; 2], 0.1, 1.0);
    let clamp = mass(vec![-1.0], vec![1.0], 0.5, 1.0);
    let e_inv = (-1.0f64).exp();
    let errs = [(plain - expected).abs(), (four - 4.0).abs(), (clamp - e_inv).abs()];
    Line {
        id: 5,
        name: "debiased negative mass",
        pass: errs.iter().all(|&e| e <= MASS_TOL) && (clamp - 0.367879).abs() < 5e-7,
        detail: format!(
            "tau=0 err {:.1e}; M=2/N=4/tau=0.1 gives {four} (err {:.1e}); clamp gives {clamp:.6} (err vs e^-1 {:.1e})",
            errs[0], errs[1], errs[2]
        ),
    }
}

fn c6() -> Line {
    let cfg = small_config();
    let (train, _) = load_datasets(&cfg, None).unwrap();
    let mut ok = true;

    // Every iterate stays in the ε-ball and the input range.
    let attack = AttackConfig {
        epsilon: 0.1,
        step_size: 0.04,
        steps: 8,
        random_start: true,
        input_range: [0.0, 1.0],
    };
    for seed in 0..5 {
        let enc = MlpEncoder::init(seed, cfg.encoder.dims(train.dim())).unwrap();
        let mut rng = stream(seed, Stream::Augment, &[]);
        let idx: Vec<usize> = (0..16).map(|i| (i * 7 + seed as usize) % train.len()).collect();
        let batch = make_batch(&train, &idx, &mut rng, &cfg.augment).unwrap();
        let mut probe_cfg = cfg.loss.clone();
        probe_cfg.kind = LossKind::Ip;
        let mut iterates = 0;
        let mut rng = stream(seed, Stream::Attack, &[]);
        let clean = enc.encode(&batch.clean()).unwrap().1;
        let out = pgd(&batch.original, &attack, &mut rng, |x| {
            iterates += 1;
            for (&v, &c) in x.as_slice().iter().zip(batch.original.as_slice()) {
                ok &= (v - c).abs() <= attack.epsilon && (0.0..=1.0).contains(&v);
            }
            contrastive_probe(&enc, &clean, x, &batch.layout, &probe_cfg)
        })
        .unwrap();
        ok &= iterates == attack.steps + 1;
        ok &= out.x_adv.as_slice().iter().zip(batch.original.as_slice()).all(|(v, c)| (v - c).abs() <= 0.1);

        // Non-random start: the returned view never lowers the loss.
        let fixed = AttackConfig {
            random_start: false,
            ..AttackConfig::pretrain_default()
        };
        let mut rng = stream(seed, Stream::Attack, &[1]);
        let out = pgd_contrastive(&enc, &batch, &probe_cfg, 0.3, &fixed, &mut rng).unwrap();
        let before = contrastive_probe(&enc, &clean, &batch.original, &batch.layout, &probe_cfg).unwrap().values[0];
        let after = contrastive_probe(&enc, &clean, &out.x_adv, &batch.layout, &probe_cfg).unwrap().values[0];
        ok &= after >= before;
    }

    // Linear objective: one step of size ε lands on x0 + ε·sign(w).
    let w = Matrix::new(2, 3, vec![0.5, -2.0, 0.0, 1.0, -0.1, 3.0]).unwrap();
    let x0 = Matrix::filled(2, 3, 0.5);
    let one = AttackConfig {
        epsilon: 0.1,
        step_size: 0.1,
        steps: 1,
        random_start: false,
        input_range: [0.0, 1.0],
    };
    let mut rng = stream(0, Stream::Attack, &[2]);
    let out = pgd(&x0, &one, &mut rng, |x| {
        Ok(Probe {
            values: vec![x.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()],
            grad: w.clone(),
        })
    })
    .unwrap();
    let expect = x0.zip_map(&w, |x, g| x + 0.1 * g.signum() * f64::from(g != 0.0));
    let linear_ok = max_diff(&out.x_adv, &expect) < 1e-15;
    Line {
        id: 6,
        name: "PGD contracts",
        pass: ok && linear_ok,
        detail: format!("per-iterate box checks and monotone loss over 5 seeds: {ok}; linear one-step optimality: {linear_ok}"),
    }
}

fn contrastive_probe(enc: &MlpEncoder, clean: &Matrix, x: &Matrix, layout: &ViewLayout, cfg: &LossConfig) -> ainfonce::Result<Probe> {
    let mut g = Graph::new();
    let vars = enc.bind(&mut g, false);
    let c = g.constant(clean.clone());
    let input = g.param(x.clone());
    let adv = enc.forward(&mut g, &vars, input)?;
    let z = g.concat_rows(&[c, adv.z])?;
    let loss = batch_loss(&mut g, z, layout, cfg, 0.3, SimMode::Symmetric)?.total;
    let grads = g.backward(loss)?;
    Ok(Probe {
        values: vec![g.value(loss).item()],
        grad: grads.get(input),
    })
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.blobs.classes = 4;
    cfg.data.blobs.dim = 8;
    cfg.data.blobs.train_per_class = 20;
    cfg.data.blobs.test_per_class = 10;
    cfg.encoder.hidden = vec![12];
    cfg.encoder.proj = 6;
    cfg.pretrain.optim.epochs = 3;
    cfg.pretrain.optim.batch_size = 16;
    cfg.finetune.optim.epochs = 3;
    cfg.finetune.optim.batch_size = 16;
    cfg
}

struct Runs {
    timer: Instant,
}

impl Runs {
    fn run(&self, label: &str, cfg: &RunConfig) -> PipelineResult {
        let (train, test) = load_datasets(cfg, None).unwrap();
        let t = Instant::now();
        let r = run_pipeline(cfg, &train, &test).unwrap();
        eprintln!(
            "  [{:>6.0}s] {label:<28} seed {} SA {:.4} RA {:.4} collapse {:.4} ({:.0}s)",
            self.timer.elapsed().as_secs_f64(),
            cfg.seed,
            r.report.sa,
            r.report.ra,
            r.collapse,
            t.elapsed().as_secs_f64()
        );
        r
    }
}

fn c7(runs: &Runs) -> Line {
    let t = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.anneal.enabled = false;
    cfg.loss.alpha = 1.0;
    let one = runs.run("ip fixed alpha=1.0", &cfg).collapse;
    cfg.loss.alpha = 0.3;
    let ref_ = runs.run("ip fixed alpha=0.3", &cfg).collapse;
    let secs = t.elapsed().as_secs_f64();
    Line {
        id: 7,
        name: "collapse at alpha = 1",
        pass: one < COLLAPSE_RATIO * ref_ && secs <= 600.0,
        detail: format!(
            "collapse(alpha=1) {one:.4} vs {COLLAPSE_RATIO} x collapse(alpha=0.3) = {:.4}, ratio {:.3}, {secs:.0}s",
            COLLAPSE_RATIO * ref_,
            one / ref_
        ),
    }
}

fn c8_c9(runs: &Runs) -> (Line, Line, Line) {
    let base = RunConfig::default();
    let (mut ip_ra, mut clean_ra, mut ip_sa) = (Vec::new(), Vec::new(), Vec::new());
    let mut dist_ok = true;
    let mut dists = Vec::new();
    for seed in SEEDS {
        let ip_cfg = base.with_seed(seed);
        let ip = runs.run("ip (annealed)", &ip_cfg);

        let mut clean_cfg = base.with_seed(seed);
        clean_cfg.loss.kind = LossKind::Infonce;
        clean_cfg.pretrain.attack.epsilon = 0.0;
        let clean = runs.run("infonce, eps=0", &clean_cfg);

        let mut hn_cfg = base.with_seed(seed);
        hn_cfg.loss.kind = LossKind::Hn;
        let hn = runs.run("hn (annealed)", &hn_cfg);

        let mut sym_cfg = base.with_seed(seed);
        sym_cfg.loss.kind = LossKind::Infonce;
        let sym = runs.run("infonce, adversarial", &sym_cfg);

        ip_ra.push(ip.report.ra);
        ip_sa.push(ip.report.sa);
        clean_ra.push(clean.report.ra);
        // Mean negative-pair distance of test embeddings is the collapse metric.
        let (dip, dhn, dsym) = (ip.collapse, hn.collapse, sym.collapse);
        dist_ok &= dip >= dsym && dhn >= dsym;
        dists.push(format!("seed {seed}: ip {dip:.4} hn {dhn:.4} sym {dsym:.4}"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&ip_ra) - mean(&clean_ra);
    let min_sa = ip_sa.iter().copied().fold(1.0, f64::min);
    (
        Line {
            id: 8,
            name: "robustness gap over clean-only pretraining",
            pass: gap >= RA_GAP,
            detail: format!(
                "mean RA ip {:.4} vs infonce(eps=0) {:.4}, gap {:.1} points >= {:.0}",
                mean(&ip_ra),
                mean(&clean_ra),
                100.0 * gap,
                100.0 * RA_GAP
            ),
        },
        Line {
            id: 9,
            name: "negative-pair distances vs symmetric baseline",
            pass: dist_ok,
            detail: dists.join("; "),
        },
        Line {
            id: 0,
            name: "(info) linear-probe SA after ip pretraining",
            pass: min_sa >= 0.90,
            detail: format!("min SA over seeds {min_sa:.4} >= 0.90"),
        },
    )
}

fn c10() -> Line {
    let cfg = small_config().with_seed(11);
    let (train, _) = load_datasets(&cfg, None).unwrap();
    let a = pretrain(&cfg, &train, |_, _| Ok(())).unwrap();
    let b = pretrain(&cfg, &train, |_, _| Ok(())).unwrap();
    let bits = |m: &[ainfonce::train::EpochMetrics]| {
        m.iter()
            .flat_map(|r| [r.loss_total, r.loss_clean, r.loss_adv, r.alpha, r.d_mean].map(f64::to_bits))
            .collect::<Vec<_>>()
    };
    let metrics_same = bits(&a.metrics) == bits(&b.metrics);
    let ck_a = Checkpoint::from_encoder(&a.encoder).to_bytes().unwrap();
    let ck_b = Checkpoint::from_encoder(&b.encoder).to_bytes().unwrap();
    let ckpt_same = ck_a == ck_b;
    let back = Checkpoint::from_bytes(&ck_a).unwrap().to_encoder().unwrap();
    let round_trip = back == a.encoder && Checkpoint::from_encoder(&back).to_bytes().unwrap() == ck_a;
    let cfg_rt = RunConfig::from_json(&cfg.to_json()).unwrap() == cfg;
    let emb_same = embed(&a.encoder, &train).unwrap() == embed(&back, &train).unwrap();
    let dims_ok = back.dims == EncoderDims::new(8, vec![12], 6);
    Line {
        id: 10,
        name: "determinism and persistence",
        pass: metrics_same && ckpt_same && round_trip && cfg_rt && emb_same && dims_ok,
        detail: format!(
            "metrics bit-identical {metrics_same}; checkpoints identical {ckpt_same}; checkpoint round trip {round_trip}; config round trip {cfg_rt}"
        ),
    }
}

fn main() {
    let fast_only = std::env::var_os("AINFONCE_ACCEPTANCE_FAST").is_some();
    let runs = Runs { timer: Instant::now() };
    let mut lines = vec![c1(), c2(), c3(), c4(), c5(), c6()];
    if fast_only {
        eprintln!("AINFONCE_ACCEPTANCE_FAST set: skipping criteria 7-9");
    } else {
        lines.push(c7(&runs));
        let (l8, l9, info) = c8_c9(&runs);
        lines.extend([l8, l9, info]);
    }
    lines.push(c10());
    lines.sort_by_key(|l| if l.id == 0 { usize::MAX } else { l.id });

    let mut failed = Vec::new();
    for l in &lines {
        let tag = if l.pass { "PASS" } else { "FAIL" };
        let id = if l.id == 0 { "--".to_string() } else { format!("{:>2}", l.id) };
        println!("[{tag}] {id} {}: {}", l.name, l.detail);
        if !l.pass && l.id != 0 {
            failed.push(l.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
