//! Batch-level objectives over the three-view layout.
//!
//! All objectives return sums over (anchor, positive) terms; anchors are
//! the two clean views of every instance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Tensor};

use super::infonce::{a_infonce_terms, infonce_sum};
use super::layout::ViewLayout;
use super::similarity::{sim, sim_alpha};
use super::weights::{debiased_negative_mass, pair_weights, WeightMode};

/// Which contrastive objective drives pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Symmetric InfoNCE over clean–clean and clean–adversarial pairs.
    Infonce,
    /// Inferior positives: asymmetric similarity on the adversarial pair.
    Ip,
    /// Hard negatives: reweighted, debiased negative mass.
    Hn,
    /// Both.
    IpHn,
}

impl LossKind {
    pub fn uses_alpha(self) -> bool {
        !matches!(self, LossKind::Infonce)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub temperature: f64,
    /// Fixed α, also used during annealing warm-up.
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub weight_mode: WeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ip,
            temperature: 0.5,
            alpha: 0.3,
            gamma: 1.0,
            tau: 0.1,
            weight_mode: WeightMode::Similarity,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("loss.temperature must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("loss.alpha must lie in [0, 1]"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("loss.gamma must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config("loss.tau must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// How similarities are differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimMode {
    /// Gradient split by α between anchor and candidate.
    Asymmetric,
    /// Plain dot-product gradients regardless of α. The value is identical;
    /// used when differentiating with respect to inputs.
    Symmetric,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Tensor,
    /// Terms whose positive is the other clean view.
    pub clean: Tensor,
    /// Terms whose positive is the adversarial view (unscaled by γ).
    pub adv: Tensor,
}

struct Pairs {
    anchors: Vec<usize>,
    clean_pos: Vec<usize>,
    adv_pos: Vec<usize>,
    negatives: Vec<Vec<usize>>,
}

impl Pairs {
    fn new(layout: &ViewLayout) -> Self {
        let anchors = layout.anchors();
        Self {
            clean_pos: anchors.iter().map(|&a| layout.clean_partner(a)).collect(),
            adv_pos: anchors.iter().map(|&a| layout.adversarial(a)).collect(),
            negatives: anchors.iter().map(|&a| layout.negatives(a)).collect(),
            anchors,
        }
    }

    fn n(&self) -> usize {
        self.negatives.first().map_or(0, Vec::len)
    }
}

fn check_rows(z: Tensor, layout: &ViewLayout) -> Result<()> {
    if z.rows() != layout.rows() {
        return Err(Error::Domain {
            op: "contrastive loss",
            msg: format!(
                "expected {} embedding rows (three views of {} instances), got {}; \
                 adversarial views missing?",
                layout.rows(),
                layout.instances(),
                z.rows()
            ),
        });
    }
    Ok(())
}

fn anchor_sims(g: &mut Graph, z: Tensor, pairs: &Pairs, alpha: f64, mode: SimMode) -> Result<Tensor> {
    let za = g.select_rows(z, &pairs.anchors)?;
    match mode {
        SimMode::Asymmetric => sim_alpha(g, za, z, alpha),
        SimMode::Symmetric => sim(g, za, z),
    }
}

fn ones(rows: usize, cols: usize) -> Matrix {
    Matrix::filled(rows, cols, 1.0)
}

fn uniform_terms(g: &mut Graph, sims: Tensor, pos: &[usize], pairs: &Pairs, t: f64) -> Result<Tensor> {
    let a = pairs.anchors.len();
    let terms = a_infonce_terms(g, sims, pos, &pairs.negatives, &ones(a, 1), &ones(a, pairs.n()), t)?;
    g.sum(terms)
}

fn combine(g: &mut Graph, clean: Tensor, adv: Tensor, gamma: f64) -> Result<LossParts> {
    let scaled = g.scale(adv, gamma)?;
    let total = g.add(clean, scaled)?;
    Ok(LossParts { total, clean, adv })
}

/// Symmetric baseline: plain InfoNCE on every (anchor, positive) pair,
/// adversarial pairs weighted by `gamma`.
pub fn symmetric_infonce(g: &mut Graph, z: Tensor, layout: &ViewLayout, gamma: f64, t: f64) -> Result<LossParts> {
    check_rows(z, layout)?;
    let p = Pairs::new(layout);
    let clean = infonce_sum(g, z, &p.anchors, &p.clean_pos, &p.negatives, t)?;
    let adv = infonce_sum(g, z, &p.anchors, &p.adv_pos, &p.negatives, t)?;
    combine(g, clean, adv, gamma)
}

/// Inferior positives: symmetric clean term plus γ times the adversarial
/// term with asymmetric similarity `alpha`.
pub fn loss_ip(
    g: &mut Graph,
    z: Tensor,
    layout: &ViewLayout,
    alpha: f64,
    gamma: f64,
    t: f64,
    mode: SimMode,
) -> Result<LossParts> {
    check_rows(z, layout)?;
    let p = Pairs::new(layout);
    let s_sym = anchor_sims(g, z, &p, 0.5, mode)?;
    let clean = uniform_terms(g, s_sym, &p.clean_pos, &p, t)?;
    let s_adv = anchor_sims(g, z, &p, alpha, mode)?;
    let adv = uniform_terms(g, s_adv, &p.adv_pos, &p, t)?;
    combine(g, clean, adv, gamma)
}

/// Debiased, reweighted terms for the positive column `which` (0 = clean
/// partner, 1 = adversarial view) from an `A×V` similarity block.
fn hard_negative_terms(
    g: &mut Graph,
    sims: Tensor,
    pairs: &Pairs,
    which: &[usize],
    tau: f64,
    t: f64,
    weight_mode: WeightMode,
) -> Result<Vec<Tensor>> {
    let a = pairs.anchors.len();
    let rows: Vec<usize> = (0..a).collect();
    let pos_cols: Vec<Vec<usize>> = pairs
        .clean_pos
        .iter()
        .zip(&pairs.adv_pos)
        .map(|(&c, &v)| vec![c, v])
        .collect();
    let pos = g.gather(sims, &rows, &pos_cols)?;
    let neg = g.gather(sims, &rows, &pairs.negatives)?;
    let w_neg = pair_weights(g.value(neg), t, weight_mode);
    let mass = debiased_negative_mass(g, neg, pos, &w_neg, &ones(a, 2), tau, t)?;

    let mut out = Vec::with_capacity(which.len());
    for &col in which {
        let s = g.gather(pos, &rows, &vec![vec![col]; a])?;
        let s = g.scale(s, 1.0 / t)?;
        let e = g.exp(s)?;
        let denom = g.add(e, mass)?;
        let log_denom = g.log(denom)?;
        let log_num = g.log(e)?;
        let terms = g.sub(log_denom, log_num)?;
        out.push(g.sum(terms)?);
    }
    Ok(out)
}

/// Hard negatives: every (anchor, positive) pair with α-asymmetric
/// similarity, similarity-weighted negatives and the debiased mass.
#[allow(clippy::too_many_arguments)]
pub fn loss_hn(
    g: &mut Graph,
    z: Tensor,
    layout: &ViewLayout,
    alpha: f64,
    tau: f64,
    t: f64,
    weight_mode: WeightMode,
    mode: SimMode,
) -> Result<LossParts> {
    check_rows(z, layout)?;
    let p = Pairs::new(layout);
    let sims = anchor_sims(g, z, &p, alpha, mode)?;
    let parts = hard_negative_terms(g, sims, &p, &[0, 1], tau, t, weight_mode)?;
    combine(g, parts[0], parts[1], 1.0)
}

/// Combined: symmetric clean term and α-asymmetric adversarial term, both
/// with debiased, reweighted negatives.
#[allow(clippy::too_many_arguments)]
pub fn loss_ip_hn(
    g: &mut Graph,
    z: Tensor,
    layout: &ViewLayout,
    alpha: f64,
    gamma: f64,
    tau: f64,
    t: f64,
    weight_mode: WeightMode,
    mode: SimMode,
) -> Result<LossParts> {
    check_rows(z, layout)?;
    let p = Pairs::new(layout);
    let s_sym = anchor_sims(g, z, &p, 0.5, mode)?;
    let clean = hard_negative_terms(g, s_sym, &p, &[0], tau, t, weight_mode)?[0];
    let s_adv = anchor_sims(g, z, &p, alpha, mode)?;
    let adv = hard_negative_terms(g, s_adv, &p, &[1], tau, t, weight_mode)?[0];
    combine(g, clean, adv, gamma)
}

/// Dispatches on `cfg.kind` with the α in effect for this batch.
pub fn batch_loss(
    g: &mut Graph,
    z: Tensor,
    layout: &ViewLayout,
    cfg: &LossConfig,
    alpha: f64,
    mode: SimMode,
) -> Result<LossParts> {
    let t = cfg.temperature;
    match cfg.kind {
        LossKind::Infonce => symmetric_infonce(g, z, layout, cfg.gamma, t),
        LossKind::Ip => loss_ip(g, z, layout, alpha, cfg.gamma, t, mode),
        LossKind::Hn => loss_hn(g, z, layout, alpha, cfg.tau, t, cfg.weight_mode, mode),
        LossKind::IpHn => loss_ip_hn(
            g,
            z,
            layout,
            alpha,
            cfg.gamma,
            cfg.tau,
            t,
            cfg.weight_mode,
            mode,
        ),
    }
}
