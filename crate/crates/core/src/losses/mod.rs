//! The asymmetric InfoNCE loss family.

mod anneal;
mod infonce;
mod layout;
mod objectives;
mod similarity;
mod weights;

pub use anneal::{anneal_alpha, AnnealConfig, AnnealState, ALPHA_MAX};
pub use infonce::{a_infonce, a_infonce_terms, infonce, infonce_sum};
pub use layout::{ViewKind, ViewLayout};
pub use objectives::{
    batch_loss, loss_hn, loss_ip, loss_ip_hn, symmetric_infonce, LossConfig, LossKind, LossParts,
    SimMode,
};
pub use similarity::{pairwise_cosine, sim, sim_alpha, UNIT_NORM_TOL};
pub use weights::{
    debiased_negative_mass, lambda_pos_coeff, negative_mass_floor, pair_weights, WeightMode,
};
