//! Synthetic structural models with known causal answers.

pub mod discrete;
pub mod sprite;

pub use discrete::{gen_discrete_toy, DiscreteScm, ObservedLaw, ToyGraph, Var};
pub use sprite::{
    gen_backdoor_dsprite, gen_frontdoor_dsprite, ground_truth_att_frontdoor_mc, h_weight, render_clean,
    render_sprite, position_grid, unit_linspace, BackdoorSpriteConfig, BackdoorSpriteTruth, FrontdoorSpriteConfig,
    FrontdoorSpriteTruth, McEstimate, SpriteConfig, SpriteKind,
};
