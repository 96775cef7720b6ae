//! Analytic FLOP accounting of the adapter for one streaming pass.
//!
//! One multiply-add counts as 2 FLOPs; softmax, layer norm and GELU count a
//! fixed number of FLOPs per element. Keys and values are projected once
//! per slot and cached, so each step projects only the newest frame and
//! the newest queries, while attention products span the whole bank.

use std::collections::BTreeMap;

use crate::bank::Strategy;
use crate::config::AdapterConfig;
use crate::error::{ReefError, Result};
use crate::model::AttentionCounter;
use crate::spatial::build_anchor_grid;

const SOFTMAX_PER_ELEMENT: u64 = 3;
const NORM_PER_ELEMENT: u64 = 5;
const GELU_PER_ELEMENT: u64 = 8;
const COSINE_MACS_PER_ELEMENT: u64 = 3;

/// Component names in report order.
pub const COMPONENTS: [&str; 11] = [
    "positional",
    "spatial_scorer",
    "spatial_select",
    "temporal_scorer",
    "topk_sampling",
    "compression",
    "cross_attention",
    "cross_projection",
    "self_attention",
    "ffn",
    "norms",
];

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub per_component: BTreeMap<String, u64>,
    pub total: u64,
    pub frames: usize,
    pub config_echo: AdapterConfig,
}

impl FlopsReport {
    pub fn component(&self, name: &str) -> u64 {
        self.per_component.get(name).copied().unwrap_or(0)
    }
}

/// Slots held by the visual bank after step `t` (0-based).
fn occupancy(cfg: &AdapterConfig, t: usize) -> usize {
    match cfg.strategy {
        Strategy::AvgPool => 1,
        _ => (t + 1).min(cfg.bank_capacity),
    }
}

fn compresses(cfg: &AdapterConfig, t: usize) -> bool {
    match cfg.strategy {
        Strategy::AvgPool => t >= 1,
        _ => t >= cfg.bank_capacity,
    }
}

/// Tokens each slot contributes to the cross-attention bank.
fn view_tokens(cfg: &AdapterConfig) -> usize {
    if cfg.stf_enabled() {
        cfg.k_spat
    } else {
        cfg.tokens
    }
}

/// Multiply-adds of a scorer over `g` tokens: projection, global context,
/// and the output layer on `[local, global]`.
fn scorer_macs(g: u64, d: u64) -> u64 {
    let h = d / 2;
    g * d * h + g * h + g * 2 * h
}

/// Attention products the instrumented counter sees, per block and step
/// summed: `QKᵀ` and `AV` over the bank.
pub fn attention_product_macs(cfg: &AdapterConfig, frames: usize) -> AttentionCounter {
    let (d, lq, blocks) = (cfg.dim as u64, cfg.queries as u64, cfg.blocks as u64);
    let v = view_tokens(cfg) as u64;
    let mut counter = AttentionCounter::default();
    for t in 0..frames {
        let m = occupancy(cfg, t) as u64;
        counter.cross_macs += blocks * 2 * lq * (m * v) * d;
        counter.self_macs += blocks * 2 * lq * (m * lq) * d;
    }
    counter
}

pub fn count_adapter_flops(cfg: &AdapterConfig, frames: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    if frames == 0 {
        return Err(ReefError::Argument("a pass needs at least one frame".into()));
    }
    let (d, n, lq, blocks) = (cfg.dim as u64, cfg.tokens as u64, cfg.queries as u64, cfg.blocks as u64);
    let v = view_tokens(cfg) as u64;
    let cap = cfg.bank_capacity as u64;
    let samples = cfg.n_samples as u64;
    let mut macs: BTreeMap<&str, u64> = COMPONENTS.iter().map(|&c| (c, 0)).collect();
    let mut elems: BTreeMap<&str, u64> = BTreeMap::new();
    let add = |map: &mut BTreeMap<&str, u64>, k: &'static str, x: u64| *map.entry(k).or_default() += x;

    let anchors = if cfg.stf_enabled() {
        Some(build_anchor_grid(cfg.tokens, cfg.k_spat, cfg.gamma)?.n_anchors() as u64)
    } else {
        None
    };
    for t in 0..frames {
        let m = occupancy(cfg, t) as u64;
        add(&mut elems, "positional", n * d);
        if let Some(h) = anchors {
            add(&mut macs, "spatial_scorer", scorer_macs(n, d));
            add(&mut macs, "spatial_select", h * n);
            add(&mut macs, "topk_sampling", samples * h);
        }
        if compresses(cfg, t) {
            let slots = cap + 1;
            match cfg.strategy {
                Strategy::Fifo => {}
                Strategy::AvgPool => {
                    add(&mut macs, "compression", 2 * v * d + blocks * 2 * lq * d);
                }
                Strategy::Mbc | Strategy::Rtc => {
                    add(&mut macs, "compression", cap * COSINE_MACS_PER_ELEMENT * (v * d + blocks * lq * d));
                    add(&mut macs, "compression", (v + blocks * lq) * d);
                    if cfg.strategy == Strategy::Rtc {
                        add(&mut elems, "temporal_scorer", slots * n * d);
                        add(&mut macs, "temporal_scorer", scorer_macs(slots, d));
                        add(&mut elems, "temporal_scorer", 3 * slots + 4 * cap);
                    }
                }
                Strategy::Tts => {
                    add(&mut elems, "temporal_scorer", slots * n * d);
                    add(&mut macs, "temporal_scorer", scorer_macs(slots, d));
                    add(&mut macs, "topk_sampling", samples * slots * cap);
                }
            }
        }
        // Cached keys and values of the new view, attention over the bank.
        add(&mut macs, "cross_attention", blocks * (2 * v * d * d + 2 * lq * m * v * d));
        add(&mut elems, "cross_attention", blocks * SOFTMAX_PER_ELEMENT * cfg.heads as u64 * lq * m * v);
        add(&mut macs, "cross_projection", blocks * 2 * lq * d * d);
        add(
            &mut macs,
            "self_attention",
            blocks * (4 * lq * d * d + 2 * lq * m * lq * d),
        );
        add(&mut elems, "self_attention", blocks * SOFTMAX_PER_ELEMENT * cfg.heads as u64 * lq * m * lq);
        add(&mut macs, "ffn", blocks * 8 * lq * d * d);
        add(&mut elems, "ffn", blocks * GELU_PER_ELEMENT * lq * 4 * d);
        add(&mut elems, "norms", blocks * 3 * NORM_PER_ELEMENT * lq * d);
    }
    let per_component: BTreeMap<String, u64> = COMPONENTS
        .iter()
        .map(|&c| {
            let total = 2 * macs.get(c).copied().unwrap_or(0) + elems.get(c).copied().unwrap_or(0);
            (c.to_string(), total)
        })
        .collect();
    let total = per_component.values().sum();
    Ok(FlopsReport {
        per_component,
        total,
        frames,
        config_echo: cfg.clone(),
    })
}

/// Percentage change from `a` to `b`; negative means `b` is cheaper.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsDelta {
    pub per_component: BTreeMap<String, f64>,
    pub total: f64,
}

fn percent(a: u64, b: u64) -> f64 {
    if a == 0 {
        if b == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (b as f64 - a as f64) / a as f64 * 100.0
    }
}

pub fn compare_configs(a: &FlopsReport, b: &FlopsReport) -> FlopsDelta {
    FlopsDelta {
        per_component: COMPONENTS
            .iter()
            .map(|&c| (c.to_string(), percent(a.component(c), b.component(c))))
            .collect(),
        total: percent(a.total, b.total),
    }
}

/// Frames of the full-scale pass.
pub const FULL_SCALE_FRAMES: usize = 500;

/// Adapter shaped like a BLIP-2 style Q-Former over ViT-G/14 features.
pub fn full_scale_config(strategy: Strategy, k_spat: usize) -> AdapterConfig {
    AdapterConfig {
        dim: 768,
        tokens: 256,
        queries: 32,
        bank_capacity: 10,
        k_spat,
        gamma: 2,
        heads: 12,
        blocks: 12,
        strategy,
        ..AdapterConfig::default()
    }
}
