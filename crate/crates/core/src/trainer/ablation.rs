//! Ablation variants over a shared seed set.

use std::io::Write;

use serde::Serialize;

use super::{run::EpochRecord, train_run, RunOptions, StreamMode, TrainConfig, TrainError};
use crate::data::LabeledImageSet;
use crate::numerics::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// the base config as given
    Baseline,
    Tri,
    DualOnlineTarget,
    DualOnlineOnline,
    InstanceOnly,
    ClusterOnly,
    NoPredictor,
    NoStopGradient,
    /// cluster loss without the `H(Q)` term
    NoEntropy,
}

impl Variant {
    /// Rows of the comparison table.
    pub const TABLE: [Variant; 8] = [
        Variant::Baseline,
        Variant::Tri,
        Variant::DualOnlineTarget,
        Variant::DualOnlineOnline,
        Variant::InstanceOnly,
        Variant::ClusterOnly,
        Variant::NoPredictor,
        Variant::NoStopGradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Tri => "tri_stream",
            Variant::DualOnlineTarget => "dual_online_target",
            Variant::DualOnlineOnline => "dual_online_online",
            Variant::InstanceOnly => "instance_only",
            Variant::ClusterOnly => "cluster_only",
            Variant::NoPredictor => "no_predictor",
            Variant::NoStopGradient => "no_stop_gradient",
            Variant::NoEntropy => "no_entropy",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let sw = &mut cfg.ablation;
        match self {
            Variant::Baseline => {}
            Variant::Tri => sw.stream_mode = StreamMode::Tri,
            Variant::DualOnlineTarget => sw.stream_mode = StreamMode::DualOnlineTarget,
            Variant::DualOnlineOnline => sw.stream_mode = StreamMode::DualOnlineOnline,
            Variant::InstanceOnly => {
                sw.use_instance_loss = true;
                sw.use_cluster_loss = false;
            }
            Variant::ClusterOnly => {
                sw.use_instance_loss = false;
                sw.use_cluster_loss = true;
            }
            Variant::NoPredictor => sw.use_predictor = false,
            Variant::NoStopGradient => sw.use_stop_gradient = false,
            Variant::NoEntropy => sw.use_entropy = false,
        }
        cfg
    }
}

/// Median-over-seeds scores of one variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
    pub largest_cluster_share: f64,
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Final epoch record of one variant at one seed.
pub fn run_variant<T: Real>(
    base: &TrainConfig,
    data: &LabeledImageSet,
    variant: Variant,
    seed: u64,
) -> Result<Vec<EpochRecord>, TrainError> {
    let mut cfg = variant.apply(base);
    cfg.seed = seed;
    Ok(train_run::<T>(&cfg, data, &RunOptions::default())?.records)
}

/// Runs every variant for every seed and reports medians of the final
/// epoch's scores.
pub fn run_ablation<T: Real>(
    base: &TrainConfig,
    data: &LabeledImageSet,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<Vec<AblationRow>, TrainError> {
    if seeds.is_empty() {
        return Err(super::config_err("seeds", "need at least one seed"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut finals = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let records = run_variant::<T>(base, data, variant, seed)?;
            let last = records
                .last()
                .cloned()
                .ok_or_else(|| super::config_err("epochs", "ablation needs at least one epoch"))?;
            log::info!("{} seed {seed}: nmi {:.4} acc {:.4}", variant.name(), last.nmi, last.acc);
            finals.push(last);
        }
        let pick = |f: fn(&EpochRecord) -> f64| median(&finals.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            seeds: seeds.len(),
            nmi: pick(|r| r.nmi),
            acc: pick(|r| r.acc),
            ari: pick(|r| r.ari),
            largest_cluster_share: pick(|r| r.largest_cluster_share),
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
