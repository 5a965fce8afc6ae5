//! Per-UE fine-tuning of the global model, monitored fallback and the
//! individual-vs-general performance sweep.

use alloc::vec::Vec;

use crate::autoencoder::{to_db, Autoencoder, SampleSet};
use crate::error::{Error, Result};
use crate::feel::Federation;
use crate::nn::ParamSet;
use crate::quant::BASELINE_BITS;
use crate::rng::{child_rng, stream};
use crate::trainer::{run_epochs, Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizationConfig {
    pub epochs: usize,
    /// Held fixed for the whole fine-tuning run.
    pub learning_rate: f64,
    /// Freshest share of the validation split used by the fallback monitor.
    pub monitor_fraction: f64,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            monitor_fraction: 1.0,
        }
    }
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("fine-tune learning rate must be positive".into()));
        }
        if !(self.monitor_fraction > 0.0 && self.monitor_fraction <= 1.0) {
            return Err(Error::InvalidConfig("monitor_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Fine-tunes every parameter of `global` on `train` and returns a copy after
/// each epoch count listed in `checkpoints` (ascending).
pub fn fine_tune_snapshots(
    ae: &Autoencoder,
    global: &ParamSet,
    train: &SampleSet,
    pc: &PersonalizationConfig,
    tc: &TrainConfig,
    checkpoints: &[usize],
    seed: u64,
    ue_id: u32,
) -> Result<Vec<ParamSet>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if checkpoints.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::InvalidConfig("epoch grid must be ascending".into()));
    }
    let mut rng = child_rng(seed, &[stream::FINETUNE, u64::from(ue_id)]);
    let mut w = global.clone();
    let mut opt = Optimizer::new(tc.optimizer, &w);
    let mut done = 0;
    let mut out = Vec::with_capacity(checkpoints.len());
    for &target in checkpoints {
        run_epochs(
            ae,
            &mut w,
            train,
            tc,
            pc.learning_rate,
            target - done,
            None,
            &mut opt,
            &mut rng,
        )?;
        done = target;
        out.push(w.clone());
    }
    Ok(out)
}

/// `pc.epochs` epochs of local training from `global`; `global` is untouched.
pub fn fine_tune(
    ae: &Autoencoder,
    global: &ParamSet,
    train: &SampleSet,
    pc: &PersonalizationConfig,
    tc: &TrainConfig,
    seed: u64,
    ue_id: u32,
) -> Result<ParamSet> {
    let mut v = fine_tune_snapshots(ae, global, train, pc, tc, &[pc.epochs], seed, ue_id)?;
    Ok(v.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Personalized,
    Global,
}

/// Keeps the personalized model only if it is strictly better on `fresh`.
pub fn monitor_and_select(
    ae: &Autoencoder,
    personalized: &ParamSet,
    global: &ParamSet,
    fresh: &SampleSet,
) -> Result<(ParamSet, Selection)> {
    let p = ae.evaluate_nmse(personalized, fresh)?;
    let g = ae.evaluate_nmse(global, fresh)?;
    Ok(if p < g {
        (personalized.clone(), Selection::Personalized)
    } else {
        (global.clone(), Selection::Global)
    })
}

/// One personalized model per UE, in federation order.
pub fn personalize_all(
    ae: &Autoencoder,
    global: &ParamSet,
    fed: &Federation,
    pc: &PersonalizationConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<Vec<ParamSet>> {
    fed.clients
        .iter()
        .map(|c| fine_tune(ae, global, &c.train, pc, tc, seed, c.ue_id))
        .collect()
}

/// Bits for returning a personalized decoder to the BS at 32-bit precision.
pub fn decoder_upload_bits(ps: &ParamSet) -> u64 {
    ps.entries()
        .iter()
        .filter(|e| e.name.starts_with("dec."))
        .map(|e| BASELINE_BITS * e.tensor.len() as u64)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UeTradeoff {
    pub ue_id: u32,
    /// Linear NMSE on the UE's own test split.
    pub own_nmse: f64,
    /// Linear NMSE on the mixed test set.
    pub mixed_nmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub epochs: usize,
    pub i_nmse_db: f64,
    pub g_nmse_db: f64,
    pub per_ue: Vec<UeTradeoff>,
}

/// Fine-tunes every UE over the epoch grid and records I-NMSE and G-NMSE.
pub fn tradeoff_sweep(
    ae: &Autoencoder,
    global: &ParamSet,
    fed: &Federation,
    grid: &[usize],
    pc: &PersonalizationConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<Vec<TradeoffRow>> {
    if grid.first() != Some(&0) || grid.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InvalidConfig(
            "epoch grid must start at 0 and increase strictly".into(),
        ));
    }
    let mut per_ue: Vec<Vec<UeTradeoff>> = (0..grid.len()).map(|_| Vec::new()).collect();
    for c in &fed.clients {
        let snaps = fine_tune_snapshots(ae, global, &c.train, pc, tc, grid, seed, c.ue_id)?;
        for (row, w) in per_ue.iter_mut().zip(&snaps) {
            row.push(UeTradeoff {
                ue_id: c.ue_id,
                own_nmse: ae.evaluate_nmse(w, &c.test)?,
                mixed_nmse: ae.evaluate_nmse(w, &fed.mixed_test)?,
            });
        }
    }
    Ok(grid
        .iter()
        .zip(per_ue)
        .map(|(&epochs, ues)| {
            let k = ues.len() as f64;
            TradeoffRow {
                epochs,
                i_nmse_db: to_db(ues.iter().map(|u| u.own_nmse).sum::<f64>() / k),
                g_nmse_db: to_db(ues.iter().map(|u| u.mixed_nmse).sum::<f64>() / k),
                per_ue: ues,
            }
        })
        .collect())
}
