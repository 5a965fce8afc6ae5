//! FedAvg-based federated edge learning with quantized transport, and the
//! centralized (CL) and individual (IL) baselines.

use alloc::vec;
use alloc::vec::Vec;

use crate::autoencoder::{to_db, Autoencoder, SampleSet};
use crate::channel::UeDataset;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::quant::{transmit, QuantPolicy};
use crate::rng::{child_rng, stream, SimRng};
use crate::trainer::{
    batches_per_epoch, local_update, run_epochs, train_steps, BatchStream, Optimizer,
    PlateauSchedule, TrainConfig,
};

/// One UE's prepared splits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub ue_id: u32,
    pub train: SampleSet,
    pub val: SampleSet,
    pub test: SampleSet,
}

impl ClientData {
    pub fn from_dataset(ds: &UeDataset) -> Result<Self> {
        Ok(Self {
            ue_id: ds.ue_id,
            train: SampleSet::train(ds)?,
            val: SampleSet::val(ds)?,
            test: SampleSet::test(ds)?,
        })
    }
}

/// All UEs plus the BS-side mixed validation and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub clients: Vec<ClientData>,
    pub mixed_val: SampleSet,
    pub mixed_test: SampleSet,
}

impl Federation {
    pub fn new(clients: Vec<ClientData>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mixed_val = SampleSet::concat(clients.iter().map(|c| &c.val))?;
        let mixed_test = SampleSet::concat(clients.iter().map(|c| &c.test))?;
        Ok(Self {
            clients,
            mixed_val,
            mixed_test,
        })
    }

    pub fn from_datasets(datasets: &[UeDataset]) -> Result<Self> {
        Self::new(
            datasets
                .iter()
                .map(ClientData::from_dataset)
                .collect::<Result<_>>()?,
        )
    }

    pub fn num_ues(&self) -> usize {
        self.clients.len()
    }

    pub fn total_train(&self) -> usize {
        self.clients.iter().map(|c| c.train.len()).sum()
    }

    fn client(&self, ue_id: u32) -> Result<&ClientData> {
        self.clients
            .iter()
            .find(|c| c.ue_id == ue_id)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown UE id {ue_id}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationDenominator {
    /// Sum of training-set sizes over all K UEs (literal FedAvg formula).
    TotalAllUes,
    /// Sum over the UEs scheduled in the round.
    TotalScheduled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeelConfig {
    pub num_ues: usize,
    pub scheduled_per_round: usize,
    pub rounds: usize,
    pub train: TrainConfig,
    pub quant: QuantPolicy,
    pub aggregation: AggregationDenominator,
    /// Central pretraining epochs on the pretrain scenario; `None` starts
    /// from the random initialization.
    pub pretrain_epochs: Option<usize>,
}

impl Default for FeelConfig {
    fn default() -> Self {
        Self {
            num_ues: 10,
            scheduled_per_round: 3,
            rounds: 300,
            train: TrainConfig::default(),
            quant: QuantPolicy::unquantized(),
            aggregation: AggregationDenominator::TotalAllUes,
            pretrain_epochs: None,
        }
    }
}

impl FeelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scheduled_per_round == 0 || self.scheduled_per_round > self.num_ues {
            return Err(Error::Schedule {
                requested: self.scheduled_per_round,
                available: self.num_ues,
            });
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        self.train.validate()?;
        self.quant.validate()
    }
}

/// `m` distinct UE ids drawn uniformly from `1..=k`, ascending.
pub fn schedule_ues(rng: &mut SimRng, k: usize, m: usize) -> Result<Vec<u32>> {
    if m > k {
        return Err(Error::Schedule {
            requested: m,
            available: k,
        });
    }
    let mut ids: Vec<u32> = rand::seq::index::sample(rng, k, m)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// A dequantized update as received by the BS.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub ue_id: u32,
    pub delta: Vec<f64>,
    pub num_samples: usize,
}

/// `w + sum_i (|D_i| / |D|) delta_i`, summed in ascending UE-id order.
/// `total_all` is the training-set size summed over every UE.
pub fn aggregate(
    w: &[f64],
    updates: &[ClientUpdate],
    total_all: usize,
    mode: AggregationDenominator,
) -> Result<Vec<f64>> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.ue_id);
    let denom = match mode {
        AggregationDenominator::TotalAllUes => total_all,
        AggregationDenominator::TotalScheduled => order.iter().map(|u| u.num_samples).sum(),
    };
    if denom == 0 || order.iter().any(|u| u.num_samples == 0) {
        return Err(Error::InvalidConfig("aggregation sizes must be positive".into()));
    }
    let mut acc = vec![0.0; w.len()];
    for u in order {
        if u.delta.len() != w.len() {
            return Err(Error::LengthMismatch {
                expected: w.len(),
                actual: u.delta.len(),
            });
        }
        let c = u.num_samples as f64 / denom as f64;
        for (a, d) in acc.iter_mut().zip(&u.delta) {
            *a += c * d;
        }
    }
    Ok(w.iter().zip(&acc).map(|(a, b)| a + b).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub scheduled: Vec<u32>,
    pub mean_local_loss: f64,
    /// Validation G-NMSE of the unquantized global model after aggregation.
    pub gnmse_db: f64,
    pub cum_uplink_bits: u64,
    pub cum_downlink_bits: u64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeelOutcome {
    pub history: Vec<RoundRecord>,
    /// Unquantized global model held by the BS.
    pub global: ParamSet,
    /// Final global model as received over the downlink.
    pub broadcast: ParamSet,
    /// Gradient steps taken by all clients together.
    pub total_steps: usize,
}

/// G-NMSE (linear) of one model on a mixed set.
pub fn g_nmse(ae: &Autoencoder, ps: &ParamSet, mixed: &SampleSet) -> Result<f64> {
    ae.evaluate_nmse(ps, mixed)
}

/// Mean over UEs of the NMSE of `model_for(ue)` on that UE's test split.
pub fn i_nmse<'a>(
    ae: &Autoencoder,
    fed: &Federation,
    mut model_for: impl FnMut(usize) -> &'a ParamSet,
) -> Result<f64> {
    let mut acc = 0.0;
    for (i, c) in fed.clients.iter().enumerate() {
        acc += ae.evaluate_nmse(model_for(i), &c.test)?;
    }
    Ok(acc / fed.num_ues() as f64)
}

/// Mean over models of their NMSE on the mixed test set.
pub fn mean_g_nmse(ae: &Autoencoder, models: &[ParamSet], mixed: &SampleSet) -> Result<f64> {
    let mut acc = 0.0;
    for m in models {
        acc += ae.evaluate_nmse(m, mixed)?;
    }
    Ok(acc / models.len() as f64)
}

/// Gradient steps a FEEL run will take, replaying its schedule.
pub fn planned_steps(cfg: &FeelConfig, fed: &Federation, seed: u64) -> Result<usize> {
    let mut sched = child_rng(seed, &[stream::SCHEDULE]);
    let mut total = 0;
    for _ in 0..cfg.rounds {
        for id in schedule_ues(&mut sched, fed.num_ues(), cfg.scheduled_per_round)? {
            let n = fed.client(id)?.train.len();
            total += cfg.train.local_epochs * batches_per_epoch(n, cfg.train.batch_size);
        }
    }
    Ok(total)
}

/// Centrally trains `w0` on pretraining data with a fresh Adam state.
pub fn pretrain_global(
    ae: &Autoencoder,
    w0: &ParamSet,
    data: &SampleSet,
    tc: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<ParamSet> {
    let mut w = w0.clone();
    if epochs == 0 {
        return Ok(w);
    }
    let mut rng = child_rng(seed, &[stream::PRETRAIN]);
    let mut opt = Optimizer::new(tc.optimizer, &w);
    run_epochs(ae, &mut w, data, tc, tc.learning_rate, epochs, None, &mut opt, &mut rng)?;
    Ok(w)
}

/// Algorithm-1 FedAvg with quantized downlink broadcast and uplink updates.
pub fn run_feel(
    ae: &Autoencoder,
    w0: &ParamSet,
    fed: &Federation,
    cfg: &FeelConfig,
    seed: u64,
) -> Result<FeelOutcome> {
    cfg.validate()?;
    if fed.num_ues() != cfg.num_ues {
        return Err(Error::InvalidConfig(alloc::format!(
            "config expects {} UEs, federation has {}",
            cfg.num_ues,
            fed.num_ues()
        )));
    }
    let template = w0.clone();
    let total_all = fed.total_train();
    let mut w = w0.flatten();
    let mut sched = child_rng(seed, &[stream::SCHEDULE]);
    let mut lr_sched = PlateauSchedule::new(&cfg.train);
    let stochastic = cfg.quant.stochastic_rounding;
    let (mut cum_up, mut cum_down) = (0u64, 0u64);
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut total_steps = 0;
    for t in 0..cfg.rounds {
        let ids = schedule_ues(&mut sched, cfg.num_ues, cfg.scheduled_per_round)?;
        let lr = lr_sched.lr();
        let mut qrng = child_rng(seed, &[stream::QUANT, t as u64, 0]);
        let (w_down, down_bits) = transmit(
            &w,
            &template,
            cfg.quant.downlink_bits,
            stochastic.then_some(&mut qrng),
        )?;
        cum_down += down_bits;
        let start = ParamSet::unflatten(&w_down, &template)?;
        let mut updates = Vec::with_capacity(ids.len());
        let mut loss_acc = 0.0;
        for &id in &ids {
            let client = fed.client(id)?;
            let mut rng = child_rng(seed, &[stream::LOCAL, t as u64, u64::from(id)]);
            let upd = local_update(ae, &start, &client.train, &cfg.train, lr, &mut rng)?;
            total_steps +=
                cfg.train.local_epochs * batches_per_epoch(client.train.len(), cfg.train.batch_size);
            loss_acc += upd.losses.last().copied().unwrap_or(0.0);
            let mut urng = child_rng(seed, &[stream::QUANT, t as u64, u64::from(id)]);
            let (delta, up_bits) = transmit(
                &upd.delta,
                &template,
                cfg.quant.uplink_bits,
                stochastic.then_some(&mut urng),
            )?;
            cum_up += up_bits;
            updates.push(ClientUpdate {
                ue_id: id,
                delta,
                num_samples: client.train.len(),
            });
        }
        w = aggregate(&w, &updates, total_all, cfg.aggregation)?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("global model after round {t}")));
        }
        let global = ParamSet::unflatten(&w, &template)?;
        let gnmse_db = to_db(g_nmse(ae, &global, &fed.mixed_val)?);
        lr_sched.observe(gnmse_db);
        history.push(RoundRecord {
            round: t + 1,
            scheduled: ids.clone(),
            mean_local_loss: loss_acc / ids.len() as f64,
            gnmse_db,
            cum_uplink_bits: cum_up,
            cum_downlink_bits: cum_down,
            learning_rate: lr,
        });
    }
    let global = ParamSet::unflatten(&w, &template)?;
    let mut frng = child_rng(seed, &[stream::QUANT, cfg.rounds as u64, 0]);
    let (w_final, _) = transmit(
        &w,
        &template,
        cfg.quant.downlink_bits,
        stochastic.then_some(&mut frng),
    )?;
    Ok(FeelOutcome {
        history,
        broadcast: ParamSet::unflatten(&w_final, &template)?,
        global,
        total_steps,
    })
}

/// Trains one model for `total_steps` steps split into `periods` equal
/// stretches, with the plateau learning-rate rule evaluated on `val` after
/// each stretch.
#[allow(clippy::too_many_arguments)]
fn train_budgeted(
    ae: &Autoencoder,
    w0: &ParamSet,
    train: &SampleSet,
    val: &SampleSet,
    tc: &TrainConfig,
    total_steps: usize,
    periods: usize,
    rng: &mut SimRng,
) -> Result<(ParamSet, Vec<f64>)> {
    let mut w = w0.clone();
    let mut opt = Optimizer::new(tc.optimizer, &w);
    let mut stream = BatchStream::new(train.len(), tc.batch_size);
    let mut sched = PlateauSchedule::new(tc);
    let periods = periods.max(1);
    let mut curve = Vec::with_capacity(periods);
    let mut done = 0;
    for p in 0..periods {
        let target = total_steps * (p + 1) / periods;
        let steps = target - done;
        done = target;
        train_steps(ae, &mut w, train, tc, sched.lr(), steps, &mut opt, &mut stream, rng)?;
        let db = to_db(ae.evaluate_nmse(&w, val)?);
        sched.observe(db);
        curve.push(db);
    }
    Ok((w, curve))
}

/// Centralized learning on the union of all training splits.
pub fn run_cl(
    ae: &Autoencoder,
    w0: &ParamSet,
    fed: &Federation,
    tc: &TrainConfig,
    total_steps: usize,
    periods: usize,
    seed: u64,
) -> Result<(ParamSet, Vec<f64>)> {
    let data = SampleSet::concat(fed.clients.iter().map(|c| &c.train))?;
    let mut rng = child_rng(seed, &[stream::CENTRAL]);
    train_budgeted(ae, w0, &data, &fed.mixed_val, tc, total_steps, periods, &mut rng)
}

/// Individual learning: one private model per UE, each receiving an equal
/// share of `total_steps`.
pub fn run_il(
    ae: &Autoencoder,
    w0: &ParamSet,
    fed: &Federation,
    tc: &TrainConfig,
    total_steps: usize,
    periods: usize,
    seed: u64,
) -> Result<Vec<ParamSet>> {
    let k = fed.num_ues();
    fed.clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let share = total_steps * (i + 1) / k - total_steps * i / k;
            let mut rng = child_rng(seed, &[stream::INDIVIDUAL, u64::from(c.ue_id)]);
            Ok(train_budgeted(ae, w0, &c.train, &c.val, tc, share, periods, &mut rng)?.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn upd(id: u32, d: &[f64], n: usize) -> ClientUpdate {
        ClientUpdate {
            ue_id: id,
            delta: d.to_vec(),
            num_samples: n,
        }
    }

    #[test]
    fn full_schedule_is_everyone() {
        let mut rng = rng_from_seed(1);
        assert_eq!(schedule_ues(&mut rng, 4, 4).unwrap(), vec![1, 2, 3, 4]);
        assert!(schedule_ues(&mut rng, 3, 4).is_err());
        for _ in 0..100 {
            let ids = schedule_ues(&mut rng, 10, 3).unwrap();
            assert_eq!(ids.len(), 3);
            assert!(ids.windows(2).all(|p| p[0] < p[1]));
            assert!(ids.iter().all(|&i| (1..=10).contains(&i)));
        }
    }

    #[test]
    fn aggregation_examples() {
        let w = [1.0, 2.0];
        let d = [0.5, -1.0];
        let all = [upd(1, &d, 10), upd(2, &d, 10)];
        let got = aggregate(&w, &all, 20, AggregationDenominator::TotalAllUes).unwrap();
        assert_eq!(got, vec![1.5, 1.0]);
        let one = [upd(2, &d, 10)];
        let got = aggregate(&w, &one, 20, AggregationDenominator::TotalAllUes).unwrap();
        assert_eq!(got, vec![1.25, 1.5]);
        let got = aggregate(&w, &one, 20, AggregationDenominator::TotalScheduled).unwrap();
        assert_eq!(got, vec![1.5, 1.0]);
        let d1 = [1.0, 0.0];
        let d2 = [0.0, 1.0];
        let uneven = [upd(1, &d1, 100), upd(2, &d2, 300)];
        let got = aggregate(&[0.0, 0.0], &uneven, 400, AggregationDenominator::TotalAllUes).unwrap();
        assert_eq!(got, vec![0.25, 0.75]);
    }

    #[test]
    fn aggregation_ignores_arrival_order() {
        let a = upd(3, &[0.1, 0.7, -0.3], 17);
        let b = upd(1, &[1e-3, 2.5, 0.2], 40);
        let c = upd(2, &[-0.9, 0.33, 1e5], 23);
        let w = [0.2, -0.4, 0.9];
        let m = AggregationDenominator::TotalAllUes;
        let x = aggregate(&w, &[a.clone(), b.clone(), c.clone()], 99, m).unwrap();
        let y = aggregate(&w, &[c, a, b], 99, m).unwrap();
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn aggregation_rejects_length_mismatch() {
        let bad = [upd(1, &[1.0], 5)];
        assert!(aggregate(&[0.0, 0.0], &bad, 5, AggregationDenominator::TotalAllUes).is_err());
    }
}
