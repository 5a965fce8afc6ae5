// Independent reference computations shared by the core tests and the
// acceptance suite. Requires `gradcheck` as a sibling module.

#![allow(dead_code)]

use feel_core::autoencoder::{Autoencoder, AutoencoderConfig, LossKind, SampleSet};
use feel_core::channel::{CsiSample, Domain, NormParams};
use feel_core::feel::{run_feel, AggregationDenominator, ClientData, FeelConfig, Federation};
use feel_core::nn::{ParamSet, Role};
use feel_core::quant::{
    dequantize, grid_scale, quantize, transport_bits, QuantPayload, RecordData, BASELINE_BITS,
    RANGE_META_BITS,
};
use feel_core::rng::rng_from_seed;
use feel_core::trainer::{OptimizerKind, TrainConfig};
use num_complex::Complex64;

use super::gradcheck::Uniform;

pub fn random_samples(u: &mut Uniform, n: usize, nt: usize, nc: usize) -> Vec<CsiSample> {
    (0..n)
        .map(|_| CsiSample {
            nt,
            nc,
            data: (0..nt * nc)
                .map(|_| Complex64::new(u.next(-1.0, 1.0), u.next(-1.0, 1.0)))
                .collect(),
            domain: Domain::AngularDelay,
        })
        .collect()
}

/// Synthetic client with its normalization fitted on its own train split.
pub fn client(ue_id: u32, n_train: usize, n_eval: usize, cfg: &AutoencoderConfig, u: &mut Uniform) -> ClientData {
    let train = random_samples(u, n_train, cfg.nt, cfg.nc);
    let val = random_samples(u, n_eval, cfg.nt, cfg.nc);
    let test = random_samples(u, n_eval, cfg.nt, cfg.nc);
    let norm = NormParams::fit(&train);
    ClientData {
        ue_id,
        train: SampleSet::from_samples(&train, &norm).unwrap(),
        val: SampleSet::from_samples(&val, &norm).unwrap(),
        test: SampleSet::from_samples(&test, &norm).unwrap(),
    }
}

/// Full-participation, one-epoch, full-batch SGD FedAvg against plain
/// gradient descent on the pooled data, computed here from the loss
/// gradient alone. Returns the largest absolute parameter gap seen after
/// any round, and how far the parameters moved in total.
pub fn fedavg_vs_centralized(seed: u64, rounds: usize) -> (f64, f64) {
    let cfg = AutoencoderConfig::desk();
    let mut u = Uniform::new(seed);
    let (ae, w0) = Autoencoder::build(&cfg, &mut rng_from_seed(seed)).unwrap();
    let clients: Vec<ClientData> = (1..=3).map(|id| client(id, 10, 2, &cfg, &mut u)).collect();
    let fed = Federation::new(clients).unwrap();
    let lr = 0.5;
    let train = TrainConfig {
        batch_size: 10,
        local_epochs: 1,
        learning_rate: lr,
        optimizer: OptimizerKind::Sgd,
        loss: LossKind::Mse,
        lr_patience: rounds + 1,
        ..TrainConfig::default()
    };

    let pooled = SampleSet::concat(fed.clients.iter().map(|c| &c.train)).unwrap();
    let mut w = w0.clone();
    let mut reference = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let (_, g, _) = ae.loss_and_grad(&w, &pooled, LossKind::Mse).unwrap();
        let flat: Vec<f64> = w.flatten().iter().zip(g.as_slice()).map(|(p, d)| p - lr * d).collect();
        w.assign_flat(&flat).unwrap();
        reference.push(flat);
    }

    let mut worst: f64 = 0.0;
    for t in 1..=rounds {
        let fc = FeelConfig {
            num_ues: 3,
            scheduled_per_round: 3,
            rounds: t,
            train: train.clone(),
            quant: feel_core::quant::QuantPolicy::unquantized(),
            aggregation: AggregationDenominator::TotalAllUes,
            pretrain_epochs: None,
        };
        if t != 1 && t < rounds && t % 5 != 0 {
            continue;
        }
        let out = run_feel(&ae, &w0, &fed, &fc, seed).unwrap();
        let gap = out
            .global
            .flatten()
            .iter()
            .zip(&reference[t - 1])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    let moved = w
        .flatten()
        .iter()
        .zip(w0.flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (worst, moved)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct QuantSweep {
    pub tensors: usize,
    pub bound_violations: usize,
    pub bias_mismatches: usize,
    pub bit_count_mismatches: usize,
}

fn single_tensor_template(len: usize, role: Role) -> ParamSet {
    let mut ps = ParamSet::new();
    let name = if role == Role::Bias { "t.bias" } else { "t.weight" };
    ps.push(name, feel_core::nn::Tensor::zeros(&[len]), role, true).unwrap();
    ps
}

/// Quantizes `n` random weight tensors (and as many bias tensors) per bit
/// width and checks the reconstruction bound, bias exactness and the bit
/// accounting against the closed-form counts.
pub fn quant_sweep(seed: u64, n: usize, widths: &[u8]) -> QuantSweep {
    let mut u = Uniform::new(seed);
    let mut s = QuantSweep::default();
    for i in 0..n {
        let len = 1 + u.below(48);
        let spread = 10f64.powf(u.next(-6.0, 3.0));
        let center = u.next(-1.0, 1.0) * spread;
        let values: Vec<f64> = (0..len).map(|_| center + spread * u.next(-1.0, 1.0)).collect();
        for &bits in widths {
            s.tensors += 1;
            let t = single_tensor_template(len, Role::Weight);
            let qp: QuantPayload = quantize(&values, &t, bits, None).unwrap();
            let back = dequantize(&qp, &t).unwrap();
            let RecordData::Quantized { min, max, .. } = qp.records[0].data else {
                panic!("weight tensor stored raw");
            };
            let half = grid_scale(min, max, bits) / 2.0;
            if values.iter().zip(&back).any(|(x, y)| (x - y).abs() > half * (1.0 + 1e-12)) {
                s.bound_violations += 1;
            }
            if qp.total_bits() != RANGE_META_BITS + u64::from(bits) * len as u64
                || transport_bits(&t, Some(bits)) != qp.total_bits()
            {
                s.bit_count_mismatches += 1;
            }
        }
        if i % widths.len().max(1) == 0 {
            let t = single_tensor_template(len, Role::Bias);
            let qp = quantize(&values, &t, widths[0], None).unwrap();
            let back = dequantize(&qp, &t).unwrap();
            if values.iter().zip(&back).any(|(x, y)| f64::from(*x as f32).to_bits() != y.to_bits()) {
                s.bias_mismatches += 1;
            }
            if qp.total_bits() != BASELINE_BITS * len as u64 {
                s.bit_count_mismatches += 1;
            }
        }
    }
    s
}
