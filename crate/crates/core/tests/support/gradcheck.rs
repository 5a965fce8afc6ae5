// Central finite-difference oracle for the network layers and the full
// autoencoder. Shared by the core gradient tests and the acceptance suite.

#![allow(dead_code)]

use feel_core::autoencoder::{Autoencoder, AutoencoderConfig, LossKind, SampleSet};
use feel_core::channel::{CsiSample, Domain, NormParams};
use feel_core::nn::{Builder, Cache, Grads, Layer, LayerCache, Mode, Module, ParamSet, Tensor};
use feel_core::rng::{derive_seed, rng_from_seed};
use num_complex::Complex64;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor: below it the comparison is absolute at
/// `TOLERANCE * FLOOR = 1e-9`. Central differences at this step carry
/// roughly `1e-16 * |loss| / STEP`, about 1e-10 for the autoencoder losses.
pub const FLOOR: f64 = 1e-5;

/// Deterministic uniform source independent of the crate's RNG plumbing.
pub struct Uniform {
    seed: u64,
    i: u64,
}

impl Uniform {
    pub fn new(seed: u64) -> Self {
        Self { seed, i: 0 }
    }

    pub fn next(&mut self, lo: f64, hi: f64) -> f64 {
        self.i += 1;
        let u = (derive_seed(self.seed, &[self.i]) >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.next(lo, hi)).collect()).unwrap()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next(0.0, n as f64) as usize).min(n - 1)
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub coords: usize,
    /// Coordinates whose +-step perturbation moves some leaky-ReLU input
    /// across zero; the difference quotient is not a derivative there.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.kinks * 100 <= self.coords
    }

    fn new(name: String) -> Self {
        Self {
            name,
            coords: 0,
            kinks: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: String, a: f64, n: Option<f64>) {
        self.coords += 1;
        let Some(n) = n else {
            self.kinks += 1;
            return;
        };
        let e = rel_err(a, n);
        if e > self.max_rel_err || !e.is_finite() {
            self.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = format!("{what}: analytic {a:e} numeric {n:e}");
        }
    }
}

/// Fixed random projection loss `sum(r * y)`, so `dL/dy = r`.
fn projected(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn collect_signs(c: &Cache, out: &mut Vec<bool>) {
    match c {
        Cache::Layer(LayerCache::LeakyRelu { input }) => out.extend(input.data().iter().map(|&v| v > 0.0)),
        Cache::Layer(_) => {}
        Cache::Seq(cs) | Cache::Concat { caches: cs, .. } => cs.iter().for_each(|c| collect_signs(c, out)),
        Cache::Residual { body, .. } => collect_signs(body, out),
    }
}

/// Sign pattern of every leaky-ReLU input in a training forward.
pub fn activation_signs(c: &Cache) -> Vec<bool> {
    let mut out = Vec::new();
    collect_signs(c, &mut out);
    out
}

fn train_forward(m: &Module, ps: &ParamSet, x: &Tensor) -> (Tensor, Vec<bool>) {
    let mut obs = Vec::new();
    let (y, c) = m.forward(ps, x, Mode::Train, &mut obs).unwrap();
    (y, activation_signs(&c.unwrap()))
}

/// Central difference of `f` around the current point, or `None` when the
/// two evaluations sit on different sides of an activation kink.
fn central(f: &mut dyn FnMut(f64) -> (f64, Vec<bool>)) -> Option<f64> {
    let (lp, sp) = f(STEP);
    let (lm, sm) = f(-STEP);
    (sp == sm).then(|| (lp - lm) / (2.0 * STEP))
}

/// Checks every trainable parameter and every input coordinate of `m`.
pub fn check_module(name: &str, m: &Module, ps: &ParamSet, x: &Tensor, seed: u64) -> CheckResult {
    let mut u = Uniform::new(derive_seed(seed, &[0x7072]));
    let mut obs = Vec::new();
    let (y, cache) = m.forward(ps, x, Mode::Train, &mut obs).unwrap();
    let r = u.tensor(y.shape(), -1.0, 1.0);
    let mut grads = Grads::zeros(ps);
    let dx = m.backward(ps, &cache.unwrap(), r.clone(), &mut grads).unwrap();

    let mut res = CheckResult::new(name.to_string());
    let flat = ps.flatten();
    let mask = ps.trainable_mask();
    let mut p = ps.clone();
    for i in 0..flat.len() {
        if !mask[i] {
            continue;
        }
        let n = central(&mut |h| {
            let mut v = flat.clone();
            v[i] += h;
            p.assign_flat(&v).unwrap();
            let (y, s) = train_forward(m, &p, x);
            (projected(&y, &r), s)
        });
        res.record(format!("param {i}"), grads.as_slice()[i], n);
    }
    for i in 0..x.len() {
        let n = central(&mut |h| {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let (y, s) = train_forward(m, ps, &xp);
            (projected(&y, &r), s)
        });
        res.record(format!("input {i}"), dx.data()[i], n);
    }
    res
}

/// Sets every ReZero scalar and batch-norm affine parameter to a nonzero
/// random value so no path is trivially dead.
pub fn liven(ps: &mut ParamSet, u: &mut Uniform) {
    for idx in 0..ps.len() {
        let name = ps.entry(idx).name.clone();
        if name.ends_with(".rezero") {
            ps.tensor_mut(idx).data_mut()[0] = u.next(0.3, 1.0);
        } else if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            for v in ps.tensor_mut(idx).data_mut() {
                *v = u.next(-0.5, 0.5) + if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            }
        }
    }
}

/// One instance of every layer type, each checked on its own.
pub fn layer_cases(seed: u64) -> Vec<CheckResult> {
    let mut u = Uniform::new(seed);
    let rng = rng_from_seed(seed);
    let mut out = Vec::new();
    let single = |name: &str, build: &dyn Fn(&mut Builder) -> Module, shape: &[usize], u: &mut Uniform| {
        let mut b = Builder::new();
        let m = build(&mut b);
        let mut ps = b.params;
        liven(&mut ps, u);
        let x = u.tensor(shape, -1.0, 1.0);
        check_module(name, &m, &ps, &x, seed)
    };

    for (k, bias) in [((3, 3), true), ((1, 5), false), ((5, 1), true), ((1, 1), false)] {
        out.push(single(
            &format!("conv{}x{}{}", k.0, k.1, if bias { "+bias" } else { "" }),
            &|b| b.conv("c", 2, 3, k, bias, &mut rng.clone()).unwrap(),
            &[2, 2, 4, 5],
            &mut u,
        ));
    }
    out.push(single("dense+bias", &|b| b.dense("d", 6, 4, true, &mut rng.clone()).unwrap(), &[3, 6], &mut u));
    out.push(single("dense", &|b| b.dense("d", 5, 3, false, &mut rng.clone()).unwrap(), &[2, 5], &mut u));
    out.push(single("batchnorm", &|b| b.batchnorm("bn", 3).unwrap(), &[4, 3, 2, 3], &mut u));
    out.push(single("leaky_relu", &|_| Module::Layer(Layer::LeakyRelu), &[2, 3, 4], &mut u));
    out.push(single("sigmoid", &|_| Module::Layer(Layer::Sigmoid), &[2, 3, 4], &mut u));
    out.push(single(
        "flatten+reshape",
        &|_| {
            Module::seq(vec![
                Module::Layer(Layer::Flatten),
                Module::Layer(Layer::Reshape(vec![3, 2, 2])),
            ])
        },
        &[2, 2, 3, 2],
        &mut u,
    ));
    out.push(single(
        "concat",
        &|b| {
            let mut r = rng.clone();
            Module::Concat(vec![
                b.conv("a", 2, 2, (3, 1), false, &mut r).unwrap(),
                b.conv("b", 2, 3, (1, 3), true, &mut r).unwrap(),
            ])
        },
        &[2, 2, 3, 3],
        &mut u,
    ));
    out.push(single(
        "rezero",
        &|b| {
            let body = b.conv("a", 2, 2, (3, 3), true, &mut rng.clone()).unwrap();
            b.rezero("r", body).unwrap()
        },
        &[2, 2, 3, 3],
        &mut u,
    ));
    out
}

/// Randomly composed stack of conv/bn/activation/residual/concat stages
/// followed by flatten, dense and sigmoid.
pub fn random_stack(seed: u64) -> CheckResult {
    let mut u = Uniform::new(derive_seed(seed, &[0x5354]));
    let mut rng = rng_from_seed(seed);
    let mut b = Builder::new();
    let (h, w) = (3, 4);
    let mut c = 2;
    let mut items = Vec::new();
    let stages = 3 + u.below(3);
    for s in 0..stages {
        match u.below(5) {
            0 => {
                let cout = 1 + u.below(3);
                let k = (1 + 2 * u.below(2), 1 + 2 * u.below(2));
                items.push(b.conv(&format!("s{s}"), c, cout, k, u.below(2) == 0, &mut rng).unwrap());
                c = cout;
            }
            1 => items.push(b.batchnorm(&format!("s{s}"), c).unwrap()),
            2 => items.push(Module::Layer(if u.below(2) == 0 { Layer::LeakyRelu } else { Layer::Sigmoid })),
            3 => {
                let body = Module::seq(vec![
                    b.conv(&format!("s{s}.a"), c, c, (3, 3), false, &mut rng).unwrap(),
                    Module::Layer(Layer::LeakyRelu),
                ]);
                items.push(b.rezero(&format!("s{s}"), body).unwrap());
            }
            _ => {
                let (c1, c2) = (1 + u.below(2), 1 + u.below(2));
                items.push(Module::Concat(vec![
                    b.conv(&format!("s{s}.l"), c, c1, (1, 3), false, &mut rng).unwrap(),
                    b.conv(&format!("s{s}.r"), c, c2, (3, 1), true, &mut rng).unwrap(),
                ]));
                c = c1 + c2;
            }
        }
    }
    items.push(Module::Layer(Layer::Flatten));
    items.push(b.dense("head", c * h * w, 3, true, &mut rng).unwrap());
    items.push(Module::Layer(Layer::Sigmoid));
    let m = Module::seq(items);
    let mut ps = b.params;
    liven(&mut ps, &mut u);
    let x = u.tensor(&[3, 2, h, w], -1.0, 1.0);
    check_module(&format!("random stack ({stages} stages)"), &m, &ps, &x, seed)
}

/// Small-geometry autoencoder with the full architecture.
pub fn check_config(batch_norm: bool) -> AutoencoderConfig {
    AutoencoderConfig {
        nt: 4,
        nc: 4,
        codeword_dim: 4,
        branch_kernels: [(1, 9), (9, 1)],
        width: 3,
        num_crblocks: 2,
        batch_norm,
    }
}

pub fn random_batch(cfg: &AutoencoderConfig, n: usize, u: &mut Uniform) -> SampleSet {
    let samples: Vec<CsiSample> = (0..n)
        .map(|_| CsiSample {
            nt: cfg.nt,
            nc: cfg.nc,
            data: (0..cfg.nt * cfg.nc)
                .map(|_| Complex64::new(u.next(-1.0, 1.0), u.next(-1.0, 1.0)))
                .collect(),
            domain: Domain::AngularDelay,
        })
        .collect();
    let norm = NormParams::fit(&samples);
    SampleSet::from_samples(&samples, &norm).unwrap()
}

/// Gradient of the training loss of the whole autoencoder with respect to
/// every trainable parameter. `stride` > 1 checks every stride-th
/// coordinate (plus the last one of each tensor).
pub fn check_autoencoder(
    cfg: &AutoencoderConfig,
    loss: LossKind,
    seed: u64,
    stride: usize,
) -> CheckResult {
    let mut u = Uniform::new(derive_seed(seed, &[0x4145]));
    let (ae, mut ps) = Autoencoder::build(cfg, &mut rng_from_seed(seed)).unwrap();
    liven(&mut ps, &mut u);
    let batch = random_batch(cfg, 3, &mut u);
    let (_, grads, _) = ae.loss_and_grad(&ps, &batch, loss).unwrap();

    let mut res = CheckResult::new(format!(
        "autoencoder {}x{} {:?}{}",
        cfg.nt,
        cfg.nc,
        loss,
        if cfg.batch_norm { " +bn" } else { "" }
    ));
    let flat = ps.flatten();
    let mask = ps.trainable_mask();
    let offsets = ps.offsets();
    let mut p = ps.clone();
    for (t, &start) in offsets.iter().enumerate() {
        let len = ps.tensor(t).len();
        let mut picks: Vec<usize> = (0..len).step_by(stride.max(1)).collect();
        if picks.last() != Some(&(len - 1)) {
            picks.push(len - 1);
        }
        for j in picks {
            let i = start + j;
            if !mask[i] {
                continue;
            }
            let n = central(&mut |h| {
                let mut v = flat.clone();
                v[i] += h;
                p.assign_flat(&v).unwrap();
                let mut obs = Vec::new();
                let (_, cache) = ae.forward_train(&p, &batch.x, &mut obs).unwrap();
                (ae.batch_loss(&p, &batch, loss).unwrap(), activation_signs(&cache))
            });
            res.record(format!("{}[{j}]", ps.entry(t).name), grads.as_slice()[i], n);
        }
    }
    res
}

pub const SEEDS: [u64; 3] = [11, 2024, 987_654_321];

/// Every check at one seed.
pub fn all_checks(seed: u64) -> Vec<CheckResult> {
    let mut out = layer_cases(seed);
    out.push(random_stack(seed));
    for bn in [false, true] {
        out.push(check_autoencoder(&check_config(bn), LossKind::Mse, seed, 1));
    }
    out.push(check_autoencoder(&check_config(false), LossKind::Cosine, seed, 1));
    out.push(check_autoencoder(&AutoencoderConfig::desk(), LossKind::Mse, seed, 97));
    out
}
