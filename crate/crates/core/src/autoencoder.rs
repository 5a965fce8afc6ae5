//! Scaled CRNet-style CSI-feedback autoencoder, losses and NMSE metrics.
//!
//! Inputs are angular-delay CSI samples normalized into `[0, 1]` and laid
//! out as `[2, nt, nc]` (real plane, then imaginary plane).

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::channel::{CsiSample, DftPair, Domain, NormParams, UeDataset};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    apply_bn_observations, BnObservation, Builder, Cache, Grads, Layer, Mode, Module, ParamSet,
    Tensor,
};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub nt: usize,
    pub nc: usize,
    pub codeword_dim: usize,
    /// Factorized kernel pair applied after the 3x3 stem of the first
    /// encoder branch; the second branch is a single 3x3 convolution.
    pub branch_kernels: [(usize, usize); 2],
    pub width: usize,
    pub num_crblocks: usize,
    /// Insert batch normalization after every convolution except the last
    /// fusion of each CRBlock.
    pub batch_norm: bool,
}

impl AutoencoderConfig {
    pub fn desk() -> Self {
        Self {
            nt: 8,
            nc: 8,
            codeword_dim: 8,
            branch_kernels: [(1, 9), (9, 1)],
            width: 16,
            num_crblocks: 2,
            batch_norm: false,
        }
    }

    /// Real-valued entries per sample (`2 nt nc`).
    pub fn feature_len(&self) -> usize {
        2 * self.nt * self.nc
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.nt == 0 || self.nc == 0 || self.width == 0 || self.codeword_dim == 0 {
            return bad("autoencoder dimensions must be positive");
        }
        if self.num_crblocks == 0 {
            return bad("num_crblocks must be positive");
        }
        if self.codeword_dim >= self.feature_len() {
            return bad("codeword_dim must be below 2*nt*nc");
        }
        if self
            .branch_kernels
            .iter()
            .any(|&(h, w)| h == 0 || w == 0 || h % 2 == 0 || w % 2 == 0)
        {
            return bad("branch kernels must be odd and positive");
        }
        Ok(())
    }

    pub fn compression_ratio(&self) -> f64 {
        compression_ratio(self.nt, self.nc, self.codeword_dim)
    }
}

/// `2 nt nc / codeword_dim`.
pub fn compression_ratio(nt: usize, nc: usize, codeword_dim: usize) -> f64 {
    (2 * nt * nc) as f64 / codeword_dim as f64
}

/// Encoder output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Per-sample squared Frobenius norm in the normalized domain.
    Mse,
    /// Negative mean per-subcarrier cosine similarity in the
    /// spatial-frequency domain.
    Cosine,
}

/// Network structure. Parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    pub encoder: Module,
    pub decoder: Module,
    full: Module,
}

fn lrelu() -> Module {
    Module::Layer(Layer::LeakyRelu)
}

/// conv (+ batch norm) for stages followed by an activation.
fn conv_bn(
    b: &mut Builder,
    name: &str,
    cin: usize,
    cout: usize,
    k: (usize, usize),
    bn: bool,
    rng: &mut SimRng,
) -> Result<Vec<Module>> {
    let mut out = vec![b.conv(name, cin, cout, k, false, rng)?];
    if bn {
        out.push(b.batchnorm(&alloc::format!("{name}.bn"), cout)?);
    }
    Ok(out)
}

impl Autoencoder {
    /// Builds the network and draws its initial parameters.
    pub fn build(cfg: &AutoencoderConfig, rng: &mut SimRng) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let w = cfg.width;
        let bn = cfg.batch_norm;
        let [k1, k2] = cfg.branch_kernels;
        let mut b = Builder::new();

        let mut branch1 = conv_bn(&mut b, "enc.b1.conv3x3", 2, w, (3, 3), bn, rng)?;
        branch1.push(lrelu());
        branch1.extend(conv_bn(&mut b, "enc.b1.conv_a", w, w, k1, bn, rng)?);
        branch1.push(lrelu());
        branch1.extend(conv_bn(&mut b, "enc.b1.conv_b", w, w, k2, bn, rng)?);
        let branch2 = conv_bn(&mut b, "enc.b2.conv3x3", 2, w, (3, 3), bn, rng)?;
        let mut enc = vec![
            Module::Concat(vec![Module::Seq(branch1), Module::Seq(branch2)]),
            lrelu(),
        ];
        enc.extend(conv_bn(&mut b, "enc.fuse", 2 * w, 2, (1, 1), bn, rng)?);
        enc.push(lrelu());
        enc.push(Module::Layer(Layer::Flatten));
        enc.push(b.dense("enc.fc", cfg.feature_len(), cfg.codeword_dim, true, rng)?);
        let encoder = Module::Seq(enc);

        let mut dec = vec![
            b.dense("dec.fc", cfg.codeword_dim, cfg.feature_len(), true, rng)?,
            Module::Layer(Layer::Reshape(vec![2, cfg.nt, cfg.nc])),
        ];
        dec.extend(conv_bn(&mut b, "dec.head5x5", 2, 2, (5, 5), bn, rng)?);
        dec.push(lrelu());
        for i in 0..cfg.num_crblocks {
            let p = alloc::format!("dec.crblock{i}");
            let mut path1 = conv_bn(&mut b, &alloc::format!("{p}.p1.conv3x3"), 2, w, (3, 3), bn, rng)?;
            path1.push(lrelu());
            path1.extend(conv_bn(&mut b, &alloc::format!("{p}.p1.conv1x9"), w, w, (1, 9), bn, rng)?);
            path1.push(lrelu());
            path1.extend(conv_bn(&mut b, &alloc::format!("{p}.p1.conv9x1"), w, w, (9, 1), bn, rng)?);
            let mut path2 = conv_bn(&mut b, &alloc::format!("{p}.p2.conv1x5"), 2, w, (1, 5), bn, rng)?;
            path2.push(lrelu());
            path2.extend(conv_bn(&mut b, &alloc::format!("{p}.p2.conv5x1"), w, w, (5, 1), bn, rng)?);
            let body = Module::Seq(vec![
                Module::Concat(vec![Module::Seq(path1), Module::Seq(path2)]),
                lrelu(),
                b.conv(&alloc::format!("{p}.fuse"), 2 * w, 2, (1, 1), false, rng)?,
            ]);
            dec.push(b.rezero(&p, body)?);
        }
        dec.push(Module::Layer(Layer::Sigmoid));
        let decoder = Module::Seq(dec);
        let full = Module::Seq(vec![encoder.clone(), decoder.clone()]);
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                decoder,
                full,
            },
            b.params,
        ))
    }

    /// Structure only (parameters drawn from a throwaway stream).
    pub fn structure(cfg: &AutoencoderConfig) -> Result<Self> {
        Ok(Self::build(cfg, &mut crate::rng::rng_from_seed(0))?.0)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.cfg;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [2, c.nt, c.nc] {
            return Err(shape_err(&[s.first().copied().unwrap_or(0), 2, c.nt, c.nc], s));
        }
        Ok(())
    }

    /// Inference-mode encoding of a `[n, 2, nt, nc]` batch into `[n, codeword_dim]`.
    pub fn encode(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.encoder.infer(ps, x)
    }

    pub fn decode(&self, ps: &ParamSet, s: &Tensor) -> Result<Tensor> {
        if s.shape().len() != 2 || s.shape()[1] != self.cfg.codeword_dim {
            return Err(shape_err(&[s.shape()[0], self.cfg.codeword_dim], s.shape()));
        }
        self.decoder.infer(ps, s)
    }

    pub fn encode_sample(&self, ps: &ParamSet, x: &Tensor) -> Result<Codeword> {
        let s = self.encode(ps, x)?;
        Ok(Codeword {
            values: s.into_data(),
        })
    }

    /// Inference-mode reconstruction, processed in chunks to bound memory.
    pub fn reconstruct(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        const CHUNK: usize = 256;
        let n = x.batch();
        let mut data = Vec::with_capacity(x.len());
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let y = self.full.infer(ps, &x.slice_batch(start, end))?;
            data.extend_from_slice(y.data());
            start = end;
        }
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Training-mode forward of the whole autoencoder.
    pub fn forward_train(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        obs: &mut Vec<BnObservation>,
    ) -> Result<(Tensor, Cache)> {
        self.check_input(x)?;
        let (y, cache) = self.full.forward(ps, x, Mode::Train, obs)?;
        Ok((y, cache.expect("training forward keeps caches")))
    }

    /// Loss on a batch and its gradient with respect to every parameter.
    /// Batch-norm statistics observed in the pass are returned for the
    /// caller to fold in after the optimizer step.
    pub fn loss_and_grad(
        &self,
        ps: &ParamSet,
        batch: &Batch,
        loss: LossKind,
    ) -> Result<(f64, Grads, Vec<BnObservation>)> {
        let mut obs = Vec::new();
        let (y, cache) = self.forward_train(ps, &batch.x, &mut obs)?;
        let (l, dy) = match loss {
            LossKind::Mse => mse_loss_grad(&batch.x, &y)?,
            LossKind::Cosine => {
                let dft = DftPair::new(self.cfg.nt, self.cfg.nc);
                cosine_loss_grad(&batch.targets, &batch.norms, &y, &dft)?
            }
        };
        let mut grads = Grads::zeros(ps);
        self.full.backward(ps, &cache, dy, &mut grads)?;
        Ok((l, grads, obs))
    }

    /// Batch loss without gradients (training-mode forward, statistics discarded).
    pub fn batch_loss(&self, ps: &ParamSet, batch: &Batch, loss: LossKind) -> Result<f64> {
        let mut obs = Vec::new();
        let (y, _) = self.forward_train(ps, &batch.x, &mut obs)?;
        match loss {
            LossKind::Mse => loss_mse(&batch.x, &y),
            LossKind::Cosine => {
                let dft = DftPair::new(self.cfg.nt, self.cfg.nc);
                Ok(cosine_loss_grad(&batch.targets, &batch.norms, &y, &dft)?.0)
            }
        }
    }

    /// Mean linear NMSE of the reconstruction of `set` in the denormalized
    /// angular-delay domain.
    pub fn evaluate_nmse(&self, ps: &ParamSet, set: &SampleSet) -> Result<f64> {
        Ok(mean(&self.per_sample_nmse(ps, set)?))
    }

    pub fn per_sample_nmse(&self, ps: &ParamSet, set: &SampleSet) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let y = self.reconstruct(ps, &set.x)?;
        let per = self.cfg.feature_len();
        set.targets
            .iter()
            .zip(&set.norms)
            .enumerate()
            .map(|(i, (h, norm))| {
                let h_hat = from_network_layout(&y.data()[i * per..(i + 1) * per], h.nt, h.nc, norm);
                nmse(h, &h_hat)
            })
            .collect()
    }
}

/// Folds batch-norm observations into the running statistics of `ps`.
pub fn fold_bn(ps: &mut ParamSet, obs: &[BnObservation]) {
    apply_bn_observations(ps, obs);
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// Data layout

/// Normalized network input `[2, nt, nc]` for one angular-delay sample.
pub fn to_network_layout(h: &CsiSample, norm: &NormParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * h.data.len());
    out.extend(h.data.iter().map(|z| norm.normalize(z.re)));
    out.extend(h.data.iter().map(|z| norm.normalize(z.im)));
    out
}

/// Inverse of [`to_network_layout`].
pub fn from_network_layout(v: &[f64], nt: usize, nc: usize, norm: &NormParams) -> CsiSample {
    let n = nt * nc;
    let data = (0..n)
        .map(|i| Complex64::new(norm.denormalize(v[i]), norm.denormalize(v[n + i])))
        .collect();
    CsiSample {
        nt,
        nc,
        data,
        domain: Domain::AngularDelay,
    }
}

/// Normalized samples ready for the network, with the originals and the
/// normalization each sample was encoded with.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub x: Tensor,
    pub targets: Vec<CsiSample>,
    pub norms: Vec<NormParams>,
}

/// A mini-batch view of a [`SampleSet`].
pub type Batch = SampleSet;

impl SampleSet {
    pub fn from_samples(samples: &[CsiSample], norm: &NormParams) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let (nt, nc) = (first.nt, first.nc);
        let mut data = Vec::with_capacity(samples.len() * 2 * nt * nc);
        for s in samples {
            if s.domain != Domain::AngularDelay {
                return Err(Error::WrongDomain {
                    expected: Domain::AngularDelay.name(),
                    actual: s.domain.name(),
                });
            }
            if (s.nt, s.nc) != (nt, nc) {
                return Err(shape_err(&[nt, nc], &[s.nt, s.nc]));
            }
            data.extend(to_network_layout(s, norm));
        }
        Ok(Self {
            x: Tensor::new(vec![samples.len(), 2, nt, nc], data)?,
            targets: samples.to_vec(),
            norms: vec![*norm; samples.len()],
        })
    }

    pub fn train(ds: &UeDataset) -> Result<Self> {
        Self::from_samples(&ds.train, &ds.norm)
    }

    pub fn val(ds: &UeDataset) -> Result<Self> {
        Self::from_samples(&ds.val, &ds.norm)
    }

    pub fn test(ds: &UeDataset) -> Result<Self> {
        Self::from_samples(&ds.test, &ds.norm)
    }

    /// Concatenation preserving each sample's own normalization.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a SampleSet>) -> Result<Self> {
        let sets: Vec<&SampleSet> = sets.into_iter().collect();
        let first = sets.first().ok_or(Error::EmptyDataset)?;
        let mut shape = first.x.shape().to_vec();
        shape[0] = sets.iter().map(|s| s.len()).sum();
        let mut data = Vec::new();
        let mut targets = Vec::new();
        let mut norms = Vec::new();
        for s in &sets {
            if s.x.shape()[1..] != shape[1..] {
                return Err(shape_err(&shape, s.x.shape()));
            }
            data.extend_from_slice(s.x.data());
            targets.extend_from_slice(&s.targets);
            norms.extend_from_slice(&s.norms);
        }
        Ok(Self {
            x: Tensor::new(shape, data)?,
            targets,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn gather(&self, rows: &[usize]) -> Batch {
        SampleSet {
            x: self.x.gather(rows),
            targets: rows.iter().map(|&r| self.targets[r].clone()).collect(),
            norms: rows.iter().map(|&r| self.norms[r]).collect(),
        }
    }

    /// The freshest `fraction` of samples (the tail of the set), at least one.
    pub fn tail_fraction(&self, fraction: f64) -> Batch {
        let n = self.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let rows: Vec<usize> = (n - k..n).collect();
        self.gather(&rows)
    }
}

// ---------------------------------------------------------------------------
// Losses and metrics

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(a.shape(), b.shape()));
    }
    Ok(())
}

/// Squared Frobenius error per sample, averaged over the batch.
pub fn loss_mse(h: &Tensor, h_hat: &Tensor) -> Result<f64> {
    check_same(h, h_hat)?;
    let sq: f64 = h
        .data()
        .iter()
        .zip(h_hat.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(sq / h.batch() as f64)
}

/// [`loss_mse`] and its gradient with respect to `h_hat`.
pub fn mse_loss_grad(h: &Tensor, h_hat: &Tensor) -> Result<(f64, Tensor)> {
    let l = loss_mse(h, h_hat)?;
    let k = 2.0 / h.batch() as f64;
    let g = h
        .data()
        .iter()
        .zip(h_hat.data())
        .map(|(a, b)| k * (b - a))
        .collect();
    Ok((l, Tensor::new(h.shape().to_vec(), g)?))
}

/// Per-subcarrier `|<h_hat, h>| / (|h_hat| |h|)` terms for one sample, with
/// the gradient of their sum with respect to `h_hat` (real-part convention:
/// `d sum = Re(g^H d h_hat)`). Zero-norm columns contribute 0.
fn cosine_terms(h: &CsiSample, h_hat: &CsiSample) -> (f64, Vec<Complex64>) {
    let (nt, nc) = (h.nt, h.nc);
    let mut total = 0.0;
    let mut grad = vec![Complex64::new(0.0, 0.0); nt * nc];
    for n in 0..nc {
        let mut z = Complex64::new(0.0, 0.0);
        let (mut nh, mut nhh) = (0.0, 0.0);
        for m in 0..nt {
            let (a, b) = (h.at(m, n), h_hat.at(m, n));
            z += b.conj() * a;
            nh += a.norm_sqr();
            nhh += b.norm_sqr();
        }
        let (nh, nhh_sq) = (libm::sqrt(nh), nhh);
        let nhh = libm::sqrt(nhh_sq);
        if nh == 0.0 || nhh == 0.0 {
            continue;
        }
        let az = z.norm();
        let c = az / (nhh * nh);
        total += c;
        for m in 0..nt {
            let mut g = -h_hat.at(m, n) * (c / nhh_sq);
            if az > 0.0 {
                g += z.conj() * h.at(m, n) / (az * nhh * nh);
            }
            grad[m * nc + n] = g;
        }
    }
    (total, grad)
}

/// Negative mean cosine similarity over subcarriers between two
/// spatial-frequency samples; in `[-1, 0]`.
pub fn loss_cosine(h: &CsiSample, h_hat: &CsiSample) -> Result<f64> {
    for s in [h, h_hat] {
        if s.domain != Domain::SpatialFrequency {
            return Err(Error::WrongDomain {
                expected: Domain::SpatialFrequency.name(),
                actual: s.domain.name(),
            });
        }
    }
    if (h.nt, h.nc) != (h_hat.nt, h_hat.nc) {
        return Err(shape_err(&[h.nt, h.nc], &[h_hat.nt, h_hat.nc]));
    }
    Ok(-cosine_terms(h, h_hat).0 / h.nc as f64)
}

/// Batch cosine loss evaluated on network outputs `y` (normalized
/// angular-delay layout) against angular-delay targets, with the gradient
/// with respect to `y`.
pub fn cosine_loss_grad(
    targets: &[CsiSample],
    norms: &[NormParams],
    y: &Tensor,
    dft: &DftPair,
) -> Result<(f64, Tensor)> {
    let n = y.batch();
    if targets.len() != n || norms.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: targets.len(),
        });
    }
    let per = y.per_sample();
    let mut total = 0.0;
    let mut g = vec![0.0; y.len()];
    for (i, (t, norm)) in targets.iter().zip(norms).enumerate() {
        let (nt, nc) = (t.nt, t.nc);
        let k = nt * nc;
        let hat_ad = from_network_layout(&y.data()[i * per..(i + 1) * per], nt, nc, norm);
        let h_sf = dft.from_angular_delay(t)?;
        let hat_sf = dft.from_angular_delay(&hat_ad)?;
        let (c, grad_sf) = cosine_terms(&h_sf, &hat_sf);
        total -= c / nc as f64;
        // The inverse transform is unitary, so its adjoint is the forward one.
        let grad_ad = dft.pull_back(&grad_sf);
        let w = -norm.scale / (nc as f64 * n as f64);
        for (j, z) in grad_ad.iter().enumerate() {
            g[i * per + j] = w * z.re;
            g[i * per + k + j] = w * z.im;
        }
    }
    Ok((total / n as f64, Tensor::new(y.shape().to_vec(), g)?))
}

/// `|H - H_hat|^2 / |H|^2` for one sample.
pub fn nmse(h: &CsiSample, h_hat: &CsiSample) -> Result<f64> {
    if (h.nt, h.nc) != (h_hat.nt, h_hat.nc) {
        return Err(shape_err(&[h.nt, h.nc], &[h_hat.nt, h_hat.nc]));
    }
    let p = h.frobenius_sq();
    if p == 0.0 {
        return Err(Error::UndefinedInput("NMSE of an all-zero channel".into()));
    }
    let e: f64 = h
        .data
        .iter()
        .zip(&h_hat.data)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(e / p)
}

/// Mean NMSE over paired samples.
pub fn mean_nmse(h: &[CsiSample], h_hat: &[CsiSample]) -> Result<f64> {
    if h.len() != h_hat.len() {
        return Err(Error::LengthMismatch {
            expected: h.len(),
            actual: h_hat.len(),
        });
    }
    if h.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for (a, b) in h.iter().zip(h_hat) {
        acc += nmse(a, b)?;
    }
    Ok(acc / h.len() as f64)
}

/// `10 log10(x)`, with `-inf` for zero.
pub fn to_db(linear: f64) -> f64 {
    if linear == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * libm::log10(linear)
    }
}

/// NMSE of the predictor that outputs 0.5 in every normalized entry.
pub fn constant_predictor_nmse(set: &SampleSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for (h, norm) in set.targets.iter().zip(&set.norms) {
        let v = norm.denormalize(0.5);
        let hat = CsiSample {
            nt: h.nt,
            nc: h.nc,
            data: vec![Complex64::new(v, v); h.data.len()],
            domain: h.domain,
        };
        acc += nmse(h, &hat)?;
    }
    Ok(acc / set.len() as f64)
}
