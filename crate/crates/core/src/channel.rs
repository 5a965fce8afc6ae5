//! Geometry-based cluster channel model and the angular-delay transform.
//!
//! A cell is described by a [`ScenarioParams`] preset. Large-scale cluster
//! parameters (mean angle offsets and delays) live on a square grid whose
//! spacing is the correlation distance; every grid node has its own seeded
//! draw and positions in between interpolate bilinearly. Two UEs farther apart
//! than the correlation distance therefore see independent clusters while a UE
//! moving inside a small circle sees a slowly varying environment. Small-scale
//! quantities (sub-path jitter and complex gains) are fresh for every sample.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{child_rng, derive_seed, stream, SimRng};

#[inline]
pub(crate) fn cis(phase: f64) -> Complex64 {
    Complex64::new(libm::cos(phase), libm::sin(phase))
}

/// Base-station array and OFDM numerology.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayConfig {
    pub num_tx_antennas: usize,
    /// Antenna spacing over wavelength.
    pub antenna_spacing_ratio: f64,
    pub num_subcarriers: usize,
    pub bandwidth_hz: f64,
    pub center_freq_hz: f64,
}

impl ArrayConfig {
    /// 8 antennas, 8 subcarriers, band n7 numerology.
    pub fn desk() -> Self {
        Self {
            num_tx_antennas: 8,
            antenna_spacing_ratio: 0.5,
            num_subcarriers: 8,
            bandwidth_hz: 70e6,
            center_freq_hz: 2.655e9,
        }
    }

    /// 32 antennas, 32 subcarriers.
    pub fn full_scale() -> Self {
        Self {
            num_tx_antennas: 32,
            num_subcarriers: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tx_antennas == 0 || self.num_subcarriers == 0 {
            return Err(Error::InvalidConfig(
                "antenna and subcarrier counts must be positive".into(),
            ));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.antenna_spacing_ratio)
            || !positive(self.bandwidth_hz)
            || !positive(self.center_freq_hz)
        {
            return Err(Error::InvalidConfig(
                "spacing ratio, bandwidth and center frequency must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Baseband offset of subcarrier `n` from the first subcarrier.
    pub fn subcarrier_offset_hz(&self, n: usize) -> f64 {
        n as f64 * self.bandwidth_hz / self.num_subcarriers as f64
    }
}

/// Statistical description of a propagation scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub label: String,
    pub num_clusters: usize,
    pub num_subpaths: usize,
    /// Laplacian scale of sub-path angles around the cluster mean.
    pub angle_spread_rad: f64,
    /// Cluster delays are uniform in `[0, delay_spread_s]`.
    pub delay_spread_s: f64,
    /// Cluster `p` carries power proportional to `exp(-gain_decay * p)`.
    pub gain_decay: f64,
    pub correlation_distance_m: f64,
    /// When set, cluster 0 points along the direct BS-UE bearing with zero delay.
    pub line_of_sight: bool,
    /// Seeds the large-scale cluster field shared by every UE of the cell.
    pub layout_seed: u64,
}

impl ScenarioParams {
    /// Rural-macro NLOS flavoured preset used for pretraining: many clusters,
    /// no dominant path, long correlation distance.
    pub fn pretrain() -> Self {
        Self {
            label: "pretrain".into(),
            num_clusters: 6,
            num_subpaths: 4,
            angle_spread_rad: 0.08,
            delay_spread_s: 100e-9,
            gain_decay: 0.25,
            correlation_distance_m: 50.0,
            line_of_sight: false,
            layout_seed: 0x524d_615f_4e4c,
        }
    }

    /// Urban-micro LOS flavoured deployment preset: one dominant cluster plus
    /// weaker scattered clusters, 12 m correlation distance.
    pub fn deploy() -> Self {
        Self {
            label: "deploy".into(),
            num_clusters: 4,
            num_subpaths: 4,
            angle_spread_rad: 0.04,
            delay_spread_s: 80e-9,
            gain_decay: 2.0,
            correlation_distance_m: 12.0,
            line_of_sight: true,
            layout_seed: 0x554d_695f_4c4f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.num_subpaths == 0 {
            return Err(Error::InvalidConfig(
                "scenario needs at least one cluster and one sub-path".into(),
            ));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.angle_spread_rad) || !nonneg(self.delay_spread_s) || !nonneg(self.gain_decay)
        {
            return Err(Error::InvalidConfig(
                "spreads and gain decay must be finite and nonnegative".into(),
            ));
        }
        if !(self.correlation_distance_m.is_finite() && self.correlation_distance_m > 0.0) {
            return Err(Error::InvalidConfig(
                "correlation distance must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable 64-bit tag of the label, used to separate RNG streams per scenario.
    pub fn stream_tag(&self) -> u64 {
        self.label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
                (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
            })
    }

    /// Normalized mean cluster powers; they sum to one.
    pub fn cluster_powers(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.num_clusters)
            .map(|p| libm::exp(-self.gain_decay * p as f64))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

/// Cell geometry shared by all UEs.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGeometry {
    pub cell_radius_m: f64,
    pub min_bs_distance_m: f64,
    pub moving_radius_m: f64,
}

impl Default for CellGeometry {
    fn default() -> Self {
        Self {
            cell_radius_m: 100.0,
            min_bs_distance_m: 10.0,
            moving_radius_m: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UePlacement {
    pub ue_id: u32,
    pub center_xy_m: [f64; 2],
    pub moving_radius_m: f64,
    pub cell_radius_m: f64,
    pub min_bs_distance_m: f64,
}

impl UePlacement {
    pub fn distance_m(&self) -> f64 {
        libm::hypot(self.center_xy_m[0], self.center_xy_m[1])
    }
}

/// Steering vector of a uniform linear array: entry `m` is
/// `exp(j 2 pi m (spacing/lambda) sin(theta))`.
pub fn steering_vector(theta: f64, cfg: &ArrayConfig) -> Vec<Complex64> {
    let step = 2.0 * PI * cfg.antenna_spacing_ratio * libm::sin(theta);
    (0..cfg.num_tx_antennas)
        .map(|m| {
            if m == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                cis(step * m as f64)
            }
        })
        .collect()
}

/// Draws a UE center uniformly over the annulus between the minimum BS
/// distance and the cell edge.
pub fn draw_ue_geometry(
    rng: &mut SimRng,
    cell_radius_m: f64,
    min_bs_distance_m: f64,
    moving_radius_m: f64,
    ue_id: u32,
) -> Result<UePlacement> {
    if !(min_bs_distance_m > 0.0 && min_bs_distance_m < cell_radius_m) || !(moving_radius_m >= 0.0)
    {
        return Err(Error::InvalidGeometry(alloc::format!(
            "need 0 < min distance ({min_bs_distance_m}) < cell radius ({cell_radius_m}) \
             and a nonnegative moving radius ({moving_radius_m})"
        )));
    }
    let u: f64 = rng.random();
    let (r0, r1) = (min_bs_distance_m, cell_radius_m);
    let radius = libm::sqrt(r0 * r0 + u * (r1 * r1 - r0 * r0)).clamp(r0, r1);
    let phi = rng.random_range(-PI..PI);
    Ok(UePlacement {
        ue_id,
        center_xy_m: [radius * libm::cos(phi), radius * libm::sin(phi)],
        moving_radius_m,
        cell_radius_m,
        min_bs_distance_m,
    })
}

/// Large-scale parameters of one cluster at a given position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterMean {
    pub angle_rad: f64,
    pub delay_s: f64,
    pub power: f64,
}

/// Per-node cluster draw: (angle offset, delay) for every cluster.
fn layout_node(scenario: &ScenarioParams, i: i64, j: i64) -> Vec<(f64, f64)> {
    let mut rng = child_rng(scenario.layout_seed, &[stream::LAYOUT, i as u64, j as u64]);
    (0..scenario.num_clusters)
        .map(|p| {
            let offset = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            let delay = rng.random::<f64>() * scenario.delay_spread_s;
            if p == 0 && scenario.line_of_sight {
                (0.0, 0.0)
            } else {
                (offset, delay)
            }
        })
        .collect()
}

/// Cluster means seen from `position`: the bearing from the BS plus a
/// spatially interpolated offset per cluster.
pub fn cluster_layout(scenario: &ScenarioParams, position: [f64; 2]) -> Vec<ClusterMean> {
    let d = scenario.correlation_distance_m;
    let gx = position[0] / d;
    let gy = position[1] / d;
    let (i0, j0) = (libm::floor(gx) as i64, libm::floor(gy) as i64);
    let (fx, fy) = (gx - i0 as f64, gy - j0 as f64);
    let corners = [
        (layout_node(scenario, i0, j0), (1.0 - fx) * (1.0 - fy)),
        (layout_node(scenario, i0 + 1, j0), fx * (1.0 - fy)),
        (layout_node(scenario, i0, j0 + 1), (1.0 - fx) * fy),
        (layout_node(scenario, i0 + 1, j0 + 1), fx * fy),
    ];
    let bearing = libm::atan2(position[1], position[0]);
    scenario
        .cluster_powers()
        .into_iter()
        .enumerate()
        .map(|(p, power)| {
            let (mut offset, mut delay) = (0.0, 0.0);
            for (node, w) in &corners {
                offset += w * node[p].0;
                delay += w * node[p].1;
            }
            ClusterMean {
                angle_rad: bearing + offset,
                delay_s: delay,
                power,
            }
        })
        .collect()
}

/// One draw of every sub-path of a UE.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRealization {
    pub angles_rad: Vec<f64>,
    pub gains: Vec<Complex64>,
    pub delays_s: Vec<f64>,
}

impl PathRealization {
    pub fn len(&self) -> usize {
        self.angles_rad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_rad.is_empty()
    }
}

fn laplace(rng: &mut SimRng, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let u: f64 = rng.random::<f64>() - 0.5;
    let mag = 1.0 - 2.0 * libm::fabs(u);
    // u == -0.5 would give ln(0); the generator's half-open range makes it
    // reachable, so clamp to the smallest positive f64.
    -scale * libm::copysign(1.0, u) * libm::log(mag.max(f64::MIN_POSITIVE))
}

/// Draws sub-path angles, complex gains and delays for a UE at
/// `placement.center_xy_m`.
pub fn draw_ue_scenario(
    placement: &UePlacement,
    scenario: &ScenarioParams,
    rng: &mut SimRng,
) -> PathRealization {
    let clusters = cluster_layout(scenario, placement.center_xy_m);
    let n = scenario.num_clusters * scenario.num_subpaths;
    let mut out = PathRealization {
        angles_rad: Vec::with_capacity(n),
        gains: Vec::with_capacity(n),
        delays_s: Vec::with_capacity(n),
    };
    let per_path = 1.0 / scenario.num_subpaths as f64;
    for c in &clusters {
        let sigma = libm::sqrt(c.power * per_path / 2.0);
        for _ in 0..scenario.num_subpaths {
            out.angles_rad
                .push(c.angle_rad + laplace(rng, scenario.angle_spread_rad));
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            out.gains.push(Complex64::new(sigma * re, sigma * im));
            out.delays_s.push(c.delay_s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    SpatialFrequency,
    AngularDelay,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::SpatialFrequency => "spatial-frequency",
            Domain::AngularDelay => "angular-delay",
        }
    }
}

/// Complex `nt x nc` channel matrix, row-major (antenna, then subcarrier).
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub nt: usize,
    pub nc: usize,
    pub data: Vec<Complex64>,
    pub domain: Domain,
}

impl CsiSample {
    pub fn zeros(nt: usize, nc: usize, domain: Domain) -> Self {
        Self {
            nt,
            nc,
            data: vec![Complex64::new(0.0, 0.0); nt * nc],
            domain,
        }
    }

    #[inline]
    pub fn at(&self, m: usize, n: usize) -> Complex64 {
        self.data[m * self.nc + n]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Column `n` (all antennas on subcarrier `n`).
    pub fn column(&self, n: usize) -> Vec<Complex64> {
        (0..self.nt).map(|m| self.at(m, n)).collect()
    }

    /// Angular power profile: energy per angular bin summed over delay taps.
    pub fn angular_profile(&self) -> Vec<f64> {
        (0..self.nt)
            .map(|m| (0..self.nc).map(|n| self.at(m, n).norm_sqr()).sum())
            .collect()
    }

    /// Rounds every component through IEEE single precision.
    pub fn round_to_f32(&mut self) {
        for z in &mut self.data {
            *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
        }
    }
}

/// Builds the spatial-frequency CSI of one realization. Each path contributes
/// `alpha * exp(-j 2 pi f_n tau) * a(theta)` to column `n`.
pub fn sample_channel(real: &PathRealization, cfg: &ArrayConfig) -> CsiSample {
    let (nt, nc) = (cfg.num_tx_antennas, cfg.num_subcarriers);
    let mut h = CsiSample::zeros(nt, nc, Domain::SpatialFrequency);
    for ((&theta, &alpha), &tau) in real
        .angles_rad
        .iter()
        .zip(&real.gains)
        .zip(&real.delays_s)
    {
        let a = steering_vector(theta, cfg);
        for n in 0..nc {
            let g = alpha * cis(-2.0 * PI * cfg.subcarrier_offset_hz(n) * tau);
            for (m, am) in a.iter().enumerate() {
                h.data[m * nc + n] += g * am;
            }
        }
    }
    h
}

/// Unitary DFT matrices for the angular (antenna) and delay (subcarrier) axes.
#[derive(Debug, Clone)]
pub struct DftPair {
    nt: usize,
    nc: usize,
    fa: Vec<Complex64>,
    fd: Vec<Complex64>,
}

fn unitary_dft(n: usize) -> Vec<Complex64> {
    let norm = 1.0 / libm::sqrt(n as f64);
    let mut f = Vec::with_capacity(n * n);
    for k in 0..n {
        for m in 0..n {
            // Reduce the index product first so the phase stays small.
            let e = (k * m) % n;
            f.push(cis(-2.0 * PI * e as f64 / n as f64) * norm);
        }
    }
    f
}

impl DftPair {
    pub fn new(nt: usize, nc: usize) -> Self {
        Self {
            nt,
            nc,
            fa: unitary_dft(nt),
            fd: unitary_dft(nc),
        }
    }

    /// `left * x * right` where `conj` selects the Hermitian (inverse) matrices.
    /// The DFT matrices are symmetric, so their Hermitian is the conjugate.
    fn apply(&self, x: &[Complex64], conj: bool) -> Vec<Complex64> {
        let (nt, nc) = (self.nt, self.nc);
        let pick = |z: Complex64| if conj { z.conj() } else { z };
        let mut tmp = vec![Complex64::new(0.0, 0.0); nt * nc];
        for k in 0..nt {
            for m in 0..nt {
                let f = pick(self.fa[k * nt + m]);
                for n in 0..nc {
                    tmp[k * nc + n] += f * x[m * nc + n];
                }
            }
        }
        let mut out = vec![Complex64::new(0.0, 0.0); nt * nc];
        for k in 0..nt {
            for n in 0..nc {
                let t = tmp[k * nc + n];
                for l in 0..nc {
                    out[k * nc + l] += t * pick(self.fd[n * nc + l]);
                }
            }
        }
        out
    }

    fn check(&self, h: &CsiSample, want: Domain) -> Result<()> {
        if h.domain != want {
            return Err(Error::WrongDomain {
                expected: want.name(),
                actual: h.domain.name(),
            });
        }
        if h.nt != self.nt || h.nc != self.nc || h.data.len() != h.nt * h.nc {
            return Err(crate::error::shape_err(&[self.nt, self.nc], &[h.nt, h.nc]));
        }
        Ok(())
    }

    pub fn to_angular_delay(&self, h: &CsiSample) -> Result<CsiSample> {
        self.check(h, Domain::SpatialFrequency)?;
        Ok(CsiSample {
            nt: h.nt,
            nc: h.nc,
            data: self.apply(&h.data, false),
            domain: Domain::AngularDelay,
        })
    }

    pub fn from_angular_delay(&self, h: &CsiSample) -> Result<CsiSample> {
        self.check(h, Domain::AngularDelay)?;
        Ok(CsiSample {
            nt: h.nt,
            nc: h.nc,
            data: self.apply(&h.data, true),
            domain: Domain::SpatialFrequency,
        })
    }

    /// Adjoint of [`DftPair::from_angular_delay`] applied to raw data; used to
    /// pull spatial-frequency gradients back to the angular-delay domain.
    pub(crate) fn pull_back(&self, g: &[Complex64]) -> Vec<Complex64> {
        self.apply(g, false)
    }
}

pub fn to_angular_delay(h: &CsiSample) -> Result<CsiSample> {
    DftPair::new(h.nt, h.nc).to_angular_delay(h)
}

pub fn from_angular_delay(h: &CsiSample) -> Result<CsiSample> {
    DftPair::new(h.nt, h.nc).from_angular_delay(h)
}

/// Affine map into the unit interval: `normalized = (x - offset) / scale`,
/// applied to real and imaginary parts alike.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub offset: f64,
    pub scale: f64,
}

impl NormParams {
    /// Fit over every real and imaginary component: the interval
    /// `[-a, a]`, `a` the largest magnitude seen, maps onto `[0, 1]`, so a
    /// zero entry lands on 0.5 for every dataset. A zero range maps the
    /// constant to 0.5.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a CsiSample>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in samples {
            for z in &s.data {
                lo = lo.min(z.re).min(z.im);
                hi = hi.max(z.re).max(z.im);
            }
        }
        if !lo.is_finite() {
            return Self {
                offset: 0.0,
                scale: 1.0,
            };
        }
        if hi > lo {
            let a = hi.abs().max(lo.abs());
            Self {
                offset: -a,
                scale: 2.0 * a,
            }
        } else {
            Self {
                offset: lo - 0.5,
                scale: 1.0,
            }
        }
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    #[inline]
    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }
}

/// Per-UE dataset in the angular-delay domain, unnormalized, with the
/// normalization fitted on its training split.
#[derive(Debug, Clone, PartialEq)]
pub struct UeDataset {
    pub ue_id: u32,
    pub train: Vec<CsiSample>,
    pub val: Vec<CsiSample>,
    pub test: Vec<CsiSample>,
    pub norm: NormParams,
}

impl UeDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Split sizes for `n` samples: validation and test get `floor(n/10)`
    /// each, training keeps the rest.
    pub fn split_sizes(n: usize) -> (usize, usize, usize) {
        let tenth = n / 10;
        (n - 2 * tenth, tenth, tenth)
    }
}

/// Generates `num_samples` CSI samples for one UE, each at an independent
/// uniform position inside its moving circle.
pub fn build_ue_dataset(
    placement: &UePlacement,
    scenario: &ScenarioParams,
    cfg: &ArrayConfig,
    num_samples: usize,
    rng: &mut SimRng,
) -> Result<UeDataset> {
    if num_samples < 10 {
        return Err(Error::InvalidConfig(alloc::format!(
            "need at least 10 samples per UE, got {num_samples}"
        )));
    }
    cfg.validate()?;
    scenario.validate()?;
    let dft = DftPair::new(cfg.num_tx_antennas, cfg.num_subcarriers);
    let mut samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let r = placement.moving_radius_m * libm::sqrt(rng.random::<f64>());
        let phi = rng.random_range(-PI..PI);
        let mut here = placement.clone();
        here.center_xy_m = [
            placement.center_xy_m[0] + r * libm::cos(phi),
            placement.center_xy_m[1] + r * libm::sin(phi),
        ];
        let real = draw_ue_scenario(&here, scenario, rng);
        let mut h = dft.to_angular_delay(&sample_channel(&real, cfg))?;
        h.round_to_f32();
        samples.push(h);
    }
    let (n_train, n_val, _) = UeDataset::split_sizes(num_samples);
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    let train = samples;
    let norm = NormParams::fit(&train);
    Ok(UeDataset {
        ue_id: placement.ue_id,
        train,
        val,
        test,
        norm,
    })
}

/// Places UEs `1..=num_ues` and generates their datasets. Each UE draws from
/// child streams keyed by (master seed, scenario, UE id), so any subset can be
/// regenerated independently.
pub fn generate_cell(
    cfg: &ArrayConfig,
    scenario: &ScenarioParams,
    geometry: &CellGeometry,
    num_ues: usize,
    num_samples: usize,
    master_seed: u64,
) -> Result<Vec<(UePlacement, UeDataset)>> {
    (1..=num_ues as u32)
        .map(|ue_id| {
            let placement = ue_placement(scenario, geometry, master_seed, ue_id)?;
            let ds = ue_dataset(&placement, scenario, cfg, num_samples, master_seed)?;
            Ok((placement, ds))
        })
        .collect()
}

pub fn ue_placement(
    scenario: &ScenarioParams,
    geometry: &CellGeometry,
    master_seed: u64,
    ue_id: u32,
) -> Result<UePlacement> {
    let tag = scenario.stream_tag();
    let mut rng = child_rng(master_seed, &[stream::PLACEMENT, tag, u64::from(ue_id)]);
    draw_ue_geometry(
        &mut rng,
        geometry.cell_radius_m,
        geometry.min_bs_distance_m,
        geometry.moving_radius_m,
        ue_id,
    )
}

pub fn ue_dataset(
    placement: &UePlacement,
    scenario: &ScenarioParams,
    cfg: &ArrayConfig,
    num_samples: usize,
    master_seed: u64,
) -> Result<UeDataset> {
    let tag = scenario.stream_tag();
    let seed = derive_seed(master_seed, &[stream::DATASET, tag, u64::from(placement.ue_id)]);
    build_ue_dataset(
        placement,
        scenario,
        cfg,
        num_samples,
        &mut crate::rng::rng_from_seed(seed),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn steering_vector_broadside_is_all_ones() {
        let cfg = ArrayConfig {
            num_tx_antennas: 4,
            ..ArrayConfig::desk()
        };
        for z in steering_vector(0.0, &cfg) {
            assert_eq!(z, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn steering_vector_endfire_half_wavelength_alternates() {
        let cfg = ArrayConfig {
            num_tx_antennas: 2,
            antenna_spacing_ratio: 0.5,
            ..ArrayConfig::desk()
        };
        let a = steering_vector(FRAC_PI_2, &cfg);
        assert!(close(a[0], Complex64::new(1.0, 0.0), 0.0));
        assert!(close(a[1], Complex64::new(-1.0, 0.0), 1e-12));
    }

    #[test]
    fn steering_vector_is_phase_only() {
        let cfg = ArrayConfig::full_scale();
        let mut rng = rng_from_seed(3);
        for _ in 0..100 {
            let a = steering_vector(rng.random_range(-PI..PI), &cfg);
            assert_eq!(a.len(), 32);
            assert_eq!(a[0], Complex64::new(1.0, 0.0));
            assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn geometry_rejects_min_beyond_cell() {
        let mut rng = rng_from_seed(0);
        assert!(matches!(
            draw_ue_geometry(&mut rng, 10.0, 10.0, 5.0, 1),
            Err(Error::InvalidGeometry(_))
        ));
        assert!(draw_ue_geometry(&mut rng, 10.0, 20.0, 5.0, 1).is_err());
    }

    #[test]
    fn geometry_respects_annulus_and_seed() {
        let a = draw_ue_geometry(&mut rng_from_seed(9), 100.0, 10.0, 5.0, 4).unwrap();
        let b = draw_ue_geometry(&mut rng_from_seed(9), 100.0, 10.0, 5.0, 4).unwrap();
        assert_eq!(a, b);
        let mut rng = rng_from_seed(1);
        for _ in 0..1000 {
            let p = draw_ue_geometry(&mut rng, 100.0, 10.0, 5.0, 1).unwrap();
            let d = p.distance_m();
            assert!((10.0 - 1e-9..=100.0 + 1e-9).contains(&d), "{d}");
        }
    }

    #[test]
    fn zero_spread_single_path_sits_on_cluster_mean() {
        let scenario = ScenarioParams {
            num_clusters: 1,
            num_subpaths: 1,
            angle_spread_rad: 0.0,
            line_of_sight: false,
            ..ScenarioParams::deploy()
        };
        let placement = draw_ue_geometry(&mut rng_from_seed(5), 100.0, 10.0, 5.0, 1).unwrap();
        let mean = cluster_layout(&scenario, placement.center_xy_m)[0];
        for seed in 0..5 {
            let real = draw_ue_scenario(&placement, &scenario, &mut rng_from_seed(seed));
            assert_eq!(real.angles_rad, vec![mean.angle_rad]);
        }
    }

    #[test]
    fn los_cluster_points_at_the_ue() {
        let scenario = ScenarioParams::deploy();
        let pos = [30.0, 40.0];
        let c = cluster_layout(&scenario, pos);
        assert!((c[0].angle_rad - libm::atan2(40.0, 30.0)).abs() < 1e-12);
        assert_eq!(c[0].delay_s, 0.0);
    }

    #[test]
    fn distant_ues_draw_independent_clusters() {
        let scenario = ScenarioParams::deploy();
        assert_eq!(scenario.correlation_distance_m, 12.0);
        let a = cluster_layout(&scenario, [20.0, 20.0]);
        let b = cluster_layout(&scenario, [80.0, 20.0]);
        let off = |c: &[ClusterMean], pos: [f64; 2]| -> Vec<f64> {
            let bearing = libm::atan2(pos[1], pos[0]);
            c.iter().skip(1).map(|m| m.angle_rad - bearing).collect()
        };
        let (oa, ob) = (off(&a, [20.0, 20.0]), off(&b, [80.0, 20.0]));
        for (x, y) in oa.iter().zip(&ob) {
            assert!((x - y).abs() > 1e-6);
        }
    }

    #[test]
    fn nearby_positions_share_interpolated_clusters() {
        let scenario = ScenarioParams::deploy();
        let a = cluster_layout(&scenario, [40.0, 30.0]);
        let b = cluster_layout(&scenario, [40.01, 30.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x.angle_rad - y.angle_rad).abs() < 1e-2);
            assert!((x.delay_s - y.delay_s).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_single_path_gives_all_ones_columns() {
        let cfg = ArrayConfig::desk();
        let real = PathRealization {
            angles_rad: vec![0.0],
            gains: vec![Complex64::new(1.0, 0.0)],
            delays_s: vec![0.0],
        };
        let h = sample_channel(&real, &cfg);
        assert_eq!(h.domain, Domain::SpatialFrequency);
        assert!(h.data.iter().all(|z| close(*z, Complex64::new(1.0, 0.0), 1e-12)));
    }

    #[test]
    fn delayed_path_rotates_phase_linearly_across_subcarriers() {
        let cfg = ArrayConfig::desk();
        let tau = 30e-9;
        let real = PathRealization {
            angles_rad: vec![0.3],
            gains: vec![Complex64::new(0.7, -0.2)],
            delays_s: vec![tau],
        };
        let h = sample_channel(&real, &cfg);
        let step = cis(-2.0 * PI * cfg.subcarrier_offset_hz(1) * tau);
        for m in 0..cfg.num_tx_antennas {
            for n in 1..cfg.num_subcarriers {
                assert!((h.at(m, n).norm() - h.at(m, 0).norm()).abs() < 1e-12);
                assert!(close(h.at(m, n), h.at(m, n - 1) * step, 1e-12));
            }
        }
    }

    #[test]
    fn random_realizations_are_finite() {
        let cfg = ArrayConfig::desk();
        let scenario = ScenarioParams::pretrain();
        for seed in 0..1000 {
            let mut rng = rng_from_seed(seed);
            let p = draw_ue_geometry(&mut rng, 100.0, 10.0, 5.0, 1).unwrap();
            let h = sample_channel(&draw_ue_scenario(&p, &scenario, &mut rng), &cfg);
            assert_eq!(h.data.len(), 64);
            assert!(h.is_finite());
        }
    }

    #[test]
    fn angular_delay_round_trip_and_norm() {
        let cfg = ArrayConfig::desk();
        let mut rng = rng_from_seed(11);
        let p = draw_ue_geometry(&mut rng, 100.0, 10.0, 5.0, 1).unwrap();
        let h = sample_channel(&draw_ue_scenario(&p, &ScenarioParams::deploy(), &mut rng), &cfg);
        let ad = to_angular_delay(&h).unwrap();
        let back = from_angular_delay(&ad).unwrap();
        let err: f64 = h
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        assert!(libm::sqrt(err / h.frobenius_sq()) < 1e-6);
        assert!((ad.frobenius_sq() / h.frobenius_sq() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn transform_rejects_wrong_domain() {
        let h = CsiSample::zeros(4, 4, Domain::AngularDelay);
        assert!(matches!(
            to_angular_delay(&h),
            Err(Error::WrongDomain { .. })
        ));
        let h = CsiSample::zeros(4, 4, Domain::SpatialFrequency);
        assert!(from_angular_delay(&h).is_err());
    }

    #[test]
    fn broadside_flat_path_concentrates_in_first_bin() {
        let cfg = ArrayConfig::desk();
        let real = PathRealization {
            angles_rad: vec![0.0],
            gains: vec![Complex64::new(1.0, 0.0)],
            delays_s: vec![0.0],
        };
        let ad = to_angular_delay(&sample_channel(&real, &cfg)).unwrap();
        let total = ad.frobenius_sq();
        assert!(ad.at(0, 0).norm_sqr() / total >= 0.99);
    }

    #[test]
    fn dataset_splits_and_normalization() {
        let cfg = ArrayConfig::desk();
        let scenario = ScenarioParams::deploy();
        let p = draw_ue_geometry(&mut rng_from_seed(2), 100.0, 10.0, 5.0, 7).unwrap();
        let ds = build_ue_dataset(&p, &scenario, &cfg, 100, &mut rng_from_seed(4)).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (80, 10, 10));
        assert_eq!(ds.ue_id, 7);
        for s in &ds.train {
            assert_eq!(s.domain, Domain::AngularDelay);
            for z in &s.data {
                for v in [z.re, z.im] {
                    let y = ds.norm.normalize(v);
                    assert!((0.0..=1.0).contains(&y), "{y}");
                    let back = ds.norm.denormalize(y);
                    assert!((back - v).abs() <= 1e-6 * v.abs().max(1e-12));
                }
            }
        }
        assert!(build_ue_dataset(&p, &scenario, &cfg, 9, &mut rng_from_seed(4)).is_err());
    }

    #[test]
    fn degenerate_range_maps_to_half() {
        let s = CsiSample {
            nt: 1,
            nc: 1,
            data: vec![Complex64::new(2.0, 2.0)],
            domain: Domain::AngularDelay,
        };
        let n = NormParams::fit([&s]);
        assert!(n.scale > 0.0);
        assert_eq!(n.normalize(2.0), 0.5);
    }

    #[test]
    fn split_sizes_give_remainder_to_train() {
        assert_eq!(UeDataset::split_sizes(100), (80, 10, 10));
        assert_eq!(UeDataset::split_sizes(109), (89, 10, 10));
        assert_eq!(UeDataset::split_sizes(10), (8, 1, 1));
    }
}
