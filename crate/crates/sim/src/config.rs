//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, keys carry a section
//! prefix (`feel.rounds = 300`). Unset keys keep their desk-scale defaults.
//! Lists are comma separated; optional bit widths accept `none`.
//!
//! The config hash is SHA-256 over the canonical dump (every semantic key,
//! sorted, defaults filled in), so it ignores line order and comments.

use std::fmt::Write as _;
use std::path::Path;

use feel_core::autoencoder::{AutoencoderConfig, LossKind};
use feel_core::channel::{ArrayConfig, CellGeometry, ScenarioParams};
use feel_core::feel::{AggregationDenominator, FeelConfig};
use feel_core::personalize::PersonalizationConfig;
use feel_core::quant::QuantPolicy;
use feel_core::trainer::OptimizerKind;
use sha2::{Digest, Sha256};

use crate::error::{SimError, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentId {
    CompareFrameworks,
    QuantSweep,
    SampleSweep,
    UeSweep,
    PersonalizeTradeoff,
    LocalEpochSweep,
    MovingRangeSweep,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::CompareFrameworks,
        ExperimentId::QuantSweep,
        ExperimentId::SampleSweep,
        ExperimentId::UeSweep,
        ExperimentId::PersonalizeTradeoff,
        ExperimentId::LocalEpochSweep,
        ExperimentId::MovingRangeSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::CompareFrameworks => "compare-frameworks",
            ExperimentId::QuantSweep => "quant-sweep",
            ExperimentId::SampleSweep => "sample-sweep",
            ExperimentId::UeSweep => "ue-sweep",
            ExperimentId::PersonalizeTradeoff => "personalize-tradeoff",
            ExperimentId::LocalEpochSweep => "local-epoch-sweep",
            ExperimentId::MovingRangeSweep => "moving-range-sweep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }

    /// Index used as the experiment component of run seeds.
    pub fn tag(self) -> u64 {
        Self::ALL.iter().position(|&e| e == self).unwrap() as u64 + 1
    }
}

/// Grid axes of the sweep experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    /// 32 is the unquantized reference.
    pub uplink_bits: Vec<u8>,
    pub downlink_bits: Vec<u8>,
    pub samples_per_ue: Vec<usize>,
    pub num_ues: Vec<usize>,
    pub finetune_epochs: Vec<usize>,
    pub local_epochs: Vec<usize>,
    /// Scales the round count of each local-epoch point by
    /// `train.local_epochs / E`, so every point spends the gradient-step
    /// budget of the base config.
    pub local_epochs_equal_steps: bool,
    pub moving_radius_m: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            uplink_bits: vec![1, 2, 4, 8, 32],
            downlink_bits: vec![1, 2, 4, 8, 32],
            samples_per_ue: vec![100, 250, 500],
            num_ues: vec![5, 10, 20],
            finetune_epochs: vec![0, 5, 10, 20, 40],
            local_epochs: vec![1, 2, 4],
            local_epochs_equal_steps: false,
            moving_radius_m: vec![1.0, 5.0, 20.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub master_seed: u64,
    pub array: ArrayConfig,
    pub deploy: ScenarioParams,
    pub pretrain: ScenarioParams,
    pub cell: CellGeometry,
    pub samples_per_ue: usize,
    pub pretrain_num_ues: usize,
    pub pretrain_samples_per_ue: usize,
    pub model: AutoencoderConfig,
    pub feel: FeelConfig,
    pub personalize: PersonalizationConfig,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentId::CompareFrameworks,
            master_seed: 7,
            array: ArrayConfig::desk(),
            deploy: ScenarioParams::deploy(),
            pretrain: ScenarioParams::pretrain(),
            cell: CellGeometry::default(),
            samples_per_ue: 500,
            pretrain_num_ues: 10,
            pretrain_samples_per_ue: 500,
            model: AutoencoderConfig::desk(),
            feel: FeelConfig {
                quant: QuantPolicy::default(),
                ..FeelConfig::default()
            },
            personalize: PersonalizationConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

type Getter = fn(&ExperimentConfig) -> String;
type Setter = fn(&mut ExperimentConfig, &str) -> Result<(), String>;

struct Field {
    key: &'static str,
    get: Getter,
    set: Setter,
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn bits(v: &str) -> Result<Option<u8>, String> {
    if v == "none" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn show_bits(b: Option<u8>) -> String {
    b.map_or_else(|| "none".into(), |b| b.to_string())
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(s.trim())).collect()
}

fn show_list<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn kernel(v: &str) -> Result<(usize, usize), String> {
    let (a, b) = v
        .trim()
        .split_once('x')
        .ok_or_else(|| format!("expected HxW, got {v:?}"))?;
    Ok((num(a)?, num(b)?))
}

macro_rules! f {
    ($key:expr, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Field {
            key: $key,
            get: |$c| $get,
            set: |$m, $v| {
                $set;
                Ok(())
            },
        }
    };
}

macro_rules! scenario_fields {
    ($p:literal, $s:ident) => {
        [
            f!(concat!($p, ".label"), |c| c.$s.label.clone(), |c, v| c.$s.label = v.to_string()),
            f!(concat!($p, ".num_clusters"), |c| c.$s.num_clusters.to_string(), |c, v| c.$s.num_clusters = num(v)?),
            f!(concat!($p, ".num_subpaths"), |c| c.$s.num_subpaths.to_string(), |c, v| c.$s.num_subpaths = num(v)?),
            f!(concat!($p, ".angle_spread_rad"), |c| format!("{:?}", c.$s.angle_spread_rad), |c, v| c.$s.angle_spread_rad = num(v)?),
            f!(concat!($p, ".delay_spread_s"), |c| format!("{:?}", c.$s.delay_spread_s), |c, v| c.$s.delay_spread_s = num(v)?),
            f!(concat!($p, ".gain_decay"), |c| format!("{:?}", c.$s.gain_decay), |c, v| c.$s.gain_decay = num(v)?),
            f!(concat!($p, ".correlation_distance_m"), |c| format!("{:?}", c.$s.correlation_distance_m), |c, v| c.$s.correlation_distance_m = num(v)?),
            f!(concat!($p, ".line_of_sight"), |c| c.$s.line_of_sight.to_string(), |c, v| c.$s.line_of_sight = flag(v)?),
            f!(concat!($p, ".layout_seed"), |c| c.$s.layout_seed.to_string(), |c, v| c.$s.layout_seed = num(v)?),
        ]
    };
}

#[rustfmt::skip]
fn fields() -> Vec<Field> {
    let mut v = vec![
        f!("experiment", |c| c.experiment.name().into(), |c, v| {
            c.experiment = ExperimentId::parse(v).ok_or_else(|| format!("unknown experiment {v:?}"))?
        }),
        f!("master_seed", |c| c.master_seed.to_string(), |c, v| c.master_seed = num(v)?),

        f!("array.num_tx_antennas", |c| c.array.num_tx_antennas.to_string(), |c, v| c.array.num_tx_antennas = num(v)?),
        f!("array.antenna_spacing_ratio", |c| format!("{:?}", c.array.antenna_spacing_ratio), |c, v| c.array.antenna_spacing_ratio = num(v)?),
        f!("array.num_subcarriers", |c| c.array.num_subcarriers.to_string(), |c, v| c.array.num_subcarriers = num(v)?),
        f!("array.bandwidth_hz", |c| format!("{:?}", c.array.bandwidth_hz), |c, v| c.array.bandwidth_hz = num(v)?),
        f!("array.center_freq_hz", |c| format!("{:?}", c.array.center_freq_hz), |c, v| c.array.center_freq_hz = num(v)?),

        f!("cell.cell_radius_m", |c| format!("{:?}", c.cell.cell_radius_m), |c, v| c.cell.cell_radius_m = num(v)?),
        f!("cell.min_bs_distance_m", |c| format!("{:?}", c.cell.min_bs_distance_m), |c, v| c.cell.min_bs_distance_m = num(v)?),
        f!("cell.moving_radius_m", |c| format!("{:?}", c.cell.moving_radius_m), |c, v| c.cell.moving_radius_m = num(v)?),

        f!("data.samples_per_ue", |c| c.samples_per_ue.to_string(), |c, v| c.samples_per_ue = num(v)?),
        f!("data.pretrain_num_ues", |c| c.pretrain_num_ues.to_string(), |c, v| c.pretrain_num_ues = num(v)?),
        f!("data.pretrain_samples_per_ue", |c| c.pretrain_samples_per_ue.to_string(), |c, v| c.pretrain_samples_per_ue = num(v)?),

        f!("model.codeword_dim", |c| c.model.codeword_dim.to_string(), |c, v| c.model.codeword_dim = num(v)?),
        f!("model.branch_kernels", |c| {
            c.model.branch_kernels.iter().map(|(h, w)| format!("{h}x{w}")).collect::<Vec<_>>().join(",")
        }, |c, v| {
            let ks: Vec<&str> = v.split(',').collect();
            if ks.len() != 2 {
                return Err("branch_kernels needs exactly two HxW entries".into());
            }
            c.model.branch_kernels = [kernel(ks[0])?, kernel(ks[1])?]
        }),
        f!("model.width", |c| c.model.width.to_string(), |c, v| c.model.width = num(v)?),
        f!("model.num_crblocks", |c| c.model.num_crblocks.to_string(), |c, v| c.model.num_crblocks = num(v)?),
        f!("model.batch_norm", |c| c.model.batch_norm.to_string(), |c, v| c.model.batch_norm = flag(v)?),

        f!("feel.num_ues", |c| c.feel.num_ues.to_string(), |c, v| c.feel.num_ues = num(v)?),
        f!("feel.scheduled_per_round", |c| c.feel.scheduled_per_round.to_string(), |c, v| c.feel.scheduled_per_round = num(v)?),
        f!("feel.rounds", |c| c.feel.rounds.to_string(), |c, v| c.feel.rounds = num(v)?),
        f!("feel.aggregation", |c| match c.feel.aggregation {
            AggregationDenominator::TotalAllUes => "total_all_ues".into(),
            AggregationDenominator::TotalScheduled => "total_scheduled".into(),
        }, |c, v| c.feel.aggregation = match v {
            "total_all_ues" => AggregationDenominator::TotalAllUes,
            "total_scheduled" => AggregationDenominator::TotalScheduled,
            _ => return Err(format!("unknown aggregation {v:?}")),
        }),
        f!("feel.pretrain_epochs", |c| c.feel.pretrain_epochs.unwrap_or(0).to_string(), |c, v| {
            let e: usize = num(v)?;
            c.feel.pretrain_epochs = (e > 0).then_some(e)
        }),

        f!("train.batch_size", |c| c.feel.train.batch_size.to_string(), |c, v| c.feel.train.batch_size = num(v)?),
        f!("train.local_epochs", |c| c.feel.train.local_epochs.to_string(), |c, v| c.feel.train.local_epochs = num(v)?),
        f!("train.learning_rate", |c| format!("{:?}", c.feel.train.learning_rate), |c, v| c.feel.train.learning_rate = num(v)?),
        f!("train.lr_drop_factor", |c| format!("{:?}", c.feel.train.lr_drop_factor), |c, v| c.feel.train.lr_drop_factor = num(v)?),
        f!("train.lr_patience", |c| c.feel.train.lr_patience.to_string(), |c, v| c.feel.train.lr_patience = num(v)?),
        f!("train.lr_min_improvement_db", |c| format!("{:?}", c.feel.train.lr_min_improvement_db), |c, v| c.feel.train.lr_min_improvement_db = num(v)?),
        f!("train.optimizer", |c| match c.feel.train.optimizer {
            OptimizerKind::Adam => "adam".into(),
            OptimizerKind::Sgd => "sgd".into(),
        }, |c, v| c.feel.train.optimizer = match v {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            _ => return Err(format!("unknown optimizer {v:?}")),
        }),
        f!("train.loss", |c| match c.feel.train.loss {
            LossKind::Mse => "mse".into(),
            LossKind::Cosine => "cosine".into(),
        }, |c, v| c.feel.train.loss = match v {
            "mse" => LossKind::Mse,
            "cosine" => LossKind::Cosine,
            _ => return Err(format!("unknown loss {v:?}")),
        }),

        f!("quant.uplink_bits", |c| show_bits(c.feel.quant.uplink_bits), |c, v| c.feel.quant.uplink_bits = bits(v)?),
        f!("quant.downlink_bits", |c| show_bits(c.feel.quant.downlink_bits), |c, v| c.feel.quant.downlink_bits = bits(v)?),
        f!("quant.stochastic_rounding", |c| c.feel.quant.stochastic_rounding.to_string(), |c, v| c.feel.quant.stochastic_rounding = flag(v)?),

        f!("personalize.epochs", |c| c.personalize.epochs.to_string(), |c, v| c.personalize.epochs = num(v)?),
        f!("personalize.learning_rate", |c| format!("{:?}", c.personalize.learning_rate), |c, v| c.personalize.learning_rate = num(v)?),
        f!("personalize.monitor_fraction", |c| format!("{:?}", c.personalize.monitor_fraction), |c, v| c.personalize.monitor_fraction = num(v)?),

        f!("sweep.uplink_bits", |c| show_list(&c.sweep.uplink_bits), |c, v| c.sweep.uplink_bits = list(v)?),
        f!("sweep.downlink_bits", |c| show_list(&c.sweep.downlink_bits), |c, v| c.sweep.downlink_bits = list(v)?),
        f!("sweep.samples_per_ue", |c| show_list(&c.sweep.samples_per_ue), |c, v| c.sweep.samples_per_ue = list(v)?),
        f!("sweep.num_ues", |c| show_list(&c.sweep.num_ues), |c, v| c.sweep.num_ues = list(v)?),
        f!("sweep.finetune_epochs", |c| show_list(&c.sweep.finetune_epochs), |c, v| c.sweep.finetune_epochs = list(v)?),
        f!("sweep.local_epochs", |c| show_list(&c.sweep.local_epochs), |c, v| c.sweep.local_epochs = list(v)?),
        f!("sweep.local_epochs_equal_steps", |c| c.sweep.local_epochs_equal_steps.to_string(), |c, v| c.sweep.local_epochs_equal_steps = flag(v)?),
        f!("sweep.moving_radius_m", |c| show_list(&c.sweep.moving_radius_m), |c, v| c.sweep.moving_radius_m = list(v)?),
    ];
    v.extend(scenario_fields!("scenario.deploy", deploy));
    v.extend(scenario_fields!("scenario.pretrain", pretrain));
    v.sort_by_key(|f| f.key);
    v
}

impl ExperimentConfig {
    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> SimResult<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> SimResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            SimError::Usage(m) => SimError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, text: &str) -> SimResult<()> {
        let table = fields();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimError::Usage(format!("line {lineno}: expected key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            let field = table
                .iter()
                .find(|f| f.key == k)
                .ok_or_else(|| SimError::Usage(format!("line {lineno}: unknown key {k:?}")))?;
            if !seen.insert(k.to_string()) {
                return Err(SimError::Usage(format!("line {lineno}: duplicate key {k:?}")));
            }
            (field.set)(self, v).map_err(|m| SimError::Usage(format!("line {lineno}: {k}: {m}")))?;
        }
        self.model.nt = self.array.num_tx_antennas;
        self.model.nc = self.array.num_subcarriers;
        Ok(())
    }

    /// Every semantic field as sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for f in fields() {
            writeln!(out, "{} = {}", f.key, (f.get)(self)).unwrap();
        }
        out
    }

    /// Hex SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> SimResult<()> {
        self.array.validate()?;
        self.deploy.validate()?;
        self.pretrain.validate()?;
        self.model.validate()?;
        self.feel.validate()?;
        self.personalize.validate()?;
        if (self.model.nt, self.model.nc) != (self.array.num_tx_antennas, self.array.num_subcarriers) {
            return Err(SimError::Usage("model geometry differs from the array geometry".into()));
        }
        if self.deploy.label == self.pretrain.label {
            return Err(SimError::Usage("deploy and pretrain scenarios need distinct labels".into()));
        }
        if self.samples_per_ue < 10 {
            return Err(SimError::Usage("data.samples_per_ue must be at least 10".into()));
        }
        if self.feel.pretrain_epochs.is_some()
            && (self.pretrain_num_ues == 0 || self.pretrain_samples_per_ue < 10)
        {
            return Err(SimError::Usage(
                "pretraining needs data.pretrain_num_ues >= 1 and data.pretrain_samples_per_ue >= 10".into(),
            ));
        }
        let s = &self.sweep;
        if s.uplink_bits.iter().chain(&s.downlink_bits).any(|&b| !(1..=16).contains(&b) && b != 32) {
            return Err(SimError::Usage("sweep bit widths must lie in 1..=16 or be 32".into()));
        }
        if s.finetune_epochs.first() != Some(&0) || s.finetune_epochs.windows(2).any(|p| p[0] >= p[1]) {
            return Err(SimError::Usage(
                "sweep.finetune_epochs must start at 0 and increase strictly".into(),
            ));
        }
        if s.samples_per_ue.iter().any(|&n| n < 10) {
            return Err(SimError::Usage("sweep.samples_per_ue entries must be at least 10".into()));
        }
        if s.num_ues.iter().any(|&k| k < self.feel.scheduled_per_round) {
            return Err(SimError::Usage(
                "sweep.num_ues entries must be at least feel.scheduled_per_round".into(),
            ));
        }
        if s.local_epochs.contains(&0) {
            return Err(SimError::Usage("sweep.local_epochs entries must be positive".into()));
        }
        let base_steps = self.feel.rounds * self.feel.train.local_epochs;
        if s.local_epochs_equal_steps && s.local_epochs.iter().any(|&e| base_steps % e != 0) {
            return Err(SimError::Usage(
                "with sweep.local_epochs_equal_steps, feel.rounds * train.local_epochs must be divisible by every sweep.local_epochs entry".into(),
            ));
        }
        if s.moving_radius_m.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(SimError::Usage("sweep.moving_radius_m entries must be nonnegative".into()));
        }
        Ok(())
    }
}
