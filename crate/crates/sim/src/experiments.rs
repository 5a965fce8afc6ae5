//! Experiment grids. Every experiment draws its datasets from the master
//! seed alone, starts from one shared initial model, and seeds its training
//! randomness from (master seed, experiment id), so grid points within an
//! experiment see the same schedule and batch order and differ only in the
//! swept setting.

use std::path::{Path, PathBuf};
use std::time::Instant;

use feel_core::autoencoder::{to_db, Autoencoder, SampleSet};
use feel_core::channel::{generate_cell, UeDataset};
use feel_core::feel::{
    g_nmse, i_nmse, mean_g_nmse, pretrain_global, run_cl, run_feel, run_il,
    Federation, FeelConfig, FeelOutcome,
};
use feel_core::nn::ParamSet;
use feel_core::personalize::{
    fine_tune, monitor_and_select, tradeoff_sweep, Selection, TradeoffRow,
};
use feel_core::quant::{quantize_params, BASELINE_BITS};
use feel_core::rng::{child_rng, derive_seed, stream};

use crate::config::{ExperimentConfig, ExperimentId};
use crate::error::{SimError, SimResult};
use crate::formats;
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framework {
    Il,
    Cl,
    Feel,
    PFeel,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::Il => "IL",
            Framework::Cl => "CL",
            Framework::Feel => "FEEL",
            Framework::PFeel => "pFEEL",
        }
    }
}

/// One line of the summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// Grid point label, e.g. `uplink-2`.
    pub run: String,
    pub framework: Framework,
    pub g_nmse_db: f64,
    pub i_nmse_db: f64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub gradient_steps: usize,
}

/// Per-round record of one FEEL run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub run: String,
    pub outcome: FeelOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub experiment: ExperimentId,
    pub config_hash: String,
    pub rows: Vec<SummaryRow>,
    pub histories: Vec<RunHistory>,
    /// Only filled by personalize-tradeoff.
    pub tradeoff: Vec<TradeoffRow>,
    pub wall_clock_s: f64,
}

impl MetricsReport {
    pub fn row(&self, run: &str, fw: Framework) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.run == run && r.framework == fw)
    }
}

/// Where datasets come from: files written by `generate-data`, or the
/// same datasets regenerated in memory.
#[derive(Debug, Clone, Default)]
pub struct DataSource {
    pub dir: Option<PathBuf>,
}

pub fn dataset_path(dir: &Path, scenario: &str, ue_id: u32) -> PathBuf {
    dir.join(scenario).join(format!("ue_{ue_id:03}.feelcsi"))
}

fn generate(cfg: &ExperimentConfig, pretrain: bool, num_ues: usize, samples: usize) -> SimResult<Vec<UeDataset>> {
    let scenario = if pretrain { &cfg.pretrain } else { &cfg.deploy };
    Ok(generate_cell(&cfg.array, scenario, &cfg.cell, num_ues, samples, cfg.master_seed)?
        .into_iter()
        .map(|(_, ds)| ds)
        .collect())
}

impl DataSource {
    fn load(&self, cfg: &ExperimentConfig, pretrain: bool) -> SimResult<Vec<UeDataset>> {
        let (num_ues, samples) = if pretrain {
            (cfg.pretrain_num_ues, cfg.pretrain_samples_per_ue)
        } else {
            (cfg.feel.num_ues, cfg.samples_per_ue)
        };
        let Some(dir) = &self.dir else {
            return generate(cfg, pretrain, num_ues, samples);
        };
        let label = if pretrain { &cfg.pretrain.label } else { &cfg.deploy.label };
        (1..=num_ues as u32)
            .map(|id| {
                let path = dataset_path(dir, label, id);
                if !path.exists() {
                    return Err(SimError::io(
                        &path,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset; run generate-data first"),
                    ));
                }
                let ds = formats::read_dataset(&path)?;
                let dims = ds.train.first().map(|s| (s.nt, s.nc));
                if ds.ue_id != id
                    || ds.len() != samples
                    || dims != Some((cfg.array.num_tx_antennas, cfg.array.num_subcarriers))
                {
                    return Err(SimError::format(&path, "dataset does not match the configuration"));
                }
                Ok(ds)
            })
            .collect()
    }
}

/// Builds the model and the shared starting point `w0`, pretrained when
/// `feel.pretrain_epochs` is set.
pub fn initial_model(cfg: &ExperimentConfig, src: &DataSource) -> SimResult<(Autoencoder, ParamSet)> {
    let mut rng = child_rng(cfg.master_seed, &[stream::INIT]);
    let (ae, w) = Autoencoder::build(&cfg.model, &mut rng)?;
    let Some(epochs) = cfg.feel.pretrain_epochs else {
        return Ok((ae, w));
    };
    let sets = src
        .load(cfg, true)?
        .iter()
        .map(SampleSet::train)
        .collect::<feel_core::Result<Vec<_>>>()?;
    let data = SampleSet::concat(&sets)?;
    let w0 = pretrain_global(&ae, &w, &data, &cfg.feel.train, epochs, cfg.master_seed)?;
    Ok((ae, w0))
}

fn check_history(run: &str, fc: &FeelConfig, out: &FeelOutcome) -> SimResult<()> {
    let fail = |m: String| Err(SimError::Invariant(format!("{run}: {m}")));
    if out.history.len() != fc.rounds {
        return fail(format!("{} rounds recorded, expected {}", out.history.len(), fc.rounds));
    }
    let (mut up, mut down) = (0, 0);
    for r in &out.history {
        let distinct = r.scheduled.windows(2).all(|p| p[0] < p[1]);
        if r.scheduled.len() != fc.scheduled_per_round || !distinct {
            return fail(format!("round {} scheduled {:?}", r.round, r.scheduled));
        }
        if r.cum_uplink_bits < up || r.cum_downlink_bits < down {
            return fail(format!("bit counters decreased in round {}", r.round));
        }
        (up, down) = (r.cum_uplink_bits, r.cum_downlink_bits);
        if !r.gnmse_db.is_finite() || !r.mean_local_loss.is_finite() {
            return fail(format!("non-finite metric in round {}", r.round));
        }
    }
    Ok(())
}

fn finite(rows: &[SummaryRow]) -> SimResult<()> {
    match rows.iter().find(|r| !r.g_nmse_db.is_finite() || !r.i_nmse_db.is_finite()) {
        Some(r) => Err(SimError::Invariant(format!(
            "{} {}: non-finite final metric",
            r.run,
            r.framework.name()
        ))),
        None => Ok(()),
    }
}

/// What a single grid point should produce besides FEEL.
#[derive(Debug, Clone, Copy, Default)]
struct Extras {
    il: bool,
    cl: bool,
    pfeel: bool,
}

struct Point<'a> {
    ae: &'a Autoencoder,
    w0: &'a ParamSet,
    fed: &'a Federation,
    fc: &'a FeelConfig,
    cfg: &'a ExperimentConfig,
    seed: u64,
}

/// Personalizes every UE from `global` with the monitored fallback.
fn personalize_monitored(p: &Point, global: &ParamSet) -> SimResult<Vec<ParamSet>> {
    p.fed
        .clients
        .iter()
        .map(|c| {
            let tuned = fine_tune(p.ae, global, &c.train, &p.cfg.personalize, &p.fc.train, p.seed, c.ue_id)?;
            let fresh = c.val.tail_fraction(p.cfg.personalize.monitor_fraction);
            let (w, _sel): (ParamSet, Selection) = monitor_and_select(p.ae, &tuned, global, &fresh)?;
            Ok(w)
        })
        .collect()
}

fn run_point(p: &Point, run: &str, extras: Extras) -> SimResult<(Vec<SummaryRow>, RunHistory)> {
    let out = run_feel(p.ae, p.w0, p.fed, p.fc, p.seed)?;
    check_history(run, p.fc, &out)?;
    let last = out.history.last().expect("at least one round");
    let (up, down) = (last.cum_uplink_bits, last.cum_downlink_bits);
    let steps = out.total_steps;
    let row = |fw, g: f64, i: f64, up, down, steps| SummaryRow {
        run: run.to_string(),
        framework: fw,
        g_nmse_db: to_db(g),
        i_nmse_db: to_db(i),
        uplink_bits: up,
        downlink_bits: down,
        gradient_steps: steps,
    };
    let mut rows = Vec::new();
    if extras.il {
        let il = run_il(p.ae, p.w0, p.fed, &p.fc.train, steps, p.fc.rounds, p.seed)?;
        let g = mean_g_nmse(p.ae, &il, &p.fed.mixed_test)?;
        let i = i_nmse(p.ae, p.fed, |k| &il[k])?;
        rows.push(row(Framework::Il, g, i, 0, 0, steps));
    }
    if extras.cl {
        let (cl, _) = run_cl(p.ae, p.w0, p.fed, &p.fc.train, steps, p.fc.rounds, p.seed)?;
        let g = g_nmse(p.ae, &cl, &p.fed.mixed_test)?;
        let i = i_nmse(p.ae, p.fed, |_| &cl)?;
        // Every UE ships its raw training CSI once.
        let per_sample = (2 * p.cfg.model.nt * p.cfg.model.nc) as u64 * BASELINE_BITS;
        rows.push(row(Framework::Cl, g, i, p.fed.total_train() as u64 * per_sample, 0, steps));
    }
    let g = g_nmse(p.ae, &out.broadcast, &p.fed.mixed_test)?;
    let i = i_nmse(p.ae, p.fed, |_| &out.broadcast)?;
    rows.push(row(Framework::Feel, g, i, up, down, steps));
    if extras.pfeel {
        let models = personalize_monitored(p, &out.broadcast)?;
        let g = mean_g_nmse(p.ae, &models, &p.fed.mixed_test)?;
        let i = i_nmse(p.ae, p.fed, |k| &models[k])?;
        let extra = p.fed.num_ues() * batches_per_ue(p) * p.cfg.personalize.epochs;
        rows.push(row(Framework::PFeel, g, i, up, down, steps + extra));
    }
    Ok((
        rows,
        RunHistory {
            run: run.to_string(),
            outcome: out,
        },
    ))
}

fn batches_per_ue(p: &Point) -> usize {
    let n = p.fed.total_train().div_ceil(p.fed.num_ues().max(1));
    n.div_ceil(p.fc.train.batch_size)
}

fn federation(cfg: &ExperimentConfig, src: &DataSource) -> SimResult<Federation> {
    Ok(Federation::from_datasets(&src.load(cfg, false)?)?)
}

fn sweep_federation(cfg: &ExperimentConfig) -> SimResult<Federation> {
    let ds = generate(cfg, false, cfg.feel.num_ues, cfg.samples_per_ue)?;
    Ok(Federation::from_datasets(&ds)?)
}

/// Runs the configured experiment and returns its metrics.
pub fn run_experiment(cfg: &ExperimentConfig, src: &DataSource) -> SimResult<MetricsReport> {
    cfg.validate()?;
    let started = Instant::now();
    let seed = derive_seed(cfg.master_seed, &[cfg.experiment.tag()]);
    let (ae, w0) = initial_model(cfg, src)?;
    let mut rows = Vec::new();
    let mut histories = Vec::new();
    let mut tradeoff = Vec::new();
    let all = Extras {
        il: true,
        cl: true,
        pfeel: true,
    };
    let personal = Extras {
        il: false,
        cl: false,
        pfeel: true,
    };
    let mut push = |(r, h): (Vec<SummaryRow>, RunHistory)| {
        rows.extend(r);
        histories.push(h);
    };
    match cfg.experiment {
        ExperimentId::CompareFrameworks => {
            let fed = federation(cfg, src)?;
            let p = Point { ae: &ae, w0: &w0, fed: &fed, fc: &cfg.feel, cfg, seed };
            let (mut r, h) = run_point(&p, "base", all)?;
            // Summary order: IL, CL, FEEL, pFEEL.
            r.sort_by_key(|row| row.framework as u8);
            push((r, h));
        }
        ExperimentId::QuantSweep => {
            let fed = federation(cfg, src)?;
            let mut points = Vec::new();
            for &b in &cfg.sweep.uplink_bits {
                let mut fc = cfg.feel.clone();
                fc.quant.uplink_bits = (b != 32).then_some(b);
                fc.quant.downlink_bits = None;
                points.push((format!("uplink-{b}"), fc));
            }
            for &b in &cfg.sweep.downlink_bits {
                let mut fc = cfg.feel.clone();
                fc.quant.uplink_bits = None;
                fc.quant.downlink_bits = (b != 32).then_some(b);
                points.push((format!("downlink-{b}"), fc));
            }
            for (label, fc) in &points {
                let p = Point { ae: &ae, w0: &w0, fed: &fed, fc, cfg, seed };
                push(run_point(&p, label, Extras::default())?);
            }
        }
        ExperimentId::SampleSweep => {
            for &n in &cfg.sweep.samples_per_ue {
                let mut c = cfg.clone();
                c.samples_per_ue = n;
                let fed = sweep_federation(&c)?;
                let p = Point { ae: &ae, w0: &w0, fed: &fed, fc: &c.feel, cfg: &c, seed };
                push(run_point(&p, &format!("samples-{n}"), Extras { il: true, ..personal })?);
            }
        }
        ExperimentId::UeSweep => {
            for &k in &cfg.sweep.num_ues {
                let mut c = cfg.clone();
                c.feel.num_ues = k;
                let fed = sweep_federation(&c)?;
                let p = Point { ae: &ae, w0: &w0, fed: &fed, fc: &c.feel, cfg: &c, seed };
                push(run_point(&p, &format!("ues-{k}"), personal)?);
            }
        }
        ExperimentId::PersonalizeTradeoff => {
            let fed = federation(cfg, src)?;
            let p = Point { ae: &ae, w0: &w0, fed: &fed, fc: &cfg.feel, cfg, seed };
            let (r, h) = run_point(&p, "base", Extras { il: true, ..Extras::default() })?;
            tradeoff = tradeoff_sweep(
                &ae,
                &h.outcome.broadcast,
                &fed,
                &cfg.sweep.finetune_epochs,
                &cfg.personalize,
                &cfg.feel.train,
                seed,
            )?;
            push((r, h));
        }
        ExperimentId::LocalEpochSweep => {
            let fed = federation(cfg, src)?;
            for &e in &cfg.sweep.local_epochs {
                let mut fc = cfg.feel.clone();
                fc.train.local_epochs = e;
                if cfg.sweep.local_epochs_equal_steps {
                    fc.rounds = cfg.feel.rounds * cfg.feel.train.local_epochs / e;
                }
                let p = Point { ae: &ae, w0: &w0, fed: &fed, fc: &fc, cfg, seed };
                push(run_point(&p, &format!("epochs-{e}"), personal)?);
            }
        }
        ExperimentId::MovingRangeSweep => {
            for &r in &cfg.sweep.moving_radius_m {
                let mut c = cfg.clone();
                c.cell.moving_radius_m = r;
                let fed = sweep_federation(&c)?;
                let p = Point { ae: &ae, w0: &w0, fed: &fed, fc: &c.feel, cfg: &c, seed };
                push(run_point(&p, &format!("radius-{r:?}"), personal)?);
            }
        }
    }
    finite(&rows)?;
    Ok(MetricsReport {
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        rows,
        histories,
        tradeoff,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Writes every artifact of `report` under `out`. Refuses to replace an
/// existing summary unless `overwrite` is set.
pub fn write_outputs(cfg: &ExperimentConfig, report: &MetricsReport, out: &Path, overwrite: bool) -> SimResult<()> {
    let summary = out.join("summary.csv");
    if summary.exists() && !overwrite {
        return Err(SimError::Usage(format!(
            "{} exists; pass --overwrite to replace it",
            summary.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| SimError::io(out, e))?;
    report::write_summary(&summary, &report.rows)?;
    for h in &report.histories {
        let dir = out.join(&h.run);
        std::fs::create_dir_all(&dir).map_err(|e| SimError::io(&dir, e))?;
        report::write_history(&dir.join("history.csv"), &h.outcome.history)?;
        formats::write_checkpoint(&dir.join("global.feelnn"), &h.outcome.global, true)?;
        if let Some(bits) = cfg.feel.quant.downlink_bits {
            let qp = quantize_params(&h.outcome.global, bits)?;
            formats::write_payload(&dir.join("downlink.feelqp"), &qp, true)?;
        }
    }
    if !report.tradeoff.is_empty() {
        report::write_tradeoff(&out.join("tradeoff.csv"), &out.join("tradeoff_per_ue.csv"), &report.tradeoff)?;
    }
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, cfg.canonical()).map_err(|e| SimError::io(&cfg_path, e))?;
    let rep = out.join("report.txt");
    std::fs::write(&rep, report::render_report(report)).map_err(|e| SimError::io(&rep, e))
}
