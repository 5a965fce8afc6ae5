//! Dataset generation and standalone model evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use feel_core::autoencoder::{constant_predictor_nmse, to_db, Autoencoder, SampleSet};
use feel_core::channel::{ue_dataset, ue_placement, ScenarioParams};
use feel_core::rng::{derive_seed, stream};

use crate::config::ExperimentConfig;
use crate::error::{SimError, SimResult};
use crate::experiments::dataset_path;
use crate::formats;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: PathBuf,
    pub scenario: String,
    pub ue_id: u32,
    pub seed: u64,
    pub num_samples: usize,
    pub center_xy_m: [f64; 2],
}

/// Writes one dataset file per UE for the deploy scenario (and for the
/// pretrain scenario), plus `manifest.csv` and the canonical config.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> SimResult<Vec<ManifestEntry>> {
    cfg.validate()?;
    let manifest = out.join("manifest.csv");
    if manifest.exists() && !overwrite {
        return Err(SimError::Usage(format!(
            "{} exists; pass --overwrite to replace it",
            manifest.display()
        )));
    }
    let mut entries = Vec::new();
    let jobs: [(&ScenarioParams, usize, usize); 2] = [
        (&cfg.deploy, cfg.feel.num_ues, cfg.samples_per_ue),
        (&cfg.pretrain, cfg.pretrain_num_ues, cfg.pretrain_samples_per_ue),
    ];
    for (scenario, num_ues, samples) in jobs {
        for id in 1..=num_ues as u32 {
            let placement = ue_placement(scenario, &cfg.cell, cfg.master_seed, id)?;
            let ds = ue_dataset(&placement, scenario, &cfg.array, samples, cfg.master_seed)?;
            let path = dataset_path(out, &scenario.label, id);
            formats::write_dataset(&path, &ds, overwrite)?;
            entries.push(ManifestEntry {
                file: path.strip_prefix(out).unwrap_or(&path).to_path_buf(),
                scenario: scenario.label.clone(),
                ue_id: id,
                seed: derive_seed(cfg.master_seed, &[stream::DATASET, scenario.stream_tag(), u64::from(id)]),
                num_samples: samples,
                center_xy_m: placement.center_xy_m,
            });
        }
    }
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["file", "scenario", "ue_id", "dataset_seed", "num_samples", "center_x_m", "center_y_m"])?;
    for e in &entries {
        w.write_record([
            e.file.display().to_string(),
            e.scenario.clone(),
            e.ue_id.to_string(),
            e.seed.to_string(),
            e.num_samples.to_string(),
            e.center_xy_m[0].to_string(),
            e.center_xy_m[1].to_string(),
        ])?;
    }
    w.flush().map_err(|e| SimError::io(&manifest, e))?;
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, format!("# hash {}\n{}", cfg.hash(), cfg.canonical()))
        .map_err(|e| SimError::io(&cfg_path, e))?;
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UeEval {
    pub file: PathBuf,
    pub ue_id: u32,
    pub nmse_db: f64,
    pub baseline_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_ue: Vec<UeEval>,
    /// Over the union of all test splits.
    pub g_nmse_db: f64,
    pub g_baseline_db: f64,
}

/// NMSE of a saved model on the test split of each dataset file, next to the
/// constant-0.5 predictor.
pub fn evaluate(cfg: &ExperimentConfig, model: &Path, datasets: &[PathBuf]) -> SimResult<EvalReport> {
    if datasets.is_empty() {
        return Err(SimError::Usage("evaluate needs at least one dataset file".into()));
    }
    cfg.model.validate()?;
    // Any initialization serves as the layout template.
    let (ae, template) = Autoencoder::build(&cfg.model, &mut feel_core::rng::rng_from_seed(0))?;
    let ps = formats::load_checkpoint(model, &template)?;
    let mut per_ue = Vec::new();
    let mut sets = Vec::new();
    for path in datasets {
        let ds = formats::read_dataset(path)?;
        if ds.test.first().map(|s| (s.nt, s.nc)) != Some((cfg.model.nt, cfg.model.nc)) {
            return Err(SimError::format(path, "test split is empty or its geometry differs from the model"));
        }
        let set = SampleSet::test(&ds)?;
        per_ue.push(UeEval {
            file: path.clone(),
            ue_id: ds.ue_id,
            nmse_db: to_db(ae.evaluate_nmse(&ps, &set)?),
            baseline_db: to_db(constant_predictor_nmse(&set)?),
        });
        sets.push(set);
    }
    let mixed = SampleSet::concat(&sets)?;
    Ok(EvalReport {
        per_ue,
        g_nmse_db: to_db(ae.evaluate_nmse(&ps, &mixed)?),
        g_baseline_db: to_db(constant_predictor_nmse(&mixed)?),
    })
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "G-NMSE: {:.2} dB (constant 0.5: {:.2} dB)", self.g_nmse_db, self.g_baseline_db).unwrap();
        writeln!(s, "{:>6} {:>10} {:>12}  file", "ue_id", "NMSE dB", "const dB").unwrap();
        for u in &self.per_ue {
            writeln!(
                s,
                "{:>6} {:>10.2} {:>12.2}  {}",
                u.ue_id,
                u.nmse_db,
                u.baseline_db,
                u.file.display()
            )
            .unwrap();
        }
        s
    }
}
