//! CSV and text emission. Numbers go through Rust's own formatting, which is
//! locale independent: period decimals, no grouping.

use std::fmt::Write as _;
use std::path::Path;

use feel_core::autoencoder::to_db;
use feel_core::feel::RoundRecord;
use feel_core::personalize::TradeoffRow;

use crate::error::{SimError, SimResult};
use crate::experiments::{MetricsReport, SummaryRow};

pub const SUMMARY_HEADER: [&str; 7] = [
    "run",
    "framework",
    "g_nmse_db",
    "i_nmse_db",
    "uplink_bits",
    "downlink_bits",
    "gradient_steps",
];

pub const HISTORY_HEADER: [&str; 7] = [
    "round",
    "scheduled_ids",
    "mean_local_loss",
    "gnmse_db",
    "cum_uplink_bits",
    "cum_downlink_bits",
    "learning_rate",
];

pub fn db2(x: f64) -> String {
    format!("{x:.2}")
}

fn writer(path: &Path) -> SimResult<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> SimResult<()> {
    w.flush().map_err(|e| SimError::io(path, e))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> SimResult<()> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.framework.name().to_string(),
            db2(r.g_nmse_db),
            db2(r.i_nmse_db),
            r.uplink_bits.to_string(),
            r.downlink_bits.to_string(),
            r.gradient_steps.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn write_history(path: &Path, history: &[RoundRecord]) -> SimResult<()> {
    let mut w = writer(path)?;
    w.write_record(HISTORY_HEADER)?;
    for r in history {
        let ids: Vec<String> = r.scheduled.iter().map(|i| i.to_string()).collect();
        w.write_record([
            r.round.to_string(),
            ids.join(";"),
            r.mean_local_loss.to_string(),
            r.gnmse_db.to_string(),
            r.cum_uplink_bits.to_string(),
            r.cum_downlink_bits.to_string(),
            r.learning_rate.to_string(),
        ])?;
    }
    finish(w, path)
}

/// `epochs,i_nmse_db,g_nmse_db` plus a per-UE companion file.
pub fn write_tradeoff(path: &Path, per_ue_path: &Path, rows: &[TradeoffRow]) -> SimResult<()> {
    let mut w = writer(path)?;
    w.write_record(["epochs", "i_nmse_db", "g_nmse_db"])?;
    for r in rows {
        w.write_record([r.epochs.to_string(), db2(r.i_nmse_db), db2(r.g_nmse_db)])?;
    }
    finish(w, path)?;

    let mut w = writer(per_ue_path)?;
    w.write_record(["epochs", "ue_id", "own_nmse_db", "mixed_nmse_db"])?;
    for r in rows {
        for u in &r.per_ue {
            w.write_record([
                r.epochs.to_string(),
                u.ue_id.to_string(),
                to_db(u.own_nmse).to_string(),
                to_db(u.mixed_nmse).to_string(),
            ])?;
        }
    }
    finish(w, per_ue_path)
}

/// Plain-text report; carries the wall-clock time, so it is not part of the
/// byte-reproducible outputs.
pub fn render_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    writeln!(s, "experiment: {}", r.experiment.name()).unwrap();
    writeln!(s, "config_hash: {}", r.config_hash).unwrap();
    writeln!(s, "wall_clock_s: {:.1}", r.wall_clock_s).unwrap();
    writeln!(
        s,
        "{:<16} {:<6} {:>10} {:>10} {:>14} {:>14}",
        "run", "fw", "G-NMSE dB", "I-NMSE dB", "uplink bits", "downlink bits"
    )
    .unwrap();
    for row in &r.rows {
        writeln!(
            s,
            "{:<16} {:<6} {:>10} {:>10} {:>14} {:>14}",
            row.run,
            row.framework.name(),
            db2(row.g_nmse_db),
            db2(row.i_nmse_db),
            row.uplink_bits,
            row.downlink_bits
        )
        .unwrap();
    }
    if !r.tradeoff.is_empty() {
        writeln!(s, "fine-tune epochs  I-NMSE dB  G-NMSE dB").unwrap();
        for t in &r.tradeoff {
            writeln!(s, "{:>16} {:>10} {:>10}", t.epochs, db2(t.i_nmse_db), db2(t.g_nmse_db)).unwrap();
        }
    }
    s
}
