//! On-disk formats. All integers are little-endian `u32`, floats IEEE LE.
//!
//! * `FEELCSI1` dataset: magic, version, ue_id, Nt, Nc, n_train, n_val,
//!   n_test, then `f64` offset and scale, then every sample as interleaved
//!   `f32` re/im in row-major (antenna, subcarrier) order, train then val
//!   then test. Samples are angular-delay and unnormalized.
//! * `FEELNN01` checkpoint: magic, entry count, then per entry the name
//!   (length-prefixed UTF-8), role byte, rank, dims and `f64` values.
//! * `FEELQP01` payload: see [`feel_core::quant::encode_payload`].

use std::path::Path;

use feel_core::channel::{CsiSample, Domain, NormParams, UeDataset};
use feel_core::nn::{ParamSet, Tensor};
use feel_core::quant::{decode_payload, encode_payload, QuantPayload, Reader, PAYLOAD_MAGIC};
use feel_core::Error as CoreError;
use num_complex::Complex64;

use crate::error::{SimError, SimResult};

pub const DATASET_MAGIC: &[u8; 8] = b"FEELCSI1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FEELNN01";
pub const DATASET_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_dataset(ds: &UeDataset) -> Vec<u8> {
    let (nt, nc) = ds
        .train
        .first()
        .or(ds.val.first())
        .or(ds.test.first())
        .map_or((0, 0), |s| (s.nt, s.nc));
    let mut out = Vec::with_capacity(60 + ds.len() * nt * nc * 8);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [
        DATASET_VERSION as usize,
        ds.ue_id as usize,
        nt,
        nc,
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&ds.norm.offset.to_le_bytes());
    out.extend_from_slice(&ds.norm.scale.to_le_bytes());
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        for z in &s.data {
            out.extend_from_slice(&(z.re as f32).to_le_bytes());
            out.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
    out
}

fn corrupt(msg: String) -> CoreError {
    CoreError::CorruptPayload(msg)
}

pub fn decode_dataset(bytes: &[u8]) -> feel_core::Result<UeDataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(corrupt(format!("unsupported version {version} at byte offset {at}")));
    }
    let ue_id = r.u32()?;
    let at = r.offset();
    let nt = r.u32()? as usize;
    let nc = r.u32()? as usize;
    if nt == 0 || nc == 0 {
        return Err(corrupt(format!("zero antenna or subcarrier count at byte offset {at}")));
    }
    let counts = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let offset = r.f64()?;
    let at = r.offset();
    let scale = r.f64()?;
    if !(offset.is_finite() && scale.is_finite() && scale > 0.0) {
        return Err(corrupt(format!("invalid normalization scale at byte offset {at}")));
    }
    let body = counts.iter().sum::<usize>() * nt * nc * 8;
    if r.remaining() != body {
        return Err(corrupt(format!(
            "sample block at byte offset {} holds {} bytes, header implies {body}",
            r.offset(),
            r.remaining()
        )));
    }
    let mut splits = counts.iter().map(|&n| {
        (0..n)
            .map(|_| {
                let at = r.offset();
                let data = (0..nt * nc)
                    .map(|_| Ok(Complex64::new(f64::from(r.f32()?), f64::from(r.f32()?))))
                    .collect::<feel_core::Result<Vec<_>>>()?;
                if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(corrupt(format!("non-finite sample at byte offset {at}")));
                }
                Ok(CsiSample {
                    nt,
                    nc,
                    data,
                    domain: Domain::AngularDelay,
                })
            })
            .collect::<feel_core::Result<Vec<_>>>()
    });
    let train = splits.next().unwrap()?;
    let val = splits.next().unwrap()?;
    let test = splits.next().unwrap()?;
    Ok(UeDataset {
        ue_id,
        train,
        val,
        test,
        norm: NormParams { offset, scale },
    })
}

pub fn encode_checkpoint(ps: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ps.numel() * 8 + ps.len() * 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, ps.len());
    for e in ps.entries() {
        put_u32(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.role.to_byte());
        put_u32(&mut out, e.tensor.shape().len());
        for &d in e.tensor.shape() {
            put_u32(&mut out, d);
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint on its own. Trainability is not stored; running
/// statistics are recognized by name. Use [`restore_checkpoint`] to adopt
/// the flags of a model template.
pub fn decode_checkpoint(bytes: &[u8]) -> feel_core::Result<ParamSet> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let at = r.offset();
        let name = r.string()?;
        let role = r.role()?;
        let shape = r.shape()?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| r.f64()).collect::<feel_core::Result<Vec<_>>>()?;
        let trainable = !name.contains("running_");
        ps.push(name, Tensor::new(shape, values)?, role, trainable)
            .map_err(|_| corrupt(format!("duplicate entry at byte offset {at}")))?;
    }
    if r.remaining() != 0 {
        return Err(corrupt(format!(
            "{} trailing bytes at byte offset {}",
            r.remaining(),
            r.offset()
        )));
    }
    Ok(ps)
}

/// Values from `loaded` placed into a copy of `template`.
pub fn restore_checkpoint(loaded: &ParamSet, template: &ParamSet) -> feel_core::Result<ParamSet> {
    if !loaded.same_layout(template) {
        return Err(CoreError::TemplateMismatch(
            "checkpoint entries differ from the configured model".into(),
        ));
    }
    let mut out = template.clone();
    out.assign_flat(&loaded.flatten())?;
    Ok(out)
}

pub fn read_bytes(path: &Path) -> SimResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| SimError::io(path, e))
}

/// Writes `bytes` unless the file exists and `overwrite` is off.
pub fn write_bytes(path: &Path, bytes: &[u8], overwrite: bool) -> SimResult<()> {
    if !overwrite && path.exists() {
        return Err(SimError::Usage(format!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| SimError::io(path, e))
}

fn in_file<T>(path: &Path, r: feel_core::Result<T>) -> SimResult<T> {
    r.map_err(|e| match e {
        CoreError::CorruptPayload(m) => SimError::format(path, m),
        CoreError::TemplateMismatch(m) => SimError::format(path, m),
        other => SimError::format(path, other.to_string()),
    })
}

pub fn read_dataset(path: &Path) -> SimResult<UeDataset> {
    in_file(path, decode_dataset(&read_bytes(path)?))
}

pub fn write_dataset(path: &Path, ds: &UeDataset, overwrite: bool) -> SimResult<()> {
    write_bytes(path, &encode_dataset(ds), overwrite)
}

pub fn read_checkpoint(path: &Path) -> SimResult<ParamSet> {
    in_file(path, decode_checkpoint(&read_bytes(path)?))
}

pub fn load_checkpoint(path: &Path, template: &ParamSet) -> SimResult<ParamSet> {
    let loaded = read_checkpoint(path)?;
    in_file(path, restore_checkpoint(&loaded, template))
}

pub fn write_checkpoint(path: &Path, ps: &ParamSet, overwrite: bool) -> SimResult<()> {
    write_bytes(path, &encode_checkpoint(ps), overwrite)
}

pub fn read_payload(path: &Path) -> SimResult<QuantPayload> {
    in_file(path, decode_payload(&read_bytes(path)?))
}

pub fn write_payload(path: &Path, qp: &QuantPayload, overwrite: bool) -> SimResult<()> {
    write_bytes(path, &encode_payload(qp), overwrite)
}

/// Human-readable header summary of any of the three formats.
pub fn describe(path: &Path) -> SimResult<String> {
    let bytes = read_bytes(path)?;
    let magic = bytes.get(..8).unwrap_or(&bytes);
    if magic == DATASET_MAGIC {
        let ds = in_file(path, decode_dataset(&bytes))?;
        let (nt, nc) = ds.train.first().map_or((0, 0), |s| (s.nt, s.nc));
        Ok(format!(
            "format: FEELCSI1 dataset v{DATASET_VERSION}\nue_id: {}\nantennas: {nt}\nsubcarriers: {nc}\n\
             train: {}\nval: {}\ntest: {}\nnorm_offset: {:?}\nnorm_scale: {:?}\n",
            ds.ue_id,
            ds.train.len(),
            ds.val.len(),
            ds.test.len(),
            ds.norm.offset,
            ds.norm.scale
        ))
    } else if magic == CHECKPOINT_MAGIC {
        let ps = in_file(path, decode_checkpoint(&bytes))?;
        let mut s = format!(
            "format: FEELNN01 checkpoint\nentries: {}\nparameters: {}\n",
            ps.len(),
            ps.numel()
        );
        for e in ps.entries() {
            s.push_str(&format!("  {:<32} {:<6?} {:?}\n", e.name, e.role, e.tensor.shape()));
        }
        Ok(s)
    } else if magic == PAYLOAD_MAGIC {
        let qp = in_file(path, decode_payload(&bytes))?;
        let mut s = format!(
            "format: FEELQP01 payload\nrecords: {}\nelements: {}\nbits: {}\n",
            qp.records.len(),
            qp.num_elements(),
            qp.total_bits()
        );
        for r in &qp.records {
            s.push_str(&format!("  {:<32} {:<6?} {:?} {} bits\n", r.name, r.role, r.shape, r.bits()));
        }
        Ok(s)
    } else {
        Err(SimError::format(path, "unrecognized magic at byte offset 0"))
    }
}
