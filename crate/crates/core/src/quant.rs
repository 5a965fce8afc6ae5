//! Weights-only uniform quantization of model transport and exact payload
//! accounting.
//!
//! Weight tensors are quantized per tensor with a min-max affine grid; bias
//! and other tensors travel as raw 32-bit floats.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Role};
use crate::rng::SimRng;

pub const PAYLOAD_MAGIC: &[u8; 8] = b"FEELQP01";
/// Bits of range metadata per quantized tensor (two 32-bit reals).
pub const RANGE_META_BITS: u64 = 64;
pub const BASELINE_BITS: u64 = 32;

/// Bit widths for both link directions; `None` sends 32-bit floats unquantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantPolicy {
    pub uplink_bits: Option<u8>,
    pub downlink_bits: Option<u8>,
    pub stochastic_rounding: bool,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self {
            uplink_bits: Some(2),
            downlink_bits: Some(8),
            stochastic_rounding: false,
        }
    }
}

impl QuantPolicy {
    pub fn unquantized() -> Self {
        Self {
            uplink_bits: None,
            downlink_bits: None,
            stochastic_rounding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.uplink_bits, self.downlink_bits].into_iter().flatten() {
            check_bits(b)?;
        }
        Ok(())
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=32).contains(&bits) {
        return Err(Error::InvalidConfig(alloc::format!(
            "bit width {bits} outside [1, 32]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    Raw(Vec<f32>),
    Quantized {
        min: f32,
        max: f32,
        bits: u8,
        /// Codes packed least-significant bit first.
        packed: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantRecord {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl QuantRecord {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bits(&self) -> u64 {
        let n = self.len() as u64;
        match &self.data {
            RecordData::Raw(_) => BASELINE_BITS * n,
            RecordData::Quantized { bits, .. } => RANGE_META_BITS + u64::from(*bits) * n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantPayload {
    pub records: Vec<QuantRecord>,
}

impl QuantPayload {
    pub fn total_bits(&self) -> u64 {
        self.records.iter().map(QuantRecord::bits).sum()
    }

    pub fn num_elements(&self) -> usize {
        self.records.iter().map(QuantRecord::len).sum()
    }
}

pub fn payload_bits(qp: &QuantPayload) -> u64 {
    qp.total_bits()
}

/// `32 * elements / payload bits`.
pub fn overhead_ratio(qp: &QuantPayload) -> f64 {
    (BASELINE_BITS * qp.num_elements() as u64) as f64 / qp.total_bits() as f64
}

/// Payload bits for sending `template`-shaped values at `bits` (or raw).
pub fn transport_bits(template: &ParamSet, bits: Option<u8>) -> u64 {
    template
        .entries()
        .iter()
        .map(|e| {
            let n = e.tensor.len() as u64;
            match (e.role, bits) {
                (Role::Weight, Some(b)) => RANGE_META_BITS + u64::from(b) * n,
                _ => BASELINE_BITS * n,
            }
        })
        .sum()
}

/// Largest f32 not above `x`.
pub fn f32_floor(x: f64) -> f32 {
    let f = x as f32;
    if f64::from(f) > x {
        f.next_down()
    } else {
        f
    }
}

/// Smallest f32 not below `x`.
pub fn f32_ceil(x: f64) -> f32 {
    let f = x as f32;
    if f64::from(f) < x {
        f.next_up()
    } else {
        f
    }
}

/// Grid step for a range; 1 when the range is empty.
pub fn grid_scale(min: f32, max: f32, bits: u8) -> f64 {
    let levels = (1u64 << bits) - 1;
    if max > min {
        (f64::from(max) - f64::from(min)) / levels as f64
    } else {
        1.0
    }
}

fn round_half_even(x: f64) -> f64 {
    let r = libm::round(x);
    if libm::fabs(x - libm::trunc(x)) == 0.5 && libm::fmod(r, 2.0) != 0.0 {
        r - libm::copysign(1.0, x)
    } else {
        r
    }
}

fn pack(codes: &[u64], bits: u8) -> Vec<u8> {
    let total = codes.len() * bits as usize;
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits as usize {
            if (c >> b) & 1 == 1 {
                out[(pos + b) / 8] |= 1 << ((pos + b) % 8);
            }
        }
        pos += bits as usize;
    }
    out
}

fn unpack(packed: &[u8], bits: u8, n: usize) -> Result<Vec<u64>> {
    let need = (n * bits as usize).div_ceil(8);
    if packed.len() != need {
        return Err(Error::CorruptPayload(alloc::format!(
            "expected {need} code bytes, found {}",
            packed.len()
        )));
    }
    let mut pos = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut c = 0u64;
        for b in 0..bits as usize {
            c |= u64::from((packed[(pos + b) / 8] >> ((pos + b) % 8)) & 1) << b;
        }
        out.push(c);
        pos += bits as usize;
    }
    Ok(out)
}

/// Quantizes one tensor. With `stochastic` set, codes round up with
/// probability equal to the fractional part.
pub fn quantize_tensor(
    values: &[f64],
    bits: u8,
    stochastic: Option<&mut SimRng>,
) -> Result<RecordData> {
    check_bits(bits)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (min, max) = if values.is_empty() {
        (0.0, 0.0)
    } else {
        (f32_floor(lo), f32_ceil(hi))
    };
    let scale = grid_scale(min, max, bits);
    let top = ((1u64 << bits) - 1) as f64;
    let base = f64::from(min);
    let codes: Vec<u64> = match stochastic {
        None => values
            .iter()
            .map(|&x| round_half_even((x - base) / scale).clamp(0.0, top) as u64)
            .collect(),
        Some(rng) => values
            .iter()
            .map(|&x| {
                let t = (x - base) / scale;
                let f = libm::floor(t);
                let up = rng.random::<f64>() < t - f;
                (f + if up { 1.0 } else { 0.0 }).clamp(0.0, top) as u64
            })
            .collect(),
    };
    Ok(RecordData::Quantized {
        min,
        max,
        bits,
        packed: pack(&codes, bits),
    })
}

/// Reconstructs the values of one record.
pub fn dequantize_record(rec: &QuantRecord) -> Result<Vec<f64>> {
    let n = rec.len();
    match &rec.data {
        RecordData::Raw(v) => {
            if v.len() != n {
                return Err(Error::CorruptPayload(alloc::format!(
                    "record {} holds {} values for shape {:?}",
                    rec.name,
                    v.len(),
                    rec.shape
                )));
            }
            Ok(v.iter().map(|&x| f64::from(x)).collect())
        }
        RecordData::Quantized {
            min,
            max,
            bits,
            packed,
        } => {
            check_bits(*bits)?;
            let scale = grid_scale(*min, *max, *bits);
            let top = (1u64 << bits) - 1;
            let codes = unpack(packed, *bits, n)?;
            let base = f64::from(*min);
            codes
                .into_iter()
                .map(|c| {
                    if c > top {
                        return Err(Error::CorruptPayload("code exceeds bit width".into()));
                    }
                    Ok(base + c as f64 * scale)
                })
                .collect()
        }
    }
}

/// Quantizes a flat vector laid out like `template`: weight tensors at
/// `bits`, everything else as raw 32-bit floats.
pub fn quantize(
    values: &[f64],
    template: &ParamSet,
    bits: u8,
    mut stochastic: Option<&mut SimRng>,
) -> Result<QuantPayload> {
    check_bits(bits)?;
    if values.len() != template.numel() {
        return Err(Error::LengthMismatch {
            expected: template.numel(),
            actual: values.len(),
        });
    }
    let mut records = Vec::with_capacity(template.len());
    let mut at = 0;
    for e in template.entries() {
        let n = e.tensor.len();
        let chunk = &values[at..at + n];
        at += n;
        let data = if e.role == Role::Weight {
            quantize_tensor(chunk, bits, stochastic.as_deref_mut())?
        } else {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(alloc::format!("tensor {}", e.name)));
            }
            RecordData::Raw(chunk.iter().map(|&x| x as f32).collect())
        };
        records.push(QuantRecord {
            name: e.name.clone(),
            role: e.role,
            shape: e.tensor.shape().to_vec(),
            data,
        });
    }
    Ok(QuantPayload { records })
}

pub fn quantize_params(ps: &ParamSet, bits: u8) -> Result<QuantPayload> {
    quantize(&ps.flatten(), ps, bits, None)
}

/// Flat values of a payload, checked against `template`.
pub fn dequantize(qp: &QuantPayload, template: &ParamSet) -> Result<Vec<f64>> {
    if qp.records.len() != template.len() {
        return Err(Error::TemplateMismatch(alloc::format!(
            "payload has {} records, template {}",
            qp.records.len(),
            template.len()
        )));
    }
    let mut out = Vec::with_capacity(template.numel());
    for (r, e) in qp.records.iter().zip(template.entries()) {
        if r.name != e.name || r.role != e.role || r.shape != e.tensor.shape() {
            return Err(Error::TemplateMismatch(alloc::format!(
                "record {} does not match template entry {}",
                r.name,
                e.name
            )));
        }
        out.extend(dequantize_record(r)?);
    }
    Ok(out)
}

/// Sends `values` through one link direction: returns what the receiver
/// reconstructs and the payload bits spent.
pub fn transmit(
    values: &[f64],
    template: &ParamSet,
    bits: Option<u8>,
    stochastic: Option<&mut SimRng>,
) -> Result<(Vec<f64>, u64)> {
    match bits {
        Some(b) => {
            let qp = quantize(values, template, b, stochastic)?;
            Ok((dequantize(&qp, template)?, qp.total_bits()))
        }
        None => {
            if values.len() != template.numel() {
                return Err(Error::LengthMismatch {
                    expected: template.numel(),
                    actual: values.len(),
                });
            }
            Ok((values.to_vec(), transport_bits(template, None)))
        }
    }
}

// ---------------------------------------------------------------------------
// Wire format

const RAW_WIDTH: u8 = 0;

/// Serializes a payload: magic, record count, then per record the name,
/// role byte, bit-width byte (0 for raw records), rank and dimensions,
/// range (quantized records only) and the value bytes. Integers are
/// little-endian `u32`.
pub fn encode_payload(qp: &QuantPayload) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PAYLOAD_MAGIC);
    out.extend_from_slice(&(qp.records.len() as u32).to_le_bytes());
    for r in &qp.records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.role.to_byte());
        match &r.data {
            RecordData::Raw(_) => out.push(RAW_WIDTH),
            RecordData::Quantized { bits, .. } => out.push(*bits),
        }
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &r.data {
            RecordData::Raw(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            RecordData::Quantized {
                min, max, packed, ..
            } => {
                out.extend_from_slice(&min.to_le_bytes());
                out.extend_from_slice(&max.to_le_bytes());
                out.extend_from_slice(packed);
            }
        }
    }
    out
}

/// Little-endian byte cursor reporting offsets in its errors.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::CorruptPayload(alloc::format!(
                "truncated at byte offset {}: need {n} bytes, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let at = self.pos;
        if self.take(8)? != expected {
            return Err(Error::CorruptPayload(alloc::format!(
                "bad magic at byte offset {at}, expected {}",
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| {
            Error::CorruptPayload(alloc::format!("invalid UTF-8 name at byte offset {at}"))
        })
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let at = self.pos;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::CorruptPayload(alloc::format!(
                "implausible rank {rank} at byte offset {at}"
            )));
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(Error::CorruptPayload(alloc::format!(
                "zero dimension at byte offset {at}"
            )));
        }
        Ok(shape)
    }

    pub fn role(&mut self) -> Result<Role> {
        let at = self.pos;
        let b = self.u8()?;
        Role::from_byte(b).ok_or_else(|| {
            Error::CorruptPayload(alloc::format!("unknown role byte {b} at byte offset {at}"))
        })
    }
}

pub fn decode_payload(bytes: &[u8]) -> Result<QuantPayload> {
    let mut r = Reader::new(bytes);
    r.magic(PAYLOAD_MAGIC)?;
    let count = r.u32()? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let role = r.role()?;
        let at = r.offset();
        let width = r.u8()?;
        if width > 32 {
            return Err(Error::CorruptPayload(alloc::format!(
                "bit width {width} at byte offset {at}"
            )));
        }
        let shape = r.shape()?;
        let n: usize = shape.iter().product();
        let data = if width == RAW_WIDTH {
            RecordData::Raw((0..n).map(|_| r.f32()).collect::<Result<_>>()?)
        } else {
            let min = r.f32()?;
            let max = r.f32()?;
            let packed = r.take((n * width as usize).div_ceil(8))?.to_vec();
            RecordData::Quantized {
                min,
                max,
                bits: width,
                packed,
            }
        };
        records.push(QuantRecord {
            name,
            role,
            shape,
            data,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::CorruptPayload(alloc::format!(
            "{} trailing bytes at byte offset {}",
            r.remaining(),
            r.offset()
        )));
    }
    Ok(QuantPayload { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn one_weight(values: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push(
            "w",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
            Role::Weight,
            true,
        )
        .unwrap();
        ps
    }

    fn round_trip(values: &[f64], bits: u8) -> Vec<f64> {
        let ps = one_weight(values);
        dequantize(&quantize(values, &ps, bits, None).unwrap(), &ps).unwrap()
    }

    #[test]
    fn constant_tensor_is_exact() {
        for bits in [1, 2, 8, 32] {
            assert_eq!(round_trip(&[0.25; 5], bits), vec![0.25; 5]);
        }
    }

    #[test]
    fn on_grid_values_are_exact() {
        let v = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        let ps = one_weight(&v);
        let qp = quantize(&v, &ps, 2, None).unwrap();
        let RecordData::Quantized { packed, .. } = &qp.records[0].data else {
            panic!()
        };
        assert_eq!(unpack(packed, 2, 4).unwrap(), vec![0, 1, 2, 3]);
        let back = dequantize(&qp, &ps).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(0.5), 0.0);
        assert_eq!(round_half_even(1.5), 2.0);
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(-0.5), 0.0);
        assert_eq!(round_half_even(2.4), 2.0);
    }

    #[test]
    fn thirty_two_bit_error_is_tiny() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = round_trip(&v, 32);
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn directed_range_rounding_brackets_values() {
        let x = 0.1f64;
        assert!(f64::from(f32_floor(x)) <= x && f64::from(f32_ceil(x)) >= x);
        assert_eq!(f32_floor(0.5), 0.5);
        assert_eq!(f32_ceil(0.5), 0.5);
    }

    #[test]
    fn biases_are_f32_cast() {
        let mut ps = one_weight(&[0.3, -0.2]);
        ps.push("b", Tensor::new(vec![2], vec![0.1, 1e-7]).unwrap(), Role::Bias, true)
            .unwrap();
        let flat = ps.flatten();
        let back = dequantize(&quantize(&flat, &ps, 2, None).unwrap(), &ps).unwrap();
        assert_eq!(back[2].to_bits(), f64::from(0.1f32).to_bits());
        assert_eq!(back[3].to_bits(), f64::from(1e-7f32).to_bits());
    }

    #[test]
    fn bit_accounting() {
        let mut ps = one_weight(&[0.0; 10_000]);
        ps.push("b", Tensor::zeros(&[100]), Role::Bias, true).unwrap();
        let qp = quantize(&ps.flatten(), &ps, 2, None).unwrap();
        assert_eq!(qp.total_bits(), 64 + 2 * 10_000 + 32 * 100);
        assert_eq!(transport_bits(&ps, Some(2)), qp.total_bits());
        assert_eq!(transport_bits(&ps, None), 32 * 10_100);
        let r = overhead_ratio(&qp);
        assert!((r - 32.0 * 10_100.0 / 23_264.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let ps = one_weight(&[1.0, f64::NAN]);
        assert!(quantize(&ps.flatten(), &ps, 2, None).is_err());
        let ps = one_weight(&[1.0]);
        assert!(quantize(&[1.0], &ps, 0, None).is_err());
        assert!(quantize(&[1.0], &ps, 33, None).is_err());
        assert!(quantize(&[1.0, 2.0], &ps, 4, None).is_err());
    }

    #[test]
    fn wire_round_trip_and_corruption() {
        let mut ps = one_weight(&[0.3, -0.2, 0.9]);
        ps.push("b", Tensor::new(vec![1], vec![0.5]).unwrap(), Role::Bias, true)
            .unwrap();
        let qp = quantize(&ps.flatten(), &ps, 3, None).unwrap();
        let bytes = encode_payload(&qp);
        assert_eq!(decode_payload(&bytes).unwrap(), qp);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_payload(&bad).is_err());
        assert!(decode_payload(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn template_mismatch_detected() {
        let ps = one_weight(&[0.3, -0.2]);
        let qp = quantize(&ps.flatten(), &ps, 2, None).unwrap();
        let other = one_weight(&[0.3, -0.2, 0.1]);
        assert!(matches!(
            dequantize(&qp, &other),
            Err(Error::TemplateMismatch(_))
        ));
    }
}
