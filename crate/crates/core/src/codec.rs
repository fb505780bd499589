//! Outlier-preserving quantization of transmitted tensors and its byte
//! format.
//!
//! Values at or below the `p`-th nearest-rank percentile are mapped to
//! `b`-bit codes relative to the tensor minimum. Values above it travel as
//! raw 32-bit floats together with their flat position. The layout is
//! documented in `docs/wire-format.md`.

use thiserror::Error;

use crate::tensor::Tensor;

pub const QUANT_MAGIC: &[u8; 4] = b"GTQF";
pub const RAW_MAGIC: &[u8; 4] = b"GTRF";
pub const FRAME_VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("codec precondition violated: {0}")]
    Contract(String),
    #[error("frame decode failed at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
}

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(CodecError::Contract(msg.into()))
}

/// Value at 1-indexed position `ceil(p * n / 100)` of the ascending sort.
pub fn nearest_rank_percentile(values: &[f32], p: u8) -> Result<f32> {
    if values.is_empty() {
        return contract("percentile of an empty tensor");
    }
    if !(1..=100).contains(&p) {
        return contract(format!("percentile {p} outside 1..=100"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let rank = (p as usize * n).div_ceil(100);
    Ok(sorted[rank - 1])
}

/// One tensor quantized for the wire. Fields are private so that every
/// frame in existence satisfies the format invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedFrame {
    tensor_id: u32,
    shape: Vec<usize>,
    bits: u8,
    percentile: u8,
    min_value: f32,
    threshold: f32,
    scale: f32,
    codes: Vec<u16>,
    outliers: Vec<(u32, f32)>,
}

impl QuantizedFrame {
    pub fn tensor_id(&self) -> u32 {
        self.tensor_id
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn bits(&self) -> u8 {
        self.bits
    }
    pub fn percentile(&self) -> u8 {
        self.percentile
    }
    pub fn min_value(&self) -> f32 {
        self.min_value
    }
    pub fn threshold(&self) -> f32 {
        self.threshold
    }
    pub fn scale(&self) -> f32 {
        self.scale
    }
    /// Inlier codes in row-major order, outlier positions skipped.
    pub fn codes(&self) -> &[u16] {
        &self.codes
    }
    /// `(flat position, raw value)` in increasing position order.
    pub fn outliers(&self) -> &[(u32, f32)] {
        &self.outliers
    }
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn check_params(bits: u8, percentile: u8) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return contract(format!("bit width {bits} outside 1..=16"));
    }
    if !(1..=100).contains(&percentile) {
        return contract(format!("percentile {percentile} outside 1..=100"));
    }
    Ok(())
}

/// Quantizes `a` with `bits`-bit codes below the `percentile` threshold.
pub fn quantize(a: &Tensor, tensor_id: u32, bits: u8, percentile: u8) -> Result<QuantizedFrame> {
    check_params(bits, percentile)?;
    let values = a.data();
    if values.len() > u32::MAX as usize {
        return contract("tensor too large for 32-bit positions");
    }
    let threshold = nearest_rank_percentile(values, percentile)?;
    let min_value = values.iter().copied().fold(f32::INFINITY, f32::min);
    let levels = ((1u32 << bits) - 1) as f64;
    let range = threshold as f64 - min_value as f64;
    let scale = (range / levels) as f32;
    if !scale.is_finite() {
        return contract("value range overflows the 32-bit scale");
    }
    let mut codes = Vec::with_capacity(values.len());
    let mut outliers = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        if v > threshold {
            outliers.push((i as u32, v));
        } else if scale == 0.0 {
            codes.push(0);
        } else {
            // Divide by the serialized scale, not the exact one, so the
            // receiver's reconstruction error stays within half of it.
            // f64::round rounds half away from zero.
            let q = ((v as f64 - min_value as f64) / scale as f64).round().min(levels);
            codes.push(q as u16);
        }
    }
    Ok(QuantizedFrame {
        tensor_id,
        shape: a.shape().to_vec(),
        bits,
        percentile,
        min_value,
        threshold,
        scale,
        codes,
        outliers,
    })
}

/// Rebuilds the tensor: `code * scale + min` at inlier positions and the
/// stored value at outlier positions.
pub fn dequantize(frame: &QuantizedFrame) -> Tensor {
    let n = frame.numel();
    let mut out = Vec::with_capacity(n);
    let mut codes = frame.codes.iter();
    let mut outliers = frame.outliers.iter().peekable();
    let (s, m) = (frame.scale as f64, frame.min_value as f64);
    for i in 0..n {
        match outliers.peek() {
            Some(&&(pos, v)) if pos as usize == i => {
                out.push(v);
                outliers.next();
            }
            _ => {
                let c = *codes.next().expect("inlier count checked at construction");
                out.push((c as f64 * s + m) as f32);
            }
        }
    }
    Tensor::new(frame.shape.clone(), out).expect("frame shape matches element count")
}

fn put_header(out: &mut Vec<u8>, magic: &[u8; 4], tensor_id: u32, shape: &[usize]) {
    out.extend_from_slice(magic);
    out.push(FRAME_VERSION);
    out.extend_from_slice(&tensor_id.to_le_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn put_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Packs `codes` at `bits` each, least significant bit first.
pub fn pack_codes(codes: &[u16], bits: u8) -> Vec<u8> {
    let bits = bits as u32;
    let mut out = Vec::with_capacity((codes.len() * bits as usize).div_ceil(8));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &c in codes {
        acc |= ((c as u64) & ((1 << bits) - 1)) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack_codes(bytes: &[u8], count: usize, bits: u8) -> Vec<u16> {
    let bits = bits as u32;
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    while out.len() < count {
        while filled < bits {
            acc |= (*it.next().expect("length checked") as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u16);
        acc >>= bits;
        filled -= bits;
    }
    out
}

impl QuantizedFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_header(&mut out, QUANT_MAGIC, self.tensor_id, &self.shape);
        out.push(self.bits);
        out.push(self.percentile);
        for v in [self.min_value, self.threshold, self.scale] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.codes.len() as u32).to_le_bytes());
        out.extend_from_slice(&pack_codes(&self.codes, self.bits));
        out.extend_from_slice(&(self.outliers.len() as u32).to_le_bytes());
        for &(pos, v) in &self.outliers {
            out.extend_from_slice(&pos.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_crc(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes)?;
        let (tensor_id, shape) = r.header(QUANT_MAGIC)?;
        let n: usize = shape.iter().product();
        let at = r.pos;
        let bits = r.u8()?;
        let percentile = r.u8()?;
        check_params(bits, percentile).map_err(|e| r.fail(at, &e.to_string()))?;
        let at = r.pos;
        let min_value = r.f32()?;
        let threshold = r.f32()?;
        let scale = r.f32()?;
        if !(min_value <= threshold && scale >= 0.0) {
            return Err(r.fail(at, "inconsistent min/threshold/scale"));
        }
        let at = r.pos;
        let inliers = r.u32()? as usize;
        if inliers > n {
            return Err(r.fail(at, "more inliers than elements"));
        }
        let at = r.pos;
        let packed = r.take((inliers * bits as usize).div_ceil(8))?;
        let used = inliers * bits as usize;
        if !used.is_multiple_of(8) && packed[packed.len() - 1] >> (used % 8) != 0 {
            return Err(r.fail(at + packed.len() - 1, "nonzero padding bits"));
        }
        let codes = unpack_codes(packed, inliers, bits);
        let at = r.pos;
        let count = r.u32()? as usize;
        if count != n - inliers {
            return Err(r.fail(at, "inlier and outlier counts do not cover the shape"));
        }
        let mut outliers = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let pos = r.u32()?;
            let v = r.f32()?;
            if pos as usize >= n || outliers.last().is_some_and(|&(p, _)| p >= pos) {
                return Err(r.fail(at, "outlier positions must increase and lie inside the tensor"));
            }
            if v.partial_cmp(&threshold) != Some(std::cmp::Ordering::Greater) {
                return Err(r.fail(at + 4, "outlier value not above threshold"));
            }
            outliers.push((pos, v));
        }
        r.finish()?;
        Ok(Self {
            tensor_id,
            shape,
            bits,
            percentile,
            min_value,
            threshold,
            scale,
            codes,
            outliers,
        })
    }
}

/// Unquantized frame: every value as a raw 32-bit float.
pub fn encode_raw(t: &Tensor, tensor_id: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * t.rank() + 4 * t.numel());
    put_header(&mut out, RAW_MAGIC, tensor_id, t.shape());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_crc(&mut out);
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<(u32, Tensor)> {
    let mut r = Reader::new(bytes)?;
    let (id, shape) = r.header(RAW_MAGIC)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()?);
    }
    r.finish()?;
    Ok((id, Tensor::new(shape, data).expect("shape product checked")))
}

/// Quantization settings for one endpoint; `None` sends raw frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantParams {
    pub bits: u8,
    pub percentile: u8,
}

/// Encodes `t` as a quantized frame, or a raw frame when `quant` is `None`.
pub fn encode_tensor(t: &Tensor, tensor_id: u32, quant: Option<QuantParams>) -> Result<Vec<u8>> {
    match quant {
        Some(q) => Ok(quantize(t, tensor_id, q.bits, q.percentile)?.encode()),
        None => Ok(encode_raw(t, tensor_id)),
    }
}

/// Decodes either frame kind, dispatching on the magic.
pub fn decode_tensor(bytes: &[u8]) -> Result<(u32, Tensor)> {
    match bytes.get(..4) {
        Some(m) if m == QUANT_MAGIC => {
            let f = QuantizedFrame::decode(bytes)?;
            Ok((f.tensor_id, dequantize(&f)))
        }
        Some(m) if m == RAW_MAGIC => decode_raw(bytes),
        _ => Err(CodecError::Decode {
            offset: 0,
            reason: "unknown frame magic".into(),
        }),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    body: usize,
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies the trailing CRC32 before any field is interpreted.
    fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CodecError::Decode {
                offset: bytes.len(),
                reason: "truncated frame".into(),
            });
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("four bytes"));
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err(CodecError::Decode {
                offset: body,
                reason: "checksum mismatch".into(),
            });
        }
        Ok(Self { bytes, body, pos: 0 })
    }

    fn fail(&self, offset: usize, reason: &str) -> CodecError {
        CodecError::Decode {
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.body - self.pos < n {
            return Err(self.fail(self.pos, "truncated frame"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4)?.try_into().expect("four bytes"));
        if !v.is_finite() {
            return Err(self.fail(at, "non-finite value"));
        }
        Ok(v)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(u32, Vec<usize>)> {
        if self.take(4)? != magic {
            return Err(self.fail(0, "bad magic"));
        }
        let version = self.u8()?;
        if version != FRAME_VERSION {
            return Err(self.fail(4, &format!("unsupported version {version}")));
        }
        let id = self.u32()?;
        let rank = self.u8()? as usize;
        let at = self.pos;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match n {
            Some(n) if n > 0 && n <= u32::MAX as usize => Ok((id, shape)),
            _ => Err(self.fail(at, "invalid shape")),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.body {
            return Err(self.fail(self.pos, "trailing bytes before checksum"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn normal(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::new(vec![n], (0..n).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn percentile_cases() {
        assert_eq!(nearest_rank_percentile(&[0.0, 1.0, 2.0, 3.0, 100.0], 80).unwrap(), 3.0);
        assert_eq!(nearest_rank_percentile(&[5.0, -1.0, 9.0, 2.0], 100).unwrap(), 9.0);
        let ramp: Vec<f32> = (0..1000).rev().map(|i| i as f32).collect();
        assert_eq!(nearest_rank_percentile(&ramp, 99).unwrap(), 989.0);
        assert!(matches!(nearest_rank_percentile(&[], 50), Err(CodecError::Contract(_))));
        assert!(nearest_rank_percentile(&[1.0], 0).is_err());
    }

    #[test]
    fn hand_example() {
        let f = quantize(&t(&[0.0, 1.0, 2.0, 3.0, 100.0]), 7, 2, 80).unwrap();
        assert_eq!(f.scale(), 1.0);
        assert_eq!(f.codes(), &[0, 1, 2, 3]);
        assert_eq!(f.outliers(), &[(4, 100.0)]);
        assert_eq!(dequantize(&f).data(), &[0.0, 1.0, 2.0, 3.0, 100.0]);
    }

    #[test]
    fn one_bit_example() {
        let f = quantize(&t(&[0.0, 0.3, 0.6, 0.9]), 0, 1, 100).unwrap();
        assert!(f.outliers().is_empty());
        let d = dequantize(&f);
        assert_eq!(d.data(), &[0.0, 0.0, 0.9, 0.9]);
    }

    #[test]
    fn constant_tensor() {
        let a = Tensor::filled(&[3, 4], -2.5);
        let f = quantize(&a, 1, 8, 99).unwrap();
        assert_eq!(f.scale(), 0.0);
        assert!(f.codes().iter().all(|&c| c == 0));
        assert!(f.outliers().is_empty());
        assert!(dequantize(&f).bit_eq(&a));
    }

    #[test]
    fn rejects_bad_params() {
        let a = t(&[1.0, 2.0]);
        assert!(quantize(&a, 0, 0, 99).is_err());
        assert!(quantize(&a, 0, 17, 99).is_err());
        assert!(quantize(&a, 0, 8, 0).is_err());
        assert!(quantize(&a, 0, 8, 101).is_err());
    }

    #[test]
    fn outlier_bound_at_99() {
        for seed in 0..5 {
            let n = 997 + seed as usize * 131;
            let f = quantize(&normal(n, seed), 0, 8, 99).unwrap();
            assert!(f.outliers().len() <= n.div_ceil(100));
        }
    }

    #[test]
    fn packing_is_lsb_first() {
        assert_eq!(pack_codes(&[1, 2, 3], 2), vec![0b11_10_01]);
        assert_eq!(pack_codes(&[0x1ff], 9), vec![0xff, 0x01]);
        assert_eq!(unpack_codes(&[0b11_10_01], 3, 2), vec![1, 2, 3]);
    }

    #[test]
    fn wire_layout() {
        let f = quantize(&t(&[0.0, 1.0, 2.0, 3.0, 100.0]), 0x01020304, 2, 80).unwrap();
        let b = f.encode();
        assert_eq!(&b[..4], b"GTQF");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..9], &[4, 3, 2, 1]);
        assert_eq!(b[9], 1);
        assert_eq!(&b[10..14], &[5, 0, 0, 0]);
        assert_eq!((b[14], b[15]), (2, 80));
        assert_eq!(&b[16..20], &0.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &3.0f32.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&b[28..32], &[4, 0, 0, 0]);
        assert_eq!(b[32], 0b11_10_01_00);
        assert_eq!(&b[33..37], &[1, 0, 0, 0]);
        assert_eq!(&b[37..41], &[4, 0, 0, 0]);
        assert_eq!(&b[41..45], &100.0f32.to_le_bytes());
        assert_eq!(b.len(), 49);
        assert_eq!(&b[45..], &crc32fast::hash(&b[..45]).to_le_bytes());
    }

    #[test]
    fn round_trip_empty_outliers() {
        let f = quantize(&normal(257, 3), 9, 4, 100).unwrap();
        assert!(f.outliers().is_empty());
        let b = f.encode();
        assert_eq!(QuantizedFrame::decode(&b).unwrap(), f);
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let b = quantize(&normal(40, 4), 2, 3, 90).unwrap().encode();
        for i in 0..b.len() {
            for flip in [0x01u8, 0x80] {
                let mut c = b.clone();
                c[i] ^= flip;
                assert!(QuantizedFrame::decode(&c).is_err(), "byte {i}");
            }
        }
        for cut in 0..b.len() {
            assert!(QuantizedFrame::decode(&b[..cut]).is_err());
        }
    }

    #[test]
    fn structural_errors_carry_offsets() {
        let f = quantize(&t(&[0.0, 1.0, 2.0, 3.0, 100.0]), 0, 2, 80).unwrap();
        let mut b = f.encode();
        // swap in a bit width of 0 and re-seal the checksum
        b[14] = 0;
        let body = b.len() - 4;
        let crc = crc32fast::hash(&b[..body]);
        b[body..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(
            QuantizedFrame::decode(&b),
            Err(CodecError::Decode {
                offset: 14,
                reason: "codec precondition violated: bit width 0 outside 1..=16".into()
            })
        );
    }

    #[test]
    fn compression_for_large_normal_tensor() {
        let n = 10_000;
        let b = quantize(&normal(n, 5), 0, 8, 99).unwrap().encode();
        assert!((b.len() as f64) < 0.30 * 4.0 * n as f64);
    }

    #[test]
    fn raw_frames() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-30, 7.0]).unwrap();
        let b = encode_raw(&a, 11);
        assert_eq!(b.len(), 4 + 1 + 4 + 1 + 8 + 24 + 4);
        let (id, back) = decode_tensor(&b).unwrap();
        assert_eq!(id, 11);
        assert!(back.bit_eq(&a));
        let mut bad = b.clone();
        bad[20] ^= 1;
        assert!(decode_tensor(&bad).is_err());
        assert!(decode_tensor(b"XXXXXXXXXXXX").is_err());
    }

    #[test]
    fn dispatch_by_magic() {
        let a = normal(64, 6);
        let q = QuantParams {
            bits: 8,
            percentile: 99,
        };
        let (id, back) = decode_tensor(&encode_tensor(&a, 5, Some(q)).unwrap()).unwrap();
        assert_eq!(id, 5);
        assert!(back.max_abs_diff(&a).unwrap() < 0.05);
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..400, any::<u64>(), 0.01f32..100.0).prop_map(|(n, seed, scale)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Normal::new(0.0f32, scale).unwrap();
            Tensor::new(vec![n], (0..n).map(|_| d.sample(&mut rng)).collect()).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn inlier_error_bound(a in tensor_strategy(), bits in 1u8..=16, p in 1u8..=100) {
            let f = quantize(&a, 0, bits, p).unwrap();
            let d = dequantize(&f);
            let half = f.scale() as f64 / 2.0;
            let mut outliers = f.outliers().iter().map(|o| o.0 as usize).peekable();
            for (i, (&x, &y)) in a.data().iter().zip(d.data()).enumerate() {
                if outliers.peek() == Some(&i) {
                    outliers.next();
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                } else {
                    // the f32 result carries its own rounding of up to half an ulp
                    let ulp_half = (x.abs() as f64) * f64::from(f32::EPSILON) / 2.0;
                    prop_assert!(((x as f64) - (y as f64)).abs() <= half + 1e-6 + ulp_half);
                }
            }
        }

        #[test]
        fn codes_are_monotone(a in tensor_strategy(), bits in 1u8..=16, p in 1u8..=100) {
            let f = quantize(&a, 0, bits, p).unwrap();
            let inliers: Vec<f32> = a.data().iter().copied().filter(|&v| v <= f.threshold()).collect();
            prop_assert_eq!(inliers.len(), f.codes().len());
            for i in 0..inliers.len() {
                prop_assert!(f.codes()[i] < (1u32 << bits) as u16 || bits == 16);
                for j in 0..inliers.len() {
                    if inliers[i] <= inliers[j] {
                        prop_assert!(f.codes()[i] <= f.codes()[j]);
                    }
                }
            }
        }

        #[test]
        fn canonical_encoding(a in tensor_strategy(), bits in 1u8..=16, p in 1u8..=100, id in any::<u32>()) {
            let f = quantize(&a, id, bits, p).unwrap();
            let bytes = f.encode();
            let back = QuantizedFrame::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
