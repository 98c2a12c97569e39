//! Collaboration payload codec and bandwidth accounting.
//!
//! ```text
//! header   magic "DCPW" | version u8 | flags u8 | L u16
//! delta    3 × f32                       (12 B)
//! semantic L × f16                       (2·L B)
//! topk     k u16 | scale f16 | k × u32   (only when flags bit 0 is set)
//! ```
//!
//! All integers and floats are little-endian. A top-K entry packs an 18-bit
//! row-major element index above a 14-bit two's-complement value in units of
//! `scale / 8192`.

use std::fmt::Write as _;

use half::f16;
use ndarray::Array3;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DCPW";
pub const VERSION: u8 = 1;
pub const FLAG_TOPK: u8 = 0b0000_0001;
pub const HEADER_LEN: usize = 8;
pub const DELTA_LEN: usize = 12;
pub const MAX_TOPK: usize = 1024;
pub const INDEX_BITS: u32 = 18;
pub const VALUE_BITS: u32 = 14;
/// Largest element count addressable by a top-K index.
pub const MAX_ELEMENTS: usize = 1 << INDEX_BITS;
const VALUE_UNITS: f32 = 8192.0;
const VALUE_MIN: i16 = -(1 << (VALUE_BITS - 1));
const VALUE_MAX: i16 = (1 << (VALUE_BITS - 1)) - 1;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown flag bits {0:#04x}")]
    UnknownFlags(u8),
    #[error("payload length {found} does not match expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("top-K flag set but section absent")]
    MissingTopK,
    #[error("top-K indices not strictly increasing at entry {0}")]
    NonCanonicalOrder(usize),
    #[error("top-K count {0} exceeds {MAX_TOPK}")]
    TooManyEntries(usize),
    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("value {0} does not fit 14-bit fixed point")]
    ValueOutOfRange(i16),
    #[error("semantic length {0} outside 1..=65535")]
    SemanticLength(usize),
    #[error("k = {k} invalid for {len} elements")]
    InvalidK { k: usize, len: usize },
    #[error("tensor with {0} elements cannot be indexed with 18 bits")]
    TensorTooLarge(usize),
    #[error("rate inputs must be positive and finite")]
    InvalidRate,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopKEntry {
    /// Row-major index over `H·W·C`.
    pub index: u32,
    /// Signed fixed-point value in units of `scale / 8192`.
    pub value: i16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKSet {
    pub scale: f16,
    pub entries: Vec<TopKEntry>,
}

impl TopKSet {
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn step(&self) -> f32 {
        self.scale.to_f32() / VALUE_UNITS
    }

    pub fn dequantize(&self, value: i16) -> f32 {
        value as f32 * self.step()
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if self.entries.len() > MAX_TOPK {
            return Err(WireError::TooManyEntries(self.entries.len()));
        }
        if !self.scale.is_finite() {
            return Err(WireError::NonFinite("top-K scale"));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.index as usize >= MAX_ELEMENTS {
                return Err(WireError::IndexOutOfRange { index: e.index as usize, len: MAX_ELEMENTS });
            }
            if !(VALUE_MIN..=VALUE_MAX).contains(&e.value) {
                return Err(WireError::ValueOutOfRange(e.value));
            }
            if i > 0 && self.entries[i - 1].index >= e.index {
                return Err(WireError::NonCanonicalOrder(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabPayload {
    pub version: u8,
    pub semantic: Vec<f16>,
    /// Co-agent position minus ego position, meters.
    pub delta: [f32; 3],
    pub topk: Option<TopKSet>,
}

impl CollabPayload {
    pub fn new(semantic: &[f32], delta: [f64; 3], topk: Option<TopKSet>) -> Self {
        CollabPayload {
            version: VERSION,
            semantic: semantic.iter().map(|&v| f16::from_f32(v)).collect(),
            delta: delta.map(|v| v as f32),
            topk,
        }
    }

    pub fn semantic_f32(&self) -> Vec<f32> {
        self.semantic.iter().map(|v| v.to_f32()).collect()
    }

    pub fn delta_f64(&self) -> [f64; 3] {
        self.delta.map(f64::from)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + DELTA_LEN + semantic_section_len(self.semantic.len()) + self.topk.as_ref().map_or(0, |t| topk_section_len(t.k()))
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let l = self.semantic.len();
        if l == 0 || l > u16::MAX as usize {
            return Err(WireError::SemanticLength(l));
        }
        if let Some(t) = &self.topk {
            t.validate()?;
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(if self.topk.is_some() { FLAG_TOPK } else { 0 });
        out.extend_from_slice(&(l as u16).to_le_bytes());
        self.delta.iter().for_each(|d| out.extend_from_slice(&d.to_le_bytes()));
        self.semantic.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        if let Some(t) = &self.topk {
            out.extend_from_slice(&(t.k() as u16).to_le_bytes());
            out.extend_from_slice(&t.scale.to_le_bytes());
            for e in &t.entries {
                let packed = (e.index << VALUE_BITS) | (e.value as u16 as u32 & ((1 << VALUE_BITS) - 1));
                out.extend_from_slice(&packed.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::LengthMismatch { expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        let flags = bytes[5];
        if flags & !FLAG_TOPK != 0 {
            return Err(WireError::UnknownFlags(flags));
        }
        let l = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if l == 0 {
            return Err(WireError::SemanticLength(0));
        }
        let base = HEADER_LEN + DELTA_LEN + semantic_section_len(l);
        let has_topk = flags & FLAG_TOPK != 0;
        if bytes.len() < base || (!has_topk && bytes.len() != base) {
            return Err(WireError::LengthMismatch { expected: base, found: bytes.len() });
        }

        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let delta = [f32_at(8), f32_at(12), f32_at(16)];
        let semantic =
            (0..l).map(|i| f16::from_le_bytes([bytes[20 + 2 * i], bytes[21 + 2 * i]])).collect::<Vec<_>>();

        let topk = if has_topk {
            let rest = &bytes[base..];
            if rest.is_empty() {
                return Err(WireError::MissingTopK);
            }
            if rest.len() < 4 {
                return Err(WireError::LengthMismatch { expected: base + 4, found: bytes.len() });
            }
            let k = u16::from_le_bytes([rest[0], rest[1]]) as usize;
            if k > MAX_TOPK {
                return Err(WireError::TooManyEntries(k));
            }
            let expected = base + topk_section_len(k);
            if bytes.len() != expected {
                return Err(WireError::LengthMismatch { expected, found: bytes.len() });
            }
            let scale = f16::from_le_bytes([rest[2], rest[3]]);
            let entries = rest[4..]
                .chunks_exact(4)
                .map(|c| {
                    let packed = u32::from_le_bytes(c.try_into().expect("4 bytes"));
                    // Shift the 14-bit field to the top of an i16 and back to sign-extend.
                    let value = ((packed as u16) << 2) as i16 >> 2;
                    TopKEntry { index: packed >> VALUE_BITS, value }
                })
                .collect();
            let set = TopKSet { scale, entries };
            set.validate()?;
            Some(set)
        } else {
            None
        };
        Ok(CollabPayload { version, semantic, delta, topk })
    }
}

pub fn semantic_section_len(l: usize) -> usize {
    2 * l
}

pub fn topk_entries_len(k: usize) -> usize {
    (k * 32).div_ceil(8)
}

pub fn topk_section_len(k: usize) -> usize {
    4 + topk_entries_len(k)
}

/// Payload bytes per frame at `freq_hz`, in units of 1024 bit/s.
pub fn compute_rate(payload_bytes_per_frame: usize, freq_hz: f64) -> Result<f64, WireError> {
    if payload_bytes_per_frame == 0 || !(freq_hz > 0.0) || !freq_hz.is_finite() {
        return Err(WireError::InvalidRate);
    }
    Ok(payload_bytes_per_frame as f64 * 8.0 * freq_hz / 1024.0)
}

/// The `k` largest-magnitude elements (ties to the lower index), quantized
/// against their own maximum magnitude.
pub fn select_topk(f: &Array3<f32>, k: usize) -> Result<TopKSet, WireError> {
    let n = f.len();
    if n > MAX_ELEMENTS {
        return Err(WireError::TensorTooLarge(n));
    }
    if k == 0 || k > n || k > MAX_TOPK {
        return Err(WireError::InvalidK { k, len: n });
    }
    let values: Vec<f32> = f.iter().copied().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(WireError::NonFinite("feature"));
    }
    let by_rank = |a: &usize, b: &usize| values[*b].abs().total_cmp(&values[*a].abs()).then(a.cmp(b));
    let mut order: Vec<usize> = (0..n).collect();
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();

    let max_abs = order.iter().map(|&i| values[i].abs()).fold(0.0f32, f32::max);
    let mut scale = f16::from_f32(max_abs);
    if scale.to_f32() < max_abs {
        scale = f16::from_bits(scale.to_bits() + 1);
    }
    let step = scale.to_f32() / VALUE_UNITS;
    let entries = order
        .into_iter()
        .map(|i| {
            let q = if step > 0.0 { (values[i] / step).round() } else { 0.0 };
            TopKEntry { index: i as u32, value: q.clamp(VALUE_MIN as f32, VALUE_MAX as f32) as i16 }
        })
        .collect();
    Ok(TopKSet { scale, entries })
}

/// Overwrites the listed positions of `f_hat` with the transmitted values.
pub fn apply_topk(f_hat: &Array3<f32>, s: &TopKSet) -> Result<Array3<f32>, WireError> {
    let mut out = f_hat.clone();
    let n = out.len();
    let flat = out.as_slice_mut().expect("owned standard layout");
    for e in &s.entries {
        let i = e.index as usize;
        if i >= n {
            return Err(WireError::IndexOutOfRange { index: i, len: n });
        }
        flat[i] = s.dequantize(e.value);
    }
    Ok(out)
}

/// Hex dump with one labelled block per section.
pub fn hex_dump(bytes: &[u8]) -> String {
    let mut sections: Vec<(&str, usize, usize)> = Vec::new();
    let mut push = |name, start: usize, end: usize| {
        let end = end.min(bytes.len());
        if start < end {
            sections.push((name, start, end));
        }
    };
    let l = if bytes.len() >= HEADER_LEN { u16::from_le_bytes([bytes[6], bytes[7]]) as usize } else { 0 };
    let sem_end = HEADER_LEN + DELTA_LEN + semantic_section_len(l);
    push("header", 0, HEADER_LEN);
    push("delta", HEADER_LEN, HEADER_LEN + DELTA_LEN);
    push("semantic", HEADER_LEN + DELTA_LEN, sem_end);
    push("topk.header", sem_end, sem_end + 4);
    push("topk.entries", sem_end + 4, bytes.len());

    let mut out = String::new();
    for (name, start, end) in sections {
        let _ = writeln!(out, "== {name} [{start:#06x}..{end:#06x}) {} bytes", end - start);
        for (row, chunk) in bytes[start..end].chunks(16).enumerate() {
            let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(out, "{:06x}  {}", start + row * 16, hex.join(" "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rate_column_matches_semantic_lengths() {
        let expected = [(512, 80.0), (256, 40.0), (128, 20.0), (64, 10.0), (32, 5.0), (16, 2.5)];
        for (l, kibps) in expected {
            assert_eq!(compute_rate(semantic_section_len(l), 10.0).unwrap(), kibps);
        }
        assert_eq!(compute_rate(topk_entries_len(25), 10.0).unwrap(), 7.8125);
        let full = compute_rate(352 * 96 * 4 * 4, 10.0).unwrap();
        assert_eq!(full, 42_240.0);
        assert_eq!(full / 1024.0, 41.25);
        assert_eq!(compute_rate(0, 10.0), Err(WireError::InvalidRate));
        assert_eq!(compute_rate(10, 0.0), Err(WireError::InvalidRate));
    }

    #[test]
    fn semantic_only_length() {
        let p = CollabPayload::new(&vec![0.5; 512], [1.0, -2.0, 0.0], None);
        assert_eq!(p.encode().unwrap().len(), 1044);
        assert_eq!(p.encoded_len(), 1044);
    }

    #[test]
    fn distinct_decode_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Array3::from_shape_simple_fn((4, 4, 2), || rng.random_range(-1.0f32..1.0));
        let p = CollabPayload::new(&[1.0, 2.0], [0.0; 3], Some(select_topk(&f, 3).unwrap()));
        let good = p.encode().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(CollabPayload::decode(&bad), Err(WireError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(CollabPayload::decode(&bad), Err(WireError::UnsupportedVersion(9)));
        assert!(matches!(CollabPayload::decode(&good[..good.len() - 1]), Err(WireError::LengthMismatch { .. })));
        let base = HEADER_LEN + DELTA_LEN + 4;
        assert_eq!(CollabPayload::decode(&good[..base]), Err(WireError::MissingTopK));

        // Swap the first two entries to break canonical order.
        let mut bad = good.clone();
        let e = base + 4;
        let (a, b) = (bad[e..e + 4].to_vec(), bad[e + 4..e + 8].to_vec());
        bad[e..e + 4].copy_from_slice(&b);
        bad[e + 4..e + 8].copy_from_slice(&a);
        assert_eq!(CollabPayload::decode(&bad), Err(WireError::NonCanonicalOrder(1)));
    }

    #[test]
    fn single_nonzero_element() {
        let mut f = Array3::<f32>::zeros((3, 5, 2));
        f[[1, 2, 1]] = -0.7;
        let s = select_topk(&f, 1).unwrap();
        assert_eq!(s.entries[0].index, (5 + 2) * 2 + 1);
        assert!((s.dequantize(s.entries[0].value) + 0.7).abs() <= s.step());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let f = Array3::from_shape_fn((2, 2, 2), |(a, b, c)| if (a + b + c) % 2 == 0 { 1.0 } else { -1.0 });
        let idx: Vec<u32> = select_topk(&f, 3).unwrap().entries.iter().map(|e| e.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn invalid_k() {
        let f = Array3::<f32>::zeros((2, 2, 1));
        assert!(matches!(select_topk(&f, 0), Err(WireError::InvalidK { .. })));
        assert!(matches!(select_topk(&f, 5), Err(WireError::InvalidK { .. })));
    }

    #[test]
    fn apply_topk_overwrites_only_listed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = Array3::from_shape_simple_fn((6, 4, 3), || rng.random_range(-2.0f32..2.0));
        let approx = Array3::from_shape_simple_fn((6, 4, 3), || rng.random_range(-2.0f32..2.0));
        let s = select_topk(&truth, 10).unwrap();
        let out = apply_topk(&approx, &s).unwrap();
        let listed: Vec<usize> = s.entries.iter().map(|e| e.index as usize).collect();
        let changed = out.iter().zip(approx.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 10);
        for (i, ((o, a), t)) in out.iter().zip(approx.iter()).zip(truth.iter()).enumerate() {
            if listed.contains(&i) {
                assert!((o - t).abs() <= s.step());
            } else {
                assert_eq!(o, a);
            }
        }
        let empty = TopKSet { scale: f16::ONE, entries: vec![] };
        assert_eq!(apply_topk(&approx, &empty).unwrap(), approx);
        let oob = TopKSet { scale: f16::ONE, entries: vec![TopKEntry { index: 72, value: 1 }] };
        assert!(matches!(apply_topk(&approx, &oob), Err(WireError::IndexOutOfRange { .. })));
    }

    #[test]
    fn hex_dump_marks_sections() {
        let f = Array3::from_elem((2, 2, 1), 1.0f32);
        let p = CollabPayload::new(&[1.0; 4], [0.0; 3], Some(select_topk(&f, 2).unwrap()));
        let dump = hex_dump(&p.encode().unwrap());
        for name in ["header", "delta", "semantic", "topk.header", "topk.entries"] {
            assert!(dump.contains(&format!("== {name} ")), "{dump}");
        }
        assert!(dump.contains("44 43 50 57"));
    }

    /// Exhaustive oracle: sort everything by (|v| desc, index asc).
    pub(crate) fn oracle_topk(values: &[f32], k: usize) -> Vec<u32> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).unwrap().then(a.cmp(&b)));
        let mut top: Vec<u32> = idx[..k].iter().map(|&i| i as u32).collect();
        top.sort();
        top
    }

    #[test]
    fn matches_sort_oracle_on_toy_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Array3::from_shape_simple_fn((44, 24, 4), || rng.random_range(-3.0f32..3.0));
        let s = select_topk(&f, 25).unwrap();
        let values: Vec<f32> = f.iter().copied().collect();
        assert_eq!(s.entries.iter().map(|e| e.index).collect::<Vec<_>>(), oracle_topk(&values, 25));
        for e in &s.entries {
            assert!((s.dequantize(e.value) - values[e.index as usize]).abs() <= s.step());
        }
    }

    #[test]
    fn matches_sort_oracle_on_large_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Coarse values force many magnitude ties.
        let f = Array3::from_shape_simple_fn((250, 100, 4), || rng.random_range(-50i32..50) as f32);
        let s = select_topk(&f, 1000).unwrap();
        let values: Vec<f32> = f.iter().copied().collect();
        assert_eq!(s.entries.iter().map(|e| e.index).collect::<Vec<_>>(), oracle_topk(&values, 1000));
    }

    fn arb_payload() -> impl Strategy<Value = CollabPayload> {
        let semantic = prop::collection::vec(any::<u16>().prop_map(f16::from_bits), 1..600);
        let delta = prop::array::uniform3(any::<f32>());
        let entries = prop::collection::btree_map(0u32..(1 << 18), VALUE_MIN..=VALUE_MAX, 0..60);
        let topk = prop::option::of((any::<u16>().prop_map(f16::from_bits).prop_filter("finite", |s| s.is_finite()), entries));
        (any::<u8>(), semantic, delta, topk).prop_map(|(_, semantic, delta, topk)| CollabPayload {
            version: VERSION,
            semantic,
            delta,
            topk: topk.map(|(scale, m)| TopKSet {
                scale,
                entries: m.into_iter().map(|(index, value)| TopKEntry { index, value }).collect(),
            }),
        })
    }

    fn bit_equal(a: &CollabPayload, b: &CollabPayload) -> bool {
        let bits = |p: &CollabPayload| {
            (
                p.version,
                p.semantic.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                p.delta.map(f32::to_bits),
                p.topk.as_ref().map(|t| (t.scale.to_bits(), t.entries.clone())),
            )
        };
        bits(a) == bits(b)
    }

    proptest! {
        #[test]
        fn codec_roundtrip(p in arb_payload()) {
            let bytes = p.encode().unwrap();
            prop_assert_eq!(bytes.len(), p.encoded_len());
            let back = CollabPayload::decode(&bytes).unwrap();
            prop_assert!(bit_equal(&back, &p));
            prop_assert_eq!(back.encode().unwrap(), bytes);
        }

        #[test]
        fn apply_changes_at_most_listed(seed in any::<u64>(), k in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = Array3::from_shape_simple_fn((8, 6, 2), || rng.random_range(-1.0f32..1.0));
            let s = select_topk(&truth, k).unwrap();
            let base = Array3::from_elem((8, 6, 2), 5.0f32);
            let out = apply_topk(&base, &s).unwrap();
            prop_assert_eq!(out.iter().filter(|&&v| v != 5.0).count(), k);
        }
    }
}
