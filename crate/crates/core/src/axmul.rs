//! 8-bit signed (approximate) multipliers represented as exhaustive product
//! tables.
//!
//! A table holds 65536 signed 16-bit products. The product of operands `a`
//! (first, activation side) and `b` (second, weight side) lives at index
//! `(a + 128) * 256 + (b + 128)`. Tables are not assumed to be commutative,
//! and `lut(0, b)` is not assumed to be zero.

use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::par;

/// Number of entries in a product table.
pub const LUT_LEN: usize = 65536;
/// Size of the product body of a table file in bytes.
pub const LUT_BODY_BYTES: usize = LUT_LEN * 2;
/// Size of the table file header in bytes.
pub const LUT_HEADER_BYTES: usize = 45;
const MAGIC: &[u8; 4] = b"AXM8";
const VERSION: u8 = 0x01;
const NAME_BYTES: usize = 32;

/// Name of the exact reference multiplier.
pub const EXACT_NAME: &str = "mul8s_1KV6";
/// Per-operation power of the exact reference multiplier, in nanowatts.
pub const EXACT_POWER_NW: f64 = 0.425;

/// Table index of the operand pair `(a, b)`.
#[inline]
pub fn lut_index(a: i8, b: i8) -> usize {
    ((a as i16 + 128) as usize) << 8 | (b as i16 + 128) as usize
}

/// Operands of a table index; inverse of [`lut_index`].
#[inline]
pub fn operands(idx: usize) -> (i8, i8) {
    (((idx >> 8) as i16 - 128) as i8, ((idx & 0xff) as i16 - 128) as i8)
}

/// Mathematically exact signed product.
#[inline]
pub fn exact_mul8s(a: i8, b: i8) -> i16 {
    a as i16 * b as i16
}

/// An immutable named product table with per-operation power metadata.
#[derive(Clone, PartialEq)]
pub struct AxMultiplier {
    name: String,
    power_nw: f64,
    lut: Box<[i16]>,
}

impl std::fmt::Debug for AxMultiplier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AxMultiplier")
            .field("name", &self.name)
            .field("power_nw", &self.power_nw)
            .finish_non_exhaustive()
    }
}

impl AxMultiplier {
    pub fn new(name: impl Into<String>, power_nw: f64, lut: Vec<i16>) -> Result<Self> {
        let name = name.into();
        if lut.len() != LUT_LEN {
            bail!(Size, "product table has {} entries, expected {LUT_LEN}", lut.len());
        }
        if !(power_nw.is_finite() && power_nw > 0.0) {
            bail!(Metadata, "power_nw must be positive, got {power_nw}");
        }
        validate_name(&name)?;
        Ok(Self {
            name,
            power_nw,
            lut: lut.into_boxed_slice(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn power_nw(&self) -> f64 {
        self.power_nw
    }

    pub fn lut(&self) -> &[i16] {
        &self.lut
    }

    #[inline]
    pub fn mul(&self, a: i8, b: i8) -> i16 {
        self.lut[lut_index(a, b)]
    }

    /// The 256 products `lut(a, ·)` indexed by `b + 128`.
    #[inline]
    pub fn row(&self, a: i8) -> &[i16] {
        let start = ((a as i16 + 128) as usize) << 8;
        &self.lut[start..start + 256]
    }

    /// True when every entry equals the exact product.
    pub fn is_exact(&self) -> bool {
        self.lut
            .iter()
            .enumerate()
            .all(|(i, &p)| {
                let (a, b) = operands(i);
                p == exact_mul8s(a, b)
            })
    }

    /// Serialize to the `AXM8` table file layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LUT_HEADER_BYTES + LUT_BODY_BYTES);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let mut name = [0u8; NAME_BYTES];
        name[..self.name.len()].copy_from_slice(self.name.as_bytes());
        out.extend_from_slice(&name);
        out.extend_from_slice(&self.power_nw.to_le_bytes());
        for p in self.lut.iter() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Parse the `AXM8` table file layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < LUT_HEADER_BYTES {
            bail!(Size, "table file is {} bytes, shorter than the header", bytes.len());
        }
        if &bytes[0..4] != MAGIC {
            bail!(Format, "bad magic {:?}, expected \"AXM8\"", &bytes[0..4]);
        }
        if bytes[4] != VERSION {
            bail!(Format, "unsupported table version {:#04x}", bytes[4]);
        }
        let raw_name = &bytes[5..5 + NAME_BYTES];
        let end = raw_name.iter().position(|&c| c == 0).unwrap_or(NAME_BYTES);
        if raw_name[end..].iter().any(|&c| c != 0) {
            bail!(Format, "name field is not zero-padded");
        }
        let name = std::str::from_utf8(&raw_name[..end])
            .map_err(|e| Error::Format(format!("name is not UTF-8: {e}")))?
            .to_string();
        let power_nw = f64::from_le_bytes(bytes[37..45].try_into().expect("8 bytes"));
        if !(power_nw.is_finite() && power_nw > 0.0) {
            bail!(Metadata, "power_nw must be positive, got {power_nw}");
        }
        let body = &bytes[LUT_HEADER_BYTES..];
        if body.len() != LUT_BODY_BYTES {
            bail!(
                Size,
                "table body is {} bytes, expected exactly {LUT_BODY_BYTES}",
                body.len()
            );
        }
        let lut = body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        Self::new(name, power_nw, lut)
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > NAME_BYTES || name.contains('\0') {
        bail!(
            Metadata,
            "multiplier name must be 1..={NAME_BYTES} UTF-8 bytes without NUL, got {name:?}"
        );
    }
    Ok(())
}

/// The exact reference multiplier `mul8s_1KV6` (0.425 nW).
pub fn build_exact_multiplier() -> AxMultiplier {
    let lut = (0..LUT_LEN)
        .map(|i| {
            let (a, b) = operands(i);
            exact_mul8s(a, b)
        })
        .collect();
    AxMultiplier::new(EXACT_NAME, EXACT_POWER_NW, lut).expect("exact table is valid")
}

/// Zero the lowest `dropped` bits of the operand magnitude, keeping its sign.
#[inline]
pub fn truncate_operand(v: i8, dropped: u32) -> i16 {
    let mag = (v as i16).abs() & !((1i16 << dropped) - 1);
    if v < 0 {
        -mag
    } else {
        mag
    }
}

/// A synthetic multiplier that truncates the low bits of both operand
/// magnitudes before multiplying exactly. Named `trunc<k>`.
pub fn build_truncation_multiplier(dropped_low_bits: u32, power_nw: f64) -> Result<AxMultiplier> {
    if !(1..=7).contains(&dropped_low_bits) {
        bail!(Param, "dropped_low_bits must be in 1..=7, got {dropped_low_bits}");
    }
    let lut = (0..LUT_LEN)
        .map(|i| {
            let (a, b) = operands(i);
            truncate_operand(a, dropped_low_bits) * truncate_operand(b, dropped_low_bits)
        })
        .collect();
    AxMultiplier::new(format!("trunc{dropped_low_bits}"), power_nw, lut)
}

/// Nominal power for a truncation multiplier: the exact power scaled by the
/// fraction of the partial-product array that survives, `((8 - k) / 8)^2`.
pub fn nominal_truncation_power(dropped_low_bits: u32) -> f64 {
    let kept = (8.0 - dropped_low_bits as f64) / 8.0;
    EXACT_POWER_NW * kept * kept
}

pub fn save_lut(m: &AxMultiplier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_lut(path: impl AsRef<Path>) -> Result<AxMultiplier> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AxMultiplier::from_bytes(&bytes)
}

/// Deviation of a table from the exact product over all operand pairs,
/// assuming uniformly distributed operands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    /// Fraction of pairs where the table differs from the exact product.
    pub error_probability: f64,
    pub mean_abs_error: f64,
    pub max_abs_error: u32,
}

pub fn error_stats(m: &AxMultiplier) -> ErrorStats {
    // (mismatches, sum |err|, max |err|) per row of the table
    let rows = par::map_range(256, |r| {
        let a = (r as i16 - 128) as i8;
        let row = m.row(a);
        let mut count = 0u64;
        let mut sum = 0u64;
        let mut max = 0u32;
        for (c, &p) in row.iter().enumerate() {
            let b = (c as i16 - 128) as i8;
            let err = (p as i32 - exact_mul8s(a, b) as i32).unsigned_abs();
            if err != 0 {
                count += 1;
                sum += err as u64;
                max = max.max(err);
            }
        }
        (count, sum, max)
    });
    let (count, sum, max) = rows
        .into_iter()
        .fold((0u64, 0u64, 0u32), |acc, r| (acc.0 + r.0, acc.1 + r.1, acc.2.max(r.2)));
    ErrorStats {
        error_probability: count as f64 / LUT_LEN as f64,
        mean_abs_error: sum as f64 / LUT_LEN as f64,
        max_abs_error: max,
    }
}

/// Per-operation power saving of `m` relative to `baseline`, in percent.
pub fn per_op_saving(m: &AxMultiplier, baseline: &AxMultiplier) -> Result<f64> {
    saving_percent(m.power_nw(), baseline.power_nw())
}

pub fn saving_percent(power_nw: f64, baseline_nw: f64) -> Result<f64> {
    if !(baseline_nw.is_finite() && baseline_nw > 0.0) {
        bail!(Param, "baseline power must be positive, got {baseline_nw}");
    }
    Ok((1.0 - power_nw / baseline_nw) * 100.0)
}

/// A published 8-bit signed multiplier characterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub power_nw: f64,
    pub saving_pct: f64,
    pub error_probability_pct: f64,
}

/// EvoApproxLib 8-bit signed multipliers: power, per-op saving and error
/// probability as published. Only `mul8s_1KV6` has a builtin table; the
/// others need their table files.
pub const CATALOG: [CatalogEntry; 8] = [
    CatalogEntry { name: "mul8s_1KV6", power_nw: 0.425, saving_pct: 0.0, error_probability_pct: 0.0 },
    CatalogEntry { name: "mul8s_1KV8", power_nw: 0.422, saving_pct: 0.7, error_probability_pct: 50.0 },
    CatalogEntry { name: "mul8s_1KV9", power_nw: 0.410, saving_pct: 3.5, error_probability_pct: 68.75 },
    CatalogEntry { name: "mul8s_1KVA", power_nw: 0.391, saving_pct: 8.0, error_probability_pct: 81.25 },
    CatalogEntry { name: "mul8s_1KVM", power_nw: 0.369, saving_pct: 13.2, error_probability_pct: 49.80 },
    CatalogEntry { name: "mul8s_1KVP", power_nw: 0.363, saving_pct: 14.6, error_probability_pct: 74.8 },
    CatalogEntry { name: "mul8s_1L2J", power_nw: 0.301, saving_pct: 29.2, error_probability_pct: 74.61 },
    CatalogEntry { name: "mul8s_1L2L", power_nw: 0.200, saving_pct: 52.9, error_probability_pct: 93.16 },
];

pub fn catalog_entry(name: &str) -> Option<&'static CatalogEntry> {
    CATALOG.iter().find(|e| e.name == name)
}
