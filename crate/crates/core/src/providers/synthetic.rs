//! Deterministic synthetic market data.
//!
//! Each value is derived from FNV-1a-64 of `code|field|YYYY-MM-DD|seed`.
//! Rounding is done in integer arithmetic on `m = hash mod 1_000_000`
//! (round half up), so results do not depend on float rounding of ties.

use chrono::NaiveDate;

use super::CanonicalField;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

pub fn synthetic_value(code: &str, field: CanonicalField, day: NaiveDate, seed: u64) -> f64 {
    let key = format!("{code}|{}|{}|{seed}", field.as_str(), day.format("%Y-%m-%d"));
    let m = fnv1a64(key.as_bytes()) % 1_000_000;
    match field {
        // 100 + 100u in hundredths: 10_000 + m / 100
        CanonicalField::Close | CanonicalField::Open | CanonicalField::High | CanonicalField::Low => {
            (10_000 + (m + 50) / 100) as f64 / 100.0
        }
        CanonicalField::Volume => m as f64,
        // 1 + 9u in thousandths: 1_000 + 9m / 1_000
        CanonicalField::PbLf => (1_000 + (9 * m + 500) / 1_000) as f64 / 1_000.0,
        // 10u in ten-thousandths: m / 10
        CanonicalField::Turn => ((m + 5) / 10) as f64 / 10_000.0,
    }
}
