use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::record::{LocalizationKind, ObjectRecord};
use crate::error::{Error, Result};

pub const ABSOLUTE_MAX_DEG: f64 = 10.0;

/// Per-record stream: the batch seed and record id hashed together.
fn record_rng(id: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Yaw rotation, in degrees, for a training sample drawn from `record`.
/// Frame-anchored descriptions tolerate only a small turn; descriptions
/// relative to other objects survive any turn.
pub fn augment_rotation(record: &ObjectRecord, seed: u64) -> Result<f64> {
    let kind = record
        .localization_kind
        .ok_or_else(|| Error::Precondition(format!("record {} has no localization kind", record.id)))?;
    let mut rng = record_rng(&record.id, seed);
    Ok(match kind {
        LocalizationKind::Absolute => rng.random_range(0.0..=ABSOLUTE_MAX_DEG),
        LocalizationKind::Relative => rng.random_range(0.0..360.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxfusion::BBox;

    fn rec(id: &str, kind: Option<LocalizationKind>) -> ObjectRecord {
        let mut r = ObjectRecord::new(id.into(), "p.png".into(), "d".into(), "c".into(), BBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
        r.localization_kind = kind;
        r
    }

    #[test]
    fn ranges_and_determinism() {
        for k in 0..500u64 {
            let a = augment_rotation(&rec(&format!("p-{k}"), Some(LocalizationKind::Absolute)), k).unwrap();
            assert!((0.0..=10.0).contains(&a));
            let r = augment_rotation(&rec(&format!("p-{k}"), Some(LocalizationKind::Relative)), k).unwrap();
            assert!((0.0..360.0).contains(&r));
        }
        let r = rec("living-00", Some(LocalizationKind::Relative));
        assert_eq!(augment_rotation(&r, 7).unwrap().to_bits(), augment_rotation(&r, 7).unwrap().to_bits());
        assert_ne!(augment_rotation(&r, 7).unwrap(), augment_rotation(&r, 8).unwrap());
    }

    #[test]
    fn relative_angles_spread_over_the_circle() {
        let angles: Vec<f64> = (0..2000)
            .map(|k| augment_rotation(&rec(&format!("r{k}"), Some(LocalizationKind::Relative)), 1).unwrap())
            .collect();
        assert!(angles.iter().any(|a| *a > 300.0));
        assert!(angles.iter().filter(|a| **a > 10.0).count() > 1900);
    }

    #[test]
    fn missing_kind_is_a_precondition_error() {
        assert!(matches!(augment_rotation(&rec("x", None), 0), Err(Error::Precondition(_))));
    }
}
