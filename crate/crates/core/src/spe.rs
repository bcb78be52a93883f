//! Positional embeddings that live on the sphere rather than the ERP plane.
//!
//! A token's ERP position is mapped to a unit vector `(x, y, z)` and each
//! axis gets `d/3` sinusoidal channels, interleaved `sin, cos` per frequency
//! with `ω_k = base^(−6k/d)`, axis order x, y, z. Tokens on either side of the
//! ±π seam are neighbours on the sphere, so their embeddings are too.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::sphere::{erp_to_spherical, spherical_to_cartesian, UnitVector};

pub const DEFAULT_BASE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpeConfig {
    pub dim: usize,
    pub base: f64,
    pub height: usize,
    pub width: usize,
}

impl SpeConfig {
    pub fn new(dim: usize, height: usize, width: usize) -> Result<Self> {
        let cfg = SpeConfig { dim, base: DEFAULT_BASE, height, width };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(6) {
            return Err(Error::Config(format!("embedding dim must be a positive multiple of 6, got {}", self.dim)));
        }
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::Config(format!("frequency base must exceed 1, got {}", self.base)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("token grid must be non-empty".into()));
        }
        Ok(())
    }

    /// Frequencies shared by the three axes.
    pub fn frequencies(&self) -> Vec<f64> {
        let per_axis = self.dim / 6;
        (0..per_axis)
            .map(|k| self.base.powf(-6.0 * k as f64 / self.dim as f64))
            .collect()
    }
}

fn encode_axes(values: &[f64], freqs: &[f64], out: &mut Vec<f64>) {
    for &v in values {
        for &w in freqs {
            let (s, c) = (v * w).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
}

pub fn embed_point(p: &UnitVector, cfg: &SpeConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.dim);
    encode_axes(&[p.x, p.y, p.z], &cfg.frequencies(), &mut out);
    Ok(out)
}

/// `H × W` rows of `d` values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.width + j) * self.dim;
        &self.data[k..k + self.dim]
    }

    /// Single-precision copy for export.
    pub fn to_grid(&self) -> Raster<f32> {
        Raster::from_vec(self.width, self.height, self.dim, self.data.iter().map(|&v| v as f32).collect())
            .expect("table dimensions are consistent")
    }
}

fn token_point(i: usize, j: usize, cfg: &SpeConfig) -> UnitVector {
    let c = erp_to_spherical(i as f64, j as f64, cfg.height, cfg.width).expect("token indices are in range");
    spherical_to_cartesian(c)
}

fn embed_row(i: usize, cfg: &SpeConfig, freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.width * cfg.dim);
    for j in 0..cfg.width {
        let p = token_point(i, j, cfg);
        encode_axes(&[p.x, p.y, p.z], freqs, &mut out);
    }
    out
}

pub fn build_table(cfg: &SpeConfig) -> Result<EmbeddingTable> {
    cfg.validate()?;
    let freqs = cfg.frequencies();
    let rows: Vec<Vec<f64>> = (0..cfg.height).into_par_iter().map(|i| embed_row(i, cfg, &freqs)).collect();
    Ok(EmbeddingTable {
        height: cfg.height,
        width: cfg.width,
        dim: cfg.dim,
        data: rows.concat(),
    })
}

/// Conventional 2D sinusoidal embedding over (latitude, longitude) in radians,
/// `d/2` channels per coordinate. Flat in the ERP plane: it does not know that
/// the two ends of a row meet.
pub fn embed_planar(i: usize, j: usize, cfg: &SpeConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let c = erp_to_spherical(i as f64, j as f64, cfg.height, cfg.width)?;
    let per_axis = cfg.dim / 4;
    let freqs: Vec<f64> = (0..per_axis)
        .map(|k| cfg.base.powf(-4.0 * k as f64 / cfg.dim as f64))
        .collect();
    let mut out = Vec::with_capacity(cfg.dim);
    encode_axes(&[c.phi(), c.lambda()], &freqs, &mut out);
    out.resize(cfg.dim, 0.0);
    Ok(out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean embedding distance of the seam pair `(i, W−1)–(i, 0)` and of interior
/// horizontal neighbours `(i, j)–(i, j+1)`, over every row.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SeamStats {
    pub seam_mean: f64,
    pub interior_mean: f64,
}

impl SeamStats {
    pub fn ratio(&self) -> f64 {
        if self.interior_mean == 0.0 {
            if self.seam_mean == 0.0 { 1.0 } else { f64::INFINITY }
        } else {
            self.seam_mean / self.interior_mean
        }
    }
}

fn seam_stats_with(cfg: &SpeConfig, row: impl Fn(usize) -> Vec<Vec<f64>> + Sync) -> Result<SeamStats> {
    cfg.validate()?;
    if cfg.width < 2 {
        return Err(Error::domain("seam statistics need at least two columns"));
    }
    let per_row: Vec<(f64, f64)> = (0..cfg.height)
        .into_par_iter()
        .map(|i| {
            let r = row(i);
            let seam = distance(&r[cfg.width - 1], &r[0]);
            let interior = r.windows(2).map(|w| distance(&w[0], &w[1])).sum::<f64>() / (cfg.width - 1) as f64;
            (seam, interior)
        })
        .collect();
    let n = cfg.height as f64;
    Ok(SeamStats {
        seam_mean: per_row.iter().map(|p| p.0).sum::<f64>() / n,
        interior_mean: per_row.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// Seam statistics of the spherical embedding, computed row by row.
pub fn seam_stats(cfg: &SpeConfig) -> Result<SeamStats> {
    let freqs = cfg.frequencies();
    seam_stats_with(cfg, |i| embed_row(i, cfg, &freqs).chunks(cfg.dim).map(<[f64]>::to_vec).collect())
}

/// Seam statistics of the planar baseline.
pub fn planar_seam_stats(cfg: &SpeConfig) -> Result<SeamStats> {
    seam_stats_with(cfg, |i| {
        (0..cfg.width)
            .map(|j| embed_planar(i, j, cfg).expect("validated config"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn d6_forward_axis() {
        let cfg = SpeConfig::new(6, 4, 8).unwrap();
        let e = embed_point(&UnitVector::new(1.0, 0.0, 0.0).unwrap(), &cfg).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.0, 1.0, 0.0, 1.0];
        assert!(close(&e, &want, 1e-15), "{e:?}");
        assert!((e[0] - 0.8415).abs() < 1e-4 && (e[1] - 0.5403).abs() < 1e-4);
    }

    #[test]
    fn d6_pole_axis() {
        let cfg = SpeConfig::new(6, 4, 8).unwrap();
        let e = embed_point(&UnitVector::new(0.0, 0.0, 1.0).unwrap(), &cfg).unwrap();
        assert!(close(&e, &[0.0, 1.0, 0.0, 1.0, 1f64.sin(), 1f64.cos()], 1e-15));
    }

    #[test]
    fn dim_must_divide_by_six() {
        assert!(SpeConfig::new(8, 4, 8).is_err());
        assert!(SpeConfig::new(0, 4, 8).is_err());
        let bad = SpeConfig { dim: 12, base: DEFAULT_BASE, height: 4, width: 8 };
        assert!(embed_point(&UnitVector::new(1.0, 0.0, 0.0).unwrap(), &SpeConfig { dim: 10, ..bad }).is_err());
    }

    #[test]
    fn frequency_schedule() {
        let cfg = SpeConfig::new(18, 4, 8).unwrap();
        let f = cfg.frequencies();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0], 1.0);
        assert!((f[1] - 10000f64.powf(-6.0 / 18.0)).abs() < 1e-15);
        assert!((f[2] - 10000f64.powf(-12.0 / 18.0)).abs() < 1e-15);
    }

    #[test]
    fn table_layout_and_pole_collapse() {
        let cfg = SpeConfig::new(12, 8, 16).unwrap();
        let t = build_table(&cfg).unwrap();
        assert_eq!(t.data.len(), 8 * 16 * 12);
        for j in 1..16 {
            assert!(close(t.row(0, j), t.row(0, 0), 1e-15));
        }
        let p = token_point(3, 5, &cfg);
        assert_eq!(t.row(3, 5), embed_point(&p, &cfg).unwrap().as_slice());
        assert!(t.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn mirrored_longitudes() {
        // columns j and W − j sit at λ and −λ
        let cfg = SpeConfig::new(12, 8, 16).unwrap();
        let t = build_table(&cfg).unwrap();
        let per_axis = cfg.dim / 3;
        for i in 1..8 {
            for j in 1..8 {
                let (a, b) = (t.row(i, 8 + j), t.row(i, 8 - j));
                assert!(close(&a[..per_axis], &b[..per_axis], 1e-12));
                for k in 0..per_axis / 2 {
                    assert!((a[per_axis + 2 * k] + b[per_axis + 2 * k]).abs() < 1e-12, "sin flips");
                    assert!((a[per_axis + 2 * k + 1] - b[per_axis + 2 * k + 1]).abs() < 1e-12, "cos holds");
                }
            }
        }
    }

    #[test]
    fn seam_matches_interior_but_planar_does_not() {
        let cfg = SpeConfig::new(48, 64, 128).unwrap();
        let s = seam_stats(&cfg).unwrap();
        assert!((s.seam_mean - s.interior_mean).abs() < 1e-6, "{s:?}");
        let p = planar_seam_stats(&cfg).unwrap();
        assert!(p.ratio() > 10.0, "{p:?}");
    }

    #[test]
    fn export_round_trip() {
        let cfg = SpeConfig::new(6, 4, 8).unwrap();
        let t = build_table(&cfg).unwrap();
        let bytes = crate::tensorfile::encode(&t.to_grid(), cfg.base as f32);
        assert_eq!(bytes.len(), 32 + 4 * 8 * 6 * 4);
        let (h, g) = crate::tensorfile::decode(&bytes).unwrap();
        assert_eq!((h.height, h.width, h.depth), (4, 8, 6));
        assert_eq!(g.get(2, 3, 4), t.row(2, 3)[4] as f32);
    }

    proptest! {
        #[test]
        fn sin_cos_pairs_are_unit(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!(x * x + y * y + z * z > 1e-3);
            let p = UnitVector::normalize(x, y, z).unwrap();
            let cfg = SpeConfig::new(36, 4, 8).unwrap();
            let e = embed_point(&p, &cfg).unwrap();
            for pair in e.chunks(2) {
                prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn yaw_rotation_rolls_columns(i in 0usize..16, j in 0usize..32, shift in 0usize..32) {
            // rotating sphere points by a column multiple about z lands on the rolled column
            let cfg = SpeConfig::new(18, 16, 32).unwrap();
            let t = build_table(&cfg).unwrap();
            let p = token_point(i, j, &cfg);
            let a = 2.0 * std::f64::consts::PI * shift as f64 / 32.0;
            let (s, c) = a.sin_cos();
            let q = UnitVector::normalize(c * p.x - s * p.y, s * p.x + c * p.y, p.z).unwrap();
            let e = embed_point(&q, &cfg).unwrap();
            prop_assert!(close(&e, t.row(i, (j + shift) % 32), 1e-9));
        }
    }
}
