//! Configuration-dependent speckle matrices.
//!
//! Each row of a matrix is one illumination pattern. A row is the intensity
//! of a field interpolated between two fixed complex fields,
//! `|cos θ · B₀ + sin θ · B₁|²`, with `θ = bend / decorrelation_scale`
//! clamped to `[0, π/2]`, then scaled to unit maximum. In wavefront-shaped
//! mode `B₀` is a focal spot per row, so the calibrated configuration
//! raster-scans the object and bending blurs the spots into speckle.
//!
//! Row `i` draws `B₀` and `B₁` from their own seeded streams, so matrices do
//! not depend on thread scheduling.

use std::f64::consts::FRAC_PI_2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::FiberConfiguration;
use crate::binio::{len_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"SPKL";
pub const ENSEMBLE_VERSION: u32 = 1;

/// `θ` reaches `π/2` exactly at `bend = 1`.
pub const DEFAULT_DECORRELATION_SCALE: f64 = 2.0 / std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlluminationMode {
    WavefrontShaped,
    Random,
}

impl IlluminationMode {
    fn code(self) -> u8 {
        match self {
            IlluminationMode::WavefrontShaped => 1,
            IlluminationMode::Random => 0,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(IlluminationMode::WavefrontShaped),
            0 => Ok(IlluminationMode::Random),
            _ => Err(Error::Malformed(format!("unknown illumination mode {c}"))),
        }
    }
}

/// Borrowed row-major `rows × cols` matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatrixView<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeckleEnsemble {
    pub patterns: usize,
    pub pixels: usize,
    pub configurations: Vec<FiberConfiguration>,
    matrices: Vec<Vec<f64>>,
    pub mode: IlluminationMode,
    pub seed: u64,
    pub decorrelation_scale: f64,
}

fn mixing_angle(bend: f64, scale: f64) -> f64 {
    (bend / scale).clamp(0.0, FRAC_PI_2)
}

/// Complex Gaussian row with unit mean intensity, as interleaved (re, im).
fn gaussian_field(seed: u64, stream: u64, n: usize) -> Vec<(f64, f64)> {
    let mut rng = Rng::stream(seed, stream);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..n).map(|_| (s * rng.normal(), s * rng.normal())).collect()
}

fn spot_field(row: usize, n: usize) -> Vec<(f64, f64)> {
    let mut f = vec![(0.0, 0.0); n];
    // Same total power as a speckle row.
    f[row % n] = ((n as f64).sqrt(), 0.0);
    f
}

impl SpeckleEnsemble {
    pub fn generate(
        patterns: usize,
        pixels: usize,
        configurations: Vec<FiberConfiguration>,
        mode: IlluminationMode,
        decorrelation_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if patterns == 0 || pixels == 0 {
            return Err(Error::invalid("ensemble needs M >= 1 and N >= 1"));
        }
        if !(decorrelation_scale > 0.0 && decorrelation_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "decorrelation scale must be positive, got {decorrelation_scale}"
            )));
        }
        let angles: Vec<(f64, f64)> = configurations
            .iter()
            .map(|c| {
                let th = mixing_angle(c.bend, decorrelation_scale);
                (th.cos(), th.sin())
            })
            .collect();
        let rows: Vec<Vec<Vec<f64>>> = (0..patterns)
            .into_par_iter()
            .map(|i| {
                let b0 = match mode {
                    IlluminationMode::Random => gaussian_field(seed, 2 * i as u64, pixels),
                    IlluminationMode::WavefrontShaped => spot_field(i, pixels),
                };
                let b1 = gaussian_field(seed, 2 * i as u64 + 1, pixels);
                angles
                    .iter()
                    .map(|&(c, s)| {
                        let mut row: Vec<f64> = b0
                            .iter()
                            .zip(&b1)
                            .map(|(&(r0, i0), &(r1, i1))| {
                                let re = c * r0 + s * r1;
                                let im = c * i0 + s * i1;
                                re * re + im * im
                            })
                            .collect();
                        let max = row.iter().cloned().fold(0.0, f64::max);
                        if max > 0.0 {
                            row.iter_mut().for_each(|v| *v /= max);
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        let mut matrices = vec![Vec::with_capacity(patterns * pixels); configurations.len()];
        for per_config in rows {
            for (l, row) in per_config.into_iter().enumerate() {
                matrices[l].extend_from_slice(&row);
            }
        }
        Ok(Self {
            patterns,
            pixels,
            configurations,
            matrices,
            mode,
            seed,
            decorrelation_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.configurations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configurations.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.configurations.iter().position(|c| c.id == id)
    }

    pub fn matrix(&self, l: usize) -> MatrixView<'_> {
        MatrixView {
            rows: self.patterns,
            cols: self.pixels,
            data: &self.matrices[l],
        }
    }

    pub fn matrix_by_id(&self, id: &str) -> Result<MatrixView<'_>> {
        let l = self
            .index_of(id)
            .ok_or_else(|| Error::invalid(format!("configuration `{id}` not in ensemble")))?;
        Ok(self.matrix(l))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(ENSEMBLE_MAGIC)?;
        w.u32(ENSEMBLE_VERSION)?;
        w.u8(self.mode.code())?;
        w.u64(self.seed)?;
        w.f64(self.decorrelation_scale)?;
        w.u32(len_u32(self.patterns)?)?;
        w.u32(len_u32(self.pixels)?)?;
        w.u32(len_u32(self.configurations.len())?)?;
        for (c, m) in self.configurations.iter().zip(&self.matrices) {
            w.string(&c.id)?;
            w.f64(c.arm_position)?;
            w.f64(c.rotation)?;
            w.f64(c.bend)?;
            w.f64s(m)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(BufReader::new(input), "speckle ensemble");
        r.magic(ENSEMBLE_MAGIC)?;
        r.version(ENSEMBLE_VERSION)?;
        let mode = IlluminationMode::from_code(r.u8()?)?;
        let seed = r.u64()?;
        let decorrelation_scale = r.f64()?;
        let patterns = r.u32()? as usize;
        let pixels = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut configurations = Vec::new();
        let mut matrices = Vec::new();
        for _ in 0..count {
            let id = r.string()?;
            let arm_position = r.f64()?;
            let rotation = r.f64()?;
            let bend = r.f64()?;
            configurations.push(FiberConfiguration {
                id,
                arm_position,
                rotation,
                bend,
            });
            matrices.push(r.f64s(patterns * pixels)?);
        }
        if !r.at_eof()? {
            return Err(Error::Malformed("trailing bytes after ensemble".into()));
        }
        Ok(Self {
            patterns,
            pixels,
            configurations,
            matrices,
            mode,
            seed,
            decorrelation_scale,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }

    /// SHA-256 of the serialized ensemble, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = HashWriter(Sha256::new());
        self.write(&mut hasher).expect("hashing cannot fail");
        hex::encode(hasher.0.finalize())
    }
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Pearson correlation of two equally shaped matrices, flattened.
pub fn speckle_correlation(a: MatrixView<'_>, b: MatrixView<'_>) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape(
            "speckle_correlation",
            &[a.rows, a.cols],
            &[b.rows, b.cols],
        ));
    }
    pearson(a.data, b.data)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("correlation of a zero-variance matrix"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiber::config::{default_grid, make_config_grid, ARM_RANGE_MM, ROTATION_RANGE_DEG};

    fn small(mode: IlluminationMode, seed: u64) -> SpeckleEnsemble {
        SpeckleEnsemble::generate(16, 36, default_grid(), mode, DEFAULT_DECORRELATION_SCALE, seed).unwrap()
    }

    #[test]
    fn entries_nonnegative_with_unit_row_max() {
        for mode in [IlluminationMode::Random, IlluminationMode::WavefrontShaped] {
            let e = small(mode, 3);
            for l in 0..e.len() {
                let m = e.matrix(l);
                for i in 0..m.rows {
                    let row = m.row(i);
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert_eq!(row.iter().cloned().fold(0.0, f64::max), 1.0);
                }
            }
        }
    }

    #[test]
    fn self_correlation_is_one() {
        let e = small(IlluminationMode::Random, 1);
        assert_eq!(speckle_correlation(e.matrix(4), e.matrix(4)).unwrap(), 1.0);
    }

    #[test]
    fn negated_matrix_anticorrelates() {
        let e = small(IlluminationMode::Random, 1);
        let neg: Vec<f64> = e.matrix(0).data.iter().map(|v| 3.0 - v).collect();
        let nv = MatrixView::new(16, 36, &neg).unwrap();
        assert!((speckle_correlation(e.matrix(0), nv).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_rejected() {
        let flat = vec![1.0; 4];
        let v = MatrixView::new(2, 2, &flat).unwrap();
        assert!(speckle_correlation(v, v).is_err());
    }

    #[test]
    fn shaped_spots_at_calibration() {
        let e = small(IlluminationMode::WavefrontShaped, 9);
        let m = e.matrix(0);
        for i in 0..m.rows {
            let row = m.row(i);
            assert_eq!(row[i], 1.0);
            let others = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v);
            assert!(others.fold(0.0, f64::max) * 10.0 <= row[i]);
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = small(IlluminationMode::Random, 42);
        let b = small(IlluminationMode::Random, 42);
        assert_eq!(a, b);
        assert_ne!(a, small(IlluminationMode::Random, 43));
    }

    #[test]
    fn file_round_trip_and_corruptions() {
        let e = SpeckleEnsemble::generate(
            4,
            9,
            make_config_grid(3, ARM_RANGE_MM, ROTATION_RANGE_DEG).unwrap(),
            IlluminationMode::WavefrontShaped,
            0.5,
            5,
        )
        .unwrap();
        let mut bytes = Vec::new();
        e.write(&mut bytes).unwrap();
        let back = SpeckleEnsemble::read(&bytes[..]).unwrap();
        assert_eq!(back, e);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(bytes, again);

        let mut bad = bytes.clone();
        bad[1] = b'Q';
        assert!(matches!(SpeckleEnsemble::read(&bad[..]), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            SpeckleEnsemble::read(&bad[..]),
            Err(Error::UnsupportedVersion { .. })
        ));
        assert!(matches!(
            SpeckleEnsemble::read(&bytes[..bytes.len() - 1]),
            Err(Error::UnexpectedEof(_))
        ));
    }

    #[test]
    fn invalid_arguments() {
        assert!(SpeckleEnsemble::generate(0, 4, default_grid(), IlluminationMode::Random, 1.0, 0).is_err());
        assert!(SpeckleEnsemble::generate(4, 4, default_grid(), IlluminationMode::Random, 0.0, 0).is_err());
    }
}
