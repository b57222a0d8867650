//! Numerical measurements of labelled images through simulated fibers.
//!
//! `MSDT` layout (little-endian): magic `MSDT`, version `u32`, split tag
//! `u8`, ensemble seed `u64`, ensemble SHA-256 (32 bytes), class count `u32`
//! and that many length-prefixed class names, record count `u64`, then per
//! record: configuration id (length-prefixed), label `u8`, image index
//! `u32`, noise seed `u64`, measurement length `u32` and `f64` payload, and
//! an image flag `u8` followed, when set, by the image length `u32` and its
//! `f64` payload.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::images::LabelledImageSet;
use crate::binio::{len_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::fiber::{add_noise, apply_normalization, project_batch, Backgrounds, ChannelSelection, SpeckleEnsemble};
use crate::tensor::Rng;

pub const DATASET_MAGIC: &[u8; 4] = b"MSDT";
pub const DATASET_VERSION: u32 = 1;

/// Images projected per batch during synthesis.
const SYNTH_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    /// Two concatenated normalized channels, length `2M`.
    pub y: Vec<f64>,
    pub image: Option<Vec<f64>>,
    pub label: usize,
    pub config_id: String,
    /// Index of the source image in the synthesized image set.
    pub image_index: usize,
    pub noise_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Unsplit,
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Unsplit => 0,
            Split::Train => 1,
            Split::TestSeen => 2,
            Split::TestUnseen => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Split::Unsplit,
            1 => Split::Train,
            2 => Split::TestSeen,
            3 => Split::TestUnseen,
            _ => return Err(Error::Malformed(format!("unknown split tag {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementDataset {
    pub records: Vec<MeasurementRecord>,
    pub split: Split,
    pub ensemble_seed: u64,
    /// Hex SHA-256 of the ensemble the records were synthesized with.
    pub ensemble_hash: String,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SynthesisOptions {
    pub noise_std: f64,
    /// Collection-fiber damping factor `s`.
    pub damping: f64,
    pub noise_seed: u64,
    pub embed_images: bool,
    /// Channels kept; a dropped channel is zeroed so the layout stays `2M`.
    pub channels: ChannelSelection,
}

/// Per-record noise seed from the run seed and the record's coordinates.
fn record_seed(seed: u64, config: usize, image: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ ((config as u64) << 40) ^ image as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Projects every image through every listed configuration, normalizes,
/// and adds noise. Records are ordered configuration-major.
///
/// Only one chunk of projections is materialized at a time.
pub fn synthesize_measurements(
    images: &LabelledImageSet,
    ensemble: &SpeckleEnsemble,
    config_ids: &[String],
    classes: &[String],
    opts: &SynthesisOptions,
) -> Result<(MeasurementDataset, usize)> {
    let n = images.pixel_count();
    if ensemble.pixels != n {
        return Err(Error::shape("synthesize_measurements", &[ensemble.pixels], &[n]));
    }
    let mut records = Vec::with_capacity(images.len() * config_ids.len());
    let mut degenerate = 0;
    for id in config_ids {
        let l = ensemble
            .index_of(id)
            .ok_or_else(|| Error::invalid(format!("configuration `{id}` not in ensemble")))?;
        let a = ensemble.matrix(l);
        let bg = Backgrounds::simulate(a);
        let m = a.rows;
        for start in (0..images.len()).step_by(SYNTH_CHUNK) {
            let end = (start + SYNTH_CHUNK).min(images.len());
            let chunk = &images.pixels[start * n..end * n];
            let ax = project_batch(a, chunk, end - start)?;
            let out: Vec<Result<(MeasurementRecord, bool)>> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let row = &ax[(i - start) * m..(i - start + 1) * m];
                    let mut norm = apply_normalization(row, opts.damping, &bg.white, &bg.black)?;
                    let noise_seed = record_seed(opts.noise_seed, l, i);
                    add_noise(&mut norm.y, opts.noise_std, &mut Rng::new(noise_seed));
                    match opts.channels {
                        ChannelSelection::Both => {}
                        ChannelSelection::First => norm.y[m..].fill(0.0),
                        ChannelSelection::Second => norm.y[..m].fill(0.0),
                    }
                    Ok((
                        MeasurementRecord {
                            y: norm.y,
                            image: opts.embed_images.then(|| images.image(i).to_vec()),
                            label: images.labels[i],
                            config_id: id.clone(),
                            image_index: i,
                            noise_seed,
                        },
                        norm.degenerate,
                    ))
                })
                .collect();
            for r in out {
                let (rec, deg) = r?;
                degenerate += usize::from(deg);
                records.push(rec);
            }
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} measurements had a zero-range channel");
    }
    Ok((
        MeasurementDataset {
            records,
            split: Split::Unsplit,
            ensemble_seed: ensemble.seed,
            ensemble_hash: ensemble.content_hash(),
            classes: classes.to_vec(),
        },
        degenerate,
    ))
}

/// Routes records by configuration: unseen configurations go to
/// `test_unseen`; training configurations go to `test_seen` when their
/// image is in `held_out` and to `train` otherwise.
pub fn split_by_config(
    dataset: &MeasurementDataset,
    train_ids: &[String],
    unseen_ids: &[String],
    held_out: &HashSet<usize>,
) -> Result<(MeasurementDataset, MeasurementDataset, MeasurementDataset)> {
    let train_set: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    let unseen_set: HashSet<&str> = unseen_ids.iter().map(String::as_str).collect();
    if let Some(id) = train_set.intersection(&unseen_set).next() {
        return Err(Error::invalid(format!("configuration `{id}` is both train and unseen")));
    }
    let empty = |split| MeasurementDataset {
        records: Vec::new(),
        split,
        ensemble_seed: dataset.ensemble_seed,
        ensemble_hash: dataset.ensemble_hash.clone(),
        classes: dataset.classes.clone(),
    };
    let (mut train, mut seen, mut unseen) = (empty(Split::Train), empty(Split::TestSeen), empty(Split::TestUnseen));
    for r in &dataset.records {
        let target = if unseen_set.contains(r.config_id.as_str()) {
            &mut unseen
        } else if train_set.contains(r.config_id.as_str()) {
            if held_out.contains(&r.image_index) {
                &mut seen
            } else {
                &mut train
            }
        } else {
            return Err(Error::invalid(format!(
                "record configuration `{}` is in neither the train nor the unseen set",
                r.config_id
            )));
        };
        target.records.push(r.clone());
    }
    Ok((train, seen, unseen))
}

impl MeasurementDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn config_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.config_id.clone()))
            .map(|r| r.config_id.clone())
            .collect()
    }

    pub fn filter_config(&self, id: &str) -> Self {
        Self {
            records: self.records.iter().filter(|r| r.config_id == id).cloned().collect(),
            ..self.header_clone()
        }
    }

    fn header_clone(&self) -> Self {
        Self {
            records: Vec::new(),
            split: self.split,
            ensemble_seed: self.ensemble_seed,
            ensemble_hash: self.ensemble_hash.clone(),
            classes: self.classes.clone(),
        }
    }

    /// Concatenates record lists; headers must agree on the ensemble.
    pub fn merge(mut self, other: MeasurementDataset) -> Result<Self> {
        if self.ensemble_hash != other.ensemble_hash {
            return Err(Error::invalid("cannot merge datasets from different ensembles"));
        }
        self.records.extend(other.records);
        Ok(self)
    }

    /// Warning text when this dataset was not synthesized with `ensemble`.
    pub fn ensemble_mismatch(&self, ensemble: &SpeckleEnsemble) -> Option<String> {
        let hash = ensemble.content_hash();
        (hash != self.ensemble_hash).then(|| {
            format!(
                "dataset references ensemble {} but {} was provided",
                &self.ensemble_hash[..12.min(self.ensemble_hash.len())],
                &hash[..12]
            )
        })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(DATASET_MAGIC)?;
        w.u32(DATASET_VERSION)?;
        w.u8(self.split.code())?;
        w.u64(self.ensemble_seed)?;
        let hash = hex::decode(&self.ensemble_hash)
            .ok()
            .filter(|h| h.len() == 32)
            .ok_or_else(|| Error::invalid("ensemble hash must be 64 hex digits"))?;
        w.bytes(&hash)?;
        w.u32(len_u32(self.classes.len())?)?;
        for c in &self.classes {
            w.string(c)?;
        }
        w.u64(self.records.len() as u64)?;
        for r in &self.records {
            w.string(&r.config_id)?;
            let label = u8::try_from(r.label).map_err(|_| Error::invalid("label exceeds u8"))?;
            w.u8(label)?;
            w.u32(len_u32(r.image_index)?)?;
            w.u64(r.noise_seed)?;
            w.u32(len_u32(r.y.len())?)?;
            w.f64s(&r.y)?;
            match &r.image {
                Some(img) => {
                    w.u8(1)?;
                    w.u32(len_u32(img.len())?)?;
                    w.f64s(img)?;
                }
                None => w.u8(0)?,
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(BufReader::new(input), "measurement dataset");
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let split = Split::from_code(r.u8()?)?;
        let ensemble_seed = r.u64()?;
        let ensemble_hash = hex::encode(r.bytes(32)?);
        let nclasses = r.u32()? as usize;
        let classes = (0..nclasses).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let count = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let config_id = r.string()?;
            let label = usize::from(r.u8()?);
            let image_index = r.u32()? as usize;
            let noise_seed = r.u64()?;
            let ylen = r.u32()? as usize;
            let y = r.f64s(ylen)?;
            let image = match r.u8()? {
                0 => None,
                1 => {
                    let n = r.u32()? as usize;
                    Some(r.f64s(n)?)
                }
                f => return Err(Error::Malformed(format!("bad image flag {f}"))),
            };
            records.push(MeasurementRecord {
                y,
                image,
                label,
                config_id,
                image_index,
                noise_seed,
            });
        }
        if !r.at_eof()? {
            return Err(Error::Malformed("trailing bytes after dataset".into()));
        }
        Ok(Self {
            records,
            split,
            ensemble_seed,
            ensemble_hash,
            classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

/// Loads a dataset and, when an ensemble is supplied, reports a hash
/// mismatch as a warning rather than an error.
pub fn load_dataset(path: &Path, ensemble: Option<&SpeckleEnsemble>) -> Result<(MeasurementDataset, Vec<String>)> {
    let ds = MeasurementDataset::load(path)?;
    let warnings: Vec<String> = ensemble.and_then(|e| ds.ensemble_mismatch(e)).into_iter().collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((ds, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::images::gen_shapes;
    use crate::fiber::{default_grid, IlluminationMode, DEFAULT_DECORRELATION_SCALE};

    fn ensemble() -> SpeckleEnsemble {
        SpeckleEnsemble::generate(
            64,
            64,
            default_grid(),
            IlluminationMode::Random,
            DEFAULT_DECORRELATION_SCALE,
            1,
        )
        .unwrap()
    }

    fn opts(noise: f64) -> SynthesisOptions {
        SynthesisOptions {
            noise_std: noise,
            damping: 10.0,
            noise_seed: 5,
            embed_images: true,
            channels: ChannelSelection::Both,
        }
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cardinality() {
        let imgs = gen_shapes(2, 2, 8, 0).unwrap();
        let (ds, _) =
            synthesize_measurements(&imgs, &ensemble(), &ids(&["C_10", "C_5", "C_0"]), &[], &opts(0.015)).unwrap();
        assert_eq!(ds.len(), 6);
        assert!(ds.records.iter().all(|r| r.y.len() == 128));
    }

    #[test]
    fn noiseless_synthesis_is_repeatable() {
        let imgs = gen_shapes(4, 2, 8, 0).unwrap();
        let e = ensemble();
        let a = synthesize_measurements(&imgs, &e, &ids(&["C_7"]), &[], &opts(0.0)).unwrap();
        let b = synthesize_measurements(&imgs, &e, &ids(&["C_7"]), &[], &opts(0.0)).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn mismatched_pixels_rejected() {
        let imgs = gen_shapes(2, 2, 16, 0).unwrap();
        assert!(synthesize_measurements(&imgs, &ensemble(), &ids(&["C_7"]), &[], &opts(0.0)).is_err());
    }

    #[test]
    fn full_protocol_split() {
        let imgs = gen_shapes(4, 2, 8, 0).unwrap();
        let all: Vec<String> = default_grid().into_iter().map(|c| c.id).collect();
        let (ds, _) = synthesize_measurements(&imgs, &ensemble(), &all, &[], &opts(0.0)).unwrap();
        let train = ids(&["C_10", "C_7", "C_5", "C_3", "C_1"]);
        let unseen = ids(&["C_9", "C_8", "C_6", "C_4", "C_2", "C_0"]);
        let held: HashSet<usize> = [3].into();
        let (tr, se, un) = split_by_config(&ds, &train, &unseen, &held).unwrap();
        assert_eq!(tr.len() + se.len() + un.len(), ds.len());
        assert_eq!(tr.len(), 5 * 3);
        assert_eq!(se.len(), 5);
        assert_eq!(un.len(), 6 * 4);
        let tr_ids: HashSet<String> = tr.config_ids().into_iter().collect();
        assert!(un.config_ids().iter().all(|id| !tr_ids.contains(id)));
    }

    #[test]
    fn empty_unseen_and_overlap() {
        let imgs = gen_shapes(2, 2, 8, 0).unwrap();
        let (ds, _) = synthesize_measurements(&imgs, &ensemble(), &ids(&["C_10"]), &[], &opts(0.0)).unwrap();
        let (_, _, un) = split_by_config(&ds, &ids(&["C_10"]), &[], &HashSet::new()).unwrap();
        assert!(un.is_empty());
        assert!(split_by_config(&ds, &ids(&["C_10"]), &ids(&["C_10"]), &HashSet::new()).is_err());
    }

    #[test]
    fn file_round_trip_and_corruptions() {
        let imgs = gen_shapes(3, 3, 8, 0).unwrap();
        let (mut ds, _) =
            synthesize_measurements(&imgs, &ensemble(), &ids(&["C_4"]), &ids(&["a", "b", "c"]), &opts(0.015)).unwrap();
        ds.records[1].image = None;
        let mut bytes = Vec::new();
        ds.write(&mut bytes).unwrap();
        assert_eq!(MeasurementDataset::read(&bytes[..]).unwrap(), ds);

        let err = MeasurementDataset::read(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("unexpected EOF"), "{err}");
        let mut bad = bytes.clone();
        bad[4] = 7;
        let err = MeasurementDataset::read(&bad[..]).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
        let mut bad = bytes;
        bad[0] = b'N';
        assert!(matches!(
            MeasurementDataset::read(&bad[..]),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn hash_mismatch_is_a_warning() {
        let imgs = gen_shapes(2, 2, 8, 0).unwrap();
        let (ds, _) = synthesize_measurements(&imgs, &ensemble(), &ids(&["C_4"]), &[], &opts(0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.msdt");
        ds.save(&path).unwrap();
        let other = SpeckleEnsemble::generate(64, 64, default_grid(), IlluminationMode::Random, 0.5, 2).unwrap();
        let (loaded, warnings) = load_dataset(&path, Some(&other)).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(warnings.len(), 1);
        let (_, warnings) = load_dataset(&path, Some(&ensemble())).unwrap();
        assert!(warnings.is_empty());
    }
}
