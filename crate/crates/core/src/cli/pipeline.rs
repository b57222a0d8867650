//! Pipeline stages over one output directory: simulate, synthesize data,
//! train, evaluate, and the manifest that fingerprints everything.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SourceSpec};
use crate::baseline::{cae_classify, train_ae, train_cae, AeModel, CaeModel, CaeSettings};
use crate::dataset::{
    gen_shapes, load_dataset, read_idx, split_by_config, synthesize_measurements, LabelledImageSet, MeasurementDataset,
    MeasurementRecord, SynthesisOptions, SHAPE_CLASSES,
};
use crate::error::{Error, Result};
use crate::eval::{
    average_normalized, emit_report, mean_std, pca_project, psnr, silhouette, AccuracySummary, ConfusionMatrix,
    EvalReport, ProjectionSet, PsnrRow, ReportMetadata,
};
use crate::fiber::SpeckleEnsemble;
use crate::gmvae::{train_gmvae, GmvaeModel};
use crate::tensor::{load_checkpoint, save_checkpoint, Rng};

pub const ENSEMBLE_FILE: &str = "ensemble.spkl";
pub const TRAIN_FILE: &str = "train.msdt";
pub const TEST_SEEN_FILE: &str = "test_seen.msdt";
pub const TEST_UNSEEN_FILE: &str = "test_unseen.msdt";
pub const GMVAE_FILE: &str = "gmvae.blns";
pub const GMVAE_LOG_FILE: &str = "gmvae_log.csv";
pub const AE_FILE: &str = "ae.blns";
pub const AE_LOG_FILE: &str = "ae_log.csv";
pub const CAE_FILE: &str = "cae.blns";
pub const REPORT_DIR: &str = "report";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Wall-clock stage durations; kept out of the manifest because they vary.
pub const TIMINGS_FILE: &str = "timings.json";

/// Artifacts fingerprinted by the manifest, in pipeline order.
const TRACKED: [&str; 9] = [
    ENSEMBLE_FILE,
    TRAIN_FILE,
    TEST_SEEN_FILE,
    TEST_UNSEEN_FILE,
    GMVAE_FILE,
    GMVAE_LOG_FILE,
    AE_FILE,
    AE_LOG_FILE,
    CAE_FILE,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Gmvae,
    Ae,
    Cae,
}

/// Config hash plus SHA-256 of every artifact present.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Paths relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct DemoSummary {
    pub report: EvalReport,
    pub manifest: Manifest,
    /// Seconds per stage, in execution order.
    pub timings: Vec<(String, f64)>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Seed for a named sub-stream of `seed`.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    Rng::stream(seed, stream).next_u64()
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io_context(e, format_args!("cannot write {}", path.display())))
}

/// Keeps the first `per_class` images of each wanted class, relabelled by
/// position in `wanted`. `names[l]` names source label `l`.
fn select_classes(
    set: &LabelledImageSet,
    names: &[String],
    wanted: &[String],
    per_class: usize,
    skip: usize,
) -> Result<LabelledImageSet> {
    let mut taken = vec![0usize; wanted.len()];
    let mut skipped = vec![0usize; wanted.len()];
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in set.labels.iter().enumerate() {
        let Some(name) = names.get(l) else { continue };
        let Some(pos) = wanted.iter().position(|w| w == name) else {
            continue;
        };
        if skipped[pos] < skip {
            skipped[pos] += 1;
        } else if taken[pos] < per_class {
            taken[pos] += 1;
            idx.push(i);
            labels.push(pos);
        }
    }
    if let Some(pos) = taken.iter().position(|&t| t < per_class) {
        return Err(Error::invalid(format!(
            "class `{}` has only {} images after skipping {skip}, need {per_class}",
            wanted[pos], taken[pos]
        )));
    }
    let mut out = set.subset(&idx);
    out.labels = labels;
    out.classes = wanted.len();
    Ok(out)
}

fn concat_sets(a: &LabelledImageSet, b: &LabelledImageSet) -> LabelledImageSet {
    let mut out = a.clone();
    out.pixels.extend_from_slice(&b.pixels);
    out.labels.extend_from_slice(&b.labels);
    out.classes = a.classes.max(b.classes);
    out
}

/// One experiment rooted at an output directory.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingPrerequisite(p.display().to_string()))
        }
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out)
            .map_err(|e| Error::io_context(e, format_args!("cannot create {}", self.out.display())))
    }

    /// Generates the speckle ensemble and writes it.
    pub fn simulate(&self) -> Result<SpeckleEnsemble> {
        self.ensure_out()?;
        let e = &self.config.ensemble;
        let ens = SpeckleEnsemble::generate(
            e.patterns,
            e.side * e.side,
            self.config.grid()?,
            e.mode,
            e.decorrelation_scale,
            e.seed,
        )?;
        ens.save(&self.path(ENSEMBLE_FILE))?;
        log::info!("wrote {} ({} configurations)", ENSEMBLE_FILE, ens.len());
        Ok(ens)
    }

    /// Training images of the trained classes and test images of all
    /// classes, labelled by position in `data.all_classes()`.
    pub fn images(&self) -> Result<(LabelledImageSet, LabelledImageSet)> {
        let d = &self.config.data;
        let side = self.config.ensemble.side;
        let all = d.all_classes();
        let counts = d.per_class_counts;
        match &d.source {
            SourceSpec::Shapes {} => {
                let names: Vec<String> = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
                let n = names.len();
                let train_src = gen_shapes(n * counts.train, n, side, derive_seed(d.seed, 10))?;
                let test_src = gen_shapes(n * counts.test, n, side, derive_seed(d.seed, 11))?;
                let mut train = select_classes(&train_src, &names, &d.classes, counts.train, 0)?;
                train.classes = all.len();
                let test = select_classes(&test_src, &names, &all, counts.test, 0)?;
                Ok((train, test))
            }
            SourceSpec::Idx {
                images,
                labels,
                test_images,
                test_labels,
                label_names,
            } => {
                for p in [Some(images), Some(labels), test_images.as_ref(), test_labels.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    if !p.is_file() {
                        return Err(Error::MissingPrerequisite(p.display().to_string()));
                    }
                }
                let src = read_idx(images, labels, side)?;
                let test_src = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(read_idx(i, l, side)?),
                    _ => None,
                };
                let names = label_names
                    .clone()
                    .unwrap_or_else(|| (0..src.classes).map(|i| i.to_string()).collect());
                let mut train = select_classes(&src, &names, &d.classes, counts.train, 0)?;
                train.classes = all.len();
                // Without a separate test pair, trained classes skip the
                // images used for training.
                let mut test_parts = Vec::new();
                for (pos, c) in all.iter().enumerate() {
                    let skip = if pos < d.classes.len() && test_src.is_none() {
                        counts.train
                    } else {
                        0
                    };
                    let from = test_src.as_ref().unwrap_or(&src);
                    let mut part = select_classes(from, &names, std::slice::from_ref(c), counts.test, skip)?;
                    part.labels.iter_mut().for_each(|l| *l = pos);
                    part.classes = all.len();
                    test_parts.push(part);
                }
                let mut test = test_parts.remove(0);
                for p in &test_parts {
                    test = concat_sets(&test, p);
                }
                Ok((train, test))
            }
        }
    }

    /// Synthesizes the training and test datasets from the written ensemble.
    ///
    /// Training images are measured through the training configurations
    /// only; test images through every configuration.
    pub fn synth_data(&self) -> Result<(MeasurementDataset, MeasurementDataset, MeasurementDataset)> {
        let ens = SpeckleEnsemble::load(&self.require(ENSEMBLE_FILE)?)?;
        let d = &self.config.data;
        let (train_imgs, test_imgs) = self.images()?;
        let images = concat_sets(&train_imgs, &test_imgs);
        let held_out: HashSet<usize> = (train_imgs.len()..images.len()).collect();
        let ids: Vec<String> = d.train_configs.iter().chain(&d.unseen_configs).cloned().collect();
        let opts = SynthesisOptions {
            noise_std: d.noise_std,
            damping: d.s,
            noise_seed: derive_seed(d.seed, 12),
            embed_images: true,
            channels: d.channels,
        };
        let (all, degenerate) = synthesize_measurements(&images, &ens, &ids, &d.all_classes(), &opts)?;
        if degenerate > 0 {
            log::warn!("{degenerate} measurements had a zero-range channel");
        }
        let (train, seen, mut unseen) = split_by_config(&all, &d.train_configs, &d.unseen_configs, &held_out)?;
        unseen.records.retain(|r| held_out.contains(&r.image_index));
        train.save(&self.path(TRAIN_FILE))?;
        seen.save(&self.path(TEST_SEEN_FILE))?;
        unseen.save(&self.path(TEST_UNSEEN_FILE))?;
        log::info!(
            "wrote {} train, {} seen-test and {} unseen-test records",
            train.len(),
            seen.len(),
            unseen.len()
        );
        Ok((train, seen, unseen))
    }

    fn load_split(&self, name: &str) -> Result<MeasurementDataset> {
        let path = self.require(name)?;
        let ens = match self.path(ENSEMBLE_FILE) {
            p if p.is_file() => Some(SpeckleEnsemble::load(&p)?),
            _ => None,
        };
        let (ds, warnings) = load_dataset(&path, ens.as_ref())?;
        for w in warnings {
            log::warn!("{name}: {w}");
        }
        Ok(ds)
    }

    fn cae_settings(&self) -> CaeSettings {
        let c = &self.config;
        CaeSettings {
            conv_channels: c.gmvae.conv_channels.clone(),
            hidden: c.gmvae.classifier_hidden,
            epochs: c.ae.cae_epochs,
            lr: c.ae.lr,
            batch: c.ae.batch,
            seed: c.ae.seed,
        }
    }

    pub fn load_gmvae(&self) -> Result<GmvaeModel> {
        let named = load_checkpoint(&self.require(GMVAE_FILE)?)?;
        GmvaeModel::from_named(
            self.config.gmvae.clone(),
            self.config.ensemble.side,
            self.config.k(),
            &named,
        )
    }

    pub fn load_ae(&self) -> Result<AeModel> {
        let named = load_checkpoint(&self.require(AE_FILE)?)?;
        AeModel::from_named(self.config.ae.clone(), self.config.ensemble.side, &named)
    }

    pub fn load_cae(&self) -> Result<CaeModel> {
        let named = load_checkpoint(&self.require(CAE_FILE)?)?;
        let s = self.cae_settings();
        CaeModel::from_named(
            self.config.ensemble.side,
            self.config.k(),
            &s.conv_channels,
            s.hidden,
            &named,
        )
    }

    /// Trains one model from `train.msdt` and writes its checkpoint (and
    /// log, where the model has one).
    pub fn train(&self, kind: ModelKind) -> Result<()> {
        let k = self.config.k();
        match kind {
            ModelKind::Gmvae => {
                let train = self.load_split(TRAIN_FILE)?;
                let (model, log) = train_gmvae(&train, k, &self.config.gmvae)?;
                if log.degenerate_triplet_batches > 0 {
                    log::warn!(
                        "{} single-class batches had no triplets",
                        log.degenerate_triplet_batches
                    );
                }
                save_checkpoint(&model.store, &self.path(GMVAE_FILE))?;
                write_file(&self.path(GMVAE_LOG_FILE), &log.to_csv())?;
                if let Some(last) = log.epochs.last() {
                    log::info!(
                        "gmvae: final loss {:.4}, train accuracy {:.3}",
                        last.loss,
                        last.train_acc
                    );
                }
            }
            ModelKind::Ae => {
                let train = self.load_split(TRAIN_FILE)?;
                let (model, log) = train_ae(&train, k, &self.config.ae)?;
                save_checkpoint(&model.store, &self.path(AE_FILE))?;
                write_file(&self.path(AE_LOG_FILE), &log.to_csv())?;
                if let Some(last) = log.epochs.last() {
                    log::info!("ae: final mse {last:.5}");
                }
            }
            ModelKind::Cae => {
                let ae = self.load_ae()?;
                let train = self.load_split(TRAIN_FILE)?;
                let cae = train_cae(Some(&ae), &train, k, &self.cae_settings())?;
                save_checkpoint(&cae.store, &self.path(CAE_FILE))?;
                log::info!("wrote {CAE_FILE}");
            }
        }
        Ok(())
    }

    /// Scores the trained models on both test splits and writes the report.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let cfg = &self.config;
        let k = cfg.k();
        let seen = self.load_split(TEST_SEEN_FILE)?;
        let unseen = self.load_split(TEST_UNSEEN_FILE)?;
        let gmvae = self.load_gmvae()?;
        let ae = self.load_ae()?;
        let cae = self.load_cae()?;

        let mut report = EvalReport {
            metadata: ReportMetadata {
                experiment: cfg.experiment(),
                seeds: BTreeMap::from([
                    ("ensemble".to_string(), cfg.ensemble.seed),
                    ("data".to_string(), cfg.data.seed),
                    ("gmvae".to_string(), cfg.gmvae.seed),
                    ("ae".to_string(), cfg.ae.seed),
                ]),
                train_configs: cfg.data.train_configs.clone(),
                unseen_configs: cfg.data.unseen_configs.clone(),
                classes: cfg.data.all_classes(),
                ensemble_hash: seen.ensemble_hash.clone(),
                model_hashes: [GMVAE_FILE, AE_FILE, CAE_FILE]
                    .iter()
                    .map(|f| Ok((f.to_string(), sha256_file(&self.path(f))?)))
                    .collect::<Result<_>>()?,
            },
            ..EvalReport::default()
        };

        let mut acc: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut unseen_confusions: BTreeMap<&str, Vec<ConfusionMatrix>> = BTreeMap::new();
        let groups = cfg
            .data
            .train_configs
            .iter()
            .map(|c| (c, "seen", &seen))
            .chain(cfg.data.unseen_configs.iter().map(|c| (c, "unseen", &unseen)));
        for (config, group, ds) in groups {
            let records: Vec<&MeasurementRecord> = ds.records.iter().filter(|r| &r.config_id == config).collect();
            if records.is_empty() {
                return Err(Error::invalid(format!("no test records for configuration `{config}`")));
            }
            let inf = gmvae.infer_records(&records)?;
            let ae_recon = ae.reconstruct_records(&records)?;
            for (method, recon) in [("gmvae", &inf.reconstructions), ("ae", &ae_recon)] {
                report.psnr.push(psnr_row(config, method, group, &records, recon, k)?);
            }

            let trained: Vec<usize> = (0..records.len()).filter(|&i| records[i].label < k).collect();
            let labels: Vec<usize> = trained.iter().map(|&i| records[i].label).collect();
            let trained_records: Vec<&MeasurementRecord> = trained.iter().map(|&i| records[i]).collect();
            let predictions = [
                ("gmvae", trained.iter().map(|&i| inf.predicted[i]).collect::<Vec<_>>()),
                ("cae", cae_classify(&ae, &cae, &trained_records)?),
            ];
            for (method, pred) in predictions {
                let m = ConfusionMatrix::new(&pred, &labels, k)?;
                let a = m.accuracy();
                report
                    .accuracy
                    .entry(method.to_string())
                    .or_insert_with(|| AccuracySummary {
                        per_config: BTreeMap::new(),
                        seen: None,
                        unseen: None,
                    })
                    .per_config
                    .insert(config.clone(), a);
                let slot = acc.entry(method).or_default();
                if group == "seen" {
                    slot.0.push(a);
                } else {
                    slot.1.push(a);
                    unseen_confusions.entry(method).or_default().push(m);
                }
            }
        }
        for (method, (s, u)) in acc {
            let summary = report.accuracy.get_mut(method).expect("inserted above");
            summary.seen = mean_std(&s).ok();
            summary.unseen = mean_std(&u).ok();
        }
        for (method, ms) in unseen_confusions {
            report.confusion.insert(method.to_string(), average_normalized(&ms)?);
        }

        let pca_ids = cfg.pca_configs();
        let pooled: Vec<&MeasurementRecord> = seen
            .records
            .iter()
            .chain(&unseen.records)
            .filter(|r| r.label < k && pca_ids.contains(&r.config_id))
            .collect();
        let inf = gmvae.infer_records(&pooled)?;
        let labels: Vec<usize> = pooled.iter().map(|r| r.label).collect();
        let configs: Vec<String> = pooled.iter().map(|r| r.config_id.clone()).collect();
        let raw: Vec<Vec<f64>> = pooled.iter().map(|r| r.y.clone()).collect();
        for (which, vectors) in [("raw", &raw), ("latent", &inf.latent_means)] {
            let p = pca_project(vectors, 3)?;
            report.pca.insert(
                which.to_string(),
                ProjectionSet {
                    points: p.projected.iter().map(|v| [v[0], v[1], v[2]]).collect(),
                    labels: labels.clone(),
                    configs: configs.clone(),
                    explained: p.explained,
                },
            );
            report
                .silhouette
                .insert(which.to_string(), silhouette(vectors, &labels)?);
        }

        emit_report(&report, &self.path(REPORT_DIR))?;
        log::info!("wrote report to {}", self.path(REPORT_DIR).display());
        Ok(report)
    }

    /// Hashes the config and every artifact present, and writes the manifest.
    pub fn write_manifest(&self) -> Result<Manifest> {
        self.ensure_out()?;
        let mut artifacts = BTreeMap::new();
        for name in TRACKED {
            let p = self.path(name);
            if p.is_file() {
                artifacts.insert(name.to_string(), sha256_file(&p)?);
            }
        }
        let report_dir = self.path(REPORT_DIR);
        if report_dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&report_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for p in files {
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                artifacts.insert(format!("{REPORT_DIR}/{name}"), sha256_file(&p)?);
            }
        }
        let manifest = Manifest {
            config_hash: self.config.hash()?,
            artifacts,
        };
        write_file(
            &self.path(MANIFEST_FILE),
            &(serde_json::to_string_pretty(&manifest)? + "\n"),
        )?;
        Ok(manifest)
    }

    /// Every stage in order, then the manifest and the stage timings.
    pub fn run_demo(&self) -> Result<DemoSummary> {
        let mut timings = Vec::new();
        let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
            let t = Instant::now();
            f()?;
            timings.push((name.to_string(), t.elapsed().as_secs_f64()));
            Ok(())
        };
        timed("simulate", &mut || self.simulate().map(drop))?;
        timed("synth_data", &mut || self.synth_data().map(drop))?;
        timed("train_gmvae", &mut || self.train(ModelKind::Gmvae))?;
        timed("train_ae", &mut || self.train(ModelKind::Ae))?;
        timed("train_cae", &mut || self.train(ModelKind::Cae))?;
        let mut report = None;
        timed("eval", &mut || {
            report = Some(self.evaluate()?);
            Ok(())
        })?;
        let manifest = self.write_manifest()?;
        let total: f64 = timings.iter().map(|(_, s)| s).sum();
        let mut json: BTreeMap<String, f64> = timings.iter().cloned().collect();
        json.insert("total".into(), total);
        write_file(&self.path(TIMINGS_FILE), &(serde_json::to_string_pretty(&json)? + "\n"))?;
        Ok(DemoSummary {
            report: report.expect("eval stage ran"),
            manifest,
            timings,
        })
    }
}

fn psnr_row(
    config: &str,
    method: &str,
    group: &str,
    records: &[&MeasurementRecord],
    recon: &[Vec<f64>],
    k: usize,
) -> Result<PsnrRow> {
    let mut all = Vec::with_capacity(records.len());
    let (mut trained, mut new) = (Vec::new(), Vec::new());
    for (r, x_hat) in records.iter().zip(recon) {
        let x = r
            .image
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record of `{config}` has no embedded image")))?;
        let v = psnr(x, x_hat, 1.0)?;
        all.push(v);
        if r.label < k {
            trained.push(v);
        } else {
            new.push(v);
        }
    }
    let s = mean_std(&all)?;
    Ok(PsnrRow {
        config: config.to_string(),
        method: method.to_string(),
        group: group.to_string(),
        mean: s.mean,
        std: s.std,
        mean_trained_classes: mean_std(&trained).ok().map(|m| m.mean),
        mean_new_classes: mean_std(&new).ok().map(|m| m.mean),
    })
}
