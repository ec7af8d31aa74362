//! The subcommands, callable as library functions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxmim::architecture::{build_classifier, build_mae, Classifier, ClassifierMode, EncoderSource, MaskedAutoencoder};
use voxmim::metrics::{bootstrap, compare_methods, BootstrapReport, ComparisonReport, MetricReport, PredictionSet};
use voxmim::rng::{derive_seed, seeded};
use voxmim::synthdata::generate_dataset;
use voxmim::trainer::checkpoint::checkpoint_paths;
use voxmim::trainer::{
    load_classifier, load_mae, pretrain_volumes, predict_volumes, sample_label_fraction, save_classifier, save_mae,
    split_labeled, train_downstream_volumes, AnyManifest, LabeledManifest, LabeledRecord, TrainConfig, TrainingMetadata,
    UnlabeledManifest, UnlabeledRecord,
};
use voxmim::volume::{load_volume, preprocess as preprocess_volume, save_volume, Volume};

use crate::config::{check_fraction, RunConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::provenance;

/// Seeds handed out during one command, recorded in `run.json`.
#[derive(Default)]
pub(crate) struct Seeds {
    master: u64,
    pub(crate) used: BTreeMap<String, u64>,
}

impl Seeds {
    pub(crate) fn new(master: u64) -> Self {
        Self {
            master,
            used: BTreeMap::new(),
        }
    }

    pub(crate) fn get(&mut self, tag: &str) -> u64 {
        let s = derive_seed(self.master, tag);
        self.used.insert(tag.to_string(), s);
        s
    }
}

pub(crate) fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes through a temporary sibling so an interrupted run leaves no
/// half-written file behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = voxmim::json::to_sorted_string(value).map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn fraction_tag(f: f64) -> String {
    format!("{f:.2}")
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub unlabeled: PathBuf,
    pub labeled: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

pub const TRAIN_MANIFEST: &str = "train.csv";
pub const TEST_MANIFEST: &str = "test.csv";

/// Generates phantoms and manifests, then splits the labeled pool into
/// stratified train and test manifests.
pub fn synth(config: &RunConfig, out_dir: &Path) -> CliResult<SynthOutput> {
    let mut seeds = Seeds::new(config.seed);
    let s = &config.synth;
    let data = generate_dataset(&s.phantom, s.n_unlabeled, s.n_labeled, s.phantom.balance, seeds.get("synth"), out_dir)?;
    let (train, test) = split_labeled(
        &data.labeled,
        config.evaluation.train_fraction,
        &mut seeded(seeds.get("split")),
    )?;
    let train_path = out_dir.join(TRAIN_MANIFEST);
    let test_path = out_dir.join(TEST_MANIFEST);
    train.write(&train_path)?;
    test.write(&test_path)?;
    provenance::record(out_dir, "synth", config, seeds.used)?;
    Ok(SynthOutput {
        unlabeled: data.unlabeled_path,
        labeled: data.labeled_path,
        train: train_path,
        test: test_path,
    })
}

// ----------------------------------------------------------- preprocess

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub manifest: PathBuf,
    pub processed: usize,
    pub skipped: usize,
}

/// Preprocesses every volume of a manifest into `out_dir/volumes` and writes
/// a manifest of the same name and kind pointing at the outputs. Ids whose
/// output already exists are skipped unless `force`.
pub fn preprocess(config: &RunConfig, manifest: &Path, out_dir: &Path, force: bool) -> CliResult<PreprocessOutput> {
    let input = AnyManifest::read(manifest)?;
    let vol_dir = out_dir.join("volumes");
    mkdir(&vol_dir)?;
    let (mut processed, mut skipped) = (0, 0);
    let mut outputs = Vec::with_capacity(input.len());
    for (id, path) in input.entries() {
        let rel = PathBuf::from("volumes").join(format!("{id}.json"));
        let target = out_dir.join(&rel);
        if force || !(target.exists() && target.with_extension("raw").exists()) {
            let v = load_volume(&path)?;
            save_volume(&preprocess_volume(&v, &config.preprocess)?, &target)?;
            processed += 1;
        } else {
            skipped += 1;
        }
        outputs.push(rel);
    }
    let name = manifest.file_name().ok_or_else(|| CliError::Usage("manifest path has no file name".into()))?;
    let out_manifest = out_dir.join(name);
    match input {
        AnyManifest::Unlabeled(m) => UnlabeledManifest {
            records: m
                .records
                .iter()
                .zip(outputs)
                .map(|(r, volume)| UnlabeledRecord { id: r.id.clone(), volume })
                .collect(),
            base_dir: out_dir.to_path_buf(),
        }
        .write(&out_manifest)?,
        AnyManifest::Labeled(m) => LabeledManifest {
            records: m
                .records
                .iter()
                .zip(outputs)
                .map(|(r, volume)| LabeledRecord {
                    id: r.id.clone(),
                    volume,
                    label: r.label,
                })
                .collect(),
            base_dir: out_dir.to_path_buf(),
        }
        .write(&out_manifest)?,
    }
    provenance::record(out_dir, "preprocess", config, BTreeMap::new())?;
    log::info!("preprocessed {processed} volumes, skipped {skipped}");
    Ok(PreprocessOutput {
        manifest: out_manifest,
        processed,
        skipped,
    })
}

// -------------------------------------------------------------- pretrain

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub history: Vec<f64>,
}

fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    let (json, _) = checkpoint_paths(checkpoint);
    let s = json.to_string_lossy();
    PathBuf::from(format!("{}.loss.csv", s.trim_end_matches(".ckpt.json")))
}

fn write_loss_csv(path: &Path, history: &[f64]) -> CliResult<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    write_atomic(path, text.as_bytes())
}

/// Builds and pre-trains one autoencoder on in-memory volumes.
pub(crate) fn pretrain_replicate(
    config: &RunConfig,
    volumes: &[Volume],
    replicate: u64,
    seeds: &mut Seeds,
) -> CliResult<(MaskedAutoencoder<f32>, TrainingMetadata)> {
    let mut mae = build_mae::<f32, _>(&config.model, &mut seeded(seeds.get(&format!("mae-init/{replicate}"))))?;
    let train = TrainConfig {
        seed: seeds.get(&format!("pretrain/{replicate}")),
        ..config.pretrain.clone()
    };
    let history = pretrain_volumes(&mut mae, volumes, &config.mask.policy(), &train)?;
    let meta = TrainingMetadata {
        epoch: history.len(),
        loss_history: history,
        seed: train.seed,
        label_fraction: None,
    };
    Ok((mae, meta))
}

/// Pre-trains the autoencoder on an unlabeled manifest and writes the
/// checkpoint plus a per-epoch loss CSV next to it.
pub fn pretrain(config: &RunConfig, manifest: &Path, checkpoint: &Path) -> CliResult<PretrainOutput> {
    let unlabeled = UnlabeledManifest::read(manifest)?;
    if unlabeled.is_empty() {
        return Err(CliError::Data(format!("{} lists no volumes", manifest.display())));
    }
    let volumes = unlabeled.load_volumes()?;
    let mut seeds = Seeds::new(config.seed);
    let (mae, meta) = pretrain_replicate(config, &volumes, 0, &mut seeds)?;
    save_mae(&mae, &meta, checkpoint)?;
    let loss_csv = loss_csv_path(checkpoint);
    write_loss_csv(&loss_csv, &meta.loss_history)?;
    provenance::record(checkpoint.parent().unwrap_or(Path::new(".")), "pretrain", config, seeds.used)?;
    Ok(PretrainOutput {
        checkpoint: checkpoint_paths(checkpoint).0,
        loss_csv,
        history: meta.loss_history,
    })
}

// ----------------------------------------------------------------- train

/// Downstream protocol selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Pretrained encoder frozen, linear head trained.
    Probe,
    /// Pretrained encoder and head trained together.
    Finetune,
    /// Randomly initialised encoder, frozen unless unfrozen.
    Random,
    /// Encoder from an external checkpoint, frozen unless unfrozen.
    External,
}

impl TrainMode {
    pub fn classifier_mode(self) -> ClassifierMode {
        match self {
            TrainMode::Probe => ClassifierMode::LinearProbe,
            TrainMode::Finetune => ClassifierMode::FineTune,
            TrainMode::Random => ClassifierMode::RandomInit,
            TrainMode::External => ClassifierMode::ExternalWeights,
        }
    }
}

/// Options of the `train` subcommand.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub mode: TrainMode,
    pub fraction: f64,
    /// Autoencoder checkpoint for probe/finetune, any checkpoint for external.
    pub encoder_checkpoint: Option<PathBuf>,
    /// Train the encoder of a random or external classifier too.
    pub unfreeze: bool,
}

fn build_for_mode(
    config: &RunConfig,
    mode: TrainMode,
    mae: Option<&MaskedAutoencoder<f32>>,
    external: Option<&Path>,
    unfreeze: bool,
    init_seed: u64,
) -> CliResult<Classifier<f32>> {
    let mut rng = seeded(init_seed);
    let source = match mode {
        TrainMode::Probe | TrainMode::Finetune => EncoderSource::Pretrained(
            mae.ok_or_else(|| CliError::Usage(format!("{mode:?} needs --checkpoint with a pretrained autoencoder")))?,
        ),
        TrainMode::Random => EncoderSource::Fresh(&config.model),
        TrainMode::External => EncoderSource::External(
            external.ok_or_else(|| CliError::Usage("external needs --checkpoint with encoder weights".into()))?,
        ),
    };
    let mut c = build_classifier(source, mode.classifier_mode(), &mut rng)?;
    if unfreeze {
        c.set_encoder_trainable(true)
            .map_err(|_| CliError::Usage("--unfreeze applies to random and external modes only".into()))?;
    }
    if c.config.input_dims != config.model.input_dims {
        return Err(CliError::Data(format!(
            "encoder expects dims {:?}, run config uses {:?}",
            c.config.input_dims, config.model.input_dims
        )));
    }
    Ok(c)
}

/// Trains a classifier on a stratified `fraction` of a labeled manifest.
pub fn train(config: &RunConfig, manifest: &Path, options: &TrainOptions, checkpoint: &Path) -> CliResult<PathBuf> {
    check_fraction(options.fraction)?;
    let labeled = LabeledManifest::read(manifest)?;
    let mut seeds = Seeds::new(config.seed);
    let tag = fraction_tag(options.fraction);
    let subset = sample_label_fraction(&labeled, options.fraction, &mut seeded(seeds.get(&format!("fraction/{tag}/0"))))?;
    let mae = match (options.mode, &options.encoder_checkpoint) {
        (TrainMode::Probe | TrainMode::Finetune, Some(p)) => Some(load_mae(p)?.0),
        _ => None,
    };
    let mut classifier = build_for_mode(
        config,
        options.mode,
        mae.as_ref(),
        options.encoder_checkpoint.as_deref(),
        options.unfreeze,
        seeds.get(&format!("classifier/{tag}/0")),
    )?;
    let train_cfg = TrainConfig {
        seed: seeds.get(&format!("downstream/{tag}/0")),
        ..config.downstream.clone()
    };
    let history = train_downstream_volumes(&mut classifier, &subset.load_volumes()?, &subset.labels(), &train_cfg)?;
    let meta = TrainingMetadata {
        epoch: history.len(),
        loss_history: history,
        seed: train_cfg.seed,
        label_fraction: Some(options.fraction),
    };
    save_classifier(&classifier, &meta, checkpoint)?;
    provenance::record(checkpoint.parent().unwrap_or(Path::new(".")), "train", config, seeds.used)?;
    Ok(checkpoint_paths(checkpoint).0)
}

// -------------------------------------------------------------- evaluate

/// Scores of a classifier on a labeled manifest.
pub fn predict_manifest(config: &RunConfig, classifier: &mut Classifier<f32>, labeled: &LabeledManifest) -> CliResult<PredictionSet> {
    let volumes = labeled.load_volumes()?;
    let scores = predict_volumes(classifier, &volumes, config.evaluation.predict_batch_size)?;
    Ok(PredictionSet::from_parts(&labeled.ids(), &labeled.labels(), &scores)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub label_fraction: Option<f64>,
    pub bootstrap_n: usize,
    pub bootstrap_seed: u64,
    pub redraws: usize,
    pub threshold: f64,
    /// Bootstrap means with 95% percentile intervals.
    pub metrics: MetricReport,
    /// Values on the full test set.
    pub full_set: MetricReport,
}

pub const RESULTS_HEADER: &str = "method,fraction,seed,metric,point,ci_lo,ci_hi,p_value";

pub(crate) fn result_rows(method: &str, fraction: Option<f64>, seed: u64, report: &BootstrapReport, auc_p: Option<f64>) -> Vec<String> {
    let fraction = fraction.map(fraction_tag).unwrap_or_default();
    report
        .results
        .iter()
        .map(|r| {
            let p = match (r.metric, auc_p) {
                (voxmim::metrics::Metric::Auc, Some(p)) => p.to_string(),
                _ => String::new(),
            };
            format!("{method},{fraction},{seed},{},{},{},{},{p}", r.metric.name(), r.point, r.ci_lo, r.ci_hi)
        })
        .collect()
}

fn write_predictions(path: &Path, p: &PredictionSet) -> CliResult<()> {
    let mut text = String::from("id,label,score\n");
    for c in p.cases() {
        text.push_str(&format!("{},{},{}\n", c.id, c.label, c.score));
    }
    write_atomic(path, text.as_bytes())
}

fn method_name(mode: ClassifierMode) -> &'static str {
    match mode {
        ClassifierMode::LinearProbe => "probe",
        ClassifierMode::FineTune => "finetune",
        ClassifierMode::RandomInit => "random",
        ClassifierMode::ExternalWeights => "external",
    }
}

/// Bootstrap metrics of a classifier checkpoint on a test manifest. Writes
/// `<out>.json`, `<out>.csv` and `<out>.predictions.csv`.
pub fn evaluate(config: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> CliResult<EvaluationReport> {
    let (mut classifier, meta) = load_classifier(checkpoint)?;
    let labeled = LabeledManifest::read(manifest)?;
    let predictions = predict_manifest(config, &mut classifier, &labeled)?;
    let mut seeds = Seeds::new(config.seed);
    let seed = seeds.get("bootstrap");
    let e = &config.evaluation;
    let boot = bootstrap(&predictions, e.bootstrap_n, e.threshold, seed)?;
    let method = method_name(classifier.mode).to_string();
    let report = EvaluationReport {
        method: method.clone(),
        label_fraction: meta.label_fraction,
        bootstrap_n: e.bootstrap_n,
        bootstrap_seed: seed,
        redraws: boot.redraws,
        threshold: e.threshold,
        metrics: MetricReport::from_bootstrap(&boot),
        full_set: MetricReport::point(&predictions, e.threshold)?,
    };
    let stem = out.to_string_lossy().trim_end_matches(".json").to_string();
    write_json(Path::new(&format!("{stem}.json")), &report)?;
    let mut csv = format!("{RESULTS_HEADER}\n");
    for row in result_rows(&method, meta.label_fraction, config.seed, &boot, None) {
        csv.push_str(&row);
        csv.push('\n');
    }
    write_atomic(Path::new(&format!("{stem}.csv")), csv.as_bytes())?;
    write_predictions(Path::new(&format!("{stem}.predictions.csv")), &predictions)?;
    provenance::record(out.parent().unwrap_or(Path::new(".")), "evaluate", config, seeds.used)?;
    Ok(report)
}

// --------------------------------------------------------------- compare

/// Paired bootstrap comparison of two classifier checkpoints in AUC.
/// `manifest_b` defaults to `manifest`; both must list the same cases.
pub fn compare(
    config: &RunConfig,
    checkpoint_a: &Path,
    checkpoint_b: &Path,
    manifest: &Path,
    manifest_b: Option<&Path>,
    out: &Path,
) -> CliResult<ComparisonReport> {
    let la = LabeledManifest::read(manifest)?;
    let lb = match manifest_b {
        Some(p) => LabeledManifest::read(p)?,
        None => la.clone(),
    };
    let mut ids_a = la.ids();
    let mut ids_b = lb.ids();
    ids_a.sort();
    ids_b.sort();
    if ids_a != ids_b {
        return Err(CliError::Data("the two test manifests list different case ids".into()));
    }
    let pa = predict_manifest(config, &mut load_classifier(checkpoint_a)?.0, &la)?;
    let pb = predict_manifest(config, &mut load_classifier(checkpoint_b)?.0, &lb)?;
    let mut seeds = Seeds::new(config.seed);
    let report = compare_methods(&pa, &pb, config.evaluation.bootstrap_n, seeds.get("bootstrap"))?;
    write_json(out, &report)?;
    provenance::record(out.parent().unwrap_or(Path::new(".")), "compare", config, seeds.used)?;
    Ok(report)
}

pub(crate) fn build_cell_classifier(
    config: &RunConfig,
    mode: TrainMode,
    mae: &MaskedAutoencoder<f32>,
    init_seed: u64,
) -> CliResult<Classifier<f32>> {
    build_for_mode(config, mode, Some(mae), None, false, init_seed)
}
