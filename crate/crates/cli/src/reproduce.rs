//! The full results grid: {random, mim-probe, mim-finetune} x label
//! fractions x replicate seeds, written as one tidy CSV.
//!
//! Every finished grid cell leaves its test-set predictions in
//! `cells/<method>_f<fraction>_r<seed>.json`; a re-run skips cells (and
//! pre-trained autoencoders) that already exist. Statistics are recomputed
//! from the stored predictions, so the CSV is the same either way.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxmim::metrics::{bootstrap, compare_methods, PredictionSet};
use voxmim::rng::seeded;
use voxmim::trainer::checkpoint::checkpoint_paths;
use voxmim::trainer::{
    load_mae, predict_volumes, sample_label_fraction, save_mae, train_downstream_volumes, LabeledManifest, TrainConfig,
    UnlabeledManifest,
};

use crate::commands::{
    build_cell_classifier, mkdir, preprocess, pretrain_replicate, result_rows, synth, write_atomic, write_json, Seeds,
    TrainMode, RESULTS_HEADER, TEST_MANIFEST, TRAIN_MANIFEST,
};
use crate::config::{FractionOf, RunConfig};
use crate::error::{CliError, CliResult};
use crate::provenance;

/// Methods of the grid, in output order.
pub const METHODS: [(&str, TrainMode); 3] = [
    ("random", TrainMode::Random),
    ("mim-probe", TrainMode::Probe),
    ("mim-finetune", TrainMode::Finetune),
];

#[derive(Debug, Clone, Default)]
pub struct ReproduceOutput {
    pub results: PathBuf,
    pub cells_run: usize,
    pub cells_skipped: usize,
    pub pretrain_run: usize,
    pub pretrain_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Cell {
    method: String,
    fraction: f64,
    seed: u64,
    train_cases: usize,
    loss_history: Vec<f64>,
    predictions: PredictionSet,
}

fn read_cell(path: &Path) -> Option<Cell> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Runs (or resumes) the grid under `out_dir` and writes `out_dir/results.csv`.
pub fn reproduce(config: &RunConfig, out_dir: &Path) -> CliResult<ReproduceOutput> {
    let mut out = ReproduceOutput::default();
    let mut seeds = Seeds::new(config.seed);
    let data = out_dir.join("data");
    let manifests = ["unlabeled.csv", TRAIN_MANIFEST, TEST_MANIFEST];
    if !manifests.iter().all(|m| data.join(m).exists()) {
        synth(config, &data)?;
    }
    let prep = out_dir.join("preprocessed");
    for m in manifests {
        preprocess(config, &data.join(m), &prep, false)?;
    }
    let unlabeled = UnlabeledManifest::read(prep.join("unlabeled.csv"))?.load_volumes()?;
    let train = LabeledManifest::read(prep.join(TRAIN_MANIFEST))?;
    let test = LabeledManifest::read(prep.join(TEST_MANIFEST))?;
    let test_volumes = test.load_volumes()?;
    let models = out_dir.join("models");
    let cells = out_dir.join("cells");
    mkdir(&models)?;
    mkdir(&cells)?;

    let mut rows = vec![RESULTS_HEADER.to_string()];
    for &rep in &config.evaluation.seeds {
        let mae_path = models.join(format!("mae_r{rep}"));
        let mae = if checkpoint_paths(&mae_path).0.exists() {
            out.pretrain_skipped += 1;
            // keep the provenance record complete on resume
            seeds.get(&format!("mae-init/{rep}"));
            seeds.get(&format!("pretrain/{rep}"));
            load_mae(&mae_path)?.0
        } else {
            log::info!("pre-training replicate {rep}");
            let (mae, meta) = pretrain_replicate(config, &unlabeled, rep, &mut seeds)?;
            save_mae(&mae, &meta, &mae_path)?;
            out.pretrain_run += 1;
            mae
        };
        for &fraction in &config.evaluation.fractions {
            let tag = format!("{fraction:.2}");
            let mut rng = seeded(seeds.get(&format!("fraction/{tag}/{rep}")));
            let (fit, eval) = match config.evaluation.fraction_of {
                FractionOf::Train => (sample_label_fraction(&train, fraction, &mut rng)?, None),
                FractionOf::Test => (train.clone(), Some(sample_label_fraction(&test, fraction, &mut rng)?)),
            };
            let eval_ids = eval.as_ref().unwrap_or(&test).ids();
            let init_seed = seeds.get(&format!("classifier/{tag}/{rep}"));
            let train_seed = seeds.get(&format!("downstream/{tag}/{rep}"));
            let boot_seed = seeds.get(&format!("bootstrap/{tag}/{rep}"));
            let mut predictions = Vec::with_capacity(METHODS.len());
            for (name, mode) in METHODS {
                let path = cells.join(format!("{name}_f{tag}_r{rep}.json"));
                let cached = read_cell(&path).filter(|c| c.predictions.cases().iter().map(|p| &p.id).eq(eval_ids.iter()));
                let cell = match cached {
                    Some(c) => {
                        out.cells_skipped += 1;
                        c
                    }
                    None => {
                        log::info!("training {name} at fraction {tag}, replicate {rep}");
                        let mut classifier = build_cell_classifier(config, mode, &mae, init_seed)?;
                        let cfg = TrainConfig {
                            seed: train_seed,
                            ..config.downstream.clone()
                        };
                        let history = train_downstream_volumes(&mut classifier, &fit.load_volumes()?, &fit.labels(), &cfg)?;
                        let batch = config.evaluation.predict_batch_size;
                        let (scores, labels) = match &eval {
                            Some(m) => (predict_volumes(&mut classifier, &m.load_volumes()?, batch)?, m.labels()),
                            None => (predict_volumes(&mut classifier, &test_volumes, batch)?, test.labels()),
                        };
                        let cell = Cell {
                            method: name.to_string(),
                            fraction,
                            seed: rep,
                            train_cases: fit.len(),
                            loss_history: history,
                            predictions: PredictionSet::from_parts(&eval_ids, &labels, &scores)?,
                        };
                        write_json(&path, &cell)?;
                        out.cells_run += 1;
                        cell
                    }
                };
                predictions.push(cell.predictions);
            }
            let e = &config.evaluation;
            for (i, (name, _)) in METHODS.iter().enumerate() {
                let report = bootstrap(&predictions[i], e.bootstrap_n, e.threshold, boot_seed)?;
                // MIM rows carry the p value of their AUC against random init
                let p = if i == 0 {
                    None
                } else {
                    Some(compare_methods(&predictions[i], &predictions[0], e.bootstrap_n, boot_seed)?.p_value)
                };
                rows.extend(result_rows(name, Some(fraction), rep, &report, p));
            }
        }
    }
    let mut text = rows.join("\n");
    text.push('\n');
    out.results = out_dir.join("results.csv");
    write_atomic(&out.results, text.as_bytes())?;
    provenance::record(out_dir, "reproduce", config, seeds.used)?;
    Ok(out)
}

/// One parsed row of a results CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub fraction: f64,
    pub seed: u64,
    pub metric: String,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: Option<f64>,
}

pub fn read_results(path: &Path) -> CliResult<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}
