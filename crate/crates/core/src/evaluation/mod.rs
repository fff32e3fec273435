//! Leave-one-domain-out accuracy, multi-seed aggregation, the ERM baseline,
//! the loss-ablation grid and embedding export.

mod pca;
mod report;

pub use pca::{export_embeddings, pca_2d};
pub use report::{
    render_ablation_table, render_results_table, write_ablation_csv, write_aggregate_csv, write_results_csv,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{leave_one_out_split, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossMask;
use crate::networks::{Model, NetworkConfig};
use crate::scalar::Scalar;
use crate::trainer::{Objective, TrainConfig, Trainer};

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy of `argmax C(E(x))` over `test`, in percent.
pub fn evaluate_accuracy<T: Scalar>(model: &Model<T>, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("cannot evaluate on an empty test set"));
    }
    let k = model.networks.config().num_classes;
    if test.meta.num_classes != k {
        return Err(Error::config(format!(
            "classifier has {k} outputs, test set has {} classes",
            test.meta.num_classes
        )));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = test.batch_tensor::<T>(chunk);
        let pred = model.predict(&x)?.argmax();
        correct += chunk.iter().zip(pred).filter(|(&i, p)| test.images[i].label == *p).count();
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Accuracies of one held-out domain over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub held_out: String,
    pub seeds: Vec<u64>,
    /// Top-1 accuracy per seed, percent.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub config_digest: String,
}

impl ExperimentResult {
    pub fn new(held_out: impl Into<String>, seeds: Vec<u64>, accuracies: Vec<f64>, config_digest: String) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            held_out: held_out.into(),
            seeds,
            accuracies,
            mean,
            std,
            config_digest,
        }
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Which domains to hold out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeldOut {
    All,
    One(String),
}

/// A leave-one-domain-out protocol: what to train and over which seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub seeds: Vec<u64>,
    pub held_out: HeldOut,
    /// Per-run output directories are created below this root.
    #[serde(skip)]
    pub output: Option<PathBuf>,
    /// Print one line per finished run to stderr.
    #[serde(skip)]
    pub verbose: bool,
}

impl Experiment {
    pub fn new(train: TrainConfig, network: NetworkConfig) -> Self {
        Self {
            train,
            network,
            seeds: vec![0, 1, 2],
            held_out: HeldOut::All,
            output: None,
            verbose: false,
        }
    }

    /// SHA-256 of the canonical JSON form of the protocol.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("experiment serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        self.train.validate()?;
        self.network.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("eval.seeds must not be empty"));
        }
        if data.meta.num_domains() < 2 {
            return Err(Error::config("leave-one-out needs at least 2 domains"));
        }
        self.domains(data).map(|_| ())
    }

    /// Indices of the held-out domains, in dataset order.
    pub fn domains(&self, data: &Dataset) -> Result<Vec<usize>> {
        match &self.held_out {
            HeldOut::All => Ok((0..data.meta.num_domains()).collect()),
            HeldOut::One(name) => data.meta.domain_index(name).map(|d| vec![d]).ok_or_else(|| {
                Error::config(format!(
                    "unknown held-out domain '{name}'; valid names: {}",
                    data.meta.domain_names.join(", ")
                ))
            }),
        }
    }
}

/// Train with `seed` on all domains but `held_out` and report test accuracy.
pub fn run_single<T: Scalar>(exp: &Experiment, data: &Dataset, held_out: usize, seed: u64) -> Result<f64> {
    let config = TrainConfig {
        seed,
        ..exp.train.clone()
    };
    let mut trainer = Trainer::<T>::new(config, exp.network.clone(), data, held_out)?;
    if let Some(root) = &exp.output {
        let name = &data.meta.domain_names[held_out];
        trainer = trainer.with_output(root.join(format!("{name}_seed{seed}")))?;
    }
    trainer.run()?;
    let (_, test) = leave_one_out_split(data, held_out)?;
    let acc = evaluate_accuracy(&trainer.state.model, &test)?;
    if exp.verbose {
        eprintln!(
            "held_out={} seed={seed} objective={:?} accuracy={acc:.2}",
            data.meta.domain_names[held_out], exp.train.objective
        );
    }
    Ok(acc)
}

fn with_context(err: Error, domain: &str, seed: u64) -> Error {
    match err {
        Error::Numerical(m) => Error::Numerical(format!("held-out {domain}, seed {seed}: {m}")),
        Error::Config(m) => Error::Config(format!("held-out {domain}, seed {seed}: {m}")),
        other => other,
    }
}

/// One result per held-out domain over every seed.
pub fn run_leave_one_out<T: Scalar>(exp: &Experiment, data: &Dataset) -> Result<Vec<ExperimentResult>> {
    exp.validate(data)?;
    let digest = exp.digest();
    let mut out = Vec::new();
    for d in exp.domains(data)? {
        let name = data.meta.domain_names[d].clone();
        let mut accs = Vec::with_capacity(exp.seeds.len());
        for &seed in &exp.seeds {
            accs.push(run_single::<T>(exp, data, d, seed).map_err(|e| with_context(e, &name, seed))?);
        }
        out.push(ExperimentResult::new(name, exp.seeds.clone(), accs, digest.clone()));
    }
    Ok(out)
}

/// The "Avg" row: per-seed means over domains, aggregated like any other row.
pub fn average_row(results: &[ExperimentResult]) -> Result<ExperimentResult> {
    let first = results.first().ok_or_else(|| Error::config("no results to average"))?;
    let seeds = first.seeds.clone();
    if results.iter().any(|r| r.seeds != seeds) {
        return Err(Error::config("results to average were run over different seeds"));
    }
    let n = results.len() as f64;
    let accs = (0..seeds.len())
        .map(|i| results.iter().map(|r| r.accuracies[i]).sum::<f64>() / n)
        .collect();
    Ok(ExperimentResult::new("Avg", seeds, accs, first.config_digest.clone()))
}

/// ERM on pooled source domains with the same backbone, optimizers and
/// schedule.
pub fn run_erm_baseline<T: Scalar>(exp: &Experiment, data: &Dataset, held_out: &str) -> Result<ExperimentResult> {
    let erm = Experiment {
        train: TrainConfig {
            objective: Objective::Erm,
            ..exp.train.clone()
        },
        held_out: HeldOut::One(held_out.to_string()),
        ..exp.clone()
    };
    Ok(run_leave_one_out::<T>(&erm, data)?.remove(0))
}

/// One ablation row: which losses were on and the resulting accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: LossMask,
    /// Mean of the per-domain means.
    pub mean_accuracy: f64,
    pub results: Vec<ExperimentResult>,
}

/// A full leave-one-out run per mask, in input order. Disabled losses get
/// weight 0; a disabled adversarial loss also freezes D.
pub fn run_ablation_grid<T: Scalar>(exp: &Experiment, data: &Dataset, masks: &[LossMask]) -> Result<Vec<AblationRow>> {
    validate_masks(masks)?;
    let mut rows = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        let run = Experiment {
            train: TrainConfig {
                weights: exp.train.weights.masked(mask),
                objective: Objective::Dsdr,
                ..exp.train.clone()
            },
            output: exp.output.as_ref().map(|o| o.join(format!("row{i}"))),
            ..exp.clone()
        };
        let results = run_leave_one_out::<T>(&run, data)?;
        rows.push(AblationRow {
            mask: *mask,
            mean_accuracy: average_row(&results)?.mean,
            results,
        });
    }
    Ok(rows)
}

pub fn validate_masks(masks: &[LossMask]) -> Result<()> {
    if let Some(i) = masks.iter().position(|m| !m.ce) {
        return Err(Error::config(format!("ablation row {} disables ce, which must stay on", i + 1)));
    }
    Ok(())
}
