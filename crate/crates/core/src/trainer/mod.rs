//! Alternating optimization of the five networks, checkpointing and loss
//! logging.

mod checkpoint;
mod forward;
mod grid;
mod metrics;
pub mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, read_sidecar, save_checkpoint, Sidecar, SidecarConfig, CHECKPOINT_MAGIC};
pub use forward::{
    build_objective, build_stages, build_two_stage, compose_cycle, forward_two_stage, LossVars, Plan, StageVars, TwoStageArtifacts,
};
pub use grid::write_image_grid;
pub use metrics::{parse_metrics_csv, write_metrics_csv, write_timing_csv, MetricsRow, METRICS_HEADER};
pub use optim::{Adam, AdamConfig, Sgd, SgdConfig};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Gradients, Var};
use crate::data::{leave_one_out_split, Dataset, PairBatch, PairSampler};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights};
use crate::networks::{Bound, Component, Model, NetworkConfig, Networks};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// The full dual-stream objective with the adversarial alternation.
    Dsdr,
    /// Plain cross-entropy of E and C on pooled source images.
    Erm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub weights: LossWeights,
    /// E, S, G and D.
    pub adam: AdamConfig,
    /// C.
    pub sgd: SgdConfig,
    pub seed: u64,
    /// 0 disables checkpoints.
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 2000,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            sgd: SgdConfig::default(),
            seed: 0,
            checkpoint_interval: 0,
            log_interval: 10,
            objective: Objective::Dsdr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("train.{field}: {msg}")));
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if !(self.adam.lr > 0.0) {
            return bad("adam.lr", "must be positive");
        }
        if !(self.sgd.lr > 0.0) {
            return bad("sgd.lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam.beta", "betas must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam.eps", "must be positive");
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return bad("sgd.momentum", "must lie in [0, 1)");
        }
        if !(self.adam.weight_decay >= 0.0) || !(self.sgd.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.log_interval == 0 {
            return bad("log_interval", "must be at least 1");
        }
        self.weights.validate()
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub step: u64,
    /// Moments for E, S and G, index-aligned with the parameter set.
    pub adam: Adam<T>,
    /// Moments for D.
    pub adam_d: Adam<T>,
    /// Momentum for C.
    pub sgd: Sgd<T>,
    pub rng: ChaCha8Rng,
    /// Component sums since the last logged row.
    pub running: [f64; 9],
    pub running_count: u64,
    /// Logged rows so far.
    pub history: Vec<MetricsRow>,
    pub last_report: Option<LossReport>,
    /// Digest of the training split the run draws from.
    pub data_digest: String,
}

fn nonzero(w: f64) -> bool {
    w != 0.0
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig, network: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let networks = Networks::new(network)?;
        let params = networks.init_parameters::<T>(config.seed);
        let shapes: Vec<&[usize]> = params.tensors().map(|t| t.shape()).collect();
        let adam = Adam::new(config.adam, &shapes);
        let adam_d = Adam::new(config.adam, &shapes);
        let sgd = Sgd::new(config.sgd, shapes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let model = Model::new(networks, params)?;
        Ok(Self {
            config,
            model,
            step: 0,
            adam,
            adam_d,
            sgd,
            rng,
            running: [0.0; 9],
            running_count: 0,
            history: Vec::new(),
            last_report: None,
            data_digest: String::new(),
        })
    }

    fn components(&self) -> Vec<Component> {
        self.model.params.entries().iter().map(|e| e.component).collect()
    }

    /// Apply `grads` of the components selected by `which` through `opt`.
    fn apply(
        &mut self,
        bound: &Bound,
        grads: &Gradients<T>,
        which: impl Fn(Component) -> bool,
        opt: OptimizerSlot,
    ) {
        let comps = self.components();
        let picked: Vec<Option<&Tensor<T>>> = comps
            .iter()
            .enumerate()
            .map(|(i, &c)| if which(c) { grads.get(bound.var(i)) } else { None })
            .collect();
        if picked.iter().all(Option::is_none) {
            return;
        }
        let mut params: Vec<&mut Tensor<T>> = self.model.params.entries_mut().iter_mut().map(|e| &mut e.value).collect();
        match opt {
            OptimizerSlot::Adam => self.adam.update(&mut params, &picked),
            OptimizerSlot::AdamD => self.adam_d.update(&mut params, &picked),
            OptimizerSlot::Sgd => self.sgd.update(&mut params, &picked),
        }
    }

    /// Bind parameters with D as constants; E, S, G and C track gradients.
    fn bind_main(&self, g: &mut Graph<T>) -> Bound {
        self.model.params.bind_with(g, |c| c != Component::Discriminator)
    }

    /// Rebind D's current values into `p` as constants on `g`.
    fn rebind_discriminator(&self, g: &mut Graph<T>, p: &Bound) -> Bound {
        let vars = self
            .model
            .params
            .entries()
            .iter()
            .zip(p.vars())
            .map(|(e, &v)| {
                if e.component == Component::Discriminator {
                    g.constant(e.value.clone())
                } else {
                    v
                }
            })
            .collect();
        Bound::from_vars(vars)
    }

    /// D-step on frozen features. Updates only D and returns the
    /// discriminator loss evaluated before the update.
    pub fn discriminator_update(&mut self, real: &Tensor<T>, fake: &Tensor<T>, update: bool) -> Result<f64> {
        let mut g = if update { Graph::new() } else { Graph::inference() };
        let p = self.model.params.bind_with(&mut g, |c| c == Component::Discriminator);
        let feats = Tensor::concat_batch(&[real, fake])?;
        let x = g.constant(feats);
        let scores = self.model.networks.discriminate(&mut g, &p, x)?;
        let n = real.batch();
        let sr = g.narrow(scores, 0, 0, n)?;
        let sf = g.narrow(scores, 0, n, fake.batch())?;
        let loss = losses::discriminator_loss(&mut g, sr, sf)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("discriminator loss is {value}")));
        }
        if update {
            let grads = g.backward(loss)?;
            self.apply(&p, &grads, |c| c == Component::Discriminator, OptimizerSlot::AdamD);
        }
        Ok(value)
    }

    /// Build the two-stage graph for `batch` with D held constant.
    fn forward_graph(&self, batch: &PairBatch<T>) -> Result<(Graph<T>, Bound, StageVars)> {
        let mut g = Graph::new();
        let p = self.bind_main(&mut g);
        let a = g.constant(batch.images_a.clone());
        let b = g.constant(batch.images_b.clone());
        let plan = Plan::for_weights(&self.config.weights);
        let s = build_stages(&mut g, &self.model.networks, &p, a, b, plan)?;
        if let Some(name) = s.first_non_finite(&g) {
            return Err(Error::Numerical(format!("non-finite values in artifact {name} at step {}", self.step)));
        }
        Ok((g, p, s))
    }

    fn feature_pairs(g: &Graph<T>, s: &StageVars) -> Result<(Tensor<T>, Tensor<T>)> {
        let real = Tensor::concat_batch(&[g.value(s.a_f), g.value(s.b_f)])?;
        let fake = Tensor::concat_batch(&[g.value(s.u_f), g.value(s.q_f)])?;
        Ok((real, fake))
    }

    /// Main update on an already built forward graph: E, S, G via Adam and C
    /// via SGD on the weighted objective. D is read but never written.
    fn main_update(
        &mut self,
        mut g: Graph<T>,
        p: Bound,
        s: StageVars,
        batch: &PairBatch<T>,
        adv_d: f64,
    ) -> Result<LossReport> {
        let weights = self.config.weights;
        let p = self.rebind_discriminator(&mut g, &p);
        let lv = build_objective(&mut g, &self.model.networks, &p, &s, &batch.labels_a, &batch.labels_b, &weights)?;
        let val = |v: Var| g.value(v).item().as_f64();
        let report = LossReport {
            intra: val(lv.intra),
            inter: val(lv.inter),
            recon: val(lv.recon),
            cycle: val(lv.cycle),
            adv_d,
            adv_g: val(lv.adv_g),
            kl: val(lv.kl),
            ce: val(lv.ce),
            total: val(lv.total),
        };
        check_report(&report, self.step)?;
        let grads = g.backward(lv.total)?;
        let gen = |c: Component| matches!(c, Component::Encoder | Component::Style | Component::Generator);
        self.apply(&p, &grads, gen, OptimizerSlot::Adam);
        self.apply(&p, &grads, |c| c == Component::Classifier, OptimizerSlot::Sgd);
        Ok(report)
    }

    /// Only the discriminator sub-update of a step.
    pub fn discriminator_substep(&mut self, batch: &PairBatch<T>) -> Result<f64> {
        let (g, _, s) = self.forward_graph(batch)?;
        let (real, fake) = Self::feature_pairs(&g, &s)?;
        self.discriminator_update(&real, &fake, true)
    }

    /// Only the main sub-update of a step.
    pub fn main_substep(&mut self, batch: &PairBatch<T>) -> Result<LossReport> {
        let (g, p, s) = self.forward_graph(batch)?;
        let (real, fake) = Self::feature_pairs(&g, &s)?;
        let adv_d = self.discriminator_update(&real, &fake, false)?;
        self.main_update(g, p, s, batch, adv_d)
    }

    /// One DSDR step: D-step on detached features of the forward pass, then
    /// the main step against the updated D. With a zero adversarial weight D
    /// is evaluated but not trained.
    pub fn train_step(&mut self, batch: &PairBatch<T>) -> Result<LossReport> {
        let (g, p, s) = self.forward_graph(batch)?;
        let (real, fake) = Self::feature_pairs(&g, &s)?;
        let adv_d = self.discriminator_update(&real, &fake, nonzero(self.config.weights.adv))?;
        let report = self.main_update(g, p, s, batch, adv_d)?;
        self.step += 1;
        Ok(report)
    }

    /// One ERM step on pooled images: E via Adam, C via SGD, on
    /// `ce weight * 2 * mean CE`, the scale of the A and B terms of the
    /// dual-stream objective.
    pub fn erm_step(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<LossReport> {
        let mut g = Graph::new();
        let p = self
            .model
            .params
            .bind_with(&mut g, |c| matches!(c, Component::Encoder | Component::Classifier));
        let x = g.constant(images.clone());
        let (_, feat) = self.model.networks.encode(&mut g, &p, x)?;
        let logits = self.model.networks.classify(&mut g, &p, feat)?;
        let ce = losses::cross_entropy(&mut g, logits, labels)?;
        let ce2 = g.scale(ce, T::lit(2.0));
        let total = losses::weighted_sum(&mut g, &[(ce2, self.config.weights.ce)])?;
        let report = LossReport {
            ce: g.value(ce2).item().as_f64(),
            total: g.value(total).item().as_f64(),
            ..LossReport::default()
        };
        check_report(&report, self.step)?;
        let grads = g.backward(total)?;
        self.apply(&p, &grads, |c| c == Component::Encoder, OptimizerSlot::Adam);
        self.apply(&p, &grads, |c| c == Component::Classifier, OptimizerSlot::Sgd);
        self.step += 1;
        Ok(report)
    }

    /// Fold a step's report into the running sums, emitting a metrics row
    /// at log boundaries.
    fn record(&mut self, report: LossReport, wall_ms: f64) -> Option<&MetricsRow> {
        for (s, v) in self.running.iter_mut().zip(report.values()) {
            *s += v;
        }
        self.running_count += 1;
        self.last_report = Some(report);
        if self.step % self.config.log_interval != 0 && self.step != self.config.steps {
            return None;
        }
        let n = self.running_count as f64;
        let mut avg = [0.0; 9];
        for (a, s) in avg.iter_mut().zip(self.running) {
            *a = s / n;
        }
        self.running = [0.0; 9];
        self.running_count = 0;
        self.history.push(MetricsRow {
            step: self.step,
            report: LossReport::from_values(avg),
            wall_ms,
        });
        self.history.last()
    }
}

#[derive(Debug, Clone, Copy)]
enum OptimizerSlot {
    Adam,
    AdamD,
    Sgd,
}

fn check_report(report: &LossReport, step: u64) -> Result<()> {
    if let Some(name) = report.first_non_finite() {
        return Err(Error::Numerical(format!(
            "loss component {name} is not finite at step {step}; report: {}",
            serde_json::to_string(report).unwrap_or_default()
        )));
    }
    Ok(())
}

/// Drives a [`TrainState`] over a training split, writing metrics and
/// checkpoints to an optional output directory.
pub struct Trainer<T> {
    pub state: TrainState<T>,
    train: Dataset,
    sampler: PairSampler,
    output: Option<PathBuf>,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run on all domains of `data` except `held_out`.
    pub fn new(config: TrainConfig, network: NetworkConfig, data: &Dataset, held_out: usize) -> Result<Self> {
        check_data(&network, data)?;
        let (train, _) = leave_one_out_split(data, held_out)?;
        let mut state = TrainState::new(config, network)?;
        state.data_digest = train.digest();
        Self::with_state(state, train)
    }

    /// Continue from a checkpoint; the training split must match the one the
    /// checkpoint was written against.
    pub fn resume(path: &Path, data: &Dataset, held_out: usize) -> Result<Self> {
        let state: TrainState<T> = load_checkpoint(path)?;
        let (train, _) = leave_one_out_split(data, held_out)?;
        let digest = train.digest();
        if digest != state.data_digest {
            return Err(Error::Integrity {
                expected: state.data_digest.clone(),
                found: digest,
            });
        }
        Self::with_state(state, train)
    }

    fn with_state(state: TrainState<T>, train: Dataset) -> Result<Self> {
        let sampler = PairSampler::new(&train)?;
        Ok(Self {
            state,
            train,
            sampler,
            output: None,
            started: Instant::now(),
        })
    }

    /// Write `metrics.csv`, `timing.csv`, checkpoints and image grids under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.output = Some(dir);
        Ok(self)
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    /// One step of the configured objective, drawing its batch from the
    /// state's RNG.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.state.config.batch_size;
        let report = match self.state.config.objective {
            Objective::Dsdr => {
                let pb = self.sampler.sample::<T, _>(&self.train, batch, &mut self.state.rng)?;
                self.state.train_step(&pb)?
            }
            Objective::Erm => {
                let idx = self.sampler.sample_pooled(2 * batch, &mut self.state.rng);
                let images = self.train.batch_tensor::<T>(&idx);
                let labels: Vec<usize> = idx.iter().map(|&i| self.train.images[i].label).collect();
                self.state.erm_step(&images, &labels)?
            }
        };
        let wall_ms = self.started.elapsed().as_secs_f64() * 1e3;
        let logged = self.state.record(report, wall_ms).is_some();
        if logged {
            if let Some(dir) = &self.output {
                write_metrics_csv(&dir.join("metrics.csv"), &self.state.history)?;
                write_timing_csv(&dir.join("timing.csv"), &self.state.history)?;
            }
        }
        let ci = self.state.config.checkpoint_interval;
        if ci > 0 && self.state.step % ci == 0 {
            self.checkpoint()?;
        }
        Ok(report)
    }

    /// Save `checkpoint.bin` (plus sidecar) and, for the dual-stream
    /// objective, an image grid for the current step.
    pub fn checkpoint(&self) -> Result<()> {
        let Some(dir) = &self.output else { return Ok(()) };
        save_checkpoint(&self.state, &dir.join("checkpoint.bin"))?;
        if self.state.config.objective == Objective::Dsdr {
            let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed ^ 0x6772_6964);
            let pb = self.sampler.sample::<T, _>(&self.train, 4, &mut rng)?;
            let art = forward_two_stage(&self.state.model, &pb)?;
            let path = dir.join(format!("grid_{:06}.png", self.state.step));
            write_image_grid(&path, &[&pb.images_a, &art.a_bar, &art.u, &art.a_prime])?;
        }
        Ok(())
    }

    /// Run until the state reaches `step` (capped at the configured total).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        let stop = step.min(self.state.config.steps);
        while self.state.step < stop {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.state.config.steps)?;
        if let Some(dir) = &self.output {
            write_metrics_csv(&dir.join("metrics.csv"), &self.state.history)?;
            write_timing_csv(&dir.join("timing.csv"), &self.state.history)?;
        }
        Ok(())
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }
}

fn check_data(network: &NetworkConfig, data: &Dataset) -> Result<()> {
    if network.image_shape != data.meta.image_shape {
        return Err(Error::config(format!(
            "network image shape {:?} does not match dataset image shape {:?}",
            network.image_shape, data.meta.image_shape
        )));
    }
    if network.num_classes != data.meta.num_classes {
        return Err(Error::config(format!(
            "network has {} classes, dataset has {}",
            network.num_classes, data.meta.num_classes
        )));
    }
    Ok(())
}

/// Train on every domain but `held_out` and return the final state and its
/// metrics rows.
pub fn train<T: Scalar>(
    config: TrainConfig,
    network: NetworkConfig,
    data: &Dataset,
    held_out: usize,
    output: Option<&Path>,
) -> Result<(TrainState<T>, Vec<MetricsRow>)> {
    let mut trainer = Trainer::<T>::new(config, network, data, held_out)?;
    if let Some(dir) = output {
        trainer = trainer.with_output(dir)?;
    }
    trainer.run()?;
    let state = trainer.into_state();
    let log = state.history.clone();
    Ok((state, log))
}
