//! Unified training loop.
//!
//! Each epoch: every objective's trunk and head are updated batch by batch,
//! objectives in declaration order, with step `η·Γ_k`; afterwards the heads
//! are refitted on the training set, the BPA of every objective is refreshed
//! from its training-set confusion matrix (every `bpa_refresh_every` epochs),
//! and train/validation errors are recorded.
//!
//! Before any confusion matrix exists every objective starts from the uniform
//! BPA, `Γ = 1/√|C|`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Container};
use crate::config::{ConfigError, Mode, RunConfig};
use crate::data::{stratified_batches, BatchPlan, DataError, Dataset};
use crate::evidence::{bpa_from_confusion, Bpa, ConfusionMatrix};
use crate::heads::{argmax, softmax, Head, HeadError, HeadKind, LdaHead, LdaProjection, SoftmaxHead, SvmHead};
use crate::linalg::Matrix;
use crate::nn::{init_params, LayerSpec, Network, NetworkSpec, NnError};
use crate::rng::SplitMix64;

pub const METRICS_HEADER: &str = "epoch,objective,train_loss,train_err_pct,val_err_pct,gamma,masses";

/// Rows pushed through the trunk at once during full-dataset passes.
const SCORING_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("network: {0}")]
    Nn(#[from] NnError),
    #[error("objective `{objective}`: {source}")]
    Head {
        objective: HeadKind,
        #[source]
        source: HeadError,
    },
    #[error("objective `{objective}` produced a non-finite gradient")]
    NonFiniteGradient { objective: HeadKind },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Knobs the loop itself needs, lifted out of [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub eta: f64,
    pub batch_size: usize,
    pub min_per_class: usize,
    pub bpa_refresh_every: usize,
    pub unified: bool,
    pub mode: Mode,
    pub seed: u64,
}

impl From<&RunConfig> for TrainSettings {
    fn from(c: &RunConfig) -> Self {
        Self {
            eta: c.eta,
            batch_size: c.batch_size,
            min_per_class: c.min_per_class,
            bpa_refresh_every: c.bpa_refresh_every,
            unified: c.unified,
            mode: c.mode,
            seed: c.seed,
        }
    }
}

/// One loss function with its head, current evidence and trunk.
#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: HeadKind,
    pub head: Head,
    pub bpa: Bpa,
    /// Index into [`RunState::trunks`].
    pub trunk: usize,
    /// Overrides the evidence-derived Γ (tests and ablations).
    pub pinned_gamma: Option<f64>,
}

impl Objective {
    /// The Γ actually applied to updates.
    pub fn effective_gamma(&self, unified: bool) -> f64 {
        match self.pinned_gamma {
            Some(g) => g,
            None if unified => self.bpa.gamma,
            None => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub objective: String,
    pub train_loss: f64,
    pub train_err_pct: f64,
    pub val_err_pct: f64,
    /// `None` on the combined row.
    pub gamma: Option<f64>,
    pub masses: Vec<f64>,
}

/// Decimal rendering with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let masses: Vec<String> = self.masses.iter().map(|m| format_sig(*m, 12)).collect();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.objective,
            format_sig(self.train_loss, 12),
            format_sig(self.train_err_pct, 12),
            format_sig(self.val_err_pct, 12),
            self.gamma.map(|g| format_sig(g, 12)).unwrap_or_default(),
            masses.join(";")
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Confusion matrices of one pass over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_objective: Vec<ConfusionMatrix>,
    pub combined: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// Mean batch loss per objective.
    pub losses: Vec<f64>,
    pub batches: usize,
    /// Samples left out by stratified batching.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    pub classes: usize,
    pub trunks: Vec<Network>,
    pub objectives: Vec<Objective>,
    pub settings: TrainSettings,
    pub metrics: Vec<MetricsRow>,
}

/// Seed of the batch order in epoch `epoch` (0-based).
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    SplitMix64::derive(seed, epoch as u64).next_u64()
}

fn trunk_seed(seed: u64, trunk: usize) -> u64 {
    if trunk == 0 {
        seed
    } else {
        SplitMix64::derive(seed, 0x7275_6e6b ^ trunk as u64).next_u64()
    }
}

fn head_seed(seed: u64, objective: usize) -> u64 {
    SplitMix64::derive(seed, 0x6865_6164 ^ objective as u64).next_u64()
}

/// Trunk outputs for every row of `features`, computed in chunks.
pub fn trunk_outputs(net: &Network, features: &Matrix) -> Result<Matrix, NnError> {
    let n = features.rows();
    let width = net.output_size();
    let mut out = Vec::with_capacity(n * width);
    let d = features.cols();
    let all = features.as_slice();
    for start in (0..n).step_by(SCORING_CHUNK) {
        let end = (start + SCORING_CHUNK).min(n);
        let chunk = Matrix::from_vec(end - start, d, all[start * d..end * d].to_vec())
            .expect("chunk rows have dataset width");
        out.extend_from_slice(net.predict(&chunk)?.as_slice());
    }
    Ok(Matrix::from_vec(n, width, out).expect("trunk output width"))
}

/// Γ-weighted average of per-head softmax-normalized scores; argmax with
/// ties to the lowest class.
pub fn combine_scores(scores: &[Vec<f64>], gammas: &[f64]) -> usize {
    let total: f64 = gammas.iter().sum();
    let classes = scores.first().map_or(0, Vec::len);
    let mut q = vec![0.0; classes];
    for (s, &g) in scores.iter().zip(gammas) {
        let w = if total > 0.0 { g / total } else { 1.0 / gammas.len() as f64 };
        for (qi, pi) in q.iter_mut().zip(softmax(s)) {
            *qi += w * pi;
        }
    }
    argmax(&q)
}

impl RunState {
    pub fn new(
        settings: TrainSettings,
        network: &NetworkSpec,
        classes: usize,
        objectives: &[HeadKind],
        lambda_svm: f64,
        eps_lda: f64,
    ) -> Result<Self, TrainError> {
        if objectives.is_empty() {
            return Err(TrainError::Invalid("no objectives".into()));
        }
        if !(settings.eta > 0.0) {
            return Err(TrainError::Invalid(format!("learning rate {}", settings.eta)));
        }
        let n_trunks = match settings.mode {
            Mode::SharedTrunk => 1,
            Mode::PerObjectiveEnsemble => objectives.len(),
        };
        let trunks = (0..n_trunks)
            .map(|t| init_params(network, trunk_seed(settings.seed, t)))
            .collect::<Result<Vec<_>, _>>()?;
        let width = trunks[0].output_size();
        let objectives = objectives
            .iter()
            .enumerate()
            .map(|(k, &kind)| {
                let head = match kind {
                    HeadKind::Softmax => {
                        if width != classes {
                            return Err(TrainError::Invalid(format!(
                                "softmax needs a trunk output of {classes}, got {width}"
                            )));
                        }
                        Head::Softmax(SoftmaxHead { classes })
                    }
                    HeadKind::Svm => Head::Svm(
                        SvmHead::new(classes, width, lambda_svm, head_seed(settings.seed, k))
                            .map_err(|source| TrainError::Head { objective: kind, source })?,
                    ),
                    HeadKind::Lda => Head::Lda(
                        LdaHead::new(classes, eps_lda, settings.min_per_class)
                            .map_err(|source| TrainError::Head { objective: kind, source })?,
                    ),
                };
                Ok(Objective {
                    kind,
                    head,
                    bpa: Bpa::uniform(classes),
                    trunk: if n_trunks == 1 { 0 } else { k },
                    pinned_gamma: None,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self {
            epoch: 0,
            classes,
            trunks,
            objectives,
            settings,
            metrics: Vec::new(),
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let spec = NetworkSpec {
            input: cfg.dataset.input_shape(),
            layers: cfg.resolved_architecture(),
        };
        Self::new(
            TrainSettings::from(cfg),
            &spec,
            cfg.dataset.classes(),
            &cfg.objectives,
            cfg.lambda_svm,
            cfg.eps_lda,
        )
    }

    pub fn has_lda(&self) -> bool {
        self.objectives.iter().any(|o| o.kind == HeadKind::Lda)
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.objectives
            .iter()
            .map(|o| o.effective_gamma(self.settings.unified))
            .collect()
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<(), TrainError> {
        if ds.classes != self.classes {
            return Err(TrainError::Invalid(format!(
                "dataset has {} classes, model has {}",
                ds.classes, self.classes
            )));
        }
        if ds.dim() != self.trunks[0].input_size() {
            return Err(TrainError::Invalid(format!(
                "dataset has {} features, network expects {}",
                ds.dim(),
                self.trunks[0].input_size()
            )));
        }
        if ds.is_empty() {
            return Err(TrainError::Invalid("dataset is empty".into()));
        }
        Ok(())
    }

    fn all_outputs(&self, ds: &Dataset) -> Result<Vec<Matrix>, TrainError> {
        self.trunks
            .iter()
            .map(|t| trunk_outputs(t, &ds.features).map_err(TrainError::from))
            .collect()
    }

    fn head_predictions(&self, k: usize, outputs: &Matrix) -> Result<(Vec<usize>, Matrix), TrainError> {
        let obj = &self.objectives[k];
        let mut preds = Vec::with_capacity(outputs.rows());
        let mut scores = Matrix::zeros(outputs.rows(), self.classes);
        for i in 0..outputs.rows() {
            let s = obj.head.scores(outputs.row(i)).map_err(|source| TrainError::Head {
                objective: obj.kind,
                source,
            })?;
            preds.push(argmax(&s));
            scores.row_mut(i).copy_from_slice(&s);
        }
        Ok((preds, scores))
    }

    /// Refits head state (the LDA projection) on the training set and, if
    /// `update_bpa`, replaces every objective's BPA with the one derived from
    /// its training-set confusion matrix.
    fn score_training_set(&mut self, train: &Dataset, update_bpa: bool) -> Result<Vec<ConfusionMatrix>, TrainError> {
        self.check_dataset(train)?;
        let outputs = self.all_outputs(train)?;
        let mut cms = Vec::with_capacity(self.objectives.len());
        for k in 0..self.objectives.len() {
            let out = &outputs[self.objectives[k].trunk];
            let kind = self.objectives[k].kind;
            self.objectives[k]
                .head
                .refit(out, &train.labels)
                .map_err(|source| TrainError::Head { objective: kind, source })?;
            let (preds, _) = self.head_predictions(k, out)?;
            let mut cm = ConfusionMatrix::new(self.classes);
            for (&p, &l) in preds.iter().zip(&train.labels) {
                cm.record(l, p).expect("labels validated by Dataset");
            }
            if update_bpa {
                self.objectives[k].bpa = bpa_from_confusion(&cm);
            }
            cms.push(cm);
        }
        Ok(cms)
    }

    /// Recomputes every objective's BPA from predictions on the training set.
    pub fn refresh_bpa(&mut self, train: &Dataset) -> Result<Vec<ConfusionMatrix>, TrainError> {
        self.score_training_set(train, true)
    }

    /// Refits fitted head state (LDA projection) without touching the BPA.
    pub fn refit_heads(&mut self, train: &Dataset) -> Result<(), TrainError> {
        self.score_training_set(train, false).map(|_| ())
    }

    /// One pass over `train`: for every batch and every objective in order,
    /// forward, head loss, backward and a step of `η·Γ_k`.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochReport, TrainError> {
        self.check_dataset(train)?;
        let plan = BatchPlan {
            epoch_seed: epoch_seed(self.settings.seed, self.epoch),
            batch_size: self.settings.batch_size,
            stratified: self.has_lda(),
            min_per_class: self.settings.min_per_class,
        };
        let batches = stratified_batches(train, &plan)?;
        let gammas = self.gammas();
        let eta = self.settings.eta;
        let mut losses = vec![0.0; self.objectives.len()];
        for idx in &batches.batches {
            let (x, y) = train.gather(idx);
            for (k, obj) in self.objectives.iter_mut().enumerate() {
                let net = &mut self.trunks[obj.trunk];
                let tape = net.forward(&x)?;
                let hg = obj
                    .head
                    .batch_loss(tape.output(), &y)
                    .map_err(|source| TrainError::Head {
                        objective: obj.kind,
                        source,
                    })?;
                let grads = net.backward(&tape, &hg.grad_a)?;
                net.sgd_update(&grads, eta, gammas[k]).map_err(|e| match e {
                    NnError::NonFiniteGradient { .. } => TrainError::NonFiniteGradient { objective: obj.kind },
                    other => TrainError::Nn(other),
                })?;
                obj.head
                    .apply_update(hg.param_grad.as_ref(), eta * gammas[k])
                    .map_err(|_| TrainError::NonFiniteGradient { objective: obj.kind })?;
                losses[k] += hg.loss;
            }
        }
        let n = batches.batches.len().max(1) as f64;
        losses.iter_mut().for_each(|l| *l /= n);
        self.epoch += 1;
        Ok(EpochReport {
            losses,
            batches: batches.batches.len(),
            dropped: batches.dropped,
        })
    }

    /// Per-objective and combined confusion matrices on `ds`.
    pub fn evaluate(&self, ds: &Dataset) -> Result<Evaluation, TrainError> {
        self.check_dataset(ds)?;
        let outputs = self.all_outputs(ds)?;
        let gammas = self.gammas();
        let mut per_objective = Vec::with_capacity(self.objectives.len());
        let mut all_scores = Vec::with_capacity(self.objectives.len());
        for (k, obj) in self.objectives.iter().enumerate() {
            let (preds, scores) = self.head_predictions(k, &outputs[obj.trunk])?;
            let mut cm = ConfusionMatrix::new(self.classes);
            for (&p, &l) in preds.iter().zip(&ds.labels) {
                cm.record(l, p).expect("labels validated by Dataset");
            }
            per_objective.push(cm);
            all_scores.push(scores);
        }
        let mut combined = ConfusionMatrix::new(self.classes);
        for (i, &l) in ds.labels.iter().enumerate() {
            let s: Vec<Vec<f64>> = all_scores.iter().map(|m| m.row(i).to_vec()).collect();
            combined
                .record(l, combine_scores(&s, &gammas))
                .expect("labels validated by Dataset");
        }
        Ok(Evaluation {
            per_objective,
            combined,
        })
    }

    /// Class predicted by the Γ-weighted combination of all heads.
    pub fn predict_combined(&self, x: &[f64]) -> Result<usize, TrainError> {
        let input = Matrix::from_vec(1, x.len(), x.to_vec()).expect("one row");
        let outputs = self
            .trunks
            .iter()
            .map(|t| t.predict(&input))
            .collect::<Result<Vec<_>, _>>()?;
        let scores = self
            .objectives
            .iter()
            .map(|o| {
                o.head
                    .scores(outputs[o.trunk].row(0))
                    .map_err(|source| TrainError::Head { objective: o.kind, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(combine_scores(&scores, &self.gammas()))
    }

    /// Serializes trunks, heads and evidence into a container.
    pub fn to_container(&self, config: &RunConfig) -> Container {
        let objectives: Vec<_> = self
            .objectives
            .iter()
            .map(|o| {
                let mut v = json!({
                    "kind": o.kind,
                    "trunk": o.trunk,
                    "bpa": {"masses": o.bpa.masses, "gamma": o.bpa.gamma, "degenerate": o.bpa.degenerate},
                    "pinned_gamma": o.pinned_gamma,
                });
                match &o.head {
                    Head::Svm(h) => v["lambda"] = json!(h.lambda()),
                    Head::Lda(h) => {
                        v["eps"] = json!(h.eps());
                        v["min_per_class"] = json!(h.min_per_class());
                        v["projection_dims"] = json!(h.projection().map(|p| p.vectors.cols()));
                    }
                    Head::Softmax(_) => {}
                }
                v
            })
            .collect();
        let header = json!({
            "kind": "checkpoint",
            "epoch": self.epoch,
            "seed": self.settings.seed,
            "classes": self.classes,
            "settings": self.settings,
            "network": self.trunks[0].spec(),
            "objectives": objectives,
            "config": config,
        });
        let mut c = Container::new(header);
        for (t, net) in self.trunks.iter().enumerate() {
            let mut p = 0;
            for (l, layer) in net.layers().iter().enumerate() {
                if layer.has_params() {
                    c.push(format!("trunk{t}.layer{l}.weights"), layer.weights().as_slice());
                    c.push(format!("trunk{t}.layer{l}.biases"), layer.biases());
                    p += 1;
                }
            }
            debug_assert_eq!(p * 2, net.parameter_blocks().len());
        }
        for (k, o) in self.objectives.iter().enumerate() {
            match &o.head {
                Head::Svm(h) => c.push(format!("objective{k}.svm.weights"), h.weights().as_slice()),
                Head::Lda(h) => {
                    if let Some(p) = h.projection() {
                        c.push(format!("objective{k}.lda.vectors"), p.vectors.as_slice());
                        c.push(format!("objective{k}.lda.class_means"), p.class_means.as_slice());
                    }
                }
                Head::Softmax(_) => {}
            }
        }
        c
    }

    /// Rebuilds a run from [`RunState::to_container`] output.
    pub fn from_container(c: &Container) -> Result<(RunState, RunConfig), TrainError> {
        let bad = |what: &str| TrainError::Checkpoint(CheckpointError::Header(what.to_string()));
        let h = &c.header;
        if h["kind"] != "checkpoint" {
            return Err(bad("not a training checkpoint"));
        }
        let config: RunConfig = serde_json::from_value(h["config"].clone()).map_err(|e| bad(&e.to_string()))?;
        let settings: TrainSettings =
            serde_json::from_value(h["settings"].clone()).map_err(|e| bad(&e.to_string()))?;
        let network: NetworkSpec = serde_json::from_value(h["network"].clone()).map_err(|e| bad(&e.to_string()))?;
        let classes = h["classes"].as_u64().ok_or_else(|| bad("classes"))? as usize;
        let epoch = h["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize;
        let objs = h["objectives"].as_array().ok_or_else(|| bad("objectives"))?;
        let kinds: Vec<HeadKind> = objs
            .iter()
            .map(|o| serde_json::from_value(o["kind"].clone()).map_err(|e| bad(&e.to_string())))
            .collect::<Result<_, _>>()?;

        let mut state = RunState::new(
            settings,
            &network,
            classes,
            &kinds,
            config.lambda_svm,
            config.eps_lda,
        )?;
        state.epoch = epoch;
        let block = |name: String| c.block(&name).ok_or_else(|| bad(&format!("missing block {name}")));
        for (t, net) in state.trunks.iter_mut().enumerate() {
            let mut blocks = Vec::new();
            for (l, layer) in net.layers().iter().enumerate() {
                if layer.has_params() {
                    blocks.push(block(format!("trunk{t}.layer{l}.weights"))?.to_vec());
                    blocks.push(block(format!("trunk{t}.layer{l}.biases"))?.to_vec());
                }
            }
            net.load_parameter_blocks(&blocks)?;
        }
        for (k, (o, meta)) in state.objectives.iter_mut().zip(objs).enumerate() {
            let masses: Vec<f64> =
                serde_json::from_value(meta["bpa"]["masses"].clone()).map_err(|e| bad(&e.to_string()))?;
            o.bpa = Bpa {
                masses,
                gamma: meta["bpa"]["gamma"].as_f64().ok_or_else(|| bad("bpa.gamma"))?,
                degenerate: meta["bpa"]["degenerate"].as_bool().unwrap_or(false),
            };
            o.pinned_gamma = meta["pinned_gamma"].as_f64();
            match &mut o.head {
                Head::Svm(h) => {
                    let w = block(format!("objective{k}.svm.weights"))?;
                    let (r, cols) = (h.weights().rows(), h.weights().cols());
                    *h.weights_mut() = Matrix::from_vec(r, cols, w.to_vec()).map_err(|e| bad(&e.to_string()))?;
                }
                Head::Lda(h) => {
                    if let Some(keep) = meta["projection_dims"].as_u64() {
                        let keep = keep as usize;
                        let vectors = block(format!("objective{k}.lda.vectors"))?;
                        let means = block(format!("objective{k}.lda.class_means"))?;
                        let dim = if keep == 0 { 0 } else { vectors.len() / keep };
                        h.set_projection(LdaProjection {
                            vectors: Matrix::from_vec(dim, keep, vectors.to_vec()).map_err(|e| bad(&e.to_string()))?,
                            class_means: Matrix::from_vec(classes, keep, means.to_vec())
                                .map_err(|e| bad(&e.to_string()))?,
                        });
                    }
                }
                Head::Softmax(_) => {}
            }
        }
        Ok((state, config))
    }

    pub fn save_checkpoint(&self, config: &RunConfig, path: &Path) -> Result<(), TrainError> {
        self.to_container(config).write(path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(RunState, RunConfig), TrainError> {
        Self::from_container(&Container::read(path)?)
    }
}

/// File name of the checkpoint written after `epoch` epochs.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch-{epoch:04}.ubpa")
}

/// Full training run. With `out_dir`, writes `metrics.csv`, a checkpoint per
/// epoch (plus `latest.ubpa`) and the config as `config.json`.
///
/// Returns the final state and the metrics CSV text.
pub fn fit(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(RunState, String), TrainError> {
    let mut state = RunState::from_config(config)?;
    state.check_dataset(train)?;
    state.check_dataset(test)?;
    fit_state(&mut state, config, train, test, out_dir, &mut |_| {})?;
    let csv = metrics_csv(&state.metrics);
    Ok((state, csv))
}

/// Runs `config.epochs` epochs on an already-built state, calling
/// `on_epoch` after each one.
pub fn fit_state(
    state: &mut RunState,
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&RunState),
) -> Result<(), TrainError> {
    let save = |state: &RunState| -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            let c = state.to_container(config);
            let bytes = c.to_bytes()?;
            fs::write(dir.join(checkpoint_name(state.epoch)), &bytes)?;
            fs::write(dir.join("latest.ubpa"), &bytes)?;
            fs::write(dir.join("metrics.csv"), metrics_csv(&state.metrics))?;
        }
        Ok(())
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), config.to_json())?;
    }
    if state.epoch == 0 && state.has_lda() {
        // Scoring needs a fitted projection even before the first epoch.
        state.refit_heads(train)?;
    }
    save(state)?;

    for _ in 0..config.epochs {
        let in_force: Vec<(f64, Vec<f64>)> = state
            .objectives
            .iter()
            .map(|o| (o.bpa.gamma, o.bpa.masses.clone()))
            .collect();
        let report = state.train_epoch(train)?;
        let due = state.epoch % state.settings.bpa_refresh_every == 0;
        state.score_training_set(train, due)?;
        let train_eval = state.evaluate(train)?;
        let val_eval = state.evaluate(test)?;
        let epoch = state.epoch;
        for (k, o) in state.objectives.iter().enumerate() {
            state.metrics.push(MetricsRow {
                epoch,
                objective: o.kind.name().to_string(),
                train_loss: report.losses[k],
                train_err_pct: train_eval.per_objective[k].error_pct(),
                val_err_pct: val_eval.per_objective[k].error_pct(),
                gamma: Some(in_force[k].0),
                masses: in_force[k].1.clone(),
            });
        }
        state.metrics.push(MetricsRow {
            epoch,
            objective: "combined".into(),
            train_loss: report.losses.iter().sum(),
            train_err_pct: train_eval.combined.error_pct(),
            val_err_pct: val_eval.combined.error_pct(),
            gamma: None,
            masses: Vec::new(),
        });
        save(state)?;
        on_epoch(state);
    }
    Ok(())
}

/// Default trunk for a dataset: `dense(d→hidden) · relu · dense(hidden→classes)`.
pub fn mlp(input: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { inputs: input, out: hidden },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: hidden,
            out: classes,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BlobsConfig, DatasetConfig};
    use crate::data::synth_blobs;

    fn blobs_config(objectives: Vec<HeadKind>) -> RunConfig {
        let mut cfg = RunConfig::new(
            DatasetConfig::Blobs(BlobsConfig {
                classes: 3,
                per_class: 40,
                dim: 2,
                separation: 4.0,
                seed: None,
            }),
            objectives,
        );
        cfg.architecture = Some(mlp(2, 8, 3));
        cfg.batch_size = 24;
        cfg.epochs = 2;
        cfg
    }

    #[test]
    fn format_sig_digits() {
        assert_eq!(format_sig(704.0 / 1433.0, 12), "0.491277041172");
        assert_eq!(format_sig(0.0, 12), "0");
        assert_eq!(format_sig(12.5, 4), "12.50");
        assert_eq!(format_sig(-0.001234567, 3), "-0.00123");
    }

    #[test]
    fn epoch_zero_uses_uniform_bpa() {
        let state = RunState::from_config(&blobs_config(vec![HeadKind::Softmax])).unwrap();
        let g = state.objectives[0].bpa.gamma;
        assert!((g - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(state.gammas(), vec![g]);
    }

    #[test]
    fn baseline_pins_gamma_to_one() {
        let mut cfg = blobs_config(vec![HeadKind::Softmax, HeadKind::Svm]);
        cfg.unified = false;
        let state = RunState::from_config(&cfg).unwrap();
        assert_eq!(state.gammas(), vec![1.0, 1.0]);
    }

    #[test]
    fn combine_single_and_identical() {
        let s = vec![vec![0.1, 2.0, 0.3]];
        assert_eq!(combine_scores(&s, &[0.7]), 1);
        let two = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(combine_scores(&two, &[0.9, 0.1]), 1);
        assert_eq!(combine_scores(&two, &[0.1, 0.9]), 1);
    }

    #[test]
    fn combine_follows_dominant_head() {
        let s = vec![vec![3.0, 0.0], vec![0.0, 3.0]];
        assert_eq!(combine_scores(&s, &[0.9, 0.1]), 0);
        assert_eq!(combine_scores(&s, &[0.1, 0.9]), 1);
        // Common rescaling of Γ does not matter.
        assert_eq!(combine_scores(&s, &[0.45, 0.05]), 0);
    }

    #[test]
    fn per_objective_ensemble_has_one_trunk_each() {
        let mut cfg = blobs_config(vec![HeadKind::Softmax, HeadKind::Svm]);
        cfg.mode = Mode::PerObjectiveEnsemble;
        let state = RunState::from_config(&cfg).unwrap();
        assert_eq!(state.trunks.len(), 2);
        assert_eq!(state.objectives[1].trunk, 1);
        assert_ne!(state.trunks[0], state.trunks[1]);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_evaluation() {
        let cfg = blobs_config(vec![HeadKind::Softmax, HeadKind::Svm, HeadKind::Lda]);
        let (train, test) = synth_blobs(0, 3, 40, 2, 4.0).unwrap();
        let (state, _) = fit(&cfg, &train, &test, None).unwrap();
        let c = Container::from_bytes(&state.to_container(&cfg).to_bytes().unwrap()).unwrap();
        let (restored, restored_cfg) = RunState::from_container(&c).unwrap();
        assert_eq!(restored_cfg, cfg);
        assert_eq!(restored.epoch, state.epoch);
        assert_eq!(restored.evaluate(&test).unwrap(), state.evaluate(&test).unwrap());
        for (a, b) in restored.objectives.iter().zip(&state.objectives) {
            assert_eq!(a.bpa, b.bpa);
            assert_eq!(a.head, b.head);
        }
    }

    #[test]
    fn lda_objective_forces_stratified_batches() {
        let mut cfg = blobs_config(vec![HeadKind::Lda]);
        cfg.architecture = Some(mlp(2, 8, 4));
        cfg.batch_size = 12;
        let (train, test) = synth_blobs(0, 3, 40, 2, 4.0).unwrap();
        let mut state = RunState::from_config(&cfg).unwrap();
        let report = state.train_epoch(&train).unwrap();
        // 96 samples, 32 per class: floor(32/4) = 8 batches of 12.
        assert_eq!(report.batches, 8);
        assert_eq!(report.dropped, 0);
        state.refit_heads(&train).unwrap();
        assert!(state.evaluate(&test).is_ok());
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let cfg = blobs_config(vec![HeadKind::Softmax]);
        let (train, _) = synth_blobs(0, 2, 10, 2, 4.0).unwrap();
        let mut state = RunState::from_config(&cfg).unwrap();
        assert!(matches!(state.train_epoch(&train), Err(TrainError::Invalid(_))));
    }
}
