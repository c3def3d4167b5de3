//! Pretraining, sequential layer-by-layer subspace identification, and the
//! gradient-ascent and adapter fine-tuning baselines.
//!
//! Every loop here is plain minibatch SGD with global-norm clipping at 1.0
//! and validation once per epoch. A stage stops after `patience` epochs
//! without a new best validation loss and restores its best snapshot.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    init_random, AttnRole, AttnWeight, BottleneckPair, FreezeMask, ModelConfig, ModelWeights, ParamGroup,
};
use crate::tasks::{accuracy, Example, TaskDataset, TaskKind};

pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentificationMode {
    /// Embeddings, feed-forward, norms and head copied from the base model;
    /// only the attention bottlenecks start random.
    Aligned,
    /// Every weight randomly initialized before identification.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptedRoles {
    All,
    QueryValue,
}

impl AdaptedRoles {
    pub fn roles(self) -> Vec<AttnRole> {
        match self {
            AdaptedRoles::All => AttnRole::ALL.to_vec(),
            AdaptedRoles::QueryValue => vec![AttnRole::Q, AttnRole::V],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub max_epochs_per_layer: usize,
    /// Validation evaluations without improvement before a stage stops.
    pub patience: usize,
    /// Bottleneck rank.
    pub k: usize,
    pub identification_mode: IdentificationMode,
    pub adapted_roles: AdaptedRoles,
    pub pretrain_step_size: f64,
    pub pretrain_max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            batch_size: 32,
            max_epochs_per_layer: 12,
            patience: 3,
            k: 8,
            identification_mode: IdentificationMode::Aligned,
            adapted_roles: AdaptedRoles::All,
            pretrain_step_size: 0.5,
            pretrain_max_epochs: 40,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.pretrain_step_size > 0.0 && self.pretrain_step_size.is_finite()) {
            return Err(Error::Config("pretrain_step_size must be positive".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub layer: Option<usize>,
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn push(&mut self, r: LogRecord) {
        log::debug!(
            "{} layer={:?} epoch={} step={} train={:.4} val={:.4}",
            r.stage,
            r.layer,
            r.epoch,
            r.step,
            r.train_loss,
            r.val_loss
        );
        self.records.push(r);
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("log record serializes"))?;
        }
        Ok(())
    }

    fn tail(&self, n: usize) -> String {
        self.records
            .iter()
            .rev()
            .take(n)
            .rev()
            .map(|r| format!("[{} layer={:?} epoch={} step={} train={} val={}]", r.stage, r.layer, r.epoch, r.step, r.train_loss, r.val_loss))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

struct StageOutcome {
    initial_val: f64,
    best_val: f64,
    epochs: usize,
}

struct Stage<'a> {
    name: String,
    layer: Option<usize>,
    step_size: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    train: &'a [Example],
    val: &'a [Example],
}

/// Runs SGD epochs on the unfrozen groups of `model`, restoring the
/// best-validation snapshot at the end.
fn run_stage(
    model: &mut ModelWeights,
    mask: &FreezeMask,
    stage: Stage<'_>,
    rng: &mut ChaCha8Rng,
    log: &mut TrainingLog,
) -> Result<StageOutcome> {
    let initial_val = model.loss(stage.val)?;
    let mut best_val = initial_val;
    let mut best = model.clone();
    let mut since_best = 0;
    let mut epochs = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..stage.train.len()).collect();
    log.push(LogRecord {
        stage: stage.name.clone(),
        layer: stage.layer,
        epoch: 0,
        step: 0,
        train_loss: f64::NAN,
        val_loss: initial_val,
        val_accuracy: None,
    });
    for epoch in 1..=stage.max_epochs {
        order.shuffle(rng);
        let mut train_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(stage.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| stage.train[i].clone()).collect();
            let (loss, mut grads) = model.loss_and_grads(&batch, mask)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Training {
                    stage: stage.name,
                    message: format!("loss diverged to {loss} at step {step}; recent: {}", log.tail(5)),
                });
            }
            grads.clip_global_norm(CLIP_NORM);
            model.sgd_step(&grads, stage.step_size);
            train_loss += loss;
            batches += 1;
        }
        epochs = epoch;
        let val = model.loss(stage.val)?;
        log.push(LogRecord {
            stage: stage.name.clone(),
            layer: stage.layer,
            epoch,
            step,
            train_loss: train_loss / batches.max(1) as f64,
            val_loss: val,
            val_accuracy: None,
        });
        if !val.is_finite() {
            return Err(Error::Training {
                stage: stage.name,
                message: format!("validation loss diverged at epoch {epoch}; recent: {}", log.tail(5)),
            });
        }
        if val < best_val {
            best_val = val;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= stage.patience {
                break;
            }
        }
    }
    *model = best;
    Ok(StageOutcome {
        initial_val,
        best_val,
        epochs,
    })
}

/// Trains a fresh model on the union of the tasks' train splits.
pub fn pretrain(
    config: &TrainConfig,
    mixture: &[TaskDataset],
    model_config: &ModelConfig,
    log: &mut TrainingLog,
) -> Result<ModelWeights> {
    config.validate()?;
    if mixture.len() < 2 {
        return Err(invalid("pretraining needs at least two tasks"));
    }
    let mut weights = init_random(model_config, model_config.seed)?;
    if config.pretrain_max_epochs == 0 {
        return Ok(weights);
    }
    let train: Vec<Example> = mixture.iter().flat_map(|d| d.train.iter().cloned()).collect();
    let val: Vec<Example> = mixture.iter().flat_map(|d| d.validation.iter().cloned()).collect();
    let mask = FreezeMask::all_unfrozen(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    run_stage(
        &mut weights,
        &mask,
        Stage {
            name: "pretrain".into(),
            layer: None,
            step_size: config.pretrain_step_size,
            batch_size: config.batch_size,
            max_epochs: config.pretrain_max_epochs,
            patience: config.patience,
            train: &train,
            val: &val,
        },
        &mut rng,
        log,
    )?;
    Ok(weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFactor {
    pub f: Matrix,
    pub g: Matrix,
    /// `f · g`
    pub t: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentificationMeta {
    pub mode: Option<IdentificationMode>,
    /// Layers in the order they were trained.
    pub layer_order: Vec<usize>,
    pub epochs_per_layer: Vec<usize>,
    /// Validation loss of the identification model before each layer trained.
    pub initial_val_losses: Vec<f64>,
    /// Best (restored) validation loss after each layer.
    pub best_val_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Per-layer, per-role rank-`k` task matrices `T = F·G`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSubspace {
    pub task: String,
    pub k: usize,
    pub dim: usize,
    pub roles: Vec<AttnRole>,
    pub layers: Vec<BTreeMap<AttnRole, LayerFactor>>,
    pub meta: IdentificationMeta,
}

impl TaskSubspace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn matrix(&self, layer: usize, role: AttnRole) -> Option<&Matrix> {
        self.layers.get(layer)?.get(&role).map(|f| &f.t)
    }

    /// Builds a subspace directly from dense matrices, with trivial factors
    /// `F = T`, `G = I`. Useful for synthetic experiments.
    pub fn from_matrices(task: &str, layers: Vec<BTreeMap<AttnRole, Matrix>>) -> Result<Self> {
        let first = layers
            .first()
            .and_then(|l| l.values().next())
            .ok_or_else(|| invalid("subspace needs at least one matrix"))?;
        let dim = first.rows();
        let roles: Vec<AttnRole> = layers[0].keys().copied().collect();
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            if l.keys().copied().collect::<Vec<_>>() != roles {
                return Err(invalid("every layer must carry the same roles"));
            }
            let mut m = BTreeMap::new();
            for (r, t) in l {
                if t.shape() != (dim, dim) {
                    return Err(invalid(format!("matrix for role {r} is {:?}, expected {dim}x{dim}", t.shape())));
                }
                m.insert(
                    r,
                    LayerFactor {
                        f: t.clone(),
                        g: Matrix::identity(dim),
                        t,
                    },
                );
            }
            out.push(m);
        }
        Ok(Self {
            task: task.to_string(),
            k: dim,
            dim,
            roles,
            layers: out,
            meta: IdentificationMeta::default(),
        })
    }
}

/// Builds the model whose attention bottlenecks are trained during
/// identification.
pub fn identification_model(base: &ModelWeights, config: &TrainConfig) -> Result<ModelWeights> {
    let mut model = match config.identification_mode {
        IdentificationMode::Aligned => base.clone(),
        IdentificationMode::PaperLiteral => init_random(&base.config, config.seed ^ 0x5eed)?,
    };
    let n = model.config.d_model;
    if config.k > n {
        return Err(invalid(format!("rank k={} exceeds model dimension {n}", config.k)));
    }
    // Shared across tasks: the same seed gives every task the same start.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    for layer in model.layers.iter_mut() {
        for role in config.adapted_roles.roles() {
            *layer.attn_mut(role) = AttnWeight::Bottleneck(BottleneckPair::random(n, config.k, &mut rng));
        }
    }
    Ok(model)
}

/// Sequential identification: layers are unfrozen one at a time from the
/// first to the last, each trained to a validation plateau, restored to its
/// best snapshot and frozen again.
pub fn identify_subspace(
    base: &ModelWeights,
    task: &TaskDataset,
    config: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<TaskSubspace> {
    config.validate()?;
    let mut model = identification_model(base, config)?;
    let roles = config.adapted_roles.roles();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut meta = IdentificationMeta {
        mode: Some(config.identification_mode),
        ..Default::default()
    };
    for l in 0..model.layers.len() {
        let mask = FreezeMask::only(roles.iter().map(|&r| ParamGroup::Attention(l, r)));
        let out = run_stage(
            &mut model,
            &mask,
            Stage {
                name: format!("identify:{}", task.task()),
                layer: Some(l),
                step_size: config.step_size,
                batch_size: config.batch_size,
                max_epochs: config.max_epochs_per_layer,
                patience: config.patience,
                train: &task.train,
                val: &task.validation,
            },
            &mut rng,
            log,
        )?;
        if out.best_val >= out.initial_val {
            let w = format!(
                "layer {l}: validation loss never improved on {:.6}",
                out.initial_val
            );
            log::warn!("identify {}: {w}", task.task());
            meta.warnings.push(w);
        }
        meta.layer_order.push(l);
        meta.epochs_per_layer.push(out.epochs);
        meta.initial_val_losses.push(out.initial_val);
        meta.best_val_losses.push(out.best_val);
    }
    let layers = model
        .layers
        .iter()
        .map(|layer| {
            roles
                .iter()
                .map(|&r| match layer.attn(r) {
                    AttnWeight::Bottleneck(p) => (
                        r,
                        LayerFactor {
                            f: p.f.clone(),
                            g: p.g.clone(),
                            t: p.product(),
                        },
                    ),
                    _ => unreachable!("identification model carries bottlenecks on adapted roles"),
                })
                .collect()
        })
        .collect();
    Ok(TaskSubspace {
        task: task.task().name().to_string(),
        k: config.k,
        dim: model.config.d_model,
        roles,
        layers,
        meta,
    })
}

#[derive(Clone, Debug)]
pub struct AscentOutcome {
    pub weights: ModelWeights,
    pub steps: usize,
    pub converged: bool,
    pub final_val_accuracy: f64,
}

/// Baseline unlearning: ascend the target's loss over all parameters until
/// its validation accuracy drops to `stop_accuracy` or `max_steps` elapse.
pub fn gradient_ascent_unlearn(
    base: &ModelWeights,
    target: &TaskDataset,
    stop_accuracy: f64,
    max_steps: usize,
    config: &TrainConfig,
) -> Result<AscentOutcome> {
    config.validate()?;
    let base_acc = accuracy(base, &target.validation)?;
    if !(0.0..base_acc).contains(&stop_accuracy) {
        return Err(invalid(format!(
            "stop accuracy {stop_accuracy} must lie in [0, {base_acc}) (base validation accuracy)"
        )));
    }
    let mut weights = base.clone();
    let mask = FreezeMask::all_unfrozen(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(4);
    let mut order: Vec<usize> = (0..target.train.len()).collect();
    let mut cursor = order.len();
    let mut acc = base_acc;
    for step in 1..=max_steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<Example> = order[cursor..end].iter().map(|&i| target.train[i].clone()).collect();
        cursor = end;
        let (loss, mut grads) = weights.loss_and_grads(&batch, &mask)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                stage: "gradient-ascent".into(),
                message: format!("loss diverged to {loss} at step {step}"),
            });
        }
        grads.clip_global_norm(CLIP_NORM);
        weights.sgd_step(&grads, -config.step_size);
        acc = accuracy(&weights, &target.validation)?;
        if acc <= stop_accuracy {
            return Ok(AscentOutcome {
                weights,
                steps: step,
                converged: true,
                final_val_accuracy: acc,
            });
        }
    }
    Ok(AscentOutcome {
        weights,
        steps: max_steps,
        converged: false,
        final_val_accuracy: acc,
    })
}

/// Direct fine-tuning baseline: zero-initialized bottleneck adapters on top
/// of the frozen base attention, all layers trained jointly.
pub fn fine_tune_adapters(
    base: &ModelWeights,
    task: &TaskDataset,
    config: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<ModelWeights> {
    config.validate()?;
    let n = base.config.d_model;
    let mut model = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(5);
    let roles = config.adapted_roles.roles();
    let mut groups = Vec::new();
    for (l, layer) in model.layers.iter_mut().enumerate() {
        for &role in &roles {
            let base_w = match layer.attn(role) {
                AttnWeight::Dense(w) => w.clone(),
                other => {
                    return Err(invalid(format!(
                        "fine-tuning expects dense base attention, layer {l} {role} is {}",
                        other.kind()
                    )))
                }
            };
            *layer.attn_mut(role) = AttnWeight::Adapted {
                base: base_w,
                adapter: BottleneckPair::zero_product(n, config.k, &mut rng),
            };
            groups.push(ParamGroup::Attention(l, role));
        }
    }
    let mask = FreezeMask::only(groups);
    run_stage(
        &mut model,
        &mask,
        Stage {
            name: format!("finetune:{}", task.task()),
            layer: None,
            step_size: config.step_size,
            batch_size: config.batch_size,
            max_epochs: config.max_epochs_per_layer * base.layers.len(),
            patience: config.patience,
            train: &task.train,
            val: &task.validation,
        },
        &mut rng,
        log,
    )?;
    Ok(model)
}

/// Collapses adapted projections back to dense `W + F·G`.
pub fn merge_adapters(model: &ModelWeights) -> ModelWeights {
    let mut out = model.clone();
    for layer in out.layers.iter_mut() {
        for role in AttnRole::ALL {
            if let AttnWeight::Adapted { .. } = layer.attn(role) {
                let w = layer.attn(role).effective();
                *layer.attn_mut(role) = AttnWeight::Dense(w);
            }
        }
    }
    out
}

pub fn task_by_name<'a>(datasets: &'a [TaskDataset], kind: TaskKind) -> Result<&'a TaskDataset> {
    datasets
        .iter()
        .find(|d| d.task() == kind)
        .ok_or_else(|| invalid(format!("task `{kind}` is not in the suite")))
}
