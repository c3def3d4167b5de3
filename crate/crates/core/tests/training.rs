use std::sync::OnceLock;

use unlearn_core::linalg::{svd, DEFAULT_SVD_TOL};
use unlearn_core::model::{init_random, AttnRole, AttnWeight, FreezeMask, ModelConfig, ModelWeights, ParamGroup};
use unlearn_core::tasks::{accuracy, generate, TaskDataset, TaskKind, TaskSpec};
use unlearn_core::training::{
    fine_tune_adapters, gradient_ascent_unlearn, identify_subspace, merge_adapters, pretrain, AdaptedRoles,
    IdentificationMode, TrainConfig, TrainingLog,
};
use unlearn_core::Error;

fn model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        seed: 1,
        ..ModelConfig::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        step_size: 0.5,
        pretrain_step_size: 0.5,
        pretrain_max_epochs: 25,
        max_epochs_per_layer: 2,
        patience: 2,
        k: 3,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn dataset(task: TaskKind) -> TaskDataset {
    generate(&TaskSpec::new(task, 300, 5)).unwrap()
}

/// A small model pretrained on add and copy, shared across tests.
fn base() -> &'static (ModelWeights, Vec<TaskDataset>) {
    static BASE: OnceLock<(ModelWeights, Vec<TaskDataset>)> = OnceLock::new();
    BASE.get_or_init(|| {
        let data = vec![dataset(TaskKind::Add), dataset(TaskKind::Copy)];
        let m = pretrain(&train_config(), &data, &model_config(), &mut TrainingLog::default()).unwrap();
        (m, data)
    })
}

#[test]
fn zero_epoch_pretraining_returns_initial_weights() {
    let cfg = TrainConfig {
        pretrain_max_epochs: 0,
        ..train_config()
    };
    let data = vec![dataset(TaskKind::Add), dataset(TaskKind::Copy)];
    let m = pretrain(&cfg, &data, &model_config(), &mut TrainingLog::default()).unwrap();
    assert_eq!(m, init_random(&model_config(), model_config().seed).unwrap());
}

#[test]
fn pretraining_needs_two_tasks_and_reduces_loss() {
    let one = vec![dataset(TaskKind::Add)];
    assert!(pretrain(&train_config(), &one, &model_config(), &mut TrainingLog::default()).is_err());
    let (m, data) = base();
    let init = init_random(&model_config(), model_config().seed).unwrap();
    for d in data {
        assert!(m.loss(&d.validation).unwrap() < init.loss(&d.validation).unwrap());
    }
}

#[test]
fn divergence_is_a_training_error() {
    let cfg = TrainConfig {
        pretrain_step_size: 1e300,
        pretrain_max_epochs: 3,
        ..train_config()
    };
    let data = vec![dataset(TaskKind::Add), dataset(TaskKind::Copy)];
    let err = pretrain(&cfg, &data, &model_config(), &mut TrainingLog::default()).unwrap_err();
    assert!(matches!(err, Error::Training { .. }), "{err:?}");
}

#[test]
fn identification_is_deterministic_and_rank_bounded() {
    let (m, data) = base();
    let cfg = train_config();
    let mut log = TrainingLog::default();
    let a = identify_subspace(m, &data[0], &cfg, &mut log).unwrap();
    let b = identify_subspace(m, &data[0], &cfg, &mut TrainingLog::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_layers(), 2);
    assert_eq!(a.meta.layer_order, vec![0, 1]);
    assert_eq!(a.meta.mode, Some(IdentificationMode::Aligned));
    assert!(!log.records.is_empty());
    for layer in &a.layers {
        assert_eq!(layer.len(), 4);
        for f in layer.values() {
            assert_eq!(f.f.shape(), (16, 3));
            assert_eq!(f.g.shape(), (3, 16));
            assert!(svd(&f.t, DEFAULT_SVD_TOL).unwrap().rank() <= 3);
        }
    }
    // Best validation loss never exceeds the loss before that layer trained.
    for (best, init) in a.meta.best_val_losses.iter().zip(&a.meta.initial_val_losses) {
        assert!(best <= init);
    }
}

#[test]
fn restricted_roles_and_literal_mode() {
    let (m, data) = base();
    let cfg = TrainConfig {
        adapted_roles: AdaptedRoles::QueryValue,
        identification_mode: IdentificationMode::PaperLiteral,
        max_epochs_per_layer: 1,
        ..train_config()
    };
    let s = identify_subspace(m, &data[1], &cfg, &mut TrainingLog::default()).unwrap();
    assert_eq!(s.roles, vec![AttnRole::Q, AttnRole::V]);
    assert_eq!(s.meta.mode, Some(IdentificationMode::PaperLiteral));
}

#[test]
fn masked_updates_leave_frozen_groups_bit_identical() {
    let (m, data) = base();
    let mut edited = m.clone();
    let unfrozen = ParamGroup::Attention(1, AttnRole::V);
    let (_, grads) = edited
        .loss_and_grads(&data[0].train[..16], &FreezeMask::only([unfrozen]))
        .unwrap();
    edited.sgd_step(&grads, 0.5);
    for g in m.groups() {
        if g == unfrozen {
            assert_ne!(m.tensors(g), edited.tensors(g));
        } else {
            assert_eq!(m.tensors(g), edited.tensors(g), "{g}");
        }
    }
}

#[test]
fn fine_tuning_trains_only_adapters() {
    let (m, data) = base();
    let tuned = fine_tune_adapters(m, &data[0], &train_config(), &mut TrainingLog::default()).unwrap();
    for (l, (orig, new)) in m.layers.iter().zip(&tuned.layers).enumerate() {
        for role in [AttnRole::Q, AttnRole::K, AttnRole::V, AttnRole::O] {
            match (orig.attn(role), new.attn(role)) {
                (AttnWeight::Dense(w), AttnWeight::Adapted { base, .. }) => assert_eq!(w, base, "layer {l} {role}"),
                other => panic!("unexpected kinds {other:?}"),
            }
        }
    }
    for g in m.groups().into_iter().filter(|g| !g.is_attention()) {
        assert_eq!(m.tensors(g), tuned.tensors(g), "{g}");
    }
    let merged = merge_adapters(&tuned);
    let x = &data[0].test[..8];
    assert!((merged.loss(x).unwrap() - tuned.loss(x).unwrap()).abs() < 1e-10);
}

#[test]
fn gradient_ascent_stops_at_threshold() {
    let (m, data) = base();
    let add = &data[0];
    let base_acc = accuracy(m, &add.validation).unwrap();
    assert!(base_acc > 0.0, "base model never answers add correctly");
    let cfg = train_config();
    assert!(gradient_ascent_unlearn(m, add, base_acc, 5, &cfg).is_err());

    let out = gradient_ascent_unlearn(m, add, base_acc - 1e-9, 50, &cfg).unwrap();
    assert!(out.converged);
    assert!(out.steps <= 5, "took {} steps", out.steps);
    assert!(out.final_val_accuracy < base_acc);

    let none = gradient_ascent_unlearn(m, add, 0.0, 0, &cfg).unwrap();
    assert!(!none.converged);
    assert_eq!(none.weights, *m);
}
