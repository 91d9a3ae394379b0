//! Two-stage SR-GCN training.
//!
//! Stage 1 fits the bipartite branch with its self-supervised
//! reconstruction loss. Stage 2 freezes those parameters — the bipartite
//! features of every scenario are computed once and cached as constants —
//! and fits the mesh branch on the residual (plus optional sparse) loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::io::atomic_write_bytes;
use crate::tensor::{adam_step, AdamState, ParamStore, Tape, TensorId};

use super::{
    bind_params, bipartite_forward, bipartite_v_features, collect_grads, loss_bipartite,
    loss_residual, loss_sparse, loss_total, mesh_forward, scenario_tre, SrGcnConfig, SrGcnModel,
    TrainOptions, TrainScenario, BIPARTITE_PREFIX, MESH_PREFIX,
};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Mean total loss over the epoch's scenarios.
    pub loss: f64,
    pub loss_residual: Option<f64>,
    pub loss_sparse: Option<f64>,
    pub val_tre: Option<f64>,
}

/// Writes the training log as line-delimited records.
pub fn save_train_log(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    atomic_write_bytes(path, out.as_bytes())
}

/// Cached per-layer bipartite v-features of one scenario (`n_conv` layers,
/// each row-major `N_v x hidden`).
type CachedFeats = Option<Vec<Vec<f64>>>;

fn cache_bipartite_features(
    params: &ParamStore,
    cfg: &SrGcnConfig,
    sc: &TrainScenario,
) -> Result<CachedFeats> {
    let Some(bip) = &sc.bipartite else {
        return Ok(None);
    };
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params, |_| false)?;
    let (layers, _) = bipartite_forward(&mut tape, &ids, cfg, bip)?;
    let feats = bipartite_v_features(&mut tape, &layers[..cfg.n_conv], bip)?;
    Ok(Some(
        feats.iter().map(|&id| tape.value(id).to_vec()).collect(),
    ))
}

/// Mesh-branch forward with cached bipartite features bound as constants.
fn mesh_forward_cached(
    tape: &mut Tape,
    ids: &std::collections::BTreeMap<String, TensorId>,
    cfg: &SrGcnConfig,
    sc: &TrainScenario,
    cached: &CachedFeats,
) -> Result<TensorId> {
    match (cached, &sc.bipartite) {
        (Some(fv), Some(bip)) => {
            let n_v = bip.v_indices.len();
            let feat_ids: Vec<TensorId> = fv
                .iter()
                .map(|v| tape.constant(v.clone(), (n_v, cfg.hidden)))
                .collect::<Result<_>>()?;
            mesh_forward(tape, ids, cfg, &sc.mesh, Some((&feat_ids, &bip.v_indices)))
        }
        _ => mesh_forward(tape, ids, cfg, &sc.mesh, None),
    }
}

/// Trains a model on `train`, validating on `val` after every stage-2
/// epoch. Returns the model at the best validation TRE (the final model if
/// `val` is empty) together with the per-epoch training log.
pub fn train_two_stage(
    cfg: &SrGcnConfig,
    opts: &TrainOptions,
    train: &[TrainScenario],
    val: &[TrainScenario],
    seed: u64,
) -> Result<(SrGcnModel, Vec<TrainRecord>)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training scenarios"));
    }
    let mut model = SrGcnModel::init(cfg.clone(), seed)?;
    let mut records = Vec::new();

    if opts.use_bipartite {
        let is_bip = |n: &str| n.starts_with(BIPARTITE_PREFIX);
        let mut adam = AdamState::new(cfg.lr);
        for epoch in 0..cfg.epochs_stage1 {
            let mut total = 0.0;
            for (step, sc) in train.iter().enumerate() {
                let bip = sc.bipartite.as_ref().ok_or_else(|| {
                    Error::invalid(format!("scenario {:?} lacks a bipartite graph", sc.name))
                })?;
                let mut tape = Tape::new();
                let ids = bind_params(&mut tape, &model.params, is_bip)?;
                let (_, y_b) = bipartite_forward(&mut tape, &ids, cfg, bip)?;
                let loss = loss_bipartite(&mut tape, y_b, bip)?;
                let value = tape.scalar(loss)?;
                if !value.is_finite() {
                    return Err(Error::NanLoss {
                        stage: 1,
                        epoch,
                        step,
                    });
                }
                tape.backward(loss)?;
                let grads = collect_grads(&tape, &ids, is_bip);
                adam_step(&mut model.params, &grads, &mut adam)?;
                total += value;
            }
            records.push(TrainRecord {
                stage: 1,
                epoch,
                loss: total / train.len() as f64,
                loss_residual: None,
                loss_sparse: None,
                val_tre: None,
            });
        }
    }

    // Stage 2: bipartite parameters are frozen; cache their features once.
    let train_feats: Vec<CachedFeats> = if opts.use_bipartite {
        train
            .iter()
            .map(|sc| cache_bipartite_features(&model.params, cfg, sc))
            .collect::<Result<_>>()?
    } else {
        vec![None; train.len()]
    };
    let val_feats: Vec<CachedFeats> = if opts.use_bipartite {
        val.iter()
            .map(|sc| cache_bipartite_features(&model.params, cfg, sc))
            .collect::<Result<_>>()?
    } else {
        vec![None; val.len()]
    };

    let is_mesh = |n: &str| n.starts_with(MESH_PREFIX);
    let mut adam = AdamState::new(cfg.lr);
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..cfg.epochs_stage2 {
        let mut sum_total = 0.0;
        let mut sum_res = 0.0;
        let mut sum_sparse = 0.0;
        for (step, sc) in train.iter().enumerate() {
            let mut tape = Tape::new();
            let ids = bind_params(&mut tape, &model.params, is_mesh)?;
            let y_v = mesh_forward_cached(&mut tape, &ids, cfg, sc, &train_feats[step])?;
            let l_res = loss_residual(&mut tape, y_v, &sc.residual_target, sc.mesh.n_vertices)?;
            let l_sp = if opts.use_sparse && !sc.sparse_rows.is_empty() {
                Some(loss_sparse(
                    &mut tape,
                    y_v,
                    &sc.sparse_rows,
                    &sc.sparse_target,
                )?)
            } else {
                None
            };
            let loss = loss_total(&mut tape, l_res, l_sp, cfg.lambda_sparse)?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::NanLoss {
                    stage: 2,
                    epoch,
                    step,
                });
            }
            sum_total += value;
            sum_res += tape.scalar(l_res)?;
            if let Some(ls) = l_sp {
                sum_sparse += tape.scalar(ls)?;
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &ids, is_mesh);
            adam_step(&mut model.params, &grads, &mut adam)?;
        }

        let val_tre = if val.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for (i, sc) in val.iter().enumerate() {
                let mut tape = Tape::new();
                let ids = bind_params(&mut tape, &model.params, |_| false)?;
                let y_v = mesh_forward_cached(&mut tape, &ids, cfg, sc, &val_feats[i])?;
                let y_mm: Vec<f64> = tape
                    .value(y_v)
                    .iter()
                    .map(|v| v / cfg.coord_scale)
                    .collect();
                sum += scenario_tre(&y_mm, sc);
            }
            Some(sum / val.len() as f64)
        };
        if let Some(v) = val_tre {
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
            }
        }

        let n = train.len() as f64;
        records.push(TrainRecord {
            stage: 2,
            epoch,
            loss: sum_total / n,
            loss_residual: Some(sum_res / n),
            loss_sparse: opts.use_sparse.then_some(sum_sparse / n),
            val_tre,
        });
    }

    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, records))
}
