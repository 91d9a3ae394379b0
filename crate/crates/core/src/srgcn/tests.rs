use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;
use crate::error::Error;
use crate::mesh::{SourceTag, SparseMeasurement, TetMesh};
use crate::tensor::{ParamStore, Tape, TensorId};

fn two_tets() -> TetMesh {
    TetMesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
        ],
        vec![[0, 1, 2, 3], [4, 1, 2, 3]],
    )
    .unwrap()
}

fn measurement(points: Vec<[f64; 3]>) -> SparseMeasurement {
    let n = points.len();
    SparseMeasurement::new(points, vec![SourceTag::Surface; n], vec![1.0; n], 0.0).unwrap()
}

fn tiny_config() -> SrGcnConfig {
    SrGcnConfig {
        hidden: 4,
        n_conv: 1,
        coord_scale: 1.0,
        ..SrGcnConfig::default()
    }
}

// ---------------------------------------------------------------- bases --

#[test]
fn bspline_linear_endpoint_and_midpoint() {
    let (idx, val) = bspline_basis(0.0, 1, 2).unwrap();
    assert_eq!(idx, vec![0, 1]);
    assert_eq!(val, vec![1.0, 0.0]);

    let (_, val) = bspline_basis(0.5, 1, 2).unwrap();
    assert_eq!(val, vec![0.5, 0.5]);

    let (idx, val) = bspline_basis(1.0, 1, 2).unwrap();
    assert_eq!(idx, vec![0, 1]);
    assert_eq!(val, vec![0.0, 1.0]);
}

#[test]
fn bspline_partition_of_unity_across_settings() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for degree in 1..=3usize {
        for kernel_size in (degree + 1)..=8 {
            for _ in 0..1000 {
                let u: f64 = rng.gen();
                let (idx, val) = bspline_basis(u, degree, kernel_size).unwrap();
                assert_eq!(idx.len(), degree + 1);
                assert_eq!(val.len(), degree + 1);
                assert!(idx.iter().all(|&i| i < kernel_size));
                assert!(val.iter().all(|&v| v >= -1e-15));
                let sum: f64 = val.iter().sum();
                assert!(
                    (sum - 1.0).abs() <= 1e-12,
                    "degree {degree} size {kernel_size} u {u}: sum {sum}"
                );
            }
        }
    }
}

#[test]
fn bspline_rejects_undersized_kernel() {
    assert!(bspline_basis(0.5, 2, 2).is_err());
}

// ----------------------------------------------------------- spline conv --

struct ConvFixture {
    store: ParamStore,
    dims: ConvDims,
}

fn conv_fixture(prefix: &str, in_c: usize, out_c: usize, kernel: usize, seed: u64) -> ConvFixture {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ConvDims {
        in_channels: in_c,
        out_channels: out_c,
        n_kernel: kernel,
    };
    init_conv_params(&mut store, &mut rng, prefix, dims).unwrap();
    ConvFixture { store, dims }
}

fn run_conv(
    fixture: &ConvFixture,
    prefix: &str,
    x: &[f64],
    n_nodes: usize,
    edges: &EdgeTensors,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &fixture.store, |_| false).unwrap();
    let xid = tape
        .constant(x.to_vec(), (n_nodes, fixture.dims.in_channels))
        .unwrap();
    let out = conv_forward(&mut tape, &ids, prefix, xid, edges).unwrap();
    tape.value(out).to_vec()
}

/// Independent dense reference: explicit loops over vertices, in-edges,
/// kernel cells, and channels.
fn naive_spline_conv(
    store: &ParamStore,
    prefix: &str,
    x: &[f64],
    n_nodes: usize,
    in_c: usize,
    out_c: usize,
    edges: &[[usize; 2]],
    edge_u: &[f64],
    degree: usize,
    kernel_size: usize,
) -> Vec<f64> {
    let w = |cell: usize| &store.get(&format!("{prefix}.w{cell:03}")).unwrap().data;
    let root = &store.get(&format!("{prefix}.root")).unwrap().data;
    let bias = &store.get(&format!("{prefix}.bias")).unwrap().data;
    let mut out = vec![0.0; n_nodes * out_c];
    for i in 0..n_nodes {
        for o in 0..out_c {
            let mut acc = bias[o];
            for c in 0..in_c {
                acc += x[i * in_c + c] * root[c * out_c + o];
            }
            out[i * out_c + o] = acc;
        }
    }
    for i in 0..n_nodes {
        let in_edges: Vec<usize> = (0..edges.len()).filter(|&e| edges[e][1] == i).collect();
        if in_edges.is_empty() {
            continue;
        }
        let mut msg = vec![0.0; out_c];
        for &e in &in_edges {
            let j = edges[e][0];
            let (idx, val) = bspline_basis(edge_u[e], degree, kernel_size).unwrap();
            for (cell, v) in idx.iter().zip(&val) {
                let wm = w(*cell);
                for o in 0..out_c {
                    for c in 0..in_c {
                        msg[o] += v * x[j * in_c + c] * wm[c * out_c + o];
                    }
                }
            }
        }
        for o in 0..out_c {
            out[i * out_c + o] += msg[o] / in_edges.len() as f64;
        }
    }
    out
}

#[test]
fn conv_identity_with_zero_weights_and_identity_root() {
    let n = 6;
    let c = 4;
    let mut store = ParamStore::new();
    for cell in 0..5 {
        store
            .insert(&format!("t.w{cell:03}"), (c, c), vec![0.0; c * c])
            .unwrap();
    }
    let mut eye = vec![0.0; c * c];
    for i in 0..c {
        eye[i * c + i] = 1.0;
    }
    store.insert("t.root", (c, c), eye).unwrap();
    store.insert("t.bias", (1, c), vec![0.0; c]).unwrap();

    let edges = vec![[0usize, 1], [1, 2], [2, 0], [3, 4]];
    let u = vec![0.3, 0.6, 0.9, 0.1];
    let et = EdgeTensors::new(&edges, &u, 1, 1, 5, n).unwrap();
    let fixture = ConvFixture {
        store,
        dims: ConvDims {
            in_channels: c,
            out_channels: c,
            n_kernel: 5,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out = run_conv(&fixture, "t", &x, n, &et);
    assert_eq!(out, x);
}

#[test]
fn conv_single_edge_at_zero_collapses_to_first_weight() {
    let fixture = conv_fixture("t", 3, 2, 5, 11);
    let mut store = fixture.store.clone();
    // zero the root and bias so only the message remains
    store.insert("t.root", (3, 2), vec![0.0; 6]).unwrap();
    store.insert("t.bias", (1, 2), vec![0.0; 2]).unwrap();
    let fixture = ConvFixture { store, dims: fixture.dims };

    let edges = vec![[0usize, 1]];
    let et = EdgeTensors::new(&edges, &[0.0], 1, 1, 5, 2).unwrap();
    let x = vec![0.7, -0.2, 0.4, 0.0, 0.0, 0.0];
    let out = run_conv(&fixture, "t", &x, 2, &et);

    let w0 = &fixture.store.get("t.w000").unwrap().data;
    for o in 0..2 {
        let want: f64 = (0..3).map(|c| x[c] * w0[c * 2 + o]).sum();
        assert!((out[2 + o] - want).abs() < 1e-15);
    }
    // vertex 0 has no in-edges and zero root/bias
    assert_eq!(&out[..2], &[0.0, 0.0]);
}

#[test]
fn conv_matches_naive_oracle_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..20 {
        let n = rng.gen_range(5..=20);
        let in_c = rng.gen_range(2..=5);
        let out_c = rng.gen_range(2..=5);
        let degree = rng.gen_range(1..=2);
        let kernel = degree + 1 + rng.gen_range(0..=3);
        let n_edges = rng.gen_range(0..=2 * n);
        let edges: Vec<[usize; 2]> = (0..n_edges)
            .map(|_| [rng.gen_range(0..n), rng.gen_range(0..n)])
            .collect();
        let u: Vec<f64> = (0..n_edges).map(|_| rng.gen()).collect();
        let x: Vec<f64> = (0..n * in_c).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(100 + trial);
        init_conv_params(
            &mut store,
            &mut prng,
            "t",
            ConvDims {
                in_channels: in_c,
                out_channels: out_c,
                n_kernel: kernel,
            },
        )
        .unwrap();
        // bias must participate: overwrite with non-zero values
        let bias: Vec<f64> = (0..out_c).map(|_| prng.gen_range(-0.5..0.5)).collect();
        store.insert("t.bias", (1, out_c), bias).unwrap();

        let et = EdgeTensors::new(&edges, &u, 1, degree, kernel, n).unwrap();
        let fixture = ConvFixture {
            store,
            dims: ConvDims {
                in_channels: in_c,
                out_channels: out_c,
                n_kernel: kernel,
            },
        };
        let got = run_conv(&fixture, "t", &x, n, &et);
        let want = naive_spline_conv(
            &fixture.store,
            "t",
            &x,
            n,
            in_c,
            out_c,
            &edges,
            &u,
            degree,
            kernel,
        );
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "trial {trial}: {g} vs {w}");
        }
    }
}

// ------------------------------------------------------------- forwards --

fn toy_scenario(cfg: &SrGcnConfig, opts: &TrainOptions) -> TrainScenario {
    let preop = two_tets();
    let mut gt = preop.clone();
    for v in gt.vertices.iter_mut() {
        v[0] += 0.08 * v[2];
        v[1] += 0.05 * v[0];
        v[2] += 0.06 * v[1];
    }
    let libr = preop.clone();
    let meas = measurement(vec![
        gt.vertices[1],
        gt.vertices[3],
        [0.4, 0.4, 0.45],
    ]);
    build_train_scenario("toy", &preop, &gt, &libr, &meas, &gt, cfg, opts).unwrap()
}

#[test]
fn bipartite_forward_shapes_and_depth_zero() {
    let cfg = SrGcnConfig {
        n_conv: 0,
        ..tiny_config()
    };
    let model = SrGcnModel::init(cfg.clone(), 1).unwrap();
    let sc = toy_scenario(&cfg, &TrainOptions::default());
    let bip = sc.bipartite.as_ref().unwrap();

    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &model.params, |_| false).unwrap();
    let (layers, y_b) = bipartite_forward(&mut tape, &ids, &cfg, bip).unwrap();
    assert_eq!(layers.len(), 1);
    assert_eq!(tape.shape(layers[0]), (bip.n_nodes(), cfg.hidden));
    assert_eq!(tape.shape(y_b), (bip.n_nodes(), 3));

    // depth zero means y_b = dec(elu(enc(attrs))) exactly
    let mut manual = Tape::new();
    let mids = bind_params(&mut manual, &model.params, |_| false).unwrap();
    let attrs = manual
        .constant(bip.attrs.clone(), (bip.n_nodes(), 3))
        .unwrap();
    let e = conv_forward(&mut manual, &mids, "b_enc", attrs, &bip.edges).unwrap();
    let e = manual.elu(e).unwrap();
    let want = conv_forward(&mut manual, &mids, "b_dec", e, &bip.edges).unwrap();
    assert_eq!(tape.value(y_b), manual.value(want));
}

#[test]
fn forward_shape_contract_across_layers() {
    let cfg = SrGcnConfig {
        hidden: 7,
        n_conv: 3,
        coord_scale: 1.0,
        ..SrGcnConfig::default()
    };
    let model = SrGcnModel::init(cfg.clone(), 2).unwrap();
    let sc = toy_scenario(&cfg, &TrainOptions::default());
    let bip = sc.bipartite.as_ref().unwrap();

    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &model.params, |_| false).unwrap();
    let (layers, _) = bipartite_forward(&mut tape, &ids, &cfg, bip).unwrap();
    assert_eq!(layers.len(), cfg.n_conv + 1);
    for &l in &layers {
        assert_eq!(tape.shape(l), (bip.n_nodes(), cfg.hidden));
    }
    let feats = bipartite_v_features(&mut tape, &layers[..cfg.n_conv], bip).unwrap();
    for &f in &feats {
        assert_eq!(tape.shape(f), (bip.v_indices.len(), cfg.hidden));
    }
    let y_v = mesh_forward(
        &mut tape,
        &ids,
        &cfg,
        &sc.mesh,
        Some((&feats, &bip.v_indices)),
    )
    .unwrap();
    assert_eq!(tape.shape(y_v), (sc.mesh.n_vertices, 3));
}

#[test]
fn zero_bipartite_features_halve_mesh_features() {
    let cfg = tiny_config();
    let model = SrGcnModel::init(cfg.clone(), 3).unwrap();
    let sc = toy_scenario(&cfg, &TrainOptions::default());
    let bip = sc.bipartite.as_ref().unwrap();
    let n_p = sc.mesh.n_vertices;

    let run = |v_rows: &[usize], n_v: usize| -> Vec<f64> {
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, &model.params, |_| false).unwrap();
        let zero = tape
            .constant(vec![0.0; n_v * cfg.hidden], (n_v, cfg.hidden))
            .unwrap();
        let y = mesh_forward(&mut tape, &ids, &cfg, &sc.mesh, Some((&[zero], v_rows))).unwrap();
        tape.value(y).to_vec()
    };
    let with_zero = run(&bip.v_indices, bip.v_indices.len());
    // empty v set: x-tilde is all zeros as well, so the result must match
    let with_empty = run(&[], 0);
    assert_eq!(with_zero, with_empty);

    // manual halving: x <- x/2 before the (single) convoluter
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &model.params, |_| false).unwrap();
    let attrs = tape.constant(sc.mesh.attrs.clone(), (n_p, 6)).unwrap();
    let x = conv_forward(&mut tape, &ids, "m_enc", attrs, &sc.mesh.edges).unwrap();
    let x = tape.elu(x).unwrap();
    let x = tape.scale(x, 0.5).unwrap();
    let x = conv_forward(&mut tape, &ids, "m_conv00", x, &sc.mesh.edges).unwrap();
    let x = tape.elu(x).unwrap();
    let want = conv_forward(&mut tape, &ids, "m_dec", x, &sc.mesh.edges).unwrap();
    assert_eq!(with_zero, tape.value(want));
}

// --------------------------------------------------------------- losses --

#[test]
fn loss_identities() {
    let cfg = tiny_config();
    let sc = toy_scenario(&cfg, &TrainOptions::default());
    let bip = sc.bipartite.as_ref().unwrap();
    let n_p = sc.mesh.n_vertices;
    let mut tape = Tape::new();

    // perfect reconstruction -> 0; constant offset delta -> delta^2
    let y_b = tape
        .constant(bip.attrs.clone(), (bip.n_nodes(), 3))
        .unwrap();
    let l = loss_bipartite(&mut tape, y_b, bip).unwrap();
    assert_eq!(tape.scalar(l).unwrap(), 0.0);
    let delta = 0.3;
    let shifted: Vec<f64> = bip.attrs.iter().map(|v| v + delta).collect();
    let y_b = tape.constant(shifted, (bip.n_nodes(), 3)).unwrap();
    let l = loss_bipartite(&mut tape, y_b, bip).unwrap();
    assert!((tape.scalar(l).unwrap() - delta * delta).abs() < 1e-12);

    // exact residual -> 0; zero prediction -> mean squared target
    let y_v = tape
        .constant(sc.residual_target.clone(), (n_p, 3))
        .unwrap();
    let l = loss_residual(&mut tape, y_v, &sc.residual_target, n_p).unwrap();
    assert_eq!(tape.scalar(l).unwrap(), 0.0);
    let zero = tape.constant(vec![0.0; n_p * 3], (n_p, 3)).unwrap();
    let l = loss_residual(&mut tape, zero, &sc.residual_target, n_p).unwrap();
    let want: f64 =
        sc.residual_target.iter().map(|v| v * v).sum::<f64>() / sc.residual_target.len() as f64;
    assert!((tape.scalar(l).unwrap() - want).abs() < 1e-15);
}

#[test]
fn loss_sparse_matches_direct_summation() {
    let cfg = tiny_config();
    let sc = toy_scenario(&cfg, &TrainOptions::default());
    let n_p = sc.mesh.n_vertices;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<f64> = (0..n_p * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let y_v = tape.constant(y.clone(), (n_p, 3)).unwrap();
    let l = loss_sparse(&mut tape, y_v, &sc.sparse_rows, &sc.sparse_target).unwrap();

    let mut want = 0.0;
    for (e, &v) in sc.sparse_rows.iter().enumerate() {
        let mut norm2 = 0.0;
        for c in 0..3 {
            let d = sc.sparse_target[e * 3 + c] - y[v * 3 + c];
            norm2 += d * d;
        }
        want += norm2;
    }
    want /= sc.sparse_rows.len() as f64;
    assert!((tape.scalar(l).unwrap() - want).abs() < 1e-13);

    // single perfect edge -> 0
    let rows = vec![sc.sparse_rows[0]];
    let mut target = vec![0.0; 3];
    target.copy_from_slice(&y[rows[0] * 3..rows[0] * 3 + 3]);
    let l = loss_sparse(&mut tape, y_v, &rows, &target).unwrap();
    assert_eq!(tape.scalar(l).unwrap(), 0.0);
}

#[test]
fn total_loss_lambda_behavior() {
    let cfg = tiny_config();
    let sc = toy_scenario(&cfg, &TrainOptions::default());
    let n_p = sc.mesh.n_vertices;
    let mut tape = Tape::new();
    let y_v = tape.constant(vec![0.1; n_p * 3], (n_p, 3)).unwrap();
    let l_res = loss_residual(&mut tape, y_v, &sc.residual_target, n_p).unwrap();
    let l_sp = loss_sparse(&mut tape, y_v, &sc.sparse_rows, &sc.sparse_target).unwrap();

    // lambda = 0 must be exactly the residual loss
    let zero = loss_total(&mut tape, l_res, Some(l_sp), 0.0).unwrap();
    assert_eq!(tape.scalar(zero).unwrap(), tape.scalar(l_res).unwrap());
    // monotone non-decreasing in lambda for fixed predictions
    let mut prev = tape.scalar(zero).unwrap();
    for lambda in [0.1, 1.0, 10.0] {
        let l = loss_total(&mut tape, l_res, Some(l_sp), lambda).unwrap();
        let v = tape.scalar(l).unwrap();
        assert!(v >= prev);
        prev = v;
    }
    // absent sparse term: identity
    let same = loss_total(&mut tape, l_res, None, 5.0).unwrap();
    assert_eq!(same, l_res);
}

// ------------------------------------------------------------ gradcheck --

/// Builds the full two-branch loss (L_m + bipartite reconstruction) so all
/// parameters influence the scalar output.
fn full_loss_graph(
    params: &ParamStore,
    cfg: &SrGcnConfig,
    sc: &TrainScenario,
    trainable: bool,
) -> (TensorId, Tape, BTreeMap<String, TensorId>) {
    let bip = sc.bipartite.as_ref().unwrap();
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params, |_| trainable).unwrap();
    let (layers, y_b) = bipartite_forward(&mut tape, &ids, cfg, bip).unwrap();
    let feats = bipartite_v_features(&mut tape, &layers[..cfg.n_conv], bip).unwrap();
    let y_v = mesh_forward(&mut tape, &ids, cfg, &sc.mesh, Some((&feats, &bip.v_indices))).unwrap();
    let l_res = loss_residual(&mut tape, y_v, &sc.residual_target, sc.mesh.n_vertices).unwrap();
    let l_sp = loss_sparse(&mut tape, y_v, &sc.sparse_rows, &sc.sparse_target).unwrap();
    let l_m = loss_total(&mut tape, l_res, Some(l_sp), 0.7).unwrap();
    let l_b = loss_bipartite(&mut tape, y_b, bip).unwrap();
    let total = tape.add(l_m, l_b).unwrap();
    (total, tape, ids)
}

fn full_loss_value(params: &ParamStore, cfg: &SrGcnConfig, sc: &TrainScenario) -> f64 {
    let (loss, tape, _) = full_loss_graph(params, cfg, sc, false);
    tape.scalar(loss).unwrap()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let model = SrGcnModel::init(cfg.clone(), 17).unwrap();
    let sc = toy_scenario(&cfg, &TrainOptions::default());

    let (loss, mut tape, ids) = full_loss_graph(&model.params, &cfg, &sc, true);
    tape.backward(loss).unwrap();

    let h = 1e-6;
    for (name, p) in &model.params.params {
        let analytic = tape.grad(ids[name]).unwrap().to_vec();
        for i in 0..p.data.len() {
            let mut plus = model.params.clone();
            plus.params.get_mut(name).unwrap().data[i] += h;
            let mut minus = model.params.clone();
            minus.params.get_mut(name).unwrap().data[i] -= h;
            let fd = (full_loss_value(&plus, &cfg, &sc) - full_loss_value(&minus, &cfg, &sc))
                / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "{name}[{i}]: analytic {a}, fd {fd}"
            );
        }
    }
}

// ------------------------------------------------------------- training --

fn overfit_options() -> TrainOptions {
    TrainOptions::default()
}

#[test]
fn two_stage_overfit_beats_baseline_and_improves_reconstruction() {
    let cfg = SrGcnConfig {
        hidden: 16,
        n_conv: 1,
        n_top: 1,
        lr: 3e-3,
        epochs_stage1: 400,
        epochs_stage2: 2000,
        coord_scale: 1.0,
        ..SrGcnConfig::default()
    };
    let opts = overfit_options();
    // Measurements sit exactly on deformed vertices and n_top = 1, so every
    // sparse target coincides with the dense residual target and the joint
    // optimum of the stage-2 loss is the exact residual field.
    let preop = two_tets();
    let mut gt = preop.clone();
    for v in gt.vertices.iter_mut() {
        v[0] += 0.08 * v[2];
        v[1] += 0.05 * v[0];
        v[2] += 0.06 * v[1];
    }
    let libr = preop.clone();
    let meas = measurement(vec![gt.vertices[1], gt.vertices[3], gt.vertices[4]]);
    let sc = build_train_scenario("toy", &preop, &gt, &libr, &meas, &gt, &cfg, &opts).unwrap();
    let baseline = scenario_tre(&vec![0.0; sc.mesh.n_vertices * 3], &sc);
    assert!(baseline > 0.0);

    let (model, records) = train_two_stage(&cfg, &opts, &[sc.clone()], &[], 5).unwrap();

    // stage-1 reconstruction improved by 10x over its initial value
    let stage1: Vec<&TrainRecord> = records.iter().filter(|r| r.stage == 1).collect();
    assert_eq!(stage1.len(), cfg.epochs_stage1);
    assert!(
        stage1.last().unwrap().loss < 0.1 * stage1[0].loss,
        "stage-1 {} -> {}",
        stage1[0].loss,
        stage1.last().unwrap().loss
    );

    // overfit: training TRE well below the physics-prior baseline
    let y = forward_y(&model, &opts, &sc.mesh, sc.bipartite.as_ref()).unwrap();
    let tre = scenario_tre(&y, &sc);
    assert!(
        tre < 0.1 * baseline,
        "TRE {tre} vs baseline {baseline}"
    );

    // per-epoch records carry the loss decomposition
    let last2 = records.iter().rev().find(|r| r.stage == 2).unwrap();
    assert!(last2.loss_residual.is_some() && last2.loss_sparse.is_some());
}

#[test]
fn relu_activation_runs_and_differs_from_elu() {
    let mut cfg = tiny_config();
    let opts = TrainOptions::default();
    let sc = toy_scenario(&cfg, &opts);
    let model_elu = SrGcnModel::init(cfg.clone(), 3).unwrap();
    let y_elu = forward_y(&model_elu, &opts, &sc.mesh, sc.bipartite.as_ref()).unwrap();

    cfg.activation = Activation::Relu;
    let model_relu = SrGcnModel::init(cfg, 3).unwrap();
    let y_relu = forward_y(&model_relu, &opts, &sc.mesh, sc.bipartite.as_ref()).unwrap();

    assert_eq!(y_elu.len(), y_relu.len());
    assert!(y_relu.iter().all(|v| v.is_finite()));
    assert!(y_elu.iter().zip(&y_relu).any(|(a, b)| (a - b).abs() > 1e-12));
}

#[test]
fn stage_two_freezes_bipartite_parameters() {
    let mut cfg = tiny_config();
    cfg.epochs_stage1 = 3;
    cfg.epochs_stage2 = 0;
    let opts = TrainOptions::default();
    let sc = toy_scenario(&cfg, &opts);
    let (after_stage1, _) = train_two_stage(&cfg, &opts, &[sc.clone()], &[], 9).unwrap();

    cfg.epochs_stage2 = 4;
    let (after_stage2, _) = train_two_stage(&cfg, &opts, &[sc.clone()], &[], 9).unwrap();

    let mut mesh_changed = false;
    for (name, p) in &after_stage1.params.params {
        let q = after_stage2.params.get(name).unwrap();
        if name.starts_with(BIPARTITE_PREFIX) {
            assert_eq!(p.data, q.data, "bipartite parameter {name} changed");
        } else if p.data != q.data {
            mesh_changed = true;
        }
    }
    assert!(mesh_changed, "stage 2 did not update mesh parameters");
}

#[test]
fn nan_loss_aborts_with_context() {
    let cfg = tiny_config();
    let opts = TrainOptions {
        use_bipartite: false,
        use_sparse: false,
        ..TrainOptions::default()
    };
    let mut sc = toy_scenario(&cfg, &TrainOptions::default());
    sc.bipartite = None;
    sc.sparse_rows.clear();
    sc.sparse_target.clear();
    sc.residual_target[0] = f64::NAN;
    match train_two_stage(&cfg, &opts, &[sc], &[], 1) {
        Err(Error::NanLoss {
            stage: 2,
            epoch: 0,
            step: 0,
        }) => {}
        other => panic!("expected NaN-loss abort, got {other:?}"),
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = SrGcnConfig {
        epochs_stage1: 3,
        epochs_stage2: 3,
        ..tiny_config()
    };
    let opts = TrainOptions::default();
    let sc = toy_scenario(&cfg, &opts);
    let (a, ra) = train_two_stage(&cfg, &opts, &[sc.clone()], &[sc.clone()], 123).unwrap();
    let (b, rb) = train_two_stage(&cfg, &opts, &[sc.clone()], &[sc], 123).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ra, rb);
}

#[test]
fn zero_decoder_model_predicts_the_base_mesh() {
    let cfg = tiny_config();
    let mut model = SrGcnModel::init(cfg.clone(), 4).unwrap();
    let names: Vec<String> = model
        .params
        .params
        .keys()
        .filter(|n| n.starts_with("m_dec"))
        .cloned()
        .collect();
    for n in names {
        let p = model.params.params.get_mut(&n).unwrap();
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }

    let preop = two_tets();
    let mut gt = preop.clone();
    for v in gt.vertices.iter_mut() {
        v[2] += 0.05;
    }
    let libr = preop.clone();
    let meas = measurement(vec![gt.vertices[0], gt.vertices[4]]);
    let opts = TrainOptions::default();
    let registered = predict_residual(&model, &opts, &preop, &libr, &meas, &gt).unwrap();
    assert_eq!(registered.vertices, libr.vertices);
    assert_eq!(registered.tets, libr.tets);
}

#[test]
fn model_checkpoint_round_trips() {
    let cfg = tiny_config();
    let model = SrGcnModel::init(cfg, 21).unwrap();
    let opts = TrainOptions {
        use_sparse: false,
        ..TrainOptions::default()
    };
    let dir = tempdir().unwrap();
    let stem = dir.path().join("model");
    save_model(&stem, &model, &opts, Some("abc123")).unwrap();
    let (loaded, lopts, hash) = load_model(&stem).unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(loaded.config, model.config);
    assert_eq!(lopts, opts);
    assert_eq!(hash.as_deref(), Some("abc123"));
}

#[test]
fn train_log_is_line_delimited() {
    let records = vec![
        TrainRecord {
            stage: 1,
            epoch: 0,
            loss: 0.5,
            loss_residual: None,
            loss_sparse: None,
            val_tre: None,
        },
        TrainRecord {
            stage: 2,
            epoch: 0,
            loss: 0.25,
            loss_residual: Some(0.2),
            loss_sparse: Some(0.05),
            val_tre: Some(1.5),
        },
    ];
    let dir = tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    save_train_log(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed: Vec<TrainRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed, records);
}
