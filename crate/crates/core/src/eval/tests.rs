//! Unit tests for metrics, splits, tables, the ablation grid and the
//! master configuration.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::eval::ablation::{AblationInputs, AblationSetting, Supervision};
use crate::eval::metrics::{mean_std, split_errors, tre, tre_split};
use crate::eval::pipeline::{
    file_id, load_config, save_config, CorrespondenceTarget, MasterConfig, OutPaths,
};
use crate::eval::splits::{make_splits, SplitSpec, SplitStrategy};
use crate::eval::tables::{emit_jsonl, emit_text, load_table, parse_jsonl, save_table, ResultRow};
use crate::mesh::TetMesh;
use crate::srgcn::{ResidualBase, TrainOptions};
use crate::synth::{
    DatasetConfig, DatasetManifest, DeformationPattern, ScenarioEntry, ScenarioSpec, SparsityTier,
};
use crate::testutil::bar_mesh;

// ---------------------------------------------------------------- metrics

fn offset_mesh(mesh: &TetMesh, d: [f64; 3]) -> TetMesh {
    let mut out = mesh.clone();
    for v in out.vertices.iter_mut() {
        for a in 0..3 {
            v[a] += d[a];
        }
    }
    out
}

#[test]
fn tre_of_identical_meshes_is_zero() {
    let mesh = bar_mesh(2, 1, 1);
    let r = tre(&mesh, &mesh).unwrap();
    assert_eq!(r.mean, 0.0);
    assert_eq!(r.std, 0.0);
    assert!(r.per_vertex.iter().all(|&e| e == 0.0));
}

#[test]
fn tre_of_uniform_offset_is_the_offset() {
    let mesh = bar_mesh(2, 1, 1);
    let moved = offset_mesh(&mesh, [2.0, 0.0, 0.0]);
    let r = tre(&moved, &mesh).unwrap();
    assert!((r.mean - 2.0).abs() < 1e-15, "mean {}", r.mean);
    assert!(r.std.abs() < 1e-15, "std {}", r.std);
}

#[test]
fn tre_matches_independent_summation() {
    let mesh = bar_mesh(2, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut moved = mesh.clone();
    for v in moved.vertices.iter_mut() {
        for a in 0..3 {
            v[a] += rng.gen_range(-0.5..0.5);
        }
    }
    let r = tre(&moved, &mesh).unwrap();
    let expected: f64 = mesh
        .vertices
        .iter()
        .zip(&moved.vertices)
        .map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / mesh.vertex_count() as f64;
    assert!((r.mean - expected).abs() < 1e-12);
}

#[test]
fn tre_rejects_topology_mismatch() {
    let a = bar_mesh(1, 1, 1);
    let b = bar_mesh(2, 1, 1);
    assert!(matches!(tre(&a, &b), Err(Error::TopologyMismatch { .. })));
}

#[test]
fn mean_std_population_oracle() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert!((m - 2.5).abs() < 1e-15);
    assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[]), (0.0, 0.0));
}

#[test]
fn tre_split_uniform_offset_has_equal_classes() {
    // a 2x2x2 bar has exactly one interior vertex
    let mesh = bar_mesh(2, 2, 2);
    assert!(mesh.surface_vertex_mask.iter().any(|&s| !s));
    let moved = offset_mesh(&mesh, [0.0, 2.0, 0.0]);
    let s = tre_split(&moved, &mesh).unwrap();
    assert!((s.edge.unwrap() - 2.0).abs() < 1e-15);
    assert!((s.inner.unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn tre_split_all_surface_mesh_has_no_inner() {
    let mesh = bar_mesh(1, 1, 1);
    assert!(mesh.surface_vertex_mask.iter().all(|&s| s));
    let moved = offset_mesh(&mesh, [1.0, 0.0, 0.0]);
    let s = tre_split(&moved, &mesh).unwrap();
    assert!(s.edge.is_some());
    assert!(s.inner.is_none());
}

#[test]
fn split_errors_recomputes_masked_means() {
    let per_vertex = [1.0, 2.0, 3.0, 4.0];
    let mask = [true, false, true, false];
    let s = split_errors(&per_vertex, &mask);
    assert!((s.edge.unwrap() - 2.0).abs() < 1e-15);
    assert!((s.inner.unwrap() - 3.0).abs() < 1e-15);
    let all_surface = split_errors(&per_vertex, &[true; 4]);
    assert!(all_surface.inner.is_none());
}

// ----------------------------------------------------------------- splits

fn dummy_spec(pattern: DeformationPattern, tier: SparsityTier) -> ScenarioSpec {
    ScenarioSpec {
        geometry_seed: 1,
        deformation_pattern: pattern,
        deformation_magnitude: 0.1,
        sparsity_tier: tier,
        surface_visible_fraction: 0.25,
        noise_sigma: 0.0,
        scenario_seed: 2,
    }
}

/// Manifest shaped like a real dataset but with empty hashes: geometries
/// `1..=n` under the given patterns plus an external geometry `n + 1`
/// under pattern V.
fn fake_manifest(n_geometries: usize, per_cell: u32) -> DatasetManifest {
    let config = DatasetConfig {
        n_geometries,
        scenarios_per_cell: per_cell as usize,
        ..DatasetConfig::default()
    };
    let mut scenarios = Vec::new();
    let mut cells: Vec<(u32, DeformationPattern)> = Vec::new();
    for g in 1..=n_geometries as u32 {
        for p in [
            DeformationPattern::L,
            DeformationPattern::R,
            DeformationPattern::W,
        ] {
            cells.push((g, p));
        }
    }
    cells.push((n_geometries as u32 + 1, DeformationPattern::V));
    for (g, p) in cells {
        for idx in 0..per_cell {
            let tier = SparsityTier::ALL[idx as usize % 5];
            scenarios.push(ScenarioEntry {
                geometry: g,
                pattern: p,
                index: idx,
                spec: dummy_spec(p, tier),
                dir: format!("{g}/{p}/{idx}"),
                hashes: Default::default(),
            });
        }
    }
    DatasetManifest {
        format_version: "1".to_string(),
        config,
        scenarios,
    }
}

fn ids(entries: &[ScenarioEntry]) -> BTreeSet<String> {
    entries.iter().map(|e| e.id()).collect()
}

#[test]
fn random_split_partitions_the_main_grid() {
    let manifest = fake_manifest(3, 4); // 36 main + 4 external
    let spec = SplitSpec {
        name: "random".to_string(),
        strategy: SplitStrategy::Random { test_fraction: 0.25 },
        seed: 5,
    };
    let split = make_splits(&manifest, &spec).unwrap();
    assert_eq!(split.test.len(), 9);
    assert_eq!(split.train.len(), 27);
    let train = ids(&split.train);
    let test = ids(&split.test);
    assert!(train.is_disjoint(&test));
    let main: BTreeSet<String> = manifest
        .scenarios
        .iter()
        .filter(|e| e.geometry <= 3)
        .map(|e| e.id())
        .collect();
    let union: BTreeSet<String> = train.union(&test).cloned().collect();
    assert_eq!(union, main, "external scenarios must stay out");

    // deterministic under the same seed, different under another
    let again = make_splits(&manifest, &spec).unwrap();
    assert_eq!(again.train, split.train);
    assert_eq!(again.test, split.test);
    let other = make_splits(
        &manifest,
        &SplitSpec {
            seed: 6,
            ..spec.clone()
        },
    )
    .unwrap();
    assert_ne!(ids(&other.test), test);
}

#[test]
fn random_split_default_fraction_on_full_grid() {
    let manifest = fake_manifest(3, 20); // the standard 180 + 20 external
    let spec = SplitSpec {
        name: "r".to_string(),
        strategy: SplitStrategy::Random { test_fraction: 0.2 },
        seed: 1,
    };
    let split = make_splits(&manifest, &spec).unwrap();
    assert_eq!(split.train.len() + split.test.len(), 180);
    assert_eq!(split.test.len(), 36);
}

#[test]
fn geometry_holdout_excludes_the_geometry_from_training() {
    let manifest = fake_manifest(3, 2);
    let spec = SplitSpec {
        name: "gh".to_string(),
        strategy: SplitStrategy::GeometryHoldout { geometry: 2 },
        seed: 0,
    };
    let split = make_splits(&manifest, &spec).unwrap();
    assert!(split.train.iter().all(|e| e.geometry != 2 && e.geometry <= 3));
    assert!(split.test.iter().all(|e| e.geometry == 2));
    assert_eq!(split.test.len(), 6);
    assert_eq!(split.train.len(), 12);
}

#[test]
fn geometry_deformation_holdout_selects_cells() {
    let manifest = fake_manifest(3, 2);
    let spec = SplitSpec {
        name: "gdh".to_string(),
        strategy: SplitStrategy::GeometryDeformationHoldout {
            holdout: vec![
                (1, DeformationPattern::L),
                (3, DeformationPattern::W),
            ],
        },
        seed: 0,
    };
    let split = make_splits(&manifest, &spec).unwrap();
    assert_eq!(split.test.len(), 4);
    assert!(split
        .test
        .iter()
        .all(|e| (e.geometry, e.pattern) == (1, DeformationPattern::L)
            || (e.geometry, e.pattern) == (3, DeformationPattern::W)));
    assert_eq!(split.train.len(), 14);
    assert!(split.train.iter().all(|e| e.geometry <= 3));
}

#[test]
fn external_split_tests_on_the_held_out_geometry() {
    let manifest = fake_manifest(3, 2);
    let spec = SplitSpec {
        name: "ext".to_string(),
        strategy: SplitStrategy::External4V,
        seed: 0,
    };
    let split = make_splits(&manifest, &spec).unwrap();
    assert_eq!(split.train.len(), 18);
    assert!(split.train.iter().all(|e| e.geometry <= 3));
    assert_eq!(split.test.len(), 2);
    assert!(split
        .test
        .iter()
        .all(|e| e.geometry == 4 && e.pattern == DeformationPattern::V));
}

#[test]
fn splits_reject_invalid_requests() {
    let manifest = fake_manifest(3, 2);
    let bad_geometry = SplitSpec {
        name: "g".to_string(),
        strategy: SplitStrategy::GeometryHoldout { geometry: 4 },
        seed: 0,
    };
    assert!(make_splits(&manifest, &bad_geometry).is_err());
    let zero_geometry = SplitSpec {
        name: "g".to_string(),
        strategy: SplitStrategy::GeometryHoldout { geometry: 0 },
        seed: 0,
    };
    assert!(make_splits(&manifest, &zero_geometry).is_err());

    let bad_fraction = SplitSpec {
        name: "r".to_string(),
        strategy: SplitStrategy::Random { test_fraction: 1.0 },
        seed: 0,
    };
    assert!(bad_fraction.validate().is_err());
    let empty_holdout = SplitSpec {
        name: "gdh".to_string(),
        strategy: SplitStrategy::GeometryDeformationHoldout { holdout: vec![] },
        seed: 0,
    };
    assert!(empty_holdout.validate().is_err());
    let bad_name = SplitSpec {
        name: "has space".to_string(),
        strategy: SplitStrategy::External4V,
        seed: 0,
    };
    assert!(bad_name.validate().is_err());
}

#[test]
fn external_split_requires_external_scenarios() {
    let mut manifest = fake_manifest(2, 2);
    manifest.scenarios.retain(|e| e.geometry <= 2);
    let spec = SplitSpec {
        name: "ext".to_string(),
        strategy: SplitStrategy::External4V,
        seed: 0,
    };
    assert!(make_splits(&manifest, &spec).is_err());
}

// ----------------------------------------------------------------- tables

fn sample_rows() -> Vec<ResultRow> {
    vec![
        ResultRow {
            method: "libr".to_string(),
            split: "random".to_string(),
            tier: None,
            mean_tre: 0.1 + 0.2, // deliberately awkward binary float
            std_tre: 1e-17,
            edge_tre: Some(2.0 / 3.0),
            inner_tre: None,
            runtime_s: None,
        },
        ResultRow {
            method: "libr_plus".to_string(),
            split: "random".to_string(),
            tier: Some(SparsityTier::Planes16),
            mean_tre: 12345.678_901,
            std_tre: 0.0,
            edge_tre: None,
            inner_tre: Some(3.25),
            runtime_s: Some(0.125),
        },
    ]
}

#[test]
fn tables_round_trip_exactly() {
    let rows = sample_rows();
    let text = emit_jsonl(&rows).unwrap();
    let back = parse_jsonl(&text).unwrap();
    assert_eq!(back, rows, "JSONL must round-trip every bit");
}

#[test]
fn table_text_rendering_is_complete() {
    let rows = sample_rows();
    let text = emit_text(&rows);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2 + rows.len(), "header, rule, one line per row");
    assert!(lines[0].contains("method"));
    assert!(lines[2].contains("libr"));
    assert!(lines[2].contains('-'), "missing optionals render as dashes");
    assert!(lines[3].contains("16_planes"));
}

#[test]
fn tables_save_and_load_via_files() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sample_rows();
    save_table(dir.path(), "results", &rows).unwrap();
    assert!(dir.path().join("results.txt").exists());
    let back = load_table(&dir.path().join("results.jsonl")).unwrap();
    assert_eq!(back, rows);
}

#[test]
fn table_rows_are_validated() {
    let mut bad = sample_rows();
    bad[0].mean_tre = f64::NAN;
    assert!(emit_jsonl(&bad).is_err());
    let mut empty = sample_rows();
    empty[0].method.clear();
    assert!(emit_jsonl(&empty).is_err());
}

// ---------------------------------------------------------------- ablation

#[test]
fn ablation_grid_is_the_canonical_six() {
    let grid = AblationSetting::grid();
    assert_eq!(grid.len(), 6);
    for (i, setting) in grid.iter().enumerate() {
        assert_eq!(setting.index as usize, i + 1);
        assert_eq!(setting.label(), format!("setting_{}", i + 1));
    }
    assert_eq!(grid[0].inputs, AblationInputs::PreopOnly);
    assert_eq!(grid[0].supervision, Supervision::Gt);
    assert!(!grid[0].sparse);
    assert_eq!(grid[5].inputs, AblationInputs::Bipartite);
    assert_eq!(grid[5].supervision, Supervision::Residual);
    assert!(grid[5].sparse);
}

#[test]
fn full_method_setting_matches_default_options() {
    let grid = AblationSetting::grid();
    assert_eq!(grid[5].train_options(), TrainOptions::default());
}

#[test]
fn ablation_toggles_map_to_train_options() {
    let grid = AblationSetting::grid();
    let s1 = grid[0].train_options();
    assert!(!s1.use_bipartite);
    assert!(!s1.attrs_include_libr);
    assert_eq!(s1.base, ResidualBase::Preop);
    assert!(!s1.use_sparse);

    let s2 = grid[1].train_options();
    assert_eq!(s2.base, ResidualBase::Libr);
    assert!(!s2.use_bipartite);

    let s3 = grid[2].train_options();
    assert!(s3.attrs_include_libr);
    assert!(!s3.use_bipartite);

    let s4 = grid[3].train_options();
    assert!(s4.use_bipartite);
    assert!(!s4.use_sparse);

    let s5 = grid[4].train_options();
    assert_eq!(s5.base, ResidualBase::Preop);
    assert!(s5.use_sparse);
}

// ------------------------------------------------------------ master config

#[test]
fn default_config_is_valid() {
    let cfg = MasterConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.splits.len(), 4);
    assert_eq!(cfg.correspondence_target, CorrespondenceTarget::Gt);
}

#[test]
fn config_rejects_bad_fields() {
    let mut cfg = MasterConfig::default();
    cfg.format_version = "2".to_string();
    assert!(cfg.validate().is_err());

    let mut cfg = MasterConfig::default();
    cfg.splits[1].name = cfg.splits[0].name.clone();
    assert!(cfg.validate().is_err());

    let mut cfg = MasterConfig::default();
    cfg.val_fraction = 0.6;
    assert!(cfg.validate().is_err());

    let mut cfg = MasterConfig::default();
    cfg.lambda_sweep = vec![-1.0];
    assert!(cfg.validate().is_err());

    let mut cfg = MasterConfig::default();
    cfg.wicp.max_iter = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn config_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.doc");
    let mut cfg = MasterConfig::default();
    cfg.seed = 99;
    cfg.correspondence_target = CorrespondenceTarget::Libr;
    cfg.lambda_sweep = vec![0.5];
    save_config(&path, &cfg).unwrap();
    let back = load_config(&path).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn config_rejects_unknown_fields() {
    let mut value = serde_json::to_value(MasterConfig::default()).unwrap();
    value
        .as_object_mut()
        .unwrap()
        .insert("not_a_field".to_string(), serde_json::json!(1));
    assert!(serde_json::from_value::<MasterConfig>(value).is_err());
}

#[test]
fn partial_config_documents_fill_defaults() {
    let cfg: MasterConfig = serde_json::from_str(r#"{"seed": 42}"#).unwrap();
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.val_fraction, MasterConfig::default().val_fraction);
    cfg.validate().unwrap();
}

// ----------------------------------------------------------------- layout

#[test]
fn out_paths_follow_the_documented_layout() {
    let out = OutPaths::new("/tmp/exp");
    let entry = &fake_manifest(1, 1).scenarios[0];
    assert_eq!(file_id(entry), "1_L_0");
    assert!(out.basis(2).ends_with("basis/g2.doc"));
    assert!(out
        .prediction("random", entry)
        .ends_with("predictions/random/1_L_0.mesh"));
    assert!(out
        .error_field("random", entry)
        .ends_with("errors/random/1_L_0.doc"));
    assert!(out.tables_dir().ends_with("tables"));
    assert!(out.config().ends_with("config.doc"));
}
