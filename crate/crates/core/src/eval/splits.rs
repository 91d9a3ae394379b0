//! Deterministic train/test splits over a dataset manifest.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{DatasetManifest, DeformationPattern, ScenarioEntry};

/// How train and test scenarios are selected from a manifest.
///
/// Every strategy except `External4V` splits the main grid (geometries
/// `1..=n_geometries`); scenarios of the external holdout geometry never
/// enter those splits. `External4V` tests on the external geometry and
/// trains on the entire main grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Shuffle the main grid and hold out `test_fraction` of it.
    Random { test_fraction: f64 },
    /// Hold out whole (geometry, pattern) cells.
    GeometryDeformationHoldout {
        holdout: Vec<(u32, DeformationPattern)>,
    },
    /// Hold out every scenario of one geometry.
    GeometryHoldout { geometry: u32 },
    /// Test on the external geometry, train on the whole main grid.
    #[serde(rename = "external_4v")]
    External4V,
}

/// A named, seeded split selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Identifier used in result tables and artifact paths.
    pub name: String,
    pub strategy: SplitStrategy,
    /// Shuffle seed; only the random strategy consumes it.
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("split name must not be empty"));
        }
        if !self
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::invalid(format!(
                "split name {:?} may only contain ASCII alphanumerics, '-' and '_'",
                self.name
            )));
        }
        match &self.strategy {
            SplitStrategy::Random { test_fraction } => {
                if !(test_fraction.is_finite() && *test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::invalid(format!(
                        "random split test_fraction must lie in (0, 1), got {test_fraction}"
                    )));
                }
            }
            SplitStrategy::GeometryDeformationHoldout { holdout } => {
                if holdout.is_empty() {
                    return Err(Error::invalid(
                        "geometry_deformation_holdout needs at least one held-out cell",
                    ));
                }
            }
            SplitStrategy::GeometryHoldout { .. } | SplitStrategy::External4V => {}
        }
        Ok(())
    }
}

/// Disjoint train/test scenario lists, both in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<ScenarioEntry>,
    pub test: Vec<ScenarioEntry>,
}

/// Partitions the manifest's scenarios into train and test sets.
///
/// Deterministic: the same manifest and spec always produce the same split,
/// and both output lists preserve manifest order.
pub fn make_splits(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n_main = manifest.config.n_geometries as u32;
    let mut main: Vec<ScenarioEntry> = Vec::new();
    let mut external: Vec<ScenarioEntry> = Vec::new();
    for entry in &manifest.scenarios {
        if entry.geometry <= n_main {
            main.push(entry.clone());
        } else {
            external.push(entry.clone());
        }
    }

    let (train, test) = match &spec.strategy {
        SplitStrategy::Random { test_fraction } => {
            if main.len() < 2 {
                return Err(Error::invalid(format!(
                    "random split needs at least 2 main-grid scenarios, got {}",
                    main.len()
                )));
            }
            let mut order: Vec<usize> = (0..main.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            order.shuffle(&mut rng);
            let n_test = ((main.len() as f64) * test_fraction).round() as usize;
            let n_test = n_test.clamp(1, main.len() - 1);
            let test_set: BTreeSet<usize> = order[..n_test].iter().copied().collect();
            partition_by(main, |i, _| test_set.contains(&i))
        }
        SplitStrategy::GeometryDeformationHoldout { holdout } => {
            let cells: BTreeSet<(u32, DeformationPattern)> = holdout.iter().copied().collect();
            for &(g, p) in holdout {
                if g > n_main {
                    return Err(Error::invalid(format!(
                        "held-out cell ({g}, {p}) names geometry {g} outside the main grid \
                         (1..={n_main})"
                    )));
                }
            }
            partition_by(main, |_, e| {
                cells.contains(&(e.geometry, e.spec.deformation_pattern))
            })
        }
        SplitStrategy::GeometryHoldout { geometry } => {
            if *geometry == 0 || *geometry > n_main {
                return Err(Error::invalid(format!(
                    "geometry_holdout geometry {geometry} outside the main grid (1..={n_main})"
                )));
            }
            partition_by(main, |_, e| e.geometry == *geometry)
        }
        SplitStrategy::External4V => (main, external),
    };

    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!(
            "split {:?} left train ({}) or test ({}) empty",
            spec.name,
            train.len(),
            test.len()
        )));
    }
    Ok(Split { train, test })
}

fn partition_by(
    entries: Vec<ScenarioEntry>,
    mut is_test: impl FnMut(usize, &ScenarioEntry) -> bool,
) -> (Vec<ScenarioEntry>, Vec<ScenarioEntry>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, e) in entries.into_iter().enumerate() {
        if is_test(i, &e) {
            test.push(e);
        } else {
            train.push(e);
        }
    }
    (train, test)
}
