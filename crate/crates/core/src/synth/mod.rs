//! Synthetic scenario generation: organ-like geometries, nonlinear
//! ground-truth deformations, and sparse intraoperative measurement
//! sampling at the supported sparsity tiers.

pub mod corotational;
mod dataset;
pub mod icosphere;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::Material;
use crate::mesh::{extract_surface, knn, SourceTag, SparseMeasurement, TetMesh};
use crate::registration::support_patch;

pub use corotational::{solve_corotational, NewtonReport, NewtonSettings};
pub use dataset::{
    build_dataset, load_manifest, load_spec_doc, manifest_hash, save_manifest, save_spec_doc,
    tier_schedule, verify_manifest, DatasetConfig, DatasetManifest, ScenarioEntry, SpecDoc,
    GT_FILE, LIBR_FILE, MANIFEST_NAME, MEAS_FILE, PREOP_FILE, SPEC_FILE,
};
pub use icosphere::{icosphere, layered_ball, pick_resolution};

/// Fraction of surface vertices (lowest z) held fixed during ground-truth
/// deformation solves; matches the deformation-basis support convention.
pub const GT_SUPPORT_FRACTION: f64 = 0.10;
/// Fraction of surface vertices in the salient ridge patch.
pub const SALIENT_FRACTION: f64 = 0.05;
/// Correspondence weight boost for measurement points on the salient patch.
pub const SALIENT_WEIGHT: f64 = 2.0;

const MESH_DIAMETER_MM: f64 = 150.0;
/// Raw area-weighted surface samples drawn before voxel thinning.
const SURFACE_RAW_SAMPLES: usize = 600;
/// Voxel thinning targets roughly this many surface points.
const SURFACE_TARGET_POINTS: f64 = 150.0;
/// Arc-length spacing of points along plane cross-section curves (mm).
const PLANE_POINT_SPACING_MM: f64 = 4.0;

/// Deformation pattern family of a ground-truth solve.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum DeformationPattern {
    /// Distributed lateral push on the -x surface third.
    L,
    /// Distributed lateral push on the +x surface third.
    R,
    /// Combined lift and twist of the anterior surface.
    W,
    /// Broad anterior traction (open-surgery analog).
    V,
}

impl DeformationPattern {
    pub const ALL: [DeformationPattern; 4] = [
        DeformationPattern::L,
        DeformationPattern::R,
        DeformationPattern::W,
        DeformationPattern::V,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DeformationPattern::L => "L",
            DeformationPattern::R => "R",
            DeformationPattern::W => "W",
            DeformationPattern::V => "V",
        }
    }
}

impl fmt::Display for DeformationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeformationPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(DeformationPattern::L),
            "R" => Ok(DeformationPattern::R),
            "W" => Ok(DeformationPattern::W),
            "V" => Ok(DeformationPattern::V),
            other => Err(Error::invalid(format!(
                "unknown deformation pattern {other:?} (expected L, R, W or V)"
            ))),
        }
    }
}

/// Measurement sparsity tier: how many subsurface cross-section planes
/// augment the visible-surface point cloud.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum SparsityTier {
    #[serde(rename = "surface_only")]
    SurfaceOnly,
    #[serde(rename = "1_plane")]
    Planes1,
    #[serde(rename = "2_planes")]
    Planes2,
    #[serde(rename = "3_planes")]
    Planes3,
    #[serde(rename = "16_planes")]
    Planes16,
}

impl SparsityTier {
    pub const ALL: [SparsityTier; 5] = [
        SparsityTier::SurfaceOnly,
        SparsityTier::Planes1,
        SparsityTier::Planes2,
        SparsityTier::Planes3,
        SparsityTier::Planes16,
    ];

    pub fn plane_count(&self) -> usize {
        match self {
            SparsityTier::SurfaceOnly => 0,
            SparsityTier::Planes1 => 1,
            SparsityTier::Planes2 => 2,
            SparsityTier::Planes3 => 3,
            SparsityTier::Planes16 => 16,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SparsityTier::SurfaceOnly => "surface_only",
            SparsityTier::Planes1 => "1_plane",
            SparsityTier::Planes2 => "2_planes",
            SparsityTier::Planes3 => "3_planes",
            SparsityTier::Planes16 => "16_planes",
        }
    }
}

impl fmt::Display for SparsityTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SparsityTier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SparsityTier::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sparsity tier {s:?}")))
    }
}

/// Full provenance of one synthetic scenario; every random choice derives
/// from the two seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub geometry_seed: u64,
    pub deformation_pattern: DeformationPattern,
    /// Peak prescribed displacement as a fraction of the mesh diameter.
    pub deformation_magnitude: f64,
    pub sparsity_tier: SparsityTier,
    /// Fraction of the surface area visible to the surface point cloud.
    pub surface_visible_fraction: f64,
    /// Isotropic measurement noise (mm).
    pub noise_sigma: f64,
    pub scenario_seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.deformation_magnitude > 0.0 && self.deformation_magnitude <= 0.3) {
            return Err(Error::invalid(format!(
                "deformation_magnitude must be in (0, 0.3], got {}",
                self.deformation_magnitude
            )));
        }
        if !(self.surface_visible_fraction > 0.0 && self.surface_visible_fraction <= 0.5) {
            return Err(Error::invalid(format!(
                "surface_visible_fraction must be in (0, 0.5], got {}",
                self.surface_visible_fraction
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Independent deterministic random stream `stream` of a seed.
fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a parent seed and two labels (splitmix64).
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
        z = x ^ (x >> 31);
    }
    z
}

/// Generates a star-shaped organ-like blob: a layered icosphere ball whose
/// radius is modulated by a random low-order smooth function (at most 35%),
/// scaled to a 150 mm diameter, with a contiguous high-curvature ridge
/// marked salient (~5% of surface vertices).
pub fn gen_geometry(seed: u64, target_vertex_count: usize) -> Result<TetMesh> {
    if !(200..=5000).contains(&target_vertex_count) {
        return Err(Error::invalid(format!(
            "target_vertex_count must be in [200, 5000], got {target_vertex_count}"
        )));
    }
    let (subdiv, shells) = pick_resolution(target_vertex_count);
    let mut rng = substream(seed, 0);

    // Bandlimited random modulation: a handful of low-order directional
    // monomials, normalized so the largest deviation equals the drawn depth.
    let n_terms = 6;
    let mut terms: Vec<([f64; 3], u32, f64)> = Vec::with_capacity(n_terms);
    for _ in 0..n_terms {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let power = rng.gen_range(1..=3u32);
        let amp = rng.gen_range(-1.0..1.0);
        terms.push((dir, power, amp));
    }
    let raw = move |n: &[f64; 3]| -> f64 {
        terms
            .iter()
            .map(|(d, p, a)| a * (d[0] * n[0] + d[1] * n[1] + d[2] * n[2]).powi(*p as i32))
            .sum()
    };
    let depth = rng.gen_range(0.15..=0.35);
    let sphere = icosphere(subdiv);
    let max_abs = sphere
        .directions
        .iter()
        .map(|d| raw(d).abs())
        .fold(0.0f64, f64::max);
    let gain = if max_abs > 0.0 { depth / max_abs } else { 0.0 };
    let nominal = MESH_DIAMETER_MM / 2.0;
    let radius = move |n: &[f64; 3]| nominal * (1.0 + gain * raw(n));

    let mut mesh = layered_ball(subdiv, shells, radius)
        .map_err(|e| Error::MeshGen {
            seed,
            detail: e.to_string(),
        })?;

    // Exact diameter normalization.
    let d = mesh.diameter();
    let scale = MESH_DIAMETER_MM / d;
    for v in mesh.vertices.iter_mut() {
        for c in v.iter_mut() {
            *c *= scale;
        }
    }

    mesh.salient_mask = salient_ridge(&mesh)?;
    Ok(mesh)
}

/// Grows a contiguous ridge of the most protruding surface vertices:
/// seeded at the maximum-radius vertex, greedily absorbing the
/// largest-radius frontier neighbor.
fn salient_ridge(mesh: &TetMesh) -> Result<Vec<bool>> {
    let surface = mesh.surface_vertices();
    if surface.is_empty() {
        return Err(Error::EmptyInput("surface vertices"));
    }
    let radius = |v: usize| -> f64 {
        let p = &mesh.vertices[v];
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    };
    let adj = mesh.surface_adjacency()?;
    let target = ((surface.len() as f64 * SALIENT_FRACTION).round() as usize).max(1);

    let seed_vertex = surface
        .iter()
        .copied()
        .max_by(|&a, &b| {
            radius(a)
                .partial_cmp(&radius(b))
                .unwrap()
                .then(b.cmp(&a))
        })
        .unwrap();

    let mut patch = BTreeSet::from([seed_vertex]);
    let mut frontier: BTreeSet<usize> = adj[seed_vertex].iter().copied().collect();
    while patch.len() < target {
        let Some(next) = frontier
            .iter()
            .copied()
            .max_by(|&a, &b| radius(a).partial_cmp(&radius(b)).unwrap().then(b.cmp(&a)))
        else {
            break;
        };
        frontier.remove(&next);
        patch.insert(next);
        for &nb in &adj[next] {
            if !patch.contains(&nb) {
                frontier.insert(nb);
            }
        }
    }

    let mut mask = vec![false; mesh.vertex_count()];
    for v in patch {
        mask[v] = true;
    }
    Ok(mask)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn rotate_about(axis: [f64; 3], angle: f64, v: [f64; 3]) -> [f64; 3] {
    let rot = nalgebra::Rotation3::from_axis_angle(
        &nalgebra::Unit::new_normalize(nalgebra::Vector3::from(axis)),
        angle,
    );
    let out = rot * nalgebra::Vector3::from(v);
    [out[0], out[1], out[2]]
}

/// Pattern-specific prescribed displacements (vertex -> displacement); the
/// peak magnitude over the driven set equals `peak` exactly.
fn pattern_displacements(
    mesh: &TetMesh,
    pattern: DeformationPattern,
    peak: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, [f64; 3])>> {
    let surface = mesh.surface_vertices();
    let xs: Vec<f64> = surface.iter().map(|&v| mesh.vertices[v][0]).collect();
    let zs: Vec<f64> = surface.iter().map(|&v| mesh.vertices[v][2]).collect();
    let (x_min, x_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let z_max = zs.iter().fold(f64::NEG_INFINITY, |hi, &z| hi.max(z));
    let mut zs_sorted = zs.clone();
    zs_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Small random tilt of the loading direction so ground truths differ
    // across geometries beyond the shared pattern template.
    let jitter_axis: [f64; 3] = UnitSphere.sample(rng);
    let jitter_angle = rng.gen_range(0.0..0.08);
    let tilt = |v: [f64; 3]| rotate_about(jitter_axis, jitter_angle, v);

    let centroid = {
        let mut c = [0.0f64; 3];
        for p in &mesh.vertices {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        for a in c.iter_mut() {
            *a /= mesh.vertex_count() as f64;
        }
        c
    };

    let mut driven = Vec::new();
    match pattern {
        DeformationPattern::L | DeformationPattern::R => {
            let range = x_max - x_min;
            let dir = if pattern == DeformationPattern::L {
                tilt([1.0, 0.0, 0.0])
            } else {
                tilt([-1.0, 0.0, 0.0])
            };
            for &v in &surface {
                let x = mesh.vertices[v][0];
                let w = if pattern == DeformationPattern::L {
                    let thr = x_min + range / 3.0;
                    if x <= thr {
                        (thr - x) / (thr - x_min)
                    } else {
                        continue;
                    }
                } else {
                    let thr = x_max - range / 3.0;
                    if x >= thr {
                        (x - thr) / (x_max - thr)
                    } else {
                        continue;
                    }
                };
                let w = w * w;
                driven.push((v, [dir[0] * peak * w, dir[1] * peak * w, dir[2] * peak * w]));
            }
        }
        DeformationPattern::W => {
            let z_lo = quantile(&zs_sorted, 0.4);
            if z_max - z_lo <= 1e-9 {
                return Err(Error::DegenerateConfiguration {
                    context: "anterior surface has no vertical extent".into(),
                });
            }
            let lift = tilt([0.0, 0.0, 1.0]);
            let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
            for &v in &surface {
                let p = mesh.vertices[v];
                if p[2] < z_lo {
                    continue;
                }
                let t = (p[2] - z_lo) / (z_max - z_lo);
                let r = [p[0] - centroid[0], p[1] - centroid[1], 0.0];
                let tan = [-r[1], r[0], 0.0];
                let tan_norm = (tan[0] * tan[0] + tan[1] * tan[1]).sqrt();
                let e_t = if tan_norm > 1e-12 {
                    tilt([tan[0] / tan_norm, tan[1] / tan_norm, 0.0])
                } else {
                    [0.0; 3]
                };
                let d = [
                    peak * t * inv_sqrt2 * (lift[0] + e_t[0]),
                    peak * t * inv_sqrt2 * (lift[1] + e_t[1]),
                    peak * t * inv_sqrt2 * (lift[2] + e_t[2]),
                ];
                driven.push((v, d));
            }
        }
        DeformationPattern::V => {
            let z_lo = quantile(&zs_sorted, 0.5);
            if z_max - z_lo <= 1e-9 {
                return Err(Error::DegenerateConfiguration {
                    context: "anterior surface has no vertical extent".into(),
                });
            }
            let dir = tilt([0.0, 0.0, 1.0]);
            for &v in &surface {
                let p = mesh.vertices[v];
                if p[2] < z_lo {
                    continue;
                }
                let t = (p[2] - z_lo) / (z_max - z_lo);
                driven.push((v, [dir[0] * peak * t, dir[1] * peak * t, dir[2] * peak * t]));
            }
        }
    }
    if driven.is_empty() {
        return Err(Error::DegenerateConfiguration {
            context: "deformation pattern drives no surface vertices".into(),
        });
    }
    Ok(driven)
}

/// Material used for every synthetic ground-truth solve. The basis-span
/// property is scale-invariant in the modulus, so only the Poisson ratio
/// shapes the fields.
pub fn gt_material() -> Material {
    Material::new(3.0e3, 0.45).expect("static material parameters are valid")
}

/// Solves a geometrically nonlinear (corotational) quasi-static deformation
/// of `mesh` under a pattern-specific prescribed-displacement loading with
/// peak `magnitude * diameter`, holding the lowest-z support patch fixed.
pub fn gen_gt_deformation(
    mesh: &TetMesh,
    pattern: DeformationPattern,
    magnitude: f64,
    seed: u64,
) -> Result<TetMesh> {
    if !(magnitude > 0.0 && magnitude <= 0.3) {
        return Err(Error::invalid(format!(
            "magnitude must be in (0, 0.3], got {magnitude}"
        )));
    }
    let diameter = mesh.diameter();
    let peak = magnitude * diameter;
    let mut rng = substream(seed, 1);

    let support = support_patch(mesh, GT_SUPPORT_FRACTION);
    let support_set: BTreeSet<usize> = support.iter().copied().collect();
    let driven = pattern_displacements(mesh, pattern, peak, &mut rng)?;

    let mut constraints = std::collections::BTreeMap::new();
    for &v in &support {
        for a in 0..3 {
            constraints.insert(3 * v + a, 0.0);
        }
    }
    for (v, d) in driven {
        if support_set.contains(&v) {
            continue; // the fixed support wins where the patches overlap
        }
        for a in 0..3 {
            constraints.insert(3 * v + a, d[a]);
        }
    }

    let settings = NewtonSettings {
        load_steps: ((magnitude / 0.05).ceil() as usize).max(1),
        ..NewtonSettings::default()
    };
    let (u, _report) = solve_corotational(mesh, &gt_material(), &constraints, &settings)?;

    // Reject inverted elements before constructing the result (TetMesh
    // construction would silently repair orientation).
    for (i, tet) in mesh.tets.iter().enumerate() {
        let pos = |v: usize| -> [f64; 3] {
            [
                mesh.vertices[v][0] + u[3 * v],
                mesh.vertices[v][1] + u[3 * v + 1],
                mesh.vertices[v][2] + u[3 * v + 2],
            ]
        };
        let vol = crate::mesh::signed_volume(&pos(tet[0]), &pos(tet[1]), &pos(tet[2]), &pos(tet[3]));
        if vol <= 0.0 {
            return Err(Error::InvertedElement { element: i });
        }
    }
    crate::registration::apply_deformation(mesh, &u)
}

/// Samples sparse intraoperative-style measurements of the deformed mesh:
/// a contiguous anterior surface patch plus cross-section outlines of
/// random cut planes per sparsity tier, with isotropic Gaussian noise.
pub fn sample_measurements(gt: &TetMesh, spec: &ScenarioSpec) -> Result<SparseMeasurement> {
    spec.validate()?;
    let (faces, _) = extract_surface(gt)?;
    let surface = gt.surface_vertices();

    let face_area = |f: &[usize; 3]| -> f64 {
        let (a, b, c) = (gt.vertices[f[0]], gt.vertices[f[1]], gt.vertices[f[2]]);
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = [
            ab[1] * ac[2] - ab[2] * ac[1],
            ab[2] * ac[0] - ab[0] * ac[2],
            ab[0] * ac[1] - ab[1] * ac[0],
        ];
        0.5 * (cx[0] * cx[0] + cx[1] * cx[1] + cx[2] * cx[2]).sqrt()
    };
    let areas: Vec<f64> = faces.iter().map(face_area).collect();
    let total_area: f64 = areas.iter().sum();

    // --- contiguous anterior patch ----------------------------------------
    let pole = surface
        .iter()
        .copied()
        .max_by(|&a, &b| {
            gt.vertices[a][2]
                .partial_cmp(&gt.vertices[b][2])
                .unwrap()
                .then(b.cmp(&a))
        })
        .ok_or(Error::EmptyInput("surface vertices"))?;
    let geo = gt.surface_geodesic(&[pole])?;

    let mut vertex_area = vec![0.0f64; gt.vertex_count()];
    for (f, &area) in faces.iter().zip(&areas) {
        for &v in f {
            vertex_area[v] += area / 3.0;
        }
    }
    let mut order: Vec<usize> = surface.clone();
    order.sort_by(|&a, &b| geo[a].partial_cmp(&geo[b]).unwrap().then(a.cmp(&b)));
    let mut patch: BTreeSet<usize> = BTreeSet::new();
    let mut acc = 0.0;
    let patch_target = spec.surface_visible_fraction * total_area;
    for v in order {
        if acc >= patch_target {
            break;
        }
        patch.insert(v);
        acc += vertex_area[v];
    }
    let patch_faces: Vec<usize> = (0..faces.len())
        .filter(|&i| faces[i].iter().all(|v| patch.contains(v)))
        .collect();
    if patch_faces.is_empty() {
        return Err(Error::EmptyInput("visible surface patch"));
    }
    let patch_area: f64 = patch_faces.iter().map(|&i| areas[i]).sum();

    // Area-weighted raw samples, then voxel thinning to roughly uniform
    // coverage. The representative-point thinning keeps samples exactly on
    // the surface.
    let mut rng = substream(spec.scenario_seed, 10);
    let mut cumulative = Vec::with_capacity(patch_faces.len());
    let mut run = 0.0;
    for &i in &patch_faces {
        run += areas[i];
        cumulative.push(run);
    }
    let mut raw = Vec::with_capacity(SURFACE_RAW_SAMPLES);
    for _ in 0..SURFACE_RAW_SAMPLES {
        let pick = rng.gen_range(0.0..run);
        let k = cumulative.partition_point(|&c| c <= pick);
        let f = faces[patch_faces[k.min(patch_faces.len() - 1)]];
        let (mut s, mut t) = (rng.gen::<f64>(), rng.gen::<f64>());
        if s + t > 1.0 {
            s = 1.0 - s;
            t = 1.0 - t;
        }
        let (a, b, c) = (gt.vertices[f[0]], gt.vertices[f[1]], gt.vertices[f[2]]);
        raw.push([
            a[0] + s * (b[0] - a[0]) + t * (c[0] - a[0]),
            a[1] + s * (b[1] - a[1]) + t * (c[1] - a[1]),
            a[2] + s * (b[2] - a[2]) + t * (c[2] - a[2]),
        ]);
    }
    let spacing = (patch_area / SURFACE_TARGET_POINTS).sqrt();
    let surface_points = crate::mesh::downsample_points(&raw, spacing)?;

    let mut points = surface_points.clone();
    let mut tags = vec![SourceTag::Surface; points.len()];

    // --- subsurface cross-section planes -----------------------------------
    let centroid = {
        let mut c = [0.0f64; 3];
        for p in &gt.vertices {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|x| x / gt.vertex_count() as f64)
    };
    let diameter = gt.diameter();
    for plane in 0..spec.sparsity_tier.plane_count() {
        let mut prng = substream(spec.scenario_seed, 100 + plane as u64);
        let normal: [f64; 3] = UnitSphere.sample(&mut prng);
        let shift_dir: [f64; 3] = UnitSphere.sample(&mut prng);
        let shift = prng.gen_range(0.0..0.15 * diameter);
        let q = [
            centroid[0] + shift * shift_dir[0],
            centroid[1] + shift * shift_dir[1],
            centroid[2] + shift * shift_dir[2],
        ];
        let sd = |v: usize| -> f64 {
            let p = gt.vertices[v];
            normal[0] * (p[0] - q[0]) + normal[1] * (p[1] - q[1]) + normal[2] * (p[2] - q[2])
        };
        for f in &faces {
            let mut cuts: Vec<[f64; 3]> = Vec::with_capacity(2);
            for (u, v) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let (su, sv) = (sd(u), sd(v));
                if su == 0.0 {
                    cuts.push(gt.vertices[u]);
                } else if su * sv < 0.0 {
                    let t = su / (su - sv);
                    let (a, b) = (gt.vertices[u], gt.vertices[v]);
                    cuts.push([
                        a[0] + t * (b[0] - a[0]),
                        a[1] + t * (b[1] - a[1]),
                        a[2] + t * (b[2] - a[2]),
                    ]);
                }
            }
            cuts.dedup_by(|a, b| a == b);
            if cuts.len() == 2 {
                let (a, b) = (cuts[0], cuts[1]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2))
                    .sqrt();
                let n_pts = ((len / PLANE_POINT_SPACING_MM).floor() as usize).max(1);
                for j in 0..n_pts {
                    let t = (j as f64 + 0.5) / n_pts as f64;
                    points.push([
                        a[0] + t * (b[0] - a[0]),
                        a[1] + t * (b[1] - a[1]),
                        a[2] + t * (b[2] - a[2]),
                    ]);
                    tags.push(SourceTag::UsPlane(plane as u32));
                }
            }
        }
    }

    // --- weights: salient surface points count double ----------------------
    let surface_positions: Vec<[f64; 3]> = surface.iter().map(|&v| gt.vertices[v]).collect();
    let nearest = knn(&points, &surface_positions, 1)?;
    let weights: Vec<f64> = points
        .iter()
        .zip(&tags)
        .zip(&nearest)
        .map(|((_, tag), nb)| {
            if *tag == SourceTag::Surface && gt.salient_mask[surface[nb[0]]] {
                SALIENT_WEIGHT
            } else {
                1.0
            }
        })
        .collect();

    // --- isotropic Gaussian noise, norm-truncated so every point stays
    // within 3.9 sigma of its true location -------------------------------
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        let mut nrng = substream(spec.scenario_seed, 20);
        let cap = 3.9 * spec.noise_sigma;
        for p in points.iter_mut() {
            let g = [
                normal.sample(&mut nrng),
                normal.sample(&mut nrng),
                normal.sample(&mut nrng),
            ];
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let s = if n > cap { cap / n } else { 1.0 };
            for a in 0..3 {
                p[a] += s * g[a];
            }
        }
    }

    SparseMeasurement::new(points, tags, weights, spec.noise_sigma)
}
