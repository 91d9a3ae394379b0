//! Exact nearest-neighbor queries and one-shot voxel down-sampling.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mesh::dist2;

/// Exact k-nearest-neighbor indices for every query point.
///
/// Indices are sorted by ascending Euclidean distance; ties resolve to the
/// lower reference index so results are reproducible across platforms.
pub fn knn(query: &[[f64; 3]], reference: &[[f64; 3]], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("knn: k must be >= 1"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("knn reference points"));
    }
    if k > reference.len() {
        return Err(Error::invalid(format!(
            "knn: k = {k} exceeds reference size {}",
            reference.len()
        )));
    }
    for p in query.iter().chain(reference.iter()) {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("knn: non-finite coordinate"));
        }
    }

    let mut out = Vec::with_capacity(query.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for q in query {
        scratch.clear();
        scratch.extend(reference.iter().enumerate().map(|(i, r)| (dist2(q, r), i)));
        scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(scratch[..k].iter().map(|&(_, i)| i).collect());
    }
    Ok(out)
}

/// One-shot voxel-grid down-sampling.
///
/// Space is partitioned into cubes of edge `target_spacing` anchored at the
/// cloud's bounding-box minimum; the point nearest each occupied cube's
/// centroid is kept. Output follows ascending cube lexicographic order.
pub fn downsample_points(cloud: &[[f64; 3]], target_spacing: f64) -> Result<Vec<[f64; 3]>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    if !(target_spacing > 0.0) {
        return Err(Error::invalid(format!(
            "downsample: target_spacing must be > 0, got {target_spacing}"
        )));
    }
    let mut lo = [f64::INFINITY; 3];
    for p in cloud {
        for a in 0..3 {
            if !p[a].is_finite() {
                return Err(Error::invalid("downsample: non-finite coordinate"));
            }
            lo[a] = lo[a].min(p[a]);
        }
    }

    let cube_of = |p: &[f64; 3]| -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = ((p[a] - lo[a]) / target_spacing).floor() as i64;
        }
        c
    };

    let mut cubes: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.iter().enumerate() {
        cubes.entry(cube_of(p)).or_default().push(i);
    }

    let mut out = Vec::with_capacity(cubes.len());
    for members in cubes.values() {
        let mut centroid = [0.0f64; 3];
        for &i in members {
            for a in 0..3 {
                centroid[a] += cloud[i][a];
            }
        }
        for c in &mut centroid {
            *c /= members.len() as f64;
        }
        let mut best = members[0];
        let mut best_d = dist2(&cloud[best], &centroid);
        for &i in &members[1..] {
            let d = dist2(&cloud[i], &centroid);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        out.push(cloud[best]);
    }
    Ok(out)
}
