//! Removal of acute sliver cells along the domain boundary.

use std::collections::{HashMap, HashSet, VecDeque};
use std::f64::consts::FRAC_PI_2;

use super::{edge_key, third_vertex, Mesh, PointCloud};
use crate::error::{FenError, Result};

/// 10 degrees.
pub const DEFAULT_SLIVER_THRESHOLD: f64 = 10.0 * std::f64::consts::PI / 180.0;

/// Smallest angle at a face vertex `A` between `A -> B` and `A -> xi`, where
/// `xi` is the vertex of `cell` opposite `face` and `B` is the orthogonal
/// projection of `xi` onto the line through `face`.
pub fn min_boundary_angle(cell: [usize; 3], face: [usize; 2], points: &PointCloud) -> f64 {
    let xi = points.get(third_vertex(&cell, face[0], face[1]));
    let (a0, a1) = (points.get(face[0]), points.get(face[1]));
    let dir = [a1[0] - a0[0], a1[1] - a0[1]];
    let s = ((xi[0] - a0[0]) * dir[0] + (xi[1] - a0[1]) * dir[1])
        / (dir[0] * dir[0] + dir[1] * dir[1]);
    let b = [a0[0] + s * dir[0], a0[1] + s * dir[1]];

    let mut gamma = std::f64::consts::PI;
    for a in [a0, a1] {
        let ab = [b[0] - a[0], b[1] - a[1]];
        let axi = [xi[0] - a[0], xi[1] - a[1]];
        let angle = if ab[0] == 0.0 && ab[1] == 0.0 {
            // xi projects onto A itself: right angle at A
            FRAC_PI_2
        } else {
            let cross = ab[0] * axi[1] - ab[1] * axi[0];
            let dot = ab[0] * axi[0] + ab[1] * axi[1];
            cross.abs().atan2(dot)
        };
        gamma = gamma.min(angle);
    }
    gamma
}

/// Iteratively removes boundary cells with exactly one boundary face whose
/// [`min_boundary_angle`] is below `threshold`.
///
/// Removing a cell exposes its two interior edges as new boundary faces and
/// re-queues their cells, so slivers cascade inwards. Cells touching the
/// boundary with two or more faces are never removed.
pub fn filter_sliver_cells(mesh: &Mesh, threshold: f64) -> Result<Mesh> {
    if !(threshold > 0.0) {
        return Err(FenError::InvalidSpec(format!(
            "sliver threshold must be positive, got {threshold}"
        )));
    }
    let cells = mesh.cells();
    let mut edge_cells: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (c, cell) in cells.iter().enumerate() {
        for k in 0..3 {
            edge_cells.entry(edge_key(cell[k], cell[(k + 1) % 3])).or_default().push(c);
        }
    }
    let mut boundary: HashSet<(usize, usize)> =
        mesh.boundary_faces().iter().map(|f| (f[0], f[1])).collect();
    let boundary_count = |cell: &[usize; 3], boundary: &HashSet<(usize, usize)>| {
        (0..3)
            .filter(|&k| boundary.contains(&edge_key(cell[k], cell[(k + 1) % 3])))
            .count()
    };
    let mut count: Vec<usize> = cells.iter().map(|c| boundary_count(c, &boundary)).collect();
    let mut alive = vec![true; cells.len()];
    let mut queued = vec![false; cells.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for c in 0..cells.len() {
        if count[c] == 1 {
            queue.push_back(c);
            queued[c] = true;
        }
    }

    while let Some(c) = queue.pop_front() {
        queued[c] = false;
        if !alive[c] || count[c] != 1 {
            continue;
        }
        let cell = cells[c];
        let face = (0..3)
            .map(|k| edge_key(cell[k], cell[(k + 1) % 3]))
            .find(|e| boundary.contains(e))
            .expect("cell with one boundary face");
        if min_boundary_angle(cell, [face.0, face.1], mesh.points()) >= threshold {
            continue;
        }
        alive[c] = false;
        boundary.remove(&face);
        let xi = third_vertex(&cell, face.0, face.1);
        for a in [face.0, face.1] {
            let exposed = edge_key(a, xi);
            boundary.insert(exposed);
            for &other in &edge_cells[&exposed] {
                if other == c || !alive[other] {
                    continue;
                }
                count[other] += 1;
                if !queued[other] {
                    queued[other] = true;
                    queue.push_back(other);
                }
            }
        }
    }

    let kept: Vec<[usize; 3]> =
        cells.iter().zip(&alive).filter(|(_, &a)| a).map(|(c, _)| *c).collect();
    if kept.is_empty() {
        return Err(FenError::EmptyMesh);
    }
    Mesh::new(mesh.points().clone(), kept)
}
