//! Triangulated spatial domains.
//!
//! A [`Mesh`] is a set of nodes in the plane together with triangular cells
//! over those nodes. Cells are stored counter-clockwise; boundary faces are
//! the edges that belong to exactly one cell.

mod delaunay;
mod filter;
mod geometry;

pub use delaunay::{delaunay_triangulate, in_circle, orient2d};
pub use filter::{filter_sliver_cells, min_boundary_angle, DEFAULT_SLIVER_THRESHOLD};
pub use geometry::{compute_geometry, CellGeometry};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FenError, Result};

pub type Point = [f64; 2];

/// Smallest admissible cell area.
pub const MIN_CELL_AREA: f64 = 1e-12;

/// Minimum pairwise distance between two nodes.
pub const MIN_POINT_DISTANCE: f64 = 1e-12;

/// A set of distinct points in the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point>,
}

impl PointCloud {
    /// Builds a point cloud, rejecting non-finite or coincident points.
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.len() < 3 {
            return Err(FenError::DegenerateInput(format!(
                "need at least 3 points, got {}",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(FenError::DegenerateInput(format!("point {i} is not finite")));
        }
        if let Some((i, j)) = find_duplicate(&coords) {
            return Err(FenError::DegenerateInput(format!(
                "points {i} and {j} coincide"
            )));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn get(&self, i: usize) -> Point {
        self.coords[i]
    }

    pub fn into_inner(self) -> Vec<Point> {
        self.coords
    }
}

// Sweep over points sorted by x; only neighbours within the tolerance window
// in x need a full distance check.
fn find_duplicate(coords: &[Point]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by(|&a, &b| coords[a][0].total_cmp(&coords[b][0]).then(a.cmp(&b)));
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if coords[j][0] - coords[i][0] > MIN_POINT_DISTANCE {
                break;
            }
            let dx = coords[j][0] - coords[i][0];
            let dy = coords[j][1] - coords[i][1];
            if (dx * dx + dy * dy).sqrt() <= MIN_POINT_DISTANCE {
                return Some((i.min(j), i.max(j)));
            }
        }
    }
    None
}

/// Signed area of the triangle `(a, b, c)`; positive when counter-clockwise.
pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// A valid triangulation of a planar domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    points: PointCloud,
    cells: Vec<[usize; 3]>,
    boundary_faces: Vec<[usize; 2]>,
}

impl Mesh {
    /// Validates `cells` against `points` and derives the boundary faces.
    ///
    /// Cells are reoriented counter-clockwise. Fails if an index is out of
    /// range, a cell is degenerate, an edge is shared by more than two cells,
    /// or two cells sharing an edge overlap.
    pub fn new(points: PointCloud, cells: Vec<[usize; 3]>) -> Result<Self> {
        let n = points.len();
        let mut oriented = Vec::with_capacity(cells.len());
        for (c, cell) in cells.into_iter().enumerate() {
            if cell.iter().any(|&v| v >= n) {
                return Err(FenError::InvalidMesh(format!(
                    "cell {c} references a node outside 0..{n}"
                )));
            }
            if cell[0] == cell[1] || cell[1] == cell[2] || cell[0] == cell[2] {
                return Err(FenError::InvalidMesh(format!("cell {c} repeats a vertex")));
            }
            let area = signed_area(points.get(cell[0]), points.get(cell[1]), points.get(cell[2]));
            if area.abs() <= MIN_CELL_AREA {
                return Err(FenError::DegenerateCell { cell: c, area: area.abs() });
            }
            oriented.push(if area > 0.0 { cell } else { [cell[0], cell[2], cell[1]] });
        }
        if oriented.is_empty() {
            return Err(FenError::EmptyMesh);
        }

        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (c, cell) in oriented.iter().enumerate() {
            for k in 0..3 {
                edges.entry(edge_key(cell[k], cell[(k + 1) % 3])).or_default().push(c);
            }
        }
        let mut boundary_faces = Vec::new();
        for (&(a, b), owners) in &edges {
            match owners.as_slice() {
                [_] => boundary_faces.push([a, b]),
                [c0, c1] => {
                    let opp0 = third_vertex(&oriented[*c0], a, b);
                    let opp1 = third_vertex(&oriented[*c1], a, b);
                    let s0 = signed_area(points.get(a), points.get(b), points.get(opp0));
                    let s1 = signed_area(points.get(a), points.get(b), points.get(opp1));
                    if s0 * s1 >= 0.0 {
                        return Err(FenError::InvalidMesh(format!(
                            "cells {c0} and {c1} overlap across edge ({a}, {b})"
                        )));
                    }
                }
                _ => {
                    return Err(FenError::InvalidMesh(format!(
                        "edge ({a}, {b}) is shared by {} cells",
                        owners.len()
                    )))
                }
            }
        }
        boundary_faces.sort_unstable();
        Ok(Self { points, cells: oriented, boundary_faces })
    }

    pub fn points(&self) -> &PointCloud {
        &self.points
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn boundary_faces(&self) -> &[[usize; 2]] {
        &self.boundary_faces
    }

    pub fn n_nodes(&self) -> usize {
        self.points.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_points(&self, c: usize) -> [Point; 3] {
        self.cells[c].map(|v| self.points.get(v))
    }

    pub fn cell_area(&self, c: usize) -> f64 {
        let [a, b, p] = self.cell_points(c);
        signed_area(a, b, p)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_area(c)).sum()
    }

    /// Cells as sorted vertex triples in sorted order, for comparisons that
    /// must ignore storage order.
    pub fn canonical_cells(&self) -> Vec<[usize; 3]> {
        let mut cells: Vec<[usize; 3]> = self
            .cells
            .iter()
            .map(|c| {
                let mut s = *c;
                s.sort_unstable();
                s
            })
            .collect();
        cells.sort_unstable();
        cells
    }

    /// The same mesh with every node moved by `offset`.
    pub fn translated(&self, offset: Point) -> Result<Self> {
        let coords = self
            .points
            .coords()
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1]])
            .collect();
        Mesh::new(PointCloud::new(coords)?, self.cells.clone())
    }

    /// Same cells over new coordinates for the same nodes.
    pub fn with_points(&self, points: PointCloud) -> Result<Self> {
        if points.len() != self.n_nodes() {
            return Err(FenError::ShapeMismatch(format!(
                "expected {} points, got {}",
                self.n_nodes(),
                points.len()
            )));
        }
        Mesh::new(points, self.cells.clone())
    }

    pub fn to_file(&self) -> MeshFile {
        MeshFile {
            points: self.points.coords().to_vec(),
            cells: self.cells.clone(),
            boundary_faces: Some(self.boundary_faces.clone()),
        }
    }

    pub fn from_file(file: MeshFile) -> Result<Self> {
        let mesh = Mesh::new(PointCloud::new(file.points)?, file.cells)?;
        if let Some(faces) = file.boundary_faces {
            let mut given: Vec<[usize; 2]> =
                faces.into_iter().map(|[a, b]| [a.min(b), a.max(b)]).collect();
            given.sort_unstable();
            if given != mesh.boundary_faces {
                return Err(FenError::InvalidMesh(
                    "boundary_faces do not match the cells".into(),
                ));
            }
        }
        Ok(mesh)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_file())?)?;
        Ok(())
    }
}

pub(crate) fn third_vertex(cell: &[usize; 3], a: usize, b: usize) -> usize {
    *cell.iter().find(|&&v| v != a && v != b).expect("edge belongs to cell")
}

/// On-disk mesh representation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MeshFile {
    pub points: Vec<Point>,
    pub cells: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_faces: Option<Vec<[usize; 2]>>,
}

/// Reads a point list, either `{"points": [[x, y], ...]}` or a bare array.
pub fn load_points(path: &Path) -> Result<PointCloud> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum PointsFile {
        Wrapped { points: Vec<Point> },
        Bare(Vec<Point>),
    }
    let text = std::fs::read_to_string(path)?;
    let coords = match serde_json::from_str(&text)? {
        PointsFile::Wrapped { points } => points,
        PointsFile::Bare(points) => points,
    };
    PointCloud::new(coords)
}
