use super::{Mesh, Point};
use crate::fem;

/// Precomputed geometric quantities of one cell.
///
/// Per-vertex arrays are indexed by the cell's storage slot (the order of
/// `vertices`); `sorted_order` lists those slots by polar angle of the local
/// coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGeometry {
    pub vertices: [usize; 3],
    pub center: Point,
    pub local_coords: [Point; 3],
    pub area: f64,
    pub sorted_order: [usize; 3],
    /// `<1, phi_i>` over the cell.
    pub load: [f64; 3],
    /// `conv[j][i] = <grad phi_j, phi_i>` over the cell.
    pub conv: [[Point; 3]; 3],
    pub basis_grads: [Point; 3],
}

impl CellGeometry {
    /// Global node indices in angle-sorted order.
    pub fn sorted_vertices(&self) -> [usize; 3] {
        self.sorted_order.map(|s| self.vertices[s])
    }
}

fn angle_sorted(vertices: [usize; 3], local: [Point; 3]) -> [usize; 3] {
    let mut order = [0, 1, 2];
    let angle = |s: usize| local[s][1].atan2(local[s][0]);
    order.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)).then(vertices[a].cmp(&vertices[b])));
    order
}

pub fn compute_geometry(mesh: &Mesh) -> Vec<CellGeometry> {
    (0..mesh.n_cells())
        .map(|c| {
            let vertices = mesh.cells()[c];
            let pts = mesh.cell_points(c);
            let center = [0, 1].map(|d| (pts[0][d] + pts[1][d] + pts[2][d]) / 3.0);
            // from vertex differences so exact translations leave it unchanged
            let local_coords = std::array::from_fn(|i| {
                let (p, q, r) = (pts[i], pts[(i + 1) % 3], pts[(i + 2) % 3]);
                [0, 1].map(|d| ((p[d] - q[d]) + (p[d] - r[d])) / 3.0)
            });
            let area = mesh.cell_area(c);
            let basis_grads = fem::basis_gradients(pts).expect("mesh cells are non-degenerate");
            let conv = fem::convection_products(pts).expect("mesh cells are non-degenerate");
            CellGeometry {
                vertices,
                center,
                local_coords,
                area,
                sorted_order: angle_sorted(vertices, local_coords),
                load: fem::load_vector(area),
                conv,
                basis_grads,
            }
        })
        .collect()
}
