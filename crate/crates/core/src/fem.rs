//! Closed-form P1 finite element quantities on triangles.
//!
//! All inner products of the piecewise-linear hat functions over a single
//! cell have closed forms:
//!
//! * mass: `<phi_i, phi_j> = A/6` if `i == j`, else `A/12`
//! * load: `<1, phi_i> = A/3`
//! * convection: `<grad phi_j, phi_i> = grad phi_j * A/3`, since P1
//!   gradients are constant per cell.
//!
//! [`quadrature_integrate`] evaluates the same integrals numerically and is
//! kept as an independent check of these formulas.

use crate::error::{FenError, Result};
use crate::mesh::{signed_area, CellGeometry, Mesh, Point, MIN_CELL_AREA};

/// Consistent mass matrix of a single cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalMassMatrix(pub [[f64; 3]; 3]);

impl LocalMassMatrix {
    pub fn row_sum(&self, i: usize) -> f64 {
        self.0[i].iter().sum()
    }
}

pub fn local_mass(cell_area: f64) -> LocalMassMatrix {
    let diag = cell_area / 6.0;
    let off = cell_area / 12.0;
    let mut m = [[off; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = diag;
    }
    LocalMassMatrix(m)
}

pub fn load_vector(cell_area: f64) -> [f64; 3] {
    [cell_area / 3.0; 3]
}

/// Constant gradients of the three hat functions of a cell.
pub fn basis_gradients(vertices: [Point; 3]) -> Result<[Point; 3]> {
    let area = signed_area(vertices[0], vertices[1], vertices[2]);
    if area.abs() < MIN_CELL_AREA {
        return Err(FenError::DegenerateCell { cell: 0, area: area.abs() });
    }
    let inv = 1.0 / (2.0 * area);
    Ok(std::array::from_fn(|i| {
        let p = vertices[(i + 1) % 3];
        let q = vertices[(i + 2) % 3];
        [(p[1] - q[1]) * inv, (q[0] - p[0]) * inv]
    }))
}

/// `C[j][i] = <grad phi_j, phi_i>` over the cell.
pub fn convection_products(vertices: [Point; 3]) -> Result<[[Point; 3]; 3]> {
    let grads = basis_gradients(vertices)?;
    let third = signed_area(vertices[0], vertices[1], vertices[2]).abs() / 3.0;
    Ok(grads.map(|g| [[g[0] * third, g[1] * third]; 3]))
}

/// Diagonal of the row-lumped mass matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LumpedMass {
    pub diag: Vec<f64>,
}

impl LumpedMass {
    pub fn total(&self) -> f64 {
        self.diag.iter().sum()
    }
}

/// Row sums of the global mass matrix, accumulated cell by cell in index
/// order.
pub fn lumped_mass(mesh: &Mesh, geometry: &[CellGeometry]) -> Result<LumpedMass> {
    if geometry.len() != mesh.n_cells() {
        return Err(FenError::ShapeMismatch(format!(
            "{} cell geometries for {} cells",
            geometry.len(),
            mesh.n_cells()
        )));
    }
    let mut diag = vec![0.0; mesh.n_nodes()];
    for geo in geometry {
        for (slot, &v) in geo.vertices.iter().enumerate() {
            diag[v] += geo.load[slot];
        }
    }
    if let Some(i) = diag.iter().position(|&d| d <= 0.0) {
        return Err(FenError::IsolatedNode(i));
    }
    Ok(LumpedMass { diag })
}

/// Gauss quadrature rules on a triangle as (barycentric point, weight) with
/// weights summing to one.
fn quadrature_rule(order: usize) -> Result<Vec<([f64; 3], f64)>> {
    match order {
        1 => Ok(vec![([1.0 / 3.0; 3], 1.0)]),
        3 => {
            let (a, b) = (2.0 / 3.0, 1.0 / 6.0);
            Ok(vec![([a, b, b], 1.0 / 3.0), ([b, a, b], 1.0 / 3.0), ([b, b, a], 1.0 / 3.0)])
        }
        7 => {
            let s15 = 15f64.sqrt();
            let mut rule = vec![([1.0 / 3.0; 3], 9.0 / 40.0)];
            for (a, w) in [((6.0 - s15) / 21.0, (155.0 - s15) / 1200.0), ((6.0 + s15) / 21.0, (155.0 + s15) / 1200.0)] {
                let b = 1.0 - 2.0 * a;
                rule.push(([b, a, a], w));
                rule.push(([a, b, a], w));
                rule.push(([a, a, b], w));
            }
            Ok(rule)
        }
        _ => Err(FenError::InvalidSpec(format!(
            "quadrature order must be 1, 3 or 7, got {order}"
        ))),
    }
}

/// Integrates `f` over the triangle with the 1-, 3- or 7-point Gauss rule
/// (exact up to polynomial degree 1, 2 and 5 respectively).
pub fn quadrature_integrate<F>(f: F, vertices: [Point; 3], order: usize) -> Result<f64>
where
    F: Fn(Point) -> f64,
{
    let area = signed_area(vertices[0], vertices[1], vertices[2]).abs();
    let sum: f64 = quadrature_rule(order)?
        .into_iter()
        .map(|(bary, w)| {
            let x = [0, 1].map(|d| (0..3).map(|k| bary[k] * vertices[k][d]).sum::<f64>());
            w * f(x)
        })
        .sum();
    Ok(area * sum)
}
