//! Bowyer–Watson incremental Delaunay triangulation.
//!
//! Instead of a finite super-triangle the triangulation is closed with a
//! single vertex at infinity: every hull edge `a -> b` carries a ghost
//! triangle `[a, b, GHOST]` whose "circumcircle" is the open half-plane to
//! the left of `a -> b` (outside the hull) plus the open segment `ab`. This
//! keeps collinear hull points (grid boundaries) from producing flat cells
//! or a missing hull, which a finite super-triangle cannot guarantee.

use std::collections::HashSet;

use super::{Mesh, Point, PointCloud};
use crate::error::{FenError, Result};

const GHOST: usize = usize::MAX;

/// Relative tolerance of the orientation and in-circle predicates.
const PREDICATE_TOL: f64 = 1e-10;

/// Twice the signed area of `(a, b, c)` and the magnitude bound of its terms.
fn orient_with_bound(a: Point, b: Point, c: Point) -> (f64, f64) {
    let l = (b[0] - a[0]) * (c[1] - a[1]);
    let r = (b[1] - a[1]) * (c[0] - a[0]);
    (l - r, l.abs() + r.abs())
}

/// Twice the signed area of `(a, b, c)`; positive when counter-clockwise.
pub fn orient2d(a: Point, b: Point, c: Point) -> f64 {
    orient_with_bound(a, b, c).0
}

fn in_circle_with_bound(a: Point, b: Point, c: Point, d: Point) -> (f64, f64) {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let alift = adx * adx + ady * ady;
    let blift = bdx * bdx + bdy * bdy;
    let clift = cdx * cdx + cdy * cdy;
    let bc = bdx * cdy - cdx * bdy;
    let ca = cdx * ady - adx * cdy;
    let ab = adx * bdy - bdx * ady;
    let det = alift * bc + blift * ca + clift * ab;
    let bound = alift * ((bdx * cdy).abs() + (cdx * bdy).abs())
        + blift * ((cdx * ady).abs() + (adx * cdy).abs())
        + clift * ((adx * bdy).abs() + (bdx * ady).abs());
    (det, bound)
}

/// In-circle determinant: positive when `d` lies inside the circumcircle of
/// the counter-clockwise triangle `(a, b, c)`.
pub fn in_circle(a: Point, b: Point, c: Point, d: Point) -> f64 {
    in_circle_with_bound(a, b, c, d).0
}

fn strictly_inside_circle(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (det, bound) = in_circle_with_bound(a, b, c, d);
    det > PREDICATE_TOL * bound
}

fn is_collinear(a: Point, b: Point, c: Point) -> bool {
    let (det, bound) = orient_with_bound(a, b, c);
    det.abs() <= PREDICATE_TOL * bound
}

struct Triangulation<'a> {
    pts: &'a [Point],
    tris: Vec<[usize; 3]>,
    alive: Vec<bool>,
}

impl Triangulation<'_> {
    fn push(&mut self, tri: [usize; 3]) {
        self.tris.push(tri);
        self.alive.push(true);
    }

    // Whether `q` lies in the (generalised) circumcircle of triangle `t`.
    fn conflicts(&self, t: usize, q: Point) -> bool {
        let [a, b, c] = self.tris[t];
        if c == GHOST {
            let (pa, pb) = (self.pts[a], self.pts[b]);
            let (det, bound) = orient_with_bound(pa, pb, q);
            if det.abs() > PREDICATE_TOL * bound {
                return det > 0.0;
            }
            // collinear: inside only on the open segment ab
            let (ex, ey) = (pb[0] - pa[0], pb[1] - pa[1]);
            let s = ((q[0] - pa[0]) * ex + (q[1] - pa[1]) * ey) / (ex * ex + ey * ey);
            return s > 0.0 && s < 1.0;
        }
        strictly_inside_circle(self.pts[a], self.pts[b], self.pts[c], q)
    }

    fn insert(&mut self, q_idx: usize) {
        let q = self.pts[q_idx];
        let bad: Vec<usize> = (0..self.tris.len())
            .filter(|&t| self.alive[t] && self.conflicts(t, q))
            .collect();
        let mut directed: HashSet<(usize, usize)> = HashSet::with_capacity(bad.len() * 3);
        for &t in &bad {
            let v = self.tris[t];
            for k in 0..3 {
                directed.insert((v[k], v[(k + 1) % 3]));
            }
        }
        let mut new_tris = Vec::new();
        for &t in &bad {
            self.alive[t] = false;
            let v = self.tris[t];
            for k in 0..3 {
                let (u, w) = (v[k], v[(k + 1) % 3]);
                if directed.contains(&(w, u)) {
                    continue;
                }
                // keep the ghost vertex in the last slot
                new_tris.push(if u == GHOST {
                    [w, q_idx, GHOST]
                } else if w == GHOST {
                    [q_idx, u, GHOST]
                } else {
                    [u, w, q_idx]
                });
            }
        }
        for tri in new_tris {
            self.push(tri);
        }
    }
}

/// Delaunay triangulation of the convex hull of `points`.
///
/// Points are inserted in input order. Fails with `DegenerateInput` when all
/// points are collinear.
pub fn delaunay_triangulate(points: &PointCloud) -> Result<Mesh> {
    let pts = points.coords();
    let n = pts.len();
    if n < 3 {
        return Err(FenError::DegenerateInput(format!("need at least 3 points, got {n}")));
    }
    let (i0, i1) = (0, 1);
    let i2 = (2..n)
        .find(|&k| !is_collinear(pts[i0], pts[i1], pts[k]))
        .ok_or_else(|| FenError::DegenerateInput("all points are collinear".into()))?;

    let seed = if orient2d(pts[i0], pts[i1], pts[i2]) > 0.0 {
        [i0, i1, i2]
    } else {
        [i0, i2, i1]
    };
    let mut tri = Triangulation { pts, tris: Vec::with_capacity(4 * n), alive: Vec::new() };
    tri.push(seed);
    for k in 0..3 {
        tri.push([seed[(k + 1) % 3], seed[k], GHOST]);
    }
    for q in (0..n).filter(|&q| q != i0 && q != i1 && q != i2) {
        tri.insert(q);
    }

    let cells: Vec<[usize; 3]> = tri
        .tris
        .iter()
        .zip(&tri.alive)
        .filter(|(t, &alive)| alive && t[2] != GHOST)
        .map(|(t, _)| *t)
        .collect();
    Mesh::new(points.clone(), cells)
}
