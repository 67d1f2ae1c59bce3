//! Delaunay triangulation and sparse-to-dense flow interpolation.
//!
//! Incremental Bowyer-Watson over a symbolic closure of the plane: instead
//! of a huge finite super-triangle, every hull edge is backed by a "ghost"
//! triangle whose third vertex sits at infinity. Conflict tests against
//! ghosts reduce to orientation tests against the hull edge, so no
//! artificial coordinates ever enter the predicates.
//!
//! Predicates are plain f64 determinants, which are exact for the integer
//! and near-integer pixel coordinates this is used on at desk scale.

use crate::error::{Error, Result};
use crate::metrics::FlowField;
use std::collections::HashMap;

pub type Point = (f64, f64);

/// Vertex id; `GHOST` is the symbolic point at infinity.
const GHOST: i64 = -1;

#[derive(Debug, Clone, Copy)]
struct Tri {
    v: [i64; 3],
    alive: bool,
}

/// Delaunay triangulation of a 2-D point set.
pub struct Triangulation {
    points: Vec<Point>,
    tris: Vec<Tri>,
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// > 0 iff d lies strictly inside the circumcircle of CCW triangle (a,b,c).
fn incircle(a: Point, b: Point, c: Point, d: Point) -> f64 {
    let (ax, ay) = (a.0 - d.0, a.1 - d.1);
    let (bx, by) = (b.0 - d.0, b.1 - d.1);
    let (cx, cy) = (c.0 - d.0, c.1 - d.1);
    let a2 = ax * ax + ay * ay;
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    ax * (by * c2 - b2 * cy) - ay * (bx * c2 - b2 * cx) + a2 * (bx * cy - by * cx)
}

impl Triangulation {
    /// Build the triangulation. Duplicate points are rejected; fewer than
    /// three distinct points or an all-collinear set is a degenerate error.
    pub fn build(points: &[Point]) -> Result<Triangulation> {
        for p in points {
            if !p.0.is_finite() || !p.1.is_finite() {
                return Err(Error::Degenerate("non-finite point".to_string()));
            }
        }
        let mut pts: Vec<Point> = Vec::with_capacity(points.len());
        {
            let mut seen = HashMap::new();
            for &p in points {
                let key = (p.0.to_bits(), p.1.to_bits());
                if seen.insert(key, ()).is_some() {
                    return Err(Error::Degenerate(format!(
                        "duplicate point ({}, {})",
                        p.0, p.1
                    )));
                }
                pts.push(p);
            }
        }
        if pts.len() < 3 {
            return Err(Error::Degenerate("need at least 3 points".to_string()));
        }
        // Seed triangle: first two distinct points plus the first point not
        // collinear with them.
        let mut third = None;
        for i in 2..pts.len() {
            if orient(pts[0], pts[1], pts[i]) != 0.0 {
                third = Some(i);
                break;
            }
        }
        let third = third.ok_or_else(|| Error::Degenerate("all points collinear".to_string()))?;
        pts.swap(2, third);

        let (i0, i1, i2) = if orient(pts[0], pts[1], pts[2]) > 0.0 {
            (0i64, 1i64, 2i64)
        } else {
            (0i64, 2i64, 1i64)
        };
        let mut tri = Triangulation { points: pts, tris: Vec::new() };
        tri.push_tri([i0, i1, i2]);
        tri.push_tri([i1, i0, GHOST]);
        tri.push_tri([i2, i1, GHOST]);
        tri.push_tri([i0, i2, GHOST]);
        for i in 3..tri.points.len() {
            tri.insert(i as i64)?;
        }
        Ok(tri)
    }

    fn push_tri(&mut self, mut v: [i64; 3]) {
        // Keep the ghost vertex in slot 2; rotation preserves orientation.
        for _ in 0..2 {
            if v[0] == GHOST || v[1] == GHOST {
                v = [v[1], v[2], v[0]];
            }
        }
        self.tris.push(Tri { v, alive: true });
    }

    fn pt(&self, id: i64) -> Point {
        self.points[id as usize]
    }

    fn conflicts(&self, t: &Tri, p: Point) -> bool {
        if t.v[2] == GHOST {
            // Ghost (a, b, inf): conflict iff p is strictly left of the
            // directed edge a->b, or on its line strictly between a and b.
            // Collinear-but-beyond points must not match, otherwise hull
            // extension along a line would mint zero-area triangles.
            let a = self.pt(t.v[0]);
            let b = self.pt(t.v[1]);
            let o = orient(a, b, p);
            if o != 0.0 {
                return o > 0.0;
            }
            (p.0 - a.0) * (b.0 - p.0) + (p.1 - a.1) * (b.1 - p.1) > 0.0
        } else {
            incircle(self.pt(t.v[0]), self.pt(t.v[1]), self.pt(t.v[2]), p) > 0.0
        }
    }

    fn insert(&mut self, pid: i64) -> Result<()> {
        let p = self.pt(pid);
        let bad: Vec<usize> = (0..self.tris.len())
            .filter(|&i| self.tris[i].alive && self.conflicts(&self.tris[i].clone(), p))
            .collect();
        if bad.is_empty() {
            return Err(Error::Degenerate(format!(
                "insertion found no conflicting triangle for ({}, {})",
                p.0, p.1
            )));
        }
        // Directed edges of the cavity boundary: edges of bad triangles not
        // shared (reversed) with another bad triangle.
        let mut bad_edges: HashMap<(i64, i64), ()> = HashMap::new();
        for &i in &bad {
            let v = self.tris[i].v;
            for e in 0..3 {
                bad_edges.insert((v[e], v[(e + 1) % 3]), ());
            }
        }
        let mut boundary: Vec<(i64, i64)> = Vec::new();
        for &i in &bad {
            let v = self.tris[i].v;
            for e in 0..3 {
                let edge = (v[e], v[(e + 1) % 3]);
                if !bad_edges.contains_key(&(edge.1, edge.0)) {
                    boundary.push(edge);
                }
            }
        }
        for &i in &bad {
            self.tris[i].alive = false;
        }
        for (a, b) in boundary {
            self.push_tri([a, b, pid]);
        }
        Ok(())
    }

    /// Finite triangles as point-index triples, CCW.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        self.tris
            .iter()
            .filter(|t| t.alive && t.v[2] != GHOST)
            .map(|t| [t.v[0] as usize, t.v[1] as usize, t.v[2] as usize])
            .collect()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }
}

/// Barycentric coordinates of p in triangle (a, b, c); None for degenerate
/// triangles.
pub fn barycentric(a: Point, b: Point, c: Point, p: Point) -> Option<(f64, f64, f64)> {
    let area = orient(a, b, c);
    if area == 0.0 {
        return None;
    }
    let wa = orient(b, c, p) / area;
    let wb = orient(c, a, p) / area;
    let wc = orient(a, b, p) / area;
    Some((wa, wb, wc))
}

const EDGE_EPS: f64 = 1e-12;

/// Interpolate sparse per-query flows to a dense pixel grid.
///
/// Queries are pixel coordinates in the (width, height) target frame;
/// `flows` are their displacement vectors. Pixels inside the convex hull
/// get barycentric blends of the triangle vertex flows; pixels outside
/// stay invalid.
pub fn densify(
    queries_px: &[Point],
    flows: &[Point],
    width: usize,
    height: usize,
) -> Result<FlowField> {
    if queries_px.len() != flows.len() {
        return Err(Error::Invalid(format!(
            "densify: {} queries vs {} flows",
            queries_px.len(),
            flows.len()
        )));
    }
    if queries_px.len() < 3 {
        return Err(Error::Degenerate("densify needs at least 3 queries".to_string()));
    }
    let tri = Triangulation::build(queries_px)?;
    let mut field = FlowField::new(width, height);
    for t in tri.triangles() {
        let (a, b, c) = (queries_px[t[0]], queries_px[t[1]], queries_px[t[2]]);
        let (fa, fb, fc) = (flows[t[0]], flows[t[1]], flows[t[2]]);
        let min_x = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let max_x = (a.0.max(b.0).max(c.0).ceil() as usize).min(width.saturating_sub(1));
        let min_y = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let max_y = (a.1.max(b.1).max(c.1).ceil() as usize).min(height.saturating_sub(1));
        for y in min_y..=max_y.min(height.saturating_sub(1)) {
            for x in min_x..=max_x {
                let p = (x as f64, y as f64);
                if let Some((wa, wb, wc)) = barycentric(a, b, c, p) {
                    if wa >= -EDGE_EPS && wb >= -EDGE_EPS && wc >= -EDGE_EPS {
                        let idx = y * width + x;
                        field.flow[idx] = (
                            wa * fa.0 + wb * fb.0 + wc * fc.0,
                            wa * fa.1 + wb * fb.1 + wc * fc.1,
                        );
                        field.valid[idx] = true;
                    }
                }
            }
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delaunay_holds(tri: &Triangulation) {
        // No point strictly inside any finite triangle's circumcircle.
        let pts = tri.points();
        for t in tri.triangles() {
            let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
            for (i, &p) in pts.iter().enumerate() {
                if i == t[0] || i == t[1] || i == t[2] {
                    continue;
                }
                assert!(
                    incircle(a, b, c, p) <= 1e-9,
                    "point {} inside circumcircle of {:?}",
                    i,
                    t
                );
            }
        }
    }

    #[test]
    fn triangulates_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [3usize, 4, 10, 50] {
            let pts: Vec<Point> = (0..n)
                .map(|_| (rng.gen::<f64>() * 100.0, rng.gen::<f64>() * 100.0))
                .collect();
            let tri = Triangulation::build(&pts).unwrap();
            delaunay_holds(&tri);
            // Euler: for n points with h on the hull, triangles = 2n - h - 2.
            let tris = tri.triangles();
            assert!(!tris.is_empty());
        }
    }

    #[test]
    fn triangulates_grid_points() {
        // Grids are full of cocircular quads and collinear runs.
        let mut pts = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                pts.push((x as f64 * 10.0, y as f64 * 10.0));
            }
        }
        let tri = Triangulation::build(&pts).unwrap();
        delaunay_holds(&tri);
        // 25 grid points, 16 hull vertices: 2*25 - 16 - 2 = 32 triangles.
        assert_eq!(tri.triangles().len(), 32);
    }

    #[test]
    fn collinear_is_degenerate() {
        let pts: Vec<Point> = (0..5).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(Triangulation::build(&pts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn duplicate_is_degenerate() {
        let pts = vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 0.0)];
        assert!(matches!(Triangulation::build(&pts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn centroid_barycentric_thirds() {
        let (a, b, c) = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0));
        let p = (1.0 / 3.0, 1.0 / 3.0);
        let (wa, wb, wc) = barycentric(a, b, c, p).unwrap();
        assert!((wa - 1.0 / 3.0).abs() < 1e-12);
        assert!((wb - 1.0 / 3.0).abs() < 1e-12);
        assert!((wc - 1.0 / 3.0).abs() < 1e-12);
        // vertex flows (0,0),(1,0),(0,1) blended at the centroid
        let f = (wa * 0.0 + wb * 1.0 + wc * 0.0, wa * 0.0 + wb * 0.0 + wc * 1.0);
        assert!((f.0 - 1.0 / 3.0).abs() < 1e-12 && (f.1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_flow_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point> = (0..30)
            .map(|_| (rng.gen::<f64>() * 63.0, rng.gen::<f64>() * 63.0))
            .collect();
        let flows = vec![(2.5, -1.25); 30];
        let field = densify(&pts, &flows, 64, 64).unwrap();
        let mut seen = 0;
        for i in 0..field.flow.len() {
            if field.valid[i] {
                assert!((field.flow[i].0 - 2.5).abs() < 1e-9);
                assert!((field.flow[i].1 + 1.25).abs() < 1e-9);
                seen += 1;
            }
        }
        assert!(seen > 100, "hull should cover a fair share of the grid");
    }

    #[test]
    fn affine_flow_exact_inside_hull() {
        // Barycentric interpolation reproduces affine fields exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pts: Vec<Point> = (0..40)
            .map(|_| (rng.gen::<f64>() * 63.0, rng.gen::<f64>() * 63.0))
            .collect();
        let affine = |p: Point| -> Point {
            (0.03 * p.0 - 0.01 * p.1 + 2.0, 0.02 * p.0 + 0.05 * p.1 - 1.0)
        };
        let flows: Vec<Point> = pts.iter().map(|&p| affine(p)).collect();
        let field = densify(&pts, &flows, 64, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let idx = y * 64 + x;
                if field.valid[idx] {
                    let expect = affine((x as f64, y as f64));
                    assert!(
                        (field.flow[idx].0 - expect.0).abs() <= 1e-9
                            && (field.flow[idx].1 - expect.1).abs() <= 1e-9,
                        "pixel ({}, {}) off: {:?} vs {:?}",
                        x,
                        y,
                        field.flow[idx],
                        expect
                    );
                }
            }
        }
    }

    #[test]
    fn outside_hull_invalid() {
        let pts = vec![(10.0, 10.0), (20.0, 10.0), (15.0, 20.0)];
        let flows = vec![(1.0, 1.0); 3];
        let field = densify(&pts, &flows, 32, 32).unwrap();
        assert!(!field.valid[0], "corner far outside the hull must be invalid");
        assert!(field.valid[15 * 32 + 15], "triangle interior must be valid");
    }
}
