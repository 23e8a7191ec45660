//! Uniform-grid nearest-neighbour index over 3D points.

use std::collections::HashMap;

use nalgebra::Vector3;

type Cell = (i64, i64, i64);

pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    origin: Vector3<f64>,
    cells: HashMap<Cell, Vec<u32>>,
    /// Occupied cell index range per axis is `0..=span`.
    span: (i64, i64, i64),
}

impl<'a> PointGrid<'a> {
    /// Builds the index with roughly `per_cell` points per occupied cell.
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        Self::with_density(points, 4.0)
    }

    pub fn with_density(points: &'a [Vector3<f64>], per_cell: f64) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector3::zeros();
            hi = Vector3::zeros();
        }
        let ext = hi - lo;
        // Cell size from the occupied bounding box; flat sets fall back to the
        // largest extent so the grid does not degenerate.
        let n = points.len().max(1) as f64;
        let dims_used: Vec<f64> = ext.iter().copied().filter(|e| *e > 1e-12).collect();
        let cell = match dims_used.len() {
            0 => 1.0,
            k => {
                let vol: f64 = dims_used.iter().product();
                (vol * per_cell / n).powf(1.0 / k as f64).max(ext.max() * 1e-6)
            }
        };
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, &lo, cell)).or_default().push(i as u32);
        }
        let span = (
            (ext.x / cell).floor() as i64,
            (ext.y / cell).floor() as i64,
            (ext.z / cell).floor() as i64,
        );
        Self { points, cell, origin: lo, cells, span }
    }

    // Visits the cells at Chebyshev distance exactly `r` from `c`, clipped to
    // the occupied span.
    fn visit_ring(&self, c: Cell, r: i64, mut f: impl FnMut(u32)) {
        let clip = |ci: i64, span: i64| ((-r).max(-ci), r.min(span - ci));
        let (x0, x1) = clip(c.0, self.span.0);
        let (y0, y1) = clip(c.1, self.span.1);
        let (z0, z1) = clip(c.2, self.span.2);
        if x0 > x1 || y0 > y1 || z0 > z1 {
            return;
        }
        let mut visit = |dx: i64, dy: i64, dz: i64| {
            if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                ids.iter().copied().for_each(&mut f);
            }
        };
        for dx in x0..=x1 {
            for dy in y0..=y1 {
                if dx.abs() == r || dy.abs() == r {
                    for dz in z0..=z1 {
                        visit(dx, dy, dz);
                    }
                } else {
                    if z0 == -r {
                        visit(dx, dy, -r);
                    }
                    if z1 == r && r != 0 {
                        visit(dx, dy, r);
                    }
                }
            }
        }
    }

    /// Index and distance of the nearest point; ties resolve to the lowest index.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = key(q, &self.origin, self.cell);
        let mut best: Option<(u32, f64)> = None;
        for r in 0..=self.max_ring(c) {
            self.visit_ring(c, r, |i| {
                let d2 = (self.points[i as usize] - q).norm_squared();
                match best {
                    Some((bi, bd)) if d2 > bd || (d2 == bd && i > bi) => {}
                    _ => best = Some((i, d2)),
                }
            });
            // Every point outside ring r is farther than r * cell from q.
            if let Some((_, bd)) = best {
                let reach = r as f64 * self.cell;
                if bd <= reach * reach {
                    break;
                }
            }
        }
        best.map(|(i, d2)| (i as usize, d2.sqrt()))
    }

    /// Up to `k` nearest points excluding `skip`, sorted by distance.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut found: Vec<(u32, f64)> = Vec::new();
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let c = key(q, &self.origin, self.cell);
        for r in 0..=self.max_ring(c) {
            self.visit_ring(c, r, |i| {
                if Some(i as usize) != skip {
                    found.push((i, (self.points[i as usize] - q).norm_squared()));
                }
            });
            if found.len() >= k {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let reach = r as f64 * self.cell;
                if found[k - 1].1 <= reach * reach {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        found.truncate(k);
        found.into_iter().map(|(i, d2)| (i as usize, d2.sqrt())).collect()
    }

    // Chebyshev distance from `c` to the farthest occupied cell.
    fn max_ring(&self, c: Cell) -> i64 {
        let axis = |ci: i64, span: i64| ci.abs().max((ci - span).abs());
        axis(c.0, self.span.0).max(axis(c.1, self.span.1)).max(axis(c.2, self.span.2))
    }
}

#[inline]
fn key(p: &Vector3<f64>, origin: &Vector3<f64>, cell: f64) -> Cell {
    let r = (p - origin) / cell;
    (r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = 1 + trial * 13;
            let pts: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>() * 0.1))
                .collect();
            let grid = PointGrid::new(&pts);
            for _ in 0..50 {
                let q = Vector3::new(
                    rng.random_range(-1.0..2.0),
                    rng.random_range(-1.0..2.0),
                    rng.random_range(-1.0..2.0),
                );
                let (gi, gd) = grid.nearest(&q).unwrap();
                let (bi, bd) = brute(&pts, &q);
                assert_eq!(gd, bd);
                assert_eq!(gi, bi);
            }
        }
    }

    #[test]
    fn k_nearest_on_cube_corners() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push(Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64));
        }
        let grid = PointGrid::new(&pts);
        for (i, p) in pts.iter().enumerate() {
            let nn = grid.k_nearest(p, 3, Some(i));
            assert_eq!(nn.len(), 3);
            assert!(nn.iter().all(|(_, d)| (*d - 1.0).abs() < 1e-12));
        }
    }
}
