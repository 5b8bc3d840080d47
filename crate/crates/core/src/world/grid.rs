//! Free-space occupancy grid and geodesic distance fields.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};
use crate::geom::Point;

/// Row-major grid over the scene bounds; `blocked` cells are inside or
/// within the clearance radius of an obstacle.
#[derive(Clone, Debug)]
pub struct OccGrid {
    pub origin: Point,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub blocked: Vec<bool>,
    /// Cells of the largest 8-connected free component.
    pub component: Vec<bool>,
}

const NEIGHBORS: [(isize, isize, f64); 8] = [
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, std::f64::consts::SQRT_2),
    (1, -1, std::f64::consts::SQRT_2),
    (-1, 1, std::f64::consts::SQRT_2),
    (-1, -1, std::f64::consts::SQRT_2),
];

impl OccGrid {
    /// `clearance_of(p)` returns the distance from `p` to the nearest
    /// obstacle surface (0 inside an obstacle).
    pub fn build(
        origin: Point,
        size: Point,
        cell: f64,
        clearance: f64,
        clearance_of: impl Fn(Point) -> f64,
    ) -> Self {
        let nx = (size.x / cell).ceil() as usize;
        let ny = (size.y / cell).ceil() as usize;
        let mut blocked = vec![false; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                let c = Point::new(
                    origin.x + (ix as f64 + 0.5) * cell,
                    origin.y + (iy as f64 + 0.5) * cell,
                );
                let outside = c.x >= origin.x + size.x || c.y >= origin.y + size.y;
                blocked[iy * nx + ix] = outside || clearance_of(c) < clearance;
            }
        }
        let mut g = OccGrid {
            origin,
            cell,
            nx,
            ny,
            blocked,
            component: vec![false; nx * ny],
        };
        g.component = g.largest_component();
        g
    }

    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.nx, i / self.nx)
    }

    pub fn center(&self, i: usize) -> Point {
        let (ix, iy) = self.coords(i);
        Point::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell,
            self.origin.y + (iy as f64 + 0.5) * self.cell,
        )
    }

    pub fn cell_of(&self, p: Point) -> Option<usize> {
        let fx = ((p.x - self.origin.x) / self.cell).floor();
        let fy = ((p.y - self.origin.y) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some(self.idx(fx as usize, fy as usize))
    }

    pub fn is_free(&self, p: Point) -> bool {
        self.cell_of(p).is_some_and(|i| !self.blocked[i])
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (ix, iy) = self.coords(i);
        NEIGHBORS.iter().filter_map(move |&(dx, dy, w)| {
            let x = ix as isize + dx;
            let y = iy as isize + dy;
            if x < 0 || y < 0 || x >= self.nx as isize || y >= self.ny as isize {
                return None;
            }
            Some((self.idx(x as usize, y as usize), w))
        })
    }

    fn largest_component(&self) -> Vec<bool> {
        let n = self.nx * self.ny;
        let mut label = vec![usize::MAX; n];
        let mut best = (0usize, usize::MAX);
        let mut next = 0;
        for s in 0..n {
            if self.blocked[s] || label[s] != usize::MAX {
                continue;
            }
            let mut size = 0;
            let mut q = VecDeque::from([s]);
            label[s] = next;
            while let Some(u) = q.pop_front() {
                size += 1;
                for (v, _) in self.neighbors(u) {
                    if !self.blocked[v] && label[v] == usize::MAX {
                        label[v] = next;
                        q.push_back(v);
                    }
                }
            }
            if size > best.0 {
                best = (size, next);
            }
            next += 1;
        }
        label.iter().map(|&l| l == best.1).collect()
    }

    pub fn component_cells(&self) -> Vec<usize> {
        (0..self.component.len())
            .filter(|&i| self.component[i])
            .collect()
    }

    /// Nearest free cell to `p` within `radius` cells, by center distance.
    pub fn nearest_free(&self, p: Point, radius: usize) -> Option<usize> {
        let fx = ((p.x - self.origin.x) / self.cell).floor() as isize;
        let fy = ((p.y - self.origin.y) / self.cell).floor() as isize;
        let r = radius as isize;
        let mut best: Option<(f64, usize)> = None;
        for y in fy - r..=fy + r {
            for x in fx - r..=fx + r {
                if x < 0 || y < 0 || x >= self.nx as isize || y >= self.ny as isize {
                    continue;
                }
                let i = self.idx(x as usize, y as usize);
                if self.blocked[i] {
                    continue;
                }
                let d = self.center(i).dist(p);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
        }
        best.map(|(_, i)| i)
    }

    /// True when every sample along `a→b` (spacing a third of a cell) lies
    /// in a free cell.
    pub fn line_of_sight(&self, a: Point, b: Point) -> bool {
        let n = ((a.dist(b) / (self.cell / 3.0)).ceil() as usize).max(1);
        (0..=n).all(|k| self.is_free(a.lerp(b, k as f64 / n as f64)))
    }

    /// Multi-source Dijkstra over free cells, 8-connected, diagonal steps
    /// cost `√2·cell`. Unreached cells hold `+∞`.
    pub fn distances_from_cells(&self, sources: &[usize]) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nx * self.ny];
        let mut heap = BinaryHeap::new();
        for &s in sources {
            dist[s] = 0.0;
            heap.push(Entry(0.0, s));
        }
        while let Some(Entry(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (v, w) in self.neighbors(u) {
                if self.blocked[v] {
                    continue;
                }
                let nd = d + w * self.cell;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Entry(nd, v));
                }
            }
        }
        dist
    }

    /// Geodesic field from points already known to be outside obstacle
    /// interiors. Sources in the clearance band snap to the nearest free cell.
    pub fn field(&self, sources: &[Point]) -> Result<GeodesicField> {
        let mut cells = Vec::with_capacity(sources.len());
        for &p in sources {
            let c = self
                .nearest_free(p, (0.5 / self.cell).ceil() as usize)
                .ok_or_else(|| {
                    Error::Domain(format!(
                        "source ({:.3}, {:.3}) has no free cell nearby",
                        p.x, p.y
                    ))
                })?;
            cells.push(c);
        }
        Ok(GeodesicField {
            grid: GridFrame::of(self),
            dist: self.distances_from_cells(&cells),
        })
    }

    /// Steepest-descent cell walk on `field` from `start` to a zero cell.
    pub fn descend(&self, field: &[f64], start: usize) -> Vec<usize> {
        let mut out = vec![start];
        let mut u = start;
        while field[u] > 0.0 {
            let mut best = (field[u], u);
            for (v, _) in self.neighbors(u) {
                if field[v] < best.0 {
                    best = (field[v], v);
                }
            }
            if best.1 == u {
                break;
            }
            u = best.1;
            out.push(u);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridFrame {
    pub origin: Point,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridFrame {
    pub fn of(g: &OccGrid) -> Self {
        GridFrame {
            origin: g.origin,
            cell: g.cell,
            nx: g.nx,
            ny: g.ny,
        }
    }
}

/// Distances (m) from a source set over the free-space grid.
#[derive(Clone, Debug)]
pub struct GeodesicField {
    pub grid: GridFrame,
    pub dist: Vec<f64>,
}

impl GeodesicField {
    pub fn at_cell(&self, ix: usize, iy: usize) -> f64 {
        self.dist[iy * self.grid.nx + ix]
    }

    /// Distance at a continuous point: the containing cell when reached,
    /// otherwise the best nearby reached cell plus the straight-line gap.
    pub fn at(&self, p: Point) -> f64 {
        let g = &self.grid;
        let fx = ((p.x - g.origin.x) / g.cell).floor() as isize;
        let fy = ((p.y - g.origin.y) / g.cell).floor() as isize;
        if fx >= 0 && fy >= 0 && (fx as usize) < g.nx && (fy as usize) < g.ny {
            let v = self.at_cell(fx as usize, fy as usize);
            if v.is_finite() {
                return v;
            }
        }
        let mut best = f64::INFINITY;
        for y in fy - 5..=fy + 5 {
            for x in fx - 5..=fx + 5 {
                if x < 0 || y < 0 || x >= g.nx as isize || y >= g.ny as isize {
                    continue;
                }
                let v = self.at_cell(x as usize, y as usize);
                if v.is_finite() {
                    let c = Point::new(
                        g.origin.x + (x as f64 + 0.5) * g.cell,
                        g.origin.y + (y as f64 + 0.5) * g.cell,
                    );
                    best = best.min(v + c.dist(p));
                }
            }
        }
        best
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}
