//! Locations, unit-square scaling, max-min ordering and conditioning sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Above this many sites conditioning sets are searched through a grid index.
pub const EXHAUSTIVE_SEARCH_LIMIT: usize = 2_000;

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// `scaled = (raw - origin) * factor`, one factor for both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleTransform {
    pub origin: Point,
    pub factor: f64,
}

impl ScaleTransform {
    pub fn identity() -> Self {
        Self {
            origin: [0.0, 0.0],
            factor: 1.0,
        }
    }

    pub fn apply(&self, raw: &Point) -> Point {
        [
            (raw[0] - self.origin[0]) * self.factor,
            (raw[1] - self.origin[1]) * self.factor,
        ]
    }

    pub fn invert(&self, scaled: &Point) -> Point {
        [
            scaled[0] / self.factor + self.origin[0],
            scaled[1] / self.factor + self.origin[1],
        ]
    }
}

/// Sites in the unit square together with the map back to raw coordinates.
#[derive(Debug, Clone)]
pub struct LocationSet {
    coords: Vec<Point>,
    transform: ScaleTransform,
}

impl LocationSet {
    /// Shift to the origin and divide both axes by the larger axis range.
    pub fn scale_to_unit_square(raw: &[Point]) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 locations, got {}",
                raw.len()
            )));
        }
        check_finite(raw)?;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in raw {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let range = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        if range <= 0.0 {
            return Err(Error::DegenerateDomain);
        }
        let transform = ScaleTransform {
            origin: lo,
            factor: 1.0 / range,
        };
        let coords: Vec<Point> = raw
            .iter()
            .map(|p| {
                let s = transform.apply(p);
                [s[0].clamp(0.0, 1.0), s[1].clamp(0.0, 1.0)]
            })
            .collect();
        check_distinct(&coords)?;
        Ok(Self { coords, transform })
    }

    /// Coordinates that already lie in the unit square; the transform is the identity.
    pub fn from_unit_coords(coords: Vec<Point>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 locations, got {}",
                coords.len()
            )));
        }
        check_finite(&coords)?;
        if let Some(i) = coords
            .iter()
            .position(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            return Err(Error::InvalidArgument(format!(
                "location {i} = ({}, {}) lies outside the unit square",
                coords[i][0], coords[i][1]
            )));
        }
        check_distinct(&coords)?;
        Ok(Self {
            coords,
            transform: ScaleTransform::identity(),
        })
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn transform(&self) -> &ScaleTransform {
        &self.transform
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Subset in the given index order, keeping the parent transform.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::InvalidArgument(
                "subset needs at least 2 locations".into(),
            ));
        }
        Ok(Self {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            transform: self.transform,
        })
    }
}

fn check_finite(points: &[Point]) -> Result<()> {
    match points
        .iter()
        .position(|p| !p[0].is_finite() || !p[1].is_finite())
    {
        Some(i) => Err(Error::InvalidArgument(format!(
            "location {i} has a non-finite coordinate"
        ))),
        None => Ok(()),
    }
}

fn check_distinct(points: &[Point]) -> Result<()> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a][0]
            .total_cmp(&points[b][0])
            .then(points[a][1].total_cmp(&points[b][1]))
            .then(a.cmp(&b))
    });
    for w in idx.windows(2) {
        if points[w[0]] == points[w[1]] {
            return Err(Error::DuplicateLocation {
                first: w[0].min(w[1]),
                second: w[0].max(w[1]),
            });
        }
    }
    Ok(())
}

/// Max-min ordering. Starts at the site nearest the centroid; every later site
/// maximizes its minimum distance to the sites already placed. Ties go to the
/// lowest original index.
pub fn maxmin_order(locs: &LocationSet) -> Vec<usize> {
    maxmin_order_points(locs.coords())
}

pub fn maxmin_order_points(points: &[Point]) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let inv = 1.0 / n as f64;
    let centroid = points.iter().fold([0.0, 0.0], |acc, p| {
        [acc[0] + p[0] * inv, acc[1] + p[1] * inv]
    });
    let first = argmin_by_key(points.iter().map(|p| dist2(p, &centroid)));

    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut next = first;
    for _ in 0..n {
        order.push(next);
        placed[next] = true;
        let p = points[next];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for j in 0..n {
            if placed[j] {
                continue;
            }
            let d2 = dist2(&points[j], &p);
            if d2 < min_d2[j] {
                min_d2[j] = d2;
            }
            if min_d2[j] > best_d2 {
                best_d2 = min_d2[j];
                best = j;
            }
        }
        if best == usize::MAX {
            break;
        }
        next = best;
    }
    order
}

fn argmin_by_key(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, v) in values.enumerate() {
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Max-min ordering plus, for every ordered position, the nearest earlier positions.
#[derive(Debug, Clone)]
pub struct OrderedNeighborGraph {
    order: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    m: usize,
}

impl OrderedNeighborGraph {
    /// Original site index at each ordered position.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Conditioning set of ordered position `pos`, as ordered positions sorted by
    /// nondecreasing distance.
    pub fn neighbors(&self, pos: usize) -> &[usize] {
        &self.neighbors[pos]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Coordinates of ordered position `pos` and its conditioning set.
    pub fn site_and_neighbors(&self, points: &[Point], pos: usize) -> (Point, Vec<Point>) {
        let site = points[self.order[pos]];
        let nbrs = self.neighbors[pos]
            .iter()
            .map(|&q| points[self.order[q]])
            .collect();
        (site, nbrs)
    }
}

/// Conditioning sets of size `min(m, i-1)` drawn from earlier-ordered sites.
pub fn build_conditioning_sets(
    locs: &LocationSet,
    order: &[usize],
    m: usize,
) -> Result<OrderedNeighborGraph> {
    build_conditioning_sets_points(locs.coords(), order, m)
}

pub fn build_conditioning_sets_points(
    points: &[Point],
    order: &[usize],
    m: usize,
) -> Result<OrderedNeighborGraph> {
    if m < 1 {
        return Err(Error::InvalidArgument(
            "conditioning set size m must be at least 1".into(),
        ));
    }
    if order.len() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: order.len(),
        });
    }
    let n = points.len();
    let neighbors = if n > EXHAUSTIVE_SEARCH_LIMIT {
        grid_predecessor_knn(points, order, m)
    } else {
        (0..n)
            .map(|pos| exhaustive_predecessor_knn(points, order, pos, m))
            .collect()
    };
    Ok(OrderedNeighborGraph {
        order: order.to_vec(),
        neighbors,
        m,
    })
}

/// Both steps at once.
pub fn build_graph(locs: &LocationSet, m: usize) -> Result<OrderedNeighborGraph> {
    let order = maxmin_order(locs);
    build_conditioning_sets(locs, &order, m)
}

#[derive(Clone, Copy)]
struct Candidate {
    d2: f64,
    key: usize,
    id: usize,
}

fn cmp_candidate(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.d2.total_cmp(&b.d2).then(a.key.cmp(&b.key))
}

fn keep_k_smallest(cands: &mut Vec<Candidate>, k: usize) {
    if cands.len() > k {
        cands.select_nth_unstable_by(k, cmp_candidate);
        cands.truncate(k);
    }
    cands.sort_by(cmp_candidate);
}

fn exhaustive_predecessor_knn(points: &[Point], order: &[usize], pos: usize, m: usize) -> Vec<usize> {
    let q = points[order[pos]];
    let mut cands: Vec<Candidate> = (0..pos)
        .map(|p| Candidate {
            d2: dist2(&points[order[p]], &q),
            key: order[p],
            id: p,
        })
        .collect();
    keep_k_smallest(&mut cands, m);
    cands.into_iter().map(|c| c.id).collect()
}

fn grid_predecessor_knn(points: &[Point], order: &[usize], m: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut grid = GridIndex::new(points, 2.0);
    let mut out = Vec::with_capacity(n);
    // Early in a max-min ordering the predecessors are sparse; a scan is faster there.
    let scan_below = (8 * m).max(256);
    for pos in 0..n {
        let q = points[order[pos]];
        let nb = if pos <= scan_below {
            exhaustive_predecessor_knn(points, order, pos, m)
        } else {
            grid.knn(&q, m, |id| order[id])
        };
        out.push(nb);
        grid.insert(pos, &points[order[pos]]);
    }
    out
}

/// Uniform bucket grid over the bounding box of a point set. Items carry
/// caller-chosen ids; ties in queries are broken by a caller-supplied key.
#[derive(Debug, Clone)]
pub struct GridIndex {
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<(usize, Point)>>,
}

impl GridIndex {
    /// Grid sized for `points.len()` items at roughly `per_cell` items per cell.
    pub fn new(points: &[Point], per_cell: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if points.is_empty() {
            lo = [0.0, 0.0];
            hi = [1.0, 1.0];
        }
        let w = (hi[0] - lo[0]).max(f64::MIN_POSITIVE);
        let h = (hi[1] - lo[1]).max(f64::MIN_POSITIVE);
        let target_cells = (points.len() as f64 / per_cell).max(1.0);
        let mut cell = (w.max(1e-12) * h.max(1e-12) / target_cells).sqrt();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = w.max(h).max(1e-12);
        }
        cell = cell.max(w.max(h) / 4096.0);
        let nx = ((w / cell).floor() as usize + 1).max(1);
        let ny = ((h / cell).floor() as usize + 1).max(1);
        Self {
            origin: lo,
            cell,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        }
    }

    fn cell_of(&self, p: &Point) -> (usize, usize) {
        let cx = ((p[0] - self.origin[0]) / self.cell).floor();
        let cy = ((p[1] - self.origin[1]) / self.cell).floor();
        let cx = if cx.is_nan() { 0.0 } else { cx };
        let cy = if cy.is_nan() { 0.0 } else { cy };
        (
            (cx.max(0.0) as usize).min(self.nx - 1),
            (cy.max(0.0) as usize).min(self.ny - 1),
        )
    }

    pub fn insert(&mut self, id: usize, p: &Point) {
        let (cx, cy) = self.cell_of(p);
        self.cells[cy * self.nx + cx].push((id, *p));
    }

    /// `k` nearest inserted items to `q`, sorted by (distance, `key(id)`).
    pub fn knn(&self, q: &Point, k: usize, key: impl Fn(usize) -> usize) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let (cx, cy) = self.cell_of(q);
        let max_ring = self.nx.max(self.ny);
        let mut cands: Vec<Candidate> = Vec::with_capacity(4 * k);
        for r in 0..=max_ring {
            let (x0, x1) = (cx as isize - r as isize, cx as isize + r as isize);
            let (y0, y1) = (cy as isize - r as isize, cy as isize + r as isize);
            for y in y0..=y1 {
                if y < 0 || y >= self.ny as isize {
                    continue;
                }
                let on_edge_row = y == y0 || y == y1;
                let mut x = x0;
                while x <= x1 {
                    if x >= 0 && x < self.nx as isize {
                        for &(id, p) in &self.cells[y as usize * self.nx + x as usize] {
                            cands.push(Candidate {
                                d2: dist2(&p, q),
                                key: key(id),
                                id,
                            });
                        }
                    }
                    x += if on_edge_row || r == 0 { 1 } else { x1 - x0 };
                }
            }
            if cands.len() >= k {
                keep_k_smallest(&mut cands, k);
                let reach = r as f64 * self.cell;
                if cands[k - 1].d2.sqrt() < reach {
                    break;
                }
            }
        }
        keep_k_smallest(&mut cands, k);
        cands.into_iter().map(|c| c.id).collect()
    }
}

/// Indices of the `k` nearest points of `points` to `q`, ties by lowest index.
pub fn nearest_k(points: &[Point], q: &Point, k: usize) -> Vec<usize> {
    let mut cands: Vec<Candidate> = points
        .iter()
        .enumerate()
        .map(|(i, p)| Candidate {
            d2: dist2(p, q),
            key: i,
            id: i,
        })
        .collect();
    keep_k_smallest(&mut cands, k);
    cands.into_iter().map(|c| c.id).collect()
}

/// Reusable k-nearest-neighbour lookup over a fixed point set.
pub struct NeighborIndex<'a> {
    points: &'a [Point],
    grid: Option<GridIndex>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let grid = (points.len() > EXHAUSTIVE_SEARCH_LIMIT).then(|| {
            let mut g = GridIndex::new(points, 2.0);
            for (i, p) in points.iter().enumerate() {
                g.insert(i, p);
            }
            g
        });
        Self { points, grid }
    }

    pub fn nearest(&self, q: &Point, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len());
        match &self.grid {
            Some(g) => g.knn(q, k, |i| i),
            None => nearest_k(self.points, q, k),
        }
    }
}
