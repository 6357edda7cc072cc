//! Robust positively invariant sets `Z_s = W + A W + ... + A^s W` for stable
//! closed-loop error dynamics `e+ = A e + w`.
//!
//! The closed-loop matrix and disturbance set are split into independent
//! coordinate blocks. One- and two-dimensional blocks are handled exactly
//! (intervals, and polygons via Minkowski sums of vertex lists).

use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;

use super::polytope::{Polytope, SupportFunction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum BlockSet {
    /// `[lo, hi]` on a single coordinate.
    Interval(f64, f64),
    /// Convex polygon, vertices in counter-clockwise order.
    Polygon(Vec<Vector2<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpiBlock {
    pub coords: Vec<usize>,
    pub set: BlockSet,
}

impl RpiBlock {
    fn support(&self, dir: &DVector<f64>) -> f64 {
        match &self.set {
            BlockSet::Interval(lo, hi) => {
                let d = dir[self.coords[0]];
                if d >= 0.0 {
                    d * hi
                } else {
                    d * lo
                }
            }
            BlockSet::Polygon(vs) => {
                let d = Vector2::new(dir[self.coords[0]], dir[self.coords[1]]);
                vs.iter().map(|v| v.dot(&d)).fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    /// Facets `(normal, offset)` of the block in its own coordinates.
    fn facets(&self) -> Vec<(Vec<f64>, f64)> {
        match &self.set {
            BlockSet::Interval(lo, hi) => vec![(vec![1.0], *hi), (vec![-1.0], -lo)],
            BlockSet::Polygon(vs) => polygon_facets(vs),
        }
    }

    fn vertices(&self) -> Vec<Vec<f64>> {
        match &self.set {
            BlockSet::Interval(lo, hi) if lo == hi => vec![vec![*lo]],
            BlockSet::Interval(lo, hi) => vec![vec![*lo], vec![*hi]],
            BlockSet::Polygon(vs) => vs.iter().map(|v| vec![v.x, v.y]).collect(),
        }
    }
}

fn polygon_facets(vs: &[Vector2<f64>]) -> Vec<(Vec<f64>, f64)> {
    match vs.len() {
        0 => Vec::new(),
        1 => {
            let v = vs[0];
            vec![
                (vec![1.0, 0.0], v.x),
                (vec![-1.0, 0.0], -v.x),
                (vec![0.0, 1.0], v.y),
                (vec![0.0, -1.0], -v.y),
            ]
        }
        2 => {
            // Segment: two sides plus the two end caps.
            let (p, q) = (vs[0], vs[1]);
            let d = (q - p).normalize();
            let n = Vector2::new(d.y, -d.x);
            vec![
                (vec![n.x, n.y], n.dot(&p)),
                (vec![-n.x, -n.y], -n.dot(&p)),
                (vec![d.x, d.y], d.dot(&q)),
                (vec![-d.x, -d.y], -d.dot(&p)),
            ]
        }
        k => (0..k)
            .map(|i| {
                let (p, q) = (vs[i], vs[(i + 1) % k]);
                let e = q - p;
                let n = Vector2::new(e.y, -e.x).normalize();
                (vec![n.x, n.y], n.dot(&p))
            })
            .collect(),
    }
}

/// Invariant-set approximation from the truncated Minkowski series.
#[derive(Debug, Clone, PartialEq)]
pub struct RpiSet {
    pub blocks: Vec<RpiBlock>,
    /// Half-space description of the product of the blocks.
    pub polytope: Polytope,
    pub iterations_used: usize,
    pub epsilon: f64,
    dim: usize,
}

impl RpiSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Membership in `scale * Z`.
    pub fn contains_scaled(&self, x: &DVector<f64>, scale: f64, tol: f64) -> bool {
        (0..self.polytope.b.len()).all(|i| self.polytope.a.row(i).dot(&x.transpose()) <= scale * self.polytope.b[i] + tol)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.contains_scaled(x, 1.0, tol)
    }

    /// Number of vertices of each block; `Z`'s vertices are their products.
    pub fn block_vertex_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.vertices().len()).collect()
    }

    /// Vertex of `Z` picking vertex `choice[i]` of block `i`.
    pub fn vertex(&self, choice: &[usize]) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim);
        for (block, &c) in self.blocks.iter().zip(choice) {
            let vs = block.vertices();
            for (k, &coord) in block.coords.iter().enumerate() {
                x[coord] = vs[c % vs.len()][k];
            }
        }
        x
    }

    pub fn random_vertex<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let choice: Vec<usize> = self
            .block_vertex_counts()
            .iter()
            .map(|&n| rng.random_range(0..n))
            .collect();
        self.vertex(&choice)
    }

    /// The origin-only set.
    fn zero(dim: usize, epsilon: f64) -> Self {
        let blocks = (0..dim)
            .map(|i| RpiBlock {
                coords: vec![i],
                set: BlockSet::Interval(0.0, 0.0),
            })
            .collect();
        Self::assemble(blocks, dim, 0, epsilon)
    }

    fn assemble(blocks: Vec<RpiBlock>, dim: usize, iterations_used: usize, epsilon: f64) -> Self {
        let mut rows = Vec::new();
        let mut offsets = Vec::new();
        for block in &blocks {
            for (normal, offset) in block.facets() {
                let mut row = vec![0.0; dim];
                for (k, &c) in block.coords.iter().enumerate() {
                    row[c] = normal[k];
                }
                rows.push(row);
                offsets.push(offset);
            }
        }
        let a = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
        let polytope = Polytope::new(a, DVector::from_vec(offsets)).expect("finite facets");
        Self {
            blocks,
            polytope,
            iterations_used,
            epsilon,
            dim,
        }
    }
}

impl SupportFunction for RpiSet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn support(&self, direction: &DVector<f64>) -> f64 {
        self.blocks.iter().map(|b| b.support(direction)).sum()
    }
}

/// Spectral radius of a real square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut j = i;
    while parent[j] != r {
        let next = parent[j];
        parent[j] = r;
        j = next;
    }
    r
}

fn union(parent: &mut [usize], i: usize, j: usize) {
    let (ri, rj) = (find(parent, i), find(parent, j));
    if ri != rj {
        parent[ri.max(rj)] = ri.min(rj);
    }
}

/// Coordinate groups closed under `A` and not coupled by any facet of `W`.
fn decompose(a: &DMatrix<f64>, w: &Polytope) -> Vec<Vec<usize>> {
    let n = a.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && a[(i, j)] != 0.0 {
                union(&mut parent, i, j);
            }
        }
    }
    for r in 0..w.a.nrows() {
        let nz: Vec<usize> = (0..n).filter(|&c| w.a[(r, c)] != 0.0).collect();
        for pair in nz.windows(2) {
            union(&mut parent, pair[0], pair[1]);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        match groups.iter_mut().find(|g| g[0] == root) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull by Andrew's monotone chain, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| (*a - *b).amax() == 0.0);
    if pts.len() <= 2 {
        return pts;
    }
    let scale = pts
        .iter()
        .map(|p| p.amax())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let tol = 1e-14 * scale * scale;
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= tol {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= tol {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

fn minkowski_polygon(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut sums = Vec::with_capacity(a.len() * b.len());
    for p in a {
        for q in b {
            sums.push(p + q);
        }
    }
    convex_hull(&sums)
}

fn polygon_support(vs: &[Vector2<f64>], d: &Vector2<f64>) -> f64 {
    vs.iter().map(|v| v.dot(d)).fold(f64::NEG_INFINITY, f64::max)
}

/// Truncated Minkowski series of the error dynamics.
///
/// Iteration stops at the first `s` for which, on every facet normal `a` of
/// `Z_s`, the remaining tail `sum_{j>s} h_W((A^j)' a)` is at most
/// `epsilon * h_{Z_s}(a)`. Then the limit set satisfies `Z_inf ⊆ (1+eps) Z_s`,
/// which also gives `A Z_s + W ⊆ (1+eps) Z_s`.
pub fn compute_rpi(a_cl: &DMatrix<f64>, w: &Polytope, epsilon: f64, s_max: usize) -> Result<RpiSet> {
    compute_rpi_capped(a_cl, w, epsilon, s_max, 4000)
}

pub fn compute_rpi_capped(
    a_cl: &DMatrix<f64>,
    w: &Polytope,
    epsilon: f64,
    s_max: usize,
    vertex_cap: usize,
) -> Result<RpiSet> {
    let n = a_cl.nrows();
    if a_cl.ncols() != n || w.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "closed-loop matrix {}x{} with {}-dimensional disturbance set",
            a_cl.nrows(),
            a_cl.ncols(),
            w.dim()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let rho = spectral_radius(a_cl);
    if !(rho < 1.0) {
        return Err(Error::Unstable(rho));
    }
    let w_vertices = w.vertices()?;
    if w_vertices.is_empty() {
        return Err(Error::InvalidArgument("disturbance set is empty".into()));
    }
    if w_vertices.iter().all(|v| v.amax() == 0.0) {
        return Ok(RpiSet::zero(n, epsilon));
    }

    let groups = decompose(a_cl, w);
    let mut blocks = Vec::with_capacity(groups.len());
    let mut iterations_used = 0;
    for coords in groups {
        let (block, iters) = match coords.len() {
            1 => interval_block(a_cl, w, coords[0], epsilon, s_max)?,
            2 => polygon_block(a_cl, &w_vertices, [coords[0], coords[1]], epsilon, s_max, vertex_cap)?,
            k => {
                return Err(Error::Unsupported(format!(
                    "invariant-set block of dimension {k}; only decoupled 1-D and 2-D blocks are supported"
                )))
            }
        };
        iterations_used = iterations_used.max(iters);
        blocks.push(block);
    }
    Ok(RpiSet::assemble(blocks, n, iterations_used, epsilon))
}

fn interval_block(
    a_cl: &DMatrix<f64>,
    w: &Polytope,
    i: usize,
    epsilon: f64,
    s_max: usize,
) -> Result<(RpiBlock, usize)> {
    let a = a_cl[(i, i)];
    let mut e = DVector::zeros(w.dim());
    e[i] = 1.0;
    let whi = w.support(&e);
    let wlo = -w.support(&(-e));
    let interval = |s: f64| if s >= 0.0 { (s * wlo, s * whi) } else { (s * whi, s * wlo) };
    let (mut lo, mut hi) = (wlo, whi);
    let mut power: f64 = 1.0;
    let mut s = 0;
    loop {
        // Remaining tail of the geometric series beyond power a^s.
        let tail_factor = if a.abs() < 1.0 {
            power.abs() * a.abs() / (1.0 - a.abs())
        } else {
            f64::INFINITY
        };
        let tail = tail_factor * wlo.abs().max(whi.abs());
        let done = tail <= epsilon * hi.max(0.0) && tail <= epsilon * (-lo).max(0.0);
        if done || s >= s_max {
            break;
        }
        power *= a;
        let (l, h) = interval(power);
        lo += l;
        hi += h;
        s += 1;
    }
    Ok((
        RpiBlock {
            coords: vec![i],
            set: BlockSet::Interval(lo, hi),
        },
        s,
    ))
}

fn polygon_block(
    a_cl: &DMatrix<f64>,
    w_vertices: &[DVector<f64>],
    coords: [usize; 2],
    epsilon: f64,
    s_max: usize,
    vertex_cap: usize,
) -> Result<(RpiBlock, usize)> {
    let [i, j] = coords;
    let a = nalgebra::Matrix2::new(a_cl[(i, i)], a_cl[(i, j)], a_cl[(j, i)], a_cl[(j, j)]);
    let wb = convex_hull(
        &w_vertices
            .iter()
            .map(|v| Vector2::new(v[i], v[j]))
            .collect::<Vec<_>>(),
    );
    let mut z = wb.clone();
    let mut power = nalgebra::Matrix2::identity();
    let mut s = 0;
    loop {
        if tail_small(&z, &wb, &a, &power, epsilon) || s >= s_max {
            break;
        }
        power = a * power;
        let image: Vec<Vector2<f64>> = wb.iter().map(|v| power * v).collect();
        z = minkowski_polygon(&z, &image);
        if z.len() > vertex_cap {
            return Err(Error::VertexExplosion { limit: vertex_cap });
        }
        s += 1;
    }
    Ok((
        RpiBlock {
            coords: coords.to_vec(),
            set: BlockSet::Polygon(z),
        },
        s,
    ))
}

/// Checks `sum_{j>s} h_W((A^j)' a) <= eps h_Z(a)` on every facet normal of `z`.
fn tail_small(
    z: &[Vector2<f64>],
    wb: &[Vector2<f64>],
    a: &nalgebra::Matrix2<f64>,
    power: &nalgebra::Matrix2<f64>,
    epsilon: f64,
) -> bool {
    let facets = polygon_facets(z);
    for (normal, _) in facets {
        let d = Vector2::new(normal[0], normal[1]);
        let hz = polygon_support(z, &d);
        let mut p = a * power;
        let mut tail = 0.0;
        for _ in 0..100_000 {
            let term = polygon_support(wb, &(p.transpose() * d)).max(0.0);
            tail += term;
            if term <= 1e-17 * tail.max(f64::MIN_POSITIVE) || p.amax() < 1e-300 {
                break;
            }
            p = a * p;
        }
        if tail > epsilon * hz.max(0.0) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::translational_lti;
    use crate::lqr::solve_dare;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn zero_disturbance_gives_origin() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let w = Polytope::symmetric_box(&dv(&[0.0, 0.0])).unwrap();
        let z = compute_rpi(&a, &w, 1e-3, 100).unwrap();
        assert_eq!(z.support(&dv(&[1.0, 1.0])), 0.0);
        assert!(z.contains(&dv(&[0.0, 0.0]), 0.0));
    }

    #[test]
    fn scalar_geometric_series() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let w = Polytope::symmetric_box(&dv(&[1.0])).unwrap();
        let z = compute_rpi(&a, &w, 1e-9, 1000).unwrap();
        let hi = z.support(&dv(&[1.0]));
        assert!(hi <= 2.0 && hi >= 2.0 / (1.0 + 1e-9));
        assert!((z.support(&dv(&[-1.0])) - hi).abs() < 1e-15);
    }

    #[test]
    fn rejects_unstable_and_unsupported() {
        let w = Polytope::symmetric_box(&dv(&[1.0])).unwrap();
        assert!(matches!(
            compute_rpi(&DMatrix::from_element(1, 1, 1.2), &w, 1e-3, 10),
            Err(Error::Unstable(_))
        ));
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.5, 0.1, 0.1, 0.0, 0.5]);
        let w3 = Polytope::symmetric_box(&dv(&[1.0, 1.0, 1.0])).unwrap();
        assert!(matches!(compute_rpi(&a, &w3, 1e-3, 10), Err(Error::Unsupported(_))));
    }

    #[test]
    fn vertex_cap_reports_explosion() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.3, -0.3, 0.9]);
        let w = Polytope::symmetric_box(&dv(&[1.0, 1.0])).unwrap();
        assert!(matches!(
            compute_rpi_capped(&a, &w, 1e-9, 10_000, 16),
            Err(Error::VertexExplosion { limit: 16 })
        ));
    }

    #[test]
    fn hull_drops_interior_and_collinear_points() {
        let pts = [
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(2.0, 0.0),
            Vector2::new(2.0, 2.0),
            Vector2::new(0.0, 2.0),
            Vector2::new(1.0, 1.0),
        ];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert!(cross(&h[0], &h[1], &h[2]) > 0.0);
    }

    #[test]
    fn double_integrator_monte_carlo_containment() {
        let (a, b) = translational_lti(15.0, 0.1);
        let a2 = DMatrix::from_row_slice(2, 2, &[a[(0, 0)], a[(0, 3)], a[(3, 0)], a[(3, 3)]]);
        let b2 = DMatrix::from_row_slice(2, 1, &[b[(0, 0)], b[(3, 0)]]);
        let q = DMatrix::from_diagonal(&dv(&[100.0, 100.0]));
        let r = DMatrix::from_element(1, 1, 1.0);
        let (_, k) = solve_dare(&a2, &b2, &q, &r).unwrap();
        let acl = &a2 + &b2 * &k;
        let w = Polytope::symmetric_box(&dv(&[1e-4, 2e-3])).unwrap();
        let eps = 1e-3;
        let z = compute_rpi(&acl, &w, eps, 2000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wv = w.vertices().unwrap();
        for _ in 0..2000 {
            let mut e = z.random_vertex(&mut rng);
            for _ in 0..200 {
                let wk = if rng.random_bool(0.5) {
                    wv[rng.random_range(0..wv.len())].clone()
                } else {
                    dv(&[rng.random_range(-1e-4..1e-4), rng.random_range(-2e-3..2e-3)])
                };
                e = &acl * e + wk;
                assert!(z.contains_scaled(&e, 1.0 + eps, 1e-15));
            }
        }
    }
}
