use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Anything with a support function `h(a) = max_{x in S} a'x`.
pub trait SupportFunction {
    fn dim(&self) -> usize;
    fn support(&self, direction: &DVector<f64>) -> f64;
}

/// Image `K S` of a set under a linear map; `h_{KS}(a) = h_S(K'a)`.
pub struct LinearImage<'a, S: SupportFunction + ?Sized> {
    pub map: &'a DMatrix<f64>,
    pub set: &'a S,
}

impl<S: SupportFunction + ?Sized> SupportFunction for LinearImage<'_, S> {
    fn dim(&self) -> usize {
        self.map.nrows()
    }

    fn support(&self, direction: &DVector<f64>) -> f64 {
        self.set.support(&(self.map.transpose() * direction))
    }
}

/// Largest number of row subsets tried during brute-force vertex enumeration.
const MAX_COMBINATIONS: u64 = 2_000_000;

/// Convex polytope `{x : A x <= b}` with an optional vertex cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    vertices: Option<Vec<DVector<f64>>>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() || a.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "half-space matrix {}x{} with {} offsets",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite half-space data".into()));
        }
        Ok(Self {
            a,
            b,
            vertices: None,
        })
    }

    /// Axis-aligned box `lo <= x <= hi`, with vertices cached for small dimensions.
    pub fn from_box(lo: &DVector<f64>, hi: &DVector<f64>) -> Result<Self> {
        let n = lo.len();
        if hi.len() != n || n == 0 {
            return Err(Error::DimensionMismatch("box bounds".into()));
        }
        if (0..n).any(|i| !(lo[i] <= hi[i])) {
            return Err(Error::InvalidArgument("box lower bound exceeds upper bound".into()));
        }
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = hi[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lo[i];
        }
        let mut p = Self::new(a, b)?;
        if n <= 12 {
            let mut verts = Vec::with_capacity(1 << n);
            for mask in 0..(1usize << n) {
                let v = DVector::from_fn(n, |i, _| if mask >> i & 1 == 1 { hi[i] } else { lo[i] });
                if !verts.iter().any(|u: &DVector<f64>| (u - &v).amax() == 0.0) {
                    verts.push(v);
                }
            }
            p.vertices = Some(verts);
        }
        Ok(p)
    }

    /// Box `[-half, half]` per coordinate.
    pub fn symmetric_box(half: &DVector<f64>) -> Result<Self> {
        Self::from_box(&(-half), half)
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_halfspaces(&self) -> usize {
        self.a.nrows()
    }

    /// Attach a vertex list known to describe the same set.
    pub fn with_vertices(mut self, vertices: Vec<DVector<f64>>) -> Self {
        self.vertices = Some(vertices);
        self
    }

    pub fn cached_vertices(&self) -> Option<&[DVector<f64>]> {
        self.vertices.as_deref()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let ax = &self.a * x;
        (0..self.b.len()).all(|i| ax[i] <= self.b[i] + tol)
    }

    /// Vertices by brute force over `n`-subsets of the facets.
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        if let Some(v) = &self.vertices {
            return Ok(v.clone());
        }
        enumerate_vertices(&self.a, &self.b)
    }

    /// Fill the vertex cache.
    pub fn with_enumerated_vertices(self) -> Result<Self> {
        let v = self.vertices()?;
        Ok(self.with_vertices(v))
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.vertices()?.is_empty())
    }

    /// `{s x : x in P}` for `s >= 0`.
    pub fn scale(&self, s: f64) -> Polytope {
        Polytope {
            a: self.a.clone(),
            b: &self.b * s,
            vertices: self
                .vertices
                .as_ref()
                .map(|vs| vs.iter().map(|v| v * s).collect()),
        }
    }

    /// Pontryagin difference `P - S = {x : x + s in P for all s in S}` by
    /// offset reduction; errors if the result is empty.
    pub fn pontryagin_difference(&self, other: &dyn SupportFunction) -> Result<Polytope> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "subtracting a {}-dimensional set from a {}-dimensional polytope",
                other.dim(),
                self.dim()
            )));
        }
        let b = DVector::from_fn(self.b.len(), |i, _| {
            let row = self.a.row(i).transpose();
            self.b[i] - other.support(&row)
        });
        if self.as_box().is_some() {
            let n = self.dim();
            let hi = DVector::from_fn(n, |i, _| b[2 * i]);
            let lo = DVector::from_fn(n, |i, _| -b[2 * i + 1]);
            if (0..n).any(|i| lo[i] > hi[i] + 1e-12) {
                return Err(Error::InfeasibleTightening(format!(
                    "tightened box has lower {:?} above upper {:?}",
                    lo.as_slice(),
                    hi.as_slice()
                )));
            }
            let hi = hi.zip_map(&lo, f64::max);
            return Polytope::from_box(&lo, &hi);
        }
        let out = Polytope::new(self.a.clone(), b)?.with_enumerated_vertices()?;
        if out.cached_vertices().is_some_and(|v| v.is_empty()) {
            return Err(Error::InfeasibleTightening("Pontryagin difference is empty".into()));
        }
        Ok(out)
    }

    /// Lower and upper corners if every facet is `+-e_i` in the layout of
    /// [`Polytope::from_box`].
    pub fn as_box(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.dim();
        if self.a.nrows() != 2 * n {
            return None;
        }
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let (up, down) = (self.a[(2 * i, j)], self.a[(2 * i + 1, j)]);
                let (eu, ed) = if i == j { (1.0, -1.0) } else { (0.0, 0.0) };
                if up != eu || down != ed {
                    return None;
                }
            }
            hi[i] = self.b[2 * i];
            lo[i] = -self.b[2 * i + 1];
        }
        Some((lo, hi))
    }
}

impl SupportFunction for Polytope {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn support(&self, direction: &DVector<f64>) -> f64 {
        if let Some((lo, hi)) = self.as_box() {
            return (0..lo.len())
                .map(|i| {
                    let d = direction[i];
                    if d > 0.0 {
                        d * hi[i]
                    } else {
                        d * lo[i]
                    }
                })
                .sum();
        }
        match self.vertices() {
            Ok(vs) => vs
                .iter()
                .map(|v| v.dot(direction))
                .fold(f64::NEG_INFINITY, f64::max),
            Err(_) => f64::INFINITY,
        }
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k.min(n));
    let mut r: u64 = 1;
    for i in 0..k {
        r = r.saturating_mul((n - i) as u64) / (i as u64 + 1);
    }
    r
}

fn enumerate_vertices(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::InvalidArgument("polytope is unbounded (fewer facets than dimensions)".into()));
    }
    if binomial(m, n) > MAX_COMBINATIONS {
        return Err(Error::Unsupported(format!(
            "vertex enumeration of {m} facets in dimension {n}"
        )));
    }
    let scale = b.amax().max(1.0);
    let tol = 1e-9 * scale;
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let sub = DMatrix::from_fn(n, n, |r, c| a[(idx[r], c)]);
        let rhs = DVector::from_fn(n, |r, _| b[idx[r]]);
        if let Some(x) = sub.lu().solve(&rhs) {
            if x.iter().all(|v| v.is_finite()) {
                let ax = a * &x;
                if (0..m).all(|i| ax[i] <= b[i] + tol)
                    && !out.iter().any(|v| (v - &x).amax() <= tol)
                {
                    out.push(x);
                }
            }
        }
        // Next combination in lexicographic order.
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            if idx[i] < m - n + i {
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}
