//! Dimension-generic simplex geometry: Cayley-Menger determinants,
//! hypervolumes, convex-hull inclusion tests, barycentric coordinates and a
//! trilateration solver. Everything here works from inter-node distances
//! only; the coordinate-based routines exist as independent oracles.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A position in `R^m`, stored as a plain coordinate vector.
pub type Point = Vec<f64>;

/// Largest supported ambient dimension.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// `det / s_m` came out negative beyond tolerance: the distances are not
    /// realizable as a simplex (noisy or inconsistent measurements).
    #[error("negative squared volume ({0:.3e})")]
    NegativeSquaredVolume(f64),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("anchors are affinely dependent")]
    DegenerateAnchors,
    #[error("ranges are inconsistent with the anchor geometry")]
    InconsistentRanges,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Symmetric matrix of squared pairwise distances over a node set.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredDistanceMatrix {
    n: usize,
    d2: Vec<f64>,
}

impl SquaredDistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            d2: vec![0.0; n * n],
        }
    }

    /// Build from plain (unsquared) pairwise distances given by `dist(l, j)`.
    pub fn from_distances<F: FnMut(usize, usize) -> f64>(n: usize, mut dist: F) -> Self {
        let mut m = Self::zeros(n);
        for l in 0..n {
            for j in (l + 1)..n {
                let d = dist(l, j);
                m.set(l, j, d * d);
            }
        }
        m
    }

    pub fn from_points(points: &[Point]) -> Self {
        Self::from_distances(points.len(), |l, j| dist(&points[l], &points[j]))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, l: usize, j: usize) -> f64 {
        self.d2[l * self.n + j]
    }

    /// Sets both `(l, j)` and `(j, l)`.
    pub fn set(&mut self, l: usize, j: usize, d2: f64) {
        self.d2[l * self.n + j] = d2;
        self.d2[j * self.n + l] = d2;
    }

    pub fn max_entry(&self) -> f64 {
        self.d2.iter().cloned().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        for l in 0..self.n {
            if self.get(l, l) != 0.0 {
                return Err(GeometryError::InvalidInput("nonzero diagonal".into()));
            }
            for j in 0..self.n {
                let v = self.get(l, j);
                if !(v >= 0.0) {
                    return Err(GeometryError::InvalidInput(format!(
                        "negative or NaN squared distance at ({l},{j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// The Cayley-Menger normalization sequence `s_m = 2^m (m!)^2 / (-1)^(m+1)`,
/// so `s_1 = 2`, `s_2 = -16`, `s_3 = 288`.
pub fn s_coefficient(m: usize) -> f64 {
    let fact: f64 = (1..=m).map(|i| i as f64).product();
    let sign = if (m + 1) % 2 == 0 { 1.0 } else { -1.0 };
    2f64.powi(m as i32) * fact * fact * sign
}

/// Determinant of the bordered matrix `[[0, 1^T], [1, D]]` for a set of
/// `m + 1` nodes in `R^m` (so `dists` must be `(m+1) x (m+1)`).
pub fn cayley_menger_det(dists: &SquaredDistanceMatrix) -> Result<f64> {
    let n = dists.n();
    if n < 2 || n > MAX_DIM + 1 {
        return Err(GeometryError::InvalidInput(format!(
            "Cayley-Menger determinant needs 2..={} nodes, got {n}",
            MAX_DIM + 1
        )));
    }
    let mut m = DMatrix::<f64>::zeros(n + 1, n + 1);
    for j in 1..=n {
        m[(0, j)] = 1.0;
        m[(j, 0)] = 1.0;
    }
    for l in 0..n {
        for j in 0..n {
            m[(l + 1, j + 1)] = dists.get(l, j);
        }
    }
    Ok(m.determinant())
}

fn degeneracy_tol(dists: &SquaredDistanceMatrix, m: usize) -> f64 {
    // det/s_m has units of length^(2m); scale the cutoff accordingly.
    1e-12 * dists.max_entry().max(1.0).powi(m as i32)
}

/// `m`-dimensional hypervolume of the simplex spanned by `m + 1` nodes with
/// the given squared distances: `A = sqrt(det / s_m)`.
pub fn hypervolume_from_sqdists(dists: &SquaredDistanceMatrix) -> Result<f64> {
    let m = dists.n() - 1;
    let det = cayley_menger_det(dists)?;
    let ratio = det / s_coefficient(m);
    let tol = degeneracy_tol(dists, m);
    if ratio < -tol {
        return Err(GeometryError::NegativeSquaredVolume(ratio));
    }
    if ratio.abs() <= tol {
        return Ok(0.0);
    }
    Ok(ratio.sqrt())
}

/// An `m`-simplex: `m + 1` node identities plus their pairwise distances.
/// Construction fails unless the hypervolume is strictly positive.
#[derive(Debug, Clone)]
pub struct Simplex {
    dim: usize,
    members: Vec<usize>,
    dists: SquaredDistanceMatrix,
    volume: f64,
}

impl Simplex {
    pub fn new(dim: usize, members: Vec<usize>, dists: SquaredDistanceMatrix) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(GeometryError::InvalidInput(format!(
                "ambient dimension must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        if members.len() != dim + 1 || dists.n() != dim + 1 {
            return Err(GeometryError::InvalidInput(format!(
                "an {dim}-simplex needs exactly {} members",
                dim + 1
            )));
        }
        dists.validate()?;
        let volume = hypervolume_from_sqdists(&dists)?;
        if volume <= 0.0 {
            return Err(GeometryError::InvalidInput(
                "degenerate simplex: members lie on a low-dimensional hyperplane".into(),
            ));
        }
        Ok(Self {
            dim,
            members,
            dists,
            volume,
        })
    }

    pub fn from_points(members: Vec<usize>, points: &[Point]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        Self::new(dim, members, SquaredDistanceMatrix::from_points(points))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn dists(&self) -> &SquaredDistanceMatrix {
        &self.dists
    }

    pub fn hypervolume(&self) -> f64 {
        self.volume
    }
}

/// Convenience wrapper matching the operation name used elsewhere.
pub fn simplex_hypervolume(s: &Simplex) -> f64 {
    s.hypervolume()
}

/// Outcome of the convex-hull inclusion test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inclusion {
    Inside,
    Outside,
    /// A sub-simplex volume computation failed with a negative squared
    /// volume; the distances are not consistent (expected under noise).
    Degenerate,
}

fn check_candidate_dists(i_dists: &[f64], set: &Simplex) -> Result<()> {
    if i_dists.len() != set.dim + 1 {
        return Err(GeometryError::InvalidInput(format!(
            "need {} candidate distances, got {}",
            set.dim + 1,
            i_dists.len()
        )));
    }
    if i_dists.iter().any(|d| !(*d >= 0.0)) {
        return Err(GeometryError::InvalidInput(
            "negative or NaN candidate distance".into(),
        ));
    }
    Ok(())
}

/// Volumes of the `m + 1` sub-simplices obtained by replacing each member in
/// turn with the candidate point, given the candidate's distances to the
/// members.
pub fn component_volumes(i_dists: &[f64], set: &Simplex) -> Result<Vec<f64>> {
    check_candidate_dists(i_dists, set)?;
    let n = set.dim + 1;
    let mut out = Vec::with_capacity(n);
    for replaced in 0..n {
        let kept: Vec<usize> = (0..n).filter(|&j| j != replaced).collect();
        let mut d = SquaredDistanceMatrix::zeros(n);
        for (a, &ka) in kept.iter().enumerate() {
            for (b, &kb) in kept.iter().enumerate().skip(a + 1) {
                d.set(a, b, set.dists.get(ka, kb));
            }
            let di = i_dists[ka];
            d.set(a, n - 1, di * di);
        }
        out.push(hypervolume_from_sqdists(&d)?);
    }
    Ok(out)
}

/// Signed mismatch `(sum of component volumes - total) / total`; its absolute
/// value is the relative inclusion-test error used to gate noisy updates.
pub fn relative_inclusion_error(i_dists: &[f64], set: &Simplex) -> Result<f64> {
    let comps = component_volumes(i_dists, set)?;
    let total = set.volume;
    Ok((comps.iter().sum::<f64>() - total) / total)
}

/// Tests whether the candidate point lies strictly inside the simplex. The
/// component volumes sum to the total volume iff the point is in the hull;
/// points within `tol_rel` of the boundary (any component volume below
/// `tol_rel * total`) classify as `Outside`.
pub fn inclusion_test(i_dists: &[f64], set: &Simplex, tol_rel: f64) -> Result<Inclusion> {
    let comps = match component_volumes(i_dists, set) {
        Ok(c) => c,
        Err(GeometryError::NegativeSquaredVolume(_)) => return Ok(Inclusion::Degenerate),
        Err(e) => return Err(e),
    };
    let total = set.volume;
    let excess = (comps.iter().sum::<f64>() - total) / total;
    let min_comp = comps.iter().cloned().fold(f64::INFINITY, f64::min);
    if excess <= tol_rel && min_comp > tol_rel * total {
        Ok(Inclusion::Inside)
    } else {
        Ok(Inclusion::Outside)
    }
}

/// Barycentric coordinates of an interior point, from distances only.
#[derive(Debug, Clone, PartialEq)]
pub struct BarycentricWeights {
    weights: Vec<f64>,
}

impl BarycentricWeights {
    /// Normalizes raw component volumes so the weights sum to one exactly.
    fn from_components(comps: &[f64]) -> Self {
        let sum: f64 = comps.iter().sum();
        Self {
            weights: comps.iter().map(|c| c / sum).collect(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Computes the barycentric coordinates of the candidate with respect to the
/// simplex members. The point must pass `inclusion_test` at `tol_rel`.
pub fn barycentric_weights(
    i_dists: &[f64],
    set: &Simplex,
    tol_rel: f64,
) -> Result<BarycentricWeights> {
    match inclusion_test(i_dists, set, tol_rel)? {
        Inclusion::Inside => {}
        other => {
            return Err(GeometryError::PreconditionViolated(format!(
                "barycentric_weights requires an interior point, inclusion test says {other:?}"
            )))
        }
    }
    let comps = component_volumes(i_dists, set)?;
    Ok(BarycentricWeights::from_components(&comps))
}

/// Builds weights directly from raw component volumes. This is the noisy
/// path: the M1/M2 gates have already vetted the components, and the
/// normalization implements modification M3. Returns `None` when the
/// components do not sum to a positive value.
pub fn barycentric_weights_unchecked(comps: &[f64]) -> Option<BarycentricWeights> {
    let sum: f64 = comps.iter().sum();
    (sum > 0.0).then(|| BarycentricWeights::from_components(comps))
}

/// Solves the sphere equations `|x - a_j|^2 = r_j^2` for `m + 1` anchors in
/// `R^m` by subtracting the first equation from the rest, which yields an
/// `m x m` linear system.
pub fn trilaterate(anchors: &[Point], ranges: &[f64]) -> Result<Point> {
    if anchors.is_empty() {
        return Err(GeometryError::InvalidInput("no anchors".into()));
    }
    let m = anchors[0].len();
    if anchors.len() != m + 1 || ranges.len() != m + 1 {
        return Err(GeometryError::InvalidInput(format!(
            "trilateration in R^{m} needs {} anchors and ranges",
            m + 1
        )));
    }
    if anchors.iter().any(|a| a.len() != m) {
        return Err(GeometryError::InvalidInput(
            "anchor dimension mismatch".into(),
        ));
    }
    if ranges.iter().any(|r| !(*r >= 0.0)) {
        return Err(GeometryError::InvalidInput("negative or NaN range".into()));
    }
    let norm2 = |p: &Point| -> f64 { p.iter().map(|x| x * x).sum() };
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for j in 1..=m {
        for c in 0..m {
            a[(j - 1, c)] = 2.0 * (anchors[j][c] - anchors[0][c]);
        }
        rhs[j - 1] =
            norm2(&anchors[j]) - norm2(&anchors[0]) + ranges[0] * ranges[0] - ranges[j] * ranges[j];
    }
    let scale: f64 = anchors
        .iter()
        .map(norm2)
        .chain(ranges.iter().map(|r| r * r))
        .fold(1.0, f64::max);
    let lu = a.clone().lu();
    let x = lu.solve(&rhs).ok_or(GeometryError::DegenerateAnchors)?;
    // An LU solve on a nearly singular system silently produces garbage;
    // the pivot check catches that case.
    let min_pivot = (0..m)
        .map(|i| lu.u()[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-12 * scale.sqrt().max(1.0) {
        return Err(GeometryError::DegenerateAnchors);
    }
    let point: Point = x.iter().cloned().collect();
    for j in 0..=m {
        let residual = dist2(&point, &anchors[j]) - ranges[j] * ranges[j];
        if residual.abs() > 1e-9 * scale {
            return Err(GeometryError::InconsistentRanges);
        }
    }
    Ok(point)
}

/// Hypervolume via the coordinate determinant `|det(p_j - p_0)| / m!`.
/// Independent of the Cayley-Menger path; used as a test oracle.
pub fn coordinate_oracle_volume(points: &[Point]) -> Result<f64> {
    if points.is_empty() {
        return Err(GeometryError::InvalidInput("no points".into()));
    }
    let m = points[0].len();
    if points.len() != m + 1 || points.iter().any(|p| p.len() != m) {
        return Err(GeometryError::InvalidInput(format!(
            "need {} points in common dimension {m}",
            m + 1
        )));
    }
    let mut mat = DMatrix::<f64>::zeros(m, m);
    for r in 0..m {
        for c in 0..m {
            mat[(r, c)] = points[r + 1][c] - points[0][c];
        }
    }
    let fact: f64 = (1..=m).map(|i| i as f64).product();
    Ok(mat.determinant().abs() / fact)
}

/// Barycentric coordinates solved from actual positions (affine system);
/// oracle counterpart of [`barycentric_weights`].
pub fn coordinate_oracle_barycentric(point: &Point, vertices: &[Point]) -> Result<Vec<f64>> {
    let m = point.len();
    if vertices.len() != m + 1 {
        return Err(GeometryError::InvalidInput("vertex count mismatch".into()));
    }
    // Rows: coordinates of each vertex plus the affine constraint sum w = 1.
    let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
    let mut rhs = DVector::<f64>::zeros(m + 1);
    for c in 0..=m {
        for r in 0..m {
            a[(r, c)] = vertices[c][r];
        }
        a[(m, c)] = 1.0;
    }
    for r in 0..m {
        rhs[r] = point[r];
    }
    rhs[m] = 1.0;
    let w = a.lu().solve(&rhs).ok_or(GeometryError::DegenerateAnchors)?;
    Ok(w.iter().cloned().collect())
}
