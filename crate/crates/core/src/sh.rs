//! Real spherical harmonics and least-squares spherical harmonic transforms.
//!
//! Directions use **elevation** `theta` in `[-pi/2, pi/2]` (0 on the horizontal
//! plane, `+pi/2` straight up) and azimuth `phi` in `[0, 2pi)`. Because of this,
//! the associated Legendre functions are evaluated at `sin(theta)` rather than
//! the `cos(colatitude)` found in most SH references.
//!
//! Basis convention: orthonormal real SH, no Condon-Shortley phase,
//!
//! ```text
//! Y_n0     = sqrt((2n+1)/4pi) P_n^0(sin theta)
//! Y_nm     = sqrt(2) K_nm P_n^m(sin theta) cos(m phi)      m > 0
//! Y_n(-m)  = sqrt(2) K_nm P_n^m(sin theta) sin(m phi)      m > 0
//! K_nm     = sqrt((2n+1)(n-m)! / (4pi (n+m)!))
//! ```
//!
//! Coefficients are flattened with `i = n^2 + n + m`.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Minimum great-circle separation between two grid directions.
pub const MIN_SEPARATION: f64 = 1e-9;

/// Default upper bound on `cond(Y^T Y)` accepted by the least-squares SHT.
pub const DEFAULT_CONDITION_THRESHOLD: f64 = 1e6;

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    theta: f64,
    phi: f64,
}

impl Direction {
    /// Builds a direction from elevation and azimuth in radians. The azimuth is
    /// wrapped into `[0, 2pi)`.
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(Error::Domain(format!(
                "direction must be finite, got ({theta}, {phi})"
            )));
        }
        if !(-PI / 2.0..=PI / 2.0).contains(&theta) {
            return Err(Error::Domain(format!(
                "elevation {theta} outside [-pi/2, pi/2]"
            )));
        }
        let mut phi = phi.rem_euclid(TAU);
        if phi >= TAU {
            phi = 0.0;
        }
        Ok(Self { theta, phi })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [ct * cp, ct * sp, st]
    }

    /// Great-circle distance in radians.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        angle_between(&self.unit_vector(), &other.unit_vector())
    }

    /// This direction rotated about the vertical axis by `angle`.
    pub fn rotated_z(&self, angle: f64) -> Direction {
        // theta is unchanged, so the constructor cannot fail
        Direction::new(self.theta, self.phi + angle).expect("valid elevation")
    }
}

fn angle_between(u: &[f64; 3], v: &[f64; 3]) -> f64 {
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    cross_norm.atan2(dot)
}

/// Content hash identifying a grid by its exact directions.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridHash(pub [u8; 32]);

impl GridHash {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        Some(Self(out))
    }
}

impl fmt::Debug for GridHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GridHash({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for GridHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Ordered set of distinct directions, optionally tagged known/unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalGrid {
    directions: Vec<Direction>,
    known: Option<Vec<bool>>,
    hash: GridHash,
}

impl SphericalGrid {
    pub fn new(directions: Vec<Direction>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidGrid(
                "grid must contain at least one direction".into(),
            ));
        }
        check_distinct(&directions)?;
        let hash = hash_directions(&directions);
        Ok(Self {
            directions,
            known: None,
            hash,
        })
    }

    /// Builds a grid from `(theta, phi)` pairs.
    pub fn from_angles(angles: &[(f64, f64)]) -> Result<Self> {
        let dirs = angles
            .iter()
            .map(|&(t, p)| Direction::new(t, p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dirs)
    }

    /// Attaches a known/unknown flag to every direction.
    pub fn with_labels(mut self, known: Vec<bool>) -> Result<Self> {
        if known.len() != self.directions.len() {
            return Err(Error::mismatch(
                "grid labels",
                self.directions.len(),
                known.len(),
            ));
        }
        self.known = Some(known);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn get(&self, i: usize) -> Option<&Direction> {
        self.directions.get(i)
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.known.as_deref()
    }

    pub fn hash(&self) -> GridHash {
        self.hash
    }

    /// Indices flagged known, or `None` when the grid carries no labels.
    pub fn known_indices(&self) -> Option<Vec<usize>> {
        self.known.as_ref().map(|k| {
            k.iter()
                .enumerate()
                .filter(|(_, &f)| f)
                .map(|(i, _)| i)
                .collect()
        })
    }

    pub fn unknown_indices(&self) -> Option<Vec<usize>> {
        self.known.as_ref().map(|k| {
            k.iter()
                .enumerate()
                .filter(|(_, &f)| !f)
                .map(|(i, _)| i)
                .collect()
        })
    }

    /// Sub-grid of the given rows, in the given order. Labels are dropped.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let dirs = indices
            .iter()
            .map(|&i| {
                self.directions.get(i).copied().ok_or_else(|| {
                    Error::InvalidGrid(format!("index {i} out of range for {} points", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dirs)
    }

    /// Every direction rotated about the vertical axis by `angle`.
    pub fn rotated_z(&self, angle: f64) -> Self {
        let dirs: Vec<Direction> = self.directions.iter().map(|d| d.rotated_z(angle)).collect();
        let hash = hash_directions(&dirs);
        Self {
            directions: dirs,
            known: self.known.clone(),
            hash,
        }
    }
}

fn hash_directions(dirs: &[Direction]) -> GridHash {
    let mut hasher = Sha256::new();
    hasher.update((dirs.len() as u64).to_le_bytes());
    for d in dirs {
        hasher.update(d.theta.to_le_bytes());
        hasher.update(d.phi.to_le_bytes());
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(&hasher.finalize());
    GridHash(out)
}

fn check_distinct(dirs: &[Direction]) -> Result<()> {
    // Two directions closer than MIN_SEPARATION also differ by less than that in z,
    // so a sweep over z-sorted points only has to look at a thin window.
    let vecs: Vec<[f64; 3]> = dirs.iter().map(Direction::unit_vector).collect();
    let mut order: Vec<usize> = (0..vecs.len()).collect();
    order.sort_by(|&a, &b| vecs[a][2].total_cmp(&vecs[b][2]));
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if vecs[j][2] - vecs[i][2] > 2.0 * MIN_SEPARATION {
                break;
            }
            if angle_between(&vecs[i], &vecs[j]) < MIN_SEPARATION {
                let (a, b) = (i.min(j), i.max(j));
                return Err(Error::InvalidGrid(format!(
                    "directions {a} and {b} are closer than {MIN_SEPARATION:e} rad"
                )));
            }
        }
    }
    Ok(())
}

/// Number of coefficients up to and including order `order`.
pub const fn num_coeffs(order: usize) -> usize {
    (order + 1) * (order + 1)
}

/// Flattened coefficient index of `(n, m)`.
pub fn sh_index(n: usize, m: i64) -> usize {
    debug_assert!(m.unsigned_abs() as usize <= n);
    ((n * n + n) as i64 + m) as usize
}

/// Inverse of [`sh_index`].
pub fn sh_order_mode(i: usize) -> (usize, i64) {
    let mut n = (i as f64).sqrt() as usize;
    // guard against sqrt rounding either way
    while n * n > i {
        n -= 1;
    }
    while (n + 1) * (n + 1) <= i {
        n += 1;
    }
    (n, i as i64 - (n * n + n) as i64)
}

/// Order of each flattened coefficient index up to `order`.
pub fn orders_of_indices(order: usize) -> Vec<usize> {
    (0..num_coeffs(order)).map(|i| sh_order_mode(i).0).collect()
}

/// `P_n^m(x)` for a fixed `m` and every `n` in `m..=n_max`, stored at `out[n - m]`.
fn legendre_column(m: usize, n_max: usize, x: f64, out: &mut Vec<f64>) {
    out.clear();
    let s = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    let mut pmm = 1.0;
    let mut odd = 1.0;
    for _ in 0..m {
        pmm *= odd * s;
        odd += 2.0;
    }
    out.push(pmm);
    if n_max == m {
        return;
    }
    out.push(x * (2 * m + 1) as f64 * pmm);
    for n in m + 2..=n_max {
        let p1 = out[n - m - 1];
        let p2 = out[n - m - 2];
        out.push(((2 * n - 1) as f64 * x * p1 - (n + m - 1) as f64 * p2) / (n - m) as f64);
    }
}

/// Associated Legendre function `P_n^m(x)` without the Condon-Shortley phase.
pub fn assoc_legendre(n: usize, m: usize, x: f64) -> Result<f64> {
    if m > n {
        return Err(Error::Domain(format!("mode {m} exceeds order {n}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!(
            "Legendre argument {x} outside [-1, 1]"
        )));
    }
    let mut col = Vec::with_capacity(n - m + 1);
    legendre_column(m, n, x, &mut col);
    Ok(col[n - m])
}

/// `K_nm`, with the extra `sqrt(2)` folded in for `m > 0`.
fn sh_norm(n: usize, m: usize) -> f64 {
    // (n-m)!/(n+m)! as a running product keeps the intermediates small
    let mut ratio = 1.0;
    for k in (n - m + 1)..=(n + m) {
        ratio /= k as f64;
    }
    let k = ((2 * n + 1) as f64 * ratio / (4.0 * PI)).sqrt();
    if m == 0 {
        k
    } else {
        std::f64::consts::SQRT_2 * k
    }
}

/// Orthonormal real spherical harmonic `Y_nm` at `dir`.
pub fn real_sh(n: usize, m: i64, dir: &Direction) -> Result<f64> {
    let am = m.unsigned_abs() as usize;
    if am > n {
        return Err(Error::Domain(format!("|mode| {am} exceeds order {n}")));
    }
    let p = assoc_legendre(n, am, dir.theta.sin())?;
    let az = match m.cmp(&0) {
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Greater => (am as f64 * dir.phi).cos(),
        std::cmp::Ordering::Less => (am as f64 * dir.phi).sin(),
    };
    Ok(sh_norm(n, am) * p * az)
}

/// Writes `Y_nm(dir)` for all `(n, m)` up to `order` into `out` (flattened layout).
pub fn sh_row(order: usize, dir: &Direction, out: &mut [f64]) {
    assert_eq!(out.len(), num_coeffs(order));
    let x = dir.theta.sin();
    let mut col = Vec::with_capacity(order + 1);
    for m in 0..=order {
        legendre_column(m, order, x, &mut col);
        let (c, s) = if m == 0 {
            (1.0, 0.0)
        } else {
            let a = m as f64 * dir.phi;
            (a.cos(), a.sin())
        };
        for n in m..=order {
            let v = sh_norm(n, m) * col[n - m];
            if m == 0 {
                out[sh_index(n, 0)] = v;
            } else {
                out[sh_index(n, m as i64)] = v * c;
                out[sh_index(n, -(m as i64))] = v * s;
            }
        }
    }
}

/// Real SH basis evaluated on a grid: `values[(p, i)] = Y_i(grid[p])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShBasisMatrix {
    values: DMatrix<f64>,
    order: usize,
    grid_id: GridHash,
}

impl ShBasisMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grid_id(&self) -> GridHash {
        self.grid_id
    }

    pub fn points(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_coeffs(&self) -> usize {
        self.values.ncols()
    }
}

/// Evaluates the order-`order` basis on every grid direction. Rows are computed
/// independently, so the result does not depend on the thread count.
pub fn build_sh_matrix(grid: &SphericalGrid, order: usize) -> ShBasisMatrix {
    let k = num_coeffs(order);
    let rows: Vec<Vec<f64>> = grid
        .directions()
        .par_iter()
        .map(|d| {
            let mut row = vec![0.0; k];
            sh_row(order, d, &mut row);
            row
        })
        .collect();
    let values = DMatrix::from_fn(grid.len(), k, |p, i| rows[p][i]);
    ShBasisMatrix {
        values,
        order,
        grid_id: grid.hash(),
    }
}

type BasisCache = Mutex<HashMap<(GridHash, usize), Arc<ShBasisMatrix>>>;

fn basis_cache() -> &'static BasisCache {
    static CACHE: OnceLock<BasisCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// [`build_sh_matrix`] memoized per `(grid, order)`.
pub fn cached_sh_matrix(grid: &SphericalGrid, order: usize) -> Arc<ShBasisMatrix> {
    let key = (grid.hash(), order);
    if let Some(hit) = basis_cache().lock().expect("cache poisoned").get(&key) {
        return Arc::clone(hit);
    }
    let built = Arc::new(build_sh_matrix(grid, order));
    basis_cache()
        .lock()
        .expect("cache poisoned")
        .entry(key)
        .or_insert(built)
        .clone()
}

/// SH coefficients, one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    values: DMatrix<f64>,
    order: usize,
}

impl ShCoefficients {
    pub fn new(values: DMatrix<f64>, order: usize) -> Result<Self> {
        if values.nrows() != num_coeffs(order) {
            return Err(Error::mismatch(
                "SH coefficient rows",
                num_coeffs(order),
                values.nrows(),
            ));
        }
        Ok(Self { values, order })
    }

    pub fn zeros(order: usize, channels: usize) -> Self {
        Self {
            values: DMatrix::zeros(num_coeffs(order), channels),
            order,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, n: usize, m: i64, channel: usize) -> f64 {
        self.values[(sh_index(n, m), channel)]
    }
}

/// Knobs for the least-squares SHT.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShtConfig {
    /// Largest accepted `cond(Y^T Y)`.
    pub condition_threshold: f64,
    /// Optional ridge term `lambda >= 0` added to `Y^T Y`.
    pub ridge: f64,
}

impl Default for ShtConfig {
    fn default() -> Self {
        Self {
            condition_threshold: DEFAULT_CONDITION_THRESHOLD,
            ridge: 0.0,
        }
    }
}

/// 2-norm condition number of `Y^T Y`.
pub fn condition_number(y: &ShBasisMatrix) -> f64 {
    let sv = y.values.clone().svd(false, false).singular_values;
    gram_condition(sv.as_slice(), 0.0)
}

fn gram_condition(singular_values: &[f64], ridge: f64) -> f64 {
    let max = singular_values.iter().copied().fold(0.0, f64::max);
    let min = singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let denom = min * min + ridge;
    if denom == 0.0 {
        f64::INFINITY
    } else {
        (max * max + ridge) / denom
    }
}

/// Precomputed least-squares analysis operator `A` with `a = A H`.
///
/// `A` is obtained from a Householder QR of `Y` (augmented with `sqrt(lambda) I`
/// when a ridge term is set) followed by a triangular solve, never by forming
/// `(Y^T Y)^-1`.
#[derive(Debug, Clone)]
pub struct ShtOperator {
    analysis: DMatrix<f64>,
    order: usize,
    condition: f64,
}

impl ShtOperator {
    pub fn new(y: &ShBasisMatrix, cfg: &ShtConfig) -> Result<Self> {
        let (p, k) = y.values.shape();
        if cfg.ridge < 0.0 || !cfg.ridge.is_finite() {
            return Err(Error::Domain(format!(
                "ridge must be >= 0, got {}",
                cfg.ridge
            )));
        }
        if p < k && cfg.ridge == 0.0 {
            return Err(Error::IllConditioned {
                order: y.order,
                points: p,
                condition: f64::INFINITY,
                threshold: cfg.condition_threshold,
            });
        }
        let system = if cfg.ridge > 0.0 {
            let mut aug = DMatrix::zeros(p + k, k);
            aug.view_mut((0, 0), (p, k)).copy_from(&y.values);
            aug.view_mut((p, 0), (k, k)).fill_diagonal(cfg.ridge.sqrt());
            aug
        } else {
            y.values.clone()
        };
        let qr = system.qr();
        let r = qr.r();
        let q = qr.q();

        let sv_y = if cfg.ridge > 0.0 {
            y.values.clone().svd(false, false).singular_values
        } else {
            r.clone().svd(false, false).singular_values
        };
        let condition = gram_condition(sv_y.as_slice(), cfg.ridge);
        if condition.is_nan() || condition > cfg.condition_threshold {
            return Err(Error::IllConditioned {
                order: y.order,
                points: p,
                condition,
                threshold: cfg.condition_threshold,
            });
        }

        let qt = q.rows(0, p).transpose();
        let analysis = r.solve_upper_triangular(&qt).ok_or(Error::IllConditioned {
            order: y.order,
            points: p,
            condition: f64::INFINITY,
            threshold: cfg.condition_threshold,
        })?;
        Ok(Self {
            analysis,
            order: y.order,
            condition,
        })
    }

    /// `K x P` matrix mapping grid samples to coefficients.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.analysis
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn apply(&self, h: &DMatrix<f64>) -> Result<ShCoefficients> {
        if h.nrows() != self.analysis.ncols() {
            return Err(Error::mismatch(
                "SHT input rows",
                self.analysis.ncols(),
                h.nrows(),
            ));
        }
        Ok(ShCoefficients {
            values: &self.analysis * h,
            order: self.order,
        })
    }
}

/// Least-squares SHT with the default condition threshold and no ridge.
pub fn sht_least_squares(h: &DMatrix<f64>, y: &ShBasisMatrix) -> Result<ShCoefficients> {
    sht_least_squares_with(h, y, &ShtConfig::default())
}

pub fn sht_least_squares_with(
    h: &DMatrix<f64>,
    y: &ShBasisMatrix,
    cfg: &ShtConfig,
) -> Result<ShCoefficients> {
    if h.nrows() != y.points() {
        return Err(Error::mismatch("SHT input rows", y.points(), h.nrows()));
    }
    ShtOperator::new(y, cfg)?.apply(h)
}

/// Inverse SHT: `Y a`.
pub fn isht(a: &ShCoefficients, y: &ShBasisMatrix) -> Result<DMatrix<f64>> {
    if y.num_coeffs() != a.values.nrows() {
        return Err(Error::mismatch(
            "ISHT coefficient rows",
            y.num_coeffs(),
            a.values.nrows(),
        ));
    }
    Ok(&y.values * &a.values)
}
