//! HRTF fields, sampling grids, synthetic subjects, field files and subject splits.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::{
    build_sh_matrix, cached_sh_matrix, num_coeffs, sh_index, ShtConfig, ShtOperator, SphericalGrid,
};

/// Ascending frequency bins in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyAxis {
    values: Vec<f64>,
}

impl FrequencyAxis {
    pub const DEFAULT_BINS: usize = 93;
    pub const DEFAULT_MIN_HZ: f64 = 172.0;
    pub const DEFAULT_MAX_HZ: f64 = 16_000.0;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain(
                "frequency axis needs at least one bin".into(),
            ));
        }
        if values.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("frequency axis"));
        }
        if let Some(w) = values.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Domain(format!(
                "frequencies must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { values })
    }

    /// `bins` linearly spaced frequencies from `min_hz` to `max_hz` inclusive.
    pub fn linear(min_hz: f64, max_hz: f64, bins: usize) -> Result<Self> {
        match bins {
            0 => Err(Error::Domain(
                "frequency axis needs at least one bin".into(),
            )),
            1 => Self::new(vec![min_hz]),
            _ => {
                let step = (max_hz - min_hz) / (bins - 1) as f64;
                Self::new((0..bins).map(|i| min_hz + step * i as f64).collect())
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for FrequencyAxis {
    fn default() -> Self {
        Self::linear(
            Self::DEFAULT_MIN_HZ,
            Self::DEFAULT_MAX_HZ,
            Self::DEFAULT_BINS,
        )
        .expect("default axis is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ear {
    Left,
    Right,
}

impl Ear {
    pub const BOTH: [Ear; 2] = [Ear::Left, Ear::Right];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ear::Left => "left",
            Ear::Right => "right",
        }
    }
}

impl fmt::Display for Ear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ear {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Ear::Left),
            "right" => Ok(Ear::Right),
            other => Err(Error::Domain(format!("unknown ear '{other}'"))),
        }
    }
}

/// Magnitude spectra in dB: one row per direction, one column per frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct HrtfField {
    pub values: DMatrix<f64>,
    pub grid: Arc<SphericalGrid>,
    pub freqs: FrequencyAxis,
    pub subject_id: u32,
    pub ear: Ear,
}

impl HrtfField {
    pub fn new(
        values: DMatrix<f64>,
        grid: Arc<SphericalGrid>,
        freqs: FrequencyAxis,
        subject_id: u32,
        ear: Ear,
    ) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(Error::mismatch(
                "field rows vs grid points",
                grid.len(),
                values.nrows(),
            ));
        }
        if values.ncols() != freqs.len() {
            return Err(Error::mismatch(
                "field columns vs frequency bins",
                freqs.len(),
                values.ncols(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("HRTF field values"));
        }
        Ok(Self {
            values,
            grid,
            freqs,
            subject_id,
            ear,
        })
    }

    /// The rows at `indices` bound to `grid` (which must list those directions).
    pub fn restrict(&self, indices: &[usize], grid: Arc<SphericalGrid>) -> Result<Self> {
        let values = select_rows(&self.values, indices)?;
        Self::new(values, grid, self.freqs.clone(), self.subject_id, self.ear)
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, indices: &[usize]) -> Result<DMatrix<f64>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= m.nrows()) {
        return Err(Error::mismatch(
            "row index",
            format!("< {}", m.nrows()),
            bad,
        ));
    }
    Ok(m.select_rows(indices))
}

/// Spherical Fibonacci point set with `points` directions.
pub fn fibonacci_grid(points: usize) -> Result<SphericalGrid> {
    if points == 0 {
        return Err(Error::InvalidGrid(
            "Fibonacci grid needs at least one point".into(),
        ));
    }
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    let dirs = (0..points)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / points as f64;
            crate::sh::Direction::new(z.asin(), golden_angle * i as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    SphericalGrid::new(dirs)
}

/// Known/unknown partition of a dense grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownSplit {
    /// Dense grid with known/unknown labels attached.
    pub dense: Arc<SphericalGrid>,
    pub known_indices: Vec<usize>,
    pub unknown_indices: Vec<usize>,
    pub known: Arc<SphericalGrid>,
    /// `None` when every direction is known.
    pub unknown: Option<Arc<SphericalGrid>>,
}

impl KnownSplit {
    /// Rebuilds the partition from a dense grid that carries labels.
    pub fn from_labeled(dense: SphericalGrid) -> Result<Self> {
        let known_indices = dense.known_indices().ok_or_else(|| {
            Error::InvalidGrid("dense grid carries no known/unknown labels".into())
        })?;
        let unknown_indices = dense.unknown_indices().unwrap_or_default();
        if known_indices.is_empty() {
            return Err(Error::InvalidGrid("no known directions".into()));
        }
        let known = Arc::new(dense.subset(&known_indices)?);
        let unknown = if unknown_indices.is_empty() {
            None
        } else {
            Some(Arc::new(dense.subset(&unknown_indices)?))
        };
        Ok(Self {
            dense: Arc::new(dense),
            known_indices,
            unknown_indices,
            known,
            unknown,
        })
    }
}

/// Picks `n_known` directions of `dense` by greedy farthest-point sampling.
///
/// The first point is chosen from `seed`; each later pick maximises the
/// great-circle distance to the points chosen so far (ties go to the lowest
/// index). Known indices are returned in ascending order. The known subset
/// must support a least-squares SHT at `support_order`.
pub fn split_known(
    dense: &SphericalGrid,
    n_known: usize,
    seed: u64,
    support_order: usize,
    cfg: &ShtConfig,
) -> Result<KnownSplit> {
    let p = dense.len();
    if n_known == 0 || n_known > p {
        return Err(Error::Domain(format!(
            "known count must be in 1..={p}, got {n_known}"
        )));
    }
    let vecs: Vec<[f64; 3]> = dense.directions().iter().map(|d| d.unit_vector()).collect();
    let mut chosen = vec![false; p];
    let mut dist = vec![f64::INFINITY; p];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = rng.random_range(0..p);
    for _ in 0..n_known {
        chosen[next] = true;
        let v = vecs[next];
        for (i, u) in vecs.iter().enumerate() {
            let dot = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).clamp(-1.0, 1.0);
            dist[i] = dist[i].min(dot.acos());
        }
        let mut best = None;
        for i in 0..p {
            if chosen[i] {
                continue;
            }
            match best {
                Some(b) if dist[i] <= dist[b] => {}
                _ => best = Some(i),
            }
        }
        match best {
            Some(b) => next = b,
            None => break,
        }
    }
    let labeled = dense.clone().with_labels(chosen)?;
    let split = KnownSplit::from_labeled(labeled)?;

    let y = build_sh_matrix(&split.known, support_order);
    ShtOperator::new(&y, cfg)?;
    Ok(split)
}

/// Statistical model of the synthetic subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Spatial scale `s0` of the SH coefficients, in dB.
    pub spatial_scale_db: f64,
    /// Decay cutoff `n_c` at the lowest bin; it grows linearly to the ground
    /// truth order at the highest bin.
    pub cutoff_min: f64,
    /// Correlation length of the coefficients along frequency, in Hz.
    pub freq_correlation_hz: f64,
    /// Mean level of the direction-independent envelope, in dB.
    pub envelope_base_db: f64,
    /// Amplitude of the envelope's resonances and notches, in dB.
    pub envelope_ripple_db: f64,
    pub floor_db: f64,
    pub ceil_db: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            spatial_scale_db: 2.0,
            cutoff_min: 2.0,
            freq_correlation_hz: 50_000.0,
            envelope_base_db: -5.0,
            envelope_ripple_db: 4.0,
            floor_db: -60.0,
            ceil_db: 20.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("synth.spatial_scale_db", self.spatial_scale_db),
            ("synth.cutoff_min", self.cutoff_min),
            ("synth.freq_correlation_hz", self.freq_correlation_hz),
            ("synth.envelope_base_db", self.envelope_base_db),
            ("synth.envelope_ripple_db", self.envelope_ripple_db),
            ("synth.floor_db", self.floor_db),
            ("synth.ceil_db", self.ceil_db),
        ];
        for (field, v) in finite {
            if !v.is_finite() {
                return Err(Error::config(field, "must be finite"));
            }
        }
        if self.spatial_scale_db < 0.0 {
            return Err(Error::config("synth.spatial_scale_db", "must be >= 0"));
        }
        if self.cutoff_min <= 0.0 {
            return Err(Error::config("synth.cutoff_min", "must be > 0"));
        }
        if self.freq_correlation_hz <= 0.0 {
            return Err(Error::config("synth.freq_correlation_hz", "must be > 0"));
        }
        if self.floor_db >= self.ceil_db {
            return Err(Error::config(
                "synth.floor_db",
                "must be below synth.ceil_db",
            ));
        }
        Ok(())
    }
}

/// Per-(subject, ear) seed derived from a dataset seed.
pub fn subject_seed(base: u64, subject_id: u32, ear: Ear) -> u64 {
    let tag = ((subject_id as u64) << 1) | matches!(ear, Ear::Right) as u64;
    splitmix64(splitmix64(base) ^ tag)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one synthetic magnitude field, bandlimited at `order` before clamping.
///
/// Coefficient `alpha_nm(l)` has standard deviation `s0 exp(-n / n_c(l))` with
/// `n_c` growing linearly across the bins, and follows a first-order
/// autoregressive process along frequency. A smooth direction-independent
/// envelope is added and the result is clamped to `[floor_db, ceil_db]`.
pub fn synth_subject(
    seed: u64,
    freqs: &FrequencyAxis,
    order: usize,
    dense: Arc<SphericalGrid>,
    params: &SynthParams,
    subject_id: u32,
    ear: Ear,
) -> Result<HrtfField> {
    params.validate()?;
    let l = freqs.len();
    let f = freqs.values();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (lo, hi) = (f[0].max(1.0).log2(), f[l - 1].max(1.0).log2());
    let bumps: Vec<(f64, f64)> = (0..3)
        .map(|_| {
            let gain: f64 = rng.sample(StandardNormal);
            let centre = lo + (hi - lo) * rng.random::<f64>();
            (gain, centre)
        })
        .collect();
    let envelope: Vec<f64> = f
        .iter()
        .map(|&hz| {
            let x = hz.max(1.0).log2();
            params.envelope_base_db
                + params.envelope_ripple_db
                    * bumps
                        .iter()
                        .map(|&(g, c)| g * (-0.5 * ((x - c) / 0.5).powi(2)).exp())
                        .sum::<f64>()
        })
        .collect();

    let cutoff: Vec<f64> = (0..l)
        .map(|i| {
            if l == 1 {
                params.cutoff_min
            } else {
                params.cutoff_min + (order as f64 - params.cutoff_min) * i as f64 / (l - 1) as f64
            }
        })
        .collect();
    let rho: Vec<f64> = (0..l)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                (-(f[i] - f[i - 1]) / params.freq_correlation_hz).exp()
            }
        })
        .collect();

    let mut coeffs = DMatrix::zeros(num_coeffs(order), l);
    for n in 0..=order {
        for m in -(n as i64)..=(n as i64) {
            let row = sh_index(n, m);
            let mut z: f64 = 0.0;
            for i in 0..l {
                let xi: f64 = rng.sample(StandardNormal);
                z = if i == 0 {
                    xi
                } else {
                    rho[i] * z + (1.0 - rho[i] * rho[i]).sqrt() * xi
                };
                coeffs[(row, i)] = params.spatial_scale_db * (-(n as f64) / cutoff[i]).exp() * z;
            }
        }
    }

    let y = cached_sh_matrix(&dense, order);
    let mut values = y.values() * coeffs;
    for (j, mut col) in values.column_iter_mut().enumerate() {
        for v in col.iter_mut() {
            *v = (*v + envelope[j]).clamp(params.floor_db, params.ceil_db);
        }
    }
    HrtfField::new(values, dense, freqs.clone(), subject_id, ear)
}

/// Train/validation/test subject ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
}

impl DatasetSplit {
    /// Checks pairwise disjointness and that the union is `roster`.
    pub fn validate(&self, roster: &[u32]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(*id) {
                return Err(Error::Dataset(format!(
                    "subject {id} appears in more than one split"
                )));
            }
        }
        let roster: BTreeSet<u32> = roster.iter().copied().collect();
        if seen != roster {
            return Err(Error::Dataset(
                "split does not cover the subject roster exactly".into(),
            ));
        }
        Ok(())
    }
}

pub const DEFAULT_PROPORTIONS: [u32; 3] = [77, 10, 7];

/// Seeded shuffle followed by a proportional cut. Validation and test sizes are
/// rounded to nearest and raised to at least one; training takes the rest.
pub fn make_split(subject_ids: &[u32], proportions: [u32; 3], seed: u64) -> Result<DatasetSplit> {
    let n = subject_ids.len();
    if n < 3 {
        return Err(Error::Dataset(format!(
            "need at least 3 subjects for a train/validation/test split, got {n}"
        )));
    }
    let total: u32 = proportions.iter().sum();
    if total == 0 || proportions[0] == 0 {
        return Err(Error::config(
            "split.proportions",
            "training share must be positive",
        ));
    }
    let share = |p: u32| ((n as f64 * p as f64 / total as f64).round() as usize).max(1);
    let n_val = share(proportions[1]);
    let n_test = share(proportions[2]);
    if n_val + n_test >= n {
        return Err(Error::Dataset(format!(
            "{n} subjects cannot be split as {proportions:?} with every set non-empty"
        )));
    }
    let mut ids = subject_ids.to_vec();
    let unique: BTreeSet<u32> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(Error::Dataset("duplicate subject ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = n - n_val - n_test;
    let mut train = ids[..n_train].to_vec();
    let mut validation = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

const FIELD_MAGIC: &str = "HRTF-FIELD";
const GRID_MAGIC: &str = "SPHERICAL-GRID";
pub const FIELD_FORMAT_VERSION: u32 = 1;
pub const GRID_FORMAT_VERSION: u32 = 1;

fn write_grid_lines(out: &mut String, grid: &SphericalGrid) {
    use std::fmt::Write;
    for (i, d) in grid.directions().iter().enumerate() {
        match grid.labels() {
            Some(l) => {
                let tag = if l[i] { "known" } else { "unknown" };
                let _ = writeln!(out, "{} {} {tag}", d.theta(), d.phi());
            }
            None => {
                let _ = writeln!(out, "{} {}", d.theta(), d.phi());
            }
        }
    }
}

/// Text form of a field file.
pub fn format_field(field: &HrtfField) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "{FIELD_MAGIC} {FIELD_FORMAT_VERSION}");
    let _ = writeln!(out, "subject {}", field.subject_id);
    let _ = writeln!(out, "ear {}", field.ear);
    let _ = writeln!(out, "points {}", field.grid.len());
    let _ = writeln!(out, "bins {}", field.freqs.len());
    out.push_str("freqs\n");
    for f in field.freqs.values() {
        let _ = writeln!(out, "{f}");
    }
    out.push_str("grid\n");
    write_grid_lines(&mut out, &field.grid);
    out.push_str("values\n");
    for row in field.values.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn save_field(field: &HrtfField, path: &Path) -> Result<()> {
    std::fs::write(path, format_field(field)).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: &Path) -> Result<HrtfField> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_field(&text, &path.display().to_string())
}

/// Line reader that skips blanks and `#` comments and tracks line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    source: &'a str,
    last_line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, source: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            source,
            last_line: 0,
        }
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.to_string(),
            line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        for (i, raw) in self.inner.by_ref() {
            let line = raw.split('#').next().unwrap_or("").trim();
            self.last_line = i + 1;
            if !line.is_empty() {
                return Ok((i + 1, line));
            }
        }
        Err(self.err(self.last_line + 1, "unexpected end of file"))
    }

    fn expect_keyword(&mut self, keyword: &str) -> Result<()> {
        let (no, line) = self.next_line()?;
        if line != keyword {
            return Err(self.err(no, format!("expected '{keyword}', found '{line}'")));
        }
        Ok(())
    }

    fn key_value(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (no, line) = self.next_line()?;
        let mut parts = line.splitn(2, char::is_whitespace);
        match (parts.next(), parts.next()) {
            (Some(k), Some(v)) if k == key => Ok((no, v.trim())),
            _ => Err(self.err(no, format!("expected '{key} <value>', found '{line}'"))),
        }
    }

    fn parse<T: FromStr>(&self, no: usize, token: &str, what: &str) -> Result<T> {
        token
            .parse()
            .map_err(|_| self.err(no, format!("invalid {what} '{token}'")))
    }

    fn header(&mut self, magic: &str, expected: u32, what: &'static str) -> Result<()> {
        let (no, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(magic) {
            return Err(self.err(no, format!("missing '{magic}' header")));
        }
        let version: u32 = match parts.next() {
            Some(v) => self.parse(no, v, "version")?,
            None => return Err(self.err(no, "missing format version")),
        };
        if version != expected {
            return Err(Error::Version {
                what,
                found: version,
                expected,
            });
        }
        Ok(())
    }

    /// Reads `count` grid lines, stopping early (with an error) at `terminator`.
    fn grid_rows(&mut self, count: usize, terminator: &str) -> Result<SphericalGrid> {
        let mut dirs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut labelled = None;
        let mut first_line = None;
        while dirs.len() < count {
            let (no, line) = self.next_line()?;
            first_line.get_or_insert(no);
            if line == terminator {
                return Err(self.err(
                    no,
                    format!(
                        "header declares {count} points but the grid section has {} rows",
                        dirs.len()
                    ),
                ));
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 2 && toks.len() != 3 {
                return Err(self.err(
                    no,
                    format!("expected 'theta phi [known|unknown]', found '{line}'"),
                ));
            }
            let theta: f64 = self.parse(no, toks[0], "theta")?;
            let phi: f64 = self.parse(no, toks[1], "phi")?;
            let d =
                crate::sh::Direction::new(theta, phi).map_err(|e| self.err(no, e.to_string()))?;
            if d.phi().to_bits() != phi.to_bits() {
                return Err(self.err(no, format!("azimuth {phi} outside [0, 2pi)")));
            }
            let has_label = toks.len() == 3;
            if *labelled.get_or_insert(has_label) != has_label {
                return Err(self.err(no, "either every grid row or none carries a label"));
            }
            if has_label {
                labels.push(match toks[2] {
                    "known" => true,
                    "unknown" => false,
                    other => return Err(self.err(no, format!("invalid label '{other}'"))),
                });
            }
            dirs.push(d);
        }
        let grid = SphericalGrid::new(dirs)
            .map_err(|e| self.err(first_line.unwrap_or(0), e.to_string()))?;
        if labelled == Some(true) {
            grid.with_labels(labels)
        } else {
            Ok(grid)
        }
    }
}

pub fn parse_field(text: &str, source: &str) -> Result<HrtfField> {
    let mut lines = Lines::new(text, source);
    lines.header(FIELD_MAGIC, FIELD_FORMAT_VERSION, "field file")?;
    let (no, v) = lines.key_value("subject")?;
    let subject_id: u32 = lines.parse(no, v, "subject id")?;
    let (no, v) = lines.key_value("ear")?;
    let ear: Ear = v
        .parse()
        .map_err(|_| lines.err(no, format!("invalid ear '{v}'")))?;
    let (no, v) = lines.key_value("points")?;
    let points: usize = lines.parse(no, v, "point count")?;
    let (no, v) = lines.key_value("bins")?;
    let bins: usize = lines.parse(no, v, "bin count")?;
    if points == 0 || bins == 0 {
        return Err(lines.err(no, "point and bin counts must be positive"));
    }

    lines.expect_keyword("freqs")?;
    let mut freqs = Vec::with_capacity(bins);
    let mut freq_line = 0;
    while freqs.len() < bins {
        let (no, line) = lines.next_line()?;
        freq_line = no;
        if line == "grid" {
            return Err(lines.err(
                no,
                format!(
                    "header declares {bins} bins but the freqs section has {} rows",
                    freqs.len()
                ),
            ));
        }
        freqs.push(lines.parse::<f64>(no, line, "frequency")?);
    }
    let freqs = FrequencyAxis::new(freqs).map_err(|e| lines.err(freq_line, e.to_string()))?;

    lines.expect_keyword("grid")?;
    let grid = lines.grid_rows(points, "values")?;
    let (no, line) = lines.next_line()?;
    if line != "values" {
        return Err(lines.err(
            no,
            format!("header declares {points} points but the grid section has more rows (found '{line}')"),
        ));
    }

    let mut values = DMatrix::zeros(points, bins);
    for p in 0..points {
        let (no, line) = lines.next_line()?;
        if line == "end" {
            return Err(lines.err(
                no,
                format!("header declares {points} points but the values section has {p} rows"),
            ));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != bins {
            return Err(lines.err(no, format!("expected {bins} values, found {}", toks.len())));
        }
        for (l, t) in toks.iter().enumerate() {
            values[(p, l)] = lines.parse(no, t, "value")?;
        }
    }
    let (no, line) = lines.next_line()?;
    if line != "end" {
        return Err(lines.err(
            no,
            format!("header declares {points} points but the values section has more rows"),
        ));
    }
    HrtfField::new(values, Arc::new(grid), freqs, subject_id, ear)
        .map_err(|e| lines.err(no, e.to_string()))
}

pub fn format_grid(grid: &SphericalGrid) -> String {
    let mut out = format!(
        "{GRID_MAGIC} {GRID_FORMAT_VERSION}\npoints {}\n",
        grid.len()
    );
    write_grid_lines(&mut out, grid);
    out.push_str("end\n");
    out
}

pub fn parse_grid(text: &str, source: &str) -> Result<SphericalGrid> {
    let mut lines = Lines::new(text, source);
    lines.header(GRID_MAGIC, GRID_FORMAT_VERSION, "grid file")?;
    let (no, v) = lines.key_value("points")?;
    let points: usize = lines.parse(no, v, "point count")?;
    if points == 0 {
        return Err(lines.err(no, "point count must be positive"));
    }
    let grid = lines.grid_rows(points, "end")?;
    let (no, line) = lines.next_line()?;
    if line != "end" {
        return Err(lines.err(
            no,
            format!("header declares {points} points but the file has more rows"),
        ));
    }
    Ok(grid)
}

pub fn save_grid(grid: &SphericalGrid, path: &Path) -> Result<()> {
    std::fs::write(path, format_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &Path) -> Result<SphericalGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text, &path.display().to_string())
}
