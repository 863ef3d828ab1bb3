//! Grid codebook over `[-1, 1]^d` and cell-indexed nearest-code routing.
//!
//! Actions live in `[-1, 1]^d`. A codebook is a set of `M` grid points whose
//! coordinates come from the uniform `b`-point lattice `2g/(b-1) - 1`,
//! `g in {0, .., b-1}`. Routing an action means finding its nearest code in
//! Euclidean distance; to make that O(1) per action, the hypercube is split
//! into the `b^d` per-dimension Voronoi cells of the lattice (each cell is
//! identified by its lattice point, its *center*) and a table maps every
//! cell to the code nearest that center (lowest index wins ties). Routing
//! then reduces to computing the cell index of the action and one table
//! lookup, with an exact brute-force fallback for vacant entries.
//!
//! When every cell center is itself a code (`M == b^d`), the cells are the
//! exact Euclidean Voronoi regions of the codes, so the table lookup agrees
//! with brute force everywhere — including on cell boundaries, because the
//! binning rounds boundary coordinates down, which selects the same code as
//! the brute-force lowest-index tie rule.
//!
//! Tables can be cached on disk keyed by `(d, b, M, env)`; loads are
//! integrity-checked by recomputing a seeded sample of cells against brute
//! force and rejected (then rebuilt) on any mismatch.

use crate::hashutil::fnv1a64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// Upper limit on `b^d` table entries (memory guard for pathological dims).
pub const MAX_CELLS: usize = 1 << 24;

/// Environment variable that supplies a cache directory when the run
/// configuration does not set one explicitly.
pub const CACHE_DIR_ENV: &str = "ATTRACT_CACHE_DIR";

const CACHE_MAGIC: &[u8; 8] = b"VQTABLE\0";
const CACHE_VERSION: u32 = 1;
const VACANT: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum VqError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("non-finite action component")]
    NonFiniteAction,
    #[error("codebook exceeds grid: {n} codes requested but only {cells} cells exist")]
    ExceedsGrid { n: usize, cells: usize },
    #[error("grid too large: {cells} cells exceed the {max} limit", max = MAX_CELLS)]
    GridTooLarge { cells: usize },
    #[error("cache io: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("cache rejected: {0}")]
    CacheRejected(String),
}

/// `g`-th of `b` uniformly spaced lattice values on `[-1, 1]`.
#[inline]
pub fn grid_value(g: u32, b: u32) -> f64 {
    2.0 * g as f64 / (b - 1) as f64 - 1.0
}

/// Largest integer `r` with `r^d <= n` (exact integer arithmetic; avoids
/// floating-point roots that misround perfect powers).
fn integer_root(n: usize, d: u32) -> u32 {
    let mut r: u32 = 1;
    loop {
        match (r as u128 + 1).checked_pow(d) {
            Some(p) if p <= n as u128 => r += 1,
            _ => return r,
        }
    }
}

fn cells_for(b: u32, d: usize) -> Result<usize, VqError> {
    let cells = (b as u128).pow(d as u32);
    if cells > MAX_CELLS as u128 {
        return Err(VqError::GridTooLarge { cells: cells.min(usize::MAX as u128) as usize });
    }
    Ok(cells as usize)
}

/// Pick the bins-per-dimension `b` and the code count `n` for a requested
/// code budget.
///
/// With an explicit `b_req`, that request (clamped to `[2, 8]`) wins. In
/// adaptive mode, `b` starts at the integer `d`-th root of `n_req` clamped
/// to `[2, 8]` and shrinks while the grid strictly exceeds the budget. For
/// `d >= 6` the grid is much larger than any practical budget, so the code
/// count is capped at 128 before applying the budget; in all cases the code
/// count never exceeds the number of cells.
pub fn choose_bins(d: usize, n_req: usize, b_req: Option<u32>) -> Result<(u32, usize), VqError> {
    if d == 0 {
        return Err(VqError::InvalidArg("dimension must be at least 1".into()));
    }
    if n_req < 2 {
        return Err(VqError::InvalidArg(format!("need at least 2 codes, got {n_req}")));
    }
    let b = match b_req {
        Some(req) => {
            if req < 2 {
                return Err(VqError::InvalidArg(format!("need at least 2 bins, got {req}")));
            }
            req.min(8)
        }
        None => {
            let mut b = integer_root(n_req, d as u32).clamp(2, 8);
            while (b as u128).pow(d as u32) > n_req as u128 && b > 2 {
                b -= 1;
            }
            b
        }
    };
    let cells = (b as u128).pow(d as u32);
    let mut n = if d >= 6 && cells > n_req as u128 {
        (cells.min(128) as usize).min(n_req)
    } else {
        n_req
    };
    n = n.min(cells.min(usize::MAX as u128) as usize);
    Ok((b, n))
}

/// A set of distinct grid points indexed `0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    d: usize,
    b: u32,
    codes: Vec<Vec<f64>>,
}

impl Codebook {
    /// Codes `0..n` of the sequential digit scheme: code `i` has coordinates
    /// `grid_value(g_k, b)` where `g_k` is the `k`-th base-`b` digit of `i`
    /// (least significant digit -> dimension 0).
    pub fn build(d: usize, n: usize, b: u32) -> Result<Self, VqError> {
        validate_grid(d, b)?;
        let cells = cells_for(b, d)?;
        if n == 0 {
            return Err(VqError::InvalidArg("need at least one code".into()));
        }
        if n > cells {
            return Err(VqError::ExceedsGrid { n, cells });
        }
        let codes = (0..n)
            .map(|i| {
                let mut rem = i;
                (0..d)
                    .map(|_| {
                        let g = (rem % b as usize) as u32;
                        rem /= b as usize;
                        grid_value(g, b)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { d, b, codes })
    }

    /// A codebook from explicit coordinates. Every coordinate must lie on
    /// the `b`-point lattice and codes must be pairwise distinct.
    pub fn from_codes(d: usize, b: u32, codes: Vec<Vec<f64>>) -> Result<Self, VqError> {
        validate_grid(d, b)?;
        let cells = cells_for(b, d)?;
        if codes.is_empty() {
            return Err(VqError::InvalidArg("need at least one code".into()));
        }
        if codes.len() > cells {
            return Err(VqError::ExceedsGrid { n: codes.len(), cells });
        }
        let lattice: Vec<f64> = (0..b).map(|g| grid_value(g, b)).collect();
        for (i, c) in codes.iter().enumerate() {
            if c.len() != d {
                return Err(VqError::InvalidArg(format!(
                    "code {i} has {} coordinates, expected {d}",
                    c.len()
                )));
            }
            for &x in c {
                if !lattice.iter().any(|&l| l == x) {
                    return Err(VqError::InvalidArg(format!(
                        "code {i} coordinate {x} is not on the {b}-point lattice"
                    )));
                }
            }
        }
        for i in 0..codes.len() {
            for j in 0..i {
                if codes[i] == codes[j] {
                    return Err(VqError::InvalidArg(format!("codes {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { d, b, codes })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bins(&self) -> u32 {
        self.b
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, i: usize) -> &[f64] {
        &self.codes[i]
    }

    pub fn codes(&self) -> &[Vec<f64>] {
        &self.codes
    }
}

fn validate_grid(d: usize, b: u32) -> Result<(), VqError> {
    if d == 0 {
        return Err(VqError::InvalidArg("dimension must be at least 1".into()));
    }
    if b < 2 {
        return Err(VqError::InvalidArg(format!("need at least 2 bins, got {b}")));
    }
    Ok(())
}

/// Linear index of the grid cell containing `a` (components clamped to
/// `[-1, 1]`): per dimension the bin is the index of the nearest lattice
/// value, `bin = round((a+1)/2 * (b-1))`, combined as `sum bin_k * b^k`.
///
/// Exact midpoints between two lattice values round *down*, so boundary
/// points land in the cell whose code has the lower index — the same choice
/// the brute-force tie rule makes on full-coverage codebooks.
pub fn cell_index(a: &[f64], b: u32) -> Result<usize, VqError> {
    validate_grid(a.len(), b)?;
    cells_for(b, a.len())?;
    let mut idx: usize = 0;
    let mut stride: usize = 1;
    for &x in a {
        if !x.is_finite() {
            return Err(VqError::NonFiniteAction);
        }
        let x = x.clamp(-1.0, 1.0);
        // round-half-down: ceil(t - 1/2)
        let t = (x + 1.0) / 2.0 * (b - 1) as f64;
        let bin = ((t - 0.5).ceil() as i64).clamp(0, b as i64 - 1) as usize;
        idx += bin * stride;
        stride *= b as usize;
    }
    Ok(idx)
}

/// Center of cell `cell`: the lattice point whose base-`b` digits are the
/// cell's per-dimension bins.
pub fn cell_center(cell: usize, d: usize, b: u32) -> Vec<f64> {
    let mut rem = cell;
    (0..d)
        .map(|_| {
            let bin = rem % b as usize;
            rem /= b as usize;
            grid_value(bin as u32, b)
        })
        .collect()
}

/// Index of the code nearest to `a` in Euclidean distance; the lowest index
/// wins exact ties.
pub fn brute_force_nearest(codebook: &Codebook, a: &[f64]) -> Result<usize, VqError> {
    if a.len() != codebook.d {
        return Err(VqError::InvalidArg(format!(
            "action has {} dims, codebook has {}",
            a.len(),
            codebook.d
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(VqError::NonFiniteAction);
    }
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, c) in codebook.codes.iter().enumerate() {
        let d2: f64 = c.iter().zip(a).map(|(ci, ai)| (ci - ai) * (ci - ai)).sum();
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    Ok(best)
}

/// Outcome of a cached table build.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheOutcome {
    /// No cache directory configured; built in memory.
    Built,
    /// Loaded from a valid cache file.
    Hit,
    /// Built and stored to a fresh cache file.
    Stored,
    /// An existing cache file failed validation; rebuilt (and re-stored).
    Rejected(String),
    /// Built, but storing failed; the in-memory table is still valid.
    StoreFailed(String),
}

/// Precomputed cell -> code routing table. Shareable across threads after
/// construction; the fallback counter is the only interior mutation.
#[derive(Debug)]
pub struct GridTable {
    codebook: Codebook,
    entries: Vec<u32>,
    fallbacks: AtomicU64,
}

impl GridTable {
    /// Map every cell to the code nearest its center (complete coverage).
    pub fn build(codebook: &Codebook) -> Result<Self, VqError> {
        let cells = cells_for(codebook.b, codebook.d)?;
        let entries = (0..cells)
            .map(|cell| {
                let center = cell_center(cell, codebook.d, codebook.b);
                brute_force_nearest(codebook, &center).map(|i| i as u32)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { codebook: codebook.clone(), entries, fallbacks: AtomicU64::new(0) })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    /// Number of routes that had to fall back to brute force.
    pub fn fallback_count(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Route an action to its code: one cell-index computation and one table
    /// lookup on the hit path; vacant entries fall back to exact
    /// brute-force search.
    pub fn route(&self, a: &[f64]) -> Result<usize, VqError> {
        if a.len() != self.codebook.d {
            return Err(VqError::InvalidArg(format!(
                "action has {} dims, table has {}",
                a.len(),
                self.codebook.d
            )));
        }
        let cell = cell_index(a, self.codebook.b)?;
        match self.entries[cell] {
            VACANT => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                brute_force_nearest(&self.codebook, a)
            }
            e => Ok(e as usize),
        }
    }

    #[cfg(test)]
    pub(crate) fn vacate_cell(&mut self, cell: usize) {
        self.entries[cell] = VACANT;
    }

    fn serialize(&self, env: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.codebook.d as u32).to_le_bytes());
        out.extend_from_slice(&self.codebook.b.to_le_bytes());
        out.extend_from_slice(&(self.codebook.len() as u32).to_le_bytes());
        out.extend_from_slice(&(env.len() as u32).to_le_bytes());
        out.extend_from_slice(env.as_bytes());
        for code in &self.codebook.codes {
            for &x in code {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for &e in &self.entries {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out
    }
}

/// File name under the cache directory for a `(d, b, M, env)` key.
pub fn cache_key(d: usize, b: u32, m: usize, env: &str) -> String {
    // Env names come from config; keep the file name shell-safe.
    let safe: String =
        env.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("d{d}_b{b}_m{m}_{safe}.vqt")
}

/// Cache directory resolution: an explicit directory wins, otherwise the
/// `ATTRACT_CACHE_DIR` environment variable, otherwise caching is disabled.
pub fn resolve_cache_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from),
    }
}

/// Build the routing table for `codebook`, reusing a cached copy when a
/// valid one exists under `dir`. Cache failures never fail the build: a
/// rejected or unwritable cache degrades to the freshly built in-memory
/// table (with a warning) and reports the reason in the outcome.
pub fn build_table_cached(
    codebook: &Codebook,
    env: &str,
    dir: Option<&Path>,
) -> Result<(GridTable, CacheOutcome), VqError> {
    let dir = match dir {
        Some(d) => d,
        None => return Ok((GridTable::build(codebook)?, CacheOutcome::Built)),
    };
    let path = dir.join(cache_key(codebook.d, codebook.b, codebook.len(), env));
    let mut rejection = None;
    if path.exists() {
        match load_table(&path, codebook, env) {
            Ok(table) => return Ok((table, CacheOutcome::Hit)),
            Err(e) => {
                log::warn!("routing table cache at {} rejected: {e}; rebuilding", path.display());
                rejection = Some(e.to_string());
            }
        }
    }
    let table = GridTable::build(codebook)?;
    match store_table(&table, env, &path) {
        Ok(()) => Ok(match rejection {
            Some(r) => (table, CacheOutcome::Rejected(r)),
            None => (table, CacheOutcome::Stored),
        }),
        Err(e) => {
            log::warn!("could not store routing table cache at {}: {e}", path.display());
            Ok((table, CacheOutcome::StoreFailed(e.to_string())))
        }
    }
}

fn store_table(table: &GridTable, env: &str, path: &Path) -> Result<(), VqError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&table.serialize(env))?;
    Ok(())
}

/// Load and validate a cached table: header fields and code coordinates
/// must match the request exactly, and a seeded sample of 16 cells is
/// recomputed against brute force. Any mismatch rejects the file.
pub fn load_table(path: &Path, codebook: &Codebook, env: &str) -> Result<GridTable, VqError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let mut take = |n: usize| -> Result<&[u8], VqError> {
        if cur + n > bytes.len() {
            return Err(VqError::CacheRejected("truncated file".into()));
        }
        let s = &bytes[cur..cur + n];
        cur += n;
        Ok(s)
    };
    if take(8)? != CACHE_MAGIC {
        return Err(VqError::CacheRejected("bad magic".into()));
    }
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = read_u32(take(4)?);
    if version != CACHE_VERSION {
        return Err(VqError::CacheRejected(format!(
            "format version {version}, expected {CACHE_VERSION}"
        )));
    }
    let d = read_u32(take(4)?) as usize;
    let b = read_u32(take(4)?);
    let m = read_u32(take(4)?) as usize;
    if d != codebook.d || b != codebook.b || m != codebook.len() {
        return Err(VqError::CacheRejected(format!(
            "key mismatch: file has (d={d}, b={b}, m={m}), requested (d={}, b={}, m={})",
            codebook.d,
            codebook.b,
            codebook.len()
        )));
    }
    let env_len = read_u32(take(4)?) as usize;
    let file_env = std::str::from_utf8(take(env_len)?)
        .map_err(|_| VqError::CacheRejected("bad env name encoding".into()))?;
    if file_env != env {
        return Err(VqError::CacheRejected(format!(
            "env mismatch: file has {file_env:?}, requested {env:?}"
        )));
    }
    for (i, code) in codebook.codes.iter().enumerate() {
        for (k, &x) in code.iter().enumerate() {
            let stored = f64::from_le_bytes(take(8)?.try_into().unwrap());
            if stored.to_bits() != x.to_bits() {
                return Err(VqError::CacheRejected(format!(
                    "code {i} coordinate {k} differs: {stored} vs {x}"
                )));
            }
        }
    }
    let cells = cells_for(b, d)?;
    let mut entries = Vec::with_capacity(cells);
    for _ in 0..cells {
        entries.push(read_u32(take(4)?));
    }
    if cur != bytes.len() {
        return Err(VqError::CacheRejected("trailing bytes".into()));
    }
    for (cell, &e) in entries.iter().enumerate() {
        if e != VACANT && e as usize >= m {
            return Err(VqError::CacheRejected(format!("cell {cell} maps to invalid code {e}")));
        }
    }
    // Spot integrity check: a deterministic sample of cells must agree with
    // brute force on the requested codebook.
    let seed = fnv1a64(cache_key(d, b, m, env).as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..16.min(cells) {
        let cell = rng.gen_range(0..cells);
        let expect = brute_force_nearest(codebook, &cell_center(cell, d, b))? as u32;
        if entries[cell] != expect {
            return Err(VqError::CacheRejected(format!(
                "integrity check failed at cell {cell}: file has {}, brute force gives {expect}",
                entries[cell]
            )));
        }
    }
    Ok(GridTable { codebook: codebook.clone(), entries, fallbacks: AtomicU64::new(0) })
}
