//! The spatially structured binary classification distribution.
//!
//! Patches are indexed `0..D` internally. Files and reports use 1-based
//! patch and set indices.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, norm};
use crate::rng::{purpose, Streams};

/// A partition of the patch indices into `L` disjoint sets of `C` patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    set_size: usize,
    membership: Vec<usize>,
    sets: Vec<Vec<usize>>,
}

impl Partition {
    /// Builds a partition from explicit 0-based sets, checking disjointness and coverage.
    pub fn from_sets(sets: Vec<Vec<usize>>) -> Result<Self> {
        if sets.is_empty() {
            return Err(invalid("partition needs at least one set"));
        }
        let set_size = sets[0].len();
        if set_size == 0 {
            return Err(invalid("partition sets must be nonempty"));
        }
        let total = set_size * sets.len();
        let mut membership = vec![usize::MAX; total];
        for (l, set) in sets.iter().enumerate() {
            if set.len() != set_size {
                return Err(invalid(format!(
                    "set {} has {} elements, expected {}",
                    l + 1,
                    set.len(),
                    set_size
                )));
            }
            for &j in set {
                if j >= total {
                    return Err(invalid(format!("patch index {j} out of range 0..{total}")));
                }
                if membership[j] != usize::MAX {
                    return Err(invalid(format!("patch {j} appears in two sets")));
                }
                membership[j] = l;
            }
        }
        Ok(Self {
            set_size,
            membership,
            sets,
        })
    }

    /// Builds a partition from a membership array (patch -> 0-based set index).
    pub fn from_membership(membership: &[usize]) -> Result<Self> {
        let num_sets = membership.iter().copied().max().map_or(0, |m| m + 1);
        let mut sets = vec![Vec::new(); num_sets];
        for (j, &l) in membership.iter().enumerate() {
            sets[l].push(j);
        }
        Self::from_sets(sets)
    }

    /// `D`
    pub fn num_patches(&self) -> usize {
        self.membership.len()
    }

    /// `C`
    pub fn set_size(&self) -> usize {
        self.set_size
    }

    /// `L`
    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn set_of(&self, patch: usize) -> usize {
        self.membership[patch]
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn set(&self, l: usize) -> &[usize] {
        &self.sets[l]
    }

    pub fn same_set(&self, i: usize, j: usize) -> bool {
        self.membership[i] == self.membership[j]
    }
}

/// Partition of a row-major `grid_rows x grid_cols` patch grid into contiguous blocks.
pub fn make_localized_partition(
    grid_rows: usize,
    grid_cols: usize,
    block_rows: usize,
    block_cols: usize,
) -> Result<Partition> {
    if grid_rows == 0 || grid_cols == 0 || block_rows == 0 || block_cols == 0 {
        return Err(invalid("grid and block dimensions must be positive"));
    }
    if !grid_rows.is_multiple_of(block_rows) || !grid_cols.is_multiple_of(block_cols) {
        return Err(invalid(format!(
            "block {block_rows}x{block_cols} does not tile grid {grid_rows}x{grid_cols}"
        )));
    }
    let blocks_per_row = grid_cols / block_cols;
    let mut sets = Vec::new();
    for br in 0..grid_rows / block_rows {
        for bc in 0..blocks_per_row {
            let mut set = Vec::with_capacity(block_rows * block_cols);
            for r in 0..block_rows {
                for c in 0..block_cols {
                    set.push((br * block_rows + r) * grid_cols + bc * block_cols + c);
                }
            }
            sets.push(set);
        }
    }
    Partition::from_sets(sets)
}

/// Uniformly random partition of `0..num_patches` into sets of `set_size`.
pub fn make_random_partition<R: Rng + ?Sized>(num_patches: usize, set_size: usize, rng: &mut R) -> Result<Partition> {
    if set_size == 0 || num_patches == 0 || !num_patches.is_multiple_of(set_size) {
        return Err(invalid(format!(
            "set size {set_size} does not divide patch count {num_patches}"
        )));
    }
    let mut perm: Vec<usize> = (0..num_patches).collect();
    perm.shuffle(rng);
    let sets = perm
        .chunks(set_size)
        .map(|c| {
            let mut s = c.to_vec();
            s.sort_unstable();
            s
        })
        .collect();
    Partition::from_sets(sets)
}

/// Uniform draw from the unit sphere in `R^d`.
pub fn sample_feature<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(invalid("feature dimension must be at least 1"));
    }
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&g);
        if n > 1e-300 {
            return Ok(g.into_iter().map(|x| x / n).collect());
        }
    }
}

/// Population parameters of the distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionSpec {
    pub d: usize,
    pub num_patches: usize,
    pub set_size: usize,
    pub num_sets: usize,
    /// Probability that a non-signal patch carries `±w*`.
    pub q: f64,
    pub sigma2: f64,
    pub threshold_frac: f64,
    pub w_star: Vec<f64>,
}

impl DistributionSpec {
    pub fn new(
        d: usize,
        partition: &Partition,
        q: f64,
        sigma2: f64,
        threshold_frac: f64,
        w_star: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self {
            d,
            num_patches: partition.num_patches(),
            set_size: partition.set_size(),
            num_sets: partition.num_sets(),
            q,
            sigma2,
            threshold_frac,
            w_star,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("d must be positive"));
        }
        if self.w_star.len() != self.d {
            return Err(Error::Shape(format!(
                "w_star has {} entries, d = {}",
                self.w_star.len(),
                self.d
            )));
        }
        if (norm(&self.w_star) - 1.0).abs() > 1e-12 {
            return Err(invalid("w_star must have unit norm"));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(invalid(format!("q = {} outside [0, 1]", self.q)));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(invalid(format!("sigma2 = {} must be >= 0", self.sigma2)));
        }
        if !(self.threshold_frac > 0.0 && self.threshold_frac < 1.0) {
            return Err(invalid(format!(
                "threshold_frac = {} outside (0, 1)",
                self.threshold_frac
            )));
        }
        if self.set_size * self.num_sets != self.num_patches {
            return Err(invalid("L * C must equal D"));
        }
        Ok(())
    }

    /// Labeling threshold `threshold_frac * C`.
    pub fn threshold(&self) -> f64 {
        self.threshold_frac * self.set_size as f64
    }

    pub fn check_partition(&self, partition: &Partition) -> Result<()> {
        if partition.num_patches() != self.num_patches
            || partition.set_size() != self.set_size
            || partition.num_sets() != self.num_sets
        {
            return Err(Error::Shape(format!(
                "partition (D={}, C={}, L={}) does not match spec (D={}, C={}, L={})",
                partition.num_patches(),
                partition.set_size(),
                partition.num_sets(),
                self.num_patches,
                self.set_size,
                self.num_sets
            )));
        }
        Ok(())
    }

    /// Same spec with another feature vector.
    pub fn with_feature(&self, w_star: Vec<f64>) -> Result<Self> {
        let spec = Self { w_star, ..self.clone() };
        spec.validate()?;
        Ok(spec)
    }
}

/// One labelled sample. Patches are stored contiguously, patch `j` at `x[j*d..(j+1)*d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPoint {
    pub x: Vec<f64>,
    pub d: usize,
    pub y: i8,
    pub signal_set: usize,
    /// Feature-noise coefficient per patch; signal patches hold `y` as a placeholder.
    pub delta: Vec<i8>,
}

impl DataPoint {
    pub fn num_patches(&self) -> usize {
        self.delta.len()
    }

    pub fn patch(&self, j: usize) -> &[f64] {
        &self.x[j * self.d..(j + 1) * self.d]
    }

    pub fn patches(&self) -> std::slice::ChunksExact<'_, f64> {
        self.x.chunks_exact(self.d)
    }

    pub fn label(&self) -> f64 {
        f64::from(self.y)
    }
}

/// The discrete part of a sample: label, signal set and per-patch coefficients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coefficients {
    pub y: i8,
    pub signal_set: usize,
    /// `y` on signal patches, `delta_j` elsewhere.
    pub delta: Vec<i8>,
}

/// Draws `(y, l, delta)`. [`sample_datapoint`] starts with exactly this call on
/// the same generator, so both see identical coefficients.
pub fn sample_coefficients<R: Rng + ?Sized>(
    spec: &DistributionSpec,
    partition: &Partition,
    rng: &mut R,
) -> Result<Coefficients> {
    spec.check_partition(partition)?;
    let y: i8 = if rng.random::<bool>() { 1 } else { -1 };
    let signal_set = rng.random_range(0..spec.num_sets);
    let delta = (0..spec.num_patches)
        .map(|j| {
            if partition.set_of(j) == signal_set {
                y
            } else {
                let u: f64 = rng.random();
                if u < spec.q / 2.0 {
                    1
                } else if u < spec.q {
                    -1
                } else {
                    0
                }
            }
        })
        .collect();
    Ok(Coefficients { y, signal_set, delta })
}

/// Draws one sample.
pub fn sample_datapoint<R: Rng + ?Sized>(
    spec: &DistributionSpec,
    partition: &Partition,
    rng: &mut R,
) -> Result<DataPoint> {
    let Coefficients { y, signal_set, delta } = sample_coefficients(spec, partition, rng)?;
    let d = spec.d;
    let sigma = spec.sigma2.sqrt();
    let w = &spec.w_star;
    let mut x = vec![0.0; d * spec.num_patches];
    for (patch, &coef) in x.chunks_exact_mut(d).zip(&delta) {
        for p in patch.iter_mut() {
            *p = rng.sample(StandardNormal);
        }
        let proj = dot(patch, w);
        let c = f64::from(coef);
        for (p, &wk) in patch.iter_mut().zip(w) {
            *p = c * wk + sigma * (*p - proj * wk);
        }
    }
    Ok(DataPoint {
        x,
        d,
        y,
        signal_set,
        delta,
    })
}

/// `f*` evaluated from the coefficients alone. Noise is orthogonal to `w*`, so
/// this equals [`label_fn`] up to rounding.
pub fn label_from_coefficients(delta: &[i8], partition: &Partition, spec: &DistributionSpec) -> f64 {
    let thr = spec.threshold();
    partition
        .sets()
        .iter()
        .map(|set| {
            let mass: f64 = set.iter().map(|&j| f64::from(delta[j])).sum();
            if mass.abs() > thr {
                mass
            } else {
                0.0
            }
        })
        .sum()
}

/// `f*(X) = sum_l Threshold(sum_{i in S_l} <w*, X_i>)`.
pub fn label_fn(x: &[f64], partition: &Partition, spec: &DistributionSpec) -> f64 {
    let d = spec.d;
    let thr = spec.threshold();
    partition
        .sets()
        .iter()
        .map(|set| {
            let mass: f64 = set.iter().map(|&j| dot(&spec.w_star, &x[j * d..(j + 1) * d])).sum();
            if mass.abs() > thr {
                mass
            } else {
                0.0
            }
        })
        .sum()
}

/// Monte-Carlo estimate of `P[y f*(X) > 0]`, using `streams` purpose `EVAL`.
/// Only the coefficient prefix of each draw is generated.
pub fn label_consistency(
    spec: &DistributionSpec,
    partition: &Partition,
    samples: usize,
    streams: &Streams,
) -> Result<f64> {
    if samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let mut hits = 0usize;
    for i in 0..samples {
        let mut rng = streams.stream(purpose::EVAL, i as u64);
        let c = sample_coefficients(spec, partition, &mut rng)?;
        if f64::from(c.y) * label_from_coefficients(&c.delta, partition, spec) > 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

/// Exact law of `sum_k delta_k` over `n` independent non-signal coefficients.
/// Entry `s + n` holds `P[sum = s]` for `s` in `-n..=n`.
pub fn delta_sum_pmf(n: usize, q: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; 2 * n + 1];
    pmf[n] = 1.0;
    // after k factors the support is n-k..=n+k
    for k in 0..n {
        let mut next = vec![0.0; 2 * n + 1];
        for s in (n - k)..=(n + k) {
            let m = pmf[s];
            next[s - 1] += m * q / 2.0;
            next[s] += m * (1.0 - q);
            next[s + 1] += m * q / 2.0;
        }
        pmf = next;
    }
    pmf
}

/// Exact `P[y f*(X) > 0]`. The signal set always contributes `y C`; every other
/// set contributes its `delta` mass when that mass clears the threshold.
pub fn label_consistency_exact(spec: &DistributionSpec) -> Result<f64> {
    spec.validate()?;
    let c = spec.set_size;
    let thr = spec.threshold();
    let per_set: Vec<(i64, f64)> = delta_sum_pmf(c, spec.q)
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let m = k as i64 - c as i64;
            (if (m as f64).abs() > thr { m } else { 0 }, p)
        })
        .collect();
    let others = spec.num_sets - 1;
    let span = (others * c) as i64;
    let width = (2 * span + 1) as usize;
    let mut dist = vec![0.0; width];
    dist[span as usize] = 1.0;
    for _ in 0..others {
        let mut next = vec![0.0; width];
        for (s, &m) in dist.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for &(v, p) in &per_set {
                let t = s as i64 + v;
                if (0..width as i64).contains(&t) {
                    next[t as usize] += m * p;
                }
            }
        }
        dist = next;
    }
    Ok(dist
        .iter()
        .enumerate()
        .filter(|(s, _)| c as i64 + (*s as i64 - span) > 0)
        .map(|(_, m)| m)
        .sum())
}

/// A sampled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DistributionSpec,
    pub partition: Partition,
    pub points: Vec<DataPoint>,
    pub seed: u64,
}

impl Dataset {
    /// Samples `n` points; point `i` uses stream `(purpose_id, i)` of `streams`.
    pub fn sample(
        spec: &DistributionSpec,
        partition: &Partition,
        n: usize,
        streams: &Streams,
        purpose_id: u64,
    ) -> Result<Self> {
        spec.check_partition(partition)?;
        let points = (0..n)
            .map(|i| sample_datapoint(spec, partition, &mut streams.stream(purpose_id, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            partition: partition.clone(),
            points,
            seed: streams.master(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// First `n` points.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            points: self.points[..n.min(self.points.len())].to_vec(),
            ..self.clone()
        }
    }

    /// Text serialization: `key = value` header, a `---` line, then one row per point.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let s = &self.spec;
        let mut header = String::new();
        writeln!(header, "# patchassoc dataset v1").ok();
        writeln!(header, "d = {}", s.d).ok();
        writeln!(header, "D = {}", s.num_patches).ok();
        writeln!(header, "C = {}", s.set_size).ok();
        writeln!(header, "L = {}", s.num_sets).ok();
        writeln!(header, "q = {}", fmt17(s.q)).ok();
        writeln!(header, "sigma2 = {}", fmt17(s.sigma2)).ok();
        writeln!(header, "threshold_frac = {}", fmt17(s.threshold_frac)).ok();
        writeln!(header, "seed = {}", self.seed).ok();
        writeln!(header, "n = {}", self.points.len()).ok();
        writeln!(
            header,
            "membership = {}",
            join(self.partition.membership().iter().map(|l| l + 1))
        )
        .ok();
        writeln!(header, "w_star = {}", join(s.w_star.iter().map(|&w| fmt17(w)))).ok();
        writeln!(header, "---").ok();
        out.write_all(header.as_bytes())?;
        let mut line = String::new();
        for pt in &self.points {
            line.clear();
            write!(line, "{} {}", pt.y, pt.signal_set + 1).ok();
            for &dl in &pt.delta {
                write!(line, " {dl}").ok();
            }
            for &v in &pt.x {
                line.push(' ');
                line.push_str(&fmt17(v));
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut kv = std::collections::BTreeMap::new();
        for line in lines.by_ref() {
            let line = line?;
            let t = line.trim();
            if t == "---" {
                break;
            }
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header line `{t}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("missing header key `{k}`")))
        };
        let d: usize = parse_num(get("d")?)?;
        let num_patches: usize = parse_num(get("D")?)?;
        let n: usize = parse_num(get("n")?)?;
        let membership = get("membership")?
            .split_whitespace()
            .map(|t| {
                parse_num::<usize>(t).and_then(|l| l.checked_sub(1).ok_or_else(|| Error::Parse("set index 0".into())))
            })
            .collect::<Result<Vec<_>>>()?;
        let partition = Partition::from_membership(&membership)?;
        let w_star = get("w_star")?
            .split_whitespace()
            .map(parse_num::<f64>)
            .collect::<Result<Vec<_>>>()?;
        let spec = DistributionSpec::new(
            d,
            &partition,
            parse_num(get("q")?)?,
            parse_num(get("sigma2")?)?,
            parse_num(get("threshold_frac")?)?,
            w_star,
        )?;
        if spec.num_patches != num_patches {
            return Err(Error::Parse("D disagrees with membership".into()));
        }
        let seed: u64 = parse_num(get("seed")?)?;
        let mut points = Vec::with_capacity(n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 2 + num_patches + d * num_patches {
                return Err(Error::Parse(format!(
                    "row {} has {} fields",
                    points.len() + 1,
                    toks.len()
                )));
            }
            let y: i8 = parse_num(toks[0])?;
            let signal_set = parse_num::<usize>(toks[1])?
                .checked_sub(1)
                .ok_or_else(|| Error::Parse("signal set index 0".into()))?;
            let delta = toks[2..2 + num_patches]
                .iter()
                .map(|t| parse_num::<i8>(t))
                .collect::<Result<Vec<_>>>()?;
            let x = toks[2 + num_patches..]
                .iter()
                .map(|t| parse_num::<f64>(t))
                .collect::<Result<Vec<_>>>()?;
            points.push(DataPoint {
                x,
                d,
                y,
                signal_set,
                delta,
            });
        }
        if points.len() != n {
            return Err(Error::Parse(format!(
                "header says n = {n}, found {} rows",
                points.len()
            )));
        }
        Ok(Self {
            spec,
            partition,
            points,
            seed,
        })
    }
}

/// 17 significant digits, enough to round-trip an `f64`.
pub(crate) fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn join<I: IntoIterator<Item = T>, T: ToString>(it: I) -> String {
    it.into_iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("cannot parse `{s}`")))
}
