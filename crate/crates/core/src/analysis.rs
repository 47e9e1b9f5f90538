//! Metrics on trained models: patch association, alignment with the feature,
//! and accuracy against the labeling function.

use serde::Serialize;

use crate::distribution::{label_fn, sample_datapoint, DataPoint, DistributionSpec, Partition};
use crate::error::{invalid, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::{ModelParams, Predictor};
use crate::rng::{purpose, Streams};

/// Indices of the `c` largest entries of each row, ties broken by smallest index.
/// Each returned set is sorted ascending.
pub fn top_c_sets(a: &Matrix, c: usize) -> Result<Vec<Vec<usize>>> {
    if c > a.cols() {
        return Err(invalid(format!("C = {c} exceeds row length {}", a.cols())));
    }
    Ok((0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            let mut top = idx[..c].to_vec();
            top.sort_unstable();
            top
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchAssocReport {
    pub per_row_top_sets: Vec<Vec<usize>>,
    pub per_row_hit: Vec<bool>,
    pub score: f64,
    pub intersection_empty_fraction: f64,
}

/// Fraction of rows whose Top-C set is exactly the row's own partition set.
pub fn patch_association_score(a: &Matrix, partition: &Partition) -> Result<PatchAssocReport> {
    if a.rows() != partition.num_patches() || !a.is_square() {
        return Err(crate::error::Error::Shape(format!(
            "{}x{} attention matrix for {} patches",
            a.rows(),
            a.cols(),
            partition.num_patches()
        )));
    }
    let tops = top_c_sets(a, partition.set_size())?;
    let mut hits = Vec::with_capacity(tops.len());
    let mut empty = 0usize;
    for (i, top) in tops.iter().enumerate() {
        let own = partition.set(partition.set_of(i));
        hits.push(top.as_slice() == own);
        if top.iter().all(|&j| !partition.same_set(i, j)) {
            empty += 1;
        }
    }
    let rows = tops.len() as f64;
    let score = hits.iter().filter(|&&h| h).count() as f64 / rows;
    Ok(PatchAssocReport {
        per_row_top_sets: tops,
        per_row_hit: hits,
        score,
        intersection_empty_fraction: empty as f64 / rows,
    })
}

pub fn cosine_sim(v: &[f64], w_star: &[f64]) -> Result<f64> {
    let nv = norm(v);
    let nw = norm(w_star);
    if nv == 0.0 || nw == 0.0 {
        return Err(invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(v, w_star) / (nv * nw)).clamp(-1.0, 1.0))
}

/// Norm of the component of `v` orthogonal to the unit vector `w_star`.
pub fn residual_norm(v: &[f64], w_star: &[f64]) -> f64 {
    let a = dot(v, w_star);
    v.iter()
        .zip(w_star)
        .map(|(x, w)| (x - a * w).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl Accuracy {
    fn from_hits(hits: usize, samples: usize) -> Self {
        let acc = hits as f64 / samples as f64;
        Self {
            accuracy: acc,
            std_err: (acc * (1.0 - acc) / samples as f64).sqrt(),
            samples,
        }
    }
}

/// Agreement `f*(X) F(X) > 0` on given points; `F = 0` or `f* = 0` counts as an error.
pub fn accuracy_on(
    params: &ModelParams,
    points: &[DataPoint],
    spec: &DistributionSpec,
    partition: &Partition,
) -> Result<Accuracy> {
    if points.is_empty() {
        return Err(invalid("accuracy over zero points"));
    }
    let mut pred = Predictor::new(params)?;
    let hits = points
        .iter()
        .filter(|pt| label_fn(&pt.x, partition, spec) * pred.output(&pt.x) > 0.0)
        .count();
    Ok(Accuracy::from_hits(hits, points.len()))
}

/// Accuracy of an arbitrary scorer against `sign(f*)` on fresh samples.
pub fn scorer_accuracy(
    spec: &DistributionSpec,
    partition: &Partition,
    samples: usize,
    streams: &Streams,
    mut scorer: impl FnMut(&DataPoint) -> f64,
) -> Result<Accuracy> {
    if samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let mut hits = 0;
    for i in 0..samples {
        let pt = sample_datapoint(spec, partition, &mut streams.stream(purpose::EVAL, i as u64))?;
        if label_fn(&pt.x, partition, spec) * scorer(&pt) > 0.0 {
            hits += 1;
        }
    }
    Ok(Accuracy::from_hits(hits, samples))
}

/// Monte-Carlo `P[f*(X) F(X) > 0]` over `samples` fresh draws.
pub fn test_accuracy(
    params: &ModelParams,
    spec: &DistributionSpec,
    partition: &Partition,
    samples: usize,
    streams: &Streams,
) -> Result<Accuracy> {
    let mut pred = Predictor::new(params)?;
    scorer_accuracy(spec, partition, samples, streams, |pt| pred.output(&pt.x))
}

/// Mean and spread of the off-diagonal attention entries, split by whether the
/// two patches share a set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttentionReduction {
    pub gamma_hat: f64,
    pub rho_hat: f64,
    pub within_set_std: f64,
    pub cross_set_std: f64,
}

pub fn reduce_attention(a: &Matrix, partition: &Partition) -> Result<AttentionReduction> {
    let n = partition.num_patches();
    if !a.is_square() || a.rows() != n {
        return Err(crate::error::Error::Shape(
            "attention matrix does not match partition".into(),
        ));
    }
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if partition.same_set(i, j) {
                within.push(a.get(i, j));
            } else {
                cross.push(a.get(i, j));
            }
        }
    }
    let (gamma_hat, within_set_std) = mean_std(&within);
    let (rho_hat, cross_set_std) = mean_std(&cross);
    Ok(AttentionReduction {
        gamma_hat,
        rho_hat,
        within_set_std,
        cross_set_std,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}
