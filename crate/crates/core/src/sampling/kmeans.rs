use crate::error::{Error, Result};
use crate::model::squared_distance;

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster SSE after each assignment step.
    pub sse_trace: Vec<f64>,
    pub iterations: usize,
}

/// Farthest-first seeds: point 0, then repeatedly the point whose distance to
/// its nearest chosen seed is largest (lowest index on ties).
fn farthest_first(points: &[&[f64]], k: usize) -> Vec<Vec<f64>> {
    let mut seeds = vec![points[0].to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, points[0])).collect();
    while seeds.len() < k {
        let mut best = 0;
        for (i, d) in nearest.iter().enumerate() {
            if *d > nearest[best] {
                best = i;
            }
        }
        let chosen = points[best];
        seeds.push(chosen.to_vec());
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(squared_distance(p, chosen));
        }
    }
    seeds
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, squared_distance(p, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from a deterministic farthest-first start. Points are
/// expected in id order so that index 0 is the lowest id.
pub fn kmeans(points: &[&[f64]], k: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::invalid(format!("k = {k} exceeds {} points", points.len())));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }

    let mut centroids = farthest_first(points, k);
    let mut assignments: Vec<usize> = Vec::new();
    let mut sse_trace = Vec::new();
    let mut iterations = 0;

    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut sse = 0.0;
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (c, d) = nearest_centroid(p, &centroids);
                sse += d;
                c
            })
            .collect();
        sse_trace.push(sse);
        if next == assignments {
            break;
        }
        assignments = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed with the point lying farthest from its own centroid
                let mut far = (0, -1.0);
                for (i, p) in points.iter().enumerate() {
                    let d = squared_distance(p, &centroids[assignments[i]]);
                    if d > far.1 {
                        far = (i, d);
                    }
                }
                if far.1 > 0.0 {
                    centroids[c] = points[far.0].to_vec();
                }
            }
        }
    }

    Ok(KMeans {
        assignments,
        centroids,
        sse_trace,
        iterations,
    })
}
