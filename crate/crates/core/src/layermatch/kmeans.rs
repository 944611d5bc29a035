//! k-means with k-means++ seeding, and cluster purity.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::encoder::Backbone;

pub const KMEANS_ITERATIONS: usize = 20;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cluster index of each of the `points.len() / dim` rows.
pub fn kmeans(points: &[f64], dim: usize, k: usize, iterations: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::shape("kmeans", format!("{} values in rows of {dim}", points.len())));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means with k={k} on {n} points")));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centers: Vec<Vec<f64>> = vec![row(rng.below(n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.below(n)
        };
        centers.push(row(next).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(row(i), centers.last().expect("center")));
        }
    }

    let mut assign = vec![0; n];
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(row(i), center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            *a = best.1;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(assign)
}

/// `sum over clusters of the majority-class count / number of points`.
pub fn purity(assign: &[usize], labels: &[usize]) -> Result<f64> {
    if assign.is_empty() || assign.len() != labels.len() {
        return Err(Error::invalid(format!("{} assignments for {} labels", assign.len(), labels.len())));
    }
    let k = assign.iter().max().expect("nonempty") + 1;
    let c = labels.iter().max().expect("nonempty") + 1;
    let mut table = vec![0usize; k * c];
    for (&a, &l) in assign.iter().zip(labels) {
        table[a * c + l] += 1;
    }
    let hit: usize = table.chunks(c).map(|r| *r.iter().max().expect("classes")).sum();
    Ok(hit as f64 / labels.len() as f64)
}

/// k-means purity of per-pixel feature vectors against their classes.
pub fn cluster_purity(features: &[f64], dim: usize, labels: &[usize], k: usize, rng: &mut SeededRng) -> Result<f64> {
    let assign = kmeans(features, dim, k, KMEANS_ITERATIONS, rng)?;
    purity(&assign, labels)
}

/// Samples `pixels_per_image` distinct pixels per image from the finest
/// backbone feature map and scores k-means clusters of them.
pub fn feature_cluster_purity(
    backbone: &Backbone,
    images: &[Tensor],
    labels: &[LabelMap],
    k: usize,
    pixels_per_image: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() || pixels_per_image == 0 {
        return Err(Error::invalid("empty pixel sample"));
    }
    let mut feats = Vec::new();
    let mut classes = Vec::new();
    let mut dim = 0;
    for (img, lab) in images.iter().zip(labels) {
        let batch = Tensor::stack(&[img])?;
        let finest = backbone.features(&batch)?.pop().expect("feature levels");
        let (c, plane) = (finest.shape()[1], finest.shape()[2] * finest.shape()[3]);
        if lab.len() != plane {
            return Err(Error::shape("purity", format!("label map of {} pixels for {plane} features", lab.len())));
        }
        dim = c;
        let picks = rng.permutation(plane);
        for &p in picks.iter().take(pixels_per_image) {
            feats.extend((0..c).map(|ch| finest.data()[ch * plane + p]));
            classes.push(lab.get(p / lab.width(), p % lab.width()));
        }
    }
    cluster_purity(&feats, dim, &classes, k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_features_are_pure() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let feats: Vec<f64> = labels.iter().flat_map(|&l| (0..3).map(move |c| f64::from(u8::from(c == l)))).collect();
        let p = cluster_purity(&feats, 3, &labels, 3, &mut SeededRng::new(1)).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn single_cluster_gives_majority_frequency() {
        let labels = vec![0, 1, 1, 2, 1, 0, 1];
        let mut rng = SeededRng::new(2);
        let feats: Vec<f64> = (0..14).map(|_| rng.normal()).collect();
        let p = cluster_purity(&feats, 2, &labels, 1, &mut rng).unwrap();
        assert_eq!(p, 4.0 / 7.0);
    }

    #[test]
    fn noise_features_give_prior_purity() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(100 + seed);
            let n = 2000;
            // class prior 0.6 / 0.25 / 0.15
            let labels: Vec<usize> = (0..n)
                .map(|_| {
                    let u = rng.uniform();
                    if u < 0.6 { 0 } else if u < 0.85 { 1 } else { 2 }
                })
                .collect();
            let prior = labels.iter().filter(|&&l| l == 0).count() as f64 / n as f64;
            let feats: Vec<f64> = (0..n * 8).map(|_| rng.normal()).collect();
            let p = cluster_purity(&feats, 8, &labels, 3, &mut rng).unwrap();
            assert!((p - prior).abs() < 0.05, "seed {seed}: {p} vs {prior}");
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(kmeans(&[1.0, 2.0], 1, 3, 5, &mut SeededRng::new(0)).is_err());
        assert!(purity(&[], &[]).is_err());
    }
}
