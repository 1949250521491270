use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::types::Question;

const FEATURE_DIM: usize = 64;
const LLOYD_ITERATIONS: usize = 25;

/// Hashed character-trigram profile of a question prompt, L2-normalized.
pub fn question_features(q: &Question) -> Vec<f64> {
    let mut v = vec![0.0; FEATURE_DIM];
    let chars: Vec<char> = format!("  {}  ", q.prompt.to_lowercase()).chars().collect();
    for w in chars.windows(3) {
        let gram: String = w.iter().collect();
        let d = Sha256::digest(gram.as_bytes());
        let h = u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"));
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % FEATURE_DIM as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means++ then a fixed number of Lloyd iterations; returns the
/// indices of the `per_cluster` points nearest each centroid, unioned and
/// sorted. Ties in distance go to the lower index.
pub fn nearest_to_centroids(features: &[Vec<f64>], cluster_count: usize, per_cluster: usize, seed: u64) -> Vec<usize> {
    let n = features.len();
    if n == 0 || cluster_count == 0 || per_cluster == 0 {
        return Vec::new();
    }
    if per_cluster >= n {
        return (0..n).collect();
    }
    let k = cluster_count.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![features[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> =
            features.iter().map(|f| centroids.iter().map(|c| dist2(f, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    idx = i;
                    break;
                }
                u -= di;
            }
            idx
        };
        centroids.push(features[pick].clone());
    }
    let dim = features[0].len();
    for _ in 0..LLOYD_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for f in features {
            let c = (0..k)
                .min_by(|&a, &b| dist2(f, &centroids[a]).total_cmp(&dist2(f, &centroids[b])))
                .expect("k >= 1");
            counts[c] += 1;
            sums[c].iter_mut().zip(f).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let mut chosen = vec![false; n];
    for c in &centroids {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dist2(&features[a], c).total_cmp(&dist2(&features[b], c)).then(a.cmp(&b)));
        for &i in order.iter().take(per_cluster) {
            chosen[i] = true;
        }
    }
    (0..n).filter(|&i| chosen[i]).collect()
}

/// Questions to verify: the `per_cluster` nearest to each of
/// `cluster_count` K-means centroids over prompt features, in input order.
pub fn select_subset(questions: &[Question], cluster_count: usize, per_cluster: usize, seed: u64) -> Vec<Question> {
    let features: Vec<Vec<f64>> = questions.iter().map(question_features).collect();
    nearest_to_centroids(&features, cluster_count, per_cluster, seed)
        .into_iter()
        .map(|i| questions[i].clone())
        .collect()
}
