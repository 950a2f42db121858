//! Linguistic-content extraction: K-means codebook over content features,
//! frame-to-token encoding, adjacent-token deduplication with durations,
//! and embedding lookup.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::VcError;
use crate::nn::round_f32;
use crate::Result;

/// Cluster count used by full-scale deployments of this tokenizer; the desk
/// configuration matches the synthetic vocabulary instead (64).
pub const FULL_SCALE_CLUSTERS: usize = 1024;

/// Frozen K-means codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// k x dim centroid rows, f32-representable for exact serialization.
    pub centroids: Array2<f64>,
    pub k: usize,
}

impl Codebook {
    pub fn new(mut centroids: Array2<f64>) -> Self {
        round_f32(&mut centroids);
        let k = centroids.nrows();
        Self { centroids, k }
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Nearest centroid by squared Euclidean distance; ties break to the
/// lowest centroid index.
fn nearest(centroids: &Array2<f64>, frame: ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(frame, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with seeded k-means++ initialization.
///
/// Converges when assignments are stable or after 100 iterations. Empty
/// clusters are re-seeded from the point farthest from its centroid.
pub fn fit_kmeans(features: ArrayView2<f64>, k: usize, seed: u64) -> Result<Codebook> {
    Ok(fit_kmeans_detailed(features, k, seed)?.0)
}

/// Like [`fit_kmeans`] but also returns the inertia (sum of squared
/// distances) measured after each assignment step.
pub fn fit_kmeans_detailed(
    features: ArrayView2<f64>,
    k: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    let n = features.nrows();
    let dim = features.ncols();
    if k == 0 {
        return Err(VcError::InvalidArg("k must be positive".into()));
    }
    if n < k {
        return Err(VcError::InvalidArg(format!(
            "{n} samples is fewer than k={k}"
        )));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(VcError::InvalidArg("non-finite feature values".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((k, dim));

    // k-means++ seeding: first centroid uniform, rest D^2-weighted.
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut threshold = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                threshold -= d;
                if threshold <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&features.row(pick));
        for i in 0..n {
            let d = sq_dist(features.row(i), centroids.row(c));
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut inertia_history = Vec::new();
    for _iter in 0..100 {
        // Assignment step.
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest(&centroids, features.row(i));
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        if !changed {
            break;
        }

        // Update step.
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            let mut row = sums.row_mut(c);
            row += &features.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let scale = 1.0 / counts[c] as f64;
                centroids
                    .row_mut(c)
                    .assign(&sums.row(c).mapv(|x| x * scale));
            }
        }

        // Re-seed empty clusters from the farthest points.
        let mut empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut dist: Vec<(f64, usize)> = (0..n)
                .map(|i| (sq_dist(features.row(i), centroids.row(assignments[i])), i))
                .collect();
            dist.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for (slot, c) in empties.drain(..).enumerate() {
                let (_, i) = dist[slot.min(n - 1)];
                centroids.row_mut(c).assign(&features.row(i));
            }
        }
    }

    Ok((Codebook::new(centroids), inertia_history))
}

/// Per-frame nearest-centroid token ids.
pub fn encode(features: ArrayView2<f64>, codebook: &Codebook) -> Vec<u32> {
    debug_assert_eq!(features.ncols(), codebook.dim());
    features
        .rows()
        .into_iter()
        .map(|f| nearest(&codebook.centroids, f).0 as u32)
        .collect()
}

/// Run-length encodes adjacent repeats; `expand(dedup(x)) == x`.
pub fn dedup(token_ids: &[u32]) -> Result<(Vec<u32>, Vec<u32>)> {
    if token_ids.is_empty() {
        return Err(VcError::InvalidArg("empty token sequence".into()));
    }
    let mut ids = Vec::new();
    let mut durations = Vec::new();
    for &t in token_ids {
        if ids.last() == Some(&t) {
            *durations.last_mut().unwrap() += 1;
        } else {
            ids.push(t);
            durations.push(1);
        }
    }
    Ok((ids, durations))
}

/// Inverse of [`dedup`].
pub fn expand(ids: &[u32], durations: &[u32]) -> Vec<u32> {
    ids.iter()
        .zip(durations)
        .flat_map(|(&id, &d)| std::iter::repeat_n(id, d as usize))
        .collect()
}

/// Centroid rows for each id.
pub fn embed(ids: &[u32], codebook: &Codebook) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((ids.len(), codebook.dim()));
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= codebook.k {
            return Err(VcError::InvalidArg(format!(
                "token id {id} outside codebook of size {}",
                codebook.k
            )));
        }
        out.row_mut(i).assign(&codebook.centroids.row(id as usize));
    }
    Ok(out)
}

/// Deduplicated token view of a frame sequence.
#[derive(Debug, Clone)]
pub struct ContentSequence {
    pub token_ids: Vec<u32>,
    pub durations: Vec<u32>,
    pub embeddings: Array2<f64>,
}

impl ContentSequence {
    pub fn extract(features: ArrayView2<f64>, codebook: &Codebook) -> Result<Self> {
        let frame_ids = encode(features, codebook);
        let (token_ids, durations) = dedup(&frame_ids)?;
        let embeddings = embed(&token_ids, codebook)?;
        Ok(Self {
            token_ids,
            durations,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn identical_rows_k1() {
        let features = Array2::from_shape_fn((10, 3), |(_, j)| j as f64 + 0.5);
        let cb = fit_kmeans(features.view(), 1, 0).unwrap();
        for j in 0..3 {
            assert!((cb.centroids[(0, j)] - (j as f64 + 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn two_blobs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut features = Array2::zeros((200, 2));
        for i in 0..100 {
            features[(i, 0)] = 0.0 + rng.random_range(-0.1..0.1);
            features[(i, 1)] = 0.0 + rng.random_range(-0.1..0.1);
        }
        for i in 100..200 {
            features[(i, 0)] = 5.0 + rng.random_range(-0.1..0.1);
            features[(i, 1)] = 5.0 + rng.random_range(-0.1..0.1);
        }
        // Exact blob means as the oracle.
        let mean_a = features.slice(ndarray::s![..100, ..]).mean_axis(ndarray::Axis(0)).unwrap();
        let mean_b = features.slice(ndarray::s![100.., ..]).mean_axis(ndarray::Axis(0)).unwrap();
        let cb = fit_kmeans(features.view(), 2, 7).unwrap();
        let c0 = cb.centroids.row(0);
        let c1 = cb.centroids.row(1);
        let (lo, hi) = if c0[0] < c1[0] { (c0, c1) } else { (c1, c0) };
        for j in 0..2 {
            assert!((lo[j] - mean_a[j]).abs() < 0.05);
            assert!((hi[j] - mean_b[j]).abs() < 0.05);
        }
    }

    #[test]
    fn full_scale_cluster_count() {
        assert_eq!(FULL_SCALE_CLUSTERS, 1024);
    }

    #[test]
    fn fit_rejects_small_n_and_bad_values() {
        let features = Array2::<f64>::zeros((3, 2));
        assert!(fit_kmeans(features.view(), 4, 0).is_err());
        let mut bad = Array2::<f64>::zeros((5, 2));
        bad[(0, 0)] = f64::NAN;
        assert!(fit_kmeans(bad.view(), 2, 0).is_err());
    }

    #[test]
    fn fit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let features = Array2::from_shape_fn((60, 4), |_| rng.random_range(-1.0..1.0));
        let a = fit_kmeans(features.view(), 5, 3).unwrap();
        let b = fit_kmeans(features.view(), 5, 3).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn inertia_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let features = Array2::from_shape_fn((120, 6), |_| rng.random_range(-1.0..1.0));
        let (_, history) = fit_kmeans_detailed(features.view(), 8, 1).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "inertia rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn encode_exact_and_tie_break() {
        let cb = Codebook::new(array![
            [0.0, 0.0],
            [1.0, 0.0],
            [2.0, 0.0],
            [3.0, 0.0],
            [4.0, 0.0],
            [5.0, 0.0],
        ]);
        let frames = array![[3.0, 0.0], [3.5, 0.0]];
        let ids = encode(frames.view(), &cb);
        assert_eq!(ids[0], 3);
        // 3.5 is equidistant to centroids 3 and 4: lowest index wins.
        assert_eq!(ids[1], 3);

        // The spec's named case: equidistant to 2 and 5 -> 2.
        let cb2 = Codebook::new(array![
            [9.0, 9.0],
            [9.0, -9.0],
            [1.0, 0.0],
            [-9.0, 9.0],
            [-9.0, -9.0],
            [-1.0, 0.0],
        ]);
        let ids2 = encode(array![[0.0, 0.0]].view(), &cb2);
        assert_eq!(ids2[0], 2);
    }

    #[test]
    fn encode_idempotent_on_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let features = Array2::from_shape_fn((80, 4), |_| rng.random_range(-1.0..1.0));
        let cb = fit_kmeans(features.view(), 6, 2).unwrap();
        let ids = encode(cb.centroids.view(), &cb);
        assert_eq!(ids, (0..6).map(|i| i as u32).collect::<Vec<_>>());
    }

    #[test]
    fn dedup_examples() {
        let (ids, durs) = dedup(&[5, 5, 5, 2, 2, 9]).unwrap();
        assert_eq!(ids, vec![5, 2, 9]);
        assert_eq!(durs, vec![3, 2, 1]);

        let (ids, durs) = dedup(&[7]).unwrap();
        assert_eq!((ids, durs), (vec![7], vec![1]));

        let (ids, durs) = dedup(&[1, 2, 1, 2]).unwrap();
        assert_eq!(ids, vec![1, 2, 1, 2]);
        assert_eq!(durs, vec![1, 1, 1, 1]);

        assert!(dedup(&[]).is_err());
    }

    #[test]
    fn embed_rows_match_centroids() {
        let cb = Codebook::new(array![[0.5, 1.0], [2.0, 3.0], [4.0, 5.0]]);
        let e = embed(&[0, 2, 0], &cb).unwrap();
        assert_eq!(e.row(0), cb.centroids.row(0));
        assert_eq!(e.row(1), cb.centroids.row(2));
        assert_eq!(e.row(2), cb.centroids.row(0));
        assert!(embed(&[3], &cb).is_err());
    }

    proptest! {
        #[test]
        fn dedup_round_trip(tokens in proptest::collection::vec(0u32..6, 1..60)) {
            let (ids, durs) = dedup(&tokens).unwrap();
            prop_assert_eq!(expand(&ids, &durs), tokens.clone());
            prop_assert_eq!(durs.iter().map(|&d| d as usize).sum::<usize>(), tokens.len());
            for w in ids.windows(2) {
                prop_assert_ne!(w[0], w[1]);
            }
            prop_assert!(durs.iter().all(|&d| d >= 1));
        }
    }

    // ----- token accuracy against ground truth via Hungarian matching -----

    /// Minimum-cost assignment on a square matrix (classic O(n^3) Hungarian
    /// with row/column potentials). Returns the column matched to each row.
    fn hungarian_min_cost(cost: &Array2<f64>) -> Vec<usize> {
        let n = cost.nrows();
        assert_eq!(n, cost.ncols());
        let mut u = vec![0.0f64; n + 1];
        let mut v = vec![0.0f64; n + 1];
        let mut matched = vec![0usize; n + 1];
        let mut way = vec![0usize; n + 1];
        for i in 1..=n {
            matched[0] = i;
            let mut j0 = 0usize;
            let mut minv = vec![f64::INFINITY; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = matched[j0];
                let mut delta = f64::INFINITY;
                let mut j1 = 0;
                for j in 1..=n {
                    if !used[j] {
                        let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                        if cur < minv[j] {
                            minv[j] = cur;
                            way[j] = j0;
                        }
                        if minv[j] < delta {
                            delta = minv[j];
                            j1 = j;
                        }
                    }
                }
                for j in 0..=n {
                    if used[j] {
                        u[matched[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if matched[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                matched[j0] = matched[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        let mut row_to_col = vec![0usize; n];
        for j in 1..=n {
            if matched[j] > 0 {
                row_to_col[matched[j] - 1] = j - 1;
            }
        }
        row_to_col
    }

    #[test]
    fn hungarian_solves_small_known_case() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let assign = hungarian_min_cost(&cost);
        // Optimal: row0->col1 (1), row1->col0 (2), row2->col2 (2) = 5.
        assert_eq!(assign, vec![1, 0, 2]);
    }

    #[test]
    fn token_accuracy_above_90_percent_after_matching() {
        use crate::corpus::{Corpus, CorpusConfig};
        let mut cc = CorpusConfig::default();
        cc.n_speakers = 8;
        cc.n_styles = 3;
        cc.per_cell = 2;
        cc.units_min = 8;
        cc.units_max = 12;
        cc.noise = true;
        let corpus = Corpus::generate(&cc).unwrap();

        let total_frames: usize = corpus.utterances.iter().map(|u| u.n_frames()).sum();
        let dim = cc.synth.ssl_dim;
        let mut features = Array2::zeros((total_frames, dim));
        let mut truth = Vec::with_capacity(total_frames);
        let mut row = 0;
        for utt in &corpus.utterances {
            for t in 0..utt.n_frames() {
                features.row_mut(row).assign(&utt.ssl.row(t));
                truth.push(utt.token_ids[t]);
                row += 1;
            }
        }

        let k = cc.synth.vocab;
        let cb = fit_kmeans(features.view(), k, 5).unwrap();
        let pred = encode(features.view(), &cb);

        // Count co-occurrences, then find the optimal cluster -> unit map.
        let mut counts = Array2::<f64>::zeros((k, k));
        for (p, t) in pred.iter().zip(&truth) {
            counts[(*p as usize, *t as usize)] += 1.0;
        }
        let assign = hungarian_min_cost(&counts.mapv(|c| -c));
        let correct: f64 = (0..k).map(|c| counts[(c, assign[c])]).sum();
        let accuracy = correct / total_frames as f64;
        assert!(accuracy > 0.9, "token accuracy {accuracy:.3}");
    }
}
