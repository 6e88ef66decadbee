//! Online k-means codebook with EMA statistics and a maintenance mechanism
//! that revives rarely-updated vectors.
//!
//! Per training step, each teacher feature is assigned to its nearest code
//! (Euclidean); the accumulated count N_k and feature sum M_k follow
//!
//! ```text
//! N_k <- gamma * N_k + (1 - gamma) * n_k
//! M_k <- gamma * M_k + (1 - gamma) * m_k
//! c_k  = M_k / N_k
//! ```
//!
//! Lookup for k-means stays Euclidean; soft assignments use cosine
//! similarity so the temperature range 0.04..0.1 operates on bounded
//! logits (a raw dot-product mode is kept behind a flag for comparison).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::checkpoint::atomic_write;
use crate::diffcore::tensor::gaussian;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use std::path::Path;

/// Similarity used by soft assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    /// Dot product of unit-normalized feature and code rows.
    Cosine,
    /// Raw dot product, as an A/B alternative.
    Dot,
}

#[derive(Clone, Debug)]
pub struct Codebook {
    /// K×D code vectors, always equal to M_acc / N_acc row-wise.
    pub vectors: Tensor,
    /// Accumulated assignment counts N_k.
    pub n_acc: Vec<f64>,
    /// Accumulated feature sums M_k (K×D).
    pub m_acc: Tensor,
    /// Number of steps in which each code received at least one feature.
    pub update_count: Vec<u64>,
    /// Same counter but reset at each epoch window boundary.
    pub epoch_updates: Vec<u64>,
    pub gamma: f64,
}

/// Soft assignment of feature rows over the codebook.
#[derive(Clone, Debug)]
pub struct Assignment {
    /// rows×K row-stochastic matrix.
    pub q: Tensor,
    /// Row argmax, ties toward the lowest code index.
    pub hard: Vec<usize>,
}

/// Outcome summary of one maintenance pass.
#[derive(Clone, Debug)]
pub struct MaintenanceReport {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub alpha_mean: f64,
    pub dead_before: usize,
    pub epsilon: f64,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.n_acc.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Draw K rows from a feature pool. Distinct pool rows are sampled
    /// without replacement; if the deduplicated pool is smaller than K the
    /// remainder cycles through the pool with a small jitter so no two codes
    /// coincide. N_acc starts at 1 and M_acc at the code vector itself.
    pub fn init(pool: &Tensor, k: usize, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        let rows = pool.rows();
        if rows == 0 || pool.numel() == 0 {
            return Err(Error::invalid("codebook init from an empty feature pool"));
        }
        let d = pool.cols();

        // Deduplicate exact duplicates, keeping first occurrences in order.
        let mut unique: Vec<usize> = Vec::new();
        'outer: for i in 0..rows {
            for &u in &unique {
                if pool.row(u) == pool.row(i) {
                    continue 'outer;
                }
            }
            unique.push(i);
        }

        let mut data = Vec::with_capacity(k * d);
        if unique.len() >= k {
            let mut order = unique.clone();
            order.shuffle(rng);
            for &i in order.iter().take(k) {
                data.extend_from_slice(pool.row(i));
            }
        } else {
            // Jitter scale from the pool spread so duplicates separate
            // without leaving the data region.
            let mut mean = vec![0.0; d];
            for i in 0..rows {
                for (m, v) in mean.iter_mut().zip(pool.row(i)) {
                    *m += v / rows as f64;
                }
            }
            let mut var = 0.0;
            for i in 0..rows {
                for (m, v) in mean.iter().zip(pool.row(i)) {
                    var += (v - m) * (v - m);
                }
            }
            let sigma = (var / (rows * d) as f64).sqrt().max(1e-6) * 1e-2;
            for slot in 0..k {
                let src = unique[slot % unique.len()];
                for &v in pool.row(src) {
                    let jitter = if slot < unique.len() { 0.0 } else { sigma * gaussian(rng) };
                    data.push(v + jitter);
                }
            }
        }

        let vectors = Tensor::matrix(k, d, data);
        Ok(Codebook {
            m_acc: vectors.clone(),
            vectors,
            n_acc: vec![1.0; k],
            update_count: vec![0; k],
            epoch_updates: vec![0; k],
            gamma,
        })
    }

    /// Check the ratio invariant c_k = M_k / N_k.
    pub fn ratio_invariant_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.size() {
            for j in 0..self.dim() {
                let expect = self.m_acc.get(k, j) / self.n_acc[k];
                let got = self.vectors.get(k, j);
                let denom = got.abs().max(1.0);
                worst = worst.max((expect - got).abs() / denom);
            }
        }
        worst
    }

    /// Fraction of codes whose cumulative update count is at or below the
    /// threshold.
    pub fn dead_fraction(&self, threshold: u64) -> f64 {
        let dead = self.update_count.iter().filter(|&&c| c <= threshold).count();
        dead as f64 / self.size() as f64
    }

    /// Same, over the current epoch window.
    pub fn dead_fraction_window(&self, threshold: u64) -> f64 {
        let dead = self.epoch_updates.iter().filter(|&&c| c <= threshold).count();
        dead as f64 / self.size() as f64
    }

    /// Reset the per-epoch update window.
    pub fn begin_epoch_window(&mut self) {
        self.epoch_updates.iter_mut().for_each(|c| *c = 0);
    }
}

/// Nearest code per feature row by Euclidean distance, ties toward the
/// lowest code index.
pub fn nearest_code(features: &Tensor, codebook: &Codebook) -> Vec<usize> {
    assert_eq!(features.cols(), codebook.dim(), "invalid argument: feature dim");
    let k = codebook.size();
    let mut out = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let row = features.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let code = codebook.vectors.row(c);
            let mut d = 0.0;
            for (a, b) in row.iter().zip(code) {
                let t = a - b;
                d += t * t;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out.push(best);
    }
    out
}

/// One EMA k-means update from a batch of features and their nearest-code
/// assignments. Codes that received no features decay both accumulators by
/// gamma, leaving the ratio (and thus the code vector) unchanged.
pub fn kmeans_update(codebook: &mut Codebook, features: &Tensor, assignments: &[usize]) {
    assert_eq!(features.rows(), assignments.len());
    let k = codebook.size();
    let d = codebook.dim();
    let gamma = codebook.gamma;
    let mut n_batch = vec![0.0f64; k];
    let mut m_batch = vec![0.0f64; k * d];
    for (i, &a) in assignments.iter().enumerate() {
        n_batch[a] += 1.0;
        for (acc, v) in m_batch[a * d..(a + 1) * d].iter_mut().zip(features.row(i)) {
            *acc += v;
        }
    }
    for c in 0..k {
        codebook.n_acc[c] = gamma * codebook.n_acc[c] + (1.0 - gamma) * n_batch[c];
        for j in 0..d {
            let m = gamma * codebook.m_acc.get(c, j) + (1.0 - gamma) * m_batch[c * d + j];
            codebook.m_acc.set(c, j, m);
            codebook.vectors.set(c, j, m / codebook.n_acc[c]);
        }
        if n_batch[c] > 0.0 {
            codebook.update_count[c] += 1;
            codebook.epoch_updates[c] += 1;
        }
    }
}

/// Temperature-scaled soft assignment over the codebook.
pub fn soft_assign(
    features: &Tensor,
    codebook: &Codebook,
    tau: f64,
    similarity: Similarity,
) -> Assignment {
    assert!(tau > 0.0, "invalid argument: tau must be positive");
    let rows = features.rows();
    let k = codebook.size();
    let d = codebook.dim();

    // Pre-normalize code rows once for the cosine mode.
    let code_norms: Vec<f64> = (0..k)
        .map(|c| codebook.vectors.row(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let mut q = Tensor::zeros(vec![rows, k]);
    let mut hard = Vec::with_capacity(rows);
    let mut logits = vec![0.0f64; k];
    for i in 0..rows {
        let row = features.row(i);
        let row_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..k {
            let code = codebook.vectors.row(c);
            let mut dot = 0.0;
            for j in 0..d {
                dot += row[j] * code[j];
            }
            let sim = match similarity {
                Similarity::Cosine => {
                    let denom = row_norm * code_norms[c];
                    if denom > 0.0 {
                        dot / denom
                    } else {
                        0.0
                    }
                }
                Similarity::Dot => dot,
            };
            logits[c] = sim / tau;
        }
        let mut best = 0usize;
        let mut max = f64::NEG_INFINITY;
        for (c, &z) in logits.iter().enumerate() {
            if z > max {
                max = z;
                best = c;
            }
        }
        hard.push(best);
        let mut sum = 0.0;
        for (c, &z) in logits.iter().enumerate() {
            let e = (z - max).exp();
            q.set(i, c, e);
            sum += e;
        }
        for c in 0..k {
            q.set(i, c, q.get(i, c) / sum);
        }
    }
    Assignment { q, hard }
}

/// Cosine-annealed teacher temperature from `start` to `end`.
pub fn teacher_temperature(step: usize, total_steps: usize, start: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return end;
    }
    let t = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// How the maintenance pass perturbs codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaintenanceMode {
    /// Blend each code toward its most cosine-similar teacher feature,
    /// weighted by how rarely the code updates.
    Meaningful,
    /// Add feature-scaled Gaussian noise to every code instead.
    Random,
    Off,
}

/// Slope for the update-count sigmoid: alpha spans roughly [0.05, 0.95]
/// across the observed count range.
pub fn maintenance_epsilon(update_count: &[u64]) -> f64 {
    let max = *update_count.iter().max().unwrap_or(&0);
    let min = *update_count.iter().min().unwrap_or(&0);
    6.0 / ((max - min) as f64 + 1.0)
}

/// Sigmoid-weighted blend of each code toward its most similar teacher
/// feature from the batch:
///
/// ```text
/// alpha_k = 1 / (1 + exp(eps * (x_k - x_bar)))
/// c_k    <- c_k * (1 - alpha_k) + t_k * alpha_k
/// ```
///
/// where x_bar is the midpoint of the max and min update counts. After the
/// blend, M_acc is rescaled so c = M/N still holds, and update counts halve
/// so the statistic tracks recent activity.
pub fn maintenance_step(
    codebook: &mut Codebook,
    teacher_features: &Tensor,
    epsilon: f64,
) -> Result<MaintenanceReport> {
    if teacher_features.rows() == 0 {
        return Err(Error::invalid("maintenance needs a non-empty feature batch"));
    }
    let k = codebook.size();
    let d = codebook.dim();
    let max = *codebook.update_count.iter().max().unwrap() as f64;
    let min = *codebook.update_count.iter().min().unwrap() as f64;
    let x_bar = 0.5 * (max + min);
    let dead_before = codebook.update_count.iter().filter(|&&c| c == 0).count();

    // Unit-normalize features once for the cosine search.
    let rows = teacher_features.rows();
    let feat_norms: Vec<f64> = (0..rows)
        .map(|i| {
            teacher_features
                .row(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-300)
        })
        .collect();

    let mut alpha_min = f64::INFINITY;
    let mut alpha_max = f64::NEG_INFINITY;
    let mut alpha_sum = 0.0;
    for c in 0..k {
        let x = codebook.update_count[c] as f64;
        let alpha = 1.0 / (1.0 + (epsilon * (x - x_bar)).exp());
        alpha_min = alpha_min.min(alpha);
        alpha_max = alpha_max.max(alpha);
        alpha_sum += alpha;

        // Most cosine-similar teacher feature; ties toward the lower row.
        let code = codebook.vectors.row(c).to_vec();
        let code_norm = code.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let mut best_row = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for i in 0..rows {
            let mut dot = 0.0;
            for (a, b) in code.iter().zip(teacher_features.row(i)) {
                dot += a * b;
            }
            let sim = dot / (code_norm * feat_norms[i]);
            if sim > best_sim {
                best_sim = sim;
                best_row = i;
            }
        }
        let target = teacher_features.row(best_row);
        for j in 0..d {
            let v = codebook.vectors.get(c, j) * (1.0 - alpha) + target[j] * alpha;
            codebook.vectors.set(c, j, v);
            codebook.m_acc.set(c, j, v * codebook.n_acc[c]);
        }
    }
    for c in codebook.update_count.iter_mut() {
        *c /= 2;
    }

    Ok(MaintenanceReport {
        alpha_min,
        alpha_max,
        alpha_mean: alpha_sum / k as f64,
        dead_before,
        epsilon,
    })
}

/// Ablation variant: data-scaled Gaussian noise on every code, no
/// update-count weighting.
pub fn maintenance_step_random(
    codebook: &mut Codebook,
    teacher_features: &Tensor,
    rng: &mut impl Rng,
) -> Result<MaintenanceReport> {
    if teacher_features.rows() == 0 {
        return Err(Error::invalid("maintenance needs a non-empty feature batch"));
    }
    let d = codebook.dim();
    let rows = teacher_features.rows();
    // Per-dimension std of the batch sets the noise scale.
    let mut mean = vec![0.0f64; d];
    for i in 0..rows {
        for (m, v) in mean.iter_mut().zip(teacher_features.row(i)) {
            *m += v / rows as f64;
        }
    }
    let mut sigma = vec![0.0f64; d];
    for i in 0..rows {
        for (s, (m, v)) in sigma.iter_mut().zip(mean.iter().zip(teacher_features.row(i))) {
            *s += (v - m) * (v - m) / rows as f64;
        }
    }
    for s in sigma.iter_mut() {
        *s = s.sqrt() * 0.5;
    }

    let dead_before = codebook.update_count.iter().filter(|&&c| c == 0).count();
    for c in 0..codebook.size() {
        for j in 0..d {
            let v = codebook.vectors.get(c, j) + sigma[j] * gaussian(rng);
            codebook.vectors.set(c, j, v);
            codebook.m_acc.set(c, j, v * codebook.n_acc[c]);
        }
    }
    for c in codebook.update_count.iter_mut() {
        *c /= 2;
    }
    Ok(MaintenanceReport {
        alpha_min: 1.0,
        alpha_max: 1.0,
        alpha_mean: 1.0,
        dead_before,
        epsilon: 0.0,
    })
}

/// Write the update-count heatmap as a binary PGM (P5) plus a CSV of raw
/// counts. Counts are min-max normalized to [0, 255]; a constant count field
/// renders as zeros.
pub fn utilization_export(codebook: &Codebook, h: usize, w: usize, path: &Path) -> Result<()> {
    if h * w != codebook.size() {
        return Err(Error::invalid(format!(
            "heatmap {h}x{w} does not cover {} codes",
            codebook.size()
        )));
    }
    let counts = &codebook.update_count;
    let max = *counts.iter().max().unwrap() as f64;
    let min = *counts.iter().min().unwrap() as f64;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &c in counts {
        let v = if max > min {
            (((c as f64 - min) / (max - min)) * 255.0).round() as u8
        } else {
            0
        };
        bytes.push(v);
    }
    atomic_write(path, &bytes)?;

    let csv_path = path.with_extension("csv");
    let mut csv = String::from("code,update_count\n");
    for (i, &c) in counts.iter().enumerate() {
        csv.push_str(&format!("{i},{c}\n"));
    }
    atomic_write(&csv_path, csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(101)
    }

    fn pool_of(rows: usize, d: usize, r: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(vec![rows, d], 1.0, r)
    }

    #[test]
    fn init_from_exact_pool_is_permutation() {
        let mut r = rng();
        let pool = pool_of(8, 4, &mut r);
        let cb = Codebook::init(&pool, 8, 0.99, &mut r).unwrap();
        for c in 0..8 {
            let found = (0..8).any(|i| pool.row(i) == cb.vectors.row(c));
            assert!(found, "code {c} not from pool");
        }
        // N starts at one, so c_k = M_k exactly.
        assert!(cb.n_acc.iter().all(|&n| n == 1.0));
        assert_eq!(cb.vectors.data(), cb.m_acc.data());
        assert!(cb.update_count.iter().all(|&c| c == 0));
    }

    #[test]
    fn init_small_pool_jitters_duplicates() {
        let mut r = rng();
        let pool = pool_of(3, 4, &mut r);
        let cb = Codebook::init(&pool, 8, 0.99, &mut r).unwrap();
        for a in 0..8 {
            for b in (a + 1)..8 {
                assert_ne!(cb.vectors.row(a), cb.vectors.row(b), "rows {a},{b} identical");
            }
        }
    }

    #[test]
    fn init_rejects_empty_pool() {
        let mut r = rng();
        let pool = Tensor::matrix(0, 4, vec![]);
        assert!(Codebook::init(&pool, 4, 0.99, &mut r).is_err());
    }

    #[test]
    fn nearest_code_exact_and_ties() {
        let mut r = rng();
        let pool = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mut cb = Codebook::init(&pool, 4, 0.99, &mut r).unwrap();
        // Force a known layout.
        cb.vectors = pool.clone();
        let probe = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.5, 0.0]);
        let hard = nearest_code(&probe, &cb);
        assert_eq!(hard[0], 3);
        // (0.5, 0) is equidistant to codes 0 and 1; lowest index wins.
        assert_eq!(hard[1], 0);
    }

    #[test]
    fn nearest_code_matches_bruteforce() {
        let mut r = rng();
        let pool = pool_of(16, 6, &mut r);
        let cb = Codebook::init(&pool, 16, 0.99, &mut r).unwrap();
        let probes = pool_of(32, 6, &mut r);
        let hard = nearest_code(&probes, &cb);
        for i in 0..32 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..16 {
                let d: f64 = probes
                    .row(i)
                    .iter()
                    .zip(cb.vectors.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(hard[i], best);
        }
    }

    #[test]
    fn unassigned_codes_keep_their_vector() {
        let mut r = rng();
        let pool = pool_of(4, 3, &mut r);
        let mut cb = Codebook::init(&pool, 4, 0.99, &mut r).unwrap();
        let before = cb.vectors.clone();
        let n_before = cb.n_acc.clone();
        // Assign a single feature to code 0 only.
        let f = Tensor::matrix(1, 3, vec![0.3, 0.3, 0.3]);
        kmeans_update(&mut cb, &f, &[0]);
        for c in 1..4 {
            assert_eq!(cb.n_acc[c], 0.99 * n_before[c]);
            for j in 0..3 {
                assert!((cb.vectors.get(c, j) - before.get(c, j)).abs() < 1e-12);
            }
            assert_eq!(cb.update_count[c], 0);
        }
        assert_eq!(cb.update_count[0], 1);
        assert!(cb.ratio_invariant_error() < 1e-9);
    }

    #[test]
    fn constant_stream_matches_geometric_series() {
        let mut r = rng();
        let pool = pool_of(2, 3, &mut r);
        let mut cb = Codebook::init(&pool, 2, 0.99, &mut r).unwrap();
        let n0 = cb.n_acc[0];
        // Three identical features hit code 0 every step.
        let f = Tensor::matrix(3, 3, vec![0.5; 9]);
        let t = 400;
        for _ in 0..t {
            kmeans_update(&mut cb, &f, &[0, 0, 0]);
        }
        let gamma: f64 = 0.99;
        let expect = gamma.powi(t) * n0 + (1.0 - gamma.powi(t)) * 3.0;
        assert!((cb.n_acc[0] - expect).abs() < 1e-10, "{} vs {expect}", cb.n_acc[0]);
    }

    #[test]
    fn repeated_feature_pulls_code_monotonically() {
        let mut r = rng();
        let pool = pool_of(2, 3, &mut r);
        let mut cb = Codebook::init(&pool, 2, 0.99, &mut r).unwrap();
        let target = [2.0, -1.0, 0.5];
        let f = Tensor::matrix(1, 3, target.to_vec());
        let dist = |cb: &Codebook| {
            cb.vectors
                .row(0)
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let initial = dist(&cb);
        let mut prev = initial;
        for _ in 0..300 {
            kmeans_update(&mut cb, &f, &[0]);
            let now = dist(&cb);
            assert!(now <= prev + 1e-12);
            prev = now;
        }
        // EMA contraction: the remaining gap shrinks roughly like gamma^t.
        let bound = initial * 0.99f64.powi(300) * 1.5 + 1e-9;
        assert!(prev < bound, "gap {prev} vs bound {bound}");
    }

    #[test]
    fn soft_assign_uniform_when_codes_identical() {
        let mut r = rng();
        let pool = Tensor::matrix(1, 3, vec![0.4, 0.4, 0.4]);
        let mut cb = Codebook::init(&pool, 4, 0.99, &mut r).unwrap();
        cb.vectors = Tensor::matrix(4, 3, vec![0.4, 0.4, 0.4].repeat(4));
        let f = pool_of(3, 3, &mut r);
        let a = soft_assign(&f, &cb, 0.07, Similarity::Cosine);
        for i in 0..3 {
            for c in 0..4 {
                assert!((a.q.get(i, c) - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_assign_sharpens_to_one_hot() {
        let mut r = rng();
        let pool = pool_of(8, 4, &mut r);
        let cb = Codebook::init(&pool, 8, 0.99, &mut r).unwrap();
        let f = pool_of(5, 4, &mut r);
        let a = soft_assign(&f, &cb, 1e-6, Similarity::Cosine);
        for i in 0..5 {
            let max = a.q.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max > 1.0 - 1e-6);
        }
    }

    #[test]
    fn smaller_tau_means_lower_entropy() {
        let mut r = rng();
        let pool = pool_of(16, 6, &mut r);
        let cb = Codebook::init(&pool, 16, 0.99, &mut r).unwrap();
        let f = pool_of(10, 6, &mut r);
        let entropy = |q: &Tensor, i: usize| -> f64 {
            q.row(i)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum()
        };
        let smooth = soft_assign(&f, &cb, 0.1, Similarity::Cosine);
        let sharp = soft_assign(&f, &cb, 0.04, Similarity::Cosine);
        for i in 0..10 {
            assert!(entropy(&smooth.q, i) > entropy(&sharp.q, i));
        }
    }

    #[test]
    fn soft_assign_rows_are_stochastic_and_hard_matches() {
        let mut r = rng();
        let pool = pool_of(12, 5, &mut r);
        let cb = Codebook::init(&pool, 12, 0.99, &mut r).unwrap();
        let f = pool_of(20, 5, &mut r);
        for sim in [Similarity::Cosine, Similarity::Dot] {
            let a = soft_assign(&f, &cb, 0.07, sim);
            for i in 0..20 {
                let s: f64 = a.q.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                let mut best = 0;
                let mut max = f64::NEG_INFINITY;
                for (c, &v) in a.q.row(i).iter().enumerate() {
                    if v > max {
                        max = v;
                        best = c;
                    }
                }
                assert_eq!(a.hard[i], best);
            }
        }
    }

    #[test]
    fn teacher_temperature_endpoints_and_midpoint() {
        assert_eq!(teacher_temperature(0, 100, 0.07, 0.04), 0.07);
        assert!((teacher_temperature(100, 100, 0.07, 0.04) - 0.04).abs() < 1e-15);
        assert!((teacher_temperature(50, 100, 0.07, 0.04) - 0.055).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let t = teacher_temperature(s, 100, 0.07, 0.04);
            assert!(t <= prev + 1e-15);
            prev = t;
        }
    }

    #[test]
    fn maintenance_alpha_midpoint_and_saturation() {
        let mut r = rng();
        let pool = pool_of(8, 4, &mut r);
        let mut cb = Codebook::init(&pool, 8, 0.99, &mut r).unwrap();
        // All counts equal: x = x_bar, every alpha is exactly one half.
        cb.update_count = vec![5; 8];
        let feats = pool_of(6, 4, &mut r);
        let eps = maintenance_epsilon(&cb.update_count);
        let report = maintenance_step(&mut cb, &feats, eps).unwrap();
        assert_eq!(report.alpha_min, 0.5);
        assert_eq!(report.alpha_max, 0.5);
        assert!(cb.ratio_invariant_error() < 1e-9);

        // Saturation: a huge count against a zero median barely moves.
        let mut cb = Codebook::init(&pool, 8, 0.99, &mut r).unwrap();
        cb.update_count = vec![0, 0, 0, 0, 0, 0, 0, 1000];
        let before = cb.vectors.row(7).to_vec();
        let eps = 0.1; // eps * (x - x_bar) = 50 >> 20
        maintenance_step(&mut cb, &feats, eps).unwrap();
        let delta: f64 = cb
            .vectors
            .row(7)
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(delta < 1e-6, "saturated code moved by {delta}");
    }

    #[test]
    fn maintenance_alpha_monotone_in_count() {
        let eps = 0.7;
        let x_bar = 10.0;
        let alpha = |x: f64| 1.0 / (1.0 + (eps * (x - x_bar)).exp());
        let mut prev = f64::INFINITY;
        for x in 0..30 {
            let a = alpha(x as f64);
            assert!(a <= prev);
            prev = a;
        }
    }

    #[test]
    fn maintenance_keeps_codes_in_convex_hull() {
        let mut r = rng();
        let pool = pool_of(8, 4, &mut r);
        let mut cb = Codebook::init(&pool, 8, 0.99, &mut r).unwrap();
        cb.update_count = (0..8).map(|i| i as u64 * 3).collect();
        let feats = pool_of(10, 4, &mut r);
        let before: Vec<f64> = (0..8)
            .map(|c| cb.vectors.row(c).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let feat_max = (0..10)
            .map(|i| feats.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);
        let eps = maintenance_epsilon(&cb.update_count);
        maintenance_step(&mut cb, &feats, eps).unwrap();
        assert!(cb.vectors.is_finite());
        for c in 0..8 {
            let norm: f64 = cb.vectors.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= before[c].max(feat_max) + 1e-12);
        }
        // Counts halve after the pass.
        assert_eq!(cb.update_count, vec![0, 1, 3, 4, 6, 7, 9, 10]);
    }

    #[test]
    fn dead_fraction_counts() {
        let mut r = rng();
        let pool = pool_of(16, 4, &mut r);
        let mut cb = Codebook::init(&pool, 16, 0.99, &mut r).unwrap();
        assert_eq!(cb.dead_fraction(0), 1.0);
        cb.update_count = (0..16).map(|i| i as u64).collect();
        assert_eq!(cb.dead_fraction(0), 1.0 / 16.0);
        let hand_count = cb.update_count.iter().filter(|&&c| c <= 3).count();
        assert_eq!(cb.dead_fraction(3), hand_count as f64 / 16.0);
        cb.update_count = vec![9; 16];
        assert_eq!(cb.dead_fraction(0), 0.0);
    }

    #[test]
    fn utilization_export_pgm_layout() {
        let mut r = rng();
        let pool = pool_of(64, 4, &mut r);
        let mut cb = Codebook::init(&pool, 64, 0.99, &mut r).unwrap();
        let dir = tempfile::tempdir().unwrap();

        // Uniform counts: constant image.
        cb.update_count = vec![7; 64];
        let path = dir.path().join("uniform.pgm");
        utilization_export(&cb, 8, 8, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n8 8\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 64);
        assert!(bytes[header.len()..].iter().all(|&b| b == bytes[header.len()]));

        // One-hot: single bright pixel at (0, 0).
        cb.update_count = vec![0; 64];
        cb.update_count[0] = 12;
        let path = dir.path().join("hot.pgm");
        utilization_export(&cb, 8, 8, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes[header.len()], 255);
        assert!(bytes[header.len() + 1..].iter().all(|&b| b == 0));

        // CSV sidecar holds the raw counts.
        let csv = std::fs::read_to_string(dir.path().join("hot.csv")).unwrap();
        assert!(csv.starts_with("code,update_count\n0,12\n1,0\n"));

        // Shape mismatch is rejected.
        assert!(utilization_export(&cb, 5, 5, &dir.path().join("bad.pgm")).is_err());
    }
}
