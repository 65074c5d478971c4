//! Symmetric InfoNCE over a batch of paired unit-norm embeddings, with the
//! analytic gradient used by the trainer, plus the similarity matrix that
//! retrieval ranks over.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjError {
    #[error("batch has {video} video rows and {text} text rows")]
    BatchMismatch { video: usize, text: usize },
    #[error("embedding buffer of {len} values is not a multiple of width {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("empty batch")]
    Empty,
    #[error("batch of {0} is too small (need at least 2)")]
    TooSmall(usize),
    #[error("temperature {0} must be positive and finite")]
    InvalidTemperature(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau_init: f64,
    pub learnable_tau: bool,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau_init: 0.07,
            learnable_tau: true,
            tau_min: 0.01,
            tau_max: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ObjError> {
        for t in [self.tau_init, self.tau_min, self.tau_max] {
            if !(t.is_finite() && t > 0.0) {
                return Err(ObjError::InvalidTemperature(t));
            }
        }
        if self.tau_min > self.tau_max {
            return Err(ObjError::InvalidTemperature(self.tau_min));
        }
        Ok(())
    }

    pub fn initial_log_tau(&self) -> f64 {
        self.tau_init.clamp(self.tau_min, self.tau_max).ln()
    }

    /// Temperature for a stored log-temperature, clamped into range.
    pub fn tau(&self, log_tau: f64) -> f64 {
        log_tau.exp().clamp(self.tau_min, self.tau_max)
    }
}

/// Index-aligned video and text embeddings, `B × dim` each, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    dim: usize,
    video: Vec<f64>,
    text: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(dim: usize, video: Vec<f64>, text: Vec<f64>) -> Result<Self, ObjError> {
        for len in [video.len(), text.len()] {
            if dim == 0 || len % dim != 0 {
                return Err(ObjError::Ragged { len, dim });
            }
        }
        if video.len() != text.len() {
            return Err(ObjError::BatchMismatch {
                video: video.len() / dim,
                text: text.len() / dim,
            });
        }
        if video.is_empty() {
            return Err(ObjError::Empty);
        }
        Ok(Self { dim, video, text })
    }

    pub fn from_rows(video: &[Vec<f64>], text: &[Vec<f64>]) -> Result<Self, ObjError> {
        let dim = video.first().or(text.first()).map_or(0, Vec::len);
        if video.len() != text.len() {
            return Err(ObjError::BatchMismatch {
                video: video.len(),
                text: text.len(),
            });
        }
        Self::new(dim, video.concat(), text.concat())
    }

    pub fn len(&self) -> usize {
        self.video.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.video.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn video(&self, i: usize) -> &[f64] {
        &self.video[i * self.dim..(i + 1) * self.dim]
    }

    pub fn text(&self, i: usize) -> &[f64] {
        &self.text[i * self.dim..(i + 1) * self.dim]
    }

    /// Same pairs with the roles of video and text exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            dim: self.dim,
            video: self.text.clone(),
            text: self.video.clone(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `S[i][j] = v_i · t_j`; rows are video queries, columns text.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_square(n: usize, data: Vec<f64>) -> Result<Self, ObjError> {
        if n == 0 {
            return Err(ObjError::Empty);
        }
        if data.len() != n * n {
            return Err(ObjError::Ragged {
                len: data.len(),
                dim: n,
            });
        }
        Ok(Self { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn transposed(&self) -> Self {
        let n = self.n;
        let data = (0..n * n).map(|k| self.data[(k % n) * n + k / n]).collect();
        Self { n, data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub fn similarity(batch: &EmbeddingBatch) -> SimilarityMatrix {
    let n = batch.len();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(dot(batch.video(i), batch.text(j)));
        }
    }
    SimilarityMatrix { n, data }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss value and its gradients with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub tau: f64,
    /// dL/dS, row-major `B × B`.
    pub grad_similarity: Vec<f64>,
    /// dL/dv, `B × dim`.
    pub grad_video: Vec<f64>,
    /// dL/dt, `B × dim`.
    pub grad_text: Vec<f64>,
    /// dL/d(log τ); zero when τ is fixed or clamped.
    pub grad_log_tau: f64,
}

/// `(1/B) Σ_i [−log softmax_row_i(S/τ)_i − log softmax_col_i(S/τ)_i]`.
pub fn infonce_loss(batch: &EmbeddingBatch, tau: f64) -> Result<f64, ObjError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ObjError::InvalidTemperature(tau));
    }
    Ok(loss_from_similarity(&similarity(batch), tau))
}

fn loss_from_similarity(sim: &SimilarityMatrix, tau: f64) -> f64 {
    let n = sim.len();
    let logits = |i: usize, j: usize| sim.get(i, j) / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row = log_sum_exp((0..n).map(move |j| logits(i, j)));
        let col = log_sum_exp((0..n).map(move |j| logits(j, i)));
        total += row - logits(i, i) + col - logits(i, i);
    }
    total / n as f64
}

/// Loss and analytic gradients at stored log-temperature `log_tau`.
pub fn infonce_with_grad(
    batch: &EmbeddingBatch,
    log_tau: f64,
    cfg: &ContrastiveConfig,
) -> Result<LossOutput, ObjError> {
    if !log_tau.is_finite() {
        return Err(ObjError::InvalidTemperature(log_tau.exp()));
    }
    let tau = cfg.tau(log_tau);
    let sim = similarity(batch);
    let n = sim.len();
    let inv_b = 1.0 / n as f64;
    let logits: Vec<f64> = sim.data().iter().map(|s| s / tau).collect();
    let at = |i: usize, j: usize| logits[i * n + j];
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp((0..n).map(|j| at(i, j)))).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(|i| at(i, j)))).collect();

    let mut loss = 0.0;
    for i in 0..n {
        loss += row_lse[i] + col_lse[i] - 2.0 * at(i, i);
    }
    loss *= inv_b;

    // dL/dlogit_ij = (P_ij + Q_ij − 2δ_ij) / B with row and column softmaxes.
    let mut grad_logits = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let p = (at(i, j) - row_lse[i]).exp();
            let q = (at(i, j) - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            grad_logits[i * n + j] = (p + q - delta) * inv_b;
        }
    }
    let grad_similarity: Vec<f64> = grad_logits.iter().map(|g| g / tau).collect();

    let d = batch.dim();
    let mut grad_video = vec![0.0; n * d];
    let mut grad_text = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            let g = grad_similarity[i * n + j];
            if g == 0.0 {
                continue;
            }
            for (dv, t) in grad_video[i * d..(i + 1) * d].iter_mut().zip(batch.text(j)) {
                *dv += g * t;
            }
            for (dt, v) in grad_text[j * d..(j + 1) * d].iter_mut().zip(batch.video(i)) {
                *dt += g * v;
            }
        }
    }

    let raw_tau = log_tau.exp();
    let inside = raw_tau >= cfg.tau_min && raw_tau <= cfg.tau_max;
    let grad_log_tau = if cfg.learnable_tau && inside {
        -grad_logits.iter().zip(&logits).map(|(g, l)| g * l).sum::<f64>()
    } else {
        0.0
    };
    Ok(LossOutput {
        loss,
        tau,
        grad_similarity,
        grad_video,
        grad_text,
        grad_log_tau,
    })
}

/// Mean matched-pair similarity minus mean unmatched-pair similarity.
pub fn eq1_margin(sim: &SimilarityMatrix) -> Result<f64, ObjError> {
    let n = sim.len();
    if n < 2 {
        return Err(ObjError::TooSmall(n));
    }
    let diag: f64 = (0..n).map(|i| sim.get(i, i)).sum();
    let off = sim.data().iter().sum::<f64>() - diag;
    Ok(diag / n as f64 - off / (n * (n - 1)) as f64)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::seed;

    fn unit_rows(n: usize, d: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    fn random_batch(n: usize, d: usize, seed_value: u64) -> EmbeddingBatch {
        let mut rng = seed::rng(seed_value);
        let v = unit_rows(n, d, &mut rng);
        let t = unit_rows(n, d, &mut rng);
        EmbeddingBatch::from_rows(&v, &t).unwrap()
    }

    /// Textbook form: explicit exponentials, no shifting.
    fn naive_loss(b: &EmbeddingBatch, tau: f64) -> f64 {
        let n = b.len();
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..b.dim() {
                    s[i][j] += b.video(i)[k] * b.text(j)[k];
                }
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..n {
                row += (s[i][j] / tau).exp();
                col += (s[j][i] / tau).exp();
            }
            total -= ((s[i][i] / tau).exp() / row).ln();
            total -= ((s[i][i] / tau).exp() / col).ln();
        }
        total / n as f64
    }

    #[test]
    fn similarity_examples() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = EmbeddingBatch::from_rows(&e, &e).unwrap();
        assert_eq!(similarity(&b).data(), &[1.0, 0.0, 0.0, 1.0]);
        let neg: Vec<Vec<f64>> = e.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
        let b = EmbeddingBatch::from_rows(&e, &neg).unwrap();
        let s = similarity(&b);
        assert_eq!((s.get(0, 0), s.get(1, 1)), (-1.0, -1.0));

        let b = random_batch(6, 5, 1);
        let s = similarity(&b);
        for i in 0..6 {
            for j in 0..6 {
                let mut naive = 0.0;
                for k in 0..5 {
                    naive += b.video(i)[k] * b.text(j)[k];
                }
                assert!((s.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            EmbeddingBatch::from_rows(&[vec![1.0]], &[]),
            Err(ObjError::BatchMismatch { .. })
        ));
        assert!(matches!(
            EmbeddingBatch::new(2, vec![1.0; 3], vec![1.0; 3]),
            Err(ObjError::Ragged { .. })
        ));
        assert!(matches!(EmbeddingBatch::new(2, vec![], vec![]), Err(ObjError::Empty)));
        assert!(infonce_loss(&random_batch(2, 3, 0), 0.0).is_err());
    }

    #[test]
    fn single_aligned_pair_has_zero_loss() {
        for tau in [0.01, 0.07, 1.0] {
            let b = EmbeddingBatch::from_rows(&[vec![0.6, 0.8]], &[vec![0.6, 0.8]]).unwrap();
            assert_eq!(infonce_loss(&b, tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn orthonormal_batch_matches_closed_form() {
        for n in [2usize, 3, 5, 8] {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|k| f64::from(u8::from(i == k))).collect())
                .collect();
            let b = EmbeddingBatch::from_rows(&rows, &rows).unwrap();
            for tau in [0.05f64, 0.2, 1.0] {
                let closed = 2.0 * ((1.0 / tau).exp() + n as f64 - 1.0).ln() - 2.0 / tau;
                assert!((infonce_loss(&b, tau).unwrap() - closed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_double_loop() {
        for (s, n) in (0..100u64).zip([1usize, 2, 4, 8].iter().cycle()) {
            let b = random_batch(*n, 16, s);
            let tau = 0.05 + (s as f64) * 0.005;
            let fast = infonce_loss(&b, tau).unwrap();
            assert!((fast - naive_loss(&b, tau)).abs() < 1e-10, "seed {s}");
            let out = infonce_with_grad(&b, tau.ln(), &ContrastiveConfig::default()).unwrap();
            assert!((out.loss - fast).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_and_non_negative() {
        for s in 0..20 {
            let b = random_batch(5, 8, s);
            let l = infonce_loss(&b, 0.1).unwrap();
            assert!(l >= 0.0);
            assert!((l - infonce_loss(&b.swapped(), 0.1).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ContrastiveConfig::default();
        for s in 0..10 {
            let b = random_batch(4, 6, s);
            let log_tau = (0.1f64).ln();
            let out = infonce_with_grad(&b, log_tau, &cfg).unwrap();
            let h = 1e-6;
            let loss_at = |v: &[f64], t: &[f64], lt: f64| {
                let bb = EmbeddingBatch::new(6, v.to_vec(), t.to_vec()).unwrap();
                infonce_with_grad(&bb, lt, &cfg).unwrap().loss
            };
            let (v, t) = (b.video.clone(), b.text.clone());
            for k in 0..v.len() {
                let (mut p, mut m) = (v.clone(), v.clone());
                p[k] += h;
                m[k] -= h;
                let num = (loss_at(&p, &t, log_tau) - loss_at(&m, &t, log_tau)) / (2.0 * h);
                assert!((num - out.grad_video[k]).abs() < 1e-6 * num.abs().max(1.0));
                let (mut p, mut m) = (t.clone(), t.clone());
                p[k] += h;
                m[k] -= h;
                let num = (loss_at(&v, &p, log_tau) - loss_at(&v, &m, log_tau)) / (2.0 * h);
                assert!((num - out.grad_text[k]).abs() < 1e-6 * num.abs().max(1.0));
            }
            let num = (loss_at(&v, &t, log_tau + h) - loss_at(&v, &t, log_tau - h)) / (2.0 * h);
            assert!((num - out.grad_log_tau).abs() < 1e-6 * num.abs().max(1.0));
        }
    }

    #[test]
    fn clamped_or_fixed_temperature_has_no_gradient() {
        let b = random_batch(3, 4, 2);
        let cfg = ContrastiveConfig::default();
        let out = infonce_with_grad(&b, (0.001f64).ln(), &cfg).unwrap();
        assert_eq!(out.tau, 0.01);
        assert_eq!(out.grad_log_tau, 0.0);
        let fixed = ContrastiveConfig {
            learnable_tau: false,
            ..cfg
        };
        assert_eq!(infonce_with_grad(&b, (0.1f64).ln(), &fixed).unwrap().grad_log_tau, 0.0);
    }

    #[test]
    fn descent_pulls_pairs_together() {
        for s in 0..20 {
            let b = random_batch(2, 4, s);
            let out = infonce_with_grad(&b, (0.07f64).ln(), &ContrastiveConfig::default()).unwrap();
            let g = &out.grad_similarity;
            assert!(g[0] < 0.0 && g[3] < 0.0);
            assert!(g[1] > 0.0 && g[2] > 0.0);
        }
    }

    #[test]
    fn loss_grows_with_temperature_when_pairs_lead() {
        let rows = |a: f64| vec![vec![1.0, 0.0], vec![a, (1.0 - a * a).sqrt()]];
        let b = EmbeddingBatch::from_rows(&rows(0.3), &rows(0.3)).unwrap();
        let s = similarity(&b);
        assert!(s.get(0, 0) > s.get(0, 1));
        let grid: Vec<f64> = (0..=99).map(|k| 0.01 + k as f64 * 0.01).collect();
        let losses: Vec<f64> = grid.iter().map(|&t| infonce_loss(&b, t).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn coldest_temperature_is_stable() {
        let e = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let b = EmbeddingBatch::from_rows(&e, &e).unwrap();
        let out = infonce_with_grad(&b, (0.01f64).ln(), &ContrastiveConfig::default()).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0);
        assert!(out.grad_video.iter().all(|g| g.is_finite()));
        let flipped = EmbeddingBatch::from_rows(&e, &[vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let l = infonce_loss(&flipped, 0.01).unwrap();
        assert!((l - 400.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn margin_examples() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|k| f64::from(u8::from(i == k))).collect())
            .collect();
        let b = EmbeddingBatch::from_rows(&rows, &rows).unwrap();
        assert_eq!(eq1_margin(&similarity(&b)).unwrap(), 1.0);
        let mean: f64 = (0..200)
            .map(|s| eq1_margin(&similarity(&random_batch(8, 32, s))).unwrap())
            .sum::<f64>()
            / 200.0;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!(eq1_margin(&similarity(&random_batch(1, 4, 0))).is_err());
    }
}
