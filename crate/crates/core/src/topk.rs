//! Hard and perturbed-maximum Top-K selection.
//!
//! Selected indices are always returned in ascending order so that
//! `Yᵀ x` keeps the input sequence order. The smoothed operator averages
//! hard selections of Gaussian-perturbed scores; its backward pass is the
//! Monte-Carlo Jacobian-vector product over the same noise draws.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ReefError, Result};
use crate::tensor::{Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectMode {
    Train,
    Eval,
}

/// `G x K` token selector. Hard selectors carry one-hot columns with
/// strictly increasing row positions; smoothed ones are column-stochastic.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMatrix {
    data: Matrix,
    indices: Option<Vec<usize>>,
}

impl SelectionMatrix {
    pub fn g(&self) -> usize {
        self.data.rows()
    }

    pub fn k(&self) -> usize {
        self.data.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn is_hard(&self) -> bool {
        self.indices.is_some()
    }

    /// Selected rows in column order, for hard selectors.
    pub fn indices(&self) -> Option<&[usize]> {
        self.indices.as_deref()
    }

    fn from_indices(g: usize, indices: Vec<usize>) -> Self {
        let mut data = Matrix::zeros(g, indices.len());
        for (col, &row) in indices.iter().enumerate() {
            data.set(row, col, 1.0);
        }
        Self {
            data,
            indices: Some(indices),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PerturbConfig {
    pub sigma: f32,
    pub n_samples: usize,
    pub rng: SeededRng,
}

impl PerturbConfig {
    pub fn new(sigma: f32, n_samples: usize, rng: SeededRng) -> Result<Self> {
        let cfg = Self {
            sigma,
            n_samples,
            rng,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(ReefError::Argument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.n_samples == 0 {
            return Err(ReefError::Argument("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_rng(&self, rng: SeededRng) -> Self {
        Self {
            rng,
            ..self.clone()
        }
    }
}

fn check_k(g: usize, k: usize) -> Result<()> {
    if k == 0 || k > g {
        return Err(ReefError::Argument(format!(
            "Top-K needs 1 <= K <= G, got K={k}, G={g}"
        )));
    }
    Ok(())
}

/// Indices of the `k` largest scores in ascending index order. Ties go to
/// the lower index.
pub fn topk_indices(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    check_k(scores.len(), k)?;
    let mut out = Vec::with_capacity(k);
    topk_into(scores, k, &mut out);
    Ok(out)
}

/// Selection into a reusable buffer. Assumes `1 <= k <= scores.len()`.
fn topk_into(scores: &[f32], k: usize, out: &mut Vec<usize>) {
    out.clear();
    if k == 1 {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        out.push(best);
        return;
    }
    out.extend(0..scores.len());
    // Descending score, ascending index among equal scores.
    out.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    out.truncate(k);
    out.sort_unstable();
}

pub fn hard_topk(scores: &[f32], k: usize) -> Result<SelectionMatrix> {
    let idx = topk_indices(scores, k)?;
    Ok(SelectionMatrix::from_indices(scores.len(), idx))
}

/// `x′ = Yᵀ x`; a hard selector reduces to a row gather.
pub fn select_tokens(y: &SelectionMatrix, x: &Matrix) -> Result<Matrix> {
    if y.g() != x.rows() {
        return Err(ReefError::shape(
            "select_tokens",
            format!("selector has G={}, tokens have {} rows", y.g(), x.rows()),
        ));
    }
    match y.indices() {
        Some(idx) => x.gather_rows(idx),
        None => y.data.matmul_tn(x),
    }
}

/// Noise draws and per-sample selections retained for the backward pass.
#[derive(Clone, Debug)]
pub struct PerturbedCache {
    g: usize,
    k: usize,
    sigma: f32,
    scores: Vec<f32>,
    /// `n x G`, row-major.
    noise: Rc<Vec<f32>>,
    /// `n x K` selected indices, row-major.
    picks: Vec<u32>,
    mean: Matrix,
}

impl PerturbedCache {
    pub fn n_samples(&self) -> usize {
        self.picks.len() / self.k
    }

    pub fn smoothed(&self) -> &Matrix {
        &self.mean
    }
}

/// `n x G` standard normal draws, Latin-hypercube stratified per column:
/// every draw is marginally `N(0, I)` but each coordinate hits each of the
/// `n` equiprobable strata exactly once.
fn latin_normal(rng: SeededRng, n: usize, g: usize) -> Rc<Vec<f32>> {
    thread_local! {
        static DRAWS: RefCell<HashMap<(u64, u64, usize, usize), Rc<Vec<f32>>>> =
            RefCell::new(HashMap::new());
    }
    let key = (rng.seed, rng.stream_id, n, g);
    if let Some(hit) = DRAWS.with(|d| d.borrow().get(&key).cloned()) {
        return hit;
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut gen = rng.generator();
    let mut out = vec![0f32; n * g];
    let mut strata: Vec<usize> = (0..n).collect();
    for col in 0..g {
        strata.shuffle(&mut gen);
        for (j, &st) in strata.iter().enumerate() {
            let u = (st as f64 + gen.gen::<f64>()) / n as f64;
            out[j * g + col] = normal.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12)) as f32;
        }
    }
    let out = Rc::new(out);
    DRAWS.with(|d| {
        let mut d = d.borrow_mut();
        // Draws are reused across repeated passes over the same stream.
        if d.values().map(|v| v.len()).sum::<usize>() + out.len() > 1 << 24 {
            d.clear();
        }
        d.insert(key, out.clone());
    });
    out
}

/// `Y_σ = (1/n) Σⱼ TopK(scores + σ Zⱼ)`.
pub fn perturbed_topk_forward(
    scores: &[f32],
    k: usize,
    cfg: &PerturbConfig,
) -> Result<(SelectionMatrix, PerturbedCache)> {
    let g = scores.len();
    check_k(g, k)?;
    cfg.validate()?;
    let n = cfg.n_samples;
    let noise = latin_normal(cfg.rng, n, g);
    let mut picks = Vec::with_capacity(n * k);
    let mut counts = vec![0u32; g * k];
    let mut perturbed = vec![0f32; g];
    let mut idx = Vec::with_capacity(g);
    for j in 0..n {
        for ((p, &s), &z) in perturbed.iter_mut().zip(scores).zip(&noise[j * g..(j + 1) * g]) {
            *p = s + cfg.sigma * z;
        }
        topk_into(&perturbed, k, &mut idx);
        for (col, &row) in idx.iter().enumerate() {
            counts[row * k + col] += 1;
            picks.push(row as u32);
        }
    }
    let inv = 1.0 / n as f64;
    let mean = Matrix::new(
        g,
        k,
        counts.iter().map(|&c| (c as f64 * inv) as f32).collect(),
    )?;
    let cache = PerturbedCache {
        g,
        k,
        sigma: cfg.sigma,
        scores: scores.to_vec(),
        noise,
        picks,
        mean: mean.clone(),
    };
    Ok((
        SelectionMatrix {
            data: mean,
            indices: None,
        },
        cache,
    ))
}

/// Vector-Jacobian product of the smoothed selector with respect to the
/// scores, the Monte-Carlo estimate of `⟨grad_y, E[Y(s + σZ) Zᵢ]⟩ / σ`.
///
/// Each coordinate's draw is integrated out in closed form: with the other
/// draws fixed, token `i` is selected iff `zᵢ > τᵢ`, so the inner
/// expectation over `zᵢ` is `(f_in − f_out) φ(τᵢ)`, where `f` is the
/// objective with `i` forced in or out. Same expectation as
/// [`perturbed_topk_backward_score`], far lower variance. The result is
/// centred because the exact product sums to zero.
pub fn perturbed_topk_backward(cache: &PerturbedCache, grad_y: &Matrix) -> Result<Vec<f32>> {
    check_grad_shape(cache, grad_y)?;
    let (g, k) = (cache.g, cache.k);
    let n = cache.n_samples();
    let mut acc = vec![0f64; g];
    if k == g {
        return Ok(vec![0.0; g]);
    }
    let sigma = cache.sigma as f64;
    let mut perturbed = vec![0f32; g];
    let mut order: Vec<usize> = Vec::with_capacity(g);
    let mut others: Vec<usize> = Vec::with_capacity(g);
    let mut set: Vec<usize> = Vec::with_capacity(k);
    let objective = |set: &mut Vec<usize>| -> f64 {
        set.sort_unstable();
        set.iter()
            .enumerate()
            .map(|(col, &row)| grad_y.get(row, col) as f64)
            .sum()
    };
    for j in 0..n {
        let z = &cache.noise[j * g..(j + 1) * g];
        for ((p, &s), &zi) in perturbed.iter_mut().zip(&cache.scores).zip(z) {
            *p = s + cache.sigma * zi;
        }
        order.clear();
        order.extend(0..g);
        order.sort_by(|&a, &b| perturbed[b].total_cmp(&perturbed[a]).then(a.cmp(&b)));
        for (i, a) in acc.iter_mut().enumerate() {
            others.clear();
            others.extend(order.iter().copied().filter(|&o| o != i).take(k));
            let threshold = perturbed[others[k - 1]] as f64;
            let tau = (threshold - cache.scores[i] as f64) / sigma;
            let density = (-0.5 * tau * tau).exp() / (2.0 * std::f64::consts::PI).sqrt();
            if density < 1e-300 {
                continue;
            }
            set.clear();
            set.extend_from_slice(&others);
            let f_out = objective(&mut set);
            set.clear();
            set.extend_from_slice(&others[..k - 1]);
            set.push(i);
            let f_in = objective(&mut set);
            *a += (f_in - f_out) * density;
        }
    }
    // The exact product is orthogonal to the all-ones direction.
    let mean = acc.iter().sum::<f64>() / g as f64;
    let scale = 1.0 / (n as f64 * sigma);
    Ok(acc.into_iter().map(|a| ((a - mean) * scale) as f32).collect())
}

fn check_grad_shape(cache: &PerturbedCache, grad_y: &Matrix) -> Result<()> {
    if grad_y.shape() != (cache.g, cache.k) {
        return Err(ReefError::State(format!(
            "gradient is {:?} but the cached selection is {}x{}",
            grad_y.shape(),
            cache.g,
            cache.k
        )));
    }
    Ok(())
}

/// Score-function form of the vector-Jacobian product, `(1/nσ) Σⱼ ⟨grad_y, Yⱼ − Y_σ⟩ (Zⱼ − z̄ⱼ 1)`.
///
/// Subtracting `Y_σ` is a control variate and centring each `Zⱼ` projects
/// out the all-ones direction, along which the exact Jacobian vanishes.
/// Neither changes the expectation.
pub fn perturbed_topk_backward_score(cache: &PerturbedCache, grad_y: &Matrix) -> Result<Vec<f32>> {
    check_grad_shape(cache, grad_y)?;
    let (g, k) = (cache.g, cache.k);
    let n = cache.n_samples();
    let baseline: f64 = grad_y
        .data()
        .iter()
        .zip(cache.mean.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    let mut acc = vec![0f64; g];
    for j in 0..n {
        let picks = &cache.picks[j * k..(j + 1) * k];
        let inner: f64 = picks
            .iter()
            .enumerate()
            .map(|(col, &row)| grad_y.get(row as usize, col) as f64)
            .sum();
        let w = inner - baseline;
        if w == 0.0 {
            continue;
        }
        let z = &cache.noise[j * g..(j + 1) * g];
        let z_mean = z.iter().map(|&v| v as f64).sum::<f64>() / g as f64;
        for (a, &zi) in acc.iter_mut().zip(z) {
            *a += w * (zi as f64 - z_mean);
        }
    }
    let scale = 1.0 / (n as f64 * cache.sigma as f64);
    Ok(acc.into_iter().map(|a| (a * scale) as f32).collect())
}

/// Smoothed selector with its cache in train mode, hard selector in eval.
pub fn topk_train_select(
    scores: &[f32],
    k: usize,
    cfg: &PerturbConfig,
    mode: SelectMode,
) -> Result<(SelectionMatrix, Option<PerturbedCache>)> {
    match mode {
        SelectMode::Eval => Ok((hard_topk(scores, k)?, None)),
        SelectMode::Train => {
            let (y, cache) = perturbed_topk_forward(scores, k, cfg)?;
            Ok((y, Some(cache)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_sample;

    fn cfg(sigma: f32, n: usize, seed: u64) -> PerturbConfig {
        PerturbConfig::new(sigma, n, SeededRng::new(seed, 0)).unwrap()
    }

    #[test]
    fn hard_direct_ranking() {
        let y = hard_topk(&[0.3, 0.9, 0.5, 0.1], 2).unwrap();
        assert_eq!(y.indices().unwrap(), &[1, 2]);
        let m = y.matrix();
        assert_eq!(m.get(1, 0), 1.0);
        assert_eq!(m.get(2, 1), 1.0);
        assert_eq!(m.data().iter().sum::<f32>(), 2.0);
    }

    #[test]
    fn hard_full_is_identity() {
        let y = hard_topk(&[0.2, 0.7, 0.1], 3).unwrap();
        assert_eq!(y.matrix(), &Matrix::identity(3));
    }

    #[test]
    fn hard_tie_breaks_low() {
        assert_eq!(hard_topk(&[0.5, 0.5], 1).unwrap().indices().unwrap(), &[0]);
        assert_eq!(topk_indices(&[1.0, 2.0, 2.0, 2.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn hard_rejects_bad_k() {
        assert!(matches!(hard_topk(&[1.0], 2), Err(ReefError::Argument(_))));
        assert!(hard_topk(&[1.0], 0).is_err());
    }

    #[test]
    fn select_cases() {
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let id = hard_topk(&[1.0, 1.0], 2).unwrap();
        assert_eq!(select_tokens(&id, &x).unwrap(), x);
        let y = hard_topk(&[0.9, 0.1], 1).unwrap();
        assert_eq!(select_tokens(&y, &x).unwrap().data(), &[1.0, 2.0]);
        let soft = SelectionMatrix {
            data: Matrix::from_rows(&[&[0.5], &[0.5]]),
            indices: None,
        };
        assert_eq!(select_tokens(&soft, &x).unwrap().data(), &[2.0, 3.0]);
        assert!(select_tokens(&y, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn tiny_sigma_reproduces_hard() {
        let scores = [0.1, 0.8, 0.4, 0.95, 0.2];
        let (y, _) = perturbed_topk_forward(&scores, 2, &cfg(1e-6, 64, 3)).unwrap();
        assert_eq!(y.matrix(), hard_topk(&scores, 2).unwrap().matrix());
    }

    #[test]
    fn smoothed_is_column_stochastic() {
        let scores = gaussian_sample(SeededRng::new(4, 0), 1, 7);
        let (y, _) = perturbed_topk_forward(scores.data(), 3, &cfg(0.7, 333, 5)).unwrap();
        for c in 0..3 {
            let s: f64 = (0..7).map(|r| y.matrix().get(r, c) as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(y.matrix().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn phi(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 erf approximation, error below 1.5e-7.
        let z = x / std::f64::consts::SQRT_2;
        let t = 1.0 / (1.0 + 0.327_591_1 * z.abs());
        let poly = t
            * (0.254_829_592
                + t * (-0.284_496_736
                    + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
        let erf = 1.0 - poly * (-z * z).exp();
        0.5 * (1.0 + erf.copysign(z))
    }

    #[test]
    fn closed_form_two_scores() {
        // P(s₀ + σZ₀ > s₁ + σZ₁) = Φ((s₀ − s₁) / (σ√2)).
        for (scores, expected) in [([1.0f32, 0.9], 0.556_2), ([1.0, 0.8], 0.611_4)] {
            let gap = (scores[0] - scores[1]) as f64;
            assert!((phi(gap / (0.5 * 2f64.sqrt())) - expected).abs() < 1e-3);
            let (y, _) = perturbed_topk_forward(&scores, 1, &cfg(0.5, 100_000, 6)).unwrap();
            assert!((y.matrix().get(0, 0) as f64 - expected).abs() < 0.01);
        }
    }

    #[test]
    fn conditional_and_score_forms_agree() {
        let scores = [0.4f32, 0.1, 0.7, 0.5, 0.2];
        let w = gaussian_sample(SeededRng::new(3, 3), 5, 2);
        let (_, cache) = perturbed_topk_forward(&scores, 2, &cfg(0.5, 400_000, 9)).unwrap();
        let a: Vec<f64> = perturbed_topk_backward(&cache, &w).unwrap().into_iter().map(f64::from).collect();
        let b: Vec<f64> = perturbed_topk_backward_score(&cache, &w).unwrap().into_iter().map(f64::from).collect();
        assert!(crate::tensor::relative_error(&a, &b, 1e-9) < 0.02);
        assert!(a.iter().sum::<f64>().abs() < 1e-5);
    }

    #[test]
    fn backward_zero_grad() {
        let (_, cache) = perturbed_topk_forward(&[0.3, 0.2, 0.5], 2, &cfg(0.3, 100, 7)).unwrap();
        let g = perturbed_topk_backward(&cache, &Matrix::zeros(3, 2)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(matches!(
            perturbed_topk_backward(&cache, &Matrix::zeros(3, 1)),
            Err(ReefError::State(_))
        ));
    }

    #[test]
    fn shift_invariance() {
        let scores = [0.3f32, 0.1, 0.7, 0.4];
        let shifted: Vec<f32> = scores.iter().map(|s| s + 0.25).collect();
        let c = cfg(0.2, 2000, 8);
        let (a, cache) = perturbed_topk_forward(&scores, 2, &c).unwrap();
        let (b, _) = perturbed_topk_forward(&shifted, 2, &c).unwrap();
        for (x, y) in a.matrix().data().iter().zip(b.matrix().data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let grad_y = gaussian_sample(SeededRng::new(8, 1), 4, 2);
        let g = perturbed_topk_backward(&cache, &grad_y).unwrap();
        let total: f32 = g.iter().sum();
        assert!(total.abs() < 1e-5, "sum {total}");
        assert_eq!(
            hard_topk(&scores, 2).unwrap().indices(),
            hard_topk(&shifted, 2).unwrap().indices()
        );
    }

    #[test]
    fn train_eval_modes() {
        let scores = [0.2f32, 0.9, 0.5];
        let c = cfg(1e-6, 32, 9);
        let (e, cache) = topk_train_select(&scores, 1, &c, SelectMode::Eval).unwrap();
        assert!(cache.is_none());
        assert_eq!(e, hard_topk(&scores, 1).unwrap());
        let (t, cache) = topk_train_select(&scores, 1, &c, SelectMode::Train).unwrap();
        assert!(cache.is_some());
        assert_eq!(t.matrix(), e.matrix());
    }

    #[test]
    fn train_eval_agree_on_separated_scores() {
        for trial in 0..100u64 {
            let g = 6;
            let base = gaussian_sample(SeededRng::new(10, trial), 1, g);
            // Spread the ranks far apart relative to sigma.
            let mut order: Vec<usize> = (0..g).collect();
            order.sort_by(|&a, &b| base.data()[a].total_cmp(&base.data()[b]));
            let mut scores = vec![0f32; g];
            for (rank, &i) in order.iter().enumerate() {
                scores[i] = rank as f32;
            }
            let c = cfg(0.05, 200, trial);
            let (t, _) = perturbed_topk_forward(&scores, 3, &c).unwrap();
            let hard = hard_topk(&scores, 3).unwrap();
            let soft_pick = topk_indices(
                &(0..g)
                    .map(|r| (0..3).map(|col| t.matrix().get(r, col)).sum::<f32>())
                    .collect::<Vec<_>>(),
                3,
            )
            .unwrap();
            assert_eq!(soft_pick, hard.indices().unwrap());
        }
    }
}
