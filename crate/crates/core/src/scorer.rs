//! Two-layer relevance scorer.
//!
//! Each token is projected to a local feature of width `D/2`; the mean of
//! the local features is appended to every token as a global context, and a
//! second affine map yields one raw score per token. Raw scores feed the
//! differentiable Top-K directly; min-max normalised scores feed the
//! compression rule.

use rand::Rng;

use crate::error::{ReefError, Result};
use crate::tensor::{minmax_norm, Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    /// `D x D/2`
    pub w1: Matrix,
    /// `1 x D/2`
    pub b1: Matrix,
    /// `D x 1`: local half first, global half second.
    pub w2: Matrix,
    /// `1 x 1`
    pub b2: Matrix,
}

impl ScorerParams {
    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Uniform weights in `±1/√fan_in`, zero biases.
    pub fn init(rng: SeededRng, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(ReefError::Argument(format!(
                "scorer width must be even and positive, got {dim}"
            )));
        }
        let hidden = dim / 2;
        let mut g = rng.generator();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            let data = (0..rows * cols)
                .map(|_| g.gen_range(-bound..=bound))
                .collect();
            Matrix::new(rows, cols, data).expect("sized above")
        };
        let w1 = uniform(dim, hidden, dim);
        let w2 = uniform(2 * hidden, 1, 2 * hidden);
        Ok(Self {
            w1,
            b1: Matrix::zeros(1, hidden),
            w2,
            b2: Matrix::zeros(1, 1),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = self.w1.shape();
        if d != 2 * h
            || self.b1.shape() != (1, h)
            || self.w2.shape() != (2 * h, 1)
            || self.b2.shape() != (1, 1)
        {
            return Err(ReefError::shape(
                "ScorerParams",
                format!(
                    "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    self.w1.shape(),
                    self.b1.shape(),
                    self.w2.shape(),
                    self.b2.shape()
                ),
            ));
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        for m in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for v in m.data() {
                h = (h ^ v.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ScorerCache {
    input: Matrix,
    local: Matrix,
    global: Matrix,
    raw: Vec<f32>,
    params_id: u64,
}

impl ScorerCache {
    pub fn raw(&self) -> &[f32] {
        &self.raw
    }

    pub fn local(&self) -> &Matrix {
        &self.local
    }

    pub fn global(&self) -> &Matrix {
        &self.global
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// Gradient with respect to the scored tokens.
    pub input: Matrix,
}

/// Raw (unnormalised) scores and the cache.
pub fn scorer_raw(tokens: &Matrix, params: &ScorerParams) -> Result<(Vec<f32>, ScorerCache)> {
    params.validate()?;
    if tokens.rows() == 0 {
        return Err(ReefError::Argument(
            "scorer needs at least one token".into(),
        ));
    }
    if tokens.cols() != params.dim() {
        return Err(ReefError::shape(
            "scorer_forward",
            format!(
                "tokens have width {}, scorer expects {}",
                tokens.cols(),
                params.dim()
            ),
        ));
    }
    let h = params.hidden();
    let local = tokens.matmul(&params.w1)?.add_row(&params.b1)?;
    let global = local.mean_rows();
    let (w_local, w_global) = params.w2.data().split_at(h);
    let global_term: f32 = global
        .data()
        .iter()
        .zip(w_global)
        .map(|(&a, &b)| a * b)
        .sum();
    let bias = params.b2.get(0, 0);
    let raw = (0..local.rows())
        .map(|i| {
            let l: f32 = local.row(i).iter().zip(w_local).map(|(&a, &b)| a * b).sum();
            l + global_term + bias
        })
        .collect::<Vec<_>>();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(ReefError::Numeric(
            "scorer produced non-finite scores".into(),
        ));
    }
    let cache = ScorerCache {
        input: tokens.clone(),
        local,
        global,
        raw: raw.clone(),
        params_id: params.fingerprint(),
    };
    Ok((raw, cache))
}

/// Normalised scores in `[0, 1]` plus the cache.
pub fn scorer_forward(tokens: &Matrix, params: &ScorerParams) -> Result<(Vec<f32>, ScorerCache)> {
    let (raw, cache) = scorer_raw(tokens, params)?;
    Ok((minmax_norm(&raw), cache))
}

/// Exact gradients of `Σᵢ grad_raw[i] · raw[i]` with respect to the
/// parameters and the input tokens. Every local feature also reaches every
/// score through the mean-pooled global feature with weight `1/G`.
pub fn scorer_backward(
    cache: &ScorerCache,
    params: &ScorerParams,
    grad_raw: &[f32],
) -> Result<ScorerGrads> {
    let g = cache.local.rows();
    if grad_raw.len() != g {
        return Err(ReefError::State(format!(
            "gradient has {} entries, cache holds {g} tokens",
            grad_raw.len()
        )));
    }
    if cache.params_id != params.fingerprint() {
        return Err(ReefError::State(
            "scorer cache was produced with different parameters".into(),
        ));
    }
    let h = params.hidden();
    let (w_local, w_global) = params.w2.data().split_at(h);
    let total: f32 = grad_raw.iter().map(|&v| v as f64).sum::<f64>() as f32;

    let mut gw2 = vec![0f32; 2 * h];
    for (i, &gi) in grad_raw.iter().enumerate() {
        for (acc, &l) in gw2[..h].iter_mut().zip(cache.local.row(i)) {
            *acc += gi * l;
        }
    }
    for (acc, &m) in gw2[h..].iter_mut().zip(cache.global.data()) {
        *acc = total * m;
    }

    // dL/d local_i = g_i · w_local + (Σ g) · w_global / G
    let mut g_local = Matrix::zeros(g, h);
    let inv_g = 1.0 / g as f32;
    for (i, &gi) in grad_raw.iter().enumerate() {
        for (j, v) in g_local.row_mut(i).iter_mut().enumerate() {
            *v = gi * w_local[j] + total * w_global[j] * inv_g;
        }
    }
    let gw1 = cache.input.matmul_tn(&g_local)?;
    let mut gb1 = g_local.mean_rows();
    gb1 = gb1.scale(g as f32);
    let input = g_local.matmul_nt(&params.w1)?;
    Ok(ScorerGrads {
        w1: gw1,
        b1: gb1,
        w2: Matrix::new(2 * h, 1, gw2)?,
        b2: Matrix::filled(1, 1, total),
        input,
    })
}
