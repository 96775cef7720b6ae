//! Finite-difference checks of the analytic and Monte-Carlo gradients.

use rand::Rng;

use crate::autodiff::Tape;
use crate::config::{AdapterConfig, RunConfig};
use crate::error::Result;
use crate::model::{
    decode_loss_tape, run_stream_tape, BoundParams, Decision, ModelParams, RunOptions,
};
use crate::tensor::{
    finite_diff_grad, gaussian_sample, relative_error, GradCheckReport, SeededRng,
};
use crate::topk::{perturbed_topk_backward, perturbed_topk_forward, PerturbConfig};
use crate::train::{gen_toy_stream, Stage, ToyStream, ToyStreamSpec};

/// Acceptance bound on the relative error.
pub const GRAD_TOLERANCE: f64 = 5e-2;

/// Options of the perturbed Top-K check.
#[derive(Clone, Debug)]
pub struct TopkCheck {
    pub instances: usize,
    pub max_g: usize,
    pub max_k: usize,
    pub sigma: f32,
    pub n_samples: usize,
    /// Finite-difference step as a multiple of `σ`.
    pub step: f64,
    pub seed: u64,
}

impl Default for TopkCheck {
    fn default() -> Self {
        Self {
            instances: 10,
            max_g: 8,
            max_k: 3,
            sigma: 0.5,
            n_samples: 10_000,
            step: 0.4,
            seed: 11,
        }
    }
}

/// Compares the Monte-Carlo backward of `⟨W, Y_σ(s)⟩` against central
/// differences of the same objective with the noise draws held fixed.
pub fn check_topk(opts: &TopkCheck) -> Result<GradCheckReport> {
    let root = SeededRng::new(opts.seed, 0x70B);
    let mut errors = Vec::with_capacity(opts.instances);
    for inst in 0..opts.instances {
        let mut g = root.derive(&[inst as u64, 0]).generator();
        let n = g.gen_range(2..=opts.max_g);
        let k = g.gen_range(1..=opts.max_k.min(n - 1));
        let scores: Vec<f32> = (0..n).map(|_| g.gen_range(0.0f32..1.0)).collect();
        let w = gaussian_sample(root.derive(&[inst as u64, 1]), n, k);
        let cfg = PerturbConfig::new(opts.sigma, opts.n_samples, root.derive(&[inst as u64, 2]))?;

        let (_, cache) = perturbed_topk_forward(&scores, k, &cfg)?;
        let analytic: Vec<f64> = perturbed_topk_backward(&cache, &w)?
            .into_iter()
            .map(f64::from)
            .collect();
        let objective = |s: &[f64]| -> f64 {
            let s: Vec<f32> = s.iter().map(|&v| v as f32).collect();
            let (y, _) = perturbed_topk_forward(&s, k, &cfg).expect("validated instance");
            y.matrix()
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        };
        let theta: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let numeric = finite_diff_grad(objective, &theta, opts.step * opts.sigma as f64)?;
        errors.push((
            format!("instance {inst} (G={n}, K={k})"),
            relative_error(&analytic, &numeric, 1e-6),
        ));
    }
    Ok(GradCheckReport::from_errors(errors, GRAD_TOLERANCE))
}

/// Options of the end-to-end check on a tiny pipeline.
#[derive(Clone, Debug)]
pub struct PipelineCheck {
    pub stage: Stage,
    pub sigma: f32,
    pub n_samples: usize,
    /// Step for parameters that reach the loss only through smoothed
    /// selections, where the shared-seed forward is piecewise constant.
    pub scorer_step: f64,
    pub dense_step: f64,
    pub seed: u64,
}

impl PipelineCheck {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            sigma: 0.5,
            n_samples: 50_000,
            scorer_step: 0.05,
            dense_step: 1e-2,
            seed: 3,
        }
    }
}

/// `D=8, N=4, L=3, T=5` with a one-token spatial filter, so four anchors
/// compete in every frame.
pub fn tiny_config(opts: &PipelineCheck) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = opts.seed;
    cfg.adapter = AdapterConfig {
        dim: 8,
        tokens: 4,
        queries: 2,
        bank_capacity: 3,
        k_spat: 1,
        gamma: 1,
        sigma: opts.sigma,
        n_samples: opts.n_samples,
        heads: 2,
        blocks: 1,
        vocab: 4,
        seq_len: 2,
        ..AdapterConfig::default()
    };
    cfg.data.frames = 5;
    cfg.data.classes = 2;
    cfg.data.signal_fraction = 0.4;
    cfg
}

fn tiny_stream(cfg: &RunConfig) -> Result<ToyStream> {
    gen_toy_stream(&ToyStreamSpec {
        frames: cfg.data.frames,
        tokens: cfg.adapter.tokens,
        dim: cfg.adapter.dim,
        n_classes: cfg.data.classes,
        class: 1,
        signal_fraction: cfg.data.signal_fraction,
        signal_anchor: (1, 1, 1),
        noise_scale: 1.0,
        signal_strength: 1.0,
        signal_span: 1.0,
        seq_len: cfg.adapter.seq_len,
        vocab: cfg.adapter.vocab,
        seed: cfg.seed,
    })
}

fn pipeline_loss(
    params: &ModelParams,
    cfg: &AdapterConfig,
    stream: &ToyStream,
    opts: &RunOptions,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, |_| false);
    let run = run_stream_tape(&mut tape, &bound, params, &stream.frames, cfg, opts)?;
    let loss = decode_loss_tape(&mut tape, &bound, run.theta, &stream.labels, cfg.vocab)?;
    Ok(tape.value(loss).get(0, 0) as f64)
}

/// Every trainable parameter of a stage against central differences of
/// the loss. The probes reuse the noise seed and replay the discrete
/// choices of the base run, so only the smooth dependence is measured.
pub fn check_pipeline(opts: &PipelineCheck) -> Result<GradCheckReport> {
    let cfg = tiny_config(opts);
    let adapter = opts.stage.adapter(&cfg.adapter);
    let params = ModelParams::init(&adapter, cfg.seed)?;
    let stream = tiny_stream(&cfg)?;
    let noise = SeededRng::new(cfg.seed, 0x6C4E);

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, |n| opts.stage.trainable(n));
    let base = RunOptions::new(opts.stage.mode(), noise);
    let run = run_stream_tape(&mut tape, &bound, &params, &stream.frames, &adapter, &base)?;
    let loss = decode_loss_tape(&mut tape, &bound, run.theta, &stream.labels, adapter.vocab)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);
    let decisions: Vec<Decision> = run.state.decisions.items().to_vec();
    let probe = RunOptions {
        replay: Some(decisions),
        ..base
    };

    let mut errors = Vec::with_capacity(analytic.len());
    for (name, g) in &analytic {
        let step = if name.starts_with("temporal.") || name.starts_with("spatial.") {
            opts.scorer_step
        } else {
            opts.dense_step
        };
        let start = params.get(name)?.clone();
        let theta: Vec<f64> = start.data().iter().map(|&v| v as f64).collect();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |x| {
                let mut p = params.clone();
                let m = p.get_mut(name).expect("bound parameter");
                m.data_mut().iter_mut().zip(x).for_each(|(d, &v)| *d = v as f32);
                match pipeline_loss(&p, &adapter, &stream, &probe) {
                    Ok(l) => l,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &theta,
            step,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let numeric = numeric?;
        let a: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
        errors.push((name.clone(), relative_error(&a, &numeric, 1e-4)));
    }
    Ok(GradCheckReport::from_errors(errors, GRAD_TOLERANCE))
}
