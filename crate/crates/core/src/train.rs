//! Synthetic planted-signal streams and the two-stage training protocol.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tape;
use crate::bank::Strategy;
use crate::config::{AdapterConfig, Optimizer, RunConfig, TrainConfig};
use crate::error::{ReefError, Result};
use crate::model::{
    decode_loss_tape, run_stream_tape, BoundParams, ModelParams, PipelineMode, RunOptions,
};
use crate::spatial::exact_sqrt;
use crate::tensor::{gaussian_sample, Matrix, SeededRng};
use crate::topk::SelectMode;

/// Seed of the class patterns, shared by every stream of every corpus.
const PATTERN_SEED: u64 = 0x0C1A_55E5;

/// One synthetic stream: Gaussian background frames, a few of which carry a
/// class pattern inside a fixed spatial block.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyStreamSpec {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub class: usize,
    pub signal_fraction: f32,
    /// Top-left corner and side of the planted block on the token grid.
    pub signal_anchor: (usize, usize, usize),
    pub noise_scale: f32,
    pub signal_strength: f32,
    /// Leading share of the stream where planted frames may appear.
    pub signal_span: f32,
    pub seq_len: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl ToyStreamSpec {
    pub fn validate(&self) -> Result<()> {
        let side = exact_sqrt(self.tokens)
            .ok_or_else(|| ReefError::Argument(format!("{} tokens is not a square grid", self.tokens)))?;
        let (y0, x0, a) = self.signal_anchor;
        if a == 0 || y0 + a > side || x0 + a > side {
            return Err(ReefError::Argument(format!(
                "signal block {:?} does not fit a {side}x{side} grid",
                self.signal_anchor
            )));
        }
        if self.n_classes == 0 || self.n_classes > self.dim {
            return Err(ReefError::Argument(format!(
                "{} classes need orthogonal patterns in {} dimensions",
                self.n_classes, self.dim
            )));
        }
        if self.class >= self.n_classes {
            return Err(ReefError::Argument(format!("class {} of {}", self.class, self.n_classes)));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0)
            || self.planted_count() < 1
            || self.planted_count() > self.span_frames()
        {
            return Err(ReefError::Argument("signal fraction must plant at least one frame".into()));
        }
        if self.seq_len == 0 || self.vocab == 0 {
            return Err(ReefError::Argument("label sequence needs a vocabulary".into()));
        }
        Ok(())
    }

    pub fn planted_count(&self) -> usize {
        ((self.signal_fraction * self.frames as f32).round() as usize).min(self.frames)
    }

    pub fn span_frames(&self) -> usize {
        ((self.signal_span * self.frames as f32).ceil() as usize).min(self.frames)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyStream {
    pub frames: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub class: usize,
    pub planted: Vec<usize>,
}

/// Label tokens of a class: `(c · S + i) mod V`.
pub fn class_tokens(class: usize, seq_len: usize, vocab: usize) -> Vec<usize> {
    (0..seq_len).map(|i| (class * seq_len + i) % vocab).collect()
}

/// Orthonormal class directions scaled to norm `√D`, so each entry is of
/// unit size like the background noise.
pub fn class_patterns(n_classes: usize, dim: usize) -> Result<Vec<Vec<f32>>> {
    if n_classes > dim {
        return Err(ReefError::Argument("more classes than dimensions".into()));
    }
    let raw = gaussian_sample(SeededRng::new(PATTERN_SEED, dim as u64), n_classes, dim);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut v: Vec<f64> = raw.row(c).iter().map(|&x| x as f64).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let scale = (dim as f64).sqrt();
    Ok(basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| (x * scale) as f32).collect())
        .collect())
}

pub fn gen_toy_stream(spec: &ToyStreamSpec) -> Result<ToyStream> {
    spec.validate()?;
    let rng = SeededRng::new(spec.seed, 0x57_2EA4);
    let mut g = rng.derive(&[0]).generator();
    let mut order: Vec<usize> = (0..spec.span_frames()).collect();
    order.shuffle(&mut g);
    let mut planted = order[..spec.planted_count()].to_vec();
    planted.sort_unstable();

    let pattern = &class_patterns(spec.n_classes, spec.dim)?[spec.class];
    let side = exact_sqrt(spec.tokens).expect("validated");
    let (y0, x0, a) = spec.signal_anchor;
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut f = gaussian_sample(rng.derive(&[1, t as u64]), spec.tokens, spec.dim)
            .scale(spec.noise_scale);
        if planted.binary_search(&t).is_ok() {
            for y in y0..y0 + a {
                for x in x0..x0 + a {
                    for (v, &p) in f.row_mut(y * side + x).iter_mut().zip(pattern) {
                        *v += spec.signal_strength * p;
                    }
                }
            }
        }
        frames.push(f);
    }
    Ok(ToyStream {
        frames,
        labels: class_tokens(spec.class, spec.seq_len, spec.vocab),
        class: spec.class,
        planted,
    })
}

/// All streams of a run with their train/held-out split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub streams: Vec<ToyStream>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Settings of stream `i` of a run: classes cycle, the block sits in the
/// bottom-right corner with the side of the spatial filter.
pub fn stream_spec(cfg: &RunConfig, i: usize) -> ToyStreamSpec {
    let a = &cfg.adapter;
    let side = exact_sqrt(a.tokens).unwrap_or(1);
    let block = exact_sqrt(a.k_spat).unwrap_or(1).min(side);
    ToyStreamSpec {
        frames: cfg.data.frames,
        tokens: a.tokens,
        dim: a.dim,
        n_classes: cfg.data.classes,
        class: i % cfg.data.classes,
        signal_fraction: cfg.data.signal_fraction,
        signal_anchor: (side - block, side - block, block),
        noise_scale: cfg.data.noise_scale,
        signal_strength: cfg.data.signal_strength,
        signal_span: cfg.data.signal_span,
        seq_len: a.seq_len,
        vocab: a.vocab,
        seed: SeededRng::new(cfg.seed, 0xDA7A).derive(&[i as u64]).stream_id,
    }
}

/// Held-out streams are the last `holdout` share, so the split does not
/// depend on generation order.
pub fn gen_corpus(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate()?;
    let n = cfg.data.streams;
    let streams = (0..n)
        .map(|i| gen_toy_stream(&stream_spec(cfg, i)))
        .collect::<Result<Vec<_>>>()?;
    let held = cfg.data.holdout_count();
    Ok(Corpus {
        streams,
        train: (0..n - held).collect(),
        test: (n - held..n).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Temporal selection by smoothed Top-L; trains the temporal scorer.
    Initial,
    /// Relevance-aware merging with the temporal scorer frozen; trains the
    /// spatial scorer through the smoothed anchor choice.
    Main,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Main => "main",
        }
    }

    pub fn mode(self) -> PipelineMode {
        match self {
            Stage::Initial => PipelineMode {
                temporal: SelectMode::Train,
                spatial: SelectMode::Eval,
            },
            Stage::Main => PipelineMode {
                temporal: SelectMode::Train,
                spatial: SelectMode::Train,
            },
        }
    }

    pub fn adapter(self, cfg: &AdapterConfig) -> AdapterConfig {
        AdapterConfig {
            strategy: match self {
                Stage::Initial => Strategy::Tts,
                Stage::Main => Strategy::Rtc,
            },
            ..cfg.clone()
        }
    }

    pub fn trainable(self, name: &str) -> bool {
        match self {
            Stage::Initial => !name.starts_with("spatial."),
            Stage::Main => !name.starts_with("temporal."),
        }
    }
}

/// Loss of one stream and gradients of every trainable parameter.
pub fn stream_gradients(
    params: &ModelParams,
    cfg: &AdapterConfig,
    stream: &ToyStream,
    stage: Stage,
    noise: SeededRng,
) -> Result<(f32, Vec<(String, Matrix)>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, |n| stage.trainable(n));
    let adapter = stage.adapter(cfg);
    let run = run_stream_tape(
        &mut tape,
        &bound,
        params,
        &stream.frames,
        &adapter,
        &RunOptions::new(stage.mode(), noise),
    )?;
    let loss = decode_loss_tape(&mut tape, &bound, run.theta, &stream.labels, cfg.vocab)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).get(0, 0), tape.param_grads(&grads)))
}

/// `θ ← θ − lr · g` for every named gradient.
pub fn sgd_step(params: &mut ModelParams, grads: &[(String, Matrix)], lr: f32) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| ReefError::State(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(ReefError::shape(
                "sgd_step",
                format!("`{name}` is {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        p.add_scaled(g, -lr)?;
    }
    Ok(())
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: i32,
    moments: std::collections::BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamState {
    pub fn update(&mut self, params: &mut ModelParams, grads: &[(String, Matrix)], lr: f32) -> Result<()> {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| ReefError::State(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(ReefError::shape("adam", format!("`{name}` shape mismatch")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = B1 * *mi + (1.0 - B1) * gi;
                *vi = B2 * *vi + (1.0 - B2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}

fn global_norm(grads: &[(String, Matrix)]) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean gradient norm of the scorer trained in this stage.
    pub scorer_grad_norm: f64,
}

fn run_stage(
    params: &mut ModelParams,
    cfg: &RunConfig,
    corpus: &Corpus,
    stage: Stage,
    epochs: usize,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    let tc: &TrainConfig = &cfg.train;
    let root = SeededRng::new(cfg.seed, 0x7EA1);
    let stage_id = stage as u64;
    let scorer_prefix = match stage {
        Stage::Initial => "temporal.",
        Stage::Main => "spatial.",
    };
    let mut adam = AdamState::default();
    for epoch in 0..epochs {
        let mut order = corpus.train.clone();
        order.shuffle(&mut root.derive(&[stage_id, epoch as u64, 0]).generator());
        let mut loss_sum = 0f64;
        let mut scorer_norm = 0f64;
        let mut batches = 0usize;
        for batch in order.chunks(tc.batch) {
            let mut acc: Vec<(String, Matrix)> = Vec::new();
            for &i in batch {
                let noise = root.derive(&[stage_id, epoch as u64, 1, i as u64]);
                let (loss, grads) = stream_gradients(params, &cfg.adapter, &corpus.streams[i], stage, noise)?;
                if !loss.is_finite() {
                    return Err(ReefError::Training(format!(
                        "{} stage, epoch {epoch}, stream {i}: loss is {loss}",
                        stage.name()
                    )));
                }
                loss_sum += loss as f64;
                if acc.is_empty() {
                    acc = grads;
                } else {
                    for ((_, a), (_, g)) in acc.iter_mut().zip(&grads) {
                        a.add_scaled(g, 1.0)?;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for (_, g) in acc.iter_mut() {
                *g = g.scale(inv);
            }
            let norm = global_norm(&acc);
            if !norm.is_finite() {
                return Err(ReefError::Training(format!(
                    "{} stage, epoch {epoch}: non-finite gradient",
                    stage.name()
                )));
            }
            let scorer: Vec<(String, Matrix)> = acc
                .iter()
                .filter(|(n, _)| n.starts_with(scorer_prefix))
                .cloned()
                .collect();
            scorer_norm += global_norm(&scorer);
            if norm > tc.grad_clip as f64 {
                let s = (tc.grad_clip as f64 / norm) as f32;
                for (_, g) in acc.iter_mut() {
                    *g = g.scale(s);
                }
            }
            match tc.optimizer {
                Optimizer::Sgd => sgd_step(params, &acc, tc.lr)?,
                Optimizer::Adam => adam.update(params, &acc, tc.lr)?,
            }
            batches += 1;
        }
        log.push(EpochLog {
            stage,
            epoch,
            mean_loss: loss_sum / order.len().max(1) as f64,
            scorer_grad_norm: scorer_norm / batches.max(1) as f64,
        });
    }
    Ok(())
}

/// Trains the temporal scorer, blocks, queries and head under smoothed
/// temporal selection. Returns the updated parameters.
pub fn train_initial_stage(
    params: &ModelParams,
    cfg: &RunConfig,
    corpus: &Corpus,
    log: &mut Vec<EpochLog>,
) -> Result<ModelParams> {
    let mut p = params.clone();
    run_stage(&mut p, cfg, corpus, Stage::Initial, cfg.train.initial_epochs, log)?;
    Ok(p)
}

/// Trains everything except the temporal scorer under relevance-aware
/// merging.
pub fn train_main_stage(
    params: &ModelParams,
    cfg: &RunConfig,
    corpus: &Corpus,
    log: &mut Vec<EpochLog>,
) -> Result<ModelParams> {
    let before = params.scorer("temporal")?;
    let mut p = params.clone();
    run_stage(&mut p, cfg, corpus, Stage::Main, cfg.train.main_epochs, log)?;
    if p.scorer("temporal")? != before {
        return Err(ReefError::State("temporal scorer changed during the main stage".into()));
    }
    Ok(p)
}

/// Held-out metrics of one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub loss: f64,
    /// Share of planted-frame content still in the bank after the stream.
    pub recall: f64,
    /// Expected share under uniformly random single-slot drops.
    pub chance: f64,
    /// Accuracy of the first label token, the one that needs the video.
    pub first_token_accuracy: f64,
    /// Visual-bank compressions per stream.
    pub mean_compressions: f64,
}

/// Survival probability of frame `t` under `T − max(t, L)` random drops of
/// one slot out of `L + 1`.
pub fn chance_retention(t: usize, frames: usize, capacity: usize) -> f64 {
    let drops = frames.saturating_sub(t.max(capacity));
    (capacity as f64 / (capacity + 1) as f64).powi(drops as i32)
}

pub fn evaluate(
    params: &ModelParams,
    cfg: &RunConfig,
    corpus: &Corpus,
    strategy: Strategy,
) -> Result<EvalReport> {
    let adapter = AdapterConfig {
        strategy,
        ..cfg.adapter.clone()
    };
    let mut loss = 0f64;
    let mut retained = 0f64;
    let mut chance = 0f64;
    let mut planted = 0usize;
    let mut correct = 0usize;
    let mut compressions = 0usize;
    let noise = SeededRng::new(cfg.seed, 0xE7A1);
    for &i in &corpus.test {
        let s = &corpus.streams[i];
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, |_| false);
        let mut opts = RunOptions::new(PipelineMode::EVAL, noise.derive(&[i as u64]));
        opts.track_provenance = true;
        let run = run_stream_tape(&mut tape, &bound, params, &s.frames, &adapter, &opts)?;
        let logits = crate::model::decode_logits(&mut tape, &bound, run.theta, &s.labels, adapter.vocab)?;
        let l = tape.cross_entropy(logits, &s.labels)?;
        loss += tape.value(l).get(0, 0) as f64;
        let first = tape.value(logits).row(0);
        let pred = (0..first.len()).fold(0, |b, j| if first[j] > first[b] { j } else { b });
        correct += (pred == s.labels[0]) as usize;
        compressions += run.state.compressions;
        let ret = run.state.retention(s.frames.len());
        for &t in &s.planted {
            retained += ret[t];
            chance += chance_retention(t, s.frames.len(), adapter.bank_capacity);
        }
        planted += s.planted.len();
    }
    let n = corpus.test.len().max(1) as f64;
    Ok(EvalReport {
        strategy,
        loss: loss / n,
        recall: retained / planted.max(1) as f64,
        chance: chance / planted.max(1) as f64,
        first_token_accuracy: correct as f64 / n,
        mean_compressions: compressions as f64 / n,
    })
}

/// Both stages from a fresh initialisation.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
    pub recall_eval: EvalReport,
}

pub fn train_two_stage(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    let init = ModelParams::init(&cfg.adapter, cfg.seed)?;
    let initial_eval = evaluate(&init, cfg, corpus, Strategy::Rtc)?;
    let mut log = Vec::new();
    let stage1 = train_initial_stage(&init, cfg, corpus, &mut log)?;
    let params = train_main_stage(&stage1, cfg, corpus, &mut log)?;
    let final_eval = evaluate(&params, cfg, corpus, Strategy::Rtc)?;
    let recall_eval = evaluate(&params, cfg, corpus, Strategy::Tts)?;
    Ok(TrainOutcome {
        params,
        log,
        initial_eval,
        final_eval,
        recall_eval,
    })
}

/// Picks `count` distinct indices below `n` in ascending order.
pub fn sample_indices(rng: SeededRng, n: usize, count: usize) -> Vec<usize> {
    let mut g = rng.generator();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = g.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut out = idx[..count.min(n)].to_vec();
    out.sort_unstable();
    out
}
