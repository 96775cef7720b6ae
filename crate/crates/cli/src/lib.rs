//! Commands behind the `reef` binary: corpus generation, training,
//! strategy comparison, gradient checks and FLOP reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use reef_core::autodiff::Tape;
use reef_core::flops::{
    attention_product_macs, compare_configs, count_adapter_flops, full_scale_config, FULL_SCALE_FRAMES,
};
use reef_core::gradcheck::{check_pipeline, check_topk, PipelineCheck, TopkCheck};
use reef_core::io::{
    read_checkpoint, read_csv, read_features, write_atomic, write_checkpoint, write_csv,
    write_features, Checkpoint, EpochRow, LabelRow, MetricsRow,
};
use reef_core::model::{run_stream_tape, BoundParams, RunOptions};
use reef_core::train::{
    evaluate, gen_corpus, stream_spec, train_initial_stage, train_main_stage, EvalReport,
};
use reef_core::{
    AdapterConfig, Corpus, FlopsReport, GradCheckReport, ModelParams, PipelineMode, ReefError,
    Result, RunConfig, SeededRng, Stage, Strategy, ToyStream,
};

pub const LABELS_FILE: &str = "labels.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const INITIAL_CHECKPOINT_FILE: &str = "initial.ckpt";
pub const REPORT_FILE: &str = "report.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const FLOPS_FILE: &str = "flops.toml";

/// Process exit status of an error: 2 configuration, 3 numeric, 4 I/O.
pub fn exit_code(err: &ReefError) -> i32 {
    match err {
        ReefError::Config { .. } | ReefError::Argument(_) => 2,
        ReefError::Shape { .. } | ReefError::State(_) | ReefError::Numeric(_) | ReefError::Training(_) => 3,
        ReefError::Io(_) | ReefError::Format(_) => 4,
    }
}

/// Run-configuration flags; each overrides the same key of `--config`.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; the desk-scale defaults apply without it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "REEF_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub bank_capacity: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub k_spat: Option<usize>,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f32>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        let a = &mut cfg.adapter;
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { a.$field = v; })*
            };
        }
        apply!(alpha, bank_capacity, queries, k_spat, gamma, sigma, n_samples, heads, blocks, vocab, seq_len, strategy);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn stream_file(i: usize) -> String {
    format!("stream_{i:04}.reef")
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn split(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| ReefError::Format(format!("bad index `{t}` in {LABELS_FILE}"))))
        .collect()
}

/// Writes a synthetic corpus: one feature file per stream, the label
/// table and the generating configuration.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let corpus = gen_corpus(cfg)?;
    ensure_dir(out)?;
    let mut rows = Vec::with_capacity(corpus.streams.len());
    for (i, s) in corpus.streams.iter().enumerate() {
        write_features(&out.join(stream_file(i)), &s.frames)?;
        rows.push(LabelRow {
            file: stream_file(i),
            class: s.class,
            split: if corpus.test.contains(&i) { "test" } else { "train" }.into(),
            tokens: join(&s.labels),
            planted: join(&s.planted),
        });
    }
    write_csv(&out.join(LABELS_FILE), &rows)?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    Ok(corpus)
}

/// Reads a corpus written by [`cmd_gen`], in label-table order.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let rows: Vec<LabelRow> = read_csv(&dir.join(LABELS_FILE))?;
    let mut corpus = Corpus {
        streams: Vec::with_capacity(rows.len()),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (i, r) in rows.iter().enumerate() {
        corpus.streams.push(ToyStream {
            frames: read_features(&dir.join(&r.file))?,
            labels: split(&r.tokens)?,
            class: r.class,
            planted: split(&r.planted)?,
        });
        match r.split.as_str() {
            "train" => corpus.train.push(i),
            "test" => corpus.test.push(i),
            other => return Err(ReefError::Format(format!("unknown split `{other}`"))),
        }
    }
    Ok(corpus)
}

fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    let a = &cfg.adapter;
    for (i, s) in corpus.streams.iter().enumerate() {
        if let Some(f) = s.frames.iter().find(|f| f.shape() != (a.tokens, a.dim)) {
            return Err(ReefError::Config {
                field: "tokens".into(),
                reason: format!("stream {i} has {:?} frames, config expects {}x{}", f.shape(), a.tokens, a.dim),
            });
        }
        if let Some(&t) = s.labels.iter().find(|&&t| t >= a.vocab) {
            return Err(ReefError::Config {
                field: "vocab".into(),
                reason: format!("stream {i} uses token {t}"),
            });
        }
    }
    if corpus.train.is_empty() || corpus.test.is_empty() {
        return Err(ReefError::Config {
            field: "holdout".into(),
            reason: "corpus needs both training and held-out streams".into(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsSection {
    pub frames: usize,
    pub total: u64,
    pub per_component: BTreeMap<String, u64>,
}

impl From<&FlopsReport> for FlopsSection {
    fn from(r: &FlopsReport) -> Self {
        Self {
            frames: r.frames,
            total: r.total,
            per_component: r.per_component.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSection {
    pub strategy: String,
    pub loss: f64,
    pub recall: f64,
    pub chance: f64,
    pub first_token_accuracy: f64,
    pub mean_compressions: f64,
}

impl From<&EvalReport> for EvalSection {
    fn from(r: &EvalReport) -> Self {
        Self {
            strategy: r.strategy.name().into(),
            loss: r.loss,
            recall: r.recall,
            chance: r.chance,
            first_token_accuracy: r.first_token_accuracy,
            mean_compressions: r.mean_compressions,
        }
    }
}

/// Structured summary of a training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub train_streams: usize,
    pub test_streams: usize,
    pub uniform_loss: f64,
    pub temporal_frozen: bool,
    /// Held-out metrics before training, under relevance-aware merging.
    pub initial: EvalSection,
    /// Final model under relevance-aware merging.
    pub final_eval: EvalSection,
    /// Final model with temporal Top-L selection, for planted-frame recall.
    pub selection: EvalSection,
    pub flops: FlopsSection,
}

fn epoch_rows(log: &[reef_core::train::EpochLog]) -> Vec<EpochRow> {
    log.iter()
        .map(|e| EpochRow {
            stage: e.stage.name().into(),
            epoch: e.epoch,
            mean_loss: e.mean_loss,
            scorer_grad_norm: e.scorer_grad_norm,
        })
        .collect()
}

fn metrics_row(cfg: &AdapterConfig, frames: usize, r: &EvalReport) -> Result<MetricsRow> {
    let with = AdapterConfig {
        strategy: r.strategy,
        ..cfg.clone()
    };
    let without = AdapterConfig {
        k_spat: cfg.tokens,
        ..with.clone()
    };
    Ok(MetricsRow {
        strategy: r.strategy.name().into(),
        loss: r.loss,
        recall: r.recall,
        chance: r.chance,
        first_token_accuracy: r.first_token_accuracy,
        flops: count_adapter_flops(&with, frames)?.total,
        flops_no_stf: count_adapter_flops(&without, frames)?.total,
    })
}

fn checkpoint(params: ModelParams, cfg: &RunConfig, stage: Stage) -> Checkpoint {
    Checkpoint {
        params,
        meta: vec![
            ("seed".into(), cfg.seed),
            ("stage".into(), stage as u64),
            ("initial_epochs".into(), cfg.train.initial_epochs as u64),
            ("main_epochs".into(), cfg.train.main_epochs as u64),
        ],
    }
}

/// Both training stages on a stored corpus. Writes the stage checkpoints,
/// the per-epoch log, the metric table and the structured report.
pub fn cmd_train(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<TrainReport> {
    let corpus = load_corpus(corpus_dir)?;
    check_corpus(cfg, &corpus)?;
    ensure_dir(out)?;
    let frames = corpus.streams[0].frames.len();
    let init = ModelParams::init(&cfg.adapter, cfg.seed)?;
    let initial = evaluate(&init, cfg, &corpus, Strategy::Rtc)?;
    let mut log = Vec::new();
    let stage1 = train_initial_stage(&init, cfg, &corpus, &mut log)?;
    write_checkpoint(&out.join(INITIAL_CHECKPOINT_FILE), &checkpoint(stage1.clone(), cfg, Stage::Initial))?;
    let params = train_main_stage(&stage1, cfg, &corpus, &mut log)?;
    let temporal_frozen = params.scorer("temporal")? == stage1.scorer("temporal")?;
    let final_eval = evaluate(&params, cfg, &corpus, cfg.adapter.strategy)?;
    let selection = evaluate(&params, cfg, &corpus, Strategy::Tts)?;
    write_checkpoint(&out.join(CHECKPOINT_FILE), &checkpoint(params, cfg, Stage::Main))?;
    write_csv(&out.join(EPOCHS_FILE), &epoch_rows(&log))?;
    write_csv(
        &out.join(METRICS_FILE),
        &[
            metrics_row(&cfg.adapter, frames, &final_eval)?,
            metrics_row(&cfg.adapter, frames, &selection)?,
        ],
    )?;
    let report = TrainReport {
        seed: cfg.seed,
        train_streams: corpus.train.len(),
        test_streams: corpus.test.len(),
        uniform_loss: (cfg.adapter.vocab as f64).ln(),
        temporal_frozen,
        initial: (&initial).into(),
        final_eval: (&final_eval).into(),
        selection: (&selection).into(),
        flops: (&count_adapter_flops(&cfg.adapter, frames)?).into(),
    };
    write_toml(&out.join(REPORT_FILE), &report)?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    Ok(report)
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| ReefError::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Where the compared model comes from.
#[derive(Clone, Debug)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    /// Train both stages on the corpus first.
    Fresh,
}

/// Held-out metrics of one model under every requested strategy, one CSV
/// row each in the given order.
pub fn cmd_compare(
    cfg: &RunConfig,
    corpus_dir: &Path,
    source: &ModelSource,
    strategies: &[Strategy],
    out: &Path,
) -> Result<Vec<MetricsRow>> {
    let mut seen = Vec::new();
    for s in strategies {
        if seen.contains(s) {
            return Err(ReefError::Argument(format!("strategy `{s}` listed twice")));
        }
        seen.push(*s);
    }
    let corpus = load_corpus(corpus_dir)?;
    check_corpus(cfg, &corpus)?;
    ensure_dir(out)?;
    let params = match source {
        ModelSource::Checkpoint(p) => {
            let ck = read_checkpoint(p)?;
            ck.params.check_against(&cfg.adapter)?;
            ck.params
        }
        ModelSource::Fresh => {
            let init = ModelParams::init(&cfg.adapter, cfg.seed)?;
            let mut log = Vec::new();
            let stage1 = train_initial_stage(&init, cfg, &corpus, &mut log)?;
            train_main_stage(&stage1, cfg, &corpus, &mut log)?
        }
    };
    let frames = corpus.streams[0].frames.len();
    let rows = strategies
        .iter()
        .map(|&s| metrics_row(&cfg.adapter, frames, &evaluate(&params, cfg, &corpus, s)?))
        .collect::<Result<Vec<_>>>()?;
    write_csv(&out.join(COMPARE_FILE), &rows)?;
    Ok(rows)
}

/// Result of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct GradCheckRow {
    pub check: String,
    pub group: String,
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Perturbed Top-K, both pipeline stages, and a zero-step update. `quick`
/// shrinks the sample counts for smoke runs; tolerances are unchanged.
pub fn cmd_gradcheck(quick: bool, out: &Path) -> Result<Vec<NamedCheck>> {
    ensure_dir(out)?;
    let mut topk = TopkCheck::default();
    let mut checks = Vec::new();
    if quick {
        topk.instances = 3;
    }
    checks.push(NamedCheck {
        name: "topk".into(),
        report: check_topk(&topk)?,
    });
    for stage in [Stage::Initial, Stage::Main] {
        let mut opts = PipelineCheck::new(stage);
        if quick {
            opts.n_samples = 20_000;
        }
        checks.push(NamedCheck {
            name: format!("pipeline_{}", stage.name()),
            report: check_pipeline(&opts)?,
        });
    }
    checks.push(NamedCheck {
        name: "zero_lr".into(),
        report: zero_lr_check()?,
    });
    let rows: Vec<GradCheckRow> = checks
        .iter()
        .flat_map(|c| {
            c.report.per_parameter_errors.iter().map(|(group, e)| GradCheckRow {
                check: c.name.clone(),
                group: group.clone(),
                relative_error: *e,
                tolerance: c.report.tolerance,
                passed: *e <= c.report.tolerance,
            })
        })
        .collect();
    write_csv(&out.join(GRADCHECK_FILE), &rows)?;
    Ok(checks)
}

/// A zero learning rate must leave every parameter bitwise unchanged.
fn zero_lr_check() -> Result<GradCheckReport> {
    let cfg = RunConfig::desk();
    let params = ModelParams::init(&cfg.adapter, cfg.seed)?;
    let grads: Vec<_> = params
        .iter()
        .map(|(n, m)| (n.clone(), m.map(|v| v + 1.0)))
        .collect();
    let mut stepped = params.clone();
    reef_core::train::sgd_step(&mut stepped, &grads, 0.0)?;
    let errors = params
        .iter()
        .map(|(n, m)| {
            let same = stepped.get(n).map(|s| s == m).unwrap_or(false);
            (n.clone(), if same { 0.0 } else { 1.0 })
        })
        .collect();
    Ok(GradCheckReport::from_errors(errors, 0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstrumentSection {
    pub analytic_cross_macs: u64,
    pub measured_cross_macs: u64,
    pub analytic_self_macs: u64,
    pub measured_self_macs: u64,
    pub max_relative_gap: f64,
}

/// FLOP report of a configuration against its baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsSummary {
    pub config: FlopsSection,
    /// Same adapter with merging by similarity only and no spatial filter.
    pub baseline: FlopsSection,
    pub delta_percent: f64,
    /// Infinite where the baseline has no such component.
    pub component_delta_percent: BTreeMap<String, f64>,
    pub instrumented: Option<InstrumentSection>,
}

pub fn mbc_baseline(cfg: &AdapterConfig) -> AdapterConfig {
    AdapterConfig {
        strategy: Strategy::Mbc,
        k_spat: cfg.tokens,
        ..cfg.clone()
    }
}

/// Attention multiply-adds counted during a real evaluation pass.
pub fn instrument(cfg: &RunConfig, frames: usize) -> Result<InstrumentSection> {
    let mut spec = stream_spec(cfg, 0);
    spec.frames = frames;
    let stream = reef_core::train::gen_toy_stream(&spec)?;
    let params = ModelParams::init(&cfg.adapter, cfg.seed)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, |_| false);
    let opts = RunOptions::new(PipelineMode::EVAL, SeededRng::new(cfg.seed, 0xF10));
    let run = run_stream_tape(&mut tape, &bound, &params, &stream.frames, &cfg.adapter, &opts)?;
    let analytic = attention_product_macs(&cfg.adapter, frames);
    let measured = run.state.counter;
    let gap = |a: u64, m: u64| (a as f64 - m as f64).abs() / (a.max(m).max(1)) as f64;
    Ok(InstrumentSection {
        analytic_cross_macs: analytic.cross_macs,
        measured_cross_macs: measured.cross_macs,
        analytic_self_macs: analytic.self_macs,
        measured_self_macs: measured.self_macs,
        max_relative_gap: gap(analytic.cross_macs, measured.cross_macs)
            .max(gap(analytic.self_macs, measured.self_macs)),
    })
}

/// Analytic counts for the configuration (or the full-scale adapter)
/// against the similarity-merging baseline without a spatial filter.
pub fn cmd_flops(
    cfg: &RunConfig,
    frames: usize,
    full_scale: bool,
    instrumented: bool,
    out: &Path,
) -> Result<FlopsSummary> {
    let (adapter, frames) = if full_scale {
        (full_scale_config(Strategy::Rtc, 100), FULL_SCALE_FRAMES)
    } else {
        (cfg.adapter.clone(), frames)
    };
    let ours = count_adapter_flops(&adapter, frames)?;
    let base = count_adapter_flops(&mbc_baseline(&adapter), frames)?;
    let delta = compare_configs(&base, &ours);
    let instrumented = if instrumented {
        let small = if full_scale {
            // The full-scale shape is too large to run; instrument the run config.
            cfg.clone()
        } else {
            RunConfig {
                adapter: adapter.clone(),
                ..cfg.clone()
            }
        };
        Some(instrument(&small, frames.min(cfg.data.frames))?)
    } else {
        None
    };
    let summary = FlopsSummary {
        config: (&ours).into(),
        baseline: (&base).into(),
        delta_percent: delta.total,
        component_delta_percent: delta.per_component,
        instrumented,
    };
    ensure_dir(out)?;
    write_toml(&out.join(FLOPS_FILE), &summary)?;
    Ok(summary)
}
