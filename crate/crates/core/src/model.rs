//! Streaming Q-Former adapter: positional fusion, memory banks, spatial
//! filtering and the attention blocks, recorded on a [`Tape`].

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::autodiff::{ScorerVars, Tape, Var};
use crate::bank::{
    mbc_trace, query_plan, rtc_trace, CompressionPlan, MemoryBank, QueryPolicy, Strategy,
};
use crate::config::AdapterConfig;
use crate::error::{ReefError, Result};
use crate::scorer::{scorer_raw, ScorerParams};
use crate::spatial::{anchor_scores, build_anchor_grid, AnchorGrid};
use crate::tensor::{avg_pool_spatial, gaussian_sample, minmax_norm, Matrix, SeededRng};
use crate::topk::{hard_topk, topk_indices, PerturbConfig, SelectMode};

/// Sinusoidal embedding of frame index `t`: `sin` on even, `cos` on odd
/// coordinates.
pub fn positional_embedding(t: usize, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|c| {
            let freq = 10_000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * freq;
            (if c % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
        })
        .collect()
}

/// `p_t = e_t + PE(t)`, the embedding broadcast over all tokens.
pub fn positional_fuse(frame: &Matrix, t: usize) -> Result<Matrix> {
    let pe = Matrix::row_vector(&positional_embedding(t, frame.cols()));
    frame.add_row(&pe)
}

/// Named parameter matrices in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, Matrix>,
}

fn fnv(name: &str) -> u64 {
    name.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl ModelParams {
    pub fn init(cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let root = SeededRng::new(seed, 0x5EED);
        let mut p = ModelParams::default();
        for prefix in ["temporal", "spatial"] {
            let s = ScorerParams::init(root.derive(&[fnv(prefix)]), d)?;
            p.set_scorer(prefix, s);
        }
        let mut gauss = |name: &str, rows: usize, cols: usize, scale: f32| {
            let m = gaussian_sample(root.derive(&[fnv(name)]), rows, cols).scale(scale);
            p.entries.insert(name.to_string(), m);
        };
        let inv = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
        gauss("queries", cfg.queries, d, 1.0);
        for b in 0..cfg.blocks {
            for kind in ["self", "cross"] {
                for w in ["w_q", "w_k", "w_v", "w_o"] {
                    gauss(&format!("block{b}.{kind}.{w}"), d, d, inv(d));
                }
            }
            gauss(&format!("block{b}.ffn.w1"), d, 4 * d, inv(d));
            gauss(&format!("block{b}.ffn.w2"), 4 * d, d, inv(4 * d));
        }
        gauss("head.embed", cfg.vocab + 1, d, 1.0);
        gauss("head.w", 2 * d, cfg.vocab, inv(2 * d));
        for b in 0..cfg.blocks {
            p.entries.insert(format!("block{b}.ffn.b1"), Matrix::zeros(1, 4 * d));
            p.entries.insert(format!("block{b}.ffn.b2"), Matrix::zeros(1, d));
        }
        p.entries.insert("head.b".into(), Matrix::zeros(1, cfg.vocab));
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| ReefError::State(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scorer(&self, prefix: &str) -> Result<ScorerParams> {
        Ok(ScorerParams {
            w1: self.get(&format!("{prefix}.w1"))?.clone(),
            b1: self.get(&format!("{prefix}.b1"))?.clone(),
            w2: self.get(&format!("{prefix}.w2"))?.clone(),
            b2: self.get(&format!("{prefix}.b2"))?.clone(),
        })
    }

    pub fn set_scorer(&mut self, prefix: &str, s: ScorerParams) {
        self.entries.insert(format!("{prefix}.w1"), s.w1);
        self.entries.insert(format!("{prefix}.b1"), s.b1);
        self.entries.insert(format!("{prefix}.w2"), s.w2);
        self.entries.insert(format!("{prefix}.b2"), s.b2);
    }

    /// Checks every parameter against the shapes `cfg` implies.
    pub fn check_against(&self, cfg: &AdapterConfig) -> Result<()> {
        let expected = ModelParams::init(cfg, 0)?;
        for (name, m) in &expected.entries {
            let have = self.get(name)?;
            if have.shape() != m.shape() {
                return Err(ReefError::shape(
                    "checkpoint",
                    format!("`{name}` is {:?}, config implies {:?}", have.shape(), m.shape()),
                ));
            }
        }
        if self.entries.len() != expected.entries.len() {
            return Err(ReefError::State("checkpoint has unexpected parameters".into()));
        }
        Ok(())
    }
}

/// Parameters placed on a tape, trainable or constant.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, m)| {
                let v = if trainable(name) {
                    tape.param(name.clone(), m.clone())
                } else {
                    tape.constant(m.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ReefError::State(format!("parameter `{name}` is not bound")))
    }

    pub fn scorer(&self, prefix: &str) -> Result<ScorerVars> {
        Ok(ScorerVars {
            w1: self.var(&format!("{prefix}.w1"))?,
            b1: self.var(&format!("{prefix}.b1"))?,
            w2: self.var(&format!("{prefix}.w2"))?,
            b2: self.var(&format!("{prefix}.b2"))?,
        })
    }
}

/// Projection matrices of one attention sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn scale_dim(&self) -> usize {
        self.w_q.cols() / self.heads
    }
}

/// Multiply-adds actually executed inside attention products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionCounter {
    pub cross_macs: u64,
    pub self_macs: u64,
}

/// Multi-head `Softmax(QKᵀ/√C) V W_O` with already projected keys/values.
fn attend(
    tape: &mut Tape,
    q: Var,
    keys: Var,
    values: Var,
    w_o: Var,
    heads: usize,
    macs: &mut u64,
) -> Result<Var> {
    let (lq, d) = tape.value(q).shape();
    let m = tape.value(keys).rows();
    if m == 0 {
        return Err(ReefError::State("attention over an empty bank".into()));
    }
    let c = d / heads;
    let scale = 1.0 / (c as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * c, c)?;
        let kh = tape.slice_cols(keys, h * c, c)?;
        let vh = tape.slice_cols(values, h * c, c)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale)?;
        let a = tape.softmax_rows(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    *macs += 2 * (lq * m * d) as u64;
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(o, w_o)
}

fn attention_value(queries: &Matrix, tokens: &Matrix, w: &AttentionWeights) -> Result<Matrix> {
    if tokens.rows() == 0 {
        return Err(ReefError::State("attention over an empty bank".into()));
    }
    if w.heads == 0 || w.w_q.cols() % w.heads != 0 {
        return Err(ReefError::Argument("heads must divide the model width".into()));
    }
    let mut t = Tape::new();
    let x = t.constant(queries.clone());
    let p = t.constant(tokens.clone());
    let [wq, wk, wv, wo] = [&w.w_q, &w.w_k, &w.w_v, &w.w_o].map(|m| t.constant(m.clone()));
    let q = t.matmul(x, wq)?;
    let k = t.matmul(p, wk)?;
    let v = t.matmul(p, wv)?;
    let out = attend(&mut t, q, k, v, wo, w.heads, &mut 0)?;
    Ok(t.value(out).clone())
}

/// Queries attend over bank tokens, which serve as both keys and values.
pub fn cross_attention(queries: &Matrix, bank_tokens: &Matrix, w: &AttentionWeights) -> Result<Matrix> {
    attention_value(queries, bank_tokens, w)
}

/// Queries attend over the flattened query bank.
pub fn self_attention_with_qmb(queries: &Matrix, qbank: &Matrix, w: &AttentionWeights) -> Result<Matrix> {
    attention_value(queries, qbank, w)
}

/// How selections behave: the temporal selector (TTS) and the spatial
/// anchor selector are each hard or smoothed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineMode {
    pub temporal: SelectMode,
    pub spatial: SelectMode,
}

impl PipelineMode {
    pub const EVAL: PipelineMode = PipelineMode {
        temporal: SelectMode::Eval,
        spatial: SelectMode::Eval,
    };
}

/// A discrete choice made while streaming.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Plan(CompressionPlan),
    Anchor(usize),
}

/// Discrete choices in the order they were made. A replayed log forces the
/// same choices, which keeps finite-difference probes on one smooth piece.
#[derive(Clone, Debug, Default)]
pub struct DecisionLog {
    items: Vec<Decision>,
    cursor: usize,
    replay: bool,
}

impl DecisionLog {
    pub fn replay(items: Vec<Decision>) -> Self {
        Self {
            items,
            cursor: 0,
            replay: true,
        }
    }

    pub fn items(&self) -> &[Decision] {
        &self.items
    }

    fn next(&mut self) -> Result<Option<Decision>> {
        if !self.replay {
            return Ok(None);
        }
        let d = self
            .items
            .get(self.cursor)
            .cloned()
            .ok_or_else(|| ReefError::State("decision log exhausted".into()))?;
        self.cursor += 1;
        Ok(Some(d))
    }

    fn record(&mut self, d: Decision) {
        if !self.replay {
            self.items.push(d);
        }
    }

    /// The replayed plan, or `None` when choices are being recorded.
    fn take_plan(&mut self) -> Result<Option<CompressionPlan>> {
        match self.next()? {
            Some(Decision::Plan(p)) => Ok(Some(p)),
            Some(other) => Err(ReefError::State(format!("replay expected a plan, found {other:?}"))),
            None => Ok(None),
        }
    }

    fn take_anchor(&mut self) -> Result<Option<usize>> {
        match self.next()? {
            Some(Decision::Anchor(h)) => Ok(Some(h)),
            Some(other) => Err(ReefError::State(format!("replay expected an anchor, found {other:?}"))),
            None => Ok(None),
        }
    }
}

const PURPOSE_TTS: u64 = 1;
const PURPOSE_STF: u64 = 2;

struct SlotCache {
    spatial_raw: Option<Vec<f32>>,
    view: Option<Var>,
    kv: Vec<(Var, Var)>,
}

/// Mutable per-stream state: both banks and per-slot caches.
pub struct StreamState {
    cfg: AdapterConfig,
    mode: PipelineMode,
    noise: SeededRng,
    grid: Option<Rc<AnchorGrid>>,
    anchors: Rc<Vec<Vec<usize>>>,
    pool: Option<Var>,
    vbank: MemoryBank<Var>,
    qbanks: Vec<MemoryBank<Var>>,
    slot_cache: HashMap<Var, SlotCache>,
    query_kv: HashMap<Var, (Var, Var)>,
    step: usize,
    pub decisions: DecisionLog,
    pub counter: AttentionCounter,
    pub compressions: usize,
}

impl StreamState {
    /// `horizon` bounds the stream length for provenance tracking.
    pub fn new(
        tape: &mut Tape,
        cfg: &AdapterConfig,
        mode: PipelineMode,
        noise: SeededRng,
        horizon: Option<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        let grid = if cfg.stf_enabled() {
            Some(Rc::new(build_anchor_grid(cfg.tokens, cfg.k_spat, cfg.gamma)?))
        } else {
            None
        };
        let anchors = Rc::new(grid.as_ref().map(|g| g.anchors.clone()).unwrap_or_default());
        let pool = match (&grid, mode.spatial) {
            (Some(g), SelectMode::Train) => Some(tape.constant(g.pooling_matrix())),
            _ => None,
        };
        let mut vbank = MemoryBank::new(cfg.bank_capacity)?.with_global_k(cfg.global_k);
        if let Some(h) = horizon {
            vbank = vbank.with_provenance(h);
        }
        let qbanks = (0..cfg.blocks)
            .map(|_| Ok(MemoryBank::new(cfg.bank_capacity)?.with_global_k(cfg.global_k)))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            noise,
            grid,
            anchors,
            pool,
            vbank,
            qbanks,
            slot_cache: HashMap::new(),
            query_kv: HashMap::new(),
            step: 0,
            decisions: DecisionLog::default(),
            counter: AttentionCounter::default(),
            compressions: 0,
        })
    }

    pub fn visual_bank(&self) -> &MemoryBank<Var> {
        &self.vbank
    }

    pub fn query_banks(&self) -> &[MemoryBank<Var>] {
        &self.qbanks
    }

    fn perturb(&self, slot: usize, purpose: u64) -> Result<PerturbConfig> {
        let rng = self.noise.derive(&[self.step as u64, slot as u64, purpose]);
        PerturbConfig::new(self.cfg.sigma, self.cfg.n_samples, rng)
    }

    fn spatial_raw(&mut self, tape: &Tape, params: &ModelParams, slot: Var) -> Result<Vec<f32>> {
        let cache = self.slot_cache.entry(slot).or_insert_with(|| SlotCache {
            spatial_raw: None,
            view: None,
            kv: Vec::new(),
        });
        if let Some(r) = &cache.spatial_raw {
            return Ok(r.clone());
        }
        let (raw, _) = scorer_raw(tape.value(slot), &params.scorer("spatial")?)?;
        cache.spatial_raw = Some(raw.clone());
        Ok(raw)
    }

    /// One streaming step: fuse, store, compress, filter and run the blocks.
    pub fn step(
        &mut self,
        tape: &mut Tape,
        bound: &BoundParams,
        params: &ModelParams,
        frame: &Matrix,
    ) -> Result<Var> {
        let cfg = self.cfg.clone();
        if frame.shape() != (cfg.tokens, cfg.dim) {
            return Err(ReefError::shape(
                "qformer_step",
                format!("frame {:?}, config expects {:?}", frame.shape(), (cfg.tokens, cfg.dim)),
            ));
        }
        let p = tape.constant(positional_fuse(frame, self.step)?);
        self.vbank.append(p, (cfg.tokens, cfg.dim))?;

        let directive = self.compress_visual(tape, bound, params)?;
        let live: Vec<Var> = self.vbank.slots().to_vec();
        self.slot_cache.retain(|v, _| live.contains(v));

        let mut views = Vec::with_capacity(live.len());
        for (j, &slot) in live.iter().enumerate() {
            views.push(self.view(tape, bound, params, slot, j)?);
        }

        let mut x = bound.var("queries")?;
        for b in 0..cfg.blocks {
            let pre = format!("block{b}");
            // Self-attention over this layer's query bank.
            let h = tape.layer_norm(x)?;
            self.qbanks[b].append(h, (cfg.queries, cfg.dim))?;
            self.compress_queries(tape, b, &directive)?;
            let wq = bound.var(&format!("{pre}.self.w_q"))?;
            let wk = bound.var(&format!("{pre}.self.w_k"))?;
            let wv = bound.var(&format!("{pre}.self.w_v"))?;
            let wo = bound.var(&format!("{pre}.self.w_o"))?;
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            for &s in self.qbanks[b].slots() {
                let (k, v) = match self.query_kv.get(&s) {
                    Some(&kv) => kv,
                    None => {
                        let kv = (tape.matmul(s, wk)?, tape.matmul(s, wv)?);
                        self.query_kv.insert(s, kv);
                        kv
                    }
                };
                ks.push(k);
                vs.push(v);
            }
            let keys = tape.concat_rows(&ks)?;
            let values = tape.concat_rows(&vs)?;
            let q = tape.matmul(h, wq)?;
            let a = attend(tape, q, keys, values, wo, cfg.heads, &mut self.counter.self_macs)?;
            x = tape.add(x, a)?;

            // Cross-attention over the filtered visual bank.
            let h = tape.layer_norm(x)?;
            let wq = bound.var(&format!("{pre}.cross.w_q"))?;
            let wk = bound.var(&format!("{pre}.cross.w_k"))?;
            let wv = bound.var(&format!("{pre}.cross.w_v"))?;
            let wo = bound.var(&format!("{pre}.cross.w_o"))?;
            let mut ks = Vec::with_capacity(live.len());
            let mut vs = Vec::with_capacity(live.len());
            for (&slot, &view) in live.iter().zip(&views) {
                let cache = self.slot_cache.get_mut(&slot).expect("view cached");
                if cache.kv.len() <= b {
                    cache.kv.push((tape.matmul(view, wk)?, tape.matmul(view, wv)?));
                }
                ks.push(cache.kv[b].0);
                vs.push(cache.kv[b].1);
            }
            let keys = tape.concat_rows(&ks)?;
            let values = tape.concat_rows(&vs)?;
            let q = tape.matmul(h, wq)?;
            let a = attend(tape, q, keys, values, wo, cfg.heads, &mut self.counter.cross_macs)?;
            x = tape.add(x, a)?;

            // Feed-forward.
            let h = tape.layer_norm(x)?;
            let f = tape.matmul(h, bound.var(&format!("{pre}.ffn.w1"))?)?;
            let f = tape.add_row(f, bound.var(&format!("{pre}.ffn.b1"))?)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, bound.var(&format!("{pre}.ffn.w2"))?)?;
            let f = tape.add_row(f, bound.var(&format!("{pre}.ffn.b2"))?)?;
            x = tape.add(x, f)?;
        }
        let live_q: Vec<Var> = self.qbanks.iter().flat_map(|q| q.slots().iter().copied()).collect();
        self.query_kv.retain(|v, _| live_q.contains(v));
        self.step += 1;
        Ok(x)
    }

    fn compress_visual(
        &mut self,
        tape: &mut Tape,
        bound: &BoundParams,
        params: &ModelParams,
    ) -> Result<Directive> {
        let cfg = self.cfg.clone();
        let needed = match cfg.strategy {
            Strategy::AvgPool => self.vbank.len() > 1,
            _ => self.vbank.over_capacity(),
        };
        if !needed {
            return Ok(Directive::None);
        }
        self.compressions += 1;
        let slots: Vec<Var> = self.vbank.slots().to_vec();
        let (plan, directive, y) = match cfg.strategy {
            Strategy::Fifo => (self.vbank.drop_oldest_plan(), Directive::Fifo, None),
            Strategy::AvgPool => (self.vbank.running_plan(), Directive::Average, None),
            Strategy::Mbc => {
                let plan = match self.decisions.take_plan()? {
                    Some(p) => p,
                    None => {
                        let values: Vec<&Matrix> = slots.iter().map(|&s| tape.value(s)).collect();
                        let p = mbc_trace(&values, cfg.global_k)?.plan();
                        self.decisions.record(Decision::Plan(p.clone()));
                        p
                    }
                };
                (plan, Directive::Mbc, None)
            }
            Strategy::Rtc => {
                let values: Vec<Matrix> = slots.iter().map(|&s| tape.value(s).clone()).collect();
                let pooled = avg_pool_spatial(&values)?;
                let (raw, _) = scorer_raw(&pooled, &params.scorer("temporal")?)?;
                let r_temp = minmax_norm(&raw);
                let plan = match self.decisions.take_plan()? {
                    Some(p) => p,
                    None => {
                        let r_spat = if cfg.stf_enabled() {
                            let mut m = Matrix::zeros(slots.len(), cfg.tokens);
                            for (j, &s) in slots.iter().enumerate() {
                                let raw = self.spatial_raw(tape, params, s)?;
                                m.row_mut(j).copy_from_slice(&minmax_norm(&raw));
                            }
                            Some(m)
                        } else {
                            None
                        };
                        let refs: Vec<&Matrix> = values.iter().collect();
                        let trace =
                            rtc_trace(&refs, &r_temp, r_spat.as_ref(), cfg.alpha, cfg.global_k)?;
                        self.decisions.record(Decision::Plan(trace.plan()));
                        trace.plan()
                    }
                };
                (plan, Directive::Rtc(r_temp), None)
            }
            Strategy::Tts => {
                let keep = cfg.bank_capacity;
                match self.mode.temporal {
                    SelectMode::Eval => {
                        let plan = match self.decisions.take_plan()? {
                            Some(p) => p,
                            None => {
                                let values: Vec<Matrix> =
                                    slots.iter().map(|&s| tape.value(s).clone()).collect();
                                let pooled = avg_pool_spatial(&values)?;
                                let (raw, _) = scorer_raw(&pooled, &params.scorer("temporal")?)?;
                                let kept = topk_indices(&raw, keep)?;
                                let index =
                                    (0..=keep).find(|g| !kept.contains(g)).expect("one dropped");
                                let p = CompressionPlan::Drop { index };
                                self.decisions.record(Decision::Plan(p.clone()));
                                p
                            }
                        };
                        (plan.clone(), Directive::Follow(Rc::new(plan), None), None)
                    }
                    SelectMode::Train => {
                        let mut rows = Vec::with_capacity(slots.len());
                        for &s in &slots {
                            rows.push(tape.mean_rows(s)?);
                        }
                        let pooled = tape.concat_rows(&rows)?;
                        let raw = tape.scorer(pooled, bound.scorer("temporal")?)?;
                        let pcfg = self.perturb(0, PURPOSE_TTS)?;
                        let y = tape.perturbed_topk(raw, keep, &pcfg)?;
                        let plan = CompressionPlan::Mix {
                            weights: tape.value(y).clone(),
                        };
                        (plan.clone(), Directive::Follow(Rc::new(plan), Some(y)), Some(y))
                    }
                }
            }
        };
        let plan_rc = Rc::new(plan);
        self.vbank.apply(&plan_rc, |p, inputs, j| match (p, y) {
            (CompressionPlan::Mix { .. }, Some(y)) => tape.mix_slots(y, inputs, j),
            _ => tape.compress_slot(inputs, plan_rc.clone(), j),
        })?;
        Ok(directive)
    }

    fn compress_queries(&mut self, tape: &mut Tape, b: usize, directive: &Directive) -> Result<()> {
        let bank = &self.qbanks[b];
        let values: Vec<&Matrix> = bank.slots().iter().map(|&s| tape.value(s)).collect();
        let (policy, y) = match directive {
            Directive::None => return Ok(()),
            Directive::Fifo => (QueryPolicy::Fifo, None),
            Directive::Average => (QueryPolicy::Average, None),
            Directive::Mbc => (QueryPolicy::Mbc, None),
            Directive::Rtc(r) => (
                QueryPolicy::Rtc {
                    r_temp: r,
                    alpha: self.cfg.alpha,
                },
                None,
            ),
            Directive::Follow(plan, y) => (QueryPolicy::Follow(plan), *y),
        };
        let replayed = match policy {
            QueryPolicy::Rtc { .. } | QueryPolicy::Mbc if bank.over_capacity() => {
                self.decisions.take_plan()?
            }
            _ => None,
        };
        let plan = match replayed {
            Some(p) => p,
            None => {
                let Some(p) = query_plan(bank, &values, policy)? else {
                    return Ok(());
                };
                if matches!(policy, QueryPolicy::Rtc { .. } | QueryPolicy::Mbc) {
                    self.decisions.record(Decision::Plan(p.clone()));
                }
                p
            }
        };
        let plan_rc = Rc::new(plan);
        self.qbanks[b].apply(&plan_rc, |p, inputs, j| match (p, y) {
            (CompressionPlan::Mix { .. }, Some(y)) => tape.mix_slots(y, inputs, j),
            _ => tape.compress_slot(inputs, plan_rc.clone(), j),
        })
    }

    /// Spatially filtered tokens of one slot, computed once per slot.
    fn view(
        &mut self,
        tape: &mut Tape,
        bound: &BoundParams,
        params: &ModelParams,
        slot: Var,
        position: usize,
    ) -> Result<Var> {
        if let Some(v) = self.slot_cache.get(&slot).and_then(|c| c.view) {
            return Ok(v);
        }
        let view = match self.grid.clone() {
            None => slot,
            Some(grid) => match self.mode.spatial {
                SelectMode::Eval => {
                    let h = match self.decisions.take_anchor()? {
                        Some(h) => h,
                        None => {
                            let raw = self.spatial_raw(tape, params, slot)?;
                            let map = Matrix::new(grid.n_side, grid.n_side, raw)?;
                            let pooled = anchor_scores(&map, &grid)?;
                            let h = hard_topk(&pooled, 1)?.indices().expect("hard")[0];
                            self.decisions.record(Decision::Anchor(h));
                            h
                        }
                    };
                    tape.gather_rows(slot, &grid.anchors[h])?
                }
                SelectMode::Train => {
                    let raw = tape.scorer(slot, bound.scorer("spatial")?)?;
                    let pooled = tape.matmul(self.pool.expect("pooling bound in train mode"), raw)?;
                    let pcfg = self.perturb(position, PURPOSE_STF)?;
                    let y = tape.perturbed_topk(pooled, 1, &pcfg)?;
                    self.slot_cache.entry(slot).or_insert_with(|| SlotCache {
                        spatial_raw: None,
                        view: None,
                        kv: Vec::new(),
                    });
                    if let Some(c) = self.slot_cache.get_mut(&slot) {
                        if c.spatial_raw.is_none() {
                            c.spatial_raw = Some(tape.value(raw).data().to_vec());
                        }
                    }
                    tape.anchor_mix(slot, y, self.anchors.clone())?
                }
            },
        };
        let cache = self.slot_cache.entry(slot).or_insert_with(|| SlotCache {
            spatial_raw: None,
            view: None,
            kv: Vec::new(),
        });
        cache.view = Some(view);
        Ok(view)
    }

    /// Share of each of the first `horizon` frames still held by the visual
    /// bank.
    pub fn retention(&self, frames: usize) -> Vec<f64> {
        (0..frames)
            .map(|t| self.vbank.retention(t).unwrap_or(0.0))
            .collect()
    }
}

enum Directive {
    None,
    Fifo,
    Average,
    Mbc,
    Rtc(Vec<f32>),
    Follow(Rc<CompressionPlan>, Option<Var>),
}

/// Result of folding a whole stream.
pub struct StreamRun {
    pub theta: Var,
    pub state: StreamState,
}

/// Per-stream run settings.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub mode: PipelineMode,
    pub noise: SeededRng,
    pub track_provenance: bool,
    pub replay: Option<Vec<Decision>>,
}

impl RunOptions {
    pub fn new(mode: PipelineMode, noise: SeededRng) -> Self {
        Self {
            mode,
            noise,
            track_provenance: false,
            replay: None,
        }
    }
}

/// Folds [`StreamState::step`] over `frames`; the final queries summarise
/// the stream.
pub fn run_stream_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ModelParams,
    frames: &[Matrix],
    cfg: &AdapterConfig,
    opts: &RunOptions,
) -> Result<StreamRun> {
    if frames.is_empty() {
        return Err(ReefError::Argument("stream has no frames".into()));
    }
    let horizon = opts.track_provenance.then_some(frames.len());
    let mut state = StreamState::new(tape, cfg, opts.mode, opts.noise, horizon)?;
    if let Some(items) = &opts.replay {
        state.decisions = DecisionLog::replay(items.clone());
    }
    let mut theta = None;
    for f in frames {
        theta = Some(state.step(tape, bound, params, f)?);
    }
    Ok(StreamRun {
        theta: theta.expect("non-empty stream"),
        state,
    })
}

/// Final queries of a stream with every parameter held constant.
pub fn run_stream(
    frames: &[Matrix],
    params: &ModelParams,
    cfg: &AdapterConfig,
    mode: PipelineMode,
    noise: SeededRng,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, |_| false);
    let run = run_stream_tape(&mut tape, &bound, params, frames, cfg, &RunOptions::new(mode, noise))?;
    Ok(tape.value(run.theta).clone())
}

/// Teacher-forced token head: pooled queries next to the embedding of the
/// previous token (a start token first), mapped to vocabulary logits.
pub fn decode_logits(tape: &mut Tape, bound: &BoundParams, theta: Var, targets: &[usize], vocab: usize) -> Result<Var> {
    if targets.is_empty() {
        return Err(ReefError::Argument("empty target sequence".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(ReefError::Argument(format!("token {bad} outside vocabulary of {vocab}")));
    }
    let s = targets.len();
    let pooled = tape.mean_rows(theta)?;
    let pooled = tape.repeat_rows(pooled, s)?;
    let prev: Vec<usize> = std::iter::once(vocab).chain(targets[..s - 1].iter().copied()).collect();
    let emb = tape.gather_rows(bound.var("head.embed")?, &prev)?;
    let feat = tape.concat_cols(&[pooled, emb])?;
    let logits = tape.matmul(feat, bound.var("head.w")?)?;
    tape.add_row(logits, bound.var("head.b")?)
}

/// Mean cross-entropy of the targets under the token head.
pub fn decode_loss_tape(tape: &mut Tape, bound: &BoundParams, theta: Var, targets: &[usize], vocab: usize) -> Result<Var> {
    let logits = decode_logits(tape, bound, theta, targets, vocab)?;
    tape.cross_entropy(logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(strategy: Strategy) -> AdapterConfig {
        AdapterConfig {
            dim: 8,
            tokens: 16,
            queries: 3,
            bank_capacity: 3,
            k_spat: 4,
            gamma: 2,
            n_samples: 50,
            sigma: 0.3,
            blocks: 2,
            heads: 2,
            vocab: 8,
            seq_len: 2,
            strategy,
            ..AdapterConfig::default()
        }
    }

    fn frames(seed: u64, t: usize, cfg: &AdapterConfig) -> Vec<Matrix> {
        (0..t)
            .map(|i| gaussian_sample(SeededRng::new(seed, i as u64), cfg.tokens, cfg.dim))
            .collect()
    }

    fn weights(seed: u64, d: usize, heads: usize) -> AttentionWeights {
        let m = |i| gaussian_sample(SeededRng::new(seed, i), d, d).scale(0.5);
        AttentionWeights {
            w_q: m(0),
            w_k: m(1),
            w_v: m(2),
            w_o: m(3),
            heads,
        }
    }

    #[test]
    fn positional_embedding_cases() {
        let pe0 = positional_embedding(0, 6);
        assert_eq!(pe0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let z = Matrix::zeros(2, 6);
        assert_eq!(positional_fuse(&z, 5).unwrap().row(1), &positional_embedding(5, 6)[..]);
        let e = gaussian_sample(SeededRng::new(1, 0), 2, 6);
        let p = positional_fuse(&e, 0).unwrap();
        assert_eq!(p.get(0, 1), e.get(0, 1) + 1.0);
    }

    #[test]
    fn positional_embeddings_are_distinct() {
        let d = 16;
        let pes: Vec<Vec<f32>> = (0..1000).map(|t| positional_embedding(t, d)).collect();
        for a in 0..1000 {
            for b in a + 1..1000 {
                let dist: f32 = pes[a].iter().zip(&pes[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(dist > 1e-4, "PE({a}) == PE({b})");
            }
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let w = weights(2, 4, 2);
        let v = gaussian_sample(SeededRng::new(3, 0), 1, 4);
        let expected = v.matmul(&w.w_v).unwrap().matmul(&w.w_o).unwrap();
        for seed in 0..3 {
            let q = gaussian_sample(SeededRng::new(4, seed), 3, 4);
            let out = cross_attention(&q, &v, &w).unwrap();
            for r in 0..3 {
                for (a, b) in out.row(r).iter().zip(expected.row(0)) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
        assert!(cross_attention(&v, &Matrix::zeros(0, 4), &w).is_err());
    }

    /// Straightforward loop implementation of multi-head attention.
    fn naive_attention(q_in: &Matrix, x: &Matrix, w: &AttentionWeights) -> Matrix {
        let q = q_in.matmul(&w.w_q).unwrap();
        let k = x.matmul(&w.w_k).unwrap();
        let v = x.matmul(&w.w_v).unwrap();
        let d = q.cols();
        let c = d / w.heads;
        let mut concat = Matrix::zeros(q.rows(), d);
        for h in 0..w.heads {
            for i in 0..q.rows() {
                let mut logits = vec![0f64; x.rows()];
                for (j, l) in logits.iter_mut().enumerate() {
                    for e in h * c..(h + 1) * c {
                        *l += q.get(i, e) as f64 * k.get(j, e) as f64;
                    }
                    *l /= (c as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let probs: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for e in h * c..(h + 1) * c {
                    let s: f64 = (0..x.rows()).map(|j| probs[j] * v.get(j, e) as f64).sum();
                    concat.set(i, e, s as f32);
                }
            }
        }
        concat.matmul(&w.w_o).unwrap()
    }

    #[test]
    fn attention_matches_loop_oracle() {
        for heads in [1, 2] {
            let w = weights(5, 4, heads);
            let q = gaussian_sample(SeededRng::new(6, 0), 3, 4);
            let x = gaussian_sample(SeededRng::new(6, 1), 5, 4);
            let a = cross_attention(&q, &x, &w).unwrap();
            let b = naive_attention(&q, &x, &w);
            assert!(a.sub(&b).unwrap().data().iter().all(|v| v.abs() < 1e-5));
            let s = self_attention_with_qmb(&q, &q, &w).unwrap();
            let o = naive_attention(&q, &q, &w);
            assert!(s.sub(&o).unwrap().data().iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn stream_output_shape_and_determinism() {
        for strategy in Strategy::ALL {
            let cfg = small_cfg(strategy);
            let params = ModelParams::init(&cfg, 1).unwrap();
            let fs = frames(7, 6, &cfg);
            let a = run_stream(&fs, &params, &cfg, PipelineMode::EVAL, SeededRng::new(1, 1)).unwrap();
            let b = run_stream(&fs, &params, &cfg, PipelineMode::EVAL, SeededRng::new(1, 1)).unwrap();
            assert_eq!(a.shape(), (3, 8));
            assert_eq!(a, b);
            let one = run_stream(&fs[..1], &params, &cfg, PipelineMode::EVAL, SeededRng::new(1, 1)).unwrap();
            assert_eq!(one.shape(), (3, 8));
        }
    }

    #[test]
    fn short_streams_never_compress() {
        let reference = {
            let cfg = small_cfg(Strategy::Fifo);
            let params = ModelParams::init(&cfg, 2).unwrap();
            run_stream(&frames(8, 3, &cfg), &params, &cfg, PipelineMode::EVAL, SeededRng::new(0, 0)).unwrap()
        };
        for strategy in [Strategy::Tts, Strategy::Mbc, Strategy::Rtc] {
            let cfg = small_cfg(strategy);
            let params = ModelParams::init(&cfg, 2).unwrap();
            let out = run_stream(&frames(8, 3, &cfg), &params, &cfg, PipelineMode::EVAL, SeededRng::new(0, 0)).unwrap();
            assert_eq!(out, reference);
        }
    }

    #[test]
    fn banks_stay_within_capacity() {
        for strategy in Strategy::ALL {
            let cfg = small_cfg(strategy);
            let params = ModelParams::init(&cfg, 3).unwrap();
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params, |_| false);
            let mode = PipelineMode {
                temporal: SelectMode::Train,
                spatial: SelectMode::Train,
            };
            let mut st = StreamState::new(&mut tape, &cfg, mode, SeededRng::new(3, 0), Some(9)).unwrap();
            for f in frames(9, 9, &cfg) {
                st.step(&mut tape, &bound, &params, &f).unwrap();
                assert!(st.visual_bank().len() <= cfg.bank_capacity);
                assert!(st.query_banks().iter().all(|q| q.len() == st.visual_bank().len()));
            }
        }
    }

    #[test]
    fn rejects_wrong_frame_shape() {
        let cfg = small_cfg(Strategy::Rtc);
        let params = ModelParams::init(&cfg, 4).unwrap();
        assert!(run_stream(&[Matrix::zeros(9, 8)], &params, &cfg, PipelineMode::EVAL, SeededRng::new(0, 0)).is_err());
        assert!(run_stream(&[], &params, &cfg, PipelineMode::EVAL, SeededRng::new(0, 0)).is_err());
    }

    #[test]
    fn params_match_config_shapes() {
        let cfg = small_cfg(Strategy::Rtc);
        let params = ModelParams::init(&cfg, 5).unwrap();
        params.check_against(&cfg).unwrap();
        let other = AdapterConfig { dim: 4, ..cfg.clone() };
        assert!(params.check_against(&other).is_err());
        assert_eq!(params, ModelParams::init(&cfg, 5).unwrap());
        assert_ne!(params, ModelParams::init(&cfg, 6).unwrap());
    }
}
