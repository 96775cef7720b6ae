//! Fixed-capacity memory banks and their compression rules.
//!
//! A compression step turns `L+1` slots into `L`. Every rule first produces
//! a [`CompressionPlan`] from slot values; the plan is then applied to the
//! slots, their timestamps and their provenance. Keeping plan and
//! application apart lets the same decision drive plain matrices and
//! recorded tape variables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ReefError, Result};
use crate::tensor::{cosine_f64, Matrix};
use crate::topk::{topk_train_select, PerturbConfig, SelectMode, SelectionMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fifo,
    #[serde(rename = "avgpool")]
    AvgPool,
    Tts,
    Mbc,
    Rtc,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Fifo,
        Strategy::AvgPool,
        Strategy::Tts,
        Strategy::Mbc,
        Strategy::Rtc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fifo => "fifo",
            Strategy::AvgPool => "avgpool",
            Strategy::Tts => "tts",
            Strategy::Mbc => "mbc",
            Strategy::Rtc => "rtc",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ReefError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| ReefError::Argument(format!("unknown strategy `{s}`")))
    }
}

/// How `L+1` input slots become the output slots.
#[derive(Clone, Debug, PartialEq)]
pub enum CompressionPlan {
    /// Row `i` of slots `k[i]` and `k[i]+1` is averaged; later rows shift up.
    Merge { k: Vec<usize> },
    /// Slot `index` is removed.
    Drop { index: usize },
    /// Output slot `k` is `Σ_g weights[g, k] · slot_g`.
    Mix { weights: Matrix },
    /// Slot 0 holds the mean of `frames` frames; slot 1 is folded into it.
    Running { frames: usize },
}

impl CompressionPlan {
    pub fn output_len(&self, input_len: usize) -> usize {
        match self {
            CompressionPlan::Mix { weights } => weights.cols(),
            CompressionPlan::Running { .. } => 1,
            _ => input_len - 1,
        }
    }

    /// Input slot that output slot `j` reuses unchanged, if any.
    pub fn passthrough(&self, j: usize) -> Option<usize> {
        match self {
            CompressionPlan::Merge { k } => {
                let lo = k.iter().copied().min().unwrap_or(0);
                let hi = k.iter().copied().max().unwrap_or(0);
                if j < lo {
                    Some(j)
                } else if j > hi {
                    Some(j + 1)
                } else {
                    None
                }
            }
            CompressionPlan::Drop { index } => Some(if j < *index { j } else { j + 1 }),
            _ => None,
        }
    }

    fn check(&self, n_in: usize, rows: usize) -> Result<()> {
        let ok = match self {
            CompressionPlan::Merge { k } => {
                k.len() == rows && n_in >= 2 && k.iter().all(|&t| t + 1 < n_in)
            }
            CompressionPlan::Drop { index } => *index < n_in,
            CompressionPlan::Mix { weights } => weights.rows() == n_in,
            CompressionPlan::Running { frames } => n_in == 2 && *frames >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(ReefError::State(format!(
                "plan {self:?} does not fit {n_in} slots of {rows} rows"
            )))
        }
    }

    /// Value of output slot `j`.
    pub fn slot_value(&self, slots: &[&Matrix], j: usize) -> Result<Matrix> {
        let first = slots
            .first()
            .ok_or_else(|| ReefError::State("compression of an empty bank".into()))?;
        let (rows, cols) = first.shape();
        if slots.iter().any(|s| s.shape() != (rows, cols)) {
            return Err(ReefError::shape("compress", "slots differ in shape"));
        }
        self.check(slots.len(), rows)?;
        if j >= self.output_len(slots.len()) {
            return Err(ReefError::State(format!("output slot {j} out of range")));
        }
        if let Some(src) = self.passthrough(j) {
            return Ok(slots[src].clone());
        }
        let mut out = Matrix::zeros(rows, cols);
        match self {
            CompressionPlan::Merge { k } => {
                for (i, &ki) in k.iter().enumerate() {
                    let dst = out.row_mut(i);
                    if j < ki {
                        dst.copy_from_slice(slots[j].row(i));
                    } else if j == ki {
                        for ((o, &a), &b) in
                            dst.iter_mut().zip(slots[j].row(i)).zip(slots[j + 1].row(i))
                        {
                            *o = (a + b) * 0.5;
                        }
                    } else {
                        dst.copy_from_slice(slots[j + 1].row(i));
                    }
                }
            }
            CompressionPlan::Mix { weights } => {
                for (g, slot) in slots.iter().enumerate() {
                    let w = weights.get(g, j);
                    if w != 0.0 {
                        out.add_scaled(slot, w)?;
                    }
                }
            }
            CompressionPlan::Running { frames } => {
                let (wa, wb) = running_weights(*frames);
                for ((o, &a), &b) in out
                    .data_mut()
                    .iter_mut()
                    .zip(slots[0].data())
                    .zip(slots[1].data())
                {
                    *o = a * wa + b * wb;
                }
            }
            CompressionPlan::Drop { .. } => unreachable!("drops always pass through"),
        }
        Ok(out)
    }
}

/// Weights that fold one more frame into a mean of `frames` frames.
pub(crate) fn running_weights(frames: usize) -> (f32, f32) {
    let n = frames as f32;
    (n / (n + 1.0), 1.0 / (n + 1.0))
}

/// Scores behind one merge decision. `c`, `u` and `s` are `L x R` for `L+1`
/// slots of `R` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionTrace {
    pub k: Vec<usize>,
    pub c: Matrix,
    pub u: Matrix,
    pub s: Matrix,
    pub alpha: f32,
}

impl CompressionTrace {
    pub fn plan(&self) -> CompressionPlan {
        CompressionPlan::Merge { k: self.k.clone() }
    }
}

fn check_slots(op: &'static str, slots: &[&Matrix]) -> Result<(usize, usize)> {
    if slots.len() < 2 {
        return Err(ReefError::State(format!(
            "{op} needs at least two slots, got {}",
            slots.len()
        )));
    }
    let shape = slots[0].shape();
    if let Some(bad) = slots.iter().position(|s| s.shape() != shape) {
        return Err(ReefError::shape(
            op,
            format!("slot {bad} is {:?}, expected {shape:?}", slots[bad].shape()),
        ));
    }
    Ok(shape)
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (t, v) in values.enumerate() {
        if v > best.1 {
            best = (t, v);
        }
    }
    best.0
}

/// Merge decision from adjacent similarity blended with irrelevance.
///
/// `r_spat` is `(L+1) x R`; `None` means every row is fully relevant. With
/// `global_k` one index, the arg-max of the row-averaged score, is shared by
/// all rows.
pub fn rtc_trace(
    slots: &[&Matrix],
    r_temp: &[f32],
    r_spat: Option<&Matrix>,
    alpha: f32,
    global_k: bool,
) -> Result<CompressionTrace> {
    let (rows, _) = check_slots("rtc_compress", slots)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ReefError::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let g = slots.len();
    if r_temp.len() != g {
        return Err(ReefError::shape(
            "rtc_compress",
            format!("{} temporal scores for {g} slots", r_temp.len()),
        ));
    }
    if let Some(rs) = r_spat {
        if rs.shape() != (g, rows) {
            return Err(ReefError::shape(
                "rtc_compress",
                format!("spatial scores {:?}, expected {:?}", rs.shape(), (g, rows)),
            ));
        }
    }
    let in_unit = |v: &f32| (0.0..=1.0).contains(v);
    if !r_temp.iter().all(in_unit) || !r_spat.map_or(true, |m| m.data().iter().all(in_unit)) {
        return Err(ReefError::Argument(
            "relevance scores must lie in [0, 1]".into(),
        ));
    }
    let a = alpha as f64;
    let irrelevance = |t: usize, i: usize| {
        let spat = r_spat.map_or(1.0, |m| m.get(t, i) as f64);
        1.0 - r_temp[t] as f64 * spat
    };
    let mut c = vec![0f64; (g - 1) * rows];
    let mut u = vec![0f64; (g - 1) * rows];
    let mut s = vec![0f64; (g - 1) * rows];
    for t in 0..g - 1 {
        for i in 0..rows {
            let idx = t * rows + i;
            c[idx] = cosine_f64(slots[t].row(i), slots[t + 1].row(i));
            u[idx] = 0.5 * (irrelevance(t, i) + irrelevance(t + 1, i));
            s[idx] = a * c[idx] + (1.0 - a) * u[idx];
        }
    }
    let k = choose_k(&s, g - 1, rows, global_k);
    Ok(CompressionTrace {
        k,
        c: to_matrix(g - 1, rows, &c),
        u: to_matrix(g - 1, rows, &u),
        s: to_matrix(g - 1, rows, &s),
        alpha,
    })
}

/// Similarity-only merge decision.
pub fn mbc_trace(slots: &[&Matrix], global_k: bool) -> Result<CompressionTrace> {
    let (rows, _) = check_slots("mbc_compress", slots)?;
    let g = slots.len();
    let mut c = vec![0f64; (g - 1) * rows];
    for t in 0..g - 1 {
        for i in 0..rows {
            c[t * rows + i] = cosine_f64(slots[t].row(i), slots[t + 1].row(i));
        }
    }
    let k = choose_k(&c, g - 1, rows, global_k);
    Ok(CompressionTrace {
        k,
        c: to_matrix(g - 1, rows, &c),
        u: Matrix::zeros(g - 1, rows),
        s: to_matrix(g - 1, rows, &c),
        alpha: 1.0,
    })
}

fn choose_k(s: &[f64], pairs: usize, rows: usize, global_k: bool) -> Vec<usize> {
    if global_k {
        let k = argmax_first((0..pairs).map(|t| s[t * rows..(t + 1) * rows].iter().sum::<f64>()));
        vec![k; rows]
    } else {
        (0..rows)
            .map(|i| argmax_first((0..pairs).map(|t| s[t * rows + i])))
            .collect()
    }
}

fn to_matrix(rows: usize, cols: usize, v: &[f64]) -> Matrix {
    Matrix::new(rows, cols, v.iter().map(|&x| x as f32).collect()).expect("sized by caller")
}

/// Ordered slots with capacity `L`, timestamps and optional provenance.
///
/// Provenance row `i` of a slot holds the weight each original frame
/// contributes to token `i`; it is transformed by the same plans as the
/// slots themselves.
#[derive(Clone, Debug)]
pub struct MemoryBank<S> {
    capacity: usize,
    global_k: bool,
    slot_shape: Option<(usize, usize)>,
    slots: Vec<S>,
    timestamps: Vec<usize>,
    provenance: Option<(usize, Vec<Matrix>)>,
    frames_seen: usize,
}

pub type VisualMemoryBank = MemoryBank<Matrix>;

impl<S: Clone> MemoryBank<S> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(ReefError::Argument("bank capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            global_k: false,
            slot_shape: None,
            slots: Vec::new(),
            timestamps: Vec::new(),
            provenance: None,
            frames_seen: 0,
        })
    }

    pub fn with_global_k(mut self, global_k: bool) -> Self {
        self.global_k = global_k;
        self
    }

    /// Tracks which of the first `horizon` frames feed every token.
    pub fn with_provenance(mut self, horizon: usize) -> Self {
        self.provenance = Some((horizon, Vec::new()));
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn global_k(&self) -> bool {
        self.global_k
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[S] {
        &self.slots
    }

    pub fn timestamps(&self) -> &[usize] {
        &self.timestamps
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn over_capacity(&self) -> bool {
        self.slots.len() > self.capacity
    }

    pub fn provenance(&self) -> Option<&[Matrix]> {
        self.provenance.as_ref().map(|(_, p)| p.as_slice())
    }

    /// Share of frame `t` still present, averaged over token positions.
    pub fn retention(&self, t: usize) -> Option<f64> {
        let (horizon, prov) = self.provenance.as_ref()?;
        if t >= *horizon {
            return None;
        }
        let rows = self.slot_shape?.0;
        let total: f64 = prov
            .iter()
            .map(|p| (0..rows).map(|i| p.get(i, t) as f64).sum::<f64>())
            .sum();
        Some(total / rows as f64)
    }

    /// Appends one slot of the given shape. A bank already holding `L+1`
    /// slots must be compressed first.
    pub fn append(&mut self, slot: S, shape: (usize, usize)) -> Result<()> {
        if let Some(expected) = self.slot_shape {
            if expected != shape {
                return Err(ReefError::shape(
                    "bank_append",
                    format!("slot {shape:?}, bank holds {expected:?}"),
                ));
            }
        }
        if self.slots.len() > self.capacity {
            return Err(ReefError::State(format!(
                "bank holds {} slots with capacity {}; compress before appending",
                self.slots.len(),
                self.capacity
            )));
        }
        let t = self.frames_seen;
        if let Some((horizon, prov)) = self.provenance.as_mut() {
            if t >= *horizon {
                return Err(ReefError::State(format!(
                    "frame {t} beyond provenance horizon {horizon}"
                )));
            }
            let mut p = Matrix::zeros(shape.0, *horizon);
            for i in 0..shape.0 {
                p.set(i, t, 1.0);
            }
            prov.push(p);
        }
        self.slot_shape = Some(shape);
        self.slots.push(slot);
        self.timestamps.push(t);
        self.frames_seen += 1;
        Ok(())
    }

    /// Applies `plan`, building each changed slot with `make(plan, slots, j)`
    /// and reusing unchanged ones.
    pub fn apply(
        &mut self,
        plan: &CompressionPlan,
        mut make: impl FnMut(&CompressionPlan, &[S], usize) -> Result<S>,
    ) -> Result<()> {
        let rows = self
            .slot_shape
            .ok_or_else(|| ReefError::State("compression of an empty bank".into()))?
            .0;
        let n_in = self.slots.len();
        plan.check(n_in, rows)?;
        let n_out = plan.output_len(n_in);
        let mut slots = Vec::with_capacity(n_out);
        for j in 0..n_out {
            slots.push(match plan.passthrough(j) {
                Some(src) => self.slots[src].clone(),
                None => make(plan, &self.slots, j)?,
            });
        }
        let timestamps = (0..n_out).map(|j| self.out_timestamp(plan, j)).collect();
        if let Some((_, prov)) = self.provenance.as_mut() {
            let refs: Vec<&Matrix> = prov.iter().collect();
            let next = (0..n_out)
                .map(|j| plan.slot_value(&refs, j))
                .collect::<Result<Vec<_>>>()?;
            *prov = next;
        }
        self.slots = slots;
        self.timestamps = timestamps;
        Ok(())
    }

    fn out_timestamp(&self, plan: &CompressionPlan, j: usize) -> usize {
        let ts = &self.timestamps;
        match plan {
            CompressionPlan::Merge { k } => {
                if k.iter().any(|&ki| ki >= j) {
                    ts[j]
                } else {
                    ts[j + 1]
                }
            }
            CompressionPlan::Drop { index } => ts[if j < *index { j } else { j + 1 }],
            CompressionPlan::Mix { weights } => {
                ts[argmax_first((0..weights.rows()).map(|g| weights.get(g, j) as f64))]
            }
            CompressionPlan::Running { .. } => ts[0],
        }
    }

    /// Plan for strategies that need no scores.
    pub fn drop_oldest_plan(&self) -> CompressionPlan {
        CompressionPlan::Drop { index: 0 }
    }

    /// Plan folding the newest slot into a running mean held in slot 0.
    pub fn running_plan(&self) -> CompressionPlan {
        CompressionPlan::Running {
            frames: self.frames_seen - 1,
        }
    }

    fn require_full(&self, op: &str) -> Result<()> {
        if self.slots.len() != self.capacity + 1 {
            return Err(ReefError::State(format!(
                "{op} expects {} slots, bank holds {}",
                self.capacity + 1,
                self.slots.len()
            )));
        }
        Ok(())
    }
}

impl MemoryBank<Matrix> {
    fn refs(&self) -> Vec<&Matrix> {
        self.slots.iter().collect()
    }

    fn apply_values(&mut self, plan: &CompressionPlan) -> Result<()> {
        self.apply(plan, |p, slots, j| {
            let refs: Vec<&Matrix> = slots.iter().collect();
            p.slot_value(&refs, j)
        })
    }

    pub fn rtc_compress(
        &mut self,
        r_temp: &[f32],
        r_spat: Option<&Matrix>,
        alpha: f32,
    ) -> Result<CompressionTrace> {
        self.require_full("rtc_compress")?;
        let trace = rtc_trace(&self.refs(), r_temp, r_spat, alpha, self.global_k)?;
        self.apply_values(&trace.plan())?;
        Ok(trace)
    }

    pub fn mbc_compress(&mut self) -> Result<CompressionTrace> {
        self.require_full("mbc_compress")?;
        let trace = mbc_trace(&self.refs(), self.global_k)?;
        self.apply_values(&trace.plan())?;
        Ok(trace)
    }

    /// Keeps the Top-L slots by raw temporal score, in order.
    pub fn tts_compress(
        &mut self,
        raw_scores: &[f32],
        mode: SelectMode,
        cfg: &PerturbConfig,
    ) -> Result<SelectionMatrix> {
        self.require_full("tts_compress")?;
        let plan_y = tts_plan(raw_scores, self.capacity, mode, cfg)?;
        self.apply_values(&plan_y.0)?;
        Ok(plan_y.1)
    }

    pub fn fifo_compress(&mut self) -> Result<()> {
        self.require_full("fifo_compress")?;
        self.apply_values(&self.drop_oldest_plan())
    }

    /// Folds the newest slot into the running mean.
    pub fn avgpool_compress(&mut self) -> Result<()> {
        if self.slots.len() != 2 {
            return Err(ReefError::State(format!(
                "running mean expects 2 slots, bank holds {}",
                self.slots.len()
            )));
        }
        self.apply_values(&self.running_plan())
    }
}

/// Top-`keep` plan over raw scores: a drop in eval mode, a smoothed mix in
/// train mode.
pub fn tts_plan(
    raw_scores: &[f32],
    keep: usize,
    mode: SelectMode,
    cfg: &PerturbConfig,
) -> Result<(CompressionPlan, SelectionMatrix)> {
    if raw_scores.len() != keep + 1 {
        return Err(ReefError::State(format!(
            "selection of {keep} from {} scores",
            raw_scores.len()
        )));
    }
    let (y, _) = topk_train_select(raw_scores, keep, cfg, mode)?;
    let plan = match y.indices() {
        Some(idx) => {
            let dropped = (0..=keep)
                .find(|g| !idx.contains(g))
                .expect("one slot is dropped");
            CompressionPlan::Drop { index: dropped }
        }
        None => CompressionPlan::Mix {
            weights: y.matrix().clone(),
        },
    };
    Ok((plan, y))
}

/// Elementwise mean over time of a whole stream.
pub fn avgpool_compress(frames: &[Matrix]) -> Result<Matrix> {
    let first = frames
        .first()
        .ok_or_else(|| ReefError::Argument("average of an empty stream".into()))?;
    let mut acc = vec![0f64; first.data().len()];
    for f in frames {
        if f.shape() != first.shape() {
            return Err(ReefError::shape(
                "avgpool_compress",
                "frames differ in shape",
            ));
        }
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v as f64;
        }
    }
    let n = frames.len() as f64;
    Matrix::new(
        first.rows(),
        first.cols(),
        acc.into_iter().map(|a| (a / n) as f32).collect(),
    )
}

pub fn vmb_append(bank: &mut VisualMemoryBank, frame: Matrix) -> Result<()> {
    let shape = frame.shape();
    bank.append(frame, shape)
}

/// How a query bank compresses when it overflows.
#[derive(Clone, Copy, Debug)]
pub enum QueryPolicy<'a> {
    /// Blend of query-token similarity and the shared temporal relevance.
    Rtc {
        r_temp: &'a [f32],
        alpha: f32,
    },
    Mbc,
    Fifo,
    Average,
    /// Reuse the visual bank's plan.
    Follow(&'a CompressionPlan),
}

/// One bank of query snapshots per self-attention layer.
#[derive(Clone, Debug)]
pub struct QueryMemoryBank {
    pub layers: Vec<MemoryBank<Matrix>>,
}

impl QueryMemoryBank {
    pub fn new(layers: usize, capacity: usize) -> Result<Self> {
        Ok(Self {
            layers: (0..layers)
                .map(|_| MemoryBank::new(capacity))
                .collect::<Result<_>>()?,
        })
    }
}

/// Plan for an overflowing query bank, or `None` when it still fits.
pub fn query_plan<S: Clone>(
    bank: &MemoryBank<S>,
    values: &[&Matrix],
    policy: QueryPolicy<'_>,
) -> Result<Option<CompressionPlan>> {
    let needed = match policy {
        QueryPolicy::Average => bank.len() > 1,
        _ => bank.over_capacity(),
    };
    if !needed {
        return Ok(None);
    }
    let plan = match policy {
        QueryPolicy::Rtc { r_temp, alpha } => {
            rtc_trace(values, r_temp, None, alpha, bank.global_k())?.plan()
        }
        QueryPolicy::Mbc => mbc_trace(values, bank.global_k())?.plan(),
        QueryPolicy::Fifo => bank.drop_oldest_plan(),
        QueryPolicy::Average => bank.running_plan(),
        QueryPolicy::Follow(plan) => plan.clone(),
    };
    Ok(Some(plan))
}

/// Appends `theta` to a query bank and compresses it if it overflows.
pub fn qmb_append_compress(
    bank: &mut MemoryBank<Matrix>,
    theta: Matrix,
    policy: QueryPolicy<'_>,
) -> Result<Option<CompressionPlan>> {
    let shape = theta.shape();
    bank.append(theta, shape)?;
    let refs: Vec<&Matrix> = bank.slots().iter().collect();
    let plan = query_plan(bank, &refs, policy)?;
    if let Some(p) = &plan {
        bank.apply_values(p)?;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_sample, SeededRng};
    use proptest::prelude::*;

    fn bank_of(capacity: usize, frames: &[Matrix]) -> VisualMemoryBank {
        let mut b = VisualMemoryBank::new(capacity).unwrap();
        for f in frames {
            vmb_append(&mut b, f.clone()).unwrap();
        }
        b
    }

    fn random_frames(seed: u64, count: usize, n: usize, d: usize) -> Vec<Matrix> {
        (0..count)
            .map(|t| gaussian_sample(SeededRng::new(seed, t as u64), n, d))
            .collect()
    }

    #[test]
    fn append_lengths() {
        let frames = random_frames(1, 4, 2, 3);
        let mut b = bank_of(3, &frames[..1]);
        assert_eq!(b.len(), 1);
        b = bank_of(3, &frames[..3]);
        assert_eq!(b.len(), 3);
        vmb_append(&mut b, frames[3].clone()).unwrap();
        b.rtc_compress(&[0.5; 4], None, 0.7).unwrap();
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn append_errors() {
        let frames = random_frames(2, 3, 2, 3);
        let mut b = bank_of(1, &frames[..2]);
        assert!(matches!(
            vmb_append(&mut b, frames[2].clone()),
            Err(ReefError::State(_))
        ));
        let mut b = bank_of(3, &frames[..1]);
        assert!(matches!(
            vmb_append(&mut b, Matrix::zeros(3, 3)),
            Err(ReefError::Shape { .. })
        ));
    }

    #[test]
    fn identical_pair_merges() {
        let f = |a: f32, b: f32| Matrix::from_rows(&[&[a, b]]);
        let mut b = bank_of(2, &[f(1.0, 0.0), f(1.0, 0.0), f(0.0, 1.0)]);
        let trace = b.rtc_compress(&[0.5; 3], None, 1.0).unwrap();
        assert_eq!(trace.c.data(), &[1.0, 0.0]);
        assert_eq!(trace.k, vec![0]);
        assert_eq!(b.slots(), &[f(1.0, 0.0), f(0.0, 1.0)]);
        assert_eq!(b.timestamps(), &[0, 2]);
    }

    #[test]
    fn irrelevant_frames_merge() {
        let frames = random_frames(3, 3, 1, 4);
        let mut b = bank_of(2, &frames);
        let trace = b.rtc_compress(&[0.9, 0.1, 0.1], None, 0.0).unwrap();
        assert!((trace.u.get(0, 0) - 0.5).abs() < 1e-6);
        assert!((trace.u.get(1, 0) - 0.9).abs() < 1e-6);
        assert_eq!(trace.k, vec![1]);
        assert_eq!(b.slots()[0], frames[0]);
    }

    #[test]
    fn rtc_errors() {
        let frames = random_frames(4, 3, 2, 2);
        let mut b = bank_of(3, &frames);
        assert!(matches!(
            b.rtc_compress(&[0.5; 3], None, 0.5),
            Err(ReefError::State(_))
        ));
        let mut b = bank_of(2, &frames);
        assert!(matches!(
            b.rtc_compress(&[0.5; 3], None, 1.5),
            Err(ReefError::Argument(_))
        ));
        assert!(matches!(
            b.rtc_compress(&[1.5, 0.0, 0.0], None, 0.5),
            Err(ReefError::Argument(_))
        ));
        assert!(b.rtc_compress(&[0.5; 2], None, 0.5).is_err());
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn mbc_picks_most_similar_pair() {
        let rows = [
            Matrix::from_rows(&[&[1.0, 0.1, 0.0]]),
            Matrix::from_rows(&[&[0.9, 0.2, 0.0]]),
            Matrix::from_rows(&[&[0.0, 0.0, 1.0]]),
        ];
        let mut b = bank_of(2, &rows);
        let trace = b.mbc_compress().unwrap();
        assert_eq!(trace.k, vec![0]);
    }

    #[test]
    fn rtc_alpha_one_is_mbc() {
        for seed in 0..50 {
            let frames = random_frames(100 + seed, 5, 3, 4);
            let mut a = bank_of(4, &frames);
            let mut b = bank_of(4, &frames);
            let r_temp = gaussian_sample(SeededRng::new(seed, 99), 1, 5).map(|v| v.abs().min(1.0));
            let ta = a.rtc_compress(r_temp.data(), None, 1.0).unwrap();
            let tb = b.mbc_compress().unwrap();
            assert_eq!(ta.k, tb.k);
            assert_eq!(a.slots(), b.slots());
        }
    }

    #[test]
    fn per_location_merge_mixes_sources() {
        // Row 0 merges pair 0, row 1 merges pair 1.
        let f = |r0: [f32; 2], r1: [f32; 2]| Matrix::from_rows(&[&r0, &r1]);
        let frames = [
            f([1.0, 0.0], [1.0, 0.0]),
            f([1.0, 0.0], [0.0, 1.0]),
            f([0.0, 1.0], [0.0, 1.0]),
        ];
        let mut b = bank_of(2, &frames);
        let trace = b.mbc_compress().unwrap();
        assert_eq!(trace.k, vec![0, 1]);
        assert_eq!(b.slots()[0], f([1.0, 0.0], [1.0, 0.0]));
        assert_eq!(b.slots()[1], f([0.0, 1.0], [0.0, 1.0]));
        assert_eq!(b.timestamps(), &[0, 1]);
        let mut g = bank_of(2, &frames).with_global_k(true);
        let trace = g.mbc_compress().unwrap();
        assert_eq!(trace.k[0], trace.k[1]);
    }

    #[test]
    fn tts_drops_unique_minimum() {
        let frames = random_frames(5, 4, 2, 2);
        let cfg = PerturbConfig::new(1e-4, 50, SeededRng::new(5, 0)).unwrap();
        let mut b = bank_of(3, &frames);
        let y = b
            .tts_compress(&[0.4, 0.9, -1.0, 0.3], SelectMode::Eval, &cfg)
            .unwrap();
        assert_eq!(y.indices().unwrap(), &[0, 1, 3]);
        assert_eq!(
            b.slots(),
            &[frames[0].clone(), frames[1].clone(), frames[3].clone()]
        );
        assert_eq!(b.timestamps(), &[0, 1, 3]);

        let mut s = bank_of(3, &frames);
        s.tts_compress(&[0.4, 0.9, -1.0, 0.3], SelectMode::Train, &cfg)
            .unwrap();
        for (x, y) in s.slots().iter().zip(b.slots()) {
            assert!(x.sub(y).unwrap().frobenius_norm() < 1e-5);
        }
    }

    #[test]
    fn fifo_keeps_newest() {
        let frames = random_frames(6, 8, 2, 2);
        let mut b = VisualMemoryBank::new(3).unwrap();
        for f in &frames {
            vmb_append(&mut b, f.clone()).unwrap();
            if b.over_capacity() {
                b.fifo_compress().unwrap();
            }
        }
        assert_eq!(b.slots(), &frames[5..]);
        assert_eq!(b.timestamps(), &[5, 6, 7]);
    }

    #[test]
    fn avgpool_cases() {
        let f = gaussian_sample(SeededRng::new(7, 0), 3, 2);
        assert_eq!(
            avgpool_compress(&[f.clone(), f.clone(), f.clone()]).unwrap(),
            f
        );
        let a = Matrix::from_rows(&[&[0.0, 2.0]]);
        let b = Matrix::from_rows(&[&[4.0, -2.0]]);
        assert_eq!(
            avgpool_compress(&[a, b]).unwrap(),
            Matrix::from_rows(&[&[2.0, 0.0]])
        );
        assert!(avgpool_compress(&[]).is_err());
    }

    #[test]
    fn running_mean_tracks_oracle() {
        let frames = random_frames(8, 12, 2, 3);
        let mut b = VisualMemoryBank::new(4).unwrap().with_provenance(12);
        for (t, f) in frames.iter().enumerate() {
            vmb_append(&mut b, f.clone()).unwrap();
            if b.len() > 1 {
                b.avgpool_compress().unwrap();
            }
            let oracle = avgpool_compress(&frames[..=t]).unwrap();
            assert!(b.slots()[0].sub(&oracle).unwrap().frobenius_norm() < 1e-5);
        }
        for t in 0..12 {
            assert!((b.retention(t).unwrap() - 1.0 / 12.0).abs() < 1e-5);
        }
    }

    #[test]
    fn provenance_follows_merges() {
        let frames = random_frames(9, 6, 4, 3);
        let mut b = VisualMemoryBank::new(3).unwrap().with_provenance(6);
        for f in &frames {
            vmb_append(&mut b, f.clone()).unwrap();
            if b.over_capacity() {
                b.mbc_compress().unwrap();
            }
        }
        let total: f64 = (0..6).map(|t| b.retention(t).unwrap()).sum();
        assert!((total - 3.0).abs() < 1e-5);
        // Each token is the provenance-weighted sum of original tokens.
        for (slot, prov) in b.slots().iter().zip(b.provenance().unwrap()) {
            for i in 0..4 {
                for d in 0..3 {
                    let expect: f32 = (0..6).map(|t| prov.get(i, t) * frames[t].get(i, d)).sum();
                    assert!((slot.get(i, d) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn query_bank_policies() {
        let thetas = random_frames(10, 6, 3, 2);
        let mut rtc = MemoryBank::new(3).unwrap();
        let mut mbc = MemoryBank::new(3).unwrap();
        let r_temp = [0.2, 0.4, 0.6, 0.8];
        for th in &thetas {
            let pa = qmb_append_compress(
                &mut rtc,
                th.clone(),
                QueryPolicy::Rtc {
                    r_temp: &r_temp,
                    alpha: 1.0,
                },
            )
            .unwrap();
            let pb = qmb_append_compress(&mut mbc, th.clone(), QueryPolicy::Mbc).unwrap();
            assert_eq!(pa, pb);
            assert!(rtc.len() <= 3);
        }
        assert_eq!(rtc.slots(), mbc.slots());
        assert!(qmb_append_compress(&mut rtc, Matrix::zeros(2, 2), QueryPolicy::Mbc).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in super::Strategy::ALL {
            assert_eq!(s.name().parse::<super::Strategy>().unwrap(), s);
        }
        assert!("lifo".parse::<super::Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn merges_conserve_means(seed in 0u64..1000, n in 1usize..5, alpha in 0.0f32..=1.0) {
            let frames = random_frames(seed, 5, n, 3);
            let mut b = bank_of(4, &frames);
            let r = gaussian_sample(SeededRng::new(seed, 77), 1, 5).map(|v| v.abs().min(1.0));
            let trace = b.rtc_compress(r.data(), None, alpha).unwrap();
            for (i, &k) in trace.k.iter().enumerate() {
                prop_assert!(k < 4);
                for d in 0..3 {
                    let mean = 0.5 * (frames[k].get(i, d) + frames[k + 1].get(i, d));
                    prop_assert!((b.slots()[k].get(i, d) - mean).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn more_relevance_never_raises_neighbour_scores(seed in 0u64..1000, j in 0usize..4, bump in 0.0f32..0.5) {
            let frames = random_frames(seed, 4, 2, 3);
            let refs: Vec<&Matrix> = frames.iter().collect();
            let base = gaussian_sample(SeededRng::new(seed, 5), 1, 4).map(|v| v.abs().min(0.5));
            let mut raised = base.clone();
            raised.data_mut()[j] += bump;
            let a = rtc_trace(&refs, base.data(), None, 0.0, false).unwrap();
            let b = rtc_trace(&refs, raised.data(), None, 0.0, false).unwrap();
            for t in [j.wrapping_sub(1), j] {
                if t < 3 {
                    for i in 0..2 {
                        prop_assert!(b.s.get(t, i) <= a.s.get(t, i));
                    }
                }
            }
        }
    }
}
