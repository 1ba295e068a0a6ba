//! Query-only phase: memory-assisted block search over the stage lattice.
//!
//! Each round picks a random square block and direction `q ∈ {+1, −1}`,
//! moves every pixel of the block one stage in that direction, and keeps the
//! move only if the oracle's probability for the true label drops. `−q` is
//! tried when `+q` does not help. Every block remembers its best ratio
//! `P_before / P_after`; every `s`-th round the best-remembered block is grown
//! by `Ep` pixels per side and probed instead of a random one.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantize::{self, QuantizeError, StageMatrix};
use crate::raster::Image8;
use crate::zoo::{Model, ZooError};

#[derive(Debug, Error)]
pub enum OracleError {
    /// Worth retrying: connection failures, non-200 statuses.
    #[error("oracle transport error: {0}")]
    Transport(String),
    /// Not worth retrying: the oracle answered with something unusable.
    #[error("oracle protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ZooError),
}

#[derive(Debug, Error)]
pub enum BlackboxError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("initial stages {got:?} do not match image {want:?}")]
    Shape { got: (usize, usize, u8), want: (usize, usize, u8) },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelProb {
    pub label: usize,
    pub prob: f32,
}

/// A classifier seen only through ranked label probabilities.
///
/// Images are passed as 8-bit pixels; the model sees them scaled to `[0, 1]`.
/// Results are sorted by descending probability and may be truncated.
pub trait QueryOracle: Send + Sync {
    fn classify(&self, image: &Image8) -> Result<Vec<LabelProb>, OracleError>;
}

impl<T: QueryOracle + ?Sized> QueryOracle for &T {
    fn classify(&self, image: &Image8) -> Result<Vec<LabelProb>, OracleError> {
        (**self).classify(image)
    }
}

/// Sorts descending by probability, ties by label, and keeps `top_k`.
pub fn rank(probs: &[f32], top_k: Option<usize>) -> Vec<LabelProb> {
    let mut out: Vec<LabelProb> = probs.iter().enumerate().map(|(label, &prob)| LabelProb { label, prob }).collect();
    out.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.label.cmp(&b.label)));
    if let Some(k) = top_k {
        out.truncate(k.max(1));
    }
    out
}

/// In-process oracle over a zoo model.
#[derive(Debug, Clone)]
pub struct LocalOracle {
    model: Model,
    top_k: Option<usize>,
}

impl LocalOracle {
    pub fn new(model: Model, top_k: Option<usize>) -> Self {
        Self { model, top_k }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl QueryOracle for LocalOracle {
    fn classify(&self, image: &Image8) -> Result<Vec<LabelProb>, OracleError> {
        Ok(rank(&self.model.predict(&image.to_tensor())?, self.top_k))
    }
}

/// Probability the oracle assigns to `label`; 0 when truncated away.
pub fn prob_of_label(oracle: &dyn QueryOracle, image: &Image8, label: usize) -> Result<f32, OracleError> {
    Ok(lookup(&oracle.classify(image)?, label))
}

fn lookup(ranked: &[LabelProb], label: usize) -> f32 {
    ranked.iter().find(|lp| lp.label == label).map_or(0.0, |lp| lp.prob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlackAttackConfig {
    pub iterations: usize,
    pub xi: u8,
    pub epsilon: u8,
    /// Every `enhance_step`-th round probes the best-remembered block.
    pub enhance_step: usize,
    /// Growth of a block's side per enhancement, in pixels.
    pub expand: usize,
    pub block: usize,
    pub max_queries: usize,
    pub seed: u64,
}

impl Default for BlackAttackConfig {
    fn default() -> Self {
        Self { iterations: 1000, xi: 4, epsilon: 8, enhance_step: 5, expand: 4, block: 4, max_queries: 10_000, seed: 0 }
    }
}

impl BlackAttackConfig {
    pub fn validate(&self) -> Result<(), BlackboxError> {
        let bad = |m: String| Err(BlackboxError::Config(m));
        if self.xi == 0 || self.epsilon as u32 != 2 * self.xi as u32 {
            return bad(format!("need epsilon = 2·xi > 0, got epsilon={} xi={}", self.epsilon, self.xi));
        }
        if self.enhance_step == 0 {
            return bad("enhance step must be at least 1".into());
        }
        if self.block == 0 {
            return bad("block size must be at least 1".into());
        }
        if self.max_queries == 0 {
            return bad("query budget must be at least 1".into());
        }
        Ok(())
    }
}

/// Square tiles of side `block` covering the image once, each with its own
/// current side length.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    height: usize,
    width: usize,
    block: usize,
    cols: usize,
    sides: Vec<usize>,
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Region {
    pub fn pixels(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.rows.0..self.rows.1).flat_map(move |r| (self.cols.0..self.cols.1).map(move |c| r * width + c))
    }

    pub fn area(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, block: usize) -> Self {
        let rows = height.div_ceil(block);
        let cols = width.div_ceil(block);
        Self { height, width, block, cols, sides: vec![block; rows * cols] }
    }

    pub fn len(&self) -> usize {
        self.sides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sides.is_empty()
    }

    pub fn side(&self, j: usize) -> usize {
        self.sides[j]
    }

    pub fn expand(&mut self, j: usize, by: usize) {
        self.sides[j] += by;
    }

    /// Block `j` at its current side, centred on its base tile and clipped to
    /// the image.
    pub fn region(&self, j: usize) -> Region {
        let (br, bc) = (j / self.cols * self.block, j % self.cols * self.block);
        let grow = self.sides[j] - self.block;
        let (before, after) = (grow / 2, grow - grow / 2);
        Region {
            rows: (br.saturating_sub(before), (br + self.block + after).min(self.height)),
            cols: (bc.saturating_sub(before), (bc + self.block + after).min(self.width)),
        }
    }
}

/// Best `P_before / P_after` ratio seen per block.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryList {
    scores: Vec<f32>,
}

impl MemoryList {
    pub fn new(blocks: usize) -> Self {
        Self { scores: vec![0.0; blocks] }
    }

    pub fn score(&self, j: usize) -> f32 {
        self.scores[j]
    }

    pub fn record(&mut self, j: usize, score: f32) {
        if score > self.scores[j] {
            self.scores[j] = score;
        }
    }

    pub fn reset(&mut self, j: usize) {
        self.scores[j] = 0.0;
    }

    /// Highest-scoring block with a positive score, lowest index on ties.
    pub fn best(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (j, &s) in self.scores.iter().enumerate() {
            if s > 0.0 && best.is_none_or(|b| s > self.scores[b]) {
                best = Some(j);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub block: usize,
    pub enhanced: bool,
    /// Direction kept, if any.
    pub accepted: Option<i8>,
    pub prob_before: f32,
    pub prob_after: f32,
    pub queries: usize,
}

#[derive(Debug, Clone)]
pub struct BlackAttackResult {
    pub stages: StageMatrix,
    pub queries: usize,
    pub success: bool,
    pub final_prob: f32,
    pub trajectory: Vec<StepRecord>,
}

struct Probe<'a> {
    x: &'a Image8,
    label: usize,
    oracle: &'a dyn QueryOracle,
    queries: usize,
}

impl Probe<'_> {
    fn query(&mut self, stages: &StageMatrix) -> Result<(f32, usize), BlackboxError> {
        let img = quantize::apply(self.x, stages)?;
        let ranked = self.oracle.classify(&img)?;
        self.queries += 1;
        let top = ranked.first().ok_or_else(|| OracleError::Protocol("empty label list".into()))?.label;
        Ok((lookup(&ranked, self.label), top))
    }
}

fn shifted(stages: &StageMatrix, region: &Region, q: i8, bounds: &[(i8, i8)]) -> StageMatrix {
    let mut out = stages.clone();
    for i in region.pixels(stages.width()) {
        out.set_clamped(i, stages.data()[i] as i32 + q as i32, Some(bounds[i]));
    }
    out
}

/// Refines `init` until the oracle's top label differs from `label`, the
/// round cap is hit, or the query budget runs out.
pub fn mae_ba(
    x: &Image8,
    init: &StageMatrix,
    label: usize,
    oracle: &dyn QueryOracle,
    cfg: &BlackAttackConfig,
    rng: &mut impl Rng,
) -> Result<BlackAttackResult, BlackboxError> {
    cfg.validate()?;
    let want = (x.height(), x.width(), cfg.xi);
    let got = (init.height(), init.width(), init.xi());
    if got != want {
        return Err(BlackboxError::Shape { got, want });
    }
    let bounds = quantize::feasible_bounds(x, cfg.xi);
    let mut stages = init.clone();
    stages.clamp_to(&bounds);

    let mut grid = BlockGrid::new(x.height(), x.width(), cfg.block);
    let mut memory = MemoryList::new(grid.len());
    let mut probe = Probe { x, label, oracle, queries: 0 };
    let mut trajectory = Vec::new();

    let (mut prob, mut top) = probe.query(&stages)?;
    let exhausted = |p: &Probe| p.queries >= cfg.max_queries;

    for i in 0..cfg.iterations {
        if top != label || exhausted(&probe) {
            break;
        }
        let q: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
        let mut j = rng.gen_range(0..grid.len());
        let mut enhanced = false;
        if (i + 1) % cfg.enhance_step == 0 {
            if let Some(best) = memory.best() {
                j = best;
                grid.expand(j, cfg.expand);
                memory.reset(j);
                enhanced = true;
            }
        }
        let region = grid.region(j);
        let prob_before = prob;
        let mut lowest: Option<f32> = None;
        let mut accepted = None;
        for dir in [q, -q] {
            let cand = shifted(&stages, &region, dir, &bounds);
            if cand == stages {
                continue;
            }
            if exhausted(&probe) {
                break;
            }
            let (p, t) = probe.query(&cand)?;
            lowest = Some(lowest.map_or(p, |l: f32| l.min(p)));
            if p < prob {
                stages = cand;
                prob = p;
                top = t;
                accepted = Some(dir);
                break;
            }
        }
        if let Some(low) = lowest {
            memory.record(j, prob_before / low.max(f32::MIN_POSITIVE));
        }
        trajectory.push(StepRecord {
            iteration: i,
            block: j,
            enhanced,
            accepted,
            prob_before,
            prob_after: prob,
            queries: probe.queries,
        });
    }
    Ok(BlackAttackResult { stages, queries: probe.queries, success: top != label, final_prob: prob, trajectory })
}
