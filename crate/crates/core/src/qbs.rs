//! Query-based segmentation: a strided convolutional encoder with a light pixel
//! decoder, a post-norm transformer decoder over learned object queries, shared
//! class/mask heads, Hungarian matching and the deeply supervised baseline loss.
//!
//! The stereo variant (BDFP) fuses each view's per-pixel features with the other
//! view's features warped by disparity before decoding.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autodiff::{
    bce_logit, sigmoid, softmax_in_place, Graph, Init, ParamId, ParamStore, Var,
};
use crate::error::{Error, Result};
use crate::geometry::{right_view_disparity, DisparityField, FeatureMap, WarpDirection, WarpPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Resolution of the per-pixel features relative to the image.
pub const FEATURE_STRIDE: usize = 4;
/// Image sides must be multiples of this.
pub const TOTAL_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Channels of the three stride-2 encoder stages.
    pub encoder_channels: [usize; 3],
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_cls: f64,
    /// Cross-entropy weight of the "no object" target.
    pub no_object_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 20,
            num_classes: 4,
            embed_dim: 64,
            decoder_layers: 3,
            heads: 4,
            ffn_hidden: 128,
            encoder_channels: [16, 32, 64],
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            lambda_cls: 2.0,
            no_object_weight: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1");
        }
        if self.num_queries == 0 || self.num_classes == 0 {
            return bad("num_queries and num_classes must be positive");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if self.embed_dim % 4 != 0 {
            return bad("embed_dim must be divisible by 4 for the positional encoding");
        }
        if [
            self.lambda_bce,
            self.lambda_dice,
            self.lambda_cls,
            self.no_object_weight,
        ]
        .iter()
        .any(|&w| w < 0.0)
        {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cls: self.lambda_cls,
            bce: self.lambda_bce,
            dice: self.lambda_dice,
            no_object: self.no_object_weight,
        }
    }

    /// Index of the "no object" entry in class distributions.
    pub fn no_object(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        ModelConfig::default().weights()
    }
}

/// One ground-truth instance. `class` is 1-based (`1..=C`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtInstance {
    pub class: usize,
    pub mask: Vec<bool>,
    pub identity: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthSet {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<GtInstance>,
}

impl GroundTruthSet {
    pub fn new(height: usize, width: usize, instances: Vec<GtInstance>) -> Result<Self> {
        let mut owner = vec![false; height * width];
        for inst in &instances {
            if inst.mask.len() != height * width {
                return Err(Error::Shape("ground-truth mask size".into()));
            }
            for (o, &m) in owner.iter_mut().zip(&inst.mask) {
                if m && *o {
                    return Err(Error::Data(format!(
                        "instance {} overlaps another instance",
                        inst.identity
                    )));
                }
                *o |= m;
            }
        }
        Ok(Self {
            height,
            width,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Fraction of each `stride × stride` block covered by every instance.
    pub fn coverage(&self, stride: usize) -> Result<Vec<Vec<f64>>> {
        if stride == 0 || self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Shape(format!(
                "{}x{} not divisible by {stride}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let inv = 1.0 / (stride * stride) as f64;
        Ok(self
            .instances
            .iter()
            .map(|inst| {
                let mut c = vec![0.0; h * w];
                for (i, &m) in inst.mask.iter().enumerate() {
                    if m {
                        c[(i / self.width / stride) * w + (i % self.width) / stride] += inv;
                    }
                }
                c
            })
            .collect())
    }
}

/// Frame-step output for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet<T> {
    /// `[N, C+1]` class distributions; the last column is "no object".
    pub probs: Tensor<T>,
    /// `[N, D]` final-layer query embeddings.
    pub embeddings: Tensor<T>,
    /// `[N, H*W]` mask logits.
    pub masks: Tensor<T>,
    pub height: usize,
    pub width: usize,
    /// Embeddings after each decoder layer (the last equals `embeddings`).
    pub layer_embeddings: Vec<Tensor<T>>,
}

impl<T: Scalar> PredictionSet<T> {
    pub fn num_queries(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Index of the most likely label of each query (`C` = no object).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.num_queries())
            .map(|n| argmax(self.probs.row(n)))
            .collect()
    }

    pub fn binary_mask(&self, n: usize) -> Vec<bool> {
        self.masks.row(n).iter().map(|&v| v > T::zero()).collect()
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Injective ground-truth → query assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `query[k]` is the query matched to ground-truth record `k`.
    pub query: Vec<usize>,
    pub cost: f64,
}

impl MatchResult {
    /// Target label per query: matched class index (0-based) or `no_object`.
    pub fn query_targets(&self, gt: &GroundTruthSet, n: usize, no_object: usize) -> Vec<usize> {
        let mut t = vec![no_object; n];
        for (k, &q) in self.query.iter().enumerate() {
            t[q] = gt.instances[k].class - 1;
        }
        t
    }
}

/// Pair cost `λ_cls (1 − p(c)) + λ_bce BCE + λ_dice Dice` as a `[Ñ][N]` matrix.
pub fn match_cost_matrix<T: Scalar>(
    probs: &Tensor<T>,
    mask_logits: &Tensor<T>,
    gt: &GroundTruthSet,
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    let targets: Vec<Vec<f64>> = gt
        .instances
        .iter()
        .map(|i| i.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let classes: Vec<usize> = gt.instances.iter().map(|i| i.class).collect();
    soft_cost_matrix(probs, mask_logits, &classes, &targets, w)
}

/// Cost matrix against soft per-pixel targets in `[0, 1]`; `classes` are 1-based.
fn soft_cost_matrix<T: Scalar>(
    probs: &Tensor<T>,
    mask_logits: &Tensor<T>,
    classes: &[usize],
    targets: &[Vec<f64>],
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    let n = probs.shape()[0];
    let hw = mask_logits.shape()[1];
    let mut sig = vec![0.0; n * hw];
    // Per-query sums against an all-background target; `BCE(x, y) = BCE(x, 0) − x·y`.
    let mut bce0 = vec![0.0; n];
    let mut p_sum = vec![0.0; n];
    for q in 0..n {
        for (j, &v) in mask_logits.row(q).iter().enumerate() {
            let x = v.to_f64_lossy();
            let s = sigmoid(x);
            sig[q * hw + j] = s;
            bce0[q] += bce_logit(x, 0.0);
            p_sum[q] += s;
        }
    }
    classes
        .iter()
        .zip(targets)
        .map(|(&class, tgt)| {
            let fg: Vec<(usize, f64)> = tgt
                .iter()
                .copied()
                .enumerate()
                .filter(|&(_, y)| y > 0.0)
                .collect();
            let g_sum: f64 = fg.iter().map(|f| f.1).sum();
            (0..n)
                .map(|q| {
                    let p_cls = probs.row(q)[class - 1].to_f64_lossy();
                    let logits = mask_logits.row(q);
                    let mut bce = bce0[q];
                    let mut inter = 0.0;
                    for &(j, y) in &fg {
                        bce -= y * logits[j].to_f64_lossy();
                        inter += y * sig[q * hw + j];
                    }
                    let dice = 1.0 - 2.0 * inter / (p_sum[q] + g_sum + 1e-8);
                    w.cls * (1.0 - p_cls) + w.bce * bce / hw as f64 + w.dice * dice
                })
                .collect()
        })
        .collect()
}

/// Minimum-cost injective assignment of rows into columns (rows ≤ columns).
/// Among optimal assignments, each row in turn takes the lowest column index.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let rows = cost.len();
    if rows == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let cols = cost[0].len();
    if rows > cols {
        return Err(Error::Data(format!(
            "{rows} ground-truth records exceed {cols} queries"
        )));
    }
    if cost
        .iter()
        .any(|r| r.len() != cols || r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Argument(
            "cost matrix must be rectangular and finite".into(),
        ));
    }
    let best = pinned_optimum(cost, &vec![None; rows]);
    let tol = 1e-9 * best.abs().max(1.0);
    let mut fixed: Vec<Option<usize>> = vec![None; rows];
    for r in 0..rows {
        for c in 0..cols {
            if fixed.contains(&Some(c)) {
                continue;
            }
            fixed[r] = Some(c);
            if pinned_optimum(cost, &fixed) <= best + tol {
                break;
            }
            fixed[r] = None;
        }
    }
    let assign: Vec<usize> = fixed
        .iter()
        .map(|f| f.expect("every row assigned"))
        .collect();
    let total = assign.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    Ok((assign, total))
}

/// Optimal cost with some rows pinned to columns; the rest solved on the reduced matrix.
fn pinned_optimum(cost: &[Vec<f64>], fixed: &[Option<usize>]) -> f64 {
    let free_rows: Vec<usize> = (0..cost.len()).filter(|&r| fixed[r].is_none()).collect();
    let free_cols: Vec<usize> = (0..cost[0].len())
        .filter(|c| !fixed.contains(&Some(*c)))
        .collect();
    let pinned: f64 = fixed
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost[r][c]))
        .sum();
    if free_rows.is_empty() {
        return pinned;
    }
    let sub: Vec<Vec<f64>> = free_rows
        .iter()
        .map(|&r| free_cols.iter().map(|&c| cost[r][c]).collect())
        .collect();
    pinned + potentials_assignment(&sub).1
}

/// Shortest augmenting path with row/column potentials (rows ≤ columns).
fn potentials_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    let m = cost[0].len();
    let at = |r: usize, c: usize| cost[r][c];
    // 1-based arrays as in the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(r, &c)| at(r, c)).sum();
    (assign, total)
}

pub fn hungarian_match<T: Scalar>(
    pred: &PredictionSet<T>,
    gt: &GroundTruthSet,
    w: &LossWeights,
) -> Result<MatchResult> {
    match_from_values(&pred.probs, &pred.masks, gt, w)
}

pub fn match_from_values<T: Scalar>(
    probs: &Tensor<T>,
    masks: &Tensor<T>,
    gt: &GroundTruthSet,
    w: &LossWeights,
) -> Result<MatchResult> {
    if gt.len() > probs.shape()[0] {
        return Err(Error::Data(format!(
            "{} ground-truth records exceed {} queries",
            gt.len(),
            probs.shape()[0]
        )));
    }
    let cost = match_cost_matrix(probs, masks, gt, w);
    let (query, cost) = solve_assignment(&cost)?;
    Ok(MatchResult { query, cost })
}

/// Matching on masks given at `1/stride` resolution against block-coverage targets.
/// Equals the full-resolution costs of the nearest-neighbour upsampled masks.
pub fn match_low_res<T: Scalar>(
    probs: &Tensor<T>,
    low_masks: &Tensor<T>,
    gt: &GroundTruthSet,
    stride: usize,
    w: &LossWeights,
) -> Result<MatchResult> {
    if gt.len() > probs.shape()[0] {
        return Err(Error::Data(format!(
            "{} ground-truth records exceed {} queries",
            gt.len(),
            probs.shape()[0]
        )));
    }
    let targets = gt.coverage(stride)?;
    if low_masks.shape()[1] * stride * stride != gt.height * gt.width {
        return Err(Error::Shape(
            "low-resolution masks do not tile the ground truth".into(),
        ));
    }
    let classes: Vec<usize> = gt.instances.iter().map(|i| i.class).collect();
    let cost = soft_cost_matrix(probs, low_masks, &classes, &targets, w);
    let (query, cost) = solve_assignment(&cost)?;
    Ok(MatchResult { query, cost })
}

/// Forbids every pairing that conflicts with a pinned `record -> query` entry, so the
/// optimal assignment keeps the pins and matches the remaining records freely.
fn pin_costs(cost: &mut [Vec<f64>], pins: &[Option<usize>]) {
    let forbidden = 1e12;
    for (k, pin) in pins.iter().enumerate() {
        let Some(q) = *pin else { continue };
        for (r, row) in cost.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                if (r == k) != (c == q) {
                    *v = forbidden;
                }
            }
        }
    }
}

/// Per-layer matching where ground-truth record `k` is held to query `pins[k]` when set.
/// Pins must be distinct queries.
pub fn match_layers_pinned<T: Scalar>(
    g: &Graph<T>,
    out: &ViewOutput,
    gt: &GroundTruthSet,
    w: &LossWeights,
    low_res: bool,
    pins: &[Option<usize>],
) -> Result<Vec<MatchResult>> {
    if pins.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} pins for {} ground-truth records",
            pins.len(),
            gt.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if !pins.iter().flatten().all(|q| seen.insert(*q)) {
        return Err(Error::Argument("pinned queries must be distinct".into()));
    }
    out.layers
        .iter()
        .map(|l| {
            let mut probs = g.value(l.logits).clone();
            let (n, cols) = probs.matrix_dims();
            if gt.len() > n {
                return Err(Error::Data(format!(
                    "{} ground-truth records exceed {n} queries",
                    gt.len()
                )));
            }
            if pins.iter().flatten().any(|&q| q >= n) {
                return Err(Error::Argument(format!(
                    "pinned query out of range for {n} queries"
                )));
            }
            probs.data_mut().chunks_mut(cols).for_each(softmax_in_place);
            let mut cost = if low_res {
                let targets = gt.coverage(out.mask_stride)?;
                let low = g.value(l.masks_low);
                if low.shape()[1] * out.mask_stride * out.mask_stride != gt.height * gt.width {
                    return Err(Error::Shape(
                        "low-resolution masks do not tile the ground truth".into(),
                    ));
                }
                let classes: Vec<usize> = gt.instances.iter().map(|i| i.class).collect();
                soft_cost_matrix(&probs, low, &classes, &targets, w)
            } else {
                match_cost_matrix(&probs, g.value(l.masks), gt, w)
            };
            pin_costs(&mut cost, pins);
            let (query, cost) = solve_assignment(&cost)?;
            Ok(MatchResult { query, cost })
        })
        .collect()
}

/// Values of the three loss terms (already averaged over decoder layers).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Baseline loss for one decoder layer. `logits: [N, C+1]`, `masks: [N, H*W]`.
pub fn loss_layer<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    masks: Var,
    gt: &GroundTruthSet,
    m: &MatchResult,
    w: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let (n, classes) = g.value(logits).matrix_dims();
    let no_object = classes - 1;
    let targets = m.query_targets(gt, n, no_object);
    let cw: Vec<T> = targets
        .iter()
        .map(|&t| {
            if t == no_object {
                T::c(w.no_object)
            } else {
                T::one()
            }
        })
        .collect();
    let l_cls = g.cross_entropy(logits, &targets, &cw)?;
    let hw = g.value(masks).matrix_dims().1;
    let mut tgt = Vec::with_capacity(m.query.len() * hw);
    for inst in &gt.instances {
        tgt.extend(
            inst.mask
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() }),
        );
    }
    mask_and_class_loss(g, masks, l_cls, tgt, m, w)
}

/// [`loss_layer`] on `1/stride`-resolution masks with block-coverage targets; equal to
/// the full-resolution loss of the nearest-neighbour upsampled masks.
pub fn loss_layer_low_res<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    low_masks: Var,
    gt: &GroundTruthSet,
    stride: usize,
    m: &MatchResult,
    w: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let (n, classes) = g.value(logits).matrix_dims();
    let no_object = classes - 1;
    let targets = m.query_targets(gt, n, no_object);
    let cw: Vec<T> = targets
        .iter()
        .map(|&t| {
            if t == no_object {
                T::c(w.no_object)
            } else {
                T::one()
            }
        })
        .collect();
    let l_cls = g.cross_entropy(logits, &targets, &cw)?;
    let tgt: Vec<T> = gt
        .coverage(stride)?
        .into_iter()
        .flatten()
        .map(T::c)
        .collect();
    if tgt.len() != m.query.len() * g.value(low_masks).matrix_dims().1 {
        return Err(Error::Shape(
            "low-resolution masks do not tile the ground truth".into(),
        ));
    }
    mask_and_class_loss(g, low_masks, l_cls, tgt, m, w)
}

fn mask_and_class_loss<T: Scalar>(
    g: &mut Graph<T>,
    masks: Var,
    l_cls: Var,
    tgt: Vec<T>,
    m: &MatchResult,
    w: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let mut comps = LossComponents {
        cls: g.scalar_value(l_cls).to_f64_lossy(),
        ..Default::default()
    };
    let mut total = g.scale(l_cls, T::c(w.cls));
    if !m.query.is_empty() {
        let picked = g.gather_rows(masks, &m.query)?;
        let tgt = Arc::new(tgt);
        let bce = g.bce_with_logits_rows(picked, tgt.clone())?;
        let bce = g.sum(bce);
        let dice = g.dice_rows(picked, tgt)?;
        let dice = g.sum(dice);
        comps.bce = g.scalar_value(bce).to_f64_lossy();
        comps.dice = g.scalar_value(dice).to_f64_lossy();
        let b = g.scale(bce, T::c(w.bce));
        let d = g.scale(dice, T::c(w.dice));
        total = g.add(total, b)?;
        total = g.add(total, d)?;
    }
    comps.total = g.scalar_value(total).to_f64_lossy();
    Ok((total, comps))
}

/// Deeply supervised baseline loss: one match per layer, averaged over layers.
pub fn loss_baseline<T: Scalar>(
    g: &mut Graph<T>,
    out: &ViewOutput,
    gt: &GroundTruthSet,
    matches: &[MatchResult],
    w: &LossWeights,
) -> Result<(Var, LossComponents)> {
    loss_baseline_at(g, out, gt, matches, w, false)
}

/// [`loss_baseline`], optionally evaluated on feature-resolution masks against
/// block-coverage targets (a cheaper approximation of the upsampled comparison).
pub fn loss_baseline_at<T: Scalar>(
    g: &mut Graph<T>,
    out: &ViewOutput,
    gt: &GroundTruthSet,
    matches: &[MatchResult],
    w: &LossWeights,
    low_res: bool,
) -> Result<(Var, LossComponents)> {
    if matches.len() != out.layers.len() {
        return Err(Error::Argument(format!(
            "{} matches for {} layers",
            matches.len(),
            out.layers.len()
        )));
    }
    let mut acc = LossComponents::default();
    let mut terms = Vec::with_capacity(matches.len());
    for (layer, m) in out.layers.iter().zip(matches) {
        let (l, c) = if low_res {
            loss_layer_low_res(g, layer.logits, layer.masks_low, gt, out.mask_stride, m, w)?
        } else {
            loss_layer(g, layer.logits, layer.masks, gt, m, w)?
        };
        acc.cls += c.cls;
        acc.bce += c.bce;
        acc.dice += c.dice;
        terms.push(l);
    }
    let k = matches.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let total = g.scale(total, T::one() / T::c(k));
    acc.cls /= k;
    acc.bce /= k;
    acc.dice /= k;
    acc.total = g.scalar_value(total).to_f64_lossy();
    Ok((total, acc))
}

/// Match every decoder layer of a view against its ground truth.
pub fn match_layers<T: Scalar>(
    g: &Graph<T>,
    out: &ViewOutput,
    gt: &GroundTruthSet,
    w: &LossWeights,
) -> Result<Vec<MatchResult>> {
    match_layers_at(g, out, gt, w, false)
}

/// [`match_layers`], optionally on feature-resolution masks.
pub fn match_layers_at<T: Scalar>(
    g: &Graph<T>,
    out: &ViewOutput,
    gt: &GroundTruthSet,
    w: &LossWeights,
    low_res: bool,
) -> Result<Vec<MatchResult>> {
    out.layers
        .iter()
        .map(|l| {
            let mut probs = g.value(l.logits).clone();
            let cols = probs.matrix_dims().1;
            probs.data_mut().chunks_mut(cols).for_each(softmax_in_place);
            if low_res {
                match_low_res(&probs, g.value(l.masks_low), gt, out.mask_stride, w)
            } else {
                match_from_values(&probs, g.value(l.masks), gt, w)
            }
        })
        .collect()
}

/// Source of per-frame disparity for the left view.
pub trait DisparityProvider<T: Scalar> {
    fn disparity(&self, left: &FeatureMap<T>, right: &FeatureMap<T>) -> Result<DisparityField<T>>;
}

/// Provider returning a precomputed field (synthetic ground truth or pseudo-stereo scale).
#[derive(Debug, Clone)]
pub struct FixedDisparity<T>(pub DisparityField<T>);

impl<T: Scalar> DisparityProvider<T> for FixedDisparity<T> {
    fn disparity(&self, left: &FeatureMap<T>, _right: &FeatureMap<T>) -> Result<DisparityField<T>> {
        if self.0.height != left.height || self.0.width != left.width {
            return Err(Error::Provider(format!(
                "disparity {}x{} for image {}x{}",
                self.0.height, self.0.width, left.height, left.width
            )));
        }
        Ok(self.0.clone())
    }
}

/// Warp plans at feature resolution for both fusion directions.
#[derive(Debug, Clone)]
pub struct StereoPlans<T> {
    /// Right features into the left view.
    pub to_left: Arc<WarpPlan<T>>,
    /// Left features into the right view.
    pub to_right: Arc<WarpPlan<T>>,
}

impl<T: Scalar> StereoPlans<T> {
    pub fn from_disparity(full: &DisparityField<T>) -> Result<Self> {
        let left = full.downsample(FEATURE_STRIDE)?;
        let right = right_view_disparity(full)?.downsample(FEATURE_STRIDE)?;
        let all = vec![true; left.height * left.width];
        Ok(Self {
            to_left: Arc::new(WarpPlan::new(&left, &all, WarpDirection::RightToLeft)?),
            to_right: Arc::new(WarpPlan::new(&right, &all, WarpDirection::LeftToRight)?),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub embeddings: Var,
    pub logits: Var,
    /// `[N, H*W]` full-resolution mask logits.
    pub masks: Var,
    /// `[N, (H/s)*(W/s)]` mask logits before upsampling by `s = mask_stride`.
    pub masks_low: Var,
}

#[derive(Debug, Clone)]
pub struct ViewOutput {
    pub layers: Vec<LayerOutput>,
    pub height: usize,
    pub width: usize,
    pub mask_stride: usize,
}

impl ViewOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one decoder layer")
    }

    pub fn prediction_set<T: Scalar>(&self, g: &Graph<T>) -> PredictionSet<T> {
        let last = self.last();
        let mut probs = g.value(last.logits).clone();
        let cols = probs.matrix_dims().1;
        probs.data_mut().chunks_mut(cols).for_each(softmax_in_place);
        PredictionSet {
            probs,
            embeddings: g.value(last.embeddings).clone(),
            masks: g.value(last.masks).clone(),
            height: self.height,
            width: self.width,
            layer_embeddings: self
                .layers
                .iter()
                .map(|l| g.value(l.embeddings).clone())
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BdfpOutput {
    pub left: ViewOutput,
    pub right: ViewOutput,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub cross: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Parameter layout of the segmentation network. Parameters live in a shared
/// [`ParamStore`] under the `qbs.` prefix.
#[derive(Debug, Clone)]
pub struct QbsModel {
    pub cfg: ModelConfig,
    pub stages: [Conv2d; 3],
    pub lateral: Conv2d,
    pub output: Conv2d,
    pub pos_proj: Linear,
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub class_head: Linear,
    pub mask_embed: Linear,
    pub mask_bias: ParamId,
}

impl QbsModel {
    pub fn new<T: Scalar>(
        cfg: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let [c1, c2, c3] = cfg.encoder_channels;
        let stages = [
            Conv2d::new(store, "qbs.enc1", 3, c1, 3, 2, rng),
            Conv2d::new(store, "qbs.enc2", c1, c2, 3, 2, rng),
            Conv2d::new(store, "qbs.enc3", c2, c3, 3, 2, rng),
        ];
        let lateral = Conv2d::new(store, "qbs.lateral", c2, c3, 1, 1, rng);
        let output = Conv2d::new(store, "qbs.pixel_out", c3, d, 1, 1, rng);
        let pos_proj = Linear::new(store, "qbs.pos_proj", d, d, false, rng);
        let queries = store.register(
            "qbs.queries",
            &[cfg.num_queries, d],
            Init::Normal { std: 1.0 },
            rng,
        );
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let n = format!("qbs.dec{l}");
                DecoderLayer {
                    cross: MultiHeadAttention::new(
                        store,
                        &format!("{n}.cross"),
                        d,
                        cfg.heads,
                        false,
                        rng,
                    ),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d, rng),
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{n}.self"),
                        d,
                        cfg.heads,
                        true,
                        rng,
                    ),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d, rng),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, cfg.ffn_hidden, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d, rng),
                }
            })
            .collect();
        let class_head = Linear::new(store, "qbs.class_head", d, cfg.num_classes + 1, true, rng);
        let mask_embed = Linear::new(store, "qbs.mask_embed", d, d, false, rng);
        let mask_bias = store.register("qbs.mask_bias", &[1], Init::Zeros, rng);
        Ok(Self {
            cfg,
            stages,
            lateral,
            output,
            pos_proj,
            queries,
            layers,
            class_head,
            mask_embed,
            mask_bias,
        })
    }

    pub fn learned_queries<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Var {
        g.param(store, self.queries)
    }

    /// `[3, H, W]` image → `[D, H/4, W/4]` per-pixel features.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Argument(format!(
                "expected a [3,H,W] image, got {s:?}"
            )));
        }
        if s[1] % TOTAL_STRIDE != 0 || s[2] % TOTAL_STRIDE != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Argument(format!(
                "image {}x{} not divisible by stride {TOTAL_STRIDE}",
                s[1], s[2]
            )));
        }
        let x1 = self.stages[0].forward(g, store, image)?;
        let x1 = g.gelu(x1);
        let x2 = self.stages[1].forward(g, store, x1)?;
        let x2 = g.gelu(x2);
        let x3 = self.stages[2].forward(g, store, x2)?;
        let x3 = g.gelu(x3);
        let up = g.upsample(x3, 2)?;
        let lat = self.lateral.forward(g, store, x2)?;
        let merged = g.add(up, lat)?;
        let merged = g.gelu(merged);
        self.output.forward(g, store, merged)
    }

    /// `[D, h, w]` features → `[h*w, D]` attention memory with positional terms.
    pub fn pixel_memory<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feat: Var,
    ) -> Result<Var> {
        let s = g.shape(feat).to_vec();
        let (d, h, w) = (s[0], s[1], s[2]);
        let flat = g.reshape(feat, &[d, h * w])?;
        let mem = g.transpose(flat);
        let pe = g.constant(positional_encoding(h, w, d));
        let pe = self.pos_proj.forward(g, store, pe)?;
        g.add(mem, pe)
    }

    /// Transformer decoder; returns the embeddings after every layer.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        memory: Var,
        queries: Var,
        key_mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Vec<Var>> {
        let d = self.cfg.embed_dim;
        if g.shape(queries).len() != 2 || g.shape(queries)[1] != d || g.shape(memory)[1] != d {
            return Err(Error::Argument(format!(
                "queries {:?} / memory {:?} incompatible with embed_dim {d}",
                g.shape(queries),
                g.shape(memory)
            )));
        }
        let mut x = queries;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer
                .cross
                .forward(g, store, x, memory, memory, key_mask.clone())?;
            x = g.add(x, a)?;
            x = layer.norm1.forward(g, store, x)?;
            let a = layer.self_attn.forward(g, store, x, x, x, None)?;
            x = g.add(x, a)?;
            x = layer.norm2.forward(g, store, x)?;
            let f = layer.ffn.forward(g, store, x)?;
            x = g.add(x, f)?;
            x = layer.norm3.forward(g, store, x)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Class logits `[N, C+1]` and full-resolution mask logits `[N, H*W]`.
    pub fn predict_heads<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embeddings: Var,
        memory: Var,
        feat_hw: (usize, usize),
    ) -> Result<(Var, Var)> {
        let (logits, _, m) = self.predict_heads_full(g, store, embeddings, memory, feat_hw)?;
        Ok((logits, m))
    }

    /// Class logits, feature-resolution mask logits and full-resolution mask logits.
    pub fn predict_heads_full<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embeddings: Var,
        memory: Var,
        feat_hw: (usize, usize),
    ) -> Result<(Var, Var, Var)> {
        let logits = self.class_head.forward(g, store, embeddings)?;
        let me = self.mask_embed.forward(g, store, embeddings)?;
        let m = g.matmul_t(me, false, memory, true)?;
        let n = g.shape(m)[0];
        let (h, w) = feat_hw;
        let b = g.param(store, self.mask_bias);
        let low = g.add_scalar(m, b)?;
        let m = g.reshape(low, &[n, h, w])?;
        let m = g.upsample(m, FEATURE_STRIDE)?;
        let m = g.reshape(m, &[n, h * w * FEATURE_STRIDE * FEATURE_STRIDE])?;
        Ok((logits, low, m))
    }

    /// Decode one view from its attention memory.
    pub fn decode_view<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        memory: Var,
        queries: Var,
        feat_hw: (usize, usize),
    ) -> Result<ViewOutput> {
        let embs = self.decode(g, store, memory, queries, None)?;
        let mut layers = Vec::with_capacity(embs.len());
        for e in embs {
            let (logits, masks_low, masks) =
                self.predict_heads_full(g, store, e, memory, feat_hw)?;
            layers.push(LayerOutput {
                embeddings: e,
                logits,
                masks,
                masks_low,
            });
        }
        Ok(ViewOutput {
            layers,
            height: feat_hw.0 * FEATURE_STRIDE,
            width: feat_hw.1 * FEATURE_STRIDE,
            mask_stride: FEATURE_STRIDE,
        })
    }

    /// Monocular frame step (no feature propagation).
    pub fn forward_mono<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        queries: Var,
    ) -> Result<ViewOutput> {
        let f = self.encode(g, store, image)?;
        let hw = (g.shape(f)[1], g.shape(f)[2]);
        let mem = self.pixel_memory(g, store, f)?;
        self.decode_view(g, store, mem, queries, hw)
    }

    /// `F_a + cos(F_a, warp(F_b)) · warp(F_b)`.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        own: Var,
        other: Var,
        plan: &Arc<WarpPlan<T>>,
    ) -> Result<Var> {
        let warped = g.warp(other, plan.clone())?;
        let w = g.cosine_weight(own, warped, &plan.valid())?;
        let s = g.shape(own).to_vec();
        let w = g.reshape(w, &[s[1] * s[2]])?;
        let contrib = g.mul_channels(warped, w)?;
        g.add(own, contrib)
    }

    /// Attention memories of both views after disparity-guided fusion.
    pub fn stereo_memories<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        left: Var,
        right: Var,
        plans: &StereoPlans<T>,
    ) -> Result<(Var, Var, (usize, usize))> {
        let fl = self.encode(g, store, left)?;
        let fr = self.encode(g, store, right)?;
        let hw = (g.shape(fl)[1], g.shape(fl)[2]);
        let dl = self.fuse(g, fl, fr, &plans.to_left)?;
        let dr = self.fuse(g, fr, fl, &plans.to_right)?;
        let ml = self.pixel_memory(g, store, dl)?;
        let mr = self.pixel_memory(g, store, dr)?;
        Ok((ml, mr, hw))
    }

    /// BDFP frame step: both views share `queries`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_bdfp<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        left: &FeatureMap<T>,
        right: &FeatureMap<T>,
        queries: Var,
        provider: &dyn DisparityProvider<T>,
    ) -> Result<BdfpOutput> {
        let disparity = provider.disparity(left, right)?;
        let plans = StereoPlans::from_disparity(&disparity)?;
        let l = g.constant(image_tensor(left)?);
        let r = g.constant(image_tensor(right)?);
        let (ml, mr, hw) = self.stereo_memories(g, store, l, r, &plans)?;
        Ok(BdfpOutput {
            left: self.decode_view(g, store, ml, queries, hw)?,
            right: self.decode_view(g, store, mr, queries, hw)?,
        })
    }
}

/// `[3, H, W]` tensor of an image feature map.
pub fn image_tensor<T: Scalar>(img: &FeatureMap<T>) -> Result<Tensor<T>> {
    Tensor::new(vec![img.channels, img.height, img.width], img.data.clone())
}

/// Fixed 2-D sinusoidal encoding `[h*w, d]`: the first half encodes rows, the second columns.
pub fn positional_encoding<T: Scalar>(h: usize, w: usize, d: usize) -> Tensor<T> {
    let quarter = d / 4;
    Tensor::from_fn(vec![h * w, d], |i| {
        let (p, c) = (i / d, i % d);
        let (pos, c) = if c < d / 2 {
            (p / w, c)
        } else {
            (p % w, c - d / 2)
        };
        let k = c / 2;
        let freq = 1.0 / 100f64.powf(k as f64 / quarter.max(1) as f64);
        let a = pos as f64 * freq;
        T::c(if c % 2 == 0 { a.sin() } else { a.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{check_gradients, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_queries: 3,
            num_classes: 2,
            embed_dim: 8,
            decoder_layers: 2,
            heads: 2,
            ffn_hidden: 8,
            encoder_channels: [4, 4, 8],
            ..Default::default()
        }
    }

    fn model(cfg: ModelConfig, seed: u64) -> (QbsModel, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let m = QbsModel::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (m, store)
    }

    fn image(h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(3, h, w, (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn encoder_shape_and_errors() {
        let cfg = ModelConfig {
            embed_dim: 32,
            ..tiny_cfg()
        };
        let (m, store) = model(cfg, 0);
        let mut g = Graph::new();
        let x = g.constant(image_tensor(&image(64, 64, 1)).unwrap());
        let f = m.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(f), &[32, 16, 16]);
        let bad = g.constant(image_tensor(&image(12, 16, 1)).unwrap());
        assert!(matches!(
            m.encode(&mut g, &store, bad),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_input_gives_spatially_constant_features() {
        let (m, store) = model(tiny_cfg(), 3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 16, 24]));
        let f = m.encode(&mut g, &store, x).unwrap();
        let v = g.value(f);
        let p = 4 * 6;
        for c in 0..8 {
            let plane = &v.data()[c * p..(c + 1) * p];
            assert!(plane.iter().all(|&a| (a - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn query_permutation_equivariance() {
        let (m, store) = model(tiny_cfg(), 4);
        let mut g = Graph::new();
        let mem = g.constant(Tensor::from_fn(vec![6, 8], |i| {
            ((i * 7) % 11) as f64 / 11.0
        }));
        let q = g.param(&store, m.queries);
        let perm = [2, 0, 1];
        let qp = g.gather_rows(q, &perm).unwrap();
        let a = m.decode(&mut g, &store, mem, q, None).unwrap();
        let b = m.decode(&mut g, &store, mem, qp, None).unwrap();
        assert_eq!(a.len(), 2);
        let (ea, eb) = (g.value(a[1]).clone(), g.value(b[1]).clone());
        for (k, &p) in perm.iter().enumerate() {
            for (x, y) in eb.row(k).iter().zip(ea.row(p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_cross_attention_equals_zero_memory() {
        let (m, store) = model(tiny_cfg(), 5);
        let mut g = Graph::new();
        let mem = g.constant(Tensor::from_fn(vec![6, 8], |i| (i as f64).sin()));
        let zeros = g.constant(Tensor::zeros(vec![6, 8]));
        let q = g.param(&store, m.queries);
        let a = m
            .decode(&mut g, &store, mem, q, Some(Arc::new(vec![false; 6])))
            .unwrap();
        let b = m.decode(&mut g, &store, zeros, q, None).unwrap();
        for (x, y) in g.value(a[1]).data().iter().zip(g.value(b[1]).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_normalize_and_zero_projection_gives_bias() {
        let (m, mut store) = model(tiny_cfg(), 6);
        store
            .get_mut(m.mask_embed.w)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        store.get_mut(m.mask_bias).data_mut()[0] = 0.75;
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_fn(vec![3, 8], |i| i as f64 * 0.1));
        let mem = g.constant(Tensor::from_fn(vec![4, 8], |i| i as f64 * 0.05));
        let (logits, masks) = m.predict_heads(&mut g, &store, e, mem, (2, 2)).unwrap();
        assert!(g
            .value(masks)
            .data()
            .iter()
            .all(|&v| (v - 0.75).abs() < 1e-12));
        assert_eq!(g.shape(masks), &[3, 64]);
        let mut p = g.value(logits).clone();
        p.data_mut().chunks_mut(3).for_each(softmax_in_place);
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn doubling_embedding_keeps_argmax_without_bias() {
        let (m, mut store) = model(tiny_cfg(), 7);
        let b = m.class_head.b.unwrap();
        store
            .get_mut(b)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_fn(vec![3, 8], |i| ((i * 5) % 7) as f64 - 3.0));
        let e2 = g.scale(e, 2.0);
        let l1 = m.class_head.forward(&mut g, &store, e).unwrap();
        let l2 = m.class_head.forward(&mut g, &store, e2).unwrap();
        for r in 0..3 {
            assert_eq!(argmax(g.value(l1).row(r)), argmax(g.value(l2).row(r)));
            for (a, b) in g.value(l1).row(r).iter().zip(g.value(l2).row(r)) {
                assert!((2.0 * a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assignment_examples() {
        let (a, c) = solve_assignment(&[vec![0., 1.], vec![1., 0.]]).unwrap();
        assert_eq!((a, c), (vec![0, 1], 0.0));
        let (a, c) = solve_assignment(&[vec![1., 2.], vec![2., 1.]]).unwrap();
        assert_eq!((a, c), (vec![0, 1], 2.0));
        let (a, _) = solve_assignment(&[vec![1., 1., 1.]]).unwrap();
        assert_eq!(a, vec![0]);
        assert!(matches!(
            solve_assignment(&[vec![1.], vec![2.]]),
            Err(Error::Data(_))
        ));
        assert_eq!(solve_assignment(&[]).unwrap(), (vec![], 0.0));
    }

    fn gt_two_px(h: usize, w: usize) -> GroundTruthSet {
        let mut mask = vec![false; h * w];
        mask[0] = true;
        mask[1] = true;
        GroundTruthSet::new(
            h,
            w,
            vec![GtInstance {
                class: 1,
                mask,
                identity: 1,
            }],
        )
        .unwrap()
    }

    #[test]
    fn loss_worked_examples() {
        let w = LossWeights {
            cls: 2.0,
            ..Default::default()
        };
        // One query, p(c)=0.5 over {c, ∅}, exact (saturated) mask.
        let gt = gt_two_px(1, 4);
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let masks = g.constant(Tensor::new(vec![1, 4], vec![60., 60., -60., -60.]).unwrap());
        let m = MatchResult {
            query: vec![0],
            cost: 0.0,
        };
        let (l, _) = loss_layer(&mut g, logits, masks, &gt, &m, &w).unwrap();
        assert!((g.scalar_value(l) - 2.0 * 2f64.ln()).abs() < 1e-5);

        // Perfect prediction: zero loss.
        let logits = g.constant(Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap());
        let (l, _) = loss_layer(&mut g, logits, masks, &gt, &m, &w).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-6);

        // Dice: P = 4 px, G = 4 px, overlap 2.
        let mut gm = vec![false; 8];
        gm[..4].iter_mut().for_each(|v| *v = true);
        let gt = GroundTruthSet::new(
            1,
            8,
            vec![GtInstance {
                class: 1,
                mask: gm,
                identity: 1,
            }],
        )
        .unwrap();
        let pm = g.constant(
            Tensor::new(vec![1, 8], vec![-60., -60., 60., 60., 60., 60., -60., -60.]).unwrap(),
        );
        let d = g
            .dice_rows(
                pm,
                Arc::new(
                    gt.instances[0]
                        .mask
                        .iter()
                        .map(|&b| b as u8 as f64)
                        .collect(),
                ),
            )
            .unwrap();
        assert!((g.value(d).data()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let (m, store) = model(cfg.clone(), 11);
        let img = image(8, 8, 2);
        let mut mask = vec![false; 64];
        (0..20).for_each(|i| mask[i] = true);
        let gt = GroundTruthSet::new(
            8,
            8,
            vec![GtInstance {
                class: 2,
                mask,
                identity: 1,
            }],
        )
        .unwrap();
        let w = cfg.weights();
        let matches = {
            let mut g = Graph::new();
            let x = g.constant(image_tensor(&img).unwrap());
            let q = m.learned_queries(&mut g, &store);
            let out = m.forward_mono(&mut g, &store, x, q).unwrap();
            match_layers(&g, &out, &gt, &w).unwrap()
        };
        let report = check_gradients(
            &store,
            |s, g| {
                let x = g.constant(image_tensor(&img)?);
                let q = m.learned_queries(g, s);
                let out = m.forward_mono(g, s, x, q)?;
                Ok(loss_baseline(g, &out, &gt, &matches, &w)?.0)
            },
            GradCheckOptions {
                max_entries_per_param: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn low_resolution_loss_and_match_equal_blockwise_full_resolution() {
        let w = tiny_cfg().weights();
        let mk = |f: &dyn Fn(usize, usize) -> bool| {
            (0..256).map(|i| f(i / 16, i % 16)).collect::<Vec<bool>>()
        };
        let gt = GroundTruthSet::new(
            16,
            16,
            vec![
                GtInstance {
                    class: 1,
                    mask: mk(&|y, x| y < 5 && x > 2 && x < 11),
                    identity: 1,
                },
                GtInstance {
                    class: 2,
                    mask: mk(&|y, x| y > 9 && (x + y) % 3 != 0),
                    identity: 2,
                },
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let low = Tensor::<f64>::from_fn(vec![4, 16], |_| rng.gen_range(-3.0..3.0));
        let full = Tensor::from_fn(vec![4, 256], |i| {
            let (q, p) = (i / 256, i % 256);
            low.row(q)[(p / 16 / 4) * 4 + (p % 16) / 4]
        });
        let mut logits = Tensor::from_fn(vec![4, 3], |_| rng.gen_range(-1.0..1.0));
        let raw = logits.clone();
        logits.data_mut().chunks_mut(3).for_each(softmax_in_place);
        let a = match_cost_matrix(&logits, &full, &gt, &w);
        let b = soft_cost_matrix(&logits, &low, &[1, 2], &gt.coverage(4).unwrap(), &w);
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
        let mr = match_from_values(&logits, &full, &gt, &w).unwrap();
        let ml = match_low_res(&logits, &low, &gt, 4, &w).unwrap();
        assert_eq!(mr.query, ml.query);
        assert!((mr.cost - ml.cost).abs() < 1e-8);
        let mut g = Graph::new();
        let (lv, fv, cv) = (g.constant(low), g.constant(full), g.constant(raw));
        let (x, _) = loss_layer(&mut g, cv, fv, &gt, &mr, &w).unwrap();
        let (y, _) = loss_layer_low_res(&mut g, cv, lv, &gt, 4, &mr, &w).unwrap();
        assert!((g.scalar_value(x) - g.scalar_value(y)).abs() < 1e-8);
    }

    #[test]
    fn pinned_matching_holds_pins_and_matches_the_rest() {
        let cfg = tiny_cfg();
        let (m, store) = model(cfg.clone(), 13);
        let img = image(8, 8, 4);
        let mk = |f: &dyn Fn(usize) -> bool| (0..64).map(f).collect::<Vec<bool>>();
        let gt = GroundTruthSet::new(
            8,
            8,
            vec![
                GtInstance {
                    class: 1,
                    mask: mk(&|i| i < 20),
                    identity: 4,
                },
                GtInstance {
                    class: 2,
                    mask: mk(&|i| i >= 40),
                    identity: 9,
                },
            ],
        )
        .unwrap();
        let w = cfg.weights();
        let mut g = Graph::new();
        let x = g.constant(image_tensor(&img).unwrap());
        let q = m.learned_queries(&mut g, &store);
        let out = m.forward_mono(&mut g, &store, x, q).unwrap();

        let free = match_layers_pinned(&g, &out, &gt, &w, false, &[None, None]).unwrap();
        assert_eq!(free, match_layers(&g, &out, &gt, &w).unwrap());

        let pinned = match_layers_pinned(&g, &out, &gt, &w, false, &[Some(2), None]).unwrap();
        for (layer, r) in out.layers.iter().zip(&pinned) {
            let mut probs = g.value(layer.logits).clone();
            probs.data_mut().chunks_mut(3).for_each(softmax_in_place);
            let cost = match_cost_matrix(&probs, g.value(layer.masks), &gt, &w);
            let best = if cost[1][0] <= cost[1][1] { 0 } else { 1 };
            assert_eq!(r.query, vec![2, best]);
            assert!((r.cost - cost[0][2] - cost[1][best]).abs() < 1e-9);
        }
        assert!(match_layers_pinned(&g, &out, &gt, &w, false, &[Some(1), Some(1)]).is_err());
        assert!(match_layers_pinned(&g, &out, &gt, &w, false, &[Some(3), None]).is_err());
        assert!(match_layers_pinned(&g, &out, &gt, &w, false, &[None]).is_err());
    }

    #[test]
    fn bdfp_identical_views_double_features() {
        let (m, store) = model(tiny_cfg(), 12);
        let img = image(8, 16, 3);
        let mut g = Graph::new();
        let x = g.constant(image_tensor(&img).unwrap());
        let f = m.encode(&mut g, &store, x).unwrap();
        let plans = StereoPlans::from_disparity(&DisparityField::uniform(8, 16, 0.0)).unwrap();
        let fused = m.fuse(&mut g, f, f, &plans.to_left).unwrap();
        for (a, b) in g.value(fused).data().iter().zip(g.value(f).data()) {
            assert!((a - 2.0 * b).abs() < 1e-6 * b.abs().max(1.0));
        }
        let q = m.learned_queries(&mut g, &store);
        let out = m
            .forward_bdfp(
                &mut g,
                &store,
                &img,
                &img,
                q,
                &FixedDisparity(DisparityField::uniform(8, 16, 0.0)),
            )
            .unwrap();
        assert_eq!(out.left.layers.len(), 2);
        assert_eq!(out.right.layers.len(), 2);
        let a = out.left.prediction_set(&g);
        let b = out.right.prediction_set(&g);
        assert_eq!(a, b);
    }
}
