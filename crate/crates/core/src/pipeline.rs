//! Joint training of the frame step and set classifier, and three-step inference
//! (frame, tracklet, location-agnostic) with an ensemble and a feature memory bank.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{AdamW, AdamWConfig};
use crate::autodiff::{softmax_in_place, Graph, ParamStore, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::geometry::{
    disparity_from_depth, sharpen_disparity, synth_right_view, DisparityField, FeatureMap,
    PseudoStereoConfig,
};
use crate::lacls::{crop_and_mask, LaClassifier, LaclsConfig, LaclsTrainConfig};
use crate::metrics::LabelMap;
use crate::qbs::{
    argmax, image_tensor, loss_baseline_at, match_layers_at, match_layers_pinned, GroundTruthSet,
    ModelConfig, QbsModel, StereoPlans, ViewOutput,
};
use crate::scalar::Scalar;
use crate::stscls::{
    generate_tracklet_indices, identity_alignment_loss, identity_match_filter, identity_targets,
    label_pseudo_ids, similarity_logits, SamplerConfig, SetClassifier, SetClassifierConfig,
    SourceTag, Tracklet, TrackletItem, View,
};
use crate::synthdata::StereoClip;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub alpha_b: f64,
    pub alpha_s: f64,
    pub alpha_a: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            alpha_b: 1.0 / 3.0,
            alpha_s: 1.0 / 3.0,
            alpha_a: 1.0 / 3.0,
        }
    }
}

impl EnsembleConfig {
    pub fn frame_only() -> Self {
        Self {
            alpha_b: 1.0,
            alpha_s: 0.0,
            alpha_a: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = [self.alpha_b, self.alpha_s, self.alpha_a];
        if a.iter().any(|&v| !(v >= 0.0)) || a.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "ensemble weights {a:?} must be non-negative with a positive sum"
            )));
        }
        Ok(())
    }

    /// `α_b p^b + α_s p^s + α_a p^a`, elementwise.
    pub fn combine<T: Scalar>(&self, pb: &[T], ps: &[T], pa: &[T]) -> Vec<T> {
        let (b, s, a) = (T::c(self.alpha_b), T::c(self.alpha_s), T::c(self.alpha_a));
        pb.iter()
            .zip(ps)
            .zip(pa)
            .map(|((&x, &y), &z)| b * x + s * y + a * z)
            .collect()
    }
}

/// Which parts of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    /// Disparity-guided feature propagation between the two views.
    pub dfp: bool,
    /// Seed each frame's decoder with the previous frame's embeddings.
    pub query_alignment: bool,
    pub stscls: bool,
    pub identity_loss: bool,
    pub lacls: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            dfp: true,
            query_alignment: true,
            stscls: true,
            identity_loss: true,
            lacls: true,
        }
    }
}

impl Components {
    pub fn baseline() -> Self {
        Self {
            dfp: false,
            query_alignment: false,
            stscls: false,
            identity_loss: false,
            lacls: false,
        }
    }

    pub fn with_dfp() -> Self {
        Self {
            dfp: true,
            ..Self::baseline()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Largest gap between the current and the temporal frame.
    pub max_dt: usize,
    pub seed: u64,
    /// Compute matching and mask losses on feature-resolution masks against
    /// block-coverage targets instead of the upsampled masks.
    pub low_res_mask_loss: bool,
    /// With query alignment, the current frame is first decoded from its own embeddings
    /// a uniformly drawn `0..=alignment_warmup` times (without gradient).
    pub alignment_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            max_dt: 4,
            seed: 0,
            low_res_mask_loss: true,
            alignment_warmup: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub clip_length: usize,
    pub top_k: usize,
    pub memory_capacity: usize,
    pub use_memory_bank: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            clip_length: 8,
            top_k: 5,
            memory_capacity: 64,
            use_memory_bank: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub set_classifier: SetClassifierConfig,
    pub sampler: SamplerConfig,
    pub lacls: LaclsConfig,
    pub lacls_train: LaclsTrainConfig,
    pub pseudo_stereo: PseudoStereoConfig,
    pub components: Components,
    pub ensemble: EnsembleConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.set_classifier.validate()?;
        self.sampler.validate()?;
        self.lacls.validate()?;
        self.pseudo_stereo.validate()?;
        self.ensemble.validate()?;
        if self.set_classifier.token_dim != self.model.embed_dim {
            return Err(Error::Config(
                "set classifier token_dim must equal the query embedding width".into(),
            ));
        }
        if self.set_classifier.num_classes != self.model.num_classes
            || self.lacls.num_classes != self.model.num_classes
        {
            return Err(Error::Config(
                "all classifiers must share num_classes".into(),
            ));
        }
        if self.inference.clip_length == 0 || self.inference.top_k == 0 {
            return Err(Error::Config(
                "clip_length and top_k must be positive".into(),
            ));
        }
        if self.components.stscls && !self.components.query_alignment {
            return Err(Error::Config("tracklets need query alignment".into()));
        }
        Ok(())
    }

    /// Ensemble weights that only reference enabled components.
    pub fn effective_ensemble(&self) -> EnsembleConfig {
        let mut e = self.ensemble;
        if !self.components.stscls {
            e.alpha_s = 0.0;
        }
        if !self.components.lacls {
            e.alpha_a = 0.0;
        }
        if e.alpha_b + e.alpha_s + e.alpha_a <= 0.0 {
            e = EnsembleConfig::frame_only();
        }
        e
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One view-aligned frame ready for the frame step.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub left: FeatureMap<f32>,
    pub right: Option<FeatureMap<f32>>,
    pub disparity: Option<DisparityField<f32>>,
    pub gt: Option<GroundTruthSet>,
}

/// Build frame `t` of a clip. Real right views are used when present; otherwise a
/// pseudo right view is synthesized from the left view and depth at scale `d_s`.
pub fn prepare_frame(
    clip: &StereoClip,
    t: usize,
    dfp: bool,
    pseudo: &PseudoStereoConfig,
    d_s: f64,
) -> Result<FrameData> {
    let left = clip.left::<f32>(t);
    let gt = Some(clip.gt(t));
    if !dfp {
        return Ok(FrameData {
            left,
            right: None,
            disparity: None,
            gt,
        });
    }
    if let Some(right) = clip.right::<f32>(t) {
        return Ok(FrameData {
            left,
            right: Some(right),
            disparity: Some(clip.disparity(t)),
            gt,
        });
    }
    let depth = clip.depth::<f32>(t);
    let donor = clip.left::<f32>(t.saturating_sub(1));
    let (right, _) = synth_right_view(&left, &depth, d_s as f32, Some(&donor), pseudo)?;
    let (disparity, _) = sharpen_disparity(&disparity_from_depth(&depth, d_s as f32)?, pseudo);
    Ok(FrameData {
        left,
        right: Some(right),
        disparity: Some(disparity),
        gt,
    })
}

/// Attention memories of one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub left: Tensor<f32>,
    pub right: Option<Tensor<f32>>,
    pub feat_hw: (usize, usize),
}

#[derive(Debug, Default)]
struct BankInner<V> {
    entries: HashMap<(String, usize), (Arc<V>, u64)>,
    tick: u64,
    computations: usize,
    hits: usize,
}

/// Least-recently-used cache of per-timestamp results keyed by `(sequence, t)`.
#[derive(Debug)]
pub struct MemoryBank<V> {
    capacity: usize,
    inner: Mutex<BankInner<V>>,
}

impl<V> MemoryBank<V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            inner: Mutex::new(BankInner {
                entries: HashMap::new(),
                tick: 0,
                computations: 0,
                hits: 0,
            }),
        }
    }

    pub fn get_or_compute(
        &self,
        seq: &str,
        t: usize,
        compute: impl FnOnce() -> Result<V>,
    ) -> Result<Arc<V>> {
        let mut inner = self.inner.lock().expect("memory bank lock");
        inner.tick += 1;
        let tick = inner.tick;
        let key = (seq.to_string(), t);
        if let Some(e) = inner.entries.get_mut(&key) {
            e.1 = tick;
            let v = e.0.clone();
            inner.hits += 1;
            return Ok(v);
        }
        let v = Arc::new(compute()?);
        inner.computations += 1;
        if inner.entries.len() >= self.capacity {
            let oldest = inner
                .entries
                .iter()
                .min_by_key(|(_, e)| e.1)
                .map(|(k, _)| k.clone());
            if let Some(k) = oldest {
                inner.entries.remove(&k);
            }
        }
        inner.entries.insert(key, (v.clone(), tick));
        Ok(v)
    }

    pub fn computations(&self) -> usize {
        self.inner.lock().expect("memory bank lock").computations
    }

    pub fn hits(&self) -> usize {
        self.inner.lock().expect("memory bank lock").hits
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("memory bank lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-query output of the three steps and the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalPrediction {
    /// `[N, C+1]` each.
    pub p_b: Tensor<f32>,
    pub p_s: Tensor<f32>,
    pub p_a: Tensor<f32>,
    pub p_f: Tensor<f32>,
    /// `[N, H*W]` frame-step mask logits at the centre frame.
    pub mask_logits: Tensor<f32>,
    pub height: usize,
    pub width: usize,
}

impl FinalPrediction {
    pub fn num_queries(&self) -> usize {
        self.p_f.shape()[0]
    }

    pub fn binary_mask(&self, n: usize) -> Vec<bool> {
        self.mask_logits.row(n).iter().map(|&v| v > 0.0).collect()
    }
}

/// Semantic map from the `k` most confident non-∅ queries, painted in ascending
/// confidence so the most confident query wins overlaps.
pub fn semantic_merge(pred: &FinalPrediction, k: usize) -> LabelMap {
    instance_merge(pred, k).0
}

/// Semantic map plus the painting query (`n + 1`, `0` = background) per pixel.
pub fn instance_merge(pred: &FinalPrediction, k: usize) -> (LabelMap, Vec<u16>) {
    let classes = pred.p_f.shape()[1];
    let no_object = classes - 1;
    let mut keep: Vec<(usize, usize, f32)> = (0..pred.num_queries())
        .filter_map(|n| {
            let row = pred.p_f.row(n);
            let c = argmax(row);
            (c != no_object).then_some((n, c, row[c]))
        })
        .collect();
    keep.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    keep.truncate(k);
    let p = pred.height * pred.width;
    let mut labels = vec![0u32; p];
    let mut ids = vec![0u16; p];
    for &(n, c, _) in keep.iter().rev() {
        for (i, v) in pred.mask_logits.row(n).iter().enumerate() {
            if *v > 0.0 {
                labels[i] = c as u32 + 1;
                ids[i] = n as u16 + 1;
            }
        }
    }
    (
        LabelMap::new(pred.height, pred.width, labels).expect("sized from the prediction"),
        ids,
    )
}

/// Loss values of one training step (batch means).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub baseline: f64,
    /// Unweighted classification, mask BCE and Dice parts of the baseline.
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub sc: f64,
    pub lc: f64,
    pub ida: f64,
    pub total: f64,
}

/// One batch element: the current frame and a later frame of the same clip.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub current: FrameData,
    pub temporal: FrameData,
}

struct FrameOutputs {
    left: ViewOutput,
    /// Per-layer `(embeddings, class logits)` of the right view.
    right: Option<Vec<(Var, Var)>>,
}

/// The full model: frame step and set classifier in one parameter store, LACls in its own.
pub struct Lacoste {
    pub cfg: PipelineConfig,
    pub qbs: QbsModel,
    pub sts: Option<SetClassifier>,
    pub store: ParamStore<f32>,
    pub lacls: Option<(LaClassifier, ParamStore<f32>)>,
}

impl Lacoste {
    pub fn new(cfg: PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let qbs = QbsModel::new(cfg.model.clone(), &mut store, &mut rng)?;
        let sts = if cfg.components.stscls {
            Some(SetClassifier::new(
                cfg.set_classifier.clone(),
                &mut store,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            qbs,
            sts,
            store,
            lacls: None,
        })
    }

    pub fn set_lacls(&mut self, model: LaClassifier, store: ParamStore<f32>) {
        self.lacls = Some((model, store));
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut stores = vec![&self.store];
        if let Some((_, s)) = &self.lacls {
            stores.push(s);
        }
        save_checkpoint(dir, &stores, config)
    }

    /// Rebuild from a checkpoint directory; LACls is attached when the checkpoint has it.
    pub fn load(dir: &Path) -> Result<Self> {
        let ck = load_checkpoint(dir)?;
        let cfg: PipelineConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::format(dir.join("manifest.json"), e.to_string()))?;
        Self::from_checkpoint(cfg, &ck)
    }

    pub fn from_checkpoint(cfg: PipelineConfig, ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        ck.load_into(&mut m.store)?;
        if ck.components.contains_key("lacls") {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut s = ParamStore::new();
            let model = LaClassifier::new(m.cfg.lacls.clone(), &mut s, &mut rng)?;
            ck.load_into(&mut s)?;
            m.lacls = Some((model, s));
        }
        Ok(m)
    }

    /// Frame step on one training frame. `warmup` first re-seeds the queries that many
    /// times with the frame's own final embeddings (values only, no gradient), so the
    /// decoder also learns from self-produced queries as met deep into an aligned window.
    fn frame_forward(
        &self,
        g: &mut Graph<f32>,
        frame: &FrameData,
        mut queries: Var,
        want_right: bool,
        warmup: usize,
    ) -> Result<FrameOutputs> {
        let left = g.constant(image_tensor(&frame.left)?);
        let (ml, mr, hw) = match (&frame.right, &frame.disparity, self.cfg.components.dfp) {
            (Some(right), Some(disp), true) => {
                let plans = StereoPlans::from_disparity(disp)?;
                let r = g.constant(image_tensor(right)?);
                let (ml, mr, hw) = self.qbs.stereo_memories(g, &self.store, left, r, &plans)?;
                (ml, Some(mr), hw)
            }
            (_, _, true) => {
                return Err(Error::Data(
                    "feature propagation needs a right view and disparity".into(),
                ))
            }
            _ => {
                let f = self.qbs.encode(g, &self.store, left)?;
                let hw = (g.shape(f)[1], g.shape(f)[2]);
                (self.qbs.pixel_memory(g, &self.store, f)?, None, hw)
            }
        };
        for _ in 0..warmup {
            let embs = self.qbs.decode(g, &self.store, ml, queries, None)?;
            let last = *embs.last().expect("decoder layers");
            queries = g.constant(g.value(last).clone());
        }
        let lv = self.qbs.decode_view(g, &self.store, ml, queries, hw)?;
        let rv = match (mr, want_right) {
            (Some(mr), true) => Some(self.decode_classes(g, mr, queries)?),
            _ => None,
        };
        Ok(FrameOutputs {
            left: lv,
            right: rv,
        })
    }

    /// Decoder embeddings and class logits (no masks) for every layer.
    fn decode_classes(
        &self,
        g: &mut Graph<f32>,
        memory: Var,
        queries: Var,
    ) -> Result<Vec<(Var, Var)>> {
        let embs = self.qbs.decode(g, &self.store, memory, queries, None)?;
        embs.into_iter()
            .map(|e| Ok((e, self.qbs.class_head.forward(g, &self.store, e)?)))
            .collect()
    }

    /// Baseline + set-classifier loss of a batch on a fresh graph; returns the graph,
    /// the scalar loss and its components.
    pub fn batch_loss(
        &self,
        batch: &[TrainSample],
        seed: u64,
    ) -> Result<(Graph<f32>, Var, StepLosses)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let comps = self.cfg.components;
        let w = self.cfg.model.weights();
        let n_q = self.cfg.model.num_queries;
        let want_tracklets = comps.stscls && self.sts.is_some();
        let max_warmup = if comps.query_alignment {
            self.cfg.train.alignment_warmup
        } else {
            0
        };
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11e);
        let warmups: Vec<usize> = batch
            .iter()
            .map(|_| wrng.gen_range(0..=max_warmup))
            .collect();
        let mut g = Graph::new();
        let mut baseline_terms = Vec::new();
        let mut losses = StepLosses::default();
        // Tracklet pool: values for sampling, graph rows for the loss.
        let mut pool: Vec<TrackletItem<f32>> = Vec::new();
        let mut rows: Vec<(Var, usize)> = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            let gt_now = s
                .current
                .gt
                .as_ref()
                .ok_or_else(|| Error::Data("current frame lacks ground truth".into()))?;
            let gt_next = s
                .temporal
                .gt
                .as_ref()
                .ok_or_else(|| Error::Data("temporal frame lacks ground truth".into()))?;
            let q0 = self.qbs.learned_queries(&mut g, &self.store);
            let now = self.frame_forward(&mut g, &s.current, q0, want_tracklets, warmups[i])?;
            let q1 = if comps.query_alignment {
                now.left.last().embeddings
            } else {
                q0
            };
            let next = self.frame_forward(&mut g, &s.temporal, q1, want_tracklets, 0)?;
            let low = self.cfg.train.low_res_mask_loss;
            let m_now = match_layers_at(&g, &now.left, gt_now, &w, low)?;
            // Aligned queries carry identities: a persisting instance stays on the query it
            // was matched to at the current frame; new ones are matched among the rest.
            let m_next = if comps.query_alignment {
                let last = m_now
                    .last()
                    .ok_or_else(|| Error::Data("decoder has no layers".into()))?;
                let held: HashMap<u32, usize> = gt_now
                    .instances
                    .iter()
                    .zip(&last.query)
                    .map(|(inst, &q)| (inst.identity, q))
                    .collect();
                let pins: Vec<Option<usize>> = gt_next
                    .instances
                    .iter()
                    .map(|inst| held.get(&inst.identity).copied())
                    .collect();
                match_layers_pinned(&g, &next.left, gt_next, &w, low, &pins)?
            } else {
                match_layers_at(&g, &next.left, gt_next, &w, low)?
            };
            for (out, gt, m) in [(&now.left, gt_now, m_now), (&next.left, gt_next, m_next)] {
                let (l, c) = loss_baseline_at(&mut g, out, gt, &m, &w, low)?;
                losses.cls += c.cls / batch.len() as f64;
                losses.bce += c.bce / batch.len() as f64;
                losses.dice += c.dice / batch.len() as f64;
                baseline_terms.push(l);
            }
            if !want_tracklets {
                continue;
            }
            let pred = now.left.prediction_set(&g);
            let valid = identity_match_filter(&pred, gt_now, &w)?;
            let views: [(usize, View, Vec<(Var, Var)>); 4] = [
                (
                    0,
                    View::Left,
                    now.left
                        .layers
                        .iter()
                        .map(|l| (l.embeddings, l.logits))
                        .collect(),
                ),
                (0, View::Right, now.right.clone().unwrap_or_default()),
                (
                    1,
                    View::Left,
                    next.left
                        .layers
                        .iter()
                        .map(|l| (l.embeddings, l.logits))
                        .collect(),
                ),
                (1, View::Right, next.right.clone().unwrap_or_default()),
            ];
            for &(q, class) in &valid {
                let identity = label_pseudo_ids(i + 1, q + 1, n_q)?;
                for (time, view, layers) in &views {
                    for (layer, &(emb, logits)) in layers.iter().enumerate() {
                        let lrow = g.value(logits).row(q);
                        pool.push(TrackletItem {
                            embedding: g.value(emb).row(q).to_vec(),
                            source: SourceTag {
                                view: *view,
                                time: *time,
                                layer,
                            },
                            identity,
                            label: class,
                            non_object: argmax(lrow) == lrow.len() - 1,
                        });
                        rows.push((emb, q));
                    }
                }
            }
        }
        let b = batch.len() as f32;
        let mut total = baseline_terms[0];
        for &t in &baseline_terms[1..] {
            total = g.add(total, t)?;
        }
        total = g.scale(total, 1.0 / b);
        losses.baseline = g.scalar_value(total) as f64;

        if let (Some(sts), false) = (&self.sts, pool.is_empty()) {
            let draws = generate_tracklet_indices(&pool, &self.cfg.sampler, seed)?;
            let mut used: Vec<usize> = draws.iter().flat_map(|d| d.items.iter().copied()).collect();
            used.sort_unstable();
            used.dedup();
            let gathered: HashMap<usize, Var> = {
                let mut m = HashMap::new();
                for &u in &used {
                    let (emb, q) = rows[u];
                    m.insert(u, g.gather_rows(emb, &[q])?);
                }
                m
            };
            if !draws.is_empty() {
                let ns = draws.len() as f32;
                let mut set_terms = Vec::with_capacity(draws.len());
                for d in &draws {
                    let parts: Vec<Var> = d.items.iter().map(|u| gathered[u]).collect();
                    let items = g.concat_rows(&parts)?;
                    let excluded: Vec<bool> = d.items.iter().map(|&u| pool[u].non_object).collect();
                    let ex = sts.cfg.mask_non_objects.then_some(excluded.as_slice());
                    let out = sts.forward(&mut g, &self.store, items, ex)?;
                    let labels: Vec<usize> = d.items.iter().map(|&u| pool[u].label).collect();
                    let sc = g.cross_entropy(out.set_logits, &[d.label], &[1.0])?;
                    let lc = g.cross_entropy(out.item_logits, &labels, &vec![1.0; labels.len()])?;
                    losses.sc += g.scalar_value(sc) as f64 / draws.len() as f64;
                    losses.lc += g.scalar_value(lc) as f64 / draws.len() as f64;
                    set_terms.push(g.add(sc, lc)?);
                }
                let mut s = set_terms[0];
                for &t in &set_terms[1..] {
                    s = g.add(s, t)?;
                }
                let s = g.scale(s, 1.0 / ns);
                total = g.add(total, s)?;
                if self.cfg.components.identity_loss {
                    let parts: Vec<Var> = used.iter().map(|u| gathered[u]).collect();
                    let embs = g.concat_rows(&parts)?;
                    let sim = similarity_logits(&mut g, embs, self.cfg.set_classifier.temperature)?;
                    let ids: Vec<u64> = used.iter().map(|&u| pool[u].identity).collect();
                    let ida = identity_alignment_loss(&mut g, sim, &identity_targets(&ids))?;
                    // Mean over pairs: the plain double sum grows with K² and swamps the other terms.
                    let k = used.len() as f32;
                    let ida = g.scale(ida, 1.0 / (k * k));
                    losses.ida = g.scalar_value(ida) as f64;
                    total = g.add(total, ida)?;
                }
            }
        }
        losses.total = g.scalar_value(total) as f64;
        Ok((g, total, losses))
    }

    /// One optimizer step on the frame step and set classifier.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW<f32>,
        batch: &[TrainSample],
        seed: u64,
    ) -> Result<StepLosses> {
        let (g, loss, losses) = self.batch_loss(batch, seed)?;
        if !losses.total.is_finite() {
            return Err(Error::Data(format!("non-finite training loss {losses:?}")));
        }
        let grads = g.backward(loss).param_grads(self.store.len());
        drop(g);
        opt.step(&mut self.store, &grads);
        Ok(losses)
    }

    /// Attention memories of one frame (values only).
    pub fn frame_memories(&self, frame: &FrameData) -> Result<MemoryEntry> {
        let mut g = Graph::new();
        let left = g.constant(image_tensor(&frame.left)?);
        if self.cfg.components.dfp {
            let (Some(right), Some(disp)) = (&frame.right, &frame.disparity) else {
                return Err(Error::Data(
                    "feature propagation needs a right view and disparity".into(),
                ));
            };
            let plans = StereoPlans::from_disparity(disp)?;
            let r = g.constant(image_tensor(right)?);
            let (ml, mr, hw) = self
                .qbs
                .stereo_memories(&mut g, &self.store, left, r, &plans)?;
            Ok(MemoryEntry {
                left: g.value(ml).clone(),
                right: Some(g.value(mr).clone()),
                feat_hw: hw,
            })
        } else {
            let f = self.qbs.encode(&mut g, &self.store, left)?;
            let hw = (g.shape(f)[1], g.shape(f)[2]);
            let m = self.qbs.pixel_memory(&mut g, &self.store, f)?;
            Ok(MemoryEntry {
                left: g.value(m).clone(),
                right: None,
                feat_hw: hw,
            })
        }
    }

    fn memories(
        &self,
        clip: &StereoClip,
        t: usize,
        bank: Option<&MemoryBank<MemoryEntry>>,
    ) -> Result<Arc<MemoryEntry>> {
        let compute = || {
            let f = prepare_frame(
                clip,
                t,
                self.cfg.components.dfp,
                &self.cfg.pseudo_stereo,
                self.cfg.pseudo_stereo.mean_scale(),
            )?;
            self.frame_memories(&f)
        };
        match bank {
            Some(b) => b.get_or_compute(&clip.name, t, compute),
            None => Ok(Arc::new(compute()?)),
        }
    }

    /// Frame step over the given timestamps with query alignment; returns per frame the
    /// final-layer `(left embeddings, left probs, right embeddings, right probs)` and
    /// the left prediction of frame `full_at`.
    #[allow(clippy::type_complexity)]
    fn run_frames(
        &self,
        clip: &StereoClip,
        times: &[usize],
        full_at: Option<usize>,
        bank: Option<&MemoryBank<MemoryEntry>>,
    ) -> Result<(Vec<FrameSummary>, Option<(Tensor<f32>, Tensor<f32>)>)> {
        let learned = self.store.get(self.qbs.queries).clone();
        let mut prev: Option<Tensor<f32>> = None;
        let mut out = Vec::with_capacity(times.len());
        let mut full = None;
        for (k, &t) in times.iter().enumerate() {
            let mem = self.memories(clip, t, bank)?;
            let mut g = Graph::new();
            let queries = match (&prev, self.cfg.components.query_alignment) {
                (Some(p), true) => crate::stscls::align_queries(&learned, Some(p))?,
                _ => learned.clone(),
            };
            let q = g.constant(queries);
            let ml = g.constant(mem.left.clone());
            let layers = self.decode_classes(&mut g, ml, q)?;
            let (le, ll) = *layers.last().expect("decoder layers");
            let mut summary = FrameSummary {
                time: t,
                left_embeddings: g.value(le).clone(),
                left_probs: softmax_rows(g.value(ll)),
                right: None,
            };
            if Some(k) == full_at {
                let (_, masks) =
                    self.qbs
                        .predict_heads(&mut g, &self.store, le, ml, mem.feat_hw)?;
                full = Some((summary.left_probs.clone(), g.value(masks).clone()));
            }
            if let Some(mr) = &mem.right {
                if self.sts.is_some() {
                    let mr = g.constant(mr.clone());
                    let rl = self.decode_classes(&mut g, mr, q)?;
                    let (re, rlog) = *rl.last().expect("decoder layers");
                    summary.right = Some((g.value(re).clone(), softmax_rows(g.value(rlog))));
                }
            }
            prev = Some(summary.left_embeddings.clone());
            out.push(summary);
        }
        Ok((out, full))
    }

    /// Window of `T` timestamps centred on `t_star`, replicating the clip edges.
    pub fn window(&self, clip_len: usize, t_star: usize) -> Vec<usize> {
        let t = self.cfg.inference.clip_length;
        let start = t_star as isize - (t / 2) as isize;
        (0..t)
            .map(|k| (start + k as isize).clamp(0, clip_len as isize - 1) as usize)
            .collect()
    }

    /// Three-step inference for frame `t_star` of `clip`.
    pub fn infer_frame(
        &self,
        clip: &StereoClip,
        t_star: usize,
        bank: Option<&MemoryBank<MemoryEntry>>,
    ) -> Result<FinalPrediction> {
        let ens = self.cfg.effective_ensemble();
        if ens.alpha_a > 0.0 && self.lacls.is_none() {
            return Err(Error::Config(
                "ensemble uses the location-agnostic classifier but the checkpoint lacks 'lacls'"
                    .into(),
            ));
        }
        if ens.alpha_s > 0.0 && self.sts.is_none() {
            return Err(Error::Config(
                "ensemble uses the set classifier but the model lacks 'stscls'".into(),
            ));
        }
        let times = self.window(clip.len(), t_star);
        let centre = self.cfg.inference.clip_length / 2;
        // Frames after the centre only feed tracklets.
        let needed = if ens.alpha_s > 0.0 {
            times.clone()
        } else {
            times[..=centre].to_vec()
        };
        let (frames, full) = self.run_frames(clip, &needed, Some(centre), bank)?;
        let (p_b, mask_logits) = full.expect("centre frame decoded");
        let n = p_b.shape()[0];
        let classes = p_b.shape()[1];
        let no_object = classes - 1;

        let p_s = match (&self.sts, ens.alpha_s > 0.0) {
            (Some(sts), true) => {
                let mut out = p_b.clone();
                for q in 0..n {
                    let mut items = Vec::with_capacity(2 * frames.len());
                    for f in &frames {
                        let mut views = vec![(View::Left, &f.left_embeddings, &f.left_probs)];
                        if let Some((e, p)) = &f.right {
                            views.push((View::Right, e, p));
                        }
                        for (view, e, p) in views {
                            items.push(TrackletItem {
                                embedding: e.row(q).to_vec(),
                                source: SourceTag {
                                    view,
                                    time: f.time,
                                    layer: self.cfg.model.decoder_layers - 1,
                                },
                                identity: q as u64,
                                label: no_object,
                                non_object: argmax(p.row(q)) == no_object,
                            });
                        }
                    }
                    if items.iter().all(|i| i.non_object) {
                        continue;
                    }
                    let tr = Tracklet {
                        items,
                        label: no_object,
                        anchor: q as u64,
                    };
                    let pred = sts.set_classify(&self.store, &tr)?;
                    out.data_mut()[q * classes..(q + 1) * classes].copy_from_slice(&pred.probs);
                }
                out
            }
            _ => p_b.clone(),
        };

        let uniform = 1.0 / classes as f32;
        let p_a = match (&self.lacls, ens.alpha_a > 0.0) {
            (Some((model, store)), true) => {
                let image = clip.left::<f32>(times[centre]);
                let mut out = Tensor::full(vec![n, classes], uniform);
                for q in 0..n {
                    if argmax(p_b.row(q)) == no_object {
                        continue;
                    }
                    let mask: Vec<bool> = mask_logits.row(q).iter().map(|&v| v > 0.0).collect();
                    match crop_and_mask(&image, &mask, &model.cfg.patch) {
                        Ok(patch) => {
                            let (_, p) = model.classify_patch(store, &patch)?;
                            out.data_mut()[q * classes..(q + 1) * classes].copy_from_slice(&p);
                        }
                        Err(Error::EmptySegment) => {}
                        Err(e) => return Err(e),
                    }
                }
                out
            }
            _ => Tensor::full(vec![n, classes], uniform),
        };

        let mut p_f = Tensor::zeros(vec![n, classes]);
        if ens == EnsembleConfig::frame_only() {
            p_f = p_b.clone();
        } else {
            for q in 0..n {
                let row = ens.combine(p_b.row(q), p_s.row(q), p_a.row(q));
                p_f.data_mut()[q * classes..(q + 1) * classes].copy_from_slice(&row);
            }
        }
        Ok(FinalPrediction {
            p_b,
            p_s,
            p_a,
            p_f,
            mask_logits,
            height: clip.height,
            width: clip.width,
        })
    }

    /// Sliding-window inference over every frame of a clip.
    pub fn infer_clip(
        &self,
        clip: &StereoClip,
        bank: Option<&MemoryBank<MemoryEntry>>,
    ) -> Result<Vec<FinalPrediction>> {
        (0..clip.len())
            .map(|t| self.infer_frame(clip, t, bank))
            .collect()
    }

    /// Frame step run causally over a whole clip; returns each frame's left prediction.
    pub fn track_clip(&self, clip: &StereoClip) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        let times: Vec<usize> = (0..clip.len()).collect();
        let mut out = Vec::with_capacity(times.len());
        let learned = self.store.get(self.qbs.queries).clone();
        let mut prev: Option<Tensor<f32>> = None;
        for &t in &times {
            let mem = self.memories(clip, t, None)?;
            let mut g = Graph::new();
            let queries = match (&prev, self.cfg.components.query_alignment) {
                (Some(p), true) => p.clone(),
                _ => learned.clone(),
            };
            let q = g.constant(queries);
            let ml = g.constant(mem.left.clone());
            let embs = self.qbs.decode(&mut g, &self.store, ml, q, None)?;
            let e = *embs.last().expect("decoder layers");
            let (logits, masks) =
                self.qbs
                    .predict_heads(&mut g, &self.store, e, ml, mem.feat_hw)?;
            prev = Some(g.value(e).clone());
            out.push((softmax_rows(g.value(logits)), g.value(masks).clone()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct FrameSummary {
    time: usize,
    left_embeddings: Tensor<f32>,
    left_probs: Tensor<f32>,
    right: Option<(Tensor<f32>, Tensor<f32>)>,
}

fn softmax_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let mut p = t.clone();
    let cols = p.matrix_dims().1;
    p.data_mut().chunks_mut(cols).for_each(softmax_in_place);
    p
}

/// Draw a training batch: a clip, a gap `Δt ∈ [1, max_dt]` and a start frame.
pub fn sample_batch(
    clips: &[StereoClip],
    cfg: &PipelineConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TrainSample>> {
    if clips.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let ps = &cfg.pseudo_stereo;
    (0..cfg.train.batch_size)
        .map(|_| {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let t_len = clip.len();
            let max_dt = cfg.train.max_dt.min(t_len.saturating_sub(1));
            let dt = if max_dt == 0 {
                0
            } else {
                rng.gen_range(1..=max_dt)
            };
            let t = rng.gen_range(0..t_len - dt);
            let d_s = rng.gen_range(ps.d_min..=ps.d_max);
            Ok(TrainSample {
                current: prepare_frame(clip, t, cfg.components.dfp, ps, d_s)?,
                temporal: prepare_frame(clip, t + dt, cfg.components.dfp, ps, d_s)?,
            })
        })
        .collect()
}

/// Per-step losses of a training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<StepLosses>,
}

/// Train the frame step (and set classifier when enabled) for `cfg.train.steps` steps.
pub fn train_model(
    model: &mut Lacoste,
    clips: &[StereoClip],
    mut on_step: impl FnMut(usize, &StepLosses),
) -> Result<TrainReport> {
    let cfg = model.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut opt = AdamW::new(cfg.train.optimizer, &model.store, cfg.train.steps);
    let mut report = TrainReport::default();
    for step in 0..cfg.train.steps {
        let batch = sample_batch(clips, &cfg, &mut rng)?;
        let seed = rng.gen();
        let l = model.train_step(&mut opt, &batch, seed)?;
        on_step(step, &l);
        report.losses.push(l);
    }
    Ok(report)
}

/// Ground-truth patches of every instance in the clips, for offline LACls training.
pub fn lacls_samples(
    clips: &[StereoClip],
    cfg: &LaclsConfig,
    frame_stride: usize,
) -> Result<Vec<crate::lacls::PatchSample<f32>>> {
    let mut out = Vec::new();
    for clip in clips {
        for t in (0..clip.len()).step_by(frame_stride.max(1)) {
            let img = clip.left::<f32>(t);
            for inst in clip.gt(t).instances {
                match crop_and_mask(&img, &inst.mask, &cfg.patch) {
                    Ok(patch) => out.push(crate::lacls::PatchSample {
                        patch,
                        class: inst.class - 1,
                    }),
                    Err(Error::EmptySegment) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

/// Per-query probabilities written next to each predicted instance map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: usize,
    pub p_b: Vec<f32>,
    pub p_s: Vec<f32>,
    pub p_a: Vec<f32>,
    pub p_f: Vec<f32>,
}

/// Write `<out>/<clip>/instances/%06d.png` (painting query + 1), `semantic/%06d.png`
/// (class labels) and `queries/%06d.json` for every frame.
pub fn write_clip_predictions(
    out: &Path,
    clip_name: &str,
    preds: &[FinalPrediction],
    top_k: usize,
) -> Result<()> {
    let root = out.join(clip_name);
    for sub in ["instances", "semantic", "queries"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (t, p) in preds.iter().enumerate() {
        let (labels, ids) = instance_merge(p, top_k);
        crate::io::write_u16_png(
            &root.join(format!("instances/{t:06}.png")),
            p.height,
            p.width,
            &ids,
        )?;
        let sem: Vec<u16> = labels.data.iter().map(|&v| v as u16).collect();
        crate::io::write_u16_png(
            &root.join(format!("semantic/{t:06}.png")),
            p.height,
            p.width,
            &sem,
        )?;
        let records: Vec<QueryRecord> = (0..p.num_queries())
            .map(|q| QueryRecord {
                query: q,
                p_b: p.p_b.row(q).to_vec(),
                p_s: p.p_s.row(q).to_vec(),
                p_a: p.p_a.row(q).to_vec(),
                p_f: p.p_f.row(q).to_vec(),
            })
            .collect();
        crate::io::write_json(&root.join(format!("queries/{t:06}.json")), &records)?;
    }
    Ok(())
}

/// Metrics of a prediction directory written by [`write_clip_predictions`] against a dataset.
pub fn evaluate_prediction_dir(
    pred: &Path,
    gt: &crate::synthdata::Dataset,
) -> Result<crate::metrics::MetricsReport> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for clip in &gt.clips {
        for t in 0..clip.len() {
            let path = pred.join(&clip.name).join(format!("semantic/{t:06}.png"));
            if !path.exists() {
                return Err(Error::format(&path, "missing predicted label map"));
            }
            let (h, w, data) = crate::io::read_u16_png(&path)?;
            if (h, w) != (clip.height, clip.width) {
                return Err(Error::format(
                    &path,
                    format!("size {h}x{w} differs from ground truth"),
                ));
            }
            preds.push(LabelMap::new(
                h,
                w,
                data.into_iter().map(u32::from).collect(),
            )?);
            gts.push(clip.label_map(t));
        }
    }
    crate::metrics::evaluate(&preds, &gts)
}
