//! Tracklets of object-query embeddings and the stereo-temporal set classifier.
//!
//! Class labels are 0-based here (`C` is "no object"), matching [`crate::qbs`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{EncoderLayer, Linear};
use crate::autodiff::{softmax_in_place, Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::qbs::{hungarian_match, GroundTruthSet, LossWeights, PredictionSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetClassifierConfig {
    pub encoder_layers: usize,
    pub heads: usize,
    /// Token width; also the width of the incoming query embeddings.
    pub token_dim: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    pub temperature: f64,
    pub mask_non_objects: bool,
}

impl Default for SetClassifierConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 3,
            heads: 4,
            token_dim: 64,
            ffn_hidden: 128,
            num_classes: 4,
            temperature: 0.1,
            mask_non_objects: false,
        }
    }
}

impl SetClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers == 0 {
            return Err(Error::Config(
                "set classifier needs at least one encoder layer".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Left,
    Right,
}

/// Where an embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceTag {
    pub view: View,
    pub time: usize,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletItem<T> {
    pub embedding: Vec<T>,
    pub source: SourceTag,
    pub identity: u64,
    /// Item label; `C` is no object.
    pub label: usize,
    /// The frame step predicted no object for this embedding.
    pub non_object: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet<T> {
    pub items: Vec<TrackletItem<T>>,
    /// Category of the anchor identity.
    pub label: usize,
    pub anchor: u64,
}

impl<T: Scalar> Tracklet<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items as a `[M, D]` tensor.
    pub fn embeddings(&self) -> Result<Tensor<T>> {
        let d = self.items.first().map_or(0, |i| i.embedding.len());
        let mut data = Vec::with_capacity(self.items.len() * d);
        for it in &self.items {
            if it.embedding.len() != d {
                return Err(Error::Shape("tracklet embeddings differ in width".into()));
            }
            data.extend_from_slice(&it.embedding);
        }
        Tensor::new(vec![self.items.len(), d], data)
    }

    pub fn item_labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }
}

/// Initial queries of a frame: the learned set at the start of a clip, otherwise
/// the previous frame's final left-view embeddings, copied verbatim.
pub fn align_queries<T: Scalar>(
    learned: &Tensor<T>,
    previous: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    match previous {
        None => Ok(learned.clone()),
        Some(p) if p.shape() == learned.shape() => Ok(p.clone()),
        Some(p) => Err(Error::Argument(format!(
            "previous embeddings {:?} do not match the query set {:?}",
            p.shape(),
            learned.shape()
        ))),
    }
}

/// Pseudo identity of query `n` of batch item `i` (both 1-based): `(i − 1)·N + n`.
pub fn label_pseudo_ids(i: usize, n: usize, num_queries: usize) -> Result<u64> {
    if i == 0 || n == 0 || n > num_queries {
        return Err(Error::Argument(format!(
            "pseudo id for item {i}, query {n} of {num_queries}"
        )));
    }
    Ok(((i - 1) * num_queries + n) as u64)
}

/// Hungarian-matched query indices on the current left frame with their 0-based classes,
/// in ground-truth order.
pub fn identity_match_filter<T: Scalar>(
    pred: &PredictionSet<T>,
    gt: &GroundTruthSet,
    w: &LossWeights,
) -> Result<Vec<(usize, usize)>> {
    if gt.is_empty() {
        return Ok(Vec::new());
    }
    let m = hungarian_match(pred, gt, w)?;
    Ok(m.query
        .iter()
        .zip(&gt.instances)
        .map(|(&q, inst)| (q, inst.class - 1))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_tracklets: usize,
    pub lengths: Vec<usize>,
    /// Maximum fraction of distractor items per tracklet.
    pub mix_cap: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_tracklets: 32,
            lengths: vec![2, 4, 8],
            mix_cap: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::Config("tracklet lengths must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.mix_cap) {
            return Err(Error::Config(format!(
                "mix_cap {} must lie in [0, 0.5]",
                self.mix_cap
            )));
        }
        Ok(())
    }
}

/// Anchor category probabilities, inversely proportional to each category's item count.
pub fn anchor_category_weights<T>(pool: &[TrackletItem<T>]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for it in pool {
        *counts.entry(it.label).or_default() += 1;
    }
    let inv: BTreeMap<usize, f64> = counts
        .into_iter()
        .map(|(c, n)| (c, 1.0 / n as f64))
        .collect();
    let z: f64 = inv.values().sum();
    inv.into_iter().map(|(c, w)| (c, w / z)).collect()
}

fn sample_weighted<K: Copy>(entries: &[(K, f64)], rng: &mut impl Rng) -> K {
    let total: f64 = entries.iter().map(|e| e.1).sum();
    let mut r = rng.gen::<f64>() * total;
    for &(k, w) in entries {
        if r < w {
            return k;
        }
        r -= w;
    }
    entries.last().expect("non-empty weights").0
}

/// Sample anchor categories only; exposed so the sampler's proportions can be checked directly.
pub fn sample_anchor_categories<T>(
    pool: &[TrackletItem<T>],
    draws: usize,
    seed: u64,
) -> Vec<usize> {
    let weights: Vec<(usize, f64)> = anchor_category_weights(pool).into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .map(|_| sample_weighted(&weights, &mut rng))
        .collect()
}

/// A sampled tracklet as indices into the pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackletDraw {
    pub items: Vec<usize>,
    pub label: usize,
    pub anchor: u64,
}

/// Draw `cfg.num_tracklets` mixed tracklets from a pool of labeled embeddings.
///
/// Each tracklet picks an anchor category (inverse-frequency), an anchor identity
/// uniformly within it and a length from `cfg.lengths`; at most `mix_cap` of the
/// items (and never more than the anchor items) come from other identities.
pub fn generate_tracklets<T: Scalar>(
    pool: &[TrackletItem<T>],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Tracklet<T>>> {
    Ok(generate_tracklet_indices(pool, cfg, seed)?
        .into_iter()
        .map(|d| Tracklet {
            items: d.items.iter().map(|&i| pool[i].clone()).collect(),
            label: d.label,
            anchor: d.anchor,
        })
        .collect())
}

/// Same draws as [`generate_tracklets`], returned as pool indices.
pub fn generate_tracklet_indices<T>(
    pool: &[TrackletItem<T>],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<TrackletDraw>> {
    cfg.validate()?;
    if cfg.num_tracklets == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::Argument("tracklet pool is empty".into()));
    }
    let weights: Vec<(usize, f64)> = anchor_category_weights(pool).into_iter().collect();
    let mut by_identity: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut identities_by_cat: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (i, it) in pool.iter().enumerate() {
        let entry = by_identity.entry(it.identity).or_default();
        if entry.is_empty() {
            identities_by_cat
                .entry(it.label)
                .or_default()
                .push(it.identity);
        }
        entry.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.num_tracklets);
    for _ in 0..cfg.num_tracklets {
        let cat = sample_weighted(&weights, &mut rng);
        let ids = &identities_by_cat[&cat];
        let anchor = ids[rng.gen_range(0..ids.len())];
        let len = cfg.lengths[rng.gen_range(0..cfg.lengths.len())];
        let own = &by_identity[&anchor];
        let others: Vec<usize> = (0..pool.len())
            .filter(|&i| pool[i].identity != anchor)
            .collect();
        let max_mix = (len as f64 * cfg.mix_cap).floor() as usize;
        let mut k = if max_mix == 0 {
            0
        } else {
            rng.gen_range(0..=max_mix)
        };
        let n_anchor = (len - k).min(own.len());
        k = k.min(n_anchor).min(others.len());
        let mut picked: Vec<usize> = own.choose_multiple(&mut rng, n_anchor).copied().collect();
        picked.extend(others.choose_multiple(&mut rng, k).copied());
        picked.shuffle(&mut rng);
        out.push(TrackletDraw {
            items: picked,
            label: cat,
            anchor,
        });
    }
    Ok(out)
}

/// One JSON object per tracklet: source tags, identities, labels and row offsets into
/// a flat embedding dump written in the same order.
pub fn tracklet_dump_jsonl<T: Scalar>(tracklets: &[Tracklet<T>]) -> String {
    let mut offset = 0usize;
    let mut s = String::new();
    for t in tracklets {
        let items: Vec<_> = t
            .items
            .iter()
            .map(|it| {
                let v = serde_json::json!({
                    "source": it.source,
                    "identity": it.identity,
                    "label": it.label,
                    "non_object": it.non_object,
                    "embedding_offset": offset,
                });
                offset += 1;
                v
            })
            .collect();
        let line = serde_json::json!({ "label": t.label, "anchor": t.anchor, "items": items });
        s.push_str(&line.to_string());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy)]
pub struct SetOutput {
    /// `[1, D]` set-token embedding `e^s`.
    pub set_embedding: Var,
    /// `[1, C+1]`.
    pub set_logits: Var,
    /// `[M, C+1]`.
    pub item_logits: Var,
}

/// Value-level result of classifying one tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPrediction<T> {
    pub embedding: Vec<T>,
    pub probs: Vec<T>,
    /// `[M, C+1]` item distributions.
    pub item_probs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SetClassifier {
    pub cfg: SetClassifierConfig,
    pub proj: Linear,
    pub set_token: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub set_head: Linear,
    pub item_head: Linear,
}

impl SetClassifier {
    pub fn new<T: Scalar>(
        cfg: SetClassifierConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let proj = Linear::new(store, "stscls.proj", d, d, true, rng);
        let set_token =
            store.register("stscls.set_token", &[1, d], Init::Normal { std: 0.02 }, rng);
        let layers = (0..cfg.encoder_layers)
            .map(|l| {
                EncoderLayer::new(
                    store,
                    &format!("stscls.enc{l}"),
                    d,
                    cfg.heads,
                    cfg.ffn_hidden,
                    rng,
                )
            })
            .collect();
        let set_head = Linear::new(store, "stscls.set_head", d, cfg.num_classes + 1, true, rng);
        let item_head = Linear::new(store, "stscls.item_head", d, cfg.num_classes + 1, true, rng);
        Ok(Self {
            cfg,
            proj,
            set_token,
            layers,
            set_head,
            item_head,
        })
    }

    /// `items: [M, D]`. Items with `excluded[m]` set are hidden from attention.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        items: Var,
        excluded: Option<&[bool]>,
    ) -> Result<SetOutput> {
        let m = g.shape(items)[0];
        if m == 0 {
            return Err(Error::Argument("empty tracklet".into()));
        }
        let x = self.proj.forward(g, store, items)?;
        let tok = g.param(store, self.set_token);
        let mut z = g.concat_rows(&[tok, x])?;
        let key_mask = match excluded {
            Some(ex) if ex.len() != m => {
                return Err(Error::Argument(format!(
                    "{} exclusion flags for {m} items",
                    ex.len()
                )));
            }
            Some(ex) if ex.iter().any(|&e| e) => {
                let mut keep = vec![true];
                keep.extend(ex.iter().map(|&e| !e));
                Some(Arc::new(keep))
            }
            _ => None,
        };
        for layer in &self.layers {
            z = layer.forward(g, store, z, key_mask.clone())?;
        }
        let set_embedding = g.gather_rows(z, &[0])?;
        let rest: Vec<usize> = (1..=m).collect();
        let item_z = g.gather_rows(z, &rest)?;
        let set_logits = self.set_head.forward(g, store, set_embedding)?;
        let item_logits = self.item_head.forward(g, store, item_z)?;
        Ok(SetOutput {
            set_embedding,
            set_logits,
            item_logits,
        })
    }

    /// Classify a tracklet, honouring `mask_non_objects`.
    pub fn set_classify<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tracklet: &Tracklet<T>,
    ) -> Result<SetPrediction<T>> {
        if tracklet.is_empty() {
            return Err(Error::Argument("empty tracklet".into()));
        }
        let mut g = Graph::new();
        let items = g.constant(tracklet.embeddings()?);
        let flags: Vec<bool> = tracklet.items.iter().map(|i| i.non_object).collect();
        let ex = self.cfg.mask_non_objects.then_some(flags.as_slice());
        let out = self.forward(&mut g, store, items, ex)?;
        let mut probs = g.value(out.set_logits).data().to_vec();
        softmax_in_place(&mut probs);
        let mut item_probs = g.value(out.item_logits).clone();
        let cols = item_probs.matrix_dims().1;
        item_probs
            .data_mut()
            .chunks_mut(cols)
            .for_each(softmax_in_place);
        Ok(SetPrediction {
            embedding: g.value(out.set_embedding).data().to_vec(),
            probs,
            item_probs,
        })
    }
}

/// Similarity logits `⟨ê_i, ê_j⟩ / τ` for `[K, D]` embeddings.
pub fn similarity_logits<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    temperature: f64,
) -> Result<Var> {
    let e = g.l2_normalize_rows(embeddings)?;
    let s = g.matmul_t(e, false, e, true)?;
    Ok(g.scale(s, T::c(1.0 / temperature)))
}

/// `M^sim` with `m_ij = σ(⟨ê_i, ê_j⟩ / τ)`.
pub fn pairwise_similarity<T: Scalar>(
    embeddings: &Tensor<T>,
    temperature: f64,
) -> Result<Tensor<T>> {
    if embeddings.shape().len() != 2 || embeddings.shape()[0] == 0 {
        return Err(Error::Argument(
            "pairwise similarity needs a non-empty [K, D] matrix".into(),
        ));
    }
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let s = similarity_logits(&mut g, e, temperature)?;
    let mut out = g.value(s).map(crate::autodiff::sigmoid);
    // Enforce exact symmetry regardless of summation order.
    let k = embeddings.shape()[0];
    for i in 0..k {
        for j in 0..i {
            let v = out.data()[i * k + j];
            out.data_mut()[j * k + i] = v;
        }
    }
    Ok(out)
}

/// Same-identity indicator matrix `M̃`.
pub fn identity_targets<T: Scalar>(ids: &[u64]) -> Tensor<T> {
    let k = ids.len();
    Tensor::from_fn(vec![k, k], |i| {
        if ids[i / k] == ids[i % k] {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StsLoss {
    pub sc: f64,
    pub lc: f64,
    pub ida: f64,
    pub total: f64,
}

/// `L_ida = Σ_ij BCE(m_ij, m̃_ij)` over all `K²` pairs, from similarity logits.
pub fn identity_alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    sim_logits: Var,
    targets: &Tensor<T>,
) -> Result<Var> {
    let k = g.shape(sim_logits)[0];
    let rows = g.bce_with_logits_rows(sim_logits, Arc::new(targets.data().to_vec()))?;
    let s = g.sum(rows);
    Ok(g.scale(s, T::from_usize_lossy(k)))
}

/// `L_sc + L_lc + L_ida` with unit weights. `set_logits: [1, C+1]`, `item_logits: [M, C+1]`.
pub fn loss_stscls<T: Scalar>(
    g: &mut Graph<T>,
    set_logits: Var,
    item_logits: Var,
    set_label: usize,
    item_labels: &[usize],
    sim_logits: Var,
    targets: &Tensor<T>,
) -> Result<(Var, StsLoss)> {
    let sc = g.cross_entropy(set_logits, &[set_label], &[T::one()])?;
    let lc = g.cross_entropy(item_logits, item_labels, &vec![T::one(); item_labels.len()])?;
    let ida = identity_alignment_loss(g, sim_logits, targets)?;
    let t = g.add(sc, lc)?;
    let total = g.add(t, ida)?;
    let v = |g: &Graph<T>, x: Var| g.scalar_value(x).to_f64_lossy();
    let comps = StsLoss {
        sc: v(g, sc),
        lc: v(g, lc),
        ida: v(g, ida),
        total: v(g, total),
    };
    Ok((total, comps))
}
