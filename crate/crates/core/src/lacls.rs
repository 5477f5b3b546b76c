//! Location-agnostic classification of cropped, background-masked instance patches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{EncoderLayer, LayerNorm, Linear};
use crate::autodiff::optim::{AdamW, AdamWConfig};
use crate::autodiff::{softmax_in_place, Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::FeatureMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundFill {
    Zeros,
    /// Per-channel mean of the masked pixels.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub size: usize,
    pub expansion: f64,
    pub fill: BackgroundFill,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: 64,
            expansion: 1.2,
            fill: BackgroundFill::Zeros,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("patch size {} below 16", self.size)));
        }
        if !(self.expansion >= 1.0) {
            return Err(Error::Config(format!(
                "bbox expansion {} below 1",
                self.expansion
            )));
        }
        Ok(())
    }
}

/// Crop the expanded bounding box of `mask`, blank everything outside the mask and
/// resize bilinearly to `spec.size × spec.size`.
pub fn crop_and_mask<T: Scalar>(
    image: &FeatureMap<T>,
    mask: &[bool],
    spec: &PatchSpec,
) -> Result<FeatureMap<T>> {
    spec.validate()?;
    let (c, h, w) = (image.channels, image.height, image.width);
    if mask.len() != h * w {
        return Err(Error::Argument(format!(
            "mask of {} pixels for a {h}x{w} image",
            mask.len()
        )));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / w, i % w);
        x0 = x0.min(x);
        x1 = x1.max(x + 1);
        y0 = y0.min(y);
        y1 = y1.max(y + 1);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySegment);
    }
    let p = h * w;
    let fill: Vec<T> = match spec.fill {
        BackgroundFill::Zeros => vec![T::zero(); c],
        BackgroundFill::Mean => (0..c)
            .map(|ch| {
                let s: T = (0..p)
                    .filter(|&i| mask[i])
                    .map(|i| image.data[ch * p + i])
                    .sum();
                s / T::from_usize_lossy(count)
            })
            .collect(),
    };
    // Expanded box in continuous pixel coordinates, clipped to the image.
    let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
    let (hw, hh) = (
        (x1 - x0) as f64 * spec.expansion / 2.0,
        (y1 - y0) as f64 * spec.expansion / 2.0,
    );
    let bx0 = (cx - hw).max(0.0);
    let bx1 = (cx + hw).min(w as f64);
    let by0 = (cy - hh).max(0.0);
    let by1 = (cy + hh).min(h as f64);
    let s = spec.size;
    let (sx, sy) = ((bx1 - bx0) / s as f64, (by1 - by0) / s as f64);
    let sample = |ch: usize, x: isize, y: isize| -> T {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        let i = y * w + x;
        if mask[i] {
            image.data[ch * p + i]
        } else {
            fill[ch]
        }
    };
    let mut out = vec![T::zero(); c * s * s];
    for oy in 0..s {
        let fy = by0 + (oy as f64 + 0.5) * sy - 0.5;
        let (iy, ty) = (fy.floor() as isize, fy - fy.floor());
        for ox in 0..s {
            let fx = bx0 + (ox as f64 + 0.5) * sx - 0.5;
            let (ix, tx) = (fx.floor() as isize, fx - fx.floor());
            let (tx, ty) = (T::c(tx), T::c(ty));
            for ch in 0..c {
                let a = sample(ch, ix, iy) * (T::one() - tx) + sample(ch, ix + 1, iy) * tx;
                let b = sample(ch, ix, iy + 1) * (T::one() - tx) + sample(ch, ix + 1, iy + 1) * tx;
                out[ch * s * s + oy * s + ox] = a * (T::one() - ty) + b * ty;
            }
        }
    }
    FeatureMap::new(c, s, s, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaclsConfig {
    pub patch: PatchSpec,
    /// Side of the square sub-patches turned into tokens.
    pub token_patch: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
}

impl Default for LaclsConfig {
    fn default() -> Self {
        Self {
            patch: PatchSpec::default(),
            token_patch: 8,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
            num_classes: 4,
        }
    }
}

impl LaclsConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.token_patch == 0 || self.patch.size % self.token_patch != 0 {
            return Err(Error::Config(format!(
                "token patch {} must divide {}",
                self.token_patch, self.patch.size
            )));
        }
        if self.layers == 0
            || self.heads == 0
            || self.embed_dim % self.heads != 0
            || self.num_classes == 0
        {
            return Err(Error::Config("invalid classifier dimensions".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.patch.size / self.token_patch).pow(2)
    }
}

/// Small patch transformer: tokens from square sub-patches, a class token, encoder layers.
#[derive(Debug, Clone)]
pub struct LaClassifier {
    pub cfg: LaclsConfig,
    pub embed: Linear,
    pub pos: ParamId,
    pub cls_token: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub head: Linear,
}

/// `[3, S, S]` patch → `[tokens, 3·p·p]` rows (channel-major within each sub-patch).
pub fn patchify<T: Scalar>(patch: &FeatureMap<T>, p: usize) -> Result<Tensor<T>> {
    let (c, s) = (patch.channels, patch.height);
    if patch.width != s || s % p != 0 {
        return Err(Error::Argument(format!(
            "patch {}x{} cannot be tiled by {p}",
            s, patch.width
        )));
    }
    let g = s / p;
    let dim = c * p * p;
    let mut out = Vec::with_capacity(g * g * dim);
    for ty in 0..g {
        for tx in 0..g {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * s * s + (ty * p + y) * s + tx * p;
                    out.extend_from_slice(&patch.data[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, dim], out)
}

impl LaClassifier {
    pub fn new<T: Scalar>(
        cfg: LaclsConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let din = 3 * cfg.token_patch * cfg.token_patch;
        Ok(Self {
            embed: Linear::new(store, "lacls.embed", din, d, true, rng),
            pos: store.register(
                "lacls.pos",
                &[cfg.tokens(), d],
                Init::Normal { std: 0.02 },
                rng,
            ),
            cls_token: store.register("lacls.cls_token", &[1, d], Init::Normal { std: 0.02 }, rng),
            layers: (0..cfg.layers)
                .map(|l| {
                    EncoderLayer::new(
                        store,
                        &format!("lacls.enc{l}"),
                        d,
                        cfg.heads,
                        cfg.ffn_hidden,
                        rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(store, "lacls.norm", d, rng),
            head: Linear::new(store, "lacls.head", d, cfg.num_classes + 1, true, rng),
            cfg,
        })
    }

    /// Returns `(e^a [1, D], logits [1, C+1])`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
    ) -> Result<(Var, Var)> {
        let x = self.embed.forward(g, store, tokens)?;
        let pos = g.param(store, self.pos);
        let x = g.add(x, pos)?;
        let cls = g.param(store, self.cls_token);
        let mut z = g.concat_rows(&[cls, x])?;
        for layer in &self.layers {
            z = layer.forward(g, store, z, None)?;
        }
        let e = g.gather_rows(z, &[0])?;
        let e = self.norm.forward(g, store, e)?;
        let logits = self.head.forward(g, store, e)?;
        Ok((e, logits))
    }

    /// `(e^a, p^a)` for one patch at the configured size.
    pub fn classify_patch<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        patch: &FeatureMap<T>,
    ) -> Result<(Vec<T>, Vec<T>)> {
        if patch.height != self.cfg.patch.size || patch.width != self.cfg.patch.size {
            return Err(Error::Argument(format!(
                "patch is {}x{}, expected {}",
                patch.height, patch.width, self.cfg.patch.size
            )));
        }
        let mut g = Graph::new();
        let t = g.constant(patchify(patch, self.cfg.token_patch)?);
        let (e, logits) = self.forward(&mut g, store, t)?;
        let mut p = g.value(logits).data().to_vec();
        softmax_in_place(&mut p);
        Ok((g.value(e).data().to_vec(), p))
    }
}

/// One training example: a masked patch and its 0-based class.
#[derive(Debug, Clone)]
pub struct PatchSample<T> {
    pub patch: FeatureMap<T>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaclsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Random horizontal/vertical flips of training patches.
    pub flips: bool,
    pub seed: u64,
}

impl Default for LaclsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            flips: true,
            seed: 0,
        }
    }
}

fn flip<T: Scalar>(p: &FeatureMap<T>, horizontal: bool, vertical: bool) -> FeatureMap<T> {
    let (c, h, w) = (p.channels, p.height, p.width);
    let mut out = p.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = if vertical { h - 1 - y } else { y };
                let sx = if horizontal { w - 1 - x } else { x };
                out.data[ch * h * w + y * w + x] = p.data[ch * h * w + sy * w + sx];
            }
        }
    }
    out
}

/// Summed cross-entropy of a batch of patches.
pub fn lacls_loss<T: Scalar>(
    model: &LaClassifier,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    batch: &[(Tensor<T>, usize)],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    for (tokens, _) in batch {
        let t = g.constant(tokens.clone());
        rows.push(model.forward(g, store, t)?.1);
    }
    let logits = g.concat_rows(&rows)?;
    let targets: Vec<usize> = batch.iter().map(|b| b.1).collect();
    g.cross_entropy(logits, &targets, &vec![T::one(); targets.len()])
}

/// Train a fresh classifier on ground-truth patches; returns the model, its parameters
/// and the mean loss of every epoch.
pub fn train_lacls_offline(
    samples: &[PatchSample<f32>],
    cfg: &LaclsConfig,
    train: &LaclsTrainConfig,
) -> Result<(LaClassifier, ParamStore<f32>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Data("no training patches".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut store = ParamStore::new();
    let model = LaClassifier::new(cfg.clone(), &mut store, &mut rng)?;
    let bs = train.batch_size.max(1);
    let steps = train.epochs * samples.len().div_ceil(bs);
    let mut opt = AdamW::new(train.optimizer, &store, steps);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let patch = if train.flips {
                    flip(&s.patch, rng.gen_bool(0.5), rng.gen_bool(0.5))
                } else {
                    s.patch.clone()
                };
                batch.push((patchify(&patch, cfg.token_patch)?, s.class));
            }
            let mut g = Graph::new();
            let loss = lacls_loss(&model, &mut g, &store, &batch)?;
            total += g.scalar_value(loss) as f64;
            let scaled = g.scale(loss, 1.0 / batch.len() as f32);
            let grads = g.backward(scaled).param_grads(store.len());
            opt.step(&mut store, &grads);
        }
        history.push(total / samples.len() as f64);
    }
    Ok((model, store, history))
}

/// Fraction of samples whose argmax matches the class.
pub fn lacls_accuracy(
    model: &LaClassifier,
    store: &ParamStore<f32>,
    samples: &[PatchSample<f32>],
) -> Result<f64> {
    let mut hit = 0usize;
    for s in samples {
        let (_, p) = model.classify_patch(store, &s.patch)?;
        hit += (crate::qbs::argmax(&p) == s.class) as usize;
    }
    Ok(hit as f64 / samples.len().max(1) as f64)
}
