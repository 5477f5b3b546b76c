//! Ablation benchmark on synthetic clips: baseline, +DFP, full model, and the full
//! model trained with pseudo right views on monocular clips.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::Result;
use crate::lacls::{lacls_accuracy, train_lacls_offline, LaClassifier};
use crate::metrics::{evaluate, LabelMap, MetricsReport};
use crate::pipeline::{
    instance_merge, lacls_samples, train_model, Components, FinalPrediction, Lacoste, MemoryBank,
    PipelineConfig,
};
use crate::qbs::{argmax, match_from_values};
use crate::synthdata::{Dataset, SceneConfig, StereoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Frame step only, left view.
    Baseline,
    /// Frame step with stereo feature propagation.
    Dfp,
    /// Everything: propagation, alignment, set classifier, identity loss, LACls.
    Full,
    /// `Full` trained and evaluated on monocular clips with synthesized right views.
    PseudoStereo,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Dfp,
        Variant::Full,
        Variant::PseudoStereo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dfp => "baseline+dfp",
            Variant::Full => "full",
            Variant::PseudoStereo => "full-pseudo-stereo",
        }
    }

    pub fn components(self) -> Components {
        match self {
            Variant::Baseline => Components::baseline(),
            Variant::Dfp => Components::with_dfp(),
            Variant::Full | Variant::PseudoStereo => Components::default(),
        }
    }

    pub fn monocular(self) -> bool {
        self == Variant::PseudoStereo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub scene: SceneConfig,
    pub train_clips: usize,
    pub val_clips: usize,
    pub pipeline: PipelineConfig,
    /// Every n-th frame contributes LACls training patches.
    pub lacls_frame_stride: usize,
    /// Model initialization seed, shared by all variants.
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let mut pipeline = PipelineConfig::default();
        pipeline.train.steps = 2000;
        pipeline.train.optimizer.lr = 1e-3;
        pipeline.pseudo_stereo.d_min = 1.0;
        pipeline.pseudo_stereo.d_max = 3.0;
        Self {
            scene: SceneConfig::default(),
            train_clips: 200,
            val_clips: 50,
            pipeline,
            lacls_frame_stride: 2,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn variant_config(&self, v: Variant) -> PipelineConfig {
        let mut cfg = self.pipeline.clone();
        cfg.components = v.components();
        cfg
    }
}

/// Classification accuracy of each head over queries matched to ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub frame: f64,
    pub tracklet: f64,
    pub agnostic: f64,
    pub ensemble: f64,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub accuracy: HeadAccuracy,
    /// Fraction of instances whose matched query index is unchanged between consecutive frames.
    pub identity_consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub evaluation: Evaluation,
    pub final_loss: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub results: Vec<VariantResult>,
    pub lacls_val_accuracy: f64,
    pub total_seconds: f64,
}

impl BenchmarkReport {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }
}

fn real_argmax(row: &[f32]) -> usize {
    argmax(&row[..row.len() - 1])
}

/// Semantic maps, head accuracy and identity consistency of a model on `clips`.
pub fn evaluate_model(model: &Lacoste, clips: &[StereoClip]) -> Result<Evaluation> {
    let w = model.cfg.model.weights();
    let bank = MemoryBank::new(model.cfg.inference.memory_capacity);
    let use_bank = model.cfg.inference.use_memory_bank;
    let mut preds: Vec<LabelMap> = Vec::new();
    let mut gts: Vec<LabelMap> = Vec::new();
    let mut hits = [0usize; 4];
    let mut matched = 0usize;
    let mut same = 0usize;
    let mut pairs = 0usize;
    for clip in clips {
        let frames: Vec<FinalPrediction> = model.infer_clip(clip, use_bank.then_some(&bank))?;
        for (t, p) in frames.iter().enumerate() {
            preds.push(instance_merge(p, model.cfg.inference.top_k).0);
            gts.push(clip.label_map(t));
            let gt = clip.gt(t);
            let m = match_from_values(&p.p_b, &p.mask_logits, &gt, &w)?;
            for (k, &q) in m.query.iter().enumerate() {
                let target = gt.instances[k].class - 1;
                for (h, probs) in [&p.p_b, &p.p_s, &p.p_a, &p.p_f].into_iter().enumerate() {
                    hits[h] += usize::from(real_argmax(probs.row(q)) == target);
                }
                matched += 1;
            }
        }
        let tracked = model.track_clip(clip)?;
        let mut prev: Option<Vec<(u32, usize)>> = None;
        for (t, (probs, masks)) in tracked.iter().enumerate() {
            let gt = clip.gt(t);
            let m = match_from_values(probs, masks, &gt, &w)?;
            let now: Vec<(u32, usize)> = gt
                .instances
                .iter()
                .map(|i| i.identity)
                .zip(m.query)
                .collect();
            if let Some(p) = &prev {
                for (id, q) in &now {
                    if let Some((_, q0)) = p.iter().find(|(i, _)| i == id) {
                        pairs += 1;
                        same += usize::from(q0 == q);
                    }
                }
            }
            prev = Some(now);
        }
    }
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(Evaluation {
        metrics: evaluate(&preds, &gts)?,
        accuracy: HeadAccuracy {
            frame: frac(hits[0], matched),
            tracklet: frac(hits[1], matched),
            agnostic: frac(hits[2], matched),
            ensemble: frac(hits[3], matched),
            matched,
        },
        identity_consistency: frac(same, pairs),
    })
}

fn to_mono(clips: &[StereoClip]) -> Vec<StereoClip> {
    clips
        .iter()
        .map(|c| {
            let mut c = c.clone();
            for f in &mut c.frames {
                f.right = None;
            }
            c
        })
        .collect()
}

/// Train and evaluate the requested variants. `log` receives progress lines.
pub fn run_benchmark(
    cfg: &BenchmarkConfig,
    variants: &[Variant],
    log: impl FnMut(&str),
) -> Result<BenchmarkReport> {
    Ok(run_benchmark_models(cfg, variants, log)?.0)
}

/// [`run_benchmark`] that also returns the trained models, in `variants` order.
pub fn run_benchmark_models(
    cfg: &BenchmarkConfig,
    variants: &[Variant],
    mut log: impl FnMut(&str),
) -> Result<(BenchmarkReport, Vec<Lacoste>)> {
    let start = Instant::now();
    let train = Dataset::generate(&cfg.scene, 0, cfg.train_clips)?.clips;
    let val = Dataset::generate(&cfg.scene, cfg.train_clips, cfg.val_clips)?.clips;
    log(&format!(
        "generated {} training and {} validation clips",
        train.len(),
        val.len()
    ));

    let mut lacls: Option<(LaClassifier, ParamStore<f32>)> = None;
    let mut lacls_val_accuracy = 0.0;
    if variants.iter().any(|v| v.components().lacls) {
        let pc = &cfg.pipeline;
        let samples = lacls_samples(&train, &pc.lacls, cfg.lacls_frame_stride)?;
        let (model, store, losses) = train_lacls_offline(&samples, &pc.lacls, &pc.lacls_train)?;
        let val_samples = lacls_samples(&val, &pc.lacls, 1)?;
        lacls_val_accuracy = lacls_accuracy(&model, &store, &val_samples)?;
        log(&format!(
            "lacls: {} patches, final loss {:.4}, val accuracy {:.3}",
            samples.len(),
            losses.last().copied().unwrap_or(f64::NAN),
            lacls_val_accuracy
        ));
        lacls = Some((model, store));
    }

    let mut results = Vec::new();
    let mut models = Vec::new();
    for &v in variants {
        let pc = cfg.variant_config(v);
        let (tr, va) = if v.monocular() {
            (to_mono(&train), to_mono(&val))
        } else {
            (train.clone(), val.clone())
        };
        let mut model = Lacoste::new(pc, cfg.seed)?;
        if let (true, Some((m, s))) = (v.components().lacls, &lacls) {
            model.set_lacls(m.clone(), s.clone());
        }
        let t0 = Instant::now();
        let steps = model.cfg.train.steps;
        let report = train_model(&mut model, &tr, |step, l| {
            if (step + 1) % 100 == 0 || step + 1 == steps {
                log(&format!(
                    "{} step {}/{}: loss {:.3} (baseline {:.3}: cls {:.3} bce {:.3} dice {:.3}; sc {:.3} lc {:.3} ida {:.3})",
                    v.name(),
                    step + 1,
                    steps,
                    l.total,
                    l.baseline,
                    l.cls,
                    l.bce,
                    l.dice,
                    l.sc,
                    l.lc,
                    l.ida
                ));
            }
        })?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let evaluation = evaluate_model(&model, &va)?;
        let eval_seconds = t1.elapsed().as_secs_f64();
        let tail = report.losses.len().saturating_sub(20);
        let final_loss = report.losses[tail..].iter().map(|l| l.total).sum::<f64>()
            / (report.losses.len() - tail).max(1) as f64;
        log(&format!(
            "{}: mcIoU {:.2} Ch_IoU {:.2} acc f/s/a/e {:.3}/{:.3}/{:.3}/{:.3} consistency {:.3} ({:.0}s train, {:.0}s eval)",
            v.name(),
            100.0 * evaluation.metrics.mcIoU,
            100.0 * evaluation.metrics.Ch_IoU,
            evaluation.accuracy.frame,
            evaluation.accuracy.tracklet,
            evaluation.accuracy.agnostic,
            evaluation.accuracy.ensemble,
            evaluation.identity_consistency,
            train_seconds,
            eval_seconds
        ));
        results.push(VariantResult {
            variant: v,
            evaluation,
            final_loss,
            train_seconds,
            eval_seconds,
        });
        models.push(model);
    }
    Ok((
        BenchmarkReport {
            results,
            lacls_val_accuracy,
            total_seconds: start.elapsed().as_secs_f64(),
        },
        models,
    ))
}
