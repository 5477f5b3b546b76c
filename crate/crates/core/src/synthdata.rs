//! Deterministic synthetic stereo video: textured shapes over a textured
//! background plane, each at an integer disparity so both views are exact
//! translations of one another.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthField, DisparityField, FeatureMap};
use crate::io;
use crate::metrics::LabelMap;
use crate::qbs::{GroundTruthSet, GtInstance};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Relative class frequencies; empty means uniform.
    pub class_weights: Vec<f64>,
    pub objects_per_clip: [usize; 2],
    /// Maximum object speed in px/frame.
    pub velocity_cap: f64,
    /// Object depth range in scene units.
    pub depth_range: [f64; 2],
    /// Baseline times focal length: disparity = bf / Z.
    pub bf: f64,
    pub background_disparity: u32,
    pub clip_length: usize,
    /// Independent per-view Gaussian sensor noise (intensity units in [0, 1]).
    pub noise_std: f64,
    /// Render right views; when false only left views and depth are produced.
    pub stereo: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            num_classes: 4,
            class_weights: Vec::new(),
            objects_per_clip: [1, 3],
            velocity_cap: 3.0,
            depth_range: [8.0, 24.0],
            bf: 96.0,
            background_disparity: 2,
            clip_length: 8,
            noise_std: 0.06,
            stereo: true,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.clip_length == 0 || self.num_classes == 0 {
            return bad("image size, clip length and class count must be positive".into());
        }
        if !(self.velocity_cap >= 0.0
            && self.velocity_cap < self.width as f64 / self.clip_length as f64)
        {
            return bad(format!(
                "velocity cap {} must be below width / T",
                self.velocity_cap
            ));
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[0] <= self.depth_range[1]) {
            return bad("depth range must be positive and ordered".into());
        }
        if self.objects_per_clip[0] > self.objects_per_clip[1] {
            return bad("objects_per_clip must be ordered".into());
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.num_classes
                || self.class_weights.iter().any(|&w| w < 0.0))
        {
            return bad("class_weights must be empty or one non-negative weight per class".into());
        }
        if self.background_disparity == 0 || self.disparity_levels().is_empty() {
            return bad("no integer disparity fits the depth range".into());
        }
        Ok(())
    }

    /// Integer object disparities compatible with the depth range.
    pub fn disparity_levels(&self) -> Vec<u32> {
        let lo = (self.bf / self.depth_range[1]).ceil().max(1.0) as u32;
        let hi = (self.bf / self.depth_range[0]).floor() as u32;
        (lo..=hi)
            .filter(|&d| d > self.background_disparity)
            .collect()
    }

    /// Same scenes without right views.
    pub fn monocular(&self) -> Self {
        Self {
            stereo: false,
            ..self.clone()
        }
    }
}

/// 8-bit channel-first RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn to_feature_map<T: Scalar>(&self) -> FeatureMap<T> {
        let inv = T::c(1.0 / 255.0);
        FeatureMap::new(
            3,
            self.height,
            self.width,
            self.data.iter().map(|&v| T::c(v as f64) * inv).collect(),
        )
        .expect("image buffer matches its size")
    }

    pub fn from_feature_map<T: Scalar>(map: &FeatureMap<T>) -> Self {
        Self {
            height: map.height,
            width: map.width,
            data: map
                .data
                .iter()
                .map(|v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub left: Image,
    pub right: Option<Image>,
    /// Left-view depth of the visible surface.
    pub depth: Vec<f32>,
    /// Left-view instance id per pixel; `0` is background, otherwise identity + 1.
    pub ids: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    /// 1-based class.
    pub class: usize,
    pub identity: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoClip {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bf: f64,
    pub frames: Vec<Frame>,
    /// Instance id → class and identity.
    pub instances: BTreeMap<u16, InstanceInfo>,
}

impl StereoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_stereo(&self) -> bool {
        self.frames.iter().all(|f| f.right.is_some())
    }

    pub fn left<T: Scalar>(&self, t: usize) -> FeatureMap<T> {
        self.frames[t].left.to_feature_map()
    }

    pub fn right<T: Scalar>(&self, t: usize) -> Option<FeatureMap<T>> {
        self.frames[t].right.as_ref().map(Image::to_feature_map)
    }

    pub fn depth<T: Scalar>(&self, t: usize) -> DepthField<T> {
        let d = &self.frames[t].depth;
        DepthField::new(
            self.height,
            self.width,
            d.iter().map(|&z| T::c(z as f64)).collect(),
        )
        .expect("depth buffer matches its size")
    }

    /// True left-view disparity `bf / Z`. The renderer only emits integer
    /// disparities, so values are snapped back onto the integers to undo the
    /// float32 round-off of the stored depth.
    pub fn disparity<T: Scalar>(&self, t: usize) -> DisparityField<T> {
        let data = self.frames[t]
            .depth
            .iter()
            .map(|&z| {
                let d = self.bf / z as f64;
                let r = d.round();
                T::c(if (d - r).abs() < 1e-3 { r } else { d })
            })
            .collect();
        DisparityField::new(self.height, self.width, data).expect("depth buffer matches its size")
    }

    pub fn gt(&self, t: usize) -> GroundTruthSet {
        let ids = &self.frames[t].ids;
        let instances = self
            .instances
            .iter()
            .filter_map(|(&id, info)| {
                let mask: Vec<bool> = ids.iter().map(|&v| v == id).collect();
                mask.iter().any(|&m| m).then_some(GtInstance {
                    class: info.class,
                    mask,
                    identity: info.identity,
                })
            })
            .collect();
        GroundTruthSet::new(self.height, self.width, instances)
            .expect("rendered instances are disjoint")
    }

    pub fn label_map(&self, t: usize) -> LabelMap {
        let data = self.frames[t]
            .ids
            .iter()
            .map(|&id| {
                if id == 0 {
                    0
                } else {
                    self.instances[&id].class as u32
                }
            })
            .collect();
        LabelMap::new(self.height, self.width, data).expect("id buffer matches its size")
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse,
    Bar,
}

#[derive(Debug, Clone)]
struct Object {
    class: usize,
    shape: Shape,
    half: (f64, f64),
    pos: (f64, f64),
    vel: (f64, f64),
    angle: f64,
    spin: f64,
    disparity: u32,
    phase: (f64, f64),
    period_scale: f64,
    brightness: f64,
}

impl Object {
    fn at(&self, t: usize) -> ((f64, f64), f64) {
        let t = t as f64;
        (
            (self.pos.0 + self.vel.0 * t, self.pos.1 + self.vel.1 * t),
            self.angle + self.spin * t,
        )
    }

    /// Local texture coordinates of image point `(x, y)` if it lies on the object.
    fn local(&self, x: f64, y: f64, center: (f64, f64), angle: f64) -> Option<(f64, f64)> {
        let (dx, dy) = (x - center.0, y - center.1);
        let (s, c) = angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (a, b) = self.half;
        let inside = match self.shape {
            Shape::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            Shape::Bar => u.abs() <= a && v.abs() <= b,
        };
        inside.then_some((u, v))
    }
}

/// Per-class procedural texture; classes differ by pattern more than by colour.
fn class_texture(class: usize, u: f64, v: f64, o: &Object) -> [f64; 3] {
    let (u, v) = (u + o.phase.0, v + o.phase.1);
    let k = class - 1;
    let tint = [
        [0.02, 0.0, -0.02],
        [0.0, 0.02, 0.0],
        [-0.02, 0.0, 0.02],
        [0.0, -0.01, 0.01],
    ][k % 4];
    let family = k / 4;
    let p = (5.0 + family as f64) * o.period_scale;
    let t = match k % 4 {
        // Stripes across the long axis.
        0 => ((u * std::f64::consts::TAU / p).sin() > 0.0) as u8 as f64,
        // Stripes along the long axis.
        1 => ((v * std::f64::consts::TAU / p).sin() > 0.0) as u8 as f64,
        // Checkerboard.
        2 => (((u / p).floor() + (v / p).floor()) as i64).rem_euclid(2) as f64,
        // Dots.
        _ => {
            let (fu, fv) = ((u / p).rem_euclid(1.0) - 0.5, (v / p).rem_euclid(1.0) - 0.5);
            (fu * fu + fv * fv < 0.09) as u8 as f64
        }
    };
    let lo = 0.3 * o.brightness;
    let hi = 0.8 * o.brightness;
    let g = lo + (hi - lo) * t;
    [g + tint[0], g + tint[1], g + tint[2]]
}

#[derive(Debug, Clone)]
struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Background {
    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).sin())
            .sum();
        [
            self.base[0] + s,
            self.base[1] + 0.6 * s,
            self.base[2] + 0.5 * s,
        ]
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn clip_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

fn sample_class(cfg: &SceneConfig, rng: &mut impl Rng) -> usize {
    if cfg.class_weights.is_empty() {
        return rng.gen_range(1..=cfg.num_classes);
    }
    let total: f64 = cfg.class_weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, &w) in cfg.class_weights.iter().enumerate() {
        if r < w {
            return i + 1;
        }
        r -= w;
    }
    cfg.num_classes
}

/// Render clip `index` of the configured family.
pub fn generate_clip(cfg: &SceneConfig, index: usize) -> Result<StereoClip> {
    cfg.validate()?;
    let mut rng = clip_rng(cfg.seed, index, 0);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let levels = cfg.disparity_levels();
    let n_obj = rng.gen_range(cfg.objects_per_clip[0]..=cfg.objects_per_clip[1]);
    let objects: Vec<Object> = (0..n_obj)
        .map(|_| {
            let speed = rng.gen_range(0.0..=cfg.velocity_cap);
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            Object {
                class: sample_class(cfg, &mut rng),
                shape: if rng.gen_bool(0.5) {
                    Shape::Ellipse
                } else {
                    Shape::Bar
                },
                half: (rng.gen_range(0.12..0.22) * w, rng.gen_range(0.09..0.16) * h),
                pos: (rng.gen_range(0.2..0.8) * w, rng.gen_range(0.25..0.75) * h),
                vel: (speed * heading.cos(), speed * heading.sin()),
                angle: rng.gen_range(-0.6..0.6),
                spin: rng.gen_range(-0.03..0.03),
                disparity: levels[rng.gen_range(0..levels.len())],
                phase: (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)),
                period_scale: rng.gen_range(0.9..1.1),
                brightness: rng.gen_range(0.85..1.2),
            }
        })
        .collect();
    let background = Background {
        base: [
            rng.gen_range(0.55..0.7),
            rng.gen_range(0.25..0.35),
            rng.gen_range(0.2..0.3),
        ],
        waves: (0..4)
            .map(|_| {
                (
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(0.0..6.3),
                    rng.gen_range(0.02..0.06),
                )
            })
            .collect(),
    };
    // Far to near, so nearer objects overwrite.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| (objects[i].disparity, i));

    let mut instances = BTreeMap::new();
    for (i, o) in objects.iter().enumerate() {
        instances.insert(
            (i + 1) as u16,
            InstanceInfo {
                class: o.class,
                identity: i as u32,
            },
        );
    }

    let d_bg = cfg.background_disparity as f64;
    let render = |t: usize, right: bool, noise: &mut ChaCha8Rng| -> (Image, Vec<f32>, Vec<u16>) {
        let (hh, ww) = (cfg.height, cfg.width);
        let p = hh * ww;
        let mut data = vec![0u8; 3 * p];
        let mut depth = vec![(cfg.bf / d_bg) as f32; p];
        let mut ids = vec![0u16; p];
        let poses: Vec<_> = objects.iter().map(|o| o.at(t)).collect();
        for y in 0..hh {
            for x in 0..ww {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let shift = if right { d_bg } else { 0.0 };
                let mut rgb = background.at(xf + shift, yf);
                for &k in &order {
                    let o = &objects[k];
                    let shift = if right { o.disparity as f64 } else { 0.0 };
                    if let Some((u, v)) = o.local(xf + shift, yf, poses[k].0, poses[k].1) {
                        rgb = class_texture(o.class, u, v, o);
                        ids[y * ww + x] = (k + 1) as u16;
                        depth[y * ww + x] = (cfg.bf / o.disparity as f64) as f32;
                    }
                }
                for c in 0..3 {
                    let n = if cfg.noise_std > 0.0 {
                        cfg.noise_std * gaussian(noise)
                    } else {
                        0.0
                    };
                    data[c * p + y * ww + x] = ((rgb[c] + n).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        (
            Image {
                height: hh,
                width: ww,
                data,
            },
            depth,
            ids,
        )
    };

    let mut frames = Vec::with_capacity(cfg.clip_length);
    for t in 0..cfg.clip_length {
        let mut noise_l = clip_rng(cfg.seed, index, 1 + 2 * t as u64);
        let (left, depth, ids) = render(t, false, &mut noise_l);
        // The right view is always rendered so the monocular family has the same left frames.
        let right = cfg.stereo.then(|| {
            let mut noise_r = clip_rng(cfg.seed, index, 2 + 2 * t as u64);
            render(t, true, &mut noise_r).0
        });
        frames.push(Frame {
            left,
            right,
            depth,
            ids,
        });
    }
    Ok(StereoClip {
        name: format!("seq_{index:04}"),
        height: cfg.height,
        width: cfg.width,
        bf: cfg.bf,
        frames,
        instances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub clips: Vec<StereoClip>,
}

impl Dataset {
    pub fn generate(scene: &SceneConfig, first: usize, count: usize) -> Result<Self> {
        let clips = (first..first + count)
            .map(|i| generate_clip(scene, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            scene: scene.clone(),
            clips,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    scene: SceneConfig,
    bf: f64,
    clips: Vec<String>,
}

pub fn serialize_dataset(clips: &[StereoClip], scene: &SceneConfig, dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    for clip in clips {
        let root = dir.join(&clip.name);
        for sub in ["frames", "masks", "depth"] {
            mkdir(&root.join(sub))?;
        }
        for (t, f) in clip.frames.iter().enumerate() {
            io::write_rgb_png(
                &root.join(format!("frames/left_{t:06}.png")),
                clip.height,
                clip.width,
                &f.left.data,
            )?;
            if let Some(r) = &f.right {
                io::write_rgb_png(
                    &root.join(format!("frames/right_{t:06}.png")),
                    clip.height,
                    clip.width,
                    &r.data,
                )?;
            }
            io::write_u16_png(
                &root.join(format!("masks/{t:06}.png")),
                clip.height,
                clip.width,
                &f.ids,
            )?;
            io::write_pfm(
                &root.join(format!("depth/{t:06}.pfm")),
                clip.height,
                clip.width,
                &f.depth,
            )?;
        }
        let inst: BTreeMap<String, InstanceInfo> = clip
            .instances
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        io::write_json(&root.join("instances.json"), &inst)?;
    }
    let meta = DatasetMeta {
        scene: scene.clone(),
        bf: scene.bf,
        clips: clips.iter().map(|c| c.name.clone()).collect(),
    };
    io::write_json(&dir.join("meta.json"), &meta)
}

fn count_frames(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let name = e.map_err(|e| Error::io(dir, e))?.file_name();
        if name.to_string_lossy().starts_with("left_") {
            n += 1;
        }
    }
    Ok(n)
}

pub fn load_clip(root: &Path, bf: f64) -> Result<StereoClip> {
    let inst_path = root.join("instances.json");
    if !inst_path.exists() {
        return Err(Error::format(&inst_path, "missing instances.json"));
    }
    let raw: BTreeMap<String, InstanceInfo> = io::read_json(&inst_path)?;
    let mut instances = BTreeMap::new();
    for (k, v) in raw {
        let id: u16 = k
            .parse()
            .map_err(|_| Error::format(&inst_path, format!("bad instance id '{k}'")))?;
        instances.insert(id, v);
    }
    let n = count_frames(&root.join("frames"))?;
    if n == 0 {
        return Err(Error::format(root.join("frames"), "no left frames"));
    }
    let mut frames = Vec::with_capacity(n);
    let (mut height, mut width) = (0, 0);
    for t in 0..n {
        let lp = root.join(format!("frames/left_{t:06}.png"));
        let (h, w, left) = io::read_rgb_png(&lp)?;
        let rp = root.join(format!("frames/right_{t:06}.png"));
        let right = if rp.exists() {
            let (rh, rw, r) = io::read_rgb_png(&rp)?;
            if (rh, rw) != (h, w) {
                return Err(Error::format(&rp, "right view size differs from left"));
            }
            Some(Image {
                height: h,
                width: w,
                data: r,
            })
        } else {
            None
        };
        let mp = root.join(format!("masks/{t:06}.png"));
        let (mh, mw, ids) = io::read_u16_png(&mp)?;
        let dp = root.join(format!("depth/{t:06}.pfm"));
        let (dh, dw, depth) = io::read_pfm(&dp)?;
        if (mh, mw) != (h, w) || (dh, dw) != (h, w) {
            return Err(Error::format(
                &mp,
                "mask or depth size differs from the image",
            ));
        }
        if let Some(bad) = ids.iter().find(|&&v| v != 0 && !instances.contains_key(&v)) {
            return Err(Error::format(
                &mp,
                format!("instance id {bad} not in instances.json"),
            ));
        }
        height = h;
        width = w;
        frames.push(Frame {
            left: Image {
                height: h,
                width: w,
                data: left,
            },
            right,
            depth,
            ids,
        });
    }
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(StereoClip {
        name,
        height,
        width,
        bf,
        frames,
        instances,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::format(&meta_path, "missing dataset meta.json"));
    }
    let meta: DatasetMeta = io::read_json(&meta_path)?;
    let clips = meta
        .clips
        .iter()
        .map(|name| load_clip(&dir.join(name), meta.bf))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scene: meta.scene,
        clips,
    })
}

/// Directory of sequence `name` inside a dataset.
pub fn sequence_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::forward_warp;

    fn small() -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 64,
            clip_length: 4,
            noise_std: 0.0,
            bf: 48.0,
            depth_range: [6.0, 12.0],
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let cfg = SceneConfig {
            clip_length: 3,
            ..Default::default()
        };
        assert_eq!(
            generate_clip(&cfg, 5).unwrap(),
            generate_clip(&cfg, 5).unwrap()
        );
        assert_ne!(
            generate_clip(&cfg, 5).unwrap().frames[0].left,
            generate_clip(&cfg, 6).unwrap().frames[0].left
        );
    }

    #[test]
    fn right_view_is_the_forward_warped_left_view() {
        let cfg = small();
        for idx in 0..4 {
            let clip = generate_clip(&cfg, idx).unwrap();
            for t in 0..clip.len() {
                let (warped, valid) =
                    forward_warp(&clip.left::<f64>(t), &clip.disparity(t)).unwrap();
                let right = clip.right::<f64>(t).unwrap();
                for i in (0..valid.data.len()).filter(|&i| valid.data[i]) {
                    for c in 0..3 {
                        let p = clip.height * clip.width;
                        assert_eq!(warped.data[c * p + i], right.data[c * p + i]);
                    }
                }
            }
        }
    }

    #[test]
    fn object_offset_equals_bf_over_z() {
        let cfg = SceneConfig {
            objects_per_clip: [1, 1],
            noise_std: 0.0,
            ..Default::default()
        };
        let clip = generate_clip(&cfg, 2).unwrap();
        let f = &clip.frames[0];
        let z = f.depth[f.ids.iter().position(|&v| v == 1).unwrap()] as f64;
        let d = (cfg.bf / z).round() as usize;
        // Find a left pixel on the object whose right counterpart differs from its neighbours.
        let left = clip.left::<f64>(0);
        let right = clip.right::<f64>(0).unwrap();
        let w = clip.width;
        let mut checked = 0;
        for i in 0..f.ids.len() {
            let x = i % w;
            if f.ids[i] == 1 && x >= d && f.ids[i - d..=i].iter().all(|&v| v == 1) {
                assert_eq!(left.data[i], right.data[i - d]);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn masks_are_nonempty_and_identities_persist() {
        let clip = generate_clip(&SceneConfig::default(), 9).unwrap();
        for t in 0..clip.len() {
            let gt = clip.gt(t);
            assert!(gt.instances.iter().all(|i| i.mask.iter().any(|&m| m)));
            for inst in &gt.instances {
                assert_eq!(
                    clip.instances[&((inst.identity + 1) as u16)].class,
                    inst.class
                );
            }
        }
    }

    #[test]
    fn serialize_round_trip() {
        let cfg = SceneConfig {
            clip_length: 2,
            ..small()
        };
        let data = Dataset::generate(&cfg, 0, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        serialize_dataset(&data.clips, &cfg, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        fs::remove_file(dir.path().join("seq_0001/instances.json")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("instances.json"), "{err}");
    }

    #[test]
    fn monocular_family_shares_left_frames() {
        let cfg = SceneConfig {
            clip_length: 2,
            ..Default::default()
        };
        let a = generate_clip(&cfg, 1).unwrap();
        let b = generate_clip(&cfg.monocular(), 1).unwrap();
        assert!(b.frames.iter().all(|f| f.right.is_none()));
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.left, fb.left);
        }
    }
}
