//! Segmentation metrics over semantic label maps.
//!
//! Class-frame pairs whose union is empty are undefined and excluded from every
//! average. Surface distances use the exact Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class id per pixel, `0` = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn max_class(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn mask(&self, c: u32) -> Vec<bool> {
        self.data.iter().map(|&v| v == c).collect()
    }

    pub fn contains(&self, c: u32) -> bool {
        self.data.contains(&c)
    }
}

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Argument(format!(
            "label maps differ in shape: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// `(|P ∩ G|, |P|, |G|)` for class `c`.
fn counts(pred: &LabelMap, gt: &LabelMap, c: u32) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == c, b == c);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    (inter, p, g)
}

/// IoU of class `c`, `None` when the class is absent from both maps.
pub fn per_class_iou(pred: &LabelMap, gt: &LabelMap, c: u32) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let (i, p, g) = counts(pred, gt, c);
    let union = p + g - i;
    Ok((union > 0).then(|| i as f64 / union as f64))
}

pub fn per_class_dice(pred: &LabelMap, gt: &LabelMap, c: u32) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let (i, p, g) = counts(pred, gt, c);
    Ok((p + g > 0).then(|| 2.0 * i as f64 / (p + g) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub ch_iou: f64,
    pub isi_iou: f64,
    pub mc_iou: f64,
    /// Mean IoU of each class `1..=C` over frames where it is defined.
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub dsc: f64,
    pub mcd: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn num_classes(preds: &[LabelMap], gts: &[LabelMap]) -> u32 {
    preds
        .iter()
        .chain(gts)
        .map(LabelMap::max_class)
        .max()
        .unwrap_or(0)
}

fn check_frames(preds: &[LabelMap], gts: &[LabelMap]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    preds
        .iter()
        .zip(gts)
        .try_for_each(|(p, g)| check_pair(p, g))
}

/// Per frame and class statistic; `frame_mean` restricted to GT-present classes
/// (or present-in-either when `include_pred`) and class means over frames.
fn aggregate(
    preds: &[LabelMap],
    gts: &[LabelMap],
    stat: fn(usize, usize, usize) -> f64,
) -> (f64, f64, Vec<Option<f64>>, f64) {
    let nc = num_classes(preds, gts);
    let mut gt_frame = Vec::new();
    let mut any_frame = Vec::new();
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); nc as usize];
    for (p, g) in preds.iter().zip(gts) {
        let mut gt_vals = Vec::new();
        let mut any_vals = Vec::new();
        for c in 1..=nc {
            let (i, np, ng) = counts(p, g, c);
            if np + ng == 0 {
                continue;
            }
            let v = stat(i, np, ng);
            any_vals.push(v);
            if ng > 0 {
                gt_vals.push(v);
            }
            per_class[c as usize - 1].push(v);
        }
        if !gt_vals.is_empty() {
            gt_frame.push(mean(&gt_vals));
        }
        if !any_vals.is_empty() {
            any_frame.push(mean(&any_vals));
        }
    }
    let class_means: Vec<Option<f64>> = per_class
        .iter()
        .map(|v| (!v.is_empty()).then(|| mean(v)))
        .collect();
    let defined: Vec<f64> = class_means.iter().flatten().copied().collect();
    (
        mean(&gt_frame),
        mean(&any_frame),
        class_means,
        mean(&defined),
    )
}

fn iou_stat(i: usize, p: usize, g: usize) -> f64 {
    i as f64 / (p + g - i) as f64
}

fn dice_stat(i: usize, p: usize, g: usize) -> f64 {
    2.0 * i as f64 / (p + g) as f64
}

/// Ch_IoU, ISI_IoU and mcIoU over aligned frames.
pub fn dataset_ious(preds: &[LabelMap], gts: &[LabelMap]) -> Result<IouSummary> {
    check_frames(preds, gts)?;
    let (ch_iou, isi_iou, per_class, mc_iou) = aggregate(preds, gts, iou_stat);
    Ok(IouSummary {
        ch_iou,
        isi_iou,
        mc_iou,
        per_class,
    })
}

/// DSC (frame mean over GT-present classes) and mcD (class mean).
pub fn dice_scores(preds: &[LabelMap], gts: &[LabelMap]) -> Result<DiceSummary> {
    check_frames(preds, gts)?;
    let (dsc, _, _, mcd) = aggregate(preds, gts, dice_stat);
    Ok(DiceSummary { dsc, mcd })
}

/// Mask pixels with a 4-neighbour outside the mask (image exterior counts as outside).
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if !mask[p] {
                continue;
            }
            let interior = y > 0
                && y + 1 < height
                && x > 0
                && x + 1 < width
                && mask[p - 1]
                && mask[p + 1]
                && mask[p - width]
                && mask[p + width];
            out[p] = !interior;
        }
    }
    out
}

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                    continue;
                }
                if s <= z[k] {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            },
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_edt(seeds: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; height];
    let mut tmp = vec![0.0; height.max(width)];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        dt_1d(&col, &mut tmp[..height]);
        for y in 0..height {
            grid[y * width + x] = tmp[y];
        }
    }
    for y in 0..height {
        let row = grid[y * width..(y + 1) * width].to_vec();
        dt_1d(&row, &mut grid[y * width..(y + 1) * width]);
    }
    grid
}

/// `(HD, ASD)` between mask boundaries; `None` if either mask is empty.
pub fn surface_distances(
    pred: &[bool],
    gt: &[bool],
    height: usize,
    width: usize,
) -> Result<Option<(f64, f64)>> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::Argument("mask size does not match image".into()));
    }
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return Ok(None);
    }
    let bp = boundary(pred, height, width);
    let bg = boundary(gt, height, width);
    let dp = squared_edt(&bp, height, width);
    let dg = squared_edt(&bg, height, width);
    let directed = |from: &[bool], to_dist: &[f64]| {
        let d: Vec<f64> = from
            .iter()
            .zip(to_dist)
            .filter(|(&b, _)| b)
            .map(|(_, &d)| d.sqrt())
            .collect();
        let max = d.iter().copied().fold(0.0, f64::max);
        (max, mean(&d))
    };
    let (max_pg, mean_pg) = directed(&bp, &dg);
    let (max_gp, mean_gp) = directed(&bg, &dp);
    Ok(Some((max_pg.max(max_gp), 0.5 * (mean_pg + mean_gp))))
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MetricsReport {
    pub Ch_IoU: f64,
    pub ISI_IoU: f64,
    pub mcIoU: f64,
    pub per_class: Vec<Option<f64>>,
    pub DSC: f64,
    pub mcD: f64,
    pub HD: f64,
    pub ASD: f64,
    pub frames: usize,
    /// Class-frame pairs present in exactly one of prediction / GT, skipped by HD/ASD.
    pub excluded_pairs: usize,
}

pub fn evaluate(preds: &[LabelMap], gts: &[LabelMap]) -> Result<MetricsReport> {
    let iou = dataset_ious(preds, gts)?;
    let dice = dice_scores(preds, gts)?;
    let nc = num_classes(preds, gts);
    let mut hd = Vec::new();
    let mut asd = Vec::new();
    let mut excluded = 0;
    for (p, g) in preds.iter().zip(gts) {
        for c in 1..=nc {
            let (pm, gm) = (p.mask(c), g.mask(c));
            if !pm.iter().any(|&v| v) && !gm.iter().any(|&v| v) {
                continue;
            }
            match surface_distances(&pm, &gm, p.height, p.width)? {
                Some((h, a)) => {
                    hd.push(h);
                    asd.push(a);
                }
                None => excluded += 1,
            }
        }
    }
    Ok(MetricsReport {
        Ch_IoU: iou.ch_iou,
        ISI_IoU: iou.isi_iou,
        mcIoU: iou.mc_iou,
        per_class: iou.per_class,
        DSC: dice.dsc,
        mcD: dice.mcd,
        HD: mean(&hd),
        ASD: mean(&asd),
        frames: preds.len(),
        excluded_pairs: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: &[u32]) -> LabelMap {
        LabelMap::new(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn per_class_iou_examples() {
        let gt = map(1, 4, &[1, 1, 1, 1]);
        assert_eq!(per_class_iou(&gt, &gt, 1).unwrap(), Some(1.0));
        let pred = map(1, 4, &[1, 1, 0, 0]);
        assert_eq!(per_class_iou(&pred, &gt, 1).unwrap(), Some(0.5));
        assert_eq!(per_class_iou(&pred, &gt, 3).unwrap(), None);
        assert!(matches!(
            per_class_iou(&pred, &map(2, 2, &[0; 4]), 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn worked_ch_vs_isi_example() {
        let gt = map(1, 6, &[1, 1, 1, 1, 0, 0]);
        let pred = map(1, 6, &[1, 1, 0, 0, 2, 2]);
        let s = dataset_ious(&[pred], &[gt]).unwrap();
        assert_eq!(s.ch_iou, 0.5);
        assert_eq!(s.isi_iou, 0.25);
    }

    #[test]
    fn mciou_is_class_mean() {
        // class 1: IoU 0.2 (1 of 5); class 2: IoU 0.8 (4 of 5).
        let gt = map(1, 10, &[1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
        let pred = map(1, 10, &[1, 0, 0, 0, 0, 2, 2, 2, 2, 0]);
        let s = dataset_ious(&[pred], &[gt]).unwrap();
        assert!((s.mc_iou - 0.5).abs() < 1e-12);
        assert!(dataset_ious(&[], &[]).is_err());
    }

    #[test]
    fn dice_examples() {
        let gt = map(1, 4, &[1, 1, 1, 1]);
        let pred = map(1, 4, &[1, 1, 0, 0]);
        let d = dice_scores(&[pred], &[gt.clone()]).unwrap();
        assert!((d.dsc - 0.66667).abs() < 1e-5);
        assert_eq!(dice_scores(&[gt.clone()], &[gt.clone()]).unwrap().dsc, 1.0);
        let disjoint = map(1, 4, &[0, 0, 0, 0]);
        assert_eq!(per_class_dice(&disjoint, &gt, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn surface_distance_examples() {
        let a = vec![true, false, false, false];
        let b = vec![false, false, false, true];
        assert_eq!(surface_distances(&a, &b, 1, 4).unwrap(), Some((3.0, 3.0)));
        assert_eq!(surface_distances(&a, &a, 1, 4).unwrap(), Some((0.0, 0.0)));
        let mut p = vec![false; 16];
        let mut g = vec![false; 16];
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            p[y * 4 + x] = true;
            g[y * 4 + x - 1] = true;
        }
        assert_eq!(surface_distances(&p, &g, 4, 4).unwrap().unwrap().0, 1.0);
        assert_eq!(surface_distances(&p, &[false; 16], 4, 4).unwrap(), None);
    }

    #[test]
    fn edt_matches_brute_force() {
        let (h, w) = (7, 9);
        let seeds: Vec<bool> = (0..h * w).map(|i| (i * 37 + 11) % 13 == 0).collect();
        let d = squared_edt(&seeds, h, w);
        for p in 0..h * w {
            let best = (0..h * w)
                .filter(|&q| seeds[q])
                .map(|q| {
                    let dy = (p / w) as f64 - (q / w) as f64;
                    let dx = (p % w) as f64 - (q % w) as f64;
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[p], best);
        }
    }

    #[test]
    fn report_serializes_undefined_as_null() {
        let gt = map(1, 2, &[0, 0]);
        let r = evaluate(&[gt.clone()], &[gt]).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["Ch_IoU"].is_null());
        assert_eq!(json["frames"], 1);
    }
}
