#![allow(dead_code)]

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udfa::data::{generate, Dataset, SyntheticSpec};
use udfa::detcore::{BoxSet, DetectionSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn((n, 3, h, w), |_| rng.random_range(0.05..0.95))
}

/// Boxes at least 3 px wide inside an `h x w` image.
pub fn random_boxes(rng: &mut ChaCha8Rng, count: usize, h: usize, w: usize, classes: usize) -> BoxSet {
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..count {
        let bw = rng.random_range(3.0..w as f32 * 0.8);
        let bh = rng.random_range(3.0..h as f32 * 0.8);
        let x0 = rng.random_range(0.0..w as f32 - bw);
        let y0 = rng.random_range(0.0..h as f32 - bh);
        boxes.push([x0, y0, x0 + bw, y0 + bh]);
        labels.push(rng.random_range(0..classes));
    }
    BoxSet::new(boxes, labels).unwrap()
}

pub fn dataset(seed: u64, num_images: usize, first_index: usize) -> Dataset {
    generate(&SyntheticSpec {
        seed,
        num_images,
        first_index,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

/// Central difference of `f` at coordinate `idx` of `x`.
pub fn central_difference(x: &Array4<f64>, idx: (usize, usize, usize, usize), h: f64, f: impl Fn(&Array4<f64>) -> f64) -> f64 {
    let mut xp = x.clone();
    xp[idx] += h;
    let mut xm = x.clone();
    xm[idx] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        diff / na.max(nb)
    }
}

pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let (a, b) = (a.map(f64::from), b.map(f64::from));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Brute-force AP at one IoU threshold, as a fraction.
///
/// Each class is handled separately. Detections are ranked globally by
/// score, matched image by image to the highest-IoU GT not yet taken, and
/// the precision at every recall level is the best precision at any rank
/// reaching at least that recall.
pub fn oracle_ap(dets: &[DetectionSet], gts: &[BoxSet], thr: f64) -> Option<f64> {
    let classes: std::collections::BTreeSet<usize> = gts.iter().flat_map(|g| g.labels.iter().copied()).collect();
    if classes.is_empty() {
        return None;
    }
    let mut per_class = Vec::new();
    for &c in &classes {
        let num_gt: usize = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == c).count()).sum();
        // (score, image, position in that image's sorted list, det index)
        let mut all = Vec::new();
        for (img, d) in dets.iter().enumerate() {
            let mut order: Vec<usize> = (0..d.scores.len()).filter(|&i| d.scores[i] >= 0.01).collect();
            order.sort_by(|&a, &b| d.scores[b].partial_cmp(&d.scores[a]).unwrap());
            order.truncate(100);
            let mut pos = 0;
            for i in order {
                if d.labels[i] == c {
                    all.push((d.scores[i], img, pos, i));
                    pos += 1;
                }
            }
        }
        // matching is per image in score order, independent of other images
        let mut tp = std::collections::HashMap::new();
        for img in 0..dets.len() {
            let mut mine: Vec<_> = all.iter().filter(|e| e.1 == img).collect();
            mine.sort_by_key(|e| e.2);
            let gt: Vec<[f32; 4]> = gts[img].boxes.iter().zip(&gts[img].labels).filter(|(_, &l)| l == c).map(|(b, _)| *b).collect();
            let mut taken = vec![false; gt.len()];
            for e in mine {
                let mut best = None;
                let mut best_iou = -1.0;
                for (j, g) in gt.iter().enumerate() {
                    let v = iou(&dets[img].boxes[e.3], g);
                    if !taken[j] && v >= thr && v > best_iou {
                        best_iou = v;
                        best = Some(j);
                    }
                }
                if let Some(j) = best {
                    taken[j] = true;
                }
                tp.insert((img, e.3), best.is_some());
            }
        }
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = all.iter().map(|e| tp[&(e.1, e.3)]).collect();
        let prec_at = |k: usize| flags[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64;
        let mut ap = 0.0;
        for k in 0..flags.len() {
            if flags[k] {
                // this rank adds 1/num_gt of recall
                let best = (k..flags.len()).map(prec_at).fold(0.0, f64::max);
                ap += best / num_gt as f64;
            }
        }
        per_class.push(ap);
    }
    Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
}
