//! Axis-aligned box geometry: IoU, GIoU and the GIoU loss gradient.
//!
//! Boxes are `[x_min, y_min, x_max, y_max]` in pixel units.

use crate::Real;

pub fn area(b: &[f32; 4]) -> f64 {
    ((b[2] - b[0]).max(0.0) as f64) * ((b[3] - b[1]).max(0.0) as f64)
}

pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = ((a[2].max(b[2]) - a[0].min(b[0])) as f64) * ((a[3].max(b[3]) - a[1].min(b[1])) as f64);
    inter / union - (hull - union) / hull
}

/// `1 - GIoU(pred, gt)` and its gradient with respect to `pred`.
///
/// `pred` must have positive width and height.
pub fn giou_loss_grad<F: Real>(pred: [F; 4], gt: [F; 4]) -> (F, [F; 4]) {
    let zero = F::zero();
    let one = F::one();
    let [x1, y1, x2, y2] = pred;
    let [g1, h1, g2, h2] = gt;
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_g = (g2 - g1) * (h2 - h1);

    let iw_raw = x2.min(g2) - x1.max(g1);
    let ih_raw = y2.min(h2) - y1.max(h1);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;
    let union = area_p + area_g - inter;

    let cw = x2.max(g2) - x1.min(g1);
    let ch = y2.max(h2) - y1.min(h1);
    let hull = cw * ch;

    // loss = 2 - I/U - U/C
    let loss = F::lit(2.0) - inter / union - union / hull;

    let g_area = inter / (union * union) - one / hull;
    let g_inter = -one / union - g_area;
    let g_hull = union / (hull * hull);

    // d iw / d(x1, x2), d ih / d(y1, y2)
    let (diw_x1, diw_x2) = if iw_raw > zero {
        (if x1 > g1 { -one } else { zero }, if x2 < g2 { one } else { zero })
    } else {
        (zero, zero)
    };
    let (dih_y1, dih_y2) = if ih_raw > zero {
        (if y1 > h1 { -one } else { zero }, if y2 < h2 { one } else { zero })
    } else {
        (zero, zero)
    };
    let dcw_x1 = if x1 < g1 { -one } else { zero };
    let dcw_x2 = if x2 > g2 { one } else { zero };
    let dch_y1 = if y1 < h1 { -one } else { zero };
    let dch_y2 = if y2 > h2 { one } else { zero };

    let grad = [
        g_inter * ih * diw_x1 + g_area * (-ph) + g_hull * ch * dcw_x1,
        g_inter * iw * dih_y1 + g_area * (-pw) + g_hull * cw * dch_y1,
        g_inter * ih * diw_x2 + g_area * ph + g_hull * ch * dcw_x2,
        g_inter * iw * dih_y2 + g_area * pw + g_hull * cw * dch_y2,
    ];
    (loss, grad)
}
