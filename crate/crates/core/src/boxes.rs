//! Axis-aligned box helpers on plain `[f64; 4]` arrays.

/// `(x1, y1, x2, y2)`.
pub type Xyxy = [f64; 4];
/// `(cx, cy, w, h)`.
pub type Cxcywh = [f64; 4];

pub fn cxcywh_to_xyxy(b: Cxcywh) -> Xyxy {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

pub fn xyxy_to_cxcywh(b: Xyxy) -> Cxcywh {
    [
        0.5 * (b[0] + b[2]),
        0.5 * (b[1] + b[3]),
        b[2] - b[0],
        b[3] - b[1],
    ]
}

/// COCO `(x, y, w, h)` to `(x1, y1, x2, y2)`.
pub fn xywh_to_xyxy(b: [f64; 4]) -> Xyxy {
    [b[0], b[1], b[0] + b[2], b[1] + b[3]]
}

pub fn xyxy_to_xywh(b: Xyxy) -> [f64; 4] {
    [b[0], b[1], b[2] - b[0], b[3] - b[1]]
}

pub fn area(b: &Xyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn is_valid(b: &Xyxy) -> bool {
    b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]
}

fn intersection(a: &Xyxy, b: &Xyxy) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

pub fn iou(a: &Xyxy, b: &Xyxy) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `(-1, 1]`.
pub fn giou(a: &Xyxy, b: &Xyxy) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

pub fn clip_to(b: Xyxy, width: f64, height: f64) -> Xyxy {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}
