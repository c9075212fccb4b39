//! Contrastive and squared-hinge triplet losses on scalar scores, with
//! their derivatives. Distances are absolute score differences; the
//! derivative of `|.|` at zero and of the hinge at its kink is taken as 0.

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `y d^2 + (1 - y) max(m - d, 0)^2` with `d = |s_i - s_j|`.
pub fn contrastive_loss(s_i: f64, s_j: f64, label: u8, margin: f64) -> f64 {
    let d = (s_i - s_j).abs();
    if label == 1 {
        d * d
    } else {
        let h = (margin - d).max(0.0);
        h * h
    }
}

/// Derivatives of [`contrastive_loss`] with respect to `(s_i, s_j)`.
pub fn contrastive_grad(s_i: f64, s_j: f64, label: u8, margin: f64) -> (f64, f64) {
    let diff = s_i - s_j;
    let g = if label == 1 {
        2.0 * diff
    } else {
        let h = margin - diff.abs();
        if h > 0.0 {
            -2.0 * h * sgn(diff)
        } else {
            0.0
        }
    };
    (g, -g)
}

/// `max(|s_a - s_p| - |s_a - s_n| + m, 0)^2`.
pub fn triplet_loss(s_a: f64, s_p: f64, s_n: f64, margin: f64) -> f64 {
    let h = ((s_a - s_p).abs() - (s_a - s_n).abs() + margin).max(0.0);
    h * h
}

/// Derivatives of [`triplet_loss`] with respect to `(s_a, s_p, s_n)`.
pub fn triplet_grad(s_a: f64, s_p: f64, s_n: f64, margin: f64) -> (f64, f64, f64) {
    let h = (s_a - s_p).abs() - (s_a - s_n).abs() + margin;
    if h <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let sp = sgn(s_a - s_p);
    let sn = sgn(s_a - s_n);
    let c = 2.0 * h;
    (c * (sp - sn), -c * sp, c * sn)
}

/// Distance of a contrastive sample from the nearest non-smooth point.
pub(crate) fn contrastive_kink_distance(s_i: f64, s_j: f64, label: u8, margin: f64) -> f64 {
    if label == 1 {
        f64::INFINITY
    } else {
        let d = (s_i - s_j).abs();
        d.min((margin - d).abs())
    }
}

pub(crate) fn triplet_kink_distance(s_a: f64, s_p: f64, s_n: f64, margin: f64) -> f64 {
    let pre = (s_a - s_p).abs() - (s_a - s_n).abs() + margin;
    pre.abs().min((s_a - s_p).abs()).min((s_a - s_n).abs())
}
