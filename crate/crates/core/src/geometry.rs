//! Oriented-box helpers for footprint overlap and constant-velocity contact tests.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    /// Expresses a world point in this pose's local frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn pose_to_local(&self, other: &Pose) -> Pose {
        let p = self.to_local([other.x, other.y]);
        Pose::new(p[0], p[1], wrap_angle(other.heading - self.heading))
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r < -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: [f64; 2], heading: f64, length: f64, width: f64) -> Self {
        Self { center, heading, half_length: length / 2.0, half_width: width / 2.0 }
    }

    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    /// Projection interval of the box onto a unit axis.
    fn project(&self, axis: [f64; 2]) -> (f64, f64) {
        let [u, v] = self.axes();
        let mid = dot(self.center, axis);
        let r = self.half_length * dot(u, axis).abs() + self.half_width * dot(v, axis).abs();
        (mid - r, mid + r)
    }

    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        self.axes().into_iter().chain(other.axes()).all(|axis| {
            let (a0, a1) = self.project(axis);
            let (b0, b1) = other.project(axis);
            a0 <= b1 && b0 <= a1
        })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [u, v] = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        dot(d, u).abs() <= self.half_length && dot(d, v).abs() <= self.half_width
    }

    /// Axis-aligned bounding box as `(min, max)` corners.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.heading.sin_cos();
        let ex = self.half_length * c.abs() + self.half_width * s.abs();
        let ey = self.half_length * s.abs() + self.half_width * c.abs();
        ([self.center[0] - ex, self.center[1] - ey], [self.center[0] + ex, self.center[1] + ey])
    }

    pub fn translated(&self, d: [f64; 2]) -> OrientedBox {
        OrientedBox { center: [self.center[0] + d[0], self.center[1] + d[1]], ..*self }
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Earliest `t` in `[0, horizon]` at which `moving`, translated by
/// `t * velocity`, touches `fixed`; `None` if it never does in that window.
///
/// Both boxes keep their orientation, so along each separating axis the
/// projections move linearly and the contact window is an interval
/// intersection.
pub fn first_contact(moving: &OrientedBox, velocity: [f64; 2], fixed: &OrientedBox, horizon: f64) -> Option<f64> {
    let mut lo = 0.0f64;
    let mut hi = horizon;
    for axis in moving.axes().into_iter().chain(fixed.axes()) {
        let (a0, a1) = moving.project(axis);
        let (b0, b1) = fixed.project(axis);
        let u = dot(velocity, axis);
        // overlap while a0 + t u <= b1 and a1 + t u >= b0
        if u.abs() < 1e-15 {
            if a0 > b1 || a1 < b0 {
                return None;
            }
            continue;
        }
        let t_enter = if u > 0.0 { (b0 - a1) / u } else { (b1 - a0) / u };
        let t_exit = if u > 0.0 { (b1 - a0) / u } else { (b0 - a1) / u };
        lo = lo.max(t_enter);
        hi = hi.min(t_exit);
        if lo > hi {
            return None;
        }
    }
    Some(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_round_trip() {
        let pose = Pose::new(3.0, -2.0, 0.7);
        let p = [1.5, 4.0];
        let back = pose.to_world(pose.to_local(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn rotated_boxes_overlap() {
        let a = OrientedBox::new([0.0, 0.0], 0.0, 4.0, 2.0);
        let b = OrientedBox::new([3.5, 0.0], std::f64::consts::FRAC_PI_4, 4.0, 2.0);
        assert!(a.overlaps(&b));
        let c = OrientedBox::new([6.0, 0.0], std::f64::consts::FRAC_PI_4, 4.0, 2.0);
        assert!(!a.overlaps(&c));
    }

    #[test]
    fn head_on_contact_time() {
        let a = OrientedBox::new([0.0, 0.0], 0.0, 4.0, 2.0);
        let b = OrientedBox::new([10.0, 0.0], 0.0, 4.0, 2.0);
        let t = first_contact(&a, [6.0, 0.0], &b, 5.0).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!(first_contact(&a, [6.0, 0.0], &b, 0.5).is_none());
        assert!(first_contact(&a, [0.0, 6.0], &b, 5.0).is_none());
        assert_eq!(first_contact(&a, [0.0, 0.0], &a.translated([1.0, 0.0]), 1.0), Some(0.0));
    }
}
