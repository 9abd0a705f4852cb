//! Small 3-D helpers shared by the scene, channel and LiDAR code.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Axis-aligned box given by its min and max corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_center(center: Vec3, half: Vec3) -> Self {
        Aabb {
            min: sub(center, half),
            max: add(center, half),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Interiors overlap (touching faces do not count).
    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    /// Whether the closed segment `a`–`b` meets the closed box (slab test).
    pub fn intersects_segment(&self, a: Vec3, b: Vec3) -> bool {
        let d = sub(b, a);
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if a[i] < self.min[i] || a[i] > self.max[i] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let mut near = (self.min[i] - a[i]) * inv;
            let mut far = (self.max[i] - a[i]) * inv;
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    /// Distance from `p` to the surface of the box (zero on the surface).
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        if self.contains(p) {
            (0..3)
                .map(|i| (p[i] - self.min[i]).min(self.max[i] - p[i]))
                .fold(f64::INFINITY, f64::min)
        } else {
            let mut acc = 0.0;
            for i in 0..3 {
                let d = (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]);
                acc += d * d;
            }
            acc.sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_through_center_hits() {
        let b = Aabb::from_center([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        assert!(b.intersects_segment([-5.0, 0.0, 0.0], [5.0, 0.0, 0.0]));
        assert!(!b.intersects_segment([-5.0, 2.0, 0.0], [5.0, 2.0, 0.0]));
        // ends before reaching the box
        assert!(!b.intersects_segment([-5.0, 0.0, 0.0], [-2.0, 0.0, 0.0]));
    }

    #[test]
    fn surface_distance_inside_and_outside() {
        let b = Aabb::from_center([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
        assert_eq!(b.surface_distance([0.0, 0.0, 0.0]), 1.0);
        assert_eq!(b.surface_distance([1.0, 0.5, 0.5]), 0.0);
        assert!((b.surface_distance([4.0, 6.0, 0.0]) - 5.0).abs() < 1e-12);
    }
}
