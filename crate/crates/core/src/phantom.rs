//! Procedural 2D attenuation phantoms: ellipse collections rendered onto a
//! pixel grid. Coordinates are "object" units where the image field of view
//! spans [-1, 1] on both axes.

use rand::Rng;

use crate::image::Image2D;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseSpec {
    /// center in object coordinates
    pub cx: f64,
    pub cy: f64,
    /// semi-axes before rotation (a along x)
    pub a: f64,
    pub b: f64,
    /// counterclockwise rotation, radians
    pub angle: f64,
    /// additive attenuation (1/cm)
    pub value: f64,
}

impl EllipseSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.angle.sin_cos();
        let xr = dx * cos + dy * sin;
        let yr = -dx * sin + dy * cos;
        let q = xr * xr / (self.a * self.a) + yr * yr / (self.b * self.b);
        q <= 1.0
    }

    /// Half-extents of the axis-aligned bounding box.
    fn bbox_half(&self) -> (f64, f64) {
        let (sin, cos) = self.angle.sin_cos();
        let hx = ((self.a * cos).powi(2) + (self.b * sin).powi(2)).sqrt();
        let hy = ((self.a * sin).powi(2) + (self.b * cos).powi(2)).sqrt();
        (hx, hy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub ellipses: Vec<EllipseSpec>,
    pub image: Image2D,
}

/// Rasterize by pixel-center membership: each pixel gets the sum of the
/// values of every ellipse containing its center. Ellipses are visited one
/// at a time over their bounding boxes.
pub fn render(ellipses: &[EllipseSpec], n: usize, spacing: f64) -> Image2D {
    assert!(n >= 16, "phantom grid must be at least 16, got {n}");
    let mut img = Image2D::zeros(n, n, spacing);
    let half_fov = 0.5 * n as f64 * spacing;
    // object-unit coordinate of pixel center (col index axis)
    let coord = move |i: usize| (i as f64 - (n as f64 - 1.0) / 2.0) * spacing / half_fov;
    // first/last pixel index whose center coordinate can be >= lo / <= hi
    let lo_px = |lo: f64| (((lo * half_fov / spacing) + (n as f64 - 1.0) / 2.0).floor().max(0.0)) as usize;
    let hi_px = |hi: f64| {
        (((hi * half_fov / spacing) + (n as f64 - 1.0) / 2.0).ceil()).clamp(0.0, n as f64 - 1.0)
            as usize
    };
    for e in ellipses {
        let (hx, hy) = e.bbox_half();
        for row in lo_px(-(e.cy + hy))..=hi_px(-(e.cy - hy)) {
            // y decreases with row, so the row window comes from -cy -/+ hy
            let y = -coord(row);
            for col in lo_px(e.cx - hx)..=hi_px(e.cx + hx) {
                if e.contains(coord(col), y) {
                    img.set(row, col, img.get(row, col) + e.value);
                }
            }
        }
    }
    img
}

/// The classic ten-ellipse head phantom (original high-contrast values).
pub fn shepp_logan_ellipses() -> Vec<EllipseSpec> {
    let deg = std::f64::consts::PI / 180.0;
    let e = |value: f64, a: f64, b: f64, cx: f64, cy: f64, phi_deg: f64| EllipseSpec {
        cx,
        cy,
        a,
        b,
        angle: phi_deg * deg,
        value,
    };
    vec![
        e(2.00, 0.6900, 0.9200, 0.0, 0.0, 0.0),
        e(-0.98, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
        e(-0.02, 0.1100, 0.3100, 0.22, 0.0, -18.0),
        e(-0.02, 0.1600, 0.4100, -0.22, 0.0, 18.0),
        e(0.01, 0.2100, 0.2500, 0.0, 0.35, 0.0),
        e(0.01, 0.0460, 0.0460, 0.0, 0.10, 0.0),
        e(0.01, 0.0460, 0.0460, 0.0, -0.10, 0.0),
        e(0.01, 0.0460, 0.0230, -0.08, -0.605, 0.0),
        e(0.01, 0.0230, 0.0230, 0.0, -0.606, 0.0),
        e(0.01, 0.0230, 0.0460, 0.06, -0.605, 0.0),
    ]
}

pub fn shepp_logan(n: usize, spacing: f64) -> Phantom {
    let ellipses = shepp_logan_ellipses();
    let image = render(&ellipses, n, spacing);
    Phantom { ellipses, image }
}

/// Homogeneous disk of the given attenuation, for noise calibration.
pub fn uniform_disk(value: f64, radius: f64, n: usize, spacing: f64) -> Phantom {
    let ellipses = vec![EllipseSpec {
        cx: 0.0,
        cy: 0.0,
        a: radius,
        b: radius,
        angle: 0.0,
        value,
    }];
    let image = render(&ellipses, n, spacing);
    Phantom { ellipses, image }
}

/// Sampling ranges for random phantoms. Defaults keep every interior
/// ellipse inside the body and the worst-case overlap nonnegative:
/// center_radius + semi_axis.1 <= body_axis.0 and
/// count.1 * |contrast.0| <= body_value.0.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPhantomCfg {
    /// interior ellipse count, inclusive bounds
    pub count: (usize, usize),
    pub semi_axis: (f64, f64),
    /// interior centers are drawn within this radius of the origin
    pub center_radius: f64,
    /// additive attenuation of interior ellipses (1/cm)
    pub contrast: (f64, f64),
    /// body ellipse attenuation (1/cm), water-like by default
    pub body_value: (f64, f64),
    pub body_axis: (f64, f64),
}

impl Default for RandomPhantomCfg {
    fn default() -> Self {
        RandomPhantomCfg {
            count: (2, 6),
            semi_axis: (0.05, 0.30),
            center_radius: 0.40,
            contrast: (-0.03, 0.05),
            body_value: (0.19, 0.21),
            body_axis: (0.75, 0.95),
        }
    }
}

impl RandomPhantomCfg {
    fn validate(&self) {
        assert!(self.count.0 <= self.count.1, "empty count range");
        assert!(self.semi_axis.0 > 0.0 && self.semi_axis.0 <= self.semi_axis.1);
        assert!(self.contrast.0 <= self.contrast.1);
        assert!(self.body_value.0 > 0.0 && self.body_value.0 <= self.body_value.1);
        assert!(self.body_axis.0 > 0.0 && self.body_axis.0 <= self.body_axis.1);
        assert!(
            self.center_radius + self.semi_axis.1 <= self.body_axis.0,
            "interior ellipses could escape the body"
        );
        assert!(
            self.count.1 as f64 * (-self.contrast.0).max(0.0) <= self.body_value.0,
            "overlapping dark ellipses could drive attenuation negative"
        );
    }
}

/// Seeded body-plus-interior-ellipses phantom. Same seed, same phantom.
pub fn random_phantom(seed: u64, cfg: &RandomPhantomCfg, n: usize, spacing: f64) -> Phantom {
    cfg.validate();
    const TAG: u64 = 0x7068616e746f6d; // "phantom"
    let mut rng = stream(seed, TAG, 0, 0);
    let range = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };
    let mut ellipses = vec![EllipseSpec {
        cx: 0.0,
        cy: 0.0,
        a: range(&mut rng, cfg.body_axis),
        b: range(&mut rng, cfg.body_axis),
        angle: range(&mut rng, (0.0, std::f64::consts::PI)),
        value: range(&mut rng, cfg.body_value),
    }];
    let count = rng.random_range(cfg.count.0..=cfg.count.1);
    for _ in 0..count {
        let r = cfg.center_radius * rng.random_range(0.0f64..1.0).sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        ellipses.push(EllipseSpec {
            cx: r * phi.cos(),
            cy: r * phi.sin(),
            a: range(&mut rng, cfg.semi_axis),
            b: range(&mut rng, cfg.semi_axis),
            angle: range(&mut rng, (0.0, std::f64::consts::PI)),
            value: range(&mut rng, cfg.contrast),
        });
    }
    let image = render(&ellipses, n, spacing);
    Phantom { ellipses, image }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent rasterizer: full per-pixel gather with its own membership
    /// arithmetic.
    fn render_oracle(ellipses: &[EllipseSpec], n: usize, spacing: f64) -> Image2D {
        let mut img = Image2D::zeros(n, n, spacing);
        let half_fov = 0.5 * n as f64 * spacing;
        for row in 0..n {
            for col in 0..n {
                let x = img.x_of(col) / half_fov;
                let y = img.y_of(row) / half_fov;
                let mut v = 0.0;
                for e in ellipses {
                    let dx = x - e.cx;
                    let dy = y - e.cy;
                    let xr = (dx * e.angle.cos() + dy * e.angle.sin()) / e.a;
                    let yr = (-dx * e.angle.sin() + dy * e.angle.cos()) / e.b;
                    if xr * xr + yr * yr <= 1.0 {
                        v += e.value;
                    }
                }
                img.set(row, col, v);
            }
        }
        img
    }

    #[test]
    fn empty_list_renders_zero() {
        let img = render(&[], 32, 0.1);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_disk_hits_center_not_corners() {
        let disk = EllipseSpec {
            cx: 0.0,
            cy: 0.0,
            a: 0.5,
            b: 0.5,
            angle: 0.0,
            value: 0.2,
        };
        let img = render(&[disk], 64, 0.1);
        assert_eq!(img.get(32, 32), 0.2);
        assert_eq!(img.get(31, 31), 0.2);
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(63, 63), 0.0);
        assert_eq!(img.get(0, 63), 0.0);
    }

    #[test]
    fn shepp_logan_matches_membership_oracle() {
        let ellipses = shepp_logan_ellipses();
        let fast = render(&ellipses, 64, 2.0 / 64.0);
        let slow = render_oracle(&ellipses, 64, 2.0 / 64.0);
        assert_eq!(fast.data(), slow.data());
    }

    #[test]
    fn rotated_ellipses_match_membership_oracle() {
        let tilted = vec![
            EllipseSpec { cx: 0.2, cy: -0.1, a: 0.5, b: 0.15, angle: 0.7, value: 1.0 },
            EllipseSpec { cx: -0.3, cy: 0.25, a: 0.1, b: 0.4, angle: -1.2, value: 0.5 },
        ];
        let fast = render(&tilted, 97, 0.03);
        let slow = render_oracle(&tilted, 97, 0.03);
        assert_eq!(fast.data(), slow.data());
    }

    #[test]
    fn rendering_is_additive_for_disjoint_lists() {
        let a = vec![EllipseSpec { cx: -0.5, cy: 0.0, a: 0.2, b: 0.3, angle: 0.3, value: 0.7 }];
        let b = vec![EllipseSpec { cx: 0.5, cy: 0.1, a: 0.25, b: 0.1, angle: -0.2, value: 0.4 }];
        let both: Vec<EllipseSpec> = a.iter().chain(&b).copied().collect();
        let sum = render(&a, 48, 0.05).add(&render(&b, 48, 0.05)).unwrap();
        assert_eq!(render(&both, 48, 0.05).data(), sum.data());
    }

    #[test]
    fn shepp_logan_nonnegative_and_bounded() {
        let ph = shepp_logan(64, 2.0 / 64.0);
        let pos_sum: f64 = ph.ellipses.iter().map(|e| e.value.max(0.0)).sum();
        assert!(ph.image.min() >= 0.0);
        assert!(ph.image.max() <= pos_sum);
    }

    #[test]
    fn random_phantoms_deterministic_and_distinct() {
        let cfg = RandomPhantomCfg::default();
        let a = random_phantom(11, &cfg, 32, 0.1);
        let b = random_phantom(11, &cfg, 32, 0.1);
        assert_eq!(a, b);

        let phantoms: Vec<Phantom> = (0..100).map(|s| random_phantom(s, &cfg, 32, 0.1)).collect();
        for i in 0..phantoms.len() {
            for j in i + 1..phantoms.len() {
                assert_ne!(
                    phantoms[i].ellipses, phantoms[j].ellipses,
                    "seeds {i} and {j} collided"
                );
            }
        }
    }

    #[test]
    fn random_phantoms_stay_in_unit_disk_and_nonnegative() {
        let cfg = RandomPhantomCfg::default();
        for seed in 0..25 {
            let ph = random_phantom(seed, &cfg, 64, 0.25);
            assert!(ph.image.min() >= 0.0, "seed {seed} went negative");
            let n = ph.image.height();
            let half_fov = 0.5 * n as f64 * ph.image.spacing();
            for row in 0..n {
                for col in 0..n {
                    let x = ph.image.x_of(col) / half_fov;
                    let y = ph.image.y_of(row) / half_fov;
                    if x * x + y * y > 1.0 {
                        assert_eq!(ph.image.get(row, col), 0.0, "seed {seed} at ({row},{col})");
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_count_range_gives_body_plus_one() {
        let cfg = RandomPhantomCfg {
            count: (1, 1),
            ..RandomPhantomCfg::default()
        };
        let ph = random_phantom(5, &cfg, 32, 0.1);
        assert_eq!(ph.ellipses.len(), 2);
    }

    #[test]
    fn uniform_disk_is_flat_inside() {
        let ph = uniform_disk(0.2, 0.9, 64, 0.25);
        let inside = ph.image.disk_indices(0.5);
        assert!(inside.iter().all(|&i| ph.image.data()[i] == 0.2));
    }
}
