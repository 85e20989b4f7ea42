//! Frozen synthetic detector and observation assembly.
//!
//! The score of a view is the product of a distance trapezoid, a bearing
//! falloff across the field of view, and the fraction of sample rays that
//! reach the object disc unobstructed.

use serde::{Deserialize, Serialize};

use crate::env::{cast_ray, depth_scan, ray_blocked, DepthConfig, Point, Pose};
use crate::error::{CoreError, Result};
use crate::scenario::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub fov: f64,
    pub d_min: f64,
    pub d_lo: f64,
    pub d_hi: f64,
    pub d_max: f64,
    pub n_samples: usize,
    pub img_w: f64,
    pub img_h: f64,
    pub bbox_scale: f64,
    /// Amplitude of the seeded per-pose score perturbation; 0 disables it.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            fov: 90.0,
            d_min: 0.6,
            d_lo: 1.0,
            d_hi: 2.0,
            d_max: 4.5,
            n_samples: 5,
            img_w: 300.0,
            img_h: 300.0,
            bbox_scale: 150.0,
            noise: 0.0,
            noise_seed: 0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.d_min
            && self.d_min < self.d_lo
            && self.d_lo <= self.d_hi
            && self.d_hi < self.d_max
            && self.fov > 0.0
            && self.fov <= 180.0
            && self.n_samples >= 1
            && self.img_w > 0.0
            && self.img_h > 0.0
            && self.bbox_scale > 0.0
            && (0.0..=1.0).contains(&self.noise);
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidDetector(format!("{self:?}")))
        }
    }

    /// Distance factor: 0 outside `[d_min, d_max]`, 1 on `[d_lo, d_hi]`, linear between.
    pub fn distance_factor(&self, d: f64) -> f64 {
        if d < self.d_min || d > self.d_max {
            0.0
        } else if d < self.d_lo {
            (d - self.d_min) / (self.d_lo - self.d_min)
        } else if d <= self.d_hi {
            1.0
        } else {
            (self.d_max - d) / (self.d_max - self.d_hi)
        }
    }

    /// Bearing factor: 1 on the optical axis, 0 at and beyond the FOV edge.
    pub fn bearing_factor(&self, bearing_deg: f64) -> f64 {
        (1.0 - bearing_deg.abs() / (self.fov / 2.0)).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f64,
    pub bbox: Option<BBox>,
}

/// Signed bearing (degrees, CCW positive, in (−180, 180]) of `target` seen from `pose`.
pub fn bearing_deg(pose: &Pose, origin: Point, target: Point) -> f64 {
    let world = (target.y - origin.y).atan2(target.x - origin.x).to_degrees();
    let mut b = world - pose.heading as f64 * 30.0;
    while b > 180.0 {
        b -= 360.0;
    }
    while b <= -180.0 {
        b += 360.0;
    }
    b
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fraction of sample rays from `origin` to points spread across the object's
/// diameter (perpendicular to the line of sight) that are unobstructed.
pub fn visible_fraction(origin: Point, scene: &Scene, params: &DetectorParams) -> f64 {
    let obj = &scene.object;
    let (ux, uy) = (obj.center.x - origin.x, obj.center.y - origin.y);
    let len = ux.hypot(uy);
    let (px, py) = if len > 0.0 { (-uy / len, ux / len) } else { (0.0, 0.0) };
    let n = params.n_samples;
    let clear = (0..n)
        .filter(|&k| {
            let s = if n == 1 {
                0.0
            } else {
                obj.radius * (2.0 * k as f64 / (n - 1) as f64 - 1.0)
            };
            let target = Point::new(obj.center.x + s * px, obj.center.y + s * py);
            !ray_blocked(origin, target, &scene.grid)
        })
        .count();
    clear as f64 / n as f64
}

/// Detector output at `pose` with explicit parameters.
pub fn detect_with(pose: &Pose, scene: &Scene, params: &DetectorParams) -> Detection {
    let origin = scene.grid.pose_center(pose);
    let obj = &scene.object;
    let d = origin.distance(&obj.center);
    let beta = bearing_deg(pose, origin, obj.center);
    let g = params.distance_factor(d);
    let h = params.bearing_factor(beta);
    let mut score = if g * h > 0.0 {
        g * h * visible_fraction(origin, scene, params)
    } else {
        0.0
    };
    if params.noise > 0.0 && score > 0.0 {
        let key = splitmix(
            params.noise_seed ^ ((pose.x as u64) << 32 | (pose.y as u64) << 8 | pose.heading as u64),
        );
        let u = (key >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        score = (score + params.noise * u).clamp(0.0, 1.0);
    }
    let score = quantize_score(score);
    if score <= 0.0 {
        return Detection {
            score: 0.0,
            bbox: None,
        };
    }
    let w = (params.bbox_scale * 2.0 * obj.radius / d).clamp(1.0, params.img_w);
    let bh = (w * obj.aspect).clamp(1.0, params.img_h);
    let cx = (params.img_w * (0.5 + beta / params.fov)).clamp(w / 2.0, params.img_w - w / 2.0);
    let cy = (params.img_h / 2.0).clamp(bh / 2.0, params.img_h - bh / 2.0);
    Detection {
        score,
        bbox: Some(BBox { cx, cy, w, h: bh }),
    }
}

/// Detector output at `pose` using the scene's frozen detector.
pub fn detect(pose: &Pose, scene: &Scene) -> Detection {
    detect_with(pose, scene, &scene.detector)
}

pub fn bbox_area(det: &Detection) -> f64 {
    det.bbox.map(|b| b.w * b.h).unwrap_or(0.0)
}

/// Which sensor channels the policy may see. Bounding box, score and the
/// target cue are always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelMask {
    pub rgb: bool,
    pub depth: bool,
}

impl ChannelMask {
    pub const FULL: ChannelMask = ChannelMask { rgb: true, depth: true };
    pub const NONE: ChannelMask = ChannelMask { rgb: false, depth: false };
    pub const DEPTH_ONLY: ChannelMask = ChannelMask { rgb: false, depth: true };
    pub const RGB_ONLY: ChannelMask = ChannelMask { rgb: true, depth: false };

    /// Ablation masks in reporting order: w/o Both, w/o Depth, w/o RGB, Depth+RGB.
    pub const ABLATIONS: [ChannelMask; 4] = [
        ChannelMask::NONE,
        ChannelMask::RGB_ONLY,
        ChannelMask::DEPTH_ONLY,
        ChannelMask::FULL,
    ];

    pub fn label(&self) -> &'static str {
        match (self.rgb, self.depth) {
            (false, false) => "wo_both",
            (true, false) => "wo_depth",
            (false, true) => "wo_rgb",
            (true, true) => "depth_rgb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wo_both" | "none" => Ok(Self::NONE),
            "wo_depth" | "rgb" => Ok(Self::RGB_ONLY),
            "wo_rgb" | "depth" => Ok(Self::DEPTH_ONLY),
            "depth_rgb" | "full" | "rgb+depth" => Ok(Self::FULL),
            other => Err(CoreError::Usage(format!("unknown channel mask `{other}`"))),
        }
    }
}

impl Default for ChannelMask {
    fn default() -> Self {
        Self::FULL
    }
}

/// Length of the always-on target cue block.
pub const CUE_DIM: usize = 7;

/// Scores are multiples of this step, so sums of up to 2^12 rewards and
/// their differences are exact in `f64`.
pub const SCORE_QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

pub fn quantize_score(x: f64) -> f64 {
    (x / SCORE_QUANTUM).round() * SCORE_QUANTUM
}

/// Policy input at one timestep. Every entry lies in [0, 1] and the flat
/// length does not depend on the mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// cx/img_w, cy/img_h, w/img_w, h/img_h, present
    pub bbox_feat: [f64; 5],
    pub score: f64,
    pub rgb_proxy: Vec<f64>,
    pub depth_proxy: Vec<f64>,
    /// Heading (cos, sin), bearing to the object (sin, cos), grid-frame offset
    /// to the object (dx, dy) and its distance, each affinely mapped into [0, 1].
    pub target_cue: [f64; CUE_DIM],
    pub mask: ChannelMask,
}

impl Observation {
    pub fn dim(n_rays: usize) -> usize {
        5 + 1 + 2 * n_rays + CUE_DIM
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::dim(self.rgb_proxy.len()));
        v.extend_from_slice(&self.bbox_feat);
        v.push(self.score);
        v.extend_from_slice(&self.rgb_proxy);
        v.extend_from_slice(&self.depth_proxy);
        v.extend_from_slice(&self.target_cue);
        v
    }

    /// Zero-fills the channels excluded by `mask`.
    pub fn apply_mask(&mut self, mask: ChannelMask) {
        if !mask.rgb {
            self.rgb_proxy.iter_mut().for_each(|v| *v = 0.0);
        }
        if !mask.depth {
            self.depth_proxy.iter_mut().for_each(|v| *v = 0.0);
        }
        self.mask = ChannelMask {
            rgb: self.mask.rgb && mask.rgb,
            depth: self.mask.depth && mask.depth,
        };
    }
}

/// Sensor settings shared by the RGB sectors and the depth fan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub depth: DepthConfig,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            depth: DepthConfig::default(),
        }
    }
}

impl SensorConfig {
    pub fn obs_dim(&self) -> usize {
        Observation::dim(self.depth.n_rays)
    }
}

/// Assembles the policy observation at `pose`.
pub fn observe(pose: &Pose, scene: &Scene, sensors: &SensorConfig, mask: ChannelMask) -> Observation {
    let params = &scene.detector;
    let det = detect_with(pose, scene, params);
    let bbox_feat = match det.bbox {
        Some(b) => [
            b.cx / params.img_w,
            b.cy / params.img_h,
            b.w / params.img_w,
            b.h / params.img_h,
            1.0,
        ],
        None => [0.0; 5],
    };
    let grid = &scene.grid;
    let origin = grid.pose_center(pose);
    let obj = scene.object.center;
    let beta = bearing_deg(pose, origin, obj);

    let n = sensors.depth.n_rays;
    let mut rgb_proxy = vec![0.0; n];
    let fov = sensors.depth.fov_deg;
    let width = fov / n as f64;
    let sector = ((beta + fov / 2.0) / width).floor();
    if sector >= 0.0 && (sector as usize) < n && !ray_blocked(origin, obj, grid) {
        rgb_proxy[sector as usize] = 1.0;
    }
    let depth_proxy = depth_scan(pose, grid, &sensors.depth);

    let (room_w, room_h) = grid.extent();
    let diag = room_w.hypot(room_h);
    let span = room_w.max(room_h);
    let heading = pose.heading_rad();
    let b = beta.to_radians();
    let (dx, dy) = (obj.x - origin.x, obj.y - origin.y);
    let affine = |v: f64| (0.5 + 0.5 * v).clamp(0.0, 1.0);
    let target_cue = [
        affine(heading.cos()),
        affine(heading.sin()),
        affine(b.sin()),
        affine(b.cos()),
        affine(dx / span),
        affine(dy / span),
        (dx.hypot(dy) / diag).clamp(0.0, 1.0),
    ];
    let mut obs = Observation {
        bbox_feat,
        score: det.score,
        rgb_proxy,
        depth_proxy,
        target_cue,
        mask: ChannelMask::FULL,
    };
    obs.apply_mask(mask);
    obs
}

/// Range to the first obstacle straight ahead, in meters.
pub fn forward_clearance(pose: &Pose, scene: &Scene, max_range: f64) -> f64 {
    let grid = &scene.grid;
    cast_ray(grid.pose_center(pose), pose.heading_rad(), max_range, grid)
}
