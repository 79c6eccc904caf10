//! Synthetic two-modality scene generator. Camera grids carry clean class
//! evidence at jittered positions; lidar grids carry exact positions with
//! mixed-up class amplitudes and range-dependent dropout.

use serde::{Deserialize, Serialize};

use crate::error::{DynafuseError, Result};
use crate::grid::{FeatureGrid, GridSpec};
use crate::head::BevBox;
use crate::heatmap::{gaussian_radius, MIN_OVERLAP};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Camera,
    Lidar,
}

impl std::str::FromStr for Modality {
    type Err = DynafuseError;
    fn from_str(s: &str) -> Result<Modality> {
        match s {
            "camera" => Ok(Modality::Camera),
            "lidar" => Ok(Modality::Lidar),
            other => Err(DynafuseError::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub channels: usize,
    pub classes: usize,
    pub n_boxes_min: usize,
    pub n_boxes_max: usize,
    /// white-noise level added to every camera cell
    pub sigma_cam: f64,
    /// camera blob center jitter, meters
    pub sigma_pos: f64,
    /// per-cell dropout probability beyond `drop_radius`
    pub drop_rate: f64,
    /// meters from the origin where lidar returns start thinning
    pub drop_radius: f64,
    /// fraction of lidar amplitude leaking into the confusable class
    pub confusion: f64,
    /// blob amplitude per class
    pub amplitudes: Vec<f64>,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            channels: 8,
            classes: 4,
            n_boxes_min: 3,
            n_boxes_max: 6,
            sigma_cam: 0.05,
            sigma_pos: 1.0,
            drop_rate: 0.5,
            drop_radius: 12.0,
            confusion: 0.35,
            amplitudes: vec![1.0, 0.9, 0.8, 0.7],
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(DynafuseError::invalid("class set must be non-empty"));
        }
        if self.channels < self.classes {
            return Err(DynafuseError::invalid(format!(
                "need at least {} channels for {} class channels",
                self.classes, self.classes
            )));
        }
        if self.n_boxes_min > self.n_boxes_max {
            return Err(DynafuseError::invalid("n_boxes_min exceeds n_boxes_max"));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) || !(0.0..=1.0).contains(&self.confusion) {
            return Err(DynafuseError::invalid("rates must lie in [0, 1]"));
        }
        if self.sigma_cam < 0.0 || self.sigma_pos < 0.0 || self.drop_radius < 0.0 {
            return Err(DynafuseError::invalid("sigma and radius values must be >= 0"));
        }
        if self.amplitudes.len() != self.classes {
            return Err(DynafuseError::invalid(format!(
                "{} amplitudes for {} classes",
                self.amplitudes.len(),
                self.classes
            )));
        }
        if self.amplitudes.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(DynafuseError::invalid("amplitudes must be positive and finite"));
        }
        Ok(())
    }
}

/// Fixed confusable-class pairing: neighbors swap within consecutive pairs
/// (0<->1, 2<->3, ...); a trailing odd class pairs with class 0.
pub fn confusable_class(class_id: usize, classes: usize) -> usize {
    let partner = class_id ^ 1;
    if partner < classes {
        partner
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub spec: GridSpec,
    pub gt_boxes: Vec<BevBox>,
    pub camera_feat: FeatureGrid,
    pub lidar_feat: FeatureGrid,
}

/// Stamp an isotropic Gaussian blob of the given amplitude into one channel.
fn stamp_blob(grid: &mut FeatureGrid, channel: usize, col: f64, row: f64, sigma: f64, amp: f64) {
    let denom = 2.0 * sigma * sigma;
    for r in 0..grid.height {
        for c in 0..grid.width {
            let d2 = (c as f64 - col).powi(2) + (r as f64 - row).powi(2);
            let v = amp * (-d2 / denom).exp();
            if v > 1e-12 {
                let cur = grid.get(channel, r, c);
                grid.set(channel, r, c, cur.max(v));
            }
        }
    }
}

pub fn generate_scene(seed: u64, cfg: &SceneGenConfig, spec: &GridSpec) -> Result<Scene> {
    cfg.validate()?;
    let mut box_rng = Rng::new(seed).split(0xb0_5e5);
    let mut cam_rng = Rng::new(seed).split(0xca_a3a);
    let mut lidar_rng = Rng::new(seed).split(0x11_da2);

    let n = cfg.n_boxes_min + box_rng.below(cfg.n_boxes_max - cfg.n_boxes_min + 1);
    let margin = 1.0;
    let mut gt_boxes = Vec::with_capacity(n);
    for _ in 0..n {
        let cx = box_rng.uniform(spec.x_min + margin, spec.x_max - margin);
        let cy = box_rng.uniform(spec.y_min + margin, spec.y_max - margin);
        gt_boxes.push(BevBox {
            class_id: box_rng.below(cfg.classes),
            cx,
            cy,
            length: box_rng.uniform(2.0, 5.0),
            width: box_rng.uniform(1.0, 2.5),
            yaw: box_rng.uniform(-std::f64::consts::PI, std::f64::consts::PI),
            score: 1.0,
        });
    }

    let h = spec.n_rows();
    let w = spec.n_cols();
    let mut camera = FeatureGrid::new(cfg.channels, h, w, 0.0)?;
    let mut lidar = FeatureGrid::new(cfg.channels, h, w, 0.0)?;

    for b in &gt_boxes {
        let sigma = gaussian_radius(b.length, b.width, spec, MIN_OVERLAP);
        let amp = cfg.amplitudes[b.class_id];

        // camera: jittered center, accurate class channel
        let jx = b.cx + cfg.sigma_pos * cam_rng.normal();
        let jy = b.cy + cfg.sigma_pos * cam_rng.normal();
        let (ccol, crow) = spec.world_to_cell(jx, jy);
        stamp_blob(&mut camera, b.class_id, ccol, crow, sigma, amp);
        for ch in cfg.classes..cfg.channels {
            stamp_blob(&mut camera, ch, ccol, crow, sigma, 0.5 * amp);
        }

        // lidar: exact, sharp center but amplitude leaks to the confusable class
        let (lcol, lrow) = spec.world_to_cell(b.cx, b.cy);
        let sharp = (0.5 * sigma).max(0.5);
        let other = confusable_class(b.class_id, cfg.classes);
        stamp_blob(&mut lidar, b.class_id, lcol, lrow, sharp, (1.0 - cfg.confusion) * amp);
        if other != b.class_id {
            stamp_blob(&mut lidar, other, lcol, lrow, sharp, cfg.confusion * amp);
        }
        for ch in cfg.classes..cfg.channels {
            stamp_blob(&mut lidar, ch, lcol, lrow, sharp, 0.5 * amp);
        }
    }

    if cfg.sigma_cam > 0.0 {
        for v in camera.data.iter_mut() {
            *v += cfg.sigma_cam * cam_rng.normal();
        }
    }

    if cfg.drop_rate > 0.0 {
        for r in 0..h {
            for c in 0..w {
                let (x, y) = spec.cell_to_world(c as f64, r as f64);
                if (x * x + y * y).sqrt() > cfg.drop_radius
                    && lidar_rng.next_f64() < cfg.drop_rate
                {
                    for ch in 0..cfg.channels {
                        lidar.set(ch, r, c, 0.0);
                    }
                }
            }
        }
    }

    Ok(Scene {
        seed,
        spec: spec.clone(),
        gt_boxes,
        camera_feat: camera,
        lidar_feat: lidar,
    })
}

/// Zero out cells of one modality independently at the given rate, seeded
/// from the scene's own seed so corruption is reproducible.
pub fn corrupt_modality(s: &Scene, which: Modality, dropout: f64) -> Result<Scene> {
    if !(0.0..=1.0).contains(&dropout) {
        return Err(DynafuseError::invalid("dropout must lie in [0, 1]"));
    }
    let mut out = s.clone();
    if dropout == 0.0 {
        return Ok(out);
    }
    let stream = match which {
        Modality::Camera => 0xd20_9ca,
        Modality::Lidar => 0xd20_91d,
    };
    let mut rng = Rng::new(s.seed).split(stream);
    let grid = match which {
        Modality::Camera => &mut out.camera_feat,
        Modality::Lidar => &mut out.lidar_feat,
    };
    for r in 0..grid.height {
        for c in 0..grid.width {
            if rng.next_f64() < dropout {
                for ch in 0..grid.channels {
                    grid.set(ch, r, c, 0.0);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GridSpec {
        GridSpec::new(-8.0, 8.0, -8.0, 8.0, 1.0).unwrap()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SceneGenConfig::default();
        let spec = small_spec();
        let a = generate_scene(11, &cfg, &spec).unwrap();
        let b = generate_scene(11, &cfg, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(12, &cfg, &spec).unwrap();
        assert_ne!(a.camera_feat.data, c.camera_feat.data);
    }

    #[test]
    fn box_count_respects_range() {
        let mut cfg = SceneGenConfig::default();
        cfg.n_boxes_min = 3;
        cfg.n_boxes_max = 6;
        let spec = small_spec();
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg, &spec).unwrap();
            assert!(s.gt_boxes.len() >= 3 && s.gt_boxes.len() <= 6);
            for b in &s.gt_boxes {
                assert!(s.spec.contains(b.cx, b.cy));
            }
        }
    }

    #[test]
    fn noise_free_config_renders_clean_blobs() {
        let mut cfg = SceneGenConfig::default();
        cfg.sigma_cam = 0.0;
        cfg.sigma_pos = 0.0;
        cfg.drop_rate = 0.0;
        cfg.confusion = 0.0;
        cfg.n_boxes_min = 1;
        cfg.n_boxes_max = 1;
        let spec = small_spec();
        let s = generate_scene(5, &cfg, &spec).unwrap();
        let b = &s.gt_boxes[0];
        let (col, row) = spec.world_to_cell(b.cx, b.cy);
        let (ri, ci) = (row.round() as usize, col.round() as usize);
        // camera peak sits at the box's own class channel near its center
        let cam_peak = s.camera_feat.get(b.class_id, ri, ci);
        assert!(cam_peak > 0.5 * cfg.amplitudes[b.class_id]);
        // lidar peak is exactly centered: the center cell dominates its row
        let lid_peak = s.lidar_feat.get(b.class_id, ri, ci);
        for c in 0..s.lidar_feat.width {
            assert!(s.lidar_feat.get(b.class_id, ri, c) <= lid_peak + 1e-12);
        }
    }

    #[test]
    fn lidar_mixes_class_amplitude_camera_does_not() {
        let mut cfg = SceneGenConfig::default();
        cfg.sigma_cam = 0.0;
        cfg.sigma_pos = 0.0;
        cfg.drop_rate = 0.0;
        cfg.n_boxes_min = 1;
        cfg.n_boxes_max = 1;
        let spec = small_spec();
        let s = generate_scene(3, &cfg, &spec).unwrap();
        let b = &s.gt_boxes[0];
        let other = confusable_class(b.class_id, cfg.classes);
        let (col, row) = spec.world_to_cell(b.cx, b.cy);
        let (ri, ci) = (row.round() as usize, col.round() as usize);
        let cam_own = s.camera_feat.get(b.class_id, ri, ci);
        let cam_other = s.camera_feat.get(other, ri, ci);
        let lid_own = s.lidar_feat.get(b.class_id, ri, ci);
        let lid_other = s.lidar_feat.get(other, ri, ci);
        // camera margin (own minus confused) clearly beats lidar's
        assert!(cam_own - cam_other > lid_own - lid_other + 0.1);
        assert!(lid_other > 0.0);
    }

    #[test]
    fn confusable_pairing_is_an_involution_for_even_classes() {
        for k in 0..4 {
            assert_eq!(confusable_class(confusable_class(k, 4), 4), k);
            assert_ne!(confusable_class(k, 4), k);
        }
        // odd trailing class falls back to class 0
        assert_eq!(confusable_class(2, 3), 0);
    }

    #[test]
    fn corrupt_zero_is_identity_and_one_clears() {
        let cfg = SceneGenConfig::default();
        let spec = small_spec();
        let s = generate_scene(9, &cfg, &spec).unwrap();
        let same = corrupt_modality(&s, Modality::Camera, 0.0).unwrap();
        assert_eq!(s, same);
        let gone = corrupt_modality(&s, Modality::Lidar, 1.0).unwrap();
        assert!(gone.lidar_feat.data.iter().all(|&v| v == 0.0));
        assert_eq!(gone.camera_feat, s.camera_feat);
    }

    #[test]
    fn corrupt_half_drops_about_half_reproducibly() {
        let cfg = SceneGenConfig {
            sigma_cam: 0.0,
            sigma_pos: 0.0,
            drop_rate: 0.0,
            ..SceneGenConfig::default()
        };
        let spec = GridSpec::new(-5.0, 5.0, -5.0, 5.0, 1.0).unwrap();
        let mut s = generate_scene(2, &cfg, &spec).unwrap();
        for v in s.camera_feat.data.iter_mut() {
            *v = 1.0;
        }
        let a = corrupt_modality(&s, Modality::Camera, 0.5).unwrap();
        let b = corrupt_modality(&s, Modality::Camera, 0.5).unwrap();
        assert_eq!(a, b);
        let cells = (s.camera_feat.height * s.camera_feat.width) as f64;
        let survived = (0..s.camera_feat.height)
            .flat_map(|r| (0..s.camera_feat.width).map(move |c| (r, c)))
            .filter(|&(r, c)| a.camera_feat.get(0, r, c) != 0.0)
            .count() as f64;
        let frac = survived / cells;
        assert!(frac > 0.3 && frac < 0.7, "surviving fraction {frac}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let spec = small_spec();
        let mut cfg = SceneGenConfig::default();
        cfg.classes = 0;
        cfg.amplitudes.clear();
        assert!(generate_scene(1, &cfg, &spec).is_err());
        let mut cfg = SceneGenConfig::default();
        cfg.drop_rate = 1.5;
        assert!(generate_scene(1, &cfg, &spec).is_err());
        let mut cfg = SceneGenConfig::default();
        cfg.amplitudes.pop();
        assert!(generate_scene(1, &cfg, &spec).is_err());
        let s = generate_scene(1, &SceneGenConfig::default(), &spec).unwrap();
        assert!(corrupt_modality(&s, Modality::Camera, -0.1).is_err());
    }

    #[test]
    fn scene_round_trips_through_json() {
        let cfg = SceneGenConfig::default();
        let spec = small_spec();
        let s = generate_scene(4, &cfg, &spec).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: Scene = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
