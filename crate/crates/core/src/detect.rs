//! A controllable stand-in for an off-the-shelf object detector.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{ensure_min_extent, BBox};
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Gaussian std of each box coordinate, in normalized units.
    pub box_jitter: f64,
    pub class_flip: f64,
    pub miss: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Seeds the fixed class embeddings and geometry encoder.
    pub embed_seed: u64,
    pub num_classes: usize,
}

impl DetectorConfig {
    pub fn noiseless(num_classes: usize) -> Self {
        Self {
            box_jitter: 0.0,
            class_flip: 0.0,
            miss: 0.0,
            feature_dim: 32,
            feature_noise: 0.0,
            embed_seed: 0,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("class_flip", self.class_flip), ("miss", self.miss)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} probability {p} outside [0,1]")));
            }
        }
        if !(self.box_jitter >= 0.0 && self.feature_noise >= 0.0) {
            return Err(Error::invalid("noise scales must be nonnegative"));
        }
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("feature_dim and num_classes must be positive"));
        }
        Ok(())
    }
}

/// Confidence lost when the class label is wrong.
pub const FLIP_PENALTY: f64 = 0.3;

const GEOMETRY_FEATURES: usize = 8;

/// Fixed random tables that turn (class, box) into a detector feature.
#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    class_embed: Vec<Vec<f64>>,
    geometry: Vec<Vec<f64>>,
}

impl FeatureEncoder {
    pub fn new(cfg: &DetectorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.embed_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let class_embed = (0..cfg.num_classes)
            .map(|_| (0..cfg.feature_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let geometry = (0..cfg.feature_dim)
            .map(|_| (0..GEOMETRY_FEATURES).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Self {
            class_embed,
            geometry,
        }
    }

    pub fn encode(&self, class: usize, b: &BBox) -> Vec<f64> {
        let geo = [
            b[0],
            b[1],
            b[2],
            b[3],
            (b[0] + b[2]) * 0.5,
            (b[1] + b[3]) * 0.5,
            b[2] - b[0],
            b[3] - b[1],
        ];
        self.class_embed[class]
            .iter()
            .zip(&self.geometry)
            .map(|(c, row)| c + row.iter().zip(&geo).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }
}

/// One detection per surviving entity, in entity order.
pub fn simulate_detections(scene: &Scene, cfg: &DetectorConfig, seed: u64) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let encoder = FeatureEncoder::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, cfg.box_jitter).map_err(|e| Error::invalid(e.to_string()))?;
    let fnoise = Normal::new(0.0, cfg.feature_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let min_extent = 1.0 / scene.size as f64;
    let mut out = Vec::with_capacity(scene.entities.len());
    for e in &scene.entities {
        // draws happen unconditionally so one entity's fate never shifts another's
        let missed = rng.gen::<f64>() < cfg.miss;
        let deltas: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
        let flipped = cfg.num_classes > 1 && rng.gen::<f64>() < cfg.class_flip;
        let other = rng.gen_range(0..cfg.num_classes.max(2) - 1);
        let noise: Vec<f64> = (0..cfg.feature_dim).map(|_| fnoise.sample(&mut rng)).collect();
        if missed {
            continue;
        }
        let mut b: BBox = std::array::from_fn(|i| (e.bbox[i] + deltas[i]).clamp(0.0, 1.0));
        if b[0] > b[2] {
            b.swap(0, 2);
        }
        if b[1] > b[3] {
            b.swap(1, 3);
        }
        let b = ensure_min_extent(&b, min_extent);
        let class = if flipped {
            if other >= e.class {
                other + 1
            } else {
                other
            }
        } else {
            e.class
        };
        let magnitude = deltas.iter().map(|d| d * d).sum::<f64>().sqrt();
        let penalty = if flipped { FLIP_PENALTY } else { 0.0 };
        let confidence = (1.0 - magnitude - penalty).clamp(0.0, 1.0);
        let feature = encoder
            .encode(class, &b)
            .into_iter()
            .zip(noise)
            .map(|(f, n)| f + n)
            .collect();
        out.push(Detection {
            bbox: b,
            class,
            confidence,
            feature,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::category::CategorySpace;
    use crate::geometry::iou;
    use crate::scene::{generate_scene, SceneSpec};

    fn spec() -> SceneSpec {
        SceneSpec::new(CategorySpace::toy(4, 3).unwrap()).unwrap()
    }

    #[test]
    fn noiseless_detector_is_exact() {
        let s = spec();
        let cfg = DetectorConfig::noiseless(4);
        for seed in 0..20 {
            let scene = generate_scene(&s, seed).unwrap();
            let dets = simulate_detections(&scene, &cfg, seed).unwrap();
            assert_eq!(dets.len(), scene.entities.len());
            for (d, e) in dets.iter().zip(&scene.entities) {
                assert_eq!(d.bbox, e.bbox);
                assert_eq!(iou(&d.bbox, &e.bbox), 1.0);
                assert_eq!(d.class, e.class);
                assert_eq!(d.confidence, 1.0);
                assert_eq!(d.feature.len(), 32);
            }
        }
    }

    #[test]
    fn certain_miss_drops_everything() {
        let scene = generate_scene(&spec(), 1).unwrap();
        let cfg = DetectorConfig {
            miss: 1.0,
            ..DetectorConfig::noiseless(4)
        };
        assert!(simulate_detections(&scene, &cfg, 0).unwrap().is_empty());
    }

    #[test]
    fn retained_fraction_matches_miss_rate() {
        let s = spec();
        let cfg = DetectorConfig {
            miss: 0.3,
            ..DetectorConfig::noiseless(4)
        };
        let (mut total, mut kept) = (0usize, 0usize);
        let mut seed = 0;
        while total < 10_000 {
            let scene = generate_scene(&s, seed).unwrap();
            total += scene.entities.len();
            kept += simulate_detections(&scene, &cfg, seed + 1_000_000).unwrap().len();
            seed += 1;
        }
        let frac = kept as f64 / total as f64;
        // binomial sd at n=10^4 is ~0.0046; ±0.02 is over 4 sd
        assert!((frac - 0.7).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn noisy_boxes_stay_valid() {
        let s = spec();
        let cfg = DetectorConfig {
            box_jitter: 0.2,
            class_flip: 0.5,
            miss: 0.1,
            feature_noise: 0.1,
            ..DetectorConfig::noiseless(4)
        };
        for seed in 0..50 {
            let scene = generate_scene(&s, seed).unwrap();
            for d in simulate_detections(&scene, &cfg, seed).unwrap() {
                assert!(d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3], "{:?}", d.bbox);
                assert!(d.bbox.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!((0.0..=1.0).contains(&d.confidence));
                assert!(d.class < 4);
            }
        }
        let bad = DetectorConfig {
            miss: 1.5,
            ..DetectorConfig::noiseless(4)
        };
        assert!(simulate_detections(&generate_scene(&s, 0).unwrap(), &bad, 0).is_err());
    }
}
