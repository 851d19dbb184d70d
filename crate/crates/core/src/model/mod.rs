//! The full forward pass: HO tokens, per-layer locality and interaction
//! adapters wrapped around a frozen transformer, and text-embedding scores.

mod backbone;
pub mod checkpoint;
mod interaction;
mod locality;
mod text;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::category::CategorySpace;
use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{self, Init};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub use backbone::{backbone_layer, embed_patches, TokenSequence};
pub use interaction::{interaction_adapter, iprm, IprmOutput};
pub use locality::{build_layout_embedding, layout_assignment, locality_adapter};
pub use text::{compute_scores, text_embeddings};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub grid: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub adapter_dim: usize,
    pub adapter_heads: usize,
    pub kernels: Vec<usize>,
    pub num_queries: usize,
    pub roi_size: usize,
    pub roi_samples: usize,
    pub det_dim: usize,
    pub text_dim: usize,
    pub use_la: bool,
    pub use_ia: bool,
    /// When false, CLS and patch tokens cannot attend to HO tokens.
    pub patches_see_ho: bool,
    pub ln_eps: f64,
    pub init_seed: u64,
    /// Seed of the frozen backbone and text tables, shared across variants.
    pub frozen_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 64,
            heads: 4,
            grid: 8,
            patch_size: 8,
            mlp_ratio: 4,
            adapter_dim: 16,
            adapter_heads: 4,
            kernels: vec![1, 3, 5],
            num_queries: 4,
            roi_size: 3,
            roi_samples: 2,
            det_dim: 32,
            text_dim: 32,
            use_la: true,
            use_ia: true,
            patches_see_ho: true,
            ln_eps: 1e-5,
            init_seed: 0,
            frozen_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::invalid(msg)) };
        check(self.layers >= 1, "layers must be at least 1")?;
        check(self.heads >= 1 && self.width.is_multiple_of(self.heads), "width must be divisible by heads")?;
        check(
            self.adapter_heads >= 1 && self.adapter_dim.is_multiple_of(self.adapter_heads),
            "adapter_dim must be divisible by adapter_heads",
        )?;
        check(self.adapter_dim < self.width, "adapter_dim must be smaller than width")?;
        check(!self.kernels.is_empty(), "need at least one kernel size")?;
        check(self.kernels.iter().all(|k| k % 2 == 1), "kernel sizes must be odd")?;
        check(self.num_queries >= 1, "num_queries must be at least 1")?;
        check(self.roi_size >= 1 && self.roi_samples >= 1, "roi_size and roi_samples must be positive")?;
        check(self.grid >= 1 && self.patch_size >= 1, "grid and patch_size must be positive")?;
        check(self.ln_eps > 0.0, "ln_eps must be positive")
    }

    pub fn image_size(&self) -> usize {
        self.grid * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Canonical `key=value` listing of every field.
    pub fn to_text(&self) -> String {
        let kernels: Vec<String> = self.kernels.iter().map(usize::to_string).collect();
        [
            format!("layers={}", self.layers),
            format!("width={}", self.width),
            format!("heads={}", self.heads),
            format!("grid={}", self.grid),
            format!("patch_size={}", self.patch_size),
            format!("mlp_ratio={}", self.mlp_ratio),
            format!("adapter_dim={}", self.adapter_dim),
            format!("adapter_heads={}", self.adapter_heads),
            format!("kernels={}", kernels.join(",")),
            format!("num_queries={}", self.num_queries),
            format!("roi_size={}", self.roi_size),
            format!("roi_samples={}", self.roi_samples),
            format!("det_dim={}", self.det_dim),
            format!("text_dim={}", self.text_dim),
            format!("use_la={}", self.use_la),
            format!("use_ia={}", self.use_ia),
            format!("patches_see_ho={}", self.patches_see_ho),
            format!("ln_eps={:e}", self.ln_eps),
            format!("init_seed={}", self.init_seed),
            format!("frozen_seed={}", self.frozen_seed),
        ]
        .join("\n")
    }

    /// SHA-256 of [`Self::to_text`], hex.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        crate::tensor::hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Candidate (human, other) detection index pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoPairIndex {
    pub pairs: Vec<(usize, usize)>,
}

impl HoPairIndex {
    /// Every ordered `(u, v)` with `u != v` and `u` detected as human,
    /// lexicographic in `(u, v)`.
    pub fn enumerate(detections: &[Detection], human: usize) -> Self {
        let pairs = detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.class == human)
            .flat_map(|(u, _)| (0..detections.len()).filter(move |&v| v != u).map(move |v| (u, v)))
            .collect();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Lain {
    pub cfg: ModelConfig,
    pub space: CategorySpace,
    pub params: ParamStore,
}

pub(crate) fn layer_prefix(kind: &str, l: usize) -> String {
    format!("{kind}.{l}")
}

impl Lain {
    pub fn new(cfg: ModelConfig, space: CategorySpace) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let (d, dt) = (cfg.width, cfg.text_dim);

        let mut frozen_rng = ChaCha8Rng::seed_from_u64(cfg.frozen_seed);
        {
            let mut init = Init {
                store: &mut params,
                rng: &mut frozen_rng,
                trainable: false,
            };
            backbone::init(&mut init, &cfg)?;
            text::init_frozen(&mut init, &cfg, &space)?;
        }

        // One stream per module, so switching an adapter off leaves the
        // initial weights of everything else untouched.
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
            rng.set_stream(k);
            rng
        };
        let mut rng = stream(0);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            trainable: true,
        };
        init.ffn("ho.feature", 2 * cfg.det_dim, d, d, 1.0)?;
        init.ffn("ho.geometry", PAIR_GEOMETRY, d, d, 1.0)?;
        init.tensor("text.prompt_offset", Tensor::zeros(&[2 * dt]))?;
        init.tensor("text.log_tau", Tensor::scalar(0.0))?;
        for l in 0..cfg.layers {
            if cfg.use_la {
                let mut rng = stream(1 + 2 * l as u64);
                let mut init = Init {
                    store: &mut params,
                    rng: &mut rng,
                    trainable: true,
                };
                locality::init(&mut init, &cfg, &layer_prefix("la", l))?;
            }
            if cfg.use_ia {
                let mut rng = stream(2 + 2 * l as u64);
                let mut init = Init {
                    store: &mut params,
                    rng: &mut rng,
                    trainable: true,
                };
                interaction::init(&mut init, &cfg, &layer_prefix("ia", l))?;
            }
        }
        Ok(Self { cfg, space, params })
    }

    /// Every gate of every adapter (`*.gamma`).
    pub fn gate_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.ends_with(".gamma"))
            .map(str::to_string)
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, pixels: &[f32], detections: &[Detection]) -> Result<ForwardOutput> {
        lain_forward(g, self, pixels, detections)
    }

    /// Forward pass followed by the score head; `None` scores when there are no pairs.
    pub fn score(&self, g: &mut Graph, pixels: &[f32], detections: &[Detection]) -> Result<(ForwardOutput, Option<Var>)> {
        let out = self.forward(g, pixels, detections)?;
        let scores = match out.ho_tokens {
            Some(t) => {
                let e = text_embeddings(g, self)?;
                Some(text::scores_learned_tau(g, &self.params, t, e)?)
            }
            None => None,
        };
        Ok((out, scores))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pairs: HoPairIndex,
    /// `N_pair × width`, absent when there are no pairs.
    pub ho_tokens: Option<Var>,
    pub cls: Var,
    pub patches: Var,
}

const PAIR_GEOMETRY: usize = 10;

fn pair_geometry(h: &BBox, o: &BBox) -> Vec<f64> {
    let (hc, oc) = (crate::geometry::center(h), crate::geometry::center(o));
    let mut v = Vec::with_capacity(PAIR_GEOMETRY);
    v.extend_from_slice(h);
    v.extend_from_slice(o);
    v.push(oc.0 - hc.0);
    v.push(oc.1 - hc.1);
    v
}

/// HO tokens from concatenated detector features, plus a learned encoding of
/// the pair's box geometry.
pub fn construct_ho_tokens(
    g: &mut Graph,
    model: &Lain,
    detections: &[Detection],
) -> Result<(HoPairIndex, Option<Var>)> {
    let pairs = HoPairIndex::enumerate(detections, model.space.human());
    if pairs.is_empty() {
        return Ok((pairs, None));
    }
    let dd = model.cfg.det_dim;
    let mut feats = Vec::with_capacity(pairs.len() * 2 * dd);
    let mut geo = Vec::with_capacity(pairs.len() * PAIR_GEOMETRY);
    for &(u, v) in &pairs.pairs {
        for d in [&detections[u], &detections[v]] {
            if d.feature.len() != dd {
                return Err(Error::invalid(format!(
                    "detection feature has length {}, expected {dd}",
                    d.feature.len()
                )));
            }
            feats.extend_from_slice(&d.feature);
        }
        geo.extend(pair_geometry(&detections[u].bbox, &detections[v].bbox));
    }
    let n = pairs.len();
    let f = g.constant(Tensor::from_parts(vec![n, 2 * dd], feats));
    let f = nn::ffn(g, &model.params, "ho.feature", f)?;
    let p = g.constant(Tensor::from_parts(vec![n, PAIR_GEOMETRY], geo));
    let p = nn::ffn(g, &model.params, "ho.geometry", p)?;
    Ok((pairs, Some(g.add(f, p)?)))
}

pub fn lain_forward(g: &mut Graph, model: &Lain, pixels: &[f32], detections: &[Detection]) -> Result<ForwardOutput> {
    let cfg = &model.cfg;
    let mut seq = embed_patches(g, model, pixels)?;
    let (pairs, ho) = construct_ho_tokens(g, model, detections)?;
    seq.ho_tokens = ho;
    let pair_boxes: Vec<(BBox, BBox)> = pairs
        .pairs
        .iter()
        .map(|&(u, v)| (detections[u].bbox, detections[v].bbox))
        .collect();
    for l in 0..cfg.layers {
        if cfg.use_la {
            seq.patches = locality_adapter(g, model, l, seq.patches, detections)?;
        }
        if cfg.use_ia {
            if let Some(t) = seq.ho_tokens {
                seq.ho_tokens = Some(interaction_adapter(g, model, l, t, seq.patches, &pair_boxes)?);
            }
        }
        seq = backbone_layer(g, model, l, seq)?;
    }
    Ok(ForwardOutput {
        pairs,
        ho_tokens: seq.ho_tokens,
        cls: seq.cls,
        patches: seq.patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize) -> Detection {
        Detection {
            bbox: [0.1, 0.1, 0.4, 0.4],
            class,
            confidence: 1.0,
            feature: vec![0.0; 32],
        }
    }

    #[test]
    fn pair_enumeration() {
        let dets = [det(0), det(0), det(2)];
        let idx = HoPairIndex::enumerate(&dets, 0);
        assert_eq!(idx.pairs, vec![(0, 1), (0, 2), (1, 0), (1, 2)]);
        assert!(HoPairIndex::enumerate(&[det(1), det(2)], 0).is_empty());
        assert!(HoPairIndex::enumerate(&[det(0)], 0).is_empty());
    }

    #[test]
    fn adapter_init_does_not_depend_on_other_adapters() {
        let space = CategorySpace::toy(4, 4).unwrap();
        let both = Lain::new(ModelConfig::default(), space.clone()).unwrap();
        let ia_only = Lain::new(
            ModelConfig {
                use_la: false,
                ..ModelConfig::default()
            },
            space,
        )
        .unwrap();
        for (name, p) in ia_only.params.iter() {
            assert_eq!(p, both.params.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.kernels = vec![1, 2];
        assert!(c.validate().is_err());
        let c = ModelConfig {
            adapter_dim: 64,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
