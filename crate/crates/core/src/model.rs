//! The full landmark model: backbone features, hierarchical GCN, sigmoid
//! heatmap head and soft-argmax decoding, with a hand-written backward pass.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{two_mut, Backbone, BackboneCache, ConvIdx, FeatureConfig};
use crate::error::{Error, Result};
use crate::gnn::{
    decode_landmarks, gcn_forward, gcn_layer_backward, heatmap_head_backward, heatmap_head_forward,
    soft_argmax_backward, CoordinatePrediction, GnnConfig, GcnLayer, HeadCache, HeadGrads, HeadParams,
    Heatmaps, NormAdjacency,
};
use crate::graph::{assemble_hierarchy, HierGraph};
use crate::labels::{hierarchy_labels, LandmarkSet, NUM_LANDMARKS};
use crate::linalg::{Mat, Scalar};
use crate::nn::FeatureMap;
use crate::objective::{total_loss, total_loss_with_grad, LossConfig, LossReport};
use crate::par::Exec;
use crate::params::{Grads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: u32,
    pub image_size: usize,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub gnn: GnnConfig,
}

impl ModelConfig {
    pub fn new(levels: u32, image_size: usize) -> Self {
        Self {
            levels,
            image_size,
            features: FeatureConfig::default(),
            gnn: GnnConfig::default(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.levels == 0 || self.levels > crate::graph::MAX_LEVELS {
            v.push(format!("model.levels must be in 1..={}, got {}", crate::graph::MAX_LEVELS, self.levels));
        } else if self.image_size < (1usize << self.levels) {
            v.push(format!(
                "model.image_size {} is smaller than 2^levels = {}",
                self.image_size,
                1usize << self.levels
            ));
        }
        if self.image_size < 2 {
            v.push("model.image_size must be >= 2".into());
        }
        if self.levels >= 1 && self.levels <= crate::graph::MAX_LEVELS {
            v.extend(self.features.violations(self.levels));
        }
        v.extend(self.gnn.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Graph and normalized adjacency for one `(K, H, W)`, built once and shared.
pub struct Topology {
    pub graph: HierGraph,
    pub adjacency: NormAdjacency,
}

pub fn topology(levels: u32, height: usize, width: usize) -> Result<Arc<Topology>> {
    static CACHE: OnceLock<Mutex<HashMap<(u32, usize, usize), Arc<Topology>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(t) = cache.lock().expect("topology cache").get(&(levels, height, width)) {
        return Ok(t.clone());
    }
    let graph = assemble_hierarchy(levels, height, width)?;
    let adjacency = NormAdjacency::from_graph(&graph)?;
    let t = Arc::new(Topology { graph, adjacency });
    cache
        .lock()
        .expect("topology cache")
        .insert((levels, height, width), t.clone());
    Ok(t)
}

#[derive(Clone, Debug)]
struct Layout {
    backbone: Backbone,
    gcn: Vec<ConvIdx>,
    head_w1: usize,
    head_b1: usize,
    head_w2: usize,
    head_b2: usize,
}

#[derive(Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub topology: Arc<Topology>,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Intermediate values of one forward pass.
pub struct ForwardPass<T> {
    backbone: BackboneCache<T>,
    gcn_acts: Vec<Mat<T>>,
    head: HeadCache<T>,
    pub heatmaps: Heatmaps,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logits(&self) -> &Mat<T> {
        &self.head.logits
    }

    pub fn embeddings(&self) -> &Mat<T> {
        self.gcn_acts.last().expect("non-empty")
    }
}

/// Loss, gradients and the decoded prediction for one sample.
pub struct SampleGrad<T> {
    pub report: LossReport,
    pub grads: Grads<T>,
    pub prediction: CoordinatePrediction,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded He-normal initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let topo = topology(config.levels, config.image_size, config.image_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.gnn.width;
        let backbone = Backbone::build(
            &mut params,
            &config.features,
            config.levels,
            config.image_size,
            config.image_size,
            d,
            &mut rng,
        );
        let gain = 2f64.sqrt();
        let gcn = (0..config.gnn.layers)
            .map(|l| ConvIdx {
                w: params.add_normal(format!("gcn.{l}.weight"), &[d, d], d, gain, &mut rng),
                b: params.add_zeros(format!("gcn.{l}.bias"), &[d]),
            })
            .collect();
        let h = config.gnn.mlp_hidden;
        let head_w1 = params.add_normal("head.0.weight", &[d, h], d, gain, &mut rng);
        let head_b1 = params.add_zeros("head.0.bias", &[h]);
        let head_w2 = params.add_normal("head.1.weight", &[h, NUM_LANDMARKS], h, 1.0, &mut rng);
        let head_b2 = params.add_zeros("head.1.bias", &[NUM_LANDMARKS]);
        Ok(Self {
            config,
            topology: topo,
            params,
            layout: Layout {
                backbone,
                gcn,
                head_w1,
                head_b1,
                head_w2,
                head_b2,
            },
        })
    }

    pub fn graph(&self) -> &HierGraph {
        &self.topology.graph
    }

    pub fn backbone(&self) -> &Backbone {
        &self.layout.backbone
    }

    /// Same architecture, parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            topology: self.topology.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces the parameters, checking names and shapes.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if params.tensors.len() != self.params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, model expects {}",
                params.tensors.len(),
                self.params.tensors.len()
            )));
        }
        for (a, b) in params.tensors.iter().zip(&self.params.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Zeroes the MLP head, which makes every heatmap uniformly 0.5.
    pub fn zero_head(&mut self) {
        for idx in [self.layout.head_w1, self.layout.head_b1, self.layout.head_w2, self.layout.head_b2] {
            self.params.tensors[idx].data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn gcn_layers(&self) -> Vec<GcnLayer<'_, T>> {
        self.layout
            .gcn
            .iter()
            .map(|idx| GcnLayer {
                weight: self.params.get(idx.w),
                bias: self.params.get(idx.b),
            })
            .collect()
    }

    fn head(&self) -> HeadParams<'_, T> {
        HeadParams {
            w1: self.params.get(self.layout.head_w1),
            b1: self.params.get(self.layout.head_b1),
            w2: self.params.get(self.layout.head_w2),
            b2: self.params.get(self.layout.head_b2),
        }
    }

    pub fn image_map(&self, image: &[f32], height: usize, width: usize) -> Result<FeatureMap<T>> {
        if image.len() != height * width {
            return Err(Error::Shape(format!("{} pixels for {height}x{width}", image.len())));
        }
        Ok(FeatureMap {
            channels: 1,
            height,
            width,
            data: image.iter().map(|&v| T::of(v as f64)).collect(),
        })
    }

    pub fn forward(&self, exec: Exec, image: &FeatureMap<T>) -> Result<ForwardPass<T>> {
        let bb = &self.layout.backbone;
        let backbone = bb.forward(exec, &self.params, image)?;
        let feats = bb.project_features(&self.params, &backbone.level_maps())?;
        let gcn_acts = gcn_forward(exec, &self.topology.adjacency, feats.stacked(), &self.gcn_layers())?;
        let head = heatmap_head_forward(gcn_acts.last().expect("non-empty"), self.head());
        let heatmaps = Heatmaps::from_logits(&self.topology.graph, &head.logits)?;
        Ok(ForwardPass {
            backbone,
            gcn_acts,
            head,
            heatmaps,
        })
    }

    pub fn heatmaps(&self, exec: Exec, image: &FeatureMap<T>) -> Result<Heatmaps> {
        Ok(self.forward(exec, image)?.heatmaps)
    }

    /// Image to four `(x, y)` coordinates, no post-processing.
    pub fn predict_landmarks(&self, exec: Exec, image: &FeatureMap<T>) -> Result<CoordinatePrediction> {
        let hm = self.heatmaps(exec, image)?;
        decode_landmarks(&hm, &self.topology.graph, self.config.gnn.temperature)
    }

    pub fn loss(
        &self,
        exec: Exec,
        image: &FeatureMap<T>,
        landmarks: &LandmarkSet,
        loss_cfg: &LossConfig,
    ) -> Result<LossReport> {
        let hm = self.heatmaps(exec, image)?;
        let labels = hierarchy_labels(landmarks, self.config.levels)?;
        let pred = decode_landmarks(&hm, &self.topology.graph, self.config.gnn.temperature)?;
        total_loss(&hm, &labels, &pred, landmarks, loss_cfg)
    }

    /// Loss and parameter gradients for one annotated image.
    pub fn loss_and_grad(
        &self,
        exec: Exec,
        image: &FeatureMap<T>,
        landmarks: &LandmarkSet,
        loss_cfg: &LossConfig,
    ) -> Result<SampleGrad<T>> {
        let graph = &self.topology.graph;
        let tau = self.config.gnn.temperature;
        let fwd = self.forward(exec, image)?;
        let labels = hierarchy_labels(landmarks, self.config.levels)?;
        let prediction = decode_landmarks(&fwd.heatmaps, graph, tau)?;
        let (report, lg) = total_loss_with_grad(&fwd.heatmaps, &labels, &prediction, landmarks, loss_cfg)?;

        // d loss / d heat, laid out like the stacked logits
        let n = graph.node_count();
        let mut g_heat = Vec::with_capacity(n * NUM_LANDMARKS);
        for g in &lg.heat {
            g_heat.extend_from_slice(g);
        }
        let main = graph.level_range(crate::graph::Level::Main);
        let main_heat = fwd.heatmaps.main();
        let locs = graph.main_locs();
        for p in 0..NUM_LANDMARKS {
            let col = Heatmaps::channel(main_heat, p);
            let g = soft_argmax_backward(&col, locs, tau, lg.coords[p])?;
            for (s, gs) in g.into_iter().enumerate() {
                g_heat[(main.start + s) * NUM_LANDMARKS + p] += gs;
            }
        }
        let g_logits = Mat::from_vec(
            n,
            NUM_LANDMARKS,
            g_heat
                .iter()
                .zip(&fwd.head.logits.data)
                .map(|(&g, &z)| {
                    let s = crate::gnn::sigmoid(z.f64());
                    T::of(g * s * (1.0 - s))
                })
                .collect(),
        );
        let grads = self.backward(exec, &fwd, &g_logits);
        Ok(SampleGrad {
            report,
            grads,
            prediction,
        })
    }

    /// Parameter gradients given the gradient at the head logits.
    pub fn backward(&self, exec: Exec, fwd: &ForwardPass<T>, grad_logits: &Mat<T>) -> Grads<T> {
        let l = &self.layout;
        let mut grads = self.params.zero_grads();
        let g_emb = {
            let [w1, b1, w2, b2] = grads
                .get_disjoint_mut([l.head_w1, l.head_b1, l.head_w2, l.head_b2])
                .expect("distinct head tensors");
            let hg = HeadGrads { w1, b1, w2, b2 };
            heatmap_head_backward(fwd.embeddings(), &fwd.head, self.head(), grad_logits, hg)
        };
        let layers = self.gcn_layers();
        let mut g = g_emb;
        for (i, idx) in l.gcn.iter().enumerate().rev() {
            let (gw, gb) = two_mut(&mut grads, idx.w, idx.b);
            g = gcn_layer_backward(
                exec,
                &self.topology.adjacency,
                &fwd.gcn_acts[i],
                &fwd.gcn_acts[i + 1],
                layers[i],
                g,
                gw,
                gb,
                true,
            )
            .expect("requested");
        }
        l.backbone.backward(exec, &self.params, &fwd.backbone, &g, &mut grads);
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            levels: 2,
            image_size: 8,
            features: FeatureConfig {
                expand_channels: 2,
                encoder_channels: vec![3, 4],
                main_channels: 3,
            },
            gnn: GnnConfig {
                layers: 2,
                width: 5,
                mlp_hidden: 6,
                temperature: 0.5,
            },
        }
    }

    fn fixture() -> (Model<f64>, FeatureMap<f64>, LandmarkSet) {
        let mut model = Model::<f64>::new(tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // nonzero biases keep pre-activations off the ReLU kink
        for t in model.params.tensors.iter_mut().filter(|t| t.name.ends_with("bias")) {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
        let img: Vec<f32> = (0..64).map(|_| rng.random::<f32>()).collect();
        let image = model.image_map(&img, 8, 8).unwrap();
        let lm = LandmarkSet::new([[1.2, 3.5], [3.0, 3.9], [5.5, 4.1], [6.7, 4.4]], 0.5, 8, 8).unwrap();
        (model, image, lm)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut model, image, lm) = fixture();
        let cfg = LossConfig {
            pos_weight: 3.0,
            lambda_l2: 0.05,
            level_weights: vec![],
        };
        let exec = Exec::Sequential;
        let analytic = model.loss_and_grad(exec, &image, &lm, &cfg).unwrap().grads;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for t in 0..model.params.tensors.len() {
            let len = model.params.tensors[t].data.len();
            for _ in 0..3 {
                let i = rng.random_range(0..len);
                let orig = model.params.tensors[t].data[i];
                let h = 1e-5;
                model.params.tensors[t].data[i] = orig + h;
                let up = model.loss(exec, &image, &lm, &cfg).unwrap().total;
                model.params.tensors[t].data[i] = orig - h;
                let down = model.loss(exec, &image, &lm, &cfg).unwrap().total;
                model.params.tensors[t].data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic[t][i];
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "{}[{i}]: analytic {an} vs fd {fd}",
                    model.params.tensors[t].name
                );
                checked += 1;
            }
        }
        assert!(checked >= 5);
    }

    #[test]
    fn every_tensor_receives_gradient() {
        let (model, image, lm) = fixture();
        let g = model
            .loss_and_grad(Exec::Sequential, &image, &lm, &LossConfig::default())
            .unwrap()
            .grads;
        for (t, gt) in model.params.tensors.iter().zip(&g) {
            assert!(gt.iter().any(|v| *v != 0.0), "{} has no gradient", t.name);
        }
    }

    #[test]
    fn zero_head_predicts_frame_centre() {
        let (mut model, image, _) = fixture();
        model.zero_head();
        let pred = model.predict_landmarks(Exec::Sequential, &image).unwrap();
        for p in pred.points {
            assert!((p[0] - 3.5).abs() < 1e-12 && (p[1] - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn shapes_follow_the_hierarchy() {
        let (model, image, _) = fixture();
        let fwd = model.forward(Exec::Sequential, &image).unwrap();
        let sizes: Vec<usize> = fwd.heatmaps.levels.iter().map(|(_, v)| v.len() / 4).collect();
        assert_eq!(sizes, vec![4, 16, 64]);
        assert!(fwd.heatmaps.levels.iter().all(|(_, v)| v.iter().all(|&x| (0.0..=1.0).contains(&x))));
        let wrong = model.image_map(&[0.0; 16], 4, 4).unwrap();
        assert!(model.forward(Exec::Sequential, &wrong).is_err());
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let (model, image, lm) = fixture();
        let cfg = LossConfig::default();
        let a = model.loss_and_grad(Exec::Sequential, &image, &lm, &cfg).unwrap();
        let b = model.loss_and_grad(Exec::default(), &image, &lm, &cfg).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.report, b.report);
    }
}
