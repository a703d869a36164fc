//! Graph convolution over the hierarchy, the sigmoid heatmap head, and
//! soft-argmax coordinate decoding.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::graph::{HierGraph, Level};
use crate::labels::NUM_LANDMARKS;
use crate::linalg::{gemm, Mat, Scalar};
use crate::nn::{linear_backward, linear_forward};
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    pub layers: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub temperature: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            width: 128,
            mlp_hidden: 128,
            temperature: 1.0,
        }
    }
}

impl GnnConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.layers == 0 {
            v.push("gnn.layers must be >= 1".into());
        }
        if self.width == 0 {
            v.push("gnn.width must be >= 1".into());
        }
        if self.mlp_hidden == 0 {
            v.push("gnn.mlp_hidden must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            v.push(format!("gnn.temperature must be > 0, got {}", self.temperature));
        }
        v
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` in CSR form. Symmetric, so it is its own
/// transpose in the backward pass.
#[derive(Clone, Debug)]
pub struct NormAdjacency {
    pub nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<f64>,
}

impl NormAdjacency {
    /// Builds from undirected pairs; duplicates and self pairs are the
    /// caller's responsibility (the hierarchy has neither).
    pub fn from_edges(nodes: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let mut deg = vec![1usize; nodes];
        for &(u, v) in edges {
            if u as usize >= nodes || v as usize >= nodes {
                return domain(format!("edge ({u}, {v}) outside {nodes} nodes"));
            }
            if u == v {
                return domain(format!("self edge at {u}"));
            }
            deg[u as usize] += 1;
            deg[v as usize] += 1;
        }
        let mut row_ptr = vec![0usize; nodes + 1];
        for i in 0..nodes {
            row_ptr[i + 1] = row_ptr[i] + deg[i];
        }
        let mut fill = row_ptr[..nodes].to_vec();
        let mut col_idx = vec![0u32; row_ptr[nodes]];
        for i in 0..nodes {
            col_idx[fill[i]] = i as u32;
            fill[i] += 1;
        }
        for &(u, v) in edges {
            col_idx[fill[u as usize]] = v;
            fill[u as usize] += 1;
            col_idx[fill[v as usize]] = u;
            fill[v as usize] += 1;
        }
        let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
        let mut vals = vec![0.0; col_idx.len()];
        for i in 0..nodes {
            let range = row_ptr[i]..row_ptr[i + 1];
            col_idx[range.clone()].sort_unstable();
            for e in range {
                vals[e] = inv_sqrt[i] * inv_sqrt[col_idx[e] as usize];
            }
        }
        Ok(Self {
            nodes,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn from_graph(graph: &HierGraph) -> Result<Self> {
        Self::from_edges(graph.node_count(), &graph.edges)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `A_hat * x`.
    pub fn propagate<T: Scalar>(&self, exec: Exec, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.rows, self.nodes, "propagate: row count mismatch");
        let d = x.cols;
        let mut out = Mat::zeros(self.nodes, d);
        const BLOCK: usize = 256;
        exec.chunks_mut(&mut out.data, BLOCK * d.max(1), |blk, dst| {
            let first = blk * BLOCK;
            for (r, orow) in dst.chunks_mut(d.max(1)).enumerate() {
                let i = first + r;
                for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                    let a = T::of(self.vals[e]);
                    let src = x.row(self.col_idx[e] as usize);
                    for (o, &s) in orow.iter_mut().zip(src) {
                        *o += a * s;
                    }
                }
            }
        });
        out
    }

    /// Dense copy, for oracles and small graphs.
    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.nodes, self.nodes);
        for i in 0..self.nodes {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                m.data[i * self.nodes + self.col_idx[e] as usize] = self.vals[e];
            }
        }
        m
    }
}

/// Borrowed weights of one graph-convolution layer (`d x d` and `d`).
#[derive(Clone, Copy, Debug)]
pub struct GcnLayer<'a, T> {
    pub weight: &'a [T],
    pub bias: &'a [T],
}

/// One layer: `ReLU(A_hat * x * W + b)`.
pub fn gcn_layer_forward<T: Scalar>(exec: Exec, adj: &NormAdjacency, x: &Mat<T>, layer: GcnLayer<'_, T>) -> Mat<T> {
    let out_dim = layer.bias.len();
    let mut xw = Mat::zeros(x.rows, out_dim);
    gemm(
        T::one(),
        x.view(),
        crate::linalg::MatRef::new(layer.weight, x.cols, out_dim),
        T::zero(),
        &mut xw,
    );
    let mut z = adj.propagate(exec, &xw);
    z.add_row_bias(layer.bias);
    z.relu_inplace();
    z
}

/// Backward of [`gcn_layer_forward`] given its input and (post-ReLU) output.
#[allow(clippy::too_many_arguments)]
pub fn gcn_layer_backward<T: Scalar>(
    exec: Exec,
    adj: &NormAdjacency,
    input: &Mat<T>,
    output: &Mat<T>,
    layer: GcnLayer<'_, T>,
    mut grad_out: Mat<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Mat<T>> {
    crate::nn::relu_backward(&output.data, &mut grad_out.data);
    grad_out.sum_rows_into(grad_bias);
    let gm = adj.propagate(exec, &grad_out);
    // the bias is already accounted for above, so pass a throwaway slot
    let mut unused = vec![T::zero(); gm.cols];
    linear_backward(input.view(), layer.weight, &gm, grad_weight, &mut unused, need_input_grad)
}

/// Stacked layers; returns every activation, input first.
pub fn gcn_forward<T: Scalar>(
    exec: Exec,
    adj: &NormAdjacency,
    features: Mat<T>,
    layers: &[GcnLayer<'_, T>],
) -> Result<Vec<Mat<T>>> {
    if features.rows != adj.nodes {
        return Err(Error::Shape(format!(
            "features have {} rows, graph has {} nodes",
            features.rows, adj.nodes
        )));
    }
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(features);
    for (l, layer) in layers.iter().enumerate() {
        if layer.weight.len() != acts[l].cols * layer.bias.len() {
            return Err(Error::Shape(format!("gcn layer {l} weight shape")));
        }
        let next = gcn_layer_forward(exec, adj, &acts[l], *layer);
        acts.push(next);
    }
    Ok(acts)
}

/// Borrowed weights of the two-layer per-node MLP.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams<'a, T> {
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
}

pub struct HeadCache<T> {
    pub hidden: Mat<T>,
    pub logits: Mat<T>,
}

/// `MLP(h)` logits; the sigmoid is applied when forming [`Heatmaps`].
pub fn heatmap_head_forward<T: Scalar>(embeddings: &Mat<T>, head: HeadParams<'_, T>) -> HeadCache<T> {
    let mut hidden = linear_forward(embeddings.view(), head.w1, head.b1);
    hidden.relu_inplace();
    let logits = linear_forward(hidden.view(), head.w2, head.b2);
    HeadCache { hidden, logits }
}

pub struct HeadGrads<'a, T> {
    pub w1: &'a mut [T],
    pub b1: &'a mut [T],
    pub w2: &'a mut [T],
    pub b2: &'a mut [T],
}

pub fn heatmap_head_backward<T: Scalar>(
    embeddings: &Mat<T>,
    cache: &HeadCache<T>,
    head: HeadParams<'_, T>,
    grad_logits: &Mat<T>,
    grads: HeadGrads<'_, T>,
) -> Mat<T> {
    let mut gh = linear_backward(cache.hidden.view(), head.w2, grad_logits, grads.w2, grads.b2, true)
        .expect("requested");
    crate::nn::relu_backward(&cache.hidden.data, &mut gh.data);
    linear_backward(embeddings.view(), head.w1, &gh, grads.w1, grads.b1, true).expect("requested")
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-level heatmaps, `nodes x 4` row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmaps {
    pub levels: Vec<(Level, Vec<f64>)>,
}

impl Heatmaps {
    pub fn from_logits<T: Scalar>(graph: &HierGraph, logits: &Mat<T>) -> Result<Self> {
        if logits.rows != graph.node_count() || logits.cols != NUM_LANDMARKS {
            return Err(Error::Shape(format!(
                "logits {}x{} for {} nodes",
                logits.rows,
                logits.cols,
                graph.node_count()
            )));
        }
        let levels = graph
            .level_list()
            .into_iter()
            .map(|level| {
                let r = graph.level_range(level);
                let vals = logits.data[r.start * NUM_LANDMARKS..r.end * NUM_LANDMARKS]
                    .iter()
                    .map(|&z| sigmoid(z.f64()))
                    .collect();
                (level, vals)
            })
            .collect();
        Ok(Self { levels })
    }

    pub fn level(&self, level: Level) -> Option<&[f64]> {
        self.levels.iter().find(|(l, _)| *l == level).map(|(_, v)| v.as_slice())
    }

    pub fn main(&self) -> &[f64] {
        self.level(Level::Main).expect("main level present")
    }

    pub fn channel(values: &[f64], p: usize) -> Vec<f64> {
        values.iter().skip(p).step_by(NUM_LANDMARKS).copied().collect()
    }
}

/// Four decoded `(x, y)` points in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinatePrediction {
    pub points: [[f64; 2]; NUM_LANDMARKS],
}

fn softmax_weights(values: &[f64], tau: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = values.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

fn check_soft_argmax(values: &[f64], locs: &[[f64; 2]], tau: f64) -> Result<()> {
    if values.is_empty() {
        return domain("soft_argmax over an empty heatmap");
    }
    if values.len() != locs.len() {
        return Err(Error::Shape(format!("{} values for {} locations", values.len(), locs.len())));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return domain(format!("temperature must be positive, got {tau}"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return domain("non-finite heatmap value");
    }
    Ok(())
}

/// Softmax-weighted expectation of node locations: returns `(x, y)`.
pub fn soft_argmax(values: &[f64], locs: &[[f64; 2]], tau: f64) -> Result<[f64; 2]> {
    check_soft_argmax(values, locs, tau)?;
    let w = softmax_weights(values, tau);
    let mut xy = [0.0; 2];
    for (wi, loc) in w.iter().zip(locs) {
        xy[0] += wi * loc[0];
        xy[1] += wi * loc[1];
    }
    Ok(xy)
}

/// Gradient of `gx * x + gy * y` with respect to the heatmap values:
/// `w_s ((loc_s - mean) . g) / tau`.
pub fn soft_argmax_backward(values: &[f64], locs: &[[f64; 2]], tau: f64, grad_xy: [f64; 2]) -> Result<Vec<f64>> {
    check_soft_argmax(values, locs, tau)?;
    let w = softmax_weights(values, tau);
    let mut mean = [0.0; 2];
    for (wi, loc) in w.iter().zip(locs) {
        mean[0] += wi * loc[0];
        mean[1] += wi * loc[1];
    }
    Ok(w
        .iter()
        .zip(locs)
        .map(|(wi, loc)| wi * ((loc[0] - mean[0]) * grad_xy[0] + (loc[1] - mean[1]) * grad_xy[1]) / tau)
        .collect())
}

/// Decodes every channel of the main-level heatmap.
pub fn decode_landmarks(heatmaps: &Heatmaps, graph: &HierGraph, tau: f64) -> Result<CoordinatePrediction> {
    let main = heatmaps
        .level(Level::Main)
        .ok_or_else(|| Error::Domain("heatmaps lack the main level".into()))?;
    let locs = graph.main_locs();
    let mut points = [[0.0; 2]; NUM_LANDMARKS];
    for (p, pt) in points.iter_mut().enumerate() {
        *pt = soft_argmax(&Heatmaps::channel(main, p), locs, tau)?;
    }
    Ok(CoordinatePrediction { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::assemble_hierarchy;

    #[test]
    fn self_loop_only_graph_is_identity() {
        let adj = NormAdjacency::from_edges(3, &[]).unwrap();
        let x = Mat::from_vec(3, 2, vec![1.0, 2.0, 0.0, 3.0, 4.0, 0.5]);
        let w = [1.0, 0.0, 0.0, 1.0];
        let b = [0.0, 0.0];
        let y = gcn_layer_forward(Exec::Sequential, &adj, &x, GcnLayer { weight: &w, bias: &b });
        assert_eq!(y, x);
    }

    #[test]
    fn two_node_path_averages() {
        let adj = NormAdjacency::from_edges(2, &[(0, 1)]).unwrap();
        let layer = GcnLayer {
            weight: &[1.0f64],
            bias: &[0.0],
        };
        let x = Mat::from_vec(2, 1, vec![0.7, 0.7]);
        let y = gcn_layer_forward(Exec::Sequential, &adj, &x, layer);
        assert!((y.data[0] - 0.7).abs() < 1e-15 && (y.data[1] - 0.7).abs() < 1e-15);
        let x = Mat::from_vec(2, 1, vec![1.0, -3.0]);
        let y = gcn_layer_forward(Exec::Sequential, &adj, &x, layer);
        assert_eq!(y.data, vec![0.0, 0.0]);
        let x = Mat::from_vec(2, 1, vec![3.0, 1.0]);
        let y = gcn_layer_forward(Exec::Sequential, &adj, &x, layer);
        assert!((y.data[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn adjacency_rows_use_symmetric_degrees() {
        let adj = NormAdjacency::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let d = adj.to_dense();
        // degrees with self loops: 2, 3, 2
        assert!((d.at(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((d.at(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.at(0, 2), 0.0);
        assert_eq!(d, d.transpose());
        assert!(NormAdjacency::from_edges(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn head_zero_weights_gives_half() {
        let emb = Mat::from_vec(5, 3, (0..15).map(|v| v as f64).collect());
        let head = HeadParams {
            w1: &[0.0; 6],
            b1: &[0.0; 2],
            w2: &[0.0; 8],
            b2: &[0.0; 4],
        };
        let cache = heatmap_head_forward(&emb, head);
        assert!(cache.logits.data.iter().all(|&z| sigmoid(z) == 0.5));
        assert!(sigmoid(80.0) <= 1.0 && sigmoid(80.0) > 0.999);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn heatmaps_split_by_level() {
        let g = assemble_hierarchy(2, 8, 8).unwrap();
        let logits = Mat::<f32>::zeros(g.node_count(), 4);
        let h = Heatmaps::from_logits(&g, &logits).unwrap();
        let sizes: Vec<usize> = h.levels.iter().map(|(_, v)| v.len() / 4).collect();
        assert_eq!(sizes, vec![4, 16, 64]);
    }

    #[test]
    fn soft_argmax_examples() {
        let locs = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let [x, _] = soft_argmax(&[1.0, 0.0, 0.0], &locs, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((x - 3.0 / (e + 2.0)).abs() < 1e-15);
        assert!((x - 0.6358).abs() < 1e-4);
        assert!(soft_argmax(&[], &[], 1.0).is_err());
        assert!(soft_argmax(&[1.0], &[[0.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn soft_argmax_is_shift_invariant() {
        let locs: Vec<[f64; 2]> = (0..16).map(|i| [(i % 4) as f64, (i / 4) as f64]).collect();
        let v: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.2).collect();
        let a = soft_argmax(&v, &locs, 1.0).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + 3.25).collect();
        let b = soft_argmax(&shifted, &locs, 1.0).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }
}
