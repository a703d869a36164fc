//! Node features for every level: a single-conv channel expansion, a U-Net
//! whose decoder stages line up with the auxiliary grids, and a per-level
//! affine projection to the common GNN width.
//!
//! Encoder stage `i` (0-based) pools its input to `2^(K-i)` and applies two
//! 3x3 conv + ReLU. The decoder starts from the 2x2 bottleneck; each finer
//! stage upsamples bilinearly, concatenates the encoder skip of the same size,
//! and applies two 3x3 conv + ReLU. A last stage upsamples to the full frame
//! and concatenates the expanded input, giving the pixel-level map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Level;
use crate::linalg::{Mat, MatRef, Scalar};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, bilinear_resize, bilinear_resize_backward,
    conv3x3_backward, conv3x3_forward, linear_backward, linear_forward, relu, relu_backward,
    ConvCache, FeatureMap,
};
use crate::par::Exec;
use crate::params::{Grads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub expand_channels: usize,
    /// Channels per encoder stage, finest first. Empty selects `8, 16, 32, ...`.
    pub encoder_channels: Vec<usize>,
    /// Channels of the full-resolution decoder map.
    pub main_channels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            expand_channels: 4,
            encoder_channels: Vec::new(),
            main_channels: 8,
        }
    }
}

impl FeatureConfig {
    /// `(spatial, channels)` per encoder stage for `levels` auxiliary grids.
    pub fn encoder_dims(&self, levels: u32) -> Vec<(usize, usize)> {
        (0..levels as usize)
            .map(|i| {
                let spatial = 1usize << (levels as usize - i);
                let ch = self.encoder_channels.get(i).copied().unwrap_or(8 << i);
                (spatial, ch)
            })
            .collect()
    }

    /// Channels of the decoder map feeding aux level `k` (mirrors the encoder).
    pub fn level_channels(&self, levels: u32, k: u32) -> usize {
        self.encoder_dims(levels)[(levels - k) as usize].1
    }

    pub fn violations(&self, levels: u32) -> Vec<String> {
        let mut v = Vec::new();
        if self.expand_channels == 0 {
            v.push("features.expand_channels must be >= 1".into());
        }
        if self.main_channels == 0 {
            v.push("features.main_channels must be >= 1".into());
        }
        if !self.encoder_channels.is_empty() && self.encoder_channels.len() != levels as usize {
            v.push(format!(
                "features.encoder_channels needs {levels} entries, got {}",
                self.encoder_channels.len()
            ));
        }
        if self.encoder_channels.contains(&0) {
            v.push("features.encoder_channels entries must be >= 1".into());
        }
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    a: ConvIdx,
    b: ConvIdx,
}

/// Parameter indices of the backbone inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    levels: u32,
    height: usize,
    width: usize,
    width_out: usize,
    expand: ConvIdx,
    encoder: Vec<Block>,
    /// Decoder blocks for aux levels `2..=K`.
    decoder: Vec<Block>,
    main: Block,
    /// Projections for aux levels `1..=K` then main.
    proj: Vec<ConvIdx>,
}

fn add_conv<T: Scalar, R: Rng>(p: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> ConvIdx {
    ConvIdx {
        w: p.add_normal(format!("{name}.weight"), &[cout, cin, 3, 3], cin * 9, 2f64.sqrt(), rng),
        b: p.add_zeros(format!("{name}.bias"), &[cout]),
    }
}

fn add_block<T: Scalar, R: Rng>(p: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Block {
    Block {
        a: add_conv(p, &format!("{name}.conv1"), cin, cout, rng),
        b: add_conv(p, &format!("{name}.conv2"), cout, cout, rng),
    }
}

/// Intermediate state of one two-conv block.
pub struct BlockCache<T> {
    conv_a: ConvCache<T>,
    act_a: FeatureMap<T>,
    conv_b: ConvCache<T>,
    out: FeatureMap<T>,
}

fn block_forward<T: Scalar>(exec: Exec, p: &ParamStore<T>, blk: &Block, x: &FeatureMap<T>) -> BlockCache<T> {
    let (mut act_a, conv_a) = conv3x3_forward(exec, x, p.get(blk.a.w), p.get(blk.a.b));
    relu(&mut act_a);
    let (mut out, conv_b) = conv3x3_forward(exec, &act_a, p.get(blk.b.w), p.get(blk.b.b));
    relu(&mut out);
    BlockCache {
        conv_a,
        act_a,
        conv_b,
        out,
    }
}

fn block_backward<T: Scalar>(
    exec: Exec,
    p: &ParamStore<T>,
    blk: &Block,
    cache: &BlockCache<T>,
    mut grad: FeatureMap<T>,
    grads: &mut Grads<T>,
) -> FeatureMap<T> {
    relu_backward(&cache.out.data, &mut grad.data);
    let (gw, gb) = two_mut(grads, blk.b.w, blk.b.b);
    let mut ga = conv3x3_backward(exec, &cache.conv_b, p.get(blk.b.w), &grad, gw, gb, true).expect("requested");
    relu_backward(&cache.act_a.data, &mut ga.data);
    let (gw, gb) = two_mut(grads, blk.a.w, blk.a.b);
    conv3x3_backward(exec, &cache.conv_a, p.get(blk.a.w), &ga, gw, gb, true).expect("requested")
}

/// Two distinct mutable gradient slices.
pub(crate) fn two_mut<T>(grads: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    let [a, b] = grads.get_disjoint_mut([i, j]).expect("distinct parameter tensors");
    (a, b)
}

pub struct EncoderStage<T> {
    input_hw: (usize, usize),
    block: BlockCache<T>,
}

pub struct DecoderStage<T> {
    up_channels: usize,
    block: BlockCache<T>,
}

/// Everything the backward pass needs from [`Backbone::forward`].
pub struct BackboneCache<T> {
    expand: ConvCache<T>,
    expanded: FeatureMap<T>,
    encoder: Vec<EncoderStage<T>>,
    decoder: Vec<DecoderStage<T>>,
    main: DecoderStage<T>,
}

impl<T: Scalar> BackboneCache<T> {
    pub fn expanded(&self) -> &FeatureMap<T> {
        &self.expanded
    }

    /// Decoder maps for aux levels `1..=K` then the full-resolution map.
    pub fn level_maps(&self) -> Vec<&FeatureMap<T>> {
        let mut maps = Vec::with_capacity(self.decoder.len() + 2);
        maps.push(&self.encoder.last().expect("at least one stage").block.out);
        maps.extend(self.decoder.iter().map(|d| &d.block.out));
        maps.push(&self.main.block.out);
        maps
    }
}

/// Per-level node features, rows in node order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures<T> {
    pub per_level: Vec<(Level, Mat<T>)>,
}

impl<T: Scalar> NodeFeatures<T> {
    /// Stacks all levels into one `|V| x d` matrix in global id order.
    pub fn stacked(&self) -> Mat<T> {
        let cols = self.per_level.first().map_or(0, |(_, m)| m.cols);
        let rows = self.per_level.iter().map(|(_, m)| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for (_, m) in &self.per_level {
            data.extend_from_slice(&m.data);
        }
        Mat::from_vec(rows, cols, data)
    }
}

impl Backbone {
    pub(crate) fn build<T: Scalar, R: Rng>(
        p: &mut ParamStore<T>,
        cfg: &FeatureConfig,
        levels: u32,
        height: usize,
        width: usize,
        gnn_width: usize,
        rng: &mut R,
    ) -> Self {
        let c = cfg.expand_channels;
        let expand = add_conv(p, "expand", 1, c, rng);
        let dims = cfg.encoder_dims(levels);
        let mut encoder = Vec::new();
        let mut cin = c;
        for (i, &(_, ch)) in dims.iter().enumerate() {
            encoder.push(add_block(p, &format!("encoder.{i}"), cin, ch, rng));
            cin = ch;
        }
        let mut decoder = Vec::new();
        let mut below = dims[levels as usize - 1].1;
        for k in 2..=levels {
            let ch = cfg.level_channels(levels, k);
            decoder.push(add_block(p, &format!("decoder.{k}"), below + ch, ch, rng));
            below = ch;
        }
        let main = add_block(p, "decoder.main", below + c, cfg.main_channels, rng);
        let mut proj = Vec::new();
        for k in 1..=levels {
            let ch = cfg.level_channels(levels, k);
            proj.push(ConvIdx {
                w: p.add_normal(format!("proj.{k}.weight"), &[ch, gnn_width], ch, 1.0, rng),
                b: p.add_zeros(format!("proj.{k}.bias"), &[gnn_width]),
            });
        }
        proj.push(ConvIdx {
            w: p.add_normal("proj.main.weight", &[cfg.main_channels, gnn_width], cfg.main_channels, 1.0, rng),
            b: p.add_zeros("proj.main.bias", &[gnn_width]),
        });
        Self {
            levels,
            height,
            width,
            width_out: gnn_width,
            expand,
            encoder,
            decoder,
            main,
            proj,
        }
    }

    /// Single 3x3 convolution from one channel to `expand_channels`.
    pub fn expand_channels<T: Scalar>(
        &self,
        exec: Exec,
        p: &ParamStore<T>,
        image: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, ConvCache<T>)> {
        if image.channels != 1 {
            return Err(Error::Domain(format!("expected a single-channel image, got {} channels", image.channels)));
        }
        if (image.height, image.width) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "image is {}x{}, model expects {}x{}",
                image.height, image.width, self.height, self.width
            )));
        }
        Ok(conv3x3_forward(exec, image, p.get(self.expand.w), p.get(self.expand.b)))
    }

    /// Encoder + decoder. Returns a cache from which
    /// [`BackboneCache::level_maps`] yields the `K + 1` feature maps.
    pub fn forward<T: Scalar>(&self, exec: Exec, p: &ParamStore<T>, image: &FeatureMap<T>) -> Result<BackboneCache<T>> {
        let (expanded, expand) = self.expand_channels(exec, p, image)?;
        self.unet_features(exec, p, expand, expanded)
    }

    pub fn unet_features<T: Scalar>(
        &self,
        exec: Exec,
        p: &ParamStore<T>,
        expand: ConvCache<T>,
        expanded: FeatureMap<T>,
    ) -> Result<BackboneCache<T>> {
        let side = 1usize << self.levels;
        if expanded.height < side || expanded.width < side {
            return Err(Error::Domain(format!(
                "input {}x{} smaller than the {side}x{side} stage",
                expanded.height, expanded.width
            )));
        }
        let mut encoder: Vec<EncoderStage<T>> = Vec::with_capacity(self.encoder.len());
        for (i, blk) in self.encoder.iter().enumerate() {
            let s = 1usize << (self.levels as usize - i);
            let x = encoder.last().map_or(&expanded, |e| &e.block.out);
            let input_hw = (x.height, x.width);
            let pooled = adaptive_avg_pool(exec, x, s, s);
            let block = block_forward(exec, p, blk, &pooled);
            encoder.push(EncoderStage { input_hw, block });
        }
        let mut decoder: Vec<DecoderStage<T>> = Vec::with_capacity(self.decoder.len());
        for (j, blk) in self.decoder.iter().enumerate() {
            let k = j + 2;
            let s = 1usize << k;
            let below = decoder
                .last()
                .map_or(&encoder.last().expect("stages").block.out, |d| &d.block.out);
            let up = bilinear_resize(exec, below, s, s);
            let skip = &encoder[self.levels as usize - k].block.out;
            let cat = up.concat(skip);
            let block = block_forward(exec, p, blk, &cat);
            decoder.push(DecoderStage {
                up_channels: up.channels,
                block,
            });
        }
        let below = decoder
            .last()
            .map_or(&encoder.last().expect("stages").block.out, |d| &d.block.out);
        let up = bilinear_resize(exec, below, self.height, self.width);
        let cat = up.concat(&expanded);
        let main = DecoderStage {
            up_channels: up.channels,
            block: block_forward(exec, p, &self.main, &cat),
        };
        Ok(BackboneCache {
            expand,
            expanded,
            encoder,
            decoder,
            main,
        })
    }

    /// Level-specific affine maps to the GNN width.
    pub fn project_features<T: Scalar>(&self, p: &ParamStore<T>, maps: &[&FeatureMap<T>]) -> Result<NodeFeatures<T>> {
        if maps.len() != self.proj.len() {
            return Err(Error::Domain(format!(
                "{} feature maps for {} levels",
                maps.len(),
                self.proj.len()
            )));
        }
        let levels = (1..=self.levels).map(Level::Aux).chain(std::iter::once(Level::Main));
        let per_level = maps
            .iter()
            .zip(&self.proj)
            .zip(levels)
            .map(|((m, idx), level)| {
                let w = p.get(idx.w);
                if w.len() != m.channels * self.width_out {
                    return Err(Error::Shape(format!("{level}: map has {} channels", m.channels)));
                }
                Ok((level, linear_forward(m.as_mat().t(), w, p.get(idx.b))))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NodeFeatures { per_level })
    }

    /// Backward from the stacked node-feature gradient (`|V| x d`).
    pub fn backward<T: Scalar>(
        &self,
        exec: Exec,
        p: &ParamStore<T>,
        cache: &BackboneCache<T>,
        grad_nodes: &Mat<T>,
        grads: &mut Grads<T>,
    ) {
        let maps = cache.level_maps();
        let mut map_grads: Vec<FeatureMap<T>> = Vec::with_capacity(maps.len());
        let mut row = 0;
        for (m, idx) in maps.iter().zip(&self.proj) {
            let n = m.plane();
            let g = Mat::from_vec(
                n,
                grad_nodes.cols,
                grad_nodes.data[row * grad_nodes.cols..(row + n) * grad_nodes.cols].to_vec(),
            );
            row += n;
            let (gw, gb) = two_mut(grads, idx.w, idx.b);
            let gx = linear_backward(m.as_mat().t(), p.get(idx.w), &g, gw, gb, true).expect("requested");
            map_grads.push(FeatureMap {
                channels: m.channels,
                height: m.height,
                width: m.width,
                data: gx.transpose().data,
            });
        }

        let k_levels = self.levels as usize;
        // main stage
        let g_main = map_grads.pop().expect("main grad");
        let g_cat = block_backward(exec, p, &self.main, &cache.main.block, g_main, grads);
        let (g_up, mut g_expanded) = g_cat.split(cache.main.up_channels);
        let below = maps[k_levels - 1];
        let mut g_below = bilinear_resize_backward(exec, &g_up, below.height, below.width);

        // encoder-output grads, indexed like `cache.encoder`
        let mut g_enc: Vec<Option<FeatureMap<T>>> = (0..k_levels).map(|_| None).collect();

        for j in (0..self.decoder.len()).rev() {
            let k = j + 2;
            let mut g = map_grads.pop().expect("level grad");
            g.add_assign(&g_below);
            let st = &cache.decoder[j];
            let g_cat = block_backward(exec, p, &self.decoder[j], &st.block, g, grads);
            let (g_up, g_skip) = g_cat.split(st.up_channels);
            let e = k_levels - k;
            match &mut g_enc[e] {
                Some(acc) => acc.add_assign(&g_skip),
                slot => *slot = Some(g_skip),
            }
            let below = maps[k - 2];
            g_below = bilinear_resize_backward(exec, &g_up, below.height, below.width);
        }
        // level-1 map is the bottleneck output
        let mut g_bottom = map_grads.pop().expect("level 1 grad");
        g_bottom.add_assign(&g_below);
        match &mut g_enc[k_levels - 1] {
            Some(acc) => acc.add_assign(&g_bottom),
            slot => *slot = Some(g_bottom),
        }

        let mut carry: Option<FeatureMap<T>> = None;
        for i in (0..k_levels).rev() {
            let st = &cache.encoder[i];
            let mut g = g_enc[i].take().unwrap_or_else(|| {
                FeatureMap::zeros(st.block.out.channels, st.block.out.height, st.block.out.width)
            });
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            let g_pooled = block_backward(exec, p, &self.encoder[i], &st.block, g, grads);
            carry = Some(adaptive_avg_pool_backward(exec, &g_pooled, st.input_hw.0, st.input_hw.1));
        }
        g_expanded.add_assign(&carry.expect("encoder input grad"));
        let (gw, gb) = two_mut(grads, self.expand.w, self.expand.b);
        conv3x3_backward(exec, &cache.expand, p.get(self.expand.w), &g_expanded, gw, gb, false);
    }
}

/// `C x HW` map viewed as `HW x C` node rows.
pub fn map_as_nodes<T: Scalar>(m: &FeatureMap<T>) -> MatRef<'_, T> {
    m.as_mat().t()
}
