//! Hand-wired reference models whose heads have known behavior.
//!
//! Token `t` carries the one-hot positional code `e_t`, so after the
//! layernorm every token is an affine image of its own one-hot vector. A
//! routing head sets `W_Q = α·I` and gives `W_K` a single one per column so
//! that token `t`'s query matches exactly the key of `target(t)`. With a
//! large `α` the head attends (numerically) only to the chosen target.

use crate::error::Result;
use crate::numerics::Matrix;
use crate::vit::{HeadWeights, LayerNorm, LayerWeights, Linear, ModelConfig, ModelWeights};

const SHARPNESS: f32 = 8.0;

fn blank(config: ModelConfig) -> ModelWeights {
    let h = config.embed_dim;
    let dk = config.head_dim();
    ModelWeights {
        config,
        patch_embed: Linear::zeros(config.patch_dim(), h),
        cls_token: vec![0.0; h],
        pos_embed: Matrix::zeros(config.tokens(), h),
        layers: (0..config.layers)
            .map(|_| LayerWeights {
                norm1: LayerNorm::identity(h),
                heads: (0..config.heads)
                    .map(|_| HeadWeights {
                        query: Linear::zeros(h, dk),
                        key: Linear::zeros(h, dk),
                        value: Linear::zeros(h, dk),
                    })
                    .collect(),
                output: Linear::zeros(h, h),
                norm2: LayerNorm::identity(h),
                mlp_in: Linear::zeros(h, config.mlp_dim()),
                mlp_out: Linear::zeros(config.mlp_dim(), h),
            })
            .collect(),
        final_norm: LayerNorm::identity(h),
        classifier: Linear::zeros(h, config.num_classes),
    }
}

fn one_hot_positions(w: &mut ModelWeights) {
    let t = w.config.tokens();
    w.pos_embed = Matrix::from_fn(t, w.config.embed_dim, |r, c| if r == c { 1.0 } else { 0.0 });
}

/// Makes token `t` attend to `target[t]`.
fn route(head: &mut HeadWeights, target: &[usize]) {
    let (h, dk) = head.query.weight.shape();
    assert!(target.len() <= dk, "head too narrow for {} tokens", target.len());
    head.query.weight = Matrix::from_fn(h, dk, |r, c| if r == c { SHARPNESS } else { 0.0 });
    head.key.weight = Matrix::from_fn(h, dk, |r, c| {
        if c < target.len() && target[c] == r {
            1.0
        } else {
            0.0
        }
    });
}

fn grid_config(p: usize, embed_dim: usize, heads: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: 4 * p,
        patch_size: 4,
        embed_dim,
        layers: 1,
        heads,
        num_classes,
    }
}

/// One layer, one head in which every patch attends to the patch directly
/// below it and the bottom row attends to the class token; the class token
/// attends to itself.
pub fn attend_below(p: usize) -> Result<ModelWeights> {
    let n = p * p;
    let config = grid_config(p, (n + 1).next_power_of_two().max(16), 1, 2);
    config.validate().map_err(crate::Error::Argument)?;
    let mut w = blank(config);
    one_hot_positions(&mut w);
    let target: Vec<usize> = (0..=n)
        .map(|t| match t {
            0 => 0,
            t if t + p <= n => t + p,
            _ => 0,
        })
        .collect();
    route(&mut w.layers[0].heads[0], &target);
    Ok(w)
}

/// One layer, one head in which every token attends to itself.
pub fn self_attention(p: usize) -> Result<ModelWeights> {
    let n = p * p;
    let config = grid_config(p, (n + 1).next_power_of_two().max(16), 1, 2);
    config.validate().map_err(crate::Error::Argument)?;
    let mut w = blank(config);
    one_hot_positions(&mut w);
    let target: Vec<usize> = (0..=n).collect();
    route(&mut w.layers[0].heads[0], &target);
    Ok(w)
}

/// Two-class, two-head model on a 4×4 grid whose logits depend only on
/// head (0, 0). The head averages a brightness feature over all tokens into
/// the class token; bright images favor class 0. Head (0, 1) is wired to
/// nothing.
pub fn class_signal() -> Result<ModelWeights> {
    let config = grid_config(4, 32, 2, 2);
    config.validate().map_err(crate::Error::Argument)?;
    let mut w = blank(config);
    let pd = config.patch_dim();
    // mean patch intensity into dim 0
    w.patch_embed.weight = Matrix::from_fn(pd, 32, |_, c| if c == 0 { 1.0 / pd as f32 } else { 0.0 });
    let layer = &mut w.layers[0];
    // uniform attention (zero queries), value copies dim 0
    layer.heads[0].value.weight.set(0, 0, 1.0);
    layer.heads[1].value.weight.set(1, 1, 1.0);
    // head 0 slice is dims 0..16; route its dim 0 into embed dim 1
    layer.output.weight.set(0, 1, 1.0);
    w.classifier.weight.set(1, 0, 2.0);
    w.classifier.weight.set(1, 1, -2.0);
    Ok(w)
}

/// One layer, one self-attending head whose value vector is zero on the
/// class token: pruning it rewrites every patch's attention output but
/// leaves the class token (and so the prediction) untouched.
pub fn layer_local() -> Result<ModelWeights> {
    let p = 4;
    let n = p * p;
    let config = grid_config(p, 32, 1, 2);
    config.validate().map_err(crate::Error::Argument)?;
    let mut w = blank(config);
    one_hot_positions(&mut w);
    // a class-token feature the classifier reads
    w.cls_token[25] = 3.0;
    w.classifier.weight.set(25, 0, 1.0);
    w.classifier.bias = vec![0.5, 0.0];

    let target: Vec<usize> = (0..=n).collect();
    let layer = &mut w.layers[0];
    route(&mut layer.heads[0], &target);
    let x_cls: Vec<f32> = (0..32)
        .map(|c| w.cls_token[c] + w.pos_embed.get(0, c))
        .collect();
    let ln_cls = layer
        .norm1
        .forward(&Matrix::from_vec(1, 32, x_cls)?)
        .into_vec();
    let head = &mut layer.heads[0];
    head.value.weight = Matrix::identity(32);
    head.value.bias = ln_cls.iter().map(|v| -v).collect();
    layer.output.weight = Matrix::identity(32);
    Ok(w)
}
