//! Parameter-group builders: linear layers, two-layer MLPs, layer norm, and
//! residual convolution blocks. Each group has an `init_*` function that
//! registers its tensors under a name prefix and an `apply_*` function that
//! wires the computation into a graph from those same names.

use crate::error::Result;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Clone a stored parameter into the graph as a trainable leaf.
pub fn param_node(g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
    let value = store.get(name)?.clone();
    g.param(name, value)
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, seed: u64) -> Result<()> {
    let std = 1.0 / (in_dim as f64).sqrt();
    store.insert_gaussian(&format!("{prefix}.w"), &[out_dim, in_dim], std, seed)?;
    store.insert_const(&format!("{prefix}.b"), &[out_dim], 0.0)
}

/// `W·x + b` with `x [in×n]`, bias broadcast over columns.
pub fn apply_linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = param_node(g, store, &format!("{prefix}.w"))?;
    let b = param_node(g, store, &format!("{prefix}.b"))?;
    let wx = g.matmul(w, x)?;
    g.add_col(wx, b)
}

pub fn init_mlp(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<()> {
    init_linear(store, &format!("{prefix}.fc1"), in_dim, hidden, seed)?;
    init_linear(store, &format!("{prefix}.fc2"), hidden, out_dim, seed)
}

/// Two-layer ReLU MLP applied column-wise: `W2·relu(W1·x + b1) + b2`.
pub fn apply_mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = apply_linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.relu(h)?;
    apply_linear(g, store, &format!("{prefix}.fc2"), h)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert_const(&format!("{prefix}.gain"), &[dim], 1.0)?;
    store.insert_const(&format!("{prefix}.bias"), &[dim], 0.0)
}

/// Layer norm over the feature (row) axis of `x [d×n]`, one normalization
/// per column.
pub fn apply_layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gain = param_node(g, store, &format!("{prefix}.gain"))?;
    let bias = param_node(g, store, &format!("{prefix}.bias"))?;
    g.layer_norm_cols(x, gain, bias, LN_EPS)
}

pub fn init_conv(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize, seed: u64) -> Result<()> {
    let std = 1.0 / ((c_in * k * k) as f64).sqrt();
    store.insert_gaussian(&format!("{prefix}.w"), &[c_out, c_in, k, k], std, seed)?;
    store.insert_const(&format!("{prefix}.b"), &[c_out], 0.0)
}

pub fn apply_conv(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let w = param_node(g, store, &format!("{prefix}.w"))?;
    let b = param_node(g, store, &format!("{prefix}.b"))?;
    g.conv2d(x, w, b, stride, padding)
}

/// Register one residual block: two 3x3 convolutions, each followed by a
/// channel layer norm, plus a 1x1 projection on the skip path when the
/// channel count changes.
pub fn init_res_block(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, seed: u64) -> Result<()> {
    init_conv(store, &format!("{prefix}.conv1"), c_in, c_out, 3, seed)?;
    init_layer_norm(store, &format!("{prefix}.ln1"), c_out)?;
    init_conv(store, &format!("{prefix}.conv2"), c_out, c_out, 3, seed)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), c_out)?;
    if c_in != c_out {
        init_conv(store, &format!("{prefix}.proj"), c_in, c_out, 1, seed)?;
    }
    Ok(())
}

/// conv → layer norm → relu → conv → layer norm, added to the (possibly
/// projected) input, then relu. Layer norm runs over channels independently
/// at every spatial cell. Spatial size is preserved (stride 1, padding 1).
pub fn apply_res_block(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let in_shape = g.value(x).shape().to_vec();
    let (h, w) = (in_shape[1], in_shape[2]);

    let y = apply_conv(g, store, &format!("{prefix}.conv1"), x, 1, 1)?;
    let y = channel_layer_norm(g, store, &format!("{prefix}.ln1"), y)?;
    let y = g.relu(y)?;
    let y = apply_conv(g, store, &format!("{prefix}.conv2"), y, 1, 1)?;
    let y = channel_layer_norm(g, store, &format!("{prefix}.ln2"), y)?;

    let skip = if store.contains(&format!("{prefix}.proj.w")) {
        apply_conv(g, store, &format!("{prefix}.proj"), x, 1, 0)?
    } else {
        x
    };
    let sum = g.add(y, skip)?;
    let out = g.relu(sum)?;
    debug_assert_eq!(g.value(out).shape()[1..], [h, w]);
    Ok(out)
}

fn channel_layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, vec![c, h * w])?;
    let normed = apply_layer_norm(g, store, prefix, flat)?;
    g.reshape(normed, vec![c, h, w])
}

/// Overwrite an MLP's tensors so it computes the identity map:
/// relu(x) - relu(-x) = x. Used by tests that need attention outputs to pass
/// through untouched.
pub fn make_mlp_identity(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    let hidden = 2 * dim;
    let mut w1 = Tensor::zeros(&[hidden, dim]);
    for i in 0..dim {
        w1.set2(i, i, 1.0);
        w1.set2(dim + i, i, -1.0);
    }
    let mut w2 = Tensor::zeros(&[dim, hidden]);
    for i in 0..dim {
        w2.set2(i, i, 1.0);
        w2.set2(i, dim + i, -1.0);
    }
    *store.get_mut(&format!("{prefix}.fc1.w"))? = w1;
    *store.get_mut(&format!("{prefix}.fc1.b"))? = Tensor::zeros(&[hidden]);
    *store.get_mut(&format!("{prefix}.fc2.w"))? = w2;
    *store.get_mut(&format!("{prefix}.fc2.b"))? = Tensor::zeros(&[dim]);
    Ok(())
}
