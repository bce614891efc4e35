//! Layer descriptors: each layer registers named tensors in a `ParamSet` at
//! construction and applies itself to graph nodes at forward time.

use crate::math::graph::{Graph, NodeId};
use crate::math::params::{normal_init, ones, zeros, Binding, ParamSet};
use crate::math::Elem;
use rand::Rng;

#[derive(Clone)]
pub struct Linear {
    w: String,
    b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Elem, R: Rng>(
        params: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
    ) -> Linear {
        let w = format!("{name}/w");
        let b = format!("{name}/b");
        let weights = if zero_init {
            zeros(&[in_dim, out_dim])
        } else {
            normal_init(rng, &[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt())
        };
        params.insert(&w, weights);
        params.insert(&b, zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        x: NodeId,
    ) -> NodeId {
        let y = g.matmul(x, bind.id(params, &self.w));
        g.add_rows(y, bind.id(params, &self.b))
    }
}

#[derive(Clone)]
pub struct Norm {
    gain: String,
    bias: String,
    dim: usize,
}

impl Norm {
    pub fn new<E: Elem>(params: &mut ParamSet<E>, name: &str, dim: usize) -> Norm {
        let gain = format!("{name}/gain");
        let bias = format!("{name}/bias");
        params.insert(&gain, ones(&[dim]));
        params.insert(&bias, zeros(&[dim]));
        Norm { gain, bias, dim }
    }

    /// Layer norm over the channel (last) axis; works for 2-d and NHWC input.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        x: NodeId,
    ) -> NodeId {
        let shape = g.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.dim, "norm dim");
        if shape.len() == 2 {
            return g.layer_norm(x, bind.id(params, &self.gain), bind.id(params, &self.bias));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.dim]);
        let y = g.layer_norm(flat, bind.id(params, &self.gain), bind.id(params, &self.bias));
        g.reshape(y, &shape)
    }
}

/// Linear -> LayerNorm -> SiLU blocks with an optional plain output layer.
#[derive(Clone)]
pub struct Mlp {
    blocks: Vec<(Linear, Norm)>,
    out: Linear,
}

impl Mlp {
    pub fn new<E: Elem, R: Rng>(
        params: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        out_dim: usize,
        zero_init_out: bool,
    ) -> Mlp {
        let mut blocks = Vec::new();
        let mut cur = in_dim;
        for i in 0..layers {
            let lin = Linear::new(params, rng, &format!("{name}/l{i}"), cur, hidden, false);
            let norm = Norm::new(params, &format!("{name}/n{i}"), hidden);
            blocks.push((lin, norm));
            cur = hidden;
        }
        let out = Linear::new(params, rng, &format!("{name}/out"), cur, out_dim, zero_init_out);
        Mlp { blocks, out }
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        mut x: NodeId,
    ) -> NodeId {
        for (lin, norm) in &self.blocks {
            x = lin.forward(g, params, bind, x);
            x = norm.forward(g, params, bind, x);
            x = g.silu(x);
        }
        self.out.forward(g, params, bind, x)
    }
}

#[derive(Clone)]
pub struct Conv {
    w: String,
    b: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv {
    pub fn new<E: Elem, R: Rng>(
        params: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Conv {
        let w = format!("{name}/w");
        let b = format!("{name}/b");
        let fan_in = 16 * in_ch;
        params.insert(&w, normal_init(rng, &[fan_in, out_ch], 1.0 / (fan_in as f64).sqrt()));
        params.insert(&b, zeros(&[out_ch]));
        Conv { w, b, in_ch, out_ch }
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        x: NodeId,
    ) -> NodeId {
        let y = g.conv2d(x, bind.id(params, &self.w));
        let shape = g.shape(y).to_vec();
        let rows: usize = shape[..3].iter().product();
        let flat = g.reshape(y, &[rows, self.out_ch]);
        let biased = g.add_rows(flat, bind.id(params, &self.b));
        g.reshape(biased, &shape)
    }
}

#[derive(Clone)]
pub struct ConvT {
    w: String,
    b: String,
    pub in_ch: usize,
    pub out_ch: usize,
    zero_init: bool,
}

impl ConvT {
    pub fn new<E: Elem, R: Rng>(
        params: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        zero_init: bool,
    ) -> ConvT {
        let w = format!("{name}/w");
        let b = format!("{name}/b");
        let weights = if zero_init {
            zeros(&[in_ch, 16 * out_ch])
        } else {
            normal_init(rng, &[in_ch, 16 * out_ch], 1.0 / (in_ch as f64).sqrt())
        };
        params.insert(&w, weights);
        params.insert(&b, zeros(&[out_ch]));
        ConvT { w, b, in_ch, out_ch, zero_init }
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        x: NodeId,
    ) -> NodeId {
        let _ = self.zero_init;
        let y = g.conv2d_transpose(x, bind.id(params, &self.w));
        let shape = g.shape(y).to_vec();
        let rows: usize = shape[..3].iter().product();
        let flat = g.reshape(y, &[rows, self.out_ch]);
        let biased = g.add_rows(flat, bind.id(params, &self.b));
        g.reshape(biased, &shape)
    }
}

/// Gated recurrent cell with layer norm, update-gate bias of -1.
#[derive(Clone)]
pub struct GruCell {
    lin: Linear,
    norm: Norm,
    pub det_dim: usize,
}

impl GruCell {
    pub fn new<E: Elem, R: Rng>(
        params: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        det_dim: usize,
    ) -> GruCell {
        let lin = Linear::new(
            params,
            rng,
            &format!("{name}/parts"),
            in_dim + det_dim,
            3 * det_dim,
            false,
        );
        let norm = Norm::new(params, &format!("{name}/norm"), 3 * det_dim);
        GruCell { lin, norm, det_dim }
    }

    /// One recurrent update: `h' = u * cand + (1-u) * h`.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        params: &ParamSet<E>,
        bind: &Binding,
        input: NodeId,
        h: NodeId,
    ) -> NodeId {
        let d = self.det_dim;
        let joined = g.concat_last(&[input, h]);
        let parts = self.lin.forward(g, params, bind, joined);
        let parts = self.norm.forward(g, params, bind, parts);
        let reset_raw = g.slice_last(parts, 0, d);
        let cand_raw = g.slice_last(parts, d, d);
        let update_raw = g.slice_last(parts, 2 * d, d);
        let reset = g.sigmoid(reset_raw);
        let gated = g.mul(reset, cand_raw);
        let cand = g.tanh(gated);
        let update_shifted = g.add_scalar(update_raw, E::from_f64(-1.0));
        let update = g.sigmoid(update_shifted);
        let a = g.mul(update, cand);
        let neg_update = g.mul_scalar(update, E::from_f64(-1.0));
        let one_minus = g.add_scalar(neg_update, E::one());
        let b = g.mul(one_minus, h);
        g.add(a, b)
    }
}
