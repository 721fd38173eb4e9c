//! Encoder-only Transformer (post-norm blocks, learnable positional
//! encoding, GELU) with a linear decoder, plus its reverse pass.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;

use super::layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    fn init(d_model: usize, d_ff: usize, rng: &mut Rng) -> Self {
        EncoderBlock {
            query: Linear::init(d_model, d_model, rng),
            key: Linear::init(d_model, d_model, rng),
            value: Linear::init(d_model, d_model, rng),
            attn_out: Linear::init(d_model, d_model, rng),
            norm1: LayerNorm::new(d_model),
            ff_in: Linear::init(d_model, d_ff, rng),
            ff_out: Linear::init(d_ff, d_model, rng),
            norm2: LayerNorm::new(d_model),
        }
    }

    fn zeros(d_model: usize, d_ff: usize) -> Self {
        EncoderBlock {
            query: Linear::zeros(d_model, d_model),
            key: Linear::zeros(d_model, d_model),
            value: Linear::zeros(d_model, d_model),
            attn_out: Linear::zeros(d_model, d_model),
            norm1: LayerNorm::zeros(d_model),
            ff_in: Linear::zeros(d_model, d_ff),
            ff_out: Linear::zeros(d_ff, d_model),
            norm2: LayerNorm::zeros(d_model),
        }
    }
}

/// Every trainable tensor of the imputer. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub input: Linear,
    /// Learnable positional encoding, one row per timepoint.
    pub position: Array2<f64>,
    pub blocks: Vec<EncoderBlock>,
    pub decoder: Linear,
}

/// Architecture dimensions needed to run the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n_timepoints: usize,
    pub in_width: usize,
    pub out_width: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
}

impl Params {
    pub fn init(dims: &Dims, rng: &mut Rng) -> Self {
        let input = Linear::init(dims.in_width, dims.d_model, rng);
        let position =
            Array2::from_shape_simple_fn((dims.n_timepoints, dims.d_model), || rng.random_range(-0.02..0.02));
        let blocks = (0..dims.n_blocks)
            .map(|_| EncoderBlock::init(dims.d_model, dims.d_ff, rng))
            .collect();
        let decoder = Linear::init(dims.d_model, dims.out_width, rng);
        Params {
            input,
            position,
            blocks,
            decoder,
        }
    }

    pub fn zeros(dims: &Dims) -> Self {
        Params {
            input: Linear::zeros(dims.in_width, dims.d_model),
            position: Array2::zeros((dims.n_timepoints, dims.d_model)),
            blocks: (0..dims.n_blocks).map(|_| EncoderBlock::zeros(dims.d_model, dims.d_ff)).collect(),
            decoder: Linear::zeros(dims.d_model, dims.out_width),
        }
    }

    /// Named tensors in a fixed order: (name, shape, data).
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn add<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, prefix: &str, l: &'a Linear) {
            out.push((format!("{prefix}.weight"), l.weight.shape().to_vec(), l.weight.as_slice().expect("layout")));
            out.push((format!("{prefix}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().expect("layout")));
        }
        add(&mut out, "input", &self.input);
        out.push(("position".into(), self.position.shape().to_vec(), self.position.as_slice().expect("layout")));
        for (i, b) in self.blocks.iter().enumerate() {
            add(&mut out, &format!("blocks.{i}.query"), &b.query);
            add(&mut out, &format!("blocks.{i}.key"), &b.key);
            add(&mut out, &format!("blocks.{i}.value"), &b.value);
            add(&mut out, &format!("blocks.{i}.attn_out"), &b.attn_out);
            out.push((format!("blocks.{i}.norm1.gamma"), vec![b.norm1.gamma.len()], b.norm1.gamma.as_slice().expect("layout")));
            out.push((format!("blocks.{i}.norm1.beta"), vec![b.norm1.beta.len()], b.norm1.beta.as_slice().expect("layout")));
            add(&mut out, &format!("blocks.{i}.ff_in"), &b.ff_in);
            add(&mut out, &format!("blocks.{i}.ff_out"), &b.ff_out);
            out.push((format!("blocks.{i}.norm2.gamma"), vec![b.norm2.gamma.len()], b.norm2.gamma.as_slice().expect("layout")));
            out.push((format!("blocks.{i}.norm2.beta"), vec![b.norm2.beta.len()], b.norm2.beta.as_slice().expect("layout")));
        }
        add(&mut out, "decoder", &self.decoder);
        out
    }

    /// Mutable views in the same order as [`Params::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn lin(l: &mut Linear) -> [&mut [f64]; 2] {
            [l.weight.as_slice_mut().expect("layout"), l.bias.as_slice_mut().expect("layout")]
        }
        fn norm(n: &mut LayerNorm) -> [&mut [f64]; 2] {
            [n.gamma.as_slice_mut().expect("layout"), n.beta.as_slice_mut().expect("layout")]
        }
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(lin(&mut self.input));
        out.push(self.position.as_slice_mut().expect("layout"));
        for b in &mut self.blocks {
            out.extend(lin(&mut b.query));
            out.extend(lin(&mut b.key));
            out.extend(lin(&mut b.value));
            out.extend(lin(&mut b.attn_out));
            out.extend(norm(&mut b.norm1));
            out.extend(lin(&mut b.ff_in));
            out.extend(lin(&mut b.ff_out));
            out.extend(norm(&mut b.norm2));
        }
        out.extend(lin(&mut self.decoder));
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().map(|(_, _, d)| d).collect()
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Round every value to the nearest 32-bit float (checkpoint precision).
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

struct BlockCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights, laid out [sample][head][query][key].
    attn: Vec<f64>,
    ctx: Array2<f64>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ln2: LayerNormCache,
}

pub(crate) struct ForwardCache {
    x: Array2<f64>,
    blocks: Vec<BlockCache>,
    encoded: Array2<f64>,
    activated: Array2<f64>,
    batch: usize,
}

/// Scaled dot-product attention over groups of `t` consecutive rows.
fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, batch: usize, t: usize, heads: usize) -> (Array2<f64>, Vec<f64>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = q.as_slice().expect("layout");
    let ks = k.as_slice().expect("layout");
    let vs = v.as_slice().expect("layout");
    let mut ctx = vec![0.0; batch * t * d];
    let mut attn = vec![0.0; batch * heads * t * t];
    let mut scores = vec![0.0; t];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..t {
                let qi = &qs[(b * t + i) * d + col..(b * t + i) * d + col + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &ks[(b * t + j) * d + col..(b * t + j) * d + col + dh];
                    *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let a_row = &mut attn[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                for (a, s) in a_row.iter_mut().zip(&scores) {
                    *a = s / total;
                }
                let out = &mut ctx[(b * t + i) * d + col..(b * t + i) * d + col + dh];
                for (j, &a) in a_row.iter().enumerate() {
                    let vj = &vs[(b * t + j) * d + col..(b * t + j) * d + col + dh];
                    for (o, x) in out.iter_mut().zip(vj) {
                        *o += a * x;
                    }
                }
            }
        }
    }
    (Array2::from_shape_vec((batch * t, d), ctx).expect("shape"), attn)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dctx: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    attn: &[f64],
    batch: usize,
    t: usize,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = q.as_slice().expect("layout");
    let ks = k.as_slice().expect("layout");
    let vs = v.as_slice().expect("layout");
    let dc = dctx.as_slice().expect("layout");
    let mut dq = vec![0.0; batch * t * d];
    let mut dk = vec![0.0; batch * t * d];
    let mut dv = vec![0.0; batch * t * d];
    let mut da = vec![0.0; t];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..t {
                let a_row = &attn[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                let dci = &dc[(b * t + i) * d + col..(b * t + i) * d + col + dh];
                let mut dot = 0.0;
                for j in 0..t {
                    let off = (b * t + j) * d + col;
                    let vj = &vs[off..off + dh];
                    da[j] = dci.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dot += da[j] * a_row[j];
                    for (o, g) in dv[off..off + dh].iter_mut().zip(dci) {
                        *o += a_row[j] * g;
                    }
                }
                let qoff = (b * t + i) * d + col;
                for j in 0..t {
                    let ds = a_row[j] * (da[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let koff = (b * t + j) * d + col;
                    for c in 0..dh {
                        dq[qoff + c] += ds * ks[koff + c];
                        dk[koff + c] += ds * qs[qoff + c];
                    }
                }
            }
        }
    }
    let mk = |v: Vec<f64>| Array2::from_shape_vec((batch * t, d), v).expect("shape");
    (mk(dq), mk(dk), mk(dv))
}

fn map_gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// Run the network on featurized input rows `[batch * t, in_width]`.
pub(crate) fn forward(params: &Params, dims: &Dims, x: Array2<f64>, batch: usize) -> (Array2<f64>, ForwardCache) {
    let t = dims.n_timepoints;
    let mut h = params.input.forward(x.view());
    h *= (dims.d_model as f64).sqrt();
    for (r, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
        row += &params.position.row(r % t);
    }
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let q = block.query.forward(h.view());
        let k = block.key.forward(h.view());
        let v = block.value.forward(h.view());
        let (ctx, attn) = attention(&q, &k, &v, batch, t, dims.n_heads);
        let r1 = &h + &block.attn_out.forward(ctx.view());
        let (h1, ln1) = block.norm1.forward(&r1);
        let ff_pre = block.ff_in.forward(h1.view());
        let ff_act = map_gelu(&ff_pre);
        let r2 = &h1 + &block.ff_out.forward(ff_act.view());
        let (h2, ln2) = block.norm2.forward(&r2);
        caches.push(BlockCache {
            input: h,
            q,
            k,
            v,
            attn,
            ctx,
            ln1,
            h1,
            ff_pre,
            ff_act,
            ln2,
        });
        h = h2;
    }
    let activated = map_gelu(&h);
    let out = params.decoder.forward(activated.view());
    (
        out,
        ForwardCache {
            x,
            blocks: caches,
            encoded: h,
            activated,
            batch,
        },
    )
}

/// Reverse pass. Accumulates into `grads` and returns `dL/dx`.
pub(crate) fn backward(params: &Params, dims: &Dims, cache: &ForwardCache, dout: ArrayView2<f64>, grads: &mut Params) -> Array2<f64> {
    let t = dims.n_timepoints;
    let dact = params.decoder.backward(cache.activated.view(), dout, &mut grads.decoder);
    let mut dh = dact;
    Zip::from(&mut dh).and(&cache.encoded).for_each(|g, &x| *g *= gelu_grad(x));

    for (i, block) in params.blocks.iter().enumerate().rev() {
        let c = &cache.blocks[i];
        let g = &mut grads.blocks[i];
        let dr2 = block.norm2.backward(&dh, &c.ln2, &mut g.norm2);
        let mut dff_act = block.ff_out.backward(c.ff_act.view(), dr2.view(), &mut g.ff_out);
        Zip::from(&mut dff_act).and(&c.ff_pre).for_each(|d, &x| *d *= gelu_grad(x));
        let dh1 = &dr2 + &block.ff_in.backward(c.h1.view(), dff_act.view(), &mut g.ff_in);
        let dr1 = block.norm1.backward(&dh1, &c.ln1, &mut g.norm1);
        let dctx = block.attn_out.backward(c.ctx.view(), dr1.view(), &mut g.attn_out);
        let (dq, dk, dv) = attention_backward(&dctx, &c.q, &c.k, &c.v, &c.attn, cache.batch, t, dims.n_heads);
        let mut dinput = dr1;
        dinput += &block.query.backward(c.input.view(), dq.view(), &mut g.query);
        dinput += &block.key.backward(c.input.view(), dk.view(), &mut g.key);
        dinput += &block.value.backward(c.input.view(), dv.view(), &mut g.value);
        dh = dinput;
    }

    for (r, row) in dh.axis_iter(Axis(0)).enumerate() {
        let mut p = grads.position.row_mut(r % t);
        p += &row;
    }
    dh *= (dims.d_model as f64).sqrt();
    params.input.backward(cache.x.view(), dh.view(), &mut grads.input)
}
