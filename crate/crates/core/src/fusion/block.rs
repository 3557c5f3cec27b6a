//! One post-norm Transformer encoder layer with multi-head self-attention, plus the
//! mean-and-project pooling that turns its output sequence into a single vector.
//!
//! Rows are tokens; every projection is applied as `x W + b` with `W` stored
//! `[in, out]`. There is no positional encoding, so the layer is permutation
//! equivariant over tokens. Keys carry no bias: softmax is invariant to the
//! per-query constant it would add.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{
    add_row_bias, gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, layer_norm, layer_norm_backward,
    softmax_in_place, softmax_row_backward, sum_rows, LayerNormCache,
};
use crate::numerics::{ParamTensor, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub heads: usize,
    pub ffn_mult: usize,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn_mult: 4,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

/// The block's tensors, one field per parameter. Instantiated with
/// [`ParamTensor`] for the parameters and with [`Tensor`] for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTensors<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w_pool: T,
}

pub const BLOCK_TENSOR_NAMES: [&str; 16] = [
    "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1_gamma", "ln1_beta", "w1", "b1", "w2",
    "b2", "ln2_gamma", "ln2_beta", "w_pool",
];

impl<T> BlockTensors<T> {
    pub fn as_vec(&self) -> Vec<&T> {
        vec![
            &self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gamma, &self.ln1_beta, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.ln2_gamma, &self.ln2_beta, &self.w_pool,
        ]
    }

    pub fn as_vec_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.ln2_gamma, &mut self.ln2_beta,
            &mut self.w_pool,
        ]
    }

    pub fn from_vec(v: Vec<T>) -> Result<Self> {
        let n = v.len();
        let mut it = v.into_iter();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::Data(format!("expected 16 block tensors, got {n}")))
        };
        Ok(Self {
            wq: next()?,
            bq: next()?,
            wk: next()?,
            wv: next()?,
            bv: next()?,
            wo: next()?,
            bo: next()?,
            ln1_gamma: next()?,
            ln1_beta: next()?,
            w1: next()?,
            b1: next()?,
            w2: next()?,
            b2: next()?,
            ln2_gamma: next()?,
            ln2_beta: next()?,
            w_pool: next()?,
        })
    }
}

pub type BlockGrads<F> = BlockTensors<Tensor<F>>;

impl<F: Real> BlockGrads<F> {
    pub fn zeros_for(block: &AttentionBlock<F>) -> Self {
        let shapes: Vec<Tensor<F>> = block
            .params
            .as_vec()
            .into_iter()
            .map(|p| Tensor::zeros_like(&p.value))
            .collect();
        Self::from_vec(shapes).expect("16 tensors")
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.as_vec_mut().into_iter().zip(other.as_vec()) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock<F: Real = f32> {
    pub params: BlockTensors<ParamTensor<F>>,
    heads: usize,
    ln_eps: F,
}

/// Forward intermediates needed by [`AttentionBlock::backward`].
#[derive(Clone, Debug)]
pub struct BlockCache<F: Real> {
    x: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    /// Attention probabilities, one `[L, L]` matrix per head.
    probs: Vec<Tensor<F>>,
    o: Tensor<F>,
    ln1: LayerNormCache<F>,
    y1: Tensor<F>,
    h: Tensor<F>,
    g: Tensor<F>,
    ln2: LayerNormCache<F>,
    y2: Tensor<F>,
}

impl<F: Real> BlockCache<F> {
    pub fn output(&self) -> &Tensor<F> {
        &self.y2
    }

    /// Attention probabilities of head `h`.
    pub fn attention(&self, h: usize) -> &Tensor<F> {
        &self.probs[h]
    }
}

/// Gradients with respect to the block input and the parameters.
pub struct BlockBackward<F: Real> {
    pub grad_input: Tensor<F>,
    pub grads: BlockGrads<F>,
}

fn mm<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), out.data_mut());
    out
}

/// `a b^T`
fn mm_nt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nt(m, k, n, a.data(), b.data(), out.data_mut());
    out
}

/// `a^T b`
fn mm_tn<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[k, n]);
    gemm_tn(m, k, n, a.data(), b.data(), out.data_mut());
    out
}

fn linear<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut y = mm(x, w);
    add_row_bias(&mut y, b)?;
    Ok(y)
}

fn head_slice<F: Real>(x: &Tensor<F>, h: usize, hd: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(x.rows() * hd);
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row(r)[h * hd..(h + 1) * hd]);
    }
    Tensor::matrix(x.rows(), hd, data).expect("sized above")
}

fn head_write<F: Real>(dst: &mut Tensor<F>, src: &Tensor<F>, h: usize, hd: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(src.row(r));
    }
}

impl<F: Real> AttentionBlock<F> {
    /// Random projections with standard deviation `init_std`, zero biases,
    /// identity layer-norm affines.
    pub fn init(dim: usize, config: &BlockConfig, rng: &mut crate::rng::Rng) -> Result<Self> {
        if config.heads == 0 || !dim.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {} heads",
                config.heads
            )));
        }
        if config.ffn_mult == 0 || !(config.init_std >= 0.0) || !(config.ln_eps > 0.0) {
            return Err(Error::Config("invalid attention block configuration".into()));
        }
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut weight = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| F::lit(normal.sample(rng))).collect();
            ParamTensor::new(Tensor::matrix(rows, cols, data).expect("sized"))
        };
        let hidden = dim * config.ffn_mult;
        let wq = weight(dim, dim);
        let wk = weight(dim, dim);
        let wv = weight(dim, dim);
        let wo = weight(dim, dim);
        let w1 = weight(dim, hidden);
        let w2 = weight(hidden, dim);
        let w_pool = weight(dim, dim);
        let zeros = |n: usize| ParamTensor::new(Tensor::zeros(&[n]));
        let ones = |n: usize| ParamTensor::new(Tensor::vector(vec![F::one(); n]));
        Ok(Self {
            params: BlockTensors {
                wq,
                bq: zeros(dim),
                wk,
                wv,
                bv: zeros(dim),
                wo,
                bo: zeros(dim),
                ln1_gamma: ones(dim),
                ln1_beta: zeros(dim),
                w1,
                b1: zeros(hidden),
                w2,
                b2: zeros(dim),
                ln2_gamma: ones(dim),
                ln2_beta: zeros(dim),
                w_pool,
            },
            heads: config.heads,
            ln_eps: F::lit(config.ln_eps),
        })
    }

    /// Rebuilds a block from its tensors, checking shapes.
    pub fn from_tensors(tensors: BlockTensors<Tensor<F>>, heads: usize, ln_eps: f64) -> Result<Self> {
        let d = tensors.wq.rows();
        let hidden = tensors.w1.cols();
        let expected: [&[usize]; 16] = [
            &[d, d], &[d], &[d, d], &[d, d], &[d], &[d, d], &[d], &[d], &[d],
            &[d, hidden], &[hidden], &[hidden, d], &[d], &[d], &[d], &[d, d],
        ];
        for ((t, shape), name) in tensors.as_vec().into_iter().zip(expected).zip(BLOCK_TENSOR_NAMES) {
            if t.shape() != shape {
                return Err(Error::Data(format!(
                    "block tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            t.ensure_finite(name)?;
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Data(format!("model dim {d} is not divisible by {heads} heads")));
        }
        let params = BlockTensors::from_vec(
            tensors.as_vec().into_iter().map(|t| ParamTensor::new(t.clone())).collect(),
        )?;
        Ok(Self {
            params,
            heads,
            ln_eps: F::lit(ln_eps),
        })
    }

    pub fn dim(&self) -> usize {
        self.params.wq.value.rows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn ln_eps(&self) -> f64 {
        self.ln_eps.as_f64()
    }

    pub fn ffn_hidden(&self) -> usize {
        self.params.w1.value.cols()
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<BlockCache<F>> {
        let d = self.dim();
        if x.rank() != 2 || x.cols() != d {
            return Err(Error::Dimension(format!(
                "block input has shape {:?}, expected [L, {d}]",
                x.shape()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::Config("attention block needs at least one token".into()));
        }
        let p = &self.params;
        let l = x.rows();
        let hd = d / self.heads;
        let scale = F::one() / F::lit(hd as f64).sqrt();
        let q = linear(x, &p.wq.value, &p.bq.value)?;
        let k = mm(x, &p.wk.value);
        let v = linear(x, &p.wv.value, &p.bv.value)?;
        let mut o = Tensor::zeros(&[l, d]);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = head_slice(&q, h, hd);
            let kh = head_slice(&k, h, hd);
            let vh = head_slice(&v, h, hd);
            let mut s = mm_nt(&qh, &kh).scale(scale);
            for r in 0..l {
                softmax_in_place(s.row_mut(r));
            }
            head_write(&mut o, &mm(&s, &vh), h, hd);
            probs.push(s);
        }
        let mut r1 = linear(&o, &p.wo.value, &p.bo.value)?;
        r1.add_assign(x)?;
        let (y1, ln1) = layer_norm(&r1, &p.ln1_gamma.value, &p.ln1_beta.value, self.ln_eps)?;
        let h = linear(&y1, &p.w1.value, &p.b1.value)?;
        let g = h.map(gelu);
        let mut r2 = linear(&g, &p.w2.value, &p.b2.value)?;
        r2.add_assign(&y1)?;
        let (y2, ln2) = layer_norm(&r2, &p.ln2_gamma.value, &p.ln2_beta.value, self.ln_eps)?;
        Ok(BlockCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            o,
            ln1,
            y1,
            h,
            g,
            ln2,
            y2,
        })
    }

    pub fn backward(&self, cache: &BlockCache<F>, grad_out: &Tensor<F>) -> Result<BlockBackward<F>> {
        if grad_out.shape() != cache.y2.shape() {
            return Err(Error::Dimension(format!(
                "block output gradient {:?} does not match output {:?}",
                grad_out.shape(),
                cache.y2.shape()
            )));
        }
        let p = &self.params;
        let d = self.dim();
        let hd = d / self.heads;
        let scale = F::one() / F::lit(hd as f64).sqrt();

        let (g_r2, g_ln2_gamma, g_ln2_beta) = layer_norm_backward(&cache.ln2, &p.ln2_gamma.value, grad_out);
        let g_b2 = sum_rows(&g_r2);
        let g_w2 = mm_tn(&cache.g, &g_r2);
        let g_g = mm_nt(&g_r2, &p.w2.value);
        let mut g_h = g_g;
        for (gv, &hv) in g_h.data_mut().iter_mut().zip(cache.h.data()) {
            *gv *= gelu_grad(hv);
        }
        let g_b1 = sum_rows(&g_h);
        let g_w1 = mm_tn(&cache.y1, &g_h);
        let mut g_y1 = mm_nt(&g_h, &p.w1.value);
        g_y1.add_assign(&g_r2)?;

        let (g_r1, g_ln1_gamma, g_ln1_beta) = layer_norm_backward(&cache.ln1, &p.ln1_gamma.value, &g_y1);
        let g_bo = sum_rows(&g_r1);
        let g_wo = mm_tn(&cache.o, &g_r1);
        let g_o = mm_nt(&g_r1, &p.wo.value);

        let l = cache.x.rows();
        let mut g_q = Tensor::zeros(&[l, d]);
        let mut g_k = Tensor::zeros(&[l, d]);
        let mut g_v = Tensor::zeros(&[l, d]);
        let mut g_s = Tensor::zeros(&[l, l]);
        for h in 0..self.heads {
            let a = &cache.probs[h];
            let qh = head_slice(&cache.q, h, hd);
            let kh = head_slice(&cache.k, h, hd);
            let vh = head_slice(&cache.v, h, hd);
            let g_oh = head_slice(&g_o, h, hd);
            let g_a = mm_nt(&g_oh, &vh);
            head_write(&mut g_v, &mm_tn(a, &g_oh), h, hd);
            for r in 0..l {
                softmax_row_backward(a.row(r), g_a.row(r), g_s.row_mut(r));
            }
            let g_s_scaled = g_s.scale(scale);
            head_write(&mut g_q, &mm(&g_s_scaled, &kh), h, hd);
            head_write(&mut g_k, &mm_tn(&g_s_scaled, &qh), h, hd);
        }

        let mut g_x = g_r1;
        g_x.add_assign(&mm_nt(&g_q, &p.wq.value))?;
        g_x.add_assign(&mm_nt(&g_k, &p.wk.value))?;
        g_x.add_assign(&mm_nt(&g_v, &p.wv.value))?;
        let grads = BlockTensors {
            wq: mm_tn(&cache.x, &g_q),
            bq: sum_rows(&g_q),
            wk: mm_tn(&cache.x, &g_k),
            wv: mm_tn(&cache.x, &g_v),
            bv: sum_rows(&g_v),
            wo: g_wo,
            bo: g_bo,
            ln1_gamma: g_ln1_gamma,
            ln1_beta: g_ln1_beta,
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
            ln2_gamma: g_ln2_gamma,
            ln2_beta: g_ln2_beta,
            w_pool: Tensor::zeros_like(&p.w_pool.value),
        };
        Ok(BlockBackward { grad_input: g_x, grads })
    }

    /// Mean over tokens followed by the pooling projection.
    pub fn pool(&self, seq: &Tensor<F>) -> Result<Tensor<F>> {
        if seq.rank() != 2 || seq.rows() == 0 || seq.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "pool input has shape {:?}, expected [L >= 1, {}]",
                seq.shape(),
                self.dim()
            )));
        }
        let mean = sum_rows(seq).scale(F::one() / F::lit(seq.rows() as f64));
        let row = mean.reshape(vec![1, self.dim()])?;
        mm(&row, &self.params.w_pool.value).reshape(vec![self.dim()])
    }

    /// Returns the gradient on `seq` and accumulates the projection gradient.
    pub fn pool_backward(&self, seq: &Tensor<F>, grad_out: &Tensor<F>, grad_w_pool: &mut Tensor<F>) -> Result<Tensor<F>> {
        let d = self.dim();
        let l = seq.rows();
        let inv_l = F::one() / F::lit(l as f64);
        let mean = sum_rows(seq).scale(inv_l);
        let g = grad_out.clone().reshape(vec![1, d])?;
        gemm_tn(1, d, d, mean.data(), g.data(), grad_w_pool.data_mut());
        let g_mean = mm_nt(&g, &self.params.w_pool.value).scale(inv_l);
        let mut g_seq = Tensor::zeros(&[l, d]);
        for r in 0..l {
            g_seq.row_mut(r).copy_from_slice(g_mean.data());
        }
        Ok(g_seq)
    }
}
