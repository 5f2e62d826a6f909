use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserDims {
    /// Sequence length; must be even.
    pub n: usize,
    pub dim_c: usize,
    /// Hidden width of the condition MLP.
    pub hidden: usize,
    /// Channel width of the UNet and of the condition/time vector.
    pub width: usize,
    /// Sinusoidal embedding size; must be even.
    pub time_dim: usize,
}

impl DenoiserDims {
    pub fn new(n: usize, dim_c: usize) -> Self {
        Self { n, dim_c, hidden: 64, width: 32, time_dim: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || !self.n.is_multiple_of(2) {
            return Err(invalid(format!("sequence length must be even and >= 2, got {}", self.n)));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(invalid(format!("time embedding size must be even and positive, got {}", self.time_dim)));
        }
        if self.dim_c == 0 || self.hidden == 0 || self.width == 0 {
            return Err(invalid("condition, hidden and channel widths must be positive"));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        self.n / 2
    }
}

/// Offsets of each tensor in the flat parameter vector. Linear weights are
/// `[out][in]`, convolution weights `[out][in][tap]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub cond_w1: Range<usize>,
    pub cond_b1: Range<usize>,
    pub cond_w2: Range<usize>,
    pub cond_b2: Range<usize>,
    pub time_w: Range<usize>,
    pub time_b: Range<usize>,
    pub enc_w: Range<usize>,
    pub enc_b: Range<usize>,
    pub ln_gamma: Range<usize>,
    pub ln_beta: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub dec_w: Range<usize>,
    pub dec_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(d: &DenoiserDims) -> Self {
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let (h, c) = (d.hidden, d.width);
        let cond_w1 = take(h * d.dim_c);
        let cond_b1 = take(h);
        let cond_w2 = take(c * h);
        let cond_b2 = take(c);
        let time_w = take(c * d.time_dim);
        let time_b = take(c);
        let enc_w = take(c * 3);
        let enc_b = take(c);
        let ln_gamma = take(c);
        let ln_beta = take(c);
        let wq = take(c * c);
        let wk = take(c * c);
        let wv = take(c * c);
        let wo = take(c * c);
        let bo = take(c);
        let dec_w = take(c * c * 3);
        let dec_b = take(c);
        let out_w = take(c * 3);
        let out_b = take(1);
        Self {
            cond_w1,
            cond_b1,
            cond_w2,
            cond_b2,
            time_w,
            time_b,
            enc_w,
            enc_b,
            ln_gamma,
            ln_beta,
            wq,
            wk,
            wv,
            wo,
            bo,
            dec_w,
            dec_b,
            out_w,
            out_b,
            total: at,
        }
    }

    /// `(name, range)` for every tensor, in storage order.
    pub fn tensors(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("cond_w1", self.cond_w1.clone()),
            ("cond_b1", self.cond_b1.clone()),
            ("cond_w2", self.cond_w2.clone()),
            ("cond_b2", self.cond_b2.clone()),
            ("time_w", self.time_w.clone()),
            ("time_b", self.time_b.clone()),
            ("enc_w", self.enc_w.clone()),
            ("enc_b", self.enc_b.clone()),
            ("ln_gamma", self.ln_gamma.clone()),
            ("ln_beta", self.ln_beta.clone()),
            ("wq", self.wq.clone()),
            ("wk", self.wk.clone()),
            ("wv", self.wv.clone()),
            ("wo", self.wo.clone()),
            ("bo", self.bo.clone()),
            ("dec_w", self.dec_w.clone()),
            ("dec_b", self.dec_b.clone()),
            ("out_w", self.out_w.clone()),
            ("out_b", self.out_b.clone()),
        ]
    }
}

/// Sinusoidal embedding: entry `2i` is `sin(t / 10000^(2i/dim))`, entry
/// `2i+1` the matching cosine.
pub fn time_embedding<T: Real>(t: T, dim: usize) -> Result<Vec<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!("embedding size must be even and positive, got {dim}")));
    }
    let mut e = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = T::lit(10000f64.powf(-((2 * i) as f64) / dim as f64));
        let a = t * freq;
        e.push(a.sin());
        e.push(a.cos());
    }
    Ok(e)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `y = W x + b` with `W` stored `[out][in]`.
fn affine<T: Real>(w: &[T], b: Option<&[T]>, x: &[T], out: usize) -> Vec<T> {
    let inp = x.len();
    (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            let acc = row.iter().zip(x).fold(T::zero(), |a, (&wi, &xi)| a + wi * xi);
            b.map_or(acc, |b| acc + b[o])
        })
        .collect()
}

/// Accumulates `dW += dy xᵀ` and returns `Wᵀ dy`.
fn affine_back<T: Real>(w: &[T], x: &[T], dy: &[T], dw: &mut [T]) -> Vec<T> {
    let inp = x.len();
    let mut dx = vec![T::zero(); inp];
    for (o, &g) in dy.iter().enumerate() {
        let row = &w[o * inp..(o + 1) * inp];
        let drow = &mut dw[o * inp..(o + 1) * inp];
        for i in 0..inp {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

/// One training example.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, T> {
    pub theta_t: &'a [T],
    pub condition: &'a [T],
    pub t: usize,
    pub eps: &'a [T],
}

struct Cache<T> {
    cond_in: Vec<T>,
    cond_pre: Vec<T>,
    cond_h: Vec<T>,
    emb: Vec<T>,
    x: Vec<T>,
    enc_pre: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    nrm: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    ctx: Vec<T>,
    y: Vec<T>,
    dec_pre: Vec<T>,
    dec: Vec<T>,
    out: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    dims: DenoiserDims,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Real> Denoiser<T> {
    /// Uniform fan-in initialization (`U(±√(3/fan_in))`), zero biases, unit
    /// norm gain and a zero output convolution.
    pub fn new<R: Rng + ?Sized>(dims: DenoiserDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let mut params = vec![T::zero(); layout.total];
        let c = dims.width;
        let fans = [
            (&layout.cond_w1, dims.dim_c),
            (&layout.cond_w2, dims.hidden),
            (&layout.time_w, dims.time_dim),
            (&layout.enc_w, 3),
            (&layout.wq, c),
            (&layout.wk, c),
            (&layout.wv, c),
            (&layout.wo, c),
            (&layout.dec_w, 3 * c),
        ];
        for (r, fan_in) in fans {
            let bound = (3.0 / fan_in as f64).sqrt();
            for p in &mut params[r.clone()] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        }
        params[layout.ln_gamma.clone()].iter_mut().for_each(|g| *g = T::one());
        Ok(Self { dims, layout, params })
    }

    pub fn from_params(dims: DenoiserDims, params: Vec<T>) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        if params.len() != layout.total {
            return Err(Error::Dimension(format!("{} parameters given, layout needs {}", params.len(), layout.total)));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite weight".into()));
        }
        Ok(Self { dims, layout, params })
    }

    pub fn dims(&self) -> DenoiserDims {
        self.dims
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    fn check(&self, theta_t: &[T], condition: &[T], t: usize) -> Result<()> {
        if theta_t.len() != self.dims.n {
            return Err(Error::Dimension(format!("input length {} != N = {}", theta_t.len(), self.dims.n)));
        }
        if condition.len() != self.dims.dim_c {
            return Err(Error::Dimension(format!(
                "condition length {} != {}",
                condition.len(),
                self.dims.dim_c
            )));
        }
        if t == 0 {
            return Err(invalid("timestep must be at least 1"));
        }
        Ok(())
    }

    fn forward_cache(&self, x: &[T], condition: &[T], t: usize) -> Result<Cache<T>> {
        self.check(x, condition, t)?;
        let d = &self.dims;
        let l = &self.layout;
        let (c, n, half) = (d.width, d.n, d.half());

        let cond_pre = affine(self.p(&l.cond_w1), Some(self.p(&l.cond_b1)), condition, d.hidden);
        let cond_h: Vec<T> = cond_pre.iter().map(|&v| silu(v)).collect();
        let zc = affine(self.p(&l.cond_w2), Some(self.p(&l.cond_b2)), &cond_h, c);
        let emb = time_embedding(T::from_usize_lossy(t), d.time_dim)?;
        let zt = affine(self.p(&l.time_w), Some(self.p(&l.time_b)), &emb, c);

        // encoder: stride 2, pad 1, then add condition/time vector
        let (ew, eb) = (self.p(&l.enc_w), self.p(&l.enc_b));
        let mut enc_pre = vec![T::zero(); half * c];
        let mut e = vec![T::zero(); half * c];
        for p in 0..half {
            for ch in 0..c {
                let mut acc = eb[ch];
                for j in 0..3 {
                    let i = 2 * p + j;
                    if (1..=n).contains(&i) {
                        acc += ew[ch * 3 + j] * x[i - 1];
                    }
                }
                enc_pre[p * c + ch] = acc;
                e[p * c + ch] = silu(acc) + zc[ch] + zt[ch];
            }
        }

        // pre-norm over channels
        let (g, bt) = (self.p(&l.ln_gamma), self.p(&l.ln_beta));
        let cw = T::from_usize_lossy(c);
        let mut xhat = vec![T::zero(); half * c];
        let mut inv_std = vec![T::zero(); half];
        let mut nrm = vec![T::zero(); half * c];
        for p in 0..half {
            let row = &e[p * c..(p + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cw;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cw;
            let inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
            inv_std[p] = inv;
            for ch in 0..c {
                let xh = (row[ch] - mu) * inv;
                xhat[p * c + ch] = xh;
                nrm[p * c + ch] = g[ch] * xh + bt[ch];
            }
        }

        // single-head attention
        let mut q = Vec::with_capacity(half * c);
        let mut k = Vec::with_capacity(half * c);
        let mut v = Vec::with_capacity(half * c);
        for p in 0..half {
            let row = &nrm[p * c..(p + 1) * c];
            q.extend(affine(self.p(&l.wq), None, row, c));
            k.extend(affine(self.p(&l.wk), None, row, c));
            v.extend(affine(self.p(&l.wv), None, row, c));
        }
        let scale = T::one() / cw.sqrt();
        let mut attn = vec![T::zero(); half * half];
        for p in 0..half {
            let qp = &q[p * c..(p + 1) * c];
            let srow = &mut attn[p * half..(p + 1) * half];
            for (pp, s) in srow.iter_mut().enumerate() {
                let kp = &k[pp * c..(pp + 1) * c];
                *s = qp.iter().zip(kp).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
            }
            let mx = srow.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for s in srow.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            srow.iter_mut().for_each(|s| *s /= z);
        }
        let mut ctx = vec![T::zero(); half * c];
        for p in 0..half {
            for pp in 0..half {
                let a = attn[p * half + pp];
                for ch in 0..c {
                    ctx[p * c + ch] += a * v[pp * c + ch];
                }
            }
        }
        let bo = self.p(&l.bo);
        let mut y = e;
        for p in 0..half {
            let o = affine(self.p(&l.wo), Some(bo), &ctx[p * c..(p + 1) * c], c);
            for ch in 0..c {
                y[p * c + ch] += o[ch];
            }
        }

        // nearest up-sample (index i reads y[i/2]) + conv + SiLU
        let (dw, db) = (self.p(&l.dec_w), self.p(&l.dec_b));
        let mut dec_pre = vec![T::zero(); n * c];
        for i in 0..n {
            for co in 0..c {
                let mut acc = db[co];
                for j in 0..3 {
                    let src = i + j;
                    if !(1..=n).contains(&src) {
                        continue;
                    }
                    let urow = &y[((src - 1) / 2) * c..((src - 1) / 2 + 1) * c];
                    let wrow = &dw[co * c * 3..(co + 1) * c * 3];
                    for ci in 0..c {
                        acc += wrow[ci * 3 + j] * urow[ci];
                    }
                }
                dec_pre[i * c + co] = acc;
            }
        }
        let dec: Vec<T> = dec_pre.iter().map(|&v| silu(v)).collect();

        let (ow, ob) = (self.p(&l.out_w), self.p(&l.out_b)[0]);
        let mut out = vec![ob; n];
        for (i, o) in out.iter_mut().enumerate() {
            for j in 0..3 {
                let src = i + j;
                if !(1..=n).contains(&src) {
                    continue;
                }
                let srow = &dec[(src - 1) * c..src * c];
                for ch in 0..c {
                    *o += ow[ch * 3 + j] * srow[ch];
                }
            }
        }

        Ok(Cache {
            cond_in: condition.to_vec(),
            cond_pre,
            cond_h,
            emb,
            x: x.to_vec(),
            enc_pre,
            xhat,
            inv_std,
            nrm,
            q,
            k,
            v,
            attn,
            ctx,
            y,
            dec_pre,
            dec,
            out,
        })
    }

    /// Predicted noise for normalized phases `theta_t` at step `t >= 1`.
    pub fn forward(&self, theta_t: &[T], condition: &[T], t: usize) -> Result<Vec<T>> {
        Ok(self.forward_cache(theta_t, condition, t)?.out)
    }

    /// Accumulates `∂(Σ dout·out)/∂params` into `grad`.
    fn backward(&self, cache: &Cache<T>, dout: &[T], grad: &mut [T]) {
        let d = &self.dims;
        let l = &self.layout;
        let (c, n, half) = (d.width, d.n, d.half());

        // output conv
        grad[l.out_b.start] += dout.iter().copied().sum::<T>();
        let ow = self.p(&l.out_w);
        let mut ddec = vec![T::zero(); n * c];
        {
            let gw = &mut grad[l.out_w.clone()];
            for (i, &g) in dout.iter().enumerate() {
                for j in 0..3 {
                    let src = i + j;
                    if !(1..=n).contains(&src) {
                        continue;
                    }
                    let row = (src - 1) * c;
                    for ch in 0..c {
                        gw[ch * 3 + j] += g * cache.dec[row + ch];
                        ddec[row + ch] += g * ow[ch * 3 + j];
                    }
                }
            }
        }

        // decoder conv through SiLU
        let dpre: Vec<T> = ddec.iter().zip(&cache.dec_pre).map(|(&g, &x)| g * silu_grad(x)).collect();
        let dw = self.p(&l.dec_w);
        let mut dy = vec![T::zero(); half * c];
        for i in 0..n {
            for co in 0..c {
                let g = dpre[i * c + co];
                grad[l.dec_b.start + co] += g;
                for j in 0..3 {
                    let src = i + j;
                    if !(1..=n).contains(&src) {
                        continue;
                    }
                    let ur = ((src - 1) / 2) * c;
                    let wbase = co * c * 3;
                    for ci in 0..c {
                        grad[l.dec_w.start + wbase + ci * 3 + j] += g * cache.y[ur + ci];
                        dy[ur + ci] += g * dw[wbase + ci * 3 + j];
                    }
                }
            }
        }

        // attention output projection; residual passes dy straight to e
        let mut de = dy.clone();
        let mut dctx = vec![T::zero(); half * c];
        for p in 0..half {
            let g = &dy[p * c..(p + 1) * c];
            for ch in 0..c {
                grad[l.bo.start + ch] += g[ch];
            }
            let dx = affine_back(self.p(&l.wo), &cache.ctx[p * c..(p + 1) * c], g, &mut grad[l.wo.clone()]);
            dctx[p * c..(p + 1) * c].copy_from_slice(&dx);
        }
        let mut dattn = vec![T::zero(); half * half];
        let mut dv = vec![T::zero(); half * c];
        for p in 0..half {
            for pp in 0..half {
                let a = cache.attn[p * half + pp];
                let mut s = T::zero();
                for ch in 0..c {
                    s += dctx[p * c + ch] * cache.v[pp * c + ch];
                    dv[pp * c + ch] += a * dctx[p * c + ch];
                }
                dattn[p * half + pp] = s;
            }
        }
        let scale = T::one() / T::from_usize_lossy(c).sqrt();
        let mut dq = vec![T::zero(); half * c];
        let mut dk = vec![T::zero(); half * c];
        for p in 0..half {
            let arow = &cache.attn[p * half..(p + 1) * half];
            let drow = &dattn[p * half..(p + 1) * half];
            let dot = arow.iter().zip(drow).fold(T::zero(), |acc, (&a, &g)| acc + a * g);
            for pp in 0..half {
                let ds = arow[pp] * (drow[pp] - dot) * scale;
                for ch in 0..c {
                    dq[p * c + ch] += ds * cache.k[pp * c + ch];
                    dk[pp * c + ch] += ds * cache.q[p * c + ch];
                }
            }
        }
        let mut dnrm = vec![T::zero(); half * c];
        for p in 0..half {
            let row = &cache.nrm[p * c..(p + 1) * c];
            for (w, dsrc) in [(&l.wq, &dq), (&l.wk, &dk), (&l.wv, &dv)] {
                let dx = affine_back(self.p(w), row, &dsrc[p * c..(p + 1) * c], &mut grad[w.clone()]);
                for ch in 0..c {
                    dnrm[p * c + ch] += dx[ch];
                }
            }
        }

        // layer norm
        let gamma = self.p(&l.ln_gamma);
        let cw = T::from_usize_lossy(c);
        for p in 0..half {
            let xh = &cache.xhat[p * c..(p + 1) * c];
            let dn = &dnrm[p * c..(p + 1) * c];
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for ch in 0..c {
                grad[l.ln_gamma.start + ch] += dn[ch] * xh[ch];
                grad[l.ln_beta.start + ch] += dn[ch];
                let dxh = dn[ch] * gamma[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[ch];
            }
            let inv = cache.inv_std[p];
            for ch in 0..c {
                let dxh = dn[ch] * gamma[ch];
                de[p * c + ch] += inv / cw * (cw * dxh - sum_dxh - xh[ch] * sum_dxh_xh);
            }
        }

        // encoder and broadcast conditioning
        let mut dz = vec![T::zero(); c];
        for p in 0..half {
            for ch in 0..c {
                let g = de[p * c + ch];
                dz[ch] += g;
                let gp = g * silu_grad(cache.enc_pre[p * c + ch]);
                grad[l.enc_b.start + ch] += gp;
                for j in 0..3 {
                    let i = 2 * p + j;
                    if (1..=n).contains(&i) {
                        grad[l.enc_w.start + ch * 3 + j] += gp * cache.x[i - 1];
                    }
                }
            }
        }
        for ch in 0..c {
            grad[l.time_b.start + ch] += dz[ch];
            grad[l.cond_b2.start + ch] += dz[ch];
        }
        affine_back(self.p(&l.time_w), &cache.emb, &dz, &mut grad[l.time_w.clone()]);
        let dh = affine_back(self.p(&l.cond_w2), &cache.cond_h, &dz, &mut grad[l.cond_w2.clone()]);
        let dpre1: Vec<T> = dh.iter().zip(&cache.cond_pre).map(|(&g, &x)| g * silu_grad(x)).collect();
        for (h, &g) in dpre1.iter().enumerate() {
            grad[l.cond_b1.start + h] += g;
        }
        affine_back(self.p(&l.cond_w1), &cache.cond_in, &dpre1, &mut grad[l.cond_w1.clone()]);
    }

    fn check_batch(&self, batch: &[Sample<'_, T>]) -> Result<()> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        for s in batch {
            if s.eps.len() != self.dims.n {
                return Err(Error::Dimension(format!("target length {} != N = {}", s.eps.len(), self.dims.n)));
            }
        }
        Ok(())
    }

    fn sq_err(out: &[T], eps: &[T]) -> T {
        out.iter().zip(eps).fold(T::zero(), |a, (&o, &e)| a + (o - e) * (o - e))
    }

    /// Mean over batch and positions of the squared prediction error.
    pub fn loss(&self, batch: &[Sample<'_, T>]) -> Result<T> {
        self.check_batch(batch)?;
        let per: Vec<T> = batch
            .par_iter()
            .map(|s| Ok(Self::sq_err(&self.forward(s.theta_t, s.condition, s.t)?, s.eps)))
            .collect::<Result<_>>()?;
        Ok(per.into_iter().sum::<T>() / T::from_usize_lossy(batch.len() * self.dims.n))
    }

    /// Loss and its exact gradient with respect to every parameter. Per-sample
    /// gradients are computed in parallel and summed in batch order.
    pub fn loss_and_grad(&self, batch: &[Sample<'_, T>]) -> Result<(T, Vec<T>)> {
        self.check_batch(batch)?;
        let denom = T::from_usize_lossy(batch.len() * self.dims.n);
        let two = T::lit(2.0);
        let per: Vec<(T, Vec<T>)> = batch
            .par_iter()
            .map(|s| {
                let cache = self.forward_cache(s.theta_t, s.condition, s.t)?;
                let dout: Vec<T> = cache.out.iter().zip(s.eps).map(|(&o, &e)| two * (o - e) / denom).collect();
                let mut g = vec![T::zero(); self.layout.total];
                self.backward(&cache, &dout, &mut g);
                Ok((Self::sq_err(&cache.out, s.eps), g))
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![T::zero(); self.layout.total];
        let mut total = T::zero();
        for (sq, g) in per {
            total += sq;
            grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
        Ok((total / denom, grad))
    }
}
