//! Frozen pre-LN transformer with parallel adapters on every feed-forward
//! sublayer, plus reverse-mode gradients into the adapter weights.
//!
//! Per layer:
//! ```text
//! A = LN1(X);  H = X + Attn(A)
//! B = LN2(H);  Y = H + FFN(B) + up(tanh(down(B)))
//! ```
//! followed by a final LayerNorm and an untied output head.

use sha2::{Digest, Sha256};

use super::adapter::{AdapterLayer, BottleneckAdapter};
use crate::linalg::{softmax, Mat};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn random(d: usize, rng: &mut Rng) -> Self {
        let g = Mat::randn(1, d, 0.1, rng);
        let b = Mat::randn(1, d, 0.1, rng);
        LayerNorm { gamma: g.data.iter().map(|x| 1.0 + x).collect(), beta: b.data }
    }

    fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let d = x.cols as f64;
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut out = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..x.cols {
                let h = (r[j] - mean) * is;
                xhat.data[i * x.cols + j] = h;
                out.data[i * x.cols + j] = self.gamma[j] * h + self.beta[j];
            }
        }
        (out, LnCache { xhat, inv_std })
    }

    fn backward(&self, c: &LnCache, dy: &Mat) -> Mat {
        let d = dy.cols as f64;
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        for i in 0..dy.rows {
            let xh = c.xhat.row(i);
            let dxh: Vec<f64> = dy.row(i).iter().zip(&self.gamma).map(|(g, w)| g * w).collect();
            let m1 = dxh.iter().sum::<f64>() / d;
            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
            let o = dx.row_mut(i);
            for j in 0..o.len() {
                o[j] = c.inv_std[i] * (dxh[j] - m1 - xh[j] * m2);
            }
        }
        dx
    }

    fn hash_into(&self, h: &mut Sha256) {
        for x in self.gamma.iter().chain(&self.beta) {
            h.update(x.to_le_bytes());
        }
    }
}

#[derive(Debug, Clone)]
struct FrozenLayer {
    ln1: LayerNorm,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    ln2: LayerNorm,
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
}

/// All non-adapter weights. Never mutated after construction.
#[derive(Debug, Clone)]
pub(crate) struct FrozenWeights {
    heads: usize,
    causal: bool,
    tok_emb: Mat,
    pos_emb: Mat,
    layers: Vec<FrozenLayer>,
    lnf: LayerNorm,
    unembed: Mat,
}

struct LayerCache {
    x: Mat,
    ln1: LnCache,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ln2: LnCache,
    b: Mat,
    pre1: Mat,
    ad_act: Option<Mat>,
}

/// Intermediate activations of one forward pass, kept for backprop.
pub(crate) struct Trace {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    pub out: Mat,
}

impl FrozenWeights {
    pub(crate) fn random(
        layers: usize,
        d: usize,
        heads: usize,
        vocab: usize,
        positions: usize,
        causal: bool,
        rng: &mut Rng,
    ) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let ff = 4 * d;
        let tok_emb = Mat::randn(vocab, d, 1.0, rng);
        let pos_emb = Mat::randn(positions, d, 0.5, rng);
        let layers = (0..layers)
            .map(|_| FrozenLayer {
                ln1: LayerNorm::random(d, rng),
                wq: Mat::randn(d, d, s, rng),
                wk: Mat::randn(d, d, s, rng),
                wv: Mat::randn(d, d, s, rng),
                wo: Mat::randn(d, d, s, rng),
                ln2: LayerNorm::random(d, rng),
                w1: Mat::randn(d, ff, s, rng),
                b1: Mat::randn(1, ff, 0.02, rng).data,
                w2: Mat::randn(ff, d, 0.5 / (ff as f64).sqrt(), rng),
                b2: Mat::randn(1, d, 0.02, rng).data,
            })
            .collect();
        let lnf = LayerNorm::random(d, rng);
        let unembed = Mat::randn(vocab, d, 2.0 * s, rng);
        FrozenWeights { heads, causal, tok_emb, pos_emb, layers, lnf, unembed }
    }

    pub(crate) fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |m: &Mat| {
            for x in &m.data {
                h.update(x.to_le_bytes());
            }
        };
        put(&self.tok_emb);
        put(&self.pos_emb);
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                put(m);
            }
            put(&Mat::from_vec(1, l.b1.len(), l.b1.clone()));
            put(&Mat::from_vec(1, l.b2.len(), l.b2.clone()));
        }
        put(&self.unembed);
        for l in &self.layers {
            l.ln1.hash_into(&mut h);
            l.ln2.hash_into(&mut h);
        }
        self.lnf.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn forward(&self, ids: &[u32], adapter: Option<&BottleneckAdapter>) -> Trace {
        let d = self.tok_emb.cols;
        let s = ids.len();
        let mut x = Mat::zeros(s, d);
        for (i, &id) in ids.iter().enumerate() {
            let r = x.row_mut(i);
            for ((o, a), b) in r.iter_mut().zip(self.tok_emb.row(id as usize)).zip(self.pos_emb.row(i)) {
                *o = a + b;
            }
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let ad = adapter.map(|a| &a.layers[li]);
            let (y, cache) = self.layer_forward(layer, x, ad);
            caches.push(cache);
            x = y;
        }
        let (out, lnf) = self.lnf.forward(&x);
        Trace { layers: caches, lnf, out }
    }

    fn layer_forward(&self, l: &FrozenLayer, x: Mat, ad: Option<&AdapterLayer>) -> (Mat, LayerCache) {
        let (a, ln1) = l.ln1.forward(&x);
        let q = a.matmul(&l.wq);
        let k = a.matmul(&l.wk);
        let v = a.matmul(&l.wv);
        let s = x.rows;
        let d = x.cols;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Mat::zeros(s, d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.col_block(h * dh, dh);
            let kh = k.col_block(h * dh, dh);
            let vh = v.col_block(h * dh, dh);
            let mut sc = qh.matmul_t(&kh);
            sc.scale(scale);
            let mut p = Mat::zeros(s, s);
            for i in 0..s {
                let lim = if self.causal { i + 1 } else { s };
                let row = softmax(&sc.row(i)[..lim]);
                p.row_mut(i)[..lim].copy_from_slice(&row);
            }
            concat.set_col_block(h * dh, &p.matmul(&vh));
            probs.push(p);
        }
        let mut hmat = concat.matmul(&l.wo);
        hmat.add_assign(&x);
        let (b, ln2) = l.ln2.forward(&hmat);
        let mut pre1 = b.matmul(&l.w1);
        pre1.add_row_bias(&l.b1);
        let act1 = pre1.map(gelu);
        let mut y = act1.matmul(&l.w2);
        y.add_row_bias(&l.b2);
        y.add_assign(&hmat);
        let ad_act = ad.map(|ad| {
            let act = b.matmul(&ad.down).map(f64::tanh);
            y.add_assign(&act.matmul(&ad.up));
            act
        });
        let cache = LayerCache { x, ln1, q, k, v, probs, ln2, b, pre1, ad_act };
        (y, cache)
    }

    /// Logits over the vocabulary for one output row.
    pub(crate) fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        (0..self.unembed.rows).map(|t| crate::types::dot(self.unembed.row(t), hidden)).collect()
    }

    /// Gradient of a scalar w.r.t. the output rows, given gradients on the
    /// vocabulary logits for selected rows: `d_hidden[row] = Σ_t d_logit[t] · unembed[t]`.
    pub(crate) fn logits_backward(&self, d_logits: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.unembed.cols];
        for (t, &g) in d_logits.iter().enumerate() {
            if g != 0.0 {
                for (o, w) in out.iter_mut().zip(self.unembed.row(t)) {
                    *o += g * w;
                }
            }
        }
        out
    }

    /// Accumulates into `grad` the gradient of a scalar whose derivative
    /// w.r.t. the final hidden states is `d_out`.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        d_out: &Mat,
        adapter: &BottleneckAdapter,
        grad: &mut BottleneckAdapter,
    ) {
        let mut dy = self.lnf.backward(&trace.lnf, d_out);
        for li in (0..self.layers.len()).rev() {
            dy = self.layer_backward(
                &self.layers[li],
                &trace.layers[li],
                dy,
                &adapter.layers[li],
                &mut grad.layers[li],
            );
        }
    }

    fn layer_backward(
        &self,
        l: &FrozenLayer,
        c: &LayerCache,
        dy: Mat,
        ad: &AdapterLayer,
        g: &mut AdapterLayer,
    ) -> Mat {
        // feed-forward branch
        let mut dpre1 = dy.matmul_t(&l.w2);
        for (dp, &p) in dpre1.data.iter_mut().zip(&c.pre1.data) {
            *dp *= gelu_grad(p);
        }
        let mut db = dpre1.matmul_t(&l.w1);

        // adapter branch
        let act = c.ad_act.as_ref().expect("adapter trace required for adapter gradients");
        g.up.add_assign(&act.t_matmul(&dy));
        let mut dpre = dy.matmul_t(&ad.up);
        for (dp, &a) in dpre.data.iter_mut().zip(&act.data) {
            *dp *= 1.0 - a * a;
        }
        g.down.add_assign(&c.b.t_matmul(&dpre));
        db.add_assign(&dpre.matmul_t(&ad.down));

        let mut dh = l.ln2.backward(&c.ln2, &db);
        dh.add_assign(&dy);

        // attention branch
        let s = c.x.rows;
        let d = c.x.cols;
        let dh_ = d / self.heads;
        let scale = 1.0 / (dh_ as f64).sqrt();
        let dconcat = dh.matmul_t(&l.wo);
        let mut dq = Mat::zeros(s, d);
        let mut dk = Mat::zeros(s, d);
        let mut dv = Mat::zeros(s, d);
        for h in 0..self.heads {
            let p = &c.probs[h];
            let qh = c.q.col_block(h * dh_, dh_);
            let kh = c.k.col_block(h * dh_, dh_);
            let vh = c.v.col_block(h * dh_, dh_);
            let doh = dconcat.col_block(h * dh_, dh_);
            let dp = doh.matmul_t(&vh);
            dv.set_col_block(h * dh_, &p.t_matmul(&doh));
            let mut ds = Mat::zeros(s, s);
            for i in 0..s {
                let pr = p.row(i);
                let dr = dp.row(i);
                let inner: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                let o = ds.row_mut(i);
                for j in 0..s {
                    o[j] = pr[j] * (dr[j] - inner) * scale;
                }
            }
            dq.set_col_block(h * dh_, &ds.matmul(&kh));
            dk.set_col_block(h * dh_, &ds.t_matmul(&qh));
        }
        let mut da = dq.matmul_t(&l.wq);
        da.add_assign(&dk.matmul_t(&l.wk));
        da.add_assign(&dv.matmul_t(&l.wv));
        let mut dx = l.ln1.backward(&c.ln1, &da);
        dx.add_assign(&dh);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layernorm_backward_matches_difference() {
        let mut r = seeded(1, 1);
        let ln = LayerNorm::random(5, &mut r);
        let x = Mat::randn(2, 5, 1.0, &mut r);
        let w = Mat::randn(2, 5, 1.0, &mut r);
        let f = |x: &Mat| -> f64 {
            let (y, _) = ln.forward(x);
            y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let (_, c) = ln.forward(&x);
        let dx = ln.backward(&c, &w);
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += 1e-6;
            let mut xm = x.clone();
            xm.data[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx.data[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx.data[i]);
        }
    }
}
