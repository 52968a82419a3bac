//! Pre-norm decoder-only transformer with learned positional embeddings and
//! a hand-written backward pass.
//!
//! The forward path always runs on an embedding sequence; the token path is a
//! row lookup in front of it, so both paths share every floating point
//! operation after the lookup.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    axpy, dot, matmul_bias, matmul_nt, matmul_tn_acc, softmax_in_place, sum_rows_acc, Matrix,
    Scalar,
};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub ff_dim: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            dim: 64,
            layers: 2,
            heads: 4,
            context: 128,
            ff_dim: 256,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3
            || self.dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.context == 0
            || self.ff_dim == 0
        {
            return Err(Error::Config(format!("degenerate LM config {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Matrix<T>,
    pub ln1_b: Matrix<T>,
    pub wq: Matrix<T>,
    pub bq: Matrix<T>,
    pub wk: Matrix<T>,
    pub bk: Matrix<T>,
    pub wv: Matrix<T>,
    pub bv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub ln2_g: Matrix<T>,
    pub ln2_b: Matrix<T>,
    pub w_fc: Matrix<T>,
    pub b_fc: Matrix<T>,
    pub w_proj: Matrix<T>,
    pub b_proj: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T> {
    pub config: LmConfig,
    pub wte: Matrix<T>,
    pub wpe: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Matrix<T>,
    pub lnf_b: Matrix<T>,
    pub w_head: Matrix<T>,
    pub b_head: Matrix<T>,
}

/// Logits and final (post-norm) hidden states of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LmOutput<T> {
    pub logits: Matrix<T>,
    pub hidden: Matrix<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(c: &LmConfig) -> Self {
        let d = c.dim;
        let f = c.ff_dim;
        Self {
            ln1_g: Matrix::zeros(1, d),
            ln1_b: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            bq: Matrix::zeros(1, d),
            wk: Matrix::zeros(d, d),
            bk: Matrix::zeros(1, d),
            wv: Matrix::zeros(d, d),
            bv: Matrix::zeros(1, d),
            wo: Matrix::zeros(d, d),
            bo: Matrix::zeros(1, d),
            ln2_g: Matrix::zeros(1, d),
            ln2_b: Matrix::zeros(1, d),
            w_fc: Matrix::zeros(d, f),
            b_fc: Matrix::zeros(1, f),
            w_proj: Matrix::zeros(f, d),
            b_proj: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Matrix<T>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w_fc, &self.b_fc, &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w_fc, &mut self.b_fc, &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

const LAYER_TENSOR_NAMES: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w_fc", "mlp.b_fc", "mlp.w_proj", "mlp.b_proj",
];

impl<T: Scalar> LmParams<T> {
    /// All-zero parameters of the right shapes; used as gradient buffers.
    pub fn zeros(config: &LmConfig) -> Self {
        let d = config.dim;
        Self {
            config: config.clone(),
            wte: Matrix::zeros(config.vocab_size, d),
            wpe: Matrix::zeros(config.context, d),
            layers: (0..config.layers).map(|_| LayerParams::zeros(config)).collect(),
            lnf_g: Matrix::zeros(1, d),
            lnf_b: Matrix::zeros(1, d),
            w_head: Matrix::zeros(d, config.vocab_size),
            b_head: Matrix::zeros(1, config.vocab_size),
        }
    }

    /// Seeded initialization: uniform weights with standard deviation 0.02
    /// (residual output projections scaled down by `sqrt(2 * layers)`),
    /// unit norm gains, zero biases.
    pub fn init(config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.02 * 3f64.sqrt();
        let proj_bound = bound / (2.0 * config.layers as f64).sqrt();
        let d = config.dim;
        let f = config.ff_dim;
        let mut p = Self::zeros(config);
        p.wte = Matrix::uniform(config.vocab_size, d, bound, &mut rng);
        p.wpe = Matrix::uniform(config.context, d, bound, &mut rng);
        for layer in &mut p.layers {
            layer.ln1_g = Matrix::filled(1, d, T::one());
            layer.ln2_g = Matrix::filled(1, d, T::one());
            layer.wq = Matrix::uniform(d, d, bound, &mut rng);
            layer.wk = Matrix::uniform(d, d, bound, &mut rng);
            layer.wv = Matrix::uniform(d, d, bound, &mut rng);
            layer.wo = Matrix::uniform(d, d, proj_bound, &mut rng);
            layer.w_fc = Matrix::uniform(d, f, bound, &mut rng);
            layer.w_proj = Matrix::uniform(f, d, proj_bound, &mut rng);
        }
        p.lnf_g = Matrix::filled(1, d, T::one());
        p.w_head = Matrix::uniform(d, config.vocab_size, bound, &mut rng);
        Ok(p)
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["wte".to_string(), "wpe".to_string()];
        for i in 0..self.layers.len() {
            names.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("h{i}.{n}")));
        }
        names.extend(["lnf.g", "lnf.b", "head.w", "head.b"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.wte, &self.wpe];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_head, &self.b_head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.w_head,
            &mut self.b_head,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LmParams<U> {
        let mut out = LmParams::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Token-embedding rows for `ids`.
    pub fn embedding_rows(&self, ids: &[u32]) -> Result<Matrix<T>> {
        let mut m = Matrix::zeros(0, self.config.dim);
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            m.push_row(self.wte.row(id as usize));
        }
        Ok(m)
    }

    pub fn forward_tokens(&self, ids: &[u32]) -> Result<LmOutput<T>> {
        self.check_len(ids.len())?;
        let x = self.embedding_rows(ids)?;
        self.forward_embeddings(&x)
    }

    pub fn forward_embeddings(&self, vectors: &Matrix<T>) -> Result<LmOutput<T>> {
        self.check_input(vectors)?;
        let all: Vec<usize> = (0..vectors.rows).collect();
        let pass = self.run(vectors, &all, false);
        Ok(LmOutput {
            logits: pass.logits,
            hidden: pass.hidden,
        })
    }

    /// Forward pass keeping activations for [`LmParams::backward`]; logits
    /// are produced only for `rows`.
    pub fn forward_train(&self, vectors: &Matrix<T>, rows: &[usize]) -> Result<ForwardPass<T>> {
        self.check_input(vectors)?;
        if let Some(&r) = rows.iter().find(|&&r| r >= vectors.rows) {
            return Err(Error::Invalid(format!("logit row {r} beyond sequence length")));
        }
        Ok(self.run(vectors, rows, true))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.context {
            return Err(Error::ContextOverflow {
                required: len,
                actual: self.config.context,
            });
        }
        Ok(())
    }

    fn check_input(&self, vectors: &Matrix<T>) -> Result<()> {
        if vectors.cols != self.config.dim {
            return Err(Error::WidthMismatch {
                expected: self.config.dim,
                actual: vectors.cols,
            });
        }
        self.check_len(vectors.rows)
    }

    fn run(&self, vectors: &Matrix<T>, rows: &[usize], keep: bool) -> ForwardPass<T> {
        let len = vectors.rows;
        let d = self.config.dim;
        let mut x = vectors.clone();
        for i in 0..len {
            axpy(T::one(), self.wpe.row(i), x.row_mut(i));
        }
        let mut caches = Vec::new();
        for layer in &self.layers {
            let (next, cache) = layer_forward(layer, &self.config, x);
            x = next;
            caches.push(cache);
        }
        let (hidden, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let mut logits = Matrix::zeros(rows.len(), self.config.vocab_size);
        for (r, &i) in rows.iter().enumerate() {
            let out = logits.row_mut(r);
            out.copy_from_slice(&self.b_head.data);
            for (p, &h) in hidden.row(i).iter().enumerate() {
                axpy(h, self.w_head.row(p), out);
            }
        }
        debug_assert_eq!(hidden.cols, d);
        ForwardPass {
            logits,
            rows: rows.to_vec(),
            cache: keep.then(|| Cache {
                layers: caches,
                lnf,
                hidden: hidden.clone(),
            }),
            hidden,
        }
    }

    /// Reverse pass. `d_logits` holds one row per logit row requested in the
    /// forward pass. Returns the gradient with respect to the input vectors;
    /// parameter gradients (excluding `wte`, which only the token path
    /// touches) are accumulated into `grads` when given.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        d_logits: &Matrix<T>,
        mut grads: Option<&mut LmParams<T>>,
    ) -> Matrix<T> {
        let cache = pass.cache.as_ref().expect("forward_train keeps activations");
        let len = cache.hidden.rows;
        let d = self.config.dim;
        assert_eq!(d_logits.rows, pass.rows.len());

        let mut d_hidden = Matrix::zeros(len, d);
        for (r, &i) in pass.rows.iter().enumerate() {
            let g = d_logits.row(r);
            let dh = d_hidden.row_mut(i);
            for (p, v) in dh.iter_mut().enumerate() {
                *v = *v + dot(g, self.w_head.row(p));
            }
            if let Some(gr) = grads.as_deref_mut() {
                axpy(T::one(), g, &mut gr.b_head.data);
                for (p, &h) in cache.hidden.row(i).iter().enumerate() {
                    axpy(h, g, gr.w_head.row_mut(p));
                }
            }
        }
        let mut dx = layer_norm_backward(
            &d_hidden,
            &cache.lnf,
            &self.lnf_g,
            grads.as_deref_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
        );
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let lg = grads.as_deref_mut().map(|g| &mut g.layers[li]);
            dx = layer_backward(layer, &self.config, &cache.layers[li], dx, lg);
        }
        if let Some(g) = grads {
            for i in 0..len {
                axpy(T::one(), dx.row(i), g.wpe.row_mut(i));
            }
        }
        dx
    }
}

pub struct ForwardPass<T> {
    pub logits: Matrix<T>,
    pub hidden: Matrix<T>,
    rows: Vec<usize>,
    cache: Option<Cache<T>>,
}

struct Cache<T> {
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    hidden: Matrix<T>,
}

struct LnCache<T> {
    xhat: Matrix<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<T>,
    attn: Matrix<T>,
    ln2: LnCache<T>,
    a2: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

fn layer_norm<T: Scalar>(x: &Matrix<T>, g: &Matrix<T>, b: &Matrix<T>) -> (Matrix<T>, LnCache<T>) {
    let n = T::of(x.cols as f64);
    let eps = T::of(LN_EPS);
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for j in 0..x.cols {
            let h = (row[j] - mean) * r;
            xhat.data[i * x.cols + j] = h;
            y.data[i * x.cols + j] = h * g.data[j] + b.data[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    g: &Matrix<T>,
    grads: Option<(&mut Matrix<T>, &mut Matrix<T>)>,
) -> Matrix<T> {
    let cols = dy.cols;
    let n = T::of(cols as f64);
    let mut dx = Matrix::zeros(dy.rows, cols);
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..cols {
            let dxh = dyr[j] * g.data[j];
            mean_dxh = mean_dxh + dxh;
            mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
        }
        mean_dxh = mean_dxh / n;
        mean_dxh_xh = mean_dxh_xh / n;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..cols {
            let dxh = dyr[j] * g.data[j];
            out[j] = r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    if let Some((dg, db)) = grads {
        for i in 0..dy.rows {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            for j in 0..cols {
                dg.data[j] = dg.data[j] + dyr[j] * xh[j];
                db.data[j] = db.data[j] + dyr[j];
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn layer_forward<T: Scalar>(
    p: &LayerParams<T>,
    c: &LmConfig,
    x: Matrix<T>,
) -> (Matrix<T>, LayerCache<T>) {
    let len = x.rows;
    let hd = c.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();

    let (a, ln1) = layer_norm(&x, &p.ln1_g, &p.ln1_b);
    let q = matmul_bias(&a, &p.wq, &p.bq);
    let k = matmul_bias(&a, &p.wk, &p.bk);
    let v = matmul_bias(&a, &p.wv, &p.bv);

    let mut probs = vec![T::zero(); c.heads * len * len];
    let mut attn = Matrix::zeros(len, c.dim);
    for h in 0..c.heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..len {
            let base = (h * len + i) * len;
            let row = &mut probs[base..base + i + 1];
            let qi = &q.row(i)[cols.clone()];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(row);
            let out = &mut attn.row_mut(i)[cols.clone()];
            for j in 0..=i {
                axpy(probs[base + j], &v.row(j)[cols.clone()], out);
            }
        }
    }
    let mut x_mid = matmul_bias(&attn, &p.wo, &p.bo);
    x_mid.add_assign(&x);

    let (a2, ln2) = layer_norm(&x_mid, &p.ln2_g, &p.ln2_b);
    let pre = matmul_bias(&a2, &p.w_fc, &p.b_fc);
    let act = Matrix::from_vec(pre.rows, pre.cols, pre.data.iter().map(|&z| gelu(z)).collect());
    let mut out = matmul_bias(&act, &p.w_proj, &p.b_proj);
    out.add_assign(&x_mid);

    (
        out,
        LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            a2,
            pre,
            act,
        },
    )
}

fn layer_backward<T: Scalar>(
    p: &LayerParams<T>,
    c: &LmConfig,
    cache: &LayerCache<T>,
    d_out: Matrix<T>,
    mut grads: Option<&mut LayerParams<T>>,
) -> Matrix<T> {
    let len = d_out.rows;
    let hd = c.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();

    // feed-forward
    let d_act = matmul_nt(&d_out, &p.w_proj);
    let d_pre = Matrix::from_vec(
        d_act.rows,
        d_act.cols,
        d_act
            .data
            .iter()
            .zip(&cache.pre.data)
            .map(|(&g, &z)| g * gelu_grad(z))
            .collect(),
    );
    let d_a2 = matmul_nt(&d_pre, &p.w_fc);
    if let Some(g) = grads.as_deref_mut() {
        matmul_tn_acc(&cache.act, &d_out, &mut g.w_proj);
        sum_rows_acc(&d_out, &mut g.b_proj);
        matmul_tn_acc(&cache.a2, &d_pre, &mut g.w_fc);
        sum_rows_acc(&d_pre, &mut g.b_fc);
    }
    let mut d_mid = layer_norm_backward(
        &d_a2,
        &cache.ln2,
        &p.ln2_g,
        grads.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
    );
    d_mid.add_assign(&d_out);

    // attention
    let d_attn = matmul_nt(&d_mid, &p.wo);
    if let Some(g) = grads.as_deref_mut() {
        matmul_tn_acc(&cache.attn, &d_mid, &mut g.wo);
        sum_rows_acc(&d_mid, &mut g.bo);
    }
    let mut dq = Matrix::zeros(len, c.dim);
    let mut dk = Matrix::zeros(len, c.dim);
    let mut dv = Matrix::zeros(len, c.dim);
    let mut dp = vec![T::zero(); len];
    for h in 0..c.heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..len {
            let base = (h * len + i) * len;
            let probs = &cache.probs[base..base + i + 1];
            let go = &d_attn.row(i)[cols.clone()];
            let mut weighted = T::zero();
            for j in 0..=i {
                dp[j] = dot(go, &cache.v.row(j)[cols.clone()]);
                weighted = weighted + probs[j] * dp[j];
                axpy(probs[j], go, &mut dv.row_mut(j)[cols.clone()]);
            }
            for j in 0..=i {
                let ds = probs[j] * (dp[j] - weighted) * scale;
                axpy(ds, &cache.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                axpy(ds, &cache.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    let mut d_a = matmul_nt(&dq, &p.wq);
    d_a.add_assign(&matmul_nt(&dk, &p.wk));
    d_a.add_assign(&matmul_nt(&dv, &p.wv));
    if let Some(g) = grads.as_deref_mut() {
        matmul_tn_acc(&cache.a, &dq, &mut g.wq);
        sum_rows_acc(&dq, &mut g.bq);
        matmul_tn_acc(&cache.a, &dk, &mut g.wk);
        sum_rows_acc(&dk, &mut g.bk);
        matmul_tn_acc(&cache.a, &dv, &mut g.wv);
        sum_rows_acc(&dv, &mut g.bv);
    }
    let mut dx = layer_norm_backward(
        &d_a,
        &cache.ln1,
        &p.ln1_g,
        grads.map(|g| (&mut g.ln1_g, &mut g.ln1_b)),
    );
    dx.add_assign(&d_mid);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::log_sum_exp;

    fn tiny() -> LmConfig {
        LmConfig {
            vocab_size: 11,
            dim: 16,
            layers: 2,
            heads: 4,
            context: 12,
            ff_dim: 24,
        }
    }

    /// Initialization scaled up so the gradient check sees non-trivial
    /// attention patterns and nonlinearity.
    fn params64() -> LmParams<f64> {
        let mut p = LmParams::<f64>::init(&tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for t in p.tensors_mut() {
            let noise = Matrix::<f64>::uniform(t.rows, t.cols, 0.3, &mut rng);
            for (v, n) in t.data.iter_mut().zip(&noise.data) {
                *v = *v * 10.0 + n;
            }
        }
        p
    }

    fn loss_at(p: &LmParams<f64>, x: &Matrix<f64>, rows: &[usize], targets: &[u32]) -> f64 {
        let out = p.forward_embeddings(x).unwrap();
        rows.iter()
            .zip(targets)
            .map(|(&r, &t)| log_sum_exp(out.logits.row(r)) - out.logits.get(r, t as usize))
            .sum::<f64>()
            / targets.len() as f64
    }

    fn analytic(
        p: &LmParams<f64>,
        x: &Matrix<f64>,
        rows: &[usize],
        targets: &[u32],
        grads: Option<&mut LmParams<f64>>,
    ) -> Matrix<f64> {
        let pass = p.forward_train(x, rows).unwrap();
        let mut dl = pass.logits.clone();
        for (r, &t) in targets.iter().enumerate() {
            let row = dl.row_mut(r);
            softmax_in_place(row);
            row[t as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v /= targets.len() as f64);
        }
        p.backward(&pass, &dl, grads)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let p = params64();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::<f64>::uniform(7, 16, 1.0, &mut rng);
        let rows = [4, 5, 6];
        let targets = [3u32, 9, 1];
        let g = analytic(&p, &x, &rows, &targets, None);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss_at(&p, &xp, &rows, &targets) - loss_at(&p, &xm, &rows, &targets)) / (2.0 * h);
            worst = worst.max(rel_err(g.data[idx], fd));
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let p = params64();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::<f64>::uniform(5, 16, 1.0, &mut rng);
        let rows = [2, 3, 4];
        let targets = [0u32, 7, 10];
        let mut grads = LmParams::<f64>::zeros(&p.config);
        analytic(&p, &x, &rows, &targets, Some(&mut grads));
        let h = 1e-5;
        let names = p.tensor_names();
        let mut worst: f64 = 0.0;
        for (ti, name) in names.iter().enumerate() {
            if name == "wte" {
                continue;
            }
            let n = p.tensors()[ti].len();
            // probe a spread of entries in every tensor
            for idx in (0..n).step_by((n / 7).max(1)) {
                let mut pp = p.clone();
                pp.tensors_mut()[ti].data[idx] += h;
                let mut pm = p.clone();
                pm.tensors_mut()[ti].data[idx] -= h;
                let fd = (loss_at(&pp, &x, &rows, &targets) - loss_at(&pm, &x, &rows, &targets)) / (2.0 * h);
                let an = grads.tensors()[ti].data[idx];
                let e = rel_err(an, fd);
                assert!(e < 1e-5, "{name}[{idx}]: analytic {an} vs fd {fd}");
                worst = worst.max(e);
            }
        }
        assert!(worst < 1e-5);
    }

    #[test]
    fn causality_and_path_equivalence() {
        let p = LmParams::<f32>::init(&tiny(), 1).unwrap();
        let ids = [0u32, 4, 7, 2, 9];
        let full = p.forward_tokens(&ids).unwrap();
        let prefix = p.forward_tokens(&ids[..3]).unwrap();
        for i in 0..3 {
            assert_eq!(full.logits.row(i), prefix.logits.row(i));
        }
        let emb = p.embedding_rows(&ids).unwrap();
        assert_eq!(p.forward_embeddings(&emb).unwrap(), full);

        let mut injected = emb.clone();
        injected.row_mut(2).iter_mut().for_each(|v| *v = 0.0);
        let out = p.forward_embeddings(&injected).unwrap();
        assert_eq!(out.logits.row(1), full.logits.row(1));
        assert_ne!(out.logits.row(3), full.logits.row(3));
    }

    #[test]
    fn softmax_rows_normalized_and_deterministic() {
        let p = LmParams::<f32>::init(&tiny(), 2).unwrap();
        let a = p.forward_tokens(&[0, 1, 2, 3]).unwrap();
        let b = LmParams::<f32>::init(&tiny(), 2)
            .unwrap()
            .forward_tokens(&[0, 1, 2, 3])
            .unwrap();
        assert_eq!(a, b);
        for i in 0..a.logits.rows {
            let mut row = a.logits.row(i).to_vec();
            softmax_in_place(&mut row);
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = LmParams::<f32>::init(&tiny(), 2).unwrap();
        assert!(matches!(
            p.forward_tokens(&[0; 13]),
            Err(Error::ContextOverflow { required: 13, actual: 12 })
        ));
        assert!(matches!(
            p.forward_embeddings(&Matrix::zeros(2, 15)),
            Err(Error::WidthMismatch { expected: 16, actual: 15 })
        ));
        assert!(LmConfig { heads: 3, ..tiny() }.validate().is_err());
    }

    #[test]
    fn selected_logit_rows_match_full_forward() {
        let p = LmParams::<f32>::init(&tiny(), 3).unwrap();
        let x = p.embedding_rows(&[0, 5, 6, 7]).unwrap();
        let full = p.forward_embeddings(&x).unwrap();
        let pass = p.forward_train(&x, &[1, 3]).unwrap();
        assert_eq!(pass.logits.row(0), full.logits.row(1));
        assert_eq!(pass.logits.row(1), full.logits.row(3));
    }
}
