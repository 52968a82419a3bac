//! Concept-vector generator.
//!
//! `n` independent single-head attention blocks read an embedded star
//! subgraph. For block `b`, with center row `c`, neighbor rows `N` and edge
//! rows `E`:
//!
//! ```text
//! q = c·Wq_b          K = N·Wk_b + E          V = N·Wv_b
//! a = softmax(q·Kᵀ / sqrt(dim_i))             o = (a·V)·Wo_b
//! concept_b = LeakyReLU(o·Wp1)·Wp2
//! ```
//!
//! Edges only shape the keys. `Wp1`/`Wp2` are shared by every block and no
//! layer carries a bias. All sums run in ascending index order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{put_f32, put_f32s, put_u32, sha256_hex, Reader};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Matrix, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFormerParams<T> {
    pub dim_i: usize,
    pub dim_o: usize,
    pub hidden: usize,
    pub slope: f64,
    pub blocks: Vec<Block<T>>,
    pub wp1: Matrix<T>,
    pub wp2: Matrix<T>,
}

/// Shape hyperparameters of a ConceptFormer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfShape {
    pub dim_i: usize,
    pub dim_o: usize,
    pub n: usize,
    pub hidden: usize,
    pub slope: f64,
}

impl Default for CfShape {
    /// Paper-scale shape (GPT-2 width); desk-scale runs override the widths.
    fn default() -> Self {
        Self {
            dim_i: 768,
            dim_o: 768,
            n: 15,
            hidden: 1228,
            slope: 0.01,
        }
    }
}

/// Block counts swept in the experiments.
pub const BLOCK_COUNTS: [usize; 8] = [1, 2, 3, 4, 5, 10, 15, 20];

fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    Matrix::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl<T: Scalar> ConceptFormerParams<T> {
    pub fn init(shape: &CfShape, seed: u64) -> Result<Self> {
        let CfShape {
            dim_i,
            dim_o,
            n,
            hidden,
            slope,
        } = *shape;
        if dim_i == 0 || dim_o == 0 || n == 0 || hidden == 0 {
            return Err(Error::Config(format!("degenerate ConceptFormer shape {shape:?}")));
        }
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!("LeakyReLU slope {slope} outside (0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..n)
            .map(|_| Block {
                wq: xavier(dim_i, dim_i, &mut rng),
                wk: xavier(dim_i, dim_i, &mut rng),
                wv: xavier(dim_i, dim_i, &mut rng),
                wo: xavier(dim_i, dim_i, &mut rng),
            })
            .collect();
        Ok(Self {
            dim_i,
            dim_o,
            hidden,
            slope,
            blocks,
            wp1: xavier(dim_i, hidden, &mut rng),
            wp2: xavier(hidden, dim_o, &mut rng),
        })
    }

    /// Zero parameters with the shape of `self`; used for gradients.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows, m.cols);
        Self {
            dim_i: self.dim_i,
            dim_o: self.dim_o,
            hidden: self.hidden,
            slope: self.slope,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    wq: z(&b.wq),
                    wk: z(&b.wk),
                    wv: z(&b.wv),
                    wo: z(&b.wo),
                })
                .collect(),
            wp1: z(&self.wp1),
            wp2: z(&self.wp2),
        }
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn shape(&self) -> CfShape {
        CfShape {
            dim_i: self.dim_i,
            dim_o: self.dim_o,
            n: self.n(),
            hidden: self.hidden,
            slope: self.slope,
        }
    }

    /// Tensors in file order: each block's Wq, Wk, Wv, Wo, then Wp1, Wp2.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = Vec::with_capacity(4 * self.n() + 2);
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo]);
        }
        out.extend([&self.wp1, &self.wp2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo]);
        }
        out.extend([&mut self.wp1, &mut self.wp2]);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in 0..self.n() {
            out.extend(["wq", "wk", "wv", "wo"].map(|w| format!("block{b}.{w}")));
        }
        out.extend(["wp1".to_string(), "wp2".to_string()]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ConceptFormerParams<U> {
        ConceptFormerParams {
            dim_i: self.dim_i,
            dim_o: self.dim_o,
            hidden: self.hidden,
            slope: self.slope,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                })
                .collect(),
            wp1: self.wp1.cast(),
            wp2: self.wp2.cast(),
        }
    }
}

/// Center, neighbor and edge embeddings of one star subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSubgraph<T> {
    pub center: Vec<T>,
    pub neighbors: Matrix<T>,
    pub edges: Matrix<T>,
}

impl<T: Scalar> EmbeddedSubgraph<T> {
    pub fn m(&self) -> usize {
        self.neighbors.rows
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.center.len();
        if self.neighbors.rows != self.edges.rows {
            return Err(Error::Invalid(format!(
                "{} neighbor rows but {} edge rows",
                self.neighbors.rows, self.edges.rows
            )));
        }
        for w in [self.neighbors.cols, self.edges.cols] {
            if w != d {
                return Err(Error::WidthMismatch { expected: d, actual: w });
            }
        }
        if !self.center.iter().all(|v| v.is_finite())
            || !self.neighbors.is_finite()
            || !self.edges.is_finite()
        {
            return Err(Error::Invalid("subgraph embeddings are not finite".into()));
        }
        Ok(())
    }
}

/// Concept vectors plus per-block attention weights (`n × m`).
#[derive(Debug, Clone, PartialEq)]
pub struct CfOutput<T> {
    pub vectors: Matrix<T>,
    pub attention: Matrix<T>,
}

/// Concept vectors tagged with where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVectors {
    pub matrix: Matrix<f32>,
    pub center_qid: String,
    pub params_fingerprint: String,
}

struct BlockCache<T> {
    q: Vec<T>,
    keys: Matrix<T>,
    values: Matrix<T>,
    attn: Vec<T>,
    context: Vec<T>,
    out: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

/// Gradients of a scalar objective with respect to every weight and input.
#[derive(Debug, Clone, PartialEq)]
pub struct CfGradients<T> {
    pub params: ConceptFormerParams<T>,
    pub center: Vec<T>,
    pub neighbors: Matrix<T>,
    pub edges: Matrix<T>,
}

/// `x (1×k) · w (k×n)`
fn vecmat<T: Scalar>(x: &[T], w: &Matrix<T>) -> Vec<T> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = vec![T::zero(); w.cols];
    for (p, &xp) in x.iter().enumerate() {
        axpy(xp, w.row(p), &mut out);
    }
    out
}

/// `g (1×n) · wᵀ` for `w (k×n)`.
fn vecmat_t<T: Scalar>(g: &[T], w: &Matrix<T>) -> Vec<T> {
    (0..w.rows).map(|p| dot(g, w.row(p))).collect()
}

/// `acc (k×n) += xᵀ g`
fn outer_acc<T: Scalar>(x: &[T], g: &[T], acc: &mut Matrix<T>) {
    for (p, &xp) in x.iter().enumerate() {
        axpy(xp, g, acc.row_mut(p));
    }
}

impl<T: Scalar> ConceptFormerParams<T> {
    fn check(&self, g: &EmbeddedSubgraph<T>) -> Result<()> {
        g.validate()?;
        if g.dim() != self.dim_i {
            return Err(Error::WidthMismatch {
                expected: self.dim_i,
                actual: g.dim(),
            });
        }
        if g.m() == 0 {
            return Err(Error::EmptyNeighborhood("subgraph".into()));
        }
        Ok(())
    }

    fn block_forward(&self, b: &Block<T>, g: &EmbeddedSubgraph<T>) -> BlockCache<T> {
        let m = g.m();
        let scale = T::one() / T::of(self.dim_i as f64).sqrt();
        let q = vecmat(&g.center, &b.wq);
        let mut keys = Matrix::zeros(m, self.dim_i);
        let mut values = Matrix::zeros(m, self.dim_i);
        for j in 0..m {
            let nj = g.neighbors.row(j);
            let mut k = vecmat(nj, &b.wk);
            axpy(T::one(), g.edges.row(j), &mut k);
            keys.row_mut(j).copy_from_slice(&k);
            values.row_mut(j).copy_from_slice(&vecmat(nj, &b.wv));
        }
        let mut attn: Vec<T> = (0..m).map(|j| dot(&q, keys.row(j)) * scale).collect();
        crate::tensor::softmax_in_place(&mut attn);
        let mut context = vec![T::zero(); self.dim_i];
        for j in 0..m {
            axpy(attn[j], values.row(j), &mut context);
        }
        let out = vecmat(&context, &b.wo);
        let pre = vecmat(&out, &self.wp1);
        let slope = T::of(self.slope);
        let act = pre
            .iter()
            .map(|&h| if h > T::zero() { h } else { slope * h })
            .collect();
        BlockCache {
            q,
            keys,
            values,
            attn,
            context,
            out,
            pre,
            act,
        }
    }

    pub fn forward(&self, g: &EmbeddedSubgraph<T>) -> Result<CfOutput<T>> {
        self.check(g)?;
        let mut vectors = Matrix::zeros(self.n(), self.dim_o);
        let mut attention = Matrix::zeros(self.n(), g.m());
        for (bi, b) in self.blocks.iter().enumerate() {
            let c = self.block_forward(b, g);
            vectors.row_mut(bi).copy_from_slice(&vecmat(&c.act, &self.wp2));
            attention.row_mut(bi).copy_from_slice(&c.attn);
        }
        Ok(CfOutput { vectors, attention })
    }

    /// Reverse-mode gradients of `sum(upstream ⊙ forward(g).vectors)`.
    pub fn gradients(&self, g: &EmbeddedSubgraph<T>, upstream: &Matrix<T>) -> Result<CfGradients<T>> {
        self.check(g)?;
        if upstream.shape() != (self.n(), self.dim_o) {
            return Err(Error::Invalid(format!(
                "upstream gradient is {:?}, expected ({}, {})",
                upstream.shape(),
                self.n(),
                self.dim_o
            )));
        }
        let m = g.m();
        let scale = T::one() / T::of(self.dim_i as f64).sqrt();
        let slope = T::of(self.slope);
        let mut grads = CfGradients {
            params: self.zeros_like(),
            center: vec![T::zero(); self.dim_i],
            neighbors: Matrix::zeros(m, self.dim_i),
            edges: Matrix::zeros(m, self.dim_i),
        };
        for (bi, b) in self.blocks.iter().enumerate() {
            let dy = upstream.row(bi);
            if dy.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let c = self.block_forward(b, g);
            outer_acc(&c.act, dy, &mut grads.params.wp2);
            let d_act = vecmat_t(dy, &self.wp2);
            let d_pre: Vec<T> = d_act
                .iter()
                .zip(&c.pre)
                .map(|(&d, &h)| if h > T::zero() { d } else { d * slope })
                .collect();
            outer_acc(&c.out, &d_pre, &mut grads.params.wp1);
            let d_out = vecmat_t(&d_pre, &self.wp1);
            let gb = &mut grads.params.blocks[bi];
            outer_acc(&c.context, &d_out, &mut gb.wo);
            let d_ctx = vecmat_t(&d_out, &b.wo);

            let d_attn: Vec<T> = (0..m).map(|j| dot(&d_ctx, c.values.row(j))).collect();
            let weighted: T = (0..m).fold(T::zero(), |acc, j| acc + c.attn[j] * d_attn[j]);
            let mut dq = vec![T::zero(); self.dim_i];
            for j in 0..m {
                let ds = c.attn[j] * (d_attn[j] - weighted) * scale;
                axpy(ds, c.keys.row(j), &mut dq);
                // keys: K_j = N_j Wk + E_j
                let mut dk = vec![T::zero(); self.dim_i];
                axpy(ds, &c.q, &mut dk);
                let nj = g.neighbors.row(j);
                outer_acc(nj, &dk, &mut gb.wk);
                let dn_k = vecmat_t(&dk, &b.wk);
                axpy(T::one(), &dn_k, grads.neighbors.row_mut(j));
                axpy(T::one(), &dk, grads.edges.row_mut(j));
                // values: V_j = N_j Wv, weighted by a_j
                let mut dv = vec![T::zero(); self.dim_i];
                axpy(c.attn[j], &d_ctx, &mut dv);
                outer_acc(nj, &dv, &mut gb.wv);
                let dn_v = vecmat_t(&dv, &b.wv);
                axpy(T::one(), &dn_v, grads.neighbors.row_mut(j));
            }
            outer_acc(&g.center, &dq, &mut gb.wq);
            let dc = vecmat_t(&dq, &b.wq);
            axpy(T::one(), &dc, &mut grads.center);
        }
        Ok(grads)
    }
}

/// Attention of every block over the neighbors, labelled by neighbor qid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionReport {
    pub neighbor_qids: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

pub fn attention_report<T: Scalar>(
    params: &ConceptFormerParams<T>,
    g: &EmbeddedSubgraph<T>,
    neighbor_qids: &[String],
) -> Result<AttentionReport> {
    if neighbor_qids.len() != g.m() {
        return Err(Error::Invalid(format!(
            "{} qids for {} neighbors",
            neighbor_qids.len(),
            g.m()
        )));
    }
    let out = params.forward(g)?;
    Ok(AttentionReport {
        neighbor_qids: neighbor_qids.to_vec(),
        weights: (0..out.attention.rows)
            .map(|i| out.attention.row(i).iter().map(|v| v.as_f64()).collect())
            .collect(),
    })
}

const MAGIC: &[u8; 4] = b"CFP1";

/// `CFP1` layout (little-endian): magic, dim_i u32, dim_o u32, n u32,
/// hidden u32, slope f32, then every tensor of [`ConceptFormerParams::tensors`]
/// as raw float32.
pub fn to_bytes<T: Scalar>(p: &ConceptFormerParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * p.parameter_count());
    out.extend_from_slice(MAGIC);
    for v in [p.dim_i, p.dim_o, p.n(), p.hidden] {
        put_u32(&mut out, v as u32);
    }
    put_f32(&mut out, p.slope as f32);
    for t in p.tensors() {
        put_f32s(&mut out, t.data.iter().map(|v| v.as_f32()));
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ConceptFormerParams<f32>> {
    let mut r = Reader::new(bytes, "CFP1 params");
    r.expect_magic(MAGIC)?;
    let dim_i = r.u32()? as usize;
    let dim_o = r.u32()? as usize;
    let n = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let slope = r.f32()? as f64;
    let shape = CfShape {
        dim_i,
        dim_o,
        n,
        hidden,
        slope,
    };
    let expected = 4 * n * dim_i * dim_i + dim_i * hidden + hidden * dim_o;
    if r.remaining() != 4 * expected {
        return Err(Error::Format(format!(
            "CFP1 body holds {} bytes, shape {shape:?} needs {}",
            r.remaining(),
            4 * expected
        )));
    }
    let mut p = ConceptFormerParams::<f32>::init(&shape, 0)?;
    for t in p.tensors_mut() {
        let data = r.f32s(t.len())?;
        t.data = data;
    }
    r.finish()?;
    Ok(p)
}

pub fn fingerprint<T: Scalar>(p: &ConceptFormerParams<T>) -> String {
    sha256_hex(&to_bytes(p))
}

pub fn save(p: &ConceptFormerParams<f32>, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = to_bytes(p);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ConceptFormerParams<f32>, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((from_bytes(&bytes)?, sha256_hex(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_case() -> (ConceptFormerParams<f64>, EmbeddedSubgraph<f64>) {
        let i2 = Matrix::<f64>::identity(2);
        let p = ConceptFormerParams {
            dim_i: 2,
            dim_o: 2,
            hidden: 2,
            slope: 0.01,
            blocks: vec![Block {
                wq: i2.clone(),
                wk: i2.clone(),
                wv: i2.clone(),
                wo: i2.clone(),
            }],
            wp1: i2.clone(),
            wp2: i2,
        };
        let g = EmbeddedSubgraph {
            center: vec![1.0, 0.0],
            neighbors: Matrix::from_rows(&[vec![0.0, 2.0]]),
            edges: Matrix::from_rows(&[vec![0.0, 0.0]]),
        };
        (p, g)
    }

    #[test]
    fn identity_weights_pass_values_through() {
        let (p, g) = identity_case();
        let out = p.forward(&g).unwrap();
        assert_eq!(out.vectors.data, vec![0.0, 2.0]);
        assert_eq!(out.attention.data, vec![1.0]);
    }

    #[test]
    fn zero_output_weights_give_zero_vectors() {
        let mut p = ConceptFormerParams::<f64>::init(
            &CfShape { dim_i: 4, dim_o: 3, n: 3, hidden: 5, slope: 0.01 },
            1,
        )
        .unwrap();
        p.wp2.fill_zero();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = EmbeddedSubgraph {
            center: Matrix::<f64>::uniform(1, 4, 1.0, &mut rng).data,
            neighbors: Matrix::uniform(6, 4, 1.0, &mut rng),
            edges: Matrix::uniform(6, 4, 1.0, &mut rng),
        };
        let out = p.forward(&g).unwrap();
        assert!(out.vectors.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_neighborhood_and_width_errors() {
        let (p, mut g) = identity_case();
        g.neighbors = Matrix::zeros(0, 2);
        g.edges = Matrix::zeros(0, 2);
        assert!(matches!(p.forward(&g), Err(Error::EmptyNeighborhood(_))));
        let (p, mut g) = identity_case();
        g.center = vec![1.0, 0.0, 0.0];
        assert!(p.forward(&g).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let shape = CfShape { dim_i: 8, dim_o: 6, n: 2, hidden: 10, slope: 0.01 };
        let a = ConceptFormerParams::<f32>::init(&shape, 42).unwrap();
        assert_eq!(a, ConceptFormerParams::<f32>::init(&shape, 42).unwrap());
        assert_ne!(a, ConceptFormerParams::<f32>::init(&shape, 43).unwrap());
        let bound = (6.0f64 / 16.0).sqrt() as f32;
        assert!(a.blocks[0].wq.data.iter().all(|v| v.abs() <= bound));
        let bad = CfShape { slope: 1.5, ..shape };
        assert!(ConceptFormerParams::<f32>::init(&bad, 0).is_err());
    }

    #[test]
    fn paper_scale_parameter_count() {
        let shape = CfShape { dim_i: 768, dim_o: 768, n: 1, hidden: 1228, slope: 0.01 };
        let p = ConceptFormerParams::<f32>::init(&shape, 0).unwrap();
        let enumerated: usize = p.tensors().iter().map(|t| t.rows * t.cols).sum();
        assert_eq!(enumerated, 4 * 768 * 768 + 768 * 1228 + 1228 * 768);
        assert_eq!(enumerated, 4_245_504);
        assert_eq!(CfShape::default().hidden, 1228);
        assert_eq!(CfShape::default().dim_i, 768);
        assert_eq!(BLOCK_COUNTS, [1, 2, 3, 4, 5, 10, 15, 20]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = ConceptFormerParams::<f64>::init(
            &CfShape { dim_i: 3, dim_o: 2, n: 2, hidden: 4, slope: 0.1 },
            5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = EmbeddedSubgraph {
            center: Matrix::<f64>::uniform(1, 3, 1.0, &mut rng).data,
            neighbors: Matrix::uniform(4, 3, 1.0, &mut rng),
            edges: Matrix::uniform(4, 3, 1.0, &mut rng),
        };
        let grads = p.gradients(&g, &Matrix::zeros(2, 2)).unwrap();
        assert!(grads.params.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        assert!(grads.center.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_gradients_are_independent() {
        let p = ConceptFormerParams::<f64>::init(
            &CfShape { dim_i: 3, dim_o: 2, n: 2, hidden: 4, slope: 0.1 },
            5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = EmbeddedSubgraph {
            center: Matrix::<f64>::uniform(1, 3, 1.0, &mut rng).data,
            neighbors: Matrix::uniform(4, 3, 1.0, &mut rng),
            edges: Matrix::uniform(4, 3, 1.0, &mut rng),
        };
        let up = Matrix::from_rows(&[vec![1.0, -0.5], vec![0.0, 0.0]]);
        let grads = p.gradients(&g, &up).unwrap();
        assert!(grads.params.blocks[1].wq.data.iter().all(|&v| v == 0.0));
        assert!(grads.params.blocks[0].wq.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn file_round_trip() {
        let shape = CfShape { dim_i: 4, dim_o: 6, n: 3, hidden: 5, slope: 0.01 };
        let p = ConceptFormerParams::<f32>::init(&shape, 8).unwrap();
        let bytes = to_bytes(&p);
        assert_eq!(&bytes[..4], b"CFP1");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors(), p.tensors());
        assert_eq!(fingerprint(&back), fingerprint(&p));
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
