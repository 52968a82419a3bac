use conceptformer::conceptformer::{
    Block, CfShape, ConceptFormerParams, EmbeddedSubgraph,
};
use conceptformer::tensor::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct FixtureBlock {
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
    wo: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct Fixture {
    dim_i: usize,
    dim_o: usize,
    hidden: usize,
    slope: f64,
    center: Vec<f64>,
    neighbors: Vec<Vec<f64>>,
    edges: Vec<Vec<f64>>,
    blocks: Vec<FixtureBlock>,
    wp1: Vec<Vec<f64>>,
    wp2: Vec<Vec<f64>>,
    expected_output: Vec<Vec<f64>>,
    expected_attention: Vec<Vec<f64>>,
}

fn fixture() -> (ConceptFormerParams<f64>, EmbeddedSubgraph<f64>, Fixture) {
    let text = include_str!("fixtures/tiny_cf.json");
    let f: Fixture = serde_json::from_str(text).unwrap();
    let p = ConceptFormerParams {
        dim_i: f.dim_i,
        dim_o: f.dim_o,
        hidden: f.hidden,
        slope: f.slope,
        blocks: f
            .blocks
            .iter()
            .map(|b| Block {
                wq: Matrix::from_rows(&b.wq),
                wk: Matrix::from_rows(&b.wk),
                wv: Matrix::from_rows(&b.wv),
                wo: Matrix::from_rows(&b.wo),
            })
            .collect(),
        wp1: Matrix::from_rows(&f.wp1),
        wp2: Matrix::from_rows(&f.wp2),
    };
    let g = EmbeddedSubgraph {
        center: f.center.clone(),
        neighbors: Matrix::from_rows(&f.neighbors),
        edges: Matrix::from_rows(&f.edges),
    };
    (p, g, f)
}

#[test]
fn forward_matches_float64_reference() {
    let (p, g, f) = fixture();
    let out = p.forward(&g).unwrap();
    for (i, row) in f.expected_output.iter().enumerate() {
        for (j, &want) in row.iter().enumerate() {
            assert!((out.vectors.get(i, j) - want).abs() < 1e-12, "output[{i}][{j}]");
        }
    }
    for (i, row) in f.expected_attention.iter().enumerate() {
        for (j, &want) in row.iter().enumerate() {
            assert!((out.attention.get(i, j) - want).abs() < 1e-12, "attention[{i}][{j}]");
        }
    }
}

#[test]
fn forward_is_bitwise_repeatable() {
    let (p, g, _) = fixture();
    let a = p.forward(&g).unwrap();
    let b = p.forward(&g).unwrap();
    assert_eq!(a, b);
    let a32 = p.cast::<f32>().forward(&g_cast(&g)).unwrap();
    let b32 = p.cast::<f32>().forward(&g_cast(&g)).unwrap();
    assert_eq!(a32, b32);
}

fn g_cast(g: &EmbeddedSubgraph<f64>) -> EmbeddedSubgraph<f32> {
    EmbeddedSubgraph {
        center: g.center.iter().map(|&v| v as f32).collect(),
        neighbors: g.neighbors.cast(),
        edges: g.edges.cast(),
    }
}

fn objective(p: &ConceptFormerParams<f64>, g: &EmbeddedSubgraph<f64>, up: &Matrix<f64>) -> f64 {
    let out = p.forward(g).unwrap();
    out.vectors.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn random_case(seed: u64, m: usize) -> (ConceptFormerParams<f64>, EmbeddedSubgraph<f64>, Matrix<f64>) {
    let shape = CfShape { dim_i: 5, dim_o: 4, n: 3, hidden: 6, slope: 0.05 };
    let p = ConceptFormerParams::<f64>::init(&shape, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let g = EmbeddedSubgraph {
        center: Matrix::<f64>::uniform(1, 5, 1.5, &mut rng).data,
        neighbors: Matrix::uniform(m, 5, 1.5, &mut rng),
        edges: Matrix::uniform(m, 5, 1.5, &mut rng),
    };
    let up = Matrix::uniform(3, 4, 1.0, &mut rng);
    (p, g, up)
}

#[test]
fn gradients_match_central_differences() {
    let h = 1e-4;
    for (p, g, up) in [
        {
            let (p, g, _) = fixture();
            (p, g, Matrix::from_rows(&[vec![1.0, -0.7], vec![0.4, 1.3]]))
        },
        random_case(11, 4),
    ] {
        let grads = p.gradients(&g, &up).unwrap();
        let names = p.tensor_names();
        for ti in 0..names.len() {
            for idx in 0..p.tensors()[ti].len() {
                let mut pp = p.clone();
                pp.tensors_mut()[ti].data[idx] += h;
                let mut pm = p.clone();
                pm.tensors_mut()[ti].data[idx] -= h;
                let fd = (objective(&pp, &g, &up) - objective(&pm, &g, &up)) / (2.0 * h);
                let an = grads.params.tensors()[ti].data[idx];
                assert!(rel_err(an, fd) < 1e-5, "{}[{idx}]: {an} vs {fd}", names[ti]);
            }
        }
        let probe = |perturb: &dyn Fn(&mut EmbeddedSubgraph<f64>, f64)| {
            let mut gp = g.clone();
            perturb(&mut gp, h);
            let mut gm = g.clone();
            perturb(&mut gm, -h);
            (objective(&p, &gp, &up) - objective(&p, &gm, &up)) / (2.0 * h)
        };
        for k in 0..g.center.len() {
            let fd = probe(&|s, d| s.center[k] += d);
            assert!(rel_err(grads.center[k], fd) < 1e-5, "center[{k}]");
        }
        for k in 0..g.neighbors.len() {
            let fd = probe(&|s, d| s.neighbors.data[k] += d);
            assert!(rel_err(grads.neighbors.data[k], fd) < 1e-5, "neighbors[{k}]");
            let fd = probe(&|s, d| s.edges.data[k] += d);
            assert!(rel_err(grads.edges.data[k], fd) < 1e-5, "edges[{k}]");
        }
    }
}

#[test]
fn single_neighbor_with_identity_weights() {
    let i2 = Matrix::<f64>::identity(2);
    let p = ConceptFormerParams {
        dim_i: 2,
        dim_o: 2,
        hidden: 2,
        slope: 0.01,
        blocks: vec![Block { wq: i2.clone(), wk: i2.clone(), wv: i2.clone(), wo: i2.clone() }],
        wp1: i2.clone(),
        wp2: i2,
    };
    let g = EmbeddedSubgraph {
        center: vec![1.0, 0.0],
        neighbors: Matrix::from_rows(&[vec![0.0, 2.0]]),
        edges: Matrix::zeros(1, 2),
    };
    assert_eq!(p.forward(&g).unwrap().vectors.data, vec![0.0, 2.0]);
}

#[test]
fn edges_only_shape_the_keys() {
    // with a single neighbor the attention weight is 1 whatever the keys are
    let (p, mut g, _) = random_case(3, 1);
    let before = p.forward(&g).unwrap();
    g.edges.data.iter_mut().for_each(|v| *v += 3.0);
    assert_eq!(p.forward(&g).unwrap().vectors, before.vectors);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn neighbor_order_does_not_matter(seed in 0u64..1000, m in 2usize..7, rot in 1usize..6) {
        let (p, g, _) = random_case(seed, m);
        let perm: Vec<usize> = (0..m).map(|j| (j + rot) % m).collect();
        let mut h = g.clone();
        for (dst, &src) in perm.iter().enumerate() {
            h.neighbors.row_mut(dst).copy_from_slice(g.neighbors.row(src));
            h.edges.row_mut(dst).copy_from_slice(g.edges.row(src));
        }
        let a = p.forward(&g).unwrap();
        let b = p.forward(&h).unwrap();
        prop_assert!(a.vectors.max_abs_diff(&b.vectors) < 1e-12);
        for i in 0..p.n() {
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert!((a.attention.get(i, src) - b.attention.get(i, dst)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, m in 1usize..9) {
        let (p, g, _) = random_case(seed, m);
        let out = p.forward(&g).unwrap();
        prop_assert_eq!(out.vectors.shape(), (p.n(), p.dim_o));
        for i in 0..p.n() {
            let row = out.attention.row(i);
            prop_assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blocks_are_independent(seed in 0u64..1000, m in 1usize..6) {
        let (p, g, _) = random_case(seed, m);
        let full = p.forward(&g).unwrap();
        for b in 0..p.n() {
            let mut single = p.clone();
            single.blocks = vec![p.blocks[b].clone()];
            let out = single.forward(&g).unwrap();
            prop_assert_eq!(out.vectors.row(0), full.vectors.row(b));
        }
    }
}
