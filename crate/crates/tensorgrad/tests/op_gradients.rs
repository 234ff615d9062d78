//! Every op kind's backward against central differences on random small shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::{grad_check, Bindings, Graph, NodeId, Tensor};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

struct Case {
    rng: ChaCha8Rng,
    graph: Graph<f64>,
    bindings: Bindings<f64>,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            graph: Graph::new(),
            bindings: Bindings::new(),
        }
    }

    fn dim(&mut self) -> usize {
        self.rng.random_range(1..=8)
    }

    fn param(&mut self, shape: &[usize]) -> NodeId {
        let name = format!("p{}", self.bindings.len());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-1.5..1.5)).collect();
        self.bindings
            .insert(name.clone(), Tensor::new(shape.to_vec(), data).unwrap());
        self.graph.parameter(name, shape)
    }

    fn mask(&mut self, n: usize) -> Vec<bool> {
        (0..n).map(|_| self.rng.random_bool(0.7)).collect()
    }

    /// Projects `out` onto random weights so every output entry matters.
    fn check(mut self, out: NodeId, out_len: usize, label: &str, seed: u64) {
        let weights = (0..out_len).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        let root = self.graph.weighted_sum(out, weights);
        self.graph.set_root(root);
        let report = grad_check(&mut self.graph, &self.bindings, STEP, TOL).unwrap();
        assert!(
            report.pass,
            "{label} seed {seed}: max rel err {:.3e} ({:?})",
            report.max_rel_err(),
            report.params
        );
    }
}

fn for_seeds(label: &str, build: impl Fn(&mut Case) -> (NodeId, usize)) {
    for seed in 0..SEEDS {
        let mut case = Case::new(seed);
        let (out, len) = build(&mut case);
        case.check(out, len, label, seed);
    }
}

#[test]
fn matmul() {
    for_seeds("matmul", |c| {
        let (n, k, m) = (c.dim(), c.dim(), c.dim());
        let a = c.param(&[n, k]);
        let b = c.param(&[k, m]);
        (c.graph.matmul(a, b), n * m)
    });
}

#[test]
fn transpose() {
    for_seeds("transpose", |c| {
        let (n, m) = (c.dim(), c.dim());
        let a = c.param(&[n, m]);
        (c.graph.transpose(a), n * m)
    });
}

#[test]
fn add_sub_mul_with_broadcasting() {
    for_seeds("binary", |c| {
        let (n, m) = (c.dim(), c.dim());
        let a = c.param(&[n, m]);
        let same = c.param(&[n, m]);
        let row = c.param(&[m]);
        let scalar = c.param(&[]);
        let x = c.graph.add(a, row);
        let x = c.graph.mul(x, same);
        let x = c.graph.sub(x, scalar);
        let x = c.graph.mul(x, row);
        let x = c.graph.add(x, scalar);
        (c.graph.scale(x, -0.7), n * m)
    });
}

#[test]
fn gelu() {
    for_seeds("gelu", |c| {
        let (n, m) = (c.dim(), c.dim());
        let a = c.param(&[n, m]);
        (c.graph.gelu(a), n * m)
    });
}

#[test]
fn softmax_plain_and_masked() {
    for_seeds("softmax", |c| {
        let (n, m) = (c.dim(), c.dim());
        let a = c.param(&[n, m]);
        let keep = c.mask(n * m);
        let p = c.graph.softmax(a);
        let q = c.graph.masked_softmax(a, keep);
        (c.graph.lin_comb(vec![(p, 1.0), (q, 0.5)]), n * m)
    });
}

#[test]
fn logsumexp_and_entropy() {
    for_seeds("lse/entropy", |c| {
        let (n, m) = (c.dim(), c.dim());
        let a = c.param(&[n, m]);
        let l = c.graph.logsumexp(a);
        let h = c.graph.entropy(a);
        (c.graph.lin_comb(vec![(l, 1.0), (h, 2.0)]), n)
    });
}

#[test]
fn layer_norm() {
    for_seeds("layer_norm", |c| {
        let (n, d) = (c.dim(), c.dim() + 1);
        let x = c.param(&[n, d]);
        let gain = c.param(&[d]);
        let bias = c.param(&[d]);
        (c.graph.layer_norm(x, gain, bias), n * d)
    });
}

#[test]
fn embedding_lookup() {
    for_seeds("embedding", |c| {
        let (v, d, n) = (c.dim(), c.dim(), c.dim());
        let table = c.param(&[v, d]);
        let ids = (0..n).map(|_| c.rng.random_range(0..v)).collect();
        (c.graph.embedding(table, ids), n * d)
    });
}

#[test]
fn pairwise_l2() {
    for_seeds("pairwise_l2", |c| {
        let (l, m, d) = (c.dim(), c.dim(), c.dim());
        let a = c.param(&[l, d]);
        let b = c.param(&[m, d]);
        (c.graph.pairwise_l2(a, b), l * m)
    });
}

#[test]
fn bilinear() {
    for_seeds("bilinear", |c| {
        let (l, m, d, e) = (c.dim(), c.dim(), c.dim(), c.dim());
        let a = c.param(&[l, d]);
        let w = c.param(&[d, e]);
        let b = c.param(&[m, e]);
        (c.graph.bilinear(a, w, b), l * m)
    });
}

#[test]
fn gather_select_slice_concat() {
    for_seeds("indexing", |c| {
        let (n, m) = (c.dim(), c.dim() + 1);
        let a = c.param(&[n, m]);
        let b = c.param(&[n, 3]);
        let index = (0..n).map(|_| c.rng.random_range(0..m)).collect();
        let g = c.graph.gather(a, index);
        let k = c.dim();
        let rows = (0..k).map(|_| c.rng.random_range(0..n)).collect();
        let s = c.graph.select_rows(a, rows);
        let start = c.rng.random_range(0..m);
        let sl = c.graph.slice_cols(a, start, m);
        let cat = c.graph.concat_cols(vec![sl, b, a]);
        let out_g = c.graph.sum(g);
        let out_s = c.graph.mean(s);
        let out_c = c.graph.sum(cat);
        let w = (0..n * (m - start + 3 + m)).map(|i| (i as f64).sin()).collect();
        let out_cw = c.graph.weighted_sum(cat, w);
        (
            c.graph
                .lin_comb(vec![(out_g, 1.0), (out_s, 0.3), (out_c, -0.2), (out_cw, 1.1)]),
            1,
        )
    });
}

#[test]
fn reductions() {
    for_seeds("reductions", |c| {
        let n = c.dim();
        let a = c.param(&[n, 2]);
        let keep = c.mask(2 * n);
        let ms = c.graph.masked_sum(a, keep.clone());
        let mm = c.graph.masked_mean(a, keep);
        let s = c.graph.sum(a);
        let m = c.graph.mean(a);
        (
            c.graph
                .lin_comb(vec![(ms, 1.0), (mm, 2.0), (s, -0.5), (m, 0.25)]),
            1,
        )
    });
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut c = Case::new(7);
    let a = c.param(&[5, 6]);
    let b = c.param(&[6, 4]);
    let x = c.graph.matmul(a, b);
    let h = c.graph.entropy(x);
    c.graph.sum(h);
    let first = c.graph.forward_eval(&c.bindings).unwrap();
    let second = c.graph.forward_eval(&c.bindings).unwrap();
    assert_eq!(first.data()[0].to_bits(), second.data()[0].to_bits());
}

#[test]
fn softmax_rows_are_stochastic_and_entropy_bounded() {
    for seed in 0..SEEDS {
        let mut c = Case::new(seed);
        let (n, v) = (c.dim(), c.dim() + 1);
        let data: Vec<f64> = (0..n * v).map(|_| c.rng.random_range(-30.0..30.0)).collect();
        let x = c.graph.input("x", &[n, v]);
        let p = c.graph.softmax(x);
        let h = c.graph.entropy(x);
        c.graph.set_root(h);
        let bindings: Bindings<f64> = [("x".to_string(), Tensor::new(vec![n, v], data).unwrap())]
            .into_iter()
            .collect();
        c.graph.forward_eval(&bindings).unwrap();
        let p = c.graph.value(p).unwrap();
        for r in 0..n {
            let total: f64 = p.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        for &e in c.graph.value(h).unwrap().data() {
            assert!((0.0..=(v as f64).ln() + 1e-12).contains(&e));
        }
    }
}
