//! Training losses: token NLL, transport alignment between encoder and
//! decoder states, and entity entropy penalties.
//!
//! Each loss has a plain-tensor form (used as a reference and for reporting)
//! and a graph form that the trainer differentiates.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use tensorgrad::{Graph, NodeId, Real, Tensor};
use thiserror::Error;

use crate::corpus::TrainingExample;
use crate::model::{ForwardNodes, COUPLING_PARAM};
use crate::tokenizer::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("row {row} has no unmasked summary column")]
    EmptyRow { row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Mean negative log-likelihood of `targets` over kept positions; 0 when
/// nothing is kept.
pub fn mle_loss(logits: &Tensor<f64>, targets: &[TokenId], keep: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, &target) in targets.iter().enumerate() {
        if !keep[t] {
            continue;
        }
        let row = logits.row(t);
        total += log_sum_exp(row) - row[target as usize];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Euclidean distance between every source row and every summary row.
pub fn ot_cost(h_x: &Tensor<f64>, h_y: &Tensor<f64>) -> Result<Tensor<f64>, ObjectiveError> {
    let (l, m) = (h_x.outer_len(), h_y.outer_len());
    if h_x.last_dim() != h_y.last_dim() {
        return Err(ObjectiveError::Shape(format!(
            "widths {} and {} differ",
            h_x.last_dim(),
            h_y.last_dim()
        )));
    }
    let mut c = Vec::with_capacity(l * m);
    for i in 0..l {
        for j in 0..m {
            let sq: f64 = h_x
                .row(i)
                .iter()
                .zip(h_y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            c.push(sq.sqrt());
        }
    }
    Ok(Tensor::new(vec![l, m], c).expect("l*m entries"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `scores[i][j] = h_x_i · W · h_y_j`
    pub scores: Tensor<f64>,
    /// Row-softmax of `scores` over kept summary columns.
    pub plan: Tensor<f64>,
    pub keep: Vec<bool>,
}

pub fn ot_plan(
    h_x: &Tensor<f64>,
    h_y: &Tensor<f64>,
    w: &Tensor<f64>,
    summary_keep: &[bool],
) -> Result<TransportPlan, ObjectiveError> {
    let (l, m, d) = (h_x.outer_len(), h_y.outer_len(), h_x.last_dim());
    if h_y.last_dim() != d || w.shape() != [d, d] || summary_keep.len() != m {
        return Err(ObjectiveError::Shape(format!(
            "h_x {:?}, h_y {:?}, W {:?}, mask {}",
            h_x.shape(),
            h_y.shape(),
            w.shape(),
            summary_keep.len()
        )));
    }
    let mut scores = Vec::with_capacity(l * m);
    for i in 0..l {
        let xw: Vec<f64> = (0..d)
            .map(|b| (0..d).map(|a| h_x.at(i, a) * w.at(a, b)).sum())
            .collect();
        for j in 0..m {
            scores.push(xw.iter().zip(h_y.row(j)).map(|(a, b)| a * b).sum());
        }
    }
    let mut plan = vec![0.0; l * m];
    for i in 0..l {
        let row = &scores[i * m..(i + 1) * m];
        let max = (0..m)
            .filter(|&j| summary_keep[j])
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(ObjectiveError::EmptyRow { row: i });
        }
        let mut z = 0.0;
        for j in (0..m).filter(|&j| summary_keep[j]) {
            let e = (row[j] - max).exp();
            plan[i * m + j] = e;
            z += e;
        }
        for p in &mut plan[i * m..(i + 1) * m] {
            *p /= z;
        }
    }
    Ok(TransportPlan {
        scores: Tensor::new(vec![l, m], scores).expect("l*m"),
        plan: Tensor::new(vec![l, m], plan).expect("l*m"),
        keep: summary_keep.to_vec(),
    })
}

/// Returns `(K, K / (l·m))` where `K = Σ π·c` over kept columns.
pub fn ot_loss(plan: &TransportPlan, cost: &Tensor<f64>, l: usize, m: usize) -> (f64, f64) {
    let cols = plan.plan.last_dim();
    let k: f64 = plan
        .plan
        .data()
        .iter()
        .zip(cost.data())
        .enumerate()
        .filter(|(idx, _)| plan.keep[idx % cols])
        .map(|(_, (p, c))| p * c)
        .sum();
    (k, k / (l * m) as f64)
}

fn row_entropy(row: &[f64]) -> f64 {
    let lse = log_sum_exp(row);
    -row.iter()
        .map(|&x| {
            let lp = x - lse;
            lp.exp() * lp
        })
        .sum::<f64>()
}

/// Predictive entropy (nats) of each row of `logits`.
pub fn entropy_series(logits: &Tensor<f64>) -> Vec<f64> {
    (0..logits.outer_len()).map(|r| row_entropy(logits.row(r))).collect()
}

/// Accumulated negative information gain of an entity's entropy series,
/// computed as the literal nested sum of adjacent differences.
///
/// Zero for series shorter than 2.
pub fn anig_loss(h: &[f64]) -> f64 {
    let n = h.len();
    if n < 2 {
        return 0.0;
    }
    // h is 0-based here; the outer sum runs over entity positions 2..=n.
    let mut acc = 0.0;
    for i in 2..=n {
        for j in 2..=i {
            let gain: f64 = (2..=j).map(|k| h[k - 1] - h[k - 2]).sum();
            acc += gain;
        }
    }
    -acc / n as f64
}

/// Telescoped form of [`anig_loss`]: `−(1/n) Σ_{j≥2} (n−j+1)(H_j − H_1)`.
pub fn anig_closed_form(h: &[f64]) -> f64 {
    let n = h.len();
    if n < 2 {
        return 0.0;
    }
    let s: f64 = (2..=n).map(|j| (n - j + 1) as f64 * (h[j - 1] - h[0])).sum();
    -s / n as f64
}

/// Linear coefficients `c` with `anig_loss(h) = Σ c_i h_i`, read off the
/// literal sum one basis vector at a time.
pub fn anig_coefficients(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            anig_loss(&e)
        })
        .collect()
}

/// Mean entropy of the series; 0 when empty.
pub fn je_loss(h: &[f64]) -> f64 {
    if h.is_empty() {
        0.0
    } else {
        h.iter().sum::<f64>() / h.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Alphas {
    pub ot: f64,
    pub anig: f64,
    pub je: f64,
}

impl Default for Alphas {
    fn default() -> Self {
        Self {
            ot: 1.0,
            anig: 1.0,
            je: 1.0,
        }
    }
}

impl Alphas {
    pub const MLE_ONLY: Alphas = Alphas {
        ot: 0.0,
        anig: 0.0,
        je: 0.0,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub mle: f64,
    pub ot: f64,
    /// Unnormalized transport cost behind `ot`.
    pub transport_cost: f64,
    pub anig: f64,
    pub je: f64,
    pub alphas: Alphas,
    pub total: f64,
}

impl LossBundle {
    pub fn term(&self, name: &str) -> Option<f64> {
        match name {
            "mle" => Some(self.mle),
            "ot" => Some(self.ot),
            "anig" => Some(self.anig),
            "je" => Some(self.je),
            "total" => Some(self.total),
            _ => None,
        }
    }
}

pub fn total_loss(
    mle: f64,
    ot: f64,
    transport_cost: f64,
    anig: f64,
    je: f64,
    alphas: Alphas,
) -> LossBundle {
    LossBundle {
        mle,
        ot,
        transport_cost,
        anig,
        je,
        alphas,
        total: mle + alphas.ot * ot + alphas.anig * anig + alphas.je * je,
    }
}

/// Entropy rows of one entity span: side and row indices into that side's
/// entropy vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityRows {
    pub source: bool,
    pub rows: Vec<usize>,
}

/// Entity rows in the order the entropies are laid out by [`attach_losses`]:
/// source spans index the source-head rows, summary spans index decoder rows.
pub fn entity_rows(example: &TrainingExample) -> Vec<EntityRows> {
    let mut out = Vec::new();
    let mut offset = 0;
    for span in &example.source_entities {
        out.push(EntityRows {
            source: true,
            rows: (offset..offset + span.n()).collect(),
        });
        offset += span.n();
    }
    for span in &example.summary_entities {
        out.push(EntityRows {
            source: false,
            rows: span.positions().collect(),
        });
    }
    out
}

pub const TERMS: [&str; 5] = ["mle", "ot", "anig", "je", "total"];

/// Loss nodes added on top of a forward pass.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub mle: NodeId,
    pub transport_cost: NodeId,
    pub ot: NodeId,
    pub anig: NodeId,
    pub je: NodeId,
    pub total: NodeId,
    /// Entropy of every decoder row, `[m_padded]`.
    pub summary_entropy: NodeId,
    /// Entropy of every source-head row, `[k]`.
    pub source_entropy: Option<NodeId>,
    spans: Vec<(&'static str, Range<usize>)>,
}

impl LossNodes {
    pub fn node(&self, term: &str) -> Option<NodeId> {
        match term {
            "mle" => Some(self.mle),
            "ot" => Some(self.ot),
            "anig" => Some(self.anig),
            "je" => Some(self.je),
            "total" => Some(self.total),
            _ => None,
        }
    }

    /// Loss term whose subgraph contains node index `node`.
    pub fn term_of(&self, node: usize) -> Option<&'static str> {
        self.spans
            .iter()
            .find(|(_, r)| r.contains(&node))
            .map(|(t, _)| *t)
    }

    pub fn bundle<T: Real>(&self, g: &Graph<T>, alphas: Alphas) -> LossBundle {
        let v = |id: NodeId| {
            g.value(id)
                .and_then(|t| t.data().first().copied())
                .map(|x| x.as_f64())
                .unwrap_or(f64::NAN)
        };
        LossBundle {
            mle: v(self.mle),
            ot: v(self.ot),
            transport_cost: v(self.transport_cost),
            anig: v(self.anig),
            je: v(self.je),
            alphas,
            total: v(self.total),
        }
    }
}

fn scalar_zero<T: Real>(g: &mut Graph<T>) -> NodeId {
    g.constant(Tensor::scalar(T::zero()))
}

/// Adds the four losses and their weighted total to `g`.
///
/// Entity penalties average over all entity spans of the example (single
/// token spans count but contribute nothing to the gain term); an example
/// without entities contributes zero.
pub fn attach_losses<T: Real>(
    g: &mut Graph<T>,
    fwd: &ForwardNodes,
    example: &TrainingExample,
    d_model: usize,
    alphas: Alphas,
) -> LossNodes {
    let mut spans = Vec::new();

    let start = g.len();
    let targets: Vec<usize> = example.summary.ids().iter().map(|&t| t as usize).collect();
    let mut targets_padded = targets.clone();
    targets_padded.resize(fwd.summary_padded, 0);
    let lse = g.logsumexp(fwd.decoder_logits);
    let picked = g.gather(fwd.decoder_logits, targets_padded);
    let nll = g.sub(lse, picked);
    let mle = g.masked_mean(nll, fwd.summary_keep());
    spans.push(("mle", start..g.len()));

    let start = g.len();
    let (l, m) = (fwd.source_len, fwd.summary_len);
    let h_x = if fwd.source_padded == l {
        fwd.h_x
    } else {
        g.select_rows(fwd.h_x, (0..l).collect())
    };
    let w = g.parameter(COUPLING_PARAM, &[d_model, d_model]);
    let scores = g.bilinear(h_x, w, fwd.h_y);
    let col_keep = fwd.summary_keep();
    let keep: Vec<bool> = (0..l).flat_map(|_| col_keep.iter().copied()).collect();
    let plan = g.masked_softmax(scores, keep.clone());
    let cost = g.pairwise_l2(h_x, fwd.h_y);
    let weighted = g.mul(plan, cost);
    let transport_cost = g.masked_sum(weighted, keep);
    let ot = g.scale(transport_cost, 1.0 / (l * m) as f64);
    spans.push(("ot", start..g.len()));

    let start = g.len();
    let summary_entropy = g.entropy(fwd.decoder_logits);
    let source_entropy = fwd.source_logits.map(|s| g.entropy(s));
    spans.push(("entropy", start..g.len()));
    let entities = entity_rows(example);
    let k = fwd.source_positions.len();
    let per_side = |coef: &dyn Fn(usize) -> Vec<f64>| {
        let mut src = vec![0.0; k];
        let mut sum = vec![0.0; fwd.summary_padded];
        for e in &entities {
            let c = coef(e.rows.len());
            let target = if e.source { &mut src } else { &mut sum };
            for (&r, ci) in e.rows.iter().zip(c) {
                target[r] += ci / entities.len() as f64;
            }
        }
        (src, sum)
    };
    let weigh = |g: &mut Graph<T>, (src, sum): (Vec<f64>, Vec<f64>)| -> NodeId {
        if entities.is_empty() {
            return scalar_zero(g);
        }
        let mut terms = vec![(g.weighted_sum(summary_entropy, sum), 1.0)];
        if let Some(se) = source_entropy {
            terms.push((g.weighted_sum(se, src), 1.0));
        }
        g.lin_comb(terms)
    };

    let start = g.len();
    let anig = weigh(g, per_side(&anig_coefficients));
    spans.push(("anig", start..g.len()));
    let start = g.len();
    let je = weigh(g, per_side(&|n| vec![1.0 / n as f64; n]));
    spans.push(("je", start..g.len()));

    let start = g.len();
    let total = g.lin_comb(vec![
        (mle, 1.0),
        (ot, alphas.ot),
        (anig, alphas.anig),
        (je, alphas.je),
    ]);
    g.set_root(total);
    spans.push(("total", start..g.len()));

    LossNodes {
        mle,
        transport_cost,
        ot,
        anig,
        je,
        total,
        summary_entropy,
        source_entropy,
        spans,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn mle_fixtures() {
        let uniform = t(&[vec![0.0; 4]]);
        assert!((mle_loss(&uniform, &[2], &[true]) - 4f64.ln()).abs() < 1e-12);
        let probs = t(&[
            vec![0.5f64.ln(), 0.5f64.ln(), f64::MIN / 2.0],
            vec![0.25f64.ln(), 0.75f64.ln(), f64::MIN / 2.0],
        ]);
        let got = mle_loss(&probs, &[0, 0], &[true, true]);
        assert!((got - 1.039721).abs() < 1e-6, "{got}");
        assert_eq!(mle_loss(&probs, &[0, 0], &[false, false]), 0.0);
        let sharp = t(&[vec![60.0, 0.0, 0.0]]);
        assert!(mle_loss(&sharp, &[0], &[true]) < 1e-20);
    }

    #[test]
    fn cost_fixtures() {
        let a = t(&[vec![1.0, 0.0]]);
        let b = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = ot_cost(&a, &b).unwrap();
        assert_eq!(c.data()[0], 0.0);
        assert!((c.data()[1] - 2f64.sqrt()).abs() < 1e-12);
        assert!(ot_cost(&a, &t(&[vec![1.0]])).is_err());
    }

    #[test]
    fn plan_and_loss_worked_example() {
        let hx = t(&[vec![1.0, 0.0]]);
        let hy = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = Tensor::full(&[2, 2], 1.0);
        let plan = ot_plan(&hx, &hy, &w, &[true, true]).unwrap();
        assert_eq!(plan.plan.data(), &[0.5, 0.5]);
        let cost = ot_cost(&hx, &hy).unwrap();
        let (k, loss) = ot_loss(&plan, &cost, 1, 2);
        assert!((k - 0.5 * 2f64.sqrt()).abs() < 1e-12);
        assert!((loss - 0.353553).abs() < 1e-6);
    }

    #[test]
    fn masked_plan_columns_are_zero_and_empty_row_errors() {
        let hx = t(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let hy = t(&[vec![0.3, 0.1], vec![2.0, 1.0], vec![0.0, 0.0]]);
        let w = Tensor::full(&[2, 2], 1.0);
        let plan = ot_plan(&hx, &hy, &w, &[true, false, true]).unwrap();
        for i in 0..2 {
            assert_eq!(plan.plan.at(i, 1), 0.0);
            let s: f64 = plan.plan.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            ot_plan(&hx, &hy, &w, &[false; 3]),
            Err(ObjectiveError::EmptyRow { row: 0 })
        );
    }

    #[test]
    fn identical_states_cost_nothing() {
        let h = t(&[vec![0.4, -1.0], vec![0.4, -1.0]]);
        let w = Tensor::full(&[2, 2], 1.0);
        let plan = ot_plan(&h, &h, &w, &[true, true]).unwrap();
        let (_, loss) = ot_loss(&plan, &ot_cost(&h, &h).unwrap(), 2, 2);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn entropy_fixtures() {
        let h = entropy_series(&t(&[vec![0.0; 4], vec![0.0, 0.0, -1e4, -1e4], vec![80.0, 0.0, 0.0, 0.0]]));
        assert!((h[0] - 4f64.ln()).abs() < 1e-12);
        assert!((h[1] - 2f64.ln()).abs() < 1e-12);
        assert!(h[2] < 1e-30);
    }

    #[test]
    fn gain_and_joint_fixtures() {
        assert!(anig_loss(&[0.7, 0.7, 0.7]).abs() < 1e-15);
        assert!((anig_loss(&[2.0, 1.0, 0.5]) - 3.5 / 3.0).abs() < 1e-12);
        assert!((anig_loss(&[2.0, 1.0, 0.5]) - 1.166667).abs() < 1e-6);
        assert_eq!(anig_loss(&[1.3]), 0.0);
        assert_eq!(je_loss(&[0.0, 0.0]), 0.0);
        assert!((je_loss(&[2.0, 1.0, 0.5]) - 3.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn combined_weighting_front_loads_the_penalty() {
        for n in 2..=12 {
            let a = anig_coefficients(n);
            let combined: Vec<f64> = a.iter().map(|c| c + 1.0 / n as f64).collect();
            assert!(combined[0] > combined[n - 1], "n={n}: {combined:?}");
            let first = ((n * (n - 1) / 2) as f64 + 1.0) / n as f64;
            assert!((combined[0] - first).abs() < 1e-12);
            for (j, c) in combined.iter().enumerate().skip(1) {
                let expect = (j + 1) as f64 / n as f64 - 1.0;
                assert!((c - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = total_loss(1.0, 0.5, 0.0, -0.25, 0.75, Alphas::default());
        assert_eq!(b.total, 2.0);
        let b = total_loss(1.0, 0.5, 0.0, -0.25, 0.75, Alphas::MLE_ONLY);
        assert_eq!(b.total, 1.0);
    }
}
