//! NT-BCE contrastive loss over two projected views, and cross-entropy.
//!
//! Each function comes in two forms: a plain one over `f64` values and one
//! that records the computation on a [`Graph`] for backpropagation.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{bce_logit, log_sum_exp, Graph, Tensor, Var};

/// Default temperature.
pub const TAU: f64 = 0.5;

/// Which `(i, j)` pairs of the two views are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Every pair in `[N] × [N]`, target 1 when the labels agree.
    #[default]
    Full,
    /// Only the matched positions `(i, i)`.
    Matched,
}

pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok(u.dot(&v) / (nu * nv))
}

/// Two projected views with their labels.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub z_a: Array2<f64>,
    pub z_b: Array2<f64>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub tau: f64,
}

impl ContrastiveBatch {
    fn validate(&self) -> Result<()> {
        let n = self.z_a.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty contrastive batch".into()));
        }
        if self.z_b.dim() != self.z_a.dim() || self.labels_a.len() != n || self.labels_b.len() != n {
            return Err(Error::Shape(format!(
                "z_a {:?}, z_b {:?}, {} / {} labels",
                self.z_a.dim(),
                self.z_b.dim(),
                self.labels_a.len(),
                self.labels_b.len()
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {}", self.tau)));
        }
        Ok(())
    }
}

/// Label-equality targets for the scored pairs, row-major.
pub fn pair_targets(labels_a: &[usize], labels_b: &[usize], pairing: Pairing) -> Vec<f64> {
    let eq = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    match pairing {
        Pairing::Full => labels_a
            .iter()
            .flat_map(|&a| labels_b.iter().map(move |&b| eq(a, b)))
            .collect(),
        Pairing::Matched => labels_a.iter().zip(labels_b).map(|(&a, &b)| eq(a, b)).collect(),
    }
}

/// Mean binary cross-entropy of `cos(z_a[i], z_b[j]) / τ` against
/// label-equality targets.
pub fn contrastive_loss(batch: &ContrastiveBatch, pairing: Pairing) -> Result<f64> {
    batch.validate()?;
    let n = batch.z_a.nrows();
    let targets = pair_targets(&batch.labels_a, &batch.labels_b, pairing);
    let mut total = 0.0;
    let mut k = 0;
    for i in 0..n {
        let cols: Box<dyn Iterator<Item = usize>> = match pairing {
            Pairing::Full => Box::new(0..n),
            Pairing::Matched => Box::new(std::iter::once(i)),
        };
        for j in cols {
            let x = cosine_similarity(batch.z_a.row(i), batch.z_b.row(j))? / batch.tau;
            total += bce_logit(x, targets[k]);
            k += 1;
        }
    }
    Ok(total / k as f64)
}

/// `−ln softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} with {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Graph form of [`contrastive_loss`] for `[N, D]` projections.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    z_a: Var,
    z_b: Var,
    labels_a: &[usize],
    labels_b: &[usize],
    tau: f64,
    pairing: Pairing,
) -> Result<Var> {
    let s = g.shape(z_a).to_vec();
    if s.len() != 2 || g.shape(z_b) != s.as_slice() || labels_a.len() != s[0] || labels_b.len() != s[0] {
        return Err(Error::Shape(format!(
            "contrastive: z_a {s:?}, z_b {:?}, {} / {} labels",
            g.shape(z_b),
            labels_a.len(),
            labels_b.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau}")));
    }
    let (n, d) = (s[0], s[1]);
    let na = g.l2_normalize_rows(z_a)?;
    let nb = g.l2_normalize_rows(z_b)?;
    let cos = match pairing {
        Pairing::Full => {
            let a3 = g.reshape(na, &[1, n, d])?;
            let b3 = g.reshape(nb, &[1, n, d])?;
            g.bmm(a3, b3, true)?
        }
        Pairing::Matched => {
            let prod = g.mul(na, nb)?;
            let ones = g.constant(Tensor::full(&[d, 1], 1.0))?;
            g.linear(prod, ones, None)?
        }
    };
    let logits = g.scale(cos, 1.0 / tau)?;
    g.bce_with_logits(logits, pair_targets(labels_a, labels_b, pairing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{grad_check, Mode, ParameterSet};
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(u: Array1<f64>, v: Array1<f64>, la: usize, lb: usize) -> f64 {
        let batch = ContrastiveBatch {
            z_a: u.insert_axis(ndarray::Axis(0)),
            z_b: v.insert_axis(ndarray::Axis(0)),
            labels_a: vec![la],
            labels_b: vec![lb],
            tau: TAU,
        };
        contrastive_loss(&batch, Pairing::Full).unwrap()
    }

    /// −ln σ(x) = ln(1 + e^{−x}), evaluated naively.
    fn neg_log_sigmoid(x: f64) -> f64 {
        (1.0 + (-x).exp()).ln()
    }

    #[test]
    fn cosine_values() {
        assert_eq!(cosine_similarity(array![1.0, 0.0].view(), array![1.0, 0.0].view()).unwrap(), 1.0);
        assert_eq!(cosine_similarity(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        let c = cosine_similarity(array![1.0, 1.0].view(), array![1.0, 0.0].view()).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((c - 0.7071068).abs() < 1e-7);
        assert!(cosine_similarity(array![0.0, 0.0].view(), array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn single_pair_values() {
        let same = single(array![1.0, 0.0], array![1.0, 0.0], 0, 0);
        assert!((same - neg_log_sigmoid(2.0)).abs() < 1e-15);
        assert!((same - 0.1269280).abs() < 1e-6);

        let orth = single(array![1.0, 0.0], array![0.0, 1.0], 0, 0);
        assert!((orth - 2f64.ln()).abs() < 1e-15);
        assert!((orth - 0.6931472).abs() < 1e-6);

        let diff = single(array![1.0, 0.0], array![1.0, 0.0], 0, 1);
        assert!((diff - (2.0 + neg_log_sigmoid(2.0))).abs() < 1e-15);
        assert!((diff - 2.1269280).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.3, 0.3, 0.3], 1).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[40.0, 0.0, 0.0], 0).unwrap() < 1e-15);
        let a = cross_entropy(&[0.1, -2.0, 1.5], 2).unwrap();
        let b = cross_entropy(&[100.1, 98.0, 101.5], 2).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> ContrastiveBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContrastiveBatch {
            z_a: Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
            z_b: Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
            labels_a: (0..n).map(|_| rng.random_range(0..3)).collect(),
            labels_b: (0..n).map(|_| rng.random_range(0..3)).collect(),
            tau: TAU,
        }
    }

    proptest! {
        #[test]
        fn symmetric_under_view_swap(seed in 0u64..1000, n in 1usize..8) {
            let b = random_batch(n, 5, seed);
            let swapped = ContrastiveBatch {
                z_a: b.z_b.clone(),
                z_b: b.z_a.clone(),
                labels_a: b.labels_b.clone(),
                labels_b: b.labels_a.clone(),
                tau: b.tau,
            };
            for p in [Pairing::Full, Pairing::Matched] {
                let x = contrastive_loss(&b, p).unwrap();
                let y = contrastive_loss(&swapped, p).unwrap();
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn row_scale_invariant(seed in 0u64..1000, row in 0usize..4, c in 0.01f64..100.0) {
            let b = random_batch(4, 6, seed);
            let mut scaled = b.clone();
            scaled.z_a.row_mut(row).mapv_inplace(|v| v * c);
            let x = contrastive_loss(&b, Pairing::Full).unwrap();
            let y = contrastive_loss(&scaled, Pairing::Full).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_falls_as_positive_pair_aligns() {
        // Sweep the angle between a same-label pair from π to 0 while a
        // second, different-label pair stays fixed.
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let theta = std::f64::consts::PI * (20 - k) as f64 / 20.0;
            let b = ContrastiveBatch {
                z_a: array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
                z_b: array![[theta.cos(), theta.sin(), 0.0], [0.0, 0.0, -1.0]],
                labels_a: vec![0, 1],
                labels_b: vec![0, 2],
                tau: TAU,
            };
            let l = contrastive_loss(&b, Pairing::Full).unwrap();
            assert!(l < prev, "k={k}: {l} >= {prev}");
            prev = l;
        }
    }

    #[test]
    fn graph_form_matches_plain_form() {
        let b = random_batch(5, 7, 3);
        for p in [Pairing::Full, Pairing::Matched] {
            let mut g = Graph::new(Mode::Eval, 0);
            let za = g.input(Tensor::from_array2(b.z_a.view())).unwrap();
            let zb = g.input(Tensor::from_array2(b.z_b.view())).unwrap();
            let l = contrastive_loss_graph(&mut g, za, zb, &b.labels_a, &b.labels_b, TAU, p).unwrap();
            let plain = contrastive_loss(&b, p).unwrap();
            assert!((g.value(l).item() - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = random_batch(6, 5, 8);
        let mut params = ParameterSet::new();
        params.insert("za", Tensor::from_array2(b.z_a.view())).unwrap();
        params.insert("zb", Tensor::from_array2(b.z_b.view())).unwrap();
        for p in [Pairing::Full, Pairing::Matched] {
            let report = grad_check(&params, 1e-5, Mode::Eval, |g, ps| {
                let za = g.param(ps, "za")?;
                let zb = g.param(ps, "zb")?;
                contrastive_loss_graph(g, za, zb, &b.labels_a, &b.labels_b, TAU, p)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{p:?}: {report:?}");
        }
    }

    #[test]
    fn errors() {
        let mut b = random_batch(2, 3, 1);
        b.z_a.row_mut(0).fill(0.0);
        assert!(contrastive_loss(&b, Pairing::Full).is_err());
        let mut b = random_batch(2, 3, 1);
        b.tau = 0.0;
        assert!(contrastive_loss(&b, Pairing::Full).is_err());
    }
}
