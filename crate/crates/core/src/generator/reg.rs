//! Embedding regularizers: mean within-task cosine and mean absolute cross-task cosine,
//! both over flattened embedding tensors.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn rows<T: Float>(g: &mut Graph<T>, bank: Var) -> Result<Vec<Var>> {
    (0..g.shape(bank)[0]).map(|i| g.index_select(bank, &[i])).collect()
}

/// `2/Σ C_k(C_k−1) · Σ_k Σ_{m<n} cos(e_m, e_n)` on the tape. Banks with one class
/// contribute no pairs; no pairs at all is an error.
pub fn intra_er_graph<T: Float>(g: &mut Graph<T>, banks: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for &b in banks {
        let r = rows(g, b)?;
        for m in 0..r.len() {
            for n in m + 1..r.len() {
                terms.push(g.cosine_similarity(r[m], r[n])?);
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("intra-task regularizer needs a task with at least two classes"));
    }
    let n = terms.len();
    let s = g.add_all(&terms)?;
    Ok(g.scale(s, T::from_f64_lossy(1.0 / n as f64)))
}

/// `1/Σ_{k<l} C_k C_l · Σ_{k<l} Σ_{m,n} |cos(e^k_m, e^l_n)|` on the tape; needs two banks.
pub fn inter_er_graph<T: Float>(g: &mut Graph<T>, banks: &[Var]) -> Result<Var> {
    if banks.len() < 2 {
        return Err(Error::invalid("inter-task regularizer needs at least two tasks"));
    }
    let all: Vec<Vec<Var>> = banks.iter().map(|&b| rows(g, b)).collect::<Result<_>>()?;
    let mut terms = Vec::new();
    for k in 0..all.len() {
        for l in k + 1..all.len() {
            for &a in &all[k] {
                for &b in &all[l] {
                    let c = g.cosine_similarity(a, b)?;
                    terms.push(g.abs(c));
                }
            }
        }
    }
    let n = terms.len();
    let s = g.add_all(&terms)?;
    Ok(g.scale(s, T::from_f64_lossy(1.0 / n as f64)))
}

fn eval(banks: &[&Tensor<f32>], f: fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = banks.iter().map(|b| g.constant(b.cast())).collect();
    let r = f(&mut g, &vars)?;
    Ok(g.value(r).item())
}

/// Intra-task embedding regularizer of `banks` (each `[C_k, …]`), evaluated in `f64`.
pub fn intra_er(banks: &[&Tensor<f32>]) -> Result<f64> {
    eval(banks, intra_er_graph)
}

/// Inter-task embedding regularizer of `banks`, evaluated in `f64`.
pub fn inter_er(banks: &[&Tensor<f32>]) -> Result<f64> {
    eval(banks, inter_er_graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn brute_intra(banks: &[Tensor<f32>]) -> f64 {
        let (mut s, mut pairs) = (0.0, 0.0);
        for b in banks {
            let c = b.shape()[0];
            for m in 0..c {
                for n in m + 1..c {
                    s += cos(b.row(m), b.row(n));
                }
            }
            pairs += (c * (c - 1)) as f64;
        }
        2.0 / pairs * s
    }

    fn brute_inter(banks: &[Tensor<f32>]) -> f64 {
        let (mut s, mut pairs) = (0.0, 0.0);
        for k in 0..banks.len() {
            for l in k + 1..banks.len() {
                for m in 0..banks[k].shape()[0] {
                    for n in 0..banks[l].shape()[0] {
                        s += cos(banks[k].row(m), banks[l].row(n)).abs();
                    }
                }
                pairs += (banks[k].shape()[0] * banks[l].shape()[0]) as f64;
            }
        }
        s / pairs
    }

    fn t(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::new([rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let same = t(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert!((intra_er(&[&same]).unwrap() - 1.0).abs() < 1e-12);
        let orth = t(&[&[1.0, 0.0], &[0.0, 3.0]]);
        assert!(intra_er(&[&orth]).unwrap().abs() < 1e-12);
        // pairwise cosines 0.5 and −0.25 → (2/4)·0.25
        let a = t(&[&[1.0, 0.0], &[0.5, 0.75f32.sqrt()]]);
        let b = t(&[&[1.0, 0.0], &[-0.25, 0.9375f32.sqrt()]]);
        assert!((intra_er(&[&a, &b]).unwrap() - 0.125).abs() < 1e-6);

        let e = t(&[&[0.3, -1.0]]);
        assert!((inter_er(&[&e, &e]).unwrap() - 1.0).abs() < 1e-12);
        let x = t(&[&[1.0, 0.0]]);
        let y = t(&[&[-0.3, 0.91f32.sqrt()]]);
        assert!((inter_er(&[&x, &y]).unwrap() - 0.3).abs() < 1e-6);
        assert!(inter_er(&[&x, &t(&[&[0.0, 2.0]])]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_error() {
        let one = t(&[&[1.0, 0.0]]);
        assert!(intra_er(&[&one, &one]).is_err());
        assert!(inter_er(&[&t(&[&[1.0, 0.0], &[0.0, 1.0]])]).is_err());
    }

    fn banks_strategy() -> impl Strategy<Value = Vec<Tensor<f32>>> {
        (1usize..=4, 1usize..=6).prop_flat_map(|(k, d)| {
            prop::collection::vec(
                (1usize..=5).prop_flat_map(move |c| prop::collection::vec(-1.0f32..1.0, c * d).prop_map(move |v| Tensor::new([c, d], v).unwrap())),
                k,
            )
        })
    }

    proptest! {
        #[test]
        fn match_brute_force(banks in banks_strategy()) {
            let refs: Vec<&Tensor<f32>> = banks.iter().collect();
            if banks.iter().any(|b| b.shape()[0] >= 2) {
                let v = intra_er(&refs).unwrap();
                prop_assert!((v - brute_intra(&banks)).abs() < 1e-6);
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
            }
            if banks.len() >= 2 {
                let v = inter_er(&refs).unwrap();
                prop_assert!((v - brute_inter(&banks)).abs() < 1e-6);
                prop_assert!((0.0..=1.0 + 1e-9).contains(&v));
            }
        }

        #[test]
        fn invariant_to_class_permutation(banks in banks_strategy(), rot in 0usize..5) {
            let permuted: Vec<Tensor<f32>> = banks
                .iter()
                .map(|b| {
                    let c = b.shape()[0];
                    let idx: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
                    b.select_rows(&idx).unwrap()
                })
                .collect();
            let (a, p): (Vec<_>, Vec<_>) = (banks.iter().collect(), permuted.iter().collect());
            if let (Ok(x), Ok(y)) = (intra_er(&a), intra_er(&p)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            if let (Ok(x), Ok(y)) = (inter_er(&a), inter_er(&p)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
