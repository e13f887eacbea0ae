//! Layer-level building blocks composed from tape primitives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for cosine affinities.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
    Identity,
    SoftmaxRows,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    Ok(match act {
        Activation::Elu => tape.elu(x),
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
        Activation::SoftmaxRows => tape.softmax(x, 1.0)?,
    })
}

/// `x·W (+ b)` for `x` of rank 2 or 3 (the weight is shared over the leading axes).
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let out = match shape[..] {
        [_, _] => tape.matmul(x, w)?,
        [g, n, d] => {
            let flat = tape.reshape(x, &[g * n, d])?;
            let y = tape.matmul(flat, w)?;
            let dout = tape.shape(y)[1];
            tape.reshape(y, &[g, n, dout])?
        }
        _ => return Err(Error::dim("linear", &shape, tape.shape(w))),
    };
    match b {
        Some(b) => tape.add_row(out, b),
        None => Ok(out),
    }
}

/// Node normalisation over every node of `x` (rank 2 or 3, flattened over the
/// leading axes) with learned per-channel scale and shift.
pub fn node_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    match shape[..] {
        [_, _] => tape.node_norm(x, gamma, beta),
        [g, n, d] => {
            let flat = tape.reshape(x, &[g * n, d])?;
            let y = tape.node_norm(flat, gamma, beta)?;
            tape.reshape(y, &shape)
        }
        _ => Err(Error::dim("node_norm", &shape, &[0, 0])),
    }
}

/// Optional per-layer node normalisation parameters.
pub type NormVars = Option<(Var, Var)>;

/// One graph convolution `σ(norm(D^{-1/2}(A+I)D^{-1/2} X W))`.
///
/// `x` is `[n×d]` with `adj` `[n×n]`, or batched `[B×n×d]` with `[B×n×n]`.
/// With `sym_norm` off the propagation matrix is the unnormalised `A + I`.
pub fn graph_conv(
    tape: &mut Tape,
    x: Var,
    adj: Var,
    w: Var,
    act: Activation,
    sym_norm: bool,
    norm: NormVars,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let as_ = tape.shape(adj).to_vec();
    let n = xs[xs.len() - 2];
    let ok = match (&xs[..], &as_[..]) {
        ([_, _], [a, b]) => *a == n && *b == n,
        ([g, _, _], [ga, a, b]) => g == ga && *a == n && *b == n,
        _ => false,
    };
    if !ok {
        return Err(Error::dim("graph_conv", &xs, &as_));
    }
    if let Some(bad) = tape.value(adj).data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain {
            op: "graph_conv",
            msg: format!("adjacency entries must be >= 0, found {bad}"),
        });
    }
    let prop = if sym_norm {
        tape.gcn_normalize(adj)?
    } else {
        let eye = identity_like(&as_);
        let eye = tape.input(eye);
        tape.add(adj, eye)?
    };
    let xw = linear(tape, x, w, None)?;
    let mixed = if xs.len() == 2 {
        tape.matmul(prop, xw)?
    } else {
        tape.bmm(prop, xw)?
    };
    let normed = match norm {
        Some((g, b)) => node_norm(tape, mixed, g, b)?,
        None => mixed,
    };
    activate(tape, normed, act)
}

fn identity_like(shape: &[usize]) -> Tensor {
    let n = shape[shape.len() - 1];
    let batches = shape.iter().product::<usize>() / (n * n);
    let mut data = vec![0.0; batches * n * n];
    for b in 0..batches {
        for i in 0..n {
            data[b * n * n + i * n + i] = 1.0;
        }
    }
    Tensor::new(shape, data).expect("square shape")
}

/// Pairwise cosine between rows of `x·Wa` and rows of `x·Wb`.
///
/// `[n×d] → [n×n]` or batched `[B×n×d] → [B×n×n]`. Projected rows with norm
/// below [`COSINE_EPS`] divide by the floor instead.
pub fn cosine_affinity(tape: &mut Tape, x: Var, wa: Var, wb: Var) -> Result<Var> {
    let pa = linear(tape, x, wa, None)?;
    let pb = linear(tape, x, wb, None)?;
    let na = tape.row_l2_normalize(pa, COSINE_EPS);
    let nb = tape.row_l2_normalize(pb, COSINE_EPS);
    let nbt = tape.transpose(nb)?;
    if tape.shape(x).len() == 2 {
        tape.matmul(na, nbt)
    } else {
        tape.bmm(na, nbt)
    }
}

/// Fixed sinusoidal encoding of frame positions, `[t × d]`.
pub fn sinusoidal_pe(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[t, d], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_closed_form_and_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![0.0, 3f64.ln()], vec![2.0, 2.0]]));
        let y = tape.softmax(x, 1.0).unwrap();
        let v = tape.value(y);
        assert!((v.at2(0, 0) - 0.25).abs() < 1e-15);
        assert!((v.at2(0, 1) - 0.75).abs() < 1e-15);
        assert_eq!(v.at2(1, 0), 0.5);
        assert!(tape.softmax(x, 0.0).is_err());
    }

    #[test]
    fn softmax_large_scale_saturates_and_keeps_argmax() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![1.0, 2.0]]));
        for s in [0.01, 1.0, 10.0, 1000.0] {
            let y = tape.softmax(x, s).unwrap();
            let v = tape.value(y).clone();
            assert!(v.at2(0, 1) > v.at2(0, 0));
            assert!(v.is_finite());
            if s == 1000.0 {
                assert!(v.at2(0, 1) > 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn graph_conv_zero_adjacency_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = rand_tensor(&mut rng, &[4, 3]);
        let wt = rand_tensor(&mut rng, &[3, 2]);
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let w = tape.input(wt.clone());
        let adj = tape.input(Tensor::zeros(&[4, 4]));
        let y = graph_conv(&mut tape, x, adj, w, Activation::Identity, true, None).unwrap();
        assert!(tape.value(y).max_abs_diff(&xt.matmul(&wt).unwrap()) < 1e-15);
    }

    #[test]
    fn graph_conv_two_node_hand_expansion() {
        // A = [[0,1],[1,0]] → Â = all ones, D = 2I, D^{-1/2}ÂD^{-1/2} = ½·ones.
        let mut tape = Tape::new();
        let xt = Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, -4.0]]);
        let x = tape.input(xt);
        let w = tape.input(Tensor::eye(2));
        let adj = tape.input(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let y = graph_conv(&mut tape, x, adj, w, Activation::Identity, true, None).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            assert!((v.at2(r, 0) - 3.0).abs() < 1e-15);
            assert!((v.at2(r, 1) + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_conv_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = rand_tensor(&mut rng, &[3, 2]);
        let at = rand_tensor(&mut rng, &[3, 3]).map(f64::abs);
        let wt = rand_tensor(&mut rng, &[2, 2]);
        let perm = [2usize, 0, 1];
        let px = Tensor::from_rows(&perm.iter().map(|&i| xt.row(i).to_vec()).collect::<Vec<_>>());
        let pa = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| perm.iter().map(|&j| at.at2(i, j)).collect())
                .collect::<Vec<_>>(),
        );
        let mut tape = Tape::new();
        let (x, a, w) = (tape.input(xt), tape.input(at), tape.input(wt.clone()));
        let y = graph_conv(&mut tape, x, a, w, Activation::Elu, true, None).unwrap();
        let (x2, a2, w2) = (tape.input(px), tape.input(pa), tape.input(wt));
        let y2 = graph_conv(&mut tape, x2, a2, w2, Activation::Elu, true, None).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((tape.value(y2).at2(k, c) - tape.value(y).at2(i, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn graph_conv_rejects_negative_adjacency() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        let w = tape.input(Tensor::eye(2));
        let adj = tape.input(Tensor::from_rows(&[vec![0.0, -0.1], vec![0.0, 0.0]]));
        let err = graph_conv(&mut tape, x, adj, w, Activation::Identity, true, None).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "graph_conv", .. }));
    }

    #[test]
    fn cosine_affinity_cases() {
        let mut tape = Tape::new();
        let eye = tape.input(Tensor::eye(3));
        let same = tape.input(Tensor::from_rows(&vec![vec![0.6, 0.8, 0.0]; 4]));
        let y = cosine_affinity(&mut tape, same, eye, eye).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let ortho = tape.input(Tensor::eye(3));
        let y = cosine_affinity(&mut tape, ortho, eye, eye).unwrap();
        assert!(tape.value(y).max_abs_diff(&Tensor::eye(3)) < 1e-15);
    }

    #[test]
    fn cosine_affinity_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = rand_tensor(&mut rng, &[4, 3]);
        let at = rand_tensor(&mut rng, &[3, 3]);
        let bt = rand_tensor(&mut rng, &[3, 3]);
        let mut tape = Tape::new();
        let (x, a, b) = (tape.input(xt.clone()), tape.input(at.clone()), tape.input(bt.clone()));
        let y = cosine_affinity(&mut tape, x, a, b).unwrap();
        let pa = xt.matmul(&at).unwrap();
        let pb = xt.matmul(&bt).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = pa.row(i).iter().zip(pb.row(j)).map(|(p, q)| p * q).sum();
                let na: f64 = pa.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = pb.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((tape.value(y).at2(i, j) - dot / (na * nb)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cosine_zero_row_uses_floor() {
        let mut tape = Tape::new();
        let eye = tape.input(Tensor::eye(2));
        let x = tape.input(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]));
        let y = cosine_affinity(&mut tape, x, eye, eye).unwrap();
        assert!(tape.value(y).is_finite());
        assert_eq!(tape.value(y).at2(0, 1), 0.0);
    }

    #[test]
    fn activations_by_definition() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[3], vec![0.0, -1e6, -5.0]).unwrap());
        let e = tape.elu(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(e).data()[0], 0.0);
        assert!((tape.value(e).data()[1] + 1.0).abs() < 1e-15);
        assert_eq!(tape.value(r).data()[2], 0.0);
    }

    #[test]
    fn mean_rows_identical_rows() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&vec![vec![1.5, -2.0]; 5]));
        let m = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5, -2.0]);
    }

    #[test]
    fn concat_rejects_inconsistent_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[3, 3]));
        assert!(tape.concat(&[a, b], 0).is_ok());
        assert!(matches!(tape.concat(&[a, b], 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn node_norm_standardises_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let g = store.add_const("g", &[1, 3], 1.0);
        let b = store.add_const("b", &[1, 3], 0.0);
        let xt = rand_tensor(&mut rng, &[7, 3]).map(|v| 3.0 * v + 1.0);
        let stats = |t: &Tensor, k: usize| {
            let col: Vec<f64> = (0..7).map(|i| t.at2(i, k)).collect();
            let mean = col.iter().sum::<f64>() / 7.0;
            (mean, col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 7.0)
        };
        let in_var: Vec<f64> = (0..3).map(|k| stats(&xt, k).1).collect();
        let mut tape = Tape::new();
        let x = tape.input(xt);
        let (gv, bv) = (tape.param(&store, g), tape.param(&store, b));
        let y = tape.node_norm(x, gv, bv).unwrap();
        let v = tape.value(y);
        for k in 0..3 {
            let (mean, var) = stats(v, k);
            assert!(mean.abs() < 1e-12);
            let expected = in_var[k] / (in_var[k] + crate::autodiff::NODE_NORM_EPS);
            assert!((var - expected).abs() < 1e-12, "{var} vs {expected}");
        }
    }

    #[test]
    fn pe_first_row() {
        let pe = sinusoidal_pe(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }
}
