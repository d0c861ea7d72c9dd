//! Dense f64 kernels for every bound operator, shared by the serial
//! reference and the simulated devices.

use ndarray::{Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{ConvAttrs, ConvMode, DataflowGraph, ElemFn, OpAttrs, OpNode};

pub type Tensor = ArrayD<f64>;

/// Scalar functions bound to the opaque `pointwise_fn` tag; `df` is the
/// derivative evaluated at the pre-activation.
#[derive(Debug, Clone, Copy)]
pub struct FunctionBinding {
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

impl FunctionBinding {
    pub fn tanh() -> Self {
        Self {
            f: f64::tanh,
            df: |x| 1.0 - x.tanh().powi(2),
        }
    }

    pub fn identity() -> Self {
        Self {
            f: |x| x,
            df: |_| 1.0,
        }
    }
}

impl Default for FunctionBinding {
    fn default() -> Self {
        Self::tanh()
    }
}

/// Uniform values in `[-1, 1]` for every graph input, drawn in tensor order
/// from one seeded stream.
pub fn seeded_inputs(g: &DataflowGraph, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.graph_inputs()
        .into_iter()
        .map(|t| {
            let n = t.shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let arr = Tensor::from_shape_vec(IxDyn(&t.shape), data).expect("shape matches");
            (t.id.clone(), arr)
        })
        .collect()
}

fn bad(op: &OpNode, detail: impl Into<String>) -> Error {
    Error::Execution(format!("op `{}`: {}", op.id, detail.into()))
}

fn matrix<'a>(op: &OpNode, t: &'a Tensor) -> Result<ndarray::ArrayView2<'a, f64>> {
    t.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| bad(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

/// Moves batch and channel to the front: `(batch, channel, s0, s1)`.
fn nchw(op: &OpNode, t: &Tensor, c: &ConvAttrs) -> Result<Array4<f64>> {
    if t.ndim() != 4 {
        return Err(bad(op, format!("expected rank 4, got {:?}", t.shape())));
    }
    let spatial: Vec<usize> = (0..4).filter(|&d| d != c.batch_dim && d != c.channel_dim).collect();
    let perm = [c.batch_dim, c.channel_dim, spatial[0], spatial[1]];
    Ok(t.view()
        .permuted_axes(IxDyn(&perm))
        .into_dimensionality::<Ix4>()
        .expect("rank 4")
        .to_owned())
}

fn from_nchw(t: Array4<f64>, c: &ConvAttrs) -> Tensor {
    let spatial: Vec<usize> = (0..4).filter(|&d| d != c.batch_dim && d != c.channel_dim).collect();
    let perm = [c.batch_dim, c.channel_dim, spatial[0], spatial[1]];
    let mut inverse = [0usize; 4];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    t.into_dyn().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned()
}

fn weight4(op: &OpNode, t: &Tensor) -> Result<Array4<f64>> {
    t.clone()
        .into_dimensionality::<Ix4>()
        .map_err(|_| bad(op, format!("expected rank-4 filter, got {:?}", t.shape())))
}

fn conv(op: &OpNode, c: &ConvAttrs, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match c.mode {
        ConvMode::Forward => {
            let (x, w) = (nchw(op, a, c)?, weight4(op, b)?);
            let (nb, ci, h, wd) = x.dim();
            let (co, wci, fh, fw) = w.dim();
            if wci != ci || fh > h || fw > wd {
                return Err(bad(op, format!("input {:?} vs filter {:?}", x.dim(), w.dim())));
            }
            let (ho, wo) = (h - fh + 1, wd - fw + 1);
            let mut y = Array4::<f64>::zeros((nb, co, ho, wo));
            for ((n, o, i, j), v) in y.indexed_iter_mut() {
                let mut s = 0.0;
                for ch in 0..ci {
                    for p in 0..fh {
                        for q in 0..fw {
                            s += x[[n, ch, i + p, j + q]] * w[[o, ch, p, q]];
                        }
                    }
                }
                *v = s;
            }
            Ok(from_nchw(y, c))
        }
        ConvMode::BackwardData => {
            let (dy, w) = (nchw(op, a, c)?, weight4(op, b)?);
            let (nb, co, ho, wo) = dy.dim();
            let (wco, ci, fh, fw) = w.dim();
            if wco != co {
                return Err(bad(op, format!("gradient {:?} vs filter {:?}", dy.dim(), w.dim())));
            }
            let mut dx = Array4::<f64>::zeros((nb, ci, ho + fh - 1, wo + fw - 1));
            for ((n, o, i, j), &g) in dy.indexed_iter() {
                for ch in 0..ci {
                    for p in 0..fh {
                        for q in 0..fw {
                            dx[[n, ch, i + p, j + q]] += g * w[[o, ch, p, q]];
                        }
                    }
                }
            }
            Ok(from_nchw(dx, c))
        }
        ConvMode::BackwardFilter => {
            let (dy, x) = (nchw(op, a, c)?, nchw(op, b, c)?);
            let (nb, co, ho, wo) = dy.dim();
            let (xb, ci, h, wd) = x.dim();
            if xb != nb || h < ho || wd < wo {
                return Err(bad(op, format!("gradient {:?} vs input {:?}", dy.dim(), x.dim())));
            }
            let (fh, fw) = (h - ho + 1, wd - wo + 1);
            let mut dw = Array4::<f64>::zeros((co, ci, fh, fw));
            for ((o, ch, p, q), v) in dw.indexed_iter_mut() {
                let mut s = 0.0;
                for n in 0..nb {
                    for i in 0..ho {
                        for j in 0..wo {
                            s += dy[[n, o, i, j]] * x[[n, ch, i + p, j + q]];
                        }
                    }
                }
                *v = s;
            }
            Ok(dw.into_dyn())
        }
    }
}

/// Runs one operator on dense operands.
pub fn apply_op(op: &OpNode, inputs: &[&Tensor], fns: &FunctionBinding) -> Result<Tensor> {
    if inputs.len() != op.inputs.len() {
        return Err(bad(op, format!("expected {} operands", op.inputs.len())));
    }
    let same = |a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(bad(op, format!("operands {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    };
    match op.attrs {
        OpAttrs::Matmul(m) => {
            let (mut a, mut b) = (matrix(op, inputs[0])?, matrix(op, inputs[1])?);
            if m.transpose_a {
                a = a.reversed_axes();
            }
            if m.transpose_b {
                b = b.reversed_axes();
            }
            if a.ncols() != b.nrows() {
                return Err(bad(op, format!("inner extents {} vs {}", a.ncols(), b.nrows())));
            }
            Ok(a.dot(&b).into_dyn())
        }
        OpAttrs::Elementwise(e) => {
            let a = inputs[0];
            match e.func {
                ElemFn::Add => {
                    same(a, inputs[1])?;
                    Ok(a + inputs[1])
                }
                ElemFn::Sub => {
                    same(a, inputs[1])?;
                    Ok(a - inputs[1])
                }
                ElemFn::Scale => Ok(a * e.scalar.unwrap_or(1.0)),
                ElemFn::PointwiseFn => Ok(a.mapv(fns.f)),
                ElemFn::PointwiseFnGrad => {
                    same(a, inputs[1])?;
                    Ok(a * &inputs[1].mapv(fns.df))
                }
            }
        }
        OpAttrs::Conv(c) => conv(op, &c, inputs[0], inputs[1]),
        OpAttrs::Generic(_) => Err(Error::UnboundFunction(op.id.clone())),
    }
}

/// Largest absolute difference and that difference relative to the
/// reference's largest magnitude.
pub fn compare(got: &Tensor, want: &Tensor) -> (f64, f64) {
    let abs = got
        .iter()
        .zip(want.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (abs, if scale > 0.0 { abs / scale } else { abs })
}

/// Sub-block `lo..hi` per axis of `t`.
pub fn sub_block(t: &Tensor, offsets: &[(usize, usize)]) -> Tensor {
    let mut v = t.view();
    for (ax, &(lo, hi)) in offsets.iter().enumerate() {
        v.slice_axis_inplace(Axis(ax), (lo..hi).into());
    }
    v.to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_cnn, gen_mlp, CnnConfig, MlpConfig};
    use ndarray::arr2;

    #[test]
    fn matmul_transposes() {
        let g = gen_mlp(&MlpConfig::new(2, vec![2, 2]).backward()).unwrap();
        let wgrad = g.ops().iter().find(|o| o.id == "wgrad1").unwrap();
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn();
        let d = arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        let out = apply_op(wgrad, &[&x, &d], &FunctionBinding::tanh()).unwrap();
        assert_eq!(out, arr2(&[[1.0, 3.0], [2.0, 4.0]]).into_dyn());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let g = gen_cnn(&CnnConfig::new(2, (4, 4), vec![2, 3], (2, 2)).backward()).unwrap();
        let op = |id: &str| g.ops().iter().find(|o| o.id == id).unwrap().clone();
        let inputs = seeded_inputs(&g, 3);
        let x = &inputs["x0"];
        let w = &inputs["W1"];
        let fns = FunctionBinding::identity();
        let y = apply_op(&op("conv1"), &[x, w], &fns).unwrap();
        // Loss sum(y * r): gradients are conv_backward(r).
        let r = Tensor::from_shape_fn(y.raw_dim(), |i| (i[0] + 2 * i[1] + i[2] * i[3]) as f64 * 0.1);
        let dw = apply_op(&op("wgrad1"), &[&r, x], &fns).unwrap();
        let dx = apply_op(&op("dgrad1"), &[&r, w], &fns).unwrap();
        let loss = |x: &Tensor, w: &Tensor| {
            (apply_op(&op("conv1"), &[x, w], &fns).unwrap() * &r).sum()
        };
        let eps = 1e-6;
        for (idx, &gv) in dw.indexed_iter() {
            let mut wp = w.clone();
            wp[&idx] += eps;
            let fd = (loss(x, &wp) - loss(x, w)) / eps;
            assert!((fd - gv).abs() < 1e-6, "dw{idx:?}: {fd} vs {gv}");
        }
        for (idx, &gv) in dx.indexed_iter() {
            let mut xp = x.clone();
            xp[&idx] += eps;
            let fd = (loss(&xp, w) - loss(x, w)) / eps;
            assert!((fd - gv).abs() < 1e-6, "dx{idx:?}: {fd} vs {gv}");
        }
    }

    #[test]
    fn seeded_inputs_are_deterministic_and_bounded() {
        let g = gen_mlp(&MlpConfig::new(4, vec![3, 2]).backward()).unwrap();
        let a = seeded_inputs(&g, 11);
        assert_eq!(a, seeded_inputs(&g, 11));
        assert_ne!(a, seeded_inputs(&g, 12));
        assert!(a.values().flatten().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.keys().collect::<Vec<_>>(), ["W1", "x0", "y"]);
    }
}
