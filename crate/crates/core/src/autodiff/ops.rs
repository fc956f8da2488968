//! Differentiable tensor primitives recorded on a [`Tape`].

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    self, broadcast_indices, col2im, gemm_acc, im2col, reduce_to_shape, transpose_raw, BinaryOp, ConvGeometry, Tensor,
    UnaryOp,
};

struct UnaryFn(UnaryOp);

impl<T: Scalar> Backward<T> for UnaryFn {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].data();
        let y = output.data();
        let data = grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| g * self.0.derivative(x[i], y[i]))
            .collect();
        vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))]
    }
}

struct BinaryFn(BinaryOp);

impl<T: Scalar> Backward<T> for BinaryFn {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let shape = a.shape().to_vec();
        let g = grad.data();
        let bidx = if a.shape() == b.shape() {
            None
        } else {
            Some(broadcast_indices(a.shape(), b.shape()).expect("checked in forward"))
        };
        let bval = |i: usize| b.data()[bidx.as_ref().map_or(i, |m| m[i])];
        let reduce = |t: Tensor<T>| reduce_to_shape(&t, b.shape()).expect("checked in forward");
        let ga = needs[0].then(|| match self.0 {
            BinaryOp::Add | BinaryOp::Sub => grad.clone(),
            BinaryOp::Mul => Tensor::from_fn(&shape, |i| g[i] * bval(i)),
            BinaryOp::Div => Tensor::from_fn(&shape, |i| g[i] / bval(i)),
        });
        let gb = needs[1].then(|| match self.0 {
            BinaryOp::Add => reduce(grad.clone()),
            BinaryOp::Sub => reduce(grad.map(|v| -v)),
            BinaryOp::Mul => reduce(Tensor::from_fn(&shape, |i| g[i] * a.data()[i])),
            BinaryOp::Div => reduce(Tensor::from_fn(&shape, |i| {
                let bv = bval(i);
                -g[i] * a.data()[i] / (bv * bv)
            })),
        });
        vec![ga, gb]
    }
}

struct MatmulFn;

impl<T: Scalar> Backward<T> for MatmulFn {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| {
            let bt = tensor::transpose(b).expect("2-D");
            tensor::matmul(grad, &bt).expect("shapes checked in forward")
        });
        let gb = needs[1].then(|| {
            let at = tensor::transpose(a).expect("2-D");
            tensor::matmul(&at, grad).expect("shapes checked in forward")
        });
        vec![ga, gb]
    }
}

struct TransposeFn;

impl<T: Scalar> Backward<T> for TransposeFn {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(tensor::transpose(grad).expect("2-D"))]
    }
}

/// Sum (or mean, with `scale = 1/n`) of all elements.
struct SumFn {
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0] * T::from_f64(self.scale);
        vec![Some(Tensor::full(inputs[0].shape(), g))]
    }
}

struct ReshapeFn;

impl<T: Scalar> Backward<T> for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.reshape(inputs[0].shape()).expect("same size"))]
    }
}

struct ScaleFn<T>(T);

impl<T: Scalar> Backward<T> for ScaleFn<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.scale(self.0))]
    }
}

struct Conv2dFn<T> {
    geom: ConvGeometry,
    /// Unfolded input patches per instance, `[B, k·k·Cin, Ho·Wo]`.
    cols: Vec<T>,
}

impl<T: Scalar> Backward<T> for Conv2dFn<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let batch = x.shape()[0];
        let (pl, op, co) = (g.patch_len(), g.out_plane(), g.c_out);
        let cols_len = pl * op;

        let gw = needs[1].then(|| {
            let mut gw = vec![T::zero(); co * pl];
            let mut cols_t = vec![T::zero(); cols_len];
            for b in 0..batch {
                transpose_raw(pl, op, &self.cols[b * cols_len..(b + 1) * cols_len], &mut cols_t);
                let gb = &grad.data()[b * g.out_len()..(b + 1) * g.out_len()];
                gemm_acc(co, op, pl, gb, &cols_t, &mut gw);
            }
            Tensor::from_parts(w.shape().to_vec(), gw)
        });

        let gx = needs[0].then(|| {
            let mut wt = vec![T::zero(); co * pl];
            transpose_raw(co, pl, w.data(), &mut wt);
            let mut dcols = vec![T::zero(); cols_len];
            let mut gx = vec![T::zero(); x.numel()];
            for b in 0..batch {
                dcols.fill(T::zero());
                let gb = &grad.data()[b * g.out_len()..(b + 1) * g.out_len()];
                gemm_acc(pl, co, op, &wt, gb, &mut dcols);
                col2im(g, &dcols, &mut gx[b * g.in_len()..(b + 1) * g.in_len()]);
            }
            Tensor::from_parts(x.shape().to_vec(), gx)
        });
        vec![gx, gw]
    }
}

struct AvgPoolFn {
    kernel: usize,
}

impl<T: Scalar> Backward<T> for AvgPoolFn {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let k = self.kernel;
        let (_, _, h, w) = inputs[0].dims4().expect("NCHW");
        let (_, _, ho, wo) = output.dims4().expect("NCHW");
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let gx = Tensor::from_fn(inputs[0].shape(), |i| {
            let plane = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            grad.data()[plane * ho * wo + (y / k) * wo + x / k] * inv
        });
        vec![Some(gx)]
    }
}

struct MaxPoolFn {
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolFn {
    fn name(&self) -> &'static str {
        "max_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            gx.data_mut()[src] += g;
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let out = tensor::unary(op, self.value(a))?;
        Ok(self.record(UnaryFn(op), &[a], out))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out = tensor::binary(op, self.value(a), self.value(b))?;
        Ok(self.record(BinaryFn(op), &[a, b], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).scale(k);
        self.record(ScaleFn(k), &[a], out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.record(MatmulFn, &[a, b], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.record(TransposeFn, &[a], out))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        self.record(SumFn { scale: 1.0 }, &[a], Tensor::scalar(T::from_f64(s)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.value(a).sum_f64() / n;
        self.record(SumFn { scale: 1.0 / n }, &[a], Tensor::scalar(T::from_f64(s)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.record(ReshapeFn, &[a], out))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let Some((&b, rest)) = shape.split_first() else {
            return Err(Error::Shape("cannot flatten a scalar".into()));
        };
        self.reshape(a, &[b, rest.iter().product()])
    }

    /// Bias-free convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geom = ConvGeometry::new(xv.shape(), wv.shape(), stride, padding)?;
        let batch = xv.shape()[0];
        let cols_len = geom.patch_len() * geom.out_plane();
        let keep = self.any_requires_grad(&[x, w]);
        let mut cols = vec![T::zero(); if keep { batch * cols_len } else { cols_len }];
        let mut out = vec![T::zero(); batch * geom.out_len()];
        for b in 0..batch {
            let slot = if keep { b * cols_len } else { 0 };
            let c = &mut cols[slot..slot + cols_len];
            im2col(&geom, &xv.data()[b * geom.in_len()..(b + 1) * geom.in_len()], c);
            gemm_acc(
                geom.c_out,
                geom.patch_len(),
                geom.out_plane(),
                wv.data(),
                c,
                &mut out[b * geom.out_len()..(b + 1) * geom.out_len()],
            );
        }
        let out = Tensor::from_parts(vec![batch, geom.c_out, geom.ho, geom.wo], out);
        if !keep {
            cols = Vec::new();
        }
        Ok(self.record(Conv2dFn { geom, cols }, &[x, w], out))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let out = tensor::avg_pool2d(self.value(x), kernel)?;
        Ok(self.record(AvgPoolFn { kernel }, &[x], out))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let (out, argmax) = tensor::max_pool2d(self.value(x), kernel)?;
        Ok(self.record(MaxPoolFn { argmax }, &[x], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reused_variable_accumulates_adjoints() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[0.5, -1.5]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn second_backward_without_reset_doubles() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap().clone();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &once.scale(2.0));
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &once);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 3.0]));
        assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));

        let mut other = Tape::<f64>::new();
        let y = other.param(t(&[1], &[1.0]));
        let s = other.sum(y);
        assert!(matches!(tape.backward(s), Err(Error::Autodiff(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 3.0]));
        let c = tape.constant(t(&[2], &[2.0, 2.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn broadcast_operand_gradient_is_reduced() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2], &[10.0, 20.0]));
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[10.0, 20.0, 10.0, 20.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 1.0]));
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn recorded_order_is_topological() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.param(t(&[2, 2], &[0.5, -1.0, 2.0, 0.0]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.tanh(h).unwrap();
        let s = tape.sum(h);
        for v in [h, s] {
            assert!(tape.inputs_of(v).iter().all(|&i| i < v.index()));
        }
        assert_eq!(tape.op_names(), vec!["leaf", "leaf", "matmul", "tanh", "sum"]);
    }
}
