use super::kernels::{self, LayerNormCache};
use super::{sigmoid, softplus, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Elementwise product with a one-element tensor.
    Scale(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Square(Var),
    Recip(Var),
    Relu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    TransposedConv2d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    GlobalAvgPool(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        offset: Var,
        cache: LayerNormCache<T>,
    },
    TileCombine {
        tiles: Var,
        coeffs: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is acyclic by
/// construction and a reverse sweep visits each node once. A graph is built
/// per forward pass and dropped afterwards.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `x` with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).same_shape(self.value(b), name)?;
        Ok(zip_map(self.value(a), self.value(b), f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape(format!(
                "scale: factor must hold one value, got shape {:?}",
                self.shape(s)
            )));
        }
        let f = self.value(s).item();
        let v = self.value(x).map(|a| a * f);
        let rg = self.rg(&[x, s]);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|a| a + c);
        let rg = self.rg(&[x]);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::MulScalar(x, c), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.exp());
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| a <= T::zero()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        let v = self.value(x).map(|a| a.ln());
        let rg = self.rg(&[x]);
        self.push(v, Op::Log(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        let rg = self.rg(&[x]);
        self.push(v, Op::Square(x), rg)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| T::one() / a);
        let rg = self.rg(&[x]);
        self.push(v, Op::Recip(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(v, Op::Softplus(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn transposed_conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let v = kernels::transposed_conv2d(self.value(input), self.value(kernel), stride)?;
        let rg = self.rg(&[input, kernel]);
        self.push(v, Op::TransposedConv2d { input, kernel, stride }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = kernels::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(v, Op::GlobalAvgPool(x), rg)
    }

    pub fn layer_norm(&mut self, input: Var, gain: Var, offset: Var, eps: T) -> Result<Var> {
        let (v, cache) = kernels::layer_norm(self.value(input), self.value(gain), self.value(offset), eps)?;
        let rg = self.rg(&[input, gain, offset]);
        self.push(
            v,
            Op::LayerNorm {
                input,
                gain,
                offset,
                cache,
            },
            rg,
        )
    }

    pub fn tile_combine(&mut self, tiles: Var, coeffs: Var) -> Result<Var> {
        let v = kernels::tile_combine(self.value(tiles), self.value(coeffs))?;
        let rg = self.rg(&[tiles, coeffs]);
        self.push(v, Op::TileCombine { tiles, coeffs }, rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![T::one()])?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.wants(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.send(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, s) => {
                let f = self.value(*s).item();
                if self.wants(*x) {
                    self.send(grads, *x, g.map(|v| v * f));
                }
                if self.wants(*s) {
                    let d = g.dot(self.value(*x));
                    self.send(grads, *s, Tensor::new(self.shape(*s), vec![d]).expect("scalar"));
                }
            }
            Op::AddScalar(x) => self.send(grads, *x, g.clone()),
            Op::MulScalar(x, c) => {
                let c = *c;
                self.send(grads, *x, g.map(|v| v * c));
            }
            Op::Exp(x) => self.send(grads, *x, zip_map(g, &node.value, |a, y| a * y)),
            Op::Log(x) => self.send(grads, *x, zip_map(g, self.value(*x), |a, v| a / v)),
            Op::Square(x) => self.send(grads, *x, zip_map(g, self.value(*x), |a, v| a * (v + v))),
            Op::Recip(x) => self.send(grads, *x, zip_map(g, &node.value, |a, y| -a * y * y)),
            Op::Relu(x) => self.send(
                grads,
                *x,
                zip_map(g, self.value(*x), |a, v| if v > T::zero() { a } else { T::zero() }),
            ),
            Op::Softplus(x) => self.send(grads, *x, zip_map(g, self.value(*x), |a, v| a * sigmoid(v))),
            Op::Sum(x) => {
                let gv = g.item();
                self.send(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                let gv = g.item() / n;
                self.send(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Reshape(x) => {
                self.send(grads, *x, g.reshape(self.shape(*x)).expect("same size"));
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bt = kernels::transpose2d(self.value(*b));
                    self.send(grads, *a, kernels::matmul(g, &bt).expect("shape"));
                }
                if self.wants(*b) {
                    let at = kernels::transpose2d(self.value(*a));
                    self.send(grads, *b, kernels::matmul(&at, g).expect("shape"));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let want = [
                    self.wants(*input),
                    self.wants(*kernel),
                    bias.is_some_and(|b| self.wants(b)),
                ];
                let cg = kernels::conv2d_backward(self.value(*input), self.value(*kernel), g, *stride, *pad, want);
                if let Some(gi) = cg.input {
                    self.send(grads, *input, gi);
                }
                if let Some(gk) = cg.kernel {
                    self.send(grads, *kernel, gk);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.send(grads, *b, gb.reshape(self.shape(*b)).expect("bias shape"));
                }
            }
            Op::TransposedConv2d { input, kernel, stride } => {
                let want = [self.wants(*input), self.wants(*kernel)];
                let (gi, gk) =
                    kernels::transposed_conv2d_backward(self.value(*input), self.value(*kernel), g, *stride, want);
                if let Some(gi) = gi {
                    self.send(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    self.send(grads, *kernel, gk);
                }
            }
            Op::GlobalAvgPool(x) => {
                self.send(grads, *x, kernels::global_avg_pool_backward(self.shape(*x), g));
            }
            Op::LayerNorm {
                input,
                gain,
                offset,
                cache,
            } => {
                let (gi, gg, go) = kernels::layer_norm_backward(cache, self.value(*gain), g);
                self.send(grads, *input, gi);
                self.send(grads, *gain, gg.reshape(self.shape(*gain)).expect("shape"));
                self.send(grads, *offset, go.reshape(self.shape(*offset)).expect("shape"));
            }
            Op::TileCombine { tiles, coeffs } => {
                let want = [self.wants(*tiles), self.wants(*coeffs)];
                let (gt, gc) = kernels::tile_combine_backward(self.value(*tiles), self.value(*coeffs), g, want);
                if let Some(gt) = gt {
                    self.send(grads, *tiles, gt);
                }
                if let Some(gc) = gc {
                    self.send(grads, *coeffs, gc);
                }
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Square(..) => "square",
        Op::Recip(..) => "recip",
        Op::Relu(..) => "relu",
        Op::Softplus(..) => "softplus",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Reshape(..) => "reshape",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::TransposedConv2d { .. } => "transposed_conv2d",
        Op::GlobalAvgPool(..) => "global_avg_pool",
        Op::LayerNorm { .. } => "layer_norm",
        Op::TileCombine { .. } => "tile_combine",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_p() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = g.square(p).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::scalar(3.0));
        let a = g.mul(p, p).unwrap();
        let b = g.add(a, p).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 7.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let p = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f32>::new();
        let p = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(p).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::scalar(2.0));
        let d = g.detach(p);
        let prod = g.mul(p, d).unwrap();
        let grads = g.backward(prod).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let p = g.constant(Tensor::scalar(100.0));
        assert!(matches!(g.exp(p), Err(Error::Numerical(_))));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.log(z), Err(Error::Domain(_))));
    }
}
