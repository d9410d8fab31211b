use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    LeakyRelu(Var, f64),
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat(Vec<Var>),
    Warp {
        volume: Var,
        field: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sum(..) => "sum",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample { .. } => "upsample_trilinear",
            Op::Concat(..) => "concat",
            Op::Warp { .. } => "warp_trilinear",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves retain one across `backward` calls.
    grad: Option<Vec<f64>>,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are stored in creation order, which is a topological order.
///
/// Leaf gradients accumulate across repeated `backward` calls until
/// [`Tape::zero_grad`] is called.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    #[cfg(test)]
    pub(crate) corrupt_op: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NumericState { op: "leaf" });
        }
        let requires_grad = tensor.requires_grad();
        Ok(self.push(tensor.detached(), Op::Leaf, requires_grad))
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericState { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(format!("{}: operand shapes {:?} and {:?} differ", op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.record(shape, data, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.record(shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Sum of all elements, as a shape-`[]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.record(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Argument(format!(
                "leaky_relu slope {} outside [0, 1)",
                slope
            )));
        }
        self.map(a, Op::LeakyRelu(a, slope), |x| if x >= 0.0 { x } else { slope * x })
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input).dims5()?,
            self.value(kernel).dims5()?,
            stride,
            padding,
        )?;
        if self.value(bias).shape() != [geom.cout] {
            return shape_err(format!(
                "conv3d bias shape {:?}, expected [{}]",
                self.value(bias).shape(),
                geom.cout
            ));
        }
        let data = kernels::conv3d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        self.record(
            geom.output_shape().to_vec(),
            data,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        )
    }

    /// Trilinear enlargement by an integer factor (align-corners false).
    pub fn upsample_trilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Argument("upsample factor must be at least 1".into()));
        }
        let dims = self.value(input).dims5()?;
        let [n, c, d, h, w] = dims;
        let data = kernels::upsample_forward(self.value(input).data(), dims, factor);
        self.record(
            vec![n, c, d * factor, h * factor, w * factor],
            data,
            Op::Upsample { input, factor },
            &[input],
        )
    }

    /// Concatenates 5-D tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.value(v).dims5()?,
            None => return Err(Error::Argument("concat of zero tensors".into())),
        };
        let [n, _, d, h, w] = first;
        let mut channels = 0;
        for &v in inputs {
            let [vn, vc, vd, vh, vw] = self.value(v).dims5()?;
            if (vn, vd, vh, vw) != (n, d, h, w) {
                return shape_err(format!(
                    "concat: shape {:?} incompatible with {:?}",
                    self.value(v).shape(),
                    first
                ));
            }
            channels += vc;
        }
        let vol = d * h * w;
        let mut data = Vec::with_capacity(n * channels * vol);
        for b in 0..n {
            for &v in inputs {
                let c = self.value(v).shape()[1];
                data.extend_from_slice(&self.value(v).data()[b * c * vol..][..c * vol]);
            }
        }
        self.record(
            vec![n, channels, d, h, w],
            data,
            Op::Concat(inputs.to_vec()),
            inputs,
        )
    }

    /// Resamples `volume` at `p + field(p)` (trilinear, clamp-to-edge).
    /// `field` is `[N, 3, D, H, W]` in voxel units, axis order (depth, height, width).
    pub fn warp_trilinear(&mut self, volume: Var, field: Var) -> Result<Var> {
        let dims = self.value(volume).dims5()?;
        let [n, _, d, h, w] = dims;
        let fdims = self.value(field).dims5()?;
        if fdims != [n, 3, d, h, w] {
            return shape_err(format!(
                "warp: field shape {:?} does not match volume shape {:?}",
                fdims, dims
            ));
        }
        let data = kernels::warp_forward(self.value(volume).data(), self.value(field).data(), dims);
        self.record(
            dims.to_vec(),
            data,
            Op::Warp { volume, field },
            &[volume, field],
        )
    }

    /// Reverse sweep from a scalar output. Leaf gradients accumulate.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.value(output).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        if !self.nodes[output.0].requires_grad {
            return Err(Error::EmptyTape);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let contributions = self.local_grads(id, &g);
            for (input, grad) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` given its output adjoint `g`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        #[allow(unused_mut)]
        let mut out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|x| x * f).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Exp(a) => vec![(
                *a,
                g.iter().zip(node.value.data()).map(|(g, e)| g * e).collect(),
            )],
            Op::Ln(a) => vec![(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::LeakyRelu(a, slope) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x >= 0.0 { *g } else { g * slope })
                    .collect(),
            )],
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut v = Vec::with_capacity(3);
                if wants(*input) {
                    v.push((*input, kernels::conv3d_grad_input(geom, g, val(*kernel))));
                }
                if wants(*kernel) {
                    v.push((*kernel, kernels::conv3d_grad_kernel(geom, g, val(*input))));
                }
                if wants(*bias) {
                    v.push((*bias, kernels::conv3d_grad_bias(geom, g)));
                }
                v
            }
            Op::Upsample { input, factor } => {
                let dims = self.nodes[input.0].value.dims5().expect("checked in forward");
                vec![(*input, kernels::upsample_backward(g, dims, *factor))]
            }
            Op::Concat(inputs) => {
                let [n, _, d, h, w] = node.value.dims5().expect("checked in forward");
                let vol = d * h * w;
                let total = node.value.shape()[1];
                let mut offset = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for &inp in inputs {
                    let c = self.nodes[inp.0].value.shape()[1];
                    let mut gi = Vec::with_capacity(n * c * vol);
                    for b in 0..n {
                        gi.extend_from_slice(&g[(b * total + offset) * vol..][..c * vol]);
                    }
                    offset += c;
                    v.push((inp, gi));
                }
                v
            }
            Op::Warp { volume, field } => {
                let dims = node.value.dims5().expect("checked in forward");
                let mut v = Vec::with_capacity(2);
                if wants(*volume) {
                    v.push((*volume, kernels::warp_grad_volume(g, val(*field), dims)));
                }
                if wants(*field) {
                    v.push((
                        *field,
                        kernels::warp_grad_field(g, val(*volume), val(*field), dims),
                    ));
                }
                v
            }
        };
        #[cfg(test)]
        if self.corrupt_op == Some(node.op.name()) {
            if let Some((_, first)) = out.first_mut() {
                if let Some(x) = first.first_mut() {
                    *x = *x * 1.5 + 0.1;
                }
            }
        }
        out
    }
}
