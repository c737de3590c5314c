//! Op-level reverse-mode differentiation.
//!
//! The tape records a batched forward computation as coarse tensor ops
//! (affine maps, activations, gathers, reductions, the curl and symmetry
//! assemblies) with values evaluated eagerly, then replays it backwards to
//! produce exact gradients of a scalar with respect to every trainable leaf.
//!
//! The dual-forward ops ([`Tape::tangent_affine`], [`Tape::act_tangent`])
//! record the forward-mode computation of spatial derivatives as ordinary
//! tensor ops, so reverse mode runs straight over them; that is how losses
//! built on curl fields (second-order terms) get trained.

use ndarray::{Array1, Array2, Axis};

use super::{Activation, MlpParams, NumericsError};

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    /// x.dot(w) + b with b broadcast over rows.
    Affine { x: TensorId, w: TensorId, b: TensorId },
    /// xt.dot(w): the affine map applied to a tangent (no bias).
    TangentAffine { xt: TensorId, w: TensorId },
    Act { x: TensorId, kind: Activation },
    /// d1(x) * xt: activation applied to a tangent channel.
    ActTangent { x: TensorId, xt: TensorId, kind: Activation },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Square { a: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScaled { a: TensorId, b: TensorId, c: f64 },
    /// [n,k] points ++ a [1,c] row broadcast to every row -> [n,k+c].
    ConcatCond { x: TensorId, z: TensorId },
    GatherRows { a: TensorId, idx: Vec<usize> },
    FrobSq { a: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
    RowNorms { a: TensorId },
    Norm { a: TensorId },
    Recip { a: TensorId },
    ScaleByScalar { a: TensorId, s: TensorId },
    CurlAssemble { tx: TensorId, ty: TensorId, tz: TensorId },
    MirrorX { a: TensorId },
    PlaneSymCombine { a: TensorId, b: TensorId },
}

/// Gradients keyed by tape tensor id. Leaves that were never reached hold
/// `None` (identically zero gradient).
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a leaf, zero-filled if unreached.
    pub fn dense(&self, id: TensorId, shape: (usize, usize)) -> Array2<f64> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

/// Record of a forward computation sufficient to produce exact parameter
/// gradients of a scalar result.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Array2<f64>>,
    trainable: Vec<bool>,
    needs_grad: Vec<bool>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            needs_grad: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> TensorId {
        self.ops.push(op);
        self.values.push(value);
        self.trainable.push(false);
        self.needs_grad.push(needs_grad);
        TensorId(self.ops.len() - 1)
    }

    fn ng(&self, id: TensorId) -> bool {
        self.needs_grad[id.0]
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf: `backward` reports its gradient.
    pub fn variable(&mut self, value: Array2<f64>) -> TensorId {
        let id = self.push(Op::Leaf, value, true);
        self.trainable[id.0] = true;
        id
    }

    pub fn constant_row(&mut self, row: &[f64]) -> TensorId {
        self.constant(Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap())
    }

    pub fn variable_row(&mut self, row: &[f64]) -> TensorId {
        self.variable(Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap())
    }

    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let mut v = self.values[x.0].dot(&self.values[w.0]);
        v += &self.values[b.0].row(0);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Op::Affine { x, w, b }, v, ng)
    }

    pub fn tangent_affine(&mut self, xt: TensorId, w: TensorId) -> TensorId {
        let v = self.values[xt.0].dot(&self.values[w.0]);
        let ng = self.ng(xt) || self.ng(w);
        self.push(Op::TangentAffine { xt, w }, v, ng)
    }

    pub fn act(&mut self, x: TensorId, kind: Activation) -> TensorId {
        let v = self.values[x.0].mapv(|s| kind.apply(s));
        let ng = self.ng(x);
        self.push(Op::Act { x, kind }, v, ng)
    }

    pub fn act_tangent(&mut self, x: TensorId, xt: TensorId, kind: Activation) -> TensorId {
        let d1 = self.values[x.0].mapv(|s| kind.d1(s));
        let v = &d1 * &self.values[xt.0];
        let ng = self.ng(x) || self.ng(xt);
        self.push(Op::ActTangent { x, xt, kind }, v, ng)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = &self.values[a.0] + &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add { a, b }, v, ng)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = &self.values[a.0] - &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub { a, b }, v, ng)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = &self.values[a.0] * &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul { a, b }, v, ng)
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].mapv(|s| s * s);
        let ng = self.ng(a);
        self.push(Op::Square { a }, v, ng)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.values[a.0].mapv(|s| s * c);
        let ng = self.ng(a);
        self.push(Op::Scale { a, c }, v, ng)
    }

    /// a + c * b
    pub fn add_scaled(&mut self, a: TensorId, b: TensorId, c: f64) -> TensorId {
        let v = &self.values[a.0] + &self.values[b.0].mapv(|s| s * c);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::AddScaled { a, b, c }, v, ng)
    }

    pub fn concat_cond(&mut self, x: TensorId, z: TensorId) -> TensorId {
        let xv = &self.values[x.0];
        let zv = &self.values[z.0];
        debug_assert_eq!(zv.nrows(), 1);
        let (n, k) = xv.dim();
        let c = zv.ncols();
        let mut v = Array2::zeros((n, k + c));
        v.slice_mut(ndarray::s![.., ..k]).assign(xv);
        for r in 0..n {
            v.slice_mut(ndarray::s![r..r + 1, k..]).assign(zv);
        }
        let ng = self.ng(x) || self.ng(z);
        self.push(Op::ConcatCond { x, z }, v, ng)
    }

    pub fn gather_rows(&mut self, a: TensorId, idx: Vec<usize>) -> TensorId {
        let av = &self.values[a.0];
        let mut v = Array2::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&av.row(i));
        }
        let ng = self.ng(a);
        self.push(Op::GatherRows { a, idx }, v, ng)
    }

    pub fn frob_sq(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.values[a.0].iter().map(|v| v * v).sum();
        let ng = self.ng(a);
        self.push(Op::FrobSq { a }, Array2::from_elem((1, 1), s), ng)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.values[a.0].iter().sum();
        let ng = self.ng(a);
        self.push(Op::Sum { a }, Array2::from_elem((1, 1), s), ng)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let v = &self.values[a.0];
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Op::Mean { a }, Array2::from_elem((1, 1), s), ng)
    }

    pub fn row_norms(&mut self, a: TensorId) -> TensorId {
        let av = &self.values[a.0];
        let mut v = Array2::zeros((av.nrows(), 1));
        for (r, row) in av.rows().into_iter().enumerate() {
            v[[r, 0]] = row.iter().map(|s| s * s).sum::<f64>().sqrt();
        }
        let ng = self.ng(a);
        self.push(Op::RowNorms { a }, v, ng)
    }

    pub fn norm(&mut self, a: TensorId) -> TensorId {
        let s = self.values[a.0].iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = self.ng(a);
        self.push(Op::Norm { a }, Array2::from_elem((1, 1), s), ng)
    }

    pub fn recip(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].mapv(|s| 1.0 / s);
        let ng = self.ng(a);
        self.push(Op::Recip { a }, v, ng)
    }

    /// a * s where s is a 1x1 tensor.
    pub fn scale_by_scalar(&mut self, a: TensorId, s: TensorId) -> TensorId {
        let sv = self.values[s.0][[0, 0]];
        let v = self.values[a.0].mapv(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(Op::ScaleByScalar { a, s }, v, ng)
    }

    /// Curl of a 3-field from its spatial tangents: `t_b[:, a] = d out_a / d x_b`.
    pub fn curl_assemble(&mut self, tx: TensorId, ty: TensorId, tz: TensorId) -> TensorId {
        let (txv, tyv, tzv) = (&self.values[tx.0], &self.values[ty.0], &self.values[tz.0]);
        let n = txv.nrows();
        let mut v = Array2::zeros((n, 3));
        for r in 0..n {
            v[[r, 0]] = tyv[[r, 2]] - tzv[[r, 1]];
            v[[r, 1]] = tzv[[r, 0]] - txv[[r, 2]];
            v[[r, 2]] = txv[[r, 1]] - tyv[[r, 0]];
        }
        let ng = self.ng(tx) || self.ng(ty) || self.ng(tz);
        self.push(Op::CurlAssemble { tx, ty, tz }, v, ng)
    }

    /// Negate the x column (mirror through the yz plane).
    pub fn mirror_x(&mut self, a: TensorId) -> TensorId {
        let mut v = self.values[a.0].clone();
        for r in 0..v.nrows() {
            v[[r, 0]] = -v[[r, 0]];
        }
        let ng = self.ng(a);
        self.push(Op::MirrorX { a }, v, ng)
    }

    /// Anti-symmetric x component, symmetric y and z:
    /// `[(a0-b0)/2, (a1+b1)/2, (a2+b2)/2]`.
    pub fn plane_sym_combine(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let n = av.nrows();
        let mut v = Array2::zeros((n, 3));
        for r in 0..n {
            v[[r, 0]] = 0.5 * (av[[r, 0]] - bv[[r, 0]]);
            v[[r, 1]] = 0.5 * (av[[r, 1]] + bv[[r, 1]]);
            v[[r, 2]] = 0.5 * (av[[r, 2]] + bv[[r, 2]]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::PlaneSymCombine { a, b }, v, ng)
    }

    /// Reverse pass from a scalar root. Consumes the tape's gradient budget:
    /// a second call errors.
    pub fn backward(&mut self, root: TensorId) -> Result<Gradients, NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        self.consumed = true;
        let rv = &self.values[root.0];
        if rv.dim() != (1, 1) {
            return Err(NumericsError::NotScalar {
                rows: rv.nrows(),
                cols: rv.ncols(),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.ops.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if self.trainable[i] || matches!(self.ops[i], Op::Leaf) {
                grads[i] = Some(g);
            } else {
                // Interior values: gradient no longer needed; keep memory flat.
                drop(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        grads: &mut [Option<Array2<f64>>],
        id: TensorId,
        update: Array2<f64>,
        needs: bool,
    ) {
        if !needs {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &update,
            slot @ None => *slot = Some(update),
        }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                if self.ng(*x) {
                    let gx = g.dot(&self.values[w.0].t());
                    Self::accumulate(grads, *x, gx, true);
                }
                if self.ng(*w) {
                    let gw = self.values[x.0].t().dot(g);
                    Self::accumulate(grads, *w, gw, true);
                }
                if self.ng(*b) {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    Self::accumulate(grads, *b, gb, true);
                }
            }
            Op::TangentAffine { xt, w } => {
                if self.ng(*xt) {
                    let gx = g.dot(&self.values[w.0].t());
                    Self::accumulate(grads, *xt, gx, true);
                }
                if self.ng(*w) {
                    let gw = self.values[xt.0].t().dot(g);
                    Self::accumulate(grads, *w, gw, true);
                }
            }
            Op::Act { x, kind } => {
                let d1 = self.values[x.0].mapv(|s| kind.d1(s));
                Self::accumulate(grads, *x, &d1 * g, self.ng(*x));
            }
            Op::ActTangent { x, xt, kind } => {
                if self.ng(*x) {
                    let d2 = self.values[x.0].mapv(|s| kind.d2(s));
                    Self::accumulate(grads, *x, &(&d2 * &self.values[xt.0]) * g, true);
                }
                if self.ng(*xt) {
                    let d1 = self.values[x.0].mapv(|s| kind.d1(s));
                    Self::accumulate(grads, *xt, &d1 * g, true);
                }
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone(), self.ng(*a));
                Self::accumulate(grads, *b, g.clone(), self.ng(*b));
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, g.clone(), self.ng(*a));
                Self::accumulate(grads, *b, g.mapv(|v| -v), self.ng(*b));
            }
            Op::Mul { a, b } => {
                Self::accumulate(grads, *a, &self.values[b.0] * g, self.ng(*a));
                Self::accumulate(grads, *b, &self.values[a.0] * g, self.ng(*b));
            }
            Op::Square { a } => {
                let ga = self.values[a.0].mapv(|v| 2.0 * v) * g;
                Self::accumulate(grads, *a, ga, self.ng(*a));
            }
            Op::Scale { a, c } => {
                Self::accumulate(grads, *a, g.mapv(|v| v * c), self.ng(*a));
            }
            Op::AddScaled { a, b, c } => {
                Self::accumulate(grads, *a, g.clone(), self.ng(*a));
                Self::accumulate(grads, *b, g.mapv(|v| v * c), self.ng(*b));
            }
            Op::ConcatCond { x, z } => {
                let k = self.values[x.0].ncols();
                if self.ng(*x) {
                    let gx = g.slice(ndarray::s![.., ..k]).to_owned();
                    Self::accumulate(grads, *x, gx, true);
                }
                if self.ng(*z) {
                    let gz = g
                        .slice(ndarray::s![.., k..])
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    Self::accumulate(grads, *z, gz, true);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.ng(*a) {
                    let av = &self.values[a.0];
                    let mut ga = Array2::zeros(av.dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(r);
                    }
                    Self::accumulate(grads, *a, ga, true);
                }
            }
            Op::FrobSq { a } => {
                let g0 = g[[0, 0]];
                let ga = self.values[a.0].mapv(|v| 2.0 * v * g0);
                Self::accumulate(grads, *a, ga, self.ng(*a));
            }
            Op::Sum { a } => {
                let g0 = g[[0, 0]];
                let ga = Array2::from_elem(self.values[a.0].dim(), g0);
                Self::accumulate(grads, *a, ga, self.ng(*a));
            }
            Op::Mean { a } => {
                let g0 = g[[0, 0]] / self.values[a.0].len() as f64;
                let ga = Array2::from_elem(self.values[a.0].dim(), g0);
                Self::accumulate(grads, *a, ga, self.ng(*a));
            }
            Op::RowNorms { a } => {
                if self.ng(*a) {
                    let av = &self.values[a.0];
                    let nv = &self.values[i];
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        let n = nv[[r, 0]];
                        if n > 0.0 {
                            let s = g[[r, 0]] / n;
                            for c in 0..av.ncols() {
                                ga[[r, c]] = av[[r, c]] * s;
                            }
                        }
                    }
                    Self::accumulate(grads, *a, ga, true);
                }
            }
            Op::Norm { a } => {
                if self.ng(*a) {
                    let n = self.values[i][[0, 0]];
                    if n > 0.0 {
                        let s = g[[0, 0]] / n;
                        let ga = self.values[a.0].mapv(|v| v * s);
                        Self::accumulate(grads, *a, ga, true);
                    }
                }
            }
            Op::Recip { a } => {
                if self.ng(*a) {
                    let out = &self.values[i];
                    let ga = out.mapv(|v| -v * v) * g;
                    Self::accumulate(grads, *a, ga, true);
                }
            }
            Op::ScaleByScalar { a, s } => {
                let sv = self.values[s.0][[0, 0]];
                Self::accumulate(grads, *a, g.mapv(|v| v * sv), self.ng(*a));
                if self.ng(*s) {
                    let gs: f64 = (&self.values[a.0] * g).sum();
                    Self::accumulate(grads, *s, Array2::from_elem((1, 1), gs), true);
                }
            }
            Op::CurlAssemble { tx, ty, tz } => {
                let n = g.nrows();
                let mut push = |id: TensorId, build: &dyn Fn(usize, &mut Array2<f64>)| {
                    if self.ng(id) {
                        let mut gt = Array2::zeros((n, 3));
                        for r in 0..n {
                            build(r, &mut gt);
                        }
                        Self::accumulate(grads, id, gt, true);
                    }
                };
                push(*tx, &|r, gt| {
                    gt[[r, 2]] = -g[[r, 1]];
                    gt[[r, 1]] = g[[r, 2]];
                });
                push(*ty, &|r, gt| {
                    gt[[r, 2]] = g[[r, 0]];
                    gt[[r, 0]] = -g[[r, 2]];
                });
                push(*tz, &|r, gt| {
                    gt[[r, 1]] = -g[[r, 0]];
                    gt[[r, 0]] = g[[r, 1]];
                });
            }
            Op::MirrorX { a } => {
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.nrows() {
                        ga[[r, 0]] = -ga[[r, 0]];
                    }
                    Self::accumulate(grads, *a, ga, true);
                }
            }
            Op::PlaneSymCombine { a, b } => {
                let n = g.nrows();
                if self.ng(*a) {
                    let mut ga = Array2::zeros((n, 3));
                    for r in 0..n {
                        ga[[r, 0]] = 0.5 * g[[r, 0]];
                        ga[[r, 1]] = 0.5 * g[[r, 1]];
                        ga[[r, 2]] = 0.5 * g[[r, 2]];
                    }
                    Self::accumulate(grads, *a, ga, true);
                }
                if self.ng(*b) {
                    let mut gb = Array2::zeros((n, 3));
                    for r in 0..n {
                        gb[[r, 0]] = -0.5 * g[[r, 0]];
                        gb[[r, 1]] = 0.5 * g[[r, 1]];
                        gb[[r, 2]] = 0.5 * g[[r, 2]];
                    }
                    Self::accumulate(grads, *b, gb, true);
                }
            }
        }
    }
}

/// Exact reverse-mode gradients of the scalar `root`. The tape is consumed;
/// a second backward over the same tape errors.
pub fn backprop_scalar(tape: &mut Tape, root: TensorId) -> Result<Gradients, NumericsError> {
    tape.backward(root)
}

/// A network registered on a tape: handles to each layer's weight and bias
/// leaves.
pub struct TapedMlp {
    layers: Vec<(TensorId, TensorId, Activation)>,
    shapes: Vec<(usize, usize)>,
}

impl TapedMlp {
    /// Register every weight and bias as tape leaves. `trainable` controls
    /// whether gradients are produced for the weights; `train_biases` is
    /// separate so bias-free (odd) networks can pin biases at zero.
    pub fn register(tape: &mut Tape, params: &MlpParams, trainable: bool, train_biases: bool) -> TapedMlp {
        let mut layers = Vec::with_capacity(params.layers.len());
        let mut shapes = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            let w = if trainable {
                tape.variable(layer.weight.clone())
            } else {
                tape.constant(layer.weight.clone())
            };
            let b_arr = layer
                .bias
                .clone()
                .insert_axis(Axis(0));
            let b = if trainable && train_biases {
                tape.variable(b_arr)
            } else {
                tape.constant(b_arr)
            };
            layers.push((w, b, layer.activation));
            shapes.push(layer.weight.dim());
        }
        TapedMlp { layers, shapes }
    }

    /// Plain batched forward.
    pub fn forward(&self, tape: &mut Tape, input: TensorId) -> TensorId {
        let mut a = input;
        for &(w, b, act) in &self.layers {
            let s = tape.affine(a, w, b);
            a = match act {
                Activation::Identity => s,
                _ => tape.act(s, act),
            };
        }
        a
    }

    /// Dual forward: values plus three spatial tangent channels, all recorded
    /// as tape ops so reverse mode can differentiate through them.
    pub fn dual_forward(
        &self,
        tape: &mut Tape,
        input: TensorId,
        tangents: [TensorId; 3],
    ) -> (TensorId, [TensorId; 3]) {
        let mut a = input;
        let mut t = tangents;
        for &(w, b, act) in &self.layers {
            let s = tape.affine(a, w, b);
            let st = [
                tape.tangent_affine(t[0], w),
                tape.tangent_affine(t[1], w),
                tape.tangent_affine(t[2], w),
            ];
            if act == Activation::Identity {
                a = s;
                t = st;
            } else {
                a = tape.act(s, act);
                t = [
                    tape.act_tangent(s, st[0], act),
                    tape.act_tangent(s, st[1], act),
                    tape.act_tangent(s, st[2], act),
                ];
            }
        }
        (a, t)
    }

    /// Collect gradients in `MlpParams` shape (weight, bias) per layer.
    pub fn extract_grads(&self, grads: &Gradients) -> Vec<(Array2<f64>, Array1<f64>)> {
        self.layers
            .iter()
            .zip(&self.shapes)
            .map(|(&(w, b, _), &(rows, cols))| {
                let gw = grads.dense(w, (rows, cols));
                let gb = grads.dense(b, (1, cols)).remove_axis(Axis(0));
                (gw, gb)
            })
            .collect()
    }
}
