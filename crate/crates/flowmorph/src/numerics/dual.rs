//! Forward-mode dual numbers with three tangent channels.
//!
//! [`Dual3`] carries a value and its derivatives along the three spatial
//! seed directions e_x, e_y, e_z, so one pass through a network yields the
//! full 3-column spatial Jacobian. The scalar type is generic and closed
//! under nesting: `Dual3<Dual3<f64>>` gives exact second derivatives, which
//! the divergence check of the curl field uses.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{Activation, MlpParams, NumericsError};

/// Scalar arithmetic closed under differentiation: enough surface for the
/// network forward pass (affine maps plus elu/tanh nonlinearities).
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    /// The underlying primal value, used only for branch decisions.
    fn real_part(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;

    fn activate(self, kind: Activation) -> Self {
        match kind {
            Activation::Identity => self,
            Activation::Relu => {
                if self.real_part() > 0.0 {
                    self
                } else {
                    Self::zero()
                }
            }
            Activation::Elu => {
                if self.real_part() > 0.0 {
                    self
                } else {
                    self.exp() - Self::one()
                }
            }
            Activation::Tanh => self.tanh(),
        }
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn real_part(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Value plus three tangent channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual3<T: Real> {
    pub re: T,
    pub dx: [T; 3],
}

impl<T: Real> Dual3<T> {
    pub fn constant(re: T) -> Self {
        Dual3 {
            re,
            dx: [T::zero(); 3],
        }
    }

    /// A coordinate seeded as the `axis`-th independent variable.
    pub fn seeded(re: T, axis: usize) -> Self {
        let mut dx = [T::zero(); 3];
        dx[axis] = T::one();
        Dual3 { re, dx }
    }
}

impl<T: Real> Add for Dual3<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Dual3 {
            re: self.re + rhs.re,
            dx: [
                self.dx[0] + rhs.dx[0],
                self.dx[1] + rhs.dx[1],
                self.dx[2] + rhs.dx[2],
            ],
        }
    }
}

impl<T: Real> Sub for Dual3<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Dual3 {
            re: self.re - rhs.re,
            dx: [
                self.dx[0] - rhs.dx[0],
                self.dx[1] - rhs.dx[1],
                self.dx[2] - rhs.dx[2],
            ],
        }
    }
}

impl<T: Real> Mul for Dual3<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Dual3 {
            re: self.re * rhs.re,
            dx: [
                self.dx[0] * rhs.re + self.re * rhs.dx[0],
                self.dx[1] * rhs.re + self.re * rhs.dx[1],
                self.dx[2] * rhs.re + self.re * rhs.dx[2],
            ],
        }
    }
}

impl<T: Real> Div for Dual3<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = T::one() / rhs.re;
        let re = self.re * inv;
        Dual3 {
            re,
            dx: [
                (self.dx[0] - re * rhs.dx[0]) * inv,
                (self.dx[1] - re * rhs.dx[1]) * inv,
                (self.dx[2] - re * rhs.dx[2]) * inv,
            ],
        }
    }
}

impl<T: Real> Neg for Dual3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual3 {
            re: -self.re,
            dx: [-self.dx[0], -self.dx[1], -self.dx[2]],
        }
    }
}

impl<T: Real> Real for Dual3<T> {
    fn from_f64(v: f64) -> Self {
        Dual3::constant(T::from_f64(v))
    }

    fn real_part(self) -> f64 {
        self.re.real_part()
    }

    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual3 {
            re: e,
            dx: [self.dx[0] * e, self.dx[1] * e, self.dx[2] * e],
        }
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        let d = T::one() - t * t;
        Dual3 {
            re: t,
            dx: [self.dx[0] * d, self.dx[1] * d, self.dx[2] * d],
        }
    }
}

/// Forward pass over any [`Real`] scalar. Panics on width mismatch; the
/// public wrappers check widths first.
pub fn mlp_forward_generic<T: Real>(params: &MlpParams, input: &[T]) -> Vec<T> {
    let mut a: Vec<T> = input.to_vec();
    for layer in &params.layers {
        debug_assert_eq!(a.len(), layer.weight.nrows());
        let mut next = Vec::with_capacity(layer.weight.ncols());
        for j in 0..layer.weight.ncols() {
            let mut s = T::from_f64(layer.bias[j]);
            for (i, &ai) in a.iter().enumerate() {
                s = s + ai * T::from_f64(layer.weight[[i, j]]);
            }
            next.push(s.activate(layer.activation));
        }
        a = next;
    }
    a
}

/// Exact spatial Jacobian of a network whose input is `concat(x, conditioning)`
/// and whose output is 3-wide: `J[a][b] = d out_a / d x_b`, from forward-mode
/// passes seeded along e_x, e_y, e_z.
pub fn spatial_jacobian(
    params: &MlpParams,
    x: &[f64; 3],
    conditioning: &[f64],
) -> Result<[[f64; 3]; 3], NumericsError> {
    if params.input_width() != 3 + conditioning.len() {
        return Err(NumericsError::WidthMismatch {
            expected: params.input_width(),
            actual: 3 + conditioning.len(),
        });
    }
    if params.output_width() != 3 {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![3],
            actual: vec![params.output_width()],
        });
    }
    for layer in &params.layers {
        if !layer.activation.is_c1() {
            return Err(NumericsError::NonDifferentiableActivation {
                activation: layer.activation,
            });
        }
    }
    let out = jacobian_unchecked::<f64>(params, x, conditioning);
    let mut jac = [[0.0; 3]; 3];
    for (a, row) in jac.iter_mut().enumerate() {
        for (b, entry) in row.iter_mut().enumerate() {
            *entry = out[a].dx[b].real_part();
        }
    }
    Ok(jac)
}

/// Dual-seeded forward pass returning the three outputs with their spatial
/// tangents, generic over the scalar so it can be nested for second-order
/// derivatives.
pub fn jacobian_unchecked<T: Real>(
    params: &MlpParams,
    x: &[T; 3],
    conditioning: &[f64],
) -> Vec<Dual3<T>> {
    let mut input: Vec<Dual3<T>> = Vec::with_capacity(3 + conditioning.len());
    for (axis, &c) in x.iter().enumerate() {
        input.push(Dual3::seeded(c, axis));
    }
    for &c in conditioning {
        input.push(Dual3::constant(T::from_f64(c)));
    }
    mlp_forward_generic(params, &input)
}
