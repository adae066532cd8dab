//! Forward-mode dual numbers with vector-valued seeds.
//!
//! A [`DualScalar`] carries a value and the gradient of that value with
//! respect to every seeded input, so one pass through a computation yields the
//! full gradient. Constants carry an empty derivative vector, which is read as
//! all zeros; every seeded quantity in one evaluation has the same length.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Value plus gradient with respect to the seeded inputs.
#[derive(Clone, PartialEq, Default)]
pub struct DualScalar {
    pub value: f64,
    pub derivs: Vec<f64>,
}

impl fmt::Debug for DualScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dual({}, {:?})", self.value, self.derivs)
    }
}

impl DualScalar {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            derivs: Vec::new(),
        }
    }

    /// The `index`-th independent variable out of `dim`.
    pub fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut derivs = vec![0.0; dim];
        derivs[index] = 1.0;
        Self { value, derivs }
    }

    /// Seeds every entry of `values` as its own independent variable.
    pub fn seed_all(values: &[f64]) -> Vec<Self> {
        let dim = values.len();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Self::variable(v, i, dim))
            .collect()
    }

    /// Derivative with respect to input `i`; zero for constants.
    pub fn deriv(&self, i: usize) -> f64 {
        self.derivs.get(i).copied().unwrap_or(0.0)
    }

    /// Gradient padded to `dim` entries.
    pub fn gradient(&self, dim: usize) -> Vec<f64> {
        let mut g = self.derivs.clone();
        g.resize(dim, 0.0);
        g
    }

    fn scale_in_place(&mut self, s: f64) {
        for d in &mut self.derivs {
            *d *= s;
        }
    }

    /// Applies a scalar function with known derivative `slope` at `self.value`.
    fn chain(mut self, value: f64, slope: f64) -> Self {
        self.value = value;
        self.scale_in_place(slope);
        self
    }

    /// self.derivs += s * other.derivs
    fn axpy(&mut self, s: f64, other: &[f64]) {
        if other.is_empty() || s == 0.0 {
            return;
        }
        if self.derivs.is_empty() {
            self.derivs = other.iter().map(|d| s * d).collect();
            return;
        }
        debug_assert_eq!(self.derivs.len(), other.len(), "seed dimension mismatch");
        for (a, b) in self.derivs.iter_mut().zip(other) {
            *a += s * b;
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(s, c)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(c, -s)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }

    pub fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        self.chain(r, 0.5 / r)
    }

    pub fn powi(self, n: i32) -> Self {
        let v = self.value;
        let slope = if n == 0 {
            0.0
        } else {
            f64::from(n) * v.powi(n - 1)
        };
        self.chain(v.powi(n), slope)
    }
}

impl From<f64> for DualScalar {
    fn from(v: f64) -> Self {
        Self::constant(v)
    }
}

impl Add for DualScalar {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.value += rhs.value;
        self.axpy(1.0, &rhs.derivs);
        self
    }
}

impl<'a> Add<&'a DualScalar> for DualScalar {
    type Output = Self;
    fn add(mut self, rhs: &'a DualScalar) -> Self {
        self.value += rhs.value;
        self.axpy(1.0, &rhs.derivs);
        self
    }
}

impl Sub for DualScalar {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.value -= rhs.value;
        self.axpy(-1.0, &rhs.derivs);
        self
    }
}

impl<'a> Sub<&'a DualScalar> for DualScalar {
    type Output = Self;
    fn sub(mut self, rhs: &'a DualScalar) -> Self {
        self.value -= rhs.value;
        self.axpy(-1.0, &rhs.derivs);
        self
    }
}

impl Mul for DualScalar {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self * &rhs
    }
}

impl<'a> Mul<&'a DualScalar> for DualScalar {
    type Output = Self;
    fn mul(mut self, rhs: &'a DualScalar) -> Self {
        // d(ab) = b da + a db
        let a = self.value;
        self.scale_in_place(rhs.value);
        self.axpy(a, &rhs.derivs);
        self.value = a * rhs.value;
        self
    }
}

impl Div for DualScalar {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self / &rhs
    }
}

impl<'a> Div<&'a DualScalar> for DualScalar {
    type Output = Self;
    fn div(mut self, rhs: &'a DualScalar) -> Self {
        let q = self.value / rhs.value;
        self.scale_in_place(1.0 / rhs.value);
        self.axpy(-q / rhs.value, &rhs.derivs);
        self.value = q;
        self
    }
}

impl Neg for DualScalar {
    type Output = Self;
    fn neg(mut self) -> Self {
        self.value = -self.value;
        self.scale_in_place(-1.0);
        self
    }
}

impl Add<f64> for DualScalar {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.value += rhs;
        self
    }
}

impl Sub<f64> for DualScalar {
    type Output = Self;
    fn sub(mut self, rhs: f64) -> Self {
        self.value -= rhs;
        self
    }
}

impl Mul<f64> for DualScalar {
    type Output = Self;
    fn mul(mut self, rhs: f64) -> Self {
        self.value *= rhs;
        self.scale_in_place(rhs);
        self
    }
}

impl Div<f64> for DualScalar {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = DualScalar::variable(3.0, 0, 2);
        let y = DualScalar::variable(-2.0, 1, 2);
        let p = x.clone() * &y;
        assert_eq!(p.value, -6.0);
        assert_eq!(p.derivs, vec![-2.0, 3.0]);
        let q = x / &y;
        assert_eq!(q.value, -1.5);
        assert_eq!(q.derivs, vec![-0.5, -0.75]);
    }

    #[test]
    fn constants_mix_with_variables() {
        let c = DualScalar::constant(2.0);
        let x = DualScalar::variable(0.5, 0, 1);
        let s = c.clone() + &x;
        assert_eq!(s.derivs, vec![1.0]);
        let d = c - x;
        assert_eq!(d.derivs, vec![-1.0]);
        assert_eq!(DualScalar::constant(4.0).deriv(3), 0.0);
    }

    #[test]
    fn elementary_functions() {
        let x = DualScalar::variable(0.3, 0, 1);
        assert!((x.clone().sin().deriv(0) - 0.3f64.cos()).abs() < 1e-15);
        assert!((x.clone().cos().deriv(0) + 0.3f64.sin()).abs() < 1e-15);
        assert!((x.clone().exp().deriv(0) - 0.3f64.exp()).abs() < 1e-15);
        assert!((x.clone().powi(3).deriv(0) - 3.0 * 0.09).abs() < 1e-15);
        assert!((x.sqrt().deriv(0) - 0.5 / 0.3f64.sqrt()).abs() < 1e-15);
    }
}
