use crate::autograd::Var;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Var<T> {
    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let out = self.value().add(rhs.value())?;
        Ok(Var::from_op(
            out,
            "add",
            &[self, rhs],
            Box::new(|g, x, _| {
                Ok(vec![
                    Some(g.sum_to_shape(x[0].shape())?),
                    Some(g.sum_to_shape(x[1].shape())?),
                ])
            }),
        ))
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let out = self.value().sub(rhs.value())?;
        Ok(Var::from_op(
            out,
            "sub",
            &[self, rhs],
            Box::new(|g, x, _| {
                Ok(vec![
                    Some(g.sum_to_shape(x[0].shape())?),
                    Some(g.map(|v| -v).sum_to_shape(x[1].shape())?),
                ])
            }),
        ))
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let out = self.value().mul(rhs.value())?;
        Ok(Var::from_op(
            out,
            "mul",
            &[self, rhs],
            Box::new(|g, x, _| {
                Ok(vec![
                    Some(g.mul(x[1])?.sum_to_shape(x[0].shape())?),
                    Some(g.mul(x[0])?.sum_to_shape(x[1].shape())?),
                ])
            }),
        ))
    }

    pub fn div(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let out = self.value().zip_map(rhs.value(), |a, b| a / b)?;
        Ok(Var::from_op(
            out,
            "div",
            &[self, rhs],
            Box::new(|g, x, y| {
                let ga = g.zip_map(x[1], |g, b| g / b)?.sum_to_shape(x[0].shape())?;
                // d(a/b)/db = -y/b
                let gb = g
                    .mul(y)?
                    .zip_map(x[1], |gy, b| -gy / b)?
                    .sum_to_shape(x[1].shape())?;
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<T> {
        let (s, b) = (T::of(scale), T::of(shift));
        self.unary("affine", move |v| v * s + b, move |_, _| s)
    }

    pub fn scale(&self, s: f64) -> Var<T> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Var<T> {
        self.affine(-1.0, 0.0)
    }

    /// Elementwise map with derivative `df(x, y)` expressed through the input
    /// `x` and output `y`.
    pub fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<T> {
        let out = self.value().map(f);
        Var::from_op(
            out,
            name,
            &[self],
            Box::new(move |g, x, y| {
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(x[0].data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                Ok(vec![Some(Tensor::new(g.shape(), d)?)])
            }),
        )
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn relu6(&self) -> Var<T> {
        let six = T::of(6.0);
        self.unary(
            "relu6",
            move |v| v.max(T::zero()).min(six),
            move |x, _| {
                if x > T::zero() && x < six {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<T> {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let a = T::of(0.044715);
        let half = T::of(0.5);
        let three = T::of(3.0);
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
            },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self) -> Var<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Var<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(&self) -> Var<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }
}
