//! Pointwise ops. Binary ops support equal shapes and scalar-vs-tensor
//! broadcasting only; anything else is rejected with a diagnostic.

use super::{numel, Tensor, TensorError};

enum Broadcast {
    Equal,
    LeftScalar,
    RightScalar,
}

fn broadcast_kind(a: [usize; 4], b: [usize; 4]) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Equal)
    } else if numel(a) == 1 {
        Some(Broadcast::LeftScalar)
    } else if numel(b) == 1 {
        Some(Broadcast::RightScalar)
    } else {
        None
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
    // (gout, a_val, b_val) -> (da, db)
    df: impl Fn(f32, f32, f32) -> (f32, f32) + 'static,
) -> Result<Tensor, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    let kind = broadcast_kind(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        detail: format!("{sa:?} vs {sb:?}"),
    })?;
    let (shape, data): ([usize; 4], Vec<f32>) = {
        let ad = a.data();
        let bd = b.data();
        match kind {
            Broadcast::Equal => (sa, ad.iter().zip(bd.iter()).map(|(x, y)| f(*x, *y)).collect()),
            Broadcast::LeftScalar => (sb, bd.iter().map(|y| f(ad[0], *y)).collect()),
            Broadcast::RightScalar => (sa, ad.iter().map(|x| f(*x, bd[0])).collect()),
        }
    };
    let av = a.to_vec();
    let bv = b.to_vec();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |gout, parents| {
            let mut ga = vec![0.0f32; av.len()];
            let mut gb = vec![0.0f32; bv.len()];
            for (i, g) in gout.iter().enumerate() {
                let x = if av.len() == 1 { av[0] } else { av[i] };
                let y = if bv.len() == 1 { bv[0] } else { bv[i] };
                let (da, db) = df(*g, x, y);
                if av.len() == 1 {
                    ga[0] += da;
                } else {
                    ga[i] += da;
                }
                if bv.len() == 1 {
                    gb[0] += db;
                } else {
                    gb[i] += db;
                }
            }
            parents[0].accumulate_grad(&ga);
            parents[1].accumulate_grad(&gb);
        }),
    ))
}

fn unary(
    t: &Tensor,
    f: impl Fn(f32) -> f32,
    // (gout, input_val) -> din
    df: impl Fn(f32, f32) -> f32 + 'static,
) -> Tensor {
    let data: Vec<f32> = t.data().iter().map(|v| f(*v)).collect();
    let saved = t.to_vec();
    Tensor::from_op(
        t.shape(),
        data,
        vec![t.clone()],
        Box::new(move |gout, parents| {
            let g: Vec<f32> = gout
                .iter()
                .zip(saved.iter())
                .map(|(g, x)| df(*g, *x))
                .collect();
            parents[0].accumulate_grad(&g);
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary("add", self, other, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary("sub", self, other, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary("mul", self, other, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn relu(&self) -> Tensor {
        // Subgradient convention: relu'(0) = 0.
        unary(self, |x| x.max(0.0), |g, x| if x > 0.0 { g } else { 0.0 })
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |g, x| 2.0 * g * x)
    }

    /// Pointwise max(x, floor); gradient passes only where unclamped.
    pub fn clamp_min(&self, floor: f32) -> Tensor {
        unary(
            self,
            move |x| x.max(floor),
            move |g, x| if x > floor { g } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |x| 1.0 / (1.0 + (-x).exp()),
            |g, x| {
                let s = 1.0 / (1.0 + (-x).exp());
                g * s * (1.0 - s)
            },
        )
    }

    pub fn add_scalar(&self, v: f32) -> Tensor {
        unary(self, move |x| x + v, |g, _| g)
    }

    pub fn mul_scalar(&self, v: f32) -> Tensor {
        unary(self, move |x| x * v, move |g, _| g * v)
    }

    /// Per-pixel mean squared error against `target`.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor, TensorError> {
        Ok(self.sub(target)?.square().mean())
    }
}
