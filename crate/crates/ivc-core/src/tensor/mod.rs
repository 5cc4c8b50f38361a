//! Minimal deterministic reverse-mode autodiff over dense rank-4 float tensors.
//!
//! Shapes are always `(n, c, h, w)`, data is row-major `f32`. The op set is
//! exactly what the codec needs: convolutions, a handful of pointwise ops,
//! straight-through rounding, uniform noise injection, fused rate terms, and
//! scale-space warping. Reductions accumulate in `f64` with a fixed summation
//! order so repeated runs are bitwise identical.

mod conv;
mod elementwise;
mod optim;
mod rate;

pub use conv::{conv2d, conv_transpose2d};
pub use optim::{AdamParams, OptimizerState, ParamSet};
pub use rate::{gaussian_rate, logistic_rate};

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 4]),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f32], &[Tensor])>;

pub struct Node {
    pub id: u64,
    pub shape: [usize; 4],
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the same node.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Node>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        f.debug_struct("Tensor")
            .field("id", &n.id)
            .field("shape", &n.shape)
            .finish()
    }
}

pub fn numel(shape: [usize; 4]) -> usize {
    shape[0] * shape[1] * shape[2] * shape[3]
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Tensor {
        assert_eq!(data.len(), numel(shape), "data length must match shape");
        Tensor(Rc::new(RefCell::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn param(shape: [usize; 4], data: Vec<f32>) -> Tensor {
        let t = Tensor::new(shape, data);
        t.0.borrow_mut().requires_grad = true;
        t
    }

    pub fn zeros(shape: [usize; 4]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: [usize; 4], v: f32) -> Tensor {
        Tensor::new(shape, vec![v; numel(shape)])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::new([1, 1, 1, 1], vec![v])
    }

    pub(crate) fn from_op(
        shape: [usize; 4],
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let t = Tensor::new(shape, data);
        {
            let mut n = t.0.borrow_mut();
            n.parents = parents;
            n.backward = Some(backward);
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.0.borrow().id
    }

    pub fn shape(&self) -> [usize; 4] {
        self.0.borrow().shape
    }

    pub fn numel(&self) -> usize {
        numel(self.shape())
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        Ref::map(self.0.borrow(), |n| &n.data)
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        RefMut::map(self.0.borrow_mut(), |n| &mut n.data)
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub fn item(&self) -> f32 {
        let n = self.0.borrow();
        assert_eq!(numel(n.shape), 1, "item() requires a scalar tensor");
        n.data[0]
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.borrow().data.clone()
    }

    /// True if gradients should flow into this node.
    fn needs_grad(&self) -> bool {
        let n = self.0.borrow();
        n.requires_grad || !n.parents.is_empty()
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        if !self.needs_grad() {
            return;
        }
        let mut n = self.0.borrow_mut();
        let len = n.data.len();
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Every reachable parameter ends
    /// up with `grad` holding d(loss)/d(param). Accumulation order follows the
    /// (deterministic) graph construction order.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape()));
        }
        let topo = self.topo_order();
        self.accumulate_grad_unconditional(&[1.0]);
        for t in topo.iter().rev() {
            let (grad, parents, backward_present) = {
                let n = t.0.borrow();
                (n.grad.clone(), n.parents.clone(), n.backward.is_some())
            };
            if !backward_present {
                continue;
            }
            let Some(grad) = grad else { continue };
            let n = t.0.borrow();
            (n.backward.as_ref().unwrap())(&grad, &parents);
        }
        Ok(())
    }

    fn accumulate_grad_unconditional(&self, delta: &[f32]) {
        let mut n = self.0.borrow_mut();
        let len = n.data.len();
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative DFS; postorder puts parents before children.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, pi)) = stack.pop() {
            let parents = t.0.borrow().parents.clone();
            if pi < parents.len() {
                stack.push((t.clone(), pi + 1));
                let p = parents[pi].clone();
                let pid = p.id();
                if !visited.contains(&pid) {
                    visited.insert(pid);
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }

    /// Forward: round half away from zero. Backward: identity Jacobian.
    pub fn ste_round(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v.round()).collect();
        let shape = self.shape();
        Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(|gout, parents| {
                parents[0].accumulate_grad(gout);
            }),
        )
    }

    /// Adds i.i.d. uniform noise on (-1/2, 1/2) drawn from a counter-based
    /// generator keyed by (seed, element index). Identity backward. Callers
    /// that perturb several tensors in one pass must pass distinct seeds.
    pub fn add_uniform_noise(&self, seed: u64) -> Tensor {
        let data: Vec<f32> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + uniform_noise(seed, 0, i as u64))
            .collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(|gout, parents| {
                parents[0].accumulate_grad(gout);
            }),
        )
    }

    /// Sum of all elements, accumulated in f64 in index order.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|v| *v as f64).sum();
        Tensor::from_op(
            [1, 1, 1, 1],
            vec![s as f32],
            vec![self.clone()],
            Box::new(|gout, parents| {
                let g = gout[0];
                let n = parents[0].numel();
                parents[0].accumulate_grad(&vec![g; n]);
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().map(|v| *v as f64).sum();
        Tensor::from_op(
            [1, 1, 1, 1],
            vec![(s / n as f64) as f32],
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let g = gout[0] / n as f32;
                parents[0].accumulate_grad(&vec![g; n]);
            }),
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty());
        let [n, _, h, w] = parts[0].shape();
        let mut c_total = 0;
        for p in parts {
            let s = p.shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("expected (n={n}, *, h={h}, w={w}), got {:?}", s),
                });
            }
            c_total += s[1];
        }
        let plane = h * w;
        let mut data = vec![0.0f32; n * c_total * plane];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut c_off = 0;
        for p in parts {
            offsets.push(c_off);
            let pc = p.shape()[1];
            let pd = p.data();
            for b in 0..n {
                let src = &pd[b * pc * plane..(b + 1) * pc * plane];
                let dst = &mut data[(b * c_total + c_off) * plane..];
                dst[..pc * plane].copy_from_slice(src);
            }
            c_off += pc;
        }
        let parents: Vec<Tensor> = parts.to_vec();
        Ok(Tensor::from_op(
            [n, c_total, h, w],
            data,
            parents,
            Box::new(move |gout, parents| {
                for (p, &c_off) in parents.iter().zip(offsets.iter()) {
                    let pc = p.shape()[1];
                    let mut pg = vec![0.0f32; p.numel()];
                    for b in 0..n {
                        let src = &gout[(b * c_total + c_off) * plane..][..pc * plane];
                        pg[b * pc * plane..(b + 1) * pc * plane].copy_from_slice(src);
                    }
                    p.accumulate_grad(&pg);
                }
            }),
        ))
    }

    /// View of channels [start, start+len) as a new tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let [n, c, h, w] = self.shape();
        if start + len > c {
            return Err(TensorError::ShapeMismatch {
                op: "narrow_channels",
                detail: format!("channel range {start}..{} out of 0..{c}", start + len),
            });
        }
        let plane = h * w;
        let mut data = vec![0.0f32; n * len * plane];
        {
            let d = self.data();
            for b in 0..n {
                let src = &d[(b * c + start) * plane..][..len * plane];
                data[b * len * plane..(b + 1) * len * plane].copy_from_slice(src);
            }
        }
        Ok(Tensor::from_op(
            [n, len, h, w],
            data,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let mut pg = vec![0.0f32; parents[0].numel()];
                for b in 0..n {
                    let dst = &mut pg[(b * c + start) * plane..][..len * plane];
                    dst.copy_from_slice(&gout[b * len * plane..(b + 1) * len * plane]);
                }
                parents[0].accumulate_grad(&pg);
            }),
        ))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Uniform sample on [-1/2, 1/2) from the counter-based generator.
pub fn uniform_noise(seed: u64, tensor_id: u64, index: u64) -> f32 {
    let key = splitmix64(seed ^ tensor_id.wrapping_mul(0xA24BAED4963EE407))
        ^ index.wrapping_mul(0x9FB21C651E98DF25);
    let z = splitmix64(key);
    // Bin centers (m + 1/2)/2^24 keep the support strictly inside (-1/2, 1/2).
    let m = (z >> 40) as f64;
    (((m + 0.5) / (1u64 << 24) as f64) - 0.5) as f32
}
