//! Named traversal of trainable parameters and non-trainable buffers.
//!
//! Every model component exposes its tensors in a fixed order. The optimizer,
//! gradient clipping and checkpoints all work on the flat concatenation in
//! that order.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use std::ops::Range;

pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    /// Running statistics and other state that is saved but not trained.
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &[usize], &[f64])) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut [f64])) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for Array1<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, self.shape(), self.as_slice().expect("contiguous"));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.as_slice_mut().expect("contiguous"));
    }
}

impl Parameters for Array2<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, self.shape(), self.as_slice().expect("standard layout"));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.as_slice_mut().expect("standard layout"));
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit_buffers(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_buffers_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let Some(t) = self {
            t.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(t) = self {
            t.visit_mut(prefix, f);
        }
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let Some(t) = self {
            t.visit_buffers(prefix, f);
        }
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(t) = self {
            t.visit_buffers_mut(prefix, f);
        }
    }
}

/// Implements [`Parameters`] for a struct by visiting the listed fields in order.
macro_rules! parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::model::params::Parameters for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
                $( self.$field.visit(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
                $( self.$field.visit_mut(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
                $( self.$field.visit_buffers(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
                $( self.$field.visit_buffers_mut(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use parameters;

/// Name, shape and flat offset of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

pub fn layout<P: Parameters + ?Sized>(p: &P) -> Vec<ParamInfo> {
    let mut out = Vec::new();
    let mut offset = 0;
    p.visit("", &mut |name, shape, data| {
        out.push(ParamInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
            range: offset..offset + data.len(),
        });
        offset += data.len();
    });
    out
}

pub fn num_params<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, data| n += data.len());
    n
}

pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, data| out.extend_from_slice(data));
    out
}

pub fn load_flat<P: Parameters + ?Sized>(p: &mut P, flat: &[f64]) -> Result<()> {
    let n = num_params(p);
    if n != flat.len() {
        return Err(Error::ShapeMismatch {
            context: "flat parameters",
            expected: vec![n],
            actual: vec![flat.len()],
        });
    }
    let mut offset = 0;
    p.visit_mut("", &mut |_, data| {
        data.copy_from_slice(&flat[offset..offset + data.len()]);
        offset += data.len();
    });
    Ok(())
}

pub fn zero<P: Parameters + ?Sized>(p: &mut P) {
    p.visit_mut("", &mut |_, data| data.fill(0.0));
}

/// `a += b` element-wise over two identically shaped parameter sets.
pub fn accumulate<P: Parameters + ?Sized>(a: &mut P, b: &P) {
    let flat = flatten(b);
    let mut offset = 0;
    a.visit_mut("", &mut |_, data| {
        for (x, y) in data.iter_mut().zip(&flat[offset..]) {
            *x += y;
        }
        offset += data.len();
    });
}
