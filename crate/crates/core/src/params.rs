//! Helpers shared by the parameter records of every block.
//!
//! Parameter records are generic over their leaf type: `T = Tensor` for
//! stored weights, `T = Var` once bound to a tape. `try_map` walks the leaves
//! in a fixed order with dotted names, which is what binding, gradient
//! extraction and checkpointing are built on.

use std::convert::Infallible;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Uniform `[0, 1)` source.
pub type UniformSource<'a> = &'a mut dyn FnMut() -> f64;

/// Kaiming-uniform (fan-in, ReLU gain) init for an `O×C×k×k` weight:
/// `U(−b, b)` with `b = √(6 / (C·k·k))`.
pub fn kaiming_uniform(shape: [usize; 4], rng: UniformSource<'_>) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| (2.0 * rng() - 1.0) * bound)
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Leaf-wise traversal of a parameter record.
pub trait ParamTree {
    type Leaf;
    type With<U>: ParamTree<Leaf = U>;

    #[allow(clippy::type_complexity)]
    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Self::Leaf) -> Result<U, E>,
    ) -> Result<Self::With<U>, E>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &Self::Leaf) -> U) -> Self::With<U> {
        let r: Result<_, Infallible> = self.try_map(prefix, &mut |n, t| Ok(f(n, t)));
        match r {
            Ok(v) => v,
            Err(e) => match e {},
        }
    }

    /// `(name, leaf)` pairs in traversal order.
    fn named(&self, prefix: &str) -> Vec<(String, &Self::Leaf)>
    where
        Self: Sized,
    {
        let mut names = Vec::new();
        self.map(prefix, &mut |n, _| names.push(n.to_string()));
        let mut leaves: Vec<&Self::Leaf> = Vec::new();
        self.visit(&mut |l| leaves.push(l));
        names.into_iter().zip(leaves).collect()
    }

    /// Visits leaves by reference in traversal order.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Self::Leaf));
}

/// Records every tensor of a stored record as a trainable tape leaf.
pub fn bind<P: ParamTree<Leaf = Tensor>>(p: &P, tape: &mut Tape) -> P::With<Var> {
    p.map("", &mut |_, t| tape.param(t.clone()))
}

/// Records every tensor as a constant (no gradient).
pub fn bind_frozen<P: ParamTree<Leaf = Tensor>>(p: &P, tape: &mut Tape) -> P::With<Var> {
    p.map("", &mut |_, t| tape.constant(t.clone()))
}

/// Collects gradients of a bound record after `tape.backward`.
pub fn grads<P: ParamTree<Leaf = Var>>(bound: &P, tape: &Tape) -> P::With<Tensor> {
    bound.map("", &mut |_, &v| tape.grad_or_zeros(v))
}

/// Number of scalar parameters.
pub fn count<P: ParamTree<Leaf = Tensor>>(p: &P) -> usize {
    let mut n = 0;
    p.visit(&mut |t| n += t.len());
    n
}

/// Implements [`ParamTree`] for a struct generic over its leaf type `T`,
/// given its tensor fields, nested sub-records and plain copied fields.
#[macro_export]
macro_rules! param_tree {
    (
        $name:ident {
            leaves: [$($leaf:ident),* $(,)?],
            optional: [$($opt:ident),* $(,)?],
            nested: [$($sub:ident),* $(,)?],
            plain: [$($plain:ident),* $(,)?] $(,)?
        }
    ) => {
        impl<T> $crate::params::ParamTree for $name<T> {
            type Leaf = T;
            type With<U> = $name<U>;

            fn try_map<U, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name {
                    $($leaf: f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf)?,)*
                    $($opt: match &self.$opt {
                        Some(v) => Some(f(&$crate::params::join(prefix, stringify!($opt)), v)?),
                        None => None,
                    },)*
                    $($sub: self.$sub.try_map(&$crate::params::join(prefix, stringify!($sub)), f)?,)*
                    $($plain: self.$plain.clone(),)*
                })
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
                $(f(&self.$leaf);)*
                $(if let Some(v) = &self.$opt { f(v); })*
                $(self.$sub.visit(f);)*
            }
        }
    };
}
