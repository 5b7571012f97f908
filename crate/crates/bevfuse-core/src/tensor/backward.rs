//! The reverse sweep.
//!
//! Tensor ids increase monotonically with creation and every op's output is
//! created after its inputs, so descending-id order is a reverse topological
//! order of the graph. The sweep keeps a per-call flow buffer per node
//! (separate from the persistent `grad` field) so that repeated `backward`
//! calls accumulate exactly — calling twice on the same graph doubles every
//! gradient, as the optimizer-facing contract requires.

use std::collections::HashMap;

use super::{BackwardArgs, Result, Tensor, TensorError};
use crate::scalar::Scalar;

pub(super) fn run<S: Scalar>(loss: &Tensor<S>) -> Result<()> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.requires_grad() {
        return Err(TensorError::NoGrad);
    }

    // Collect every gradient-carrying node reachable from the loss.
    let mut nodes: Vec<Tensor<S>> = Vec::new();
    let mut seen: HashMap<u64, ()> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(node) = stack.pop() {
        if seen.insert(node.id(), ()).is_some() {
            continue;
        }
        for parent in node.parents() {
            if parent.requires_grad() {
                stack.push(parent.clone());
            }
        }
        nodes.push(node);
    }
    nodes.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut flows: HashMap<u64, Vec<S>> = HashMap::new();
    flows.insert(loss.id(), vec![S::one()]);

    for node in &nodes {
        let Some(flow) = flows.remove(&node.id()) else {
            continue; // not actually on a path from the loss
        };
        node.accumulate_grad(&flow);
        let Some(backward) = node.backward_fn() else {
            continue; // leaf
        };
        let out = node.data();
        let args = BackwardArgs {
            grad_out: &flow,
            parents: node.parents(),
            out: &out,
        };
        let contributions = backward(&args);
        drop(out);
        debug_assert_eq!(contributions.len(), node.parents().len());
        for (parent, contribution) in node.parents().iter().zip(contributions) {
            let Some(contribution) = contribution else {
                continue;
            };
            if !parent.requires_grad() {
                continue;
            }
            match flows.get_mut(&parent.id()) {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += *c;
                    }
                }
                None => {
                    flows.insert(parent.id(), contribution);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tensor;

    /// Diamond-shaped graph: both paths must contribute to the shared leaf.
    #[test]
    fn diamond_accumulates_both_paths() {
        let x = Tensor::leaf(&[2], vec![1.0f64, 2.0]).unwrap();
        let a = x.scale(2.0).unwrap(); // 2x
        let b = x.scale(3.0).unwrap(); // 3x
        let y = a.add(&b).unwrap().sum_all().unwrap(); // sum(5x)
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn repeated_backward_doubles() {
        let x = Tensor::leaf(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        let g1 = x.grad().unwrap();
        y.backward().unwrap();
        let g2 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_needs_scalar_and_grad() {
        let x = Tensor::leaf(&[2], vec![1.0f64, 2.0]).unwrap();
        assert!(x.backward().is_err()); // not scalar
        let c = Tensor::scalar(4.0f64);
        assert!(c.backward().is_err()); // no grad path
    }
}
