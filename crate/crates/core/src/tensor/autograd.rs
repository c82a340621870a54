use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{contract_err, Result};

impl Tensor {
    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Gradients are written into the `grad` buffers of the leaf tensors that
    /// require them. Calling `backward` again without [`Tensor::zero_grad`]
    /// adds to the existing buffers. A loss that does not depend on any
    /// tracked leaf is a no-op.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = topo_order(self);
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let parent_grads = (node.backward)(t.data(), &g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad size from {}", node.op);
                        match pending.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the tracked subgraph rooted at `root` (parents first).
/// Iterative so deep graphs cannot overflow the stack.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((t, child)) = stack.pop() {
        let parents = t.0.node.as_ref().map(|n| n.parents.as_slice()).unwrap_or(&[]);
        if child < parents.len() {
            let next = parents[child].clone();
            stack.push((t, child + 1));
            if next.requires_grad() && visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}
