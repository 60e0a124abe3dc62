use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    /// Back-propagates from this scalar, accumulating `d self / d leaf` into
    /// every leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.is_tracked() {
            return Err(Error::Contract(
                "loss is not connected to any tensor that requires a gradient".into(),
            ));
        }
        if self.is_leaf() {
            self.accumulate_grad(&[1.0]);
            return Ok(());
        }

        let order = topo_order(self);
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g_out) = pending.remove(&t.key()) else {
                continue;
            };
            let node = t.node().expect("topological order only holds interior nodes");
            let needs: Vec<bool> = node.inputs.iter().map(Tensor::is_tracked).collect();
            let out = t.data();
            let grads = (node.backward)(&g_out, &out, &node.inputs, &needs);
            drop(out);
            debug_assert_eq!(grads.len(), node.inputs.len(), "op {}", node.op);

            for ((input, g), need) in node.inputs.iter().zip(grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel(), "op {} grad size", node.op);
                if input.is_leaf() {
                    input.accumulate_grad(&g);
                } else {
                    match pending.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(input.key(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Interior nodes reachable from `root`, inputs before consumers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    // (tensor, children already pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.key()) {
            continue;
        }
        let Some(node) = t.node() else { continue };
        let inputs: Vec<Tensor> = node
            .inputs
            .iter()
            .filter(|i| i.is_tracked() && !i.is_leaf() && !visited.contains(&i.key()))
            .cloned()
            .collect();
        stack.push((t, true));
        for i in inputs {
            stack.push((i, false));
        }
    }
    order
}
