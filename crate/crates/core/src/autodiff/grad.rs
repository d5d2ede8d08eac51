use std::collections::{HashMap, HashSet};

use crate::autodiff::tensor::{set_grad_enabled, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Reverse-mode gradient of a single-element `output` with respect to each
/// tensor in `wrt`.
///
/// With `create_graph`, the backward pass itself is recorded, so the returned
/// gradients can be differentiated again. Otherwise they are constants.
/// Only nodes that lie on a path to some `wrt` tensor are visited; each is
/// visited once, in reverse creation order, and contributions from multiple
/// children are summed in that fixed order.
pub fn grad<T: Real>(
    output: &Tensor<T>,
    wrt: &[&Tensor<T>],
    create_graph: bool,
) -> Result<Vec<Tensor<T>>> {
    if output.numel() != 1 {
        return Err(Error::NotScalar(output.shape().to_vec()));
    }
    if wrt.iter().any(|t| !t.requires_grad()) {
        return Err(Error::GradDisabled);
    }
    if !output.requires_grad() {
        return Err(Error::Unreachable);
    }

    // collect the tracked subgraph
    let mut nodes: HashMap<u64, Tensor<T>> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(t) = stack.pop() {
        if nodes.contains_key(&t.id()) {
            continue;
        }
        if let Some(op) = t.op() {
            for p in op.parents() {
                if p.requires_grad() && !nodes.contains_key(&p.id()) {
                    stack.push(p.clone());
                }
            }
        }
        nodes.insert(t.id(), t);
    }
    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable();

    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    if targets.iter().any(|id| !nodes.contains_key(id)) {
        return Err(Error::Unreachable);
    }

    // a node is relevant when some target is among its ancestors (or itself)
    let mut relevant: HashSet<u64> = HashSet::new();
    for &id in &order {
        let t = &nodes[&id];
        let hit = targets.contains(&id)
            || t.op().is_some_and(|op| {
                op.parents().iter().any(|p| relevant.contains(&p.id()))
            });
        if hit {
            relevant.insert(id);
        }
    }

    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    grads.insert(output.id(), Tensor::ones(output.shape())?);

    for &id in order.iter().rev() {
        if !relevant.contains(&id) {
            continue;
        }
        let node = &nodes[&id];
        let Some(op) = node.op() else { continue };
        let g = if targets.contains(&id) {
            grads.get(&id).cloned()
        } else {
            grads.remove(&id)
        };
        let Some(g) = g else { continue };
        let parents = op.parents();
        let parent_grads = op.backward(&g)?;
        for (p, pg) in parents.into_iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !relevant.contains(&p.id()) {
                continue;
            }
            let pg = if pg.shape() == p.shape() {
                pg
            } else {
                pg.reshape(p.shape())?
            };
            let acc = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }

    wrt.iter()
        .map(|t| match grads.get(&t.id()) {
            Some(g) if create_graph => Ok(g.clone()),
            Some(g) => Ok(g.detach()),
            None => Tensor::zeros(t.shape()),
        })
        .collect()
}
