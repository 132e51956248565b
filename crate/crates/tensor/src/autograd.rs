use std::collections::{HashMap, HashSet};

use crate::float::Float;
use crate::tensor::{NoGradGuard, Op, Tensor};

/// Vector-Jacobian products of one recorded op, written with tensor ops so that
/// they are themselves differentiable when the graph is being recorded.
fn vjp<T: Float>(out: &Tensor<T>, op: &Op<T>, g: &Tensor<T>) -> Vec<(Tensor<T>, Tensor<T>)> {
    use Op::*;
    match op {
        Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
        Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
        Mul(a, b) => vec![(a.clone(), g.mul(b)), (b.clone(), g.mul(a))],
        Div(a, b) => vec![(a.clone(), g.div(b)), (b.clone(), g.mul(out).div(b).neg())],
        Neg(a) => vec![(a.clone(), g.neg())],
        Scale(a, s) => vec![(a.clone(), g.scale(*s))],
        Offset(a) => vec![(a.clone(), g.clone())],
        Sqrt(a) => vec![(a.clone(), g.div(out).scale(T::lit(0.5)))],
        Exp(a) => vec![(a.clone(), g.mul(out))],
        Log(a) => vec![(a.clone(), g.div(a))],
        Tanh(a) => {
            let one_minus_sq = out.square().neg().offset(T::one());
            vec![(a.clone(), g.mul(&one_minus_sq))]
        }
        LeakyRelu(a, slope) => vec![(a.clone(), g.mul(&a.leaky_relu_mask(*slope)))],
        Reshape(a) => vec![(a.clone(), g.reshape(a.shape()))],
        BroadcastTo(a) => vec![(a.clone(), g.sum_to(a.shape()))],
        SumTo(a) => vec![(a.clone(), g.broadcast_to(a.shape()))],
        Conv2d(x, w, geom) => vec![
            (x.clone(), Tensor::conv2d_input_grad(g, w, *geom)),
            (w.clone(), Tensor::conv2d_weight_grad(x, g, *geom)),
        ],
        Conv2dInputGrad(go, w, geom) => vec![
            (go.clone(), g.conv2d_geom(w, *geom)),
            (w.clone(), Tensor::conv2d_weight_grad(g, go, *geom)),
        ],
        Conv2dWeightGrad(x, go, geom) => vec![
            (x.clone(), Tensor::conv2d_input_grad(go, g, *geom)),
            (go.clone(), x.conv2d_geom(g, *geom)),
        ],
    }
}

/// Nodes reachable from `root` through tracked ops, in topological order (root last).
fn topo_order<T: Float>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for p in op.parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of `output` (summed over its elements) with respect to `inputs`.
///
/// Inputs the output does not depend on get a zero gradient. With `create_graph`
/// the returned gradients carry a graph of their own and can be differentiated
/// again; otherwise they are constants.
pub fn grad<T: Float>(output: &Tensor<T>, inputs: &[&Tensor<T>], create_graph: bool) -> Vec<Tensor<T>> {
    let _guard = if create_graph { None } else { Some(NoGradGuard::new()) };
    let wanted: HashSet<u64> = inputs.iter().map(|t| t.id()).collect();
    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    if output.requires_grad() {
        let order = topo_order(output);
        grads.insert(output.id(), Tensor::full(output.shape(), T::one()));
        for node in order.iter().rev() {
            let Some(g) = (if wanted.contains(&node.id()) {
                grads.get(&node.id()).cloned()
            } else {
                grads.remove(&node.id())
            }) else {
                continue;
            };
            let Some(op) = &node.0.op else { continue };
            for (parent, pg) in vjp(node, op, &g) {
                if !parent.requires_grad() {
                    continue;
                }
                let merged = match grads.remove(&parent.id()) {
                    Some(existing) => existing.add(&pg),
                    None => pg,
                };
                grads.insert(parent.id(), merged);
            }
        }
    }
    inputs
        .iter()
        .map(|t| {
            grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}
