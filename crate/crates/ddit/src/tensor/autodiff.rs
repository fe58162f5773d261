//! Reverse-mode differentiation over the `Arc` graph.
//!
//! [`backward`] walks the graph from a scalar root in reverse topological
//! order, accumulating exact gradients for every grad-enabled node. Gradient
//! accumulation order is fixed by the traversal, so repeated runs are bitwise
//! identical. Gradients are checked finite as they are produced.

use super::ops::{mm_nt, mm_tn, permute_swap, ReduceMap};
use super::{Node, Op, TensorValue};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::Arc;

/// Gradient map from a single [`backward`] call. Lookup is by value identity,
/// so gradients from independent graphs never mix.
pub struct Gradients {
    grads: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the root with respect to `t`, if `t` took part in the
    /// graph and is grad-enabled.
    pub fn get(&self, t: &TensorValue) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }
}

/// Reverse-mode gradients of a scalar root with respect to every grad-enabled
/// value in its graph.
pub fn backward(root: &TensorValue) -> Result<Gradients> {
    if root.numel() != 1 {
        return Err(Error::ShapeMismatch {
            op: "backward",
            details: format!("root must be a scalar, got shape {:?}", root.shape()),
        });
    }

    // Iterative post-order DFS over grad-enabled nodes.
    let mut topo: Vec<Arc<Node>> = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    let mut stack: Vec<(Arc<Node>, bool)> = vec![(root.node.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            topo.push(node);
            continue;
        }
        if visited.contains_key(&node.id) || !node.grad_enabled && node.id != root.node.id {
            continue;
        }
        visited.insert(node.id, ());
        stack.push((node.clone(), true));
        for p in node.op.parents() {
            if p.grad_enabled && !visited.contains_key(&p.id) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(root.node.id, vec![1.0]);

    for node in topo.iter().rev() {
        if matches!(node.op, Op::Leaf) {
            continue; // leaf gradients stay in the map for the caller
        }
        // interior gradients are fully consumed here, so take ownership
        let g = match grads.remove(&node.id) {
            Some(g) => g,
            None => continue, // unreachable from root through grad-enabled path
        };
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "backward gradient".to_string(),
            });
        }
        propagate(node, &g, &mut grads)?;
    }

    for g in grads.values() {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "backward gradient".to_string(),
            });
        }
    }

    Ok(Gradients { grads })
}

fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, node: &Arc<Node>, contribution: Vec<f64>) {
    if !node.grad_enabled {
        return;
    }
    let slot = grads
        .entry(node.id)
        .or_insert_with(|| vec![0.0; node.data.len()]);
    for (s, c) in slot.iter_mut().zip(contribution) {
        *s += c;
    }
}

/// Reduces a full-size gradient to a broadcast operand's size (sums when the
/// operand was a scalar).
fn fit(contribution: Vec<f64>, target: &Arc<Node>) -> Vec<f64> {
    if contribution.len() == target.data.len() {
        contribution
    } else {
        vec![contribution.iter().sum()]
    }
}

/// Expands a possibly-scalar operand value at a flat index.
#[inline]
fn at(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

fn propagate(node: &Arc<Node>, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) -> Result<()> {
    match &node.op {
        Op::Leaf => {}

        Op::Add(a, b) => {
            accumulate(grads, a, fit(g.to_vec(), a));
            accumulate(grads, b, fit(g.to_vec(), b));
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, fit(g.to_vec(), a));
            accumulate(grads, b, fit(g.iter().map(|v| -v).collect(), b));
        }
        Op::Mul(a, b) => {
            let ga = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * at(&b.data, i))
                .collect();
            let gb = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * at(&a.data, i))
                .collect();
            accumulate(grads, a, fit(ga, a));
            accumulate(grads, b, fit(gb, b));
        }
        Op::Div(a, b) => {
            let ga = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi / at(&b.data, i))
                .collect();
            let gb = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| {
                    let bv = at(&b.data, i);
                    -gi * at(&a.data, i) / (bv * bv)
                })
                .collect();
            accumulate(grads, a, fit(ga, a));
            accumulate(grads, b, fit(gb, b));
        }
        Op::AddScalar(x) => accumulate(grads, x, g.to_vec()),
        Op::MulScalar(x, c) => accumulate(grads, x, g.iter().map(|v| v * c).collect()),

        Op::AddBias { x, bias } => {
            accumulate(grads, x, g.to_vec());
            if bias.grad_enabled {
                let d = bias.data.len();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    for (s, &v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(grads, bias, gb);
            }
        }

        Op::MatMul { a, b } => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            if a.grad_enabled {
                accumulate(grads, a, mm_nt(g, &b.data, m, n, k));
            }
            if b.grad_enabled {
                accumulate(grads, b, mm_tn(&a.data, g, m, k, n));
            }
        }
        Op::Bmm { a, b } => {
            let (bsz, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let n = b.shape[2];
            if a.grad_enabled {
                let mut ga = vec![0.0; a.data.len()];
                for bi in 0..bsz {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &b.data[bi * k * n..(bi + 1) * k * n];
                    ga[bi * m * k..(bi + 1) * m * k].copy_from_slice(&mm_nt(gb, bb, m, n, k));
                }
                accumulate(grads, a, ga);
            }
            if b.grad_enabled {
                let mut gbv = vec![0.0; b.data.len()];
                for bi in 0..bsz {
                    let gslice = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &a.data[bi * m * k..(bi + 1) * m * k];
                    gbv[bi * k * n..(bi + 1) * k * n].copy_from_slice(&mm_tn(ab, gslice, m, k, n));
                }
                accumulate(grads, b, gbv);
            }
        }

        Op::Transpose { x, ax0, ax1 } => {
            accumulate(grads, x, permute_swap(g, &node.shape, *ax0, *ax1));
        }
        Op::Reshape(x) => accumulate(grads, x, g.to_vec()),

        Op::SumAxes { x, axes, scale } => {
            let mut gx = vec![0.0; x.data.len()];
            ReduceMap::new(&x.shape, axes).for_each(|i, o| gx[i] = g[o] * scale);
            accumulate(grads, x, gx);
        }

        Op::ConcatLast(a, b) => {
            let la = *a.shape.last().unwrap();
            let lb = *b.shape.last().unwrap();
            let rows = a.data.len() / la.max(1);
            if a.grad_enabled {
                let mut ga = Vec::with_capacity(a.data.len());
                for r in 0..rows {
                    ga.extend_from_slice(&g[r * (la + lb)..r * (la + lb) + la]);
                }
                accumulate(grads, a, ga);
            }
            if b.grad_enabled {
                let mut gb = Vec::with_capacity(b.data.len());
                for r in 0..rows {
                    gb.extend_from_slice(&g[r * (la + lb) + la..(r + 1) * (la + lb)]);
                }
                accumulate(grads, b, gb);
            }
        }

        Op::SliceLast { x, start, len } => {
            let d = *x.shape.last().unwrap();
            let rows = x.data.len() / d;
            let mut gx = vec![0.0; x.data.len()];
            for r in 0..rows {
                gx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            accumulate(grads, x, gx);
        }

        Op::IndexSelect0 { x, ids } => {
            let v = x.shape[0];
            let row = x.data.len() / v.max(1);
            let mut gx = vec![0.0; x.data.len()];
            for (r, &id) in ids.iter().enumerate() {
                for (s, &gv) in gx[id * row..(id + 1) * row].iter_mut().zip(&g[r * row..]) {
                    *s += gv;
                }
            }
            accumulate(grads, x, gx);
        }

        Op::SoftmaxLast(x) => {
            let d = *node.shape.last().unwrap();
            let y = &node.data;
            let mut gx = vec![0.0; x.data.len()];
            for r in 0..y.len() / d {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    gx[r * d + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, x, gx);
        }

        Op::Silu(x) => {
            let gx = g
                .iter()
                .zip(&x.data)
                .map(|(&gi, &xi)| {
                    let s = 1.0 / (1.0 + (-xi).exp());
                    gi * s * (1.0 + xi * (1.0 - s))
                })
                .collect();
            accumulate(grads, x, gx);
        }

        Op::GeluTanh(x) => {
            const C: f64 = 0.7978845608028654; // sqrt(2/pi)
            let gx = g
                .iter()
                .zip(&x.data)
                .map(|(&gi, &xi)| {
                    let u = C * (xi + 0.044715 * xi * xi * xi);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
                })
                .collect();
            accumulate(grads, x, gx);
        }

        Op::Sqrt(x) => {
            let gx = g
                .iter()
                .zip(&node.data)
                .map(|(&gi, &yi)| gi / (2.0 * yi))
                .collect();
            accumulate(grads, x, gx);
        }
        Op::Square(x) => {
            let gx = g
                .iter()
                .zip(&x.data)
                .map(|(&gi, &xi)| 2.0 * xi * gi)
                .collect();
            accumulate(grads, x, gx);
        }
        Op::Abs(x) => {
            let gx = g
                .iter()
                .zip(&x.data)
                .map(|(&gi, &xi)| gi * sign(xi))
                .collect();
            accumulate(grads, x, gx);
        }
        Op::ClampMin(x, c) => {
            let gx = g
                .iter()
                .zip(&x.data)
                .map(|(&gi, &xi)| if xi > *c { gi } else { 0.0 })
                .collect();
            accumulate(grads, x, gx);
        }
        Op::MaxAll(x) => {
            let argmax = x
                .data
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                    if v > acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                })
                .0;
            let mut gx = vec![0.0; x.data.len()];
            gx[argmax] = g[0];
            accumulate(grads, x, gx);
        }

        Op::LayerNorm { x, gain, bias, eps } => {
            let d = *x.shape.last().unwrap();
            let rows = x.data.len() / d;
            let gn = &gain.data;
            let mut gx = vec![0.0; x.data.len()];
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            for r in 0..rows {
                let xr = &x.data[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                // G = gain ⊙ g; gx = (G − mean(G) − x̂ · mean(G ⊙ x̂)) / s
                let mut mean_gg = 0.0;
                let mut mean_ggx = 0.0;
                for j in 0..d {
                    let xh = (xr[j] - mean) * inv;
                    let gg = gn[j] * gr[j];
                    mean_gg += gg;
                    mean_ggx += gg * xh;
                    ggain[j] += gr[j] * xh;
                    gbias[j] += gr[j];
                }
                mean_gg /= d as f64;
                mean_ggx /= d as f64;
                for j in 0..d {
                    let xh = (xr[j] - mean) * inv;
                    gx[r * d + j] = (gn[j] * gr[j] - mean_gg - xh * mean_ggx) * inv;
                }
            }
            accumulate(grads, x, gx);
            accumulate(grads, gain, ggain);
            accumulate(grads, bias, gbias);
        }

        Op::L2NormalizeLast { x, eps } => {
            let d = *x.shape.last().unwrap();
            let rows = x.data.len() / d;
            let mut gx = vec![0.0; x.data.len()];
            for r in 0..rows {
                let xr = &x.data[r * d..(r + 1) * d];
                let yr = &node.data[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let norm = xr.iter().map(|&v| v * v).sum::<f64>().sqrt();
                if norm > *eps {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                } else {
                    for j in 0..d {
                        gx[r * d + j] = gr[j] / eps;
                    }
                }
            }
            accumulate(grads, x, gx);
        }

        Op::ExpandTokens { x } => {
            let (n, d) = (x.shape[0], x.shape[1]);
            let t = node.shape[1];
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for tok in 0..t {
                    let src = &g[(i * t + tok) * d..(i * t + tok + 1) * d];
                    for (s, &v) in gx[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *s += v;
                    }
                }
            }
            accumulate(grads, x, gx);
        }
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
