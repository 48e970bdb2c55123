//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records one forward computation as a flat arena of nodes; every
//! value is an `ndarray::Array2<f64>` (vectors are `n x 1` or `1 x n`, scalars
//! `1 x 1`). [`Tape::backward`] walks the arena in reverse and accumulates
//! gradients for every node, from which parameter gradients are extracted by
//! name. Domain-specific operations (rendering, chamfer, pose extraction)
//! plug in through [`Tape::custom`] with hand-written backward closures.

mod custom;
mod optim;
mod params;

pub use custom::{chamfer_op, rodrigues_points_op, rotate_pairs_op, svd_rotation_op};
pub(crate) use custom::rodrigues_u;
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{read_checkpoint, write_checkpoint, Checkpoint, ParamSet};

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Array2<f64>, &[&Array2<f64>], &Array2<f64>) -> Vec<Array2<f64>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Registered (parameter name, node) pairs for gradient extraction.
    param_vars: Vec<(String, usize)>,
}

/// Gradients produced by [`Tape::backward`], indexable by [`Var`] or by
/// registered parameter name.
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
    named: Vec<(String, usize)>,
}

impl Grads {
    pub fn of(&self, var: Var) -> Option<&Array2<f64>> {
        self.by_node[var.0].as_ref()
    }

    /// Gradient for a registered parameter; zero-filled gradients are
    /// returned as `None` only when the parameter never influenced the loss.
    pub fn of_param(&self, name: &str) -> Option<&Array2<f64>> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, idx)| self.by_node[*idx].as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, parents, backward });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant/input leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// Inserts a parameter leaf registered under `name` for gradient lookup.
    /// Repeated requests for the same name return the original node, so
    /// weight-shared uses accumulate into one gradient.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Var {
        if let Some((_, idx)) = self.param_vars.iter().find(|(n, _)| n == name) {
            return Var(*idx);
        }
        let value = params
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from set"))
            .clone();
        let var = self.push(value, vec![], None);
        self.param_vars.push((name.to_string(), var.0));
        var
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        let s = self.nodes[var.0].value.dim();
        (s.0, s.1)
    }

    /// Custom operation with a caller-supplied backward closure. The closure
    /// receives (output gradient, parent values, output value) and must return
    /// one gradient per parent, each matching that parent's shape.
    pub fn custom(&mut self, parents: &[Var], value: Array2<f64>, backward: BackFn) -> Var {
        self.push(value, parents.iter().map(|v| v.0).collect(), Some(backward))
    }

    // ── Elementwise arithmetic ───────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), -g])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _| vec![g * p[1], g * p[0]])),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _| {
                let inv = p[1].mapv(|x| 1.0 / x);
                vec![g * &inv, -(g * p[0]) * &inv * &inv]
            })),
        )
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![g * c])),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, vec![a.0], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    // ── Broadcasts ───────────────────────────────────────────────────────

    /// `a (n x c) + bias (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[bias.0].value;
        self.push(
            value,
            vec![a.0, bias.0],
            Some(Box::new(|g, _, _| {
                let bias_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![g.clone(), bias_grad]
            })),
        )
    }

    /// `a (n x c) * col (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[col.0].value;
        self.push(
            value,
            vec![a.0, col.0],
            Some(Box::new(|g, p, _| {
                let a_grad = g * p[1];
                let col_grad = (g * p[0]).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![a_grad, col_grad]
            })),
        )
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Var {
        let r = &self.nodes[row.0].value;
        let mut value = Array2::zeros((n, r.dim().1));
        for mut out_row in value.rows_mut() {
            out_row.assign(&r.row(0));
        }
        self.push(
            value,
            vec![row.0],
            Some(Box::new(|g, _, _| vec![g.sum_axis(Axis(0)).insert_axis(Axis(0))])),
        )
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _| vec![g.dot(&p[1].t()), p[0].t().dot(g)])),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, _| vec![g.t().to_owned()])),
        )
    }

    // ── Nonlinearities ───────────────────────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, p, _| {
                vec![g * &p[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, y| vec![g * &(y * &y.mapv(|s| 1.0 - s))])),
        )
    }

    /// Elementwise `sqrt(x + eps)`; the offset keeps the gradient bounded at
    /// zero, making it suitable for smooth vector norms.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| (x + eps).sqrt());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, y| vec![g * &y.mapv(|s| 0.5 / s)])),
        )
    }

    /// Row-wise softmax with the usual max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, y| {
                let mut out = g * y;
                for (mut orow, yrow) in out.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = orow.sum();
                    for (o, yv) in orow.iter_mut().zip(yrow.iter()) {
                        *o -= dot * yv;
                    }
                }
                vec![out]
            })),
        )
    }

    /// Row-wise layer normalization with learned gain/bias (`1 x c` each).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let gamma_v = &self.nodes[gamma.0].value;
        let beta_v = &self.nodes[beta.0].value;
        let c = x.dim().1 as f64;
        let mean = x.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let normed = &centered * &inv_std;
        let value = &normed * gamma_v + beta_v;
        let normed_cache = normed.clone();
        let inv_std_cache = inv_std.clone();
        self.push(
            value,
            vec![a.0, gamma.0, beta.0],
            Some(Box::new(move |g, p, _| {
                let gamma_v = p[1];
                let gn = g * gamma_v; // dL/d normed
                // Standard layer-norm backward over each row.
                let sum_gn = gn.sum_axis(Axis(1)).insert_axis(Axis(1));
                let sum_gn_n = (&gn * &normed_cache).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = (&gn - &(sum_gn / c) - &(&normed_cache * &(sum_gn_n / c))) * &inv_std_cache;
                let dgamma = (g * &normed_cache).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![dx, dgamma, dbeta]
            })),
        )
    }

    // ── Shape plumbing ───────────────────────────────────────────────────

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        let views: Vec<_> = vars.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("column concat shape mismatch");
        let widths: Vec<usize> = vars.iter().map(|v| self.nodes[v.0].value.dim().1).collect();
        self.push(
            value,
            vars.iter().map(|v| v.0).collect(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(widths.len());
                let mut start = 0;
                for w in &widths {
                    out.push(g.slice(ndarray::s![.., start..start + w]).to_owned());
                    start += w;
                }
                out
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.nodes[a.0].value.slice(ndarray::s![.., start..end]).to_owned();
        let full = self.nodes[a.0].value.dim();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut out = Array2::zeros(full);
                out.slice_mut(ndarray::s![.., start..end]).assign(g);
                vec![out]
            })),
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let src = &self.nodes[a.0].value;
        let mut value = Array2::zeros((indices.len(), src.dim().1));
        for (k, &i) in indices.iter().enumerate() {
            value.row_mut(k).assign(&src.row(i));
        }
        let full = src.dim();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut out = Array2::zeros(full);
                for (k, &i) in indices.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &g.row(k);
                }
                vec![out]
            })),
        )
    }

    /// Gathers scattered entries `(row, col)` into a `k x 1` column.
    pub fn gather_entries(&mut self, a: Var, entries: Vec<(usize, usize)>) -> Var {
        let src = &self.nodes[a.0].value;
        let mut value = Array2::zeros((entries.len(), 1));
        for (k, &(r, c)) in entries.iter().enumerate() {
            value[(k, 0)] = src[(r, c)];
        }
        let full = src.dim();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut out = Array2::zeros(full);
                for (k, &(r, c)) in entries.iter().enumerate() {
                    out[(r, c)] += g[(k, 0)];
                }
                vec![out]
            })),
        )
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let shape = self.nodes[a.0].value.dim();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![Array2::from_elem(shape, g[(0, 0)])])),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `(n x c) -> (1 x c)`.
    pub fn mean_over_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.dim().0 as f64;
        let value = x.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, p, _| {
                let rows = p[0].dim().0;
                let mut out = Array2::zeros(p[0].dim());
                for mut row in out.rows_mut() {
                    row.assign(&(&g.row(0) / n));
                }
                let _ = rows;
                vec![out]
            })),
        )
    }

    /// Row sums: `(n x c) -> (n x 1)`.
    pub fn sum_over_cols(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let mut out = Array2::zeros(p[0].dim());
                for (mut row, gv) in out.rows_mut().into_iter().zip(g.column(0).iter()) {
                    row.fill(*gv);
                }
                vec![out]
            })),
        )
    }

    // ── Backward pass ────────────────────────────────────────────────────

    /// Accumulates gradients of the scalar `loss` (must be `1 x 1`) with
    /// respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&Array2<f64>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = back(&g, &parent_vals, &node.value);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.dim(),
                        self.nodes[p].value.dim(),
                        "gradient shape mismatch into node {p}"
                    );
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Grads { by_node: grads, named: self.param_vars.clone() }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite-difference check of `build` (which must reconstruct the
    /// same scalar loss from leaf inputs) against the tape gradient.
    pub fn fd_check(inputs: &[Array2<f64>], build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .of(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut bumped: Vec<Array2<f64>> = inputs.to_vec();
                    bumped[k].as_slice_mut().unwrap()[idx] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = bumped.iter().map(|x| t.leaf(x.clone())).collect();
                    let l = build(&mut t, &vs);
                    t.value(l)[(0, 0)]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let got = analytic.as_slice().unwrap()[idx];
                assert!(
                    (fd - got).abs() <= tol * (1.0 + fd.abs()),
                    "input {k} entry {idx}: fd {fd} vs analytic {got}"
                );
            }
        }
    }

    pub fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }
}
