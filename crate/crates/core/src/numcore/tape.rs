//! Reverse-mode autodiff on a Wengert list.
//!
//! The tape is an arena: every op appends one node, and [`Tape::backward`]
//! walks the list once in reverse. Adjoints accumulate in node order, so
//! repeated runs over identical inputs are bit-identical.

use super::kernels::{self, AttentionSaved};
use super::tensor::{Real, Tensor};
use super::{NumError, Result};

/// Handle to a tape node. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// Multi-head causal attention configuration.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub rope_base: f64,
}

enum Op<R: Real> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, R),
    Silu(usize),
    Reshape(usize),
    Transpose(usize),
    SpaceToDepth(usize, usize),
    DepthToSpace(usize, usize),
    /// `x @ w + b` with `b` broadcast over rows.
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    /// `a @ b^T`; used for the tied output head.
    MatmulBt(usize, usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv: Vec<R>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        spec: AttentionSpec,
        positions: Vec<usize>,
        saved: AttentionSaved<R>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Tensor<R>,
        active: usize,
    },
    /// `mean((x - target)^2)` against a constant target.
    MseConst {
        x: usize,
        target: Tensor<R>,
    },
    /// Forward value is replaced, gradient passes through unchanged
    /// (straight-through estimator).
    Passthrough(usize),
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
}

/// Per-variable adjoints produced by [`Tape::backward`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. `v`, if `v` participated.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { id }
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.id].value
    }

    fn require_same_shape(&self, a: Var, b: Var, context: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumError::DimensionMismatch {
                context: context.into(),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.id, b.id)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let v = self.value(x).map(|t| t * c);
        self.push(v, Op::Scale(x.id, c))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::silu);
        self.push(v, Op::Silu(x.id))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x.id)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = kernels::transpose2d(self.value(x))?;
        Ok(self.push(v, Op::Transpose(x.id)))
    }

    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = kernels::space_to_depth(self.value(x), r)?;
        Ok(self.push(v, Op::SpaceToDepth(x.id, r)))
    }

    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = kernels::depth_to_space(self.value(x), r)?;
        Ok(self.push(v, Op::DepthToSpace(x.id, r)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut v = kernels::matmul(self.value(x), self.value(w))?;
        if let Some(bias) = b {
            let (m, n) = v.dims2()?;
            let bt = self.value(bias);
            if bt.shape() != [n] {
                return Err(NumError::DimensionMismatch {
                    context: "linear bias".into(),
                    lhs: vec![m, n],
                    rhs: bt.shape().to_vec(),
                });
            }
            let bd = bt.data().to_vec();
            let vd = v.data_mut();
            for i in 0..m {
                for j in 0..n {
                    vd[i * n + j] = vd[i * n + j] + bd[j];
                }
            }
        }
        Ok(self.push(
            v,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|bv| bv.id),
            },
        ))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul_a_bt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatmulBt(a.id, b.id)))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = kernels::gather_rows(self.value(table), ids)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table: table.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: R) -> Result<Var> {
        let (v, inv) = kernels::rms_norm_fwd(self.value(x), self.value(gain), eps)?;
        Ok(self.push(
            v,
            Op::RmsNorm {
                x: x.id,
                gain: gain.id,
                inv,
            },
        ))
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        positions: &[usize],
    ) -> Result<Var> {
        let (out, saved) = kernels::attention_fwd(
            self.value(q),
            self.value(k),
            self.value(v),
            spec.heads,
            positions,
            spec.rope_base,
        )?;
        Ok(self.push(
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                spec: spec.clone(),
                positions: positions.to_vec(),
                saved,
            },
        ))
    }

    /// Mean next-token cross entropy; positions whose target equals
    /// `ignore_id` contribute nothing. All-ignored input yields loss 0
    /// with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let (loss, probs, active) =
            kernels::cross_entropy_fwd(self.value(logits), targets, ignore_id)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                active,
            },
        ))
    }

    /// `mean((x - target)^2)` with `target` held constant.
    pub fn mse_const(&mut self, x: Var, target: &Tensor<R>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(NumError::DimensionMismatch {
                context: "mse_const".into(),
                lhs: xv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = R::from_f64(xv.numel() as f64);
        let mut acc = R::zero();
        for (a, b) in xv.data().iter().zip(target.data()) {
            let d = *a - *b;
            acc = acc + d * d;
        }
        Ok(self.push(
            Tensor::scalar(acc / n),
            Op::MseConst {
                x: x.id,
                target: target.clone(),
            },
        ))
    }

    /// Straight-through: forward takes `value`, backward passes the
    /// adjoint to `x` unchanged. Shapes must match.
    pub fn passthrough(&mut self, x: Var, value: Tensor<R>) -> Result<Var> {
        if self.value(x).shape() != value.shape() {
            return Err(NumError::DimensionMismatch {
                context: "passthrough".into(),
                lhs: self.value(x).shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        Ok(self.push(value, Op::Passthrough(x.id)))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(self.value(loss).shape(), vec![R::one()])?);
        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[*b].value, |gv, bv| gv * bv)?;
                    let gb = g.zip_map(&self.nodes[*a].value, |gv, av| gv * av)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::Silu(x) => {
                    let gx = g.zip_map(&self.nodes[*x].value, |gv, xv| {
                        gv * kernels::silu_grad(xv)
                    })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.nodes[*x].value.shape())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, kernels::transpose2d(&g)?);
                }
                Op::SpaceToDepth(x, r) => {
                    accumulate(&mut grads, *x, kernels::depth_to_space(&g, *r)?);
                }
                Op::DepthToSpace(x, r) => {
                    accumulate(&mut grads, *x, kernels::space_to_depth(&g, *r)?);
                }
                Op::Linear { x, w, b } => {
                    let gx = kernels::matmul_a_bt(&g, &self.nodes[*w].value)?;
                    let gw = kernels::matmul_at_b(&self.nodes[*x].value, &g)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let (m, n) = g.dims2()?;
                        let mut gb = Tensor::zeros(&[n]);
                        let gd = g.data();
                        let gbd = gb.data_mut();
                        for i in 0..m {
                            for j in 0..n {
                                gbd[j] = gbd[j] + gd[i * n + j];
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatmulBt(a, b) => {
                    // out = a b^T : ga = g b ; gb = g^T a
                    let ga = kernels::matmul(&g, &self.nodes[*b].value)?;
                    let gb = kernels::matmul_at_b(&g, &self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::GatherRows { table, ids } => {
                    let tv = &self.nodes[*table].value;
                    let (_, d) = tv.dims2()?;
                    let mut gt = Tensor::zeros(tv.shape());
                    let gd = g.data();
                    let gtd = gt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gtd[id * d + c] = gtd[id * d + c] + gd[r * d + c];
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::RmsNorm { x, gain, inv } => {
                    let (gx, gg) = rms_norm_bwd(
                        &self.nodes[*x].value,
                        &self.nodes[*gain].value,
                        inv,
                        &g,
                    )?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    positions,
                    saved,
                } => {
                    let (gq, gk, gv) = kernels::attention_bwd(
                        saved,
                        &self.nodes[*v].value,
                        positions,
                        spec.rope_base,
                        &g,
                    );
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore_id,
                    probs,
                    active,
                } => {
                    let gl = cross_entropy_bwd(probs, targets, *ignore_id, *active, g.item())?;
                    accumulate(&mut grads, *logits, gl);
                }
                Op::MseConst { x, target } => {
                    let gscale = g.item() * R::from_f64(2.0 / target.numel() as f64);
                    let gx = self.nodes[*x]
                        .value
                        .zip_map(target, |xv, tv| (xv - tv) * gscale)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Passthrough(x) => {
                    accumulate(&mut grads, *x, g);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], id: usize, g: Tensor<R>) {
    match &mut grads[id] {
        Some(acc) => {
            let ad = acc.data_mut();
            let gd = g.data();
            for i in 0..ad.len() {
                ad[i] = ad[i] + gd[i];
            }
        }
        slot => *slot = Some(g),
    }
}

/// y_c = x_c * inv * gain_c with inv = 1/sqrt(mean(x^2)+eps) per slice.
/// dx_c = inv * (g_c*gain_c - x_c * inv^2 / D * sum_j(g_j*gain_j*x_j))
fn rms_norm_bwd<R: Real>(
    x: &Tensor<R>,
    gain: &Tensor<R>,
    inv: &[R],
    g: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let d = *x.shape().last().expect("checked in forward");
    let rows = x.numel() / d;
    let xd = x.data();
    let gaind = gain.data();
    let gd = g.data();
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = Tensor::zeros(gain.shape());
    let gxd = gx.data_mut();
    let ggd = gg.data_mut();
    let dr = R::from_f64(d as f64);
    for r in 0..rows {
        let xs = &xd[r * d..(r + 1) * d];
        let gs = &gd[r * d..(r + 1) * d];
        let inv_r = inv[r];
        let mut dot = R::zero();
        for c in 0..d {
            dot = dot + gs[c] * gaind[c] * xs[c];
            ggd[c] = ggd[c] + gs[c] * xs[c] * inv_r;
        }
        let k = inv_r * inv_r * inv_r / dr * dot;
        for c in 0..d {
            gxd[r * d + c] = inv_r * gs[c] * gaind[c] - xs[c] * k;
        }
    }
    Ok((gx, gg))
}

fn cross_entropy_bwd<R: Real>(
    probs: &Tensor<R>,
    targets: &[usize],
    ignore_id: usize,
    active: usize,
    g: R,
) -> Result<Tensor<R>> {
    let (s, v) = probs.dims2()?;
    let mut gl = Tensor::zeros(&[s, v]);
    if active == 0 {
        return Ok(gl);
    }
    let scale = g / R::from_f64(active as f64);
    let pd = probs.data();
    let gld = gl.data_mut();
    for r in 0..s {
        if targets[r] == ignore_id {
            continue;
        }
        for c in 0..v {
            gld[r * v + c] = pd[r * v + c] * scale;
        }
        gld[r * v + targets[r]] = gld[r * v + targets[r]] - scale;
    }
    Ok(gl)
}
