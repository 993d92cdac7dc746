//! Plain (non-recorded) computational kernels.
//!
//! Every kernel accumulates in a fixed left-to-right order. The tape ops
//! and the inference paths both call these, so full-sequence and
//! incremental (KV-cached) forward passes agree bit-exactly.

use super::tensor::{Real, Tensor};
use super::{NumError, Result};

/// `a[m,k] @ b[k,n] -> [m,n]`
pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(NumError::DimensionMismatch {
            context: "matmul inner extents".into(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for k in 0..ka {
            let aik = ad[i * ka + k];
            let brow = &bd[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// `a^T @ b` where `a[k,m]`, `b[k,n] -> [m,n]`
pub fn matmul_at_b<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (ka, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(NumError::DimensionMismatch {
            context: "matmul_at_b inner extents".into(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for k in 0..ka {
        let arow = &ad[k * m..(k + 1) * m];
        let brow = &bd[k * n..(k + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            let orow = &mut od[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aki * brow[j];
            }
        }
    }
    Ok(out)
}

/// `a @ b^T` where `a[m,k]`, `b[n,k] -> [m,n]`
pub fn matmul_a_bt<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(NumError::DimensionMismatch {
            context: "matmul_a_bt inner extents".into(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &bd[j * kb..(j + 1) * kb];
            let mut acc = R::zero();
            for k in 0..ka {
                acc = acc + arow[k] * brow[k];
            }
            od[i * n + j] = acc;
        }
    }
    Ok(out)
}

pub fn transpose2d<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, n) = x.dims2()?;
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, m]);
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = xd[i * n + j];
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

#[inline]
pub fn silu<R: Real>(x: R) -> R {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigma(x) * (1 + x * (1 - sigma(x)))
#[inline]
pub fn silu_grad<R: Real>(x: R) -> R {
    let s = sigmoid(x);
    s * (R::one() + x * (R::one() - s))
}

/// RMS-normalize each last-axis slice: `x / sqrt(mean(x^2)+eps) * gain`.
/// Returns the output and the per-slice `1/sqrt(mean+eps)` needed by the
/// backward pass.
pub fn rms_norm_fwd<R: Real>(x: &Tensor<R>, gain: &Tensor<R>, eps: R) -> Result<(Tensor<R>, Vec<R>)> {
    let d = *x.shape().last().ok_or_else(|| NumError::Invalid("rms_norm on rank-0".into()))?;
    if gain.shape() != [d] {
        return Err(NumError::DimensionMismatch {
            context: "rms_norm gain".into(),
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let mut out = Tensor::zeros(x.shape());
    let mut inv = Vec::with_capacity(rows);
    let xd = x.data();
    let gd = gain.data();
    let od = out.data_mut();
    let dr = R::from_f64(d as f64);
    for r in 0..rows {
        let xs = &xd[r * d..(r + 1) * d];
        let mut ss = R::zero();
        for &v in xs {
            ss = ss + v * v;
        }
        let inv_r = R::one() / (ss / dr + eps).sqrt();
        inv.push(inv_r);
        let os = &mut od[r * d..(r + 1) * d];
        for c in 0..d {
            os[c] = xs[c] * inv_r * gd[c];
        }
    }
    Ok((out, inv))
}

/// Max-shifted softmax over the last axis.
pub fn softmax_lastdim<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    if !x.all_finite() {
        return Err(NumError::NonFinite("softmax input".into()));
    }
    let d = *x.shape().last().ok_or_else(|| NumError::Invalid("softmax on rank-0".into()))?;
    let rows = x.numel() / d;
    let mut out = x.clone();
    let od = out.data_mut();
    for r in 0..rows {
        softmax_inplace(&mut od[r * d..(r + 1) * d]);
    }
    Ok(out)
}

/// In-place max-shifted softmax of one slice.
pub fn softmax_inplace<R: Real>(row: &mut [R]) {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Next-token cross entropy: mean of `-log softmax(logits)[s, target_s]`
/// over positions whose target is not `ignore_id`. Returns
/// `(loss, probs, active_count)`; probs rows for ignored positions are
/// left zero.
pub fn cross_entropy_fwd<R: Real>(
    logits: &Tensor<R>,
    targets: &[usize],
    ignore_id: usize,
) -> Result<(R, Tensor<R>, usize)> {
    let (s, v) = logits.dims2()?;
    if targets.len() != s {
        return Err(NumError::DimensionMismatch {
            context: "cross_entropy targets".into(),
            lhs: vec![s],
            rhs: vec![targets.len()],
        });
    }
    for &t in targets {
        if t != ignore_id && t >= v {
            return Err(NumError::IndexOutOfRange {
                context: "cross_entropy target".into(),
                index: t,
                extent: v,
            });
        }
    }
    if !logits.all_finite() {
        return Err(NumError::NonFinite("cross_entropy logits".into()));
    }
    let ld = logits.data();
    let mut probs = Tensor::zeros(&[s, v]);
    let pd = probs.data_mut();
    let mut loss = R::zero();
    let mut active = 0usize;
    for r in 0..s {
        if targets[r] == ignore_id {
            continue;
        }
        active += 1;
        let row = &ld[r * v..(r + 1) * v];
        let mut mx = row[0];
        for &x in row.iter() {
            if x > mx {
                mx = x;
            }
        }
        let mut sum = R::zero();
        let prow = &mut pd[r * v..(r + 1) * v];
        for c in 0..v {
            let e = (row[c] - mx).exp();
            prow[c] = e;
            sum = sum + e;
        }
        for c in 0..v {
            prow[c] = prow[c] / sum;
        }
        // -log p[target] = log(sum) - (x[t]-mx)
        loss = loss + sum.ln() - (row[targets[r]] - mx);
    }
    if active > 0 {
        loss = loss / R::from_f64(active as f64);
    }
    Ok((loss, probs, active))
}

/// `C x H x W -> (C*r^2) x H/r x W/r`; channel-major then (dy, dx) offset.
pub fn space_to_depth<R: Real>(x: &Tensor<R>, r: usize) -> Result<Tensor<R>> {
    let (c, h, w) = x.dims3()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(NumError::DimensionMismatch {
            context: format!("space_to_depth factor {r} must divide spatial extents"),
            lhs: vec![h, w],
            rhs: vec![r, r],
        });
    }
    let (ho, wo) = (h / r, w / r);
    let mut out = Tensor::zeros(&[c * r * r, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for cc in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let co = cc * r * r + dy * r + dx;
                for y in 0..ho {
                    for xcol in 0..wo {
                        od[(co * ho + y) * wo + xcol] =
                            xd[(cc * h + y * r + dy) * w + xcol * r + dx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space<R: Real>(x: &Tensor<R>, r: usize) -> Result<Tensor<R>> {
    let (cr2, ho, wo) = x.dims3()?;
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(NumError::DimensionMismatch {
            context: format!("depth_to_space factor {r}^2 must divide channels"),
            lhs: vec![cr2],
            rhs: vec![r * r],
        });
    }
    let c = cr2 / (r * r);
    let (h, w) = (ho * r, wo * r);
    let mut out = Tensor::zeros(&[c, h, w]);
    let xd = x.data();
    let od = out.data_mut();
    for cc in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let ci = cc * r * r + dy * r + dx;
                for y in 0..ho {
                    for xcol in 0..wo {
                        od[(cc * h + y * r + dy) * w + xcol * r + dx] =
                            xd[(ci * ho + y) * wo + xcol];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Copy rows of `table[V x D]` at `ids`, yielding `[len x D]`.
pub fn gather_rows<R: Real>(table: &Tensor<R>, ids: &[usize]) -> Result<Tensor<R>> {
    let (v, d) = table.dims2()?;
    let mut out = Tensor::zeros(&[ids.len(), d]);
    let td = table.data();
    let od = out.data_mut();
    for (r, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(NumError::IndexOutOfRange {
                context: "gather_rows id".into(),
                index: id,
                extent: v,
            });
        }
        od[r * d..(r + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rotary position embedding
// ---------------------------------------------------------------------------

/// Rotate consecutive coordinate pairs of one head vector in place.
/// Pair `i` turns by `pos * base^(-2i/d_head)`; angles are evaluated in
/// f64 so both precisions share the same rotation constants.
pub fn rope_rotate_head<R: Real>(head: &mut [R], pos: usize, base: f64, inverse: bool) {
    let d = head.len();
    debug_assert!(d % 2 == 0);
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in 0..d / 2 {
        let theta = sign * pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
        let (c, s) = (R::from_f64(theta.cos()), R::from_f64(theta.sin()));
        let (x0, x1) = (head[2 * i], head[2 * i + 1]);
        head[2 * i] = x0 * c - x1 * s;
        head[2 * i + 1] = x0 * s + x1 * c;
    }
}

/// Apply RoPE to a `[S x heads x d_head]` tensor at the given positions.
pub fn apply_rope<R: Real>(
    x: &Tensor<R>,
    positions: &[usize],
    base: f64,
) -> Result<Tensor<R>> {
    let (s, heads, dh) = x.dims3()?;
    if dh % 2 != 0 {
        return Err(NumError::Invalid(format!(
            "rope head dim {dh} must be even"
        )));
    }
    if positions.len() != s {
        return Err(NumError::DimensionMismatch {
            context: "rope positions".into(),
            lhs: vec![s],
            rhs: vec![positions.len()],
        });
    }
    let mut out = x.clone();
    let od = out.data_mut();
    for si in 0..s {
        for h in 0..heads {
            let off = (si * heads + h) * dh;
            rope_rotate_head(&mut od[off..off + dh], positions[si], base, false);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fused causal attention
// ---------------------------------------------------------------------------

/// Values the attention backward pass needs from the forward pass.
pub struct AttentionSaved<R: Real> {
    /// RoPE-rotated queries, `[S x dim]`.
    pub q_rot: Tensor<R>,
    /// RoPE-rotated keys, `[S x dim]`.
    pub k_rot: Tensor<R>,
    /// Per-head causal softmax rows, `heads * S * S` (zero above diagonal).
    pub probs: Vec<R>,
    pub heads: usize,
}

/// Causal multi-head attention with RoPE applied to q and k internally.
/// `q`, `k`, `v` are `[S x dim]`; position `s` attends to positions `<= s`.
pub fn attention_fwd<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    heads: usize,
    positions: &[usize],
    rope_base: f64,
) -> Result<(Tensor<R>, AttentionSaved<R>)> {
    let (s, dim) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(NumError::DimensionMismatch {
            context: "attention q/k/v".into(),
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if dim % heads != 0 {
        return Err(NumError::Invalid(format!(
            "attention dim {dim} not divisible by heads {heads}"
        )));
    }
    let dh = dim / heads;
    if dh % 2 != 0 {
        return Err(NumError::Invalid(format!("head dim {dh} must be even")));
    }
    let mut q_rot = q.clone();
    let mut k_rot = k.clone();
    for si in 0..s {
        for h in 0..heads {
            let off = si * dim + h * dh;
            rope_rotate_head(&mut q_rot.data_mut()[off..off + dh], positions[si], rope_base, false);
            rope_rotate_head(&mut k_rot.data_mut()[off..off + dh], positions[si], rope_base, false);
        }
    }
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![R::zero(); heads * s * s];
    let mut out = Tensor::zeros(&[s, dim]);
    let qd = q_rot.data();
    let kd = k_rot.data();
    let vd = v.data();
    let od = out.data_mut();
    for h in 0..heads {
        for si in 0..s {
            let prow = &mut probs[(h * s + si) * s..(h * s + si) * s + si + 1];
            let qrow = &qd[si * dim + h * dh..si * dim + (h + 1) * dh];
            for j in 0..=si {
                let krow = &kd[j * dim + h * dh..j * dim + (h + 1) * dh];
                let mut acc = R::zero();
                for c in 0..dh {
                    acc = acc + qrow[c] * krow[c];
                }
                prow[j] = acc * scale;
            }
            softmax_inplace(prow);
            let orow = &mut od[si * dim + h * dh..si * dim + (h + 1) * dh];
            for j in 0..=si {
                let a = prow[j];
                let vrow = &vd[j * dim + h * dh..j * dim + (h + 1) * dh];
                for c in 0..dh {
                    orow[c] = orow[c] + a * vrow[c];
                }
            }
        }
    }
    Ok((
        out,
        AttentionSaved {
            q_rot,
            k_rot,
            probs,
            heads,
        },
    ))
}

/// Backward of [`attention_fwd`]; returns gradients for q, k, v.
pub fn attention_bwd<R: Real>(
    saved: &AttentionSaved<R>,
    v: &Tensor<R>,
    positions: &[usize],
    rope_base: f64,
    g_out: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>, Tensor<R>) {
    let (s, dim) = saved.q_rot.dims2().expect("saved q shape");
    let heads = saved.heads;
    let dh = dim / heads;
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let qd = saved.q_rot.data();
    let kd = saved.k_rot.data();
    let vd = v.data();
    let gd = g_out.data();
    let mut gq = Tensor::zeros(&[s, dim]);
    let mut gk = Tensor::zeros(&[s, dim]);
    let mut gv = Tensor::zeros(&[s, dim]);
    let mut ga_row = vec![R::zero(); s];
    for h in 0..heads {
        for si in 0..s {
            let prow = &saved.probs[(h * s + si) * s..(h * s + si) * s + si + 1];
            let grow = &gd[si * dim + h * dh..si * dim + (h + 1) * dh];
            // dA[s,j] = g_s . v_j ; dV_j += A[s,j] g_s
            for j in 0..=si {
                let vrow = &vd[j * dim + h * dh..j * dim + (h + 1) * dh];
                let mut acc = R::zero();
                for c in 0..dh {
                    acc = acc + grow[c] * vrow[c];
                }
                ga_row[j] = acc;
                let gvrow = &mut gv.data_mut()[j * dim + h * dh..j * dim + (h + 1) * dh];
                let a = prow[j];
                for c in 0..dh {
                    gvrow[c] = gvrow[c] + a * grow[c];
                }
            }
            // softmax backward: ds = A * (dA - sum(A*dA))
            let mut dot = R::zero();
            for j in 0..=si {
                dot = dot + prow[j] * ga_row[j];
            }
            for j in 0..=si {
                let ds = prow[j] * (ga_row[j] - dot) * scale;
                // dq_rot[s] += ds * k_rot[j] ; dk_rot[j] += ds * q_rot[s]
                let krow = &kd[j * dim + h * dh..j * dim + (h + 1) * dh];
                let gqrow = &mut gq.data_mut()[si * dim + h * dh..si * dim + (h + 1) * dh];
                for c in 0..dh {
                    gqrow[c] = gqrow[c] + ds * krow[c];
                }
                let qrow = &qd[si * dim + h * dh..si * dim + (h + 1) * dh];
                let gkrow = &mut gk.data_mut()[j * dim + h * dh..j * dim + (h + 1) * dh];
                for c in 0..dh {
                    gkrow[c] = gkrow[c] + ds * qrow[c];
                }
            }
        }
    }
    // Undo the rotation: gradient through an orthogonal map is the inverse
    // rotation.
    for si in 0..s {
        for h in 0..heads {
            let off = si * dim + h * dh;
            rope_rotate_head(&mut gq.data_mut()[off..off + dh], positions[si], rope_base, true);
            rope_rotate_head(&mut gk.data_mut()[off..off + dh], positions[si], rope_base, true);
        }
    }
    (gq, gk, gv)
}


/// One cached attention step: `q_row` is the new token's projection
/// (RoPE-rotated in place at `pos`), `k_cache`/`v_cache` hold all rows up
/// to and including this position (keys already rotated).
pub fn attention_step<R: Real>(
    q_row: &mut [R],
    k_cache: &[R],
    v_cache: &[R],
    heads: usize,
    dim: usize,
    pos: usize,
    rope_base: f64,
    out_row: &mut [R],
) {
    let dh = dim / heads;
    let rows = pos + 1;
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let mut scores = vec![R::zero(); rows];
    for h in 0..heads {
        rope_rotate_head(&mut q_row[h * dh..(h + 1) * dh], pos, rope_base, false);
        let qrow = &q_row[h * dh..(h + 1) * dh];
        for j in 0..rows {
            let krow = &k_cache[j * dim + h * dh..j * dim + (h + 1) * dh];
            let mut acc = R::zero();
            for c in 0..dh {
                acc = acc + qrow[c] * krow[c];
            }
            scores[j] = acc * scale;
        }
        softmax_inplace(&mut scores[..rows]);
        let orow = &mut out_row[h * dh..(h + 1) * dh];
        for c in orow.iter_mut() {
            *c = R::zero();
        }
        for j in 0..rows {
            let a = scores[j];
            let vrow = &v_cache[j * dim + h * dh..j * dim + (h + 1) * dh];
            for c in 0..dh {
                orow[c] = orow[c] + a * vrow[c];
            }
        }
    }
}
