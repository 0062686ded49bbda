//! Differentiable tensor operations.
//!
//! Every op validates shapes, checks output finiteness, and records a
//! backward closure when any input participates in the gradient tape.

use std::rc::Rc;
use std::sync::Arc;

use super::{accum, Element, Node, Tensor};
use crate::error::{Error, Result};

fn parent_nodes<E: Element>(ts: &[&Tensor<E>]) -> Vec<Rc<Node<E>>> {
    ts.iter().filter_map(|t| t.node.clone()).collect()
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

enum Broadcast {
    Equal,
    AScalar,
    BScalar,
}

fn broadcast_kind<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<Broadcast> {
    if a.shape == b.shape {
        Ok(Broadcast::Equal)
    } else if a.numel() == 1 {
        Ok(Broadcast::AScalar)
    } else if b.numel() == 1 {
        Ok(Broadcast::BScalar)
    } else {
        Err(Error::shape(
            op,
            format!("incompatible shapes {:?} vs {:?}", a.shape, b.shape),
        ))
    }
}

fn binary_elementwise<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    fwd: impl Fn(E, E) -> E,
    // (a_i, b_i, g_i) -> (da_i, db_i)
    bwd: impl Fn(E, E, E) -> (E, E) + 'static,
) -> Result<Tensor<E>> {
    let kind = broadcast_kind(op, a, b)?;
    let (shape, out): (Vec<usize>, Vec<E>) = match kind {
        Broadcast::Equal => (
            a.shape.clone(),
            a.data.iter().zip(b.data.iter()).map(|(&x, &y)| fwd(x, y)).collect(),
        ),
        Broadcast::AScalar => {
            let s = a.data[0];
            (b.shape.clone(), b.data.iter().map(|&y| fwd(s, y)).collect())
        }
        Broadcast::BScalar => {
            let s = b.data[0];
            (a.shape.clone(), a.data.iter().map(|&x| fwd(x, s)).collect())
        }
    };

    if a.node.is_none() && b.node.is_none() {
        return Tensor::from_op_nograd(op, shape, out);
    }

    let an = a.node.clone();
    let bn = b.node.clone();
    let ad = a.data.clone();
    let bd = b.data.clone();
    let parents = parent_nodes(&[a, b]);
    let a_scalar = matches!(kind, Broadcast::AScalar);
    let b_scalar = matches!(kind, Broadcast::BScalar);
    let back = Box::new(move |g: &[E]| {
        accum(&an, |ga| {
            for (i, &gi) in g.iter().enumerate() {
                let x = if a_scalar { ad[0] } else { ad[i] };
                let y = if b_scalar { bd[0] } else { bd[i] };
                let (da, _) = bwd(x, y, gi);
                if a_scalar {
                    ga[0] += da;
                } else {
                    ga[i] += da;
                }
            }
        });
        accum(&bn, |gb| {
            for (i, &gi) in g.iter().enumerate() {
                let x = if a_scalar { ad[0] } else { ad[i] };
                let y = if b_scalar { bd[0] } else { bd[i] };
                let (_, db) = bwd(x, y, gi);
                if b_scalar {
                    gb[0] += db;
                } else {
                    gb[i] += db;
                }
            }
        });
    });
    Tensor::from_op(op, shape, out, parents, back)
}

/// Componentwise sum; shapes must match or one operand must be scalar.
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_elementwise("add", a, b, |x, y| x + y, |_, _, g| (g, g))
}

pub fn sub<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_elementwise("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
}

pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary_elementwise("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
}

/// Multiply by a compile-time constant (not a tape participant).
pub fn scale<E: Element>(a: &Tensor<E>, c: E) -> Result<Tensor<E>> {
    let out: Vec<E> = a.data.iter().map(|&x| x * c).collect();
    if a.node.is_none() {
        return Tensor::from_op_nograd("scale", a.shape.clone(), out);
    }
    let an = a.node.clone();
    let parents = parent_nodes(&[a]);
    let back = Box::new(move |g: &[E]| {
        accum(&an, |ga| {
            for (gi, &go) in ga.iter_mut().zip(g.iter()) {
                *gi += go * c;
            }
        });
    });
    Tensor::from_op("scale", a.shape.clone(), out, parents, back)
}

pub fn add_const<E: Element>(a: &Tensor<E>, c: E) -> Result<Tensor<E>> {
    let out: Vec<E> = a.data.iter().map(|&x| x + c).collect();
    if a.node.is_none() {
        return Tensor::from_op_nograd("add_const", a.shape.clone(), out);
    }
    let an = a.node.clone();
    let parents = parent_nodes(&[a]);
    let back = Box::new(move |g: &[E]| {
        accum(&an, |ga| {
            for (gi, &go) in ga.iter_mut().zip(g.iter()) {
                *gi += go;
            }
        });
    });
    Tensor::from_op("add_const", a.shape.clone(), out, parents, back)
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// x * sigmoid(x).
pub fn silu<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let out: Vec<E> = a.data.iter().map(|&x| x * sigmoid(x)).collect();
    if a.node.is_none() {
        return Tensor::from_op_nograd("silu", a.shape.clone(), out);
    }
    let an = a.node.clone();
    let ad = a.data.clone();
    let parents = parent_nodes(&[a]);
    let back = Box::new(move |g: &[E]| {
        accum(&an, |ga| {
            for i in 0..g.len() {
                let s = sigmoid(ad[i]);
                ga[i] += g[i] * s * (E::one() + ad[i] * (E::one() - s));
            }
        });
    });
    Tensor::from_op("silu", a.shape.clone(), out, parents, back)
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// C[m x n] = A[m x k] . B[k x n].
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expected 2-d operands, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![E::zero(); m * n];
    E::gemm(
        m, k, n,
        E::one(),
        &a.data, k as isize, 1,
        &b.data, n as isize, 1,
        E::zero(),
        &mut out, n as isize, 1,
    );

    if a.node.is_none() && b.node.is_none() {
        return Tensor::from_op_nograd("matmul", vec![m, n], out);
    }
    let an = a.node.clone();
    let bn = b.node.clone();
    let ad = a.data.clone();
    let bd = b.data.clone();
    let parents = parent_nodes(&[a, b]);
    let back = Box::new(move |g: &[E]| {
        // dA = dC . B^T
        accum(&an, |ga| {
            E::gemm(
                m, n, k,
                E::one(),
                g, n as isize, 1,
                &bd, 1, n as isize,
                E::one(),
                ga, k as isize, 1,
            );
        });
        // dB = A^T . dC
        accum(&bn, |gb| {
            E::gemm(
                k, m, n,
                E::one(),
                &ad, 1, k as isize,
                g, n as isize, 1,
                E::one(),
                gb, n as isize, 1,
            );
        });
    });
    Tensor::from_op("matmul", vec![m, n], out, parents, back)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    // cols is [C*kh*kw, oh*ow] row-major.
    let spatial = oh * ow;
    for cc in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((cc * kh) + ki) * kw + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                        {
                            x[(cc * h + iy as usize) * w + ix as usize]
                        } else {
                            E::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [E],
) {
    let spatial = oh * ow;
    for cc in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((cc * kh) + ki) * kw + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(cc * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Direct cross-correlation: input [B,C,H,W], kernel [O,C,kh,kw], optional
/// bias [O]. Output [B,O,H',W'] with H' = (H + 2 pad - kh)/stride + 1.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    if x.shape.len() != 4 || w.shape.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected 4-d input and kernel, got {:?} and {:?}", x.shape, w.shape),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    let (b, c, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, c2, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if c != c2 {
        return Err(Error::shape(
            "conv2d",
            format!("channel mismatch: input {c} vs kernel {c2}"),
        ));
    }
    if let Some(bt) = bias {
        if bt.shape != [o] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {o} output channels", bt.shape),
            ));
        }
    }
    if h + 2 * pad < kh || ww + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {h}x{ww} (pad {pad})"),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (ww + 2 * pad - kw) / stride + 1;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("conv2d", "non-positive output extent"));
    }

    let ck = c * kh * kw;
    let spatial = oh * ow;
    let mut out = vec![E::zero(); b * o * spatial];

    let x_elem = c * h * ww;
    let bias_data = bias.map(|t| t.data.clone());
    {
        let mut cols = vec![E::zero(); ck * spatial];
        for bi in 0..b {
            im2col(
                &x.data[bi * x_elem..(bi + 1) * x_elem],
                c, h, ww, kh, kw, stride, pad, oh, ow, &mut cols,
            );
            let out_b = &mut out[bi * o * spatial..(bi + 1) * o * spatial];
            E::gemm(
                o, ck, spatial,
                E::one(),
                &w.data, ck as isize, 1,
                &cols, spatial as isize, 1,
                E::zero(),
                out_b, spatial as isize, 1,
            );
            if let Some(bd) = &bias_data {
                for oc in 0..o {
                    let v = bd[oc];
                    for p in &mut out_b[oc * spatial..(oc + 1) * spatial] {
                        *p += v;
                    }
                }
            }
        }
    }

    let shape = vec![b, o, oh, ow];
    let any_grad =
        x.node.is_some() || w.node.is_some() || bias.map(|t| t.node.is_some()).unwrap_or(false);
    if !any_grad {
        return Tensor::from_op_nograd("conv2d", shape, out);
    }

    let xn = x.node.clone();
    let wn = w.node.clone();
    let bn = bias.and_then(|t| t.node.clone());
    let xd = x.data.clone();
    let wd = w.data.clone();
    let mut parents = parent_nodes(&[x, w]);
    if let Some(bt) = bias {
        parents.extend(parent_nodes(&[bt]));
    }
    let back = Box::new(move |g: &[E]| {
        // Bias gradient: sum over batch and spatial positions.
        accum(&bn, |gb| {
            for bi in 0..b {
                for oc in 0..o {
                    let base = (bi * o + oc) * spatial;
                    let mut s = E::zero();
                    for &v in &g[base..base + spatial] {
                        s += v;
                    }
                    gb[oc] += s;
                }
            }
        });
        // Kernel gradient: dW += g_b . cols_b^T, recomputing im2col per batch.
        accum(&wn, |gw| {
            let mut cols = vec![E::zero(); ck * spatial];
            for bi in 0..b {
                im2col(
                    &xd[bi * x_elem..(bi + 1) * x_elem],
                    c, h, ww, kh, kw, stride, pad, oh, ow, &mut cols,
                );
                E::gemm(
                    o, spatial, ck,
                    E::one(),
                    &g[bi * o * spatial..(bi + 1) * o * spatial], spatial as isize, 1,
                    &cols, 1, spatial as isize,
                    E::one(),
                    gw, ck as isize, 1,
                );
            }
        });
        // Input gradient: dcols = W^T . g_b, scattered back with col2im.
        accum(&xn, |gx| {
            let mut dcols = vec![E::zero(); ck * spatial];
            for bi in 0..b {
                E::gemm(
                    ck, o, spatial,
                    E::one(),
                    &wd, 1, ck as isize,
                    &g[bi * o * spatial..(bi + 1) * o * spatial], spatial as isize, 1,
                    E::zero(),
                    &mut dcols, spatial as isize, 1,
                );
                col2im_add(
                    &dcols,
                    c, h, ww, kh, kw, stride, pad, oh, ow,
                    &mut gx[bi * x_elem..(bi + 1) * x_elem],
                );
            }
        });
    });
    Tensor::from_op("conv2d", shape, out, parents, back)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Numerically stabilized softmax along `axis` (max subtraction).
pub fn softmax<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    if axis >= x.shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape),
        ));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerics("softmax", "non-finite input"));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();

    let mut out = vec![E::zero(); x.numel()];
    for oi in 0..outer {
        for ii in 0..inner {
            let base = oi * len * inner + ii;
            let mut mx = x.data[base];
            for j in 1..len {
                let v = x.data[base + j * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = E::zero();
            for j in 0..len {
                let e = (x.data[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                denom += e;
            }
            for j in 0..len {
                out[base + j * inner] /= denom;
            }
        }
    }

    if x.node.is_none() {
        return Tensor::from_op_nograd("softmax", x.shape.clone(), out);
    }
    let xn = x.node.clone();
    let yd = Arc::new(out.clone());
    let parents = parent_nodes(&[x]);
    let back = Box::new(move |g: &[E]| {
        accum(&xn, |gx| {
            for oi in 0..outer {
                for ii in 0..inner {
                    let base = oi * len * inner + ii;
                    let mut dot = E::zero();
                    for j in 0..len {
                        let idx = base + j * inner;
                        dot += g[idx] * yd[idx];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        gx[idx] += yd[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    });
    Tensor::from_op("softmax", x.shape.clone(), out, parents, back)
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

/// Per-group zero mean / unit variance over [B,C,H,W], then per-channel
/// affine. `eps` is added inside the square root.
pub fn group_norm<E: Element>(
    x: &Tensor<E>,
    groups: usize,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    if x.shape.len() != 4 {
        return Err(Error::shape(
            "group_norm",
            format!("expected 4-d input, got {:?}", x.shape),
        ));
    }
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("channels {c} not divisible by groups {groups}"),
        ));
    }
    if gain.shape != [c] || bias.shape != [c] {
        return Err(Error::shape(
            "group_norm",
            format!(
                "affine shapes {:?}/{:?} do not match {c} channels",
                gain.shape, bias.shape
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("group_norm eps must be positive, got {eps}")));
    }

    let cg = c / groups;
    let spatial = h * w;
    let gsize = cg * spatial;
    let eps_e = E::from_f64(eps);

    let mut xhat = vec![E::zero(); x.numel()];
    let mut invstd = vec![E::zero(); b * groups];
    let mut out = vec![E::zero(); x.numel()];
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cg) * spatial;
            let xs = &x.data[start..start + gsize];
            let n = E::from_f64(gsize as f64);
            let mut mean = E::zero();
            for &v in xs {
                mean += v;
            }
            mean /= n;
            let mut var = E::zero();
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var /= n;
            let istd = E::one() / (var + eps_e).sqrt();
            invstd[bi * groups + gi] = istd;
            for (j, &v) in xs.iter().enumerate() {
                let ch = gi * cg + j / spatial;
                let xh = (v - mean) * istd;
                xhat[start + j] = xh;
                out[start + j] = gain.data[ch] * xh + bias.data[ch];
            }
        }
    }

    let any_grad = x.node.is_some() || gain.node.is_some() || bias.node.is_some();
    if !any_grad {
        return Tensor::from_op_nograd("group_norm", x.shape.clone(), out);
    }
    let xn = x.node.clone();
    let gn = gain.node.clone();
    let bn = bias.node.clone();
    let gaind = gain.data.clone();
    let xhat = Arc::new(xhat);
    let invstd = Arc::new(invstd);
    let parents = parent_nodes(&[x, gain, bias]);
    let xhat_b = xhat.clone();
    let back = Box::new(move |g: &[E]| {
        accum(&bn, |gb| {
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * spatial;
                    let mut s = E::zero();
                    for &v in &g[base..base + spatial] {
                        s += v;
                    }
                    gb[ch] += s;
                }
            }
        });
        accum(&gn, |gg| {
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * spatial;
                    let mut s = E::zero();
                    for j in 0..spatial {
                        s += g[base + j] * xhat_b[base + j];
                    }
                    gg[ch] += s;
                }
            }
        });
        accum(&xn, |gx| {
            let n = E::from_f64(gsize as f64);
            for bi in 0..b {
                for gi in 0..groups {
                    let start = (bi * c + gi * cg) * spatial;
                    let istd = invstd[bi * groups + gi];
                    // dxhat = g * gain[c]; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..gsize {
                        let ch = gi * cg + j / spatial;
                        let dxh = g[start + j] * gaind[ch];
                        m1 += dxh;
                        m2 += dxh * xhat_b[start + j];
                    }
                    m1 /= n;
                    m2 /= n;
                    for j in 0..gsize {
                        let ch = gi * cg + j / spatial;
                        let dxh = g[start + j] * gaind[ch];
                        gx[start + j] += istd * (dxh - m1 - xhat_b[start + j] * m2);
                    }
                }
            }
        });
    });
    Tensor::from_op("group_norm", x.shape.clone(), out, parents, back)
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

/// Concatenate along `axis`; all other extents must match.
pub fn concat<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::shape("concat", "no inputs"));
    }
    let rank = parts[0].shape.len();
    if axis >= rank {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for p in parts {
        if p.shape.len() != rank {
            return Err(Error::shape("concat", "rank mismatch"));
        }
        for (d, (&a, &b)) in parts[0].shape.iter().zip(p.shape.iter()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape(
                    "concat",
                    format!("extent mismatch at axis {d}: {:?} vs {:?}", parts[0].shape, p.shape),
                ));
            }
        }
    }
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();

    let total: usize = shape.iter().product();
    let mut out = vec![E::zero(); total];
    let out_axis = shape[axis];
    {
        let mut offset = 0usize;
        for p in parts {
            let pa = p.shape[axis];
            for oi in 0..outer {
                let src = &p.data[oi * pa * inner..(oi + 1) * pa * inner];
                let dst_base = (oi * out_axis + offset) * inner;
                out[dst_base..dst_base + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
    }

    if parts.iter().all(|p| p.node.is_none()) {
        return Tensor::from_op_nograd("concat", shape, out);
    }
    let nodes: Vec<Option<Rc<Node<E>>>> = parts.iter().map(|p| p.node.clone()).collect();
    let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
    let parents = parent_nodes(parts);
    let back = Box::new(move |g: &[E]| {
        let mut offset = 0usize;
        for (node, &pa) in nodes.iter().zip(axis_sizes.iter()) {
            accum(node, |gp| {
                for oi in 0..outer {
                    let src_base = (oi * out_axis + offset) * inner;
                    let dst = &mut gp[oi * pa * inner..(oi + 1) * pa * inner];
                    for (d, s) in dst.iter_mut().zip(g[src_base..src_base + pa * inner].iter()) {
                        *d += *s;
                    }
                }
            });
            offset += pa;
        }
    });
    Tensor::from_op("concat", shape, out, parents, back)
}

/// Same data, new shape (same element count).
pub fn reshape<E: Element>(x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("cannot reshape {:?} into {:?}", x.shape, shape),
        ));
    }
    if x.node.is_none() {
        return Ok(Tensor {
            shape: shape.to_vec(),
            data: x.data.clone(),
            node: None,
        });
    }
    let xn = x.node.clone();
    let parents = parent_nodes(&[x]);
    let back = Box::new(move |g: &[E]| {
        accum(&xn, |gx| {
            for (d, s) in gx.iter_mut().zip(g.iter()) {
                *d += *s;
            }
        });
    });
    Tensor::from_op("reshape", shape.to_vec(), x.data.as_ref().clone(), parents, back)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_copy<E: Element>(src: &[E], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<E>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides_of(shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = vec![E::zero(); src.len()];
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for slot in out.iter_mut() {
        *slot = src[src_off];
        // odometer over out_shape, tracking the source offset
        for d in (0..rank).rev() {
            idx[d] += 1;
            src_off += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_off -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Reorder axes; `axes` must be a permutation of 0..rank.
pub fn permute<E: Element>(x: &Tensor<E>, axes: &[usize]) -> Result<Tensor<E>> {
    let rank = x.shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::shape(
            "permute",
            format!("invalid axes {axes:?} for rank {rank}"),
        ));
    }
    let (out_shape, out) = permute_copy(&x.data, &x.shape, axes);
    if x.node.is_none() {
        return Tensor::from_op_nograd("permute", out_shape, out);
    }
    let mut inverse = vec![0usize; rank];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let xn = x.node.clone();
    let oshape = out_shape.clone();
    let parents = parent_nodes(&[x]);
    let back = Box::new(move |g: &[E]| {
        let (_, ginv) = permute_copy(g, &oshape, &inverse);
        accum(&xn, |gx| {
            for (d, s) in gx.iter_mut().zip(ginv.iter()) {
                *d += *s;
            }
        });
    });
    Tensor::from_op("permute", out_shape, out, parents, back)
}

/// Index along axis 0, removing it: x[d0, rest..] -> [rest..].
pub fn select0<E: Element>(x: &Tensor<E>, index: usize) -> Result<Tensor<E>> {
    if x.shape.is_empty() || index >= x.shape[0] {
        return Err(Error::shape(
            "select0",
            format!("index {index} out of range for shape {:?}", x.shape),
        ));
    }
    let rest: Vec<usize> = x.shape[1..].to_vec();
    let chunk: usize = rest.iter().product();
    let out = x.data[index * chunk..(index + 1) * chunk].to_vec();
    if x.node.is_none() {
        return Tensor::from_op_nograd("select0", rest, out);
    }
    let xn = x.node.clone();
    let parents = parent_nodes(&[x]);
    let back = Box::new(move |g: &[E]| {
        accum(&xn, |gx| {
            let dst = &mut gx[index * chunk..(index + 1) * chunk];
            for (d, s) in dst.iter_mut().zip(g.iter()) {
                *d += *s;
            }
        });
    });
    Tensor::from_op("select0", rest, out, parents, back)
}

/// Nearest-neighbor 2x spatial upsample of [B,C,H,W].
pub fn upsample2x<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape.len() != 4 {
        return Err(Error::shape(
            "upsample2x",
            format!("expected 4-d input, got {:?}", x.shape),
        ));
    }
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![E::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    let shape = vec![b, c, oh, ow];
    if x.node.is_none() {
        return Tensor::from_op_nograd("upsample2x", shape, out);
    }
    let xn = x.node.clone();
    let parents = parent_nodes(&[x]);
    let back = Box::new(move |g: &[E]| {
        accum(&xn, |gx| {
            for bc in 0..b * c {
                let gsrc = &g[bc * oh * ow..(bc + 1) * oh * ow];
                let gdst = &mut gx[bc * h * w..(bc + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        gdst[(y / 2) * w + xx / 2] += gsrc[y * ow + xx];
                    }
                }
            }
        });
    });
    Tensor::from_op("upsample2x", shape, out, parents, back)
}

/// Row lookup: table [V, d], ids of length n -> [n, d].
pub fn embedding<E: Element>(table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
    if table.shape.len() != 2 {
        return Err(Error::shape(
            "embedding",
            format!("expected 2-d table, got {:?}", table.shape),
        ));
    }
    if ids.is_empty() {
        return Err(Error::shape("embedding", "empty id sequence"));
    }
    let (v, d) = (table.shape[0], table.shape[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Config(format!("token id {bad} out of vocab range {v}")));
    }
    let mut out = vec![E::zero(); ids.len() * d];
    for (row, &id) in ids.iter().enumerate() {
        out[row * d..(row + 1) * d].copy_from_slice(&table.data[id * d..(id + 1) * d]);
    }
    let shape = vec![ids.len(), d];
    if table.node.is_none() {
        return Tensor::from_op_nograd("embedding", shape, out);
    }
    let tn = table.node.clone();
    let ids: Vec<usize> = ids.to_vec();
    let parents = parent_nodes(&[table]);
    let back = Box::new(move |g: &[E]| {
        accum(&tn, |gt| {
            for (row, &id) in ids.iter().enumerate() {
                let dst = &mut gt[id * d..(id + 1) * d];
                for (x, s) in dst.iter_mut().zip(g[row * d..(row + 1) * d].iter()) {
                    *x += *s;
                }
            }
        });
    });
    Tensor::from_op("embedding", shape, out, parents, back)
}

/// Mean over all elements -> scalar.
pub fn mean_all<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = x.numel();
    let scale = E::from_f64(1.0 / n as f64);
    let mut s = E::zero();
    for &v in x.data.iter() {
        s += v;
    }
    let out = vec![s * scale];
    if x.node.is_none() {
        return Tensor::from_op_nograd("mean_all", vec![1], out);
    }
    let xn = x.node.clone();
    let parents = parent_nodes(&[x]);
    let back = Box::new(move |g: &[E]| {
        let gv = g[0] * scale;
        accum(&xn, |gx| {
            for d in gx.iter_mut() {
                *d += gv;
            }
        });
    });
    Tensor::from_op("mean_all", vec![1], out, parents, back)
}

/// Sum over all elements -> scalar.
pub fn sum_all<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut s = E::zero();
    for &v in x.data.iter() {
        s += v;
    }
    let out = vec![s];
    if x.node.is_none() {
        return Tensor::from_op_nograd("sum_all", vec![1], out);
    }
    let xn = x.node.clone();
    let parents = parent_nodes(&[x]);
    let back = Box::new(move |g: &[E]| {
        let gv = g[0];
        accum(&xn, |gx| {
            for d in gx.iter_mut() {
                *d += gv;
            }
        });
    });
    Tensor::from_op("sum_all", vec![1], out, parents, back)
}

/// Broadcast-add a vector over the trailing axis: x[..., d] + b[d].
pub fn add_rowvec<E: Element>(x: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let d = *x.shape.last().ok_or_else(|| Error::shape("add_rowvec", "rank-0 input"))?;
    if bias.shape != [d] {
        return Err(Error::shape(
            "add_rowvec",
            format!("bias shape {:?} does not match trailing axis {d}", bias.shape),
        ));
    }
    let rows = x.numel() / d;
    let mut out = x.data.as_ref().clone();
    for r in 0..rows {
        for j in 0..d {
            out[r * d + j] += bias.data[j];
        }
    }
    if x.node.is_none() && bias.node.is_none() {
        return Tensor::from_op_nograd("add_rowvec", x.shape.clone(), out);
    }
    let xn = x.node.clone();
    let bn = bias.node.clone();
    let parents = parent_nodes(&[x, bias]);
    let back = Box::new(move |g: &[E]| {
        accum(&xn, |gx| {
            for (dd, s) in gx.iter_mut().zip(g.iter()) {
                *dd += *s;
            }
        });
        accum(&bn, |gb| {
            for r in 0..rows {
                for j in 0..d {
                    gb[j] += g[r * d + j];
                }
            }
        });
    });
    Tensor::from_op("add_rowvec", x.shape.clone(), out, parents, back)
}

/// Add a per-(batch, channel) offset to [B,C,H,W]: x + t[B,C] broadcast over
/// the spatial axes. Used to inject timestep conditioning into conv blocks.
pub fn add_batch_chan<E: Element>(x: &Tensor<E>, t: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape.len() != 4 || t.shape.len() != 2 {
        return Err(Error::shape(
            "add_batch_chan",
            format!("expected [B,C,H,W] and [B,C], got {:?} and {:?}", x.shape, t.shape),
        ));
    }
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if t.shape != [b, c] {
        return Err(Error::shape(
            "add_batch_chan",
            format!("offset shape {:?} does not match [{b},{c}]", t.shape),
        ));
    }
    let spatial = h * w;
    let mut out = x.data.as_ref().clone();
    for bc in 0..b * c {
        let v = t.data[bc];
        for p in &mut out[bc * spatial..(bc + 1) * spatial] {
            *p += v;
        }
    }
    if x.node.is_none() && t.node.is_none() {
        return Tensor::from_op_nograd("add_batch_chan", x.shape.clone(), out);
    }
    let xn = x.node.clone();
    let tn = t.node.clone();
    let parents = parent_nodes(&[x, t]);
    let back = Box::new(move |g: &[E]| {
        accum(&xn, |gx| {
            for (dd, s) in gx.iter_mut().zip(g.iter()) {
                *dd += *s;
            }
        });
        accum(&tn, |gt| {
            for bc in 0..b * c {
                let mut s = E::zero();
                for &v in &g[bc * spatial..(bc + 1) * spatial] {
                    s += v;
                }
                gt[bc] += s;
            }
        });
    });
    Tensor::from_op("add_batch_chan", x.shape.clone(), out, parents, back)
}

/// Mean squared error between two same-shape tensors -> scalar.
pub fn mse<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape != b.shape {
        return Err(Error::shape(
            "mse",
            format!("shape mismatch {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let d = sub(a, b)?;
    mean_all(&mul(&d, &d)?)
}
