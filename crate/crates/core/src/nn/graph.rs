//! Reverse-mode autodiff on an index-based tape.
//!
//! Every op evaluates eagerly when recorded; `backward` walks the tape in
//! reverse and accumulates gradients into per-node buffers. A fresh graph is
//! built for every optimization step; parameters enter as named leaves so the
//! optimizer can pull `(name, gradient)` pairs afterwards.

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Probabilities fed to the log losses are clamped to this range; gradients
/// are zero outside it.
pub const LOG_CLAMP_LO: f64 = 1e-7;
pub const LOG_CLAMP_HI: f64 = 1.0 - 1e-7;

const INSTANCE_NORM_EPS: f64 = 1e-5;

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
        padded: Tensor<S>, // cached padded input for the weight gradient
    },
    ConvT2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        // per (n, c): mean and 1/sqrt(var + eps), cached at forward time
        mean: Vec<S>,
        invstd: Vec<S>,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: S,
    },
    Tanh {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: S,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    MeanAbsDiff {
        a: usize,
        b: usize,
    },
    MeanLog {
        x: usize,
    },
    MeanLog1m {
        x: usize,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
    name: Option<String>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Tensor<S>>, // filled by backward, aligned with nodes
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Data leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Parameter leaf; `named_grads` reports its gradient under `name`.
    /// Re-registering a name returns the existing leaf, so a parameter used
    /// by several forward passes in one graph accumulates one gradient.
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Var {
        if let Some(i) = self
            .nodes
            .iter()
            .position(|n| n.name.as_deref() == Some(name))
        {
            debug_assert_eq!(
                self.nodes[i].value.data(),
                value.data(),
                "param {name} re-registered with different values"
            );
            return Var(i);
        }
        let v = self.push(Op::Leaf, value, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.scalar_value().as_f64()
    }

    pub fn grad(&self, v: Var) -> &Tensor<S> {
        assert!(!self.grads.is_empty(), "backward has not run");
        &self.grads[v.0]
    }

    /// Gradients of all named parameter leaves, in registration order.
    pub fn named_grads(&self) -> Vec<(&str, &Tensor<S>)> {
        assert!(!self.grads.is_empty(), "backward has not run");
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.as_deref().map(|name| (name, &self.grads[i])))
            .collect()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Var {
        let rg = self.needs_grad(&[x.0, w.0, b.0]);
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let [n, cin, h, wd] = xv.shape();
        let [cout, wcin, kh, kw] = wv.shape();
        assert_eq!(cin, wcin, "conv2d: input channels {cin} vs weight {wcin}");
        assert_eq!(bv.shape(), [cout, 1, 1, 1], "conv2d: bias shape");
        assert!(stride >= 1);
        let padded = pad2d(xv, pad, mode);
        let hp = h + 2 * pad;
        let wp = wd + 2 * pad;
        assert!(hp >= kh && wp >= kw, "conv2d: kernel larger than padded input");
        let ho = (hp - kh) / stride + 1;
        let wo = (wp - kw) / stride + 1;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for ni in 0..n {
            for co in 0..cout {
                let bias = bv.data()[co];
                let obase = (ni * cout + co) * ho * wo;
                out.data_mut()[obase..obase + ho * wo].fill(bias);
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wval = wv.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            for oy in 0..ho {
                                let prow = ((ni * cin + ci) * hp + oy * stride + ky) * wp + kx;
                                let orow = obase + oy * wo;
                                for ox in 0..wo {
                                    let pv = padded.data()[prow + ox * stride];
                                    let o = &mut out.data_mut()[orow + ox];
                                    *o = *o + wval * pv;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
                mode,
                padded,
            },
            out,
            rg,
        )
    }

    pub fn conv_t2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let rg = self.needs_grad(&[x.0, w.0, b.0]);
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let [n, cin, _, _] = xv.shape();
        let [wcin, cout, _, _] = wv.shape();
        assert_eq!(cin, wcin, "conv_t2d: input channels {cin} vs weight {wcin}");
        assert_eq!(bv.shape(), [cout, 1, 1, 1], "conv_t2d: bias shape");
        assert!(stride >= 1 && out_pad < stride);
        let full = conv_t_scatter(xv, wv, stride, out_pad);
        let [_, _, hf, wf] = full.shape();
        assert!(hf > 2 * pad && wf > 2 * pad, "conv_t2d: pad too large");
        let ho = hf - 2 * pad;
        let wo = wf - 2 * pad;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for ni in 0..n {
            for co in 0..cout {
                let bias = bv.data()[co];
                for oy in 0..ho {
                    for ox in 0..wo {
                        out.set(ni, co, oy, ox, full.at(ni, co, oy + pad, ox + pad) + bias);
                    }
                }
            }
        }
        self.push(
            Op::ConvT2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
                out_pad,
            },
            out,
            rg,
        )
    }

    /// Per-(sample, channel) normalization over HxW, then affine gamma/beta.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let rg = self.needs_grad(&[x.0, gamma.0, beta.0]);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let [n, c, h, w] = xv.shape();
        assert_eq!(gv.shape(), [c, 1, 1, 1], "instance_norm: gamma shape");
        assert_eq!(bv.shape(), [c, 1, 1, 1], "instance_norm: beta shape");
        let m = h * w;
        assert!(m > 0);
        let mut mean = Vec::with_capacity(n * c);
        let mut invstd = Vec::with_capacity(n * c);
        let mut out = xv.zeros_like();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * m;
                let plane = &xv.data()[base..base + m];
                let mu = plane.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
                let var = plane
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>()
                    / m as f64;
                let r = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                let (mu_s, r_s) = (S::from_f64(mu), S::from_f64(r));
                mean.push(mu_s);
                invstd.push(r_s);
                let (gam, bta) = (gv.data()[ci], bv.data()[ci]);
                let dst = &mut out.data_mut()[base..base + m];
                for (d, &v) in dst.iter_mut().zip(plane) {
                    *d = gam * (v - mu_s) * r_s + bta;
                }
            }
        }
        self.push(
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                invstd,
            },
            out,
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let rg = self.needs_grad(&[x.0]);
        let out = self.nodes[x.0].value.map(|v| v.max(S::zero()));
        self.push(Op::Relu { x: x.0 }, out, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let rg = self.needs_grad(&[x.0]);
        let s = S::from_f64(slope);
        let out = self.nodes[x.0]
            .value
            .map(|v| if v > S::zero() { v } else { s * v });
        self.push(Op::LeakyRelu { x: x.0, slope: s }, out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let rg = self.needs_grad(&[x.0]);
        let out = self.nodes[x.0].value.map(|v| v.tanh());
        self.push(Op::Tanh { x: x.0 }, out, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let rg = self.needs_grad(&[x.0]);
        let out = self.nodes[x.0]
            .value
            .map(|v| S::one() / (S::one() + (-v).exp()));
        self.push(Op::Sigmoid { x: x.0 }, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let rg = self.needs_grad(&[a.0, b.0]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = *o + v;
        }
        self.push(Op::Add { a: a.0, b: b.0 }, out, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let rg = self.needs_grad(&[x.0]);
        let cs = S::from_f64(c);
        let out = self.nodes[x.0].value.map(|v| cs * v);
        self.push(Op::Scale { x: x.0, c: cs }, out, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let rg = self.needs_grad(&[a.0, b.0]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert!(
            n == nb && h == hb && w == wb,
            "concat_channels: non-channel dims differ"
        );
        let m = h * w;
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        for ni in 0..n {
            let dst = &mut out.data_mut()[ni * (ca + cb) * m..(ni + 1) * (ca + cb) * m];
            dst[..ca * m].copy_from_slice(&av.data()[ni * ca * m..(ni + 1) * ca * m]);
            dst[ca * m..].copy_from_slice(&bv.data()[ni * cb * m..(ni + 1) * cb * m]);
        }
        self.push(Op::ConcatChannels { a: a.0, b: b.0 }, out, rg)
    }

    /// Scalar mean of |a - b| over all elements (L1 loss).
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let rg = self.needs_grad(&[a.0, b.0]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "mean_abs_diff: shape mismatch");
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
            .sum();
        let out = Tensor::from_scalar(S::from_f64(sum / av.numel() as f64));
        self.push(Op::MeanAbsDiff { a: a.0, b: b.0 }, out, rg)
    }

    /// Scalar mean of ln(x) with the argument clamped away from 0 and 1.
    pub fn mean_log(&mut self, x: Var) -> Var {
        let rg = self.needs_grad(&[x.0]);
        let xv = &self.nodes[x.0].value;
        let sum: f64 = xv
            .data()
            .iter()
            .map(|&v| v.as_f64().clamp(LOG_CLAMP_LO, LOG_CLAMP_HI).ln())
            .sum();
        let out = Tensor::from_scalar(S::from_f64(sum / xv.numel() as f64));
        self.push(Op::MeanLog { x: x.0 }, out, rg)
    }

    /// Scalar mean of ln(1 - x), clamped like `mean_log`.
    pub fn mean_log1m(&mut self, x: Var) -> Var {
        let rg = self.needs_grad(&[x.0]);
        let xv = &self.nodes[x.0].value;
        let sum: f64 = xv
            .data()
            .iter()
            .map(|&v| (1.0 - v.as_f64()).clamp(LOG_CLAMP_LO, LOG_CLAMP_HI).ln())
            .sum();
        let out = Tensor::from_scalar(S::from_f64(sum / xv.numel() as f64));
        self.push(Op::MeanLog1m { x: x.0 }, out, rg)
    }

    /// Reverse pass from a single-element loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        self.grads = self.nodes.iter().map(|n| n.value.zeros_like()).collect();
        self.grads[loss.0].data_mut()[0] = S::one();
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gy = std::mem::take(&mut self.grads[i]);
            backprop_node(&self.nodes, &mut self.grads, i, &gy);
            self.grads[i] = gy;
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Tensor<S>],
    target: usize,
    delta: &Tensor<S>,
) {
    if !nodes[target].requires_grad {
        return;
    }
    let g = &mut grads[target];
    debug_assert_eq!(g.shape(), delta.shape());
    for (a, &d) in g.data_mut().iter_mut().zip(delta.data()) {
        *a = *a + d;
    }
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], grads: &mut [Tensor<S>], i: usize, gy: &Tensor<S>) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
            mode,
            padded,
        } => {
            let (x, w, b, stride, pad, mode) = (*x, *w, *b, *stride, *pad, *mode);
            let wv = &nodes[w].value;
            let [cout, cin, kh, kw] = wv.shape();
            let [n, _, ho, wo] = gy.shape();
            let [_, _, hp, wp] = padded.shape();
            let mut dpadded = padded.zeros_like();
            let mut dw = wv.zeros_like();
            let mut db = nodes[b].value.zeros_like();
            for ni in 0..n {
                for co in 0..cout {
                    let gbase = (ni * cout + co) * ho * wo;
                    let gplane = &gy.data()[gbase..gbase + ho * wo];
                    let s: f64 = gplane.iter().map(|v| v.as_f64()).sum();
                    db.data_mut()[co] = db.data()[co] + S::from_f64(s);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                let wval = wv.data()[widx];
                                let mut acc = S::zero();
                                for oy in 0..ho {
                                    let prow = ((ni * cin + ci) * hp + oy * stride + ky) * wp + kx;
                                    let grow = oy * wo;
                                    for ox in 0..wo {
                                        let g = gplane[grow + ox];
                                        let pi = prow + ox * stride;
                                        acc = acc + g * padded.data()[pi];
                                        let d = &mut dpadded.data_mut()[pi];
                                        *d = *d + g * wval;
                                    }
                                }
                                dw.data_mut()[widx] = dw.data()[widx] + acc;
                            }
                        }
                    }
                }
            }
            let [_, _, h, wd] = nodes[x].value.shape();
            let dx = unpad2d(&dpadded, h, wd, pad, mode);
            accumulate(nodes, grads, x, &dx);
            accumulate(nodes, grads, w, &dw);
            accumulate(nodes, grads, b, &db);
        }
        Op::ConvT2d {
            x,
            w,
            b,
            stride,
            pad,
            out_pad,
        } => {
            let (x, w, b, stride, pad, out_pad) = (*x, *w, *b, *stride, *pad, *out_pad);
            let xv = &nodes[x].value;
            let wv = &nodes[w].value;
            let [n, cin, h, wd] = xv.shape();
            let [_, cout, kh, kw] = wv.shape();
            let hf = (h - 1) * stride + kh + out_pad;
            let wf = (wd - 1) * stride + kw + out_pad;
            // Spread the output gradient back onto the uncropped buffer.
            let mut dfull = Tensor::zeros([n, cout, hf, wf]);
            let [_, _, ho, wo] = gy.shape();
            let mut db = nodes[b].value.zeros_like();
            for ni in 0..n {
                for co in 0..cout {
                    let mut bsum = 0.0;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = gy.at(ni, co, oy, ox);
                            bsum += g.as_f64();
                            dfull.set(ni, co, oy + pad, ox + pad, g);
                        }
                    }
                    db.data_mut()[co] = db.data()[co] + S::from_f64(bsum);
                }
            }
            let mut dx = xv.zeros_like();
            let mut dw = wv.zeros_like();
            for ni in 0..n {
                for ci in 0..cin {
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let widx = ((ci * cout + co) * kh + ky) * kw + kx;
                                let wval = wv.data()[widx];
                                let mut acc = S::zero();
                                for iy in 0..h {
                                    for ix in 0..wd {
                                        let g =
                                            dfull.at(ni, co, iy * stride + ky, ix * stride + kx);
                                        let xi = xv.idx(ni, ci, iy, ix);
                                        acc = acc + g * xv.data()[xi];
                                        let d = &mut dx.data_mut()[xi];
                                        *d = *d + g * wval;
                                    }
                                }
                                dw.data_mut()[widx] = dw.data()[widx] + acc;
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, x, &dx);
            accumulate(nodes, grads, w, &dw);
            accumulate(nodes, grads, b, &db);
        }
        Op::InstanceNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let xv = &nodes[x].value;
            let gv = &nodes[gamma].value;
            let [n, c, h, w] = xv.shape();
            let m = h * w;
            let mut dx = xv.zeros_like();
            let mut dgamma = gv.zeros_like();
            let mut dbeta = gv.zeros_like();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * m;
                    let (mu, r) = (mean[ni * c + ci], invstd[ni * c + ci]);
                    let plane = &xv.data()[base..base + m];
                    let gplane = &gy.data()[base..base + m];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (&g, &v) in gplane.iter().zip(plane) {
                        let xhat = ((v - mu) * r).as_f64();
                        sum_g += g.as_f64();
                        sum_gx += g.as_f64() * xhat;
                    }
                    dgamma.data_mut()[ci] = dgamma.data()[ci] + S::from_f64(sum_gx);
                    dbeta.data_mut()[ci] = dbeta.data()[ci] + S::from_f64(sum_g);
                    let mean_g = S::from_f64(sum_g / m as f64);
                    let mean_gx = S::from_f64(sum_gx / m as f64);
                    let gr = gv.data()[ci] * r;
                    let dst = &mut dx.data_mut()[base..base + m];
                    for ((d, &g), &v) in dst.iter_mut().zip(gplane).zip(plane) {
                        let xhat = (v - mu) * r;
                        *d = gr * (g - mean_g - xhat * mean_gx);
                    }
                }
            }
            accumulate(nodes, grads, x, &dx);
            accumulate(nodes, grads, gamma, &dgamma);
            accumulate(nodes, grads, beta, &dbeta);
        }
        Op::Relu { x } => {
            let x = *x;
            let xv = &nodes[x].value;
            let mut dx = xv.zeros_like();
            for ((d, &v), &g) in dx.data_mut().iter_mut().zip(xv.data()).zip(gy.data()) {
                if v > S::zero() {
                    *d = g;
                }
            }
            accumulate(nodes, grads, x, &dx);
        }
        Op::LeakyRelu { x, slope } => {
            let (x, slope) = (*x, *slope);
            let xv = &nodes[x].value;
            let mut dx = xv.zeros_like();
            for ((d, &v), &g) in dx.data_mut().iter_mut().zip(xv.data()).zip(gy.data()) {
                *d = if v > S::zero() { g } else { slope * g };
            }
            accumulate(nodes, grads, x, &dx);
        }
        Op::Tanh { x } => {
            let x = *x;
            let yv = &nodes[i].value;
            let mut dx = yv.zeros_like();
            for ((d, &y), &g) in dx.data_mut().iter_mut().zip(yv.data()).zip(gy.data()) {
                *d = g * (S::one() - y * y);
            }
            accumulate(nodes, grads, x, &dx);
        }
        Op::Sigmoid { x } => {
            let x = *x;
            let yv = &nodes[i].value;
            let mut dx = yv.zeros_like();
            for ((d, &y), &g) in dx.data_mut().iter_mut().zip(yv.data()).zip(gy.data()) {
                *d = g * y * (S::one() - y);
            }
            accumulate(nodes, grads, x, &dx);
        }
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            accumulate(nodes, grads, a, gy);
            accumulate(nodes, grads, b, gy);
        }
        Op::Scale { x, c } => {
            let (x, c) = (*x, *c);
            let dx = gy.map(|g| c * g);
            accumulate(nodes, grads, x, &dx);
        }
        Op::ConcatChannels { a, b } => {
            let (a, b) = (*a, *b);
            let [n, ca, h, w] = nodes[a].value.shape();
            let cb = nodes[b].value.shape()[1];
            let m = h * w;
            let mut da = nodes[a].value.zeros_like();
            let mut db = nodes[b].value.zeros_like();
            for ni in 0..n {
                let src = &gy.data()[ni * (ca + cb) * m..(ni + 1) * (ca + cb) * m];
                da.data_mut()[ni * ca * m..(ni + 1) * ca * m].copy_from_slice(&src[..ca * m]);
                db.data_mut()[ni * cb * m..(ni + 1) * cb * m].copy_from_slice(&src[ca * m..]);
            }
            accumulate(nodes, grads, a, &da);
            accumulate(nodes, grads, b, &db);
        }
        Op::MeanAbsDiff { a, b } => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let g = gy.scalar_value();
            let inv_n = S::from_f64(1.0 / av.numel() as f64);
            let mut da = av.zeros_like();
            let mut db = bv.zeros_like();
            for ((x, y), (dax, dbx)) in av
                .data()
                .iter()
                .zip(bv.data())
                .zip(da.data_mut().iter_mut().zip(db.data_mut().iter_mut()))
            {
                // subgradient: 0 at exact ties
                let s = match x.partial_cmp(y) {
                    Some(std::cmp::Ordering::Greater) => S::one(),
                    Some(std::cmp::Ordering::Less) => -S::one(),
                    _ => S::zero(),
                };
                *dax = g * inv_n * s;
                *dbx = -(g * inv_n * s);
            }
            accumulate(nodes, grads, a, &da);
            accumulate(nodes, grads, b, &db);
        }
        Op::MeanLog { x } => {
            let x = *x;
            let xv = &nodes[x].value;
            let g = gy.scalar_value().as_f64();
            let n = xv.numel() as f64;
            let mut dx = xv.zeros_like();
            for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                let vf = v.as_f64();
                if (LOG_CLAMP_LO..=LOG_CLAMP_HI).contains(&vf) {
                    *d = S::from_f64(g / (n * vf));
                }
            }
            accumulate(nodes, grads, x, &dx);
        }
        Op::MeanLog1m { x } => {
            let x = *x;
            let xv = &nodes[x].value;
            let g = gy.scalar_value().as_f64();
            let n = xv.numel() as f64;
            let mut dx = xv.zeros_like();
            for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                let u = 1.0 - v.as_f64();
                if (LOG_CLAMP_LO..=LOG_CLAMP_HI).contains(&u) {
                    *d = S::from_f64(-g / (n * u));
                }
            }
            accumulate(nodes, grads, x, &dx);
        }
    }
}

/// Mirror across the edge element (the edge itself is not duplicated).
#[inline]
fn reflect_index(i: isize, n: isize) -> usize {
    debug_assert!(n >= 1 && i > -n && i < 2 * n - 1);
    if i < 0 {
        (-i) as usize
    } else if i >= n {
        (2 * (n - 1) - i) as usize
    } else {
        i as usize
    }
}

fn pad2d<S: Scalar>(x: &Tensor<S>, pad: usize, mode: PadMode) -> Tensor<S> {
    if pad == 0 {
        return x.clone();
    }
    let [n, c, h, w] = x.shape();
    if mode == PadMode::Reflect {
        assert!(pad < h && pad < w, "reflect pad {pad} too large for {h}x{w}");
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros([n, c, hp, wp]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..hp {
                for ox in 0..wp {
                    let (iy, ix) = (oy as isize - pad as isize, ox as isize - pad as isize);
                    let v = match mode {
                        PadMode::Zero => {
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                x.at(ni, ci, iy as usize, ix as usize)
                            } else {
                                S::zero()
                            }
                        }
                        PadMode::Reflect => x.at(
                            ni,
                            ci,
                            reflect_index(iy, h as isize),
                            reflect_index(ix, w as isize),
                        ),
                    };
                    out.set(ni, ci, oy, ox, v);
                }
            }
        }
    }
    out
}

/// Adjoint of `pad2d`: fold padded-gradient cells back onto their sources.
fn unpad2d<S: Scalar>(
    dpadded: &Tensor<S>,
    h: usize,
    w: usize,
    pad: usize,
    mode: PadMode,
) -> Tensor<S> {
    if pad == 0 {
        return dpadded.clone();
    }
    let [n, c, hp, wp] = dpadded.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..hp {
                for ox in 0..wp {
                    let (iy, ix) = (oy as isize - pad as isize, ox as isize - pad as isize);
                    let (ty, tx) = match mode {
                        PadMode::Zero => {
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                (iy as usize, ix as usize)
                            } else {
                                continue;
                            }
                        }
                        PadMode::Reflect => {
                            (reflect_index(iy, h as isize), reflect_index(ix, w as isize))
                        }
                    };
                    let d = dpadded.at(ni, ci, oy, ox);
                    let cur = out.at(ni, ci, ty, tx);
                    out.set(ni, ci, ty, tx, cur + d);
                }
            }
        }
    }
    out
}

/// Stride-expanded scatter for transposed convolution, before crop and bias.
fn conv_t_scatter<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    out_pad: usize,
) -> Tensor<S> {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, kh, kw] = w.shape();
    let hf = (h - 1) * stride + kh + out_pad;
    let wf = (wd - 1) * stride + kw + out_pad;
    let mut full = Tensor::zeros([n, cout, hf, wf]);
    for ni in 0..n {
        for ci in 0..cin {
            for co in 0..cout {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data()[((ci * cout + co) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            for ix in 0..wd {
                                let fi = full.idx(ni, co, iy * stride + ky, ix * stride + kx);
                                full.data_mut()[fi] = full.data()[fi] + wv * x.at(ni, ci, iy, ix);
                            }
                        }
                    }
                }
            }
        }
    }
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Direct per-output gather, structured differently from the engine's
    /// cached-padded-buffer loops.
    fn conv2d_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, kh, kw] = w.shape();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    let v = match mode {
                                        PadMode::Zero => {
                                            if iy >= 0
                                                && ix >= 0
                                                && (iy as usize) < h
                                                && (ix as usize) < wd
                                            {
                                                x.at(ni, ci, iy as usize, ix as usize)
                                            } else {
                                                0.0
                                            }
                                        }
                                        PadMode::Reflect => x.at(
                                            ni,
                                            ci,
                                            reflect_index(iy, h as isize),
                                            reflect_index(ix, wd as isize),
                                        ),
                                    };
                                    acc += v * w.at(co, ci, ky, kx);
                                }
                            }
                        }
                        out.set(ni, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    /// Per-output gather for the transposed conv: output (oy, ox) collects
    /// x[iy, ix] * w[ky, kx] whenever iy*stride + ky == oy + pad.
    fn conv_t2d_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [_, cout, kh, kw] = w.shape();
        let ho = (h - 1) * stride + kh + out_pad - 2 * pad;
        let wo = (wd - 1) * stride + kw + out_pad - 2 * pad;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for iy in 0..h {
                                for ix in 0..wd {
                                    let ky = oy as isize + pad as isize - (iy * stride) as isize;
                                    let kx = ox as isize + pad as isize - (ix * stride) as isize;
                                    if ky >= 0
                                        && kx >= 0
                                        && (ky as usize) < kh
                                        && (kx as usize) < kw
                                    {
                                        acc += x.at(ni, ci, iy, ix)
                                            * w.at(ci, co, ky as usize, kx as usize);
                                    }
                                }
                            }
                        }
                        out.set(ni, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv2d_hand_example() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        let w = g.param("w", Tensor::from_vec([1, 1, 1, 3], vec![1.0, 0.0, -1.0]));
        let b = g.param("b", Tensor::from_vec([1, 1, 1, 1], vec![0.0]));
        let y = g.conv2d(x, w, b, 1, 0, PadMode::Zero);
        assert_eq!(g.value(y).data(), &[-2.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(
            [1, 1, 3, 3],
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
        ));
        let w = g.param("w", Tensor::from_vec([1, 1, 2, 2], vec![1., 0., 0., 1.]));
        let b = g.param("b", Tensor::from_vec([1, 1, 1, 1], vec![0.5]));
        let y = g.conv2d(x, w, b, 1, 0, PadMode::Zero);
        // main-diagonal 2x2 sums plus bias
        assert_eq!(g.value(y).data(), &[6.5, 8.5, 12.5, 14.5]);
    }

    #[test]
    fn conv2d_matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad, mode) in &[
            (1, 0, PadMode::Zero),
            (1, 1, PadMode::Zero),
            (2, 1, PadMode::Zero),
            (1, 1, PadMode::Reflect),
            (1, 3, PadMode::Reflect),
        ] {
            let x = randn(&mut rng, [2, 3, 7, 8]);
            let w = randn(&mut rng, [4, 3, 3, 3]);
            let bias: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expect = conv2d_reference(&x, &w, &bias, stride, pad, mode);
            let mut g = Graph::<f64>::new();
            let xv = g.input(x);
            let wv = g.param("w", w);
            let bv = g.param("b", Tensor::from_vec([4, 1, 1, 1], bias));
            let y = g.conv2d(xv, wv, bv, stride, pad, mode);
            assert_close(g.value(y), &expect, 1e-12);
        }
    }

    #[test]
    fn conv_t2d_matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(stride, pad, out_pad) in &[(1, 0, 0), (2, 1, 1), (2, 0, 0), (2, 1, 0)] {
            let x = randn(&mut rng, [2, 3, 5, 6]);
            let w = randn(&mut rng, [3, 2, 3, 3]);
            let bias: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expect = conv_t2d_reference(&x, &w, &bias, stride, pad, out_pad);
            let mut g = Graph::<f64>::new();
            let xv = g.input(x);
            let wv = g.param("w", w);
            let bv = g.param("b", Tensor::from_vec([2, 1, 1, 1], bias));
            let y = g.conv_t2d(xv, wv, bv, stride, pad, out_pad);
            assert_close(g.value(y), &expect, 1e-12);
        }
    }

    #[test]
    fn conv_t2d_doubles_spatial_size() {
        // The generator's upsampling config: k3 s2 p1 out_pad1 maps H to 2H.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let xt = randn(&mut rng, [1, 4, 8, 8]);
        let wt = randn(&mut rng, [4, 2, 3, 3]);
        let x = g.input(xt);
        let w = g.param("w", wt);
        let b = g.param("b", Tensor::zeros([2, 1, 1, 1]));
        let y = g.conv_t2d(x, w, b, 2, 1, 1);
        assert_eq!(g.value(y).shape(), [1, 2, 16, 16]);
    }

    #[test]
    fn instance_norm_normalizes_each_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::<f64>::new();
        let xt = randn(&mut rng, [2, 3, 6, 5]).map(|v| 3.0 * v + 7.0);
        let x = g.input(xt);
        let gamma = g.param("g", Tensor::from_vec([3, 1, 1, 1], vec![1.0; 3]));
        let beta = g.param("b", Tensor::zeros([3, 1, 1, 1]));
        let y = g.instance_norm(x, gamma, beta);
        let yv = g.value(y);
        for n in 0..2 {
            for c in 0..3 {
                let mut mean = 0.0;
                for h in 0..6 {
                    for w in 0..5 {
                        mean += yv.at(n, c, h, w);
                    }
                }
                mean /= 30.0;
                let mut var = 0.0;
                for h in 0..6 {
                    for w in 0..5 {
                        var += (yv.at(n, c, h, w) - mean).powi(2);
                    }
                }
                var /= 30.0;
                assert!(mean.abs() < 1e-12, "plane mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "plane var {var}"); // eps shifts it slightly
            }
        }
    }

    #[test]
    fn loss_ops_hand_values() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]));
        let b = g.input(Tensor::from_vec([1, 1, 1, 2], vec![2.0, 5.0]));
        let l1 = g.mean_abs_diff(a, b);
        assert!((g.value_scalar(l1) - 1.5).abs() < 1e-15);

        let p = g.input(Tensor::from_vec([1, 1, 1, 2], vec![0.5, 0.5]));
        let ml = g.mean_log(p);
        assert!((g.value_scalar(ml) - (-std::f64::consts::LN_2)).abs() < 1e-15);
        let ml1m = g.mean_log1m(p);
        assert!((g.value_scalar(ml1m) - (-std::f64::consts::LN_2)).abs() < 1e-15);

        // clamp keeps the losses finite at 0 and 1
        let q = g.input(Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]));
        let c1 = g.mean_log(q);
        let c2 = g.mean_log1m(q);
        assert!(g.value_scalar(c1).is_finite() && g.value_scalar(c2).is_finite());
    }

    #[test]
    fn concat_stacks_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec([2, 1, 1, 2], vec![1., 2., 3., 4.]));
        let b = g.input(Tensor::from_vec(
            [2, 2, 1, 2],
            vec![5., 6., 7., 8., 9., 10., 11., 12.],
        ));
        let y = g.concat_channels(a, b);
        assert_eq!(g.value(y).shape(), [2, 3, 1, 2]);
        assert_eq!(
            g.value(y).data(),
            &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]
        );
    }

    // ---- gradient checking ----

    const GRADCHECK_H: f64 = 1e-5;
    const GRADCHECK_TOL: f64 = 1e-4;

    /// Central-difference check of every parameter gradient of `build`,
    /// which must register each tensor of `params` under its given name
    /// and return the scalar loss.
    fn gradcheck(
        params: &[(&str, Tensor<f64>)],
        build: impl Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Var,
    ) {
        let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        let mut g = Graph::new();
        let loss = build(&mut g, &tensors);
        g.backward(loss);
        let analytic: Vec<Tensor<f64>> = {
            let by_name: std::collections::HashMap<&str, &Tensor<f64>> =
                g.named_grads().into_iter().collect();
            params.iter().map(|(n, _)| by_name[n].clone()).collect()
        };
        for (pi, (name, _)) in params.iter().enumerate() {
            for j in 0..tensors[pi].numel() {
                let eval = |delta: f64| {
                    let mut t = tensors.clone();
                    t[pi].data_mut()[j] += delta;
                    let mut g = Graph::new();
                    let loss = build(&mut g, &t);
                    g.value_scalar(loss)
                };
                let numeric = (eval(GRADCHECK_H) - eval(-GRADCHECK_H)) / (2.0 * GRADCHECK_H);
                let a = analytic[pi].data()[j];
                let denom = 1.0f64.max(a.abs()).max(numeric.abs());
                assert!(
                    (a - numeric).abs() <= GRADCHECK_TOL * denom,
                    "{name}[{j}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradcheck_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(stride, pad, mode) in &[
            (1, 1, PadMode::Zero),
            (2, 1, PadMode::Zero),
            (1, 2, PadMode::Reflect),
        ] {
            let params = [
                ("x", randn(&mut rng, [2, 2, 5, 5])),
                ("w", randn(&mut rng, [3, 2, 3, 3])),
                ("b", randn(&mut rng, [3, 1, 1, 1])),
            ];
            gradcheck(&params, |g, t| {
                let x = g.param("x", t[0].clone());
                let w = g.param("w", t[1].clone());
                let b = g.param("b", t[2].clone());
                let y = g.conv2d(x, w, b, stride, pad, mode);
                let th = g.tanh(y);
                let zeros = g.value(th).zeros_like();
                let zv = g.input(zeros);
                g.mean_abs_diff(th, zv)
            });
        }
    }

    #[test]
    fn gradcheck_conv_t2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = [
            ("x", randn(&mut rng, [1, 3, 4, 4])),
            ("w", randn(&mut rng, [3, 2, 3, 3])),
            ("b", randn(&mut rng, [2, 1, 1, 1])),
        ];
        gradcheck(&params, |g, t| {
            let x = g.param("x", t[0].clone());
            let w = g.param("w", t[1].clone());
            let b = g.param("b", t[2].clone());
            let y = g.conv_t2d(x, w, b, 2, 1, 1);
            let s = g.sigmoid(y);
            g.mean_log(s)
        });
    }

    #[test]
    fn gradcheck_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = [
            ("x", randn(&mut rng, [2, 2, 4, 4])),
            ("gamma", randn(&mut rng, [2, 1, 1, 1]).map(|v| 1.0 + 0.3 * v)),
            ("beta", randn(&mut rng, [2, 1, 1, 1])),
        ];
        gradcheck(&params, |g, t| {
            let x = g.param("x", t[0].clone());
            let gamma = g.param("gamma", t[1].clone());
            let beta = g.param("beta", t[2].clone());
            let y = g.instance_norm(x, gamma, beta);
            let th = g.tanh(y);
            let zeros = g.value(th).zeros_like();
            let zv = g.input(zeros);
            g.mean_abs_diff(th, zv)
        });
    }

    #[test]
    fn gradcheck_activations_and_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        // keep values away from relu/abs kinks
        let base = randn(&mut rng, [1, 2, 3, 3]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let params = [("x", base), ("y", randn(&mut rng, [1, 2, 3, 3]))];
        gradcheck(&params, |g, t| {
            let x = g.param("x", t[0].clone());
            let y = g.param("y", t[1].clone());
            let r = g.relu(x);
            let l = g.leaky_relu(y, 0.2);
            let cat = g.concat_channels(r, l);
            let th = g.tanh(cat);
            let sg = g.sigmoid(th);
            let a = g.mean_log(sg);
            let b = g.mean_log1m(sg);
            let c = g.add(a, b);
            g.scale(c, 1.7)
        });
    }

    #[test]
    fn gradcheck_mean_abs_diff_between_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let params = [
            ("x", randn(&mut rng, [1, 1, 4, 4])),
            ("y", randn(&mut rng, [1, 1, 4, 4])),
        ];
        gradcheck(&params, |g, t| {
            let x = g.param("x", t[0].clone());
            let y = g.param("y", t[1].clone());
            g.mean_abs_diff(x, y)
        });
    }

    #[test]
    fn grad_accumulates_when_var_reused() {
        // f(x) = mean|x + x| with positive x: df/dx = 2/n
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let s = g.add(x, x);
        let zeros = g.input(Tensor::zeros([1, 1, 1, 4]));
        let l = g.mean_abs_diff(s, zeros);
        g.backward(l);
        for &d in g.grad(x).data() {
            assert!((d - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn inputs_get_no_grad_and_params_are_named() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_scalar(2.0));
        let w = g.param("w", Tensor::from_scalar(3.0));
        let y = g.add(x, w);
        let l = g.mean_abs_diff(y, x);
        g.backward(l);
        let named = g.named_grads();
        assert_eq!(named.len(), 1);
        assert_eq!(named[0].0, "w");
        assert_eq!(named[0].1.scalar_value(), 1.0);
        assert_eq!(g.grad(x).scalar_value(), 0.0);
    }
}
