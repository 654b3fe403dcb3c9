//! A from-scratch `f64` feed-forward reference network.
//!
//! Mirrors the engine's layer semantics (dense, stride-1 same-padding
//! convolution, ReLU, channel-wise normalization with either fixed or batch
//! statistics, flatten, softmax cross-entropy) with naive loops in double
//! precision. Used as the finite-difference target when checking the engine's
//! reverse-mode gradients: differentiating this independent forward pass
//! avoids single-precision noise in the quotients.

/// One reference layer. Parameter layout convention matches the engine:
/// weights then bias, or gamma then beta, in layer order.
#[derive(Debug, Clone)]
pub enum RefLayer {
    Dense {
        w: Vec<f64>,
        b: Vec<f64>,
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        w: Vec<f64>,
        b: Vec<f64>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Relu,
    Norm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mu: Vec<f64>,
        sigma: Vec<f64>,
        eps: f64,
        /// Use the batch's own biased statistics instead of `mu`/`sigma`.
        use_batch_stats: bool,
    },
    Flatten,
}

#[derive(Debug, Clone)]
pub struct RefNet {
    pub layers: Vec<RefLayer>,
}

#[derive(Debug, Clone)]
struct Act {
    // (batch, channels, height, width); flat activations use h = w = 1
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl RefNet {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                RefLayer::Dense { w, b, .. } | RefLayer::Conv2d { w, b, .. } => w.len() + b.len(),
                RefLayer::Norm { gamma, beta, .. } => gamma.len() + beta.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            match l {
                RefLayer::Dense { w, b, .. } | RefLayer::Conv2d { w, b, .. } => {
                    out.extend_from_slice(w);
                    out.extend_from_slice(b);
                }
                RefLayer::Norm { gamma, beta, .. } => {
                    out.extend_from_slice(gamma);
                    out.extend_from_slice(beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut at = 0usize;
        for l in self.layers.iter_mut() {
            match l {
                RefLayer::Dense { w, b, .. } | RefLayer::Conv2d { w, b, .. } => {
                    w.copy_from_slice(&params[at..at + w.len()]);
                    at += w.len();
                    b.copy_from_slice(&params[at..at + b.len()]);
                    at += b.len();
                }
                RefLayer::Norm { gamma, beta, .. } => {
                    gamma.copy_from_slice(&params[at..at + gamma.len()]);
                    at += gamma.len();
                    beta.copy_from_slice(&params[at..at + beta.len()]);
                    at += beta.len();
                }
                _ => {}
            }
        }
    }

    /// Forward to logits. `x` is row-major `B x C x H x W` (flat inputs use
    /// `h = w = 1`); returns one logits row per batch item.
    pub fn forward(&self, x: &[f64], dims: (usize, usize, usize, usize)) -> Vec<Vec<f64>> {
        let (b, c, h, w) = dims;
        assert_eq!(x.len(), b * c * h * w);
        let mut act = Act {
            b,
            c,
            h,
            w,
            data: x.to_vec(),
        };
        for layer in &self.layers {
            act = apply(layer, &act);
        }
        assert_eq!(act.h * act.w, 1, "network must end in flat activations");
        (0..act.b)
            .map(|bi| act.data[bi * act.c..(bi + 1) * act.c].to_vec())
            .collect()
    }

    /// Mean softmax cross-entropy against target distributions.
    pub fn loss_ce(
        &self,
        x: &[f64],
        dims: (usize, usize, usize, usize),
        targets: &[Vec<f64>],
    ) -> f64 {
        let logits = self.forward(x, dims);
        assert_eq!(logits.len(), targets.len());
        let mut total = 0.0f64;
        for (row, p) in logits.iter().zip(targets) {
            let q = softmax(row);
            for (pv, qv) in p.iter().zip(&q) {
                total -= pv * qv.max(1e-12).ln();
            }
        }
        total / logits.len() as f64
    }
}

fn apply(layer: &RefLayer, x: &Act) -> Act {
    match layer {
        RefLayer::Dense { w, b, in_dim, out_dim } => {
            assert_eq!(x.c * x.h * x.w, *in_dim);
            let mut data = vec![0.0f64; x.b * out_dim];
            for bi in 0..x.b {
                let xin = &x.data[bi * in_dim..(bi + 1) * in_dim];
                for o in 0..*out_dim {
                    let mut acc = b[o];
                    for i in 0..*in_dim {
                        acc += xin[i] * w[o * in_dim + i];
                    }
                    data[bi * out_dim + o] = acc;
                }
            }
            Act {
                b: x.b,
                c: *out_dim,
                h: 1,
                w: 1,
                data,
            }
        }
        RefLayer::Conv2d { w, b, in_ch, out_ch, kernel } => {
            assert_eq!(x.c, *in_ch);
            let k = *kernel;
            let pad = (k / 2) as isize;
            let (hh, ww) = (x.h, x.w);
            let mut data = vec![0.0f64; x.b * out_ch * hh * ww];
            for bi in 0..x.b {
                for oc in 0..*out_ch {
                    for oy in 0..hh {
                        for ox in 0..ww {
                            let mut acc = b[oc];
                            for ic in 0..*in_ch {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = oy as isize + ky as isize - pad;
                                        let ix = ox as isize + kx as isize - pad;
                                        if iy < 0 || ix < 0 || iy >= hh as isize || ix >= ww as isize
                                        {
                                            continue;
                                        }
                                        let xin = x.data
                                            [((bi * x.c + ic) * hh + iy as usize) * ww + ix as usize];
                                        acc += xin * w[((oc * in_ch + ic) * k + ky) * k + kx];
                                    }
                                }
                            }
                            data[((bi * out_ch + oc) * hh + oy) * ww + ox] = acc;
                        }
                    }
                }
            }
            Act {
                b: x.b,
                c: *out_ch,
                h: hh,
                w: ww,
                data,
            }
        }
        RefLayer::Relu => Act {
            data: x.data.iter().map(|v| v.max(0.0)).collect(),
            ..*x
        },
        RefLayer::Norm { gamma, beta, mu, sigma, eps, use_batch_stats } => {
            assert_eq!(x.c, gamma.len());
            let plane = x.h * x.w;
            let n = (x.b * plane) as f64;
            let (mu, var): (Vec<f64>, Vec<f64>) = if *use_batch_stats {
                let mut m = vec![0.0f64; x.c];
                for bi in 0..x.b {
                    for ci in 0..x.c {
                        for k in 0..plane {
                            m[ci] += x.data[(bi * x.c + ci) * plane + k];
                        }
                    }
                }
                for v in m.iter_mut() {
                    *v /= n;
                }
                let mut var = vec![0.0f64; x.c];
                for bi in 0..x.b {
                    for ci in 0..x.c {
                        for k in 0..plane {
                            let d = x.data[(bi * x.c + ci) * plane + k] - m[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= n;
                }
                (m, var)
            } else {
                (mu.clone(), sigma.iter().map(|s| s * s).collect())
            };
            let mut data = vec![0.0f64; x.data.len()];
            for bi in 0..x.b {
                for ci in 0..x.c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    for k in 0..plane {
                        let idx = (bi * x.c + ci) * plane + k;
                        data[idx] = gamma[ci] * (x.data[idx] - mu[ci]) * inv + beta[ci];
                    }
                }
            }
            Act { data, ..*x }
        }
        RefLayer::Flatten => Act {
            b: x.b,
            c: x.c * x.h * x.w,
            h: 1,
            w: 1,
            data: x.data.clone(),
        },
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_chain() {
        let net = RefNet {
            layers: vec![RefLayer::Dense {
                w: vec![1.0, 0.0, 0.0, 1.0],
                b: vec![0.5, -0.5],
                in_dim: 2,
                out_dim: 2,
            }],
        };
        let out = net.forward(&[2.0, 3.0], (1, 2, 1, 1));
        assert_eq!(out[0], vec![2.5, 2.5]);
    }

    #[test]
    fn batch_norm_layer_standardizes() {
        let net = RefNet {
            layers: vec![RefLayer::Norm {
                gamma: vec![1.0],
                beta: vec![0.0],
                mu: vec![0.0],
                sigma: vec![1.0],
                eps: 0.0,
                use_batch_stats: true,
            }],
        };
        let out = net.forward(&[-1.0, 1.0], (2, 1, 1, 1));
        assert!((out[0][0] + 1.0).abs() < 1e-12);
        assert!((out[1][0] - 1.0).abs() < 1e-12);
    }
}
