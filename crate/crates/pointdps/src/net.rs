//! Small trainable denoiser network.
//!
//! Per-point encoder MLP, mean pooling into a global feature, per-point
//! decoder on [point feature, global feature]. Time enters as a sinusoidal
//! embedding of c_noise(t) concatenated to every point's input. Mean pooling
//! makes the whole thing permutation equivariant by construction.
//!
//! Forward and reverse mode are written by hand; the network is small enough
//! that an exact, dependency-free VJP is simpler than pulling in an autodiff
//! framework, and the sampler needs that VJP at every guided step.

use crate::diffusion::{c_in, c_noise, c_out, c_skip};
use crate::error::{Error, Result};
use crate::geom::Cloud3;
use crate::rng::RandomSource;

/// Network shape. `hidden` is the width, `layers` the number of encoder
/// linear layers, `embed_dim` the (even) size of the time embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetArch {
    pub point_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub embed_dim: usize,
}

impl NetArch {
    pub fn new(hidden: usize, layers: usize, embed_dim: usize) -> Result<Self> {
        if hidden == 0 || layers == 0 {
            return Err(Error::InvalidInput(
                "network needs at least one encoder layer and nonzero width".into(),
            ));
        }
        if embed_dim == 0 || embed_dim % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "embed_dim must be even and nonzero, got {embed_dim}"
            )));
        }
        Ok(Self {
            point_dim: 3,
            hidden,
            layers,
            embed_dim,
        })
    }
}

/// Offsets of one linear layer inside the flat parameter vector. Weights are
/// row-major [out][in], biases follow the weights.
#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    w_off: usize,
    b_off: usize,
    in_dim: usize,
    out_dim: usize,
}

impl LayerSpec {
    fn end(&self) -> usize {
        self.b_off + self.out_dim
    }
}

#[derive(Debug, Clone)]
pub struct NetDenoiser {
    arch: NetArch,
    c_noise_scale: f64,
    params: Vec<f64>,
    specs: Vec<LayerSpec>,
}

/// Cached activations of one forward pass, consumed by `backward`.
pub struct Trace {
    t: f64,
    x: Vec<[f64; 3]>,
    input: Vec<Vec<f64>>,
    /// Pre-activations of every encoder layer plus the decoder hidden layer,
    /// per point. Layout: pre[layer][point][unit].
    pre: Vec<Vec<Vec<f64>>>,
    /// Post-activation outputs matching `pre`.
    act: Vec<Vec<Vec<f64>>>,
    pooled: Vec<f64>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_deriv(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

impl NetDenoiser {
    /// Fresh network. Hidden layers get scaled-normal weights, the final
    /// decoder layer starts at zero so that D(x, t) = c_skip(t) x initially.
    pub fn new(arch: NetArch, c_noise_scale: f64, rng: &mut RandomSource) -> Result<Self> {
        if !(c_noise_scale.is_finite() && c_noise_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "c_noise_scale must be positive, got {c_noise_scale}"
            )));
        }
        let mut specs = Vec::new();
        let mut off = 0;
        let push = |in_dim: usize, out_dim: usize, off: &mut usize| {
            let spec = LayerSpec {
                w_off: *off,
                b_off: *off + in_dim * out_dim,
                in_dim,
                out_dim,
            };
            *off = spec.end();
            spec
        };
        let h = arch.hidden;
        specs.push(push(arch.point_dim + arch.embed_dim, h, &mut off));
        for _ in 1..arch.layers {
            specs.push(push(h, h, &mut off));
        }
        specs.push(push(2 * h, h, &mut off));
        specs.push(push(h, arch.point_dim, &mut off));

        let mut params = vec![0.0; off];
        for spec in &specs[..specs.len() - 1] {
            let scale = 1.0 / (spec.in_dim as f64).sqrt();
            for w in &mut params[spec.w_off..spec.b_off] {
                *w = rng.normal() * scale;
            }
        }
        Ok(Self {
            arch,
            c_noise_scale,
            params,
            specs,
        })
    }

    /// Replace the zero output layer with small random weights. Training does
    /// not want this; gradient tests do, because a zero output layer hides
    /// most of the Jacobian.
    pub fn randomize_output(&mut self, rng: &mut RandomSource, scale: f64) {
        let spec = *self.specs.last().unwrap();
        for v in &mut self.params[spec.w_off..spec.end()] {
            *v = rng.normal() * scale;
        }
    }

    pub fn arch(&self) -> NetArch {
        self.arch
    }

    pub fn c_noise_scale(&self) -> f64 {
        self.c_noise_scale
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::SizeMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Rebuild a network from a saved parameter vector.
    pub fn from_params(arch: NetArch, c_noise_scale: f64, params: &[f64]) -> Result<Self> {
        let mut net = Self::new(arch, c_noise_scale, &mut RandomSource::new(0))?;
        net.set_params(params)?;
        Ok(net)
    }

    fn embed(&self, t: f64) -> Vec<f64> {
        let half = self.arch.embed_dim / 2;
        let cn = c_noise(t, self.c_noise_scale);
        let mut emb = Vec::with_capacity(self.arch.embed_dim);
        for k in 0..half {
            let freq = (-(10_000.0_f64.ln()) * k as f64 / half as f64).exp();
            emb.push((cn * freq).sin());
            emb.push((cn * freq).cos());
        }
        emb
    }

    fn apply_linear(&self, spec: &LayerSpec, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..spec.out_dim {
            let row = &self.params[spec.w_off + o * spec.in_dim..spec.w_off + (o + 1) * spec.in_dim];
            let mut acc = self.params[spec.b_off + o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }

    /// D(x, t) = c_skip(t) x + c_out(t) F(c_in(t) x, c_noise(t)).
    pub fn denoise(&self, x: &Cloud3, t: f64) -> Cloud3 {
        if t == 0.0 {
            return x.clone();
        }
        let (out, _) = self.forward(x.points(), t);
        Cloud3::from_raw(out)
    }

    pub fn denoise_with_trace(&self, x: &Cloud3, t: f64) -> (Cloud3, Trace) {
        let (out, trace) = self.forward(x.points(), t);
        (Cloud3::from_raw(out), trace)
    }

    fn forward(&self, x: &[[f64; 3]], t: f64) -> (Vec<[f64; 3]>, Trace) {
        let n = x.len();
        let h = self.arch.hidden;
        let enc_layers = self.arch.layers;
        let cin = c_in(t);
        let emb = self.embed(t);

        let input: Vec<Vec<f64>> = x
            .iter()
            .map(|p| {
                let mut v = Vec::with_capacity(self.arch.point_dim + self.arch.embed_dim);
                v.extend(p.iter().map(|c| c * cin));
                v.extend_from_slice(&emb);
                v
            })
            .collect();

        let mut pre: Vec<Vec<Vec<f64>>> = Vec::with_capacity(enc_layers + 1);
        let mut act: Vec<Vec<Vec<f64>>> = Vec::with_capacity(enc_layers + 1);

        let mut cur: Vec<Vec<f64>> = input.clone();
        for spec in &self.specs[..enc_layers] {
            let mut layer_pre = Vec::with_capacity(n);
            let mut layer_act = Vec::with_capacity(n);
            for point in &cur {
                let mut z = Vec::new();
                self.apply_linear(spec, point, &mut z);
                layer_act.push(z.iter().map(|&v| silu(v)).collect::<Vec<f64>>());
                layer_pre.push(z);
            }
            cur = layer_act.clone();
            pre.push(layer_pre);
            act.push(layer_act);
        }

        let mut pooled = vec![0.0; h];
        for point in &cur {
            for (g, v) in pooled.iter_mut().zip(point) {
                *g += v;
            }
        }
        for g in &mut pooled {
            *g /= n as f64;
        }

        let dec0 = &self.specs[enc_layers];
        let dec1 = &self.specs[enc_layers + 1];
        let mut dec_pre = Vec::with_capacity(n);
        let mut dec_act = Vec::with_capacity(n);
        let cskip = c_skip(t);
        let cout = c_out(t);
        let mut out = Vec::with_capacity(n);
        let mut joint = vec![0.0; 2 * h];
        for (i, point) in cur.iter().enumerate() {
            joint[..h].copy_from_slice(point);
            joint[h..].copy_from_slice(&pooled);
            let mut z = Vec::new();
            self.apply_linear(dec0, &joint, &mut z);
            let a: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
            let mut f = Vec::new();
            self.apply_linear(dec1, &a, &mut f);
            out.push([
                cskip * x[i][0] + cout * f[0],
                cskip * x[i][1] + cout * f[1],
                cskip * x[i][2] + cout * f[2],
            ]);
            dec_pre.push(z);
            dec_act.push(a);
        }
        pre.push(dec_pre);
        act.push(dec_act);

        let trace = Trace {
            t,
            x: x.to_vec(),
            input,
            pre,
            act,
            pooled,
        };
        (out, trace)
    }

    /// Reverse pass for the scalar <cotangent, D(x, t)>. Returns the gradient
    /// with respect to x; accumulates parameter gradients into `param_grad`
    /// when given (same layout as `params`).
    pub fn backward(
        &self,
        trace: &Trace,
        cotangent: &[[f64; 3]],
        mut param_grad: Option<&mut [f64]>,
    ) -> Vec<[f64; 3]> {
        let n = trace.x.len();
        assert_eq!(cotangent.len(), n, "cotangent rows must match the cloud");
        if let Some(g) = param_grad.as_deref() {
            assert_eq!(g.len(), self.params.len());
        }
        let h = self.arch.hidden;
        let enc_layers = self.arch.layers;
        let t = trace.t;
        let cskip = c_skip(t);
        let cout = c_out(t);
        let cin = c_in(t);
        let dec0 = self.specs[enc_layers];
        let dec1 = self.specs[enc_layers + 1];

        // Decoder, per point. d_h collects gradients on the encoder output,
        // d_pool on the pooled feature.
        let mut d_h: Vec<Vec<f64>> = vec![vec![0.0; h]; n];
        let mut d_pool = vec![0.0; h];
        let mut joint = vec![0.0; 2 * h];
        for i in 0..n {
            let df: Vec<f64> = (0..3).map(|c| cout * cotangent[i][c]).collect();
            // dec1: f = W a + b.
            let a = &trace.act[enc_layers][i];
            let mut d_a = vec![0.0; h];
            for (o, dfo) in df.iter().enumerate() {
                let row = &self.params[dec1.w_off + o * h..dec1.w_off + (o + 1) * h];
                for (da, w) in d_a.iter_mut().zip(row) {
                    *da += w * dfo;
                }
            }
            if let Some(g) = param_grad.as_deref_mut() {
                for (o, dfo) in df.iter().enumerate() {
                    let grow = &mut g[dec1.w_off + o * h..dec1.w_off + (o + 1) * h];
                    for (gw, av) in grow.iter_mut().zip(a) {
                        *gw += dfo * av;
                    }
                    g[dec1.b_off + o] += dfo;
                }
            }
            // dec0: a = silu(z), z = W [h_i, pool] + b.
            let z = &trace.pre[enc_layers][i];
            let d_z: Vec<f64> = d_a
                .iter()
                .zip(z)
                .map(|(da, &zv)| da * silu_deriv(zv))
                .collect();
            joint[..h].copy_from_slice(&trace.act[enc_layers - 1][i]);
            joint[h..].copy_from_slice(&trace.pooled);
            for (o, dzo) in d_z.iter().enumerate() {
                let row = &self.params[dec0.w_off + o * 2 * h..dec0.w_off + (o + 1) * 2 * h];
                for k in 0..h {
                    d_h[i][k] += row[k] * dzo;
                    d_pool[k] += row[h + k] * dzo;
                }
            }
            if let Some(g) = param_grad.as_deref_mut() {
                for (o, dzo) in d_z.iter().enumerate() {
                    let grow = &mut g[dec0.w_off + o * 2 * h..dec0.w_off + (o + 1) * 2 * h];
                    for (gw, jv) in grow.iter_mut().zip(&joint) {
                        *gw += dzo * jv;
                    }
                    g[dec0.b_off + o] += dzo;
                }
            }
        }

        // Mean pool: every point receives d_pool / n.
        let inv_n = 1.0 / n as f64;
        for d in &mut d_h {
            for (dv, dp) in d.iter_mut().zip(&d_pool) {
                *dv += dp * inv_n;
            }
        }

        // Encoder layers, walked backwards.
        let mut d_cur = d_h;
        for l in (0..enc_layers).rev() {
            let spec = self.specs[l];
            let below: Vec<&[f64]> = if l == 0 {
                trace.input.iter().map(|v| v.as_slice()).collect()
            } else {
                trace.act[l - 1].iter().map(|v| v.as_slice()).collect()
            };
            let mut d_below: Vec<Vec<f64>> = vec![vec![0.0; spec.in_dim]; n];
            for i in 0..n {
                let z = &trace.pre[l][i];
                for o in 0..spec.out_dim {
                    let dz = d_cur[i][o] * silu_deriv(z[o]);
                    if dz == 0.0 {
                        continue;
                    }
                    let row = &self.params[spec.w_off + o * spec.in_dim
                        ..spec.w_off + (o + 1) * spec.in_dim];
                    for (db, w) in d_below[i].iter_mut().zip(row) {
                        *db += w * dz;
                    }
                    if let Some(g) = param_grad.as_deref_mut() {
                        let grow = &mut g[spec.w_off + o * spec.in_dim
                            ..spec.w_off + (o + 1) * spec.in_dim];
                        for (gw, bv) in grow.iter_mut().zip(below[i]) {
                            *gw += dz * bv;
                        }
                        g[spec.b_off + o] += dz;
                    }
                }
            }
            d_cur = d_below;
        }

        // Input was [c_in * x, emb]; only the x part carries x-gradient, plus
        // the skip connection.
        (0..n)
            .map(|i| {
                [
                    cin * d_cur[i][0] + cskip * cotangent[i][0],
                    cin * d_cur[i][1] + cskip * cotangent[i][1],
                    cin * d_cur[i][2] + cskip * cotangent[i][2],
                ]
            })
            .collect()
    }

    /// J_D(x, t)^T cotangent without keeping the trace around.
    pub fn vjp(&self, x: &Cloud3, t: f64, cotangent: &[[f64; 3]]) -> Vec<[f64; 3]> {
        if t == 0.0 {
            // D(x, 0) = x, so the Jacobian is the identity.
            return cotangent.to_vec();
        }
        let (_, trace) = self.forward(x.points(), t);
        self.backward(&trace, cotangent, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(hidden: usize, layers: usize, seed: u64) -> NetDenoiser {
        let arch = NetArch::new(hidden, layers, 8).unwrap();
        NetDenoiser::new(arch, 1000.0, &mut RandomSource::new(seed)).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> Cloud3 {
        let mut rng = RandomSource::new(seed);
        Cloud3::new((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect()).unwrap()
    }

    #[test]
    fn t_zero_is_identity() {
        let mut net = small_net(16, 2, 1);
        net.randomize_output(&mut RandomSource::new(2), 0.5);
        let x = random_cloud(5, 3);
        assert_eq!(net.denoise(&x, 0.0).points(), x.points());
    }

    #[test]
    fn zero_init_output_is_cskip_x() {
        let net = small_net(16, 2, 4);
        let x = random_cloud(6, 5);
        for &t in &[0.01, 0.3, 2.0, 50.0] {
            let d = net.denoise(&x, t);
            let cs = c_skip(t);
            for (dp, xp) in d.points().iter().zip(x.points()) {
                for c in 0..3 {
                    assert_eq!(dp[c], cs * xp[c]);
                }
            }
        }
    }

    #[test]
    fn zero_init_vjp_is_cskip_cotangent() {
        let net = small_net(12, 2, 6);
        let x = random_cloud(4, 7);
        let mut rng = RandomSource::new(8);
        let cot: Vec<[f64; 3]> = (0..4).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
        let t = 0.7;
        let out = net.vjp(&x, t, &cot);
        let cs = c_skip(t);
        for (o, c) in out.iter().zip(&cot) {
            for k in 0..3 {
                assert!((o[k] - cs * c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vjp_of_zero_cotangent_is_zero() {
        let mut net = small_net(16, 3, 9);
        net.randomize_output(&mut RandomSource::new(10), 0.5);
        let x = random_cloud(4, 11);
        let cot = vec![[0.0; 3]; 4];
        for v in net.vjp(&x, 0.4, &cot) {
            assert_eq!(v, [0.0; 3]);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut net = small_net(20, 3, 12);
        net.randomize_output(&mut RandomSource::new(13), 0.5);
        let x = random_cloud(7, 14);
        let t = 0.6;
        let d = net.denoise(&x, t);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let xp = Cloud3::from_raw(perm.iter().map(|&i| x.points()[i]).collect());
        let dp = net.denoise(&xp, t);
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!(
                    (dp.points()[j][c] - d.points()[i][c]).abs() < 1e-9,
                    "row {j} differs after permutation"
                );
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut net = small_net(16, 2, 15);
        net.randomize_output(&mut RandomSource::new(16), 0.5);
        let x = random_cloud(4, 17);
        let mut rng = RandomSource::new(18);
        let cot: Vec<[f64; 3]> = (0..4).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
        let t = 0.35;
        let analytic = net.vjp(&x, t, &cot);

        let scalar = |pts: &Vec<[f64; 3]>| -> f64 {
            let d = net.denoise(&Cloud3::from_raw(pts.clone()), t);
            d.points()
                .iter()
                .zip(&cot)
                .map(|(dp, cp)| dp[0] * cp[0] + dp[1] * cp[1] + dp[2] * cp[2])
                .sum()
        };
        let h = 1e-5;
        let mut num = vec![[0.0; 3]; 4];
        for i in 0..4 {
            for c in 0..3 {
                let mut plus = x.points().to_vec();
                let mut minus = plus.clone();
                plus[i][c] += h;
                minus[i][c] -= h;
                num[i][c] = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
            }
        }
        let norm: f64 = num.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = analytic
            .iter()
            .flatten()
            .zip(num.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut net = small_net(8, 2, 19);
        net.randomize_output(&mut RandomSource::new(20), 0.5);
        let x = random_cloud(3, 21);
        let mut rng = RandomSource::new(22);
        let cot: Vec<[f64; 3]> = (0..3).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
        let t = 0.5;

        let (_, trace) = net.forward(x.points(), t);
        let mut grad = vec![0.0; net.param_len()];
        net.backward(&trace, &cot, Some(&mut grad));

        let scalar = |net: &NetDenoiser| -> f64 {
            let d = net.denoise(&x, t);
            d.points()
                .iter()
                .zip(&cot)
                .map(|(dp, cp)| dp[0] * cp[0] + dp[1] * cp[1] + dp[2] * cp[2])
                .sum()
        };
        let h = 1e-5;
        let mut worst = 0.0_f64;
        let mut probe = net.clone();
        for k in 0..net.param_len() {
            let orig = net.params()[k];
            probe.params_mut()[k] = orig + h;
            let up = scalar(&probe);
            probe.params_mut()[k] = orig - h;
            let down = scalar(&probe);
            probe.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[k].abs()).max(1e-6);
            worst = worst.max((fd - grad[k]).abs() / denom);
        }
        assert!(worst < 1e-4, "worst parameter gradient error {worst}");
    }

    #[test]
    fn params_round_trip() {
        let mut net = small_net(10, 2, 23);
        net.randomize_output(&mut RandomSource::new(24), 0.3);
        let saved = net.params().to_vec();
        let rebuilt = NetDenoiser::from_params(net.arch(), net.c_noise_scale(), &saved).unwrap();
        assert_eq!(rebuilt.params(), net.params());
        let x = random_cloud(5, 25);
        assert_eq!(rebuilt.denoise(&x, 0.8).points(), net.denoise(&x, 0.8).points());
    }

    #[test]
    fn set_params_rejects_bad_input() {
        let mut net = small_net(8, 2, 26);
        assert!(net.set_params(&[0.0]).is_err());
        let mut bad = net.params().to_vec();
        bad[0] = f64::NAN;
        assert!(net.set_params(&bad).is_err());
    }
}
