//! Conditional MADE: a masked feed-forward network emitting a per-dimension
//! shift and log-scale for an affine autoregressive transform.
//!
//! Degrees: input `i` has degree `i`; hidden unit `k` has degree `k mod D`
//! and sees inputs of strictly smaller degree; output `i` sees hidden units
//! of degree `<= i`. Output `i` therefore depends on inputs `< i` only.
//! Context feeds every hidden layer through unmasked weights.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MadeArch {
    pub dim: usize,
    pub ctx_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenWeights {
    /// `hidden x fan_in`, masked.
    pub w: Array2<f64>,
    /// `hidden x ctx_dim`.
    pub c: Array2<f64>,
    pub b: Array1<f64>,
}

/// All trainable tensors of one MADE; also used as its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MadeWeights {
    pub hidden: Vec<HiddenWeights>,
    /// `2 dim x hidden`: rows `0..dim` are shifts, `dim..2 dim` log-scales.
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl MadeWeights {
    pub fn zeros(arch: &MadeArch) -> Self {
        let hidden = (0..arch.hidden_layers)
            .map(|l| HiddenWeights {
                w: Array2::zeros((arch.hidden, if l == 0 { arch.dim } else { arch.hidden })),
                c: Array2::zeros((arch.hidden, arch.ctx_dim)),
                b: Array1::zeros(arch.hidden),
            })
            .collect();
        MadeWeights {
            hidden,
            out_w: Array2::zeros((2 * arch.dim, arch.hidden)),
            out_b: Array1::zeros(2 * arch.dim),
        }
    }

    /// Tensors in checkpoint order: per hidden layer `w, c, b`, then `out_w, out_b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(3 * self.hidden.len() + 2);
        for h in &self.hidden {
            v.push(h.w.as_slice().expect("standard layout"));
            v.push(h.c.as_slice().expect("standard layout"));
            v.push(h.b.as_slice().expect("standard layout"));
        }
        v.push(self.out_w.as_slice().expect("standard layout"));
        v.push(self.out_b.as_slice().expect("standard layout"));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(3 * self.hidden.len() + 2);
        for h in &mut self.hidden {
            v.push(h.w.as_slice_mut().expect("standard layout"));
            v.push(h.c.as_slice_mut().expect("standard layout"));
            v.push(h.b.as_slice_mut().expect("standard layout"));
        }
        v.push(self.out_w.as_slice_mut().expect("standard layout"));
        v.push(self.out_b.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.hidden.len() {
            v.push(format!("hidden{l}.w"));
            v.push(format!("hidden{l}.c"));
            v.push(format!("hidden{l}.b"));
        }
        v.push("out.w".into());
        v.push("out.b".into());
        v
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MadeLayer {
    pub arch: MadeArch,
    pub degrees: Vec<usize>,
    pub weights: MadeWeights,
    hidden_masks: Vec<Array2<f64>>,
    out_mask: Array2<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MadeCache {
    pub x: Array2<f64>,
    pub hs: Vec<Array2<f64>>,
    pub z: Array2<f64>,
    /// `exp(-s)`.
    pub inv_scale: Array2<f64>,
}

impl MadeLayer {
    /// All weights zero: the identity transform.
    pub fn zeros(arch: MadeArch) -> Self {
        assert!(arch.dim >= 1 && arch.hidden >= 1 && arch.hidden_layers >= 1);
        let degrees: Vec<usize> = (0..arch.hidden).map(|k| k % arch.dim).collect();
        let mut hidden_masks = Vec::with_capacity(arch.hidden_layers);
        for l in 0..arch.hidden_layers {
            let m = if l == 0 {
                Array2::from_shape_fn((arch.hidden, arch.dim), |(k, i)| {
                    f64::from(u8::from(i < degrees[k]))
                })
            } else {
                Array2::from_shape_fn((arch.hidden, arch.hidden), |(k, j)| {
                    f64::from(u8::from(degrees[j] <= degrees[k]))
                })
            };
            hidden_masks.push(m);
        }
        let out_mask = Array2::from_shape_fn((2 * arch.dim, arch.hidden), |(o, k)| {
            f64::from(u8::from(degrees[k] <= o % arch.dim))
        });
        MadeLayer {
            weights: MadeWeights::zeros(&arch),
            arch,
            degrees,
            hidden_masks,
            out_mask,
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` for hidden layers, `+-out_scale` for the
    /// output layer, zero biases; masked entries are zero.
    pub fn random<R: Rng + ?Sized>(arch: MadeArch, out_scale: f64, rng: &mut R) -> Self {
        let mut layer = Self::zeros(arch);
        let uniform = |a: &mut Array2<f64>, bound: f64, rng: &mut R| {
            for v in a.iter_mut() {
                *v = if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
            }
        };
        for h in layer.weights.hidden.iter_mut() {
            let fan_in = h.w.ncols() as f64;
            uniform(&mut h.w, 1.0 / fan_in.sqrt(), rng);
            let ctx_bound = if arch.ctx_dim > 0 {
                1.0 / (arch.ctx_dim as f64).sqrt()
            } else {
                0.0
            };
            uniform(&mut h.c, ctx_bound, rng);
        }
        uniform(&mut layer.weights.out_w, out_scale, rng);
        layer.enforce_masks();
        layer
    }

    /// Zero every masked-out weight.
    pub fn enforce_masks(&mut self) {
        for (h, m) in self.weights.hidden.iter_mut().zip(&self.hidden_masks) {
            h.w *= m;
        }
        self.weights.out_w *= &self.out_mask;
    }

    /// Masks aligned with [`MadeWeights::tensors`]; `None` for unmasked tensors.
    pub fn tensor_masks(&self) -> Vec<Option<&[f64]>> {
        let mut v = Vec::new();
        for m in &self.hidden_masks {
            v.push(Some(m.as_slice().expect("standard layout")));
            v.push(None);
            v.push(None);
        }
        v.push(Some(self.out_mask.as_slice().expect("standard layout")));
        v.push(None);
        v
    }

    /// Masks applied to a gradient buffer shaped like the weights.
    pub fn mask_grad(&self, g: &mut MadeWeights) {
        for (h, m) in g.hidden.iter_mut().zip(&self.hidden_masks) {
            h.w *= m;
        }
        g.out_w *= &self.out_mask;
    }

    fn ctx_terms(&self, ctx: ArrayView2<f64>) -> Vec<Array2<f64>> {
        self.weights
            .hidden
            .iter()
            .map(|h| {
                let mut t = ctx.dot(&h.c.t());
                t += &h.b;
                t
            })
            .collect()
    }

    /// Hidden activations; `ctx_terms[l]` broadcasts over rows.
    fn hidden_pass(&self, x: ArrayView2<f64>, ctx_terms: &[Array2<f64>]) -> Vec<Array2<f64>> {
        let mut hs: Vec<Array2<f64>> = Vec::with_capacity(self.arch.hidden_layers);
        for (l, h) in self.weights.hidden.iter().enumerate() {
            let mut a = match l {
                0 => x.dot(&h.w.t()),
                _ => hs[l - 1].dot(&h.w.t()),
            };
            a += &ctx_terms[l];
            a.mapv_inplace(f64::tanh);
            hs.push(a);
        }
        hs
    }

    /// Shift and log-scale for every row: `(mu, s)`, each `n x dim`.
    pub fn conditioner(&self, x: ArrayView2<f64>, ctx: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let hs = self.hidden_pass(x, &self.ctx_terms(ctx));
        let mut out = hs.last().expect("at least one hidden layer").dot(&self.weights.out_w.t());
        out += &self.weights.out_b;
        let d = self.arch.dim;
        (
            out.slice(s![.., ..d]).to_owned(),
            out.slice(s![.., d..]).to_owned(),
        )
    }

    /// Data-to-noise direction: `z = (x - mu) exp(-s)`, `logdet = -sum s`.
    pub fn forward_inverse(&self, x: ArrayView2<f64>, ctx: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let (z, logdet, _) = self.forward_cached(x, ctx);
        if z.iter().chain(logdet.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in MADE forward pass".into()));
        }
        Ok((z, logdet))
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>, ctx: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, MadeCache) {
        let hs = self.hidden_pass(x, &self.ctx_terms(ctx));
        let mut out = hs.last().expect("at least one hidden layer").dot(&self.weights.out_w.t());
        out += &self.weights.out_b;
        let d = self.arch.dim;
        let mu = out.slice(s![.., ..d]);
        let log_scale = out.slice(s![.., d..]);
        let inv_scale = log_scale.mapv(|v| (-v).exp());
        let mut z = &x - &mu;
        z *= &inv_scale;
        let logdet = -log_scale.sum_axis(Axis(1));
        let cache = MadeCache {
            x: x.to_owned(),
            hs,
            z: z.clone(),
            inv_scale,
        };
        (z, logdet, cache)
    }

    /// Backpropagate `g_z = dL/dz` and a per-row weight on `-logdet` into
    /// `grad`; returns `dL/dx`.
    pub fn backward(
        &self,
        cache: &MadeCache,
        ctx: ArrayView2<f64>,
        g_z: ArrayView2<f64>,
        logdet_weight: f64,
        grad: &mut MadeWeights,
    ) -> Array2<f64> {
        let n = g_z.nrows();
        let d = self.arch.dim;
        let mut d_out = Array2::<f64>::zeros((n, 2 * d));
        Zip::from(d_out.slice_mut(s![.., ..d]))
            .and(g_z)
            .and(&cache.inv_scale)
            .for_each(|o, &g, &e| *o = -g * e);
        Zip::from(d_out.slice_mut(s![.., d..]))
            .and(g_z)
            .and(&cache.z)
            .for_each(|o, &g, &z| *o = -g * z + logdet_weight);

        let last = cache.hs.last().expect("at least one hidden layer");
        let mut tmp = Array2::<f64>::zeros(grad.out_w.raw_dim());
        general_mat_mul(1.0, &d_out.t(), last, 0.0, &mut tmp);
        tmp *= &self.out_mask;
        grad.out_w += &tmp;
        grad.out_b += &d_out.sum_axis(Axis(0));

        let mut d_h = d_out.dot(&self.weights.out_w);
        for l in (0..self.arch.hidden_layers).rev() {
            let h = &cache.hs[l];
            Zip::from(&mut d_h).and(h).for_each(|g, &hv| *g *= 1.0 - hv * hv);
            let d_a = d_h;
            let input = if l == 0 { cache.x.view() } else { cache.hs[l - 1].view() };
            let gl = &mut grad.hidden[l];
            let mut tw = Array2::<f64>::zeros(gl.w.raw_dim());
            general_mat_mul(1.0, &d_a.t(), &input, 0.0, &mut tw);
            tw *= &self.hidden_masks[l];
            gl.w += &tw;
            if self.arch.ctx_dim > 0 {
                general_mat_mul(1.0, &d_a.t(), &ctx, 1.0, &mut gl.c);
            }
            gl.b += &d_a.sum_axis(Axis(0));
            d_h = d_a.dot(&self.weights.hidden[l].w);
        }
        let mut g_x = d_h;
        Zip::from(&mut g_x)
            .and(g_z)
            .and(&cache.inv_scale)
            .for_each(|gx, &g, &e| *gx += g * e);
        g_x
    }

    /// Noise-to-data direction, solved one dimension at a time:
    /// `x_i = z_i exp(s_i) + mu_i` with `(mu_i, s_i)` computed from `x_{<i}`.
    ///
    /// `ctx` has one row per sample or a single row shared by all samples.
    pub fn forward_sample(&self, z: ArrayView2<f64>, ctx: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.inverse_unchecked(z, ctx);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in MADE inverse pass".into()));
        }
        Ok(x)
    }

    /// Each hidden unit of degree `m` sees only inputs below `m`, so it is
    /// final once output `m - 1` is known and is computed exactly once, at pass `m`.
    pub(crate) fn inverse_unchecked(&self, z: ArrayView2<f64>, ctx: ArrayView2<f64>) -> Array2<f64> {
        let n = z.nrows();
        let d = self.arch.dim;
        let h = self.arch.hidden;
        let ctx_terms = self.ctx_terms(ctx);
        let groups: Vec<Vec<usize>> = (0..d)
            .map(|g| (0..h).filter(|&k| self.degrees[k] == g).collect())
            .collect();
        let mut x = Array2::<f64>::zeros((n, d));
        let mut hs = vec![Array2::<f64>::zeros((n, h)); self.arch.hidden_layers];
        for (i, group) in groups.iter().enumerate() {
            if !group.is_empty() {
                for (l, layer) in self.weights.hidden.iter().enumerate() {
                    let w = layer.w.select(Axis(0), group);
                    let mut a = match l {
                        0 => x.dot(&w.t()),
                        _ => hs[l - 1].dot(&w.t()),
                    };
                    a += &ctx_terms[l].select(Axis(1), group);
                    a.mapv_inplace(f64::tanh);
                    for (c, &k) in group.iter().enumerate() {
                        hs[l].column_mut(k).assign(&a.column(c));
                    }
                }
            }
            let last = hs.last().expect("at least one hidden layer");
            let mu = last.dot(&self.weights.out_w.row(i)) + self.weights.out_b[i];
            let ls = last.dot(&self.weights.out_w.row(d + i)) + self.weights.out_b[d + i];
            let col: Array1<f64> = Zip::from(z.column(i))
                .and(&mu)
                .and(&ls)
                .map_collect(|&zi, &m, &sv| zi * sv.exp() + m);
            x.column_mut(i).assign(&col);
        }
        x
    }

    pub fn param_count(&self) -> usize {
        self.weights.tensors().iter().map(|t| t.len()).sum()
    }

    /// Number of weights free to train (mask = 1 or unmasked).
    pub fn free_param_count(&self) -> usize {
        self.weights
            .tensors()
            .iter()
            .zip(self.tensor_masks())
            .map(|(t, m)| match m {
                Some(m) => m.iter().filter(|v| **v != 0.0).count(),
                None => t.len(),
            })
            .sum()
    }
}

/// Convenience view of one row as a `1 x n` matrix.
pub fn row_matrix(v: ArrayView1<f64>) -> ArrayView2<f64> {
    v.insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array;

    fn arch(dim: usize) -> MadeArch {
        MadeArch {
            dim,
            ctx_dim: 4,
            hidden: 12,
            hidden_layers: 2,
        }
    }

    fn random_input(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, 0, 0);
        Array::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_weights_are_identity() {
        let layer = MadeLayer::zeros(arch(5));
        let x = random_input(3, 5, 1);
        let c = random_input(3, 4, 2);
        let (z, logdet) = layer.forward_inverse(x.view(), c.view()).unwrap();
        assert_eq!(z, x);
        assert!(logdet.iter().all(|v| *v == 0.0));
        assert_eq!(layer.forward_sample(z.view(), c.view()).unwrap(), x);
    }

    #[test]
    fn constant_log_scale_gives_constant_logdet() {
        let mut layer = MadeLayer::zeros(arch(17));
        layer.weights.out_b.slice_mut(s![17..]).fill(2f64.ln());
        let x = random_input(2, 17, 3);
        let c = random_input(2, 4, 4);
        let (_, logdet) = layer.forward_inverse(x.view(), c.view()).unwrap();
        for v in logdet {
            assert!((v + 17.0 * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_are_strictly_autoregressive() {
        let mut rng = stream(5, 0, 0);
        let layer = MadeLayer::random(arch(6), 0.5, &mut rng);
        let x = random_input(1, 6, 6);
        let c = random_input(1, 4, 7);
        let (mu, ls) = layer.conditioner(x.view(), c.view());
        for j in 0..6 {
            let mut xp = x.clone();
            xp[[0, j]] += 0.731;
            let (mu2, ls2) = layer.conditioner(xp.view(), c.view());
            for i in 0..=j {
                assert_eq!(mu[[0, i]], mu2[[0, i]]);
                assert_eq!(ls[[0, i]], ls2[[0, i]]);
            }
        }
    }

    #[test]
    fn first_output_still_sees_context() {
        let mut rng = stream(8, 0, 0);
        let layer = MadeLayer::random(arch(3), 0.5, &mut rng);
        let x = random_input(1, 3, 9);
        let c = random_input(1, 4, 10);
        let (mu, _) = layer.conditioner(x.view(), c.view());
        let c2 = &c + 0.5;
        let (mu2, _) = layer.conditioner(x.view(), c2.view());
        assert_ne!(mu[[0, 0]], mu2[[0, 0]]);
    }

    #[test]
    fn shared_context_row_broadcasts() {
        let mut rng = stream(11, 0, 0);
        let layer = MadeLayer::random(arch(4), 0.3, &mut rng);
        let z = random_input(5, 4, 12);
        let c = random_input(1, 4, 13);
        let shared = layer.forward_sample(z.view(), c.view()).unwrap();
        let tiled = Array2::from_shape_fn((5, 4), |(_, j)| c[[0, j]]);
        let per_row = layer.forward_sample(z.view(), tiled.view()).unwrap();
        assert_eq!(shared, per_row);
    }
}
