//! Conditional masked autoregressive flow.
//!
//! Density evaluation maps data to noise through every block; sampling runs
//! the blocks backwards. Each block reverses the dimension order and applies
//! one affine MADE. Before the blocks, every data dimension passes through a
//! fixed elementwise transform ([`DimTransform`]) and a fitted standardizer.

mod checkpoint;
mod made;
mod train;

pub use checkpoint::CHECKPOINT_MAGIC;
pub use made::{row_matrix, HiddenWeights, MadeArch, MadeCache, MadeLayer, MadeWeights};
pub use train::{gradcheck, train, AdamConfig, GradcheckReport, TrainConfig, TrainData, TrainHistory};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{ns, stream};

/// Fixed elementwise map applied before standardization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimTransform {
    Identity,
    /// `u = ln(x + shift)`.
    Log { shift: f64 },
}

impl DimTransform {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            DimTransform::Identity => x,
            DimTransform::Log { shift } => (x + shift).ln(),
        }
    }

    pub fn invert(&self, u: f64) -> f64 {
        match *self {
            DimTransform::Identity => u,
            DimTransform::Log { shift } => u.exp() - shift,
        }
    }

    /// `ln |du/dx|`.
    pub fn log_abs_deriv(&self, x: f64) -> f64 {
        match *self {
            DimTransform::Identity => 0.0,
            DimTransform::Log { shift } => -(x + shift).ln(),
        }
    }

    pub fn in_domain(&self, x: f64) -> bool {
        match *self {
            DimTransform::Identity => x.is_finite(),
            DimTransform::Log { shift } => x.is_finite() && x + shift > 0.0,
        }
    }
}

/// Per-dimension mean and sd for the (transformed) parameters and the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub theta_mean: Vec<f64>,
    pub theta_sd: Vec<f64>,
    pub ctx_mean: Vec<f64>,
    pub ctx_sd: Vec<f64>,
}

/// Below this an sd is replaced by 1 so constant columns stay finite.
const MIN_SD: f64 = 1e-12;

fn column_stats(a: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.nrows() as f64;
    let mean = a.mean_axis(Axis(0)).expect("non-empty");
    let sd = a
        .axis_iter(Axis(1))
        .zip(mean.iter())
        .map(|(col, m)| {
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if s > MIN_SD && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean.to_vec(), sd)
}

impl Standardizer {
    /// Population mean and sd of each column.
    pub fn fit(theta: ArrayView2<f64>, ctx: ArrayView2<f64>) -> Result<Self> {
        if theta.nrows() == 0 || ctx.nrows() == 0 {
            return Err(Error::validation("cannot fit a standardizer on zero rows"));
        }
        let (theta_mean, theta_sd) = column_stats(theta);
        let (ctx_mean, ctx_sd) = column_stats(ctx);
        let s = Standardizer {
            theta_mean,
            theta_sd,
            ctx_mean,
            ctx_sd,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn identity(dim: usize, ctx_dim: usize) -> Self {
        Standardizer {
            theta_mean: vec![0.0; dim],
            theta_sd: vec![1.0; dim],
            ctx_mean: vec![0.0; ctx_dim],
            ctx_sd: vec![1.0; ctx_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |m: &[f64], s: &[f64]| {
            m.len() == s.len()
                && m.iter().all(|v| v.is_finite())
                && s.iter().all(|v| v.is_finite() && *v > 0.0)
        };
        if !ok(&self.theta_mean, &self.theta_sd) || !ok(&self.ctx_mean, &self.ctx_sd) {
            return Err(Error::validation("standardizer needs finite means and positive sds"));
        }
        Ok(())
    }

    pub fn standardize_theta(&self, t: &mut Array2<f64>) {
        for (mut col, (m, s)) in t
            .axis_iter_mut(Axis(1))
            .zip(self.theta_mean.iter().zip(&self.theta_sd))
        {
            col.mapv_inplace(|v| (v - m) / s);
        }
    }

    pub fn standardize_ctx(&self, y: ArrayView2<f64>) -> Array2<f64> {
        let mut out = y.to_owned();
        for (mut col, (m, s)) in out
            .axis_iter_mut(Axis(1))
            .zip(self.ctx_mean.iter().zip(&self.ctx_sd))
        {
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn log_sd_sum(&self) -> f64 {
        self.theta_sd.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArch {
    pub dim: usize,
    pub ctx_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl FlowArch {
    /// Five blocks of two 50-unit tanh layers.
    pub fn standard(dim: usize, ctx_dim: usize) -> Self {
        FlowArch {
            dim,
            ctx_dim,
            blocks: 5,
            hidden: 50,
            hidden_layers: 2,
        }
    }

    pub fn made(&self) -> MadeArch {
        MadeArch {
            dim: self.dim,
            ctx_dim: self.ctx_dim,
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.blocks == 0 || self.hidden == 0 || self.hidden_layers == 0 {
            return Err(Error::validation("flow dimensions, blocks and widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowBlock {
    /// Column `i` of the MADE input is column `perm[i]` of the block input.
    pub perm: Vec<usize>,
    pub made: MadeLayer,
}

impl FlowBlock {
    fn permute(&self, v: ArrayView2<f64>) -> Array2<f64> {
        v.select(Axis(1), &self.perm)
    }

    fn unpermute(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut v = Array2::zeros(x.raw_dim());
        for (i, &p) in self.perm.iter().enumerate() {
            v.column_mut(p).assign(&x.column(i));
        }
        v
    }
}

/// How [`FlowModel::sample`] treats draws outside a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportPolicy {
    /// Discard the whole row and draw again.
    Reject,
    /// Move the component onto the nearest bound.
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub policy: Vec<SupportPolicy>,
}

impl SupportBox {
    /// Returns false if a `Reject` component falls outside; clamps the rest.
    pub fn admit(&self, row: &mut [f64]) -> bool {
        for (i, v) in row.iter_mut().enumerate() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if *v >= lo && *v <= hi {
                continue;
            }
            match self.policy[i] {
                SupportPolicy::Reject => return false,
                SupportPolicy::Clamp => *v = if v.is_nan() { lo } else { v.clamp(lo, hi) },
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `n x dim` draws in data units.
    pub values: Array2<f64>,
    pub attempted: usize,
    pub rejected: usize,
}

impl SampleOutput {
    pub fn leakage(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.rejected as f64 / self.attempted as f64
        }
    }
}

/// Rejection stops once this many candidates per requested draw were tried.
pub const MAX_ATTEMPTS_PER_DRAW: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub arch: FlowArch,
    pub blocks: Vec<FlowBlock>,
    pub transforms: Vec<DimTransform>,
    pub standardizer: Option<Standardizer>,
    pub seed: u64,
}

const LN_2PI: f64 = 1.8378770664093453;

impl FlowModel {
    /// Randomly initialized model with reverse permutations. Output layers
    /// start at `+-out_scale`, so `out_scale = 0` gives the identity flow.
    pub fn new(arch: FlowArch, transforms: Vec<DimTransform>, out_scale: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if transforms.len() != arch.dim {
            return Err(Error::validation(format!(
                "{} transforms for a {}-dimensional flow",
                transforms.len(),
                arch.dim
            )));
        }
        let mut rng = stream(seed, ns::TRAIN, 0);
        let perm: Vec<usize> = (0..arch.dim).rev().collect();
        let blocks = (0..arch.blocks)
            .map(|_| FlowBlock {
                perm: perm.clone(),
                made: MadeLayer::random(arch.made(), out_scale, &mut rng),
            })
            .collect();
        Ok(FlowModel {
            arch,
            blocks,
            transforms,
            standardizer: None,
            seed,
        })
    }

    /// Every weight zero: each block is the identity.
    pub fn identity(arch: FlowArch, transforms: Vec<DimTransform>) -> Result<Self> {
        arch.validate()?;
        let perm: Vec<usize> = (0..arch.dim).rev().collect();
        Ok(FlowModel {
            blocks: (0..arch.blocks)
                .map(|_| FlowBlock {
                    perm: perm.clone(),
                    made: MadeLayer::zeros(arch.made()),
                })
                .collect(),
            transforms,
            standardizer: None,
            seed: 0,
            arch,
        })
    }

    pub fn standardizer(&self) -> Result<&Standardizer> {
        self.standardizer
            .as_ref()
            .ok_or_else(|| Error::State("flow standardizer has not been fitted".into()))
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.made.param_count()).sum()
    }

    /// Elementwise transform of raw rows plus the summed log-derivative per row.
    /// Rows with a component outside a transform's domain get `None`.
    pub fn transform_rows(&self, theta: ArrayView2<f64>) -> (Array2<f64>, Vec<Option<f64>>) {
        let mut out = Array2::zeros(theta.raw_dim());
        let mut jac = Vec::with_capacity(theta.nrows());
        for (r, row) in theta.axis_iter(Axis(0)).enumerate() {
            let mut ok = true;
            let mut lj = 0.0;
            for (i, (&x, t)) in row.iter().zip(&self.transforms).enumerate() {
                if t.in_domain(x) {
                    out[[r, i]] = t.apply(x);
                    lj += t.log_abs_deriv(x);
                } else {
                    ok = false;
                }
            }
            jac.push(ok.then_some(lj));
        }
        (out, jac)
    }

    /// Standardized rows to noise: `(z, sum of block logdets per row)`.
    pub fn to_noise(&self, u: ArrayView2<f64>, ctx: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let mut v = u.to_owned();
        let mut logdet = Array1::zeros(u.nrows());
        for b in &self.blocks {
            let x = b.permute(v.view());
            let (z, ld, _) = b.made.forward_cached(x.view(), ctx);
            logdet += &ld;
            v = z;
        }
        (v, logdet)
    }

    /// Noise to standardized rows.
    pub fn from_noise(&self, z: ArrayView2<f64>, ctx: ArrayView2<f64>) -> Array2<f64> {
        let mut v = z.to_owned();
        for b in self.blocks.iter().rev() {
            let x = b.made.inverse_unchecked(v.view(), ctx);
            v = b.unpermute(x.view());
        }
        v
    }

    /// Mean negative log density in standardized space, the training loss.
    pub fn standardized_nll(&self, u: ArrayView2<f64>, ctx: ArrayView2<f64>) -> f64 {
        let (z, logdet) = self.to_noise(u, ctx);
        let n = u.nrows() as f64;
        let sq: f64 = z.iter().map(|v| v * v).sum();
        0.5 * sq / n + 0.5 * self.arch.dim as f64 * LN_2PI - logdet.sum() / n
    }

    /// Log density of raw parameter rows given raw context rows (`ctx` may be a
    /// single shared row). Rows outside the transform domain get `-inf`.
    pub fn log_prob(&self, theta: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Vec<f64>> {
        let st = self.standardizer()?;
        self.check_shapes(theta.ncols(), y.ncols())?;
        let (mut u, jac) = self.transform_rows(theta);
        st.standardize_theta(&mut u);
        let ctx = st.standardize_ctx(y);
        let (z, logdet) = self.to_noise(u.view(), ctx.view());
        let offset = -0.5 * self.arch.dim as f64 * LN_2PI - st.log_sd_sum();
        let out: Vec<f64> = z
            .axis_iter(Axis(0))
            .zip(logdet.iter())
            .zip(jac)
            .map(|((zr, ld), j)| match j {
                Some(j) => offset - 0.5 * zr.dot(&zr) + ld + j,
                None => f64::NEG_INFINITY,
            })
            .collect();
        if out.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric("non-finite log density".into()));
        }
        Ok(out)
    }

    /// Log density of one parameter vector given one observation.
    pub fn log_prob_one(&self, theta: &[f64], y: &[f64]) -> Result<f64> {
        let t = ndarray::ArrayView1::from(theta);
        let c = ndarray::ArrayView1::from(y);
        Ok(self.log_prob(row_matrix(t), row_matrix(c))?[0])
    }

    fn check_shapes(&self, dim: usize, ctx_dim: usize) -> Result<()> {
        if dim != self.arch.dim || ctx_dim != self.arch.ctx_dim {
            return Err(Error::validation(format!(
                "flow expects {}-dim parameters and {}-dim context, got {dim} and {ctx_dim}",
                self.arch.dim, self.arch.ctx_dim
            )));
        }
        Ok(())
    }

    /// Draws `n` rows from the conditional density at observation `y`.
    /// With a support box, rejected rows are redrawn until `n` are accepted
    /// or `MAX_ATTEMPTS_PER_DRAW * n` candidates have been tried.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        n: usize,
        rng: &mut R,
        support: Option<&SupportBox>,
    ) -> Result<SampleOutput> {
        if n == 0 {
            return Err(Error::validation("sample count must be at least 1"));
        }
        let st = self.standardizer()?;
        self.check_shapes(self.arch.dim, y.len())?;
        let d = self.arch.dim;
        let ctx = st.standardize_ctx(row_matrix(ndarray::ArrayView1::from(y)));
        let cap = n.saturating_mul(MAX_ATTEMPTS_PER_DRAW);
        let mut accepted: Vec<f64> = Vec::with_capacity(n * d);
        let mut attempted = 0usize;
        let mut rejected = 0usize;
        while accepted.len() < n * d {
            let want = n - accepted.len() / d;
            let batch = if attempted == 0 { want } else { (want + want / 4 + 8).min(cap - attempted) };
            if batch == 0 {
                return Err(Error::Numeric(format!(
                    "support rejection above {:.0}%: {} of {} candidates rejected",
                    100.0 * (1.0 - 1.0 / MAX_ATTEMPTS_PER_DRAW as f64),
                    rejected,
                    attempted
                )));
            }
            let z = Array2::from_shape_simple_fn((batch, d), || rng.sample::<f64, _>(StandardNormal));
            let u = self.from_noise(z.view(), ctx.view());
            attempted += batch;
            for row in u.axis_iter(Axis(0)) {
                let mut x: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(i, v)| self.transforms[i].invert(v * st.theta_sd[i] + st.theta_mean[i]))
                    .collect();
                if x.iter().any(|v| v.is_nan()) {
                    return Err(Error::Numeric("non-finite flow sample".into()));
                }
                let keep = support.is_none_or(|s| s.admit(&mut x));
                if !keep {
                    rejected += 1;
                } else if accepted.len() < n * d {
                    accepted.extend_from_slice(&x);
                }
            }
        }
        Ok(SampleOutput {
            values: Array2::from_shape_vec((n, d), accepted).expect("n x d values"),
            attempted,
            rejected,
        })
    }

    /// Standardized draws for a standardized context, no transforms or support.
    pub fn sample_standardized<R: Rng + ?Sized>(&self, ctx: ArrayView2<f64>, n: usize, rng: &mut R) -> Array2<f64> {
        let z = Array2::from_shape_simple_fn((n, self.arch.dim), || rng.sample::<f64, _>(StandardNormal));
        self.from_noise(z.view(), ctx)
    }
}

/// Largest absolute difference between two equally shaped arrays.
pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut m = 0.0f64;
    Zip::from(a).and(b).for_each(|x, y| m = m.max((x - y).abs()));
    m
}

#[cfg(test)]
mod tests;
