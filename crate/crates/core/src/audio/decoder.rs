//! Fully connected image decoder with hand-written reverse mode.
//!
//! Each hidden block is `Linear -> LayerNorm -> GELU -> Dropout`; the output
//! block is `Linear -> sigmoid`, reshaped to `H x W`. Activations are stored
//! row-major `[batch, width]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Mat, Scalar};
use super::PooledFeature;
use crate::error::{Error, Result};
use crate::trajectory::GridSize;

pub const DROPOUT_RATE: f64 = 0.1;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl DecoderDims {
    /// Hidden widths 1024, 2048, 2048.
    pub fn standard(input: usize, grid: GridSize) -> Self {
        Self {
            input,
            hidden: vec![1024, 2048, 2048],
            height: grid.height,
            width: grid.width,
        }
    }

    pub fn output(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output() == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate decoder dims {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, output layer last.
    fn linear_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input];
        widths.extend(&self.hidden);
        widths.push(self.output());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormOffset,
}

pub struct Tensor<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [T],
}

#[derive(Debug, Clone, PartialEq)]
struct Linear<T> {
    /// `[out, in]` row-major.
    weight: Vec<T>,
    bias: Vec<T>,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Norm<T> {
    gain: Vec<T>,
    offset: Vec<T>,
}

/// Decoder weights. Also used as the container for their gradients.
#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    dims: DecoderDims,
    linears: Vec<Linear<T>>,
    norms: Vec<Norm<T>>,
    version: u64,
}

/// Equal when dims and values match; the cache version is ignored.
impl<T: PartialEq> PartialEq for DecoderParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.linears == other.linears && self.norms == other.norms
    }
}

impl<T: Scalar> DecoderParams<T> {
    pub fn zeros(dims: DecoderDims) -> Result<Self> {
        dims.validate()?;
        let shapes = dims.linear_shapes();
        let linears = shapes
            .iter()
            .map(|&(i, o)| Linear {
                weight: vec![T::zero(); i * o],
                bias: vec![T::zero(); o],
                fan_in: i,
                fan_out: o,
            })
            .collect();
        let norms = dims
            .hidden
            .iter()
            .map(|&h| Norm {
                gain: vec![T::zero(); h],
                offset: vec![T::zero(); h],
            })
            .collect();
        Ok(Self {
            dims,
            linears,
            norms,
            version: 0,
        })
    }

    /// Uniform weights in `+-1/sqrt(fan_in)`, zero biases, unit norm gains.
    pub fn init(dims: DecoderDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut p.linears {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for w in &mut l.weight {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        for n in &mut p.norms {
            n.gain.fill(T::one());
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims.clone()).expect("dims already validated")
    }

    pub fn dims(&self) -> &DecoderDims {
        &self.dims
    }

    /// Incremented on every mutable access; forward caches record it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// All tensors in a fixed order.
    pub fn tensors(&self) -> Vec<Tensor<'_, T>> {
        let mut out = Vec::new();
        for (i, l) in self.linears.iter().enumerate() {
            out.push(Tensor {
                name: format!("linear{i}.weight"),
                kind: ParamKind::Weight,
                shape: vec![l.fan_out, l.fan_in],
                data: &l.weight,
            });
            out.push(Tensor {
                name: format!("linear{i}.bias"),
                kind: ParamKind::Bias,
                shape: vec![l.fan_out],
                data: &l.bias,
            });
            if let Some(n) = self.norms.get(i) {
                out.push(Tensor {
                    name: format!("norm{i}.gain"),
                    kind: ParamKind::NormGain,
                    shape: vec![n.gain.len()],
                    data: &n.gain,
                });
                out.push(Tensor {
                    name: format!("norm{i}.offset"),
                    kind: ParamKind::NormOffset,
                    shape: vec![n.offset.len()],
                    data: &n.offset,
                });
            }
        }
        out
    }

    /// Same order as [`Self::tensors`]; invalidates forward caches.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        self.version += 1;
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for (i, l) in self.linears.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("linear{i}.weight"),
                kind: ParamKind::Weight,
                data: &mut l.weight,
            });
            out.push(TensorMut {
                name: format!("linear{i}.bias"),
                kind: ParamKind::Bias,
                data: &mut l.bias,
            });
            if let Some(n) = norms.next() {
                out.push(TensorMut {
                    name: format!("norm{i}.gain"),
                    kind: ParamKind::NormGain,
                    data: &mut n.gain,
                });
                out.push(TensorMut {
                    name: format!("norm{i}.offset"),
                    kind: ParamKind::NormOffset,
                    data: &mut n.offset,
                });
            }
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(T::zero());
        }
    }

    pub fn map_from<U: Scalar>(other: &DecoderParams<U>) -> Self {
        let mut p = Self::zeros(other.dims.clone()).expect("dims already validated");
        for (dst, src) in p.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = T::from(*s).expect("finite parameter");
            }
        }
        p.version = 0;
        p
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = *d + *s;
            }
        }
    }
}

/// Inference or training (dropout active, mask drawn from `seed`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    version: u64,
    batch: usize,
    inputs: Vec<Vec<T>>,
    xhat: Vec<Vec<T>>,
    inv_std: Vec<Vec<T>>,
    pre_act: Vec<Vec<T>>,
    masks: Vec<Option<Vec<T>>>,
    output: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Sigmoid outputs `[batch, H * W]`.
    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Stateless decoder operations over a parameter set.
pub struct Decoder;

impl Decoder {
    fn linear<T: Scalar>(l: &Linear<T>, x: &[T], batch: usize) -> Vec<T> {
        let mut y = Vec::with_capacity(batch * l.fan_out);
        for _ in 0..batch {
            y.extend_from_slice(&l.bias);
        }
        gemm(
            Mat::rm(x, batch, l.fan_in),
            Mat::rm(&l.weight, l.fan_out, l.fan_in).t(),
            T::one(),
            &mut y,
        );
        y
    }

    /// Batched forward pass; `inputs` is `[batch, input]` row-major.
    pub fn forward<T: Scalar>(
        params: &DecoderParams<T>,
        inputs: &[T],
        batch: usize,
        mode: Mode,
    ) -> Result<ForwardCache<T>> {
        let d = params.dims.input;
        if batch == 0 {
            return Err(Error::EmptyInput("decoder batch".into()));
        }
        if inputs.len() != batch * d {
            return Err(Error::DimensionMismatch {
                expected: batch * d,
                got: inputs.len(),
            });
        }
        let mut rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        };
        let keep_scale = T::lit(1.0 / (1.0 - DROPOUT_RATE));
        let eps = T::lit(LN_EPS);
        let mut cache = ForwardCache {
            version: params.version,
            batch,
            inputs: Vec::new(),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            pre_act: Vec::new(),
            masks: Vec::new(),
            output: Vec::new(),
        };
        let mut x = inputs.to_vec();
        for (l, n) in params.linears.iter().zip(&params.norms) {
            let h = l.fan_out;
            let z = Self::linear(l, &x, batch);
            cache.inputs.push(std::mem::take(&mut x));
            let mut xhat = vec![T::zero(); batch * h];
            let mut inv = vec![T::zero(); batch];
            let mut pre = vec![T::zero(); batch * h];
            let hf = T::from_usize(h).expect("width");
            for b in 0..batch {
                let row = &z[b * h..(b + 1) * h];
                let mean = row.iter().copied().sum::<T>() / hf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hf;
                let is = T::one() / (var + eps).sqrt();
                inv[b] = is;
                for j in 0..h {
                    let xh = (row[j] - mean) * is;
                    xhat[b * h + j] = xh;
                    pre[b * h + j] = n.gain[j] * xh + n.offset[j];
                }
            }
            let mut act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
            let mask = rng.as_mut().map(|r| {
                (0..batch * h)
                    .map(|_| {
                        if r.random::<f64>() < DROPOUT_RATE {
                            T::zero()
                        } else {
                            keep_scale
                        }
                    })
                    .collect::<Vec<T>>()
            });
            if let Some(m) = &mask {
                act.iter_mut().zip(m).for_each(|(a, m)| *a = *a * *m);
            }
            cache.xhat.push(xhat);
            cache.inv_std.push(inv);
            cache.pre_act.push(pre);
            cache.masks.push(mask);
            x = act;
        }
        let out_layer = params.linears.last().expect("output layer");
        let logits = Self::linear(out_layer, &x, batch);
        cache.inputs.push(x);
        cache.output = logits.into_iter().map(sigmoid).collect();
        Ok(cache)
    }

    /// Reverse pass. `upstream` is `dL/d(output)` in `[batch, H * W]`.
    /// Writes parameter gradients into `grads` (overwriting) and returns `dL/d(inputs)`.
    pub fn backward<T: Scalar>(
        params: &DecoderParams<T>,
        cache: &ForwardCache<T>,
        upstream: &[T],
        grads: &mut DecoderParams<T>,
    ) -> Result<Vec<T>> {
        if cache.version != params.version {
            return Err(Error::StaleCache);
        }
        if grads.dims != params.dims {
            return Err(Error::ShapeMismatch("gradient container dims".into()));
        }
        let batch = cache.batch;
        if upstream.len() != cache.output.len() {
            return Err(Error::DimensionMismatch {
                expected: cache.output.len(),
                got: upstream.len(),
            });
        }
        let mut delta: Vec<T> = upstream
            .iter()
            .zip(&cache.output)
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect();
        let nl = params.linears.len();
        for li in (0..nl).rev() {
            let l = &params.linears[li];
            let g = &mut grads.linears[li];
            let x = &cache.inputs[li];
            // dW = delta^T x, db = column sums of delta.
            gemm(
                Mat::rm(&delta, batch, l.fan_out).t(),
                Mat::rm(x, batch, l.fan_in),
                T::zero(),
                &mut g.weight,
            );
            for (j, gb) in g.bias.iter_mut().enumerate() {
                *gb = (0..batch).map(|b| delta[b * l.fan_out + j]).sum();
            }
            let mut dx = vec![T::zero(); batch * l.fan_in];
            gemm(
                Mat::rm(&delta, batch, l.fan_out),
                Mat::rm(&l.weight, l.fan_out, l.fan_in),
                T::zero(),
                &mut dx,
            );
            if li == 0 {
                grads.version += 1;
                return Ok(dx);
            }
            // Back through dropout, GELU and layer norm of hidden block li - 1.
            let hi = li - 1;
            let h = l.fan_in;
            let n = &params.norms[hi];
            let gn = &mut grads.norms[hi];
            if let Some(m) = &cache.masks[hi] {
                dx.iter_mut().zip(m).for_each(|(d, m)| *d = *d * *m);
            }
            let pre = &cache.pre_act[hi];
            dx.iter_mut()
                .zip(pre)
                .for_each(|(d, &p)| *d = *d * gelu_grad(p));
            let xhat = &cache.xhat[hi];
            gn.gain.fill(T::zero());
            gn.offset.fill(T::zero());
            for b in 0..batch {
                for j in 0..h {
                    let dy = dx[b * h + j];
                    gn.gain[j] = gn.gain[j] + dy * xhat[b * h + j];
                    gn.offset[j] = gn.offset[j] + dy;
                }
            }
            let hf = T::from_usize(h).expect("width");
            for b in 0..batch {
                let row = &mut dx[b * h..(b + 1) * h];
                let xh = &xhat[b * h..(b + 1) * h];
                for (d, &g) in row.iter_mut().zip(&n.gain) {
                    *d = *d * g;
                }
                let mean_d = row.iter().copied().sum::<T>() / hf;
                let mean_dx = row.iter().zip(xh).map(|(&d, &x)| d * x).sum::<T>() / hf;
                let is = cache.inv_std[hi][b];
                for (d, &x) in row.iter_mut().zip(xh) {
                    *d = is * (*d - mean_d - x * mean_dx);
                }
            }
            delta = dx;
        }
        unreachable!("the first linear layer returns")
    }

    /// Single-sample inference, output image `[H, W]` in `(0, 1)`.
    pub fn decode<T: Scalar>(
        params: &DecoderParams<T>,
        h: &PooledFeature,
        mode: Mode,
    ) -> Result<ndarray::Array2<f64>> {
        if h.dim() != params.dims.input {
            return Err(Error::DimensionMismatch {
                expected: params.dims.input,
                got: h.dim(),
            });
        }
        let x: Vec<T> = h.0.iter().map(|&v| T::lit(v)).collect();
        let cache = Self::forward(params, &x, 1, mode)?;
        let (hh, ww) = (params.dims.height, params.dims.width);
        Ok(ndarray::Array2::from_shape_fn((hh, ww), |(i, j)| {
            cache.output[i * ww + j].to_f64().expect("finite")
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DecoderDims {
        DecoderDims {
            input: 8,
            hidden: vec![16, 32],
            height: 4,
            width: 4,
        }
    }

    fn inputs(batch: usize) -> Vec<f64> {
        (0..batch * 8)
            .map(|i| ((i * 13 % 17) as f64 / 8.0) - 1.0)
            .collect()
    }

    #[test]
    fn zero_params_give_half() {
        let p = DecoderParams::<f64>::zeros(tiny()).unwrap();
        let img = Decoder::decode(&p, &PooledFeature(vec![3.0; 8]), Mode::Eval).unwrap();
        assert!(img.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn standard_dims_and_param_count() {
        let d = DecoderDims::standard(768, GridSize::square(84));
        let p = DecoderParams::<f32>::zeros(d.clone()).unwrap();
        let want = 768 * 1024
            + 1024
            + 1024 * 2048
            + 2048
            + 2048 * 2048
            + 2048
            + 2048 * 7056
            + 7056
            + 2 * (1024 + 2048 + 2048);
        assert_eq!(p.num_params(), want);
        assert_eq!(p.dims().input, 768);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = DecoderParams::<f64>::init(tiny(), 1).unwrap();
        assert!(matches!(
            Decoder::decode(&p, &PooledFeature(vec![0.0; 7]), Mode::Eval),
            Err(Error::DimensionMismatch {
                expected: 8,
                got: 7
            })
        ));
    }

    #[test]
    fn outputs_in_open_unit_interval_and_dropout_deterministic() {
        let p = DecoderParams::<f64>::init(tiny(), 4).unwrap();
        let x = inputs(3);
        let a = Decoder::forward(&p, &x, 3, Mode::Train { seed: 9 }).unwrap();
        let b = Decoder::forward(&p, &x, 3, Mode::Train { seed: 9 }).unwrap();
        assert_eq!(a.output(), b.output());
        assert_eq!(a.masks, b.masks);
        let c = Decoder::forward(&p, &x, 3, Mode::Train { seed: 10 }).unwrap();
        assert_ne!(a.masks, c.masks);
        assert!(a.output().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    fn loss(p: &DecoderParams<f64>, x: &[f64], batch: usize, up: &[f64]) -> f64 {
        let c = Decoder::forward(p, x, batch, Mode::Eval).unwrap();
        c.output().iter().zip(up).map(|(o, u)| o * u).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut p = DecoderParams::<f64>::init(tiny(), 7).unwrap();
        // Move norm parameters off their defaults so their gradients are exercised.
        for t in p.tensors_mut() {
            if matches!(
                t.kind,
                ParamKind::NormGain | ParamKind::NormOffset | ParamKind::Bias
            ) {
                for (i, v) in t.data.iter_mut().enumerate() {
                    *v += 0.1 * ((i as f64) * 0.37).sin();
                }
            }
        }
        let batch = 2;
        let x = inputs(batch);
        let up: Vec<f64> = (0..batch * 16).map(|i| ((i as f64) * 0.61).cos()).collect();
        let cache = Decoder::forward(&p, &x, batch, Mode::Eval).unwrap();
        let mut g = p.zeros_like();
        let dx = Decoder::backward(&p, &cache, &up, &mut g).unwrap();

        // Fourth-order central stencil; second-order truncation alone is
        // ~1e-9 here, which is not small next to the tiniest gradient entries.
        let h = 1e-4;
        let stencil = |f: &dyn Fn(f64) -> f64| {
            (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
        };
        let mut worst: f64 = 0.0;
        let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (ti, grad) in analytic.iter().enumerate() {
            for k in 0..grad.len() {
                let fd = stencil(&|d| {
                    let mut q = p.clone();
                    q.tensors_mut()[ti].data[k] += d;
                    loss(&q, &x, batch, &up)
                });
                let rel = (grad[k] - fd).abs() / fd.abs().max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(
            worst < 1e-4,
            "max relative parameter gradient error {worst}"
        );

        for k in 0..x.len() {
            let fd = stencil(&|d| {
                let mut a = x.clone();
                a[k] += d;
                loss(&p, &a, batch, &up)
            });
            assert!((dx[k] - fd).abs() / fd.abs().max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn dropout_mask_is_used_in_backward() {
        let p = DecoderParams::<f64>::init(tiny(), 2).unwrap();
        let x = inputs(1);
        let up: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let mode = Mode::Train { seed: 5 };
        let cache = Decoder::forward(&p, &x, 1, mode).unwrap();
        let mut g = p.zeros_like();
        let dx = Decoder::backward(&p, &cache, &up, &mut g).unwrap();
        let h = 1e-5;
        let f = |x: &[f64]| -> f64 {
            let c = Decoder::forward(&p, x, 1, mode).unwrap();
            c.output().iter().zip(&up).map(|(o, u)| o * u).sum()
        };
        for k in 0..8 {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((dx[k] - fd).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn zero_upstream_and_linearity() {
        let p = DecoderParams::<f64>::init(tiny(), 3).unwrap();
        let x = inputs(2);
        let cache = Decoder::forward(&p, &x, 2, Mode::Eval).unwrap();
        let mut g = p.zeros_like();
        let dx = Decoder::backward(&p, &cache, &vec![0.0; 32], &mut g).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|v| *v == 0.0)));

        let mut total = p.zeros_like();
        let mut sum = p.zeros_like();
        Decoder::backward(&p, &cache, &vec![1.0; 32], &mut total).unwrap();
        for k in 0..32 {
            let mut e = vec![0.0; 32];
            e[k] = 1.0;
            let mut gk = p.zeros_like();
            Decoder::backward(&p, &cache, &e, &mut gk).unwrap();
            sum.accumulate(&gk);
        }
        for (a, b) in total.tensors().iter().zip(sum.tensors()) {
            assert!(a
                .data
                .iter()
                .zip(b.data)
                .all(|(x, y)| (x - y).abs() < 1e-10));
        }
    }

    #[test]
    fn stale_cache_detected() {
        let mut p = DecoderParams::<f64>::init(tiny(), 3).unwrap();
        let cache = Decoder::forward(&p, &inputs(1), 1, Mode::Eval).unwrap();
        p.tensors_mut()[0].data[0] += 1.0;
        let mut g = p.zeros_like();
        assert!(matches!(
            Decoder::backward(&p, &cache, &[0.0; 16], &mut g),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn f32_matches_f64() {
        let p64 = DecoderParams::<f64>::init(tiny(), 11).unwrap();
        let p32 = DecoderParams::<f32>::map_from(&p64);
        let h = PooledFeature(inputs(1));
        let a = Decoder::decode(&p64, &h, Mode::Eval).unwrap();
        let b = Decoder::decode(&p32, &h, Mode::Eval).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    }
}
