//! Fused CPU kernels with hand-written backward passes. Composing these from
//! primitive tensor ops costs several times more on a single core.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => Err(candle_core::Error::Msg("fused op needs a contiguous input".into())),
    }
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $f:expr) => {
        match $s {
            CpuStorage::F32(v) => CpuStorage::F32($f(contiguous(v, $l)?)),
            CpuStorage::F64(v) => CpuStorage::F64($f(contiguous(v, $l)?)),
            _ => return Err(candle_core::Error::Msg("fused op supports f32 and f64".into())),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            _ => return Err(candle_core::Error::Msg("fused op needs matching f32 or f64 inputs".into())),
        }
    };
}

macro_rules! dispatch3 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, $f:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => {
                CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?, contiguous(c, $l3)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => {
                CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?, contiguous(c, $l3)?))
            }
            _ => return Err(candle_core::Error::Msg("fused op needs matching f32 or f64 inputs".into())),
        }
    };
}

trait Real: WithDType + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Sub<Output = Self> {
    fn tanh(self) -> Self;
    fn lit(v: f64) -> Self {
        Self::from_f64(v)
    }
}

impl Real for f32 {
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
}

impl Real for f64 {
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

fn gelu_fwd<T: Real>(x: &[T]) -> Vec<T> {
    let (half, one, c, a) = (T::lit(0.5), T::lit(1.0), T::lit(GELU_C), T::lit(GELU_A));
    x.iter()
        .map(|&v| half * v * (one + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

fn gelu_bwd<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
    let (half, one, three, c, a) = (T::lit(0.5), T::lit(1.0), T::lit(3.0), T::lit(GELU_C), T::lit(GELU_A));
    x.iter()
        .zip(g)
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let d = half * (one + t) + half * v * (one - t * t) * c * (one + three * a * v * v);
            d * g
        })
        .collect()
}

struct Gelu;
struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((dispatch1!(s, l, gelu_fwd), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((dispatch2!(s1, l1, s2, l2, gelu_bwd), l1.shape().clone()))
    }
}

/// Tanh-approximated GELU, as used by GPT-2.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

fn row_stats<T: WithDType>(row: &[T], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d;
    let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

struct Standardize {
    eps: f64,
    width: usize,
}

struct StandardizeGrad {
    eps: f64,
    width: usize,
}

impl Standardize {
    fn run<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(self.width) {
            let (mean, inv) = row_stats(row, self.eps);
            out.extend(row.iter().map(|v| T::from_f64((v.to_f64() - mean) * inv)));
        }
        out
    }
}

impl StandardizeGrad {
    fn run<T: WithDType>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        let d = self.width as f64;
        for (row, grow) in x.chunks(self.width).zip(g.chunks(self.width)) {
            let (mean, inv) = row_stats(row, self.eps);
            let (mut g_mean, mut gy_mean) = (0.0, 0.0);
            for (v, gv) in row.iter().zip(grow) {
                let y = (v.to_f64() - mean) * inv;
                g_mean += gv.to_f64();
                gy_mean += gv.to_f64() * y;
            }
            g_mean /= d;
            gy_mean /= d;
            out.extend(row.iter().zip(grow).map(|(v, gv)| {
                let y = (v.to_f64() - mean) * inv;
                T::from_f64(inv * (gv.to_f64() - g_mean - y * gy_mean))
            }));
        }
        out
    }
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((dispatch1!(s, l, |x| self.run(x)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = StandardizeGrad {
            eps: self.eps,
            width: self.width,
        };
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

impl CustomOp2 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "standardize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((dispatch2!(s1, l1, s2, l2, |x, g| self.run(x, g)), l1.shape().clone()))
    }
}

/// `(x - mean) / sqrt(var + eps)` over the last axis (biased variance).
pub fn standardize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let width = *x.dims().last().unwrap_or(&1);
    Ok(x.contiguous()?.apply_op1(Standardize { eps, width })?)
}

/// Sums rows of a (.., width) buffer into one width-long row.
struct ColumnSum {
    width: usize,
}

impl CustomOp1 for ColumnSum {
    fn name(&self) -> &'static str {
        "column-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let w = self.width;
        Ok((dispatch1!(s, l, |x| column_sum(x, w)), Shape::from(w)))
    }
}

fn column_sum<T: WithDType>(x: &[T], width: usize) -> Vec<T> {
    let mut acc = vec![0f64; width];
    for row in x.chunks(width) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.to_f64();
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

struct AddBias {
    width: usize,
}

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "add-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType + std::ops::AddAssign>(x: &[T], b: &[T]) -> Vec<T> {
            let mut out = x.to_vec();
            for row in out.chunks_mut(b.len()) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
            out
        }
        Ok((dispatch2!(s1, l1, s2, l2, run), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let db = grad.contiguous()?.apply_op1_no_bwd(&ColumnSum { width: self.width })?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

/// `x + b` with `b` broadcast over all leading axes of `x`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let width = b.elem_count();
    if x.dims().last() != Some(&width) {
        return Err(crate::error::structural!("bias of {width} for input {:?}", x.dims()));
    }
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, AddBias { width })?)
}

struct LayerNormOp {
    eps: f64,
    width: usize,
}

impl LayerNormOp {
    fn fwd<T: WithDType>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(self.width) {
            let (mean, inv) = row_stats(row, self.eps);
            out.extend(
                row.iter()
                    .zip(w.iter().zip(b))
                    .map(|(v, (wv, bv))| T::from_f64((v.to_f64() - mean) * inv * wv.to_f64() + bv.to_f64())),
            );
        }
        out
    }
}

/// Input gradient of the affine LayerNorm: arguments (x, weight, grad).
struct LayerNormGradX {
    eps: f64,
    width: usize,
}

impl CustomOp3 for LayerNormGradX {
    fn name(&self) -> &'static str {
        "layer-norm-grad-x"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (eps, width) = (self.eps, self.width);
        let out = dispatch3!(s1, l1, s2, l2, s3, l3, |x, w, g| layer_norm_grad_x(x, w, g, eps, width));
        Ok((out, l1.shape().clone()))
    }
}

fn layer_norm_grad_x<T: WithDType>(x: &[T], w: &[T], g: &[T], eps: f64, width: usize) -> Vec<T> {
    let d = width as f64;
    let mut out = Vec::with_capacity(x.len());
    let mut dn = vec![0f64; width];
    for (row, grow) in x.chunks(width).zip(g.chunks(width)) {
        let (mean, inv) = row_stats(row, eps);
        let (mut dn_mean, mut dnn_mean) = (0.0, 0.0);
        for i in 0..width {
            dn[i] = grow[i].to_f64() * w[i].to_f64();
            dn_mean += dn[i];
            dnn_mean += dn[i] * (row[i].to_f64() - mean) * inv;
        }
        dn_mean /= d;
        dnn_mean /= d;
        for i in 0..width {
            let n = (row[i].to_f64() - mean) * inv;
            out.push(T::from_f64(inv * (dn[i] - dn_mean - n * dnn_mean)));
        }
    }
    out
}

/// Weight and bias gradients stacked as a (2, width) buffer: arguments (x, grad).
struct LayerNormGradParams {
    eps: f64,
    width: usize,
}

impl CustomOp2 for LayerNormGradParams {
    fn name(&self) -> &'static str {
        "layer-norm-grad-params"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (eps, width) = (self.eps, self.width);
        let out = dispatch2!(s1, l1, s2, l2, |x, g| layer_norm_grad_params(x, g, eps, width));
        Ok((out, Shape::from((2, width))))
    }
}

fn layer_norm_grad_params<T: WithDType>(x: &[T], g: &[T], eps: f64, width: usize) -> Vec<T> {
    let mut dw = vec![0f64; width];
    let mut db = vec![0f64; width];
    for (row, grow) in x.chunks(width).zip(g.chunks(width)) {
        let (mean, inv) = row_stats(row, eps);
        for i in 0..width {
            let gv = grow[i].to_f64();
            dw[i] += gv * (row[i].to_f64() - mean) * inv;
            db[i] += gv;
        }
    }
    dw.into_iter().chain(db).map(T::from_f64).collect()
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((dispatch3!(s1, l1, s2, l2, s3, l3, |x, w, b| self.fwd(x, w, b)), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (eps, width) = (self.eps, self.width);
        let dx = x.apply_op3_no_bwd(w, &grad, &LayerNormGradX { eps, width })?;
        let dp = x.apply_op2_no_bwd(&grad, &LayerNormGradParams { eps, width })?;
        Ok((Some(dx), Some(dp.get(0)?), Some(dp.get(1)?)))
    }
}

/// `standardize(x) * weight + bias` over the last axis.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let width = *x.dims().last().unwrap_or(&1);
    if weight.elem_count() != width || bias.elem_count() != width {
        return Err(crate::error::structural!("layer norm parameters do not match width {width}"));
    }
    let op = LayerNormOp { eps, width };
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, op)?)
}
