//! 2-D convolution with a CPU-friendly backward pass.
//!
//! candle differentiates `conv2d` through `conv_transpose2d`, whose CPU kernel
//! is several times slower than the forward convolution. Here the input
//! gradient is computed as an ordinary convolution of the zero-stuffed output
//! gradient with the flipped kernel, and gradients are skipped for operands
//! that are not tracked (data images, frozen weights).

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, Device, Layout, Shape, Storage, Tensor};

#[derive(Debug, Clone, Copy)]
struct Conv2dOp {
    padding: usize,
    stride: usize,
    dilation: usize,
}

fn storage_to_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv2d operand must be contiguous".into()))?;
    let dev = Device::Cpu;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], l.shape(), &dev),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], l.shape(), &dev),
        other => Err(candle_core::Error::Msg(format!(
            "conv2d: unsupported dtype {:?}",
            other.dtype()
        ))),
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-fast-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let xs = storage_to_tensor(s1, l1)?;
        let w = storage_to_tensor(s2, l2)?;
        let ys = xs.conv2d(&w, self.padding, self.stride, self.dilation, 1)?.contiguous()?;
        let shape = ys.shape().clone();
        let (storage, layout) = ys.storage_and_layout();
        let Storage::Cpu(cpu) = &*storage else {
            unreachable!("cpu tensors have cpu storage")
        };
        debug_assert!(layout.start_offset() == 0);
        Ok((cpu.clone(), shape))
    }

    fn bwd(
        &self,
        xs: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (p, s, d) = (self.padding, self.stride, self.dilation);
        let (want_x, want_w) = (xs.track_op(), w.track_op());
        let xs = xs.detach();
        let w = w.detach();
        let (_, _, k, _) = w.dims4()?;

        let grad_w = if want_w {
            let gk = xs
                .transpose(0, 1)?
                .conv2d(&grad.transpose(0, 1)?, p, d, s, 1)?
                .transpose(0, 1)?;
            let (_, _, gk0, gk1) = gk.dims4()?;
            Some(if (gk0, gk1) != (k, k) {
                gk.narrow(2, 0, k)?.narrow(3, 0, k)?
            } else {
                gk
            })
        } else {
            None
        };

        let grad_x = if want_x {
            let (b, c_out, ho, wo) = grad.dims4()?;
            let (_, _, h, wd) = xs.dims4()?;
            // zero-stuff the gradient so the strided conv becomes a unit-stride one
            let stuffed = if s > 1 {
                grad.reshape((b, c_out, ho, 1, wo, 1))?
                    .pad_with_zeros(3, 0, s - 1)?
                    .pad_with_zeros(5, 0, s - 1)?
                    .reshape((b, c_out, ho * s, wo * s))?
                    .narrow(2, 0, (ho - 1) * s + 1)?
                    .narrow(3, 0, (wo - 1) * s + 1)?
            } else {
                grad.clone()
            };
            let reach = d * (k - 1);
            let pad_to = |t: &Tensor, dim: usize, full: usize| -> candle_core::Result<Tensor> {
                // left border reach - p, right border whatever reaches `full`
                let len = t.dim(dim)?;
                let (t, len) = if reach >= p {
                    (t.pad_with_zeros(dim, reach - p, 0)?, len + reach - p)
                } else {
                    (t.narrow(dim, p - reach, len - (p - reach))?, len - (p - reach))
                };
                let target = full + reach;
                if target >= len {
                    t.pad_with_zeros(dim, 0, target - len)
                } else {
                    t.narrow(dim, 0, target)
                }
            };
            let padded = pad_to(&pad_to(&stuffed, 2, h)?, 3, wd)?;
            let flipped = w.flip(&[2, 3])?.transpose(0, 1)?.contiguous()?;
            Some(padded.conv2d(&flipped, 0, 1, d, 1)?)
        } else {
            None
        };
        Ok((grad_x, grad_w))
    }
}

/// `conv2d` with the fast backward; `xs` is `[B, Cin, H, W]`, `w` is
/// `[Cout, Cin, k, k]`.
pub(crate) fn conv2d(
    xs: &Tensor,
    w: &Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
) -> candle_core::Result<Tensor> {
    if !xs.device().is_cpu() {
        return xs.conv2d(w, padding, stride, dilation, 1);
    }
    xs.contiguous()?.apply_op2(
        &w.contiguous()?,
        Conv2dOp {
            padding,
            stride,
            dilation,
        },
    )
}
