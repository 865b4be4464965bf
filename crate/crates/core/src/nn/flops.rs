//! Floating-point operation accounting.
//!
//! Kernels report the work they perform through [`record`]. In debug builds
//! the counts accumulate in a thread-local counter so that the closed-form
//! estimates can be checked against what actually ran; release builds compile
//! the counter away.
//!
//! Per-layer costs (one multiply-add = 2 FLOPs):
//!
//! | layer | FLOPs |
//! |---|---|
//! | conv `kh×kw`, C→K | `2·H'·W'·K·kh·kw·C` (+ `H'·W'·K` with bias) |
//! | depthwise `kh×kw` | `2·H'·W'·C·kh·kw` (+ `H'·W'·C` with bias) |
//! | dense D→M | `2·D·M` |
//! | batch norm (infer) | `2` per element |
//! | global average pool | `H·W·C` adds + `C` divides |
//! | self-bilinear | `2·H·W·K²` |
//! | dual-bilinear | `2·H·W·K_A·K_B` |
//! | signed sqrt + ℓ2 | `4` per element |
//! | softmax | `4` per class |
//! | ReLU | `0` |

#[cfg(debug_assertions)]
thread_local! {
    static COUNTER: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

#[inline]
pub fn record(_n: u64) {
    #[cfg(debug_assertions)]
    COUNTER.with(|c| c.set(c.get() + _n));
}

/// Returns the operations recorded on this thread since the last call and
/// resets the counter. Always `None` in release builds.
pub fn take() -> Option<u64> {
    #[cfg(debug_assertions)]
    {
        Some(COUNTER.with(|c| c.replace(0)))
    }
    #[cfg(not(debug_assertions))]
    {
        None
    }
}

pub fn conv(out_h: usize, out_w: usize, kernel: [usize; 2], in_c: usize, out_c: usize, bias: bool) -> u64 {
    let locations = (out_h * out_w) as u64;
    let mut f = 2 * locations * (out_c * kernel[0] * kernel[1] * in_c) as u64;
    if bias {
        f += locations * out_c as u64;
    }
    f
}

pub fn depthwise(out_h: usize, out_w: usize, kernel: [usize; 2], c: usize, bias: bool) -> u64 {
    let locations = (out_h * out_w) as u64;
    let mut f = 2 * locations * (c * kernel[0] * kernel[1]) as u64;
    if bias {
        f += locations * c as u64;
    }
    f
}

pub fn dense(d: usize, m: usize) -> u64 {
    2 * (d * m) as u64
}

pub fn batchnorm(elements: usize) -> u64 {
    2 * elements as u64
}

pub fn global_average_pool(h: usize, w: usize, c: usize) -> u64 {
    (h * w * c + c) as u64
}

pub fn self_bilinear(h: usize, w: usize, k: usize) -> u64 {
    2 * (h * w * k * k) as u64
}

pub fn dual_bilinear(h: usize, w: usize, ka: usize, kb: usize) -> u64 {
    2 * (h * w * ka * kb) as u64
}

pub fn normalize(len: usize) -> u64 {
    4 * len as u64
}

pub fn softmax(classes: usize) -> u64 {
    4 * classes as u64
}
