//! Fully connected CRF with Potts compatibility and Gaussian spatial plus
//! bilateral kernels, solved by mean-field iterations with exact pairwise
//! message passing.
//!
//! Kernels are products of per-axis lookup tables, so no `exp` is evaluated
//! inside the quadratic loop. Messages are accumulated in a fixed order and
//! every label is treated identically, which keeps the output bit-for-bit
//! equivariant under label permutation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, ImageRaster, LabelRaster, ScalarRaster};

/// Probabilities below this are floored before taking logs.
const LOG_FLOOR: f64 = 1e-12;

/// Largest pair count whose kernel values are kept between iterations
/// (32 MiB of `f32`).
const KERNEL_CACHE_PAIRS: usize = 1 << 23;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default)]
pub struct CrfParams {
    pub iterations: usize,
    pub w_smooth: f64,
    /// Spatial stddev of the smoothness kernel, in pixels.
    pub theta_gamma: f64,
    pub w_appear: f64,
    /// Spatial stddev of the appearance kernel, in pixels.
    pub theta_alpha: f64,
    /// Color stddev of the appearance kernel, in RGB units.
    pub theta_beta: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            w_smooth: 3.0,
            theta_gamma: 3.0,
            w_appear: 5.0,
            theta_alpha: 30.0,
            theta_beta: 13.0,
        }
    }
}

impl CrfParams {
    /// Caps the appearance kernel's spatial range at an eighth of the
    /// longer image side.
    pub fn for_image(&self, width: usize, height: usize) -> Self {
        let cap = width.max(height) as f64 / 8.0;
        Self {
            theta_alpha: self.theta_alpha.min(cap).max(0.5),
            ..self.clone()
        }
    }

    /// Weights may be zero (no pairwise term); stddevs must be positive.
    pub fn validate(&self) -> Result<()> {
        let weights_ok = [self.w_smooth, self.w_appear]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        let scales_ok = [self.theta_gamma, self.theta_alpha, self.theta_beta]
            .iter()
            .all(|s| s.is_finite() && *s > 0.0);
        if weights_ok && scales_ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid CRF parameters {self:?}")))
        }
    }
}

/// Per-pixel distributions over `labels` classes, row-major, one row per
/// pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelField {
    width: usize,
    height: usize,
    labels: usize,
    data: Vec<f64>,
}

impl LabelField {
    pub fn new(width: usize, height: usize, labels: usize, data: Vec<f64>) -> Result<Self> {
        if labels < 2 {
            return Err(Error::Config(format!(
                "need at least 2 labels, got {labels}"
            )));
        }
        if width == 0 || height == 0 || data.len() != width * height * labels {
            return Err(Error::Format(format!(
                "label field {width}x{height}x{labels} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.labels..(pixel + 1) * self.labels]
    }

    /// Argmax per pixel, lower label on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.data
            .chunks_exact(self.labels)
            .map(|row| {
                let mut best = 0;
                for (l, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = l;
                    }
                }
                best
            })
            .collect()
    }
}

/// Factors below 1e-30 are stored as zero, so kernel products never reach
/// subnormal range, where arithmetic is very slow.
fn gaussian_table(len: usize, theta: f64) -> Vec<f64> {
    (0..len)
        .map(|d| (-((d * d) as f64) / (2.0 * theta * theta)).exp())
        .map(|v| if v < 1e-30 { 0.0 } else { v })
        .collect()
}

/// Runs `params.iterations` mean-field updates starting from `Q = unary`.
///
/// Each update computes `m_i(l) = sum_{j != i} k(i, j) Q_j(l)` and sets
/// `Q_i(l) ∝ unary_i(l) · exp(m_i(l))`, which is the Potts update
/// `exp(-U_i(l) - sum_j k(i,j) (1 - Q_j(l)))` with the label-independent
/// part dropped.
pub fn mean_field(
    unary: &LabelField,
    image: &ImageRaster,
    params: &CrfParams,
) -> Result<LabelField> {
    ensure_same_dims(unary.dims(), image.dims())?;
    params.validate()?;
    if params.iterations == 0 {
        return Ok(unary.clone());
    }
    let (w, h) = unary.dims();
    let n = w * h;
    let labels = unary.labels;
    let span = w.max(h);

    // Spatial factors of both kernels indexed by (|dy|, |dx|).
    let smooth = gaussian_table(span, params.theta_gamma);
    let appear = gaussian_table(span, params.theta_alpha);
    let mut spatial_smooth = vec![0.0; w * h];
    let mut spatial_appear = vec![0.0; w * h];
    for dy in 0..h {
        for dx in 0..w {
            spatial_smooth[dy * w + dx] = params.w_smooth * smooth[dx] * smooth[dy];
            spatial_appear[dy * w + dx] = params.w_appear * appear[dx] * appear[dy];
        }
    }
    let color = gaussian_table(256, params.theta_beta);
    let rgb = image.data();
    let log_unary: Vec<f64> = unary.data.iter().map(|p| p.max(LOG_FLOOR).ln()).collect();

    let kernel = |i: usize, j: usize| {
        let cell = (i / w).abs_diff(j / w) * w + (i % w).abs_diff(j % w);
        let (ci, cj) = (&rgb[3 * i..3 * i + 3], &rgb[3 * j..3 * j + 3]);
        let k = spatial_smooth[cell]
            + spatial_appear[cell]
                * color[usize::from(ci[0].abs_diff(cj[0]))]
                * color[usize::from(ci[1].abs_diff(cj[1]))]
                * color[usize::from(ci[2].abs_diff(cj[2]))];
        if k < f64::from(f32::MIN_POSITIVE) {
            0.0
        } else {
            k as f32
        }
    };
    // Kernel values are rounded to f32 on both paths so caching never
    // changes the result. The upper triangle is evaluated once when it fits.
    let pairs = n * n.saturating_sub(1) / 2;
    let cached: Option<Vec<f32>> =
        (params.iterations > 1 && pairs <= KERNEL_CACHE_PAIRS).then(|| {
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| kernel(i, j))
                .collect()
        });

    let mut q = unary.data.clone();
    let mut msg = vec![0.0; n * labels];
    for _ in 0..params.iterations {
        match (&cached, labels) {
            (Some(c), 2) => pass::<2>(&q, &mut msg, n, |offset, _, _| f64::from(c[offset])),
            (Some(c), _) => pass_dyn(&q, &mut msg, labels, n, |offset, _, _| f64::from(c[offset])),
            (None, _) => pass_dyn(&q, &mut msg, labels, n, |_, i, j| f64::from(kernel(i, j))),
        }
        for i in 0..n {
            let row = i * labels..(i + 1) * labels;
            let mut z: Vec<f64> = row.clone().map(|k| log_unary[k] + msg[k]).collect();
            softmax(&mut z);
            q[row].copy_from_slice(&z);
        }
    }
    LabelField::new(w, h, labels, q)
}

/// One exact message pass over all pairs `i < j`; `kernel` receives the
/// pair's index in the packed upper triangle and both pixel indices.
fn pass_dyn(
    q: &[f64],
    msg: &mut [f64],
    labels: usize,
    n: usize,
    kernel: impl Fn(usize, usize, usize) -> f64,
) {
    msg.iter_mut().for_each(|m| *m = 0.0);
    let mut acc = vec![0.0; labels];
    let mut offset = 0;
    for i in 0..n {
        let (qi, rest) = q[i * labels..].split_at(labels);
        acc.iter_mut().for_each(|a| *a = 0.0);
        let (head, tail) = msg.split_at_mut((i + 1) * labels);
        for (jj, (qj, mj)) in rest
            .chunks_exact(labels)
            .zip(tail.chunks_exact_mut(labels))
            .enumerate()
        {
            let k = kernel(offset + jj, i, i + 1 + jj);
            for l in 0..labels {
                acc[l] += k * qj[l];
                mj[l] += k * qi[l];
            }
        }
        offset += n - i - 1;
        for (m, a) in head[i * labels..].iter_mut().zip(&acc) {
            *m += a;
        }
    }
}

/// [`pass_dyn`] with the label count fixed at compile time. Same
/// arithmetic in the same order.
fn pass<const L: usize>(
    q: &[f64],
    msg: &mut [f64],
    n: usize,
    kernel: impl Fn(usize, usize, usize) -> f64,
) {
    msg.iter_mut().for_each(|m| *m = 0.0);
    let (q, _) = q.as_chunks::<L>();
    let (msg, _) = msg.as_chunks_mut::<L>();
    let mut offset = 0;
    for i in 0..n {
        let qi = q[i];
        let mut acc = [0.0; L];
        let (head, tail) = msg.split_at_mut(i + 1);
        for (jj, (qj, mj)) in q[i + 1..].iter().zip(tail).enumerate() {
            let k = kernel(offset + jj, i, i + 1 + jj);
            for l in 0..L {
                acc[l] += k * qj[l];
                mj[l] += k * qi[l];
            }
        }
        offset += n - i - 1;
        for l in 0..L {
            head[i][l] += acc[l];
        }
    }
}

/// Probabilities more than e^-460 below the row maximum become exactly zero,
/// so later kernel products stay out of subnormal range.
fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        let d = *v - max;
        *v = if d < -460.0 { 0.0 } else { d.exp() };
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Two-label CRF on `(1 - p, p)`; returns 1 where foreground wins strictly.
pub fn binarize(
    prob: &ScalarRaster,
    image: &ImageRaster,
    params: &CrfParams,
) -> Result<LabelRaster> {
    let (w, h) = prob.dims();
    let unary = prob
        .data()
        .iter()
        .flat_map(|&p| {
            let p = f64::from(p).clamp(0.0, 1.0);
            [1.0 - p, p]
        })
        .collect();
    let field = mean_field(&LabelField::new(w, h, 2, unary)?, image, params)?;
    let data = field.argmax().into_iter().map(|l| l as u8).collect();
    LabelRaster::new(w, h, data)
}
