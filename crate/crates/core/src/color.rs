//! sRGB to CIE Lab (D65).

fn srgb_to_linear(v: u8) -> f64 {
    let c = f64::from(v) / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Returns `[L, a, b]` with L in `[0, 100]`.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / 0.950_47), lab_f(y), lab_f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Precomputed Lab for every pixel of an image.
pub fn lab_image(data: &[u8]) -> Vec<[f64; 3]> {
    data.chunks_exact(3)
        .map(|p| rgb_to_lab([p[0], p[1], p[2]]))
        .collect()
}

/// Quantizes Lab into `bins` per axis: L over `[0, 100]`, a and b over
/// `[-128, 128)`. Returns a flat bin index in `[0, bins^3)`.
pub fn lab_bin(lab: [f64; 3], bins: usize) -> usize {
    let q = |v: f64, lo: f64, hi: f64| {
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        (t.max(0.0) as usize).min(bins - 1)
    };
    let l = q(lab[0], 0.0, 100.0);
    let a = q(lab[1], -128.0, 128.0);
    let b = q(lab[2], -128.0, 128.0);
    (l * bins + a) * bins + b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_colors() {
        let white = rgb_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-3);
        assert!(white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert_eq!(rgb_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
        // Reference values for pure red.
        let red = rgb_to_lab([255, 0, 0]);
        assert!((red[0] - 53.24).abs() < 0.05);
        assert!((red[1] - 80.09).abs() < 0.05);
        assert!((red[2] - 67.20).abs() < 0.05);
    }

    #[test]
    fn bins_cover_range() {
        assert_eq!(lab_bin([0.0, -128.0, -128.0], 8), 0);
        assert_eq!(lab_bin([100.0, 127.9, 200.0], 8), 511);
    }
}
