use crate::tensor::Tensor;

/// Normalized Gaussian kernel with standard deviation `sigma_bins`,
/// truncated at ±⌈3σ⌉ taps.
pub fn gaussian_kernel(sigma_bins: f64) -> Vec<f64> {
    if sigma_bins <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma_bins).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| {
            let x = i as f64 / sigma_bins;
            (-0.5 * x * x).exp() / (sigma_bins * (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|g| g / z).collect()
}

/// Symmetric reflection of an out-of-range index (`-1 → 0`, `n → n-1`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Convolves each column of a `T × K` series with a Gaussian of width
/// `sigma_ms` (bins of `bin_ms`), using reflected boundaries. `sigma_ms = 0`
/// is the identity.
pub fn gaussian_smooth(series: &Tensor<f64>, sigma_ms: f64, bin_ms: f64) -> Tensor<f64> {
    let kernel = gaussian_kernel(sigma_ms / bin_ms);
    if kernel.len() == 1 {
        return series.clone();
    }
    let (t, k) = (series.rows(), series.cols());
    let radius = (kernel.len() / 2) as i64;
    let src = series.data();
    let mut out = vec![0.0; t * k];
    for row in 0..t {
        let dst = &mut out[row * k..(row + 1) * k];
        for (j, &w) in kernel.iter().enumerate() {
            let s = reflect(row as i64 + j as i64 - radius, t as i64);
            for (d, &x) in dst.iter_mut().zip(&src[s * k..(s + 1) * k]) {
                *d += w * x;
            }
        }
    }
    Tensor::from_vec(&[t, k], out).expect("same shape")
}
