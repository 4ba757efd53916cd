//! Separable Gaussian filtering with edge-clamped borders.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::field::VectorField;

/// Normalised 1-D Gaussian kernel truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_axis<T>(data: &[T], shape: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<T>
where
    T: Copy + Send + Sync + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let radius = (kernel.len() / 2) as isize;
    let n = shape[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => shape[0],
        _ => shape[0] * shape[1],
    };
    let plane = shape[0] * shape[1];
    let mut out = vec![T::default(); data.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                let c = [i, j, k];
                let pos = c[axis] as isize;
                let base = i + shape[0] * j + plane * k - c[axis] * stride;
                let mut acc = T::default();
                for (t, w) in kernel.iter().enumerate() {
                    let q = (pos + t as isize - radius).clamp(0, n - 1) as usize;
                    acc = acc + data[base + q * stride] * *w;
                }
                slab[i + shape[0] * j] = acc;
            }
        }
    });
    out
}

pub fn smooth_scalar(data: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let a = convolve_axis(data, shape, 0, &k);
    let b = convolve_axis(&a, shape, 1, &k);
    convolve_axis(&b, shape, 2, &k)
}

pub fn smooth_vectors(data: &[Vector3<f64>], shape: [usize; 3], sigma: f64) -> Vec<Vector3<f64>> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let a = convolve_axis(data, shape, 0, &k);
    let b = convolve_axis(&a, shape, 1, &k);
    convolve_axis(&b, shape, 2, &k)
}

pub fn smooth_vector_field(field: &VectorField, sigma: f64) -> VectorField {
    let values = smooth_vectors(field.values(), field.grid().shape(), sigma);
    VectorField::new(field.grid().clone(), values).expect("same grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised() {
        let k = gaussian_kernel(1.7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(k.len(), 2 * 6 + 1);
    }

    #[test]
    fn constant_is_preserved() {
        let shape = [5, 6, 7];
        let data = vec![3.5; 5 * 6 * 7];
        let s = smooth_scalar(&data, shape, 2.0);
        assert!(s.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn impulse_mass_is_conserved_in_interior() {
        let shape = [21, 21, 21];
        let mut data = vec![0.0; 21 * 21 * 21];
        data[10 + 21 * (10 + 21 * 10)] = 1.0;
        let s = smooth_scalar(&data, shape, 1.5);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
