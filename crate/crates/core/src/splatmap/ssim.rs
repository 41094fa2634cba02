use super::SplatError;
use crate::imaging::ColorImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *x = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Separable Gaussian filter; samples outside the image count as zero.
fn blur(src: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    for v in 0..height {
        for u in 0..width {
            let mut acc = 0.0;
            for (i, wi) in w.iter().enumerate() {
                let x = u as isize + i as isize - half;
                if x >= 0 && (x as usize) < width {
                    acc += wi * src[v * width + x as usize];
                }
            }
            tmp[v * width + u] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for v in 0..height {
        for u in 0..width {
            let mut acc = 0.0;
            for (i, wi) in w.iter().enumerate() {
                let y = v as isize + i as isize - half;
                if y >= 0 && (y as usize) < height {
                    acc += wi * tmp[y as usize * width + u];
                }
            }
            out[v * width + u] = acc;
        }
    }
    out
}

/// Mean SSIM of one plane and, optionally, its gradient with respect to `a`.
fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let w = window();
    let mul = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let ma = blur(a, width, height, &w);
    let mb = blur(b, width, height, &w);
    let eaa = blur(&mul(a, a), width, height, &w);
    let ebb = blur(&mul(b, b), width, height, &w);
    let eab = blur(&mul(a, b), width, height, &w);
    let n = a.len() as f64;
    let mut total = 0.0;
    let (mut gm, mut gaa, mut gab) = if want_grad {
        (vec![0.0; a.len()], vec![0.0; a.len()], vec![0.0; a.len()])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..a.len() {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let var_a = eaa[i] - mu_a * mu_a;
        let var_b = ebb[i] - mu_b * mu_b;
        let cov = eab[i] - mu_a * mu_b;
        let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
        let b2 = var_a + var_b + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            let den = b1 * b2;
            // Partials with respect to the filtered moments, scaled for the mean.
            gm[i] = ((2.0 * mu_b * a2 - 2.0 * mu_b * a1) / den - s * (2.0 * mu_a / b1 - 2.0 * mu_a / b2)) / n;
            gaa[i] = -s / b2 / n;
            gab[i] = 2.0 * a1 / den / n;
        }
    }
    if !want_grad {
        return (total / n, None);
    }
    // The window is symmetric, so the adjoint of the filter is the filter itself.
    let fm = blur(&gm, width, height, &w);
    let faa = blur(&gaa, width, height, &w);
    let fab = blur(&gab, width, height, &w);
    let grad = (0..a.len()).map(|i| fm[i] + 2.0 * a[i] * faa[i] + b[i] * fab[i]).collect();
    (total / n, Some(grad))
}

fn check_dims(a: &ColorImage, b: &ColorImage) -> Result<(), SplatError> {
    if !a.same_shape(b) {
        return Err(SplatError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Mean local SSIM over pixels and channels, with its gradient with respect to `a`.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<(f64, Vec<[f64; 3]>), SplatError> {
    check_dims(a, b)?;
    let mut grad = vec![[0.0; 3]; a.len()];
    let mut score = 0.0;
    for c in 0..3 {
        let (s, g) = ssim_plane(&a.channel(c), &b.channel(c), a.width, a.height, true);
        score += s / 3.0;
        for (dst, gi) in grad.iter_mut().zip(g.unwrap()) {
            dst[c] = gi / 3.0;
        }
    }
    Ok((score, grad))
}

pub fn ssim_score(a: &ColorImage, b: &ColorImage) -> Result<f64, SplatError> {
    check_dims(a, b)?;
    Ok((0..3).map(|c| ssim_plane(&a.channel(c), &b.channel(c), a.width, a.height, false).0).sum::<f64>() / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ColorImage {
        ColorImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identical_images_score_one_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 20, 14);
        let (s, g) = ssim(&x, &x).unwrap();
        assert_eq!(s, 1.0);
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn inverted_checkerboard_is_anticorrelated() {
        let x = ColorImage::from_fn(16, 16, |u, v| if (u + v) % 2 == 0 { [1.0; 3] } else { [0.0; 3] });
        let y = ColorImage::from_fn(16, 16, |u, v| {
            let p = x.get(u, v);
            [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]
        });
        assert!(ssim_score(&x, &y).unwrap() < 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = ColorImage::new(4, 4, [0.0; 3]);
        let b = ColorImage::new(4, 5, [0.0; 3]);
        assert!(matches!(ssim(&a, &b), Err(SplatError::DimensionMismatch(..))));
    }

    #[test]
    fn symmetric_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        assert!((ssim_score(&a, &b).unwrap() - ssim_score(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let a = random_image(&mut rng, 16, 16);
            let b = random_image(&mut rng, 16, 16);
            let (_, g) = ssim(&a, &b).unwrap();
            let h = 1e-5;
            for i in 0..a.len() {
                for c in 0..3 {
                    let mut ap = a.clone();
                    ap.data[i][c] += h;
                    let mut am = a.clone();
                    am.data[i][c] -= h;
                    let fd = (ssim_score(&ap, &b).unwrap() - ssim_score(&am, &b).unwrap()) / (2.0 * h);
                    let an = g[i][c];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "pixel {i} ch {c}: {an} vs {fd}");
                }
            }
        }
    }
}
