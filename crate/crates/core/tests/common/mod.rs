//! Shared fixtures and independent oracles for integration tests.
#![allow(dead_code)]

use infuse_core::imaging::{Image, Plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian blob and its copy translated by `shift` px along x, plus the
/// textured-support mask (gradient magnitude above 10% of its maximum).
pub fn blob_pair(n: usize, shift: f64) -> (Image<f64>, Image<f64>, Plane<f64>) {
    let sigma = 6.0;
    let c = n as f64 / 2.0;
    let blob = |y: f64, x: f64| 0.2 + 0.6 * (-((x - c).powi(2) + (y - c).powi(2)) / (2.0 * sigma * sigma)).exp();
    let a = Plane::from_fn(n, n, |y, x| blob(y as f64, x as f64));
    let b = Plane::from_fn(n, n, |y, x| blob(y as f64, x as f64 - shift));
    // analytic gradient magnitude of the first frame
    let grad = Plane::from_fn(n, n, |y, x| {
        let (y, x) = (y as f64, x as f64);
        let g = blob(y, x) - 0.2;
        let r = ((x - c).powi(2) + (y - c).powi(2)).sqrt();
        g * r / (sigma * sigma)
    });
    let gmax = grad.data.iter().cloned().fold(0.0, f64::max);
    let mask = grad.map(|g| if g > 0.1 * gmax { 1.0 } else { 0.0 });
    (
        Image::from_plane(a).unwrap(),
        Image::from_plane(b).unwrap(),
        mask,
    )
}

/// Smooth random texture and its copy translated by `(dx, dy)` px.
pub fn textured_pair(n: usize, seed: u64, dx: f64, dy: f64) -> (Image<f64>, Image<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..24)
        .map(|_| {
            (
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(2.5..6.0),
                rng.random_range(-0.25..0.25),
            )
        })
        .collect();
    let tex = |y: f64, x: f64| {
        let mut v = 0.5;
        for &(by, bx, s, a) in &bumps {
            v += a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp();
        }
        v.clamp(0.0, 1.0)
    };
    let a = Plane::from_fn(n, n, |y, x| tex(y as f64, x as f64));
    let b = Plane::from_fn(n, n, |y, x| tex(y as f64 - dy, x as f64 - dx));
    (Image::from_plane(a).unwrap(), Image::from_plane(b).unwrap())
}

/// Vertical-bar sinusoid shifted right by `delta` px.
pub fn grating(n: usize, period: f64, delta: f64) -> Image<f64> {
    let k = 2.0 * std::f64::consts::PI / period;
    Image::from_plane(Plane::from_fn(n, n, |_, x| {
        0.5 + 0.25 * (k * (x as f64 - delta)).sin()
    }))
    .unwrap()
}

/// Phase-based displacement oracle: least-squares fit of `a sin + b cos + c`
/// at the grating frequency over interior columns of every row, returning
/// the shift of `moved` relative to `reference` in pixels.
pub fn grating_shift(reference: &Image<f64>, moved: &Image<f64>, period: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI / period;
    let n = reference.width();
    let margin = 8;
    let phase = |img: &Image<f64>, y: usize| {
        // normal equations for [sin, cos, 1]
        let mut ata = [[0.0f64; 3]; 3];
        let mut atb = [0.0f64; 3];
        for x in margin..n - margin {
            let row = [(k * x as f64).sin(), (k * x as f64).cos(), 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * img.at(y, x);
            }
        }
        let sol = solve3(ata, atb);
        sol[1].atan2(sol[0])
    };
    let mut total = 0.0;
    for y in margin..reference.height() - margin {
        let mut d = phase(moved, y) - phase(reference, y);
        while d > std::f64::consts::PI {
            d -= 2.0 * std::f64::consts::PI;
        }
        while d < -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
        }
        total += -d / k;
    }
    total / (reference.height() - 2 * margin) as f64
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for c in col..3 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut s = b[i];
        for j in i + 1..3 {
            s -= a[i][j] * x[j];
        }
        x[i] = s / a[i][i];
    }
    x
}
