//! Dense optical flow, optical strain and the 3-channel optical flow image.
//!
//! Flow is estimated with a coarse-to-fine Horn-Schunck style variational
//! solver. At every pyramid level the second frame is warped by the current
//! estimate and an increment is found by minimising the linearised energy
//!
//! ```text
//! E(du, dv) = sum (Ix du + Iy dv + It)^2 + lambda * sum_edges |grad(u + du)|^2 + |grad(v + dv)|^2
//! ```
//!
//! with point Gauss-Seidel sweeps. Each per-pixel update is the exact
//! minimiser of `E` in that pixel's two unknowns, so the energy never
//! increases within a sweep series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{Image, ImagingError, Plane, TensorFile};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("regularisation weight must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Frame(#[from] ImagingError),
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    /// Smoothness weight.
    pub lambda: f64,
    /// Gauss-Seidel sweep cap per warp.
    pub iters: usize,
    /// Stop a sweep series once the largest per-pixel update falls below this.
    pub tol: f64,
    /// Pyramid levels (1 = single scale). Levels that would shrink a side
    /// below 8 pixels are skipped.
    pub levels: usize,
    /// Re-linearisations per level.
    pub warps: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            lambda: 0.002,
            iters: 150,
            tol: 1e-5,
            levels: 3,
            warps: 3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(FlowError::NonPositiveLambda(self.lambda));
        }
        if self.levels == 0 {
            return Err(FlowError::InvalidParams("levels must be >= 1".into()));
        }
        if self.iters == 0 || self.warps == 0 {
            return Err(FlowError::InvalidParams(
                "iters and warps must be >= 1".into(),
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(FlowError::InvalidParams("tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel displacement from the first to the second frame, in pixels
/// (`dt` is one frame interval).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    pub p: Plane<T>,
    pub q: Plane<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            p: Plane::zeros(height, width),
            q: Plane::zeros(height, width),
        }
    }

    pub fn uniform(height: usize, width: usize, p: T, q: T) -> Self {
        Self {
            p: Plane::filled(height, width, p),
            q: Plane::filled(height, width, q),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (T, T)) -> Self {
        Self {
            p: Plane::from_fn(height, width, |y, x| f(y, x).0),
            q: Plane::from_fn(height, width, |y, x| f(y, x).1),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.p.dims()
    }

    pub fn magnitude_at(&self, y: usize, x: usize) -> T {
        let (p, q) = (self.p.at(y, x), self.q.at(y, x));
        (p * p + q * q).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.p.data.iter().chain(&self.q.data).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            p: self.p.cast(),
            q: self.q.cast(),
        }
    }
}

/// Components of the symmetric strain tensor plus its scalar magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainMap<T> {
    pub exx: Plane<T>,
    pub eyy: Plane<T>,
    pub exy: Plane<T>,
    pub magnitude: Plane<T>,
}

/// Channels `(f_x, f_y, strain magnitude)`, no rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalFlowImage<T> {
    pub channels: [Plane<T>; 3],
}

impl<T: Scalar> OpticalFlowImage<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    /// Persisted layout `(3, H, W)`.
    pub fn to_tensor(&self) -> TensorFile {
        let (h, w) = self.dims();
        let data = self
            .channels
            .iter()
            .flat_map(|c| c.data.iter().map(|v| v.as_f64() as f32))
            .collect();
        TensorFile {
            dims: vec![3, h, w],
            data,
        }
    }

    pub fn from_tensor(t: &TensorFile) -> Result<Self, FlowError> {
        t.validate()?;
        if t.dims.len() != 3 || t.dims[0] != 3 {
            return Err(FlowError::InvalidParams(format!(
                "optical flow tensor must be (3, H, W), got {:?}",
                t.dims
            )));
        }
        let (h, w) = (t.dims[1], t.dims[2]);
        let plane = |c: usize| Plane {
            height: h,
            width: w,
            data: t.data[c * h * w..(c + 1) * h * w]
                .iter()
                .map(|&v| T::lit(v as f64))
                .collect(),
        };
        Ok(Self {
            channels: [plane(0), plane(1), plane(2)],
        })
    }
}

/// Central difference along x, one-sided at the left and right borders.
pub fn diff_x<T: Scalar>(f: &Plane<T>) -> Plane<T> {
    let (h, w) = f.dims();
    let half = T::lit(0.5);
    Plane::from_fn(h, w, |y, x| {
        if w == 1 {
            T::zero()
        } else if x == 0 {
            f.at(y, 1) - f.at(y, 0)
        } else if x == w - 1 {
            f.at(y, w - 1) - f.at(y, w - 2)
        } else {
            (f.at(y, x + 1) - f.at(y, x - 1)) * half
        }
    })
}

/// Central difference along y, one-sided at the top and bottom borders.
pub fn diff_y<T: Scalar>(f: &Plane<T>) -> Plane<T> {
    let (h, w) = f.dims();
    let half = T::lit(0.5);
    Plane::from_fn(h, w, |y, x| {
        if h == 1 {
            T::zero()
        } else if y == 0 {
            f.at(1, x) - f.at(0, x)
        } else if y == h - 1 {
            f.at(h - 1, x) - f.at(h - 2, x)
        } else {
            (f.at(y + 1, x) - f.at(y - 1, x)) * half
        }
    })
}

fn downsample2<T: Scalar>(f: &Plane<T>) -> Plane<T> {
    let (h, w) = (f.height / 2, f.width / 2);
    let quarter = T::lit(0.25);
    Plane::from_fn(h, w, |y, x| {
        (f.at(2 * y, 2 * x) + f.at(2 * y, 2 * x + 1) + f.at(2 * y + 1, 2 * x) + f.at(2 * y + 1, 2 * x + 1))
            * quarter
    })
}

/// Resamples a coarse flow onto a finer grid, rescaling displacements.
fn upsample_flow<T: Scalar>(flow: &FlowField<T>, height: usize, width: usize) -> FlowField<T> {
    let (hc, wc) = flow.dims();
    let sy = hc as f64 / height as f64;
    let sx = wc as f64 / width as f64;
    let resample = |c: &Plane<T>, scale: f64| {
        Plane::from_fn(height, width, |y, x| {
            let cy = T::lit((y as f64 + 0.5) * sy - 0.5);
            let cx = T::lit((x as f64 + 0.5) * sx - 0.5);
            c.sample_bilinear(cy, cx) * T::lit(scale)
        })
    };
    FlowField {
        p: resample(&flow.p, 1.0 / sx),
        q: resample(&flow.q, 1.0 / sy),
    }
}

fn warp<T: Scalar>(img: &Plane<T>, flow: &FlowField<T>) -> Plane<T> {
    let (h, w) = img.dims();
    Plane::from_fn(h, w, |y, x| {
        img.sample_bilinear(
            T::lit(y as f64) + flow.q.at(y, x),
            T::lit(x as f64) + flow.p.at(y, x),
        )
    })
}

/// Energy trace of one linearisation: the value before the first sweep
/// followed by the value after each sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTrace {
    pub level: usize,
    pub warp: usize,
    pub energies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowReport {
    pub traces: Vec<SweepTrace>,
}

struct Linearised<T> {
    ix: Plane<T>,
    iy: Plane<T>,
    it: Plane<T>,
}

fn energy<T: Scalar>(lin: &Linearised<T>, base: &FlowField<T>, du: &FlowField<T>, lambda: T) -> f64 {
    let (h, w) = base.dims();
    let mut data = 0.0;
    let mut smooth = 0.0;
    for y in 0..h {
        for x in 0..w {
            let r = lin.ix.at(y, x) * du.p.at(y, x) + lin.iy.at(y, x) * du.q.at(y, x) + lin.it.at(y, x);
            data += (r * r).as_f64();
            let u = base.p.at(y, x) + du.p.at(y, x);
            let v = base.q.at(y, x) + du.q.at(y, x);
            if x + 1 < w {
                let du_ = u - base.p.at(y, x + 1) - du.p.at(y, x + 1);
                let dv_ = v - base.q.at(y, x + 1) - du.q.at(y, x + 1);
                smooth += (du_ * du_ + dv_ * dv_).as_f64();
            }
            if y + 1 < h {
                let du_ = u - base.p.at(y + 1, x) - du.p.at(y + 1, x);
                let dv_ = v - base.q.at(y + 1, x) - du.q.at(y + 1, x);
                smooth += (du_ * du_ + dv_ * dv_).as_f64();
            }
        }
    }
    data + lambda.as_f64() * smooth
}

/// Gauss-Seidel sweeps for the flow increment around `base`.
fn solve_increment<T: Scalar>(
    lin: &Linearised<T>,
    base: &FlowField<T>,
    lambda: T,
    params: &FlowParams,
    trace: &mut Vec<f64>,
) -> FlowField<T> {
    let (h, w) = base.dims();
    let mut du = FlowField::zeros(h, w);
    let tol = T::lit(params.tol);
    trace.push(energy(lin, base, &du, lambda));
    for _ in 0..params.iters {
        let mut max_change = T::zero();
        for y in 0..h {
            for x in 0..w {
                let mut n = T::zero();
                let mut su = T::zero();
                let mut sv = T::zero();
                let mut visit = |yy: usize, xx: usize| {
                    n += T::one();
                    su += base.p.at(yy, xx) + du.p.at(yy, xx);
                    sv += base.q.at(yy, xx) + du.q.at(yy, xx);
                };
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                let ix = lin.ix.at(y, x);
                let iy = lin.iy.at(y, x);
                let it = lin.it.at(y, x);
                let a11 = ix * ix + lambda * n;
                let a22 = iy * iy + lambda * n;
                let a12 = ix * iy;
                let b1 = lambda * (su - n * base.p.at(y, x)) - ix * it;
                let b2 = lambda * (sv - n * base.q.at(y, x)) - iy * it;
                let det = a11 * a22 - a12 * a12;
                let nu = (a22 * b1 - a12 * b2) / det;
                let nv = (a11 * b2 - a12 * b1) / det;
                let change = (nu - du.p.at(y, x)).abs().max((nv - du.q.at(y, x)).abs());
                max_change = max_change.max(change);
                *du.p.at_mut(y, x) = nu;
                *du.q.at_mut(y, x) = nv;
            }
        }
        trace.push(energy(lin, base, &du, lambda));
        if max_change <= tol {
            break;
        }
    }
    du
}

/// Estimates the displacement from `onset` to `apex`.
pub fn compute_flow<T: Scalar>(
    onset: &Image<T>,
    apex: &Image<T>,
    params: &FlowParams,
) -> Result<FlowField<T>, FlowError> {
    compute_flow_with_report(onset, apex, params).map(|(f, _)| f)
}

pub fn compute_flow_with_report<T: Scalar>(
    onset: &Image<T>,
    apex: &Image<T>,
    params: &FlowParams,
) -> Result<(FlowField<T>, FlowReport), FlowError> {
    if onset.dims() != apex.dims() {
        return Err(FlowError::DimensionMismatch(onset.dims(), apex.dims()));
    }
    params.validate()?;
    onset.check_frame_dims()?;

    let mut first = vec![onset.plane().clone()];
    let mut second = vec![apex.plane().clone()];
    while first.len() < params.levels {
        let last = first.last().unwrap();
        if last.height / 2 < 8 || last.width / 2 < 8 {
            break;
        }
        let a = downsample2(last);
        let b = downsample2(second.last().unwrap());
        first.push(a);
        second.push(b);
    }

    let lambda = T::lit(params.lambda);
    let half = T::lit(0.5);
    let mut report = FlowReport::default();
    let coarsest = first.len() - 1;
    let (hc, wc) = first[coarsest].dims();
    let mut flow = FlowField::zeros(hc, wc);
    for level in (0..first.len()).rev() {
        let (i1, i2) = (&first[level], &second[level]);
        if flow.dims() != i1.dims() {
            flow = upsample_flow(&flow, i1.height, i1.width);
        }
        for warp_idx in 0..params.warps {
            let warped = warp(i2, &flow);
            let mean = i1.zip_map(&warped, |a, b| (a + b) * half);
            let lin = Linearised {
                ix: diff_x(&mean),
                iy: diff_y(&mean),
                it: warped.zip_map(i1, |a, b| a - b),
            };
            let mut energies = Vec::new();
            let du = solve_increment(&lin, &flow, lambda, params, &mut energies);
            flow.p = flow.p.zip_map(&du.p, |a, b| a + b);
            flow.q = flow.q.zip_map(&du.q, |a, b| a + b);
            report.traces.push(SweepTrace {
                level,
                warp: warp_idx,
                energies,
            });
        }
    }
    Ok((flow, report))
}

/// Symmetric gradient of the flow, central differences in the interior.
pub fn compute_strain<T: Scalar>(flow: &FlowField<T>) -> StrainMap<T> {
    let px = diff_x(&flow.p);
    let py = diff_y(&flow.p);
    let qx = diff_x(&flow.q);
    let qy = diff_y(&flow.q);
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let exy = py.zip_map(&qx, |a, b| (a + b) * half);
    let (h, w) = flow.dims();
    let magnitude = Plane::from_fn(h, w, |y, x| {
        let (a, b, c) = (px.at(y, x), qy.at(y, x), exy.at(y, x));
        (a * a + b * b + two * c * c).sqrt()
    });
    StrainMap {
        exx: px,
        eyy: qy,
        exy,
        magnitude,
    }
}

pub fn build_flow_image<T: Scalar>(
    flow: &FlowField<T>,
    strain: &StrainMap<T>,
) -> Result<OpticalFlowImage<T>, FlowError> {
    if flow.dims() != strain.magnitude.dims() {
        return Err(FlowError::DimensionMismatch(
            flow.dims(),
            strain.magnitude.dims(),
        ));
    }
    Ok(OpticalFlowImage {
        channels: [flow.p.clone(), flow.q.clone(), strain.magnitude.clone()],
    })
}

/// Onset/apex pair straight to the network's flow input.
pub fn optical_flow_image<T: Scalar>(
    onset: &Image<T>,
    apex: &Image<T>,
    params: &FlowParams,
) -> Result<OpticalFlowImage<T>, FlowError> {
    let flow = compute_flow(onset, apex, params)?;
    let strain = compute_strain(&flow);
    build_flow_image(&flow, &strain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn interior<T: Scalar>(p: &Plane<T>, f: impl Fn(T) -> bool) -> bool {
        (1..p.height - 1).all(|y| (1..p.width - 1).all(|x| f(p.at(y, x))))
    }

    #[test]
    fn uniform_flow_has_zero_strain() {
        let s = compute_strain(&FlowField::<f64>::uniform(10, 12, 0.7, -1.3));
        for c in [&s.exx, &s.eyy, &s.exy, &s.magnitude] {
            assert!(c.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_stretch_strain() {
        let a: f64 = 0.37;
        let flow = FlowField::<f64>::from_fn(12, 12, |_, x| (a * x as f64, 0.0));
        let s = compute_strain(&flow);
        assert!(interior(&s.exx, |v| (v - a).abs() < 1e-10));
        assert!(interior(&s.exy, |v| v.abs() < 1e-10));
        assert!(interior(&s.magnitude, |v| (v - a.abs()).abs() < 1e-10));
    }

    #[test]
    fn pure_shear_strain() {
        let a: f64 = -0.21;
        let flow = FlowField::<f64>::from_fn(12, 12, |y, x| (a * y as f64, a * x as f64));
        let s = compute_strain(&flow);
        assert!(interior(&s.exy, |v| (v - a).abs() < 1e-10));
        assert!(interior(&s.magnitude, |v| (v - 2f64.sqrt() * a.abs()).abs() < 1e-10));
    }

    #[test]
    fn flow_image_assembly() {
        let flow = FlowField::<f64>::uniform(8, 8, 1.0, 2.0);
        let strain = compute_strain(&flow);
        let img = build_flow_image(&flow, &strain).unwrap();
        assert!(img.channels[0].data.iter().all(|&v| v == 1.0));
        assert!(img.channels[1].data.iter().all(|&v| v == 2.0));
        assert!(img.channels[2].data.iter().all(|&v| v == 0.0));

        let zero = FlowField::<f64>::zeros(8, 8);
        let img = build_flow_image(&zero, &compute_strain(&zero)).unwrap();
        assert!(img.channels.iter().all(|c| c.data.iter().all(|&v| v == 0.0)));

        let t = img.to_tensor();
        assert_eq!(t.dims, vec![3, 8, 8]);
    }

    #[test]
    fn flow_image_strain_channel_matches_recomputation() {
        let flow = FlowField::<f64>::from_fn(9, 11, |y, x| {
            ((x as f64 * 0.3).sin() * y as f64 * 0.1, (y as f64 * 0.2).cos())
        });
        let strain = compute_strain(&flow);
        let img = build_flow_image(&flow, &strain).unwrap();
        assert_eq!(img.channels[2], compute_strain(&flow).magnitude);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let flow = FlowField::<f64>::zeros(8, 8);
        let other = compute_strain(&FlowField::<f64>::zeros(8, 9));
        assert!(matches!(
            build_flow_image(&flow, &other),
            Err(FlowError::DimensionMismatch(..))
        ));
        let a = Image::<f64>::filled(8, 8, 0.5);
        let b = Image::<f64>::filled(8, 9, 0.5);
        assert!(matches!(
            compute_flow(&a, &b, &FlowParams::default()),
            Err(FlowError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn non_positive_lambda_rejected() {
        let a = Image::<f64>::filled(8, 8, 0.5);
        for lambda in [0.0, -1.0, f64::NAN] {
            let params = FlowParams {
                lambda,
                ..FlowParams::default()
            };
            assert!(matches!(
                compute_flow(&a, &a, &params),
                Err(FlowError::NonPositiveLambda(_))
            ));
        }
    }

    #[test]
    fn textureless_pair_gives_zero_flow() {
        let a = Image::<f64>::filled(16, 16, 0.3);
        let b = Image::<f64>::filled(16, 16, 0.3);
        let f = compute_flow(&a, &b, &FlowParams::default()).unwrap();
        assert!(f.p.data.iter().chain(&f.q.data).all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn strain_ignores_global_translation(
            seed in any::<u64>(), dp in -3.0f64..3.0, dq in -3.0f64..3.0
        ) {
            // integer-valued fields keep the comparison exact under float addition
            let val = |y: usize, x: usize, k: u64| {
                ((seed.wrapping_mul(6364136223846793005).wrapping_add((y * 31 + x) as u64 * k)) >> 40) as f64 % 16.0
            };
            let flow = FlowField::<f64>::from_fn(9, 9, |y, x| (val(y, x, 7), val(y, x, 13)));
            let dp = dp.round();
            let dq = dq.round();
            let shifted = FlowField {
                p: flow.p.map(|v| v + dp),
                q: flow.q.map(|v| v + dq),
            };
            prop_assert_eq!(compute_strain(&flow), compute_strain(&shifted));
        }
    }
}
