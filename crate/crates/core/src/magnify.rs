//! Eulerian motion magnification in a Laplacian-pyramid latent space.
//!
//! The encoder is a fixed Laplacian pyramid (5-tap binomial blur, mirror
//! borders), which is linear and exactly invertible. The manipulator
//! amplifies the band-pass difference between a target frame and the onset
//! frame; the low-pass residual is passed through. The decoder is only used
//! for the decoded-input ablation: the network consumes the latent stack
//! directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{Image, ImagingError, Plane, TensorFile};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MagnifyError {
    #[error("frame {height}x{width} is not divisible by 2^{depth}")]
    IncompatibleDims {
        height: usize,
        width: usize,
        depth: usize,
    },
    #[error("latent structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("corrupt latent stack: {0}")]
    Corrupt(String),
    #[error("invalid magnification config: {0}")]
    InvalidConfig(String),
    #[error("frame dimension mismatch across the triplet")]
    TripletMismatch,
    #[error(transparent)]
    Frame(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagConfig {
    /// Additive gain: `out = target + alpha * (target - onset)`.
    pub alpha: f64,
    /// Number of band-pass levels.
    pub depth: usize,
    /// Feed decoded magnified frames instead of latent levels.
    pub decoded: bool,
}

impl Default for MagConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            depth: 3,
            decoded: false,
        }
    }
}

impl MagConfig {
    pub fn validate(&self) -> Result<(), MagnifyError> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(MagnifyError::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.depth == 0 {
            return Err(MagnifyError::InvalidConfig("depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels of the stacked latent pair fed to the magnification stream.
    pub fn latent_channels(&self) -> usize {
        2 * (self.depth + 1)
    }

    /// Channels of whichever input the configuration selects.
    pub fn input_channels(&self) -> usize {
        if self.decoded {
            2
        } else {
            self.latent_channels()
        }
    }
}

/// Band-pass levels ordered fine to coarse, plus the low-pass residual.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStack<T> {
    pub bands: Vec<Plane<T>>,
    pub residual: Plane<T>,
}

impl<T: Scalar> LatentStack<T> {
    pub fn depth(&self) -> usize {
        self.bands.len()
    }

    /// Every plane, fine to coarse, residual last.
    pub fn levels(&self) -> impl Iterator<Item = &Plane<T>> {
        self.bands.iter().chain(std::iter::once(&self.residual))
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.bands
            .first()
            .map(|b| b.dims())
            .unwrap_or(self.residual.dims())
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.bands.len() == other.bands.len()
            && self.levels().zip(other.levels()).all(|(a, b)| a.dims() == b.dims())
    }

    fn check(&self) -> Result<(), MagnifyError> {
        let mut expect = self.source_dims();
        for (i, band) in self.bands.iter().enumerate() {
            if band.dims() != expect || band.data.len() != expect.0 * expect.1 {
                return Err(MagnifyError::Corrupt(format!(
                    "band {i} has dims {:?}, expected {expect:?}",
                    band.dims()
                )));
            }
            expect = (expect.0 / 2, expect.1 / 2);
        }
        if self.residual.dims() != expect || self.residual.data.len() != expect.0 * expect.1 {
            return Err(MagnifyError::Corrupt(format!(
                "residual has dims {:?}, expected {expect:?}",
                self.residual.dims()
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T + Copy) -> Self {
        Self {
            bands: self
                .bands
                .iter()
                .zip(&other.bands)
                .map(|(a, b)| a.zip_map(b, f))
                .collect(),
            residual: self.residual.zip_map(&other.residual, f),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bands: self.bands.iter().map(|b| Plane::zeros(b.height, b.width)).collect(),
            residual: Plane::zeros(self.residual.height, self.residual.width),
        }
    }
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

const TAPS: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

fn blur<T: Scalar>(f: &Plane<T>) -> Plane<T> {
    let (h, w) = f.dims();
    let taps = TAPS.map(T::lit);
    let norm = T::lit(1.0 / 16.0);
    let horiz = Plane::from_fn(h, w, |y, x| {
        let mut s = T::zero();
        for (k, &t) in taps.iter().enumerate() {
            s += t * f.at(y, mirror(x as isize + k as isize - 2, w));
        }
        s * norm
    });
    Plane::from_fn(h, w, |y, x| {
        let mut s = T::zero();
        for (k, &t) in taps.iter().enumerate() {
            s += t * horiz.at(mirror(y as isize + k as isize - 2, h), x);
        }
        s * norm
    })
}

fn reduce<T: Scalar>(f: &Plane<T>) -> Plane<T> {
    let b = blur(f);
    Plane::from_fn(f.height / 2, f.width / 2, |y, x| b.at(2 * y, 2 * x))
}

fn expand<T: Scalar>(f: &Plane<T>, height: usize, width: usize) -> Plane<T> {
    let mut z = Plane::zeros(height, width);
    for y in 0..f.height {
        for x in 0..f.width {
            *z.at_mut(2 * y, 2 * x) = f.at(y, x);
        }
    }
    blur(&z).map(|v| v * T::lit(4.0))
}

pub fn check_dims(height: usize, width: usize, depth: usize) -> Result<(), MagnifyError> {
    let m = 1usize << depth.min(31);
    if depth == 0 || height % m != 0 || width % m != 0 {
        return Err(MagnifyError::IncompatibleDims {
            height,
            width,
            depth,
        });
    }
    Ok(())
}

/// Laplacian-pyramid decomposition.
pub fn encode<T: Scalar>(img: &Plane<T>, depth: usize) -> Result<LatentStack<T>, MagnifyError> {
    check_dims(img.height, img.width, depth)?;
    let mut bands = Vec::with_capacity(depth);
    let mut current = img.clone();
    for _ in 0..depth {
        let low = reduce(&current);
        let up = expand(&low, current.height, current.width);
        bands.push(current.zip_map(&up, |a, b| a - b));
        current = low;
    }
    Ok(LatentStack {
        bands,
        residual: current,
    })
}

/// Amplifies the band-pass motion between `onset` and `target`.
pub fn manipulate<T: Scalar>(
    onset: &LatentStack<T>,
    target: &LatentStack<T>,
    alpha: T,
) -> Result<LatentStack<T>, MagnifyError> {
    if !onset.same_structure(target) {
        return Err(MagnifyError::StructureMismatch(
            "onset and target latents differ in shape".into(),
        ));
    }
    Ok(LatentStack {
        bands: onset
            .bands
            .iter()
            .zip(&target.bands)
            .map(|(o, t)| t.zip_map(o, |t, o| t + alpha * (t - o)))
            .collect(),
        residual: target.residual.clone(),
    })
}

/// Exact pyramid reconstruction without clamping.
pub fn reconstruct<T: Scalar>(lat: &LatentStack<T>) -> Result<Plane<T>, MagnifyError> {
    lat.check()?;
    let mut current = lat.residual.clone();
    for band in lat.bands.iter().rev() {
        let up = expand(&current, band.height, band.width);
        current = band.zip_map(&up, |a, b| a + b);
    }
    Ok(current)
}

/// Reconstruction clamped to a valid frame.
pub fn decode<T: Scalar>(lat: &LatentStack<T>) -> Result<Image<T>, MagnifyError> {
    Ok(Image::from_plane_clamped(reconstruct(lat)?))
}

/// `Mag(onset, target)`: encode both with the same codec, then amplify.
pub fn magnify_pair<T: Scalar>(
    onset: &LatentStack<T>,
    target: &Image<T>,
    cfg: &MagConfig,
) -> Result<LatentStack<T>, MagnifyError> {
    let lt = encode(target.plane(), cfg.depth)?;
    manipulate(onset, &lt, T::lit(cfg.alpha))
}

/// Bilinear resampling onto a finer grid (pixel centres aligned).
pub fn resize_bilinear<T: Scalar>(f: &Plane<T>, height: usize, width: usize) -> Plane<T> {
    if f.dims() == (height, width) {
        return f.clone();
    }
    let sy = f.height as f64 / height as f64;
    let sx = f.width as f64 / width as f64;
    Plane::from_fn(height, width, |y, x| {
        f.sample_bilinear(
            T::lit((y as f64 + 0.5) * sy - 0.5),
            T::lit((x as f64 + 0.5) * sx - 0.5),
        )
    })
}

/// Planes with a shared spatial extent, persisted as `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack<T> {
    pub channels: Vec<Plane<T>>,
}

impl<T: Scalar> ChannelStack<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.channels.first().map(|c| c.dims()).unwrap_or((0, 0))
    }

    pub fn to_tensor(&self) -> TensorFile {
        let (h, w) = self.dims();
        TensorFile {
            dims: vec![self.channels.len(), h, w],
            data: self
                .channels
                .iter()
                .flat_map(|c| c.data.iter().map(|v| v.as_f64() as f32))
                .collect(),
        }
    }

    pub fn from_tensor(t: &TensorFile) -> Result<Self, MagnifyError> {
        t.validate()?;
        if t.dims.len() != 3 {
            return Err(MagnifyError::Corrupt(format!(
                "expected (C, H, W) tensor, got {:?}",
                t.dims
            )));
        }
        let (c, h, w) = (t.dims[0], t.dims[1], t.dims[2]);
        Ok(Self {
            channels: (0..c)
                .map(|i| Plane {
                    height: h,
                    width: w,
                    data: t.data[i * h * w..(i + 1) * h * w]
                        .iter()
                        .map(|&v| T::lit(v as f64))
                        .collect(),
                })
                .collect(),
        })
    }
}

fn check_triplet<T: Scalar>(
    onset: &Image<T>,
    apex: &Image<T>,
    pseudo_apex: &Image<T>,
    cfg: &MagConfig,
) -> Result<(), MagnifyError> {
    cfg.validate()?;
    if onset.dims() != apex.dims() || onset.dims() != pseudo_apex.dims() {
        return Err(MagnifyError::TripletMismatch);
    }
    onset.check_frame_dims()?;
    Ok(())
}

/// `concat(Mag(onset, apex), Mag(onset, pseudo_apex))`, every latent level
/// resampled to the frame grid: `2 * (depth + 1)` channels.
pub fn magnified_latent_pair<T: Scalar>(
    onset: &Image<T>,
    apex: &Image<T>,
    pseudo_apex: &Image<T>,
    cfg: &MagConfig,
) -> Result<ChannelStack<T>, MagnifyError> {
    check_triplet(onset, apex, pseudo_apex, cfg)?;
    let lo = encode(onset.plane(), cfg.depth)?;
    magnified_latent_pair_from(&lo, apex, pseudo_apex, cfg)
}

/// Same as [`magnified_latent_pair`] with a pre-encoded onset frame.
pub fn magnified_latent_pair_from<T: Scalar>(
    onset_latent: &LatentStack<T>,
    apex: &Image<T>,
    pseudo_apex: &Image<T>,
    cfg: &MagConfig,
) -> Result<ChannelStack<T>, MagnifyError> {
    let (h, w) = apex.dims();
    if onset_latent.source_dims() != (h, w) || pseudo_apex.dims() != (h, w) {
        return Err(MagnifyError::TripletMismatch);
    }
    let a = magnify_pair(onset_latent, apex, cfg)?;
    let b = if pseudo_apex == apex {
        a.clone()
    } else {
        magnify_pair(onset_latent, pseudo_apex, cfg)?
    };
    let channels = a
        .levels()
        .chain(b.levels())
        .map(|l| resize_bilinear(l, h, w))
        .collect();
    Ok(ChannelStack { channels })
}

/// Decoded counterpart of the latent pair: two magnified frames.
pub fn decoded_magnified_pair<T: Scalar>(
    onset: &Image<T>,
    apex: &Image<T>,
    pseudo_apex: &Image<T>,
    cfg: &MagConfig,
) -> Result<ChannelStack<T>, MagnifyError> {
    check_triplet(onset, apex, pseudo_apex, cfg)?;
    let lo = encode(onset.plane(), cfg.depth)?;
    decoded_magnified_pair_from(&lo, apex, pseudo_apex, cfg)
}

pub fn decoded_magnified_pair_from<T: Scalar>(
    onset_latent: &LatentStack<T>,
    apex: &Image<T>,
    pseudo_apex: &Image<T>,
    cfg: &MagConfig,
) -> Result<ChannelStack<T>, MagnifyError> {
    let a = decode(&magnify_pair(onset_latent, apex, cfg)?)?;
    let b = decode(&magnify_pair(onset_latent, pseudo_apex, cfg)?)?;
    Ok(ChannelStack {
        channels: vec![a.into_plane(), b.into_plane()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(h: usize, w: usize, seed: u64) -> Plane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random::<f64>())
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        Image::from_plane(random_plane(h, w, seed)).unwrap()
    }

    #[test]
    fn constant_image_has_zero_bands() {
        for c in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
            let lat = encode(&Plane::filled(32, 32, c), 3).unwrap();
            for band in &lat.bands {
                assert!(band.data.iter().all(|&v| v == 0.0), "c = {c}");
            }
            assert!(lat.residual.data.iter().all(|&v| v == c));
        }
        let lat = encode(&Plane::<f64>::filled(32, 32, 0.3), 3).unwrap();
        for band in &lat.bands {
            assert!(band.data.iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn level_dims_halve() {
        let lat = encode(&random_plane(64, 64, 1), 3).unwrap();
        let dims: Vec<_> = lat.levels().map(|l| l.dims()).collect();
        assert_eq!(dims, vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
    }

    #[test]
    fn incompatible_dims_rejected() {
        assert!(matches!(
            encode(&random_plane(60, 64, 1), 3),
            Err(MagnifyError::IncompatibleDims { .. })
        ));
        assert!(encode(&random_plane(64, 64, 1), 0).is_err());
    }

    #[test]
    fn encode_is_linear() {
        let a = random_plane(32, 32, 2);
        let b = random_plane(32, 32, 3);
        let sum = a.zip_map(&b, |x, y| x + y);
        let la = encode(&a, 3).unwrap();
        let lb = encode(&b, 3).unwrap();
        let ls = encode(&sum, 3).unwrap();
        let added = la.zip_map(&lb, |x, y| x + y);
        for (p, q) in ls.levels().zip(added.levels()) {
            assert!(p.max_abs_diff(q) < 1e-12);
        }
    }

    #[test]
    fn alpha_zero_and_equal_latents_are_identities() {
        let lo = encode(&random_plane(32, 32, 4), 2).unwrap();
        let lt = encode(&random_plane(32, 32, 5), 2).unwrap();
        assert_eq!(manipulate(&lo, &lt, 0.0).unwrap(), lt);
        assert_eq!(manipulate(&lt, &lt, 7.5).unwrap(), lt);
    }

    #[test]
    fn manipulate_rejects_structure_mismatch() {
        let a = encode(&random_plane(32, 32, 4), 2).unwrap();
        let b = encode(&random_plane(32, 32, 4), 3).unwrap();
        assert!(matches!(
            manipulate(&a, &b, 1.0),
            Err(MagnifyError::StructureMismatch(_))
        ));
    }

    #[test]
    fn perfect_reconstruction() {
        let x = random_image(64, 64, 6);
        let lat = encode(x.plane(), 3).unwrap();
        let y = decode(&lat).unwrap();
        assert!(y.plane().max_abs_diff(x.plane()) < 1e-6);
        let z = decode(&manipulate(&lat, &lat, 4.0).unwrap()).unwrap();
        assert!(z.plane().max_abs_diff(x.plane()) < 1e-6);
        let zero = decode(&lat.zeros_like()).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_detects_corruption() {
        let mut lat = encode(&random_plane(32, 32, 7), 2).unwrap();
        lat.bands[1] = Plane::zeros(5, 5);
        assert!(matches!(decode(&lat), Err(MagnifyError::Corrupt(_))));
    }

    #[test]
    fn latent_pair_shapes_and_halves() {
        let onset = random_image(32, 32, 8);
        let apex = random_image(32, 32, 9);
        let cfg = MagConfig { alpha: 3.0, depth: 3, decoded: false };
        let stack = magnified_latent_pair(&onset, &apex, &apex, &cfg).unwrap();
        assert_eq!(stack.channels.len(), 8);
        assert_eq!(stack.channels[..4], stack.channels[4..]);
        assert!(stack.channels.iter().all(|c| c.dims() == (32, 32)));
    }

    #[test]
    fn latent_pair_without_motion_is_resampled_onset() {
        let x = random_image(32, 32, 10);
        let cfg = MagConfig { alpha: 10.0, depth: 2, decoded: false };
        let stack = magnified_latent_pair(&x, &x, &x, &cfg).unwrap();
        let lat = encode(x.plane(), 2).unwrap();
        let expect: Vec<_> = lat
            .levels()
            .chain(lat.levels())
            .map(|l| resize_bilinear(l, 32, 32))
            .collect();
        assert_eq!(stack.channels, expect);
    }

    #[test]
    fn triplet_mismatch_rejected() {
        let a = random_image(32, 32, 1);
        let b = random_image(16, 32, 2);
        assert!(matches!(
            magnified_latent_pair(&a, &a, &b, &MagConfig::default()),
            Err(MagnifyError::TripletMismatch)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn manipulate_is_jointly_linear(seed in any::<u64>(), alpha in 0.0f64..20.0, s in -2.0f64..2.0) {
            let o1 = encode(&random_plane(16, 16, seed), 2).unwrap();
            let o2 = encode(&random_plane(16, 16, seed ^ 1), 2).unwrap();
            let t1 = encode(&random_plane(16, 16, seed ^ 2), 2).unwrap();
            let t2 = encode(&random_plane(16, 16, seed ^ 3), 2).unwrap();
            let o = o1.zip_map(&o2, |a, b| a + s * b);
            let t = t1.zip_map(&t2, |a, b| a + s * b);
            let lhs = manipulate(&o, &t, alpha).unwrap();
            let m1 = manipulate(&o1, &t1, alpha).unwrap();
            let m2 = manipulate(&o2, &t2, alpha).unwrap();
            let rhs = m1.zip_map(&m2, |a, b| a + s * b);
            for (p, q) in lhs.levels().zip(rhs.levels()) {
                prop_assert!(p.max_abs_diff(q) < 1e-9);
            }
        }
    }
}
