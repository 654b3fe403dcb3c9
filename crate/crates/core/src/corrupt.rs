//! Synthetic corruption families with severity levels 1..=5.
//!
//! These are parametric stand-ins for benchmark corruption kernels: six
//! families whose distortion energy grows with severity. The random noise
//! fields depend only on the seed, not on the severity, so the measured
//! distortion is exactly monotone for the noise families too.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::stream::mix_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoiseApprox,
    Blur,
    Contrast,
    Brightness,
    PixelateApprox,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoiseApprox,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::PixelateApprox,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoiseApprox => "shot_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::PixelateApprox => "pixelate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                CoreError::InvalidConfig(format!(
                    "unknown corruption '{}'; known: {}",
                    s,
                    Self::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }

    fn tag(&self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 1,
            CorruptionKind::ShotNoiseApprox => 2,
            CorruptionKind::Blur => 3,
            CorruptionKind::Contrast => 4,
            CorruptionKind::Brightness => 5,
            CorruptionKind::PixelateApprox => 6,
        }
    }
}

/// A corruption kind at a severity in 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(CoreError::InvalidConfig(format!(
                "severity must lie in 1..=5, got {}",
                severity
            )));
        }
        Ok(Corruption { kind, severity })
    }

    /// Identifier of the corrupted domain, e.g. `brightness@5`.
    pub fn id(&self) -> String {
        format!("{}@{}", self.kind.name(), self.severity)
    }

    /// Parse `kind@severity`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, sev) = s.split_once('@').ok_or_else(|| {
            CoreError::InvalidConfig(format!("corruption must be kind@severity, got '{}'", s))
        })?;
        let severity: u8 = sev
            .parse()
            .map_err(|_| CoreError::InvalidConfig(format!("bad severity in '{}'", s)))?;
        Corruption::new(CorruptionKind::parse(kind)?, severity)
    }
}

const GAUSS_SIGMA: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
const SHOT_SCALE: [f64; 5] = [0.06, 0.09, 0.14, 0.21, 0.32];
const BLUR_BLEND: [f64; 5] = [0.3, 0.45, 0.6, 0.8, 1.0];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
const BRIGHTNESS_OFFSET: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const PIXELATE_BLOCK: [usize; 5] = [2, 2, 4, 4, 8];
const PIXELATE_BLEND: [f64; 5] = [0.5, 1.0, 0.75, 1.0, 1.0];

/// Additive offset used by the brightness family at a given severity.
pub fn brightness_offset(severity: u8) -> f64 {
    BRIGHTNESS_OFFSET[severity as usize - 1]
}

/// Contrast scaling factor (< 1) at a given severity.
pub fn contrast_factor(severity: u8) -> f64 {
    CONTRAST_FACTOR[severity as usize - 1]
}

/// Apply a corruption to a sample or a sample stack, deterministically in
/// `seed`.
pub fn corrupt(x: &Tensor, c: Corruption, seed: u64) -> Result<Tensor> {
    let s = c.severity as usize - 1;
    let mut out = x.clone();
    let rng_seed = mix_seed(seed, c.kind.tag());
    match c.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let sigma = GAUSS_SIGMA[s];
            for v in out.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = (*v as f64 + sigma * n) as f32;
            }
        }
        CorruptionKind::ShotNoiseApprox => {
            // Signal-dependent noise: amplitude grows with the local value.
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let scale = SHOT_SCALE[s];
            for v in out.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                let amp = ((*v as f64).max(0.0) + 0.05).sqrt();
                *v = (*v as f64 + scale * amp * n) as f32;
            }
        }
        CorruptionKind::Blur => {
            let blurred = blur_passes(x, 2)?;
            let a = BLUR_BLEND[s];
            for (o, (xo, bl)) in out
                .data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(blurred.data()))
                .map(|(o, p)| (o, p))
            {
                *o = ((1.0 - a) * *xo as f64 + a * *bl as f64) as f32;
            }
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[s];
            per_sample(&mut out, |sample| {
                let mean =
                    sample.iter().map(|v| *v as f64).sum::<f64>() / sample.len() as f64;
                for v in sample.iter_mut() {
                    *v = (mean + f * (*v as f64 - mean)) as f32;
                }
            })?;
        }
        CorruptionKind::Brightness => {
            let b = BRIGHTNESS_OFFSET[s];
            for v in out.data_mut() {
                *v = (*v as f64 + b) as f32;
            }
        }
        CorruptionKind::PixelateApprox => {
            let block = PIXELATE_BLOCK[s];
            let a = PIXELATE_BLEND[s];
            let pixelated = block_average(x, block)?;
            for (o, (xo, px)) in out
                .data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(pixelated.data()))
            {
                *o = ((1.0 - a) * *xo as f64 + a * *px as f64) as f32;
            }
        }
    }
    out.check_finite("corrupted tensor")?;
    Ok(out)
}

/// Mean squared deviation between a corrupted tensor and the clean one.
pub fn distortion_energy(clean: &Tensor, corrupted: &Tensor) -> f64 {
    clean
        .data()
        .iter()
        .zip(corrupted.data())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>()
        / clean.len() as f64
}

fn per_sample<F: FnMut(&mut [f32])>(x: &mut Tensor, mut f: F) -> Result<()> {
    let (b, c, h, w) = x.dims4()?;
    let stride = c * h * w;
    for bi in 0..b {
        f(&mut x.data_mut()[bi * stride..(bi + 1) * stride]);
    }
    Ok(())
}

/// Separable 3x3 binomial blur with reflect padding, applied `passes` times
/// per sample and channel.
fn blur_passes(x: &Tensor, passes: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut cur = x.data().to_vec();
    let plane = h * w;
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    for _ in 0..passes {
        let mut next = vec![0.0f32; cur.len()];
        for bc in 0..b * c {
            let base = bc * plane;
            // Horizontal [1, 2, 1] / 4.
            let mut tmp = vec![0.0f64; plane];
            for y in 0..h {
                for xcol in 0..w {
                    let l = cur[base + y * w + reflect(xcol as isize - 1, w)] as f64;
                    let m = cur[base + y * w + xcol] as f64;
                    let r = cur[base + y * w + reflect(xcol as isize + 1, w)] as f64;
                    tmp[y * w + xcol] = (l + 2.0 * m + r) / 4.0;
                }
            }
            // Vertical [1, 2, 1] / 4.
            for y in 0..h {
                for xcol in 0..w {
                    let u = tmp[reflect(y as isize - 1, h) * w + xcol];
                    let m = tmp[y * w + xcol];
                    let d = tmp[reflect(y as isize + 1, h) * w + xcol];
                    next[base + y * w + xcol] = ((u + 2.0 * m + d) / 4.0) as f32;
                }
            }
        }
        cur = next;
    }
    Tensor::new(x.shape().to_vec(), cur)
}

/// Average over `block x block` cells (clipped at the borders).
fn block_average(x: &Tensor, block: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    for bc in 0..b * c {
        let base = bc * plane;
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let y_end = (by + block).min(h);
                let x_end = (bx + block).min(w);
                let mut acc = 0.0f64;
                let mut count = 0usize;
                for y in by..y_end {
                    for xcol in bx..x_end {
                        acc += x.data()[base + y * w + xcol] as f64;
                        count += 1;
                    }
                }
                let mean = (acc / count as f64) as f32;
                for y in by..y_end {
                    for xcol in bx..x_end {
                        out[base + y * w + xcol] = mean;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_stack(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..4 * 3 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![4, 3, 8, 8], data).unwrap()
    }

    #[test]
    fn severity_monotone_distortion() {
        let x = random_stack(3);
        for kind in CorruptionKind::ALL {
            let energies: Vec<f64> = [1u8, 3, 5]
                .iter()
                .map(|s| {
                    let y = corrupt(&x, Corruption::new(kind, *s).unwrap(), 42).unwrap();
                    distortion_energy(&x, &y)
                })
                .collect();
            assert!(
                energies[0] < energies[1] && energies[1] < energies[2],
                "{:?}: {:?}",
                kind,
                energies
            );
        }
    }

    #[test]
    fn brightness_is_the_table_offset() {
        let x = random_stack(5);
        for s in 1..=5u8 {
            let y = corrupt(&x, Corruption::new(CorruptionKind::Brightness, s).unwrap(), 9).unwrap();
            let expected = brightness_offset(s);
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!(((b - a) as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn contrast_strictly_reduces_variance() {
        let x = random_stack(7);
        let y = corrupt(&x, Corruption::new(CorruptionKind::Contrast, 3).unwrap(), 9).unwrap();
        let var = |t: &Tensor| {
            let m = t.data().iter().map(|v| *v as f64).sum::<f64>() / t.len() as f64;
            t.data().iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>() / t.len() as f64
        };
        assert!(var(&y) < var(&x));
    }

    #[test]
    fn corruption_is_deterministic_in_seed() {
        let x = random_stack(11);
        let c = Corruption::new(CorruptionKind::GaussianNoise, 4).unwrap();
        let a = corrupt(&x, c, 123).unwrap();
        let b = corrupt(&x, c, 123).unwrap();
        let d = corrupt(&x, c, 124).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), d.data());
    }

    #[test]
    fn parse_ids() {
        let c = Corruption::parse("brightness@5").unwrap();
        assert_eq!(c.kind, CorruptionKind::Brightness);
        assert_eq!(c.severity, 5);
        assert_eq!(c.id(), "brightness@5");
        assert!(Corruption::parse("brightness@6").is_err());
        assert!(Corruption::parse("sparkles@3").is_err());
    }
}
