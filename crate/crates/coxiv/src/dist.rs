//! Seeded random streams, distribution samplers, and the standard normal
//! cdf/pdf family used throughout the likelihood code.
//!
//! Φ and log Φ are hand-rolled from Cody-style rational approximations of
//! erf/erfcx so that log Φ stays finite and accurate far into the left tail
//! (the E-step evaluates log Φ at arguments well below −30).

use rand::distributions::Uniform as RandUniform;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

// ---------------------------------------------------------------------------
// Standard normal cdf / pdf
// ---------------------------------------------------------------------------

/// erf(x) for |x| <= 0.46875 (Cody rational approximation).
fn erf_small(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.161_123_743_870_565_6e0,
        1.138_641_541_510_501_56e2,
        3.774_852_376_853_020_2e2,
        3.209_377_589_138_469_45e3,
        1.857_777_061_846_031_53e-1,
    ];
    const B: [f64; 4] = [
        2.360_129_095_234_412_09e1,
        2.440_246_379_344_441_73e2,
        1.282_616_526_077_372_28e3,
        2.844_236_833_439_170_6e3,
    ];
    let y = x * x;
    let mut num = A[4] * y;
    let mut den = y;
    for i in 0..3 {
        num = (num + A[i]) * y;
        den = (den + B[i]) * y;
    }
    x * (num + A[3]) / (den + B[3])
}

/// erfcx(z) = exp(z^2) * erfc(z) for z >= 0.46875.
fn erfcx_large(z: f64) -> f64 {
    if z <= 4.0 {
        const C: [f64; 9] = [
            5.641_884_969_886_700_9e-1,
            8.883_149_794_388_375_9e0,
            6.611_919_063_714_163e1,
            2.986_351_381_974_001_3e2,
            8.819_522_212_417_69e2,
            1.712_047_612_634_070_6e3,
            2.051_078_377_826_071_5e3,
            1.230_339_354_797_997_2e3,
            2.153_115_354_744_038_46e-8,
        ];
        const D: [f64; 8] = [
            1.574_492_611_070_983_47e1,
            1.176_939_508_913_125e2,
            5.371_811_018_620_098_6e2,
            1.621_389_574_566_690_2e3,
            3.290_799_235_733_459_7e3,
            4.362_619_090_143_247e3,
            3.439_367_674_143_721_6e3,
            1.230_339_354_803_749_4e3,
        ];
        let mut num = C[8] * z;
        let mut den = z;
        for i in 0..7 {
            num = (num + C[i]) * z;
            den = (den + D[i]) * z;
        }
        (num + C[7]) / (den + D[7])
    } else {
        const P: [f64; 6] = [
            3.053_266_349_612_323_44e-1,
            3.603_448_999_498_044_4e-1,
            1.257_817_261_112_292_46e-1,
            1.608_378_514_874_227_66e-2,
            6.587_491_615_298_378e-4,
            1.631_538_713_730_209_78e-2,
        ];
        const Q: [f64; 5] = [
            2.568_520_192_289_822_4e0,
            1.872_952_849_923_460_5e0,
            5.279_051_029_514_284_1e-1,
            6.051_834_131_244_131_9e-2,
            2.335_204_976_268_691_85e-3,
        ];
        let ysq = 1.0 / (z * z);
        let mut num = P[5] * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + P[i]) * ysq;
            den = (den + Q[i]) * ysq;
        }
        num = ysq * (num + P[4]);
        den += Q[4];
        (FRAC_1_SQRT_PI - num / den) / z
    }
}

/// Complementary error function.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let result = if z <= 0.46875 {
        return 1.0 - erf_small(x);
    } else {
        (-z * z).exp() * erfcx_large(z)
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// Standard normal cumulative distribution function Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// log Φ(x), finite and accurate for arbitrarily negative x.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    // For moderate/large x, Φ(x) is far from 0 and a direct log is exact.
    if x > -0.66 {
        return std_normal_cdf(x).ln();
    }
    // Φ(x) = 0.5 exp(-z^2) erfcx(z), z = -x/√2 >= 0.46875.
    let z = -x * std::f64::consts::FRAC_1_SQRT_2;
    (0.5 * erfcx_large(z)).ln() - z * z
}

/// Standard normal density φ(x).
pub fn std_normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// log φ(x).
pub fn log_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Inverse Mills ratio φ(x)/Φ(x), stable over the whole real line.
pub fn mills_ratio(x: f64) -> f64 {
    (log_std_normal_pdf(x) - log_std_normal_cdf(x)).exp()
}

// ---------------------------------------------------------------------------
// Seeded streams
// ---------------------------------------------------------------------------

/// A reproducible random stream: identical (seed, stream_id) pairs yield
/// identical draw sequences across runs and platforms for a fixed generator
/// version (ChaCha12).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl SeededStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for a tagged purpose and index, so nested
/// stochastic stages (data generation, EM draws, bootstrap) never share
/// streams.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)).wrapping_add(index))
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// Normal(mean, sd^2).
#[derive(Debug, Clone, Copy)]
pub struct Normal(rand_distr::Normal<f64>);

impl Normal {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Normal requires finite mean and sd > 0, got ({mean}, {sd})"
            )));
        }
        Ok(Self(rand_distr::Normal::new(mean, sd).expect("validated")))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.0.sample(rng)
    }
}

/// Uniform on [a, b).
#[derive(Debug, Clone, Copy)]
pub struct Uniform(RandUniform<f64>);

impl Uniform {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a < b && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Uniform requires finite a < b, got ({a}, {b})"
            )));
        }
        Ok(Self(RandUniform::new(a, b)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.sample(self.0)
    }
}

/// Gamma with shape and *rate* (mean = shape/rate).
#[derive(Debug, Clone, Copy)]
pub struct Gamma(rand_distr::Gamma<f64>);

impl Gamma {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Gamma requires shape > 0 and rate > 0, got ({shape}, {rate})"
            )));
        }
        Ok(Self(
            rand_distr::Gamma::new(shape, 1.0 / rate).expect("validated"),
        ))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.0.sample(rng)
    }
}

/// Exponential with rate (mean = 1/rate).
#[derive(Debug, Clone, Copy)]
pub struct Exponential(rand_distr::Exp<f64>);

impl Exponential {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Exponential requires rate > 0, got {rate}"
            )));
        }
        Ok(Self(rand_distr::Exp::new(rate).expect("validated")))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.0.sample(rng)
    }
}

/// Standard logistic, location 0 and scale 1 (variance π²/3), sampled by
/// inverse transform.
#[derive(Debug, Clone, Copy, Default)]
pub struct Logistic;

impl Logistic {
    pub fn new() -> Self {
        Self
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Open interval avoids ln(0).
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        (u / (1.0 - u)).ln()
    }
}

/// Student t with a location shift and df degrees of freedom.
#[derive(Debug, Clone, Copy)]
pub struct StudentT {
    location: f64,
    inner: rand_distr::StudentT<f64>,
}

impl StudentT {
    pub fn new(location: f64, df: f64) -> Result<Self> {
        if !(df > 0.0 && df.is_finite() && location.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "StudentT requires finite location and df > 0, got ({location}, {df})"
            )));
        }
        Ok(Self {
            location,
            inner: rand_distr::StudentT::new(df).expect("validated"),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.location + self.inner.sample(rng)
    }
}

/// The latent pair (V, U) of the treatment/frailty model: V has unit
/// variance, Var(U) = sigma_u², Cov(V, U) = rho·sigma_u.
#[derive(Debug, Clone, Copy)]
pub struct BivariateNormal {
    sigma_u: f64,
    rho: f64,
}

impl BivariateNormal {
    pub fn new(sigma_u: f64, rho: f64) -> Result<Self> {
        if !(sigma_u > 0.0 && sigma_u.is_finite() && rho.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "BivariateNormal requires sigma_u > 0 and |rho| < 1, got ({sigma_u}, {rho})"
            )));
        }
        Ok(Self { sigma_u, rho })
    }

    /// Builds from the covariance parameterization (sigma_uv, sigma_u²).
    pub fn from_cov(sigma_uv: f64, sigma_u2: f64) -> Result<Self> {
        if !(sigma_u2 > 0.0 && sigma_u2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "BivariateNormal requires sigma_u² > 0, got {sigma_u2}"
            )));
        }
        let sigma_u = sigma_u2.sqrt();
        Self::new(sigma_u, sigma_uv / sigma_u)
    }

    /// Returns (v, u).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let v: f64 = rand_distr::StandardNormal.sample(rng);
        let e: f64 = rand_distr::StandardNormal.sample(rng);
        let u = self.rho * self.sigma_u * v + self.sigma_u * (1.0 - self.rho * self.rho).sqrt() * e;
        (v, u)
    }
}
