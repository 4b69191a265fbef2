//! Light-receiving front end: photodiode sensing, transimpedance and
//! non-inverting gain, 4th-order Butterworth low-pass, first-order high-pass,
//! and a hysteresis comparator that squares up the 30 Hz vibration.

use crate::encoder::{EncodeError, FrameStream};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use thiserror::Error;

pub const F_LPF_HZ: f64 = 32.4;
pub const F_HPF_HZ: f64 = 13.3;
/// Q of the two second-order sections of a 4th-order Butterworth low-pass.
pub const BUTTERWORTH4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];
/// Largest linear modulation depth a color pair can have; the comparator
/// hysteresis is a fraction of this swing after gain.
pub const NOMINAL_SWING: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AfeError {
    #[error("sample rate {sample_rate} Hz is below the minimum {min} Hz")]
    InvalidRate { sample_rate: f64, min: f64 },
    #[error("invalid sensor model: {0}")]
    InvalidModel(String),
    #[error("sensor position ({x}, {y}) is outside the image")]
    OutOfBounds { x: usize, y: usize },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub dc_offset: f64,
    pub mains_amp: f64,
    pub mains_freq_hz: f64,
    pub mains_phase_rad: f64,
    pub white_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            dc_offset: 0.0,
            mains_amp: 0.0,
            mains_freq_hz: 60.0,
            mains_phase_rad: 0.0,
            white_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    /// Row k gives the response of photodiode k to linear R, G, B.
    pub channel_weights: [[f64; 3]; 3],
    pub tia_gain: f64,
    pub amp_gain: f64,
    pub sample_rate_hz: f64,
    pub noise: NoiseModel,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            channel_weights: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tia_gain: 1.0,
            amp_gain: 1.0,
            sample_rate_hz: 9600.0,
            noise: NoiseModel::default(),
        }
    }
}

impl SensorModel {
    pub fn validate(&self, f_lpf: f64) -> Result<(), AfeError> {
        let min = 20.0 * f_lpf;
        if !(self.sample_rate_hz >= min) {
            return Err(AfeError::InvalidRate {
                sample_rate: self.sample_rate_hz,
                min,
            });
        }
        if self.channel_weights.iter().flatten().any(|w| !(*w >= 0.0)) {
            return Err(AfeError::InvalidModel("channel weights must be non-negative".into()));
        }
        if !(self.tia_gain > 0.0 && self.amp_gain > 0.0) {
            return Err(AfeError::InvalidModel("gains must be positive".into()));
        }
        let n = &self.noise;
        if !(n.white_sigma >= 0.0 && n.mains_amp >= 0.0 && n.mains_freq_hz > 0.0) {
            return Err(AfeError::InvalidModel("noise parameters out of range".into()));
        }
        Ok(())
    }

    /// Noise-free photodiode output for a linear-light pixel.
    #[inline]
    pub fn respond(&self, linear: [f64; 3]) -> [f64; 3] {
        let w = &self.channel_weights;
        std::array::from_fn(|k| self.tia_gain * (w[k][0] * linear[0] + w[k][1] * linear[1] + w[k][2] * linear[2]))
    }
}

/// Additive noise: DC offset, one mains sinusoid shared by all channels, and
/// independent white Gaussian noise per channel.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    model: NoiseModel,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl NoiseSource {
    pub fn new(model: NoiseModel) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            normal: Normal::new(0.0, model.white_sigma.max(0.0)).expect("finite sigma"),
        }
    }

    pub fn sample(&mut self, t: f64) -> [f64; 3] {
        let m = &self.model;
        let common = m.dc_offset + m.mains_amp * (2.0 * PI * m.mains_freq_hz * t + m.mains_phase_rad).sin();
        if m.white_sigma > 0.0 {
            std::array::from_fn(|_| common + self.normal.sample(&mut self.rng))
        } else {
            [common; 3]
        }
    }
}

/// Per-channel samples taken at `t0 + i / sample_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensedSignal {
    pub t0: f64,
    pub sample_rate: f64,
    pub channels: [Vec<f64>; 3],
}

impl SensedSignal {
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.sample_rate
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.channels.iter_mut().flatten().for_each(|v| *v *= a);
        out
    }
}

/// Sample `n` points starting at `t0`, reading linear light from `light(t)`.
pub fn sense_with<F>(model: &SensorModel, t0: f64, n: usize, mut light: F) -> Result<SensedSignal, AfeError>
where
    F: FnMut(f64) -> Result<[f64; 3], AfeError>,
{
    let mut noise = NoiseSource::new(model.noise);
    let mut channels: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
    for i in 0..n {
        let t = t0 + i as f64 / model.sample_rate_hz;
        let s = model.respond(light(t)?);
        let e = noise.sample(t);
        for k in 0..3 {
            channels[k].push(s[k] + e[k]);
        }
    }
    Ok(SensedSignal {
        t0,
        sample_rate: model.sample_rate_hz,
        channels,
    })
}

/// Sample the pixel at `pos` over `[t0, t1)`.
pub fn sense(
    stream: &FrameStream,
    pos: (usize, usize),
    model: &SensorModel,
    t0: f64,
    t1: f64,
) -> Result<SensedSignal, AfeError> {
    let (x, y) = pos;
    if x >= stream.width || y >= stream.height {
        return Err(AfeError::OutOfBounds { x, y });
    }
    if !(t1 > t0) {
        return Err(AfeError::InvalidModel(format!("empty time span [{t0}, {t1})")));
    }
    let n = ((t1 - t0) * model.sample_rate_hz - 1e-9).ceil() as usize;
    sense_with(model, t0, n, |t| Ok(stream.frame_at(t)?.pixel(x, y).to_linear().to_array()))
}

/// Second-order IIR section in transposed direct form II.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// Denominator `1 + a[0] z^-1 + a[1] z^-2`.
    pub a: [f64; 2],
    s: [f64; 2],
}

impl Biquad {
    pub fn new(b: [f64; 3], a: [f64; 2]) -> Self {
        Self { b, a, s: [0.0; 2] }
    }

    /// Bilinear-transformed low-pass `w0^2 / (s^2 + s w0/Q + w0^2)`, prewarped at `fc`.
    pub fn lowpass(fc: f64, q: f64, fs: f64) -> Self {
        let k = (PI * fc / fs).tan();
        let norm = 1.0 / (1.0 + k / q + k * k);
        let b0 = k * k * norm;
        Self::new(
            [b0, 2.0 * b0, b0],
            [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
        )
    }

    /// Bilinear-transformed first-order high-pass `s / (s + w0)`, prewarped at `fc`.
    pub fn highpass1(fc: f64, fs: f64) -> Self {
        let k = (PI * fc / fs).tan();
        let norm = 1.0 / (1.0 + k);
        Self::new([norm, -norm, 0.0], [(k - 1.0) * norm, 0.0])
    }

    #[inline]
    pub fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.s[0];
        self.s[0] = self.b[1] * x - self.a[0] * y + self.s[1];
        self.s[1] = self.b[2] * x - self.a[1] * y;
        y
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// Load the state a constant input `x` would have settled to.
    pub fn settle(&mut self, x: f64) {
        let y = self.dc_gain() * x;
        self.s[1] = self.b[2] * x - self.a[1] * y;
        self.s[0] = self.b[1] * x - self.a[0] * y + self.s[1];
    }

    pub fn reset(&mut self) {
        self.s = [0.0; 2];
    }

    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }

    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a[0] * self.a[0] - 4.0 * self.a[1], 0.0).sqrt();
        [(-self.a[0] + disc) / 2.0, (-self.a[0] - disc) / 2.0]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    /// Filter state starts at the steady state of the first input sample.
    #[default]
    Warm,
    /// Filter state starts at zero.
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainParams {
    pub f_lpf_hz: f64,
    pub f_hpf_hz: f64,
    pub start: StartMode,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            f_lpf_hz: F_LPF_HZ,
            f_hpf_hz: F_HPF_HZ,
            start: StartMode::Warm,
        }
    }
}

impl ChainParams {
    pub fn design(&self, model: &SensorModel) -> Result<FilterChain, AfeError> {
        model.validate(self.f_lpf_hz)?;
        let mut chain = design_filters(self.f_lpf_hz, self.f_hpf_hz, model.sample_rate_hz)?;
        chain.amp_gain = model.amp_gain;
        chain.start = self.start;
        Ok(chain)
    }
}

/// Coefficients shared by all channels; each channel runs its own copy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterChain {
    pub lpf: [Biquad; 2],
    pub hpf: Biquad,
    pub amp_gain: f64,
    pub sample_rate: f64,
    pub start: StartMode,
}

pub fn design_filters(f_lpf: f64, f_hpf: f64, sample_rate: f64) -> Result<FilterChain, AfeError> {
    let min = 2.0 * f_lpf * 10.0;
    if !(sample_rate > min) {
        return Err(AfeError::InvalidRate { sample_rate, min });
    }
    if !(f_hpf > 0.0 && f_lpf > f_hpf) {
        return Err(AfeError::InvalidModel(format!("cutoffs {f_hpf} Hz / {f_lpf} Hz")));
    }
    Ok(FilterChain {
        lpf: BUTTERWORTH4_Q.map(|q| Biquad::lowpass(f_lpf, q, sample_rate)),
        hpf: Biquad::highpass1(f_hpf, sample_rate),
        amp_gain: 1.0,
        sample_rate,
        start: StartMode::Warm,
    })
}

impl FilterChain {
    pub fn lpf_response(&self, f: f64) -> Complex64 {
        self.lpf.iter().map(|s| s.response(f, self.sample_rate)).product()
    }

    pub fn hpf_response(&self, f: f64) -> Complex64 {
        self.hpf.response(f, self.sample_rate)
    }

    pub fn response(&self, f: f64) -> Complex64 {
        self.amp_gain * self.lpf_response(f) * self.hpf_response(f)
    }

    pub fn channel(&self) -> ChannelFilter {
        ChannelFilter {
            stages: [self.lpf[0], self.lpf[1], self.hpf],
            amp_gain: self.amp_gain,
            primed: self.start == StartMode::Cold,
        }
    }
}

/// One channel's running filter state.
#[derive(Debug, Clone)]
pub struct ChannelFilter {
    stages: [Biquad; 3],
    amp_gain: f64,
    primed: bool,
}

impl ChannelFilter {
    #[inline]
    pub fn process(&mut self, x: f64) -> f64 {
        let mut v = self.amp_gain * x;
        if !self.primed {
            let mut u = v;
            for s in &mut self.stages {
                s.settle(u);
                u *= s.dc_gain();
            }
            self.primed = true;
        }
        for s in &mut self.stages {
            v = s.process(v);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparatorParams {
    pub threshold: f64,
    /// Hysteresis as a fraction of the nominal swing after gain.
    pub hysteresis_fraction: f64,
}

impl Default for ComparatorParams {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            hysteresis_fraction: 0.02,
        }
    }
}

impl ComparatorParams {
    pub fn build(&self, model: &SensorModel) -> Comparator {
        Comparator {
            threshold: self.threshold,
            hysteresis: self.hysteresis_fraction * NOMINAL_SWING * model.tia_gain * model.amp_gain,
        }
    }
}

/// Switches high above `threshold + hysteresis` and low below `threshold - hysteresis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparator {
    pub threshold: f64,
    pub hysteresis: f64,
}

impl Comparator {
    /// Returns the new level when the output switches.
    #[inline]
    pub fn update(&self, high: &mut bool, x: f64) -> Option<bool> {
        if !*high && x > self.threshold + self.hysteresis {
            *high = true;
            Some(true)
        } else if *high && x < self.threshold - self.hysteresis {
            *high = false;
            Some(false)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub t: f64,
    pub rising: bool,
}

/// Three filter channels and comparators fed one sample at a time.
#[derive(Debug, Clone)]
pub struct Receiver {
    filters: [ChannelFilter; 3],
    comparator: Comparator,
    high: [bool; 3],
}

impl Receiver {
    pub fn new(chain: &FilterChain, comparator: Comparator) -> Self {
        Self {
            filters: std::array::from_fn(|_| chain.channel()),
            comparator,
            high: [false; 3],
        }
    }

    /// Filtered values and comparator switches for one sample.
    #[inline]
    pub fn step(&mut self, x: [f64; 3]) -> ([f64; 3], [Option<bool>; 3]) {
        let y: [f64; 3] = std::array::from_fn(|k| self.filters[k].process(x[k]));
        let sw = std::array::from_fn(|k| self.comparator.update(&mut self.high[k], y[k]));
        (y, sw)
    }

    pub fn levels(&self) -> [bool; 3] {
        self.high
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub filtered: [Vec<f64>; 3],
    pub binary: [Vec<bool>; 3],
    pub edges: [Vec<Edge>; 3],
}

pub fn run_chain(signal: &SensedSignal, chain: &FilterChain, comparator: &Comparator) -> ChainOutput {
    let n = signal.len();
    let mut rx = Receiver::new(chain, *comparator);
    let mut out = ChainOutput {
        filtered: std::array::from_fn(|_| Vec::with_capacity(n)),
        binary: std::array::from_fn(|_| Vec::with_capacity(n)),
        edges: Default::default(),
    };
    for i in 0..n {
        let (y, sw) = rx.step(std::array::from_fn(|k| signal.channels[k][i]));
        let levels = rx.levels();
        for k in 0..3 {
            out.filtered[k].push(y[k]);
            out.binary[k].push(levels[k]);
            if let Some(rising) = sw[k] {
                out.edges[k].push(Edge {
                    t: signal.time(i),
                    rising,
                });
            }
        }
    }
    out
}

/// CSV with raw, filtered and comparator columns per channel.
pub fn write_trace_csv<W: Write>(w: W, signal: &SensedSignal, out: &ChainOutput) -> Result<(), AfeError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "t_s", "raw_R", "raw_G", "raw_B", "filt_R", "filt_G", "filt_B", "cmp_R", "cmp_G", "cmp_B",
    ])?;
    for i in 0..signal.len() {
        let mut rec = vec![format!("{:.6}", signal.time(i))];
        rec.extend((0..3).map(|k| signal.channels[k][i].to_string()));
        rec.extend((0..3).map(|k| out.filtered[k][i].to_string()));
        rec.extend((0..3).map(|k| u8::from(out.binary[k][i]).to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}
