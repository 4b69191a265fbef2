//! Haptic output path: vibration waveforms, amplitude normalization and the
//! lumped detection-to-vibration delay.

use crate::detector::IdTransition;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const NORMALIZED_PEAK: i16 = 8192;
pub const DEFAULT_SAMPLE_RATE: f64 = 44100.0;

#[derive(Debug, Error)]
pub enum ActuatorError {
    #[error("waveform '{0}' is silent")]
    SilentInput(String),
    #[error("frequency {freq} Hz must lie in (0, {nyquist}) Hz")]
    InvalidFreq { freq: f64, nyquist: f64 },
    #[error("invalid duration {0} s")]
    InvalidDuration(f64),
    #[error("no waveform for texture ID {0}")]
    UnknownTextureId(u8),
    #[error("invalid actuator model: {0}")]
    InvalidModel(String),
    #[error("{path}: {reason}")]
    Wav { path: String, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<i16>,
    pub sample_rate_hz: f64,
    pub label: String,
}

impl Waveform {
    pub fn peak(&self) -> i32 {
        self.samples.iter().map(|&s| (s as i32).abs()).max().unwrap_or(0)
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    pub fn read_wav(path: &Path) -> Result<Self, ActuatorError> {
        let wav_err = |reason: String| ActuatorError::Wav {
            path: path.display().to_string(),
            reason,
        };
        let mut r = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
        let spec = r.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(wav_err(format!(
                "expected 16-bit PCM mono, got {} ch / {} bit",
                spec.channels, spec.bits_per_sample
            )));
        }
        let samples = r.samples::<i16>().collect::<Result<Vec<_>, _>>().map_err(|e| wav_err(e.to_string()))?;
        Ok(Self {
            samples,
            sample_rate_hz: spec.sample_rate as f64,
            label: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        })
    }

    pub fn write_wav(&self, path: &Path) -> Result<(), ActuatorError> {
        let wav_err = |e: hound::Error| ActuatorError::Wav {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz.round() as u32,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            w.write_sample(s).map_err(wav_err)?;
        }
        w.finalize().map_err(wav_err)
    }
}

/// Scale so the largest magnitude is exactly 8192.
pub fn normalize(w: &Waveform) -> Result<Waveform, ActuatorError> {
    let peak = w.peak();
    if peak == 0 {
        return Err(ActuatorError::SilentInput(w.label.clone()));
    }
    let scale = NORMALIZED_PEAK as f64 / peak as f64;
    Ok(Waveform {
        samples: w.samples.iter().map(|&s| (s as f64 * scale).round() as i16).collect(),
        ..w.clone()
    })
}

pub fn synth_sine(freq_hz: f64, duration_s: f64, sample_rate_hz: f64) -> Result<Waveform, ActuatorError> {
    let nyquist = sample_rate_hz / 2.0;
    if !(freq_hz > 0.0 && freq_hz < nyquist) {
        return Err(ActuatorError::InvalidFreq { freq: freq_hz, nyquist });
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(ActuatorError::InvalidDuration(duration_s));
    }
    let n = (duration_s * sample_rate_hz).round() as usize;
    let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * freq_hz * i as f64 / sample_rate_hz).sin()).collect();
    // sample instants rarely hit the crest, so scale to the largest sample
    let crest = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if crest == 0.0 {
        return Err(ActuatorError::InvalidDuration(duration_s));
    }
    let scale = NORMALIZED_PEAK as f64 / crest;
    Ok(Waveform {
        samples: x.iter().map(|v| (v * scale).round() as i16).collect(),
        sample_rate_hz,
        label: format!("sine_{freq_hz}hz"),
    })
}

/// Texture ID to waveform.
pub type WaveformBank = BTreeMap<u8, Waveform>;

/// Load `<id>.wav` files from a directory; other files are ignored.
pub fn load_bank(dir: &Path) -> Result<WaveformBank, ActuatorError> {
    let mut bank = WaveformBank::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u8>().ok()) {
                bank.insert(id, Waveform::read_wav(&path)?);
            }
        }
    }
    Ok(bank)
}

/// Sine bank with one frequency per texture, normalized to 8192.
pub fn synthetic_bank(freqs_hz: &[(u8, f64)], duration_s: f64) -> Result<WaveformBank, ActuatorError> {
    freqs_hz
        .iter()
        .map(|&(id, f)| Ok((id, synth_sine(f, duration_s, DEFAULT_SAMPLE_RATE)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayModel {
    pub mean_s: f64,
    pub jitter_sigma_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorModel {
    pub on_delay: DelayModel,
    pub off_delay: DelayModel,
    /// Draw delays from a normal distribution instead of using the means.
    pub jitter: bool,
    pub rng_seed: u64,
}

impl Default for ActuatorModel {
    fn default() -> Self {
        Self {
            on_delay: DelayModel {
                mean_s: 0.0428,
                jitter_sigma_s: 0.00047,
            },
            off_delay: DelayModel {
                mean_s: 0.0298,
                jitter_sigma_s: 0.00082,
            },
            jitter: false,
            rng_seed: 0,
        }
    }
}

impl ActuatorModel {
    pub fn validate(&self) -> Result<(), ActuatorError> {
        for d in [self.on_delay, self.off_delay] {
            if !(d.mean_s > 0.0 && d.jitter_sigma_s >= 0.0) {
                return Err(ActuatorError::InvalidModel(format!("{d:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActuatorEventKind {
    Onset,
    Offset,
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorEvent {
    pub t: f64,
    pub kind: ActuatorEventKind,
    /// Waveform that starts, or for an offset, the one that stops.
    pub texture_id: u8,
}

/// One actuator event per transition, in input order.
pub fn play_schedule(
    transitions: &[IdTransition],
    model: &ActuatorModel,
    bank: &WaveformBank,
) -> Result<Vec<ActuatorEvent>, ActuatorError> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.rng_seed);
    let mut draw = |d: DelayModel| -> f64 {
        if !model.jitter || d.jitter_sigma_s == 0.0 {
            return d.mean_s;
        }
        let n = Normal::new(d.mean_s, d.jitter_sigma_s).expect("valid sigma");
        loop {
            let v = n.sample(&mut rng);
            if v > 0.0 {
                return v;
            }
        }
    };
    transitions
        .iter()
        .map(|tr| {
            if tr.to != 0 && !bank.contains_key(&tr.to) {
                return Err(ActuatorError::UnknownTextureId(tr.to));
            }
            Ok(match (tr.from, tr.to) {
                (_, 0) => ActuatorEvent {
                    t: tr.t + draw(model.off_delay),
                    kind: ActuatorEventKind::Offset,
                    texture_id: tr.from,
                },
                (0, to) => ActuatorEvent {
                    t: tr.t + draw(model.on_delay),
                    kind: ActuatorEventKind::Onset,
                    texture_id: to,
                },
                (_, to) => ActuatorEvent {
                    t: tr.t + draw(model.on_delay),
                    kind: ActuatorEventKind::Switch,
                    texture_id: to,
                },
            })
        })
        .collect()
}

pub fn write_timeline_csv<W: Write>(w: W, timeline: &[ActuatorEvent]) -> Result<(), ActuatorError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t_s", "event", "texture_id"])?;
    for e in timeline {
        let kind = match e.kind {
            ActuatorEventKind::Onset => "onset",
            ActuatorEventKind::Offset => "offset",
            ActuatorEventKind::Switch => "switch",
        };
        wr.write_record([format!("{:.6}", e.t), kind.to_string(), e.texture_id.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
