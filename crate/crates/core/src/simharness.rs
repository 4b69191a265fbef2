//! End-to-end latency simulation: a virtual finger moves over an encoded
//! stream, its sensor output runs through the receiver, detector, decoder and
//! actuator, and every region-boundary crossing becomes a latency record.

use crate::actuator::{play_schedule, synthetic_bank, ActuatorError, ActuatorEvent, ActuatorModel, WaveformBank};
use crate::afe::{AfeError, ChainParams, Comparator, ComparatorParams, Edge, FilterChain, NoiseSource, Receiver, SensorModel};
use crate::detector::{decode, Channel, ChannelDetector, DetectionEvent, DetectorError, IdTransition, SymbolDecoder, HALF_PERIOD_S};
use crate::encoder::{EncodeError, FrameStream, Image, RegionMap};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("stream is {stream_w}x{stream_h} but the region map is {map_w}x{map_h}")]
    MapMismatch {
        stream_w: usize,
        stream_h: usize,
        map_w: usize,
        map_h: usize,
    },
    #[error("requested {delay_ms} ms is below the {min_ms:.2} ms intrinsic worst case for {direction:?}")]
    DelayTooSmall {
        delay_ms: f64,
        min_ms: f64,
        direction: Direction,
    },
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error(transparent)]
    Afe(#[from] AfeError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t_s: f64,
    pub x_mm: f64,
    pub y_mm: f64,
}

/// Piecewise-linear finger path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self, SimError> {
        if waypoints.len() < 2 {
            return Err(SimError::InvalidTrajectory("need at least two waypoints".into()));
        }
        if waypoints.windows(2).any(|w| !(w[1].t_s > w[0].t_s)) {
            return Err(SimError::InvalidTrajectory("timestamps must increase strictly".into()));
        }
        Ok(Self { waypoints })
    }

    pub fn stationary(x_mm: f64, y_mm: f64, t0: f64, t1: f64) -> Result<Self, SimError> {
        Self::new(vec![
            Waypoint { t_s: t0, x_mm, y_mm },
            Waypoint { t_s: t1, x_mm, y_mm },
        ])
    }

    pub fn span(&self) -> (f64, f64) {
        (self.waypoints[0].t_s, self.waypoints[self.waypoints.len() - 1].t_s)
    }

    /// Position at `t`, held at the end points outside the span.
    pub fn position(&self, t: f64) -> (f64, f64) {
        let w = &self.waypoints;
        let i = w.partition_point(|p| p.t_s <= t);
        if i == 0 {
            return (w[0].x_mm, w[0].y_mm);
        }
        if i == w.len() {
            let p = w[w.len() - 1];
            return (p.x_mm, p.y_mm);
        }
        let (a, b) = (w[i - 1], w[i]);
        let s = (t - a.t_s) / (b.t_s - a.t_s);
        (a.x_mm + s * (b.x_mm - a.x_mm), a.y_mm + s * (b.y_mm - a.y_mm))
    }

    pub fn validate(&self, map: &RegionMap) -> Result<(), SimError> {
        for p in &self.waypoints {
            if map.pixel_at_mm(p.x_mm, p.y_mm).is_none() {
                return Err(SimError::InvalidTrajectory(format!(
                    "waypoint ({}, {}) mm lies outside the {} x {} mm image",
                    p.x_mm,
                    p.y_mm,
                    map.width_mm(),
                    map.height_mm()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    TurnOn,
    TurnOff,
    Switch,
}

impl Direction {
    pub fn of(from: u8, to: u8, none_id: u8) -> Self {
        if from == none_id {
            Direction::TurnOn
        } else if to == none_id {
            Direction::TurnOff
        } else {
            Direction::Switch
        }
    }
}

/// A change of texture ID under the finger, from geometry alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub t_s: f64,
    pub from: u8,
    pub to: u8,
}

fn texture_at(map: &RegionMap, dec: &SymbolDecoder, p: (f64, f64)) -> u8 {
    let (x, y) = map.pixel_at_mm(p.0, p.1).expect("trajectory validated against map");
    let (r, b) = map.cell(x, y).symbol.presence();
    dec.id(r, b)
}

/// Exact crossing times of pixel edges where the texture ID changes.
pub fn boundary_crossings(map: &RegionMap, traj: &Trajectory, dec: &SymbolDecoder) -> Vec<Boundary> {
    let pitch = map.mm_per_px;
    let mut times = Vec::new();
    for w in traj.waypoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (c0, c1) in [(a.x_mm, b.x_mm), (a.y_mm, b.y_mm)] {
            if c0 == c1 {
                continue;
            }
            let (lo, hi) = (c0.min(c1), c0.max(c1));
            let mut k = (lo / pitch).ceil() as i64;
            while (k as f64) * pitch <= hi {
                let line = k as f64 * pitch;
                let s = (line - c0) / (c1 - c0);
                if s > 0.0 && s <= 1.0 {
                    times.push(a.t_s + s * (b.t_s - a.t_s));
                }
                k += 1;
            }
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    let (t0, t1) = traj.span();
    let mut out = Vec::new();
    let mut prev_id = texture_at(map, dec, traj.position(t0));
    for (i, &c) in times.iter().enumerate() {
        let next = times.get(i + 1).copied().unwrap_or(t1);
        let id = texture_at(map, dec, traj.position(0.5 * (c + next)));
        if id != prev_id {
            out.push(Boundary {
                t_s: c,
                from: prev_id,
                to: id,
            });
        }
        prev_id = id;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReceiverKind {
    /// Photodiode, filters and comparator simulated sample by sample.
    #[default]
    Analog,
    /// Sees an edge at every frame flip whose per-channel change is at least
    /// half the minimum modulation depth.
    Ideal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub receiver: ReceiverKind,
    pub sensor: SensorModel,
    pub chain: ChainParams,
    pub comparator: ComparatorParams,
    pub detector: ChannelDetector,
    pub decoder: SymbolDecoder,
    pub resolve_window_s: f64,
    pub actuator: ActuatorModel,
    /// Minimum on-channel modulation depth; the ideal receiver triggers at half of it.
    pub theta_on: f64,
    /// Sensor radius; zero samples a single pixel.
    pub aperture_radius_mm: f64,
    /// Sleep inserted between detection and actuator scheduling.
    pub extra_delay_s: f64,
    /// The analog receiver runs this long before the trajectory starts, seeing
    /// the starting position and the noise, so the filters begin in steady
    /// state. Edges from this interval are discarded.
    pub preroll_s: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            receiver: ReceiverKind::Analog,
            sensor: SensorModel::default(),
            chain: ChainParams::default(),
            comparator: ComparatorParams::default(),
            detector: ChannelDetector::default(),
            decoder: SymbolDecoder::default(),
            resolve_window_s: 0.0,
            actuator: ActuatorModel::default(),
            theta_on: 0.05,
            aperture_radius_mm: 0.0,
            extra_delay_s: 0.0,
            preroll_s: 0.0,
        }
    }
}

impl HarnessConfig {
    /// Ideal receiver with a turn-off timeout of one edge spacing, the setting
    /// under which the intrinsic worst-case latencies are reproduced.
    pub fn table1() -> Self {
        Self {
            receiver: ReceiverKind::Ideal,
            detector: ChannelDetector {
                off_timeout_s: HALF_PERIOD_S + 1e-6,
                ..ChannelDetector::default()
            },
            ..Self::default()
        }
    }

    /// Worst-case T_recv + mean T_vib of the latency model, in ms.
    pub fn intrinsic_worst_ms(&self, direction: Direction) -> f64 {
        let vib = match direction {
            Direction::TurnOff => self.actuator.off_delay.mean_s,
            _ => self.actuator.on_delay.mean_s,
        };
        1000.0 * (HALF_PERIOD_S + vib)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub trial: usize,
    pub direction: Direction,
    pub from_id: u8,
    pub to_id: u8,
    /// Texture ID the decoder settled on before the next boundary.
    pub detected_id: Option<u8>,
    pub t_boundary_s: f64,
    pub t_detect_s: Option<f64>,
    pub t_actuator_s: Option<f64>,
    pub t_recv_s: Option<f64>,
    pub t_vib_s: Option<f64>,
    pub t_total_s: Option<f64>,
    pub extra_delay_s: f64,
}

impl TransitionRecord {
    pub fn detected(&self) -> bool {
        self.t_total_s.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutput {
    pub truth: Vec<Boundary>,
    /// R and B comparator edges.
    pub edges: [Vec<Edge>; 2],
    pub events: Vec<DetectionEvent>,
    pub decoded: Vec<IdTransition>,
    pub timeline: Vec<ActuatorEvent>,
    pub records: Vec<TransitionRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = xs.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            n: v.len(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSummary {
    pub direction: Direction,
    pub count: usize,
    pub missed: usize,
    pub t_recv_ms: Stats,
    pub t_vib_ms: Stats,
    pub t_total_ms: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_ms: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub summaries: Vec<DirectionSummary>,
    /// T_recv over all detected transitions, 1 ms bins from zero.
    pub t_recv_histogram: Histogram,
    pub records: Vec<TransitionRecord>,
}

impl LatencyReport {
    pub fn from_records(records: Vec<TransitionRecord>) -> Self {
        let mut dirs: Vec<Direction> = records.iter().map(|r| r.direction).collect();
        dirs.sort();
        dirs.dedup();
        let ms = |v: Option<f64>| v.map(|x| 1000.0 * x);
        let summaries = dirs
            .into_iter()
            .map(|d| {
                let rs: Vec<&TransitionRecord> = records.iter().filter(|r| r.direction == d).collect();
                DirectionSummary {
                    direction: d,
                    count: rs.len(),
                    missed: rs.iter().filter(|r| !r.detected()).count(),
                    t_recv_ms: Stats::of(rs.iter().filter_map(|r| ms(r.t_recv_s))),
                    t_vib_ms: Stats::of(rs.iter().filter_map(|r| ms(r.t_vib_s))),
                    t_total_ms: Stats::of(rs.iter().filter_map(|r| ms(r.t_total_s))),
                }
            })
            .collect();
        let bin_ms = 1.0;
        let mut counts = Vec::new();
        for v in records.iter().filter_map(|r| ms(r.t_recv_s)) {
            let i = (v.max(0.0) / bin_ms) as usize;
            if counts.len() <= i {
                counts.resize(i + 1, 0);
            }
            counts[i] += 1;
        }
        Self {
            summaries,
            t_recv_histogram: Histogram { bin_ms, counts },
            records,
        }
    }

    pub fn summary(&self, d: Direction) -> Option<&DirectionSummary> {
        self.summaries.iter().find(|s| s.direction == d)
    }

    pub fn to_json(&self) -> Result<String, SimError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "trial",
            "direction",
            "from_id",
            "to_id",
            "detected_id",
            "t_boundary_s",
            "t_detect_s",
            "t_actuator_s",
            "t_recv_ms",
            "t_vib_ms",
            "t_total_ms",
            "extra_delay_ms",
        ])?;
        let opt = |v: Option<f64>, scale: f64| v.map(|x| format!("{:.6}", x * scale)).unwrap_or_default();
        for r in &self.records {
            wr.write_record([
                r.trial.to_string(),
                serde_json::to_value(r.direction)?.as_str().unwrap_or_default().to_string(),
                r.from_id.to_string(),
                r.to_id.to_string(),
                r.detected_id.map(|v| v.to_string()).unwrap_or_default(),
                format!("{:.6}", r.t_boundary_s),
                opt(r.t_detect_s, 1.0),
                opt(r.t_actuator_s, 1.0),
                opt(r.t_recv_s, 1000.0),
                opt(r.t_vib_s, 1000.0),
                opt(r.t_total_s, 1000.0),
                format!("{:.6}", r.extra_delay_s * 1000.0),
            ])?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Independent random stream for trial `trial`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Horizontal crossing of the vertical boundary in the middle of the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossingExperiment {
    pub trials: usize,
    pub speed_mm_s: f64,
    /// TURN_ON moves from the left region into the right one.
    pub direction: Direction,
    /// Earliest crossing time; the actual time adds a uniform phase.
    pub base_s: f64,
    pub phase_span_s: f64,
    pub lead_s: f64,
    pub tail_s: f64,
    pub seed: u64,
}

impl Default for CrossingExperiment {
    fn default() -> Self {
        Self {
            trials: 1000,
            speed_mm_s: 150.0,
            direction: Direction::TurnOn,
            base_s: 0.5,
            phase_span_s: 2.0 * HALF_PERIOD_S,
            lead_s: 0.3,
            tail_s: 0.3,
            seed: 0,
        }
    }
}

impl CrossingExperiment {
    pub fn stream_duration(&self) -> f64 {
        self.base_s + self.phase_span_s + self.tail_s + 0.1
    }

    pub fn trajectory(&self, map: &RegionMap, t_boundary: f64) -> Result<Trajectory, SimError> {
        let sign = match self.direction {
            Direction::TurnOn => 1.0,
            Direction::TurnOff => -1.0,
            Direction::Switch => return Err(SimError::InvalidExperiment("crossings run TURN_ON or TURN_OFF".into())),
        };
        let xb = map.width_mm() / 2.0;
        let y = map.height_mm() / 2.0;
        let v = sign * self.speed_mm_s;
        Trajectory::new(vec![
            Waypoint {
                t_s: t_boundary - self.lead_s,
                x_mm: xb - v * self.lead_s,
                y_mm: y,
            },
            Waypoint {
                t_s: t_boundary + self.tail_s,
                x_mm: xb + v * self.tail_s,
                y_mm: y,
            },
        ])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SleepPolicy {
    /// One sleep per delay so the worst-case phase lands exactly on the target.
    #[default]
    WorstCase,
    /// Sleep chosen per trial from the measured latency.
    PerTrial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delay_ms: f64,
    pub direction: Direction,
    pub sleep_ms: Stats,
    pub realized_ms: Stats,
}

/// Acquisition latency of a sensor that starts observing a modulated region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionReport {
    pub latency_ms: Stats,
    pub missed: usize,
    pub trials: usize,
}

/// Simulator bound to one stream and region map.
pub struct Harness<'a> {
    stream: &'a FrameStream,
    map: &'a RegionMap,
    cfg: HarnessConfig,
    chain: FilterChain,
    comparator: Comparator,
    bank: WaveformBank,
}

impl<'a> Harness<'a> {
    pub fn new(stream: &'a FrameStream, map: &'a RegionMap, cfg: HarnessConfig) -> Result<Self, SimError> {
        if stream.width != map.width || stream.height != map.height {
            return Err(SimError::MapMismatch {
                stream_w: stream.width,
                stream_h: stream.height,
                map_w: map.width,
                map_h: map.height,
            });
        }
        map.validate_shape()?;
        cfg.detector.validate()?;
        cfg.actuator.validate()?;
        let chain = cfg.chain.design(&cfg.sensor)?;
        let comparator = cfg.comparator.build(&cfg.sensor);
        let ids: Vec<(u8, f64)> = [(true, false), (false, true), (true, true)]
            .iter()
            .enumerate()
            .map(|(i, &(r, b))| (cfg.decoder.id(r, b), 150.0 + 50.0 * i as f64))
            .collect();
        let bank = synthetic_bank(&ids, 0.1)?;
        Ok(Self {
            stream,
            map,
            cfg,
            chain,
            comparator,
            bank,
        })
    }

    pub fn with_bank(mut self, bank: WaveformBank) -> Self {
        self.bank = bank;
        self
    }

    pub fn config(&self) -> &HarnessConfig {
        &self.cfg
    }

    fn light(&self, frame: &Image, p: (f64, f64)) -> [f64; 3] {
        let r = self.cfg.aperture_radius_mm;
        let pitch = self.map.mm_per_px;
        if r <= 0.0 {
            let (x, y) = self.map.pixel_at_mm(p.0, p.1).expect("position inside map");
            return frame.pixel(x, y).to_linear().to_array();
        }
        let lo = |c: f64| ((c - r) / pitch).floor().max(0.0) as usize;
        let (mut acc, mut n) = ([0.0; 3], 0usize);
        for y in lo(p.1)..=(((p.1 + r) / pitch) as usize).min(self.map.height - 1) {
            for x in lo(p.0)..=(((p.0 + r) / pitch) as usize).min(self.map.width - 1) {
                let (cx, cy) = ((x as f64 + 0.5) * pitch, (y as f64 + 0.5) * pitch);
                if (cx - p.0).powi(2) + (cy - p.1).powi(2) <= r * r {
                    let v = frame.pixel(x, y).to_linear().to_array();
                    (0..3).for_each(|k| acc[k] += v[k]);
                    n += 1;
                }
            }
        }
        if n == 0 {
            let (x, y) = self.map.pixel_at_mm(p.0, p.1).expect("position inside map");
            return frame.pixel(x, y).to_linear().to_array();
        }
        acc.map(|v| v / n as f64)
    }

    fn ideal_edges(&self, traj: &Trajectory) -> Result<[Vec<Edge>; 2], SimError> {
        let (t0, t1) = traj.span();
        let fps = self.stream.fps as f64;
        let thresh = 0.5 * self.cfg.theta_on * self.cfg.sensor.tia_gain;
        let mut edges: [Vec<Edge>; 2] = Default::default();
        let first = ((t0 * fps - 1e-9).ceil() as i64).max(1) as usize;
        let last = (t1 * fps + 1e-9).floor() as usize;
        for n in first..=last {
            let t = n as f64 / fps;
            if n >= self.stream.frames.len() {
                return Err(EncodeError::OutOfRange {
                    t,
                    duration: self.stream.duration(),
                }
                .into());
            }
            let p = traj.position(t);
            let now = self.cfg.sensor.respond(self.light(&self.stream.frames[n], p));
            let prev = self.cfg.sensor.respond(self.light(&self.stream.frames[n - 1], p));
            for (slot, k) in [(0, 0), (1, 2)] {
                let d = now[k] - prev[k];
                if d.abs() >= thresh {
                    edges[slot].push(Edge { t, rising: d > 0.0 });
                }
            }
        }
        Ok(edges)
    }

    fn analog_edges(&self, traj: &Trajectory, rng: &mut ChaCha8Rng) -> Result<[Vec<Edge>; 2], SimError> {
        let (t0, t1) = traj.span();
        let fs = self.cfg.sensor.sample_rate_hz;
        let mut noise_model = self.cfg.sensor.noise;
        noise_model.seed = rng.next_u64();
        noise_model.mains_phase_rad += 2.0 * PI * rng.random::<f64>();
        let mut noise = NoiseSource::new(noise_model);
        let mut rx = Receiver::new(&self.chain, self.comparator);
        let mut edges: [Vec<Edge>; 2] = Default::default();
        let preroll = self.cfg.preroll_s;
        if !(preroll >= 0.0 && t0 - preroll >= 0.0) {
            return Err(SimError::InvalidTrajectory(format!(
                "pre-roll of {preroll} s before t = {t0} s starts before the stream"
            )));
        }
        let first = ((t0 - preroll) * fs - 1e-9).ceil() as i64;
        let last = (t1 * fs - 1e-9).floor() as i64;
        for i in first..=last {
            let t = i as f64 / fs;
            let frame = self.stream.frame_at(t)?;
            let s = self.cfg.sensor.respond(self.light(frame, traj.position(t)));
            let e = noise.sample(t);
            let (_, sw) = rx.step(std::array::from_fn(|k| s[k] + e[k]));
            if t < t0 {
                continue;
            }
            for (slot, k) in [(0, 0), (1, 2)] {
                if let Some(rising) = sw[k] {
                    edges[slot].push(Edge { t, rising });
                }
            }
        }
        Ok(edges)
    }

    /// One pass of the full pipeline along `traj`.
    pub fn run_trial(&self, traj: &Trajectory, seed: u64, trial: usize) -> Result<TrialOutput, SimError> {
        traj.validate(self.map)?;
        let mut rng = trial_rng(seed, trial);
        let (t0, t1) = traj.span();
        let edges = match self.cfg.receiver {
            ReceiverKind::Ideal => self.ideal_edges(traj)?,
            ReceiverKind::Analog => self.analog_edges(traj, &mut rng)?,
        };
        let det = &self.cfg.detector;
        let r_ev = det.detect(&edges[0], Channel::R, t0, t1);
        let b_ev = det.detect(&edges[1], Channel::B, t0, t1);
        let decoded = decode(&r_ev, &b_ev, &self.cfg.decoder, self.cfg.resolve_window_s);
        let mut events: Vec<DetectionEvent> = r_ev.into_iter().chain(b_ev).collect();
        events.sort_by(|a, b| a.t.total_cmp(&b.t));

        let extra = self.cfg.extra_delay_s;
        let delayed: Vec<IdTransition> = decoded.iter().map(|tr| IdTransition { t: tr.t + extra, ..*tr }).collect();
        let actuator = ActuatorModel {
            rng_seed: rng.next_u64(),
            ..self.cfg.actuator
        };
        let timeline = play_schedule(&delayed, &actuator, &self.bank)?;

        let truth = boundary_crossings(self.map, traj, &self.cfg.decoder);
        let none = self.cfg.decoder.none_id();
        let records = truth
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let until = truth.get(k + 1).map_or(f64::INFINITY, |n| n.t_s);
                let idx: Vec<usize> = (0..decoded.len())
                    .filter(|&i| decoded[i].t >= b.t_s && decoded[i].t < until)
                    .collect();
                let first = idx.first().copied();
                let t_detect = first.map(|i| decoded[i].t);
                let t_act = first.map(|i| timeline[i].t);
                let t_recv = t_detect.map(|t| t - b.t_s);
                let t_vib = first.map(|i| timeline[i].t - decoded[i].t);
                TransitionRecord {
                    trial,
                    direction: Direction::of(b.from, b.to, none),
                    from_id: b.from,
                    to_id: b.to,
                    detected_id: idx.last().map(|&i| decoded[i].to),
                    t_boundary_s: b.t_s,
                    t_detect_s: t_detect,
                    t_actuator_s: t_act,
                    t_recv_s: t_recv,
                    t_vib_s: t_vib,
                    t_total_s: t_recv.zip(t_vib).map(|(a, b)| a + b),
                    extra_delay_s: extra,
                }
            })
            .collect();
        Ok(TrialOutput {
            truth,
            edges,
            events,
            decoded,
            timeline,
            records,
        })
    }

    pub fn run(&self, traj: &Trajectory, seed: u64) -> Result<LatencyReport, SimError> {
        Ok(LatencyReport::from_records(self.run_trial(traj, seed, 0)?.records))
    }

    /// Independent boundary crossings at uniformly random frame phase.
    pub fn crossings(&self, exp: &CrossingExperiment) -> Result<LatencyReport, SimError> {
        let end = exp.base_s + exp.phase_span_s + exp.tail_s;
        if end > self.stream.duration() || exp.base_s < exp.lead_s {
            return Err(SimError::InvalidExperiment(format!(
                "crossing window [{}, {end}] s does not fit the {} s stream",
                exp.base_s - exp.lead_s,
                self.stream.duration()
            )));
        }
        let per_trial: Vec<Vec<TransitionRecord>> = (0..exp.trials)
            .into_par_iter()
            .map(|k| {
                let u: f64 = trial_rng(exp.seed ^ 0x5e_ed0f_c405, k).random();
                let traj = exp.trajectory(self.map, exp.base_s + u * exp.phase_span_s)?;
                Ok(self.run_trial(&traj, exp.seed, k)?.records)
            })
            .collect::<Result<_, SimError>>()?;
        Ok(LatencyReport::from_records(per_trial.into_iter().flatten().collect()))
    }

    /// For each delay and direction, the realized T_total after the sleep
    /// needed to reach that delay.
    pub fn sweep_delays(
        &self,
        base: &CrossingExperiment,
        delays_ms: &[f64],
        policy: SleepPolicy,
    ) -> Result<Vec<SweepRow>, SimError> {
        let dirs = [Direction::TurnOn, Direction::TurnOff];
        for d in dirs {
            let min_ms = self.cfg.intrinsic_worst_ms(d);
            if let Some(&delay_ms) = delays_ms.iter().find(|&&x| x < min_ms - 1e-9) {
                return Err(SimError::DelayTooSmall {
                    delay_ms,
                    min_ms,
                    direction: d,
                });
            }
        }
        let mut rows = Vec::new();
        for d in dirs {
            let exp = CrossingExperiment { direction: d, ..*base };
            let report = Harness {
                cfg: HarnessConfig {
                    extra_delay_s: 0.0,
                    ..self.cfg
                },
                bank: self.bank.clone(),
                ..*self
            }
            .crossings(&exp)?;
            let totals: Vec<f64> = report
                .records
                .iter()
                .filter(|r| r.direction == d)
                .filter_map(|r| r.t_total_s)
                .map(|t| 1000.0 * t)
                .collect();
            let min_ms = self.cfg.intrinsic_worst_ms(d);
            for &delay in delays_ms {
                let sleeps: Vec<f64> = match policy {
                    SleepPolicy::WorstCase => vec![delay - min_ms; totals.len()],
                    SleepPolicy::PerTrial => totals.iter().map(|t| delay - t).collect(),
                };
                rows.push(SweepRow {
                    delay_ms: delay,
                    direction: d,
                    sleep_ms: Stats::of(sleeps.iter().copied()),
                    realized_ms: Stats::of(totals.iter().zip(&sleeps).map(|(t, s)| t + s)),
                });
            }
        }
        Ok(rows)
    }

    /// The sensor starts at a random phase over the modulated pixel at
    /// `pos_mm`; latency runs from the start to the first transition to the
    /// region's texture ID.
    pub fn acquisition(&self, pos_mm: (f64, f64), trials: usize, window_s: f64, seed: u64) -> Result<AcquisitionReport, SimError> {
        let expected = texture_at(self.map, &self.cfg.decoder, pos_mm);
        let span = 2.0 * HALF_PERIOD_S;
        if span + window_s > self.stream.duration() {
            return Err(SimError::InvalidExperiment("stream too short for the acquisition window".into()));
        }
        let lat: Vec<Option<f64>> = (0..trials)
            .into_par_iter()
            .map(|k| {
                let t0 = span * trial_rng(seed ^ 0xac9_0151, k).random::<f64>();
                let traj = Trajectory::stationary(pos_mm.0, pos_mm.1, t0, t0 + window_s)?;
                let out = self.run_trial(&traj, seed, k)?;
                Ok(out.decoded.iter().find(|tr| tr.to == expected).map(|tr| 1000.0 * (tr.t - t0)))
            })
            .collect::<Result<_, SimError>>()?;
        Ok(AcquisitionReport {
            latency_ms: Stats::of(lat.iter().flatten().copied()),
            missed: lat.iter().filter(|v| v.is_none()).count(),
            trials,
        })
    }
}
