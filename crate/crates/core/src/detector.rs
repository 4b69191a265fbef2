//! Per-channel vibration detection from comparator edges and the (R, B)
//! presence to texture-ID decoder.

use crate::afe::Edge;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use thiserror::Error;

/// Edge spacing of a 30 Hz square wave.
pub const HALF_PERIOD_S: f64 = 1.0 / 60.0;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error("decoder table must map the four presence patterns to distinct IDs, got {0:?}")]
    NotInjective([u8; 4]),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::R => "R",
            Channel::G => "G",
            Channel::B => "B",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DetectorMode {
    /// On at the first edge after an off state.
    #[default]
    FirstEdge,
    /// On once `confirm_edges` edges arrive with valid spacing.
    Confirmed,
    /// On when the 30 Hz content of the comparator output is strong enough.
    Lockin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockinParams {
    pub freq_hz: f64,
    pub window_s: f64,
    pub tick_s: f64,
    pub on_level: f64,
    pub off_level: f64,
}

impl Default for LockinParams {
    fn default() -> Self {
        Self {
            freq_hz: 30.0,
            window_s: 0.1,
            tick_s: 0.001,
            on_level: 0.08,
            off_level: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelDetector {
    pub mode: DetectorMode,
    /// Allowed relative deviation of edge spacing from half a period.
    pub period_tol: f64,
    pub confirm_edges: u32,
    pub off_timeout_s: f64,
    pub lockin: LockinParams,
}

impl Default for ChannelDetector {
    fn default() -> Self {
        Self {
            mode: DetectorMode::FirstEdge,
            period_tol: 0.2,
            confirm_edges: 2,
            off_timeout_s: 0.0187,
            lockin: LockinParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    VibOn,
    VibOff,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::VibOn => "VIB_ON",
            EventKind::VibOff => "VIB_OFF",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub t: f64,
    pub kind: EventKind,
    pub channel: Channel,
}

impl ChannelDetector {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.confirm_edges < 1 {
            return Err(DetectorError::InvalidConfig("confirm_edges must be at least 1".into()));
        }
        if !(self.period_tol >= 0.0 && self.period_tol < 1.0) {
            return Err(DetectorError::InvalidConfig(format!("period_tol {} not in [0, 1)", self.period_tol)));
        }
        if !(self.off_timeout_s > HALF_PERIOD_S) {
            return Err(DetectorError::InvalidConfig(format!(
                "off_timeout_s {} must exceed the {HALF_PERIOD_S} s edge spacing",
                self.off_timeout_s
            )));
        }
        let l = &self.lockin;
        if !(l.freq_hz > 0.0 && l.window_s > 0.0 && l.tick_s > 0.0 && l.off_level < l.on_level && l.off_level >= 0.0) {
            return Err(DetectorError::InvalidConfig("lock-in parameters out of range".into()));
        }
        Ok(())
    }

    fn spacing_ok(&self, dt: f64) -> bool {
        (dt - HALF_PERIOD_S).abs() <= self.period_tol * HALF_PERIOD_S
    }

    /// Events for one channel whose comparator output is known on `[t_start, t_end]`.
    pub fn detect(&self, edges: &[Edge], channel: Channel, t_start: f64, t_end: f64) -> Vec<DetectionEvent> {
        match self.mode {
            DetectorMode::FirstEdge | DetectorMode::Confirmed => self.detect_edges(edges, channel, t_end),
            DetectorMode::Lockin => self.detect_lockin(edges, channel, t_start, t_end),
        }
    }

    fn detect_edges(&self, edges: &[Edge], channel: Channel, t_end: f64) -> Vec<DetectionEvent> {
        let need = match self.mode {
            DetectorMode::FirstEdge => 1,
            _ => self.confirm_edges,
        };
        let ev = |t, kind| DetectionEvent { t, kind, channel };
        let mut out = Vec::new();
        let mut on = false;
        let mut run = 0u32;
        let mut last: Option<f64> = None;
        for e in edges {
            if let Some(prev) = last {
                if on && e.t - prev > self.off_timeout_s {
                    out.push(ev(prev + self.off_timeout_s, EventKind::VibOff));
                    on = false;
                }
                run = if self.spacing_ok(e.t - prev) { run + 1 } else { 1 };
            } else {
                run = 1;
            }
            if !on && run >= need {
                out.push(ev(e.t, EventKind::VibOn));
                on = true;
            }
            last = Some(e.t);
        }
        if let (true, Some(prev)) = (on, last) {
            if prev + self.off_timeout_s <= t_end {
                out.push(ev(prev + self.off_timeout_s, EventKind::VibOff));
            }
        }
        out
    }

    fn detect_lockin(&self, edges: &[Edge], channel: Channel, t_start: f64, t_end: f64) -> Vec<DetectionEvent> {
        let p = &self.lockin;
        let corr = LockinCorrelator::new(edges, t_start, p.freq_hz);
        let mut out = Vec::new();
        let mut on = false;
        let mut k = 0u64;
        loop {
            let t = t_start + p.window_s + k as f64 * p.tick_s;
            if t > t_end + 1e-12 {
                break;
            }
            let m = corr.magnitude(t - p.window_s, t);
            if !on && m >= p.on_level {
                on = true;
                out.push(DetectionEvent {
                    t,
                    kind: EventKind::VibOn,
                    channel,
                });
            } else if on && m <= p.off_level {
                on = false;
                out.push(DetectionEvent {
                    t,
                    kind: EventKind::VibOff,
                    channel,
                });
            }
            k += 1;
        }
        out
    }
}

/// Complex correlation of the ±1 comparator output with `exp(-jwt)`,
/// integrated exactly over its piecewise-constant segments.
struct LockinCorrelator {
    w: f64,
    /// Segment start times, levels, and the integral from the first start.
    starts: Vec<f64>,
    levels: Vec<f64>,
    cum: Vec<Complex64>,
}

impl LockinCorrelator {
    fn new(edges: &[Edge], t_start: f64, freq: f64) -> Self {
        let w = 2.0 * PI * freq;
        let first_level = match edges.first() {
            Some(e) if !e.rising => 1.0,
            _ => -1.0,
        };
        let mut starts = vec![t_start];
        let mut levels = vec![first_level];
        for e in edges.iter().filter(|e| e.t > t_start) {
            starts.push(e.t);
            levels.push(if e.rising { 1.0 } else { -1.0 });
        }
        let mut cum = vec![Complex64::new(0.0, 0.0)];
        for i in 1..starts.len() {
            let seg = Self::segment(w, levels[i - 1], starts[i - 1], starts[i]);
            cum.push(cum[i - 1] + seg);
        }
        Self {
            w,
            starts,
            levels,
            cum,
        }
    }

    fn segment(w: f64, level: f64, a: f64, b: f64) -> Complex64 {
        let j = Complex64::new(0.0, 1.0);
        // ∫ exp(-jwt) dt = (exp(-jwa) - exp(-jwb)) / (jw)
        level * (Complex64::from_polar(1.0, -w * a) - Complex64::from_polar(1.0, -w * b)) / (j * w)
    }

    fn integral_to(&self, t: f64) -> Complex64 {
        let i = self.starts.partition_point(|&s| s <= t).saturating_sub(1);
        self.cum[i] + Self::segment(self.w, self.levels[i], self.starts[i], t.max(self.starts[i]))
    }

    fn magnitude(&self, a: f64, b: f64) -> f64 {
        ((self.integral_to(b) - self.integral_to(a)) / (b - a)).norm()
    }
}

/// Events for one channel with no end-of-record limit on the off timeout.
pub fn detect_channel(edges: &[Edge], det: &ChannelDetector) -> Vec<DetectionEvent> {
    let t_start = edges.first().map_or(0.0, |e| e.t);
    let t_end = match det.mode {
        DetectorMode::Lockin => edges.last().map_or(t_start, |e| e.t) + 2.0 * det.lockin.window_s,
        _ => f64::INFINITY,
    };
    det.detect(edges, Channel::R, t_start, t_end)
}

/// Maps (R present, B present) to a texture ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u8; 4]", into = "[u8; 4]")]
pub struct SymbolDecoder {
    table: [u8; 4],
}

impl Default for SymbolDecoder {
    fn default() -> Self {
        Self { table: [0, 1, 2, 3] }
    }
}

impl TryFrom<[u8; 4]> for SymbolDecoder {
    type Error = DetectorError;

    /// Table order: none, R only, B only, both.
    fn try_from(table: [u8; 4]) -> Result<Self, Self::Error> {
        let mut seen = table.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != 4 {
            return Err(DetectorError::NotInjective(table));
        }
        Ok(Self { table })
    }
}

impl From<SymbolDecoder> for [u8; 4] {
    fn from(d: SymbolDecoder) -> Self {
        d.table
    }
}

impl SymbolDecoder {
    pub fn id(&self, r: bool, b: bool) -> u8 {
        self.table[usize::from(r) | usize::from(b) << 1]
    }

    pub fn none_id(&self) -> u8 {
        self.table[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdTransition {
    pub t: f64,
    pub from: u8,
    pub to: u8,
}

/// Texture-ID transitions from R and B channel events.
///
/// With `resolve_window_s > 0`, leaving the none state waits that long and
/// emits only the pattern present at the end of the wait.
pub fn decode(
    r_events: &[DetectionEvent],
    b_events: &[DetectionEvent],
    dec: &SymbolDecoder,
    resolve_window_s: f64,
) -> Vec<IdTransition> {
    let mut merged: Vec<(f64, usize, bool)> = r_events
        .iter()
        .map(|e| (e.t, 0, e.kind == EventKind::VibOn))
        .chain(b_events.iter().map(|e| (e.t, 1, e.kind == EventKind::VibOn)))
        .collect();
    merged.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut present = [false; 2];
    let mut current = dec.none_id();
    let mut pending: Option<f64> = None;
    let mut out = Vec::new();
    let mut emit = |t: f64, to: u8, current: &mut u8| {
        if to != *current {
            out.push(IdTransition { t, from: *current, to });
            *current = to;
        }
    };

    let mut i = 0;
    while i < merged.len() {
        let t = merged[i].0;
        if let Some(deadline) = pending {
            if t > deadline {
                emit(deadline, dec.id(present[0], present[1]), &mut current);
                pending = None;
            }
        }
        while i < merged.len() && merged[i].0 == t {
            present[merged[i].1] = merged[i].2;
            i += 1;
        }
        let id = dec.id(present[0], present[1]);
        if pending.is_some() {
            continue;
        }
        if current == dec.none_id() && id != current && resolve_window_s > 0.0 {
            pending = Some(t + resolve_window_s);
        } else {
            emit(t, id, &mut current);
        }
    }
    if let Some(deadline) = pending {
        emit(deadline, dec.id(present[0], present[1]), &mut current);
    }
    out
}

/// Event log with columns `t_s, channel, kind, value`; texture transitions use channel `ID`.
pub fn write_event_log<W: Write>(
    w: W,
    events: &[DetectionEvent],
    transitions: &[IdTransition],
) -> Result<(), DetectorError> {
    let mut rows: Vec<(f64, String, &str, u8)> = events
        .iter()
        .map(|e| (e.t, e.channel.as_str().to_string(), e.kind.as_str(), u8::from(e.kind == EventKind::VibOn)))
        .chain(transitions.iter().map(|tr| (tr.t, "ID".to_string(), "TEXTURE", tr.to)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t_s", "channel", "kind", "value"])?;
    for (t, ch, kind, v) in rows {
        wr.write_record([format!("{t:.6}"), ch, kind.to_string(), v.to_string()])?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square_edges(t0: f64, t1: f64) -> Vec<Edge> {
        let mut out = Vec::new();
        let mut t = t0;
        let mut rising = true;
        while t < t1 {
            out.push(Edge { t, rising });
            rising = !rising;
            t += HALF_PERIOD_S;
        }
        out
    }

    fn on(t: f64, channel: Channel) -> DetectionEvent {
        DetectionEvent {
            t,
            kind: EventKind::VibOn,
            channel,
        }
    }

    fn off(t: f64, channel: Channel) -> DetectionEvent {
        DetectionEvent {
            t,
            kind: EventKind::VibOff,
            channel,
        }
    }

    #[test]
    fn no_edges_no_events() {
        for mode in [DetectorMode::FirstEdge, DetectorMode::Confirmed, DetectorMode::Lockin] {
            let det = ChannelDetector {
                mode,
                ..Default::default()
            };
            assert!(detect_channel(&[], &det).is_empty());
            assert!(det.detect(&[], Channel::B, 0.0, 2.0).is_empty());
        }
    }

    #[test]
    fn first_edge_on_and_timeout_off() {
        let edges = square_edges(0.005, 1.0 + 1e-9);
        let ev = detect_channel(&edges, &ChannelDetector::default());
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0], on(0.005, Channel::R));
        let last = edges.last().unwrap().t;
        assert_eq!(ev[1].kind, EventKind::VibOff);
        assert!((ev[1].t - (last + 0.0187)).abs() < 1e-9);

        let stop_at_one: Vec<Edge> = (0..=60).map(|i| Edge { t: i as f64 / 60.0, rising: i % 2 == 0 }).collect();
        let ev = detect_channel(&stop_at_one, &ChannelDetector::default());
        assert!((ev[1].t - 1.0187).abs() < 1e-9);
    }

    #[test]
    fn confirmed_needs_valid_spacing() {
        let det = ChannelDetector {
            mode: DetectorMode::Confirmed,
            ..Default::default()
        };
        let edges = square_edges(0.005, 0.5);
        let ev = detect_channel(&edges, &det);
        assert!((ev[0].t - (0.005 + HALF_PERIOD_S)).abs() < 1e-12);
        // isolated glitches never confirm
        let glitches: Vec<Edge> = [0.1, 0.103, 0.2, 0.35].iter().map(|&t| Edge { t, rising: true }).collect();
        assert!(detect_channel(&glitches, &det).is_empty());
        let three = ChannelDetector { confirm_edges: 3, ..det };
        assert!((detect_channel(&edges, &three)[0].t - (0.005 + 2.0 * HALF_PERIOD_S)).abs() < 1e-12);
    }

    #[test]
    fn off_event_respects_horizon() {
        let edges = square_edges(0.0, 0.5);
        let det = ChannelDetector::default();
        let last = edges.last().unwrap().t;
        assert_eq!(det.detect(&edges, Channel::R, 0.0, last + 0.01).len(), 1);
        assert_eq!(det.detect(&edges, Channel::R, 0.0, last + 0.02).len(), 2);
    }

    #[test]
    fn events_alternate() {
        let mut edges = square_edges(0.0, 0.3);
        edges.extend(square_edges(0.6, 0.9));
        edges.extend(square_edges(1.2, 1.25));
        for mode in [DetectorMode::FirstEdge, DetectorMode::Confirmed, DetectorMode::Lockin] {
            let det = ChannelDetector {
                mode,
                ..Default::default()
            };
            let ev = det.detect(&edges, Channel::R, 0.0, 2.0);
            assert!(!ev.is_empty(), "{mode:?}");
            for (i, e) in ev.iter().enumerate() {
                assert_eq!(e.kind == EventKind::VibOn, i % 2 == 0, "{mode:?}");
            }
            assert!(ev.windows(2).all(|w| w[0].t < w[1].t));
        }
    }

    #[test]
    fn lockin_magnitude_of_clean_square() {
        let edges = square_edges(0.0, 1.0);
        let c = LockinCorrelator::new(&edges, 0.0, 30.0);
        assert!((c.magnitude(0.3, 0.4) - 2.0 / PI).abs() < 1e-9);
        let none = LockinCorrelator::new(&[], 0.0, 30.0);
        assert!(none.magnitude(0.3, 0.4) < 1e-12);
        let sixty: Vec<Edge> = (0..120).map(|i| Edge { t: i as f64 / 120.0, rising: i % 2 == 0 }).collect();
        assert!(LockinCorrelator::new(&sixty, 0.0, 30.0).magnitude(0.3, 0.4) < 1e-9);
    }

    #[test]
    fn lockin_on_after_window_fills() {
        let det = ChannelDetector {
            mode: DetectorMode::Lockin,
            ..Default::default()
        };
        let edges = square_edges(0.5, 1.5);
        let ev = det.detect(&edges, Channel::B, 0.0, 2.0);
        assert_eq!(ev.len(), 2);
        assert!(ev[0].t > 0.5 && ev[0].t < 0.5 + 0.1);
        assert!(ev[1].t > 1.5 && ev[1].t < 1.5 + 0.1);
    }

    #[test]
    fn validation() {
        assert!(ChannelDetector::default().validate().is_ok());
        let bad = ChannelDetector {
            confirm_edges: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ChannelDetector {
            off_timeout_s: 0.01,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SymbolDecoder::try_from([0, 1, 1, 3]).is_err());
    }

    #[test]
    fn decoder_table() {
        let d = SymbolDecoder::default();
        assert_eq!(d.id(false, false), 0);
        assert_eq!(d.id(true, false), 1);
        assert_eq!(d.id(false, true), 2);
        assert_eq!(d.id(true, true), 3);
    }

    #[test]
    fn staggered_channels_revise_once() {
        let d = SymbolDecoder::default();
        let tr = decode(&[on(1.0, Channel::R)], &[on(1.008, Channel::B)], &d, 0.0);
        assert_eq!(
            tr,
            vec![
                IdTransition { t: 1.0, from: 0, to: 1 },
                IdTransition { t: 1.008, from: 1, to: 3 }
            ]
        );
        let tr = decode(&[on(1.0, Channel::R)], &[on(1.008, Channel::B)], &d, 0.01);
        assert_eq!(tr, vec![IdTransition { t: 1.01, from: 0, to: 3 }]);
        let tr = decode(&[on(1.0, Channel::R), off(1.2, Channel::R)], &[on(1.0, Channel::B), off(1.2, Channel::B)], &d, 0.0);
        assert_eq!(tr.len(), 2);
        assert_eq!((tr[0].to, tr[1].to), (3, 0));
    }

    /// Every ordering of the four on/off events of two channels.
    #[test]
    fn decoder_matches_truth_table_for_all_interleavings() {
        let d = SymbolDecoder::default();
        let slots = [0.1, 0.2, 0.3, 0.4];
        for perm in permutations(4) {
            // perm[k] = slot of event k: R on, R off, B on, B off
            let (ron, roff, bon, boff) = (slots[perm[0]], slots[perm[1]], slots[perm[2]], slots[perm[3]]);
            if roff < ron || boff < bon {
                continue;
            }
            let tr = decode(&[on(ron, Channel::R), off(roff, Channel::R)], &[on(bon, Channel::B), off(boff, Channel::B)], &d, 0.0);
            for probe in [0.05, 0.15, 0.25, 0.35, 0.45] {
                let want = d.id(probe > ron && probe < roff, probe > bon && probe < boff);
                let got = tr.iter().rfind(|x| x.t < probe).map_or(0, |x| x.to);
                assert_eq!(got, want, "{perm:?} at {probe}");
            }
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn channel_events(times: Vec<f64>, channel: Channel) -> Vec<DetectionEvent> {
        times
            .into_iter()
            .enumerate()
            .map(|(i, t)| DetectionEvent {
                t,
                kind: if i % 2 == 0 { EventKind::VibOn } else { EventKind::VibOff },
                channel,
            })
            .collect()
    }

    fn sorted_times() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1u32..2000, 0..12).prop_map(|mut v| {
            v.sort_unstable();
            v.dedup();
            v.into_iter().map(|x| x as f64 * 1e-3).collect()
        })
    }

    proptest! {
        #[test]
        fn decoder_state_is_function_of_presence(rt in sorted_times(), bt in sorted_times()) {
            let d = SymbolDecoder::default();
            let r = channel_events(rt.clone(), Channel::R);
            let b = channel_events(bt.clone(), Channel::B);
            let tr = decode(&r, &b, &d, 0.0);
            let presence = |ts: &[f64], t: f64| ts.iter().filter(|&&x| x <= t).count() % 2 == 1;
            for w in tr.windows(2) {
                prop_assert!(w[0].t <= w[1].t);
                prop_assert_eq!(w[0].to, w[1].from);
            }
            let mut probes: Vec<f64> = rt.iter().chain(&bt).copied().collect();
            probes.push(0.0);
            for p in probes {
                let got = tr.iter().rfind(|x| x.t <= p).map_or(0, |x| x.to);
                prop_assert_eq!(got, d.id(presence(&rt, p), presence(&bt, p)));
            }
        }
    }

    #[test]
    fn event_log_csv() {
        let mut buf = Vec::new();
        write_event_log(&mut buf, &[on(0.5, Channel::R)], &[IdTransition { t: 0.5, from: 0, to: 1 }]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "t_s,channel,kind,value\n0.500000,R,VIB_ON,1\n0.500000,ID,TEXTURE,1\n");
    }
}
