//! Side-by-side comparison of simulated numbers with the published ones.

use crate::afe::StartMode;
use crate::detector::{DetectorMode, HALF_PERIOD_S};
use crate::encoder::{encode, FrameStream, RegionMap};
use crate::pairgen::{build_palette, Constraints, REPRESENTATIVE_COLORS};
use crate::psychofit::{fit_with, FitMethod, ResponseData, STUDY_LATENCIES_MS, PARTICIPANTS, TURN_OFF_FIT, TURN_ON_FIT};
use crate::simharness::{CrossingExperiment, Direction, Harness, HarnessConfig, SimError};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReproError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Encode(#[from] crate::encoder::EncodeError),
    #[error(transparent)]
    Fit(#[from] crate::psychofit::FitError),
    #[error("stimulus color {0} has no feasible pair")]
    Palette(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproRow {
    pub label: String,
    pub reference: f64,
    pub simulated: f64,
    pub tolerance: f64,
}

impl ReproRow {
    pub fn diff(&self) -> f64 {
        (self.simulated - self.reference).abs()
    }

    pub fn pass(&self) -> bool {
        self.diff() <= self.tolerance
    }
}

/// Measured quantity the published model leaves out; reported, never failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub label: String,
    pub model: f64,
    pub measured: f64,
    pub unit: &'static str,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReproReport {
    pub title: String,
    pub rows: Vec<ReproRow>,
    pub deviations: Vec<Deviation>,
}

impl ReproReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(ReproRow::pass)
    }
}

impl fmt::Display for ReproReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.title)?;
        writeln!(f, "{:<34} {:>10} {:>10} {:>8} {:>8}  status", "quantity", "reference", "simulated", "diff", "tol")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<34} {:>10.4} {:>10.4} {:>8.4} {:>8.4}  {}",
                r.label,
                r.reference,
                r.simulated,
                r.diff(),
                r.tolerance,
                if r.pass() { "PASS" } else { "FAIL" }
            )?;
        }
        for d in &self.deviations {
            writeln!(
                f,
                "DEVIATION {}: model {:.2} {u}, measured {:.2} {u} ({:+.2} {u})",
                d.label,
                d.model,
                d.measured,
                d.measured - d.model,
                u = d.unit
            )?;
        }
        Ok(())
    }
}

/// Gray/green stimulus used for the latency measurements.
pub fn latency_stimulus(duration_s: f64) -> Result<(RegionMap, FrameStream), ReproError> {
    let color = |name: &'static str| {
        REPRESENTATIVE_COLORS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, c)| *c)
            .ok_or(ReproError::Palette(name))
    };
    let palette = build_palette(&[color("gray")?, color("green")?], &Constraints::default());
    let map = RegionMap::latency_stimulus(0, 1);
    let stream = encode(&map, &palette, duration_s)?;
    Ok((map, stream))
}

/// Worst-case latency rows over `trials` random-phase crossings per direction,
/// plus the settling penalty of a real filter chain.
pub fn table1(cfg: &HarnessConfig, trials: usize, seed: u64) -> Result<ReproReport, ReproError> {
    let exp = CrossingExperiment {
        trials,
        seed,
        ..CrossingExperiment::default()
    };
    let (map, stream) = latency_stimulus(exp.stream_duration())?;
    let h = Harness::new(&stream, &map, *cfg)?;
    let mut rows = Vec::new();
    for (dir, name, [total, recv, vib]) in [
        (Direction::TurnOn, "turn-on", [59.5, 16.7, 42.8]),
        (Direction::TurnOff, "turn-off", [46.5, 16.7, 29.8]),
    ] {
        let rep = h.crossings(&CrossingExperiment { direction: dir, ..exp })?;
        let s = rep.summary(dir).ok_or_else(|| SimError::InvalidExperiment(format!("no {name} transitions")))?;
        for (q, reference, sim) in [
            ("max T_total", total, s.t_total_ms.max),
            ("max T_recv", recv, s.t_recv_ms.max),
            ("max T_vib", vib, s.t_vib_ms.max),
        ] {
            rows.push(ReproRow {
                label: format!("{name} {q} (ms)"),
                reference,
                simulated: sim,
                tolerance: 0.2,
            });
        }
        if s.missed > 0 {
            rows.push(ReproRow {
                label: format!("{name} missed transitions"),
                reference: 0.0,
                simulated: s.missed as f64,
                tolerance: 0.0,
            });
        }
    }
    Ok(ReproReport {
        title: format!("Worst-case latency, {trials} crossings per direction"),
        rows,
        deviations: settling_gap(&map, &stream, trials.min(200), seed)?,
    })
}

/// Acquisition latency of the analog receiver against the half-period model.
pub fn settling_gap(map: &RegionMap, stream: &FrameStream, trials: usize, seed: u64) -> Result<Vec<Deviation>, ReproError> {
    let model = 1000.0 * HALF_PERIOD_S;
    let pos = (map.width_mm() * 0.8, map.height_mm() / 2.0);
    let mut out = Vec::new();
    for (label, start, mode) in [
        ("cold-start filters, CONFIRMED", StartMode::Cold, DetectorMode::Confirmed),
        ("cold-start filters, FIRST_EDGE", StartMode::Cold, DetectorMode::FirstEdge),
        ("warm-start filters, FIRST_EDGE", StartMode::Warm, DetectorMode::FirstEdge),
    ] {
        let mut cfg = HarnessConfig::default();
        cfg.chain.start = start;
        cfg.detector.mode = mode;
        let h = Harness::new(stream, map, cfg)?;
        let acq = h.acquisition(pos, trials, 0.4, seed)?;
        out.push(Deviation {
            label: format!("mean acquisition T_recv, {label} ({} missed)", acq.missed),
            model: 0.5 * model,
            measured: acq.latency_ms.mean,
            unit: "ms",
        });
        out.push(Deviation {
            label: format!("max acquisition T_recv, {label}"),
            model,
            measured: acq.latency_ms.max,
            unit: "ms",
        });
    }
    Ok(out)
}

/// Fit the sigmoid to responses generated with the published parameters.
pub fn thresholds(method: FitMethod) -> Result<ReproReport, ReproError> {
    let mut rows = Vec::new();
    for (name, (k, x0)) in [("turn-on", TURN_ON_FIT), ("turn-off", TURN_OFF_FIT)] {
        let data = ResponseData::from_model(&STUDY_LATENCIES_MS, k, x0, PARTICIPANTS);
        let f = fit_with(&data, method)?;
        rows.push(ReproRow {
            label: format!("{name} threshold x0 (ms)"),
            reference: x0,
            simulated: f.threshold(),
            tolerance: 0.01,
        });
        rows.push(ReproRow {
            label: format!("{name} slope k (1/ms)"),
            reference: k,
            simulated: f.k,
            tolerance: 1e-4,
        });
    }
    Ok(ReproReport {
        title: "Psychometric thresholds".into(),
        rows,
        deviations: Vec::new(),
    })
}
