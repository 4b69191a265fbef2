//! Constant-luminance color pairs that carry one haptic symbol each.
//!
//! A pair `(c1, c2)` is displayed alternately. Both halves share the target's
//! luminance, their L*a*b* midpoint sits on the target, and the alternation shows
//! up in the linear R and/or B channel seen by the receiver's photodiodes.
//!
//! Construction: the symbol's channels are pushed by `±a` in linear RGB while G
//! absorbs the luminance change, so `Y(c1) = Y(c2)` holds by construction. The
//! common operating point is then nudged inside the constant-Y plane (Newton on
//! two unknowns) until the a*b* midpoint of the two halves lands on the target.
//! The largest feasible `a` is found by bisection, then the continuous pair is
//! quantized to 8-bit codes and re-validated.

use crate::colorspace::{
    decode_component, encode_component, linear_to_lab, srgb_to_linear, LabColor, LinearRgb,
    Srgb8, LUMA,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Which receiver channels carry the 30 Hz alternation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    #[serde(rename = "NONE")]
    None,
    R,
    B,
    #[serde(rename = "RB")]
    Rb,
}

impl Symbol {
    pub const ALL: [Symbol; 4] = [Symbol::None, Symbol::R, Symbol::B, Symbol::Rb];
    /// Symbols that actually modulate and therefore need a searched pair.
    pub const MODULATED: [Symbol; 3] = [Symbol::R, Symbol::B, Symbol::Rb];

    /// `(R on, B on)`.
    pub fn presence(self) -> (bool, bool) {
        match self {
            Symbol::None => (false, false),
            Symbol::R => (true, false),
            Symbol::B => (false, true),
            Symbol::Rb => (true, true),
        }
    }

    pub fn from_presence(r: bool, b: bool) -> Self {
        match (r, b) {
            (false, false) => Symbol::None,
            (true, false) => Symbol::R,
            (false, true) => Symbol::B,
            (true, true) => Symbol::Rb,
        }
    }

    /// Texture identifier the receiver reports for this symbol.
    pub fn texture_id(self) -> u8 {
        match self {
            Symbol::None => 0,
            Symbol::R => 1,
            Symbol::B => 2,
            Symbol::Rb => 3,
        }
    }

    pub fn from_texture_id(id: u8) -> Option<Self> {
        Symbol::ALL.into_iter().find(|s| s.texture_id() == id)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Symbol::None => "NONE",
            Symbol::R => "R",
            Symbol::B => "B",
            Symbol::Rb => "RB",
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Symbol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NONE" => Ok(Symbol::None),
            "R" => Ok(Symbol::R),
            "B" => Ok(Symbol::B),
            "RB" => Ok(Symbol::Rb),
            other => Err(format!("unknown symbol {other:?}")),
        }
    }
}

/// Search constraints. All linear quantities are in linear-RGB units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Constraints {
    /// Max |L*(c1) - L*(c2)|.
    pub eps_l: f64,
    /// Max distance between the a*b* midpoint of the pair and the target's a*b*.
    pub eps_ab: f64,
    /// Min peak-to-peak modulation on every channel the symbol turns on.
    pub theta_on: f64,
    /// Max peak-to-peak modulation on an alphabet channel the symbol leaves off.
    pub theta_off: f64,
    /// Max CIE76 distance from each half of the pair to the target.
    pub delta_e_max: f64,
    /// Max per-channel deviation of the pair's linear mean from the target.
    pub mean_tol: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            eps_l: 0.1,
            eps_ab: 0.5,
            theta_on: 0.05,
            theta_off: 0.005,
            delta_e_max: 10.0,
            mean_tol: 1.0 / 255.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorPair {
    pub target: Srgb8,
    pub symbol: Symbol,
    pub c1: Srgb8,
    pub c2: Srgb8,
    /// Peak-to-peak design depth `2a` on the modulated channels.
    pub amplitude: f64,
}

impl ColorPair {
    pub fn degenerate(target: Srgb8) -> Self {
        Self {
            target,
            symbol: Symbol::None,
            c1: target,
            c2: target,
            amplitude: 0.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairError {
    #[error("no {symbol} pair for target {target:?}: {reason}")]
    Infeasible {
        target: Srgb8,
        symbol: Symbol,
        reason: String,
    },
}

/// CIE76 color difference.
pub fn delta_e(c1: LabColor, c2: LabColor) -> f64 {
    ((c1.l - c2.l).powi(2) + (c1.a - c2.a).powi(2) + (c1.b - c2.b).powi(2)).sqrt()
}

/// Measured properties of a pair, as seen by an ideal (identity) sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCheck {
    pub delta_l: f64,
    pub ab_midpoint_error: f64,
    /// Smallest modulation over channels the symbol turns on (infinite for NONE).
    pub on_min: f64,
    /// Largest modulation over alphabet channels the symbol leaves off.
    pub off_max: f64,
    pub delta_e_max: f64,
    pub mean_error: f64,
}

impl PairCheck {
    pub fn satisfies(&self, c: &Constraints) -> bool {
        self.delta_l <= c.eps_l
            && self.ab_midpoint_error <= c.eps_ab
            && self.on_min >= c.theta_on
            && self.off_max <= c.theta_off
            && self.delta_e_max <= c.delta_e_max
            && self.mean_error <= c.mean_tol
    }
}

fn measure(target: LinearRgb, lab_t: LabColor, symbol: Symbol, c1: LinearRgb, c2: LinearRgb) -> PairCheck {
    let (l1, l2) = (linear_to_lab(c1), linear_to_lab(c2));
    measure_lab(target, lab_t, symbol, c1, c2, l1, l2)
}

fn measure_lab(
    target: LinearRgb,
    lab_t: LabColor,
    symbol: Symbol,
    c1: LinearRgb,
    c2: LinearRgb,
    l1: LabColor,
    l2: LabColor,
) -> PairCheck {
    let mid_a = 0.5 * (l1.a + l2.a);
    let mid_b = 0.5 * (l1.b + l2.b);
    let (r_on, b_on) = symbol.presence();
    let mod_r = (c1.r - c2.r).abs();
    let mod_b = (c1.b - c2.b).abs();
    let mut on_min = f64::INFINITY;
    let mut off_max: f64 = 0.0;
    for (on, m) in [(r_on, mod_r), (b_on, mod_b)] {
        if on {
            on_min = on_min.min(m);
        } else {
            off_max = off_max.max(m);
        }
    }
    let mean_error = [
        0.5 * (c1.r + c2.r) - target.r,
        0.5 * (c1.g + c2.g) - target.g,
        0.5 * (c1.b + c2.b) - target.b,
    ]
    .iter()
    .fold(0.0f64, |m, v| m.max(v.abs()));
    PairCheck {
        delta_l: (l1.l - l2.l).abs(),
        ab_midpoint_error: (mid_a - lab_t.a).hypot(mid_b - lab_t.b),
        on_min,
        off_max,
        delta_e_max: delta_e(l1, lab_t).max(delta_e(l2, lab_t)),
        mean_error,
    }
}

/// Measure a quantized pair against its own target and symbol.
pub fn check_pair(pair: &ColorPair) -> PairCheck {
    let t = srgb_to_linear(pair.target);
    measure(
        t,
        linear_to_lab(t),
        pair.symbol,
        srgb_to_linear(pair.c1),
        srgb_to_linear(pair.c2),
    )
}

/// Unit modulation direction in linear RGB; G compensates luminance.
/// `anti_phase` flips B against R for the two-channel symbol.
pub fn modulation_direction(symbol: Symbol, anti_phase: bool) -> [f64; 3] {
    let (r, b) = match symbol {
        Symbol::None => (0.0, 0.0),
        Symbol::R => (1.0, 0.0),
        Symbol::B => (0.0, 1.0),
        Symbol::Rb => (1.0, if anti_phase { -1.0 } else { 1.0 }),
    };
    let g = -(LUMA[0] * r + LUMA[2] * b) / LUMA[1];
    [r, g, b]
}

fn phases(symbol: Symbol) -> &'static [bool] {
    match symbol {
        Symbol::Rb => &[false, true],
        _ => &[false],
    }
}

fn add(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

// Basis of the constant-luminance plane.
const PLANE: [[f64; 3]; 2] = [[LUMA[1], -LUMA[0], 0.0], [0.0, -LUMA[2], LUMA[1]]];

fn midpoint_residual(tp: [f64; 3], delta: [f64; 3], lab_t: LabColor) -> [f64; 2] {
    let l1 = linear_to_lab(LinearRgb::from_array(add(tp, delta, 1.0)));
    let l2 = linear_to_lab(LinearRgb::from_array(add(tp, delta, -1.0)));
    [0.5 * (l1.a + l2.a) - lab_t.a, 0.5 * (l1.b + l2.b) - lab_t.b]
}

/// Operating point `t'` with `Y(t') = Y(t)` such that the a*b* midpoint of
/// `t' ± delta` equals the target's. Returns the point and the remaining error.
pub fn operating_point(target: [f64; 3], delta: [f64; 3], lab_t: LabColor) -> ([f64; 3], f64) {
    let point = |u: [f64; 2]| add(add(target, PLANE[0], u[0]), PLANE[1], u[1]);
    let mut u = [0.0, 0.0];
    let mut r = midpoint_residual(point(u), delta, lab_t);
    for _ in 0..40 {
        if r[0].hypot(r[1]) < 1e-12 {
            break;
        }
        let h = 1e-7;
        let mut jac = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut up = u;
            let mut dn = u;
            up[k] += h;
            dn[k] -= h;
            let rp = midpoint_residual(point(up), delta, lab_t);
            let rn = midpoint_residual(point(dn), delta, lab_t);
            jac[0][k] = (rp[0] - rn[0]) / (2.0 * h);
            jac[1][k] = (rp[1] - rn[1]) / (2.0 * h);
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step = [
            (jac[1][1] * r[0] - jac[0][1] * r[1]) / det,
            (-jac[1][0] * r[0] + jac[0][0] * r[1]) / det,
        ];
        let next = [u[0] - step[0], u[1] - step[1]];
        let rn = midpoint_residual(point(next), delta, lab_t);
        if rn[0].hypot(rn[1]) >= r[0].hypot(r[1]) {
            break;
        }
        u = next;
        r = rn;
    }
    (point(u), r[0].hypot(r[1]))
}

#[derive(Debug, Clone, Copy)]
struct Continuous {
    c1: [f64; 3],
    c2: [f64; 3],
}

struct Search<'a> {
    target: Srgb8,
    symbol: Symbol,
    t: [f64; 3],
    lab_t: LabColor,
    constraints: &'a Constraints,
}

impl<'a> Search<'a> {
    fn new(target: Srgb8, symbol: Symbol, constraints: &'a Constraints) -> Self {
        let t = srgb_to_linear(target);
        Self {
            target,
            symbol,
            t: t.to_array(),
            lab_t: linear_to_lab(t),
            constraints,
        }
    }

    /// Continuous pair at half-amplitude `a`, if it meets every constraint.
    fn feasible(&self, a: f64, anti_phase: bool) -> Option<Continuous> {
        let c = self.constraints;
        let delta = modulation_direction(self.symbol, anti_phase).map(|v| v * a);
        let (tp, ab_err) = operating_point(self.t, delta, self.lab_t);
        if ab_err > c.eps_ab {
            return None;
        }
        if (0..3).any(|k| (tp[k] - self.t[k]).abs() > c.mean_tol) {
            return None;
        }
        let c1 = add(tp, delta, 1.0);
        let c2 = add(tp, delta, -1.0);
        let unit = |v: &[f64; 3]| v.iter().all(|x| (0.0..=1.0).contains(x));
        if !unit(&c1) || !unit(&c2) {
            return None;
        }
        let l1 = linear_to_lab(LinearRgb::from_array(c1));
        let l2 = linear_to_lab(LinearRgb::from_array(c2));
        if delta_e(l1, self.lab_t) > c.delta_e_max || delta_e(l2, self.lab_t) > c.delta_e_max {
            return None;
        }
        if (l1.l - l2.l).abs() > c.eps_l {
            return None;
        }
        Some(Continuous { c1, c2 })
    }

    /// Largest feasible half-amplitude for one phase, by bisection.
    fn max_half_amplitude(&self, anti_phase: bool) -> Option<f64> {
        let mut lo = 0.5 * self.constraints.theta_on;
        self.feasible(lo, anti_phase)?;
        let mut hi = 0.5;
        if self.feasible(hi, anti_phase).is_some() {
            return Some(hi);
        }
        while hi - lo > 2.5e-5 {
            let mid = 0.5 * (lo + hi);
            if self.feasible(mid, anti_phase).is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(lo)
    }

    fn best_phase(&self) -> Option<(f64, bool)> {
        phases(self.symbol)
            .iter()
            .filter_map(|&p| self.max_half_amplitude(p).map(|a| (a, p)))
            .fold(None, |best: Option<(f64, bool)>, cur| match best {
                Some(b) if b.0 >= cur.0 => Some(b),
                _ => Some(cur),
            })
    }

    /// Nearest-code neighbourhood of a continuous color.
    fn code_candidates(c: [f64; 3]) -> Vec<(Srgb8, LinearRgb, LabColor)> {
        let around = |v: f64| {
            let center = (encode_component(v.clamp(0.0, 1.0)) * 255.0).round() as i32;
            (center - 1..=center + 1)
                .filter(|x| (0..=255).contains(x))
                .map(|x| x as u8)
                .collect::<Vec<_>>()
        };
        let (rs, gs, bs) = (around(c[0]), around(c[1]), around(c[2]));
        let mut out = Vec::with_capacity(27);
        for &r in &rs {
            for &g in &gs {
                for &b in &bs {
                    let s = Srgb8::new(r, g, b);
                    let lin = LinearRgb::new(
                        decode_component(r as f64 / 255.0),
                        decode_component(g as f64 / 255.0),
                        decode_component(b as f64 / 255.0),
                    );
                    out.push((s, lin, linear_to_lab(lin)));
                }
            }
        }
        out
    }

    /// Pick the quantized pair closest to perfect invisibility that still
    /// satisfies every constraint.
    fn quantize(&self, cont: &Continuous) -> Option<(Srgb8, Srgb8)> {
        let c = self.constraints;
        let t = LinearRgb::from_array(self.t);
        let first = Self::code_candidates(cont.c1);
        let second = Self::code_candidates(cont.c2);
        let mut best: Option<(f64, f64, Srgb8, Srgb8)> = None;
        for (s1, lin1, lab1) in &first {
            for (s2, lin2, lab2) in &second {
                let chk = measure_lab(t, self.lab_t, self.symbol, *lin1, *lin2, *lab1, *lab2);
                if !chk.satisfies(c) {
                    continue;
                }
                let score = chk.delta_l / c.eps_l
                    + chk.ab_midpoint_error / c.eps_ab
                    + chk.mean_error / c.mean_tol;
                let better = match best {
                    None => true,
                    Some((bs, bon, _, _)) => score < bs - 1e-12 || (score <= bs + 1e-12 && chk.on_min > bon),
                };
                if better {
                    best = Some((score, chk.on_min, *s1, *s2));
                }
            }
        }
        best.map(|(_, _, a, b)| (a, b))
    }

    fn infeasible(&self, reason: &str) -> PairError {
        PairError::Infeasible {
            target: self.target,
            symbol: self.symbol,
            reason: reason.to_string(),
        }
    }
}

/// Largest continuous peak-to-peak depth `2a` satisfying every constraint before
/// quantization, or `None` if even `theta_on` is out of reach.
pub fn max_amplitude(target: Srgb8, symbol: Symbol, constraints: &Constraints) -> Option<f64> {
    if symbol == Symbol::None {
        return Some(0.0);
    }
    Search::new(target, symbol, constraints)
        .best_phase()
        .map(|(a, _)| 2.0 * a)
}

/// Maximum-amplitude pair for `symbol` around `target`.
pub fn find_pair(target: Srgb8, symbol: Symbol, constraints: &Constraints) -> Result<ColorPair, PairError> {
    if symbol == Symbol::None {
        return Ok(ColorPair::degenerate(target));
    }
    let search = Search::new(target, symbol, constraints);
    let (a_max, anti_phase) = search
        .best_phase()
        .ok_or_else(|| search.infeasible("no amplitude reaching theta_on fits the constraints"))?;
    let a_min = 0.5 * constraints.theta_on;
    let step = (0.01 * a_max).max(2.5e-5);
    let mut a = a_max;
    while a >= a_min {
        if let Some(cont) = search.feasible(a, anti_phase) {
            if let Some((c1, c2)) = search.quantize(&cont) {
                return Ok(ColorPair {
                    target,
                    symbol,
                    c1,
                    c2,
                    amplitude: 2.0 * a,
                });
            }
        }
        a -= step;
    }
    Err(search.infeasible("every amplitude broke an invariant after 8-bit quantization"))
}

/// The nine hue/lightness anchors. Each sits one step inside the gamut cube
/// (channel levels 80 and 176, gray at 128) so both halves of a pair have room
/// to move in either direction.
pub const REPRESENTATIVE_COLORS: [(&str, Srgb8); 9] = [
    ("black", Srgb8::new(80, 80, 80)),
    ("gray", Srgb8::new(128, 128, 128)),
    ("white", Srgb8::new(176, 176, 176)),
    ("red", Srgb8::new(176, 80, 80)),
    ("green", Srgb8::new(80, 176, 80)),
    ("blue", Srgb8::new(80, 80, 176)),
    ("cyan", Srgb8::new(80, 176, 176)),
    ("yellow", Srgb8::new(176, 176, 80)),
    ("magenta", Srgb8::new(176, 80, 176)),
];

pub fn representative_colors() -> Vec<Srgb8> {
    REPRESENTATIVE_COLORS.iter().map(|(_, c)| *c).collect()
}

/// One (color, symbol) slot of a palette; `pair` is `None` when infeasible.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteEntry {
    pub target: Srgb8,
    pub symbol: Symbol,
    pub pair: Option<ColorPair>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Palette {
    pub colors: Vec<Srgb8>,
    pub entries: Vec<PaletteEntry>,
}

impl Palette {
    pub fn feasible(&self) -> impl Iterator<Item = &ColorPair> {
        self.entries.iter().filter_map(|e| e.pair.as_ref())
    }

    pub fn infeasible(&self) -> impl Iterator<Item = &PaletteEntry> {
        self.entries.iter().filter(|e| e.pair.is_none())
    }

    /// Pair for `(color index, symbol)`. NONE always resolves to the static color.
    pub fn lookup(&self, color_index: usize, symbol: Symbol) -> Option<ColorPair> {
        let target = *self.colors.get(color_index)?;
        if symbol == Symbol::None {
            return Some(ColorPair::degenerate(target));
        }
        self.entries
            .iter()
            .find(|e| e.target == target && e.symbol == symbol)
            .and_then(|e| e.pair.clone())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        let doc: Vec<PaletteRecord> = self.entries.iter().map(PaletteRecord::from).collect();
        serde_json::to_string_pretty(&doc)
    }

    /// Colors are recovered as distinct targets in order of first appearance.
    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        let doc: Vec<PaletteRecord> = serde_json::from_str(s)?;
        let mut palette = Palette::default();
        for rec in doc {
            if !palette.colors.contains(&rec.target) {
                palette.colors.push(rec.target);
            }
            let pair = match (rec.c1, rec.c2, rec.amplitude) {
                (Some(c1), Some(c2), Some(amplitude)) => Some(ColorPair {
                    target: rec.target,
                    symbol: rec.symbol,
                    c1,
                    c2,
                    amplitude,
                }),
                _ => None,
            };
            palette.entries.push(PaletteEntry {
                target: rec.target,
                symbol: rec.symbol,
                pair,
                reason: rec.infeasible,
            });
        }
        Ok(palette)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PaletteRecord {
    target: Srgb8,
    symbol: Symbol,
    c1: Option<Srgb8>,
    c2: Option<Srgb8>,
    amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    infeasible: Option<String>,
}

impl From<&PaletteEntry> for PaletteRecord {
    fn from(e: &PaletteEntry) -> Self {
        Self {
            target: e.target,
            symbol: e.symbol,
            c1: e.pair.as_ref().map(|p| p.c1),
            c2: e.pair.as_ref().map(|p| p.c2),
            amplitude: e.pair.as_ref().map(|p| p.amplitude),
            infeasible: e.reason.clone(),
        }
    }
}

/// Search every (color, modulated symbol) slot. Infeasible slots are kept with
/// their reason.
pub fn build_palette(colors: &[Srgb8], constraints: &Constraints) -> Palette {
    let jobs: Vec<(Srgb8, Symbol)> = colors
        .iter()
        .flat_map(|&c| Symbol::MODULATED.into_iter().map(move |s| (c, s)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(target, symbol)| match find_pair(target, symbol, constraints) {
            Ok(pair) => PaletteEntry {
                target,
                symbol,
                pair: Some(pair),
                reason: None,
            },
            Err(e) => PaletteEntry {
                target,
                symbol,
                pair: None,
                reason: Some(e.to_string()),
            },
        })
        .collect();
    let mut unique = Vec::new();
    for c in colors {
        if !unique.contains(c) {
            unique.push(*c);
        }
    }
    Palette {
        colors: unique,
        entries,
    }
}
