//! Frame-stream encoding: a region map plus a palette become a 60 fps stream in
//! which every modulated pixel alternates between the two halves of its pair.
//!
//! All pixels share one global phase: even frames show `c1`, odd frames `c2`.

use crate::colorspace::Srgb8;
use crate::pairgen::{ColorPair, Palette, Symbol};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;
use thiserror::Error;

/// Display refresh rate; the color vibration runs at half of it.
pub const FPS: u32 = 60;

const CVF_MAGIC: &[u8; 4] = b"CVF1";
const CVF_HEADER_LEN: usize = 4 + 4 * 4 + 1;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("cell {index} references infeasible palette entry ({symbol}, color {color})")]
    InfeasibleCell {
        index: usize,
        symbol: Symbol,
        color: usize,
    },
    #[error("region map is malformed: {0}")]
    InvalidMap(String),
    #[error("time {t} s is outside the stream [0, {duration}) s")]
    OutOfRange { t: f64, duration: f64 },
    #[error("pixel ({x}, {y}) does not match any palette pair")]
    Unclassified { x: usize, y: usize },
    #[error("bad CVF1 stream: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One RGB8 image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, c: Srgb8) -> Self {
        let data = std::iter::repeat_n(c.to_array(), width * height).flatten().collect();
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Srgb8 {
        let i = 3 * (y * self.width + x);
        Srgb8::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Srgb8) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c.to_array());
    }
}

/// Symbol and palette color for one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(Symbol, usize)", into = "(Symbol, usize)")]
pub struct Cell {
    pub symbol: Symbol,
    pub color: usize,
}

impl Cell {
    pub const fn new(symbol: Symbol, color: usize) -> Self {
        Self { symbol, color }
    }
}

impl From<(Symbol, usize)> for Cell {
    fn from((symbol, color): (Symbol, usize)) -> Self {
        Self { symbol, color }
    }
}

impl From<Cell> for (Symbol, usize) {
    fn from(c: Cell) -> Self {
        (c.symbol, c.color)
    }
}

/// Per-pixel symbol layout, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMap {
    pub width: usize,
    pub height: usize,
    pub mm_per_px: f64,
    pub cells: Vec<Cell>,
}

impl RegionMap {
    pub fn uniform(width: usize, height: usize, mm_per_px: f64, cell: Cell) -> Self {
        Self {
            width,
            height,
            mm_per_px,
            cells: vec![cell; width * height],
        }
    }

    /// Two regions side by side; columns `< width / 2` take `left`.
    pub fn split(width: usize, height: usize, mm_per_px: f64, left: Cell, right: Cell) -> Self {
        let boundary = width / 2;
        let cells = (0..height)
            .flat_map(|_| (0..width).map(move |x| if x < boundary { left } else { right }))
            .collect();
        Self {
            width,
            height,
            mm_per_px,
            cells,
        }
    }

    /// Gray static region beside a green region modulated on both R and B,
    /// 150 mm x 70 mm at 1 px/mm. `gray` and `green` are palette color indices.
    pub fn latency_stimulus(gray: usize, green: usize) -> Self {
        Self::split(150, 70, 1.0, Cell::new(Symbol::None, gray), Cell::new(Symbol::Rb, green))
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[y * self.width + x]
    }

    pub fn width_mm(&self) -> f64 {
        self.width as f64 * self.mm_per_px
    }

    pub fn height_mm(&self) -> f64 {
        self.height as f64 * self.mm_per_px
    }

    /// Pixel under a point given in millimetres, if inside the image.
    pub fn pixel_at_mm(&self, x_mm: f64, y_mm: f64) -> Option<(usize, usize)> {
        if !(x_mm >= 0.0 && y_mm >= 0.0) {
            return None;
        }
        let x = (x_mm / self.mm_per_px).floor() as usize;
        let y = (y_mm / self.mm_per_px).floor() as usize;
        (x < self.width && y < self.height).then_some((x, y))
    }

    pub fn validate_shape(&self) -> Result<(), EncodeError> {
        if !(self.mm_per_px > 0.0 && self.mm_per_px.is_finite()) {
            return Err(EncodeError::InvalidMap(format!("mm_per_px must be positive, got {}", self.mm_per_px)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(EncodeError::InvalidMap("empty image".into()));
        }
        if self.cells.len() != self.width * self.height {
            return Err(EncodeError::InvalidMap(format!(
                "{} cells for a {}x{} map",
                self.cells.len(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }

    /// Resolve every cell against the palette.
    pub fn resolve(&self, palette: &Palette) -> Result<Vec<ColorPair>, EncodeError> {
        self.validate_shape()?;
        self.cells
            .iter()
            .enumerate()
            .map(|(index, c)| {
                palette.lookup(c.color, c.symbol).ok_or(EncodeError::InfeasibleCell {
                    index,
                    symbol: c.symbol,
                    color: c.color,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> Result<Self, EncodeError> {
        let map: Self = serde_json::from_str(s).map_err(|e| EncodeError::InvalidMap(e.to_string()))?;
        map.validate_shape()?;
        Ok(map)
    }
}

/// Encoded video. Frames are shared: a stream only ever holds two distinct images.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    pub width: usize,
    pub height: usize,
    pub fps: u32,
    pub frames: Vec<Arc<Image>>,
}

/// `ceil(duration * fps)` rounded up to an even count.
pub fn frame_count(duration_s: f64, fps: u32) -> usize {
    let n = (duration_s * fps as f64 - 1e-9).ceil().max(1.0) as usize;
    n + n % 2
}

pub fn encode(map: &RegionMap, palette: &Palette, duration_s: f64) -> Result<FrameStream, EncodeError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(EncodeError::InvalidDuration(duration_s));
    }
    let pairs = map.resolve(palette)?;
    let mut even = Image::filled(map.width, map.height, Srgb8::gray(0));
    let mut odd = even.clone();
    for y in 0..map.height {
        for x in 0..map.width {
            let p = &pairs[y * map.width + x];
            even.set(x, y, p.c1);
            odd.set(x, y, p.c2);
        }
    }
    let (even, odd) = (Arc::new(even), Arc::new(odd));
    let frames = (0..frame_count(duration_s, FPS))
        .map(|n| if n % 2 == 0 { even.clone() } else { odd.clone() })
        .collect();
    Ok(FrameStream {
        width: map.width,
        height: map.height,
        fps: FPS,
        frames,
    })
}

impl FrameStream {
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps as f64
    }

    /// Zero-order-hold frame index for time `t_s`.
    pub fn frame_index_at(&self, t_s: f64) -> Result<usize, EncodeError> {
        let duration = self.duration();
        if !(t_s >= 0.0 && t_s < duration) {
            return Err(EncodeError::OutOfRange { t: t_s, duration });
        }
        let n = (t_s * self.fps as f64 + 1e-9).floor() as usize;
        Ok(n.min(self.frames.len() - 1))
    }

    pub fn frame_at(&self, t_s: f64) -> Result<&Image, EncodeError> {
        Ok(&self.frames[self.frame_index_at(t_s)?])
    }

    pub fn write_cvf<W: Write>(&self, mut w: W) -> Result<(), EncodeError> {
        let mut header = Vec::with_capacity(CVF_HEADER_LEN);
        header.extend_from_slice(CVF_MAGIC);
        for v in [self.width as u32, self.height as u32, self.fps, self.frames.len() as u32] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        header.push(0);
        w.write_all(&header)?;
        for f in &self.frames {
            w.write_all(&f.data)?;
        }
        Ok(())
    }

    /// Identical frames in the file are shared again on load.
    pub fn read_cvf<R: Read>(mut r: R) -> Result<Self, EncodeError> {
        let mut header = [0u8; CVF_HEADER_LEN];
        r.read_exact(&mut header)?;
        if &header[..4] != CVF_MAGIC {
            return Err(EncodeError::Format("missing CVF1 magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (width, height, fps, count) = (word(0) as usize, word(1) as usize, word(2), word(3) as usize);
        if header[20] != 0 {
            return Err(EncodeError::Format(format!("unsupported color type {}", header[20])));
        }
        if fps == 0 || width == 0 || height == 0 {
            return Err(EncodeError::Format("zero dimension or frame rate".into()));
        }
        let mut distinct: Vec<Arc<Image>> = Vec::new();
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let mut data = vec![0u8; width * height * 3];
            r.read_exact(&mut data)?;
            let frame = match distinct.iter().find(|f| f.data == data) {
                Some(f) => f.clone(),
                None => {
                    let f = Arc::new(Image { width, height, data });
                    distinct.push(f.clone());
                    f
                }
            };
            frames.push(frame);
        }
        Ok(Self {
            width,
            height,
            fps,
            frames,
        })
    }
}

/// Recover the region map from the first two frames by matching every pixel's
/// `(c1, c2)` against the palette.
pub fn classify(stream: &FrameStream, palette: &Palette, mm_per_px: f64) -> Result<RegionMap, EncodeError> {
    if stream.frames.len() < 2 {
        return Err(EncodeError::Format("need at least two frames".into()));
    }
    let mut known: Vec<(Srgb8, Srgb8, Cell)> = Vec::new();
    for idx in 0..palette.colors.len() {
        for s in Symbol::ALL {
            if let Some(p) = palette.lookup(idx, s) {
                known.push((p.c1, p.c2, Cell::new(s, idx)));
            }
        }
    }
    let (f0, f1) = (&stream.frames[0], &stream.frames[1]);
    let mut cells = Vec::with_capacity(stream.width * stream.height);
    for y in 0..stream.height {
        for x in 0..stream.width {
            let (a, b) = (f0.pixel(x, y), f1.pixel(x, y));
            let cell = known
                .iter()
                .find(|(c1, c2, _)| *c1 == a && *c2 == b)
                .map(|k| k.2)
                .ok_or(EncodeError::Unclassified { x, y })?;
            cells.push(cell);
        }
    }
    Ok(RegionMap {
        width: stream.width,
        height: stream.height,
        mm_per_px,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairgen::{build_palette, representative_colors, Constraints};
    use std::sync::OnceLock;

    fn palette() -> &'static Palette {
        static P: OnceLock<Palette> = OnceLock::new();
        P.get_or_init(|| build_palette(&representative_colors(), &Constraints::default()))
    }

    #[test]
    fn static_map_gives_identical_frames() {
        let map = RegionMap::uniform(8, 4, 1.0, Cell::new(Symbol::None, 1));
        let s = encode(&map, palette(), 1.0).unwrap();
        assert_eq!(s.frames.len(), 60);
        assert!(s.frames.iter().all(|f| **f == *s.frames[0]));
        assert_eq!(s.frames[0].pixel(3, 2), Srgb8::gray(128));
    }

    #[test]
    fn frame_count_rounds_up_to_even() {
        assert_eq!(frame_count(1.0, 60), 60);
        assert_eq!(frame_count(0.01, 60), 2);
        assert_eq!(frame_count(1.0 / 60.0 * 3.0, 60), 4);
        assert_eq!(frame_count(0.51, 60), 32);
    }

    #[test]
    fn modulated_cell_alternates_every_frame() {
        let map = RegionMap::uniform(2, 2, 1.0, Cell::new(Symbol::Rb, 1));
        let s = encode(&map, palette(), 1.0).unwrap();
        let pair = palette().lookup(1, Symbol::Rb).unwrap();
        for (n, f) in s.frames.iter().enumerate() {
            let want = if n % 2 == 0 { pair.c1 } else { pair.c2 };
            assert_eq!(f.pixel(1, 1), want);
        }
    }

    #[test]
    fn stimulus_boundary_at_column_75() {
        let map = RegionMap::latency_stimulus(1, 4);
        assert_eq!((map.width_mm(), map.height_mm()), (150.0, 70.0));
        assert_eq!(map.cell(74, 10).symbol, Symbol::None);
        assert_eq!(map.cell(75, 10).symbol, Symbol::Rb);
        assert_eq!(map.pixel_at_mm(74.999, 35.0), Some((74, 35)));
        assert_eq!(map.pixel_at_mm(75.0, 35.0), Some((75, 35)));
    }

    #[test]
    fn frame_hold_boundaries() {
        let map = RegionMap::uniform(1, 1, 1.0, Cell::new(Symbol::None, 0));
        let s = encode(&map, palette(), 1.0).unwrap();
        assert_eq!(s.frame_index_at(0.0).unwrap(), 0);
        assert_eq!(s.frame_index_at(1.0 / 60.0 - 1e-9).unwrap(), 0);
        assert_eq!(s.frame_index_at(1.0 / 60.0).unwrap(), 1);
        assert!(matches!(s.frame_at(1.0), Err(EncodeError::OutOfRange { .. })));
        assert!(matches!(s.frame_at(-1e-6), Err(EncodeError::OutOfRange { .. })));
    }

    #[test]
    fn infeasible_cell_and_bad_duration() {
        let map = RegionMap::uniform(2, 2, 1.0, Cell::new(Symbol::R, 99));
        assert!(matches!(encode(&map, palette(), 1.0), Err(EncodeError::InfeasibleCell { .. })));
        let ok = RegionMap::uniform(2, 2, 1.0, Cell::new(Symbol::R, 0));
        assert!(matches!(encode(&ok, palette(), 0.0), Err(EncodeError::InvalidDuration(_))));
    }

    #[test]
    fn cvf_round_trip_and_layout() {
        let map = RegionMap::latency_stimulus(1, 4);
        let s = encode(&map, palette(), 0.1).unwrap();
        let mut buf = Vec::new();
        s.write_cvf(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CVF1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 150);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 70);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 60);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 6);
        assert_eq!(buf[20], 0);
        assert_eq!(buf.len(), 21 + 6 * 150 * 70 * 3);
        let back = FrameStream::read_cvf(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(Arc::ptr_eq(&back.frames[0], &back.frames[2]));
    }

    #[test]
    fn region_map_json_shape() {
        let map = RegionMap::split(2, 1, 0.5, Cell::new(Symbol::None, 0), Cell::new(Symbol::Rb, 3));
        let v: serde_json::Value = serde_json::from_str(&map.to_json().unwrap()).unwrap();
        assert_eq!(v["cells"], serde_json::json!([["NONE", 0], ["RB", 3]]));
        assert_eq!(RegionMap::from_json(&map.to_json().unwrap()).unwrap(), map);
        assert!(RegionMap::from_json(r#"{"width":2,"height":1,"mm_per_px":0,"cells":[["R",0],["R",0]]}"#).is_err());
    }

    #[test]
    fn modulated_channels_have_30hz_fundamental_and_target_mean() {
        use rustfft::{num_complex::Complex, FftPlanner};
        for (idx, target) in palette().colors.iter().enumerate() {
            for sym in Symbol::MODULATED {
                let map = RegionMap::uniform(1, 1, 1.0, Cell::new(sym, idx));
                let s = encode(&map, palette(), 1.0).unwrap();
                let lin: Vec<[f64; 3]> = s.frames.iter().map(|f| f.pixel(0, 0).to_linear().to_array()).collect();
                let t = target.to_linear().to_array();
                let (r, b) = sym.presence();
                for ch in 0..3 {
                    let xs: Vec<f64> = lin.iter().map(|v| v[ch]).collect();
                    let mean = (xs[0] + xs[1]) / 2.0;
                    assert!((mean - t[ch]).abs() <= 1.0 / 255.0, "{target:?} {sym} ch{ch}");
                    let on = (ch == 0 && r) || (ch == 2 && b);
                    if !on {
                        continue;
                    }
                    let mut buf: Vec<Complex<f64>> = xs.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
                    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
                    let peak = (1..=30).max_by(|&i, &j| buf[i].norm().total_cmp(&buf[j].norm())).unwrap();
                    assert_eq!(peak as f64 * s.fps as f64 / xs.len() as f64, 30.0);
                }
            }
        }
    }

    #[test]
    fn classify_recovers_map() {
        let mut map = RegionMap::uniform(9, 4, 0.5, Cell::new(Symbol::None, 0));
        for (i, c) in map.cells.iter_mut().enumerate() {
            *c = Cell::new(Symbol::ALL[i % 4], (i / 4) % 9);
        }
        let s = encode(&map, palette(), 0.2).unwrap();
        assert_eq!(classify(&s, palette(), 0.5).unwrap(), map);
    }
}
