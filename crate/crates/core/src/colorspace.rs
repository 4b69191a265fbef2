//! Color conversions between 8-bit display RGB, linear RGB, CIE XYZ and CIE L*a*b*.
//!
//! Everything is referenced to the sRGB primaries with a D65 whitepoint (2° observer).
//! The whitepoint is taken as the XYZ image of linear white so that `(1, 1, 1)` maps
//! to `L* = 100, a* = b* = 0` without rounding residue.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Linear sRGB to XYZ (D65).
pub const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Inverse of [`RGB_TO_XYZ`], evaluated to full double precision.
pub const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404548360214087, -1.5371388501025751, -0.498531546868481],
    [-0.9692663898756538, 1.876010928842491, 0.041556082346673545],
    [0.05564341960421367, -0.20402585426769818, 1.057225162457929],
];

/// Relative luminance weights of the linear channels (the Y row of [`RGB_TO_XYZ`]).
pub const LUMA: [f64; 3] = RGB_TO_XYZ[1];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// Tolerance used when deciding whether an inverse-mapped color left the gamut.
pub const GAMUT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColorError {
    #[error("L*a*b* color ({l:.3}, {a:.3}, {b:.3}) is outside the sRGB gamut")]
    OutOfGamut { l: f64, a: f64, b: f64 },
}

/// Display-encoded 8-bit color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u8; 3]", into = "[u8; 3]")]
pub struct Srgb8 {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Srgb8 {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }

    pub const fn gray(v: u8) -> Self {
        Self::new(v, v, v)
    }

    pub fn to_array(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    pub fn to_linear(self) -> LinearRgb {
        srgb_to_linear(self)
    }

    pub fn to_lab(self) -> LabColor {
        linear_to_lab(srgb_to_linear(self))
    }
}

impl From<[u8; 3]> for Srgb8 {
    fn from(v: [u8; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Srgb8> for [u8; 3] {
    fn from(c: Srgb8) -> Self {
        c.to_array()
    }
}

/// Linear-light RGB, one value per display primary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearRgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl LinearRgb {
    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn luminance(self) -> f64 {
        LUMA[0] * self.r + LUMA[1] * self.g + LUMA[2] * self.b
    }

    pub fn in_gamut(self, tol: f64) -> bool {
        self.to_array().iter().all(|&v| v >= -tol && v <= 1.0 + tol)
    }

    /// Quantize to the nearest display code.
    pub fn to_srgb8(self) -> Srgb8 {
        linear_to_srgb(self)
    }
}

/// CIE 1976 L*a*b*.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }
}

/// CIE XYZ tristimulus values, Y normalized so that linear white has Y = 1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Xyz {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// D65 whitepoint expressed through the sRGB primaries.
pub fn d65_white() -> Xyz {
    linear_to_xyz(LinearRgb::new(1.0, 1.0, 1.0))
}

/// sRGB electro-optical transfer function for one normalized component.
pub fn decode_component(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`decode_component`].
pub fn encode_component(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(c: Srgb8) -> LinearRgb {
    let f = |v: u8| decode_component(v as f64 / 255.0);
    LinearRgb::new(f(c.r), f(c.g), f(c.b))
}

/// Encode and round to the nearest 8-bit code. Values outside [0, 1] saturate.
pub fn linear_to_srgb(c: LinearRgb) -> Srgb8 {
    let f = |v: f64| (encode_component(v.clamp(0.0, 1.0)) * 255.0).round() as u8;
    Srgb8::new(f(c.r), f(c.g), f(c.b))
}

fn mul3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn linear_to_xyz(c: LinearRgb) -> Xyz {
    let [x, y, z] = mul3(&RGB_TO_XYZ, c.to_array());
    Xyz { x, y, z }
}

pub fn xyz_to_linear(c: Xyz) -> LinearRgb {
    LinearRgb::from_array(mul3(&XYZ_TO_RGB, [c.x, c.y, c.z]))
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

pub fn xyz_to_lab(c: Xyz, white: Xyz) -> LabColor {
    let fx = lab_f(c.x / white.x);
    let fy = lab_f(c.y / white.y);
    let fz = lab_f(c.z / white.z);
    LabColor::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

pub fn lab_to_xyz(c: LabColor, white: Xyz) -> Xyz {
    let fy = (c.l + 16.0) / 116.0;
    let fx = fy + c.a / 500.0;
    let fz = fy - c.b / 200.0;
    let y = if c.l > KAPPA * EPSILON {
        fy * fy * fy
    } else {
        c.l / KAPPA
    };
    Xyz {
        x: lab_f_inv(fx) * white.x,
        y: y * white.y,
        z: lab_f_inv(fz) * white.z,
    }
}

pub fn linear_to_lab_with(c: LinearRgb, white: Xyz) -> LabColor {
    xyz_to_lab(linear_to_xyz(c), white)
}

/// Linear RGB to L*a*b* against the D65 white.
pub fn linear_to_lab(c: LinearRgb) -> LabColor {
    linear_to_lab_with(c, d65_white())
}

/// L*a*b* to linear RGB. Colors that land outside the unit cube by more than
/// [`GAMUT_TOL`] are rejected rather than clamped.
pub fn lab_to_linear(c: LabColor) -> Result<LinearRgb, ColorError> {
    let rgb = xyz_to_linear(lab_to_xyz(c, d65_white()));
    if !rgb.in_gamut(GAMUT_TOL) {
        return Err(ColorError::OutOfGamut {
            l: c.l,
            a: c.a,
            b: c.b,
        });
    }
    Ok(LinearRgb::from_array(rgb.to_array().map(|v| v.clamp(0.0, 1.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference transfer function written out independently of `decode_component`.
    fn oracle_eotf(code: u8) -> f64 {
        let v = code as f64 / 255.0;
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    }

    #[test]
    fn black_and_white_endpoints() {
        assert_eq!(srgb_to_linear(Srgb8::gray(0)), LinearRgb::new(0.0, 0.0, 0.0));
        let w = srgb_to_linear(Srgb8::gray(255));
        assert!((w.r - 1.0).abs() < 1e-15 && (w.g - 1.0).abs() < 1e-15 && (w.b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mid_gray_code_188() {
        let expected = oracle_eotf(188);
        assert!((expected - 0.502).abs() < 1e-3);
        let got = srgb_to_linear(Srgb8::gray(188));
        for v in got.to_array() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn every_code_round_trips() {
        for v in 0..=255u8 {
            let c = Srgb8::new(v, 255 - v, v / 2);
            assert_eq!(linear_to_srgb(srgb_to_linear(c)), c);
        }
    }

    #[test]
    fn lab_reference_points() {
        let white = linear_to_lab(LinearRgb::new(1.0, 1.0, 1.0));
        assert!((white.l - 100.0).abs() < 1e-9);
        assert!(white.a.abs() < 1e-9 && white.b.abs() < 1e-9);

        let black = linear_to_lab(LinearRgb::default());
        assert_eq!((black.l, black.a, black.b), (0.0, 0.0, 0.0));

        // L* = 116 * Y^(1/3) - 16 for Y = 0.5
        let oracle = 116.0 * 0.5f64.cbrt() - 16.0;
        assert!((oracle - 76.07).abs() < 5e-3);
        let half = linear_to_lab(LinearRgb::new(0.5, 0.5, 0.5));
        assert!((half.l - oracle).abs() < 1e-9);
        assert!(half.a.abs() < 1e-9 && half.b.abs() < 1e-9);
    }

    #[test]
    fn lab_white_inverts_to_unit_rgb() {
        let w = lab_to_linear(LabColor::new(100.0, 0.0, 0.0)).unwrap();
        for v in w.to_array() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_high_lightness_red_is_out_of_gamut() {
        // Oracle: densely sample the gamut surface and confirm that nothing in gamut
        // reaches a* = 120 anywhere near L* = 100.
        let n = 48;
        let mut max_a_near_white = f64::MIN;
        for i in 0..=n {
            for j in 0..=n {
                for face in 0..6 {
                    let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                    let c = match face {
                        0 => [0.0, u, v],
                        1 => [1.0, u, v],
                        2 => [u, 0.0, v],
                        3 => [u, 1.0, v],
                        4 => [u, v, 0.0],
                        _ => [u, v, 1.0],
                    };
                    let lab = linear_to_lab(LinearRgb::from_array(c));
                    if lab.l > 95.0 {
                        max_a_near_white = max_a_near_white.max(lab.a);
                    }
                }
            }
        }
        assert!(max_a_near_white < 120.0);
        assert!(matches!(
            lab_to_linear(LabColor::new(100.0, 120.0, 0.0)),
            Err(ColorError::OutOfGamut { .. })
        ));
    }

    #[test]
    fn gray_lightness_is_monotone_in_scale() {
        let mut prev = -1.0;
        for i in 0..=200 {
            let v = i as f64 / 200.0;
            let l = linear_to_lab(LinearRgb::new(v, v, v)).l;
            assert!(l > prev);
            prev = l;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn lab_round_trip(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let c = LinearRgb::new(r, g, b);
            let back = lab_to_linear(linear_to_lab(c)).unwrap();
            prop_assert!((back.r - r).abs() < 1e-9);
            prop_assert!((back.g - g).abs() < 1e-9);
            prop_assert!((back.b - b).abs() < 1e-9);
        }
    }
}
