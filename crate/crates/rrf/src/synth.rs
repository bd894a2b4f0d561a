//! Deterministic synthetic clips with codec-style degradations.
//!
//! Each clip is a drifting multi-octave value-noise texture over a slow
//! gradient; the "decoded" variant applies one of three plausible coding
//! artefacts to every plane. The pairs land in the 28–40 dB PSNR band, which
//! leaves the refinement stage real signal to recover without drowning it.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::yuv::{Plane, YuvError, YuvFrame};

/// Artefact injected into the decoded side of a synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degradation {
    /// Separable [1,2,1]/4 low-pass, the classic softening of heavy coding.
    Blur,
    /// Per-8×8-block DCT-II with high frequencies dropped — blocking edges.
    Blocky,
    /// Posterized sample values — banding contours in smooth regions.
    Banding,
}

impl Degradation {
    pub const ALL: [Degradation; 3] = [
        Degradation::Blur,
        Degradation::Blocky,
        Degradation::Banding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Degradation::Blur => "blur",
            Degradation::Blocky => "blocky",
            Degradation::Banding => "banding",
        }
    }

}

impl std::str::FromStr for Degradation {
    type Err = String;

    fn from_str(s: &str) -> Result<Degradation, String> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown degradation {s:?} (expected blur, blocky, or banding)"))
    }
}

/// Parameters of a synthetic source/decoded pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub degradation: Degradation,
}

/// A pristine clip and its degraded twin, frame for frame.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub source: Vec<YuvFrame>,
    pub decoded: Vec<YuvFrame>,
}

/// One octave of drifting value noise on a wrapping lattice.
struct Octave {
    cell: f64,
    amp: f64,
    drift: (f64, f64),
    grid: Vec<f64>,
    gw: usize,
    gh: usize,
}

impl Octave {
    fn new(w: usize, h: usize, cell: f64, amp: f64, rng: &mut ChaCha8Rng) -> Octave {
        let gw = ((w as f64 / cell).ceil() as usize + 2).max(2);
        let gh = ((h as f64 / cell).ceil() as usize + 2).max(2);
        let grid = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let drift = (rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
        Octave { cell, amp, drift, grid, gw, gh }
    }

    /// Bilinear sample at pixel (x, y) of frame t; the lattice wraps, so
    /// arbitrary drift stays in bounds.
    fn sample(&self, t: f64, x: f64, y: f64) -> f64 {
        let sx = (x + t * self.drift.0) / self.cell;
        let sy = (y + t * self.drift.1) / self.cell;
        let (x0, fx) = (sx.floor(), sx - sx.floor());
        let (y0, fy) = (sy.floor(), sy - sy.floor());
        let xi = x0.rem_euclid(self.gw as f64) as usize;
        let yi = y0.rem_euclid(self.gh as f64) as usize;
        let g = |r: usize, c: usize| self.grid[(r % self.gh) * self.gw + c % self.gw];
        let top = g(yi, xi) * (1.0 - fx) + g(yi, xi + 1) * fx;
        let bot = g(yi + 1, xi) * (1.0 - fx) + g(yi + 1, xi + 1) * fx;
        self.amp * (top * (1.0 - fy) + bot * fy)
    }
}

fn render_plane(w: usize, h: usize, t: f64, base: f64, octaves: &[Octave]) -> Plane<u8> {
    let mut p = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut v = base + 30.0 * (y as f64 / h as f64) + 14.0 * (x as f64 / w as f64);
            for o in octaves {
                v += o.sample(t, x as f64, y as f64);
            }
            p.set(y, x, v.round().clamp(4.0, 251.0) as u8);
        }
    }
    p
}

/// Two rounds of separable [1,2,1]/4 blur (≈ a 5-tap binomial) with clamped
/// borders — one round barely dents the texture.
fn blur_plane(p: &Plane<u8>) -> Plane<u8> {
    let (w, h) = (p.width, p.height);
    let mut cur: Vec<f64> = p.data.iter().map(|&v| v as f64).collect();
    for _ in 0..2 {
        let mut tmp = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let l = cur[y * w + x.saturating_sub(1)];
                let r = cur[y * w + (x + 1).min(w - 1)];
                tmp[y * w + x] = (l + 2.0 * cur[y * w + x] + r) / 4.0;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let u = tmp[y.saturating_sub(1) * w + x];
                let d = tmp[(y + 1).min(h - 1) * w + x];
                cur[y * w + x] = (u + 2.0 * tmp[y * w + x] + d) / 4.0;
            }
        }
    }
    let mut out = Plane::new(w, h);
    for (dst, &v) in out.data.iter_mut().zip(&cur) {
        *dst = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Orthonormal 8×8 DCT-II basis, row u = basis for frequency u.
fn dct8_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

/// Keep only DCT coefficients with u + v ≤ `keep` in each full 8×8 block;
/// partial border blocks pass through untouched.
fn blocky_plane(p: &Plane<u8>, keep: usize) -> Plane<u8> {
    let m = dct8_basis();
    let mut out = p.clone();
    let (w, h) = (p.width, p.height);
    for by in (0..h / 8 * 8).step_by(8) {
        for bx in (0..w / 8 * 8).step_by(8) {
            let mut f = [[0.0f64; 8]; 8];
            for (u, fu) in f.iter_mut().enumerate() {
                for (v, fv) in fu.iter_mut().enumerate() {
                    if u + v > keep {
                        continue;
                    }
                    let mut s = 0.0;
                    for i in 0..8 {
                        for j in 0..8 {
                            s += m[u][i] * m[v][j] * p.at(by + i, bx + j) as f64;
                        }
                    }
                    *fv = s;
                }
            }
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = 0.0;
                    for (u, fu) in f.iter().enumerate() {
                        for (v, &c) in fu.iter().enumerate() {
                            if u + v <= keep {
                                s += c * m[u][i] * m[v][j];
                            }
                        }
                    }
                    out.set(by + i, bx + j, s.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    out
}

/// Posterize to 16-level steps, mid-rise.
fn banding_plane(p: &Plane<u8>) -> Plane<u8> {
    let mut out = p.clone();
    for v in out.data.iter_mut() {
        *v = (*v & 0xF0) | 0x08;
    }
    out
}

/// Degrade one plane. Public so callers can build bespoke pairs.
pub fn degrade_plane(p: &Plane<u8>, d: Degradation) -> Plane<u8> {
    match d {
        Degradation::Blur => blur_plane(p),
        Degradation::Blocky => blocky_plane(p, 3),
        Degradation::Banding => banding_plane(p),
    }
}

/// Generate a deterministic source/decoded pair.
pub fn synth_clip(cfg: &SynthConfig) -> Result<SynthClip, YuvError> {
    if cfg.width == 0 || cfg.height == 0 || !cfg.width.is_multiple_of(2) || !cfg.height.is_multiple_of(2) {
        return Err(YuvError::BadDimensions {
            width: cfg.width,
            height: cfg.height,
        });
    }
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Cell sizes are deliberately coprime with the 8-pixel block grid.
    let luma = vec![
        Octave::new(w, h, 37.0, 38.0, &mut rng),
        Octave::new(w, h, 13.0, 19.0, &mut rng),
        Octave::new(w, h, 5.0, 11.0, &mut rng),
        Octave::new(w, h, 2.0, 14.0, &mut rng),
    ];
    let cb = vec![
        Octave::new(w / 2, h / 2, 23.0, 14.0, &mut rng),
        Octave::new(w / 2, h / 2, 7.0, 6.0, &mut rng),
        Octave::new(w / 2, h / 2, 2.0, 4.0, &mut rng),
    ];
    let cr = vec![
        Octave::new(w / 2, h / 2, 29.0, 14.0, &mut rng),
        Octave::new(w / 2, h / 2, 9.0, 6.0, &mut rng),
        Octave::new(w / 2, h / 2, 2.0, 4.0, &mut rng),
    ];
    let mut source = Vec::with_capacity(cfg.frames);
    let mut decoded = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let t = i as f64;
        let y = render_plane(w, h, t, 108.0, &luma);
        let u = render_plane(w / 2, h / 2, t, 118.0, &cb);
        let v = render_plane(w / 2, h / 2, t, 132.0, &cr);
        decoded.push(YuvFrame::new(
            i,
            degrade_plane(&y, cfg.degradation),
            degrade_plane(&u, cfg.degradation),
            degrade_plane(&v, cfg.degradation),
        )?);
        source.push(YuvFrame::new(i, y, u, v)?);
    }
    Ok(SynthClip { source, decoded })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_psnr(a: &Plane<u8>, b: &Plane<u8>) -> f64 {
        let mse: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            / a.data.len() as f64;
        10.0 * (255.0 * 255.0 / mse).log10()
    }

    fn cfg(d: Degradation) -> SynthConfig {
        SynthConfig {
            width: 160,
            height: 128,
            frames: 4,
            seed: 9,
            degradation: d,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_clip(&cfg(Degradation::Blur)).unwrap();
        let b = synth_clip(&cfg(Degradation::Blur)).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.decoded, b.decoded);
    }

    #[test]
    fn seeds_change_the_texture() {
        let a = synth_clip(&cfg(Degradation::Blur)).unwrap();
        let mut c2 = cfg(Degradation::Blur);
        c2.seed = 10;
        let b = synth_clip(&c2).unwrap();
        assert_ne!(a.source[0].y.data, b.source[0].y.data);
    }

    #[test]
    fn frames_drift_over_time() {
        let a = synth_clip(&cfg(Degradation::Blur)).unwrap();
        assert_ne!(a.source[0].y.data, a.source[1].y.data);
        // Consecutive frames stay correlated — drift, not a scene cut.
        assert!(plane_psnr(&a.source[0].y, &a.source[1].y) > 18.0);
    }

    #[test]
    fn every_degradation_lands_in_the_psnr_band() {
        for d in Degradation::ALL {
            let clip = synth_clip(&cfg(d)).unwrap();
            for (s, dec) in clip.source.iter().zip(&clip.decoded) {
                let y = plane_psnr(&s.y, &dec.y);
                assert!(
                    (28.0..40.0).contains(&y),
                    "{} luma psnr {y:.2} outside band",
                    d.as_str()
                );
                // Chroma carries a real (if milder) residual too.
                assert!(plane_psnr(&s.u, &dec.u) < 55.0);
                assert_ne!(s.u.data, dec.u.data, "{}", d.as_str());
                assert_ne!(s.v.data, dec.v.data, "{}", d.as_str());
            }
        }
    }

    #[test]
    fn blocky_preserves_block_means() {
        // The DC coefficient survives truncation, so each full 8×8 block
        // keeps its mean to within rounding.
        let clip = synth_clip(&cfg(Degradation::Blocky)).unwrap();
        let (s, d) = (&clip.source[0].y, &clip.decoded[0].y);
        for by in (0..128).step_by(8) {
            for bx in (0..160).step_by(8) {
                let mut ms = 0.0;
                let mut md = 0.0;
                for i in 0..8 {
                    for j in 0..8 {
                        ms += s.at(by + i, bx + j) as f64;
                        md += d.at(by + i, bx + j) as f64;
                    }
                }
                assert!((ms - md).abs() / 64.0 < 1.0, "block mean moved");
            }
        }
    }

    #[test]
    fn banded_values_sit_on_the_grid() {
        let clip = synth_clip(&cfg(Degradation::Banding)).unwrap();
        assert!(clip.decoded[0].y.data.iter().all(|v| v & 0x0F == 0x08));
    }

    #[test]
    fn odd_dimensions_are_rejected()  {
        let mut c = cfg(Degradation::Blur);
        c.width = 161;
        assert!(synth_clip(&c).is_err());
    }
}
