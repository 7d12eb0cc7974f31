//! Deterministic synthetic optical-flow data.
//!
//! Every sample's motion is an invertible affine map `phi(x) = A(x−c) +
//! c + b` over image coordinates, so both the ground-truth forward flow
//! `phi(x) − x` and the warp that synthesizes the second image are
//! analytic and exact: `image2(x) = bilinear(image1, phi⁻¹(x))`, with no
//! holes and no splatting. A pixel is valid when both its target
//! `phi(x)` and its source `phi⁻¹(x)` land inside the frame, so
//! supervision never touches zero-filled border content on either
//! endpoint.
//!
//! Easy samples are small translations; hard samples are larger
//! rotations or general affine maps, sized so they need several
//! refinement iterations but stay within the correlation lookup's reach.
//! Magnitudes are drawn in feature-grid pixels and stored in image
//! pixels (× the stem's downscale factor).
//!
//! ## Dataset container (`FGDS`, version 1)
//!
//! ```text
//! magic "FGDS" | u32 version | u32 count | u32 h | u32 w | u32 ci
//! then per sample:
//!   u64 seed | u8 difficulty (0 easy, 1 hard)
//!   image1: ci·h·w f64 LE | image2: ci·h·w f64 LE
//!   flow:   2·h·w  f64 LE | valid: h·w bytes (0 or 1)
//! ```
//!
//! All integers little-endian; floats are IEEE-754 bit patterns. The
//! parser bounds every allocation before reading and rejects trailing
//! bytes, non-finite floats, and out-of-range flag bytes.

use crate::error::{Error, Result};
use crate::kernels::bilinear_zero;
use crate::seeds::{self, Stream};
use crate::tensor::Tensor;
use crate::wire::Cursor;
use rand::Rng;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FGDS";
const VERSION: u32 = 1;
/// Bounds for hostile headers: extents, channels, and sample count.
const MAX_EXTENT: u32 = 1 << 12;
const MAX_CI: u32 = 8;
const MAX_COUNT: u32 = 1 << 20;
const MIN_EXTENT: usize = 8;

/// Sample difficulty label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Hard => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Difficulty> {
        match b {
            0 => Ok(Difficulty::Easy),
            1 => Ok(Difficulty::Hard),
            other => Err(Error::format("dataset", format!("difficulty byte {other}"))),
        }
    }
}

/// Invertible affine motion `phi(x) = A(x − c) + c + b` in image
/// coordinates (`x = (col, row)`).
#[derive(Debug, Clone, Copy)]
pub struct AffineMap {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub c: [f64; 2],
}

impl AffineMap {
    pub fn apply(&self, x: [f64; 2]) -> [f64; 2] {
        let d = [x[0] - self.c[0], x[1] - self.c[1]];
        [
            self.a[0][0] * d[0] + self.a[0][1] * d[1] + self.c[0] + self.b[0],
            self.a[1][0] * d[0] + self.a[1][1] * d[1] + self.c[1] + self.b[1],
        ]
    }

    /// Forward displacement `phi(x) − x`.
    pub fn displacement(&self, x: [f64; 2]) -> [f64; 2] {
        let y = self.apply(x);
        [y[0] - x[0], y[1] - x[1]]
    }

    /// Analytic inverse: `phi⁻¹(y) = A⁻¹(y − c − b) + c`.
    pub fn inverse(&self) -> Result<AffineMap> {
        let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
        if det.abs() < 1e-9 {
            return Err(Error::contract(format!(
                "AffineMap::inverse: near-singular map, det {det:.3e}"
            )));
        }
        let inv = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        let b_inv = [
            -(inv[0][0] * self.b[0] + inv[0][1] * self.b[1]),
            -(inv[1][0] * self.b[0] + inv[1][1] * self.b[1]),
        ];
        Ok(AffineMap {
            a: inv,
            b: b_inv,
            c: self.c,
        })
    }
}

fn center(h: usize, w: usize) -> [f64; 2] {
    [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0]
}

/// Pure translation by `magnitude` image pixels in direction `theta`.
pub fn translation_map(magnitude: f64, theta: f64, h: usize, w: usize) -> AffineMap {
    AffineMap {
        a: [[1.0, 0.0], [0.0, 1.0]],
        b: [magnitude * theta.cos(), magnitude * theta.sin()],
        c: center(h, w),
    }
}

/// Rigid rotation about the image center whose maximum displacement over
/// the pixel grid equals `magnitude` (attained at the farthest corner).
/// `clockwise` flips the direction.
pub fn rotation_map(magnitude: f64, clockwise: bool, h: usize, w: usize) -> AffineMap {
    let c = center(h, w);
    let r_max = (c[0] * c[0] + c[1] * c[1]).sqrt();
    // Chord length 2·sin(α/2)·r_max = magnitude.
    let mut alpha = 2.0 * (magnitude / (2.0 * r_max)).min(1.0).asin();
    if clockwise {
        alpha = -alpha;
    }
    let (s, co) = alpha.sin_cos();
    AffineMap {
        a: [[co, -s], [s, co]],
        b: [0.0, 0.0],
        c,
    }
}

/// Seeded small affine map rescaled so its maximum displacement over the
/// pixel grid equals `magnitude` (the displacement is affine in `x`, so
/// the norm peaks at a corner).
pub fn affine_map(magnitude: f64, rng: &mut impl Rng, h: usize, w: usize) -> Result<AffineMap> {
    let c = center(h, w);
    let mut g = || rng.gen_range(-0.15..0.15);
    let raw = AffineMap {
        a: [[1.0 + g(), g()], [g(), 1.0 + g()]],
        b: [g() * 4.0, g() * 4.0],
        c,
    };
    let corners = [
        [0.0, 0.0],
        [w as f64 - 1.0, 0.0],
        [0.0, h as f64 - 1.0],
        [w as f64 - 1.0, h as f64 - 1.0],
    ];
    let max_disp = corners
        .iter()
        .map(|&x| {
            let d = raw.displacement(x);
            (d[0] * d[0] + d[1] * d[1]).sqrt()
        })
        .fold(0.0f64, f64::max);
    if max_disp < 1e-9 {
        // Degenerate draw (essentially the identity); fall back to a
        // small rotation of the requested size.
        return Ok(rotation_map(magnitude, false, h, w));
    }
    // phi_k(x) = x + k·(phi(x) − x) is affine with A' = I + k(A − I).
    let k = magnitude / max_disp;
    let scaled = AffineMap {
        a: [
            [1.0 + k * (raw.a[0][0] - 1.0), k * raw.a[0][1]],
            [k * raw.a[1][0], 1.0 + k * (raw.a[1][1] - 1.0)],
        ],
        b: [k * raw.b[0], k * raw.b[1]],
        c,
    };
    scaled.inverse()?; // reject the rare near-singular rescale
    Ok(scaled)
}

/// Flow-field kind selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Translation,
    Rotation,
    Affine,
}

/// Draws a seeded map of the given kind and maximum displacement
/// (`magnitude`, in image pixels).
pub fn gen_flow_map(
    kind: FlowKind,
    magnitude: f64,
    rng: &mut impl Rng,
    h: usize,
    w: usize,
) -> Result<AffineMap> {
    if !(magnitude.is_finite() && magnitude >= 0.0) {
        return Err(Error::contract(format!(
            "gen_flow_map: magnitude must be finite and >= 0, got {magnitude}"
        )));
    }
    match kind {
        FlowKind::Translation => {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            Ok(translation_map(magnitude, theta, h, w))
        }
        FlowKind::Rotation => Ok(rotation_map(magnitude, rng.gen_bool(0.5), h, w)),
        FlowKind::Affine => affine_map(magnitude, rng, h, w),
    }
}

/// Materializes a map's forward displacement on the pixel grid as a
/// `[2, h, w]` tensor (channel 0 horizontal, channel 1 vertical).
pub fn flow_field(map: &AffineMap, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 2 * h * w];
    for row in 0..h {
        for col in 0..w {
            let d = map.displacement([col as f64, row as f64]);
            data[row * w + col] = d[0];
            data[h * w + row * w + col] = d[1];
        }
    }
    Tensor::from_vec(&[2, h, w], data).expect("sized buffer")
}

/// Band-limited random texture in `[0, 1]`: a heavily smoothed base
/// octave plus progressively finer, fainter octaves. More octaves mean
/// strictly more high-frequency content.
pub fn gen_texture(seed: u64, h: usize, w: usize, octaves: usize, salt: u64) -> Result<Tensor> {
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::contract(format!(
            "gen_texture: extent {h}x{w} below minimum {MIN_EXTENT}"
        )));
    }
    if octaves == 0 {
        return Err(Error::contract("gen_texture: need at least one octave"));
    }
    let mut acc = vec![0.0f64; h * w];
    for o in 0..octaves {
        let mut rng = seeds::stream_rng(seed, Stream::Data, salt.wrapping_mul(64).wrapping_add(o as u64));
        let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let radius = 1usize << (3usize.saturating_sub(o));
        let smooth = box_blur(&noise, h, w, radius);
        let amp = 0.5f64.powi(o as i32);
        for (a, s) in acc.iter_mut().zip(&smooth) {
            *a += amp * s;
        }
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 1e-12 {
        acc.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.5; h * w]
    };
    Tensor::from_vec(&[1, h, w], data)
}

/// Separable box blur with clamped borders (window shrinks at edges).
fn box_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut horizontal = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            let lo = col.saturating_sub(radius);
            let hi = (col + radius).min(w - 1);
            let acc: f64 = (lo..=hi).map(|c| src[row * w + c]).sum();
            horizontal[row * w + col] = acc / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            let lo = row.saturating_sub(radius);
            let hi = (row + radius).min(h - 1);
            let acc: f64 = (lo..=hi).map(|r| horizontal[r * w + col]).sum();
            out[row * w + col] = acc / (hi - lo + 1) as f64;
        }
    }
    out
}

/// One generated sample. Tensors are per-sample (no batch axis): images
/// `[ci, h, w]` in `[0, 1]`, flow `[2, h, w]` in image pixels, `valid`
/// row-major `h·w` flags.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub image1: Tensor,
    pub image2: Tensor,
    pub flow_gt: Tensor,
    pub valid: Vec<bool>,
}

impl SynthSample {
    /// Subsamples flow and validity to the stem's feature grid: the flow
    /// at pixel `(row·s, col·s)` divided by `s` (feature-pixel units).
    pub fn to_feature_grid(&self, scale: usize) -> Result<(Tensor, Vec<bool>)> {
        let (h, w) = (self.image1.shape()[1], self.image1.shape()[2]);
        if scale == 0 || h % scale != 0 || w % scale != 0 {
            return Err(Error::contract(format!(
                "to_feature_grid: extent {h}x{w} not divisible by scale {scale}"
            )));
        }
        let (fh, fw) = (h / scale, w / scale);
        let mut flow = vec![0.0; 2 * fh * fw];
        let mut valid = vec![false; fh * fw];
        let src = self.flow_gt.data();
        for row in 0..fh {
            for col in 0..fw {
                let p = (row * scale) * w + col * scale;
                flow[row * fw + col] = src[p] / scale as f64;
                flow[fh * fw + row * fw + col] = src[h * w + p] / scale as f64;
                valid[row * fw + col] = self.valid[p];
            }
        }
        Ok((Tensor::from_vec(&[2, fh, fw], flow)?, valid))
    }
}

/// Generation knobs for one sample.
#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub h: usize,
    pub w: usize,
    /// Stem downscale factor; magnitudes below are in feature pixels
    /// and get multiplied by this when applied to image coordinates.
    pub scale: usize,
    pub easy_magnitude: (f64, f64),
    pub hard_magnitude: (f64, f64),
    pub octaves: usize,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            h: 32,
            w: 64,
            scale: 2,
            easy_magnitude: (0.5, 2.0),
            hard_magnitude: (4.0, 8.0),
            octaves: 3,
        }
    }
}

/// Builds one sample and returns its motion map alongside it.
pub fn make_sample(
    seed: u64,
    difficulty: Difficulty,
    cfg: &GenConfig,
) -> Result<(SynthSample, AffineMap)> {
    let (h, w) = (cfg.h, cfg.w);
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::contract(format!(
            "make_sample: extent {h}x{w} below minimum {MIN_EXTENT}"
        )));
    }
    if cfg.scale == 0 {
        return Err(Error::contract("make_sample: scale must be positive"));
    }
    let image1 = gen_texture(seed, h, w, cfg.octaves, 0)?;
    let mut rng = seeds::stream_rng(seed, Stream::Data, 1);
    let (kind, mag_range) = match difficulty {
        Difficulty::Easy => (FlowKind::Translation, cfg.easy_magnitude),
        Difficulty::Hard => {
            let kind = if rng.gen_bool(0.5) {
                FlowKind::Rotation
            } else {
                FlowKind::Affine
            };
            (kind, cfg.hard_magnitude)
        }
    };
    if !(mag_range.0 <= mag_range.1 && mag_range.0 >= 0.0) {
        return Err(Error::config(format!(
            "make_sample: bad magnitude range {mag_range:?}"
        )));
    }
    let mag_feature = if mag_range.0 == mag_range.1 {
        mag_range.0
    } else {
        rng.gen_range(mag_range.0..mag_range.1)
    };
    let map = gen_flow_map(kind, mag_feature * cfg.scale as f64, &mut rng, h, w)?;
    let sample = sample_from_map(seed, difficulty, &image1, &map)?;
    Ok((sample, map))
}

/// Synthesizes the pair and masks for a given first image and motion map.
pub fn sample_from_map(
    seed: u64,
    difficulty: Difficulty,
    image1: &Tensor,
    map: &AffineMap,
) -> Result<SynthSample> {
    let s = image1.shape();
    if s.len() != 3 {
        return Err(Error::shape("sample_from_map", "[ci, h, w] image", format!("{s:?}")));
    }
    let (ci, h, w) = (s[0], s[1], s[2]);
    let inv = map.inverse()?;
    let mut image2 = vec![0.0; ci * h * w];
    let mut valid = vec![false; h * w];
    let in_frame =
        |p: [f64; 2]| p[0] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] >= 0.0 && p[1] <= (h - 1) as f64;
    for row in 0..h {
        for col in 0..w {
            let x = [col as f64, row as f64];
            let src = inv.apply(x);
            for ch in 0..ci {
                let plane = &image1.data()[ch * h * w..(ch + 1) * h * w];
                image2[ch * h * w + row * w + col] = bilinear_zero(plane, h, w, src[1], src[0]);
            }
            valid[row * w + col] = in_frame(map.apply(x)) && in_frame(src);
        }
    }
    Ok(SynthSample {
        seed,
        difficulty,
        image1: image1.clone(),
        image2: Tensor::from_vec(&[ci, h, w], image2)?,
        flow_gt: flow_field(map, h, w),
        valid,
    })
}

/// A generated set plus its geometry header.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    /// Generates `n_easy` easy then `n_hard` hard samples with
    /// per-sample seeds derived from `seed`.
    pub fn generate(seed: u64, n_easy: usize, n_hard: usize, cfg: &GenConfig) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(n_easy + n_hard);
        for i in 0..n_easy + n_hard {
            let difficulty = if i < n_easy {
                Difficulty::Easy
            } else {
                Difficulty::Hard
            };
            let sample_seed = seeds::derive_seed(seed, Stream::Data, i as u64);
            let (sample, _) = make_sample(sample_seed, difficulty, cfg)?;
            samples.push(sample);
        }
        Ok(Dataset {
            h: cfg.h,
            w: cfg.w,
            ci: 1,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for v in [self.h as u32, self.w as u32, self.ci as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&s.seed.to_le_bytes());
            out.push(s.difficulty.to_byte());
            for t in [&s.image1, &s.image2, &s.flow_gt] {
                for &v in t.data() {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            out.extend(s.valid.iter().map(|&b| b as u8));
        }
        out
    }

    /// Parses and validates the container format.
    pub fn parse(bytes: &[u8]) -> Result<Dataset> {
        let mut cur = Cursor::new("dataset", bytes);
        if cur.take(4)? != MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let count = cur.u32()?;
        let h = cur.u32()?;
        let w = cur.u32()?;
        let ci = cur.u32()?;
        if count > MAX_COUNT {
            return Err(Error::format("dataset", format!("sample count {count} too large")));
        }
        if h < MIN_EXTENT as u32 || h > MAX_EXTENT || w < MIN_EXTENT as u32 || w > MAX_EXTENT {
            return Err(Error::format("dataset", format!("extent {h}x{w} out of range")));
        }
        if ci == 0 || ci > MAX_CI {
            return Err(Error::format("dataset", format!("channel count {ci} out of range")));
        }
        let (h, w, ci) = (h as usize, w as usize, ci as usize);
        let px = h * w;
        let mut samples = Vec::new();
        for i in 0..count {
            let seed = cur.u64()?;
            let difficulty = Difficulty::from_byte(cur.u8()?)?;
            let mut planes = Vec::with_capacity(3);
            for (what, len) in [("image1", ci * px), ("image2", ci * px), ("flow", 2 * px)] {
                let data = cur.f64_vec(len)?;
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::format(
                        "dataset",
                        format!("sample {i}: non-finite value in {what}"),
                    ));
                }
                planes.push(data);
            }
            let flow = planes.pop().expect("three planes");
            let im2 = planes.pop().expect("two planes");
            let im1 = planes.pop().expect("one plane");
            let valid_bytes = cur.take(px)?;
            let mut valid = Vec::with_capacity(px);
            for &b in valid_bytes {
                match b {
                    0 => valid.push(false),
                    1 => valid.push(true),
                    other => {
                        return Err(Error::format(
                            "dataset",
                            format!("sample {i}: valid byte {other}"),
                        ))
                    }
                }
            }
            samples.push(SynthSample {
                seed,
                difficulty,
                image1: Tensor::from_vec(&[ci, h, w], im1)?,
                image2: Tensor::from_vec(&[ci, h, w], im2)?,
                flow_gt: Tensor::from_vec(&[2, h, w], flow)?,
                valid,
            });
        }
        cur.finish()?;
        Ok(Dataset { h, w, ci, samples })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Dataset> {
        Dataset::parse(&std::fs::read(path)?)
    }
}
