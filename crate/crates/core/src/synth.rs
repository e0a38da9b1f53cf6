//! Procedural two-domain fundus-like dataset.
//!
//! Geometry (disc and cup ellipses, vessel strokes) is drawn from RNG
//! streams keyed by `(seed, index)` alone, and the mask is rendered from the
//! geometry before any colour is applied. Photometric fields of a
//! [`DomainSpec`] therefore never change a label.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{IntTensor, Tensor};
use crate::seeds::{self, tag};

pub type Rgb = [f64; 3];

/// Background, disc and cup colours of the unshifted domain.
pub const SOURCE_PALETTE: [Rgb; 3] = [[0.45, 0.18, 0.08], [0.80, 0.52, 0.30], [0.95, 0.80, 0.60]];
/// Palette reached at shift magnitude 1.
pub const TARGET_PALETTE: [Rgb; 3] = [[0.30, 0.26, 0.24], [0.62, 0.56, 0.48], [0.84, 0.80, 0.72]];
pub const TARGET_GAMMA: f64 = 1.4;
pub const TARGET_NOISE: f64 = 0.02;
pub const DEFAULT_SHIFT: f64 = 1.0;

/// Mask PNG grey levels for classes 0, 1, 2.
pub const MASK_LEVELS: [u8; 3] = [0, 128, 255];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// RGB means for background, disc and cup.
    pub base_palette: [Rgb; 3],
    pub intensity_gain: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub vessel_density: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn source(seed: u64) -> Self {
        DomainSpec {
            base_palette: SOURCE_PALETTE,
            intensity_gain: 1.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            vessel_density: 0.5,
            seed,
        }
    }

    /// The source domain moved toward the target by `shift`: palette,
    /// gamma and noise are interpolated linearly. `shift = 0` yields the
    /// source distribution.
    pub fn target(seed: u64, shift: f64) -> Self {
        let lerp = |a: f64, b: f64| a + shift * (b - a);
        let mut palette = SOURCE_PALETTE;
        for (row, tgt) in palette.iter_mut().zip(TARGET_PALETTE) {
            for (v, t) in row.iter_mut().zip(tgt) {
                *v = lerp(*v, t);
            }
        }
        DomainSpec {
            base_palette: palette,
            gamma: lerp(1.0, TARGET_GAMMA),
            noise_sigma: lerp(0.0, TARGET_NOISE),
            ..Self::source(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain spec: {m}")));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.intensity_gain > 0.0 && self.intensity_gain.is_finite()) {
            return bad(format!("intensity_gain must be positive, got {}", self.intensity_gain));
        }
        if !(0.0..=1.0).contains(&self.vessel_density) {
            return bad(format!("vessel_density must be in [0,1], got {}", self.vessel_density));
        }
        if self.base_palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("palette channels must be in [0,1]".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        format!("{:x}", Sha256::digest(json))
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[S, S]` with 0 background, 1 disc rim, 2 cup.
    pub mask: IntTensor,
    pub true_cdr: f64,
}

/// Axis-aligned ellipse in pixel coordinates; pixel `(x, y)` is inside when
/// its centre `(x + ½, y + ½)` satisfies the ellipse inequality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Normalised radius of the pixel centre; `<= 1` inside.
    pub fn radius_at(&self, x: usize, y: usize) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Quadratic Bézier vessel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stroke {
    pub points: [(f64, f64); 3],
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub disc: Ellipse,
    pub cup: Ellipse,
}

/// Draws disc and cup ellipses. The vertical radius ratio is uniform in
/// `[0.3, 0.8]` and the cup centre is jittered inside the disc.
pub fn sample_geometry(seed: u64, index: u64, size: usize) -> Geometry {
    let mut rng = seeds::rng(&[seed, index, tag::GEOMETRY]);
    let s = size as f64;
    let ry = s * rng.random_range(0.25..0.34);
    let rx = ry * rng.random_range(0.85..1.15);
    let cx = s / 2.0 + s * rng.random_range(-0.05..0.05);
    let cy = s / 2.0 + s * rng.random_range(-0.05..0.05);
    let disc = Ellipse { cx, cy, rx, ry };

    let ratio = rng.random_range(0.3..0.8);
    let cup_ry = ratio * ry;
    let cup_rx = (ratio * rng.random_range(0.85..1.1)).min(0.9) * rx;
    let jitter = 0.3;
    let cup = Ellipse {
        cx: cx + jitter * (rx - cup_rx) * rng.random_range(-1.0..1.0),
        cy: cy + jitter * (ry - cup_ry) * rng.random_range(-1.0..1.0),
        rx: cup_rx,
        ry: cup_ry,
    };
    Geometry { disc, cup }
}

/// Vessel strokes radiating from the disc toward the border; the count grows
/// with `density`.
pub fn sample_vessels(seed: u64, index: u64, size: usize, disc: &Ellipse, density: f64) -> Vec<Stroke> {
    let mut rng = seeds::rng(&[seed, index, tag::VESSELS]);
    let s = size as f64;
    let count = (density * 10.0).round() as usize;
    (0..count)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let start = (
                disc.cx + 0.3 * disc.rx * angle.cos(),
                disc.cy + 0.3 * disc.ry * angle.sin(),
            );
            let reach = s * rng.random_range(0.55..0.8);
            let end = (disc.cx + reach * angle.cos(), disc.cy + reach * angle.sin());
            let bend = s * rng.random_range(-0.15..0.15);
            let mid = (
                (start.0 + end.0) / 2.0 - bend * angle.sin(),
                (start.1 + end.1) / 2.0 + bend * angle.cos(),
            );
            Stroke {
                points: [start, mid, end],
                width: s / 64.0 * rng.random_range(0.8..1.8),
            }
        })
        .collect()
}

/// Class map by pixel-centre test: cup pixels are those inside both ellipses.
pub fn render_mask(geometry: &Geometry, size: usize) -> IntTensor {
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let in_disc = geometry.disc.contains(x, y);
            data.push(match (in_disc, in_disc && geometry.cup.contains(x, y)) {
                (_, true) => 2,
                (true, false) => 1,
                _ => 0,
            });
        }
    }
    IntTensor::new([size, size], data).expect("square mask")
}

/// Soft coverage of an ellipse with a ~1.5 pixel transition at its boundary.
fn coverage(e: &Ellipse, x: usize, y: usize) -> f64 {
    let width = 1.5 / e.rx.min(e.ry);
    ((1.0 - e.radius_at(x, y)) / width + 0.5).clamp(0.0, 1.0)
}

fn vessel_alpha(strokes: &[Stroke], size: usize) -> Vec<f64> {
    let mut alpha = vec![0.0f64; size * size];
    for st in strokes {
        let [p0, p1, p2] = st.points;
        let steps = 4 * size;
        let half = st.width / 2.0;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let u = 1.0 - t;
            let px = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let py = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let taper = 1.0 - 0.5 * t;
            let lo_x = (px - half - 1.0).floor().max(0.0) as usize;
            let lo_y = (py - half - 1.0).floor().max(0.0) as usize;
            let hi_x = ((px + half + 1.0).ceil().max(0.0) as usize).min(size);
            let hi_y = ((py + half + 1.0).ceil().max(0.0) as usize).min(size);
            for y in lo_y..hi_y {
                for x in lo_x..hi_x {
                    let d = ((x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2)).sqrt();
                    let a = ((half * taper + 0.5 - d).clamp(0.0, 1.0)) * taper;
                    let slot = &mut alpha[y * size + x];
                    *slot = slot.max(a);
                }
            }
        }
    }
    alpha
}

/// Renders sample `index` of the domain.
pub fn generate_one(spec: &DomainSpec, index: u64, size: usize) -> Result<Sample> {
    spec.validate()?;
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::InvalidArgument(format!(
            "image size must be a positive multiple of 32, got {size}"
        )));
    }
    let geometry = sample_geometry(spec.seed, index, size);
    let mask = render_mask(&geometry, size);
    let true_cdr = metrics::cdr(&mask).0;
    let vessels = sample_vessels(spec.seed, index, size, &geometry.disc, spec.vessel_density);
    let vessel = vessel_alpha(&vessels, size);

    let mut rng = seeds::rng(&[spec.seed, index, tag::PHOTOMETRY]);
    let brightness = rng.random_range(0.92..1.08);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let [bg, disc, cup] = spec.base_palette;
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    let centre = size as f64 / 2.0;
    for y in 0..size {
        for x in 0..size {
            let a_disc = coverage(&geometry.disc, x, y);
            let a_cup = a_disc * coverage(&geometry.cup, x, y);
            let r = ((x as f64 + 0.5 - centre).powi(2) + (y as f64 + 0.5 - centre).powi(2)).sqrt();
            let illum = (1.0 - 0.3 * (r / (0.75 * size as f64)).powi(2)).max(0.5) * brightness;
            let shade = 1.0 - 0.45 * vessel[y * size + x];
            for c in 0..3 {
                let base = bg[c] * (1.0 - a_disc) + disc[c] * (a_disc - a_cup) + cup[c] * a_cup;
                let v = (base * illum * shade * spec.intensity_gain).clamp(0.0, 1.0);
                let mut v = v.powf(spec.gamma);
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data[c * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Sample {
        image: Tensor::new([3, size, size], data)?,
        mask,
        true_cdr,
    })
}

/// Samples `start..start + n` of the domain.
pub fn generate_range(spec: &DomainSpec, start: u64, n: usize, size: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot generate zero samples".into()));
    }
    (start..start + n as u64).map(|i| generate_one(spec, i, size)).collect()
}

pub fn generate(spec: &DomainSpec, n: usize, size: usize) -> Result<Vec<Sample>> {
    generate_range(spec, 0, n, size)
}

/// Ranges of the photometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma_max: f64,
    pub gain: (f64, f64),
    pub offset: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma_max: 0.05,
            gain: (0.9, 1.1),
            offset: (-0.05, 0.05),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            noise_sigma_max: 0.0,
            gain: (1.0, 1.0),
            offset: (0.0, 0.0),
        }
    }
}

/// `clamp(gain·x + offset + noise)`, with gain, offset and noise level drawn
/// once per call from `seed`.
pub fn augment(image: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    augment_with(image, seed, &AugmentConfig::default())
}

pub fn augment_with(image: &Tensor<f32>, seed: u64, cfg: &AugmentConfig) -> Tensor<f32> {
    let mut rng = seeds::rng(&[seed]);
    let gain = rng.random_range(cfg.gain.0..=cfg.gain.1) as f32;
    let offset = rng.random_range(cfg.offset.0..=cfg.offset.1) as f32;
    let sigma = rng.random_range(0.0..=cfg.noise_sigma_max);
    let mut out = image.map(|v| v * gain + offset);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for v in out.data_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Augments each item of a `[N,3,H,W]` batch with its own derived seed.
pub fn augment_batch(images: &Tensor<f32>, seed: u64, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    let (n, _, _, _) = images.dims4("augment_batch")?;
    let items = (0..n)
        .map(|i| {
            let item = images.batch_item(i)?;
            Ok(augment_with(&item, seeds::derive(&[seed, i as u64]), cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut shape = images.shape().to_vec();
    shape[0] = n;
    let data: Vec<f32> = items.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

// ---------------------------------------------------------------------------
// Files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub true_cdr: f64,
    pub spec_hash: String,
}

fn image_path(stem: &Path) -> PathBuf {
    stem.with_file_name(format!("{}.png", file_name(stem)))
}

fn mask_path(stem: &Path) -> PathBuf {
    stem.with_file_name(format!("{}_mask.png", file_name(stem)))
}

fn meta_path(stem: &Path) -> PathBuf {
    stem.with_file_name(format!("{}.json", file_name(stem)))
}

fn file_name(stem: &Path) -> String {
    stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(data).map_err(fail)?;
    writer.finish().map_err(fail)
}

fn read_png(path: &Path, color: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fail)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    if info.color_type != color || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("expected 8-bit {color:?}, found {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

/// 8-bit RGB PNG of a `[3,H,W]` image in `[0,1]`.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape("save_image", format!("expected [3,H,W], got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::shape("save_image", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            rgb.push((image.data()[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &rgb)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, rgb) = read_png(path, png::ColorType::Rgb)?;
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = rgb[3 * p + ch] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Single-channel PNG with grey levels [`MASK_LEVELS`].
pub fn save_mask(path: &Path, mask: &IntTensor) -> Result<()> {
    let (h, w) = mask.hw();
    let grey: Vec<u8> = mask
        .data()
        .iter()
        .map(|&c| MASK_LEVELS.get(c as usize).copied())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InvalidArgument("mask class outside {0,1,2}".into()))?;
    write_png(path, w, h, png::ColorType::Grayscale, &grey)
}

pub fn load_mask(path: &Path) -> Result<IntTensor> {
    let (w, h, grey) = read_png(path, png::ColorType::Grayscale)?;
    let classes = grey
        .iter()
        .map(|&v| {
            MASK_LEVELS
                .iter()
                .position(|&l| l == v)
                .map(|c| c as u8)
                .ok_or_else(|| Error::format(path, format!("unknown mask value {v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    IntTensor::new([h, w], classes)
}

/// Writes `{stem}.png`, `{stem}_mask.png` and the `{stem}.json` sidecar.
pub fn save_sample(stem: &Path, sample: &Sample, spec: &DomainSpec) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_image(&image_path(stem), &sample.image)?;
    save_mask(&mask_path(stem), &sample.mask)?;
    let meta = SampleMeta {
        true_cdr: sample.true_cdr,
        spec_hash: spec.hash(),
    };
    let path = meta_path(stem);
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_sample(stem: &Path) -> Result<(Sample, SampleMeta)> {
    let image = load_image(&image_path(stem))?;
    let mask = load_mask(&mask_path(stem))?;
    if image.shape()[1..] != *mask.shape() {
        return Err(Error::format(stem, "image and mask sizes differ"));
    }
    let path = meta_path(stem);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SampleMeta = serde_json::from_slice(&text)?;
    Ok((
        Sample {
            image,
            mask,
            true_cdr: meta.true_cdr,
        },
        meta,
    ))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Domain {
    fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub domain: Domain,
    /// Sample stem relative to the manifest's directory.
    pub stem: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# cada-manifest v1: <split> <domain> <stem>";

/// Line-oriented listing of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {}\n",
                e.split.as_str(),
                e.domain.as_str(),
                e.stem.display()
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (no, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::format(path, format!("line {}: `{line}`", no + 1));
            let mut parts = line.splitn(3, ' ');
            let split = match parts.next() {
                Some("train") => Split::Train,
                Some("test") => Split::Test,
                _ => return Err(bad()),
            };
            let domain = match parts.next() {
                Some("source") => Domain::Source,
                Some("target") => Domain::Target,
                _ => return Err(bad()),
            };
            let stem = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?;
            entries.push(ManifestEntry {
                split,
                domain,
                stem: PathBuf::from(stem),
            });
        }
        Ok(Manifest { entries })
    }
}

/// Sizes and seeds of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Domain-shift magnitude; 0 makes both domains identically distributed.
    pub shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            n_source: 200,
            n_target: 200,
            n_test: 60,
            seed: 0,
            shift: DEFAULT_SHIFT,
        }
    }
}

impl SynthConfig {
    pub fn source_spec(&self) -> DomainSpec {
        DomainSpec::source(seeds::derive(&[self.seed, 0]))
    }

    pub fn target_spec(&self) -> DomainSpec {
        DomainSpec::target(seeds::derive(&[self.seed, 1]), self.shift)
    }
}

/// In-memory splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_test: Vec<Sample>,
}

impl Dataset {
    /// Target test samples follow the target training samples in index order,
    /// so the two splits never share a geometry.
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let (src, tgt) = (cfg.source_spec(), cfg.target_spec());
        let size = cfg.image_size;
        Ok(Dataset {
            source_train: generate(&src, cfg.n_source, size)?,
            target_train: generate(&tgt, cfg.n_target, size)?,
            target_test: generate_range(&tgt, cfg.n_target as u64, cfg.n_test, size)?,
        })
    }

    /// Writes every sample, `domains.json` and the manifest under `dir`.
    pub fn write(&self, dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
        let (src, tgt) = (cfg.source_spec(), cfg.target_spec());
        let mut manifest = Manifest::default();
        let groups = [
            (Split::Train, Domain::Source, &self.source_train, &src),
            (Split::Train, Domain::Target, &self.target_train, &tgt),
            (Split::Test, Domain::Target, &self.target_test, &tgt),
        ];
        for (split, domain, samples, spec) in groups {
            for (i, s) in samples.iter().enumerate() {
                let stem = PathBuf::from(domain.as_str()).join(format!("{}_{i:05}", split.as_str()));
                save_sample(&dir.join(&stem), s, spec)?;
                manifest.entries.push(ManifestEntry { split, domain, stem });
            }
        }
        let domains = serde_json::json!({ "config": cfg, "source": src, "target": tgt });
        let path = dir.join("domains.json");
        fs::write(&path, serde_json::to_vec_pretty(&domains)?).map_err(|e| Error::io(&path, e))?;
        manifest.write(&dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let mut ds = Dataset {
            source_train: vec![],
            target_train: vec![],
            target_test: vec![],
        };
        for e in manifest.entries {
            let (sample, _) = load_sample(&dir.join(&e.stem))?;
            match (e.split, e.domain) {
                (Split::Train, Domain::Source) => ds.source_train.push(sample),
                (Split::Train, Domain::Target) => ds.target_train.push(sample),
                (Split::Test, Domain::Target) => ds.target_test.push(sample),
                (Split::Test, Domain::Source) => {}
            }
        }
        if ds.source_train.is_empty() || ds.target_test.is_empty() {
            return Err(Error::format(dir, "dataset needs source/train and target/test samples"));
        }
        Ok(ds)
    }
}

/// Stacks samples into `[B,3,H,W]` images and `[B,H,W]` labels.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, IntTensor)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, IntTensor::stack(&masks)?))
}

/// A labeled source batch and an unlabeled target batch.
pub struct BatchPair {
    pub source_images: Tensor<f32>,
    pub source_masks: IntTensor,
    pub target_images: Option<Tensor<f32>>,
}

/// Paired minibatch sampling with an independent shuffle per domain and
/// epoch. Each epoch visits every source sample at most once; the target
/// permutation wraps around when it runs short.
pub struct Loaders<'a> {
    source: &'a [Sample],
    target: &'a [Sample],
    batch: usize,
    seed: u64,
}

pub const DEFAULT_BATCH: usize = 4;

pub fn make_loaders<'a>(
    source: &'a [Sample],
    target: &'a [Sample],
    batch: usize,
    seed: u64,
) -> Result<Loaders<'a>> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("empty target dataset".into()));
    }
    source_only_loader(source, batch, seed).map(|l| Loaders { target, ..l })
}

/// Loader that yields no target batches.
pub fn source_only_loader(source: &[Sample], batch: usize, seed: u64) -> Result<Loaders<'_>> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty source dataset".into()));
    }
    if batch == 0 || batch > source.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} must be in 1..={}",
            source.len()
        )));
    }
    Ok(Loaders {
        source,
        target: &[],
        batch,
        seed,
    })
}

fn permutation(n: usize, seed: u64, epoch: u64, stream: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds::rng(&[seed, epoch, stream]));
    idx
}

impl<'a> Loaders<'a> {
    pub fn batches_per_epoch(&self) -> usize {
        self.source.len() / self.batch
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Index pairs for one epoch.
    pub fn plan(&self, epoch: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
        let src = permutation(self.source.len(), self.seed, epoch, tag::SHUFFLE_SOURCE);
        let tgt = if self.target.is_empty() {
            vec![]
        } else {
            permutation(self.target.len(), self.seed, epoch, tag::SHUFFLE_TARGET)
        };
        (0..self.batches_per_epoch())
            .map(|b| {
                let s = src[b * self.batch..(b + 1) * self.batch].to_vec();
                let t = if tgt.is_empty() {
                    vec![]
                } else {
                    (0..self.batch).map(|j| tgt[(b * self.batch + j) % tgt.len()]).collect()
                };
                (s, t)
            })
            .collect()
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<BatchPair>> + 'a {
        let (source, target) = (self.source, self.target);
        self.plan(epoch).into_iter().map(move |(s, t)| {
            let picked: Vec<_> = s.iter().map(|&i| &source[i]).collect();
            let (source_images, source_masks) = collate(&picked)?;
            let target_images = if t.is_empty() {
                None
            } else {
                let picked: Vec<_> = t.iter().map(|&i| &target[i]).collect();
                Some(collate(&picked)?.0)
            };
            Ok(BatchPair {
                source_images,
                source_masks,
                target_images,
            })
        })
    }
}
