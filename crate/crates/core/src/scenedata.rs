//! Synthetic road-scene renderer with exact ground-truth geometry, plus
//! TuSimple-style annotation I/O.
//!
//! Camera convention: x right, y down, z forward; the camera sits `cam_height`
//! meters above a flat ground plane and pitches down by `pitch` radians. Every
//! ground-truth field (masks, lane points, horizon, BEV homography) comes from
//! the same closed-form projection the renderer uses.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{build_ptl_chain, CameraIntrinsics, GeometryError, Homography, KeyPointSet, ViewSpec};
use crate::num::Real;
use crate::warp::FeatureMap;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_LANE: u8 = 1;
pub const CLASS_STOP: u8 = 2;
pub const CLASS_ARROW: u8 = 3;
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("no lane is visible in the rendered scene")]
    DegenerateGeometry,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("malformed record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("line {line}: lane x-list length {got} does not match {expected} h_samples")]
    LengthMismatch { line: usize, expected: usize, got: usize },
    #[error("bad manifest: {0}")]
    BadManifest(String),
}

#[derive(Clone, Debug)]
pub struct SceneConfig<T> {
    pub f: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
    /// Camera height above the ground plane, meters.
    pub cam_height: T,
    /// Downward tilt from the horizontal, radians, in (0, pi/2).
    pub pitch: T,
    pub lane_count: usize,
    /// Lateral spacing between lane centerlines, meters.
    pub lane_spacing: T,
    /// Painted line width, meters.
    pub lane_width: T,
    /// Dash period (painted + gap, meters); 0 renders solid lines only.
    pub dash_period: T,
    /// Painted fraction of the dash period, in (0, 1].
    pub dash_duty: T,
    /// Maximum |quadratic| coefficient of the lane curves (1/m).
    pub curvature: T,
    pub stop_line: bool,
    pub arrow: bool,
    /// Additive uniform image noise amplitude.
    pub noise: T,
    pub seed: u64,
}

impl<T: Real> SceneConfig<T> {
    /// 128x128 desk-scale default scene.
    pub fn toy(seed: u64) -> Self {
        Self {
            f: T::of(120.0),
            cx: T::of(64.0),
            cy: T::of(64.0),
            width: 128,
            height: 128,
            cam_height: T::of(1.5),
            pitch: T::of(0.28),
            lane_count: 3,
            lane_spacing: T::of(3.5),
            lane_width: T::of(0.35),
            dash_period: T::of(4.0),
            dash_duty: T::of(0.6),
            curvature: T::of(0.004),
            stop_line: true,
            arrow: true,
            noise: T::of(0.02),
            seed,
        }
    }

    pub fn view(&self) -> Result<ViewSpec<T>, GeometryError> {
        ViewSpec::new(CameraIntrinsics::new(self.f, self.cx, self.cy)?, self.width, self.height)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.cam_height > T::zero()) {
            return Err(SceneError::InvalidConfig("cam_height must be positive".into()));
        }
        if !(self.pitch > T::zero()) || !(self.pitch < T::of(std::f64::consts::FRAC_PI_2)) {
            return Err(SceneError::InvalidConfig("pitch must lie in (0, pi/2)".into()));
        }
        if self.lane_count == 0 {
            return Err(SceneError::InvalidConfig("lane_count must be at least 1".into()));
        }
        if !(self.lane_width > T::zero()) || !(self.lane_spacing > T::zero()) {
            return Err(SceneError::InvalidConfig("lane_width and lane_spacing must be positive".into()));
        }
        self.view().map_err(|_| SceneError::InvalidConfig("camera intrinsics invalid".into()))?;
        Ok(())
    }

    /// Image row of the horizon (points at infinite ground range).
    pub fn horizon_row(&self) -> T {
        self.cy - self.f * self.pitch.tan()
    }

    /// The horizon pixel pair handed to chain building.
    pub fn horizon_points(&self) -> ((T, T), (T, T)) {
        let v = self.horizon_row();
        ((T::zero(), v), (T::from_u32(self.width - 1).unwrap(), v))
    }

    /// Ground-region border key points: bottom corners plus a pair a quarter
    /// of the way from the horizon down, keeping the BEV viewport bounded.
    pub fn keypoints(&self) -> Vec<(T, T)> {
        let v = self.horizon_row();
        let bottom = T::from_u32(self.height - 1).unwrap();
        let right = T::from_u32(self.width - 1).unwrap();
        let top = v + (bottom - v) * T::of(0.25);
        vec![(T::zero(), bottom), (right, bottom), (T::zero(), top), (right, top)]
    }

    /// Back-projects pixel (u, v) onto the ground plane; `None` at or above
    /// the horizon. Returns (lateral offset, forward range) in meters.
    pub fn pixel_to_ground(&self, u: T, v: T) -> Option<(T, T)> {
        let (sin_t, cos_t) = (self.pitch.sin(), self.pitch.cos());
        let xn = (u - self.cx) / self.f;
        let yn = (v - self.cy) / self.f;
        let y_w = cos_t * yn + sin_t;
        if y_w <= T::of(1e-9) {
            return None;
        }
        let z_w = cos_t - sin_t * yn;
        let t = self.cam_height / y_w;
        Some((t * xn, t * z_w))
    }

    /// Projects ground point (lateral x, range s) to pixel (u, v).
    pub fn ground_to_pixel(&self, x: T, s: T) -> Option<(T, T)> {
        let (sin_t, cos_t) = (self.pitch.sin(), self.pitch.cos());
        let y_c = cos_t * self.cam_height - sin_t * s;
        let z_c = sin_t * self.cam_height + cos_t * s;
        if z_c <= T::of(1e-9) {
            return None;
        }
        Some((self.f * x / z_c + self.cx, self.f * y_c / z_c + self.cy))
    }

    /// Ground range of an image row's ground intersection (`None` above the
    /// horizon).
    pub fn row_to_range(&self, v: T) -> Option<T> {
        self.pixel_to_ground(self.cx, v).map(|(_, s)| s)
    }

    /// TuSimple-style sample rows: every 8th row from 40% image height down.
    pub fn h_samples(&self) -> Vec<u32> {
        let start = (self.height as f64 * 0.4).ceil() as u32;
        (start..self.height).step_by(8).collect()
    }
}

/// One quadratic lane centerline x(s) = offset + slope s + curve s^2 in
/// ground coordinates, plus its dash phase.
#[derive(Clone, Copy, Debug)]
struct Lane<T> {
    offset: T,
    slope: T,
    curve: T,
    dashed: bool,
    dash_phase: T,
}

impl<T: Real> Lane<T> {
    fn x_at(&self, s: T) -> T {
        self.offset + self.slope * s + self.curve * s * s
    }

    fn painted_at(&self, s: T, period: T, duty: T) -> bool {
        if !self.dashed || period <= T::zero() {
            return true;
        }
        let phase = ((s + self.dash_phase) / period).fract();
        let phase = if phase < T::zero() { phase + T::one() } else { phase };
        phase < duty
    }
}

#[derive(Clone, Debug)]
pub struct SceneSample<T> {
    pub image: FeatureMap<T>,
    /// Per-pixel class id, row-major H*W.
    pub semantic: Vec<u8>,
    /// Per-pixel instance id (lane index + 1; 0 = background).
    pub instance: Vec<u8>,
    /// TuSimple-style x per h_sample row, -2.0 where absent.
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<u32>,
    pub horizon: ((T, T), (T, T)),
    /// Ground-truth one-shot homography from the front view to the BEV.
    pub bev: Homography<T>,
}

struct SceneField<T> {
    lanes: Vec<Lane<T>>,
    half_width: T,
    stop: Option<(T, T, T, T)>,  // (s_lo, s_hi, x_lo, x_hi)
    arrow: Option<(T, T, T, T)>, // (x_center, s_lo, s_hi, half_base)
}

impl<T: Real> SceneField<T> {
    /// Class id plus owning lane at a ground point; lanes win over road
    /// furniture so instances stay clean.
    fn classify(&self, cfg: &SceneConfig<T>, gx: T, gs: T) -> (u8, u8) {
        for (i, lane) in self.lanes.iter().enumerate() {
            if (gx - lane.x_at(gs)).abs() < self.half_width
                && lane.painted_at(gs, cfg.dash_period, cfg.dash_duty)
            {
                return (CLASS_LANE, (i + 1) as u8);
            }
        }
        if let Some((s_lo, s_hi, x_lo, x_hi)) = self.stop {
            if gs >= s_lo && gs < s_hi && gx >= x_lo && gx <= x_hi {
                return (CLASS_STOP, 0);
            }
        }
        if let Some((xc, s_lo, s_hi, half_base)) = self.arrow {
            if gs >= s_lo && gs < s_hi {
                // triangle narrowing toward the far end
                let frac = (s_hi - gs) / (s_hi - s_lo);
                if (gx - xc).abs() < half_base * frac {
                    return (CLASS_ARROW, 0);
                }
            }
        }
        (CLASS_BACKGROUND, 0)
    }
}

fn class_color<T: Real>(class: u8) -> [T; 3] {
    match class {
        CLASS_LANE => [T::of(0.95), T::of(0.95), T::of(0.90)],
        CLASS_STOP => [T::of(0.90), T::of(0.25), T::of(0.20)],
        CLASS_ARROW => [T::of(0.25), T::of(0.55), T::of(0.90)],
        _ => [T::of(0.28), T::of(0.28), T::of(0.30)],
    }
}

fn sky_color<T: Real>() -> [T; 3] {
    [T::of(0.55), T::of(0.65), T::of(0.85)]
}

/// Quantize to the 8-bit grid so PNG round trips are lossless.
fn quantize<T: Real>(v: T) -> T {
    let clamped = v.max(T::zero()).min(T::one());
    (clamped * T::of(255.0)).round() / T::of(255.0)
}

pub fn render_scene<T: Real>(cfg: &SceneConfig<T>) -> Result<SceneSample<T>, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let span = T::from_usize(cfg.lane_count - 1).unwrap() * cfg.lane_spacing;
    let slope = T::of(rng.gen_range(-0.05..0.05));
    let curve = if cfg.curvature > T::zero() {
        T::of(rng.gen_range(-1.0..1.0)) * cfg.curvature
    } else {
        T::zero()
    };
    let lanes: Vec<Lane<T>> = (0..cfg.lane_count)
        .map(|i| Lane {
            offset: T::from_usize(i).unwrap() * cfg.lane_spacing - span / T::of(2.0),
            slope,
            curve,
            // interior lanes dashed, boundary lanes solid
            dashed: cfg.lane_count > 2 && i > 0 && i < cfg.lane_count - 1,
            dash_phase: T::of(rng.gen_range(0.0..1.0)) * cfg.dash_period.max(T::one()),
        })
        .collect();
    let far = cfg
        .row_to_range(cfg.horizon_row() + (T::from_u32(cfg.height).unwrap() - cfg.horizon_row()) * T::of(0.1))
        .unwrap_or(T::of(100.0));
    let stop = cfg.stop_line.then(|| {
        let s = T::of(rng.gen_range(0.45..0.75)) * far;
        (s, s + T::of(0.6), -span / T::of(2.0), span / T::of(2.0))
    });
    let arrow = cfg.arrow.then(|| {
        let lane = rng.gen_range(0..cfg.lane_count.max(2) - 1);
        let s = T::of(rng.gen_range(0.15..0.35)) * far;
        let xc = if cfg.lane_count > 1 {
            (lanes[lane].offset + lanes[lane + 1].offset) / T::of(2.0)
        } else {
            lanes[0].offset + cfg.lane_spacing / T::of(2.0)
        };
        (xc, s, s + T::of(2.5), T::of(0.5))
    });
    let field = SceneField { lanes, half_width: cfg.lane_width / T::of(2.0), stop, arrow };

    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let mut image = FeatureMap::zeros(3, h, w);
    let mut semantic = vec![CLASS_BACKGROUND; w * h];
    let mut instance = vec![0u8; w * h];
    // 2x2 supersampling for the image; masks sample the pixel center
    let offsets = [T::of(-0.25), T::of(0.25)];
    for y in 0..h {
        for x in 0..w {
            let (uf, vf) = (T::from_usize(x).unwrap(), T::from_usize(y).unwrap());
            let mut color = [T::zero(); 3];
            for dy in offsets {
                for dx in offsets {
                    let sub: [T; 3] = match cfg.pixel_to_ground(uf + dx, vf + dy) {
                        Some((gx, gs)) => class_color(field.classify(cfg, gx, gs).0),
                        None => sky_color(),
                    };
                    for c in 0..3 {
                        color[c] = color[c] + sub[c] * T::of(0.25);
                    }
                }
            }
            if let Some((gx, gs)) = cfg.pixel_to_ground(uf, vf) {
                let (class, inst) = field.classify(cfg, gx, gs);
                semantic[y * w + x] = class;
                instance[y * w + x] = inst;
            }
            for c in 0..3 {
                let noise = if cfg.noise > T::zero() {
                    T::of(rng.gen_range(-1.0..1.0)) * cfg.noise
                } else {
                    T::zero()
                };
                *image.at_mut(c, y, x) = quantize(color[c] + noise);
            }
        }
    }
    if !semantic.contains(&CLASS_LANE) {
        return Err(SceneError::DegenerateGeometry);
    }

    // lane point lists on the TuSimple sample rows, validated against the
    // instance mask so dash gaps become -2
    let h_samples = cfg.h_samples();
    let mut lane_lists: Vec<Vec<f64>> = Vec::with_capacity(cfg.lane_count);
    for (i, lane) in field.lanes.iter().enumerate() {
        let id = (i + 1) as u8;
        let mut xs = Vec::with_capacity(h_samples.len());
        for &row in &h_samples {
            let v = T::from_u32(row).unwrap();
            let x = cfg
                .row_to_range(v)
                .and_then(|_| {
                    // range along this lane's centerline at the row
                    let (sin_t, cos_t) = (cfg.pitch.sin(), cfg.pitch.cos());
                    let vn = v - cfg.cy;
                    let denom = vn * cos_t + cfg.f * sin_t;
                    if denom <= T::of(1e-9) {
                        return None;
                    }
                    let s = cfg.cam_height * (cfg.f * cos_t - vn * sin_t) / denom;
                    if s <= T::zero() {
                        return None;
                    }
                    cfg.ground_to_pixel(lane.x_at(s), s).map(|(u, _)| u)
                })
                .filter(|&u| u >= T::zero() && u < T::from_u32(cfg.width).unwrap())
                .filter(|&u| {
                    // keep only points the mask supports (1 px slack)
                    let ui = u.round().to_isize().unwrap_or(-1);
                    (-1..=1).any(|d| {
                        let c = ui + d;
                        c >= 0
                            && (c as usize) < w
                            && instance[row as usize * w + c as usize] == id
                    })
                });
            xs.push(x.map_or(-2.0, |u| u.to_f64().unwrap()));
        }
        lane_lists.push(xs);
    }

    let view = cfg.view()?;
    let kps = KeyPointSet::from_pixels(&cfg.keypoints())?;
    let chain = build_ptl_chain(view, cfg.horizon_points(), &kps, 1, &[cfg.width])?;
    Ok(SceneSample {
        image,
        semantic,
        instance,
        lanes: lane_lists,
        h_samples,
        horizon: cfg.horizon_points(),
        bev: chain.integral,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TuSimpleRecord {
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<u32>,
    pub raw_file: String,
}

pub fn write_tusimple(records: &[TuSimpleRecord], path: &Path) -> Result<(), SceneError> {
    let mut out = fs::File::create(path)?;
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| SceneError::MalformedRecord { line: 0, msg: e.to_string() })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_tusimple(path: &Path) -> Result<Vec<TuSimpleRecord>, SceneError> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TuSimpleRecord = serde_json::from_str(&line)
            .map_err(|e| SceneError::MalformedRecord { line: i + 1, msg: e.to_string() })?;
        for lane in &rec.lanes {
            if lane.len() != rec.h_samples.len() {
                return Err(SceneError::LengthMismatch {
                    line: i + 1,
                    expected: rec.h_samples.len(),
                    got: lane.len(),
                });
            }
        }
        records.push(rec);
    }
    Ok(records)
}

fn feature_map_to_rgb<T: Real>(fm: &FeatureMap<T>) -> image::RgbImage {
    let (_, h, w) = fm.shape();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (fm.at(c, y as usize, x as usize).to_f64().unwrap() * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn rgb_to_feature_map<T: Real>(img: &image::RgbImage) -> FeatureMap<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut fm = FeatureMap::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            *fm.at_mut(c, y as usize, x as usize) = T::of(px.0[c] as f64 / 255.0);
        }
    }
    fm
}

fn mask_to_gray(mask: &[u8], w: u32, h: u32) -> image::GrayImage {
    image::GrayImage::from_fn(w, h, |x, y| image::Luma([mask[(y * w + x) as usize]]))
}

/// Mixes a dataset seed with a sample index into an independent stream seed.
fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub cfg: SceneConfig<T>,
    pub samples: Vec<SceneSample<T>>,
}

/// Renders `count` scenes into `dir`: PNG images and masks, a TuSimple
/// JSON-lines annotation file, and a key-value manifest.
pub fn generate_dataset<T: Real>(
    cfg: &SceneConfig<T>,
    count: usize,
    seed: u64,
    dir: &Path,
) -> Result<(), SceneError> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(count);
    for idx in 0..count {
        let mut sample_cfg = cfg.clone();
        sample_cfg.seed = sample_seed(seed, idx as u64);
        let sample = render_scene(&sample_cfg)?;
        let stem = format!("{idx:04}");
        feature_map_to_rgb(&sample.image).save(dir.join(format!("img_{stem}.png")))?;
        mask_to_gray(&sample.semantic, cfg.width, cfg.height)
            .save(dir.join(format!("sem_{stem}.png")))?;
        mask_to_gray(&sample.instance, cfg.width, cfg.height)
            .save(dir.join(format!("inst_{stem}.png")))?;
        records.push(TuSimpleRecord {
            lanes: sample.lanes,
            h_samples: sample.h_samples,
            raw_file: format!("img_{stem}.png"),
        });
    }
    write_tusimple(&records, &dir.join("labels.jsonl"))?;

    let mut manifest = String::new();
    let field = |v: T| v.to_f64().unwrap();
    let _ = writeln!(manifest, "count={count}");
    let _ = writeln!(manifest, "seed={seed}");
    let _ = writeln!(manifest, "width={}", cfg.width);
    let _ = writeln!(manifest, "height={}", cfg.height);
    let _ = writeln!(manifest, "f={}", field(cfg.f));
    let _ = writeln!(manifest, "cx={}", field(cfg.cx));
    let _ = writeln!(manifest, "cy={}", field(cfg.cy));
    let _ = writeln!(manifest, "cam_height={}", field(cfg.cam_height));
    let _ = writeln!(manifest, "pitch={}", field(cfg.pitch));
    let _ = writeln!(manifest, "lane_count={}", cfg.lane_count);
    let _ = writeln!(manifest, "horizon_row={}", field(cfg.horizon_row()));
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn manifest_get<'a>(map: &'a [(String, String)], key: &str) -> Result<&'a str, SceneError> {
    map.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| SceneError::BadManifest(format!("missing key {key}")))
}

fn parse<F: std::str::FromStr>(v: &str, key: &str) -> Result<F, SceneError> {
    v.parse()
        .map_err(|_| SceneError::BadManifest(format!("unparsable value for {key}: {v}")))
}

/// Reloads a generated dataset; images, masks and annotations round-trip
/// losslessly against the in-memory samples.
pub fn load_dataset<T: Real>(dir: &Path) -> Result<Dataset<T>, SceneError> {
    let manifest_raw = fs::read_to_string(dir.join("manifest.txt"))?;
    let kv: Vec<(String, String)> = manifest_raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| SceneError::BadManifest(format!("bad line: {l}")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect::<Result<_, SceneError>>()?;
    let count: usize = parse(manifest_get(&kv, "count")?, "count")?;
    let seed: u64 = parse(manifest_get(&kv, "seed")?, "seed")?;
    let mut cfg = SceneConfig::toy(seed);
    cfg.width = parse(manifest_get(&kv, "width")?, "width")?;
    cfg.height = parse(manifest_get(&kv, "height")?, "height")?;
    cfg.f = T::of(parse(manifest_get(&kv, "f")?, "f")?);
    cfg.cx = T::of(parse(manifest_get(&kv, "cx")?, "cx")?);
    cfg.cy = T::of(parse(manifest_get(&kv, "cy")?, "cy")?);
    cfg.cam_height = T::of(parse(manifest_get(&kv, "cam_height")?, "cam_height")?);
    cfg.pitch = T::of(parse(manifest_get(&kv, "pitch")?, "pitch")?);
    cfg.lane_count = parse(manifest_get(&kv, "lane_count")?, "lane_count")?;

    let records = read_tusimple(&dir.join("labels.jsonl"))?;
    if records.len() != count {
        return Err(SceneError::BadManifest(format!(
            "manifest says {count} samples, labels file has {}",
            records.len()
        )));
    }
    let view = cfg.view()?;
    let kps = KeyPointSet::from_pixels(&cfg.keypoints())?;
    let chain = build_ptl_chain(view, cfg.horizon_points(), &kps, 1, &[cfg.width])?;

    let load_mask = |path: PathBuf| -> Result<Vec<u8>, SceneError> {
        let img = image::open(path)?.into_luma8();
        Ok(img.into_raw())
    };
    let mut samples = Vec::with_capacity(count);
    for (idx, rec) in records.iter().enumerate() {
        let stem = format!("{idx:04}");
        let rgb = image::open(dir.join(&rec.raw_file))?.into_rgb8();
        samples.push(SceneSample {
            image: rgb_to_feature_map(&rgb),
            semantic: load_mask(dir.join(format!("sem_{stem}.png")))?,
            instance: load_mask(dir.join(format!("inst_{stem}.png")))?,
            lanes: rec.lanes.clone(),
            h_samples: rec.h_samples.clone(),
            horizon: cfg.horizon_points(),
            bev: chain.integral,
        });
    }
    Ok(Dataset { cfg, samples })
}

/// Saves a feature map as an RGB PNG (used by the CLI's warp/viz commands).
pub fn save_feature_map_png<T: Real>(fm: &FeatureMap<T>, path: &Path) -> Result<(), SceneError> {
    feature_map_to_rgb(fm).save(path)?;
    Ok(())
}

/// Loads an RGB PNG as a [0,1] feature map.
pub fn load_feature_map_png<T: Real>(path: &Path) -> Result<FeatureMap<T>, SceneError> {
    Ok(rgb_to_feature_map(&image::open(path)?.into_rgb8()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig<f64> {
        SceneConfig::toy(42)
    }

    #[test]
    fn horizon_matches_far_point_projection() {
        // oracle: project a ground point a million meters out
        let c = cfg();
        let (_, v) = c.ground_to_pixel(0.0, 1e6).unwrap();
        assert!((v - c.horizon_row()).abs() <= 0.5, "{v} vs {}", c.horizon_row());
    }

    #[test]
    fn backprojection_roundtrip() {
        let c = cfg();
        for &(x, s) in &[(0.0, 5.0), (-3.0, 12.0), (4.5, 40.0), (1.0, 2.5)] {
            let (u, v) = c.ground_to_pixel(x, s).unwrap();
            let (gx, gs) = c.pixel_to_ground(u, v).unwrap();
            assert!((gx - x).abs() < 1e-9 && (gs - s).abs() < 1e-9);
        }
    }

    #[test]
    fn lane_pixels_lie_on_analytic_curves() {
        // straight lanes, zero noise: back-projected lane-mask pixels must
        // sit within the painted half width (+2 cm pixel-center slack) of a
        // lane centerline
        let mut c = cfg();
        c.curvature = 0.0;
        c.noise = 0.0;
        c.lane_count = 2;
        c.stop_line = false;
        c.arrow = false;
        let sample = render_scene(&c).unwrap();
        // recover the shared slope from the scene rng stream
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let slope: f64 = rng.gen_range(-0.05..0.05);
        let offsets = [-c.lane_spacing / 2.0, c.lane_spacing / 2.0];
        let w = c.width as usize;
        let mut checked = 0;
        for y in 0..c.height as usize {
            for x in 0..w {
                if sample.semantic[y * w + x] != CLASS_LANE {
                    continue;
                }
                let (gx, gs) = c.pixel_to_ground(x as f64, y as f64).unwrap();
                let dist = offsets
                    .iter()
                    .map(|o| (gx - (o + slope * gs)).abs())
                    .fold(f64::INFINITY, f64::min);
                assert!(
                    dist <= c.lane_width / 2.0 + 0.02,
                    "lane pixel ({x},{y}) is {dist} m off the nearest centerline"
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "too few lane pixels to be meaningful: {checked}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let c = cfg();
        let a = render_scene(&c).unwrap();
        let b = render_scene(&c).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.semantic, b.semantic);
        assert_eq!(a.instance, b.instance);
        assert_eq!(a.lanes, b.lanes);
    }

    #[test]
    fn lane_points_touch_their_masks() {
        let c = cfg();
        let sample = render_scene(&c).unwrap();
        let w = c.width as usize;
        let mut present = 0;
        for (li, xs) in sample.lanes.iter().enumerate() {
            let id = (li + 1) as u8;
            for (xi, &x) in xs.iter().enumerate() {
                if x == -2.0 {
                    continue;
                }
                present += 1;
                let row = sample.h_samples[xi] as usize;
                let col = x.round() as isize;
                let hit = (-1..=1).any(|d| {
                    let cc = col + d;
                    cc >= 0 && (cc as usize) < w && sample.instance[row * w + cc as usize] == id
                });
                assert!(hit, "lane {li} point ({x}, row {row}) misses its mask");
            }
        }
        assert!(present > 10, "almost all lane points absent: {present}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg();
        c.cam_height = 0.0;
        assert!(matches!(c.validate(), Err(SceneError::InvalidConfig(_))));
        let mut c = cfg();
        c.pitch = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lane_count = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tusimple_roundtrip_preserves_null_markers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let records = vec![TuSimpleRecord {
            lanes: vec![vec![10.0, -2.0, 30.5], vec![-2.0, -2.0, -2.0]],
            h_samples: vec![80, 88, 96],
            raw_file: "img_0000.png".into(),
        }];
        write_tusimple(&records, &path).unwrap();
        let back = read_tusimple(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn tusimple_hand_written_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        fs::write(
            &path,
            "{\"lanes\": [[12.5, 14.0]], \"h_samples\": [100, 108], \"raw_file\": \"a.png\"}\n",
        )
        .unwrap();
        let recs = read_tusimple(&path).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].lanes, vec![vec![12.5, 14.0]]);
        assert_eq!(recs[0].h_samples, vec![100, 108]);
        assert_eq!(recs[0].raw_file, "a.png");
    }

    #[test]
    fn tusimple_error_reporting() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.jsonl");
        fs::write(&bad, "{}\n{not json}\n").unwrap();
        match read_tusimple(&bad) {
            Err(SceneError::MalformedRecord { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
        let mismatch = dir.path().join("mismatch.jsonl");
        fs::write(
            &mismatch,
            "{\"lanes\": [[1.0]], \"h_samples\": [10, 20], \"raw_file\": \"a.png\"}\n",
        )
        .unwrap();
        assert!(matches!(
            read_tusimple(&mismatch),
            Err(SceneError::LengthMismatch { line: 1, expected: 2, got: 1 })
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg(), 0, 1, dir.path()).unwrap();
        let ds = load_dataset::<f64>(dir.path()).unwrap();
        assert!(ds.samples.is_empty());
    }

    #[test]
    fn dataset_round_trips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        generate_dataset(&c, 3, 7, dir.path()).unwrap();
        let ds = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 3);
        for (idx, loaded) in ds.samples.iter().enumerate() {
            let mut sc = c.clone();
            sc.seed = sample_seed(7, idx as u64);
            let fresh = render_scene(&sc).unwrap();
            assert_eq!(loaded.image.data(), fresh.image.data(), "image {idx}");
            assert_eq!(loaded.semantic, fresh.semantic);
            assert_eq!(loaded.instance, fresh.instance);
            assert_eq!(loaded.lanes, fresh.lanes);
        }
    }

    #[test]
    fn bev_warp_makes_lanes_parallel() {
        // straight lanes map to near-vertical, constant-width stripes in the
        // BEV: compare the lane-centerline pixel columns at two ranges
        let mut c = cfg();
        c.curvature = 0.0;
        c.noise = 0.0;
        c.stop_line = false;
        c.arrow = false;
        let sample = render_scene(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let slope: f64 = rng.gen_range(-0.05..0.05);
        let bev_col = |offset: f64, s: f64| {
            let (u, v) = c.ground_to_pixel(offset + slope * s, s).unwrap();
            sample.bev.apply(u, v).unwrap().0
        };
        // inter-lane pixel gap in the BEV stays constant across ranges
        let gap_at = |s: f64| bev_col(0.0, s) - bev_col(-c.lane_spacing, s);
        let reference = gap_at(4.0);
        for s in [6.0, 10.0, 20.0, 40.0] {
            let gap = gap_at(s);
            assert!(
                (gap - reference).abs() <= 1.0,
                "BEV lane gap {gap} at range {s} vs {reference} at 4 m"
            );
        }
    }
}
