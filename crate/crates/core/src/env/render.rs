use std::path::{Path, PathBuf};

use rand::Rng;

use super::{BackgroundMode, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from};

pub const CHANNELS: usize = 3;

const TARGET_COLOR: [f32; 3] = [0.0, 0.0, 1.0];
const GOAL_COLOR: [f32; 3] = [1.0, 0.0, 0.0];
const PLAIN_GRAY: f32 = 0.5;

// Non-blue palette shared by all distractor sprites.
const DISTRACTOR_PALETTE: [[f32; 3]; 8] = [
    [1.0, 1.0, 0.0],
    [0.0, 0.8, 0.0],
    [1.0, 0.5, 0.0],
    [1.0, 0.0, 1.0],
    [0.6, 0.4, 0.2],
    [1.0, 0.6, 0.8],
    [0.6, 1.0, 0.2],
    [0.9, 0.9, 0.9],
];

/// An RGB observation, row-major HWC with 8-bit channels. Values map to
/// `[0, 1]` through [`Observation::value`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    size: usize,
    pixels: Vec<u8>,
}

impl Observation {
    pub fn from_pixels(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size * CHANNELS {
            return Err(Error::Shape(format!(
                "observation of side {size} needs {} bytes, got {}",
                size * size * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.size, self.size, CHANNELS]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn value(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.size + col) * CHANNELS + channel] as f32 / 255.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn extend_f32(&self, out: &mut Vec<f32>) {
        out.extend(self.pixels.iter().map(|&p| p as f32 / 255.0));
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.size as u32, self.size as u32, self.pixels.clone())
            .ok_or_else(|| Error::Shape("observation buffer".into()))?;
        img.save(path).map_err(|e| Error::ImageRead {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Floating-point RGB image used for backgrounds and compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub size: usize,
    /// HWC, three channels.
    pub data: Vec<f32>,
}

impl FloatImage {
    fn constant(size: usize, v: f32) -> Self {
        Self {
            size,
            data: vec![v; size * size * CHANNELS],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stripe {
    freq: f64,
    cos: f64,
    sin: f64,
    speed: f64,
    phase: f64,
}

fn stripes(texture_seed: u64) -> [Stripe; 3] {
    let mut rng = rng_from(derive_seed(texture_seed, 0x7e47, 0));
    std::array::from_fn(|_| {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Stripe {
            freq: rng.random_range(1.5..6.0),
            cos: angle.cos(),
            sin: angle.sin(),
            speed: rng.random_range(0.01..0.04),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    })
}

fn texture_frame(size: usize, stripes: &[Stripe; 3], frame_index: u64) -> FloatImage {
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    let t = frame_index as f64;
    for i in 0..size {
        let y = (i as f64 + 0.5) / size as f64;
        for j in 0..size {
            let x = (j as f64 + 0.5) / size as f64;
            let mut v = 0.5;
            for s in stripes {
                let arg = s.freq * (x * s.cos + y * s.sin) - s.speed * t;
                v += 0.15 * (std::f64::consts::TAU * arg + s.phase).sin();
            }
            let v = v.clamp(0.0, 1.0) as f32;
            data.extend([v; CHANNELS]);
        }
    }
    FloatImage { size, data }
}

fn noise_frame(size: usize, texture_seed: u64, frame_index: u64) -> FloatImage {
    let mut rng = rng_from(derive_seed(texture_seed, 0x401e, frame_index));
    let data = (0..size * size * CHANNELS)
        .map(|_| rng.random::<f32>())
        .collect();
    FloatImage { size, data }
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|_| Error::NoBackgroundFrames(dir.into()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoBackgroundFrames(dir.into()));
    }
    Ok(files)
}

fn load_frame(path: &Path, size: usize) -> Result<FloatImage> {
    let img = image::open(path).map_err(|e| Error::ImageRead {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = image::imageops::resize(
        &img.to_luma8(),
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for p in gray.pixels() {
        data.extend([p.0[0] as f32 / 255.0; CHANNELS]);
    }
    Ok(FloatImage { size, data })
}

fn frame_dir(config: &EnvConfig) -> Result<&Path> {
    config
        .frame_directory
        .as_deref()
        .ok_or_else(|| Error::NoBackgroundFrames(PathBuf::new()))
}

/// Background layer at `frame_index`, reading frame files on demand.
pub fn background_frame(config: &EnvConfig, frame_index: u64) -> Result<FloatImage> {
    let size = config.image_size;
    Ok(match config.background_mode {
        BackgroundMode::Plain => FloatImage::constant(size, PLAIN_GRAY),
        BackgroundMode::WhiteNoise => noise_frame(size, config.texture_seed, frame_index),
        BackgroundMode::TexturePlaylist => {
            texture_frame(size, &stripes(config.texture_seed), frame_index)
        }
        BackgroundMode::FrameDirectory => {
            let files = list_frames(frame_dir(config)?)?;
            let k = (frame_index % files.len() as u64) as usize;
            load_frame(&files[k], size)?
        }
    })
}

/// Background generator with any frame files loaded once.
#[derive(Debug, Clone)]
pub enum BackgroundSource {
    Plain,
    WhiteNoise { texture_seed: u64 },
    Texture { stripes: [Stripe; 3] },
    Frames(Vec<FloatImage>),
}

impl BackgroundSource {
    pub fn new(config: &EnvConfig) -> Result<Self> {
        Ok(match config.background_mode {
            BackgroundMode::Plain => Self::Plain,
            BackgroundMode::WhiteNoise => Self::WhiteNoise {
                texture_seed: config.texture_seed,
            },
            BackgroundMode::TexturePlaylist => Self::Texture {
                stripes: stripes(config.texture_seed),
            },
            BackgroundMode::FrameDirectory => {
                let files = list_frames(frame_dir(config)?)?;
                let frames = files
                    .iter()
                    .map(|f| load_frame(f, config.image_size))
                    .collect::<Result<Vec<_>>>()?;
                Self::Frames(frames)
            }
        })
    }

    pub fn frame(&self, size: usize, frame_index: u64) -> FloatImage {
        match self {
            Self::Plain => FloatImage::constant(size, PLAIN_GRAY),
            Self::WhiteNoise { texture_seed } => noise_frame(size, *texture_seed, frame_index),
            Self::Texture { stripes } => texture_frame(size, stripes, frame_index),
            Self::Frames(frames) => frames[(frame_index % frames.len() as u64) as usize].clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Renderer {
    config: EnvConfig,
    background: BackgroundSource,
}

impl Renderer {
    pub fn new(config: &EnvConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            background: BackgroundSource::new(config)?,
        })
    }

    pub fn render(&self, state: &EnvState) -> Result<Observation> {
        let c = &self.config;
        let size = c.image_size;
        let mut canvas = self.background.frame(size, state.background_frame_index);
        let inv = 1.0 / size as f64;
        let h = c.object_half_extent;
        let r2 = c.goal_radius * c.goal_radius;
        let alpha = c.goal_alpha as f32;

        for i in 0..size {
            let y = (i as f64 + 0.5) * inv;
            for j in 0..size {
                let x = (j as f64 + 0.5) * inv;
                let px = &mut canvas.data[(i * size + j) * CHANNELS..][..CHANNELS];
                let (gx, gy) = (x - state.goal_pos[0], y - state.goal_pos[1]);
                if gx * gx + gy * gy <= r2 {
                    for k in 0..CHANNELS {
                        px[k] = alpha * GOAL_COLOR[k] + (1.0 - alpha) * px[k];
                    }
                }
                for (d, pos) in state.distractor_pos.iter().enumerate() {
                    if (x - pos[0]).abs() <= h && (y - pos[1]).abs() <= h {
                        px.copy_from_slice(&DISTRACTOR_PALETTE[d % DISTRACTOR_PALETTE.len()]);
                    }
                }
                let t = state.target_pos;
                if (x - t[0]).abs() <= h && (y - t[1]).abs() <= h {
                    px.copy_from_slice(&TARGET_COLOR);
                }
            }
        }
        let pixels = canvas
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Observation::from_pixels(size, pixels)
    }
}

/// Composites the scene for `state`: background, translucent goal disc,
/// distractor squares, then the target square on top.
pub fn render(state: &EnvState, config: &EnvConfig) -> Result<Observation> {
    Renderer::new(config)?.render(state)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::env::reset_state;

    fn plain(n: usize) -> EnvConfig {
        EnvConfig {
            n_distractors: n,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn plain_background_is_mid_gray() {
        let img = background_frame(&plain(0), 42).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn plain_scene_has_three_colors() {
        let c = plain(0);
        let mut s = reset_state(&c, 0);
        s.target_pos = [0.25, 0.25];
        s.goal_pos = [0.75, 0.7];
        let obs = render(&s, &c).unwrap();
        let colors: BTreeSet<[u8; 3]> = obs
            .pixels()
            .chunks(3)
            .map(|p| [p[0], p[1], p[2]])
            .collect();
        assert_eq!(colors.len(), 3, "{colors:?}");
        assert!(colors.contains(&[0, 0, 255]));
        assert!(colors.contains(&[191, 64, 64]));
    }

    #[test]
    fn white_noise_is_keyed() {
        let c = EnvConfig {
            background_mode: BackgroundMode::WhiteNoise,
            texture_seed: 9,
            ..plain(1)
        };
        assert_eq!(
            background_frame(&c, 3).unwrap(),
            background_frame(&c, 3).unwrap()
        );
        assert_ne!(
            background_frame(&c, 3).unwrap(),
            background_frame(&c, 4).unwrap()
        );
        let s = reset_state(&c, 1);
        assert_eq!(render(&s, &c).unwrap(), render(&s, &c).unwrap());
    }

    #[test]
    fn texture_frames_drift() {
        let c = EnvConfig {
            background_mode: BackgroundMode::TexturePlaylist,
            ..plain(0)
        };
        let a = background_frame(&c, 0).unwrap();
        let b = background_frame(&c, 1).unwrap();
        let differing = a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count();
        assert!(differing * 100 >= a.data.len(), "{differing}");
    }

    #[test]
    fn target_drawn_over_distractor() {
        let c = plain(1);
        let mut s = reset_state(&c, 0);
        s.target_pos = [0.5, 0.5];
        s.distractor_pos[0] = [0.5, 0.5];
        s.goal_pos = [0.1, 0.1];
        let obs = render(&s, &c).unwrap();
        let (row, col) = (16, 16);
        assert_eq!(
            [obs.value(row, col, 0), obs.value(row, col, 1), obs.value(row, col, 2)],
            [0.0, 0.0, 1.0]
        );
        let yellow = obs
            .pixels()
            .chunks(3)
            .filter(|p| p == &[255, 255, 0])
            .count();
        assert_eq!(yellow, 0);
    }

    #[test]
    fn missing_frame_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = EnvConfig {
            background_mode: BackgroundMode::FrameDirectory,
            frame_directory: Some(dir.path().to_path_buf()),
            ..plain(0)
        };
        assert!(matches!(
            Renderer::new(&c),
            Err(Error::NoBackgroundFrames(_))
        ));
        let c = EnvConfig {
            frame_directory: Some(dir.path().join("absent")),
            ..c
        };
        assert!(matches!(
            background_frame(&c, 0),
            Err(Error::NoBackgroundFrames(_))
        ));
    }

    #[test]
    fn frame_directory_cycles_and_grayscales() {
        let dir = tempfile::tempdir().unwrap();
        for (k, color) in [[255u8, 0, 0], [0, 255, 0]].iter().enumerate() {
            let img = image::RgbImage::from_pixel(8, 8, image::Rgb(*color));
            img.save(dir.path().join(format!("f{k}.png"))).unwrap();
        }
        let c = EnvConfig {
            background_mode: BackgroundMode::FrameDirectory,
            frame_directory: Some(dir.path().to_path_buf()),
            image_size: 16,
            ..plain(0)
        };
        let f0 = background_frame(&c, 0).unwrap();
        let f2 = background_frame(&c, 2).unwrap();
        assert_eq!(f0, f2);
        assert_eq!(f0.data.len(), 16 * 16 * 3);
        assert!(f0.data.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        assert_ne!(f0, background_frame(&c, 1).unwrap());
    }

    #[test]
    fn unreadable_frame_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let c = EnvConfig {
            background_mode: BackgroundMode::FrameDirectory,
            frame_directory: Some(dir.path().to_path_buf()),
            ..plain(0)
        };
        let err = background_frame(&c, 0).unwrap_err().to_string();
        assert!(err.contains("broken.png"), "{err}");
    }
}
