use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::Array4;

use super::VideoTensor;
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Sidecar metadata written next to the frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Manifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!("frames={}\nheight={}\nwidth={}\nchannels={}\n", self.frames, self.height, self.width, self.channels)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut fields = [None; 4];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::io(path, format!("malformed manifest line `{line}`")))?;
            let slot = match k.trim() {
                "frames" => 0,
                "height" => 1,
                "width" => 2,
                "channels" => 3,
                other => return Err(Error::io(path, format!("unknown manifest key `{other}`"))),
            };
            let n: usize = v.trim().parse().map_err(|e| Error::io(path, format!("manifest value for `{k}`: {e}")))?;
            fields[slot] = Some(n);
        }
        let get = |i: usize, name: &str| fields[i].ok_or_else(|| Error::io(path, format!("manifest lacks `{name}`")));
        Ok(Self { frames: get(0, "frames")?, height: get(1, "height")?, width: get(2, "width")?, channels: get(3, "channels")? })
    }
}

fn frame_name(i: usize) -> String {
    format!("{:06}.png", i + 1)
}

/// Writes `000001.png`, `000002.png`, ... plus `manifest.txt`, quantising to 8 bits.
pub fn save_frames(video: &VideoTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, c, h, w) = video.dims();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..t {
        let frame = video.frame(i);
        let path = dir.join(frame_name(i));
        let img = if c == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([q(frame[[0, y as usize, x as usize]])])))
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([q(frame[[0, y, x]]), q(frame[[1, y, x]]), q(frame[[2, y, x]])])
            }))
        };
        img.save(&path).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest { frames: t, height: h, width: w, channels: c };
    let mpath = dir.join(MANIFEST_NAME);
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every image in `dir` in lexicographic order.
///
/// Frames must share dimensions; grayscale files produce a one-channel video.
/// When `manifest.txt` is present it must agree with the files found.
pub fn load_frames(dir: impl AsRef<Path>) -> Result<VideoTensor> {
    let dir = dir.as_ref();
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::io(dir, "directory contains no frame images"));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut shape: Option<(u32, u32, usize)> = None;
    for path in &files {
        let img = image::open(path).map_err(|e| Error::io(path, e))?;
        let channels = match img.color().channel_count() {
            1 | 2 => 1,
            _ => 3,
        };
        let dims = (img.width(), img.height(), channels);
        match shape {
            None => shape = Some(dims),
            Some(s) if s != dims => return Err(Error::io(path, format!("frame is {}x{}x{}, expected {}x{}x{}", dims.0, dims.1, dims.2, s.0, s.1, s.2))),
            _ => {}
        }
        frames.push(img);
    }
    let (w, h, c) = shape.expect("at least one frame");
    let (w, h) = (w as usize, h as usize);
    let mut data = Array4::<f32>::zeros((frames.len(), c, h, w));
    for (i, img) in frames.into_iter().enumerate() {
        if c == 1 {
            let g = img.to_luma8();
            for (x, y, p) in g.enumerate_pixels() {
                data[[i, 0, y as usize, x as usize]] = p.0[0] as f32 / 255.0;
            }
        } else {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    data[[i, ch, y as usize, x as usize]] = p.0[ch] as f32 / 255.0;
                }
            }
        }
    }
    let mpath = dir.join(MANIFEST_NAME);
    if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m = Manifest::parse(&text, &mpath)?;
        let found = Manifest { frames: data.dim().0, height: h, width: w, channels: c };
        if m != found {
            return Err(Error::io(&mpath, format!("manifest {m:?} disagrees with frames {found:?}")));
        }
    }
    VideoTensor::new(data)
}
