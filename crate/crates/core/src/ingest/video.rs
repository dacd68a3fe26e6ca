//! Frame sampling, resizing and pixel normalisation.

use std::path::Path;

use crate::config::StreamSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One RGB frame with byte-scale intensities (0..=255) stored as reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "degenerate {height}x{width} frame with {} values",
                data.len()
            )));
        }
        Ok(Frame {
            height,
            width,
            data,
        })
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Frame::new(height, width, bytes.iter().map(|b| *b as f64).collect())
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Frame {
            height,
            width,
            data,
        }
    }
}

/// A decoded video: the full frame stack before sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideo {
    pub frames: Vec<Frame>,
}

/// A sampled, resized and normalised clip, `T×H×W×3` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub source_frame_count: usize,
}

impl VideoClip {
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }
}

/// Evenly spaced frame indices: `round(j·(F−1)/(T−1))`, or the middle frame
/// when `T = 1`. Rounds half up.
pub fn sample_frames(source_frames: usize, target: usize) -> Result<Vec<usize>> {
    if source_frames == 0 {
        return Err(Error::Input("cannot sample from an empty video".into()));
    }
    if target == 0 {
        return Err(Error::Input("target frame count must be at least 1".into()));
    }
    let last = source_frames - 1;
    if target == 1 {
        return Ok(vec![(last + 1) / 2]);
    }
    let den = target - 1;
    Ok((0..target)
        .map(|j| (2 * j * last + den) / (2 * den))
        .collect())
}

/// Bilinear resize (half-pixel centres, edge clamped) followed by
/// `v / 127.5 − 1`.
pub fn preprocess(frame: &Frame, height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(Error::Input(format!("target size {height}x{width}")));
    }
    if frame.height == 0 || frame.width == 0 || frame.data.len() != frame.height * frame.width * 3
    {
        return Err(Error::Input("degenerate source frame".into()));
    }
    let sy = frame.height as f64 / height as f64;
    let sx = frame.width as f64 / width as f64;
    let src = |y: usize, x: usize, c: usize| frame.data[(y * frame.width + x) * 3 + c];
    let mut out = Vec::with_capacity(height * width * 3);
    for i in 0..height {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (frame.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(frame.height - 1);
        let wy = fy - y0 as f64;
        for j in 0..width {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (frame.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(frame.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let top = src(y0, x0, c) * (1.0 - wx) + src(y0, x1, c) * wx;
                let bot = src(y1, x0, c) * (1.0 - wx) + src(y1, x1, c) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                out.push((v / 127.5 - 1.0).clamp(-1.0, 1.0));
            }
        }
    }
    Tensor::new(&[height, width, 3], out)
}

/// Samples and preprocesses a raw video to one stream's geometry.
pub fn clip_for_stream(video: &RawVideo, spec: &StreamSpec) -> Result<VideoClip> {
    let idx = sample_frames(video.frames.len(), spec.frames)?;
    let mut data = Vec::with_capacity(spec.frames * spec.height * spec.width * 3);
    for i in idx {
        data.extend(preprocess(&video.frames[i], spec.height, spec.width)?.into_data());
    }
    Ok(VideoClip {
        frames: Tensor::new(&[spec.frames, spec.height, spec.width, 3], data)?,
        source_frame_count: video.frames.len(),
    })
}

/// Reads a raw tensor file: a header line `T H W 3` followed by
/// whitespace-separated byte-scale reals.
pub fn read_tensor_video(path: &Path) -> Result<RawVideo> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty tensor file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|d| d.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, 1, "header must be `T H W 3`"))?;
    if dims.len() != 4 || dims[3] != 3 || dims[..3].contains(&0) {
        return Err(Error::parse(path, 1, "header must be `T H W 3`"));
    }
    let values: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|v| v.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, 2, "non-numeric pixel value"))?;
    let per_frame = dims[1] * dims[2] * 3;
    if values.len() != dims[0] * per_frame {
        return Err(Error::parse(
            path,
            2,
            format!("expected {} values, found {}", dims[0] * per_frame, values.len()),
        ));
    }
    let frames = values
        .chunks(per_frame)
        .map(|c| Frame::new(dims[1], dims[2], c.to_vec()))
        .collect::<Result<_>>()?;
    Ok(RawVideo { frames })
}

pub fn write_tensor_video(video: &RawVideo, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let f0 = video
        .frames
        .first()
        .ok_or_else(|| Error::Input("cannot write an empty video".into()))?;
    let mut s = format!("{} {} {} 3\n", video.frames.len(), f0.height, f0.width);
    for f in &video.frames {
        for row in f.data.chunks(f.width * 3) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a directory of numbered image files, ordered by the number in
/// each file name.
pub fn read_frame_dir(dir: &Path) -> Result<RawVideo> {
    let mut entries: Vec<(u64, std::path::PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
            Some((digits.parse().ok()?, p))
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Input(format!(
            "{}: no numbered image files",
            dir.display()
        )));
    }
    let frames = entries
        .iter()
        .map(|(_, p)| {
            let img = image::open(p)
                .map_err(|e| Error::Image {
                    path: p.clone(),
                    msg: e.to_string(),
                })?
                .to_rgb8();
            Frame::from_bytes(img.height() as usize, img.width() as usize, img.as_raw())
        })
        .collect::<Result<_>>()?;
    Ok(RawVideo { frames })
}

/// Writes each frame as `frame_NNNN.ppm` under `dir`.
pub fn write_frame_dir(video: &RawVideo, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in video.frames.iter().enumerate() {
        let bytes: Vec<u8> = f.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        let img = image::RgbImage::from_raw(f.width as u32, f.height as u32, bytes)
            .expect("frame buffer matches its dimensions");
        let path = dir.join(format!("frame_{i:04}.ppm"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

pub fn read_video(path: &Path) -> Result<RawVideo> {
    if path.is_dir() {
        read_frame_dir(path)
    } else {
        read_tensor_video(path)
    }
}
