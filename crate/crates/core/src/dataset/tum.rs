//! TUM RGB-D directory layout: `rgb.txt`, `depth.txt`, `groundtruth.txt` index files,
//! 16-bit depth PNGs, plus an optional `masks.txt` / `masks/` pair of label images.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use log::warn;

use super::synthetic::SyntheticSequence;
use super::trajectory::{format_trajectory, parse_trajectory};
use crate::error::{Error, Result};
use crate::eval::TimedPose;
use crate::image::{depth_is_valid, Image};
use crate::scene::{CameraIntrinsics, FrameObservation};

pub const DEFAULT_ASSOCIATION_TOLERANCE: f64 = 0.02;
pub const INTRINSICS_FILE: &str = "intrinsics.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub timestamp: f64,
    pub path: PathBuf,
}

/// Indices into the rgb, depth and mask lists of one associated frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Association {
    pub rgb: usize,
    pub depth: usize,
    pub mask: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub rgb: Vec<IndexEntry>,
    pub depth: Vec<IndexEntry>,
    pub masks: Vec<IndexEntry>,
    pub ground_truth: Vec<TimedPose>,
    pub intrinsics: CameraIntrinsics,
    /// Frames after association, subsampling and truncation, in time order.
    pub frames: Vec<Association>,
    /// RGB entries without a depth partner.
    pub unpaired: usize,
    /// Frames that have no mask entry and will get an all-background mask.
    pub missing_masks: usize,
    /// Integer factor the frames are reduced by when loaded.
    pub downscale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub tolerance: f64,
    /// Keep every n-th associated frame.
    pub frame_step: usize,
    pub downscale: usize,
    pub max_frames: Option<usize>,
    /// Full-resolution intrinsics used when the dataset has no intrinsics file.
    pub intrinsics: CameraIntrinsics,
}

impl LoadOptions {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            tolerance: DEFAULT_ASSOCIATION_TOLERANCE,
            frame_step: 1,
            downscale: 1,
            max_frames: None,
            intrinsics,
        }
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_index(text: &str, path: &Path) -> Result<Vec<IndexEntry>> {
    let mut out: Vec<IndexEntry> = Vec::new();
    for (n, line) in data_lines(text) {
        let mut it = line.split_whitespace();
        let (Some(t), Some(p)) = (it.next(), it.next()) else {
            return Err(Error::parse(path, n, "expected `timestamp path`"));
        };
        let timestamp: f64 = t
            .parse()
            .map_err(|_| Error::parse(path, n, format!("bad timestamp `{t}`")))?;
        if out.last().is_some_and(|l| timestamp <= l.timestamp) {
            return Err(Error::parse(path, n, "timestamps must be strictly increasing"));
        }
        out.push(IndexEntry {
            timestamp,
            path: PathBuf::from(p),
        });
    }
    Ok(out)
}

/// One-to-one pairing: candidate pairs within `tolerance` are accepted greedily in
/// order of increasing time difference. Returned pairs are sorted by `a` index.
pub fn associate_timestamps(a: &[f64], b: &[f64], tolerance: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    let mut start = 0;
    for (i, &ta) in a.iter().enumerate() {
        while start < b.len() && b[start] < ta - tolerance {
            start += 1;
        }
        let mut j = start;
        while j < b.len() && b[j] <= ta + tolerance {
            candidates.push(((ta - b[j]).abs(), i, j));
            j += 1;
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn parse_intrinsics(text: &str, path: &Path) -> Result<CameraIntrinsics> {
    let (n, line) = data_lines(text)
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty intrinsics file"))?;
    let v: Vec<f64> = line
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, n, "expected `fx fy cx cy width height [depth_scale]`"))?;
    if v.len() != 6 && v.len() != 7 {
        return Err(Error::parse(path, n, "expected `fx fy cx cy width height [depth_scale]`"));
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize, *v.get(6).unwrap_or(&5000.0))
}

/// Reads the index files and associates frames; no image is decoded.
pub fn load_manifest(root: &Path, opts: &LoadOptions) -> Result<SequenceManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
        ));
    }
    let rgb_path = root.join("rgb.txt");
    let depth_path = root.join("depth.txt");
    let rgb = parse_index(&read_text(&rgb_path)?, &rgb_path)?;
    let depth = parse_index(&read_text(&depth_path)?, &depth_path)?;
    let mask_path = root.join("masks.txt");
    let masks = if mask_path.exists() {
        parse_index(&read_text(&mask_path)?, &mask_path)?
    } else {
        Vec::new()
    };
    let gt_path = root.join("groundtruth.txt");
    let ground_truth = if gt_path.exists() {
        parse_trajectory(&read_text(&gt_path)?, &gt_path)?
    } else {
        Vec::new()
    };
    let k_path = root.join(INTRINSICS_FILE);
    let full = if k_path.exists() {
        parse_intrinsics(&read_text(&k_path)?, &k_path)?
    } else {
        opts.intrinsics
    };
    let downscale = opts.downscale.max(1);
    let intrinsics = if downscale > 1 { full.downscaled(downscale) } else { full };

    let ts = |v: &[IndexEntry]| v.iter().map(|e| e.timestamp).collect::<Vec<_>>();
    let rgb_t = ts(&rgb);
    let pairs = associate_timestamps(&rgb_t, &ts(&depth), opts.tolerance);
    let mask_pairs = associate_timestamps(&rgb_t, &ts(&masks), opts.tolerance);
    let unpaired = rgb.len() - pairs.len();
    if unpaired > 0 {
        warn!("{}: {unpaired} rgb entries have no depth within {} s", root.display(), opts.tolerance);
    }
    let mut frames: Vec<Association> = pairs
        .iter()
        .map(|&(r, d)| Association {
            rgb: r,
            depth: d,
            mask: mask_pairs.iter().find(|(mr, _)| *mr == r).map(|(_, m)| *m),
        })
        .step_by(opts.frame_step.max(1))
        .collect();
    if let Some(m) = opts.max_frames {
        frames.truncate(m);
    }
    let missing_masks = frames.iter().filter(|f| f.mask.is_none()).count();
    if missing_masks > 0 {
        warn!("{}: {missing_masks} frames have no mask; treating them as background", root.display());
    }
    Ok(SequenceManifest {
        root: root.to_path_buf(),
        rgb,
        depth,
        masks,
        ground_truth,
        intrinsics,
        frames,
        unpaired,
        missing_masks,
        downscale,
    })
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Raw single-channel values, without the 8→16 bit rescaling `to_luma16` would apply.
fn raw_gray(img: &DynamicImage) -> (usize, usize, Vec<u32>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&x| x as u32).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&x| x as u32).collect(),
        other => other.to_luma16().as_raw().iter().map(|&x| x as u32).collect(),
    };
    (w, h, data)
}

fn reduce<T: Copy, U>(img: &Image<T>, s: usize, f: impl Fn(&[T]) -> U) -> Image<U> {
    if s == 1 {
        return Image::from_fn(img.width(), img.height(), |u, v| f(&[*img.get(u, v)]));
    }
    let mut block = Vec::with_capacity(s * s);
    Image::from_fn(img.width() / s, img.height() / s, |u, v| {
        block.clear();
        for dv in 0..s {
            for du in 0..s {
                block.push(*img.get(u * s + du, v * s + dv));
            }
        }
        f(&block)
    })
}

/// Block reductions: mean color, mean of valid depth when at least half the block is
/// valid, majority label.
fn downscale_frame(rgb: Image<[f64; 3]>, depth: Image<f64>, mask: Image<u32>, s: usize) -> (Image<[f64; 3]>, Image<f64>, Image<u32>) {
    if s == 1 {
        return (rgb, depth, mask);
    }
    let rgb = reduce(&rgb, s, |b| {
        let n = b.len() as f64;
        let mut c = [0.0; 3];
        for p in b {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    });
    let depth = reduce(&depth, s, |b| {
        let valid: Vec<f64> = b.iter().copied().filter(|d| depth_is_valid(*d)).collect();
        if 2 * valid.len() >= b.len() {
            valid.iter().sum::<f64>() / valid.len() as f64
        } else {
            0.0
        }
    });
    let mask = reduce(&mask, s, |b| {
        let mut ids: Vec<u32> = b.to_vec();
        ids.sort_unstable();
        let mut best = (0usize, ids[0]);
        let mut i = 0;
        while i < ids.len() {
            let j = ids[i..].iter().take_while(|x| **x == ids[i]).count();
            if j > best.0 {
                best = (j, ids[i]);
            }
            i += j;
        }
        best.1
    });
    (rgb, depth, mask)
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        self.rgb[self.frames[i].rgb].timestamp
    }

    /// Decodes frame `i` (an index into `frames`).
    pub fn load_frame(&self, i: usize) -> Result<FrameObservation> {
        let a = self.frames[i];
        let rgb_img = open_image(&self.root.join(&self.rgb[a.rgb].path))?.to_rgb8();
        let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
        let rgb = Image::from_vec(
            w,
            h,
            rgb_img
                .pixels()
                .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
                .collect(),
        );
        let depth_path = self.root.join(&self.depth[a.depth].path);
        let (dw, dh, raw) = raw_gray(&open_image(&depth_path)?);
        if (dw, dh) != (w, h) {
            return Err(Error::Input(format!("{}: depth size differs from rgb", depth_path.display())));
        }
        let scale = self.intrinsics.depth_scale;
        let depth = Image::from_vec(w, h, raw.iter().map(|&d| d as f64 / scale).collect());
        let mask = match a.mask {
            Some(m) => {
                let p = self.root.join(&self.masks[m].path);
                if p.exists() {
                    let (mw, mh, ids) = raw_gray(&open_image(&p)?);
                    if (mw, mh) != (w, h) {
                        return Err(Error::Input(format!("{}: mask size differs from rgb", p.display())));
                    }
                    Image::from_vec(w, h, ids)
                } else {
                    warn!("{}: mask file missing; using background", p.display());
                    Image::filled(w, h, 0)
                }
            }
            None => Image::filled(w, h, 0),
        };
        let (rgb, depth, mask) = downscale_frame(rgb, depth, mask, self.downscale);
        if rgb.width() != self.intrinsics.width || rgb.height() != self.intrinsics.height {
            return Err(Error::Input(format!(
                "frame {i} is {}x{} but the intrinsics expect {}x{}",
                rgb.width(),
                rgb.height(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        FrameObservation::new(i, self.timestamp(i), rgb, depth, mask)
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<FrameObservation>> + '_ {
        (0..self.len()).map(|i| self.load_frame(i))
    }
}

/// Manifest plus a lazy, in-order frame iterator.
pub fn load_sequence(root: &Path, opts: &LoadOptions) -> Result<SequenceManifest> {
    load_manifest(root, opts)
}

fn save<P: image::Pixel + image::PixelWithColorType>(buf: ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn rgb_to_png(img: &Image<[f64; 3]>, path: &Path) -> Result<()> {
    let data: Vec<u8> = img
        .as_slice()
        .iter()
        .flat_map(|c| c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, data)
        .expect("buffer size matches image");
    save(buf, path)
}

/// Meters to 16-bit units of `1 / depth_scale` m; invalid depth becomes 0.
pub fn depth_to_png(img: &Image<f64>, depth_scale: f64, path: &Path) -> Result<()> {
    let data: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|&d| {
            if depth_is_valid(d) {
                (d * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(img.width() as u32, img.height() as u32, data)
        .expect("buffer size matches image");
    save(buf, path)
}

pub fn labels_to_png(img: &Image<u32>, path: &Path) -> Result<()> {
    if img.as_slice().iter().any(|&x| x > u16::MAX as u32) {
        return Err(Error::Input("object id does not fit a 16-bit label image".into()));
    }
    let data: Vec<u16> = img.as_slice().iter().map(|&x| x as u16).collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(img.width() as u32, img.height() as u32, data)
        .expect("buffer size matches image");
    save(buf, path)
}

/// Writes a sequence in the layout [`load_sequence`] reads, including an intrinsics file.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    for sub in ["rgb", "depth", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let header = |what: &str| format!("# {what}\n# timestamp filename\n");
    let (mut rgb_idx, mut depth_idx, mut mask_idx) = (header("color images"), header("depth images"), header("instance masks"));
    let k = &seq.intrinsics;
    for f in &seq.frames {
        let name = format!("{:.6}.png", f.timestamp);
        rgb_to_png(&f.rgb, &dir.join("rgb").join(&name))?;
        depth_to_png(&f.depth, k.depth_scale, &dir.join("depth").join(&name))?;
        labels_to_png(&f.mask, &dir.join("masks").join(&name))?;
        rgb_idx.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
        depth_idx.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
        mask_idx.push_str(&format!("{:.6} masks/{name}\n", f.timestamp));
    }
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("rgb.txt", &rgb_idx)?;
    write("depth.txt", &depth_idx)?;
    write("masks.txt", &mask_idx)?;
    let gt = format!("# timestamp tx ty tz qx qy qz qw\n{}", format_trajectory(&seq.ground_truth)?);
    write("groundtruth.txt", &gt)?;
    write(
        INTRINSICS_FILE,
        &format!(
            "# fx fy cx cy width height depth_scale\n{} {} {} {} {} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale
        ),
    )
}
