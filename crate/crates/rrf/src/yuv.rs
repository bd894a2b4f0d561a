//! Planar YUV 4:2:0 frame I/O, GoP segmentation and residual extraction.
//!
//! Everything here works on raw 8-bit planar files (the layout written by
//! `ffmpeg -pix_fmt yuv420p`): per frame, a full-resolution Y plane followed
//! by quarter-resolution U and V planes. Frame geometry must be even in both
//! dimensions so the chroma planes are well defined.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum YuvError {
    #[error("frame dimensions must be even and nonzero, got {width}x{height}")]
    BadDimensions { width: usize, height: usize },
    #[error("file ends mid-frame at byte offset {offset} ({got} trailing bytes, frame takes {frame_bytes})")]
    Truncated {
        offset: u64,
        got: u64,
        frame_bytes: u64,
    },
    #[error("sequences differ: {decoded_frames} decoded frames vs {source_frames} source frames")]
    LengthMismatch {
        decoded_frames: usize,
        source_frames: usize,
    },
    #[error("frame {index} geometry {got_w}x{got_h} does not match {want_w}x{want_h}")]
    FrameGeometry {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("GoP length must be nonzero")]
    ZeroGop,
    #[error("no frames")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single image plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub data: Vec<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Plane {
            data: vec![T::default(); width * height],
            width,
            height,
        }
    }

    pub fn from_vec(data: Vec<T>, width: usize, height: usize) -> Self {
        assert_eq!(data.len(), width * height, "plane data/geometry mismatch");
        Plane {
            data,
            width,
            height,
        }
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, y: usize) -> &mut [T] {
        &mut self.data[y * self.width..(y + 1) * self.width]
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

impl Plane<u8> {
    /// Plane as floating samples (no scaling; still 0..255).
    pub fn to_f64(&self) -> Plane<f64> {
        Plane {
            data: self.data.iter().map(|&v| v as f64).collect(),
            width: self.width,
            height: self.height,
        }
    }
}

/// One decoded 4:2:0 frame: full-size luma, half-size chroma planes.
#[derive(Debug, Clone, PartialEq)]
pub struct YuvFrame {
    pub index: usize,
    pub y: Plane<u8>,
    pub u: Plane<u8>,
    pub v: Plane<u8>,
}

impl YuvFrame {
    pub fn new(
        index: usize,
        y: Plane<u8>,
        u: Plane<u8>,
        v: Plane<u8>,
    ) -> Result<Self, YuvError> {
        let (w, h) = (y.width, y.height);
        if w == 0 || h == 0 || w % 2 != 0 || h % 2 != 0 {
            return Err(YuvError::BadDimensions {
                width: w,
                height: h,
            });
        }
        if u.width != w / 2 || u.height != h / 2 || v.width != w / 2 || v.height != h / 2 {
            return Err(YuvError::BadDimensions {
                width: w,
                height: h,
            });
        }
        Ok(YuvFrame { index, y, u, v })
    }

    pub fn width(&self) -> usize {
        self.y.width
    }

    pub fn height(&self) -> usize {
        self.y.height
    }

    /// Flat gray frame — handy as a neutral starting point in tests.
    pub fn flat(index: usize, width: usize, height: usize, value: u8) -> Result<Self, YuvError> {
        let mut y = Plane::new(width, height);
        y.data.fill(value);
        let mut u = Plane::new(width / 2, height / 2);
        u.data.fill(128);
        let mut v = Plane::new(width / 2, height / 2);
        v.data.fill(128);
        YuvFrame::new(index, y, u, v)
    }
}

/// Which plane of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelId {
    Y,
    U,
    V,
}

/// Encoder-side coding structure of the clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CodingMode {
    /// GoPs are independent; each one gets a fresh network (or nothing).
    RandomAccess,
    /// GoPs form a chain; networks persist and are refined incrementally.
    LowDelay,
}

impl CodingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CodingMode::RandomAccess => "ra",
            CodingMode::LowDelay => "ld",
        }
    }
}

/// A group of pictures viewed from both sides of the codec: the decoded
/// frames the refinement network will see, and the pristine source frames
/// that define the residual it should predict.
#[derive(Debug, Clone, Copy)]
pub struct GopSegment<'a> {
    pub start: usize,
    pub decoded: &'a [YuvFrame],
    pub source: &'a [YuvFrame],
    pub mode: CodingMode,
}

impl GopSegment<'_> {
    pub fn len(&self) -> usize {
        self.decoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoded.is_empty()
    }
}

fn frame_bytes(width: usize, height: usize) -> usize {
    width * height * 3 / 2
}

/// Read a whole planar 4:2:0 file. The file length must be an exact multiple
/// of the frame size; a partial trailing frame is reported with the offset
/// where it starts.
pub fn read_yuv<P: AsRef<Path>>(
    path: P,
    width: usize,
    height: usize,
) -> Result<Vec<YuvFrame>, YuvError> {
    if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
        return Err(YuvError::BadDimensions { width, height });
    }
    let fb = frame_bytes(width, height) as u64;
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    if total % fb != 0 {
        let full = total / fb;
        return Err(YuvError::Truncated {
            offset: full * fb,
            got: total - full * fb,
            frame_bytes: fb,
        });
    }
    let mut reader = BufReader::new(file);
    let mut frames = Vec::with_capacity((total / fb) as usize);
    let (cw, ch) = (width / 2, height / 2);
    for index in 0..(total / fb) as usize {
        let mut y = vec![0u8; width * height];
        let mut u = vec![0u8; cw * ch];
        let mut v = vec![0u8; cw * ch];
        reader.read_exact(&mut y)?;
        reader.read_exact(&mut u)?;
        reader.read_exact(&mut v)?;
        frames.push(YuvFrame::new(
            index,
            Plane::from_vec(y, width, height),
            Plane::from_vec(u, cw, ch),
            Plane::from_vec(v, cw, ch),
        )?);
    }
    Ok(frames)
}

/// Write frames back out as planar 4:2:0. All frames must share one geometry.
pub fn write_yuv<P: AsRef<Path>>(path: P, frames: &[YuvFrame]) -> Result<(), YuvError> {
    let first = frames.first().ok_or(YuvError::Empty)?;
    let (w, h) = (first.width(), first.height());
    let mut writer = BufWriter::new(File::create(path)?);
    for (i, f) in frames.iter().enumerate() {
        if f.width() != w || f.height() != h {
            return Err(YuvError::FrameGeometry {
                index: i,
                got_w: f.width(),
                got_h: f.height(),
                want_w: w,
                want_h: h,
            });
        }
        writer.write_all(&f.y.data)?;
        writer.write_all(&f.u.data)?;
        writer.write_all(&f.v.data)?;
    }
    writer.flush()?;
    Ok(())
}

/// Split a decoded/source pair into GoPs of `gop_len` frames (the final GoP
/// may be shorter). Both sequences must have the same length and geometry.
pub fn segment_gops<'a>(
    decoded: &'a [YuvFrame],
    source: &'a [YuvFrame],
    gop_len: usize,
    mode: CodingMode,
) -> Result<Vec<GopSegment<'a>>, YuvError> {
    if gop_len == 0 {
        return Err(YuvError::ZeroGop);
    }
    if decoded.len() != source.len() {
        return Err(YuvError::LengthMismatch {
            decoded_frames: decoded.len(),
            source_frames: source.len(),
        });
    }
    if decoded.is_empty() {
        return Err(YuvError::Empty);
    }
    let (w, h) = (decoded[0].width(), decoded[0].height());
    for (i, (d, s)) in decoded.iter().zip(source).enumerate() {
        for f in [d, s] {
            if f.width() != w || f.height() != h {
                return Err(YuvError::FrameGeometry {
                    index: i,
                    got_w: f.width(),
                    got_h: f.height(),
                    want_w: w,
                    want_h: h,
                });
            }
        }
    }
    Ok((0..decoded.len())
        .step_by(gop_len)
        .map(|start| {
            let end = (start + gop_len).min(decoded.len());
            GopSegment {
                start,
                decoded: &decoded[start..end],
                source: &source[start..end],
                mode,
            }
        })
        .collect())
}

/// The coding error of one plane, in sample units: `source − decoded`.
#[derive(Debug, Clone)]
pub struct ResidualPlane {
    pub channel: ChannelId,
    pub plane: Plane<f64>,
}

/// Residual of a single channel of one frame.
pub fn residual(
    source: &YuvFrame,
    decoded: &YuvFrame,
    channel: ChannelId,
) -> Result<ResidualPlane, YuvError> {
    let (s, d) = match channel {
        ChannelId::Y => (&source.y, &decoded.y),
        ChannelId::U => (&source.u, &decoded.u),
        ChannelId::V => (&source.v, &decoded.v),
    };
    if s.width != d.width || s.height != d.height {
        return Err(YuvError::FrameGeometry {
            index: source.index,
            got_w: s.width,
            got_h: s.height,
            want_w: d.width,
            want_h: d.height,
        });
    }
    let data = s
        .data
        .iter()
        .zip(&d.data)
        .map(|(&sv, &dv)| sv as f64 - dv as f64)
        .collect();
    Ok(ResidualPlane {
        channel,
        plane: Plane::from_vec(data, s.width, s.height),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_frame(index: usize, w: usize, h: usize, seed: u8) -> YuvFrame {
        let fill = |n: usize, base: u8| -> Vec<u8> {
            (0..n)
                .map(|i| base.wrapping_add((i * 7 + index * 13) as u8))
                .collect()
        };
        YuvFrame::new(
            index,
            Plane::from_vec(fill(w * h, seed), w, h),
            Plane::from_vec(fill(w * h / 4, seed.wrapping_add(80)), w / 2, h / 2),
            Plane::from_vec(fill(w * h / 4, seed.wrapping_add(160)), w / 2, h / 2),
        )
        .unwrap()
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.yuv");
        let frames: Vec<_> = (0..3).map(|i| test_frame(i, 8, 6, 10)).collect();
        write_yuv(&path, &frames).unwrap();
        let back = read_yuv(&path, 8, 6).unwrap();
        assert_eq!(frames, back);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.yuv");
        // 4x4 frames take 24 bytes; 47 bytes = one frame + 23 stray bytes.
        std::fs::write(&path, vec![0u8; 47]).unwrap();
        match read_yuv(&path, 4, 4) {
            Err(YuvError::Truncated {
                offset,
                got,
                frame_bytes,
            }) => {
                assert_eq!(offset, 24);
                assert_eq!(got, 23);
                assert_eq!(frame_bytes, 24);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn odd_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("odd.yuv");
        std::fs::write(&path, vec![0u8; 10]).unwrap();
        assert!(matches!(
            read_yuv(&path, 5, 4),
            Err(YuvError::BadDimensions { .. })
        ));
        assert!(matches!(
            read_yuv(&path, 4, 0),
            Err(YuvError::BadDimensions { .. })
        ));
    }

    #[test]
    fn gop_segmentation_lengths() {
        let dec: Vec<_> = (0..10).map(|i| test_frame(i, 4, 4, 0)).collect();
        let src: Vec<_> = (0..10).map(|i| test_frame(i, 4, 4, 5)).collect();
        let gops = segment_gops(&dec, &src, 4, CodingMode::RandomAccess).unwrap();
        let lens: Vec<_> = gops.iter().map(|g| g.len()).collect();
        assert_eq!(lens, [4, 4, 2]);
        assert_eq!(gops[1].start, 4);
        assert_eq!(gops[2].decoded[0].index, 8);
    }

    #[test]
    fn gop_segmentation_rejects_mismatch() {
        let dec: Vec<_> = (0..3).map(|i| test_frame(i, 4, 4, 0)).collect();
        let src: Vec<_> = (0..2).map(|i| test_frame(i, 4, 4, 5)).collect();
        assert!(matches!(
            segment_gops(&dec, &src, 2, CodingMode::LowDelay),
            Err(YuvError::LengthMismatch { .. })
        ));
        let src3: Vec<_> = (0..3).map(|i| test_frame(i, 6, 4, 5)).collect();
        assert!(matches!(
            segment_gops(&dec, &src3, 2, CodingMode::LowDelay),
            Err(YuvError::FrameGeometry { .. })
        ));
        assert!(matches!(
            segment_gops(&dec, &dec, 0, CodingMode::LowDelay),
            Err(YuvError::ZeroGop)
        ));
    }

    #[test]
    fn residual_of_identical_planes_is_zero() {
        let f = test_frame(0, 6, 4, 42);
        let r = residual(&f, &f, ChannelId::Y).unwrap();
        assert!(r.plane.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_signed_values() {
        let mut d = test_frame(0, 4, 4, 0);
        let mut s = test_frame(0, 4, 4, 0);
        s.y.data[0] = 10;
        d.y.data[0] = 14;
        s.u.data[1] = 200;
        d.u.data[1] = 150;
        let ry = residual(&s, &d, ChannelId::Y).unwrap();
        assert_eq!(ry.plane.data[0], -4.0);
        let ru = residual(&s, &d, ChannelId::U).unwrap();
        assert_eq!(ru.plane.data[1], 50.0);
        assert_eq!(ru.plane.width, 2);
    }
}
