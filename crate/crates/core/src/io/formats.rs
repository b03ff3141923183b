//! Little-endian binary formats shared with external tools.
//!
//! * `LRI1` range image: rows, cols (u32), column-zero azimuth (f64), row
//!   elevations (f64), then row-major f32 ranges with NaN for invalid cells.
//! * `LPM1` anchor map: rows, cols, channels (u32, channels = 72), then
//!   row-major, channel-minor f32 values. Loss masks use the same container
//!   with 0/1 values: slot 0 of every anchor holds the classification mask,
//!   slots 1-8 the anchor's regression mask.
//! * `LWT1` weights: layer count (u32), then per layer out, in, kernel rows,
//!   kernel cols (u32) followed by the f32 weights and f32 biases.

use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::codec::{AnchorLayout, AnchorMap, LossMasks};
use crate::error::{Error, Result};
use crate::model::ConvLayer;
use crate::range_image::{RangeImage, SensorSpec};

pub const RANGE_IMAGE_MAGIC: &[u8; 4] = b"LRI1";
pub const ANCHOR_MAP_MAGIC: &[u8; 4] = b"LPM1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"LWT1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::Format(format!(
                "{what}: expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { buf, pos: 4, what })
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    /// Ensures `count` f32 values remain before allocating for them.
    fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .filter(|&b| b <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Format(format!("{}: truncated payload", self.what)))?;
        let out = self.buf[self.pos..self.pos + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")))
            .collect();
        self.pos += bytes;
        Ok(out)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_range_image(img: &RangeImage) -> Result<Vec<u8>> {
    let (rows, cols) = (img.rows(), img.cols());
    let mut out = Vec::with_capacity(24 + rows * 8 + rows * cols * 4);
    out.extend_from_slice(RANGE_IMAGE_MAGIC);
    put_u32(&mut out, rows, "rows")?;
    put_u32(&mut out, cols, "cols")?;
    out.extend_from_slice(&img.spec.azimuth_of_column_zero.to_le_bytes());
    for e in &img.spec.channel_elevations {
        out.extend_from_slice(&e.to_le_bytes());
    }
    for (r, v) in img.range.iter().zip(&img.valid) {
        let x = if *v { *r as f32 } else { f32::NAN };
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_range_image(bytes: &[u8]) -> Result<RangeImage> {
    let mut r = Reader::new(bytes, RANGE_IMAGE_MAGIC, "LRI1")?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let az0 = r.f64()?;
    let mut elevations = Vec::with_capacity(rows.min(4096));
    for _ in 0..rows {
        elevations.push(r.f64()?);
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("LRI1: image too large".into()))?;
    let values = r.f32_vec(n)?;
    r.finish()?;
    let spec = SensorSpec::new("lri1", cols, elevations, az0).map_err(|e| Error::Format(format!("LRI1: {e}")))?;
    if values.iter().any(|v| v.is_infinite() || *v < 0.0) {
        return Err(Error::Format("LRI1: ranges must be NaN or finite and >= 0".into()));
    }
    RangeImage::from_ranges(spec, values.into_iter().map(f64::from).collect())
}

pub fn encode_anchor_map(map: &AnchorMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + map.data.len() * 4);
    out.extend_from_slice(ANCHOR_MAP_MAGIC);
    put_u32(&mut out, map.rows, "rows")?;
    put_u32(&mut out, map.cols, "cols")?;
    put_u32(&mut out, AnchorLayout::TOTAL_CHANNELS, "channels")?;
    for v in &map.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_anchor_map(bytes: &[u8]) -> Result<AnchorMap> {
    let mut r = Reader::new(bytes, ANCHOR_MAP_MAGIC, "LPM1")?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let channels = r.u32()?;
    if channels != AnchorLayout::TOTAL_CHANNELS {
        return Err(Error::Format(format!(
            "LPM1: {channels} channels, expected {}",
            AnchorLayout::TOTAL_CHANNELS
        )));
    }
    let n = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| Error::Format("LPM1: map too large".into()))?;
    let values = r.f32_vec(n)?;
    r.finish()?;
    AnchorMap::from_data(rows, cols, values.into_iter().map(f64::from).collect())
}

pub fn masks_to_map(masks: &LossMasks) -> AnchorMap {
    let mut map = AnchorMap::zeros(masks.rows, masks.cols);
    for r in 0..masks.rows {
        for c in 0..masks.cols {
            let cls = f64::from(u8::from(masks.classification_at(r, c)));
            for a in 0..AnchorLayout::N_ANCHORS {
                let reg = f64::from(u8::from(masks.regression_at(r, c, a)));
                map.set(r, c, AnchorLayout::channel(a, 0), cls);
                for k in 1..AnchorLayout::CHANNELS_PER_ANCHOR {
                    map.set(r, c, AnchorLayout::channel(a, k), reg);
                }
            }
        }
    }
    map
}

pub fn map_to_masks(map: &AnchorMap) -> Result<LossMasks> {
    let mut masks = LossMasks::empty(map.rows, map.cols);
    let flag = |v: f64| -> Result<bool> {
        match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::Format(format!("mask value {v} is not 0 or 1"))),
        }
    };
    for r in 0..map.rows {
        for c in 0..map.cols {
            let pix = r * map.cols + c;
            let cls = flag(map.get(r, c, 0))?;
            for a in 0..AnchorLayout::N_ANCHORS {
                if flag(map.get(r, c, AnchorLayout::channel(a, 0)))? != cls {
                    return Err(Error::Format("classification mask differs between anchors".into()));
                }
                let reg = flag(map.get(r, c, AnchorLayout::channel(a, 1)))?;
                for k in 2..AnchorLayout::CHANNELS_PER_ANCHOR {
                    if flag(map.get(r, c, AnchorLayout::channel(a, k)))? != reg {
                        return Err(Error::Format("regression mask differs within an anchor".into()));
                    }
                }
                if reg && !cls {
                    return Err(Error::Format("regression mask outside the classification mask".into()));
                }
                masks.regression[pix * AnchorLayout::N_ANCHORS + a] = reg;
            }
            masks.classification[pix] = cls;
        }
    }
    Ok(masks)
}

pub fn encode_weights(layers: &[&ConvLayer]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    put_u32(&mut out, layers.len(), "layer count")?;
    for l in layers {
        let (o, i, kh, kw) = l.shape();
        if l.weights.len() != o * i * kh * kw || l.bias.len() != o {
            return Err(Error::ShapeMismatch(format!("layer {o}x{i}x{kh}x{kw} has inconsistent buffers")));
        }
        for d in [o, i, kh, kw] {
            put_u32(&mut out, d, "layer dimension")?;
        }
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<ConvLayer>> {
    let mut r = Reader::new(bytes, WEIGHTS_MAGIC, "LWT1")?;
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let (o, i, kh, kw) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let count = o
            .checked_mul(i)
            .and_then(|v| v.checked_mul(kh))
            .and_then(|v| v.checked_mul(kw))
            .ok_or_else(|| Error::Format("LWT1: layer too large".into()))?;
        let weights = r.f32_vec(count)?;
        let bias = r.f32_vec(o)?;
        layers.push(ConvLayer {
            out_channels: o,
            in_channels: i,
            kernel_rows: kh,
            kernel_cols: kw,
            weights,
            bias,
        });
    }
    r.finish()?;
    Ok(layers)
}

pub fn write_range_image(path: &Path, img: &RangeImage) -> Result<()> {
    write_atomic(path, &encode_range_image(img)?)
}

pub fn read_range_image(path: &Path) -> Result<RangeImage> {
    decode_range_image(&fs::read(path)?)
}

pub fn write_anchor_map(path: &Path, map: &AnchorMap) -> Result<()> {
    write_atomic(path, &encode_anchor_map(map)?)
}

pub fn read_anchor_map(path: &Path) -> Result<AnchorMap> {
    decode_anchor_map(&fs::read(path)?)
}

pub fn write_masks(path: &Path, masks: &LossMasks) -> Result<()> {
    write_anchor_map(path, &masks_to_map(masks))
}

pub fn read_masks(path: &Path) -> Result<LossMasks> {
    map_to_masks(&read_anchor_map(path)?)
}

pub fn write_weights(path: &Path, layers: &[&ConvLayer]) -> Result<()> {
    write_atomic(path, &encode_weights(layers)?)
}

pub fn read_weights(path: &Path) -> Result<Vec<ConvLayer>> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RangeImage {
        let elevations: Vec<f64> = (0..rows).map(|i| 0.1 - i as f64 * 0.01).collect();
        let spec = SensorSpec::new("t", cols, elevations, -0.7).unwrap();
        let ranges = (0..rows * cols)
            .map(|_| {
                if rng.random_bool(0.3) {
                    f64::NAN
                } else {
                    f64::from(rng.random_range(0.0f32..120.0))
                }
            })
            .collect();
        RangeImage::from_ranges(spec, ranges).unwrap()
    }

    #[test]
    fn range_image_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 5, 17);
        let bytes = encode_range_image(&img).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 5 * 8 + 5 * 17 * 4);
        let back = decode_range_image(&bytes).unwrap();
        assert_eq!(back.valid, img.valid);
        assert_eq!(back.spec.channel_elevations, img.spec.channel_elevations);
        assert_eq!(back.spec.azimuth_of_column_zero, img.spec.azimuth_of_column_zero);
        for (a, b) in back.range.iter().zip(&img.range).zip(&img.valid).filter(|(_, v)| **v).map(|(p, _)| p) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode_range_image(&back).unwrap(), bytes);
    }

    #[test]
    fn range_image_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bytes = encode_range_image(&random_image(&mut rng, 2, 3)).unwrap();
        let mut wrong = bytes.clone();
        wrong[3] = b'2';
        assert!(matches!(decode_range_image(&wrong), Err(Error::Format(_))));
        assert!(decode_range_image(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_range_image(&long).is_err());
        assert!(decode_range_image(b"LR").is_err());
    }

    #[test]
    fn anchor_map_and_masks_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 3 * 72).map(|_| f64::from(rng.random_range(-5.0f32..5.0))).collect();
        let map = AnchorMap::from_data(2, 3, data).unwrap();
        let bytes = encode_anchor_map(&map).unwrap();
        assert_eq!(decode_anchor_map(&bytes).unwrap(), map);

        let mut masks = LossMasks::empty(2, 3);
        masks.classification[4] = true;
        masks.regression[4 * 8 + 6] = true;
        masks.classification[1] = true;
        assert_eq!(map_to_masks(&masks_to_map(&masks)).unwrap(), masks);
        assert!(map_to_masks(&map).is_err());

        let mut bad = encode_anchor_map(&map).unwrap();
        bad[12] = 71;
        assert!(decode_anchor_map(&bad).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers = vec![
            ConvLayer::random((3, 1, 1, 1), 1.0, &mut rng),
            ConvLayer::random((2, 3, 1, 7), 1.0, &mut rng),
        ];
        let refs: Vec<&ConvLayer> = layers.iter().collect();
        let bytes = encode_weights(&refs).unwrap();
        assert_eq!(decode_weights(&bytes).unwrap(), layers);
        assert!(decode_weights(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode_weights(b"LWT1\x01\0\0\0\xff\xff\xff\xff\xff\xff\xff\xff\x01\0\0\0\x01\0\0\0").is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 3, 4);
        let p = dir.path().join("x.lri");
        write_range_image(&p, &img).unwrap();
        assert_eq!(read_range_image(&p).unwrap().valid, img.valid);
        assert!(matches!(read_range_image(&dir.path().join("none")), Err(Error::Io(_))));
    }
}
