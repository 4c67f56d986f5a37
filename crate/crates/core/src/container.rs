//! The `.llec` bitstream and the end-to-end encode/decode pipeline.
//!
//! Layout (multi-byte integers little-endian, `varint` = unsigned LEB128):
//!
//! ```text
//! header   magic "LLEC" | version u8 | width u16 | height u16 | segment_len u32
//!          | tile_len u16 | latent_dim u8 | model_id [16] | segment_count varint
//! segment  index varint | polarity u8 | min_timestamp u64
//!          | occupancy_byte_count varint | tile_count varint
//!          | tile_count × (latent [ceil(6·latent_dim/8)] | payload_len varint | payload)
//!          | crc32 u32 (over the segment's occupancy bytes)
//! ```

use rayon::prelude::*;

use crate::entropy_coder::{ac_decode, ac_encode, pack_latents, quantize_cdf, unpack_latents, LATENT_BITS};
use crate::error::{Error, Result};
use crate::event_io::{EventStream, Polarity};
use crate::hyperprior::{hex, HyperpriorModel, QuantizedLatent, Tile};
use crate::octree::{build_occupancy, compute_depth, decode_occupancy, OctreeParams};
use crate::preprocess::{reassemble_stream, segment_stream, PreprocessConfig, Segment, SegmentKey};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"LLEC";
pub const FORMAT_VERSION: u8 = 1;
const FIXED_HEADER_LEN: usize = 4 + 1 + 2 + 2 + 4 + 2 + 1 + 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub format_version: u8,
    pub width: u32,
    pub height: u32,
    pub segment_len: u64,
    pub tile_len: usize,
    pub latent_dim: usize,
    pub model_id: [u8; 16],
    pub segment_count: usize,
}

/// One tile as stored: packed latent indices and the range-coded payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord<'a> {
    pub latent: &'a [u8],
    pub payload: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRecord<'a> {
    pub key: SegmentKey,
    pub min_timestamp: u64,
    pub occupancy_byte_count: usize,
    pub tiles: Vec<TileRecord<'a>>,
    pub checksum: u32,
    /// Bytes of this record excluding latents and payloads.
    pub metadata_len: usize,
}

/// Parsed view over container bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerView<'a> {
    pub header: BitstreamHeader,
    pub header_len: usize,
    pub segments: Vec<SegmentRecord<'a>>,
}

/// Container size split by role, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct SizeBreakdown {
    pub header_bits: u64,
    pub metadata_bits: u64,
    pub latent_bits: u64,
    pub payload_bits: u64,
}

impl SizeBreakdown {
    pub fn total_bits(&self) -> u64 {
        self.header_bits + self.metadata_bits + self.latent_bits + self.payload_bits
    }
}

fn latent_len(latent_dim: usize) -> usize {
    (latent_dim * LATENT_BITS as usize).div_ceil(8)
}

fn put_varint(out: &mut Vec<u8>, v: u64) {
    leb128::write::unsigned(out, v).expect("writing to a Vec cannot fail");
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::Format(format!("container truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn varint(&mut self, what: &str) -> Result<u64> {
        let mut rest = &self.bytes[self.pos..];
        let before = rest.len();
        let v = leb128::read::unsigned(&mut rest)
            .map_err(|e| Error::Format(format!("bad varint for {what} at byte {}: {e}", self.pos)))?;
        self.pos += before - rest.len();
        Ok(v)
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.varint(what)?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} too large")))
    }
}

/// Parses container structure without decoding payloads.
pub fn parse_container(bytes: &[u8]) -> Result<ContainerView<'_>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not an llec container (bad magic)".into()));
    }
    let format_version = r.u8("version")?;
    if format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {format_version}")));
    }
    let width = u32::from(r.u16("width")?);
    let height = u32::from(r.u16("height")?);
    let segment_len = u64::from(r.u32("segment length")?);
    let tile_len = usize::from(r.u16("tile length")?);
    let latent_dim = usize::from(r.u8("latent size")?);
    let model_id: [u8; 16] = r.take(16, "model id")?.try_into().expect("16 bytes");
    let segment_count = r.usize("segment count")?;
    if tile_len == 0 || width == 0 || height == 0 {
        return Err(Error::Format("degenerate container header".into()));
    }
    PreprocessConfig::new(segment_len).map_err(|e| Error::Format(e.to_string()))?;
    let header =
        BitstreamHeader { format_version, width, height, segment_len, tile_len, latent_dim, model_id, segment_count };
    let header_len = r.pos;

    let lat_len = latent_len(latent_dim);
    let mut segments = Vec::with_capacity(segment_count.min(1 << 20));
    let mut prev: Option<SegmentKey> = None;
    for _ in 0..segment_count {
        let start = r.pos;
        let mut data_len = 0;
        let index = r.varint("segment index")?;
        let polarity = Polarity::from_bit(r.u8("polarity")?).map_err(|e| Error::Format(e.to_string()))?;
        let key = SegmentKey { index, polarity };
        if prev.is_some_and(|p| p >= key) {
            return Err(Error::Format(format!("segment {index} out of order")));
        }
        prev = Some(key);
        let min_timestamp = r.u64("min timestamp")?;
        let occupancy_byte_count = r.usize("occupancy byte count")?;
        let tile_count = r.usize("tile count")?;
        if occupancy_byte_count == 0 || tile_count != occupancy_byte_count.div_ceil(tile_len) {
            return Err(Error::Format(format!(
                "segment {index}: {tile_count} tiles cannot hold {occupancy_byte_count} occupancy bytes"
            )));
        }
        let mut tiles = Vec::with_capacity(tile_count.min(1 << 20));
        for _ in 0..tile_count {
            let latent = r.take(lat_len, "latent")?;
            let plen = r.usize("payload length")?;
            let payload = r.take(plen, "payload")?;
            data_len += lat_len + plen;
            tiles.push(TileRecord { latent, payload });
        }
        let checksum = r.u32("checksum")?;
        segments.push(SegmentRecord {
            key,
            min_timestamp,
            occupancy_byte_count,
            tiles,
            checksum,
            metadata_len: r.pos - start - data_len,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last segment", bytes.len() - r.pos)));
    }
    Ok(ContainerView { header, header_len, segments })
}

/// Splits the container size into header, per-segment metadata, latents and payloads.
pub fn measure_bitstream(bytes: &[u8]) -> Result<SizeBreakdown> {
    let view = parse_container(bytes)?;
    let mut b = SizeBreakdown { header_bits: 8 * view.header_len as u64, ..Default::default() };
    for seg in &view.segments {
        b.metadata_bits += 8 * seg.metadata_len as u64;
        for t in &seg.tiles {
            b.latent_bits += 8 * t.latent.len() as u64;
            b.payload_bits += 8 * t.payload.len() as u64;
        }
    }
    Ok(b)
}

/// Encoder/decoder bound to one set of model weights.
pub struct Codec<'m, F> {
    model: &'m HyperpriorModel<F>,
    model_id: [u8; 16],
}

impl<'m, F: Scalar> Codec<'m, F> {
    pub fn new(model: &'m HyperpriorModel<F>) -> Result<Self> {
        model.check_finite()?;
        let arch = model.architecture();
        if arch.tile_len > usize::from(u16::MAX) || arch.latent_dim > usize::from(u8::MAX) {
            return Err(Error::InvalidArgument("model shape does not fit the container header".into()));
        }
        Ok(Self { model, model_id: model.model_id() })
    }

    pub fn model_id(&self) -> [u8; 16] {
        self.model_id
    }

    fn tile_len(&self) -> usize {
        self.model.architecture().tile_len
    }

    fn encode_tile(&self, tile: &Tile, out: &mut Vec<u8>) -> Result<()> {
        let zq = self.model.quantize(&self.model.encode_tile(tile)?);
        let cdf = quantize_cdf(self.model.decode_probs(&zq)?.probs())?;
        let payload = ac_encode(&tile.symbols, &cdf);
        out.extend(pack_latents(&zq.0)?);
        put_varint(out, payload.len() as u64);
        out.extend(payload);
        Ok(())
    }

    fn encode_segment(&self, seg: &Segment, params: OctreeParams) -> Result<Vec<u8>> {
        let occupancy = build_occupancy(&seg.points, params)?.bytes;
        let tiles = Tile::split(&occupancy, self.tile_len());
        let mut out = Vec::new();
        put_varint(&mut out, seg.key.index);
        out.push(seg.key.polarity.bit());
        out.extend(seg.min_timestamp.to_le_bytes());
        put_varint(&mut out, occupancy.len() as u64);
        put_varint(&mut out, tiles.len() as u64);
        for tile in &tiles {
            self.encode_tile(tile, &mut out)?;
        }
        out.extend(crc32fast::hash(&occupancy).to_le_bytes());
        Ok(out)
    }

    /// Compresses `stream` with segment length `cfg.segment_len`.
    pub fn encode(&self, stream: &EventStream, cfg: &PreprocessConfig) -> Result<Vec<u8>> {
        cfg.validate()?;
        if stream.width == 0 || stream.height == 0 || stream.width > 0xffff || stream.height > 0xffff {
            return Err(Error::Range(format!("sensor {}x{} not representable", stream.width, stream.height)));
        }
        if cfg.segment_len > u64::from(u32::MAX) {
            return Err(Error::Range("segment length exceeds 32 bits".into()));
        }
        if let Some(e) =
            stream.events.iter().find(|e| u32::from(e.x) >= stream.width || u32::from(e.y) >= stream.height)
        {
            return Err(Error::Range(format!("event ({}, {}) outside sensor", e.x, e.y)));
        }
        let params = compute_depth(u64::from(stream.width), u64::from(stream.height), cfg.segment_len)?;
        let segments = segment_stream(stream, cfg).segments;
        let arch = self.model.architecture();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend((stream.width as u16).to_le_bytes());
        out.extend((stream.height as u16).to_le_bytes());
        out.extend((cfg.segment_len as u32).to_le_bytes());
        out.extend((arch.tile_len as u16).to_le_bytes());
        out.push(arch.latent_dim as u8);
        out.extend(self.model_id);
        debug_assert_eq!(out.len(), FIXED_HEADER_LEN);
        put_varint(&mut out, segments.len() as u64);

        let records: Vec<Vec<u8>> =
            segments.par_iter().map(|seg| self.encode_segment(seg, params)).collect::<Result<_>>()?;
        for r in records {
            out.extend(r);
        }
        Ok(out)
    }

    fn decode_segment(&self, rec: &SegmentRecord<'_>, params: OctreeParams) -> Result<Segment> {
        let tile_len = self.tile_len();
        let mut occupancy = Vec::with_capacity(rec.occupancy_byte_count);
        for (i, t) in rec.tiles.iter().enumerate() {
            let zq = QuantizedLatent(unpack_latents(t.latent, self.model.architecture().latent_dim)?);
            let cdf = quantize_cdf(self.model.decode_probs(&zq)?.probs())?;
            let symbols = ac_decode(t.payload, &cdf, tile_len)?;
            let valid = (rec.occupancy_byte_count - i * tile_len).min(tile_len);
            if symbols[valid..].iter().any(|&s| s != 0) {
                return Err(Error::Corrupt(format!("segment {}: non-zero tile padding", rec.key.index)));
            }
            occupancy.extend_from_slice(&symbols[..valid]);
        }
        if crc32fast::hash(&occupancy) != rec.checksum {
            return Err(Error::Corrupt(format!("segment {}: occupancy checksum mismatch", rec.key.index)));
        }
        let points = decode_occupancy(&occupancy, params)?;
        Ok(Segment::from_points(rec.key, rec.min_timestamp, points))
    }

    /// Decodes a container into a canonically ordered stream.
    pub fn decode(&self, bytes: &[u8]) -> Result<EventStream> {
        let view = parse_container(bytes)?;
        let h = &view.header;
        if h.model_id != self.model_id {
            return Err(Error::ModelMismatch { expected: hex(&h.model_id), actual: hex(&self.model_id) });
        }
        let arch = self.model.architecture();
        if h.tile_len != arch.tile_len || h.latent_dim != arch.latent_dim {
            return Err(Error::Format("container tile shape does not match the model".into()));
        }
        let cfg = PreprocessConfig::new(h.segment_len)?;
        let params = compute_depth(u64::from(h.width), u64::from(h.height), h.segment_len)?;
        let segments: Vec<Segment> =
            view.segments.par_iter().map(|rec| self.decode_segment(rec, params)).collect::<Result<_>>()?;
        reassemble_stream(&segments, &cfg, h.width, h.height)
    }
}

pub fn encode_stream<F: Scalar>(
    stream: &EventStream,
    model: &HyperpriorModel<F>,
    cfg: &PreprocessConfig,
) -> Result<Vec<u8>> {
    Codec::new(model)?.encode(stream, cfg)
}

pub fn decode_stream<F: Scalar>(bytes: &[u8], model: &HyperpriorModel<F>) -> Result<EventStream> {
    Codec::new(model)?.decode(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::Event;
    use crate::hyperprior::Architecture;
    use rand::SeedableRng;

    fn model() -> HyperpriorModel<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        HyperpriorModel::initialized(Architecture::default(), &mut rng).unwrap()
    }

    #[test]
    fn empty_stream_is_header_only() {
        let m = model();
        let bytes = encode_stream(&EventStream::empty(640, 480), &m, &PreprocessConfig::new(1024).unwrap()).unwrap();
        assert_eq!(bytes.len(), FIXED_HEADER_LEN + 1);
        let view = parse_container(&bytes).unwrap();
        assert_eq!(view.header.segment_count, 0);
        let b = measure_bitstream(&bytes).unwrap();
        assert_eq!((b.latent_bits, b.payload_bits, b.metadata_bits), (0, 0, 0));
        assert!(decode_stream(&bytes, &m).unwrap().is_empty());
    }

    #[test]
    fn single_event_trace() {
        let m = model();
        let s = EventStream::new(640, 480, vec![Event::new(0, 0, 0, Polarity::Positive)]);
        let bytes = encode_stream(&s, &m, &PreprocessConfig::new(1024).unwrap()).unwrap();
        let view = parse_container(&bytes).unwrap();
        assert_eq!(view.segments.len(), 1);
        let seg = &view.segments[0];
        assert_eq!(seg.occupancy_byte_count, 10);
        assert_eq!(seg.tiles.len(), 1);
        assert_eq!(seg.tiles[0].latent.len(), 6);
        let b = measure_bitstream(&bytes).unwrap();
        assert_eq!(b.latent_bits, 48);
        assert_eq!(b.total_bits(), 8 * bytes.len() as u64);
        assert_eq!(decode_stream(&bytes, &m).unwrap(), s);
    }

    #[test]
    fn min_timestamp_restored() {
        let m = model();
        let s = EventStream::new(
            64,
            64,
            vec![Event::new(3, 4, 5000, Polarity::Negative), Event::new(9, 1, 5003, Polarity::Negative)],
        );
        let bytes = encode_stream(&s, &m, &PreprocessConfig::new(1024).unwrap()).unwrap();
        assert_eq!(decode_stream(&bytes, &m).unwrap(), s);
    }

    #[test]
    fn wrong_model_refused() {
        let m = model();
        let other = HyperpriorModel::<f32>::zeroed(Architecture::default()).unwrap();
        let s = EventStream::new(64, 64, vec![Event::new(1, 1, 1, Polarity::Positive)]);
        let bytes = encode_stream(&s, &m, &PreprocessConfig::new(1024).unwrap()).unwrap();
        assert!(matches!(decode_stream(&bytes, &other), Err(Error::ModelMismatch { .. })));
    }

    #[test]
    fn corruption_detected() {
        let m = model();
        let s = EventStream::new(
            64,
            64,
            (0..200).map(|i| Event::new(i % 64, i / 4, u64::from(i), Polarity::Positive)).collect(),
        );
        let bytes = encode_stream(&s, &m, &PreprocessConfig::new(1024).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_stream(&bad, &m), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_stream(&bad, &m), Err(Error::Format(_))));
        assert!(decode_stream(&bytes[..bytes.len() - 1], &m).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 0x5a;
        assert!(decode_stream(&bad, &m).is_err());
    }
}
