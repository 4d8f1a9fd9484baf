//! The `.tgh` model format.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! header      80 bytes   see `Header`
//! directory   21 bytes per non-empty segment
//! geometry    44 bytes per Gaussian
//! appearance  256 code lengths | u64 symbol count | Huffman bit stream
//! checksum    u64 CRC-64/XZ over everything before it
//! ```
//!
//! Segments appear level by level (root first, ascending index), then the
//! global segment. Within a segment, diffuse Gaussians come first, then
//! view-dependent ones, each in ascending id order. The appearance stream is
//! the concatenation of every Gaussian's 45 residual coefficients as f16 in
//! that same order, entropy coded as one stream.
//!
//! Encoding quantizes first and files the quantized Gaussians afresh, so a
//! decoded model re-encodes to the same bytes.

pub mod huffman;

use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use half::f16;
use nalgebra::{Vector3, Vector4};

use crate::appearance::group_by_appearance;
use crate::error::{Error, Result};
use crate::gaussians::Gaussian4D;
use crate::hierarchy::{GaussianId, Hierarchy, Placement};
use crate::sh::RESIDUAL_LEN;

pub const MAGIC: [u8; 4] = *b"TGH1";
pub const VERSION: u16 = 1;
/// Written as `FF FE`; a big-endian reader sees `0xFFFE`.
pub const ENDIAN_MARKER: u16 = 0xFEFF;
pub const HEADER_LEN: usize = 80;
pub const DIRECTORY_ENTRY_LEN: usize = 21;
pub const RECORD_LEN: usize = 44;
pub const TABLE_LEN: usize = huffman::ALPHABET + 8;
pub const CHECKSUM_LEN: usize = 8;
pub const GLOBAL_LEVEL: u8 = 0xFF;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Fixed-size file header.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u16,
    pub duration: f64,
    pub root_length: f64,
    pub num_levels: u32,
    pub opacity_threshold: f64,
    pub num_gaussians: u64,
    pub num_segments: u32,
    pub num_view_dependent: u64,
    pub directory_len: u64,
    pub geometry_len: u64,
    pub appearance_len: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectoryEntry {
    pub placement: Placement,
    /// Byte offset of the first record within the geometry section.
    pub offset: u64,
    pub count: u32,
    pub diffuse: u32,
}

/// Byte counts per section.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    pub header: usize,
    pub directory: usize,
    pub geometry: usize,
    pub appearance_table: usize,
    pub appearance_stream: usize,
    pub checksum: usize,
    pub total: usize,
    /// Size the residual coefficients would take as raw f16.
    pub appearance_raw: usize,
}

impl SizeReport {
    pub fn appearance(&self) -> usize {
        self.appearance_table + self.appearance_stream
    }

    pub fn section_sum(&self) -> usize {
        self.header + self.directory + self.geometry + self.appearance_table + self.appearance_stream + self.checksum
    }
}

// ---- quantization ---------------------------------------------------------

fn f16_bits(v: f64) -> u16 {
    let h = f16::from_f64(v);
    // Collapse -0 so that a zero residual is always zero bytes.
    if h == f16::ZERO {
        0
    } else {
        h.to_bits()
    }
}

fn unorm8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Fixed-size geometry record plus the residual coefficients as f16 bits.
#[derive(Clone, Debug, PartialEq)]
struct Quantized {
    mu: [f32; 4],
    log_scale: [u16; 4],
    rotors: [u16; 8],
    opacity: u8,
    color: [u8; 3],
    sh: [u16; RESIDUAL_LEN],
}

impl Quantized {
    fn from_gaussian(g: &Gaussian4D) -> Self {
        let mut rotors = [0u16; 8];
        for k in 0..4 {
            rotors[k] = f16_bits(g.rotor_left[k]);
            rotors[4 + k] = f16_bits(g.rotor_right[k]);
        }
        let mut sh = [0u16; RESIDUAL_LEN];
        for (q, &v) in sh.iter_mut().zip(&g.sh_residual) {
            *q = f16_bits(v);
        }
        Quantized {
            mu: g.mu.map(|v| v as f32).into(),
            log_scale: g.scale.map(|v| f16_bits(v.max(f64::MIN_POSITIVE).ln())).into(),
            rotors,
            opacity: unorm8(g.opacity),
            color: g.base_color.map(unorm8).into(),
            sh,
        }
    }

    fn to_gaussian(&self) -> Gaussian4D {
        let h = |b: u16| f16::from_bits(b).to_f64();
        let mut sh_residual = [0.0; RESIDUAL_LEN];
        for (v, &b) in sh_residual.iter_mut().zip(&self.sh) {
            *v = h(b);
        }
        Gaussian4D {
            mu: Vector4::from_fn(|i, _| self.mu[i] as f64),
            scale: Vector4::from_fn(|i, _| h(self.log_scale[i]).exp()),
            rotor_left: Vector4::from_fn(|i, _| h(self.rotors[i])),
            rotor_right: Vector4::from_fn(|i, _| h(self.rotors[4 + i])),
            opacity: self.opacity as f64 / 255.0,
            base_color: Vector3::from_fn(|i, _| self.color[i] as f64 / 255.0),
            sh_residual,
        }
    }

    fn write_record(&self, out: &mut Vec<u8>) {
        for v in self.mu {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.log_scale.iter().chain(&self.rotors) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.opacity);
        out.extend_from_slice(&self.color);
    }

    fn read_record(r: &mut Reader<'_>) -> Result<Self> {
        let mut q = Quantized {
            mu: [0.0; 4],
            log_scale: [0; 4],
            rotors: [0; 8],
            opacity: 0,
            color: [0; 3],
            sh: [0; RESIDUAL_LEN],
        };
        for v in q.mu.iter_mut() {
            *v = r.f32()?;
        }
        for v in q.log_scale.iter_mut().chain(q.rotors.iter_mut()) {
            *v = r.u16()?;
        }
        q.opacity = r.u8()?;
        for v in q.color.iter_mut() {
            *v = r.u8()?;
        }
        Ok(q)
    }
}

/// The value a Gaussian takes after an encode/decode roundtrip.
pub fn quantize(g: &Gaussian4D) -> Gaussian4D {
    Quantized::from_gaussian(g).to_gaussian()
}

// ---- byte plumbing --------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("{} truncated at byte {}", self.what, self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Header {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&ENDIAN_MARKER.to_le_bytes());
        out.extend_from_slice(&self.duration.to_le_bytes());
        out.extend_from_slice(&self.root_length.to_le_bytes());
        out.extend_from_slice(&self.num_levels.to_le_bytes());
        out.extend_from_slice(&self.opacity_threshold.to_le_bytes());
        out.extend_from_slice(&self.num_gaussians.to_le_bytes());
        out.extend_from_slice(&self.num_segments.to_le_bytes());
        out.extend_from_slice(&self.num_view_dependent.to_le_bytes());
        out.extend_from_slice(&self.directory_len.to_le_bytes());
        out.extend_from_slice(&self.geometry_len.to_le_bytes());
        out.extend_from_slice(&self.appearance_len.to_le_bytes());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4)? != MAGIC {
            return Err(Error::Integrity("bad magic, not a .tgh model".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        if r.u16()? != ENDIAN_MARKER {
            return Err(Error::Integrity("byte-order marker mismatch".into()));
        }
        Ok(Header {
            version,
            duration: r.f64()?,
            root_length: r.f64()?,
            num_levels: r.u32()?,
            opacity_threshold: r.f64()?,
            num_gaussians: r.u64()?,
            num_segments: r.u32()?,
            num_view_dependent: r.u64()?,
            directory_len: r.u64()?,
            geometry_len: r.u64()?,
            appearance_len: r.u64()?,
        })
    }
}

fn placement_to_wire(p: Placement) -> (u8, u32) {
    match p {
        Placement::Level { level, index } => (level as u8, index as u32),
        Placement::Global => (GLOBAL_LEVEL, 0),
    }
}

fn placement_from_wire(level: u8, index: u32) -> Placement {
    if level == GLOBAL_LEVEL {
        Placement::Global
    } else {
        Placement::Level {
            level: level as usize,
            index: index as usize,
        }
    }
}

// ---- encode / decode ------------------------------------------------------

/// Serializes `h`. Refuses models that fail the hierarchy audit.
pub fn encode(h: &Hierarchy) -> Result<Vec<u8>> {
    h.audit()?;
    let mut q = h.empty_like();
    let mut quantized = Vec::with_capacity(h.len());
    for (_, g) in h.iter() {
        let qg = Quantized::from_gaussian(g);
        q.insert(qg.to_gaussian())?;
        quantized.push(qg);
    }

    let mut directory = Vec::new();
    let mut geometry = Vec::with_capacity(h.len() * RECORD_LEN);
    let mut stream = Vec::with_capacity(h.len() * RESIDUAL_LEN * 2);
    let mut num_segments = 0u32;
    let mut num_vd = 0u64;
    for (placement, seg) in q.index().segments() {
        if seg.members.is_empty() {
            continue;
        }
        let (diffuse, vd) = group_by_appearance(seg.members.iter().map(|&id| (id, q.get(id).expect("member stored"))));
        let (level, index) = placement_to_wire(placement);
        directory.push(level);
        directory.extend_from_slice(&index.to_le_bytes());
        directory.extend_from_slice(&(geometry.len() as u64).to_le_bytes());
        directory.extend_from_slice(&(seg.members.len() as u32).to_le_bytes());
        directory.extend_from_slice(&(diffuse.len() as u32).to_le_bytes());
        num_segments += 1;
        num_vd += vd.len() as u64;
        for GaussianId(id) in diffuse.into_iter().chain(vd) {
            let rec = &quantized[id as usize];
            rec.write_record(&mut geometry);
            for c in rec.sh {
                stream.extend_from_slice(&c.to_le_bytes());
            }
        }
    }

    let lengths = huffman::code_lengths(&huffman::frequencies(&stream));
    let coded = huffman::encode(&stream, &lengths)?;
    let mut appearance = Vec::with_capacity(TABLE_LEN + coded.len());
    appearance.extend_from_slice(&lengths);
    appearance.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    appearance.extend_from_slice(&coded);

    let header = Header {
        version: VERSION,
        duration: h.duration(),
        root_length: h.root_length(),
        num_levels: h.num_levels() as u32,
        opacity_threshold: h.opacity_threshold(),
        num_gaussians: h.len() as u64,
        num_segments,
        num_view_dependent: num_vd,
        directory_len: directory.len() as u64,
        geometry_len: geometry.len() as u64,
        appearance_len: appearance.len() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + directory.len() + geometry.len() + appearance.len() + CHECKSUM_LEN);
    header.write(&mut out);
    debug_assert_eq!(out.len(), HEADER_LEN);
    out.extend_from_slice(&directory);
    out.extend_from_slice(&geometry);
    out.extend_from_slice(&appearance);
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn verify_checksum(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if CRC64.checksum(body) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    Ok(body)
}

/// Parses and validates the header, including section lengths.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let body = verify_checksum(bytes)?;
    let header = Header::read(&mut Reader::new(body, "header"))?;
    let expected = HEADER_LEN as u64 + header.directory_len + header.geometry_len + header.appearance_len;
    if expected != body.len() as u64 {
        return Err(Error::Integrity(format!(
            "section lengths sum to {expected} bytes, body has {}",
            body.len()
        )));
    }
    if header.directory_len != header.num_segments as u64 * DIRECTORY_ENTRY_LEN as u64
        || header.geometry_len != header.num_gaussians * RECORD_LEN as u64
        || header.appearance_len < TABLE_LEN as u64
    {
        return Err(Error::Integrity("section lengths disagree with counts".into()));
    }
    Ok(header)
}

pub fn read_directory(bytes: &[u8]) -> Result<Vec<DirectoryEntry>> {
    let header = read_header(bytes)?;
    let mut r = Reader::new(&bytes[HEADER_LEN..HEADER_LEN + header.directory_len as usize], "directory");
    let mut entries = Vec::with_capacity(header.num_segments as usize);
    for _ in 0..header.num_segments {
        let level = r.u8()?;
        let index = r.u32()?;
        entries.push(DirectoryEntry {
            placement: placement_from_wire(level, index),
            offset: r.u64()?,
            count: r.u32()?,
            diffuse: r.u32()?,
        });
    }
    Ok(entries)
}

/// Reconstructs the quantized model. Ids are reassigned in file order.
pub fn decode(bytes: &[u8]) -> Result<Hierarchy> {
    let header = read_header(bytes)?;
    let entries = read_directory(bytes)?;
    let geo_start = HEADER_LEN + header.directory_len as usize;
    let app_start = geo_start + header.geometry_len as usize;
    let app_end = app_start + header.appearance_len as usize;

    let mut ar = Reader::new(&bytes[app_start..app_end], "appearance");
    let lengths: [u8; huffman::ALPHABET] = ar.take(huffman::ALPHABET)?.try_into().expect("256 bytes");
    let symbols = ar.u64()?;
    if symbols != header.num_gaussians * (RESIDUAL_LEN as u64) * 2 {
        return Err(Error::Integrity("appearance symbol count disagrees with header".into()));
    }
    let stream = huffman::decode(&bytes[app_start + TABLE_LEN..app_end], &lengths, symbols as usize)?;

    let mut h = Hierarchy::with_threshold(
        header.duration,
        header.root_length,
        header.num_levels as usize,
        header.opacity_threshold,
    )?;
    let mut gr = Reader::new(&bytes[geo_start..app_start], "geometry");
    let mut sh = stream.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]));
    let mut expected_offset = 0u64;
    let mut vd_total = 0u64;
    for e in &entries {
        if e.offset != expected_offset || e.count == 0 || e.diffuse > e.count {
            return Err(Error::Integrity(format!("inconsistent directory entry for {}", e.placement)));
        }
        expected_offset += e.count as u64 * RECORD_LEN as u64;
        for k in 0..e.count {
            let mut q = Quantized::read_record(&mut gr)?;
            for c in q.sh.iter_mut() {
                *c = sh.next().expect("symbol count checked");
            }
            let g = q.to_gaussian();
            if (k < e.diffuse) != g.is_diffuse() {
                return Err(Error::Integrity(format!("appearance grouping violated in {}", e.placement)));
            }
            let id = h.insert(g)?;
            if h.placement_of(id) != Some(e.placement) {
                return Err(Error::Integrity(format!(
                    "gaussian {id} belongs in {}, directory says {}",
                    h.placement_of(id).expect("just inserted"),
                    e.placement
                )));
            }
        }
        vd_total += (e.count - e.diffuse) as u64;
    }
    if h.len() as u64 != header.num_gaussians || vd_total != header.num_view_dependent {
        return Err(Error::Integrity("decoded counts disagree with header".into()));
    }
    h.audit()?;
    Ok(h)
}

pub fn size_report(bytes: &[u8]) -> Result<SizeReport> {
    let header = read_header(bytes)?;
    Ok(SizeReport {
        header: HEADER_LEN,
        directory: header.directory_len as usize,
        geometry: header.geometry_len as usize,
        appearance_table: TABLE_LEN,
        appearance_stream: header.appearance_len as usize - TABLE_LEN,
        checksum: CHECKSUM_LEN,
        total: bytes.len(),
        appearance_raw: header.num_gaussians as usize * RESIDUAL_LEN * 2,
    })
}

pub fn save_model(h: &Hierarchy, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(h)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Hierarchy> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::test_support::random_gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize, vd_fraction: f64, seed: u64) -> Hierarchy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = Hierarchy::build(20.0, 10.0, 9).unwrap();
        for _ in 0..n {
            let mut g = random_gaussian(&mut rng);
            g.mu.w = rng.random_range(0.0..20.0);
            g.scale.w = 10f64.powf(rng.random_range(-2.0..0.5));
            g.opacity = rng.random_range(0.0..1.0);
            g.base_color = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
            if rng.random_bool(vd_fraction) {
                for v in g.sh_residual.iter_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            } else {
                g.sh_residual = [0.0; RESIDUAL_LEN];
            }
            h.insert(g).unwrap();
        }
        h
    }

    fn params_of(h: &Hierarchy) -> Vec<(Placement, Vec<u64>)> {
        let mut v: Vec<_> = h
            .iter()
            .map(|(id, g)| (h.placement_of(id).unwrap(), g.to_params().iter().map(|x| x.to_bits()).collect()))
            .collect();
        v.sort_by(|a, b| format!("{:?}", a).cmp(&format!("{:?}", b)));
        v
    }

    #[test]
    fn fixpoint_and_lossless_roundtrip() {
        let h = model(800, 0.3, 1);
        let bytes = encode(&h).unwrap();
        let d = decode(&bytes).unwrap();
        assert_eq!(encode(&d).unwrap(), bytes);
        // Every stored parameter equals the quantized original.
        let mut q = h.empty_like();
        for (_, g) in h.iter() {
            q.insert(quantize(g)).unwrap();
        }
        assert_eq!(params_of(&d), params_of(&q));
        assert_eq!(d.len(), h.len());
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode(&model(200, 0.5, 2)).unwrap(), encode(&model(200, 0.5, 2)).unwrap());
    }

    #[test]
    fn empty_model() {
        let h = Hierarchy::build(5.0, 10.0, 3).unwrap();
        let bytes = encode(&h).unwrap();
        let r = size_report(&bytes).unwrap();
        assert_eq!((r.directory, r.geometry, r.appearance_stream), (0, 0, 0));
        let d = decode(&bytes).unwrap();
        assert!(d.is_empty());
        assert_eq!((d.duration(), d.root_length(), d.num_levels()), (5.0, 10.0, 3));
    }

    #[test]
    fn bit_flips_are_detected() {
        let bytes = encode(&model(50, 0.5, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut b = bytes.clone();
            let i = rng.random_range(0..b.len());
            b[i] ^= 1 << rng.random_range(0..8);
            assert!(matches!(decode(&b), Err(Error::Integrity(_))));
        }
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn unknown_version_is_reported() {
        let mut bytes = encode(&model(10, 0.5, 5)).unwrap();
        bytes[4..6].copy_from_slice(&7u16.to_le_bytes());
        let n = bytes.len() - CHECKSUM_LEN;
        let crc = CRC64.checksum(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version(7))));
    }

    #[test]
    fn sections_sum_to_file_size() {
        for vd in [0.0, 0.15, 1.0] {
            let bytes = encode(&model(300, vd, 6)).unwrap();
            let r = size_report(&bytes).unwrap();
            assert_eq!(r.section_sum(), bytes.len());
            assert_eq!(r.total, bytes.len());
        }
    }

    #[test]
    fn directory_offsets_increase_and_counts_match() {
        let h = model(1000, 0.2, 7);
        let bytes = encode(&h).unwrap();
        let entries = read_directory(&bytes).unwrap();
        assert!(entries.windows(2).all(|w| w[0].offset < w[1].offset));
        assert_eq!(entries.iter().map(|e| e.count as usize).sum::<usize>(), h.len());
        let d = decode(&bytes).unwrap();
        let nonempty: Vec<Placement> = d.index().segments().filter(|(_, s)| !s.members.is_empty()).map(|(p, _)| p).collect();
        assert_eq!(entries.iter().map(|e| e.placement).collect::<Vec<_>>(), nonempty);
    }

    #[test]
    fn diffuse_coefficients_are_contiguous_zero_bytes() {
        let h = model(600, 0.3, 8);
        let bytes = encode(&h).unwrap();
        let header = read_header(&bytes).unwrap();
        let start = HEADER_LEN + header.directory_len as usize + header.geometry_len as usize;
        let end = start + header.appearance_len as usize;
        let lengths: [u8; 256] = bytes[start..start + 256].try_into().unwrap();
        let count = u64::from_le_bytes(bytes[start + 256..start + 264].try_into().unwrap()) as usize;
        let stream = huffman::decode(&bytes[start + TABLE_LEN..end], &lengths, count).unwrap();
        let per = RESIDUAL_LEN * 2;
        let mut pos = 0;
        for e in read_directory(&bytes).unwrap() {
            let block = &stream[pos..pos + e.count as usize * per];
            let (diffuse, vd) = block.split_at(e.diffuse as usize * per);
            assert!(diffuse.iter().all(|&b| b == 0));
            for g in vd.chunks_exact(per) {
                assert!(g.iter().any(|&b| b != 0));
            }
            pos += block.len();
        }
        assert_eq!(pos, stream.len());
    }

    #[test]
    fn diffuse_only_uses_degenerate_code() {
        let h = model(400, 0.0, 9);
        let bytes = encode(&h).unwrap();
        let r = size_report(&bytes).unwrap();
        let coefficients = h.len() * RESIDUAL_LEN;
        assert!(r.appearance_stream * 8 <= coefficients);
        assert_eq!(r.appearance_stream, 0);
        assert_eq!(r.appearance_table, TABLE_LEN);
    }

    #[test]
    fn mostly_diffuse_payload_matches_optimal_code() {
        let h = model(2000, 0.15, 10);
        let bytes = encode(&h).unwrap();
        let r = size_report(&bytes).unwrap();
        // Oracle: optimal prefix-code cost of the raw stream, from merged weights.
        let mut stream = Vec::new();
        let d = decode(&bytes).unwrap();
        for (_, g) in d.iter() {
            for &v in &g.sh_residual {
                stream.extend_from_slice(&f16_bits(v).to_le_bytes());
            }
        }
        let freqs = huffman::frequencies(&stream);
        let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<u64>> =
            freqs.iter().copied().filter(|&f| f > 0).map(std::cmp::Reverse).collect();
        let mut cost = 0u64;
        while heap.len() > 1 {
            let std::cmp::Reverse(a) = heap.pop().unwrap();
            let std::cmp::Reverse(b) = heap.pop().unwrap();
            cost += a + b;
            heap.push(std::cmp::Reverse(a + b));
        }
        assert_eq!(r.appearance_stream as u64, cost.div_ceil(8));
        let ratio = r.appearance_stream as f64 / r.appearance_raw as f64;
        // Each zero byte still costs one bit, which bounds the ratio from below.
        let zero_share = freqs[0] as f64 / stream.len() as f64;
        assert!(ratio >= zero_share / 8.0);
        assert!(ratio < 0.5, "ratio {ratio}");
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use crate::gaussians::test_support::random_gaussian;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn decode_then_encode_is_identity(seed in any::<u64>(), n in 0usize..120, levels in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = Hierarchy::build(30.0, 10.0, levels).unwrap();
            for _ in 0..n {
                let mut g = random_gaussian(&mut rng);
                g.mu.w = rng.random_range(0.0..30.0);
                g.scale.w = 10f64.powf(rng.random_range(-2.0..1.0));
                if rng.random_bool(0.5) {
                    g.sh_residual = [0.0; RESIDUAL_LEN];
                }
                h.insert(g).unwrap();
            }
            let bytes = encode(&h).unwrap();
            let d = decode(&bytes).unwrap();
            prop_assert_eq!(d.len(), h.len());
            d.audit().unwrap();
            prop_assert_eq!(encode(&d).unwrap(), bytes.clone());
            prop_assert_eq!(size_report(&bytes).unwrap().section_sum(), bytes.len());
        }
    }
}
