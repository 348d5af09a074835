//! Semantic codec: digits map to image classes, images map to bit vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const BITS_PER_CHANNEL: usize = 8;
pub const IMAGE_BYTES: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;
pub const IMAGE_BITS: usize = IMAGE_BYTES * BITS_PER_CHANNEL;
pub const NUM_CLASSES: usize = 10;

const CIFAR_RECORD: usize = 1 + IMAGE_BYTES;
const CIFAR_PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;

/// A confidential digit in `0..=9`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Message(u8);

impl Message {
    pub fn new(value: u8) -> Result<Self> {
        if value as usize >= NUM_CLASSES {
            return Err(Error::InvalidMessage(value));
        }
        Ok(Message(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Message> {
        (0..NUM_CLASSES as u8).map(Message)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Message(rng.random_range(0..NUM_CLASSES as u8))
    }
}

impl TryFrom<u8> for Message {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Message::new(v)
    }
}

impl From<Message> for u8 {
    fn from(m: Message) -> u8 {
        m.0
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticTag {
    Airplane,
    Automobile,
    Bird,
    Cat,
    Deer,
    Dog,
    Frog,
    Horse,
    Ship,
    Truck,
}

impl SemanticTag {
    /// Tags in CIFAR-10 label order.
    pub const ALL: [SemanticTag; NUM_CLASSES] = [
        SemanticTag::Airplane,
        SemanticTag::Automobile,
        SemanticTag::Bird,
        SemanticTag::Cat,
        SemanticTag::Deer,
        SemanticTag::Dog,
        SemanticTag::Frog,
        SemanticTag::Horse,
        SemanticTag::Ship,
        SemanticTag::Truck,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticTag::Airplane => "airplane",
            SemanticTag::Automobile => "automobile",
            SemanticTag::Bird => "bird",
            SemanticTag::Cat => "cat",
            SemanticTag::Deer => "deer",
            SemanticTag::Dog => "dog",
            SemanticTag::Frog => "frog",
            SemanticTag::Horse => "horse",
            SemanticTag::Ship => "ship",
            SemanticTag::Truck => "truck",
        }
    }
}

impl fmt::Display for SemanticTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SemanticTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown semantic tag {s:?}")))
    }
}

/// Bijection between messages and semantic tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    to_tag: [SemanticTag; NUM_CLASSES],
    to_message: [u8; NUM_CLASSES],
}

impl MappingTable {
    /// `entries[m]` is the tag for message `m`. Fails unless the entries are a
    /// permutation of all ten tags.
    pub fn new(entries: [SemanticTag; NUM_CLASSES]) -> Result<Self> {
        let mut to_message = [u8::MAX; NUM_CLASSES];
        for (m, tag) in entries.iter().enumerate() {
            let slot = &mut to_message[tag.index()];
            if *slot != u8::MAX {
                return Err(Error::InvalidMapping(format!("tag {tag} mapped twice")));
            }
            *slot = m as u8;
        }
        Ok(MappingTable {
            to_tag: entries,
            to_message,
        })
    }

    /// 0 = airplane, 1 = automobile, ..., 9 = truck.
    pub fn standard() -> Self {
        Self::new(SemanticTag::ALL).expect("CIFAR order is a permutation")
    }

    pub fn message_to_tag(&self, m: Message) -> SemanticTag {
        self.to_tag[m.0 as usize]
    }

    pub fn tag_to_message(&self, tag: SemanticTag) -> Message {
        Message(self.to_message[tag.index()])
    }
}

impl Default for MappingTable {
    fn default() -> Self {
        Self::standard()
    }
}

/// Uniform draw over the nine digits different from `m`.
pub fn choose_falsified<R: Rng + ?Sized>(m: Message, rng: &mut R) -> Message {
    let k = rng.random_range(0..NUM_CLASSES as u8 - 1);
    Message(if k >= m.0 { k + 1 } else { k })
}

/// A 32x32 RGB image. `pixels` is row-major, channels interleaved R,G,B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    #[serde(with = "hex_bytes")]
    pixels: Vec<u8>,
    pub tag: SemanticTag,
}

impl ImageRecord {
    pub fn new(pixels: Vec<u8>, tag: SemanticTag) -> Result<Self> {
        if pixels.len() != IMAGE_BYTES {
            return Err(Error::LengthMismatch {
                expected: IMAGE_BYTES,
                actual: pixels.len(),
            });
        }
        Ok(ImageRecord { pixels, tag })
    }

    pub fn black(tag: SemanticTag) -> Self {
        ImageRecord {
            pixels: vec![0; IMAGE_BYTES],
            tag,
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Offset of channel `c` of pixel `(row, col)` in [`Self::pixels`].
    pub fn offset(row: usize, col: usize, c: usize) -> usize {
        (row * IMAGE_SIDE + col) * CHANNELS + c
    }

    pub fn get(&self, row: usize, col: usize, c: usize) -> u8 {
        self.pixels[Self::offset(row, col, c)]
    }

    /// Largest per-channel absolute difference, in 8-bit levels.
    pub fn max_abs_diff(&self, other: &ImageRecord) -> u8 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap_or(0)
    }

    /// Writes the image as a lossless PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer(
            path,
            &self.pixels,
            IMAGE_SIDE as u32,
            IMAGE_SIDE as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// Packed bit sequence, most significant bit first within each byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitVector {
    bytes: Vec<u8>,
    len: usize,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        BitVector {
            bytes: vec![0; len.div_ceil(8)],
            len,
        }
    }

    /// Whole bytes, MSB first.
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let len = bytes.len() * 8;
        BitVector { bytes, len }
    }

    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut bytes = Vec::new();
        let mut len = 0;
        for b in bits {
            if len % 8 == 0 {
                bytes.push(0);
            }
            if b {
                bytes[len / 8] |= 0x80 >> (len % 8);
            }
            len += 1;
        }
        BitVector { bytes, len }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut bytes = vec![0u8; len.div_ceil(8)];
        rng.fill(bytes.as_mut_slice());
        let mut v = BitVector { bytes, len };
        v.clear_tail();
        v
    }

    fn clear_tail(&mut self) {
        if self.len % 8 != 0 {
            if let Some(last) = self.bytes.last_mut() {
                *last &= 0xFFu8 << (8 - self.len % 8);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let m = 0x80 >> (i % 8);
        if value {
            self.bytes[i / 8] |= m;
        } else {
            self.bytes[i / 8] &= !m;
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn xor(&self, other: &BitVector) -> Result<BitVector> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                actual: other.len,
            });
        }
        Ok(BitVector {
            bytes: self.bytes.iter().zip(&other.bytes).map(|(a, b)| a ^ b).collect(),
            len: self.len,
        })
    }

    /// Hamming distance; panics on length mismatch.
    pub fn hamming(&self, other: &BitVector) -> usize {
        self.xor(other).expect("hamming on unequal lengths").count_ones()
    }
}

/// Serializes pixels row-major, R,G,B per pixel, MSB first per channel byte.
pub fn image_to_bits(img: &ImageRecord) -> BitVector {
    BitVector::from_bytes(img.pixels.clone())
}

/// Inverse of [`image_to_bits`]. The bit stream carries no tag, so the result
/// is tagged with `tag` (receivers overwrite it after classification).
pub fn bits_to_image(bits: &BitVector, tag: SemanticTag) -> Result<ImageRecord> {
    if bits.len() != IMAGE_BITS {
        return Err(Error::LengthMismatch {
            expected: IMAGE_BITS,
            actual: bits.len(),
        });
    }
    Ok(ImageRecord {
        pixels: bits.bytes.clone(),
        tag,
    })
}

/// Stable identifier of an image inside an [`ImageDatabase`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageId {
    pub tag: SemanticTag,
    pub index: usize,
}

/// Class-bucketed image store.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDatabase {
    classes: BTreeMap<SemanticTag, Vec<ImageRecord>>,
    provenance: String,
}

impl ImageDatabase {
    /// Buckets `images` by tag. Fails if any of the ten buckets ends up empty.
    pub fn from_images(images: Vec<ImageRecord>, provenance: impl Into<String>) -> Result<Self> {
        let mut classes: BTreeMap<SemanticTag, Vec<ImageRecord>> = BTreeMap::new();
        for img in images {
            classes.entry(img.tag).or_default().push(img);
        }
        for tag in SemanticTag::ALL {
            if classes.get(&tag).is_none_or(|b| b.is_empty()) {
                return Err(Error::EmptyClassBucket(tag.to_string()));
            }
        }
        Ok(ImageDatabase {
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn bucket(&self, tag: SemanticTag) -> &[ImageRecord] {
        self.classes.get(&tag).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, id: ImageId) -> Option<&ImageRecord> {
        self.bucket(id.tag).get(id.index)
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All images with their ids, in (tag, index) order.
    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &ImageRecord)> {
        self.classes.iter().flat_map(|(&tag, imgs)| {
            imgs.iter()
                .enumerate()
                .map(move |(index, img)| (ImageId { tag, index }, img))
        })
    }

    /// Deterministic per-class split: a `holdout_fraction` share of every bucket
    /// (at least one image when the bucket has two or more) goes to the second list.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> (Vec<ImageId>, Vec<ImageId>) {
        use rand::seq::SliceRandom;
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (&tag, imgs) in &self.classes {
            let mut ids: Vec<ImageId> = (0..imgs.len()).map(|index| ImageId { tag, index }).collect();
            let mut rng = crate::seed::rng(seed, &[crate::seed::label("split"), tag.index() as u64]);
            ids.shuffle(&mut rng);
            let mut n_held = (imgs.len() as f64 * holdout_fraction).round() as usize;
            if holdout_fraction > 0.0 && imgs.len() >= 2 {
                n_held = n_held.clamp(1, imgs.len() - 1);
            }
            held.extend_from_slice(&ids[..n_held]);
            train.extend_from_slice(&ids[n_held..]);
        }
        (train, held)
    }
}

/// Picks an image uniformly from the bucket of `m`'s tag.
pub fn encode_visual<'a, R: Rng + ?Sized>(
    m: Message,
    db: &'a ImageDatabase,
    table: &MappingTable,
    rng: &mut R,
) -> Result<(ImageId, &'a ImageRecord)> {
    let tag = table.message_to_tag(m);
    let bucket = db.bucket(tag);
    if bucket.is_empty() {
        return Err(Error::EmptyClassBucket(tag.to_string()));
    }
    let index = rng.random_range(0..bucket.len());
    Ok((ImageId { tag, index }, &bucket[index]))
}

/// Parses the CIFAR-10 binary layout: 3073-byte records, one label byte then
/// the R, G and B planes (1024 bytes each, row-major).
pub fn parse_cifar10(bytes: &[u8], provenance: &str) -> Result<ImageDatabase> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::MalformedRecord(format!(
            "file length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (n, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let tag = SemanticTag::from_index(rec[0] as usize).ok_or_else(|| {
            Error::MalformedRecord(format!("record {n}: label byte {} exceeds 9", rec[0]))
        })?;
        let planes = &rec[1..];
        let mut pixels = vec![0u8; IMAGE_BYTES];
        for p in 0..CIFAR_PLANE {
            for c in 0..CHANNELS {
                pixels[p * CHANNELS + c] = planes[c * CIFAR_PLANE + p];
            }
        }
        images.push(ImageRecord { pixels, tag });
    }
    // Buckets may legitimately be empty for a partial file; only the pipeline
    // needs all ten, so bucket without the completeness check here.
    let mut classes: BTreeMap<SemanticTag, Vec<ImageRecord>> = BTreeMap::new();
    for img in images {
        classes.entry(img.tag).or_default().push(img);
    }
    Ok(ImageDatabase {
        classes,
        provenance: provenance.to_string(),
    })
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<ImageDatabase> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, &format!("cifar10:{}", path.display()))
}

/// Encodes images in the CIFAR-10 binary layout.
pub fn encode_cifar10<'a>(images: impl IntoIterator<Item = &'a ImageRecord>) -> Vec<u8> {
    let mut out = Vec::new();
    for img in images {
        out.push(img.tag.index() as u8);
        for c in 0..CHANNELS {
            out.extend((0..CIFAR_PLANE).map(|p| img.pixels[p * CHANNELS + c]));
        }
    }
    out
}

/// Procedural ten-class corpus of 32x32 images.
///
/// Each class has its own shape motif (bars, discs, stripes, checkers, ...)
/// drawn with random position, scale and colours over a class-tinted
/// background, plus mild pixel noise.
pub fn generate_synthetic_dataset(n_per_class: usize, seed: u64) -> Result<ImageDatabase> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    let mut images = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for tag in SemanticTag::ALL {
        for i in 0..n_per_class {
            let mut rng = crate::seed::rng(seed, &[crate::seed::label("synthetic"), tag.index() as u64, i as u64]);
            images.push(synth::render(tag, &mut rng));
        }
    }
    ImageDatabase::from_images(images, format!("synthetic:n={n_per_class},seed={seed}"))
}

mod synth {
    use super::*;

    /// Motif contrast against the background, in normalized units.
    const CONTRAST: (f64, f64) = (0.12, 0.24);
    const NOISE: f64 = 0.03;

    /// Classes differ only in motif geometry; background colour, motif sign,
    /// position and scale are nuisance variables shared by all classes.
    pub(super) fn render<R: Rng + ?Sized>(tag: SemanticTag, rng: &mut R) -> ImageRecord {
        let k = tag.index();
        let bg: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(0.3..0.7)).collect();
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let contrast = sign * rng.random_range(CONTRAST.0..CONTRAST.1);
        let fg: Vec<f64> = bg.iter().map(|b| b + contrast).collect();
        let cx = 16.0 + rng.random_range(-3.0..3.0);
        let cy = 16.0 + rng.random_range(-3.0..3.0);
        let scale = rng.random_range(0.85..1.15);
        let phase = rng.random_range(0.0..4.0);

        let mut pixels = vec![0u8; IMAGE_BYTES];
        for row in 0..IMAGE_SIDE {
            for col in 0..IMAGE_SIDE {
                let x = (col as f64 - cx) / scale;
                let y = (row as f64 - cy) / scale;
                let inside = motif(k, x, y, row as f64, col as f64, phase);
                for c in 0..CHANNELS {
                    let base = if inside { fg[c] } else { bg[c] };
                    let v = (base + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0);
                    pixels[ImageRecord::offset(row, col, c)] = (v * 255.0).round() as u8;
                }
            }
        }
        ImageRecord { pixels, tag }
    }

    fn motif(k: usize, x: f64, y: f64, row: f64, col: f64, phase: f64) -> bool {
        let r = (x * x + y * y).sqrt();
        match k {
            // wide thin bar with a short fin
            0 => (y.abs() < 2.0 && x.abs() < 12.0) || (x.abs() < 2.0 && (-6.0..0.0).contains(&y)),
            // box
            1 => x.abs() < 8.0 && y.abs() < 5.0,
            // disc
            2 => r < 6.0,
            // triangle
            3 => y > -8.0 && y < 8.0 && x.abs() < (y + 8.0) * 0.6,
            // vertical stripes
            4 => ((col + phase) / 3.0).floor() as i64 % 2 == 0,
            // ring
            5 => r > 5.0 && r < 9.0,
            // checkerboard
            6 => (((row + phase) / 4.0).floor() as i64 + ((col + phase) / 4.0).floor() as i64) % 2 == 0,
            // diagonal stripes
            7 => ((row + col + 2.0 * phase) / 4.0).floor() as i64 % 2 == 0,
            // horizontal stripes
            8 => ((row + phase) / 3.0).floor() as i64 % 2 == 0,
            // cross
            _ => (x.abs() < 2.5 && y.abs() < 10.0) || (y.abs() < 2.5 && x.abs() < 10.0),
        }
    }
}
