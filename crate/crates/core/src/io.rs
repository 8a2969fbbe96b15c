//! On-disk formats.
//!
//! Binary containers start with a four-byte magic followed by `u32`
//! little-endian header fields and a payload:
//!
//! | magic  | header            | payload                                   |
//! |--------|-------------------|-------------------------------------------|
//! | `HLSM` | H, W, level, id   | H·W bytes, 0 or 1, row-major              |
//! | `HLSF` | d, H, W           | d·H·W `f32`, channel-major                |
//! | `HLSC` | D, d              | encode (D·d `f32`) then decode (d·D `f32`) |
//!
//! Scenes, trees, dictionaries, manifests and reports are pretty-printed
//! JSON. Every reader re-validates the invariants of the type it returns.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embed::{LabelDictionary, SemanticCodec};
use crate::error::{ContainerError, Error, Result};
use crate::hierarchy::{Bitmask, MaskEntry, MaskTree, TreeNode};
use crate::raster::FeatureMap;
use crate::scene::{Camera, Level, Scene, SemanticLabel};
use crate::view::ViewPacket;

pub const MASK_MAGIC: [u8; 4] = *b"HLSM";
pub const FEATURE_MAGIC: [u8; 4] = *b"HLSF";
pub const CODEC_MAGIC: [u8; 4] = *b"HLSC";

/// Largest element count accepted from a container header.
pub const MAX_ELEMENTS: usize = 1 << 28;

type ContainerResult<T> = std::result::Result<T, ContainerError>;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: [u8; 4]) -> ContainerResult<Self> {
        let mut reader = Reader { bytes, pos: 0 };
        let found: [u8; 4] = reader.take(4)?.try_into().expect("four bytes");
        if found != magic {
            return Err(ContainerError::BadMagic { expected: magic, found });
        }
        Ok(reader)
    }

    fn take(&mut self, n: usize) -> ContainerResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ContainerError::Truncated {
            needed: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> ContainerResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn f32s(&mut self, n: usize) -> ContainerResult<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| overflow(n))?)?;
        raw.chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes(c.try_into().expect("four bytes"));
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(ContainerError::InvalidValue(format!("non-finite float {v}")))
                }
            })
            .collect()
    }

    fn finish(self) -> ContainerResult<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(ContainerError::TrailingBytes(extra)),
        }
    }
}

fn overflow(n: usize) -> ContainerError {
    ContainerError::DimensionOverflow(format!("{n} elements"))
}

fn element_count(dims: &[u32]) -> ContainerResult<usize> {
    let mut total = 1usize;
    for &d in dims {
        total = total.checked_mul(d as usize).ok_or_else(|| {
            ContainerError::DimensionOverflow(format!("dimensions {dims:?} overflow"))
        })?;
    }
    if total > MAX_ELEMENTS {
        return Err(ContainerError::DimensionOverflow(format!(
            "dimensions {dims:?} exceed {MAX_ELEMENTS} elements"
        )));
    }
    Ok(total)
}

fn dim_u32(value: usize) -> ContainerResult<u32> {
    u32::try_from(value).map_err(|_| overflow(value))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) -> ContainerResult<()> {
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(ContainerError::InvalidValue(format!("{v} does not fit in f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

pub fn encode_mask(mask: &MaskEntry) -> ContainerResult<Vec<u8>> {
    let (h, w) = (mask.mask.height, mask.mask.width);
    let mut out = Vec::with_capacity(20 + h * w);
    out.extend_from_slice(&MASK_MAGIC);
    for v in [dim_u32(h)?, dim_u32(w)?, mask.level.index(), mask.id] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(mask.mask.bits.iter().map(|&b| u8::from(b)));
    Ok(out)
}

/// Decodes a mask container; the view is not stored in the file.
pub fn decode_mask(bytes: &[u8], view_id: u32) -> ContainerResult<MaskEntry> {
    let mut r = Reader::new(bytes, MASK_MAGIC)?;
    let (h, w, level, id) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let n = element_count(&[h, w])?;
    let level = Level::from_index(level)
        .ok_or_else(|| ContainerError::InvalidValue(format!("level {level} outside {{1,2,3}}")))?;
    let bits = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(ContainerError::InvalidValue(format!("mask byte {other}"))),
        })
        .collect::<ContainerResult<Vec<bool>>>()?;
    r.finish()?;
    Ok(MaskEntry {
        id,
        level,
        view_id,
        mask: Bitmask {
            width: w as usize,
            height: h as usize,
            bits,
        },
    })
}

pub fn encode_feature_map(map: &FeatureMap) -> ContainerResult<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * map.values.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    for v in [dim_u32(map.d)?, dim_u32(map.height)?, dim_u32(map.width)?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_f32s(&mut out, &map.values)?;
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> ContainerResult<FeatureMap> {
    let mut r = Reader::new(bytes, FEATURE_MAGIC)?;
    let (d, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    let n = element_count(&[d, h, w])?;
    let values = r.f32s(n)?;
    r.finish()?;
    FeatureMap::new(d as usize, h as usize, w as usize, values)
        .map_err(|e| ContainerError::InvalidValue(e.to_string()))
}

pub fn encode_codec(codec: &SemanticCodec) -> ContainerResult<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 8 * codec.encode.len());
    out.extend_from_slice(&CODEC_MAGIC);
    for v in [dim_u32(codec.ambient_dim)?, dim_u32(codec.latent_dim)?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_f32s(&mut out, &codec.encode)?;
    push_f32s(&mut out, &codec.decode)?;
    Ok(out)
}

pub fn decode_codec(bytes: &[u8]) -> ContainerResult<SemanticCodec> {
    let mut r = Reader::new(bytes, CODEC_MAGIC)?;
    let (big, small) = (r.u32()?, r.u32()?);
    let n = element_count(&[big, small, 2])? / 2;
    let encode = r.f32s(n)?;
    let decode = r.f32s(n)?;
    r.finish()?;
    SemanticCodec::from_matrices(big as usize, small as usize, encode, decode)
        .map_err(|e| ContainerError::InvalidValue(e.to_string()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn container<T>(path: &Path, result: ContainerResult<T>) -> Result<T> {
    result.map_err(|source| Error::Container {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &MaskEntry) -> Result<()> {
    write_bytes(path, &container(path, encode_mask(mask))?)
}

pub fn read_mask(path: &Path, view_id: u32) -> Result<MaskEntry> {
    container(path, decode_mask(&read_bytes(path)?, view_id))
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    write_bytes(path, &container(path, encode_feature_map(map))?)
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    container(path, decode_feature_map(&read_bytes(path)?))
}

pub fn write_codec(path: &Path, codec: &SemanticCodec) -> Result<()> {
    write_bytes(path, &container(path, encode_codec(codec))?)
}

pub fn read_codec(path: &Path) -> Result<SemanticCodec> {
    container(path, decode_codec(&read_bytes(path)?))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn format_error(path: &Path, err: Error) -> Error {
    match err {
        Error::Io { .. } | Error::Format { .. } | Error::Container { .. } => err,
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_json(path, scene)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let scene: Scene = read_json(path)?;
    scene.validate().map_err(|e| format_error(path, e))?;
    Ok(scene)
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    view_id: u32,
    nodes: Vec<TreeNode>,
}

pub fn write_tree(path: &Path, view_id: u32, tree: &MaskTree) -> Result<()> {
    write_json(
        path,
        &TreeFile {
            view_id,
            nodes: tree.nodes().to_vec(),
        },
    )
}

pub fn read_tree(path: &Path) -> Result<(u32, MaskTree)> {
    let file: TreeFile = read_json(path)?;
    let tree = MaskTree::from_nodes(file.nodes).map_err(|e| format_error(path, e))?;
    Ok((file.view_id, tree))
}

#[derive(Serialize, Deserialize)]
struct DictionaryRecord {
    label_id: u32,
    level: Level,
    vector: Vec<f64>,
}

pub fn write_dictionary(path: &Path, dict: &LabelDictionary) -> Result<()> {
    let records: Vec<DictionaryRecord> = dict
        .vectors
        .iter()
        .map(|(label, v)| DictionaryRecord {
            label_id: label.id,
            level: label.level,
            vector: v.clone(),
        })
        .collect();
    write_json(path, &records)
}

pub fn read_dictionary(path: &Path) -> Result<LabelDictionary> {
    let records: Vec<DictionaryRecord> = read_json(path)?;
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut vectors = std::collections::BTreeMap::new();
    for r in records {
        let label = SemanticLabel { level: r.level, id: r.label_id };
        if vectors.insert(label, r.vector).is_some() {
            return Err(format_error(path, Error::Embed(format!("duplicate entry for {label:?}"))));
        }
    }
    LabelDictionary::new(dim, vectors).map_err(|e| format_error(path, e))
}

/// Builds a dictionary from a feature container holding one column per
/// label (`H = 1`, `W = labels.len()`, `d = D`). Columns are normalized.
pub fn import_dictionary(path: &Path, labels: &[SemanticLabel]) -> Result<LabelDictionary> {
    let map = read_feature_map(path)?;
    if map.height != 1 || map.width != labels.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected 1x{} columns, found {}x{}", labels.len(), map.height, map.width),
        });
    }
    let mut vectors = std::collections::BTreeMap::new();
    for (k, label) in labels.iter().enumerate() {
        let v = map.pixel(k);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(format_error(path, Error::Embed(format!("zero vector for {label:?}"))));
        }
        if vectors.insert(*label, v.iter().map(|x| x / n).collect()).is_some() {
            return Err(format_error(path, Error::Embed(format!("duplicate entry for {label:?}"))));
        }
    }
    LabelDictionary::new(map.d, vectors).map_err(|e| format_error(path, e))
}

/// Mask files of one view, relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub view_id: u32,
    pub camera: Camera,
    pub masks: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskManifest {
    pub views: Vec<ManifestView>,
}

/// Reads the masks listed in `manifest` from `dir`, one packet per view.
pub fn import_external_masks(dir: &Path, manifest: &MaskManifest) -> Result<Vec<ViewPacket>> {
    let mut seen_views = std::collections::BTreeSet::new();
    let mut packets = Vec::with_capacity(manifest.views.len());
    for view in &manifest.views {
        if !seen_views.insert(view.view_id) {
            return Err(Error::Config(format!("manifest lists view {} twice", view.view_id)));
        }
        let mut ids = std::collections::BTreeSet::new();
        let mut masks = Vec::with_capacity(view.masks.len());
        for file in &view.masks {
            let path = dir.join(file);
            let mask = read_mask(&path, view.view_id)?;
            if !ids.insert(mask.id) {
                return Err(Error::Format {
                    path,
                    message: format!("duplicate mask id {} in view {}", mask.id, view.view_id),
                });
            }
            masks.push(mask);
        }
        let packet = ViewPacket {
            view_id: view.view_id,
            camera: view.camera.clone(),
            masks,
        };
        packet.validate()?;
        packets.push(packet);
    }
    Ok(packets)
}

/// Loads a manifest and resolves its mask paths against its directory.
pub fn read_mask_manifest(path: &Path) -> Result<Vec<ViewPacket>> {
    let manifest: MaskManifest = read_json(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    import_external_masks(dir, &manifest)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask(bits: &[u8], w: usize, level: Level, id: u32) -> MaskEntry {
        let h = bits.len() / w;
        MaskEntry::new(id, level, 0, Bitmask::from_bits(w, h, bits.iter().map(|&b| b == 1).collect()).unwrap()).unwrap()
    }

    #[test]
    fn mask_layout() {
        let m = mask(&[1, 0, 0, 1, 1, 0], 3, Level::Part, 7);
        let bytes = encode_mask(&m).unwrap();
        assert_eq!(&bytes[..4], b"HLSM");
        assert_eq!(&bytes[4..20], &[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 7, 0, 0, 0]);
        assert_eq!(&bytes[20..], &[1, 0, 0, 1, 1, 0]);
        assert_eq!(decode_mask(&bytes, 0).unwrap(), m);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode_mask(&mask(&[1], 1, Level::Whole, 0)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_mask(&bytes, 0), Err(ContainerError::BadMagic { .. })));
        assert!(matches!(decode_feature_map(b"HLSM"), Err(ContainerError::BadMagic { .. })));
        assert!(matches!(decode_codec(b"xy"), Err(ContainerError::Truncated { .. })));
    }

    #[test]
    fn truncation_overflow_and_trailing_are_distinct() {
        let bytes = encode_mask(&mask(&[1, 0, 1, 1], 2, Level::Whole, 0)).unwrap();
        assert!(matches!(
            decode_mask(&bytes[..bytes.len() - 1], 0),
            Err(ContainerError::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_mask(&longer, 0), Err(ContainerError::TrailingBytes(1))));

        let mut huge = b"HLSF".to_vec();
        for v in [u32::MAX, u32::MAX, u32::MAX] {
            huge.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_feature_map(&huge), Err(ContainerError::DimensionOverflow(_))));
    }

    #[test]
    fn invalid_level_and_mask_byte() {
        let mut bytes = encode_mask(&mask(&[1], 1, Level::Whole, 0)).unwrap();
        bytes[12] = 4;
        assert!(matches!(decode_mask(&bytes, 0), Err(ContainerError::InvalidValue(_))));
        let mut bytes = encode_mask(&mask(&[1], 1, Level::Whole, 0)).unwrap();
        bytes[20] = 2;
        assert!(matches!(decode_mask(&bytes, 0), Err(ContainerError::InvalidValue(_))));
    }

    #[test]
    fn feature_map_is_bit_exact() {
        let values: Vec<f64> = (0..48).map(|i| f64::from((i as f32 * 0.37).sin())).collect();
        let map = FeatureMap::new(3, 4, 4, values).unwrap();
        let bytes = encode_feature_map(&map).unwrap();
        assert_eq!(bytes.len(), 16 + 48 * 4);
        let back = decode_feature_map(&bytes).unwrap();
        assert!(back.values.iter().zip(&map.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(encode_feature_map(&back).unwrap(), bytes);
    }

    #[test]
    fn out_of_range_float_rejected() {
        let map = FeatureMap::new(1, 1, 1, vec![1e300]).unwrap();
        assert!(matches!(encode_feature_map(&map), Err(ContainerError::InvalidValue(_))));
    }

    #[test]
    fn codec_round_trip() {
        let codec = SemanticCodec::from_matrices(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.25], vec![1.0, 0.0, 0.5, 0.0, 1.0, 0.25])
            .unwrap();
        let back = decode_codec(&encode_codec(&codec).unwrap()).unwrap();
        assert_eq!((back.encode, back.decode), (codec.encode, codec.decode));
    }

    proptest! {
        #[test]
        fn random_masks_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>(), id in any::<u32>()) {
            let bits: Vec<bool> = (0..w * h).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let m = MaskEntry { id, level: Level::Subpart, view_id: 3, mask: Bitmask::from_bits(w, h, bits).unwrap() };
            prop_assert_eq!(decode_mask(&encode_mask(&m).unwrap(), 3).unwrap(), m);
        }
    }
}
