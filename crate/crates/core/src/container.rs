//! CGRID container files.
//!
//! Layout: the 6 bytes `CGRID\n`, a little-endian `u64` header length `L`,
//! `L` bytes of UTF-8 JSON, then the raw row-major payload (`f32` little-endian
//! or `u8`). The header names the dims, their axis order (`ZTYX`, `CYX` or
//! `YX`), the dtype and the in-plane spacing; label files also carry a legend.
//!
//! Real-valued arrays are held as `f64` in memory and written as `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CineVolume, FeatureGrid, Image, LabelLegend, LabelMap, LabelVolume};

pub const MAGIC: &[u8; 6] = b"CGRID\n";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub dims: Vec<usize>,
    pub order: String,
    pub dtype: String,
    pub spacing_mm: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelLegend>,
}

/// Any array a CGRID file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Cine(CineVolume),
    Labels(LabelVolume),
    Features(FeatureGrid),
    Image(Image),
    LabelMap(LabelMap),
}

impl Container {
    pub fn kind(&self) -> &'static str {
        match self {
            Container::Cine(_) => "cine volume",
            Container::Labels(_) => "label volume",
            Container::Features(_) => "feature grid",
            Container::Image(_) => "image",
            Container::LabelMap(_) => "label map",
        }
    }
}

enum Payload<'a> {
    F32(Vec<f32>),
    U8(&'a [u8]),
}

fn header_and_payload(array: &Container) -> (Header, Payload<'_>) {
    let f32s = |d: &[f64]| d.iter().map(|&v| v as f32).collect::<Vec<_>>();
    match array {
        Container::Cine(v) => (
            Header {
                dims: v.dims().to_vec(),
                order: "ZTYX".into(),
                dtype: "f32".into(),
                spacing_mm: [v.spacing_mm().0, v.spacing_mm().1],
                labels: None,
            },
            Payload::F32(f32s(v.data())),
        ),
        Container::Labels(v) => (
            Header {
                dims: v.dims().to_vec(),
                order: "ZTYX".into(),
                dtype: "u8".into(),
                spacing_mm: [v.spacing_mm().0, v.spacing_mm().1],
                labels: Some(LabelLegend::default()),
            },
            Payload::U8(v.data()),
        ),
        Container::Features(g) => (
            Header {
                dims: vec![g.channels(), g.height(), g.width()],
                order: "CYX".into(),
                dtype: "f32".into(),
                spacing_mm: [1.0, 1.0],
                labels: None,
            },
            Payload::F32(f32s(g.data())),
        ),
        Container::Image(im) => (
            Header {
                dims: vec![im.height(), im.width()],
                order: "YX".into(),
                dtype: "f32".into(),
                spacing_mm: [1.0, 1.0],
                labels: None,
            },
            Payload::F32(f32s(im.data())),
        ),
        Container::LabelMap(m) => (
            Header {
                dims: vec![m.height(), m.width()],
                order: "YX".into(),
                dtype: "u8".into(),
                spacing_mm: [1.0, 1.0],
                labels: Some(LabelLegend::default()),
            },
            Payload::U8(m.data()),
        ),
    }
}

/// Serializes an array to CGRID bytes. Identical input gives identical bytes.
pub fn encode(array: &Container) -> Vec<u8> {
    let (header, payload) = header_and_payload(array);
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload_len = match &payload {
        Payload::F32(v) => v.len() * 4,
        Payload::U8(v) => v.len(),
    };
    let mut out = Vec::with_capacity(14 + json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U8(v) => out.extend_from_slice(v),
    }
    out
}

/// Parses CGRID bytes.
pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 14 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing CGRID magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let header_end = 14usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or(Error::Truncated { expected: 14usize.saturating_add(header_len), found: bytes.len() })?;
    let header: Header = serde_json::from_slice(&bytes[14..header_end])
        .map_err(|e| Error::Format(format!("bad CGRID header: {e}")))?;
    let payload = &bytes[header_end..];

    let elem = match header.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(Error::Unsupported(format!("dtype {other:?}"))),
    };
    let rank = match header.order.as_str() {
        "ZTYX" => 4,
        "CYX" => 3,
        "YX" => 2,
        other => return Err(Error::Unsupported(format!("axis order {other:?}"))),
    };
    if header.dims.len() != rank {
        return Err(Error::Format(format!("order {} needs {rank} dims, got {:?}", header.order, header.dims)));
    }
    let count = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let expected = count * elem;
    if payload.len() != expected {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    let spacing = (header.spacing_mm[0], header.spacing_mm[1]);
    let d = &header.dims;

    let reals = || -> Vec<f64> {
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
    };
    Ok(match (header.order.as_str(), header.dtype.as_str()) {
        ("ZTYX", "f32") => Container::Cine(CineVolume::normalized([d[0], d[1], d[2], d[3]], spacing, reals())?),
        ("ZTYX", "u8") => Container::Labels(LabelVolume::new([d[0], d[1], d[2], d[3]], spacing, payload.to_vec())?),
        ("CYX", "f32") => Container::Features(FeatureGrid::new(d[0], d[1], d[2], reals())?),
        ("YX", "f32") => Container::Image(Image::new(d[0], d[1], reals())?),
        ("YX", "u8") => Container::LabelMap(LabelMap::new(d[0], d[1], payload.to_vec())?),
        (order, dtype) => return Err(Error::Unsupported(format!("{dtype} payload with order {order}"))),
    })
}

pub fn save_container(array: &Container, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(array)).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

macro_rules! typed_loader {
    ($name:ident, $variant:ident, $ty:ty) => {
        pub fn $name(path: impl AsRef<Path>) -> Result<$ty> {
            match load_container(path.as_ref())? {
                Container::$variant(v) => Ok(v),
                other => Err(Error::Format(format!(
                    "{} holds a {}, expected {}",
                    path.as_ref().display(),
                    other.kind(),
                    stringify!($variant)
                ))),
            }
        }
    };
}

typed_loader!(load_cine, Cine, CineVolume);
typed_loader!(load_labels, Labels, LabelVolume);
typed_loader!(load_features, Features, FeatureGrid);

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(dims: [usize; 4]) -> LabelVolume {
        let n = dims.iter().product();
        LabelVolume::new(dims, (1.25, 1.25), (0..n).map(|i| (i % 4) as u8).collect()).unwrap()
    }

    #[test]
    fn label_volume_header_round_trip() {
        let vol = labels([2, 3, 4, 4]);
        let back = decode(&encode(&Container::Labels(vol.clone()))).unwrap();
        match back {
            Container::Labels(v) => {
                assert_eq!(v.dims(), [2, 3, 4, 4]);
                assert_eq!(v, vol);
            }
            other => panic!("got {}", other.kind()),
        }
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = encode(&Container::Labels(labels([1, 2, 2, 2])));
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Truncated { .. })));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode(&Container::Labels(labels([1, 2, 2, 2])));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_dtype_is_unsupported() {
        let header = br#"{"dims":[2,2],"order":"YX","dtype":"f16","spacing_mm":[1.0,1.0]}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(decode(&bytes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_label_volume_payload_size() {
        let vol = LabelVolume::zeros([1, 2, 8, 8], (1.0, 1.0));
        let bytes = encode(&Container::Labels(vol));
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let payload = &bytes[14 + header_len..];
        assert_eq!(payload.len(), 128);
        assert!(payload.iter().all(|&b| b == 0));
    }

    #[test]
    fn feature_grid_payload_is_f32() {
        let g = FeatureGrid::from_fn(2, 3, 3, |c, y, x| (c + y + x) as f64 * 0.5).unwrap();
        let bytes = encode(&Container::Features(g.clone()));
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 14 - header_len, 72);
        assert_eq!(decode(&bytes).unwrap(), Container::Features(g));
    }

    #[test]
    fn header_layout_is_pinned() {
        let bytes = encode(&Container::LabelMap(LabelMap::zeros(2, 3)));
        assert_eq!(&bytes[..6], b"CGRID\n");
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[14..14 + header_len]).unwrap();
        assert_eq!(
            json,
            r#"{"dims":[2,3],"order":"YX","dtype":"u8","spacing_mm":[1.0,1.0],"labels":{"1":"LV","2":"Myo","3":"RV"}}"#
        );
    }

    #[test]
    fn save_then_load_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let vol = CineVolume::new([1, 2, 2, 3], (1.5, 1.25), (0..12).map(|i| i as f64 / 16.0).collect()).unwrap();
        let a = dir.path().join("a.cgrid");
        let b = dir.path().join("b.cgrid");
        save_container(&Container::Cine(vol.clone()), &a).unwrap();
        let loaded = load_cine(&a).unwrap();
        assert_eq!(loaded, vol);
        save_container(&Container::Cine(loaded), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_container(&Container::LabelMap(LabelMap::zeros(1, 1)), "/nonexistent-dir/x.cgrid");
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn f32_representable_grids_round_trip(
                c in 1usize..4, h in 1usize..6, w in 1usize..6,
                vals in proptest::collection::vec(-1e6f32..1e6, 100),
            ) {
                let n = c * h * w;
                let data: Vec<f64> = vals.iter().cycle().take(n).map(|&v| v as f64).collect();
                let g = Container::Features(FeatureGrid::new(c, h, w, data).unwrap());
                let bytes = encode(&g);
                let back = decode(&bytes).unwrap();
                prop_assert_eq!(&back, &g);
                prop_assert_eq!(encode(&back), bytes);
            }

            #[test]
            fn label_volumes_round_trip(dims in proptest::array::uniform4(1usize..4), seed in any::<u8>()) {
                let n: usize = dims.iter().product();
                let data = (0..n).map(|i| (i as u8).wrapping_mul(seed) % 4).collect();
                let v = Container::Labels(LabelVolume::new(dims, (0.9, 1.1), data).unwrap());
                prop_assert_eq!(decode(&encode(&v)).unwrap(), v);
            }
        }
    }
}
