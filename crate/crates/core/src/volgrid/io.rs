//! Volume file format: a fixed-order ASCII header
//!
//! ```text
//! NDims = 3
//! DimSize = <x> <y> <z>
//! ElementSpacing = <sx> <sy> <sz>
//! Origin = <ox> <oy> <oz>
//! ElementType = FLOAT32 | UINT8
//! ElementDataFile = LOCAL
//!
//! ```
//!
//! followed by the raw little-endian voxel payload, x-fastest. Reals are
//! written in shortest round-trip form so headers survive exactly.

use std::fs;
use std::path::Path;

use super::{Geometry, LabelMap, Volume};
use crate::error::{Error, Result};

const KEYS: [&str; 6] = [
    "NDims",
    "DimSize",
    "ElementSpacing",
    "Origin",
    "ElementType",
    "ElementDataFile",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    Float32,
    Uint8,
}

impl ElementType {
    fn name(self) -> &'static str {
        match self {
            ElementType::Float32 => "FLOAT32",
            ElementType::Uint8 => "UINT8",
        }
    }

    fn width(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Uint8 => 1,
        }
    }
}

fn header(g: &Geometry, et: ElementType) -> String {
    let [x, y, z] = g.dims;
    let [sx, sy, sz] = g.spacing;
    let [ox, oy, oz] = g.origin;
    format!(
        "NDims = 3\nDimSize = {x} {y} {z}\nElementSpacing = {sx} {sy} {sz}\nOrigin = {ox} {oy} {oz}\nElementType = {}\nElementDataFile = LOCAL\n\n",
        et.name()
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = header(v.geometry(), ElementType::Float32).into_bytes();
    bytes.reserve(v.voxels().len() * 4);
    for x in v.voxels() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn write_labels(m: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = header(m.geometry(), ElementType::Uint8).into_bytes();
    bytes.extend_from_slice(m.voxels());
    write_file(path, &bytes)
}

struct Parsed<'a> {
    geometry: Geometry,
    element: ElementType,
    payload: &'a [u8],
}

fn parse_triple<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(path, format!("{key} needs 3 values, got {value:?}")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::format(path, format!("bad {key} value {p:?}")))?,
        );
    }
    match out.try_into() {
        Ok(a) => Ok(a),
        Err(_) => unreachable!(),
    }
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<Parsed<'a>> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::format(path, "missing blank line after header"))?;
    let text = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::format(path, "header is not valid UTF-8"))?;
    let payload = &bytes[split + 2..];

    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != KEYS.len() {
        return Err(Error::format(
            path,
            format!("expected {} header lines, got {}", KEYS.len(), lines.len()),
        ));
    }
    let mut values = Vec::with_capacity(KEYS.len());
    for (line, want) in lines.iter().zip(KEYS) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed header line {line:?}")))?;
        let key = key.trim();
        if key != want {
            return Err(Error::format(
                path,
                format!("malformed header key {key:?}, expected {want:?}"),
            ));
        }
        values.push(value.trim());
    }
    if values[0] != "3" {
        return Err(Error::format(path, format!("unsupported NDims {}", values[0])));
    }
    let dims: [usize; 3] = parse_triple(path, "DimSize", values[1])?;
    let spacing: [f64; 3] = parse_triple(path, "ElementSpacing", values[2])?;
    let origin: [f64; 3] = parse_triple(path, "Origin", values[3])?;
    let element = match values[4] {
        "FLOAT32" => ElementType::Float32,
        "UINT8" => ElementType::Uint8,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported element type {other:?}"),
            ))
        }
    };
    if values[5] != "LOCAL" {
        return Err(Error::format(
            path,
            format!("unsupported ElementDataFile {:?}", values[5]),
        ));
    }
    let geometry = Geometry::new(dims, spacing, origin)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let want = geometry.len() * element.width();
    if payload.len() != want {
        return Err(Error::format(
            path,
            format!(
                "payload length mismatch: expected {want} bytes, found {}",
                payload.len()
            ),
        ));
    }
    Ok(Parsed {
        geometry,
        element,
        payload,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a scalar volume. UINT8 payloads are widened to float.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let p = parse(path, &bytes)?;
    let voxels = match p.element {
        ElementType::Float32 => p
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        ElementType::Uint8 => p.payload.iter().map(|&b| b as f32).collect(),
    };
    Volume::new(p.geometry, voxels).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a label map; the file must be UINT8.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let p = parse(path, &bytes)?;
    if p.element != ElementType::Uint8 {
        return Err(Error::format(
            path,
            "unsupported element type for a label map: FLOAT32 (need UINT8)",
        ));
    }
    LabelMap::new(p.geometry, p.payload.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Volume {
        let g = Geometry::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        Volume::new(g, (0..8).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn decodes_known_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mha");
        let mut bytes = b"NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nOrigin = 0 0 0\nElementType = FLOAT32\nElementDataFile = LOCAL\n\n".to_vec();
        for i in 0..8 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.geometry().dims, [2, 2, 2]);
        assert_eq!(v.voxels(), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        assert_eq!(v, tiny());
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mha");
        let mut bytes = header(tiny().geometry(), ElementType::Float32).into_bytes();
        for i in 0..7 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        let err = read_volume(&p).unwrap_err().to_string();
        assert!(err.contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn bad_key_and_type() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mha");
        let mut bytes = b"NDims = 3\nDimSize = 1 1 1\nSpacing = 1 1 1\nOrigin = 0 0 0\nElementType = FLOAT32\nElementDataFile = LOCAL\n\n".to_vec();
        bytes.extend_from_slice(&0f32.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(read_volume(&p).unwrap_err().to_string().contains("malformed header key"));

        let mut bytes = b"NDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 1 1\nOrigin = 0 0 0\nElementType = INT16\nElementDataFile = LOCAL\n\n".to_vec();
        bytes.extend_from_slice(&[0, 0]);
        fs::write(&p, &bytes).unwrap();
        assert!(read_volume(&p).unwrap_err().to_string().contains("unsupported element type"));
    }

    #[test]
    fn missing_file_and_unwritable_target() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_volume(dir.path().join("nope.mha")), Err(Error::Io { .. })));
        let bad = dir.path().join("no_such_dir").join("v.mha");
        assert!(matches!(write_volume(&tiny(), bad), Err(Error::Io { .. })));
    }

    #[test]
    fn spacing_survives_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mha");
        let g = Geometry::new([3, 2, 2], [2.23, 2.23, 3.0], [-0.1, 1e-7, 123.456789]).unwrap();
        let v = Volume::from_fn(g, |q| (q[0] + q[2]) as f32 / 7.0).unwrap();
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back.geometry().spacing, [2.23, 2.23, 3.0]);
        assert_eq!(back, v);
    }

    #[test]
    fn labels_round_trip_and_type_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mha");
        let g = Geometry::new([2, 2, 1], [1.0; 3], [0.0; 3]).unwrap();
        let m = LabelMap::new(g, vec![0, 1, 2, 1]).unwrap();
        write_labels(&m, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), m);
        write_volume(&tiny(), &p).unwrap();
        assert!(read_labels(&p).is_err());
    }
}
