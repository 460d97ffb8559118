//! Binary descriptor cache.
//!
//! Layout, little-endian:
//!
//! ```text
//! "ADSC v1 <N> <M>\n"                 ASCII header line
//! M*N  f32   ranges, cell-major; invalid = -1.0
//! M*N  u8    label codes, cell-major; invalid = 255
//! M*2  u32   cell (x, y) per column
//! ```

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{AerialDescriptorSet, AERIAL_INVALID};
use crate::error::{Error, Result};
use crate::grid::CellPos;

const INVALID_RANGE: f32 = -1.0;
const INVALID_CODE: u8 = 255;

pub fn save_descriptor_cache(set: &AerialDescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_cache(set, &mut w).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_cache(set: &AerialDescriptorSet, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "ADSC v1 {} {}", set.n_lines, set.len())?;
    for &r in &set.depth {
        let r = if r.is_nan() { INVALID_RANGE } else { r };
        w.write_all(&r.to_le_bytes())?;
    }
    let labels: Vec<u8> = set
        .labels
        .iter()
        .map(|&l| if l == AERIAL_INVALID { INVALID_CODE } else { l })
        .collect();
    w.write_all(&labels)?;
    for c in set.cells() {
        w.write_all(&(c.x as u32).to_le_bytes())?;
        w.write_all(&(c.y as u32).to_le_bytes())?;
    }
    w.flush()
}

pub fn load_descriptor_cache(path: impl AsRef<Path>) -> Result<AerialDescriptorSet> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_cache(&bytes)
}

pub(crate) fn read_cache(bytes: &[u8]) -> Result<AerialDescriptorSet> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(1, "missing ADSC header"))?;
    let header =
        std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(1, "header is not ASCII"))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 4 || f[0] != "ADSC" || f[1] != "v1" {
        return Err(Error::parse(1, format!("malformed header {header:?}")));
    }
    let n: usize = f[2].parse().map_err(|_| Error::parse(1, "bad N"))?;
    let m: usize = f[3].parse().map_err(|_| Error::parse(1, "bad M"))?;
    let body = &bytes[nl + 1..];
    let expected = n * m * 4 + n * m + m * 8;
    if body.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "cache body has {} bytes, N={n} M={m} needs {expected}",
            body.len()
        )));
    }
    let (depth_bytes, rest) = body.split_at(n * m * 4);
    let (label_bytes, cell_bytes) = rest.split_at(n * m);
    let depth = depth_bytes
        .chunks_exact(4)
        .map(|b| {
            let r = f32::from_le_bytes(b.try_into().unwrap());
            if r == INVALID_RANGE {
                f32::NAN
            } else {
                r
            }
        })
        .collect();
    let labels = label_bytes
        .iter()
        .map(|&l| match l {
            INVALID_CODE => Ok(AERIAL_INVALID),
            0..=5 => Ok(l),
            other => Err(Error::UnknownLabel(other as u32)),
        })
        .collect::<Result<Vec<u8>>>()?;
    let cells = cell_bytes
        .chunks_exact(8)
        .map(|b| {
            let x = u32::from_le_bytes(b[..4].try_into().unwrap());
            let y = u32::from_le_bytes(b[4..].try_into().unwrap());
            CellPos::new(x as usize, y as usize)
        })
        .collect();
    AerialDescriptorSet::from_parts(n, depth, labels, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{build_aerial_descriptors, DescriptorParams};
    use crate::geo_map::{AerialMap, SemanticLabel};
    use crate::grid::Grid;

    #[test]
    fn cache_round_trip_and_layout() {
        let obstacle = Grid::from_fn(12, 9, |c| c.x == 10 || (c.x == 3 && c.y == 3));
        let semantic = obstacle.map(|&o| {
            if o {
                SemanticLabel::Building
            } else {
                SemanticLabel::Road
            }
        });
        let map = AerialMap::new(0.5, obstacle.map(|_| 0.0), semantic, obstacle).unwrap();
        let p = DescriptorParams {
            n_lines: 8,
            max_range: 3.0,
            range_tolerance: 1.0,
        };
        let set = build_aerial_descriptors(&map, &p).unwrap();
        let mut buf = Vec::new();
        write_cache(&set, &mut buf).unwrap();
        let header = format!("ADSC v1 8 {}\n", set.len());
        assert!(buf.starts_with(header.as_bytes()));
        assert_eq!(buf.len(), header.len() + set.len() * (8 * 4 + 8 + 8));
        let back = read_cache(&buf).unwrap();
        for j in 0..set.len() {
            assert_eq!(back.column(j), set.column(j));
        }
        assert_eq!(back.cells(), set.cells());
        // invalid range is -1.0 on disk
        let first = f32::from_le_bytes(buf[header.len()..header.len() + 4].try_into().unwrap());
        assert!(first == -1.0 || first > 0.0);
    }

    #[test]
    fn truncated_cache_is_rejected() {
        assert!(read_cache(b"ADSC v1 4 2\n\x00\x00").is_err());
        assert!(read_cache(b"NOPE v1 4 2\n").is_err());
    }
}
