//! On-disk formats: match records (JSON), dense flow (binary), and query
//! specifications.
//!
//! Match JSON is an array of `{qx,qy,rx,ry,u,kept}` objects in query
//! order. The flow file is "FFLW" | version u32 | width u32 | height u32 |
//! validity bitmap (row-major, LSB first) | f32 (dx, dy) pairs for every
//! pixel, little-endian, zeros where invalid.

use crate::error::{Error, Result};
use crate::metrics::FlowField;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchRecord {
    pub qx: f64,
    pub qy: f64,
    pub rx: f64,
    pub ry: f64,
    pub u: f64,
    pub kept: bool,
}

pub fn write_matches(records: &[MatchRecord], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(records).expect("records serialize");
    let mut f = std::fs::File::create(path)?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_matches(path: &Path) -> Result<Vec<MatchRecord>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

const FLOW_MAGIC: &[u8; 4] = b"FFLW";
const FLOW_VERSION: u32 = 1;

pub fn write_flow(field: &FlowField, path: &Path) -> Result<()> {
    let (w, h) = (field.width, field.height);
    let mut buf = Vec::with_capacity(16 + (w * h).div_ceil(8) + w * h * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&FLOW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    let mut bitmap = vec![0u8; (w * h).div_ceil(8)];
    for (i, &v) in field.valid.iter().enumerate() {
        if v {
            bitmap[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&bitmap);
    for (i, &(dx, dy)) in field.flow.iter().enumerate() {
        let (dx, dy) = if field.valid[i] { (dx as f32, dy as f32) } else { (0.0, 0.0) };
        buf.extend_from_slice(&dx.to_le_bytes());
        buf.extend_from_slice(&dy.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != FLOW_MAGIC {
        return Err(Error::Format("bad flow file header".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FLOW_VERSION {
        return Err(Error::Format(format!("unsupported flow version {}", version)));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let bitmap_len = (w * h).div_ceil(8);
    let expect = 16 + bitmap_len + w * h * 8;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "flow file is {} bytes, want {}",
            bytes.len(),
            expect
        )));
    }
    let mut field = FlowField::new(w, h);
    let bitmap = &bytes[16..16 + bitmap_len];
    for i in 0..w * h {
        field.valid[i] = bitmap[i / 8] & (1 << (i % 8)) != 0;
    }
    let mut pos = 16 + bitmap_len;
    for i in 0..w * h {
        let dx = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64;
        let dy = f32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as f64;
        field.flow[i] = (dx, dy);
        pos += 8;
    }
    Ok(field)
}

/// Parse a query source: `FILE` (JSON array of [x, y] pairs),
/// `grid:K` (K x K cell centers), or `random:N` (uniform, seeded).
pub fn parse_queries(spec: &str, seed: u64) -> Result<Vec<(f64, f64)>> {
    if let Some(k) = spec.strip_prefix("grid:") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Invalid(format!("bad grid spec `{}`", spec)))?;
        if k == 0 {
            return Err(Error::Invalid("grid:0 has no points".to_string()));
        }
        let mut out = Vec::with_capacity(k * k);
        for r in 0..k {
            for c in 0..k {
                out.push(((c as f64 + 0.5) / k as f64, (r as f64 + 0.5) / k as f64));
            }
        }
        return Ok(out);
    }
    if let Some(n) = spec.strip_prefix("random:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Invalid(format!("bad random spec `{}`", spec)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok((0..n).map(|_| (rng.gen(), rng.gen())).collect());
    }
    let text = std::fs::read_to_string(Path::new(spec))?;
    let pairs: Vec<[f64; 2]> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {}", spec, e)))?;
    Ok(pairs.into_iter().map(|[x, y]| (x, y)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn match_json_roundtrip() {
        let dir = std::env::temp_dir().join("fcorr_matchio");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.json");
        let recs = vec![
            MatchRecord { qx: 0.1, qy: 0.2, rx: 0.3, ry: 0.4, u: 0.05, kept: true },
            MatchRecord { qx: 0.9, qy: 0.8, rx: 0.7, ry: 0.6, u: 0.95, kept: false },
        ];
        write_matches(&recs, &path).unwrap();
        let back = read_matches(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].qx, 0.1);
        assert!(!back[1].kept);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn empty_matches_is_empty_array() {
        let dir = std::env::temp_dir().join("fcorr_matchio2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("e.json");
        write_matches(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "[]");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn flow_roundtrip_preserves_validity_and_values() {
        let dir = std::env::temp_dir().join("fcorr_matchio3");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.bin");
        let mut field = FlowField::new(5, 4);
        field.flow[7] = (1.25, -3.5);
        field.valid[7] = true;
        field.flow[13] = (0.5, 0.25);
        field.valid[13] = true;
        write_flow(&field, &path).unwrap();
        let back = read_flow(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 4);
        assert_eq!(back.valid, field.valid);
        assert_eq!(back.flow[7], (1.25, -3.5));
        assert_eq!(back.flow[13], (0.5, 0.25));
        assert_eq!(back.flow[0], (0.0, 0.0));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn query_specs() {
        let g = parse_queries("grid:4", 0).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], (0.125, 0.125));
        assert_eq!(g[15], (0.875, 0.875));
        let r1 = parse_queries("random:10", 7).unwrap();
        let r2 = parse_queries("random:10", 7).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.iter().all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
        assert!(parse_queries("grid:zero", 0).is_err());
    }
}
