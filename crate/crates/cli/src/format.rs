//! On-disk formats.
//!
//! Frame stacks use the BPI1 container, all integers little-endian:
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `BPI1`                                 |
//! | 4      | 2    | version (1)                                  |
//! | 6      | 4    | width                                        |
//! | 10     | 4    | height                                       |
//! | 14     | 4    | n_frames                                     |
//! | 18     | 1    | plane (0 near field, 1 far field)            |
//! | 19     | 1    | packing (0: 1 bit/pixel, rows padded to byte)|
//! | 20     | 8    | seed                                         |
//! | 28     | 4    | reserved, zero                               |
//! | 32     | ...  | frames, row-major, bit `x % 8` of byte `x / 8` is pixel x |
//!
//! Correlation maps are written as a binary f64 matrix with an 8-value
//! header and as CSV; the per-displacement standard errors and the mask go
//! to sibling files so that a map can be reloaded exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use spdc_epr::correlator::CorrMap;
use spdc_epr::detector::{row_bytes, FrameStack};
use spdc_epr::source::Plane;
use spdc_epr::{Error, Result};

pub const BPI_MAGIC: &[u8; 4] = b"BPI1";
pub const BPI_VERSION: u16 = 1;
pub const BPI_HEADER_LEN: usize = 32;
const PACKING_1BIT: u8 = 0;

/// Header of a correlation-map binary: "CMAP" read as a little-endian u32.
pub const MAP_MAGIC: f64 = 0x5041_4D43 as f64;
const MAP_HEADER_VALUES: usize = 8;
const KIND_VALUES: f64 = 0.0;
const KIND_STD_ERROR: f64 = 1.0;

/// Size of a BPI1 file holding `n_frames` frames of `width × height`.
pub fn stack_file_len(width: usize, height: usize, n_frames: usize) -> usize {
    BPI_HEADER_LEN + n_frames * height * row_bytes(width)
}

pub fn encode_stack(stack: &FrameStack) -> Result<Vec<u8>> {
    let too_big = |what: &str| Error::format("<stack>", format!("{what} does not fit in u32"));
    let w = u32::try_from(stack.width).map_err(|_| too_big("width"))?;
    let h = u32::try_from(stack.height).map_err(|_| too_big("height"))?;
    let n = u32::try_from(stack.len()).map_err(|_| too_big("n_frames"))?;
    let mut out = Vec::with_capacity(BPI_HEADER_LEN + stack.payload().len());
    out.extend_from_slice(BPI_MAGIC);
    out.extend_from_slice(&BPI_VERSION.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.push(stack.plane.code());
    out.push(PACKING_1BIT);
    out.extend_from_slice(&stack.seed.to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    debug_assert_eq!(out.len(), BPI_HEADER_LEN);
    out.extend_from_slice(stack.payload());
    Ok(out)
}

pub fn decode_stack(bytes: &[u8], path: &Path) -> Result<FrameStack> {
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < BPI_HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the {BPI_HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[0..4] != BPI_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u16_at(4);
    if version != BPI_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (width, height, n_frames) = (u32_at(6), u32_at(10), u32_at(14));
    let plane = Plane::from_code(bytes[18]).ok_or_else(|| bad(format!("unknown plane code {}", bytes[18])))?;
    if bytes[19] != PACKING_1BIT {
        return Err(bad(format!("unsupported packing {}", bytes[19])));
    }
    let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    if width == 0 || height == 0 {
        return Err(bad(format!("empty frame size {width}×{height}")));
    }
    let expected = n_frames
        .checked_mul(height * row_bytes(width))
        .ok_or_else(|| bad("frame count overflows".into()))?;
    let payload = &bytes[BPI_HEADER_LEN..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, header implies {n_frames} × {height} × {} = {expected}",
            payload.len(),
            row_bytes(width)
        )));
    }
    FrameStack::from_packed_frames(width, height, plane, seed, payload.to_vec()).map_err(|e| bad(e.to_string()))
}

pub fn write_stack(path: &Path, stack: &FrameStack) -> Result<()> {
    fs::write(path, encode_stack(stack)?).map_err(|e| Error::io(path, e))
}

pub fn read_stack(path: &Path) -> Result<FrameStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stack(&bytes, path)
}

fn encode_matrix(map: &CorrMap, kind: f64, values: &[f64]) -> Vec<u8> {
    let header = [
        MAP_MAGIC,
        map.w as f64,
        map.h as f64,
        map.n_frames as f64,
        map.plane.code() as f64,
        map.mean_counts.0,
        map.mean_counts.1,
        kind,
    ];
    let mut out = Vec::with_capacity(8 * (MAP_HEADER_VALUES + values.len()));
    for v in header.iter().chain(values) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Matrix {
    w: usize,
    h: usize,
    n_frames: usize,
    plane: Plane,
    mean_counts: (f64, f64),
    kind: f64,
    values: Vec<f64>,
}

fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let bad = |reason: String| Error::format(path, reason);
    if !bytes.len().is_multiple_of(8) || bytes.len() < 8 * MAP_HEADER_VALUES {
        return Err(bad(format!("{} bytes is not a map file", bytes.len())));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if vals[0] != MAP_MAGIC {
        return Err(bad(format!("bad magic {}", vals[0])));
    }
    let as_count = |v: f64, what: &str| -> Result<usize> {
        if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
            Ok(v as usize)
        } else {
            Err(bad(format!("{what} {v} is not a valid count")))
        }
    };
    let w = as_count(vals[1], "width")?;
    let h = as_count(vals[2], "height")?;
    let n_frames = as_count(vals[3], "n_frames")?;
    let plane = Plane::from_code(as_count(vals[4], "plane")? as u8).ok_or_else(|| bad("unknown plane".into()))?;
    let values = vals[MAP_HEADER_VALUES..].to_vec();
    if values.len() != w * h {
        return Err(bad(format!("{} values for a {w}×{h} map", values.len())));
    }
    Ok(Matrix {
        w,
        h,
        n_frames,
        plane,
        mean_counts: (vals[5], vals[6]),
        kind: vals[7],
        values,
    })
}

fn map_csv(map: &CorrMap, values: impl Fn(usize) -> String, what: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {what}; rows dy = {}..{}, columns dx = {}..{}; n_frames = {}",
        map.dy_min(),
        map.dy_max(),
        map.dx_min(),
        map.dx_max(),
        map.n_frames
    );
    for row in 0..map.h {
        let line: Vec<String> = (0..map.w).map(|col| values(row * map.w + col)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Files written for a map with base path `base`.
pub fn map_paths(base: &Path) -> [PathBuf; 4] {
    [
        sibling(base, ".bin"),
        sibling(base, ".csv"),
        sibling(base, "_stderr.bin"),
        sibling(base, "_mask.csv"),
    ]
}

/// Writes `base.bin`, `base.csv`, `base_stderr.bin` and `base_mask.csv`.
pub fn write_map(base: &Path, map: &CorrMap) -> Result<Vec<PathBuf>> {
    let [bin, csv, se, mask] = map_paths(base);
    let put = |p: &Path, data: &[u8]| fs::write(p, data).map_err(|e| Error::io(p, e));
    put(&bin, &encode_matrix(map, KIND_VALUES, &map.values))?;
    put(&csv, map_csv(map, |i| format!("{:e}", map.values[i]), "normalized intercorrelation F").as_bytes())?;
    put(&se, &encode_matrix(map, KIND_STD_ERROR, &map.std_error))?;
    let mask_text = map_csv(map, |i| if map.mask[i] { "1".into() } else { "0".into() }, "fit mask, 1 = excluded");
    put(&mask, mask_text.as_bytes())?;
    Ok(vec![bin, csv, se, mask])
}

/// Reads a map binary alone; standard errors come back as zero and the
/// mask as all-false.
pub fn read_map_bin(path: &Path) -> Result<CorrMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = decode_matrix(&bytes, path)?;
    if m.kind != KIND_VALUES {
        return Err(Error::format(path, "file holds standard errors, not map values"));
    }
    let n = m.values.len();
    Ok(CorrMap {
        w: m.w,
        h: m.h,
        plane: m.plane,
        values: m.values,
        std_error: vec![0.0; n],
        mask: vec![false; n],
        n_frames: m.n_frames,
        mean_counts: m.mean_counts,
    })
}

fn read_mask(path: &Path, n: usize) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mask = Vec::with_capacity(n);
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        for tok in line.split(',') {
            mask.push(match tok.trim() {
                "0" => false,
                "1" => true,
                other => return Err(Error::format(path, format!("mask entry {other:?} is not 0 or 1"))),
            });
        }
    }
    if mask.len() != n {
        return Err(Error::format(path, format!("{} mask entries, expected {n}", mask.len())));
    }
    Ok(mask)
}

/// Reads back everything `write_map` wrote.
pub fn read_map(base: &Path) -> Result<CorrMap> {
    let [bin, _, se, mask] = map_paths(base);
    let mut map = read_map_bin(&bin)?;
    let bytes = fs::read(&se).map_err(|e| Error::io(&se, e))?;
    let s = decode_matrix(&bytes, &se)?;
    if s.kind != KIND_STD_ERROR || (s.w, s.h, s.n_frames, s.plane) != (map.w, map.h, map.n_frames, map.plane) {
        return Err(Error::format(&se, "standard-error file does not match the map"));
    }
    map.std_error = s.values;
    map.mask = read_mask(&mask, map.values.len())?;
    Ok(map)
}
