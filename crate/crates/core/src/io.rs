//! `AVRB` dataset files.
//!
//! Header (little-endian, 21 bytes):
//!
//! ```text
//! "AVRB" | version u16 | kind u8 | r u8 | c u8 | context u8 | answers u8
//!        | h u16 | w u16 | rule length u16 | instance count u32
//! ```
//!
//! Each instance follows as `P` panels of `h·w` bytes (`round(v·255)`, row
//! major), a label byte, and the rule bits packed LSB-first into
//! `ceil(len / 8)` bytes.

use std::fs;
use std::path::Path;

use crate::avr::{ProblemInstance, TaskKind, TaskStructure};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"AVRB";
pub const DATASET_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 21;

/// Decoded dataset header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub structure: TaskStructure,
    pub height: usize,
    pub width: usize,
    pub rule_len: usize,
    pub count: usize,
}

impl DatasetHeader {
    pub fn instance_bytes(&self) -> usize {
        self.structure.panels() * self.height * self.width + 1 + self.rule_len.div_ceil(8)
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + self.count as u64 * self.instance_bytes() as u64
    }
}

fn to_u8(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in a byte")))
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in 16 bits")))
}

/// Serialises instances of one task. Rules must be present on every
/// instance (or on none) and share one length.
pub fn encode_dataset(instances: &[ProblemInstance<f32>], structure: &TaskStructure, panel_hw: (usize, usize)) -> Result<Vec<u8>> {
    let (h, w) = panel_hw;
    let rule_len = instances
        .first()
        .and_then(|i| i.rules.as_ref())
        .map_or(0, Vec::len);
    for (n, inst) in instances.iter().enumerate() {
        inst.validate(structure)
            .map_err(|e| Error::invalid(format!("instance {n}: {e}")))?;
        if inst.panel_hw() != Some((h, w)) {
            return Err(Error::invalid(format!(
                "instance {n}: panels are {:?}, header declares {h}×{w}",
                inst.panel_hw()
            )));
        }
        let len = inst.rules.as_ref().map_or(0, Vec::len);
        if len != rule_len || (rule_len > 0) != inst.rules.is_some() {
            return Err(Error::invalid(format!(
                "instance {n}: rule vector length {len}, expected {rule_len}"
            )));
        }
    }
    let header = DatasetHeader {
        version: DATASET_VERSION,
        structure: *structure,
        height: h,
        width: w,
        rule_len,
        count: instances.len(),
    };
    let mut out = Vec::with_capacity(header.file_len() as usize);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.push(structure.kind.code());
    out.push(to_u8(structure.rows, "rows")?);
    out.push(to_u8(structure.cols, "cols")?);
    out.push(to_u8(structure.context, "context count")?);
    out.push(to_u8(structure.answers, "answer count")?);
    out.extend_from_slice(&to_u16(h, "panel height")?.to_le_bytes());
    out.extend_from_slice(&to_u16(w, "panel width")?.to_le_bytes());
    out.extend_from_slice(&to_u16(rule_len, "rule length")?.to_le_bytes());
    let count = u32::try_from(instances.len()).map_err(|_| Error::invalid("more than 2^32 instances"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for inst in instances {
        for p in &inst.panels {
            out.extend(p.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        out.push(to_u8(inst.label, "label")?);
        let mut packed = vec![0u8; rule_len.div_ceil(8)];
        for (i, &bit) in inst.rules.iter().flatten().enumerate() {
            if bit > 1 {
                return Err(Error::invalid(format!("rule bit {bit} is not 0 or 1")));
            }
            packed[i / 8] |= bit << (i % 8);
        }
        out.extend_from_slice(&packed);
    }
    Ok(out)
}

fn u16_at(buf: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([buf[at], buf[at + 1]])
}

/// Parses and validates the header; checks the payload length exactly.
pub fn decode_header(buf: &[u8]) -> Result<DatasetHeader> {
    if buf.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: buf.len() as u64,
        });
    }
    if &buf[0..4] != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {:?}", &buf[0..4]),
        });
    }
    let version = u16_at(buf, 4);
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let kind = TaskKind::from_code(buf[6]).ok_or_else(|| Error::Format {
        offset: 6,
        detail: format!("unknown task kind {}", buf[6]),
    })?;
    let structure = TaskStructure::from_parts(
        kind,
        buf[7] as usize,
        buf[8] as usize,
        buf[9] as usize,
        buf[10] as usize,
    )
    .map_err(|e| Error::Format {
        offset: 7,
        detail: e.to_string(),
    })?;
    let height = u16_at(buf, 11) as usize;
    let width = u16_at(buf, 13) as usize;
    if height == 0 || width == 0 {
        return Err(Error::Format {
            offset: 11,
            detail: format!("panel size {height}×{width}"),
        });
    }
    let header = DatasetHeader {
        version,
        structure,
        height,
        width,
        rule_len: u16_at(buf, 15) as usize,
        count: u32::from_le_bytes([buf[17], buf[18], buf[19], buf[20]]) as usize,
    };
    let expected = header.file_len();
    let actual = buf.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format {
            offset: expected,
            detail: format!("{} trailing bytes after {} declared instances", actual - expected, header.count),
        });
    }
    Ok(header)
}

pub fn decode_dataset(buf: &[u8]) -> Result<(DatasetHeader, Vec<ProblemInstance<f32>>)> {
    let header = decode_header(buf)?;
    let s = header.structure;
    let plane = header.height * header.width;
    let rule_bytes = header.rule_len.div_ceil(8);
    let mut at = HEADER_LEN;
    let mut out = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let panels = (0..s.panels())
            .map(|j| {
                let bytes = &buf[at + j * plane..at + (j + 1) * plane];
                Tensor::new(
                    vec![header.height, header.width],
                    bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        at += s.panels() * plane;
        let label = buf[at] as usize;
        if label >= s.answers {
            return Err(Error::Format {
                offset: at as u64,
                detail: format!("label {label} out of range for {} answers", s.answers),
            });
        }
        at += 1;
        let rules = (header.rule_len > 0).then(|| {
            (0..header.rule_len)
                .map(|i| (buf[at + i / 8] >> (i % 8)) & 1)
                .collect()
        });
        at += rule_bytes;
        out.push(ProblemInstance { panels, label, rules });
    }
    Ok((header, out))
}

pub fn write_dataset(instances: &[ProblemInstance<f32>], structure: &TaskStructure, panel_hw: (usize, usize), path: &Path) -> Result<()> {
    let bytes = encode_dataset(instances, structure, panel_hw)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(TaskStructure, Vec<ProblemInstance<f32>>)> {
    let (header, instances) = read_dataset_with_header(path)?;
    Ok((header.structure, instances))
}

pub fn read_dataset_with_header(path: &Path) -> Result<(DatasetHeader, Vec<ProblemInstance<f32>>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&buf)
}
