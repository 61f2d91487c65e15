//! Reader for the subset of the MATLAB level-5 MAT format used by the
//! BSDS500 ground-truth files: compressed elements, cells, structs and
//! numeric arrays.

use std::io::Read;

use flate2::read::ZlibDecoder;

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;
const MI_UTF8: u32 = 16;

const MX_CELL: u8 = 1;
const MX_STRUCT: u8 = 2;
const MX_CHAR: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum MatValue {
    /// Column-major numeric data (logical arrays included), widened to f64.
    Numeric { dims: Vec<usize>, data: Vec<f64> },
    Char(String),
    Cell { dims: Vec<usize>, items: Vec<MatValue> },
    /// `values[element][field]`, elements in column-major order.
    Struct { dims: Vec<usize>, fields: Vec<String>, values: Vec<Vec<MatValue>> },
    Unsupported(u8),
}

impl MatValue {
    pub fn field(&self, element: usize, name: &str) -> Option<&MatValue> {
        match self {
            MatValue::Struct { fields, values, .. } => {
                let idx = fields.iter().position(|f| f == name)?;
                values.get(element)?.get(idx)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatVariable {
    pub name: String,
    pub value: MatValue,
}

type ParseResult<T> = std::result::Result<T, String>;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    big_endian: bool,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], big_endian: bool) -> Self {
        Self { buf, pos: 0, big_endian }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> ParseResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(format!("truncated: need {n} bytes at offset {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> ParseResult<u32> {
        let b: [u8; 4] = self.take(4)?.try_into().unwrap();
        Ok(if self.big_endian { u32::from_be_bytes(b) } else { u32::from_le_bytes(b) })
    }

    /// Reads one data element tag and payload, handling the small-element form.
    fn element(&mut self) -> ParseResult<(u32, &'a [u8])> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            let n = (first >> 16) as usize;
            let ty = first & 0xffff;
            let payload = self.take(4)?;
            return Ok((ty, &payload[..n.min(4)]));
        }
        let ty = first;
        let n = self.u32()? as usize;
        let payload = self.take(n)?;
        if ty != MI_COMPRESSED {
            let pad = (8 - n % 8) % 8;
            self.take(pad.min(self.remaining()))?;
        }
        Ok((ty, payload))
    }
}

fn numbers(ty: u32, bytes: &[u8], big_endian: bool) -> ParseResult<Vec<f64>> {
    macro_rules! conv {
        ($t:ty, $n:expr) => {
            bytes
                .chunks_exact($n)
                .map(|c| {
                    let a: [u8; $n] = c.try_into().unwrap();
                    (if big_endian { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
                })
                .collect()
        };
    }
    Ok(match ty {
        MI_INT8 => bytes.iter().map(|&b| b as i8 as f64).collect(),
        MI_UINT8 | MI_UTF8 => bytes.iter().map(|&b| b as f64).collect(),
        MI_INT16 => conv!(i16, 2),
        MI_UINT16 => conv!(u16, 2),
        MI_INT32 => conv!(i32, 4),
        MI_UINT32 => conv!(u32, 4),
        MI_SINGLE => conv!(f32, 4),
        MI_DOUBLE => conv!(f64, 8),
        MI_INT64 => conv!(i64, 8),
        MI_UINT64 => conv!(u64, 8),
        other => return Err(format!("unsupported numeric type {other}")),
    })
}

fn parse_matrix(payload: &[u8], big_endian: bool) -> ParseResult<(String, MatValue)> {
    let mut c = Cursor::new(payload, big_endian);
    if payload.is_empty() {
        return Ok((String::new(), MatValue::Numeric { dims: vec![0, 0], data: vec![] }));
    }
    let (_, flags) = c.element()?;
    let class = if flags.len() >= 4 {
        let word = if big_endian {
            u32::from_be_bytes(flags[..4].try_into().unwrap())
        } else {
            u32::from_le_bytes(flags[..4].try_into().unwrap())
        };
        (word & 0xff) as u8
    } else {
        return Err("array flags too short".into());
    };
    let (dty, dbytes) = c.element()?;
    let dims: Vec<usize> = numbers(dty, dbytes, big_endian)?.into_iter().map(|d| d as usize).collect();
    let (_, name_bytes) = c.element()?;
    let name = String::from_utf8_lossy(name_bytes).into_owned();
    let count: usize = dims.iter().product();
    let value = match class {
        MX_CELL => {
            let mut items = Vec::with_capacity(count);
            for _ in 0..count {
                let (ty, p) = c.element()?;
                if ty != MI_MATRIX {
                    return Err(format!("cell item has type {ty}"));
                }
                items.push(parse_matrix(p, big_endian)?.1);
            }
            MatValue::Cell { dims, items }
        }
        MX_STRUCT => {
            let (lty, lbytes) = c.element()?;
            let len = *numbers(lty, lbytes, big_endian)?.first().ok_or("missing field name length")? as usize;
            let (_, names) = c.element()?;
            let fields: Vec<String> = if len == 0 {
                vec![]
            } else {
                names
                    .chunks(len)
                    .map(|n| String::from_utf8_lossy(n).trim_end_matches('\0').to_string())
                    .collect()
            };
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let mut row = Vec::with_capacity(fields.len());
                for _ in 0..fields.len() {
                    let (ty, p) = c.element()?;
                    if ty != MI_MATRIX {
                        return Err(format!("struct field has type {ty}"));
                    }
                    row.push(parse_matrix(p, big_endian)?.1);
                }
                values.push(row);
            }
            MatValue::Struct { dims, fields, values }
        }
        MX_CHAR => {
            let (ty, p) = c.element()?;
            let chars: String = numbers(ty, p, big_endian)?
                .into_iter()
                .filter_map(|v| char::from_u32(v as u32))
                .collect();
            MatValue::Char(chars)
        }
        6..=15 => {
            let (ty, p) = c.element()?;
            let data = numbers(ty, p, big_endian)?;
            if data.len() != count {
                return Err(format!("{} values for dims {dims:?}", data.len()));
            }
            MatValue::Numeric { dims, data }
        }
        other => MatValue::Unsupported(other),
    };
    Ok((name, value))
}

fn parse_elements(buf: &[u8], big_endian: bool, out: &mut Vec<MatVariable>) -> ParseResult<()> {
    let mut c = Cursor::new(buf, big_endian);
    while c.remaining() >= 8 {
        let (ty, payload) = c.element()?;
        match ty {
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(payload)
                    .read_to_end(&mut inflated)
                    .map_err(|e| format!("inflate: {e}"))?;
                parse_elements(&inflated, big_endian, out)?;
            }
            MI_MATRIX => {
                let (name, value) = parse_matrix(payload, big_endian)?;
                out.push(MatVariable { name, value });
            }
            _ => {}
        }
    }
    Ok(())
}

/// Parses every top-level variable of a level-5 MAT file.
pub fn parse_mat(bytes: &[u8]) -> ParseResult<Vec<MatVariable>> {
    if bytes.len() < 128 {
        return Err("file shorter than the 128-byte header".into());
    }
    if bytes[..4] == [0, 0, 0, 0] || bytes.starts_with(b"\x89HDF") {
        return Err("not a level-5 MAT file".into());
    }
    let big_endian = match &bytes[126..128] {
        b"IM" => false,
        b"MI" => true,
        _ => return Err("bad endian indicator".into()),
    };
    let mut vars = Vec::new();
    parse_elements(&bytes[128..], big_endian, &mut vars)?;
    Ok(vars)
}

/// Segmentation maps (row-major `height x width`) stored in a BSDS500
/// `groundTruth` cell array.
pub fn bsds_segmentations(bytes: &[u8]) -> ParseResult<Vec<(usize, usize, Vec<u32>)>> {
    let vars = parse_mat(bytes)?;
    let gt = vars
        .iter()
        .find(|v| v.name == "groundTruth")
        .ok_or("no 'groundTruth' variable")?;
    let MatValue::Cell { items, .. } = &gt.value else {
        return Err("'groundTruth' is not a cell array".into());
    };
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let Some(MatValue::Numeric { dims, data }) = item.field(0, "Segmentation") else {
            return Err("annotation without a numeric 'Segmentation' field".into());
        };
        if dims.len() != 2 {
            return Err(format!("segmentation has dims {dims:?}"));
        }
        let (h, w) = (dims[0], dims[1]);
        // column-major to row-major
        let mut labels = vec![0u32; h * w];
        for col in 0..w {
            for row in 0..h {
                labels[row * w + col] = data[col * h + row] as u32;
            }
        }
        out.push((h, w, labels));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // written by scipy.io.savemat: a 1x2 cell of structs with Segmentation
    // (uint16) and Boundaries (logical) fields
    const COMPRESSED: &[u8] = include_bytes!("../../tests/fixtures/bsds_gt.mat");
    const PLAIN: &[u8] = include_bytes!("../../tests/fixtures/bsds_gt_plain.mat");

    fn expected() -> Vec<(usize, usize, Vec<u32>)> {
        vec![
            (3, 4, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 3, 3]),
            (3, 4, (1..=12).collect()),
        ]
    }

    #[test]
    fn compressed_ground_truth() {
        assert_eq!(bsds_segmentations(COMPRESSED).unwrap(), expected());
    }

    #[test]
    fn uncompressed_ground_truth() {
        assert_eq!(bsds_segmentations(PLAIN).unwrap(), expected());
    }

    #[test]
    fn boundaries_field_is_read() {
        let vars = parse_mat(PLAIN).unwrap();
        let MatValue::Cell { items, .. } = &vars[0].value else { panic!() };
        let Some(MatValue::Numeric { data, .. }) = items[0].field(0, "Boundaries") else { panic!() };
        assert_eq!(data.len(), 12);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_mat(&[0u8; 10]).is_err());
        assert!(parse_mat(&[7u8; 200]).is_err());
        let mut truncated = COMPRESSED.to_vec();
        truncated.truncate(160);
        assert!(bsds_segmentations(&truncated).is_err());
    }
}
