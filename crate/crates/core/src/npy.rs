//! Reader and writer for the `.npy` array container.
//!
//! Files are written as format version 1.0 with the header padded so the
//! payload starts on a 64-byte boundary, matching what `numpy.save` emits.
//! Versions 2.0 and 3.0 are accepted on read (they only widen the header
//! length field).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, TensorData};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

/// Encode a tensor as `.npy` bytes.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let shape = match t.shape() {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        t.dtype().descr(),
        shape
    );
    // magic(6) + version(2) + header_len(2) + header + '\n'
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + t.len() * t.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match t.data() {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    out
}

/// Decode `.npy` bytes. `path` is only used for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let format_err = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(format_err("missing NUMPY magic"));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(format_err("truncated header length"));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(format_err(&format!("unsupported format version {v}"))),
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(format_err("header extends past end of file"));
    }
    let header = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| format_err("header is not valid text"))?;
    let header = Header::parse(header).map_err(|r| format_err(&r))?;
    if header.fortran_order {
        return Err(format_err("fortran_order arrays are not supported"));
    }
    let dtype = DType::from_descr(&header.descr)
        .ok_or_else(|| format_err(&format!("unsupported dtype '{}'", header.descr)))?;

    let count: usize = header.shape.iter().product();
    let payload = &bytes[payload_start..];
    if payload.len() != count * dtype.size() {
        return Err(Error::CorruptDump {
            path: path.to_path_buf(),
            reason: format!(
                "shape {:?} of {:?} needs {} payload bytes, found {}",
                header.shape,
                dtype,
                count * dtype.size(),
                payload.len()
            ),
        });
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
    };
    Tensor::new(header.shape, data)
}

/// Read only the header of an `.npy` file, checking that the file length
/// agrees with the declared shape.
pub fn read_header(path: impl AsRef<Path>) -> Result<(DType, Vec<usize>)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let mut prefix = vec![0u8; 12];
    let n = file.read(&mut prefix).map_err(|e| Error::io(path, e))?;
    prefix.truncate(n);
    let format_err = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if prefix.len() < 10 || &prefix[..6] != MAGIC {
        return Err(format_err("missing NUMPY magic"));
    }
    let (header_len, header_start) = match prefix[6] {
        1 => (u16::from_le_bytes([prefix[8], prefix[9]]) as usize, 10),
        2 | 3 if prefix.len() == 12 => (
            u32::from_le_bytes([prefix[8], prefix[9], prefix[10], prefix[11]]) as usize,
            12,
        ),
        v => return Err(format_err(&format!("unsupported format version {v}"))),
    };
    let mut head = vec![0u8; header_start + header_len];
    head[..prefix.len()].copy_from_slice(&prefix);
    if head.len() > prefix.len() {
        file.read_exact(&mut head[prefix.len()..])
            .map_err(|_| format_err("header extends past end of file"))?;
    }
    let header = std::str::from_utf8(&head[header_start..])
        .map_err(|_| format_err("header is not valid text"))?;
    let header = Header::parse(header).map_err(|r| format_err(&r))?;
    let dtype = DType::from_descr(&header.descr)
        .ok_or_else(|| format_err(&format!("unsupported dtype '{}'", header.descr)))?;
    let count: usize = header.shape.iter().product();
    if file_len != head.len() + count * dtype.size() {
        return Err(Error::CorruptDump {
            path: path.to_path_buf(),
            reason: format!(
                "shape {:?} needs {} payload bytes, file has {}",
                header.shape,
                count * dtype.size(),
                file_len.saturating_sub(head.len())
            ),
        });
    }
    Ok((dtype, header.shape))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Write `t` to `path`, creating parent directories. The file is written to a
/// temporary sibling and renamed into place.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode(t))
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, PartialEq)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl Header {
    /// Parse the Python dict literal of an npy header.
    fn parse(text: &str) -> std::result::Result<Header, String> {
        let mut p = Parser {
            s: text.trim_end_matches(['\n', ' ', '\0']).as_bytes(),
            i: 0,
        };
        p.expect(b'{')?;
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        loop {
            p.skip_ws();
            if p.eat(b'}') {
                break;
            }
            let key = p.string()?;
            p.skip_ws();
            p.expect(b':')?;
            p.skip_ws();
            match key.as_str() {
                "descr" => descr = Some(p.string()?),
                "fortran_order" => fortran = Some(p.boolean()?),
                "shape" => shape = Some(p.tuple()?),
                other => return Err(format!("unexpected header key '{other}'")),
            }
            p.skip_ws();
            if !p.eat(b',') {
                p.skip_ws();
                p.expect(b'}')?;
                break;
            }
        }
        Ok(Header {
            descr: descr.ok_or("header lacks 'descr'")?,
            fortran_order: fortran.ok_or("header lacks 'fortran_order'")?,
            shape: shape.ok_or("header lacks 'shape'")?,
        })
    }
}

struct Parser<'a> {
    s: &'a [u8],
    i: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.s.get(self.i) == Some(&c) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> std::result::Result<(), String> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(format!("expected '{}' at offset {}", c as char, self.i))
        }
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let quote = match self.s.get(self.i) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err(format!("expected a string at offset {}", self.i)),
        };
        self.i += 1;
        let start = self.i;
        while self.i < self.s.len() && self.s[self.i] != quote {
            self.i += 1;
        }
        if self.i == self.s.len() {
            return Err("unterminated string".into());
        }
        let out = String::from_utf8_lossy(&self.s[start..self.i]).into_owned();
        self.i += 1;
        Ok(out)
    }

    fn boolean(&mut self) -> std::result::Result<bool, String> {
        let rest = &self.s[self.i..];
        if rest.starts_with(b"True") {
            self.i += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.i += 5;
            Ok(false)
        } else {
            Err(format!("expected True/False at offset {}", self.i))
        }
    }

    fn tuple(&mut self) -> std::result::Result<Vec<usize>, String> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            let start = self.i;
            while self.i < self.s.len() && self.s[self.i].is_ascii_digit() {
                self.i += 1;
            }
            // numpy on some platforms writes longs as "3L"
            let digits = std::str::from_utf8(&self.s[start..self.i]).unwrap_or("");
            let dim = digits
                .parse::<usize>()
                .map_err(|_| format!("bad dimension at offset {start}"))?;
            self.eat(b'L');
            dims.push(dim);
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}
