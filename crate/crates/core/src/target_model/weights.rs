//! "FEGL" tensor container.
//!
//! Little-endian layout: magic `FEGL`, `u32` version (1), `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
//! row-major `f32` data.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FEGL";
pub const VERSION: u32 = 1;

/// Anything that owns named parameter tensors.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

pub fn encode(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.err("element count overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// A decoded tensor plus the byte offset where its record started.
#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub offset: u64,
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader::new(buf);
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected FEGL".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let offset = r.offset();
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.err("tensor size overflows"))?;
        let data = r.f32s(n)?;
        let tensor = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset,
            message: format!("tensor `{name}`: {e}"),
        })?;
        out.push(Entry {
            name,
            tensor,
            offset,
        });
    }
    if !r.at_end() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save<P: Parameters + ?Sized>(model: &P, path: &Path) -> Result<()> {
    let params = model.named_params();
    fs::write(path, encode(&params)).map_err(Error::io_at(path))?;
    Ok(())
}

/// Fills `model` from a container. Nothing is written into `model` unless
/// every tensor is present, known and correctly shaped.
pub fn load_into<P: Parameters + ?Sized>(model: &mut P, buf: &[u8]) -> Result<()> {
    let entries = decode(buf)?;
    let mut by_name: HashMap<String, Entry> = HashMap::new();
    {
        let expected: HashMap<String, Vec<usize>> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for e in entries {
            match expected.get(&e.name) {
                None => {
                    return Err(Error::Format {
                        offset: e.offset,
                        message: format!("unknown tensor name `{}`", e.name),
                    })
                }
                Some(shape) if shape.as_slice() != e.tensor.shape() => {
                    return Err(Error::Format {
                        offset: e.offset,
                        message: format!(
                            "tensor `{}` has shape {:?}, expected {:?}",
                            e.name,
                            e.tensor.shape(),
                            shape
                        ),
                    })
                }
                Some(_) => {}
            }
            if by_name.contains_key(&e.name) {
                return Err(Error::Format {
                    offset: e.offset,
                    message: format!("duplicate tensor `{}`", e.name),
                });
            }
            by_name.insert(e.name.clone(), e);
        }
        if let Some(missing) = expected.keys().find(|k| !by_name.contains_key(*k)) {
            return Err(Error::Format {
                offset: buf.len() as u64,
                message: format!("missing tensor `{missing}`"),
            });
        }
    }
    for (name, slot) in model.named_params_mut() {
        let e = by_name.remove(&name).expect("checked above");
        slot.data_mut().copy_from_slice(e.tensor.data());
    }
    Ok(())
}

pub fn load<P: Parameters + ?Sized>(model: &mut P, path: &Path) -> Result<()> {
    let buf = fs::read(path).map_err(Error::io_at(path))?;
    load_into(model, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Two {
        a: Tensor,
        b: Tensor,
    }

    impl Parameters for Two {
        fn named_params(&self) -> Vec<(String, &Tensor)> {
            vec![("a".into(), &self.a), ("b".into(), &self.b)]
        }
        fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("a".into(), &mut self.a), ("b".into(), &mut self.b)]
        }
    }

    fn sample() -> Two {
        Two {
            a: Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap(),
            b: Tensor::vector(vec![7.25]),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let src = sample();
        let buf = encode(&src.named_params());
        let mut dst = Two {
            a: Tensor::zeros(&[2, 3]),
            b: Tensor::zeros(&[1]),
        };
        load_into(&mut dst, &buf).unwrap();
        for (x, y) in src.a.data().iter().zip(dst.a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(dst.b.data(), &[7.25]);
    }

    #[test]
    fn header_layout() {
        let buf = encode(&sample().named_params());
        assert_eq!(&buf[..4], b"FEGL");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
    }

    #[test]
    fn truncated_file_fails_without_touching_model() {
        let buf = encode(&sample().named_params());
        let mut dst = Two {
            a: Tensor::filled(&[2, 3], 9.0),
            b: Tensor::filled(&[1], 9.0),
        };
        let err = load_into(&mut dst, &buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(dst.a.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = encode(&sample().named_params());
        buf[0] = b'X';
        assert!(matches!(decode(&buf), Err(Error::Format { offset: 0, .. })));
        let mut buf = encode(&sample().named_params());
        buf[4] = 2;
        assert!(matches!(decode(&buf), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn unknown_name_is_listed() {
        let extra = Tensor::vector(vec![1.0]);
        let src = sample();
        let mut named = src.named_params();
        named.push(("mystery.weight".into(), &extra));
        let buf = encode(&named);
        let mut dst = sample();
        let err = load_into(&mut dst, &buf).unwrap_err().to_string();
        assert!(err.contains("mystery.weight"), "{err}");
    }
}
