//! Binary weight checkpoints.
//!
//! Layout: the 5-byte magic `PVSW1`, then one record per tensor until EOF:
//! `u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 data[..]`,
//! all little-endian. Running statistics are stored as two rank-1 records
//! named `<stats>.running_mean` and `<stats>.running_var`.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Real};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PVSW1";
const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_records(mut w: impl Write, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records(mut r: impl Read) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |d: &str| Error::data("<checkpoint>", d.to_string());
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing PVSW1 magic"));
    }
    let mut pos = MAGIC.len();
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let s = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated record"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
    };
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len = take_u32(&mut pos)? as usize;
        let name = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not utf-8"))?;
        pos += len;
        let rank = take_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u32(&mut pos)? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated data"))?;
        pos += 4 * n;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(Record { name, dims, data });
    }
    Ok(out)
}

impl<T: Real> ParamStore<T> {
    pub fn to_records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self
            .params()
            .map(|(k, t)| Record {
                name: k.clone(),
                dims: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f32()).collect(),
            })
            .collect();
        for (k, s) in self.stats_iter() {
            let c = s.channels();
            out.push(Record {
                name: format!("{k}{MEAN_SUFFIX}"),
                dims: vec![c],
                data: s.mean.borrow().iter().map(|v| v.as_f32()).collect(),
            });
            out.push(Record {
                name: format!("{k}{VAR_SUFFIX}"),
                dims: vec![c],
                data: s.var.borrow().iter().map(|v| v.as_f32()).collect(),
            });
        }
        out
    }

    /// Overwrites values of an already-built store. Every parameter and
    /// statistic in the store must be present with a matching shape.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &Record> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        let missing = |n: &str| Error::data("<checkpoint>", format!("missing tensor {n}"));
        let names: Vec<(String, Vec<usize>)> =
            self.params().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        for (name, shape) in names {
            let r = by_name.get(name.as_str()).ok_or_else(|| missing(&name))?;
            if r.dims != shape {
                return Err(Error::data(
                    "<checkpoint>",
                    format!("{name}: stored {:?}, model {:?}", r.dims, shape),
                ));
            }
            self.set(&name, r.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        }
        let stat_names: Vec<String> = self.stats_iter().map(|(k, _)| k.clone()).collect();
        for name in stat_names {
            let m = by_name.get(format!("{name}{MEAN_SUFFIX}").as_str()).ok_or_else(|| missing(&name))?;
            let v = by_name.get(format!("{name}{VAR_SUFFIX}").as_str()).ok_or_else(|| missing(&name))?;
            let conv = |r: &Record| r.data.iter().map(|&x| T::lit(x as f64)).collect::<Vec<T>>();
            self.set_stats(&name, conv(m), conv(v))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        write_records(&mut w, &self.to_records())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let f = std::fs::File::open(path)?;
        let records = read_records(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Data { detail, .. } => Error::data(path, detail),
            other => other,
        })?;
        self.load_records(&records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let rec = Record { name: "ab".into(), dims: vec![2], data: vec![1.0, -2.0] };
        let mut buf = Vec::new();
        write_records(&mut buf, &[rec.clone()]).unwrap();
        let mut want = b"PVSW1".to_vec();
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
        assert_eq!(read_records(buf.as_slice()).unwrap(), vec![rec]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_records(&b"PVSW2"[..]).is_err());
        let mut buf = Vec::new();
        write_records(&mut buf, &[Record { name: "x".into(), dims: vec![3], data: vec![0.0; 3] }]).unwrap();
        buf.pop();
        assert!(read_records(buf.as_slice()).is_err());
    }

    #[test]
    fn store_round_trip() {
        let mut s = ParamStore::<f32>::new();
        s.insert("conv.w", &[2, 1], vec![0.5, 0.25]).unwrap();
        s.insert_stats("bn", 2);
        s.set_stats("bn", vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let recs = s.to_records();
        let mut t = ParamStore::<f32>::new();
        t.insert("conv.w", &[2, 1], vec![0.0, 0.0]).unwrap();
        t.insert_stats("bn", 2);
        t.load_records(&recs).unwrap();
        assert_eq!(t.get("conv.w").unwrap().data(), &[0.5, 0.25]);
        assert_eq!(*t.stats("bn").unwrap().var.borrow(), vec![3.0, 4.0]);
    }
}
