//! Binary parameter checkpoints and the optimizer-moment sidecar.
//!
//! Checkpoint layout, little-endian throughout:
//!
//! ```text
//! magic      "MGCK"
//! version    u32 (= 1)
//! dtype      u8   4 = f32, 8 = f64
//! hash_len   u32, hash utf8[hash_len]
//! count      u32
//! count x { name_len u32, name utf8, trainable u8, rows u32, cols u32,
//!           values dtype[rows * cols] row-major }
//! ```
//!
//! The sidecar (`"MGOP"`, version 1) stores `step u64`, `epoch u64`, then
//! `count u32` records of `name_len u32, name, rows u32, cols u32,
//! m f64[rows * cols], v f64[rows * cols]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::nn::ParameterStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MOMENTS_MAGIC: &[u8; 4] = b"MGOP";
pub const MOMENTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub value: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub dtype: Dtype,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParameterStore, config_hash: &str, dtype: Dtype) -> Self {
        let tensors = store
            .iter()
            .map(|(name, p)| TensorRecord {
                name: name.to_string(),
                trainable: p.trainable,
                value: match dtype {
                    Dtype::F64 => p.value.clone(),
                    Dtype::F32 => p.value.mapv(|x| x as f32 as f64),
                },
            })
            .collect();
        Self {
            config_hash: config_hash.to_string(),
            dtype,
            tensors,
        }
    }

    /// Copies every tensor into `store`. The config hash, the set of names
    /// and every shape must match.
    pub fn apply(&self, store: &mut ParameterStore, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::ConfigMismatch {
                expected: config_hash.to_string(),
                found: self.config_hash.clone(),
            });
        }
        if self.tensors.len() != store.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            store.set_value(&t.name, t.value.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u8(self.dtype.code())?;
        write_str(w, &self.config_hash)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            write_str(w, &t.name)?;
            w.write_u8(t.trainable as u8)?;
            w.write_u32::<LittleEndian>(t.value.nrows() as u32)?;
            w.write_u32::<LittleEndian>(t.value.ncols() as u32)?;
            for &x in t.value.iter() {
                match self.dtype {
                    Dtype::F32 => w.write_f32::<LittleEndian>(x as f32)?,
                    Dtype::F64 => w.write_f64::<LittleEndian>(x)?,
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let code = r.read_u8().map_err(at(0))?;
        let dtype = Dtype::from_code(code).ok_or_else(|| Error::Parse {
            index: 0,
            message: format!("unknown dtype {code}"),
        })?;
        let config_hash = read_str(r).map_err(at(0))?;
        let count = r.read_u32::<LittleEndian>().map_err(at(0))? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for index in 0..count {
            let name = read_str(r).map_err(at(index))?;
            let trainable = r.read_u8().map_err(at(index))? != 0;
            let shape = read_shape(r).map_err(at(index))?;
            let mut values = vec![0f64; shape.0 * shape.1];
            match dtype {
                Dtype::F64 => r.read_f64_into::<LittleEndian>(&mut values).map_err(at(index))?,
                Dtype::F32 => {
                    let mut buf = vec![0f32; values.len()];
                    r.read_f32_into::<LittleEndian>(&mut buf).map_err(at(index))?;
                    values.iter_mut().zip(buf).for_each(|(v, x)| *v = x as f64);
                }
            }
            tensors.push(TensorRecord {
                name,
                trainable,
                value: Mat::from_shape_vec(shape, values).expect("length matches shape"),
            });
        }
        Ok(Self {
            config_hash,
            dtype,
            tensors,
        })
    }
}

/// AdamW first and second moments plus the loop position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub step: u64,
    pub epoch: u64,
    /// `(name, m, v)` sorted by name.
    pub tensors: Vec<(String, Mat, Mat)>,
}

impl Moments {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MOMENTS_MAGIC)?;
        w.write_u32::<LittleEndian>(MOMENTS_VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u64::<LittleEndian>(self.epoch)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, m, v) in &self.tensors {
            write_str(w, name)?;
            w.write_u32::<LittleEndian>(m.nrows() as u32)?;
            w.write_u32::<LittleEndian>(m.ncols() as u32)?;
            for &x in m.iter().chain(v.iter()) {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, MOMENTS_MAGIC, MOMENTS_VERSION)?;
        let step = r.read_u64::<LittleEndian>().map_err(at(0))?;
        let epoch = r.read_u64::<LittleEndian>().map_err(at(0))?;
        let count = r.read_u32::<LittleEndian>().map_err(at(0))? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for index in 0..count {
            let name = read_str(r).map_err(at(index))?;
            let shape = read_shape(r).map_err(at(index))?;
            let n = shape.0 * shape.1;
            let mut m = vec![0f64; n];
            let mut v = vec![0f64; n];
            r.read_f64_into::<LittleEndian>(&mut m).map_err(at(index))?;
            r.read_f64_into::<LittleEndian>(&mut v).map_err(at(index))?;
            tensors.push((
                name,
                Mat::from_shape_vec(shape, m).expect("length matches shape"),
                Mat::from_shape_vec(shape, v).expect("length matches shape"),
            ));
        }
        Ok(Self { step, epoch, tensors })
    }
}

fn at(index: usize) -> impl Fn(std::io::Error) -> Error {
    move |e| Error::Parse {
        index,
        message: e.to_string(),
    }
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(at(0))?;
    if &m != magic {
        return Err(Error::Parse {
            index: 0,
            message: format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        });
    }
    let found = r.read_u32::<LittleEndian>().map_err(at(0))?;
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_shape<R: Read>(r: &mut R) -> std::io::Result<(usize, usize)> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    Ok((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new(11);
        s.register("a.w", 3, 2, Init::Uniform).unwrap();
        s.register("a.b", 1, 2, Init::Constant(0.1)).unwrap();
        s.register_frozen("table", Mat::from_elem((2, 2), 1.0 / 3.0)).unwrap();
        s
    }

    #[test]
    fn f64_roundtrip_is_lossless() {
        let s = store();
        let ck = Checkpoint::from_store(&s, "h", Dtype::F64);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, ck);
        let mut fresh = ParameterStore::new(0);
        fresh.register("a.w", 3, 2, Init::Zeros).unwrap();
        fresh.register("a.b", 1, 2, Init::Zeros).unwrap();
        fresh.register_frozen("table", Mat::zeros((2, 2))).unwrap();
        back.apply(&mut fresh, "h").unwrap();
        for (name, p) in s.iter() {
            assert_eq!(fresh.value(name).unwrap(), &p.value);
        }
    }

    #[test]
    fn f32_values_are_rounded() {
        let ck = Checkpoint::from_store(&store(), "h", Dtype::F32);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut &buf[..]).unwrap();
        let t = back.tensors.iter().find(|t| t.name == "table").unwrap();
        assert_eq!(t.value[[0, 0]], (1.0f32 / 3.0) as f64);
        assert!(!t.trainable);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let mut s = store();
        let ck = Checkpoint::from_store(&s, "h1", Dtype::F64);
        assert!(matches!(ck.apply(&mut s, "h2"), Err(Error::ConfigMismatch { .. })));
        let mut other = ParameterStore::new(0);
        other.register("a.w", 2, 2, Init::Zeros).unwrap();
        other.register("a.b", 1, 2, Init::Zeros).unwrap();
        other.register_frozen("table", Mat::zeros((2, 2))).unwrap();
        assert!(matches!(ck.apply(&mut other, "h1"), Err(Error::ShapeMismatch { .. })));
        other.register("extra", 1, 1, Init::Zeros).unwrap();
        assert!(matches!(ck.apply(&mut other, "h1"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn truncated_checkpoint_reports_record() {
        let ck = Checkpoint::from_store(&store(), "h", Dtype::F64);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let err = Checkpoint::read_from(&mut &buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { index: 2, .. }), "{err}");
    }

    #[test]
    fn moments_roundtrip() {
        let m = Moments {
            step: 7,
            epoch: 2,
            tensors: vec![("x".into(), Mat::from_elem((1, 3), 0.5), Mat::from_elem((1, 3), 1e-9))],
        };
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(Moments::read_from(&mut &buf[..]).unwrap(), m);
    }
}
