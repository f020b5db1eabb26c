//! Named-array container: one flat little-endian binary file plus a text
//! manifest listing every array's name, dtype, shape and byte range.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "segnas-checkpoint";
const MANIFEST: &str = "manifest.txt";
const DATA: &str = "data.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { path: PathBuf, found: String },
    #[error("{path}: manifest line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{path}: data file does not match manifest: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("missing array `{0}`")]
    Missing(String),
    #[error("array `{name}` has dtype {found}, expected {expected}")]
    DType { name: String, found: DType, expected: DType },
    #[error("missing metadata key `{0}`")]
    MissingMeta(String),
    #[error("metadata `{key}`: {msg}")]
    Meta { key: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
    U32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            "u8" => Some(DType::U8),
            "u32" => Some(DType::U32),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
            DType::U32 => "u32",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U8(_) => DType::U8,
            ArrayData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => ArrayData::F32(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
            DType::F64 => ArrayData::F64(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
            DType::U8 => ArrayData::U8(bytes.to_vec()),
            DType::U32 => ArrayData::U32(bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// In-memory checkpoint: ordered arrays plus string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<Array>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError>
    where
        T::Err: fmt::Display,
    {
        self.meta(key)?.parse().map_err(|e: T::Err| CheckpointError::Meta {
            key: key.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: shape and length differ");
        self.arrays.push(Array { name, shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&Array, CheckpointError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn f32(&self, name: &str) -> Result<&[f32], CheckpointError> {
        match &self.get(name)?.data {
            ArrayData::F32(v) => Ok(v),
            d => Err(self.dtype_err(name, d.dtype(), DType::F32)),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&[f64], CheckpointError> {
        match &self.get(name)?.data {
            ArrayData::F64(v) => Ok(v),
            d => Err(self.dtype_err(name, d.dtype(), DType::F64)),
        }
    }

    pub fn u8(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match &self.get(name)?.data {
            ArrayData::U8(v) => Ok(v),
            d => Err(self.dtype_err(name, d.dtype(), DType::U8)),
        }
    }

    pub fn u32(&self, name: &str) -> Result<&[u32], CheckpointError> {
        match &self.get(name)?.data {
            ArrayData::U32(v) => Ok(v),
            d => Err(self.dtype_err(name, d.dtype(), DType::U32)),
        }
    }

    fn dtype_err(&self, name: &str, found: DType, expected: DType) -> CheckpointError {
        CheckpointError::DType {
            name: name.to_string(),
            found,
            expected,
        }
    }

    /// Parameter arrays in the `(name, shape, values)` form used by parameter stores.
    pub fn push_params(&mut self, prefix: &str, arrays: Vec<(String, Vec<usize>, Vec<f64>)>) {
        for (name, shape, values) in arrays {
            self.push(format!("{prefix}{name}"), shape, ArrayData::F64(values));
        }
    }

    /// All f64 arrays under `prefix`, with the prefix removed.
    pub fn params(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.arrays
            .iter()
            .filter_map(|a| match (&a.data, a.name.strip_prefix(prefix)) {
                (ArrayData::F64(v), Some(rest)) => Some((rest.to_string(), a.shape.clone(), v.clone())),
                _ => None,
            })
            .collect()
    }

    /// Writes `dir/manifest.txt` and `dir/data.bin`, creating `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CheckpointError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut data = Vec::new();
        let mut manifest = format!("{MAGIC} {FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            assert!(valid_token(k) && !v.contains('\n'), "metadata `{k}` is not representable");
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for a in &self.arrays {
            assert!(valid_token(&a.name), "array name `{}` is not representable", a.name);
            let offset = data.len();
            a.data.write_le(&mut data);
            let shape: Vec<String> = a.shape.iter().map(usize::to_string).collect();
            manifest.push_str(&format!(
                "array {} {} {} {} {}\n",
                a.name,
                a.data.dtype(),
                if shape.is_empty() { "-".into() } else { shape.join("x") },
                offset,
                data.len() - offset
            ));
        }
        manifest.push_str(&format!("checksum {:016x} {}\n", fnv1a(&data), data.len()));
        // Data first, manifest last: a manifest only ever describes a complete data file.
        let data_path = dir.join(DATA);
        fs::write(&data_path, &data).map_err(io_err(&data_path))?;
        let tmp = dir.join("manifest.txt.tmp");
        fs::write(&tmp, manifest).map_err(io_err(&tmp))?;
        let final_path = dir.join(MANIFEST);
        fs::rename(&tmp, &final_path).map_err(io_err(&final_path))?;
        Ok(())
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(MANIFEST).is_file()
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|source| CheckpointError::Io {
            path: mpath.clone(),
            source,
        })?;
        let dpath = dir.join(DATA);
        let data = fs::read(&dpath).map_err(|source| CheckpointError::Io {
            path: dpath.clone(),
            source,
        })?;
        let bad = |line: usize, msg: String| CheckpointError::Manifest {
            path: mpath.clone(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next().map(|(_, l)| l.split_once(' ')) {
            Some(Some((MAGIC, v))) if v == FORMAT_VERSION.to_string() => {}
            Some(Some((MAGIC, v))) => {
                return Err(CheckpointError::Version {
                    path: mpath,
                    found: v.to_string(),
                })
            }
            _ => return Err(bad(1, "missing header".into())),
        }
        let mut ck = Checkpoint::new();
        let mut checksum = None;
        let mut covered = 0usize;
        for (no, line) in lines {
            let fields: Vec<&str> = line.splitn(3, ' ').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                ["meta", k] => {
                    ck.meta.insert(k.to_string(), String::new());
                }
                ["array", ..] => {
                    let f: Vec<&str> = line.split(' ').collect();
                    let [_, name, dtype, shape, offset, len] = f.as_slice() else {
                        return Err(bad(no, "array entries need name, dtype, shape, offset and length".into()));
                    };
                    let dtype = DType::parse(dtype).ok_or_else(|| bad(no, format!("unknown dtype `{dtype}`")))?;
                    let shape: Vec<usize> = if *shape == "-" {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(|d| d.parse().map_err(|_| bad(no, format!("bad shape `{shape}`"))))
                            .collect::<Result<_, _>>()?
                    };
                    let offset: usize = offset.parse().map_err(|_| bad(no, format!("bad offset `{offset}`")))?;
                    let len: usize = len.parse().map_err(|_| bad(no, format!("bad length `{len}`")))?;
                    let count: usize = shape.iter().product();
                    if count * dtype.width() != len {
                        return Err(bad(no, format!("{name}: shape {shape:?} of {dtype} needs {} bytes, manifest says {len}", count * dtype.width())));
                    }
                    if offset != covered {
                        return Err(bad(no, format!("{name}: offset {offset} leaves a gap or overlap")));
                    }
                    let end = offset.checked_add(len).filter(|&e| e <= data.len()).ok_or_else(|| CheckpointError::Data {
                        path: dpath.clone(),
                        msg: format!("{name} extends past the end of the data"),
                    })?;
                    covered = end;
                    ck.arrays.push(Array {
                        name: name.to_string(),
                        shape,
                        data: ArrayData::read_le(dtype, &data[offset..end]),
                    });
                }
                ["checksum", rest @ ..] => {
                    let f: Vec<&str> = rest.iter().flat_map(|s| s.split(' ')).collect();
                    let [hash, len] = f.as_slice() else {
                        return Err(bad(no, "checksum needs hash and length".into()));
                    };
                    let hash = u64::from_str_radix(hash, 16).map_err(|_| bad(no, format!("bad checksum `{hash}`")))?;
                    let len: usize = len.parse().map_err(|_| bad(no, format!("bad length `{len}`")))?;
                    checksum = Some((hash, len));
                }
                _ => return Err(bad(no, format!("unrecognised entry `{line}`"))),
            }
        }
        let (hash, len) = checksum.ok_or_else(|| bad(0, "missing checksum line".into()))?;
        if len != data.len() || covered != data.len() {
            return Err(CheckpointError::Data {
                path: dpath,
                msg: format!("{} bytes on disk, manifest covers {covered} of {len}", data.len()),
            });
        }
        if fnv1a(&data) != hash {
            return Err(CheckpointError::Data {
                path: dpath,
                msg: "checksum mismatch".into(),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "test");
        ck.set_meta("note", "two words");
        ck.push("a", vec![2, 3], ArrayData::F32(vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 7.0]));
        ck.push("b", vec![0], ArrayData::F64(vec![]));
        ck.push("c", vec![4], ArrayData::U8(vec![0, 1, 254, 255]));
        ck.push("d", vec![1, 2], ArrayData::U32(vec![u32::MAX, 9]));
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("note").unwrap(), "two words");
    }

    #[test]
    fn corrupted_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();
        for broken in [
            text.replace("array a f32 2x3", "array a f32 3x3"),
            text.replace("f32", "f16"),
            text.replace("segnas-checkpoint 1", "segnas-checkpoint 9"),
            text.replace("checksum", "chksum"),
            text.lines().filter(|l| !l.starts_with("checksum")).collect::<Vec<_>>().join("\n"),
            String::new(),
        ] {
            fs::write(&path, &broken).unwrap();
            assert!(Checkpoint::load(dir.path()).is_err(), "accepted:\n{broken}");
        }
    }

    #[test]
    fn corrupted_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let path = dir.path().join(DATA);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(CheckpointError::Data { .. })));
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }

    #[test]
    fn typed_access_checks_dtype() {
        let ck = sample();
        assert_eq!(ck.u8("c").unwrap(), &[0, 1, 254, 255]);
        assert!(matches!(ck.f64("a"), Err(CheckpointError::DType { .. })));
        assert!(matches!(ck.f32("zz"), Err(CheckpointError::Missing(_))));
    }
}
