//! On-disk formats.
//!
//! Dense container (`USDR`), all integers little-endian:
//!
//! ```text
//! "USDR" | u16 version | u8 kind | u8 ndim | u64 shape[ndim]
//!        | u32 attr_len | attr_len bytes of JSON | f64 payload[prod(shape)]
//! ```
//!
//! Sparse matrix cache (`USDS`):
//!
//! ```text
//! "USDS" | u16 version | u8 orientation (0 column-major H, 1 row-major B)
//!        | u64 outer | u64 inner | u64 nnz | u32 attr_len | JSON
//!        | u64 ptr[outer+1] | u32 idx[nnz] | f64 val[nnz]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::beamformer::BeamformerMatrix;
use crate::error::{Error, Result};
use crate::sparse::Compressed;
use crate::spectral::{Basis, DenseMatrix, FactorMethod, SpectralFactorization};
use crate::system::SystemMatrix;

pub const CONTAINER_MAGIC: &[u8; 4] = b"USDR";
pub const SPARSE_MAGIC: &[u8; 4] = b"USDS";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Channel,
    Image,
    Bundle,
    MatrixCache,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Channel => 0,
            Kind::Image => 1,
            Kind::Bundle => 2,
            Kind::MatrixCache => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Kind::Channel,
            1 => Kind::Image,
            2 => Kind::Bundle,
            3 => Kind::MatrixCache,
            _ => return Err(Error::Format(format!("unknown container kind {c}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Channel => "channel",
            Kind::Image => "image",
            Kind::Bundle => "bundle",
            Kind::MatrixCache => "matrix-cache",
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn payload_hash(payload: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in payload {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub shape: Vec<usize>,
    pub attrs: BTreeMap<String, Value>,
    pub payload: Vec<f64>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn attrs(&mut self) -> Result<BTreeMap<String, Value>> {
        let len = self.u32()? as usize;
        serde_json::from_slice(self.take(len)?).map_err(|e| Error::Format(format!("attribute block: {e}")))
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(m))));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn attr_bytes(attrs: &BTreeMap<String, Value>) -> Vec<u8> {
    serde_json::to_vec(attrs).expect("attributes serialize")
}

impl Container {
    pub fn new(kind: Kind, shape: Vec<usize>, payload: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != payload.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: vec![payload.len()],
            });
        }
        Ok(Self {
            kind,
            shape,
            attrs: BTreeMap::new(),
            payload,
        })
    }

    pub fn with_attr(mut self, key: &str, value: impl Serialize) -> Self {
        self.set_attr(key, value);
        self
    }

    pub fn set_attr(&mut self, key: &str, value: impl Serialize) {
        self.attrs
            .insert(key.to_string(), serde_json::to_value(value).expect("attribute serializes"));
    }

    pub fn attr<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .attrs
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing attribute '{key}'")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("attribute '{key}': {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut attrs = self.attrs.clone();
        attrs.insert("payload_sha256".into(), Value::String(payload_hash(&self.payload)));
        let a = attr_bytes(&attrs);
        let mut out = Vec::with_capacity(32 + a.len() + self.payload.len() * 8);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(a.len() as u32).to_le_bytes());
        out.extend_from_slice(&a);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and checks the payload against its recorded hash.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        c.magic(CONTAINER_MAGIC)?;
        let kind = Kind::from_code(c.u8()?)?;
        let ndim = c.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| c.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let mut attrs = c.attrs()?;
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| Error::Format("shape overflow".into()))?;
        let payload = c.f64s(n)?;
        c.done()?;
        if let Some(Value::String(h)) = attrs.remove("payload_sha256") {
            if h != payload_hash(&payload) {
                return Err(Error::Format("payload hash mismatch".into()));
            }
        }
        Ok(Self {
            kind,
            shape,
            attrs,
            payload,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(self, kind: Kind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {} container, found {}",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(self)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sparse_to_bytes(m: &Compressed, orientation: u8, attrs: &BTreeMap<String, Value>) -> Vec<u8> {
    let a = attr_bytes(attrs);
    let mut out = Vec::with_capacity(40 + a.len() + m.ptr.len() * 8 + m.nnz() * 12);
    out.extend_from_slice(SPARSE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(orientation);
    for v in [m.outer_len, m.inner_len, m.nnz()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&(a.len() as u32).to_le_bytes());
    out.extend_from_slice(&a);
    for &p in &m.ptr {
        out.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for &i in &m.idx {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for &v in &m.val {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn sparse_from_bytes(buf: &[u8], orientation: u8) -> Result<(Compressed, BTreeMap<String, Value>)> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(SPARSE_MAGIC)?;
    let o = c.u8()?;
    if o != orientation {
        return Err(Error::Format("sparse cache has the wrong orientation".into()));
    }
    let outer = c.u64()? as usize;
    let inner = c.u64()? as usize;
    let nnz = c.u64()? as usize;
    let attrs = c.attrs()?;
    let ptr: Vec<usize> = (0..=outer).map(|_| c.u64().map(|v| v as usize)).collect::<Result<_>>()?;
    let idx_raw = c.take(nnz * 4)?;
    let idx = idx_raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    let val = c.f64s(nnz)?;
    c.done()?;
    Ok((Compressed::checked(outer, inner, ptr, idx, val)?, attrs))
}

pub fn write_system_matrix(path: &Path, h: &SystemMatrix, key: &str) -> Result<()> {
    let mut attrs = BTreeMap::new();
    attrs.insert("key".into(), Value::String(key.into()));
    attrs.insert("sample_count".into(), h.sample_count.into());
    attrs.insert("element_count".into(), h.element_count.into());
    write_atomic(path, &sparse_to_bytes(h.storage(), 0, &attrs))
}

pub fn read_system_matrix(path: &Path) -> Result<(SystemMatrix, String)> {
    let (csc, attrs) = sparse_from_bytes(&fs::read(path)?, 0)?;
    let get = |k: &str| {
        attrs
            .get(k)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format(format!("sparse cache lacks '{k}'")))
    };
    let h = SystemMatrix::from_csc(csc, get("sample_count")? as usize, get("element_count")? as usize)?;
    let key = attrs.get("key").and_then(Value::as_str).unwrap_or_default().to_string();
    Ok((h, key))
}

pub fn write_beamformer(path: &Path, b: &BeamformerMatrix, key: &str) -> Result<()> {
    let mut attrs = BTreeMap::new();
    attrs.insert("key".into(), Value::String(key.into()));
    attrs.insert("provenance".into(), Value::String(b.provenance.clone()));
    write_atomic(path, &sparse_to_bytes(b.storage(), 1, &attrs))
}

pub fn read_beamformer(path: &Path) -> Result<(BeamformerMatrix, String)> {
    let (csr, attrs) = sparse_from_bytes(&fs::read(path)?, 1)?;
    let s = |k: &str| attrs.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
    Ok((BeamformerMatrix::from_csr(csr, s("provenance")), s("key")))
}

/// Factorization as a matrix-cache container: payload is `s`, then `U` and
/// `V` column-major, shape `[N, R]`.
pub fn factorization_container(f: &SpectralFactorization, key: &str) -> Result<Container> {
    let (n, r) = (f.dim(), f.rank());
    let mut payload = Vec::with_capacity(r + 2 * n * r);
    payload.extend_from_slice(&f.s);
    let stored = match (&f.u, &f.v) {
        (Basis::Dense(u), Basis::Dense(v)) => {
            payload.extend_from_slice(&u.data);
            payload.extend_from_slice(&v.data);
            true
        }
        _ => false,
    };
    let shape = if stored { vec![n, r] } else { vec![r] };
    let mut c = Container::new(Kind::MatrixCache, vec![payload.len()], payload)?;
    c.set_attr("factor_shape", shape);
    c.set_attr("method", f.method);
    c.set_attr("residual_norm", f.residual_norm);
    c.set_attr("rank_tol", f.rank_tol);
    c.set_attr("key", key);
    Ok(c)
}

pub fn factorization_from_container(c: &Container) -> Result<SpectralFactorization> {
    let method: FactorMethod = c.attr("method")?;
    let shape: Vec<usize> = c.attr("factor_shape")?;
    let residual_norm: f64 = c.attr("residual_norm")?;
    let rank_tol: f64 = c.attr("rank_tol")?;
    if method == FactorMethod::Identity {
        let mut f = SpectralFactorization::identity(shape[0]);
        f.rank_tol = rank_tol;
        return Ok(f);
    }
    let (n, r) = match shape[..] {
        [n, r] => (n, r),
        _ => return Err(Error::Format("factorization cache shape".into())),
    };
    if c.payload.len() != r + 2 * n * r {
        return Err(Error::Format("factorization cache payload length".into()));
    }
    let s = c.payload[..r].to_vec();
    let u = DenseMatrix {
        rows: n,
        cols: r,
        data: c.payload[r..r + n * r].to_vec(),
    };
    let v = DenseMatrix {
        rows: n,
        cols: r,
        data: c.payload[r + n * r..].to_vec(),
    };
    Ok(SpectralFactorization {
        u: Basis::Dense(u),
        s,
        v: Basis::Dense(v),
        residual_norm,
        method,
        rank_tol,
    })
}

/// Provenance record written by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, config_hash: String) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash,
            seeds: vec![],
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_s: 0.0,
            notes: vec![],
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyStatus {
    Ok,
    Missing,
    Mismatch { expected: String, actual: String },
    Corrupt(String),
}

/// Re-hashes every file named in a manifest; containers are also parsed so a
/// damaged payload is reported even if the manifest itself was edited.
pub fn verify_manifest(manifest: &RunManifest, base: &Path) -> Vec<(PathBuf, VerifyStatus)> {
    manifest
        .inputs
        .iter()
        .chain(&manifest.outputs)
        .map(|(p, expected)| {
            let mut path = PathBuf::from(p);
            if path.is_relative() && !path.exists() {
                path = base.join(&path);
            }
            let status = match fs::read(&path) {
                Err(_) => VerifyStatus::Missing,
                Ok(bytes) => {
                    let actual = sha256_hex(&bytes);
                    if &actual != expected {
                        VerifyStatus::Mismatch {
                            expected: expected.clone(),
                            actual,
                        }
                    } else if bytes.starts_with(CONTAINER_MAGIC) {
                        match Container::from_bytes(&bytes) {
                            Ok(_) => VerifyStatus::Ok,
                            Err(e) => VerifyStatus::Corrupt(e.to_string()),
                        }
                    } else {
                        VerifyStatus::Ok
                    }
                }
            };
            (path, status)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_all_kinds() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [Kind::Channel, Kind::Image, Kind::Bundle, Kind::MatrixCache] {
            let payload: Vec<f64> = (0..24).map(|i| (i as f64).sin() * 1e-300 + i as f64).collect();
            let c = Container::new(kind, vec![2, 3, 4], payload)
                .unwrap()
                .with_attr("note", "x")
                .with_attr("nested", serde_json::json!({"a": [1, 2]}));
            let p = dir.path().join(format!("{}.usdr", kind.as_str()));
            c.write(&p).unwrap();
            let back = Container::read(&p).unwrap();
            assert_eq!(back, c);
            assert!(back.payload.iter().zip(&c.payload).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let c = Container::new(Kind::Image, vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut b = c.to_bytes();
        let last = b.len() - 1;
        b[last] ^= 1;
        assert!(matches!(Container::from_bytes(&b), Err(Error::Format(_))));
        assert!(Container::from_bytes(&b[..10]).is_err());
        assert!(Container::new(Kind::Image, vec![3], vec![0.0; 4]).is_err());
    }

    #[test]
    fn factorization_round_trip() {
        let a = DenseMatrix::from_fn(5, 5, |i, j| (i * 5 + j) as f64 + if i == j { 10.0 } else { 0.0 });
        let f = crate::spectral::factorize(&a, &crate::spectral::FactorizationRequest::Exact, 1e-10).unwrap();
        let c = factorization_container(&f, "k").unwrap();
        let back = factorization_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, f);
        let id = SpectralFactorization::identity(7);
        let back = factorization_from_container(&factorization_container(&id, "i").unwrap()).unwrap();
        assert_eq!(back, id);
    }
}
