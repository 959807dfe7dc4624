//! Single-file bank container.
//!
//! ```text
//! nnvecchia-bank <version>
//! m <m>
//! bins <count>
//! bin <i> <lo> <hi> <lo_closed> <hi_closed> <weight dims> <variance dims>
//! meta <json>
//! payload <bytes>
//! checksum <sha256 hex>
//! <payload>
//! ```
//!
//! The checksum covers every header line before it, newline included, and then the
//! payload. The payload holds little-endian `f64` values network by network (bin order,
//! weight net before variance net) and, within a network, layer by layer with the
//! row-major weight matrix followed by the bias vector.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use super::{BankMetadata, BinModels, Layer, MlpModel, RInterval, SurrogateBank};
use crate::error::{Error, Result};

pub const BANK_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "nnvecchia-bank";

fn dims_string(m: &MlpModel) -> String {
    m.dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn push_model(buf: &mut Vec<u8>, m: &MlpModel) {
    for l in m.layers() {
        for i in 0..l.w.nrows() {
            for j in 0..l.w.ncols() {
                buf.extend_from_slice(&l.w[(i, j)].to_le_bytes());
            }
        }
        for v in l.b.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_bank(bank: &SurrogateBank) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for b in bank.bins() {
        push_model(&mut payload, &b.weights);
        push_model(&mut payload, &b.log_variance);
    }
    let meta = serde_json::to_string(bank.metadata())
        .map_err(|e| Error::BankFormat(format!("metadata: {e}")))?;
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} {BANK_FORMAT_VERSION}\n"));
    header.push_str(&format!("m {}\n", bank.m()));
    header.push_str(&format!("bins {}\n", bank.bins().len()));
    for (i, b) in bank.bins().iter().enumerate() {
        let iv = b.interval;
        header.push_str(&format!(
            "bin {i} {:?} {:?} {} {} {} {}\n",
            iv.lo,
            iv.hi,
            iv.lo_closed,
            iv.hi_closed,
            dims_string(&b.weights),
            dims_string(&b.log_variance)
        ));
    }
    header.push_str(&format!("meta {meta}\n"));
    header.push_str(&format!("payload {}\n", payload.len()));
    let mut h = Sha256::new();
    h.update(header.as_bytes());
    h.update(&payload);
    let sum = super::hex(&h.finalize());
    let mut out = header.into_bytes();
    out.extend_from_slice(format!("checksum {sum}\n").as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_bank(bank: &SurrogateBank, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_bank(bank)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<SurrogateBank> {
    decode_bank(&fs::read(path)?)
}

/// [`load_bank`], failing with [`Error::BankMismatch`] unless the bank was trained for `m`.
pub fn load_bank_expecting(path: impl AsRef<Path>, m: usize) -> Result<SurrogateBank> {
    let bank = load_bank(path)?;
    if bank.m() != m {
        return Err(Error::BankMismatch { found: bank.m(), requested: m });
    }
    Ok(bank)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::BankFormat("truncated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::BankFormat("header is not UTF-8".into()))
    }
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::BankFormat(format!("expected `{key}` line, got `{line}`")))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::BankFormat(format!("cannot parse {what} from `{s}`")))
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split('x').map(|d| parse(d, "layer size")).collect()
}

pub fn decode_bank(bytes: &[u8]) -> Result<SurrogateBank> {
    let mut cur = Cursor { bytes, pos: 0 };
    let first = cur.line()?;
    let version: u32 = parse(field(first, MAGIC)?, "version")?;
    if version != BANK_FORMAT_VERSION {
        return Err(Error::BankFormat(format!(
            "format version {version}, this build reads {BANK_FORMAT_VERSION}"
        )));
    }
    let m: usize = parse(field(cur.line()?, "m")?, "m")?;
    let count: usize = parse(field(cur.line()?, "bins")?, "bin count")?;
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let rest = field(cur.line()?, "bin")?;
        let parts: Vec<&str> = rest.split(' ').collect();
        if parts.len() != 7 || parse::<usize>(parts[0], "bin index")? != i {
            return Err(Error::BankFormat(format!("malformed bin line `{rest}`")));
        }
        let interval = RInterval::new(
            parse(parts[1], "interval")?,
            parse(parts[2], "interval")?,
            parse(parts[3], "interval")?,
            parse(parts[4], "interval")?,
        );
        specs.push((interval, parse_dims(parts[5])?, parse_dims(parts[6])?));
    }
    let meta: BankMetadata = serde_json::from_str(field(cur.line()?, "meta")?)
        .map_err(|e| Error::BankFormat(format!("metadata: {e}")))?;
    let payload_len: usize = parse(field(cur.line()?, "payload")?, "payload length")?;
    let header_end = cur.pos;
    let sum = field(cur.line()?, "checksum")?.to_string();
    let payload = &bytes[cur.pos..];
    if payload.len() != payload_len {
        return Err(Error::BankFormat(format!(
            "payload is {} bytes, header says {payload_len}",
            payload.len()
        )));
    }
    let mut h = Sha256::new();
    h.update(&bytes[..header_end]);
    h.update(payload);
    if super::hex(&h.finalize()) != sum {
        return Err(Error::Checksum);
    }
    if meta.m != m {
        return Err(Error::BankFormat("metadata and header disagree on m".into()));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_model = |dims: &[usize]| -> Result<MlpModel> {
        let mut layers = Vec::new();
        for d in dims.windows(2) {
            let (din, dout) = (d[0], d[1]);
            let mut take = |k: usize| -> Result<Vec<f64>> {
                let v: Vec<f64> = values.by_ref().take(k).collect();
                if v.len() != k {
                    return Err(Error::BankFormat("payload shorter than the layer sizes".into()));
                }
                Ok(v)
            };
            let w = DMatrix::from_row_slice(dout, din, &take(din * dout)?);
            let b = DVector::from_vec(take(dout)?);
            layers.push(Layer { w, b });
        }
        MlpModel::from_layers(layers)
    };
    let mut bins = Vec::with_capacity(count);
    for (interval, wd, vd) in &specs {
        let weights = read_model(wd)?;
        let log_variance = read_model(vd)?;
        bins.push(BinModels { interval: *interval, weights, log_variance });
    }
    if values.next().is_some() {
        return Err(Error::BankFormat("payload longer than the layer sizes".into()));
    }
    SurrogateBank::new(bins, meta)
}
