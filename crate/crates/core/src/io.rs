//! On-disk formats: feature streams, checkpoints, label and metric tables.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ReefError, Result};
use crate::model::ModelParams;
use crate::spatial::exact_sqrt;
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"REEF";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` next to `path` and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .ok_or_else(|| ReefError::Argument(format!("{} has no file name", path.display())))?;
    tmp.set_file_name(format!(".{}.partial", name.to_string_lossy()));
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| ReefError::Argument(format!("{what} {v} exceeds the header range")))
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ReefError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| ReefError::Format("payload size overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ReefError::Format("name is not UTF-8".into()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(ReefError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// `T x N x D` frames as a feature-stream file image.
pub fn encode_features(frames: &[Matrix]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| ReefError::Argument("stream has no frames".into()))?;
    let (n, d) = first.shape();
    if exact_sqrt(n).is_none() {
        return Err(ReefError::Argument(format!("{n} tokens is not a square grid")));
    }
    if let Some(bad) = frames.iter().position(|f| f.shape() != (n, d)) {
        return Err(ReefError::shape(
            "encode_features",
            format!("frame {bad} is {:?}, frame 0 is {n}x{d}", frames[bad].shape()),
        ));
    }
    let mut out = Vec::with_capacity(20 + frames.len() * n * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, dim_u32(frames.len(), "frame count")?);
    put_u32(&mut out, dim_u32(n, "token count")?);
    put_u32(&mut out, dim_u32(d, "width")?);
    for f in frames {
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != FEATURE_MAGIC {
        return Err(ReefError::Format("not a feature stream".into()));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(ReefError::Format(format!("unsupported version {version}")));
    }
    let (t, n, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if exact_sqrt(n).is_none() {
        return Err(ReefError::Format(format!("{n} tokens is not a square grid")));
    }
    let expected = (t as u128) * (n as u128) * (d as u128) * 4;
    if expected != (bytes.len() - r.pos) as u128 {
        return Err(ReefError::Format(format!(
            "header promises {expected} payload bytes, file has {}",
            bytes.len() - r.pos
        )));
    }
    let frames = (0..t)
        .map(|_| Matrix::new(n, d, r.f32s(n * d)?))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(frames)
}

pub fn write_features(path: &Path, frames: &[Matrix]) -> Result<()> {
    write_atomic(path, &encode_features(frames)?)
}

pub fn read_features(path: &Path) -> Result<Vec<Matrix>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

/// Named parameters plus integer metadata (seeds, epochs).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<u64> {
        self.meta.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, dim_u32(ck.params.len(), "parameter count")?);
    for (name, m) in ck.params.iter() {
        put_u32(&mut out, dim_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dim_u32(m.rows(), "rows")?);
        put_u32(&mut out, dim_u32(m.cols(), "cols")?);
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, dim_u32(ck.meta.len(), "metadata count")?);
    for (k, v) in &ck.meta {
        put_u32(&mut out, dim_u32(k.len(), "key length")?);
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ReefError::Format("not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ReefError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut params = ModelParams::default();
    for _ in 0..r.u32()? {
        let name = r.name()?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let data = r.f32s(rows * cols)?;
        params.insert(name, Matrix::new(rows, cols, data)?);
    }
    let mut meta = Vec::new();
    for _ in 0..r.u32()? {
        let k = r.name()?;
        meta.push((k, r.u64()?));
    }
    r.finish()?;
    Ok(Checkpoint { params, meta })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// One row of `labels.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub file: String,
    pub class: usize,
    pub split: String,
    /// Space-separated label tokens.
    pub tokens: String,
    /// Space-separated planted frame indices.
    pub planted: String,
}

/// One row of a strategy comparison; column order is fixed by field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub loss: f64,
    pub recall: f64,
    pub chance: f64,
    pub first_token_accuracy: f64,
    pub flops: u64,
    pub flops_no_stf: u64,
}

pub const METRICS_COLUMNS: [&str; 7] = [
    "strategy",
    "loss",
    "recall",
    "chance",
    "first_token_accuracy",
    "flops",
    "flops_no_stf",
];

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub scorer_grad_norm: f64,
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ReefError::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| ReefError::Format(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => ReefError::Io(io),
        other => ReefError::Format(format!("{other:?}")),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| ReefError::Format(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_sample, SeededRng};

    fn frames(t: usize, n: usize, d: usize) -> Vec<Matrix> {
        (0..t)
            .map(|i| gaussian_sample(SeededRng::new(4, i as u64), n, d))
            .collect()
    }

    #[test]
    fn feature_round_trip_is_exact() {
        let f = frames(3, 4, 5);
        let bytes = encode_features(&f).unwrap();
        assert_eq!(&bytes[..4], b"REEF");
        assert_eq!(bytes.len(), 20 + 3 * 4 * 5 * 4);
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn feature_header_errors() {
        let bytes = encode_features(&frames(2, 4, 3)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(ReefError::Format(_))));
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1]), Err(ReefError::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_features(&v2), Err(ReefError::Format(_))));
        assert!(encode_features(&frames(2, 3, 3)).is_err());
        assert!(encode_features(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ModelParams::default();
        p.insert("a.w", gaussian_sample(SeededRng::new(1, 1), 2, 3));
        p.insert("b", Matrix::filled(1, 1, -0.0));
        let ck = Checkpoint {
            params: p,
            meta: vec![("seed".into(), 7), ("epochs".into(), u64::MAX)],
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("seed"), Some(7));
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_partial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_atomic(&path, b"abc").unwrap();
        write_atomic(&path, b"defg").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"defg");
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert!(write_atomic(&dir.path().join("missing/x"), b"1").is_err());
    }

    #[test]
    fn metrics_golden() {
        let rows = [MetricsRow {
            strategy: "rtc".into(),
            loss: 0.5,
            recall: 0.25,
            chance: 0.125,
            first_token_accuracy: 1.0,
            flops: 10,
            flops_no_stf: 20,
        }];
        let text = String::from_utf8(csv_bytes(&rows).unwrap()).unwrap();
        assert_eq!(
            text,
            "strategy,loss,recall,chance,first_token_accuracy,flops,flops_no_stf\nrtc,0.5,0.25,0.125,1.0,10,20\n"
        );
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let rows = vec![LabelRow {
            file: "stream_000.reef".into(),
            class: 2,
            split: "train".into(),
            tokens: "8 9 10 11".into(),
            planted: "3 17".into(),
        }];
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_csv::<LabelRow>(&path).unwrap(), rows);
    }
}
