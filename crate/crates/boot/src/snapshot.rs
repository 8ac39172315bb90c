//! Binary model snapshots and resumable training checkpoints.
//!
//! Parameter files (`MLBP`): magic, u32 version, u32 tensor count, then per
//! tensor a u32-length-prefixed UTF-8 name, u32 rank, u32 dims, and the
//! values as f64. Checkpoints (`MLBC`) wrap several parameter blocks with
//! the training position and the report history. Little-endian throughout;
//! values are stored bit-exactly.

use std::fs;
use std::path::Path;

use mlb_seg_core::metrics::MetricsSummary;
use mlb_seg_core::{ModelParams, Tensor};

use crate::error::{io_err, BootError, Result};
use crate::report::{EpochRow, Phase};

const PARAMS_MAGIC: [u8; 4] = *b"MLBP";
const CHECKPOINT_MAGIC: [u8; 4] = *b"MLBC";
const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.bytes(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.bytes(s.as_bytes());
    }
    fn params(&mut self, p: &ModelParams) {
        self.u32(p.tensors().len());
        for (name, t) in p.names().iter().zip(p.tensors()) {
            self.str(name);
            self.u32(t.ndim());
            for &d in t.shape() {
                self.u32(d);
            }
            for &v in t.data() {
                self.f64(v);
            }
        }
    }
    fn opt_params(&mut self, p: Option<&ModelParams>) {
        match p {
            Some(p) => {
                self.u8(1);
                self.params(p);
            }
            None => self.u8(0),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

type ReadResult<T> = std::result::Result<T, String>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> ReadResult<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(format!("truncated at offset {} reading {what}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn magic(&mut self, expected: [u8; 4]) -> ReadResult<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(format!(
                "bad magic at offset 0: expected {:?}",
                std::str::from_utf8(&expected).unwrap()
            ));
        }
        let v = self.u32("version")?;
        if v != VERSION as usize {
            return Err(format!("unsupported version {v} at offset 4"));
        }
        Ok(())
    }
    fn u8(&mut self, what: &str) -> ReadResult<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn flag(&mut self, what: &str) -> ReadResult<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format!("invalid {what} flag {v} at offset {at}")),
        }
    }
    fn u32(&mut self, what: &str) -> ReadResult<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> ReadResult<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> ReadResult<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> ReadResult<String> {
        let n = self.u32(what)?;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| format!("invalid UTF-8 in {what} at offset {at}"))
    }
    fn params(&mut self) -> ReadResult<ModelParams> {
        let n = self.u32("tensor count")?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let name = self.str("tensor name")?;
            let rank = self.u32("rank")?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(self.u32("dimension")?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= (self.bytes.len() - self.pos) / 8)
                .ok_or_else(|| format!("truncated at offset {} reading tensor `{name}`", self.pos))?;
            let data = (0..len).map(|_| self.f64("value")).collect::<ReadResult<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            entries.push((name, t));
        }
        Ok(ModelParams::new(entries))
    }
    fn opt_params(&mut self, what: &str) -> ReadResult<Option<ModelParams>> {
        if self.flag(what)? {
            Ok(Some(self.params()?))
        } else {
            Ok(None)
        }
    }
    fn finish(&self) -> ReadResult<()> {
        if self.pos != self.bytes.len() {
            return Err(format!(
                "{} trailing bytes after offset {}",
                self.bytes.len() - self.pos,
                self.pos
            ));
        }
        Ok(())
    }
}

fn snapshot_err(path: &Path) -> impl FnOnce(String) -> BootError + '_ {
    move |msg| BootError::Snapshot {
        path: path.to_path_buf(),
        msg,
    }
}

pub fn encode_params(p: &ModelParams) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&PARAMS_MAGIC);
    w.u32(VERSION as usize);
    w.params(p);
    w.0
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<ModelParams, String> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(PARAMS_MAGIC)?;
    let p = r.params()?;
    r.finish()?;
    Ok(p)
}

pub fn save_params(path: &Path, p: &ModelParams) -> Result<()> {
    fs::write(path, encode_params(p)).map_err(io_err(path))
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_params(&bytes).map_err(snapshot_err(path))
}

/// Everything needed to continue a run after its last completed epoch.
/// Random streams are derived from the seed and the position, so no
/// generator state beyond these fields is required.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Configuration keys that must match on resume.
    pub fingerprint: String,
    pub seed: u64,
    pub phase: Phase,
    /// Completed epochs of `phase`.
    pub epochs_done: usize,
    pub student: ModelParams,
    pub velocity: ModelParams,
    pub teacher: Option<ModelParams>,
    /// Parameters at the end of the baseline phase, once it has finished.
    pub baseline: Option<ModelParams>,
    /// Best eval Dice so far in `phase` and the epoch reaching it.
    pub best: (usize, f64),
    pub history: Vec<EpochRow>,
}

fn write_row(w: &mut Writer, r: &EpochRow) {
    w.u8(r.phase.code());
    w.u64(r.epoch as u64);
    for v in [r.train_loss, r.bootstrap_loss, r.aug_loss, r.st_loss] {
        w.f64(v);
    }
    let m = &r.eval;
    for v in [m.dice, m.jaccard, m.hd, m.hd95, m.asd] {
        w.f64(v);
    }
    w.u64(m.cases as u64);
    w.u64(m.degenerate as u64);
}

fn read_row(r: &mut Reader) -> ReadResult<EpochRow> {
    let at = r.pos;
    let code = r.u8("phase")?;
    let phase = Phase::from_code(code).ok_or_else(|| format!("invalid phase {code} at offset {at}"))?;
    let epoch = r.u64("epoch")? as usize;
    let mut f = [0.0; 9];
    for v in &mut f {
        *v = r.f64("row value")?;
    }
    Ok(EpochRow {
        phase,
        epoch,
        train_loss: f[0],
        bootstrap_loss: f[1],
        aug_loss: f[2],
        st_loss: f[3],
        eval: MetricsSummary {
            dice: f[4],
            jaccard: f[5],
            hd: f[6],
            hd95: f[7],
            asd: f[8],
            cases: r.u64("cases")? as usize,
            degenerate: r.u64("degenerate")? as usize,
        },
    })
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(VERSION as usize);
    w.str(&c.fingerprint);
    w.u64(c.seed);
    w.u8(c.phase.code());
    w.u64(c.epochs_done as u64);
    w.params(&c.student);
    w.params(&c.velocity);
    w.opt_params(c.teacher.as_ref());
    w.opt_params(c.baseline.as_ref());
    w.u64(c.best.0 as u64);
    w.f64(c.best.1);
    w.u32(c.history.len());
    for row in &c.history {
        write_row(&mut w, row);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let fingerprint = r.str("fingerprint")?;
    let seed = r.u64("seed")?;
    let at = r.pos;
    let code = r.u8("phase")?;
    let phase = Phase::from_code(code).ok_or_else(|| format!("invalid phase {code} at offset {at}"))?;
    let epochs_done = r.u64("epoch")? as usize;
    let student = r.params()?;
    let velocity = r.params()?;
    let teacher = r.opt_params("teacher")?;
    let baseline = r.opt_params("baseline")?;
    let best = (r.u64("best epoch")? as usize, r.f64("best dice")?);
    let n = r.u32("history length")?;
    let history = (0..n).map(|_| read_row(&mut r)).collect::<ReadResult<Vec<_>>>()?;
    r.finish()?;
    Ok(Checkpoint {
        fingerprint,
        seed,
        phase,
        epochs_done,
        student,
        velocity,
        teacher,
        baseline,
        best,
        history,
    })
}

/// Write via a temporary file and rename, so an interrupted write leaves
/// the previous checkpoint intact.
pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(c)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes).map_err(snapshot_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlb_seg_core::SegNet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> ModelParams {
        SegNet::new(2).init(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn row(epoch: usize) -> EpochRow {
        EpochRow {
            phase: Phase::Mlb,
            epoch,
            train_loss: 0.1 * epoch as f64,
            bootstrap_loss: -0.0,
            aug_loss: f64::MIN_POSITIVE,
            st_loss: 1.0 / 3.0,
            eval: MetricsSummary {
                dice: 0.5,
                jaccard: 1.0 / 3.0,
                hd: f64::INFINITY,
                hd95: 2.0,
                asd: 1.25,
                cases: 4,
                degenerate: 1,
            },
        }
    }

    #[test]
    fn params_round_trip_bit_exactly() {
        let p = params(1);
        assert_eq!(decode_params(&encode_params(&p)).unwrap(), p);
    }

    #[test]
    fn params_errors() {
        let mut b = encode_params(&params(1));
        assert!(decode_params(&b[..b.len() - 1]).unwrap_err().contains("truncated"));
        b.push(0);
        assert!(decode_params(&b).unwrap_err().contains("trailing"));
        b[0] = b'X';
        assert!(decode_params(&b).unwrap_err().contains("offset 0"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Checkpoint {
            fingerprint: "seed = 1\n".into(),
            seed: 1,
            phase: Phase::Mlb,
            epochs_done: 3,
            student: params(1),
            velocity: params(2),
            teacher: Some(params(3)),
            baseline: None,
            best: (2, 0.75),
            history: vec![row(0), row(1)],
        };
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(back.history[0].bootstrap_loss.to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, c);
    }

    #[test]
    fn oversized_tensor_header_is_truncation() {
        let mut w = Writer::default();
        w.bytes(&PARAMS_MAGIC);
        w.u32(1);
        w.u32(1);
        w.str("x");
        w.u32(2);
        w.u32(1 << 30);
        w.u32(1 << 30);
        assert!(decode_params(&w.0).unwrap_err().contains("truncated"));
    }
}
