//! Little-endian binary encoding for parameter files.
//!
//! Readers track the byte offset so malformed files report where they broke.

use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;

use crate::encoder::{ConvEncoder, EncoderKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nonlin::ShrinkParams;
use crate::solver::ClassifierParams;
use crate::tensor::{ConnectionTable, KernelBank};

pub struct Encoder<W: Write> {
    inner: W,
}

impl<W: Write> Encoder<W> {
    pub fn new(inner: W) -> Self {
        Encoder { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn usize(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.usize(v.len())?;
        for x in v {
            self.f64(*x)?;
        }
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.usize(s.len())?;
        self.bytes(s.as_bytes())
    }

    pub fn table(&mut self, t: &ConnectionTable) -> Result<()> {
        self.usize(t.n_in())?;
        self.usize(t.n_out())?;
        self.usize(t.len())?;
        for &(q, p) in t.entries() {
            self.u32(q as u32)?;
            self.u32(p as u32)?;
        }
        Ok(())
    }

    pub fn bank(&mut self, b: &KernelBank) -> Result<()> {
        self.table(b.table())?;
        self.usize(b.k())?;
        self.f64s(b.weights())
    }

    pub fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.usize(m.rows())?;
        self.usize(m.cols())?;
        for v in m.data() {
            self.f64(*v)?;
        }
        Ok(())
    }

    pub fn encoder(&mut self, e: &ConvEncoder) -> Result<()> {
        self.u8(match e.kind {
            EncoderKind::Tanh => 0,
            EncoderKind::Si => 1,
        })?;
        self.bank(&e.bank)?;
        self.f64s(&e.gain)?;
        self.f64s(&e.bias)?;
        self.matrix(&e.s)?;
        self.f64s(&e.shrink.b)?;
        self.f64(e.shrink.beta)
    }

    pub fn classifier(&mut self, c: &ClassifierParams) -> Result<()> {
        self.usize(c.classes)?;
        self.usize(c.dim)?;
        for v in &c.u {
            self.f64(*v)?;
        }
        self.f64s(&c.r)
    }

    pub fn rng(&mut self, r: &ChaCha8Rng) -> Result<()> {
        self.bytes(&r.get_seed())?;
        self.u64(r.get_stream())?;
        self.bytes(&r.get_word_pos().to_le_bytes())
    }
}

pub struct Decoder<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Decoder<R> {
    pub fn new(inner: R) -> Self {
        Decoder { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset,
            msg: msg.into(),
        })
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        if self.inner.read_exact(&mut buf).is_err() {
            return self.fail(format!("unexpected end of file reading {n} bytes"));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        if self.inner.read_exact(&mut buf).is_err() {
            return self.fail(format!("unexpected end of file reading {N} bytes"));
        }
        self.offset += N as u64;
        Ok(buf)
    }

    pub fn expect(&mut self, magic: &[u8]) -> Result<()> {
        let at = self.offset;
        let got = self.bytes(magic.len())?;
        if got != magic {
            return Err(Error::Format {
                offset: at,
                msg: format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// A length or count, rejected if implausibly large.
    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (1 << 40) {
            return self.fail(format!("implausible length {v}"));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let b = self.bytes(n)?;
        String::from_utf8(b).or_else(|_| self.fail("invalid utf-8 string"))
    }

    pub fn table(&mut self) -> Result<ConnectionTable> {
        let n_in = self.usize()?;
        let n_out = self.usize()?;
        let n = self.usize()?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let q = self.u32()? as usize;
            let p = self.u32()? as usize;
            entries.push((q, p));
        }
        ConnectionTable::new(n_in, n_out, entries)
    }

    pub fn bank(&mut self) -> Result<KernelBank> {
        let table = self.table()?;
        let k = self.usize()?;
        let w = self.f64s()?;
        KernelBank::from_weights(table, k, w)
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    }

    pub fn encoder(&mut self) -> Result<ConvEncoder> {
        let kind = match self.u8()? {
            0 => EncoderKind::Tanh,
            1 => EncoderKind::Si,
            other => return self.fail(format!("unknown encoder kind code {other}")),
        };
        let bank = self.bank()?;
        let gain = self.f64s()?;
        let bias = self.f64s()?;
        let s = self.matrix()?;
        let b = self.f64s()?;
        let beta = self.f64()?;
        let enc = ConvEncoder {
            kind,
            bank,
            gain,
            bias,
            s,
            shrink: ShrinkParams { b, beta },
        };
        enc.validate()?;
        Ok(enc)
    }

    pub fn classifier(&mut self) -> Result<ClassifierParams> {
        let classes = self.usize()?;
        let dim = self.usize()?;
        let u = (0..classes * dim).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let r = self.f64s()?;
        if r.len() != classes {
            return self.fail("classifier bias length mismatch");
        }
        Ok(ClassifierParams { classes, dim, u, r })
    }

    pub fn rng(&mut self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self.array()?;
        let stream = self.u64()?;
        let pos = u128::from_le_bytes(self.array()?);
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(stream);
        r.set_word_pos(pos);
        Ok(r)
    }
}
