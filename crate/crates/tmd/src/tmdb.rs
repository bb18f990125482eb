//! TMDB model bundles.
//!
//! Magic `TMDB`, `u8` version, then tagged blocks (`[u8; 4]` tag, `u64`
//! payload length, payload) and a CRC-32 of everything before it. Blocks:
//! `ARCH` architecture, `SCAL` scaler, `PARM` parameter tensors (`f32`),
//! `BNST` batch-norm running statistics, `PRIO` prior logits (`f64`,
//! disconnected models only) and `HEAD` classifier head. Little-endian
//! throughout; tensors are stored in generator, trunk, D head, Q head order.

use std::fs;
use std::path::Path;

use tmd_core::defense::Space;
use tmd_core::nets::Preset;
use tmd_core::{ArchConfig, ClassifierHead, ModelBundle, Network, PriorState, Scaler};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TMDB";
pub const VERSION: u8 = 1;

fn preset_code(p: Preset) -> u8 {
    match p {
        Preset::Conv768 => 0,
        Preset::Conv1024 => 1,
        Preset::Mlp => 2,
    }
}

fn preset_from(code: u8) -> Result<Preset> {
    match code {
        0 => Ok(Preset::Conv768),
        1 => Ok(Preset::Conv1024),
        2 => Ok(Preset::Mlp),
        _ => Err(Error::Format(format!("unknown preset code {code}"))),
    }
}

fn seqs(net: &Network<f32>) -> Vec<&tmd_core::nets::Sequential<f32>> {
    let mut v = vec![&net.generator, &net.trunk, &net.d_head];
    v.extend(net.q_head.as_ref());
    v
}

fn seqs_mut(net: &mut Network<f32>) -> Vec<&mut tmd_core::nets::Sequential<f32>> {
    let mut v = vec![&mut net.generator, &mut net.trunk, &mut net.d_head];
    v.extend(net.q_head.as_mut());
    v
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn tensors(&mut self, ts: &[&[f32]]) -> Result<()> {
        self.u32(ts.len())?;
        for t in ts {
            self.u64(t.len() as u64);
            self.f32s(t);
        }
        Ok(())
    }
    fn block(&mut self, tag: &[u8; 4], payload: Writer) {
        self.0.extend_from_slice(tag);
        self.u64(payload.0.len() as u64);
        self.0.extend_from_slice(&payload.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("{} block truncated", self.what)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("{} flag must be 0 or 1, found {b}", self.what))),
        }
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Corrupt(format!("{} length overflows", self.what)))
    }
    fn bytes_for(&self, n: usize, width: usize) -> Result<usize> {
        n.checked_mul(width)
            .ok_or_else(|| Error::Corrupt(format!("{} length overflows", self.what)))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(self.bytes_for(n, 4)?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(self.bytes_for(n, 8)?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn tensors(&mut self) -> Result<Vec<Vec<f32>>> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = self.u64()?;
            out.push(self.f32s(len)?);
        }
        Ok(out)
    }
    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Corrupt(format!("{} block has {} unread bytes", self.what, self.buf.len() - self.pos)))
        }
    }
}

pub fn encode(b: &ModelBundle) -> Result<Vec<u8>> {
    b.validate()?;
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u8(VERSION);

    let a = b.arch();
    let mut arch = Writer::default();
    arch.u8(preset_code(a.preset));
    arch.u32(a.embedding_dim)?;
    arch.u32(a.codes)?;
    arch.u32(a.latent_dim)?;
    arch.u8(u8::from(a.disconnected));
    arch.u8(u8::from(a.mlp_widths.is_some()));
    if let Some(ws) = &a.mlp_widths {
        arch.u32(ws.len())?;
        for &x in ws {
            arch.u32(x)?;
        }
    }
    w.block(b"ARCH", arch);

    if let Some(s) = &b.scaler {
        let mut p = Writer::default();
        p.u32(s.dim())?;
        p.f32s(&s.lo);
        p.f32s(&s.hi);
        p.f32s(&[s.epsilon]);
        w.block(b"SCAL", p);
    }

    let net = &b.network;
    let params: Vec<&[f32]> = seqs(net).into_iter().flat_map(|s| s.params()).collect();
    let mut p = Writer::default();
    p.tensors(&params)?;
    w.block(b"PARM", p);
    let buffers: Vec<&[f32]> = seqs(net).into_iter().flat_map(|s| s.buffers()).collect();
    let mut p = Writer::default();
    p.tensors(&buffers)?;
    w.block(b"BNST", p);

    if let Some(prior) = &b.prior {
        let mut p = Writer::default();
        p.u32(prior.k())?;
        p.f64s(prior.logits());
        w.block(b"PRIO", p);
    }

    if let Some(h) = &b.head {
        let mut p = Writer::default();
        p.u32(h.classes)?;
        p.u32(h.dim)?;
        p.u8(match h.space {
            Space::Scaled => 0,
            Space::Raw => 1,
        });
        p.f64s(&h.weight);
        p.f64s(&h.bias);
        w.block(b"HEAD", p);
    }

    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    Ok(w.0)
}

fn fill(dst: Vec<&mut Vec<f32>>, src: Vec<Vec<f32>>, what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Format(format!(
            "{what}: architecture has {} tensors, file has {}",
            dst.len(),
            src.len()
        )));
    }
    for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.len() != s.len() {
            return Err(Error::Format(format!(
                "{what}: tensor {i} has {} values, architecture expects {}",
                s.len(),
                d.len()
            )));
        }
        *d = s;
    }
    Ok(())
}

fn decode_arch(r: &mut Reader) -> Result<ArchConfig> {
    let preset = preset_from(r.u8()?)?;
    let embedding_dim = r.u32()?;
    let codes = r.u32()?;
    let latent_dim = r.u32()?;
    let disconnected = r.flag()?;
    let mlp_widths = if r.flag()? {
        let n = r.u32()?;
        Some((0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    r.finish()?;
    let arch = ArchConfig {
        preset,
        embedding_dim,
        codes,
        latent_dim,
        disconnected,
        mlp_widths,
    };
    arch.validate()?;
    Ok(arch)
}

pub fn decode(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a TMDB file (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Version {
            kind: "TMDB",
            found: bytes[4],
            expected: VERSION,
        });
    }
    if bytes.len() < 9 {
        return Err(Error::Corrupt("bundle truncated before its checksum".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }

    let mut r = Reader::new(&body[5..], "bundle");
    let mut arch = None;
    let mut scaler = None;
    let mut params = None;
    let mut buffers = None;
    let mut prior = None;
    let mut head = None;
    while r.pos < r.buf.len() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()?;
        let payload = r.take(len)?;
        let name = String::from_utf8_lossy(&tag).into_owned();
        let dup = || Error::Format(format!("duplicate {name} block"));
        match &tag {
            b"ARCH" => {
                if arch.is_some() {
                    return Err(dup());
                }
                arch = Some(decode_arch(&mut Reader::new(payload, "ARCH"))?);
            }
            b"SCAL" => {
                if scaler.is_some() {
                    return Err(dup());
                }
                let mut p = Reader::new(payload, "SCAL");
                let dim = p.u32()?;
                let lo = p.f32s(dim)?;
                let hi = p.f32s(dim)?;
                let epsilon = p.f32s(1)?[0];
                p.finish()?;
                if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && h >= l)) || !(epsilon > 0.0) {
                    return Err(Error::Format("scaler bounds are invalid".into()));
                }
                scaler = Some(Scaler { lo, hi, epsilon });
            }
            b"PARM" | b"BNST" => {
                let slot = if &tag == b"PARM" { &mut params } else { &mut buffers };
                if slot.is_some() {
                    return Err(dup());
                }
                let mut p = Reader::new(payload, "tensor");
                *slot = Some(p.tensors()?);
                p.finish()?;
            }
            b"PRIO" => {
                if prior.is_some() {
                    return Err(dup());
                }
                let mut p = Reader::new(payload, "PRIO");
                let k = p.u32()?;
                let logits = p.f64s(k)?;
                p.finish()?;
                prior = Some(PriorState::from_logits(logits)?);
            }
            b"HEAD" => {
                if head.is_some() {
                    return Err(dup());
                }
                let mut p = Reader::new(payload, "HEAD");
                let classes = p.u32()?;
                let dim = p.u32()?;
                let space = match p.u8()? {
                    0 => Space::Scaled,
                    1 => Space::Raw,
                    s => return Err(Error::Format(format!("unknown head space code {s}"))),
                };
                let weight = p.f64s(classes.checked_mul(dim).ok_or_else(|| Error::Corrupt("head size overflows".into()))?)?;
                let bias = p.f64s(classes)?;
                p.finish()?;
                head = Some(ClassifierHead::new(classes, dim, weight, bias, space)?);
            }
            _ => return Err(Error::Format(format!("unknown block tag {name:?}"))),
        }
    }

    let missing = |t: &str| Error::Format(format!("bundle has no {t} block"));
    let arch = arch.ok_or_else(|| missing("ARCH"))?;
    let mut net = Network::<f32>::init(&arch, 0)?;
    let p: Vec<&mut Vec<f32>> = seqs_mut(&mut net).into_iter().flat_map(|s| s.params_mut()).collect();
    fill(p, params.ok_or_else(|| missing("PARM"))?, "parameters")?;
    let bf: Vec<&mut Vec<f32>> = seqs_mut(&mut net).into_iter().flat_map(|s| s.buffers_mut()).collect();
    fill(bf, buffers.ok_or_else(|| missing("BNST"))?, "running statistics")?;
    let mut bundle = ModelBundle::new(net, prior)?;
    if let Some(s) = scaler {
        bundle = bundle.with_scaler(s)?;
    }
    if let Some(h) = head {
        bundle = bundle.with_head(h)?;
    }
    bundle.validate()?;
    Ok(bundle)
}

pub fn write(b: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = encode(b)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}
