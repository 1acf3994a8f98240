//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MNET" | u32 version | u32 arch_len | arch (TOML text)
//! u32 epoch | f64 best_val_loss | u64 adam_t | f64 lr
//! u32 tensor_count | tensor*
//! u64 FNV-1a of every preceding byte
//!
//! tensor = u32 name_len | name | u32 rank | u32 extent* | f32 value*
//! ```
//!
//! Parameters are stored under their own names, Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`.

use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AdamState;
use crate::error::{Error, Result};
use crate::scaling::{Network, ScaledArch};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ScaledArch,
    pub epoch: u32,
    pub best_val_loss: f64,
    pub lr: f64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam: AdamState<f32>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("checkpoint string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Integrity(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len
            .filter(|&l| l.checked_mul(4).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Integrity(format!("tensor {name} has implausible shape {shape:?}")))?;
        let raw = self.take(len * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture(net: &Network<f32>, adam: &AdamState<f32>, epoch: u32, best_val_loss: f64, lr: f64) -> Self {
        Checkpoint {
            arch: net.arch.clone(),
            epoch,
            best_val_loss,
            lr,
            params: net.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            adam: adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        let arch = self.arch.to_toml();
        out.extend((arch.len() as u32).to_le_bytes());
        out.extend(arch.as_bytes());
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.best_val_loss.to_le_bytes());
        out.extend(self.adam.t.to_le_bytes());
        out.extend(self.lr.to_le_bytes());
        out.extend((3 * self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_tensor(&mut out, name, t);
        }
        for ((name, _), m) in self.params.iter().zip(&self.adam.m) {
            put_tensor(&mut out, &format!("adam.m/{name}"), m);
        }
        for ((name, _), v) in self.params.iter().zip(&self.adam.v) {
            put_tensor(&mut out, &format!("adam.v/{name}"), v);
        }
        let sum = checksum(&out);
        out.extend(sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        if bytes.len() < 8 + 12 {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if checksum(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let arch = ScaledArch::from_toml(&r.string()?).map_err(|e| Error::Integrity(format!("architecture: {e}")))?;
        let epoch = r.u32()?;
        let best_val_loss = r.f64()?;
        let t = r.u64()?;
        let lr = r.f64()?;
        let count = r.u32()? as usize;
        if !count.is_multiple_of(3) {
            return Err(Error::Integrity(format!("tensor count {count} is not a multiple of 3")));
        }
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after tensors".into()));
        }
        let n = count / 3;
        let params = tensors[..n].to_vec();
        let moments = |prefix: &str, part: &[(String, Tensor<f32>)]| -> Result<Vec<Tensor<f32>>> {
            part.iter()
                .zip(&params)
                .map(|((name, t), (pname, p))| {
                    if *name != format!("{prefix}/{pname}") || t.shape() != p.shape() {
                        return Err(Error::Integrity(format!("unexpected optimizer tensor {name}")));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        let m = moments("adam.m", &tensors[n..2 * n])?;
        let v = moments("adam.v", &tensors[2 * n..])?;
        Ok(Checkpoint {
            arch,
            epoch,
            best_val_loss,
            lr,
            params,
            adam: AdamState {
                m,
                v,
                t,
                ..AdamState::new(&Default::default())
            },
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network and optimizer state.
    pub fn restore(&self) -> Result<(Network<f32>, AdamState<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::<f32>::new(&self.arch, &mut rng)?;
        if net.store.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "architecture has {} tensors, checkpoint {}",
                net.store.len(),
                self.params.len()
            )));
        }
        for (id, (name, t)) in net.store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            if net.store.get(id).name != *name {
                return Err(Error::Integrity(format!("parameter {name} does not match the architecture")));
            }
            net.store.set_value(id, t.clone()).map_err(|e| Error::Integrity(e.to_string()))?;
        }
        Ok((net, self.adam.clone()))
    }
}
