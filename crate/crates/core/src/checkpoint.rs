//! Checkpoint persistence. Little-endian binary: magic "TNET", a u32 format
//! version, an element-width tag, the architecture block, the global
//! normalization stats the network was trained with, then the raw parameter
//! tensors in layer order. Round-trips are bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Network, NetworkConfig};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TNET";
pub const VERSION: u32 = 1;

/// Scalar mean/std of the training pixels, stored so evaluation can normalize
/// new data exactly as training did.
pub type NormStats = (f64, f64);

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode<S: Scalar>(net: &Network<S>, stats: NormStats) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, VERSION);
    out.push(S::DTYPE.tag());
    for d in cfg.input_shape {
        push_u32(&mut out, d as u32);
    }
    push_u32(&mut out, cfg.filter_sizes.len() as u32);
    for &k in &cfg.filter_sizes {
        push_u32(&mut out, k as u32);
    }
    push_u32(&mut out, cfg.feature_maps.len() as u32);
    for &m in &cfg.feature_maps {
        push_u32(&mut out, m as u32);
    }
    out.push(cfg.embed_relu as u8);
    out.extend_from_slice(&cfg.dropout_p.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&stats.0.to_le_bytes());
    out.extend_from_slice(&stats.1.to_le_bytes());
    push_u32(&mut out, net.params().len() as u32);
    for t in net.params() {
        push_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            push_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<S: Scalar>(
    net: &Network<S>,
    stats: NormStats,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(net, stats)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(Network<S>, NormStats)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, want {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let tag = r.u8()?;
    let dtype = Dtype::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("unknown element tag {tag}")))?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {:?} parameters, loader instantiated at {:?}",
            dtype,
            S::DTYPE
        )));
    }

    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let nf = r.u32()? as usize;
    if nf > 64 {
        return Err(Error::Format(format!("implausible filter count {nf}")));
    }
    let mut filter_sizes = Vec::with_capacity(nf);
    for _ in 0..nf {
        filter_sizes.push(r.u32()? as usize);
    }
    let nm = r.u32()? as usize;
    if nm > 64 {
        return Err(Error::Format(format!("implausible feature-map count {nm}")));
    }
    let mut feature_maps = Vec::with_capacity(nm);
    for _ in 0..nm {
        feature_maps.push(r.u32()? as usize);
    }
    let embed_relu = r.u8()? != 0;
    let dropout_p = r.f64()?;
    let seed = r.u64()?;
    let stats = (r.f64()?, r.f64()?);

    let config = NetworkConfig {
        input_shape,
        filter_sizes,
        feature_maps,
        embed_relu,
        dropout_p,
        seed,
    };
    let mut net = Network::<S>::from_config(&config)?;

    let n_params = r.u32()? as usize;
    if n_params != net.params().len() {
        return Err(Error::Format(format!(
            "checkpoint stores {} tensors, architecture wants {}",
            n_params,
            net.params().len()
        )));
    }
    let width = S::DTYPE.width();
    let mut params = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {i}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data: Vec<S> = raw.chunks_exact(width).map(S::read_le).collect();
        params.push(Tensor::from_vec(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameters",
            buf.len() - r.pos
        )));
    }
    net.set_params(params)?;
    Ok((net, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Mode;
    use crate::rng::Rng;

    fn small_net() -> Network<f32> {
        let cfg = NetworkConfig {
            input_shape: [1, 6, 6],
            filter_sizes: vec![3, 2],
            feature_maps: vec![1, 3, 4],
            embed_relu: true,
            dropout_p: 0.25,
            seed: 99,
        };
        Network::from_config(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tnet");
        let net = small_net();
        save_checkpoint(&net, (0.1307, 0.3081), &path).unwrap();
        let (loaded, stats) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(stats, (0.1307, 0.3081));
        assert_eq!(loaded.config(), net.config());
        for (a, b) in net.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.shape(), b.shape());
            for (&x, &y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn round_trip_preserves_probe_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tnet");
        let mut net = small_net();
        net.set_mode(Mode::Eval);
        let mut rng = Rng::new(4);
        let probe = Tensor::uniform(&[1, 6, 6], -1.0, 1.0, &mut rng);
        let (before, _) = net.forward_sample(&probe, None).unwrap();
        save_checkpoint(&net, (0.0, 1.0), &path).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
        let (after, _) = loaded.forward_sample(&probe, None).unwrap();
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tnet");
        std::fs::write(&path, b"NOPE00000000000000").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "got: {err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tnet");
        let net = small_net();
        save_checkpoint(&net, (0.0, 1.0), &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        for cut in [3, 9, 40, full.len() - 1] {
            std::fs::write(&path, &full[..cut]).unwrap();
            let err = load_checkpoint::<f32>(&path).unwrap_err();
            assert!(
                matches!(err, Error::Format(_)),
                "cut {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn trailing_garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tnet");
        save_checkpoint(&small_net(), (0.0, 1.0), &path).unwrap();
        let mut full = std::fs::read(&path).unwrap();
        full.push(0);
        std::fs::write(&path, &full).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tnet");
        save_checkpoint(&small_net(), (0.0, 1.0), &path).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("F32"), "got: {err}");
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tnet");
        save_checkpoint(&small_net(), (0.0, 1.0), &path).unwrap();
        let mut full = std::fs::read(&path).unwrap();
        full[4] = 0xFF;
        std::fs::write(&path, &full).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "got: {err}");
    }
}
