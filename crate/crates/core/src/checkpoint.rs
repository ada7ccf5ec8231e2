//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"RGZC"
//! version  u32 (currently 1)
//! meta_len u32, then meta_len bytes of UTF-8 "key = value" lines
//! n_arrays u32
//! per array: name_len u16, name bytes, ndim u8, ndim x u32 dims, f64 data
//! crc32    u32 over every preceding byte
//! ```
//!
//! Writes are atomic (temp file in the target directory, then rename) and
//! contain nothing run-dependent: saving the same model twice produces
//! byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::invalid;
use crate::net::{ConvSpec, GazeNet, NetConfig};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RGZC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Ordered key/value pairs; duplicate keys are rejected on load.
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());

        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(invalid!("checkpoint meta key/value may not contain '=' or newlines: '{k}'"));
            }
            meta.push_str(k);
            meta.push_str(" = ");
            meta.push_str(v);
            meta.push('\n');
        }
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());

        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            if name.len() > u16::MAX as usize {
                return Err(invalid!("checkpoint array name too long: '{name}'"));
            }
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    /// Atomically write the checkpoint: temp file beside the target, fsync,
    /// rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let file_name = path
            .file_name()
            .ok_or_else(|| invalid!("checkpoint path '{}' has no file name", path.display()))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path)?;
        let name = path.display();
        if buf.len() < 4 + 4 + 4 + 4 + 4 {
            return Err(invalid!("checkpoint {name}: truncated ({} bytes)", buf.len()));
        }
        let (body, crc_bytes) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(invalid!(
                "checkpoint {name}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})"
            ));
        }

        let mut r = Reader { buf: body, pos: 0, name: &name.to_string() };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(invalid!("checkpoint {name}: bad magic {magic:?}"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(invalid!(
                "checkpoint {name}: unsupported format version {version} (this build reads {VERSION})"
            ));
        }
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta_text = std::str::from_utf8(meta_bytes)
            .map_err(|_| invalid!("checkpoint {name}: meta block is not UTF-8"))?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid!("checkpoint {name}: malformed meta line '{line}'"))?;
            let k = k.trim().to_string();
            if meta.iter().any(|(ek, _): &(String, String)| *ek == k) {
                return Err(invalid!("checkpoint {name}: duplicate meta key '{k}'"));
            }
            meta.push((k, v.trim().to_string()));
        }

        let n_arrays = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name_len = r.u16()? as usize;
            let arr_name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| invalid!("checkpoint {name}: array name is not UTF-8"))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((arr_name, Tensor { shape, data }));
        }
        if r.pos != body.len() {
            return Err(invalid!(
                "checkpoint {name}: {} trailing bytes after the last array",
                body.len() - r.pos
            ));
        }
        Ok(Checkpoint { meta, arrays })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(invalid!(
                "checkpoint {}: truncated (wanted {n} bytes at offset {}, file ends at {})",
                self.name,
                self.pos,
                self.buf.len()
            ));
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
}

fn conv_stack_to_string(stack: &[ConvSpec]) -> String {
    stack
        .iter()
        .map(|c| format!("{}x{}s{}", c.out_channels, c.kernel, c.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn conv_stack_from_string(s: &str) -> Result<Vec<ConvSpec>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let bad = || invalid!("checkpoint meta: bad conv spec '{part}' (want OUTxKsS)");
        let (oc, rest) = part.split_once('x').ok_or_else(bad)?;
        let (k, st) = rest.split_once('s').ok_or_else(bad)?;
        out.push(ConvSpec::new(
            oc.parse().map_err(|_| bad())?,
            k.parse().map_err(|_| bad())?,
            st.parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

fn net_meta(cfg: &NetConfig) -> Vec<(String, String)> {
    vec![
        ("net.patch".into(), cfg.patch.to_string()),
        ("net.in_channels".into(), cfg.in_channels.to_string()),
        ("net.conv_stack".into(), conv_stack_to_string(&cfg.conv_stack)),
        ("net.feature_dim".into(), cfg.feature_dim.to_string()),
        ("net.bins_x".into(), cfg.bins_x.to_string()),
        ("net.bins_y".into(), cfg.bins_y.to_string()),
        ("net.screen_w_cm".into(), format!("{:.17}", cfg.screen_w_cm)),
        ("net.screen_h_cm".into(), format!("{:.17}", cfg.screen_h_cm)),
    ]
}

fn net_config_from_meta(ckpt: &Checkpoint) -> Result<NetConfig> {
    let get = |key: &str| -> Result<&str> {
        ckpt.meta_get(key).ok_or_else(|| invalid!("checkpoint meta: missing key '{key}'"))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| invalid!("checkpoint meta: bad value for '{key}'"))
    };
    let parse_f64 = |key: &str| -> Result<f64> {
        get(key)?.parse().map_err(|_| invalid!("checkpoint meta: bad value for '{key}'"))
    };
    Ok(NetConfig {
        patch: parse_usize("net.patch")?,
        in_channels: parse_usize("net.in_channels")?,
        conv_stack: conv_stack_from_string(get("net.conv_stack")?)?,
        feature_dim: parse_usize("net.feature_dim")?,
        bins_x: parse_usize("net.bins_x")?,
        bins_y: parse_usize("net.bins_y")?,
        screen_w_cm: parse_f64("net.screen_w_cm")?,
        screen_h_cm: parse_f64("net.screen_h_cm")?,
    })
}

/// Save a model with its architecture description plus caller-supplied meta.
pub fn save_model(net: &GazeNet, extra_meta: &[(String, String)], path: &Path) -> Result<()> {
    let mut meta = net_meta(&net.cfg);
    for (k, v) in extra_meta {
        if k.starts_with("net.") {
            return Err(invalid!("checkpoint meta: 'net.' keys are reserved ('{k}')"));
        }
        meta.push((k.clone(), v.clone()));
    }
    let arrays = net
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    Checkpoint { meta, arrays }.save(path)
}

/// Load a model saved by [`save_model`]; returns the net plus non-`net.` meta.
pub fn load_model(path: &Path) -> Result<(GazeNet, Vec<(String, String)>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = net_config_from_meta(&ckpt)?;
    let mut net = GazeNet::init(cfg, &mut stream(0, "checkpoint-scaffold"));
    for (name, tensor) in net.named_tensors_mut() {
        let stored = ckpt
            .array(&name)
            .ok_or_else(|| invalid!("checkpoint {}: missing array '{name}'", path.display()))?;
        if stored.shape != tensor.shape {
            return Err(invalid!(
                "checkpoint {}: array '{name}' has shape {:?}, model wants {:?}",
                path.display(),
                stored.shape,
                tensor.shape
            ));
        }
        *tensor = stored.clone();
    }
    let extra = ckpt
        .meta
        .iter()
        .filter(|(k, _)| !k.starts_with("net."))
        .cloned()
        .collect();
    Ok((net, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Mode;
    use crate::tape::Tape;
    use tempfile::tempdir;

    fn small_net(seed: u64) -> GazeNet {
        let cfg = NetConfig {
            patch: 12,
            conv_stack: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(6, 3, 2)],
            feature_dim: 10,
            bins_x: 5,
            bins_y: 7,
            ..NetConfig::default()
        };
        GazeNet::init(cfg, &mut stream(seed, "init"))
    }

    fn rand_batch(net: &GazeNet, n: usize, seed: u64) -> crate::net::PatchBatch {
        use rand::Rng;
        let mut rng = stream(seed, "batch");
        let p = net.cfg.patch;
        let mut mk = || {
            let data: Vec<f64> = (0..n * 3 * p * p).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::from_vec(&[n, 3, p, p], data)
        };
        crate::net::PatchBatch { face: mk(), left: mk(), right: mk() }
    }

    #[test]
    fn roundtrip_preserves_every_tensor_bitwise() {
        let net = small_net(7);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&net, &[("note".into(), "hello".into())], &path).unwrap();
        let (loaded, extra) = load_model(&path).unwrap();
        assert_eq!(extra, vec![("note".to_string(), "hello".to_string())]);
        assert_eq!(loaded.cfg, net.cfg);
        for ((na, ta), (nb, tb)) in net.named_tensors().iter().zip(loaded.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            assert_eq!(ta.data, tb.data, "tensor {na} not bit-identical");
        }
    }

    #[test]
    fn roundtrip_forward_outputs_are_bitwise_equal() {
        let net = small_net(3);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&net, &[], &path).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        let batch = rand_batch(&net, 4, 11);
        let a = net.probs(&batch);
        let b = loaded.probs(&batch);
        assert_eq!(a.data, b.data);
        // Also through an explicit eval-mode tape.
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let (f, l, r) = (
            tape.leaf(&batch.face, false),
            tape.leaf(&batch.left, false),
            tape.leaf(&batch.right, false),
        );
        let fwd = net.forward(&mut tape, &bound, f, l, r, Mode::Eval);
        let mut tape2 = Tape::new();
        let bound2 = loaded.bind(&mut tape2, false);
        let (f2, l2, r2) = (
            tape2.leaf(&batch.face, false),
            tape2.leaf(&batch.left, false),
            tape2.leaf(&batch.right, false),
        );
        let fwd2 = loaded.forward(&mut tape2, &bound2, f2, l2, r2, Mode::Eval);
        assert_eq!(tape.data(fwd.probs), tape2.data(fwd2.probs));
    }

    #[test]
    fn same_model_saves_byte_identical_files() {
        let net = small_net(5);
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_model(&net, &[], &p1).unwrap();
        save_model(&net, &[], &p2).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let net = small_net(9);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&net, &[], &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "got: {err}");
    }

    #[test]
    fn truncation_is_detected() {
        let net = small_net(9);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&net, &[], &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated") || msg.contains("checksum"), "got: {msg}");
    }

    #[test]
    fn future_version_is_refused() {
        let net = small_net(9);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&net, &[], &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version 99"), "got: {err}");
    }

    #[test]
    fn missing_array_is_reported_by_name() {
        let net = small_net(2);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = super::net_meta(&net.cfg);
        let arrays: Vec<(String, Tensor)> = net
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| n != "fusion.w")
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Checkpoint { meta, arrays }.save(&path).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("fusion.w"), "got: {err}");
    }

    #[test]
    fn no_stray_temp_files_after_save() {
        let net = small_net(1);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&net, &[], &path).unwrap();
        let entries: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(entries, vec!["model.ckpt".to_string()]);
    }
}
