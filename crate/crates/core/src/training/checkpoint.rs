//! Checkpoint persistence.
//!
//! Wire format: magic `CRM1`, little-endian u32 version (= 1), u32 tensor
//! count, then per tensor a u16 name length + UTF-8 name, u8 rank, u32
//! extents, and contiguous little-endian f32 data. A trailing u64 holds the
//! byte length of everything before it, for truncation detection.
//!
//! The training-config snapshot, model description and step counter ride
//! along as reserved `__meta/*` tensors (config text bytes widened to f32),
//! so the container stays a flat list of named tensors.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;

use super::TrainConfig;
use crate::decoder::{CrmModel, MlpConfig, MlpParams};
use crate::diffcore::Tensor;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{CrmError, Result};

const MAGIC: &[u8; 4] = b"CRM1";
const VERSION: u32 = 1;
const META_NAME: &str = "__meta/config_text";

/// A trained model snapshot: version, named tensors, config, step counter.
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub enc_cfg: EncoderConfig,
    pub mlp_hidden: usize,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &CrmModel<f32>, config: &TrainConfig, step: u64) -> Self {
        Checkpoint {
            version: VERSION,
            step,
            config: config.clone(),
            enc_cfg: model.enc_cfg,
            mlp_hidden: model.mlp_cfg.hidden,
            tensors: model
                .named()
                .into_iter()
                .map(|(name, t)| (name, t.detach()))
                .collect(),
        }
    }

    /// Rebuild the model; forward outputs are bit-identical to the state
    /// that was saved.
    pub fn to_model(&self) -> Result<CrmModel<f32>> {
        let mut lookup: std::collections::HashMap<&str, &Tensor<f32>> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut fetch = |name: String, shape: Vec<usize>| -> Result<Tensor<f32>> {
            let t = lookup.remove(name.as_str()).ok_or_else(|| {
                CrmError::Truncated(format!("checkpoint missing tensor '{name}'"))
            })?;
            if t.shape() != shape {
                return Err(CrmError::Shape(format!(
                    "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t.detach())
        };

        // Template params give the expected names and shapes in order.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = CrmModel::<f32>::init(self.enc_cfg, self.mlp_hidden, &mut rng)?;
        let enc_names: Vec<(String, Vec<usize>)> = template
            .encoder
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape()))
            .collect();
        let mlp_names: Vec<(String, Vec<usize>)> = template
            .mlp
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape()))
            .collect();

        let mut enc_tensors = Vec::with_capacity(enc_names.len());
        for (name, shape) in enc_names {
            enc_tensors.push(fetch(name, shape)?);
        }
        let mut mlp_tensors = Vec::with_capacity(mlp_names.len());
        for (name, shape) in mlp_names {
            mlp_tensors.push(fetch(name, shape)?);
        }

        let encoder = EncoderParams::from_flat(&self.enc_cfg, enc_tensors);
        let mlp_cfg = MlpConfig::new(self.enc_cfg.latent_channels, self.mlp_hidden);
        let mlp = MlpParams::from_flat(&mlp_cfg, mlp_tensors);
        Ok(CrmModel {
            enc_cfg: self.enc_cfg,
            mlp_cfg,
            encoder,
            mlp,
        })
    }

    /// Short identity string for report headers: step plus a content hash.
    pub fn id(&self) -> String {
        let mut hash = 0xcbf29ce484222325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in &self.tensors {
            feed(name.as_bytes());
            for v in t.data().iter() {
                feed(&v.to_le_bytes());
            }
        }
        format!("step{}-{hash:016x}", self.step)
    }

    fn meta_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(s, "step={}", self.step);
        let _ = writeln!(s, "patch_size={}", c.patch_size);
        let _ = writeln!(s, "total_steps={}", c.total_steps);
        let _ = writeln!(s, "lr={}", c.lr);
        let _ = writeln!(s, "lr_decay_0={}", c.lr_decay_steps[0]);
        let _ = writeln!(s, "lr_decay_1={}", c.lr_decay_steps[1]);
        let _ = writeln!(s, "batch_size={}", c.batch_size);
        let _ = writeln!(s, "w_ce={}", c.loss_weights[0]);
        let _ = writeln!(s, "w_l1={}", c.loss_weights[1]);
        let _ = writeln!(s, "w_l2={}", c.loss_weights[2]);
        let _ = writeln!(s, "w_grad={}", c.loss_weights[3]);
        let _ = writeln!(s, "seed={}", c.seed);
        let _ = writeln!(s, "checkpoint_every={}", c.checkpoint_every);
        let _ = writeln!(s, "enc_base={}", self.enc_cfg.base_channels);
        let _ = writeln!(s, "enc_latent={}", self.enc_cfg.latent_channels);
        let _ = writeln!(s, "enc_stride={}", self.enc_cfg.output_stride);
        let _ = writeln!(s, "enc_depth={}", self.enc_cfg.depth);
        let _ = writeln!(s, "enc_global_context={}", self.enc_cfg.global_context);
        let _ = writeln!(s, "mlp_hidden={}", self.mlp_hidden);
        s
    }

    fn apply_meta(&mut self, text: &str) -> Result<()> {
        let mut get = |key: &str| -> Result<String> {
            text.lines()
                .find_map(|l| l.strip_prefix(&format!("{key}=")))
                .map(str::to_string)
                .ok_or_else(|| CrmError::Truncated(format!("checkpoint meta missing '{key}'")))
        };
        fn parse<T: std::str::FromStr>(v: String, key: &str) -> Result<T> {
            v.parse()
                .map_err(|_| CrmError::Truncated(format!("checkpoint meta bad value for '{key}'")))
        }
        self.step = parse(get("step")?, "step")?;
        self.config = TrainConfig {
            patch_size: parse(get("patch_size")?, "patch_size")?,
            total_steps: parse(get("total_steps")?, "total_steps")?,
            lr: parse(get("lr")?, "lr")?,
            lr_decay_steps: [
                parse(get("lr_decay_0")?, "lr_decay_0")?,
                parse(get("lr_decay_1")?, "lr_decay_1")?,
            ],
            batch_size: parse(get("batch_size")?, "batch_size")?,
            loss_weights: [
                parse(get("w_ce")?, "w_ce")?,
                parse(get("w_l1")?, "w_l1")?,
                parse(get("w_l2")?, "w_l2")?,
                parse(get("w_grad")?, "w_grad")?,
            ],
            seed: parse(get("seed")?, "seed")?,
            checkpoint_every: parse(get("checkpoint_every")?, "checkpoint_every")?,
        };
        self.enc_cfg = EncoderConfig {
            base_channels: parse(get("enc_base")?, "enc_base")?,
            latent_channels: parse(get("enc_latent")?, "enc_latent")?,
            output_stride: parse(get("enc_stride")?, "enc_stride")?,
            depth: parse(get("enc_depth")?, "enc_depth")?,
            global_context: parse(get("enc_global_context")?, "enc_global_context")?,
        };
        self.mlp_hidden = parse(get("mlp_hidden")?, "mlp_hidden")?;
        Ok(())
    }

    /// Serialize to the wire format; written via temp file + rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(MAGIC);
        body.extend_from_slice(&self.version.to_le_bytes());

        let meta = self.meta_text();
        let meta_tensor = Tensor::from_vec(
            vec![meta.len()],
            meta.bytes().map(|b| b as f32).collect(),
        );
        let count = (self.tensors.len() + 1) as u32;
        body.extend_from_slice(&count.to_le_bytes());

        let mut write_tensor = |name: &str, t: &Tensor<f32>| {
            let nb = name.as_bytes();
            body.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            body.extend_from_slice(nb);
            let shape = t.shape();
            body.push(shape.len() as u8);
            for &e in &shape {
                body.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data().iter() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        };
        write_tensor(META_NAME, &meta_tensor);
        for (name, t) in &self.tensors {
            write_tensor(name, t);
        }

        let footer = (body.len() as u64).to_le_bytes();
        let tmp = path.with_extension("crm.tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(&body)?;
            f.write_all(&footer)?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CrmError::BadMagic(format!(
                "{} does not start with the CRM1 magic",
                path.display()
            )));
        }
        let body_len = bytes.len() - 8;
        let footer = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
        if footer != body_len as u64 {
            return Err(CrmError::Truncated(format!(
                "{}: footer says {footer} body bytes, found {body_len}",
                path.display()
            )));
        }
        let body = &bytes[..body_len];
        let mut cursor = 4usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor + n > body.len() {
                return Err(CrmError::Truncated(format!(
                    "{}: unexpected end of data at byte {cursor}",
                    path.display()
                )));
            }
            let s = &body[cursor..cursor + n];
            cursor += n;
            Ok(s)
        };

        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CrmError::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut meta_text = None;
        let mut tensors = Vec::with_capacity(count.saturating_sub(1));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| CrmError::Truncated("tensor name is not UTF-8".into()))?;
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(4 * n)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if name == META_NAME {
                let text: String = data.iter().map(|&v| v as u8 as char).collect();
                meta_text = Some(text);
            } else {
                tensors.push((name, Tensor::from_vec(shape, data)));
            }
        }
        if cursor != body.len() {
            return Err(CrmError::Truncated(format!(
                "{}: {} trailing bytes after last tensor",
                path.display(),
                body.len() - cursor
            )));
        }
        let meta_text = meta_text.ok_or_else(|| {
            CrmError::Truncated("checkpoint has no __meta/config_text tensor".into())
        })?;

        let mut ckpt = Checkpoint {
            version,
            step: 0,
            config: TrainConfig::desk(),
            enc_cfg: EncoderConfig::desk(),
            mlp_hidden: 0,
            tensors,
        };
        ckpt.apply_meta(&meta_text)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn small_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc_cfg = EncoderConfig {
            base_channels: 4,
            latent_channels: 8,
            output_stride: 4,
            depth: 1,
            global_context: true,
        };
        let model = CrmModel::init(enc_cfg, 12, &mut rng).unwrap();
        Checkpoint::from_model(&model, &TrainConfig::desk(), 137)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crm");
        let ckpt = small_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 137);
        assert_eq!(loaded.mlp_hidden, 12);
        assert_eq!(loaded.config.seed, ckpt.config.seed);
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for ((na, ta), (nb, tb)) in ckpt.tensors.iter().zip(loaded.tensors.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let (da, db) = (ta.to_vec(), tb.to_vec());
            assert!(da.iter().zip(db.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(ckpt.id(), loaded.id());
    }

    #[test]
    fn roundtrip_model_forward_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crm");
        let ckpt = small_checkpoint();
        let model = ckpt.to_model().unwrap();
        ckpt.save(&path).unwrap();
        let reloaded = Checkpoint::load(&path).unwrap().to_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = Tensor::randn(vec![3, 16, 16], 0.3, &mut rng);
        let mask = Tensor::full(vec![1, 16, 16], 0.5);
        let a = model.refine_once(&image, &mask, (24, 24)).unwrap();
        let b = reloaded.refine_once(&image, &mask, (24, 24)).unwrap();
        let (va, vb) = (a.to_vec(), b.to_vec());
        assert!(va.iter().zip(vb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupted_magic_is_invalid_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crm");
        small_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CrmError::BadMagic(_))
        ));
    }

    #[test]
    fn unsupported_version_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crm");
        small_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CrmError::UnsupportedVersion(999))
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crm");
        small_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CrmError::Truncated(_))
        ));
    }
}
