//! Checkpoint files: magic + version + JSON metadata header + named f64
//! arrays in little-endian order. Round-trips are bit-exact; files are
//! content-addressed by their SHA-256 digest for provenance tracking.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cfcdc_core::cfcc::{CfccBranch, CfccModule};
use cfcdc_core::cfcd::CfcdModule;
use cfcdc_core::encoder::{EncoderConfig, EncoderParams};
use cfcdc_core::ifcd::{IfcdConfig, IfcdParams, TaskId};
use cfcdc_core::ClauseRole;
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 4] = b"CFCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let header = serde_json::json!({
            "meta": self.meta,
            "arrays": self.arrays.iter().map(|(n, v)| (n, v.len())).collect::<Vec<_>>(),
        });
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&header_bytes).map_err(io_err)?;
        for (_, values) in &self.arrays {
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let format_err = |detail: String| CheckpointError::Format {
            path: path.display().to_string(),
            detail,
        };
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(format_err("not a checkpoint file (bad magic)".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(io_err)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(format_err(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8).map_err(io_err)?;
        let header_len = u64::from_le_bytes(buf8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(io_err)?;
        let header: serde_json::Value = serde_json::from_slice(&header_bytes)
            .map_err(|e| format_err(format!("corrupt header: {e}")))?;
        let meta = header
            .get("meta")
            .cloned()
            .ok_or_else(|| format_err("header missing meta".into()))?;
        let specs: Vec<(String, usize)> = serde_json::from_value(
            header
                .get("arrays")
                .cloned()
                .ok_or_else(|| format_err("header missing arrays".into()))?,
        )
        .map_err(|e| format_err(format!("corrupt array index: {e}")))?;
        let mut arrays = Vec::with_capacity(specs.len());
        for (name, len) in specs {
            let mut values = vec![0.0f64; len];
            for v in &mut values {
                r.read_exact(&mut buf8).map_err(io_err)?;
                *v = f64::from_le_bytes(buf8);
            }
            arrays.push((name, values));
        }
        let mut rest = [0u8; 1];
        match r.read(&mut rest) {
            Ok(0) => Ok(Checkpoint { meta, arrays }),
            Ok(_) => Err(format_err("trailing bytes after parameter arrays".into())),
            Err(source) => Err(io_err(source)),
        }
    }
}

/// SHA-256 digest of a file's bytes, hex-encoded.
pub fn file_digest(path: &Path) -> Result<String, CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = r.read(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn meta_field<T: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    key: &str,
    path: &Path,
) -> Result<T, CheckpointError> {
    serde_json::from_value(meta.get(key).cloned().unwrap_or(serde_json::Value::Null)).map_err(
        |e| CheckpointError::Format {
            path: path.display().to_string(),
            detail: format!("meta field {key:?}: {e}"),
        },
    )
}

fn required_array(ckpt: &Checkpoint, name: &str, path: &Path) -> Result<Vec<f64>, CheckpointError> {
    ckpt.array(name)
        .map(|a| a.to_vec())
        .ok_or_else(|| CheckpointError::Format {
            path: path.display().to_string(),
            detail: format!("missing parameter array {name:?}"),
        })
}

/// Serialize a clause module. `extra` lands in the metadata alongside the
/// structural fields (used for the vocabulary and run settings).
pub fn cfcd_to_checkpoint(module: &CfcdModule, extra: serde_json::Value) -> Checkpoint {
    let mut meta = serde_json::json!({
        "kind": "cfcd",
        "role": module.role,
        "encoder_config": module.encoder.cfg,
        "ifcd_config": module.ifcd.as_ref().map(|p| &p.cfg),
        "ifcd_tasks": module.ifcd.as_ref().map(|p| &p.tasks),
    });
    merge_meta(&mut meta, extra);
    let mut arrays = vec![("encoder".to_string(), module.encoder.flat.clone())];
    if let Some(ifcd) = &module.ifcd {
        arrays.push(("ifcd".to_string(), ifcd.flat.clone()));
    }
    arrays.push(("heads".to_string(), module.heads.clone()));
    Checkpoint { meta, arrays }
}

pub fn cfcd_from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<CfcdModule, CheckpointError> {
    let role: ClauseRole = meta_field(&ckpt.meta, "role", path)?;
    let enc_cfg: EncoderConfig = meta_field(&ckpt.meta, "encoder_config", path)?;
    let ifcd_cfg: Option<IfcdConfig> = meta_field(&ckpt.meta, "ifcd_config", path)?;
    let encoder = EncoderParams { cfg: enc_cfg, flat: required_array(ckpt, "encoder", path)? };
    let ifcd = match ifcd_cfg {
        Some(cfg) => {
            let tasks: Vec<TaskId> = meta_field(&ckpt.meta, "ifcd_tasks", path)?;
            Some(IfcdParams { cfg, tasks, flat: required_array(ckpt, "ifcd", path)? })
        }
        None => None,
    };
    let module =
        CfcdModule { role, encoder, ifcd, heads: required_array(ckpt, "heads", path)? };
    check_module_shape(&module, path)?;
    Ok(module)
}

fn check_module_shape(module: &CfcdModule, path: &Path) -> Result<(), CheckpointError> {
    let expected = CfcdModule::init(
        module.role,
        module.encoder.cfg.clone(),
        module.ifcd.as_ref().map(|p| p.cfg.lstm_dim),
        0,
    );
    let ok = module.encoder.flat.len() == expected.encoder.flat.len()
        && module.heads.len() == expected.heads.len()
        && module.ifcd.as_ref().map(|p| p.flat.len())
            == expected.ifcd.as_ref().map(|p| p.flat.len());
    if ok {
        Ok(())
    } else {
        Err(CheckpointError::Format {
            path: path.display().to_string(),
            detail: "parameter array lengths disagree with the stored configuration".into(),
        })
    }
}

pub fn cfcc_to_checkpoint(module: &CfccModule, extra: serde_json::Value) -> Checkpoint {
    let mut meta = serde_json::json!({
        "kind": "cfcc",
        "sel_ifcd_config": module.sel.ifcd.cfg,
        "sel_tasks": module.sel.ifcd.tasks,
        "whr_ifcd_config": module.whr.ifcd.cfg,
        "whr_tasks": module.whr.ifcd.tasks,
    });
    merge_meta(&mut meta, extra);
    Checkpoint {
        meta,
        arrays: vec![
            ("sel_ifcd".to_string(), module.sel.ifcd.flat.clone()),
            ("sel_heads".to_string(), module.sel.heads.clone()),
            ("whr_ifcd".to_string(), module.whr.ifcd.flat.clone()),
            ("whr_heads".to_string(), module.whr.heads.clone()),
        ],
    }
}

pub fn cfcc_from_checkpoint(
    ckpt: &Checkpoint,
    path: &Path,
) -> Result<CfccModule, CheckpointError> {
    let branch = |prefix: &str| -> Result<CfccBranch, CheckpointError> {
        let cfg: IfcdConfig = meta_field(&ckpt.meta, &format!("{prefix}_ifcd_config"), path)?;
        let tasks: Vec<TaskId> = meta_field(&ckpt.meta, &format!("{prefix}_tasks"), path)?;
        Ok(CfccBranch {
            ifcd: IfcdParams {
                cfg,
                tasks,
                flat: required_array(ckpt, &format!("{prefix}_ifcd"), path)?,
            },
            heads: required_array(ckpt, &format!("{prefix}_heads"), path)?,
        })
    };
    Ok(CfccModule { sel: branch("sel")?, whr: branch("whr")? })
}

fn merge_meta(meta: &mut serde_json::Value, extra: serde_json::Value) {
    if let (Some(base), Some(add)) = (meta.as_object_mut(), extra.as_object()) {
        for (k, v) in add {
            base.insert(k.clone(), v.clone());
        }
    }
}
