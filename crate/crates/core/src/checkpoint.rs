//! Versioned checkpoint container.
//!
//! Layout: magic `VTCK`, u16 version (currently 1), u32 JSON header length,
//! JSON header, then f32 little-endian parameter payloads in manifest order.
//! The header carries the run config, its architecture fingerprint, and the
//! named shape manifest; loading validates all three against the target
//! model.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"VTCK";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    config: RunConfig,
    manifest: Vec<(String, Vec<usize>)>,
}

/// Write every parameter of `params` (manifest order) with the config that
/// built it.
pub fn save(path: &Path, config: &RunConfig, params: &ParamStore) -> Result<()> {
    let values = params.dump_values()?;
    let header = Header {
        fingerprint: config.fingerprint_hex(),
        config: config.clone(),
        manifest: values.iter().map(|(n, d, _)| (n.clone(), d.clone())).collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u16::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)?;
    for (_, _, vals) in &values {
        for v in vals {
            out.write_f32::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

/// Parsed checkpoint: config plus named flat parameter values.
pub struct Checkpoint {
    pub config: RunConfig,
    pub fingerprint: String,
    pub values: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = file.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let json_len = file.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json)
        .map_err(|e| Error::Format(format!("truncated checkpoint header: {e}")))?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("checkpoint header parse: {e}")))?;
    if header.fingerprint != header.config.fingerprint_hex() {
        return Err(Error::Format(
            "checkpoint fingerprint does not match its own config".into(),
        ));
    }
    let mut values = Vec::with_capacity(header.manifest.len());
    for (name, dims) in &header.manifest {
        let n: usize = dims.iter().product();
        let mut vals = vec![0f32; n];
        file.read_f32_into::<LittleEndian>(&mut vals)
            .map_err(|e| Error::Format(format!("truncated payload at {name}: {e}")))?;
        values.push((name.clone(), dims.clone(), vals));
    }
    Ok(Checkpoint {
        fingerprint: header.fingerprint,
        config: header.config,
        values,
    })
}

/// Load a checkpoint into an already-built parameter store; fingerprints
/// must match.
pub fn restore(path: &Path, config: &RunConfig, params: &ParamStore) -> Result<()> {
    let ck = load(path)?;
    if ck.fingerprint != config.fingerprint_hex() {
        return Err(Error::Config(format!(
            "checkpoint fingerprint {} does not match model {}",
            ck.fingerprint,
            config.fingerprint_hex()
        )));
    }
    params.load_values(&ck.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TwinAutoencoder;
    use crate::video::synth_moving_shapes;
    use candle_core::DType;

    #[test]
    fn checkpoint_round_trip_reproduces_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtck");
        let cfg = RunConfig::desk();
        let model = TwinAutoencoder::new(&cfg, 11, DType::F32).unwrap();
        save(&path, &cfg, model.params()).unwrap();

        let model2 = TwinAutoencoder::new(&cfg, 999, DType::F32).unwrap();
        restore(&path, &cfg, model2.params()).unwrap();

        let clip = synth_moving_shapes(3, 8, 32, 32, 0.5, 3.0).unwrap();
        let a = model.reconstruct_clip(&clip).unwrap();
        let b = model2.reconstruct_clip(&clip).unwrap();
        assert_eq!(
            a.data().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.data().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtck");
        let cfg = RunConfig::desk();
        let model = TwinAutoencoder::new(&cfg, 0, DType::F32).unwrap();
        save(&path, &cfg, model.params()).unwrap();

        let mut other = cfg.clone();
        other.structure.n_q = 2;
        let model2 = TwinAutoencoder::new(&other, 0, DType::F32).unwrap();
        assert!(matches!(
            restore(&path, &other, model2.params()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtck");
        let cfg = RunConfig::desk();
        let model = TwinAutoencoder::new(&cfg, 0, DType::F32).unwrap();
        save(&path, &cfg, model.params()).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.vtck");
        std::fs::write(&bad, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&bad), Err(Error::Format(_))));

        let mut magicless = bytes.clone();
        magicless[2] = b'Z';
        std::fs::write(&bad, &magicless).unwrap();
        assert!(matches!(load(&bad), Err(Error::Format(_))));
    }
}
