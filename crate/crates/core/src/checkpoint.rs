//! Single-file checkpoints: a zip container holding one NPY array per
//! parameter and optimizer moment, the model configuration and a manifest.
//!
//! ```text
//! manifest.txt          format_version, step, seed, config_hash
//! model.toml            model configuration
//! experiment.toml       full experiment configuration (may be empty)
//! param/<name>.npy
//! adam_m/<name>.npy
//! adam_v/<name>.npy
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::error::{Error, Result};
use crate::io::{npy_bytes, npy_from_bytes, Record};
use crate::nn::ParamSet;
use crate::reconstruction::ModelConfig;
use crate::training::ModelState;

pub const FORMAT_VERSION: u32 = 1;

/// Everything restored from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    pub seed: u64,
    pub config_hash: String,
    pub experiment: String,
}

fn zip_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint(path: &Path, state: &ModelState, seed: u64, config_hash: &str, experiment: &str) -> Result<()> {
    let model = toml::to_string(&state.config).map_err(|e| Error::Config(e.to_string()))?;
    let manifest = Record::new()
        .with("format_version", FORMAT_VERSION)
        .with("step", state.step)
        .with("seed", seed)
        .with("config_hash", config_hash)
        .with("parameters", state.params.numel());
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    let mut zip = ZipWriter::new(std::io::BufWriter::new(file));
    let opts = SimpleFileOptions::default().compression_method(CompressionMethod::Stored);
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        zip.start_file(name, opts).map_err(|e| zip_err(path, e))?;
        zip.write_all(bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    };
    put("manifest.txt", manifest.to_text().as_bytes())?;
    put("model.toml", model.as_bytes())?;
    put("experiment.toml", experiment.as_bytes())?;
    for (dir, set) in [("param", &state.params), ("adam_m", &state.adam_m), ("adam_v", &state.adam_v)] {
        for (name, t) in set.iter() {
            put(&format!("{dir}/{name}.npy"), &npy_bytes(t)?)?;
        }
    }
    zip.finish().map_err(|e| zip_err(path, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("moving checkpoint to {}", path.display()), e))
}

fn read_entry(archive: &mut ZipArchive<fs::File>, path: &Path, name: &str) -> Result<Vec<u8>> {
    let mut f = archive.by_name(name).map_err(|e| zip_err(path, format!("{name}: {e}")))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(format!("reading {name} from {}", path.display()), e))?;
    Ok(buf)
}

fn read_string(archive: &mut ZipArchive<fs::File>, path: &Path, name: &str) -> Result<String> {
    String::from_utf8(read_entry(archive, path, name)?).map_err(|e| zip_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut archive = ZipArchive::new(file).map_err(|e| zip_err(path, e))?;
    let manifest = Record::from_text(&read_string(&mut archive, path, "manifest.txt")?);
    let version: u32 = manifest.parse_value("format_version").ok_or_else(|| zip_err(path, "manifest lacks format_version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format version {version}, this build reads version {FORMAT_VERSION}",
            path.display()
        )));
    }
    let step = manifest.parse_value("step").ok_or_else(|| zip_err(path, "manifest lacks step"))?;
    let seed = manifest.parse_value("seed").ok_or_else(|| zip_err(path, "manifest lacks seed"))?;
    let config_hash = manifest.get("config_hash").unwrap_or_default().to_string();
    let config: ModelConfig =
        toml::from_str(&read_string(&mut archive, path, "model.toml")?).map_err(|e| zip_err(path, e))?;
    let experiment = read_string(&mut archive, path, "experiment.toml")?;

    let template = crate::reconstruction::init_model::<f32>(&config, 0)?;
    let mut sets = Vec::new();
    for dir in ["param", "adam_m", "adam_v"] {
        let mut set = ParamSet::new();
        for (name, t) in template.iter() {
            let entry = format!("{dir}/{name}.npy");
            let value = npy_from_bytes(&read_entry(&mut archive, path, &entry)?, path)?;
            if value.shape() != t.shape() {
                return Err(zip_err(path, format!("{entry} has shape {:?}, expected {:?}", value.shape(), t.shape())));
            }
            set.insert(name, value);
        }
        sets.push(set);
    }
    let adam_v = sets.pop().unwrap();
    let adam_m = sets.pop().unwrap();
    let params = sets.pop().unwrap();
    Ok(Checkpoint { state: ModelState { config, params, adam_m, adam_v, step }, seed, config_hash, experiment })
}
