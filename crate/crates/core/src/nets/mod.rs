//! Networks used as the reconstruction prior and as the diffusion score model.

mod optim;
mod tensor;
mod unet;

use std::path::Path;

pub use optim::{optimizer_step, Algorithm, OptimizerState};
pub use tensor::Tensor;
pub use unet::{loss_gradient, timestep_embedding, ArchSpec, LossGradient, Network, Tape, COMPOSITION};

use crate::error::{Error, Result};
use crate::persistence::{load_array, save_array_described, write_json, DenseArray};

/// Reconstruction U-Net `f_θ`.
pub fn build_unet(arch: ArchSpec, seed: u64) -> Result<Network> {
    if arch.time_conditioned {
        return Err(Error::invalid("build_unet expects an unconditioned architecture"));
    }
    Network::new(arch, seed)
}

/// Time-conditioned network used as the diffusion noise predictor.
pub fn build_score_net(arch: ArchSpec, seed: u64) -> Result<Network> {
    if !arch.time_conditioned {
        return Err(Error::invalid("build_score_net expects time_conditioned = true"));
    }
    Network::new(arch, seed)
}

fn arch_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".arch.json");
    s.into()
}

/// Writes parameters as one flat float32 array plus an `<path>.arch.json` sidecar.
pub fn save_checkpoint(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let path = path.as_ref();
    let flat: Vec<f32> = net.params.iter().map(|&v| v as f32).collect();
    let arr = DenseArray::from_f32(vec![flat.len()], flat)?;
    save_array_described(path, &arr, "network parameters")?;
    write_json(arch_path(path), &net.arch)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let arr = load_array(path)?;
    let ap = arch_path(path);
    let text = std::fs::read(&ap).map_err(|e| Error::Io { path: ap, source: e })?;
    let arch: ArchSpec = serde_json::from_slice(&text)?;
    Network::from_params(arch, arr.to_f64())
}
