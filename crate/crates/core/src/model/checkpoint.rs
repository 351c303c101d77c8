//! Checkpoints: a directory with `arch.json` plus one tensor file per
//! named parameter. Weights round-trip bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, FusionNet, Variant};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(serde::Serialize, serde::Deserialize)]
struct ArchFile {
    variant: Variant,
    arch: Arch,
}

pub fn save_net(dir: &Path, net: &FusionNet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arch_path = dir.join("arch.json");
    let body = serde_json::to_string_pretty(&ArchFile {
        variant: net.variant,
        arch: net.arch.clone(),
    })
    .map_err(|e| Error::Model(format!("cannot encode arch.json: {e}")))?;
    fs::write(&arch_path, body).map_err(|e| Error::io(&arch_path, e))?;

    let mut failure = None;
    net.for_each_param(|name, param| {
        if failure.is_some() {
            return;
        }
        let tensor = Tensor::from_vec(param.shape.clone(), param.data.clone())
            .expect("param buffer matches its shape");
        if let Err(e) = write_tensor(&dir.join(format!("{name}.fgt")), &tensor) {
            failure = Some(e);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn load_net(dir: &Path) -> Result<FusionNet> {
    let arch_path = dir.join("arch.json");
    let body = fs::read_to_string(&arch_path).map_err(|e| Error::io(&arch_path, e))?;
    let ArchFile { variant, arch } = serde_json::from_str(&body)
        .map_err(|e| Error::format(&arch_path, format!("invalid arch.json: {e}")))?;

    let mut net = FusionNet::new(variant, arch, 0)?;
    let mut failure = None;
    net.for_each_param_mut(|name, param| {
        if failure.is_some() {
            return;
        }
        let path = dir.join(format!("{name}.fgt"));
        match read_tensor(&path) {
            Ok(tensor) if tensor.shape() == &param.shape[..] => {
                param.data = tensor.data().to_vec();
            }
            Ok(tensor) => {
                failure = Some(Error::format(
                    &path,
                    format!(
                        "parameter {name} expects shape {:?}, file holds {:?}",
                        param.shape,
                        tensor.shape()
                    ),
                ));
            }
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(net),
    }
}
