//! Generator checkpoints: a JSON manifest plus one tensor container per parameter and
//! per embedding bank.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::net::{GenArch, PerturbGenerator};
use crate::data::container::{self, Payload};
use crate::data::manifest::{read_ref, write_bytes, FileRef};
use crate::data::TaskKind;
use crate::error::{Error, Result};

pub const GENERATOR_FILE: &str = "generator.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub arch: GenArch,
    pub image_dims: [usize; 3],
    pub tasks: Vec<TaskKind>,
    pub class_counts: Vec<Option<usize>>,
    pub eps: f32,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub config_hash: String,
    pub params: Vec<(String, FileRef)>,
}

pub fn save_generator(dir: &Path, gen: &PerturbGenerator, lambda1: f64, lambda2: f64, seed: u64, config_hash: &str) -> Result<PathBuf> {
    let params = gen
        .param_names()
        .iter()
        .zip(gen.params())
        .map(|(name, t)| Ok((name.clone(), write_bytes(dir, &format!("gen.{name}.mtue"), &container::encode_f32(t)?)?)))
        .collect::<Result<_>>()?;
    let m = GeneratorManifest {
        arch: gen.arch().clone(),
        image_dims: gen.image_dims(),
        tasks: gen.task_kinds().to_vec(),
        class_counts: gen.task_kinds().iter().map(TaskKind::classes).collect(),
        eps: gen.eps(),
        lambda1,
        lambda2,
        seed,
        config_hash: config_hash.to_string(),
        params,
    };
    let path = dir.join(GENERATOR_FILE);
    container::write_new(&path, serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(path)
}

pub fn load_generator(dir: &Path) -> Result<(PerturbGenerator, GeneratorManifest)> {
    let path = dir.join(GENERATOR_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: GeneratorManifest = serde_json::from_str(&text)?;
    let params = m
        .params
        .iter()
        .map(|(name, r)| match read_ref(dir, r)? {
            Payload::F32(t) => Ok(t),
            Payload::I32(_) => Err(Error::invalid(format!("generator tensor {name} stored as integers"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let gen = PerturbGenerator::from_parts(m.arch.clone(), m.image_dims, m.tasks.clone(), m.eps, params)?;
    Ok((gen, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Block;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = GenArch {
            encoder: vec![Block { width: 2, stride: 2 }],
            embed_channels: 2,
            decoder: vec![2],
            upsample_after: 1,
        };
        let kinds = vec![TaskKind::Classification { classes: 3 }, TaskKind::Classification { classes: 2 }];
        let g = PerturbGenerator::new(arch, [1, 4, 4], kinds, 0.03, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_generator(dir.path(), &g, 20.0, 100.0, 9, "abc").unwrap();
        let (back, m) = load_generator(dir.path()).unwrap();
        assert!(back.bit_eq(&g));
        assert_eq!(m.class_counts, vec![Some(3), Some(2)]);
        assert!(save_generator(dir.path(), &g, 20.0, 100.0, 9, "abc").is_err());
    }
}
