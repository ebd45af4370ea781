//! On-disk dataset layout.
//!
//! ```text
//! <root>/index.csv                 id,split,instances
//! <root>/<split>/<id>.rgb.ppm      P6
//! <root>/<split>/<id>.depth.pfm    PFM, metres
//! <root>/<split>/<id>.valid.pgm    P5, 255 where annotated
//! <root>/<split>/<id>.seg.pgm      P5, class id per pixel
//! <root>/<split>/<id>.inst<k>.pgm  P5, class id inside instance k, 0 elsewhere
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::netpbm::{read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm};
use super::scene::{generate_scene, Class, Instance, Sample, SceneConfig};
use crate::error::{Error, Result};
use crate::rng;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

/// Assigns each of `count` samples to a split. A pure function of its
/// arguments: a seeded shuffle whose first `round(count * val_fraction)`
/// entries go to validation.
pub fn split_assignment(count: usize, val_fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let n_val = ((count as f64) * val_fraction).round() as usize;
    let mut splits = vec![Split::Train; count];
    for &i in order.iter().take(n_val) {
        splits[i] = Split::Val;
    }
    splits
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub split: Split,
    pub instances: usize,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

fn file(root: &Path, split: Split, id: &str, suffix: &str) -> PathBuf {
    root.join(split.to_string()).join(format!("{id}.{suffix}"))
}

/// Writes all files for one sample.
pub fn write_sample(root: &Path, split: Split, id: &str, sample: &Sample) -> Result<()> {
    fs::create_dir_all(root.join(split.to_string()))?;
    write_ppm(&file(root, split, id, "rgb.ppm"), &sample.rgb)?;
    write_pfm(&file(root, split, id, "depth.pfm"), &sample.depth)?;
    write_pgm(&file(root, split, id, "valid.pgm"), &sample.valid.map(|v| v * 255.0))?;
    write_pgm(&file(root, split, id, "seg.pgm"), &sample.seg)?;
    for (k, inst) in sample.instances.iter().enumerate() {
        let class = inst.class as u8 as f64;
        write_pgm(
            &file(root, split, id, &format!("inst{k}.pgm")),
            &inst.mask.map(|m| m * class),
        )?;
    }
    Ok(())
}

/// Reads one sample written by [`write_sample`].
pub fn read_sample(root: &Path, entry: &IndexEntry) -> Result<Sample> {
    let (split, id) = (entry.split, entry.id.as_str());
    let rgb = read_ppm(&file(root, split, id, "rgb.ppm"))?;
    let depth = read_pfm(&file(root, split, id, "depth.pfm"))?;
    let valid = read_pgm(&file(root, split, id, "valid.pgm"))?.map(|v| (v != 0.0) as u8 as f64);
    let seg = read_pgm(&file(root, split, id, "seg.pgm"))?;
    let mut instances = Vec::with_capacity(entry.instances);
    for k in 0..entry.instances {
        let raw = read_pgm(&file(root, split, id, &format!("inst{k}.pgm")))?;
        let class_id = raw.max() as u8;
        let class = Class::from_id(class_id)
            .ok_or_else(|| Error::format(0, format!("instance {k} of {id} has class {class_id}")))?;
        instances.push(Instance {
            class,
            mask: raw.map(|v| (v != 0.0) as u8 as f64),
        });
    }
    let sample = Sample {
        rgb,
        depth,
        valid,
        seg,
        instances,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn write_index(root: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut text = String::from("id,split,instances\n");
    for e in entries {
        text.push_str(&format!("{},{},{}\n", e.id, e.split, e.instances));
    }
    fs::create_dir_all(root)?;
    Ok(fs::write(root.join(INDEX_FILE), text)?)
}

pub fn read_index(root: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(root.join(INDEX_FILE))?;
    let mut entries = Vec::new();
    let mut offset = 0;
    for (n, line) in text.lines().enumerate() {
        let here = offset;
        offset += line.len() + 1;
        if n == 0 {
            if line != "id,split,instances" {
                return Err(Error::format(here, "unexpected index header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(here, format!("expected 3 fields, got {}", fields.len())));
        }
        entries.push(IndexEntry {
            id: fields[0].to_owned(),
            split: fields[1].parse().map_err(|_| Error::format(here, "bad split"))?,
            instances: fields[2]
                .parse()
                .map_err(|_| Error::format(here, "bad instance count"))?,
        });
    }
    Ok(entries)
}

/// Generates `count` scenes and writes them under `root` with an index.
///
/// Scene `i` uses seed `derive_seed(seed, "scene/<i>")`.
pub fn generate_dataset(
    root: &Path,
    count: usize,
    scene: &SceneConfig,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<IndexEntry>> {
    let splits = split_assignment(count, val_fraction, seed);
    let mut entries = Vec::with_capacity(count);
    fs::create_dir_all(root)?;
    for (i, &split) in splits.iter().enumerate() {
        let cfg = SceneConfig {
            seed: rng::derive_seed(seed, &format!("scene/{i}")),
            ..scene.clone()
        };
        let sample = generate_scene(&cfg)?;
        let id = sample_id(i);
        write_sample(root, split, &id, &sample)?;
        entries.push(IndexEntry {
            id,
            split,
            instances: sample.instances.len(),
        });
    }
    write_index(root, &entries)?;
    Ok(entries)
}

/// Generates scenes in memory with the same seeding as [`generate_dataset`].
pub fn generate_samples(count: usize, scene: &SceneConfig, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            generate_scene(&SceneConfig {
                seed: rng::derive_seed(seed, &format!("scene/{i}")),
                ..scene.clone()
            })
        })
        .collect()
}

/// Loads every sample of `split` in index order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<(String, Sample)>> {
    read_index(root)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| read_sample(root, &e).map(|s| (e.id.clone(), s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_pure() {
        assert_eq!(split_assignment(100, 0.2, 3), split_assignment(100, 0.2, 3));
        let s = split_assignment(100, 0.2, 3);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 20);
        assert_ne!(s, split_assignment(100, 0.2, 4));
    }

    #[test]
    fn round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneConfig {
            height: 16,
            width: 24,
            ..Default::default()
        };
        let entries = generate_dataset(dir.path(), 6, &scene, 0.5, 9).unwrap();
        assert_eq!(read_index(dir.path()).unwrap(), entries);
        let in_memory = generate_samples(6, &scene, 9).unwrap();
        for (e, expected) in entries.iter().zip(&in_memory) {
            assert_eq!(&read_sample(dir.path(), e).unwrap(), expected);
        }
    }

    #[test]
    fn empty_dataset_has_header_only_index() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 0, &SceneConfig::default(), 0.2, 1).unwrap();
        let text = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(text, "id,split,instances\n");
    }
}
