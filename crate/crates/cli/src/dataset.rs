//! Dataset directories: `world.json`, `manifest.jsonl` and one PGM per sample.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use cvla::image::{BBox, Image};
use cvla::synthworld::{PhantomSample, WorldConfig};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.jsonl";
pub const WORLD: &str = "world.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: usize,
    pub image_path: String,
    pub gt_findings: Vec<String>,
    pub gt_regions: BTreeMap<String, BBox>,
}

pub fn write_dataset(dir: &Path, world: &WorldConfig, samples: &[PhantomSample]) -> Result<()> {
    let vocab = world.vocabulary()?;
    fs::create_dir_all(dir.join("images")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(WORLD), serde_json::to_vec_pretty(world)?)?;
    let mut manifest = fs::File::create(dir.join(MANIFEST)).with_context(|| format!("creating {MANIFEST}"))?;
    for (id, s) in samples.iter().enumerate() {
        let image_path = format!("images/{id:05}.pgm");
        s.image.write_pgm(&dir.join(&image_path))?;
        let line = ManifestLine {
            id,
            image_path,
            gt_findings: s.gt_findings.names(&vocab).into_iter().map(String::from).collect(),
            gt_regions: s.gt_regions.iter().map(|(&i, &b)| (vocab.name(i).to_string(), b)).collect(),
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n")?;
    }
    Ok(())
}

/// Samples in manifest order, with images as stored (8-bit quantized).
pub fn read_dataset(dir: &Path) -> Result<(WorldConfig, Vec<PhantomSample>)> {
    let world: WorldConfig = serde_json::from_slice(
        &fs::read(dir.join(WORLD)).with_context(|| format!("reading {}", dir.join(WORLD).display()))?,
    )?;
    let vocab = world.vocabulary()?;
    let file =
        fs::File::open(dir.join(MANIFEST)).with_context(|| format!("opening {}", dir.join(MANIFEST).display()))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line).with_context(|| format!("{MANIFEST} line {}", n + 1))?;
        if m.id != samples.len() {
            bail!("{MANIFEST} line {}: expected id {}, found {}", n + 1, samples.len(), m.id);
        }
        let names: Vec<&str> = m.gt_findings.iter().map(String::as_str).collect();
        let mut gt_regions = BTreeMap::new();
        for (name, b) in m.gt_regions {
            gt_regions.insert(vocab.require(&name)?, b);
        }
        samples.push(PhantomSample {
            image: Image::read_pgm(&dir.join(&m.image_path))?,
            gt_findings: vocab.vector_of(&names)?,
            gt_regions,
        });
    }
    if samples.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    Ok((world, samples))
}
