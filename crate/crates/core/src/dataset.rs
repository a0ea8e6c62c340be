//! On-disk layout of an ingested corpus.
//!
//! ```text
//! <dir>/manifest.json    classes, counts and the corpus config
//! <dir>/train.ndjson     one {"class", "points"} record per line
//! <dir>/test.ndjson
//! <dir>/images/<id>.png  8-bit grayscale renderings
//! ```

use std::io::{BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusConfig, ImageItem};
use crate::error::{Error, Result};
use crate::sketch::{parse_ndjson, RasterCanvas, Sketch};

const MANIFEST: &str = "manifest.json";
const TRAIN: &str = "train.ndjson";
const TEST: &str = "test.ndjson";
const IMAGES: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub train: usize,
    pub test: usize,
    pub images: Vec<ImageEntry>,
    pub config: CorpusConfig,
}

fn write_sketches(path: &Path, sketches: &[Sketch]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in sketches {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_sketches(path: &Path) -> Result<Vec<Sketch>> {
    let parsed = parse_ndjson(BufReader::new(std::fs::File::open(path)?))?;
    if let Some(e) = parsed.errors.first() {
        return Err(Error::Format(format!("{} line {}: {}", path.display(), e.line, e.message)));
    }
    Ok(parsed.sketches)
}

pub fn save_corpus(corpus: &Corpus, config: &CorpusConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join(IMAGES))?;
    write_sketches(&dir.join(TRAIN), &corpus.train)?;
    write_sketches(&dir.join(TEST), &corpus.test)?;
    for img in &corpus.images {
        std::fs::write(dir.join(IMAGES).join(format!("{}.png", img.id)), img.canvas.to_png()?)?;
    }
    let manifest = Manifest {
        classes: corpus.class_names(),
        train: corpus.train.len(),
        test: corpus.test.len(),
        images: corpus
            .images
            .iter()
            .map(|i| ImageEntry {
                id: i.id,
                class: i.class.clone(),
            })
            .collect(),
        config: config.clone(),
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::NotFound(format!("dataset manifest {}", path.display())));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn load_corpus(dir: &Path) -> Result<(Corpus, Manifest)> {
    let manifest = load_manifest(dir)?;
    let train = read_sketches(&dir.join(TRAIN))?;
    let test = read_sketches(&dir.join(TEST))?;
    if train.len() != manifest.train || test.len() != manifest.test {
        return Err(Error::Format("sketch counts disagree with the manifest".into()));
    }
    let images = manifest
        .images
        .iter()
        .map(|e| {
            let bytes = std::fs::read(dir.join(IMAGES).join(format!("{}.png", e.id)))?;
            Ok(ImageItem {
                id: e.id,
                class: e.class.clone(),
                canvas: RasterCanvas::from_png(&bytes)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((Corpus { train, test, images }, manifest))
}
