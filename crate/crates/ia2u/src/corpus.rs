//! On-disk corpus: PNG pairs under `{train,val,test}/` and a JSON-lines
//! manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ia2u_core::watersim::{corpus_plan, generate_sample, GtBox, SceneSample, Split, NUM_OBJECT_CLASSES, NUM_WATER_TYPES};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::png_io::{read_png, write_png};

pub const MANIFEST: &str = "manifest.jsonl";
/// Worker-count override for corpus generation and loading.
pub const WORKERS_ENV: &str = "IA2U_NUM_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the corpus directory.
    pub clean_path: String,
    pub degraded_path: String,
    pub water_type: usize,
    /// `[class, x0, y0, x1, y1]` in pixels.
    pub boxes: Vec<(usize, f32, f32, f32, f32)>,
}

impl ManifestRecord {
    /// Split named by the first path component.
    pub fn split(&self) -> Option<Split> {
        Split::parse(self.clean_path.split('/').next()?)
    }

    pub fn gt_boxes(&self) -> Vec<GtBox> {
        self.boxes
            .iter()
            .map(|&(class_id, x0, y0, x1, y1)| GtBox { class_id, x0, y0, x1, y1 })
            .collect()
    }
}

/// Worker threads: `IA2U_NUM_WORKERS` when set, else the available cores.
pub fn num_workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(num_workers()?)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub objects: bool,
    pub seed: u64,
}

/// Write every sample and the manifest. Each sample has its own random
/// stream, so the output does not depend on the worker count.
pub fn generate_corpus(out: &Path, opts: &GenOptions) -> Result<Vec<ManifestRecord>> {
    let plan = corpus_plan(opts.n_train, opts.n_val, opts.n_test)?;
    for split in Split::ALL {
        let d = out.join(split.name());
        fs::create_dir_all(&d).map_err(Error::io(&d))?;
    }
    let records = with_pool(|| {
        plan.par_iter()
            .map(|p| {
                let s = generate_sample(opts.seed, p.index, p.water_type, opts.size, opts.objects)?;
                let id = format!("{:06}", p.index);
                let rec = ManifestRecord {
                    clean_path: format!("{}/{id}_clean.png", p.split.name()),
                    degraded_path: format!("{}/{id}_degraded.png", p.split.name()),
                    id,
                    water_type: s.water_type,
                    boxes: s.boxes.iter().map(|b| (b.class_id, b.x0, b.y0, b.x1, b.y1)).collect(),
                };
                write_png(&out.join(&rec.clean_path), &s.clean)?;
                write_png(&out.join(&rec.degraded_path), &s.degraded)?;
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let path = out.join(MANIFEST);
    let mut text = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut text, r).map_err(|e| Error::format(&path, e))?;
        text.push(b'\n');
    }
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&text))
        .map_err(Error::io(&path))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: ManifestRecord =
                serde_json::from_str(l).map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
            if r.water_type >= NUM_WATER_TYPES || r.boxes.iter().any(|b| b.0 >= NUM_OBJECT_CLASSES) {
                return Err(Error::format(&path, format!("line {}: label out of range", i + 1)));
            }
            if r.split().is_none() {
                return Err(Error::format(&path, format!("line {}: path outside train/val/test", i + 1)));
            }
            Ok(r)
        })
        .collect()
}

/// Records of one split with their decoded samples, in manifest order.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub samples: Vec<SceneSample>,
}

pub fn load_split(dir: &Path, split: Split) -> Result<Corpus> {
    let records: Vec<ManifestRecord> = read_manifest(dir)?
        .into_iter()
        .filter(|r| r.split() == Some(split))
        .collect();
    let samples = with_pool(|| {
        records
            .par_iter()
            .map(|r| {
                Ok(SceneSample {
                    clean: read_png(&dir.join(&r.clean_path))?,
                    degraded: read_png(&dir.join(&r.degraded_path))?,
                    water_type: r.water_type,
                    boxes: r.gt_boxes(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(Corpus {
        dir: dir.to_path_buf(),
        records,
        samples,
    })
}
