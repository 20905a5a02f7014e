//! Dataset directory: `index.json`, `img/<id>.sadt`, `lbl/<id>.pgm`
//! (class-coded labels) and `exist/<id>.txt` (one `0`/`1` per slot).

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pgm::{read_pgm, write_pgm};
use super::LaneSample;
use crate::error::{Error, Result};
use crate::tensor::{load_sadt, save_sadt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub height: usize,
    pub width: usize,
    pub lane_slots: usize,
    pub seed: u64,
    pub samples: Vec<IndexEntry>,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn write_dataset(dir: &Path, index: &DatasetIndex, samples: &[LaneSample]) -> Result<()> {
    if index.samples.len() != samples.len() {
        return Err(Error::invalid("index and sample counts differ"));
    }
    for sub in ["img", "lbl", "exist"] {
        mkdir(&dir.join(sub))?;
    }
    index
        .samples
        .par_iter()
        .zip(samples)
        .try_for_each(|(e, s)| -> Result<()> {
            s.check()?;
            save_sadt(&dir.join("img").join(format!("{}.sadt", e.id)), &[&s.image])?;
            write_pgm(&dir.join("lbl").join(format!("{}.pgm", e.id)), s.width(), s.height(), &s.labels)?;
            let bits: String = s.exist.iter().map(|&b| if b > 0 { '1' } else { '0' }).collect();
            let p = dir.join("exist").join(format!("{}.txt", e.id));
            fs::write(&p, format!("{bits}\n")).map_err(|err| Error::io(&p, err))
        })?;
    let p = dir.join("index.json");
    fs::write(&p, serde_json::to_vec_pretty(index)?).map_err(|e| Error::io(&p, e))
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let p = dir.join("index.json");
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<LaneSample>)> {
    let index = read_index(dir)?;
    let samples = index
        .samples
        .par_iter()
        .map(|e| read_sample(dir, &index, &e.id))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, samples))
}

fn read_sample(dir: &Path, index: &DatasetIndex, id: &str) -> Result<LaneSample> {
    let ip = dir.join("img").join(format!("{id}.sadt"));
    let image = load_sadt(&ip)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::format(&ip, "no tensor"))?;
    if image.shape() != [3, index.height, index.width] {
        return Err(Error::format(&ip, format!("image shape {:?}", image.shape())));
    }
    let lp = dir.join("lbl").join(format!("{id}.pgm"));
    let (w, h, labels) = read_pgm(&lp)?;
    if (h, w) != (index.height, index.width) {
        return Err(Error::format(&lp, format!("label size {w}x{h}")));
    }
    let ep = dir.join("exist").join(format!("{id}.txt"));
    let text = fs::read_to_string(&ep).map_err(|e| Error::io(&ep, e))?;
    let exist = text
        .trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(0u8),
            '1' => Ok(1u8),
            _ => Err(Error::format(&ep, format!("unexpected character {c:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if exist.len() != index.lane_slots {
        return Err(Error::format(&ep, format!("{} bits for {} slots", exist.len(), index.lane_slots)));
    }
    let s = LaneSample { image, labels, exist };
    s.check().map_err(|e| Error::format(&ep, e.to_string()))?;
    Ok(s)
}
