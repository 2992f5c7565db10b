use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pgm::{self, GrayImage};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Female => "F",
            Gender::Male => "M",
        })
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Gender::Female),
            "M" => Ok(Gender::Male),
            other => Err(Error::Format(format!("gender `{other}` (expected F or M)"))),
        }
    }
}

/// One labelled scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub image: GrayImage,
    pub age_years: f64,
    pub gender: Gender,
}

/// Body region used for the upper/lower ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    #[default]
    Full,
    Upper,
    Lower,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Full => "full",
            Region::Upper => "upper",
            Region::Lower => "lower",
        })
    }
}

/// Upper = top `⌊H/2⌋` rows, lower = the rest, full = identity.
pub fn crop_region(image: &GrayImage, region: Region) -> GrayImage {
    let mid = image.height / 2;
    match region {
        Region::Full => image.clone(),
        Region::Upper => image.rows(0, mid),
        Region::Lower => image.rows(mid, image.height),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: u32,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub age_years: f64,
    pub gender: Gender,
}

/// Dataset index: `id,path,age_years,gender`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

pub const MANIFEST_HEADER: &str = "id,path,age_years,gender";

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, gender: Gender) -> usize {
        self.rows.iter().filter(|r| r.gender == gender).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.4},{}\n",
                r.id,
                r.path.to_string_lossy().replace('\\', "/"),
                r.age_years,
                r.gender
            ));
        }
        s
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(Error::Format(format!("manifest header must be `{MANIFEST_HEADER}`")));
        }
        let mut rows = Vec::new();
        let mut ids = std::collections::HashSet::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", i + 2));
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let id: u32 = fields[0].parse().map_err(|_| bad("bad id"))?;
            if !ids.insert(id) {
                return Err(bad("duplicate id"));
            }
            let age_years: f64 = fields[2].parse().map_err(|_| bad("bad age"))?;
            if !age_years.is_finite() {
                return Err(bad("bad age"));
            }
            rows.push(ManifestRow {
                id,
                path: PathBuf::from(fields[1]),
                age_years,
                gender: fields[3].parse()?,
            });
        }
        Ok(Manifest {
            rows,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Reads every image the manifest points to.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.rows
            .iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id,
                    image: pgm::load(self.base_dir.join(&r.path))?,
                    age_years: r.age_years,
                    gender: r.gender,
                })
            })
            .collect()
    }

    /// Writes `images/<id>.pgm` for each sample and `manifest.csv`.
    pub fn write_dataset(samples: &[Sample], out_dir: &Path) -> Result<Self> {
        let images = out_dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let rel = PathBuf::from("images").join(format!("{:05}.pgm", s.id));
            pgm::save(&s.image, out_dir.join(&rel))?;
            rows.push(ManifestRow {
                id: s.id,
                path: rel,
                age_years: s.age_years,
                gender: s.gender,
            });
        }
        let m = Manifest {
            rows,
            base_dir: out_dir.to_path_buf(),
        };
        m.save(&out_dir.join("manifest.csv"))?;
        Ok(m)
    }
}

/// Seeded shuffle, then the first `⌊n · train_fraction⌋` items train and the
/// rest test.
pub fn split<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::TooFewSamples(items.len()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let n_train = (items.len() as f64 * train_fraction + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[0x5b17]));
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

pub fn split_manifest(m: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    let (a, b) = split(&m.rows, train_fraction, seed)?;
    let wrap = |rows| Manifest {
        rows,
        base_dir: m.base_dir.clone(),
    };
    Ok((wrap(a), wrap(b)))
}
