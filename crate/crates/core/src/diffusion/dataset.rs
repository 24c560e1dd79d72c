use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::unet::tokenize;

/// An image with its tag caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub caption: String,
}

impl From<(Image, String)> for Sample {
    fn from((image, caption): (Image, String)) -> Self {
        Sample { image, caption }
    }
}

/// Instance images (captioned with the trigger first), regularization
/// images (never mentioning the trigger), and the instance repeat count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainDataset {
    pub instance: Vec<Sample>,
    pub reg: Vec<Sample>,
    pub repeats: usize,
    pub image_size: usize,
}

pub const DEFAULT_REPEATS: usize = 25;

impl TrainDataset {
    pub fn new(instance: Vec<Sample>, reg: Vec<Sample>, repeats: usize) -> Result<TrainDataset> {
        let image_size = instance
            .first()
            .map(|s| s.image.size)
            .ok_or_else(|| Error::contract("dataset has no instance images"))?;
        if repeats == 0 {
            return Err(Error::contract("repeats must be at least 1"));
        }
        if let Some(bad) = instance.iter().chain(&reg).find(|s| s.image.size != image_size) {
            return Err(Error::contract(format!(
                "image of size {} in a dataset of size {image_size}",
                bad.image.size
            )));
        }
        Ok(TrainDataset {
            instance,
            reg,
            repeats,
            image_size,
        })
    }

    /// Images times repeats.
    pub fn stream_len(&self) -> usize {
        self.instance.len() * self.repeats
    }

    /// The trigger: first token of the first instance caption.
    pub fn trigger(&self) -> Option<&str> {
        self.instance.first().and_then(|s| tokenize(&s.caption).first().copied())
    }

    /// Checks that every instance caption starts with `trigger` and no
    /// regularization caption contains it.
    pub fn validate_captions(&self, trigger: &str) -> Result<()> {
        for s in &self.instance {
            if tokenize(&s.caption).first() != Some(&trigger) {
                return Err(Error::contract(format!(
                    "instance caption '{}' does not start with trigger '{trigger}'",
                    s.caption
                )));
            }
        }
        for s in &self.reg {
            if tokenize(&s.caption).contains(&trigger) {
                return Err(Error::contract(format!(
                    "regularization caption '{}' contains trigger '{trigger}'",
                    s.caption
                )));
            }
        }
        Ok(())
    }

    /// Writes `instance/<name>.png|.txt` and `reg/<name>.png|.txt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        write_split(&dir.join("instance"), &self.instance)?;
        write_split(&dir.join("reg"), &self.reg)
    }

    /// Reads the layout written by [`save_dir`](Self::save_dir). A missing
    /// `reg` directory means no regularization images.
    pub fn load_dir(dir: &Path, repeats: usize) -> Result<TrainDataset> {
        let instance = read_split(&dir.join("instance"))?;
        let reg_dir = dir.join("reg");
        let reg = if reg_dir.exists() { read_split(&reg_dir)? } else { Vec::new() };
        TrainDataset::new(instance, reg, repeats)
    }
}

/// Writes `<index>.png` and `<index>.txt` for each sample.
pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:04}");
        s.image.save_png(&dir.join(format!("{stem}.png")))?;
        fs::write(dir.join(format!("{stem}.txt")), &s.caption)?;
    }
    Ok(())
}

/// Reads the pairs written by [`write_split`], sorted by file name.
pub fn read_split(dir: &Path) -> Result<Vec<Sample>> {
    let mut pngs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    pngs.sort();
    pngs.into_iter()
        .map(|png| {
            let txt = png.with_extension("txt");
            let caption = fs::read_to_string(&txt)
                .map_err(|e| Error::contract(format!("missing caption {}: {e}", txt.display())))?;
            Ok(Sample {
                image: Image::load_png(&png)?,
                caption: caption.trim().to_string(),
            })
        })
        .collect()
}

/// Deterministic epoch-shuffled stream over `len` indices, each repeated
/// `repeats` times per epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    repeats: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(len: usize, repeats: usize) -> BatchSampler {
        BatchSampler {
            len,
            repeats,
            order: Vec::new(),
            pos: 0,
        }
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> Option<usize> {
        if self.len == 0 {
            return None;
        }
        if self.pos == self.order.len() {
            self.order = (0..self.len).flat_map(|i| std::iter::repeat_n(i, self.repeats)).collect();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.order[self.pos - 1])
    }

    pub fn batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).filter_map(|_| self.next(rng)).collect()
    }
}
