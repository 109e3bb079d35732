//! Probabilistic 2D landmark observations and their line-delimited file format.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBSERVATION_FORMAT_VERSION: u32 = 1;

/// A 2D landmark prediction: mean pixel position and isotropic std-dev.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark2d {
    /// Global landmark id: body set, then hand set, then face set.
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

/// Observations of a sequence: `frames[f][c]` lists what camera `c` saw in frame `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub image_sizes: Vec<(u32, u32)>,
    pub frames: Vec<Vec<Vec<Landmark2d>>>,
    pub model_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    num_frames: usize,
    num_cameras: usize,
    image_sizes: Vec<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    frame: usize,
    camera: usize,
    landmarks: Vec<[f64; 4]>,
}

impl ObservationSet {
    pub fn empty(frames: usize, image_sizes: Vec<(u32, u32)>) -> Self {
        let cams = image_sizes.len();
        ObservationSet {
            image_sizes,
            frames: vec![vec![Vec::new(); cams]; frames],
            model_hash: None,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_cameras(&self) -> usize {
        self.image_sizes.len()
    }

    pub fn view(&self, frame: usize, camera: usize) -> &[Landmark2d] {
        &self.frames[frame][camera]
    }

    /// Keeps only the listed cameras, in the given order.
    pub fn select_cameras(&self, cameras: &[usize]) -> Result<Self> {
        if let Some(&c) = cameras.iter().find(|&&c| c >= self.num_cameras()) {
            return Err(Error::Shape(format!("camera {c} out of range")));
        }
        Ok(ObservationSet {
            image_sizes: cameras.iter().map(|&c| self.image_sizes[c]).collect(),
            frames: self
                .frames
                .iter()
                .map(|f| cameras.iter().map(|&c| f[c].clone()).collect())
                .collect(),
            model_hash: self.model_hash.clone(),
        })
    }

    /// Checks ids against the model's landmark count and values for finiteness.
    pub fn validate(&self, num_landmarks: usize) -> Result<()> {
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.len() != self.num_cameras() {
                return Err(Error::Shape(format!(
                    "frame {f} has {} views, expected {}",
                    frame.len(),
                    self.num_cameras()
                )));
            }
            for (c, view) in frame.iter().enumerate() {
                for l in view {
                    if l.id >= num_landmarks {
                        return Err(Error::Format(format!(
                            "frame {f} camera {c}: landmark id {} out of range",
                            l.id
                        )));
                    }
                    if !(l.x.is_finite() && l.y.is_finite() && l.sigma > 0.0 && l.sigma.is_finite()) {
                        return Err(Error::Format(format!(
                            "frame {f} camera {c}: landmark {} has invalid values",
                            l.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = Header {
            format_version: OBSERVATION_FORMAT_VERSION,
            num_frames: self.num_frames(),
            num_cameras: self.num_cameras(),
            image_sizes: self.image_sizes.iter().map(|&(w, h)| [w, h]).collect(),
            model_hash: self.model_hash.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (f, frame) in self.frames.iter().enumerate() {
            for (c, view) in frame.iter().enumerate() {
                if view.is_empty() {
                    continue;
                }
                let rec = Record {
                    frame: f,
                    camera: c,
                    landmarks: view.iter().map(|l| [l.id as f64, l.x, l.y, l.sigma]).collect(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty observation file".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format_version != OBSERVATION_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported observation format_version {}",
                header.format_version
            )));
        }
        if header.image_sizes.len() != header.num_cameras {
            return Err(Error::Format("image_sizes does not match num_cameras".into()));
        }
        let mut set = ObservationSet::empty(
            header.num_frames,
            header.image_sizes.iter().map(|s| (s[0], s[1])).collect(),
        );
        set.model_hash = header.model_hash;
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("record {}: {e}", n + 1)))?;
            if rec.frame >= header.num_frames || rec.camera >= header.num_cameras {
                return Err(Error::Format(format!(
                    "record {} references frame {} camera {} out of range",
                    n + 1,
                    rec.frame,
                    rec.camera
                )));
            }
            let view = &mut set.frames[rec.frame][rec.camera];
            for l in rec.landmarks {
                if l[0] < 0.0 || l[0].fract() != 0.0 {
                    return Err(Error::Format(format!("record {}: bad landmark id {}", n + 1, l[0])));
                }
                view.push(Landmark2d {
                    id: l[0] as usize,
                    x: l[1],
                    y: l[2],
                    sigma: l[3],
                });
            }
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}
