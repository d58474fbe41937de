//! Procedural class-conditional "real" images.
//!
//! Four families: Gaussian blob, linear gradient, stripes and checkerboard,
//! each with randomised continuous attributes and additive pixel noise.
//! Index `C` is reserved as the null class for classifier-free guidance.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::tensor::io::{read_ptar, write_bytes, write_ptar};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Real,
    GenBase,
    GenVariant,
    Probe,
    PgdPixel,
    PgdLatent,
}

impl SourceTag {
    pub fn label(self) -> u8 {
        match self {
            SourceTag::Real => 0,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Real => "real",
            SourceTag::GenBase => "gen_base",
            SourceTag::GenVariant => "gen_variant",
            SourceTag::Probe => "probe",
            SourceTag::PgdPixel => "pgd_pixel",
            SourceTag::PgdLatent => "pgd_latent",
        }
    }
}

/// Provenance carried alongside generated samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage<F> {
    /// `[H, W]`, values in `[-1, 1]`.
    pub pixels: Tensor<F>,
    pub class_id: usize,
    pub source: SourceTag,
    pub meta: SampleMeta,
}

impl<F: Real> ToyImage<F> {
    pub fn label(&self) -> u8 {
        self.source.label()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset<F> {
    pub name: String,
    pub seed: u64,
    pub items: Vec<ToyImage<F>>,
}

/// Attributes of one procedural image, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassAttrs {
    Blob {
        cx: f64,
        cy: f64,
        sigma: f64,
        amp: f64,
    },
    Gradient {
        angle: f64,
        amp: f64,
        offset: f64,
    },
    Stripes {
        freq: f64,
        angle: f64,
        phase: f64,
        amp: f64,
    },
    Checker {
        cell: f64,
        ox: f64,
        oy: f64,
        amp: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyDomain {
    pub size: usize,
    pub classes: usize,
    pub noise_std: f64,
}

impl Default for ToyDomain {
    fn default() -> Self {
        Self {
            size: 16,
            classes: 4,
            noise_std: 0.02,
        }
    }
}

impl ToyDomain {
    pub fn new(size: usize, classes: usize) -> Result<Self> {
        if size < 8 {
            return Err(Error::Config(format!("image size {size} below 8")));
        }
        if !(1..=4).contains(&classes) {
            return Err(Error::Config(format!(
                "{classes} classes; the domain has 1..=4 families"
            )));
        }
        Ok(Self {
            size,
            classes,
            ..Self::default()
        })
    }

    /// Index reserved for unconditional generation.
    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn draw_attrs(&self, class_id: usize, rng: &mut Rng) -> Result<ClassAttrs> {
        let s = self.size as f64;
        let u = |rng: &mut Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        Ok(match class_id {
            0 => ClassAttrs::Blob {
                cx: u(rng, 0.3, 0.7) * s,
                cy: u(rng, 0.3, 0.7) * s,
                sigma: u(rng, 1.5, 3.5) * s / 16.0,
                amp: u(rng, 0.5, 0.9),
            },
            1 => ClassAttrs::Gradient {
                angle: u(rng, 0.0, 2.0 * PI),
                amp: u(rng, 0.5, 0.9),
                offset: u(rng, -0.1, 0.1),
            },
            2 => ClassAttrs::Stripes {
                freq: u(rng, 2.0, 4.0),
                angle: u(rng, 0.0, PI),
                phase: u(rng, 0.0, 2.0 * PI),
                amp: u(rng, 0.5, 0.9),
            },
            3 => ClassAttrs::Checker {
                cell: u(rng, 2.5, 4.5) * s / 16.0,
                ox: u(rng, 0.0, 8.0),
                oy: u(rng, 0.0, 8.0),
                amp: u(rng, 0.5, 0.9),
            },
            c => {
                return Err(Error::Config(format!(
                    "class {c} out of range 0..{}",
                    self.classes
                )))
            }
        })
    }

    /// Noise-free rendering of one attribute draw.
    pub fn render(&self, attrs: &ClassAttrs) -> Vec<f64> {
        let n = self.size;
        let s = n as f64;
        let c = (s - 1.0) / 2.0;
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f64, y as f64);
                let v = match *attrs {
                    ClassAttrs::Blob { cx, cy, sigma, amp } => {
                        let r2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                        -amp + 2.0 * amp * (-r2 / (2.0 * sigma * sigma)).exp()
                    }
                    ClassAttrs::Gradient { angle, amp, offset } => {
                        offset + amp * ((xf - c) * angle.cos() + (yf - c) * angle.sin()) / (s / 2.0)
                    }
                    ClassAttrs::Stripes {
                        freq,
                        angle,
                        phase,
                        amp,
                    } => {
                        amp * (2.0 * PI * freq * (xf * angle.cos() + yf * angle.sin()) / s + phase)
                            .sin()
                    }
                    ClassAttrs::Checker { cell, ox, oy, amp } => {
                        let v = (PI * (xf + ox) / cell).sin() * (PI * (yf + oy) / cell).sin();
                        amp * (3.0 * v).tanh()
                    }
                };
                out.push(v.clamp(-1.0, 1.0));
            }
        }
        out
    }

    pub fn sample_real<F: Real>(&self, class_id: usize, rng: &mut Rng) -> Result<ToyImage<F>> {
        if class_id >= self.classes {
            return Err(Error::Config(format!(
                "class {class_id} out of range 0..{}",
                self.classes
            )));
        }
        let attrs = self.draw_attrs(class_id, rng)?;
        let clean = self.render(&attrs);
        let noise = rng::normal_vec::<f64>(rng, clean.len(), self.noise_std);
        let data = clean
            .iter()
            .zip(&noise)
            .map(|(v, e)| F::c((v + e).clamp(-1.0, 1.0)))
            .collect();
        Ok(ToyImage {
            pixels: Tensor::new(vec![self.size, self.size], data)?,
            class_id,
            source: SourceTag::Real,
            meta: SampleMeta::default(),
        })
    }

    /// `classes · n_per_class` items; item `i` has class `i mod C` and its own
    /// stream derived from `(seed, split_name, i)`.
    pub fn make_split<F: Real>(
        &self,
        n_per_class: usize,
        seed: u64,
        split_name: &str,
    ) -> Result<SplitDataset<F>> {
        if n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        let root = rng::derive(seed, split_name);
        let items = (0..self.classes * n_per_class)
            .map(|i| {
                let mut r = rng::rng(rng::derive_index(root, i as u64));
                self.sample_real(i % self.classes, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SplitDataset {
            name: split_name.to_string(),
            seed,
            items,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    class_id: usize,
    label: u8,
    source_tag: SourceTag,
    #[serde(flatten)]
    meta: SampleMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    split_name: String,
    seed: u64,
    count: usize,
    items: Vec<ItemRecord>,
}

impl<F: Real> SplitDataset<F> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_dims(&self) -> Option<&[usize]> {
        self.items.first().map(|i| i.pixels.dims())
    }

    /// Writes `path` (PTAR, entries `img/{idx}`) and the sidecar manifest
    /// `path` with extension `json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = (0..self.items.len()).map(|i| format!("img/{i}")).collect();
        let entries: Vec<(String, &Tensor<F>)> = names
            .into_iter()
            .zip(self.items.iter().map(|i| &i.pixels))
            .collect();
        write_ptar(path, &entries)?;
        let manifest = DatasetManifest {
            split_name: self.name.clone(),
            seed: self.seed,
            count: self.items.len(),
            items: self
                .items
                .iter()
                .map(|i| ItemRecord {
                    class_id: i.class_id,
                    label: i.label(),
                    source_tag: i.source,
                    meta: i.meta,
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_bytes(&path.with_extension("json"), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_ptar::<F>(path)?;
        let mpath = path.with_extension("json");
        let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        if manifest.items.len() != entries.len() {
            return Err(Error::Format(format!(
                "{}: manifest lists {} items, archive has {}",
                path.display(),
                manifest.items.len(),
                entries.len()
            )));
        }
        let mut items = Vec::with_capacity(entries.len());
        for (i, ((name, t), rec)) in entries.into_iter().zip(manifest.items).enumerate() {
            if name != format!("img/{i}") {
                return Err(Error::Format(format!("unexpected entry `{name}` at {i}")));
            }
            if rec.label != rec.source_tag.label() {
                return Err(Error::Format(format!(
                    "item {i}: label disagrees with source tag"
                )));
            }
            items.push(ToyImage {
                pixels: t,
                class_id: rec.class_id,
                source: rec.source_tag,
                meta: rec.meta,
            });
        }
        Ok(Self {
            name: manifest.split_name,
            seed: manifest.seed,
            items,
        })
    }

    /// `[N, H, W]` stack of the selected items.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<F>> {
        let dims = self
            .image_dims()
            .ok_or_else(|| Error::Contract(format!("dataset `{}` is empty", self.name)))?
            .to_vec();
        let rows: Vec<&[F]> = idx.iter().map(|&i| self.items[i].pixels.data()).collect();
        Tensor::stack_rows(&rows, &dims)
    }

    pub fn concat(name: &str, seed: u64, parts: &[&SplitDataset<F>]) -> Self {
        Self {
            name: name.to_string(),
            seed,
            items: parts.iter().flat_map(|p| p.items.iter().cloned()).collect(),
        }
    }
}
