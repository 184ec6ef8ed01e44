//! Synthetic paired region/token data and its on-disk layout.
//!
//! Each class owns a latent vector. Region prototypes are fixed linear maps
//! of the latent, one per region slot; token patterns are the argmax of
//! per-position linear maps of the same latent, so both modalities of a pair
//! derive from one shared cause.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one binary
//! matrix per split and modality. A matrix file is a header of two
//! little-endian `u32` extents (rows, cols) followed by `rows × cols`
//! little-endian `f64` values in row-major order. Region files stack the
//! `T × d` blocks of every instance (`rows = instances · T`); token files
//! store ids as floats (`rows = instances`, `cols = N`); label files are
//! `instances × 1`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoders::{RegionSet, TokenSeq};
use crate::error::{Error, Result};

const LATENT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub regions: usize,
    pub tokens: usize,
    pub dim: usize,
    pub vocab: usize,
    pub noise: f64,
    pub distractor: f64,
    /// Region slots per instance replaced by class-independent noise.
    #[serde(default)]
    pub clutter: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 32,
            regions: 8,
            tokens: 6,
            dim: 64,
            vocab: 64,
            noise: 0.1,
            distractor: 0.1,
            clutter: 0,
            train_per_class: 8,
            val_per_class: 1,
            test_per_class: 1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.regions == 0 || self.tokens == 0 || self.dim == 0 {
            return fail("regions, tokens and dim must be positive".into());
        }
        if self.vocab < 2 {
            return fail(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.clutter >= self.regions {
            return fail(format!(
                "clutter must be below regions ({}), got {}",
                self.regions, self.clutter
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor) {
            return fail(format!("distractor must lie in [0, 1], got {}", self.distractor));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return fail("every split needs at least one instance per class".into());
        }
        Ok(())
    }
}

/// One image-text pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub regions: RegionSet,
    pub tokens: TokenSeq,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
    /// `classes × (regions · dim)` noise-free region features.
    pub prototypes: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (expected train, val, test)"
            ))),
        }
    }
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(LATENT, &mut rng))
        .collect();
    let region_maps: Vec<Vec<f64>> = (0..spec.regions)
        .map(|_| normal_vec(spec.dim * LATENT, &mut rng))
        .collect();
    let token_maps: Vec<Vec<f64>> = (0..spec.tokens)
        .map(|_| normal_vec(spec.vocab * LATENT, &mut rng))
        .collect();
    let norm = 1.0 / (LATENT as f64).sqrt();

    let mut prototypes = Vec::with_capacity(spec.classes);
    let mut patterns = Vec::with_capacity(spec.classes);
    for z in &latents {
        let mut proto = Vec::with_capacity(spec.regions * spec.dim);
        for m in &region_maps {
            for r in 0..spec.dim {
                let row = &m[r * LATENT..(r + 1) * LATENT];
                proto.push(norm * row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        prototypes.push(Tensor::matrix(spec.regions, spec.dim, proto)?);
        let pattern: Vec<usize> = token_maps
            .iter()
            .map(|m| {
                let scores: Vec<f64> = (0..spec.vocab)
                    .map(|v| {
                        let row = &m[v * LATENT..(v + 1) * LATENT];
                        row.iter().zip(z).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                crate::distributions::argmax(&scores)
            })
            .collect();
        patterns.push(pattern);
    }

    let draw = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Instance>> {
        let mut out = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for c in 0..spec.classes {
                let mut feats: Vec<f64> = prototypes[c]
                    .data()
                    .iter()
                    .map(|&p| {
                        let e: f64 = StandardNormal.sample(rng);
                        p + spec.noise * e
                    })
                    .collect();
                if spec.clutter > 0 {
                    let slots =
                        rand::seq::index::sample(rng, spec.regions, spec.clutter).into_vec();
                    for t in slots {
                        for v in &mut feats[t * spec.dim..(t + 1) * spec.dim] {
                            *v = StandardNormal.sample(rng);
                        }
                    }
                }
                let ids: Vec<usize> = patterns[c]
                    .iter()
                    .map(|&tok| {
                        if rng.random::<f64>() < spec.distractor {
                            rng.random_range(0..spec.vocab)
                        } else {
                            tok
                        }
                    })
                    .collect();
                out.push(Instance {
                    regions: RegionSet::new(Tensor::matrix(spec.regions, spec.dim, feats)?)?,
                    tokens: TokenSeq::new(ids)?,
                    label: c,
                });
            }
        }
        Ok(out)
    };
    let train = draw(spec.train_per_class, &mut rng)?;
    let val = draw(spec.val_per_class, &mut rng)?;
    let test = draw(spec.test_per_class, &mut rng)?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train,
        val,
        test,
        prototypes,
    })
}

impl SyntheticDataset {
    pub fn split(&self, s: Split) -> &[Instance] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Order-sensitive FNV-1a hash over every stored value.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for s in Split::ALL {
            for inst in self.split(s) {
                for v in inst.regions.features().data() {
                    eat(&v.to_le_bytes());
                }
                for &t in inst.tokens.ids() {
                    eat(&(t as u64).to_le_bytes());
                }
                eat(&(inst.label as u64).to_le_bytes());
            }
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub instances: [usize; 3],
    pub fingerprint: String,
    pub files: Vec<String>,
}

pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.dims();
    let extent = |n: usize| {
        u32::try_from(n).map_err(|_| Error::Format(format!("extent {n} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(8 + 8 * t.len());
    buf.extend_from_slice(&extent(rows)?.to_le_bytes());
    buf.extend_from_slice(&extent(cols)?.to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 8 {
        return Err(bad(&format!(
            "expected {} bytes of data for {rows}x{cols}, found {}",
            rows * cols * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(rows, cols, data).map_err(|e| bad(&e.to_string()))
}

/// Writes the dataset into `dir`, which must exist.
pub fn export_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<DatasetManifest> {
    let spec = &ds.spec;
    let mut files = Vec::new();
    for s in Split::ALL {
        let insts = ds.split(s);
        let regions: Vec<f64> = insts
            .iter()
            .flat_map(|i| i.regions.features().data().iter().copied())
            .collect();
        let tokens: Vec<f64> = insts
            .iter()
            .flat_map(|i| i.tokens.ids().iter().map(|&t| t as f64))
            .collect();
        let labels: Vec<f64> = insts.iter().map(|i| i.label as f64).collect();
        let n = insts.len();
        for (kind, t) in [
            ("regions", Tensor::matrix(n * spec.regions, spec.dim, regions)?),
            ("tokens", Tensor::matrix(n, spec.tokens, tokens)?),
            ("labels", Tensor::matrix(n, 1, labels)?),
        ] {
            let name = format!("{}_{kind}.bin", s.name());
            write_matrix(&dir.join(&name), &t)?;
            files.push(name);
        }
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        instances: [ds.train.len(), ds.val.len(), ds.test.len()],
        fingerprint: ds.fingerprint(),
        files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

fn as_index(v: f64, limit: usize, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v >= limit as f64 {
        return Err(Error::Format(format!("{what} value {v} is not an id below {limit}")));
    }
    Ok(v as usize)
}

pub fn import_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let spec = manifest.spec.clone();
    spec.validate()?;
    let mut splits = Vec::new();
    for (s, &n) in Split::ALL.iter().zip(&manifest.instances) {
        let load = |kind: &str, rows: usize, cols: usize| -> Result<Tensor> {
            let path = dir.join(format!("{}_{kind}.bin", s.name()));
            let t = read_matrix(&path)?;
            if t.dims() != (rows, cols) {
                return Err(Error::Format(format!(
                    "{}: expected {rows}x{cols}, found {:?}",
                    path.display(),
                    t.dims()
                )));
            }
            Ok(t)
        };
        let regions = load("regions", n * spec.regions, spec.dim)?;
        let tokens = load("tokens", n, spec.tokens)?;
        let labels = load("labels", n, 1)?;
        let block = spec.regions * spec.dim;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let feats = regions.data()[i * block..(i + 1) * block].to_vec();
            let ids = tokens.row_slice(i)
                .iter()
                .map(|&v| as_index(v, spec.vocab, "token"))
                .collect::<Result<Vec<_>>>()?;
            out.push(Instance {
                regions: RegionSet::new(Tensor::matrix(spec.regions, spec.dim, feats)?)?,
                tokens: TokenSeq::new(ids)?,
                label: as_index(labels.data()[i], spec.classes, "label")?,
            });
        }
        splits.push(out);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    // prototypes are not stored; regenerate them from the spec
    let prototypes = generate_dataset(&spec)?.prototypes;
    let ds = SyntheticDataset {
        spec,
        train,
        val,
        test,
        prototypes,
    };
    if ds.fingerprint() != manifest.fingerprint {
        return Err(Error::Format(format!(
            "{}: fingerprint mismatch (manifest {}, data {})",
            dir.display(),
            manifest.fingerprint,
            ds.fingerprint()
        )));
    }
    Ok(ds)
}

/// Class-distinct batches for one epoch: each round takes one unused
/// instance from every class in a shuffled class order, and rounds are cut
/// into batches of `batch_size`. A trailing chunk of one instance is
/// dropped.
pub fn class_distinct_batches<R: Rng + ?Sized>(
    items: &[Instance],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let classes = items.iter().map(|i| i.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (idx, inst) in items.iter().enumerate() {
        by_class[inst.label].push(idx);
    }
    for pool in &mut by_class {
        pool.shuffle(rng);
    }
    let mut batches = Vec::new();
    let mut round = 0;
    loop {
        let mut order: Vec<usize> = (0..classes).filter(|&c| by_class[c].len() > round).collect();
        if order.is_empty() {
            break;
        }
        order.shuffle(rng);
        let picks: Vec<usize> = order.iter().map(|&c| by_class[c][round]).collect();
        for chunk in picks.chunks(batch_size) {
            if chunk.len() >= 2 {
                batches.push(chunk.to_vec());
            }
        }
        round += 1;
    }
    batches.shuffle(rng);
    batches
}
