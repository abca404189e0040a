//! Hierarchically labelled image datasets.
//!
//! Binary layout (little-endian): magic `HPDS`, `u32` schema version, `u16`
//! superclass count, `u16`-length-prefixed UTF-8 names, `u16` fine-class
//! count, names, one `u16` coarse index per fine class, `u32` record count,
//! then per record `u16` fine label, `u16` coarse label, `u16`×3 image dims
//! (C, H, W) and raw `f64` pixels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::probe::HierarchyPartition;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HPDS";
pub const SCHEMA_VERSION: u32 = 1;

/// A ChaCha stream keyed by `seed`; distinct `stream` values never overlap.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Superclass and fine-class names with a total, surjective fine→coarse map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchySpec {
    superclass_names: Vec<String>,
    fine_names: Vec<String>,
    coarse_of: Vec<usize>,
}

impl HierarchySpec {
    pub fn new(superclass_names: Vec<String>, fine_names: Vec<String>, coarse_of: Vec<usize>) -> Result<Self> {
        if fine_names.len() != coarse_of.len() {
            return Err(Error::contract(format!(
                "{} fine names but {} map entries",
                fine_names.len(),
                coarse_of.len()
            )));
        }
        let mut hit = vec![false; superclass_names.len()];
        for (fine, &c) in coarse_of.iter().enumerate() {
            *hit.get_mut(c)
                .ok_or_else(|| Error::contract(format!("fine class {fine} maps to unknown superclass {c}")))? = true;
        }
        if let Some(empty) = hit.iter().position(|h| !h) {
            return Err(Error::contract(format!("superclass {empty} has no fine classes")));
        }
        Ok(Self {
            superclass_names,
            fine_names,
            coarse_of,
        })
    }

    pub fn num_coarse(&self) -> usize {
        self.superclass_names.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn superclass_names(&self) -> &[String] {
        &self.superclass_names
    }

    pub fn fine_names(&self) -> &[String] {
        &self.fine_names
    }

    pub fn coarse_map(&self) -> &[usize] {
        &self.coarse_of
    }

    pub fn coarse_of(&self, fine: usize) -> Option<usize> {
        self.coarse_of.get(fine).copied()
    }

    /// Fine classes of superclass `coarse`, ascending.
    pub fn members(&self, coarse: usize) -> Vec<usize> {
        (0..self.num_fine()).filter(|&f| self.coarse_of[f] == coarse).collect()
    }

    pub fn partition(&self) -> HierarchyPartition {
        HierarchyPartition::from_coarse_map(&self.coarse_of).expect("map is total and surjective")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Fine,
    Coarse,
}

/// One labelled image. `id` identifies the record across splits and batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: usize,
    pub fine: usize,
    pub coarse: usize,
    pub pixels: Vec<f64>,
}

/// A mini-batch: `N×C×H×W` inputs with one label and record id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalDataset {
    hierarchy: HierarchySpec,
    image_dims: [usize; 3],
    records: Vec<Record>,
    split: Split,
}

impl HierarchicalDataset {
    /// Validates every record against the hierarchy and pixel range.
    pub fn new(hierarchy: HierarchySpec, image_dims: [usize; 3], records: Vec<Record>, split: Split) -> Result<Self> {
        let len: usize = image_dims.iter().product();
        if len == 0 {
            return Err(Error::contract("image dims must be positive"));
        }
        for (i, r) in records.iter().enumerate() {
            check_record(&hierarchy, len, r).map_err(|msg| Error::Record {
                index: i,
                offset: 0,
                msg,
            })?;
        }
        Ok(Self {
            hierarchy,
            image_dims,
            records,
            split,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn hierarchy(&self) -> &HierarchySpec {
        &self.hierarchy
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self, kind: LabelKind) -> usize {
        match kind {
            LabelKind::Fine => self.hierarchy.num_fine(),
            LabelKind::Coarse => self.hierarchy.num_coarse(),
        }
    }

    fn label(r: &Record, kind: LabelKind) -> usize {
        match kind {
            LabelKind::Fine => r.fine,
            LabelKind::Coarse => r.coarse,
        }
    }

    pub fn labels(&self, kind: LabelKind) -> Vec<usize> {
        self.records.iter().map(|r| Self::label(r, kind)).collect()
    }

    /// The records at `indices`, in that order, as one batch.
    pub fn gather(&self, indices: &[usize], kind: LabelKind) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let [c, h, w] = self.image_dims;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = &self.records[i];
            data.extend_from_slice(&r.pixels);
            labels.push(Self::label(r, kind));
            ids.push(r.id);
        }
        Ok(Batch {
            inputs: Tensor::new([indices.len(), c, h, w], data)?,
            labels,
            ids,
        })
    }

    /// Every record, in stored order.
    pub fn all(&self, kind: LabelKind) -> Result<Batch> {
        self.gather(&(0..self.len()).collect::<Vec<_>>(), kind)
    }

    /// Mini-batches in stored order, or in a permutation drawn from
    /// `shuffle_seed`. The final partial batch is kept.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>, kind: LabelKind) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order.chunks(batch_size).map(|idx| self.gather(idx, kind)).collect()
    }

    /// Evenly strided selection of at most `n` records, in stored order.
    pub fn strided(&self, n: usize) -> Self {
        let len = self.len();
        let records = if n >= len {
            self.records.clone()
        } else {
            (0..n).map(|i| self.records[i * len / n].clone()).collect()
        };
        Self {
            records,
            ..self.clone()
        }
    }

    /// Records whose fine label has a new index in `new_fine`, relabelled
    /// under `hierarchy`.
    fn select(&self, hierarchy: HierarchySpec, new_fine: &[Option<usize>]) -> Result<Self> {
        let records = self
            .records
            .iter()
            .filter_map(|r| {
                new_fine[r.fine].map(|fine| Record {
                    id: r.id,
                    fine,
                    coarse: r.coarse,
                    pixels: r.pixels.clone(),
                })
            })
            .collect();
        Self::new(hierarchy, self.image_dims, records, self.split)
    }
}

fn check_record(h: &HierarchySpec, len: usize, r: &Record) -> std::result::Result<(), String> {
    let expected = h
        .coarse_of(r.fine)
        .ok_or_else(|| format!("fine label {} out of range for {} classes", r.fine, h.num_fine()))?;
    if r.coarse != expected {
        return Err(format!(
            "coarse label {} does not match map({}) = {expected}",
            r.coarse, r.fine
        ));
    }
    if r.pixels.len() != len {
        return Err(format!("{} pixels, expected {len}", r.pixels.len()));
    }
    if let Some(p) = r.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(format!("pixel value {p} outside [0, 1]"));
    }
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

pub fn encode_dataset(ds: &HierarchicalDataset) -> Vec<u8> {
    let h = &ds.hierarchy;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.num_coarse() as u16).to_le_bytes());
    for n in &h.superclass_names {
        put_name(&mut out, n);
    }
    out.extend_from_slice(&(h.num_fine() as u16).to_le_bytes());
    for n in &h.fine_names {
        put_name(&mut out, n);
    }
    for &c in &h.coarse_of {
        out.extend_from_slice(&(c as u16).to_le_bytes());
    }
    out.extend_from_slice(&(ds.records.len() as u32).to_le_bytes());
    for r in &ds.records {
        out.extend_from_slice(&(r.fine as u16).to_le_bytes());
        out.extend_from_slice(&(r.coarse as u16).to_le_bytes());
        for d in ds.image_dims {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for p in &r.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

fn read_names(r: &mut ByteReader<'_>) -> Result<Vec<String>> {
    let count = r.u16()? as usize;
    (0..count)
        .map(|_| {
            let at = r.offset();
            let len = r.u16()? as usize;
            std::str::from_utf8(r.take(len)?)
                .map(str::to_string)
                .map_err(|_| r.error_at(at, "name is not UTF-8"))
        })
        .collect()
}

/// Parses and fully validates a dataset. Records get ids in file order.
pub fn decode_dataset(bytes: &[u8]) -> Result<HierarchicalDataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(r.error_at(0, "bad magic, expected HPDS"));
    }
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(r.error_at(4, format!("unsupported dataset schema version {version}")));
    }
    let supers = read_names(&mut r)?;
    let fines = read_names(&mut r)?;
    let map_at = r.offset();
    let map = (0..fines.len())
        .map(|_| r.u16().map(usize::from))
        .collect::<Result<Vec<_>>>()?;
    let hierarchy = HierarchySpec::new(supers, fines, map).map_err(|e| r.error_at(map_at, e.to_string()))?;
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(r.error_at(r.offset(), "dataset has no records"));
    }
    let mut dims = None;
    let mut records = Vec::with_capacity(count);
    for index in 0..count {
        let at = r.offset();
        let fine = r.u16()? as usize;
        let coarse = r.u16()? as usize;
        let d = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
        let invalid = |msg: String| Error::Record { index, offset: at, msg };
        let image_dims = *dims.get_or_insert(d);
        if d != image_dims || d.contains(&0) {
            return Err(invalid(format!(
                "image dims {d:?} differ from {image_dims:?} or are empty"
            )));
        }
        let len = d.iter().product();
        let pixels = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let record = Record {
            id: index,
            fine,
            coarse,
            pixels,
        };
        check_record(&hierarchy, len, &record).map_err(invalid)?;
        records.push(record);
    }
    if !r.is_done() {
        return Err(r.error_at(r.offset(), "trailing bytes after last record"));
    }
    HierarchicalDataset::new(hierarchy, dims.expect("count > 0"), records, Split::Train)
}

pub fn save_dataset(ds: &HierarchicalDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

/// Loads a dataset file; the split tag defaults to [`Split::Train`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<HierarchicalDataset> {
    decode_dataset(&fs::read(path)?)
}

/// Parameters of the planted-hierarchy generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub superclasses: usize,
    pub subclasses: usize,
    pub train_per_subclass: usize,
    pub test_per_subclass: usize,
    pub latent_dim: usize,
    pub sigma_super: f64,
    pub sigma_sub: f64,
    pub sigma_noise: f64,
    pub image_dims: [usize; 3],
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two superclasses of four subclasses, 3×8×8 images.
    pub fn desk(seed: u64) -> Self {
        Self {
            superclasses: 2,
            subclasses: 4,
            train_per_subclass: 200,
            test_per_subclass: 50,
            latent_dim: 16,
            sigma_super: 1.0,
            sigma_sub: 0.5,
            sigma_noise: 0.35,
            image_dims: [3, 8, 8],
            seed,
        }
    }

    /// Four superclasses of five subclasses, for subpopulation shift.
    pub fn domain_adaptation(seed: u64) -> Self {
        Self {
            superclasses: 4,
            subclasses: 5,
            train_per_subclass: 100,
            test_per_subclass: 40,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.superclasses,
            self.subclasses,
            self.train_per_subclass,
            self.test_per_subclass,
            self.latent_dim,
        ];
        if counts.contains(&0) || self.image_dims.contains(&0) {
            return Err(Error::contract("synthetic spec counts and dims must be positive"));
        }
        if !(self.sigma_super > self.sigma_sub && self.sigma_sub > 0.0 && self.sigma_noise >= 0.0) {
            return Err(Error::contract(
                "synthetic spec needs sigma_super > sigma_sub > 0 and sigma_noise >= 0",
            ));
        }
        if self.superclasses * self.subclasses > u16::MAX as usize {
            return Err(Error::contract("too many classes for the dataset format"));
        }
        Ok(())
    }

    pub fn hierarchy(&self) -> HierarchySpec {
        let supers = (0..self.superclasses).map(|s| format!("super{s}")).collect();
        let mut fines = Vec::new();
        let mut map = Vec::new();
        for s in 0..self.superclasses {
            for b in 0..self.subclasses {
                fines.push(format!("super{s}_sub{b}"));
                map.push(s);
            }
        }
        HierarchySpec::new(supers, fines, map).expect("generated hierarchy is valid")
    }
}

/// Latent class geometry of a synthetic draw, kept for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGeometry {
    /// One latent mean per fine class, fine-index order.
    pub subclass_means: Vec<Vec<f64>>,
    pub superclass_means: Vec<Vec<f64>>,
}

/// Draws a train and a test split with a planted two-level hierarchy.
pub fn synthesize(spec: &SyntheticSpec) -> Result<(HierarchicalDataset, HierarchicalDataset)> {
    synthesize_with_geometry(spec).map(|(train, test, _)| (train, test))
}

pub fn synthesize_with_geometry(
    spec: &SyntheticSpec,
) -> Result<(HierarchicalDataset, HierarchicalDataset, SyntheticGeometry)> {
    spec.validate()?;
    let hierarchy = spec.hierarchy();
    let l = spec.latent_dim;
    let d: usize = spec.image_dims.iter().product();
    let normal = |sigma: f64| Normal::new(0.0, sigma).expect("finite non-negative sigma");

    let mut rng = seeded_rng(spec.seed, 0);
    let superclass_means: Vec<Vec<f64>> = (0..spec.superclasses)
        .map(|_| normal(spec.sigma_super).sample_iter(&mut rng).take(l).collect())
        .collect();
    let subclass_means: Vec<Vec<f64>> = (0..hierarchy.num_fine())
        .map(|fine| {
            let base = &superclass_means[hierarchy.coarse_map()[fine]];
            base.iter()
                .map(|m| m + normal(spec.sigma_sub).sample(&mut rng))
                .collect()
        })
        .collect();
    let render_sd = 1.0 / (l as f64).sqrt();
    let render: Vec<f64> = normal(render_sd).sample_iter(&mut rng).take(d * l).collect();

    let raw = |count: usize, rng: &mut ChaCha8Rng| -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::with_capacity(count * hierarchy.num_fine());
        for (fine, mean) in subclass_means.iter().enumerate() {
            for _ in 0..count {
                let z: Vec<f64> = mean.iter().map(|m| m + normal(spec.sigma_noise).sample(rng)).collect();
                let img = render
                    .chunks_exact(l)
                    .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum())
                    .collect();
                out.push((fine, img));
            }
        }
        out
    };
    let train_raw = raw(spec.train_per_subclass, &mut seeded_rng(spec.seed, 1));
    let test_raw = raw(spec.test_per_subclass, &mut seeded_rng(spec.seed, 2));

    let (lo, hi) = train_raw
        .iter()
        .chain(&test_raw)
        .flat_map(|(_, img)| img)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let finish = |raw: Vec<(usize, Vec<f64>)>, split| {
        let records = raw
            .into_iter()
            .enumerate()
            .map(|(id, (fine, img))| Record {
                id,
                fine,
                coarse: hierarchy.coarse_map()[fine],
                pixels: img.into_iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect(),
            })
            .collect();
        HierarchicalDataset::new(hierarchy.clone(), spec.image_dims, records, split)
    };
    Ok((
        finish(train_raw, Split::Train)?,
        finish(test_raw, Split::Test)?,
        SyntheticGeometry {
            subclass_means,
            superclass_means,
        },
    ))
}

/// Which fine classes of each superclass go to the source and target domains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubpopulationSplit {
    /// Original fine indices per superclass, ascending.
    pub source: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
    pub seed: u64,
}

impl SubpopulationSplit {
    /// Chooses `source_count` source subclasses per superclass. The choice
    /// depends only on the hierarchy, the count and the seed.
    pub fn choose(hierarchy: &HierarchySpec, source_count: usize, seed: u64) -> Result<Self> {
        if source_count == 0 {
            return Err(Error::contract("source count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut source = Vec::new();
        let mut target = Vec::new();
        for s in 0..hierarchy.num_coarse() {
            let mut members = hierarchy.members(s);
            if members.len() <= source_count {
                return Err(Error::contract(format!(
                    "superclass {s} has {} subclasses, need more than {source_count}",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            let (src, tgt) = members.split_at(source_count);
            let (mut src, mut tgt) = (src.to_vec(), tgt.to_vec());
            src.sort_unstable();
            tgt.sort_unstable();
            source.push(src);
            target.push(tgt);
        }
        Ok(Self { source, target, seed })
    }

    /// Restricts `ds` to one side of the split, re-indexing fine labels
    /// densely in superclass-major order.
    pub fn apply(&self, ds: &HierarchicalDataset, target_side: bool) -> Result<HierarchicalDataset> {
        let h = ds.hierarchy();
        let side = if target_side { &self.target } else { &self.source };
        if side.len() != h.num_coarse() {
            return Err(Error::contract("split does not match the dataset hierarchy"));
        }
        let mut new_fine = vec![None; h.num_fine()];
        let mut names = Vec::new();
        let mut map = Vec::new();
        for (s, members) in side.iter().enumerate() {
            for &f in members {
                if h.coarse_of(f) != Some(s) {
                    return Err(Error::contract(format!("fine class {f} is not in superclass {s}")));
                }
                new_fine[f] = Some(names.len());
                names.push(h.fine_names()[f].clone());
                map.push(s);
            }
        }
        let sub = HierarchySpec::new(h.superclass_names().to_vec(), names, map)?;
        ds.select(sub, &new_fine)
    }
}

/// Splits `ds` into source and target domains that share superclasses but
/// not subclasses.
pub fn subpopulation_split(
    ds: &HierarchicalDataset,
    source_count: usize,
    seed: u64,
) -> Result<(HierarchicalDataset, HierarchicalDataset, SubpopulationSplit)> {
    let split = SubpopulationSplit::choose(ds.hierarchy(), source_count, seed)?;
    Ok((split.apply(ds, false)?, split.apply(ds, true)?, split))
}

/// Layout of CIFAR-style raw binaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarLayout {
    /// One label byte per image.
    Cifar10,
    /// Coarse then fine label byte; the fine byte is used.
    Cifar100,
}

/// Parses a hierarchy file: one superclass per line, comma-separated fine
/// class names, optionally prefixed by `name:`. Blank lines are skipped.
pub fn parse_hierarchy(text: &str, label_names: &[String]) -> Result<HierarchySpec> {
    let mut supers = Vec::new();
    let mut map = vec![usize::MAX; label_names.len()];
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let s = supers.len();
        let (name, members) = match line.split_once(':') {
            Some((name, rest)) => (name.trim().to_string(), rest),
            None => (format!("super{s}"), line),
        };
        for member in members.split(',').map(str::trim).filter(|m| !m.is_empty()) {
            let fine = label_names
                .iter()
                .position(|n| n == member)
                .ok_or_else(|| Error::Config(format!("hierarchy names unknown class `{member}`")))?;
            if map[fine] != usize::MAX {
                return Err(Error::Config(format!("class `{member}` appears in two superclasses")));
            }
            map[fine] = s;
        }
        supers.push(name);
    }
    if let Some(missing) = map.iter().position(|&m| m == usize::MAX) {
        return Err(Error::Config(format!(
            "class `{}` is in no superclass",
            label_names[missing]
        )));
    }
    HierarchySpec::new(supers, label_names.to_vec(), map).map_err(|e| Error::Config(e.to_string()))
}

/// Converts CIFAR-style records (label bytes, then 3072 channel-major
/// `u8` pixels) into a dataset with pixels scaled to `[0, 1]`.
pub fn convert_cifar(raw: &[u8], layout: CifarLayout, hierarchy: HierarchySpec) -> Result<HierarchicalDataset> {
    const PIXELS: usize = 3 * 32 * 32;
    let label_bytes = match layout {
        CifarLayout::Cifar10 => 1,
        CifarLayout::Cifar100 => 2,
    };
    let stride = label_bytes + PIXELS;
    if raw.is_empty() || !raw.len().is_multiple_of(stride) {
        return Err(Error::Format {
            offset: (raw.len() - raw.len() % stride) as u64,
            msg: format!("length {} is not a positive multiple of {stride}", raw.len()),
        });
    }
    let records = raw
        .chunks_exact(stride)
        .enumerate()
        .map(|(id, chunk)| {
            let fine = chunk[label_bytes - 1] as usize;
            let coarse = hierarchy.coarse_of(fine).ok_or_else(|| Error::Record {
                index: id,
                offset: (id * stride) as u64,
                msg: format!("label {fine} has no class name"),
            })?;
            Ok(Record {
                id,
                fine,
                coarse,
                pixels: chunk[label_bytes..].iter().map(|&b| b as f64 / 255.0).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HierarchicalDataset::new(hierarchy, [3, 32, 32], records, Split::Train)
}
