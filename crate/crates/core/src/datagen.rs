//! Synthetic multimodal Gaussian-cluster datasets and their file formats.
//!
//! Every class gets one mean per modality, drawn once from
//! `N(0, class_mean_scale^2 I)`; the second modality's means are shifted by
//! `modality_mean_offset`. Samples are i.i.d. Gaussian around their class
//! mean. Some classes are held out as OOD and appear only in the test split.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::features::{FeatureMatrix, LabeledFeatureSet, ModalitySet, RandomSource};

/// Scalar offsets apply to every coordinate of the second modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanOffset {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl MeanOffset {
    fn at(&self, k: usize) -> f64 {
        match self {
            MeanOffset::Scalar(v) => *v,
            MeanOffset::Vector(v) => v[k],
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            MeanOffset::Scalar(v) => *v == 0.0,
            MeanOffset::Vector(v) => v.iter().all(|&x| x == 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_id_classes: usize,
    pub n_ood_classes: usize,
    pub dim_per_modality: Vec<usize>,
    pub class_mean_scale: f64,
    pub within_class_std: f64,
    pub modality_mean_offset: MeanOffset,
    /// Training rows per ID class.
    pub samples_per_class: usize,
    /// Test rows per class, ID and OOD alike.
    pub test_samples_per_class: usize,
    /// Class indices (over all `n_id_classes + n_ood_classes`) held out as
    /// OOD. `None` holds out the last `n_ood_classes`.
    pub ood_classes: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_id_classes: 6,
            n_ood_classes: 2,
            dim_per_modality: vec![32, 32],
            class_mean_scale: 1.0,
            within_class_std: 1.5,
            modality_mean_offset: MeanOffset::Scalar(0.5),
            samples_per_class: 500,
            test_samples_per_class: 200,
            ood_classes: None,
            seed: 0,
        }
    }
}

/// Whether a class is seen in training or held out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRole {
    Id,
    Ood,
}

impl GeneratorSpec {
    pub fn n_total_classes(&self) -> usize {
        self.n_id_classes + self.n_ood_classes
    }

    /// OOD class indices, sorted.
    pub fn ood_class_indices(&self) -> Vec<usize> {
        let total = self.n_total_classes();
        let mut v = match &self.ood_classes {
            Some(v) => v.clone(),
            None => (self.n_id_classes..total).collect(),
        };
        v.sort_unstable();
        v
    }

    pub fn roles(&self) -> Vec<ClassRole> {
        let ood = self.ood_class_indices();
        (0..self.n_total_classes())
            .map(|c| if ood.contains(&c) { ClassRole::Ood } else { ClassRole::Id })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_id_classes < 2 {
            return arg_err(format!("need at least 2 ID classes, got {}", self.n_id_classes));
        }
        if self.dim_per_modality.is_empty() || self.dim_per_modality.contains(&0) {
            return arg_err("every modality needs at least one dimension");
        }
        if !(self.within_class_std >= 0.0 && self.within_class_std.is_finite()) {
            return arg_err("within_class_std must be finite and >= 0");
        }
        if !(self.class_mean_scale >= 0.0 && self.class_mean_scale.is_finite()) {
            return arg_err("class_mean_scale must be finite and >= 0");
        }
        if self.samples_per_class == 0 {
            return arg_err("samples_per_class must be positive");
        }
        if let MeanOffset::Vector(v) = &self.modality_mean_offset {
            match self.dim_per_modality.get(1) {
                Some(&w) if v.len() == w => {}
                _ => return arg_err("vector offset length must equal the second modality's width"),
            }
        }
        let ood = self.ood_class_indices();
        if ood.len() != self.n_ood_classes || ood.windows(2).any(|w| w[0] == w[1]) {
            return arg_err(format!("expected {} distinct OOD classes, got {ood:?}", self.n_ood_classes));
        }
        if let Some(&c) = ood.iter().find(|&&c| c >= self.n_total_classes()) {
            return arg_err(format!("OOD class {c} out of range"));
        }
        Ok(())
    }
}

/// Reassigns which classes are ID and which are OOD. Class means are keyed
/// by the global class index, so the geometry is unchanged.
pub fn split_roles(spec: &GeneratorSpec, role_map: &[ClassRole]) -> Result<GeneratorSpec> {
    if role_map.len() != spec.n_total_classes() {
        return arg_err(format!(
            "role map covers {} classes, spec has {}",
            role_map.len(),
            spec.n_total_classes()
        ));
    }
    let ood: Vec<usize> = (0..role_map.len()).filter(|&c| role_map[c] == ClassRole::Ood).collect();
    let n_id = role_map.len() - ood.len();
    if n_id < 2 {
        return arg_err(format!("need at least 2 ID classes, got {n_id}"));
    }
    if ood == spec.ood_class_indices() {
        return Ok(spec.clone());
    }
    let mut out = spec.clone();
    out.n_id_classes = n_id;
    out.n_ood_classes = ood.len();
    out.ood_classes = Some(ood);
    Ok(out)
}

/// Class means indexed `[class][modality]`.
pub fn class_means(spec: &GeneratorSpec) -> Vec<Vec<Vec<f64>>> {
    let root = RandomSource::new(spec.seed);
    (0..spec.n_total_classes())
        .map(|c| {
            let mut rng = root.child_indexed("class-mean", c as u64);
            spec.dim_per_modality
                .iter()
                .enumerate()
                .map(|(m, &w)| {
                    (0..w)
                        .map(|k| {
                            let base = spec.class_mean_scale * rng.standard_normal();
                            if m == 1 {
                                base + spec.modality_mean_offset.at(k)
                            } else {
                                base
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub struct GeneratedData {
    pub train: LabeledFeatureSet,
    pub test: LabeledFeatureSet,
}

fn sample_split(
    spec: &GeneratorSpec,
    means: &[Vec<Vec<f64>>],
    classes: &[(usize, Option<usize>)],
    per_class: usize,
    rng: &mut RandomSource,
) -> Result<LabeledFeatureSet> {
    let n_id = spec.n_id_classes;
    let n = classes.len() * per_class;
    let mut blocks: Vec<Vec<f64>> = spec.dim_per_modality.iter().map(|&w| Vec::with_capacity(n * w)).collect();
    let mut labels = Vec::with_capacity(n);
    let mut is_ood = Vec::with_capacity(n);
    for &(class, id_label) in classes {
        for _ in 0..per_class {
            for (m, block) in blocks.iter_mut().enumerate() {
                block.extend(means[class][m].iter().map(|&mu| mu + spec.within_class_std * rng.standard_normal()));
            }
            labels.push(id_label.unwrap_or(n_id));
            is_ood.push(id_label.is_none());
        }
    }
    let blocks = blocks
        .into_iter()
        .zip(&spec.dim_per_modality)
        .map(|(data, &w)| FeatureMatrix::new(n, w, data))
        .collect::<Result<Vec<_>>>()?;
    LabeledFeatureSet::new(ModalitySet::from_blocks(blocks)?, labels, is_ood, n_id)
}

/// Generates the train split (ID classes only) and the test split (ID and
/// OOD classes). ID classes are relabeled `0..n_id` in class-index order;
/// OOD rows carry the sentinel label `n_id`.
pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let means = class_means(spec);
    let mut next = 0;
    let roles: Vec<(usize, Option<usize>)> = spec
        .roles()
        .into_iter()
        .enumerate()
        .map(|(c, r)| match r {
            ClassRole::Id => {
                next += 1;
                (c, Some(next - 1))
            }
            ClassRole::Ood => (c, None),
        })
        .collect();
    let id_only: Vec<_> = roles.iter().copied().filter(|r| r.1.is_some()).collect();
    let root = RandomSource::new(spec.seed);
    let train = sample_split(spec, &means, &id_only, spec.samples_per_class, &mut root.child("train"))?;
    let test = if spec.test_samples_per_class == 0 {
        return arg_err("test_samples_per_class must be positive");
    } else {
        sample_split(spec, &means, &roles, spec.test_samples_per_class, &mut root.child("test"))?
    };
    Ok(GeneratedData { train, test })
}

const DATASET_MAGIC: &[u8; 8] = b"FMIXDATA";
const DATASET_VERSION: u32 = 1;

fn fmt_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset file",
        reason: reason.into(),
    }
}

/// Writes the binary dataset format described in `docs/formats.md`.
pub fn write_dataset(path: &Path, lfs: &LabeledFeatureSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, lfs)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to(w: &mut impl Write, lfs: &LabeledFeatureSet) -> Result<()> {
    let ms = lfs.features();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ms.n_blocks() as u32).to_le_bytes())?;
    w.write_all(&(lfs.n_rows() as u64).to_le_bytes())?;
    w.write_all(&(lfs.n_classes() as u64).to_le_bytes())?;
    for (b, name) in ms.blocks().iter().zip(ms.names()) {
        w.write_all(&(b.n_cols() as u64).to_le_bytes())?;
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    for b in ms.blocks() {
        for v in b.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for (&y, &ood) in lfs.labels().iter().zip(lfs.is_ood()) {
        let code: i32 = if ood { -1 } else { y as i32 };
        w.write_all(&code.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LabeledFeatureSet> {
    read_dataset_from(&mut BufReader::new(File::open(path)?))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => fmt_err("truncated"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_dataset_from(r: &mut impl Read) -> Result<LabeledFeatureSet> {
    if &read_array::<8>(r)? != DATASET_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != DATASET_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let n_blocks = u32::from_le_bytes(read_array(r)?) as usize;
    let n_rows = u64::from_le_bytes(read_array(r)?) as usize;
    let n_classes = u64::from_le_bytes(read_array(r)?) as usize;
    if n_blocks == 0 || n_rows == 0 {
        return Err(fmt_err("empty dataset"));
    }
    let mut widths = Vec::with_capacity(n_blocks);
    let mut names = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        widths.push(u64::from_le_bytes(read_array(r)?) as usize);
        let len = u32::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| fmt_err("truncated name"))?;
        names.push(String::from_utf8(name).map_err(|_| fmt_err("block name is not UTF-8"))?);
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for &w in &widths {
        let mut data = Vec::with_capacity(n_rows * w);
        for _ in 0..n_rows * w {
            data.push(f64::from_le_bytes(read_array(r)?));
        }
        blocks.push(FeatureMatrix::new(n_rows, w, data)?);
    }
    let mut labels = Vec::with_capacity(n_rows);
    let mut is_ood = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let code = i32::from_le_bytes(read_array(r)?);
        if code < -1 {
            return Err(fmt_err(format!("invalid label {code}")));
        }
        is_ood.push(code == -1);
        labels.push(if code == -1 { n_classes } else { code as usize });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(fmt_err("trailing bytes"));
    }
    LabeledFeatureSet::new(ModalitySet::new(blocks, names)?, labels, is_ood, n_classes)
}

/// CSV with one column per feature (`<block>_<k>`), then `label`, `is_ood`.
/// OOD rows have label `-1`.
pub fn write_dataset_csv(w: &mut impl Write, lfs: &LabeledFeatureSet) -> Result<()> {
    let ms = lfs.features();
    let mut header: Vec<String> = Vec::new();
    for (b, name) in ms.blocks().iter().zip(ms.names()) {
        header.extend((0..b.n_cols()).map(|k| format!("{name}_{k}")));
    }
    header.push("label".into());
    header.push("is_ood".into());
    writeln!(w, "{}", header.join(","))?;
    let fm = ms.concat();
    for (i, row) in fm.rows().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let label: i64 = if lfs.is_ood()[i] { -1 } else { lfs.labels()[i] as i64 };
        writeln!(w, "{},{},{}", cells.join(","), label, lfs.is_ood()[i] as u8)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            n_id_classes: 3,
            n_ood_classes: 1,
            dim_per_modality: vec![4, 3],
            samples_per_class: 20,
            test_samples_per_class: 10,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_gives_means() {
        let spec = GeneratorSpec {
            within_class_std: 0.0,
            ..small()
        };
        let data = generate(&spec).unwrap();
        let means = class_means(&spec);
        for (i, &y) in data.train.labels().iter().enumerate() {
            for m in 0..2 {
                assert_eq!(data.train.features().block(m).row(i), means[y][m].as_slice());
            }
        }
    }

    #[test]
    fn deterministic_and_split() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert!(!a.train.has_ood());
        assert_eq!(a.train.n_rows(), 60);
        assert_eq!(a.test.n_rows(), 40);
        assert_eq!(a.test.is_ood().iter().filter(|&&o| o).count(), 10);
    }

    #[test]
    fn offset_moves_second_modality() {
        let base = GeneratorSpec {
            modality_mean_offset: MeanOffset::Scalar(0.0),
            ..small()
        };
        let shifted = GeneratorSpec {
            modality_mean_offset: MeanOffset::Scalar(2.5),
            ..small()
        };
        let (a, b) = (class_means(&base), class_means(&shifted));
        for c in 0..4 {
            assert_eq!(a[c][0], b[c][0]);
            for k in 0..3 {
                assert!((b[c][1][k] - a[c][1][k] - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn role_splits() {
        let spec = GeneratorSpec {
            n_id_classes: 4,
            n_ood_classes: 1,
            ..small()
        };
        assert_eq!(split_roles(&spec, &spec.roles()).unwrap(), spec);
        let mut roles = spec.roles();
        roles.swap(0, 4);
        let swapped = split_roles(&spec, &roles).unwrap();
        assert_eq!((swapped.n_id_classes, swapped.n_ood_classes), (4, 1));
        assert_eq!(swapped.ood_class_indices(), vec![0]);
        for c in 0..5 {
            let mut r = vec![ClassRole::Id; 5];
            r[c] = ClassRole::Ood;
            let s = split_roles(&spec, &r).unwrap();
            generate(&s).unwrap();
        }
        let mut bad = vec![ClassRole::Ood; 5];
        bad[0] = ClassRole::Id;
        assert!(split_roles(&spec, &bad).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let data = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &data.test).unwrap();
        let back = read_dataset_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, data.test);
        assert!(read_dataset_from(&mut &buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_dataset_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn csv_layout() {
        let data = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &data.test).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("m0_0,"));
        assert!(header.ends_with("m1_2,label,is_ood"));
        assert_eq!(lines.count(), 40);
    }

    #[test]
    fn rejects_degenerate_specs() {
        for bad in [
            GeneratorSpec { n_id_classes: 1, ..small() },
            GeneratorSpec { dim_per_modality: vec![4, 0], ..small() },
            GeneratorSpec { within_class_std: -1.0, ..small() },
            GeneratorSpec { ood_classes: Some(vec![9]), ..small() },
            GeneratorSpec { modality_mean_offset: MeanOffset::Vector(vec![1.0]), ..small() },
        ] {
            assert!(generate(&bad).is_err());
        }
    }
}
