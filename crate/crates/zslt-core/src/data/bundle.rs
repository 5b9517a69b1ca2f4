//! Dataset assembly and validation.
//!
//! A dataset on disk is: a directory of per-image ZSLT grid tensors
//! (`<image_id>.zslt`, rank 3, H×W×C0), a class-semantics ZSLT matrix with a
//! `.names` sidecar, an attribute-vocabulary ZSLT matrix with a `.names`
//! sidecar, and one split file mixing class lines
//! (`class_name<TAB>{seen|unseen}`) and image lines
//! (`image_id<TAB>class_name<TAB>{train|test}`).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::avt::AttributeVocabulary;
use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::objectives::ClassSemanticBank;

use super::zslt_file::load_tensor_file;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    TrainSeen,
    TestSeen,
    TestUnseen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord<T> {
    pub id: String,
    pub class: usize,
    pub split: Split,
    /// K×C0 grid features (rows are H·W cells, row-major).
    pub grid: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle<T> {
    pub images: Vec<ImageRecord<T>>,
    pub bank: ClassSemanticBank<T>,
    pub vocab: AttributeVocabulary<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl<T: Scalar> DatasetBundle<T> {
    pub fn attributes(&self) -> usize {
        self.bank.num_attributes()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].split == split)
            .collect()
    }

    /// Enforces the cross-field invariants shared by loaded and synthetic data.
    pub fn validate(&self) -> Result<()> {
        if self.bank.num_attributes() != self.vocab.count() {
            return Err(Error::Data(format!(
                "semantics have {} attributes but the vocabulary has {} rows",
                self.bank.num_attributes(),
                self.vocab.count()
            )));
        }
        if self.bank.unseen_indices().is_empty() {
            return Err(Error::Data("dataset has no unseen classes".into()));
        }
        let k = self.grid_h * self.grid_w;
        let mut samples_per_class = vec![0usize; self.bank.num_classes()];
        for img in &self.images {
            if img.grid.shape() != [k, self.channels] {
                return Err(Error::Data(format!(
                    "image {} grid shape {:?}, expected [{k}, {}]",
                    img.id,
                    img.grid.shape(),
                    self.channels
                )));
            }
            if img.class >= self.bank.num_classes() {
                return Err(Error::Data(format!("image {} has class {} out of range", img.id, img.class)));
            }
            samples_per_class[img.class] += 1;
            let seen = self.bank.seen_mask[img.class];
            match img.split {
                Split::TrainSeen | Split::TestSeen if !seen => {
                    return Err(Error::Data(format!(
                        "image {} is in a seen split but class {} is unseen",
                        img.id, self.bank.class_names[img.class]
                    )));
                }
                Split::TestUnseen if seen => {
                    return Err(Error::Data(format!(
                        "image {} is test-unseen but class {} is seen",
                        img.id, self.bank.class_names[img.class]
                    )));
                }
                _ => {}
            }
        }
        for (c, &n) in samples_per_class.iter().enumerate() {
            if n == 0 {
                return Err(Error::Data(format!(
                    "class {} has no samples",
                    self.bank.class_names[c]
                )));
            }
        }
        Ok(())
    }

    /// One-line description used by loaders and the CLI.
    pub fn summary(&self) -> String {
        format!(
            "{} classes ({} seen / {} unseen), {} attributes, {} images, grid {}x{}x{}",
            self.bank.num_classes(),
            self.bank.seen_indices().len(),
            self.bank.unseen_indices().len(),
            self.attributes(),
            self.images.len(),
            self.grid_h,
            self.grid_w,
            self.channels
        )
    }
}

fn sidecar_names(path: &Path) -> Result<Vec<String>> {
    let names_path: PathBuf = path.with_extension("names");
    let text = fs::read_to_string(&names_path).map_err(|e| {
        Error::Data(format!("cannot read name sidecar {}: {e}", names_path.display()))
    })?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Data(format!("name sidecar {} is empty", names_path.display())));
    }
    Ok(names)
}

struct SplitFile {
    /// class name → seen?
    class_flags: Vec<(String, bool)>,
    /// (image_id, class name, is_train)
    images: Vec<(String, String, bool)>,
}

fn parse_split_file(path: &Path) -> Result<SplitFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read split file {}: {e}", path.display())))?;
    let mut class_flags = Vec::new();
    let mut images = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            [class, flag] => {
                let seen = match *flag {
                    "seen" => true,
                    "unseen" => false,
                    other => {
                        return Err(Error::Data(format!(
                            "split line {}: class flag must be seen|unseen, got {other:?}",
                            lineno + 1
                        )))
                    }
                };
                class_flags.push((class.to_string(), seen));
            }
            [image, class, split] => {
                let train = match *split {
                    "train" => true,
                    "test" => false,
                    other => {
                        return Err(Error::Data(format!(
                            "split line {}: image split must be train|test, got {other:?}",
                            lineno + 1
                        )))
                    }
                };
                images.push((image.to_string(), class.to_string(), train));
            }
            _ => {
                return Err(Error::Data(format!(
                    "split line {}: expected 2 or 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )))
            }
        }
    }
    Ok(SplitFile { class_flags, images })
}

/// Loads and cross-validates a dataset from its four on-disk pieces.
pub fn assemble_dataset<T: Scalar>(
    feature_dir: &Path,
    semantics_file: &Path,
    vocab_file: &Path,
    split_file: &Path,
) -> Result<DatasetBundle<T>> {
    let semantics = load_tensor_file::<T>(semantics_file)?;
    let class_names = sidecar_names(semantics_file)?;
    if semantics.rank() != 2 || semantics.rows() != class_names.len() {
        return Err(Error::Data(format!(
            "semantics matrix is {:?} but the sidecar lists {} classes",
            semantics.shape(),
            class_names.len()
        )));
    }
    let vocab_features = load_tensor_file::<T>(vocab_file)?;
    let attr_names = sidecar_names(vocab_file)?;
    if vocab_features.rank() != 2 || vocab_features.rows() != attr_names.len() {
        return Err(Error::Data(format!(
            "vocabulary matrix is {:?} but the sidecar lists {} attributes",
            vocab_features.shape(),
            attr_names.len()
        )));
    }
    if semantics.cols() != vocab_features.rows() {
        return Err(Error::Data(format!(
            "inconsistent attribute count: semantics give A={}, vocabulary gives A={}",
            semantics.cols(),
            vocab_features.rows()
        )));
    }

    let split = parse_split_file(split_file)?;
    let class_index: HashMap<String, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    let mut seen_mask: Vec<Option<bool>> = vec![None; class_names.len()];
    for (name, seen) in &split.class_flags {
        let idx = *class_index.get(name).ok_or_else(|| {
            Error::Data(format!("split file flags unknown class {name:?}"))
        })?;
        match seen_mask[idx] {
            None => seen_mask[idx] = Some(*seen),
            Some(prev) if prev == *seen => {}
            Some(_) => {
                return Err(Error::Data(format!(
                    "class {name:?} is listed as both seen and unseen"
                )))
            }
        }
    }
    let seen_mask: Vec<bool> = seen_mask
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.ok_or_else(|| Error::Data(format!("class {:?} has no seen/unseen flag", class_names[i]))))
        .collect::<Result<_>>()?;

    let bank = ClassSemanticBank::new(semantics, seen_mask, class_names)?;
    let vocab = AttributeVocabulary::new(vocab_features, attr_names)?;

    let mut images = Vec::with_capacity(split.images.len());
    let mut grid_shape: Option<(usize, usize, usize)> = None;
    for (image_id, class_name, train) in &split.images {
        let class = *class_index.get(class_name).ok_or_else(|| {
            Error::Data(format!("image {image_id} references unknown class {class_name:?}"))
        })?;
        let seen = bank.seen_mask[class];
        let split = match (train, seen) {
            (true, true) => Split::TrainSeen,
            (false, true) => Split::TestSeen,
            (false, false) => Split::TestUnseen,
            (true, false) => {
                return Err(Error::Data(format!(
                    "image {image_id} trains on unseen class {class_name:?}"
                )))
            }
        };
        let path = feature_dir.join(format!("{image_id}.zslt"));
        if !path.exists() {
            return Err(Error::Data(format!("missing image feature file {}", path.display())));
        }
        let raw = load_tensor_file::<T>(&path)?;
        if raw.rank() != 3 {
            return Err(Error::Data(format!(
                "image {image_id} features must be rank-3 HxWxC, got {:?}",
                raw.shape()
            )));
        }
        let (h, w, c) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
        match grid_shape {
            None => grid_shape = Some((h, w, c)),
            Some(expect) if expect == (h, w, c) => {}
            Some((eh, ew, ec)) => {
                return Err(Error::Data(format!(
                    "image {image_id} grid {h}x{w}x{c} differs from {eh}x{ew}x{ec}"
                )))
            }
        }
        images.push(ImageRecord {
            id: image_id.clone(),
            class,
            split,
            grid: raw.reshaped(vec![h * w, c])?,
        });
    }
    let (grid_h, grid_w, channels) =
        grid_shape.ok_or_else(|| Error::Data("split file lists no images".into()))?;

    let bundle = DatasetBundle {
        images,
        bank,
        vocab,
        grid_h,
        grid_w,
        channels,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a bundle out in the on-disk dataset layout `assemble_dataset`
/// reads: `features/<id>.zslt`, `semantics.zslt(.names)`, `vocab.zslt(.names)`,
/// and `split.tsv`.
pub fn write_bundle_to_dir<T: Scalar>(bundle: &DatasetBundle<T>, dir: &Path) -> Result<()> {
    use std::io::Write as _;

    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir)?;
    super::zslt_file::save_tensor_file(&dir.join("semantics.zslt"), &bundle.bank.semantics)?;
    fs::write(dir.join("semantics.names"), bundle.bank.class_names.join("\n") + "\n")?;
    super::zslt_file::save_tensor_file(&dir.join("vocab.zslt"), &bundle.vocab.features)?;
    fs::write(dir.join("vocab.names"), bundle.vocab.names.join("\n") + "\n")?;

    let mut split = fs::File::create(dir.join("split.tsv"))?;
    for (c, name) in bundle.bank.class_names.iter().enumerate() {
        writeln!(
            split,
            "{name}\t{}",
            if bundle.bank.seen_mask[c] { "seen" } else { "unseen" }
        )?;
    }
    for img in &bundle.images {
        let grid3 = img
            .grid
            .reshaped(vec![bundle.grid_h, bundle.grid_w, bundle.channels])?;
        super::zslt_file::save_tensor_file(&feature_dir.join(format!("{}.zslt", img.id)), &grid3)?;
        let flag = match img.split {
            Split::TrainSeen => "train",
            Split::TestSeen | Split::TestUnseen => "test",
        };
        writeln!(split, "{}\t{}\t{flag}", img.id, bundle.bank.class_names[img.class])?;
    }
    Ok(())
}
