//! Dataset manifests, sol-ordered splits and instrument-conditional augmentation.
//!
//! A manifest is a comma-separated text file with one record per line:
//!
//! ```text
//! # path, class_name, instrument, sol[, split]
//! images/0003ML0000000110100031E01_DRCL.png, drt, MASTCAM, 3, train
//! images/0105MH0001190000101126E01_DRCL.png, wheel, MAHLI, 105
//! ```
//!
//! Lines starting with `#` are comments. Paths are resolved relative to the
//! manifest's directory and the image id is the file stem. When a
//! `classes.txt` file (one class name per line, line order = label index)
//! sits next to the manifest it fixes the class list and rows naming any
//! other class are rejected; otherwise classes are numbered in order of first
//! appearance.

mod augment;
mod loader;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{apply_variant, augment, AugmentationRecipe, Variant};
pub use loader::{images_to_tensor, ImageLoader, IMAGENET_MEAN, IMAGENET_STD};

/// File that pins the class list when it sits next to a manifest.
pub const CLASSES_FILE: &str = "classes.txt";

/// Class list of the MSL surface dataset (v2.1), in label order.
pub const MSL_SURFACE_CLASSES: [&str; 19] = [
    "arm cover",
    "other rover part",
    "artifact",
    "nearby surface",
    "close-up rock",
    "drt",
    "drt spot",
    "distant landscape",
    "drill hole",
    "night sky",
    "float",
    "layers",
    "light-toned veins",
    "mastcam cal target",
    "sand",
    "sun",
    "wheel",
    "wheel joint",
    "wheel tracks",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Instrument {
    Mahli,
    Mastcam,
    Other,
}

impl FromStr for Instrument {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MAHLI" | "MH" => Ok(Instrument::Mahli),
            "MASTCAM" | "ML" | "MR" => Ok(Instrument::Mastcam),
            "OTHER" => Ok(Instrument::Other),
            other => Err(format!("unknown instrument `{other}`")),
        }
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Instrument::Mahli => "MAHLI",
            Instrument::Mastcam => "MASTCAM",
            Instrument::Other => "OTHER",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
    pub instrument: Instrument,
    pub sol: u32,
    /// `None` until a split has been assigned, either by the manifest or by [`sol_split`].
    pub split: Option<Split>,
}

/// Per-class image counts: one column per split plus a column for unassigned entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unassigned: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test + self.unassigned
    }

    pub fn get(&self, split: Option<Split>) -> usize {
        match split {
            Some(Split::Train) => self.train,
            Some(Split::Val) => self.val,
            Some(Split::Test) => self.test,
            None => self.unassigned,
        }
    }

    fn bump(&mut self, split: Option<Split>) {
        match split {
            Some(Split::Train) => self.train += 1,
            Some(Split::Val) => self.val += 1,
            Some(Split::Test) => self.test += 1,
            None => self.unassigned += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    entries: Vec<ImageEntry>,
    class_names: Vec<String>,
    counts: Vec<SplitCounts>,
}

impl DatasetIndex {
    /// Validates and indexes `entries`. Labels must address `class_names`,
    /// class names must be unique and image ids must not repeat.
    pub fn new(entries: Vec<ImageEntry>, class_names: Vec<String>) -> Result<Self> {
        let mut seen_classes = HashSet::new();
        for name in &class_names {
            if !seen_classes.insert(name.as_str()) {
                return Err(Error::Dataset(format!("duplicate class name `{name}`")));
            }
        }
        let mut ids = HashSet::new();
        let mut counts = vec![SplitCounts::default(); class_names.len()];
        for entry in &entries {
            if entry.label >= class_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: entry.label,
                    classes: class_names.len(),
                });
            }
            if class_names[entry.label] != entry.class_name {
                return Err(Error::Dataset(format!(
                    "image `{}` has label {} but class name `{}`",
                    entry.image_id, entry.label, entry.class_name
                )));
            }
            if !ids.insert(entry.image_id.as_str()) {
                return Err(Error::DuplicateImageId(entry.image_id.clone()));
            }
            counts[entry.label].bump(entry.split);
        }
        Ok(Self {
            entries,
            class_names,
            counts,
        })
    }

    pub fn entries(&self) -> &[ImageEntry] {
        &self.entries
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts_per_class(&self) -> &[SplitCounts] {
        &self.counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.counts.iter().map(|c| c.get(Some(split))).sum()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Human-readable table of per-class counts.
    pub fn stats_table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(|c| c.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!(
            "{:<width$}  {:>7} {:>7} {:>7} {:>10} {:>7}\n",
            "class", "train", "val", "test", "unassigned", "total"
        );
        let mut total = SplitCounts::default();
        for (name, c) in self.class_names.iter().zip(&self.counts) {
            out.push_str(&format!(
                "{:<width$}  {:>7} {:>7} {:>7} {:>10} {:>7}\n",
                name,
                c.train,
                c.val,
                c.test,
                c.unassigned,
                c.total()
            ));
            total.train += c.train;
            total.val += c.val;
            total.test += c.test;
            total.unassigned += c.unassigned;
        }
        out.push_str(&format!(
            "{:<width$}  {:>7} {:>7} {:>7} {:>10} {:>7}\n",
            "all",
            total.train,
            total.val,
            total.test,
            total.unassigned,
            total.total()
        ));
        out
    }
}

/// Reads a manifest. See the module docs for the format.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let classes_path = base.join(CLASSES_FILE);
    let declared = if classes_path.is_file() {
        let raw = std::fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
        Some(
            raw.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    parse_manifest(&text, &base, declared)
}

/// Parses manifest text; `base` resolves relative image paths.
pub fn parse_manifest(
    text: &str,
    base: &Path,
    declared_classes: Option<Vec<String>>,
) -> Result<DatasetIndex> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let fixed_classes = declared_classes.is_some();
    let mut class_names = declared_classes.unwrap_or_default();
    let mut class_lookup: HashMap<String, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), i))
        .collect();
    let mut entries = Vec::new();

    for record in reader.records() {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let bad = |message: String| Error::ManifestRow { row, message };
        if record.len() < 4 || record.len() > 5 {
            return Err(bad(format!(
                "expected 4 or 5 fields (path, class_name, instrument, sol[, split]), found {}",
                record.len()
            )));
        }
        let rel = &record[0];
        if rel.is_empty() {
            return Err(bad("missing image path".into()));
        }
        let class_name = record[1].to_string();
        if class_name.is_empty() {
            return Err(bad("missing class name".into()));
        }
        let instrument = record[2].parse::<Instrument>().map_err(bad)?;
        let sol_field = &record[3];
        if sol_field.is_empty() {
            return Err(bad("missing sol".into()));
        }
        let sol = sol_field
            .parse::<u32>()
            .map_err(|_| bad(format!("sol `{sol_field}` is not a non-negative integer")))?;
        let split = match record.get(4) {
            Some(s) if !s.is_empty() => Some(s.parse::<Split>().map_err(bad)?),
            _ => None,
        };

        let label = match class_lookup.get(&class_name) {
            Some(&l) => l,
            None if fixed_classes => {
                return Err(Error::UnknownClass {
                    row,
                    name: class_name,
                })
            }
            None => {
                class_names.push(class_name.clone());
                class_lookup.insert(class_name.clone(), class_names.len() - 1);
                class_names.len() - 1
            }
        };

        let rel_path = PathBuf::from(rel);
        let image_id = rel_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| bad(format!("cannot derive an image id from `{rel}`")))?
            .to_string();
        let path = if rel_path.is_absolute() {
            rel_path
        } else {
            base.join(rel_path)
        };
        entries.push(ImageEntry {
            image_id,
            path,
            label,
            class_name,
            instrument,
            sol,
            split,
        });
    }

    DatasetIndex::new(entries, class_names)
}

/// Writes `index` as a manifest (and its `classes.txt`) into `path`'s directory.
/// Image paths are written relative to that directory when possible.
pub fn write_manifest(index: &DatasetIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    let abs_base = cwd.join(&base);
    let mut out = String::from("# path, class_name, instrument, sol, split\n");
    for e in index.entries() {
        let abs = cwd.join(&e.path);
        let shown = abs.strip_prefix(&abs_base).unwrap_or(&abs);
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        wtr.write_record([
            shown.to_string_lossy().as_ref(),
            e.class_name.as_str(),
            &e.instrument.to_string(),
            &e.sol.to_string(),
            &e.split.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
        let line = wtr
            .into_inner()
            .map_err(|e| Error::Dataset(e.to_string()))?;
        out.push_str(&String::from_utf8_lossy(&line));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let classes = base.join(CLASSES_FILE);
    let mut listing = index.class_names().join("\n");
    listing.push('\n');
    std::fs::write(&classes, listing).map_err(|e| Error::io(&classes, e))?;
    Ok(())
}

/// Chronological split: entries are ordered by sol, the earliest sols go to
/// TRAIN, then VAL, then TEST. A sol is never divided between two splits; a
/// sol group that would cross a boundary moves whole into the later split.
pub fn sol_split(index: &DatasetIndex, val_fraction: f64, test_fraction: f64) -> Result<DatasetIndex> {
    if !(val_fraction > 0.0 && test_fraction > 0.0 && val_fraction + test_fraction < 1.0) {
        return Err(Error::Split(format!(
            "fractions must be positive with sum below 1 (got val {val_fraction}, test {test_fraction})"
        )));
    }
    let n = index.len() as f64;
    let train_cut = (1.0 - val_fraction - test_fraction) * n;
    let val_cut = (1.0 - test_fraction) * n;
    const SLACK: f64 = 1e-9;

    let mut by_sol: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in index.entries().iter().enumerate() {
        by_sol.entry(e.sol).or_default().push(i);
    }

    let mut assigned = vec![Split::Test; index.len()];
    let mut cumulative = 0usize;
    for members in by_sol.values() {
        cumulative += members.len();
        let c = cumulative as f64;
        let split = if c <= train_cut + SLACK {
            Split::Train
        } else if c <= val_cut + SLACK {
            Split::Val
        } else {
            Split::Test
        };
        for &i in members {
            assigned[i] = split;
        }
    }

    for split in Split::ALL {
        if !assigned.contains(&split) {
            return Err(Error::Split(format!(
                "the {split} split would be empty ({} entries over {} distinct sols)",
                index.len(),
                by_sol.len()
            )));
        }
    }

    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by_key(|&i| (index.entries()[i].sol, i));
    let entries = order
        .into_iter()
        .map(|i| ImageEntry {
            split: Some(assigned[i]),
            ..index.entries()[i].clone()
        })
        .collect();
    DatasetIndex::new(entries, index.class_names().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetIndex> {
        parse_manifest(text, Path::new("/data"), None)
    }

    fn with_sols(sols: &[u32]) -> DatasetIndex {
        let text: String = sols
            .iter()
            .enumerate()
            .map(|(i, s)| format!("img{i}.png, sun, MASTCAM, {s}\n"))
            .collect();
        parse(&text).unwrap()
    }

    #[test]
    fn minimal_manifest() {
        let idx = parse("a.png, sun, MASTCAM, 3\nb.png, drt, MAHLI, 4\n").unwrap();
        assert_eq!(idx.num_classes(), 2);
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.class_names(), ["sun", "drt"]);
        assert_eq!(idx.entries()[0].image_id, "a");
        assert_eq!(idx.entries()[1].path, PathBuf::from("/data/b.png"));
        assert_eq!(idx.entries()[1].instrument, Instrument::Mahli);
    }

    #[test]
    fn missing_sol_names_the_row() {
        let err = parse("# header\na.png, sun, MASTCAM, 3\nb.png, drt, MAHLI,\n").unwrap_err();
        match err {
            Error::ManifestRow { row, message } => {
                assert_eq!(row, 3);
                assert!(message.contains("sol"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_image_id_rejected() {
        let err = parse("x/a.png, sun, MASTCAM, 3\ny/a.jpg, sun, MASTCAM, 4\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateImageId(id) if id == "a"));
    }

    #[test]
    fn unknown_class_with_declared_list() {
        let err = parse_manifest(
            "a.png, sun, MASTCAM, 3\nb.png, comet, MASTCAM, 3\n",
            Path::new("."),
            Some(vec!["sun".into(), "drt".into()]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownClass { row: 2, ref name } if name == "comet"));
    }

    #[test]
    fn reference_class_list_has_nineteen_classes() {
        let classes: Vec<String> = MSL_SURFACE_CLASSES.iter().map(|s| s.to_string()).collect();
        let idx = parse_manifest(
            "a.png, sun, MASTCAM, 3, train\nb.png, night sky, MASTCAM, 9, test\n",
            Path::new("."),
            Some(classes),
        )
        .unwrap();
        assert_eq!(idx.num_classes(), 19);
        assert_eq!(idx.entries()[1].label, 9);
        assert_eq!(idx.split_len(Split::Test), 1);
    }

    #[test]
    fn counts_sum_to_entries() {
        let idx = parse("a.png, sun, MASTCAM, 3, train\nb.png, drt, MAHLI, 4\nc.png, sun, OTHER, 5, val\n").unwrap();
        let total: usize = idx.counts_per_class().iter().map(SplitCounts::total).sum();
        assert_eq!(total, idx.len());
        assert_eq!(idx.counts_per_class()[0].train, 1);
        assert_eq!(idx.counts_per_class()[1].unassigned, 1);
    }

    #[test]
    fn bad_field_count() {
        assert!(matches!(
            parse("a.png, sun, MASTCAM\n"),
            Err(Error::ManifestRow { row: 1, .. })
        ));
    }

    #[test]
    fn sol_split_hand_partition() {
        let idx = with_sols(&[5, 3, 1, 4, 2]);
        let split = sol_split(&idx, 0.2, 0.2).unwrap();
        let sols_of = |s: Split| split.split(s).map(|e| e.sol).collect::<Vec<_>>();
        assert_eq!(sols_of(Split::Train), vec![1, 2, 3]);
        assert_eq!(sols_of(Split::Val), vec![4]);
        assert_eq!(sols_of(Split::Test), vec![5]);
    }

    #[test]
    fn sol_split_single_sol_fails() {
        let idx = with_sols(&[7, 7, 7, 7]);
        assert!(matches!(sol_split(&idx, 0.2, 0.2), Err(Error::Split(_))));
    }

    #[test]
    fn sol_split_moves_whole_sol_to_later_split() {
        // sols 1,2,3,3: train cut at 2.4 entries, so sol 3 cannot stay in train.
        let idx = with_sols(&[1, 2, 3, 3, 4]);
        let split = sol_split(&idx, 0.2, 0.2).unwrap();
        let sols_of = |s: Split| split.split(s).map(|e| e.sol).collect::<Vec<_>>();
        assert_eq!(sols_of(Split::Train), vec![1, 2]);
        assert_eq!(sols_of(Split::Val), vec![3, 3]);
        assert_eq!(sols_of(Split::Test), vec![4]);
    }

    #[test]
    fn sol_split_rejects_bad_fractions() {
        let idx = with_sols(&[1, 2, 3]);
        assert!(sol_split(&idx, 0.0, 0.2).is_err());
        assert!(sol_split(&idx, 0.5, 0.5).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = parse_manifest(
            "a.png, night sky, MASTCAM, 3, train\nb.png, drt, MAHLI, 4, val\n",
            dir.path(),
            None,
        )
        .unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&idx, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn manifest_moved_to_other_directory() {
        let dir = tempfile::tempdir().unwrap();
        let idx = parse_manifest("imgs/a.png, drt, MAHLI, 4, val\n", dir.path(), None).unwrap();
        let path = dir.path().join("run").join("m.csv");
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_manifest(&idx, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.entries()[0].path, dir.path().join("imgs/a.png"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn train_precedes_holdout(sols in proptest::collection::vec(0u32..40, 5..60)) {
                let idx = with_sols(&sols);
                if let Ok(split) = sol_split(&idx, 0.2, 0.2) {
                    let max_train = split.split(Split::Train).map(|e| e.sol).max().unwrap();
                    let min_hold = split
                        .entries()
                        .iter()
                        .filter(|e| e.split != Some(Split::Train))
                        .map(|e| e.sol)
                        .min()
                        .unwrap();
                    prop_assert!(max_train <= min_hold);
                    let max_val = split.split(Split::Val).map(|e| e.sol).max().unwrap();
                    let min_test = split.split(Split::Test).map(|e| e.sol).min().unwrap();
                    prop_assert!(max_val < min_test);
                    prop_assert_eq!(split.len(), idx.len());
                    prop_assert_eq!(sol_split(&idx, 0.2, 0.2).unwrap(), split);
                }
            }
        }
    }
}
