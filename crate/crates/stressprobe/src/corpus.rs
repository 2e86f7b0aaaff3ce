//! Benchmark corpus loading and validation.
//!
//! Items live in JSONL, one object per line, so large corpora stream
//! without full-file parsing. Images are referenced by relative path from
//! the corpus root (the JSONL file's directory unless overridden) and are
//! checked for existence at load time. Loaded collections are immutable
//! and safely shareable across threads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single uppercase option label, `A`..`Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(char);

impl Label {
    pub fn new(c: char) -> Result<Self, CorpusError> {
        if c.is_ascii_uppercase() {
            Ok(Label(c))
        } else {
            Err(CorpusError::BadLabel(c.to_string()))
        }
    }

    /// Label for a zero-based option position: 0 -> A, 1 -> B, ...
    pub fn from_index(index: usize) -> Option<Self> {
        if index < 26 {
            Some(Label((b'A' + index as u8) as char))
        } else {
            None
        }
    }

    /// Zero-based option position: A -> 0, B -> 1, ...
    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn as_char(self) -> char {
        self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Label {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::new(c),
            _ => Err(CorpusError::BadLabel(s.to_string())),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One answer option: a label and its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionEntry {
    pub label: Label,
    pub text: String,
}

/// One multiple-choice benchmark question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub benchmark_id: String,
    pub stem: String,
    pub options: Vec<OptionEntry>,
    pub answer_label: Label,
    pub images: Vec<String>,
    pub vision_required: bool,
    /// Marks items excluded by content moderation; protocol runners skip
    /// items with this flag set.
    pub content_filtered: bool,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Item {
    /// The option carrying the correct answer.
    pub fn answer_option(&self) -> &OptionEntry {
        &self.options[self.answer_label.index()]
    }

    /// Text of the correct answer.
    pub fn answer_text(&self) -> &str {
        &self.answer_option().text
    }

    pub fn option_by_label(&self, label: Label) -> Option<&OptionEntry> {
        self.options.iter().find(|o| o.label == label)
    }

    fn validate(&self, root: &Path) -> Result<(), CorpusError> {
        if self.options.len() < 2 {
            return Err(self.invalid("options", "fewer than 2 options"));
        }
        for (i, opt) in self.options.iter().enumerate() {
            let expected = Label::from_index(i)
                .ok_or_else(|| self.invalid("options", "more than 26 options"))?;
            if opt.label != expected {
                return Err(self.invalid(
                    "options",
                    format!(
                        "labels must be consecutive letters from A; position {i} has {} (expected {expected})",
                        opt.label
                    ),
                ));
            }
            if opt.text.is_empty() {
                return Err(self.invalid("options", format!("option {} has empty text", opt.label)));
            }
        }
        // Distinct texts keep "which option was chosen" well defined under
        // relabeling perturbations and text-based answer matching.
        let mut texts: Vec<&str> = self.options.iter().map(|o| o.text.as_str()).collect();
        texts.sort_unstable();
        if texts.windows(2).any(|w| w[0] == w[1]) {
            return Err(self.invalid("options", "duplicate option text"));
        }
        if self.answer_label.index() >= self.options.len() {
            return Err(self.invalid(
                "answer_label",
                format!(
                    "answer_label {} is not among the option labels",
                    self.answer_label
                ),
            ));
        }
        for image in &self.images {
            let path = root.join(image);
            if File::open(&path).is_err() {
                return Err(CorpusError::MissingImage {
                    item_id: self.id.clone(),
                    path,
                });
            }
        }
        Ok(())
    }

    fn invalid(&self, field: &str, message: impl Into<String>) -> CorpusError {
        CorpusError::Invalid {
            item_id: self.id.clone(),
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// A visual-substitution map entry: an alternative image supporting one of
/// the item's distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionEntry {
    pub item_id: String,
    pub substitute_image: String,
    pub aligned_label: Label,
}

/// One clinician rating for one item on one rubric axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub rater_id: String,
    pub axis_id: String,
    /// Ordinal score on the 3-point scale.
    pub score: u8,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("item {item_id}: invalid {field}: {message}")]
    Invalid {
        item_id: String,
        field: String,
        message: String,
    },
    #[error("item {item_id}: missing or unreadable image {path}")]
    MissingImage { item_id: String, path: PathBuf },
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("invalid option label {0:?} (expected a single uppercase letter)")]
    BadLabel(String),
    #[error("substitution map references unknown item id {0}")]
    UnknownItem(String),
    #[error("substitution for item {item_id}: aligned_label {label} {problem}")]
    BadAlignment {
        item_id: String,
        label: Label,
        problem: String,
    },
    #[error("annotation {item_id}/{rater_id}/{axis_id}: {message}")]
    BadAnnotation {
        item_id: String,
        rater_id: String,
        axis_id: String,
        message: String,
    },
    #[error("annotations file {path} has wrong header: expected item_id,rater_id,axis_id,score")]
    BadAnnotationHeader { path: PathBuf },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An immutable, validated item collection plus the root that image paths
/// are resolved against.
#[derive(Debug, Clone)]
pub struct Corpus {
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
    root: PathBuf,
}

impl Corpus {
    /// Load items from a JSONL file; image paths resolve against the
    /// file's parent directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let root = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        Self::load_with_root(path, root)
    }

    /// Load items with an explicit corpus root for image resolution.
    pub fn load_with_root(
        path: impl AsRef<Path>,
        root: impl Into<PathBuf>,
    ) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let root = root.into();
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let reader = BufReader::new(file);

        let mut items = Vec::new();
        let mut by_id = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let item: Item = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            item.validate(&root)?;
            if by_id.insert(item.id.clone(), items.len()).is_some() {
                return Err(CorpusError::DuplicateId(item.id));
            }
            items.push(item);
        }
        Ok(Corpus { items, by_id, root })
    }

    /// Build a corpus from already-validated in-memory items (used by
    /// fixtures and tests). Runs the same validation as `load`.
    pub fn from_items(items: Vec<Item>, root: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let root = root.into();
        let mut by_id = HashMap::new();
        for (idx, item) in items.iter().enumerate() {
            item.validate(&root)?;
            if by_id.insert(item.id.clone(), idx).is_some() {
                return Err(CorpusError::DuplicateId(item.id.clone()));
            }
        }
        Ok(Corpus { items, by_id, root })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items eligible for protocol runs: not excluded by content filtering.
    pub fn protocol_items(&self) -> Vec<&Item> {
        self.items.iter().filter(|i| !i.content_filtered).collect()
    }

    /// Write the items back out as JSONL. Round-trips losslessly with
    /// `load` (metadata keys are ordered, so output bytes are stable).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        write_items(&self.items, path)
    }
}

/// Serialize items as JSONL, one object per line.
pub fn write_items(items: &[Item], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    for item in items {
        let line = serde_json::to_string(item).expect("item serialization cannot fail");
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Raw JSON shape of one substitution map value.
#[derive(Debug, Deserialize)]
struct RawSubstitution {
    substitute_image: String,
    aligned_label: Label,
}

/// Load a visual-substitution map and validate it against the corpus.
///
/// Substitute image paths resolve against the map file's directory.
/// Entries are returned in item-id order so downstream grids are stable.
pub fn load_substitution_map(
    path: impl AsRef<Path>,
    corpus: &Corpus,
) -> Result<Vec<SubstitutionEntry>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let raw: BTreeMap<String, RawSubstitution> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    let map_root = path.parent().unwrap_or_else(|| Path::new("."));

    let mut entries = Vec::with_capacity(raw.len());
    for (item_id, sub) in raw {
        let item = corpus
            .get(&item_id)
            .ok_or_else(|| CorpusError::UnknownItem(item_id.clone()))?;
        if item.option_by_label(sub.aligned_label).is_none() {
            return Err(CorpusError::BadAlignment {
                item_id,
                label: sub.aligned_label,
                problem: "is not an option of the item".to_string(),
            });
        }
        if sub.aligned_label == item.answer_label {
            return Err(CorpusError::BadAlignment {
                item_id,
                label: sub.aligned_label,
                problem: "equals the item's answer label; it must be a distractor".to_string(),
            });
        }
        let image_path = map_root.join(&sub.substitute_image);
        if File::open(&image_path).is_err() {
            return Err(CorpusError::MissingImage {
                item_id,
                path: image_path,
            });
        }
        entries.push(SubstitutionEntry {
            item_id,
            substitute_image: sub.substitute_image,
            aligned_label: sub.aligned_label,
        });
    }
    Ok(entries)
}

/// Load clinician annotations from CSV with header
/// `item_id,rater_id,axis_id,score`, validating against the configured
/// axis set and the 1..=3 score range.
pub fn load_annotations(
    path: impl AsRef<Path>,
    axes: &HashSet<String>,
) -> Result<Vec<AnnotationRecord>, CorpusError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    {
        let headers = reader.headers().map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
        let expected = ["item_id", "rater_id", "axis_id", "score"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(CorpusError::BadAnnotationHeader {
                path: path.to_path_buf(),
            });
        }
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, row) in reader.deserialize::<AnnotationRecord>().enumerate() {
        let record = row.map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: idx + 2,
            message: e.to_string(),
        })?;
        if !(1..=3).contains(&record.score) {
            return Err(CorpusError::BadAnnotation {
                item_id: record.item_id,
                rater_id: record.rater_id,
                axis_id: record.axis_id,
                message: format!("score {} out of range 1..=3", record.score),
            });
        }
        if !axes.contains(&record.axis_id) {
            return Err(CorpusError::BadAnnotation {
                item_id: record.item_id,
                rater_id: record.rater_id,
                axis_id: record.axis_id.clone(),
                message: "unknown axis".to_string(),
            });
        }
        let key = (
            record.item_id.clone(),
            record.rater_id.clone(),
            record.axis_id.clone(),
        );
        if !seen.insert(key) {
            return Err(CorpusError::BadAnnotation {
                item_id: record.item_id,
                rater_id: record.rater_id,
                axis_id: record.axis_id,
                message: "duplicate (item, rater, axis) record".to_string(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use std::fs;

    /// Write a tiny readable file standing in for an image.
    pub fn touch_image(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"\x89PNG\r\n\x1a\n").unwrap();
    }

    /// A synthetic 5-option item. The answer label cycles with `n` so
    /// generated corpora have a roughly uniform answer distribution.
    pub fn synthetic_item(n: usize) -> Item {
        let options = (0..5)
            .map(|i| OptionEntry {
                label: Label::from_index(i).unwrap(),
                text: format!("finding {n}-{i}"),
            })
            .collect();
        Item {
            id: format!("item-{n:04}"),
            benchmark_id: "synthetic".to_string(),
            stem: format!("What is the diagnosis in case {n}?"),
            options,
            answer_label: Label::from_index(n % 5).unwrap(),
            images: Vec::new(),
            vision_required: true,
            content_filtered: false,
            metadata: BTreeMap::new(),
        }
    }

    pub fn synthetic_corpus(n: usize) -> Corpus {
        let items = (0..n).map(synthetic_item).collect();
        Corpus::from_items(items, ".").unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::tempdir;

    fn item_line(id: &str, answer: &str) -> String {
        format!(
            r#"{{"id":"{id}","benchmark_id":"bench","stem":"What is shown?","options":[{{"label":"A","text":"alpha"}},{{"label":"B","text":"beta"}},{{"label":"C","text":"gamma"}},{{"label":"D","text":"delta"}},{{"label":"E","text":"epsilon"}}],"answer_label":"{answer}","images":[],"vision_required":false,"content_filtered":false,"metadata":{{}}}}"#
        )
    }

    #[test]
    fn empty_file_loads_empty_corpus() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        fs::write(&path, "").unwrap();
        let corpus = Corpus::load(&path).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn well_formed_line_loads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        fs::write(&path, item_line("q1", "C")).unwrap();
        let corpus = Corpus::load(&path).unwrap();
        assert_eq!(corpus.len(), 1);
        let item = corpus.get("q1").unwrap();
        assert_eq!(item.options.len(), 5);
        assert_eq!(item.options[0].label.as_char(), 'A');
        assert_eq!(item.options[4].label.as_char(), 'E');
        assert_eq!(item.answer_label.as_char(), 'C');
        assert_eq!(item.answer_text(), "gamma");
    }

    #[test]
    fn answer_label_outside_options_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        fs::write(&path, item_line("q1", "F")).unwrap();
        let err = Corpus::load(&path).unwrap_err();
        match err {
            CorpusError::Invalid { item_id, field, .. } => {
                assert_eq!(item_id, "q1");
                assert_eq!(field, "answer_label");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn non_consecutive_labels_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let line = r#"{"id":"q1","benchmark_id":"b","stem":"s","options":[{"label":"A","text":"x"},{"label":"C","text":"y"}],"answer_label":"A","images":[],"vision_required":false,"content_filtered":false,"metadata":{}}"#;
        fs::write(&path, line).unwrap();
        assert!(matches!(
            Corpus::load(&path),
            Err(CorpusError::Invalid { .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        fs::write(
            &path,
            format!("{}\n{}", item_line("q1", "A"), item_line("q1", "B")),
        )
        .unwrap();
        assert!(matches!(
            Corpus::load(&path),
            Err(CorpusError::DuplicateId(id)) if id == "q1"
        ));
    }

    #[test]
    fn missing_image_rejected_at_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let line = item_line("q1", "A").replace(r#""images":[]"#, r#""images":["img/q1.png"]"#);
        fs::write(&path, &line).unwrap();
        assert!(matches!(
            Corpus::load(&path),
            Err(CorpusError::MissingImage { .. })
        ));

        fs::create_dir(dir.path().join("img")).unwrap();
        test_support::touch_image(&dir.path().join("img"), "q1.png");
        assert_eq!(Corpus::load(&path).unwrap().len(), 1);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        fs::write(&path, format!("{}\nnot json\n", item_line("q1", "A"))).unwrap();
        match Corpus::load(&path).unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn jsonl_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let mut items = vec![
            test_support::synthetic_item(0),
            test_support::synthetic_item(1),
        ];
        items[0]
            .metadata
            .insert("specialty".to_string(), "dermatology".to_string());
        items[1].vision_required = false;

        let first = dir.path().join("a.jsonl");
        write_items(&items, &first).unwrap();
        let loaded = Corpus::load_with_root(&first, dir.path()).unwrap();
        assert_eq!(loaded.items(), items.as_slice());

        let second = dir.path().join("b.jsonl");
        loaded.write(&second).unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn substitution_map_validates_alignment() {
        let dir = tempdir().unwrap();
        let items_path = dir.path().join("items.jsonl");
        fs::write(&items_path, item_line("q1", "A")).unwrap();
        let corpus = Corpus::load(&items_path).unwrap();
        test_support::touch_image(dir.path(), "sub.png");

        let map_path = dir.path().join("subs.json");

        // Empty map is fine.
        fs::write(&map_path, "{}").unwrap();
        assert!(load_substitution_map(&map_path, &corpus)
            .unwrap()
            .is_empty());

        // Aligning to the correct answer is rejected.
        fs::write(
            &map_path,
            r#"{"q1":{"substitute_image":"sub.png","aligned_label":"A"}}"#,
        )
        .unwrap();
        assert!(matches!(
            load_substitution_map(&map_path, &corpus),
            Err(CorpusError::BadAlignment { .. })
        ));

        // A distractor alignment passes.
        fs::write(
            &map_path,
            r#"{"q1":{"substitute_image":"sub.png","aligned_label":"C"}}"#,
        )
        .unwrap();
        let entries = load_substitution_map(&map_path, &corpus).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].aligned_label.as_char(), 'C');

        // Unknown item id is rejected.
        fs::write(
            &map_path,
            r#"{"zz":{"substitute_image":"sub.png","aligned_label":"C"}}"#,
        )
        .unwrap();
        assert!(matches!(
            load_substitution_map(&map_path, &corpus),
            Err(CorpusError::UnknownItem(id)) if id == "zz"
        ));
    }

    fn axis_set(names: &[&str]) -> HashSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn annotations_validate_scores_and_axes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        let axes = axis_set(&["reasoning_steps"]);

        fs::write(
            &path,
            "item_id,rater_id,axis_id,score\ni1,r1,reasoning_steps,4\n",
        )
        .unwrap();
        assert!(matches!(
            load_annotations(&path, &axes),
            Err(CorpusError::BadAnnotation { .. })
        ));

        fs::write(
            &path,
            "item_id,rater_id,axis_id,score\ni1,r1,reasoning_steps,2\ni1,r1,reasoning_steps,3\n",
        )
        .unwrap();
        let err = load_annotations(&path, &axes).unwrap_err();
        assert!(err.to_string().contains("duplicate"));

        let mut body = String::from("item_id,rater_id,axis_id,score\n");
        for item in ["i1", "i2"] {
            for rater in ["r1", "r2", "r3"] {
                body.push_str(&format!("{item},{rater},reasoning_steps,2\n"));
            }
        }
        fs::write(&path, body).unwrap();
        let records = load_annotations(&path, &axes).unwrap();
        assert_eq!(records.len(), 6);
        assert!(records.iter().all(|r| r.score == 2));
    }

    #[test]
    fn unknown_axis_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        fs::write(&path, "item_id,rater_id,axis_id,score\ni1,r1,mystery,2\n").unwrap();
        assert!(matches!(
            load_annotations(&path, &axis_set(&["reasoning_steps"])),
            Err(CorpusError::BadAnnotation { .. })
        ));
    }
}
