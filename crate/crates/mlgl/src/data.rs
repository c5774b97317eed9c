//! Taxonomy files, label CSV ingestion, splits and feature extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use mlgl_core::labels::AR_RANGE;
use mlgl_core::train::Example;
use mlgl_core::{LabelSet, Real, SeededRng, Taxonomy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{log_mel, FeatureConfig};
use crate::wav;

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyFile {
    pub fine: Vec<String>,
    pub coarse: Vec<CoarseClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseClass {
    pub name: String,
    pub members: Vec<String>,
}

impl TaxonomyFile {
    pub fn build(&self) -> Result<Taxonomy> {
        let mut mapping = vec![None; self.fine.len()];
        let mut problems = Vec::new();
        for (c, class) in self.coarse.iter().enumerate() {
            for m in &class.members {
                match self.fine.iter().position(|f| f == m) {
                    None => problems.push(format!("coarse class {:?} lists unknown event {m:?}", class.name)),
                    Some(i) if mapping[i].is_some() => {
                        problems.push(format!("event {m:?} belongs to more than one coarse class"))
                    }
                    Some(i) => mapping[i] = Some(c),
                }
            }
        }
        for (i, m) in mapping.iter().enumerate() {
            if m.is_none() {
                problems.push(format!("event {:?} has no coarse class", self.fine[i]));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(Taxonomy::new(
            self.fine.clone(),
            self.coarse.iter().map(|c| c.name.clone()).collect(),
            mapping.into_iter().map(Option::unwrap).collect(),
        )?)
    }

    pub fn from_taxonomy(t: &Taxonomy) -> Self {
        TaxonomyFile {
            fine: t.fae_names().to_vec(),
            coarse: t
                .cae_names()
                .iter()
                .enumerate()
                .map(|(c, name)| CoarseClass {
                    name: name.clone(),
                    members: (0..t.n_fae())
                        .filter(|&i| t.coarse_of(i) == c)
                        .map(|i| t.fae_names()[i].clone())
                        .collect(),
                })
                .collect(),
        }
    }
}

pub fn parse_taxonomy(text: &str) -> Result<Taxonomy> {
    let file: TaxonomyFile = toml::from_str(text).map_err(|e| Error::Config(format!("taxonomy: {e}")))?;
    file.build()
}

pub fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_taxonomy(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn default_taxonomy() -> Taxonomy {
    parse_taxonomy(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
}

pub fn taxonomy_toml(t: &Taxonomy) -> String {
    toml::to_string(&TaxonomyFile::from_taxonomy(t)).expect("taxonomy serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventAggregation {
    /// Present if any rater marked it.
    #[default]
    Or,
    /// Present if more than half of the raters marked it.
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingAggregation {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Aggregation {
    pub events: EventAggregation,
    pub rating: RatingAggregation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub labels: LabelSet,
}

fn parse_event(v: &str) -> Option<bool> {
    match v.trim() {
        "1" | "1.0" | "true" | "True" => Some(true),
        "0" | "0.0" | "false" | "False" | "" => Some(false),
        _ => None,
    }
}

/// Reads a label CSV with columns `clip_id`, one column per fine event (any
/// order, matched by name) and `ar`. Repeated clip ids are rater rows and are
/// aggregated. Records keep first-appearance order.
pub fn read_labels(text: &str, path: &Path, taxonomy: &Taxonomy, agg: Aggregation) -> Result<Vec<ClipRecord>> {
    let ingest = |problems: Vec<String>| Error::Ingest {
        path: path.to_path_buf(),
        problems,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| ingest(vec![format!("header: {e}")]))?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let mut missing = Vec::new();
    let id_col = col("clip_id");
    let ar_col = col("ar");
    let event_cols: Vec<Option<usize>> = taxonomy.fae_names().iter().map(|n| col(n)).collect();
    for (name, c) in [("clip_id", id_col), ("ar", ar_col)] {
        if c.is_none() {
            missing.push(format!("missing column {name:?}"));
        }
    }
    for (name, c) in taxonomy.fae_names().iter().zip(&event_cols) {
        if c.is_none() {
            missing.push(format!("missing event column {name:?}"));
        }
    }
    if !missing.is_empty() {
        return Err(ingest(missing));
    }
    let (id_col, ar_col) = (id_col.unwrap(), ar_col.unwrap());
    let event_cols: Vec<usize> = event_cols.into_iter().map(Option::unwrap).collect();

    let mut problems = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(Vec<bool>, f64)>> = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("row {line}: {e}"));
                continue;
            }
        };
        if row.len() != header.len() {
            problems.push(format!("row {line}: {} columns, header has {}", row.len(), header.len()));
            continue;
        }
        let id = row[id_col].trim().to_string();
        if id.is_empty() {
            problems.push(format!("row {line}: empty clip_id"));
            continue;
        }
        let ar: f64 = match row[ar_col].trim().parse() {
            Ok(v) if (AR_RANGE.0..=AR_RANGE.1).contains(&v) => v,
            Ok(v) => {
                problems.push(format!("row {line} ({id}): AR {v} outside [1, 10]"));
                continue;
            }
            Err(_) => {
                problems.push(format!("row {line} ({id}): AR {:?} is not a number", &row[ar_col]));
                continue;
            }
        };
        let mut events = Vec::with_capacity(event_cols.len());
        for (&c, name) in event_cols.iter().zip(taxonomy.fae_names()) {
            match parse_event(&row[c]) {
                Some(b) => events.push(b),
                None => problems.push(format!("row {line} ({id}): {name} = {:?} is not 0/1", &row[c])),
            }
        }
        if events.len() != event_cols.len() {
            continue;
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((events, ar));
    }
    if !problems.is_empty() {
        return Err(ingest(problems));
    }
    order
        .into_iter()
        .map(|id| {
            let raters = &rows[&id];
            let labels = aggregate(raters, taxonomy, agg)?;
            Ok(ClipRecord { clip_id: id, labels })
        })
        .collect()
}

fn aggregate(raters: &[(Vec<bool>, f64)], taxonomy: &Taxonomy, agg: Aggregation) -> Result<LabelSet> {
    let n = raters.len();
    let fae = (0..taxonomy.n_fae())
        .map(|k| {
            let votes = raters.iter().filter(|(e, _)| e[k]).count();
            match agg.events {
                EventAggregation::Or => votes > 0,
                EventAggregation::Majority => 2 * votes > n,
            }
        })
        .collect();
    let mut ars: Vec<f64> = raters.iter().map(|(_, a)| *a).collect();
    let ar = match agg.rating {
        RatingAggregation::Mean => ars.iter().sum::<f64>() / n as f64,
        RatingAggregation::Median => {
            ars.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                ars[n / 2]
            } else {
                0.5 * (ars[n / 2 - 1] + ars[n / 2])
            }
        }
    };
    Ok(LabelSet::new(taxonomy, fae, ar)?)
}

pub fn load_labels(path: &Path, taxonomy: &Taxonomy, agg: Aggregation) -> Result<Vec<ClipRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_labels(&text, path, taxonomy, agg)
}

/// Writes one row per record (already aggregated).
pub fn labels_csv(records: &[ClipRecord], taxonomy: &Taxonomy) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["clip_id".to_string()];
    header.extend(taxonomy.fae_names().iter().cloned());
    header.push("ar".into());
    w.write_record(&header).expect("in-memory write");
    for r in records {
        let mut row = vec![r.clip_id.clone()];
        row.extend(r.labels.fae.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        row.push(format!("{}", r.labels.ar));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Part::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, val, test)")))
    }
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Val, Part::Test];

    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Reference split sizes of the full recording set.
pub const REFERENCE_SIZES: [usize; 3] = [2200, 245, 445];

impl Split {
    pub fn part(&self, p: Part) -> &[String] {
        match p {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    fn part_mut(&mut self, p: Part) -> &mut Vec<String> {
        match p {
            Part::Train => &mut self.train,
            Part::Val => &mut self.val,
            Part::Test => &mut self.test,
        }
    }

    /// Parses `clip_id,part` (or whitespace-separated) lines; `#` starts a
    /// comment.
    pub fn parse(text: &str, path: &Path) -> Result<Split> {
        let mut split = Split::default();
        let mut problems = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            match fields[..] {
                [id, tag] => match Part::parse(tag) {
                    Some(p) => split.part_mut(p).push(id.to_string()),
                    None if i == 0 && id == "clip_id" => {}
                    None => problems.push(format!("line {}: unknown split {tag:?}", i + 1)),
                },
                _ => problems.push(format!("line {}: expected `clip_id,split`", i + 1)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                problems,
            });
        }
        Ok(split)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in Part::ALL {
            for id in self.part(p) {
                out.push_str(id);
                out.push(',');
                out.push_str(p.name());
                out.push('\n');
            }
        }
        out
    }

    /// Seeded shuffle cut in the reference 2200/245/445 proportions.
    pub fn seeded(ids: &[String], seed: u64) -> Split {
        let n = ids.len();
        let total: usize = REFERENCE_SIZES.iter().sum();
        let n_train = (n * REFERENCE_SIZES[0] + total / 2) / total;
        let n_val = ((n * REFERENCE_SIZES[1] + total / 2) / total).min(n - n_train);
        let mut rng = SeededRng::with_stream(seed, 0x5917);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let take = |r: std::ops::Range<usize>| order[r].iter().map(|&i| ids[i].clone()).collect();
        Split {
            train: take(0..n_train),
            val: take(n_train..n_train + n_val),
            test: take(n_train + n_val..n),
        }
    }

    /// Checks that the parts are disjoint and cover exactly `ids`.
    pub fn validate(&self, ids: &[String], path: &Path) -> Result<()> {
        let known: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let mut seen: BTreeMap<&str, Part> = BTreeMap::new();
        let mut problems = Vec::new();
        for p in Part::ALL {
            for id in self.part(p) {
                if !known.contains(id.as_str()) {
                    problems.push(format!("{id} ({}) has no labels", p.name()));
                }
                if let Some(prev) = seen.insert(id, p) {
                    problems.push(format!("{id} is in both {} and {}", prev.name(), p.name()));
                }
            }
        }
        for id in &known {
            if !seen.contains_key(id) {
                problems.push(format!("{id} is not assigned to a split"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Ingest {
                path: path.to_path_buf(),
                problems,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub records: Vec<ClipRecord>,
    pub split: Split,
    pub audio_dir: PathBuf,
}

impl Dataset {
    pub fn audio_path(&self, clip_id: &str) -> PathBuf {
        self.audio_dir.join(format!("{clip_id}.wav"))
    }

    pub fn records_of(&self, part: Part) -> Vec<&ClipRecord> {
        let index: HashMap<&str, &ClipRecord> = self.records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
        self.split.part(part).iter().map(|id| index[id.as_str()]).collect()
    }
}

/// Loads labels, checks that every clip has `<audio_dir>/<clip_id>.wav`, and
/// reads the split file or falls back to a seeded split.
pub fn load_dataset(
    labels: &Path,
    audio_dir: &Path,
    taxonomy: Taxonomy,
    split_file: Option<&Path>,
    seed: u64,
    agg: Aggregation,
) -> Result<Dataset> {
    let records = load_labels(labels, &taxonomy, agg)?;
    if records.is_empty() {
        return Err(Error::Ingest {
            path: labels.to_path_buf(),
            problems: vec!["no clips".into()],
        });
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !audio_dir.join(format!("{}.wav", r.clip_id)).is_file())
        .map(|r| format!("clip {} has no audio file", r.clip_id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingest {
            path: audio_dir.to_path_buf(),
            problems: missing,
        });
    }
    let ids: Vec<String> = records.iter().map(|r| r.clip_id.clone()).collect();
    let split = match split_file {
        Some(p) if p.exists() => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let s = Split::parse(&text, p)?;
            s.validate(&ids, p)?;
            s
        }
        _ => Split::seeded(&ids, seed),
    };
    Ok(Dataset {
        taxonomy,
        records,
        split,
        audio_dir: audio_dir.to_path_buf(),
    })
}

/// Reads and featurizes clips, spreading the work over available cores.
/// Output order matches `records`.
pub fn featurize<T: Real>(
    dataset: &Dataset,
    records: &[&ClipRecord],
    config: &FeatureConfig,
) -> Result<Vec<Example<T>>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(records.len().max(1));
    let chunk = records.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<Example<T>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|r| {
                            let clip = wav::read(&dataset.audio_path(&r.clip_id))?;
                            let mel = log_mel(&clip, config)?;
                            Ok(Example {
                                features: mel.to_tensor(),
                                labels: r.labels.clone(),
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("feature worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("labels.csv")
    }

    fn small() -> Taxonomy {
        parse_taxonomy(
            r#"
            fine = ["a", "b", "c"]
            [[coarse]]
            name = "x"
            members = ["a", "c"]
            [[coarse]]
            name = "y"
            members = ["b"]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn default_taxonomy_shape() {
        let t = default_taxonomy();
        assert_eq!((t.n_fae(), t.n_cae()), (24, 7));
        assert_eq!(parse_taxonomy(&taxonomy_toml(&t)).unwrap(), t);
    }

    #[test]
    fn taxonomy_must_be_total() {
        let bad = "fine = [\"a\", \"b\"]\n[[coarse]]\nname = \"x\"\nmembers = [\"a\"]\n";
        let err = parse_taxonomy(bad).unwrap_err().to_string();
        assert!(err.contains("\"b\" has no coarse class"), "{err}");
    }

    #[test]
    fn rater_rows_are_aggregated() {
        let csv = "clip_id,a,b,c,ar\nk1,1,0,0,4\nk1,0,1,0,6\nk2,0,0,0,2.5\n";
        let r = read_labels(csv, p(), &small(), Aggregation::default()).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].clip_id, "k1");
        assert_eq!(r[0].labels.ar, 5.0);
        assert_eq!(r[0].labels.fae, [true, true, false]);
        assert_eq!(r[0].labels.cae, [true, true]);
        let majority = Aggregation {
            events: EventAggregation::Majority,
            rating: RatingAggregation::Median,
        };
        let r = read_labels(csv, p(), &small(), majority).unwrap();
        assert_eq!(r[0].labels.fae, [false, false, false]);
    }

    #[test]
    fn columns_matched_by_name() {
        let csv = "ar,c,clip_id,b,a\n7,1,z,0,0\n";
        let r = read_labels(csv, p(), &small(), Aggregation::default()).unwrap();
        assert_eq!(r[0].labels.fae, [false, false, true]);
        assert_eq!(r[0].labels.cae, [true, false]);
    }

    #[test]
    fn bad_rows_are_all_listed() {
        let csv = "clip_id,a,b,c,ar\nk1,1,0,0,11\nk2,0,0\nk3,0,2,0,3\n";
        match read_labels(csv, p(), &small(), Aggregation::default()) {
            Err(Error::Ingest { problems, .. }) => {
                assert_eq!(problems.len(), 3, "{problems:?}");
                assert!(problems[0].contains("row 2") && problems[0].contains("outside"));
                assert!(problems[1].contains("row 3"));
                assert!(problems[2].contains("k3"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reference_split_sizes() {
        let ids: Vec<String> = (0..2890).map(|i| format!("c{i}")).collect();
        let s = Split::seeded(&ids, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2200, 245, 445));
        s.validate(&ids, p()).unwrap();
        assert_eq!(s, Split::seeded(&ids, 1));
        assert_ne!(s, Split::seeded(&ids, 2));
    }

    #[test]
    fn split_file_round_trip_and_checks() {
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let s = Split::seeded(&ids, 0);
        let back = Split::parse(&format!("clip_id,split\n{}", s.to_text()), p()).unwrap();
        assert_eq!(back, s);
        let mut dup = s.clone();
        dup.test.push(dup.train[0].clone());
        assert!(dup.validate(&ids, p()).is_err());
        assert!(s.validate(&ids[..9], p()).is_err());
    }

    #[test]
    fn missing_audio_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.csv");
        std::fs::write(&labels, "clip_id,a,b,c,ar\nghost,1,0,0,4\n").unwrap();
        let err = load_dataset(&labels, dir.path(), small(), None, 0, Aggregation::default()).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }
}
