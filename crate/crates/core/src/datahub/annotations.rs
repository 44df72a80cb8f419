use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsio;

pub const CSV_HEADER: [&str; 3] = ["sample_id", "annotator_id", "label"];

/// Sparse sample × annotator label table. Samples and annotators keep the
/// order in which they were first seen.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMatrix {
    sample_ids: Vec<String>,
    annotator_ids: Vec<String>,
    vocabulary: Vec<String>,
    entries: BTreeMap<(usize, usize), usize>,
}

impl AnnotationMatrix {
    pub fn new(sample_ids: Vec<String>, annotator_ids: Vec<String>, vocabulary: Vec<String>) -> Result<Self> {
        for (what, ids) in [("sample", &sample_ids), ("annotator", &annotator_ids), ("label", &vocabulary)] {
            let unique: BTreeSet<_> = ids.iter().collect();
            if unique.len() != ids.len() {
                return Err(Error::Integrity(format!("duplicate {what} ids")));
            }
        }
        Ok(Self {
            sample_ids,
            annotator_ids,
            vocabulary,
            entries: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, sample: usize, annotator: usize, class: usize) -> Result<()> {
        if sample >= self.n_samples() || annotator >= self.n_annotators() {
            return Err(Error::Index(format!("cell ({sample}, {annotator}) outside matrix")));
        }
        if class >= self.vocabulary.len() {
            return Err(Error::Index(format!(
                "class {class} outside vocabulary of {}",
                self.vocabulary.len()
            )));
        }
        if self.entries.insert((sample, annotator), class).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate label for ({}, {})",
                self.sample_ids[sample], self.annotator_ids[annotator]
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_annotators(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn n_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn annotator_ids(&self) -> &[String] {
        &self.annotator_ids
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn get(&self, sample: usize, annotator: usize) -> Option<usize> {
        self.entries.get(&(sample, annotator)).copied()
    }

    /// `((sample, annotator), class)` in sample-major order.
    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), usize)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// One optional label per annotator for `sample`.
    pub fn row(&self, sample: usize) -> Vec<Option<usize>> {
        (0..self.n_annotators()).map(|a| self.get(sample, a)).collect()
    }

    fn with_entries(&self, entries: BTreeMap<(usize, usize), usize>) -> Self {
        Self {
            sample_ids: self.sample_ids.clone(),
            annotator_ids: self.annotator_ids.clone(),
            vocabulary: self.vocabulary.clone(),
            entries,
        }
    }

    /// Restricts to the given samples, in that order. Annotators and the
    /// vocabulary are kept whole so indices stay comparable.
    pub fn select_samples(&self, samples: &[usize]) -> Self {
        let mut out = Self {
            sample_ids: samples.iter().map(|&s| self.sample_ids[s].clone()).collect(),
            annotator_ids: self.annotator_ids.clone(),
            vocabulary: self.vocabulary.clone(),
            entries: BTreeMap::new(),
        };
        for (new, &old) in samples.iter().enumerate() {
            for a in 0..self.n_annotators() {
                if let Some(c) = self.get(old, a) {
                    out.entries.insert((new, a), c);
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for ((s, a), c) in self.entries() {
            w.write_record([&self.sample_ids[s], &self.annotator_ids[a], &self.vocabulary[c]])
                .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Reads a `sample_id,annotator_id,label` CSV. Labels listed in `drop_labels`
/// are discarded before the vocabulary is built.
pub fn parse_annotations(text: &str, drop_labels: &[String]) -> Result<AnnotationMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut header_seen = false;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if !header_seen {
            if record.iter().map(str::trim).ne(CSV_HEADER) {
                return Err(Error::Parse {
                    line,
                    detail: format!("expected header {}", CSV_HEADER.join(",")),
                });
            }
            header_seen = true;
            continue;
        }
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                detail: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let fields: Vec<&str> = record.iter().map(str::trim).collect();
        if let Some(i) = fields.iter().position(|f| f.is_empty()) {
            return Err(Error::Parse {
                line,
                detail: format!("empty {}", CSV_HEADER[i]),
            });
        }
        rows.push((line, fields[0].to_owned(), fields[1].to_owned(), fields[2].to_owned()));
    }
    if !header_seen {
        return Err(Error::Parse {
            line: 1,
            detail: "empty file".into(),
        });
    }
    rows.retain(|r| !drop_labels.contains(&r.3));

    fn intern(ids: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str) -> usize {
        *index.entry(id.to_owned()).or_insert_with(|| {
            ids.push(id.to_owned());
            ids.len() - 1
        })
    }
    let (mut samples, mut sample_index) = (Vec::new(), HashMap::new());
    let (mut annotators, mut annotator_index) = (Vec::new(), HashMap::new());
    let vocabulary: Vec<String> = rows.iter().map(|r| r.3.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let cells: Vec<_> = rows
        .iter()
        .map(|(line, s, a, l)| {
            (
                *line,
                intern(&mut samples, &mut sample_index, s),
                intern(&mut annotators, &mut annotator_index, a),
                vocabulary.binary_search(l).expect("label is in vocabulary"),
            )
        })
        .collect();
    let mut m = AnnotationMatrix::new(samples, annotators, vocabulary)?;
    for (line, s, a, c) in cells {
        m.insert(s, a, c).map_err(|e| match e {
            Error::Integrity(d) => Error::Integrity(format!("line {line}: {d}")),
            e => e,
        })?;
    }
    Ok(m)
}

pub fn load_annotations(path: &Path) -> Result<AnnotationMatrix> {
    load_annotations_filtered(path, &[])
}

pub fn load_annotations_filtered(path: &Path, drop_labels: &[String]) -> Result<AnnotationMatrix> {
    parse_annotations(&fsio::read_string(path)?, drop_labels)
}

pub fn save_annotations(m: &AnnotationMatrix, path: &Path) -> Result<()> {
    fsio::write(path, &m.to_csv()?)
}

fn removal_count(rate: f64, n: usize) -> usize {
    (rate * n as f64 + 1e-9).floor() as usize
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("removal rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Removes `floor(rate · entries)` labels chosen uniformly over all entries.
pub fn sparsify(m: &AnnotationMatrix, rate: f64, seed: u64) -> Result<AnnotationMatrix> {
    check_rate(rate)?;
    let mut keys: Vec<(usize, usize)> = m.entries.keys().copied().collect();
    let drop = removal_count(rate, keys.len());
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut entries = m.entries.clone();
    for k in &keys[..drop] {
        entries.remove(k);
    }
    Ok(m.with_entries(entries))
}

/// Removes `floor(rate · n_k)` of each annotator's own `n_k` labels.
pub fn sparsify_per_annotator(m: &AnnotationMatrix, rate: f64, seed: u64) -> Result<AnnotationMatrix> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = m.entries.clone();
    for a in 0..m.n_annotators() {
        let mut keys: Vec<_> = m.entries.keys().filter(|k| k.1 == a).copied().collect();
        let drop = removal_count(rate, keys.len());
        keys.shuffle(&mut rng);
        for k in &keys[..drop] {
            entries.remove(k);
        }
    }
    Ok(m.with_entries(entries))
}

/// Sample-level train/validation/test partition. The train and validation
/// sizes are `floor(frac · n_samples)`; the test split takes the rest.
pub fn split(
    m: &AnnotationMatrix,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(AnnotationMatrix, AnnotationMatrix, AnnotationMatrix)> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac <= 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "split fractions must be positive with sum <= 1, got {train_frac} + {val_frac}"
        )));
    }
    let n = m.n_samples();
    let n_train = removal_count(train_frac, n);
    let n_val = removal_count(val_frac, n);
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "split of {n} samples into {n_train}/{n_val}/{} leaves an empty part",
            n.saturating_sub(n_train + n_val)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        m.select_samples(&order[..n_train]),
        m.select_samples(&order[n_train..n_train + n_val]),
        m.select_samples(&order[n_train + n_val..]),
    ))
}
