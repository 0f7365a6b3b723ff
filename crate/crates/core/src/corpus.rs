//! Dataset ingestion, class-balance reporting, stratified subsampling and
//! splitting, and the synthetic separable corpus used by the test suites.

use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::textproc::{RawDocument, StopwordList};
use std::collections::BTreeMap;
use std::path::Path;

/// A labelled document collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub documents: Vec<RawDocument>,
    pub name: String,
    /// Class-string to binary-label mapping used at load time.
    pub label_map: BTreeMap<String, u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.documents.iter().map(|d| d.label).collect()
    }
}

/// Load a CSV corpus. The header must contain `text_column` and
/// `label_column`; every label value must appear in `label_map`; rows with
/// empty text are rejected. Errors carry 1-based line numbers.
pub fn load_csv(
    path: &Path,
    text_column: &str,
    label_column: &str,
    label_map: &BTreeMap<String, u8>,
    name: &str,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let path_str = path.display().to_string();
    let headers = reader.headers()?.clone();
    let col = |wanted: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == wanted)
            .ok_or_else(|| Error::Parse {
                path: path_str.clone(),
                line: 1,
                msg: format!("missing column `{wanted}` (header: {headers:?})"),
            })
    };
    let text_idx = col(text_column)?;
    let label_idx = col(label_column)?;

    let mut documents = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        let text = record.get(text_idx).unwrap_or_default();
        let label_str = record.get(label_idx).unwrap_or_default();
        let label = *label_map.get(label_str).ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            line,
            msg: format!("label `{label_str}` not in label map"),
        })?;
        if text.trim().is_empty() {
            return Err(Error::Parse {
                path: path_str.clone(),
                line,
                msg: "empty text field".into(),
            });
        }
        documents.push(RawDocument {
            text: text.to_owned(),
            label,
        });
    }
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Dataset {
        documents,
        name: name.to_owned(),
        label_map: label_map.clone(),
    })
}

/// Write a dataset back out as `text,label` CSV. Each class is rendered as
/// the lexicographically smallest string mapping to it, so
/// `load_csv(write_csv(ds))` with the same map reproduces the dataset.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut canonical: BTreeMap<u8, &str> = BTreeMap::new();
    for (s, &c) in &ds.label_map {
        canonical.entry(c).or_insert(s.as_str());
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["text", "label"])?;
    for doc in &ds.documents {
        let label = canonical
            .get(&doc.label)
            .ok_or_else(|| Error::Config(format!("label {} missing from map", doc.label)))?;
        writer.write_record([doc.text.as_str(), label])?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-class counts and the max/min imbalance ratio.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ClassReport {
    pub positive: usize,
    pub negative: usize,
    pub ratio: f64,
}

pub fn class_report(ds: &Dataset) -> ClassReport {
    let positive = ds.documents.iter().filter(|d| d.label == 1).count();
    let negative = ds.len() - positive;
    let (hi, lo) = (positive.max(negative), positive.min(negative));
    let ratio = if lo == 0 {
        f64::INFINITY
    } else {
        hi as f64 / lo as f64
    };
    ClassReport {
        positive,
        negative,
        ratio,
    }
}

/// Split `n` between the classes proportionally (largest-remainder), then
/// per-class counts deviate from exact proportionality by at most one.
fn stratified_quotas(counts: [usize; 2], n: usize) -> [usize; 2] {
    let total: usize = counts.iter().sum();
    let exact = [
        n as f64 * counts[0] as f64 / total as f64,
        n as f64 * counts[1] as f64 / total as f64,
    ];
    let mut quotas = [exact[0].floor() as usize, exact[1].floor() as usize];
    let mut remaining = n - quotas[0] - quotas[1];
    // hand leftovers to the larger fractional part; ties favour class 0
    let frac = [exact[0].fract(), exact[1].fract()];
    let order: [usize; 2] = if frac[1] > frac[0] { [1, 0] } else { [0, 1] };
    for c in order {
        if remaining > 0 && quotas[c] < counts[c] {
            quotas[c] += 1;
            remaining -= 1;
        }
    }
    // spill over if one class was exhausted
    for c in [0, 1] {
        while remaining > 0 && quotas[c] < counts[c] {
            quotas[c] += 1;
            remaining -= 1;
        }
    }
    quotas
}

/// Stratified random subsample of `n` documents preserving class
/// proportions within one document; deterministic per seed. Document order
/// follows the source dataset.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::InvalidArgument {
            op: "subsample",
            msg: format!("requested {n} documents from a corpus of {}", ds.len()),
        });
    }
    let by_class: [Vec<usize>; 2] = {
        let mut c = [Vec::new(), Vec::new()];
        for (i, d) in ds.documents.iter().enumerate() {
            c[d.label as usize].push(i);
        }
        c
    };
    let quotas = stratified_quotas([by_class[0].len(), by_class[1].len()], n);

    let root = Rng::new(seed);
    let mut chosen = Vec::with_capacity(n);
    for class in 0..2 {
        let mut indices = by_class[class].clone();
        root.child(class as u64).shuffle(&mut indices);
        chosen.extend(indices.into_iter().take(quotas[class]));
    }
    chosen.sort_unstable();
    Ok(Dataset {
        documents: chosen.iter().map(|&i| ds.documents[i].clone()).collect(),
        name: format!("{}[{}]", ds.name, n),
        label_map: ds.label_map.clone(),
    })
}

/// Stratified train/test split by held-out fraction; deterministic per
/// seed. Returns (train indices, test indices), both in source order.
pub fn stratified_holdout(labels: &[u8], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let by_class: [Vec<usize>; 2] = {
        let mut c = [Vec::new(), Vec::new()];
        for (i, &l) in labels.iter().enumerate() {
            c[l as usize].push(i);
        }
        c
    };
    let n_test = ((labels.len() as f64) * test_fraction).round() as usize;
    let quotas = stratified_quotas([by_class[0].len(), by_class[1].len()], n_test);

    let root = Rng::new(seed);
    let mut test = Vec::new();
    let mut train = Vec::new();
    for class in 0..2 {
        let mut indices = by_class[class].clone();
        root.child(0x7e57 + class as u64).shuffle(&mut indices);
        test.extend(indices.iter().copied().take(quotas[class]));
        train.extend(indices.iter().copied().skip(quotas[class]));
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Parameters of the synthetic separable corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub filler_words: usize,
    pub keywords_per_class: usize,
    /// Filler token count range per document (inclusive).
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            filler_words: 50,
            keywords_per_class: 4,
            min_len: 5,
            max_len: 12,
        }
    }
}

const URDU_LETTERS: [char; 36] = [
    'ا', 'ب', 'پ', 'ت', 'ٹ', 'ث', 'ج', 'چ', 'ح', 'خ', 'د', 'ڈ', 'ذ', 'ر', 'ڑ', 'ز', 'ژ', 'س',
    'ش', 'ص', 'ض', 'ط', 'ظ', 'ع', 'غ', 'ف', 'ق', 'ک', 'گ', 'ل', 'م', 'ن', 'ں', 'و', 'ہ', 'ی',
];

fn random_word(rng: &mut Rng) -> String {
    let len = 3 + rng.below(4);
    (0..len)
        .map(|_| URDU_LETTERS[rng.below(URDU_LETTERS.len())])
        .collect()
}

/// Word pools for a synthetic corpus: disjoint positive keywords, negative
/// keywords and filler, none of them stopwords.
#[derive(Debug, Clone)]
pub struct SynthVocab {
    pub pos_keywords: Vec<String>,
    pub neg_keywords: Vec<String>,
    pub filler: Vec<String>,
}

fn synth_vocab(spec: &SynthSpec, rng: &mut Rng) -> SynthVocab {
    let needed = spec.filler_words + 2 * spec.keywords_per_class;
    let stops = StopwordList::default_urdu();
    let mut pool: Vec<String> = Vec::with_capacity(needed);
    while pool.len() < needed {
        let w = random_word(rng);
        if !stops.contains(&w) && !pool.contains(&w) {
            pool.push(w);
        }
    }
    let filler = pool.split_off(2 * spec.keywords_per_class);
    let neg_keywords = pool.split_off(spec.keywords_per_class);
    SynthVocab {
        pos_keywords: pool,
        neg_keywords,
        filler,
    }
}

/// Generate `n` documents (n even): half positive, half negative, random
/// filler plus one to three class keywords, linearly separable by keyword
/// presence. Deterministic per seed.
pub fn synth_corpus(n: usize, spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "synth_corpus",
            msg: format!("n must be even and positive, got {n}"),
        });
    }
    let root = Rng::new(seed);
    let vocab = synth_vocab(spec, &mut root.child(0));

    let mut rng = root.child(1);
    let mut documents = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2 == 0) as u8;
        let keywords = if label == 1 {
            &vocab.pos_keywords
        } else {
            &vocab.neg_keywords
        };
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let mut tokens: Vec<String> = (0..len)
            .map(|_| vocab.filler[rng.below(vocab.filler.len())].clone())
            .collect();
        let n_keywords = 1 + rng.below(3);
        for _ in 0..n_keywords {
            let kw = keywords[rng.below(keywords.len())].clone();
            let at = rng.below(tokens.len() + 1);
            tokens.insert(at, kw);
        }
        documents.push(RawDocument {
            text: tokens.join(" "),
            label,
        });
    }
    let mut label_map = BTreeMap::new();
    label_map.insert("negative".to_owned(), 0);
    label_map.insert("positive".to_owned(), 1);
    Ok(Dataset {
        documents,
        name: format!("synthetic-{n}"),
        label_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use std::io::Write;

    fn default_map() -> BTreeMap<String, u8> {
        BTreeMap::from([("positive".to_owned(), 1), ("negative".to_owned(), 0)])
    }

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_basic() {
        let f = write_temp("text,label\nفلم اچھی,positive\nفلم خراب,negative\n");
        let ds = load_csv(f.path(), "text", "label", &default_map(), "demo").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.documents[0].label, 1);
        assert_eq!(ds.documents[1].label, 0);
    }

    #[test]
    fn load_csv_unmapped_label_names_line() {
        let f = write_temp("text,label\nفلم,positive\nکہانی,neutral\n");
        let err = load_csv(f.path(), "text", "label", &default_map(), "demo").unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("neutral"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn load_csv_missing_column_and_empty_file() {
        let f = write_temp("body,label\nفلم,positive\n");
        assert!(matches!(
            load_csv(f.path(), "text", "label", &default_map(), "demo"),
            Err(Error::Parse { line: 1, .. })
        ));
        let f = write_temp("text,label\n");
        assert!(matches!(
            load_csv(f.path(), "text", "label", &default_map(), "demo"),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn load_csv_quoted_fields_with_commas_and_newlines() {
        let f = write_temp("text,label\n\"پہلی, سطر\nدوسری سطر\",positive\n");
        let ds = load_csv(f.path(), "text", "label", &default_map(), "demo").unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.documents[0].text.contains('\n'));
        assert!(ds.documents[0].text.contains(','));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = synth_corpus(10, &SynthSpec::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, "text", "label", &ds.label_map, &ds.name).unwrap();
        assert_eq!(back.documents, ds.documents);
        assert_eq!(back.label_map, ds.label_map);
    }

    #[test]
    fn class_report_ratios() {
        let make = |pos: usize, neg: usize| {
            let mut documents = Vec::new();
            for _ in 0..pos {
                documents.push(RawDocument {
                    text: "الف".into(),
                    label: 1,
                });
            }
            for _ in 0..neg {
                documents.push(RawDocument {
                    text: "بے".into(),
                    label: 0,
                });
            }
            Dataset {
                documents,
                name: "r".into(),
                label_map: default_map(),
            }
        };
        let report = class_report(&make(405, 100));
        assert_eq!((report.positive, report.negative), (405, 100));
        assert!((report.ratio - 4.05).abs() < 1e-12);

        let report = class_report(&make(5033, 4967));
        assert!((report.ratio - 5033.0 / 4967.0).abs() < 1e-12);
        assert!((report.ratio - 1.013).abs() < 2e-3);

        assert_eq!(class_report(&make(10, 10)).ratio, 1.0);
    }

    #[test]
    fn subsample_full_size_is_a_permutation() {
        let ds = synth_corpus(20, &SynthSpec::default(), 1).unwrap();
        let sub = subsample(&ds, 20, 9).unwrap();
        assert_eq!(sub.documents, ds.documents);
        assert!(subsample(&ds, 21, 9).is_err());
    }

    #[test]
    fn subsample_preserves_balance() {
        let ds = synth_corpus(5000, &SynthSpec::default(), 2).unwrap();
        let sub = subsample(&ds, 600, 3).unwrap();
        let report = class_report(&sub);
        assert_eq!(sub.len(), 600);
        assert!((report.positive as i64 - 300).abs() <= 1);

        let again = subsample(&ds, 600, 3).unwrap();
        assert_eq!(again.documents, sub.documents);
        let other = subsample(&ds, 600, 4).unwrap();
        assert_ne!(other.documents, sub.documents);
    }

    #[test]
    fn synth_corpus_is_separable_by_keywords() {
        let spec = SynthSpec::default();
        let ds = synth_corpus(20, &spec, 7).unwrap();
        let report = class_report(&ds);
        assert_eq!((report.positive, report.negative), (10, 10));

        // reconstruct the same pools and classify by keyword lookup
        let vocab = synth_vocab(&spec, &mut Rng::new(7).child(0));
        let mut correct = 0;
        for doc in &ds.documents {
            let has_pos = vocab
                .pos_keywords
                .iter()
                .any(|k| doc.text.split(' ').any(|t| t == k));
            let has_neg = vocab
                .neg_keywords
                .iter()
                .any(|k| doc.text.split(' ').any(|t| t == k));
            let guess = match (has_pos, has_neg) {
                (true, false) => 1,
                (false, true) => 0,
                other => panic!("keyword sets are not disjoint per class: {other:?}"),
            };
            if guess == doc.label {
                correct += 1;
            }
        }
        assert_eq!(correct, 20);

        let same = synth_corpus(20, &spec, 7).unwrap();
        assert_eq!(same.documents, ds.documents);
        assert!(synth_corpus(7, &spec, 7).is_err());
    }

    #[test]
    fn fixture_corpus_loads_and_is_balanced() {
        let path = Path::new(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/assets/sample_docs_ur.csv"
        ));
        let ds = load_csv(path, "text", "label", &default_map(), "sample").unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(class_report(&ds).ratio, 1.0);
    }

    proptest! {
        #[test]
        fn subsample_stratification_off_by_at_most_one(
            pos in 2usize..40, neg in 2usize..40, seed in 0u64..50
        ) {
            let mut documents = Vec::new();
            for i in 0..(pos + neg) {
                documents.push(RawDocument {
                    text: "الف".into(),
                    label: (i < pos) as u8,
                });
            }
            let ds = Dataset { documents, name: "p".into(), label_map: default_map() };
            let n = 1 + seed as usize % (pos + neg);
            let sub = subsample(&ds, n, seed).unwrap();
            prop_assert_eq!(sub.len(), n);
            let report = class_report(&sub);
            let exact = n as f64 * pos as f64 / (pos + neg) as f64;
            prop_assert!((report.positive as f64 - exact).abs() <= 1.0);
        }

        #[test]
        fn holdout_split_partitions_everything(pos in 3usize..30, neg in 3usize..30, seed in 0u64..50) {
            let labels: Vec<u8> = (0..pos).map(|_| 1u8).chain((0..neg).map(|_| 0u8)).collect();
            let (train, test) = stratified_holdout(&labels, 0.2, seed);
            prop_assert_eq!(train.len() + test.len(), labels.len());
            let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), labels.len());
        }
    }
}
