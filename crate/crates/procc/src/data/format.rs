//! The `czslfeat v1` feature-file format.
//!
//! Text, UTF-8. Header `czslfeat v1 d=<dim>`, then manifest sections
//! `[states]`, `[objects]` (one name per line, index = line order),
//! `[seen_pairs]`, `[val_unseen_pairs]`, `[test_unseen_pairs]` (lines
//! `state_index object_index`), then `[records]` with CSV lines
//! `id,split,state_index|-1,object_index|-1,f1,...,fd`. `-1` encodes an
//! absent label; `#` starts a comment. Reals are written with Rust's
//! shortest round-trip formatting, so write-then-load is exact.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DataError, Dataset, FeatureRecord, LabelPair, Split, SplitManifest};

pub fn write_features(
    path: &Path,
    dataset: &Dataset,
    manifest: &SplitManifest,
) -> Result<(), DataError> {
    fs::write(path, write_features_str(dataset, manifest)?)?;
    Ok(())
}

pub fn write_features_str(
    dataset: &Dataset,
    manifest: &SplitManifest,
) -> Result<String, DataError> {
    manifest.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "czslfeat v1 d={}", dataset.dim);
    out.push_str("[states]\n");
    for name in &manifest.state_names {
        let _ = writeln!(out, "{name}");
    }
    out.push_str("[objects]\n");
    for name in &manifest.object_names {
        let _ = writeln!(out, "{name}");
    }
    for (section, pairs) in [
        ("[seen_pairs]", &manifest.seen_pairs),
        ("[val_unseen_pairs]", &manifest.val_unseen_pairs),
        ("[test_unseen_pairs]", &manifest.test_unseen_pairs),
    ] {
        let _ = writeln!(out, "{section}");
        for &(s, o) in pairs {
            let _ = writeln!(out, "{s} {o}");
        }
    }
    out.push_str("[records]\n");
    for rec in &dataset.records {
        let state = rec.label.state.map_or(-1, |s| s as i64);
        let object = rec.label.object.map_or(-1, |o| o as i64);
        let _ = write!(out, "{},{},{},{}", rec.id, rec.split, state, object);
        for v in &rec.feature {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<(Dataset, SplitManifest), DataError> {
    let text = fs::read_to_string(path)?;
    read_features_str(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    States,
    Objects,
    SeenPairs,
    ValUnseenPairs,
    TestUnseenPairs,
    Records,
}

pub fn read_features_str(text: &str) -> Result<(Dataset, SplitManifest), DataError> {
    let mut lines = text.lines().enumerate();
    let (header_no, header) = loop {
        match lines.next() {
            Some((no, line)) => {
                let line = strip_comment(line);
                if !line.is_empty() {
                    break (no + 1, line);
                }
            }
            None => {
                return Err(DataError::Parse {
                    line: 0,
                    msg: "empty file".into(),
                })
            }
        }
    };
    let dim = parse_header(header).ok_or_else(|| DataError::Parse {
        line: header_no,
        msg: format!("malformed header `{header}`, expected `czslfeat v1 d=<dim>`"),
    })?;

    let mut state_names = Vec::new();
    let mut object_names = Vec::new();
    let mut seen_pairs = BTreeSet::new();
    let mut val_unseen_pairs = BTreeSet::new();
    let mut test_unseen_pairs = BTreeSet::new();
    let mut records = Vec::new();
    let mut section: Option<Section> = None;

    for (no, raw) in lines {
        let line_no = no + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(match name {
                "states" => Section::States,
                "objects" => Section::Objects,
                "seen_pairs" => Section::SeenPairs,
                "val_unseen_pairs" => Section::ValUnseenPairs,
                "test_unseen_pairs" => Section::TestUnseenPairs,
                "records" => Section::Records,
                other => {
                    return Err(DataError::Parse {
                        line: line_no,
                        msg: format!("unknown section `[{other}]`"),
                    })
                }
            });
            continue;
        }
        match section {
            None => {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: "content before any section header".into(),
                })
            }
            Some(Section::States) => state_names.push(line.to_string()),
            Some(Section::Objects) => object_names.push(line.to_string()),
            Some(Section::SeenPairs) => {
                seen_pairs.insert(parse_pair(line, line_no)?);
            }
            Some(Section::ValUnseenPairs) => {
                val_unseen_pairs.insert(parse_pair(line, line_no)?);
            }
            Some(Section::TestUnseenPairs) => {
                test_unseen_pairs.insert(parse_pair(line, line_no)?);
            }
            Some(Section::Records) => {
                records.push(parse_record(line, line_no, dim)?);
            }
        }
    }

    let manifest = SplitManifest {
        state_names,
        object_names,
        seen_pairs,
        val_unseen_pairs,
        test_unseen_pairs,
    };
    manifest.validate()?;
    for rec in &records {
        if let Some(s) = rec.label.state {
            if s >= manifest.n_states() {
                return Err(DataError::UnknownClass {
                    state: s,
                    object: rec.label.object.unwrap_or(0),
                    n_states: manifest.n_states(),
                    n_objects: manifest.n_objects(),
                });
            }
        }
        if let Some(o) = rec.label.object {
            if o >= manifest.n_objects() {
                return Err(DataError::UnknownClass {
                    state: rec.label.state.unwrap_or(0),
                    object: o,
                    n_states: manifest.n_states(),
                    n_objects: manifest.n_objects(),
                });
            }
        }
    }
    Ok((Dataset { dim, records }, manifest))
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => line[..pos].trim(),
        None => line.trim(),
    }
}

fn parse_header(line: &str) -> Option<usize> {
    let rest = line.strip_prefix("czslfeat v1 d=")?;
    rest.parse().ok()
}

fn parse_pair(line: &str, line_no: usize) -> Result<(usize, usize), DataError> {
    let mut it = line.split_whitespace();
    let parse = |tok: Option<&str>| -> Result<usize, DataError> {
        tok.and_then(|t| t.parse().ok()).ok_or(DataError::Parse {
            line: line_no,
            msg: format!("expected `state_index object_index`, got `{line}`"),
        })
    };
    let s = parse(it.next())?;
    let o = parse(it.next())?;
    if it.next().is_some() {
        return Err(DataError::Parse {
            line: line_no,
            msg: format!("trailing tokens in pair line `{line}`"),
        });
    }
    Ok((s, o))
}

fn parse_record(line: &str, line_no: usize, dim: usize) -> Result<FeatureRecord, DataError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 4 {
        return Err(DataError::Parse {
            line: line_no,
            msg: format!("record needs at least 4 fields, got {}", fields.len()),
        });
    }
    let id = fields[0].to_string();
    let split = Split::parse(fields[1]).ok_or_else(|| DataError::Parse {
        line: line_no,
        msg: format!("unknown split `{}`", fields[1]),
    })?;
    let parse_label = |tok: &str| -> Result<Option<usize>, DataError> {
        let v: i64 = tok.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("bad label `{tok}`"),
        })?;
        if v == -1 {
            Ok(None)
        } else if v >= 0 {
            Ok(Some(v as usize))
        } else {
            Err(DataError::Parse {
                line: line_no,
                msg: format!("bad label `{tok}`"),
            })
        }
    };
    let state = parse_label(fields[2])?;
    let object = parse_label(fields[3])?;
    if state.is_none() && object.is_none() {
        return Err(DataError::Unlabeled(id));
    }
    let values = &fields[4..];
    if values.len() != dim {
        return Err(DataError::DimensionMismatch {
            id,
            got: values.len(),
            want: dim,
        });
    }
    let mut feature = Vec::with_capacity(dim);
    for tok in values {
        let v: f64 = tok.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("bad feature value `{tok}`"),
        })?;
        if !v.is_finite() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("non-finite feature value `{tok}`"),
            });
        }
        feature.push(v);
    }
    Ok(FeatureRecord {
        id,
        feature,
        label: LabelPair { state, object },
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest() -> SplitManifest {
        SplitManifest {
            state_names: vec!["old".into(), "new".into()],
            object_names: vec!["car".into(), "shoe".into(), "tower".into()],
            seen_pairs: [(0, 1), (1, 0)].into(),
            val_unseen_pairs: [(0, 2)].into(),
            test_unseen_pairs: [(1, 2)].into(),
        }
    }

    fn small_dataset() -> Dataset {
        Dataset {
            dim: 3,
            records: vec![
                FeatureRecord {
                    id: "a".into(),
                    feature: vec![0.5, -1.25, 3.0000000000000004],
                    label: LabelPair::full(0, 1),
                    split: Split::Train,
                },
                FeatureRecord {
                    id: "b".into(),
                    feature: vec![1.0 / 3.0, 2e-17, -0.0],
                    label: LabelPair {
                        state: None,
                        object: Some(2),
                    },
                    split: Split::Test,
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small_dataset();
        let mf = small_manifest();
        let text = write_features_str(&ds, &mf).unwrap();
        let (ds2, mf2) = read_features_str(&text).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(mf, mf2);
    }

    #[test]
    fn utzappos_scale_manifest() {
        let mf = SplitManifest {
            state_names: (0..16).map(|i| format!("s{i}")).collect(),
            object_names: (0..12).map(|i| format!("o{i}")).collect(),
            seen_pairs: (0..83).map(|i| (i / 12, i % 12)).collect(),
            val_unseen_pairs: BTreeSet::new(),
            test_unseen_pairs: [(15, 11)].into(),
        };
        let ds = Dataset {
            dim: 4,
            records: vec![],
        };
        let text = write_features_str(&ds, &mf).unwrap();
        let (ds2, mf2) = read_features_str(&text).unwrap();
        assert_eq!(mf2.seen_pairs.len(), 83);
        assert_eq!(mf2.full_space(), 192);
        assert!(ds2.is_empty());
    }

    #[test]
    fn overlapping_pairs_rejected() {
        let text = "czslfeat v1 d=1\n[states]\na\n[objects]\nb\n[seen_pairs]\n0 0\n[val_unseen_pairs]\n[test_unseen_pairs]\n0 0\n[records]\n";
        assert!(matches!(
            read_features_str(text),
            Err(DataError::OverlappingPairs(0, 0))
        ));
    }

    #[test]
    fn malformed_header_rejected() {
        assert!(matches!(
            read_features_str("czslfeat v2 d=3\n[states]\n"),
            Err(DataError::Parse { .. })
        ));
        assert!(matches!(
            read_features_str("hello\n"),
            Err(DataError::Parse { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let text = "czslfeat v1 d=2\n[states]\na\n[objects]\nb\n[seen_pairs]\n0 0\n[val_unseen_pairs]\n[test_unseen_pairs]\n[records]\nr1,train,0,0,1.0\n";
        assert!(matches!(
            read_features_str(text),
            Err(DataError::DimensionMismatch { got: 1, want: 2, .. })
        ));
    }

    #[test]
    fn unknown_class_in_pair_rejected() {
        let text = "czslfeat v1 d=1\n[states]\na\n[objects]\nb\n[seen_pairs]\n5 0\n[val_unseen_pairs]\n[test_unseen_pairs]\n[records]\n";
        assert!(matches!(
            read_features_str(text),
            Err(DataError::UnknownClass { state: 5, .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# preamble\nczslfeat v1 d=1\n\n[states]\na # trailing\n[objects]\nb\n[seen_pairs]\n0 0\n[val_unseen_pairs]\n[test_unseen_pairs]\n[records]\nr,train,0,0,2.5\n";
        let (ds, mf) = read_features_str(text).unwrap();
        assert_eq!(mf.state_names, vec!["a"]);
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].feature, vec![2.5]);
    }

    #[test]
    fn absent_labels_encoded_as_minus_one() {
        let text = "czslfeat v1 d=1\n[states]\na\n[objects]\nb\n[seen_pairs]\n0 0\n[val_unseen_pairs]\n[test_unseen_pairs]\n[records]\nr,train,-1,0,1.0\n";
        let (ds, _) = read_features_str(text).unwrap();
        assert_eq!(ds.records[0].label.state, None);
        assert_eq!(ds.records[0].label.object, Some(0));
    }

    #[test]
    fn record_with_no_labels_rejected() {
        let text = "czslfeat v1 d=1\n[states]\na\n[objects]\nb\n[seen_pairs]\n0 0\n[val_unseen_pairs]\n[test_unseen_pairs]\n[records]\nr,train,-1,-1,1.0\n";
        assert!(matches!(
            read_features_str(text),
            Err(DataError::Unlabeled(id)) if id == "r"
        ));
    }
}
