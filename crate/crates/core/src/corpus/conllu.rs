use std::path::Path;

use super::CorpusError;

/// One syntactic word of a CoNLL-U file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConlluWord {
    pub form: String,
    pub upos: String,
    pub space_after: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConlluDocument {
    pub doc_id: String,
    pub words: Vec<ConlluWord>,
}

fn space_after(misc: &str) -> bool {
    !misc.split('|').any(|f| f == "SpaceAfter=No")
}

/// Parse CoNLL-U text. Documents start at `# newdoc` comments; words before
/// the first marker (or in a file without markers) belong to a document
/// named `fallback_id`.
pub fn parse_conllu(text: &str, fallback_id: &str, path_label: &str) -> Result<Vec<ConlluDocument>, CorpusError> {
    let mut docs: Vec<ConlluDocument> = Vec::new();
    let mut current = ConlluDocument {
        doc_id: fallback_id.to_string(),
        words: Vec::new(),
    };
    let mut unnamed = 0usize;
    // last word id covered by the multiword token being expanded, and the
    // SpaceAfter value of that token
    let mut mwt: Option<(u64, bool)> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        let malformed = |message: String| CorpusError::Malformed {
            path: path_label.to_string(),
            line: lineno + 1,
            message,
        };
        if line.trim().is_empty() {
            mwt = None;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(rest) = comment.strip_prefix("newdoc") {
                if !current.words.is_empty() {
                    docs.push(ConlluDocument {
                        doc_id: current.doc_id.clone(),
                        words: std::mem::take(&mut current.words),
                    });
                }
                let id = rest
                    .trim()
                    .strip_prefix("id")
                    .and_then(|r| r.trim().strip_prefix('='))
                    .map(|r| r.trim().to_string())
                    .filter(|s| !s.is_empty());
                current.doc_id = id.unwrap_or_else(|| {
                    unnamed += 1;
                    format!("{fallback_id}-{unnamed}")
                });
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(malformed(format!(
                "expected 10 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let id = cols[0];
        if let Some((a, b)) = id.split_once('-') {
            let last = match (a.parse::<u64>(), b.parse::<u64>()) {
                (Ok(a), Ok(b)) if a <= b => b,
                _ => return Err(malformed(format!("bad multiword token range {id:?}"))),
            };
            mwt = Some((last, space_after(cols[9])));
            continue;
        }
        if id.contains('.') {
            // empty node of the enhanced representation
            continue;
        }
        let num: u64 = id.parse().map_err(|_| malformed(format!("bad word id {id:?}")))?;
        if cols[1].is_empty() {
            return Err(malformed("empty FORM column".into()));
        }
        let space = match mwt {
            Some((last, _)) if num < last => false,
            Some((last, sa)) if num == last => {
                mwt = None;
                sa
            }
            _ => space_after(cols[9]),
        };
        current.words.push(ConlluWord {
            form: cols[1].to_string(),
            upos: cols[3].to_string(),
            space_after: space,
        });
    }
    if !current.words.is_empty() {
        docs.push(current);
    }
    Ok(docs)
}

/// Load documents from CoNLL-U files, or from every `*.conllu` file in a
/// directory (sorted by name).
pub fn load_conllu<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<ConlluDocument>, CorpusError> {
    let mut files = Vec::new();
    for p in paths {
        let p = p.as_ref();
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|source| CorpusError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            let mut found: Vec<_> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "conllu"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.to_path_buf());
        }
    }
    let mut docs = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|source| CorpusError::Io {
            path: f.clone(),
            source,
        })?;
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "doc".into());
        docs.extend(parse_conllu(&text, &stem, &f.display().to_string())?);
    }
    if docs.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, form: &str, upos: &str, misc: &str) -> String {
        format!("{id}\t{form}\t_\t{upos}\t_\t_\t_\t_\t_\t{misc}\n")
    }

    #[test]
    fn newdoc_spans_sentences() {
        let mut t = String::from("# newdoc id = fiction-1\n# sent_id = 1\n");
        t += &row("1", "Birds", "NOUN", "_");
        t += &row("2", "sing", "VERB", "SpaceAfter=No");
        t += &row("3", ".", "PUNCT", "_");
        t += "\n# sent_id = 2\n";
        t += &row("1", "Owls", "NOUN", "_");
        t += &row("2", "hunt", "VERB", "_");
        t += "\n";
        let docs = parse_conllu(&t, "file", "file.conllu").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].doc_id, "fiction-1");
        let forms: Vec<_> = docs[0].words.iter().map(|w| w.form.as_str()).collect();
        assert_eq!(forms, ["Birds", "sing", ".", "Owls", "hunt"]);
        assert!(!docs[0].words[1].space_after);
        assert!(docs[0].words[2].space_after);
    }

    #[test]
    fn multiword_ranges_expand() {
        let mut t = String::new();
        t += &row("1", "I", "PRON", "_");
        t += &row("2-3", "cannot", "_", "_");
        t += &row("2", "can", "AUX", "_");
        t += &row("3", "not", "PART", "_");
        t += &row("4", "go", "VERB", "_");
        t += &row("4.1", "went", "VERB", "_");
        let docs = parse_conllu(&t, "f", "f").unwrap();
        let w = &docs[0].words;
        assert_eq!(
            w.iter().map(|w| w.form.as_str()).collect::<Vec<_>>(),
            ["I", "can", "not", "go"]
        );
        assert_eq!(w[1].upos, "AUX");
        assert!(!w[1].space_after);
        assert!(w[2].space_after);
    }

    #[test]
    fn file_without_newdoc_uses_fallback() {
        let t = row("1", "Hello", "INTJ", "_");
        let docs = parse_conllu(&t, "myfile", "myfile.conllu").unwrap();
        assert_eq!(docs[0].doc_id, "myfile");
    }

    #[test]
    fn several_documents_and_unnamed_markers() {
        let mut t = row("1", "a", "X", "_");
        t += "\n# newdoc\n";
        t += &row("1", "b", "X", "_");
        t += "\n# newdoc id = last\n";
        t += &row("1", "c", "X", "_");
        let docs = parse_conllu(&t, "f", "f").unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, ["f", "f-1", "last"]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut t = row("1", "a", "X", "_");
        t += "2\tb\tX\n";
        match parse_conllu(&t, "f", "f.conllu") {
            Err(CorpusError::Malformed { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, "f.conllu");
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_id = row("x", "a", "X", "_");
        assert!(matches!(
            parse_conllu(&bad_id, "f", "f"),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn empty_input_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.conllu");
        std::fs::write(&p, "# just a comment\n\n").unwrap();
        assert!(matches!(load_conllu(&[&p]), Err(CorpusError::EmptyInput)));
        assert!(matches!(load_conllu(&[dir.path()]), Err(CorpusError::EmptyInput)));
    }
}
