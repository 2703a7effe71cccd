//! Paragraph-aligned greedy segmentation.

use std::collections::{BTreeSet, HashMap};

use super::{token_count, truncate_to_tokens, CorpusError, Document, Passage};

/// Greedy left-to-right packing: consecutive paragraphs merge while the
/// combined token count stays within `max_passage_tokens`; a lone
/// oversized paragraph is head-truncated. No passage spans two documents.
pub fn segment_documents(
    docs: &[Document],
    max_passage_tokens: usize,
) -> Result<Vec<Passage>, CorpusError> {
    if max_passage_tokens == 0 {
        return Err(CorpusError::BadPassageLimit);
    }
    let mut out = Vec::new();
    for doc in docs {
        let mut open: Vec<usize> = Vec::new();
        let mut open_tokens = 0usize;
        for (idx, par) in doc.paragraphs.iter().enumerate() {
            let t = token_count(par);
            if t > max_passage_tokens {
                flush(doc, &mut open, &mut out);
                open_tokens = 0;
                let text = truncate_to_tokens(par, max_passage_tokens).to_string();
                out.push(make_passage(doc, &[idx], text));
                continue;
            }
            if !open.is_empty() && open_tokens + t > max_passage_tokens {
                flush(doc, &mut open, &mut out);
                open_tokens = 0;
            }
            open.push(idx);
            open_tokens += t;
        }
        flush(doc, &mut open, &mut out);
    }
    Ok(out)
}

fn flush(doc: &Document, open: &mut Vec<usize>, out: &mut Vec<Passage>) {
    if open.is_empty() {
        return;
    }
    let text = open
        .iter()
        .map(|&i| doc.paragraphs[i].as_str())
        .collect::<Vec<_>>()
        .join(" ");
    out.push(make_passage(doc, open, text));
    open.clear();
}

fn make_passage(doc: &Document, idxs: &[usize], text: String) -> Passage {
    Passage {
        passage_id: format!("{}:{}", doc.doc_id, idxs[0]),
        doc_id: doc.doc_id.clone(),
        title: doc.title.clone(),
        text,
        paragraph_ids: idxs.iter().map(|&i| (doc.doc_id.clone(), i)).collect(),
    }
}

/// Entity lists per passage, gathered from the owning document's
/// paragraph-level annotations. Sorted and deduplicated per passage.
pub fn passage_entities(docs: &[Document], passages: &[Passage]) -> Vec<Vec<String>> {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    passages
        .iter()
        .map(|p| {
            let Some(doc) = by_id.get(p.doc_id.as_str()) else {
                return Vec::new();
            };
            let covered: BTreeSet<usize> = p.paragraph_ids.iter().map(|(_, i)| *i).collect();
            let set: BTreeSet<&String> = doc
                .entities
                .iter()
                .filter(|(idx, _)| covered.contains(idx))
                .map(|(_, e)| e)
                .collect();
            set.into_iter().cloned().collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn para(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    fn doc(id: &str, paragraphs: Vec<String>) -> Document {
        Document {
            doc_id: id.into(),
            title: String::new(),
            paragraphs,
            entities: vec![],
        }
    }

    #[test]
    fn short_paragraphs_combine() {
        let d = doc("d", vec![para(50), para(40)]);
        let ps = segment_documents(&[d], 100).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(token_count(&ps[0].text), 90);
        assert_eq!(
            ps[0].paragraph_ids,
            vec![("d".to_string(), 0), ("d".to_string(), 1)]
        );
        assert_eq!(ps[0].passage_id, "d:0");
    }

    #[test]
    fn oversized_paragraph_truncates() {
        let d = doc("d", vec![para(150)]);
        let ps = segment_documents(&[d], 100).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(token_count(&ps[0].text), 100);
    }

    #[test]
    fn paragraphs_that_cannot_combine_split() {
        let d = doc("d", vec![para(80), para(80)]);
        let ps = segment_documents(&[d], 100).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[1].passage_id, "d:1");
    }

    #[test]
    fn no_passage_spans_documents() {
        let ds = vec![doc("a", vec![para(10)]), doc("b", vec![para(10)])];
        let ps = segment_documents(&ds, 100).unwrap();
        assert_eq!(ps.len(), 2);
        assert!(ps.iter().all(|p| p.paragraph_ids.iter().all(|(d, _)| *d == p.doc_id)));
    }

    #[test]
    fn zero_limit_rejected() {
        assert!(segment_documents(&[doc("d", vec![para(1)])], 0).is_err());
    }

    #[test]
    fn entities_follow_their_paragraphs() {
        let mut d = doc("d", vec![para(50), para(60), para(10)]);
        d.entities = vec![
            (0, "A".into()),
            (1, "B".into()),
            (2, "C".into()),
            (2, "A".into()),
        ];
        let ps = segment_documents(&[d.clone()], 100).unwrap();
        // 50 | 60+10 under limit 100.
        assert_eq!(ps.len(), 2);
        let ents = passage_entities(&[d], &ps);
        assert_eq!(ents[0], vec!["A".to_string()]);
        assert_eq!(ents[1], vec!["A".to_string(), "B".to_string(), "C".to_string()]);
    }

    proptest! {
        // Partition with truncation: each paragraph index appears exactly
        // once, in order, and every passage respects the token limit.
        #[test]
        fn segmentation_partitions(lens in proptest::collection::vec(0usize..60, 1..10), max in 1usize..50) {
            let d = doc("d", lens.iter().map(|&n| if n == 0 { "!?".to_string() } else { para(n) }).collect());
            let ps = segment_documents(&[d], max).unwrap();
            let mut seen = Vec::new();
            for p in &ps {
                prop_assert!(!p.paragraph_ids.is_empty());
                prop_assert!(token_count(&p.text) <= max);
                prop_assert!(!p.text.is_empty());
                for (docid, idx) in &p.paragraph_ids {
                    prop_assert_eq!(docid.as_str(), "d");
                    seen.push(*idx);
                }
            }
            let expect: Vec<usize> = (0..lens.len()).collect();
            prop_assert_eq!(seen, expect);
        }
    }
}
