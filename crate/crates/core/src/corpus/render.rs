//! Canonical Markdown layout.
//!
//! Blocks are separated by exactly one blank line:
//!
//! ```text
//! # <title>
//!
//! Journal: <journal>
//! Published: <YYYY-MM>
//!
//! ## Abstract
//!
//! <abstract>
//!
//! ## <heading>
//!
//! <body>
//!
//! > <caption>
//! ```
//!
//! Every field has its whitespace runs collapsed to a single space and is
//! trimmed, so each block is one line. Empty titles, abstracts, bodies and
//! captions are omitted together with their headings (section headings are
//! always kept). The publication date line is opt-in through [`Layout`].

use std::fmt;
use std::ops::Range;

use serde::{Serialize, Serializer};

use super::DocumentRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Layout {
    pub include_date: bool,
}

/// Which part of a document a span of rendered text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Title,
    Metadata,
    Abstract,
    /// Zero-based section index.
    Section(usize),
    Captions,
    /// Sequence delimiters added by the tokenizer, never produced by rendering.
    Markers,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Title => f.write_str("title"),
            Region::Metadata => f.write_str("metadata"),
            Region::Abstract => f.write_str("abstract"),
            Region::Section(i) => write!(f, "section_{}", i + 1),
            Region::Captions => f.write_str("captions"),
            Region::Markers => f.write_str("markers"),
        }
    }
}

impl Serialize for Region {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// A rendered block; `range` covers the block and its trailing separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub region: Region,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub blocks: Vec<Block>,
}

impl Rendered {
    pub fn region_at(&self, byte: usize) -> Option<Region> {
        self.blocks
            .iter()
            .find(|b| b.range.contains(&byte))
            .map(|b| b.region)
    }
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn render_markdown(doc: &DocumentRecord) -> String {
    render(doc, Layout::default()).text
}

pub fn render(doc: &DocumentRecord, layout: Layout) -> Rendered {
    let mut pieces: Vec<(Region, String)> = Vec::new();

    let title = squash(&doc.title);
    if !title.is_empty() {
        pieces.push((Region::Title, format!("# {title}")));
    }

    let mut meta = Vec::new();
    if let Some(journal) = doc.journal.as_deref().map(squash).filter(|j| !j.is_empty()) {
        meta.push(format!("Journal: {journal}"));
    }
    if layout.include_date {
        meta.push(format!("Published: {}", doc.publication_date));
    }
    if !meta.is_empty() {
        pieces.push((Region::Metadata, meta.join("\n")));
    }

    let abstract_text = squash(&doc.abstract_text);
    if !abstract_text.is_empty() {
        pieces.push((Region::Abstract, "## Abstract".to_string()));
        pieces.push((Region::Abstract, abstract_text));
    }

    for (i, section) in doc.sections.iter().enumerate() {
        pieces.push((Region::Section(i), format!("## {}", squash(&section.heading))));
        let body = squash(&section.body);
        if !body.is_empty() {
            pieces.push((Region::Section(i), body));
        }
    }

    for caption in &doc.captions {
        let caption = squash(caption);
        if !caption.is_empty() {
            pieces.push((Region::Captions, format!("> {caption}")));
        }
    }

    let mut text = String::new();
    let mut blocks: Vec<Block> = Vec::with_capacity(pieces.len());
    let n = pieces.len();
    for (i, (region, piece)) in pieces.into_iter().enumerate() {
        let start = text.len();
        text.push_str(&piece);
        if i + 1 < n {
            text.push_str("\n\n");
        }
        match blocks.last_mut() {
            Some(prev) if prev.region == region => prev.range.end = text.len(),
            _ => blocks.push(Block {
                region,
                range: start..text.len(),
            }),
        }
    }
    Rendered { text, blocks }
}

#[cfg(test)]
mod tests {
    use super::super::Section;
    use super::*;
    use proptest::prelude::*;

    fn minimal() -> DocumentRecord {
        DocumentRecord {
            id: "x".into(),
            title: "T".into(),
            abstract_text: "A".into(),
            sections: vec![],
            captions: vec![],
            journal: None,
            publication_date: "2020-02".parse().unwrap(),
            total_citations: 0,
        }
    }

    #[test]
    fn minimal_document() {
        assert_eq!(render_markdown(&minimal()), "# T\n\n## Abstract\n\nA");
    }

    #[test]
    fn full_layout() {
        let mut d = minimal();
        d.journal = Some("Nature".into());
        d.sections = vec![
            Section { heading: "Intro".into(), body: "first".into() },
            Section { heading: "Methods".into(), body: "second".into() },
        ];
        d.captions = vec!["Figure one".into()];
        let r = render(&d, Layout { include_date: true });
        assert_eq!(
            r.text,
            "# T\n\nJournal: Nature\nPublished: 2020-02\n\n## Abstract\n\nA\n\n## Intro\n\nfirst\n\n## Methods\n\nsecond\n\n> Figure one"
        );
        let intro = r.text.find("## Intro").unwrap();
        let methods = r.text.find("## Methods").unwrap();
        assert!(intro < methods);
        assert_eq!(render_markdown(&d), render_markdown(&d));

        let regions: Vec<_> = r.blocks.iter().map(|b| b.region).collect();
        assert_eq!(
            regions,
            vec![
                Region::Title,
                Region::Metadata,
                Region::Abstract,
                Region::Section(0),
                Region::Section(1),
                Region::Captions
            ]
        );
        assert_eq!(r.blocks.last().unwrap().range.end, r.text.len());
        assert_eq!(r.region_at(intro), Some(Region::Section(0)));
    }

    #[test]
    fn empty_fields_are_dropped() {
        let mut d = minimal();
        d.title.clear();
        assert_eq!(render_markdown(&d), "## Abstract\n\nA");
        d.abstract_text = "  ".into();
        assert_eq!(render_markdown(&d), "");
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9]{1,6}( [a-zA-Z0-9]{1,6}){0,4}"
    }

    proptest! {
        #[test]
        fn blocks_tile_the_text(title in arb_text(), abs in arb_text(), secs in proptest::collection::vec((arb_text(), arb_text()), 0..4)) {
            let mut d = minimal();
            d.title = title;
            d.abstract_text = abs;
            d.sections = secs.into_iter().map(|(heading, body)| Section { heading, body }).collect();
            let r = render(&d, Layout::default());
            let mut cursor = 0;
            for b in &r.blocks {
                prop_assert_eq!(b.range.start, cursor);
                cursor = b.range.end;
            }
            prop_assert_eq!(cursor, r.text.len());
        }

        #[test]
        fn distinct_content_renders_distinctly(
            a in (arb_text(), arb_text(), proptest::collection::vec((arb_text(), arb_text()), 0..3), proptest::collection::vec(arb_text(), 0..2)),
            b in (arb_text(), arb_text(), proptest::collection::vec((arb_text(), arb_text()), 0..3), proptest::collection::vec(arb_text(), 0..2)),
        ) {
            let build = |(t, abs, secs, caps): (String, String, Vec<(String, String)>, Vec<String>)| {
                let mut d = minimal();
                d.title = t;
                d.abstract_text = abs;
                d.sections = secs.into_iter().map(|(heading, body)| Section { heading, body }).collect();
                d.captions = caps;
                d
            };
            let (da, db) = (build(a), build(b));
            let same_content = da.title == db.title
                && da.abstract_text == db.abstract_text
                && da.sections == db.sections
                && da.captions == db.captions;
            prop_assert_eq!(same_content, render_markdown(&da) == render_markdown(&db));
        }
    }
}
