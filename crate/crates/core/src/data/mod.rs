//! Corpus ingestion, chat templating, tag-homogeneous packing, ratio mixing
//! and validation splitting.

pub mod mix;
pub mod split;
pub mod synth;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use mix::{mix, MixPlan, Mixer, StreamItem};
pub use split::{split_validation, ValidationSet};

use crate::error::{Error, Result};
use crate::losses::CorpusTag;
use tokenizer::{BOS, EOS};

/// Opening role marker of the chat template.
pub const USER_MARKER: &str = "<|user|>\n";
/// Separator between prompt and response.
pub const ASSISTANT_MARKER: &str = "\n<|assistant|>\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DocContent {
    Text(String),
    Qa { prompt: String, response: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub content: DocContent,
    pub tag: CorpusTag,
    pub source: String,
    pub id: String,
}

#[derive(Debug, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

impl RawDocument {
    /// One JSON line in the corpus record format.
    pub fn to_json_line(&self) -> String {
        let mut r = Record {
            tag: Some(self.tag.to_string()),
            source: Some(self.source.clone()),
            id: Some(self.id.clone()),
            ..Record::default()
        };
        match &self.content {
            DocContent::Text(t) => r.text = Some(t.clone()),
            DocContent::Qa { prompt, response } => {
                r.prompt = Some(prompt.clone());
                r.response = Some(response.clone());
            }
        }
        serde_json::to_string(&r).expect("record serialises")
    }
}

fn parse_record(line: &str, tag: CorpusTag, default_source: &str, line_no: usize) -> std::result::Result<RawDocument, String> {
    let r: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if let Some(t) = &r.tag {
        let parsed: CorpusTag = t.parse().map_err(|e: Error| e.to_string())?;
        if parsed != tag {
            return Err(format!("record tag {parsed} conflicts with corpus tag {tag}"));
        }
    }
    let content = match (r.text, r.prompt, r.response) {
        (Some(text), None, None) => {
            if text.is_empty() {
                return Err("empty text".into());
            }
            DocContent::Text(text)
        }
        (None, Some(prompt), Some(response)) => {
            if response.is_empty() {
                return Err("empty response".into());
            }
            DocContent::Qa { prompt, response }
        }
        _ => return Err("record needs either `text` or both `prompt` and `response`".into()),
    };
    let source = r.source.unwrap_or_else(|| default_source.to_string());
    if source.is_empty() {
        return Err("empty source".into());
    }
    let id = r.id.unwrap_or_else(|| format!("{source}:{line_no}"));
    Ok(RawDocument {
        content,
        tag,
        source,
        id,
    })
}

/// Reads a line-delimited JSON corpus; every document gets `tag`. Blank lines
/// are skipped. The default source id is the file stem.
pub fn ingest(path: &Path, tag: CorpusTag) -> Result<Vec<RawDocument>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc = parse_record(line, tag, &stem, i + 1).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingOptions {
    /// Maximum tokens per packed sequence.
    pub context: usize,
    /// Whether prompt tokens of QA documents are loss targets.
    pub count_prompt_tokens: bool,
}

/// A document rendered to token ids with its per-token effective flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDoc {
    pub tokens: Vec<usize>,
    pub effective: Vec<bool>,
}

impl EncodedDoc {
    pub fn n_eff(&self) -> usize {
        self.effective.iter().filter(|&&e| e).count()
    }
}

/// Renders a document as `BOS body EOS`. QA bodies are
/// `USER_MARKER prompt ASSISTANT_MARKER response`. The BOS token is never a
/// target; prompt-side tokens are targets only when `count_prompt_tokens`.
pub fn encode_document(doc: &RawDocument, count_prompt_tokens: bool) -> EncodedDoc {
    let mut tokens = vec![BOS];
    let mut effective = vec![false];
    match &doc.content {
        DocContent::Text(t) => {
            tokens.extend(tokenizer::encode(t));
        }
        DocContent::Qa { prompt, response } => {
            let head = format!("{USER_MARKER}{prompt}{ASSISTANT_MARKER}");
            tokens.extend(tokenizer::encode(&head));
            effective.resize(tokens.len(), count_prompt_tokens);
            effective[0] = false;
            tokens.extend(tokenizer::encode(response));
        }
    }
    tokens.push(EOS);
    effective.resize(tokens.len(), true);
    EncodedDoc { tokens, effective }
}

/// A packed training sequence. `mask[i]` marks `tokens[i]` as a loss target
/// (predicted from `tokens[..i]`), so `mask[0]` is always false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSequence {
    pub id: String,
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub tag: CorpusTag,
    pub source: String,
    pub doc_ids: Vec<String>,
}

impl TaggedSequence {
    pub fn n_eff(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Model inputs: every token but the last.
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Targets aligned with the rows of the logits for [`Self::inputs`].
    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.mask[1..]
    }
}

struct Packer<'a> {
    opts: PackingOptions,
    tag: CorpusTag,
    source: &'a str,
    tokens: Vec<usize>,
    mask: Vec<bool>,
    doc_ids: Vec<String>,
    out: Vec<TaggedSequence>,
}

impl Packer<'_> {
    fn flush(&mut self) {
        if self.tokens.is_empty() {
            return;
        }
        let tokens = std::mem::take(&mut self.tokens);
        let mask = std::mem::take(&mut self.mask);
        let doc_ids = std::mem::take(&mut self.doc_ids);
        // Sequences without targets carry no loss and are dropped.
        if tokens.len() < 2 || !mask.iter().any(|&m| m) {
            return;
        }
        self.out.push(TaggedSequence {
            id: format!("{}/{}/{}", self.tag, self.source, self.out.len()),
            tokens,
            mask,
            tag: self.tag,
            source: self.source.to_string(),
            doc_ids,
        });
    }

    fn push_doc(&mut self, id: &str, doc: EncodedDoc) {
        let ctx = self.opts.context;
        if doc.tokens.len() <= ctx {
            if self.tokens.len() + doc.tokens.len() > ctx {
                self.flush();
            }
            self.tokens.extend(&doc.tokens);
            self.mask.extend(&doc.effective);
            self.doc_ids.push(id.to_string());
            return;
        }
        // Oversized document: split at context boundaries. Each continuation
        // chunk repeats the previous chunk's last token as its (non-target)
        // first token so no target loses its prefix.
        self.flush();
        let len = doc.tokens.len();
        let mut start = 0;
        loop {
            let end = (start + ctx).min(len);
            self.tokens.extend(&doc.tokens[start..end]);
            self.mask.extend(&doc.effective[start..end]);
            if start > 0 {
                self.mask[0] = false;
            }
            self.doc_ids.push(id.to_string());
            if end == len {
                break;
            }
            self.flush();
            start = end - 1;
        }
    }
}

/// Renders documents through the template and greedily packs them into
/// sequences of at most `opts.context` tokens. Packing is homogeneous in both
/// tag and source; groups are emitted in (tag, source) order.
pub fn template_and_pack(docs: &[RawDocument], opts: PackingOptions) -> Result<Vec<TaggedSequence>> {
    if opts.context < 2 {
        return Err(Error::InvalidArgument("packing context must be at least 2".into()));
    }
    let mut groups: BTreeMap<(CorpusTag, &str), Vec<&RawDocument>> = BTreeMap::new();
    for d in docs {
        groups.entry((d.tag, d.source.as_str())).or_default().push(d);
    }
    let mut out = Vec::new();
    for ((tag, source), group) in groups {
        let mut packer = Packer {
            opts,
            tag,
            source,
            tokens: Vec::new(),
            mask: Vec::new(),
            doc_ids: Vec::new(),
            out: Vec::new(),
        };
        for d in group {
            packer.push_doc(&d.id, encode_document(d, opts.count_prompt_tokens));
        }
        packer.flush();
        out.extend(packer.out);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub tag: String,
    pub documents: usize,
    pub tokens: usize,
    pub effective_tokens: usize,
    pub sequences: usize,
    pub packed_tokens: usize,
    /// Packed tokens / (sequences * context).
    pub packing_efficiency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub context: usize,
    pub domain_tokens: usize,
    pub general_tokens: usize,
    /// Domain tokens / general tokens (0 when there is no general data).
    pub domain_to_general_token_ratio: f64,
    pub sources: BTreeMap<String, SourceStats>,
}

pub fn corpus_stats(docs: &[RawDocument], opts: PackingOptions) -> Result<CorpusStats> {
    let mut stats = CorpusStats {
        context: opts.context,
        ..CorpusStats::default()
    };
    for d in docs {
        let enc = encode_document(d, opts.count_prompt_tokens);
        let s = stats.sources.entry(d.source.clone()).or_default();
        s.tag = d.tag.to_string();
        s.documents += 1;
        s.tokens += enc.tokens.len();
        s.effective_tokens += enc.n_eff();
        match d.tag {
            CorpusTag::Domain => stats.domain_tokens += enc.tokens.len(),
            CorpusTag::General => stats.general_tokens += enc.tokens.len(),
        }
    }
    for seq in template_and_pack(docs, opts)? {
        let s = stats.sources.entry(seq.source.clone()).or_default();
        s.sequences += 1;
        s.packed_tokens += seq.tokens.len();
    }
    for s in stats.sources.values_mut() {
        if s.sequences > 0 {
            s.packing_efficiency = s.packed_tokens as f64 / (s.sequences * opts.context) as f64;
        }
    }
    if stats.general_tokens > 0 {
        stats.domain_to_general_token_ratio = stats.domain_tokens as f64 / stats.general_tokens as f64;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn text_doc(text: &str, tag: CorpusTag, source: &str, id: &str) -> RawDocument {
        RawDocument {
            content: DocContent::Text(text.into()),
            tag,
            source: source.into(),
            id: id.into(),
        }
    }

    fn write(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_empty_file() {
        let f = write("");
        assert!(ingest(f.path(), CorpusTag::General).unwrap().is_empty());
    }

    #[test]
    fn ingest_three_records() {
        let f = write(concat!(
            "{\"text\": \"alpha\"}\n",
            "{\"prompt\": \"q?\", \"response\": \"a.\", \"source\": \"qa\"}\n",
            "\n",
            "{\"text\": \"gamma\", \"tag\": \"domain\"}\n",
        ));
        let docs = ingest(f.path(), CorpusTag::Domain).unwrap();
        assert_eq!(docs.len(), 3);
        assert!(docs.iter().all(|d| d.tag == CorpusTag::Domain));
        assert_eq!(docs[1].source, "qa");
        assert_eq!(docs[1].id, "qa:2");
    }

    #[test]
    fn ingest_reports_malformed_line() {
        let f = write("{\"text\": \"ok\"}\n{\"text\": \"ok\"}\n{\"txt\": \"typo\"}\n");
        match ingest(f.path(), CorpusTag::General) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write("{\"text\": \"ok\", \"tag\": \"domain\"}\n");
        assert!(matches!(ingest(f.path(), CorpusTag::General), Err(Error::Parse { line: 1, .. })));
        let f = write("not json\n");
        assert!(matches!(ingest(f.path(), CorpusTag::General), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ingest_missing_file() {
        assert!(matches!(
            ingest(Path::new("/nonexistent/x.jsonl"), CorpusTag::General),
            Err(Error::MissingPath(_))
        ));
    }

    #[test]
    fn template_is_bit_exact() {
        let doc = RawDocument {
            content: DocContent::Qa {
                prompt: "Hi".into(),
                response: "Yo".into(),
            },
            tag: CorpusTag::Domain,
            source: "s".into(),
            id: "0".into(),
        };
        let enc = encode_document(&doc, true);
        assert_eq!(enc.tokens[0], BOS);
        assert_eq!(*enc.tokens.last().unwrap(), EOS);
        assert_eq!(
            tokenizer::decode(&enc.tokens),
            "<|user|>\nHi\n<|assistant|>\nYo"
        );
        assert_eq!(enc.n_eff(), enc.tokens.len() - 1);
        let enc = encode_document(&doc, false);
        // "Yo" + EOS
        assert_eq!(enc.n_eff(), 3);
        assert!(enc.effective[enc.tokens.len() - 3..].iter().all(|&e| e));
    }

    #[test]
    fn single_short_doc_single_sequence() {
        let docs = [text_doc("hello", CorpusTag::General, "g", "d0")];
        let seqs = template_and_pack(&docs, PackingOptions { context: 64, count_prompt_tokens: true }).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].tokens.len(), 7);
        assert_eq!(seqs[0].doc_ids, vec!["d0"]);
        assert!(!seqs[0].mask[0]);
    }

    #[test]
    fn tags_never_share_a_sequence() {
        let docs = [
            text_doc("a", CorpusTag::General, "s", "0"),
            text_doc("b", CorpusTag::Domain, "s", "1"),
        ];
        let seqs = template_and_pack(&docs, PackingOptions { context: 64, count_prompt_tokens: true }).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_ne!(seqs[0].tag, seqs[1].tag);
    }

    /// Ten small documents at context 64, against an independent greedy
    /// first-fit oracle over document lengths.
    #[test]
    fn packing_matches_greedy_oracle_and_conserves_tokens() {
        let texts = [
            "one", "two words", "a slightly longer sentence here", "x", "short",
            "medium sized text", "another document of text", "tiny", "last but one", "the end",
        ];
        let docs: Vec<_> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| text_doc(t, CorpusTag::General, "g", &i.to_string()))
            .collect();
        let ctx = 64;
        let seqs = template_and_pack(&docs, PackingOptions { context: ctx, count_prompt_tokens: true }).unwrap();

        let mut oracle = vec![0usize];
        for t in texts {
            let len = t.len() + 2;
            if *oracle.last().unwrap() + len > ctx {
                oracle.push(0);
            }
            *oracle.last_mut().unwrap() += len;
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.tokens.len()).collect();
        assert_eq!(lens, oracle);
        let eff_before: usize = texts.iter().map(|t| t.len() + 1).sum();
        let eff_after: usize = seqs.iter().map(TaggedSequence::n_eff).sum();
        assert_eq!(eff_before, eff_after);
    }

    #[test]
    fn long_documents_split_without_losing_targets() {
        let long = "abcdefghij".repeat(5);
        let docs = [text_doc(&long, CorpusTag::Domain, "d", "0"), text_doc("z", CorpusTag::Domain, "d", "1")];
        let seqs = template_and_pack(&docs, PackingOptions { context: 16, count_prompt_tokens: true }).unwrap();
        assert!(seqs.iter().all(|s| s.tokens.len() <= 16 && !s.mask[0]));
        let eff: usize = seqs.iter().map(TaggedSequence::n_eff).sum();
        assert_eq!(eff, long.len() + 1 + 2);
    }

    #[test]
    fn stats_count_tokens() {
        let docs = [
            text_doc("abc", CorpusTag::Domain, "d", "0"),
            text_doc("hello", CorpusTag::General, "g", "1"),
        ];
        let st = corpus_stats(&docs, PackingOptions { context: 8, count_prompt_tokens: true }).unwrap();
        assert_eq!(st.domain_tokens, 5);
        assert_eq!(st.general_tokens, 7);
        assert_eq!(st.sources["d"].effective_tokens, 4);
        assert!((st.sources["g"].packing_efficiency - 7.0 / 8.0).abs() < 1e-12);
    }
}
