//! On-disk formats and the domain types shared across the pipeline.
//!
//! Every reader validates the invariants of the type it produces and reports
//! the 1-based line number of the offending input where there is one.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema version written into every structured record.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    MalformedRow { line: usize, found: usize },
    #[error("line {line}: {msg}")]
    BadValue { line: usize, msg: String },
    #[error("line {line}: head {head} references a token missing from the sentence")]
    DanglingHead { line: usize, head: usize },
    #[error("sentence ending at line {line} has {roots} root tokens")]
    MultipleRoots { line: usize, roots: usize },
    #[error("line {line}: feature has {found} values, expected {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: object {object} has a non-positive box")]
    NegativeBox { line: usize, object: usize },
    #[error("line {line}: object {object} stores area {stored}, box gives {computed}")]
    AreaMismatch {
        line: usize,
        object: usize,
        stored: u64,
        computed: u64,
    },
    #[error("line {line}: expected {expected} floats, found {found}")]
    RaggedVector {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: duplicate image id `{id}`")]
    DuplicateImage { line: usize, id: String },
    #[error("line {line}: unsupported format_version {found}")]
    Version { line: usize, found: u32 },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty embedding table")]
    EmptyTable,
    #[error("corpus file has no manifest record")]
    MissingManifest,
}

fn json_err(line: usize) -> impl Fn(serde_json::Error) -> FormatError {
    move |source| FormatError::Json { line, source }
}

// ---------------------------------------------------------------------------
// Dependency parses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseToken {
    /// 1-based position in the sentence.
    pub index: usize,
    pub surface: String,
    pub upos: String,
    /// Index of the governing token; 0 for the root.
    pub head: usize,
    pub deprel: String,
}

impl ParseToken {
    pub fn is_noun(&self) -> bool {
        matches!(self.upos.as_str(), "NOUN" | "PROPN")
    }

    /// Relation without its subtype (`nsubj:pass` -> `nsubj`).
    pub fn base_deprel(&self) -> &str {
        self.deprel.split(':').next().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSentence {
    pub id: String,
    pub tokens: Vec<ParseToken>,
}

impl ParsedSentence {
    pub fn root(&self) -> Option<&ParseToken> {
        self.tokens.iter().find(|t| t.head == 0)
    }

    pub fn token(&self, index: usize) -> Option<&ParseToken> {
        index.checked_sub(1).and_then(|i| self.tokens.get(i))
    }

    /// Dependents of `index` in surface order.
    pub fn dependents(&self, index: usize) -> impl Iterator<Item = &ParseToken> {
        self.tokens.iter().filter(move |t| t.head == index)
    }

    pub fn text(&self) -> String {
        let words: Vec<&str> = self.tokens.iter().map(|t| t.surface.as_str()).collect();
        words.join(" ")
    }
}

pub fn read_parse_file(path: impl AsRef<Path>) -> Result<Vec<ParsedSentence>, FormatError> {
    parse_conllu(BufReader::new(File::open(path)?))
}

/// Reads the 10-column tab-separated parse format. Only ID, FORM, UPOS, HEAD
/// and DEPREL are consumed; multiword ranges and empty nodes are skipped.
pub fn parse_conllu<R: BufRead>(reader: R) -> Result<Vec<ParsedSentence>, FormatError> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<(usize, ParseToken)> = Vec::new();
    let mut sentence_id: Option<String> = None;
    let mut last_line = 0;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            if !tokens.is_empty() {
                let id = sentence_id
                    .take()
                    .unwrap_or_else(|| format!("s{}", sentences.len() + 1));
                sentences.push(finish_sentence(id, std::mem::take(&mut tokens), line_no)?);
            }
            sentence_id = None;
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "sentence_id" || key.trim() == "sent_id" {
                    sentence_id = Some(value.trim().to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 10 {
            return Err(FormatError::MalformedRow {
                line: line_no,
                found: cols.len(),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let index: usize = cols[0].parse().map_err(|_| FormatError::BadValue {
            line: line_no,
            msg: format!("bad token id `{}`", cols[0]),
        })?;
        let head: usize = cols[6].parse().map_err(|_| FormatError::BadValue {
            line: line_no,
            msg: format!("bad head `{}`", cols[6]),
        })?;
        let expected = tokens.len() + 1;
        if index != expected {
            return Err(FormatError::BadValue {
                line: line_no,
                msg: format!("token id {index} breaks contiguity (expected {expected})"),
            });
        }
        tokens.push((
            line_no,
            ParseToken {
                index,
                surface: cols[1].to_string(),
                upos: cols[3].to_string(),
                head,
                deprel: cols[7].to_string(),
            },
        ));
    }
    if !tokens.is_empty() {
        let id = sentence_id.unwrap_or_else(|| format!("s{}", sentences.len() + 1));
        sentences.push(finish_sentence(id, tokens, last_line + 1)?);
    }
    Ok(sentences)
}

fn finish_sentence(
    id: String,
    tokens: Vec<(usize, ParseToken)>,
    end_line: usize,
) -> Result<ParsedSentence, FormatError> {
    let n = tokens.len();
    for (line, t) in &tokens {
        if t.head > n {
            return Err(FormatError::DanglingHead {
                line: *line,
                head: t.head,
            });
        }
        if t.head == t.index {
            return Err(FormatError::BadValue {
                line: *line,
                msg: "token is its own head".into(),
            });
        }
    }
    let roots = tokens.iter().filter(|(_, t)| t.head == 0).count();
    if roots != 1 {
        return Err(FormatError::MultipleRoots {
            line: end_line,
            roots,
        });
    }
    let tokens: Vec<ParseToken> = tokens.into_iter().map(|(_, t)| t).collect();
    // every token must reach the root
    for t in &tokens {
        let mut cur = t.head;
        let mut steps = 0;
        while cur != 0 {
            cur = tokens[cur - 1].head;
            steps += 1;
            if steps > n {
                return Err(FormatError::BadValue {
                    line: end_line,
                    msg: format!("token {} is on a head cycle", t.index),
                });
            }
        }
    }
    Ok(ParsedSentence { id, tokens })
}

pub fn write_parses<W: Write>(mut out: W, sentences: &[ParsedSentence]) -> std::io::Result<()> {
    for s in sentences {
        writeln!(out, "# sentence_id = {}", s.id)?;
        writeln!(out, "# text = {}", s.text())?;
        for t in &s.tokens {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t_",
                t.index,
                t.surface,
                t.surface.to_lowercase(),
                t.upos,
                t.head,
                t.deprel
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Detections and image records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub tag: String,
    pub bbox: BBox,
    pub area: u64,
    #[serde(default)]
    pub score: f32,
    pub feature: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_override: Option<String>,
}

impl DetectedObject {
    pub fn new(tag: impl Into<String>, bbox: BBox, score: f32, feature: Vec<f32>) -> Self {
        Self {
            tag: tag.into(),
            area: bbox.area(),
            bbox,
            score,
            feature,
            concept_override: None,
        }
    }

    /// The tag the model sees: the located concept name if one was assigned.
    pub fn effective_tag(&self) -> &str {
        self.concept_override.as_deref().unwrap_or(&self.tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub caption: String,
    pub objects: Vec<DetectedObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<String>,
}

impl ImageRecord {
    pub fn tags(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.effective_tag().to_string()).collect()
    }
}

/// Detector output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<DetectedObject>,
}

#[derive(Serialize, Deserialize)]
struct RawObject {
    tag: String,
    bbox: [i64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<u64>,
    #[serde(default)]
    score: f32,
    feature: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct RawDetections {
    #[serde(default = "default_version")]
    format_version: u32,
    image_id: String,
    width: u32,
    height: u32,
    objects: Vec<RawObject>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

fn check_version(line: usize, found: u32) -> Result<(), FormatError> {
    if found != FORMAT_VERSION {
        return Err(FormatError::Version { line, found });
    }
    Ok(())
}

pub fn read_detections(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, ImageDetections>, FormatError> {
    parse_detections(BufReader::new(File::open(path)?))
}

/// Reads detector records. Feature width is fixed by the first object seen.
pub fn parse_detections<R: BufRead>(
    reader: R,
) -> Result<BTreeMap<String, ImageDetections>, FormatError> {
    let mut out = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDetections = serde_json::from_str(&line).map_err(json_err(line_no))?;
        check_version(line_no, raw.format_version)?;
        let mut objects = Vec::with_capacity(raw.objects.len());
        for (k, o) in raw.objects.into_iter().enumerate() {
            let [x, y, w, h] = o.bbox;
            if w <= 0 || h <= 0 || x < 0 || y < 0 {
                return Err(FormatError::NegativeBox {
                    line: line_no,
                    object: k,
                });
            }
            let too_big = |v: i64| {
                u32::try_from(v).map_err(|_| FormatError::BadValue {
                    line: line_no,
                    msg: format!("object {k}: box coordinate {v} out of range"),
                })
            };
            let bbox = BBox {
                x: too_big(x)?,
                y: too_big(y)?,
                w: too_big(w)?,
                h: too_big(h)?,
            };
            if let Some(stored) = o.area {
                if stored != bbox.area() {
                    return Err(FormatError::AreaMismatch {
                        line: line_no,
                        object: k,
                        stored,
                        computed: bbox.area(),
                    });
                }
            }
            let expected = *dim.get_or_insert(o.feature.len());
            if o.feature.len() != expected {
                return Err(FormatError::DimensionMismatch {
                    line: line_no,
                    expected,
                    found: o.feature.len(),
                });
            }
            objects.push(DetectedObject::new(o.tag, bbox, o.score, o.feature));
        }
        if out.contains_key(&raw.image_id) {
            return Err(FormatError::DuplicateImage {
                line: line_no,
                id: raw.image_id,
            });
        }
        out.insert(
            raw.image_id,
            ImageDetections {
                width: raw.width,
                height: raw.height,
                objects,
            },
        );
    }
    Ok(out)
}

pub fn write_detections<W: Write>(
    mut out: W,
    detections: &BTreeMap<String, ImageDetections>,
) -> Result<(), FormatError> {
    for (id, det) in detections {
        let raw = RawDetections {
            format_version: FORMAT_VERSION,
            image_id: id.clone(),
            width: det.width,
            height: det.height,
            objects: det
                .objects
                .iter()
                .map(|o| RawObject {
                    tag: o.tag.clone(),
                    bbox: [
                        o.bbox.x as i64,
                        o.bbox.y as i64,
                        o.bbox.w as i64,
                        o.bbox.h as i64,
                    ],
                    area: Some(o.area),
                    score: o.score,
                    feature: o.feature.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &raw).map_err(json_err(0))?;
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    format_version: u32,
    #[serde(flatten)]
    record: ImageRecord,
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>, FormatError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(json_err(line_no))?;
        check_version(line_no, rec.format_version)?;
        for (k, o) in rec.record.objects.iter().enumerate() {
            if o.bbox.w == 0 || o.bbox.h == 0 {
                return Err(FormatError::NegativeBox {
                    line: line_no,
                    object: k,
                });
            }
            if o.area != o.bbox.area() {
                return Err(FormatError::AreaMismatch {
                    line: line_no,
                    object: k,
                    stored: o.area,
                    computed: o.bbox.area(),
                });
            }
        }
        out.push(rec.record);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut out: W, records: &[ImageRecord]) -> Result<(), FormatError> {
    for r in records {
        let line = RecordLine {
            format_version: FORMAT_VERSION,
            record: r.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(json_err(0))?;
        writeln!(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Word vectors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    words: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            dimension,
            words: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Inserts a vector; returns false and leaves the table unchanged if the
    /// word is already present (first occurrence wins).
    pub fn insert(&mut self, word: impl Into<String>, vector: &[f32]) -> bool {
        assert_eq!(vector.len(), self.dimension, "vector width");
        let word = word.into();
        if self.index.contains_key(&word) {
            return false;
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.data.extend_from_slice(vector);
        true
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.index
            .get(word)
            .map(|&i| &self.data[i * self.dimension..(i + 1) * self.dimension])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.words
            .iter()
            .zip(self.data.chunks_exact(self.dimension))
            .map(|(w, v)| (w.as_str(), v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableWarning {
    pub line: usize,
    pub word: String,
}

pub fn read_embedding_table(
    path: impl AsRef<Path>,
) -> Result<(EmbeddingTable, Vec<TableWarning>), FormatError> {
    parse_embedding_table(BufReader::new(File::open(path)?))
}

/// Parses a word-vector text dump. Duplicate words keep the first vector and
/// produce a warning.
pub fn parse_embedding_table<R: BufRead>(
    reader: R,
) -> Result<(EmbeddingTable, Vec<TableWarning>), FormatError> {
    let mut table: Option<EmbeddingTable> = None;
    let mut header_dim: Option<usize> = None;
    let mut warnings = Vec::new();
    let mut floats = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if line_no == 1 && rest.len() == 1 {
            if let (Ok(_count), Ok(dim)) = (word.parse::<usize>(), rest[0].parse::<usize>()) {
                header_dim = Some(dim);
                continue;
            }
        }
        floats.clear();
        for s in &rest {
            floats.push(s.parse::<f32>().map_err(|_| FormatError::BadValue {
                line: line_no,
                msg: format!("not a number: `{s}`"),
            })?);
        }
        let table = match &mut table {
            Some(t) => t,
            None => {
                let dim = header_dim.unwrap_or(floats.len());
                if dim == 0 {
                    return Err(FormatError::RaggedVector {
                        line: line_no,
                        expected: 1,
                        found: 0,
                    });
                }
                table.insert(EmbeddingTable::new(dim))
            }
        };
        if floats.len() != table.dimension() {
            return Err(FormatError::RaggedVector {
                line: line_no,
                expected: table.dimension(),
                found: floats.len(),
            });
        }
        if !table.insert(word, &floats) {
            log::warn!("line {line_no}: duplicate word `{word}`, keeping first vector");
            warnings.push(TableWarning {
                line: line_no,
                word: word.to_string(),
            });
        }
    }
    match table {
        Some(t) => Ok((t, warnings)),
        None => Err(FormatError::EmptyTable),
    }
}

pub fn write_embedding_table<W: Write>(mut out: W, table: &EmbeddingTable) -> std::io::Result<()> {
    writeln!(out, "{} {}", table.len(), table.dimension())?;
    for (word, v) in table.iter() {
        write!(out, "{word}")?;
        for x in v {
            write!(out, " {x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Knowledge base
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualConcept {
    pub name: String,
    pub category: String,
    pub knowledge: String,
}

#[derive(Deserialize)]
struct RawConcept {
    name: Option<String>,
    category: Option<String>,
    knowledge: Option<String>,
}

pub fn read_knowledge_base(path: impl AsRef<Path>) -> Result<Vec<VisualConcept>, FormatError> {
    parse_knowledge_base(BufReader::new(File::open(path)?))
}

pub fn parse_knowledge_base<R: BufRead>(reader: R) -> Result<Vec<VisualConcept>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawConcept = serde_json::from_str(&line).map_err(json_err(line_no))?;
        let field = |v: Option<String>, field: &'static str| match v {
            Some(s) if !s.trim().is_empty() => Ok(s),
            _ => Err(FormatError::MissingField {
                line: line_no,
                field,
            }),
        };
        out.push(VisualConcept {
            name: field(raw.name, "name")?,
            category: field(raw.category, "category")?,
            knowledge: field(raw.knowledge, "knowledge")?,
        });
    }
    Ok(out)
}

pub fn write_knowledge_base<W: Write>(
    mut out: W,
    concepts: &[VisualConcept],
) -> Result<(), FormatError> {
    for c in concepts {
        serde_json::to_writer(&mut out, c).map_err(json_err(0))?;
        writeln!(out)?;
    }
    Ok(())
}

/// Encyclopedia page text, one JSON object per line. `sentence_id` names the
/// parse of the page's first sentence and defaults to the concept name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageText {
    pub concept_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_id: Option<String>,
    pub text: String,
}

impl PageText {
    pub fn parse_id(&self) -> &str {
        self.sentence_id.as_deref().unwrap_or(&self.concept_name)
    }
}

pub fn read_pages(path: impl AsRef<Path>) -> Result<Vec<PageText>, FormatError> {
    parse_pages(BufReader::new(File::open(path)?))
}

pub fn parse_pages<R: BufRead>(reader: R) -> Result<Vec<PageText>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(json_err(i + 1))?);
    }
    Ok(out)
}

pub fn write_pages<W: Write>(mut out: W, pages: &[PageText]) -> Result<(), FormatError> {
    for p in pages {
        serde_json::to_writer(&mut out, p).map_err(json_err(0))?;
        writeln!(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training corpus
// ---------------------------------------------------------------------------

/// Where the supervision of an example came from; used for audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    /// Concept whose knowledge was attached as `k`.
    pub knowledge_concept: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub located_object: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<crate::negatives::ReplacementRecord>,
    /// Image whose caption (ITM label 1) or tags (ITM label 2) were borrowed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itm_donor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    /// One row per kept object: detector feature followed by 6 box values.
    pub visual_features: Vec<Vec<f32>>,
    pub mlm_positions: Vec<usize>,
    pub mlm_targets: Vec<u32>,
    pub itm_label: u8,
    pub ikm_label: u8,
    pub iec_label: u8,
    pub source_image_id: String,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub itm_ratio: Vec<u32>,
    pub ikm_ratio: Vec<u32>,
    pub iec_ratio: Vec<u32>,
    pub mlm_rate: f64,
    pub max_text_tokens: usize,
    pub max_objects: usize,
    /// Width of a visual row (detector feature + box geometry).
    pub visual_width: usize,
    pub example_count: usize,
    pub itm_counts: Vec<u64>,
    pub ikm_counts: Vec<u64>,
    pub iec_counts: Vec<u64>,
    /// Masking is decided once at assembly time, not per epoch.
    pub masking: String,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub failures: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum CorpusLine {
    Manifest(CorpusManifest),
    Example(TrainingExample),
}

pub fn write_corpus<W: Write>(
    out: W,
    manifest: &CorpusManifest,
    examples: &[TrainingExample],
) -> Result<(), FormatError> {
    let mut out = BufWriter::new(out);
    serde_json::to_writer(&mut out, &CorpusLine::Manifest(manifest.clone())).map_err(json_err(0))?;
    writeln!(out)?;
    for e in examples {
        // clone-free path would need a borrowed enum; examples are small
        serde_json::to_writer(&mut out, &CorpusLine::Example(e.clone())).map_err(json_err(0))?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(
    path: impl AsRef<Path>,
) -> Result<(CorpusManifest, Vec<TrainingExample>), FormatError> {
    parse_corpus(BufReader::new(File::open(path)?))
}

pub fn parse_corpus<R: BufRead>(
    reader: R,
) -> Result<(CorpusManifest, Vec<TrainingExample>), FormatError> {
    let mut manifest = None;
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(json_err(line_no))? {
            CorpusLine::Manifest(m) => {
                check_version(line_no, m.format_version)?;
                manifest = Some(m);
            }
            CorpusLine::Example(e) => {
                if manifest.is_none() {
                    return Err(FormatError::MissingManifest);
                }
                examples.push(e);
            }
        }
    }
    manifest
        .map(|m| (m, examples))
        .ok_or(FormatError::MissingManifest)
}

// ---------------------------------------------------------------------------
// Zero-shot tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotClass {
    pub name: String,
    pub knowledge: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotItem {
    pub gold: usize,
    pub record: ImageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTask {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub classes: Vec<ZeroShotClass>,
    pub items: Vec<ZeroShotItem>,
}

impl ZeroShotTask {
    pub fn validate(&self) -> Result<(), String> {
        if self.classes.len() < 2 {
            return Err(format!("task needs at least 2 classes, has {}", self.classes.len()));
        }
        if let Some(item) = self.items.iter().find(|it| it.gold >= self.classes.len()) {
            return Err(format!(
                "item {} has gold class {} out of range",
                item.record.image_id, item.gold
            ));
        }
        Ok(())
    }
}

pub fn read_zero_shot_task(path: impl AsRef<Path>) -> Result<ZeroShotTask, FormatError> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    let task: ZeroShotTask = serde_json::from_str(&s).map_err(json_err(1))?;
    check_version(1, task.format_version)?;
    task.validate()
        .map_err(|msg| FormatError::BadValue { line: 1, msg })?;
    Ok(task)
}

pub fn write_zero_shot_task<W: Write>(out: W, task: &ZeroShotTask) -> Result<(), FormatError> {
    serde_json::to_writer_pretty(out, task).map_err(json_err(0))
}
