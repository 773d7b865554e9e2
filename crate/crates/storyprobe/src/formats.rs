//! File formats: corpus documents, campaign and instrument files, mock
//! scripts, event logs and the tabular exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use storyprobe_core::assessment::{
    score_big_five, score_climate, score_ingame, code_political, BigFiveTrait, InstrumentKind,
    PoliticalSubscale, ResponseRecord, ScoringError, SurveyInstrument, Wave,
};
use storyprobe_core::corpus::{CorpusError, EntryDraft, WorldCorpus};
use storyprobe_core::gateway::MockScript;
use storyprobe_core::narrative::{CampaignSpec, EventRecord};
use storyprobe_core::stats::{CorrelationReport, Dataset, ParticipantRow, StudyInstruments};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FormatError {
    fn invalid(path: impl Into<String>, message: impl ToString) -> Self {
        FormatError::Invalid {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub fn read_file(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), FormatError> {
    fs::write(path, contents).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Json,
    FrontMatter,
}

impl CorpusFormat {
    /// `.json` is structured; anything else is read as front matter.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => CorpusFormat::Json,
            _ => CorpusFormat::FrontMatter,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusDocument {
    entries: Vec<EntryDraft>,
}

pub fn parse_corpus_json(text: &str) -> Result<WorldCorpus, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::NoEntries);
    }
    let doc: CorpusDocument = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    WorldCorpus::from_drafts(doc.entries)
}

/// Canonical structured form. Word counts are written out so a reader can
/// check them without recounting.
pub fn corpus_to_json(corpus: &WorldCorpus) -> String {
    let doc = CorpusDocument {
        entries: corpus.drafts(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("corpus serializes");
    s.push('\n');
    s
}

const DELIMITER: &str = "---";

/// Parses the front-matter form: each entry is a `---` line, `key: value`
/// header lines, another `---` line, then the body up to the next `---`.
/// Recognised keys are `id`, `category`, `title`, `tags` (comma separated)
/// and `word_count`.
pub fn parse_corpus_front_matter(text: &str) -> Result<WorldCorpus, CorpusError> {
    // Sections between delimiter lines, each with the 1-based line number of
    // the delimiter that opens it.
    let mut sections: Vec<(usize, Vec<&str>)> = Vec::new();
    let mut preamble = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim_end() == DELIMITER {
            sections.push((i + 1, Vec::new()));
        } else if let Some((_, lines)) = sections.last_mut() {
            lines.push(line);
        } else {
            preamble.push((i + 1, line));
        }
    }
    if let Some((line, _)) = preamble.iter().find(|(_, l)| !l.trim().is_empty()) {
        return Err(CorpusError::Parse {
            line: *line,
            message: "text before the first --- delimiter".into(),
        });
    }
    if sections.is_empty() {
        return Err(CorpusError::NoEntries);
    }
    if sections.len() % 2 == 1 {
        let (line, _) = sections.last().expect("non-empty");
        return Err(CorpusError::Parse {
            line: *line,
            message: "header block has no body".into(),
        });
    }

    let mut drafts = Vec::with_capacity(sections.len() / 2);
    for pair in sections.chunks(2) {
        let (open, headers) = &pair[0];
        let (_, body) = &pair[1];
        let mut draft = EntryDraft::default();
        for (offset, line) in headers.iter().enumerate() {
            let line_no = open + offset + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| CorpusError::Parse {
                line: line_no,
                message: format!("expected `key: value`, found {line:?}"),
            })?;
            let value = value.trim();
            match key.trim() {
                "id" => draft.id = value.into(),
                "category" => draft.category = value.into(),
                "title" => draft.title = value.into(),
                "tags" => {
                    draft.tags = value
                        .split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(String::from)
                        .collect()
                }
                "word_count" => {
                    draft.word_count = Some(value.parse().map_err(|_| CorpusError::Parse {
                        line: line_no,
                        message: format!("word_count {value:?} is not a number"),
                    })?)
                }
                other => {
                    return Err(CorpusError::Parse {
                        line: line_no,
                        message: format!("unknown header {other:?}"),
                    })
                }
            }
        }
        if draft.id.is_empty() {
            return Err(CorpusError::Parse {
                line: *open,
                message: "entry has no id header".into(),
            });
        }
        draft.body = body.join("\n").trim().to_string();
        drafts.push(draft);
    }
    WorldCorpus::from_drafts(drafts)
}

pub fn corpus_to_front_matter(corpus: &WorldCorpus) -> String {
    let mut out = String::new();
    for e in corpus.entries() {
        let tags: Vec<&str> = e.tags.iter().map(String::as_str).collect();
        let _ = writeln!(out, "{DELIMITER}");
        let _ = writeln!(out, "id: {}", e.id);
        let _ = writeln!(out, "category: {}", e.category);
        let _ = writeln!(out, "title: {}", e.title);
        if !tags.is_empty() {
            let _ = writeln!(out, "tags: {}", tags.join(", "));
        }
        let _ = writeln!(out, "{DELIMITER}");
        let _ = writeln!(out, "{}", e.body);
    }
    out
}

pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<WorldCorpus, CorpusError> {
    match format {
        CorpusFormat::Json => parse_corpus_json(text),
        CorpusFormat::FrontMatter => parse_corpus_front_matter(text),
    }
}

pub fn render_corpus(corpus: &WorldCorpus, format: CorpusFormat) -> String {
    match format {
        CorpusFormat::Json => corpus_to_json(corpus),
        CorpusFormat::FrontMatter => corpus_to_front_matter(corpus),
    }
}

pub fn load_corpus(path: &Path) -> Result<WorldCorpus, FormatError> {
    let text = read_file(path)?;
    parse_corpus(&text, CorpusFormat::from_path(path))
        .map_err(|e| FormatError::invalid(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Campaign, instruments, mock script

fn parse_json<T: for<'de> Deserialize<'de>>(origin: &str, text: &str) -> Result<T, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::invalid(origin, e))
}

pub fn parse_campaign(origin: &str, text: &str) -> Result<CampaignSpec, FormatError> {
    parse_json(origin, text)
}

pub fn load_campaign(path: &Path) -> Result<CampaignSpec, FormatError> {
    parse_campaign(&path.display().to_string(), &read_file(path)?)
}

pub fn parse_mock_script(origin: &str, text: &str) -> Result<MockScript, FormatError> {
    parse_json(origin, text)
}

pub fn load_mock_script(path: &Path) -> Result<MockScript, FormatError> {
    parse_mock_script(&path.display().to_string(), &read_file(path)?)
}

/// Hex SHA-256 of a file's bytes, recorded so an export can name the exact
/// instrument text it was scored against.
pub fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedInstrument {
    pub instrument: SurveyInstrument,
    pub sha256: String,
}

pub fn parse_instrument(origin: &str, text: &str) -> Result<LoadedInstrument, FormatError> {
    let instrument: SurveyInstrument = parse_json(origin, text)?;
    instrument
        .validate()
        .map_err(|e| FormatError::invalid(origin, e))?;
    Ok(LoadedInstrument {
        instrument,
        sha256: content_hash(text),
    })
}

/// The four instruments of a study, one of each kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentSet {
    pub climate: LoadedInstrument,
    pub big_five: LoadedInstrument,
    pub political: LoadedInstrument,
    pub ingame: LoadedInstrument,
}

impl InstrumentSet {
    /// Sorts loaded instruments by kind. Exactly one of each kind is
    /// required, and the in-game items must resolve against the climate
    /// scale.
    pub fn from_loaded(
        origin: &str,
        loaded: Vec<LoadedInstrument>,
    ) -> Result<Self, FormatError> {
        let mut by_kind: BTreeMap<&'static str, LoadedInstrument> = BTreeMap::new();
        for l in loaded {
            let key = kind_key(l.instrument.kind);
            if let Some(prev) = by_kind.insert(key, l) {
                return Err(FormatError::invalid(
                    origin,
                    format!("more than one {key} instrument (first: {})", prev.instrument.id),
                ));
            }
        }
        let mut take = |kind: InstrumentKind| {
            by_kind
                .remove(kind_key(kind))
                .ok_or_else(|| FormatError::invalid(origin, format!("no {} instrument", kind_key(kind))))
        };
        let set = Self {
            climate: take(InstrumentKind::Climate)?,
            big_five: take(InstrumentKind::BigFive)?,
            political: take(InstrumentKind::Political)?,
            ingame: take(InstrumentKind::InGame)?,
        };
        set.ingame
            .instrument
            .validate_sources(&set.climate.instrument)
            .map_err(|e| FormatError::invalid(origin, e))?;
        Ok(set)
    }

    /// Reads every `*.json` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, FormatError> {
        let origin = dir.display().to_string();
        let entries = fs::read_dir(dir).map_err(|source| FormatError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let loaded = paths
            .iter()
            .map(|p| parse_instrument(&p.display().to_string(), &read_file(p)?))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_loaded(&origin, loaded)
    }

    pub fn study(&self) -> StudyInstruments<'_> {
        StudyInstruments {
            climate: &self.climate.instrument,
            big_five: &self.big_five.instrument,
            political: &self.political.instrument,
            ingame: &self.ingame.instrument,
        }
    }

    pub fn all(&self) -> [&LoadedInstrument; 4] {
        [&self.climate, &self.big_five, &self.political, &self.ingame]
    }

    pub fn by_id(&self, id: &str) -> Option<&SurveyInstrument> {
        self.all()
            .into_iter()
            .map(|l| &l.instrument)
            .find(|i| i.id == id)
    }
}

fn kind_key(kind: InstrumentKind) -> &'static str {
    match kind {
        InstrumentKind::Climate => "climate",
        InstrumentKind::BigFive => "big-five",
        InstrumentKind::Political => "political",
        InstrumentKind::InGame => "in-game",
    }
}

// ---------------------------------------------------------------------------
// Event logs

/// One record per line.
pub fn events_to_jsonl(records: &[EventRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_events_jsonl(origin: &str, text: &str) -> Result<Vec<EventRecord>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| FormatError::invalid(format!("{origin}:{}", i + 1), e))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Response tables

/// Derived score columns for one instrument, in a fixed order.
fn score_columns(kind: InstrumentKind) -> Vec<String> {
    match kind {
        InstrumentKind::Climate | InstrumentKind::InGame => vec!["score_mean".into()],
        InstrumentKind::BigFive => BigFiveTrait::ALL
            .iter()
            .map(|t| format!("score_{}", t.as_str()))
            .collect(),
        InstrumentKind::Political => PoliticalSubscale::ALL
            .iter()
            .map(|s| format!("score_{}", s.as_str()))
            .collect(),
    }
}

fn scores_for(
    instrument: &SurveyInstrument,
    record: &ResponseRecord,
) -> Result<Vec<f64>, ScoringError> {
    Ok(match instrument.kind {
        InstrumentKind::Climate => vec![score_climate(instrument, record)?.mean],
        InstrumentKind::InGame => vec![score_ingame(instrument, record)?.mean],
        InstrumentKind::BigFive => {
            let s = score_big_five(instrument, record)?;
            BigFiveTrait::ALL.iter().map(|t| s[t]).collect()
        }
        InstrumentKind::Political => {
            let s = code_political(instrument, record)?;
            PoliticalSubscale::ALL.iter().map(|p| s.get(*p)).collect()
        }
    })
}

const RECORD_COLUMNS: [&str; 4] = ["participant_id", "wave", "timestamp", "instrument_version"];

/// One row per participant and wave: item answers in instrument order, then
/// derived scores. Records that fail to score get empty score cells.
pub fn responses_to_csv(
    instrument: &SurveyInstrument,
    records: &[ResponseRecord],
) -> Result<String, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let item_ids: Vec<&str> = instrument.items.iter().map(|i| i.id()).collect();
    let mut header: Vec<String> = RECORD_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(item_ids.iter().map(|s| s.to_string()));
    header.extend(score_columns(instrument.kind));
    w.write_record(&header)?;

    let mut sorted: Vec<&ResponseRecord> = records
        .iter()
        .filter(|r| r.instrument_id == instrument.id)
        .collect();
    sorted.sort_by(|a, b| {
        (&a.participant_id, a.wave, a.timestamp).cmp(&(&b.participant_id, b.wave, b.timestamp))
    });
    for r in sorted {
        let mut row = vec![
            r.participant_id.clone(),
            r.wave.as_str().to_string(),
            r.timestamp.to_string(),
            r.instrument_version.clone(),
        ];
        row.extend(
            item_ids
                .iter()
                .map(|id| r.answers.get(*id).map(u8::to_string).unwrap_or_default()),
        );
        match scores_for(instrument, r) {
            Ok(scores) => row.extend(scores.iter().map(|v| v.to_string())),
            Err(_) => row.extend(score_columns(instrument.kind).iter().map(|_| String::new())),
        }
        w.write_record(&row)?;
    }
    Ok(csv_string(w))
}

/// Reads rows written by [`responses_to_csv`] (or hand-made sheets with the
/// same leading columns). Score columns are ignored; blank answers are
/// omitted from the record.
pub fn responses_from_csv(
    instrument: &SurveyInstrument,
    text: &str,
) -> Result<Vec<ResponseRecord>, FormatError> {
    let origin = format!("{} responses", instrument.id);
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    for (i, want) in RECORD_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(*want) {
            return Err(FormatError::invalid(
                &origin,
                format!("column {} must be {want}", i + 1),
            ));
        }
    }
    let mut out = Vec::new();
    for (row_no, row) in r.records().enumerate() {
        let row = row?;
        let at = |msg: String| FormatError::invalid(format!("{origin} row {}", row_no + 2), msg);
        let wave: Wave = row[1].parse().map_err(at)?;
        let timestamp = row[2]
            .parse()
            .map_err(|_| at(format!("bad timestamp {:?}", &row[2])))?;
        let mut answers = BTreeMap::new();
        for (h, v) in headers.iter().zip(row.iter()).skip(RECORD_COLUMNS.len()) {
            if h.starts_with("score_") || v.trim().is_empty() {
                continue;
            }
            let value = v
                .trim()
                .parse()
                .map_err(|_| at(format!("{h}: bad answer {v:?}")))?;
            answers.insert(h.to_string(), value);
        }
        out.push(ResponseRecord {
            participant_id: row[0].to_string(),
            instrument_id: instrument.id.clone(),
            instrument_version: row[3].to_string(),
            timestamp,
            wave,
            answers,
        });
    }
    Ok(out)
}

/// Coded demographic fields, in column order.
pub const DEMOGRAPHIC_FIELDS: [&str; 5] =
    ["gender", "age", "education", "occupation", "ethnicity"];

/// Column order of the dataset export.
pub fn dataset_columns() -> Vec<String> {
    let mut cols: Vec<String> = ["participant_id", "pre_climate", "ingame", "post_climate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(BigFiveTrait::ALL.iter().map(|t| t.as_str().to_string()));
    for wave in ["pre", "post"] {
        cols.extend(
            PoliticalSubscale::ALL
                .iter()
                .map(|s| format!("{}_{wave}", s.as_str())),
        );
    }
    cols.extend(DEMOGRAPHIC_FIELDS.iter().map(|s| s.to_string()));
    cols
}

pub fn dataset_row(row: &ParticipantRow) -> Vec<String> {
    let mut out = vec![
        row.participant_id.clone(),
        row.pre_climate.to_string(),
        row.ingame.to_string(),
        row.post_climate.to_string(),
    ];
    out.extend(
        BigFiveTrait::ALL
            .iter()
            .map(|t| row.big_five.get(t).map(f64::to_string).unwrap_or_default()),
    );
    for scores in [&row.political_pre, &row.political_post] {
        out.extend(PoliticalSubscale::ALL.iter().map(|s| scores.get(*s).to_string()));
    }
    out.extend(
        DEMOGRAPHIC_FIELDS
            .iter()
            .map(|f| row.demographics.get(*f).cloned().unwrap_or_default()),
    );
    out
}

/// Complete-case rows, sorted by participant id.
pub fn dataset_to_csv(dataset: &Dataset) -> Result<String, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(dataset_columns())?;
    let mut rows: Vec<&ParticipantRow> = dataset.rows.iter().collect();
    rows.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    for row in rows {
        w.write_record(dataset_row(row))?;
    }
    Ok(csv_string(w))
}

pub fn exclusions_to_csv(dataset: &Dataset) -> Result<String, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["participant_id", "reasons"])?;
    for e in &dataset.exclusions {
        w.write_record([e.participant_id.as_str(), &e.reasons.join("; ")])?;
    }
    Ok(csv_string(w))
}

pub fn scatter_to_csv(points: &[(f64, f64)]) -> Result<String, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y"])?;
    for (x, y) in points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    Ok(csv_string(w))
}

pub fn report_to_json(report: &CorrelationReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> String {
    let bytes = w.into_inner().expect("in-memory writer flushes");
    String::from_utf8(bytes).expect("csv output is utf-8")
}
