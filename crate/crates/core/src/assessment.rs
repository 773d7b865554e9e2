//! Survey instruments, response records and scoring.
//!
//! Four instrument kinds are supported: the climate attitude questionnaire,
//! the in-game dialogue survey (three scored options per item), the IPIP
//! Big Five markers and the political attitude items. Instruments are plain
//! data; keying lives in the item definitions, never in code.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::narrative::{Phase, SessionState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemCategory {
    Belief,
    #[serde(alias = "Intentions")]
    Intention,
    Personality,
    Political,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KeyDirection {
    #[default]
    ProConstruct,
    AntiConstruct,
}

fn one() -> u8 {
    1
}
fn five() -> u8 {
    5
}
fn is_false(b: &bool) -> bool {
    !*b
}
fn is_pro(k: &KeyDirection) -> bool {
    *k == KeyDirection::ProConstruct
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyItem {
    pub id: String,
    pub text: String,
    pub category: ItemCategory,
    pub subscale: String,
    #[serde(default = "one")]
    pub scale_min: u8,
    #[serde(default = "five")]
    pub scale_max: u8,
    #[serde(default, skip_serializing_if = "is_false")]
    pub reverse_coded: bool,
    #[serde(default, skip_serializing_if = "is_pro")]
    pub key_direction: KeyDirection,
}

impl SurveyItem {
    pub fn in_scale(&self, raw: u8) -> bool {
        (self.scale_min..=self.scale_max).contains(&raw)
    }

    /// Mirrors a value around the scale midpoint.
    pub fn flip(&self, value: u8) -> u8 {
        self.scale_min + self.scale_max - value
    }

    /// Applies reverse coding. Political keying is handled separately by
    /// [`code_political`].
    pub fn code(&self, raw: u8) -> Result<u8, ScoringError> {
        if !self.in_scale(raw) {
            return Err(ScoringError::OutOfScale {
                item: self.id.clone(),
                value: raw,
            });
        }
        Ok(if self.reverse_coded { self.flip(raw) } else { raw })
    }

    fn key(&self, raw: u8) -> Result<u8, ScoringError> {
        if !self.in_scale(raw) {
            return Err(ScoringError::OutOfScale {
                item: self.id.clone(),
                value: raw,
            });
        }
        Ok(match self.key_direction {
            KeyDirection::ProConstruct => raw,
            KeyDirection::AntiConstruct => self.flip(raw),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InGameOption {
    pub label: String,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InGameItem {
    pub id: String,
    pub npc_text: String,
    pub options: Vec<InGameOption>,
    pub source_item: String,
}

impl InGameItem {
    /// Score of a 1-based option number.
    pub fn option_score(&self, option: u8) -> Option<u8> {
        let idx = usize::from(option).checked_sub(1)?;
        self.options.get(idx).map(|o| o.score)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstrumentItem {
    InGame(InGameItem),
    Likert(SurveyItem),
}

impl InstrumentItem {
    pub fn id(&self) -> &str {
        match self {
            InstrumentItem::InGame(i) => &i.id,
            InstrumentItem::Likert(i) => &i.id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstrumentKind {
    Climate,
    BigFive,
    Political,
    InGame,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyInstrument {
    pub id: String,
    pub version: String,
    pub kind: InstrumentKind,
    #[serde(default)]
    pub randomize_order: bool,
    /// Anchor labels from `scale_min` upward, for display only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_labels: Option<Vec<String>>,
    pub items: Vec<InstrumentItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InstrumentError {
    #[error("instrument {0} has no items")]
    Empty(String),
    #[error("duplicate item id {0}")]
    DuplicateItem(String),
    #[error("item {0}: scale_min must be below scale_max")]
    BadScale(String),
    #[error("item {0}: expected an in-game item")]
    ExpectedInGame(String),
    #[error("item {0}: expected a Likert item")]
    ExpectedLikert(String),
    #[error("item {id}: {reason}")]
    Options { id: String, reason: String },
    #[error("item {id}: source item {source_item} not found")]
    UnresolvedSource { id: String, source_item: String },
    #[error("item {id}: unknown subscale {subscale}")]
    UnknownSubscale { id: String, subscale: String },
}

/// Scores an in-game option may carry: the three-choice answer embedded in
/// the 1..=5 survey scale.
pub const INGAME_OPTION_SCORES: [u8; 3] = [1, 3, 5];

impl SurveyInstrument {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: &str) -> Option<&InstrumentItem> {
        self.items.iter().find(|i| i.id() == id)
    }

    pub fn likert_items(&self) -> impl Iterator<Item = &SurveyItem> {
        self.items.iter().filter_map(|i| match i {
            InstrumentItem::Likert(s) => Some(s),
            InstrumentItem::InGame(_) => None,
        })
    }

    pub fn ingame_items(&self) -> impl Iterator<Item = &InGameItem> {
        self.items.iter().filter_map(|i| match i {
            InstrumentItem::InGame(g) => Some(g),
            InstrumentItem::Likert(_) => None,
        })
    }

    /// Structural checks. In-game items additionally need
    /// [`validate_sources`](Self::validate_sources).
    pub fn validate(&self) -> Result<(), InstrumentError> {
        if self.items.is_empty() {
            return Err(InstrumentError::Empty(self.id.clone()));
        }
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(item.id()) {
                return Err(InstrumentError::DuplicateItem(item.id().into()));
            }
            match (self.kind, item) {
                (InstrumentKind::InGame, InstrumentItem::InGame(g)) => check_options(g)?,
                (InstrumentKind::InGame, InstrumentItem::Likert(s)) => {
                    return Err(InstrumentError::ExpectedInGame(s.id.clone()))
                }
                (_, InstrumentItem::InGame(g)) => {
                    return Err(InstrumentError::ExpectedLikert(g.id.clone()))
                }
                (kind, InstrumentItem::Likert(s)) => {
                    if s.scale_min >= s.scale_max {
                        return Err(InstrumentError::BadScale(s.id.clone()));
                    }
                    let known = match kind {
                        InstrumentKind::BigFive => s.subscale.parse::<BigFiveTrait>().is_ok(),
                        InstrumentKind::Political => {
                            s.subscale.parse::<PoliticalSubscale>().is_ok()
                        }
                        _ => true,
                    };
                    if !known {
                        return Err(InstrumentError::UnknownSubscale {
                            id: s.id.clone(),
                            subscale: s.subscale.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Every in-game item's `source_item` must name an item of `source`.
    pub fn validate_sources(&self, source: &SurveyInstrument) -> Result<(), InstrumentError> {
        for g in self.ingame_items() {
            if source.item(&g.source_item).is_none() {
                return Err(InstrumentError::UnresolvedSource {
                    id: g.id.clone(),
                    source_item: g.source_item.clone(),
                });
            }
        }
        Ok(())
    }

    /// Item ids in the order a participant sees them. Shuffled with a seeded
    /// generator when `randomize_order` is set, authored order otherwise.
    pub fn presentation_order(&self, seed: u64) -> Vec<&str> {
        let mut ids: Vec<&str> = self.items.iter().map(|i| i.id()).collect();
        if self.randomize_order {
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        ids
    }
}

fn check_options(item: &InGameItem) -> Result<(), InstrumentError> {
    let fail = |reason: String| InstrumentError::Options {
        id: item.id.clone(),
        reason,
    };
    if item.options.len() != 3 {
        return Err(fail(format!("{} options, expected 3", item.options.len())));
    }
    let mut scores: Vec<u8> = item.options.iter().map(|o| o.score).collect();
    if let Some(bad) = scores.iter().find(|s| !INGAME_OPTION_SCORES.contains(s)) {
        return Err(fail(format!("option score {bad} not in {{1,3,5}}")));
    }
    scores.sort_unstable();
    scores.dedup();
    if scores.len() != 3 {
        return Err(fail("option scores repeat".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Wave {
    Pre,
    InGame,
    Post,
}

impl Wave {
    pub const ALL: [Wave; 3] = [Wave::Pre, Wave::InGame, Wave::Post];

    pub fn as_str(self) -> &'static str {
        match self {
            Wave::Pre => "pre",
            Wave::InGame => "ingame",
            Wave::Post => "post",
        }
    }
}

impl fmt::Display for Wave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Wave {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Wave::ALL
            .into_iter()
            .find(|w| w.as_str().eq_ignore_ascii_case(s) || format!("{w:?}") == s)
            .ok_or_else(|| format!("unknown wave {s}"))
    }
}

/// Raw answers of one participant to one instrument in one wave. Likert
/// answers are scale values; in-game answers are 1-based option numbers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub participant_id: String,
    pub instrument_id: String,
    pub instrument_version: String,
    pub timestamp: u64,
    pub wave: Wave,
    pub answers: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoringError {
    #[error("record is for instrument {found}, expected {expected}")]
    WrongInstrument { expected: String, found: String },
    #[error("instrument {id} is a {found:?} instrument, expected {expected:?}")]
    WrongKind {
        id: String,
        expected: InstrumentKind,
        found: InstrumentKind,
    },
    #[error("record answers version {found} of {id}, loaded version is {expected}")]
    WrongVersion {
        id: String,
        expected: String,
        found: String,
    },
    #[error("{0} unanswered")]
    Unanswered(String),
    #[error("{item}: value {value} out of scale")]
    OutOfScale { item: String, value: u8 },
    #[error("{item}: unknown option {option}")]
    UnknownOption { item: String, option: u8 },
    #[error("answer for unknown item {0}")]
    UnknownItem(String),
    #[error("{0}")]
    Instrument(#[from] InstrumentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mean: f64,
    /// Coded value per item, after reverse coding or option lookup.
    pub per_item: BTreeMap<String, u8>,
}

fn check_record(
    instrument: &SurveyInstrument,
    record: &ResponseRecord,
    kinds: &[InstrumentKind],
) -> Result<(), ScoringError> {
    if !kinds.contains(&instrument.kind) {
        return Err(ScoringError::WrongKind {
            id: instrument.id.clone(),
            expected: kinds[0],
            found: instrument.kind,
        });
    }
    if record.instrument_id != instrument.id {
        return Err(ScoringError::WrongInstrument {
            expected: instrument.id.clone(),
            found: record.instrument_id.clone(),
        });
    }
    if record.instrument_version != instrument.version {
        return Err(ScoringError::WrongVersion {
            id: instrument.id.clone(),
            expected: instrument.version.clone(),
            found: record.instrument_version.clone(),
        });
    }
    if let Some(extra) = record.answers.keys().find(|k| instrument.item(k).is_none()) {
        return Err(ScoringError::UnknownItem(extra.clone()));
    }
    Ok(())
}

fn raw_answer(record: &ResponseRecord, id: &str) -> Result<u8, ScoringError> {
    record
        .answers
        .get(id)
        .copied()
        .ok_or_else(|| ScoringError::Unanswered(id.to_string()))
}

fn mean_of(values: impl IntoIterator<Item = u8>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0u32, 0u32), |(s, n), v| (s + u32::from(v), n + 1));
    f64::from(sum) / f64::from(n.max(1))
}

/// Mean of reverse-coded values over every Likert item of the instrument.
pub fn score_likert(
    instrument: &SurveyInstrument,
    record: &ResponseRecord,
) -> Result<Scores, ScoringError> {
    check_record(
        instrument,
        record,
        &[
            InstrumentKind::Climate,
            InstrumentKind::BigFive,
            InstrumentKind::Political,
        ],
    )?;
    let mut per_item = BTreeMap::new();
    for item in instrument.likert_items() {
        per_item.insert(item.id.clone(), item.code(raw_answer(record, &item.id)?)?);
    }
    Ok(Scores {
        mean: mean_of(per_item.values().copied()),
        per_item,
    })
}

pub fn score_climate(
    instrument: &SurveyInstrument,
    record: &ResponseRecord,
) -> Result<Scores, ScoringError> {
    check_record(instrument, record, &[InstrumentKind::Climate])?;
    score_likert(instrument, record)
}

pub fn score_ingame(
    instrument: &SurveyInstrument,
    record: &ResponseRecord,
) -> Result<Scores, ScoringError> {
    check_record(instrument, record, &[InstrumentKind::InGame])?;
    let mut per_item = BTreeMap::new();
    for item in instrument.ingame_items() {
        let option = raw_answer(record, &item.id)?;
        let score = item
            .option_score(option)
            .ok_or_else(|| ScoringError::UnknownOption {
                item: item.id.clone(),
                option,
            })?;
        per_item.insert(item.id.clone(), score);
    }
    Ok(Scores {
        mean: mean_of(per_item.values().copied()),
        per_item,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BigFiveTrait {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl BigFiveTrait {
    pub const ALL: [BigFiveTrait; 5] = [
        BigFiveTrait::Openness,
        BigFiveTrait::Conscientiousness,
        BigFiveTrait::Extraversion,
        BigFiveTrait::Agreeableness,
        BigFiveTrait::Neuroticism,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BigFiveTrait::Openness => "Openness",
            BigFiveTrait::Conscientiousness => "Conscientiousness",
            BigFiveTrait::Extraversion => "Extraversion",
            BigFiveTrait::Agreeableness => "Agreeableness",
            BigFiveTrait::Neuroticism => "Neuroticism",
        }
    }

    /// Row label used in the correlation tables.
    pub fn label(self) -> &'static str {
        match self {
            BigFiveTrait::Openness => "Openness to Experience",
            other => other.as_str(),
        }
    }
}

impl FromStr for BigFiveTrait {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        BigFiveTrait::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown trait {s}"))
    }
}

impl fmt::Display for BigFiveTrait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-trait means of keyed values.
pub fn score_big_five(
    instrument: &SurveyInstrument,
    record: &ResponseRecord,
) -> Result<BTreeMap<BigFiveTrait, f64>, ScoringError> {
    check_record(instrument, record, &[InstrumentKind::BigFive])?;
    let mut sums: BTreeMap<BigFiveTrait, (u32, u32)> = BTreeMap::new();
    for item in instrument.likert_items() {
        let t: BigFiveTrait =
            item.subscale
                .parse()
                .map_err(|_| InstrumentError::UnknownSubscale {
                    id: item.id.clone(),
                    subscale: item.subscale.clone(),
                })?;
        let v = item.code(raw_answer(record, &item.id)?)?;
        let e = sums.entry(t).or_default();
        e.0 += u32::from(v);
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(t, (s, n))| (t, f64::from(s) / f64::from(n)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PoliticalSubscale {
    DemocracyEnthusiasm,
    StatusQuoEvaluation,
    CollectiveAction,
}

impl PoliticalSubscale {
    pub const ALL: [PoliticalSubscale; 3] = [
        PoliticalSubscale::DemocracyEnthusiasm,
        PoliticalSubscale::StatusQuoEvaluation,
        PoliticalSubscale::CollectiveAction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoliticalSubscale::DemocracyEnthusiasm => "DemocracyEnthusiasm",
            PoliticalSubscale::StatusQuoEvaluation => "StatusQuoEvaluation",
            PoliticalSubscale::CollectiveAction => "CollectiveAction",
        }
    }

    /// Row label stem used in the correlation tables.
    pub fn label(self) -> &'static str {
        match self {
            PoliticalSubscale::DemocracyEnthusiasm => "Support the norms of democracy",
            PoliticalSubscale::StatusQuoEvaluation => "Evaluation of the status quo",
            PoliticalSubscale::CollectiveAction => {
                "Willingness to participate in collective action"
            }
        }
    }
}

impl FromStr for PoliticalSubscale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        PoliticalSubscale::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown political subscale {s}"))
    }
}

/// Political sub-scores on the 1..=5 code scale, where 1 is the most
/// positive code of each column (3 is always "don't know").
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoliticalScores {
    pub democracy_enthusiasm: f64,
    pub status_quo_evaluation: f64,
    pub collective_action: f64,
}

impl PoliticalScores {
    pub fn get(&self, s: PoliticalSubscale) -> f64 {
        match s {
            PoliticalSubscale::DemocracyEnthusiasm => self.democracy_enthusiasm,
            PoliticalSubscale::StatusQuoEvaluation => self.status_quo_evaluation,
            PoliticalSubscale::CollectiveAction => self.collective_action,
        }
    }
}

/// Codes one raw political answer by its item's key direction.
pub fn political_code(item: &SurveyItem, raw: u8) -> Result<u8, ScoringError> {
    item.key(raw)
}

/// Codes every political item and averages within each subscale.
pub fn code_political(
    instrument: &SurveyInstrument,
    record: &ResponseRecord,
) -> Result<PoliticalScores, ScoringError> {
    check_record(instrument, record, &[InstrumentKind::Political])?;
    let mut sums: BTreeMap<PoliticalSubscale, Vec<u8>> = BTreeMap::new();
    for item in instrument.likert_items() {
        let s: PoliticalSubscale =
            item.subscale
                .parse()
                .map_err(|_| InstrumentError::UnknownSubscale {
                    id: item.id.clone(),
                    subscale: item.subscale.clone(),
                })?;
        let code = political_code(item, raw_answer(record, &item.id)?)?;
        sums.entry(s).or_default().push(code);
    }
    let mean = |s: PoliticalSubscale| -> Result<f64, ScoringError> {
        sums.get(&s)
            .map(|v| mean_of(v.iter().copied()))
            .ok_or_else(|| {
                ScoringError::Instrument(InstrumentError::UnknownSubscale {
                    id: instrument.id.clone(),
                    subscale: format!("{} has no items", s.as_str()),
                })
            })
    };
    Ok(PoliticalScores {
        democracy_enthusiasm: mean(PoliticalSubscale::DemocracyEnthusiasm)?,
        status_quo_evaluation: mean(PoliticalSubscale::StatusQuoEvaluation)?,
        collective_action: mean(PoliticalSubscale::CollectiveAction)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextItem<'a> {
    Item(&'a InGameItem),
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("in-game survey is not active (session is in {0})")]
pub struct NotInSurvey(pub Phase);

/// The next in-game item for a session, in authored order.
pub fn next_ingame_item<'a>(
    state: &SessionState,
    instrument: &'a SurveyInstrument,
) -> Result<NextItem<'a>, NotInSurvey> {
    if state.phase != Phase::InGameSurvey {
        return Err(NotInSurvey(state.phase));
    }
    Ok(instrument
        .ingame_items()
        .nth(state.survey_cursor)
        .map_or(NextItem::Done, NextItem::Item))
}

/// Converts a session's recorded in-game answers into a response record.
pub fn ingame_record(state: &SessionState, instrument: &SurveyInstrument) -> ResponseRecord {
    ResponseRecord {
        participant_id: state.participant_id.clone(),
        instrument_id: instrument.id.clone(),
        instrument_version: instrument.version.clone(),
        timestamp: state.last_activity,
        wave: Wave::InGame,
        answers: state
            .survey_answers
            .iter()
            .map(|a| (a.item_id.clone(), a.option))
            .collect(),
    }
}
