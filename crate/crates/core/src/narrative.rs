//! Campaign definitions and the per-session narrative state machine.
//!
//! Every state change is expressed as an [`EventRecord`] and applied through
//! [`SessionState::apply`]; live play and [`replay`] share that one path.
//!
//! Phase machine:
//!
//! ```text
//! Prologue -> Dialogue <-> Cutscene -> InGameSurvey -> Finale -> Closed
//! ```
//!
//! A fired trigger moves Dialogue to Cutscene. Acknowledging the cutscene
//! returns to Dialogue at the next level, or enters the in-game survey after
//! the last level. Any open phase may also close on idle expiry.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::time::Duration;

use serde::{Deserialize, Serialize};

use crate::assessment::{InGameItem, InstrumentKind, SurveyInstrument};
use crate::clock::Clock;
use crate::corpus::WorldCorpus;
use crate::gateway::{ChatBackend, ChatRequest, GatewayError, ModelSettings, RequestKind};
use crate::prompts::{
    self, build_dialogue_prompt, build_trigger_prompt, parse_classifier_reply, CharsPerToken,
    DialogueStyle, PromptError, CONVERSATION_SLOT,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub label: bool,
}

impl Demonstration {
    pub fn new(question: impl Into<String>, label: bool) -> Self {
        Self {
            question: question.into(),
            label,
        }
    }
}

fn default_instruction() -> String {
    prompts::DEFAULT_TRIGGER_INSTRUCTION.into()
}

fn default_response_format() -> String {
    prompts::DEFAULT_RESPONSE_FORMAT.into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub id: String,
    pub description: String,
    pub preamble: String,
    pub demonstrations: Vec<Demonstration>,
    #[serde(default = "default_instruction")]
    pub instruction: String,
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("trigger id is empty".into());
        }
        let positives = self.demonstrations.iter().filter(|d| d.label).count();
        let negatives = self.demonstrations.len() - positives;
        if positives == 0 {
            return Err(format!("trigger {}: no true demonstration", self.id));
        }
        if negatives == 0 {
            return Err(format!("trigger {}: no false demonstration", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub id: u32,
    pub goal_text: String,
    pub role_description: String,
    #[serde(default)]
    pub context_tags: BTreeSet<String>,
    pub trigger: TriggerSpec,
    pub end_cutscene: String,
    #[serde(default = "default_response_format")]
    pub response_format: String,
}

fn default_npc_name() -> String {
    "Ryno".into()
}
fn default_player_label() -> String {
    "Player".into()
}
fn default_framing() -> String {
    prompts::DEFAULT_CONTEXT_FRAMING.into()
}
fn default_story_budget() -> usize {
    600
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub id: String,
    #[serde(default = "default_npc_name")]
    pub npc_name: String,
    #[serde(default = "default_player_label")]
    pub player_label: String,
    #[serde(default = "default_framing")]
    pub context_framing: String,
    /// Word budget for story context pulled from the corpus on each turn.
    #[serde(default = "default_story_budget")]
    pub story_word_budget: usize,
    pub prologue: String,
    pub finale: String,
    pub ingame_survey_ref: String,
    pub levels: Vec<LevelSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CampaignError {
    #[error("campaign has no levels")]
    NoLevels,
    #[error("level ids must run 1..n; position {position} has id {found}")]
    LevelNumbering { position: usize, found: u32 },
    #[error("level {level}: {reason}")]
    Trigger { level: u32, reason: String },
    #[error("trigger id {0} is used by more than one level")]
    DuplicateTrigger(String),
    #[error("in-game survey {0} is not a registered in-game instrument")]
    UnknownSurvey(String),
    #[error("context framing must contain the {slot} slot exactly once")]
    Framing { slot: &'static str },
}

impl CampaignSpec {
    /// Checks structure and resolves the survey reference through `resolves`.
    pub fn validate(&self, resolves: impl Fn(&str) -> bool) -> Result<(), CampaignError> {
        if self.levels.is_empty() {
            return Err(CampaignError::NoLevels);
        }
        let mut trigger_ids = BTreeSet::new();
        for (i, level) in self.levels.iter().enumerate() {
            if level.id as usize != i + 1 {
                return Err(CampaignError::LevelNumbering {
                    position: i + 1,
                    found: level.id,
                });
            }
            level.trigger.validate().map_err(|reason| CampaignError::Trigger {
                level: level.id,
                reason,
            })?;
            if !trigger_ids.insert(level.trigger.id.as_str()) {
                return Err(CampaignError::DuplicateTrigger(level.trigger.id.clone()));
            }
        }
        if self.context_framing.matches(CONVERSATION_SLOT).count() != 1 {
            return Err(CampaignError::Framing {
                slot: CONVERSATION_SLOT,
            });
        }
        if !resolves(&self.ingame_survey_ref) {
            return Err(CampaignError::UnknownSurvey(self.ingame_survey_ref.clone()));
        }
        Ok(())
    }

    pub fn level_count(&self) -> u32 {
        self.levels.len() as u32
    }

    pub fn level(&self, id: u32) -> Option<&LevelSpec> {
        self.levels.get((id as usize).checked_sub(1)?)
    }

    pub fn style(&self) -> DialogueStyle {
        DialogueStyle {
            player_label: self.player_label.clone(),
            npc_name: self.npc_name.clone(),
            context_framing: self.context_framing.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prologue,
    Dialogue,
    Cutscene,
    InGameSurvey,
    Finale,
    Closed,
}

impl Phase {
    /// Position in the overall progression; Dialogue and Cutscene alternate
    /// and share a rank.
    pub fn rank(self) -> u8 {
        match self {
            Phase::Prologue => 0,
            Phase::Dialogue | Phase::Cutscene => 1,
            Phase::InGameSurvey => 2,
            Phase::Finale => 3,
            Phase::Closed => 4,
        }
    }

    fn can_move_to(self, to: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, to),
            (Prologue, Dialogue)
                | (Dialogue, Cutscene)
                | (Cutscene, Dialogue)
                | (Cutscene, InGameSurvey)
                | (InGameSurvey, Finale)
                | (Finale, Closed)
        ) || (self != Closed && to == Closed)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Player,
    Npc,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub speaker: Speaker,
    pub text: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyAnswer {
    pub item_id: String,
    pub option: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    Completed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum SessionEvent {
    SessionStarted {
        participant_id: String,
        campaign_id: String,
        seed: u64,
        level_count: u32,
        survey_len: usize,
        prologue: String,
    },
    PlayerMessage {
        text: String,
    },
    NpcReply {
        text: String,
    },
    TriggerFired {
        trigger_id: String,
        level: u32,
    },
    LevelAdvanced {
        from: u32,
        to: u32,
        goal_text: String,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        narration: Option<String>,
    },
    SurveyAnswer {
        item_id: String,
        option: u8,
    },
    SessionClosed {
        reason: CloseReason,
    },
}

impl SessionEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            SessionEvent::SessionStarted { .. } => "SessionStarted",
            SessionEvent::PlayerMessage { .. } => "PlayerMessage",
            SessionEvent::NpcReply { .. } => "NpcReply",
            SessionEvent::TriggerFired { .. } => "TriggerFired",
            SessionEvent::LevelAdvanced { .. } => "LevelAdvanced",
            SessionEvent::PhaseChanged { .. } => "PhaseChanged",
            SessionEvent::SurveyAnswer { .. } => "SurveyAnswer",
            SessionEvent::SessionClosed { .. } => "SessionClosed",
        }
    }
}

/// One persisted event. Sequence numbers are contiguous from 1 per session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub session_id: String,
    pub seq: u64,
    pub timestamp: u64,
    #[serde(flatten)]
    pub event: SessionEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub participant_id: String,
    pub campaign_id: String,
    pub current_level: u32,
    pub level_count: u32,
    pub phase: Phase,
    pub history: Vec<HistoryEntry>,
    pub fired_triggers: BTreeSet<String>,
    pub survey_cursor: usize,
    pub survey_len: usize,
    pub survey_answers: Vec<SurveyAnswer>,
    pub rng_seed: u64,
    pub last_seq: u64,
    pub started_at: u64,
    pub last_activity: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("replay failed at offset {offset}: {reason}")]
pub struct ReplayError {
    /// Index of the offending record in the log.
    pub offset: usize,
    pub reason: String,
}

impl SessionState {
    fn from_start(record: &EventRecord) -> Result<Self, String> {
        let SessionEvent::SessionStarted {
            participant_id,
            campaign_id,
            seed,
            level_count,
            survey_len,
            prologue,
        } = &record.event
        else {
            return Err("no session start event".into());
        };
        if record.seq != 1 {
            return Err(format!("session start has sequence {} (expected 1)", record.seq));
        }
        if *level_count == 0 {
            return Err("session declares zero levels".into());
        }
        Ok(Self {
            session_id: record.session_id.clone(),
            participant_id: participant_id.clone(),
            campaign_id: campaign_id.clone(),
            current_level: 1,
            level_count: *level_count,
            phase: Phase::Prologue,
            history: vec![HistoryEntry {
                speaker: Speaker::System,
                text: prologue.clone(),
                timestamp: record.timestamp,
            }],
            fired_triggers: BTreeSet::new(),
            survey_cursor: 0,
            survey_len: *survey_len,
            survey_answers: Vec::new(),
            rng_seed: *seed,
            last_seq: 1,
            started_at: record.timestamp,
            last_activity: record.timestamp,
        })
    }

    fn push(&mut self, speaker: Speaker, text: &str, timestamp: u64) {
        self.history.push(HistoryEntry {
            speaker,
            text: text.to_string(),
            timestamp,
        });
    }

    fn expect_phase(&self, phase: Phase) -> Result<(), String> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(format!("expected phase {phase}, session is in {}", self.phase))
        }
    }

    /// Applies one event, checking sequence contiguity and the phase machine.
    /// On error the state is unchanged.
    pub fn apply(&mut self, record: &EventRecord) -> Result<(), String> {
        if record.session_id != self.session_id {
            return Err(format!(
                "event for session {} applied to {}",
                record.session_id, self.session_id
            ));
        }
        if record.seq != self.last_seq + 1 {
            return Err(format!(
                "sequence {} does not follow {}",
                record.seq, self.last_seq
            ));
        }
        let mut next = self.clone();
        next.apply_event(&record.event, record.timestamp)?;
        next.last_seq = record.seq;
        next.last_activity = record.timestamp;
        *self = next;
        Ok(())
    }

    fn apply_event(&mut self, event: &SessionEvent, ts: u64) -> Result<(), String> {
        match event {
            SessionEvent::SessionStarted { .. } => Err("duplicate session start".into()),
            SessionEvent::PlayerMessage { text } => {
                self.expect_phase(Phase::Dialogue)?;
                self.push(Speaker::Player, text, ts);
                Ok(())
            }
            SessionEvent::NpcReply { text } => {
                self.expect_phase(Phase::Dialogue)?;
                self.push(Speaker::Npc, text, ts);
                Ok(())
            }
            SessionEvent::TriggerFired { trigger_id, level } => {
                self.expect_phase(Phase::Dialogue)?;
                if *level != self.current_level {
                    return Err(format!(
                        "trigger for level {level} fired at level {}",
                        self.current_level
                    ));
                }
                if !self.fired_triggers.insert(trigger_id.clone()) {
                    return Err(format!("trigger {trigger_id} already fired"));
                }
                Ok(())
            }
            SessionEvent::LevelAdvanced {
                from,
                to,
                goal_text,
            } => {
                self.expect_phase(Phase::Cutscene)?;
                if *from != self.current_level || *to != from + 1 || *to > self.level_count {
                    return Err(format!(
                        "illegal level advance {from}->{to} at level {} of {}",
                        self.current_level, self.level_count
                    ));
                }
                self.current_level = *to;
                self.push(Speaker::System, goal_text, ts);
                Ok(())
            }
            SessionEvent::PhaseChanged {
                from,
                to,
                narration,
            } => {
                self.expect_phase(*from)?;
                if !from.can_move_to(*to) {
                    return Err(format!("illegal phase change {from}->{to}"));
                }
                if *to == Phase::InGameSurvey && self.current_level != self.level_count {
                    return Err(format!(
                        "survey entered at level {} of {}",
                        self.current_level, self.level_count
                    ));
                }
                if *from == Phase::InGameSurvey && *to == Phase::Finale
                    && self.survey_cursor < self.survey_len
                {
                    return Err("survey incomplete".into());
                }
                self.phase = *to;
                if let Some(text) = narration {
                    self.push(Speaker::System, text, ts);
                }
                Ok(())
            }
            SessionEvent::SurveyAnswer { item_id, option } => {
                self.expect_phase(Phase::InGameSurvey)?;
                if self.survey_cursor >= self.survey_len {
                    return Err("survey already complete".into());
                }
                self.survey_answers.push(SurveyAnswer {
                    item_id: item_id.clone(),
                    option: *option,
                });
                self.survey_cursor += 1;
                Ok(())
            }
            SessionEvent::SessionClosed { .. } => self.expect_phase(Phase::Closed),
        }
    }

    pub fn is_closed(&self) -> bool {
        self.phase == Phase::Closed
    }

    pub fn survey_complete(&self) -> bool {
        self.survey_len > 0 && self.survey_cursor == self.survey_len
    }

    pub fn npc_replies(&self) -> impl Iterator<Item = &str> {
        self.history
            .iter()
            .filter(|h| h.speaker == Speaker::Npc)
            .map(|h| h.text.as_str())
    }
}

/// Rebuilds a session from a prefix of its event log.
pub fn replay(log: &[EventRecord]) -> Result<SessionState, ReplayError> {
    let first = log.first().ok_or_else(|| ReplayError {
        offset: 0,
        reason: "no session start event".into(),
    })?;
    let mut state =
        SessionState::from_start(first).map_err(|reason| ReplayError { offset: 0, reason })?;
    for (offset, record) in log.iter().enumerate().skip(1) {
        state
            .apply(record)
            .map_err(|reason| ReplayError { offset, reason })?;
    }
    Ok(state)
}

/// Deterministic session id from campaign, participant and seed (FNV-1a).
pub fn derive_session_id(campaign_id: &str, participant_id: &str, seed: u64) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    };
    feed(campaign_id.as_bytes());
    feed(&[0]);
    feed(participant_id.as_bytes());
    feed(&[0]);
    feed(&seed.to_le_bytes());
    format!("s-{hash:016x}")
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NarrativeError {
    #[error("player message is empty")]
    EmptyInput,
    #[error("backend failure: {0}")]
    Gateway(#[from] GatewayError),
    #[error("operation needs phase {expected}, session is in {actual}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("session is closed")]
    SessionClosed,
    #[error("precondition unmet: {0}")]
    Precondition(String),
    #[error("prompt assembly failed: {0}")]
    Prompt(#[from] PromptError),
    #[error("survey: {0}")]
    Survey(String),
    #[error("internal state violation: {0}")]
    State(String),
}

impl NarrativeError {
    /// The request may be repeated unchanged; no state was mutated.
    pub fn is_retryable(&self) -> bool {
        matches!(self, NarrativeError::EmptyInput | NarrativeError::Gateway(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameSettings {
    /// Token budget for one dialogue prompt.
    pub prompt_budget: usize,
    pub estimator: CharsPerToken,
    pub model: ModelSettings,
}

impl Default for GameSettings {
    fn default() -> Self {
        Self {
            prompt_budget: 3000,
            estimator: CharsPerToken::default(),
            model: ModelSettings::default(),
        }
    }
}

/// Outcome of a state-changing operation: the new state plus the records
/// that produced it, to be persisted before the state is published.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: SessionState,
    pub records: Vec<EventRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Fired,
    NotMatched,
    /// The classifier reply was neither true nor false; treated as no fire.
    Unparseable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub state: SessionState,
    pub reply: String,
    pub classification: Classification,
    pub records: Vec<EventRecord>,
}

/// A campaign bound to its in-game survey, corpus and model settings.
/// Immutable; share one instance across sessions.
#[derive(Debug, Clone)]
pub struct Game {
    campaign: CampaignSpec,
    survey: SurveyInstrument,
    corpus: WorldCorpus,
    settings: GameSettings,
    style: DialogueStyle,
}

impl Game {
    pub fn new(
        campaign: CampaignSpec,
        survey: SurveyInstrument,
        corpus: WorldCorpus,
        settings: GameSettings,
    ) -> Result<Self, CampaignError> {
        campaign.validate(|id| id == survey.id && survey.kind == InstrumentKind::InGame)?;
        let style = campaign.style();
        Ok(Self {
            campaign,
            survey,
            corpus,
            settings,
            style,
        })
    }

    pub fn campaign(&self) -> &CampaignSpec {
        &self.campaign
    }

    pub fn survey(&self) -> &SurveyInstrument {
        &self.survey
    }

    pub fn corpus(&self) -> &WorldCorpus {
        &self.corpus
    }

    pub fn settings(&self) -> &GameSettings {
        &self.settings
    }

    fn emit(
        &self,
        state: &SessionState,
        events: Vec<SessionEvent>,
        clock: &dyn Clock,
    ) -> Result<Transition, NarrativeError> {
        let mut next = state.clone();
        let mut records = Vec::with_capacity(events.len());
        for event in events {
            let record = EventRecord {
                session_id: next.session_id.clone(),
                seq: next.last_seq + 1,
                timestamp: clock.now_ms(),
                event,
            };
            next.apply(&record).map_err(NarrativeError::State)?;
            records.push(record);
        }
        Ok(Transition {
            state: next,
            records,
        })
    }

    pub fn start_session(
        &self,
        participant_id: &str,
        seed: u64,
        clock: &dyn Clock,
    ) -> Result<Transition, NarrativeError> {
        if participant_id.trim().is_empty() {
            return Err(NarrativeError::Precondition("participant id is empty".into()));
        }
        let record = EventRecord {
            session_id: derive_session_id(&self.campaign.id, participant_id, seed),
            seq: 1,
            timestamp: clock.now_ms(),
            event: SessionEvent::SessionStarted {
                participant_id: participant_id.to_string(),
                campaign_id: self.campaign.id.clone(),
                seed,
                level_count: self.campaign.level_count(),
                survey_len: self.survey.len(),
                prologue: self.campaign.prologue.clone(),
            },
        };
        let state = SessionState::from_start(&record).map_err(NarrativeError::State)?;
        Ok(Transition {
            state,
            records: vec![record],
        })
    }

    fn check_open(state: &SessionState, expected: Phase) -> Result<(), NarrativeError> {
        if state.phase == Phase::Closed {
            return Err(NarrativeError::SessionClosed);
        }
        if state.phase != expected {
            return Err(NarrativeError::WrongPhase {
                expected,
                actual: state.phase,
            });
        }
        Ok(())
    }

    fn request(&self, kind: RequestKind, state: &SessionState, input: &str) -> ChatRequest {
        let m = &self.settings.model;
        let (temperature, max_reply_tokens) = match kind {
            RequestKind::Dialogue => (m.dialogue_temperature, m.max_reply_tokens),
            RequestKind::Classification => (m.classifier_temperature, m.classifier_max_tokens),
        };
        ChatRequest {
            kind,
            system_text: String::new(),
            context_text: String::new(),
            user_text: String::new(),
            player_input: input.to_string(),
            model_id: m.model_id.clone(),
            temperature,
            max_reply_tokens,
            timeout: Duration::from_millis(m.timeout_ms),
            seed: Some(state.rng_seed.wrapping_add(state.last_seq)),
        }
    }

    /// One dialogue turn. The trigger is classified first, then the reply is
    /// generated with the persona of the level the player will be in. No
    /// events are produced unless every backend call succeeds.
    pub fn handle_player_message(
        &self,
        state: &SessionState,
        text: &str,
        backend: &dyn ChatBackend,
        clock: &dyn Clock,
    ) -> Result<Turn, NarrativeError> {
        Self::check_open(state, Phase::Dialogue)?;
        let text = text.trim();
        if text.is_empty() {
            return Err(NarrativeError::EmptyInput);
        }
        let level = self
            .campaign
            .level(state.current_level)
            .ok_or_else(|| NarrativeError::State(format!("no level {}", state.current_level)))?;
        let already_fired = state.fired_triggers.contains(&level.trigger.id);

        let classification = if already_fired {
            Classification::NotMatched
        } else {
            let prompt = build_trigger_prompt(&level.trigger, text);
            let mut req = self.request(RequestKind::Classification, state, text);
            req.user_text = prompt.text;
            let raw = backend.complete(&req)?.text;
            match parse_classifier_reply(&raw) {
                Ok(true) => Classification::Fired,
                Ok(false) => Classification::NotMatched,
                Err(e) => {
                    log::warn!("session {}: {e}; trigger not fired", state.session_id);
                    Classification::Unparseable
                }
            }
        };
        let fired = classification == Classification::Fired;
        let is_last = state.current_level == self.campaign.level_count();
        let persona = if fired && !is_last {
            self.campaign.level(state.current_level + 1).unwrap_or(level)
        } else {
            level
        };

        let story = self
            .corpus
            .select_story_context(&persona.context_tags, self.campaign.story_word_budget);
        let bundle = build_dialogue_prompt(
            persona,
            &self.style,
            &state.history,
            &story,
            text,
            self.settings.prompt_budget,
            &self.settings.estimator,
        )?;
        let mut req = self.request(RequestKind::Dialogue, state, text);
        req.system_text = bundle.system_text;
        req.context_text = bundle.context_text;
        req.user_text = bundle.user_text;
        let reply = backend.complete(&req)?.text;
        if reply.trim().is_empty() {
            return Err(GatewayError::EmptyReply.into());
        }

        let mut events = vec![
            SessionEvent::PlayerMessage { text: text.into() },
            SessionEvent::NpcReply {
                text: reply.clone(),
            },
        ];
        if fired {
            events.push(SessionEvent::TriggerFired {
                trigger_id: level.trigger.id.clone(),
                level: level.id,
            });
            events.push(SessionEvent::PhaseChanged {
                from: Phase::Dialogue,
                to: Phase::Cutscene,
                narration: Some(level.end_cutscene.clone()),
            });
            if !is_last {
                events.push(SessionEvent::LevelAdvanced {
                    from: level.id,
                    to: level.id + 1,
                    goal_text: persona.goal_text.clone(),
                });
            }
        }
        let Transition { state, records } = self.emit(state, events, clock)?;
        Ok(Turn {
            state,
            reply,
            classification,
            records,
        })
    }

    /// Acknowledges the current phase and moves exactly one step.
    pub fn advance_phase(
        &self,
        state: &SessionState,
        clock: &dyn Clock,
    ) -> Result<Transition, NarrativeError> {
        let events = match state.phase {
            Phase::Prologue => vec![SessionEvent::PhaseChanged {
                from: Phase::Prologue,
                to: Phase::Dialogue,
                narration: self.campaign.level(1).map(|l| l.goal_text.clone()),
            }],
            Phase::Dialogue => {
                return Err(NarrativeError::Precondition(format!(
                    "level {} trigger has not fired",
                    state.current_level
                )))
            }
            Phase::Cutscene => {
                let last_done = state.current_level == state.level_count
                    && self
                        .campaign
                        .level(state.current_level)
                        .is_some_and(|l| state.fired_triggers.contains(&l.trigger.id));
                let to = if last_done {
                    Phase::InGameSurvey
                } else {
                    Phase::Dialogue
                };
                vec![SessionEvent::PhaseChanged {
                    from: Phase::Cutscene,
                    to,
                    narration: None,
                }]
            }
            Phase::InGameSurvey => {
                let missing = state.survey_len - state.survey_cursor.min(state.survey_len);
                if missing > 0 {
                    let noun = if missing == 1 { "item" } else { "items" };
                    return Err(NarrativeError::Precondition(format!(
                        "{missing} {noun} unanswered"
                    )));
                }
                vec![SessionEvent::PhaseChanged {
                    from: Phase::InGameSurvey,
                    to: Phase::Finale,
                    narration: Some(self.campaign.finale.clone()),
                }]
            }
            Phase::Finale => vec![
                SessionEvent::PhaseChanged {
                    from: Phase::Finale,
                    to: Phase::Closed,
                    narration: None,
                },
                SessionEvent::SessionClosed {
                    reason: CloseReason::Completed,
                },
            ],
            Phase::Closed => return Err(NarrativeError::SessionClosed),
        };
        self.emit(state, events, clock)
    }

    pub fn current_survey_item(&self, state: &SessionState) -> Option<&InGameItem> {
        self.survey.ingame_items().nth(state.survey_cursor)
    }

    /// Records the answer to the survey item at the cursor. Options are
    /// numbered from 1.
    pub fn answer_survey(
        &self,
        state: &SessionState,
        item_id: &str,
        option: u8,
        clock: &dyn Clock,
    ) -> Result<Transition, NarrativeError> {
        Self::check_open(state, Phase::InGameSurvey)?;
        let item = self
            .current_survey_item(state)
            .ok_or_else(|| NarrativeError::Survey("all items already answered".into()))?;
        if item.id != item_id {
            return Err(NarrativeError::Survey(format!(
                "expected an answer to {}, got {item_id}",
                item.id
            )));
        }
        if option == 0 || option as usize > item.options.len() {
            return Err(NarrativeError::Survey(format!(
                "{item_id} has no option {option}"
            )));
        }
        self.emit(
            state,
            vec![SessionEvent::SurveyAnswer {
                item_id: item_id.into(),
                option,
            }],
            clock,
        )
    }

    /// Closes a session idle for at least `idle`. Returns `None` when the
    /// session is closed already or still active.
    pub fn expire(
        &self,
        state: &SessionState,
        idle: Duration,
        clock: &dyn Clock,
    ) -> Option<Transition> {
        let now = clock.now_ms();
        if state.is_closed() || now.saturating_sub(state.last_activity) < idle.as_millis() as u64 {
            return None;
        }
        self.emit(
            state,
            vec![
                SessionEvent::PhaseChanged {
                    from: state.phase,
                    to: Phase::Closed,
                    narration: None,
                },
                SessionEvent::SessionClosed {
                    reason: CloseReason::Expired,
                },
            ],
            clock,
        )
        .ok()
    }
}
