//! Playing a campaign end to end without the HTTP layer, and reproducing a
//! recorded session from its event log.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use storyprobe_core::assessment::InGameItem;
use storyprobe_core::clock::Clock;
use storyprobe_core::gateway::{ChatBackend, Matcher, MockBackend, MockRule, MockScript, RequestKind};
use storyprobe_core::narrative::{
    replay, CampaignSpec, EventRecord, Game, LevelSpec, NarrativeError, Phase, SessionEvent,
    SessionState, Transition,
};

#[derive(Debug, thiserror::Error)]
pub enum PlayError {
    #[error(transparent)]
    Narrative(#[from] NarrativeError),
    #[error("log is not a valid session: {0}")]
    BadLog(String),
    #[error("reproduced log differs from the recording at record {seq}")]
    Diverged { seq: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Supplies the participant's side of a playthrough.
pub trait Player {
    /// Next utterance in the current level; `None` ends the playthrough.
    fn say(&mut self, level: &LevelSpec, state: &SessionState) -> Result<Option<String>, PlayError>;
    /// 1-based option for a survey item; `None` ends the playthrough.
    fn choose(&mut self, item: &InGameItem, state: &SessionState) -> Result<Option<u8>, PlayError>;
}

/// Asks each level's true demonstrations in turn and takes the first option
/// of every survey item. Gives up on a level once its demonstrations are
/// exhausted.
#[derive(Debug, Default)]
pub struct AutoPlayer {
    level: u32,
    tried: usize,
}

impl Player for AutoPlayer {
    fn say(&mut self, level: &LevelSpec, _: &SessionState) -> Result<Option<String>, PlayError> {
        if level.id != self.level {
            self.level = level.id;
            self.tried = 0;
        }
        let next = level
            .trigger
            .demonstrations
            .iter()
            .filter(|d| d.label)
            .nth(self.tried)
            .map(|d| d.question.clone());
        self.tried += 1;
        Ok(next)
    }

    fn choose(&mut self, _: &InGameItem, _: &SessionState) -> Result<Option<u8>, PlayError> {
        Ok(Some(1))
    }
}

/// Replays fixed lines and answers in order.
#[derive(Debug, Default, Clone)]
pub struct ScriptedPlayer {
    pub lines: VecDeque<String>,
    pub answers: VecDeque<u8>,
}

impl ScriptedPlayer {
    /// The inputs recorded in a session log.
    pub fn from_log(log: &[EventRecord]) -> Self {
        let mut p = Self::default();
        for r in log {
            match &r.event {
                SessionEvent::PlayerMessage { text } => p.lines.push_back(text.clone()),
                SessionEvent::SurveyAnswer { option, .. } => p.answers.push_back(*option),
                _ => {}
            }
        }
        p
    }
}

impl Player for ScriptedPlayer {
    fn say(&mut self, _: &LevelSpec, _: &SessionState) -> Result<Option<String>, PlayError> {
        Ok(self.lines.pop_front())
    }

    fn choose(&mut self, _: &InGameItem, _: &SessionState) -> Result<Option<u8>, PlayError> {
        Ok(self.answers.pop_front())
    }
}

/// Reads the participant's side from a terminal. `/quit` ends the session.
pub struct StdinPlayer<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> StdinPlayer<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self { input, output }
    }

    fn read_line(&mut self, prompt: &str) -> Result<Option<String>, PlayError> {
        loop {
            write!(self.output, "{prompt}")?;
            self.output.flush()?;
            let mut line = String::new();
            if self.input.read_line(&mut line)? == 0 {
                return Ok(None);
            }
            let line = line.trim();
            if line == "/quit" {
                return Ok(None);
            }
            if !line.is_empty() {
                return Ok(Some(line.to_string()));
            }
        }
    }
}

impl<R: BufRead, W: Write> Player for StdinPlayer<R, W> {
    fn say(&mut self, _: &LevelSpec, _: &SessionState) -> Result<Option<String>, PlayError> {
        self.read_line("> ")
    }

    fn choose(&mut self, item: &InGameItem, _: &SessionState) -> Result<Option<u8>, PlayError> {
        writeln!(self.output, "{}", item.npc_text)?;
        for (i, o) in item.options.iter().enumerate() {
            writeln!(self.output, "  {}. {}", i + 1, o.label)?;
        }
        loop {
            let Some(line) = self.read_line("choice> ")? else {
                return Ok(None);
            };
            match line.parse::<u8>() {
                Ok(n) if n >= 1 && (n as usize) <= item.options.len() => return Ok(Some(n)),
                _ => writeln!(self.output, "pick a number from 1 to {}", item.options.len())?,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Playthrough {
    pub state: SessionState,
    pub log: Vec<EventRecord>,
}

impl Playthrough {
    pub fn completed(&self) -> bool {
        self.state.phase == Phase::Closed
    }
}

/// Drives one session from start to close, or until the player stops.
/// `on_record` sees every record as soon as it is produced.
pub fn play(
    game: &Game,
    backend: &dyn ChatBackend,
    clock: &dyn Clock,
    participant_id: &str,
    seed: u64,
    player: &mut dyn Player,
    on_record: &mut dyn FnMut(&EventRecord),
) -> Result<Playthrough, PlayError> {
    let t = game.start_session(participant_id, seed, clock)?;
    let mut log = Vec::new();
    let mut state = t.state;
    let mut take = |records: Vec<EventRecord>, log: &mut Vec<EventRecord>| {
        for r in &records {
            on_record(r);
        }
        log.extend(records);
    };
    take(t.records, &mut log);

    loop {
        let next = match state.phase {
            Phase::Closed => break,
            Phase::Dialogue => {
                let level = game
                    .campaign()
                    .level(state.current_level)
                    .ok_or_else(|| PlayError::BadLog(format!("no level {}", state.current_level)))?;
                let Some(text) = player.say(level, &state)? else {
                    break;
                };
                let turn = game.handle_player_message(&state, &text, backend, clock)?;
                (turn.state, turn.records)
            }
            Phase::InGameSurvey => match game.current_survey_item(&state) {
                Some(item) => {
                    let Some(option) = player.choose(item, &state)? else {
                        break;
                    };
                    let id = item.id.clone();
                    let t = game.answer_survey(&state, &id, option, clock)?;
                    (t.state, t.records)
                }
                None => {
                    let t = game.advance_phase(&state, clock)?;
                    (t.state, t.records)
                }
            },
            Phase::Prologue | Phase::Cutscene | Phase::Finale => {
                let t = game.advance_phase(&state, clock)?;
                (t.state, t.records)
            }
        };
        state = next.0;
        take(next.1, &mut log);
    }
    Ok(Playthrough { state, log })
}

/// Human-readable line for a record, or `None` for bookkeeping events.
pub fn render_record(record: &EventRecord, campaign: &CampaignSpec) -> Option<String> {
    match &record.event {
        SessionEvent::SessionStarted { prologue, .. } => Some(prologue.clone()),
        SessionEvent::PlayerMessage { text } => Some(format!("{}: {text}", campaign.player_label)),
        SessionEvent::NpcReply { text } => Some(format!("{}: {text}", campaign.npc_name)),
        SessionEvent::TriggerFired { level, .. } => Some(format!("[level {level} complete]")),
        SessionEvent::LevelAdvanced { to, goal_text, .. } => {
            Some(format!("[level {to}] {goal_text}"))
        }
        SessionEvent::PhaseChanged {
            narration: Some(n), ..
        } => Some(n.clone()),
        SessionEvent::PhaseChanged { .. } => None,
        SessionEvent::SurveyAnswer { item_id, option } => {
            Some(format!("[{item_id}: option {option}]"))
        }
        SessionEvent::SessionClosed { reason } => Some(format!("[session closed: {reason:?}]")),
    }
}

/// Transcript of a session, one rendered record per line.
pub fn transcript(log: &[EventRecord], campaign: &CampaignSpec) -> String {
    let mut out = String::new();
    for line in log.iter().filter_map(|r| render_record(r, campaign)) {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Mock script that answers a replay of `log` exactly as the original
/// backend did. Each player turn made two requests: the trigger
/// classification, then the reply.
pub fn script_from_log(log: &[EventRecord]) -> MockScript {
    let mut rules = Vec::new();
    let mut turn = 0usize;
    for (i, r) in log.iter().enumerate() {
        if !matches!(r.event, SessionEvent::PlayerMessage { .. }) {
            continue;
        }
        let rest = log[i + 1..]
            .iter()
            .take_while(|r| !matches!(r.event, SessionEvent::PlayerMessage { .. }));
        let mut fired = false;
        let mut reply = None;
        for r in rest {
            match &r.event {
                SessionEvent::TriggerFired { .. } => fired = true,
                SessionEvent::NpcReply { text } if reply.is_none() => reply = Some(text.clone()),
                _ => {}
            }
        }
        rules.push(
            MockRule::new(Matcher::Index(2 * turn), if fired { "True" } else { "False" })
                .for_kind(RequestKind::Classification),
        );
        rules.push(
            MockRule::new(Matcher::Index(2 * turn + 1), reply.unwrap_or_default())
                .for_kind(RequestKind::Dialogue),
        );
        turn += 1;
    }
    MockScript::new(rules)
}

/// Clock that hands out the timestamps of a recorded log in order, then
/// keeps returning the last one.
#[derive(Debug)]
pub struct RecordedClock {
    stamps: Vec<u64>,
    next: AtomicUsize,
}

impl RecordedClock {
    pub fn new(log: &[EventRecord]) -> Self {
        Self::from_stamps(log.iter().map(|r| r.timestamp).collect())
    }

    pub fn from_stamps(stamps: Vec<u64>) -> Self {
        Self {
            stamps,
            next: AtomicUsize::new(0),
        }
    }

    /// Makes the next reading the `i`th timestamp.
    pub fn seek(&self, i: usize) {
        self.next.store(i, Ordering::Relaxed);
    }
}

impl Clock for RecordedClock {
    fn now_ms(&self) -> u64 {
        let i = self.next.fetch_add(1, Ordering::Relaxed);
        self.stamps
            .get(i)
            .or(self.stamps.last())
            .copied()
            .unwrap_or(0)
    }
}

/// Performs the recorded actions of `log` again, answering backend requests
/// from the log itself and reading timestamps from it, and checks that every
/// action yields exactly the recorded records.
pub fn reproduce(game: &Game, log: &[EventRecord]) -> Result<Vec<EventRecord>, PlayError> {
    replay(log).map_err(|e| PlayError::BadLog(e.to_string()))?;
    let (participant, seed) = match log.first().map(|r| &r.event) {
        Some(SessionEvent::SessionStarted {
            participant_id,
            seed,
            ..
        }) => (participant_id.clone(), *seed),
        _ => return Err(PlayError::BadLog("first record is not SessionStarted".into())),
    };
    let mut script = script_from_log(log);
    if script.rules.is_empty() {
        // no player turns, so the backend is never asked
        script.rules.push(MockRule::new(Matcher::Index(0), "False"));
    }
    let backend = MockBackend::new(script).expect("non-empty script");
    let clock = RecordedClock::new(log);

    let first = game.start_session(&participant, seed, &clock)?;
    let mut state = first.state;
    let mut produced = first.records;
    while produced.len() < log.len() {
        let at = produced.len();
        clock.seek(at);
        let t = match &log[at].event {
            SessionEvent::PlayerMessage { text } => {
                let turn = game.handle_player_message(&state, text, &backend, &clock)?;
                Transition {
                    state: turn.state,
                    records: turn.records,
                }
            }
            SessionEvent::SurveyAnswer { item_id, option } => {
                game.answer_survey(&state, item_id, *option, &clock)?
            }
            SessionEvent::PhaseChanged { from, to: Phase::Closed, .. }
                if *from != Phase::Finale =>
            {
                // the idle check takes one reading of its own
                let stamps = log[at..].iter().take(2).map(|r| r.timestamp);
                let expiry_clock =
                    RecordedClock::from_stamps(std::iter::once(log[at].timestamp).chain(stamps).collect());
                game.expire(&state, Duration::ZERO, &expiry_clock)
                    .ok_or(PlayError::Diverged { seq: at as u64 + 1 })?
            }
            SessionEvent::PhaseChanged { .. } => game.advance_phase(&state, &clock)?,
            _ => return Err(PlayError::Diverged { seq: at as u64 + 1 }),
        };
        state = t.state;
        produced.extend(t.records);
    }
    if let Some((a, _)) = produced.iter().zip(log).find(|(a, b)| a != b) {
        return Err(PlayError::Diverged { seq: a.seq });
    }
    if produced.len() != log.len() {
        return Err(PlayError::Diverged {
            seq: log.len() as u64 + 1,
        });
    }
    Ok(produced)
}
