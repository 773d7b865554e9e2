//! Prompt assembly for NPC dialogue and few-shot trigger classification.
//!
//! A dialogue prompt has three parts: the system text (role description and
//! response format), the context text (the conversation record rendered into
//! the framing sentence's slot, followed by story context) and the player's
//! current utterance. Under budget pressure the oldest conversation turns go
//! first, then trailing story entries; the system text is never cut.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusEntry;
use crate::narrative::{HistoryEntry, LevelSpec, Speaker, TriggerSpec};

pub const SLOT_OPEN: &str = "/{";
pub const SLOT_CLOSE: &str = "}/";
pub const CONVERSATION_SLOT: &str = "/{conversation}/";

pub const DEFAULT_CONTEXT_FRAMING: &str = "During your talks, let your innate interests show subtly over time, and use prior discussions for context. Your earlier conversations: /{conversation}/";

pub const DEFAULT_RESPONSE_FORMAT: &str = "Vary your chat styles. Sometimes ask, sometimes share, sometimes ponder. Use simple words and short sentences that even a 4th grader can understand.";

pub const DEFAULT_TRIGGER_INSTRUCTION: &str =
    "Now answer the question below and tell whether it is true or false.";

pub trait TokenEstimator {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / n)`. Subadditive, so the estimate of a concatenation never
/// exceeds the sum of the parts' estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharsPerToken(pub usize);

impl Default for CharsPerToken {
    fn default() -> Self {
        CharsPerToken(4)
    }
}

impl TokenEstimator for CharsPerToken {
    fn estimate(&self, text: &str) -> usize {
        let per = self.0.max(1);
        text.chars().count().div_ceil(per)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("token budget {budget} cannot hold the system text and player input ({needed} tokens)")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("classifier reply is neither true nor false: {0:?}")]
    Unparseable(String),
}

/// Speaker labels and framing shared by every level of a campaign.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueStyle {
    pub player_label: String,
    pub npc_name: String,
    pub context_framing: String,
}

impl Default for DialogueStyle {
    fn default() -> Self {
        Self {
            player_label: "Player".into(),
            npc_name: "Ryno".into(),
            context_framing: DEFAULT_CONTEXT_FRAMING.into(),
        }
    }
}

impl DialogueStyle {
    /// One conversation line, or `None` for narration entries.
    pub fn render_turn(&self, entry: &HistoryEntry) -> Option<String> {
        let who = match entry.speaker {
            Speaker::Player => &self.player_label,
            Speaker::Npc => &self.npc_name,
            Speaker::System => return None,
        };
        Some(format!("{who}: {}", entry.text))
    }

    fn turn_cost<E: TokenEstimator + ?Sized>(&self, entry: &HistoryEntry, est: &E) -> usize {
        // Each rendered line is preceded by a newline inside the slot.
        self.render_turn(entry)
            .map(|line| est.estimate(&format!("\n{line}")))
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub context_text: String,
    pub user_text: String,
    pub token_estimate: usize,
}

/// Longest suffix of `turns` whose rendered cost fits `budget`. Turns are
/// never split.
pub fn truncate_history<'h, E: TokenEstimator + ?Sized>(
    turns: &'h [HistoryEntry],
    budget: usize,
    style: &DialogueStyle,
    est: &E,
) -> &'h [HistoryEntry] {
    let mut used = 0;
    let mut start = turns.len();
    while start > 0 {
        let cost = style.turn_cost(&turns[start - 1], est);
        if used + cost > budget {
            break;
        }
        used += cost;
        start -= 1;
    }
    &turns[start..]
}

fn render_context(style: &DialogueStyle, turns: &[HistoryEntry], story: &[&CorpusEntry]) -> String {
    let mut block = String::new();
    for line in turns.iter().filter_map(|t| style.render_turn(t)) {
        block.push('\n');
        block.push_str(&line);
    }
    let mut out = match style.context_framing.split_once(CONVERSATION_SLOT) {
        Some((head, tail)) => format!("{}{block}{tail}", head.trim_end()),
        None => format!("{}{block}", style.context_framing.trim_end()),
    };
    let trimmed = out.trim_end().len();
    out.truncate(trimmed);
    for entry in story {
        out.push_str("\n\n");
        out.push_str(&entry.body);
    }
    out
}

/// Assembles the dialogue prompt for `level`.
///
/// `history` may contain narration entries; only player and NPC turns are
/// rendered. `user_text` is the utterance being answered and must not be in
/// `history` yet.
pub fn build_dialogue_prompt<E: TokenEstimator + ?Sized>(
    level: &LevelSpec,
    style: &DialogueStyle,
    history: &[HistoryEntry],
    story: &[&CorpusEntry],
    user_text: &str,
    budget: usize,
    est: &E,
) -> Result<PromptBundle, PromptError> {
    let system_text = if level.response_format.is_empty() {
        level.role_description.clone()
    } else {
        format!("{}\n\n{}", level.role_description, level.response_format)
    };
    let fixed = est.estimate(&system_text)
        + est.estimate(user_text)
        + est.estimate(&render_context(style, &[], &[]));
    if fixed > budget {
        return Err(PromptError::BudgetTooSmall { needed: fixed, budget });
    }
    let remaining = budget - fixed;

    let turns: Vec<HistoryEntry> = history
        .iter()
        .filter(|h| h.speaker != Speaker::System)
        .cloned()
        .collect();
    let story_costs: Vec<usize> = story
        .iter()
        .map(|e| est.estimate(&format!("\n\n{}", e.body)))
        .collect();
    let story_total: usize = story_costs.iter().sum();

    // History shrinks first; story context only once no history is left.
    let (mut kept_turns, mut kept_story) = if story_total <= remaining {
        let suffix = truncate_history(&turns, remaining - story_total, style, est);
        (suffix.to_vec(), story.to_vec())
    } else {
        let mut used = 0;
        let n = story_costs
            .iter()
            .take_while(|c| {
                used += **c;
                used <= remaining
            })
            .count();
        (Vec::new(), story[..n].to_vec())
    };

    loop {
        let context_text = render_context(style, &kept_turns, &kept_story);
        let token_estimate =
            est.estimate(&system_text) + est.estimate(&context_text) + est.estimate(user_text);
        if token_estimate <= budget {
            return Ok(PromptBundle {
                system_text,
                context_text,
                user_text: user_text.to_string(),
                token_estimate,
            });
        }
        // Only reachable with an estimator that is not subadditive.
        if !kept_turns.is_empty() {
            kept_turns.remove(0);
        } else if kept_story.pop().is_none() {
            return Err(PromptError::BudgetTooSmall {
                needed: token_estimate,
                budget,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierPrompt {
    pub text: String,
    pub expected_labels: [String; 2],
}

/// Renders the few-shot classification prompt: preamble, one
/// `Question:`/`Answer:` pair per demonstration, the instruction line, then
/// the player's utterance in the final question slot.
pub fn build_trigger_prompt(trigger: &TriggerSpec, input: &str) -> ClassifierPrompt {
    let mut lines = vec![trigger.preamble.clone()];
    for d in &trigger.demonstrations {
        lines.push(format!("Question: {}", d.question));
        lines.push(format!("Answer: {}", if d.label { "True" } else { "False" }));
    }
    lines.push(trigger.instruction.clone());
    lines.push(format!("Question: {input}"));
    lines.push("Answer:".into());
    ClassifierPrompt {
        text: lines.join("\n"),
        expected_labels: ["True".into(), "False".into()],
    }
}

/// Reads a leading `true`/`false` token, ignoring case, surrounding
/// whitespace and punctuation, and an echoed `Answer:` label.
pub fn parse_classifier_reply(raw: &str) -> Result<bool, PromptError> {
    let skip = |s: &str| -> usize {
        s.find(|c: char| !(c.is_whitespace() || c.is_ascii_punctuation()))
            .unwrap_or(s.len())
    };
    let word_at = |s: &str| -> usize { s.find(|c: char| !c.is_alphabetic()).unwrap_or(s.len()) };

    let mut rest = &raw[skip(raw)..];
    let mut word = &rest[..word_at(rest)];
    if word.eq_ignore_ascii_case("answer") {
        rest = &rest[word.len()..];
        rest = &rest[skip(rest)..];
        word = &rest[..word_at(rest)];
    }
    if word.eq_ignore_ascii_case("true") {
        Ok(true)
    } else if word.eq_ignore_ascii_case("false") {
        Ok(false)
    } else {
        Err(PromptError::Unparseable(raw.to_string()))
    }
}

/// True when `text` still contains a template slot delimiter pair.
pub fn has_unfilled_slot(text: &str) -> bool {
    text.find(SLOT_OPEN)
        .is_some_and(|i| text[i + SLOT_OPEN.len()..].contains(SLOT_CLOSE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Category;
    use crate::narrative::{Demonstration, LevelSpec};
    use alloc::collections::BTreeSet;
    use proptest::prelude::*;

    fn origin_trigger() -> TriggerSpec {
        TriggerSpec {
            id: "origin".into(),
            description: "asks about Ryno's origin".into(),
            preamble: "Below are questions that have the same meaning of \"where\" and pertain to the origin of the entity being asked about:".into(),
            demonstrations: vec![
                Demonstration::new("Can you recollect your place of origin?", true),
                Demonstration::new("Where do you think am I?", false),
                Demonstration::new("Could you jog your memory about the place you come from?", true),
                Demonstration::new("How do you think?", false),
            ],
            instruction: DEFAULT_TRIGGER_INSTRUCTION.into(),
        }
    }

    fn level() -> LevelSpec {
        LevelSpec {
            id: 1,
            goal_text: "goal".into(),
            role_description: "You're Ryno.".into(),
            context_tags: BTreeSet::new(),
            trigger: origin_trigger(),
            end_cutscene: "cut".into(),
            response_format: DEFAULT_RESPONSE_FORMAT.into(),
        }
    }

    fn turn(speaker: Speaker, text: &str) -> HistoryEntry {
        HistoryEntry {
            speaker,
            text: text.into(),
            timestamp: 0,
        }
    }

    #[test]
    fn trigger_prompt_layout() {
        let p = build_trigger_prompt(&origin_trigger(), "where are you from");
        let expected = "Below are questions that have the same meaning of \"where\" and pertain to the origin of the entity being asked about:\n\
Question: Can you recollect your place of origin?\n\
Answer: True\n\
Question: Where do you think am I?\n\
Answer: False\n\
Question: Could you jog your memory about the place you come from?\n\
Answer: True\n\
Question: How do you think?\n\
Answer: False\n\
Now answer the question below and tell whether it is true or false.\n\
Question: where are you from\n\
Answer:";
        assert_eq!(p.text, expected);
        assert!(p.text.ends_with("Question: where are you from\nAnswer:"));
        assert_eq!(p, build_trigger_prompt(&origin_trigger(), "where are you from"));
    }

    #[test]
    fn parse_replies() {
        assert_eq!(parse_classifier_reply("True"), Ok(true));
        assert_eq!(parse_classifier_reply(" false."), Ok(false));
        assert_eq!(parse_classifier_reply("Answer: TRUE"), Ok(true));
        assert_eq!(parse_classifier_reply("\"False\""), Ok(false));
        assert!(matches!(
            parse_classifier_reply("I think so"),
            Err(PromptError::Unparseable(_))
        ));
        assert!(parse_classifier_reply("Truely").is_err());
        assert!(parse_classifier_reply("").is_err());
    }

    #[test]
    fn empty_history_one_story_entry() {
        let entry = CorpusEntry::new("s", Category::Thing, "Peak", "The source glows at dusk.", ["x"]);
        let b = build_dialogue_prompt(
            &level(),
            &DialogueStyle::default(),
            &[],
            &[&entry],
            "hello",
            10_000,
            &CharsPerToken::default(),
        )
        .unwrap();
        assert_eq!(b.context_text.matches("The source glows at dusk.").count(), 1);
        assert!(!b.context_text.contains("Player:"));
        assert!(b.system_text.contains("You're Ryno."));
        assert!(b.system_text.ends_with(DEFAULT_RESPONSE_FORMAT));
        assert!(!has_unfilled_slot(&b.context_text));
        assert_eq!(b.user_text, "hello");
    }

    #[test]
    fn four_turns_rendered_in_order() {
        let history = [
            turn(Speaker::System, "prologue"),
            turn(Speaker::Player, "hi"),
            turn(Speaker::Npc, "who are you?"),
            turn(Speaker::Player, "a friend"),
            turn(Speaker::Npc, "I forget things"),
        ];
        let b = build_dialogue_prompt(
            &level(),
            &DialogueStyle::default(),
            &history,
            &[],
            "go on",
            10_000,
            &CharsPerToken::default(),
        )
        .unwrap();
        assert!(b.context_text.ends_with(
            "Your earlier conversations:\nPlayer: hi\nRyno: who are you?\nPlayer: a friend\nRyno: I forget things"
        ));
        assert!(!b.context_text.contains("prologue"));
    }

    #[test]
    fn budget_too_small_for_system_text() {
        let err = build_dialogue_prompt(
            &level(),
            &DialogueStyle::default(),
            &[],
            &[],
            "hi",
            5,
            &CharsPerToken::default(),
        )
        .unwrap_err();
        assert!(matches!(err, PromptError::BudgetTooSmall { budget: 5, .. }));
    }

    #[test]
    fn long_history_drops_oldest_first() {
        let style = DialogueStyle::default();
        let est = CharsPerToken::default();
        let history: Vec<HistoryEntry> = (0..200)
            .map(|i| {
                let speaker = if i % 2 == 0 { Speaker::Player } else { Speaker::Npc };
                turn(speaker, &format!("message number {i} with some padding text"))
            })
            .collect();
        let budget = 300;
        let b = build_dialogue_prompt(&level(), &style, &history, &[], "now", budget, &est).unwrap();
        assert!(b.token_estimate <= budget);
        assert!(b.system_text.contains("You're Ryno."));

        // Oracle: recompute the expected suffix length independently.
        let fixed = est.estimate(&b.system_text)
            + est.estimate("now")
            + est.estimate(DEFAULT_CONTEXT_FRAMING.replace(CONVERSATION_SLOT, "").trim_end());
        let mut room = budget - fixed;
        let mut kept = 0;
        for h in history.iter().rev() {
            let who = if h.speaker == Speaker::Player { "Player" } else { "Ryno" };
            let c = est.estimate(&format!("\n{who}: {}", h.text));
            if c > room {
                break;
            }
            room -= c;
            kept += 1;
        }
        assert!(kept > 0 && kept < 200);
        assert!(b.context_text.ends_with("message number 199 with some padding text"));
        let rendered = b.context_text.matches("message number").count();
        assert_eq!(rendered, kept);
    }

    #[test]
    fn story_shrinks_only_after_history_is_gone() {
        let style = DialogueStyle::default();
        let est = CharsPerToken::default();
        let big = CorpusEntry::new("a", Category::Event, "t", "x ".repeat(200), ["t"]);
        let small = CorpusEntry::new("b", Category::Event, "t", "short note", ["t"]);
        let history = [turn(Speaker::Player, "hello there"), turn(Speaker::Npc, "hi")];
        let fixed = est.estimate(&format!("{}\n\n{}", level().role_description, DEFAULT_RESPONSE_FORMAT))
            + est.estimate("q")
            + est.estimate(DEFAULT_CONTEXT_FRAMING.replace(CONVERSATION_SLOT, "").trim_end());
        // Room for the small entry only.
        let budget = fixed + est.estimate("\n\nshort note") + 1;
        let b = build_dialogue_prompt(&level(), &style, &history, &[&small, &big], "q", budget, &est)
            .unwrap();
        assert!(b.context_text.contains("short note"));
        assert!(!b.context_text.contains("x x"));
        assert!(!b.context_text.contains("Player:"));
        assert!(b.token_estimate <= budget);
    }

    fn arb_turns() -> impl Strategy<Value = Vec<HistoryEntry>> {
        prop::collection::vec(("[a-z ]{0,40}", any::<bool>()), 0..30).prop_map(|v| {
            v.into_iter()
                .map(|(t, p)| turn(if p { Speaker::Player } else { Speaker::Npc }, &t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn truncation_matches_exhaustive_suffix_search(turns in arb_turns(), budget in 0usize..120) {
            let style = DialogueStyle::default();
            let est = CharsPerToken::default();
            let got = truncate_history(&turns, budget, &style, &est);
            // Exhaustive: smallest start index whose suffix fits.
            let cost = |s: &[HistoryEntry]| -> usize {
                s.iter().map(|h| {
                    let who = if h.speaker == Speaker::Player { "Player" } else { "Ryno" };
                    est.estimate(&format!("\n{who}: {}", h.text))
                }).sum()
            };
            let best = (0..=turns.len()).find(|&i| cost(&turns[i..]) <= budget).unwrap();
            prop_assert_eq!(got.len(), turns.len() - best);
            if budget == 0 {
                prop_assert!(got.is_empty());
            }
        }

        #[test]
        fn dialogue_prompt_within_budget(turns in arb_turns(), budget in 80usize..400) {
            let b = build_dialogue_prompt(&level(), &DialogueStyle::default(), &turns, &[], "next?", budget, &CharsPerToken::default());
            if let Ok(b) = b {
                prop_assert!(b.token_estimate <= budget);
                prop_assert!(b.system_text.contains(&level().role_description));
                prop_assert!(!has_unfilled_slot(&b.context_text));
            }
        }

        #[test]
        fn input_appears_once(word in "[a-z]{1,12}") {
            let input = format!("zq{word}qz");
            let p = build_trigger_prompt(&origin_trigger(), &input);
            prop_assert_eq!(p.text.matches(input.as_str()).count(), 1);
            let suffix = format!("Question: {input}\nAnswer:");
            prop_assert!(p.text.ends_with(&suffix));
        }
    }
}
