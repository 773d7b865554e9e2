#![allow(dead_code)]

use std::collections::BTreeMap;

use storyprobe_core::assessment::{
    InGameItem, InGameOption, InstrumentItem, InstrumentKind, ItemCategory, KeyDirection,
    ResponseRecord, SurveyInstrument, SurveyItem, Wave,
};
use storyprobe_core::corpus::{Category, CorpusEntry, WorldCorpus};
use storyprobe_core::gateway::{Matcher, MockBackend, MockRule, MockScript, RequestKind};
use storyprobe_core::narrative::{CampaignSpec, Demonstration, Game, GameSettings, LevelSpec, TriggerSpec};
use storyprobe_core::prompts;

pub const LINES: [&str; 2] = ["Where were you born?", "Who made you?"];

fn item(id: String, category: ItemCategory, subscale: &str) -> SurveyItem {
    SurveyItem {
        text: format!("text of {id}"),
        id,
        category,
        subscale: subscale.into(),
        scale_min: 1,
        scale_max: 5,
        reverse_coded: false,
        key_direction: KeyDirection::ProConstruct,
    }
}

fn instrument(id: &str, kind: InstrumentKind, items: Vec<InstrumentItem>) -> SurveyInstrument {
    SurveyInstrument {
        id: id.into(),
        version: "1".into(),
        kind,
        randomize_order: false,
        scale_labels: None,
        items,
    }
}

/// Four climate items, the last two negatively worded.
pub fn climate() -> SurveyInstrument {
    let items = (1..=4)
        .map(|n| {
            let mut i = item(format!("C{n}"), ItemCategory::Belief, "Climate");
            i.reverse_coded = n > 2;
            InstrumentItem::Likert(i)
        })
        .collect();
    instrument("climate", InstrumentKind::Climate, items)
}

/// Two items per trait; the second of each is reverse keyed.
pub fn big_five() -> SurveyInstrument {
    let traits = ["Extraversion", "Agreeableness", "Conscientiousness", "Neuroticism", "Openness"];
    let items = traits
        .iter()
        .flat_map(|t| {
            (0..2).map(move |k| {
                let mut i = item(format!("{t}{k}"), ItemCategory::Personality, t);
                i.reverse_coded = k == 1;
                InstrumentItem::Likert(i)
            })
        })
        .collect();
    instrument("bigfive", InstrumentKind::BigFive, items)
}

/// Two items per subscale; the first democracy item is anti keyed.
pub fn political() -> SurveyInstrument {
    let subscales = ["DemocracyEnthusiasm", "StatusQuoEvaluation", "CollectiveAction"];
    let items = subscales
        .iter()
        .flat_map(|s| {
            (0..2).map(move |k| {
                let mut i = item(format!("{s}{k}"), ItemCategory::Political, s);
                if *s == "DemocracyEnthusiasm" && k == 0 {
                    i.key_direction = KeyDirection::AntiConstruct;
                }
                InstrumentItem::Likert(i)
            })
        })
        .collect();
    instrument("political", InstrumentKind::Political, items)
}

pub fn ingame() -> SurveyInstrument {
    let items = (1..=2)
        .map(|n| {
            InstrumentItem::InGame(InGameItem {
                id: format!("G{n}"),
                npc_text: format!("question {n}"),
                options: [5, 3, 1]
                    .iter()
                    .map(|s| InGameOption {
                        label: format!("worth {s}"),
                        score: *s,
                    })
                    .collect(),
                source_item: format!("C{n}"),
            })
        })
        .collect();
    instrument("ingame", InstrumentKind::InGame, items)
}

fn level(id: u32, yes: &str, tag: &str) -> LevelSpec {
    LevelSpec {
        id,
        goal_text: format!("goal {id}"),
        role_description: format!("persona {id}"),
        context_tags: [tag.to_string()].into_iter().collect(),
        trigger: TriggerSpec {
            id: tag.into(),
            description: tag.into(),
            preamble: format!("Questions about {tag}:"),
            demonstrations: vec![
                Demonstration::new(yes, true),
                Demonstration::new("Nice weather?", false),
            ],
            instruction: prompts::DEFAULT_TRIGGER_INSTRUCTION.into(),
        },
        end_cutscene: format!("cutscene {id}"),
        response_format: prompts::DEFAULT_RESPONSE_FORMAT.into(),
    }
}

pub fn campaign() -> CampaignSpec {
    CampaignSpec {
        id: "mini".into(),
        npc_name: "Ryno".into(),
        player_label: "Player".into(),
        context_framing: prompts::DEFAULT_CONTEXT_FRAMING.into(),
        story_word_budget: 40,
        prologue: "You wake up.".into(),
        finale: "The end.".into(),
        ingame_survey_ref: "ingame".into(),
        levels: vec![level(1, LINES[0], "origin"), level(2, LINES[1], "maker")],
    }
}

pub fn corpus() -> WorldCorpus {
    WorldCorpus::new(vec![
        CorpusEntry::new("a", Category::Event, "Flood", "the water rose over the old town", ["origin"]),
        CorpusEntry::new("b", Category::Inhabitant, "Smith", "the smith built the machine", ["maker"]),
        CorpusEntry::new("c", Category::Thing, "Gear", "a brass gear", Vec::<String>::new()),
    ])
    .unwrap()
}

pub fn game() -> Game {
    Game::new(campaign(), ingame(), corpus(), GameSettings::default()).unwrap()
}

pub fn backend() -> MockBackend {
    let c = campaign();
    let script = MockScript::from_demonstrations(c.levels.iter().map(|l| &l.trigger)).extend(
        MockScript::new(vec![
            MockRule::new(Matcher::Contains(String::new()), "False")
                .for_kind(RequestKind::Classification),
            MockRule::new(Matcher::Contains(String::new()), "I remember water.")
                .for_kind(RequestKind::Dialogue),
        ]),
    );
    MockBackend::new(script).unwrap()
}

pub fn record(inst: &SurveyInstrument, pid: &str, wave: Wave, f: impl Fn(usize) -> u8) -> ResponseRecord {
    ResponseRecord {
        participant_id: pid.into(),
        instrument_id: inst.id.clone(),
        instrument_version: inst.version.clone(),
        timestamp: 10,
        wave,
        answers: inst
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id().to_string(), f(i)))
            .collect::<BTreeMap<_, _>>(),
    }
}
