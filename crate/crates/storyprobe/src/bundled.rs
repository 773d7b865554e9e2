//! The sample study compiled into the binary: a three-level campaign, its
//! world corpus, the four instruments and a mock script for offline play.

use storyprobe_core::corpus::WorldCorpus;
use storyprobe_core::gateway::MockScript;
use storyprobe_core::narrative::{CampaignSpec, Game, GameSettings};

use crate::formats::{self, InstrumentSet, LoadedInstrument};

pub const CAMPAIGN_JSON: &str = include_str!("../data/campaign.json");
pub const CORPUS_JSON: &str = include_str!("../data/corpus.json");
pub const CORPUS_FRONT_MATTER: &str = include_str!("../data/corpus.md");
pub const MOCK_SCRIPT_JSON: &str = include_str!("../data/mock_script.json");

pub const INSTRUMENTS: [(&str, &str); 4] = [
    ("climate.json", include_str!("../data/instruments/climate.json")),
    ("ipip50.json", include_str!("../data/instruments/ipip50.json")),
    ("political.json", include_str!("../data/instruments/political.json")),
    ("ingame.json", include_str!("../data/instruments/ingame.json")),
];

// The bundled files are checked by the test suite, so a failure here is a
// build defect rather than a runtime condition.

pub fn campaign() -> CampaignSpec {
    formats::parse_campaign("bundled campaign.json", CAMPAIGN_JSON).expect("bundled campaign")
}

pub fn corpus() -> WorldCorpus {
    formats::parse_corpus_json(CORPUS_JSON).expect("bundled corpus")
}

pub fn mock_script() -> MockScript {
    formats::parse_mock_script("bundled mock_script.json", MOCK_SCRIPT_JSON)
        .expect("bundled mock script")
}

pub fn instruments() -> InstrumentSet {
    let loaded: Vec<LoadedInstrument> = INSTRUMENTS
        .iter()
        .map(|(name, text)| formats::parse_instrument(name, text).expect("bundled instrument"))
        .collect();
    InstrumentSet::from_loaded("bundled instruments", loaded).expect("bundled instrument set")
}

pub fn game(settings: GameSettings) -> Game {
    Game::new(
        campaign(),
        instruments().ingame.instrument,
        corpus(),
        settings,
    )
    .expect("bundled campaign binds to its survey")
}
