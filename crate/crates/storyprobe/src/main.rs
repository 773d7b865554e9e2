use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use storyprobe::config::Config;
use storyprobe::core::clock::LogicalClock;
use storyprobe::core::corpus::CorpusPolicy;
use storyprobe::core::prompts::{build_dialogue_prompt, build_trigger_prompt};
use storyprobe::core::stats::{correlation_report, render_text};
use storyprobe::formats::{self, CorpusFormat, InstrumentSet};
use storyprobe::play::{self, AutoPlayer, Player, StdinPlayer};
use storyprobe::service::{self, load_backend, load_study};
use storyprobe::store::Store;
use storyprobe::{bundled, SystemClock};

#[derive(Parser)]
#[command(name = "storyprobe", version, about = "Conversational game runtime for survey studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP session service.
    Serve {
        #[arg(long, env = "STORYPROBE_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Play the campaign in the terminal.
    Play {
        #[arg(long, env = "STORYPROBE_CONFIG")]
        config: Option<PathBuf>,
        /// Answer every level with its first true demonstration.
        #[arg(long)]
        auto: bool,
        #[arg(long, default_value = "local")]
        participant: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the session's event log here as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Use wall-clock timestamps instead of a fixed logical clock.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Work with world corpora.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Correlation report over a data directory.
    Report {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        instrument_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        /// Also write one `x,y` CSV per scatter series into this directory.
        #[arg(long)]
        scatter_dir: Option<PathBuf>,
    },
    /// One row per complete participant, as CSV.
    Export {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        instrument_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the excluded participants and their reasons.
        #[arg(long)]
        exclusions: Option<PathBuf>,
    },
    /// Reproduce a recorded session and check the log comes out identical.
    Replay {
        events: PathBuf,
        #[arg(long, env = "STORYPROBE_CONFIG")]
        config: Option<PathBuf>,
        /// Print the transcript of the reproduced session.
        #[arg(long)]
        transcript: bool,
    },
    /// Print the prompts sent to the model.
    Prompt {
        #[command(subcommand)]
        command: PromptCommand,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Check a corpus against the size policy.
    Validate {
        path: PathBuf,
        #[arg(long, default_value_t = 8000)]
        min_words: usize,
        #[arg(long, default_value_t = 8)]
        min_per_category: usize,
    },
    /// Convert between the JSON and front-matter forms (chosen by extension).
    Convert { input: PathBuf, output: PathBuf },
}

#[derive(Subcommand)]
enum PromptCommand {
    /// Few-shot trigger classification prompt.
    Trigger {
        #[arg(long)]
        level: u32,
        #[arg(long)]
        input: String,
        #[arg(long, env = "STORYPROBE_CONFIG")]
        config: Option<PathBuf>,
    },
    /// NPC reply prompt for a first turn.
    Dialogue {
        #[arg(long)]
        level: u32,
        #[arg(long)]
        input: String,
        #[arg(long, env = "STORYPROBE_CONFIG")]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

type Failure = Box<dyn std::error::Error>;

fn load_config(path: Option<&Path>, validate: bool) -> Result<Config, Failure> {
    Ok(match path {
        Some(p) if validate => Config::load(p)?,
        Some(p) => {
            let mut c = Config::parse(&p.display().to_string(), &formats::read_file(p)?)?;
            c.apply_env(|k| std::env::var(k).ok())?;
            c
        }
        None => {
            let mut c = Config::default();
            c.apply_env(|k| std::env::var(k).ok())?;
            if validate {
                c.validate()?;
            }
            c
        }
    })
}

fn init_logging(level: &str) {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .init();
}

fn instruments(dir: Option<&Path>) -> Result<InstrumentSet, Failure> {
    Ok(match dir {
        Some(d) => InstrumentSet::load_dir(d)?,
        None => bundled::instruments(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Serve { config } => {
            let config = load_config(config.as_deref(), true)?;
            init_logging(&config.log_level);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(service::serve(config, async {
                let _ = tokio::signal::ctrl_c().await;
                log::info!("shutting down");
            }))?;
        }
        Command::Play {
            config,
            auto,
            participant,
            seed,
            log,
            wall_clock,
        } => {
            let config = load_config(config.as_deref(), false)?;
            init_logging("warn");
            let (game, _) = load_study(&config)?;
            let backend = load_backend(&config)?;
            let logical = LogicalClock::default();
            let clock: &dyn storyprobe::core::clock::Clock =
                if wall_clock { &SystemClock } else { &logical };
            let stdout = io::stdout();
            let mut auto_player = AutoPlayer::default();
            let stdin = io::stdin();
            let mut stdin_player = StdinPlayer::new(stdin.lock(), io::stdout());
            let player: &mut dyn Player = if auto { &mut auto_player } else { &mut stdin_player };
            let campaign = game.campaign().clone();
            let out = play::play(
                &game,
                backend.as_ref(),
                clock,
                &participant,
                seed,
                player,
                &mut |r| {
                    if let Some(line) = play::render_record(r, &campaign) {
                        let _ = writeln!(stdout.lock(), "{line}");
                    }
                },
            )?;
            if let Some(path) = log {
                formats::write_file(&path, &formats::events_to_jsonl(&out.log))?;
            }
            if !out.completed() {
                eprintln!("session {} left open", out.state.session_id);
            }
        }
        Command::Corpus { command } => return corpus(command),
        Command::Report {
            data_dir,
            instrument_dir,
            format,
            scatter_dir,
        } => {
            let set = instruments(instrument_dir.as_deref())?;
            let dataset = service::dataset_from_store(&Store::open(&data_dir)?, &set)?;
            let report = correlation_report(&dataset.rows)?;
            match format {
                ReportFormat::Text => print!("{}", render_text(&report)),
                ReportFormat::Json => print!("{}", formats::report_to_json(&report)),
            }
            if let Some(dir) = scatter_dir {
                for s in &report.scatter {
                    let path = dir.join(format!("{}.csv", s.name));
                    formats::write_file(&path, &formats::scatter_to_csv(&s.points)?)?;
                }
            }
        }
        Command::Export {
            data_dir,
            instrument_dir,
            out,
            exclusions,
        } => {
            let set = instruments(instrument_dir.as_deref())?;
            let dataset = service::dataset_from_store(&Store::open(&data_dir)?, &set)?;
            formats::write_file(&out, &formats::dataset_to_csv(&dataset)?)?;
            if let Some(path) = exclusions {
                formats::write_file(&path, &formats::exclusions_to_csv(&dataset)?)?;
            }
            eprintln!(
                "{} participant(s) exported, {} excluded",
                dataset.rows.len(),
                dataset.exclusions.len()
            );
        }
        Command::Replay {
            events,
            config,
            transcript,
        } => {
            let config = load_config(config.as_deref(), false)?;
            let (game, _) = load_study(&config)?;
            let text = formats::read_file(&events)?;
            let log = formats::parse_events_jsonl(&events.display().to_string(), &text)?;
            let mut ids: Vec<&str> = log.iter().map(|r| r.session_id.as_str()).collect();
            ids.dedup();
            if ids.len() != 1 {
                return Err(format!("expected one session, found {}", ids.len()).into());
            }
            let produced = play::reproduce(&game, &log)?;
            if transcript {
                print!("{}", play::transcript(&produced, game.campaign()));
            }
            eprintln!("{} record(s) reproduced exactly", produced.len());
        }
        Command::Prompt { command } => prompt(command)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn corpus(command: CorpusCommand) -> Result<ExitCode, Failure> {
    match command {
        CorpusCommand::Validate {
            path,
            min_words,
            min_per_category,
        } => {
            let corpus = formats::load_corpus(&path)?;
            let report = corpus.validate(&CorpusPolicy {
                min_words,
                min_per_category,
            });
            println!("{} entries, {} words", corpus.entries().len(), corpus.total_words());
            for (cat, n) in corpus.per_category_counts() {
                println!("  {}: {n}", cat.as_str());
            }
            if report.is_compliant() {
                println!("compliant");
            } else {
                println!("not compliant: {report:?}");
                return Ok(ExitCode::FAILURE);
            }
        }
        CorpusCommand::Convert { input, output } => {
            let corpus = formats::load_corpus(&input)?;
            let text = formats::render_corpus(&corpus, CorpusFormat::from_path(&output));
            formats::write_file(&output, &text)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn prompt(command: PromptCommand) -> Result<(), Failure> {
    let (level_id, input, config, trigger) = match command {
        PromptCommand::Trigger { level, input, config } => (level, input, config, true),
        PromptCommand::Dialogue { level, input, config } => (level, input, config, false),
    };
    let config = load_config(config.as_deref(), false)?;
    let (game, _) = load_study(&config)?;
    let level = game
        .campaign()
        .level(level_id)
        .ok_or_else(|| format!("campaign has no level {level_id}"))?;
    if trigger {
        println!("{}", build_trigger_prompt(&level.trigger, &input).text);
        return Ok(());
    }
    let story = game
        .corpus()
        .select_story_context(&level.context_tags, game.campaign().story_word_budget);
    let bundle = build_dialogue_prompt(
        level,
        &game.campaign().style(),
        &[],
        &story,
        &input,
        game.settings().prompt_budget,
        &game.settings().estimator,
    )?;
    println!("[system]\n{}\n", bundle.system_text);
    println!("[context]\n{}\n", bundle.context_text);
    println!("[user]\n{}", bundle.user_text);
    Ok(())
}
