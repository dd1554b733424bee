//! Experiment scripts: one command per line, `#` starts a comment.
//!
//! ```text
//! create base seed=42
//! advance base 30
//! fork base 30 as=left label="pipeline"
//! inject left id=e1 title="Pipeline explosion" start=30 duration=20 half_life=10 impact.OIL=0.5
//! open-session ab left right
//! control ab left run 30
//! report ab out=report.json
//! export left from=0 out=left.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use timefork_core::compare::{ControlAction, Pane};
use timefork_core::{CommodityId, Fixed, Tick, WorldEvent};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ScriptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ScriptError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Create {
        alias: String,
        seed: Option<u64>,
        scenario: Option<PathBuf>,
    },
    Advance {
        alias: String,
        n_ticks: u64,
    },
    Inject {
        alias: String,
        event: WorldEvent,
        auto_fork: bool,
        label: Option<String>,
        new_alias: Option<String>,
    },
    Fork {
        alias: String,
        tick: Tick,
        new_alias: String,
        label: Option<String>,
    },
    OpenSession {
        session: String,
        left: String,
        right: String,
    },
    Control {
        session: String,
        pane: Pane,
        action: ControlAction,
    },
    Report {
        session: String,
        out: Option<PathBuf>,
    },
    Export {
        alias: String,
        from: Tick,
        to: Option<Tick>,
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub number: usize,
    pub command: Command,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    pub lines: Vec<Line>,
}

impl Script {
    /// Parses and validates: every alias must be defined before it is used.
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let number = i + 1;
            let err = |message: String| ScriptError { line: number, message };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let tokens = shlex::split(trimmed).ok_or_else(|| err("unbalanced quotes".into()))?;
            let tokens: Vec<String> = tokens.into_iter().take_while(|t| !t.starts_with('#')).collect();
            if tokens.is_empty() {
                continue;
            }
            let command = parse_command(&tokens).map_err(err)?;
            lines.push(Line { number, command });
        }
        let script = Script { lines };
        script.check_aliases()?;
        Ok(script)
    }

    fn check_aliases(&self) -> Result<(), ScriptError> {
        let mut branches = BTreeSet::new();
        let mut sessions = BTreeSet::new();
        for line in &self.lines {
            let err = |message: String| ScriptError {
                line: line.number,
                message,
            };
            let need = |set: &BTreeSet<String>, alias: &str, kind: &str| {
                if set.contains(alias) {
                    Ok(())
                } else {
                    Err(err(format!("{kind} {alias:?} is not defined yet")))
                }
            };
            match &line.command {
                Command::Create { alias, .. } => {
                    branches.insert(alias.clone());
                }
                Command::Advance { alias, .. } | Command::Export { alias, .. } => need(&branches, alias, "branch")?,
                Command::Inject { alias, new_alias, .. } => {
                    need(&branches, alias, "branch")?;
                    if let Some(a) = new_alias {
                        branches.insert(a.clone());
                    }
                }
                Command::Fork { alias, new_alias, .. } => {
                    need(&branches, alias, "branch")?;
                    branches.insert(new_alias.clone());
                }
                Command::OpenSession { session, left, right } => {
                    need(&branches, left, "branch")?;
                    need(&branches, right, "branch")?;
                    sessions.insert(session.clone());
                }
                Command::Control { session, .. } | Command::Report { session, .. } => {
                    need(&sessions, session, "session")?
                }
            }
        }
        Ok(())
    }
}

/// Positional arguments and `key=value` options of one line.
struct Args {
    positional: Vec<String>,
    options: BTreeMap<String, String>,
}

impl Args {
    fn split(tokens: &[String]) -> Result<Args, String> {
        let mut positional = Vec::new();
        let mut options = BTreeMap::new();
        for t in tokens {
            match t.split_once('=') {
                Some((k, v)) if !k.is_empty() => {
                    if options.insert(k.to_string(), v.to_string()).is_some() {
                        return Err(format!("option {k} given twice"));
                    }
                }
                _ => positional.push(t.clone()),
            }
        }
        Ok(Args { positional, options })
    }

    fn positional(&self, n: usize, usage: &str) -> Result<&[String], String> {
        if self.positional.len() != n {
            return Err(format!("expected: {usage}"));
        }
        Ok(&self.positional)
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.options.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<String, String> {
        self.take(key).ok_or_else(|| format!("missing {key}="))
    }

    fn finish(self) -> Result<(), String> {
        match self.options.keys().next() {
            Some(k) => Err(format!("unknown option {k}")),
            None => Ok(()),
        }
    }
}

fn number<T: std::str::FromStr>(what: &str, text: &str) -> Result<T, String> {
    text.parse().map_err(|_| format!("{what}: {text:?} is not a valid number"))
}

fn flag(what: &str, text: &str) -> Result<bool, String> {
    match text {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{what}: expected true or false, got {text:?}")),
    }
}

fn alias(text: &str) -> Result<String, String> {
    let ok = !text.is_empty() && text.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(text.to_string())
    } else {
        Err(format!("invalid alias {text:?}"))
    }
}

fn parse_command(tokens: &[String]) -> Result<Command, String> {
    let (verb, rest) = tokens.split_first().expect("nonempty");
    let mut args = Args::split(rest)?;
    let command = match verb.as_str() {
        "create" => {
            let p = args.positional(1, "create <alias> [seed=N] [scenario=path]")?;
            Command::Create {
                alias: alias(&p[0])?,
                seed: args.take("seed").map(|s| number("seed", &s)).transpose()?,
                scenario: args.take("scenario").map(PathBuf::from),
            }
        }
        "advance" => {
            let p = args.positional(2, "advance <alias> <n_ticks>")?;
            Command::Advance {
                alias: alias(&p[0])?,
                n_ticks: number("n_ticks", &p[1])?,
            }
        }
        "fork" => {
            let p = args.positional(2, "fork <alias> <tick> as=<alias> [label=text]")?;
            let (from, tick) = (alias(&p[0])?, Tick(number("tick", &p[1])?));
            Command::Fork {
                alias: from,
                tick,
                new_alias: alias(&args.require("as")?)?,
                label: args.take("label"),
            }
        }
        "inject" => {
            let p = args.positional(1, "inject <alias> id=.. title=.. start=.. duration=.. half_life=.. impact.<C>=..")?;
            let target = alias(&p[0])?;
            let mut impacts = BTreeMap::new();
            let keys: Vec<String> = args.options.keys().filter(|k| k.starts_with("impact.")).cloned().collect();
            for key in keys {
                let value = args.take(&key).expect("listed");
                let commodity = CommodityId::new(&key["impact.".len()..]).map_err(|e| e.to_string())?;
                let impact: Fixed = value.parse().map_err(|_| format!("{key}: {value:?} is not a decimal"))?;
                impacts.insert(commodity, impact);
            }
            let event = WorldEvent {
                event_id: args.require("id")?,
                title: args.require("title")?,
                body: args.take("body").unwrap_or_default(),
                impacts,
                start_tick: Tick(number("start", &args.require("start")?)?),
                duration_ticks: number("duration", &args.require("duration")?)?,
                half_life_ticks: number("half_life", &args.require("half_life")?)?,
            };
            event.validate().map_err(|e| e.to_string())?;
            Command::Inject {
                alias: target,
                event,
                auto_fork: args.take("auto_fork").map(|v| flag("auto_fork", &v)).transpose()?.unwrap_or(false),
                label: args.take("label"),
                new_alias: args.take("as").map(|a| alias(&a)).transpose()?,
            }
        }
        "open-session" => {
            let p = args.positional(3, "open-session <session> <left> <right>")?;
            Command::OpenSession {
                session: alias(&p[0])?,
                left: alias(&p[1])?,
                right: alias(&p[2])?,
            }
        }
        "control" => {
            let usage = "control <session> left|right run <n> | control <session> left|right pause";
            let p = &args.positional;
            let pane = match p.get(1).map(String::as_str) {
                Some("left") => Pane::Left,
                Some("right") => Pane::Right,
                _ => return Err(format!("expected: {usage}")),
            };
            let action = match (p.get(2).map(String::as_str), p.len()) {
                (Some("run"), 4) => ControlAction::Run {
                    n_ticks: number("n_ticks", &p[3])?,
                },
                (Some("pause"), 3) => ControlAction::Pause,
                _ => return Err(format!("expected: {usage}")),
            };
            Command::Control {
                session: alias(&p[0])?,
                pane,
                action,
            }
        }
        "report" => {
            let p = args.positional(1, "report <session> [out=path]")?;
            Command::Report {
                session: alias(&p[0])?,
                out: args.take("out").map(PathBuf::from),
            }
        }
        "export" => {
            let p = args.positional(1, "export <alias> [from=N] [to=N] [out=path]")?;
            Command::Export {
                alias: alias(&p[0])?,
                from: Tick(args.take("from").map(|v| number("from", &v)).transpose()?.unwrap_or(0)),
                to: args.take("to").map(|v| number("to", &v).map(Tick)).transpose()?,
                out: args.take("out").map(PathBuf::from),
            }
        }
        other => return Err(format!("unknown command {other:?}")),
    };
    args.finish()?;
    Ok(command)
}
