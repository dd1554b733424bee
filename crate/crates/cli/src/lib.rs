//! Headless experiment driver: runs line-oriented scripts against an
//! embedded store or a running service and writes reports and timeline
//! exports.

pub mod backend;
pub mod script;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use timefork_core::branchstore::{Branch, BranchId, InjectionOutcome};
use timefork_core::canonical::to_canonical_string;
use timefork_core::compare::{ControlAction, DivergenceReport, Pane};
use timefork_core::lab::{ApiError, ErrorCode, InjectRequest};
use timefork_core::scenario::ScenarioConfig;
use timefork_core::TickRecord;

pub use backend::{Backend, HttpBackend};
pub use script::{Command, Script, ScriptError};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the seed of every `create`.
    pub seed: Option<u64>,
    /// Relative `out=` paths and default artifact names land here.
    pub out_dir: PathBuf,
    /// Relative `scenario=` paths resolve against this.
    pub script_dir: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    /// Final metadata of every aliased branch.
    pub branches: BTreeMap<String, Branch>,
    pub sessions: BTreeMap<String, String>,
    pub reports: BTreeMap<String, DivergenceReport>,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug)]
pub enum RunError {
    Script(ScriptError),
    Execution { line: usize, error: ApiError },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Script(_) => 1,
            RunError::Execution { .. } => 2,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Script(e) => write!(f, "script error: {e}"),
            RunError::Execution { line, error } => write!(f, "line {line}: {error}"),
        }
    }
}

impl std::error::Error for RunError {}

/// Canonical JSON lines, one record per line.
pub fn timeline_lines(records: &[TickRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_canonical_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Reads an export back.
pub fn parse_timeline(text: &str) -> Result<Vec<TickRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

struct Runner<'a> {
    backend: &'a dyn Backend,
    opts: &'a RunOptions,
    log: &'a mut dyn Write,
    branches: BTreeMap<String, BranchId>,
    outcome: RunOutcome,
}

fn io_error(e: impl fmt::Display) -> ApiError {
    ApiError::new(ErrorCode::IoFailure, e.to_string())
}

impl Runner<'_> {
    fn id(&self, alias: &str) -> BranchId {
        self.branches[alias].clone()
    }

    fn write_artifact(&mut self, requested: Option<&Path>, default: String, contents: &str) -> Result<PathBuf, ApiError> {
        let path = match requested {
            Some(p) if p.is_absolute() => p.to_path_buf(),
            Some(p) => self.opts.out_dir.join(p),
            None => self.opts.out_dir.join(default),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_error)?;
        }
        std::fs::write(&path, contents).map_err(|e| io_error(format!("{}: {e}", path.display())))?;
        self.outcome.artifacts.push(path.clone());
        Ok(path)
    }

    fn say(&mut self, line: usize, text: String) {
        // Progress output is best effort.
        let _ = writeln!(self.log, "[{line:>3}] {text}");
    }

    fn execute(&mut self, line: usize, command: &Command) -> Result<(), ApiError> {
        match command {
            Command::Create { alias, seed, scenario } => {
                let mut config = match scenario {
                    Some(path) => {
                        let path = self.opts.script_dir.join(path);
                        let text = std::fs::read_to_string(&path).map_err(|e| io_error(format!("{}: {e}", path.display())))?;
                        serde_json::from_str::<ScenarioConfig>(&text)
                            .map_err(|e| ApiError::new(ErrorCode::InvalidConfig, format!("{}: {e}", path.display())))?
                    }
                    None => ScenarioConfig::default14(42),
                };
                if let Some(s) = self.opts.seed.or(*seed) {
                    config.seed = s;
                }
                let created = self.backend.create(&config)?;
                self.say(
                    line,
                    format!("create {alias} -> {} (seed {}, {})", created.root_branch_id, config.seed, created.state_hash),
                );
                self.branches.insert(alias.clone(), created.root_branch_id);
            }
            Command::Advance { alias, n_ticks } => {
                let records = self.backend.advance(&self.id(alias), *n_ticks)?;
                let last = records.last().map(|r| r.tick.to_string()).unwrap_or_default();
                self.say(line, format!("advance {alias} by {n_ticks} -> {last}"));
            }
            Command::Inject {
                alias,
                event,
                auto_fork,
                label,
                new_alias,
            } => {
                let request = InjectRequest {
                    event: event.clone(),
                    auto_fork: *auto_fork,
                    label: label.clone(),
                };
                let outcome = self.backend.inject(&self.id(alias), request)?;
                let target = outcome.branch_id().clone();
                let how = match &outcome {
                    InjectionOutcome::Scheduled { .. } => "scheduled on".to_string(),
                    InjectionOutcome::ForkedInto { fork_tick, .. } => format!("forked at {fork_tick} into"),
                };
                self.say(line, format!("inject {} {how} {target}", event.event_id));
                if let Some(a) = new_alias {
                    self.branches.insert(a.clone(), target);
                }
            }
            Command::Fork {
                alias,
                tick,
                new_alias,
                label,
            } => {
                let branch = self.backend.fork(&self.id(alias), *tick, label.clone())?;
                self.say(line, format!("fork {alias} at {tick} -> {new_alias} ({})", branch.branch_id));
                self.branches.insert(new_alias.clone(), branch.branch_id);
            }
            Command::OpenSession { session, left, right } => {
                let s = self.backend.open_session(&self.id(left), &self.id(right))?;
                self.say(
                    line,
                    format!("open-session {session} ({}) ancestor tick {}", s.session_id, s.common_ancestor_tick),
                );
                self.outcome.sessions.insert(session.clone(), s.session_id);
            }
            Command::Control { session, pane, action } => {
                let id = self.outcome.sessions[session].clone();
                self.backend.control(&id, *pane, *action)?;
                let what = match action {
                    ControlAction::Run { n_ticks } => format!("run {n_ticks}"),
                    ControlAction::Pause => "pause".into(),
                };
                let side = match pane {
                    Pane::Left => "left",
                    Pane::Right => "right",
                };
                self.say(line, format!("control {session} {side} {what}"));
            }
            Command::Report { session, out } => {
                let id = self.outcome.sessions[session].clone();
                let report = self.backend.report(&id)?;
                let path = self.write_artifact(out.as_deref(), format!("report-{session}.json"), &format!("{}\n", report.to_canonical()))?;
                for s in &report.summary {
                    self.say(line, format!("report {session}: {s}"));
                }
                self.say(line, format!("report {session} -> {}", path.display()));
                self.outcome.reports.insert(session.clone(), report);
            }
            Command::Export { alias, from, to, out } => {
                let records = self.backend.timeline(&self.id(alias), *from, *to)?;
                let path = self.write_artifact(out.as_deref(), format!("timeline-{alias}.jsonl"), &timeline_lines(&records))?;
                self.say(line, format!("export {alias} ({} records) -> {}", records.len(), path.display()));
            }
        }
        Ok(())
    }
}

/// Runs a validated script. Commands execute in order; the first failure
/// stops the run.
pub fn run_script(backend: &dyn Backend, script: &Script, opts: &RunOptions, log: &mut dyn Write) -> Result<RunOutcome, RunError> {
    let mut runner = Runner {
        backend,
        opts,
        log,
        branches: BTreeMap::new(),
        outcome: RunOutcome::default(),
    };
    for line in &script.lines {
        runner
            .execute(line.number, &line.command)
            .map_err(|error| RunError::Execution { line: line.number, error })?;
    }
    let last_line = script.lines.last().map(|l| l.number).unwrap_or(0);
    for (alias, id) in runner.branches.clone() {
        let branch = backend
            .branch(&id)
            .map_err(|error| RunError::Execution { line: last_line, error })?;
        runner.outcome.branches.insert(alias, branch);
    }
    Ok(runner.outcome)
}

/// Parses and runs the script at `path`.
pub fn run_script_file(backend: &dyn Backend, path: &Path, opts: &RunOptions, log: &mut dyn Write) -> Result<RunOutcome, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RunError::Script(ScriptError {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })
    })?;
    let script = Script::parse(&text).map_err(RunError::Script)?;
    run_script(backend, &script, opts, log)
}
