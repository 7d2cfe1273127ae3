use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Arg, CommandFactory, FromArgMatches, Parser, Subcommand};
use vpatch_cli::config::KEYS;
use vpatch_cli::pipeline::{self, Step};
use vpatch_cli::service::{self, Verdict};
use vpatch_cli::{exit, CliError, Settings};

/// Fuzzing-driven virtual patching: generate labeled inputs, train a
/// filter, and scan payloads with it.
///
/// Every config key can also be given as a flag, e.g. `--max-executions`.
#[derive(Parser, Debug)]
#[command(name = "vpatch", version)]
struct Cli {
    /// Config file (defaults to $VPATCH_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a fuzzing campaign into a corpus directory.
    Fuzz,
    /// Split a corpus at the time barrier into train/eval sides.
    Dataset,
    /// Train a model on the train side of a split.
    Train,
    /// Evaluate a model on the eval side of a split.
    Eval,
    /// Old-version/new-version experiment.
    Aot,
    /// Token list operations.
    Tokens {
        #[command(subcommand)]
        action: TokensAction,
    },
    /// Score one file; exit status 0 allows, 2 blocks.
    Scan { input: PathBuf },
    /// Serve scans over TCP.
    Serve,
}

#[derive(Subcommand, Debug)]
enum TokensAction {
    /// Print or write the token list in dictionary form.
    Export,
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn command() -> clap::Command {
    KEYS.iter().fold(Cli::command(), |cmd, key| {
        cmd.arg(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .global(true)
                .help(format!("Override the `{key}` setting")),
        )
    })
}

fn settings(matches: &clap::ArgMatches, config: Option<&PathBuf>) -> Result<Settings, CliError> {
    let overrides: Vec<(&str, &str)> = KEYS
        .iter()
        .filter_map(|k| matches.get_one::<String>(k).map(|v| (*k, v.as_str())))
        .collect();
    Settings::resolve(config.map(PathBuf::as_path), overrides)
}

fn report_skip(path: &std::path::Path) {
    println!("{} exists; nothing to do (use --force to redo)", path.display());
}

fn run(cli: Cli, s: Settings) -> Result<i32, CliError> {
    let force = cli.force;
    match cli.command {
        Command::Fuzz => match pipeline::fuzz(&s, force)? {
            Step::Done(f) => println!(
                "executions\t{}\nunique\t{}\nbenign\t{}\nerror\t{}\ncrash\t{}\ntokens\t{}",
                f.executions, f.unique, f.label_counts[0], f.label_counts[1], f.label_counts[2], f.tokens
            ),
            Step::Skipped(p) => report_skip(&p),
        },
        Command::Dataset => match pipeline::dataset(&s, force)? {
            Step::Done(d) => println!(
                "barrier_seq\t{}\ntrain\t{}\neval\t{}\nexcluded\t{}",
                d.barrier_seq,
                d.train,
                d.eval,
                d.excluded.len()
            ),
            Step::Skipped(p) => report_skip(&p),
        },
        Command::Train => match pipeline::train(&s, force)? {
            Step::Done(t) => {
                println!("samples\t{}\nparameters\t{}", t.samples, t.parameters);
                for (i, l) in t.epoch_losses.iter().enumerate() {
                    println!("epoch_{}_loss\t{l:.6}", i + 1);
                }
            }
            Step::Skipped(p) => report_skip(&p),
        },
        Command::Eval => match pipeline::eval(&s, force)? {
            Step::Done(r) => print!("{}", r.to_text()),
            Step::Skipped(p) => report_skip(&p),
        },
        Command::Aot => match pipeline::aot(&s, force)? {
            Step::Done(o) => print!("{}", pipeline::aot_text(&o, s.max_fpr)),
            Step::Skipped(p) => report_skip(&p),
        },
        Command::Tokens {
            action: TokensAction::Export,
        } => match pipeline::tokens_export(&s, force)? {
            Step::Done(text) if s.out.is_none() => print!("{text}"),
            Step::Done(_) => {}
            Step::Skipped(p) => report_skip(&p),
        },
        Command::Scan { input } => {
            let det = pipeline::detector(&s)?;
            let bytes = std::fs::read(&input)
                .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
            let r = service::scan_bytes(&det, &bytes, s.threshold);
            let (word, code) = match r.verdict {
                Verdict::Allow => ("allow", exit::OK),
                Verdict::Block => ("block", exit::BLOCK),
            };
            println!("{word}\t{:.6}\t{:016x}", r.probability, r.token_set_version);
            return Ok(code);
        }
        Command::Serve => {
            let det = Arc::new(pipeline::detector(&s)?);
            let listener = TcpListener::bind(("127.0.0.1", s.port))
                .map_err(|e| CliError::Usage(format!("cannot bind port {}: {e}", s.port)))?;
            service::serve(listener, det, s.threshold)?;
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(exit::USAGE as u8);
        }
    };
    let result = settings(&matches, cli.config.as_ref()).and_then(|s| run(cli, s));
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
