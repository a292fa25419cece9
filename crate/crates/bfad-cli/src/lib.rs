//! Command-line front end: pipeline stages as subcommands over shared config.
//!
//! Flag parity with the documented interface is checked by a doc test:
//!
//! ```
//! let help = bfad_cli::full_help_text();
//! for flag in [
//!     "--tau",
//!     "--budget-tokens",
//!     "--strategy",
//!     "--ratio-transform",
//!     "--count-in-strings",
//!     "--require-e-modifier",
//!     "--seed",
//!     "--stub",
//!     "--require-label",
//!     "--fallback-uniform",
//!     "--unparseable-as-webshell",
//!     "--registry",
//!     "--config",
//! ] {
//!     assert!(help.contains(flag), "missing flag {flag}");
//! }
//! ```

pub mod args;
pub mod commands;
pub mod config;

use clap::CommandFactory;

pub use args::Cli;

/// Long help of the top-level command and every subcommand, concatenated.
pub fn full_help_text() -> String {
    let mut cmd = Cli::command();
    let mut out = cmd.render_long_help().to_string();
    for sub in cmd.get_subcommands_mut() {
        out.push('\n');
        out.push_str(&sub.render_long_help().to_string());
    }
    out
}

/// A command failure carrying the process exit code.
#[derive(Debug)]
pub struct CommandError {
    pub exit_code: i32,
    pub message: String,
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CommandError {}

impl CommandError {
    pub fn unreadable(message: impl Into<String>) -> Self {
        Self {
            exit_code: 2,
            message: message.into(),
        }
    }

    pub fn corpus(message: impl Into<String>) -> Self {
        Self {
            exit_code: 3,
            message: message.into(),
        }
    }

    pub fn endpoint(message: impl Into<String>) -> Self {
        Self {
            exit_code: 4,
            message: message.into(),
        }
    }
}

/// Dispatches a parsed invocation. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        args::Command::Scan(scan_args) => commands::scan::run(&cli, scan_args),
        args::Command::Extract(extract_args) => commands::extract::run(&cli, extract_args),
        args::Command::Profile(profile_args) => commands::profile::run(&cli, profile_args),
        args::Command::BuildLibrary(build_args) => commands::build_library::run(&cli, build_args),
        args::Command::Detect(detect_args) => commands::detect::run(&cli, detect_args),
        args::Command::Split(split_args) => commands::split::run(&cli, split_args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.exit_code
        }
    }
}
