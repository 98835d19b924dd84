//! Verbosity control via the `DQROUTE_LOG` environment variable.

use std::sync::OnceLock;

use anyhow::bail;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Quiet,
    Info,
    Debug,
}

static LEVEL: OnceLock<Level> = OnceLock::new();

/// Read `DQROUTE_LOG` (quiet | info | debug; default info).
pub fn init_from_env() -> anyhow::Result<()> {
    let level = match std::env::var("DQROUTE_LOG") {
        Ok(v) => match v.as_str() {
            "quiet" => Level::Quiet,
            "info" => Level::Info,
            "debug" => Level::Debug,
            other => bail!("DQROUTE_LOG must be quiet, info, or debug (got {other:?})"),
        },
        Err(_) => Level::Info,
    };
    let _ = LEVEL.set(level);
    Ok(())
}

pub fn level() -> Level {
    *LEVEL.get().unwrap_or(&Level::Info)
}

pub fn info(msg: impl AsRef<str>) {
    if level() >= Level::Info {
        println!("{}", msg.as_ref());
    }
}

pub fn debug(msg: impl AsRef<str>) {
    if level() >= Level::Debug {
        println!("{}", msg.as_ref());
    }
}
