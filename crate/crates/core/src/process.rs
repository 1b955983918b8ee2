//! Child-process execution with captured output and a wall-clock cap.

use std::collections::BTreeSet;
use std::io::{self, Read};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

/// PIDs of children that are currently running, for interrupt cleanup.
static LIVE_CHILDREN: Mutex<BTreeSet<u32>> = Mutex::new(BTreeSet::new());

#[derive(Debug, Error)]
pub enum SpawnError {
    #[error("executable not found: {0}")]
    ExecutableNotFound(String),
    #[error("empty command line")]
    EmptyCommand,
    #[error("failed to run {program}: {source}")]
    Io {
        program: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Captured {
    /// `None` when the child was killed by a signal (including our own timeout kill).
    pub exit_status: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
}

pub struct Invocation<'a> {
    pub argv: &'a [String],
    pub cwd: Option<&'a Path>,
    pub env: &'a [(String, String)],
    pub timeout: Duration,
}

fn drain<R: Read + Send + 'static>(mut pipe: R) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

pub fn run(inv: &Invocation<'_>) -> Result<Captured, SpawnError> {
    let (program, args) = inv.argv.split_first().ok_or(SpawnError::EmptyCommand)?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = inv.cwd {
        cmd.current_dir(dir);
    }
    for (k, v) in inv.env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => SpawnError::ExecutableNotFound(program.clone()),
        _ => SpawnError::Io {
            program: program.clone(),
            source: e,
        },
    })?;
    let pid = child.id();
    LIVE_CHILDREN.lock().unwrap().insert(pid);

    let out = drain(child.stdout.take().expect("piped stdout"));
    let err = drain(child.stderr.take().expect("piped stderr"));

    let deadline = Instant::now() + inv.timeout;
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Ok(status),
            Ok(None) if Instant::now() >= deadline => {
                timed_out = true;
                let _ = child.kill();
                break child.wait();
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(e) => break Err(e),
        }
    };
    LIVE_CHILDREN.lock().unwrap().remove(&pid);
    let status = status.map_err(|source| SpawnError::Io {
        program: program.clone(),
        source,
    })?;

    // Grandchildren may keep the pipes open after a timeout kill; don't block on them.
    let collect = |h: thread::JoinHandle<Vec<u8>>| {
        if timed_out && !h.is_finished() {
            thread::sleep(Duration::from_millis(50));
            if !h.is_finished() {
                return String::new();
            }
        }
        String::from_utf8_lossy(&h.join().unwrap_or_default()).into_owned()
    };
    Ok(Captured {
        exit_status: status.code(),
        stdout: collect(out),
        stderr: collect(err),
        timed_out,
    })
}

/// Kills every child spawned through [`run`] that has not exited yet.
pub fn kill_live_children() {
    let pids: Vec<u32> = LIVE_CHILDREN.lock().map(|s| s.iter().copied().collect()).unwrap_or_default();
    for pid in pids {
        // SAFETY: plain syscall on a pid we spawned; a stale pid only yields ESRCH.
        unsafe {
            libc::kill(pid as libc::pid_t, libc::SIGKILL);
        }
    }
}

/// Shell-style rendering of an argv for transcripts.
pub fn display_argv(argv: &[String]) -> String {
    argv.iter()
        .map(|a| {
            if !a.is_empty() && a.chars().all(|c| c.is_ascii_alphanumeric() || "-_=./:+,@".contains(c)) {
                a.clone()
            } else {
                format!("'{}'", a.replace('\'', r"'\''"))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}
