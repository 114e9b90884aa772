//! Spawning and reaping detached helper processes (agents, local containers).

use std::collections::HashMap;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

fn children() -> &'static Mutex<HashMap<u32, Child>> {
    static CHILDREN: OnceLock<Mutex<HashMap<u32, Child>>> = OnceLock::new();
    CHILDREN.get_or_init(Default::default)
}

/// Starts `cmd` in its own process group with output appended to `log`.
pub fn spawn_detached(mut cmd: Command, log: &Path) -> std::io::Result<u32> {
    use std::os::unix::process::CommandExt;
    if let Some(dir) = log.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let out = std::fs::OpenOptions::new().create(true).append(true).open(log)?;
    cmd.stdin(Stdio::null()).stdout(out.try_clone()?).stderr(out).process_group(0);
    let child = cmd.spawn()?;
    let pid = child.id();
    children().lock().expect("child registry").insert(pid, child);
    Ok(pid)
}

/// True while `pid` exists and is not a zombie.
pub fn is_alive(pid: u32) -> bool {
    if let Some(child) = children().lock().expect("child registry").get_mut(&pid) {
        return matches!(child.try_wait(), Ok(None));
    }
    // SAFETY: signal 0 only checks for existence.
    if unsafe { libc::kill(pid as libc::pid_t, 0) } != 0 {
        return false;
    }
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => stat.rsplit_once(") ").is_none_or(|(_, rest)| !rest.starts_with('Z')),
        Err(_) => true,
    }
}

fn signal(pid: u32, sig: libc::c_int) {
    // SAFETY: plain kill(2); failures (already gone) are ignored.
    unsafe {
        libc::kill(pid as libc::pid_t, sig);
    }
}

/// SIGTERM, then SIGKILL after `grace`. Reaps the process if it is ours.
pub fn terminate(pid: u32, grace: Duration) {
    if !is_alive(pid) {
        reap(pid);
        return;
    }
    signal(pid, libc::SIGTERM);
    let deadline = Instant::now() + grace;
    while Instant::now() < deadline {
        if !is_alive(pid) {
            reap(pid);
            return;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    signal(pid, libc::SIGKILL);
    let deadline = Instant::now() + Duration::from_secs(2);
    while is_alive(pid) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    reap(pid);
}

fn reap(pid: u32) {
    if let Some(mut child) = children().lock().expect("child registry").remove(&pid) {
        let _ = child.wait();
    }
}
