//! Container runtimes: how one machine starts, limits and stops containers.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Duration;

use fogbed_core::app::{ContainerLaunch, ContainerLimit, Upload};
use fogbed_core::NodeId;
use serde::{Deserialize, Serialize};

use crate::procs;

/// Image name the local runtime maps onto the built-in mock application.
pub const MOCK_APP_IMAGE: &str = "fogbed/mock-app";

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("local directory `{0}` does not exist")]
    MissingLocalDir(PathBuf),
    #[error("cannot pull image `{image}`: {reason}")]
    Pull { image: String, reason: String },
    #[error("container `{0}` is not known on this machine")]
    UnknownContainer(String),
    #[error("container `{name}` exited immediately:\n{output}")]
    ExitedImmediately { name: String, output: String },
    #[error("{0}")]
    Command(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait ContainerRuntime: Send + Sync {
    fn kind(&self) -> &'static str;
    /// Copies a local directory to its remote path. Re-running overwrites.
    fn upload(&self, upload: &Upload) -> Result<(), RuntimeError>;
    fn pull(&self, image: &str) -> Result<(), RuntimeError>;
    fn start(&self, launch: &ContainerLaunch) -> Result<(), RuntimeError>;
    /// Stopping an already stopped or unknown container succeeds.
    fn stop(&self, container: &str) -> Result<(), RuntimeError>;
    fn update_limit(&self, limit: &ContainerLimit) -> Result<(), RuntimeError>;
    fn limits(&self) -> Result<BTreeMap<String, ContainerLimit>, RuntimeError>;
    /// Copies the remote directory into `dest`, creating it even when empty.
    fn download(&self, remote: &str, dest: &Path) -> Result<(), RuntimeError>;
    /// Extra files worth collecting, such as agent logs.
    fn logs(&self) -> Vec<PathBuf> {
        Vec::new()
    }
}

pub fn copy_dir_all(src: &Path, dst: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dst)?;
    for entry in std::fs::read_dir(src)? {
        let entry = entry?;
        let to = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir_all(&entry.path(), &to)?;
        } else {
            std::fs::copy(entry.path(), to)?;
        }
    }
    Ok(())
}

fn remote_rel(remote: &str) -> &Path {
    Path::new(remote.trim_start_matches('/'))
}

/// Expands `${NAME}` references from `env`. Unknown names stay as written.
pub fn expand_vars(s: &str, env: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    let mut rest = s;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        match rest[i + 2..].find('}') {
            Some(j) => {
                let name = &rest[i + 2..i + 2 + j];
                match env.get(name) {
                    Some(v) => out.push_str(v),
                    None => out.push_str(&rest[i..i + 3 + j]),
                }
                rest = &rest[i + 3 + j..];
            }
            None => {
                out.push_str(&rest[i..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerRecord {
    launch: ContainerLaunch,
    pid: Option<u32>,
}

/// Runs containers as plain processes below a per-machine directory.
///
/// Remote paths map to `<root>/fs/...`. Limits are recorded and exported to
/// the process environment but not enforced by the kernel.
#[derive(Debug, Clone)]
pub struct LocalProcessRuntime {
    pub root: PathBuf,
    pub machine: NodeId,
    pub bind: IpAddr,
    pub relay: Option<SocketAddr>,
    pub events_url: Option<String>,
    /// Executable providing the `mock-app` subcommand.
    pub program: PathBuf,
}

impl LocalProcessRuntime {
    fn record_path(&self, name: &str) -> PathBuf {
        self.root.join("containers").join(format!("{name}.json"))
    }

    fn read_record(&self, name: &str) -> Option<ContainerRecord> {
        serde_json::from_str(&std::fs::read_to_string(self.record_path(name)).ok()?).ok()
    }

    fn write_record(&self, name: &str, rec: &ContainerRecord) -> Result<(), RuntimeError> {
        let path = self.record_path(name);
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        std::fs::write(path, serde_json::to_vec_pretty(rec).expect("record serializes"))?;
        Ok(())
    }

    pub fn fs_root(&self) -> PathBuf {
        self.root.join("fs")
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.log"))
    }

    /// Names of containers with a record on this machine.
    pub fn containers(&self) -> Vec<String> {
        let Ok(dir) = std::fs::read_dir(self.root.join("containers")) else { return Vec::new() };
        let mut out: Vec<String> = dir
            .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix(".json").map(str::to_string))
            .collect();
        out.sort();
        out
    }

    /// Pids of containers that are still running.
    pub fn running_pids(&self) -> Vec<u32> {
        self.containers()
            .iter()
            .filter_map(|c| self.read_record(c)?.pid)
            .filter(|p| procs::is_alive(*p))
            .collect()
    }

    fn command_for(&self, launch: &ContainerLaunch) -> Result<Command, RuntimeError> {
        let args: Vec<String> = launch.args.iter().map(|a| expand_vars(a, &launch.env)).collect();
        let mut cmd = if launch.image == MOCK_APP_IMAGE {
            let mut c = Command::new(&self.program);
            c.arg("mock-app");
            c
        } else if let Some(path) = launch.image.strip_prefix("exec:") {
            Command::new(path)
        } else {
            return Err(RuntimeError::Pull {
                image: launch.image.clone(),
                reason: "the local runtime only runs `fogbed/mock-app` and `exec:<path>` images".into(),
            });
        };
        cmd.args(args).envs(&launch.env);
        cmd.env("FOGBED_MACHINE", self.machine.as_str())
            .env("FOGBED_CONTAINER", &launch.name)
            .env("FOGBED_FS_ROOT", self.fs_root())
            .env("FOGBED_BIND", self.bind.to_string())
            .env("FOGBED_CPU_MILLICORES", launch.limit.cpu.0.to_string())
            .env("FOGBED_MEMORY_BYTES", launch.limit.memory_bytes.to_string());
        if let Some(r) = self.relay {
            cmd.env("FOGBED_RELAY", r.to_string());
        }
        if let Some(u) = &self.events_url {
            cmd.env("FOGBED_EVENTS_URL", u);
        }
        if let Some(p) = launch.control_port {
            cmd.env("FOGBED_CONTROL_PORT", p.to_string());
        }
        Ok(cmd)
    }
}

impl ContainerRuntime for LocalProcessRuntime {
    fn kind(&self) -> &'static str {
        "local-process"
    }

    fn upload(&self, upload: &Upload) -> Result<(), RuntimeError> {
        if !upload.local.is_dir() {
            return Err(RuntimeError::MissingLocalDir(upload.local.clone()));
        }
        copy_dir_all(&upload.local, &self.fs_root().join(remote_rel(&upload.remote)))?;
        Ok(())
    }

    fn pull(&self, image: &str) -> Result<(), RuntimeError> {
        if image == MOCK_APP_IMAGE {
            return Ok(());
        }
        match image.strip_prefix("exec:") {
            Some(path) if Path::new(path).is_file() => Ok(()),
            Some(path) => Err(RuntimeError::Pull { image: image.into(), reason: format!("`{path}` not found") }),
            None => Err(RuntimeError::Pull {
                image: image.into(),
                reason: "the local runtime only runs `fogbed/mock-app` and `exec:<path>` images".into(),
            }),
        }
    }

    fn start(&self, launch: &ContainerLaunch) -> Result<(), RuntimeError> {
        if let Some(pid) = self.read_record(&launch.name).and_then(|r| r.pid) {
            procs::terminate(pid, Duration::from_secs(2));
        }
        std::fs::create_dir_all(self.fs_root())?;
        let log = self.log_path(&launch.name);
        let _ = std::fs::remove_file(&log);
        let pid = procs::spawn_detached(self.command_for(launch)?, &log)?;
        self.write_record(&launch.name, &ContainerRecord { launch: launch.clone(), pid: Some(pid) })?;
        std::thread::sleep(Duration::from_millis(150));
        if !procs::is_alive(pid) {
            procs::terminate(pid, Duration::ZERO);
            self.write_record(&launch.name, &ContainerRecord { launch: launch.clone(), pid: None })?;
            let output = std::fs::read_to_string(&log).unwrap_or_default();
            return Err(RuntimeError::ExitedImmediately { name: launch.name.clone(), output });
        }
        Ok(())
    }

    fn stop(&self, container: &str) -> Result<(), RuntimeError> {
        if let Some(mut rec) = self.read_record(container) {
            if let Some(pid) = rec.pid.take() {
                procs::terminate(pid, Duration::from_secs(2));
                self.write_record(container, &rec)?;
            }
        }
        Ok(())
    }

    fn update_limit(&self, limit: &ContainerLimit) -> Result<(), RuntimeError> {
        let mut rec = self.read_record(&limit.container).ok_or_else(|| RuntimeError::UnknownContainer(limit.container.clone()))?;
        rec.launch.limit = limit.clone();
        self.write_record(&limit.container, &rec)
    }

    fn limits(&self) -> Result<BTreeMap<String, ContainerLimit>, RuntimeError> {
        Ok(self.containers().into_iter().filter_map(|c| Some((c.clone(), self.read_record(&c)?.launch.limit))).collect())
    }

    fn download(&self, remote: &str, dest: &Path) -> Result<(), RuntimeError> {
        let src = self.fs_root().join(remote_rel(remote));
        std::fs::create_dir_all(dest)?;
        if src.is_dir() {
            copy_dir_all(&src, dest)?;
        }
        Ok(())
    }

    fn logs(&self) -> Vec<PathBuf> {
        let mut out = vec![self.root.join("agent.log")];
        out.extend(self.containers().iter().map(|c| self.log_path(c)));
        out.retain(|p| p.is_file());
        out
    }
}

/// Drives a local container engine through its command-line client.
///
/// Uploads are staged below `staging` and bind-mounted at their remote path.
#[derive(Debug, Clone)]
pub struct DockerCliRuntime {
    pub docker: String,
    pub machine: NodeId,
    pub staging: PathBuf,
}

impl DockerCliRuntime {
    fn container_name(&self, name: &str) -> String {
        format!("fogbed-{}-{}", self.machine, name)
    }

    fn run(&self, args: &[String]) -> Result<String, RuntimeError> {
        let out = Command::new(&self.docker).args(args).output()?;
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).into_owned())
        } else {
            Err(RuntimeError::Command(format!(
                "{} {}: {}",
                self.docker,
                args.join(" "),
                String::from_utf8_lossy(&out.stderr).trim()
            )))
        }
    }

    fn limit_args(limit: &ContainerLimit) -> Vec<String> {
        vec![
            "--cpus".into(),
            format!("{:.3}", limit.cpu.as_cores_f64()),
            "--memory".into(),
            format!("{}b", limit.memory_bytes),
        ]
    }

    /// Arguments of the `run` invocation for `launch`.
    pub fn run_args(&self, launch: &ContainerLaunch) -> Vec<String> {
        let mut args = vec!["run".into(), "-d".into(), "--name".into(), self.container_name(&launch.name)];
        args.extend(Self::limit_args(&launch.limit));
        if let Ok(dirs) = std::fs::read_dir(&self.staging) {
            let mut mounts: Vec<_> = dirs.filter_map(|d| d.ok()).map(|d| d.file_name()).collect();
            mounts.sort();
            for m in mounts {
                let host = self.staging.join(&m);
                args.push("-v".into());
                args.push(format!("{}:/{}", host.display(), m.to_string_lossy()));
            }
        }
        for (k, v) in &launch.env {
            args.push("-e".into());
            args.push(format!("{k}={v}"));
        }
        args.push(launch.image.clone());
        args.extend(launch.args.iter().cloned());
        args
    }
}

impl ContainerRuntime for DockerCliRuntime {
    fn kind(&self) -> &'static str {
        "docker"
    }

    fn upload(&self, upload: &Upload) -> Result<(), RuntimeError> {
        if !upload.local.is_dir() {
            return Err(RuntimeError::MissingLocalDir(upload.local.clone()));
        }
        copy_dir_all(&upload.local, &self.staging.join(remote_rel(&upload.remote)))?;
        Ok(())
    }

    fn pull(&self, image: &str) -> Result<(), RuntimeError> {
        if self.run(&["image".into(), "inspect".into(), image.into()]).is_ok() {
            return Ok(());
        }
        self.run(&["pull".into(), image.into()])
            .map(drop)
            .map_err(|e| RuntimeError::Pull { image: image.into(), reason: e.to_string() })
    }

    fn start(&self, launch: &ContainerLaunch) -> Result<(), RuntimeError> {
        let _ = self.stop(&launch.name);
        self.run(&self.run_args(launch))?;
        std::thread::sleep(Duration::from_millis(300));
        let state = self.run(&["inspect".into(), "-f".into(), "{{.State.Running}}".into(), self.container_name(&launch.name)])?;
        if state.trim() != "true" {
            let output = self.run(&["logs".into(), self.container_name(&launch.name)]).unwrap_or_default();
            return Err(RuntimeError::ExitedImmediately { name: launch.name.clone(), output });
        }
        Ok(())
    }

    fn stop(&self, container: &str) -> Result<(), RuntimeError> {
        match self.run(&["rm".into(), "-f".into(), self.container_name(container)]) {
            Ok(_) => Ok(()),
            Err(RuntimeError::Command(msg)) if msg.contains("No such container") => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn update_limit(&self, limit: &ContainerLimit) -> Result<(), RuntimeError> {
        let mut args = vec!["update".to_string()];
        args.extend(Self::limit_args(limit));
        args.push(self.container_name(&limit.container));
        self.run(&args).map(drop).map_err(|e| match e {
            RuntimeError::Command(m) if m.contains("No such container") => RuntimeError::UnknownContainer(limit.container.clone()),
            e => e,
        })
    }

    fn limits(&self) -> Result<BTreeMap<String, ContainerLimit>, RuntimeError> {
        let prefix = format!("fogbed-{}-", self.machine);
        let names = self.run(&["ps".into(), "--format".into(), "{{.Names}}".into()])?;
        let mut out = BTreeMap::new();
        for full in names.lines().filter(|n| n.starts_with(&prefix)) {
            let inspect = self.run(&[
                "inspect".into(),
                "-f".into(),
                "{{.HostConfig.NanoCpus}} {{.HostConfig.Memory}}".into(),
                full.into(),
            ])?;
            let mut it = inspect.split_whitespace().map(|v| v.parse::<u64>().unwrap_or(0));
            let (nano, mem) = (it.next().unwrap_or(0), it.next().unwrap_or(0));
            let name = full[prefix.len()..].to_string();
            out.insert(
                name.clone(),
                ContainerLimit { container: name, cpu: fogbed_core::units::Millicores(nano / 1_000_000), memory_bytes: mem },
            );
        }
        Ok(out)
    }

    fn download(&self, remote: &str, dest: &Path) -> Result<(), RuntimeError> {
        let src = self.staging.join(remote_rel(remote));
        std::fs::create_dir_all(dest)?;
        if src.is_dir() {
            copy_dir_all(&src, dest)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuntimeCall {
    Upload(Upload),
    Pull(String),
    Start(ContainerLaunch),
    Stop(String),
    UpdateLimit(ContainerLimit),
    Download(String),
}

/// Test double: records calls and fails on request.
#[derive(Debug, Default)]
pub struct RecordingRuntime {
    pub calls: Mutex<Vec<RuntimeCall>>,
    pub fail_pulls: BTreeSet<String>,
    pub fail_starts: BTreeSet<String>,
    /// Every operation fails, as if the machine were unreachable.
    pub unreachable: bool,
    limits: Mutex<BTreeMap<String, ContainerLimit>>,
    files: Mutex<BTreeMap<String, Vec<(String, Vec<u8>)>>>,
}

impl RecordingRuntime {
    pub fn new() -> Self {
        Self::default()
    }

    /// A machine whose every operation fails.
    pub fn unreachable() -> Self {
        RecordingRuntime { unreachable: true, ..Self::default() }
    }

    pub fn failing_pulls(images: &[&str]) -> Self {
        RecordingRuntime { fail_pulls: images.iter().map(|s| s.to_string()).collect(), ..Self::default() }
    }

    pub fn failing_starts(containers: &[&str]) -> Self {
        RecordingRuntime { fail_starts: containers.iter().map(|s| s.to_string()).collect(), ..Self::default() }
    }

    /// Pretends the container wrote `file` below `remote`.
    pub fn put_file(&self, remote: &str, file: &str, bytes: &[u8]) {
        self.files.lock().expect("files lock").entry(remote.into()).or_default().push((file.into(), bytes.to_vec()));
    }

    pub fn calls(&self) -> Vec<RuntimeCall> {
        self.calls.lock().expect("calls lock").clone()
    }

    fn record(&self, call: RuntimeCall) -> Result<(), RuntimeError> {
        self.calls.lock().expect("calls lock").push(call);
        if self.unreachable {
            Err(RuntimeError::Command("machine unreachable".into()))
        } else {
            Ok(())
        }
    }
}

impl ContainerRuntime for RecordingRuntime {
    fn kind(&self) -> &'static str {
        "recording"
    }

    fn upload(&self, upload: &Upload) -> Result<(), RuntimeError> {
        self.record(RuntimeCall::Upload(upload.clone()))
    }

    fn pull(&self, image: &str) -> Result<(), RuntimeError> {
        self.record(RuntimeCall::Pull(image.into()))?;
        if self.fail_pulls.contains(image) {
            return Err(RuntimeError::Pull { image: image.into(), reason: "not found".into() });
        }
        Ok(())
    }

    fn start(&self, launch: &ContainerLaunch) -> Result<(), RuntimeError> {
        self.record(RuntimeCall::Start(launch.clone()))?;
        if self.fail_starts.contains(&launch.name) {
            return Err(RuntimeError::ExitedImmediately { name: launch.name.clone(), output: "exit status 1".into() });
        }
        self.limits.lock().expect("limits lock").insert(launch.name.clone(), launch.limit.clone());
        Ok(())
    }

    fn stop(&self, container: &str) -> Result<(), RuntimeError> {
        self.record(RuntimeCall::Stop(container.into()))
    }

    fn update_limit(&self, limit: &ContainerLimit) -> Result<(), RuntimeError> {
        self.record(RuntimeCall::UpdateLimit(limit.clone()))?;
        let mut limits = self.limits.lock().expect("limits lock");
        match limits.get_mut(&limit.container) {
            Some(l) => {
                *l = limit.clone();
                Ok(())
            }
            None => Err(RuntimeError::UnknownContainer(limit.container.clone())),
        }
    }

    fn limits(&self) -> Result<BTreeMap<String, ContainerLimit>, RuntimeError> {
        Ok(self.limits.lock().expect("limits lock").clone())
    }

    fn download(&self, remote: &str, dest: &Path) -> Result<(), RuntimeError> {
        self.record(RuntimeCall::Download(remote.into()))?;
        std::fs::create_dir_all(dest)?;
        for (name, bytes) in self.files.lock().expect("files lock").get(remote).into_iter().flatten() {
            std::fs::write(dest.join(name), bytes)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fogbed_core::units::Millicores;

    fn launch(name: &str, image: &str, args: &[&str]) -> ContainerLaunch {
        ContainerLaunch {
            name: name.into(),
            image: image.into(),
            env: BTreeMap::from([("PEER".to_string(), "10.0.0.2".to_string())]),
            args: args.iter().map(|s| s.to_string()).collect(),
            limit: ContainerLimit { container: name.into(), cpu: Millicores(500), memory_bytes: 1 << 20 },
            control_port: None,
        }
    }

    fn local(root: &Path) -> LocalProcessRuntime {
        LocalProcessRuntime {
            root: root.to_path_buf(),
            machine: NodeId::from("M1"),
            bind: "127.0.0.1".parse().unwrap(),
            relay: None,
            events_url: None,
            program: PathBuf::from("/bin/false"),
        }
    }

    #[test]
    fn expands_env_references() {
        let env = BTreeMap::from([("A".to_string(), "1.2.3.4".to_string())]);
        assert_eq!(expand_vars("${A}:5003", &env), "1.2.3.4:5003");
        assert_eq!(expand_vars("${B}-${A}", &env), "${B}-1.2.3.4");
        assert_eq!(expand_vars("x${A", &env), "x${A");
    }

    #[test]
    fn local_process_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let rt = local(dir.path());
        let src = dir.path().join("src");
        std::fs::create_dir_all(src.join("sub")).unwrap();
        std::fs::write(src.join("sub/f.txt"), "x").unwrap();
        rt.upload(&Upload { local: src, remote: "/camera".into() }).unwrap();
        assert!(rt.fs_root().join("camera/sub/f.txt").is_file());

        let l = launch("sleeper", "exec:/bin/sleep", &["30"]);
        rt.pull(&l.image).unwrap();
        rt.start(&l).unwrap();
        assert_eq!(rt.running_pids().len(), 1);
        assert_eq!(rt.limits().unwrap()["sleeper"].cpu, Millicores(500));

        let mut new = l.limit.clone();
        new.cpu = Millicores(250);
        rt.update_limit(&new).unwrap();
        assert_eq!(rt.limits().unwrap()["sleeper"].cpu, Millicores(250));
        let unknown = ContainerLimit { container: "ghost".into(), ..new };
        assert!(matches!(rt.update_limit(&unknown), Err(RuntimeError::UnknownContainer(_))));

        rt.stop("sleeper").unwrap();
        rt.stop("sleeper").unwrap();
        rt.stop("never-started").unwrap();
        assert!(rt.running_pids().is_empty());

        let out = dir.path().join("out");
        rt.download("/camera", &out).unwrap();
        assert!(out.join("sub/f.txt").is_file());
        rt.download("/empty", &dir.path().join("empty")).unwrap();
        assert!(dir.path().join("empty").is_dir());
    }

    #[test]
    fn immediate_exit_reports_output() {
        let dir = tempfile::tempdir().unwrap();
        let rt = local(dir.path());
        let l = launch("bad", "exec:/bin/sh", &["-c", "echo boom-${PEER}; exit 3"]);
        match rt.start(&l) {
            Err(RuntimeError::ExitedImmediately { output, .. }) => assert!(output.contains("boom-10.0.0.2"), "{output}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rt = local(dir.path());
        assert!(matches!(rt.pull("dockerhub/camera"), Err(RuntimeError::Pull { .. })));
        assert!(matches!(rt.pull("exec:/does/not/exist"), Err(RuntimeError::Pull { .. })));
        assert!(rt.upload(&Upload { local: "/no/such/dir".into(), remote: "/x".into() }).is_err());
    }

    #[test]
    fn docker_run_args() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("camera")).unwrap();
        let rt = DockerCliRuntime { docker: "docker".into(), machine: NodeId::from("M1"), staging: dir.path().into() };
        let args = rt.run_args(&launch("camera", "dockerhub/camera", &["--output", "/camera/recording.mp4"]));
        let joined = args.join(" ");
        assert!(joined.starts_with("run -d --name fogbed-M1-camera --cpus 0.500 --memory 1048576b -v "), "{joined}");
        assert!(joined.ends_with("-e PEER=10.0.0.2 dockerhub/camera --output /camera/recording.mp4"), "{joined}");
    }
}
