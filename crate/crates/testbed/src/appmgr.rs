//! Application lifecycle across machines: prepare, start, stop, collect.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fogbed_core::app::{launch_plan, result_dir, upload_manifest, AppError, AppSpec, ContainerLaunch};
use fogbed_core::{InfrastructureModel, NodeId};
use serde::Serialize;

use crate::runtime::{ContainerRuntime, RuntimeError};

pub type Runtimes = BTreeMap<NodeId, Arc<dyn ContainerRuntime>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MachineReport {
    pub machine: NodeId,
    /// What succeeded, e.g. container names or uploaded paths.
    pub done: Vec<String>,
    pub errors: Vec<String>,
}

/// Outcome per machine, sorted by machine id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AppReport {
    pub machines: Vec<MachineReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl AppReport {
    pub fn is_success(&self) -> bool {
        self.machines.iter().all(|m| m.errors.is_empty())
    }

    pub fn errors(&self) -> Vec<String> {
        self.machines.iter().flat_map(|m| m.errors.iter().map(move |e| format!("{}: {e}", m.machine))).collect()
    }

    pub fn machine(&self, id: &str) -> Option<&MachineReport> {
        self.machines.iter().find(|m| m.machine.as_str() == id)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppManagerError {
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("no runtime for machine `{0}`")]
    NoRuntime(NodeId),
}

/// Runs `work` for every machine on its own thread and collects the reports.
fn per_machine<T, F>(items: BTreeMap<NodeId, T>, runtimes: &Runtimes, work: F) -> Result<Vec<MachineReport>, AppManagerError>
where
    T: Send,
    F: Fn(&dyn ContainerRuntime, T, &mut MachineReport) + Sync,
{
    for m in items.keys() {
        if !runtimes.contains_key(m) {
            return Err(AppManagerError::NoRuntime(m.clone()));
        }
    }
    let work = &work;
    let mut reports: Vec<MachineReport> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .into_iter()
            .map(|(m, item)| {
                let rt = runtimes[&m].clone();
                s.spawn(move || {
                    let mut r = MachineReport { machine: m, done: Vec::new(), errors: Vec::new() };
                    work(rt.as_ref(), item, &mut r);
                    r
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("machine worker panicked")).collect()
    });
    reports.sort_by(|a, b| a.machine.cmp(&b.machine));
    Ok(reports)
}

/// Uploads copy dirs and pulls images on every hosting machine. Missing
/// local directories abort before anything is touched.
pub fn prepare(app: &AppSpec, runtimes: &Runtimes) -> Result<AppReport, AppManagerError> {
    let manifest = upload_manifest(app);
    for uploads in manifest.values() {
        if let Some(missing) = uploads.iter().find(|u| !u.local.is_dir()) {
            return Err(RuntimeError::MissingLocalDir(missing.local.clone()).into());
        }
    }
    let mut work: BTreeMap<NodeId, (BTreeSet<fogbed_core::app::Upload>, BTreeSet<String>)> = BTreeMap::new();
    for (m, uploads) in manifest {
        work.entry(m).or_default().0 = uploads;
    }
    for c in &app.containers {
        for m in app.mapping.machines_of(&c.name).unwrap_or(&[]) {
            work.entry(m.clone()).or_default().1.insert(c.image.clone());
        }
    }
    let machines = per_machine(work, runtimes, |rt, (uploads, images), r| {
        for u in uploads {
            match rt.upload(&u) {
                Ok(()) => r.done.push(u.remote.clone()),
                Err(e) => r.errors.push(e.to_string()),
            }
        }
        for image in images {
            match rt.pull(&image) {
                Ok(()) => r.done.push(image),
                Err(e) => r.errors.push(e.to_string()),
            }
        }
    })?;
    Ok(AppReport { machines, warnings: Vec::new() })
}

/// Starts every container with resolved env and limits, in config order per
/// machine.
pub fn start(
    app: &AppSpec,
    model: &InfrastructureModel,
    addresses: &BTreeMap<NodeId, IpAddr>,
    runtimes: &Runtimes,
) -> Result<AppReport, AppManagerError> {
    let plan = launch_plan(app, model, addresses)?;
    let machines = per_machine(plan.machines, runtimes, |rt, launches: Vec<ContainerLaunch>, r| {
        for l in launches {
            match rt.start(&l) {
                Ok(()) => r.done.push(l.name),
                Err(e) => r.errors.push(e.to_string()),
            }
        }
    })?;
    Ok(AppReport { machines, warnings: plan.warnings })
}

fn containers_per_machine(app: &AppSpec) -> BTreeMap<NodeId, Vec<String>> {
    let mut out: BTreeMap<NodeId, Vec<String>> = BTreeMap::new();
    for c in &app.containers {
        for m in app.mapping.machines_of(&c.name).unwrap_or(&[]) {
            out.entry(m.clone()).or_default().push(c.name.clone());
        }
    }
    out
}

/// Stops every mapped container. Already stopped counts as success.
pub fn stop(app: &AppSpec, runtimes: &Runtimes) -> Result<AppReport, AppManagerError> {
    let machines = per_machine(containers_per_machine(app), runtimes, |rt, names, r| {
        for n in names {
            match rt.stop(&n) {
                Ok(()) => r.done.push(n),
                Err(e) => r.errors.push(format!("{n}: {e}")),
            }
        }
    })?;
    Ok(AppReport { machines, warnings: Vec::new() })
}

/// Downloads every container's directories into `<dest>/<machine>/<container>/`
/// and the machine's logs into `<dest>/<machine>/logs/`.
pub fn collect(app: &AppSpec, runtimes: &Runtimes, dest: &Path) -> Result<AppReport, AppManagerError> {
    let mut work: BTreeMap<NodeId, Vec<(String, Vec<String>)>> = BTreeMap::new();
    for c in &app.containers {
        for m in app.mapping.machines_of(&c.name).unwrap_or(&[]) {
            work.entry(m.clone()).or_default().push((c.name.clone(), c.copy_dirs.iter().map(|d| d.remote.clone()).collect()));
        }
    }
    let dest = dest.to_path_buf();
    let machines = per_machine(work, runtimes, |rt, containers, r| {
        for (name, remotes) in containers {
            let dir = result_dir(&dest, &r.machine, &name);
            if let Err(e) = std::fs::create_dir_all(&dir) {
                r.errors.push(format!("{}: {e}", dir.display()));
                continue;
            }
            let mut ok = true;
            for remote in remotes {
                if let Err(e) = rt.download(&remote, &dir) {
                    r.errors.push(format!("{name}: {remote}: {e}"));
                    ok = false;
                }
            }
            if ok {
                r.done.push(name);
            }
        }
        let logs_dir: PathBuf = dest.join(r.machine.as_str()).join("logs");
        for log in rt.logs() {
            let Some(file) = log.file_name() else { continue };
            let copied = std::fs::create_dir_all(&logs_dir).and_then(|_| std::fs::copy(&log, logs_dir.join(file)));
            if let Err(e) = copied {
                r.errors.push(format!("{}: {e}", log.display()));
            }
        }
    })?;
    Ok(AppReport { machines, warnings: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{RecordingRuntime, RuntimeCall};
    use fogbed_core::units::Millicores;

    const INFRA: &str = r#"{
        "machines": [
            {"id": "M1", "cpu_cores": 1, "memory_mb": 512},
            {"id": "M2", "cpu_cores": 2, "memory_mb": 1024},
            {"id": "M3", "cpu_cores": 1, "memory_mb": 512}
        ],
        "connections": [{"from": "M1", "to": "M2", "delay_ms_oneway": 1}, {"from": "M2", "to": "M3", "delay_ms_oneway": 1}]
    }"#;

    fn app_json(local: &Path) -> String {
        format!(
            r#"{{
            "containers": [
                {{"name": "camera", "image": "cam", "copy_dirs": [{{"local": "{0}", "remote": "/camera"}}],
                  "env": {{"BROKER": {{"$ip_of": "M2"}}, "PORT": "1883"}}}},
                {{"name": "broker", "image": "mqtt", "env": {{"CAMS": {{"$ips_of_container": "camera"}}}}}}
            ],
            "deployment": [
                {{"container": "camera", "machines": ["M1", "M3"], "limits": {{"cpu_cores": 0.5, "memory_mb": 256}}}},
                {{"container": "broker", "machines": ["M2"]}}
            ]
        }}"#,
            local.display()
        )
    }

    fn setup(dir: &Path) -> (InfrastructureModel, AppSpec, BTreeMap<NodeId, IpAddr>, BTreeMap<NodeId, Arc<RecordingRuntime>>) {
        let local = dir.join("appdata/camera");
        std::fs::create_dir_all(&local).unwrap();
        let model = InfrastructureModel::parse(INFRA).unwrap();
        let app = AppSpec::parse(&app_json(&local), &model).unwrap();
        let addrs = (1..=3).map(|i| (NodeId::new(format!("M{i}")), format!("10.0.0.{i}").parse().unwrap())).collect();
        let rts = (1..=3).map(|i| (NodeId::new(format!("M{i}")), Arc::new(RecordingRuntime::new()))).collect();
        (model, app, addrs, rts)
    }

    fn erased(rts: &BTreeMap<NodeId, Arc<RecordingRuntime>>) -> Runtimes {
        rts.iter().map(|(k, v)| (k.clone(), v.clone() as Arc<dyn ContainerRuntime>)).collect()
    }

    #[test]
    fn start_resolves_env_and_applies_limits() {
        let dir = tempfile::tempdir().unwrap();
        let (model, app, addrs, rts) = setup(dir.path());
        let report = start(&app, &model, &addrs, &erased(&rts)).unwrap();
        assert!(report.is_success());
        assert_eq!(report.machines.iter().map(|m| m.machine.as_str()).collect::<Vec<_>>(), ["M1", "M2", "M3"]);

        let RuntimeCall::Start(cam) = &rts[&NodeId::from("M1")].calls()[0] else { panic!() };
        assert_eq!(cam.env["BROKER"], "10.0.0.2");
        assert_eq!(cam.env["PORT"], "1883");
        assert_eq!(cam.limit.cpu, Millicores(500));
        let RuntimeCall::Start(broker) = &rts[&NodeId::from("M2")].calls()[0] else { panic!() };
        assert_eq!(broker.env["CAMS"], "10.0.0.1,10.0.0.3");
        // no explicit limit: the modeled machine
        assert_eq!(broker.limit.cpu, Millicores(2000));
    }

    #[test]
    fn prepare_uploads_only_to_hosting_machines() {
        let dir = tempfile::tempdir().unwrap();
        let (_, app, _, rts) = setup(dir.path());
        let report = prepare(&app, &erased(&rts)).unwrap();
        assert!(report.is_success());
        let uploads = |m: &str| rts[&NodeId::from(m)].calls().iter().filter(|c| matches!(c, RuntimeCall::Upload(_))).count();
        assert_eq!((uploads("M1"), uploads("M2"), uploads("M3")), (1, 0, 1));
        assert!(rts[&NodeId::from("M2")].calls().contains(&RuntimeCall::Pull("mqtt".into())));

        std::fs::remove_dir_all(dir.path().join("appdata")).unwrap();
        assert!(matches!(prepare(&app, &erased(&rts)), Err(AppManagerError::Runtime(RuntimeError::MissingLocalDir(_)))));
    }

    #[test]
    fn pull_failure_is_reported_per_machine() {
        let dir = tempfile::tempdir().unwrap();
        let (_, app, _, mut rts) = setup(dir.path());
        rts.insert(NodeId::from("M2"), Arc::new(RecordingRuntime::failing_pulls(&["mqtt"])));
        let report = prepare(&app, &erased(&rts)).unwrap();
        assert!(!report.is_success());
        assert_eq!(report.errors().len(), 1);
        assert!(report.errors()[0].starts_with("M2: "));
    }

    #[test]
    fn stop_is_idempotent_and_isolates_failures() {
        let dir = tempfile::tempdir().unwrap();
        let (_, app, _, mut rts) = setup(dir.path());
        assert!(stop(&app, &erased(&rts)).unwrap().is_success());
        assert!(stop(&app, &erased(&rts)).unwrap().is_success());
        rts.insert(NodeId::from("M3"), Arc::new(RecordingRuntime::unreachable()));
        let report = stop(&app, &erased(&rts)).unwrap();
        assert_eq!(report.machine("M3").unwrap().errors.len(), 1);
        assert_eq!(report.machine("M1").unwrap().done, ["camera"]);
        assert_eq!(report.machine("M2").unwrap().done, ["broker"]);
    }

    #[test]
    fn collect_layout_and_partial_results() {
        let dir = tempfile::tempdir().unwrap();
        let (_, app, _, mut rts) = setup(dir.path());
        rts[&NodeId::from("M1")].put_file("/camera", "recording.mp4", b"frames");
        rts.insert(NodeId::from("M3"), Arc::new(RecordingRuntime::unreachable()));
        let results = dir.path().join("results");
        let report = collect(&app, &erased(&rts), &results).unwrap();
        assert_eq!(std::fs::read(results.join("M1/camera/recording.mp4")).unwrap(), b"frames");
        // broker has no copy dirs: empty directory
        assert!(results.join("M2/broker").is_dir());
        assert_eq!(std::fs::read_dir(results.join("M2/broker")).unwrap().count(), 0);
        assert!(report.machine("M1").unwrap().errors.is_empty());
        assert_eq!(report.machine("M3").unwrap().errors.len(), 1);
    }

    #[test]
    fn empty_mapping_is_a_no_op() {
        let model = InfrastructureModel::parse(INFRA).unwrap();
        let app = AppSpec::parse(r#"{"containers": [], "deployment": []}"#, &model).unwrap();
        let report = start(&app, &model, &BTreeMap::new(), &Runtimes::new()).unwrap();
        assert!(report.machines.is_empty());
    }
}
