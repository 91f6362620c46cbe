//! Loads every shipped workflow file through the library, then shows how a
//! file with a broken hook reference is reported.
//!
//! cargo run --example workflow_files

use std::path::Path;

use adaptive_ensemble::cli::WorkflowFile;

const BROKEN: &str = r#"
[resources]
nodes = 1
cores_per_node = 2

[[pipelines]]
uid = "p"
[[pipelines.stages]]
uid = "s"
post_exec = "missing"
tasks = [{ uid = "t" }]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("workflows");
    let shared = tempfile::tempdir()?;
    let mut paths: Vec<_> = std::fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    paths.sort();
    for path in paths.iter().filter(|p| p.extension().is_some_and(|x| x == "wf")) {
        let loaded = WorkflowFile::read(path)?.load(shared.path()).map_err(|r| format!("{r:?}"))?;
        let hooks: Vec<&str> = loaded.bindings.keys().collect();
        println!(
            "{:<16} {:>2} pipelines {:>4} tasks  hooks {hooks:?}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            loaded.workflow.pipelines.len(),
            loaded.workflow.task_count(),
        );
    }

    let report = match WorkflowFile::parse(BROKEN, Path::new("broken.wf"))?.load(shared.path()) {
        Ok(_) => return Err("the broken file loaded".into()),
        Err(report) => report,
    };
    for v in &report.violations {
        println!("broken.wf: {v}");
    }
    Ok(())
}
