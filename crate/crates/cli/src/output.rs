//! CSV and JSON artifacts of a run.

use std::fs;
use std::path::Path;

use crate::run::{RunOutput, ScenarioRun};
use crate::CliError;

/// Round-trip decimal: 17 significant digits.
pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_opportunity(run: &ScenarioRun, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["t", "path_id", "Y", "exp_Y", "display"]).map_err(|e| csv_error(path, e))?;
    let grid = run.solution.grid();
    for j in 0..run.solution.paths().count() {
        let display = if j == 0 { "true" } else { "false" };
        for i in 0..=grid.steps() {
            let y = run.solution.y(j, i);
            w.write_record([float(grid.time(i)), j.to_string(), float(y), float(y.exp()), display.into()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| csv_error(path, e))
}

/// Positions exist on `t_0..t_{N−1}`; none is held over the final step's end.
pub fn write_strategy(run: &ScenarioRun, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let n = run.driver.params().model().assets();
    let mut header = vec!["t".to_string(), "path_id".to_string()];
    header.extend((1..=n).map(|k| format!("zeta_{k}")));
    header.extend(["beta1", "beta2", "feasible", "display"].map(String::from));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let grid = run.solution.grid();
    for j in 0..run.field.paths() {
        let display = if j == 0 { "true" } else { "false" };
        for i in 0..run.field.steps() {
            let s = run.field.at(j, i);
            let mut rec = vec![float(grid.time(i)), j.to_string()];
            rec.extend(s.zeta.iter().map(|&z| float(z)));
            rec.push(float(s.decomposition.beta1));
            rec.push(float(s.decomposition.beta2));
            rec.push(s.feasible.to_string());
            rec.push(display.into());
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| csv_error(path, e))
}

/// Writes `opportunity_<name>.csv`, `strategy_<name>.csv` and `summary.json`.
pub fn write_all(out: &RunOutput, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| csv_error(dir, e))?;
    for run in &out.runs {
        write_opportunity(run, &dir.join(format!("opportunity_{}.csv", run.name)))?;
        write_strategy(run, &dir.join(format!("strategy_{}.csv", run.name)))?;
    }
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&out.summary).map_err(|e| csv_error(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| csv_error(&path, e))
}
