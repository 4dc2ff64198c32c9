//! Newline-delimited JSON trajectory files, one episode per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{verify_rtg_decomposition, Actions, Trajectory};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u64 = 1;

fn record(t: &Trajectory) -> Value {
    let observations: Vec<&[f64]> = t.observations.chunks(t.obs_dim).collect();
    let (space, dim, actions) = match &t.actions {
        Actions::Continuous { dim, values } => {
            ("continuous", *dim, json!(values.chunks(*dim).collect::<Vec<_>>()))
        }
        Actions::Discrete { num_actions, values } => ("discrete", *num_actions, json!(values)),
    };
    json!({
        "format_version": DATASET_FORMAT_VERSION,
        "env_id": t.env_id,
        "behavior_tag": t.behavior_tag,
        "obs_dim": t.obs_dim,
        "action_space": space,
        "action_dim": dim,
        "observations": observations,
        "actions": actions,
        "rewards": t.rewards,
        "rtgs": t.rtgs,
        "timesteps": t.timesteps,
    })
}

pub fn write_dataset(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajectories {
        serde_json::to_writer(&mut w, &record(t)).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|(field, message)| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            field,
            message,
        })?);
    }
    Ok(out)
}

type FieldError = (String, String);

fn ferr(field: &str, msg: impl Into<String>) -> FieldError {
    (field.to_string(), msg.into())
}

/// Name of the last object key that starts before byte `col` of `line`.
fn field_before(line: &str, col: usize) -> String {
    let head = &line[..col.min(line.len())];
    let mut last = None;
    let mut rest = head;
    while let Some(p) = rest.find("\":") {
        let key_end = head.len() - rest.len() + p;
        if let Some(start) = head[..key_end].rfind('"') {
            last = Some(head[start + 1..key_end].to_string());
        }
        rest = &rest[p + 2..];
    }
    last.unwrap_or_else(|| "<record>".to_string())
}

fn parse_record(line: &str) -> std::result::Result<Trajectory, FieldError> {
    let value: Value = serde_json::from_str(line).map_err(|e| {
        let col = line
            .char_indices()
            .nth(e.column().saturating_sub(1))
            .map_or(line.len(), |(b, _)| b);
        ferr(&field_before(line, col), format!("malformed JSON: {e}"))
    })?;
    let obj = value.as_object().ok_or_else(|| ferr("<record>", "expected a JSON object"))?;

    let version = get_uint(obj, "format_version")?;
    if version != DATASET_FORMAT_VERSION as usize {
        return Err(ferr("format_version", format!("unsupported version {version}")));
    }
    let env_id = get_str(obj, "env_id")?;
    let behavior_tag = get_str(obj, "behavior_tag")?;
    let obs_dim = get_uint(obj, "obs_dim")?;
    let action_dim = get_uint(obj, "action_dim")?;
    let observations = get_rows(obj, "observations", obs_dim)?;
    let actions = match get_str(obj, "action_space")?.as_str() {
        "continuous" => Actions::Continuous { dim: action_dim, values: get_rows(obj, "actions", action_dim)? },
        "discrete" => {
            let values = get_uint_array(obj, "actions")?;
            if let Some(a) = values.iter().find(|&&a| a >= action_dim) {
                return Err(ferr("actions", format!("action {a} out of range for {action_dim} actions")));
            }
            Actions::Discrete { num_actions: action_dim, values }
        }
        other => return Err(ferr("action_space", format!("unknown action space `{other}`"))),
    };
    let rewards = get_float_array(obj, "rewards")?;
    let rtgs = get_float_array(obj, "rtgs")?;
    let timesteps = get_uint_array(obj, "timesteps")?;
    let t = rewards.len();
    if t == 0 {
        return Err(ferr("rewards", "empty episode"));
    }
    for (name, n) in [
        ("observations", observations.len() / obs_dim.max(1)),
        ("actions", actions.len()),
        ("rtgs", rtgs.len()),
        ("timesteps", timesteps.len()),
    ] {
        if n != t {
            return Err(ferr(name, format!("length {n} does not match {t} rewards")));
        }
    }
    let traj = Trajectory { env_id, behavior_tag, obs_dim, observations, actions, rewards, rtgs, timesteps };
    if !verify_rtg_decomposition(&traj) {
        return Err(ferr("rtgs", "returns-to-go are inconsistent with rewards"));
    }
    Ok(traj)
}

fn get<'a>(obj: &'a Map<String, Value>, field: &str) -> std::result::Result<&'a Value, FieldError> {
    obj.get(field).ok_or_else(|| ferr(field, "missing"))
}

fn get_str(obj: &Map<String, Value>, field: &str) -> std::result::Result<String, FieldError> {
    get(obj, field)?.as_str().map(str::to_string).ok_or_else(|| ferr(field, "expected a string"))
}

fn get_uint(obj: &Map<String, Value>, field: &str) -> std::result::Result<usize, FieldError> {
    get(obj, field)?.as_u64().map(|v| v as usize).ok_or_else(|| ferr(field, "expected a non-negative integer"))
}

fn get_float_array(obj: &Map<String, Value>, field: &str) -> std::result::Result<Vec<f64>, FieldError> {
    let arr = get(obj, field)?.as_array().ok_or_else(|| ferr(field, "expected an array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| v.as_f64().ok_or_else(|| ferr(field, format!("element {i} is not a number"))))
        .collect()
}

fn get_uint_array(obj: &Map<String, Value>, field: &str) -> std::result::Result<Vec<usize>, FieldError> {
    let arr = get(obj, field)?.as_array().ok_or_else(|| ferr(field, "expected an array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| v.as_u64().map(|x| x as usize).ok_or_else(|| ferr(field, format!("element {i} is not an integer"))))
        .collect()
}

fn get_rows(obj: &Map<String, Value>, field: &str, width: usize) -> std::result::Result<Vec<f64>, FieldError> {
    let arr = get(obj, field)?.as_array().ok_or_else(|| ferr(field, "expected an array of rows"))?;
    let mut out = Vec::with_capacity(arr.len() * width);
    for (i, row) in arr.iter().enumerate() {
        let row = row.as_array().ok_or_else(|| ferr(field, format!("row {i} is not an array")))?;
        if row.len() != width {
            return Err(ferr(field, format!("row {i} has {} entries, expected {width}", row.len())));
        }
        for (j, v) in row.iter().enumerate() {
            out.push(v.as_f64().ok_or_else(|| ferr(field, format!("row {i} entry {j} is not a number")))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reacher_traj() -> Trajectory {
        Trajectory::new(
            "reacher",
            "expert",
            1,
            vec![0.1, 0.2, 0.30000000000000004],
            Actions::Continuous { dim: 1, values: vec![1.0, 1.0, -0.25] },
            vec![-0.9, -0.8, -0.7],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let disc = Trajectory::new(
            "g2048",
            "mix:0.5",
            2,
            vec![0.0, 0.5, 1.0, 0.25],
            Actions::Discrete { num_actions: 4, values: vec![3, 0] },
            vec![0.0, 1.0],
        )
        .unwrap();
        let trajs = vec![reacher_traj(), disc];
        write_dataset(&path, &trajs).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), trajs);
    }

    #[test]
    fn truncated_line_reports_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &[reacher_traj(), reacher_traj()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = lines[1].find("\"rtgs\"").unwrap() + 12;
        lines[1] = &lines[1][..cut];
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path).unwrap_err() {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "rtgs");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_type_names_field() {
        let mut v = record(&reacher_traj());
        v["rewards"] = json!(["x", 1, 2]);
        let err = parse_record(&v.to_string()).unwrap_err();
        assert_eq!(err.0, "rewards");
    }

    #[test]
    fn inconsistent_rtgs_rejected() {
        let mut t = reacher_traj();
        t.rtgs[0] += 0.5;
        let err = parse_record(&record(&t).to_string()).unwrap_err();
        assert_eq!(err.0, "rtgs");
    }
}
