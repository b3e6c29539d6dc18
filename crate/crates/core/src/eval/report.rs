//! Structural validation of emitted JSON reports.
//!
//! Every report is an object with a `schema` tag. Checks cover required keys,
//! their JSON types and, for run reports, the confusion-count identities.

use serde_json::Value;

use super::experiment::{ABLATION_SCHEMA, GRID_SCHEMA, PROFILE_SCHEMA, RUN_SCHEMA};
use super::EvalError;

pub const DECODE_SCHEMA: &str = "macd.decode/1";

#[derive(Clone, Copy)]
enum Kind {
    Int,
    Num,
    NumOrNull,
    IntOrNull,
    Str,
    StrOrNull,
    Obj,
    ObjOrNull,
    Arr,
}

impl Kind {
    fn admits(self, v: &Value) -> bool {
        match self {
            Kind::Int => v.is_u64(),
            Kind::Num => v.is_number(),
            Kind::NumOrNull => v.is_number() || v.is_null(),
            Kind::IntOrNull => v.is_u64() || v.is_null(),
            Kind::Str => v.is_string(),
            Kind::StrOrNull => v.is_string() || v.is_null(),
            Kind::Obj => v.is_object(),
            Kind::ObjOrNull => v.is_object() || v.is_null(),
            Kind::Arr => v.is_array(),
        }
    }
}

fn fail(msg: String) -> EvalError {
    EvalError::Schema(msg)
}

fn require(v: &Value, path: &str, fields: &[(&str, Kind)]) -> Result<(), EvalError> {
    let obj = v.as_object().ok_or_else(|| fail(format!("{path} is not an object")))?;
    for &(key, kind) in fields {
        let field = obj.get(key).ok_or_else(|| fail(format!("{path}.{key} is missing")))?;
        if !kind.admits(field) {
            return Err(fail(format!("{path}.{key} has the wrong type: {field}")));
        }
    }
    Ok(())
}

fn each(v: &Value, path: &str, fields: &[(&str, Kind)]) -> Result<(), EvalError> {
    let items = v.get(path).and_then(Value::as_array).ok_or_else(|| fail(format!("{path} is not an array")))?;
    items.iter().enumerate().try_for_each(|(i, item)| require(item, &format!("{path}[{i}]"), fields))
}

const MEAN_SE: [(&str, Kind); 3] = [("mean", Kind::NumOrNull), ("se", Kind::NumOrNull), ("n", Kind::Int)];
const LATENCY: [(&str, Kind); 4] = [("mean", Kind::Num), ("p50", Kind::Num), ("p95", Kind::Num), ("max", Kind::Num)];
const COUNTERS: [(&str, Kind); 3] =
    [("base_forwards", Kind::Int), ("cf_forwards", Kind::Int), ("grad_passes", Kind::Int)];

fn validate_metrics(m: &Value, path: &str) -> Result<(), EvalError> {
    use Kind::*;
    require(
        m,
        path,
        &[
            ("tp", Int),
            ("fp", Int),
            ("fn", Int),
            ("tn", Int),
            ("precision", NumOrNull),
            ("recall", NumOrNull),
            ("f1", NumOrNull),
            ("accuracy", NumOrNull),
            ("false_yes_rate_absent", NumOrNull),
            ("ci_low", NumOrNull),
            ("ci_high", NumOrNull),
            ("mcnemar_p", NumOrNull),
            ("mcnemar_method", StrOrNull),
            ("latency_ms", Obj),
            ("pass_counters", Obj),
            ("cases", Int),
            ("failed", Int),
        ],
    )?;
    require(&m["latency_ms"], &format!("{path}.latency_ms"), &LATENCY)?;
    require(&m["pass_counters"], &format!("{path}.pass_counters"), &COUNTERS)?;

    let count = |k: &str| m[k].as_u64().unwrap_or(0) as f64;
    let (tp, fp, fn_, tn) = (count("tp"), count("fp"), count("fn"), count("tn"));
    if tp + fp + fn_ + tn != count("cases") - count("failed") {
        return Err(fail(format!("{path}: confusion counts do not add up to scored cases")));
    }
    let check = |key: &str, num: f64, den: f64| -> Result<(), EvalError> {
        match (m[key].as_f64(), den > 0.0) {
            (Some(v), true) if (v - num / den).abs() <= 1e-12 => Ok(()),
            (None, false) => Ok(()),
            _ => Err(fail(format!("{path}.{key} disagrees with the confusion counts"))),
        }
    };
    check("precision", tp, tp + fp)?;
    check("recall", tp, tp + fn_)?;
    check("accuracy", tp + tn, tp + fp + fn_ + tn)?;
    check("false_yes_rate_absent", fp, fp + tn)
}

/// Validates a report against the schema named by its `schema` field.
pub fn validate_report(v: &Value) -> Result<(), EvalError> {
    use Kind::*;
    let schema = v.get("schema").and_then(Value::as_str).ok_or_else(|| fail("missing schema tag".into()))?;
    match schema {
        RUN_SCHEMA => {
            require(v, "report", &[("config", Obj), ("suite", ObjOrNull), ("metrics", Obj), ("cases", Arr)])?;
            validate_metrics(&v["metrics"], "metrics")?;
            each(
                v,
                "cases",
                &[
                    ("index", Int),
                    ("kind", Str),
                    ("label", Str),
                    ("answer", StrOrNull),
                    ("tokens", Arr),
                    ("counters", Obj),
                    ("latency_ms", Num),
                    ("error", StrOrNull),
                ],
            )
        }
        ABLATION_SCHEMA => {
            require(
                v,
                "report",
                &[("config", Obj), ("suite_n", Int), ("bias_mix", Num), ("seeds", Arr), ("rows", Arr), ("runs", Arr)],
            )?;
            each(
                v,
                "rows",
                &[
                    ("variant", Str),
                    ("method", Str),
                    ("precision", Obj),
                    ("recall", Obj),
                    ("f1", Obj),
                    ("accuracy", Obj),
                    ("false_yes_rate_absent", Obj),
                ],
            )?;
            for (i, row) in v["rows"].as_array().into_iter().flatten().enumerate() {
                for key in ["precision", "recall", "f1", "accuracy", "false_yes_rate_absent"] {
                    require(&row[key], &format!("rows[{i}].{key}"), &MEAN_SE)?;
                }
            }
            each(v, "runs", &[("seed", Int), ("method", Str), ("metrics", Obj)])?;
            for (i, run) in v["runs"].as_array().into_iter().flatten().enumerate() {
                validate_metrics(&run["metrics"], &format!("runs[{i}].metrics"))?;
            }
            Ok(())
        }
        GRID_SCHEMA => {
            require(v, "report", &[("config", Obj), ("rows", Arr)])?;
            each(
                v,
                "rows",
                &[
                    ("part", Str),
                    ("alpha", Num),
                    ("beta", Num),
                    ("accuracy", NumOrNull),
                    ("precision", NumOrNull),
                    ("recall", NumOrNull),
                    ("f1", NumOrNull),
                    ("false_yes_rate_absent", NumOrNull),
                    ("failed", Int),
                ],
            )
        }
        PROFILE_SCHEMA => {
            require(v, "report", &[("config", Obj), ("rows", Arr)])?;
            each(
                v,
                "rows",
                &[
                    ("method", Str),
                    ("steps", IntOrNull),
                    ("accuracy", NumOrNull),
                    ("latency_ms", Obj),
                    ("latency_ratio", NumOrNull),
                    ("base_forwards_per_case", Num),
                    ("cf_forwards_per_case", Num),
                    ("grad_passes_per_case", Num),
                ],
            )
        }
        DECODE_SCHEMA => {
            require(v, "report", &[("config", Obj), ("tokens", Arr), ("record", Obj)])?;
            require(
                &v["record"],
                "record",
                &[
                    ("steps", Arr),
                    ("base_forwards", Int),
                    ("cf_forwards", Int),
                    ("grad_passes", Int),
                    ("wall_time_ms", Num),
                ],
            )
        }
        other => Err(fail(format!("unknown schema '{other}'"))),
    }
}

/// Keys holding wall-clock measurements, which differ between identical runs.
pub const WALL_CLOCK_KEYS: [&str; 4] = ["latency_ms", "wall_time_ms", "latency_ratio", "elapsed_ms"];

/// Copy of `v` with every wall-clock field removed, at any depth.
pub fn strip_wall_clock(v: &Value) -> Value {
    match v {
        Value::Object(map) => Value::Object(
            map.iter()
                .filter(|(k, _)| !WALL_CLOCK_KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), strip_wall_clock(v)))
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.iter().map(strip_wall_clock).collect()),
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn metrics() -> Value {
        json!({
            "tp": 3, "fp": 1, "fn": 1, "tn": 5,
            "precision": 0.75, "recall": 0.75, "f1": 0.75, "accuracy": 0.8,
            "false_yes_rate_absent": 1.0 / 6.0, "ci_low": 0.5, "ci_high": 1.0,
            "mcnemar_p": null, "mcnemar_method": null,
            "latency_ms": {"mean": 1.0, "p50": 1.0, "p95": 1.0, "max": 1.0},
            "pass_counters": {"base_forwards": 20, "cf_forwards": 20, "grad_passes": 10},
            "cases": 11, "failed": 1
        })
    }

    #[test]
    fn run_report_identities() {
        let report = json!({"schema": RUN_SCHEMA, "config": {}, "suite": null, "metrics": metrics(), "cases": []});
        validate_report(&report).unwrap();
        let mut bad = report.clone();
        bad["metrics"]["accuracy"] = json!(0.7);
        assert!(validate_report(&bad).is_err());
        let mut missing = report;
        missing["metrics"].as_object_mut().unwrap().remove("fn");
        assert!(validate_report(&missing).is_err());
    }

    #[test]
    fn unknown_schema_rejected() {
        assert!(validate_report(&json!({"schema": "other"})).is_err());
        assert!(validate_report(&json!({})).is_err());
    }

    #[test]
    fn strips_nested_wall_clock() {
        let v = json!({"a": {"latency_ms": 3, "b": [{"wall_time_ms": 1, "c": 2}]}});
        assert_eq!(strip_wall_clock(&v), json!({"a": {"b": [{"c": 2}]}}));
    }
}
