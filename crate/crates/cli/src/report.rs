use serde::Serialize;
use serde_json::Value;

#[derive(Serialize)]
pub struct Build {
    pub package: &'static str,
    pub version: &'static str,
    pub git_rev: &'static str,
}

pub const BUILD: Build = Build {
    package: env!("CARGO_PKG_NAME"),
    version: env!("CARGO_PKG_VERSION"),
    git_rev: env!("ATLAS_MATCH_GIT_REV"),
};

/// What every command prints: the inputs needed to rerun it, the result and
/// where it came from.
#[derive(Serialize)]
pub struct RunReport<C: Serialize, R: Serialize> {
    pub command: &'static str,
    pub config: C,
    pub result: R,
    pub total_seconds: f64,
    pub build: Build,
}

/// Nulls every field whose name ends in `seconds`.
pub fn scrub_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, val) in map.iter_mut() {
                if k.ends_with("seconds") {
                    *val = Value::Null;
                } else {
                    scrub_timing(val);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(scrub_timing),
        _ => {}
    }
}

pub fn to_json(value: &impl Serialize, no_timing: bool) -> String {
    let mut v = serde_json::to_value(value).expect("report serializes");
    if no_timing {
        scrub_timing(&mut v);
    }
    serde_json::to_string(&v).expect("value serializes")
}

/// A closed stdout (e.g. piped into `head`) is not an error.
pub fn print(report: &impl Serialize, no_timing: bool) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{}", to_json(report, no_timing));
}
