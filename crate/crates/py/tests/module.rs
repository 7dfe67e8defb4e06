use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(atlas_match_py::atlas_match_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("am", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        py.run(&code, Some(&globals), None).unwrap_or_else(|e| panic!("{e}"));
    });
}

#[test]
fn image_and_mi_roundtrip() {
    run(r#"
a = am.Image(2, 2, [0.0, 0.0, 1.0, 1.0])
b = am.Image(2, 2, [0.0, 1.0, 0.0, 1.0])
assert abs(am.mutual_information(a, b)) < 1e-15
assert am.mutual_information(a, a) == am.image_entropy(a)
assert a.warp(am.Affine()) == a
assert (a.width, a.height) == (2, 2)
"#);
}

#[test]
fn errors_become_python_exceptions() {
    run(r#"
try:
    am.Image(2, 2, [0.0])
    raise AssertionError("no error")
except ValueError:
    pass
try:
    am.Image.load("/nonexistent.pgm")
    raise AssertionError("no error")
except OSError:
    pass
"#);
}

#[test]
fn metrics_and_registration() {
    run(r#"
r = am.evaluate_ranks([2, 1, 0, 3])
assert r["mae"] == 1.5 and r["top3"] == 0.75
plates = am.generate_plates(3, 64, 1)
t, mi = am.register_affine(plates[0], plates[0], resolutions=1, iterations=20)
assert t.corner_error(am.Affine(), 64, 64) < 0.5
assert mi == am.mutual_information(plates[0], plates[0])
"#);
}
