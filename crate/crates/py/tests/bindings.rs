use std::ffi::CString;

use mvpt::mvpt as module;
use pyo3::prelude::*;

const SCRIPT: &str = r#"
import math
import mvpt

assert mvpt.l_kd([0.2, 1.0], [0.2, 1.0], 16.0) == 0.0
assert mvpt.l_kd([4.0, 0.0], [0.0, 0.0], 4.0) > 0.0
assert mvpt.auroc([[0.9, 0.1], [0.2, 0.8]], [0, 1], 2) == 1.0

cfg = mvpt.Config()
assert mvpt.Config.from_json(cfg.to_json()).to_json() == cfg.to_json()
toy = mvpt.audit(cfg)
assert toy["learnable_params"] == sum(r["numel"] for r in toy["learnable"])
shorter = mvpt.audit(cfg.with_overrides(length=0))
assert shorter["learnable_params"] < toy["learnable_params"]
for bad in ({"lamda": 1}, {"tau": -1.0}):
    try:
        cfg.with_overrides(**bad)
    except ValueError:
        continue
    raise AssertionError(bad)
try:
    mvpt.Model.load("/nonexistent/stage1.ckpt", cfg)
except OSError:
    pass
else:
    raise AssertionError("missing checkpoint loaded")
"#;

#[test]
fn module_round_trip() {
    pyo3::append_to_inittab!(module);
    Python::initialize();
    Python::attach(|py| {
        let code = CString::new(SCRIPT).unwrap();
        if let Err(e) = py.run(&code, None, None) {
            e.print(py);
            panic!("python assertions failed");
        }
    });
}
