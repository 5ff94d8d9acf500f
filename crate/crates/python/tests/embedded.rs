use pyo3::prelude::*;

use frcgp::frcgp;

const SCRIPT: &std::ffi::CStr = cr#"
import frcgp
g = frcgp.Marginal.uniform(0.0, 1.0)
inputs = frcgp.InputModel([g, g], (0.0, 1.0))
model = frcgp.AnalyticModel(0.0, 1.0, [1.0, 0.0])
res = frcgp.pli_indices(model, inputs, 1.0, [0, 1], [0.5], [0.5], n=2000, seed=1)
cells = res["cells"]
assert len(cells) == 2
assert all(c["s_value"] == 0.0 and c["ci_low"] == 0.0 and c["ci_high"] == 0.0 for c in cells)
t = frcgp.kl_tilt(g, "mean", 0.7)
assert abs(t.mean() - 0.7) < 1e-8
try:
    frcgp.kl_tilt(g, "mean", 1.5)
except frcgp.InputError as e:
    assert "infeasible" in str(e)
else:
    raise AssertionError("expected InputError")
try:
    frcgp.generate_design(inputs, 10, "grid")
except ValueError:
    pass
else:
    raise AssertionError("expected ValueError")
assert frcgp.derive_seed(1, "x") == frcgp.derive_seed(1, "x") != frcgp.derive_seed(1, "y")
"#;

#[test]
fn module_works_in_an_embedded_interpreter() {
    pyo3::append_to_inittab!(frcgp);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(SCRIPT, None, None) {
            e.display(py);
            panic!("script failed: {e}");
        }
    });
}
