use pyo3::ffi::c_str;
use pyo3::prelude::*;

use gkde::gkde as module;

#[test]
fn module_round_trip() {
    pyo3::append_to_inittab!(module);
    Python::attach(|py| {
        py.run(
            c_str!(
                r#"
import gkde, tempfile
s = gkde.Stream.blobs(2, 2, 4, 8.0, seed=5)
r = gkde.train(s, embed_dim=4, anchors_per_class=40, hidden=[8])
assert len(r.bank) == 2 and len(r.stages) == 2
x, y = s.test_set(0)
p = r.bank.predict(x[0])
assert abs(p.combined_probability - p.tp_probability * p.wp_posterior) < 1e-12
with tempfile.TemporaryDirectory() as d:
    r.bank.save(d)
    q = gkde.ModelBank.load(d).predict(x[0])
    assert q.combined_log_prob == p.combined_log_prob
assert gkde.estimate_priors([3, 3, 4, 4]) == {3: 0.5, 4: 0.5}
try:
    gkde.train(s, bandwidht=1.0)
    raise SystemExit("unknown key accepted")
except ValueError as e:
    assert "bandwidht" in str(e)
"#
            ),
            None,
            None,
        )
        .unwrap();
    });
}
