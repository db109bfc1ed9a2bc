use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(&Bound<'_, PyModule>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "pyrfsearch").unwrap();
        pyrfsearch::register(&m).unwrap();
        f(&m);
    });
}

#[test]
fn module_exposes_core_operations() {
    with_module(|m| {
        let py = m.py();
        let locals = PyDict::new(py);
        locals.set_item("rf", m).unwrap();
        let code = c"
assert rf.count_search_space(9, 4) == 531441
g = rf.discretize([[0.0] * 8 + [1.0]] * 6)
assert [op for _, _, op in g.edges()] == ['zero'] * 6
assert rf.theoretical_rf(g, 8, 8).output == 'empty'
assert rf.theoretical_rf(rf.Genotype.chain(3, 'avg5'), 16, 16).extent() == (9, 9)
assert rf.Genotype(g.to_text()) == g
";
        py.run(code, None, Some(&locals)).unwrap();
    });
}

#[test]
fn errors_map_to_value_error() {
    with_module(|m| {
        let py = m.py();
        let err = m.getattr("discretize").unwrap().call1((vec![vec![0.0; 9]; 5],)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
        let err = m.getattr("Genotype").unwrap().call1(("edge = 0 1 max4",)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}
