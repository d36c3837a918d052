use cotsat_py::cotsat_py;
use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Registers the module before the embedded interpreter starts; the tests
/// share one interpreter.
fn init() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| pyo3::append_to_inittab!(cotsat_py));
}

const SCRIPT: &str = r#"
import cotsat
example = [[-2, -4, -1], [3, 4, -1], [-1, -3, -2], [1, -2, -4], [-4, 2, 1], [1, -2, 4]]
assert cotsat.parse_dimacs(cotsat.emit_dimacs(4, example)) == (4, example)
assert cotsat.brute_force(4, example) == "SAT"
verdict, reference = cotsat.dpll(4, example)
model = cotsat.Model.compile(4, 6, context_len=256)
trace, answer = model.solve(4, example)
bad = cotsat.validate(cotsat.prompt(4, example), "D 1 SAT")
unsat = cotsat.generate("marginal", 4, 2, seed=3)[1]
"#;

#[test]
fn module_works_from_python() {
    init();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        py.run(&std::ffi::CString::new(SCRIPT).unwrap(), Some(&globals), None)
            .unwrap();
        let get = |k: &str| globals.get_item(k).unwrap().unwrap();
        assert_eq!(get("trace").extract::<String>().unwrap(), "D -2 D 1 D 3 SAT");
        assert_eq!(get("answer").extract::<String>().unwrap(), "SAT");
        assert_eq!(get("reference").extract::<String>().unwrap(), "D -2 D 1 D 3 SAT");
        let (index, _reason): (usize, String) = get("bad").extract().unwrap();
        assert_eq!(index, 2);
        let unsat = get("unsat");
        assert_eq!(unsat.get_item("label").unwrap().extract::<String>().unwrap(), "UNSAT");
        assert_eq!(
            get("model")
                .getattr("dims")
                .unwrap()
                .get_item("d_emb")
                .unwrap()
                .extract::<usize>()
                .unwrap(),
            145
        );
    });
}

#[test]
fn bad_input_raises_value_error() {
    init();
    Python::attach(|py| {
        let m = py.import("cotsat").unwrap();
        let err = m.call_method1("brute_force", (3, vec![vec![1, 5]])).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}
