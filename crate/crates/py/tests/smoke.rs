use std::ffi::CString;

use pyo3::prelude::*;
use relu_extract_py::relu_extract_py;

#[test]
fn python_smoke_script() {
    pyo3::append_to_inittab!(relu_extract_py);
    Python::initialize();
    let src = include_str!("../python/smoke_test.py");
    let code = CString::new(src).unwrap();
    Python::attach(|py| {
        if let Err(e) = py.run(&code, None, None) {
            e.print(py);
            panic!("smoke script failed");
        }
    });
}
