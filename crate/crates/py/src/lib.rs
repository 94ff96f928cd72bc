use pyo3::prelude::*;

#[pymodule]
fn seisflow_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
