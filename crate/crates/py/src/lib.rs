use pyo3::prelude::*;

#[pymodule]
fn slotvid_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
