//! Python module `kdv_py`.
//!
//! `run(command, **params)` executes one `kdvctl` command and returns its
//! report as a dict with the keys `config`, `results`, `diagnostics` and
//! `warnings`. Parameter names are the flag names (`L`, `L0`, `T`, `jmax`,
//! `offsets`, ...). Invalid input raises `ValueError`; numerical failure
//! raises `ArithmeticError`.

use kdv_cli::{execute, CliError, Cli};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyTuple};
use serde_json::Value;

/// Builds the `kdvctl` argument vector for `command` from keyword arguments.
/// Lists and tuples become comma-separated values.
pub fn argv(command: &str, params: &[(String, String)]) -> Vec<String> {
    let mut out = vec!["kdvctl".to_string(), command.to_string()];
    for (k, v) in params {
        out.push(format!("--{k}"));
        out.push(v.clone());
    }
    out
}

fn py_err(e: CliError) -> PyErr {
    match &e {
        CliError::Core(core) if core.exit_code() == 3 => PyArithmeticError::new_err(e.to_string()),
        CliError::Core(_) => PyValueError::new_err(e.to_string()),
        CliError::Io(_) => PyOSError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn param_text(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if v.is_instance_of::<PyList>() || v.is_instance_of::<PyTuple>() {
        let parts: PyResult<Vec<String>> = v.try_iter()?.map(|x| Ok(x?.str()?.to_string())).collect();
        return Ok(parts?.join(","));
    }
    Ok(v.str()?.to_string())
}

/// Runs a `kdvctl` command and returns its report as a dict.
#[pyfunction]
#[pyo3(signature = (command, **params))]
fn run<'py>(py: Python<'py>, command: &str, params: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let mut pairs = Vec::new();
    if let Some(d) = params {
        for (k, v) in d.iter() {
            pairs.push((k.str()?.to_string(), param_text(&v)?));
        }
    }
    let cli = <Cli as clap::Parser>::try_parse_from(argv(command, &pairs))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let outcome = py.detach(|| execute(&cli.command)).map_err(py_err)?;
    if let Some(e) = outcome.failure {
        return Err(py_err(CliError::Core(e)));
    }
    let value = serde_json::to_value(&outcome.report).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &value)
}

/// `results` of `classify` for the length `L`.
#[pyfunction]
#[pyo3(name = "classify", signature = (length))]
fn classify_py<'py>(py: Python<'py>, length: f64) -> PyResult<Bound<'py, PyAny>> {
    let params = PyDict::new(py);
    params.set_item("L", length)?;
    run(py, "classify", Some(&params))?.get_item("results")
}

/// `results` of `spectrum` for the length `L` and modes `|j| ≤ jmax`.
#[pyfunction]
#[pyo3(name = "spectrum", signature = (length, jmax = 30))]
fn spectrum_py<'py>(py: Python<'py>, length: f64, jmax: usize) -> PyResult<Bound<'py, PyAny>> {
    let params = PyDict::new(py);
    params.set_item("L", length)?;
    params.set_item("jmax", jmax)?;
    run(py, "spectrum", Some(&params))?.get_item("results")
}

#[pymodule]
fn kdv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(classify_py, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum_py, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::argv;

    #[test]
    fn argv_spells_out_flags() {
        let a = argv("sweep", &[("L0".into(), "6.28".into()), ("offsets".into(), "0.1,0.2".into())]);
        assert_eq!(a, ["kdvctl", "sweep", "--L0", "6.28", "--offsets", "0.1,0.2"]);
    }
}
