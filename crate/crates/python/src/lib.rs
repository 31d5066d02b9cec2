//! Python bindings: the token codec, regularizer, metrics, synthetic data and
//! trained-model decoding.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wordstamp::codec::{self, InterleavedSequence, MalformedReason, ParseOutcome, TokenId};
use wordstamp::eval;
use wordstamp::experiment;
use wordstamp::model::{load_checkpoint, TinyDecoderModel};
use wordstamp::synth::{self, GeneratorConfig};
use wordstamp::training;
use wordstamp::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Numerics(_) | Error::Version { .. } | Error::Format(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn nested(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "Vocabulary", module = "pywordstamp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: codec::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[new]
    #[pyo3(signature = (words, timestamp_count = 600, resolution_ms = 10))]
    fn new(words: Vec<String>, timestamp_count: usize, resolution_ms: u32) -> PyResult<Self> {
        let inner = codec::Vocabulary::new(words, timestamp_count, resolution_ms).map_err(to_py)?;
        Ok(PyVocabulary { inner })
    }

    /// The word list used by the default synthetic generator.
    #[staticmethod]
    fn default_synthetic() -> PyResult<Self> {
        let inner = GeneratorConfig::default().vocabulary().map_err(to_py)?;
        Ok(PyVocabulary { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn timestamp_count(&self) -> usize {
        self.inner.timestamp_count()
    }

    #[getter]
    fn resolution_ms(&self) -> u32 {
        self.inner.resolution_ms()
    }

    #[getter]
    fn first_timestamp_id(&self) -> TokenId {
        self.inner.first_timestamp_id()
    }

    fn symbol(&self, id: TokenId) -> String {
        self.inner.symbol(id)
    }

    fn quantize_ms(&self, ms: f64) -> PyResult<usize> {
        Ok(self.inner.quantize_ms(ms).map_err(to_py)?.index())
    }

    fn encode(&self, words: Vec<String>, end_times_ms: Vec<f64>) -> PyResult<Vec<TokenId>> {
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        Ok(codec::encode(&refs, &end_times_ms, &self.inner).map_err(to_py)?.tokens)
    }

    fn render(&self, tokens: Vec<TokenId>) -> String {
        InterleavedSequence::new(tokens).render(&self.inner)
    }

    fn parse_text(&self, text: &str) -> PyResult<Vec<TokenId>> {
        Ok(InterleavedSequence::parse_text(text, &self.inner).map_err(to_py)?.tokens)
    }

    /// `{"well_formed": bool, "reason": str | None, "order_violation": bool}`.
    fn parse<'py>(&self, py: Python<'py>, tokens: Vec<TokenId>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        match codec::parse(&InterleavedSequence::new(tokens), &self.inner) {
            ParseOutcome::WellFormed { order_violation, .. } => {
                d.set_item("well_formed", true)?;
                d.set_item("reason", py.None())?;
                d.set_item("order_violation", order_violation)?;
            }
            ParseOutcome::Malformed(reason) => {
                let reason = match reason {
                    MalformedReason::CountMismatch => "count_mismatch",
                    MalformedReason::UnknownToken => "unknown_token",
                    MalformedReason::Empty => "empty",
                };
                d.set_item("well_formed", false)?;
                d.set_item("reason", reason)?;
                d.set_item("order_violation", false)?;
            }
        }
        Ok(d)
    }

    /// Words and end times (interval midpoints) of a well-formed sequence.
    fn decode(&self, tokens: Vec<TokenId>) -> PyResult<(Vec<String>, Vec<f64>)> {
        let outcome = codec::parse(&InterleavedSequence::new(tokens), &self.inner);
        codec::decode(&outcome, &self.inner).map_err(to_py)
    }

    /// Replaces each timestamp with probability `p` by a uniform draw from
    /// `[first timestamp, current]`.
    #[pyo3(signature = (tokens, p, seed = 0))]
    fn corrupt(&self, tokens: Vec<TokenId>, p: f64, seed: u64) -> PyResult<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        training::corrupt_timestamps(&InterleavedSequence::new(tokens), &self.inner, p, &mut rng).map_err(to_py)
    }

    /// Percentage of malformed sequences.
    fn mal(&self, sequences: Vec<Vec<TokenId>>) -> f64 {
        let seqs: Vec<InterleavedSequence> = sequences.into_iter().map(InterleavedSequence::new).collect();
        eval::mal(&seqs, &self.inner)
    }
}

#[pyfunction]
fn gaussian_target(n: usize, sigma: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(nested(&training::gaussian_target(n, sigma).map_err(to_py)?.g))
}

#[pyfunction]
fn default_sigma(n: usize) -> f64 {
    training::default_sigma(n)
}

/// Regularizer value for an `N x d` embedding matrix; `sigma` defaults to `N/4`.
#[pyfunction]
#[pyo3(signature = (w, sigma = None))]
fn reg_loss(w: Vec<Vec<f64>>, sigma: Option<f64>) -> PyResult<f64> {
    let w = matrix(w)?;
    let target = training::gaussian_target(w.nrows(), sigma.unwrap_or_else(|| training::default_sigma(w.nrows())))
        .map_err(to_py)?;
    training::reg_loss(w.view(), &target).map_err(to_py)
}

#[pyfunction]
fn cosine_similarity(w: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(nested(&training::cosine_similarity(matrix(w)?.view()).map_err(to_py)?))
}

#[pyfunction]
fn wer(reference: Vec<String>, hypothesis: Vec<String>) -> PyResult<f64> {
    Ok(eval::wer(&reference, &hypothesis).map_err(to_py)?.0)
}

/// Mean absolute end-time shift over exactly matching words, or `None`.
#[pyfunction]
fn aas(reference: Vec<(String, f64)>, hypothesis: Vec<(String, f64)>) -> Option<f64> {
    eval::aas(&reference, &hypothesis)
}

/// Synthetic utterances as dicts with `words`, `end_times_ms` and `frames`.
#[pyfunction]
#[pyo3(signature = (count, seed = 1))]
fn generate<'py>(py: Python<'py>, count: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = GeneratorConfig {
        seed,
        ..GeneratorConfig::default()
    };
    synth::generate(&cfg, count)
        .map_err(to_py)?
        .into_iter()
        .map(|u| {
            let d = PyDict::new(py);
            d.set_item("words", u.words.clone())?;
            d.set_item("end_times_ms", u.end_times_ms.clone())?;
            d.set_item("frames", nested(&u.frames))?;
            Ok(d)
        })
        .collect()
}

#[pyclass(name = "Model", module = "pywordstamp", frozen)]
struct PyModel {
    inner: TinyDecoderModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    fn vocabulary(&self) -> PyVocabulary {
        PyVocabulary {
            inner: self.inner.vocab().clone(),
        }
    }

    /// Greedy decode of a `frames x features` matrix into token ids.
    fn decode(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<TokenId>> {
        let frames = matrix(frames)?;
        let max_len = self.inner.config.max_tokens - 1;
        Ok(self.inner.greedy_decode(frames.view(), max_len).map_err(to_py)?.tokens)
    }

    fn timestamp_embeddings(&self) -> Vec<Vec<f64>> {
        nested(&self.inner.timestamp_embeddings().to_owned())
    }
}

/// `{"n", "sigma", "mse", "mean_row_correlation"}` for a checkpoint.
#[pyfunction]
fn inspect_embeddings<'py>(py: Python<'py>, checkpoint: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let s = experiment::cmd_inspect_embeddings(&checkpoint, None).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("n", s.n)?;
    d.set_item("sigma", s.sigma)?;
    d.set_item("mse", s.mse)?;
    d.set_item("mean_row_correlation", s.mean_row_correlation)?;
    Ok(d)
}

#[pymodule]
fn pywordstamp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gaussian_target, m)?)?;
    m.add_function(wrap_pyfunction!(default_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(reg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(aas, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_embeddings, m)?)?;
    Ok(())
}
