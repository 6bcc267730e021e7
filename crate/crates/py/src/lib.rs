use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

use jepa_align::attnmask::{build_mask as build, oracle_mask as oracle, AttentionMask, AttnVariant};
use jepa_align::checks::{gradcheck as run_gradcheck, parse_check_filter, roles_for, verify as run_verify, GradcheckConfig, VerifyConfig};
use jepa_align::data::{generate as gen, SyntheticVocab};
use jepa_align::masking::{sample_mask as sample, MaskSpec as Spec, PatchGrid, SamplerConfig};
use jepa_align::model::{read_checkpoint, write_checkpoint, Model as CoreModel, ModelConfig, ParamGroup};
use jepa_align::objective;
use jepa_align::rng::{rng_for, Stream};
use jepa_align::training::{lr_at as schedule, run_stage, Stage, TrainConfig, TrainJob};
use jepa_align::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numerics(_) | Error::NonFiniteLoss { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Json(_) | Error::Mask(_) | Error::Attn(_) | Error::Data(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
    }
}

/// Context indices and target blocks of one sampled mask.
#[pyclass(name = "MaskSpec", frozen)]
struct MaskSpec(Spec);

#[pymethods]
impl MaskSpec {
    #[getter]
    fn rows(&self) -> usize {
        self.0.grid.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.grid.cols
    }

    #[getter]
    fn context(&self) -> Vec<usize> {
        self.0.context.clone()
    }

    #[getter]
    fn targets(&self) -> Vec<Vec<usize>> {
        self.0.targets.clone()
    }

    #[getter]
    fn target_union(&self) -> Vec<usize> {
        self.0.target_union.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        serde_json::from_str(s).map(MaskSpec).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "MaskSpec({}x{}, {} context, {} targets)",
            self.0.grid.rows,
            self.0.grid.cols,
            self.0.context.len(),
            self.0.targets.len()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (rows, cols, seed=0, k=4, allow_overlap=true))]
fn sample_mask(rows: usize, cols: usize, seed: u64, k: usize, allow_overlap: bool) -> PyResult<MaskSpec> {
    let grid = PatchGrid::new(rows, cols).map_err(|e| py_err(e.into()))?;
    let cfg = SamplerConfig {
        k,
        allow_overlap,
        seed,
        ..SamplerConfig::default()
    };
    sample(grid, &cfg, &mut rng_for(seed, Stream::Mask, 0))
        .map(MaskSpec)
        .map_err(|e| py_err(e.into()))
}

fn rows_of(m: &AttentionMask) -> Vec<Vec<bool>> {
    (0..m.size()).map(|q| m.row(q).to_vec()).collect()
}

/// Attention permissions for `[context, targets, caption]`; row = query.
#[pyfunction]
#[pyo3(signature = (spec, caption_len, tgt_cross_block=false, text_sees_targets=true))]
fn build_mask(spec: &MaskSpec, caption_len: usize, tgt_cross_block: bool, text_sees_targets: bool) -> PyResult<Vec<Vec<bool>>> {
    let v = AttnVariant {
        tgt_cross_block,
        text_sees_targets,
    };
    build(&roles_for(&spec.0, caption_len), v)
        .map(|m| rows_of(&m))
        .map_err(|e| py_err(e.into()))
}

/// Cell-by-cell reference for [`build_mask`].
#[pyfunction]
#[pyo3(signature = (spec, caption_len, tgt_cross_block=false, text_sees_targets=true))]
fn oracle_mask(spec: &MaskSpec, caption_len: usize, tgt_cross_block: bool, text_sees_targets: bool) -> PyResult<Vec<Vec<bool>>> {
    let v = AttnVariant {
        tgt_cross_block,
        text_sees_targets,
    };
    oracle(&roles_for(&spec.0, caption_len), v)
        .map(|m| rows_of(&m))
        .map_err(|e| py_err(e.into()))
}

/// Predictor, projectors and latent token.
#[pyclass(name = "Model")]
struct Model(CoreModel);

fn group_of(name: &str) -> PyResult<ParamGroup> {
    ParamGroup::ALL
        .into_iter()
        .find(|g| format!("{g:?}").eq_ignore_ascii_case(name.replace('_', "").as_str()))
        .ok_or_else(|| PyValueError::new_err(format!("unknown parameter group {name:?}")))
}

#[pymethods]
impl Model {
    /// Builds a freshly initialised model from a JSON model config.
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = parse(config_json)?;
        CoreModel::new(cfg).map(Model).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        read_checkpoint(&path).and_then(|c| c.into_model()).map(Model).map_err(py_err)
    }

    #[pyo3(signature = (path, step=0))]
    fn save(&self, path: PathBuf, step: usize) -> PyResult<()> {
        write_checkpoint(&path, &self.0, step).map_err(py_err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.0.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn n_params(&self) -> usize {
        self.0.store().iter().map(|p| p.value.len()).sum()
    }

    /// Parameter names in storage order.
    fn names(&self) -> Vec<String> {
        self.0.store().iter().map(|p| p.name.clone()).collect()
    }

    /// Flattened values of one group: predictor, proj, proj_tgt or latent.
    fn parameters(&self, group: &str) -> PyResult<Vec<f64>> {
        let g = group_of(group)?;
        Ok(self.0.store().iter().filter(|p| p.group == g).flat_map(|p| p.value.data().to_vec()).collect())
    }

    fn tap_layer(&self) -> usize {
        self.0.config().predictor.tap()
    }
}

/// Captions of `n` synthetic samples as token-id lists.
#[pyfunction]
#[pyo3(signature = (seed, n, rows=6, cols=6))]
fn generate(seed: u64, n: usize, rows: usize, cols: usize) -> PyResult<Vec<Vec<usize>>> {
    let grid = PatchGrid::new(rows, cols).map_err(|e| py_err(e.into()))?;
    gen(seed, n, grid, SyntheticVocab::default())
        .map(|s| s.into_iter().map(|x| x.caption).collect())
        .map_err(py_err)
}

#[pyfunction]
fn cosine_distance(p: Vec<f64>, t: Vec<f64>) -> PyResult<f64> {
    objective::cosine_distance(&p, &t).map_err(py_err)
}

#[pyfunction]
fn smooth_l1(p: Vec<f64>, t: Vec<f64>) -> PyResult<f64> {
    objective::smooth_l1(&p, &t).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (step, total, lr, warmup_ratio=0.03))]
fn lr_at(step: usize, total: usize, lr: f64, warmup_ratio: f64) -> f64 {
    let cfg = TrainConfig {
        lr: Some(lr),
        warmup_ratio,
        ..TrainConfig::default()
    };
    schedule(step, total, &cfg)
}

/// `(distance, max relative error, passed)` per distance kind.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn gradcheck(config_json: Option<&str>) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg: GradcheckConfig = parse(config_json)?;
    let report = run_gradcheck(&cfg, None).map_err(py_err)?;
    Ok(report
        .cases
        .into_iter()
        .map(|c| (format!("{:?}", c.distance), c.max_rel_error, c.pass))
        .collect())
}

/// `(check, passed, detail)` per selected check.
#[pyfunction]
#[pyo3(signature = (checks="all", config_json=None))]
fn verify(checks: &str, config_json: Option<&str>) -> PyResult<Vec<(String, bool, String)>> {
    let cfg: VerifyConfig = parse(config_json)?;
    let kinds = parse_check_filter(checks).map_err(py_err)?;
    let results = run_verify(&cfg, &kinds).map_err(py_err)?;
    Ok(results.into_iter().map(|r| (r.check.to_string(), r.pass, r.detail)).collect())
}

/// Runs one stage, writing `log.jsonl` and `model.ckpt` into `out_dir`.
/// Returns `(ntp, jepa, total)` per step.
#[pyfunction]
#[pyo3(signature = (stage, out_dir, config_json=None, init=None))]
fn train(stage: &str, out_dir: PathBuf, config_json: Option<&str>, init: Option<&Model>) -> PyResult<Vec<(f64, Option<f64>, f64)>> {
    let mut job: TrainJob = parse(config_json)?;
    job.run.train.stage = match stage {
        "lm" => Stage::Lm,
        "align" => Stage::Align,
        "sft" => Stage::Sft,
        other => return Err(PyValueError::new_err(format!("unknown stage {other:?}"))),
    };
    let model = match init {
        Some(m) => {
            job.run.model = m.0.config().clone();
            m.0.clone()
        }
        None => CoreModel::new(job.run.model.clone()).map_err(py_err)?,
    };
    let data = job.data.build(job.run.model.grid).map_err(py_err)?;
    let (_, reports) = run_stage(&job.run, model, &data, &out_dir).map_err(py_err)?;
    Ok(reports.into_iter().map(|r| (r.ntp, r.jepa, r.total)).collect())
}

#[pymodule]
#[pyo3(name = "jepa_align")]
fn jepa_align_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function of the extension to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<MaskSpec>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_mask, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
