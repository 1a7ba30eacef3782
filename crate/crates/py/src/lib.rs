//! Python bindings: phantom worlds, report generators, trained denoisers,
//! counterfactual explanation and difference frames.

use std::collections::BTreeMap;
use std::path::PathBuf;

use cvla::blackbox::{GeneratorSpec, ReportGenerator};
use cvla::cvla::{prepare_dataset, train_cvla, Explainer, LabelSource, SplitSizes, TrainRunConfig, TrainedCheckpoint};
use cvla::diffusion::{Checkpoint, Denoiser, InversionConfig, NoiseSchedule};
use cvla::findings::{FindingVector, Vocabulary};
use cvla::frames::FrameConfig;
use cvla::synthworld::{render, sample_dataset, WorldConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn err(e: cvla::Error) -> PyErr {
    match e {
        cvla::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn vector_of(vocab: &Vocabulary, names: &[String]) -> PyResult<FindingVector> {
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    vocab.vector_of(&names).map_err(err)
}

fn names_of(v: &FindingVector, vocab: &Vocabulary) -> Vec<String> {
    v.names(vocab).into_iter().map(str::to_string).collect()
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Grayscale image with pixel values nominally in [0, 1], row-major.
#[pyclass(name = "Image", module = "cvla_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage(cvla::image::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f64>) -> PyResult<Self> {
        cvla::image::Image::from_vec(width, height, pixels).map(Self).map_err(err)
    }

    #[staticmethod]
    fn read_pgm(path: PathBuf) -> PyResult<Self> {
        cvla::image::Image::read_pgm(&path).map(Self).map_err(err)
    }

    fn write_pgm(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_pgm(&path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn pixels(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.data().chunks(self.0.width()).map(<[f64]>::to_vec).collect()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

/// A rendered phantom with its true findings and their regions.
#[pyclass(name = "Phantom", module = "cvla_py", frozen)]
struct PyPhantom {
    #[pyo3(get)]
    image: Py<PyImage>,
    #[pyo3(get)]
    findings: Vec<String>,
    /// Finding name to `(x0, y0, x1, y1)`, half-open.
    #[pyo3(get)]
    regions: BTreeMap<String, (usize, usize, usize, usize)>,
}

fn phantom(py: Python<'_>, s: cvla::synthworld::PhantomSample, vocab: &Vocabulary) -> PyResult<PyPhantom> {
    Ok(PyPhantom {
        image: Py::new(py, PyImage(s.image))?,
        findings: names_of(&s.gt_findings, vocab),
        regions: s.gt_regions.iter().map(|(&i, b)| (vocab.name(i).to_string(), (b.x0, b.y0, b.x1, b.y1))).collect(),
    })
}

/// The synthetic chest-phantom world.
#[pyclass(name = "World", module = "cvla_py", frozen)]
struct PyWorld {
    config: WorldConfig,
    vocab: Vocabulary,
}

#[pymethods]
impl PyWorld {
    #[new]
    #[pyo3(signature = (image_size = 64, seed = 0))]
    fn new(image_size: usize, seed: u64) -> PyResult<Self> {
        let config = WorldConfig { image_size, rng_seed: seed, ..Default::default() };
        config.validate().map_err(err)?;
        let vocab = config.vocabulary().map_err(err)?;
        Ok(Self { config, vocab })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn vocabulary(&self) -> Vec<String> {
        self.vocab.names().to_vec()
    }

    /// Renders one phantom showing exactly `findings`.
    #[pyo3(signature = (findings, seed = 0))]
    fn render(&self, py: Python<'_>, findings: Vec<String>, seed: u64) -> PyResult<PyPhantom> {
        let v = vector_of(&self.vocab, &findings)?;
        let s = render(&self.config, &v, &mut cvla::rng::substream(seed, "render")).map_err(err)?;
        phantom(py, s, &self.vocab)
    }

    /// `n` phantoms with each finding present independently at `prevalence`.
    #[pyo3(signature = (n, prevalence = 0.3))]
    fn sample(&self, py: Python<'_>, n: usize, prevalence: f64) -> PyResult<Vec<PyPhantom>> {
        let samples = sample_dataset(&self.config, n, &vec![prevalence; self.vocab.len()]).map_err(err)?;
        samples.into_iter().map(|s| phantom(py, s, &self.vocab)).collect()
    }
}

/// A black-box report generator: "a", "b" or "reference".
#[pyclass(name = "Generator", module = "cvla_py", frozen)]
struct PyGenerator(ReportGenerator);

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (id = "a", image_size = 64))]
    fn new(id: &str, image_size: usize) -> PyResult<Self> {
        let vocab = WorldConfig::default().vocabulary().map_err(err)?;
        let spec = GeneratorSpec::shipped(id, image_size).map_err(err)?;
        ReportGenerator::new(spec, vocab).map(Self).map_err(err)
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id().to_string()
    }

    fn vocabulary(&self) -> Vec<String> {
        self.0.vocabulary().names().to_vec()
    }

    fn report(&self, image: &PyImage) -> PyResult<String> {
        Ok(self.0.generate(&image.0).map_err(err)?.text)
    }

    /// Findings parsed back out of the generated report.
    fn findings(&self, image: &PyImage) -> PyResult<Vec<String>> {
        Ok(names_of(&self.0.infer(&image.0).map_err(err)?, self.0.vocabulary()))
    }

    fn prompt(&self, image: &PyImage) -> PyResult<String> {
        let v = self.0.infer(&image.0).map_err(err)?;
        Ok(cvla::blackbox::reorganize_prompt(&v, self.0.vocabulary()))
    }

    fn statistics(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        self.0.statistics(&image.0).map_err(err)
    }
}

/// A trained conditional denoiser.
#[pyclass(name = "Model", module = "cvla_py", frozen)]
struct PyModel {
    trained: TrainedCheckpoint,
    schedule: NoiseSchedule,
    net: Denoiser,
}

impl PyModel {
    fn from_trained(trained: TrainedCheckpoint) -> PyResult<Self> {
        let (schedule, net) = trained.checkpoint.restore().map_err(err)?;
        Ok(Self { trained, schedule, net })
    }

    fn explainer<'a>(&'a self, generator: &'a PyGenerator, ddim_steps: usize) -> PyResult<Explainer<'a>> {
        Ok(Explainer { ddim_steps, ..Explainer::new(&self.net, &self.schedule, &generator.0).map_err(err)? })
    }
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint written by `cvla train` or `Model.save`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text =
            std::fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        let trained = match serde_json::from_str::<TrainedCheckpoint>(&text) {
            Ok(t) => t,
            Err(_) => {
                let checkpoint = Checkpoint::load(&path).map_err(err)?;
                TrainedCheckpoint {
                    val_psnr: f64::NAN,
                    source: LabelSource::Tailored,
                    generator_id: String::new(),
                    checkpoint,
                }
            }
        };
        Self::from_trained(trained)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let text = serde_json::to_string(&self.trained).map_err(|e| PyValueError::new_err(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
    }

    #[getter]
    fn step(&self) -> u64 {
        self.trained.step()
    }

    #[getter]
    fn val_psnr(&self) -> f64 {
        self.trained.val_psnr
    }

    #[getter]
    fn generator_id(&self) -> String {
        self.trained.generator_id.clone()
    }

    /// DDIM inversion and resampling under the same findings.
    #[pyo3(signature = (image, findings, ddim_steps = 25))]
    fn reconstruct(&self, image: &PyImage, findings: Vec<String>, ddim_steps: usize) -> PyResult<PyImage> {
        let c = vector_of(&self.trained.checkpoint.vocabulary, &findings)?;
        cvla::diffusion::reconstruct(&self.net, &self.schedule, &image.0, &c, ddim_steps, &InversionConfig::default())
            .map(PyImage)
            .map_err(err)
    }

    /// The query with `remove` edited out of its inferred prompt; returns
    /// the image and the edited prompt.
    #[pyo3(signature = (image, generator, remove, ddim_steps = 25))]
    fn counterfactual(
        &self,
        image: &PyImage,
        generator: &PyGenerator,
        remove: &str,
        ddim_steps: usize,
    ) -> PyResult<(PyImage, String)> {
        let idx = generator.0.vocabulary().require(remove).map_err(err)?;
        let (img, prompt) = self.explainer(generator, ddim_steps)?.make_counterfactual(&image.0, idx).map_err(err)?;
        Ok((PyImage(img), prompt))
    }

    /// One removal per inferred finding, each checked by regenerating the
    /// report. Returns the record as a dict; `reconstruction` and each
    /// edit's `counterfactual` are `Image`s.
    #[pyo3(signature = (image, generator, ddim_steps = 25))]
    fn explain<'py>(
        &self,
        py: Python<'py>,
        image: &PyImage,
        generator: &PyGenerator,
        ddim_steps: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let record = self.explainer(generator, ddim_steps)?.explain(0, &image.0).map_err(err)?;
        let out = json_to_py(py, &record)?;
        let dict = out.cast::<PyDict>()?;
        dict.set_item("reconstruction", Py::new(py, PyImage(record.reconstruction.clone()))?)?;
        let edits = dict.get_item("edits")?.ok_or_else(|| PyValueError::new_err("record without edits"))?;
        let edits = edits.cast::<PyList>()?;
        for (i, edit) in record.edits.iter().enumerate() {
            edits.get_item(i)?.set_item("counterfactual", Py::new(py, PyImage(edit.counterfactual.clone()))?)?;
        }
        Ok(out)
    }
}

/// Renders `n_samples` phantoms, labels them with `generator`, and trains
/// a denoiser. `config` is an optional JSON object of training settings
/// (steps, checkpoint_every, seed, batch_size, learning_rate, source, arch,
/// schedule, ...). Returns one model per checkpoint.
#[pyfunction]
#[pyo3(signature = (world, generator, n_samples, prevalence = 0.3, val = 40, test = 100, config = None))]
fn train(
    world: &PyWorld,
    generator: &PyGenerator,
    n_samples: usize,
    prevalence: f64,
    val: usize,
    test: usize,
    config: Option<&str>,
) -> PyResult<Vec<PyModel>> {
    let cfg: TrainRunConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("training config: {e}")))?,
        None => TrainRunConfig::default(),
    };
    let samples = sample_dataset(&world.config, n_samples, &vec![prevalence; world.vocab.len()]).map_err(err)?;
    let dataset = prepare_dataset(&generator.0, &samples, SplitSizes { val, test }).map_err(err)?;
    let outcome = train_cvla(&dataset, &cfg, |_| {}).map_err(err)?;
    outcome.checkpoints.into_iter().map(PyModel::from_trained).collect()
}

/// Index of the model with the best validation PSNR, earliest on ties.
#[pyfunction]
fn select_checkpoint(models: Vec<PyRef<'_, PyModel>>) -> PyResult<usize> {
    let cks: Vec<TrainedCheckpoint> = models.iter().map(|m| m.trained.clone()).collect();
    cvla::cvla::select_checkpoint(&cks).map_err(err)
}

#[pyfunction]
fn reorganize_prompt(findings: Vec<String>, vocabulary: Vec<String>) -> PyResult<String> {
    let vocab = Vocabulary::new(vocabulary).map_err(err)?;
    Ok(cvla::blackbox::reorganize_prompt(&vector_of(&vocab, &findings)?, &vocab))
}

#[pyfunction]
fn parse_prompt(prompt: &str, vocabulary: Vec<String>) -> PyResult<Vec<String>> {
    let vocab = Vocabulary::new(vocabulary).map_err(err)?;
    Ok(names_of(&cvla::blackbox::parse_prompt(prompt, &vocab).map_err(err)?, &vocab))
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    cvla::diffusion::psnr(&a.0, &b.0).map_err(err)
}

type FrameTuple = (usize, usize, usize, usize, usize);

/// Difference frames between a query and its counterfactual, as
/// `(x0, y0, x1, y1, area)` tuples, largest first.
#[pyfunction]
#[pyo3(signature = (query, counterfactual, threshold = 95.0, blur_size = 5, blur_sigma = 1.0, k = 5))]
fn frames(
    query: &PyImage,
    counterfactual: &PyImage,
    threshold: f64,
    blur_size: usize,
    blur_sigma: f64,
    k: usize,
) -> PyResult<Vec<FrameTuple>> {
    let cfg = FrameConfig { threshold, blur_size, blur_sigma, k, ..Default::default() };
    let frame = cvla::frames::frame_pipeline(&query.0, &counterfactual.0, &cfg, None).map_err(err)?;
    Ok(frame.boxes.iter().map(|b| (b.bbox.x0, b.bbox.y0, b.bbox.x1, b.bbox.y1, b.area)).collect())
}

#[pymodule]
pub fn cvla_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyPhantom>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(select_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(reorganize_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(frames, m)?)?;
    Ok(())
}
