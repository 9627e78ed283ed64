//! Python bindings for `cpe_core`, importable as `cpe`.
//!
//! Boxes cross the boundary as `BBox` objects or `(x, y, w, h)` tuples;
//! score matrices as lists of rows.

use std::fs;
use std::io::{BufReader, BufWriter, Write};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cpe_core::geometry::{self, Direction, ImageDims};
use cpe_core::harness::eval::{self, Detection, ImageDetections, MATCH_IOU};
use cpe_core::harness::gradcheck::{dcpe_gradcheck, total_loss_gradcheck};
use cpe_core::harness::scene::ProposalKind;
use cpe_core::harness::{self, GroundTruth, SyntheticScene, TrainConfig};
use cpe_core::mil::{self, ImageLabel, PseudoLabel};
use cpe_core::model::CpeModel;
use cpe_core::tensor::{read_checkpoint, write_checkpoint, Tensor};
use cpe_core::CpeError;

fn err(e: CpeError) -> PyErr {
    match e {
        CpeError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "BBox", module = "cpe", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox(geometry::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        geometry::BBox::new(x, y, w, h).map(Self).map_err(err)
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x()
    }

    #[getter]
    fn y(&self) -> f64 {
        self.0.y()
    }

    #[getter]
    fn w(&self) -> f64 {
        self.0.w()
    }

    #[getter]
    fn h(&self) -> f64 {
        self.0.h()
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: BoxArg) -> f64 {
        self.0.iou(&other.0)
    }

    fn contains(&self, other: BoxArg) -> bool {
        self.0.contains(&other.0)
    }

    /// `(x0, y0, x1, y1)`.
    fn corners(&self) -> (f64, f64, f64, f64) {
        let [a, b, c, d] = self.0.corners();
        (a, b, c, d)
    }

    fn as_tuple(&self) -> (f64, f64, f64, f64) {
        (self.0.x(), self.0.y(), self.0.w(), self.0.h())
    }

    fn __eq__(&self, other: BoxArg) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("BBox({}, {}, {}, {})", self.0.x(), self.0.y(), self.0.w(), self.0.h())
    }
}

/// A `BBox` or an `(x, y, w, h)` tuple.
struct BoxArg(geometry::BBox);

impl<'py> FromPyObject<'_, 'py> for BoxArg {
    type Error = PyErr;

    fn extract(ob: Borrowed<'_, 'py, PyAny>) -> PyResult<Self> {
        if let Ok(b) = ob.cast::<PyBBox>() {
            return Ok(BoxArg(b.get().0));
        }
        let (x, y, w, h): (f64, f64, f64, f64) = ob.extract()?;
        geometry::BBox::new(x, y, w, h).map(BoxArg).map_err(err)
    }
}

/// `(class_id, ap, corloc, top_iou)`; `None` where a class has no data.
type ClassRow = (usize, Option<f64>, Option<f64>, Option<f64>);

fn boxes(v: Vec<BoxArg>) -> Vec<geometry::BBox> {
    v.into_iter().map(|b| b.0).collect()
}

fn direction(name: &str) -> PyResult<Direction> {
    name.parse().map_err(err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Extends `box` towards `direction` (`L2R`, `R2L`, `T2B`, `B2T`) inside a
/// `width`×`height` image.
#[pyfunction]
#[pyo3(signature = (bbox, direction, width, height, t = 4.0, ratio_scaling = true))]
fn extend_box(bbox: BoxArg, direction: &str, width: f64, height: f64, t: f64, ratio_scaling: bool) -> PyResult<PyBBox> {
    let img = ImageDims::new(width, height).map_err(err)?;
    geometry::extend_box_with(&bbox.0, self::direction(direction)?, &img, t, ratio_scaling)
        .map(PyBBox)
        .map_err(err)
}

#[pyfunction]
fn iou(a: BoxArg, b: BoxArg) -> f64 {
    a.0.iou(&b.0)
}

/// Greedy per-class suppression; returns the kept indices in keep order.
#[pyfunction]
#[pyo3(signature = (boxes, scores, classes, iou_thresh = 0.3))]
fn nms(boxes: Vec<BoxArg>, scores: Vec<f64>, classes: Vec<usize>, iou_thresh: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() || boxes.len() != classes.len() {
        return Err(PyValueError::new_err("boxes, scores and classes differ in length"));
    }
    let dets: Vec<Detection> = boxes
        .iter()
        .zip(&scores)
        .zip(&classes)
        .map(|((b, &score), &class_id)| Detection {
            bbox: b.0,
            class_id,
            score,
        })
        .collect();
    // map kept detections back to input positions; duplicates take the
    // first unused match
    let mut used = vec![false; dets.len()];
    Ok(eval::nms(&dets, iou_thresh)
        .iter()
        .map(|k| {
            let i = (0..dets.len())
                .find(|&i| !used[i] && dets[i] == *k)
                .expect("kept detection comes from the input");
            used[i] = true;
            i
        })
        .collect())
}

/// Average precision in `[0,1]` for one class. `detections[i]` holds
/// `(box, class_id, score)` triples of image `i`; `ground_truth[i]` holds
/// `(box, class_id)` pairs. `None` when the class has no ground truth.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, class_id, iou_thresh = MATCH_IOU))]
fn average_precision(
    detections: Vec<Vec<(BoxArg, usize, f64)>>,
    ground_truth: Vec<Vec<(BoxArg, usize)>>,
    class_id: usize,
    iou_thresh: f64,
) -> PyResult<Option<f64>> {
    if detections.len() != ground_truth.len() {
        return Err(PyValueError::new_err("need one detection list per ground-truth list"));
    }
    let dets: Vec<ImageDetections> = detections
        .into_iter()
        .enumerate()
        .map(|(image, ds)| ImageDetections {
            image,
            detections: ds
                .into_iter()
                .map(|(b, class_id, score)| Detection {
                    bbox: b.0,
                    class_id,
                    score,
                })
                .collect(),
        })
        .collect();
    let gts: Vec<Vec<GroundTruth>> = ground_truth
        .into_iter()
        .map(|g| {
            g.into_iter()
                .map(|(b, class_id)| GroundTruth { bbox: b.0, class_id })
                .collect()
        })
        .collect();
    Ok(eval::average_precision(&dets, &gts, class_id, iou_thresh))
}

/// Pseudo-labels from seed scores: a class index per proposal, or `None`
/// for background.
#[pyfunction]
#[pyo3(signature = (scores, boxes, labels, tau = 0.1))]
fn refine_labels(
    scores: Vec<Vec<f64>>,
    boxes: Vec<BoxArg>,
    labels: Vec<f64>,
    tau: f64,
) -> PyResult<Vec<Option<usize>>> {
    let y = ImageLabel::new(labels).map_err(err)?;
    let out = mil::refine_labels(&matrix(scores)?, &self::boxes(boxes), &y, tau).map_err(err)?;
    Ok(out
        .into_iter()
        .map(|l| match l {
            PseudoLabel::Class(c) => Some(c),
            PseudoLabel::Background => None,
        })
        .collect())
}

/// Maximum relative gradient errors of the directional module and of the
/// full loss, in that order.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<(f64, f64)> {
    let a = dcpe_gradcheck(seed).map_err(err)?;
    let b = total_loss_gradcheck(seed).map_err(err)?;
    Ok((a.max_rel_error, b.max_rel_error))
}

#[pyclass(name = "Config", module = "cpe", from_py_object)]
#[derive(Clone)]
struct PyConfig(TrainConfig);

#[pymethods]
impl PyConfig {
    /// Defaults overridden by `key = value` lines.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        TrainConfig::parse(text).map(Self).map_err(err)
    }

    /// Sets one key and revalidates.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.0.clone();
        next.set(key, value).map_err(err)?;
        next.validate().map_err(err)?;
        self.0 = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, lr={}, iterations={})",
            self.0.seed, self.0.lr, self.0.iterations
        )
    }
}

#[pyclass(name = "Scene", module = "cpe", frozen)]
struct PyScene(SyntheticScene);

fn kind_name(k: ProposalKind) -> &'static str {
    match k {
        ProposalKind::NearGt => "near_gt",
        ProposalKind::Part => "part",
        ProposalKind::Partial => "partial",
        ProposalKind::Loose => "loose",
        ProposalKind::Background => "background",
        ProposalKind::Decoy => "decoy",
    }
}

#[pymethods]
impl PyScene {
    #[getter]
    fn id(&self) -> usize {
        self.0.id
    }

    #[getter]
    fn proposals(&self) -> Vec<PyBBox> {
        self.0.proposals.iter().copied().map(PyBBox).collect()
    }

    /// `(box, class_id)` pairs.
    #[getter]
    fn ground_truth(&self) -> Vec<(PyBBox, usize)> {
        self.0
            .ground_truth
            .iter()
            .map(|g| (PyBBox(g.bbox), g.class_id))
            .collect()
    }

    #[getter]
    fn label(&self) -> Vec<f64> {
        self.0.label.values().to_vec()
    }

    /// How each proposal was generated; empty for scenes read from disk.
    #[getter]
    fn kinds(&self) -> Vec<&'static str> {
        self.0.kinds.iter().map(|&k| kind_name(k)).collect()
    }

    /// `(channels, rows, cols)` of the feature map.
    #[getter]
    fn feature_shape(&self) -> (usize, usize, usize) {
        let f = &self.0.features;
        (f.channels(), f.height(), f.width())
    }

    /// Flattened feature values in channel, row, column order.
    fn features(&self) -> Vec<f64> {
        self.0.features.values().data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(id={}, objects={}, proposals={})",
            self.0.id,
            self.0.ground_truth.len(),
            self.0.proposals.len()
        )
    }
}

/// The scenes a config describes.
#[pyfunction]
fn generate_scenes(config: &PyConfig) -> PyResult<Vec<PyScene>> {
    let c = &config.0;
    Ok(harness::generate_dataset(c.data_seed, c.scenes, &c.scene)
        .map_err(err)?
        .into_iter()
        .map(PyScene)
        .collect())
}

fn scene_list(scenes: &[Bound<'_, PyScene>]) -> Vec<SyntheticScene> {
    scenes.iter().map(|s| s.get().0.clone()).collect()
}

#[pyclass(name = "Model", module = "cpe")]
struct PyModel {
    config: TrainConfig,
    model: CpeModel,
}

fn metrics_dict<'py>(py: Python<'py>, m: &eval::Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("map", m.map)?;
    d.set_item("corloc", m.mean_corloc)?;
    d.set_item("top_iou", m.mean_top_iou)?;
    let per_class: Vec<ClassRow> = m
        .classes
        .iter()
        .map(|c| (c.class_id, c.ap, c.corloc, c.top_iou))
        .collect();
    d.set_item("classes", per_class)?;
    Ok(d)
}

#[pymethods]
impl PyModel {
    /// Untrained parameters drawn from the config's seed.
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let model = CpeModel::new(config.0.model.clone(), config.0.seed).map_err(err)?;
        Ok(Self {
            config: config.0.clone(),
            model,
        })
    }

    /// `N×C` detection scores for the proposals of `scene`.
    fn predict(&self, py: Python<'_>, scene: &PyScene) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| {
            let prepared = self.model.prepare(&scene.0.sample())?;
            self.model.predict(&prepared)
        })
        .map(|t| rows_of(&t))
        .map_err(err)
    }

    /// Metrics dict: `map`, `corloc`, `top_iou` and per-class tuples.
    fn evaluate<'py>(&self, py: Python<'py>, scenes: Vec<Bound<'py, PyScene>>) -> PyResult<Bound<'py, PyDict>> {
        let scenes = scene_list(&scenes);
        let nms_iou = self.config.nms_iou;
        let m = py
            .detach(|| eval::evaluate(&self.model, &scenes, nms_iou))
            .map_err(err)?;
        metrics_dict(py, &m)
    }

    /// Mean total loss over `scenes`.
    fn loss(&self, py: Python<'_>, scenes: Vec<Bound<'_, PyScene>>) -> PyResult<f64> {
        let scenes = scene_list(&scenes);
        py.detach(|| {
            let items = harness::train::prepare_training(&self.model, &scenes)?;
            harness::train::mean_total_loss(&self.model, &items)
        })
        .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = fs::File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let mut w = BufWriter::new(f);
        write_checkpoint(&mut w, &self.config.to_text(), &self.model.store).map_err(err)?;
        w.flush().map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = fs::File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let ck = read_checkpoint(&mut BufReader::new(f)).map_err(err)?;
        let config = TrainConfig::parse(&ck.metadata).map_err(err)?;
        let mut model = CpeModel::new(config.model.clone(), config.seed).map_err(err)?;
        model.store.load_from(&ck.params).map_err(err)?;
        Ok(Self { config, model })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig(self.config.clone())
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.store.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Trains on `scenes` (the config's own scenes when omitted). Returns the
/// model and the per-iteration total loss.
#[pyfunction]
#[pyo3(signature = (config, scenes = None))]
fn train(py: Python<'_>, config: &PyConfig, scenes: Option<Vec<Bound<'_, PyScene>>>) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = config.0.clone();
    let scenes = scenes.map(|s| scene_list(&s));
    let result = py
        .detach(|| {
            let scenes = match scenes {
                Some(s) => s,
                None => harness::generate_dataset(cfg.data_seed, cfg.scenes, &cfg.scene)?,
            };
            harness::train(&cfg, &scenes)
        })
        .map_err(err)?;
    let curve = result.curve.iter().map(|r| r.losses.total).collect();
    Ok((
        PyModel {
            config: cfg,
            model: result.model,
        },
        curve,
    ))
}

#[pymodule]
fn cpe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(extend_box, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(refine_labels, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add(
        "DIRECTIONS",
        Direction::ALL.iter().map(|d| d.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
