//! Task streams: labeled task datasets with disjoint label sets, consumed
//! through a cursor that enforces the pass budget of online learning.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bank::TaskId;
use crate::error::{Error, Result};
use crate::pdf::Label;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Labeled rows of a fixed width. May be empty (a test split can be).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<Label>,
}

impl Samples {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape(
                "samples",
                format!("{} values for {} rows of width {dim}", features.len(), labels.len()),
            ));
        }
        Ok(Self { dim, features, labels })
    }

    fn empty(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    fn push(&mut self, row: &[f64], label: Label) {
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// All rows as a matrix; `None` when empty.
    pub fn tensor(&self) -> Option<Tensor> {
        (!self.is_empty()).then(|| Tensor::matrix(self.len(), self.dim, self.features.clone()).expect("sized"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    task_id: TaskId,
    label_set: Vec<Label>,
    train: Samples,
    test: Samples,
}

impl TaskDataset {
    pub fn new(task_id: TaskId, train: Samples, test: Samples) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::contract(format!("task {task_id} has no training rows")));
        }
        if !test.is_empty() && test.dim() != train.dim() {
            return Err(Error::shape("task_dataset", "train and test widths differ"));
        }
        let label_set: Vec<Label> = train.labels().iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if let Some(l) = test.labels().iter().find(|l| label_set.binary_search(l).is_err()) {
            return Err(Error::contract(format!("task {task_id}: test label {l} never appears in training")));
        }
        Ok(Self {
            task_id,
            label_set,
            train,
            test,
        })
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn label_set(&self) -> &[Label] {
        &self.label_set
    }

    pub fn train(&self) -> &Samples {
        &self.train
    }

    pub fn test(&self) -> &Samples {
        &self.test
    }

    pub fn input_dim(&self) -> usize {
        self.train.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<TaskDataset>,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::contract("a stream needs at least one task"));
        }
        let dim = tasks[0].input_dim();
        let mut seen = BTreeSet::new();
        for (i, t) in tasks.iter().enumerate() {
            if t.input_dim() != dim {
                return Err(Error::shape("task_stream", format!("task {} has width {}, expected {dim}", t.task_id, t.input_dim())));
            }
            if i > 0 && t.task_id <= tasks[i - 1].task_id {
                return Err(Error::contract("task ids must be strictly increasing"));
            }
            for &l in &t.label_set {
                if !seen.insert(l) {
                    return Err(Error::contract(format!("label {l} appears in more than one task")));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].input_dim()
    }

    /// A cursor allowing at most `passes` training passes per task.
    pub fn cursor(&self, passes: usize) -> StreamCursor<'_> {
        StreamCursor {
            stream: self,
            next: 0,
            passes_used: 0,
            max_passes: passes,
        }
    }

    pub fn partition(&self) -> TaskPartition {
        TaskPartition {
            tasks: self.tasks.iter().map(|t| t.label_set.clone()).collect(),
        }
    }
}

/// Sequential access to a stream's training data. Once the cursor moves on
/// to task `t+1`, task `t`'s training rows are no longer reachable.
#[derive(Debug)]
pub struct StreamCursor<'a> {
    stream: &'a TaskStream,
    next: usize,
    passes_used: usize,
    max_passes: usize,
}

impl<'a> StreamCursor<'a> {
    pub fn next_task(&mut self) -> Option<&'a TaskDataset> {
        let task = self.stream.tasks.get(self.next)?;
        self.next += 1;
        self.passes_used = 0;
        Some(task)
    }

    pub fn passes_left(&self) -> usize {
        self.max_passes - self.passes_used
    }

    /// One pass over the current task: row indices split into shuffled
    /// batches.
    pub fn pass(&mut self, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        if self.next == 0 {
            return Err(Error::contract("no task has been started on this cursor"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let task = &self.stream.tasks[self.next - 1];
        if self.passes_used >= self.max_passes {
            return Err(Error::contract(format!(
                "task {} allows {} training pass(es); another was requested",
                task.task_id, self.max_passes
            )));
        }
        self.passes_used += 1;
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut seeded(seed));
        Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }
}

/// Label sets of each task, in stream order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPartition {
    pub tasks: Vec<Vec<Label>>,
}

impl TaskPartition {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (t, labels) in self.tasks.iter().enumerate() {
            if labels.is_empty() {
                return Err(Error::contract(format!("partition task {} has no labels", t + 1)));
            }
            for &l in labels {
                if !seen.insert(l) {
                    return Err(Error::contract(format!("label {l} is assigned to more than one task")));
                }
            }
        }
        if self.tasks.is_empty() {
            return Err(Error::contract("partition has no tasks"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: e.column() as u64,
            message: format!("partition line {}: {e}", e.line()),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string(self).expect("partition serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    fn task_of(&self) -> BTreeMap<Label, usize> {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(t, ls)| ls.iter().map(move |&l| (l, t)))
            .collect()
    }
}

/// Shuffles each class with `seed` and holds out one fifth of it (at
/// least one row once a class has two).
fn split_rows(rows: Vec<(Vec<f64>, Label)>, dim: usize, seed: u64) -> (Samples, Samples) {
    let mut by_class: BTreeMap<Label, Vec<Vec<f64>>> = BTreeMap::new();
    for (row, label) in rows {
        by_class.entry(label).or_default().push(row);
    }
    let mut train = Samples::empty(dim);
    let mut test = Samples::empty(dim);
    for (label, mut class_rows) in by_class {
        class_rows.shuffle(&mut seeded(derive_seed(seed, label as u64)));
        let n_test = if class_rows.len() >= 2 { (class_rows.len() / 5).max(1) } else { 0 };
        for (i, row) in class_rows.iter().enumerate() {
            if i < n_test {
                test.push(row, label);
            } else {
                train.push(row, label);
            }
        }
    }
    (train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub separation: f64,
    pub samples_per_class: usize,
    pub cluster_std: f64,
    /// Half-width of the center cube in units of `separation` (scaled up
    /// further when many classes must fit).
    pub center_spread: f64,
    pub seed: u64,
}

impl BlobConfig {
    /// Unit-std clusters, 100 samples per class, center spread 4.
    pub fn new(tasks: usize, classes_per_task: usize, dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            tasks,
            classes_per_task,
            dim,
            separation,
            samples_per_class: 100,
            cluster_std: 1.0,
            center_spread: 4.0,
            seed,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Cluster centers drawn uniformly from a cube of half-width
/// `spread · separation · max(1, count^(1/dim))`, each at least `separation`
/// from all others.
pub fn blob_centers(count: usize, dim: usize, separation: f64, spread: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Placement(format!("separation must be positive, got {separation}")));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Placement(format!("center spread must be positive, got {spread}")));
    }
    let half_width = spread * separation * (count as f64).powf(1.0 / dim as f64).max(1.0);
    let mut rng = seeded(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-half_width..=half_width)).collect();
            centers
                .iter()
                .all(|o| crate::tensor::sq_distance(o, &c).sqrt() >= separation)
                .then_some(c)
        });
        match placed {
            Some(c) => centers.push(c),
            None => {
                return Err(Error::Placement(format!(
                    "center {k} of {count} could not be placed {separation} apart after {PLACEMENT_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(centers)
}

/// Gaussian blob stream: task `t` (1-based) owns labels
/// `(t-1)·c .. t·c`, one cluster per label, 80/20 train/test split.
pub fn synth_blobs(config: &BlobConfig) -> Result<TaskStream> {
    let BlobConfig {
        tasks,
        classes_per_task,
        dim,
        separation,
        samples_per_class,
        cluster_std,
        center_spread,
        seed,
    } = *config;
    if tasks == 0 || classes_per_task == 0 || dim == 0 || samples_per_class == 0 {
        return Err(Error::config("blobs", "task, class, dimension and sample counts must be positive"));
    }
    if !(cluster_std >= 0.0 && cluster_std.is_finite()) {
        return Err(Error::config("cluster_std", "must be finite and non-negative"));
    }
    let centers = blob_centers(tasks * classes_per_task, dim, separation, center_spread, derive_seed(seed, 0))?;
    let mut rng = seeded(derive_seed(seed, 1));
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let mut rows = Vec::with_capacity(classes_per_task * samples_per_class);
        for c in 0..classes_per_task {
            let label = (t * classes_per_task + c) as Label;
            let center = &centers[label as usize];
            for _ in 0..samples_per_class {
                let row = center
                    .iter()
                    .map(|&m| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + cluster_std * e
                    })
                    .collect();
                rows.push((row, label));
            }
        }
        let (train, test) = split_rows(rows, dim, derive_seed(seed, 100 + t as u64));
        out.push(TaskDataset::new(t as TaskId + 1, train, test)?);
    }
    TaskStream::new(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    /// Digits select a column index, anything else a header name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub has_header: bool,
    pub label_column: LabelColumn,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            label_column: LabelColumn::Name("label".into()),
        }
    }
}

fn csv_err(row: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        row,
        message: message.into(),
    }
}

/// Reads a numeric CSV and groups its rows into tasks by `partition`.
/// Row numbers in errors are 1-based file lines.
pub fn ingest_csv(path: impl AsRef<Path>, options: &CsvOptions, partition: &TaskPartition, seed: u64) -> Result<TaskStream> {
    partition.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| csv_err(0, e.to_string()))?;

    let label_idx = match &options.label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !options.has_header {
                return Err(Error::config("label_column", "a column name needs a header row"));
            }
            let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::config("label_column", format!("no column named `{name}`")))?
        }
    };

    let task_of = partition.task_of();
    let mut width: Option<usize> = None;
    let mut per_task: Vec<Vec<(Vec<f64>, Label)>> = vec![Vec::new(); partition.tasks.len()];
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(csv_err(line, format!("expected {w} fields, found {}", record.len())));
        }
        if label_idx >= w {
            return Err(Error::config("label_column", format!("index {label_idx} but rows have {w} fields")));
        }
        if w < 2 {
            return Err(csv_err(line, "rows need at least one feature besides the label"));
        }
        let mut row = Vec::with_capacity(w - 1);
        let mut label = None;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(line, format!("column {c}: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("column {c}: non-finite value")));
            }
            if c == label_idx {
                if v.fract() != 0.0 || v < 0.0 || v > Label::MAX as f64 {
                    return Err(csv_err(line, format!("label `{cell}` is not a non-negative integer")));
                }
                label = Some(v as Label);
            } else {
                row.push(v);
            }
        }
        let label = label.expect("label column inside row");
        let t = *task_of
            .get(&label)
            .ok_or_else(|| csv_err(line, format!("label {label} is not in the task partition")))?;
        per_task[t].push((row, label));
    }
    let dim = width.ok_or_else(|| csv_err(0, "no data rows"))? - 1;

    let mut tasks = Vec::with_capacity(per_task.len());
    for (t, rows) in per_task.into_iter().enumerate() {
        let present: BTreeSet<Label> = rows.iter().map(|r| r.1).collect();
        if let Some(missing) = partition.tasks[t].iter().find(|l| !present.contains(l)) {
            return Err(Error::contract(format!("label {missing} of task {} has no rows", t + 1)));
        }
        let (train, test) = split_rows(rows, dim, derive_seed(seed, 100 + t as u64));
        tasks.push(TaskDataset::new(t as TaskId + 1, train, test)?);
    }
    TaskStream::new(tasks)
}

/// Writes every row of a stream (train then test, task by task) with a
/// `f0..f{d-1},label` header.
pub fn write_csv(stream: &TaskStream, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let dim = stream.input_dim();
    let header: Vec<String> = (0..dim).map(|i| format!("f{i}")).chain(["label".to_string()]).collect();
    writeln!(out, "{}", header.join(","))?;
    for task in stream.tasks() {
        for split in [task.train(), task.test()] {
            for i in 0..split.len() {
                let cells: Vec<String> = split.row(i).iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{},{}", cells.join(","), split.labels()[i])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
