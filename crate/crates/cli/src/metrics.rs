//! Training metrics as CSV.
//!
//! The schema is fixed at seven columns —
//! `iteration,task_id,pre_adapt_value_loss,post_adapt_value_loss,outer_awr_loss,eval_return_mean,eval_return_stderr`
//! — with an eighth trailing `method` column when the file records a
//! baseline comparison. The training command writes exactly one row per
//! outer iteration: losses are averaged over that iteration's task
//! minibatch (the quantity the outer step optimizes), the task_id field is
//! left empty on such aggregate rows, and on evaluation iterations the two
//! eval columns carry the mean over held-out tasks of the per-task mean
//! return and the standard error across those task means. Missing values
//! are empty fields. Floats use the shortest representation that
//! round-trips, so identical runs produce byte-identical files.

use std::io::{BufWriter, Write};
use std::path::Path;

use macaw_core::meta::IterationMetrics;

pub const METRICS_COLUMNS: [&str; 7] = [
    "iteration",
    "task_id",
    "pre_adapt_value_loss",
    "post_adapt_value_loss",
    "outer_awr_loss",
    "eval_return_mean",
    "eval_return_stderr",
];

/// One CSV row. Unlike the in-memory per-task metrics, the task id is
/// optional: rows that aggregate over a task minibatch leave it empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub iteration: usize,
    pub task_id: Option<usize>,
    pub pre_adapt_value_loss: Option<f64>,
    pub post_adapt_value_loss: Option<f64>,
    pub outer_awr_loss: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_stderr: Option<f64>,
}

impl From<&IterationMetrics> for CsvRow {
    fn from(m: &IterationMetrics) -> CsvRow {
        CsvRow {
            iteration: m.iteration,
            task_id: Some(m.task_id),
            pre_adapt_value_loss: m.pre_adapt_value_loss,
            post_adapt_value_loss: m.post_adapt_value_loss,
            outer_awr_loss: m.outer_awr_loss,
            eval_return_mean: m.eval_return_mean,
            eval_return_stderr: m.eval_return_stderr,
        }
    }
}

fn opt_f(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Format one metrics row, without the trailing newline.
pub fn metrics_row(row: &CsvRow, method: Option<&str>) -> String {
    let task = match row.task_id {
        Some(id) => id.to_string(),
        None => String::new(),
    };
    let mut out = format!(
        "{},{},{},{},{},{},{}",
        row.iteration,
        task,
        opt_f(row.pre_adapt_value_loss),
        opt_f(row.post_adapt_value_loss),
        opt_f(row.outer_awr_loss),
        opt_f(row.eval_return_mean),
        opt_f(row.eval_return_stderr),
    );
    if let Some(tag) = method {
        out.push(',');
        out.push_str(tag);
    }
    out
}

/// Streaming CSV writer for iteration metrics.
pub struct MetricsWriter {
    out: BufWriter<std::fs::File>,
    method: Option<String>,
}

impl MetricsWriter {
    /// Create the file and write the header. `method` adds the trailing
    /// method column and stamps every row with the given tag.
    pub fn create(path: &Path, method: Option<&str>) -> std::io::Result<MetricsWriter> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        let mut header = METRICS_COLUMNS.join(",");
        if method.is_some() {
            header.push_str(",method");
        }
        out.write_all(header.as_bytes())?;
        out.write_all(b"\n")?;
        Ok(MetricsWriter { out, method: method.map(String::from) })
    }

    /// Open an existing file for appending (resumed runs); writes no header.
    pub fn append(path: &Path, method: Option<&str>) -> std::io::Result<MetricsWriter> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { out: BufWriter::new(file), method: method.map(String::from) })
    }

    pub fn write(&mut self, row: &CsvRow) -> std::io::Result<()> {
        self.out.write_all(metrics_row(row, self.method.as_deref()).as_bytes())?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard error of the mean (n−1 denominator; 0 for n < 2).
pub fn stderr_of(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Folds the per-task metric stream from training into one row per
/// iteration: training-row losses are averaged over the task minibatch and
/// evaluation rows are summarized across held-out tasks.
pub struct RowAggregator {
    writer: MetricsWriter,
    iteration: Option<usize>,
    pre: Vec<f64>,
    post: Vec<f64>,
    awr: Vec<f64>,
    eval_means: Vec<f64>,
    written: usize,
}

impl RowAggregator {
    pub fn new(writer: MetricsWriter) -> RowAggregator {
        RowAggregator {
            writer,
            iteration: None,
            pre: Vec::new(),
            post: Vec::new(),
            awr: Vec::new(),
            eval_means: Vec::new(),
            written: 0,
        }
    }

    fn flush(&mut self) -> std::io::Result<()> {
        let Some(iteration) = self.iteration else { return Ok(()) };
        let pick = |xs: &Vec<f64>| if xs.is_empty() { None } else { Some(mean(xs)) };
        let row = CsvRow {
            iteration,
            task_id: None,
            pre_adapt_value_loss: pick(&self.pre),
            post_adapt_value_loss: pick(&self.post),
            outer_awr_loss: pick(&self.awr),
            eval_return_mean: pick(&self.eval_means),
            eval_return_stderr: if self.eval_means.is_empty() {
                None
            } else {
                Some(stderr_of(&self.eval_means))
            },
        };
        self.writer.write(&row)?;
        self.written += 1;
        self.pre.clear();
        self.post.clear();
        self.awr.clear();
        self.eval_means.clear();
        self.iteration = None;
        Ok(())
    }

    pub fn push(&mut self, m: &IterationMetrics) -> std::io::Result<()> {
        if self.iteration.is_some_and(|it| it != m.iteration) {
            self.flush()?;
        }
        self.iteration = Some(m.iteration);
        if let Some(v) = m.eval_return_mean {
            self.eval_means.push(v);
        } else {
            if let Some(v) = m.pre_adapt_value_loss {
                self.pre.push(v);
            }
            if let Some(v) = m.post_adapt_value_loss {
                self.post.push(v);
            }
            if let Some(v) = m.outer_awr_loss {
                self.awr.push(v);
            }
        }
        Ok(())
    }

    /// Flush the trailing iteration and return the total row count.
    pub fn finish(mut self) -> std::io::Result<usize> {
        self.flush()?;
        let written = self.written;
        self.writer.finish()?;
        Ok(written)
    }
}
