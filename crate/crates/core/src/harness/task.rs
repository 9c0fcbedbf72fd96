//! Synthetic and file-backed sequence tasks. Every batch is a pure function
//! of the generator it is drawn from.

use std::path::{Path, PathBuf};

use crate::engine::{Batch, Head, LossAttachment, Targets};
use crate::error::{Error, Result};
use crate::numkit::{Mat64, Rng, Vec64};

/// Copy-memory alphabet size; the blank and the delimiter come after it.
pub const COPY_SYMBOLS: usize = 8;
/// Byte vocabulary plus one padding symbol.
pub const CHAR_VOCAB: usize = 257;

#[derive(Clone, Debug, PartialEq)]
pub enum TaskKind {
    /// Sum of the two marked values in a `(value, marker)` sequence.
    Adding,
    /// Recall a short symbol string after a run of blanks.
    Copy,
    /// Next-byte prediction on a UTF-8 text file.
    CharLm { path: PathBuf },
    /// Classify a sequence of feature rows read from CSV
    /// (`label,x_1,…,x_{L·F}` per line).
    RowImage {
        path: PathBuf,
        features: usize,
        classes: usize,
    },
    /// Regress `tanh(h_0·A)` for a fixed random `A`; for residual stacks,
    /// which take no per-layer input.
    Teacher,
}

/// What a task needs from the model it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskShape {
    pub input_dim: usize,
    pub head: Head,
    pub attach: LossAttachment,
    /// Whether the task feeds every layer an external input.
    pub recurrent: bool,
}

#[derive(Clone, Debug)]
enum Data {
    None,
    Text(Vec<u8>),
    Rows(Vec<(usize, Vec<f64>)>),
    Teacher(Mat64),
}

/// A task bound to a chain length, batch size, and state width, with any
/// file data loaded.
#[derive(Clone, Debug)]
pub struct Task {
    pub kind: TaskKind,
    pub len: usize,
    pub batch_size: usize,
    pub state_dim: usize,
    data: Data,
}

impl TaskKind {
    pub fn shape(&self, state_dim: usize) -> TaskShape {
        match self {
            TaskKind::Adding => TaskShape {
                input_dim: 2,
                head: Head::LinearMse { out: 1 },
                attach: LossAttachment::Final,
                recurrent: true,
            },
            TaskKind::Copy => TaskShape {
                input_dim: COPY_SYMBOLS + 2,
                head: Head::LinearSoftmax {
                    classes: COPY_SYMBOLS + 1,
                },
                attach: LossAttachment::Every,
                recurrent: true,
            },
            TaskKind::CharLm { .. } => TaskShape {
                input_dim: CHAR_VOCAB,
                head: Head::LinearSoftmax { classes: 256 },
                attach: LossAttachment::Every,
                recurrent: true,
            },
            TaskKind::RowImage { features, classes, .. } => TaskShape {
                input_dim: *features,
                head: Head::LinearSoftmax { classes: *classes },
                attach: LossAttachment::Final,
                recurrent: true,
            },
            TaskKind::Teacher => TaskShape {
                input_dim: 0,
                head: Head::LinearMse { out: state_dim },
                attach: LossAttachment::Final,
                recurrent: false,
            },
        }
    }
}

/// Length of the string to recall in a copy sequence of length `len`.
pub fn copy_len(len: usize) -> usize {
    10.min((len - 1) / 2)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn parse_rows(path: &Path, width: usize, classes: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let text = String::from_utf8(read(path)?)
        .map_err(|_| Error::Input(format!("{} is not valid UTF-8", path.display())))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Input(format!("{}:{}: {what}", path.display(), n + 1));
        let mut fields = line.split(',').map(str::trim);
        let label: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("label is not a non-negative integer"))?;
        if label >= classes {
            return Err(bad("label out of range"));
        }
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad("value is not a number")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != width {
            return Err(bad(&format!("expected {width} values, got {}", values.len())));
        }
        rows.push((label, values));
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

impl Task {
    /// Validates the task against the chain length and loads its data.
    /// `seed` fixes task-level constants such as the teacher matrix.
    pub fn new(kind: TaskKind, len: usize, batch_size: usize, state_dim: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 || state_dim == 0 {
            return Err(Error::Config("length, batch size, and width must be positive".into()));
        }
        let data = match &kind {
            TaskKind::Adding if len < 2 => {
                return Err(Error::Config("the adding task needs a length of at least 2".into()))
            }
            TaskKind::Copy if len < 3 => {
                return Err(Error::Config("the copy task needs a length of at least 3".into()))
            }
            TaskKind::Adding | TaskKind::Copy => Data::None,
            TaskKind::CharLm { path } => {
                let bytes = read(path)?;
                std::str::from_utf8(&bytes)
                    .map_err(|_| Error::Input(format!("{} is not valid UTF-8", path.display())))?;
                if bytes.len() < len + 1 {
                    return Err(Error::Input(format!(
                        "{} has {} bytes, a window needs {}",
                        path.display(),
                        bytes.len(),
                        len + 1
                    )));
                }
                Data::Text(bytes)
            }
            TaskKind::RowImage { path, features, classes } => {
                if *features == 0 || *classes < 2 {
                    return Err(Error::Config("row-image task needs features ≥ 1 and classes ≥ 2".into()));
                }
                Data::Rows(parse_rows(path, len * features, *classes)?)
            }
            TaskKind::Teacher => {
                let mut rng = Rng::new(seed).split(u64::MAX);
                Data::Teacher(rng.normal_mat(state_dim, state_dim, 1.5 / (state_dim as f64).sqrt()))
            }
        };
        Ok(Self {
            kind,
            len,
            batch_size,
            state_dim,
            data,
        })
    }

    pub fn shape(&self) -> TaskShape {
        self.kind.shape(self.state_dim)
    }

    /// Draws one batch from `rng`; `state_width` is the model's full state
    /// width (twice the cell width for an LSTM).
    pub fn batch(&self, rng: &mut Rng, state_width: usize) -> Batch {
        let (b, l) = (self.batch_size, self.len);
        let zeros = || Vec64::zeros(b * state_width);
        match &self.data {
            Data::None if self.kind == TaskKind::Adding => {
                let mut inputs = vec![Mat64::zeros(b, 2); l];
                let mut target = Mat64::zeros(b, 1);
                let half = l / 2;
                for row in 0..b {
                    let first = rng.below(half);
                    let second = half + rng.below(l - half);
                    let mut sum = 0.0;
                    for (t, x) in inputs.iter_mut().enumerate() {
                        let v = rng.uniform();
                        x.as_mut_slice()[row * 2] = v;
                        if t == first || t == second {
                            x.as_mut_slice()[row * 2 + 1] = 1.0;
                            sum += v;
                        }
                    }
                    target.as_mut_slice()[row] = sum;
                }
                Batch {
                    h0: zeros(),
                    inputs: Some(inputs),
                    targets: vec![Targets::Values(target)],
                }
            }
            Data::None => {
                let s = copy_len(l);
                let (blank, delim) = (COPY_SYMBOLS, COPY_SYMBOLS + 1);
                let width = COPY_SYMBOLS + 2;
                let mut inputs = vec![Mat64::zeros(b, width); l];
                let mut targets = vec![vec![blank; b]; l];
                for row in 0..b {
                    let symbols: Vec<usize> = (0..s).map(|_| rng.below(COPY_SYMBOLS)).collect();
                    for t in 0..l {
                        let tok = if t < s {
                            symbols[t]
                        } else if t == l - s - 1 {
                            delim
                        } else {
                            blank
                        };
                        inputs[t].as_mut_slice()[row * width + tok] = 1.0;
                        if t >= l - s {
                            targets[t][row] = symbols[t - (l - s)];
                        }
                    }
                }
                Batch {
                    h0: zeros(),
                    inputs: Some(inputs),
                    targets: targets.into_iter().map(Targets::Classes).collect(),
                }
            }
            Data::Text(bytes) => {
                let mut inputs = vec![Mat64::zeros(b, CHAR_VOCAB); l];
                let mut targets = vec![vec![0; b]; l];
                for row in 0..b {
                    let start = rng.below(bytes.len() - l);
                    for t in 0..l {
                        inputs[t].as_mut_slice()[row * CHAR_VOCAB + bytes[start + t] as usize] = 1.0;
                        targets[t][row] = bytes[start + t + 1] as usize;
                    }
                }
                Batch {
                    h0: zeros(),
                    inputs: Some(inputs),
                    targets: targets.into_iter().map(Targets::Classes).collect(),
                }
            }
            Data::Rows(rows) => {
                let f = match self.kind {
                    TaskKind::RowImage { features, .. } => features,
                    _ => unreachable!("row data only for the row-image task"),
                };
                let mut inputs = vec![Mat64::zeros(b, f); l];
                let mut labels = vec![0; b];
                for (row, label) in labels.iter_mut().enumerate() {
                    let (y, x) = &rows[rng.below(rows.len())];
                    *label = *y;
                    for (t, m) in inputs.iter_mut().enumerate() {
                        m.as_mut_slice()[row * f..(row + 1) * f].copy_from_slice(&x[t * f..(t + 1) * f]);
                    }
                }
                Batch {
                    h0: zeros(),
                    inputs: Some(inputs),
                    targets: vec![Targets::Classes(labels)],
                }
            }
            Data::Teacher(a) => {
                let d = self.state_dim;
                let h0 = rng.normal_mat(b, d, 1.0);
                let mut t = h0.matmul(a).expect("teacher is d×d");
                crate::numkit::tanh_in_place(t.as_mut_slice());
                Batch {
                    h0: Vec64::from_raw(h0.into_inner()),
                    inputs: None,
                    targets: vec![Targets::Values(t)],
                }
            }
        }
    }
}
