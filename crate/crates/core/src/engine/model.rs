use crate::error::{Error, Result};
use crate::layers::{InitSpec, LayerSpec, ParamGroup, ParamSet};
use crate::numkit::{Mat64, Rng, Vec64};

/// Which hidden states carry a loss term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossAttachment {
    /// Only `h_L`.
    Final,
    /// Every `h_1 … h_L` (one loss per cell).
    Every,
}

/// Loss head applied to the readout features of an attached state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// `½‖y − t‖²` on the features themselves; no parameters.
    Mse,
    /// Linear map to `out` values, then `½‖y − t‖²`.
    LinearMse { out: usize },
    /// Linear map to `classes` logits, then softmax cross-entropy.
    LinearSoftmax { classes: usize },
}

impl Head {
    pub fn out_dim(&self, readout: usize) -> usize {
        match *self {
            Head::Mse => readout,
            Head::LinearMse { out } => out,
            Head::LinearSoftmax { classes } => classes,
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self, Head::Mse)
    }
}

/// Per-attachment loss targets, one row per batch element.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Values(Mat64),
    Classes(Vec<usize>),
}

/// One minibatch: initial states, optional per-layer external inputs, and
/// targets for each attached index in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub h0: Vec64,
    pub inputs: Option<Vec<Mat64>>,
    pub targets: Vec<Targets>,
}

/// A chain of `L` layers with uniform state width, its parameters, and the
/// loss attached to it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    /// Parameter group used by each layer; RNN chains point every cell at
    /// the same group.
    pub layer_group: Vec<usize>,
    pub params: ParamSet,
    pub head: Head,
    pub attach: LossAttachment,
}

pub(crate) const HEAD_GROUP: &str = "head";

fn head_group(readout: usize, head: Head, rng: &mut Rng) -> Option<ParamGroup> {
    head.has_params().then(|| {
        let out = head.out_dim(readout);
        ParamGroup::new(
            HEAD_GROUP,
            vec![
                ("w", rng.normal_mat(readout, out, 1.0 / (readout as f64).sqrt())),
                ("b", Mat64::zeros(1, out)),
            ],
        )
    })
}

impl ModelGraph {
    /// Residual stack: every layer owns its parameters. Layer `i` is
    /// initialized from `rng.split(i)`, the head from `rng.split(L)`.
    pub fn stack(
        layers: Vec<LayerSpec>,
        head: Head,
        attach: LossAttachment,
        rng: &Rng,
        init: InitSpec,
    ) -> Result<Self> {
        let first = *layers
            .first()
            .ok_or_else(|| Error::Config("a model needs at least one layer".into()))?;
        let mut groups: Vec<ParamGroup> = layers
            .iter()
            .enumerate()
            .map(|(i, spec)| spec.init_params(&format!("layer{}", i + 1), &mut rng.split(i as u64), init))
            .collect();
        let l = layers.len();
        groups.extend(head_group(
            first.readout_range().len(),
            head,
            &mut rng.split(l as u64),
        ));
        Self::from_parts(layers, (0..l).collect(), ParamSet { groups }, head, attach)
    }

    /// Recurrent chain of `len` copies of `cell`, all sharing one group.
    pub fn recurrent(
        cell: LayerSpec,
        len: usize,
        head: Head,
        attach: LossAttachment,
        rng: &Rng,
        init: InitSpec,
    ) -> Result<Self> {
        let mut groups = vec![cell.init_params("cell", &mut rng.split(0), init)];
        groups.extend(head_group(cell.readout_range().len(), head, &mut rng.split(1)));
        Self::from_parts(vec![cell; len], vec![0; len], ParamSet { groups }, head, attach)
    }

    pub fn from_parts(
        layers: Vec<LayerSpec>,
        layer_group: Vec<usize>,
        params: ParamSet,
        head: Head,
        attach: LossAttachment,
    ) -> Result<Self> {
        let model = Self {
            layers,
            layer_group,
            params,
            head,
            attach,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Config("a model needs at least one layer".into()))?;
        if self.layer_group.len() != self.layers.len() {
            return Err(Error::Config("one parameter group per layer required".into()));
        }
        for (i, spec) in self.layers.iter().enumerate() {
            spec.validate()?;
            if spec.state_dim != first.state_dim || spec.readout_range() != first.readout_range() {
                return Err(Error::Config(format!("layer {} changes the state width", i + 1)));
            }
            let g = self
                .params
                .groups
                .get(self.layer_group[i])
                .ok_or_else(|| Error::Config(format!("layer {} has no parameter group", i + 1)))?;
            let shapes = spec.param_shapes();
            let ok = shapes.len() == g.params.len()
                && shapes
                    .iter()
                    .zip(&g.params)
                    .all(|(&(_, r, c), p)| p.value.shape() == (r, c));
            if !ok {
                return Err(Error::Config(format!(
                    "parameter group '{}' does not fit layer {}",
                    g.name,
                    i + 1
                )));
            }
        }
        match (self.head.has_params(), self.head_group()) {
            (true, Some(g)) => {
                let r = self.readout_dim();
                let out = self.head.out_dim(r);
                let p = &self.params.groups[g].params;
                if p.len() != 2 || p[0].value.shape() != (r, out) || p[1].value.shape() != (1, out) {
                    return Err(Error::Config("head parameters have the wrong shape".into()));
                }
            }
            (true, None) => return Err(Error::Config("head parameters missing".into())),
            (false, Some(_)) => return Err(Error::Config("MSE head takes no parameters".into())),
            (false, None) => {}
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.layers[0].state_dim
    }

    pub fn readout_dim(&self) -> usize {
        self.layers[0].readout_range().len()
    }

    pub fn head_group(&self) -> Option<usize> {
        self.params.groups.iter().position(|g| g.name == HEAD_GROUP)
    }

    /// Indices `i ∈ 1..=L` whose state carries a loss.
    pub fn attached_indices(&self) -> Vec<usize> {
        match self.attach {
            LossAttachment::Final => vec![self.len()],
            LossAttachment::Every => (1..=self.len()).collect(),
        }
    }

    pub fn group_of(&self, layer: usize) -> &ParamGroup {
        &self.params.groups[self.layer_group[layer]]
    }

    pub(crate) fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let d = self.state_dim();
        if batch.h0.len() % d != 0 {
            return Err(Error::shape("batch h0", format!("multiple of {d}"), batch.h0.len()));
        }
        let b = batch.h0.len() / d;
        let attached = self.attached_indices().len();
        if batch.targets.len() != attached {
            return Err(Error::shape("batch targets", attached, batch.targets.len()));
        }
        if let Some(inputs) = &batch.inputs {
            if inputs.len() != self.len() {
                return Err(Error::shape("batch inputs", self.len(), inputs.len()));
            }
        }
        let out = self.head.out_dim(self.readout_dim());
        for t in &batch.targets {
            match (self.head, t) {
                (Head::LinearSoftmax { classes }, Targets::Classes(c)) => {
                    if c.len() != b || c.iter().any(|&k| k >= classes) {
                        return Err(Error::Input("class targets out of range".into()));
                    }
                }
                (Head::Mse | Head::LinearMse { .. }, Targets::Values(m)) => {
                    if m.shape() != (b, out) {
                        return Err(Error::shape(
                            "batch targets",
                            format!("{b}x{out}"),
                            format!("{}x{}", m.rows(), m.cols()),
                        ));
                    }
                }
                _ => return Err(Error::Input("target kind does not match the head".into())),
            }
        }
        Ok(b)
    }
}
