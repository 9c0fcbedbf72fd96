use crate::error::{Error, Result};
use crate::numkit::Mat64;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat64,
}

/// Parameters owned by one layer, or shared by every cell of an RNN chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Param>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<(&str, Mat64)>) -> Self {
        Self {
            name: name.into(),
            params: params
                .into_iter()
                .map(|(n, value)| Param {
                    name: n.to_string(),
                    value,
                })
                .collect(),
        }
    }

    pub fn value(&self, i: usize) -> &Mat64 {
        &self.params[i].value
    }
}

/// Named float64 arrays grouped by owner. Declaration order (group order,
/// then array order) is the flattening order used everywhere.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    pub groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    params: g
                        .params
                        .iter()
                        .map(|p| Param {
                            name: p.name.clone(),
                            value: Mat64::zeros(p.value.rows(), p.value.cols()),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn arrays(&self) -> impl Iterator<Item = (String, &Mat64)> {
        self.groups.iter().flat_map(|g| {
            g.params
                .iter()
                .map(move |p| (format!("{}.{}", g.name, p.name), &p.value))
        })
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Mat64> {
        self.groups
            .iter_mut()
            .flat_map(|g| g.params.iter_mut().map(|p| &mut p.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, m) in self.arrays() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.params.len() == b.params.len()
                    && a
                        .params
                        .iter()
                        .zip(&b.params)
                        .all(|(p, q)| p.value.shape() == q.value.shape())
            })
    }

    pub(crate) fn check_same_shape(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(op, "matching parameter shapes", "different layout"));
        }
        Ok(())
    }

    /// Adds `arrays` into group `group`, array by array.
    pub(crate) fn accumulate(&mut self, group: usize, arrays: &[Mat64]) {
        let g = &mut self.groups[group];
        debug_assert_eq!(g.params.len(), arrays.len());
        for (p, a) in g.params.iter_mut().zip(arrays) {
            crate::numkit::add_into(p.value.as_mut_slice(), a.as_slice());
        }
    }
}
