//! Named parameter storage with per-group read instrumentation.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    BaseEncoder,
    SharedEncoder,
    PrivateEncoder,
    Discriminator,
    Rpn,
    InstanceMlp,
    ClsHead,
    RegHead,
    InstanceDiscriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::BaseEncoder,
        ParamGroup::SharedEncoder,
        ParamGroup::PrivateEncoder,
        ParamGroup::Discriminator,
        ParamGroup::Rpn,
        ParamGroup::InstanceMlp,
        ParamGroup::ClsHead,
        ParamGroup::RegHead,
        ParamGroup::InstanceDiscriminator,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// N(0, std^2)
    Normal(f64),
    /// N(0, 2 / fan_in)
    He {
        fan_in: usize,
    },
}

#[derive(Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    reads: Vec<AtomicUsize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            reads: fresh_counters(),
        }
    }
}

fn fresh_counters() -> Vec<AtomicUsize> {
    ParamGroup::ALL
        .iter()
        .map(|_| AtomicUsize::new(0))
        .collect()
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            reads: fresh_counters(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Normal(std) => sample_normal(n, std, rng),
            Init::He { fan_in } => sample_normal(n, (2.0 / fan_in as f64).sqrt(), rng),
        };
        self.params.push(Param {
            name: name.into(),
            group,
            value: Tensor::from_vec(shape, data),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Reads a parameter value, counting the access against its group.
    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        let p = &self.params[id.0];
        self.reads[p.group.index()].fetch_add(1, Ordering::Relaxed);
        &p.value
    }

    /// Mutable access for optimisers and checkpoint loading; not counted.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn reads(&self, group: ParamGroup) -> usize {
        self.reads[group.index()].load(Ordering::Relaxed)
    }

    pub fn reset_reads(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sets every tensor in `group` to zero.
    pub fn zero_group(&mut self, group: ParamGroup) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.value.data_mut().fill(T::zero());
        }
    }
}

fn sample_normal<T: Scalar>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}
