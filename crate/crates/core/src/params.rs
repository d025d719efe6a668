//! Named parameter storage, tape binding and the Adam optimizer.

use std::collections::HashMap;

use ndarray::Zip;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Parameter groups with their own learning-rate treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Mapping,
    Synthesis,
    Discriminator,
    Predictor,
    /// Running statistics; never optimized.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Mat,
}

/// Ordered collection of named matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    /// Standard-normal initialized matrix.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Mat::from_shape_simple_fn(shape, || {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        self.add(name, group, value)
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: (usize, usize),
        v: f64,
    ) -> ParamId {
        self.add(name, group, Mat::from_elem(shape, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|x| x.is_finite()))
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    /// Gradient of `loss` for every bound parameter in `ids`; unbound or
    /// unreachable parameters get zero gradients.
    pub fn param_grads(&mut self, loss: Var, ids: &[ParamId]) -> Vec<Mat> {
        let vars: Vec<Option<Var>> = ids.iter().map(|id| self.bound.get(id).copied()).collect();
        let live: Vec<Var> = vars.iter().flatten().copied().collect();
        let grads = self.tape.grad(loss, &live);
        let mut it = grads.into_iter();
        ids.iter()
            .zip(vars)
            .map(|(id, v)| {
                let g = v.and_then(|_| it.next().flatten());
                match g {
                    Some(g) => self.tape.value(g).clone(),
                    None => Mat::zeros(self.store.get(*id).dim()),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0025,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a subset of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub ids: Vec<ParamId>,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let m = ids.iter().map(|id| Mat::zeros(store.get(*id).dim())).collect();
        let v = ids.iter().map(|id| Mat::zeros(store.get(*id).dim())).collect();
        Self {
            cfg,
            ids,
            m,
            v,
            steps: 0,
        }
    }

    /// Applies one update; `lr_mul` scales the step per parameter group.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr_mul: impl Fn(Group) -> f64) {
        assert_eq!(grads.len(), self.ids.len());
        self.steps += 1;
        let t = self.steps as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (k, id) in self.ids.iter().enumerate() {
            let lr = c.lr * lr_mul(store.param(*id).group);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            Zip::from(store.get_mut(*id))
                .and(m)
                .and(v)
                .and(&grads[k])
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + c.eps);
                });
        }
    }
}

/// `ema ← β·ema + (1 − β)·live` over the listed parameters.
pub fn ema_update(ema: &mut ParamStore, live: &ParamStore, ids: &[ParamId], beta: f64) {
    for id in ids {
        Zip::from(ema.get_mut(*id))
            .and(live.get(*id))
            .for_each(|e, &l| *e = beta * *e + (1.0 - beta) * l);
    }
}
