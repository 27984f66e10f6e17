use super::kernels::RunningStats;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters plus batch-normalization running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].1
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0].1
    }

    /// Copies of every running-statistics entry, in creation order.
    pub fn stats_snapshot(&self) -> Vec<RunningStats> {
        self.stats.iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn restore_stats(&mut self, snapshot: Vec<RunningStats>) {
        assert_eq!(snapshot.len(), self.stats.len(), "statistics count");
        for ((_, s), new) in self.stats.iter_mut().zip(snapshot) {
            *s = new;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Every tensor worth persisting: parameters first, then running
    /// statistics as `<name>.running_mean` / `<name>.running_var`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(&[c], s.mean.clone()).expect("sized"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(&[c], s.var.clone()).expect("sized"),
            ));
        }
        out
    }

    /// Overwrites values from `tensors`. Every stored tensor must be present
    /// with a matching shape; extra entries are rejected.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected = self.params.len() + 2 * self.stats.len();
        if tensors.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                expected
            )));
        }
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t.clone())
        };
        for p in &mut self.params {
            p.value = lookup(&p.name, p.value.shape())?;
        }
        for (name, s) in &mut self.stats {
            let c = [s.mean.len()];
            s.mean = lookup(&format!("{name}.running_mean"), &c)?.into_data();
            s.var = lookup(&format!("{name}.running_var"), &c)?.into_data();
        }
        Ok(())
    }
}
