use super::{Graph, NodeId, Real, Tensor};

pub type ParamId = usize;

/// Named, ordered collection of trainable tensors.
///
/// Registration order is stable, which keeps checkpoints and optimizer
/// traversal deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Registers every parameter as a gradient-tracked leaf; returns the
    /// node ids in parameter order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| graph.leaf(t.clone())).collect()
    }

    /// Registers every parameter with gradient tracking disabled, for
    /// inference passes and frozen models.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = false;
                graph.leaf(t)
            })
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Order-independent fingerprint of all parameter bytes, used to
    /// verify that frozen models stay bit-identical.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tensors {
            for v in t.data() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Replaces stored tensors with `(name, tensor)` pairs, matching by name.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<(), String> {
        for (name, tensor) in entries {
            match self.find(&name) {
                Some(id) => {
                    if self.tensors[id].shape() != tensor.shape() {
                        return Err(format!(
                            "parameter {name}: shape {:?} does not match stored {:?}",
                            self.tensors[id].shape(),
                            tensor.shape()
                        ));
                    }
                    self.tensors[id] = tensor.with_grad();
                }
                None => return Err(format!("unknown parameter {name} in checkpoint")),
            }
        }
        Ok(())
    }

    pub fn apply_update(&mut self, id: ParamId, update: &[Real]) {
        let t = &mut self.tensors[id];
        debug_assert_eq!(t.numel(), update.len());
        for (v, &u) in t.data_mut().iter_mut().zip(update) {
            *v += u;
        }
    }
}
