use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{build, Layer, LayerSpec, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One node of the network DAG.
#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub spec: LayerSpec,
    pub inputs: Vec<usize>,
    /// Output shape without the batch axis.
    pub out_shape: Vec<usize>,
    pub(crate) layer: Layer,
}

/// Incrementally assembles a network. Weights are drawn from the builder's
/// generator in node-insertion order.
pub struct NetBuilder {
    nodes: Vec<Node>,
    inputs: Vec<usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl NetBuilder {
    pub fn new(seed: u64) -> Self {
        Self { nodes: Vec::new(), inputs: Vec::new(), seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        let id = self.add(name, LayerSpec::Input { shape: shape.to_vec() }, &[])?;
        self.inputs.push(id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, spec: LayerSpec, inputs: &[usize]) -> Result<usize> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Build(format!("duplicate node name `{name}`")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Build(format!("node `{name}` refers to unknown node {bad}")));
        }
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.nodes[i].out_shape.clone()).collect();
        let (layer, out_shape) = build(&spec, name, &shapes, &mut self.rng)?;
        self.nodes.push(Node { name: name.to_string(), spec, inputs: inputs.to_vec(), out_shape, layer });
        Ok(self.nodes.len() - 1)
    }

    /// Appends `spec` after the most recently added node.
    pub fn then(&mut self, name: &str, spec: LayerSpec) -> Result<usize> {
        let last = self
            .nodes
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Build("no node to chain from".into()))?;
        self.add(name, spec, &[last])
    }

    pub fn shape_of(&self, id: usize) -> &[usize] {
        &self.nodes[id].out_shape
    }

    /// Copies a node (with its current weights) from another network.
    pub fn import(&mut self, node: &Node, inputs: &[usize], name: &str) -> Result<usize> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.nodes[i].out_shape.clone()).collect();
        let src_shapes = node.inputs.len();
        if shapes.len() != src_shapes {
            return Err(Error::shape(name, format!("expects {src_shapes} input(s), got {}", shapes.len())));
        }
        let mut layer = node.layer.clone();
        for p in layer.params_mut() {
            let tail = p.name.split_once('/').map(|(_, t)| t.to_string()).unwrap_or_default();
            p.name = format!("{name}/{tail}");
        }
        self.nodes.push(Node {
            name: name.to_string(),
            spec: node.spec.clone(),
            inputs: inputs.to_vec(),
            out_shape: node.out_shape.clone(),
            layer,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn finish(self, output: usize) -> Result<Net> {
        if self.inputs.is_empty() {
            return Err(Error::Build("network has no inputs".into()));
        }
        if output >= self.nodes.len() {
            return Err(Error::Build("output node out of range".into()));
        }
        let n = self.nodes.len();
        Ok(Net {
            nodes: self.nodes,
            inputs: self.inputs,
            output,
            seed: self.seed,
            rng: self.rng,
            taps: BTreeMap::new(),
            fusion_taps: Vec::new(),
            cache: vec![None; n],
            step: 0,
        })
    }
}

/// A trainable network: graph, weights, optimizer moments and generator.
#[derive(Debug, Clone)]
pub struct Net {
    pub nodes: Vec<Node>,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub seed: u64,
    pub(crate) rng: ChaCha8Rng,
    /// Named feature taps, e.g. `"hidden"`.
    pub taps: BTreeMap<String, usize>,
    /// Adapter nodes whose activations enter the complementary loss.
    pub fusion_taps: Vec<usize>,
    pub(crate) cache: Vec<Option<Tensor>>,
    /// Adam step counter.
    pub step: u64,
}

impl Net {
    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn tap(&self, tag: &str) -> Result<usize> {
        self.taps
            .get(tag)
            .copied()
            .or_else(|| self.node_id(tag))
            .ok_or_else(|| Error::State(format!("tap `{tag}` not found")))
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.inputs.iter().map(|&i| self.nodes[i].out_shape.clone()).collect()
    }

    pub fn output_width(&self) -> usize {
        self.nodes[self.output].out_shape.iter().product()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.nodes.iter().flat_map(|n| n.layer.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.nodes.iter_mut().flat_map(|n| n.layer.params_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Parameter values keyed by name, cloned.
    pub fn param_values(&self) -> BTreeMap<String, Tensor> {
        self.params().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn set_trainable(&mut self, node: usize, trainable: bool) {
        for p in self.nodes[node].layer.params_mut() {
            p.trainable = trainable;
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn regularization_loss(&self) -> f64 {
        self.params().filter(|p| p.trainable).map(|p| p.regularization_loss()).sum()
    }

    /// Node whose output feeds the final softmax.
    pub fn logits_node(&self) -> Result<usize> {
        let out = &self.nodes[self.output];
        match out.spec {
            LayerSpec::Softmax => Ok(out.inputs[0]),
            _ => Err(Error::State("network output is not a softmax".into())),
        }
    }

    /// Runs the graph and returns the output node's activations. All node
    /// activations stay cached for [`Net::backward`] and [`Net::cached`].
    pub fn forward(&mut self, inputs: &[&Tensor], train: bool) -> Result<Tensor> {
        self.forward_until(inputs, train, self.output)
    }

    /// Like [`Net::forward`] but stops once `target` has been computed.
    pub fn forward_until(&mut self, inputs: &[&Tensor], train: bool, target: usize) -> Result<Tensor> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::shape(
                "<inputs>",
                format!("network takes {} input(s), got {}", self.inputs.len(), inputs.len()),
            ));
        }
        let batch = inputs.first().map(|t| t.batch()).unwrap_or(0);
        for (&id, t) in self.inputs.iter().zip(inputs) {
            let node = &self.nodes[id];
            if t.shape().len() != node.out_shape.len() + 1 || t.shape()[1..] != node.out_shape[..] {
                return Err(Error::shape(
                    &node.name,
                    format!("expected (batch, {:?}), got {:?}", node.out_shape, t.shape()),
                ));
            }
            if t.batch() != batch || batch == 0 {
                return Err(Error::shape(&node.name, "inputs disagree on batch size or are empty"));
            }
        }
        self.cache.iter_mut().for_each(|c| *c = None);
        let mut next_input = 0;
        for id in 0..=target {
            let out = if matches!(self.nodes[id].layer, Layer::Input) {
                let t = inputs[next_input].clone();
                next_input += 1;
                t
            } else {
                let node = &mut self.nodes[id];
                let ins: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|&i| self.cache[i].as_ref().expect("topological order"))
                    .collect();
                node.layer.forward(&ins, &node.out_shape, train, &mut self.rng)
            };
            if !out.is_finite() {
                log::debug!("non-finite activation at node `{}`", self.nodes[id].name);
            }
            self.cache[id] = Some(out);
        }
        Ok(self.cache[target].clone().expect("computed"))
    }

    /// Activation of `node` from the last forward pass.
    pub fn cached(&self, node: usize) -> Result<&Tensor> {
        self.cache
            .get(node)
            .and_then(|c| c.as_ref())
            .ok_or_else(|| Error::State(format!("no cached activation for node {node}")))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            need[i] = n.layer.params().iter().any(|p| p.trainable) || n.inputs.iter().any(|&j| need[j]);
        }
        need
    }

    /// Reverse pass seeded with `(node, d loss / d activation)` pairs.
    /// Parameter gradients are accumulated, then regularization gradients of
    /// trainable parameters are added. Call [`Net::zero_grad`] first.
    pub fn backward(&mut self, seeds: &[(usize, Tensor)]) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        for (id, g) in seeds {
            let act = self.cached(*id)?;
            if act.shape() != g.shape() {
                return Err(Error::shape(
                    &self.nodes[*id].name,
                    format!("gradient shape {:?} does not match activation {:?}", g.shape(), act.shape()),
                ));
            }
            match &mut grads[*id] {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
        let need = self.needs_grad();
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !need[id] {
                continue;
            }
            let node = &mut self.nodes[id];
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&i| self.cache[i].as_ref().ok_or_else(|| Error::State("forward cache missing".into())))
                .collect::<Result<_>>()?;
            let out = self.cache[id].as_ref().ok_or_else(|| Error::State("forward cache missing".into()))?;
            let want_inputs = node.inputs.iter().any(|&i| need[i]);
            let in_grads = node.layer.backward(&ins, out, &g, want_inputs);
            for (&src, ig) in node.inputs.iter().zip(in_grads) {
                if !need[src] {
                    continue;
                }
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        for p in self.params_mut().filter(|p| p.trainable) {
            p.add_regularization_grad();
        }
        Ok(())
    }

    /// Runs eval-mode forward passes in chunks and stacks the activations of `node`.
    pub fn predict_node(&mut self, inputs: &[&Tensor], node: usize, chunk: usize) -> Result<Tensor> {
        let n = inputs.first().map(|t| t.batch()).unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidInput("no rows to predict".into()));
        }
        let chunk = chunk.max(1);
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let part: Vec<Tensor> = inputs.iter().map(|t| t.select_rows(&idx)).collect();
            let refs: Vec<&Tensor> = part.iter().collect();
            let out = self.forward_until(&refs, false, node)?;
            shape = out.shape().to_vec();
            data.extend_from_slice(out.data());
        }
        shape[0] = n;
        Tensor::new(shape, data)
    }

    pub fn predict(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.predict_node(inputs, self.output, 256)
    }

    /// Architecture listing: one entry per node with its spec and output shape.
    pub fn architecture(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.nodes
                .iter()
                .map(|n| {
                    serde_json::json!({
                        "name": n.name,
                        "layer": n.spec,
                        "inputs": n.inputs.iter().map(|&i| self.nodes[i].name.clone()).collect::<Vec<_>>(),
                        "output_shape": n.out_shape,
                        "params": n.layer.params().iter().map(|p| p.value.len()).sum::<usize>(),
                    })
                })
                .collect(),
        )
    }
}
