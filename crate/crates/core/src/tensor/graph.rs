use super::Tensor;
use crate::error::{Error, Result};

/// Identity of a node on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
///
/// Implementations read the operation's inputs and output gradient from the
/// context and add their contribution to each tracked input's gradient.
pub trait BackwardRule: Send {
    fn backward(&self, ctx: &mut BackwardContext<'_>);
}

struct Node {
    value: Tensor,
    inputs: Vec<NodeId>,
    rule: Option<Box<dyn BackwardRule>>,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// A single reverse-mode computation graph.
///
/// Gradients accumulate across [`Graph::backward`] calls until
/// [`Graph::zero_grad`] is invoked.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct BackwardContext<'a> {
    nodes: &'a [Node],
    current: usize,
    grad_output: &'a [f64],
    scratch: &'a mut [Option<Vec<f64>>],
}

impl<'a> BackwardContext<'a> {
    pub fn input(&self, i: usize) -> &'a Tensor {
        &self.nodes[self.nodes[self.current].inputs[i].0].value
    }

    pub fn output(&self) -> &'a Tensor {
        &self.nodes[self.current].value
    }

    pub fn grad_output(&self) -> &'a [f64] {
        self.grad_output
    }

    /// Whether input `i` takes part in gradient computation.
    pub fn wants(&self, i: usize) -> bool {
        let id = self.nodes[self.current].inputs[i].0;
        self.nodes[id].tracked
    }

    /// Gradient accumulator of input `i`, or `None` when the input is untracked.
    pub fn grad_input(&mut self, i: usize) -> Option<&mut [f64]> {
        let id = self.nodes[self.current].inputs[i].0;
        let node = &self.nodes[id];
        if !node.tracked {
            return None;
        }
        let len = node.value.numel();
        Some(
            self.scratch[id]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_slice(),
        )
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Vec::new(), None, false)
    }

    /// Adds a leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Vec::new(), None, true)
    }

    /// Records an operation output. The node is tracked iff any input is.
    pub fn record(
        &mut self,
        value: Tensor,
        inputs: Vec<NodeId>,
        rule: impl BackwardRule + 'static,
    ) -> NodeId {
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tracked);
        let rule: Option<Box<dyn BackwardRule>> = if tracked { Some(Box::new(rule)) } else { None };
        self.push(value, inputs, rule, tracked)
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<NodeId>,
        rule: Option<Box<dyn BackwardRule>>,
        tracked: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            tracked,
            grad: None,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Accumulated gradient of a tracked node; `None` for constants.
    ///
    /// A tracked node that the loss does not reach reports zeros.
    pub fn grad(&self, id: NodeId) -> Option<std::borrow::Cow<'_, [f64]>> {
        let node = &self.nodes[id.0];
        if !node.tracked {
            return None;
        }
        Some(match &node.grad {
            Some(g) => std::borrow::Cow::Borrowed(g.as_slice()),
            None => std::borrow::Cow::Owned(vec![0.0; node.value.numel()]),
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every tracked node and adds it to the
    /// accumulated gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if let Some(rule) = &self.nodes[i].rule {
                let mut ctx = BackwardContext {
                    nodes: &self.nodes,
                    current: i,
                    grad_output: &g,
                    scratch: &mut scratch,
                };
                rule.backward(&mut ctx);
            }
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Number of recorded nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.rule.is_some()).count()
    }
}
