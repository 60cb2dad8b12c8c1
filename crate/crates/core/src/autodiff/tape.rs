use std::collections::BTreeMap;

use super::ops::{InputGrad, Op};
use super::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<S> {
    value: Tensor<S>,
    op: Option<Op<S>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Records operations in execution order, which is also a topological
/// order: every node's operands have smaller indices.
pub struct Tape<'s, S> {
    store: &'s ParamStore<S>,
    nodes: Vec<Node<S>>,
}

/// Result of a backward pass.
pub struct Grads<S> {
    params: BTreeMap<ParamId, Tensor<S>>,
    inputs: BTreeMap<usize, Tensor<S>>,
}

impl<S: Real> Grads<S> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }

    /// Gradient of a leaf created with [`Tape::input`].
    pub fn input(&self, v: Var) -> Option<&Tensor<S>> {
        self.inputs.get(&v.0)
    }
}

fn accumulate<S: Real>(
    slot: &mut Option<Tensor<S>>,
    shape: &[usize],
    g: InputGrad<S>,
) -> Result<()> {
    match g {
        InputGrad::Full(g) => match slot {
            Some(acc) => acc.add_assign(&g)?,
            None => *slot = Some(g),
        },
        InputGrad::TimeSlice { t, grad } => {
            let acc = slot.get_or_insert_with(|| Tensor::zeros(shape));
            let s = acc.act()?;
            let row = s.row_len();
            for b in 0..s.batch {
                let start = (b * s.time + t) * row;
                for (a, &v) in acc.data_mut()[start..start + row]
                    .iter_mut()
                    .zip(&grad.data()[b * row..(b + 1) * row])
                {
                    *a += v;
                }
            }
        }
    }
    Ok(())
}

impl<'s, S: Real> Tape<'s, S> {
    pub fn new(store: &'s ParamStore<S>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    /// A leaf whose gradient is reported by [`Grads::input`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, None, Vec::new(), true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<S>,
        op: Option<Op<S>>,
        inputs: Vec<usize>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `d loss / d node` from the scalar `loss` back to every
    /// parameter and watched input. Each node is visited once.
    pub fn backward(self, loss: Var) -> Result<Grads<S>> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        let mut out = Grads {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let Some(op) = &node.op else {
                if node.requires_grad {
                    out.inputs.insert(id, dy);
                }
                continue;
            };
            let operands: Vec<&Tensor<S>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let bp = op.backward(self.store, &operands, &node.value, &dy, &needs)?;
            for (&i, g) in node.inputs.iter().zip(bp.inputs) {
                if let Some(g) = g {
                    accumulate(&mut grads[i], self.nodes[i].value.shape(), g)?;
                }
            }
            for (pid, g) in bp.params {
                match out.params.get_mut(&pid) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.params.insert(pid, g);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<S: Real> Graph<S> for Tape<'_, S> {
    type Value = Var;

    fn store(&self) -> &ParamStore<S> {
        self.store
    }

    fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, None, Vec::new(), false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<S> {
        &self.nodes[v.0].value
    }

    fn apply(&mut self, op: Op<S>, inputs: &[&Var]) -> Result<Var> {
        let refs: Vec<&Tensor<S>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(self.store, &refs)?;
        let has_params = matches!(
            op,
            Op::Conv { .. } | Op::ConvTranspose { .. } | Op::Depthwise { .. } | Op::Dense { .. }
        );
        let requires_grad = has_params || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            value,
            Some(op),
            inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        ))
    }
}
