use super::{Tensor, TensorError};

/// A named model weight. Only trainable parameters track gradients.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    tensor: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor, trainable: bool) -> Self {
        Parameter { name: name.into(), tensor: tensor.requires_grad(trainable), trainable }
    }

    /// The leaf to feed into a forward pass.
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        if self.trainable != trainable {
            self.trainable = trainable;
            self.tensor = self.tensor.clone().requires_grad(trainable);
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    /// Swaps in `tensor` as this parameter's leaf, so gradients flow to the
    /// caller's tensor. Shapes must match.
    pub fn set_tensor(&mut self, tensor: Tensor) -> Result<(), TensorError> {
        if tensor.shape() != self.shape() {
            return Err(TensorError::Shape {
                op: "set_tensor",
                detail: format!("{}: {:?} cannot replace {:?}", self.name, tensor.shape(), self.shape()),
            });
        }
        self.tensor = tensor;
        Ok(())
    }

    /// Replaces the values, keeping name, shape and trainability. The new
    /// leaf starts with no gradient.
    pub fn assign(&mut self, data: Vec<f64>) {
        let shape = self.tensor.shape().to_vec();
        self.tensor = Tensor::new(data, &shape)
            .expect("assign must preserve the element count")
            .requires_grad(self.trainable);
    }
}
