use crate::tensor::Tensor;

/// A learnable tensor with its gradient buffer and optimizer multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub lr_mult: f64,
    pub wd_mult: f64,
    /// Projection applied after every optimizer step (`value = max(value, floor)`).
    pub floor: Option<f64>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param {
            value,
            grad,
            lr_mult: 1.0,
            wd_mult: 1.0,
            floor: None,
        }
    }

    pub fn with_multipliers(mut self, lr_mult: f64, wd_mult: f64) -> Self {
        self.lr_mult = lr_mult;
        self.wd_mult = wd_mult;
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = Some(floor);
        self
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn project(&mut self) {
        if let Some(floor) = self.floor {
            for v in self.value.data_mut() {
                if *v < floor {
                    *v = floor;
                }
            }
        }
    }
}
