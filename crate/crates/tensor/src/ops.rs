use std::ops;

use crate::float::Float;
use crate::shape::{broadcast_data, broadcast_shape, broadcastable, numel, sum_to_data};
use crate::tensor::{Op, Tensor};

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn map<T: Float>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    a.data().iter().map(|&x| f(x)).collect()
}

impl<T: Float> Tensor<T> {
    fn aligned(&self, other: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let shape = broadcast_shape(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "shapes {:?} and {:?} do not broadcast",
                self.shape(),
                other.shape()
            )
        });
        (self.broadcast_to(&shape), other.broadcast_to(&shape))
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        let (a, b) = self.aligned(other);
        let data = zip_map(&a, &b, |x, y| x + y);
        Tensor::from_op(data, a.shape().to_vec(), Op::Add(a, b))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        let (a, b) = self.aligned(other);
        let data = zip_map(&a, &b, |x, y| x - y);
        Tensor::from_op(data, a.shape().to_vec(), Op::Sub(a, b))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (a, b) = self.aligned(other);
        let data = zip_map(&a, &b, |x, y| x * y);
        Tensor::from_op(data, a.shape().to_vec(), Op::Mul(a, b))
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        let (a, b) = self.aligned(other);
        let data = zip_map(&a, &b, |x, y| x / y);
        Tensor::from_op(data, a.shape().to_vec(), Op::Div(a, b))
    }

    pub fn neg(&self) -> Tensor<T> {
        Tensor::from_op(map(self, |x| -x), self.shape().to_vec(), Op::Neg(self.clone()))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        Tensor::from_op(map(self, |x| x * s), self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    pub fn offset(&self, s: T) -> Tensor<T> {
        Tensor::from_op(map(self, |x| x + s), self.shape().to_vec(), Op::Offset(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor<T> {
        Tensor::from_op(map(self, |x| x.sqrt()), self.shape().to_vec(), Op::Sqrt(self.clone()))
    }

    pub fn exp(&self) -> Tensor<T> {
        Tensor::from_op(map(self, |x| x.exp()), self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor<T> {
        Tensor::from_op(map(self, |x| x.ln()), self.shape().to_vec(), Op::Log(self.clone()))
    }

    pub fn tanh(&self) -> Tensor<T> {
        Tensor::from_op(map(self, |x| x.tanh()), self.shape().to_vec(), Op::Tanh(self.clone()))
    }

    pub fn square(&self) -> Tensor<T> {
        self.mul(self)
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let data = map(self, |x| if x > T::zero() { x } else { x * slope });
        Tensor::from_op(data, self.shape().to_vec(), Op::LeakyRelu(self.clone(), slope))
    }

    /// Constant tensor of local slopes of `leaky_relu` at `self`.
    pub(crate) fn leaky_relu_mask(&self, slope: T) -> Tensor<T> {
        Tensor::new(
            map(self, |x| if x > T::zero() { T::one() } else { slope }),
            self.shape(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        if shape == self.shape() {
            return self.clone();
        }
        Tensor::from_op(self.data().to_vec(), shape.to_vec(), Op::Reshape(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        if shape == self.shape() {
            return self.clone();
        }
        assert!(
            broadcastable(self.shape(), shape),
            "cannot broadcast {:?} to {:?}",
            self.shape(),
            shape
        );
        let data = broadcast_data(self.data(), self.shape(), shape);
        Tensor::from_op(data, shape.to_vec(), Op::BroadcastTo(self.clone()))
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor<T> {
        if shape == self.shape() {
            return self.clone();
        }
        assert!(
            broadcastable(shape, self.shape()),
            "cannot sum {:?} down to {:?}",
            self.shape(),
            shape
        );
        let data = sum_to_data(self.data(), self.shape(), shape);
        Tensor::from_op(data, shape.to_vec(), Op::SumTo(self.clone()))
    }

    pub fn sum(&self) -> Tensor<T> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel()).expect("count fits");
        self.sum().scale(T::one() / n)
    }

    /// Per-leading-index sum: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Tensor<T> {
        let n = self.shape()[0];
        self.reshape(&[n, self.numel() / n]).sum_to(&[n, 1]).reshape(&[n])
    }

    /// Per-leading-index mean: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&self) -> Tensor<T> {
        let n = self.shape()[0];
        let per = T::from_usize(self.numel() / n).expect("count fits");
        self.sum_per_sample().scale(T::one() / per)
    }
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident) => {
        impl<T: Float> ops::$trait<&Tensor<T>> for &Tensor<T> {
            type Output = Tensor<T>;
            fn $method(self, rhs: &Tensor<T>) -> Tensor<T> {
                Tensor::$method(self, rhs)
            }
        }
        impl<T: Float> ops::$trait<Tensor<T>> for Tensor<T> {
            type Output = Tensor<T>;
            fn $method(self, rhs: Tensor<T>) -> Tensor<T> {
                Tensor::$method(&self, &rhs)
            }
        }
        impl<T: Float> ops::$trait<&Tensor<T>> for Tensor<T> {
            type Output = Tensor<T>;
            fn $method(self, rhs: &Tensor<T>) -> Tensor<T> {
                Tensor::$method(&self, rhs)
            }
        }
    };
}

binary_operator!(Add, add);
binary_operator!(Sub, sub);
binary_operator!(Mul, mul);
binary_operator!(Div, div);

impl<T: Float> ops::Neg for &Tensor<T> {
    type Output = Tensor<T>;
    fn neg(self) -> Tensor<T> {
        Tensor::neg(self)
    }
}

impl<T: Float> ops::Neg for Tensor<T> {
    type Output = Tensor<T>;
    fn neg(self) -> Tensor<T> {
        Tensor::neg(&self)
    }
}
