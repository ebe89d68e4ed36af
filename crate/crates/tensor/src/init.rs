use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    XavierUniform,
    Zeros,
    Ones,
}

impl FromStr for InitScheme {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xavier_uniform" => Ok(Self::XavierUniform),
            "zeros" => Ok(Self::Zeros),
            "ones" => Ok(Self::Ones),
            other => Err(TensorError::Config(format!("unknown init scheme {other:?}"))),
        }
    }
}

/// Fan-in and fan-out for a weight of the given shape, using the
/// `[d_out, d_in, ...]` layout.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
        [] => (1, 1),
    }
}

pub fn init_parameter(shape: &[usize], scheme: InitScheme, rng: &mut RngState) -> Tensor {
    assert!(!shape.is_empty(), "parameter shape must be non-empty");
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::Ones => Tensor::ones(shape),
        InitScheme::XavierUniform => {
            let (fan_in, fan_out) = fans(shape);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_ones() {
        let mut rng = RngState::new(0);
        assert_eq!(
            init_parameter(&[2, 2], InitScheme::Zeros, &mut rng).data(),
            &[0.0; 4]
        );
        assert_eq!(init_parameter(&[3], InitScheme::Ones, &mut rng).data(), &[1.0; 3]);
    }

    #[test]
    fn xavier_is_deterministic() {
        let a = init_parameter(&[100, 100], InitScheme::XavierUniform, &mut RngState::new(7));
        let b = init_parameter(&[100, 100], InitScheme::XavierUniform, &mut RngState::new(7));
        assert_eq!(a, b);
    }

    #[test]
    fn xavier_respects_bound() {
        let t = init_parameter(&[1000, 1000], InitScheme::XavierUniform, &mut RngState::new(3));
        let bound = (6.0f64 / 2000.0).sqrt();
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= bound, "{max} > {bound}");
        // a million uniform draws should come close to the edge
        assert!(max > 0.99 * bound);
    }

    #[test]
    fn parses_scheme_names() {
        assert_eq!("zeros".parse::<InitScheme>().unwrap(), InitScheme::Zeros);
        assert!("he_normal".parse::<InitScheme>().is_err());
    }
}
