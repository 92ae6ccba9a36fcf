//! Landmark prediction heads: small fully connected nets mapping latent
//! codes to the k anchor positions the blended blocks deform around.

use crate::diffcore::{mlp_forward, Activation, MlpParams, MlpSpec, NodeId, Tape};

/// Three weight layers, ReLU hidden activations, k*3 outputs.
#[derive(Debug, Clone)]
pub struct LandmarkNetSpec {
    pub in_dim: usize,
    pub hidden: usize,
    pub k: usize,
}

impl LandmarkNetSpec {
    pub fn new(in_dim: usize, hidden: usize, k: usize) -> Self {
        assert!(in_dim >= 1 && k >= 1);
        LandmarkNetSpec { in_dim, hidden, k }
    }

    pub fn mlp(&self) -> MlpSpec {
        MlpSpec::new(
            vec![self.in_dim, self.hidden, self.hidden, 3 * self.k],
            Activation::Relu,
            0.0,
        )
    }
}

/// codes: 1 x in_dim -> k x 3 landmark node.
pub fn predict_landmarks(
    tape: &mut Tape,
    spec: &LandmarkNetSpec,
    params: &MlpParams,
    codes: NodeId,
) -> NodeId {
    assert_eq!(tape.value(codes).cols(), spec.in_dim, "code width mismatch");
    let flat = mlp_forward(tape, &spec.mlp(), params, codes);
    tape.reshape(flat, vec![spec.k, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{init_mlp, params_from_tensors, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn output_is_k_by_3() {
        let spec = LandmarkNetSpec::new(8, 32, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tensors: Vec<_> = init_mlp(&spec.mlp(), &mut rng)
            .into_iter()
            .map(|(w, b)| (Arc::new(w), Arc::new(b)))
            .collect();
        let mut tape = Tape::new();
        let params = params_from_tensors(&mut tape, &tensors);
        let z = tape.input(Tensor::new(vec![1, 8], vec![0.2; 8]));
        let l = predict_landmarks(&mut tape, &spec, &params, z);
        assert_eq!(tape.value(l).shape, vec![5, 3]);
    }

    #[test]
    fn fixed_codes_are_deterministic() {
        let spec = LandmarkNetSpec::new(4, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tensors: Vec<_> = init_mlp(&spec.mlp(), &mut rng)
            .into_iter()
            .map(|(w, b)| (Arc::new(w), Arc::new(b)))
            .collect();
        let run = || {
            let mut tape = Tape::new();
            let params = params_from_tensors(&mut tape, &tensors);
            let z = tape.input(Tensor::new(vec![1, 4], vec![0.3, -0.1, 0.7, 0.0]));
            let l = predict_landmarks(&mut tape, &spec, &params, z);
            tape.value(l).clone()
        };
        assert_eq!(run(), run());
    }
}
